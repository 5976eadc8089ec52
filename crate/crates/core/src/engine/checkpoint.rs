//! Parameter archives: one SARF file per tensor plus a text index.
//!
//! ```text
//! sargraph-checkpoint 1
//! epoch <next epoch>
//! step <optimizer steps>
//! param <index> <name> <trainable 0|1>
//! ```
//!
//! Parameter `i` is stored as `i.value.sarf` (run dtype) and its Adam
//! moments as `i.m.sarf` / `i.v.sarf` (f64).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{input_err, Result};
use crate::io::{read_sarf, write_sarf};
use crate::optim::ParamStore;
use crate::scalar::Scalar;

const HEADER: &str = "sargraph-checkpoint 1";

pub fn save<T: Scalar>(dir: &Path, params: &ParamStore<T>, next_epoch: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = format!(
        "{HEADER}\nepoch {next_epoch}\nstep {}\n",
        params.step_count()
    );
    for (i, p) in params.iter().enumerate() {
        writeln!(index, "param {i} {} {}", p.name, p.trainable as u8).expect("string write");
        write_sarf(&dir.join(format!("{i}.value.sarf")), &p.value)?;
        write_sarf(&dir.join(format!("{i}.m.sarf")), &p.m)?;
        write_sarf(&dir.join(format!("{i}.v.sarf")), &p.v)?;
    }
    fs::write(dir.join("index.txt"), index)?;
    Ok(())
}

/// Restores values, optimizer moments and step count into `params`, which
/// must have the same layout. Returns the epoch to continue from.
pub fn load<T: Scalar>(dir: &Path, params: &mut ParamStore<T>) -> Result<usize> {
    let index = fs::read_to_string(dir.join("index.txt"))
        .map_err(|e| input_err!("cannot read checkpoint index in {}: {e}", dir.display()))?;
    let mut lines = index.lines();
    if lines.next() != Some(HEADER) {
        return Err(input_err!("{} is not a checkpoint", dir.display()));
    }
    let mut field = |name: &str| -> Result<u64> {
        lines
            .next()
            .and_then(|l| l.strip_prefix(name))
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| input_err!("checkpoint index: missing `{name}`"))
    };
    let epoch = field("epoch")? as usize;
    let step = field("step")?;
    let entries: Vec<&str> = lines.filter(|l| !l.trim().is_empty()).collect();
    if entries.len() != params.len() {
        return Err(input_err!(
            "checkpoint has {} parameters, model has {}",
            entries.len(),
            params.len()
        ));
    }
    for (i, line) in entries.iter().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        let p = params.get_mut(i);
        if f.len() != 4 || f[0] != "param" || f[1] != i.to_string() || f[2] != p.name {
            return Err(input_err!(
                "checkpoint entry {i} does not match parameter `{}`",
                p.name
            ));
        }
        let value = read_sarf::<T>(&dir.join(format!("{i}.value.sarf")))?;
        let m = read_sarf::<f64>(&dir.join(format!("{i}.m.sarf")))?;
        let v = read_sarf::<f64>(&dir.join(format!("{i}.v.sarf")))?;
        if value.shape() != p.value.shape() || m.shape() != p.m.shape() || v.shape() != p.v.shape()
        {
            return Err(input_err!("checkpoint shape mismatch for `{}`", p.name));
        }
        p.value = value;
        p.m = m;
        p.v = v;
    }
    params.set_step_count(step);
    Ok(epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::AdamConfig;
    use crate::tensor::Tensor;

    #[test]
    fn round_trip_restores_everything() {
        let mut ps = ParamStore::<f32>::new();
        ps.add("w", Tensor::new(1, 2, vec![0.5, -1.25]).unwrap(), true);
        ps.add("rm", Tensor::new(1, 1, vec![3.0]).unwrap(), false);
        ps.accumulate_grad(0, &Tensor::from_rows(&[&[0.1, 0.2]]))
            .unwrap();
        ps.adam_step(0.01, &AdamConfig::default());
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &ps, 7).unwrap();

        let mut fresh = ParamStore::<f32>::new();
        fresh.add("w", Tensor::zeros(1, 2), true);
        fresh.add("rm", Tensor::zeros(1, 1), false);
        assert_eq!(load(dir.path(), &mut fresh).unwrap(), 7);
        assert_eq!(fresh.step_count(), 1);
        for i in 0..2 {
            assert_eq!(fresh.get(i).value, ps.get(i).value);
            assert_eq!(fresh.get(i).m, ps.get(i).m);
            assert_eq!(fresh.get(i).v, ps.get(i).v);
        }

        let mut other = ParamStore::<f32>::new();
        other.add("x", Tensor::zeros(1, 2), true);
        other.add("rm", Tensor::zeros(1, 1), false);
        assert!(load(dir.path(), &mut other).is_err());
    }
}
