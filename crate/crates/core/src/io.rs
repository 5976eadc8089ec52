//! Text and binary file formats.
//!
//! * Edge list: one `src dst [rel]` per line, `#` starts a comment line.
//! * Partition map: line `i` holds the partition id of node `i`.
//! * Node set: one node id per line.
//! * SARF tensor: `b"SARF"`, u32 version (1), u64 rows, u64 cols, u8 dtype
//!   (0 = f32, 1 = f64), then row-major little-endian values.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{input_err, Error, Result};
use crate::graph::{build_csr_typed, Edge, Graph, PartitionMap};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const SARF_MAGIC: &[u8; 4] = b"SARF";
pub const SARF_VERSION: u32 = 1;
const SARF_HEADER_LEN: usize = 4 + 4 + 8 + 8 + 1;

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|e| input_err!("cannot open {}: {e}", path.display()))
}

/// Parses an edge list. `num_nodes` defaults to `max id + 1`.
pub fn parse_edge_list(text: &str, num_nodes: Option<usize>) -> Result<Graph> {
    let mut edges = Vec::new();
    let mut typed = false;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parse = |s: &str| -> Result<usize> {
            s.parse::<usize>()
                .map_err(|_| input_err!("edge list line {}: bad integer {s:?}", lineno + 1))
        };
        match fields.as_slice() {
            [s, d] => edges.push(Edge::new(parse(s)?, parse(d)?)),
            [s, d, r] => {
                let rel = parse(r)?;
                if rel > u8::MAX as usize {
                    return Err(input_err!(
                        "edge list line {}: relation {rel} too large",
                        lineno + 1
                    ));
                }
                typed = true;
                edges.push(Edge::typed(parse(s)?, parse(d)?, rel as u8));
            }
            _ => {
                return Err(input_err!(
                    "edge list line {}: expected 2 or 3 fields, got {}",
                    lineno + 1,
                    fields.len()
                ))
            }
        }
    }
    let n = num_nodes.unwrap_or_else(|| {
        edges
            .iter()
            .map(|e| e.src.max(e.dst) + 1)
            .max()
            .unwrap_or(0)
    });
    build_csr_typed(&edges, n, typed)
}

pub fn read_edge_list(path: &Path, num_nodes: Option<usize>) -> Result<Graph> {
    let mut text = String::new();
    open(path)?.read_to_string(&mut text)?;
    parse_edge_list(&text, num_nodes)
}

pub fn write_edge_list(path: &Path, graph: &Graph) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    let typed = graph.edge_types().is_some();
    for e in graph.edges() {
        if typed {
            writeln!(out, "{} {} {}", e.src, e.dst, e.rel)?;
        } else {
            writeln!(out, "{} {}", e.src, e.dst)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_partition_map(path: &Path) -> Result<PartitionMap> {
    let reader = BufReader::new(open(path)?);
    let mut assignment = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let p: u32 = line
            .parse()
            .map_err(|_| input_err!("partition map line {}: bad id {line:?}", lineno + 1))?;
        assignment.push(p);
    }
    PartitionMap::from_assignment(assignment)
}

pub fn partition_map_text(pm: &PartitionMap) -> String {
    let mut s = String::with_capacity(pm.num_nodes() * 2);
    for &p in pm.assignment() {
        s.push_str(&p.to_string());
        s.push('\n');
    }
    s
}

pub fn write_partition_map(path: &Path, pm: &PartitionMap) -> Result<()> {
    fs::write(path, partition_map_text(pm))?;
    Ok(())
}

pub fn read_node_set(path: &Path) -> Result<Vec<usize>> {
    let reader = BufReader::new(open(path)?);
    let mut ids = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        ids.push(
            line.parse()
                .map_err(|_| input_err!("node set line {}: bad id {line:?}", lineno + 1))?,
        );
    }
    Ok(ids)
}

pub fn write_node_set(path: &Path, ids: &[usize]) -> Result<()> {
    let mut s = String::new();
    for id in ids {
        s.push_str(&id.to_string());
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// Serializes a tensor in SARF format with its own dtype.
pub fn encode_sarf<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(SARF_HEADER_LEN + t.nbytes());
    out.extend_from_slice(SARF_MAGIC);
    out.extend_from_slice(&SARF_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
    out.push(T::DTYPE.code());
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Decodes a SARF buffer into `T`, converting from the stored dtype.
pub fn decode_sarf<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    if bytes.len() < SARF_HEADER_LEN || &bytes[..4] != SARF_MAGIC {
        return Err(input_err!("not a SARF file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != SARF_VERSION {
        return Err(input_err!("unsupported SARF version {version}"));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let dtype =
        DType::from_code(bytes[24]).ok_or_else(|| input_err!("bad SARF dtype {}", bytes[24]))?;
    let body = &bytes[SARF_HEADER_LEN..];
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| input_err!("SARF shape overflow"))?;
    if body.len() != count * dtype.size() {
        return Err(input_err!(
            "SARF payload is {} bytes, expected {} for {rows}x{cols} {dtype:?}",
            body.len(),
            count * dtype.size()
        ));
    }
    let data: Vec<T> = match dtype {
        DType::F32 => body
            .chunks_exact(4)
            .map(|c| T::of_f64(f32::read_le(c) as f64))
            .collect(),
        DType::F64 => body
            .chunks_exact(8)
            .map(|c| T::of_f64(f64::read_le(c)))
            .collect(),
    };
    Tensor::new(rows, cols, data)
}

pub fn write_sarf<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode_sarf(t))?;
    Ok(())
}

pub fn read_sarf<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let mut bytes = Vec::new();
    open(path)?.read_to_end(&mut bytes)?;
    decode_sarf(&bytes).map_err(|e| match e {
        Error::Input(m) => input_err!("{}: {m}", path.display()),
        other => other,
    })
}

/// Reads a label file (one column of class ids, `-1` for unlabeled).
pub fn read_labels(path: &Path) -> Result<Vec<i64>> {
    let t: Tensor<f64> = read_sarf(path)?;
    if t.cols() != 1 {
        return Err(input_err!(
            "label file must have 1 column, found {}",
            t.cols()
        ));
    }
    Ok(t.data().iter().map(|&v| v.round() as i64).collect())
}

pub fn write_labels(path: &Path, labels: &[i64]) -> Result<()> {
    let t = Tensor::<f32>::new(labels.len(), 1, labels.iter().map(|&l| l as f32).collect())?;
    write_sarf(path, &t)
}
