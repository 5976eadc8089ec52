use std::net::TcpListener;
use std::sync::Arc;
use std::time::Duration;

use sargraph_core::data::Dataset;
use sargraph_core::engine::{
    bench_loopback, train_loopback, train_worker, DTypeMode, ExecMode, LayerConfig, LayerKind,
    PartitionSource, Prepared, RunReport, SynthSpec, TrainConfig,
};
use sargraph_core::optim::ParamStore;
use sargraph_core::transport::TcpTransport;
use sargraph_core::Scalar;

fn er(relations: usize) -> SynthSpec {
    SynthSpec::ErdosRenyi {
        nodes: 160,
        edges: 1200,
        features: 8,
        classes: 4,
        relations,
        seed: 3,
    }
}

fn layers(kind: LayerKind, n: usize) -> Vec<LayerConfig> {
    (0..n)
        .map(|l| {
            let mut c = LayerConfig::new(kind);
            if l + 1 < n {
                c.out = Some(12);
            }
            if kind == LayerKind::Gat {
                c.heads = 2;
            }
            c
        })
        .collect()
}

fn config(spec: SynthSpec, parts: usize, layers: Vec<LayerConfig>, epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::synthetic(spec, parts, layers);
    cfg.epochs = epochs;
    cfg.timeout = Duration::from_secs(60);
    cfg
}

fn run<T: Scalar>(cfg: &TrainConfig) -> RunReport<T> {
    let ds = Arc::new(Dataset::load(cfg).unwrap());
    let prep = Prepared::new(cfg, ds).unwrap();
    train_loopback::<T>(cfg, &prep).unwrap()
}

fn with_parts(cfg: &TrainConfig, parts: usize) -> TrainConfig {
    let mut c = cfg.clone();
    c.partition = PartitionSource::Balanced {
        n_parts: parts,
        seed: 0,
    };
    c
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1e-30))
        .fold(0.0, f64::max)
}

fn params_bits<T: Scalar>(p: &ParamStore<T>) -> Vec<Vec<f64>> {
    p.iter()
        .map(|x| x.value.data().iter().map(|v| v.as_f64()).collect())
        .collect()
}

#[test]
fn zero_learning_rate_keeps_loss_constant() {
    let mut ls = layers(LayerKind::Sage, 2);
    ls[0].dropout = 0.0;
    let mut cfg = config(er(1), 2, ls, 4);
    cfg.lr.base = 0.0;
    cfg.dtype = DTypeMode::F64;
    let losses = run::<f64>(&cfg).losses();
    for l in &losses {
        assert_eq!(*l, losses[0]);
    }
}

#[test]
fn worker_count_does_not_change_training() {
    for kind in [LayerKind::Sage, LayerKind::Gat, LayerKind::Rgcn] {
        let rel = if kind == LayerKind::Rgcn { 3 } else { 1 };
        let mut ls = layers(kind, 2);
        ls[0].batchnorm = true;
        let cfg = config(er(rel), 1, ls, 5);
        let base = run::<f64>(&cfg).losses();
        for parts in [2, 4] {
            for mode in ExecMode::ALL {
                let mut c = with_parts(&cfg, parts);
                c.mode = mode;
                c.prefetch = parts == 4;
                let got = run::<f64>(&c).losses();
                assert!(
                    max_rel(&got, &base) < 1e-10,
                    "{kind:?} parts={parts} {mode:?}: {got:?} vs {base:?}"
                );
            }
        }
    }
}

#[test]
fn workers_hold_identical_parameters() {
    let cfg = config(er(1), 3, layers(LayerKind::Gat, 2), 4);
    let report = run::<f32>(&cfg);
    let first = params_bits(&report.workers[0].params);
    for w in &report.workers[1..] {
        assert_eq!(params_bits(&w.params), first);
    }
}

#[test]
fn loss_decreases_on_learnable_data() {
    let spec = SynthSpec::Sbm {
        nodes: 200,
        blocks: 2,
        p_in: 0.08,
        p_out: 0.005,
        features: 8,
        noise: 1.0,
        seed: 1,
    };
    let cfg = config(spec, 2, layers(LayerKind::Sage, 2), 30);
    let losses = run::<f32>(&cfg).losses();
    assert!(losses.last().unwrap() < &(losses[0] * 0.5), "{losses:?}");
}

#[test]
fn message_flow_pruning_keeps_losses() {
    let mut cfg = config(er(1), 2, layers(LayerKind::Sage, 2), 3);
    cfg.dtype = DTypeMode::F64;
    if let sargraph_core::engine::DataSource::Synthetic { train_fraction, .. } = &mut cfg.data {
        *train_fraction = 0.1;
    }
    let full = run::<f64>(&cfg);
    cfg.mfg = true;
    let pruned = run::<f64>(&cfg);
    assert!(max_rel(&pruned.losses(), &full.losses()) < 1e-12);
    let rows = |r: &RunReport<f64>| {
        r.workers
            .iter()
            .map(|w| w.epochs[0].computed_rows.iter().sum::<usize>())
            .sum::<usize>()
    };
    assert!(rows(&pruned) < rows(&full));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let mut ls = layers(LayerKind::Sage, 2);
    ls[0].batchnorm = true;
    let cfg = config(er(1), 2, ls, 6);
    let whole = run::<f32>(&cfg);

    let dir = tempfile::tempdir().unwrap();
    let mut first = cfg.clone();
    first.epochs = 3;
    first.checkpoint = Some(dir.path().to_path_buf());
    run::<f32>(&first);
    let mut second = cfg.clone();
    second.resume = Some(dir.path().to_path_buf());
    let resumed = run::<f32>(&second);
    assert_eq!(resumed.workers[0].epochs[0].epoch, 3);
    assert_eq!(params_bits(resumed.params()), params_bits(whole.params()));
    assert_eq!(resumed.losses(), whole.losses()[3..].to_vec());
}

#[test]
fn metrics_csv_has_one_row_per_worker_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    let mut cfg = config(er(1), 2, layers(LayerKind::Sage, 2), 3);
    cfg.metrics = Some(path.clone());
    run::<f32>(&cfg);
    let mut rd = csv::Reader::from_path(&path).unwrap();
    let header: Vec<String> = rd.headers().unwrap().iter().map(String::from).collect();
    for col in [
        "epoch",
        "worker",
        "epoch_seconds",
        "peak_resident_blocks",
        "peak_bytes",
        "fwd_feature_bytes",
        "bwd_feature_bytes",
        "allreduce_bytes",
    ] {
        assert!(header.iter().any(|h| h == col), "missing {col}");
    }
    assert_eq!(rd.records().count(), 6);
}

#[test]
fn config_file_drives_training() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.conf");
    std::fs::write(
        &path,
        "# small run\nsynthetic = er\nsynthetic.nodes = 80\nsynthetic.edges = 400\nn_parts = 2\nlayer_type = gat\nheads = 2\nhidden = 8\nepochs = 2\ndtype = f64\nmetrics = out.csv\n",
    )
    .unwrap();
    let cfg = TrainConfig::read(&path).unwrap();
    assert_eq!(
        cfg.metrics.as_deref(),
        Some(dir.path().join("out.csv").as_path())
    );
    let report = run::<f64>(&cfg);
    assert_eq!(report.losses().len(), 2);
    assert!(dir.path().join("out.csv").exists());
}

#[test]
fn tcp_training_matches_loopback() {
    let cfg = config(er(1), 2, layers(LayerKind::Gat, 2), 3);
    let want = run::<f32>(&cfg);
    let ds = Arc::new(Dataset::load(&cfg).unwrap());
    let prep = Prepared::new(&cfg, ds).unwrap();
    let listeners: Vec<TcpListener> = (0..2)
        .map(|_| TcpListener::bind("127.0.0.1:0").unwrap())
        .collect();
    let addrs: Vec<_> = listeners.iter().map(|l| l.local_addr().unwrap()).collect();
    let results: Vec<_> = std::thread::scope(|s| {
        let hs: Vec<_> = listeners
            .into_iter()
            .enumerate()
            .map(|(rank, l)| {
                let (cfg, prep, addrs) = (&cfg, &prep, addrs.clone());
                s.spawn(move || {
                    let t =
                        TcpTransport::<f32>::with_listener(rank, l, addrs, Duration::from_secs(60))
                            .unwrap();
                    train_worker(cfg, prep, &t).unwrap()
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for w in &results {
        let losses: Vec<f64> = w.epochs.iter().map(|e| e.loss).collect();
        assert_eq!(losses, want.losses());
        assert_eq!(params_bits(&w.params), params_bits(want.params()));
    }
}

#[test]
fn bench_reports_every_mode() {
    let mut cfg = config(er(1), 4, layers(LayerKind::Gat, 2), 1);
    cfg.bench_epochs = 2;
    let ds = Arc::new(Dataset::load(&cfg).unwrap());
    let prep = Prepared::new(&cfg, ds).unwrap();
    let report = bench_loopback::<f32>(&cfg, &prep).unwrap();
    assert_eq!(report.summaries.len(), 3);
    let vanilla = report.summary(ExecMode::VanillaDp).unwrap();
    let fused = report.summary(ExecMode::SarFused).unwrap();
    assert!(fused.ledger_passed);
    assert!(fused.peak_resident <= 2);
    assert!(vanilla.peak_resident > 2);
    assert!(fused.peak_bytes < vanilla.peak_bytes);
    let ratio = fused.comm_per_epoch.total_p2p() as f64 / vanilla.comm_per_epoch.total_p2p() as f64;
    assert!((1.4..=1.6).contains(&ratio), "ratio {ratio}");
}

#[test]
fn invalid_partition_count_is_rejected() {
    let cfg = config(er(1), 1000, layers(LayerKind::Sage, 2), 1);
    let ds = Arc::new(Dataset::load(&cfg).unwrap());
    assert!(Prepared::new(&cfg, ds).is_err());
}
