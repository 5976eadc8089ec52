//! Training driver: configuration, model assembly, the epoch loop,
//! checkpoints and the mode comparison bench.

pub mod checkpoint;
pub mod config;
pub mod model;
pub mod trainer;

pub use config::{
    Activation, DTypeMode, DataSource, ExecMode, LayerConfig, LayerKind, PartitionSource,
    SynthSpec, TrainConfig, TransportKind,
};
pub use model::{Layer, Model};
pub use trainer::{
    bench_loopback, bench_worker, build_model, rank_path, run_worker, train_loopback, train_worker,
    BenchReport, BenchSummary, EpochRecord, MetricsSink, MfgTables, Prepared, RunReport,
    WorkerResult,
};
