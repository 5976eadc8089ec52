//! `sargraph partition|train|bench --config <path>`.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sargraph_core::data::{load_partition, Dataset};
use sargraph_core::engine::{
    bench_loopback, bench_worker, train_loopback, train_worker, BenchReport, DTypeMode,
    EpochRecord, Prepared, TrainConfig, TransportKind,
};
use sargraph_core::graph::edge_cut;
use sargraph_core::io::write_partition_map;
use sargraph_core::transport::{read_rankfile, resolve_rank, TcpTransport};
use sargraph_core::{Error, Result, Scalar};

#[derive(Parser)]
#[command(
    name = "sargraph",
    version,
    about = "Distributed full-batch GNN training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Partition the graph and write the partition map to `partition_output`.
    Partition(Common),
    /// Train and print the final loss.
    Train(Common),
    /// Run a few epochs in every execution mode and compare them.
    Bench(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// This worker's rank (tcp transport; SAR_RANK overrides).
    #[arg(long)]
    rank: Option<usize>,
    /// `rank host:port` lines (tcp transport; SAR_RANKFILE overrides).
    #[arg(long)]
    rankfile: Option<PathBuf>,
    /// Overrides the config's `transport`.
    #[arg(long, value_enum)]
    transport: Option<TransportArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Loopback,
    Tcp,
}

impl Common {
    fn load(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::read(&self.config)?;
        if let Some(t) = self.transport {
            cfg.transport = match t {
                TransportArg::Loopback => TransportKind::Loopback,
                TransportArg::Tcp => TransportKind::Tcp,
            };
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Partition(c) => cmd_partition(c),
        Command::Train(c) => with_dtype(c, Run::Train),
        Command::Bench(c) => with_dtype(c, Run::Bench),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sargraph: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn cmd_partition(c: &Common) -> Result<()> {
    let cfg = c.load()?;
    let out = cfg
        .partition_output
        .clone()
        .ok_or_else(|| Error::Input("partition needs `partition_output` in the config".into()))?;
    let ds = Dataset::load(&cfg)?;
    let pm = load_partition(&cfg, &ds.graph)?;
    write_partition_map(&out, &pm)?;
    let sizes: Vec<String> = pm.part_sizes().iter().map(|s| s.to_string()).collect();
    println!(
        "parts={} sizes={} edge_cut={} edges={}",
        pm.num_parts(),
        sizes.join(","),
        edge_cut(&ds.graph, &pm),
        ds.graph.num_edges()
    );
    Ok(())
}

#[derive(Clone, Copy)]
enum Run {
    Train,
    Bench,
}

fn with_dtype(c: &Common, run: Run) -> Result<()> {
    let cfg = c.load()?;
    match cfg.dtype {
        DTypeMode::F32 => execute::<f32>(c, &cfg, run),
        DTypeMode::F64 => execute::<f64>(c, &cfg, run),
    }
}

fn execute<T: Scalar>(c: &Common, cfg: &TrainConfig, run: Run) -> Result<()> {
    let ds = Arc::new(Dataset::load(cfg)?);
    let prep = Prepared::new(cfg, ds)?;
    match cfg.transport {
        TransportKind::Loopback => match run {
            Run::Train => {
                let report = train_loopback::<T>(cfg, &prep)?;
                print_final(report.last());
            }
            Run::Bench => print_bench(&bench_loopback::<T>(cfg, &prep)?),
        },
        TransportKind::Tcp => {
            let (rank, file) = resolve_rank(c.rank, c.rankfile.clone())?;
            let addrs = read_rankfile(&file)?;
            if addrs.len() != prep.num_parts() {
                return Err(Error::Input(format!(
                    "rank file lists {} workers for {} partitions",
                    addrs.len(),
                    prep.num_parts()
                )));
            }
            let transport = TcpTransport::<T>::bind(rank, addrs, cfg.timeout)?;
            match run {
                Run::Train => {
                    let w = train_worker(cfg, &prep, &transport)?;
                    if let Some(last) = w.epochs.last() {
                        print_final(last);
                    }
                }
                Run::Bench => print_bench(&bench_worker(cfg, &prep, &transport)?),
            }
        }
    }
    Ok(())
}

fn print_final(r: &EpochRecord) {
    let acc = |a: Option<f64>| a.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
    println!(
        "final epoch={} loss={:.6} train_acc={} val_acc={} test_acc={}",
        r.epoch,
        r.loss,
        acc(r.train_acc),
        acc(r.val_acc),
        acc(r.test_acc)
    );
}

fn print_bench(report: &BenchReport) {
    for s in &report.summaries {
        println!("{s}");
    }
}
