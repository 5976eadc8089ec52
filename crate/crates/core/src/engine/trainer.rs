//! The per-worker training loop and the launchers around it.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use crate::autodiff::{log_softmax_nll, Tape};
use crate::data::{load_partition, Dataset};
use crate::engine::checkpoint;
use crate::engine::config::{ExecMode, LayerKind, TrainConfig};
use crate::engine::model::{
    forward, update_running_stats, Layer, LayerRecord, LocalTables, Model, PassSpec,
};
use crate::error::{input_err, Error, Result};
use crate::graph::{
    build_all_shard_blocks, compute_mfg_masks, PartitionLayout, PartitionMap, ShardBlock,
};
use crate::layers::{global_degrees, relation_degrees};
use crate::optim::{AdamConfig, ParamStore};
use crate::runtime::{
    allreduce_param_grads, ledger_check, sar_backward, BlockPlan, CommCounts, CommLedger,
    CommPhase, LedgerReport, MemoryLedger, MemoryTracker, RematPolicy, SarContext,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::transport::{loopback_world, Transport, TransportReducer};

/// Global node masks (`K + 1`) and one restricted block table per layer.
pub type MfgTables = (Vec<Vec<bool>>, Vec<Vec<Vec<ShardBlock>>>);

/// Graph-level tables shared by every worker of a run.
pub struct Prepared {
    pub dataset: Arc<Dataset>,
    pub partition: PartitionMap,
    pub layout: PartitionLayout,
    pub table: Vec<Vec<ShardBlock>>,
    /// Message flow graph masks (`K + 1` global node masks) and the
    /// restricted block table of each layer.
    pub mfg: Option<MfgTables>,
}

impl Prepared {
    pub fn new(cfg: &TrainConfig, dataset: Arc<Dataset>) -> Result<Self> {
        let pm = load_partition(cfg, &dataset.graph)?;
        Self::with_partition(cfg, dataset, pm)
    }

    pub fn with_partition(
        cfg: &TrainConfig,
        dataset: Arc<Dataset>,
        pm: PartitionMap,
    ) -> Result<Self> {
        pm.check_graph(&dataset.graph)?;
        let layout = PartitionLayout::new(&pm);
        let table = build_all_shard_blocks(&dataset.graph, &pm)?;
        let mfg = if cfg.mfg {
            let k = cfg.layers.len();
            let masks = compute_mfg_masks(&dataset.graph, &dataset.train, k);
            let tables = (0..k)
                .map(|l| BlockPlan::restricted_table(&table, &layout, &masks[l + 1]))
                .collect();
            Some((masks, tables))
        } else {
            None
        };
        Ok(Prepared {
            dataset,
            partition: pm,
            layout,
            table,
            mfg,
        })
    }

    pub fn num_parts(&self) -> usize {
        self.layout.num_parts()
    }
}

/// Metrics of one epoch on one worker.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub worker: usize,
    pub seconds: f64,
    pub memory: MemoryLedger,
    pub ledger: LedgerReport,
    pub comm: CommCounts,
    /// Global training loss (identical on every worker).
    pub loss: f64,
    pub train_acc: Option<f64>,
    pub val_acc: Option<f64>,
    pub test_acc: Option<f64>,
    /// Local rows computed by each layer.
    pub computed_rows: Vec<usize>,
}

pub struct WorkerResult<T: Scalar> {
    pub rank: usize,
    pub epochs: Vec<EpochRecord>,
    pub params: ParamStore<T>,
    /// All-reduced gradient of the last epoch, trainable parameters in
    /// registration order.
    pub last_grads: Vec<f64>,
}

/// Per-epoch CSV shared by the workers of one process.
pub struct MetricsSink {
    writer: Mutex<csv::Writer<File>>,
    mode: Option<ExecMode>,
}

const METRICS_HEADER: [&str; 13] = [
    "epoch",
    "worker",
    "epoch_seconds",
    "peak_resident_blocks",
    "peak_bytes",
    "fwd_feature_bytes",
    "bwd_feature_bytes",
    "bwd_gradient_bytes",
    "allreduce_bytes",
    "loss",
    "train_acc",
    "val_acc",
    "test_acc",
];

impl MetricsSink {
    pub fn create(path: &Path) -> Result<Self> {
        Self::open(path, None)
    }

    /// A bench CSV: the metrics columns preceded by `mode`.
    pub fn create_bench(path: &Path) -> Result<Self> {
        Self::open(path, Some(ExecMode::SarFused))
    }

    fn open(path: &Path, mode: Option<ExecMode>) -> Result<Self> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header: Vec<&str> = Vec::new();
        if mode.is_some() {
            header.push("mode");
        }
        header.extend(METRICS_HEADER);
        w.write_record(&header).map_err(csv_err)?;
        w.flush()?;
        Ok(MetricsSink {
            writer: Mutex::new(w),
            mode,
        })
    }

    pub fn write(&self, r: &EpochRecord, mode: ExecMode) -> Result<()> {
        let acc = |a: Option<f64>| a.map(|v| format!("{v:.6}")).unwrap_or_default();
        let mut row = Vec::with_capacity(14);
        if self.mode.is_some() {
            row.push(mode.name().to_string());
        }
        row.extend([
            r.epoch.to_string(),
            r.worker.to_string(),
            format!("{:.6}", r.seconds),
            r.memory.peak_resident.to_string(),
            r.memory.peak_bytes.to_string(),
            r.comm.fwd_feature_bytes.to_string(),
            r.comm.bwd_feature_bytes.to_string(),
            r.comm.bwd_gradient_bytes.to_string(),
            r.comm.allreduce_bytes.to_string(),
            format!("{:.10}", r.loss),
            acc(r.train_acc),
            acc(r.val_acc),
            acc(r.test_acc),
        ]);
        let mut w = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        w.write_record(&row).map_err(csv_err)?;
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Contract(format!("csv: {other:?}")),
    }
}

/// Rows of one split owned by this worker, with labels.
struct SplitRows {
    rows: Vec<usize>,
    labels: Vec<usize>,
}

impl SplitRows {
    fn new(split: &[usize], labels: &[i64], layout: &PartitionLayout, rank: usize) -> Self {
        let mut pairs: Vec<(usize, usize)> = split
            .iter()
            .filter(|&&v| layout.part_of(v) == rank)
            .map(|&v| (layout.local_index(v), labels[v] as usize))
            .collect();
        pairs.sort_unstable();
        SplitRows {
            rows: pairs.iter().map(|p| p.0).collect(),
            labels: pairs.iter().map(|p| p.1).collect(),
        }
    }

    fn correct<T: Scalar>(&self, logits: &Tensor<T>) -> usize {
        self.rows
            .iter()
            .zip(&self.labels)
            .filter(|&(&r, &y)| argmax(logits.row(r)) == y)
            .count()
    }
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (k, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = k;
        }
    }
    best
}

/// One worker's view of the run.
struct Worker<'a, T: Scalar> {
    cfg: &'a TrainConfig,
    model: Model,
    tables: LocalTables,
    features: Tensor<T>,
    plan: BlockPlan,
    mfg_plans: Option<Vec<BlockPlan>>,
    row_masks: Option<Vec<Arc<Vec<bool>>>>,
    train: SplitRows,
    val: SplitRows,
    test: SplitRows,
    train_total: usize,
    transport: &'a dyn Transport<T>,
    memory: MemoryTracker,
    comm: CommLedger,
}

impl<'a, T: Scalar> Worker<'a, T> {
    fn ctx(&self) -> SarContext<'_, T> {
        SarContext {
            transport: self.transport,
            memory: &self.memory,
            comm: &self.comm,
            prefetch: self.cfg.prefetch,
            policy: match self.cfg.mode {
                ExecMode::VanillaDp => RematPolicy::Retain,
                _ => RematPolicy::Sar,
            },
        }
    }

    fn train_epoch(&self, params: &mut ParamStore<T>, epoch: usize) -> Result<(f64, Vec<usize>)> {
        let ctx = self.ctx();
        let mut reducer = TransportReducer {
            transport: self.transport,
            comm: Some(&self.comm),
        };
        let mut tape = Tape::new();
        let input = tape.constant(self.features.clone())?;
        let plans: Vec<&BlockPlan> = match &self.mfg_plans {
            Some(p) => p.iter().collect(),
            None => vec![&self.plan; self.model.layers.len()],
        };
        let pass = PassSpec {
            epoch,
            train: true,
            seed: self.cfg.seed,
            mode: self.cfg.mode,
            plans: plans.clone(),
            row_masks: self.row_masks.as_deref(),
        };
        let fwd = forward(
            &self.model,
            params,
            &self.tables,
            input,
            &mut tape,
            &pass,
            &ctx,
            &mut reducer,
        )?;
        let normalizer = self.train_total as f64;
        let loss = tape.nll_loss(fwd.logits, &self.train.labels, &self.train.rows, normalizer)?;
        let (loss_share, _) = log_softmax_nll(
            tape.value(fwd.logits),
            &self.train.labels,
            &self.train.rows,
            normalizer,
        )?;
        let computed: Vec<usize> = fwd.records.iter().map(|r| r.computed_rows).collect();

        params.zero_grads();
        let mut records = fwd.records;
        {
            let mut sweep = tape.backward_sweep();
            sweep.seed(loss, Tensor::filled(1, 1, 1.0))?;
            while let Some((_, l, e_acc)) = sweep.run(&mut reducer)? {
                let e_z = self.layer_backward(&mut records, l, &e_acc, plans[l], &ctx, params)?;
                sweep.seed(records[l].z, e_z)?;
            }
            // Layers whose aggregate received no gradient still take part
            // in the error exchange.
            for l in (0..records.len()).rev() {
                if records[l].state.is_some() {
                    let zeros = Tensor::zeros(plans[l].local_rows, self.model.layers[l].out_dim);
                    self.layer_backward(&mut records, l, &zeros, plans[l], &ctx, params)?;
                }
            }
            let grads = sweep.into_gradients();
            for (id, g) in &grads.params {
                params.accumulate_grad(*id, g)?;
            }
        }
        drop(fwd.activations);

        allreduce_param_grads(params, self.transport, &self.comm)?;
        let mut buf = [loss_share];
        self.comm.record(CommPhase::AllReduce, 8);
        self.transport.allreduce_sum(&mut buf)?;
        params.adam_step(self.cfg.lr.lr(epoch), &AdamConfig::default());
        update_running_stats(&self.model, params, &records);
        Ok((buf[0], computed))
    }

    fn layer_backward(
        &self,
        records: &mut [LayerRecord<T>],
        l: usize,
        e_acc: &Tensor<f64>,
        plan: &BlockPlan,
        ctx: &SarContext<'_, T>,
        params: &mut ParamStore<T>,
    ) -> Result<Tensor<f64>> {
        let rec = &mut records[l];
        let state = rec.state.take().ok_or_else(|| {
            Error::Contract(format!("layer {l} aggregate reached twice in backward"))
        })?;
        let (e_z, theta) = sar_backward(rec.agg.as_ref(), rec.key, state, e_acc, plan, ctx)?;
        for (id, g) in theta_ids(&self.model.layers[l]).into_iter().zip(&theta) {
            params.accumulate_grad(id, g)?;
        }
        Ok(e_z)
    }

    /// Accuracy on each split with running batch statistics and no dropout.
    fn evaluate(&self, params: &ParamStore<T>, epoch: usize) -> Result<[Option<f64>; 3]> {
        let ctx = self.ctx();
        let mut reducer = TransportReducer {
            transport: self.transport,
            comm: None,
        };
        let mut tape = Tape::new();
        let input = tape.constant(self.features.clone())?;
        let pass = PassSpec {
            epoch,
            train: false,
            seed: self.cfg.seed,
            mode: self.cfg.mode,
            plans: vec![&self.plan; self.model.layers.len()],
            row_masks: None,
        };
        let fwd = forward(
            &self.model,
            params,
            &self.tables,
            input,
            &mut tape,
            &pass,
            &ctx,
            &mut reducer,
        )?;
        let logits = tape.value(fwd.logits);
        let mut counts = Vec::with_capacity(6);
        for s in [&self.train, &self.val, &self.test] {
            counts.push(s.correct(logits) as f64);
            counts.push(s.rows.len() as f64);
        }
        // Every worker has finished fetching once the counts are reduced.
        self.transport.allreduce_sum(&mut counts)?;
        for r in &fwd.records {
            self.transport.unpublish(r.key);
        }
        let acc = |k: usize| (counts[2 * k + 1] > 0.0).then(|| counts[2 * k] / counts[2 * k + 1]);
        Ok([acc(0), acc(1), acc(2)])
    }
}

fn theta_ids(layer: &Layer) -> Vec<usize> {
    match layer.cfg.kind {
        LayerKind::Sage => Vec::new(),
        LayerKind::Gat => layer.params.attn.into_iter().collect(),
        LayerKind::Rgcn => layer
            .params
            .bases
            .iter()
            .copied()
            .chain(layer.params.coef)
            .collect(),
    }
}

/// Builds the model and parameters every worker starts from.
pub fn build_model<T: Scalar>(
    cfg: &TrainConfig,
    dataset: &Dataset,
) -> Result<(Model, ParamStore<T>)> {
    Model::build::<T>(
        &cfg.layers,
        dataset.features.cols(),
        dataset.num_classes(),
        dataset.graph.num_relations(),
        cfg.seed,
    )
}

/// Runs the whole training loop on one worker.
pub fn run_worker<T: Scalar>(
    cfg: &TrainConfig,
    prep: &Prepared,
    transport: &dyn Transport<T>,
    sink: Option<&MetricsSink>,
) -> Result<WorkerResult<T>> {
    let rank = transport.rank();
    if transport.world_size() != prep.num_parts() {
        return Err(input_err!(
            "{} workers for {} partitions",
            transport.world_size(),
            prep.num_parts()
        ));
    }
    let ds = &prep.dataset;
    let layout = &prep.layout;
    let (model, mut params) = build_model::<T>(cfg, ds)?;
    let members = layout.members(rank);
    let rel_degree = if model.has_rgcn() {
        Some(Arc::new(relation_degrees(
            &ds.graph,
            members,
            model.max_relations(),
        )?))
    } else {
        None
    };
    let idx: Vec<usize> = members.iter().map(|&v| v as usize).collect();
    let (mfg_plans, row_masks) = match &prep.mfg {
        Some((masks, tables)) => {
            let plans = tables
                .iter()
                .map(|t| BlockPlan::new(t, layout, rank))
                .collect::<Result<Vec<_>>>()?;
            let local = masks
                .iter()
                .map(|m| Arc::new(idx.iter().map(|&v| m[v]).collect::<Vec<bool>>()))
                .collect();
            (Some(plans), Some(local))
        }
        None => (None, None),
    };
    let worker = Worker {
        cfg,
        tables: LocalTables {
            degree: Arc::new(global_degrees(&ds.graph, members)),
            rel_degree,
            node_ids: members.to_vec(),
        },
        model,
        features: ds.features.gather_rows(&idx).cast::<T>(),
        plan: BlockPlan::new(&prep.table, layout, rank)?,
        mfg_plans,
        row_masks,
        train: SplitRows::new(&ds.train, &ds.labels, layout, rank),
        val: SplitRows::new(&ds.val, &ds.labels, layout, rank),
        test: SplitRows::new(&ds.test, &ds.labels, layout, rank),
        train_total: ds.train.len(),
        transport,
        memory: MemoryTracker::new(),
        comm: CommLedger::new(),
    };

    let start = match &cfg.resume {
        Some(dir) => checkpoint::load(dir, &mut params)?,
        None => 0,
    };
    let mut epochs = Vec::new();
    for epoch in start..cfg.epochs {
        worker.memory.reset_peaks();
        worker.comm.reset();
        let t0 = Instant::now();
        let (loss, computed_rows) = worker.train_epoch(&mut params, epoch)?;
        let seconds = t0.elapsed().as_secs_f64();
        let memory = worker.memory.snapshot();
        let comm = worker.comm.counts();
        let last = epoch + 1 == cfg.epochs;
        let [train_acc, val_acc, test_acc] =
            if cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || last) {
                worker.evaluate(&params, epoch)?
            } else {
                [None; 3]
            };
        let rec = EpochRecord {
            epoch,
            worker: rank,
            seconds,
            ledger: ledger_check(&memory, cfg.prefetch),
            memory,
            comm,
            loss,
            train_acc,
            val_acc,
            test_acc,
            computed_rows,
        };
        if let Some(s) = sink {
            s.write(&rec, cfg.mode)?;
        }
        log::debug!("worker {rank} epoch {epoch}: loss {loss:.6}");
        epochs.push(rec);
    }
    if rank == 0 {
        if let Some(dir) = &cfg.checkpoint {
            checkpoint::save(dir, &params, cfg.epochs)?;
        }
    }
    let last_grads = params.flat_grads();
    Ok(WorkerResult {
        rank,
        epochs,
        params,
        last_grads,
    })
}

/// Results of every worker of a run, by rank.
pub struct RunReport<T: Scalar> {
    pub workers: Vec<WorkerResult<T>>,
}

impl<T: Scalar> RunReport<T> {
    /// Per-epoch global loss as seen by rank 0.
    pub fn losses(&self) -> Vec<f64> {
        self.workers[0].epochs.iter().map(|e| e.loss).collect()
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.workers[0].params
    }

    pub fn last(&self) -> &EpochRecord {
        self.workers[0].epochs.last().expect("at least one epoch")
    }

    /// Records of every worker for `epoch`.
    pub fn epoch(&self, epoch: usize) -> Vec<&EpochRecord> {
        self.workers
            .iter()
            .filter_map(|w| w.epochs.iter().find(|e| e.epoch == epoch))
            .collect()
    }
}

/// Picks the error that caused a failed run: the first one that is not a
/// consequence of another worker's abort.
fn root_error(errors: Vec<Error>) -> Error {
    let mut errors = errors.into_iter().peekable();
    let first = errors.next().expect("at least one error");
    if !matches!(first, Error::Aborted(_)) {
        return first;
    }
    errors
        .find(|e| !matches!(e, Error::Aborted(_)))
        .unwrap_or(first)
}

/// Runs every worker as a thread of this process over loopback transport.
pub fn train_loopback<T: Scalar>(cfg: &TrainConfig, prep: &Prepared) -> Result<RunReport<T>> {
    let sink = cfg
        .metrics
        .as_deref()
        .map(MetricsSink::create)
        .transpose()?;
    run_loopback(cfg, prep, sink.as_ref())
}

fn run_loopback<T: Scalar>(
    cfg: &TrainConfig,
    prep: &Prepared,
    sink: Option<&MetricsSink>,
) -> Result<RunReport<T>> {
    let world = loopback_world::<T>(prep.num_parts(), cfg.timeout);
    let results: Vec<Result<WorkerResult<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = world
            .iter()
            .map(|t| {
                s.spawn(move || {
                    let r = run_worker(cfg, prep, t, sink);
                    if let Err(e) = &r {
                        t.abort(&e.to_string());
                    }
                    r
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Contract("worker thread panicked".into())))
            })
            .collect()
    });
    let mut workers = Vec::with_capacity(results.len());
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(w) => workers.push(w),
            Err(e) => errors.push(e),
        }
    }
    if !errors.is_empty() {
        return Err(root_error(errors));
    }
    Ok(RunReport { workers })
}

/// Runs this process's worker over an existing transport (one process per
/// worker). The metrics file gets a `.rank<R>` suffix when there is more
/// than one worker.
pub fn train_worker<T: Scalar>(
    cfg: &TrainConfig,
    prep: &Prepared,
    transport: &dyn Transport<T>,
) -> Result<WorkerResult<T>> {
    let sink = match &cfg.metrics {
        Some(p) => Some(MetricsSink::create(&rank_path(
            p,
            transport.rank(),
            transport.world_size(),
        ))?),
        None => None,
    };
    let r = run_worker(cfg, prep, transport, sink.as_ref());
    if let Err(e) = &r {
        transport.abort(&e.to_string());
    }
    r
}

pub fn rank_path(path: &Path, rank: usize, world: usize) -> PathBuf {
    if world <= 1 {
        return path.to_path_buf();
    }
    let mut s = path.as_os_str().to_owned();
    s.push(format!(".rank{rank}"));
    PathBuf::from(s)
}

/// Aggregates of one bench mode.
#[derive(Debug, Clone)]
pub struct BenchSummary {
    pub mode: ExecMode,
    pub epochs: usize,
    pub mean_epoch_seconds: f64,
    /// Largest per-worker peak over all workers and epochs.
    pub peak_bytes: usize,
    pub peak_resident: usize,
    /// Bytes summed over workers, averaged over epochs.
    pub comm_per_epoch: CommCounts,
    pub ledger_passed: bool,
}

impl BenchSummary {
    fn from_records(mode: ExecMode, records: &[EpochRecord]) -> Self {
        let epochs: std::collections::BTreeSet<usize> = records.iter().map(|r| r.epoch).collect();
        let n = epochs.len().max(1) as u64;
        let total = records
            .iter()
            .fold(CommCounts::default(), |a, r| a + r.comm);
        let per_worker_epoch: f64 =
            records.iter().map(|r| r.seconds).sum::<f64>() / records.len().max(1) as f64;
        BenchSummary {
            mode,
            epochs: epochs.len(),
            mean_epoch_seconds: per_worker_epoch,
            peak_bytes: records
                .iter()
                .map(|r| r.memory.peak_bytes)
                .max()
                .unwrap_or(0),
            peak_resident: records
                .iter()
                .map(|r| r.memory.peak_resident)
                .max()
                .unwrap_or(0),
            comm_per_epoch: CommCounts {
                fwd_feature_bytes: total.fwd_feature_bytes / n,
                bwd_feature_bytes: total.bwd_feature_bytes / n,
                bwd_gradient_bytes: total.bwd_gradient_bytes / n,
                allreduce_bytes: total.allreduce_bytes / n,
            },
            ledger_passed: records
                .iter()
                .all(|r| r.ledger.passed || mode == ExecMode::VanillaDp),
        }
    }
}

impl std::fmt::Display for BenchSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<10} epochs={} mean_epoch_seconds={:.4} peak_bytes={} peak_resident={} p2p_bytes_per_epoch={} bwd_feature_bytes={} allreduce_bytes={}",
            self.mode.name(),
            self.epochs,
            self.mean_epoch_seconds,
            self.peak_bytes,
            self.peak_resident,
            self.comm_per_epoch.total_p2p(),
            self.comm_per_epoch.bwd_feature_bytes,
            self.comm_per_epoch.allreduce_bytes,
        )
    }
}

pub struct BenchReport {
    pub records: Vec<(ExecMode, EpochRecord)>,
    pub summaries: Vec<BenchSummary>,
}

impl BenchReport {
    pub fn summary(&self, mode: ExecMode) -> Option<&BenchSummary> {
        self.summaries.iter().find(|s| s.mode == mode)
    }
}

/// The training config adjusted for one bench mode.
pub fn bench_config(cfg: &TrainConfig, mode: ExecMode) -> TrainConfig {
    let mut c = cfg.clone();
    c.mode = mode;
    c.epochs = cfg.bench_epochs.max(1);
    c.eval_every = 0;
    c.checkpoint = None;
    c.resume = None;
    c.metrics = None;
    c
}

/// Runs `cfg.bench_modes` one after the other over loopback transport.
pub fn bench_loopback<T: Scalar>(cfg: &TrainConfig, prep: &Prepared) -> Result<BenchReport> {
    let sink = cfg
        .bench_output
        .as_deref()
        .map(MetricsSink::create_bench)
        .transpose()?;
    let mut records = Vec::new();
    let mut summaries = Vec::new();
    for &mode in &cfg.bench_modes {
        let c = bench_config(cfg, mode);
        let report = run_loopback::<T>(&c, prep, sink.as_ref())?;
        let recs: Vec<EpochRecord> = report.workers.into_iter().flat_map(|w| w.epochs).collect();
        summaries.push(BenchSummary::from_records(mode, &recs));
        records.extend(recs.into_iter().map(|r| (mode, r)));
    }
    Ok(BenchReport { records, summaries })
}

/// Bench on this process's worker over an existing transport.
pub fn bench_worker<T: Scalar>(
    cfg: &TrainConfig,
    prep: &Prepared,
    transport: &dyn Transport<T>,
) -> Result<BenchReport> {
    let sink = match &cfg.bench_output {
        Some(p) => Some(MetricsSink::create_bench(&rank_path(
            p,
            transport.rank(),
            transport.world_size(),
        ))?),
        None => None,
    };
    let mut records = Vec::new();
    let mut summaries = Vec::new();
    for &mode in &cfg.bench_modes {
        let c = bench_config(cfg, mode);
        let r = run_worker(&c, prep, transport, sink.as_ref());
        let w = match r {
            Ok(w) => w,
            Err(e) => {
                transport.abort(&e.to_string());
                return Err(e);
            }
        };
        transport.barrier()?;
        summaries.push(BenchSummary::from_records(mode, &w.epochs));
        records.extend(w.epochs.into_iter().map(|r| (mode, r)));
    }
    Ok(BenchReport { records, summaries })
}
