//! Flat `key = value` training configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use crate::error::{input_err, Result};
use crate::optim::LrSchedule;
use crate::transport::DEFAULT_TIMEOUT;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Sage,
    Gat,
    Rgcn,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    Elu,
    LeakyRelu(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    Loopback,
    Tcp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DTypeMode {
    /// f32 values, f64 accumulators.
    F32,
    F64,
}

/// How remote blocks and attention coefficients are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    /// Retain every fetched block for backward; materialized attention.
    VanillaDp,
    /// Sequential aggregation and rematerialization, materialized attention
    /// within each block.
    Sar,
    /// Sequential aggregation and rematerialization with fused attention.
    SarFused,
}

impl ExecMode {
    pub const ALL: [ExecMode; 3] = [ExecMode::VanillaDp, ExecMode::Sar, ExecMode::SarFused];

    pub fn name(self) -> &'static str {
        match self {
            ExecMode::VanillaDp => "vanilla-dp",
            ExecMode::Sar => "sar",
            ExecMode::SarFused => "sar+fused",
        }
    }
}

impl FromStr for ExecMode {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        ExecMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| input_err!("unknown mode `{s}` (vanilla-dp, sar, sar+fused)"))
    }
}

impl FromStr for LayerKind {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sage" | "graphsage" => Ok(LayerKind::Sage),
            "gat" => Ok(LayerKind::Gat),
            "rgcn" => Ok(LayerKind::Rgcn),
            _ => Err(input_err!("unknown layer type `{s}`")),
        }
    }
}

impl FromStr for TransportKind {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loopback" => Ok(TransportKind::Loopback),
            "tcp" => Ok(TransportKind::Tcp),
            _ => Err(input_err!("unknown transport `{s}`")),
        }
    }
}

impl FromStr for DTypeMode {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "f32-accum64" => Ok(DTypeMode::F32),
            "f64" => Ok(DTypeMode::F64),
            _ => Err(input_err!("unknown dtype `{s}` (f32-accum64 or f64)")),
        }
    }
}

impl Activation {
    fn parse(s: &str, slope: f64) -> Result<Self> {
        match s {
            "identity" | "none" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "elu" => Ok(Activation::Elu),
            "leaky_relu" => Ok(Activation::LeakyRelu(slope)),
            _ => Err(input_err!("unknown activation `{s}`")),
        }
    }
}

/// One layer of the stack. `out = None` on the last layer means "number of
/// classes".
#[derive(Debug, Clone, PartialEq)]
pub struct LayerConfig {
    pub kind: LayerKind,
    pub out: Option<usize>,
    pub heads: usize,
    pub slope: f64,
    pub dropout: f64,
    pub batchnorm: bool,
    /// `None` picks the per-kind default (relu for sage and rgcn, elu for
    /// gat); the last layer is always linear.
    pub activation: Option<Activation>,
    pub bases: Option<usize>,
    pub relations: Option<usize>,
    pub self_weight: bool,
}

impl LayerConfig {
    pub fn new(kind: LayerKind) -> Self {
        LayerConfig {
            kind,
            out: None,
            heads: 1,
            slope: 0.2,
            dropout: 0.5,
            batchnorm: false,
            activation: None,
            bases: None,
            relations: None,
            self_weight: true,
        }
    }

    pub fn default_activation(&self) -> Activation {
        match self.kind {
            LayerKind::Gat => Activation::Elu,
            _ => Activation::Relu,
        }
    }
}

/// Parameters of the built-in graph generators.
#[derive(Debug, Clone, PartialEq)]
pub enum SynthSpec {
    /// `edges` uniformly random directed edges, Gaussian features, uniform
    /// labels.
    ErdosRenyi {
        nodes: usize,
        edges: usize,
        features: usize,
        classes: usize,
        relations: usize,
        seed: u64,
    },
    /// Symmetric stochastic block model; labels are the communities and
    /// features are a noisy community centroid.
    Sbm {
        nodes: usize,
        blocks: usize,
        p_in: f64,
        p_out: f64,
        features: usize,
        noise: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Files {
        graph: PathBuf,
        features: PathBuf,
        labels: PathBuf,
        train: PathBuf,
        val: Option<PathBuf>,
        test: Option<PathBuf>,
        symmetrize: bool,
    },
    Synthetic {
        spec: SynthSpec,
        /// Fractions of nodes put in the train and validation splits; the
        /// rest is the test split.
        train_fraction: f64,
        val_fraction: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum PartitionSource {
    File(PathBuf),
    Balanced { n_parts: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub data: DataSource,
    pub partition: PartitionSource,
    pub layers: Vec<LayerConfig>,
    pub epochs: usize,
    pub lr: LrSchedule,
    pub seed: u64,
    pub prefetch: bool,
    pub mfg: bool,
    pub transport: TransportKind,
    pub dtype: DTypeMode,
    pub mode: ExecMode,
    /// Evaluate accuracies every this many epochs (0 = never).
    pub eval_every: usize,
    pub metrics: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub partition_output: Option<PathBuf>,
    pub bench_epochs: usize,
    pub bench_modes: Vec<ExecMode>,
    pub bench_output: Option<PathBuf>,
    pub timeout: Duration,
}

impl TrainConfig {
    /// A config on a synthetic graph with `layers` default layers.
    pub fn synthetic(spec: SynthSpec, n_parts: usize, layers: Vec<LayerConfig>) -> Self {
        TrainConfig {
            data: DataSource::Synthetic {
                spec,
                train_fraction: 0.6,
                val_fraction: 0.2,
            },
            partition: PartitionSource::Balanced { n_parts, seed: 0 },
            layers,
            epochs: 100,
            lr: LrSchedule::default(),
            seed: 0,
            prefetch: false,
            mfg: false,
            transport: TransportKind::Loopback,
            dtype: DTypeMode::F32,
            mode: ExecMode::SarFused,
            eval_every: 1,
            metrics: None,
            checkpoint: None,
            resume: None,
            partition_output: None,
            bench_epochs: 3,
            bench_modes: ExecMode::ALL.to_vec(),
            bench_output: None,
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn num_parts_hint(&self) -> Option<usize> {
        match self.partition {
            PartitionSource::Balanced { n_parts, .. } => Some(n_parts),
            PartitionSource::File(_) => None,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| input_err!("cannot read config {}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses `key = value` lines; relative paths are resolved against
    /// `base`. Unknown keys are rejected.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut kv = Keys::parse(text)?;
        let path = |v: String| -> PathBuf {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };

        let data = match kv.take("synthetic") {
            Some(kind) => {
                let seed = kv.num("synthetic.seed", 0u64)?;
                let nodes = kv.num("synthetic.nodes", 500usize)?;
                let features = kv.num("synthetic.features", 16usize)?;
                let spec = match kind.as_str() {
                    "er" => SynthSpec::ErdosRenyi {
                        nodes,
                        edges: kv.num("synthetic.edges", nodes * 10)?,
                        features,
                        classes: kv.num("synthetic.classes", 4usize)?,
                        relations: kv.num("synthetic.relations", 1usize)?,
                        seed,
                    },
                    "sbm" => SynthSpec::Sbm {
                        nodes,
                        blocks: kv.num("synthetic.blocks", 2usize)?,
                        p_in: kv.num("synthetic.p_in", 0.05f64)?,
                        p_out: kv.num("synthetic.p_out", 0.005f64)?,
                        features,
                        noise: kv.num("synthetic.noise", 1.0f64)?,
                        seed,
                    },
                    other => {
                        return Err(input_err!("unknown synthetic graph `{other}` (er or sbm)"))
                    }
                };
                DataSource::Synthetic {
                    spec,
                    train_fraction: kv.num("synthetic.train_fraction", 0.6f64)?,
                    val_fraction: kv.num("synthetic.val_fraction", 0.2f64)?,
                }
            }
            None => {
                let mut req = |k: &str| {
                    kv.take(k)
                        .map(path)
                        .ok_or_else(|| input_err!("missing config key `{k}`"))
                };
                let graph = req("graph")?;
                let features = req("features")?;
                let labels = req("labels")?;
                let train = req("train")?;
                DataSource::Files {
                    graph,
                    features,
                    labels,
                    train,
                    val: kv.take("val").map(path),
                    test: kv.take("test").map(path),
                    symmetrize: kv.flag("symmetrize", false)?,
                }
            }
        };

        let partition = match kv.take("partition") {
            Some(p) => {
                kv.take("n_parts");
                PartitionSource::File(path(p))
            }
            None => PartitionSource::Balanced {
                n_parts: kv.num("n_parts", 1usize)?,
                seed: kv.num("partition_seed", 0u64)?,
            },
        };

        let layers = parse_layers(&mut kv)?;
        let defaults = LrSchedule::default();
        let cfg = TrainConfig {
            data,
            partition,
            layers,
            epochs: kv.num("epochs", 100usize)?,
            lr: LrSchedule {
                base: kv.num("lr", defaults.base)?,
                factor: kv.num("lr_decay", defaults.factor)?,
                step_epochs: kv.num("lr_step", defaults.step_epochs)?,
            },
            seed: kv.num("seed", 0u64)?,
            prefetch: kv.flag("prefetch", false)?,
            mfg: kv.flag("mfg", false)?,
            transport: kv.parsed("transport", TransportKind::Loopback)?,
            dtype: kv.parsed("dtype", DTypeMode::F32)?,
            mode: kv.parsed("mode", ExecMode::SarFused)?,
            eval_every: kv.num("eval_every", 1usize)?,
            metrics: kv.take("metrics").map(path),
            checkpoint: kv.take("checkpoint").map(path),
            resume: kv.take("resume").map(path),
            partition_output: kv.take("partition_output").map(path),
            bench_epochs: kv.num("bench_epochs", 3usize)?,
            bench_modes: match kv.take("bench_modes") {
                Some(list) => list
                    .split(',')
                    .map(|m| m.trim().parse())
                    .collect::<Result<Vec<_>>>()?,
                None => ExecMode::ALL.to_vec(),
            },
            bench_output: kv.take("bench_output").map(path),
            timeout: Duration::from_secs_f64(
                kv.num("timeout_secs", DEFAULT_TIMEOUT.as_secs_f64())?,
            ),
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(input_err!("epochs must be at least 1"));
        }
        if self.layers.is_empty() {
            return Err(input_err!("at least one layer is required"));
        }
        if self.lr.base < 0.0 {
            return Err(input_err!("negative learning rate"));
        }
        if let PartitionSource::Balanced { n_parts: 0, .. } = self.partition {
            return Err(input_err!("n_parts must be at least 1"));
        }
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            if !(0.0..1.0).contains(&l.dropout) {
                return Err(input_err!(
                    "layer {i}: dropout {} outside [0, 1)",
                    l.dropout
                ));
            }
            if l.heads == 0 {
                return Err(input_err!("layer {i}: heads must be at least 1"));
            }
            if l.out == Some(0) {
                return Err(input_err!("layer {i}: zero output width"));
            }
            if let Some(out) = l.out {
                if out % l.heads != 0 {
                    return Err(input_err!(
                        "layer {i}: width {out} not divisible by {} heads",
                        l.heads
                    ));
                }
            }
            if i < last && l.out.is_none() {
                return Err(input_err!("layer {i}: hidden width missing"));
            }
            if l.bases == Some(0) || l.relations == Some(0) {
                return Err(input_err!(
                    "layer {i}: bases and relations must be at least 1"
                ));
            }
        }
        if self.mfg && self.layers.iter().any(|l| l.batchnorm) {
            return Err(input_err!("mfg pruning cannot be combined with batchnorm"));
        }
        if let DataSource::Synthetic {
            train_fraction,
            val_fraction,
            ..
        } = self.data
        {
            if !(0.0..=1.0).contains(&train_fraction)
                || val_fraction < 0.0
                || train_fraction + val_fraction > 1.0
            {
                return Err(input_err!(
                    "split fractions must lie in [0, 1] and sum to at most 1"
                ));
            }
        }
        Ok(())
    }
}

fn parse_layers(kv: &mut Keys) -> Result<Vec<LayerConfig>> {
    let indices: Vec<usize> = kv
        .map
        .keys()
        .filter_map(|k| k.strip_prefix("layer."))
        .filter_map(|rest| rest.split('.').next())
        .map(|i| {
            i.parse::<usize>()
                .map_err(|_| input_err!("bad layer index `{i}`"))
        })
        .collect::<Result<_>>()?;
    let count = kv
        .num("layers", 0usize)?
        .max(indices.iter().map(|i| i + 1).max().unwrap_or(0));
    let count = if count == 0 { 2 } else { count };

    let kind: LayerKind = kv.parsed("layer_type", LayerKind::Sage)?;
    let hidden = kv.num("hidden", 64usize)?;
    let heads = kv.num("heads", 1usize)?;
    let slope = kv.num("slope", 0.2f64)?;
    let dropout = kv.num("dropout", 0.5f64)?;
    let batchnorm = kv.flag("batchnorm", false)?;
    let activation = kv.take("activation");
    let bases = kv
        .take("bases")
        .map(|v| parse_num::<usize>("bases", &v))
        .transpose()?;
    let self_weight = kv.flag("self_weight", true)?;

    let mut layers = Vec::with_capacity(count);
    for i in 0..count {
        let k = |f: &str| format!("layer.{i}.{f}");
        let mut l = LayerConfig::new(kv.parsed(&k("type"), kind)?);
        l.heads = kv.num(&k("heads"), heads)?;
        l.slope = kv.num(&k("slope"), slope)?;
        l.out = match kv.take(&k("out")) {
            Some(v) => Some(parse_num(&k("out"), &v)?),
            None if i + 1 < count => Some(hidden),
            None => None,
        };
        l.dropout = kv.num(&k("dropout"), dropout)?;
        l.batchnorm = kv.flag(&k("batchnorm"), batchnorm)?;
        l.activation = match kv.take(&k("activation")).or_else(|| activation.clone()) {
            Some(a) => Some(Activation::parse(&a, l.slope)?),
            None => None,
        };
        l.bases = match kv.take(&k("bases")) {
            Some(v) => Some(parse_num(&k("bases"), &v)?),
            None => bases,
        };
        l.relations = kv
            .take(&k("relations"))
            .map(|v| parse_num(&k("relations"), &v))
            .transpose()?;
        l.self_weight = kv.flag(&k("self_weight"), self_weight)?;
        layers.push(l);
    }
    Ok(layers)
}

fn parse_num<N: FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse()
        .map_err(|_| input_err!("config key `{key}`: cannot parse `{v}`"))
}

/// Remaining `key = value` pairs; each lookup consumes its key.
struct Keys {
    map: BTreeMap<String, String>,
}

impl Keys {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            // `#` after whitespace starts a trailing comment.
            let line = match line.find(" #").or_else(|| line.find("\t#")) {
                Some(i) => &line[..i],
                None => line,
            };
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| input_err!("config line {}: expected key = value", n + 1))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(input_err!("config line {}: empty key", n + 1));
            }
            if map.insert(k.to_string(), v.to_string()).is_some() {
                return Err(input_err!("config key `{k}` given twice"));
            }
        }
        Ok(Keys { map })
    }

    fn take(&mut self, k: &str) -> Option<String> {
        self.map.remove(k)
    }

    fn num<N: FromStr>(&mut self, k: &str, default: N) -> Result<N> {
        match self.take(k) {
            Some(v) => parse_num(k, &v),
            None => Ok(default),
        }
    }

    fn parsed<N: FromStr<Err = crate::Error>>(&mut self, k: &str, default: N) -> Result<N> {
        match self.take(k) {
            Some(v) => v.parse(),
            None => Ok(default),
        }
    }

    fn flag(&mut self, k: &str, default: bool) -> Result<bool> {
        match self.take(k).as_deref() {
            None => Ok(default),
            Some("true" | "1" | "yes" | "on") => Ok(true),
            Some("false" | "0" | "no" | "off") => Ok(false),
            Some(v) => Err(input_err!(
                "config key `{k}`: expected a boolean, got `{v}`"
            )),
        }
    }

    fn finish(self) -> Result<()> {
        match self.map.keys().next() {
            Some(k) => Err(input_err!("unknown config key `{k}`")),
            None => Ok(()),
        }
    }
}
