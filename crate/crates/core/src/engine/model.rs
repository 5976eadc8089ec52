//! Layer stack, parameter layout and the per-worker forward pass.

use std::sync::Arc;

use crate::autodiff::{BatchNormStats, Reducer, Tape, Var};
use crate::engine::config::{Activation, ExecMode, LayerConfig, LayerKind};
use crate::error::{input_err, Result};
use crate::layers::{
    AttentionAggregator, AttentionKernel, BatchNormState, MeanAggregator, RelationalAggregator,
    BN_EPS,
};
use crate::optim::{glorot_uniform, ParamStore};
use crate::rng::DropoutKey;
use crate::runtime::{
    sar_forward, snapshot_key, AggregationState, Aggregator, AllocTag, BlockPlan, Lease, SarContext,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct BnParams {
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
}

/// Parameter ids of one layer.
#[derive(Debug, Clone, Default)]
pub struct LayerParams {
    pub w: Option<usize>,
    pub w_res: Option<usize>,
    pub attn: Option<usize>,
    pub bases: Vec<usize>,
    pub coef: Option<usize>,
    pub w_self: Option<usize>,
    pub bn: Option<BnParams>,
}

/// A layer with all widths resolved.
#[derive(Debug, Clone)]
pub struct Layer {
    pub cfg: LayerConfig,
    pub in_dim: usize,
    pub out_dim: usize,
    pub relations: usize,
    pub activation: Activation,
    pub last: bool,
    pub params: LayerParams,
}

impl Layer {
    /// Width of the rows exchanged between workers.
    pub fn message_width(&self) -> usize {
        match self.cfg.kind {
            LayerKind::Rgcn => self.in_dim,
            _ => self.out_dim,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub layers: Vec<Layer>,
    pub num_classes: usize,
}

/// Graph-derived tables a worker needs for its local rows.
pub struct LocalTables {
    /// Global in-degree of each local node.
    pub degree: Arc<Vec<f64>>,
    /// Global per-relation in-degree, `rows × R`, when the stack has an
    /// R-GCN layer.
    pub rel_degree: Option<Arc<Vec<f64>>>,
    /// Global id of each local row.
    pub node_ids: Vec<u32>,
}

impl Model {
    /// Resolves widths and registers every parameter, initialized from
    /// `seed`.
    pub fn build<T: Scalar>(
        layers: &[LayerConfig],
        in_dim: usize,
        num_classes: usize,
        graph_relations: usize,
        seed: u64,
    ) -> Result<(Model, ParamStore<T>)> {
        if num_classes < 2 {
            return Err(input_err!("need at least 2 classes, found {num_classes}"));
        }
        let mut store = ParamStore::new();
        let mut stream = 0u64;
        let mut glorot = |r: usize, c: usize, fan_in: usize, fan_out: usize| {
            stream += 1;
            glorot_uniform::<T>(r, c, fan_in, fan_out, seed, stream)
        };
        let mut out = Vec::with_capacity(layers.len());
        let mut width = in_dim;
        for (l, cfg) in layers.iter().enumerate() {
            let last = l + 1 == layers.len();
            let out_dim = cfg.out.unwrap_or(num_classes);
            if last && out_dim != num_classes {
                return Err(input_err!(
                    "last layer width {out_dim} != {num_classes} classes"
                ));
            }
            if out_dim % cfg.heads != 0 {
                return Err(input_err!(
                    "layer {l}: width {out_dim} not divisible by {} heads",
                    cfg.heads
                ));
            }
            let name = |p: &str| format!("layer{l}.{p}");
            let mut params = LayerParams::default();
            let relations = cfg.relations.unwrap_or(graph_relations).max(1);
            match cfg.kind {
                LayerKind::Sage => {
                    params.w =
                        Some(store.add(name("W"), glorot(width, out_dim, width, out_dim)?, true));
                    params.w_res = Some(store.add(
                        name("W_res"),
                        glorot(width, out_dim, width, out_dim)?,
                        true,
                    ));
                }
                LayerKind::Gat => {
                    let f = out_dim / cfg.heads;
                    params.w =
                        Some(store.add(name("W"), glorot(width, out_dim, width, out_dim)?, true));
                    params.attn =
                        Some(store.add(name("a"), glorot(cfg.heads, 2 * f, 2 * f, 1)?, true));
                }
                LayerKind::Rgcn => {
                    if relations < graph_relations {
                        return Err(input_err!(
                            "layer {l}: {relations} relations but the graph has {graph_relations}"
                        ));
                    }
                    let nb = cfg.bases.unwrap_or(relations);
                    for b in 0..nb {
                        let v = glorot(width, out_dim, width, out_dim)?;
                        params
                            .bases
                            .push(store.add(name(&format!("V{b}")), v, true));
                    }
                    params.coef =
                        Some(store.add(name("coef"), glorot(relations, nb, nb, relations)?, true));
                    if cfg.self_weight {
                        params.w_self = Some(store.add(
                            name("W_self"),
                            glorot(width, out_dim, width, out_dim)?,
                            true,
                        ));
                    }
                }
            }
            if cfg.batchnorm && !last {
                params.bn = Some(BnParams {
                    gamma: store.add(name("bn.gamma"), Tensor::filled(1, out_dim, T::one()), true),
                    beta: store.add(name("bn.beta"), Tensor::zeros(1, out_dim), true),
                    running_mean: store.add(
                        name("bn.running_mean"),
                        Tensor::zeros(1, out_dim),
                        false,
                    ),
                    running_var: store.add(
                        name("bn.running_var"),
                        Tensor::filled(1, out_dim, T::one()),
                        false,
                    ),
                });
            }
            let activation = if last {
                Activation::Identity
            } else {
                cfg.activation.unwrap_or_else(|| cfg.default_activation())
            };
            out.push(Layer {
                cfg: cfg.clone(),
                in_dim: width,
                out_dim,
                relations,
                activation,
                last,
                params,
            });
            width = out_dim;
        }
        Ok((
            Model {
                layers: out,
                num_classes,
            },
            store,
        ))
    }

    pub fn has_rgcn(&self) -> bool {
        self.layers.iter().any(|l| l.cfg.kind == LayerKind::Rgcn)
    }

    pub fn max_relations(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.cfg.kind == LayerKind::Rgcn)
            .map(|l| l.relations)
            .max()
            .unwrap_or(1)
    }
}

/// What one layer leaves behind for the backward pass.
pub struct LayerRecord<T: Scalar> {
    /// Input of the aggregation on the tape.
    pub z: Var,
    pub state: Option<AggregationState<T>>,
    pub agg: Box<dyn Aggregator<T>>,
    pub key: u32,
    pub bn_stats: Option<BatchNormStats>,
    /// Local rows this layer computed.
    pub computed_rows: usize,
}

pub struct ForwardOutput<T: Scalar> {
    pub logits: Var,
    pub records: Vec<LayerRecord<T>>,
    /// Accounts for the tape's values until dropped.
    pub activations: Lease,
}

/// Per-pass settings of [`forward`].
pub struct PassSpec<'a> {
    pub epoch: usize,
    pub train: bool,
    pub seed: u64,
    pub mode: ExecMode,
    /// Block plan of each layer.
    pub plans: Vec<&'a BlockPlan>,
    /// Local row masks `0..=K` when pruning to message flow graphs.
    pub row_masks: Option<&'a [Arc<Vec<bool>>]>,
}

/// Runs every layer on this worker's rows, recording on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn forward<T: Scalar>(
    model: &Model,
    params: &ParamStore<T>,
    tables: &LocalTables,
    input: Var,
    tape: &mut Tape<T>,
    pass: &PassSpec<'_>,
    ctx: &SarContext<'_, T>,
    reducer: &mut dyn Reducer,
) -> Result<ForwardOutput<T>> {
    let mut records = Vec::with_capacity(model.layers.len());
    let mut act_lease = ctx.memory.lease(AllocTag::Activations, tape.value_bytes());
    let mut h = input;
    let kernel = match pass.mode {
        ExecMode::SarFused => AttentionKernel::Fused,
        _ => AttentionKernel::Materialized,
    };
    for (l, layer) in model.layers.iter().enumerate() {
        let rows_in = pass.row_masks.map(|m| m[l].clone());
        let rows_out = pass.row_masks.map(|m| m[l + 1].clone());
        let p = &layer.params;
        let param = |tape: &mut Tape<T>, id: usize| tape.param(params.value(id).clone(), id);
        let theta = |id: usize| params.value(id).to_f64();
        let (z, agg): (Var, Box<dyn Aggregator<T>>) = match layer.cfg.kind {
            LayerKind::Sage => {
                let w = param(tape, p.w.expect("sage weight"))?;
                let z = tape.matmul_rows(h, w, rows_in)?;
                (
                    z,
                    Box::new(MeanAggregator::new(layer.out_dim, tables.degree.clone())),
                )
            }
            LayerKind::Gat => {
                let w = param(tape, p.w.expect("gat weight"))?;
                let z = tape.matmul_rows(h, w, rows_in)?;
                let heads = layer.cfg.heads;
                let agg = AttentionAggregator::new(
                    theta(p.attn.expect("attention vector")),
                    heads,
                    layer.out_dim / heads,
                    layer.cfg.slope,
                    kernel,
                )?;
                (z, Box::new(agg))
            }
            LayerKind::Rgcn => {
                let bases = p.bases.iter().map(|&id| theta(id)).collect();
                let degree = tables
                    .rel_degree
                    .clone()
                    .ok_or_else(|| input_err!("relation degrees missing"))?;
                let degree = if layer.relations == model.max_relations() {
                    degree
                } else {
                    Arc::new(narrow_degrees(
                        &degree,
                        model.max_relations(),
                        layer.relations,
                    ))
                };
                let agg = RelationalAggregator::new(
                    bases,
                    theta(p.coef.expect("relation coefficients")),
                    degree,
                )?;
                (h, Box::new(agg))
            }
        };
        let key = snapshot_key(pass.epoch, !pass.train, l);
        let local_z = Arc::new(tape.value(z).clone());
        let (state, acc) = sar_forward(
            agg.as_ref(),
            key,
            local_z,
            pass.plans[l],
            ctx,
            Some(tape),
            l,
        )?;
        let acc = acc.expect("tape given");

        let mut pre = acc;
        let residual = match layer.cfg.kind {
            LayerKind::Sage => p.w_res,
            LayerKind::Rgcn => p.w_self,
            LayerKind::Gat => None,
        };
        if let Some(id) = residual {
            let w = param(tape, id)?;
            let r = tape.matmul_rows(h, w, rows_out.clone())?;
            pre = tape.add(r, acc)?;
        }

        let mut bn_stats = None;
        if let Some(bn) = p.bn {
            let (gamma, beta) = (param(tape, bn.gamma)?, param(tape, bn.beta)?);
            if pass.train {
                let (y, stats) = tape.batchnorm(pre, gamma, beta, BN_EPS, reducer)?;
                bn_stats = Some(stats);
                pre = y;
            } else {
                let state = bn_state(params, &bn);
                let y = state.eval_forward(
                    tape.value(pre),
                    params.value(bn.gamma),
                    params.value(bn.beta),
                )?;
                pre = tape.constant(y)?;
            }
        }

        let mut out = match layer.activation {
            Activation::Identity => pre,
            Activation::Relu => tape.relu(pre)?,
            Activation::Elu => tape.elu(pre, 1.0)?,
            Activation::LeakyRelu(s) => tape.leaky_relu(pre, s)?,
        };
        if pass.train && !layer.last && layer.cfg.dropout > 0.0 {
            let key = DropoutKey {
                seed: pass.seed,
                layer: l as u32,
                epoch: pass.epoch as u32,
            };
            out = tape.dropout(out, layer.cfg.dropout, key, &tables.node_ids)?;
        }
        act_lease.resize(tape.value_bytes());

        let computed_rows = match &rows_out {
            Some(m) => m.iter().filter(|&&b| b).count(),
            None => tables.node_ids.len(),
        };
        records.push(LayerRecord {
            z,
            state: Some(state),
            agg,
            key,
            bn_stats,
            computed_rows,
        });
        h = out;
    }
    Ok(ForwardOutput {
        logits: h,
        records,
        activations: act_lease,
    })
}

pub(crate) fn bn_state<T: Scalar>(params: &ParamStore<T>, bn: &BnParams) -> BatchNormState {
    let f = params.value(bn.running_mean).cols();
    let mut s = BatchNormState::new(f);
    s.running_mean = params
        .value(bn.running_mean)
        .data()
        .iter()
        .map(|v| v.as_f64())
        .collect();
    s.running_var = params
        .value(bn.running_var)
        .data()
        .iter()
        .map(|v| v.as_f64())
        .collect();
    s
}

/// Folds this pass's batch statistics into the running statistics.
pub fn update_running_stats<T: Scalar>(
    model: &Model,
    params: &mut ParamStore<T>,
    records: &[LayerRecord<T>],
) {
    for (layer, rec) in model.layers.iter().zip(records) {
        let (Some(bn), Some(stats)) = (layer.params.bn, rec.bn_stats.as_ref()) else {
            continue;
        };
        let mut s = bn_state(params, &bn);
        s.update(stats);
        let write = |v: &[f64]| {
            Tensor::new(1, v.len(), v.iter().map(|&x| T::of_f64(x)).collect()).expect("row")
        };
        params.get_mut(bn.running_mean).value = write(&s.running_mean);
        params.get_mut(bn.running_var).value = write(&s.running_var);
    }
}

/// Keeps the first `keep` relation columns of a `rows × total` table.
fn narrow_degrees(deg: &[f64], total: usize, keep: usize) -> Vec<f64> {
    deg.chunks(total)
        .flat_map(|row| row[..keep].iter().copied())
        .collect()
}
