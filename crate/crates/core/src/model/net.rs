//! Forward and backward passes of the dense-block regressor.
//!
//! Layout: 7x7/2 conv -> BN -> ReLU -> 2x2/2 max pool -> dense blocks of
//! (BN -> ReLU -> 1x1 conv -> BN -> ReLU -> 3x3 conv) layers whose outputs are
//! concatenated onto their inputs, with (BN -> ReLU -> 1x1 conv -> 2x2/2 avg
//! pool) transitions between blocks -> BN -> ReLU -> global average pool ->
//! FC(hidden) -> ReLU -> FC(1). Batch norm is omitted everywhere when disabled
//! in the config.

use std::borrow::Borrow;

use indexmap::IndexMap;

use super::config::{DenseNetConfig, FreezePolicy};
use super::ops::{self, Act, BnCache, BnMoments, BnParams, ConvGeom};
use super::params::{is_running_stat, ModelParams, Tensor};
use super::ModelError;
use crate::preprocess::InputTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in trainable batch-norm layers; running moments are
    /// reported for update.
    Train,
    /// Running moments everywhere; a pure function of params and input.
    Eval,
}

struct UnitCache {
    bn: Option<BnCache>,
    act: Act,
}

struct LayerCache {
    first: UnitCache,
    second: UnitCache,
}

struct BlockCache {
    layers: Vec<LayerCache>,
    widths: Vec<usize>,
}

struct TransitionCache {
    unit: UnitCache,
    conv_shape: (usize, usize, usize, usize),
}

struct StemCache {
    input: Act,
    bn: Option<BnCache>,
    relu_out: Act,
    pool_arg: Vec<usize>,
}

struct HeadCache {
    final_bn: Option<BnCache>,
    features: Act,
    pooled: Vec<f64>,
    hidden: Vec<f64>,
}

/// Cached activations of one forward pass.
pub struct ForwardTrace {
    pub predictions: Vec<f64>,
    mode: Mode,
    freeze: FreezePolicy,
    stamp: u64,
    stem: StemCache,
    blocks: Vec<BlockCache>,
    transitions: Vec<TransitionCache>,
    head: HeadCache,
    running_updates: Vec<(String, BnMoments)>,
}

impl ForwardTrace {
    /// Rectified output of the final dense block (after its normalization),
    /// the maps the head pools over.
    pub fn features(&self) -> &Act {
        &self.head.features
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn batch_size(&self) -> usize {
        self.predictions.len()
    }
}

/// Gradients for the trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: IndexMap<String, Tensor>,
}

impl Gradients {
    fn zeros_for(params: &ModelParams, freeze: FreezePolicy) -> Self {
        let cfg = params.config();
        let tensors = params
            .tensors()
            .iter()
            .filter(|(n, _)| !is_running_stat(n) && freeze.is_trainable(n, cfg))
            .map(|(n, t)| (n.clone(), Tensor::zeros(&t.shape)))
            .collect();
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| &t.data)
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

struct Ctx<'a> {
    params: &'a ModelParams,
    cfg: &'a DenseNetConfig,
    mode: Mode,
    freeze: FreezePolicy,
    updates: Vec<(String, BnMoments)>,
}

impl Ctx<'_> {
    fn trainable(&self, name: &str) -> bool {
        self.freeze.is_trainable(name, self.cfg)
    }

    fn bn(&mut self, x: &Act, prefix: &str) -> (Act, Option<BnCache>) {
        if !self.cfg.use_batchnorm {
            return (x.clone(), None);
        }
        let p = self.params;
        let bp = BnParams {
            gamma: &p.tensor(&format!("{prefix}.weight")).data,
            beta: &p.tensor(&format!("{prefix}.bias")).data,
            running_mean: &p.tensor(&format!("{prefix}.running_mean")).data,
            running_var: &p.tensor(&format!("{prefix}.running_var")).data,
        };
        // Frozen layers keep their stored moments even while training.
        let batch_stats = self.mode == Mode::Train && self.trainable(&format!("{prefix}.weight"));
        let (y, cache, moments) = ops::bn_forward(x, &bp, batch_stats);
        if let Some(m) = moments {
            self.updates.push((prefix.to_string(), m));
        }
        (y, Some(cache))
    }

    /// BN -> ReLU -> conv.
    fn unit(&mut self, x: Act, bn_prefix: &str, conv: &str, geom: &ConvGeom) -> (Act, UnitCache) {
        let (normed, bn) = self.bn(&x, bn_prefix);
        let act = ops::relu_forward(&normed);
        let out = ops::conv_forward(&act, &self.params.tensor(conv).data, geom);
        (out, UnitCache { bn, act })
    }
}

fn stem_geom(cfg: &DenseNetConfig) -> ConvGeom {
    ConvGeom {
        cin: 1,
        cout: cfg.init_channels,
        k: 7,
        stride: 2,
        pad: 3,
    }
}

fn pointwise(cin: usize, cout: usize) -> ConvGeom {
    ConvGeom {
        cin,
        cout,
        k: 1,
        stride: 1,
        pad: 0,
    }
}

fn growth_geom(cfg: &DenseNetConfig) -> ConvGeom {
    ConvGeom {
        cin: cfg.bottleneck_channels(),
        cout: cfg.growth_rate,
        k: 3,
        stride: 1,
        pad: 1,
    }
}

fn transition_out(params: &ModelParams, b: usize) -> usize {
    params.tensor(&format!("transition{b}.conv.weight")).shape[0]
}

pub fn forward<B: Borrow<InputTensor>>(
    params: &ModelParams,
    batch: &[B],
    mode: Mode,
) -> Result<ForwardTrace, ModelError> {
    forward_with(params, batch, mode, FreezePolicy::None)
}

/// Forward pass; under a freeze policy, frozen batch-norm layers normalize
/// with their running moments even in train mode.
pub fn forward_with<B: Borrow<InputTensor>>(
    params: &ModelParams,
    batch: &[B],
    mode: Mode,
    freeze: FreezePolicy,
) -> Result<ForwardTrace, ModelError> {
    let cfg = params.config();
    if batch.is_empty() {
        return Err(ModelError::Empty);
    }
    let dim = cfg.input_dim;
    if let Some(bad) = batch.iter().map(Borrow::borrow).find(|t| t.dim() != dim) {
        return Err(ModelError::ShapeMismatch(format!(
            "input dim {} but model expects {dim}",
            bad.dim()
        )));
    }
    let n = batch.len();
    let mut input = Act::zeros(n, 1, dim, dim);
    for (i, t) in batch.iter().map(Borrow::borrow).enumerate() {
        input.data[i * dim * dim..(i + 1) * dim * dim].copy_from_slice(t.values());
    }
    let mut ctx = Ctx {
        params,
        cfg,
        mode,
        freeze,
        updates: Vec::new(),
    };

    let conv0 = ops::conv_forward(
        &input,
        &params.tensor("stem.conv.weight").data,
        &stem_geom(cfg),
    );
    let (normed, bn) = ctx.bn(&conv0, "stem.bn");
    drop(conv0);
    let relu_out = ops::relu_forward(&normed);
    let (mut x, pool_arg) = ops::maxpool_forward(&relu_out);
    let stem = StemCache {
        input,
        bn,
        relu_out,
        pool_arg,
    };

    let nblocks = cfg.block_layers.len();
    let mut blocks = Vec::with_capacity(nblocks);
    let mut transitions = Vec::with_capacity(nblocks.saturating_sub(1));
    for (b, &layers) in cfg.block_layers.iter().enumerate() {
        let mut pieces = vec![x];
        let mut caches = Vec::with_capacity(layers);
        for l in 0..layers {
            let p = format!("block{b}.layer{l}");
            let inp = if pieces.len() == 1 {
                pieces[0].clone()
            } else {
                ops::concat(&pieces.iter().collect::<Vec<_>>())
            };
            let cin = inp.c;
            let (mid, first) = ctx.unit(
                inp,
                &format!("{p}.bn1"),
                &format!("{p}.conv1.weight"),
                &pointwise(cin, cfg.bottleneck_channels()),
            );
            let (new, second) = ctx.unit(
                mid,
                &format!("{p}.bn2"),
                &format!("{p}.conv2.weight"),
                &growth_geom(cfg),
            );
            pieces.push(new);
            caches.push(LayerCache { first, second });
        }
        let widths = pieces.iter().map(|a| a.c).collect();
        x = ops::concat(&pieces.iter().collect::<Vec<_>>());
        blocks.push(BlockCache {
            layers: caches,
            widths,
        });
        if b + 1 < nblocks {
            let p = format!("transition{b}");
            let geom = pointwise(x.c, transition_out(params, b));
            let (conv_out, unit) =
                ctx.unit(x, &format!("{p}.bn"), &format!("{p}.conv.weight"), &geom);
            let conv_shape = (conv_out.n, conv_out.c, conv_out.h, conv_out.w);
            x = ops::avgpool_forward(&conv_out);
            transitions.push(TransitionCache { unit, conv_shape });
        }
    }

    let (normed, final_bn) = ctx.bn(&x, "final_bn");
    let features = ops::relu_forward(&normed);
    let pooled = ops::global_avg_pool(&features);
    let hidden_n = cfg.head_hidden;
    let w1 = params.tensor("head.fc1.weight");
    let b1 = params.tensor("head.fc1.bias");
    let mut hidden = ops::linear_forward(&pooled, n, &w1.data, &b1.data, hidden_n);
    for v in &mut hidden {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let w2 = params.tensor("head.fc2.weight");
    let b2 = params.tensor("head.fc2.bias");
    let predictions = ops::linear_forward(&hidden, n, &w2.data, &b2.data, 1);

    Ok(ForwardTrace {
        predictions,
        mode,
        freeze,
        stamp: params.stamp(),
        stem,
        blocks,
        transitions,
        head: HeadCache {
            final_bn,
            features,
            pooled,
            hidden,
        },
        running_updates: ctx.updates,
    })
}

/// Folds the batch moments observed in a train-mode pass into the running
/// moments.
pub fn apply_running_updates(params: &mut ModelParams, trace: &ForwardTrace) {
    let m = ops::BN_MOMENTUM;
    for (prefix, moments) in &trace.running_updates {
        if let Some(rm) = params.get_mut(&format!("{prefix}.running_mean")) {
            for (r, &b) in rm.data.iter_mut().zip(&moments.mean) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
        if let Some(rv) = params.get_mut(&format!("{prefix}.running_var")) {
            for (r, &b) in rv.data.iter_mut().zip(&moments.var_unbiased) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
    }
}

struct BackCtx<'a> {
    params: &'a ModelParams,
    cfg: &'a DenseNetConfig,
    freeze: FreezePolicy,
    grads: Gradients,
}

impl BackCtx<'_> {
    fn grad_pair(&mut self, a: &str, b: &str) -> Option<(&mut [f64], &mut [f64])> {
        if !self.grads.tensors.contains_key(a) || !self.grads.tensors.contains_key(b) {
            return None;
        }
        let ia = self.grads.tensors.get_index_of(a)?;
        let ib = self.grads.tensors.get_index_of(b)?;
        let (lo, hi, swap) = if ia < ib {
            (ia, ib, false)
        } else {
            (ib, ia, true)
        };
        let (left, right) = self.grads.tensors.as_mut_slice().split_at_mut(hi);
        let first = &mut left[lo].data;
        let second = &mut right[0].data;
        Some(if swap {
            (second, first)
        } else {
            (first, second)
        })
    }

    fn bn_back(
        &mut self,
        dy: &Act,
        cache: &Option<BnCache>,
        prefix: &str,
        need_dx: bool,
    ) -> Option<Act> {
        let Some(cache) = cache else {
            return need_dx.then(|| dy.clone());
        };
        let params = self.params;
        let gamma = &params.tensor(&format!("{prefix}.weight")).data;
        let grads = self.grad_pair(&format!("{prefix}.weight"), &format!("{prefix}.bias"));
        ops::bn_backward(dy, cache, gamma, grads, need_dx)
    }

    fn unit_back(
        &mut self,
        dout: &Act,
        u: &UnitCache,
        bn_prefix: &str,
        conv: &str,
        geom: &ConvGeom,
        need_dx: bool,
    ) -> Option<Act> {
        let params = self.params;
        let w = &params.tensor(conv).data;
        let dw = self
            .grads
            .tensors
            .get_mut(conv)
            .map(|t| t.data.as_mut_slice());
        let trainable_bn = self.cfg.use_batchnorm
            && self
                .freeze
                .is_trainable(&format!("{bn_prefix}.weight"), self.cfg);
        let d_act = ops::conv_backward(&u.act, w, geom, dout, dw, need_dx || trainable_bn)?;
        let d_norm = ops::relu_backward(&d_act, &u.act);
        self.bn_back(&d_norm, &u.bn, bn_prefix, need_dx)
    }
}

/// Gradient of the head output with respect to the rectified feature maps,
/// accumulating head and final-norm parameter gradients.
fn backward_head(ctx: &mut BackCtx<'_>, trace: &ForwardTrace, dpred: &[f64]) -> Act {
    let n = trace.batch_size();
    let hidden_n = ctx.cfg.head_hidden;
    let p = ctx.params;
    let g2 = ctx.grad_pair("head.fc2.weight", "head.fc2.bias");
    let mut dhidden = ops::linear_backward(
        &trace.head.hidden,
        n,
        &p.tensor("head.fc2.weight").data,
        dpred,
        1,
        g2,
    );
    for (d, &h) in dhidden.iter_mut().zip(&trace.head.hidden) {
        if h <= 0.0 {
            *d = 0.0;
        }
    }
    let g1 = ctx.grad_pair("head.fc1.weight", "head.fc1.bias");
    let dpooled = ops::linear_backward(
        &trace.head.pooled,
        n,
        &p.tensor("head.fc1.weight").data,
        &dhidden,
        hidden_n,
        g1,
    );
    let f = &trace.head.features;
    ops::global_avg_pool_backward(&dpooled, (f.n, f.c, f.h, f.w))
}

/// Backpropagates `dpred` (gradient of the objective with respect to each
/// prediction) through the network.
pub fn backward_from(
    params: &ModelParams,
    trace: &ForwardTrace,
    dpred: &[f64],
) -> Result<Gradients, ModelError> {
    if trace.stamp != params.stamp() {
        return Err(ModelError::StaleTrace);
    }
    if dpred.len() != trace.batch_size() {
        return Err(ModelError::LengthMismatch {
            preds: trace.batch_size(),
            targets: dpred.len(),
        });
    }
    let cfg = params.config();
    let mut ctx = BackCtx {
        params,
        cfg,
        freeze: trace.freeze,
        grads: Gradients::zeros_for(params, trace.freeze),
    };
    let dfeat = backward_head(&mut ctx, trace, dpred);
    let dfeat = ops::relu_backward(&dfeat, &trace.head.features);
    let stop_after_last_block = trace.freeze == FreezePolicy::LastBlockAndHead;
    let mut dx = ctx
        .bn_back(&dfeat, &trace.head.final_bn, "final_bn", true)
        .expect("dx requested");

    let nblocks = cfg.block_layers.len();
    for b in (0..nblocks).rev() {
        if b + 1 < nblocks {
            let t = &trace.transitions[b];
            let d_conv = ops::avgpool_backward(&dx, t.conv_shape);
            let geom = pointwise(t.unit.act.c, t.conv_shape.1);
            let p = format!("transition{b}");
            dx = ctx
                .unit_back(
                    &d_conv,
                    &t.unit,
                    &format!("{p}.bn"),
                    &format!("{p}.conv.weight"),
                    &geom,
                    true,
                )
                .expect("dx requested");
        }
        let block = &trace.blocks[b];
        let mut dpieces = ops::split_channels(&dx, &block.widths);
        for (l, lc) in block.layers.iter().enumerate().rev() {
            let p = format!("block{b}.layer{l}");
            let dnew = std::mem::replace(&mut dpieces[l + 1], Act::zeros(0, 0, 0, 0));
            let dmid = ctx
                .unit_back(
                    &dnew,
                    &lc.second,
                    &format!("{p}.bn2"),
                    &format!("{p}.conv2.weight"),
                    &growth_geom(cfg),
                    true,
                )
                .expect("dx requested");
            let geom = pointwise(lc.first.act.c, cfg.bottleneck_channels());
            let need_input = !(stop_after_last_block && l == 0);
            if let Some(dinp) = ctx.unit_back(
                &dmid,
                &lc.first,
                &format!("{p}.bn1"),
                &format!("{p}.conv1.weight"),
                &geom,
                need_input,
            ) {
                let parts = ops::split_channels(&dinp, &block.widths[..=l]);
                for (acc, part) in dpieces.iter_mut().zip(&parts) {
                    acc.add_assign(part);
                }
            }
        }
        if stop_after_last_block {
            return Ok(ctx.grads);
        }
        dx = dpieces.swap_remove(0);
    }

    let s = &trace.stem;
    let pooled_grad = ops::maxpool_backward(
        &dx,
        &s.pool_arg,
        (s.relu_out.n, s.relu_out.c, s.relu_out.h, s.relu_out.w),
    );
    let dnorm = ops::relu_backward(&pooled_grad, &s.relu_out);
    let dconv = ctx
        .bn_back(&dnorm, &s.bn, "stem.bn", true)
        .expect("dx requested");
    let dw = ctx
        .grads
        .tensors
        .get_mut("stem.conv.weight")
        .map(|t| t.data.as_mut_slice());
    ops::conv_backward(
        &s.input,
        &params.tensor("stem.conv.weight").data,
        &stem_geom(cfg),
        &dconv,
        dw,
        false,
    );
    Ok(ctx.grads)
}

/// Mean absolute error subgradient with respect to each prediction; zero at
/// zero residual.
pub fn mae_output_grad(preds: &[f64], targets: &[f64]) -> Vec<f64> {
    let n = preds.len() as f64;
    preds
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            let r = p - t;
            if r > 0.0 {
                1.0 / n
            } else if r < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect()
}

/// Gradients of the batch MAE with respect to every unfrozen parameter.
pub fn backward(
    params: &ModelParams,
    trace: &ForwardTrace,
    targets: &[f64],
) -> Result<Gradients, ModelError> {
    if targets.len() != trace.batch_size() {
        return Err(ModelError::LengthMismatch {
            preds: trace.batch_size(),
            targets: targets.len(),
        });
    }
    backward_from(params, trace, &mae_output_grad(&trace.predictions, targets))
}

/// Gradient of each prediction with respect to the final rectified feature
/// maps, `[n, c, h, w]`.
pub fn feature_gradients(params: &ModelParams, trace: &ForwardTrace) -> Result<Act, ModelError> {
    if trace.stamp != params.stamp() {
        return Err(ModelError::StaleTrace);
    }
    let cfg = params.config();
    let mut ctx = BackCtx {
        params,
        cfg,
        freeze: trace.freeze,
        grads: Gradients {
            tensors: IndexMap::new(),
        },
    };
    let ones = vec![1.0; trace.batch_size()];
    // Items do not interact in eval mode, so a unit seed per item yields each
    // item's own gradient.
    Ok(backward_head(&mut ctx, trace, &ones))
}
