use std::borrow::Borrow;

use rand::seq::SliceRandom;

use super::config::TrainConfig;
use super::net::{apply_running_updates, backward, forward, forward_with, Gradients, Mode};
use super::params::{decays, ModelParams};
use super::ModelError;
use crate::preprocess::InputTensor;
use crate::rng::{stream_rng, Stream};

pub fn loss_mae(preds: &[f64], targets: &[f64]) -> Result<f64, ModelError> {
    if preds.len() != targets.len() {
        return Err(ModelError::LengthMismatch {
            preds: preds.len(),
            targets: targets.len(),
        });
    }
    if preds.is_empty() {
        return Err(ModelError::Empty);
    }
    Ok(preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (t - p).abs())
        .sum::<f64>()
        / preds.len() as f64)
}

/// Plain SGD with decoupled-from-norm weight decay:
/// `p <- p - lr * (g + wd * p)`, decay only on conv and FC weights.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &Gradients,
    lr: f64,
    weight_decay: f64,
) -> Result<(), ModelError> {
    for (name, g) in &grads.tensors {
        let shape_ok = params.get(name).map(|p| p.shape == g.shape);
        match shape_ok {
            None => {
                return Err(ModelError::ShapeMismatch(format!(
                    "gradient for unknown tensor {name}"
                )))
            }
            Some(false) => {
                return Err(ModelError::ShapeMismatch(format!(
                    "gradient shape differs for {name}"
                )))
            }
            Some(true) => {}
        }
    }
    for (name, g) in &grads.tensors {
        let wd = if decays(name) { weight_decay } else { 0.0 };
        let p = params.get_mut(name).expect("checked above");
        for (v, &gv) in p.data.iter_mut().zip(&g.data) {
            *v -= lr * (gv + wd * *v);
        }
    }
    Ok(())
}

/// Eval-mode predictions, computed in chunks of `chunk` items.
pub fn predict(
    params: &ModelParams,
    inputs: &[InputTensor],
    chunk: usize,
) -> Result<Vec<f64>, ModelError> {
    let mut out = Vec::with_capacity(inputs.len());
    for part in inputs.chunks(chunk.max(1)) {
        out.extend(forward(params, part, Mode::Eval)?.predictions);
    }
    Ok(out)
}

/// Called after every epoch with the epoch index, its mean training loss and
/// the current parameters.
pub trait EpochObserver {
    fn epoch_done(&mut self, epoch: usize, loss: f64, params: &ModelParams);
}

impl<F: FnMut(usize, f64, &ModelParams)> EpochObserver for F {
    fn epoch_done(&mut self, epoch: usize, loss: f64, params: &ModelParams) {
        self(epoch, loss, params)
    }
}

pub fn train<B: Borrow<InputTensor>>(
    dataset: &[(B, f64)],
    tc: &TrainConfig,
    init: ModelParams,
) -> Result<(ModelParams, Vec<f64>), ModelError> {
    train_with_observer(
        dataset,
        tc,
        init,
        &mut |_: usize, _: f64, _: &ModelParams| {},
    )
}

/// Mini-batch SGD on the MAE. Each epoch visits the data in an order drawn
/// from the shuffle stream of `tc.seed`; the last partial batch is kept.
/// Parameters are rounded to `f32` after every step so the result can be
/// saved without loss. Returns the final parameters and the mean
/// per-sample training loss of each epoch.
pub fn train_with_observer<B: Borrow<InputTensor>>(
    dataset: &[(B, f64)],
    tc: &TrainConfig,
    init: ModelParams,
    observer: &mut dyn EpochObserver,
) -> Result<(ModelParams, Vec<f64>), ModelError> {
    tc.validate_runnable()?;
    if dataset.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut params = init;
    let mut history = Vec::with_capacity(tc.epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..tc.epochs {
        let mut rng = stream_rng(tc.seed, Stream::Shuffle, epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut abs_sum = 0.0;
        for batch in order.chunks(tc.batch_size) {
            let inputs: Vec<&InputTensor> = batch.iter().map(|&i| dataset[i].0.borrow()).collect();
            let targets: Vec<f64> = batch.iter().map(|&i| dataset[i].1).collect();
            let trace = forward_with(&params, &inputs, Mode::Train, tc.freeze_policy)?;
            abs_sum += trace
                .predictions
                .iter()
                .zip(&targets)
                .map(|(p, t)| (p - t).abs())
                .sum::<f64>();
            let grads = backward(&params, &trace, &targets)?;
            sgd_step(&mut params, &grads, tc.learning_rate, tc.weight_decay)?;
            apply_running_updates(&mut params, &trace);
            params.round_to_f32();
        }
        let loss = abs_sum / dataset.len() as f64;
        if !loss.is_finite() {
            return Err(ModelError::NonFinite(format!(
                "training loss at epoch {epoch}"
            )));
        }
        history.push(loss);
        observer.epoch_done(epoch, loss, &params);
    }
    Ok((params, history))
}
