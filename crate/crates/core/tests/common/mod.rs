//! Oracles and fixtures shared by the integration tests. Everything here is
//! computed independently of the library code paths it is used to check.
#![allow(dead_code)]

use aicac_core::model::{self, FreezePolicy, Mode, ModelParams};
use aicac_core::preprocess::InputTensor;
use aicac_core::DenseNetConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(dim: usize, rng: &mut ChaCha8Rng) -> InputTensor {
    let values = (0..dim * dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
    InputTensor::new(dim, values).unwrap()
}

/// Naive MAE, element by element.
pub fn mae_naive(preds: &[f64], targets: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..preds.len() {
        s += (targets[i] - preds[i]).abs();
    }
    s / preds.len() as f64
}

pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

/// Denominator floor for relative errors, so that parameters whose gradient
/// is numerically zero are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares analytic MAE gradients against central finite differences of the
/// train-mode loss for every trainable parameter (or every `stride`-th entry).
pub fn grad_check(
    params: &ModelParams,
    batch: &[InputTensor],
    targets: &[f64],
    freeze: FreezePolicy,
    step: f64,
    stride: usize,
) -> GradCheckReport {
    let loss = |p: &ModelParams| {
        let t = model::forward_with(p, batch, Mode::Train, freeze).unwrap();
        mae_naive(&t.predictions, targets)
    };
    let trace = model::forward_with(params, batch, Mode::Train, freeze).unwrap();
    let grads = model::backward(params, &trace, targets).unwrap();
    let mut worst = (0.0, String::new());
    let mut checked = 0;
    let mut probe = params.clone();
    for (name, t) in params.tensors() {
        if model::is_running_stat(name) || !freeze.is_trainable(name, params.config()) {
            assert!(
                grads.get(name).is_none(),
                "gradient reported for non-trainable {name}"
            );
            continue;
        }
        let analytic = grads.get(name);
        assert!(analytic.is_some(), "no gradient for trainable {name}");
        for i in (0..t.len()).step_by(stride.max(1)) {
            let orig = t.data[i];
            probe.get_mut(name).unwrap().data[i] = orig + step;
            let up = loss(&probe);
            probe.get_mut(name).unwrap().data[i] = orig - step;
            let down = loss(&probe);
            probe.get_mut(name).unwrap().data[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.map_or(0.0, |g| g.data[i]);
            let e = rel_err(a, numeric);
            if e > worst.0 {
                worst = (e, format!("{name}[{i}] analytic={a:e} numeric={numeric:e}"));
            }
            checked += 1;
        }
    }
    GradCheckReport {
        max_rel_err: worst.0,
        worst: worst.1,
        checked,
    }
}

/// Targets offset from the current predictions so no residual sits near the
/// MAE kink.
pub fn offset_targets(
    params: &ModelParams,
    batch: &[InputTensor],
    freeze: FreezePolicy,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let t = model::forward_with(params, batch, Mode::Train, freeze).unwrap();
    t.predictions
        .iter()
        .map(|p| {
            let mag = rng.gen_range(0.5..1.5);
            if rng.gen_bool(0.5) {
                p + mag
            } else {
                p - mag
            }
        })
        .collect()
}

/// Randomizes batch-norm affine parameters and running moments so that the
/// check exercises non-trivial values everywhere.
pub fn perturb_bn(params: &mut ModelParams, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = params.tensors().keys().cloned().collect();
    for name in names {
        let t = params.get_mut(&name).unwrap();
        if name.ends_with("running_var") {
            t.data.iter_mut().for_each(|v| *v = rng.gen_range(0.5..2.0));
        } else if name.ends_with("running_mean") {
            t.data
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-0.3..0.3));
        } else if name.contains("bn") && name.ends_with(".weight") {
            t.data.iter_mut().for_each(|v| *v = rng.gen_range(0.5..1.5));
        } else if name.ends_with(".bias") {
            t.data
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-0.2..0.2));
        }
    }
}

/// Small configuration for exhaustive finite-difference checks.
pub fn gradcheck_config(use_batchnorm: bool) -> DenseNetConfig {
    DenseNetConfig {
        input_dim: 16,
        init_channels: 4,
        growth_rate: 3,
        block_layers: vec![2, 2],
        compression: 0.5,
        head_hidden: 6,
        use_batchnorm,
    }
}

/// AUC by counting every (positive, negative) pair; ties count one half.
pub fn auc_brute(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Compensated (Neumaier) summation.
pub fn neumaier_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Two-group log-rank statistic from a per-event-time observed/expected/
/// variance table, computed directly from the definitions.
pub fn log_rank_table(a: &[(f64, bool)], b: &[(f64, bool)]) -> f64 {
    let mut times: Vec<f64> = a.iter().chain(b).filter(|s| s.1).map(|s| s.0).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let (mut o, mut e, mut v) = (0.0, 0.0, 0.0);
    for &t in &times {
        let na = a.iter().filter(|s| s.0 >= t).count() as f64;
        let nb = b.iter().filter(|s| s.0 >= t).count() as f64;
        let da = a.iter().filter(|s| s.0 == t && s.1).count() as f64;
        let db = b.iter().filter(|s| s.0 == t && s.1).count() as f64;
        let (n, d) = (na + nb, da + db);
        o += da;
        e += d * na / n;
        if n > 1.0 {
            v += d * (na / n) * (1.0 - na / n) * (n - d) / (n - 1.0);
        }
    }
    (o - e) * (o - e) / v
}

/// Breslow log partial likelihood for one covariate, term by term.
pub fn breslow_loglik(times: &[f64], events: &[bool], x: &[f64], beta: f64) -> f64 {
    let mut ll = 0.0;
    for i in 0..times.len() {
        if !events[i] {
            continue;
        }
        let risk: f64 = (0..times.len())
            .filter(|&j| times[j] >= times[i])
            .map(|j| (beta * x[j]).exp())
            .sum();
        ll += beta * x[i] - risk.ln();
    }
    ll
}

/// Maximizer of [`breslow_loglik`] over the grid `lo, lo + step, ..., hi`.
pub fn breslow_grid_argmax(
    times: &[f64],
    events: &[bool],
    x: &[f64],
    lo: f64,
    hi: f64,
    step: f64,
) -> f64 {
    let n = ((hi - lo) / step).round() as usize;
    let mut best = (f64::NEG_INFINITY, lo);
    for k in 0..=n {
        let beta = lo + k as f64 * step;
        let ll = breslow_loglik(times, events, x, beta);
        if ll > best.0 {
            best = (ll, beta);
        }
    }
    best.1
}

/// A random but valid DICOM image: 8- or 16-bit allocation, any stored
/// depth, either signedness and photometric interpretation, and window and
/// rescale values that print exactly as decimal strings.
pub fn random_dicom(rng: &mut ChaCha8Rng) -> aicac_core::DicomImage {
    use aicac_core::{DicomImage, Photometric};
    let bits_allocated = if rng.gen_bool(0.3) { 8 } else { 16 };
    let bits_stored = rng.gen_range(1..=bits_allocated);
    let signed = rng.gen_bool(0.3);
    let (rows, cols) = (rng.gen_range(1..40), rng.gen_range(1..40));
    let mut img = DicomImage {
        rows,
        cols,
        bits_allocated,
        bits_stored,
        signed,
        photometric: if rng.gen_bool(0.2) {
            Photometric::Monochrome1
        } else {
            Photometric::Monochrome2
        },
        window_center: f64::from(rng.gen_range(-2000i32..4000)) / 2.0,
        window_width: f64::from(rng.gen_range(1i32..8000)) / 4.0,
        rescale_slope: f64::from(rng.gen_range(1i32..8)) / 2.0,
        rescale_intercept: f64::from(rng.gen_range(-1024i32..1024)),
        pixels: Vec::new(),
    };
    let (lo, hi) = img.stored_range();
    img.pixels = (0..rows * cols)
        .map(|_| rng.gen_range(lo..=hi) as i32)
        .collect();
    img
}

pub fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> aicac_core::RealImage {
    let values = (0..h * w)
        .map(|_| rng.gen_range(0.0..4096.0f64).round())
        .collect();
    aicac_core::RealImage::new(h, w, values).unwrap()
}

/// `true` when `b` never decreases along the order that sorts `a`.
pub fn order_preserving(a: &[f64], b: &[f64]) -> bool {
    let mut idx: Vec<usize> = (0..a.len()).collect();
    idx.sort_by(|&i, &j| a[i].total_cmp(&a[j]));
    idx.windows(2).all(|w| {
        let (i, j) = (w[0], w[1]);
        if a[i] == a[j] {
            b[i] == b[j]
        } else {
            b[i] <= b[j]
        }
    })
}

/// Grad-CAM computed directly from the head's closed form: each feature
/// position's gradient is `sum_j fc2[j] * [hidden_j > 0] * fc1[j, c] / (h w)`,
/// the coarse map is the rectified weighted channel sum, upsampled with
/// half-pixel bilinear sampling and scaled to a unit maximum.
pub fn gradcam_oracle(params: &ModelParams, input: &InputTensor) -> Vec<f64> {
    let trace = model::forward(params, std::slice::from_ref(input), Mode::Eval).unwrap();
    let f = trace.features();
    let (c, h, w) = (f.c, f.h, f.w);
    let plane = (h * w) as f64;
    let fc1 = &params.get("head.fc1.weight").unwrap().data;
    let b1 = &params.get("head.fc1.bias").unwrap().data;
    let fc2 = &params.get("head.fc2.weight").unwrap().data;
    let pooled: Vec<f64> = (0..c)
        .map(|ch| f.data[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / plane)
        .collect();
    let hidden = b1.len();
    let mut weights = vec![0.0; c];
    for j in 0..hidden {
        let pre: f64 = b1[j] + (0..c).map(|ch| fc1[j * c + ch] * pooled[ch]).sum::<f64>();
        if pre > 0.0 {
            for ch in 0..c {
                weights[ch] += fc2[j] * fc1[j * c + ch] / plane;
            }
        }
    }
    let mut coarse = vec![0.0; h * w];
    for (ch, wt) in weights.iter().enumerate() {
        for p in 0..h * w {
            coarse[p] += wt * f.data[ch * h * w + p];
        }
    }
    coarse.iter_mut().for_each(|v| *v = v.max(0.0));
    let d = input.dim();
    let src = |i: usize, n: usize| {
        ((i as f64 + 0.5) * n as f64 / d as f64 - 0.5).clamp(0.0, (n - 1) as f64)
    };
    let mut out = vec![0.0; d * d];
    for r in 0..d {
        let y = src(r, h);
        let (y0, fy) = (y.floor() as usize, y - y.floor());
        let y1 = (y0 + 1).min(h - 1);
        for col in 0..d {
            let x = src(col, w);
            let (x0, fx) = (x.floor() as usize, x - x.floor());
            let x1 = (x0 + 1).min(w - 1);
            let at = |rr: usize, cc: usize| coarse[rr * w + cc];
            out[r * d + col] = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
        }
    }
    let max = out.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        out.iter_mut().for_each(|v| *v /= max);
    }
    out
}
