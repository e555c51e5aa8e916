//! Differentiable building blocks shared by the two training stages:
//! windowed SSIM, Sobel gradient magnitudes, score normalization and the
//! hard-example-mined cross entropy. All operate on tape values so
//! gradients flow through them; the plain-f64 `metrics` module provides the
//! independent reference route.

use crate::datamodel::LabelMap;
use crate::error::{Error, Result};
use crate::metrics::{gaussian_taps, SSIM_C1, SSIM_C2, SSIM_WINDOW};
use crate::scalar::Scalar;
use crate::tape::{Tape, Value};
use crate::tensor::Tensor;

/// Keeps `ln` finite on zero probabilities.
pub(crate) const LOG_EPS: f64 = 1e-12;
/// Keeps score normalization finite when every channel saturates low.
pub(crate) const NORM_EPS: f64 = 1e-8;
/// Inside the gradient-magnitude square root.
const MAG_EPS: f64 = 1e-16;

/// Hard-example mining policy for the semantic representation loss: keep
/// every pixel whose correct-class probability falls below `threshold`,
/// but never fewer than `min_kept_frac * H * W` pixels (the largest
/// losses win ties for the quota).
#[derive(Clone, Copy, Debug)]
pub struct OhemConfig {
    pub threshold: f64,
    pub min_kept_frac: f64,
}

impl Default for OhemConfig {
    fn default() -> Self {
        Self {
            threshold: 0.7,
            min_kept_frac: 1.0 / 16.0,
        }
    }
}

fn gauss_window_const<S: Scalar>(tape: &Tape<S>) -> Value {
    let taps = gaussian_taps();
    let mut data = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for ty in taps {
        for tx in taps {
            data.push(S::from_f64(ty * tx));
        }
    }
    tape.constant(Tensor::new(vec![1, 1, SSIM_WINDOW, SSIM_WINDOW], data))
}

/// Mean windowed SSIM of two `[C,H,W]` values in `[0,1]`, averaged over
/// channels; valid-mode 11x11 Gaussian windows.
pub(crate) fn ssim_mean_on_tape<S: Scalar>(
    tape: &Tape<S>,
    a01: Value,
    b01: Value,
) -> Result<Value> {
    let sa = tape.shape(a01);
    let sb = tape.shape(b01);
    if sa != sb {
        return Err(Error::Size(format!("ssim operands differ: {sa:?} vs {sb:?}")));
    }
    let (c, h, w) = (sa[0], sa[1], sa[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Size(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let win = gauss_window_const(tape);
    let blur = |x: Value| tape.conv2d(x, win, None, 1, 0);
    let mut acc: Option<Value> = None;
    for ch in 0..c {
        let a = tape.slice_chan(a01, ch, ch + 1);
        let b = tape.slice_chan(b01, ch, ch + 1);
        let mu_a = blur(a);
        let mu_b = blur(b);
        let aa = blur(tape.mul(a, a));
        let bb = blur(tape.mul(b, b));
        let ab = blur(tape.mul(a, b));
        let mu_aa = tape.mul(mu_a, mu_a);
        let mu_bb = tape.mul(mu_b, mu_b);
        let mu_ab = tape.mul(mu_a, mu_b);
        let var_a = tape.sub(aa, mu_aa);
        let var_b = tape.sub(bb, mu_bb);
        let cov = tape.sub(ab, mu_ab);
        let l_num = tape.add_scalar(tape.mul_scalar(mu_ab, 2.0), SSIM_C1);
        let c_num = tape.add_scalar(tape.mul_scalar(cov, 2.0), SSIM_C2);
        let l_den = tape.add_scalar(tape.add(mu_aa, mu_bb), SSIM_C1);
        let c_den = tape.add_scalar(tape.add(var_a, var_b), SSIM_C2);
        let num = tape.mul(l_num, c_num);
        let den = tape.mul(l_den, c_den);
        let s = tape.mean(tape.div(num, den));
        acc = Some(match acc {
            Some(prev) => tape.add(prev, s),
            None => s,
        });
    }
    Ok(tape.mul_scalar(acc.expect("at least one channel"), 1.0 / c as f64))
}

/// Per-channel Sobel gradient magnitude `sqrt(gx^2 + gy^2 + eps)` with
/// 3x3 kernels, valid windows only (flat inputs give zero everywhere).
pub(crate) fn sobel_mag_on_tape<S: Scalar>(tape: &Tape<S>, x: Value) -> Value {
    let kx: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
    let ky: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
    let mk = |k: &[f64; 9]| {
        tape.constant(Tensor::new(
            vec![1, 1, 3, 3],
            k.iter().map(|&v| S::from_f64(v)).collect(),
        ))
    };
    let (wx, wy) = (mk(&kx), mk(&ky));
    let c = tape.shape(x)[0];
    let mut mags = Vec::with_capacity(c);
    for ch in 0..c {
        let plane = tape.slice_chan(x, ch, ch + 1);
        let gx = tape.conv2d(plane, wx, None, 1, 0);
        let gy = tape.conv2d(plane, wy, None, 1, 0);
        let g2 = tape.add(tape.mul(gx, gx), tape.mul(gy, gy));
        mags.push(tape.sqrt(tape.add_scalar(g2, MAG_EPS)));
    }
    if mags.len() == 1 {
        mags[0]
    } else {
        tape.concat_chan(&mags)
    }
}

/// Map a tanh-range score map to per-pixel probabilities: shift to `[0,1]`
/// and normalize channels (with a small floor so the result is finite and
/// sums to one even when every channel saturates).
pub(crate) fn normalize_scores_on_tape<S: Scalar>(tape: &Tape<S>, raw: Value) -> Value {
    let n = tape.shape(raw)[0];
    let s01 = tape.add_scalar(tape.mul_scalar(raw, 0.5), 0.5);
    let num = tape.add_scalar(s01, NORM_EPS);
    let den = tape.add_scalar(tape.sum_chan(s01), NORM_EPS * n as f64);
    tape.div_chan(num, den)
}

/// Hard-example-mined cross entropy over normalized per-pixel
/// probabilities. The kept-pixel selection is made on forward values (a
/// subgradient choice); gradients flow through the cross entropy of the
/// kept pixels only.
pub(crate) fn ohem_ce_on_tape<S: Scalar>(
    tape: &Tape<S>,
    probs: Value,
    label: &LabelMap,
    cfg: &OhemConfig,
) -> Result<Value> {
    let shape = tape.shape(probs);
    let (n, h, w) = (shape[0], shape[1], shape[2]);
    if (h, w) != (label.h, label.w) {
        return Err(Error::Size(format!(
            "ohem: probabilities {h}x{w} vs labels {}x{}",
            label.h, label.w
        )));
    }
    let hw = h * w;
    let mut sel = Tensor::<S>::zeros(&[n, h, w]);
    for (p, &c) in label.data.iter().enumerate() {
        if c as usize >= n {
            return Err(Error::LabelRange(format!(
                "ohem: label {c} exceeds class count {n}"
            )));
        }
        sel.data_mut()[c as usize * hw + p] = S::ONE;
    }
    let onehot = tape.constant(sel);
    let p_correct = tape.sum_chan(tape.mul(probs, onehot));
    let ce = tape.neg(tape.ln(tape.add_scalar(p_correct, LOG_EPS)));

    // Selection on forward values.
    let pvals = tape.get(p_correct);
    let cevals = tape.get(ce);
    let thresh = S::from_f64(cfg.threshold);
    let min_kept = ((hw as f64 * cfg.min_kept_frac).floor() as usize).max(1);
    let mut mask = vec![S::ZERO; hw];
    let mut kept = 0usize;
    for (p, &pv) in pvals.data().iter().enumerate() {
        if pv < thresh {
            mask[p] = S::ONE;
            kept += 1;
        }
    }
    if kept < min_kept {
        let mut order: Vec<usize> = (0..hw).collect();
        order.sort_by(|&a, &b| {
            cevals.data()[b]
                .partial_cmp(&cevals.data()[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        mask.fill(S::ZERO);
        for &p in order.iter().take(min_kept) {
            mask[p] = S::ONE;
        }
        kept = min_kept;
    }
    let mask = tape.constant(Tensor::new(vec![1, h, w], mask));
    let masked = tape.mul(ce, mask);
    Ok(tape.mul_scalar(tape.sum(masked), 1.0 / kept as f64))
}
