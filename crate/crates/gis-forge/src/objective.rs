//! Background, adversarial, and combined min-over-K diversity objectives.
//!
//! The combined objective routes foreground gradients to exactly one of the
//! K generator outputs (the one with the smallest perceptual + adversarial
//! sum) while averaging the background term over all outputs: the network
//! can spread lighting/appearance hypotheses across branches, but no branch
//! may corrupt the background it has to reproduce.
//!
//! The written adversarial forms are realized as per-cell binary
//! cross-entropy against mask-derived target maps, with soft (fractional
//! occupancy) masks acting as soft targets. All per-pixel losses are means
//! so weights are resolution-independent.

use ndarray::{Array2, ArrayD, Axis, IxDyn};

use crate::error::GisError;
use crate::gbuffer::downscale_mask;
use crate::tensor::{Tape, Tensor};

/// Mean binary cross-entropy between logits and (possibly soft) targets:
/// `mean(softplus(z) - z * t)`. Exact at the fixed points: 0 in the
/// perfect-confidence limit, ln 2 at probability one half.
pub fn bce_with_logits_mean(logits: &Tensor, targets: &Tensor) -> Tensor {
    let per_cell = logits.softplus().sub(&logits.mul(targets));
    per_cell.mean()
}

/// L1 loss restricted to the background region: mean over background pixels
/// (and channels) of the absolute difference. Zero when the mask covers
/// everything.
pub fn background_loss(
    tape: &Tape,
    target: &Tensor,
    synth: &Tensor,
    mask: &Array2<f64>,
) -> Result<Tensor, GisError> {
    let shape = target.shape();
    if shape != synth.shape() {
        return Err(GisError::Shape {
            what: "background loss images".into(),
            expected: format!("{shape:?}"),
            got: format!("{:?}", synth.shape()),
        });
    }
    let (h, w) = (shape[2], shape[3]);
    if mask.dim() != (h, w) {
        return Err(GisError::Shape {
            what: "background loss mask".into(),
            expected: format!("({h}, {w})"),
            got: format!("{:?}", mask.dim()),
        });
    }
    let bg_weight = mask.mapv(|v| 1.0 - v);
    let n_bg: f64 = bg_weight.sum();
    if n_bg == 0.0 {
        return Ok(tape.scalar(0.0));
    }
    let w_leaf = tape.leaf(mask2_to4(&bg_weight)).broadcast_to(&shape);
    Ok(target.sub(synth).abs().mul(&w_leaf).sum().scale(1.0 / (3.0 * n_bg)))
}

/// Downscale the full-resolution mask to the logit-map resolution.
fn logit_mask(mask: &Array2<f64>, logits_shape: &[usize]) -> Result<Array2<f64>, GisError> {
    let (h, w) = (mask.dim().0, mask.dim().1);
    let (lh, lw) = (logits_shape[2], logits_shape[3]);
    if lh == 0 || lw == 0 || h % lh != 0 || w % lw != 0 || h / lh != w / lw {
        return Err(GisError::Shape {
            what: "mask-to-logit downscale".into(),
            expected: format!("logit map evenly dividing {h}x{w}"),
            got: format!("{lh}x{lw}"),
        });
    }
    downscale_mask(mask, h / lh)
}

/// Discriminator objective: BCE toward "synthetic" on object-occupied cells
/// of the fake image (soft targets `1 - S`), and toward "real" everywhere on
/// the real image.
pub fn adversarial_d_loss(
    tape: &Tape,
    logits_fake: &Tensor,
    logits_real: &Tensor,
    mask: &Array2<f64>,
) -> Result<Tensor, GisError> {
    let soft = logit_mask(mask, &logits_fake.shape())?;
    let fake_targets = tape.leaf(mask2_to4(&soft.mapv(|v| 1.0 - v))).broadcast_to(&logits_fake.shape());
    let ones_arr = ArrayD::from_elem(IxDyn(&logits_real.shape()), 1.0);
    let ones = tape.leaf(ones_arr);
    let fake_term = bce_with_logits_mean(logits_fake, &fake_targets);
    let real_term = bce_with_logits_mean(logits_real, &ones);
    Ok(fake_term.add(&real_term))
}

/// Generator-side adversarial objective: push discriminator cells under the
/// object toward "real", weighted by fractional occupancy; background cells
/// are excluded. Returns the loss and a degenerate-foreground flag (empty
/// mask yields exactly zero).
/// ```
/// use gis_forge::objective::adversarial_g_loss;
/// use gis_forge::tensor::Tape;
/// use ndarray::{Array2, ArrayD, IxDyn};
///
/// let tape = Tape::new();
/// let logits = tape.leaf(ArrayD::zeros(IxDyn(&[1, 1, 2, 2]))); // sigma = 0.5
/// let mask = Array2::from_elem((8, 8), 1.0);
/// let (loss, degenerate) = adversarial_g_loss(&tape, &logits, &mask).unwrap();
/// assert!(!degenerate);
/// assert!((loss.scalar() - std::f64::consts::LN_2).abs() < 1e-12);
/// ```
pub fn adversarial_g_loss(
    tape: &Tape,
    logits_fake: &Tensor,
    mask: &Array2<f64>,
) -> Result<(Tensor, bool), GisError> {
    let soft = logit_mask(mask, &logits_fake.shape())?;
    let occupancy: f64 = soft.sum();
    if occupancy == 0.0 {
        return Ok((tape.scalar(0.0), true));
    }
    // BCE toward target 1 from logits: softplus(-z).
    let per_cell = logits_fake.neg().softplus();
    let w_leaf = tape.leaf(mask2_to4(&soft)).broadcast_to(&logits_fake.shape());
    let loss = per_cell.mul(&w_leaf).sum().scale(1.0 / occupancy);
    Ok((loss, false))
}

/// Scalar summary of one combined-objective evaluation.
#[derive(Clone, Debug)]
pub struct LossBundle {
    /// Per-output perceptual foreground losses.
    pub fg_perceptual: Vec<f64>,
    /// Per-output adversarial foreground losses.
    pub fg_adversarial: Vec<f64>,
    /// Per-output background losses.
    pub bg: Vec<f64>,
    /// Index of the selected (minimal) foreground branch.
    pub k_star: usize,
    /// Foreground weight, inversely proportional to object size.
    pub w: f64,
    /// Empty-mask degenerate case: foreground term dropped.
    pub degenerate_foreground: bool,
    /// Combined scalar, differentiable.
    pub total: Tensor,
}

/// Foreground weight: `min(1, rho * H * W / |S|)`, and 0 for an empty mask.
pub fn foreground_weight(mask: &Array2<f64>, rho: f64) -> f64 {
    let (h, w) = mask.dim();
    let fg: f64 = mask.iter().filter(|&&v| v > 0.5).count() as f64;
    if fg == 0.0 {
        0.0
    } else {
        (rho * (h * w) as f64 / fg).min(1.0)
    }
}

/// Combine K foreground loss pairs and K background losses into the
/// diversity objective:
/// `total = w * (P[k*] + A[k*]) + (1 - w) * mean_k B[k]` with
/// `k* = argmin_k (P[k] + A[k])` (ties resolve to the lowest index).
///
/// Only the selected branch's foreground nodes enter the graph, so
/// non-selected branches receive exactly zero foreground gradient.
/// ```
/// use gis_forge::objective::combine_diversity;
/// use gis_forge::tensor::Tape;
/// use ndarray::Array2;
///
/// let tape = Tape::new();
/// // 64x64 image with |S| = 1024 foreground pixels, rho = 0.1: w = 0.4.
/// let mask = Array2::from_shape_fn((64, 64), |(r, c)| f64::from(r * 64 + c < 1024));
/// let fg = vec![
///     (tape.scalar(2.0), tape.scalar(1.0)),  // branch 0: P + A = 3.0
///     (tape.scalar(0.5), tape.scalar(0.5)),  // branch 1: P + A = 1.0  <- k*
/// ];
/// let bg = vec![tape.scalar(0.2), tape.scalar(0.4)];
/// let bundle = combine_diversity(&fg, &bg, &mask, 0.1).unwrap();
/// assert_eq!(bundle.k_star, 1);
/// assert!((bundle.w - 0.4).abs() < 1e-12);
/// assert!((bundle.total.scalar() - (0.4 * 1.0 + 0.6 * 0.3)).abs() < 1e-12);
/// ```
pub fn combine_diversity(
    fg_losses: &[(Tensor, Tensor)],
    bg_losses: &[Tensor],
    mask: &Array2<f64>,
    rho: f64,
) -> Result<LossBundle, GisError> {
    let k = fg_losses.len();
    if k == 0 || bg_losses.len() != k {
        return Err(GisError::Config(format!(
            "combine_diversity needs matching K >= 1 foreground/background losses, got {k}/{}",
            bg_losses.len()
        )));
    }
    let fg_perceptual: Vec<f64> = fg_losses.iter().map(|(p, _)| p.scalar()).collect();
    let fg_adversarial: Vec<f64> = fg_losses.iter().map(|(_, a)| a.scalar()).collect();

    let mut k_star = 0usize;
    let mut best = f64::INFINITY;
    for (i, (p, a)) in fg_losses.iter().enumerate() {
        let s = p.scalar() + a.scalar();
        if s < best {
            best = s;
            k_star = i;
        }
    }

    let w = foreground_weight(mask, rho);
    let degenerate = w == 0.0;
    let k_star = if degenerate { 0 } else { k_star };

    let mut bg_sum = bg_losses[0].clone();
    for b in &bg_losses[1..] {
        bg_sum = bg_sum.add(b);
    }
    let bg_mean = bg_sum.scale(1.0 / k as f64);

    let total = if degenerate {
        bg_mean
    } else {
        let (p, a) = &fg_losses[k_star];
        p.add(a).scale(w).add(&bg_mean.scale(1.0 - w))
    };

    Ok(LossBundle {
        fg_perceptual,
        fg_adversarial,
        bg: bg_losses.iter().map(|b| b.scalar()).collect(),
        k_star,
        w,
        degenerate_foreground: degenerate,
        total,
    })
}

fn mask2_to4(m: &Array2<f64>) -> ArrayD<f64> {
    m.clone().into_dyn().insert_axis(Axis(0)).insert_axis(Axis(0))
}
