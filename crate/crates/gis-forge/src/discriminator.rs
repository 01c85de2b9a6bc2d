//! Fully-convolutional patch discriminator and its gradient regularizer.
//!
//! The default configuration is five 4x4 convolutions with strides
//! (2,2,2,2,1) and leaky rectifications after all but the last, mapping an
//! RGB image to a 2D logit map with one cell per 16x16 input patch. The
//! discriminator sees images only; it is not conditioned on G-buffers.

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::GisError;
use crate::params::{he_normal, seeded_rng, zeros, ParamSet};
use crate::tensor::{ConvMeta, Pad4, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub pad: (usize, usize, usize, usize),
}

impl ConvSpec {
    fn pad4(&self) -> Pad4 {
        Pad4 { top: self.pad.0, bottom: self.pad.1, left: self.pad.2, right: self.pad.3 }
    }

    fn out_dim(&self, h: usize, w: usize) -> Result<(usize, usize), GisError> {
        let oh = h + self.pad.0 + self.pad.1;
        let ow = w + self.pad.2 + self.pad.3;
        if oh < self.kernel.0 || ow < self.kernel.1
            || (oh - self.kernel.0) % self.stride != 0
            || (ow - self.kernel.1) % self.stride != 0
        {
            return Err(GisError::Shape {
                what: "discriminator layer input".into(),
                expected: format!(
                    "padded size aligned to kernel {:?} stride {}",
                    self.kernel, self.stride
                ),
                got: format!("{h}x{w}"),
            });
        }
        Ok(((oh - self.kernel.0) / self.stride + 1, (ow - self.kernel.1) / self.stride + 1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub layers: Vec<ConvSpec>,
    pub leaky_slope: f64,
    pub seed: u64,
}

impl DiscriminatorConfig {
    /// The standard patch critic: channels [32, 64, 128, 256, 1], 4x4
    /// kernels, strides (2,2,2,2,1). Output cells cover 16x16 patches, so
    /// the logit map is input-size / 16.
    /// ```
    /// use gis_forge::discriminator::DiscriminatorConfig;
    ///
    /// let cfg = DiscriminatorConfig::default_patch(1);
    /// assert_eq!(cfg.logit_map_dim(64, 64).unwrap(), (4, 4));
    /// assert_eq!(cfg.logit_map_dim(128, 256).unwrap(), (8, 16));
    /// assert!(cfg.logit_map_dim(65, 64).is_err()); // not divisible by 16
    /// ```
    pub fn default_patch(seed: u64) -> Self {
        let widths = [3usize, 32, 64, 128, 256, 1];
        let mut layers = Vec::with_capacity(5);
        for i in 0..5 {
            let stride = if i < 4 { 2 } else { 1 };
            // Stride-2 4x4 halves exactly with symmetric padding 1; the
            // stride-1 output layer keeps its size with asymmetric padding.
            let pad = if i < 4 { (1, 1, 1, 1) } else { (1, 2, 1, 2) };
            layers.push(ConvSpec {
                in_ch: widths[i],
                out_ch: widths[i + 1],
                kernel: (4, 4),
                stride,
                pad,
            });
        }
        DiscriminatorConfig { layers, leaky_slope: 0.2, seed }
    }

    pub fn check(&self) -> Result<(), GisError> {
        if self.layers.is_empty() {
            return Err(GisError::Config("discriminator needs at least one layer".into()));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_ch != pair[1].in_ch {
                return Err(GisError::Config(format!(
                    "discriminator layer {i} out_ch {} != layer {} in_ch {}",
                    pair[0].out_ch,
                    i + 1,
                    pair[1].in_ch
                )));
            }
        }
        Ok(())
    }

    pub fn logit_map_dim(&self, h: usize, w: usize) -> Result<(usize, usize), GisError> {
        let (mut lh, mut lw) = (h, w);
        for l in &self.layers {
            (lh, lw) = l.out_dim(lh, lw)?;
        }
        Ok((lh, lw))
    }
}

pub struct Discriminator {
    config: DiscriminatorConfig,
    params: ParamSet,
}

impl Discriminator {
    pub fn build(config: DiscriminatorConfig) -> Result<Self, GisError> {
        config.check()?;
        let mut rng = seeded_rng(config.seed);
        let mut params = ParamSet::new();
        for (i, l) in config.layers.iter().enumerate() {
            let fan_in = l.in_ch * l.kernel.0 * l.kernel.1;
            params.push(
                format!("d.l{i}.w"),
                he_normal(&mut rng, &[l.out_ch, l.in_ch, l.kernel.0, l.kernel.1], fan_in, config.leaky_slope),
            );
            params.push(format!("d.l{i}.b"), zeros(&[l.out_ch]));
        }
        Ok(Discriminator { config, params })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Bind parameters onto a tape for one or more forward passes.
    pub fn bind<'a>(&'a self, tape: &Tape, trainable: bool) -> BoundDiscriminator<'a> {
        BoundDiscriminator {
            config: &self.config,
            vars: self.params.bind(tape, trainable),
            circular: false,
        }
    }

    /// Test harness binding with circular padding, which makes the
    /// patch response exactly translation-covariant.
    pub fn bind_circular<'a>(&'a self, tape: &Tape) -> BoundDiscriminator<'a> {
        BoundDiscriminator { config: &self.config, vars: self.params.bind(tape, false), circular: true }
    }

    /// Convenience inference on plain arrays (`[B,3,H,W]` -> logit map).
    pub fn forward_arrays(&self, image: &ArrayD<f64>) -> Result<ArrayD<f64>, GisError> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let x = tape.leaf(image.clone());
        Ok(bound.forward(&x)?.value())
    }
}

pub struct BoundDiscriminator<'a> {
    config: &'a DiscriminatorConfig,
    vars: Vec<Tensor>,
    circular: bool,
}

struct LayerTrace {
    /// Post-bias, pre-activation map of this layer.
    pre_activation: Tensor,
    meta: ConvMeta,
}

impl BoundDiscriminator<'_> {
    pub fn param_vars(&self) -> &[Tensor] {
        &self.vars
    }

    /// Raw (unbounded) logit map for `image` `[B,3,H,W]`.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor, GisError> {
        Ok(self.forward_traced(image)?.0)
    }

    /// Forward pass that also records per-layer pre-activations and
    /// convolution geometry; the regularizer rebuilds input gradients from
    /// this trace.
    fn forward_traced(&self, image: &Tensor) -> Result<(Tensor, Vec<LayerTrace>), GisError> {
        let shape = image.shape();
        if shape.len() != 4 || shape[1] != self.config.layers[0].in_ch {
            return Err(GisError::Shape {
                what: "discriminator input".into(),
                expected: format!("[B, {}, H, W]", self.config.layers[0].in_ch),
                got: format!("{shape:?}"),
            });
        }
        // Validate the whole size chain up front for a precise error.
        self.config.logit_map_dim(shape[2], shape[3])?;

        let mut x = image.clone();
        let n = self.config.layers.len();
        let mut trace = Vec::with_capacity(n);
        for (i, l) in self.config.layers.iter().enumerate() {
            let in_shape = x.shape();
            let conv = if self.circular {
                x.pad_circular(l.pad4()).conv2d(&self.vars[2 * i], l.stride, Pad4::ZERO)
            } else {
                x.conv2d(&self.vars[2 * i], l.stride, l.pad4())
            };
            let s = conv.shape();
            let bias = self.vars[2 * i + 1].reshape(&[1, l.out_ch, 1, 1]).broadcast_to(&s);
            let pre = conv.add(&bias);
            trace.push(LayerTrace {
                pre_activation: pre.clone(),
                meta: ConvMeta {
                    stride: l.stride,
                    pad: l.pad4(),
                    in_hw: (in_shape[2], in_shape[3]),
                    k: l.kernel,
                },
            });
            x = if i + 1 < n { pre.leaky_relu(self.config.leaky_slope) } else { pre };
        }
        Ok((x, trace))
    }
}

/// Gradient regularizer for the patch critic, following the sigma-weighted
/// stabilization scheme:
///
/// `R = gamma/2 * ( E_real[(1 - sigma(D))^2 * |grad_x D|^2]
///                + E_fake[sigma(D)^2 * |grad_x D|^2] )`
///
/// The expectation runs over logit cells and batch images. Per-cell input
/// gradients are obtained by replicating the image over a batch axis and
/// differentiating the diagonal of the resulting logit stack, which keeps
/// the whole computation on the tape — the returned scalar is itself
/// differentiable w.r.t. the discriminator parameters.
pub fn d_regularizer(
    tape: &Tape,
    disc: &BoundDiscriminator<'_>,
    real_batch: &ArrayD<f64>,
    fake_batch: &ArrayD<f64>,
    gamma: f64,
) -> Result<Tensor, GisError> {
    if real_batch.shape()[0] == 0 || fake_batch.shape()[0] == 0 {
        return Err(GisError::Config("d_regularizer needs non-empty batches".into()));
    }
    if gamma == 0.0 {
        return Ok(tape.scalar(0.0));
    }
    let real = weighted_grad_norm(tape, disc, real_batch, true)?;
    let fake = weighted_grad_norm(tape, disc, fake_batch, false)?;
    Ok(real.add(&fake).scale(gamma / 2.0))
}

/// `mean_{image, cell} weight(sigma) * |grad_x d_cell|^2` for one batch.
///
/// The per-cell input gradients form the Jacobian of the logit map; they
/// are built by seeding one identity basis vector per cell and pulling the
/// whole basis back through the layers as a J-sized batch of
/// `conv2d_input_grad` ops (activation masks broadcast from the single
/// forward pass). Everything stays on the tape, so the result remains
/// differentiable w.r.t. the weights.
fn weighted_grad_norm(
    tape: &Tape,
    disc: &BoundDiscriminator<'_>,
    batch: &ArrayD<f64>,
    is_real: bool,
) -> Result<Tensor, GisError> {
    debug_assert!(!disc.circular, "regularizer assumes zero padding");
    let b_n = batch.shape()[0];
    let slope = disc.config.leaky_slope;
    let mut acc = tape.scalar(0.0);
    for b in 0..b_n {
        let img = batch.index_axis(Axis(0), b).to_owned().insert_axis(Axis(0));
        let x = tape.leaf(img.into_dyn());
        let (logits, trace) = disc.forward_traced(&x)?; // [1, 1, lh, lw]
        let (lh, lw) = {
            let s = logits.shape();
            (s[2], s[3])
        };
        let j = lh * lw;

        let mut g = tape.leaf(identity_seeds(j, lh, lw));
        for (i, layer) in trace.iter().enumerate().rev() {
            g = g.conv2d_input_grad(&disc.vars[2 * i], layer.meta);
            if i > 0 {
                // Derivative mask of the previous layer's rectification,
                // locally constant (as in any piecewise-linear double
                // backward), broadcast from batch 1 to the J seeds.
                let mask = trace[i - 1]
                    .pre_activation
                    .value_ref()
                    .mapv(|v| if v > 0.0 { 1.0 } else { slope });
                let mask = tape.leaf(mask).broadcast_to(&g.shape());
                g = g.mul(&mask);
            }
        }

        // Per-cell squared gradient norms: [J].
        let norms = g.sqr().sum_axes_keep(&[1, 2, 3]).reshape(&[j]);
        // Per-cell logits: [J] (weights depend on the parameters too).
        let d_cells = logits.reshape(&[j]);
        let s = d_cells.sigmoid();
        let weight = if is_real { s.neg().add_const(1.0).sqr() } else { s.sqr() };
        let term = weight.mul(&norms).mean();
        acc = acc.add(&term);
    }
    Ok(acc.scale(1.0 / b_n as f64))
}

/// One identity basis vector per logit cell: row i is zero except for a one
/// at cell i.
fn identity_seeds(j: usize, lh: usize, lw: usize) -> ArrayD<f64> {
    let mut m = ArrayD::zeros(IxDyn(&[j, 1, lh, lw]));
    for i in 0..j {
        m[[i, 0, i / lw, i % lw]] = 1.0;
    }
    m
}

/// Fraction of logit cells classified consistently with their targets
/// (real image cells -> real; fake image cells -> the mask-derived label).
pub fn d_accuracy(
    logits_real: &ArrayD<f64>,
    logits_fake: &ArrayD<f64>,
    fake_soft_mask: &Array2<f64>,
) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for &v in logits_real.iter() {
        correct += usize::from(v > 0.0);
        total += 1;
    }
    let lw = logits_fake.shape()[3];
    for (i, &v) in logits_fake.iter().enumerate() {
        let cell = i % (logits_fake.shape()[2] * lw);
        let occupied = fake_soft_mask[[cell / lw, cell % lw]] > 0.5;
        let predicted_real = v > 0.0;
        correct += usize::from(predicted_real != occupied);
        total += 1;
    }
    correct as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    use crate::params::seeded_rng;
    use crate::tensor::gradcheck::{central_diff, rel_err};

    fn rand_batch(rng: &mut rand_chacha::ChaCha20Rng, b: usize, h: usize, w: usize) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(&[b, 3, h, w]), |_| rng.random::<f64>())
    }

    #[test]
    fn default_map_sizes() {
        let cfg = DiscriminatorConfig::default_patch(1);
        assert_eq!(cfg.logit_map_dim(64, 64).unwrap(), (4, 4));
        assert_eq!(cfg.logit_map_dim(128, 256).unwrap(), (8, 16));
        assert!(cfg.logit_map_dim(65, 64).is_err());
    }

    #[test]
    fn forward_shapes_and_batching() {
        let disc = Discriminator::build(DiscriminatorConfig::default_patch(2)).unwrap();
        let mut rng = seeded_rng(3);
        let batch = rand_batch(&mut rng, 3, 64, 64);
        let logits = disc.forward_arrays(&batch).unwrap();
        assert_eq!(logits.shape(), &[3, 1, 4, 4]);
        // Each batch row matches its own single-image forward.
        let one = batch.index_axis(Axis(0), 1).to_owned().insert_axis(Axis(0)).into_dyn();
        let single = disc.forward_arrays(&one).unwrap();
        let row = logits.index_axis(Axis(0), 1);
        let worst = single
            .index_axis(Axis(0), 0)
            .iter()
            .zip(row.iter())
            .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        assert!(worst < 1e-12);
    }

    #[test]
    fn translation_covariance_with_circular_padding() {
        let disc = Discriminator::build(DiscriminatorConfig::default_patch(4)).unwrap();
        let mut rng = seeded_rng(5);
        let img = rand_batch(&mut rng, 1, 64, 64);
        // Shift the input by 16 pixels (one output cell) circularly.
        let mut shifted = img.clone();
        for c in 0..3 {
            for r in 0..64 {
                for col in 0..64 {
                    shifted[[0, c, r, col]] = img[[0, c, r, (col + 64 - 16) % 64]];
                }
            }
        }
        let tape = Tape::new();
        let bound = disc.bind_circular(&tape);
        let a = bound.forward(&tape.leaf(img)).unwrap().value();
        let b = bound.forward(&tape.leaf(shifted)).unwrap().value();
        for r in 0..4 {
            for c in 0..4 {
                let expect = a[[0, 0, r, (c + 3) % 4]];
                assert_abs_diff_eq!(b[[0, 0, r, c]], expect, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn regularizer_zero_cases() {
        let mut disc = Discriminator::build(DiscriminatorConfig::default_patch(6)).unwrap();
        let mut rng = seeded_rng(7);
        let real = rand_batch(&mut rng, 1, 32, 32);
        let fake = rand_batch(&mut rng, 1, 32, 32);
        // Stride chain still needs 32x32 -> 2x2 map; gamma = 0 short-circuits.
        let tape = Tape::new();
        let bound = disc.bind(&tape, false);
        let r = d_regularizer(&tape, &bound, &real, &fake, 0.0).unwrap();
        assert_abs_diff_eq!(r.scalar(), 0.0);

        // Constant-output discriminator: zero conv weights, so the input
        // gradient vanishes and the regularizer is exactly 0.
        for (name, v) in disc.params_mut().entries_mut() {
            if name.ends_with(".w") {
                v.fill(0.0);
            } else {
                v.fill(0.3);
            }
        }
        let tape = Tape::new();
        let bound = disc.bind(&tape, true);
        let r = d_regularizer(&tape, &bound, &real, &fake, 2.0).unwrap();
        assert_abs_diff_eq!(r.scalar(), 0.0);
    }

    #[test]
    fn linear_discriminator_closed_form() {
        // One full-image kernel, no padding: D(x) = <a, x> + b, a single
        // logit. grad_x D = a, so R = gamma/2 * ((1-sigma(D_r))^2 +
        // sigma(D_f)^2) * |a|^2, computable by hand.
        let cfg = DiscriminatorConfig {
            layers: vec![ConvSpec { in_ch: 3, out_ch: 1, kernel: (8, 8), stride: 1, pad: (0, 0, 0, 0) }],
            leaky_slope: 0.2,
            seed: 11,
        };
        let disc = Discriminator::build(cfg).unwrap();
        let mut rng = seeded_rng(12);
        let real = rand_batch(&mut rng, 1, 8, 8);
        let fake = rand_batch(&mut rng, 1, 8, 8);

        let a = disc.params().get("d.l0.w").unwrap().clone();
        let bias = disc.params().get("d.l0.b").unwrap()[[0]];
        let dot = |x: &ArrayD<f64>| -> f64 {
            a.iter().zip(x.iter()).map(|(p, q)| p * q).sum::<f64>() + bias
        };
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let a_norm2: f64 = a.iter().map(|v| v * v).sum();
        let gamma = 2.0;
        let expected = gamma / 2.0
            * ((1.0 - sig(dot(&real))).powi(2) * a_norm2 + sig(dot(&fake)).powi(2) * a_norm2);

        let tape = Tape::new();
        let bound = disc.bind(&tape, false);
        let r = d_regularizer(&tape, &bound, &real, &fake, gamma).unwrap();
        assert_abs_diff_eq!(r.scalar(), expected, epsilon = 1e-10);
    }

    #[test]
    fn regularizer_symmetric_in_real_fake_under_logit_negation() {
        // Negating the logits and swapping the batches leaves R unchanged:
        // (1 - sigma(-d)) = sigma(d).
        let cfg = DiscriminatorConfig {
            layers: vec![
                ConvSpec { in_ch: 3, out_ch: 4, kernel: (3, 3), stride: 2, pad: (1, 1, 1, 1) },
                ConvSpec { in_ch: 4, out_ch: 1, kernel: (3, 3), stride: 2, pad: (1, 1, 1, 1) },
            ],
            leaky_slope: 1.0, // linear so that -D is realizable by negating weights
            seed: 21,
        };
        let disc = Discriminator::build(cfg.clone()).unwrap();
        let mut neg = Discriminator::build(cfg).unwrap();
        for (mine, theirs) in
            neg.params_mut().entries_mut().iter_mut().zip(disc.params().entries())
        {
            // Negate the output layer only: logits flip sign.
            mine.1 = if mine.0.starts_with("d.l1") { theirs.1.mapv(|v| -v) } else { theirs.1.clone() };
        }
        let mut rng = seeded_rng(22);
        let real = rand_batch(&mut rng, 2, 9, 9);
        let fake = rand_batch(&mut rng, 2, 9, 9);
        let tape = Tape::new();
        let r1 = d_regularizer(&tape, &disc.bind(&tape, false), &real, &fake, 2.0).unwrap().scalar();
        let r2 = d_regularizer(&tape, &neg.bind(&tape, false), &fake, &real, 2.0).unwrap().scalar();
        assert_abs_diff_eq!(r1, r2, epsilon = 1e-9);
    }

    #[test]
    fn regularizer_gradient_matches_finite_differences() {
        // Small discriminator on 8x8 inputs; checks the double-backward
        // path w.r.t. the weights.
        let cfg = DiscriminatorConfig {
            layers: vec![
                ConvSpec { in_ch: 3, out_ch: 4, kernel: (3, 3), stride: 2, pad: (1, 0, 1, 0) },
                ConvSpec { in_ch: 4, out_ch: 1, kernel: (3, 3), stride: 2, pad: (1, 0, 1, 0) },
            ],
            leaky_slope: 0.2,
            seed: 31,
        };
        let disc = Discriminator::build(cfg.clone()).unwrap();
        let mut rng = seeded_rng(32);
        let real = rand_batch(&mut rng, 1, 8, 8);
        let fake = rand_batch(&mut rng, 1, 8, 8);

        let tape = Tape::new();
        let bound = disc.bind(&tape, true);
        let r = d_regularizer(&tape, &bound, &real, &fake, 2.0).unwrap();
        let grads = r.backward();
        let analytic: Vec<ArrayD<f64>> =
            bound.param_vars().iter().map(|v| grads.get_or_zero(v)).collect();

        let flat_params: Vec<ArrayD<f64>> =
            disc.params().entries().iter().map(|(_, v)| v.clone()).collect();
        let eval = |vals: &[ArrayD<f64>]| -> f64 {
            let mut d2 = Discriminator::build(cfg.clone()).unwrap();
            for (slot, v) in d2.params_mut().entries_mut().iter_mut().zip(vals) {
                slot.1 = v.clone();
            }
            let t = Tape::new();
            let b = d2.bind(&t, false);
            d_regularizer(&t, &b, &real, &fake, 2.0).unwrap().scalar()
        };
        let mut worst = 0.0f64;
        for (arg, g) in analytic.iter().enumerate() {
            for probe in 0..6 {
                let idx = (probe * 31) % g.len();
                let numeric = central_diff(&eval, &flat_params, arg, idx, 1e-6);
                worst = worst.max(rel_err(g.as_slice().unwrap()[idx], numeric));
            }
        }
        assert!(worst < 1e-5, "regularizer double-backward mismatch: {worst}");
    }
}
