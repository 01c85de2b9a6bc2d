//! Frozen feature extractors and the masked perceptual loss.
//!
//! The default extractor is a seed-fixed random convolution pyramid; random
//! deep features are a serviceable perceptual proxy and keep the test suite
//! hermetic. Anything that maps an image to a list of activations can stand
//! in — the loss only consumes declared layer shapes.

use ndarray::{Array2, ArrayD, Axis};
use serde::{Deserialize, Serialize};

use crate::error::GisError;
use crate::gbuffer::downscale_mask;
use crate::params::{he_normal, seeded_rng, zeros, ParamSet};
use crate::tensor::{Pad4, Tape, Tensor};

/// Per-layer weighting of the perceptual loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerWeighting {
    /// `lambda_l = 1 / (C_l * H_l * W_l)` — equalizes layer contributions.
    InverseSize,
    /// `lambda_l = 1` — plain sums; with the identity extractor the loss
    /// reduces to a masked L1 distance.
    Unit,
}

/// Serializable description of a feature extractor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorSpec {
    /// Output channels per layer; empty means the identity extractor.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub leaky_slope: f64,
    pub seed: u64,
    pub weighting: LayerWeighting,
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        ExtractorSpec {
            channels: vec![16, 32, 64, 64, 64],
            kernel: 3,
            stride: 2,
            leaky_slope: 0.2,
            seed: 1234,
            weighting: LayerWeighting::InverseSize,
        }
    }
}

/// Frozen feature extractor: an ordered stack of strided convolutions with
/// leaky rectifications. Parameters are fixed at construction.
pub struct FeatureExtractor {
    spec: ExtractorSpec,
    params: ParamSet,
}

impl FeatureExtractor {
    pub fn from_spec(spec: ExtractorSpec) -> Self {
        let mut rng = seeded_rng(spec.seed);
        let mut params = ParamSet::new();
        let mut c_in = 3usize;
        for (i, &c_out) in spec.channels.iter().enumerate() {
            let fan_in = c_in * spec.kernel * spec.kernel;
            params.push(
                format!("fx.l{i}.w"),
                he_normal(&mut rng, &[c_out, c_in, spec.kernel, spec.kernel], fan_in, spec.leaky_slope),
            );
            params.push(format!("fx.l{i}.b"), zeros(&[c_out]));
            c_in = c_out;
        }
        FeatureExtractor { spec, params }
    }

    /// The identity extractor: one layer that is the image itself, with
    /// unit weighting.
    pub fn identity() -> Self {
        FeatureExtractor {
            spec: ExtractorSpec {
                channels: vec![],
                kernel: 1,
                stride: 1,
                leaky_slope: 0.0,
                seed: 0,
                weighting: LayerWeighting::Unit,
            },
            params: ParamSet::new(),
        }
    }

    pub fn spec(&self) -> &ExtractorSpec {
        &self.spec
    }

    pub fn layer_count(&self) -> usize {
        self.spec.channels.len().max(1)
    }

    /// Smallest admissible input side length.
    pub fn min_input(&self) -> usize {
        self.spec.stride.max(1).pow(self.spec.channels.len() as u32)
    }

    /// Declared activation shapes for an `h` x `w` input.
    pub fn layer_shapes(&self, h: usize, w: usize) -> Vec<(usize, usize, usize)> {
        if self.spec.channels.is_empty() {
            return vec![(3, h, w)];
        }
        let mut out = Vec::with_capacity(self.spec.channels.len());
        let (mut lh, mut lw) = (h, w);
        for &c in &self.spec.channels {
            lh /= self.spec.stride;
            lw /= self.spec.stride;
            out.push((c, lh, lw));
        }
        out
    }

    /// Feature activations for `image` (`[1, 3, H, W]`, values in [0, 1]).
    /// Deterministic; gradients flow through to the image but never into the
    /// frozen weights.
    pub fn extract(&self, tape: &Tape, image: &Tensor) -> Result<Vec<Tensor>, GisError> {
        let shape = image.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(GisError::Shape {
                what: "extractor input".into(),
                expected: "[B, 3, H, W]".into(),
                got: format!("{shape:?}"),
            });
        }
        let (h, w) = (shape[2], shape[3]);
        let min = self.min_input();
        if h < min || w < min {
            return Err(GisError::Shape {
                what: "extractor input resolution".into(),
                expected: format!("at least {min}x{min} for {} stride-{} layers", self.spec.channels.len(), self.spec.stride),
                got: format!("{h}x{w}"),
            });
        }
        if self.spec.channels.is_empty() {
            return Ok(vec![image.clone()]);
        }
        let bound = self.params.bind(tape, false);
        let pad = Pad4::same(self.spec.kernel / 2);
        let mut acts = Vec::with_capacity(self.spec.channels.len());
        let mut x = image.clone();
        for (i, &c_out) in self.spec.channels.iter().enumerate() {
            let wt = &bound[2 * i];
            let bt = &bound[2 * i + 1];
            let conv = x.conv2d(wt, self.spec.stride, pad);
            let s = conv.shape();
            let bias = bt.reshape(&[1, c_out, 1, 1]).broadcast_to(&s);
            x = conv.add(&bias).leaky_relu(self.spec.leaky_slope);
            acts.push(x.clone());
        }
        Ok(acts)
    }

    fn lambda(&self, c: usize, h: usize, w: usize) -> f64 {
        match self.spec.weighting {
            LayerWeighting::InverseSize => 1.0 / (c * h * w) as f64,
            LayerWeighting::Unit => 1.0,
        }
    }
}

/// Masked perceptual (feature-matching) loss between a target and a
/// synthesized image: per layer, the object mask is rescaled to the
/// activation resolution and gates an L1 difference; layers are summed with
/// the extractor's weights.
/// ```
/// use gis_forge::perception::{perceptual_loss, FeatureExtractor};
/// use gis_forge::tensor::Tape;
/// use ndarray::{Array2, ArrayD, IxDyn};
///
/// let fx = FeatureExtractor::identity();
/// let tape = Tape::new();
/// let a = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 3, 4, 4]), 0.25));
/// let b = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 3, 4, 4]), 0.75));
/// let mask = Array2::from_elem((4, 4), 1.0);
/// let loss = perceptual_loss(&fx, &tape, &a, &b, &mask).unwrap();
/// assert!((loss.scalar() - 0.5 * 48.0).abs() < 1e-12); // plain L1 sum
/// ```
pub fn perceptual_loss(
    fx: &FeatureExtractor,
    tape: &Tape,
    target: &Tensor,
    synth: &Tensor,
    mask: &Array2<f64>,
) -> Result<Tensor, GisError> {
    let ts = target.shape();
    let ss = synth.shape();
    if ts != ss {
        return Err(GisError::Shape {
            what: "perceptual loss images".into(),
            expected: format!("{ts:?}"),
            got: format!("{ss:?}"),
        });
    }
    let (h, w) = (ts[2], ts[3]);
    if mask.dim() != (h, w) {
        return Err(GisError::Shape {
            what: "perceptual loss mask".into(),
            expected: format!("({h}, {w})"),
            got: format!("{:?}", mask.dim()),
        });
    }
    let acts_t = fx.extract(tape, target)?;
    let acts_s = fx.extract(tape, synth)?;
    let mut total = tape.scalar(0.0);
    for (vt, vs) in acts_t.iter().zip(acts_s.iter()) {
        let s = vt.shape();
        let (c_l, h_l, w_l) = (s[1], s[2], s[3]);
        let factor = h / h_l;
        let soft = downscale_mask(mask, factor)?;
        let mask_leaf = tape.leaf(mask2_to4(&soft)).broadcast_to(&s);
        let term = vt.sub(vs).abs().mul(&mask_leaf).sum().scale(fx.lambda(c_l, h_l, w_l));
        total = total.add(&term);
    }
    Ok(total)
}

fn mask2_to4(m: &Array2<f64>) -> ArrayD<f64> {
    m.clone().into_dyn().insert_axis(Axis(0)).insert_axis(Axis(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;

    fn rand_image(rng: &mut rand_chacha::ChaCha20Rng, h: usize, w: usize) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(&[1, 3, h, w]), |_| rng.random::<f64>())
    }

    #[test]
    fn identity_extractor_returns_image() {
        let fx = FeatureExtractor::identity();
        let tape = Tape::new();
        let mut rng = seeded_rng(1);
        let img = tape.leaf(rand_image(&mut rng, 4, 4));
        let acts = fx.extract(&tape, &img).unwrap();
        assert_eq!(acts.len(), 1);
        assert_eq!(acts[0].value(), img.value());
    }

    #[test]
    fn declared_shapes_match_actual() {
        let fx = FeatureExtractor::from_spec(ExtractorSpec::default());
        let tape = Tape::new();
        let mut rng = seeded_rng(2);
        let img = tape.leaf(rand_image(&mut rng, 64, 64));
        let acts = fx.extract(&tape, &img).unwrap();
        let declared = fx.layer_shapes(64, 64);
        assert_eq!(acts.len(), declared.len());
        for (a, (c, h, w)) in acts.iter().zip(declared) {
            assert_eq!(a.shape(), vec![1, c, h, w]);
        }
    }

    #[test]
    fn extraction_is_deterministic() {
        let fx = FeatureExtractor::from_spec(ExtractorSpec { channels: vec![8, 8], ..ExtractorSpec::default() });
        let tape = Tape::new();
        let mut rng = seeded_rng(3);
        let img = rand_image(&mut rng, 16, 16);
        let a = fx.extract(&tape, &tape.leaf(img.clone())).unwrap();
        let b = fx.extract(&tape, &tape.leaf(img)).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.value(), y.value());
        }
    }

    #[test]
    fn too_small_input_rejected() {
        let fx = FeatureExtractor::from_spec(ExtractorSpec::default());
        let tape = Tape::new();
        let img = tape.leaf(ArrayD::zeros(IxDyn(&[1, 3, 16, 16])));
        assert!(fx.extract(&tape, &img).is_err());
    }

    #[test]
    fn loss_zero_for_identical_images_and_empty_mask() {
        let fx = FeatureExtractor::from_spec(ExtractorSpec { channels: vec![8, 8], ..ExtractorSpec::default() });
        let tape = Tape::new();
        let mut rng = seeded_rng(4);
        let img = rand_image(&mut rng, 16, 16);
        let other = rand_image(&mut rng, 16, 16);
        let a = tape.leaf(img.clone());
        let b = tape.leaf(img);
        let ones = Array2::from_elem((16, 16), 1.0);
        assert_abs_diff_eq!(perceptual_loss(&fx, &tape, &a, &b, &ones).unwrap().scalar(), 0.0);
        let c = tape.leaf(other);
        let empty = Array2::zeros((16, 16));
        assert_abs_diff_eq!(perceptual_loss(&fx, &tape, &a, &c, &empty).unwrap().scalar(), 0.0);
    }

    #[test]
    fn identity_unit_reduces_to_l1() {
        let fx = FeatureExtractor::identity();
        let tape = Tape::new();
        let mut rng = seeded_rng(5);
        let x = rand_image(&mut rng, 8, 8);
        let y = rand_image(&mut rng, 8, 8);
        let l1: f64 = x.iter().zip(y.iter()).map(|(a, b)| (a - b).abs()).sum();
        let a = tape.leaf(x);
        let b = tape.leaf(y);
        let ones = Array2::from_elem((8, 8), 1.0);
        let loss = perceptual_loss(&fx, &tape, &a, &b, &ones).unwrap().scalar();
        assert_abs_diff_eq!(loss, l1, epsilon = 1e-12);
    }

    #[test]
    fn loss_symmetric_and_monotone_in_mask() {
        let fx = FeatureExtractor::from_spec(ExtractorSpec { channels: vec![6, 6], seed: 9, ..ExtractorSpec::default() });
        let tape = Tape::new();
        let mut rng = seeded_rng(6);
        let x = rand_image(&mut rng, 16, 16);
        let y = rand_image(&mut rng, 16, 16);
        let a = tape.leaf(x);
        let b = tape.leaf(y);
        let small = Array2::from_shape_fn((16, 16), |(r, c)| f64::from(r < 8 && c < 8));
        let big = Array2::from_shape_fn((16, 16), |(r, c)| f64::from(r < 12 || c < 8));
        let lab = perceptual_loss(&fx, &tape, &a, &b, &small).unwrap().scalar();
        let lba = perceptual_loss(&fx, &tape, &b, &a, &small).unwrap().scalar();
        assert_abs_diff_eq!(lab, lba, epsilon = 1e-12);
        let lbig = perceptual_loss(&fx, &tape, &a, &b, &big).unwrap().scalar();
        assert!(lbig >= lab);
    }
}
