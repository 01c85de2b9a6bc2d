//! Coarse-to-fine cascaded generator.
//!
//! Module `C_0` consumes the coarsest pyramid level; every later module
//! upsamples the previous feature map by 2, concatenates the conditioning
//! input downscaled to that resolution, and refines it through three
//! convolution blocks (3x3 convolution, per-position layer normalization
//! over channels, leaky rectification). A final 1x1 projection over the
//! last feature map emits 3K channels, mapped to K images in [0, 1] through
//! a tanh.

use ndarray::{Array2, Array3, Axis, IxDyn};
#[cfg(test)]
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::GisError;
use crate::params::{he_normal, normal_init, ones, seeded_rng, zeros, ParamSet};
use crate::tensor::{concat, Pad4, Tape, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Cascade depth; at least 2.
    pub levels: usize,
    /// Resolution of the coarsest module.
    pub base_h: usize,
    pub base_w: usize,
    /// Feature width per module, one entry per level.
    pub widths: Vec<usize>,
    /// Number of diverse outputs.
    pub k_outputs: usize,
    /// Conditioning channels per pyramid level.
    pub channels_in: usize,
    pub leaky_slope: f64,
    pub seed: u64,
}

impl GeneratorConfig {
    /// Desk-scale default: 4 levels from 8x8 to 64x64.
    pub fn desk_default(channels_in: usize, k_outputs: usize, seed: u64) -> Self {
        GeneratorConfig {
            levels: 4,
            base_h: 8,
            base_w: 8,
            widths: vec![64, 64, 32, 32],
            k_outputs,
            channels_in,
            leaky_slope: 0.2,
            seed,
        }
    }

    pub fn full_res(&self) -> (usize, usize) {
        let f = 1usize << (self.levels - 1);
        (self.base_h * f, self.base_w * f)
    }

    pub fn check(&self) -> Result<(), GisError> {
        if self.levels < 2 {
            return Err(GisError::Config(format!("generator needs at least 2 levels, got {}", self.levels)));
        }
        if self.widths.len() != self.levels {
            return Err(GisError::Config(format!(
                "widths has {} entries for {} levels",
                self.widths.len(),
                self.levels
            )));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(GisError::Config("feature widths must be positive".into()));
        }
        if self.k_outputs == 0 {
            return Err(GisError::Config("k_outputs must be at least 1".into()));
        }
        if self.base_h == 0 || self.base_w == 0 || self.channels_in == 0 {
            return Err(GisError::Config("base resolution and channels_in must be positive".into()));
        }
        Ok(())
    }

    /// Conservative bound, in full-resolution pixels (Chebyshev radius), on
    /// how far one input pixel can influence the output. Three 3x3
    /// convolutions widen by 3 per level; bilinear upsampling adds one
    /// coarse pixel before doubling.
    pub fn receptive_radius(&self) -> usize {
        let mut r = 4usize; // module 0: input pixel + three convs
        for _ in 1..self.levels {
            r = 2 * (r + 1) + 3;
        }
        r
    }
}

pub struct Generator {
    config: GeneratorConfig,
    params: ParamSet,
}

fn block_names(level: usize) -> [String; 3] {
    [format!("g.m{level}.in"), format!("g.m{level}.mid"), format!("g.m{level}.out")]
}

/// Deterministically construct a generator from its configuration.
/// ```
/// use gis_forge::generator::{build_generator, GeneratorConfig};
///
/// // L=2, widths [8, 8], C_in = 14: module 1 consumes 8 + 14 = 22 channels.
/// let cfg = GeneratorConfig {
///     levels: 2, base_h: 4, base_w: 4, widths: vec![8, 8],
///     k_outputs: 9, channels_in: 14, leaky_slope: 0.2, seed: 5,
/// };
/// let gen = build_generator(cfg).unwrap();
/// assert_eq!(gen.params().get("g.m1.in.w").unwrap().shape(), &[8, 22, 3, 3]);
/// // K = 9 diverse outputs: the projection emits 27 channels.
/// assert_eq!(gen.params().get("g.proj.w").unwrap().shape(), &[27, 8, 1, 1]);
/// ```
pub fn build_generator(config: GeneratorConfig) -> Result<Generator, GisError> {
    config.check()?;
    let mut rng = seeded_rng(config.seed);
    let mut params = ParamSet::new();
    for level in 0..config.levels {
        let d = config.widths[level];
        let c_in = if level == 0 { config.channels_in } else { config.widths[level - 1] + config.channels_in };
        let mut ch = c_in;
        for name in block_names(level) {
            let fan_in = ch * 9;
            params.push(format!("{name}.w"), he_normal(&mut rng, &[d, ch, 3, 3], fan_in, config.leaky_slope));
            params.push(format!("{name}.b"), zeros(&[d]));
            params.push(format!("{name}.ln_g"), ones(&[d]));
            params.push(format!("{name}.ln_b"), zeros(&[d]));
            ch = d;
        }
    }
    let d_last = *config.widths.last().unwrap();
    params.push("g.proj.w", normal_init(&mut rng, &[3 * config.k_outputs, d_last, 1, 1], 0.1));
    params.push("g.proj.b", zeros(&[3 * config.k_outputs]));
    Ok(Generator { config, params })
}

impl Generator {
    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bind<'a>(&'a self, tape: &Tape, trainable: bool) -> BoundGenerator<'a> {
        BoundGenerator { config: &self.config, vars: self.params.bind(tape, trainable) }
    }

    /// Inference on a plain pyramid (single sample): K images `[3, H, W]`.
    pub fn synthesize(&self, pyramid: &[Array3<f64>]) -> Result<Vec<Array3<f64>>, GisError> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let levels: Vec<Tensor> = pyramid
            .iter()
            .map(|l| tape.leaf(l.clone().into_dyn().insert_axis(Axis(0))))
            .collect();
        let outputs = bound.forward(&levels)?;
        Ok(outputs
            .into_iter()
            .map(|o| {
                let v = o.value();
                let (h, w) = (v.shape()[2], v.shape()[3]);
                v.into_shape_with_order(IxDyn(&[3, h, w]))
                    .expect("drop batch axis")
                    .into_dimensionality()
                    .expect("3d")
            })
            .collect())
    }
}

pub struct BoundGenerator<'a> {
    config: &'a GeneratorConfig,
    vars: Vec<Tensor>,
}

impl BoundGenerator<'_> {
    pub fn param_vars(&self) -> &[Tensor] {
        &self.vars
    }

    /// Run the cascade on batched pyramid levels (coarse to fine, each
    /// `[B, C_in, h_i, w_i]`). Returns K images `[B, 3, H, W]` in [0, 1].
    pub fn forward(&self, pyramid: &[Tensor]) -> Result<Vec<Tensor>, GisError> {
        let cfg = self.config;
        if pyramid.len() != cfg.levels {
            return Err(GisError::Shape {
                what: "pyramid level count".into(),
                expected: cfg.levels.to_string(),
                got: pyramid.len().to_string(),
            });
        }
        for (i, level) in pyramid.iter().enumerate() {
            let s = level.shape();
            let expect_h = cfg.base_h << i;
            let expect_w = cfg.base_w << i;
            if s.len() != 4 || s[1] != cfg.channels_in || s[2] != expect_h || s[3] != expect_w {
                return Err(GisError::Shape {
                    what: format!("pyramid level {i}"),
                    expected: format!("[B, {}, {expect_h}, {expect_w}]", cfg.channels_in),
                    got: format!("{s:?}"),
                });
            }
        }

        let mut var_ix = 0usize;
        let mut take = || {
            let v = self.vars[var_ix].clone();
            var_ix += 1;
            v
        };

        let mut feat: Option<Tensor> = None;
        for level in pyramid.iter() {
            let x = match feat.take() {
                None => level.clone(),
                Some(f) => concat(&[&f.upsample_bilinear2(), level], 1),
            };
            let mut h = x;
            for _block in 0..3 {
                let w = take();
                let b = take();
                let ln_g = take();
                let ln_b = take();
                h = conv_block(&h, &w, &b, &ln_g, &ln_b, cfg.leaky_slope);
            }
            feat = Some(h);
        }

        let w = take();
        let b = take();
        let f = feat.expect("at least one level");
        let raw = f.conv2d(&w, 1, Pad4::ZERO);
        let s = raw.shape();
        let bias = b.reshape(&[1, 3 * cfg.k_outputs, 1, 1]).broadcast_to(&s);
        // tanh then affine map to [0, 1]; a zeroed projection lands on 0.5.
        let img = raw.add(&bias).tanh_().scale(0.5).add_const(0.5);

        Ok((0..cfg.k_outputs).map(|k| img.slice_axis_op(1, 3 * k, 3)).collect())
    }
}

/// 3x3 convolution, layer normalization across channels at each position,
/// leaky rectification.
fn conv_block(x: &Tensor, w: &Tensor, b: &Tensor, ln_g: &Tensor, ln_b: &Tensor, slope: f64) -> Tensor {
    let conv = x.conv2d(w, 1, Pad4::same(1));
    let s = conv.shape();
    let c = s[1];
    let bias = b.reshape(&[1, c, 1, 1]).broadcast_to(&s);
    let y = conv.add(&bias);

    let mean = y.sum_axes_keep(&[1]).scale(1.0 / c as f64);
    let centered = y.sub(&mean.broadcast_to(&s));
    let var = centered.sqr().sum_axes_keep(&[1]).scale(1.0 / c as f64);
    let inv_std = var.add_const(LN_EPS).sqrt_();
    let normed = centered.div(&inv_std.broadcast_to(&s));
    let gamma = ln_g.reshape(&[1, c, 1, 1]).broadcast_to(&s);
    let beta = ln_b.reshape(&[1, c, 1, 1]).broadcast_to(&s);
    normed.mul(&gamma).add(&beta).leaky_relu(slope)
}

/// How synthesized outputs are combined with the provided background.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositeMode {
    /// The network predicts the full frame (default): outputs pass through
    /// unchanged, so learned spill effects (shadows, blending) survive.
    Identity,
    /// Hard compositing: `mask * output + (1 - mask) * background`.
    Hard,
}

/// Named compositing stage applied to the K outputs.
pub fn composite(
    outputs: &[Array3<f64>],
    mask: &Array2<f64>,
    background: &Array3<f64>,
    mode: CompositeMode,
) -> Vec<Array3<f64>> {
    match mode {
        CompositeMode::Identity => outputs.to_vec(),
        CompositeMode::Hard => outputs
            .iter()
            .map(|out| {
                let mut o = out.clone();
                for ((ch, r, c), v) in o.indexed_iter_mut() {
                    let m = mask[[r, c]];
                    *v = m * *v + (1.0 - m) * background[[ch, r, c]];
                }
                o
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gbuffer::{build_pyramid, channel_count};
    use crate::scene::{render_sample, SceneConfig};
    use crate::gbuffer::MaterialPalette;
    use approx::assert_abs_diff_eq;

    fn small_config(levels: usize, k: usize) -> GeneratorConfig {
        GeneratorConfig {
            levels,
            base_h: 4,
            base_w: 4,
            widths: vec![8; levels],
            k_outputs: k,
            channels_in: 14,
            leaky_slope: 0.2,
            seed: 5,
        }
    }

    fn random_pyramid(tape: &Tape, cfg: &GeneratorConfig, b: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = seeded_rng(seed);
        use rand::Rng;
        (0..cfg.levels)
            .map(|i| {
                let shape = [b, cfg.channels_in, cfg.base_h << i, cfg.base_w << i];
                tape.leaf(ArrayD::from_shape_fn(IxDyn(&shape), |_| rng.random::<f64>()))
            })
            .collect()
    }

    #[test]
    fn module_input_channel_arithmetic() {
        // L=2, widths [8,8], C_in=14: module 1 consumes 8 + 14 = 22 channels.
        let gen = build_generator(small_config(2, 1)).unwrap();
        let w = gen.params().get("g.m1.in.w").unwrap();
        assert_eq!(w.shape(), &[8, 22, 3, 3]);
        // K=9: final projection emits 27 channels.
        let gen9 = build_generator(small_config(2, 9)).unwrap();
        assert_eq!(gen9.params().get("g.proj.w").unwrap().shape(), &[27, 8, 1, 1]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_generator(small_config(3, 2)).unwrap();
        let b = build_generator(small_config(3, 2)).unwrap();
        assert_eq!(a.params().content_hash(), b.params().content_hash());
    }

    #[test]
    fn shape_sweep_and_output_range() {
        for levels in 2..=5 {
            for k in [1usize, 3, 9] {
                let cfg = small_config(levels, k);
                let (fh, fw) = cfg.full_res();
                let gen = build_generator(cfg.clone()).unwrap();
                let tape = Tape::new();
                let pyr = random_pyramid(&tape, &cfg, 2, 7);
                let out = gen.bind(&tape, false).forward(&pyr).unwrap();
                assert_eq!(out.len(), k);
                for o in &out {
                    assert_eq!(o.shape(), vec![2, 3, fh, fw]);
                    let v = o.value();
                    assert!(v.iter().all(|&x| (0.0..=1.0).contains(&x)));
                }
            }
        }
    }

    #[test]
    fn zeroed_projection_gives_mid_gray() {
        let cfg = small_config(2, 3);
        let mut gen = build_generator(cfg.clone()).unwrap();
        gen.params_mut().get_mut("g.proj.w").unwrap().fill(0.0);
        let tape = Tape::new();
        let pyr = random_pyramid(&tape, &cfg, 1, 8);
        let out = gen.bind(&tape, false).forward(&pyr).unwrap();
        for o in out {
            assert!(o.value().iter().all(|&x| (x - 0.5).abs() < 1e-12));
        }
    }

    #[test]
    fn pyramid_mismatch_names_level() {
        let cfg = small_config(3, 1);
        let gen = build_generator(cfg.clone()).unwrap();
        let tape = Tape::new();
        let mut pyr = random_pyramid(&tape, &cfg, 1, 9);
        pyr[1] = tape.leaf(ArrayD::zeros(IxDyn(&[1, 14, 4, 4]))); // wrong size
        match gen.bind(&tape, false).forward(&pyr) {
            Err(GisError::Shape { what, .. }) => assert!(what.contains("level 1")),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn forward_matches_real_pyramid_shapes() {
        let palette = MaterialPalette::default_six();
        let scene_cfg = SceneConfig { height: 32, width: 32, ..SceneConfig::default() };
        let sample = render_sample(3, &scene_cfg, &palette).unwrap();
        let pyr = build_pyramid(&sample, 3).unwrap();
        let cfg = GeneratorConfig {
            levels: 3,
            base_h: 8,
            base_w: 8,
            widths: vec![12, 12, 8],
            k_outputs: 2,
            channels_in: channel_count(palette.len(), &[]),
            leaky_slope: 0.2,
            seed: 1,
        };
        let gen = build_generator(cfg).unwrap();
        let images = gen.synthesize(&pyr.levels).unwrap();
        assert_eq!(images.len(), 2);
        assert_eq!(images[0].dim(), (3, 32, 32));
    }

    #[test]
    fn deterministic_forward() {
        let cfg = small_config(3, 2);
        let gen = build_generator(cfg.clone()).unwrap();
        let run = || {
            let tape = Tape::new();
            let pyr = random_pyramid(&tape, &cfg, 1, 11);
            let out = gen.bind(&tape, false).forward(&pyr).unwrap();
            out[0].value()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn receptive_field_bound_holds() {
        let cfg = GeneratorConfig {
            levels: 2,
            base_h: 16,
            base_w: 16,
            widths: vec![8, 8],
            k_outputs: 1,
            channels_in: 6,
            leaky_slope: 0.2,
            seed: 13,
        };
        let gen = build_generator(cfg.clone()).unwrap();
        let radius = cfg.receptive_radius();
        let (fh, fw) = cfg.full_res();
        assert!(radius < fh / 2, "bound {radius} must leave unaffected pixels on {fh}");

        let tape = Tape::new();
        let mut rng = seeded_rng(14);
        use rand::Rng;
        let mut levels: Vec<ArrayD<f64>> = (0..2)
            .map(|i| {
                ArrayD::from_shape_fn(IxDyn(&[1, 6, 16 << i, 16 << i]), |_| rng.random::<f64>())
            })
            .collect();
        let base = {
            let pyr: Vec<Tensor> = levels.iter().map(|l| tape.leaf(l.clone())).collect();
            gen.bind(&tape, false).forward(&pyr).unwrap()[0].value()
        };
        // Perturb one full-resolution pixel (and its pooled coarse pixel,
        // as the pyramid builder would).
        let (pr, pc) = (fh / 2, fw / 2);
        levels[1][[0, 2, pr, pc]] += 0.5;
        levels[0][[0, 2, pr / 2, pc / 2]] += 0.125;
        let changed = {
            let pyr: Vec<Tensor> = levels.iter().map(|l| tape.leaf(l.clone())).collect();
            gen.bind(&tape, false).forward(&pyr).unwrap()[0].value()
        };
        for r in 0..fh {
            for c in 0..fw {
                let delta = (0..3).map(|ch| (changed[[0, ch, r, c]] - base[[0, ch, r, c]]).abs()).fold(0.0f64, f64::max);
                let dist = (r as isize - pr as isize).abs().max((c as isize - pc as isize).abs()) as usize;
                if dist > radius {
                    assert!(delta == 0.0, "change {delta} outside radius at ({r},{c}), dist {dist}");
                }
            }
        }
        // Sanity: something changed inside the radius.
        let total: f64 = changed.iter().zip(base.iter()).map(|(a, b)| (a - b).abs()).sum();
        assert!(total > 0.0);
    }

    #[test]
    fn gradient_reaches_every_parameter() {
        let cfg = small_config(2, 2);
        let gen = build_generator(cfg.clone()).unwrap();
        let tape = Tape::new();
        let pyr = random_pyramid(&tape, &cfg, 1, 15);
        let bound = gen.bind(&tape, true);
        let out = bound.forward(&pyr).unwrap();
        let mut loss = out[0].mean();
        for o in &out[1..] {
            loss = loss.add(&o.mean());
        }
        let grads = loss.backward();
        for ((name, _), var) in gen.params().entries().iter().zip(bound.param_vars()) {
            let g = grads.get_or_zero(var);
            let nonzero = g.iter().any(|&v| v != 0.0);
            assert!(nonzero, "parameter {name} received no gradient");
        }
    }

    #[test]
    fn composite_modes() {
        let out = vec![Array3::from_elem((3, 2, 2), 0.8)];
        let bg = Array3::from_elem((3, 2, 2), 0.2);
        let mask = Array2::from_shape_fn((2, 2), |(r, _)| f64::from(r == 0));
        let id = composite(&out, &mask, &bg, CompositeMode::Identity);
        assert_eq!(id[0], out[0]);
        let hard = composite(&out, &mask, &bg, CompositeMode::Hard);
        assert_abs_diff_eq!(hard[0][[0, 0, 0]], 0.8);
        assert_abs_diff_eq!(hard[0][[0, 1, 0]], 0.2);
        // All-ones mask: identical to the network output.
        let ones_mask = Array2::from_elem((2, 2), 1.0);
        let same = composite(&out, &ones_mask, &bg, CompositeMode::Hard);
        assert_eq!(same[0], out[0]);
    }
}
