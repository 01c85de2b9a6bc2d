//! Alternating generator/discriminator optimization.
//!
//! Each step runs one discriminator update (BCE plus gradient regularizer)
//! followed by one generator update (the combined min-over-K diversity
//! objective). Everything is a pure function of the seed and the step
//! index — batch composition, fake-branch selection for the critic, and
//! parameter initialization — so runs are bit-reproducible and a saved
//! training state resumes exactly.

use std::fs;
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_archive, write_archive, Dtype};
use crate::dataset::Dataset;
use crate::discriminator::{d_accuracy, d_regularizer, Discriminator, DiscriminatorConfig};
use crate::error::GisError;
use crate::gbuffer::{
    batch_pyramids, build_pyramid_excluding, channel_count, downscale_mask, GBufferSample,
    InputPyramid, Modality,
};
use crate::generator::{build_generator, Generator, GeneratorConfig};
use crate::objective::{
    adversarial_d_loss, adversarial_g_loss, background_loss, combine_diversity, LossBundle,
};
use crate::params::ParamSet;
use crate::perception::{perceptual_loss, ExtractorSpec, FeatureExtractor};
use crate::tensor::{Tape, Tensor};

pub const CHECKPOINT_KIND: &str = "checkpoint";
pub const STATE_KIND: &str = "train_state";

/// Flat training configuration; every field has a default so config files
/// can be partial. See the book for the documented schema.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    pub steps: u64,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Discriminator gradient-regularizer weight.
    pub gamma: f64,
    /// Foreground-weight coefficient in the combined objective.
    pub rho: f64,
    /// Number of diverse generator outputs.
    pub k: usize,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// When false, training is purely supervised (no discriminator).
    pub adversarial: bool,
    pub levels: usize,
    pub base_h: usize,
    pub base_w: usize,
    pub widths: Vec<usize>,
    pub leaky_slope: f64,
    pub fx_channels: Vec<usize>,
    pub fx_seed: u64,
    /// Modalities excluded from the conditioning input (ablations).
    pub exclude: Vec<String>,
    /// Optional directory of PNGs used as the discriminator's real pool
    /// instead of the dataset's own targets.
    pub real_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: PathBuf::from("data/train"),
            out_dir: PathBuf::from("runs/default"),
            steps: 5000,
            batch_size: 1,
            lr_g: 2e-4,
            lr_d: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            gamma: 2.0,
            rho: 0.1,
            k: 3,
            seed: 0,
            checkpoint_every: 1000,
            adversarial: true,
            levels: 4,
            base_h: 8,
            base_w: 8,
            widths: vec![64, 64, 32, 32],
            leaky_slope: 0.2,
            fx_channels: vec![16, 32, 64, 64, 64],
            fx_seed: 1234,
            exclude: vec![],
            real_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, GisError> {
        toml::from_str(s).map_err(|e| GisError::Config(format!("config parse error: {e}")))
    }

    pub fn from_toml_file(path: &Path) -> Result<Self, GisError> {
        let s = fs::read_to_string(path).map_err(|e| GisError::io(path, e))?;
        Self::from_toml_str(&s)
    }

    /// Apply a `key=value` override (the CLI `--set` flag).
    pub fn apply_override(&mut self, kv: &str) -> Result<(), GisError> {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| GisError::Config(format!("override '{kv}' is not key=value")))?;
        let toml_line = if value.starts_with('[') || value.parse::<f64>().is_ok() || value == "true" || value == "false" {
            format!("{key} = {value}")
        } else {
            format!("{key} = \"{value}\"")
        };
        let mut doc: toml::Value = toml::from_str(&toml_line)
            .map_err(|e| GisError::Config(format!("override '{kv}': {e}")))?;
        // Round-trip through the serialized config to reuse serde validation.
        let mut current =
            toml::Value::try_from(&*self).map_err(|e| GisError::Config(e.to_string()))?;
        if let (toml::Value::Table(cur), toml::Value::Table(new)) = (&mut current, &mut doc) {
            for (k, v) in new.iter() {
                if !cur.contains_key(k) {
                    return Err(GisError::Config(format!("unknown config key '{k}'")));
                }
                cur.insert(k.clone(), v.clone());
            }
        }
        *self = current.try_into().map_err(|e| GisError::Config(format!("override '{kv}': {e}")))?;
        Ok(())
    }

    pub fn parsed_exclude(&self) -> Result<Vec<Modality>, GisError> {
        self.exclude.iter().map(|s| Modality::parse(s)).collect()
    }

    pub fn check(&self) -> Result<(), GisError> {
        if self.batch_size == 0 {
            return Err(GisError::Config("batch_size must be positive".into()));
        }
        if self.k == 0 {
            return Err(GisError::Config("k must be at least 1".into()));
        }
        if self.lr_g < 0.0 || self.lr_d < 0.0 {
            return Err(GisError::Config("learning rates must be non-negative".into()));
        }
        self.parsed_exclude()?;
        Ok(())
    }

    pub fn generator_config(&self, material_count: usize) -> Result<GeneratorConfig, GisError> {
        let exclude = self.parsed_exclude()?;
        Ok(GeneratorConfig {
            levels: self.levels,
            base_h: self.base_h,
            base_w: self.base_w,
            widths: self.widths.clone(),
            k_outputs: self.k,
            channels_in: channel_count(material_count, &exclude),
            leaky_slope: self.leaky_slope,
            seed: self.seed,
        })
    }

    pub fn extractor_spec(&self) -> ExtractorSpec {
        ExtractorSpec {
            channels: self.fx_channels.clone(),
            seed: self.fx_seed,
            ..ExtractorSpec::default()
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Batch composition at `step`: positions in per-epoch shuffles, derived
/// purely from the seed so training never carries sampler state.
pub fn batch_indices(seed: u64, step: u64, n: usize, batch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut out = Vec::with_capacity(batch);
    for j in 0..batch as u64 {
        let pos = step * batch as u64 + j;
        let epoch = pos / n as u64;
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(splitmix64(seed ^ epoch.wrapping_mul(0x2545f4914f6cdd1d)));
        perm.shuffle(&mut rng);
        out.push(perm[(pos % n as u64) as usize]);
    }
    out
}

/// Which output branch feeds the discriminator for sample `b` at `step`.
fn fake_branch(seed: u64, step: u64, b: usize, k: usize) -> usize {
    (splitmix64(seed ^ 0xd1b54a32d192ed03 ^ step.wrapping_mul(0x9e3779b97f4a7c15) ^ (b as u64)) % k as u64) as usize
}

struct Adam {
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: u64,
}

impl Adam {
    fn new(params: &ParamSet) -> Adam {
        let zeros: Vec<ArrayD<f64>> =
            params.entries().iter().map(|(_, p)| ArrayD::zeros(p.raw_dim())).collect();
        Adam { m: zeros.clone(), v: zeros, t: 0 }
    }

    fn step(&mut self, params: &mut ParamSet, grads: &[ArrayD<f64>], lr: f64, b1: f64, b2: f64, eps: f64) {
        self.t += 1;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for ((slot, g), (m, v)) in
            params.entries_mut().iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(&mut slot.1).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= lr * mh / (vh.sqrt() + eps);
            });
        }
    }
}

/// Per-step metrics, serialized as one JSON line each.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub total: f64,
    pub fg_perceptual: f64,
    pub fg_adversarial: f64,
    pub bg_mean: f64,
    pub k_star: usize,
    pub w: f64,
    pub d_loss: f64,
    pub d_reg: f64,
    pub d_accuracy: f64,
}

pub struct Trainer {
    config: TrainConfig,
    exclude: Vec<Modality>,
    gen: Generator,
    disc: Discriminator,
    fx: FeatureExtractor,
    adam_g: Adam,
    adam_d: Adam,
    step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig, material_count: usize) -> Result<Trainer, GisError> {
        config.check()?;
        let gen = build_generator(config.generator_config(material_count)?)?;
        let disc = Discriminator::build(DiscriminatorConfig::default_patch(config.seed ^ 0x5be5_0d73))?;
        let fx = FeatureExtractor::from_spec(config.extractor_spec());
        let adam_g = Adam::new(gen.params());
        let adam_d = Adam::new(disc.params());
        let exclude = config.parsed_exclude()?;
        Ok(Trainer { config, exclude, gen, disc, fx, adam_g, adam_d, step: 0 })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn generator(&self) -> &Generator {
        &self.gen
    }

    pub fn generator_mut(&mut self) -> &mut Generator {
        &mut self.gen
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.disc
    }

    /// One optimization step on a batch (discriminator first, generator
    /// second). Aborts with the offending batch indices if any loss goes
    /// non-finite.
    pub fn train_step(
        &mut self,
        batch: &[GBufferSample],
        indices: &[usize],
    ) -> Result<StepMetrics, GisError> {
        assert_eq!(batch.len(), indices.len());
        let b_n = batch.len();
        for s in batch {
            if s.target.is_none() {
                return Err(GisError::Validation(format!(
                    "training batch {indices:?} contains a sample without a target"
                )));
            }
        }

        let pyramids: Vec<InputPyramid> = batch
            .iter()
            .map(|s| build_pyramid_excluding(s, self.config.levels, &self.exclude))
            .collect::<Result<_, _>>()?;
        let levels = batch_pyramids(&pyramids);

        // Generator forward (one pass, reused by both half-steps; the
        // discriminator consumes detached copies).
        let tape_g = Tape::new();
        let bound_g = self.gen.bind(&tape_g, true);
        let level_tensors: Vec<Tensor> = levels.iter().map(|l| tape_g.leaf(l.clone())).collect();
        let outputs = bound_g.forward(&level_tensors)?;

        let targets: Vec<Array3<f64>> =
            batch.iter().map(|s| s.target.clone().expect("checked above")).collect();

        let (d_loss_v, d_reg_v, d_acc_v) = if self.config.adversarial {
            discriminator_update(
                &mut self.disc,
                &mut self.adam_d,
                &self.config,
                self.step,
                batch,
                indices,
                &outputs,
                &targets,
            )?
        } else {
            (0.0, 0.0, 0.5)
        };

        // Generator update against the refreshed critic.
        let bound_d = self.disc.bind(&tape_g, false);
        let mut bundles: Vec<LossBundle> = Vec::with_capacity(b_n);
        for (b, sample) in batch.iter().enumerate() {
            let target =
                tape_g.leaf(targets[b].clone().into_dyn().insert_axis(Axis(0)));
            let mut fg = Vec::with_capacity(self.config.k);
            let mut bg = Vec::with_capacity(self.config.k);
            for out_k in &outputs {
                let out = out_k.slice_axis_op(0, b, 1);
                let lp = perceptual_loss(&self.fx, &tape_g, &target, &out, &sample.mask)?;
                let la = if self.config.adversarial {
                    let logits = bound_d.forward(&out)?;
                    adversarial_g_loss(&tape_g, &logits, &sample.mask)?.0
                } else {
                    tape_g.scalar(0.0)
                };
                let lb = background_loss(&tape_g, &target, &out, &sample.mask)?;
                fg.push((lp, la));
                bg.push(lb);
            }
            bundles.push(combine_diversity(&fg, &bg, &sample.mask, self.config.rho)?);
        }
        let mut total = bundles[0].total.clone();
        for bdl in &bundles[1..] {
            total = total.add(&bdl.total);
        }
        let total = total.scale(1.0 / b_n as f64);
        let total_v = total.scalar();
        if !total_v.is_finite() {
            return Err(GisError::NonFinite { step: self.step, indices: indices.to_vec() });
        }

        let grads = total.backward_wrt(&bound_g.param_vars().iter().collect::<Vec<_>>());
        let g_arrays: Vec<ArrayD<f64>> =
            bound_g.param_vars().iter().map(|v| grads.get_or_zero(v)).collect();
        self.adam_g.step(
            self.gen.params_mut(),
            &g_arrays,
            self.config.lr_g,
            self.config.beta1,
            self.config.beta2,
            self.config.eps,
        );

        let mean = |f: &dyn Fn(&LossBundle) -> f64| -> f64 {
            bundles.iter().map(|b| f(b)).sum::<f64>() / b_n as f64
        };
        let metrics = StepMetrics {
            step: self.step,
            total: total_v,
            fg_perceptual: mean(&|b| b.fg_perceptual[b.k_star]),
            fg_adversarial: mean(&|b| b.fg_adversarial[b.k_star]),
            bg_mean: mean(&|b| b.bg.iter().sum::<f64>() / b.bg.len() as f64),
            k_star: bundles[0].k_star,
            w: mean(&|b| b.w),
            d_loss: d_loss_v,
            d_reg: d_reg_v,
            d_accuracy: d_acc_v,
        };
        self.step += 1;
        Ok(metrics)
    }

    /// Inference-grade checkpoint (f32 parameters + config echo).
    pub fn write_checkpoint(&self, path: &Path) -> Result<(), GisError> {
        let config = serde_json::json!({
            "train": self.config,
            "generator": self.gen.config(),
            "discriminator": self.disc.config(),
            "extractor": self.fx.spec(),
        });
        let meta = serde_json::json!({ "step": self.step });
        let arrays: Vec<(String, Dtype, &ArrayD<f64>)> = self
            .gen
            .params()
            .entries()
            .iter()
            .map(|(n, a)| (n.clone(), Dtype::F32, a))
            .collect();
        write_archive(path, CHECKPOINT_KIND, &config, &meta, &arrays)
    }

    /// Full train state (f64 parameters, optimizer moments, step) for exact
    /// resumption.
    pub fn write_state(&self, path: &Path) -> Result<(), GisError> {
        let config = serde_json::json!({
            "train": self.config,
            "generator": self.gen.config(),
            "discriminator": self.disc.config(),
            "extractor": self.fx.spec(),
        });
        let meta = serde_json::json!({
            "step": self.step,
            "adam_g_t": self.adam_g.t,
            "adam_d_t": self.adam_d.t,
        });
        let mut arrays: Vec<(String, Dtype, &ArrayD<f64>)> = Vec::new();
        for (n, a) in self.gen.params().entries() {
            arrays.push((n.clone(), Dtype::F64, a));
        }
        for (n, a) in self.disc.params().entries() {
            arrays.push((n.clone(), Dtype::F64, a));
        }
        for (i, (m, v)) in self.adam_g.m.iter().zip(&self.adam_g.v).enumerate() {
            arrays.push((format!("adam_g.{i}.m"), Dtype::F64, m));
            arrays.push((format!("adam_g.{i}.v"), Dtype::F64, v));
        }
        for (i, (m, v)) in self.adam_d.m.iter().zip(&self.adam_d.v).enumerate() {
            arrays.push((format!("adam_d.{i}.m"), Dtype::F64, m));
            arrays.push((format!("adam_d.{i}.v"), Dtype::F64, v));
        }
        write_archive(path, STATE_KIND, &config, &meta, &arrays)
    }

    /// Rebuild a trainer mid-run from a state archive.
    pub fn from_state(path: &Path) -> Result<Trainer, GisError> {
        let archive = read_archive(path)?;
        if archive.kind != STATE_KIND {
            return Err(GisError::Checkpoint(format!(
                "{} is a '{}' archive, not train state",
                path.display(),
                archive.kind
            )));
        }
        let config: TrainConfig = serde_json::from_value(archive.config["train"].clone())?;
        let gen_cfg: GeneratorConfig = serde_json::from_value(archive.config["generator"].clone())?;
        let disc_cfg: DiscriminatorConfig =
            serde_json::from_value(archive.config["discriminator"].clone())?;
        let fx_spec: ExtractorSpec = serde_json::from_value(archive.config["extractor"].clone())?;

        let mut gen = build_generator(gen_cfg)?;
        for (name, slot) in gen.params_mut().entries_mut() {
            *slot = archive
                .get(name)
                .ok_or_else(|| GisError::Checkpoint(format!("state missing array {name}")))?
                .clone();
        }
        let mut disc = Discriminator::build(disc_cfg)?;
        for (name, slot) in disc.params_mut().entries_mut() {
            *slot = archive
                .get(name)
                .ok_or_else(|| GisError::Checkpoint(format!("state missing array {name}")))?
                .clone();
        }
        let fx = FeatureExtractor::from_spec(fx_spec);
        let mut adam_g = Adam::new(gen.params());
        let mut adam_d = Adam::new(disc.params());
        for (i, (m, v)) in adam_g.m.iter_mut().zip(adam_g.v.iter_mut()).enumerate() {
            *m = archive.get(&format!("adam_g.{i}.m")).ok_or_else(|| GisError::Checkpoint("missing adam_g.m".into()))?.clone();
            *v = archive.get(&format!("adam_g.{i}.v")).ok_or_else(|| GisError::Checkpoint("missing adam_g.v".into()))?.clone();
        }
        for (i, (m, v)) in adam_d.m.iter_mut().zip(adam_d.v.iter_mut()).enumerate() {
            *m = archive.get(&format!("adam_d.{i}.m")).ok_or_else(|| GisError::Checkpoint("missing adam_d.m".into()))?.clone();
            *v = archive.get(&format!("adam_d.{i}.v")).ok_or_else(|| GisError::Checkpoint("missing adam_d.v".into()))?.clone();
        }
        adam_g.t = archive.meta["adam_g_t"].as_u64().unwrap_or(0);
        adam_d.t = archive.meta["adam_d_t"].as_u64().unwrap_or(0);
        let step = archive.meta["step"].as_u64().unwrap_or(0);
        let exclude = config.parsed_exclude()?;
        Ok(Trainer { config, exclude, gen, disc, fx, adam_g, adam_d, step })
    }
}

#[allow(clippy::too_many_arguments)]
fn discriminator_update(
disc: &mut Discriminator,
adam_d: &mut Adam,
config: &TrainConfig,
step: u64,
batch: &[GBufferSample],
indices: &[usize],
outputs: &[Tensor],
targets: &[Array3<f64>],
) -> Result<(f64, f64, f64), GisError> {
    let b_n = batch.len();
    let (h, w) = (batch[0].height(), batch[0].width());

    // Detached fake batch: one branch per sample, chosen by a seed-pure
    // draw so the critic sees every branch over time.
    let mut fake = ArrayD::zeros(IxDyn(&[b_n, 3, h, w]));
    for b in 0..b_n {
        let k = fake_branch(config.seed, step, b, config.k);
        let v = outputs[k].value_ref();
        fake.index_axis_mut(Axis(0), b).assign(&v.index_axis(Axis(0), b));
    }
    let mut real = ArrayD::zeros(IxDyn(&[b_n, 3, h, w]));
    for b in 0..b_n {
        real.index_axis_mut(Axis(0), b).assign(&targets[b].view().into_dyn());
    }

    let tape_d = Tape::new();
    let bound = disc.bind(&tape_d, true);
    let mut d_loss = tape_d.scalar(0.0);
    let mut acc_sum = 0.0;
    for b in 0..b_n {
        let fake_b = tape_d.leaf(fake.index_axis(Axis(0), b).to_owned().insert_axis(Axis(0)).into_dyn());
        let real_b = tape_d.leaf(real.index_axis(Axis(0), b).to_owned().insert_axis(Axis(0)).into_dyn());
        let logits_fake = bound.forward(&fake_b)?;
        let logits_real = bound.forward(&real_b)?;
        d_loss = d_loss.add(&adversarial_d_loss(&tape_d, &logits_fake, &logits_real, &batch[b].mask)?);
        let lf = logits_fake.value();
        let soft = downscale_mask(&batch[b].mask, h / lf.shape()[2])?;
        acc_sum += d_accuracy(&logits_real.value(), &lf, &soft);
    }
    let d_loss = d_loss.scale(1.0 / b_n as f64);
    let reg = d_regularizer(&tape_d, &bound, &real, &fake, config.gamma)?;
    let d_total = d_loss.add(&reg);
    let (d_loss_v, d_reg_v) = (d_loss.scalar(), reg.scalar());
    if !d_total.scalar().is_finite() {
        return Err(GisError::NonFinite { step: step, indices: indices.to_vec() });
    }

    let grads = d_total.backward_wrt(&bound.param_vars().iter().collect::<Vec<_>>());
    let g_arrays: Vec<ArrayD<f64>> =
        bound.param_vars().iter().map(|v| grads.get_or_zero(v)).collect();
    adam_d.step(
        disc.params_mut(),
        &g_arrays,
        config.lr_d,
        config.beta1,
        config.beta2,
        config.eps,
    );
    Ok((d_loss_v, d_reg_v, acc_sum / b_n as f64))
}

/// Outcome of a completed [`fit`] run.
#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub final_checkpoint: PathBuf,
    pub final_state: PathBuf,
    pub metrics_log: PathBuf,
    pub steps_run: u64,
}

/// Validate the dataset, then train from scratch (or continue a provided
/// trainer) to `config.steps`, checkpointing at the configured cadence.
pub fn fit(config: TrainConfig) -> Result<FitOutcome, GisError> {
    let dataset = Dataset::open(&config.dataset)?;
    let trainer = Trainer::new(config, dataset.palette().len())?;
    fit_loop(trainer, &dataset)
}

/// Resume from a state archive and continue to the configured total steps.
/// `extra_steps` extends the schedule beyond the original config.
pub fn resume(state_path: &Path, extra_steps: Option<u64>) -> Result<FitOutcome, GisError> {
    let mut trainer = Trainer::from_state(state_path)?;
    if let Some(extra) = extra_steps {
        trainer.config.steps = trainer.step + extra;
    }
    let dataset = Dataset::open(&trainer.config.dataset)?;
    fit_loop(trainer, &dataset)
}

fn fit_loop(mut trainer: Trainer, dataset: &Dataset) -> Result<FitOutcome, GisError> {
    if dataset.is_empty() {
        return Err(GisError::Dataset {
            path: dataset.root().to_path_buf(),
            msg: "dataset is empty".into(),
        });
    }
    let failures = dataset.validate_all()?;
    if !failures.is_empty() {
        let mut msg = format!("{} invalid sample(s):", failures.len());
        for (i, report) in failures.iter().take(10) {
            msg.push_str(&format!("\n  sample {i}: {report}"));
        }
        return Err(GisError::Validation(msg));
    }

    let out_dir = trainer.config.out_dir.clone();
    fs::create_dir_all(&out_dir).map_err(|e| GisError::io(&out_dir, e))?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics_file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| GisError::io(&metrics_path, e))?;

    let ckpt_path = |step: u64| out_dir.join(format!("checkpoint-{step:06}.bin"));
    let state_path = |step: u64| out_dir.join(format!("state-{step:06}.bin"));

    if trainer.step == 0 {
        trainer.write_checkpoint(&ckpt_path(0))?;
        trainer.write_state(&state_path(0))?;
    }

    let total = trainer.config.steps;
    let cadence = trainer.config.checkpoint_every.max(1);
    while trainer.step < total {
        let step = trainer.step;
        let indices = batch_indices(trainer.config.seed, step, dataset.len(), trainer.config.batch_size);
        let batch: Vec<GBufferSample> =
            indices.iter().map(|&i| dataset.load(i)).collect::<Result<_, _>>()?;
        let metrics = match trainer.train_step(&batch, &indices) {
            Ok(m) => m,
            Err(e) => {
                if let GisError::NonFinite { step, ref indices } = e {
                    let dump = out_dir.join(format!("nonfinite-step{step}.json"));
                    let _ = fs::write(
                        &dump,
                        serde_json::to_vec_pretty(&serde_json::json!({
                            "step": step,
                            "batch_indices": indices,
                        }))
                        .unwrap_or_default(),
                    );
                }
                return Err(e);
            }
        };
        let line = serde_json::to_string(&metrics)?;
        writeln!(metrics_file, "{line}").map_err(|e| GisError::io(&metrics_path, e))?;
        if trainer.step % cadence == 0 || trainer.step == total {
            trainer.write_checkpoint(&ckpt_path(trainer.step))?;
            trainer.write_state(&state_path(trainer.step))?;
        }
    }
    if total % cadence != 0 && total != 0 {
        trainer.write_checkpoint(&ckpt_path(total))?;
        trainer.write_state(&state_path(total))?;
    }
    Ok(FitOutcome {
        final_checkpoint: ckpt_path(total),
        final_state: state_path(total),
        metrics_log: metrics_path,
        steps_run: total,
    })
}

/// Generator rebuilt from an inference checkpoint (or a state archive),
/// plus the settings needed to feed it.
pub struct LoadedModel {
    pub generator: Generator,
    pub exclude: Vec<Modality>,
    pub levels: usize,
    pub k: usize,
    pub step: u64,
}

pub fn load_model(path: &Path) -> Result<LoadedModel, GisError> {
    let archive = read_archive(path)?;
    let gen_cfg: GeneratorConfig = serde_json::from_value(archive.config["generator"].clone())?;
    let train_cfg: TrainConfig = serde_json::from_value(archive.config["train"].clone())?;
    let levels = gen_cfg.levels;
    let k = gen_cfg.k_outputs;
    let mut gen = build_generator(gen_cfg)?;
    for (name, slot) in gen.params_mut().entries_mut() {
        *slot = archive
            .get(name)
            .ok_or_else(|| GisError::Checkpoint(format!("checkpoint missing array {name}")))?
            .clone();
    }
    Ok(LoadedModel {
        generator: gen,
        exclude: train_cfg.parsed_exclude()?,
        levels,
        k,
        step: archive.meta["step"].as_u64().unwrap_or(0),
    })
}

/// Run a loaded model on one sample: K images `[3, H, W]` in [0, 1].
pub fn synthesize(model: &LoadedModel, sample: &GBufferSample) -> Result<Vec<Array3<f64>>, GisError> {
    let pyramid = build_pyramid_excluding(sample, model.levels, &model.exclude)?;
    model.generator.synthesize(&pyramid.levels)
}

/// Convenience: load a checkpoint and synthesize in one call.
pub fn synthesize_from_path(path: &Path, sample: &GBufferSample) -> Result<Vec<Array3<f64>>, GisError> {
    let model = load_model(path)?;
    synthesize(&model, sample)
}

impl Trainer {
    /// Test/ablation hook: content hashes of both parameter sets.
    pub fn param_hashes(&self) -> (u64, u64) {
        (self.gen.params().content_hash(), self.disc.params().content_hash())
    }

    pub fn extractor(&self) -> &FeatureExtractor {
        &self.fx
    }

    /// Direct access for harnesses that drive the loop themselves.
    pub fn config_mut(&mut self) -> &mut TrainConfig {
        &mut self.config
    }
}

/// Mean per-pixel foreground L1 between an output and the target; `None`
/// for an empty mask (masked metrics are reported as absent).
pub fn masked_l1(output: &Array3<f64>, target: &Array3<f64>, mask: &Array2<f64>) -> Option<f64> {
    let (h, w) = mask.dim();
    let mut sum = 0.0;
    let mut n = 0.0;
    for r in 0..h {
        for c in 0..w {
            if mask[[r, c]] > 0.5 {
                for ch in 0..3 {
                    sum += (output[[ch, r, c]] - target[[ch, r, c]]).abs();
                }
                n += 3.0;
            }
        }
    }
    if n == 0.0 {
        None
    } else {
        Some(sum / n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_dataset;
    use crate::gbuffer::MaterialPalette;
    use crate::scene::SceneConfig;
    use approx::assert_abs_diff_eq;

    fn tiny_config(dataset: &Path, out: &Path) -> TrainConfig {
        TrainConfig {
            dataset: dataset.to_path_buf(),
            out_dir: out.to_path_buf(),
            steps: 2,
            batch_size: 1,
            k: 2,
            levels: 3,
            base_h: 4,
            base_w: 4,
            widths: vec![8, 8, 8],
            fx_channels: vec![6, 8],
            checkpoint_every: 1,
            ..TrainConfig::default()
        }
    }

    fn tiny_dataset(dir: &Path, n: usize) {
        let palette = MaterialPalette::default_six();
        let cfg = SceneConfig { height: 16, width: 16, ..SceneConfig::default() };
        generate_dataset(n, 3, dir, &cfg, 3, &palette).unwrap();
    }

    #[test]
    fn toml_roundtrip_and_overrides() {
        let mut c = TrainConfig::from_toml_str("steps = 12\nlr_g = 0.001\nwidths = [4, 4]\nlevels = 2").unwrap();
        assert_eq!(c.steps, 12);
        assert_eq!(c.widths, vec![4, 4]);
        c.apply_override("k=5").unwrap();
        assert_eq!(c.k, 5);
        c.apply_override("dataset=somewhere/else").unwrap();
        assert_eq!(c.dataset, PathBuf::from("somewhere/else"));
        assert!(c.apply_override("nonsense_key=1").is_err());
        assert!(TrainConfig::from_toml_str("unknown_field = 3").is_err());
    }

    #[test]
    fn batch_indices_cover_epoch() {
        let n = 7;
        let mut seen = vec![0usize; n];
        for step in 0..n as u64 {
            for i in batch_indices(9, step, n, 1) {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1), "epoch shuffle must be a permutation: {seen:?}");
        // Pure function: same step gives the same batch.
        assert_eq!(batch_indices(9, 3, n, 2), batch_indices(9, 3, n, 2));
    }

    #[test]
    fn zero_learning_rates_keep_parameters() {
        let data = tempfile::tempdir().unwrap();
        tiny_dataset(data.path(), 3);
        let out = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(data.path(), out.path());
        cfg.lr_g = 0.0;
        cfg.lr_d = 0.0;
        let ds = Dataset::open(data.path()).unwrap();
        let mut t = Trainer::new(cfg, ds.palette().len()).unwrap();
        let before = t.param_hashes();
        let batch = vec![ds.load(0).unwrap()];
        let m = t.train_step(&batch, &[0]).unwrap();
        assert!(m.total.is_finite());
        assert_eq!(t.param_hashes(), before);
    }

    #[test]
    fn updates_touch_only_their_network() {
        let data = tempfile::tempdir().unwrap();
        tiny_dataset(data.path(), 3);
        let out = tempfile::tempdir().unwrap();
        let ds = Dataset::open(data.path()).unwrap();

        // Generator frozen: D may move, G must not.
        let mut cfg = tiny_config(data.path(), out.path());
        cfg.lr_g = 0.0;
        let mut t = Trainer::new(cfg, ds.palette().len()).unwrap();
        let (g0, d0) = t.param_hashes();
        let batch = vec![ds.load(0).unwrap()];
        t.train_step(&batch, &[0]).unwrap();
        let (g1, d1) = t.param_hashes();
        assert_eq!(g0, g1, "generator must be untouched with lr_g = 0");
        assert_ne!(d0, d1, "discriminator should have moved");

        // Discriminator frozen: the mirror image.
        let mut cfg = tiny_config(data.path(), out.path());
        cfg.lr_d = 0.0;
        let mut t = Trainer::new(cfg, ds.palette().len()).unwrap();
        let (g0, d0) = t.param_hashes();
        t.train_step(&batch, &[0]).unwrap();
        let (g1, d1) = t.param_hashes();
        assert_ne!(g0, g1);
        assert_eq!(d0, d1);
    }

    #[test]
    fn fixed_seed_steps_are_bit_identical() {
        let data = tempfile::tempdir().unwrap();
        tiny_dataset(data.path(), 4);
        let ds = Dataset::open(data.path()).unwrap();
        let run = || {
            let out = tempfile::tempdir().unwrap();
            let cfg = tiny_config(data.path(), out.path());
            let mut t = Trainer::new(cfg, ds.palette().len()).unwrap();
            for step in 0..2u64 {
                let idx = batch_indices(t.config().seed, step, ds.len(), 1);
                let batch: Vec<_> = idx.iter().map(|&i| ds.load(i).unwrap()).collect();
                t.train_step(&batch, &idx).unwrap();
            }
            t.param_hashes()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn fit_zero_steps_emits_initial_checkpoint() {
        let data = tempfile::tempdir().unwrap();
        tiny_dataset(data.path(), 2);
        let out = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(data.path(), out.path());
        cfg.steps = 0;
        let outcome = fit(cfg).unwrap();
        assert!(outcome.final_checkpoint.exists());
        assert!(outcome.final_state.exists());
        let model = load_model(&outcome.final_checkpoint).unwrap();
        assert_eq!(model.step, 0);
    }

    #[test]
    fn resume_matches_uninterrupted_run_exactly() {
        let data = tempfile::tempdir().unwrap();
        tiny_dataset(data.path(), 4);

        // Uninterrupted: 4 steps.
        let out_a = tempfile::tempdir().unwrap();
        let mut cfg_a = tiny_config(data.path(), out_a.path());
        cfg_a.steps = 4;
        cfg_a.checkpoint_every = 2;
        fit(cfg_a).unwrap();
        let full = Trainer::from_state(&out_a.path().join("state-000004.bin")).unwrap();

        // Interrupted at 2, resumed to 4.
        let out_b = tempfile::tempdir().unwrap();
        let mut cfg_b = tiny_config(data.path(), out_b.path());
        cfg_b.steps = 2;
        cfg_b.checkpoint_every = 2;
        fit(cfg_b).unwrap();
        let state2 = out_b.path().join("state-000002.bin");
        // Extend the schedule by 2 more steps and continue.
        let outcome = resume(&state2, Some(2)).unwrap();
        let resumed = Trainer::from_state(&outcome.final_state).unwrap();

        assert_eq!(full.param_hashes(), resumed.param_hashes(), "resume must be bit-identical");
    }

    #[test]
    fn synthesize_from_checkpoint() {
        let data = tempfile::tempdir().unwrap();
        tiny_dataset(data.path(), 2);
        let out = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(data.path(), out.path());
        cfg.steps = 1;
        let outcome = fit(cfg).unwrap();
        let ds = Dataset::open(data.path()).unwrap();
        let sample = ds.load(1).unwrap();
        let model = load_model(&outcome.final_checkpoint).unwrap();
        let images = synthesize(&model, &sample).unwrap();
        assert_eq!(images.len(), 2);
        assert_eq!(images[0].dim(), (3, 16, 16));
        let again = synthesize(&model, &sample).unwrap();
        assert_eq!(images[0], again[0]);
    }

    #[test]
    fn masked_l1_empty_mask_is_absent() {
        let a = Array3::zeros((3, 2, 2));
        let b = Array3::from_elem((3, 2, 2), 1.0);
        let empty = Array2::zeros((2, 2));
        assert!(masked_l1(&a, &b, &empty).is_none());
        let full = Array2::from_elem((2, 2), 1.0);
        assert_abs_diff_eq!(masked_l1(&a, &b, &full).unwrap(), 1.0);
    }
}
