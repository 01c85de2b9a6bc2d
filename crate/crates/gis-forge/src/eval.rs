//! Evaluation metrics, the ablation harness, and gallery rendering.
//!
//! Best-of-K selection here always uses masked L1 against the target (never
//! the training loss), with ties resolved to the lowest branch index.
//! Masked metrics are absent for samples with an empty mask.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::GisError;
use crate::gbuffer::{GBufferSample, MaterialPalette, Modality};
use crate::trainer::{fit, load_model, masked_l1, synthesize, LoadedModel, TrainConfig};

/// Masked PSNR is capped here (a perfect reconstruction would be infinite).
pub const PSNR_CAP_DB: f64 = 99.0;
pub const GALLERY_LAYOUT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleEval {
    pub index: usize,
    /// Masked L1 of the best output; absent when the mask is empty.
    pub best_masked_l1: Option<f64>,
    pub best_k: Option<usize>,
    /// Masked PSNR (peak 1.0) of the best output, capped at [`PSNR_CAP_DB`].
    pub best_psnr_db: Option<f64>,
    /// Mean pairwise foreground L1 across the K outputs; exactly 0 for K=1.
    pub diversity_spread: Option<f64>,
    /// Background L1 of the best output (first output when no foreground).
    pub background_l1: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EvalAggregate {
    pub samples: usize,
    pub samples_with_foreground: usize,
    pub mean_best_masked_l1: Option<f64>,
    pub mean_best_psnr_db: Option<f64>,
    pub mean_diversity_spread: Option<f64>,
    pub mean_background_l1: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint_step: u64,
    pub per_sample: Vec<SampleEval>,
    pub aggregate: EvalAggregate,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String, GisError> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let a = &self.aggregate;
        writeln!(f, "samples evaluated : {}", a.samples)?;
        writeln!(f, "with foreground   : {}", a.samples_with_foreground)?;
        match a.mean_best_masked_l1 {
            Some(v) => writeln!(f, "best-of-K masked L1: {v:.4}")?,
            None => writeln!(f, "best-of-K masked L1: n/a (no foreground)")?,
        }
        match a.mean_best_psnr_db {
            Some(v) => writeln!(f, "masked PSNR (best) : {v:.2} dB")?,
            None => writeln!(f, "masked PSNR (best) : n/a")?,
        }
        match a.mean_diversity_spread {
            Some(v) => writeln!(f, "diversity spread   : {v:.4}")?,
            None => writeln!(f, "diversity spread   : n/a")?,
        }
        writeln!(f, "background L1      : {:.4}", a.mean_background_l1)
    }
}

fn masked_mse(output: &Array3<f64>, target: &Array3<f64>, mask: &Array2<f64>) -> Option<f64> {
    let (h, w) = mask.dim();
    let mut sum = 0.0;
    let mut n = 0.0;
    for r in 0..h {
        for c in 0..w {
            if mask[[r, c]] > 0.5 {
                for ch in 0..3 {
                    let d = output[[ch, r, c]] - target[[ch, r, c]];
                    sum += d * d;
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

fn background_l1_of(output: &Array3<f64>, target: &Array3<f64>, mask: &Array2<f64>) -> f64 {
    let (h, w) = mask.dim();
    let mut sum = 0.0;
    let mut n = 0.0;
    for r in 0..h {
        for c in 0..w {
            if mask[[r, c]] <= 0.5 {
                for ch in 0..3 {
                    sum += (output[[ch, r, c]] - target[[ch, r, c]]).abs();
                }
                n += 3.0;
            }
        }
    }
    if n == 0.0 {
        0.0
    } else {
        sum / n
    }
}

/// Metric core: score K candidate outputs against a target. Exposed so
/// oracle outputs (or any fixed images) can be evaluated without a model.
pub fn evaluate_outputs(
    index: usize,
    outputs: &[Array3<f64>],
    target: &Array3<f64>,
    mask: &Array2<f64>,
) -> SampleEval {
    assert!(!outputs.is_empty());
    let l1s: Vec<Option<f64>> = outputs.iter().map(|o| masked_l1(o, target, mask)).collect();
    let (best_k, best_masked_l1) = match l1s[0] {
        None => (None, None),
        Some(_) => {
            let mut bk = 0usize;
            let mut bv = l1s[0].unwrap();
            for (k, v) in l1s.iter().enumerate().skip(1) {
                let v = v.unwrap();
                if v < bv {
                    bv = v;
                    bk = k;
                }
            }
            (Some(bk), Some(bv))
        }
    };
    let best_psnr_db = best_k.map(|k| {
        let mse = masked_mse(&outputs[k], target, mask).unwrap();
        if mse <= 1e-12 {
            PSNR_CAP_DB
        } else {
            (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
        }
    });
    let diversity_spread = if best_k.is_none() {
        None
    } else if outputs.len() == 1 {
        Some(0.0)
    } else {
        let mut sum = 0.0;
        let mut pairs = 0.0;
        for i in 0..outputs.len() {
            for j in i + 1..outputs.len() {
                sum += masked_l1(&outputs[i], &outputs[j], mask).unwrap();
                pairs += 1.0;
            }
        }
        Some(sum / pairs)
    };
    let ref_output = &outputs[best_k.unwrap_or(0)];
    SampleEval {
        index,
        best_masked_l1,
        best_k,
        best_psnr_db,
        diversity_spread,
        background_l1: background_l1_of(ref_output, target, mask),
    }
}

fn aggregate(per_sample: &[SampleEval]) -> EvalAggregate {
    let with_fg: Vec<&SampleEval> =
        per_sample.iter().filter(|s| s.best_masked_l1.is_some()).collect();
    let mean_opt = |f: &dyn Fn(&SampleEval) -> f64| -> Option<f64> {
        if with_fg.is_empty() {
            None
        } else {
            Some(with_fg.iter().map(|s| f(s)).sum::<f64>() / with_fg.len() as f64)
        }
    };
    EvalAggregate {
        samples: per_sample.len(),
        samples_with_foreground: with_fg.len(),
        mean_best_masked_l1: mean_opt(&|s| s.best_masked_l1.unwrap()),
        mean_best_psnr_db: mean_opt(&|s| s.best_psnr_db.unwrap()),
        mean_diversity_spread: mean_opt(&|s| s.diversity_spread.unwrap()),
        mean_background_l1: per_sample.iter().map(|s| s.background_l1).sum::<f64>()
            / per_sample.len().max(1) as f64,
    }
}

/// Evaluate a trained model over a (held-out) dataset.
pub fn evaluate(model: &LoadedModel, dataset: &Dataset) -> Result<EvalReport, GisError> {
    if dataset.is_empty() {
        return Err(GisError::Dataset {
            path: dataset.root().to_path_buf(),
            msg: "cannot evaluate an empty dataset".into(),
        });
    }
    let mut per_sample = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let sample = dataset.load(i)?;
        let target = sample.target.clone().ok_or_else(|| GisError::Dataset {
            path: dataset.sample_dir(i),
            msg: "evaluation requires targets".into(),
        })?;
        let outputs = synthesize(model, &sample)?;
        per_sample.push(evaluate_outputs(i, &outputs, &target, &sample.mask));
    }
    let agg = aggregate(&per_sample);
    Ok(EvalReport { checkpoint_step: model.step, per_sample, aggregate: agg })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    /// "none" for the baseline, otherwise the excluded modality.
    pub excluded: String,
    pub report: EvalReport,
}

/// Train one model per ablation (baseline plus each excluded modality,
/// from scratch, channels dropped from the input) and evaluate all of them
/// on the same held-out dataset.
pub fn run_ablation(
    base: &TrainConfig,
    eval_data: &Path,
    modalities: &[Modality],
) -> Result<Vec<AblationRow>, GisError> {
    let eval_ds = Dataset::open(eval_data)?;
    let mut rows = Vec::new();
    let mut variants: Vec<(String, Vec<String>)> = vec![("none".into(), vec![])];
    for m in modalities {
        variants.push((m.name().to_string(), vec![m.name().to_string()]));
    }
    for (label, exclude) in variants {
        let mut cfg = base.clone();
        cfg.exclude = exclude;
        cfg.out_dir = base.out_dir.join(format!("ablate-{label}"));
        let outcome = fit(cfg)?;
        let model = load_model(&outcome.final_checkpoint)?;
        let report = evaluate(&model, &eval_ds)?;
        rows.push(AblationRow { excluded: label, report });
    }
    Ok(rows)
}

/// Render the ablation comparison as an aligned text table.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("excluded     masked-L1   PSNR(dB)   bg-L1\n");
    for r in rows {
        let a = &r.report.aggregate;
        out.push_str(&format!(
            "{:<12} {:>9} {:>10} {:>7.4}\n",
            r.excluded,
            a.mean_best_masked_l1.map_or("n/a".into(), |v| format!("{v:.4}")),
            a.mean_best_psnr_db.map_or("n/a".into(), |v| format!("{v:.2}")),
            a.mean_background_l1,
        ));
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub file: String,
    pub index: usize,
    pub no_foreground: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GalleryManifest {
    pub layout_version: u32,
    pub panels: Vec<String>,
    pub entries: Vec<GalleryEntry>,
}

fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Color for a material id in gallery panels (not a physics table; purely
/// for visualization).
fn material_color(id: usize) -> [u8; 3] {
    const LUT: [[u8; 3]; 8] = [
        [220, 60, 50],
        [60, 90, 220],
        [60, 200, 90],
        [200, 200, 210],
        [130, 140, 170],
        [120, 220, 220],
        [230, 180, 60],
        [180, 90, 200],
    ];
    LUT[id % LUT.len()]
}

/// Per-sample contact sheet: inputs | target | K outputs, separated by 1-px
/// white gutters. Samples without foreground get a red frame on the mask
/// panel and are flagged in the gallery manifest.
pub fn emit_gallery(
    model: &LoadedModel,
    dataset: &Dataset,
    out_dir: &Path,
    limit: Option<usize>,
) -> Result<GalleryManifest, GisError> {
    if dataset.is_empty() {
        return Err(GisError::Dataset {
            path: dataset.root().to_path_buf(),
            msg: "cannot render a gallery from an empty dataset".into(),
        });
    }
    fs::create_dir_all(out_dir).map_err(|e| GisError::io(out_dir, e))?;
    let n = limit.unwrap_or(dataset.len()).min(dataset.len());
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let sample = dataset.load(i)?;
        let outputs = synthesize(model, &sample)?;
        let file = format!("sample-{i:05}.png");
        let no_fg = sample.foreground_pixels() == 0;
        let sheet = contact_sheet(&sample, &outputs, dataset.palette());
        sheet
            .save(out_dir.join(&file))
            .map_err(|e| GisError::Image { path: out_dir.join(&file), msg: e.to_string() })?;
        entries.push(GalleryEntry { file, index: i, no_foreground: no_fg });
    }
    let manifest = GalleryManifest {
        layout_version: GALLERY_LAYOUT_VERSION,
        panels: vec![
            "normals".into(),
            "disparity".into(),
            "materials".into(),
            "mask".into(),
            "background".into(),
            "target".into(),
            "outputs".into(),
        ],
        entries,
    };
    let path = out_dir.join("gallery.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| GisError::io(&path, e))?;
    Ok(manifest)
}

fn contact_sheet(
    sample: &GBufferSample,
    outputs: &[Array3<f64>],
    palette: &MaterialPalette,
) -> image::RgbImage {
    let (h, w) = (sample.height(), sample.width());
    let k = outputs.len();
    let panels = 6 + k;
    let gutter = 1usize;
    let total_w = panels * w + (panels - 1) * gutter;
    let mut img = image::RgbImage::from_pixel(total_w as u32, h as u32, image::Rgb([255, 255, 255]));

    let no_fg = sample.foreground_pixels() == 0;
    let disparity = crate::gbuffer::encode_depth(&sample.depth, &sample.mask, sample.z_near)
        .map(|(d, _)| d)
        .unwrap_or_else(|_| Array2::zeros((h, w)));

    for r in 0..h {
        for c in 0..w {
            let mut panel = 0usize;
            let mut put = |p: usize, rgb: [u8; 3]| {
                img.put_pixel((p * (w + gutter) + c) as u32, r as u32, image::Rgb(rgb));
            };
            // Normals, remapped from [-1,1].
            put(panel, [
                quantize8(sample.normals[[0, r, c]] * 0.5 + 0.5),
                quantize8(sample.normals[[1, r, c]] * 0.5 + 0.5),
                quantize8(sample.normals[[2, r, c]] * 0.5 + 0.5),
            ]);
            panel += 1;
            let d = quantize8(disparity[[r, c]]);
            put(panel, [d, d, d]);
            panel += 1;
            // Materials: palette index color on foreground.
            let mut mat_rgb = [0u8, 0, 0];
            for m in 0..palette.len() {
                if sample.materials[[m, r, c]] > 0.5 {
                    mat_rgb = material_color(m);
                    break;
                }
            }
            put(panel, mat_rgb);
            panel += 1;
            // Mask; red frame annotates an empty-foreground sample.
            let on_frame = r == 0 || c == 0 || r == h - 1 || c == w - 1;
            let mv = quantize8(sample.mask[[r, c]]);
            put(panel, if no_fg && on_frame { [220, 40, 40] } else { [mv, mv, mv] });
            panel += 1;
            put(panel, [
                quantize8(sample.background[[0, r, c]]),
                quantize8(sample.background[[1, r, c]]),
                quantize8(sample.background[[2, r, c]]),
            ]);
            panel += 1;
            let t = sample.target.as_ref();
            put(panel, match t {
                Some(t) => [
                    quantize8(t[[0, r, c]]),
                    quantize8(t[[1, r, c]]),
                    quantize8(t[[2, r, c]]),
                ],
                None => [0, 0, 0],
            });
            panel += 1;
            for out in outputs {
                put(panel, [
                    quantize8(out[[0, r, c]]),
                    quantize8(out[[1, r, c]]),
                    quantize8(out[[2, r, c]]),
                ]);
                panel += 1;
            }
        }
    }
    img
}

/// Convenience wrapper for the CLI: evaluate a checkpoint file against a
/// dataset directory.
pub fn evaluate_checkpoint(checkpoint: &Path, data: &Path) -> Result<EvalReport, GisError> {
    let model = load_model(checkpoint)?;
    let dataset = Dataset::open(data)?;
    evaluate(&model, &dataset)
}

/// Write an evaluation report next to a human-readable table.
pub fn write_report(report: &EvalReport, out: Option<&PathBuf>) -> Result<(), GisError> {
    if let Some(path) = out {
        fs::write(path, report.to_json()?).map_err(|e| GisError::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_dataset;
    use crate::scene::SceneConfig;
    use approx::assert_abs_diff_eq;

    fn toy(h: usize, w: usize, v: f64) -> Array3<f64> {
        Array3::from_elem((3, h, w), v)
    }

    #[test]
    fn identity_outputs_score_perfectly() {
        let target = toy(4, 4, 0.3);
        let mask = Array2::from_elem((4, 4), 1.0);
        let e = evaluate_outputs(0, &[target.clone()], &target, &mask);
        assert_abs_diff_eq!(e.best_masked_l1.unwrap(), 0.0);
        assert_abs_diff_eq!(e.best_psnr_db.unwrap(), PSNR_CAP_DB);
        assert_abs_diff_eq!(e.diversity_spread.unwrap(), 0.0);
    }

    #[test]
    fn constant_half_matches_brute_force() {
        // An untrained model with a zeroed projection emits 0.5 everywhere;
        // its masked L1 equals mean |target - 0.5| over the foreground.
        let mut target = toy(4, 4, 0.0);
        for (i, v) in target.iter_mut().enumerate() {
            *v = (i % 7) as f64 / 10.0;
        }
        let mask = Array2::from_shape_fn((4, 4), |(r, _)| f64::from(r < 2));
        let constant = toy(4, 4, 0.5);
        let e = evaluate_outputs(0, &[constant], &target, &mask);
        let mut expect = 0.0;
        let mut n = 0.0;
        for r in 0..2 {
            for c in 0..4 {
                for ch in 0..3 {
                    expect += (target[[ch, r, c]] - 0.5).abs();
                    n += 1.0;
                }
            }
        }
        assert_abs_diff_eq!(e.best_masked_l1.unwrap(), expect / n, epsilon = 1e-12);
    }

    #[test]
    fn best_of_k_lower_bounds_every_branch() {
        let target = toy(4, 4, 0.2);
        let mask = Array2::from_elem((4, 4), 1.0);
        let outputs = vec![toy(4, 4, 0.9), toy(4, 4, 0.3), toy(4, 4, 0.5)];
        let e = evaluate_outputs(0, &outputs, &target, &mask);
        assert_eq!(e.best_k, Some(1));
        for o in &outputs {
            assert!(e.best_masked_l1.unwrap() <= masked_l1(o, &target, &mask).unwrap() + 1e-15);
        }
        assert!(e.diversity_spread.unwrap() > 0.0);
    }

    #[test]
    fn empty_mask_reports_absent_masked_metrics() {
        let target = toy(4, 4, 0.2);
        let mask = Array2::zeros((4, 4));
        let e = evaluate_outputs(3, &[toy(4, 4, 0.4)], &target, &mask);
        assert!(e.best_masked_l1.is_none());
        assert!(e.best_psnr_db.is_none());
        assert!(e.diversity_spread.is_none());
        assert_abs_diff_eq!(e.background_l1, 0.2, epsilon = 1e-12);
    }

    #[test]
    fn aggregates_recompute_from_per_sample() {
        let samples = vec![
            SampleEval { index: 0, best_masked_l1: Some(0.2), best_k: Some(0), best_psnr_db: Some(20.0), diversity_spread: Some(0.1), background_l1: 0.05 },
            SampleEval { index: 1, best_masked_l1: Some(0.4), best_k: Some(1), best_psnr_db: Some(10.0), diversity_spread: Some(0.3), background_l1: 0.15 },
            SampleEval { index: 2, best_masked_l1: None, best_k: None, best_psnr_db: None, diversity_spread: None, background_l1: 0.01 },
        ];
        let a = aggregate(&samples);
        assert_eq!(a.samples, 3);
        assert_eq!(a.samples_with_foreground, 2);
        assert_abs_diff_eq!(a.mean_best_masked_l1.unwrap(), 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(a.mean_diversity_spread.unwrap(), 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(a.mean_background_l1, (0.05 + 0.15 + 0.01) / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn gallery_is_deterministic_and_flags_empty_masks() {
        let data = tempfile::tempdir().unwrap();
        let palette = MaterialPalette::default_six();
        let scene = SceneConfig { height: 16, width: 16, ..SceneConfig::default() };
        generate_dataset(2, 21, data.path(), &scene, 3, &palette).unwrap();
        let out = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            dataset: data.path().to_path_buf(),
            out_dir: out.path().join("run"),
            steps: 0,
            k: 2,
            levels: 3,
            base_h: 4,
            base_w: 4,
            widths: vec![8, 8, 8],
            fx_channels: vec![6],
            ..TrainConfig::default()
        };
        let outcome = fit(cfg).unwrap();
        let model = load_model(&outcome.final_checkpoint).unwrap();
        let ds = Dataset::open(data.path()).unwrap();
        let g1 = tempfile::tempdir().unwrap();
        let g2 = tempfile::tempdir().unwrap();
        let m1 = emit_gallery(&model, &ds, g1.path(), None).unwrap();
        emit_gallery(&model, &ds, g2.path(), None).unwrap();
        assert_eq!(m1.entries.len(), 2);
        for e in &m1.entries {
            let a = fs::read(g1.path().join(&e.file)).unwrap();
            let b = fs::read(g2.path().join(&e.file)).unwrap();
            assert_eq!(a, b, "gallery bytes must be deterministic");
        }
    }
}
