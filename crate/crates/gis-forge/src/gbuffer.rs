//! G-buffer data model: per-pixel geometry channels, validation, depth
//! encoding, and the multi-resolution input pyramid consumed by the
//! generator.
//!
//! Arrays are channel-planar (`[C, H, W]` / `[H, W]`) throughout. A sample
//! holds unit surface normals in camera coordinates, camera-space depth,
//! a one-hot material map, the binary object mask, the background plate,
//! and optionally the ground-truth target image.

use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::GisError;
use crate::tensor::kernels;

/// Tolerance for the unit-norm invariant on foreground normals.
pub const NORMAL_TOL: f64 = 1e-4;
/// Tolerance for one-hot / binary / zero checks (survives f32 storage).
pub const BINARY_TOL: f64 = 1e-6;
/// Pooled-normal magnitudes at or below this renormalize to zero.
pub const RENORM_EPS: f64 = 1e-6;

/// Ordered material alphabet. Carries no physical parameters; appearance is
/// learned from data (the oracle keeps its own hidden physics).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaterialPalette {
    entries: Vec<(u8, String)>,
}

impl MaterialPalette {
    /// The default six-material palette used by the oracle.
    pub fn default_six() -> Self {
        let names =
            ["matte-red", "matte-blue", "matte-green", "glossy-metal", "chrome-like", "glass"];
        MaterialPalette {
            entries: names.iter().enumerate().map(|(i, n)| (i as u8, n.to_string())).collect(),
        }
    }

    pub fn new(entries: Vec<(u8, String)>) -> Result<Self, GisError> {
        let p = MaterialPalette { entries };
        p.check()?;
        Ok(p)
    }

    fn check(&self) -> Result<(), GisError> {
        for (i, (id, _)) in self.entries.iter().enumerate() {
            if *id as usize != i {
                return Err(GisError::Config(format!(
                    "palette ids must be contiguous from 0; found id {id} at position {i}"
                )));
            }
        }
        let mut names: Vec<&str> = self.entries.iter().map(|(_, n)| n.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.entries.len() {
            return Err(GisError::Config("palette names must be unique".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(u8, String)] {
        &self.entries
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.entries.get(id).map(|(_, n)| n.as_str())
    }

    /// Stable FNV-1a hash over ids and names, recorded in sample sidecars so
    /// datasets and palettes cannot be silently mixed.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (id, name) in &self.entries {
            for b in std::iter::once(*id).chain(name.bytes()).chain(std::iter::once(b';')) {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

/// One training or inference sample.
#[derive(Clone, Debug)]
pub struct GBufferSample {
    /// `[3, H, W]`; unit vectors on foreground, zero on background.
    pub normals: Array3<f64>,
    /// `[H, W]`; positive camera-space distance on foreground, 0 on background.
    pub depth: Array2<f64>,
    /// `[Nm, H, W]`; one-hot on foreground, all-zero on background.
    pub materials: Array3<f64>,
    /// `[H, W]` in {0, 1}; 1 marks the synthesized-object foreground.
    pub mask: Array2<f64>,
    /// `[3, H, W]` RGB in [0, 1].
    pub background: Array3<f64>,
    /// `[3, H, W]` RGB in [0, 1]; ground truth when present.
    pub target: Option<Array3<f64>>,
    /// Near-plane distance used by the disparity encoding.
    pub z_near: f64,
}

impl GBufferSample {
    pub fn height(&self) -> usize {
        self.depth.dim().0
    }

    pub fn width(&self) -> usize {
        self.depth.dim().1
    }

    pub fn material_count(&self) -> usize {
        self.materials.dim().0
    }

    pub fn foreground_pixels(&self) -> usize {
        self.mask.iter().filter(|&&v| v > 0.5).count()
    }
}

/// Input modalities that can be ablated out of the conditioning input.
/// The mask is not listed: the losses require it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Normals,
    Depth,
    Materials,
}

impl Modality {
    pub fn parse(s: &str) -> Result<Modality, GisError> {
        match s {
            "normals" => Ok(Modality::Normals),
            "depth" => Ok(Modality::Depth),
            "materials" => Ok(Modality::Materials),
            "mask" => Err(GisError::Config(
                "the mask cannot be excluded: the training losses require it".into(),
            )),
            other => Err(GisError::Config(format!("unknown modality '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Modality::Normals => "normals",
            Modality::Depth => "depth",
            Modality::Materials => "materials",
        }
    }
}

/// Conditioning channel count: normals(3) + disparity(1) + materials(Nm) +
/// mask(1) + background(3), minus excluded modalities.
pub fn channel_count(material_count: usize, exclude: &[Modality]) -> usize {
    let mut c = 8 + material_count;
    for m in exclude {
        c -= match m {
            Modality::Normals => 3,
            Modality::Depth => 1,
            Modality::Materials => material_count,
        };
    }
    c
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InvariantKind {
    NonUnitNormal,
    BackgroundNormalNonzero,
    NotOneHot,
    BackgroundMaterialNonzero,
    DepthMaskMismatch,
    MaskNotBinary,
    ImageValueOutOfRange,
    ResolutionNotDivisible,
}

/// One violated invariant with the coordinates of its first offender.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Violation {
    pub kind: InvariantKind,
    pub first: (usize, usize),
    pub count: usize,
    pub message: String,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    fn record(&mut self, kind: InvariantKind, at: (usize, usize), message: impl FnOnce() -> String) {
        if let Some(v) = self.violations.iter_mut().find(|v| v.kind == kind) {
            v.count += 1;
        } else {
            self.violations.push(Violation { kind, first: at, count: 1, message: message() });
        }
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "valid");
        }
        for v in &self.violations {
            writeln!(f, "{} (first at {:?}, {} pixel(s))", v.message, v.first, v.count)?;
        }
        Ok(())
    }
}

/// Check every sample invariant. Shape inconsistencies between channels are
/// structural errors (`Err`), distinct from the per-pixel invariant
/// violations collected in the report.
/// ```
/// use gis_forge::gbuffer::{validate_sample, GBufferSample, MaterialPalette};
/// use ndarray::{Array2, Array3, Axis};
///
/// let palette = MaterialPalette::default_six();
/// let (h, w) = (8, 8);
/// let mut normals = Array3::zeros((3, h, w));
/// normals.index_axis_mut(Axis(0), 2).fill(1.0); // camera-facing
/// let mut materials = Array3::zeros((palette.len(), h, w));
/// materials.index_axis_mut(Axis(0), 0).fill(1.0);
/// let sample = GBufferSample {
///     normals,
///     depth: Array2::from_elem((h, w), 2.0),
///     materials,
///     mask: Array2::from_elem((h, w), 1.0),
///     background: Array3::from_elem((3, h, w), 0.5),
///     target: None,
///     z_near: 0.5,
/// };
/// let report = validate_sample(&sample, &palette, Some(3)).unwrap();
/// assert!(report.is_empty());
/// ```
pub fn validate_sample(
    sample: &GBufferSample,
    palette: &MaterialPalette,
    levels: Option<usize>,
) -> Result<ValidationReport, GisError> {
    let (h, w) = sample.depth.dim();
    let shape_err = |what: &str, expected: String, got: String| GisError::Shape {
        what: what.to_string(),
        expected,
        got,
    };
    if sample.normals.dim() != (3, h, w) {
        return Err(shape_err("normals", format!("(3, {h}, {w})"), format!("{:?}", sample.normals.dim())));
    }
    if sample.materials.dim().1 != h || sample.materials.dim().2 != w {
        return Err(shape_err("materials", format!("(_, {h}, {w})"), format!("{:?}", sample.materials.dim())));
    }
    if sample.materials.dim().0 != palette.len() {
        return Err(shape_err(
            "materials channel count",
            palette.len().to_string(),
            sample.materials.dim().0.to_string(),
        ));
    }
    if sample.mask.dim() != (h, w) {
        return Err(shape_err("mask", format!("({h}, {w})"), format!("{:?}", sample.mask.dim())));
    }
    if sample.background.dim() != (3, h, w) {
        return Err(shape_err("background", format!("(3, {h}, {w})"), format!("{:?}", sample.background.dim())));
    }
    if let Some(t) = &sample.target {
        if t.dim() != (3, h, w) {
            return Err(shape_err("target", format!("(3, {h}, {w})"), format!("{:?}", t.dim())));
        }
    }

    let mut report = ValidationReport::default();

    if let Some(l) = levels {
        let div = 1usize << (l - 1);
        if h % div != 0 || w % div != 0 {
            report.record(InvariantKind::ResolutionNotDivisible, (0, 0), || {
                format!("resolution {h}x{w} not divisible by 2^(L-1) = {div} for L = {l}")
            });
        }
    }

    let nm = palette.len();
    for r in 0..h {
        for c in 0..w {
            let m = sample.mask[[r, c]];
            if (m - 0.0).abs() > BINARY_TOL && (m - 1.0).abs() > BINARY_TOL {
                report.record(InvariantKind::MaskNotBinary, (r, c), || {
                    format!("mask value {m} not in {{0,1}} at ({r},{c})")
                });
            }
            let fg = m > 0.5;
            let n = [
                sample.normals[[0, r, c]],
                sample.normals[[1, r, c]],
                sample.normals[[2, r, c]],
            ];
            let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if fg {
                if (norm - 1.0).abs() > NORMAL_TOL {
                    report.record(InvariantKind::NonUnitNormal, (r, c), || {
                        format!("non-unit normal (|n| = {norm:.6}) at ({r},{c})")
                    });
                }
            } else if norm > BINARY_TOL {
                report.record(InvariantKind::BackgroundNormalNonzero, (r, c), || {
                    format!("nonzero normal on background at ({r},{c})")
                });
            }

            let mut ones = 0usize;
            let mut bad_value = false;
            let mut sum = 0.0;
            for ch in 0..nm {
                let v = sample.materials[[ch, r, c]];
                sum += v;
                if (v - 1.0).abs() <= BINARY_TOL {
                    ones += 1;
                } else if v.abs() > BINARY_TOL {
                    bad_value = true;
                }
            }
            if fg {
                if ones != 1 || bad_value || (sum - 1.0).abs() > BINARY_TOL {
                    report.record(InvariantKind::NotOneHot, (r, c), || {
                        format!("materials not one-hot at ({r},{c})")
                    });
                }
            } else if sum.abs() > BINARY_TOL || ones > 0 {
                report.record(InvariantKind::BackgroundMaterialNonzero, (r, c), || {
                    format!("nonzero material channel on background at ({r},{c})")
                });
            }

            let d = sample.depth[[r, c]];
            if fg {
                if d <= 0.0 {
                    report.record(InvariantKind::DepthMaskMismatch, (r, c), || {
                        format!("non-positive depth {d} on foreground at ({r},{c})")
                    });
                }
            } else if d != 0.0 {
                report.record(InvariantKind::DepthMaskMismatch, (r, c), || {
                    format!("nonzero depth {d} on background at ({r},{c})")
                });
            }

            for ch in 0..3 {
                let b = sample.background[[ch, r, c]];
                if !(0.0..=1.0).contains(&b) {
                    report.record(InvariantKind::ImageValueOutOfRange, (r, c), || {
                        format!("background value {b} outside [0,1] at ({r},{c})")
                    });
                }
                if let Some(t) = &sample.target {
                    let tv = t[[ch, r, c]];
                    if !(0.0..=1.0).contains(&tv) {
                        report.record(InvariantKind::ImageValueOutOfRange, (r, c), || {
                            format!("target value {tv} outside [0,1] at ({r},{c})")
                        });
                    }
                }
            }
        }
    }

    Ok(report)
}

/// Normalized disparity `z_near / z` on the foreground, exactly 0 on the
/// background. Values land in `[0, 1]` for depths at or beyond the near
/// plane; nearer foreground depths clamp to 1 (counted, not fatal).
/// ```
/// use gis_forge::gbuffer::encode_depth;
/// use ndarray::Array2;
///
/// let depth = Array2::from_elem((1, 2), 1.0); // 2 * z_near
/// let mask = Array2::from_elem((1, 2), 1.0);
/// let (disparity, clamped) = encode_depth(&depth, &mask, 0.5).unwrap();
/// assert_eq!(disparity[[0, 0]], 0.5);
/// assert_eq!(clamped, 0);
/// ```
pub fn encode_depth(
    depth: &Array2<f64>,
    mask: &Array2<f64>,
    z_near: f64,
) -> Result<(Array2<f64>, usize), GisError> {
    if z_near <= 0.0 {
        return Err(GisError::Config(format!("z_near must be positive, got {z_near}")));
    }
    if depth.dim() != mask.dim() {
        return Err(GisError::Shape {
            what: "encode_depth mask".into(),
            expected: format!("{:?}", depth.dim()),
            got: format!("{:?}", mask.dim()),
        });
    }
    let mut clamped = 0usize;
    let mut out = Array2::zeros(depth.dim());
    for ((r, c), v) in depth.indexed_iter() {
        if mask[[r, c]] > 0.5 {
            if *v <= 0.0 {
                return Err(GisError::Validation(format!(
                    "non-positive foreground depth {v} at ({r},{c})"
                )));
            }
            let d = z_near / v;
            if d > 1.0 {
                clamped += 1;
                out[[r, c]] = 1.0;
            } else {
                out[[r, c]] = d;
            }
        }
    }
    Ok((out, clamped))
}

/// Average-pool a binary (or soft) mask by `factor`, yielding fractional
/// occupancy values in `[0, 1]`.
pub fn downscale_mask(mask: &Array2<f64>, factor: usize) -> Result<Array2<f64>, GisError> {
    let (h, w) = mask.dim();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(GisError::Shape {
            what: "downscale_mask factor".into(),
            expected: format!("factor dividing {h}x{w}"),
            got: factor.to_string(),
        });
    }
    if factor == 1 {
        return Ok(mask.clone());
    }
    let arr = mask.clone().into_dyn().insert_axis(Axis(0)).insert_axis(Axis(0));
    let pooled = kernels::avg_pool2(&arr, factor);
    let (ho, wo) = (h / factor, w / factor);
    Ok(pooled.into_shape_with_order((ho, wo)).expect("pool shape").to_owned())
}

/// Per-level conditioning input. Level 0 is the coarsest; the last level
/// matches the sample resolution. Channel order within a level:
/// normals, disparity, materials, mask, background (minus exclusions).
#[derive(Clone, Debug)]
pub struct InputPyramid {
    pub levels: Vec<Array3<f64>>,
    pub channels: usize,
}

impl InputPyramid {
    pub fn level_count(&self) -> usize {
        self.levels.len()
    }
}

/// Assemble the full-resolution conditioning stack and its coarse levels.
/// Each coarser level is the 2x average-pooled previous level with the
/// normal channels renormalized to unit length (zero when the pooled
/// magnitude is at most [`RENORM_EPS`]).
/// ```
/// use gis_forge::gbuffer::{build_pyramid, MaterialPalette};
/// use gis_forge::scene::{render_sample, SceneConfig};
///
/// let palette = MaterialPalette::default_six();
/// let cfg = SceneConfig { height: 32, width: 32, ..SceneConfig::default() };
/// let sample = render_sample(7, &cfg, &palette).unwrap();
/// let pyramid = build_pyramid(&sample, 3).unwrap();
/// assert_eq!(pyramid.levels.len(), 3);
/// assert_eq!(pyramid.levels[0].dim(), (14, 8, 8));   // 3+1+6+1+3 channels
/// assert_eq!(pyramid.levels[2].dim(), (14, 32, 32));
/// ```
pub fn build_pyramid(sample: &GBufferSample, levels: usize) -> Result<InputPyramid, GisError> {
    build_pyramid_excluding(sample, levels, &[])
}

/// [`build_pyramid`] with modalities dropped from the channel stack (their
/// channels are removed, not zero-filled, so the generator input width
/// shrinks accordingly).
pub fn build_pyramid_excluding(
    sample: &GBufferSample,
    levels: usize,
    exclude: &[Modality],
) -> Result<InputPyramid, GisError> {
    if levels < 1 {
        return Err(GisError::Config("pyramid needs at least one level".into()));
    }
    let (h, w) = (sample.height(), sample.width());
    let div = 1usize << (levels - 1);
    if h % div != 0 || w % div != 0 {
        return Err(GisError::Shape {
            what: "pyramid resolution".into(),
            expected: format!("H and W divisible by 2^(L-1) = {div}"),
            got: format!("{h}x{w}"),
        });
    }

    let nm = sample.material_count();
    let keep_normals = !exclude.contains(&Modality::Normals);
    let keep_depth = !exclude.contains(&Modality::Depth);
    let keep_materials = !exclude.contains(&Modality::Materials);
    let channels = channel_count(nm, exclude);

    let (disparity, _) = encode_depth(&sample.depth, &sample.mask, sample.z_near)?;

    let mut full = Array3::zeros((channels, h, w));
    let mut ch = 0usize;
    let mut normal_rows = None;
    if keep_normals {
        normal_rows = Some(ch);
        for i in 0..3 {
            full.index_axis_mut(Axis(0), ch + i).assign(&sample.normals.index_axis(Axis(0), i));
        }
        ch += 3;
    }
    if keep_depth {
        full.index_axis_mut(Axis(0), ch).assign(&disparity);
        ch += 1;
    }
    if keep_materials {
        for i in 0..nm {
            full.index_axis_mut(Axis(0), ch + i).assign(&sample.materials.index_axis(Axis(0), i));
        }
        ch += nm;
    }
    full.index_axis_mut(Axis(0), ch).assign(&sample.mask);
    ch += 1;
    for i in 0..3 {
        full.index_axis_mut(Axis(0), ch + i).assign(&sample.background.index_axis(Axis(0), i));
    }

    let mut stack = Vec::with_capacity(levels);
    stack.push(full);
    for _ in 1..levels {
        let finest: &Array3<f64> = stack.last().unwrap();
        let pooled4 = kernels::avg_pool2(
            &finest.clone().into_dyn().insert_axis(Axis(0)),
            2,
        );
        let (ph, pw) = (pooled4.shape()[2], pooled4.shape()[3]);
        let mut pooled: Array3<f64> = pooled4
            .into_shape_with_order(IxDyn(&[channels, ph, pw]))
            .expect("pool shape")
            .into_dimensionality()
            .expect("3d");
        if let Some(n0) = normal_rows {
            renormalize_normals(&mut pooled, n0);
        }
        stack.push(pooled);
    }
    stack.reverse();
    Ok(InputPyramid { levels: stack, channels })
}

fn renormalize_normals(level: &mut Array3<f64>, n0: usize) {
    let (_, h, w) = level.dim();
    for r in 0..h {
        for c in 0..w {
            let x = level[[n0, r, c]];
            let y = level[[n0 + 1, r, c]];
            let z = level[[n0 + 2, r, c]];
            let mag = (x * x + y * y + z * z).sqrt();
            if mag > RENORM_EPS {
                level[[n0, r, c]] = x / mag;
                level[[n0 + 1, r, c]] = y / mag;
                level[[n0 + 2, r, c]] = z / mag;
            } else {
                level[[n0, r, c]] = 0.0;
                level[[n0 + 1, r, c]] = 0.0;
                level[[n0 + 2, r, c]] = 0.0;
            }
        }
    }
}

/// Stack per-sample pyramid levels into batched `[B, C, h, w]` arrays.
pub fn batch_pyramids(pyramids: &[InputPyramid]) -> Vec<ArrayD<f64>> {
    assert!(!pyramids.is_empty());
    let levels = pyramids[0].level_count();
    let mut out = Vec::with_capacity(levels);
    for l in 0..levels {
        let views: Vec<_> =
            pyramids.iter().map(|p| p.levels[l].view().insert_axis(Axis(0))).collect();
        let stacked = ndarray::concatenate(Axis(0), &views).expect("batch pyramid");
        out.push(stacked.into_dyn().as_standard_layout().to_owned());
    }
    out
}
