//! Procedural scene oracle.
//!
//! Samples hidden scenes (primitives, materials with physical parameters,
//! a directional light, a procedural backdrop), rasterizes exact G-buffers
//! by analytic ray-primitive intersection, and shades reference targets with
//! ambient + Lambertian + Phong specular terms, hard planar shadows, and
//! alpha compositing for glass. The hidden parameters (light, physics) never
//! reach the network input; they are exactly what the learned mapping has to
//! infer or spread across its K hypotheses.
//!
//! Camera convention: the camera sits at `camera.position` looking along
//! `-z`, `x` right, `y` up. Normals are stored in camera coordinates, so a
//! camera-facing surface has normal `(0, 0, 1)`.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::GisError;
use crate::gbuffer::{GBufferSample, MaterialPalette};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Sphere { radius: f64 },
    Cuboid { half: [f64; 3] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub center: [f64; 3],
    pub material_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Light {
    /// Unit vector pointing from surfaces toward the light.
    pub direction: [f64; 3],
    pub intensity: f64,
    pub ambient: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: [f64; 3],
    pub z_near: f64,
    pub height: usize,
    pub width: usize,
    /// Pinhole focal length in pixels.
    pub focal: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackdropParams {
    pub top: [f64; 3],
    pub bottom: [f64; 3],
    pub noise_amp: f64,
    pub noise_cell: usize,
    pub noise_seed: u64,
    /// Height of the ground plane (y = ground_y, below the camera).
    pub ground_y: f64,
    /// Multiplier applied to the gradient on ground pixels.
    pub ground_dim: f64,
    /// Multiplier applied where a ground point is shadowed.
    pub shadow_factor: f64,
}

/// Hidden per-material appearance parameters. Indexed by material id.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialPhysics {
    pub albedo: [f64; 3],
    pub specular_strength: f64,
    pub specular_exponent: f64,
    /// Opacity; below 1 the shaded color is alpha-composited over the
    /// background (glass).
    pub alpha: f64,
}

/// Complete hidden scene description. The network only ever sees the
/// G-buffer rasterized from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub light: Light,
    pub camera: Camera,
    pub backdrop: BackdropParams,
    pub physics: Vec<MaterialPhysics>,
}

/// Fixed appearance table for the default six-material palette.
pub fn default_physics() -> Vec<MaterialPhysics> {
    vec![
        MaterialPhysics { albedo: [0.78, 0.16, 0.12], specular_strength: 0.0, specular_exponent: 1.0, alpha: 1.0 },
        MaterialPhysics { albedo: [0.16, 0.28, 0.80], specular_strength: 0.0, specular_exponent: 1.0, alpha: 1.0 },
        MaterialPhysics { albedo: [0.16, 0.68, 0.22], specular_strength: 0.0, specular_exponent: 1.0, alpha: 1.0 },
        MaterialPhysics { albedo: [0.55, 0.55, 0.60], specular_strength: 0.45, specular_exponent: 24.0, alpha: 1.0 },
        MaterialPhysics { albedo: [0.32, 0.34, 0.40], specular_strength: 0.90, specular_exponent: 64.0, alpha: 1.0 },
        MaterialPhysics { albedo: [0.20, 0.32, 0.36], specular_strength: 0.55, specular_exponent: 48.0, alpha: 0.4 },
    ]
}

/// Sampling ranges for hidden scenes. All ranges are inclusive and must be
/// ordered (min <= max).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub z_near: f64,
    /// Focal length as a fraction of the image width.
    pub focal_rel: f64,
    pub primitive_count: (usize, usize),
    pub center_x: (f64, f64),
    pub center_y: (f64, f64),
    pub center_z: (f64, f64),
    pub size: (f64, f64),
    pub light_elevation_deg: (f64, f64),
    pub light_intensity: (f64, f64),
    pub ambient: (f64, f64),
    /// Componentwise relative jitter applied to the default albedo table
    /// per scene; 0 keeps the physics fixed across the dataset.
    pub albedo_jitter: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            z_near: 0.5,
            focal_rel: 1.0,
            primitive_count: (1, 3),
            center_x: (-0.9, 0.9),
            center_y: (-0.55, 0.75),
            center_z: (-4.2, -2.6),
            size: (0.30, 0.62),
            light_elevation_deg: (20.0, 75.0),
            light_intensity: (0.55, 1.35),
            ambient: (0.12, 0.34),
            albedo_jitter: 0.0,
        }
    }
}

impl SceneConfig {
    fn check(&self) -> Result<(), GisError> {
        fn ordered(name: &str, r: (f64, f64)) -> Result<(), GisError> {
            if r.0 > r.1 {
                Err(GisError::Config(format!("degenerate range for {name}: {} > {}", r.0, r.1)))
            } else {
                Ok(())
            }
        }
        if self.primitive_count.0 > self.primitive_count.1 {
            return Err(GisError::Config(format!(
                "degenerate range for primitive_count: {} > {}",
                self.primitive_count.0, self.primitive_count.1
            )));
        }
        ordered("center_x", self.center_x)?;
        ordered("center_y", self.center_y)?;
        ordered("center_z", self.center_z)?;
        ordered("size", self.size)?;
        ordered("light_elevation_deg", self.light_elevation_deg)?;
        ordered("light_intensity", self.light_intensity)?;
        ordered("ambient", self.ambient)?;
        if self.size.0 <= 0.0 {
            return Err(GisError::Config("primitive size must be positive".into()));
        }
        if self.z_near <= 0.0 {
            return Err(GisError::Config("z_near must be positive".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha20Rng, r: (f64, f64)) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.random_range(r.0..r.1)
    }
}

/// Draw a hidden scene. Deterministic in `seed` for a fixed config and
/// palette.
/// ```
/// use gis_forge::gbuffer::MaterialPalette;
/// use gis_forge::scene::{sample_scene, SceneConfig};
///
/// let palette = MaterialPalette::default_six();
/// let cfg = SceneConfig::default();
/// assert_eq!(sample_scene(42, &cfg, &palette).unwrap(),
///            sample_scene(42, &cfg, &palette).unwrap());
/// ```
pub fn sample_scene(
    seed: u64,
    config: &SceneConfig,
    palette: &MaterialPalette,
) -> Result<SceneSpec, GisError> {
    config.check()?;
    if palette.is_empty() {
        return Err(GisError::Config("palette must not be empty".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let n = rng.random_range(config.primitive_count.0..=config.primitive_count.1);
    let mut primitives = Vec::with_capacity(n);
    for _ in 0..n {
        let is_sphere = rng.random_bool(0.6);
        let size = uniform(&mut rng, config.size);
        let shape = if is_sphere {
            Shape::Sphere { radius: size }
        } else {
            let hx = size * (0.7 + 0.5 * rng.random::<f64>());
            let hy = size * (0.7 + 0.5 * rng.random::<f64>());
            let hz = size * (0.7 + 0.5 * rng.random::<f64>());
            Shape::Cuboid { half: [hx, hy, hz] }
        };
        let center = [
            uniform(&mut rng, config.center_x),
            uniform(&mut rng, config.center_y),
            uniform(&mut rng, config.center_z),
        ];
        let material_id = rng.random_range(0..palette.len());
        primitives.push(Primitive { shape, center, material_id });
    }

    let elev = uniform(&mut rng, config.light_elevation_deg).to_radians();
    let azim = rng.random_range(0.0..std::f64::consts::TAU);
    let direction = [elev.cos() * azim.sin(), elev.sin(), elev.cos() * azim.cos()];
    let light = Light {
        direction,
        intensity: uniform(&mut rng, config.light_intensity),
        ambient: uniform(&mut rng, config.ambient),
    };

    let top_base = 0.45 + 0.25 * rng.random::<f64>();
    let top = [top_base * 0.75, top_base * 0.85, top_base.min(1.0)];
    let bot_base: f64 = 0.55 + 0.30 * rng.random::<f64>();
    let bottom = [bot_base.min(1.0), (bot_base * 0.97).min(1.0), (bot_base * 0.90).min(1.0)];
    let backdrop = BackdropParams {
        top,
        bottom,
        noise_amp: 0.02 + 0.04 * rng.random::<f64>(),
        noise_cell: 8,
        noise_seed: rng.random::<u64>(),
        ground_y: -(1.0 + 0.4 * rng.random::<f64>()),
        ground_dim: 0.72,
        shadow_factor: 0.55,
    };

    let mut physics = default_physics();
    physics.truncate(palette.len());
    while physics.len() < palette.len() {
        // Palettes larger than the default table get gray fillers.
        physics.push(MaterialPhysics {
            albedo: [0.5, 0.5, 0.5],
            specular_strength: 0.1,
            specular_exponent: 8.0,
            alpha: 1.0,
        });
    }
    if config.albedo_jitter > 0.0 {
        for p in &mut physics {
            for a in &mut p.albedo {
                let j = 1.0 + config.albedo_jitter * (2.0 * rng.random::<f64>() - 1.0);
                *a = (*a * j).clamp(0.0, 1.0);
            }
        }
    }

    let camera = Camera {
        position: [0.0, 0.0, 0.0],
        z_near: config.z_near,
        height: config.height,
        width: config.width,
        focal: config.focal_rel * config.width as f64,
    };

    Ok(SceneSpec { primitives, light, camera, backdrop, physics })
}

// ---------------------------------------------------------------------------
// Ray intersection
// ---------------------------------------------------------------------------

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add_scaled(a: [f64; 3], b: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Nearest intersection of ray `o + t d` with a primitive, `t > t_min`.
/// Returns `(t, outward unit normal)`.
fn intersect(p: &Primitive, o: [f64; 3], d: [f64; 3], t_min: f64) -> Option<(f64, [f64; 3])> {
    match p.shape {
        Shape::Sphere { radius } => {
            let oc = sub(o, p.center);
            let b = dot(oc, d);
            let c = dot(oc, oc) - radius * radius;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let t = if -b - sq > t_min { -b - sq } else { -b + sq };
            if t <= t_min {
                return None;
            }
            let hit = add_scaled(o, d, t);
            Some((t, normalize(sub(hit, p.center))))
        }
        Shape::Cuboid { half } => {
            let mut t_enter = f64::NEG_INFINITY;
            let mut t_exit = f64::INFINITY;
            let mut axis_enter = 0usize;
            let mut sign_enter = 1.0;
            for ax in 0..3 {
                let lo = p.center[ax] - half[ax];
                let hi = p.center[ax] + half[ax];
                if d[ax].abs() < 1e-12 {
                    if o[ax] < lo || o[ax] > hi {
                        return None;
                    }
                    continue;
                }
                let inv = 1.0 / d[ax];
                let (mut t0, mut t1) = ((lo - o[ax]) * inv, (hi - o[ax]) * inv);
                let mut sign = -1.0;
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                    sign = 1.0;
                }
                if t0 > t_enter {
                    t_enter = t0;
                    axis_enter = ax;
                    sign_enter = sign;
                }
                t_exit = t_exit.min(t1);
                if t_enter > t_exit {
                    return None;
                }
            }
            if t_enter <= t_min {
                return None;
            }
            let mut n = [0.0; 3];
            n[axis_enter] = sign_enter;
            Some((t_enter, n))
        }
    }
}

fn nearest_hit(
    scene: &SceneSpec,
    o: [f64; 3],
    d: [f64; 3],
    t_min: f64,
) -> Option<(f64, [f64; 3], usize)> {
    let mut best: Option<(f64, [f64; 3], usize)> = None;
    for (i, p) in scene.primitives.iter().enumerate() {
        if let Some((t, n)) = intersect(p, o, d, t_min) {
            if best.map_or(true, |(bt, _, _)| t < bt) {
                best = Some((t, n, i));
            }
        }
    }
    best
}

fn any_hit(scene: &SceneSpec, o: [f64; 3], d: [f64; 3], t_min: f64) -> bool {
    scene.primitives.iter().any(|p| intersect(p, o, d, t_min).is_some())
}

/// Direction of the camera ray through pixel `(r, c)`, unit length.
fn pixel_ray(cam: &Camera, r: usize, c: usize) -> [f64; 3] {
    let x = (c as f64 + 0.5 - cam.width as f64 / 2.0) / cam.focal;
    let y = (cam.height as f64 / 2.0 - (r as f64 + 0.5)) / cam.focal;
    normalize([x, y, -1.0])
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn lattice_noise(ix: i64, iy: i64, seed: u64) -> f64 {
    let h = splitmix64(seed ^ (ix as u64).wrapping_mul(0x9e3779b97f4a7c15) ^ (iy as u64).wrapping_mul(0xc2b2ae3d27d4eb4f));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Band-limited value noise in [0, 1): bilinear interpolation of hashed
/// lattice values with smoothstep weights.
fn value_noise(x: f64, y: f64, seed: u64) -> f64 {
    let ix = x.floor() as i64;
    let iy = y.floor() as i64;
    let fx = smoothstep(x - ix as f64);
    let fy = smoothstep(y - iy as f64);
    let v00 = lattice_noise(ix, iy, seed);
    let v10 = lattice_noise(ix + 1, iy, seed);
    let v01 = lattice_noise(ix, iy + 1, seed);
    let v11 = lattice_noise(ix + 1, iy + 1, seed);
    let a = v00 + (v10 - v00) * fx;
    let b = v01 + (v11 - v01) * fx;
    a + (b - a) * fy
}

/// Clean backdrop color at pixel `(r, c)`: vertical gradient, value noise,
/// and a dimmed ground region below the horizon. No shadows here; this is
/// the plate the network receives as input.
pub fn backdrop_color(scene: &SceneSpec, r: usize, c: usize) -> [f64; 3] {
    let cam = &scene.camera;
    let bp = &scene.backdrop;
    let d = pixel_ray(cam, r, c);
    let t_grad = r as f64 / (cam.height.max(2) - 1) as f64;
    let mut col = [0.0; 3];
    for i in 0..3 {
        col[i] = bp.top[i] + (bp.bottom[i] - bp.top[i]) * t_grad;
    }
    // Ground region: rays descending onto the plane y = ground_y.
    if d[1] < -1e-9 {
        let t = (bp.ground_y - cam.position[1]) / d[1];
        if t > 0.0 {
            for v in &mut col {
                *v *= bp.ground_dim;
            }
        }
    }
    let cell = bp.noise_cell.max(1) as f64;
    let n = value_noise(c as f64 / cell, r as f64 / cell, bp.noise_seed) - 0.5;
    for v in &mut col {
        *v = (*v + bp.noise_amp * 2.0 * n).clamp(0.0, 1.0);
    }
    col
}

/// Rasterize the exact G-buffer for a scene by per-pixel analytic ray
/// intersection. The target is left empty; see [`shade_target`].
pub fn rasterize_gbuffer(scene: &SceneSpec, palette: &MaterialPalette) -> GBufferSample {
    let cam = &scene.camera;
    let (h, w) = (cam.height, cam.width);
    let nm = palette.len();
    let mut normals = Array3::zeros((3, h, w));
    let mut depth = Array2::zeros((h, w));
    let mut materials = Array3::zeros((nm, h, w));
    let mut mask = Array2::zeros((h, w));
    let mut background = Array3::zeros((3, h, w));

    for r in 0..h {
        for c in 0..w {
            let bg = backdrop_color(scene, r, c);
            for i in 0..3 {
                background[[i, r, c]] = bg[i];
            }
            let d = pixel_ray(cam, r, c);
            if let Some((t, n, pi)) = nearest_hit(scene, cam.position, d, cam.z_near) {
                mask[[r, c]] = 1.0;
                depth[[r, c]] = t;
                for i in 0..3 {
                    normals[[i, r, c]] = n[i];
                }
                let mid = scene.primitives[pi].material_id.min(nm - 1);
                materials[[mid, r, c]] = 1.0;
            }
        }
    }

    GBufferSample {
        normals,
        depth,
        materials,
        mask,
        background,
        target: None,
        z_near: cam.z_near,
    }
}

/// Shade the reference target for a G-buffer rasterized from `scene`.
///
/// Foreground: `clamp(ambient*albedo + intensity*max(0, n.l)*albedo +
/// specular)`, alpha-composited over the background plate for translucent
/// materials. Background: the plate darkened by a hard shadow factor where
/// the light ray from the visible ground point hits a primitive.
pub fn shade_target(scene: &SceneSpec, gbuffer: &GBufferSample) -> Array3<f64> {
    let cam = &scene.camera;
    let (h, w) = (gbuffer.height(), gbuffer.width());
    let nm = gbuffer.material_count();
    let l = scene.light.direction;
    let mut out = Array3::zeros((3, h, w));

    for r in 0..h {
        for c in 0..w {
            let d = pixel_ray(cam, r, c);
            let bg = [
                gbuffer.background[[0, r, c]],
                gbuffer.background[[1, r, c]],
                gbuffer.background[[2, r, c]],
            ];
            let color = if gbuffer.mask[[r, c]] > 0.5 {
                let n = [
                    gbuffer.normals[[0, r, c]],
                    gbuffer.normals[[1, r, c]],
                    gbuffer.normals[[2, r, c]],
                ];
                let mid = (0..nm)
                    .max_by(|&a, &b| {
                        gbuffer.materials[[a, r, c]]
                            .partial_cmp(&gbuffer.materials[[b, r, c]])
                            .unwrap()
                    })
                    .unwrap_or(0);
                let phys = scene.physics[mid.min(scene.physics.len() - 1)];
                let ndotl = dot(n, l).max(0.0);
                let view = [-d[0], -d[1], -d[2]];
                let mut spec = 0.0;
                if ndotl > 0.0 && phys.specular_strength > 0.0 {
                    let refl = sub([2.0 * dot(n, l) * n[0], 2.0 * dot(n, l) * n[1], 2.0 * dot(n, l) * n[2]], l);
                    let rv = dot(refl, view).max(0.0);
                    spec = phys.specular_strength * rv.powf(phys.specular_exponent) * scene.light.intensity;
                }
                let mut shaded = [0.0; 3];
                for i in 0..3 {
                    shaded[i] = (scene.light.ambient * phys.albedo[i]
                        + scene.light.intensity * ndotl * phys.albedo[i]
                        + spec)
                        .clamp(0.0, 1.0);
                }
                let a = phys.alpha;
                [
                    a * shaded[0] + (1.0 - a) * bg[0],
                    a * shaded[1] + (1.0 - a) * bg[1],
                    a * shaded[2] + (1.0 - a) * bg[2],
                ]
            } else {
                let mut col = bg;
                if d[1] < -1e-9 {
                    let t = (scene.backdrop.ground_y - cam.position[1]) / d[1];
                    if t > 0.0 {
                        let p = add_scaled(cam.position, d, t);
                        if any_hit(scene, p, l, 1e-6) {
                            for v in &mut col {
                                *v *= scene.backdrop.shadow_factor;
                            }
                        }
                    }
                }
                col
            };
            for i in 0..3 {
                out[[i, r, c]] = color[i].clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Rasterize and shade one complete training sample for `seed`.
/// ```
/// use gis_forge::gbuffer::{validate_sample, MaterialPalette};
/// use gis_forge::scene::{render_sample, SceneConfig};
///
/// let palette = MaterialPalette::default_six();
/// let sample = render_sample(11, &SceneConfig::default(), &palette).unwrap();
/// assert!(validate_sample(&sample, &palette, Some(4)).unwrap().is_empty());
/// let target = sample.target.as_ref().unwrap();
/// assert!(target.iter().all(|&v| (0.0..=1.0).contains(&v)));
/// ```
pub fn render_sample(
    seed: u64,
    config: &SceneConfig,
    palette: &MaterialPalette,
) -> Result<GBufferSample, GisError> {
    let scene = sample_scene(seed, config, palette)?;
    let mut gb = rasterize_gbuffer(&scene, palette);
    gb.target = Some(shade_target(&scene, &gb));
    Ok(gb)
}

/// Per-sample seed derivation: deterministic, recorded in the dataset
/// manifest so any sample can be regenerated alone.
pub fn sample_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ index.wrapping_mul(0xa0761d6478bd642f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gbuffer::validate_sample;
    use approx::assert_abs_diff_eq;

    fn on_axis_sphere() -> SceneSpec {
        let palette = MaterialPalette::default_six();
        let mut scene = sample_scene(0, &SceneConfig::default(), &palette).unwrap();
        scene.primitives =
            vec![Primitive { shape: Shape::Sphere { radius: 1.0 }, center: [0.0, 0.0, -3.0], material_id: 0 }];
        // Odd image size puts one pixel center exactly on the optical axis.
        scene.camera.height = 65;
        scene.camera.width = 65;
        scene.camera.focal = 65.0;
        scene
    }

    #[test]
    fn same_seed_same_scene() {
        let palette = MaterialPalette::default_six();
        let cfg = SceneConfig::default();
        let a = sample_scene(42, &cfg, &palette).unwrap();
        let b = sample_scene(42, &cfg, &palette).unwrap();
        assert_eq!(a, b);
        let c = sample_scene(43, &cfg, &palette).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_range_rejected() {
        let palette = MaterialPalette::default_six();
        let cfg = SceneConfig { size: (0.8, 0.2), ..SceneConfig::default() };
        assert!(matches!(sample_scene(0, &cfg, &palette), Err(GisError::Config(_))));
    }

    #[test]
    fn exactly_one_primitive_range() {
        let palette = MaterialPalette::default_six();
        let cfg = SceneConfig { primitive_count: (1, 1), ..SceneConfig::default() };
        for seed in 0..20 {
            assert_eq!(sample_scene(seed, &cfg, &palette).unwrap().primitives.len(), 1);
        }
    }

    #[test]
    fn all_materials_appear_over_seed_sweep() {
        let palette = MaterialPalette::default_six();
        let cfg = SceneConfig::default();
        let mut seen = vec![false; palette.len()];
        for seed in 0..1000u64 {
            for p in sample_scene(seed, &cfg, &palette).unwrap().primitives {
                seen[p.material_id] = true;
            }
        }
        assert!(seen.iter().all(|&s| s), "materials seen: {seen:?}");
    }

    #[test]
    fn light_comes_from_upper_hemisphere() {
        let palette = MaterialPalette::default_six();
        let cfg = SceneConfig::default();
        for seed in 0..200 {
            let s = sample_scene(seed, &cfg, &palette).unwrap();
            assert!(s.light.direction[1] > 0.0);
            assert_abs_diff_eq!(dot(s.light.direction, s.light.direction), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn on_axis_sphere_center_pixel() {
        let scene = on_axis_sphere();
        let palette = MaterialPalette::default_six();
        let gb = rasterize_gbuffer(&scene, &palette);
        let (r, c) = (scene.camera.height / 2, scene.camera.width / 2);
        assert_eq!(gb.mask[[r, c]], 1.0);
        // Camera-facing normal is (0,0,1) up to the half-pixel ray offset.
        assert!(gb.normals[[2, r, c]] > 1.0 - 1e-12);
        // Depth equals distance(camera, center) - radius at the silhouette center.
        assert_abs_diff_eq!(gb.depth[[r, c]], 2.0, epsilon = 1e-12);
        // A corner pixel is background.
        assert_eq!(gb.mask[[0, 0]], 0.0);
        assert_eq!(gb.depth[[0, 0]], 0.0);
        assert_eq!(gb.normals[[0, 0, 0]], 0.0);
    }

    #[test]
    fn rasterized_samples_validate() {
        let palette = MaterialPalette::default_six();
        let cfg = SceneConfig::default();
        for seed in 0..25 {
            let scene = sample_scene(seed, &cfg, &palette).unwrap();
            let gb = rasterize_gbuffer(&scene, &palette);
            let report = validate_sample(&gb, &palette, Some(4)).unwrap();
            assert!(report.is_empty(), "seed {seed}: {report}");
        }
    }

    #[test]
    fn lambert_extremes() {
        let palette = MaterialPalette::default_six();
        let mut scene = on_axis_sphere();
        scene.light = Light { direction: [0.0, 0.0, 1.0], intensity: 1.0, ambient: 0.0 };
        scene.physics[0].specular_strength = 0.0;
        let gb = rasterize_gbuffer(&scene, &palette);
        let shaded = shade_target(&scene, &gb);
        let (r, c) = (scene.camera.height / 2, scene.camera.width / 2);
        // Light parallel to the normal: pixel = albedo.
        for i in 0..3 {
            assert_abs_diff_eq!(shaded[[i, r, c]], scene.physics[0].albedo[i], epsilon = 1e-3);
        }
        // Light perpendicular to the normal: ambient * albedo (here 0).
        scene.light.direction = [1.0, 0.0, 0.0];
        let shaded = shade_target(&scene, &gb);
        // At the central pixel n ~ (0,0,1) so n.l ~ 0.
        assert!(shaded[[0, r, c]] < 1e-2);
    }

    #[test]
    fn glass_composites_over_background() {
        let palette = MaterialPalette::default_six();
        let mut scene = on_axis_sphere();
        scene.primitives[0].material_id = 5; // glass, alpha 0.4
        scene.light = Light { direction: [0.0, 0.0, 1.0], intensity: 1.0, ambient: 0.0 };
        scene.physics[5].specular_strength = 0.0;
        let gb = rasterize_gbuffer(&scene, &palette);
        let shaded = shade_target(&scene, &gb);
        let (r, c) = (scene.camera.height / 2, scene.camera.width / 2);
        for i in 0..3 {
            let s = scene.physics[5].albedo[i]; // n.l = 1 at center
            let b = gb.background[[i, r, c]];
            let expect = 0.4 * s + 0.6 * b;
            assert_abs_diff_eq!(shaded[[i, r, c]], expect, epsilon = 1e-3);
        }
    }

    #[test]
    fn shadow_darkens_ground_only() {
        let palette = MaterialPalette::default_six();
        let mut scene = on_axis_sphere();
        // Light nearly overhead so the sphere casts onto the ground below.
        scene.light = Light { direction: normalize([0.05, 1.0, 0.0]), intensity: 1.0, ambient: 0.2 };
        let gb = rasterize_gbuffer(&scene, &palette);
        let shaded = shade_target(&scene, &gb);
        let (h, w) = (scene.camera.height, scene.camera.width);
        let mut shadowed = 0usize;
        for r in 0..h {
            for c in 0..w {
                if gb.mask[[r, c]] > 0.5 {
                    continue;
                }
                let bg = backdrop_color(&scene, r, c);
                for i in 0..3 {
                    let t = shaded[[i, r, c]];
                    assert!(t <= bg[i] + 1e-12, "target brighter than backdrop at ({r},{c})");
                    if (t - bg[i] * scene.backdrop.shadow_factor).abs() < 1e-9 && bg[i] > 0.0 {
                        shadowed += 1;
                    }
                }
            }
        }
        assert!(shadowed > 0, "expected at least one shadowed ground pixel");
    }

    #[test]
    fn shadow_factor_from_independent_ray_oracle() {
        let palette = MaterialPalette::default_six();
        let mut scene = on_axis_sphere();
        scene.light = Light { direction: normalize([0.1, 1.0, 0.05]), intensity: 1.0, ambient: 0.2 };
        let gb = rasterize_gbuffer(&scene, &palette);
        let shaded = shade_target(&scene, &gb);
        let cam = &scene.camera;
        // Independent check: march every background pixel, recompute the
        // ground hit and the occlusion test from scratch.
        for r in 0..cam.height {
            for c in 0..cam.width {
                if gb.mask[[r, c]] > 0.5 {
                    continue;
                }
                let d = pixel_ray(cam, r, c);
                let mut expect_shadow = false;
                if d[1] < 0.0 {
                    let t = (scene.backdrop.ground_y - cam.position[1]) / d[1];
                    if t > 0.0 {
                        let p = add_scaled(cam.position, d, t);
                        // Brute-force sample points along the light ray.
                        let sphere = &scene.primitives[0];
                        let (ctr, rad) = match sphere.shape {
                            Shape::Sphere { radius } => (sphere.center, radius),
                            _ => unreachable!(),
                        };
                        for step in 1..4000 {
                            let q = add_scaled(p, scene.light.direction, step as f64 * 0.005);
                            if dot(sub(q, ctr), sub(q, ctr)) <= rad * rad {
                                expect_shadow = true;
                                break;
                            }
                        }
                    }
                }
                let bg = backdrop_color(&scene, r, c);
                let expected = if expect_shadow { bg[0] * scene.backdrop.shadow_factor } else { bg[0] };
                assert_abs_diff_eq!(shaded[[0, r, c]], expected.clamp(0.0, 1.0), epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn reshading_is_deterministic() {
        let palette = MaterialPalette::default_six();
        let cfg = SceneConfig::default();
        let scene = sample_scene(9, &cfg, &palette).unwrap();
        let gb = rasterize_gbuffer(&scene, &palette);
        let a = shade_target(&scene, &gb);
        let b = shade_target(&scene, &gb);
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn lighting_changes_target_for_fixed_geometry() {
        // Holding geometry fixed and re-sampling only the light moves the
        // foreground mean intensity; this is what the K-output diversity
        // objective has to capture.
        let palette = MaterialPalette::default_six();
        let cfg = SceneConfig::default();
        let base = sample_scene(5, &cfg, &palette).unwrap();
        let gb = rasterize_gbuffer(&base, &palette);
        let mut means = Vec::new();
        for seed in [100u64, 101, 102, 103] {
            let other = sample_scene(seed, &cfg, &palette).unwrap();
            let mut scene = base.clone();
            scene.light = other.light;
            let shaded = shade_target(&scene, &gb);
            let mut sum = 0.0;
            let mut n = 0.0;
            for r in 0..gb.height() {
                for c in 0..gb.width() {
                    if gb.mask[[r, c]] > 0.5 {
                        for i in 0..3 {
                            sum += shaded[[i, r, c]];
                        }
                        n += 3.0;
                    }
                }
            }
            means.push(sum / n);
        }
        let spread = means.iter().cloned().fold(f64::MIN, f64::max)
            - means.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread > 0.02, "lighting spread too small: {means:?}");
    }
}
