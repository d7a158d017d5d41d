//! Synthetic ground truth: analytic scenes of constant-density boxes and
//! spheres, shaken exposures, blurry frames and threshold-crossing events.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blur_event::EventRecord;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::lie::{self, even_timestamps, PoseSE3, TangentSE3, Trajectory};
use crate::render::{pixel_ray, to_gray, to_log, Intrinsics, Ray};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Box { min: [f64; 3], max: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
}

impl Shape {
    /// Parameter interval `[t0, t1]` where the ray is inside the shape.
    pub fn intersect(&self, ray: &Ray) -> Option<(f64, f64)> {
        let (o, d) = (ray.origin, ray.direction);
        match *self {
            Shape::Box { min, max } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for a in 0..3 {
                    if d[a] == 0.0 {
                        if o[a] < min[a] || o[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let (mut ta, mut tb) = ((min[a] - o[a]) / d[a], (max[a] - o[a]) / d[a]);
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    t0 = t0.max(ta);
                    t1 = t1.min(tb);
                }
                (t0 < t1).then_some((t0, t1))
            }
            Shape::Sphere { center, radius } => {
                let oc = o - Vector3::from(center);
                let b = oc.dot(&d);
                let disc = b * b - (oc.norm_squared() - radius * radius);
                if disc <= 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                Some((-b - s, -b + s))
            }
        }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        match *self {
            Shape::Box { min, max } => (0..3).all(|a| p[a] >= min[a] && p[a] <= max[a]),
            Shape::Sphere { center, radius } => (p - Vector3::from(center)).norm() <= radius,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub density: f64,
    pub albedo: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProceduralScene {
    pub primitives: Vec<Primitive>,
    /// Axis-aligned box around the foreground content.
    pub bounds: ([f64; 3], [f64; 3]),
}

impl ProceduralScene {
    pub fn diameter(&self) -> f64 {
        (Vector3::from(self.bounds.1) - Vector3::from(self.bounds.0)).norm()
    }

    /// Density and color at a point; overlapping media add densities and mix
    /// albedos in proportion to them.
    pub fn sample(&self, p: &Vector3<f64>) -> (f64, [f64; 3]) {
        let mut sigma = 0.0;
        let mut c = [0.0; 3];
        for prim in self.primitives.iter().filter(|q| q.shape.contains(p)) {
            sigma += prim.density;
            for k in 0..3 {
                c[k] += prim.density * prim.albedo[k];
            }
        }
        if sigma > 0.0 {
            c.iter_mut().for_each(|x| *x /= sigma);
        }
        (sigma, c)
    }

    /// Exact emission-absorption integral over `[near, far]`, returning the
    /// color and the accumulated opacity.
    pub fn trace(&self, ray: &Ray, near: f64, far: f64) -> ([f64; 3], f64) {
        let hits: Vec<(f64, f64, &Primitive)> = self
            .primitives
            .iter()
            .filter_map(|p| {
                let (a, b) = p.shape.intersect(ray)?;
                let (a, b) = (a.max(near), b.min(far));
                (a < b).then_some((a, b, p))
            })
            .collect();
        let mut cuts: Vec<f64> = hits.iter().flat_map(|h| [h.0, h.1]).collect();
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let mut color = [0.0; 3];
        let mut optical = 0.0_f64;
        for w in cuts.windows(2) {
            let (a, b) = (w[0], w[1]);
            let mid = 0.5 * (a + b);
            let mut sigma = 0.0;
            let mut c = [0.0; 3];
            for &(t0, t1, p) in &hits {
                if t0 <= mid && mid <= t1 {
                    sigma += p.density;
                    for k in 0..3 {
                        c[k] += p.density * p.albedo[k];
                    }
                }
            }
            if sigma == 0.0 {
                continue;
            }
            let w = (-optical).exp() * (1.0 - (-sigma * (b - a)).exp());
            for k in 0..3 {
                color[k] += w * c[k] / sigma;
            }
            optical += sigma * (b - a);
        }
        (color, 1.0 - (-optical).exp())
    }

    /// Exact render of a full image together with the per-pixel opacity.
    pub fn render(&self, k: &Intrinsics, pose: &PoseSE3) -> Result<(Image, Vec<f64>)> {
        let mut img = Image::zeros(k.width, k.height);
        let mut opacity = vec![0.0; k.width * k.height];
        for y in 0..k.height {
            for x in 0..k.width {
                let (c, a) = self.trace(&pixel_ray(k, pose, (x, y))?, k.near, k.far);
                img.set(x, y, c);
                opacity[y * k.width + x] = a;
            }
        }
        Ok((img, opacity))
    }
}

/// Scene generation knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Tiles per side on the back wall.
    pub wall_tiles: usize,
    pub objects: usize,
    pub density: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { wall_tiles: 6, objects: 5, density: 60.0, seed: 7 }
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let mut c = [0.0; 3];
    c.iter_mut().for_each(|x| *x = rng.gen_range(0.1..0.9));
    c
}

/// A tiled back wall at `z ≈ −1.5` spanning every view, plus boxes and
/// spheres in front of it.
pub fn default_scene(config: &SceneConfig) -> ProceduralScene {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.density;
    let mut prims = vec![Primitive {
        shape: Shape::Box { min: [-8.0, -8.0, -2.0], max: [8.0, 8.0, -1.6] },
        density: d,
        albedo: [0.5, 0.5, 0.5],
    }];
    let n = config.wall_tiles.max(1);
    let span = 3.2;
    let tile = span / n as f64;
    for i in 0..n {
        for j in 0..n {
            let x0 = -span / 2.0 + i as f64 * tile;
            let y0 = -span / 2.0 + j as f64 * tile;
            prims.push(Primitive {
                shape: Shape::Box { min: [x0, y0, -1.6], max: [x0 + tile, y0 + tile, -1.5] },
                density: d,
                albedo: random_color(&mut rng),
            });
        }
    }
    for o in 0..config.objects {
        let center = [rng.gen_range(-1.0..1.0), rng.gen_range(-0.9..0.9), rng.gen_range(-1.0..0.8)];
        let size = rng.gen_range(0.2..0.4);
        let shape = if o % 2 == 0 {
            let h = [size, size * rng.gen_range(0.6..1.4), size * rng.gen_range(0.6..1.4)];
            Shape::Box {
                min: [center[0] - h[0], center[1] - h[1], center[2] - h[2]],
                max: [center[0] + h[0], center[1] + h[1], center[2] + h[2]],
            }
        } else {
            Shape::Sphere { center, radius: size }
        };
        prims.push(Primitive { shape, density: d, albedo: random_color(&mut rng) });
    }
    ProceduralScene { primitives: prims, bounds: ([-1.6, -1.6, -2.0], [1.6, 1.6, 1.2]) }
}

/// Continuous camera motion over one exposure: `base · exp(δ(s(τ)))` with
/// `τ` the exposure fraction, `s` a speed-warped time and `δ` a polynomial
/// plus sinusoid in camera-frame tangent coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShakeTrajectory {
    pub base: [f64; 12],
    pub exposure: (f64, f64),
    pub linear: [f64; 6],
    pub quadratic: [f64; 6],
    pub sine: [f64; 6],
    pub frequency: f64,
    pub phase: f64,
    /// Speed modulation depth in `[0, 1)`; zero means constant speed.
    pub speed_change: f64,
}

impl ShakeTrajectory {
    pub fn stationary(base: PoseSE3, exposure: (f64, f64)) -> Self {
        Self {
            base: base.to_row_major(),
            exposure,
            linear: [0.0; 6],
            quadratic: [0.0; 6],
            sine: [0.0; 6],
            frequency: 0.0,
            phase: 0.0,
            speed_change: 0.0,
        }
    }

    /// Warped time `s(τ) = τ − α·sin(2πτ)/(2π)`: monotone for `α < 1`, with
    /// slow ends and a fast middle.
    pub fn warp(&self, tau: f64) -> f64 {
        use std::f64::consts::TAU;
        tau - self.speed_change * (TAU * tau).sin() / TAU
    }

    pub fn tangent_at(&self, t: f64) -> TangentSE3 {
        let (a, b) = self.exposure;
        let s = self.warp(((t - a) / (b - a)).clamp(0.0, 1.0)) - 0.5;
        let wave = (std::f64::consts::TAU * self.frequency * s + self.phase).sin();
        let mut x = [0.0; 6];
        for i in 0..6 {
            x[i] = self.linear[i] * s + self.quadratic[i] * (s * s - 1.0 / 12.0) + self.sine[i] * wave;
        }
        TangentSE3::from_array(x)
    }

    pub fn pose_at(&self, t: f64) -> PoseSE3 {
        let base = PoseSE3::from_row_major(&self.base).expect("12 numbers");
        base.compose(&lie::exp(&self.tangent_at(t)))
    }

    pub fn mid_pose(&self) -> PoseSE3 {
        self.pose_at(0.5 * (self.exposure.0 + self.exposure.1))
    }

    /// Poses at `p` evenly spaced exposure times (the midpoint for `p = 1`).
    pub fn sample(&self, p: usize) -> Trajectory {
        let ts = even_timestamps(self.exposure.0, self.exposure.1, p);
        let poses = ts.iter().map(|&t| self.pose_at(t)).collect();
        Trajectory::new(ts, poses).expect("even timestamps increase")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShakeConfig {
    /// Net camera-frame translation over the exposure (scene units).
    pub translation: f64,
    /// Net rotation over the exposure (radians).
    pub rotation: f64,
    /// Relative size of the curved and oscillating parts.
    pub wobble: f64,
    pub speed_change: f64,
}

impl Default for ShakeConfig {
    fn default() -> Self {
        Self { translation: 0.25, rotation: 0.03, wobble: 0.3, speed_change: 0.5 }
    }
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

pub fn random_shake(base: PoseSE3, exposure: (f64, f64), cfg: &ShakeConfig, rng: &mut ChaCha8Rng) -> ShakeTrajectory {
    let mut pack = |rot: f64, trans: f64| -> [f64; 6] {
        let (w, v) = (random_unit(rng) * rot, random_unit(rng) * trans);
        [w.x, w.y, w.z, v.x, v.y, v.z]
    };
    let linear = pack(cfg.rotation, cfg.translation);
    let quadratic = pack(cfg.rotation * cfg.wobble * 2.0, cfg.translation * cfg.wobble * 2.0);
    let sine = pack(cfg.rotation * cfg.wobble * 0.25, cfg.translation * cfg.wobble * 0.25);
    ShakeTrajectory {
        base: base.to_row_major(),
        exposure,
        linear,
        quadratic,
        sine,
        frequency: rng.gen_range(1.0..2.0),
        phase: rng.gen_range(0.0..std::f64::consts::TAU),
        speed_change: cfg.speed_change,
    }
}

/// Blurry frame, event stream and the sharp frame at mid-exposure.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub blurry: Image,
    pub events: Vec<EventRecord>,
    pub sharp_mid: Image,
}

/// Integrates `substeps` exact renders into a blurry frame and emits an event
/// whenever a pixel's log intensity moves a threshold away from its value at
/// the previous event. Event times interpolate linearly inside a substep.
/// `noise_theta` is the standard deviation of a fixed per-pixel threshold offset.
pub fn synthesize_observation(
    scene: &ProceduralScene,
    k: &Intrinsics,
    traj: &ShakeTrajectory,
    substeps: usize,
    theta: f64,
    noise_theta: f64,
    seed: u64,
) -> Result<Observation> {
    if substeps < 1 {
        return Err(Error::Invalid("need at least one substep".into()));
    }
    if !(theta > 0.0 && noise_theta >= 0.0) {
        return Err(Error::Invalid(format!("bad event threshold {theta} ± {noise_theta}")));
    }
    let (t0, t1) = traj.exposure;
    let m = substeps;
    let time = |f: f64| t0 + (t1 - t0) * f;
    let mid_frames: Vec<Image> = (0..m)
        .into_par_iter()
        .map(|i| Ok(scene.render(k, &traj.pose_at(time((i as f64 + 0.5) / m as f64)))?.0))
        .collect::<Result<_>>()?;
    let mut acc = vec![0.0; k.width * k.height * 3];
    for f in &mid_frames {
        acc.iter_mut().zip(&f.data).for_each(|(a, v)| *a += v);
    }
    acc.iter_mut().for_each(|a| *a /= m as f64);
    let blurry = Image::new(k.width, k.height, acc)?;

    let logs: Vec<Vec<f64>> = (0..=m)
        .into_par_iter()
        .map(|i| {
            let img = scene.render(k, &traj.pose_at(time(i as f64 / m as f64)))?.0;
            Ok(img.data.chunks(3).map(|c| to_log(to_gray([c[0], c[1], c[2]]))).collect())
        })
        .collect::<Result<_>>()?;
    let npx = k.width * k.height;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let thresholds: Vec<f64> = if noise_theta > 0.0 {
        let normal = Normal::new(0.0, noise_theta).expect("positive deviation");
        (0..npx).map(|_| (theta + normal.sample(&mut rng)).max(0.01 * theta)).collect()
    } else {
        vec![theta; npx]
    };
    let mut events = Vec::new();
    for px in 0..npx {
        let th = thresholds[px];
        let mut reference = logs[0][px];
        for i in 0..m {
            let (a, b) = (logs[i][px], logs[i + 1][px]);
            loop {
                let (target, polarity) = if b >= reference + th {
                    (reference + th, 1)
                } else if b <= reference - th {
                    (reference - th, -1)
                } else {
                    break;
                };
                let f = if b != a { ((target - a) / (b - a)).clamp(0.0, 1.0) } else { 1.0 };
                events.push(EventRecord {
                    t: time((i as f64 + f) / m as f64),
                    x: px % k.width,
                    y: px / k.width,
                    polarity,
                });
                reference = target;
            }
        }
    }
    events.sort_by(|a, b| a.t.total_cmp(&b.t).then((a.y, a.x).cmp(&(b.y, b.x))));
    let sharp_mid = scene.render(k, &traj.mid_pose())?.0;
    Ok(Observation { blurry, events, sharp_mid })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub views: usize,
    pub novel_views: usize,
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view in degrees.
    pub fov_deg: f64,
    pub near: f64,
    pub far: f64,
    /// Camera distance from the scene centre.
    pub radius: f64,
    /// Half-range of camera azimuths in degrees.
    pub azimuth_deg: f64,
    pub exposure: f64,
    pub substeps: usize,
    pub theta: f64,
    pub noise_theta: f64,
    /// Coarse initial pose error bounds: rotation (radians), translation as a
    /// fraction of the scene diameter.
    pub init_rotation: f64,
    pub init_translation_frac: f64,
    pub scene: SceneConfig,
    pub shake: ShakeConfig,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            views: 8,
            novel_views: 2,
            width: 64,
            height: 64,
            fov_deg: 45.0,
            near: 2.0,
            far: 10.0,
            radius: 4.0,
            azimuth_deg: 20.0,
            exposure: 0.1,
            substeps: 100,
            theta: 0.3,
            noise_theta: 0.0,
            init_rotation: 0.05,
            init_translation_frac: 0.02,
            scene: SceneConfig::default(),
            shake: ShakeConfig::default(),
            seed: 42,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Invalid(what.to_string()));
        if self.views == 0 {
            return bad("views: need at least one training view");
        }
        if self.width == 0 || self.height == 0 {
            return bad("width/height: must be positive");
        }
        if self.substeps < 50 {
            return bad("substeps: need at least 50 for faithful event timing");
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return bad("fov_deg: must lie in (0, 180)");
        }
        if !(self.exposure > 0.0 && self.theta > 0.0 && self.noise_theta >= 0.0) {
            return bad("exposure/theta/noise_theta: must be positive");
        }
        self.intrinsics().validate()
    }

    pub fn intrinsics(&self) -> Intrinsics {
        let focal = 0.5 * self.width as f64 / (0.5 * self.fov_deg.to_radians()).tan();
        Intrinsics::centered(self.width, self.height, focal, self.near, self.far)
    }

    /// Camera on the view arc at azimuth fraction `f ∈ [0, 1]`.
    fn arc_pose(&self, f: f64, elevation: f64) -> PoseSE3 {
        let az = (2.0 * f - 1.0) * self.azimuth_deg.to_radians();
        let eye = Vector3::new(az.sin() * elevation.cos(), elevation.sin(), az.cos() * elevation.cos()) * self.radius;
        PoseSE3::look_at(eye, Vector3::zeros(), Vector3::y())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetView {
    pub blurry: Image,
    pub events: Vec<EventRecord>,
    pub exposure: (f64, f64),
    pub shake: ShakeTrajectory,
    pub init_pose: PoseSE3,
    pub sharp_mid: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NovelView {
    pub pose: PoseSE3,
    pub image: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub intrinsics: Intrinsics,
    pub scene: ProceduralScene,
    pub views: Vec<DatasetView>,
    pub novel: Vec<NovelView>,
}

impl Dataset {
    pub fn gt_mid_poses(&self) -> Vec<PoseSE3> {
        self.views.iter().map(|v| v.shake.mid_pose()).collect()
    }
}

/// Builds the whole dataset in memory.
pub fn make_dataset(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let k = config.intrinsics();
    let scene = default_scene(&config.scene);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.views;
    let mut views = Vec::with_capacity(n);
    for v in 0..n {
        let f = if n == 1 { 0.5 } else { v as f64 / (n - 1) as f64 };
        let elevation = rng.gen_range(-0.15..0.15);
        let base = config.arc_pose(f, elevation);
        let start = v as f64 * config.exposure * 2.0;
        let exposure = (start, start + config.exposure);
        let shake = random_shake(base, exposure, &config.shake, &mut rng);
        let obs = synthesize_observation(&scene, &k, &shake, config.substeps, config.theta, config.noise_theta, rng.gen())?;
        check_coverage(&scene, &k, &shake.mid_pose(), v)?;
        let w = random_unit(&mut rng) * config.init_rotation * rng.gen_range(0.5..1.0);
        let t = random_unit(&mut rng) * config.init_translation_frac * scene.diameter() * rng.gen_range(0.5..1.0);
        let init_pose = shake.mid_pose().compose(&lie::exp(&TangentSE3::new(w, t)));
        views.push(DatasetView {
            blurry: snap_f32(obs.blurry),
            events: obs.events,
            exposure,
            shake,
            init_pose,
            sharp_mid: snap_f32(obs.sharp_mid),
        });
    }
    let mut novel = Vec::with_capacity(config.novel_views);
    for j in 0..config.novel_views {
        // Halfway between neighbouring training azimuths.
        let f = if n <= 1 { 0.25 + 0.5 * j as f64 } else { (2 * j + 1) as f64 / (2 * config.novel_views) as f64 };
        let pose = config.arc_pose(f, rng.gen_range(-0.1..0.1));
        check_coverage(&scene, &k, &pose, n + j)?;
        novel.push(NovelView { pose, image: snap_f32(scene.render(&k, &pose)?.0) });
    }
    Ok(Dataset { config: config.clone(), intrinsics: k, scene, views, novel })
}

/// Rounds to single precision so images survive a float PFM round trip unchanged.
fn snap_f32(mut img: Image) -> Image {
    img.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
    img
}

fn check_coverage(scene: &ProceduralScene, k: &Intrinsics, pose: &PoseSE3, view: usize) -> Result<()> {
    let (_, opacity) = scene.render(k, pose)?;
    let worst = opacity.iter().copied().fold(f64::INFINITY, f64::min);
    if worst <= 0.99 {
        return Err(Error::Invalid(format!("view {view}: some rays leave the scene (opacity {worst:.4})")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::{composite_weights, deltas};

    fn ray(o: [f64; 3], d: [f64; 3]) -> Ray {
        Ray { origin: Vector3::from(o), direction: Vector3::from(d).normalize(), pixel: (0, 0) }
    }

    #[test]
    fn empty_space_shows_backdrop() {
        let scene = ProceduralScene {
            primitives: vec![
                Primitive { shape: Shape::Box { min: [-9.0; 3], max: [9.0, 9.0, -5.0] }, density: 1e3, albedo: [0.2, 0.3, 0.4] },
                Primitive { shape: Shape::Sphere { center: [5.0, 5.0, 0.0], radius: 0.5 }, density: 1e3, albedo: [1.0, 0.0, 0.0] },
            ],
            bounds: ([-1.0; 3], [1.0; 3]),
        };
        let (c, a) = scene.trace(&ray([0.0; 3], [0.0, 0.0, -1.0]), 0.1, 10.0);
        assert!((a - 1.0).abs() < 1e-12);
        for (x, y) in c.iter().zip([0.2, 0.3, 0.4]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn opaque_box_shows_its_albedo() {
        let scene = ProceduralScene {
            primitives: vec![Primitive { shape: Shape::Box { min: [-1.0, -1.0, -3.0], max: [1.0, 1.0, -2.0] }, density: 100.0, albedo: [0.9, 0.1, 0.5] }],
            bounds: ([-1.0; 3], [1.0; 3]),
        };
        let (c, _) = scene.trace(&ray([0.0; 3], [0.0, 0.0, -1.0]), 0.1, 10.0);
        for (x, y) in c.iter().zip([0.9, 0.1, 0.5]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn nested_media_follow_two_segment_transmittance() {
        // Outer slab z∈[−4,−2] with σ=0.5, inner slab z∈[−3.5,−3] with σ=2 on top.
        let outer = Primitive { shape: Shape::Box { min: [-5.0, -5.0, -4.0], max: [5.0, 5.0, -2.0] }, density: 0.5, albedo: [1.0, 0.0, 0.0] };
        let inner = Primitive { shape: Shape::Box { min: [-5.0, -5.0, -3.5], max: [5.0, 5.0, -3.0] }, density: 2.0, albedo: [0.0, 1.0, 0.0] };
        let scene = ProceduralScene { primitives: vec![outer, inner], bounds: ([-1.0; 3], [1.0; 3]) };
        let (c, a) = scene.trace(&ray([0.0; 3], [0.0, 0.0, -1.0]), 0.1, 10.0);
        // Segments: [2,3] σ=.5 red; [3,3.5] σ=2.5 mix (.2 red, .8 green); [3.5,4] σ=.5 red.
        let w1 = 1.0 - (-0.5f64).exp();
        let t1 = (-0.5f64).exp();
        let w2 = t1 * (1.0 - (-1.25f64).exp());
        let t2 = (-1.75f64).exp();
        let w3 = t2 * (1.0 - (-0.25f64).exp());
        let red = w1 + 0.2 * w2 + w3;
        let green = 0.8 * w2;
        assert!((c[0] - red).abs() < 1e-12 && (c[1] - green).abs() < 1e-12 && c[2] == 0.0);
        assert!((a - (1.0 - (-2.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn quadrature_converges_to_the_exact_render() {
        let cfg = DatasetConfig { width: 16, height: 16, ..DatasetConfig::default() };
        let scene = default_scene(&cfg.scene);
        let k = cfg.intrinsics();
        let pose = cfg.arc_pose(0.3, 0.05);
        let (exact, _) = scene.render(&k, &pose).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 1024;
        let mut total = 0.0;
        for y in 0..k.height {
            for x in 0..k.width {
                let r = pixel_ray(&k, &pose, (x, y)).unwrap();
                let ls = crate::render::stratified_samples(k.near, k.far, n, &mut rng);
                let (sig, col): (Vec<f64>, Vec<[f64; 3]>) =
                    ls.iter().map(|&l| scene.sample(&(r.origin + r.direction * l))).unzip();
                let w = composite_weights(&sig, &deltas(&ls, k.far)).unwrap();
                let c: Vec<f64> = (0..3).map(|ch| w.iter().zip(&col).map(|(wi, ci)| wi * ci[ch]).sum()).collect();
                let e = exact.get(x, y);
                total += (0..3).map(|ch| (c[ch] - e[ch]).abs()).sum::<f64>();
            }
        }
        let mean = total / (3 * k.width * k.height) as f64;
        assert!(mean < 5e-3, "mean abs difference {mean}");
    }

    fn small_setup() -> (ProceduralScene, Intrinsics, ShakeTrajectory) {
        let cfg = DatasetConfig { width: 20, height: 16, ..DatasetConfig::default() };
        let scene = default_scene(&cfg.scene);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shake = random_shake(cfg.arc_pose(0.4, 0.0), (0.0, 0.1), &cfg.shake, &mut rng);
        (scene, cfg.intrinsics(), shake)
    }

    #[test]
    fn static_camera_gives_sharp_frame_and_no_events() {
        let (scene, k, shake) = small_setup();
        let still = ShakeTrajectory::stationary(shake.mid_pose(), (0.0, 0.1));
        let obs = synthesize_observation(&scene, &k, &still, 50, 0.3, 0.0, 1).unwrap();
        assert!(obs.events.is_empty());
        assert!(obs.blurry.mean_abs_diff(&obs.sharp_mid).unwrap() < 1e-15);
    }

    #[test]
    fn event_sums_track_log_change_within_one_threshold() {
        let (scene, k, shake) = small_setup();
        let theta = 0.3;
        let obs = synthesize_observation(&scene, &k, &shake, 60, theta, 0.0, 1).unwrap();
        assert!(!obs.events.is_empty());
        assert!(obs.events.windows(2).all(|w| w[0].t <= w[1].t));
        assert!(obs.events.iter().all(|e| (0.0..=0.1).contains(&e.t)));
        let log = |pose: &PoseSE3| -> Vec<f64> { scene.render(&k, pose).unwrap().0.gray().into_iter().map(to_log).collect() };
        let (l0, l1) = (log(&shake.pose_at(0.0)), log(&shake.pose_at(0.1)));
        let mut sum = vec![0.0; k.width * k.height];
        for e in &obs.events {
            sum[e.y * k.width + e.x] += f64::from(e.polarity);
        }
        for px in 0..sum.len() {
            assert!((sum[px] * theta - (l1[px] - l0[px])).abs() < theta + 1e-12);
        }
    }

    #[test]
    fn doubling_substeps_barely_changes_the_blur() {
        let (scene, k, shake) = small_setup();
        let a = synthesize_observation(&scene, &k, &shake, 50, 0.3, 0.0, 1).unwrap();
        let b = synthesize_observation(&scene, &k, &shake, 100, 0.3, 0.0, 1).unwrap();
        let d = a.blurry.mean_abs_diff(&b.blurry).unwrap();
        assert!(d < 1e-3, "{d}");
        assert!(a.blurry.mean_abs_diff(&a.sharp_mid).unwrap() > 1e-3, "shake should blur");
    }

    #[test]
    fn threshold_noise_changes_the_stream() {
        let (scene, k, shake) = small_setup();
        let a = synthesize_observation(&scene, &k, &shake, 50, 0.3, 0.0, 1).unwrap();
        let b = synthesize_observation(&scene, &k, &shake, 50, 0.3, 0.05, 1).unwrap();
        assert_ne!(a.events, b.events);
    }

    #[test]
    fn shake_warp_is_monotone_with_fixed_ends() {
        let (_, _, shake) = small_setup();
        assert_eq!(shake.warp(0.0), 0.0);
        assert!((shake.warp(1.0) - 1.0).abs() < 1e-15);
        let s: Vec<f64> = (0..=100).map(|i| shake.warp(i as f64 / 100.0)).collect();
        assert!(s.windows(2).all(|w| w[1] > w[0]));
        assert!(shake.pose_at(0.05).is_valid(1e-9));
    }

    #[test]
    fn small_dataset_is_complete() {
        let cfg = DatasetConfig { views: 3, novel_views: 2, width: 16, height: 16, substeps: 50, ..DatasetConfig::default() };
        let ds = make_dataset(&cfg).unwrap();
        assert_eq!(ds.views.len(), 3);
        assert_eq!(ds.novel.len(), 2);
        let diam = ds.scene.diameter();
        for v in &ds.views {
            let d = lie::log(&v.shake.mid_pose().inverse().compose(&v.init_pose));
            assert!(d.omega.norm() <= 0.05 + 1e-9);
            assert!(d.v.norm() <= 0.02 * diam + 1e-9);
            assert!(v.events.iter().all(|e| e.t >= v.exposure.0 && e.t <= v.exposure.1));
        }
        assert_eq!(make_dataset(&cfg).unwrap(), ds);
    }
}
