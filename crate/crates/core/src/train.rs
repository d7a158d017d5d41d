//! Joint optimization of per-view pose sets and the radiance field.
//!
//! Every learnable pose is written as `exp(ζ_i) · exp(ξ) · B` where `B` is a
//! stored base pose, `ξ` a left increment that is folded into `B` after each
//! optimizer step, and `ζ_i` an optional interpolated tangent used by the
//! linear and cubic baselines. In `full` and `noe` mode every pose owns its
//! base and increment and `ζ_i = 0`.

use std::ops::Range;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blur_event::{bin_events, EventBinGrid, EventRecord};
use crate::error::{Error, Result};
use crate::field::{FieldConfig, FieldParams};
use crate::image::Image;
use crate::lie::{self, catmull_rom_weights, even_timestamps, PoseSE3, TangentSE3, Trajectory};
use crate::optim::Adam;
use crate::render::{
    importance_from_uniforms, merge_depths, record_rays, stratified_from_uniforms, Intrinsics, LOG_EPS,
};
use crate::tape::{Tape, Tensor, Var};

/// How the `p` poses of a view are parametrized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseMode {
    /// Every pose free, blur and event losses.
    Full,
    /// Every pose free, blur loss only.
    Noe,
    /// Two free endpoints, interior poses on the geodesic between them.
    Linear,
    /// Four Catmull-Rom control poses; the exposure spans the middle segment.
    Cubic,
    /// Poses fixed at their initial values.
    Frozen,
}

impl PoseMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(PoseMode::Full),
            "noe" => Ok(PoseMode::Noe),
            "linear" => Ok(PoseMode::Linear),
            "cubic" => Ok(PoseMode::Cubic),
            "frozen" => Ok(PoseMode::Frozen),
            _ => Err(Error::Invalid(format!("unknown pose mode {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PoseMode::Full => "full",
            PoseMode::Noe => "noe",
            PoseMode::Linear => "linear",
            PoseMode::Cubic => "cubic",
            PoseMode::Frozen => "frozen",
        }
    }

    fn increments(self, p: usize) -> usize {
        match self {
            PoseMode::Full | PoseMode::Noe => p,
            PoseMode::Linear | PoseMode::Cubic => 1,
            PoseMode::Frozen => 0,
        }
    }

    fn tangents(self) -> usize {
        match self {
            PoseMode::Linear => 1,
            PoseMode::Cubic => 3,
            _ => 0,
        }
    }

    fn bases(self, p: usize) -> usize {
        match self {
            PoseMode::Linear | PoseMode::Cubic => 1,
            _ => p,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Poses per view.
    pub p: usize,
    /// Event loss weight.
    pub lambda: f64,
    /// Event threshold on log intensity.
    pub theta: f64,
    /// Depth samples per ray (the fine pass adds as many again when hierarchical).
    pub samples: usize,
    pub batch_rays: usize,
    /// Rays per tape; chunks are the unit of parallel work.
    pub chunk_rays: usize,
    pub iterations: usize,
    pub lr_field: f64,
    pub lr_pose: f64,
    /// Learning-rate multiplier reached at the last iteration (exponential schedule).
    pub lr_decay: f64,
    pub seed: u64,
    pub hierarchical: bool,
    pub mode: PoseMode,
    /// Half-width of the uniform tangent jitter that separates the initial pose copies.
    pub init_spread: f64,
    pub stratified: bool,
    /// Sum chunk gradients in a fixed order.
    pub deterministic: bool,
    pub field: FieldConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            p: 5,
            lambda: 0.005,
            theta: 0.3,
            samples: 64,
            batch_rays: 128,
            chunk_rays: 32,
            iterations: 5000,
            lr_field: 5e-4,
            lr_pose: 1e-3,
            lr_decay: 0.1,
            seed: 42,
            hierarchical: false,
            mode: PoseMode::Full,
            init_spread: 1e-3,
            stratified: true,
            deterministic: true,
            // The datasets span roughly 8 units, so shrink them into the encoding period.
            field: FieldConfig { pos_scale: 0.25, ..FieldConfig::default() },
        }
    }
}

impl TrainConfig {
    /// Event weight actually applied; `noe` and single-pose runs train without events.
    pub fn effective_lambda(&self) -> f64 {
        if self.mode == PoseMode::Noe {
            0.0
        } else {
            self.lambda
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Invalid(format!("{field}: {why}")));
        if self.p == 0 {
            return bad("p", "need at least one pose per view".into());
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda", format!("must be non-negative, got {}", self.lambda));
        }
        if self.effective_lambda() > 0.0 && self.p < 2 {
            return bad("p", "event loss needs at least two poses per view".into());
        }
        if !(self.theta > 0.0) {
            return bad("theta", format!("must be positive, got {}", self.theta));
        }
        if self.samples == 0 || self.batch_rays == 0 || self.chunk_rays == 0 {
            return bad("samples/batch_rays/chunk_rays", "must be positive".into());
        }
        if !(self.lr_field >= 0.0 && self.lr_pose >= 0.0 && self.lr_decay > 0.0) {
            return bad("learning rates", "must be non-negative with a positive decay".into());
        }
        if !(self.init_spread >= 0.0) {
            return bad("init_spread", "must be non-negative".into());
        }
        self.field.validate()
    }
}

/// One training view: blurry frame, its events and a coarse pose guess.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewObservation {
    pub intrinsics: Intrinsics,
    pub blurry: Image,
    pub events: Vec<EventRecord>,
    pub exposure: (f64, f64),
    pub init_pose: PoseSE3,
}

/// Observations with events already binned at the `p` pose timestamps.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub views: Vec<ViewObservation>,
    pub timestamps: Vec<Vec<f64>>,
    /// `None` when `p = 1`.
    pub bins: Vec<Option<EventBinGrid>>,
}

impl TrainData {
    pub fn new(views: Vec<ViewObservation>, p: usize) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::Invalid("no training views".into()));
        }
        let mut timestamps = Vec::with_capacity(views.len());
        let mut bins = Vec::with_capacity(views.len());
        for (i, v) in views.iter().enumerate() {
            v.intrinsics.validate()?;
            if (v.blurry.width, v.blurry.height) != (v.intrinsics.width, v.intrinsics.height) {
                return Err(Error::Shape(format!("view {i}: blurry image does not match intrinsics")));
            }
            if !(v.exposure.0 < v.exposure.1) {
                return Err(Error::Invalid(format!("view {i}: empty exposure interval")));
            }
            let ts = even_timestamps(v.exposure.0, v.exposure.1, p);
            bins.push(if p >= 2 {
                Some(bin_events(&v.events, &ts, v.intrinsics.width, v.intrinsics.height)?.grid)
            } else {
                None
            });
            timestamps.push(ts);
        }
        Ok(Self { views, timestamps, bins })
    }

    /// Exposure fraction of every pose timestamp of view `v`.
    pub fn fractions(&self, v: usize) -> Vec<f64> {
        let (a, b) = self.views[v].exposure;
        self.timestamps[v].iter().map(|t| (t - a) / (b - a)).collect()
    }
}

/// Identical copies of each coarse pose at evenly spaced exposure times.
pub fn init_poses(coarse: &[PoseSE3], exposures: &[(f64, f64)], p: usize) -> Result<Vec<Trajectory>> {
    if coarse.len() != exposures.len() {
        return Err(Error::Shape(format!("{} poses for {} exposures", coarse.len(), exposures.len())));
    }
    coarse
        .iter()
        .zip(exposures)
        .map(|(pose, &(a, b))| Trajectory::new(even_timestamps(a, b, p), vec![*pose; p]))
        .collect()
}

/// Stored pose parameters of one view; see the module docs for the layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPoses {
    pub bases: Vec<PoseSE3>,
    /// Linear: `[η]`, the end pose is `exp(η)·start`. Cubic: `[η0, η2, η3]`,
    /// control `k` is `exp(η_k)·anchor`.
    pub tangents: Vec<[f64; 6]>,
}

/// Tangent `ζ(u)` added on the left of the base in linear and cubic mode.
fn interp_tangent(mode: PoseMode, tangents: &[[f64; 6]], u: f64) -> TangentSE3 {
    match mode {
        PoseMode::Linear => TangentSE3::from_array(tangents[0]).scale(u),
        PoseMode::Cubic => {
            let w = catmull_rom_weights(u);
            [0, 2, 3]
                .iter()
                .zip(tangents)
                .fold(TangentSE3::zero(), |acc, (&k, t)| acc.add(&TangentSE3::from_array(*t).scale(w[k])))
        }
        _ => TangentSE3::zero(),
    }
}

impl ViewPoses {
    pub fn poses(&self, mode: PoseMode, fractions: &[f64]) -> Vec<PoseSE3> {
        match mode {
            PoseMode::Linear | PoseMode::Cubic => fractions
                .iter()
                .map(|&u| lie::exp(&interp_tangent(mode, &self.tangents, u)).compose(&self.bases[0]))
                .collect(),
            _ => self.bases.clone(),
        }
    }

    fn param_len(mode: PoseMode, p: usize) -> usize {
        6 * (mode.increments(p) + mode.tangents())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub field: FieldParams,
    pub coarse: Option<FieldParams>,
    pub poses: Vec<ViewPoses>,
    pub adam: Adam,
    pub iteration: usize,
}

/// Where each parameter block lives in the flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamLayout {
    pub field: Range<usize>,
    pub coarse: Range<usize>,
    /// Per-view pose block: increments first, then interpolation tangents.
    pub views: Vec<Range<usize>>,
    pub total: usize,
}

impl ParamLayout {
    pub fn poses(&self) -> Range<usize> {
        self.coarse.end..self.total
    }
}

impl TrainState {
    /// Fresh field(s) and the initial pose sets. Pose copies are separated by
    /// a seeded jitter of size `init_spread` (not applied in frozen mode).
    pub fn init(data: &TrainData, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let field = FieldParams::init(config.field)?;
        let coarse = if config.hierarchical {
            Some(FieldParams::init(FieldConfig { seed: config.field.seed.wrapping_add(1), ..config.field })?)
        } else {
            None
        };
        let exposures: Vec<_> = data.views.iter().map(|v| v.exposure).collect();
        let coarse_poses: Vec<_> = data.views.iter().map(|v| v.init_pose).collect();
        let trajs = init_poses(&coarse_poses, &exposures, config.p)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let spread = if config.mode == PoseMode::Frozen { 0.0 } else { config.init_spread };
        let mut jitter = || -> [f64; 6] {
            let mut a = [0.0; 6];
            if spread > 0.0 {
                a.iter_mut().for_each(|x| *x = rng.gen_range(-spread..spread));
            }
            a
        };
        let mode = config.mode;
        let poses = trajs
            .iter()
            .map(|t| {
                let start = t.poses[0];
                match mode {
                    PoseMode::Linear | PoseMode::Cubic => {
                        ViewPoses { bases: vec![start], tangents: (0..mode.tangents()).map(|_| jitter()).collect() }
                    }
                    _ => ViewPoses {
                        bases: t
                            .poses
                            .iter()
                            .map(|p| lie::exp(&TangentSE3::from_array(jitter())).compose(p))
                            .collect(),
                        tangents: Vec::new(),
                    },
                }
            })
            .collect();
        let mut state = Self { field, coarse, poses, adam: Adam::new(0), iteration: 0 };
        state.adam = Adam::new(state.layout(config).total);
        Ok(state)
    }

    pub fn layout(&self, config: &TrainConfig) -> ParamLayout {
        let nf = self.field.len();
        let nc = self.coarse.as_ref().map_or(0, FieldParams::len);
        let per_view = ViewPoses::param_len(config.mode, config.p);
        let mut off = nf + nc;
        let views = self
            .poses
            .iter()
            .map(|_| {
                let r = off..off + per_view;
                off += per_view;
                r
            })
            .collect();
        ParamLayout { field: 0..nf, coarse: nf..nf + nc, views, total: off }
    }

    /// Flat parameter vector with zero increments.
    pub fn params(&self, config: &TrainConfig) -> Vec<f64> {
        let layout = self.layout(config);
        let mut out = Vec::with_capacity(layout.total);
        out.extend_from_slice(&self.field.data);
        if let Some(c) = &self.coarse {
            out.extend_from_slice(&c.data);
        }
        for vp in &self.poses {
            out.extend(std::iter::repeat_n(0.0, 6 * config.mode.increments(config.p)));
            for t in &vp.tangents {
                out.extend_from_slice(t);
            }
        }
        out
    }

    /// Writes `flat` back, folding pose increments into their bases.
    pub fn apply_params(&mut self, flat: &[f64], config: &TrainConfig) -> Result<()> {
        let layout = self.layout(config);
        assert_eq!(flat.len(), layout.total, "parameter vector length");
        if let Some(i) = flat.iter().position(|v| !v.is_finite()) {
            return Err(Error::non_finite("parameter update", format!("entry {i} of {}", flat.len())));
        }
        self.field.data.copy_from_slice(&flat[layout.field.clone()]);
        if let Some(c) = &mut self.coarse {
            c.data.copy_from_slice(&flat[layout.coarse.clone()]);
        }
        let inc = config.mode.increments(config.p);
        for (vp, range) in self.poses.iter_mut().zip(&layout.views) {
            let block = &flat[range.clone()];
            for (j, base) in vp.bases.iter_mut().enumerate().take(inc) {
                let xi = &block[6 * j..6 * j + 6];
                if xi.iter().any(|&x| x != 0.0) {
                    *base = lie::exp(&TangentSE3::from_slice(xi)).compose(base);
                    if base.orthonormality_error() > 1e-12 {
                        *base = base.orthonormalized();
                    }
                }
            }
            for (j, t) in vp.tangents.iter_mut().enumerate() {
                t.copy_from_slice(&block[6 * (inc + j)..6 * (inc + j) + 6]);
            }
        }
        Ok(())
    }

    pub fn trajectories(&self, data: &TrainData, config: &TrainConfig) -> Result<Vec<Trajectory>> {
        self.poses
            .iter()
            .enumerate()
            .map(|(v, vp)| Trajectory::new(data.timestamps[v].clone(), vp.poses(config.mode, &data.fractions(v))))
            .collect()
    }

    /// Root mean square of `‖log(T · T_init⁻¹)‖` over all learnable poses.
    pub fn pose_drift(&self, data: &TrainData, config: &TrainConfig) -> f64 {
        let mut acc = 0.0;
        let mut n = 0usize;
        for (v, vp) in self.poses.iter().enumerate() {
            let inv = data.views[v].init_pose.inverse();
            for pose in vp.poses(config.mode, &data.fractions(v)) {
                acc += lie::log(&pose.compose(&inv)).to_vector6().norm_squared();
                n += 1;
            }
        }
        (acc / n as f64).sqrt()
    }
}

/// One sampled pixel of one view with its depth-sampling draws.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySample {
    pub view: usize,
    pub pixel: (usize, usize),
    /// Position of each stratified depth inside its bin.
    pub strata: Vec<f64>,
    /// Sorted quantiles for importance resampling (hierarchical mode only).
    pub quantiles: Vec<f64>,
}

/// Pixels drawn uniformly over all views for iteration `iteration`.
pub fn sample_batch(data: &TrainData, config: &TrainConfig, iteration: usize) -> Vec<RaySample> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1 + iteration as u64);
    let n = config.samples;
    (0..config.batch_rays)
        .map(|_| {
            let view = rng.gen_range(0..data.views.len());
            let k = &data.views[view].intrinsics;
            let pixel = (rng.gen_range(0..k.width), rng.gen_range(0..k.height));
            let strata = if config.stratified { (0..n).map(|_| rng.gen::<f64>()).collect() } else { vec![0.5; n] };
            let quantiles = if config.hierarchical {
                let mut q: Vec<f64> = if config.stratified {
                    (0..n).map(|_| rng.gen::<f64>()).collect()
                } else {
                    (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect()
                };
                q.sort_by(f64::total_cmp);
                q
            } else {
                Vec::new()
            };
            RaySample { view, pixel, strata, quantiles }
        })
        .collect()
}

/// Loss terms of one batch; `total = λ·event + blur_fine + blur_coarse`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub blur_fine: f64,
    pub blur_coarse: f64,
    pub event: f64,
}

impl LossBreakdown {
    fn accumulate(&mut self, o: &LossBreakdown) {
        self.total += o.total;
        self.blur_fine += o.blur_fine;
        self.blur_coarse += o.blur_coarse;
        self.event += o.event;
    }

    pub fn blur(&self) -> f64 {
        self.blur_fine + self.blur_coarse
    }
}

struct ChunkOut {
    loss: LossBreakdown,
    grad: Vec<f64>,
    signature: u64,
}

/// Loss, gradient and the ReLU-piece signature of one batch evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchEval {
    pub loss: LossBreakdown,
    pub grad: Vec<f64>,
    /// Changes whenever any recorded ReLU flips side; finite differences use
    /// it to avoid straddling kinks.
    pub signature: u64,
}

/// Batch loss and its gradient with respect to every entry of `params` (a
/// vector laid out as [`TrainState::layout`]). Pose increments in `params`
/// are applied on top of the stored bases.
pub fn loss_and_grad(
    data: &TrainData,
    config: &TrainConfig,
    state: &TrainState,
    batch: &[RaySample],
    params: &[f64],
) -> Result<(LossBreakdown, Vec<f64>)> {
    let e = batch_eval(data, config, state, batch, params)?;
    Ok((e.loss, e.grad))
}

/// [`loss_and_grad`] plus the kink signature.
pub fn batch_eval(
    data: &TrainData,
    config: &TrainConfig,
    state: &TrainState,
    batch: &[RaySample],
    params: &[f64],
) -> Result<BatchEval> {
    let layout = state.layout(config);
    assert_eq!(params.len(), layout.total, "parameter vector length");
    let fine = FieldParams::from_parts(config.field, params[layout.field.clone()].to_vec())?;
    let coarse = match &state.coarse {
        Some(c) => Some(FieldParams::from_parts(c.config, params[layout.coarse.clone()].to_vec())?),
        None => None,
    };
    let mut chunks: Vec<(usize, Vec<&RaySample>)> = Vec::new();
    for v in 0..data.views.len() {
        let rays: Vec<&RaySample> = batch.iter().filter(|r| r.view == v).collect();
        for c in rays.chunks(config.chunk_rays) {
            chunks.push((v, c.to_vec()));
        }
    }
    let ctx = ChunkContext { data, config, state, params, layout: &layout, fine: &fine, coarse: coarse.as_ref(), batch: batch.len() };
    let mut loss = LossBreakdown::default();
    let mut grad = vec![0.0; layout.total];
    let mut signature = 0u64;
    // Order-independent so both reduction paths agree.
    let mix = |j: usize, s: u64| s.rotate_left((j % 64) as u32).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    if config.deterministic {
        let outs: Vec<ChunkOut> = chunks.par_iter().map(|(v, rays)| ctx.chunk(*v, rays)).collect::<Result<_>>()?;
        for (j, o) in outs.into_iter().enumerate() {
            loss.accumulate(&o.loss);
            grad.iter_mut().zip(&o.grad).for_each(|(g, x)| *g += x);
            signature = signature.wrapping_add(mix(j, o.signature));
        }
    } else {
        let acc = Mutex::new((loss, grad, signature));
        chunks.par_iter().enumerate().try_for_each(|(j, (v, rays))| -> Result<()> {
            let o = ctx.chunk(*v, rays)?;
            let mut guard = acc.lock().expect("accumulator lock");
            guard.0.accumulate(&o.loss);
            guard.1.iter_mut().zip(&o.grad).for_each(|(g, x)| *g += x);
            guard.2 = guard.2.wrapping_add(mix(j, o.signature));
            Ok(())
        })?;
        (loss, grad, signature) = acc.into_inner().expect("accumulator lock");
    }
    if !loss.total.is_finite() {
        return Err(Error::non_finite("loss", format!("{loss:?}")));
    }
    Ok(BatchEval { loss, grad, signature })
}

struct ChunkContext<'a> {
    data: &'a TrainData,
    config: &'a TrainConfig,
    state: &'a TrainState,
    params: &'a [f64],
    layout: &'a ParamLayout,
    fine: &'a FieldParams,
    coarse: Option<&'a FieldParams>,
    batch: usize,
}

impl ChunkContext<'_> {
    /// World-frame copies of `cam_points` under pose `i` of view `v`.
    fn record_pose(&self, tape: &mut Tape, v: usize, i: usize, u: f64, cam_points: &[nalgebra::Vector3<f64>]) -> Var {
        let mode = self.config.mode;
        let vp = &self.state.poses[v];
        let block = self.layout.views[v].start;
        let base_idx = if mode.bases(self.config.p) == 1 { 0 } else { i };
        let base = vp.bases[base_idx];
        let pts: Vec<f64> = cam_points.iter().flat_map(|p| base.act(p).as_slice().to_vec()).collect();
        let mut world = tape.constant(Tensor::new(cam_points.len(), 3, pts));
        if mode == PoseMode::Frozen {
            return world;
        }
        let inc = mode.increments(self.config.p);
        let xi_off = block + 6 * base_idx;
        let xi = tape.param(Tensor::row(self.params[xi_off..xi_off + 6].to_vec()), xi_off);
        world = tape.se3_act(xi, world);
        if mode.tangents() == 0 {
            return world;
        }
        let weights: Vec<f64> = match mode {
            PoseMode::Linear => vec![u],
            _ => {
                let w = catmull_rom_weights(u);
                vec![w[0], w[2], w[3]]
            }
        };
        let mut zeta: Option<Var> = None;
        for (j, w) in weights.iter().enumerate() {
            let off = block + 6 * (inc + j);
            let eta = tape.param(Tensor::row(self.params[off..off + 6].to_vec()), off);
            let term = tape.scale(eta, *w);
            zeta = Some(match zeta {
                Some(z) => tape.add(z, term),
                None => term,
            });
        }
        tape.se3_act(zeta.expect("at least one tangent"), world)
    }

    fn chunk(&self, v: usize, rays: &[&RaySample]) -> Result<ChunkOut> {
        let cfg = self.config;
        let view = &self.data.views[v];
        let k = &view.intrinsics;
        let (p, q, n) = (cfg.p, rays.len(), cfg.samples);
        let mut tape = Tape::new(self.layout.total);
        let mut cam = vec![nalgebra::Vector3::zeros()];
        cam.extend(rays.iter().map(|r| k.camera_direction(r.pixel.0, r.pixel.1)));
        let fractions = self.data.fractions(v);
        let mut origins = Vec::with_capacity(p);
        let mut dirs = Vec::with_capacity(p);
        for (i, &u) in fractions.iter().enumerate() {
            let world = self.record_pose(&mut tape, v, i, u, &cam);
            let o = tape.gather(world, vec![0; q]);
            let tip = tape.gather(world, (1..=q).collect());
            origins.push(o);
            dirs.push(tape.sub(tip, o));
        }
        // All p poses go through the field in one pose-major batch.
        let origins = tape.concat_rows(&origins);
        let dirs = tape.concat_rows(&dirs);
        let strat: Vec<Vec<f64>> = rays.iter().map(|r| stratified_from_uniforms(k.near, k.far, &r.strata)).collect();
        let tiled = |per_ray: &[Vec<f64>]| -> Vec<f64> { (0..p).flat_map(|_| per_ray.iter().flatten().copied()).collect() };
        let obs: Vec<f64> = rays.iter().flat_map(|r| view.blurry.get(r.pixel.0, r.pixel.1)).collect();
        let obs = tape.constant(Tensor::new(q, 3, obs));
        let blur_norm = 1.0 / (3 * self.batch) as f64;

        let mut blur_coarse = None;
        let fine_depths = match self.coarse {
            None => strat.clone(),
            Some(coarse) => {
                let off = Some(self.layout.coarse.start);
                let rec = record_rays(&mut tape, coarse, off, origins, dirs, &tiled(&strat), n, k.far)?;
                blur_coarse = Some(self.blur_term(&mut tape, rec.color, obs, q, blur_norm));
                rays.iter()
                    .enumerate()
                    .map(|(j, r)| {
                        let mut w = vec![0.0; n];
                        for i in 0..p {
                            let row = &rec.weights[(i * q + j) * n..(i * q + j + 1) * n];
                            w.iter_mut().zip(row).for_each(|(a, b)| *a += b / p as f64);
                        }
                        merge_depths(&strat[j], &importance_from_uniforms(&strat[j], &w, k.near, k.far, &r.quantiles))
                    })
                    .collect()
            }
        };
        let nf = fine_depths[0].len();
        let rec = record_rays(&mut tape, self.fine, Some(self.layout.field.start), origins, dirs, &tiled(&fine_depths), nf, k.far)?;
        let blur_fine = self.blur_term(&mut tape, rec.color, obs, q, blur_norm);

        let lambda = cfg.effective_lambda();
        let event = match (&self.data.bins[v], lambda > 0.0) {
            (Some(bins), true) => Some(self.event_term(&mut tape, rec.color, bins, rays, q)?),
            _ => None,
        };
        let mut total = blur_fine;
        if let Some(c) = blur_coarse {
            total = tape.add(total, c);
        }
        if let Some(e) = event {
            let we = tape.scale(e, lambda);
            total = tape.add(total, we);
        }
        let loss = LossBreakdown {
            total: tape.scalar(total),
            blur_fine: tape.scalar(blur_fine),
            blur_coarse: blur_coarse.map_or(0.0, |c| tape.scalar(c)),
            event: event.map_or(0.0, |e| tape.scalar(e)),
        };
        if !loss.total.is_finite() {
            return Err(self.diagnose(&tape, rec.color, v, rays));
        }
        let mut grad = vec![0.0; self.layout.total];
        tape.backward_into(total, 1.0, &mut grad)?;
        Ok(ChunkOut { loss, grad, signature: tape.kink_signature() })
    }

    /// Squared error of the pose-averaged color against the blurry frame.
    fn blur_term(&self, tape: &mut Tape, colors: Var, obs: Var, q: usize, norm: f64) -> Var {
        let p = self.config.p;
        let mut sum = tape.gather(colors, (0..q).collect());
        for i in 1..p {
            let c = tape.gather(colors, (i * q..(i + 1) * q).collect());
            sum = tape.add(sum, c);
        }
        let mean = tape.scale(sum, 1.0 / p as f64);
        let r = tape.sub(mean, obs);
        let sq = tape.mul(r, r);
        let s = tape.sum(sq);
        tape.scale(s, norm)
    }

    /// Squared error between predicted `ΔL/Θ` and binned event counts.
    fn event_term(&self, tape: &mut Tape, colors: Var, bins: &EventBinGrid, rays: &[&RaySample], q: usize) -> Result<Var> {
        let p = self.config.p;
        let third = tape.constant(Tensor::new(3, 1, vec![1.0 / 3.0; 3]));
        let gray = tape.affine(colors, third, None);
        let shifted = tape.add_scalar(gray, LOG_EPS);
        let log = tape.ln(shifted);
        let mut acc: Option<Var> = None;
        for i in 0..p - 1 {
            let a = tape.gather(log, (i * q..(i + 1) * q).collect());
            let b = tape.gather(log, ((i + 1) * q..(i + 2) * q).collect());
            let d = tape.sub(b, a);
            let pred = tape.scale(d, 1.0 / self.config.theta);
            let observed: Vec<f64> = rays.iter().map(|r| bins.at(i, r.pixel.0, r.pixel.1)).collect();
            let observed = tape.constant(Tensor::column(observed));
            let r = tape.sub(pred, observed);
            let sq = tape.mul(r, r);
            let s = tape.sum(sq);
            acc = Some(match acc {
                Some(x) => tape.add(x, s),
                None => s,
            });
        }
        let total = acc.ok_or_else(|| Error::Invalid("event loss needs two poses".into()))?;
        Ok(tape.scale(total, 1.0 / (self.batch * (p - 1)) as f64))
    }

    /// Locates the worst residual (non-finite first) for the abort message.
    fn diagnose(&self, tape: &Tape, colors: Var, v: usize, rays: &[&RaySample]) -> Error {
        let (p, q) = (self.config.p, rays.len());
        let c = tape.value(colors);
        for i in 0..p {
            for (j, r) in rays.iter().enumerate() {
                if c.row_slice(i * q + j).iter().any(|x| !x.is_finite()) {
                    return Error::non_finite("loss", format!("view {v}, pixel {:?}, pose {i}: rendered color {:?}", r.pixel, c.row_slice(i * q + j)));
                }
            }
        }
        let mut worst = (f64::NEG_INFINITY, 0usize, 0usize);
        if let Some(bins) = &self.data.bins[v] {
            let log = |i: usize, j: usize| {
                let row = c.row_slice(i * q + j);
                ((row[0] + row[1] + row[2]) / 3.0 + LOG_EPS).ln()
            };
            for i in 0..p - 1 {
                for (j, r) in rays.iter().enumerate() {
                    let res = ((log(i + 1, j) - log(i, j)) / self.config.theta - bins.at(i, r.pixel.0, r.pixel.1)).abs();
                    if !(res <= worst.0) {
                        worst = (res, j, i);
                    }
                }
            }
        }
        let (res, j, bin) = worst;
        Error::non_finite("loss", format!("view {v}, pixel {:?}, bin {bin}: event residual {res}", rays.get(j).map(|r| r.pixel)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: usize,
    pub loss: LossBreakdown,
    pub pose_drift: f64,
}

/// Learning-rate multiplier at `iteration`: exponential from 1 to `lr_decay`.
pub fn lr_scale(config: &TrainConfig, iteration: usize) -> f64 {
    let frac = iteration as f64 / config.iterations.max(1) as f64;
    config.lr_decay.powf(frac)
}

/// Samples a batch, backpropagates the loss, applies Adam and folds the pose
/// increments into their bases.
pub fn train_step(data: &TrainData, config: &TrainConfig, state: &mut TrainState) -> Result<StepReport> {
    let batch = sample_batch(data, config, state.iteration);
    let mut params = state.params(config);
    let (loss, grad) = loss_and_grad(data, config, state, &batch, &params)?;
    let layout = state.layout(config);
    let s = lr_scale(config, state.iteration);
    let mut groups = vec![(layout.field.start..layout.coarse.end, config.lr_field * s)];
    if config.mode != PoseMode::Frozen {
        groups.push((layout.poses(), config.lr_pose * s));
    }
    state.adam.step(&mut params, &grad, &groups);
    state.apply_params(&params, config)?;
    state.iteration += 1;
    Ok(StepReport { iteration: state.iteration, loss, pose_drift: state.pose_drift(data, config) })
}

/// Runs the remaining iterations, handing each step report to `on_step`.
pub fn train(
    data: &TrainData,
    config: &TrainConfig,
    state: &mut TrainState,
    mut on_step: impl FnMut(&StepReport),
) -> Result<()> {
    while state.iteration < config.iterations {
        let r = train_step(data, config, state)?;
        on_step(&r);
    }
    Ok(())
}

/// Mean squared event-count difference over pixels and bins.
pub fn event_loss(predicted: &EventBinGrid, observed: &EventBinGrid) -> Result<f64> {
    predicted.same_shape(observed)?;
    if predicted.bins.is_empty() {
        return Err(Error::Invalid("event loss needs at least one bin".into()));
    }
    let n = predicted.bins.len() * predicted.width * predicted.height;
    let s: f64 = predicted
        .bins
        .iter()
        .zip(&observed.bins)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)))
        .sum();
    Ok(s / n as f64)
}

/// Mean squared difference over pixels and channels.
pub fn blur_loss(predicted: &Image, observed: &Image) -> Result<f64> {
    predicted.same_shape(observed)?;
    let s: f64 = predicted.data.iter().zip(&observed.data).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / predicted.data.len() as f64)
}

/// `λ·L_event + L_blur(fine) + L_blur(coarse)` on whole images.
pub fn total_loss(lambda: f64, event: f64, blur_fine: f64, blur_coarse: Option<f64>) -> f64 {
    lambda * event + blur_fine + blur_coarse.unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{make_dataset, DatasetConfig, ShakeConfig};
    use crate::eval::training_views;

    fn grid(w: usize, h: usize, bins: Vec<Vec<f64>>) -> EventBinGrid {
        EventBinGrid { width: w, height: h, bins }
    }

    #[test]
    fn event_loss_examples() {
        let a = grid(1, 1, vec![vec![3.0]]);
        let b = grid(1, 1, vec![vec![1.0]]);
        assert_eq!(event_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(event_loss(&a, &b).unwrap(), 4.0);
        let p = grid(2, 1, vec![vec![1.0, 0.0], vec![2.0, 1.0]]);
        let z = grid(2, 1, vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
        assert_eq!(event_loss(&p, &z).unwrap(), 1.5);
        assert!(event_loss(&p, &a).is_err());
    }

    #[test]
    fn blur_loss_examples() {
        let a = Image::filled(3, 2, [0.2, 0.4, 0.6]);
        let b = Image::filled(3, 2, [0.3, 0.5, 0.7]);
        assert_eq!(blur_loss(&a, &a).unwrap(), 0.0);
        assert!((blur_loss(&a, &b).unwrap() - 0.01).abs() < 1e-15);
        let mut c = Image::zeros(2, 1);
        c.set(0, 0, [0.5, 0.5, 0.5]);
        assert!((blur_loss(&c, &Image::zeros(2, 1)).unwrap() - 0.125).abs() < 1e-15);
        assert!(blur_loss(&a, &c).is_err());
        assert_eq!(total_loss(0.0, 7.0, 0.25, None), 0.25);
        assert_eq!(total_loss(0.005, 0.0, 0.0, Some(0.0)), 0.0);
    }

    #[test]
    fn init_poses_are_identical_copies_at_even_times() {
        let pose = lie::exp(&TangentSE3::from_array([0.1, 0.2, 0.3, 1.0, 0.0, 0.0]));
        let t = &init_poses(&[pose], &[(0.0, 0.1)], 5).unwrap()[0];
        assert!(t.poses.iter().all(|p| *p == pose));
        for (a, b) in t.timestamps.iter().zip([0.0, 0.025, 0.05, 0.075, 0.1]) {
            assert!((a - b).abs() < 1e-15);
        }
        let single = &init_poses(&[pose], &[(0.0, 0.1)], 1).unwrap()[0];
        assert!((single.timestamps[0] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn validation_names_the_field() {
        let bad = TrainConfig { p: 1, lambda: 0.005, ..TrainConfig::default() };
        assert!(bad.validate().unwrap_err().to_string().contains('p'));
        let bad = TrainConfig { theta: 0.0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        assert!(TrainConfig { p: 1, lambda: 0.0, ..TrainConfig::default() }.validate().is_ok());
    }

    fn tiny_dataset(shake: f64) -> crate::datagen::Dataset {
        let cfg = DatasetConfig {
            views: 2,
            novel_views: 0,
            width: 12,
            height: 12,
            substeps: 50,
            shake: ShakeConfig { translation: shake, rotation: shake * 0.1, ..ShakeConfig::default() },
            init_rotation: 0.0,
            init_translation_frac: 0.0,
            ..DatasetConfig::default()
        };
        make_dataset(&cfg).unwrap()
    }

    fn tiny_config(mode: PoseMode, p: usize, lambda: f64) -> TrainConfig {
        TrainConfig {
            p,
            lambda,
            mode,
            samples: 8,
            batch_rays: 24,
            chunk_rays: 8,
            iterations: 10,
            field: FieldConfig { hidden_width: 16, hidden_layers: 2, color_width: 8, pos_scale: 0.25, ..FieldConfig::default() },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn breakdown_sums_to_total() {
        let ds = tiny_dataset(0.25);
        for hierarchical in [false, true] {
            let config = TrainConfig { hierarchical, ..tiny_config(PoseMode::Full, 3, 0.5) };
            let data = TrainData::new(training_views(&ds), config.p).unwrap();
            let state = TrainState::init(&data, &config).unwrap();
            let batch = sample_batch(&data, &config, 0);
            let (l, _) = loss_and_grad(&data, &config, &state, &batch, &state.params(&config)).unwrap();
            let sum = config.effective_lambda() * l.event + l.blur_fine + l.blur_coarse;
            assert!((l.total - sum).abs() < 1e-12, "{l:?}");
            assert!(l.event > 0.0 && l.blur_fine > 0.0);
            assert_eq!(l.blur_coarse > 0.0, hierarchical);
        }
    }

    #[test]
    fn zero_learning_rate_step_leaves_state_unchanged() {
        let ds = tiny_dataset(0.25);
        for mode in [PoseMode::Full, PoseMode::Linear, PoseMode::Cubic] {
            let config = TrainConfig { lr_field: 0.0, lr_pose: 0.0, ..tiny_config(mode, 3, 0.005) };
            let data = TrainData::new(training_views(&ds), config.p).unwrap();
            let mut state = TrainState::init(&data, &config).unwrap();
            let before = state.clone();
            train_step(&data, &config, &mut state).unwrap();
            assert_eq!(state.field, before.field);
            assert_eq!(state.poses, before.poses);
            assert_eq!(state.iteration, 1);
        }
    }

    #[test]
    fn identical_copies_predict_no_events() {
        let ds = tiny_dataset(0.25);
        let config = TrainConfig { init_spread: 0.0, ..tiny_config(PoseMode::Full, 3, 0.5) };
        let data = TrainData::new(training_views(&ds), config.p).unwrap();
        let state = TrainState::init(&data, &config).unwrap();
        let batch = sample_batch(&data, &config, 0);
        let (l, _) = loss_and_grad(&data, &config, &state, &batch, &state.params(&config)).unwrap();
        // Identical poses predict no events, so the event term only sees the observed counts.
        let observed: f64 = batch
            .iter()
            .map(|r| {
                let g = data.bins[r.view].as_ref().unwrap();
                (0..g.num_bins()).map(|b| g.at(b, r.pixel.0, r.pixel.1).powi(2)).sum::<f64>()
            })
            .sum();
        assert!((l.event - observed / (batch.len() * (config.p - 1)) as f64).abs() < 1e-12);
    }

    #[test]
    fn plain_fitting_at_true_poses_reduces_the_loss() {
        let ds = tiny_dataset(0.0);
        let config = TrainConfig { iterations: 200, lr_field: 1e-2, lr_decay: 1.0, ..tiny_config(PoseMode::Frozen, 1, 0.0) };
        let data = TrainData::new(training_views(&ds), 1).unwrap();
        let mut state = TrainState::init(&data, &config).unwrap();
        let mut losses = Vec::new();
        train(&data, &config, &mut state, |r| losses.push(r.loss.total)).unwrap();
        let head: f64 = losses[..40].iter().sum::<f64>() / 40.0;
        let tail: f64 = losses[160..].iter().sum::<f64>() / 40.0;
        assert!(tail < 0.8 * head, "head {head} tail {tail}");
        assert_eq!(state.pose_drift(&data, &config), 0.0);
    }

    #[test]
    fn poses_stay_orthonormal_under_many_updates() {
        let ds = tiny_dataset(0.25);
        let config = tiny_config(PoseMode::Full, 2, 0.005);
        let data = TrainData::new(training_views(&ds), 2).unwrap();
        let mut state = TrainState::init(&data, &config).unwrap();
        let layout = state.layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let mut flat = state.params(&config);
            for i in layout.poses() {
                flat[i] = rng.gen_range(-1e-2..1e-2);
            }
            state.apply_params(&flat, &config).unwrap();
        }
        for vp in &state.poses {
            assert!(vp.bases.iter().all(|b| b.orthonormality_error() < 1e-9));
        }
    }

    #[test]
    fn deterministic_runs_repeat_bit_for_bit() {
        let ds = tiny_dataset(0.25);
        let config = TrainConfig { hierarchical: true, ..tiny_config(PoseMode::Cubic, 4, 0.005) };
        let data = TrainData::new(training_views(&ds), config.p).unwrap();
        let run = || {
            let mut s = TrainState::init(&data, &config).unwrap();
            let mut log = Vec::new();
            train(&data, &config, &mut s, |r| log.push(r.loss.total.to_bits())).unwrap();
            (s, log)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(la, lb);
        assert_eq!(a, b);
    }

    #[test]
    fn linear_mode_keeps_poses_on_one_geodesic() {
        let ds = tiny_dataset(0.25);
        let config = tiny_config(PoseMode::Linear, 5, 0.005);
        let data = TrainData::new(training_views(&ds), config.p).unwrap();
        let mut state = TrainState::init(&data, &config).unwrap();
        train(&data, &config, &mut state, |_| {}).unwrap();
        for t in state.trajectories(&data, &config).unwrap() {
            let (s, e) = (t.poses[0], t.poses[4]);
            for (j, pose) in t.poses.iter().enumerate() {
                let expect = lie::interpolate_linear(&s, &e, j as f64 / 4.0).unwrap();
                let d = lie::log(&pose.compose(&expect.inverse())).to_vector6().norm();
                assert!(d < 1e-9, "pose {j} off the geodesic by {d}");
            }
        }
    }
}
