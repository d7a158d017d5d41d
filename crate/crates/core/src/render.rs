//! Pinhole rays, depth sampling along rays and emission–absorption compositing.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FieldParams;
use crate::image::Image;
use crate::lie::PoseSE3;
use crate::tape::{Tape, Tensor, Var};

/// Offset inside the logarithm so black pixels keep a finite log intensity.
pub const LOG_EPS: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Intrinsics {
    /// Square pixels, principal point at the image centre.
    pub fn centered(width: usize, height: usize, focal: f64, near: f64, far: f64) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            near,
            far,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Invalid(format!("focal lengths must be positive: {} {}", self.fx, self.fy)));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::Invalid(format!("need 0 < near < far, got {} {}", self.near, self.far)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Invalid("image size must be positive".into()));
        }
        Ok(())
    }

    /// Unit ray direction in camera coordinates through the centre of pixel `(x, y)`.
    pub fn camera_direction(&self, x: usize, y: usize) -> Vector3<f64> {
        Vector3::new(
            (x as f64 + 0.5 - self.cx) / self.fx,
            -(y as f64 + 0.5 - self.cy) / self.fy,
            -1.0,
        )
        .normalize()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub pixel: (usize, usize),
}

pub fn pixel_ray(k: &Intrinsics, pose: &PoseSE3, pixel: (usize, usize)) -> Result<Ray> {
    if pixel.0 >= k.width || pixel.1 >= k.height {
        return Err(Error::Invalid(format!(
            "pixel {pixel:?} outside {}x{} image",
            k.width, k.height
        )));
    }
    Ok(Ray {
        origin: pose.translation,
        direction: pose.rotate(&k.camera_direction(pixel.0, pixel.1)),
        pixel,
    })
}

/// One depth per equal-width bin of `[near, far]`, placed at fraction `u[i]`
/// inside bin `i`.
pub fn stratified_from_uniforms(near: f64, far: f64, u: &[f64]) -> Vec<f64> {
    let n = u.len();
    let delta = (far - near) / n as f64;
    u.iter()
        .enumerate()
        .map(|(i, &f)| near + (i as f64 + f) * delta)
        .collect()
}

pub fn stratified_samples(near: f64, far: f64, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    assert!(n >= 1, "need at least one sample per ray");
    let u: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    stratified_from_uniforms(near, far, &u)
}

/// Bin midpoints: stratified sampling with every draw at one half.
pub fn midpoint_samples(near: f64, far: f64, n: usize) -> Vec<f64> {
    stratified_from_uniforms(near, far, &vec![0.5; n])
}

/// Spacing between consecutive depths; the last interval closes at `far`.
pub fn deltas(depths: &[f64], far: f64) -> Vec<f64> {
    let n = depths.len();
    (0..n)
        .map(|i| if i + 1 < n { depths[i + 1] - depths[i] } else { far - depths[i] })
        .collect()
}

/// Compositing weights `T_i (1 − exp(−σ_i δ_i))`.
pub fn composite_weights(sigmas: &[f64], deltas: &[f64]) -> Result<Vec<f64>> {
    if let Some(i) = sigmas.iter().position(|&s| !(s >= 0.0)) {
        return Err(Error::Invalid(format!("density {i} is negative or NaN: {}", sigmas[i])));
    }
    let mut optical = 0.0f64;
    Ok(sigmas
        .iter()
        .zip(deltas)
        .map(|(&s, &d)| {
            let sd = s * d;
            let w = (-optical).exp() * (1.0 - (-sd).exp());
            optical += sd;
            w
        })
        .collect())
}

/// Composites per-sample colors (`n×3`) along one ray.
pub fn volume_render(colors: &[f64], sigmas: &[f64], depths: &[f64], far: f64) -> Result<[f64; 3]> {
    if colors.len() != 3 * sigmas.len() || sigmas.len() != depths.len() || depths.is_empty() {
        return Err(Error::Shape(format!(
            "volume_render got {} colors, {} densities, {} depths",
            colors.len() / 3,
            sigmas.len(),
            depths.len()
        )));
    }
    let w = composite_weights(sigmas, &deltas(depths, far))?;
    let mut c = [0.0; 3];
    for (wi, ci) in w.iter().zip(colors.chunks(3)) {
        for k in 0..3 {
            c[k] += wi * ci[k];
        }
    }
    Ok(c)
}

pub fn to_gray(rgb: [f64; 3]) -> f64 {
    (rgb[0] + rgb[1] + rgb[2]) / 3.0
}

pub fn to_log(g: f64) -> f64 {
    (g + LOG_EPS).ln()
}

/// Inverse-CDF sampling of `n` depths from piecewise-constant weights over
/// the bins centred on `depths`, at the quantiles `u` (sorted in `[0, 1)`).
pub fn importance_from_uniforms(depths: &[f64], weights: &[f64], near: f64, far: f64, u: &[f64]) -> Vec<f64> {
    let m = depths.len();
    let mut edges = Vec::with_capacity(m + 1);
    edges.push(near);
    for i in 0..m - 1 {
        edges.push(0.5 * (depths[i] + depths[i + 1]));
    }
    edges.push(far);
    let w: Vec<f64> = weights.iter().map(|w| w.max(0.0) + 1e-5).collect();
    let total: f64 = w.iter().sum();
    let mut cdf = Vec::with_capacity(m + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for wi in &w {
        acc += wi / total;
        cdf.push(acc);
    }
    u.iter()
        .map(|&q| {
            let q = q.min(cdf[m] * (1.0 - 1e-12));
            let b = cdf.partition_point(|&c| c <= q).clamp(1, m) - 1;
            let span = cdf[b + 1] - cdf[b];
            let t = if span > 0.0 { (q - cdf[b]) / span } else { 0.0 };
            edges[b] + t * (edges[b + 1] - edges[b])
        })
        .collect()
}

/// Merges two sorted depth lists.
pub fn merge_depths(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut all: Vec<f64> = a.iter().chain(b).copied().collect();
    all.sort_by(|x, y| x.partial_cmp(y).unwrap());
    all
}

/// How depths along each ray are chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DepthSampling {
    Midpoint,
    /// Stratified draws from a per-pixel stream derived from `seed`, so the
    /// result does not depend on evaluation order.
    Stratified { seed: u64 },
}

impl DepthSampling {
    fn depths(&self, near: f64, far: f64, n: usize, pixel_index: usize) -> Vec<f64> {
        match *self {
            DepthSampling::Midpoint => midpoint_samples(near, far, n),
            DepthSampling::Stratified { seed } => {
                let mut rng = pixel_rng(seed, pixel_index);
                stratified_samples(near, far, n, &mut rng)
            }
        }
    }
}

pub fn pixel_rng(seed: u64, pixel_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(pixel_index as u64 + 1);
    rng
}

/// A radiance field plus the optional proposal field used for importance sampling.
#[derive(Clone, Copy, Debug)]
pub struct FieldPair<'a> {
    pub fine: &'a FieldParams,
    pub coarse: Option<&'a FieldParams>,
}

impl<'a> FieldPair<'a> {
    pub fn single(fine: &'a FieldParams) -> Self {
        Self { fine, coarse: None }
    }
}

/// Colors and per-sample weights, one entry per ray.
type Composited = (Vec<[f64; 3]>, Vec<Vec<f64>>);

fn composite_rays(field: &FieldParams, rays: &[Ray], depths: &[Vec<f64>], far: f64) -> Result<Composited> {
    let total: usize = depths.iter().map(Vec::len).sum();
    let mut pos = Vec::with_capacity(3 * total);
    let mut dirs = Vec::with_capacity(3 * total);
    for (ray, ds) in rays.iter().zip(depths) {
        for &l in ds {
            let p = ray.origin + ray.direction * l;
            pos.extend_from_slice(p.as_slice());
            dirs.extend_from_slice(ray.direction.as_slice());
        }
    }
    let out = field.eval_batch(&pos, &dirs)?;
    let mut colors = Vec::with_capacity(rays.len());
    let mut weights = Vec::with_capacity(rays.len());
    let mut start = 0;
    for ds in depths {
        let n = ds.len();
        let w = composite_weights(&out.sigmas[start..start + n], &deltas(ds, far))?;
        let mut c = [0.0; 3];
        for (wi, ci) in w.iter().zip(out.colors[3 * start..3 * (start + n)].chunks(3)) {
            for k in 0..3 {
                c[k] += wi * ci[k];
            }
        }
        colors.push(c);
        weights.push(w);
        start += n;
    }
    Ok((colors, weights))
}

/// Renders a list of pixels from one pose. With a coarse field the fine pass
/// adds `n` importance samples drawn from the coarse weights.
pub fn render_pixels(
    fields: FieldPair<'_>,
    k: &Intrinsics,
    pose: &PoseSE3,
    pixels: &[(usize, usize)],
    n: usize,
    sampling: DepthSampling,
) -> Result<Vec<[f64; 3]>> {
    let rays: Vec<Ray> = pixels.iter().map(|&p| pixel_ray(k, pose, p)).collect::<Result<_>>()?;
    let index = |p: (usize, usize)| p.1 * k.width + p.0;
    let depths: Vec<Vec<f64>> = pixels
        .iter()
        .map(|&p| sampling.depths(k.near, k.far, n, index(p)))
        .collect();
    let Some(coarse) = fields.coarse else {
        return Ok(composite_rays(fields.fine, &rays, &depths, k.far)?.0);
    };
    let (_, weights) = composite_rays(coarse, &rays, &depths, k.far)?;
    let fine_depths: Vec<Vec<f64>> = depths
        .iter()
        .zip(&weights)
        .zip(pixels)
        .map(|((d, w), &p)| {
            let u = match sampling {
                DepthSampling::Midpoint => (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect::<Vec<_>>(),
                DepthSampling::Stratified { seed } => {
                    let mut rng = pixel_rng(seed ^ 0x9e37_79b9_7f4a_7c15, index(p));
                    let mut u: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
                    u.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    u
                }
            };
            merge_depths(d, &importance_from_uniforms(d, w, k.near, k.far, &u))
        })
        .collect();
    Ok(composite_rays(fields.fine, &rays, &fine_depths, k.far)?.0)
}

pub fn render_pixel(
    fields: FieldPair<'_>,
    k: &Intrinsics,
    pose: &PoseSE3,
    pixel: (usize, usize),
    n: usize,
    sampling: DepthSampling,
) -> Result<[f64; 3]> {
    Ok(render_pixels(fields, k, pose, &[pixel], n, sampling)?[0])
}

/// Renders a full image, one row per rayon task.
pub fn render_image(
    fields: FieldPair<'_>,
    k: &Intrinsics,
    pose: &PoseSE3,
    n: usize,
    sampling: DepthSampling,
) -> Result<Image> {
    k.validate()?;
    let rows: Vec<Vec<[f64; 3]>> = (0..k.height)
        .into_par_iter()
        .map(|y| {
            let pixels: Vec<(usize, usize)> = (0..k.width).map(|x| (x, y)).collect();
            render_pixels(fields, k, pose, &pixels, n, sampling)
        })
        .collect::<Result<_>>()?;
    let data = rows.into_iter().flatten().flatten().collect();
    Image::new(k.width, k.height, data)
}

/// Tape handles produced by [`record_rays`].
pub struct RecordedRays {
    /// `q×3` composited colors.
    pub color: Var,
    /// Compositing weights (`q×n`, row-major) for importance resampling.
    pub weights: Vec<f64>,
}

/// Records differentiable volume rendering of `q` rays. `origins` and `dirs`
/// are `q×3` tape nodes; `depths` holds `n` constant depths per ray.
pub fn record_rays(
    tape: &mut Tape,
    field: &FieldParams,
    field_offset: Option<usize>,
    origins: Var,
    dirs: Var,
    depths: &[f64],
    n: usize,
    far: f64,
) -> Result<RecordedRays> {
    let q = tape.value(origins).rows;
    assert_eq!(depths.len(), q * n, "need {n} depths per ray");
    let delta: Vec<f64> = depths.chunks(n).flat_map(|d| deltas(d, far)).collect();
    let o_rep = tape.repeat_rows(origins, n);
    let d_rep = tape.repeat_rows(dirs, n);
    let l = tape.constant(Tensor::column(depths.to_vec()));
    let offset = tape.mul_col(d_rep, l);
    let positions = tape.add(o_rep, offset);
    let enc = tape.encode(dirs, field.config.encoding.k_dir + 1);
    let enc_rep = tape.repeat_rows(enc, n);
    let out = field.record(tape, field_offset, positions, enc_rep)?;
    let delta = tape.constant(Tensor::column(delta));
    let sd = tape.mul(out.sigma, delta);
    let cum = tape.segment_exclusive_cumsum(sd, n);
    let neg_cum = tape.scale(cum, -1.0);
    let trans = tape.exp(neg_cum);
    let neg_sd = tape.scale(sd, -1.0);
    let keep = tape.exp(neg_sd);
    let neg_keep = tape.scale(keep, -1.0);
    let alpha = tape.add_scalar(neg_keep, 1.0);
    let w = tape.mul(trans, alpha);
    let weighted = tape.mul_col(out.color, w);
    let color = tape.segment_sum(weighted, n);
    Ok(RecordedRays { color, weights: tape.value(w).data.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldConfig;
    use crate::lie::{exp, TangentSE3};
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn intr() -> Intrinsics {
        Intrinsics::centered(8, 6, 10.0, 0.5, 4.0)
    }

    #[test]
    fn principal_pixel_looks_down_minus_z() {
        let k = Intrinsics { cx: 3.5, cy: 2.5, ..intr() };
        let r = pixel_ray(&k, &PoseSE3::identity(), (3, 2)).unwrap();
        assert!((r.direction - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-15);
        assert_eq!(r.origin, Vector3::zeros());
    }

    #[test]
    fn translated_pose_moves_origin_only() {
        let k = intr();
        let t = Vector3::new(1.0, -2.0, 0.5);
        let a = pixel_ray(&k, &PoseSE3::identity(), (1, 4)).unwrap();
        let b = pixel_ray(&k, &PoseSE3::from_translation(t), (1, 4)).unwrap();
        assert_eq!(a.direction, b.direction);
        assert_eq!(b.origin, t);
    }

    #[test]
    fn yawed_pose_rotates_direction() {
        let k = intr();
        let yaw = exp(&TangentSE3::from_array([0.0, FRAC_PI_2, 0.0, 0.0, 0.0, 0.0]));
        let a = pixel_ray(&k, &PoseSE3::identity(), (6, 1)).unwrap();
        let b = pixel_ray(&k, &yaw, (6, 1)).unwrap();
        // A quarter turn about +y maps (x, y, z) to (z, y, −x).
        let want = Vector3::new(a.direction.z, a.direction.y, -a.direction.x);
        assert!((b.direction - want).norm() < 1e-15);
        assert!((b.direction.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_bounds_pixel_is_rejected() {
        assert!(pixel_ray(&intr(), &PoseSE3::identity(), (8, 0)).is_err());
    }

    #[test]
    fn single_midpoint_sample() {
        assert_eq!(stratified_from_uniforms(1.0, 3.0, &[0.5]), vec![2.0]);
        assert_eq!(midpoint_samples(0.0, 4.0, 2), vec![1.0, 3.0]);
    }

    #[test]
    fn volume_render_examples() {
        let colors = [0.3, 0.6, 0.9, 1.0, 0.0, 1.0];
        let zero = volume_render(&colors, &[0.0, 0.0], &[0.0, 1.0], 2.0).unwrap();
        assert_eq!(zero, [0.0; 3]);

        let opaque = volume_render(&colors[..3], &[50.0], &[0.0], 1.0).unwrap();
        for k in 0..3 {
            assert!((opaque[k] - colors[k]).abs() < 1e-6);
        }

        let c = volume_render(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0], &[1.0, 1.0], &[0.0, 1.0], 2.0).unwrap();
        let e = (-1.0f64).exp();
        assert!((c[0] - (1.0 - e)).abs() < 1e-15);
        assert!((c[1] - e * (1.0 - e)).abs() < 1e-15);
        assert_eq!(c[2], 0.0);

        assert!(volume_render(&colors[..3], &[-0.1], &[0.0], 1.0).is_err());
    }

    #[test]
    fn gray_and_log() {
        assert_eq!(to_gray([1.0, 1.0, 1.0]), 1.0);
        assert_eq!(to_log(1.0), 1.001f64.ln());
        assert_eq!(to_log(to_gray([0.0; 3])), 1e-3f64.ln());
        assert!((to_gray([0.2, 0.4, 0.6]) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn stratified_samples_stay_in_their_bins() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (near, far, n) = (0.5, 6.0, 64);
        let delta = (far - near) / n as f64;
        for _ in 0..10_000 / n {
            let d = stratified_samples(near, far, n, &mut rng);
            for (i, &l) in d.iter().enumerate() {
                assert!(l >= near + i as f64 * delta - 1e-12 && l <= near + (i + 1) as f64 * delta + 1e-12);
            }
            assert!(d.windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn importance_sampling_concentrates_on_heavy_bins() {
        let depths = midpoint_samples(0.0, 4.0, 4);
        let u: Vec<f64> = (0..8).map(|i| (i as f64 + 0.5) / 8.0).collect();
        let s = importance_from_uniforms(&depths, &[0.0, 0.0, 1.0, 0.0], 0.0, 4.0, &u);
        assert!(s.iter().filter(|&&l| (2.0..3.0).contains(&l)).count() >= 7, "{s:?}");
        assert!(s.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn image_rendering_composes_the_pieces() {
        let f = FieldParams::init(FieldConfig { hidden_width: 16, hidden_layers: 2, color_width: 8, ..Default::default() }).unwrap();
        let k = intr();
        let pose = exp(&TangentSE3::from_array([0.1, 0.0, 0.0, 0.0, 0.0, 1.0]));
        let img = render_image(FieldPair::single(&f), &k, &pose, 8, DepthSampling::Stratified { seed: 5 }).unwrap();
        let again = render_image(FieldPair::single(&f), &k, &pose, 8, DepthSampling::Stratified { seed: 5 }).unwrap();
        assert_eq!(img, again);
        // Pixel (2, 3) by hand: ray → stratified depths → field → compositing.
        let ray = pixel_ray(&k, &pose, (2, 3)).unwrap();
        let mut rng = pixel_rng(5, 3 * k.width + 2);
        let depths = stratified_samples(k.near, k.far, 8, &mut rng);
        let mut pos = Vec::new();
        let mut dirs = Vec::new();
        for &l in &depths {
            pos.extend((ray.origin + ray.direction * l).iter());
            dirs.extend(ray.direction.iter());
        }
        let out = f.eval_batch(&pos, &dirs).unwrap();
        let want = volume_render(&out.colors, &out.sigmas, &depths, k.far).unwrap();
        let got = img.get(2, 3);
        for c in 0..3 {
            assert!((got[c] - want[c]).abs() < 1e-14);
        }
        assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn recorded_rays_match_plain_rendering() {
        let f = FieldParams::init(FieldConfig { hidden_width: 16, hidden_layers: 2, color_width: 8, ..Default::default() }).unwrap();
        let k = intr();
        let pose = exp(&TangentSE3::from_array([0.0, 0.2, 0.0, 0.1, 0.0, 1.0]));
        let pixels = [(0, 0), (5, 2), (7, 5)];
        let n = 6;
        let plain = render_pixels(FieldPair::single(&f), &k, &pose, &pixels, n, DepthSampling::Midpoint).unwrap();
        let mut tape = Tape::new(f.len());
        let mut o = Vec::new();
        let mut d = Vec::new();
        for &p in &pixels {
            let r = pixel_ray(&k, &pose, p).unwrap();
            o.extend(r.origin.iter());
            d.extend(r.direction.iter());
        }
        let ov = tape.constant(Tensor::new(3, 3, o));
        let dv = tape.constant(Tensor::new(3, 3, d));
        let depths: Vec<f64> = (0..3).flat_map(|_| midpoint_samples(k.near, k.far, n)).collect();
        let rec = record_rays(&mut tape, &f, Some(0), ov, dv, &depths, n, k.far).unwrap();
        let c = tape.value(rec.color);
        for (i, p) in plain.iter().enumerate() {
            for ch in 0..3 {
                assert!((c.at(i, ch) - p[ch]).abs() < 1e-13);
            }
        }
    }

    proptest! {
        #[test]
        fn weights_are_bounded(sig in prop::collection::vec(0.0f64..20.0, 1..16), gap in 0.01f64..1.0) {
            let n = sig.len();
            let depths: Vec<f64> = (0..n).map(|i| i as f64 * gap).collect();
            let w = composite_weights(&sig, &deltas(&depths, n as f64 * gap)).unwrap();
            let total: f64 = w.iter().sum();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&total));
            prop_assert!(w.iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn more_opacity_never_raises_later_transmittance(
            sig in prop::collection::vec(0.0f64..5.0, 2..10), bump in 0.0f64..5.0, at in 0usize..10
        ) {
            let at = at % sig.len();
            let trans = |s: &[f64]| -> Vec<f64> {
                let mut acc = 0.0f64;
                s.iter().map(|&x| { let t = (-acc).exp(); acc += x * 0.1; t }).collect()
            };
            let mut more = sig.clone();
            more[at] += bump;
            let (a, b) = (trans(&sig), trans(&more));
            for j in at + 1..sig.len() {
                prop_assert!(b[j] <= a[j] + 1e-15);
            }
        }
    }
}
