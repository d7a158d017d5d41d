//! Image quality (PSNR, SSIM) and trajectory error after rigid alignment.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::lie::{self, PoseSE3};

/// Peak signal-to-noise ratio for unit peak. Identical images give `+∞`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimResult {
    pub value: f64,
    /// The image was smaller than the window, so one global window was used.
    pub global_fallback: bool,
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_with_info(a, b)?.value)
}

/// Mean SSIM of the channel-mean gray images over every fully contained
/// Gaussian window.
pub fn ssim_with_info(a: &Image, b: &Image) -> Result<SsimResult> {
    a.same_shape(b)?;
    let (w, h) = (a.width, a.height);
    let (ga, gb) = (a.gray(), b.gray());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        let uniform = vec![1.0 / (w * h) as f64; w * h];
        let value = window_ssim(&ga, &gb, w, 0, 0, w, h, &uniform);
        return Ok(SsimResult { value, global_fallback: true });
    }
    let kernel = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            total += window_ssim(&ga, &gb, w, x0, y0, SSIM_WINDOW, SSIM_WINDOW, &kernel);
            count += 1;
        }
    }
    Ok(SsimResult { value: total / count as f64, global_fallback: false })
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let mut k = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for gy in &g {
        for gx in &g {
            k.push(gy * gx / (s * s));
        }
    }
    k
}

#[allow(clippy::too_many_arguments)]
fn window_ssim(a: &[f64], b: &[f64], stride: usize, x0: usize, y0: usize, ww: usize, wh: usize, k: &[f64]) -> f64 {
    let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for dy in 0..wh {
        for dx in 0..ww {
            let wgt = k[dy * ww + dx];
            let i = (y0 + dy) * stride + x0 + dx;
            let (va, vb) = (a[i], b[i]);
            ma += wgt * va;
            mb += wgt * vb;
            aa += wgt * va * va;
            bb += wgt * vb * vb;
            ab += wgt * va * vb;
        }
    }
    let va = aa - ma * ma;
    let vb = bb - mb * mb;
    let cov = ab - ma * mb;
    ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AteReport {
    /// Root mean square of aligned position errors.
    pub trans_rmse: f64,
    /// Standard deviation of the per-pose position errors.
    pub trans_std: f64,
    /// Root mean square of geodesic angles between aligned orientations (radians).
    pub rot_rmse: f64,
    /// Transform applied to the estimate, `[R|t]` row-major.
    pub alignment: [f64; 12],
    /// The positions did not pin down a rotation; only centroids were matched.
    pub degenerate: bool,
}

/// Rigid (rotation + translation) least-squares fit `x ≈ R·y + t`.
/// Returns `None` when the cross-covariance has rank below two.
pub fn umeyama_rigid(truth: &[Vector3<f64>], est: &[Vector3<f64>]) -> Option<PoseSE3> {
    let n = truth.len() as f64;
    let mx = truth.iter().sum::<Vector3<f64>>() / n;
    let my = est.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let (mut vx, mut vy) = (0.0, 0.0);
    for (x, y) in truth.iter().zip(est) {
        let (dx, dy) = (x - mx, y - my);
        cov += dx * dy.transpose();
        vx += dx.norm_squared();
        vy += dy.norm_squared();
    }
    let svd = cov.svd(true, true);
    let mut s = svd.singular_values.as_slice().to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    let scale = (vx * vy).sqrt();
    if !(scale > 0.0) || s[1] <= 1e-10 * scale {
        return None;
    }
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    Some(PoseSE3::new(r, mx - r * my))
}

fn centroid_alignment(truth: &[Vector3<f64>], est: &[Vector3<f64>]) -> PoseSE3 {
    let n = truth.len() as f64;
    let t = truth.iter().sum::<Vector3<f64>>() / n - est.iter().sum::<Vector3<f64>>() / n;
    PoseSE3::from_translation(t)
}

/// Absolute trajectory error of `est` against `truth` after rigid alignment of
/// the positions.
pub fn ate(est: &[PoseSE3], truth: &[PoseSE3]) -> Result<AteReport> {
    if est.len() != truth.len() || est.len() < 2 {
        return Err(Error::Shape(format!(
            "trajectory error needs two equal-length lists of at least 2 poses, got {} and {}",
            est.len(),
            truth.len()
        )));
    }
    let xs: Vec<Vector3<f64>> = truth.iter().map(|p| p.translation).collect();
    let ys: Vec<Vector3<f64>> = est.iter().map(|p| p.translation).collect();
    // Coincident positions need no fit; skipping it keeps the error exactly zero.
    let (align, degenerate) = if xs == ys {
        (PoseSE3::identity(), false)
    } else {
        match umeyama_rigid(&xs, &ys) {
            Some(a) => (a, false),
            None => (centroid_alignment(&xs, &ys), true),
        }
    };
    let n = est.len() as f64;
    let mut errs = Vec::with_capacity(est.len());
    let mut rot_sq = 0.0;
    for (e, t) in est.iter().zip(truth) {
        let aligned = align.compose(e);
        errs.push((aligned.translation - t.translation).norm());
        let rel = t.rotation.transpose() * aligned.rotation;
        let angle = lie::so3_log(&rel).0.norm();
        rot_sq += angle * angle;
    }
    let ms = errs.iter().map(|e| e * e).sum::<f64>() / n;
    let mean = errs.iter().sum::<f64>() / n;
    let var = (ms - mean * mean).max(0.0);
    Ok(AteReport {
        trans_rmse: ms.sqrt(),
        trans_std: var.sqrt(),
        rot_rmse: (rot_sq / n).sqrt(),
        alignment: align.to_row_major(),
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::{exp, TangentSE3};
    use proptest::prelude::*;

    fn flat(w: usize, h: usize, v: f64) -> Image {
        Image::filled(w, h, [v; 3])
    }

    #[test]
    fn psnr_examples() {
        let a = flat(4, 3, 0.3);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = flat(4, 3, 0.4);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        let mut c = a.clone();
        c.data.iter_mut().step_by(2).for_each(|v| *v += 0.1 * 2f64.sqrt());
        assert!((psnr(&a, &c).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &flat(3, 3, 0.3)).is_err());
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let data: Vec<f64> = (0..16 * 14 * 3).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        let a = Image::new(16, 14, data).unwrap();
        let r = ssim_with_info(&a, &a).unwrap();
        assert_eq!(r.value, 1.0);
        assert!(!r.global_fallback);
    }

    #[test]
    fn ssim_of_constants_is_luminance_term() {
        let (ma, mb) = (0.4, 0.5);
        let s = ssim(&flat(12, 12, ma), &flat(12, 12, mb)).unwrap();
        let expect = (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
        assert!((s - expect).abs() < 1e-12, "{s} vs {expect}");
    }

    #[test]
    fn ssim_of_inverted_checkerboard_is_negative() {
        let (w, h) = (16, 16);
        let a = Image::new(w, h, (0..w * h).flat_map(|i| [((i % w + i / w) % 2) as f64; 3]).collect()).unwrap();
        let b = Image::new(w, h, a.data.iter().map(|v| 1.0 - v).collect()).unwrap();
        let s = ssim(&a, &b).unwrap();
        assert!(s < -0.9, "{s}");
        assert!(s >= -1.0);
    }

    #[test]
    fn small_images_fall_back_to_global_statistics() {
        let a = Image::new(2, 1, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let b = Image::new(2, 1, vec![0.1, 0.1, 0.1, 0.9, 0.9, 0.9]).unwrap();
        let r = ssim_with_info(&a, &b).unwrap();
        assert!(r.global_fallback);
        // means 0.5, 0.5; variances 0.25, 0.16; covariance 0.2
        let expect = ((0.5 + C1) * (0.4 + C2)) / ((0.5 + C1) * (0.41 + C2));
        assert!((r.value - expect).abs() < 1e-12);
    }

    fn sample_traj(seed: u64) -> Vec<PoseSE3> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..5)
            .map(|_| {
                let mut x = [0.0; 6];
                x.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
                exp(&TangentSE3::from_slice(&x))
            })
            .collect()
    }

    #[test]
    fn exact_and_rigidly_moved_trajectories_have_zero_error() {
        let t = sample_traj(1);
        let r = ate(&t, &t).unwrap();
        assert_eq!((r.trans_rmse, r.trans_std, r.rot_rmse), (0.0, 0.0, 0.0));
        let g = exp(&TangentSE3::from_slice(&[0.3, -1.0, 0.7, 2.0, -3.0, 1.0]));
        let moved: Vec<PoseSE3> = t.iter().map(|p| g.compose(p)).collect();
        let r = ate(&moved, &t).unwrap();
        assert!(r.trans_rmse < 1e-12 && r.rot_rmse < 1e-7, "{r:?}");
    }

    fn rmse_for(rotvec: &[f64; 3], xs: &[Vector3<f64>], ys: &[Vector3<f64>]) -> f64 {
        let r = lie::exp(&TangentSE3::from_slice(&[rotvec[0], rotvec[1], rotvec[2], 0.0, 0.0, 0.0])).rotation;
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<Vector3<f64>>() / n;
        let my = ys.iter().sum::<Vector3<f64>>() / n;
        let t = mx - r * my;
        (xs.iter().zip(ys).map(|(x, y)| (r * y + t - x).norm_squared()).sum::<f64>() / n).sqrt()
    }

    #[test]
    fn single_offset_pose_matches_brute_force_alignment() {
        let truth = sample_traj(7);
        let mut est = truth.clone();
        est[2].translation += Vector3::new(0.1, 0.0, 0.0);
        let rep = ate(&est, &truth).unwrap();
        let xs: Vec<_> = truth.iter().map(|p| p.translation).collect();
        let ys: Vec<_> = est.iter().map(|p| p.translation).collect();
        // Coordinate search over rotation vectors with shrinking steps.
        let mut best = [0.0; 3];
        let mut best_val = rmse_for(&best, &xs, &ys);
        let mut step = 0.2;
        while step > 1e-10 {
            let mut improved = false;
            for axis in 0..3 {
                for sign in [-1.0, 1.0] {
                    let mut cand = best;
                    cand[axis] += sign * step;
                    let v = rmse_for(&cand, &xs, &ys);
                    if v < best_val {
                        best = cand;
                        best_val = v;
                        improved = true;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        assert!((rep.trans_rmse - best_val).abs() < 1e-9, "{} vs {best_val}", rep.trans_rmse);
        // Without alignment the error would be 0.1/√5; the fit may only lower it.
        assert!(rep.trans_rmse <= 0.1 / 5f64.sqrt() + 1e-12);
        assert!(rep.trans_rmse > 0.0);
    }

    #[test]
    fn coincident_estimate_is_flagged_degenerate() {
        let truth = sample_traj(3);
        let est = vec![truth[0]; truth.len()];
        let r = ate(&est, &truth).unwrap();
        assert!(r.degenerate);
        let n = truth.len() as f64;
        let c = truth.iter().map(|p| p.translation).sum::<Vector3<f64>>() / n;
        let spread = (truth.iter().map(|p| (p.translation - c).norm_squared()).sum::<f64>() / n).sqrt();
        assert!((r.trans_rmse - spread).abs() < 1e-12);
    }

    #[test]
    fn ate_rejects_mismatched_lengths() {
        let t = sample_traj(2);
        assert!(ate(&t[..3], &t).is_err());
        assert!(ate(&t[..1], &t[..1]).is_err());
    }

    proptest! {
        #[test]
        fn ate_is_invariant_to_global_transforms(
            seed in 0u64..1000,
            g in prop::array::uniform6(-2.0f64..2.0),
            noise in prop::collection::vec(-0.2f64..0.2, 30),
        ) {
            let truth = sample_traj(seed);
            let est: Vec<PoseSE3> = truth
                .iter()
                .zip(noise.chunks(6))
                .map(|(p, n)| exp(&TangentSE3::from_slice(n)).compose(p))
                .collect();
            let gp = exp(&TangentSE3::from_slice(&g));
            let moved: Vec<PoseSE3> = est.iter().map(|p| gp.compose(p)).collect();
            let a = ate(&est, &truth).unwrap();
            let b = ate(&moved, &truth).unwrap();
            prop_assert!(!a.degenerate);
            prop_assert!((a.trans_rmse - b.trans_rmse).abs() < 1e-9);
            prop_assert!((a.rot_rmse - b.rot_rmse).abs() < 1e-7);
        }

        #[test]
        fn psnr_is_symmetric(a in prop::collection::vec(0.0f64..1.0, 12), b in prop::collection::vec(0.0f64..1.0, 12)) {
            let (ia, ib) = (Image::new(2, 2, a).unwrap(), Image::new(2, 2, b).unwrap());
            prop_assert_eq!(psnr(&ia, &ib).unwrap(), psnr(&ib, &ia).unwrap());
        }

        #[test]
        fn ssim_never_exceeds_one(a in prop::collection::vec(0.0f64..1.0, 12 * 12 * 3), b in prop::collection::vec(0.0f64..1.0, 12 * 12 * 3)) {
            let (ia, ib) = (Image::new(12, 12, a).unwrap(), Image::new(12, 12, b).unwrap());
            let s = ssim(&ia, &ib).unwrap();
            prop_assert!((-1.0..=1.0 + 1e-15).contains(&s));
        }
    }
}
