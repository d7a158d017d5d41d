//! Evaluation of a trained state against a synthetic dataset.

use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::field::FieldParams;
use crate::image::Image;
use crate::lie::{PoseSE3, Trajectory};
use crate::metrics::{ate, psnr, ssim_with_info, umeyama_rigid, AteReport};
use crate::render::{render_image, DepthSampling, FieldPair};
use crate::train::ViewObservation;

/// Training inputs of every dataset view.
pub fn training_views(ds: &Dataset) -> Vec<ViewObservation> {
    ds.views
        .iter()
        .map(|v| ViewObservation {
            intrinsics: ds.intrinsics,
            blurry: v.blurry.clone(),
            events: v.events.clone(),
            exposure: v.exposure,
            init_pose: v.init_pose,
        })
        .collect()
}

/// Serializes non-finite floats as the strings `"inf"`, `"-inf"` and `"nan"`,
/// which plain JSON numbers cannot hold.
pub mod json_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                _ => Err(serde::de::Error::custom(format!("unexpected float string {t:?}"))),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    #[serde(with = "json_float")]
    pub psnr: f64,
    pub ssim: f64,
    pub ssim_global_fallback: bool,
}

pub fn score(render: &Image, truth: &Image) -> Result<ImageScores> {
    let s = ssim_with_info(render, truth)?;
    Ok(ImageScores { psnr: psnr(render, truth)?, ssim: s.value, ssim_global_fallback: s.global_fallback })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeblurEntry {
    pub view: usize,
    pub render: ImageScores,
    /// The blurry input scored against the same sharp frame.
    pub blurry: ImageScores,
    pub ate: Option<AteReport>,
    /// Error of the initial (identical) pose copies.
    pub initial_ate: Option<AteReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NovelEntry {
    pub view: usize,
    pub render: ImageScores,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    #[serde(with = "json_float")]
    pub deblur_psnr: f64,
    pub deblur_ssim: f64,
    #[serde(with = "json_float")]
    pub blurry_psnr: f64,
    pub blurry_ssim: f64,
    #[serde(with = "json_float")]
    pub novel_psnr: f64,
    pub novel_ssim: f64,
    pub ate_trans_rmse: Option<f64>,
    pub ate_trans_std: Option<f64>,
    pub ate_rot_rmse: Option<f64>,
    pub initial_ate_trans_rmse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub deblurring_views: Vec<DeblurEntry>,
    pub novel_views: Vec<NovelEntry>,
    pub averages: Averages,
    pub notices: Vec<String>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Learned-frame pose of a ground-truth pose: the rigid map fitted from
/// ground-truth to learned mid-exposure positions. Identity when the fit is
/// degenerate (fewer than three well-spread views).
pub fn gt_to_learned(gt_mid: &[PoseSE3], learned_mid: &[PoseSE3]) -> PoseSE3 {
    let x: Vec<_> = learned_mid.iter().map(|p| p.translation).collect();
    let y: Vec<_> = gt_mid.iter().map(|p| p.translation).collect();
    if x.len() < 3 {
        return PoseSE3::identity();
    }
    umeyama_rigid(&x, &y).unwrap_or_else(PoseSE3::identity)
}

/// Scores already rendered images and learned trajectories.
pub fn evaluate_renders(
    ds: &Dataset,
    deblur: &[Image],
    novel: &[Image],
    trajectories: &[Trajectory],
) -> Result<EvalReport> {
    if deblur.len() != ds.views.len() || trajectories.len() != ds.views.len() || novel.len() != ds.novel.len() {
        return Err(Error::Shape(format!(
            "{} renders / {} trajectories for {} views, {} novel renders for {} novel views",
            deblur.len(),
            trajectories.len(),
            ds.views.len(),
            novel.len(),
            ds.novel.len()
        )));
    }
    let mut notices = Vec::new();
    let mut entries = Vec::with_capacity(ds.views.len());
    for (v, ((view, img), traj)) in ds.views.iter().zip(deblur).zip(trajectories).enumerate() {
        let (est_ate, init_ate) = if traj.len() >= 2 {
            let gt: Vec<PoseSE3> = traj.timestamps.iter().map(|&t| view.shake.pose_at(t)).collect();
            let init = vec![view.init_pose; traj.len()];
            (Some(ate(&traj.poses, &gt)?), Some(ate(&init, &gt)?))
        } else {
            if v == 0 {
                notices.push("trajectory error skipped: fewer than two poses per view".to_string());
            }
            (None, None)
        };
        entries.push(DeblurEntry {
            view: v,
            render: score(img, &view.sharp_mid)?,
            blurry: score(&view.blurry, &view.sharp_mid)?,
            ate: est_ate,
            initial_ate: init_ate,
        });
    }
    if ds.novel.is_empty() {
        notices.push("no novel views in dataset".to_string());
    }
    let novel_entries: Vec<NovelEntry> = ds
        .novel
        .iter()
        .zip(novel)
        .enumerate()
        .map(|(j, (n, img))| Ok(NovelEntry { view: j, render: score(img, &n.image)? }))
        .collect::<Result<_>>()?;
    let opt_mean = |f: &dyn Fn(&DeblurEntry) -> Option<f64>| -> Option<f64> {
        let xs: Option<Vec<f64>> = entries.iter().map(f).collect();
        xs.map(|xs| mean(xs.into_iter()))
    };
    let averages = Averages {
        deblur_psnr: mean(entries.iter().map(|e| e.render.psnr)),
        deblur_ssim: mean(entries.iter().map(|e| e.render.ssim)),
        blurry_psnr: mean(entries.iter().map(|e| e.blurry.psnr)),
        blurry_ssim: mean(entries.iter().map(|e| e.blurry.ssim)),
        novel_psnr: mean(novel_entries.iter().map(|e| e.render.psnr)),
        novel_ssim: mean(novel_entries.iter().map(|e| e.render.ssim)),
        ate_trans_rmse: opt_mean(&|e| e.ate.as_ref().map(|a| a.trans_rmse)),
        ate_trans_std: opt_mean(&|e| e.ate.as_ref().map(|a| a.trans_std)),
        ate_rot_rmse: opt_mean(&|e| e.ate.as_ref().map(|a| a.rot_rmse)),
        initial_ate_trans_rmse: opt_mean(&|e| e.initial_ate.as_ref().map(|a| a.trans_rmse)),
    };
    Ok(EvalReport { deblurring_views: entries, novel_views: novel_entries, averages, notices })
}

/// Renders mid-exposure and novel views from the field and scores them.
pub fn evaluate(
    ds: &Dataset,
    field: &FieldParams,
    coarse: Option<&FieldParams>,
    trajectories: &[Trajectory],
    samples: usize,
) -> Result<EvalReport> {
    let k = &ds.intrinsics;
    let fields = FieldPair { fine: field, coarse };
    let learned_mid: Vec<PoseSE3> = trajectories.iter().map(Trajectory::midpoint_pose).collect();
    let deblur = learned_mid
        .iter()
        .map(|p| render_image(fields, k, p, samples, DepthSampling::Midpoint))
        .collect::<Result<Vec<_>>>()?;
    let g = gt_to_learned(&ds.gt_mid_poses(), &learned_mid);
    let novel = ds
        .novel
        .iter()
        .map(|n| render_image(fields, k, &g.compose(&n.pose), samples, DepthSampling::Midpoint))
        .collect::<Result<Vec<_>>>()?;
    evaluate_renders(ds, &deblur, &novel, trajectories)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{make_dataset, DatasetConfig};

    fn dataset() -> Dataset {
        make_dataset(&DatasetConfig { views: 3, novel_views: 2, width: 12, height: 12, substeps: 50, ..DatasetConfig::default() }).unwrap()
    }

    fn true_trajectories(ds: &Dataset, p: usize) -> Vec<Trajectory> {
        ds.views
            .iter()
            .map(|v| {
                let ts = crate::lie::even_timestamps(v.exposure.0, v.exposure.1, p);
                let poses = ts.iter().map(|&t| v.shake.pose_at(t)).collect();
                Trajectory::new(ts, poses).unwrap()
            })
            .collect()
    }

    #[test]
    fn oracle_renders_and_poses_score_perfectly() {
        let ds = dataset();
        let deblur: Vec<Image> = ds.views.iter().map(|v| v.sharp_mid.clone()).collect();
        let novel: Vec<Image> = ds.novel.iter().map(|n| n.image.clone()).collect();
        let r = evaluate_renders(&ds, &deblur, &novel, &true_trajectories(&ds, 5)).unwrap();
        assert_eq!(r.averages.deblur_psnr, f64::INFINITY);
        assert_eq!(r.averages.novel_psnr, f64::INFINITY);
        assert_eq!(r.averages.ate_trans_rmse, Some(0.0));
        assert_eq!(r.deblurring_views.len(), 3);
        assert_eq!(r.novel_views.len(), 2);
        let json = r.to_json().unwrap();
        assert!(json.contains("\"inf\""));
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.averages.deblur_psnr, f64::INFINITY);
    }

    #[test]
    fn averages_are_means_of_entries() {
        let ds = dataset();
        let deblur: Vec<Image> = ds.views.iter().map(|v| v.blurry.clone()).collect();
        let novel: Vec<Image> = ds.novel.iter().map(|_| Image::filled(12, 12, [0.5; 3])).collect();
        let trajs: Vec<Trajectory> =
            ds.views.iter().map(|v| Trajectory::new(vec![v.exposure.0, v.exposure.1], vec![v.init_pose; 2]).unwrap()).collect();
        let r = evaluate_renders(&ds, &deblur, &novel, &trajs).unwrap();
        let n = r.deblurring_views.len() as f64;
        let mean_psnr = r.deblurring_views.iter().map(|e| e.render.psnr).sum::<f64>() / n;
        assert!((r.averages.deblur_psnr - mean_psnr).abs() < 1e-12);
        let mean_ate = r.deblurring_views.iter().map(|e| e.ate.as_ref().unwrap().trans_rmse).sum::<f64>() / n;
        assert!((r.averages.ate_trans_rmse.unwrap() - mean_ate).abs() < 1e-12);
        // Rendering the blurry frame scores exactly like the blurry baseline.
        assert_eq!(r.averages.deblur_psnr, r.averages.blurry_psnr);
    }

    #[test]
    fn single_pose_runs_skip_trajectory_error_with_notice() {
        let ds = dataset();
        let deblur: Vec<Image> = ds.views.iter().map(|v| v.sharp_mid.clone()).collect();
        let novel: Vec<Image> = ds.novel.iter().map(|n| n.image.clone()).collect();
        let r = evaluate_renders(&ds, &deblur, &novel, &true_trajectories(&ds, 1)).unwrap();
        assert_eq!(r.averages.ate_trans_rmse, None);
        assert_eq!(r.notices.len(), 1);
        assert!(evaluate_renders(&ds, &deblur[..1], &novel, &true_trajectories(&ds, 1)).is_err());
    }
}
