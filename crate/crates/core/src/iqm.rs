//! Image-quality metrics minimized by the autofocus loop. Lower is better
//! for every metric.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::SliceImage;
use crate::motion::{MotionTrajectory, RpeEvaluator};
use crate::regressor::RegressorModel;

pub const DEFAULT_BINS: usize = 256;

/// Shannon entropy (nats) of the `n_bins` histogram over the image's own
/// [min, max] range. Constant images have zero entropy.
pub fn entropy_iqm(img: &SliceImage, n_bins: usize) -> Result<f64> {
    if n_bins < 2 {
        return Err(Error::Config("entropy needs at least 2 bins".into()));
    }
    let (lo, hi) = img.min_max();
    if !(hi > lo) {
        return Ok(0.0);
    }
    let mut counts = vec![0usize; n_bins];
    let width = hi - lo;
    for v in img.pixels() {
        let bin = (((v - lo) / width) * n_bins as f64) as usize;
        counts[bin.min(n_bins - 1)] += 1;
    }
    let total = img.pixels().len() as f64;
    Ok(counts
        .iter()
        .filter(|c| **c > 0)
        .map(|c| {
            let p = *c as f64 / total;
            -p * p.ln()
        })
        .sum())
}

/// Isotropic total variation with forward differences; the difference
/// across the last row and column is zero.
pub fn total_variation(img: &SliceImage) -> Result<f64> {
    let n = img.size();
    if n < 2 {
        return Err(Error::Config("total variation needs at least 2x2 pixels".into()));
    }
    let mut tv = 0.0;
    for r in 0..n {
        for c in 0..n {
            let v = img.get(r, c);
            let dx = if c + 1 < n { img.get(r, c + 1) - v } else { 0.0 };
            let dy = if r + 1 < n { img.get(r + 1, c) - v } else { 0.0 };
            tv += (dx * dx + dy * dy).sqrt();
        }
    }
    Ok(tv)
}

/// Metric selector as it appears in configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IqmKind {
    Entropy,
    TotalVariation,
    Learned,
    OracleRpe,
}

impl IqmKind {
    pub fn name(&self) -> &'static str {
        match self {
            IqmKind::Entropy => "entropy",
            IqmKind::TotalVariation => "total_variation",
            IqmKind::Learned => "learned",
            IqmKind::OracleRpe => "oracle_rpe",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "entropy" => Ok(IqmKind::Entropy),
            "total_variation" | "tv" => Ok(IqmKind::TotalVariation),
            "learned" => Ok(IqmKind::Learned),
            "oracle_rpe" | "oracle" => Ok(IqmKind::OracleRpe),
            other => Err(Error::Config(format!("unknown image-quality metric '{other}'"))),
        }
    }
}

/// Ground truth for the simulation-only RPE oracle.
#[derive(Clone, Copy, Debug)]
pub struct OracleRef<'a> {
    pub evaluator: &'a RpeEvaluator,
    pub truth: &'a MotionTrajectory,
}

/// A metric with its resources attached.
#[derive(Clone, Copy, Debug)]
pub enum Iqm<'a> {
    Entropy { bins: usize },
    TotalVariation,
    Learned(&'a RegressorModel),
    OracleRpe(OracleRef<'a>),
}

impl<'a> Iqm<'a> {
    pub fn resolve(
        kind: IqmKind,
        bins: usize,
        model: Option<&'a RegressorModel>,
        oracle: Option<OracleRef<'a>>,
    ) -> Result<Self> {
        match kind {
            IqmKind::Entropy => Ok(Iqm::Entropy { bins }),
            IqmKind::TotalVariation => Ok(Iqm::TotalVariation),
            IqmKind::Learned => model
                .map(Iqm::Learned)
                .ok_or_else(|| Error::Resource("learned metric requires a loaded regressor".into())),
            IqmKind::OracleRpe => oracle.map(Iqm::OracleRpe).ok_or_else(|| {
                Error::Resource("oracle metric requires a ground-truth trajectory".into())
            }),
        }
    }

    pub fn kind(&self) -> IqmKind {
        match self {
            Iqm::Entropy { .. } => IqmKind::Entropy,
            Iqm::TotalVariation => IqmKind::TotalVariation,
            Iqm::Learned(_) => IqmKind::Learned,
            Iqm::OracleRpe(_) => IqmKind::OracleRpe,
        }
    }
}

/// Scores a reconstruction. `candidate` is the trajectory the image was
/// reconstructed with; only the RPE oracle reads it.
pub fn evaluate_iqm(iqm: &Iqm<'_>, img: &SliceImage, candidate: &MotionTrajectory) -> Result<f64> {
    match iqm {
        Iqm::Entropy { bins } => entropy_iqm(img, *bins),
        Iqm::TotalVariation => total_variation(img),
        Iqm::Learned(model) => model.predict(img),
        Iqm::OracleRpe(o) => o.evaluator.rpe_between(candidate, o.truth),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn image(size: usize, px: Vec<f64>) -> SliceImage {
        SliceImage::from_pixels(size, 1.0, 0.0, px).unwrap()
    }

    #[test]
    fn constant_image_has_no_entropy_or_variation() {
        let img = image(8, vec![4.2; 64]);
        assert_eq!(entropy_iqm(&img, 256).unwrap(), 0.0);
        assert_eq!(total_variation(&img).unwrap(), 0.0);
    }

    #[test]
    fn two_level_image_has_ln2_entropy() {
        let px = (0..64).map(|k| if k % 2 == 0 { 1.0 } else { 3.0 }).collect();
        let e = entropy_iqm(&image(8, px), 2).unwrap();
        assert!((e - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn vertical_step_variation() {
        let (n, h) = (10, 2.5);
        let px = (0..n * n).map(|k| if k % n >= 4 { h } else { 0.0 }).collect();
        let tv = total_variation(&image(n, px)).unwrap();
        assert!((tv - h * n as f64).abs() < 1e-9);
    }

    #[test]
    fn too_few_bins_is_config_error() {
        assert!(entropy_iqm(&image(2, vec![0.0, 1.0, 2.0, 3.0]), 1).is_err());
    }

    #[test]
    fn learned_metric_requires_a_model() {
        assert!(matches!(
            Iqm::resolve(IqmKind::Learned, 256, None, None),
            Err(Error::Resource(_))
        ));
        assert!(matches!(
            Iqm::resolve(IqmKind::OracleRpe, 256, None, None),
            Err(Error::Resource(_))
        ));
    }

    #[test]
    fn entropy_dispatch_is_identity() {
        let px: Vec<f64> = (0..256).map(|k| ((k * 37) % 101) as f64).collect();
        let img = image(16, px);
        let iqm = Iqm::resolve(IqmKind::Entropy, 64, None, None).unwrap();
        let traj = MotionTrajectory::identity(1);
        assert_eq!(evaluate_iqm(&iqm, &img, &traj).unwrap(), entropy_iqm(&img, 64).unwrap());
    }

    #[test]
    fn kind_names_round_trip() {
        for k in [IqmKind::Entropy, IqmKind::TotalVariation, IqmKind::Learned, IqmKind::OracleRpe] {
            assert_eq!(IqmKind::parse(k.name()).unwrap(), k);
        }
        assert!(IqmKind::parse("sharpness").is_err());
    }

    proptest! {
        #[test]
        fn entropy_is_invariant_to_power_of_two_rescaling(
            px in proptest::collection::vec(-100.0f64..100.0, 64),
            exp in -4i32..4,
        ) {
            let img = image(8, px);
            let scaled = img.map(|v| v * 2f64.powi(exp));
            prop_assert_eq!(entropy_iqm(&img, 16).unwrap(), entropy_iqm(&scaled, 16).unwrap());
        }

        #[test]
        fn total_variation_is_absolutely_homogeneous(
            px in proptest::collection::vec(-10.0f64..10.0, 36),
            s in -5.0f64..5.0,
        ) {
            let img = image(6, px);
            let tv = total_variation(&img).unwrap();
            let scaled = total_variation(&img.map(|v| v * s)).unwrap();
            prop_assert!((scaled - s.abs() * tv).abs() <= 1e-12 * (1.0 + tv * s.abs()));
        }
    }
}
