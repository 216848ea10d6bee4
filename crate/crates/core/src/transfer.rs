//! Absolute and relative motion transfer rules.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::keypoints::KeypointSet;
use crate::mask::MaskVariant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum TransferMode {
    /// The driving mask comes straight from the current driving frame.
    #[default]
    Absolute,
    /// Source keypoints are displaced by the driving motion since its first frame.
    Relative,
}

impl TransferMode {
    /// Relative transfer needs keypoint centers, which only the circles mask keeps.
    pub fn check_variant(self, variant: MaskVariant) -> Result<()> {
        match (self, variant) {
            (TransferMode::Relative, MaskVariant::Heatmap) => Err(Error::IncompatibleMode(
                "relative transfer requires the circles mask".into(),
            )),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for TransferMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransferMode::Absolute => "absolute",
            TransferMode::Relative => "relative",
        })
    }
}

impl FromStr for TransferMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absolute" => Ok(TransferMode::Absolute),
            "relative" => Ok(TransferMode::Relative),
            other => Err(Error::Parse(format!("unknown transfer mode `{other}`"))),
        }
    }
}

/// `source + (driving_t − driving_first)`, clamped to `[-1, 1]` per coordinate.
pub fn relative_keypoints(
    source: &KeypointSet,
    driving_t: &KeypointSet,
    driving_first: &KeypointSet,
) -> Result<KeypointSet> {
    if source.len() != driving_t.len() || source.len() != driving_first.len() {
        return Err(Error::ConfigMismatch(format!(
            "keypoint counts differ: source {}, driving {}, first {}",
            source.len(),
            driving_t.len(),
            driving_first.len()
        )));
    }
    let points = source
        .points()
        .iter()
        .zip(driving_t.points())
        .zip(driving_first.points())
        .map(|((s, d), f)| {
            let mut out = [0.0f32; 2];
            for i in 0..2 {
                out[i] = (s[i] + (d[i] - f[i])).clamp(-1.0, 1.0);
            }
            out
        })
        .collect();
    KeypointSet::new(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kps(points: &[[f32; 2]]) -> KeypointSet {
        KeypointSet::new(points.to_vec()).unwrap()
    }

    #[test]
    fn zero_displacement_returns_source() {
        let src = kps(&[[0.3, -0.2], [-0.9, 0.9]]);
        let drv = kps(&[[0.1, 0.1], [0.5, -0.5]]);
        assert_eq!(relative_keypoints(&src, &drv, &drv).unwrap(), src);
    }

    #[test]
    fn displacement_is_added() {
        let out = relative_keypoints(&kps(&[[0.0, 0.0]]), &kps(&[[0.5, 0.3]]), &kps(&[[0.3, 0.4]]))
            .unwrap();
        let p = out.points()[0];
        assert!((p[0] - 0.2).abs() < 1e-6 && (p[1] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn clamps_at_border() {
        let src = kps(&[[0.95, 0.0]]);
        let out = relative_keypoints(&src, &kps(&[[0.2, 0.0]]), &kps(&[[0.0, 0.0]])).unwrap();
        // Unclamped sum would be 1.15.
        assert!(0.95f32 + 0.2 > 1.0);
        assert_eq!(out.points()[0], [1.0, 0.0]);
    }

    #[test]
    fn count_mismatch() {
        let a = kps(&[[0.0, 0.0]]);
        let b = kps(&[[0.0, 0.0], [0.1, 0.1]]);
        assert!(matches!(relative_keypoints(&a, &b, &b), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn relative_heatmap_is_rejected() {
        assert!(TransferMode::Relative.check_variant(MaskVariant::Heatmap).is_err());
        assert!(TransferMode::Relative.check_variant(MaskVariant::Circles).is_ok());
        assert!(TransferMode::Absolute.check_variant(MaskVariant::Heatmap).is_ok());
    }

    proptest! {
        #[test]
        fn identity_at_first_frame_is_bit_exact(
            pts in prop::collection::vec((-1.0f32..=1.0, -1.0f32..=1.0, -1.0f32..=1.0, -1.0f32..=1.0), 1..12),
        ) {
            let src = KeypointSet::new(pts.iter().map(|p| [p.0, p.1]).collect()).unwrap();
            let first = KeypointSet::new(pts.iter().map(|p| [p.2, p.3]).collect()).unwrap();
            prop_assert_eq!(relative_keypoints(&src, &first, &first).unwrap(), src);
        }
    }
}
