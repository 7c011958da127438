//! Canonical standing-pedestrian joint layout in the 17-joint COCO order,
//! plus its plain-text exchange format.
//!
//! Offsets live in a body frame: origin at the hip midpoint, x lateral,
//! y pointing down, z depth. The unit of length is the head-to-ankle
//! vertical extent, which is exactly 1.0 by construction; scaling the
//! template by a pedestrian height in meters therefore makes that extent
//! equal the height. All constants are exact binary fractions so the unit
//! extent holds in f64 without rounding.

use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 17;

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

/// Joint indices into the COCO ordering.
pub mod joint {
    pub const NOSE: usize = 0;
    pub const LEFT_EYE: usize = 1;
    pub const RIGHT_EYE: usize = 2;
    pub const LEFT_EAR: usize = 3;
    pub const RIGHT_EAR: usize = 4;
    pub const LEFT_SHOULDER: usize = 5;
    pub const RIGHT_SHOULDER: usize = 6;
    pub const LEFT_ELBOW: usize = 7;
    pub const RIGHT_ELBOW: usize = 8;
    pub const LEFT_WRIST: usize = 9;
    pub const RIGHT_WRIST: usize = 10;
    pub const LEFT_HIP: usize = 11;
    pub const RIGHT_HIP: usize = 12;
    pub const LEFT_KNEE: usize = 13;
    pub const RIGHT_KNEE: usize = 14;
    pub const LEFT_ANKLE: usize = 15;
    pub const RIGHT_ANKLE: usize = 16;
}

/// Template y of the nose and ankles; the extent NOSE_Y to ANKLE_Y is the
/// unit of scale. Exact in f64: -7/16 and 9/16.
pub const NOSE_Y: f64 = -0.4375;
pub const ANKLE_Y: f64 = 0.5625;

const OFFSETS: [[f64; 3]; NUM_JOINTS] = [
    [0.0, NOSE_Y, 0.0],           // nose
    [0.03125, -0.453125, 0.0],    // left_eye
    [-0.03125, -0.453125, 0.0],   // right_eye
    [0.0625, NOSE_Y, 0.0],        // left_ear
    [-0.0625, NOSE_Y, 0.0],       // right_ear
    [0.125, -0.328125, 0.0],      // left_shoulder
    [-0.125, -0.328125, 0.0],     // right_shoulder
    [0.15625, -0.109375, 0.0],    // left_elbow
    [-0.15625, -0.109375, 0.0],   // right_elbow
    [0.171875, 0.046875, 0.0],    // left_wrist
    [-0.171875, 0.046875, 0.0],   // right_wrist
    [0.0625, 0.0, 0.0],           // left_hip
    [-0.0625, 0.0, 0.0],          // right_hip
    [0.078125, 0.28125, 0.0],     // left_knee
    [-0.078125, 0.28125, 0.0],    // right_knee
    [0.078125, ANKLE_Y, 0.0],     // left_ankle
    [-0.078125, ANKLE_Y, 0.0],    // right_ankle
];

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonTemplate {
    offsets: [[f64; 3]; NUM_JOINTS],
}

impl SkeletonTemplate {
    /// The canonical standing pose.
    pub fn standing() -> Self {
        SkeletonTemplate { offsets: OFFSETS }
    }

    pub fn offsets(&self) -> &[[f64; 3]; NUM_JOINTS] {
        &self.offsets
    }

    /// Head-to-ankle vertical extent: max ankle y minus nose y.
    pub fn vertical_extent(&self) -> f64 {
        let nose = self.offsets[joint::NOSE][1];
        let ankle = self.offsets[joint::LEFT_ANKLE][1].max(self.offsets[joint::RIGHT_ANKLE][1]);
        ankle - nose
    }

    /// Serializes as one `name x y z` line per joint, in COCO order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, o) in JOINT_NAMES.iter().zip(self.offsets.iter()) {
            out.push_str(&format!("{} {} {} {}\n", name, o[0], o[1], o[2]));
        }
        out
    }

    /// Parses the [`to_text`](Self::to_text) format; joint names must
    /// appear in COCO order.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut offsets = [[0.0; 3]; NUM_JOINTS];
        let mut count = 0;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if count >= NUM_JOINTS {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: format!("expected {NUM_JOINTS} joints, found more"),
                });
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: format!("expected `name x y z`, got {} fields", fields.len()),
                });
            }
            if fields[0] != JOINT_NAMES[count] {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: format!(
                        "expected joint `{}`, got `{}`",
                        JOINT_NAMES[count], fields[0]
                    ),
                });
            }
            for (k, f) in fields[1..].iter().enumerate() {
                offsets[count][k] = f.parse::<f64>().map_err(|e| Error::Parse {
                    line: lineno + 1,
                    message: format!("bad float `{f}`: {e}"),
                })?;
            }
            count += 1;
        }
        if count != NUM_JOINTS {
            return Err(Error::Schema(format!(
                "skeleton table has {count} joints, expected {NUM_JOINTS}"
            )));
        }
        Ok(SkeletonTemplate { offsets })
    }
}

/// Joints the synthetic generator may jitter in the body plane. The
/// nose, hips, and ankles stay rigid so the geometric estimator's inputs
/// are exact projections of the template.
pub const JITTERABLE: [usize; 12] = [
    joint::LEFT_EYE,
    joint::RIGHT_EYE,
    joint::LEFT_EAR,
    joint::RIGHT_EAR,
    joint::LEFT_SHOULDER,
    joint::RIGHT_SHOULDER,
    joint::LEFT_ELBOW,
    joint::RIGHT_ELBOW,
    joint::LEFT_WRIST,
    joint::RIGHT_WRIST,
    joint::LEFT_KNEE,
    joint::RIGHT_KNEE,
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vertical_extent_is_exactly_one() {
        assert_eq!(SkeletonTemplate::standing().vertical_extent(), 1.0);
    }

    #[test]
    fn text_round_trip_is_identity() {
        let t = SkeletonTemplate::standing();
        let text = t.to_text();
        assert_eq!(text.lines().count(), NUM_JOINTS);
        let back = SkeletonTemplate::from_text(&text).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn from_text_rejects_wrong_joint_order_and_truncation() {
        let t = SkeletonTemplate::standing().to_text();
        let swapped = t.replacen("nose", "left_eye", 1);
        assert!(SkeletonTemplate::from_text(&swapped).is_err());
        let truncated: String = t.lines().take(5).collect::<Vec<_>>().join("\n");
        assert!(SkeletonTemplate::from_text(&truncated).is_err());
    }

    #[test]
    fn left_right_pairs_mirror_in_x() {
        let o = SkeletonTemplate::standing();
        let off = o.offsets();
        for pair in [(1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12), (13, 14), (15, 16)] {
            assert_eq!(off[pair.0][0], -off[pair.1][0]);
            assert_eq!(off[pair.0][1], off[pair.1][1]);
        }
    }

    #[test]
    fn hips_are_the_origin_midpoint() {
        let off = SkeletonTemplate::standing();
        let l = off.offsets()[joint::LEFT_HIP];
        let r = off.offsets()[joint::RIGHT_HIP];
        assert_eq!((l[0] + r[0]) / 2.0, 0.0);
        assert_eq!(l[1], 0.0);
        assert_eq!(r[1], 0.0);
    }
}
