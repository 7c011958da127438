//! Pinhole camera model, 2D keypoint containers, keypoint normalization,
//! and the geometric distance baseline.
//!
//! Camera frame convention: x right, y down, z forward (into the scene).
//! Pixel coordinates grow right and down; a joint projects to
//! u = fx * x / z + cx, v = fy * y / z + cy.

use crate::error::{Error, Result};
use crate::skeleton::{joint, NUM_JOINTS};

/// Pinhole intrinsics; focal lengths in pixels, principal point in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx.is_finite() && fy.is_finite() && cx.is_finite() && cy.is_finite()) {
            return Err(Error::InvalidParameter("intrinsics must be finite".into()));
        }
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }
}

/// One detected joint in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Joint2D {
    pub u: f64,
    pub v: f64,
    pub visible: bool,
}

/// A 17-joint pedestrian detection with an optional pixel bounding box
/// `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Keypoints2D {
    joints: [Joint2D; NUM_JOINTS],
    bbox: Option<[f64; 4]>,
}

/// Minimum visible joints required before normalization is meaningful.
pub const MIN_VISIBLE_JOINTS: usize = 4;

impl Keypoints2D {
    pub fn new(joints: [Joint2D; NUM_JOINTS], bbox: Option<[f64; 4]>) -> Result<Self> {
        for (i, j) in joints.iter().enumerate() {
            if j.visible && !(j.u.is_finite() && j.v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "visible joint {i} has non-finite coordinates"
                )));
            }
        }
        if let Some([x1, y1, x2, y2]) = bbox {
            let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
            if !finite || x1 >= x2 || y1 >= y2 {
                return Err(Error::InvalidInput(format!(
                    "bbox must satisfy x1 < x2 and y1 < y2, got [{x1}, {y1}, {x2}, {y2}]"
                )));
            }
        }
        Ok(Self { joints, bbox })
    }

    pub fn joints(&self) -> &[Joint2D; NUM_JOINTS] {
        &self.joints
    }

    pub fn bbox(&self) -> Option<[f64; 4]> {
        self.bbox
    }

    pub fn visible_count(&self) -> usize {
        self.joints.iter().filter(|j| j.visible).count()
    }
}

/// Projects a camera-frame point with z > 0 to pixel coordinates.
pub fn project_point(point: [f64; 3], k: &CameraIntrinsics) -> Result<[f64; 2]> {
    let [x, y, z] = point;
    if !(x.is_finite() && y.is_finite() && z.is_finite()) {
        return Err(Error::InvalidInput("point must be finite".into()));
    }
    if z <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "point must lie in front of the camera, got z={z}"
        )));
    }
    Ok([k.fx * x / z + k.cx, k.fy * y / z + k.cy])
}

/// Inverse of [`project_point`] at a known depth.
pub fn back_project(uv: [f64; 2], depth: f64, k: &CameraIntrinsics) -> [f64; 3] {
    [
        (uv[0] - k.cx) / k.fx * depth,
        (uv[1] - k.cy) / k.fy * depth,
        depth,
    ]
}

/// Keypoints mapped into normalized image coordinates: visible joints
/// become ((u - cx) / fx, (v - cy) / fy), invisible joints map to (0, 0)
/// with the mask retained alongside.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedKeypoints {
    pub coords: [f64; 2 * NUM_JOINTS],
    pub visible: [bool; NUM_JOINTS],
}

impl NormalizedKeypoints {
    /// Flattens into the 51-value network input: 34 coordinates followed
    /// by 17 visibility flags (1.0 / 0.0).
    pub fn to_input(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(3 * NUM_JOINTS);
        out.extend_from_slice(&self.coords);
        out.extend(self.visible.iter().map(|&v| if v { 1.0 } else { 0.0 }));
        out
    }
}

/// Normalizes keypoints by the intrinsics; requires at least
/// [`MIN_VISIBLE_JOINTS`] visible joints.
pub fn normalize_keypoints(
    kp: &Keypoints2D,
    k: &CameraIntrinsics,
) -> Result<NormalizedKeypoints> {
    if kp.visible_count() < MIN_VISIBLE_JOINTS {
        return Err(Error::InvalidInput(format!(
            "need at least {MIN_VISIBLE_JOINTS} visible joints, got {}",
            kp.visible_count()
        )));
    }
    let mut coords = [0.0; 2 * NUM_JOINTS];
    let mut visible = [false; NUM_JOINTS];
    for (i, j) in kp.joints().iter().enumerate() {
        visible[i] = j.visible;
        if j.visible {
            coords[2 * i] = (j.u - k.cx) / k.fx;
            coords[2 * i + 1] = (j.v - k.cy) / k.fy;
        }
    }
    Ok(NormalizedKeypoints { coords, visible })
}

/// Distance from pixel height under a known (assumed) pedestrian height.
///
/// Depth comes from similar triangles: the head-to-ankle pixel extent of
/// a pedestrian of height h at depth z is fy * h / z. The depth estimate
/// is then corrected to Euclidean distance along the viewing ray of the
/// body midpoint (hip midpoint when both hips are visible, otherwise the
/// midpoint of the head and the ankle centroid).
///
/// Requires the nose and at least one ankle visible.
pub fn geometric_distance(
    kp: &Keypoints2D,
    k: &CameraIntrinsics,
    assumed_height: f64,
) -> Result<f64> {
    if !(assumed_height.is_finite() && assumed_height > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "assumed height must be positive, got {assumed_height}"
        )));
    }
    let joints = kp.joints();
    let head = &joints[joint::NOSE];
    if !head.visible {
        return Err(Error::InvalidInput(
            "geometric distance needs the head joint visible".into(),
        ));
    }
    let ankles: Vec<&Joint2D> = [&joints[joint::LEFT_ANKLE], &joints[joint::RIGHT_ANKLE]]
        .into_iter()
        .filter(|j| j.visible)
        .collect();
    if ankles.is_empty() {
        return Err(Error::InvalidInput(
            "geometric distance needs at least one ankle visible".into(),
        ));
    }
    let ankle_u = ankles.iter().map(|j| j.u).sum::<f64>() / ankles.len() as f64;
    let ankle_v = ankles.iter().map(|j| j.v).sum::<f64>() / ankles.len() as f64;
    let pixel_height = ankle_v - head.v;
    if pixel_height <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "degenerate pixel height {pixel_height}"
        )));
    }
    let depth = k.fy * assumed_height / pixel_height;

    let (mid_u, mid_v) = {
        let lh = &joints[joint::LEFT_HIP];
        let rh = &joints[joint::RIGHT_HIP];
        if lh.visible && rh.visible {
            ((lh.u + rh.u) / 2.0, (lh.v + rh.v) / 2.0)
        } else {
            ((head.u + ankle_u) / 2.0, (head.v + ankle_v) / 2.0)
        }
    };
    let dx = (mid_u - k.cx) / k.fx;
    let dy = (mid_v - k.cy) / k.fy;
    Ok(depth * (dx * dx + dy * dy + 1.0).sqrt())
}
