use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg3::{add3, cross3, mat_vec, norm3, scale3, sub3, Mat3, Vec3};

/// Joints closer than this to the image plane (meters along the optical axis)
/// are rejected.
pub const NEAR_PLANE: f64 = 1e-2;
/// Square sensor size in pixels; the principal point sits at its center.
pub const IMAGE_SIZE: f64 = 1000.0;
pub const DEFAULT_FOCAL: f64 = 1000.0;

/// Pinhole camera: `x_cam = R x_world + t`, pixels `f x/z + c`.
/// Camera axes are x right, y down, z forward.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub focal: f64,
    pub principal: [f64; 2],
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Camera {
    /// Camera at `eye` aimed at `target`, with world +y as up.
    pub fn look_at(eye: Vec3, target: Vec3, focal: f64) -> Result<Camera> {
        let d = sub3(&target, &eye);
        let dist = norm3(&d);
        if !(dist > 0.0) {
            return Err(Error::invalid("camera eye coincides with its target"));
        }
        let fwd = scale3(&d, 1.0 / dist);
        let right = cross3(&fwd, &[0.0, 1.0, 0.0]);
        let rn = norm3(&right);
        if rn < 1e-9 {
            return Err(Error::invalid("camera looks straight up or down"));
        }
        let right = scale3(&right, 1.0 / rn);
        let down = cross3(&fwd, &right);
        let rotation = [right, down, fwd];
        let translation = scale3(&mat_vec(&rotation, &eye), -1.0);
        Ok(Camera {
            focal,
            principal: [IMAGE_SIZE / 2.0; 2],
            rotation,
            translation,
        })
    }

    /// Random viewpoint looking at the origin. `spread` (radians) bounds the
    /// azimuth around the frontal view; elevation and distance vary mildly.
    pub fn sample<R: Rng + ?Sized>(spread: f64, rng: &mut R) -> Result<Camera> {
        let yaw = if spread > 0.0 {
            rng.random_range(-spread..=spread)
        } else {
            0.0
        };
        let pitch: f64 = rng.random_range(-0.05..=0.25);
        let dist: f64 = rng.random_range(4.5..=5.5);
        // Subjects face +z, so the frontal camera sits on the +z axis.
        let eye = [
            dist * yaw.sin() * pitch.cos(),
            dist * pitch.sin(),
            dist * yaw.cos() * pitch.cos(),
        ];
        Camera::look_at(eye, [0.0; 3], DEFAULT_FOCAL)
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        add3(&mat_vec(&self.rotation, p), &self.translation)
    }

    pub fn to_flat(&self) -> [f64; 15] {
        let mut out = [0.0; 15];
        out[0] = self.focal;
        out[1..3].copy_from_slice(&self.principal);
        for r in 0..3 {
            out[3 + 3 * r..6 + 3 * r].copy_from_slice(&self.rotation[r]);
        }
        out[12..15].copy_from_slice(&self.translation);
        out
    }

    pub fn from_flat(v: &[f64]) -> Result<Camera> {
        if v.len() != 15 {
            return Err(Error::invalid("camera record has 15 values"));
        }
        let mut rotation = [[0.0; 3]; 3];
        for (r, row) in rotation.iter_mut().enumerate() {
            row.copy_from_slice(&v[3 + 3 * r..6 + 3 * r]);
        }
        Ok(Camera {
            focal: v[0],
            principal: [v[1], v[2]],
            rotation,
            translation: [v[12], v[13], v[14]],
        })
    }
}

/// Tight 2D box in pixels: `center` and `size = max(width, height)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub center: [f64; 2],
    pub size: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// Box-normalized keypoints in [0,1]².
    pub keypoints: Vec<[f64; 2]>,
    pub bbox: BBox,
}

pub fn project_pixels(pose3d: &[Vec3], camera: &Camera) -> Result<Vec<[f64; 2]>> {
    pose3d
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let c = camera.to_camera(p);
            if !(c[2] > NEAR_PLANE) {
                return Err(Error::invalid(format!(
                    "invalid camera: joint {j} has depth {:.4} behind the near plane",
                    c[2]
                )));
            }
            Ok([
                camera.focal * c[0] / c[2] + camera.principal[0],
                camera.focal * c[1] / c[2] + camera.principal[1],
            ])
        })
        .collect()
}

/// Normalizes pixel keypoints by their tight square box:
/// `u' = (u - center) / size + 1/2`.
pub fn normalize_keypoints(pixels: &[[f64; 2]]) -> Result<Projection> {
    if pixels.is_empty() {
        return Err(Error::invalid("no keypoints to normalize"));
    }
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in pixels {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let size = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    if !(size > 0.0) || !size.is_finite() {
        return Err(Error::Degenerate("keypoints span an empty bounding box".into()));
    }
    let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
    let keypoints = pixels
        .iter()
        .map(|p| {
            [
                ((p[0] - center[0]) / size + 0.5).clamp(0.0, 1.0),
                ((p[1] - center[1]) / size + 0.5).clamp(0.0, 1.0),
            ]
        })
        .collect();
    Ok(Projection {
        keypoints,
        bbox: BBox { center, size },
    })
}

pub fn project_to_2d(pose3d: &[Vec3], camera: &Camera) -> Result<Projection> {
    normalize_keypoints(&project_pixels(pose3d, camera)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::skeleton::Skeleton;

    #[test]
    fn frontal_rest_pose_projects_symmetrically() {
        let pose = Skeleton::h36m().rest_pose();
        let mut pose = pose;
        // Drop the head's forward offset so the pose is exactly mirror symmetric.
        pose[10][2] = 0.0;
        let cam = Camera::look_at([0.0, 0.0, 5.0], [0.0; 3], DEFAULT_FOCAL).unwrap();
        let p = project_to_2d(&pose, &cam).unwrap();
        for (l, r) in [(4, 1), (5, 2), (6, 3), (11, 14), (12, 15), (13, 16)] {
            assert!((p.keypoints[l][0] - (1.0 - p.keypoints[r][0])).abs() < 1e-12);
            assert!((p.keypoints[l][1] - p.keypoints[r][1]).abs() < 1e-12);
        }
        assert!((p.keypoints[0][0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn focal_length_cancels() {
        let pose = Skeleton::h36m().rest_pose();
        let mut cam = Camera::look_at([1.0, 0.5, 4.0], [0.0; 3], 800.0).unwrap();
        let a = project_to_2d(&pose, &cam).unwrap();
        cam.focal *= 2.0;
        let b = project_to_2d(&pose, &cam).unwrap();
        for (x, y) in a.keypoints.iter().zip(&b.keypoints) {
            assert!((x[0] - y[0]).abs() < 1e-12 && (x[1] - y[1]).abs() < 1e-12);
        }
        assert!((b.bbox.size - 2.0 * a.bbox.size).abs() < 1e-9);
    }

    #[test]
    fn behind_camera_is_rejected() {
        let cam = Camera::look_at([0.0, 0.0, 5.0], [0.0; 3], DEFAULT_FOCAL).unwrap();
        let pose = vec![[0.0, 0.0, 0.0], [0.0, 0.0, 6.0]];
        assert!(matches!(project_to_2d(&pose, &cam), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn flat_round_trip() {
        let cam = Camera::look_at([1.0, 0.5, 4.0], [0.0; 3], 800.0).unwrap();
        assert_eq!(Camera::from_flat(&cam.to_flat()).unwrap(), cam);
    }
}
