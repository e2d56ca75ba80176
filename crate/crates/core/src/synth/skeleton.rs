use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg3::{add3, mat_mul, mat_vec, norm3, rotation_x, rotation_y, rotation_z, Mat3, Vec3, IDENTITY};

/// Per-axis rotation range `(min, max)` in radians, for rotations about x, y, z.
pub type AngleLimits = [(f64, f64); 3];

#[derive(Clone, Debug, PartialEq)]
pub struct JointSpec {
    pub name: &'static str,
    pub parent: Option<usize>,
    /// Rest-pose offset from the parent joint, meters (y up).
    pub offset: Vec3,
    /// Limits of the rotation applied at this joint to its child bones.
    pub limits: AngleLimits,
}

/// Kinematic tree rooted at the pelvis; parents always precede children.
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    joints: Vec<JointSpec>,
}

const FIXED: AngleLimits = [(0.0, 0.0); 3];

const fn joint(name: &'static str, parent: Option<usize>, offset: Vec3, limits: AngleLimits) -> JointSpec {
    JointSpec {
        name,
        parent,
        offset,
        limits,
    }
}

/// Human3.6M-style 17-joint layout. The root's limits hold the global body
/// orientation (mostly yaw about the vertical axis).
fn h36m_joints() -> Vec<JointSpec> {
    vec![
        joint("pelvis", None, [0.0, 0.0, 0.0], [(-0.2, 0.2), (-0.8, 0.8), (-0.1, 0.1)]),
        joint("right_hip", Some(0), [-0.13, 0.0, 0.0], [(-1.6, 0.4), (-0.4, 0.4), (-0.5, 0.2)]),
        joint("right_knee", Some(1), [0.0, -0.44, 0.0], [(0.0, 2.0), (0.0, 0.0), (0.0, 0.0)]),
        joint("right_ankle", Some(2), [0.0, -0.44, 0.0], FIXED),
        joint("left_hip", Some(0), [0.13, 0.0, 0.0], [(-1.6, 0.4), (-0.4, 0.4), (-0.2, 0.5)]),
        joint("left_knee", Some(4), [0.0, -0.44, 0.0], [(0.0, 2.0), (0.0, 0.0), (0.0, 0.0)]),
        joint("left_ankle", Some(5), [0.0, -0.44, 0.0], FIXED),
        joint("spine", Some(0), [0.0, 0.23, 0.0], [(-0.3, 0.6), (-0.4, 0.4), (-0.3, 0.3)]),
        joint("thorax", Some(7), [0.0, 0.25, 0.0], [(-0.2, 0.2), (-0.3, 0.3), (-0.2, 0.2)]),
        joint("neck", Some(8), [0.0, 0.10, 0.0], [(-0.4, 0.5), (-0.6, 0.6), (-0.3, 0.3)]),
        joint("head", Some(9), [0.0, 0.12, 0.02], FIXED),
        joint("left_shoulder", Some(8), [0.16, 0.0, 0.0], [(-2.2, 0.8), (-0.6, 0.6), (-0.3, 2.4)]),
        joint("left_elbow", Some(11), [0.0, -0.28, 0.0], [(-2.2, 0.0), (0.0, 0.0), (0.0, 0.0)]),
        joint("left_wrist", Some(12), [0.0, -0.25, 0.0], FIXED),
        joint("right_shoulder", Some(8), [-0.16, 0.0, 0.0], [(-2.2, 0.8), (-0.6, 0.6), (-2.4, 0.3)]),
        joint("right_elbow", Some(14), [0.0, -0.28, 0.0], [(-2.2, 0.0), (0.0, 0.0), (0.0, 0.0)]),
        joint("right_wrist", Some(15), [0.0, -0.25, 0.0], FIXED),
    ]
}

pub const MAX_JOINTS: usize = 17;

impl Skeleton {
    pub fn h36m() -> Self {
        Skeleton {
            joints: h36m_joints(),
        }
    }

    /// The first `count` joints of the 17-joint layout (a valid sub-tree since
    /// parents precede children).
    pub fn with_joints(count: usize) -> Result<Self> {
        if !(3..=MAX_JOINTS).contains(&count) {
            return Err(Error::invalid(format!(
                "joint count must be in 3..={MAX_JOINTS}, got {count}"
            )));
        }
        let mut joints = h36m_joints();
        joints.truncate(count);
        Skeleton::from_joints(joints)
    }

    pub fn from_joints(joints: Vec<JointSpec>) -> Result<Self> {
        if joints.is_empty() || joints[0].parent.is_some() {
            return Err(Error::invalid("joint 0 must be the parentless root"));
        }
        for (i, j) in joints.iter().enumerate().skip(1) {
            match j.parent {
                Some(p) if p < i => {}
                _ => return Err(Error::invalid(format!("joint {i} must have an earlier parent"))),
            }
            if !(norm3(&j.offset) > 0.0) {
                return Err(Error::invalid(format!("bone to joint {i} has zero length")));
            }
        }
        Ok(Skeleton { joints })
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn joints(&self) -> &[JointSpec] {
        &self.joints
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        self.joints[j].parent
    }

    /// `(child, parent, length)` for every bone.
    pub fn bones(&self) -> Vec<(usize, usize, f64)> {
        self.joints
            .iter()
            .enumerate()
            .filter_map(|(i, j)| j.parent.map(|p| (i, p, norm3(&j.offset))))
            .collect()
    }

    pub fn rest_pose(&self) -> Vec<Vec3> {
        forward_kinematics(self, &vec![[0.0; 3]; self.len()]).expect("rest angles have the right length")
    }
}

fn local_rotation(a: &Vec3) -> Mat3 {
    mat_mul(&rotation_z(a[2]), &mat_mul(&rotation_y(a[1]), &rotation_x(a[0])))
}

/// Joint positions for per-joint `(x, y, z)` rotation angles; root at the origin.
pub fn forward_kinematics(skeleton: &Skeleton, angles: &[Vec3]) -> Result<Vec<Vec3>> {
    if angles.len() != skeleton.len() {
        return Err(Error::invalid(format!(
            "{} joint angles for a {}-joint skeleton",
            angles.len(),
            skeleton.len()
        )));
    }
    let mut world = vec![IDENTITY; skeleton.len()];
    let mut pos = vec![[0.0; 3]; skeleton.len()];
    for (i, j) in skeleton.joints.iter().enumerate() {
        let local = local_rotation(&angles[i]);
        match j.parent {
            None => world[i] = local,
            Some(p) => {
                pos[i] = add3(&pos[p], &mat_vec(&world[p], &j.offset));
                world[i] = mat_mul(&world[p], &local);
            }
        }
    }
    Ok(pos)
}

pub fn sample_angles<R: Rng + ?Sized>(skeleton: &Skeleton, rng: &mut R) -> Vec<Vec3> {
    skeleton
        .joints
        .iter()
        .map(|j| {
            std::array::from_fn(|axis| {
                let (lo, hi) = j.limits[axis];
                if hi > lo {
                    rng.random_range(lo..=hi)
                } else {
                    lo
                }
            })
        })
        .collect()
}

pub fn sample_pose3d<R: Rng + ?Sized>(skeleton: &Skeleton, rng: &mut R) -> Vec<Vec3> {
    let angles = sample_angles(skeleton, rng);
    forward_kinematics(skeleton, &angles).expect("sampled angles match the skeleton")
}
