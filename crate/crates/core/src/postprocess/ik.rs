use std::collections::HashMap;
use std::path::Path;

use glam::{DMat3, DQuat, DVec3};
use serde::Deserialize;

use super::skeleton::Skeleton;
use crate::error::{Error, Result};

/// Parent-relative joint rotations plus the global root position.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonPose {
    pub rotations: Vec<DQuat>,
    pub root: DVec3,
    pub t: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IkSolution {
    pub rotations: Vec<DQuat>,
    /// Joints whose observed bone had zero length and kept the rest rotation.
    pub degenerate: Vec<bool>,
}

/// Orthonormal frame with the first axis along `up` and the second in the
/// plane of `up` and `side`.
fn torso_frame(up: DVec3, side: DVec3) -> Option<DMat3> {
    let e1 = up.try_normalize()?;
    let e2 = (side - e1 * side.dot(e1)).try_normalize()?;
    Some(DMat3::from_cols(e1, e2, e1.cross(e2)))
}

/// Joint rotations that reproduce every observed bone direction. The root
/// rotation aligns the rest torso (pelvis to neck, right to left hip) with
/// the observed one; every other joint gets the minimal swing from its rest
/// bone direction to the observed one. Twist is zero.
pub fn ik_solve(skeleton: &Skeleton, pose: &[DVec3]) -> Result<IkSolution> {
    let n = skeleton.len();
    if pose.len() != n {
        return Err(Error::invalid("ik_solve", format!("{} positions for {} joints", pose.len(), n)));
    }
    if pose.iter().any(|p| !p.is_finite()) {
        return Err(Error::invalid("ik_solve", "non-finite joint position"));
    }
    let mut rotations = vec![DQuat::IDENTITY; n];
    let mut degenerate = vec![false; n];

    let idx = |name: &str| skeleton.index_of(name);
    if let (Some(neck), Some(rh), Some(lh)) = (idx("neck"), idx("r_hip"), idx("l_hip")) {
        let rest = skeleton.rest_positions();
        let root = super::skeleton::ROOT;
        let frames = (
            torso_frame(pose[neck] - pose[root], pose[lh] - pose[rh]),
            torso_frame(rest[neck] - rest[root], rest[lh] - rest[rh]),
        );
        match frames {
            (Some(obs), Some(rest)) => rotations[root] = DQuat::from_mat3(&(obs * rest.transpose())).normalize(),
            _ => degenerate[root] = true,
        }
    }

    let mut global = vec![DQuat::IDENTITY; n];
    global[0] = rotations[0];
    for j in 1..n {
        let p = skeleton.parent(j).expect("non-root joints have parents");
        let bone = pose[j] - pose[p];
        let q = match bone.try_normalize() {
            Some(dir) => {
                let target = (global[p].inverse() * dir).normalize();
                DQuat::from_rotation_arc(skeleton.rest_dir(j), target).normalize()
            }
            None => {
                degenerate[j] = true;
                DQuat::IDENTITY
            }
        };
        rotations[j] = q;
        global[j] = global[p] * q;
    }
    Ok(IkSolution { rotations, degenerate })
}

#[derive(Clone, Copy, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointLimit {
    pub cone_deg: f64,
    pub twist_min_deg: f64,
    pub twist_max_deg: f64,
}

impl JointLimit {
    pub const FREE: JointLimit = JointLimit {
        cone_deg: 180.0,
        twist_min_deg: -180.0,
        twist_max_deg: 180.0,
    };

    fn validate(&self, name: &str) -> Result<()> {
        let ok = self.cone_deg > 0.0
            && self.cone_deg <= 180.0
            && -180.0 <= self.twist_min_deg
            && self.twist_min_deg <= self.twist_max_deg
            && self.twist_max_deg <= 180.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("joint limit for {name} out of range: {self:?}")))
        }
    }
}

const DEFAULT_LIMITS: &str = include_str!("../../data/joint_limits.toml");

/// Per-joint swing cone and twist range, indexed like the skeleton.
#[derive(Clone, Debug, PartialEq)]
pub struct JointLimits {
    limits: Vec<JointLimit>,
}

impl JointLimits {
    /// The shipped conservative table.
    pub fn standard(skeleton: &Skeleton) -> Self {
        Self::parse(DEFAULT_LIMITS, skeleton).expect("bundled joint limits parse")
    }

    pub fn unrestricted(skeleton: &Skeleton) -> Self {
        JointLimits {
            limits: vec![JointLimit::FREE; skeleton.len()],
        }
    }

    /// Reads a table of `[joint] cone_deg = .. twist_min_deg = .. twist_max_deg = ..`
    /// sections. Joints not listed are unrestricted.
    pub fn parse(text: &str, skeleton: &Skeleton) -> Result<Self> {
        let table: HashMap<String, JointLimit> =
            toml::from_str(text).map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut limits = vec![JointLimit::FREE; skeleton.len()];
        for (name, lim) in table {
            let j = skeleton
                .index_of(&name)
                .ok_or_else(|| Error::Config(format!("joint limit for unknown joint `{name}`")))?;
            lim.validate(&name)?;
            limits[j] = lim;
        }
        Ok(JointLimits { limits })
    }

    pub fn load(path: impl AsRef<Path>, skeleton: &Skeleton) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, skeleton)
    }

    pub fn get(&self, j: usize) -> &JointLimit {
        &self.limits[j]
    }

    pub fn set(&mut self, j: usize, limit: JointLimit) {
        self.limits[j] = limit;
    }
}

/// Swing and twist of `q` about the unit `axis`, with `q = swing · twist`.
/// The input is taken in the `w ≥ 0` hemisphere.
pub fn swing_twist(q: DQuat, axis: DVec3) -> (DQuat, DQuat) {
    let q = if q.w < 0.0 { -q } else { q };
    let p = axis * q.xyz().dot(axis);
    let twist = DQuat::from_xyzw(p.x, p.y, p.z, q.w);
    let twist = if twist.length() < 1e-12 {
        DQuat::IDENTITY
    } else {
        twist.normalize()
    };
    (q * twist.inverse(), twist)
}

/// Rotation angle in `[0, π]`.
fn angle_of(q: DQuat) -> f64 {
    2.0 * q.w.abs().min(1.0).acos()
}

/// Signed twist angle about `axis` in `[-π, π]`.
fn twist_angle(twist: DQuat, axis: DVec3) -> f64 {
    2.0 * twist.xyz().dot(axis).atan2(twist.w)
}

/// Slack that keeps clamping idempotent under round-off.
const LIMIT_SLACK: f64 = 1e-9;

/// Clamps one rotation to a swing cone and twist range about `axis`.
/// Rotations within the limits are returned unchanged.
pub fn clamp_rotation(q: DQuat, axis: DVec3, limit: &JointLimit) -> DQuat {
    if axis == DVec3::ZERO {
        return q;
    }
    let (swing, twist) = swing_twist(q, axis);
    let cone = limit.cone_deg.to_radians();
    let (tmin, tmax) = (limit.twist_min_deg.to_radians(), limit.twist_max_deg.to_radians());
    let sa = angle_of(swing);
    let ta = twist_angle(twist, axis);
    let swing_out = sa > cone + LIMIT_SLACK;
    let twist_out = ta < tmin - LIMIT_SLACK || ta > tmax + LIMIT_SLACK;
    if !swing_out && !twist_out {
        return q;
    }
    let swing = if swing_out {
        let s = if swing.w < 0.0 { -swing } else { swing };
        match s.xyz().try_normalize() {
            Some(a) => DQuat::from_axis_angle(a, cone),
            None => s,
        }
    } else {
        swing
    };
    let twist = if twist_out {
        DQuat::from_axis_angle(axis, ta.clamp(tmin, tmax))
    } else {
        twist
    };
    (swing * twist).normalize()
}

/// Clamps every joint's rotation to its limits about its rest bone direction.
pub fn clamp_limits(skeleton: &Skeleton, pose: &SkeletonPose, limits: &JointLimits) -> SkeletonPose {
    let rotations = pose
        .rotations
        .iter()
        .enumerate()
        .map(|(j, &q)| {
            if skeleton.parent(j).is_none() {
                // The root has no bone; its limit is read about the vertical axis.
                clamp_rotation(q, DVec3::NEG_Y, limits.get(j))
            } else {
                clamp_rotation(q, skeleton.rest_dir(j), limits.get(j))
            }
        })
        .collect();
    SkeletonPose {
        rotations,
        root: pose.root,
        t: pose.t,
    }
}
