use glam::{DQuat, DVec3};

use crate::error::{Error, Result};

pub const JOINT_NAMES: [&str; 15] = [
    "pelvis",
    "neck",
    "head",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_hip",
    "r_knee",
    "r_ankle",
    "l_hip",
    "l_knee",
    "l_ankle",
];

pub const ROOT: usize = 0;

/// Camera-style axes: x right, y down, z away from the camera. The rest
/// pose stands upright facing the camera, so the person's right side is at
/// negative x.
const REST: [(Option<usize>, [f64; 3]); 15] = [
    (None, [0.0, 0.0, 0.0]),
    (Some(0), [0.0, -500.0, 0.0]),
    (Some(1), [0.0, -200.0, 0.0]),
    (Some(1), [-170.0, 0.0, 0.0]),
    (Some(3), [0.0, 280.0, 0.0]),
    (Some(4), [0.0, 250.0, 0.0]),
    (Some(1), [170.0, 0.0, 0.0]),
    (Some(6), [0.0, 280.0, 0.0]),
    (Some(7), [0.0, 250.0, 0.0]),
    (Some(0), [-100.0, 0.0, 0.0]),
    (Some(9), [0.0, 420.0, 0.0]),
    (Some(10), [0.0, 400.0, 0.0]),
    (Some(0), [100.0, 0.0, 0.0]),
    (Some(12), [0.0, 420.0, 0.0]),
    (Some(13), [0.0, 400.0, 0.0]),
];

/// Joint hierarchy in topological order with rest-pose bone offsets (mm).
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    names: Vec<String>,
    parents: Vec<Option<usize>>,
    offsets: Vec<DVec3>,
}

impl Default for Skeleton {
    fn default() -> Self {
        Skeleton::standard()
    }
}

impl Skeleton {
    /// The 15-joint body used throughout the crate.
    pub fn standard() -> Self {
        Skeleton {
            names: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
            parents: REST.iter().map(|r| r.0).collect(),
            offsets: REST.iter().map(|r| DVec3::from_array(r.1)).collect(),
        }
    }

    pub fn new(names: Vec<String>, parents: Vec<Option<usize>>, offsets: Vec<DVec3>) -> Result<Self> {
        let n = names.len();
        if parents.len() != n || offsets.len() != n || n == 0 {
            return Err(Error::invalid("skeleton", "names, parents and offsets differ in length"));
        }
        if parents[0].is_some() || parents[1..].iter().any(Option::is_none) {
            return Err(Error::invalid("skeleton", "joint 0 must be the only root"));
        }
        for (j, p) in parents.iter().enumerate().skip(1) {
            let p = p.expect("checked");
            if p >= j {
                return Err(Error::invalid("skeleton", format!("parent of {} is not an earlier joint", names[j])));
            }
            if offsets[j].length() <= 0.0 {
                return Err(Error::invalid("skeleton", format!("bone to {} has zero length", names[j])));
            }
        }
        Ok(Skeleton { names, parents, offsets })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        self.parents[j]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Rest offset of joint `j` from its parent.
    pub fn offset(&self, j: usize) -> DVec3 {
        self.offsets[j]
    }

    pub fn bone_length(&self, j: usize) -> f64 {
        self.offsets[j].length()
    }

    /// Unit rest direction of the bone ending at `j`; zero for the root.
    pub fn rest_dir(&self, j: usize) -> DVec3 {
        self.offsets[j].normalize_or_zero()
    }

    pub fn rest_positions(&self) -> Vec<DVec3> {
        self.forward_kinematics(&vec![DQuat::IDENTITY; self.len()], DVec3::ZERO)
    }

    /// World rotation of every joint frame.
    pub fn global_rotations(&self, local: &[DQuat]) -> Vec<DQuat> {
        let mut g: Vec<DQuat> = Vec::with_capacity(self.len());
        for (j, q) in local.iter().enumerate() {
            g.push(match self.parents[j] {
                None => *q,
                Some(p) => g[p] * *q,
            });
        }
        g
    }

    /// Joint positions from parent-relative rotations. A joint's rotation
    /// turns the bone that ends at it.
    pub fn forward_kinematics(&self, local: &[DQuat], root: DVec3) -> Vec<DVec3> {
        let g = self.global_rotations(local);
        let mut pos: Vec<DVec3> = Vec::with_capacity(self.len());
        for j in 0..self.len() {
            pos.push(match self.parents[j] {
                None => root,
                Some(p) => pos[p] + g[j] * self.offsets[j],
            });
        }
        pos
    }
}
