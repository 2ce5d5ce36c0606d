//! Pose stream records and their file formats.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postprocess::Skeleton;

/// One processed frame, as written to a JSONL stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub frame: usize,
    /// Seconds.
    pub t: f64,
    /// `[u, v, confidence]` in frame pixels.
    pub kp2d: Vec<[f64; 3]>,
    /// Root-relative mm.
    pub pose3d: Vec<[f64; 3]>,
    /// Camera-space root position, mm.
    pub root: [f64; 3],
    /// Parent-relative joint rotations `[w, x, y, z]`.
    pub rot: Vec<[f64; 4]>,
    /// Crop-to-frame affine `[a, b, tx, c, d, ty]`.
    pub crop: [f64; 6],
    pub lost: bool,
}

const UNIT_TOLERANCE: f64 = 1e-6;

impl PoseRecord {
    pub fn validate(&self, joints: usize) -> Result<()> {
        if self.kp2d.len() != joints || self.pose3d.len() != joints || self.rot.len() != joints {
            return Err(Error::invalid(
                "pose_record",
                format!(
                    "frame {}: expected {joints} joints, got {}/{}/{}",
                    self.frame,
                    self.kp2d.len(),
                    self.pose3d.len(),
                    self.rot.len()
                ),
            ));
        }
        for (j, q) in self.rot.iter().enumerate() {
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::invalid(
                    "pose_record",
                    format!("frame {}: joint {j} quaternion has norm {n}", self.frame),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    Jsonl,
    Anim,
}

impl std::str::FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(ExportFormat::Jsonl),
            "anim" => Ok(ExportFormat::Anim),
            other => Err(Error::Config(format!("unknown format `{other}`, supported: jsonl, anim"))),
        }
    }
}

pub fn to_jsonl(records: &[PoseRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn from_jsonl(text: &str) -> Result<Vec<PoseRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Config(format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn write_stream(path: impl AsRef<Path>, records: &[PoseRecord]) -> Result<()> {
    let path = path.as_ref();
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(to_jsonl(records).as_bytes()))
        .map_err(|e| Error::io(path, e))
}

pub fn read_stream(path: impl AsRef<Path>) -> Result<Vec<PoseRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: PoseRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(r);
    }
    Ok(out)
}

/// Plain-text animation:
///
/// ```text
/// movnect-anim 1
/// joints <J>
/// <name> <parent index or -1> <offset x> <offset y> <offset z>
/// ...
/// frames <N>
/// <t> <root x> <root y> <root z> <w x y z> × J
/// ```
pub fn to_anim(records: &[PoseRecord], skeleton: &Skeleton) -> Result<String> {
    let mut out = format!("movnect-anim 1\njoints {}\n", skeleton.len());
    for j in 0..skeleton.len() {
        let o = skeleton.offset(j);
        let parent = skeleton.parent(j).map_or(-1, |p| p as i64);
        let _ = writeln!(out, "{} {parent} {} {} {}", skeleton.names()[j], o.x, o.y, o.z);
    }
    let _ = writeln!(out, "frames {}", records.len());
    for r in records {
        r.validate(skeleton.len())?;
        let _ = write!(out, "{} {} {} {}", r.t, r.root[0], r.root[1], r.root[2]);
        for q in &r.rot {
            let _ = write!(out, " {} {} {} {}", q[0], q[1], q[2], q[3]);
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn export(records: &[PoseRecord], format: ExportFormat, skeleton: &Skeleton) -> Result<String> {
    match format {
        ExportFormat::Jsonl => {
            for r in records {
                r.validate(skeleton.len())?;
            }
            Ok(to_jsonl(records))
        }
        ExportFormat::Anim => to_anim(records, skeleton),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rest_record(frame: usize) -> PoseRecord {
        PoseRecord {
            frame,
            t: frame as f64 / 30.0,
            kp2d: vec![[1.0, 2.0, 0.5]; 15],
            pose3d: vec![[0.1, 0.2, 0.3]; 15],
            root: [0.0, 0.0, 3000.0],
            rot: vec![[1.0, 0.0, 0.0, 0.0]; 15],
            crop: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            lost: false,
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let recs: Vec<PoseRecord> = (0..3).map(rest_record).collect();
        assert_eq!(from_jsonl(&to_jsonl(&recs)).unwrap(), recs);
    }

    #[test]
    fn anim_has_one_line_per_frame() {
        let recs: Vec<PoseRecord> = (0..4).map(rest_record).collect();
        let text = to_anim(&recs, &Skeleton::standard()).unwrap();
        let body: Vec<&str> = text.lines().skip_while(|l| !l.starts_with("frames")).skip(1).collect();
        assert_eq!(body.len(), 4);
        assert!(body[0].ends_with(&" 1 0 0 0".repeat(15)));
    }

    #[test]
    fn unknown_format_lists_supported() {
        let e = "bvh".parse::<ExportFormat>().unwrap_err().to_string();
        assert!(e.contains("jsonl") && e.contains("anim"));
    }
}
