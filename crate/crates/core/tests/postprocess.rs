use glam::DQuat;
use movnect::decode::{CropTransform, Keypoint};
use movnect::distill::make_gt_locmaps;
use movnect::postprocess::{FrameMaps, RawPoseFrame, Skeleton, Stabilizer, StabilizerConfig, ROOT};
use movnect::stream::{to_anim, PoseRecord};
use movnect::tensor::Tensor;

fn rest_frame(t: f64) -> RawPoseFrame {
    let sk = Skeleton::standard();
    let pose: Vec<[f64; 3]> = sk.rest_positions().iter().map(|p| p.to_array()).collect();
    let keypoints = pose
        .iter()
        .map(|p| Keypoint {
            u: 320.0 + p[0] / 4.0,
            v: 240.0 + p[1] / 4.0,
            confidence: 1.0,
            visible: true,
        })
        .collect();
    RawPoseFrame {
        t,
        keypoints,
        pose3d: pose,
        maps: None,
    }
}

#[test]
fn rest_pose_exports_identity_rotations() {
    let mut s = Stabilizer::new(StabilizerConfig::new(1000.0, [320.0, 240.0])).unwrap();
    let mut records = Vec::new();
    for i in 0..5 {
        let out = s.push(&rest_frame(i as f64 / 30.0)).unwrap();
        assert!(!out.root_lost);
        for q in &out.skeleton.rotations {
            assert!(q.abs_diff_eq(DQuat::IDENTITY, 1e-9), "{q:?}");
        }
        records.push(PoseRecord {
            frame: i,
            t: out.t,
            kp2d: out.keypoints.iter().map(|k| [k.u, k.v, k.confidence]).collect(),
            pose3d: out.pose3d.clone(),
            root: out.skeleton.root.to_array(),
            rot: out.skeleton.rotations.iter().map(|q| [q.w, q.x, q.y, q.z]).collect(),
            crop: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            lost: false,
        });
    }
    let anim = to_anim(&records, &Skeleton::standard()).unwrap();
    let last = anim.lines().last().unwrap();
    let values: Vec<f64> = last.split(' ').map(|v| v.parse().unwrap()).collect();
    for q in values[4..].chunks(4) {
        assert!((q[0] - 1.0).abs() < 1e-9 && q[1..].iter().all(|v| v.abs() < 1e-9));
    }
}

#[test]
fn maps_are_reread_at_filtered_keypoints() {
    let frame = rest_frame(0.0);
    let (j, m) = (frame.pose3d.len(), 32);
    let mut pose = frame.pose3d.clone();
    let root = pose[ROOT];
    pose.iter_mut().for_each(|p| *p = [p[0] - root[0], p[1] - root[1], p[2] - root[2]]);
    let maps = make_gt_locmaps(&pose, m, m).cast::<f32>();
    let plane = j * m * m;
    let axis = |a: usize| Tensor::new(&[j, m, m], maps.data()[a * plane..(a + 1) * plane].to_vec()).unwrap();
    let keypoints: Vec<Keypoint> = (0..j)
        .map(|i| Keypoint {
            u: 10.0 + 12.0 * i as f64,
            v: 100.0,
            confidence: 1.0,
            visible: true,
        })
        .collect();
    let raw = RawPoseFrame {
        t: 0.0,
        keypoints,
        pose3d: Vec::new(),
        maps: Some(FrameMaps {
            x: axis(0),
            y: axis(1),
            z: axis(2),
            transform: CropTransform::identity(),
            stride: 8,
        }),
    };
    let mut s = Stabilizer::new(StabilizerConfig::new(1000.0, [128.0, 128.0])).unwrap();
    let out = s.push(&raw).unwrap();
    for (a, b) in out.pose3d.iter().zip(&pose) {
        for c in 0..3 {
            assert!((a[c] - b[c]).abs() < 1e-3, "{a:?} vs {b:?}");
        }
    }
}
