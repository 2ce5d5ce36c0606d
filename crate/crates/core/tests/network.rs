mod common;

use common::rng;
use movnect::network::{output_digest, Init, Network, NetworkSpec, Variant};
use movnect::tensor::{Precision, Tensor};
use rand::Rng;

/// Type A at 64 px, weights seed 7, input seed 13.
const GOLDEN_A64: &str = "8e37d4c0b7a810eeb0f5b4d23249814bfe4a219a68b56d3b3063224f5bd5feb6";

fn input(seed: u64, size: usize) -> Tensor<f32> {
    let mut r = rng(seed);
    Tensor::from_fn(&[1, 3, size, size], |_| r.random_range(-1.0f32..1.0))
}

#[test]
fn golden_output_digest() {
    let net = Network::build(NetworkSpec::preset(Variant::TypeA).with_input_size(64), Init::Random(7)).unwrap();
    let out = net.forward_f64(&input(13, 64).cast()).unwrap();
    let digest = output_digest(&out);
    assert_eq!(digest, GOLDEN_A64);
}

#[test]
fn single_and_double_precision_agree() {
    for v in Variant::PRESETS {
        let net = Network::build(NetworkSpec::preset(v).with_input_size(64), Init::Random(3)).unwrap();
        let x = input(4, 64);
        let single = net.forward(&x).unwrap();
        let double = net.forward_f64(&x.cast()).unwrap();
        for ((name, a), (_, b)) in single.iter().zip(double.iter()) {
            let scale = b.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
            let err = a.cast::<f64>().max_abs_diff(b);
            assert!(err < 1e-4 * scale, "{v} {name}: {err} at scale {scale}");
        }
    }
}

#[test]
fn weights_round_trip_through_file() {
    let dir = tempfile::tempdir().unwrap();
    let net = Network::build(NetworkSpec::preset(Variant::TypeB).with_input_size(64), Init::Random(9)).unwrap();
    let x = input(1, 64);
    let expect = net.forward(&x).unwrap();
    for p in [Precision::Single, Precision::Double] {
        let path = dir.path().join(format!("{p:?}.mvnw"));
        net.save(&path, p).unwrap();
        let back = Network::load(&path).unwrap();
        assert_eq!(back.spec(), net.spec());
        assert_eq!(back.count_params(), net.count_params());
        let got = back.forward(&x).unwrap();
        for ((name, a), (_, b)) in got.iter().zip(expect.iter()) {
            match p {
                Precision::Double => assert_eq!(a, b, "{name}"),
                Precision::Single => {
                    let scale = b.data().iter().fold(1.0f32, |m, v| m.max(v.abs()));
                    assert!(a.max_abs_diff(b) < 1e-4 * scale as f64, "{name}");
                }
            }
        }
    }
}

#[test]
fn loading_into_wrong_variant_fails() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.mvnw");
    let net = Network::build(NetworkSpec::preset(Variant::TypeA).with_input_size(64), Init::Random(0)).unwrap();
    net.save(&path, Precision::Single).unwrap();
    assert!(Network::load_with_spec(NetworkSpec::preset(Variant::TypeC).with_input_size(64), &path).is_err());
}

#[test]
fn counts_ordering_at_256() {
    let n = |v| Network::build(NetworkSpec::preset(v), Init::Random(0)).unwrap();
    let (a, b, c) = (n(Variant::TypeA), n(Variant::TypeB), n(Variant::TypeC));
    assert!(a.count_params() < b.count_params() && b.count_params() < c.count_params());
    assert!(a.count_flops(256).macs < c.count_flops(256).macs);
    assert_eq!(a.count_flops(256).macs, n(Variant::TypeA).count_flops(256).macs);
}
