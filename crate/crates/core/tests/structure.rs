//! Structural properties of every emitted network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reactnet::arch::{
    build_network, build_network_for, BlockKind, Downsample, Network, NetworkSpec, Precision, Scale, Variant,
};
use reactnet::FloatTensor;

fn all_specs() -> Vec<NetworkSpec> {
    let mut out = Vec::new();
    for tag in Variant::known_tags() {
        let v = Variant::parse(tag).unwrap();
        out.push(build_network(v, Scale::ImageNet));
        out.push(build_network(v, Scale::Desk));
        out.push(build_network_for(v, Scale::Desk, [1, 28, 28], 10));
    }
    out
}

#[test]
fn binary_convs_keep_channel_count_except_direct_downsample() {
    for spec in all_specs() {
        spec.validate().unwrap();
        let unequal = spec.unequal_binary_convs().unwrap();
        let direct = spec.variant.precision == Precision::Binary && spec.variant.downsample == Downsample::BinaryDirect;
        if direct {
            let reductions = spec.blocks.iter().filter(|b| b.kind == BlockKind::Reduction).count();
            assert_eq!(unequal.len(), reductions, "{}", spec.variant.tag());
        } else {
            assert!(unequal.is_empty(), "{}: {unequal:?}", spec.variant.tag());
        }
    }
}

#[test]
fn spec_text_round_trips() {
    for spec in all_specs() {
        let back = NetworkSpec::from_text(&spec.to_text()).unwrap();
        assert_eq!(back, spec);
    }
}

#[test]
fn react_overhead_is_four_per_channel_per_pair() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (react, plain) in [("reactnet-a", "baseline"), ("reactnet-direct", "baseline-direct")] {
        for input in [[3, 32, 32], [1, 28, 28]] {
            let rs = build_network_for(Variant::parse(react).unwrap(), Scale::Desk, input, 10);
            let ps = build_network_for(Variant::parse(plain).unwrap(), Scale::Desk, input, 10);
            let extra = Network::new(&rs, &mut rng).unwrap().parameter_count()
                - Network::new(&ps, &mut rng).unwrap().parameter_count();
            assert_eq!(extra, rs.react_parameter_count());
            let paired: usize = rs
                .activation_sites()
                .iter()
                .filter(|s| s.sign_channels == s.act_channels)
                .map(|s| 4 * s.act_channels)
                .sum();
            if react == "reactnet-a" {
                assert_eq!(extra, paired);
            }
        }
    }
}

#[test]
fn react_at_init_equals_baseline_bitwise() {
    for input in [[3, 32, 32], [1, 28, 28]] {
        let rs = build_network_for(Variant::reactnet_a(), Scale::Desk, input, 10);
        let bs = build_network_for(Variant::baseline(), Scale::Desk, input, 10);
        let mut react = Network::new(&rs, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut base = Network::new(&bs, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = FloatTensor::from_fn(&[2, input[0], input[1], input[2]], |_| rng.gen_range(-2.0..2.0));
        for binary in [false, true] {
            react.set_binary_weights(binary);
            base.set_binary_weights(binary);
            let a = react.forward_eval(&x).unwrap();
            let b = base.forward_eval(&x).unwrap();
            assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
            let (ta, _) = react.forward_train(&x).unwrap();
            let (tb, _) = base.forward_train(&x).unwrap();
            assert!(ta.data().iter().zip(tb.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}

#[test]
fn imagenet_network_shapes() {
    let spec = build_network(Variant::reactnet_a(), Scale::ImageNet);
    assert_eq!(spec.input_shape, [3, 224, 224]);
    assert_eq!(spec.num_classes, 1000);
    let last = spec.blocks.iter().rev().find(|b| b.kind != BlockKind::Classifier).unwrap();
    assert_eq!(last.out_channels, 1024);
}
