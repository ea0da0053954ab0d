mod common;

use bgcut::backbone::{kept_count, rank_filters, Backbone, BackboneConfig};
use bgcut::nn::Module;
use bgcut::tensor::Tensor;
use common::{bits_equal, rng, tiny_backbone};

#[test]
fn default_backbone_maps_64_to_8_at_stride_8() {
    let mut net = Backbone::<f32>::build(BackboneConfig::default(), 0).unwrap();
    let x = Tensor::randn([1, 3, 64, 64], 1.0, &mut rng(1));
    let y = net.features(&x).unwrap();
    assert_eq!(y.shape(), [1, 128, 8, 8]);
}

#[test]
fn output_extent_is_ceil_of_input_over_stride() {
    for os in [8, 16] {
        let cfg = BackboneConfig {
            output_stride: os,
            ..tiny_backbone()
        };
        let mut net = Backbone::<f32>::build(cfg.clone(), 0).unwrap();
        for (h, w) in [(33, 47), (40, 40), (17, 64)] {
            let y = net.features(&Tensor::zeros([1, 3, h, w])).unwrap();
            assert_eq!(y.shape()[2..], [h.div_ceil(os), w.div_ceil(os)], "os {os} input {h}x{w}");
            assert_eq!(cfg.feature_extent(h), h.div_ceil(os));
        }
    }
}

#[test]
fn same_seed_builds_identical_parameters() {
    let a = Backbone::<f32>::build(BackboneConfig::default(), 42).unwrap();
    let b = Backbone::<f32>::build(BackboneConfig::default(), 42).unwrap();
    let c = Backbone::<f32>::build(BackboneConfig::default(), 43).unwrap();
    assert_eq!(a.fingerprint(), b.fingerprint());
    assert_ne!(a.fingerprint(), c.fingerprint());
}

/// Layer-by-layer sum: bias-free convs followed by batch norm (gamma, beta).
fn hand_count(cfg: &BackboneConfig) -> usize {
    let conv_bn = |cin: usize, cout: usize, k: usize| cin * cout * k * k + 2 * cout;
    let mut total = conv_bn(3, cfg.stem_channels, 7);
    let mut cin = cfg.stem_channels;
    let strides = match cfg.output_stride {
        8 => [1, 2, 1, 1],
        _ => [1, 2, 2, 1],
    };
    for s in 0..4 {
        let cout = cfg.stage_channels[s];
        for b in 0..cfg.blocks_per_stage[s] {
            let block_in = if b == 0 { cin } else { cout };
            total += conv_bn(block_in, cout, 3) + conv_bn(cout, cout, 3);
            if b == 0 && (strides[s] != 1 || cin != cout) {
                total += conv_bn(cin, cout, 1);
            }
        }
        cin = cout;
    }
    total
}

#[test]
fn parameter_count_matches_hand_sum() {
    let cfg = BackboneConfig::default();
    let net = Backbone::<f32>::build(cfg.clone(), 0).unwrap();
    assert_eq!(net.num_params(), hand_count(&cfg));
    // Stem 2384, stages 9344 + 33088 + 131712 + 525568.
    assert_eq!(net.num_params(), 702_096);
    let full = Backbone::<f32>::build(BackboneConfig::resnet18(), 0).unwrap();
    assert_eq!(full.num_params(), hand_count(&BackboneConfig::resnet18()));
}

#[test]
fn rank_filters_orders_by_l1_norm() {
    // Two filters with norms 0.1 and 5.0: filter 0 goes first.
    let mut w = Tensor::<f64>::zeros([2, 1, 1, 2]);
    w.data_mut().copy_from_slice(&[0.05, -0.05, 2.5, -2.5]);
    assert_eq!(rank_filters(&w), vec![0, 1]);

    let equal = Tensor::<f64>::full([5, 2, 3, 3], 0.3);
    assert_eq!(rank_filters(&equal), vec![0, 1, 2, 3, 4]);

    let mut r = rng(7);
    for _ in 0..20 {
        let w = Tensor::<f64>::randn([9, 4, 3, 3], 1.0, &mut r);
        let per = 4 * 9;
        let norms: Vec<f64> = (0..9)
            .map(|f| w.data()[f * per..(f + 1) * per].iter().map(|v| v.abs()).sum())
            .collect();
        let mut oracle: Vec<usize> = (0..9).collect();
        oracle.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b)));
        assert_eq!(rank_filters(&w), oracle);
    }
}

#[test]
fn keep_ratio_one_is_a_no_op() {
    let mut net = Backbone::<f32>::build(tiny_backbone(), 3).unwrap();
    let x = Tensor::randn([2, 3, 24, 24], 1.0, &mut rng(2));
    let before = net.features(&x).unwrap();
    let params = net.num_params();
    net.prune_step(1.0).unwrap();
    assert_eq!(net.num_params(), params);
    assert!(bits_equal(&before, &net.features(&x).unwrap()));
}

#[test]
fn sixty_four_filters_at_point_nine_keep_fifty_eight() {
    assert_eq!(kept_count(64, 0.9), 58);
    let cfg = BackboneConfig {
        stem_channels: 64,
        ..tiny_backbone()
    };
    let mut net = Backbone::<f32>::build(cfg, 0).unwrap();
    net.prune_step(0.9).unwrap();
    assert_eq!(net.filter_counts()[0], ("stem".to_string(), 58));
}

#[test]
fn fifteen_steps_follow_the_integer_recurrence() {
    let cfg = BackboneConfig {
        stem_channels: 64,
        stage_channels: [64, 64, 64, 64],
        blocks_per_stage: [1, 1, 1, 1],
        ..BackboneConfig::default()
    };
    let mut net = Backbone::<f32>::build(cfg, 0).unwrap();
    let mut expected = 64usize;
    for step in 0..15 {
        net.prune_step(0.9).unwrap();
        expected = (0.9 * expected as f64).ceil() as usize;
        for (name, c) in net.filter_counts() {
            assert_eq!(c, expected, "step {step} layer {name}");
        }
    }
    assert_eq!(expected, 17);
}

#[test]
fn pruning_keeps_shapes_consistent_and_shrinks_parameters() {
    let mut net = Backbone::<f32>::build(BackboneConfig::default(), 5).unwrap();
    let x = Tensor::randn([1, 3, 40, 40], 1.0, &mut rng(3));
    let mut params = net.num_params();
    for _ in 0..15 {
        net.prune_step(0.9).unwrap();
        net.check_consistency().unwrap();
        let y = net.features(&x).unwrap();
        assert!(y.data().iter().all(|v| v.is_finite()));
        assert_eq!(y.shape()[1], net.out_channels());
        assert!(net.num_params() < params);
        params = net.num_params();
    }
}

/// The stem shares its channel group with stage 0's block outputs, so the
/// group is ranked by the summed L1 norm of both producers.
#[test]
fn pruning_removes_the_weakest_channel_group() {
    let mut net = Backbone::<f64>::build(tiny_backbone(), 9).unwrap();
    let l1 = |w: &Tensor<f64>| -> Vec<f64> {
        let per = w.len() / w.shape()[0];
        (0..w.shape()[0]).map(|f| w.data()[f * per..(f + 1) * per].iter().map(|v| v.abs()).sum()).collect()
    };
    let a = l1(net.stem.conv.weight.value());
    let b = l1(net.stages[0][0].conv2.conv.weight.value());
    let score: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&i, &j| score[i].total_cmp(&score[j]).then(i.cmp(&j)));
    let survivors_expected: Vec<usize> = {
        let mut keep = order[4 - kept_count(4, 0.7)..].to_vec();
        keep.sort();
        keep
    };
    net.prune_step(0.7).unwrap();
    let kept: Vec<usize> = net.masks().groups[0].iter().map(|&i| i as usize).collect();
    assert_eq!(kept, survivors_expected);
}
