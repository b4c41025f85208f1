use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use swd_core::nn::{
    build_lenet5, build_resnet, init_parameters, GraphBuilder, LayerKind, MiniResNetSpec,
    ModelGraph, Role,
};
use swd_core::optim::{sgd_step, SgdState};
use swd_core::prune::{
    apply_soft_mask, count_macs, count_params, guard_layer_survival, hard_prune_structured,
    removed_params, select_structured, select_unstructured, structured_candidates, PruneMask,
    PruneTarget, Structure,
};
use swd_core::{Error, Tensor};

fn target(t: f64) -> PruneTarget {
    PruneTarget::new(t).unwrap()
}

/// dense layers over a flat input, so the pool is exactly the given values.
fn pool_graph(weights: &[Vec<f64>]) -> ModelGraph<f64> {
    let width = weights[0].len();
    let mut b = GraphBuilder::<f64>::new([1, 1, width]);
    let mut x = b.flatten(b.input()).unwrap();
    let mut fin = width;
    for (i, w) in weights.iter().enumerate() {
        let out = w.len() / fin;
        x = b.dense(&format!("fc{i}"), x, out, false).unwrap();
        fin = out;
    }
    let mut g = b.finish(fin).unwrap();
    for (i, w) in weights.iter().enumerate() {
        g.param_mut(i).tensor.data_mut().copy_from_slice(w);
    }
    g
}

fn selected_flat(mask: &PruneMask) -> Vec<bool> {
    match mask {
        PruneMask::Unstructured(m) => m.values().flatten().copied().collect(),
        _ => panic!("expected unstructured"),
    }
}

#[test]
fn unstructured_pool_example() {
    let g = pool_graph(&[vec![0.5, -0.1, 0.3, 0.05]]);
    let m = select_unstructured(&g, target(0.5)).unwrap();
    assert_eq!(selected_flat(&m), vec![false, true, false, true]);
    assert!(select_unstructured(&g, target(0.0)).unwrap().is_empty());
    assert_eq!(select_unstructured(&g, target(1.0)).unwrap().selected_count(), 4);
}

#[test]
fn ties_follow_registry_order() {
    let g = pool_graph(&[vec![0.2, 0.1, 0.1, 0.3], vec![0.1, 0.1, 0.1, 0.1]]);
    let m = select_unstructured(&g, target(3.0 / 8.0)).unwrap();
    assert_eq!(
        selected_flat(&m),
        vec![false, true, true, false, true, false, false, false]
    );
}

#[test]
fn lenet_unstructured_count() {
    let mut g = build_lenet5::<f32>(10).unwrap();
    init_parameters(&mut g, 0);
    let n_prunable: usize = g
        .params()
        .iter()
        .filter(|p| p.in_unstructured_pool())
        .map(|p| p.tensor.len())
        .sum();
    let n_other = g.param_count() - n_prunable;
    let m = select_unstructured(&g, target(0.9)).unwrap();
    let expect = (0.1 * n_prunable as f64).round() as usize + n_other;
    assert_eq!(count_params(&g, &m).unwrap(), expect);
    assert_eq!(count_params(&g, &PruneMask::empty(Structure::Unstructured)).unwrap(), g.param_count());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unstructured_matches_sort_oracle(
        a in prop::collection::vec(-4i32..4, 12),
        b in prop::collection::vec(-1.0f64..1.0, 6),
        t in 0.0f64..=1.0,
    ) {
        // coarse integers force ties
        let first: Vec<f64> = a.iter().map(|&v| v as f64 / 4.0).collect();
        let g = pool_graph(&[first.clone(), b.clone()]);
        let all: Vec<f64> = first.iter().chain(&b).copied().collect();
        let mut order: Vec<usize> = (0..all.len()).collect();
        order.sort_by(|&i, &j| all[i].abs().total_cmp(&all[j].abs()).then(i.cmp(&j)));
        let k = (t * all.len() as f64 + 0.5).floor() as usize;
        let mut oracle = vec![false; all.len()];
        for &i in &order[..k] {
            oracle[i] = true;
        }
        let got = selected_flat(&select_unstructured(&g, target(t)).unwrap());
        prop_assert_eq!(&got, &oracle);
        let max_sel = all.iter().zip(&got).filter(|(_, &s)| s).map(|(w, _)| w.abs()).fold(0.0, f64::max);
        let min_un = all.iter().zip(&got).filter(|(_, &s)| !s).map(|(w, _)| w.abs()).fold(f64::INFINITY, f64::min);
        prop_assert!(max_sel <= min_un);
    }
}

/// conv(1->2, 3x3) + bn + conv(2->1, 3x3) -> flatten -> dense(25 -> 2).
fn toy_chain() -> ModelGraph<f64> {
    let mut b = GraphBuilder::<f64>::new([1, 5, 5]);
    let x = b.conv("c1", b.input(), 2, 3, 1, 1, false).unwrap();
    let x = b.batchnorm("bn1", x).unwrap();
    let x = b.relu(x).unwrap();
    let x = b.conv("c2", x, 1, 3, 1, 1, false).unwrap();
    let x = b.flatten(x).unwrap();
    b.dense("fc", x, 2, true).unwrap();
    b.finish(2).unwrap()
}

fn bn_id<T: swd_core::Scalar>(g: &ModelGraph<T>, name: &str) -> usize {
    g.layers().iter().position(|l| l.name == name).unwrap()
}

#[test]
fn toy_chain_removes_twenty_params() {
    let g = toy_chain();
    let bn = bn_id(&g, "bn1");
    let mask = PruneMask::Structured([(bn, vec![false, true])].into());
    assert_eq!(removed_params(&g, &mask).unwrap(), 20);
    let pruned = hard_prune_structured(&g, &mask).unwrap();
    assert_eq!(pruned.param_count(), g.param_count() - 20);
    assert_eq!(count_params(&g, &mask).unwrap(), pruned.param_count());
}

#[test]
fn smaller_gamma_is_selected() {
    let mut b = GraphBuilder::<f64>::new([2, 3, 3]);
    let x = b.conv("c", b.input(), 2, 1, 1, 0, false).unwrap();
    let x = b.batchnorm("bn", x).unwrap();
    let x = b.flatten(x).unwrap();
    b.dense("fc", x, 2, false).unwrap();
    let mut g = b.finish(2).unwrap();
    let scale = g.param_by_name("bn.scale").unwrap();
    g.param_mut(scale).tensor.data_mut().copy_from_slice(&[0.9, 0.01]);
    // one filter: kernel row 2, bn 2, dense columns 2 * 9
    let one_filter = 2 + 2 + 18;
    let t = one_filter as f64 / g.param_count() as f64;
    let m = select_structured(&g, target(t)).unwrap();
    let bn = bn_id(&g, "bn");
    assert_eq!(m, PruneMask::Structured([(bn, vec![false, true])].into()));
    assert_eq!(removed_params(&g, &m).unwrap(), one_filter);
    let m0 = select_structured(&g, target(0.0)).unwrap();
    assert!(m0.is_empty());
    assert_eq!(removed_params(&g, &m0).unwrap(), 0);
}

/// Multiplications performed by a direct convolution loop, padding taps
/// included.
fn brute_force_conv_macs(cout: usize, cin: usize, k: usize, h: usize, w: usize, pad: usize, stride: usize) -> u64 {
    let mut n = 0u64;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    for _o in 0..cout {
        for _y in 0..ho {
            for _x in 0..wo {
                for _c in 0..cin {
                    for _ky in 0..k {
                        for _kx in 0..k {
                            n += 1;
                        }
                    }
                }
            }
        }
    }
    n
}

#[test]
fn conv_mac_example() {
    let mut b = GraphBuilder::<f64>::new([1, 8, 8]);
    let x = b.conv("c", b.input(), 1, 3, 1, 1, false).unwrap();
    let x = b.flatten(x).unwrap();
    b.dense("fc", x, 2, false).unwrap();
    let g = b.finish(2).unwrap();
    let macs = count_macs(&g, &PruneMask::empty(Structure::Structured), [1, 8, 8]).unwrap();
    let conv = brute_force_conv_macs(1, 1, 3, 8, 8, 1, 1);
    assert_eq!(conv, 576);
    assert_eq!(macs, conv + 64 * 2);
}

#[test]
fn structured_removal_shrinks_producer_and_consumer() {
    let mut b = GraphBuilder::<f64>::new([1, 6, 6]);
    let x = b.conv("c1", b.input(), 4, 3, 1, 1, false).unwrap();
    let x = b.batchnorm("bn1", x).unwrap();
    let x = b.conv("c2", x, 2, 3, 2, 1, false).unwrap();
    let x = b.global_avgpool(x).unwrap();
    b.dense("fc", x, 2, false).unwrap();
    let g = b.finish(2).unwrap();
    let bn = bn_id(&g, "bn1");
    let empty = PruneMask::empty(Structure::Structured);
    let half = PruneMask::Structured([(bn, vec![true, false, true, false])].into());
    let c1 = brute_force_conv_macs(4, 1, 3, 6, 6, 1, 1);
    let c2 = brute_force_conv_macs(2, 4, 3, 6, 6, 1, 2);
    assert_eq!(count_macs(&g, &empty, [1, 6, 6]).unwrap(), c1 + c2 + 4);
    assert_eq!(count_macs(&g, &half, [1, 6, 6]).unwrap(), c1 / 2 + c2 / 2 + 4);
    // unstructured masks leave the architecture alone
    let un = select_unstructured(&g, target(0.5)).unwrap();
    assert_eq!(count_macs(&g, &un, [1, 6, 6]).unwrap(), c1 + c2 + 4);
}

fn small_resnet(seed: u64, width: usize) -> ModelGraph<f64> {
    let mut g = build_resnet::<f64>(&MiniResNetSpec {
        input_shape: [3, 8, 8],
        depth_blocks: 1,
        base_width: width,
        num_classes: 3,
    })
    .unwrap();
    init_parameters(&mut g, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in g.params_mut() {
        if matches!(p.role, Role::BnScale | Role::BnShift) {
            for v in p.tensor.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
    }
    for s in g.running_stats_mut() {
        for v in s.mean.iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        for v in s.var.iter_mut() {
            *v = rng.random_range(0.5..2.0);
        }
    }
    g
}

/// Random per-space removal, identical across coupled batchnorms.
fn random_structured_mask(g: &ModelGraph<f64>, rng: &mut ChaCha8Rng, p: f64) -> PruneMask {
    let map = g.channel_map().unwrap();
    let mut m = BTreeMap::new();
    for (_, space) in map.prunable_spaces() {
        let flags: Vec<bool> = (0..space.width).map(|_| rng.random_bool(p)).collect();
        for &bn in &space.bns {
            m.insert(bn, flags.clone());
        }
    }
    PruneMask::Structured(m)
}

fn images(seed: u64, n: usize, shape: [usize; 3]) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = n * shape.iter().product::<usize>();
    let data = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![n, shape[0], shape[1], shape[2]], data).unwrap()
}

fn brute_force_param_count(g: &ModelGraph<f64>) -> usize {
    let mut n = 0;
    for p in g.params() {
        n += p.tensor.shape().iter().product::<usize>();
    }
    n
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conservation_and_hard_count(seed in 0u64..1000, p in 0.0f64..0.9) {
        let g = small_resnet(seed, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let mask = random_structured_mask(&g, &mut rng, p);
        let kept = count_params(&g, &mask).unwrap();
        let removed = removed_params(&g, &mask).unwrap();
        prop_assert_eq!(kept + removed, count_params(&g, &PruneMask::empty(Structure::Structured)).unwrap());
        if guard_layer_survival(&g, &mask).unwrap() {
            let pruned = hard_prune_structured(&g, &mask).unwrap();
            prop_assert_eq!(brute_force_param_count(&pruned), kept);
            let empty = PruneMask::empty(Structure::Structured);
            prop_assert_eq!(
                count_macs(&pruned, &empty, [3, 8, 8]).unwrap(),
                count_macs(&g, &mask, [3, 8, 8]).unwrap()
            );
        }
    }

    #[test]
    fn adding_a_channel_never_decreases_removal(seed in 0u64..1000, p in 0.0f64..0.7) {
        let g = small_resnet(seed, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = random_structured_mask(&g, &mut rng, p);
        let before = removed_params(&g, &mask).unwrap();
        let map = g.channel_map().unwrap();
        for (_, space) in map.prunable_spaces() {
            for c in 0..space.width {
                let PruneMask::Structured(mut m) = mask.clone() else { unreachable!() };
                for bn in &space.bns {
                    m.get_mut(bn).unwrap()[c] = true;
                }
                prop_assert!(removed_params(&g, &PruneMask::Structured(m)).unwrap() >= before);
            }
        }
    }

    #[test]
    fn soft_and_hard_removal_agree(seed in 0u64..1000, p in 0.0f64..0.6) {
        let g = small_resnet(seed, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
        let mask = random_structured_mask(&g, &mut rng, p);
        prop_assume!(guard_layer_survival(&g, &mask).unwrap());
        let mut soft = g.clone();
        apply_soft_mask(&mut soft, &mask).unwrap();
        let mut hard = hard_prune_structured(&g, &mask).unwrap();
        let x = images(seed, 3, [3, 8, 8]);
        let a = soft.logits(x.clone()).unwrap();
        let b = hard.logits(x).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            prop_assert!((u - v).abs() <= 1e-5, "{u} vs {v}");
        }
    }
}

#[test]
fn soft_and_hard_agree_on_toy_chain_in_f32() {
    let mut g = toy_chain().cast::<f32>();
    init_parameters(&mut g, 5);
    let bn = bn_id(&g, "bn1");
    let mask = PruneMask::Structured([(bn, vec![false, true])].into());
    let mut soft = g.clone();
    apply_soft_mask(&mut soft, &mask).unwrap();
    let mut hard = hard_prune_structured(&g, &mask).unwrap();
    let x = images(1, 4, [1, 5, 5]).cast::<f32>();
    let a = soft.logits(x.clone()).unwrap();
    let b = hard.logits(x).unwrap();
    for (u, v) in a.data().iter().zip(b.data()) {
        assert!((u - v).abs() <= 1e-5);
    }
    let mut same = hard_prune_structured(&g, &PruneMask::empty(Structure::Structured)).unwrap();
    let x = images(2, 2, [1, 5, 5]).cast::<f32>();
    assert_eq!(g.logits(x.clone()).unwrap().data(), same.logits(x).unwrap().data());
}

#[test]
fn emptying_a_layer_is_refused() {
    let g = toy_chain();
    let bn = bn_id(&g, "bn1");
    let mask = PruneMask::Structured([(bn, vec![true, true])].into());
    assert!(!guard_layer_survival(&g, &mask).unwrap());
    let before: Vec<Vec<f64>> = g.params().iter().map(|p| p.tensor.data().to_vec()).collect();
    match hard_prune_structured(&g, &mask) {
        Err(Error::StructuralCollapse(what)) => assert!(what.contains("c1")),
        other => panic!("expected collapse, got {:?}", other.map(|_| ())),
    }
    let after: Vec<Vec<f64>> = g.params().iter().map(|p| p.tensor.data().to_vec()).collect();
    assert_eq!(before, after);
    assert!(matches!(select_structured(&g, target(1.0)), Err(Error::StructuralCollapse(_))));
    assert!(structured_candidates(&g, target(1.0)).is_ok());
}

#[test]
fn coupled_batchnorms_share_selection() {
    let g = small_resnet(3, 4);
    let groups = g.residual_groups().to_vec();
    assert!(!groups.is_empty());
    for t in [0.05, 0.2, 0.4] {
        let Ok(PruneMask::Structured(m)) = select_structured(&g, target(t)) else {
            panic!("selection failed at {t}");
        };
        for group in &groups {
            let first = &m[&group.member_bn_ids[0]];
            for bn in &group.member_bn_ids {
                assert_eq!(&m[bn], first);
            }
        }
        let mask = PruneMask::Structured(m);
        assert!(removed_params(&g, &mask).unwrap() as f64 <= t * g.param_count() as f64);
    }
    // a mask that disagrees inside a group is rejected
    let group = &groups[0];
    let mut m = BTreeMap::new();
    let mut flags = vec![false; group.channel_count];
    m.insert(group.member_bn_ids[0], flags.clone());
    flags[0] = true;
    m.insert(group.member_bn_ids[1], flags);
    assert!(PruneMask::Structured(m).validate(&g).is_err());
}

#[test]
fn structured_needs_batchnorm() {
    let g = build_lenet5::<f32>(10).unwrap();
    assert!(matches!(select_structured(&g, target(0.5)), Err(Error::Config(_))));
}

#[test]
fn all_false_soft_mask_is_a_no_op() {
    let mut g = small_resnet(1, 2);
    let before = g.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mask = random_structured_mask(&g, &mut rng, 0.0);
    apply_soft_mask(&mut g, &mask).unwrap();
    for (p, q) in g.params().iter().zip(before.params()) {
        assert_eq!(p.tensor.data(), q.tensor.data());
    }
}

#[test]
fn soft_mask_matches_manual_zeroing() {
    let mut g = build_lenet5::<f64>(10).unwrap();
    init_parameters(&mut g, 11);
    let mask = select_unstructured(&g, target(0.7)).unwrap();
    let mut manual = g.clone();
    if let PruneMask::Unstructured(m) = &mask {
        for (&pid, flags) in m {
            for (w, &f) in manual.param_mut(pid).tensor.data_mut().iter_mut().zip(flags) {
                if f {
                    *w = 0.0;
                }
            }
        }
    }
    apply_soft_mask(&mut g, &mask).unwrap();
    let x = images(4, 2, [1, 28, 28]);
    assert_eq!(g.logits(x.clone()).unwrap().data(), manual.logits(x).unwrap().data());
}

#[test]
fn masked_entries_stay_zero_while_training() {
    let mut g = small_resnet(2, 2).cast::<f32>();
    let mask = select_unstructured(&g, target(0.5)).unwrap();
    apply_soft_mask(&mut g, &mask).unwrap();
    let smask = select_structured(&g, target(0.1)).unwrap();
    apply_soft_mask(&mut g, &smask).unwrap();
    let mut sgd = SgdState::new(&g, 0.05, 0.9, 1e-3).unwrap();
    let x = images(9, 4, [3, 8, 8]).cast::<f32>();
    for step in 0..5 {
        g.zero_grad();
        g.accumulate_loss_grad(x.clone(), &[0, 1, 2, 0]).unwrap();
        sgd_step(&mut g, &mut sgd, step).unwrap();
    }
    for (i, p) in g.params().iter().enumerate() {
        if let Some(frozen) = &p.frozen {
            for (j, &f) in frozen.iter().enumerate() {
                if f {
                    assert_eq!(p.tensor.data()[j], 0.0, "{}[{j}]", p.name);
                    assert_eq!(sgd.velocity()[i][j], 0.0);
                }
            }
        }
    }
    if let PruneMask::Unstructured(m) = &mask {
        for (&pid, flags) in m {
            for (w, &f) in g.param(pid).tensor.data().iter().zip(flags) {
                if f {
                    assert_eq!(*w, 0.0);
                }
            }
        }
    }
}

#[test]
fn mask_json_round_trip() {
    let g = small_resnet(4, 3);
    let s = select_structured(&g, target(0.3)).unwrap();
    let json = s.to_json(&g).unwrap();
    assert!(json.contains("\"structured\""));
    assert_eq!(PruneMask::from_json(&g, &json).unwrap(), s);
    let u = select_unstructured(&g, target(0.3)).unwrap();
    let json = u.to_json(&g).unwrap();
    assert_eq!(PruneMask::from_json(&g, &json).unwrap(), u);
    assert!(PruneMask::from_json(&g, "{\"kind\":\"structured\",\"tensors\":{\"nope\":[0]}}").is_err());
}

#[test]
fn structured_mask_keys_are_batchnorms() {
    let g = toy_chain();
    let conv = g
        .layers()
        .iter()
        .position(|l| matches!(l.kind, LayerKind::Conv { .. }))
        .unwrap();
    let m = PruneMask::Structured([(conv, vec![false, true])].into());
    assert!(m.validate(&g).is_err());
}
