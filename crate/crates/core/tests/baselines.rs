use swd_core::baselines::{
    han_epoch, han_total_epochs, liu_penalty, liu_penalty_gradient, train_han, train_liu, HanState,
    IterativePlan, LiuPlan,
};
use swd_core::data::{synthetic_blobs, Dataset, Split};
use swd_core::nn::{build_resnet, init_parameters, GraphBuilder, MiniResNetSpec, ModelGraph, Role};
use swd_core::optim::LrSchedule;
use swd_core::prune::{select_structured, PruneMask, PruneTarget};
use swd_core::train::{train_baseline, Session, TrainSettings};
use swd_core::Error;

fn settings(epochs: usize) -> TrainSettings {
    TrainSettings {
        epochs,
        batch_size: 16,
        lr: LrSchedule::Constant { lr: 0.05 },
        momentum: 0.9,
        mu: 1e-4,
        weight_decay: true,
        seed: 4,
        ..TrainSettings::mnist_grid()
    }
}

fn blobs() -> (Dataset<f32>, Dataset<f32>) {
    let all = synthetic_blobs::<f32>(5, 192, 4, [1, 6, 6], 3.0).unwrap();
    (all.subset(0..128, Split::Train), all.subset(128..192, Split::Test))
}

fn net() -> ModelGraph<f32> {
    let mut b = GraphBuilder::<f32>::new([1, 6, 6]);
    let x = b.input();
    let x = b.conv("c", x, 4, 3, 1, 1, true).unwrap();
    let x = b.relu(x).unwrap();
    let x = b.flatten(x).unwrap();
    let x = b.dense("fc1", x, 12, true).unwrap();
    let x = b.relu(x).unwrap();
    b.dense("fc2", x, 4, true).unwrap();
    let mut g = b.finish(4).unwrap();
    init_parameters(&mut g, 8);
    g
}

fn pool_size(g: &ModelGraph<f32>) -> usize {
    g.params().iter().filter(|p| p.in_unstructured_pool()).map(|p| p.tensor.len()).sum()
}

fn bits(g: &ModelGraph<f32>) -> Vec<Vec<u32>> {
    g.params()
        .iter()
        .map(|p| p.tensor.data().iter().map(|v| v.to_bits()).collect())
        .collect()
}

#[test]
fn han_selects_the_iteration_target_each_time() {
    let (train, test) = blobs();
    let s = settings(1);
    let target = PruneTarget::new(0.75).unwrap();
    let plan = IterativePlan::new(3, target, 1).unwrap();
    let n = pool_size(&net());
    let mut session = Session::new(net(), &s).unwrap();
    let mut state = HanState::default();
    let mut counts = Vec::new();
    while session.epoch < han_total_epochs(&s, &plan) {
        han_epoch(&mut session, &mut state, &train, Some(&test), &s, &plan).unwrap();
        if let Some(m) = &state.mask {
            counts.push(m.selected_count());
        }
    }
    let expect: Vec<usize> = plan
        .targets()
        .iter()
        .map(|t| (t.fraction() * n as f64 + 0.5).floor() as usize)
        .collect();
    assert_eq!(counts, expect);
    assert_eq!(plan.targets().last().unwrap().fraction(), 0.75);
    // the final mask holds through fine-tuning
    let Some(PruneMask::Unstructured(m)) = &state.mask else { panic!() };
    for (&pid, flags) in m {
        let w = session.graph.param(pid).tensor.data();
        assert!(flags.iter().zip(w).all(|(&f, &v)| !f || v == 0.0));
    }
    assert!(state.acc_before_final.is_some());
}

#[test]
fn one_iteration_is_one_shot() {
    let (train, _) = blobs();
    let plan = IterativePlan::new(1, PruneTarget::new(0.5).unwrap(), 1).unwrap();
    let (session, state) = train_han(net(), &train, None, &settings(1), &plan).unwrap();
    let n = pool_size(&session.graph);
    assert_eq!(state.mask.unwrap().selected_count(), n / 2);
    assert_eq!(session.epoch, 2);
}

#[test]
fn han_with_zero_target_is_base_training() {
    let (train, _) = blobs();
    let s = settings(2);
    let plan = IterativePlan::new(4, PruneTarget::new(0.0).unwrap(), 2).unwrap();
    let (han, _) = train_han(net(), &train, None, &s, &plan).unwrap();
    let base = train_baseline(net(), &train, None, &s).unwrap();
    assert_eq!(bits(&han.graph), bits(&base.graph));
}

#[test]
fn smooth_l1_gradient_matches_differences() {
    let mut g = build_resnet::<f64>(&MiniResNetSpec {
        input_shape: [1, 4, 4],
        depth_blocks: 1,
        base_width: 3,
        num_classes: 2,
    })
    .unwrap();
    init_parameters(&mut g, 1);
    let mut k = 0.0;
    for p in g.params_mut().iter_mut().filter(|p| p.role == Role::BnScale) {
        for v in p.tensor.data_mut() {
            // both sides of the knee, both signs
            *v = -2.3 + 0.37 * k;
            k += 1.0;
        }
    }
    let lambda = 0.7;
    g.zero_grad();
    liu_penalty_gradient(&mut g, lambda);
    let h = 1e-5;
    for pid in 0..g.params().len() {
        let is_scale = g.param(pid).role == Role::BnScale;
        for i in 0..g.param(pid).tensor.len() {
            let analytic = g.param(pid).tensor.grad().unwrap()[i];
            if !is_scale {
                assert_eq!(analytic, 0.0);
                continue;
            }
            let orig = g.param(pid).tensor.data()[i];
            g.param_mut(pid).tensor.data_mut()[i] = orig + h;
            let lp = liu_penalty(&g, lambda);
            g.param_mut(pid).tensor.data_mut()[i] = orig - h;
            let lm = liu_penalty(&g, lambda);
            g.param_mut(pid).tensor.data_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            assert!((analytic - numeric).abs() < 1e-6, "{} {analytic} {numeric}", g.param(pid).name);
        }
    }
}

fn resnet(width: usize) -> ModelGraph<f32> {
    let mut g = build_resnet::<f32>(&MiniResNetSpec {
        input_shape: [1, 6, 6],
        depth_blocks: 1,
        base_width: width,
        num_classes: 4,
    })
    .unwrap();
    init_parameters(&mut g, 6);
    g
}

fn mean_abs_scale(g: &ModelGraph<f32>) -> f64 {
    let s: Vec<f32> = g
        .params()
        .iter()
        .filter(|p| p.role == Role::BnScale)
        .flat_map(|p| p.tensor.data().to_vec())
        .collect();
    s.iter().map(|v| v.abs() as f64).sum::<f64>() / s.len() as f64
}

#[test]
fn scale_penalty_shrinks_scales() {
    let (train, _) = blobs();
    let s = TrainSettings {
        weight_decay: false,
        ..settings(2)
    };
    let plan = |lambda| LiuPlan {
        lambda,
        target: PruneTarget::new(0.0).unwrap(),
        finetune_epochs: 0,
    };
    let (control, _) = train_liu(resnet(4), &train, None, &s, &plan(0.0)).unwrap();
    let (penalized, state) = train_liu(resnet(4), &train, None, &s, &plan(0.05)).unwrap();
    assert!(mean_abs_scale(&penalized.graph) < mean_abs_scale(&control.graph));
    assert!(state.removed.unwrap().is_empty());
    // lambda = 0, T = 0 is plain training
    let base = train_baseline(resnet(4), &train, None, &s).unwrap();
    assert_eq!(bits(&control.graph), bits(&base.graph));
}

#[test]
fn near_zero_scale_goes_first() {
    let mut b = GraphBuilder::<f32>::new([1, 3, 3]);
    let x = b.input();
    let x = b.conv("c", x, 3, 1, 1, 0, false).unwrap();
    let x = b.batchnorm("bn", x).unwrap();
    let x = b.relu(x).unwrap();
    let x = b.global_avgpool(x).unwrap();
    b.dense("fc", x, 2, false).unwrap();
    let mut g = b.finish(2).unwrap();
    init_parameters(&mut g, 1);
    let scale = g.param_by_name("bn.scale").unwrap();
    g.param_mut(scale).tensor.data_mut().copy_from_slice(&[0.8, 5e-4, 0.3]);
    // one channel costs 1 (kernel) + 2 (bn) + 2 (fc column) = 5 of 15
    for t in [5.0 / 15.0, 7.0 / 15.0, 10.0 / 15.0] {
        let mask = select_structured(&g, PruneTarget::new(t).unwrap()).unwrap();
        let PruneMask::Structured(m) = mask else { panic!() };
        assert!(m.values().next().unwrap()[1], "T = {t}");
    }
}

#[test]
fn aggressive_structured_target_collapses() {
    let (train, test) = blobs();
    let plan = LiuPlan {
        lambda: 1e-4,
        target: PruneTarget::new(0.925).unwrap(),
        finetune_epochs: 1,
    };
    match train_liu(resnet(2), &train, Some(&test), &settings(1), &plan) {
        Err(Error::StructuralCollapse(layers)) => assert!(!layers.is_empty()),
        other => panic!("expected collapse, got {:?}", other.map(|(s, _)| s.epoch)),
    }
}
