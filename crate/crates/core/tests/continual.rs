//! Regularizer semantics, importance accumulation, and training-loop
//! contracts on toy-scale models.

use incount_tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use incount_core::continual::{
    accumulate_importance, reg_dmd, reg_dmd_no_adapt, reg_fd, reg_lwf, reg_weight, train_task,
    ImportanceMode, MethodConfig, MethodKind, OptimizerConfig, TrainSchedule,
};
use incount_core::data::{synth_generate, ShapeClass, SyntheticSpec, TaskDataset};
use incount_core::loss::LossWeights;
use incount_core::network::{
    adapt_chain, extract_features, Adaptor, BlockConfig, HeadConfig, HeadLayerConfig, ModelState,
    NetworkConfig,
};
use incount_core::CoreError;

fn tiny_network() -> NetworkConfig {
    NetworkConfig {
        blocks: vec![
            BlockConfig {
                channels: 4,
                downsample: false,
            },
            BlockConfig {
                channels: 4,
                downsample: true,
            },
        ],
        head: HeadConfig {
            hidden: vec![HeadLayerConfig {
                channels: 4,
                downsample: false,
            }],
            final_bias: 0.5,
        },
        head_depth: None,
    }
}

fn tiny_spec(shape: ShapeClass, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        shape,
        count_range: (1, 2),
        radius_range: (2.0, 2.5),
        noise: 0.05,
        extent: 16,
        train_samples: 6,
        test_samples: 4,
        seed,
    }
}

fn tiny_schedule(epochs: usize, seed: u64) -> TrainSchedule {
    TrainSchedule {
        epochs,
        batch_size: 3,
        optimizer: OptimizerConfig::default(),
        seed,
        crop: 12,
        flip_prob: 0.5,
    }
}

fn rand_image_batch(rng: &mut ChaCha8Rng, n: usize, extent: usize) -> Tensor<f64> {
    let data: Vec<f64> = (0..n * 3 * extent * extent)
        .map(|_| rng.gen_range(0.0..1.0))
        .collect();
    Tensor::from_vec(vec![n, 3, extent, extent], data, false).unwrap()
}

/// Train `tasks` tasks of a tiny synthetic sequence.
fn run_tiny(method: MethodKind, lambda: f64, tasks: usize, seed: u64) -> (ModelState, Vec<Vec<f64>>) {
    let shapes = [
        ShapeClass::Disk,
        ShapeClass::Square,
        ShapeClass::Triangle,
        ShapeClass::Ring,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = ModelState::new(tiny_network(), method, &mut rng).unwrap();
    let mut traces = Vec::new();
    for t in 1..=tasks {
        let ds = synth_generate(&tiny_spec(shapes[(t - 1) % 4], seed * 100 + t as u64)).unwrap();
        let log = train_task(
            &mut state,
            t,
            &ds,
            &MethodConfig::new(method, lambda),
            &tiny_schedule(2, seed),
            &LossWeights::default(),
        )
        .unwrap();
        traces.push(log.steps.iter().map(|s| s.total).collect());
    }
    (state, traces)
}

#[test]
fn fd_is_zero_for_identical_extractors() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let state = ModelState::new(tiny_network(), MethodKind::Fd, &mut rng).unwrap();
    let prev = state.extractor.deep_clone();
    prev.set_trainable(false);
    let x = rand_image_batch(&mut rng, 2, 16);
    let g = Graph::new();
    let reg = reg_fd(&g, &state.extractor, &prev, &x).unwrap();
    assert!(reg.item().unwrap() < 1e-12);
}

#[test]
fn fd_counts_one_per_cell_for_a_unit_shift() {
    // shift the trunk's final pre-activation by +1 while staying in the
    // relu-active region: the squared distance is exactly the cell count
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let state = ModelState::new(tiny_network(), MethodKind::Fd, &mut rng).unwrap();
    let last = state.extractor.layers.last().unwrap();
    // strongly positive bias keeps every output unit active
    last.bias.set_data(&vec![5.0; last.bias.len()]).unwrap();
    let prev = state.extractor.deep_clone();
    prev.set_trainable(false);
    let bumped: Vec<f64> = last.bias.to_vec().iter().map(|b| b + 1.0).collect();
    last.bias.set_data(&bumped).unwrap();

    let x = rand_image_batch(&mut rng, 1, 16);
    let g = Graph::new();
    let feats = extract_features(&g, &state.extractor, &x).unwrap();
    let cells: usize = feats.len();
    let reg = reg_fd(&g, &state.extractor, &prev, &x).unwrap();
    assert_eq!(cells, 4 * 8 * 8);
    assert!((reg.item().unwrap() - cells as f64).abs() < 1e-9);
}

#[test]
fn fd_matches_brute_force_squared_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let state = ModelState::new(tiny_network(), MethodKind::Fd, &mut rng).unwrap();
    let prev = state.extractor.deep_clone();
    prev.set_trainable(false);
    // random perturbation of every trunk parameter
    for p in state.extractor.params() {
        let v: Vec<f64> = p.to_vec().iter().map(|x| x + rng.gen_range(-0.05..0.05)).collect();
        p.set_data(&v).unwrap();
    }
    let x = rand_image_batch(&mut rng, 2, 16);
    let g = Graph::new();
    let new_f = extract_features(&g, &state.extractor, &x).unwrap().to_vec();
    let old_f = extract_features(&g, &prev, &x).unwrap().to_vec();
    let brute: f64 = new_f.iter().zip(&old_f).map(|(a, b)| (a - b) * (a - b)).sum();
    let g2 = Graph::new();
    let reg = reg_fd(&g2, &state.extractor, &prev, &x).unwrap();
    assert!((reg.item().unwrap() - brute).abs() < 1e-10);
}

#[test]
fn functional_regularizers_vanish_without_drift() {
    // one task trained, prev == current, adaptor identity: Eqs. 3-6 all < 1e-12
    let (mut state, _) = run_tiny(MethodKind::Dmd, 10.0, 1, 9);
    // fresh adaptor as task 2 would create it; trunk untouched since snapshot
    state.heads.push({
        let mut r = ChaCha8Rng::seed_from_u64(1);
        incount_core::network::CounterHead::new(4, &tiny_network().head, &mut r)
    });
    state.adaptors.push(Adaptor::identity(4));

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_image_batch(&mut rng, 2, 16);
    let g = Graph::new();
    let feats = extract_features(&g, &state.extractor, &x).unwrap();
    assert!(reg_dmd(&g, &state, &feats, &x).unwrap().item().unwrap() < 1e-12);
    assert!(
        reg_dmd_no_adapt(&g, &state, &feats, &x).unwrap().item().unwrap() < 1e-12
    );
    let prev = state.prev_extractor.as_ref().unwrap();
    assert!(reg_fd(&g, &state.extractor, prev, &x).unwrap().item().unwrap() < 1e-12);
    // LwF with copies equal to the frozen heads
    let targets = vec![state.heads[0].frozen_copy()];
    state.aux.lwf_heads = vec![state.heads[0].trainable_copy()];
    assert!(
        reg_lwf(&g, &state, &targets, &feats, &x).unwrap().item().unwrap() < 1e-12
    );
}

#[test]
fn lwf_equals_dmd_no_adapt_at_initialization() {
    let (mut state, _) = run_tiny(MethodKind::Dmd, 0.0, 1, 12);
    // drift the trunk so the regularizers are nonzero
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for p in state.extractor.params() {
        let v: Vec<f64> = p.to_vec().iter().map(|x| x + rng.gen_range(-0.02..0.02)).collect();
        p.set_data(&v).unwrap();
    }
    state.heads.push({
        let mut r = ChaCha8Rng::seed_from_u64(2);
        incount_core::network::CounterHead::new(4, &tiny_network().head, &mut r)
    });
    state.aux.lwf_heads = vec![state.heads[0].trainable_copy()];
    let targets = vec![state.heads[0].frozen_copy()];

    let x = rand_image_batch(&mut rng, 2, 16);
    let g = Graph::new();
    let feats = extract_features(&g, &state.extractor, &x).unwrap();
    let a = reg_dmd_no_adapt(&g, &state, &feats, &x).unwrap().item().unwrap();
    let b = reg_lwf(&g, &state, &targets, &feats, &x).unwrap().item().unwrap();
    assert!(a > 0.0);
    assert!((a - b).abs() < 1e-10, "{a} vs {b}");
}

#[test]
fn dmd_at_two_tasks_reduces_to_single_adapted_branch() {
    let (mut state, _) = run_tiny(MethodKind::Dmd, 0.0, 1, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for p in state.extractor.params() {
        let v: Vec<f64> = p.to_vec().iter().map(|x| x + rng.gen_range(-0.02..0.02)).collect();
        p.set_data(&v).unwrap();
    }
    state.heads.push({
        let mut r = ChaCha8Rng::seed_from_u64(3);
        incount_core::network::CounterHead::new(4, &tiny_network().head, &mut r)
    });
    let adaptor = Adaptor::identity(4);
    let noisy: Vec<f64> = adaptor
        .conv
        .kernel
        .to_vec()
        .iter()
        .map(|v| v + rng.gen_range(-0.1..0.1))
        .collect();
    adaptor.conv.kernel.set_data(&noisy).unwrap();
    state.adaptors.push(adaptor);

    let x = rand_image_batch(&mut rng, 2, 16);
    let g = Graph::new();
    let feats = extract_features(&g, &state.extractor, &x).unwrap();
    let reg = reg_dmd(&g, &state, &feats, &x).unwrap().item().unwrap();

    // manual: || h1(phi1(f2 x)) - h1(f1 x) ||^2
    let manual = {
        let g = Graph::new();
        let new_feats = extract_features(&g, &state.extractor, &x).unwrap();
        let adapted = state.adaptors[0].forward(&g, &new_feats).unwrap();
        let new_map = state.heads[0].forward(&g, &adapted).unwrap();
        let old_feats =
            extract_features(&g, state.prev_extractor.as_ref().unwrap(), &x).unwrap();
        let old_map = state.heads[0].forward(&g, &old_feats).unwrap();
        g.sq_l2_norm(&g.sub(&new_map, &old_map).unwrap()).unwrap().item().unwrap()
    };
    assert!((reg - manual).abs() < 1e-10);
}

#[test]
fn dmd_at_three_tasks_matches_manual_composition() {
    let (mut state, _) = run_tiny(MethodKind::Dmd, 1.0, 2, 31);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for p in state.extractor.params() {
        let v: Vec<f64> = p.to_vec().iter().map(|x| x + rng.gen_range(-0.02..0.02)).collect();
        p.set_data(&v).unwrap();
    }
    // simulate the start of task 3
    state.heads.push({
        let mut r = ChaCha8Rng::seed_from_u64(4);
        incount_core::network::CounterHead::new(4, &tiny_network().head, &mut r)
    });
    let phi2 = Adaptor::identity(4);
    let noisy: Vec<f64> = phi2
        .conv
        .kernel
        .to_vec()
        .iter()
        .map(|v| v + rng.gen_range(-0.1..0.1))
        .collect();
    phi2.conv.kernel.set_data(&noisy).unwrap();
    state.adaptors.push(phi2);

    let x = rand_image_batch(&mut rng, 1, 16);
    let g = Graph::new();
    let feats = extract_features(&g, &state.extractor, &x).unwrap();
    let reg = reg_dmd(&g, &state, &feats, &x).unwrap().item().unwrap();

    let manual = {
        let g = Graph::new();
        let f_new = extract_features(&g, &state.extractor, &x).unwrap();
        let f_old = extract_features(&g, state.prev_extractor.as_ref().unwrap(), &x).unwrap();
        let phi = |g: &Graph<f64>, idx: usize, z: &Tensor<f64>| state.adaptors[idx].forward(g, z).unwrap();
        // tau = 1: new h1(phi1(phi2(f3))), old h1(phi1(f2))
        let n1 = state.heads[0]
            .forward(&g, &phi(&g, 0, &phi(&g, 1, &f_new)))
            .unwrap();
        let o1 = state.heads[0].forward(&g, &phi(&g, 0, &f_old)).unwrap();
        // tau = 2: new h2(phi2(f3)), old h2(f2)
        let n2 = state.heads[1].forward(&g, &phi(&g, 1, &f_new)).unwrap();
        let o2 = state.heads[1].forward(&g, &f_old).unwrap();
        let t1 = g.sq_l2_norm(&g.sub(&n1, &o1).unwrap()).unwrap().item().unwrap();
        let t2 = g.sq_l2_norm(&g.sub(&n2, &o2).unwrap()).unwrap().item().unwrap();
        t1 + t2
    };
    assert!((reg - manual).abs() < 1e-10, "{reg} vs {manual}");
}

#[test]
fn weight_penalty_examples() {
    let (mut state, _) = run_tiny(MethodKind::Ewc, 1.0, 1, 41);
    // theta == theta*: zero
    let params = state.extractor.params();
    state.aux.anchor = Some(params.iter().map(|p| p.to_vec()).collect());
    state.aux.importance = Some(params.iter().map(|p| vec![1.0; p.len()]).collect());
    let g = Graph::new();
    assert_eq!(reg_weight(&g, &state).unwrap().item().unwrap(), 0.0);

    // exactly three entries displaced by 0.1 under unit importance
    let mut omega: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
    omega[0][0] = 1.0;
    omega[0][1] = 1.0;
    omega[1][0] = 1.0;
    state.aux.importance = Some(omega);
    let mut v0 = params[0].to_vec();
    v0[0] += 0.1;
    v0[1] += 0.1;
    params[0].set_data(&v0).unwrap();
    let mut v1 = params[1].to_vec();
    v1[0] += 0.1;
    params[1].set_data(&v1).unwrap();
    let g = Graph::new();
    let val = reg_weight(&g, &state).unwrap().item().unwrap();
    assert!((val - 0.015).abs() < 1e-12, "{val}");

    // random displacement against a brute-force loop
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let omega: Vec<Vec<f64>> = params.iter().map(|p| (0..p.len()).map(|_| rng.gen_range(0.0..2.0)).collect()).collect();
    let anchors: Vec<Vec<f64>> = params.iter().map(|p| p.to_vec()).collect();
    for p in &params {
        let v: Vec<f64> = p.to_vec().iter().map(|x| x + rng.gen_range(-0.3..0.3)).collect();
        p.set_data(&v).unwrap();
    }
    let brute: f64 = params
        .iter()
        .zip(&omega)
        .zip(&anchors)
        .map(|((p, om), an)| {
            p.to_vec()
                .iter()
                .zip(om)
                .zip(an)
                .map(|((&t, &o), &a)| 0.5 * o * (t - a) * (t - a))
                .sum::<f64>()
        })
        .sum();
    state.aux.importance = Some(omega);
    state.aux.anchor = Some(anchors);
    let g = Graph::new();
    let val = reg_weight(&g, &state).unwrap().item().unwrap();
    assert!((val - brute).abs() < 1e-12);

    state.aux.anchor = None;
    let g = Graph::new();
    assert!(matches!(
        reg_weight(&g, &state),
        Err(CoreError::MissingImportance)
    ));
}

#[test]
fn mas_importance_matches_linear_model_oracle() {
    // y = w * x, importance of w under inputs {1, 2}: mean |2 w x^2| = |2w| * 2.5
    let w = Tensor::from_vec(vec![1], vec![0.7], true).unwrap();
    let inputs = [1.0, 2.0];
    let omega = accumulate_importance(
        std::slice::from_ref(&w),
        2,
        ImportanceMode::AbsGrad,
        |g, i| {
            let x = Tensor::from_vec(vec![1], vec![inputs[i]], false).unwrap();
            let y = g.mul(&w, &x)?;
            Ok(g.sq_l2_norm(&y)?)
        },
    )
    .unwrap();
    assert!((omega[0][0] - 2.0 * 0.7 * 2.5).abs() < 1e-12, "{}", omega[0][0]);
}

#[test]
fn ewc_importance_matches_finite_difference_oracle() {
    // quadratic loss (w - c_i)^2 per sample
    let w = Tensor::from_vec(vec![1], vec![0.3], true).unwrap();
    let targets = [1.0, -0.5, 2.0];
    let omega = accumulate_importance(
        std::slice::from_ref(&w),
        3,
        ImportanceMode::SquaredGrad,
        |g, i| {
            let c = Tensor::from_vec(vec![1], vec![targets[i]], false).unwrap();
            let diff = g.sub(&w, &c)?;
            Ok(g.sq_l2_norm(&diff)?)
        },
    )
    .unwrap();
    // finite-difference gradient of each per-sample loss, squared, averaged
    let h = 1e-3;
    let fd_sq_mean: f64 = targets
        .iter()
        .map(|c| {
            let lp = (0.3 + h - c) * (0.3 + h - c);
            let lm = (0.3 - h - c) * (0.3 - h - c);
            let fd: f64 = (lp - lm) / (2.0 * h);
            fd * fd
        })
        .sum::<f64>()
        / 3.0;
    let rel = (omega[0][0] - fd_sq_mean).abs() / fd_sq_mean.abs();
    assert!(rel < 1e-3, "omega {} vs fd {}", omega[0][0], fd_sq_mean);
}

#[test]
fn constant_output_model_has_zero_importance() {
    let w = Tensor::from_vec(vec![2], vec![0.4, -0.2], true).unwrap();
    let omega = accumulate_importance(
        std::slice::from_ref(&w),
        3,
        ImportanceMode::AbsGrad,
        |g, _| {
            let x = Tensor::from_vec(vec![2], vec![0.0, 0.0], false).unwrap();
            let y = g.mul(&w, &x)?;
            Ok(g.sq_l2_norm(&y)?)
        },
    )
    .unwrap();
    assert_eq!(omega[0], vec![0.0, 0.0]);
}

#[test]
fn train_task_rejects_out_of_order_and_empty() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut state = ModelState::new(tiny_network(), MethodKind::Ft, &mut rng).unwrap();
    let ds = synth_generate(&tiny_spec(ShapeClass::Disk, 50)).unwrap();
    let err = train_task(
        &mut state,
        2,
        &ds,
        &MethodConfig::new(MethodKind::Ft, 0.0),
        &tiny_schedule(1, 50),
        &LossWeights::default(),
    )
    .unwrap_err();
    assert!(matches!(err, CoreError::TaskOrder { expected: 1, got: 2 }));

    let empty = TaskDataset {
        class_name: "disk".into(),
        train: vec![],
        test: vec![],
    };
    assert!(matches!(
        train_task(
            &mut state,
            1,
            &empty,
            &MethodConfig::new(MethodKind::Ft, 0.0),
            &tiny_schedule(1, 50),
            &LossWeights::default(),
        ),
        Err(CoreError::EmptyDataset { task: 1 })
    ));
}

#[test]
fn first_task_is_method_independent() {
    // t = 1: no regularizer is active, so per-step totals match FT exactly
    let methods = [MethodKind::Ft, MethodKind::Ewc, MethodKind::Dmd, MethodKind::Lwf];
    let mut traces = Vec::new();
    for m in methods {
        let (_, trace) = run_tiny(m, 10.0, 1, 60);
        traces.push(trace[0].clone());
    }
    for other in &traces[1..] {
        assert_eq!(traces[0].len(), other.len());
        for (a, b) in traces[0].iter().zip(other) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn dmd_with_zero_lambda_reproduces_ft_traces() {
    let (_, ft) = run_tiny(MethodKind::Ft, 0.0, 2, 61);
    let (_, dmd) = run_tiny(MethodKind::Dmd, 0.0, 2, 61);
    for (task_ft, task_dmd) in ft.iter().zip(&dmd) {
        assert_eq!(task_ft.len(), task_dmd.len());
        for (a, b) in task_ft.iter().zip(task_dmd) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn gradient_routing_keeps_frozen_components_clean() {
    let (mut state, _) = run_tiny(MethodKind::Dmd, 10.0, 2, 62);
    // one more step of task 3 by hand to inspect gradients mid-training
    let ds = synth_generate(&tiny_spec(ShapeClass::Triangle, 63)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let d = state.extractor.out_channels();
    state
        .heads
        .push(incount_core::network::CounterHead::new(d, &tiny_network().head, &mut rng));
    state.adaptors.push(Adaptor::identity(d));

    let g = Graph::new();
    let x = incount_core::network::image_to_tensor(&ds.train[0].image);
    let feats = extract_features(&g, &state.extractor, &x).unwrap();
    let reg = reg_dmd(&g, &state, &feats, &x).unwrap();
    let task_map = state.heads[2].forward(&g, &feats).unwrap();
    let loss = g.add(&g.sum(&task_map).unwrap(), &reg).unwrap();
    g.backward(&loss).unwrap();

    // frozen: previous extractor, heads 1..2, adaptor phi_1
    for p in state.prev_extractor.as_ref().unwrap().params() {
        assert!(p.grad().is_none());
    }
    for head in &state.heads[..2] {
        for p in head.params() {
            assert!(p.grad().is_none());
        }
    }
    for p in state.adaptors[0].params() {
        assert!(p.grad().is_none());
    }
    // trainable: trunk, new head, new adaptor all received signal
    let live: f64 = state
        .extractor
        .params()
        .iter()
        .chain(state.heads[2].params().iter())
        .chain(state.adaptors[1].params().iter())
        .map(|p| p.grad().unwrap().iter().map(|v| v.abs()).sum::<f64>())
        .sum();
    assert!(live > 0.0);
}

#[test]
fn step_records_are_additive() {
    let (_, traces) = run_tiny(MethodKind::DmdNoAdapt, 7.0, 2, 64);
    assert!(!traces.is_empty());
    // re-run keeping the full records
    let shapes = [ShapeClass::Disk, ShapeClass::Square];
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    let mut state = ModelState::new(tiny_network(), MethodKind::DmdNoAdapt, &mut rng).unwrap();
    for t in 1..=2 {
        let ds = synth_generate(&tiny_spec(shapes[t - 1], 64 * 100 + t as u64)).unwrap();
        let log = train_task(
            &mut state,
            t,
            &ds,
            &MethodConfig::new(MethodKind::DmdNoAdapt, 7.0),
            &tiny_schedule(2, 64),
            &LossWeights::default(),
        )
        .unwrap();
        for s in &log.steps {
            let recombined = s.counting + 0.1 * s.ot + 0.01 * s.tv + 7.0 * s.reg;
            assert!(
                (s.total - recombined).abs() < 1e-12,
                "task {t}: {} vs {recombined}",
                s.total
            );
        }
    }
}

#[test]
fn four_task_structural_invariants_hold_for_every_method() {
    for method in MethodKind::ALL {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let mut state = ModelState::new(tiny_network(), method, &mut rng).unwrap();
        let shapes = [
            ShapeClass::Disk,
            ShapeClass::Square,
            ShapeClass::Triangle,
            ShapeClass::Ring,
        ];
        let mut checksums: Vec<u64> = Vec::new();
        for t in 1..=4 {
            let ds = synth_generate(&tiny_spec(shapes[t - 1], 700 + t as u64)).unwrap();
            train_task(
                &mut state,
                t,
                &ds,
                &MethodConfig::new(method, 5.0),
                &tiny_schedule(1, 70),
                &LossWeights::default(),
            )
            .unwrap();
            let sums = state.head_checksums();
            for (i, prev) in checksums.iter().enumerate() {
                assert_eq!(sums[i], *prev, "{method:?}: head {} mutated at task {t}", i + 1);
            }
            checksums = sums;
            let stored = 1 + state.prev_extractor.is_some() as usize;
            assert!(stored <= 2);
            let expected_adaptors = if method.uses_adaptors() { t - 1 } else { 0 };
            assert_eq!(state.adaptors.len(), expected_adaptors, "{method:?}");
        }
    }
}

#[test]
fn dmd_inference_on_last_task_equals_plain_head_path() {
    let (state, _) = run_tiny(MethodKind::Dmd, 10.0, 3, 80);
    let ds = synth_generate(&tiny_spec(ShapeClass::Triangle, 80 * 100 + 3)).unwrap();
    let img = &ds.test[0].image;
    let (map, count) = state.infer_task(img, 3).unwrap();
    // hand path: h^3(f_3(x)) with no adaptors
    let g = Graph::new();
    let x = incount_core::network::image_to_tensor(img);
    let feats = extract_features(&g, &state.extractor, &x).unwrap();
    let manual = state.heads[2].forward(&g, &feats).unwrap().to_vec();
    assert_eq!(map.values, manual);
    assert!((count - manual.iter().sum::<f64>()).abs() < 1e-12);
    assert!(map.values.iter().all(|&v| v >= 0.0));

    // three-task chain: h^1(phi1(phi2(f3 x)))
    let (map1, _) = state.infer_task(img, 1).unwrap();
    let chain: Vec<&Adaptor> = state.adaptors[0..2].iter().collect();
    let adapted = adapt_chain(&g, &feats, &chain).unwrap();
    let manual1 = state.heads[0].forward(&g, &adapted).unwrap().to_vec();
    let dev = map1
        .values
        .iter()
        .zip(&manual1)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(dev <= 1e-12);

    assert!(matches!(
        state.infer_task(img, 4),
        Err(CoreError::UnknownTask { .. })
    ));
}
