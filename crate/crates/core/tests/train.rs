use cgrid_core::dataset::{swe_stack, State, Task};
use cgrid_core::grid::{Boundary, Field, GridSpec, InsState};
use cgrid_core::model::{Constraint, ModelConfig, Surrogate};
use cgrid_core::norm::{Affine, NormStats};
use cgrid_core::rollout::RolloutMode;
use cgrid_core::solvers::ic::swe_ic_square;
use cgrid_core::solvers::swe::{swe_trajectory, SweParams};
use cgrid_core::symmetry::Group;
use cgrid_core::train::{
    augment_pair, detached_step, loss_and_grad, pushforward_batch, train, TrainConfig, TrainData, TrainMode,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(task: Task, group: Group, constraints: Constraint) -> ModelConfig {
    ModelConfig {
        task,
        group,
        constraints,
        hidden: 2,
        depth: 1,
        kernel: 3,
        widths: None,
        break_staggering: false,
    }
}

fn random_ins(n: usize, rng: &mut ChaCha8Rng) -> InsState {
    let mut f = || Field::from_vec(n, n, (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    InsState { u: f(), v: f() }
}

fn unit_norm(task: Task) -> NormStats {
    let one = Affine { mean: 0.0, std: 1.0 };
    match task {
        Task::Swe => NormStats {
            task,
            state: vec![one; 3],
            increment: vec![one],
        },
        Task::Ins => NormStats {
            task,
            state: vec![one; 2],
            increment: vec![one; 2],
        },
    }
}

/// Random INS states held constant in time: every increment is zero.
fn frozen_ins_data(n: usize, trajs: usize, len: usize, seed: u64) -> TrainData {
    let grid = GridSpec::square(n, 1.0, Boundary::Periodic).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mk = |k| {
        (0..k)
            .map(|_| vec![State::Ins(random_ins(n, &mut rng)); len])
            .collect::<Vec<_>>()
    };
    TrainData {
        task: Task::Ins,
        grid,
        swe: None,
        norm: unit_norm(Task::Ins),
        train: mk(trajs),
        val: mk(1),
    }
}

fn swe_data(n: usize, steps: usize, trajs: usize) -> TrainData {
    let p = SweParams::default();
    let grid = p.grid(n).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let run = |rng: &mut ChaCha8Rng| {
        let ic = swe_ic_square(rng, &grid).unwrap();
        swe_trajectory(&ic, &p, &grid, steps).unwrap()
    };
    let train: Vec<_> = (0..trajs).map(|_| run(&mut rng)).collect();
    let val = vec![run(&mut rng)];
    let stacks: Vec<_> = train.iter().map(|t| swe_stack(t, &grid).unwrap()).collect();
    let norm = NormStats::fit(&stacks, Task::Swe, &grid).unwrap();
    let wrap = |v: Vec<Vec<_>>| v.into_iter().map(|t| t.into_iter().map(State::Swe).collect()).collect();
    TrainData {
        task: Task::Swe,
        grid,
        swe: Some(p),
        norm,
        train: wrap(train),
        val: wrap(val),
    }
}

fn quick(mode: TrainMode, epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        lr: 1e-3,
        patience: 100,
        max_epochs: epochs,
        seed: 3,
        mode,
        augment_group: Group::P4m,
    }
}

#[test]
fn zero_increments_are_learned() {
    let data = frozen_ins_data(8, 16, 9, 1);
    let mut model = Surrogate::new(&tiny(Task::Ins, Group::P1, Constraint::None), 0).unwrap();
    let cfg = TrainConfig {
        lr: 3e-3,
        batch_size: 2,
        ..quick(TrainMode::Standard, 50)
    };
    let h = train(&mut model, &data, &cfg, |_| {}).unwrap();
    assert!(h.best_val() < 1e-6, "best validation loss {}", h.best_val());
}

#[test]
fn seeded_runs_repeat_bit_exactly() {
    let data = swe_data(8, 6, 2);
    let cfg = tiny(Task::Swe, Group::P4m, Constraint::Mass);
    let run = || {
        let mut m = Surrogate::new(&cfg, 11).unwrap();
        let h = train(&mut m, &data, &quick(TrainMode::Augmented, 4), |_| {}).unwrap();
        (h, m.store)
    };
    let (h1, s1) = run();
    let (h2, s2) = run();
    assert_eq!(h1, h2);
    assert_eq!(s1.values(), s2.values());
}

#[test]
fn history_bookkeeping() {
    let data = swe_data(8, 6, 2);
    let mut m = Surrogate::new(&tiny(Task::Swe, Group::P1, Constraint::None), 2).unwrap();
    let cfg = TrainConfig {
        patience: 2,
        lr: 0.5,
        ..quick(TrainMode::Standard, 12)
    };
    let mut seen = 0;
    let h = train(&mut m, &data, &cfg, |_| seen += 1).unwrap();
    assert!(h.epochs.len() <= 12);
    assert_eq!(seen, h.epochs.len());
    let argmin = (0..h.epochs.len())
        .min_by(|&a, &b| h.epochs[a].val_loss.total_cmp(&h.epochs[b].val_loss))
        .unwrap();
    assert_eq!(h.epochs[h.best].val_loss, h.epochs[argmin].val_loss);
    if h.stopped_early {
        assert_eq!(h.epochs.len() - 1 - h.best, 2);
    }
    // the restored weights reproduce the best validation loss
    let val: Vec<_> = data.val[0].windows(2).map(|w| (w[0].clone(), w[1].clone())).collect();
    let (l, _) = loss_and_grad(&m, &data.norm, &val).unwrap();
    assert!((l - h.best_val()).abs() <= 1e-12 * h.best_val().max(1e-300));
}

#[test]
fn nan_loss_reports_epoch_and_batch() {
    let mut data = frozen_ins_data(8, 2, 3, 4);
    if let State::Ins(s) = &mut data.train[0][1] {
        s.u.data_mut()[0] = f64::NAN;
    }
    let mut m = Surrogate::new(&tiny(Task::Ins, Group::P1, Constraint::None), 0).unwrap();
    let err = train(&mut m, &data, &quick(TrainMode::Standard, 3), |_| {}).unwrap_err();
    assert!(matches!(err, cgrid_core::Error::NanLoss { epoch: 1, .. }), "{err}");
}

#[test]
fn pushforward_with_a_perfect_model_is_zero() {
    // steady uniform flow and a zero network: the identity step is exact
    let grid = GridSpec::square(8, 1.0, Boundary::Periodic).unwrap();
    let mut m = Surrogate::new(&tiny(Task::Ins, Group::P4m, Constraint::Momentum), 0).unwrap();
    for id in 0..m.store.len() {
        m.store.get_mut(id).data_mut().fill(0.0);
    }
    let s = State::Ins(InsState {
        u: Field::full(8, 8, 0.3),
        v: Field::full(8, 8, -0.2),
    });
    let (l, g) = pushforward_batch(
        &m,
        &unit_norm(Task::Ins),
        RolloutMode::Direct,
        &grid,
        None,
        &[s.clone()],
        &[s],
    )
    .unwrap();
    assert_eq!(l, 0.0);
    assert!(g.iter().all(|t| t.data().iter().all(|&x| x == 0.0)));
}

#[test]
fn pushforward_gradient_is_single_step() {
    let data = swe_data(8, 4, 1);
    let m = Surrogate::new(&tiny(Task::Swe, Group::P4, Constraint::Mass), 7).unwrap();
    let traj = &data.train[0];
    let (x_t, x_t2) = (
        vec![traj[0].clone(), traj[1].clone()],
        vec![traj[2].clone(), traj[3].clone()],
    );
    let swe = data.swe.as_ref();
    let mode = RolloutMode::HybridSwe;
    let (l, g) = pushforward_batch(&m, &data.norm, mode, &data.grid, swe, &x_t, &x_t2).unwrap();

    // explicit comparison with a one-step loss at the detached prediction
    let hat = detached_step(&m, &data.norm, mode, &data.grid, swe, &x_t).unwrap();
    let pairs: Vec<_> = hat.iter().cloned().zip(x_t2.iter().cloned()).collect();
    let (l1, g1) = loss_and_grad(&m, &data.norm, &pairs).unwrap();
    assert_eq!(l, l1);
    assert_eq!(g, g1);

    // finite differences with the first step frozen match the gradient
    let id = m.store.len() - 1;
    let h = 1e-6;
    let frozen_loss = |delta: f64| {
        let mut mm = m.clone();
        mm.store.get_mut(id).data_mut()[0] += delta;
        loss_and_grad(&mm, &data.norm, &pairs).unwrap().0
    };
    let fd = (frozen_loss(h) - frozen_loss(-h)) / (2.0 * h);
    assert!(
        (fd - g[id].data()[0]).abs() <= 1e-6 * fd.abs().max(1e-8),
        "fd {fd} vs {}",
        g[id].data()[0]
    );

    // perturbing x_t moves the loss through the detached step
    let mut xp = x_t.clone();
    if let State::Swe(s) = &mut xp[0] {
        s.zeta.data_mut()[10] += 0.05;
    }
    let (lp, _) = pushforward_batch(&m, &data.norm, mode, &data.grid, swe, &xp, &x_t2).unwrap();
    assert_ne!(lp, l);
}

#[test]
fn identity_draw_leaves_pairs_alone() {
    let data = swe_data(8, 2, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (x, y) = (&data.train[0][0], &data.train[0][1]);
    let (a, b) = augment_pair(&mut rng, Group::P1, &data.grid, x, y).unwrap();
    assert_eq!((&a, &b), (x, y));
}

#[test]
fn augmentation_preserves_mass_and_equivariant_loss() {
    let data = swe_data(8, 3, 1);
    let m = Surrogate::new(&tiny(Task::Swe, Group::P4m, Constraint::Mass), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (x, y) = (&data.train[0][1], &data.train[0][2]);
    let zsum = |s: &State| match s {
        State::Swe(s) => s.zeta.sum(),
        State::Ins(_) => unreachable!(),
    };
    let (l0, _) = loss_and_grad(&m, &data.norm, &[(x.clone(), y.clone())]).unwrap();
    for _ in 0..16 {
        let (a, b) = augment_pair(&mut rng, Group::P4m, &data.grid, x, y).unwrap();
        assert!((zsum(&a) - zsum(x)).abs() <= 1e-15 * zsum(x).abs().max(1.0) * 64.0);
        assert!((zsum(&b) - zsum(y)).abs() <= 1e-15 * zsum(y).abs().max(1.0) * 64.0);
        let (l, _) = loss_and_grad(&m, &data.norm, &[(a, b)]).unwrap();
        assert!((l - l0).abs() <= 1e-10 * l0, "{l} vs {l0}");
    }
}

#[test]
fn trained_models_stay_equivariant_and_conservative() {
    let data = swe_data(8, 6, 2);
    let mut m = Surrogate::new(&tiny(Task::Swe, Group::P4m, Constraint::Mass), 4).unwrap();
    let cfg = TrainConfig {
        lr: 1e-2,
        ..quick(TrainMode::Standard, 3)
    };
    train(&mut m, &data, &cfg, |_| {}).unwrap();
    let probe = State::from_fields(Task::Swe, &data.grid, data.norm.normalize_state(&data.val[0][3])).unwrap();
    let rep = m.check_equivariance(&data.grid, &probe, 1e-10).unwrap();
    assert!(rep.passed(), "max error {}", rep.max_error());
    let out = m.apply_fields(&data.norm.normalize_state(&data.val[0][3])).unwrap();
    assert!(out[0].sum().abs() <= 1e-12 * out[0].max_abs() * 64.0);

    let mut ins = Surrogate::new(&tiny(Task::Ins, Group::P4m, Constraint::MassMomentum), 4).unwrap();
    let idata = frozen_ins_data(8, 2, 3, 2);
    train(&mut ins, &idata, &cfg, |_| {}).unwrap();
    let x = &idata.val[0][0];
    let rep = ins.check_equivariance(&idata.grid, x, 1e-10).unwrap();
    assert!(rep.passed(), "max error {}", rep.max_error());
    let out = ins
        .apply_fields(&x.fields().into_iter().cloned().collect::<Vec<_>>())
        .unwrap();
    let div = cgrid_core::grid::divergence(&out[0], &out[1], &idata.grid).unwrap();
    assert!(div.max_abs() <= 1e-12);
}
