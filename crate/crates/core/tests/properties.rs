use maes::autodiff::{Eager, Graph, Tape};
use maes::memory::{sharpen, shift, write, ShiftOffsets};
use maes::model::{MaesAssembly, ModelDims, SolverSpec, ENCODER_GROUP};
use maes::tasks::{generate, generate_with_len, oracle, read_fixtures, write_fixtures, GenConfig, Task};
use maes::trainer::{freeze, train, TrainConfig};
use maes::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn simplex(raw: Vec<f64>) -> Tensor {
    let s: f64 = raw.iter().sum();
    Tensor::vector(raw.into_iter().map(|v| v / s).collect())
}

fn task_strategy() -> impl Strategy<Value = Task> {
    prop::sample::select(Task::ALL.to_vec())
}

proptest! {
    #[test]
    fn shift_then_sharpen_stays_on_simplex(
        w in prop::collection::vec(0.001f64..1.0, 2..40),
        s in prop::collection::vec(0.001f64..1.0, 3..=3),
        gamma in 1.0f64..30.0,
    ) {
        let g = &mut Eager;
        let w = simplex(w);
        let s = simplex(s);
        let shifted = shift(g, &w, &s, &ShiftOffsets::unit()).unwrap();
        prop_assert!((shifted.sum() - 1.0).abs() < 1e-9);
        let out = sharpen(g, &shifted, &Tensor::scalar(gamma)).unwrap();
        prop_assert!((out.sum() - 1.0).abs() < 1e-9);
        prop_assert!(out.data().iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
    }

    #[test]
    fn sharpening_never_flattens(
        w in prop::collection::vec(0.001f64..1.0, 2..20),
        gamma in 1.0f64..10.0,
    ) {
        let w = simplex(w);
        let out = sharpen(&mut Eager, &w, &Tensor::scalar(gamma)).unwrap();
        prop_assert!(out.max() >= w.max() - 1e-12);
        prop_assert_eq!(out.argmax(), w.argmax());
    }

    #[test]
    fn write_then_read_returns_added_vector_for_one_hot(
        n in 2usize..12,
        at in 0usize..12,
        a in prop::collection::vec(-1.0f64..1.0, 4),
    ) {
        let at = at % n;
        let g = &mut Eager;
        let mem = Tensor::matrix(n, 4, (0..n * 4).map(|k| k as f64 * 0.1).collect());
        let w = Tensor::one_hot(n, at);
        let out = write(g, mem, &w, &Tensor::vector(vec![1.0; 4]), &Tensor::vector(a.clone())).unwrap();
        prop_assert_eq!(out.row(at), &a[..]);
    }

    #[test]
    fn generator_matches_oracle(task in task_strategy(), seed in any::<u64>(), len in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = generate_with_len(task, len, &GenConfig::default(), &mut rng);
        let (target, mask) = oracle(task, &s.main, s.aux.as_deref());
        prop_assert_eq!(&s.target, &target);
        prop_assert_eq!(&s.mask, &mask);
        prop_assert_eq!(s.main.len(), len);
        prop_assert!(s.check().is_ok());
    }

    #[test]
    fn generation_is_deterministic(task in task_strategy(), seed in any::<u64>()) {
        let cfg = GenConfig::default();
        let a = generate(task, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        let b = generate(task, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn fixtures_round_trip(task in task_strategy(), seed in any::<u64>(), count in 0usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<_> = (0..count).map(|_| generate(task, &GenConfig::default(), &mut rng)).collect();
        let mut buf = Vec::new();
        write_fixtures(&mut buf, task, &samples).unwrap();
        let (t, back) = read_fixtures(&buf[..]).unwrap();
        prop_assert_eq!(t, task);
        prop_assert_eq!(back, samples);
    }
}

#[test]
fn joint_encoder_gradient_is_mean_of_separate_gradients() {
    let specs = [SolverSpec::for_task(Task::Serial), SolverSpec::for_task(Task::Reverse)];
    let mut m = MaesAssembly::new(ModelDims::default(), &specs, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let serial = generate_with_len(Task::Serial, 7, &GenConfig::default(), &mut rng);
    let (target, mask) = oracle(Task::Reverse, &serial.main, None);
    let reverse = maes::TaskSample {
        task: Task::Reverse,
        main: serial.main.clone(),
        aux: None,
        target,
        mask,
    };
    let enc_ids: Vec<_> = m.encoder.param_ids();
    let grads = |m: &mut MaesAssembly, f: &dyn Fn(&MaesAssembly, &mut Tape) -> maes::Var| -> Vec<f64> {
        let mut tape = Tape::new();
        let loss = f(m, &mut tape);
        m.store.zero_grads();
        tape.backward(loss).unwrap().accumulate_into(&mut m.store);
        enc_ids
            .iter()
            .flat_map(|&id| m.store.grad(id).data().to_vec())
            .collect()
    };
    let joint = grads(&mut m, &|m, t| {
        m.joint_loss(t, &[(0, &serial), (1, &reverse)], 10).unwrap()
    });
    let a = grads(&mut m, &|m, t| m.full_forward(t, 0, &serial, 10, false).unwrap().0);
    let b = grads(&mut m, &|m, t| m.full_forward(t, 1, &reverse, 10, false).unwrap().0);
    for ((j, x), y) in joint.iter().zip(&a).zip(&b) {
        assert!((2.0 * j - (x + y)).abs() < 1e-10);
    }
}

#[test]
fn frozen_encoder_survives_many_steps() {
    let mut m = MaesAssembly::new(
        ModelDims::default(),
        &[SolverSpec::for_task(Task::Odd)],
        &mut ChaCha8Rng::seed_from_u64(3),
    )
    .unwrap();
    freeze(&mut m.store, ENCODER_GROUP).unwrap();
    let before: Vec<Tensor> = m
        .encoder
        .param_ids()
        .iter()
        .map(|&id| m.store.value(id).clone())
        .collect();
    let solver_before: Vec<Tensor> = m.solvers[0]
        .controller
        .param_ids()
        .iter()
        .map(|&id| m.store.value(id).clone())
        .collect();
    let cfg = TrainConfig {
        max_iters: 200,
        validate_every: 0,
        seed: 5,
        ..TrainConfig::default()
    };
    train(&mut m, &[0], &cfg, None).unwrap();
    let after: Vec<Tensor> = m
        .encoder
        .param_ids()
        .iter()
        .map(|&id| m.store.value(id).clone())
        .collect();
    assert_eq!(before, after);
    let solver_after: Vec<Tensor> = m.solvers[0]
        .controller
        .param_ids()
        .iter()
        .map(|&id| m.store.value(id).clone())
        .collect();
    assert_ne!(solver_before, solver_after);
}

#[test]
fn serial_loss_drops_below_ln2_within_2000_iterations() {
    let mut m = MaesAssembly::new(
        ModelDims::default(),
        &[SolverSpec::for_task(Task::Serial)],
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    let cfg = TrainConfig {
        max_iters: 2000,
        validate_every: 0,
        seed: 1,
        ..TrainConfig::default()
    };
    let r = train(&mut m, &[0], &cfg, None).unwrap();
    assert!(r.final_ema < std::f64::consts::LN_2, "{}", r.final_ema);
}

#[test]
fn tape_matches_eager_on_random_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for task in Task::ALL {
        let m = MaesAssembly::new(ModelDims::default(), &[SolverSpec::for_task(task)], &mut rng).unwrap();
        let s = generate_with_len(task, 9, &GenConfig::default(), &mut rng);
        let mut tape = Tape::new();
        let (l, _) = m.full_forward(&mut tape, 0, &s, 12, false).unwrap();
        let (e, _) = m.infer(0, &s, 12, false).unwrap();
        assert_eq!(tape.value(&l).item(), e);
    }
}
