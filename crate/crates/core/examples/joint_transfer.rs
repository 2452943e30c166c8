//! Trains one encoder jointly with serial and reverse solvers, freezes it,
//! and trains a fresh solver for another task on top.
//!
//! cargo run --release --example joint_transfer -- [task] [seed]

use maes::model::{MaesAssembly, ModelDims, SolverSpec, ENCODER_GROUP};
use maes::tasks::Task;
use maes::trainer::{freeze, train, validate, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let task: Task = args.next().as_deref().unwrap_or("odd").parse()?;
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let joint = [SolverSpec::for_task(Task::Serial), SolverSpec::for_task(Task::Reverse)];
    let mut ej = MaesAssembly::new(ModelDims::default(), &joint, &mut rng)?;
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let r = train(&mut ej, &[0, 1], &cfg, None)?;
    println!(
        "joint encoder: converged={} after {} iterations",
        r.converged, r.iterations
    );

    let mut model = MaesAssembly::new(ModelDims::default(), &[SolverSpec::for_task(task)], &mut rng)?;
    model.store.copy_group_from(&ej.store, ENCODER_GROUP)?;
    freeze(&mut model.store, ENCODER_GROUP)?;
    println!(
        "{task} solver: {} trainable of {} parameters",
        model.store.trainable_scalar_count(),
        model.param_count()
    );
    let cfg = TrainConfig {
        seed: seed + 1,
        ..TrainConfig::for_task(task)
    };
    let r = train(&mut model, &[0], &cfg, None)?;
    println!(
        "{task} transfer: converged={} after {} iterations",
        r.converged, r.iterations
    );

    let mut vr = ChaCha8Rng::seed_from_u64(99);
    for (len, n) in [(20, 32), (200, 256)] {
        let (loss, acc) = validate(&model, 0, 16, len, n, &mut vr)?;
        println!("  L={len:<4} N={n:<4} loss {loss:.2e}  bit accuracy {acc:.5}");
    }
    Ok(())
}
