//! Trains an encoder and a serial-recall solver end to end, then saves the
//! checkpoint.
//!
//! cargo run --release --example serial_end_to_end -- [out.ckpt] [max_iters] [seed]

use maes::checkpoint::{Checkpoint, Provenance};
use maes::model::{MaesAssembly, ModelDims, SolverSpec};
use maes::tasks::Task;
use maes::trainer::{train, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "es.ckpt".into());
    let max_iters = args.next().map(|s| s.parse()).transpose()?.unwrap_or(100_000);
    let seed = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = MaesAssembly::new(ModelDims::default(), &[SolverSpec::for_task(Task::Serial)], &mut rng)?;
    println!("{} trainable parameters", model.param_count());

    let cfg = TrainConfig {
        max_iters,
        seed,
        ..TrainConfig::for_task(Task::Serial)
    };
    let report = train(&mut model, &[0], &cfg, None)?;
    for v in report.validation.iter().filter(|v| v.iteration % 5000 == 0) {
        println!(
            "iter {:>6}  val loss {:.3e}  accuracy {:.4}",
            v.iteration, v.loss, v.accuracy
        );
    }
    println!(
        "converged={} after {} iterations, EMA {:.2e}, {:.1}s",
        report.converged,
        report.iterations,
        report.final_ema,
        report.wall_ms as f64 / 1000.0
    );

    let prov = Provenance {
        pipeline: "example".into(),
        stage: "es".into(),
        seed,
        iterations: report.iterations as u64,
        converged: report.converged,
    };
    Checkpoint::from_assembly(&model, prov).save(&out)?;
    println!("saved {out}");
    Ok(())
}
