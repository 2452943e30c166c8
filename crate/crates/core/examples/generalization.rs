//! Evaluates a checkpoint on sequences much longer than it was trained on.
//!
//! cargo run --release --example generalization -- model.ckpt [task] [length] [batches]

use maes::checkpoint::Checkpoint;
use maes::evaluator::{generalization_eval, write_report_csv, GeneralizationSpec};
use maes::tasks::Task;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let path = args
        .next()
        .ok_or("usage: generalization <checkpoint> [task] [length] [batches]")?;
    let ckpt = Checkpoint::load(&path)?;
    let model = ckpt.to_assembly()?;
    let task: Task = match args.next() {
        Some(t) => t.parse()?,
        None => model.solvers[0].spec.task,
    };
    let length: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1000);
    let batches: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(10);

    let spec = GeneralizationSpec {
        length,
        memory: (length + 24).next_power_of_two(),
        batches,
        workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
        ..GeneralizationSpec::new(task)
    };
    println!(
        "{task}: {} batches of {} at L={} N={}",
        spec.batches, spec.batch_size, spec.length, spec.memory
    );
    let r = generalization_eval(&model, &spec)?;
    println!(
        "bit accuracy {:.5} ± {:.5}, exact match {:.3}, {:.1}s",
        r.mean_accuracy,
        r.ci95(),
        r.exact_match,
        r.wall_ms as f64 / 1000.0
    );
    write_report_csv(&mut std::io::stdout(), &[r])?;
    Ok(())
}
