//! Runs an experiment pipeline from a config file (or a built-in one by name).
//!
//! cargo run --release --example run_pipeline -- [examples/pipelines/serial_then_odd.cfg | ej_joint] [out_dir]

use maes::experiments::{builtin_pipeline, run_pipeline, ExperimentPipeline, RunOptions};
use std::path::{Path, PathBuf};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let source = args
        .next()
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/examples/pipelines/serial_then_odd.cfg").into());
    let pipeline = if Path::new(&source).is_file() {
        ExperimentPipeline::from_file(&source)?
    } else {
        builtin_pipeline(&source)?
    };
    let opts = RunOptions {
        seed: 1,
        out_dir: PathBuf::from(args.next().unwrap_or_else(|| format!("runs/{}", pipeline.name))),
        write_metrics: true,
    };
    println!("{}: {}", pipeline.name, pipeline.description);
    for outcome in run_pipeline(&pipeline, &opts)? {
        let acc = outcome.final_validation_accuracy().unwrap_or(f64::NAN);
        println!(
            "  {:<12} {:?}: converged={} iterations={} val accuracy {acc:.4}",
            outcome.stage, outcome.tasks, outcome.report.converged, outcome.report.iterations
        );
    }
    println!("checkpoints and metrics in {}", opts.out_dir.display());
    Ok(())
}
