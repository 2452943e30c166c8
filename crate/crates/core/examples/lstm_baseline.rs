//! Trains the LSTM baseline with its length curriculum, then scores it on
//! long sequences.
//!
//! cargo run --release --example lstm_baseline -- [task] [max_iters]

use maes::baselines::{train_lstm_baseline, LstmConfig};
use maes::evaluator::GeneralizationSpec;
use maes::tasks::Task;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let task: Task = args.next().as_deref().unwrap_or("serial").parse()?;
    let mut cfg = LstmConfig::desk(task);
    cfg.train.max_iters = args.next().map(|s| s.parse()).transpose()?.unwrap_or(5000);
    let spec = GeneralizationSpec {
        batches: 2,
        batch_size: 8,
        ..GeneralizationSpec::new(task)
    };
    let (lstm, r) = train_lstm_baseline(task, &cfg, Some(&spec), None)?;
    println!(
        "{} layers x {} units, {} parameters",
        cfg.layers,
        cfg.hidden,
        lstm.param_count()
    );
    println!(
        "{} iterations, converged={}, curriculum reached L={}, accuracy there {:.4}",
        r.train.iterations, r.train.converged, r.curriculum_reached, r.short_accuracy
    );
    if let Some(g) = &r.generalization {
        println!(
            "L={} bit accuracy {:.4} over {} sequences",
            g.spec.length,
            g.mean_accuracy,
            g.spec.batches * g.spec.batch_size
        );
    }
    Ok(())
}
