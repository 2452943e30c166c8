//! Repeated-element probe: encodes one item many times and measures how much
//! the stored rows differ. An encoder without forward bias stores identical
//! rows for identical items regardless of what came before.
//!
//! cargo run --release --example forward_bias -- [es.ckpt ej.ckpt]

use maes::checkpoint::Checkpoint;
use maes::evaluator::forward_bias_report;
use maes::model::{MaesAssembly, ModelDims, SolverSpec};
use maes::tasks::Task;
use maes::trainer::{train, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn trained(tasks: &[Task]) -> Result<MaesAssembly, Box<dyn std::error::Error>> {
    let specs: Vec<SolverSpec> = tasks.iter().map(|&t| SolverSpec::for_task(t)).collect();
    let mut m = MaesAssembly::new(ModelDims::default(), &specs, &mut ChaCha8Rng::seed_from_u64(1))?;
    let idx: Vec<usize> = (0..specs.len()).collect();
    let r = train(&mut m, &idx, &TrainConfig::default(), None)?;
    println!("{tasks:?}: converged={} after {} iterations", r.converged, r.iterations);
    Ok(m)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let paths: Vec<String> = std::env::args().skip(1).collect();
    let (es, ej) = match &paths[..] {
        [a, b] => (Checkpoint::load(a)?.to_assembly()?, Checkpoint::load(b)?.to_assembly()?),
        _ => (trained(&[Task::Serial])?, trained(&[Task::Serial, Task::Reverse])?),
    };
    let items: Vec<u8> = (0..=255u8).step_by(17).collect();
    let fb = forward_bias_report(&ej, &es, &items, 20, 32)?;
    println!("dispersion over {} items at L={}:", fb.items.len(), fb.length);
    println!("  jointly trained encoder  {:.4e}", fb.dispersion_a);
    println!("  serial-only encoder      {:.4e}", fb.dispersion_b);
    println!("  ratio                    {:.4}", fb.ratio);
    Ok(())
}
