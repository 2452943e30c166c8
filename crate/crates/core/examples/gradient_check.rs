//! Compares reverse-mode gradients of a full encoder-solver rollout with
//! central finite differences.
//!
//! cargo run --example gradient_check -- [task] [length]

use maes::model::{MaesAssembly, ModelDims, SolverSpec};
use maes::tasks::{generate_with_len, GenConfig, Task};
use maes::{Graph, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let task: Task = args.next().as_deref().unwrap_or("odd").parse()?;
    let len: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(5);
    let n = len + 3;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut model = MaesAssembly::new(ModelDims::default(), &[SolverSpec::for_task(task)], &mut rng)?;
    let sample = generate_with_len(task, len, &GenConfig::default(), &mut rng);

    let mut tape = Tape::new();
    let (loss, _) = model.full_forward(&mut tape, 0, &sample, n, false)?;
    println!(
        "{task}, L={len}, N={n}: loss {:.6}, tape of {} nodes",
        tape.value(&loss).item(),
        tape.len()
    );
    model.store.zero_grads();
    tape.backward(loss)?.accumulate_into(&mut model.store);

    let h = 1e-5;
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let analytic = model.store.grad(id).clone();
        let (mut worst, mut worst_abs, mut largest): (f64, f64, f64) = (0.0, 0.0, 0.0);
        for i in 0..analytic.len() {
            let orig = model.store.value(id).data()[i];
            model.store.value_mut(id).data_mut()[i] = orig + h;
            let up = model.infer(0, &sample, n, false)?.0;
            model.store.value_mut(id).data_mut()[i] = orig - h;
            let down = model.infer(0, &sample, n, false)?.0;
            model.store.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            let diff = (a - numeric).abs();
            worst_abs = worst_abs.max(diff);
            largest = largest.max(a.abs());
            // Differences below 1e-7 are finite-difference noise.
            if diff > 1e-7 {
                worst = worst.max(diff / a.abs().max(numeric.abs()));
            }
        }
        let p = model.store.get(id);
        println!(
            "{:<24} {:>4} scalars  max |grad| {largest:.2e}  max abs err {worst_abs:.2e}  max rel err {worst:.2e}",
            p.name,
            p.value.len()
        );
    }
    Ok(())
}
