//! Runs a trained model on one long sequence and exports write attention,
//! read attention and memory as PGM images plus CSV.
//!
//! cargo run --release --example attention_maps -- model.ckpt [out_dir] [length]

use maes::checkpoint::Checkpoint;
use maes::evaluator::{attention_peaks, export_attention_map, export_memory_map, is_sequential_write};
use maes::tasks::{generate_with_len, GenConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let path = args
        .next()
        .ok_or("usage: attention_maps <checkpoint> [out_dir] [length]")?;
    let out = PathBuf::from(args.next().unwrap_or_else(|| "maps".into()));
    let length: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(100);
    let n = (length + 1).next_power_of_two();
    std::fs::create_dir_all(&out)?;

    let model = Checkpoint::load(&path)?.to_assembly()?;
    let task = model.solvers[0].spec.task;
    let sample = generate_with_len(task, length, &GenConfig::default(), &mut ChaCha8Rng::seed_from_u64(3));
    let (loss, roll) = model.infer(0, &sample, n, true)?;
    println!("{task} L={length} N={n}: loss {loss:.3e}");

    let peaks = attention_peaks(&roll.write_attention);
    let weakest = peaks.iter().map(|p| p.1).fold(1.0, f64::min);
    let start: Vec<usize> = peaks.iter().take(8).map(|p| p.0).collect();
    println!("write peaks start at {start:?}, weakest peak {weakest:.6}");
    println!(
        "sequential hard writes: {}",
        is_sequential_write(&roll.write_attention, 0.99)
    );

    export_attention_map(&roll.write_attention, out.join("write_attention"))?;
    export_attention_map(&roll.read_attention, out.join("read_attention"))?;
    if let Some(m) = &roll.encoded_memory {
        export_memory_map(m, out.join("memory"))?;
    }
    println!("maps written to {}", out.display());
    Ok(())
}
