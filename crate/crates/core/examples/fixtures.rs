//! Generates one sample per task, prints it, and round-trips a fixture file.

use maes::tasks::{generate_with_len, read_fixtures, write_fixtures, GenConfig, Task};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn hex(items: &[u8]) -> String {
    items.iter().map(|b| format!("{b:02x}")).collect::<Vec<_>>().join(" ")
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let cfg = GenConfig::default();
    for task in Task::ALL {
        let s = generate_with_len(task, 6, &cfg, &mut rng);
        println!("{task}");
        println!("  main   {}", hex(&s.main));
        if let Some(aux) = &s.aux {
            println!("  aux    {}", hex(aux));
        }
        println!("  target {}", hex(&s.target));
        println!("  mask   {:?}", s.mask);
    }

    let samples: Vec<_> = (0..100)
        .map(|_| maes::tasks::generate(Task::Equality, &cfg, &mut rng))
        .collect();
    let mut buf = Vec::new();
    write_fixtures(&mut buf, Task::Equality, &samples)?;
    let (task, back) = read_fixtures(&buf[..])?;
    let equal = back.iter().filter(|s| s.target.last() == Some(&1)).count();
    println!(
        "{} {task} fixtures in {} bytes, reload identical: {}, {equal} equal pairs",
        back.len(),
        buf.len(),
        back == samples
    );
    Ok(())
}
