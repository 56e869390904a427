// Build a synthetic corpus, corrupt two of its dimensions, and round-trip
// it through the JSONL format.

use dimrisk::dataset::{generate_synthetic, inject_dimension_noise, load_dataset, save_dataset, SynthConfig};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let clean = generate_synthetic(&SynthConfig {
        n_samples: 500,
        ..SynthConfig::default()
    })?;
    let noisy = inject_dimension_noise(&clean, 0.1, &[0, 2], 42)?;

    for (k, name) in noisy.dim_names().iter().enumerate() {
        let corrupted = noisy.corruption_column(k).iter().filter(|&&c| c).count();
        println!("{name}: {corrupted} of {} labels replaced", noisy.len());
    }

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("noisy.jsonl");
    save_dataset(&noisy, &path)?;
    let back = load_dataset(&path)?;
    assert_eq!(back.samples(), noisy.samples());
    println!("manifest keys: {:?}", back.meta().keys().collect::<Vec<_>>());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
