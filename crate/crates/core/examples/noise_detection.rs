// Per-dimension self-influence as a label-noise detector: AUROC of each
// score column against the injected corruption mask.

use dimrisk::dataset::{generate_synthetic, inject_dimension_noise, SynthConfig};
use dimrisk::eval::auroc;
use dimrisk::influence::{self_influence_closed_form, InfluenceConfig};
use dimrisk::model::{fit_closed_form, TrainConfig};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let clean = generate_synthetic(&SynthConfig::default())?;
    let noisy = inject_dimension_noise(&clean, 0.1, &[0, 1, 2, 3, 4], 3)?;
    let probe = fit_closed_form(&noisy, None, &TrainConfig::default())?;
    let scores = self_influence_closed_form(&probe, &noisy, &InfluenceConfig::head_only())?;

    for (k, name) in noisy.dim_names().iter().enumerate() {
        let a = auroc(&scores.column(k), &noisy.corruption_column(k))?;
        println!("{name}: AUROC {:.2}", 100.0 * a);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
