// When one dimension's self-influence dwarfs the others, a single global
// score only sees that dimension. Per-dimension risk sets still catch the
// corrupted samples of the quiet dimensions.

use dimrisk::dataset::{generate_synthetic, inject_dimension_noise, SynthConfig};
use dimrisk::eval::masking_report;
use dimrisk::influence::{global_tracin_self, self_influence_closed_form, InfluenceConfig};
use dimrisk::model::{fit_closed_form, TrainConfig};
use dimrisk::refine::{ddp_select, global_prune_select};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let clean = generate_synthetic(&SynthConfig {
        label_scale: vec![10.0, 1.0, 1.0, 1.0, 1.0],
        ..SynthConfig::default()
    })?;
    let noisy = inject_dimension_noise(&clean, 0.1, &[0, 1, 2, 3, 4], 9)?;
    let cfg = InfluenceConfig::head_only();
    let probe = fit_closed_form(&noisy, None, &TrainConfig::default())?;
    let scores = self_influence_closed_form(&probe, &noisy, &cfg)?;
    let global = global_tracin_self(&probe, &noisy, &cfg)?;

    let ddp = ddp_select(&scores, 0.1)?;
    let glob = global_prune_select(&noisy.ids(), &global, ddp.removal_ratio())?;
    for k in 0..noisy.n_dims() {
        let mask = noisy.corruption_column(k);
        let count = |idx: &[usize]| idx.iter().filter(|&&i| mask[i]).count();
        println!(
            "dim{k}: corrupted removed by DDP {:>3}, by global {:>3}",
            count(&ddp.removed_indices),
            count(&glob.removed_indices)
        );
    }

    let report = masking_report(&scores, &global, 0.1, Some(&noisy.corruption_rows()))?;
    for e in &report.per_dim {
        println!(
            "dim{}: {} of {} risk-set members invisible to the global top set",
            e.dim, e.masked, e.risk_set_size
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
