// Fit the K-head regressor in closed form and by gradient descent under
// each loss-balancing strategy, then score all of them on held-out labels.

use dimrisk::dataset::{generate_synthetic, split, SynthConfig};
use dimrisk::eval::evaluate;
use dimrisk::model::{fit_closed_form, fit_gd, Strategy, TrainConfig};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let ds = generate_synthetic(&SynthConfig {
        n_samples: 600,
        feature_dim: 8,
        n_dims: 3,
        label_noise_sd: vec![0.5, 0.1, 0.1],
        ..SynthConfig::default()
    })?;
    let (train, _, test) = split(&ds, (0.8, 0.0, 0.2), 1)?;

    let closed = fit_closed_form(&train, None, &TrainConfig::default())?;
    println!(
        "closed form            mean spearman {:.4}",
        evaluate(&closed, &test)?.mean
    );

    for strategy in [Strategy::Equal, Strategy::UncertaintyWeighting, Strategy::Rlw] {
        let cfg = TrainConfig {
            strategy,
            lr: 0.05,
            epochs: 400,
            ..TrainConfig::default()
        };
        let fit = fit_gd(&train, None, &cfg)?;
        let report = evaluate(&fit.head, &test)?;
        println!(
            "{:<22} mean spearman {:.4}  final loss {:.5}",
            format!("{strategy:?}"),
            report.mean,
            fit.loss_trajectory.last().copied().unwrap_or(f64::NAN)
        );
        if let Some(s) = fit.log_variances {
            println!("  learned log-variances {s:.3?}");
        }
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
