// The K×K influence matrix between a training and a test sample. With
// head-only gradients it is diagonal; once the shared layer is included the
// dimensions interact. Either way its entries sum to the scalar influence.

use dimrisk::dataset::{generate_synthetic, SynthConfig};
use dimrisk::influence::{disentangled_matrix, scalar_influence, InfluenceConfig};
use dimrisk::model::{fit_gd, Scope, TrainConfig};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let ds = generate_synthetic(&SynthConfig {
        n_samples: 200,
        feature_dim: 6,
        n_dims: 3,
        ..SynthConfig::default()
    })?;
    let head = fit_gd(
        &ds,
        None,
        &TrainConfig {
            hidden_dim: Some(4),
            epochs: 200,
            ..TrainConfig::default()
        },
    )?
    .head;
    let (train, test) = (&ds.samples()[0], &ds.samples()[1]);

    for scope in [Scope::HeadOnly, Scope::LastTwoLayers] {
        let cfg = InfluenceConfig {
            scope,
            lambda: vec![1.0, 0.5, 2.0],
        };
        let m = disentangled_matrix(&head, train, test, &cfg)?;
        println!("{scope}:");
        for row in m.phi.row_iter() {
            println!("  {}", row.iter().map(|v| format!("{v:>12.3e}")).collect::<String>());
        }
        println!(
            "  sum {:.6e}  scalar influence {:.6e}",
            m.total(),
            scalar_influence(&head, train, test, &cfg)?
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
