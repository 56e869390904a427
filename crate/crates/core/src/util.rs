use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Number of items selected by a fraction `rate` of `n`, i.e. `ceil(rate * n)`.
///
/// Products that land within 1e-9 of an integer are snapped to it first, so
/// `0.1 * 1000` is 100 and `(k / n) * n` is `k`.
pub fn fraction_count(rate: f64, n: usize) -> usize {
    let x = rate * n as f64;
    let nearest = x.round();
    let count = if (x - nearest).abs() <= 1e-9 * nearest.abs().max(1.0) {
        nearest
    } else {
        x.ceil()
    };
    (count.max(0.0) as usize).min(n)
}

pub(crate) fn sample_normal<R: rand::Rng>(rng: &mut R) -> f64 {
    rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, rng)
}

pub(crate) fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Indices of the `count` largest values, ties broken by smaller index.
pub(crate) fn top_indices(values: impl IntoIterator<Item = f64>, count: usize) -> Vec<usize> {
    let mut order: Vec<(usize, f64)> = values.into_iter().enumerate().collect();
    // stable sort keeps index order within ties
    order.sort_by(|a, b| b.1.total_cmp(&a.1));
    order.truncate(count);
    order.into_iter().map(|(i, _)| i).collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fraction_count_snaps_float_products() {
        assert_eq!(fraction_count(0.1, 1000), 100);
        assert_eq!(fraction_count(0.005, 2000), 10);
        assert_eq!(fraction_count(0.0, 10), 0);
        assert_eq!(fraction_count(1.0, 7), 7);
        assert_eq!(fraction_count(0.15, 10), 2);
        assert_eq!(fraction_count(0.11, 10), 2);
        assert_eq!(fraction_count(37.0 / 211.0, 211), 37);
    }

    #[test]
    fn top_indices_breaks_ties_by_index() {
        assert_eq!(top_indices([1.0, 3.0, 3.0, 2.0], 2), vec![1, 2]);
        assert_eq!(top_indices([5.0, 5.0, 5.0], 2), vec![0, 1]);
        assert!(top_indices([1.0], 0).is_empty());
    }
}
