use super::Tensor;
use crate::error::{Error, Result};
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Normal};

/// The crate-wide deterministic generator.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// I.i.d. normal samples shaped `rows × cols`.
pub fn gaussian_sample(rng: &mut Rng, mean: f64, stddev: f64, shape: [usize; 2]) -> Result<Tensor> {
    if !(stddev >= 0.0) {
        return Err(Error::Contract(format!(
            "negative standard deviation {stddev}"
        )));
    }
    let [r, c] = shape;
    if stddev == 0.0 {
        return Ok(Tensor::full(&[r, c], mean));
    }
    let normal = Normal::new(mean, stddev).map_err(|e| Error::Contract(e.to_string()))?;
    Ok(Tensor::from_fn(r, c, |_, _| normal.sample(rng)))
}

/// Uniform samples in `[lo, hi)`.
pub fn uniform_sample(rng: &mut Rng, lo: f64, hi: f64, shape: [usize; 2]) -> Tensor {
    let [r, c] = shape;
    if hi <= lo {
        return Tensor::full(&[r, c], lo);
    }
    Tensor::from_fn(r, c, |_, _| rng.gen_range(lo..hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_stddev_is_constant() {
        let t = gaussian_sample(&mut seeded_rng(1), 0.25, 0.0, [4, 5]).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn observation_noise_level() {
        let sigma = 0.00033;
        let t = gaussian_sample(&mut seeded_rng(7), 0.0, sigma, [1, 100_000]).unwrap();
        let n = t.len() as f64;
        let mean = t.sum() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var.sqrt() - sigma).abs() < 0.05 * sigma);
    }

    #[test]
    fn same_seed_same_stream() {
        let a = gaussian_sample(&mut seeded_rng(42), 0.0, 1.0, [3, 3]).unwrap();
        let b = gaussian_sample(&mut seeded_rng(42), 0.0, 1.0, [3, 3]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn negative_stddev_rejected() {
        assert!(matches!(
            gaussian_sample(&mut seeded_rng(0), 0.0, -1.0, [1, 1]),
            Err(Error::Contract(_))
        ));
    }
}
