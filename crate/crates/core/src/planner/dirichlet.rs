//! Gamma, Dirichlet and categorical draws.
//!
//! Gamma variates use Marsaglia and Tsang's squeeze method; shapes below one
//! go through `Gamma(a) = Gamma(a + 1) * U^(1/a)`. Everything is carried in
//! log space so that tiny shapes cannot underflow the normalisation.

use rand::Rng;
use rand_distr::StandardNormal;

/// Uniform on `(0, 1]`, safe to take the log of.
#[inline]
fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    1.0 - rng.gen::<f64>()
}

/// `ln X` for `X ~ Gamma(shape, 1)`.
pub fn ln_gamma_sample<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    debug_assert!(shape > 0.0 && shape.is_finite());
    if shape < 1.0 {
        let boosted = ln_gamma_sample(shape + 1.0, rng);
        return boosted + open_unit(rng).ln() / shape;
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let t = 1.0 + c * x;
        if t <= 0.0 {
            continue;
        }
        let v = t * t * t;
        let u = open_unit(rng);
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d.ln() + v.ln();
        }
    }
}

/// `X ~ Gamma(shape, 1)`.
pub fn gamma_sample<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    ln_gamma_sample(shape, rng).exp()
}

/// θ ~ Dirichlet(α) via normalised independent Gamma(α_i, 1) draws.
pub fn dirichlet_sample<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Vec<f64> {
    let logs: Vec<f64> = alpha.iter().map(|&a| ln_gamma_sample(a, rng)).collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut theta: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = theta.iter().sum();
    theta.iter_mut().for_each(|t| *t /= total);
    theta
}

/// Index drawn with probabilities `theta` (assumed normalised).
pub fn categorical_sample<R: Rng + ?Sized>(theta: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in theta.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    theta.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::SimRng;
    use rand::SeedableRng;

    fn moments(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v)
    }

    #[test]
    fn gamma_moments_match_shape() {
        let mut rng = SimRng::seed_from_u64(17);
        let n = 200_000;
        for shape in [0.3, 0.7, 1.0, 3.6, 16.8, 250.0] {
            let xs: Vec<f64> = (0..n).map(|_| gamma_sample(shape, &mut rng)).collect();
            let (m, v) = moments(&xs);
            // Gamma(k, 1): mean k, variance k; se of mean sqrt(k / n)
            let se = (shape / n as f64).sqrt();
            assert!((m - shape).abs() < 5.0 * se, "shape {shape}: mean {m}");
            assert!((v / shape - 1.0).abs() < 0.05, "shape {shape}: var {v}");
        }
    }

    #[test]
    fn gamma_is_positive_for_tiny_shapes() {
        let mut rng = SimRng::seed_from_u64(1);
        for _ in 0..10_000 {
            let l = ln_gamma_sample(1e-3, &mut rng);
            assert!(l.is_finite());
        }
    }

    #[test]
    fn dirichlet_sums_to_one() {
        let mut rng = SimRng::seed_from_u64(2);
        for alpha in [[1.0, 1.0], [0.01, 0.01], [1e6, 1.0], [0.7, 19.7]] {
            for _ in 0..1000 {
                let t = dirichlet_sample(&alpha, &mut rng);
                assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(t.iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }
    }

    #[test]
    fn categorical_frequencies() {
        let mut rng = SimRng::seed_from_u64(3);
        let theta = [0.2, 0.5, 0.3];
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[categorical_sample(&theta, &mut rng)] += 1;
        }
        for (c, p) in counts.iter().zip(theta) {
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((*c as f64 / n as f64 - p).abs() < 4.0 * se);
        }
    }

    #[test]
    fn degenerate_categorical() {
        let mut rng = SimRng::seed_from_u64(3);
        for _ in 0..1000 {
            assert_eq!(categorical_sample(&[1.0, 0.0], &mut rng), 0);
            assert_eq!(categorical_sample(&[0.0, 1.0], &mut rng), 1);
        }
    }
}
