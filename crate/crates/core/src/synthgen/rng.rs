//! Counter-based random streams and Poisson sampling.
//!
//! Every draw is a pure function of `(seed, stream, counter)`, so a pixel's
//! noise does not depend on the order pixels are visited in.

use std::sync::OnceLock;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent child seed from a parent seed and a tag.
#[inline]
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag.wrapping_mul(GOLDEN)))
}

/// One stream of a counter-based generator.
#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        CounterRng {
            key: derive_seed(seed, stream),
            counter: 0,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let out = splitmix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)));
        self.counter += 1;
        out
    }

    /// Uniform on `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on the open interval `(0, 1)`.
    #[inline]
    pub fn uniform_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }
}

const LOG_FACT_TABLE: usize = 256;

/// `ln(k!)`.
pub fn log_factorial(k: u64) -> f64 {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = vec![0.0f64; LOG_FACT_TABLE];
        for i in 1..LOG_FACT_TABLE {
            t[i] = t[i - 1] + (i as f64).ln();
        }
        t
    });
    if (k as usize) < LOG_FACT_TABLE {
        return table[k as usize];
    }
    let n = k as f64;
    let inv = 1.0 / n;
    let inv2 = inv * inv;
    n * n.ln() - n
        + 0.5 * (2.0 * std::f64::consts::PI * n).ln()
        + inv * (1.0 / 12.0 - inv2 * (1.0 / 360.0 - inv2 / 1260.0))
}

/// Draw from Poisson(`lambda`): inversion below 10, Hörmann's transformed
/// rejection (PTRS) above.
pub fn poisson(rng: &mut CounterRng, lambda: f64) -> u64 {
    debug_assert!(lambda >= 0.0 && lambda.is_finite());
    if lambda <= 0.0 {
        0
    } else if lambda < 10.0 {
        poisson_inversion(rng, lambda)
    } else {
        poisson_ptrs(rng, lambda)
    }
}

fn poisson_inversion(rng: &mut CounterRng, lambda: f64) -> u64 {
    let u = rng.uniform();
    let mut p = (-lambda).exp();
    let mut cdf = p;
    let mut k = 0u64;
    // the tail cap only matters when rounding leaves cdf just below u ~ 1
    while u > cdf && k < 1000 {
        k += 1;
        p *= lambda / k as f64;
        cdf += p;
    }
    k
}

fn poisson_ptrs(rng: &mut CounterRng, lambda: f64) -> u64 {
    let slam = lambda.sqrt();
    let loglam = lambda.ln();
    let b = 0.931 + 2.53 * slam;
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let vr = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u = rng.uniform() - 0.5;
        let v = rng.uniform_open();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + lambda + 0.43).floor();
        if us >= 0.07 && v <= vr {
            return k as u64;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        let lhs = v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln();
        let rhs = -lambda + k * loglam - log_factorial(k as u64);
        if lhs <= rhs {
            return k as u64;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments(lambda: f64, n: u64, seed: u64) -> (f64, f64) {
        let draws: Vec<f64> = (0..n)
            .map(|i| poisson(&mut CounterRng::new(seed, i), lambda) as f64)
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (mean, var)
    }

    #[test]
    fn moments_match_lambda() {
        let n = 200_000u64;
        for &lambda in &[0.05, 0.9, 4.7, 9.99, 10.0, 37.5, 1000.0, 5000.0] {
            let (mean, var) = moments(lambda, n, 17);
            let sigma = (lambda / n as f64).sqrt();
            assert!(
                (mean - lambda).abs() < 5.0 * sigma,
                "lambda {lambda}: mean {mean}"
            );
            assert!(
                (var / lambda - 1.0).abs() < 0.1,
                "lambda {lambda}: var {var}"
            );
        }
    }

    #[test]
    fn pmf_matches_on_both_branches() {
        // empirical frequencies vs exact pmf, within 5 binomial sigmas
        for &lambda in &[6.0, 25.0] {
            let n = 300_000u64;
            let mut hist = vec![0u64; 80];
            for i in 0..n {
                let k = poisson(&mut CounterRng::new(99, i), lambda) as usize;
                if k < hist.len() {
                    hist[k] += 1;
                }
            }
            for (k, &count) in hist.iter().enumerate() {
                let p = (-lambda + k as f64 * lambda.ln() - log_factorial(k as u64)).exp();
                let expected = p * n as f64;
                let sd = (n as f64 * p * (1.0 - p)).sqrt().max(1.0);
                assert!(
                    (count as f64 - expected).abs() < 5.0 * sd + 1.0,
                    "lambda {lambda} k {k}: {count} vs {expected:.1}"
                );
            }
        }
    }

    #[test]
    fn log_factorial_continuity() {
        let direct: f64 = (1..=300).map(|i| (i as f64).ln()).sum();
        assert!((log_factorial(300) - direct).abs() < 1e-9);
        assert_eq!(log_factorial(0), 0.0);
        assert!((log_factorial(5) - 120f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn streams_are_order_independent() {
        let mut a = CounterRng::new(5, 3);
        let first: Vec<u64> = (0..4).map(|_| a.next_u64()).collect();
        let _ = CounterRng::new(5, 2).next_u64();
        let mut b = CounterRng::new(5, 3);
        let again: Vec<u64> = (0..4).map(|_| b.next_u64()).collect();
        assert_eq!(first, again);
        assert_ne!(CounterRng::new(5, 4).next_u64(), first[0]);
    }

    #[test]
    fn zero_rate_gives_zero() {
        assert_eq!(poisson(&mut CounterRng::new(1, 1), 0.0), 0);
    }
}
