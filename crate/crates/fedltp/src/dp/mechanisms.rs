//! Gaussian noise for the private local step and Laplace noise for the
//! validation-score release.

use crate::error::{Error, Result};
use crate::nn::{GradientVector, Mask};
use crate::rng::RngStream;

/// Gaussian mechanism parameters: noise multiplier and clipping threshold.
/// The per-coordinate noise standard deviation is `sigma * clip`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianParams {
    pub sigma: f64,
    pub clip: f64,
}

impl GaussianParams {
    pub fn new(sigma: f64, clip: f64) -> Result<Self> {
        if sigma < 0.0 || !sigma.is_finite() {
            return Err(Error::invalid("noise multiplier must be finite and >= 0"));
        }
        if clip <= 0.0 || !clip.is_finite() {
            return Err(Error::invalid("clipping threshold must be finite and > 0"));
        }
        Ok(GaussianParams { sigma, clip })
    }
}

/// Laplace mechanism parameters for the validation release. The sensitivity
/// of a correct-prediction count to one sample is 1, so the noise scale is
/// `sensitivity * lambda_val` and each release is `(1 / lambda_val)`-DP.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LaplaceParams {
    pub lambda_val: f64,
    pub sensitivity: f64,
}

impl LaplaceParams {
    pub fn new(lambda_val: f64) -> Result<Self> {
        if lambda_val <= 0.0 || !lambda_val.is_finite() {
            return Err(Error::invalid("lambda_val must be finite and > 0"));
        }
        Ok(LaplaceParams {
            lambda_val,
            sensitivity: 1.0,
        })
    }

    pub fn scale(&self) -> f64 {
        self.sensitivity * self.lambda_val
    }
}

/// Add independent `N(0, (sigma * clip)^2)` noise to every coordinate, then
/// re-apply the mask so pruned coordinates remain zero. Draw order is one
/// normal per coordinate, ascending. With `sigma == 0` the input is only
/// masked and no draws are consumed.
pub fn add_gaussian_noise(
    grad: &GradientVector,
    params: &GaussianParams,
    mask: &Mask,
    rng: &mut RngStream,
) -> GradientVector {
    assert_eq!(grad.len(), mask.len(), "gradient/mask length mismatch");
    let mut out = grad.clone();
    if params.sigma > 0.0 {
        let std = params.sigma * params.clip;
        for v in out.values_mut() {
            *v += std * rng.normal();
        }
    }
    mask.apply(out.values_mut());
    out
}

/// Release a correct-prediction count with zero-mean Laplace noise of scale
/// `sensitivity * lambda_val`.
pub fn perturb_score(score: usize, params: &LaplaceParams, rng: &mut RngStream) -> f64 {
    score as f64 + rng.laplace(params.scale())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_is_identity_on_support() {
        let grad = GradientVector::from_values(vec![1.0, -2.0, 3.0]);
        let mask = Mask::all_ones(3);
        let params = GaussianParams::new(0.0, 10.0).unwrap();
        let mut rng = RngStream::from_seed(1);
        let out = add_gaussian_noise(&grad, &params, &mask, &mut rng);
        assert_eq!(out, grad);
    }

    #[test]
    fn per_coordinate_std_matches_sigma_times_clip() {
        // sigma = 1.4, C = 10 on a large zero vector: empirical std within
        // 1% of 14.
        let n = 1_000_000;
        let grad = GradientVector::zeros(n);
        let mask = Mask::all_ones(n);
        let params = GaussianParams::new(1.4, 10.0).unwrap();
        let mut rng = RngStream::from_seed(2);
        let out = add_gaussian_noise(&grad, &params, &mask, &mut rng);
        let mean: f64 = out.values().iter().sum::<f64>() / n as f64;
        let var: f64 = out
            .values()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n as f64;
        let std = var.sqrt();
        assert!((std - 14.0).abs() / 14.0 < 0.01, "std {std}");
    }

    #[test]
    fn noise_is_deterministic_per_stream() {
        let grad = GradientVector::zeros(64);
        let mask = Mask::all_ones(64);
        let params = GaussianParams::new(1.4, 10.0).unwrap();
        let mut r1 = RngStream::from_seed(3);
        let mut r2 = RngStream::from_seed(3);
        let a = add_gaussian_noise(&grad, &params, &mask, &mut r1);
        let b = add_gaussian_noise(&grad, &params, &mask, &mut r2);
        assert_eq!(a, b);
    }

    #[test]
    fn noised_update_is_zero_off_support() {
        let grad = GradientVector::zeros(100);
        let bits: Vec<u8> = (0..100).map(|i| (i % 3 == 0) as u8).collect();
        let mask = Mask::from_bits(bits.clone()).unwrap();
        let params = GaussianParams::new(2.0, 5.0).unwrap();
        let mut rng = RngStream::from_seed(4);
        let out = add_gaussian_noise(&grad, &params, &mask, &mut rng);
        for (i, &b) in bits.iter().enumerate() {
            if b == 0 {
                assert_eq!(out.values()[i], 0.0);
            } else {
                assert_ne!(out.values()[i], 0.0);
            }
        }
    }

    #[test]
    fn laplace_moments() {
        // mean within 0.01 * lambda of 0, variance within 2% of 2 lambda^2
        let lambda = 7.0;
        let params = LaplaceParams::new(lambda).unwrap();
        let mut rng = RngStream::from_seed(5);
        let n = 1_000_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let noise = perturb_score(0, &params, &mut rng);
            sum += noise;
            sq += noise * noise;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01 * lambda, "mean {mean}");
        assert!(
            (var - 2.0 * lambda * lambda).abs() / (2.0 * lambda * lambda) < 0.02,
            "var {var}"
        );
    }

    #[test]
    fn pure_noise_when_score_is_zero() {
        let params = LaplaceParams::new(1000.0).unwrap();
        let mut rng = RngStream::from_seed(6);
        // with a huge scale the output is dominated by the noise term
        let noisy = perturb_score(0, &params, &mut rng);
        assert!(noisy != 0.0);
        assert!(noisy.abs() < 1000.0 * 50.0);
    }

    #[test]
    fn client_noises_are_uncorrelated() {
        let params = LaplaceParams::new(3.0).unwrap();
        let rounds = 100_000;
        let mut xs = Vec::with_capacity(rounds);
        let mut ys = Vec::with_capacity(rounds);
        for round in 0..rounds as u64 {
            let mut ra = RngStream::derive(9, crate::rng::purpose::VALIDATION_NOISE, &[0, round]);
            let mut rb = RngStream::derive(9, crate::rng::purpose::VALIDATION_NOISE, &[1, round]);
            xs.push(perturb_score(0, &params, &mut ra));
            ys.push(perturb_score(0, &params, &mut rb));
        }
        let n = rounds as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let cov: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (x - mx) * (y - my))
            .sum::<f64>()
            / n;
        let sx = (xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>() / n).sqrt();
        let sy = (ys.iter().map(|y| (y - my) * (y - my)).sum::<f64>() / n).sqrt();
        let corr = cov / (sx * sy);
        assert!(corr.abs() < 0.01, "corr {corr}");
    }

    #[test]
    fn laplace_matches_inverse_cdf_construction() {
        // Kolmogorov-Smirnov distance against the analytic CDF.
        let b = 2.5;
        let mut rng = RngStream::from_seed(7);
        let n = 200_000;
        let mut samples: Vec<f64> = (0..n).map(|_| rng.laplace(b)).collect();
        samples.sort_by(|a, c| a.partial_cmp(c).unwrap());
        let cdf = |x: f64| {
            if x < 0.0 {
                0.5 * (x / b).exp()
            } else {
                1.0 - 0.5 * (-x / b).exp()
            }
        };
        let mut ks: f64 = 0.0;
        for (i, &x) in samples.iter().enumerate() {
            let f = cdf(x);
            let hi = (i + 1) as f64 / n as f64;
            let lo = i as f64 / n as f64;
            ks = ks.max((f - lo).abs()).max((hi - f).abs());
        }
        assert!(ks < 0.005, "ks {ks}");
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(GaussianParams::new(-1.0, 10.0).is_err());
        assert!(GaussianParams::new(1.0, 0.0).is_err());
        assert!(LaplaceParams::new(0.0).is_err());
        assert!(LaplaceParams::new(f64::INFINITY).is_err());
    }
}
