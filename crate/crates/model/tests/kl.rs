use avsep_core::rng;
use avsep_model::disentangler::{kl_divergence, kl_tensor, sample_posterior, StylePosterior};
use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

const LN_2PI: f64 = 1.8378770664093453;

fn log_normal(z: &[f64], mu: &[f64], logvar: &[f64]) -> f64 {
    z.iter()
        .zip(mu)
        .zip(logvar)
        .map(|((z, m), lv)| -0.5 * (LN_2PI + lv + (z - m).powi(2) / lv.exp()))
        .sum()
}

/// With antithetic pairs the estimator's variance per pair is
/// 0.5 Σ (σ² − 1)², so log-variances stay within ±0.5 to keep 10⁵ samples
/// several standard errors inside the 1e-2 tolerance.
pub fn random_posterior(r: &mut impl Rng, d: usize) -> StylePosterior {
    StylePosterior {
        mu: (0..d).map(|_| r.random_range(-1.5..1.5)).collect(),
        logvar: (0..d).map(|_| r.random_range(-0.5..0.5)).collect(),
    }
}

/// Mean of log q(z) − log p(z) over antithetic pairs z = mu ± sigma·eps.
pub fn monte_carlo_kl(q: &StylePosterior, samples: usize, r: &mut impl Rng) -> f64 {
    let d = q.mu.len();
    let zeros = vec![0.0; d];
    let mut total = 0.0;
    for _ in 0..samples / 2 {
        let eps: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
        for sign in [1.0, -1.0] {
            let z: Vec<f64> = (0..d)
                .map(|i| q.mu[i] + sign * (0.5 * q.logvar[i]).exp() * eps[i])
                .collect();
            total += log_normal(&z, &q.mu, &q.logvar) - log_normal(&z, &zeros, &zeros);
        }
    }
    total / (samples / 2 * 2) as f64
}

#[test]
fn closed_form_matches_monte_carlo() {
    let mut r = rng::substream(11, "kl");
    for _ in 0..20 {
        let q = random_posterior(&mut r, 8);
        let mc = monte_carlo_kl(&q, 100_000, &mut r);
        let exact = kl_divergence(&q);
        assert!((mc - exact).abs() < 1e-2, "closed form {exact}, Monte Carlo {mc}");
    }
}

#[test]
fn standard_normal_posterior_has_zero_kl() {
    let q = StylePosterior {
        mu: vec![0.0; 5],
        logvar: vec![0.0; 5],
    };
    assert_eq!(kl_divergence(&q), 0.0);
}

#[test]
fn batched_kl_is_the_mean_of_per_sample_kl() {
    let mut r = rng::substream(12, "kl");
    let qs: Vec<StylePosterior> = (0..4).map(|_| random_posterior(&mut r, 6)).collect();
    let flat = |f: fn(&StylePosterior) -> &Vec<f64>| {
        Tensor::from_vec(qs.iter().flat_map(|q| f(q).clone()).collect::<Vec<_>>(), (4, 6), &Device::Cpu)
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap()
    };
    let batched = kl_tensor(&flat(|q| &q.mu), &flat(|q| &q.logvar))
        .unwrap()
        .to_scalar::<f64>()
        .unwrap();
    let mean = qs.iter().map(kl_divergence).sum::<f64>() / 4.0;
    assert!((batched - mean).abs() < 1e-12);
}

#[test]
fn sampler_moments_follow_the_posterior() {
    let q = StylePosterior {
        mu: vec![0.5, -1.0],
        logvar: vec![0.0, (0.25f64).ln()],
    };
    let mut r = rng::substream(13, rng::SAMPLING);
    let n = 40_000;
    let draws: Vec<Vec<f64>> = (0..n).map(|_| sample_posterior(&q, &mut r).z).collect();
    for d in 0..2 {
        let mean = draws.iter().map(|z| z[d]).sum::<f64>() / n as f64;
        let var = draws.iter().map(|z| (z[d] - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - q.mu[d]).abs() < 0.02, "dim {d} mean {mean}");
        assert!((var - q.logvar[d].exp()).abs() < 0.03, "dim {d} variance {var}");
    }
}
