//! Check suites shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

pub mod checks;
pub mod gradcheck;

use glab::diffusion::NoiseSchedule;
use glab::guidance::Models;
use glab::nets::{Autoencoder, AutoencoderSpec, Denoiser, DenoiserSpec};
use glab::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Outcome of one named check.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), pass, detail: detail.into() }
    }
}

pub fn assert_all(checks: &[Check]) {
    let failed: Vec<String> = checks.iter().filter(|c| !c.pass).map(|c| format!("{}: {}", c.name, c.detail)).collect();
    assert!(failed.is_empty(), "failed checks:\n{}", failed.join("\n"));
}

/// Untrained networks whose zero-initialized output layer is replaced by
/// small random weights, so the denoiser's prediction is not identically 0.
pub fn toy_models(seed: u64) -> Models {
    let ae = Autoencoder::new(AutoencoderSpec::default(), seed);
    let mut denoiser = Denoiser::new(DenoiserSpec::default(), seed ^ 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
    let names = denoiser.params().names().to_vec();
    for (name, value) in names.iter().zip(denoiser.params_mut().values_mut()) {
        if name.starts_with("out.") {
            *value = Tensor::randn(value.shape(), &mut rng).scale(0.05);
        }
    }
    Models { ae, denoiser, schedule: NoiseSchedule::default() }
}

/// Flat two-band painting used by the structural tests.
pub fn band_painting(top: [f64; 3], bottom: [f64; 3]) -> Tensor {
    Tensor::from_fn(&[3, 64, 64], |i| {
        let (c, r) = (i / 4096, (i % 4096) / 64);
        if r < 28 { top[c] } else { bottom[c] }
    })
}

/// Two-sided one-sample Kolmogorov–Smirnov test against a normal law.
/// Returns `(D, p)` with the asymptotic p-value.
pub fn ks_normal(samples: &[f64], mean: f64, std: f64) -> (f64, f64) {
    use statrs::distribution::{ContinuousCDF, Normal};
    let law = Normal::new(mean, std).expect("valid normal");
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = law.cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max);
    let sn = n.sqrt();
    (d, kolmogorov_q((sn + 0.12 + 0.11 / sn) * d))
}

fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}
