//! Diffusion identities, algorithm-structure invariants, the attention-edit
//! suite and the FID oracle.

use std::sync::atomic::{AtomicUsize, Ordering};

use glab::diffusion::{forward_diffuse, reverse_sample, GaussianOracle, NoiseSchedule, OraclePredictor, SamplerRng};
use glab::eval::fid;
use glab::guidance::{ilvr_blend, low_pass, Controls, GuidanceConfig, Models};
use glab::nets::{AttentionCall, AttentionHook, LATENT_CHANNELS, LATENT_SIDE};
use glab::scenegen::{parse_tokens, PAD};
use glab::semctl::modify_attention;
use glab::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{band_painting, ks_normal, Check};

fn latent(rng: &mut SamplerRng) -> Tensor {
    rng.gaussian(&[1, LATENT_CHANNELS, LATENT_SIDE, LATENT_SIDE])
}

/// Forward-noising residual variance, DDIM determinism and the KS test of
/// exact-oracle sampling against the data law.
pub fn diffusion_identities(models: &Models) -> Vec<Check> {
    let s = NoiseSchedule::default();
    let mut out = Vec::new();

    let mut rng = SamplerRng::new(11);
    let z0 = latent(&mut rng);
    for t in [20, 200, 500, 980] {
        let ab = s.alpha_bar(t).unwrap();
        let (mut sum, mut sq, mut n) = (0.0, 0.0, 0usize);
        for _ in 0..1000 {
            let zt = forward_diffuse(&s, &z0, t, &mut rng).unwrap();
            for (a, b) in zt.data().iter().zip(z0.data()) {
                let r = a - ab.sqrt() * b;
                sum += r;
                sq += r * r;
                n += 1;
            }
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        let rel = (var / (1.0 - ab) - 1.0).abs();
        out.push(Check::new(
            format!("forward_diffuse variance t={t}"),
            rel < 0.02,
            format!("var {var:.6} vs 1-ab {:.6} (rel {rel:.2e}) over {n} draws", 1.0 - ab),
        ));
    }

    let tokens = parse_tokens(&["photo", "river"]).unwrap();
    let start = latent(&mut SamplerRng::new(5));
    let last = s.timesteps().len() - 1;
    let run = || reverse_sample(&models.denoiser, &s, &start, last, &tokens, 3.0, None, None).unwrap();
    let (a, b) = (run(), run());
    out.push(Check::new("DDIM determinism", a == b, format!("max diff {:.3e}", a.max_abs_diff(&b).unwrap())));

    let (mu, sigma) = (0.3, 0.5);
    let oracle = OraclePredictor { oracle: GaussianOracle::new(mu, sigma), schedule: s.clone() };
    let mut samples = Vec::new();
    for seed in 0..4 {
        let z = latent(&mut SamplerRng::new(100 + seed));
        let x = reverse_sample(&oracle, &s, &z, last, &tokens, 1.0, None, None).unwrap();
        samples.extend_from_slice(x.data());
    }
    let (d, p) = ks_normal(&samples, mu, sigma);
    out.push(Check::new(
        "oracle reverse sampling KS",
        p > 0.01,
        format!("D {d:.4}, p {p:.3} over {} samples of N({mu}, {sigma}²)", samples.len()),
    ));
    out
}

/// Counts conditional (non-padding) cross-attention evaluations.
struct CallCounter<'a>(&'a AtomicUsize);

impl AttentionHook for CallCounter<'_> {
    fn on_attention(&mut self, call: &AttentionCall<'_>) -> glab::Result<Option<Vec<Tensor>>> {
        if call.tokens.iter().any(|&t| t != PAD) {
            self.0.fetch_add(1, Ordering::SeqCst);
        }
        Ok(None)
    }
}

pub fn painting_pair() -> (Tensor, Tensor) {
    (band_painting([0.4, 0.6, 0.9], [0.3, 0.6, 0.2]), band_painting([0.9, 0.8, 0.1], [0.5, 0.3, 0.2]))
}

/// Structural properties of the guidance algorithms on `models`.
pub fn algorithm_invariants(models: &Models) -> Vec<Check> {
    let mut out = Vec::new();
    let tokens = parse_tokens(&["photo", "river", "ground"]).unwrap();
    let (y1, y2) = painting_pair();
    let base = GuidanceConfig { seed: 21, ..GuidanceConfig::default() };
    let plain = models.text_only(&tokens, &base, Controls::default()).unwrap();

    let empty = GuidanceConfig { t_start: 0.01, t_end: 0.01, steps: 5, ..base.clone() };
    let r = models.gradop_plus(&y1, &tokens, &empty, Controls::default()).unwrap();
    out.push(Check::new(
        "GradOP+ empty window = plain sampling",
        r.latent == plain.latent && r.image == plain.image && r.losses.is_empty(),
        format!("max latent diff {:.3e}", r.latent.max_abs_diff(&plain.latent).unwrap()),
    ));
    let m0 = GuidanceConfig { steps: 0, ..base.clone() };
    let r = models.gradop_plus(&y1, &tokens, &m0, Controls::default()).unwrap();
    out.push(Check::new(
        "GradOP+ M=0 = plain sampling",
        r.latent == plain.latent && r.image == plain.image,
        format!("max latent diff {:.3e}", r.latent.max_abs_diff(&plain.latent).unwrap()),
    ));

    let a = models.gradop(&y1, &tokens, &m0, Controls::default()).unwrap();
    let b = models.gradop(&y2, &tokens, &m0, Controls::default()).unwrap();
    out.push(Check::new(
        "GradOP M=0 independent of y",
        a.latent == b.latent && a.image == b.image && a.losses.is_empty(),
        format!("max latent diff {:.3e}", a.latent.max_abs_diff(&b.latent).unwrap()),
    ));

    for m in [0, 1, 3] {
        let cfg = GuidanceConfig { steps: m, ..base.clone() };
        let calls = AtomicUsize::new(0);
        let ticks = AtomicUsize::new(0);
        let mut counter = CallCounter(&calls);
        let tick = |_: usize, _: usize| {
            ticks.fetch_add(1, Ordering::SeqCst);
        };
        let ctl = Controls { attention: Some(&mut counter), progress: Some(&tick) };
        let r = models.gradop_plus(&y1, &tokens, &cfg, ctl).unwrap();
        let (c, t) = (calls.load(Ordering::SeqCst), ticks.load(Ordering::SeqCst));
        let window = models.schedule.timesteps().iter().filter(|&&t| {
            let l = models.schedule.level(t);
            l >= cfg.t_end && l <= cfg.t_start
        });
        let expected_losses = m * window.count();
        out.push(Check::new(
            format!("GradOP+ M={m} runs 50 reverse steps"),
            c == 50 && t == 50 && r.losses.len() == expected_losses,
            format!("{c} denoiser calls, {t} steps, {} losses (expected {expected_losses})", r.losses.len()),
        ));
    }

    let one = GuidanceConfig { loopback_iters: 1, ..base.clone() };
    let lb = models.loopback(&y1, &tokens, &one, Controls::default()).unwrap();
    let sd = models.sdedit(&y1, &tokens, &one, Controls::default()).unwrap();
    out.push(Check::new(
        "loopback N_iter=1 = SDEdit",
        lb.latent == sd.latent && lb.image == sd.image,
        format!("max latent diff {:.3e}", lb.latent.max_abs_diff(&sd.latent).unwrap()),
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut idem, mut blend) = (true, 0.0f64);
    for n in [2, 4, 8, 16] {
        for _ in 0..8 {
            let x = Tensor::uniform(&[3, 64, 64], -1.0, 2.0, &mut rng);
            let y = Tensor::uniform(&[3, 64, 64], -1.0, 2.0, &mut rng);
            let p = low_pass(&x, n).unwrap();
            idem &= low_pass(&p, n).unwrap() == p;
            let b = ilvr_blend(&x, &y, n).unwrap();
            blend = blend.max(low_pass(&b, n).unwrap().max_abs_diff(&low_pass(&y, n).unwrap()).unwrap());
        }
    }
    out.push(Check::new("ILVR low-pass idempotent", idem, "φ(φ(x)) == φ(x) bitwise for N in {2,4,8,16}"));
    out.push(Check::new("ILVR φ(blend) = φ(y)", blend < 1e-12, format!("max diff {blend:.3e}")));
    out
}

/// Elementwise reference for the attention edit, written with explicit
/// loops and compensated sums.
pub fn attention_edit_oracle(a: &[f64], b: &[f64], w: f64, kappa: f64) -> Vec<f64> {
    let norm = |v: &[f64]| {
        let (mut s, mut c) = (0.0f64, 0.0f64);
        for x in v {
            let y = x * x - c;
            let t = s + y;
            c = (t - s) - y;
            s = t;
        }
        s.sqrt()
    };
    let (na, nb) = (norm(a), norm(b));
    let mut out = vec![0.0; a.len()];
    for i in 0..a.len() {
        let blend = (1.0 - kappa) * a[i] + kappa * na * (b[i] / nb);
        out[i] = w * blend;
    }
    out
}

fn random_map(rng: &mut ChaCha8Rng) -> Tensor {
    let raw: Vec<f64> = (0..64).map(|_| rng.random::<f64>().powi(3)).collect();
    let s: f64 = raw.iter().sum();
    Tensor::new(&[8, 8], raw.into_iter().map(|v| v / s).collect()).unwrap()
}

fn random_mask(rng: &mut ChaCha8Rng) -> Tensor {
    loop {
        let m = Tensor::from_fn(&[8, 8], |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
        if m.sum() > 0.0 {
            return m;
        }
    }
}

/// Endpoints, the Frobenius identity and the independent oracle.
pub fn attention_edit_suite(cases: usize) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut k0, mut k1) = (true, true);
    let (mut frob, mut oracle) = (0.0f64, 0.0f64);
    for _ in 0..cases {
        let (a, b) = (random_map(&mut rng), random_mask(&mut rng));
        let w = rng.random_range(0.0..2.0);
        let k = rng.random_range(0.0..=1.0);
        k0 &= modify_attention(&a, &b, w, 0.0).unwrap() == a.scale(w);
        let at_one = modify_attention(&a, &b, w, 1.0).unwrap();
        let expect = b.map(|v| w * ((v / b.norm()) * a.norm()));
        k1 &= at_one == expect;

        let full = modify_attention(&a, &b, w, k).unwrap();
        let term = full.sub(&a.scale(w * (1.0 - k))).unwrap();
        let target = w * k * a.norm();
        if target > 0.0 {
            frob = frob.max((term.norm() - target).abs() / target);
        }
        let o = attention_edit_oracle(a.data(), b.data(), w, k);
        oracle = oracle.max(full.data().iter().zip(&o).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
    }
    vec![
        Check::new("κ=0 gives w·A", k0, format!("{cases} cases, bitwise")),
        Check::new("κ=1 gives w·‖A‖·B/‖B‖", k1, format!("{cases} cases, bitwise")),
        Check::new("‖κ-term‖ = w·κ·‖A‖", frob < 1e-13, format!("max rel err {frob:.2e} over {cases} cases")),
        Check::new("independent oracle", oracle < 1e-12, format!("max abs diff {oracle:.2e} over {cases} cases")),
    ]
}

fn gaussian_sample(n: usize, mean: &[f64], std: &[f64], rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            mean.iter()
                .zip(std)
                .map(|(m, s)| {
                    let z: f64 = StandardNormal.sample(rng);
                    m + s * z
                })
                .collect()
        })
        .collect()
}

/// Analytic Fréchet distances of diagonal Gaussians, plus symmetry and
/// zero on identical sets.
pub fn fid_oracle() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = 10_000;
    let a = gaussian_sample(n, &[0.0; 4], &[1.0; 4], &mut rng);
    let mut out = Vec::new();
    let cases: [(&str, [f64; 4], [f64; 4], f64); 3] = [
        ("mean shift", [1.0; 4], [1.0; 4], 4.0),
        ("scale", [0.0; 4], [2.0; 4], 4.0),
        ("mean shift and scale", [1.0, 0.0, -1.0, 0.5], [2.0, 1.0, 0.5, 1.0], 2.25 + 1.25),
    ];
    for (name, mean, std, expect) in cases {
        let b = gaussian_sample(n, &mean, &std, &mut rng);
        let d = fid(&a, &b).unwrap();
        let rel = (d - expect).abs() / expect;
        out.push(Check::new(format!("FID {name}"), rel < 0.02, format!("{d:.4} vs analytic {expect} (rel {rel:.2e})")));
    }
    let b = gaussian_sample(2000, &[0.5, 0.0, 0.2, -0.3], &[1.0, 1.5, 0.7, 1.2], &mut rng);
    let c = gaussian_sample(2000, &[0.0; 4], &[1.0; 4], &mut rng);
    let (ab, ba) = (fid(&b, &c).unwrap(), fid(&c, &b).unwrap());
    out.push(Check::new("FID symmetry", (ab - ba).abs() < 1e-6, format!("{ab:.9} vs {ba:.9}")));
    let zero = fid(&b, &b).unwrap();
    out.push(Check::new("FID zero on identical", zero.abs() < 1e-6, format!("{zero:.3e}")));
    out
}
