//! Noise schedule, forward noising and deterministic DDIM sampling with
//! classifier-free guidance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nets::{reborrow, AttentionHook};
use crate::scenegen;
use crate::tensor::Tensor;

pub const TRAIN_STEPS: usize = 1000;
pub const INFERENCE_STEPS: usize = 50;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_bar: Vec<f64>,
    timesteps: Vec<usize>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(TRAIN_STEPS, BETA_START, BETA_END, INFERENCE_STEPS).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    /// Linear β from `beta_start` to `beta_end` over `train_steps`, with
    /// `inference_steps` evenly strided timesteps starting at 0.
    pub fn linear(train_steps: usize, beta_start: f64, beta_end: f64, inference_steps: usize) -> Result<Self> {
        if train_steps < 2
            || inference_steps == 0
            || inference_steps > train_steps
            || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0)
        {
            return Err(Error::invalid(format!(
                "schedule T={train_steps}, β {beta_start}..{beta_end}, {inference_steps} steps"
            )));
        }
        let betas: Vec<f64> = (0..train_steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (train_steps - 1) as f64)
            .collect();
        let alphas_bar = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        let stride = train_steps / inference_steps;
        let timesteps = (0..inference_steps).map(|i| i * stride).collect();
        Ok(Self { betas, alphas_bar, timesteps })
    }

    pub fn train_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.betas[t])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alphas_bar[t])
    }

    /// ᾱ at an optional timestep; `None` is the clean endpoint with ᾱ = 1.
    pub fn alpha_bar_or_clean(&self, t: Option<usize>) -> Result<f64> {
        t.map_or(Ok(1.0), |t| self.alpha_bar(t))
    }

    /// Increasing inference timesteps.
    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    fn stride(&self) -> usize {
        self.train_steps() / self.timesteps.len()
    }

    /// Maps a noise level in `[0, 1]` to an inference index, rounding down.
    pub fn index_for_level(&self, level: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&level) {
            return Err(Error::invalid(format!("noise level {level} outside [0, 1]")));
        }
        let raw = (level * self.train_steps() as f64 / self.stride() as f64 + 1e-9).floor() as usize;
        Ok(raw.min(self.timesteps.len() - 1))
    }

    /// Noise level `t / T` of a timestep.
    pub fn level(&self, t: usize) -> f64 {
        t as f64 / self.train_steps() as f64
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.train_steps() {
            return Err(Error::TimestepOutOfRange { t, max: self.train_steps() });
        }
        Ok(())
    }
}

/// Seeded Gaussian source; one stream per chain.
#[derive(Clone, Debug)]
pub struct SamplerRng(ChaCha8Rng);

impl SamplerRng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn gaussian(&mut self, shape: &[usize]) -> Tensor {
        Tensor::randn(shape, &mut self.0)
    }

    pub fn inner(&mut self) -> &mut ChaCha8Rng {
        &mut self.0
    }
}

/// `√ᾱ_t · z₀ + √(1−ᾱ_t) · ε` for a given ε.
pub fn diffuse_with_noise(schedule: &NoiseSchedule, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    let ab = schedule.alpha_bar(t)?;
    z0.scale(ab.sqrt()).axpy((1.0 - ab).sqrt(), eps)
}

pub fn forward_diffuse(schedule: &NoiseSchedule, z0: &Tensor, t: usize, rng: &mut SamplerRng) -> Result<Tensor> {
    schedule.alpha_bar(t)?;
    let eps = rng.gaussian(z0.shape());
    diffuse_with_noise(schedule, z0, t, &eps)
}

/// Predicts the noise in a batch of latents.
pub trait NoisePredictor: Sync {
    /// `z` is `[N, ...]`; `tokens[i]` conditions batch element `i`.
    fn predict(
        &self,
        z: &Tensor,
        t: usize,
        tokens: &[&[usize]],
        hook: Option<&mut dyn AttentionHook>,
    ) -> Result<Tensor>;
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn predict(&self, z: &Tensor, t: usize, tokens: &[&[usize]], hook: Option<&mut dyn AttentionHook>) -> Result<Tensor> {
        (**self).predict(z, t, tokens, hook)
    }
}

/// Exact posterior-mean noise for data drawn i.i.d. per element from
/// `N(mean, std²)`; ignores tokens.
#[derive(Clone, Copy, Debug)]
pub struct GaussianOracle {
    pub mean: f64,
    pub std: f64,
}

impl GaussianOracle {
    pub fn new(mean: f64, std: f64) -> Self {
        Self { mean, std }
    }

    pub fn eps(&self, schedule: &NoiseSchedule, z: &Tensor, t: usize) -> Result<Tensor> {
        let ab = schedule.alpha_bar(t)?;
        let var = ab * self.std * self.std + 1.0 - ab;
        let (sa, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(z.map(|v| s1 * (v - sa * self.mean) / var))
    }
}

/// A [`GaussianOracle`] bound to a schedule.
#[derive(Clone, Debug)]
pub struct OraclePredictor {
    pub oracle: GaussianOracle,
    pub schedule: NoiseSchedule,
}

impl NoisePredictor for OraclePredictor {
    fn predict(&self, z: &Tensor, t: usize, _: &[&[usize]], _: Option<&mut dyn AttentionHook>) -> Result<Tensor> {
        self.oracle.eps(&self.schedule, z, t)
    }
}

/// Wraps a predictor and counts calls.
pub struct CountingPredictor<P> {
    pub inner: P,
    calls: std::sync::atomic::AtomicUsize,
}

impl<P> CountingPredictor<P> {
    pub fn new(inner: P) -> Self {
        Self { inner, calls: Default::default() }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(std::sync::atomic::Ordering::SeqCst)
    }
}

impl<P: NoisePredictor> NoisePredictor for CountingPredictor<P> {
    fn predict(&self, z: &Tensor, t: usize, tokens: &[&[usize]], hook: Option<&mut dyn AttentionHook>) -> Result<Tensor> {
        self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        self.inner.predict(z, t, tokens, hook)
    }
}

/// Guided noise estimate `ε_u + α (ε_c − ε_u)`. The endpoints 0 and 1 skip
/// the unused branch.
pub fn guided_eps(
    predictor: &dyn NoisePredictor,
    z: &Tensor,
    t: usize,
    tokens: &[usize],
    cfg_scale: f64,
    hook: Option<&mut dyn AttentionHook>,
) -> Result<Tensor> {
    let n = z.batch_len();
    let null = scenegen::null_tokens();
    if cfg_scale == 0.0 {
        return predictor.predict(z, t, &vec![null.as_slice(); n], hook);
    }
    if cfg_scale == 1.0 {
        return predictor.predict(z, t, &vec![tokens; n], hook);
    }
    let both = Tensor::concat_batch(&[z.clone(), z.clone()])?;
    let mut conds = vec![tokens; n];
    conds.extend(std::iter::repeat_n(null.as_slice(), n));
    let eps = predictor.predict(&both, t, &conds, hook)?;
    let half = eps.len() / 2;
    let (c, u) = eps.data().split_at(half);
    let out = c.iter().zip(u).map(|(c, u)| u + cfg_scale * (c - u)).collect();
    Tensor::new(z.shape(), out)
}

/// One deterministic DDIM update from `t` to `t_prev` (`None` = clean).
#[allow(clippy::too_many_arguments)]
pub fn ddim_step(
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    z_t: &Tensor,
    t: usize,
    t_prev: Option<usize>,
    tokens: &[usize],
    cfg_scale: f64,
    hook: Option<&mut dyn AttentionHook>,
) -> Result<Tensor> {
    let ab = schedule.alpha_bar(t)?;
    if let Some(tp) = t_prev {
        if tp >= t {
            return Err(Error::NonMonotoneTimesteps { t, t_prev: tp });
        }
    }
    let ab_prev = schedule.alpha_bar_or_clean(t_prev)?;
    let eps = guided_eps(predictor, z_t, t, tokens, cfg_scale, hook)?;
    ddim_update(z_t, &eps, ab, ab_prev)
}

/// `√ᾱ' ẑ₀ + √(1−ᾱ') ε̂` with `ẑ₀ = (z − √(1−ᾱ) ε̂) / √ᾱ`.
pub fn ddim_update(z_t: &Tensor, eps: &Tensor, ab: f64, ab_prev: f64) -> Result<Tensor> {
    let (sa, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (spa, sp1) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    let out = z_t
        .zip_map(eps, |z, e| {
            let x0 = (z - s1 * e) / sa;
            spa * x0 + sp1 * e
        })?;
    if !out.is_finite() {
        return Err(Error::NonFinite("ddim_step"));
    }
    Ok(out)
}

/// Per-step intervention on the reverse chain. Returning `None` leaves the
/// latent untouched.
pub trait StepHook {
    /// Called with `z_t` before the step that leaves timestep `t`.
    fn before_step(&mut self, _z: &Tensor, _t: usize, _index: usize) -> Result<Option<Tensor>> {
        Ok(None)
    }

    /// Called with the latent the step produced at `t_prev`.
    fn after_step(&mut self, _z: &Tensor, _t_prev: Option<usize>) -> Result<Option<Tensor>> {
        Ok(None)
    }
}

/// Chains DDIM steps from inference index `start_index` down to the clean
/// latent.
#[allow(clippy::too_many_arguments)]
pub fn reverse_sample(
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    z_start: &Tensor,
    start_index: usize,
    tokens: &[usize],
    cfg_scale: f64,
    mut step_hook: Option<&mut dyn StepHook>,
    mut attn_hook: Option<&mut dyn AttentionHook>,
) -> Result<Tensor> {
    let ts = schedule.timesteps();
    if start_index >= ts.len() {
        return Err(Error::invalid(format!("start index {start_index} beyond {} inference steps", ts.len())));
    }
    let mut z = z_start.clone();
    for i in (0..=start_index).rev() {
        let t = ts[i];
        if let Some(h) = step_hook.as_deref_mut() {
            if let Some(r) = h.before_step(&z, t, i)? {
                z = r;
            }
        }
        let t_prev = i.checked_sub(1).map(|j| ts[j]);
        z = ddim_step(predictor, schedule, &z, t, t_prev, tokens, cfg_scale, reborrow(&mut attn_hook))?;
        if let Some(h) = step_hook.as_deref_mut() {
            if let Some(r) = h.after_step(&z, t_prev)? {
                z = r;
            }
        }
    }
    Ok(z)
}
