//! Painting-guided synthesis: latent optimization before (GradOP) or inside
//! (GradOP+) the reverse chain, and the SDEdit, loopback and latent ILVR
//! baselines.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_diffuse, reverse_sample, NoiseSchedule, SamplerRng, StepHook};
use crate::error::{Error, Result};
use crate::nets::{reborrow, AttentionHook, Autoencoder, AutoencoderSpec, Denoiser, DenoiserSpec, LATENT_CHANNELS, LATENT_SIDE};
use crate::painting::{self, PaintingFn, GAUSSIAN_SIGMA, GAUSSIAN_SIZE, QUANTIZE_TEMPERATURE};
use crate::semctl::AttentionRecord;
use crate::tensor::{adam_step, AdamState, Tape, Tensor};

/// Trained networks plus the schedule they were trained with. Immutable
/// once built; share it across jobs.
#[derive(Clone, Debug)]
pub struct Models {
    pub ae: Autoencoder,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidePainting {
    /// Gaussian blur (5 taps, σ = 1).
    #[default]
    Gaussian,
    /// Soft quantization to the reference painting's own palette.
    Quantize,
}

impl GuidePainting {
    pub fn resolve(self, y: &Tensor) -> Result<PaintingFn> {
        Ok(match self {
            GuidePainting::Gaussian => PaintingFn::Gaussian { size: GAUSSIAN_SIZE, sigma: GAUSSIAN_SIGMA },
            GuidePainting::Quantize => {
                PaintingFn::Quantize { palette: painting::palette_of(y)?, temperature: QUANTIZE_TEMPERATURE }
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// Weight of the latent anchor `γ‖z − z_anchor‖₂`.
    pub gamma: f64,
    /// Adam step size λ for the latent optimization.
    pub lr: f64,
    /// Gradient steps M per optimization.
    pub steps: usize,
    /// Starting noise level for SDEdit, loopback and GradOP.
    pub t0: f64,
    /// GradOP+ optimizes at every inference step whose level lies in
    /// `[t_end, t_start]`.
    pub t_start: f64,
    pub t_end: f64,
    /// Classifier-free guidance scale.
    pub cfg_scale: f64,
    pub loopback_iters: usize,
    /// Loopback level growth `t0 ← min(t0·k, 1)`.
    pub loopback_k: f64,
    /// ILVR low-pass factor.
    pub ilvr_factor: usize,
    pub painting: GuidePainting,
    pub seed: u64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            gamma: 1e-3,
            lr: 5e-2,
            steps: 40,
            t0: 0.8,
            t_start: 0.25,
            t_end: 0.1,
            cfg_scale: 3.0,
            loopback_iters: 4,
            loopback_k: 1.05,
            ilvr_factor: 4,
            painting: GuidePainting::Gaussian,
            seed: 0,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0 <= self.t_end && self.t_end <= self.t_start && self.t_start <= 1.0) {
            return bad(format!("window must satisfy 0 ≤ t_end ≤ t_start ≤ 1 (t_start {}, t_end {})", self.t_start, self.t_end));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be a finite value ≥ 0, got {}", self.gamma));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.t0 > 0.0 && self.t0 <= 1.0) {
            return bad(format!("t0 must lie in (0, 1], got {}", self.t0));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return bad(format!("cfg_scale must be a finite value ≥ 0, got {}", self.cfg_scale));
        }
        if self.loopback_iters == 0 || !(self.loopback_k > 0.0 && self.loopback_k.is_finite()) {
            return bad(format!("loopback needs iters ≥ 1 and k > 0 (iters {}, k {})", self.loopback_iters, self.loopback_k));
        }
        if self.ilvr_factor == 0 || !(LATENT_SIDE * 4).is_multiple_of(self.ilvr_factor) {
            return bad(format!("ilvr_factor must be ≥ 1 and divide 64, got {}", self.ilvr_factor));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "gradop")]
    GradOp,
    #[serde(rename = "gradop+")]
    GradOpPlus,
    #[serde(rename = "sdedit")]
    SdEdit,
    #[serde(rename = "loopback")]
    Loopback,
    #[serde(rename = "ilvr")]
    Ilvr,
    /// Plain prompt-only sampling; ignores the painting.
    #[serde(rename = "text")]
    TextOnly,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::GradOp, Method::GradOpPlus, Method::SdEdit, Method::Loopback, Method::Ilvr, Method::TextOnly];

    pub fn name(self) -> &'static str {
        match self {
            Method::GradOp => "gradop",
            Method::GradOpPlus => "gradop+",
            Method::SdEdit => "sdedit",
            Method::Loopback => "loopback",
            Method::Ilvr => "ilvr",
            Method::TextOnly => "text",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?}; expected one of gradop, gradop+, sdedit, loopback, ilvr, text")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisResult {
    /// `D(latent)`, `[3, 64, 64]`.
    pub image: Tensor,
    /// Final clean latent `[1, 4, 16, 16]`.
    pub latent: Tensor,
    /// Total loss before every optimization step, in execution order.
    pub losses: Vec<f64>,
    pub attention: Option<AttentionRecord>,
    pub seconds: f64,
}

/// Optional per-run instrumentation.
#[derive(Default)]
pub struct Controls<'a> {
    pub attention: Option<&'a mut dyn AttentionHook>,
    /// Called with `(reverse steps done, planned total)`.
    pub progress: Option<&'a (dyn Fn(usize, usize) + Sync)>,
}

struct Progress<'a> {
    done: usize,
    total: usize,
    cb: Option<&'a (dyn Fn(usize, usize) + Sync)>,
}

impl Progress<'_> {
    fn tick(&mut self) {
        self.done += 1;
        if let Some(cb) = self.cb {
            cb(self.done, self.total);
        }
    }
}

struct NoHook;
impl StepHook for NoHook {}

/// Forwards to `inner` and advances the progress counter after each step.
struct Tracked<'p, 'c, H> {
    inner: H,
    progress: &'p mut Progress<'c>,
}

impl<H: StepHook> StepHook for Tracked<'_, '_, H> {
    fn before_step(&mut self, z: &Tensor, t: usize, index: usize) -> Result<Option<Tensor>> {
        self.inner.before_step(z, t, index)
    }

    fn after_step(&mut self, z: &Tensor, t_prev: Option<usize>) -> Result<Option<Tensor>> {
        let r = self.inner.after_step(z, t_prev)?;
        self.progress.tick();
        Ok(r)
    }
}

fn check_inputs(y: &Tensor, cfg: &GuidanceConfig) -> Result<()> {
    cfg.validate()?;
    if y.shape() != [3, 64, 64] {
        return Err(Error::shape("guidance", format!("painting must be [3, 64, 64], got {:?}", y.shape())));
    }
    Ok(())
}

fn latent_shape() -> [usize; 4] {
    [1, LATENT_CHANNELS, LATENT_SIDE, LATENT_SIDE]
}

impl Models {
    pub fn load(
        ae_path: impl AsRef<std::path::Path>,
        denoiser_path: impl AsRef<std::path::Path>,
        ae_spec: AutoencoderSpec,
        denoiser_spec: DenoiserSpec,
    ) -> Result<Self> {
        Ok(Self {
            ae: Autoencoder::load(ae_spec, ae_path)?,
            denoiser: Denoiser::load(denoiser_spec, denoiser_path)?,
            schedule: NoiseSchedule::default(),
        })
    }

    /// Number of reverse steps `method` will take under `cfg`.
    pub fn planned_steps(&self, method: Method, cfg: &GuidanceConfig) -> Result<usize> {
        let full = self.schedule.timesteps().len();
        let from = |level: f64| self.schedule.index_for_level(level).map(|i| i + 1);
        Ok(match method {
            Method::TextOnly | Method::GradOpPlus | Method::Ilvr => full,
            Method::SdEdit => from(cfg.t0)?,
            Method::GradOp => full + from(cfg.t0)?,
            Method::Loopback => {
                loopback_levels(cfg.t0, cfg.loopback_k, cfg.loopback_iters).into_iter().map(from).sum::<Result<usize>>()?
            }
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn chain<H: StepHook>(
        &self,
        z: &Tensor,
        start_index: usize,
        tokens: &[usize],
        cfg: &GuidanceConfig,
        hook: H,
        progress: &mut Progress<'_>,
        attention: &mut Option<&mut dyn AttentionHook>,
    ) -> Result<(Tensor, H)> {
        let mut tracked = Tracked { inner: hook, progress };
        let z0 = reverse_sample(
            &self.denoiser,
            &self.schedule,
            z,
            start_index,
            tokens,
            cfg.cfg_scale,
            Some(&mut tracked),
            reborrow(attention),
        )?;
        Ok((z0, tracked.inner))
    }

    fn finish(&self, latent: Tensor, losses: Vec<f64>, start: Instant) -> Result<SynthesisResult> {
        let image = self.ae.decode(&latent)?;
        Ok(SynthesisResult { image, latent, losses, attention: None, seconds: start.elapsed().as_secs_f64() })
    }

    /// Noises `z` to inference index `index` and denoises it.
    #[allow(clippy::too_many_arguments)]
    fn renoise_and_denoise(
        &self,
        z: &Tensor,
        index: usize,
        tokens: &[usize],
        cfg: &GuidanceConfig,
        rng: &mut SamplerRng,
        progress: &mut Progress<'_>,
        attention: &mut Option<&mut dyn AttentionHook>,
    ) -> Result<Tensor> {
        let t = self.schedule.timesteps()[index];
        let zt = forward_diffuse(&self.schedule, z, t, rng)?;
        Ok(self.chain(&zt, index, tokens, cfg, NoHook, progress, attention)?.0)
    }

    /// Minimizes `mse(f(D(z)), y) + γ‖z − anchor‖₂` with Adam from `init`.
    pub fn optimize_latent(
        &self,
        init: &Tensor,
        anchor: &Tensor,
        y: &Tensor,
        f: &PaintingFn,
        cfg: &GuidanceConfig,
    ) -> Result<(Tensor, Vec<f64>)> {
        let mut z = vec![init.clone()];
        let mut adam = AdamState::for_params(&z, cfg.lr);
        let mut trace = Vec::with_capacity(cfg.steps);
        let target = y.clone().unsqueeze_batch();
        for step in 0..cfg.steps {
            let mut tape = Tape::new();
            let b = self.ae.params().bind(&mut tape, false);
            let zv = tape.leaf(z[0].clone());
            let yv = tape.constant(target.clone());
            let av = tape.constant(anchor.clone());
            let nan = |trace: &Vec<f64>| Error::OptimizationNaN { step, trace: trace.clone() };
            let loss = (|| {
                let x = self.ae.decode_var(&mut tape, &b, zv)?;
                let p = f.apply_var(&mut tape, x)?;
                let fit = tape.mse(p, yv)?;
                let d = tape.sub(zv, av)?;
                let n = tape.frobenius_norm(d)?;
                let n = tape.scale(n, cfg.gamma)?;
                tape.add(fit, n)
            })()
            .map_err(|e| match e {
                Error::NonFinite(_) => nan(&trace),
                other => other,
            })?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(nan(&trace));
            }
            trace.push(value);
            let g = tape.backward(loss)?.wrt(zv);
            adam_step(&mut z, &[g], &mut adam)?;
            if !z[0].is_finite() {
                return Err(nan(&trace));
            }
        }
        Ok((z.pop().expect("one latent"), trace))
    }

    /// Prompt-only sample from pure noise.
    pub fn text_only(&self, tokens: &[usize], cfg: &GuidanceConfig, ctl: Controls<'_>) -> Result<SynthesisResult> {
        cfg.validate()?;
        let start = Instant::now();
        let mut attention = ctl.attention;
        let last = self.schedule.timesteps().len() - 1;
        let mut progress = Progress { done: 0, total: self.planned_steps(Method::TextOnly, cfg)?, cb: ctl.progress };
        let mut rng = SamplerRng::new(cfg.seed);
        let zt = rng.gaussian(&latent_shape());
        let (z0, _) = self.chain(&zt, last, tokens, cfg, NoHook, &mut progress, &mut attention)?;
        self.finish(z0, Vec::new(), start)
    }

    fn sdedit_inner(
        &self,
        y: &Tensor,
        t0: f64,
        tokens: &[usize],
        cfg: &GuidanceConfig,
        rng: &mut SamplerRng,
        progress: &mut Progress<'_>,
        attention: &mut Option<&mut dyn AttentionHook>,
    ) -> Result<Tensor> {
        let zy = self.ae.encode(y)?;
        let idx = self.schedule.index_for_level(t0)?;
        self.renoise_and_denoise(&zy, idx, tokens, cfg, rng, progress, attention)
    }

    pub fn sdedit(&self, y: &Tensor, tokens: &[usize], cfg: &GuidanceConfig, ctl: Controls<'_>) -> Result<SynthesisResult> {
        check_inputs(y, cfg)?;
        let start = Instant::now();
        let mut attention = ctl.attention;
        let mut progress = Progress { done: 0, total: self.planned_steps(Method::SdEdit, cfg)?, cb: ctl.progress };
        let mut rng = SamplerRng::new(cfg.seed);
        let z0 = self.sdedit_inner(y, cfg.t0, tokens, cfg, &mut rng, &mut progress, &mut attention)?;
        self.finish(z0, Vec::new(), start)
    }

    /// Repeated SDEdit on its own output with a growing noise level. One
    /// noise stream runs through all iterations.
    pub fn loopback(&self, y: &Tensor, tokens: &[usize], cfg: &GuidanceConfig, ctl: Controls<'_>) -> Result<SynthesisResult> {
        check_inputs(y, cfg)?;
        let start = Instant::now();
        let mut attention = ctl.attention;
        let levels = loopback_levels(cfg.t0, cfg.loopback_k, cfg.loopback_iters);
        let mut progress = Progress { done: 0, total: self.planned_steps(Method::Loopback, cfg)?, cb: ctl.progress };
        let mut rng = SamplerRng::new(cfg.seed);
        let mut input = y.clone();
        let mut z0 = None;
        for &level in &levels {
            let z = self.sdedit_inner(&input, level, tokens, cfg, &mut rng, &mut progress, &mut attention)?;
            input = self.ae.decode(&z)?;
            z0 = Some(z);
        }
        self.finish(z0.expect("at least one iteration"), Vec::new(), start)
    }

    /// Latent ILVR: after every reverse step the decoded sample's low
    /// frequencies are replaced by those of the equally noised reference.
    pub fn ilvr(&self, y: &Tensor, tokens: &[usize], cfg: &GuidanceConfig, ctl: Controls<'_>) -> Result<SynthesisResult> {
        check_inputs(y, cfg)?;
        let start = Instant::now();
        let mut attention = ctl.attention;
        let last = self.schedule.timesteps().len() - 1;
        let mut progress = Progress { done: 0, total: self.planned_steps(Method::TextOnly, cfg)?, cb: ctl.progress };
        let mut rng = SamplerRng::new(cfg.seed);
        let zt = rng.gaussian(&latent_shape());
        let hook = IlvrHook { models: self, zy: self.ae.encode(y)?, factor: cfg.ilvr_factor, rng };
        let (z0, _) = self.chain(&zt, last, tokens, cfg, hook, &mut progress, &mut attention)?;
        self.finish(z0, Vec::new(), start)
    }

    /// Draws the prompt-only sample GradOP starts from. Returns the decoded
    /// sample and the noise stream to continue with.
    pub fn text_only_sample(&self, tokens: &[usize], cfg: &GuidanceConfig) -> Result<(Tensor, SamplerRng)> {
        self.text_only_sample_tracked(tokens, cfg, &mut Progress { done: 0, total: 0, cb: None }, &mut None)
    }

    fn text_only_sample_tracked(
        &self,
        tokens: &[usize],
        cfg: &GuidanceConfig,
        progress: &mut Progress<'_>,
        attention: &mut Option<&mut dyn AttentionHook>,
    ) -> Result<(Tensor, SamplerRng)> {
        let last = self.schedule.timesteps().len() - 1;
        let mut rng = SamplerRng::new(cfg.seed);
        let zt = rng.gaussian(&latent_shape());
        let (z, _) = self.chain(&zt, last, tokens, cfg, NoHook, progress, attention)?;
        Ok((self.ae.decode(&z)?, rng))
    }

    /// Second half of GradOP: encode the prompt-only sample, optimize toward
    /// the painting, then SDEdit the optimum at `t0`.
    pub fn gradop_refine(
        &self,
        x_text: &Tensor,
        rng: SamplerRng,
        y: &Tensor,
        tokens: &[usize],
        cfg: &GuidanceConfig,
        ctl: Controls<'_>,
    ) -> Result<SynthesisResult> {
        check_inputs(y, cfg)?;
        let start = Instant::now();
        let mut attention = ctl.attention;
        let mut progress = Progress { done: 0, total: self.planned_steps(Method::SdEdit, cfg)?, cb: ctl.progress };
        self.gradop_refine_tracked(x_text, rng, y, tokens, cfg, &mut progress, &mut attention, start)
    }

    #[allow(clippy::too_many_arguments)]
    fn gradop_refine_tracked(
        &self,
        x_text: &Tensor,
        mut rng: SamplerRng,
        y: &Tensor,
        tokens: &[usize],
        cfg: &GuidanceConfig,
        progress: &mut Progress<'_>,
        attention: &mut Option<&mut dyn AttentionHook>,
        start: Instant,
    ) -> Result<SynthesisResult> {
        let f = cfg.painting.resolve(y)?;
        let z_text = self.ae.encode(x_text)?;
        let (z_star, losses) = self.optimize_latent(&z_text, &z_text, y, &f, cfg)?;
        let idx = self.schedule.index_for_level(cfg.t0)?;
        let z0 = self.renoise_and_denoise(&z_star, idx, tokens, cfg, &mut rng, progress, attention)?;
        self.finish(z0, losses, start)
    }

    pub fn gradop(&self, y: &Tensor, tokens: &[usize], cfg: &GuidanceConfig, ctl: Controls<'_>) -> Result<SynthesisResult> {
        check_inputs(y, cfg)?;
        let start = Instant::now();
        let mut attention = ctl.attention;
        let mut progress = Progress { done: 0, total: self.planned_steps(Method::GradOp, cfg)?, cb: ctl.progress };
        let (x_text, rng) = self.text_only_sample_tracked(tokens, cfg, &mut progress, &mut attention)?;
        self.gradop_refine_tracked(&x_text, rng, y, tokens, cfg, &mut progress, &mut attention, start)
    }

    /// One reverse chain from noise; at every in-window step the latent is
    /// optimized toward the painting and then noised back to its level.
    pub fn gradop_plus(&self, y: &Tensor, tokens: &[usize], cfg: &GuidanceConfig, ctl: Controls<'_>) -> Result<SynthesisResult> {
        check_inputs(y, cfg)?;
        let start = Instant::now();
        let mut attention = ctl.attention;
        let last = self.schedule.timesteps().len() - 1;
        let mut progress = Progress { done: 0, total: self.planned_steps(Method::TextOnly, cfg)?, cb: ctl.progress };
        let mut rng = SamplerRng::new(cfg.seed);
        let zt = rng.gaussian(&latent_shape());
        let hook = GradOpPlusHook { models: self, y, f: cfg.painting.resolve(y)?, cfg, rng, losses: Vec::new() };
        let (z0, hook) = self.chain(&zt, last, tokens, cfg, hook, &mut progress, &mut attention)?;
        self.finish(z0, hook.losses, start)
    }

    pub fn synthesize(
        &self,
        method: Method,
        y: &Tensor,
        tokens: &[usize],
        cfg: &GuidanceConfig,
        ctl: Controls<'_>,
    ) -> Result<SynthesisResult> {
        match method {
            Method::GradOp => self.gradop(y, tokens, cfg, ctl),
            Method::GradOpPlus => self.gradop_plus(y, tokens, cfg, ctl),
            Method::SdEdit => self.sdedit(y, tokens, cfg, ctl),
            Method::Loopback => self.loopback(y, tokens, cfg, ctl),
            Method::Ilvr => self.ilvr(y, tokens, cfg, ctl),
            Method::TextOnly => self.text_only(tokens, cfg, ctl),
        }
    }
}

struct GradOpPlusHook<'a> {
    models: &'a Models,
    y: &'a Tensor,
    f: PaintingFn,
    cfg: &'a GuidanceConfig,
    rng: SamplerRng,
    losses: Vec<f64>,
}

impl StepHook for GradOpPlusHook<'_> {
    fn after_step(&mut self, z: &Tensor, t_prev: Option<usize>) -> Result<Option<Tensor>> {
        let Some(t) = t_prev else { return Ok(None) };
        let level = self.models.schedule.level(t);
        if self.cfg.steps == 0 || level < self.cfg.t_end || level > self.cfg.t_start {
            return Ok(None);
        }
        let (z_star, trace) = self.models.optimize_latent(z, z, self.y, &self.f, self.cfg)?;
        self.losses.extend(trace);
        Ok(Some(forward_diffuse(&self.models.schedule, &z_star, t, &mut self.rng)?))
    }
}

struct IlvrHook<'a> {
    models: &'a Models,
    zy: Tensor,
    factor: usize,
    rng: SamplerRng,
}

impl StepHook for IlvrHook<'_> {
    fn after_step(&mut self, z: &Tensor, t_prev: Option<usize>) -> Result<Option<Tensor>> {
        let ae = &self.models.ae;
        let zy_t = match t_prev {
            Some(t) => forward_diffuse(&self.models.schedule, &self.zy, t, &mut self.rng)?,
            None => self.zy.clone(),
        };
        let x = ae.decode(z)?;
        let yt = ae.decode(&zy_t)?;
        let blended = ilvr_blend(&x, &yt, self.factor)?;
        Ok(Some(ae.encode(&blended)?))
    }
}

/// Average-pool by `n`, then nearest-neighbor upsample by `n`; `[3, H, W]`.
pub fn low_pass(x: &Tensor, n: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone().unsqueeze_batch());
    let p = tape.avg_pool(v, n)?;
    let u = tape.upsample_nearest(p, n)?;
    tape.value(u).clone().squeeze_batch()
}

/// `φ(y_t) + (x_t − φ(x_t))`.
pub fn ilvr_blend(x: &Tensor, y: &Tensor, n: usize) -> Result<Tensor> {
    let detail = x.sub(&low_pass(x, n)?)?;
    low_pass(y, n)?.add(&detail)
}

/// Noise levels used by successive loopback iterations.
pub fn loopback_levels(t0: f64, k: f64, iters: usize) -> Vec<f64> {
    std::iter::successors(Some(t0), |&t| Some((t * k).min(1.0))).take(iters).collect()
}
