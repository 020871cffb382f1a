use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Autoencoder, AutoencoderSpec, Bound, Denoiser, DenoiserSpec, ParamSet};
use crate::diffusion::{diffuse_with_noise, NoiseSchedule};
use crate::error::{Error, Result};
use crate::scenegen::{self, SceneSample};
use crate::tensor::{adam_step, AdamState, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Probability of replacing the prompt by the pad-only sequence.
    pub dropout: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 10, lr: 2e-3, seed: 0, dropout: 0.1, batch_size: 16 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1], got {}", self.dropout)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub seconds: f64,
}

fn item_seed(seed: u64, epoch: usize, idx: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (idx as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

fn hflip(x: &Tensor) -> Tensor {
    let s = x.shape();
    let w = s[s.len() - 1];
    let d = x.data();
    Tensor::from_fn(s, |i| {
        let col = i % w;
        d[i - col + (w - 1 - col)]
    })
}

/// Loss and parameter gradients summed over `items`, accumulated in item
/// order so the result does not depend on thread scheduling.
fn batch_gradients<F>(params: &ParamSet, items: &[usize], loss_fn: F) -> Result<(Vec<Tensor>, f64)>
where
    F: Fn(&mut Tape, &Bound, usize) -> Result<Var> + Sync,
{
    let per_item: Vec<Result<(Vec<Tensor>, f64)>> = items
        .par_iter()
        .map(|&i| {
            let mut tape = Tape::new();
            let b = params.bind(&mut tape, true);
            let loss = loss_fn(&mut tape, &b, i)?;
            let value = tape.value(loss).item();
            let mut g = tape.backward(loss)?;
            Ok((b.vars().iter().map(|&v| g.take(v)).collect(), value))
        })
        .collect();
    let mut total: Option<Vec<Tensor>> = None;
    let mut loss = 0.0;
    for r in per_item {
        let (g, l) = r?;
        loss += l;
        total = Some(match total {
            None => g,
            Some(acc) => acc.iter().zip(&g).map(|(a, b)| a.add(b)).collect::<Result<_>>()?,
        });
    }
    Ok((total.unwrap_or_default(), loss))
}

fn run_epochs<F>(
    params: &mut ParamSet,
    n: usize,
    cfg: &TrainConfig,
    mut loss_fn: impl FnMut(usize) -> F,
) -> Result<TrainReport>
where
    F: Fn(&mut Tape, &Bound, usize) -> Result<Var> + Sync,
{
    cfg.validate()?;
    let start = Instant::now();
    let mut adam = AdamState::for_params(params.values(), cfg.lr);
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, epoch, usize::MAX));
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let f = loss_fn(epoch);
        let mut epoch_loss = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (grads, loss) = batch_gradients(params, batch, &f).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { epoch, step, loss: f64::NAN },
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            let scale = 1.0 / batch.len() as f64;
            let grads: Vec<Tensor> = grads.iter().map(|g| g.scale(scale)).collect();
            adam_step(params.values_mut(), &grads, &mut adam)?;
            epoch_loss += loss;
        }
        let mean = epoch_loss / n as f64;
        log::info!("epoch {epoch}: loss {mean:.6}");
        report.epoch_losses.push(mean);
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Fits the autoencoder to reconstruct scene images (with random horizontal
/// flips), then sets the latent scale to the inverse latent standard
/// deviation over the unflipped images.
pub fn train_autoencoder(
    data: &[SceneSample],
    spec: AutoencoderSpec,
    cfg: &TrainConfig,
) -> Result<(Autoencoder, TrainReport)> {
    if data.is_empty() {
        return Err(Error::invalid("autoencoder training needs a nonempty dataset"));
    }
    let mut model = Autoencoder::new(spec, cfg.seed);
    if cfg.epochs == 0 {
        return Ok((model, TrainReport::default()));
    }
    let mut params = model.params().clone();
    let report = {
        let model_ref = &model;
        run_epochs(&mut params, data.len(), cfg, |epoch| {
            move |tape: &mut Tape, b: &Bound, i: usize| {
                let mut rng = ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, epoch, i));
                let img = &data[i].image;
                let img = if rng.random_bool(0.5) { hflip(img) } else { img.clone() };
                let x = tape.constant(img.unsqueeze_batch());
                let z = model_ref.encode_var(tape, b, x)?;
                let r = model_ref.decode_var(tape, b, z)?;
                tape.mse(r, x)
            }
        })?
    };
    *model.params_mut() = params;
    let latents: Vec<Tensor> = data.par_iter().map(|s| model.encode(&s.image)).collect::<Result<_>>()?;
    let count = latents.len() * latents[0].len();
    let mean = latents.iter().map(Tensor::sum).sum::<f64>() / count as f64;
    let var = latents.iter().flat_map(|z| z.data().iter()).map(|v| (v - mean).powi(2)).sum::<f64>() / count as f64;
    model.set_latent_scale(1.0 / var.sqrt().max(1e-6))?;
    Ok((model, report))
}

/// Encoded latents of every image and its mirror.
pub(crate) fn latent_pairs(ae: &Autoencoder, data: &[SceneSample]) -> Result<Vec<[Tensor; 2]>> {
    data.par_iter()
        .map(|s| Ok([ae.encode(&s.image)?, ae.encode(&hflip(&s.image))?]))
        .collect()
}

/// One noise-prediction training example derived from `(seed, epoch, idx)`.
pub(crate) struct NoisedExample {
    pub z_t: Tensor,
    pub eps: Tensor,
    pub t: usize,
    pub tokens: Vec<usize>,
}

pub(crate) fn noised_example(
    schedule: &NoiseSchedule,
    latents: &[Tensor; 2],
    tokens: &[usize],
    dropout: f64,
    seed: u64,
) -> Result<NoisedExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z0 = &latents[rng.random_range(0..2)];
    let t = rng.random_range(0..schedule.train_steps());
    let eps = Tensor::randn(z0.shape(), &mut rng);
    let tokens = if rng.random::<f64>() < dropout { scenegen::null_tokens() } else { tokens.to_vec() };
    Ok(NoisedExample { z_t: diffuse_with_noise(schedule, z0, t, &eps)?, eps, t, tokens })
}

/// ε-prediction training with prompt dropout.
pub fn train_denoiser(
    data: &[SceneSample],
    ae: &Autoencoder,
    schedule: &NoiseSchedule,
    spec: DenoiserSpec,
    cfg: &TrainConfig,
) -> Result<(Denoiser, TrainReport)> {
    if data.is_empty() {
        return Err(Error::invalid("denoiser training needs a nonempty dataset"));
    }
    let mut model = Denoiser::new(spec, cfg.seed);
    if cfg.epochs == 0 {
        return Ok((model, TrainReport::default()));
    }
    let latents = latent_pairs(ae, data)?;
    let mut params = model.params().clone();
    let report = {
        let model_ref = &model;
        let latents = &latents;
        run_epochs(&mut params, data.len(), cfg, |epoch| {
            move |tape: &mut Tape, b: &Bound, i: usize| {
                let ex = noised_example(
                    schedule,
                    &latents[i],
                    &data[i].tokens,
                    cfg.dropout,
                    item_seed(cfg.seed ^ 0x5EED, epoch, i),
                )?;
                let z = tape.constant(ex.z_t);
                let target = tape.constant(ex.eps);
                let pred = model_ref.forward_var(tape, b, z, ex.t, &ex.tokens, 0, None)?;
                tape.mse(pred, target)
            }
        })?
    };
    *model.params_mut() = params;
    Ok((model, report))
}

/// Mean noise-prediction loss over fixed draws; comparable across models.
pub fn denoiser_loss(
    model: &Denoiser,
    ae: &Autoencoder,
    schedule: &NoiseSchedule,
    data: &[SceneSample],
    seed: u64,
) -> Result<f64> {
    let latents = latent_pairs(ae, data)?;
    let losses: Vec<f64> = latents
        .par_iter()
        .zip(data)
        .enumerate()
        .map(|(i, (l, s))| {
            let ex = noised_example(schedule, l, &s.tokens, 0.0, item_seed(seed, 0, i))?;
            let pred = model.denoise(&ex.z_t, ex.t, &ex.tokens, None)?;
            Ok(pred.sub(&ex.eps)?.data().iter().map(|v| v * v).sum::<f64>() / pred.len() as f64)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}
