use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::autoencoder::check_shape;
use super::{add_conv, add_linear, conv, linear, Bound, ParamSet};
use super::{LATENT_CHANNELS, LATENT_SIDE};
use crate::diffusion::{NoisePredictor, TRAIN_STEPS};
use crate::error::{Error, Result};
use crate::scenegen::{self, EMBEDDING_ROWS};
use crate::tensor::{Tape, Tensor, Var};

pub const HEADS: usize = 4;
pub const HEAD_DIM: usize = 32;
pub const ATTENTION_SIDE: usize = 8;
const EMBED_DIM: usize = 64;
const TIME_DIM: usize = 64;
const NORM_GROUPS: usize = 8;
const NORM_EPS: f64 = 1e-5;

/// One cross-attention evaluation, as seen by an [`AttentionHook`].
#[derive(Debug)]
pub struct AttentionCall<'a> {
    pub layer: usize,
    pub timestep: usize,
    /// Index of the batch element inside the current prediction call.
    pub batch_index: usize,
    /// The padded token sequence used as keys.
    pub tokens: &'a [usize],
    /// Post-softmax maps per head, each `[tokens, 8, 8]`.
    pub maps: &'a [Tensor],
}

impl AttentionCall<'_> {
    /// Head-averaged maps, `[tokens, 8, 8]`.
    pub fn head_mean(&self) -> Tensor {
        let mut acc = self.maps[0].clone();
        for m in &self.maps[1..] {
            acc = acc.add(m).expect("heads share a shape");
        }
        acc.scale(1.0 / self.maps.len() as f64)
    }
}

/// Observer and optional editor of cross-attention maps.
pub trait AttentionHook {
    /// Returning `Some` replaces the per-head maps (same shapes) for the rest
    /// of the forward pass.
    fn on_attention(&mut self, call: &AttentionCall<'_>) -> Result<Option<Vec<Tensor>>>;
}

/// Short reborrow of an optional hook, for passing it on inside a loop.
pub fn reborrow<'a>(hook: &'a mut Option<&mut dyn AttentionHook>) -> Option<&'a mut dyn AttentionHook> {
    match hook {
        Some(h) => Some(&mut **h),
        None => None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserSpec {
    /// Channels at 16×16.
    pub base: usize,
    /// Channels at 8×8 and 4×4.
    pub wide: usize,
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        Self { base: 16, wide: 32 }
    }
}

/// Three-resolution U-Net predicting ε from `(z_t, t, tokens)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    spec: DenoiserSpec,
    params: ParamSet,
}

fn add_block<R: rand::Rng + ?Sized>(p: &mut ParamSet, name: &str, c: usize, rng: &mut R) {
    add_conv(p, &format!("{name}.c1"), c, c, 3, 1.0, rng);
    add_linear(p, &format!("{name}.t"), TIME_DIM, c, 0.5, rng);
    add_conv(p, &format!("{name}.c2"), c, c, 3, 0.1, rng);
}

pub fn timestep_embedding(t: usize) -> Tensor {
    let half = TIME_DIM / 2;
    Tensor::from_fn(&[1, TIME_DIM], |i| {
        let f = (-(10000f64.ln()) * (i % half) as f64 / half as f64).exp();
        let a = t as f64 * f;
        if i < half {
            a.sin()
        } else {
            a.cos()
        }
    })
}

impl Denoiser {
    pub fn new(spec: DenoiserSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c1, c2) = (spec.base, spec.wide);
        let mut p = ParamSet::default();
        p.push("tok.emb", Tensor::randn(&[EMBEDDING_ROWS, EMBED_DIM], &mut rng));
        add_linear(&mut p, "time.l1", TIME_DIM, TIME_DIM, 1.0, &mut rng);
        add_conv(&mut p, "in", LATENT_CHANNELS, c1, 3, 1.0, &mut rng);
        add_block(&mut p, "r1", c1, &mut rng);
        add_conv(&mut p, "down1", c1, c2, 3, 1.0, &mut rng);
        add_block(&mut p, "r2", c2, &mut rng);
        for h in 0..HEADS {
            let s = 1.0 / 2f64.sqrt();
            p.push(format!("attn.q{h}"), Tensor::randn(&[c2, HEAD_DIM], &mut rng).scale(s / (c2 as f64).sqrt()));
            p.push(format!("attn.k{h}"), Tensor::randn(&[EMBED_DIM, HEAD_DIM], &mut rng).scale(s / (EMBED_DIM as f64).sqrt()));
            p.push(format!("attn.v{h}"), Tensor::randn(&[EMBED_DIM, HEAD_DIM], &mut rng).scale(1.0 / (EMBED_DIM as f64).sqrt()));
            p.push(
                format!("attn.o{h}"),
                Tensor::randn(&[HEAD_DIM, c2], &mut rng).scale(0.5 / ((HEAD_DIM * HEADS) as f64).sqrt()),
            );
        }
        p.push("attn.ob", Tensor::zeros(&[c2]));
        add_conv(&mut p, "down2", c2, c2, 3, 1.0, &mut rng);
        add_block(&mut p, "m", c2, &mut rng);
        add_conv(&mut p, "up1", c2, c2, 3, 1.0, &mut rng);
        add_conv(&mut p, "up2", c2, c1, 1, 1.0, &mut rng);
        add_conv(&mut p, "up3", c1, c1, 3, 1.0, &mut rng);
        p.push("out.w", Tensor::zeros(&[LATENT_CHANNELS, c1, 3, 3]));
        p.push("out.b", Tensor::zeros(&[LATENT_CHANNELS]));
        Self { spec, params: p }
    }

    pub fn spec(&self) -> DenoiserSpec {
        self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn block(&self, tape: &mut Tape, b: &Bound, name: &str, x: Var, temb: Var) -> Result<Var> {
        let h = tape.group_norm(x, NORM_GROUPS, NORM_EPS)?;
        let h = tape.silu(h)?;
        let h = conv(tape, b, &format!("{name}.c1"), h, 1)?;
        let tb = linear(tape, b, &format!("{name}.t"), temb)?;
        let c = tape.shape(tb)[1];
        let tb = tape.reshape(tb, &[c])?;
        let h = tape.add_bias(h, tb, 1)?;
        let h = tape.group_norm(h, NORM_GROUPS, NORM_EPS)?;
        let h = tape.silu(h)?;
        let h = conv(tape, b, &format!("{name}.c2"), h, 1)?;
        tape.add(x, h)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape,
        b: &Bound,
        x: Var,
        t: usize,
        tokens: &[usize],
        batch_index: usize,
        hook: Option<&mut dyn AttentionHook>,
    ) -> Result<Var> {
        let c = self.spec.wide;
        let hw = ATTENTION_SIDE * ATTENTION_SIDE;
        let h = tape.group_norm(x, NORM_GROUPS, NORM_EPS)?;
        let h = tape.reshape(h, &[c, hw])?;
        let queries = tape.transpose(h)?;
        let keys_in = tape.gather_rows(b.var("tok.emb"), tokens)?;
        let mut probs_t = Vec::with_capacity(HEADS);
        let mut values = Vec::with_capacity(HEADS);
        for head in 0..HEADS {
            let q = tape.matmul(queries, b.var(&format!("attn.q{head}")))?;
            let q = tape.scale(q, 1.0 / (HEAD_DIM as f64).sqrt())?;
            let k = tape.matmul(keys_in, b.var(&format!("attn.k{head}")))?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let p = tape.softmax(scores)?;
            probs_t.push(tape.transpose(p)?);
            values.push(tape.matmul(keys_in, b.var(&format!("attn.v{head}")))?);
        }
        if let Some(hook) = hook {
            let n = tokens.len();
            let maps: Vec<Tensor> = probs_t
                .iter()
                .map(|&p| tape.value(p).clone().reshape(&[n, ATTENTION_SIDE, ATTENTION_SIDE]))
                .collect::<Result<_>>()?;
            let call = AttentionCall { layer: 0, timestep: t, batch_index, tokens, maps: &maps };
            if let Some(replacement) = hook.on_attention(&call)? {
                if replacement.len() != HEADS || replacement.iter().any(|r| r.shape() != maps[0].shape()) {
                    return Err(Error::shape("attention hook", format!("expected {HEADS} maps of {:?}", maps[0].shape())));
                }
                for (slot, r) in probs_t.iter_mut().zip(replacement) {
                    *slot = tape.constant(r.reshape(&[n, hw])?);
                }
            }
        }
        let mut out: Option<Var> = None;
        for (head, (&pt, &v)) in probs_t.iter().zip(&values).enumerate() {
            let p = tape.transpose(pt)?;
            let o = tape.matmul(p, v)?;
            let y = tape.matmul(o, b.var(&format!("attn.o{head}")))?;
            out = Some(match out {
                Some(acc) => tape.add(acc, y)?,
                None => y,
            });
        }
        let y = tape.add_bias(out.expect("at least one head"), b.var("attn.ob"), 1)?;
        let y = tape.transpose(y)?;
        let y = tape.reshape(y, &[1, c, ATTENTION_SIDE, ATTENTION_SIDE])?;
        tape.add(x, y)
    }

    /// Noise prediction for one latent `[1, 4, 16, 16]` on a tape.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_var(
        &self,
        tape: &mut Tape,
        b: &Bound,
        z: Var,
        t: usize,
        tokens: &[usize],
        batch_index: usize,
        hook: Option<&mut dyn AttentionHook>,
    ) -> Result<Var> {
        if t >= TRAIN_STEPS {
            return Err(Error::TimestepOutOfRange { t, max: TRAIN_STEPS });
        }
        let tokens = scenegen::pad_tokens(tokens)?;
        let te = tape.constant(timestep_embedding(t));
        let te = linear(tape, b, "time.l1", te)?;
        let te = tape.silu(te)?;

        let h = conv(tape, b, "in", z, 1)?;
        let s1 = self.block(tape, b, "r1", h, te)?;
        let h = tape.avg_pool(s1, 2)?;
        let h = conv(tape, b, "down1", h, 1)?;
        let h = self.block(tape, b, "r2", h, te)?;
        let s2 = self.attention(tape, b, h, t, &tokens, batch_index, hook)?;
        let h = tape.avg_pool(s2, 2)?;
        let h = conv(tape, b, "down2", h, 1)?;
        let h = tape.silu(h)?;
        let h = self.block(tape, b, "m", h, te)?;
        let h = tape.upsample_nearest(h, 2)?;
        let h = tape.add(h, s2)?;
        let h = conv(tape, b, "up1", h, 1)?;
        let h = tape.silu(h)?;
        let h = conv(tape, b, "up2", h, 1)?;
        let h = tape.upsample_nearest(h, 2)?;
        let h = tape.add(h, s1)?;
        let h = conv(tape, b, "up3", h, 1)?;
        let h = tape.group_norm(h, NORM_GROUPS, NORM_EPS)?;
        let h = tape.silu(h)?;
        conv(tape, b, "out", h, 1)
    }

    /// Single-latent prediction without a batch wrapper.
    pub fn denoise(
        &self,
        z: &Tensor,
        t: usize,
        tokens: &[usize],
        hook: Option<&mut dyn AttentionHook>,
    ) -> Result<Tensor> {
        check_shape(z, &[1, LATENT_CHANNELS, LATENT_SIDE, LATENT_SIDE], "denoise")?;
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let out = self.forward_var(&mut tape, &b, zv, t, tokens, 0, hook)?;
        Ok(tape.value(out).clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.params.to_bytes()
    }

    pub fn from_bytes(spec: DenoiserSpec, bytes: &[u8]) -> Result<Self> {
        let mut model = Self::new(spec, 0);
        model.params.load_matching(bytes)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.params.save(path)
    }

    pub fn load(spec: DenoiserSpec, path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(spec, &std::fs::read(path)?)
    }

    pub fn digest(&self) -> String {
        self.params.digest()
    }
}

impl NoisePredictor for Denoiser {
    fn predict(
        &self,
        z: &Tensor,
        t: usize,
        tokens: &[&[usize]],
        mut hook: Option<&mut dyn AttentionHook>,
    ) -> Result<Tensor> {
        let n = z.batch_len();
        if tokens.len() != n {
            return Err(Error::invalid(format!("{} token sequences for a batch of {n}", tokens.len())));
        }
        let mut outs = Vec::with_capacity(n);
        for (i, toks) in tokens.iter().enumerate() {
            let zi = z.batch_item(i)?;
            check_shape(&zi, &[1, LATENT_CHANNELS, LATENT_SIDE, LATENT_SIDE], "denoise")?;
            let mut tape = Tape::new();
            let b = self.params.bind(&mut tape, false);
            let zv = tape.constant(zi);
            let out = self.forward_var(&mut tape, &b, zv, t, toks, i, reborrow(&mut hook))?;
            outs.push(tape.value(out).clone());
        }
        Tensor::concat_batch(&outs)
    }
}
