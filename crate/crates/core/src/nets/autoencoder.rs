use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{add_conv, conv, Bound, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{decode_checkpoint, encode_checkpoint, Tape, Tensor, Var};

pub const LATENT_CHANNELS: usize = 4;
pub const LATENT_SIDE: usize = 16;
const PATCH: usize = 4;
const SCALE_NAME: &str = "latent.scale";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderSpec {
    pub hidden: usize,
}

impl Default for AutoencoderSpec {
    fn default() -> Self {
        Self { hidden: 32 }
    }
}

/// Patch-based convolutional autoencoder. The encoder's output is
/// multiplied by a stored scale chosen after training so that latents of
/// training images have unit variance; the decoder divides it back out.
#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder {
    spec: AutoencoderSpec,
    params: ParamSet,
    latent_scale: f64,
}

impl Autoencoder {
    pub fn new(spec: AutoencoderSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = spec.hidden;
        let patch_ch = 3 * PATCH * PATCH;
        let mut p = ParamSet::default();
        add_conv(&mut p, "enc.in", patch_ch, h, 1, 1.0, &mut rng);
        add_conv(&mut p, "enc.mid", h, h, 3, 1.0, &mut rng);
        add_conv(&mut p, "enc.out", h, LATENT_CHANNELS, 3, 0.5, &mut rng);
        add_conv(&mut p, "dec.in", LATENT_CHANNELS, h, 3, 1.0, &mut rng);
        add_conv(&mut p, "dec.mid", h, h, 3, 1.0, &mut rng);
        add_conv(&mut p, "dec.out", h, patch_ch, 1, 0.5, &mut rng);
        Self { spec, params: p, latent_scale: 1.0 }
    }

    pub fn spec(&self) -> AutoencoderSpec {
        self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn latent_scale(&self) -> f64 {
        self.latent_scale
    }

    pub fn set_latent_scale(&mut self, s: f64) -> Result<()> {
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::invalid(format!("latent scale {s}")));
        }
        self.latent_scale = s;
        Ok(())
    }

    /// `[1, 3, 64, 64] -> [1, 4, 16, 16]` on a tape.
    pub fn encode_var(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        let h = tape.space_to_depth(x, PATCH)?;
        let h = conv(tape, b, "enc.in", h, 1)?;
        let h = tape.silu(h)?;
        let h = conv(tape, b, "enc.mid", h, 1)?;
        let h = tape.silu(h)?;
        let z = conv(tape, b, "enc.out", h, 1)?;
        tape.scale(z, self.latent_scale)
    }

    /// `[1, 4, 16, 16] -> [1, 3, 64, 64]` on a tape.
    pub fn decode_var(&self, tape: &mut Tape, b: &Bound, z: Var) -> Result<Var> {
        let z = tape.scale(z, 1.0 / self.latent_scale)?;
        let h = conv(tape, b, "dec.in", z, 1)?;
        let h = tape.silu(h)?;
        let h = conv(tape, b, "dec.mid", h, 1)?;
        let h = tape.silu(h)?;
        let h = conv(tape, b, "dec.out", h, 1)?;
        let h = tape.depth_to_space(h, PATCH)?;
        tape.sigmoid(h)
    }

    /// Image `[3, 64, 64]` to latent `[1, 4, 16, 16]`.
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        check_shape(image, &[3, 64, 64], "encode")?;
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let x = tape.constant(image.clone().unsqueeze_batch());
        let z = self.encode_var(&mut tape, &b, x)?;
        Ok(tape.value(z).clone())
    }

    /// Latent `[1, 4, 16, 16]` to image `[3, 64, 64]`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        check_shape(z, &[1, LATENT_CHANNELS, LATENT_SIDE, LATENT_SIDE], "decode")?;
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let x = self.decode_var(&mut tape, &b, zv)?;
        tape.value(x).clone().squeeze_batch()
    }

    pub fn reconstruct(&self, image: &Tensor) -> Result<Tensor> {
        self.decode(&self.encode(image)?)
    }

    /// Mean per-pixel squared reconstruction error.
    pub fn reconstruction_mse<'a>(&self, images: impl IntoIterator<Item = &'a Tensor>) -> Result<f64> {
        let (mut total, mut n) = (0.0, 0usize);
        for x in images {
            let r = self.reconstruct(x)?;
            total += r.sub(x)?.data().iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
            n += 1;
        }
        if n == 0 {
            return Err(Error::invalid("reconstruction_mse of no images"));
        }
        Ok(total / n as f64)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut pairs: Vec<(String, Tensor)> =
            self.params.names().iter().cloned().zip(self.params.values().iter().cloned()).collect();
        pairs.push((SCALE_NAME.into(), Tensor::scalar(self.latent_scale).reshape(&[1]).expect("1 element")));
        encode_checkpoint(&pairs)
    }

    pub fn from_bytes(spec: AutoencoderSpec, bytes: &[u8]) -> Result<Self> {
        let mut pairs = decode_checkpoint(bytes)?;
        let (name, scale) = pairs.pop().ok_or_else(|| Error::Checkpoint("empty autoencoder checkpoint".into()))?;
        if name != SCALE_NAME || scale.len() != 1 {
            return Err(Error::Checkpoint(format!("expected trailing {SCALE_NAME}, found {name}")));
        }
        let mut model = Self::new(spec, 0);
        model.params.load_matching(&encode_checkpoint(&pairs))?;
        model.set_latent_scale(scale.data()[0])?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(spec: AutoencoderSpec, path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(spec, &std::fs::read(path)?)
    }

    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

pub(crate) fn check_shape(x: &Tensor, want: &[usize], op: &'static str) -> Result<()> {
    if x.shape() != want {
        return Err(Error::shape(op, format!("expected {want:?}, got {:?}", x.shape())));
    }
    Ok(())
}
