//! The toy latent-diffusion networks: an autoencoder between 3×64×64 images
//! and 4×16×16 latents, and a conditional noise predictor with a single
//! cross-attention block over learned token embeddings.

mod autoencoder;
mod denoiser;
mod train;

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

pub use autoencoder::{Autoencoder, AutoencoderSpec, LATENT_CHANNELS, LATENT_SIDE};
pub use denoiser::{reborrow, timestep_embedding, AttentionCall, AttentionHook, Denoiser, DenoiserSpec, ATTENTION_SIDE, HEADS, HEAD_DIM};
pub use train::{denoiser_loss, train_autoencoder, train_denoiser, TrainConfig, TrainReport};

use crate::error::{Error, Result};
use crate::tensor::{decode_checkpoint, encode_checkpoint, Tape, Tensor, Var};

/// Named parameters in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.names.push(name.into());
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Puts every parameter on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| if trainable { tape.leaf(v.clone()) } else { tape.constant(v.clone()) })
            .collect();
        let index = self.names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Bound { vars, index }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let pairs: Vec<(String, Tensor)> = self.names.iter().cloned().zip(self.values.iter().cloned()).collect();
        encode_checkpoint(&pairs)
    }

    /// Hex SHA-256 of the checkpoint encoding.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Replaces values from a checkpoint whose names and shapes must match
    /// this set exactly.
    pub fn load_matching(&mut self, bytes: &[u8]) -> Result<()> {
        let pairs = decode_checkpoint(bytes)?;
        if pairs.len() != self.len() {
            return Err(Error::Checkpoint(format!("expected {} tensors, found {}", self.len(), pairs.len())));
        }
        for (i, (name, t)) in pairs.into_iter().enumerate() {
            if name != self.names[i] || t.shape() != self.values[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {i}: expected {} {:?}, found {name} {:?}",
                    self.names[i],
                    self.values[i].shape(),
                    t.shape()
                )));
            }
            self.values[i] = t;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

/// Tape handles of a bound [`ParamSet`].
#[derive(Debug)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        self.vars[*self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor {
    Tensor::randn(shape, rng).scale(gain * (2.0 / fan_in as f64).sqrt())
}

fn add_conv<R: Rng + ?Sized>(p: &mut ParamSet, name: &str, cin: usize, cout: usize, k: usize, gain: f64, rng: &mut R) {
    p.push(format!("{name}.w"), he_normal(&[cout, cin, k, k], cin * k * k, gain, rng));
    p.push(format!("{name}.b"), Tensor::zeros(&[cout]));
}

fn add_linear<R: Rng + ?Sized>(p: &mut ParamSet, name: &str, din: usize, dout: usize, gain: f64, rng: &mut R) {
    p.push(format!("{name}.w"), he_normal(&[din, dout], din, gain, rng));
    p.push(format!("{name}.b"), Tensor::zeros(&[dout]));
}

fn conv(tape: &mut Tape, b: &Bound, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = b.var(&format!("{name}.w"));
    let pad = tape.shape(w)[2] / 2;
    tape.conv2d(x, w, Some(b.var(&format!("{name}.b"))), stride, pad, 1)
}

/// `x · W + b` for `x: [rows, din]`.
fn linear(tape: &mut Tape, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = tape.matmul(x, b.var(&format!("{name}.w")))?;
    tape.add_bias(y, b.var(&format!("{name}.b")), 1)
}
