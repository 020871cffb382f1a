//! Region-level semantic control through the denoiser's cross-attention,
//! plus recording and summarizing of attention maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{Controls, GuidanceConfig, Method, Models, SynthesisResult};
use crate::nets::{AttentionCall, AttentionHook, ATTENTION_SIDE};
use crate::scenegen::{self, IMAGE_SIZE, MAX_TOKENS, PAD};
use crate::tensor::Tensor;
use crate::diffusion::TRAIN_STEPS;

const CELLS: usize = ATTENTION_SIDE * ATTENTION_SIDE;

/// A painted region steering one token: mask `B`, label `u`, weight `w`.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticRegion {
    mask: Tensor,
    cells: Tensor,
    label: usize,
    weight: f64,
}

impl SemanticRegion {
    /// `mask` is `[64, 64]` with entries in {0, 1}.
    pub fn new(mask: Tensor, label: usize, weight: f64) -> Result<Self> {
        if mask.shape() != [IMAGE_SIZE, IMAGE_SIZE] {
            return Err(Error::shape("region", format!("mask must be [64, 64], got {:?}", mask.shape())));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("region mask must be binary"));
        }
        if !scenegen::is_semantic(label) {
            let name = scenegen::token_name(label).unwrap_or("?");
            return Err(Error::invalid(format!("region label {name:?} is not a semantic token")));
        }
        if !(weight >= 0.0 && weight.is_finite()) {
            return Err(Error::invalid(format!("region weight must be finite and ≥ 0, got {weight}")));
        }
        let cells = downsample_mask(&mask)?;
        if cells.norm() == 0.0 {
            let name = scenegen::token_name(label).unwrap_or("?");
            return Err(Error::ZeroMaskNorm(format!("mask for {name:?} vanishes at 8×8")));
        }
        Ok(Self { mask, cells, label, weight })
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    /// The mask at attention resolution, `[8, 8]`.
    pub fn cells(&self) -> &Tensor {
        &self.cells
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }
}

/// Average-pools a `[64, 64]` mask to `[8, 8]` and re-binarizes at 0.5.
pub fn downsample_mask(mask: &Tensor) -> Result<Tensor> {
    let side = mask.shape().first().copied().unwrap_or(0);
    if mask.rank() != 2 || mask.shape()[1] != side || side % ATTENTION_SIDE != 0 || side == 0 {
        return Err(Error::shape("downsample_mask", format!("square mask divisible by 8 expected, got {:?}", mask.shape())));
    }
    let k = side / ATTENTION_SIDE;
    let d = mask.data();
    Ok(Tensor::from_fn(&[ATTENTION_SIDE, ATTENTION_SIDE], |i| {
        let (r, c) = (i / ATTENTION_SIDE, i % ATTENTION_SIDE);
        let s: f64 = (0..k).flat_map(|y| (0..k).map(move |x| (r * k + y) * side + c * k + x)).map(|j| d[j]).sum();
        if s / (k * k) as f64 >= 0.5 { 1.0 } else { 0.0 }
    }))
}

/// Control strength at training timestep `t`: `t / T`.
pub fn kappa(t: usize) -> f64 {
    t as f64 / TRAIN_STEPS as f64
}

/// `w[(1 − κ)A + κ B ‖A‖_F / ‖B‖_F]` for one `[8, 8]` map.
pub fn modify_attention(a: &Tensor, b: &Tensor, weight: f64, kappa: f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape("modify_attention", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let nb = b.norm();
    if nb == 0.0 {
        return Err(Error::ZeroMaskNorm("attention mask".into()));
    }
    let na = a.norm();
    a.zip_map(b, |av, bv| weight * ((1.0 - kappa) * av + kappa * (bv / nb) * na))
}

/// Base prompt followed by each region label not yet present.
pub fn build_modified_prompt(base: &[usize], regions: &[SemanticRegion]) -> Result<Vec<usize>> {
    let mut out: Vec<usize> = Vec::with_capacity(base.len() + regions.len());
    for &t in base.iter().chain(regions.iter().map(|r| &r.label)) {
        if !out.contains(&t) {
            out.push(t);
        }
    }
    if out.len() > MAX_TOKENS {
        return Err(Error::PromptOverflow { count: out.len(), max: MAX_TOKENS });
    }
    Ok(out)
}

/// Head-averaged conditional attention maps, one entry per denoiser call.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionRecord {
    /// Padded token sequence the maps are indexed by.
    pub tokens: Vec<usize>,
    /// `(timestep, [tokens, 8, 8])`.
    pub steps: Vec<(usize, Tensor)>,
}

/// One token's averaged map scaled to [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMap {
    pub token: usize,
    pub map: Tensor,
}

impl AttentionRecord {
    /// Mean over steps of the raw (unscaled) map of `token`, `[8, 8]`.
    pub fn mean_map(&self, token: usize) -> Option<Tensor> {
        let pos = self.tokens.iter().position(|&t| t == token)?;
        if self.steps.is_empty() {
            return None;
        }
        let mut acc = vec![0.0; CELLS];
        for (_, m) in &self.steps {
            for (a, v) in acc.iter_mut().zip(&m.data()[pos * CELLS..(pos + 1) * CELLS]) {
                *a += v;
            }
        }
        let n = self.steps.len() as f64;
        Tensor::new(&[ATTENTION_SIDE, ATTENTION_SIDE], acc.into_iter().map(|v| v / n).collect()).ok()
    }
}

/// Per prompt token, the step- and head-averaged map divided by its maximum.
pub fn attention_diagnostics(result: &SynthesisResult) -> Result<Vec<TokenMap>> {
    let rec = result.attention.as_ref().ok_or(Error::RecordingAbsent)?;
    let mut out = Vec::new();
    for &token in rec.tokens.iter().filter(|&&t| t != PAD) {
        if out.iter().any(|m: &TokenMap| m.token == token) {
            continue;
        }
        let map = rec.mean_map(token).ok_or(Error::RecordingAbsent)?;
        let max = map.data().iter().cloned().fold(0.0, f64::max);
        let map = if max > 0.0 { map.scale(1.0 / max) } else { map };
        out.push(TokenMap { token, map });
    }
    Ok(out)
}

/// Renders an `[8, 8]` map in [0, 1] as a `[3, 64, 64]` heat image.
pub fn heatmap(map: &Tensor) -> Result<Tensor> {
    if map.shape() != [ATTENTION_SIDE, ATTENTION_SIDE] {
        return Err(Error::shape("heatmap", format!("expected [8, 8], got {:?}", map.shape())));
    }
    let k = IMAGE_SIZE / ATTENTION_SIDE;
    let px = IMAGE_SIZE * IMAGE_SIZE;
    Ok(Tensor::from_fn(&[3, IMAGE_SIZE, IMAGE_SIZE], |i| {
        let (ch, p) = (i / px, i % px);
        let (r, c) = (p / IMAGE_SIZE / k, p % IMAGE_SIZE / k);
        let v = map.data()[r * ATTENTION_SIDE + c].clamp(0.0, 1.0);
        match ch {
            0 => (1.5 * v).min(1.0),
            1 => v * v,
            _ => 0.35 * (1.0 - v) + 0.2 * v * v * v,
        }
    }))
}

/// Intersection over union of a map thresholded at `threshold` and a binary
/// `[8, 8]` mask.
pub fn attention_iou(map: &Tensor, cells: &Tensor, threshold: f64) -> Result<f64> {
    if map.shape() != cells.shape() {
        return Err(Error::shape("attention_iou", format!("{:?} vs {:?}", map.shape(), cells.shape())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&m, &b) in map.data().iter().zip(cells.data()) {
        let (a, b) = (m >= threshold, b > 0.5);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Applies the region edit to every conditional attention call and
/// optionally records the resulting maps.
#[derive(Debug)]
pub struct RegionControl {
    regions: Vec<SemanticRegion>,
    record: Option<AttentionRecord>,
}

impl RegionControl {
    pub fn new(regions: Vec<SemanticRegion>, record: bool) -> Self {
        Self { regions, record: record.then(AttentionRecord::default) }
    }

    pub fn into_record(self) -> Option<AttentionRecord> {
        self.record
    }
}

impl AttentionHook for RegionControl {
    fn on_attention(&mut self, call: &AttentionCall<'_>) -> Result<Option<Vec<Tensor>>> {
        let k = kappa(call.timestep);
        let mut edited: Option<Vec<Tensor>> = None;
        for region in &self.regions {
            let Some(pos) = call.tokens.iter().position(|&t| t == region.label) else { continue };
            let maps = edited.get_or_insert_with(|| call.maps.to_vec());
            for head in maps.iter_mut() {
                let span = pos * CELLS..(pos + 1) * CELLS;
                let a = Tensor::new(&[ATTENTION_SIDE, ATTENTION_SIDE], head.data()[span.clone()].to_vec())?;
                let m = modify_attention(&a, &region.cells, region.weight, k)?;
                head.data_mut()[span].copy_from_slice(m.data());
            }
        }
        if let Some(rec) = &mut self.record {
            if call.tokens.iter().any(|&t| t != PAD) {
                let mean = match &edited {
                    Some(maps) => AttentionCall { maps, ..*call }.head_mean(),
                    None => call.head_mean(),
                };
                rec.tokens = call.tokens.to_vec();
                rec.steps.push((call.timestep, mean));
            }
        }
        Ok(edited)
    }
}

/// Runs `method` with the region edit active at every denoiser pass.
#[allow(clippy::too_many_arguments)]
pub fn controlled_synthesis(
    models: &Models,
    y: &Tensor,
    base: &[usize],
    regions: &[SemanticRegion],
    method: Method,
    cfg: &GuidanceConfig,
    record: bool,
    progress: Option<&(dyn Fn(usize, usize) + Sync)>,
) -> Result<SynthesisResult> {
    if !matches!(method, Method::GradOp | Method::GradOpPlus | Method::SdEdit) {
        return Err(Error::invalid(format!("region control supports gradop, gradop+ and sdedit, not {method}")));
    }
    let tokens = build_modified_prompt(base, regions)?;
    let mut hook = RegionControl::new(regions.to_vec(), record);
    let ctl = Controls { attention: Some(&mut hook), progress };
    let mut result = models.synthesize(method, y, &tokens, cfg, ctl)?;
    result.attention = hook.into_record();
    Ok(result)
}

/// Region entry of a JSON region file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub mask: std::path::PathBuf,
    pub label: String,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

/// Reads a JSON list of `{mask, label, weight}`; mask paths are relative to
/// the file.
pub fn load_regions(path: impl AsRef<std::path::Path>) -> Result<Vec<SemanticRegion>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let specs: Vec<RegionSpec> = serde_json::from_slice(&std::fs::read(path)?)?;
    let dir = path.parent().unwrap_or(std::path::Path::new("."));
    specs
        .into_iter()
        .map(|s| {
            let mask = crate::imageio::load_mask_png(dir.join(&s.mask))?;
            SemanticRegion::new(mask, scenegen::token_id(&s.label)?, s.weight)
        })
        .collect()
}
