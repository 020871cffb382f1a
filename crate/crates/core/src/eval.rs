//! Faithfulness and realism metrics and the method comparison harness.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::guidance::{Controls, GuidanceConfig, Method, Models};
use crate::nets::{Bound, ParamSet};
use crate::painting::paint_sdedit;
use crate::scenegen::{self, mix_seed, Domain, SceneSample};
use crate::tensor::{Tape, Tensor};

pub const FEATURE_DIM: usize = 64;
/// Side of the random crop used by the realism augmentation.
pub const CROP_SIDE: usize = 56;
const CHANNELS: [usize; 5] = [3, 16, 32, 64, FEATURE_DIM];

/// Frozen random strided conv net mapping an image to a 64-d feature.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    params: ParamSet,
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        for (i, w) in CHANNELS.windows(2).enumerate() {
            let fan_in = w[0] * 9;
            let t = Tensor::randn(&[w[1], w[0], 3, 3], &mut rng).scale((2.0 / fan_in as f64).sqrt());
            params.push(format!("f{i}.w"), t);
            params.push(format!("f{i}.b"), Tensor::zeros(&[w[1]]));
        }
        Self { params }
    }

    /// `[3, H, W]` to `[64]`: four stride-2 conv+ReLU layers, then a global
    /// spatial mean.
    pub fn features(&self, image: &Tensor) -> Result<Vec<f64>> {
        if image.rank() != 3 || image.shape()[0] != 3 {
            return Err(Error::shape("features", format!("expected [3, H, W], got {:?}", image.shape())));
        }
        let mut tape = Tape::new();
        let b: Bound = self.params.bind(&mut tape, false);
        let mut h = tape.constant(image.clone().unsqueeze_batch());
        for i in 0..CHANNELS.len() - 1 {
            h = tape.conv2d(h, b.var(&format!("f{i}.w")), Some(b.var(&format!("f{i}.b"))), 2, 1, 1)?;
            h = tape.relu(h)?;
        }
        let v = tape.value(h);
        let plane = v.shape()[2] * v.shape()[3];
        Ok(v.data().chunks(plane).map(|c| c.iter().sum::<f64>() / plane as f64).collect())
    }
}

/// Root-mean-square distance between `paint_sdedit(x)` and `y`, in 0–255
/// units.
pub fn faithfulness(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::shape("faithfulness", format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    let p = paint_sdedit(x)?;
    let ms = p.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64;
    Ok(255.0 * ms.sqrt())
}

fn moments(rows: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if n < 2 {
        return Err(Error::invalid(format!("fid needs at least 2 samples per side, got {n}")));
    }
    if rows.iter().any(|r| r.len() != d) || d == 0 {
        return Err(Error::invalid("fid feature rows must share a nonzero length"));
    }
    let m = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mu = DVector::from_fn(d, |j, _| m.column(j).mean());
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mu[j]);
    let mut cov = centered.transpose() * &centered / (n - 1) as f64;
    if n < d + 1 {
        log::warn!("fid: {n} samples for {d} dims, adding 1e-6 ridge");
        for i in 0..d {
            cov[(i, i)] += 1e-6;
        }
    }
    Ok((mu, cov))
}

/// Eigenvalues of a symmetric matrix, checking that none is meaningfully
/// negative; small negatives become 0.
fn psd_eigen(m: DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let m = (&m + m.transpose()) * 0.5;
    let eig = m.symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(1.0);
    if let Some(bad) = eig.eigenvalues.iter().find(|&&v| v < -1e-8 * scale) {
        return Err(Error::invalid(format!("covariance product has negative eigenvalue {bad:e}")));
    }
    Ok((eig.eigenvalues.map(|v| v.max(0.0)), eig.eigenvectors))
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, cov_a) = moments(a)?;
    let (mu_b, cov_b) = moments(b)?;
    if mu_a.len() != mu_b.len() {
        return Err(Error::invalid(format!("feature dims differ: {} vs {}", mu_a.len(), mu_b.len())));
    }
    let (vals, vecs) = psd_eigen(cov_a.clone())?;
    let root_a = &vecs * DMatrix::from_diagonal(&vals.map(f64::sqrt)) * vecs.transpose();
    let (inner, _) = psd_eigen(&root_a * &cov_b * &root_a)?;
    let cross: f64 = inner.iter().map(|v| v.sqrt()).sum();
    let d = (&mu_a - &mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Random horizontal flip, then a random `56 × 56` crop.
pub fn augment<R: Rng + ?Sized>(x: &Tensor, rng: &mut R) -> Result<Tensor> {
    let &[c, h, w] = x.shape() else {
        return Err(Error::shape("augment", format!("expected [3, H, W], got {:?}", x.shape())));
    };
    if h < CROP_SIDE || w < CROP_SIDE {
        return Err(Error::shape("augment", format!("image smaller than the {CROP_SIDE}-pixel crop")));
    }
    let flip = rng.random_bool(0.5);
    let (r0, c0) = (rng.random_range(0..=h - CROP_SIDE), rng.random_range(0..=w - CROP_SIDE));
    let d = x.data();
    Ok(Tensor::from_fn(&[c, CROP_SIDE, CROP_SIDE], |i| {
        let (ch, r, col) = (i / (CROP_SIDE * CROP_SIDE), i / CROP_SIDE % CROP_SIDE, i % CROP_SIDE);
        let col = c0 + col;
        let col = if flip { w - 1 - col } else { col };
        d[(ch * h + r0 + r) * w + col]
    }))
}

/// Features of `images`, each augmented by its own stream derived from
/// `seed` and its index when `augment_seed` is set.
pub fn feature_set(fx: &FeatureExtractor, images: &[Tensor], augment_seed: Option<u64>) -> Result<Vec<Vec<f64>>> {
    images
        .par_iter()
        .enumerate()
        .map(|(i, x)| match augment_seed {
            Some(s) => fx.features(&augment(x, &mut ChaCha8Rng::seed_from_u64(mix_seed(s, i as u64)))?),
            None => fx.features(x),
        })
        .collect()
}

/// FID between guided outputs and prompt-only outputs.
pub fn realism(fx: &FeatureExtractor, outputs: &[Tensor], text_only: &[Tensor], augment_seed: Option<u64>) -> Result<f64> {
    if outputs.is_empty() || text_only.is_empty() {
        return Err(Error::invalid("realism needs nonempty sample sets"));
    }
    let a = feature_set(fx, outputs, augment_seed)?;
    let b = feature_set(fx, text_only, augment_seed.map(|s| s ^ 0x5eed))?;
    fid(&a, &b)
}

/// What to run in a comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkPlan {
    pub paintings: usize,
    pub seeds: usize,
    pub sdedit_levels: Vec<f64>,
    /// GradOP runs, one per step count M.
    pub gradop_steps: Vec<usize>,
    /// M used by GradOP+ at each in-window step.
    pub gradop_plus_steps: usize,
    pub loopback: bool,
    pub ilvr: bool,
    pub root_seed: u64,
    pub feature_seed: u64,
    pub augment_seed: u64,
    pub guidance: GuidanceConfig,
}

impl Default for BenchmarkPlan {
    fn default() -> Self {
        Self {
            paintings: 16,
            seeds: 32,
            sdedit_levels: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            gradop_steps: vec![0, 40],
            gradop_plus_steps: 10,
            loopback: true,
            ilvr: true,
            root_seed: 0,
            feature_seed: 7,
            augment_seed: 11,
            guidance: GuidanceConfig::default(),
        }
    }
}

impl BenchmarkPlan {
    pub fn validate(&self) -> Result<()> {
        self.guidance.validate()?;
        if self.paintings == 0 || self.seeds == 0 || self.paintings * self.seeds < 2 {
            return Err(Error::Config("benchmark needs at least 2 runs per method".into()));
        }
        if let Some(l) = self.sdedit_levels.iter().find(|&&l| !(l > 0.0 && l <= 1.0)) {
            return Err(Error::Config(format!("sdedit level {l} outside (0, 1]")));
        }
        Ok(())
    }

    /// Hex SHA-256 of the plan's JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("plan serializes")))
    }

    fn variants(&self) -> Vec<Variant> {
        let g = &self.guidance;
        let mut v = Vec::new();
        for &t0 in &self.sdedit_levels {
            v.push(Variant { label: format!("sdedit@{t0}"), method: Method::SdEdit, cfg: GuidanceConfig { t0, ..g.clone() } });
        }
        for &m in &self.gradop_steps {
            v.push(Variant { label: format!("gradop@M{m}"), method: Method::GradOp, cfg: GuidanceConfig { steps: m, ..g.clone() } });
        }
        v.push(Variant {
            label: format!("gradop+@M{}", self.gradop_plus_steps),
            method: Method::GradOpPlus,
            cfg: GuidanceConfig { steps: self.gradop_plus_steps, ..g.clone() },
        });
        if self.loopback {
            v.push(Variant { label: "loopback".into(), method: Method::Loopback, cfg: g.clone() });
        }
        if self.ilvr {
            v.push(Variant { label: "ilvr".into(), method: Method::Ilvr, cfg: g.clone() });
        }
        v
    }
}

struct Variant {
    label: String,
    method: Method,
    cfg: GuidanceConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub label: String,
    pub method: Method,
    pub t0: f64,
    pub steps: usize,
    /// Mean faithfulness over all paintings and seeds.
    pub faithfulness: f64,
    /// Realism distance of the pooled outputs to the prompt-only pool.
    pub realism: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub points: Vec<MetricPoint>,
    /// Mean faithfulness of the prompt-only samples to the same paintings.
    pub text_only_faithfulness: f64,
    pub paintings: usize,
    pub seeds: Vec<u64>,
    pub plan_hash: String,
    pub models: String,
}

impl MetricReport {
    pub fn point(&self, label: &str) -> Option<&MetricPoint> {
        self.points.iter().find(|p| p.label == label)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["label", "method", "t0", "steps", "faithfulness", "realism", "samples"])
            .map_err(|e| Error::invalid(e.to_string()))?;
        for p in &self.points {
            w.write_record([
                p.label.clone(),
                p.method.to_string(),
                p.t0.to_string(),
                p.steps.to_string(),
                format!("{:.6}", p.faithfulness),
                format!("{:.6}", p.realism),
                p.samples.to_string(),
            ])
            .map_err(|e| Error::invalid(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    /// Faithfulness (x) against realism (y) scatter; the SDEdit sweep is
    /// joined by a line.
    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (640.0, 480.0, 60.0);
        let fmax = self.points.iter().map(|p| p.faithfulness).fold(1.0, f64::max) * 1.1;
        let rmax = self.points.iter().map(|p| p.realism).fold(1e-9, f64::max) * 1.1;
        let px = |f: f64| pad + f / fmax * (w - 2.0 * pad);
        let py = |r: f64| h - pad - r / rmax * (h - 2.0 * pad);
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
             <line x1=\"{pad}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n\
             <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{0}\" stroke=\"black\"/>\n\
             <text x=\"{2}\" y=\"{3}\" text-anchor=\"middle\">faithfulness F (lower is closer to the painting)</text>\n\
             <text x=\"15\" y=\"{4}\" transform=\"rotate(-90 15 {4})\" text-anchor=\"middle\">realism R (lower is more realistic)</text>\n",
            h - pad,
            w - pad,
            w / 2.0,
            h - 20.0,
            h / 2.0
        );
        let sweep: Vec<String> = self
            .points
            .iter()
            .filter(|p| p.method == Method::SdEdit)
            .map(|p| format!("{:.1},{:.1}", px(p.faithfulness), py(p.realism)))
            .collect();
        if sweep.len() > 1 {
            s += &format!("<polyline points=\"{}\" fill=\"none\" stroke=\"#888\"/>\n", sweep.join(" "));
        }
        for p in &self.points {
            let color = match p.method {
                Method::SdEdit => "#1f77b4",
                Method::GradOp => "#2ca02c",
                Method::GradOpPlus => "#d62728",
                Method::Loopback => "#9467bd",
                Method::Ilvr => "#8c564b",
                Method::TextOnly => "#7f7f7f",
            };
            let (x, y) = (px(p.faithfulness), py(p.realism));
            s += &format!(
                "<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"4\" fill=\"{color}\"/><text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
                x + 6.0,
                y - 6.0,
                p.label
            );
        }
        s + "</svg>\n"
    }
}

/// The flat-domain test paintings a benchmark runs on, and their prompts
/// with the domain token switched to "photo".
pub fn benchmark_inputs(test: &[SceneSample], count: usize) -> Result<Vec<(Tensor, Vec<usize>)>> {
    let picked: Vec<(Tensor, Vec<usize>)> = test
        .iter()
        .filter(|s| s.domain == Domain::Flat)
        .take(count)
        .map(|s| {
            let mut tokens = vec![Domain::Photo.token()];
            tokens.extend_from_slice(s.objects());
            (s.painting.clone(), tokens)
        })
        .collect();
    if picked.len() < count {
        return Err(Error::invalid(format!("test split has {} flat paintings, need {count}", picked.len())));
    }
    Ok(picked)
}

pub fn run_seed(root: u64, painting: usize, seed: usize) -> u64 {
    mix_seed(root, (painting as u64) << 32 | seed as u64)
}

/// Runs every method variant on every painting and seed, then scores them.
pub fn run_benchmark(
    models: &Models,
    inputs: &[(Tensor, Vec<usize>)],
    plan: &BenchmarkPlan,
    progress: Option<&(dyn Fn(&str, usize, usize) + Sync)>,
) -> Result<MetricReport> {
    plan.validate()?;
    if inputs.len() < plan.paintings {
        return Err(Error::invalid(format!("{} paintings given, plan needs {}", inputs.len(), plan.paintings)));
    }
    let inputs = &inputs[..plan.paintings];
    let jobs: Vec<(usize, usize, u64)> = (0..plan.paintings)
        .flat_map(|p| (0..plan.seeds).map(move |s| (p, s, run_seed(plan.root_seed, p, s))))
        .collect();
    let fx = FeatureExtractor::new(plan.feature_seed);
    let run = |label: &str, method: Method, cfg: &GuidanceConfig| -> Result<Vec<Tensor>> {
        let done = std::sync::atomic::AtomicUsize::new(0);
        jobs.par_iter()
            .map(|&(p, _, seed)| {
                let (y, tokens) = &inputs[p];
                let cfg = GuidanceConfig { seed, ..cfg.clone() };
                let out = models.synthesize(method, y, tokens, &cfg, Controls::default())?.image;
                let n = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
                if let Some(cb) = progress {
                    cb(label, n, jobs.len());
                }
                Ok(out)
            })
            .collect()
    };
    let mean_f = |outs: &[Tensor]| -> Result<f64> {
        let fs: Vec<f64> =
            outs.par_iter().zip(&jobs).map(|(x, &(p, _, _))| faithfulness(x, &inputs[p].0)).collect::<Result<_>>()?;
        Ok(fs.iter().sum::<f64>() / fs.len() as f64)
    };
    let text = run("text", Method::TextOnly, &plan.guidance)?;
    let text_only_faithfulness = mean_f(&text)?;
    let text_features = feature_set(&fx, &text, Some(plan.augment_seed ^ 0x5eed))?;
    let mut points = Vec::new();
    for v in plan.variants() {
        let outs = run(&v.label, v.method, &v.cfg)?;
        let feats = feature_set(&fx, &outs, Some(plan.augment_seed))?;
        points.push(MetricPoint {
            label: v.label,
            method: v.method,
            t0: v.cfg.t0,
            steps: v.cfg.steps,
            faithfulness: mean_f(&outs)?,
            realism: fid(&feats, &text_features)?,
            samples: outs.len(),
        });
    }
    Ok(MetricReport {
        points,
        text_only_faithfulness,
        paintings: plan.paintings,
        seeds: jobs.iter().map(|j| j.2).collect(),
        plan_hash: plan.hash(),
        models: format!("{}:{}", models.ae.digest(), models.denoiser.digest()),
    })
}

/// Photo-versus-flat domain gap check used to validate the extractor:
/// `(R between domains, split-half R within photo)`.
pub fn domain_gap(fx: &FeatureExtractor, photo: &[Tensor], flat: &[Tensor]) -> Result<(f64, f64)> {
    let half = photo.len() / 2;
    let cross = realism(fx, flat, photo, None)?;
    let within = realism(fx, &photo[..half], &photo[half..], None)?;
    Ok((cross, within))
}

/// Scenes rendered in `domain` for each sample's object set.
pub fn rerender(samples: &[SceneSample], domain: Domain) -> Result<Vec<SceneSample>> {
    samples.par_iter().map(|s| scenegen::generate_scene(s.seed, domain, s.objects())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_rows(n: usize, d: usize, mean: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| { let v: f64 = StandardNormal.sample(&mut rng); mean + v }).collect()).collect()
    }

    #[test]
    fn faithfulness_extremes() {
        let black = Tensor::zeros(&[3, 64, 64]);
        let white = Tensor::ones(&[3, 64, 64]);
        assert!((faithfulness(&black, &white).unwrap() - 255.0).abs() < 1e-9);
        let x = Tensor::from_fn(&[3, 64, 64], |i| ((i * 37) % 101) as f64 / 100.0);
        assert_eq!(faithfulness(&x, &paint_sdedit(&x).unwrap()).unwrap(), 0.0);
        assert!(faithfulness(&x, &Tensor::zeros(&[3, 8, 8])).is_err());
    }

    #[test]
    fn fid_identical_and_symmetric() {
        let a = gaussian_rows(200, 4, 0.0, 1);
        let b = gaussian_rows(150, 4, 0.5, 2);
        assert!(fid(&a, &a).unwrap() < 1e-6);
        assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() < 1e-9);
        assert!(fid(&a[..1], &b).is_err());
    }

    #[test]
    fn fid_ridge_when_underdetermined() {
        let a = gaussian_rows(3, 8, 0.0, 3);
        let b = gaussian_rows(3, 8, 1.0, 4);
        assert!(fid(&a, &b).unwrap().is_finite());
    }

    #[test]
    fn augmentation_shape_and_determinism() {
        let x = Tensor::from_fn(&[3, 64, 64], |i| i as f64);
        let a = augment(&x, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.shape(), [3, CROP_SIDE, CROP_SIDE]);
        assert_eq!(a, augment(&x, &mut ChaCha8Rng::seed_from_u64(5)).unwrap());
    }

    #[test]
    fn extractor_is_deterministic() {
        let x = Tensor::from_fn(&[3, 64, 64], |i| (i as f64 * 0.01).sin().abs());
        let f = FeatureExtractor::new(3).features(&x).unwrap();
        assert_eq!(f.len(), FEATURE_DIM);
        assert_eq!(f, FeatureExtractor::new(3).features(&x).unwrap());
        assert_eq!(FeatureExtractor::new(3).features(&augment(&x, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()).unwrap().len(), 64);
    }

    #[test]
    fn realism_zero_without_augmentation() {
        let fx = FeatureExtractor::new(0);
        let xs: Vec<Tensor> = (0..6).map(|k| Tensor::from_fn(&[3, 64, 64], |i| ((i + k * 13) % 17) as f64 / 17.0)).collect();
        assert!(realism(&fx, &xs, &xs, None).unwrap() < 1e-6);
    }

    #[test]
    fn plan_hash_tracks_content() {
        let a = BenchmarkPlan::default();
        let b = BenchmarkPlan { seeds: 3, ..BenchmarkPlan::default() };
        assert_eq!(a.hash(), BenchmarkPlan::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert!(BenchmarkPlan { sdedit_levels: vec![0.0], ..a }.validate().is_err());
    }
}
