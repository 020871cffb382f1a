//! Acceptance runner: one PASS/FAIL line per criterion.
//!
//! Runs the full CLI pipeline in a scratch directory (override with
//! `GLAB_ACCEPTANCE_DIR`), then checks the trained stack. Failing criteria
//! are reported but only fail the process when `GLAB_ACCEPTANCE_STRICT` is
//! set.

mod common;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use glab::eval::MetricReport;
use glab::guidance::{GuidanceConfig, Method, Models};
use glab::nets::{AutoencoderSpec, DenoiserSpec};
use glab::scenegen::{read_dataset, token_id, token_name, Domain, SceneSample};
use glab::semctl::{attention_diagnostics, attention_iou, controlled_synthesis, SemanticRegion};
use serde_json::Value;

use common::{checks, gradcheck, Check};

const BIN: &str = env!("CARGO_BIN_EXE_glab");

struct Criterion {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: Vec<String>,
}

fn report(c: &Criterion) {
    println!("{} [{}] {}", if c.pass { "PASS" } else { "FAIL" }, c.id, c.name);
    for d in &c.detail {
        println!("       {d}");
    }
}

fn from_checks(id: usize, name: &'static str, checks: &[Check], extra: Vec<String>, extra_pass: bool) -> Criterion {
    let mut detail: Vec<String> =
        checks.iter().map(|c| format!("{} {}: {}", if c.pass { "ok  " } else { "FAIL" }, c.name, c.detail)).collect();
    detail.extend(extra);
    Criterion { id, name, pass: extra_pass && checks.iter().all(|c| c.pass), detail }
}

fn glab(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| format!("spawning glab: {e}"))?;
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    if out.status.success() {
        Ok(stdout)
    } else {
        Err(format!("glab {} failed ({}): {}", args.join(" "), out.status, String::from_utf8_lossy(&out.stderr)))
    }
}

/// JSON with wall-clock fields removed.
fn strip_timing(v: &mut Value) {
    match v {
        Value::Object(m) => {
            m.remove("seconds");
            m.values_mut().for_each(strip_timing);
        }
        Value::Array(a) => a.iter_mut().for_each(strip_timing),
        _ => {}
    }
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).expect("under dir").to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// Compares two artifact trees byte for byte, JSON modulo timing fields.
fn same_tree(a: &Path, b: &Path) -> Result<usize, String> {
    let (fa, fb) = (files(a), files(b));
    if fa != fb {
        return Err(format!("{} lists {} files, {} lists {}", a.display(), fa.len(), b.display(), fb.len()));
    }
    for rel in &fa {
        let (x, y) = (std::fs::read(a.join(rel)).map_err(|e| e.to_string())?, std::fs::read(b.join(rel)).map_err(|e| e.to_string())?);
        let equal = if rel.extension().is_some_and(|e| e == "json") {
            let mut vx: Value = serde_json::from_slice(&x).map_err(|e| e.to_string())?;
            let mut vy: Value = serde_json::from_slice(&y).map_err(|e| e.to_string())?;
            strip_timing(&mut vx);
            strip_timing(&mut vy);
            vx == vy
        } else {
            x == y
        };
        if !equal {
            return Err(format!("{} differs", rel.display()));
        }
    }
    Ok(fa.len())
}

struct Pipeline {
    seconds: f64,
    steps: Vec<String>,
}

/// gen-data → train ae → train denoiser → synth → eval in `dir`.
fn pipeline(dir: &Path, full_eval: bool) -> Result<Pipeline, String> {
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let mut steps = Vec::new();
    let mut step = |args: &[&str]| -> Result<(), String> {
        let t = Instant::now();
        let out = glab(dir, args)?;
        let last = out.lines().last().unwrap_or("").to_string();
        steps.push(format!("{:<18} {:>6.0}s  {last}", args[..args.len().min(3)].join(" "), t.elapsed().as_secs_f64()));
        Ok(())
    };
    step(&["gen-data"])?;
    step(&["train", "--stage", "ae"])?;
    step(&["train", "--stage", "denoiser"])?;
    let data = read_dataset(dir.join("data")).map_err(|e| e.to_string())?;
    let sample = data.test.iter().find(|s| s.domain == Domain::Flat).ok_or("no flat test scene")?;
    glab::imageio::save_png(dir.join("painting.png"), &sample.painting).map_err(|e| e.to_string())?;
    let tokens = prompt_names(sample).join(",");
    step(&["synth", "--method", "gradop+", "--painting", "painting.png", "--tokens", &tokens, "--attention"])?;
    if full_eval {
        step(&["eval", "--plot"])?;
    }
    let seconds = start.elapsed().as_secs_f64();
    std::fs::write(dir.join("small.toml"), "[paths]\noutput = \"out_small\"\n").map_err(|e| e.to_string())?;
    glab(dir, &["--config", "small.toml", "eval", "--paintings", "2", "--seeds", "2"])?;
    Ok(Pipeline { seconds, steps })
}

/// "photo" followed by the scene's objects.
fn prompt(sample: &SceneSample) -> Vec<usize> {
    let mut t = vec![Domain::Photo.token()];
    t.extend_from_slice(sample.objects());
    t
}

fn prompt_names(sample: &SceneSample) -> Vec<&'static str> {
    prompt(sample).into_iter().map(|t| token_name(t).expect("vocabulary token")).collect()
}

fn load_report(path: &Path) -> Result<MetricReport, String> {
    let mut v: Value = serde_json::from_slice(&std::fs::read(path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    v.as_object_mut().map(|m| m.remove("provenance"));
    serde_json::from_value(v).map_err(|e| e.to_string())
}

fn trend(report: &MetricReport, plan_points: usize) -> Criterion {
    let mut detail = vec![format!("{} paintings × {} seeds, {plan_points} points", report.paintings, report.seeds.len() / report.paintings.max(1))];
    for p in &report.points {
        detail.push(format!("{:<14} F {:>8.3}  R {:>8.4}", p.label, p.faithfulness, p.realism));
    }
    detail.push(format!("text-only F {:.3}", report.text_only_faithfulness));
    let mut sd: Vec<_> = report.points.iter().filter(|p| p.method == Method::SdEdit).collect();
    sd.sort_by(|a, b| a.t0.total_cmp(&b.t0));
    let a = sd.len() >= 2 && sd.windows(2).all(|w| w[1].faithfulness >= w[0].faithfulness);
    detail.push(format!("(a) SDEdit F non-decreasing in t0: {a}"));

    let m0 = report.points.iter().find(|p| p.method == Method::GradOp && p.steps == 0);
    let m40 = report.points.iter().find(|p| p.method == Method::GradOp && p.steps == 40);
    let b = match (m0, m40) {
        (Some(x), Some(y)) => {
            detail.push(format!("(b) GradOP F: M=0 {:.3} -> M=40 {:.3}", x.faithfulness, y.faithfulness));
            y.faithfulness < x.faithfulness
        }
        _ => {
            detail.push("(b) GradOP M=0 / M=40 points missing".into());
            false
        }
    };

    let plus = report.points.iter().find(|p| p.method == Method::GradOpPlus);
    let c = match plus {
        Some(g) if !sd.is_empty() => {
            let near = sd
                .iter()
                .min_by(|x, y| (x.faithfulness - g.faithfulness).abs().total_cmp(&(y.faithfulness - g.faithfulness).abs()))
                .expect("non-empty sweep");
            let dominated: Vec<&str> =
                sd.iter().filter(|s| g.faithfulness < s.faithfulness && g.realism < s.realism).map(|s| s.label.as_str()).collect();
            detail.push(format!(
                "(c) GradOP+ R {:.4} vs {} R {:.4} (nearest F); strictly dominates {:?}",
                g.realism, near.label, near.realism, dominated
            ));
            g.realism < near.realism
        }
        _ => {
            detail.push("(c) GradOP+ or SDEdit points missing".into());
            false
        }
    };
    Criterion { id: 6, name: "trend reproduction", pass: a && b && c, detail }
}

fn binomial_tail(n: usize, k: usize) -> f64 {
    // P(X ≥ k), X ~ Bin(n, 1/2)
    let mut c = 1.0f64;
    let mut total = 0.0;
    for i in 0..=n {
        if i > 0 {
            c = c * (n - i + 1) as f64 / i as f64;
        }
        if i >= k {
            total += c;
        }
    }
    total / 2f64.powi(n as i32)
}

fn semantic_control(models: &Models, test: &[SceneSample], extra: &[SceneSample]) -> Result<Criterion, String> {
    let mut detail = Vec::new();
    let mut pass = true;
    for name in ["river", "hut", "sun"] {
        let token = token_id(name).map_err(|e| e.to_string())?;
        // regions too small to survive at attention resolution cannot be controlled
        let scenes: Vec<(&SceneSample, SemanticRegion)> = test
            .iter()
            .chain(extra)
            .filter_map(|s| Some((s, SemanticRegion::new(s.mask_of(token)?.clone(), token, 1.0).ok()?)))
            .take(16)
            .collect();
        if scenes.len() < 16 {
            return Err(format!("only {} held-out scenes contain a visible {name}", scenes.len()));
        }
        let (mut ctl, mut unc, mut inside) = (Vec::new(), Vec::new(), 0usize);
        for (i, (s, region)) in scenes.iter().enumerate() {
            let cfg = GuidanceConfig { seed: i as u64, ..GuidanceConfig::default() };
            let base = prompt(s);
            let iou = |regions: &[SemanticRegion]| -> Result<(f64, bool), String> {
                let r = controlled_synthesis(models, &s.painting, &base, regions, Method::GradOpPlus, &cfg, true, None)
                    .map_err(|e| e.to_string())?;
                let maps = attention_diagnostics(&r).map_err(|e| e.to_string())?;
                let map = &maps.iter().find(|m| m.token == token).ok_or("token map missing")?.map;
                let argmax = map.data().iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map_or(0, |(k, _)| k);
                Ok((attention_iou(map, region.cells(), 0.5).map_err(|e| e.to_string())?, region.cells().data()[argmax] > 0.5))
            };
            let (c, hit) = iou(std::slice::from_ref(region))?;
            ctl.push(c);
            inside += hit as usize;
            unc.push(iou(&[])?.0);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let up = ctl.iter().zip(&unc).filter(|(c, u)| c > u).count();
        let down = ctl.iter().zip(&unc).filter(|(c, u)| c < u).count();
        let p = binomial_tail(up + down, up);
        let ok = mean(&ctl) > mean(&unc) && p < 0.05;
        pass &= ok;
        detail.push(format!(
            "{} {name:<6} IoU controlled {:.3} vs uncontrolled {:.3}; sign test {up}+/{down}- p {p:.2e}; argmax in region {inside}/16",
            if ok { "ok  " } else { "FAIL" },
            mean(&ctl),
            mean(&unc)
        ));
    }
    Ok(Criterion { id: 7, name: "semantic control", pass, detail })
}

fn main() {
    let strict = std::env::var_os("GLAB_ACCEPTANCE_STRICT").is_some();
    let root = std::env::var_os("GLAB_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance"));
    let _ = std::fs::remove_dir_all(&root);
    let (run_a, run_b) = (root.join("a"), root.join("b"));
    println!("acceptance: working in {}", root.display());
    let mut results: Vec<Criterion> = Vec::new();
    let push = |c: Criterion, results: &mut Vec<Criterion>| {
        report(&c);
        results.push(c);
    };

    let t = Instant::now();
    let outcomes = gradcheck::suite(100, 2024);
    let secs = t.elapsed().as_secs_f64();
    let mut c = Criterion {
        id: 1,
        name: "autodiff gradient checks",
        pass: outcomes.iter().all(|o| o.pass()) && secs < 120.0,
        detail: outcomes
            .iter()
            .map(|o| format!("{} {:<17} worst rel err {:.2e} (< {:.0e}, {} cases)", if o.pass() { "ok  " } else { "FAIL" }, o.name, o.worst, o.tolerance, o.cases))
            .collect(),
    };
    c.detail.push(format!("runtime {secs:.1}s (< 120s)"));
    push(c, &mut results);

    let t = Instant::now();
    let eq = checks::attention_edit_suite(1000);
    let secs = t.elapsed().as_secs_f64();
    push(from_checks(4, "attention edit suite", &eq, vec![format!("runtime {secs:.2}s")], true), &mut results);

    let t = Instant::now();
    let fid = checks::fid_oracle();
    let secs = t.elapsed().as_secs_f64();
    push(from_checks(5, "FID oracle", &fid, vec![format!("runtime {secs:.2}s")], true), &mut results);

    let a = pipeline(&run_a, true);
    let models = a.as_ref().ok().and_then(|_| {
        Models::load(
            run_a.join("checkpoints/autoencoder.bin"),
            run_a.join("checkpoints/denoiser.bin"),
            AutoencoderSpec::default(),
            DenoiserSpec::default(),
        )
        .ok()
    });
    let models = match models {
        Some(m) => m,
        None => {
            let why = a.err().unwrap_or_else(|| "checkpoints unreadable".into());
            for (id, name) in [(2, "diffusion identities"), (3, "algorithm invariants"), (6, "trend reproduction"), (7, "semantic control"), (8, "end-to-end smoke")] {
                push(Criterion { id, name, pass: false, detail: vec![why.clone()] }, &mut results);
            }
            finish(results, strict);
            return;
        }
    };
    let a = a.expect("checked above");

    let t = Instant::now();
    let di = checks::diffusion_identities(&models);
    let secs = t.elapsed().as_secs_f64();
    push(from_checks(2, "diffusion identities", &di, vec![format!("runtime {secs:.1}s (< 300s)")], secs < 300.0), &mut results);

    let inv = checks::algorithm_invariants(&models);
    push(from_checks(3, "algorithm-structure invariants", &inv, Vec::new(), true), &mut results);

    match load_report(&run_a.join("out/report.json")) {
        Ok(r) => {
            let mut c = trend(&r, r.points.len());
            let eval_secs = a.steps.iter().find(|s| s.starts_with("eval")).cloned().unwrap_or_default();
            c.detail.push(format!("eval step: {eval_secs}"));
            push(c, &mut results);
        }
        Err(e) => push(Criterion { id: 6, name: "trend reproduction", pass: false, detail: vec![e] }, &mut results),
    }

    let data = read_dataset(run_a.join("data"));
    let sem = data
        .map_err(|e| e.to_string())
        .and_then(|d| semantic_control(&models, &d.test, &d.val));
    match sem {
        Ok(c) => push(c, &mut results),
        Err(e) => push(Criterion { id: 7, name: "semantic control", pass: false, detail: vec![e] }, &mut results),
    }

    let mut detail = a.steps.clone();
    detail.push(format!("pipeline wall time {:.0}s (< 1800s)", a.seconds));
    let mut pass = a.seconds < 1800.0;
    match pipeline(&run_b, false) {
        Ok(_) => {
            for sub in ["data", "checkpoints", "out_small"] {
                match same_tree(&run_a.join(sub), &run_b.join(sub)) {
                    Ok(n) => detail.push(format!("ok   {sub}/: {n} files identical across runs")),
                    Err(e) => {
                        pass = false;
                        detail.push(format!("FAIL {sub}/: {e}"));
                    }
                }
            }
            for f in ["synth.png", "synth.json"] {
                let r = same_file(&run_a.join("out").join(f), &run_b.join("out").join(f));
                pass &= r;
                detail.push(format!("{} out/{f} identical across runs", if r { "ok  " } else { "FAIL" }));
            }
        }
        Err(e) => {
            pass = false;
            detail.push(format!("second run failed: {e}"));
        }
    }
    push(Criterion { id: 8, name: "end-to-end smoke and determinism", pass, detail }, &mut results);
    finish(results, strict);
}

fn same_file(a: &Path, b: &Path) -> bool {
    let dir = |p: &Path| p.parent().map(Path::to_path_buf).unwrap_or_default();
    let name = a.file_name().expect("file");
    let (ta, tb) = (tempfile::tempdir().expect("tempdir"), tempfile::tempdir().expect("tempdir"));
    let ok = std::fs::copy(dir(a).join(name), ta.path().join(name)).is_ok() && std::fs::copy(dir(b).join(name), tb.path().join(name)).is_ok();
    ok && same_tree(ta.path(), tb.path()).is_ok()
}

fn finish(mut results: Vec<Criterion>, strict: bool) {
    results.sort_by_key(|c| c.id);
    println!();
    println!("acceptance summary");
    for c in &results {
        println!("{} [{}] {}", if c.pass { "PASS" } else { "FAIL" }, c.id, c.name);
    }
    let passed = results.iter().filter(|c| c.pass).count();
    println!("{passed}/{} criteria passed", results.len());
    if strict && passed < results.len() {
        std::process::exit(1);
    }
}
