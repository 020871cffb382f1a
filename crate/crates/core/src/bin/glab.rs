use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use glab::config::{Provenance, RunConfig, Stage};
use glab::diffusion::NoiseSchedule;
use glab::eval::{self, benchmark_inputs};
use glab::guidance::{Controls, GuidePainting, Method};
use glab::imageio::{load_png, save_png};
use glab::nets::{self, Autoencoder};
use glab::scenegen::{self, make_dataset, read_dataset, write_dataset};
use glab::semctl;
use glab::service::{self, AppState};
use glab::Error;

/// Painting-guided image synthesis on a toy latent diffusion stack.
#[derive(Parser, Debug)]
#[command(name = "glab", version = glab::config::GIT_DESCRIBE)]
struct Cli {
    /// Run config (TOML). Unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic two-domain scene dataset.
    GenData {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the autoencoder or the denoiser.
    Train {
        #[arg(long, value_enum)]
        stage: TrainStage,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Synthesize one image from a painting and a prompt.
    Synth {
        #[arg(long)]
        method: Method,
        /// Reference painting, 64×64 PNG.
        #[arg(long)]
        painting: PathBuf,
        /// Comma-separated prompt tokens, e.g. photo,sky,ground.
        #[arg(long, value_delimiter = ',')]
        tokens: Vec<String>,
        /// JSON list of {mask, label, weight}; mask paths relative to the file.
        #[arg(long)]
        regions: Option<PathBuf>,
        /// Record and export averaged cross-attention maps.
        #[arg(long)]
        attention: bool,
        /// Output file stem inside the output directory.
        #[arg(long, default_value = "synth")]
        name: String,
        #[command(flatten)]
        guidance: GuidanceArgs,
    },
    /// Run the method comparison and write report.json / report.csv.
    Eval {
        /// Also write the faithfulness-realism tradeoff plot (SVG).
        #[arg(long)]
        plot: bool,
        #[arg(long)]
        paintings: Option<usize>,
        #[arg(long)]
        seeds: Option<usize>,
        #[command(flatten)]
        guidance: GuidanceArgs,
    },
    /// Serve the HTTP job API.
    Serve {
        #[arg(long, default_value_t = service::DEFAULT_PORT)]
        port: u16,
        /// Static UI bundle to serve at /.
        #[arg(long)]
        ui_dir: Option<PathBuf>,
        /// Synthesis worker threads (default: cores, at most 4).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Print the effective run config as TOML.
    ShowConfig,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TrainStage {
    Ae,
    Denoiser,
}

/// Overrides for the guidance section of the run config.
#[derive(Args, Debug, Default)]
struct GuidanceArgs {
    /// Weight γ of the anchor term γ‖z − z_anchor‖₂ in the latent objective.
    #[arg(long)]
    gamma: Option<f64>,
    /// Adam step size λ of the latent optimization.
    #[arg(long)]
    lr: Option<f64>,
    /// Gradient steps M per latent optimization (GradOP once, GradOP+ at
    /// every in-window step).
    #[arg(long = "m", alias = "steps")]
    steps: Option<usize>,
    /// Starting noise level t0 in (0, 1] for sdedit, loopback and gradop.
    #[arg(long)]
    t0: Option<f64>,
    /// Upper noise level of the gradop+ optimization window.
    #[arg(long)]
    t_start: Option<f64>,
    /// Lower noise level of the gradop+ optimization window.
    #[arg(long)]
    t_end: Option<f64>,
    /// Classifier-free guidance scale α.
    #[arg(long)]
    cfg_scale: Option<f64>,
    /// Loopback iterations N_iter.
    #[arg(long)]
    loopback_iters: Option<usize>,
    /// Loopback noise growth k in t0 ← min(t0·k, 1).
    #[arg(long)]
    loopback_k: Option<f64>,
    /// ILVR low-pass factor N (must divide 64).
    #[arg(long)]
    ilvr_factor: Option<usize>,
    /// Differentiable painting function used in the latent objective.
    #[arg(long, value_enum)]
    painting_fn: Option<PaintingArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PaintingArg {
    Gaussian,
    Quantize,
}

impl GuidanceArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let g = &mut cfg.guidance;
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { g.$f = v; })* };
        }
        set!(gamma, lr, steps, t0, t_start, t_end, cfg_scale, loopback_iters, loopback_k, ilvr_factor);
        if let Some(p) = self.painting_fn {
            g.painting = match p {
                PaintingArg::Gaussian => GuidePainting::Gaussian,
                PaintingArg::Quantize => GuidePainting::Quantize,
            };
        }
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn gen_data(cfg: &RunConfig, n: Option<usize>, out: Option<PathBuf>) -> anyhow::Result<()> {
    let n = n.unwrap_or(cfg.data.n);
    let dir = out.unwrap_or_else(|| cfg.paths.dataset.clone());
    let seed = cfg.stage_seed(Stage::Data);
    let t = Instant::now();
    let data = make_dataset(n, (cfg.data.train, cfg.data.val, cfg.data.test), seed)?;
    write_dataset(&dir, &data)?;
    write_json(
        &dir.join("dataset.json"),
        &json!({
            "n": n,
            "train": data.train.len(),
            "val": data.val.len(),
            "test": data.test.len(),
            "provenance": Provenance::new(cfg, seed),
        }),
    )?;
    println!("wrote {} scenes to {} in {:.1}s", data.len(), dir.display(), t.elapsed().as_secs_f64());
    Ok(())
}

fn train(cfg: &RunConfig, stage: TrainStage, epochs: Option<usize>) -> anyhow::Result<()> {
    let data = read_dataset(&cfg.paths.dataset)?;
    std::fs::create_dir_all(&cfg.paths.checkpoints)?;
    match stage {
        TrainStage::Ae => {
            let seed = cfg.stage_seed(Stage::Autoencoder);
            let mut tc = cfg.train_autoencoder.train_config(seed);
            tc.epochs = epochs.unwrap_or(tc.epochs);
            let (ae, report) = nets::train_autoencoder(&data.train, cfg.autoencoder, &tc)?;
            let val = ae.reconstruction_mse(data.val.iter().map(|s| &s.image))?;
            ae.save(cfg.ae_path())?;
            write_json(
                &cfg.paths.checkpoints.join("autoencoder.json"),
                &json!({
                    "epoch_losses": report.epoch_losses,
                    "seconds": report.seconds,
                    "val_mse": val,
                    "latent_scale": ae.latent_scale(),
                    "digest": ae.digest(),
                    "provenance": Provenance::new(cfg, seed),
                }),
            )?;
            println!("autoencoder: val mse {val:.5}, {:.0}s -> {}", report.seconds, cfg.ae_path().display());
        }
        TrainStage::Denoiser => {
            let ae = Autoencoder::load(cfg.autoencoder, cfg.ae_path())?;
            let seed = cfg.stage_seed(Stage::Denoiser);
            let mut tc = cfg.train_denoiser.train_config(seed);
            tc.epochs = epochs.unwrap_or(tc.epochs);
            let schedule = NoiseSchedule::default();
            let init = nets::Denoiser::new(cfg.denoiser, seed);
            let init_loss = nets::denoiser_loss(&init, &ae, &schedule, &data.val, seed)?;
            let (dn, report) = nets::train_denoiser(&data.train, &ae, &schedule, cfg.denoiser, &tc)?;
            let val = nets::denoiser_loss(&dn, &ae, &schedule, &data.val, seed)?;
            dn.save(cfg.denoiser_path())?;
            write_json(
                &cfg.paths.checkpoints.join("denoiser.json"),
                &json!({
                    "epoch_losses": report.epoch_losses,
                    "seconds": report.seconds,
                    "val_loss": val,
                    "init_val_loss": init_loss,
                    "digest": dn.digest(),
                    "provenance": Provenance::new(cfg, seed),
                }),
            )?;
            println!("denoiser: val loss {val:.4} (init {init_loss:.4}), {:.0}s -> {}", report.seconds, cfg.denoiser_path().display());
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn synth(
    cfg: &RunConfig,
    method: Method,
    painting: &Path,
    tokens: &[String],
    regions: Option<&Path>,
    attention: bool,
    name: &str,
) -> anyhow::Result<()> {
    let models = cfg.load_models()?;
    let y = load_png(painting)?;
    let tokens = scenegen::parse_tokens(tokens)?;
    let regions = match regions {
        Some(p) => semctl::load_regions(p)?,
        None => Vec::new(),
    };
    let g = &cfg.guidance;
    let result = if regions.is_empty() && !attention {
        models.synthesize(method, &y, &tokens, g, Controls::default())?
    } else {
        semctl::controlled_synthesis(&models, &y, &tokens, &regions, method, g, attention, None)?
    };
    std::fs::create_dir_all(&cfg.paths.output)?;
    let png = cfg.paths.output.join(format!("{name}.png"));
    save_png(&png, &result.image)?;
    let f = eval::faithfulness(&load_png(&png)?, &y)?;
    let mut heatmaps = Vec::new();
    if attention {
        for m in semctl::attention_diagnostics(&result)? {
            let label = scenegen::token_name(m.token).unwrap_or("pad");
            let path = cfg.paths.output.join(format!("{name}.attn.{label}.png"));
            save_png(&path, &semctl::heatmap(&m.map)?)?;
            heatmaps.push(path.display().to_string());
        }
    }
    write_json(
        &cfg.paths.output.join(format!("{name}.json")),
        &json!({
            "method": method,
            "painting": painting.display().to_string(),
            "tokens": tokens.iter().map(|&t| scenegen::token_name(t)).collect::<Vec<_>>(),
            "regions": regions.iter().map(|r| json!({"label": scenegen::token_name(r.label()), "weight": r.weight()})).collect::<Vec<_>>(),
            "config": g,
            "losses": result.losses,
            "seconds": result.seconds,
            "faithfulness": f,
            "attention": heatmaps,
            "provenance": Provenance::new(cfg, g.seed),
        }),
    )?;
    println!("{method}: F = {f:.3} ({:.2}s) -> {}", result.seconds, png.display());
    Ok(())
}

fn run_eval(cfg: &RunConfig, plot: bool) -> anyhow::Result<()> {
    let models = cfg.load_models()?;
    let data = read_dataset(&cfg.paths.dataset)?;
    let plan = cfg.benchmark_plan();
    let inputs = benchmark_inputs(&data.test, plan.paintings)?;
    let t = Instant::now();
    let last = std::sync::Mutex::new(String::new());
    let progress = |label: &str, done: usize, total: usize| {
        let mut l = last.lock().expect("progress");
        if *l != label || done == total {
            log::info!("{label}: {done}/{total}");
            *l = label.to_string();
        }
    };
    let report = eval::run_benchmark(&models, &inputs, &plan, Some(&progress))?;
    std::fs::create_dir_all(&cfg.paths.output)?;
    let mut value = serde_json::to_value(&report)?;
    value["provenance"] = serde_json::to_value(Provenance::new(cfg, plan.root_seed))?;
    write_json(&cfg.paths.output.join("report.json"), &value)?;
    std::fs::write(cfg.paths.output.join("report.csv"), report.to_csv()?)?;
    if plot {
        std::fs::write(cfg.paths.output.join("tradeoff.svg"), report.to_svg())?;
    }
    println!("{:<16} {:>9} {:>9}", "method", "F", "R");
    for p in &report.points {
        println!("{:<16} {:>9.3} {:>9.4}", p.label, p.faithfulness, p.realism);
    }
    println!("text-only F {:.3}; {:.0}s -> {}", report.text_only_faithfulness, t.elapsed().as_secs_f64(), cfg.paths.output.display());
    Ok(())
}

fn serve(cfg: &RunConfig, port: u16, ui_dir: Option<PathBuf>, workers: Option<usize>) -> anyhow::Result<()> {
    let models = cfg.load_models()?;
    let state = AppState::new(models, workers.unwrap_or_else(AppState::default_workers));
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(service::serve(state, port, ui_dir))?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.guidance.seed = s;
    }
    match cli.cmd {
        Command::GenData { n, out } => gen_data(&cfg, n, out),
        Command::Train { stage, epochs } => train(&cfg, stage, epochs),
        Command::Synth { method, painting, tokens, regions, attention, name, guidance } => {
            guidance.apply(&mut cfg);
            cfg.validate()?;
            synth(&cfg, method, &painting, &tokens, regions.as_deref(), attention, &name)
        }
        Command::Eval { plot, paintings, seeds, guidance } => {
            guidance.apply(&mut cfg);
            cfg.benchmark.paintings = paintings.unwrap_or(cfg.benchmark.paintings);
            cfg.benchmark.seeds = seeds.unwrap_or(cfg.benchmark.seeds);
            cfg.validate()?;
            run_eval(&cfg, plot)
        }
        Command::Serve { port, ui_dir, workers } => serve(&cfg, port, ui_dir, workers),
        Command::ShowConfig => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::MissingFile(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
