use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use avatar_core::bench::run_bench;
use avatar_core::config::RunConfig;
use avatar_core::controller::{load_motion_file, MotionSignal};
use avatar_core::diagnostics::{corrupted_check, run_suite, SuiteConfig, SuiteReport};
use avatar_core::engine::checksum;
use avatar_core::generator::{interpolate_identity, LatentCodePlus};
use avatar_core::image_io::write_ppm;
use avatar_core::inversion::{invert_identity, psnr, FrameSample, JsonLinesLog, Trainer};
use avatar_core::losses::AnimationLoss;
use avatar_core::model::{add_codes, Model};
use avatar_core::synthetic::{make_dataset, parse_camera_text, Dataset, DatasetSpec};
use clap::{Parser, Subcommand};

type AnyResult<T> = Result<T, Box<dyn std::error::Error>>;

#[derive(Parser, Debug)]
#[command(name = "avatar", version, about = "Tri-plane avatar training, inversion and animation")]
struct Cli {
    /// Flat key=value config file; built-in desk defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set renderer.samples=48`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic dataset to `paths.dataset`.
    MakeDataset {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the controller; writes the checkpoint and a JSON-lines log.
    Train {
        #[arg(long)]
        iters: Option<usize>,
        /// Update identity code and controller together every step.
        #[arg(long)]
        joint: bool,
    },
    /// Invert one dataset frame into an identity code.
    Invert {
        clip: usize,
        frame: usize,
        /// Steps per phase (W, then W+).
        #[arg(long)]
        steps: Option<usize>,
        /// Output prefix; writes `<prefix>.latent` and `<prefix>.ppm`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render one image per motion frame.
    Animate {
        #[arg(long)]
        latent: PathBuf,
        #[arg(long)]
        motion: PathBuf,
        /// One camera per motion frame, or a single camera for all.
        #[arg(long)]
        camera: PathBuf,
        /// Second identity to blend with: `alpha * latent + (1 - alpha) * blend`.
        #[arg(long, requires = "alpha")]
        blend: Option<PathBuf>,
        #[arg(long, requires = "blend")]
        alpha: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Throughput of generator, renderer and end-to-end animation.
    Bench {
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Finite-difference gradient checks over every op and composite.
    Gradcheck {
        /// Run in f64 at tolerance 1e-6.
        #[arg(long)]
        f64: bool,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Also run a deliberately broken op (checks the checker).
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match run(cli.command, cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_config(cli: &Cli) -> avatar_core::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&cli.overrides)?;
    Ok(cfg)
}

fn run(cmd: Command, mut cfg: RunConfig) -> AnyResult<()> {
    match cmd {
        Command::MakeDataset { out } => {
            let out = out.unwrap_or_else(|| cfg.paths.dataset.clone());
            let spec = DatasetSpec {
                identities: cfg.data.identities,
                frames: cfg.data.frames,
                image_size: cfg.data.image_size,
                seed: cfg.data.seed,
                render: cfg.render.clone(),
            };
            let m = make_dataset(&out, &spec)?;
            let frames: usize = m.clips.iter().map(|c| c.frames.len()).sum();
            println!("wrote {} clips, {frames} frames to {}", m.clips.len(), out.display());
        }
        Command::Train { iters, joint } => {
            if let Some(n) = iters {
                cfg.train.iterations = n;
            }
            cfg.train.joint |= joint;
            let data = Dataset::load(&cfg.paths.dataset)
                .map_err(|e| format!("cannot load dataset {}: {e}", cfg.paths.dataset.display()))?;
            let model = Model::init(&cfg.model, cfg.seed)?;
            let loss = AnimationLoss::new(cfg.loss.clone())?;
            let mut trainer = Trainer::new(model, loss, cfg.train.clone(), cfg.render.clone())?;
            if let Some(dir) = cfg.paths.log.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            let mut log = JsonLinesLog(BufWriter::new(File::create(&cfg.paths.log)?));
            for _ in 0..cfg.train.iterations {
                let s = trainer.run_iteration(&data, &mut log)?;
                eprintln!("iter {:>4}  loss {:.4} -> {:.4}", s.iter, s.first.total, s.last.total);
            }
            std::io::Write::flush(&mut log.0)?;
            trainer.into_model()?.save(&cfg.paths.checkpoint)?;
            println!("checkpoint {}  log {}", cfg.paths.checkpoint.display(), cfg.paths.log.display());
        }
        Command::Invert { clip, frame, steps, out } => {
            if let Some(s) = steps {
                cfg.invert.steps = s;
            }
            let data = Dataset::load(&cfg.paths.dataset)?;
            let model = Model::<f32>::load(&cfg.model, &cfg.paths.checkpoint)?;
            let loss = AnimationLoss::new(cfg.loss.clone())?;
            let reference = FrameSample::from_dataset(&data, clip, frame, cfg.model.window)?;
            let inv = invert_identity(&model, &loss, &reference, &cfg.render, &cfg.invert)?;
            let recon = model.animate(&inv.code, &reference.motion, &reference.camera, &cfg.render)?;
            let prefix = out.unwrap_or_else(|| cfg.paths.output.join(format!("clip{clip:03}_frame{frame:03}")));
            inv.code.save(&prefix.with_extension("latent"))?;
            write_ppm(&prefix.with_extension("ppm"), &recon)?;
            println!(
                "loss {:.5} -> {:.5}  psnr {:.2} dB  latent {}",
                inv.initial_loss(),
                inv.final_loss(),
                psnr(&recon, &reference.image)?,
                prefix.with_extension("latent").display()
            );
        }
        Command::Animate { latent, motion, camera, blend, alpha, out } => {
            let model = Model::<f32>::load(&cfg.model, &cfg.paths.checkpoint)?;
            let mut w_id = LatentCodePlus::<f32>::load(&latent)?;
            if let (Some(b), Some(a)) = (blend, alpha) {
                w_id = interpolate_identity(&w_id, &LatentCodePlus::load(&b)?, a)?;
            }
            let frames = load_motion_file(&motion)?;
            let cams = parse_camera_text(&std::fs::read_to_string(&camera)?)?;
            if cams.is_empty() || (cams.len() != 1 && cams.len() != frames.len()) {
                return Err(format!("{} cameras for {} motion frames", cams.len(), frames.len()).into());
            }
            let out = out.unwrap_or_else(|| cfg.paths.output.join("animate"));
            let radius = cfg.model.window_radius();
            for m in 0..frames.len() {
                let signal = MotionSignal::from_sequence(&frames, m, radius, cfg.model.expression_dims)?;
                let w_x = model.motion_code(&signal)?;
                let cam = &cams[if cams.len() == 1 { 0 } else { m }];
                let img = model.render_code(&add_codes(&w_id, &w_x)?, cam, &cfg.render)?;
                write_ppm(&out.join(format!("frame_{m:04}.ppm")), &img)?;
                println!("frame {m} motion_code {:016x}", checksum([w_x.tensor()]));
            }
            eprintln!("wrote {} frames to {}", frames.len(), out.display());
        }
        Command::Bench { size, repeats } => {
            let model = Model::<f32>::load(&cfg.model, &cfg.paths.checkpoint)?;
            let report = run_bench(&model, &cfg.render, size, repeats)?;
            print!("{}", report.summary());
            if !report.one_decode_per_point() {
                return Err("decoder count does not match sampled points".into());
            }
        }
        Command::Gradcheck { f64, trials, corrupt } => {
            let sc = SuiteConfig { trials, ..SuiteConfig::default() };
            let mut report: SuiteReport = if f64 { run_suite::<f64>(&sc)? } else { run_suite::<f32>(&sc)? };
            if corrupt {
                report.checks.push(if f64 { corrupted_check::<f64>(sc.seed)? } else { corrupted_check::<f32>(sc.seed)? });
            }
            print!("{}", report.render());
            if !report.passed() {
                return Err(format!("{} gradient checks failed", report.failures().len()).into());
            }
        }
    }
    Ok(())
}
