//! `permview`: data generation, VAE pretraining, denoiser training,
//! inference, evaluation, the permutation test and the gradient suite.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};
use permview_core::config::Config;
use permview_core::eval::{fingerprint, nvs_eval, permutation_eval, render_csv, render_table, InferenceModel};
use permview_core::geometry::{read_pose_bundle, CameraView};
use permview_core::gradsuite::run_grad_suite;
use permview_core::image::Image;
use permview_core::numerics::Reduction;
use permview_core::scenegen::{generate_dataset, read_dataset, write_dataset, ViewSet};
use permview_core::trainer::{load_checkpoint, save_checkpoint, TrainState, Trainer};
use permview_core::vae::{pretrain_vae, reconstruction_psnr, Vae};
use permview_core::{Error, Result};

/// Environment variable that replaces the default output root.
const OUT_ENV: &str = "PERMVIEW_OUT";

#[derive(Parser, Debug)]
#[command(name = "permview", version, about = "Permutation-invariant novel view synthesis on synthetic scenes")]
struct Cli {
    /// TOML experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: $PERMVIEW_OUT, else `runs`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Order-independent attention reductions at inference.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Config override `key=value`; dotted paths, numeric segments index arrays.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic dataset to `<out>/data`.
    GenData,
    /// Pretrain the VAE on single dataset frames.
    TrainVae {
        /// Dataset directory (default `<out>/data`).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the denoiser through every configured stage.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Pretrained VAE (default `<out>/vae.bin`).
        #[arg(long)]
        vae: Option<PathBuf>,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Steps between checkpoints; 0 saves only at the end.
        #[arg(long, default_value_t = 1000)]
        checkpoint_every: usize,
    },
    /// Predict the query views of a pose bundle.
    Infer {
        /// Training checkpoint (default `<out>/train.ckpt`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Views with an image are inputs; views without one are queries.
        #[arg(long)]
        bundle: PathBuf,
    },
    /// Target-view PSNR/SSIM against the nearest-input baseline.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Metric spread across random input orderings.
    PermuteTest {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Orderings per scene (default `eval.n_perms`).
        #[arg(long)]
        perms: Option<usize>,
    },
    /// Finite-difference check of every gradient.
    GradCheck,
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    line: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config { .. } | Error::Parse { .. } => 2,
            _ => 1,
        };
        let line = format!("error[{}]: {}", e.kind(), e).replace('\n', " ");
        Failure { code, line }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.line);
            ExitCode::from(f.code)
        }
    }
}

struct Ctx {
    config: Config,
    out: PathBuf,
}

impl Ctx {
    fn path_or(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out.join(default))
    }

    fn reduction(&self) -> Reduction {
        if self.config.deterministic {
            Reduction::Canonical
        } else {
            Reduction::Fast
        }
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let p = self.out.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }
}

fn effective_config(cli: &Cli) -> std::result::Result<Config, Failure> {
    let Some(path) = &cli.config else {
        let usage = Cli::command().render_usage();
        return Err(Failure {
            code: 2,
            line: format!("error[usage]: --config is required. {usage}"),
        });
    };
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(t) = cli.threads {
        overrides.push(format!("threads={t}"));
    }
    if cli.deterministic {
        overrides.push("deterministic=true".into());
    }
    Ok(Config::load(path)?.with_overrides(&overrides)?)
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    let out = cli
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    if let Command::GradCheck = cli.command {
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        return grad_check(&out);
    }
    let config = effective_config(&cli)?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let ctx = Ctx { config, out };
    ctx.write("config.toml", &ctx.config.to_toml())?;
    match &cli.command {
        Command::GenData => gen_data(&ctx)?,
        Command::TrainVae { data } => train_vae(&ctx, &ctx.path_or(data, "data"))?,
        Command::Train {
            data,
            vae,
            resume,
            checkpoint_every,
        } => train(&ctx, &ctx.path_or(data, "data"), &ctx.path_or(vae, "vae.bin"), resume.as_deref(), *checkpoint_every)?,
        Command::Infer { checkpoint, bundle } => infer(&ctx, &ctx.path_or(checkpoint, "train.ckpt"), bundle)?,
        Command::Eval { checkpoint, data } => eval(&ctx, &ctx.path_or(checkpoint, "train.ckpt"), &ctx.path_or(data, "data"))?,
        Command::PermuteTest { checkpoint, data, perms } => permute_test(
            &ctx,
            &ctx.path_or(checkpoint, "train.ckpt"),
            &ctx.path_or(data, "data"),
            perms.unwrap_or(ctx.config.eval.n_perms),
        )?,
        Command::GradCheck => unreachable!("handled above"),
    }
    Ok(())
}

fn gen_data(ctx: &Ctx) -> Result<()> {
    let d = &ctx.config.data;
    let sets = generate_dataset(d, d.height, d.width)?;
    write_dataset(&sets, &ctx.out.join("data"))?;
    println!("wrote {} scenes x {} frames to {}", sets.len(), d.frames_per_scene, ctx.out.join("data").display());
    Ok(())
}

fn all_images(sets: &[ViewSet]) -> Result<Vec<&Image>> {
    sets.iter().flat_map(|s| (0..s.views.len()).map(move |k| s.image(k))).collect()
}

fn train_vae(ctx: &Ctx, data: &Path) -> Result<()> {
    let sets = read_dataset(data)?;
    let images = all_images(&sets)?;
    let (vae, log) = pretrain_vae(&images, ctx.config.vae.model.clone(), &ctx.config.vae.train)?;
    let mut text = String::from("step loss lr\n");
    for (s, l, lr) in &log.steps {
        text += &format!("{s} {l:.6} {lr:.3e}\n");
    }
    ctx.write("vae_log.txt", &text)?;
    vae.save(&ctx.out.join("vae.bin"))?;
    let p = reconstruction_psnr(&vae, &images)?;
    println!("vae reconstruction PSNR {p:.2} dB over {} frames", images.len());
    Ok(())
}

/// Writes each line to a file and to stderr.
struct Tee(fs::File);

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.write_all(buf)?;
        std::io::stderr().write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.0.flush()
    }
}

fn train(ctx: &Ctx, data: &Path, vae_path: &Path, resume: Option<&Path>, every: usize) -> Result<()> {
    let on_disk = read_dataset(data)?;
    let disk_res = on_disk
        .first()
        .map(|s| (s.views[0].intrinsics.height, s.views[0].intrinsics.width));
    let dcfg = ctx.config.data.clone();
    // Stages at the on-disk resolution read the dataset; others re-render it.
    let source = move |h: usize, w: usize| -> Result<Vec<ViewSet>> {
        if Some((h, w)) == disk_res {
            Ok(on_disk.clone())
        } else {
            generate_dataset(&dcfg, h, w)
        }
    };
    let state = match resume {
        Some(p) => load_checkpoint(p)?,
        None => TrainState::new(ctx.config.clone(), Vae::load(vae_path)?)?,
    };
    let log_path = ctx.out.join("train_log.txt");
    let file = fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut tee = Tee(file);
    let mut trainer = Trainer::new(state, &source);
    let ckpt = ctx.out.join("train.ckpt");
    let total = trainer.state.config.train.total_steps();
    while !trainer.state.finished() {
        let until = if every == 0 { total } else { (trainer.state.step / every + 1) * every };
        trainer.run(Some(until), Some(&mut tee))?;
        save_checkpoint(&trainer.state, &ckpt)?;
    }
    println!("trained {total} steps; checkpoint at {}", ckpt.display());
    Ok(())
}

/// Loads a checkpoint and applies the inference-time switches of the
/// effective config (temporal RoPE mode and coordinate frame).
fn load_model(ctx: &Ctx, path: &Path) -> Result<TrainState> {
    let mut st = load_checkpoint(path)?;
    let eff = &ctx.config;
    if eff.model.rope.split != st.config.model.rope.split {
        return Err(Error::config("model.rope.split", "differs from the checkpoint"));
    }
    if eff.cond.encoding != st.config.cond.encoding || eff.cond.raymap_downsample != st.config.cond.raymap_downsample {
        return Err(Error::config("cond", "encoding and ray downsampling must match the checkpoint"));
    }
    st.model.config.rope = eff.model.rope.clone();
    st.config.cond.coords = eff.cond.coords;
    Ok(st)
}

fn inference<'a>(ctx: &Ctx, st: &'a TrainState) -> InferenceModel<'a> {
    InferenceModel {
        vae: &st.vae,
        model: &st.model,
        cond: st.config.cond,
        sampler: ctx.config.sampler.clone(),
        reduction: ctx.reduction(),
    }
}

fn infer(ctx: &Ctx, ckpt: &Path, bundle_path: &Path) -> Result<()> {
    let st = load_model(ctx, ckpt)?;
    let bundle = read_pose_bundle(bundle_path)?;
    let base = bundle_path.parent().unwrap_or(Path::new("."));
    let mut views = Vec::with_capacity(bundle.views.len());
    let (mut inputs, mut queries) = (Vec::new(), Vec::new());
    for (i, v) in bundle.views.iter().enumerate() {
        let image = v.image.as_ref().map(|name| Image::read_png(&base.join(name))).transpose()?;
        if image.is_some() {
            inputs.push(i);
        } else {
            queries.push(i);
        }
        views.push(CameraView::new(v.intrinsics, v.pose, image)?);
    }
    if inputs.is_empty() || queries.is_empty() {
        return Err(Error::Invalid(format!(
            "bundle needs at least one input and one query view, found {} and {}",
            inputs.len(),
            queries.len()
        )));
    }
    let set = ViewSet { scene_id: 0, views };
    let pred = inference(ctx, &st).predict(&set, &inputs, &queries, ctx.config.seed)?;
    for (q, img) in queries.iter().zip(&pred.images) {
        let p = ctx.out.join(format!("pred_view_{q}.png"));
        img.write_png(&p)?;
        println!("{}", p.display());
    }
    Ok(())
}

fn eval(ctx: &Ctx, ckpt: &Path, data: &Path) -> Result<()> {
    let st = load_model(ctx, ckpt)?;
    let sets = read_dataset(data)?;
    let fp = fingerprint(&ctx.config.to_toml());
    let (model, base) = nvs_eval(&inference(ctx, &st), &sets, &ctx.config.eval, "model", &fp, ctx.config.threads)?;
    let reports = [model, base];
    let table = render_table(&reports);
    ctx.write("eval.txt", &table)?;
    ctx.write("eval.csv", &render_csv(&reports))?;
    print!("{table}");
    Ok(())
}

fn permute_test(ctx: &Ctx, ckpt: &Path, data: &Path, perms: usize) -> Result<()> {
    let st = load_model(ctx, ckpt)?;
    let sets = read_dataset(data)?;
    let fp = fingerprint(&ctx.config.to_toml());
    let e = &ctx.config.eval;
    let label = format!(
        "{:?} rope, {:?} coords",
        ctx.config.model.rope.temporal, ctx.config.cond.coords
    )
    .to_lowercase();
    let report = permutation_eval(&inference(ctx, &st), &sets, e.k, perms, e.seed, &label, &fp, ctx.config.threads)?;
    let reports = [report];
    let table = render_table(&reports);
    ctx.write("permute.txt", &table)?;
    ctx.write("permute.csv", &render_csv(&reports))?;
    print!("{table}");
    Ok(())
}

fn grad_check(out: &Path) -> std::result::Result<(), Failure> {
    let entries = run_grad_suite(0)?;
    let mut text = String::new();
    for e in &entries {
        text += &format!("{e}\n");
    }
    let p = out.join("grad_check.txt");
    fs::write(&p, &text).map_err(|e| Error::io(&p, e))?;
    print!("{text}");
    let failed: Vec<&str> = entries.iter().filter(|e| !e.passes()).map(|e| e.report.op.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            line: format!("error[gradient]: {} check(s) above tolerance: {}", failed.len(), failed.join(", ")),
        })
    }
}
