//! `vrl`: degradation synthesis, training, inference, evaluation, temporal
//! profiles, ablation sweeps and the attention benchmark.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use vrl_core::ablation::{expand, run_sweep, sweep_csv, AblationAxes};
use vrl_core::degrade::{interlace, mosaic, CfaPattern, DegradedSequence, FieldParity, ProgressiveClip};
use vrl_core::eval::{
    attention_benchmark, bench_csv, evaluate, temporal_profile, EvalOptions, ProfileAxis,
};
use vrl_core::io::{clip_dirs, read_clip, read_degraded, read_pictures, write_degraded, write_pictures, write_png, META_FILE};
use vrl_core::model::{Checkpoint, ModelConfig, Task};
use vrl_core::train::{run, Trainer, TrainingSet};
use vrl_core::{Error, Result};

use config::{RunConfig, RESOLVED_FILE};

#[derive(Parser, Debug)]
#[command(name = "vrl", version, about = "Multi-picture video deinterlacing and demosaicing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Interlace or mosaic ground-truth clips.
    Degrade(DegradeArgs),
    /// Train a model; writes log.csv and checkpoints.
    Train(TrainArgs),
    /// Restore degraded sequences with a checkpoint.
    Infer(InferArgs),
    /// Score a checkpoint against ground-truth clips.
    Eval(EvalArgs),
    /// Write a temporal profile of a clip.
    Profile(ProfileArgs),
    /// Train and evaluate a grid of architecture variants.
    Ablate(AblateArgs),
    /// Time SA, kSA and EkSA over growing token counts.
    BenchAttn(BenchArgs),
}

#[derive(Args, Debug, Serialize)]
struct DegradeArgs {
    /// interlace or mosaic
    #[arg(long)]
    task: String,
    /// A clip directory of PNG frames, or a directory of clip directories.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "rggb")]
    pattern: String,
    #[arg(long, default_value = "odd")]
    first_parity: String,
    /// Standard deviation of additive Gaussian noise applied before degrading.
    #[arg(long, default_value_t = 0.0)]
    noise: f32,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth training clips; overrides data.train_dir.
    #[arg(long)]
    data: Option<PathBuf>,
    /// deinterlace or demosaic
    #[arg(long)]
    task: Option<String>,
    /// Architecture preset applied before the config file: paper or toy.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patch_h: Option<usize>,
    #[arg(long)]
    patch_w: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A degraded directory (with meta.json), or a directory of them.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write a side-by-side horizontal temporal profile at this row.
    #[arg(long)]
    profile_row: Option<usize>,
    /// Also write a side-by-side vertical temporal profile at this column.
    #[arg(long)]
    profile_col: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Ground-truth clips.
    #[arg(long)]
    gt: PathBuf,
    /// Pre-degraded inputs; synthesized from the ground truth when omitted.
    #[arg(long)]
    degraded: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Write 10× difference images.
    #[arg(long)]
    diffs: bool,
    #[arg(long, default_value = "rggb")]
    pattern: String,
    #[arg(long, default_value = "odd")]
    first_parity: String,
    /// Pixels excluded from each frame edge before scoring.
    #[arg(long, default_value_t = 0)]
    border: usize,
}

#[derive(Args, Debug, Serialize)]
struct ProfileArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// horizontal (fixed row) or vertical (fixed column)
    #[arg(long)]
    axis: String,
    #[arg(long)]
    index: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Axes used when the config sets none: table5 or table6.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Serialize)]
struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated ascending token counts.
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    max_map_elements: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Runs the command line `argv` (program name first) and returns the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => 2,
                _ => 1,
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Degrade(a) => degrade(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Profile(a) => profile(a),
        Command::Ablate(a) => ablate(a),
        Command::BenchAttn(a) => bench(a),
    }
}

fn parity(s: &str) -> Result<FieldParity> {
    match s.to_ascii_lowercase().as_str() {
        "odd" => Ok(FieldParity::Odd),
        "even" => Ok(FieldParity::Even),
        _ => Err(Error::Config(format!("first parity must be odd or even, got '{s}'"))),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Echoes the resolved options of a command without a run configuration.
fn echo_args<A: Serialize>(name: &str, args: &A, out: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Echo<'a, A> {
        command: &'a str,
        args: &'a A,
    }
    ensure_dir(out)?;
    let text = toml::to_string(&Echo { command: name, args })
        .map_err(|e| Error::Config(format!("serializing options: {e}")))?;
    write_text(&out.join(RESOLVED_FILE), &text)
}

fn clip_name(dir: &Path, root: &Path) -> Option<String> {
    (dir != root).then(|| dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
}

fn degrade(a: DegradeArgs) -> Result<()> {
    let task = Task::parse(&a.task).map_err(|_| Error::Config(format!("unknown task '{}'", a.task)))?;
    let pattern = CfaPattern::parse(&a.pattern)?;
    let first = parity(&a.first_parity)?;
    if !(a.noise >= 0.0) {
        return Err(Error::Config("noise must be nonnegative".into()));
    }
    let seed = match a.seed {
        Some(s) => s,
        None => config::env_seed()?.unwrap_or(0),
    };
    echo_args("degrade", &a, &a.out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for dir in clip_dirs(&a.input)? {
        let mut clip = read_clip(&dir)?;
        if a.noise > 0.0 {
            clip = clip.with_noise(a.noise, &mut rng)?;
        }
        let seq = match task {
            Task::Deinterlace => DegradedSequence::Interlaced(interlace(&clip, first)?),
            Task::Demosaic => DegradedSequence::Mosaic(mosaic(&clip, pattern)?),
        };
        let target = match clip_name(&dir, &a.input) {
            Some(name) => a.out.join(name),
            None => a.out.clone(),
        };
        write_degraded(&target, &seq, (clip.height(), clip.width()))?;
        eprintln!("{}: {} pictures -> {}", dir.display(), seq.len(), target.display());
    }
    Ok(())
}

fn model_preset(name: &str, task: Task) -> Result<ModelConfig> {
    match name.to_ascii_lowercase().as_str() {
        "paper" => Ok(ModelConfig::paper(task)),
        "toy" => Ok(ModelConfig::toy(task)),
        _ => Err(Error::Config(format!("unknown preset '{name}' (paper or toy)"))),
    }
}

fn load_clips(dir: &Path) -> Result<Vec<(String, ProgressiveClip)>> {
    clip_dirs(dir)?
        .into_iter()
        .map(|d| {
            let name = clip_name(&d, dir).unwrap_or_else(|| {
                d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "clip".into())
            });
            Ok((name, read_clip(&d)?))
        })
        .collect()
}

/// Training clips from the configured directory or one synthetic clip.
fn training_clips(cfg: &RunConfig) -> Result<Vec<(String, ProgressiveClip)>> {
    match &cfg.data.train_dir {
        Some(dir) => load_clips(dir),
        None => Ok(vec![(
            "synthetic".into(),
            ProgressiveClip::synthetic(
                cfg.data.synthetic_frames,
                cfg.data.synthetic_height,
                cfg.data.synthetic_width,
                cfg.train.seed,
            )?,
        )]),
    }
}

fn base_for(task: Option<&str>, preset: Option<&str>) -> Result<RunConfig> {
    let mut base = RunConfig::default();
    let task = task.map(Task::parse).transpose()?;
    if let Some(t) = task {
        base.model.task = t;
    }
    if let Some(p) = preset {
        base.model = model_preset(p, base.model.task)?;
    }
    Ok(base)
}

fn train(a: TrainArgs) -> Result<()> {
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let mut base = base_for(a.task.as_deref(), a.preset.as_deref())?;
    if let Some(c) = &resume {
        base.model = c.config.clone();
        if let Some(t) = &c.train {
            base.train = serde_json::from_value(t.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
    }
    let mut cfg = RunConfig::load(base, a.config.as_deref())?;
    if let Some(t) = &a.task {
        cfg.model.task = Task::parse(t)?;
    }
    if let Some(d) = &a.data {
        cfg.data.train_dir = Some(d.clone());
    }
    let t = &mut cfg.train;
    if let Some(v) = a.iterations {
        t.iterations = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.patch_h {
        t.patch_h = v;
    }
    if let Some(v) = a.patch_w {
        t.patch_w = v;
    }
    if let Some(v) = a.lr {
        t.lr0 = v;
    }
    if let Some(v) = a.checkpoint_every {
        t.checkpoint_every = v;
    }
    if let Some(s) = a.seed {
        t.seed = s;
        cfg.model.seed = s;
    }
    cfg.validate()?;
    cfg.echo(&a.out)?;
    let clips = training_clips(&cfg)?;
    let set = TrainingSet::new(cfg.model.task, clips.into_iter().map(|(_, c)| c).collect(), cfg.data.pattern)?;
    let mut trainer = match &resume {
        Some(c) => {
            if c.config != cfg.model {
                return Err(Error::Config("model configuration differs from the checkpoint".into()));
            }
            Trainer::resume(c, Some(&cfg.train))?
        }
        None => Trainer::new(&cfg.model, &cfg.train)?,
    };
    let every = (cfg.train.iterations / 20).max(1);
    let outcome = run(&mut trainer, &set, Some(&a.out), |r| {
        if r.iter % every == 0 || r.iter == 1 {
            eprintln!("iter {:>7}  loss {:.4e}  lr {:.3e}", r.iter, r.loss, r.lr);
        }
    })?;
    eprintln!(
        "finished {} iterations; {} parameters; checkpoint {}",
        outcome.checkpoint.iteration,
        outcome.checkpoint.params.count(),
        a.out.join("final.tar").display()
    );
    Ok(())
}

fn degraded_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join(META_FILE).exists() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::Io {
            path: root.to_path_buf(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(META_FILE).exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::MissingData(format!("no degraded sequences under {}", root.display())));
    }
    Ok(dirs)
}

fn side_by_side(a: &vrl_core::degrade::Image, b: &vrl_core::degrade::Image) -> vrl_core::degrade::Image {
    let w = a.width();
    vrl_core::degrade::Image::from_fn(a.height(), w + b.width(), |r, c, ch| {
        if c < w {
            a.get(r, c, ch)
        } else {
            b.get(r, c - w, ch)
        }
    })
}

fn infer(a: InferArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.model()?;
    echo_args("infer", &a, &a.out)?;
    for dir in degraded_dirs(&a.input)? {
        let seq = read_degraded(&dir)?;
        if !model.config().task.matches(&seq) {
            return Err(Error::Config(format!(
                "{} does not hold {} input",
                dir.display(),
                model.config().task.name()
            )));
        }
        let frames = model.restore_sequence(&seq)?;
        let target = match clip_name(&dir, &a.input) {
            Some(name) => a.out.join(name),
            None => a.out.clone(),
        };
        write_pictures(&target, &frames)?;
        let inputs_full = match &seq {
            DegradedSequence::Interlaced(s) => s
                .fields
                .iter()
                .zip(&s.parities)
                .map(|(f, p)| line_double(f, *p))
                .collect(),
            DegradedSequence::Mosaic(s) => s.frames.clone(),
        };
        for (axis, index) in [(ProfileAxis::Horizontal, a.profile_row), (ProfileAxis::Vertical, a.profile_col)] {
            if let Some(i) = index {
                let before = temporal_profile(&inputs_full, axis, i)?;
                let after = temporal_profile(&frames, axis, i)?;
                let name = match axis {
                    ProfileAxis::Horizontal => format!("profile_row_{i}.png"),
                    ProfileAxis::Vertical => format!("profile_col_{i}.png"),
                };
                write_png(&target.join("profiles").join(name), &side_by_side(&before, &after))?;
            }
        }
        eprintln!("{}: {} frames -> {}", dir.display(), frames.len(), target.display());
    }
    Ok(())
}

/// Field placed on its frame rows with the missing rows repeated, for display.
fn line_double(field: &vrl_core::degrade::Image, parity: FieldParity) -> vrl_core::degrade::Image {
    let off = parity.first_row();
    vrl_core::degrade::Image::from_fn(field.height() * 2, field.width(), |r, c, ch| {
        let fr = if r >= off { (r - off) / 2 } else { 0 };
        field.get(fr.min(field.height() - 1), c, ch)
    })
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.model()?;
    echo_args("eval", &a, &a.out)?;
    let mut opts = EvalOptions::new(model.config().task);
    opts.pattern = CfaPattern::parse(&a.pattern)?;
    opts.first_parity = parity(&a.first_parity)?;
    opts.border = a.border;
    opts.degraded_root = a.degraded.clone();
    opts.diff_dir = a.diffs.then(|| a.out.join("diff"));
    let report = evaluate(&model, &a.gt, &opts)?;
    report.write_csv(&a.out.join("report.csv"))?;
    write_text(&a.out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
    eprintln!(
        "{} frames: PSNR {:.2} dB, SSIM {:.4}",
        report.frames, report.psnr_db, report.ssim
    );
    Ok(())
}

fn profile(a: ProfileArgs) -> Result<()> {
    let axis = ProfileAxis::parse(&a.axis)?;
    echo_args("profile", &a, &a.out)?;
    let frames = read_pictures(&a.input)?;
    let img = temporal_profile(&frames, axis, a.index)?;
    let name = match axis {
        ProfileAxis::Horizontal => format!("profile_row_{}.png", a.index),
        ProfileAxis::Vertical => format!("profile_col_{}.png", a.index),
    };
    write_png(&a.out.join(name), &img)
}

fn ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = RunConfig::load(base_for(a.task.as_deref(), None)?, a.config.as_deref())?;
    if let Some(t) = &a.task {
        cfg.model.task = Task::parse(t)?;
    }
    if let Some(d) = &a.data {
        cfg.data.train_dir = Some(d.clone());
    }
    if let Some(d) = &a.eval {
        cfg.data.eval_dir = Some(d.clone());
    }
    if let Some(v) = a.iterations {
        cfg.train.iterations = v;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
        cfg.model.seed = s;
    }
    if cfg.ablation == AblationAxes::default() {
        cfg.ablation = match a.preset.as_deref() {
            Some("table5") => AblationAxes::table5(),
            Some("table6") => AblationAxes::table6(),
            Some(p) => return Err(Error::Config(format!("unknown ablation preset '{p}' (table5 or table6)"))),
            None => return Err(Error::Config("no ablation axes: set [ablation] or --preset".into())),
        };
    }
    cfg.validate()?;
    let variants = expand(&cfg.model, &cfg.ablation)?;
    cfg.echo(&a.out)?;
    let clips = training_clips(&cfg)?;
    let eval_clips = match &cfg.data.eval_dir {
        Some(d) => load_clips(d)?,
        None => clips.clone(),
    };
    let set = TrainingSet::new(cfg.model.task, clips.into_iter().map(|(_, c)| c).collect(), cfg.data.pattern)?;
    let total = variants.len();
    let rows = run_sweep(&variants, &cfg.train, &set, &eval_clips, |i, r| {
        let label: Vec<String> = r.settings.iter().map(|(k, v)| format!("{k}={v}")).collect();
        eprintln!("[{}/{total}] {}  PSNR {:.2} dB", i + 1, label.join(" "), r.psnr_db);
    })?;
    write_text(&a.out.join("ablation.csv"), &sweep_csv(&rows)?)
}

fn bench(a: BenchArgs) -> Result<()> {
    let mut cfg = RunConfig::load(RunConfig::default(), a.config.as_deref())?;
    let b = &mut cfg.bench;
    if let Some(n) = &a.n {
        b.ns = n.clone();
    }
    if let Some(v) = a.d {
        b.d = v;
    }
    if let Some(v) = a.reps {
        b.repetitions = v;
    }
    if let Some(v) = a.k {
        b.k = v;
    }
    if let Some(v) = a.max_map_elements {
        b.max_map_elements = v;
    }
    if let Some(v) = a.seed {
        b.seed = v;
    }
    cfg.echo(&a.out)?;
    let cells = attention_benchmark(&cfg.bench)?;
    let csv = bench_csv(&cells);
    write_text(&a.out.join("bench.csv"), &csv)?;
    write_text(&a.out.join("bench.json"), &serde_json::to_string_pretty(&cells)?)?;
    print!("{csv}");
    Ok(())
}
