//! Configuration sweeps over the architecture switches.

use serde::{Deserialize, Serialize};

use crate::align::AlignVariant;
use crate::attention::{AttentionVariant, TopK};
use crate::degrade::{CfaPattern, ProgressiveClip};
use crate::error::{Error, Result};
use crate::eval::{evaluate_clip, EvalOptions, EvalReport};
use crate::model::{build_model, Fusion, ModelConfig, ReconMode, Task};
use crate::train::{batch_gradients, run, sample_batch, TrainConfig, Trainer, TrainingSet};

/// Reconstruction mode with its residual-block depth, written `Separate-7`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReconSpec {
    pub mode: ReconMode,
    pub depth: usize,
}

impl ReconSpec {
    pub const TABLE: [ReconSpec; 4] = [
        ReconSpec { mode: ReconMode::Separate, depth: 7 },
        ReconSpec { mode: ReconMode::Single, depth: 0 },
        ReconSpec { mode: ReconMode::Single, depth: 7 },
        ReconSpec { mode: ReconMode::Single, depth: 14 },
    ];

    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("recon setting '{s}' is not MODE-DEPTH, e.g. Separate-7"));
        let (mode, depth) = s.split_once('-').ok_or_else(bad)?;
        let mode = match mode.to_ascii_lowercase().as_str() {
            "separate" | "sep" => ReconMode::Separate,
            "single" => ReconMode::Single,
            _ => return Err(bad()),
        };
        Ok(ReconSpec {
            mode,
            depth: depth.trim().parse().map_err(|_| bad())?,
        })
    }
}

impl std::fmt::Display for ReconSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mode = match self.mode {
            ReconMode::Separate => "Separate",
            ReconMode::Single => "Single",
        };
        write!(f, "{mode}-{}", self.depth)
    }
}

impl Serialize for ReconSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ReconSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ReconSpec::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Values to sweep per axis; absent axes keep the base configuration.
/// `k` sets both the EkSA and the kSA top-k.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationAxes {
    pub align_variant: Option<Vec<AlignVariant>>,
    pub attention_variant: Option<Vec<AttentionVariant>>,
    pub attention_residual: Option<Vec<bool>>,
    pub fusion: Option<Vec<Fusion>>,
    pub recon: Option<Vec<ReconSpec>>,
    pub k: Option<Vec<TopK>>,
}

impl AblationAxes {
    /// The full documented grid: 3 × 3 × 2 × 2 × 4 combinations.
    pub fn table5() -> Self {
        AblationAxes {
            align_variant: Some(AlignVariant::ALL.to_vec()),
            attention_variant: Some(vec![AttentionVariant::Sa, AttentionVariant::Ksa, AttentionVariant::Eksa]),
            attention_residual: Some(vec![true, false]),
            fusion: Some(vec![Fusion::Add, Fusion::Concat]),
            recon: Some(ReconSpec::TABLE.to_vec()),
            k: None,
        }
    }

    /// The top-k study: k ∈ {32, 50, 64}.
    pub fn table6() -> Self {
        AblationAxes {
            k: Some(vec![TopK::Count(32), TopK::Count(50), TopK::Count(64)]),
            ..AblationAxes::default()
        }
    }

    /// Names of the active axes, in column order.
    pub fn names(&self) -> Vec<&'static str> {
        let mut n = Vec::new();
        if self.align_variant.is_some() {
            n.push("align_variant");
        }
        if self.attention_variant.is_some() {
            n.push("attention_variant");
        }
        if self.attention_residual.is_some() {
            n.push("attention_residual");
        }
        if self.fusion.is_some() {
            n.push("fusion");
        }
        if self.recon.is_some() {
            n.push("recon");
        }
        if self.k.is_some() {
            n.push("k");
        }
        n
    }
}

/// One point of a sweep: axis values as text plus the resulting configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub settings: Vec<(&'static str, String)>,
    pub config: ModelConfig,
}

type Setter = Box<dyn Fn(&mut ModelConfig)>;

fn axis<T: Clone + 'static>(
    name: &'static str,
    values: &Option<Vec<T>>,
    label: impl Fn(&T) -> String,
    apply: impl Fn(&mut ModelConfig, &T) + Clone + 'static,
) -> Result<Option<Vec<(&'static str, String, Setter)>>> {
    let Some(values) = values else { return Ok(None) };
    if values.is_empty() {
        return Err(Error::Config(format!("ablation axis {name} has no values")));
    }
    Ok(Some(
        values
            .iter()
            .map(|v| {
                let (v2, f) = (v.clone(), apply.clone());
                (name, label(v), Box::new(move |c: &mut ModelConfig| f(c, &v2)) as Setter)
            })
            .collect(),
    ))
}

/// Cartesian product of the axis values applied to `base`, first axis slowest.
pub fn expand(base: &ModelConfig, axes: &AblationAxes) -> Result<Vec<Variant>> {
    let all = [
        axis("align_variant", &axes.align_variant, |v| v.name().into(), |c, v| c.align_variant = *v)?,
        axis("attention_variant", &axes.attention_variant, |v| v.name().into(), |c, v| c.attention.variant = *v)?,
        axis("attention_residual", &axes.attention_residual, |v| v.to_string(), |c, v| c.attention.residual = *v)?,
        axis("fusion", &axes.fusion, |v| format!("{v:?}"), |c, v| c.fusion = *v)?,
        axis("recon", &axes.recon, |v| v.to_string(), |c, v| {
            c.recon_mode = v.mode;
            c.recon_depth = v.depth;
        })?,
        axis("k", &axes.k, |v| v.to_string(), |c, v| {
            c.attention.k = *v;
            c.attention.k_tokens = *v;
        })?,
    ];
    let active: Vec<_> = all.into_iter().flatten().collect();
    if active.is_empty() {
        return Err(Error::Config("ablation needs at least one axis".into()));
    }
    let mut out = vec![Variant {
        settings: Vec::new(),
        config: base.clone(),
    }];
    for values in &active {
        out = out
            .into_iter()
            .flat_map(|v| {
                values.iter().map(move |(name, label, set)| {
                    let mut config = v.config.clone();
                    set(&mut config);
                    let mut settings = v.settings.clone();
                    settings.push((*name, label.clone()));
                    Variant { settings, config }
                })
            })
            .collect();
    }
    for v in &out {
        v.config.validate()?;
    }
    Ok(out)
}

/// One forward and backward pass of `cfg` on a random batch from `set`.
/// Returns the loss.
pub fn smoke_step(cfg: &ModelConfig, set: &TrainingSet, train: &TrainConfig) -> Result<f64> {
    let (model, _) = build_model(cfg)?;
    let batch = sample_batch(set, train, 0)?;
    let (loss, grads) = batch_gradients(&model, &batch, &train.loss, set.pattern())?;
    if !loss.total.is_finite() || grads.iter().flatten().any(|g| !g.all_finite()) {
        return Err(Error::NonFinite(format!("smoke step of {:?}", cfg)));
    }
    Ok(loss.total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub settings: Vec<(&'static str, String)>,
    pub params: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub final_loss: f64,
}

/// Trains every variant with the same budget and data seed, then evaluates
/// each on `eval_clips`.
pub fn run_sweep(
    variants: &[Variant],
    train: &TrainConfig,
    set: &TrainingSet,
    eval_clips: &[(String, ProgressiveClip)],
    mut progress: impl FnMut(usize, &SweepRow),
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for (i, v) in variants.iter().enumerate() {
        if v.config.task != set.task() {
            return Err(Error::Config("sweep base task does not match the training set".into()));
        }
        let mut trainer = Trainer::new(&v.config, train)?;
        let outcome = run(&mut trainer, set, None, |_| {})?;
        let model = trainer.model();
        let mut opts = EvalOptions::new(set.task());
        opts.pattern = set.pattern();
        let clip_rows = eval_clips
            .iter()
            .map(|(name, clip)| evaluate_clip(model, name, clip, &opts.degrade(clip)?, &opts))
            .collect::<Result<Vec<_>>>()?;
        let report = EvalReport::from_rows(clip_rows, String::new());
        let row = SweepRow {
            settings: v.settings.clone(),
            params: model.parameter_count(),
            psnr_db: report.psnr_db,
            ssim: report.ssim,
            final_loss: outcome.log.last().map_or(f64::NAN, |r| r.loss),
        };
        progress(i, &row);
        rows.push(row);
    }
    Ok(rows)
}

/// Axis columns followed by `params,psnr_db,ssim,final_loss`.
pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Config(format!("formatting sweep: {e}"));
    if let Some(first) = rows.first() {
        let mut header: Vec<String> = first.settings.iter().map(|(n, _)| n.to_string()).collect();
        header.extend(["params", "psnr_db", "ssim", "final_loss"].map(String::from));
        w.write_record(&header).map_err(err)?;
    }
    for r in rows {
        let mut rec: Vec<String> = r.settings.iter().map(|(_, v)| v.clone()).collect();
        rec.push(r.params.to_string());
        rec.push(format!("{:.4}", r.psnr_db));
        rec.push(format!("{:.6}", r.ssim));
        rec.push(format!("{:.6e}", r.final_loss));
        w.write_record(&rec).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(format!("formatting sweep: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Base configuration for sweeps at toy size: toy depths with 64 channels so
/// every documented `k` fits the attention width.
pub fn sweep_base(task: Task) -> ModelConfig {
    ModelConfig {
        channels: 64,
        deform_groups: 8,
        attention: crate::attention::AttentionConfig::default(),
        ..ModelConfig::toy(task)
    }
}

/// A single small synthetic clip and a one-window-per-step budget, for smoke sweeps.
pub fn smoke_setup(task: Task, pattern: CfaPattern) -> Result<(TrainingSet, TrainConfig)> {
    let (h, w) = match task {
        Task::Deinterlace => (16, 8),
        Task::Demosaic => (8, 8),
    };
    let clip = ProgressiveClip::synthetic(5, h, w, 7)?;
    let set = TrainingSet::new(task, vec![clip], pattern)?;
    let train = TrainConfig {
        iterations: 1,
        batch_size: 1,
        patch_h: h,
        patch_w: w,
        checkpoint_every: 0,
        ..TrainConfig::desk()
    };
    Ok((set, train))
}
