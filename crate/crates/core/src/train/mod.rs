//! Composite loss, cosine-annealed Adam and the training loop.

mod adam;
mod data;
mod loss;

pub use adam::{clip_global_norm, global_norm, Adam};
pub use data::{crop_window, sample_patch, snap_origin, TrainingSet, WindowRef};
pub use loss::{loss, CompositeLoss, LossComponents, LossWeights};

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::degrade::{IndicatorFlag, TrainingWindow};
use crate::error::{Error, Result};
use crate::graph::{Graph, Ops, Var};
use crate::model::{build_model, images_to_tensor, Checkpoint, Model, ModelConfig, RngState, Task};
use crate::tensor::Tensor;

pub const LOG_FILE: &str = "log.csv";
pub const DIVERGENCE_FILE: &str = "divergence.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Save a checkpoint every this many iterations; 0 saves only the final one.
    pub checkpoint_every: u64,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    /// Desk-scale defaults: 5000 iterations, batch 4.
    pub fn desk() -> Self {
        TrainConfig {
            iterations: 5000,
            batch_size: 4,
            patch_h: 64,
            patch_w: 80,
            lr0: 4.0e-4,
            lr_min: 1.0e-7,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1.0e-8,
            grad_clip: 10.0,
            seed: 0,
            checkpoint_every: 1000,
            loss: LossWeights::default(),
        }
    }

    /// 150000 iterations, batch 32 (deinterlacing) or 24 (demosaicing).
    pub fn paper(task: Task) -> Self {
        TrainConfig {
            iterations: 150_000,
            batch_size: match task {
                Task::Deinterlace => 32,
                Task::Demosaic => 24,
            },
            checkpoint_every: 10_000,
            ..TrainConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.batch_size == 0 || self.patch_h == 0 || self.patch_w == 0 {
            return Err(Error::Config("batch size and patch dims must be positive".into()));
        }
        if !(self.lr0 >= self.lr_min && self.lr_min >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!(
                "need lr0 ≥ lr_min ≥ 0, got {} and {}",
                self.lr0, self.lr_min
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return Err(Error::Config("Adam needs betas in [0, 1) and eps > 0".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        self.loss.validate()
    }

    /// Checks that the patch fits the training pictures.
    pub fn check_patch(&self, set: &TrainingSet) -> Result<()> {
        let (h, w) = set.min_frame_size();
        if self.patch_h > h || self.patch_w > w {
            return Err(Error::Config(format!(
                "patch {}×{} exceeds the smallest training frame {h}×{w}",
                self.patch_h, self.patch_w
            )));
        }
        if set.task() == Task::Deinterlace && !self.patch_h.is_multiple_of(2) {
            return Err(Error::Config("deinterlacing patches need an even height".into()));
        }
        Ok(())
    }

    /// Same run apart from checkpoint cadence.
    pub fn compatible(&self, other: &TrainConfig) -> bool {
        TrainConfig {
            checkpoint_every: other.checkpoint_every,
            ..self.clone()
        } == *other
    }
}

/// Cosine annealing from `lr0` at step 0 to `lr_min` at `iterations`.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.iterations || cfg.iterations == 0 {
        return Err(Error::Index {
            index: step as usize,
            len: cfg.iterations as usize + 1,
        });
    }
    let t = step as f64 / cfg.iterations as f64;
    Ok(cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + (PI * t).cos()))
}

/// One metrics line. `iter` counts completed iterations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: u64,
    pub loss: f64,
    pub mse: f64,
    pub char: f64,
    pub tv: f64,
    pub lr: f64,
}

/// A sampled window and where it came from.
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub source: WindowRef,
    pub origin: (usize, usize),
    pub window: TrainingWindow,
}

impl BatchItem {
    pub fn describe(&self) -> String {
        format!(
            "sequence {} frame {} {} at ({}, {})",
            self.source.sequence,
            self.source.frame,
            self.source.indicator.name(),
            self.origin.0,
            self.origin.1
        )
    }
}

/// The batch for `iteration`: a pure function of `(seed, iteration)`.
pub fn sample_batch(set: &TrainingSet, cfg: &TrainConfig, iteration: u64) -> Result<Vec<BatchItem>> {
    if set.is_empty() {
        return Err(Error::MissingData("training set has no windows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(iteration);
    (0..cfg.batch_size)
        .map(|_| {
            let source = set.windows()[rng.random_range(0..set.len())];
            let full = set.window(source)?;
            let (window, origin) = sample_patch(&full, set.task(), (cfg.patch_h, cfg.patch_w), &mut rng)?;
            Ok(BatchItem { source, origin, window })
        })
        .collect()
}

/// Batch loss and parameter gradients. Windows sharing an indicator run as one
/// sub-batch; each sub-batch loss is weighted by its share of the batch.
pub fn batch_gradients(
    model: &Model,
    batch: &[BatchItem],
    weights: &LossWeights,
    pattern: crate::degrade::CfaPattern,
) -> Result<(LossComponents, Vec<Option<Tensor<f32>>>)> {
    let mut g: Graph<f32> = Graph::new();
    let vars = model.bind(&mut g);
    let mut groups: Vec<(IndicatorFlag, Vec<&TrainingWindow>)> = Vec::new();
    for item in batch {
        match groups.iter_mut().find(|(i, _)| *i == item.window.indicator) {
            Some((_, ws)) => ws.push(&item.window),
            None => groups.push((item.window.indicator, vec![&item.window])),
        }
    }
    let mut total: Option<Var> = None;
    let mut comps = LossComponents::default();
    for (indicator, windows) in &groups {
        let share = windows.len() as f64 / batch.len() as f64;
        let inputs = (0..5)
            .map(|p| {
                let pics: Vec<_> = windows.iter().map(|w| &w.inputs[p]).collect();
                Ok(g.constant(images_to_tensor(&pics)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let targets: Vec<_> = windows.iter().map(|w| &w.target).collect();
        let target = g.constant(images_to_tensor(&targets)?);
        let pred = model.forward(&mut g, &vars, &inputs, *indicator, pattern)?;
        let c = loss(g.value(&pred), g.value(&target), weights)?;
        comps.total += share * c.total;
        comps.mse += share * c.mse;
        comps.char += share * c.char;
        comps.tv += share * c.tv;
        let l = g.apply(CompositeLoss { weights: *weights }, &[&pred, &target])?;
        let w = g.constant(Tensor::scalar(share as f32));
        let l = g.scale(&l, &w)?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(&t, &l)?,
        });
    }
    let root = total.ok_or_else(|| Error::MissingData("empty batch".into()))?;
    if !comps.total.is_finite() {
        return Ok((comps, vec![None; vars.len()]));
    }
    let mut grads = g.backward(root)?;
    Ok((comps, vars.iter().map(|v| grads.take(*v)).collect()))
}

/// Training state: model, optimizer and position in the schedule.
pub struct Trainer {
    model: Model,
    cfg: TrainConfig,
    opt: Adam,
    iteration: u64,
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (model, _) = build_model(model_cfg)?;
        let opt = Adam::new(model.params(), cfg.beta1, cfg.beta2, cfg.adam_eps);
        Ok(Trainer {
            model,
            cfg: cfg.clone(),
            opt,
            iteration: 0,
        })
    }

    /// Continues from a checkpoint. `cfg` defaults to the stored training
    /// configuration and must otherwise agree with it.
    pub fn resume(ckpt: &Checkpoint, cfg: Option<&TrainConfig>) -> Result<Self> {
        let stored: Option<TrainConfig> = ckpt.train.clone().map(serde_json::from_value).transpose()?;
        let cfg = match (cfg, stored) {
            (Some(c), Some(s)) if !s.compatible(c) => {
                return Err(Error::Config(
                    "training configuration differs from the one stored in the checkpoint".into(),
                ))
            }
            (Some(c), _) => c.clone(),
            (None, Some(s)) => s,
            (None, None) => return Err(Error::Checkpoint("checkpoint holds no training configuration".into())),
        };
        cfg.validate()?;
        if ckpt.rng.seed != cfg.seed || ckpt.rng.stream != ckpt.iteration {
            return Err(Error::Checkpoint("checkpoint RNG state does not match its iteration".into()));
        }
        if ckpt.iteration > cfg.iterations {
            return Err(Error::Checkpoint(format!(
                "checkpoint is at iteration {} of a {}-iteration run",
                ckpt.iteration, cfg.iterations
            )));
        }
        let model = ckpt.model()?;
        let opt = match &ckpt.optimizer {
            Some(s) => Adam::from_state(model.params(), s.clone(), cfg.beta1, cfg.beta2, cfg.adam_eps)?,
            None => Adam::new(model.params(), cfg.beta1, cfg.beta2, cfg.adam_eps),
        };
        Ok(Trainer {
            model,
            cfg,
            opt,
            iteration: ckpt.iteration,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.cfg.iterations
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::from_model(&self.model);
        c.optimizer = Some(self.opt.state().clone());
        c.iteration = self.iteration;
        c.rng = RngState {
            seed: self.cfg.seed,
            stream: self.iteration,
        };
        c.train = Some(serde_json::to_value(&self.cfg)?);
        Ok(c)
    }

    /// One optimization step. A non-finite loss leaves the state untouched
    /// and returns [`Error::Diverged`].
    pub fn step(&mut self, set: &TrainingSet) -> Result<LogRow> {
        if self.is_done() {
            return Err(Error::Config("training already finished".into()));
        }
        if set.task() != self.model.config().task {
            return Err(Error::Config("training set task does not match the model".into()));
        }
        let lr = lr_schedule(self.iteration, &self.cfg)?;
        let batch = sample_batch(set, &self.cfg, self.iteration)?;
        let diverged = |loss: f64| Error::Diverged {
            iteration: self.iteration as usize + 1,
            loss,
            windows: batch.iter().map(BatchItem::describe).collect(),
        };
        let (c, mut grads) = match batch_gradients(&self.model, &batch, &self.cfg.loss, set.pattern()) {
            Err(Error::NonFinite(_)) => return Err(diverged(f64::NAN)),
            r => r?,
        };
        if !c.total.is_finite() {
            return Err(diverged(c.total));
        }
        clip_global_norm(&mut grads, self.cfg.grad_clip);
        self.opt.step(self.model.params_mut(), &grads, lr)?;
        self.iteration += 1;
        Ok(LogRow {
            iter: self.iteration,
            loss: c.total,
            mse: c.mse,
            char: c.char,
            tv: c.tv,
            lr,
        })
    }
}

/// Files written by a run.
#[derive(Clone, Debug)]
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn log(&self) -> PathBuf {
        self.dir.join(LOG_FILE)
    }

    pub fn checkpoint(&self, iteration: u64) -> PathBuf {
        self.dir.join(format!("checkpoint_{iteration:06}.tar"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.tar")
    }

    pub fn divergence(&self) -> PathBuf {
        self.dir.join(DIVERGENCE_FILE)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

fn open_log(path: &Path, append: bool) -> Result<csv::Writer<fs::File>> {
    let exists = append && path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(exists)
        .truncate(!exists)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(!exists).from_writer(file))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Runs `trainer` to the end of its schedule, logging and checkpointing into
/// `out` when given. `progress` sees every log row.
pub fn run(
    trainer: &mut Trainer,
    set: &TrainingSet,
    out: Option<&Path>,
    mut progress: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    trainer.cfg.check_patch(set)?;
    let files = out.map(|d| RunFiles { dir: d.to_path_buf() });
    let mut writer = match &files {
        Some(f) => {
            fs::create_dir_all(&f.dir).map_err(|e| Error::io(&f.dir, e))?;
            Some(open_log(&f.log(), trainer.iteration > 0)?)
        }
        None => None,
    };
    let mut log = Vec::new();
    while !trainer.is_done() {
        let row = match trainer.step(set) {
            Ok(r) => r,
            Err(e @ Error::Diverged { .. }) => {
                if let (Some(f), Error::Diverged { iteration, loss, windows }) = (&files, &e) {
                    let dump = serde_json::json!({
                        "iteration": iteration,
                        "loss": loss.to_string(),
                        "windows": windows,
                    });
                    let path = f.divergence();
                    fs::write(&path, serde_json::to_string_pretty(&dump)?).map_err(|err| Error::io(&path, err))?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if let (Some(w), Some(f)) = (writer.as_mut(), &files) {
            w.serialize(row).map_err(|e| csv_err(&f.log(), e))?;
            w.flush().map_err(|e| Error::io(f.log(), e))?;
        }
        progress(&row);
        log.push(row);
        if let Some(f) = &files {
            let every = trainer.cfg.checkpoint_every;
            if every > 0 && trainer.iteration.is_multiple_of(every) && !trainer.is_done() {
                trainer.checkpoint()?.save(&f.checkpoint(trainer.iteration))?;
            }
        }
    }
    let checkpoint = trainer.checkpoint()?;
    if let Some(f) = &files {
        checkpoint.save(&f.final_checkpoint())?;
    }
    Ok(TrainOutcome { checkpoint, log })
}

/// Trains a fresh model from `model_cfg`.
pub fn train_loop(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    set: &TrainingSet,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model_cfg, cfg)?;
    run(&mut trainer, set, out, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::{CfaPattern, Image, ProgressiveClip};

    fn clip() -> ProgressiveClip {
        let frames = (0..5)
            .map(|t| {
                Image::from_fn(8, 8, |r, c, ch| {
                    0.5 + 0.4 * ((r as f32 * 0.7 + c as f32 * 0.3 + t as f32 * 0.5 + ch as f32).sin())
                })
            })
            .collect();
        ProgressiveClip::new(frames).unwrap()
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            channels: 4,
            feature_res_blocks: 1,
            recon_depth: 1,
            deform_groups: 1,
            attention: crate::attention::AttentionConfig {
                k: crate::attention::TopK::Count(2),
                ..Default::default()
            },
            ..ModelConfig::toy(Task::Demosaic)
        }
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            iterations: 6,
            batch_size: 3,
            patch_h: 6,
            patch_w: 6,
            lr0: 1e-3,
            checkpoint_every: 2,
            seed: 11,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig { iterations: 100, ..TrainConfig::desk() };
        assert_eq!(lr_schedule(0, &cfg).unwrap(), 4e-4);
        assert!((lr_schedule(100, &cfg).unwrap() - 1e-7).abs() < 1e-18);
        assert!((lr_schedule(50, &cfg).unwrap() - (4e-4 + 1e-7) / 2.0).abs() < 1e-15);
        assert!(lr_schedule(101, &cfg).is_err());
    }

    #[test]
    fn presets() {
        let d = TrainConfig::desk();
        assert_eq!((d.iterations, d.batch_size, d.patch_h, d.patch_w), (5000, 4, 64, 80));
        assert_eq!(TrainConfig::paper(Task::Deinterlace).batch_size, 32);
        assert_eq!(TrainConfig::paper(Task::Demosaic).batch_size, 24);
        assert!(TrainConfig { iterations: 0, ..d.clone() }.validate().is_err());
    }

    #[test]
    fn batches_depend_only_on_seed_and_iteration() {
        let set = TrainingSet::new(Task::Demosaic, vec![clip()], CfaPattern::Rggb).unwrap();
        let cfg = quick();
        let a: Vec<_> = sample_batch(&set, &cfg, 3).unwrap().iter().map(|b| (b.source, b.origin)).collect();
        let b: Vec<_> = sample_batch(&set, &cfg, 3).unwrap().iter().map(|b| (b.source, b.origin)).collect();
        let c: Vec<_> = sample_batch(&set, &cfg, 4).unwrap().iter().map(|b| (b.source, b.origin)).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let set = TrainingSet::new(Task::Demosaic, vec![clip()], CfaPattern::Rggb).unwrap();
        let full = train_loop(&tiny(), &quick(), &set, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(&tiny(), &quick()).unwrap();
        for _ in 0..3 {
            t.step(&set).unwrap();
        }
        t.checkpoint().unwrap().save(&dir.path().join("mid.tar")).unwrap();
        let mut resumed = Trainer::resume(&Checkpoint::load(&dir.path().join("mid.tar")).unwrap(), None).unwrap();
        let rest = run(&mut resumed, &set, None, |_| {}).unwrap();
        assert_eq!(rest.log, full.log[3..]);
        assert_eq!(rest.checkpoint.to_bytes().unwrap(), full.checkpoint.to_bytes().unwrap());
    }

    #[test]
    fn run_writes_log_and_checkpoints() {
        let set = TrainingSet::new(Task::Deinterlace, vec![clip()], CfaPattern::Rggb).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let model = ModelConfig { task: Task::Deinterlace, ..tiny() };
        let out = train_loop(&model, &quick(), &set, Some(dir.path())).unwrap();
        let text = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "iter,loss,mse,char,tv,lr");
        assert_eq!(lines.len(), 7);
        assert!(dir.path().join("checkpoint_000002.tar").exists());
        assert!(dir.path().join("checkpoint_000004.tar").exists());
        assert_eq!(Checkpoint::load(&dir.path().join("final.tar")).unwrap(), out.checkpoint);
        assert!(out.log.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn resume_rejects_changed_config() {
        let mut t = Trainer::new(&tiny(), &quick()).unwrap();
        let set = TrainingSet::new(Task::Demosaic, vec![clip()], CfaPattern::Rggb).unwrap();
        t.step(&set).unwrap();
        let ckpt = t.checkpoint().unwrap();
        let other = TrainConfig { lr0: 1.0, ..quick() };
        assert!(Trainer::resume(&ckpt, Some(&other)).is_err());
        let cadence = TrainConfig { checkpoint_every: 0, ..quick() };
        assert!(Trainer::resume(&ckpt, Some(&cadence)).is_ok());
    }

    #[test]
    fn nan_loss_aborts_with_dump() {
        let set = TrainingSet::new(Task::Demosaic, vec![clip()], CfaPattern::Rggb).unwrap();
        let mut t = Trainer::new(&tiny(), &quick()).unwrap();
        t.model.params_mut().tensors_mut()[0].data_mut()[0] = f32::NAN;
        let dir = tempfile::tempdir().unwrap();
        let err = run(&mut t, &set, Some(dir.path()), |_| {}).unwrap_err();
        match err {
            Error::Diverged { iteration, windows, .. } => {
                assert_eq!(iteration, 1);
                assert_eq!(windows.len(), 3);
            }
            e => panic!("unexpected {e}"),
        }
        let dump = fs::read_to_string(dir.path().join(DIVERGENCE_FILE)).unwrap();
        assert!(dump.contains("\"iteration\": 1"));
        assert_eq!(t.iteration(), 0);
    }
}
