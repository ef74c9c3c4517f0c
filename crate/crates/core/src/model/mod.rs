//! The full network: shared feature extraction, DfConv alignment of the
//! supporting pictures, an attention branch on the raw stack, additive (or
//! concatenating) integration, indicator-routed reconstruction branches and a
//! final 3×3 convolution to RGB.
//!
//! Deinterlacing runs at field resolution; the estimated field is woven with
//! the reference field. Demosaicing predicts a full frame per channel branch;
//! observed CFA samples are copied from the centre mosaic frame.

mod assemble;
mod checkpoint;
mod params;

pub use assemble::{CfaOverwrite, WeaveRows};
pub use checkpoint::{Checkpoint, OptimizerState, RngState, CHECKPOINT_DTYPE};
pub use params::ParamSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{
    align_all, extract_features, fuse_local, AlignVariant, DfConvWeights, DfLayerWeights, FeatureWeights, REFERENCE,
};
use crate::attention::{eksa_block, AttentionConfig, AttentionVariant, AttentionWeights};
use crate::degrade::{CfaPattern, DegradedSequence, FieldParity, Image, IndicatorFlag};
use crate::error::{Error, Result};
use crate::graph::{Eager, Ops};
use crate::nn::{conv_ref, residual, unwrap_rc, ConvRef};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Deinterlace,
    Demosaic,
}

impl Task {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "deinterlace" | "interlace" => Ok(Task::Deinterlace),
            "demosaic" | "mosaic" => Ok(Task::Demosaic),
            _ => Err(Error::Config(format!("unknown task '{s}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Deinterlace => "deinterlace",
            Task::Demosaic => "demosaic",
        }
    }

    pub fn accepts(self, indicator: IndicatorFlag) -> bool {
        indicator.is_field() == (self == Task::Deinterlace)
    }

    /// Whether `seq` is the degraded input this task restores.
    pub fn matches(self, seq: &DegradedSequence) -> bool {
        matches!(
            (self, seq),
            (Task::Deinterlace, DegradedSequence::Interlaced(_)) | (Task::Demosaic, DegradedSequence::Mosaic(_))
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Fusion {
    Add,
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReconMode {
    Separate,
    Single,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub task: Task,
    pub channels: usize,
    pub feature_res_blocks: usize,
    /// Independent DfConv parameter sets; supporting picture `j` uses set `j % align_blocks`.
    pub align_blocks: usize,
    pub align_variant: AlignVariant,
    pub attention: AttentionConfig,
    pub fusion: Fusion,
    pub recon_mode: ReconMode,
    pub recon_depth: usize,
    pub deform_groups: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::paper(Task::Deinterlace)
    }
}

impl ModelConfig {
    pub fn paper(task: Task) -> Self {
        ModelConfig {
            task,
            channels: 64,
            feature_res_blocks: 5,
            align_blocks: 4,
            align_variant: AlignVariant::DfConv,
            attention: AttentionConfig::default(),
            fusion: Fusion::Add,
            recon_mode: ReconMode::Separate,
            recon_depth: 7,
            deform_groups: 8,
            seed: 0,
        }
    }

    /// 16 channels, one shared alignment block, reconstruction depth 2.
    pub fn toy(task: Task) -> Self {
        ModelConfig {
            channels: 16,
            align_blocks: 1,
            recon_depth: 2,
            deform_groups: 2,
            attention: AttentionConfig {
                k: crate::attention::TopK::Count(8),
                ..AttentionConfig::default()
            },
            ..ModelConfig::paper(task)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        if self.deform_groups == 0 || !self.channels.is_multiple_of(self.deform_groups) {
            return Err(Error::Config(format!(
                "deform_groups = {} must divide channels = {}",
                self.deform_groups, self.channels
            )));
        }
        if self.align_blocks == 0 {
            return Err(Error::Config("align_blocks must be at least 1".into()));
        }
        if self.attention.variant == AttentionVariant::Eksa {
            self.attention.k.resolve(self.channels, "EkSA")?;
        }
        if !self.attention.scale_init.is_finite() {
            return Err(Error::Config("attention.scale_init must be finite".into()));
        }
        Ok(())
    }

    pub fn branch_names(&self) -> &'static [&'static str] {
        match (self.recon_mode, self.task) {
            (ReconMode::Single, _) => &["shared"],
            (ReconMode::Separate, Task::Deinterlace) => &["even", "odd"],
            (ReconMode::Separate, Task::Demosaic) => &["r", "g", "b"],
        }
    }

    /// Reconstruction branch selected by `indicator`.
    pub fn branch_for(&self, indicator: IndicatorFlag) -> Result<usize> {
        if !self.task.accepts(indicator) {
            return Err(Error::Config(format!(
                "indicator '{}' does not apply to {}",
                indicator.name(),
                self.task.name()
            )));
        }
        Ok(match (self.recon_mode, indicator) {
            (ReconMode::Single, _) => 0,
            (_, IndicatorFlag::EvenField | IndicatorFlag::ChannelR) => 0,
            (_, IndicatorFlag::OddField | IndicatorFlag::ChannelG) => 1,
            (_, IndicatorFlag::ChannelB) => 2,
        })
    }
}

/// Position of a convolution's weight in the parameter list; its bias follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvIdx(usize);

impl ConvIdx {
    fn at<V>(self, vars: &[V]) -> ConvRef<'_, V> {
        ConvRef::new(&vars[self.0], &vars[self.0 + 1])
    }
}

#[derive(Clone, Debug, PartialEq)]
struct AlignIdx {
    offset1: ConvIdx,
    deform1: ConvIdx,
    middle: Option<ConvIdx>,
    offset2: ConvIdx,
    deform2: ConvIdx,
}

#[derive(Clone, Debug, PartialEq)]
struct AttentionIdx {
    stem: [ConvIdx; 2],
    query: ConvIdx,
    key: ConvIdx,
    value: ConvIdx,
    out: ConvIdx,
    scale: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct ModelLayout {
    conv1: ConvIdx,
    feature_blocks: Vec<[ConvIdx; 2]>,
    align: Vec<AlignIdx>,
    fuse: ConvIdx,
    attention: Option<AttentionIdx>,
    integrate: Option<ConvIdx>,
    recon: Vec<Vec<[ConvIdx; 2]>>,
    conv_out: ConvIdx,
}

/// Collects named parameters; without an RNG every tensor is zero.
struct Builder {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
    rng: Option<ChaCha8Rng>,
}

impl Builder {
    /// Uniform in `±1/√fan_in` for weights and biases; `zero` forces zeros.
    fn conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize, zero: bool) -> ConvIdx {
        let idx = ConvIdx(self.tensors.len());
        let bound = 1.0 / ((c_in * k * k) as f32).sqrt();
        for (suffix, shape) in [("weight", vec![c_out, c_in, k, k]), ("bias", vec![c_out])] {
            let t = match (&mut self.rng, zero) {
                (Some(rng), false) => Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound)),
                _ => Tensor::zeros(&shape),
            };
            self.names.push(format!("{name}.{suffix}"));
            self.tensors.push(t);
        }
        idx
    }

    fn scalar(&mut self, name: &str, value: f32) -> usize {
        self.names.push(name.to_string());
        self.tensors.push(Tensor::scalar(value));
        self.tensors.len() - 1
    }

    fn res_block(&mut self, prefix: &str, c: usize) -> [ConvIdx; 2] {
        [
            self.conv(&format!("{prefix}.conv1"), c, c, 3, false),
            self.conv(&format!("{prefix}.conv2"), c, c, 3, false),
        ]
    }
}

fn lay_out(cfg: &ModelConfig, b: &mut Builder) -> ModelLayout {
    let c = cfg.channels;
    let off = 2 * 9 * cfg.deform_groups;
    let conv1 = b.conv("feat.conv1", c, 3, 3, false);
    let feature_blocks = (0..cfg.feature_res_blocks)
        .map(|i| b.res_block(&format!("feat.block{i}"), c))
        .collect();
    let align = (0..cfg.align_blocks)
        .map(|j| {
            let p = format!("align{j}");
            AlignIdx {
                offset1: b.conv(&format!("{p}.offset1"), off, c, 3, true),
                deform1: b.conv(&format!("{p}.deform1"), c, c, 3, false),
                middle: cfg
                    .align_variant
                    .has_middle_conv()
                    .then(|| b.conv(&format!("{p}.middle"), c, c, 3, false)),
                offset2: b.conv(&format!("{p}.offset2"), off, c, 3, true),
                deform2: b.conv(&format!("{p}.deform2"), c, c, 3, false),
            }
        })
        .collect();
    let fuse = b.conv("fuse", c, 5 * c, 1, false);
    let attention = (cfg.attention.variant != AttentionVariant::None).then(|| AttentionIdx {
        stem: [b.conv("attn.stem1", c, 15, 3, false), b.conv("attn.stem2", c, c, 3, false)],
        query: b.conv("attn.query", c, c, 1, false),
        key: b.conv("attn.key", c, c, 1, false),
        value: b.conv("attn.value", c, c, 1, false),
        out: b.conv("attn.out", c, c, 1, false),
        scale: b.scalar("attn.scale", cfg.attention.scale_init as f32),
    });
    let integrate = (attention.is_some() && cfg.fusion == Fusion::Concat)
        .then(|| b.conv("integrate", c, 2 * c, 1, false));
    let recon = cfg
        .branch_names()
        .iter()
        .map(|name| {
            (0..cfg.recon_depth)
                .map(|i| b.res_block(&format!("recon.{name}.block{i}"), c))
                .collect()
        })
        .collect();
    let conv_out = b.conv("conv_out", 3, c, 3, false);
    ModelLayout {
        conv1,
        feature_blocks,
        align,
        fuse,
        attention,
        integrate,
        recon,
        conv_out,
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    layout: ModelLayout,
    params: ParamSet,
}

/// Builds a freshly initialized model, deterministic in `cfg.seed`.
pub fn build_model(cfg: &ModelConfig) -> Result<(Model, usize)> {
    cfg.validate()?;
    let mut b = Builder {
        names: Vec::new(),
        tensors: Vec::new(),
        rng: Some(ChaCha8Rng::seed_from_u64(cfg.seed)),
    };
    let layout = lay_out(cfg, &mut b);
    let params = ParamSet::new(b.names, b.tensors)?;
    let count = params.count();
    Ok((
        Model {
            config: cfg.clone(),
            layout,
            params,
        },
        count,
    ))
}

/// `N×3×H×W` batch from HWC images of equal size.
pub fn images_to_tensor(images: &[&Image]) -> Result<Tensor<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Dimension("no images to stack".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::Dimension("images in a batch differ in size".into()));
        }
        for ch in 0..3 {
            data.extend(img.data().iter().skip(ch).step_by(3));
        }
    }
    Tensor::from_vec(&[images.len(), 3, h, w], data)
}

pub fn tensor_to_images(t: &Tensor<f32>) -> Result<Vec<Image>> {
    let (n, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::Dimension(format!("expected 3 channels, got {c}")));
    }
    (0..n)
        .map(|b| {
            let planes = t.batch(b);
            Ok(Image::from_fn(h, w, |r, col, ch| planes[(ch * h + r) * w + col]))
        })
        .collect()
}

/// Eager assembly with the inference-time clamp to `[0, 1]`.
pub fn assemble_output(
    recon_rgb: &Tensor<f32>,
    reference: &Tensor<f32>,
    indicator: IndicatorFlag,
    pattern: CfaPattern,
) -> Result<Tensor<f32>> {
    let mut e = Eager;
    let (r, f) = (e.constant(recon_rgb.clone()), e.constant(reference.clone()));
    let out = assemble(&mut e, &r, &f, indicator, pattern)?;
    Ok(unwrap_rc(out).map(|v| v.clamp(0.0, 1.0)))
}

fn assemble<T: Real, O: Ops<T>>(
    ops: &mut O,
    recon_rgb: &O::V,
    reference: &O::V,
    indicator: IndicatorFlag,
    pattern: CfaPattern,
) -> Result<O::V> {
    match indicator {
        IndicatorFlag::EvenField => ops.apply(WeaveRows { known: FieldParity::Odd }, &[reference, recon_rgb]),
        IndicatorFlag::OddField => ops.apply(WeaveRows { known: FieldParity::Even }, &[reference, recon_rgb]),
        _ => ops.apply(CfaOverwrite { pattern }, &[recon_rgb, reference]),
    }
}

impl Model {
    /// Wraps existing parameters, checking names and shapes against `cfg`.
    pub fn from_params(cfg: &ModelConfig, params: ParamSet) -> Result<Model> {
        cfg.validate()?;
        let mut b = Builder {
            names: Vec::new(),
            tensors: Vec::new(),
            rng: None,
        };
        let layout = lay_out(cfg, &mut b);
        if b.names != params.names() {
            return Err(Error::Checkpoint(
                "parameter names do not match the model configuration".into(),
            ));
        }
        for ((name, expected), actual) in b.names.iter().zip(&b.tensors).zip(params.tensors()) {
            if expected.shape() != actual.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, configuration needs {:?}",
                    actual.shape(),
                    expected.shape()
                )));
            }
        }
        Ok(Model {
            config: cfg.clone(),
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Registers every parameter with `ops`, in parameter-list order.
    pub fn bind<O: Ops<f32>>(&self, ops: &mut O) -> Vec<O::V> {
        self.params.tensors().iter().map(|t| ops.parameter(t)).collect()
    }

    fn check_inputs<T: Real, O: Ops<T>>(&self, ops: &O, inputs: &[O::V]) -> Result<()> {
        if inputs.len() != 5 {
            return Err(Error::Dimension(format!("model takes 5 pictures, got {}", inputs.len())));
        }
        let shape = ops.value(&inputs[0]).shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Dimension(format!("pictures must be N×3×h×w, got {shape:?}")));
        }
        for p in &inputs[1..] {
            if ops.value(p).shape() != shape.as_slice() {
                return Err(Error::shape(&shape, ops.value(p).shape()));
            }
        }
        Ok(())
    }

    /// Local branch, attention branch and their integration.
    pub fn integrated<T: Real, O: Ops<T>>(&self, ops: &mut O, vars: &[O::V], inputs: &[O::V]) -> Result<O::V> {
        self.check_inputs(ops, inputs)?;
        let l = &self.layout;
        let fw = FeatureWeights {
            conv1: l.conv1.at(vars),
            blocks: l.feature_blocks.iter().map(|[a, b]| [a.at(vars), b.at(vars)]).collect(),
        };
        let features = extract_features(ops, inputs, &fw)?;
        let blocks: Vec<DfConvWeights<'_, O::V>> = l
            .align
            .iter()
            .map(|a| DfConvWeights {
                first: DfLayerWeights {
                    offset: a.offset1.at(vars),
                    deform: a.deform1.at(vars),
                },
                middle: a.middle.map(|m| m.at(vars)),
                second: DfLayerWeights {
                    offset: a.offset2.at(vars),
                    deform: a.deform2.at(vars),
                },
            })
            .collect();
        let aligned = align_all(ops, &features, self.config.align_variant, &blocks, self.config.deform_groups)?;
        drop(features);
        let local = fuse_local(ops, &aligned, l.fuse.at(vars))?;
        let Some(a) = &l.attention else {
            return Ok(local);
        };
        let aw = AttentionWeights {
            stem: [a.stem[0].at(vars), a.stem[1].at(vars)],
            query: a.query.at(vars),
            key: a.key.at(vars),
            value: a.value.at(vars),
            out: a.out.at(vars),
            scale: &vars[a.scale],
        };
        let global = eksa_block(ops, inputs, &self.config.attention, &aw)?;
        match l.integrate {
            None => ops.add(&local, &global),
            Some(c) => {
                let both = ops.concat_channels(&[&local, &global])?;
                conv_ref(ops, &both, c.at(vars))
            }
        }
    }

    /// The reconstruction branch selected by `indicator`, before Conv_out.
    pub fn route_recon<T: Real, O: Ops<T>>(
        &self,
        ops: &mut O,
        vars: &[O::V],
        fea: &O::V,
        indicator: IndicatorFlag,
    ) -> Result<O::V> {
        let branch = self.config.branch_for(indicator)?;
        self.branch_features(ops, vars, fea, branch)
    }

    fn branch_features<T: Real, O: Ops<T>>(&self, ops: &mut O, vars: &[O::V], fea: &O::V, branch: usize) -> Result<O::V> {
        let mut h = fea.clone();
        for [a, b] in &self.layout.recon[branch] {
            let (a, b) = (a.at(vars), b.at(vars));
            h = residual(ops, &h, (a.weight, a.bias), (b.weight, b.bias))?;
        }
        Ok(h)
    }

    /// Branch output mapped to RGB by Conv_out.
    pub fn branch_rgb<T: Real, O: Ops<T>>(&self, ops: &mut O, vars: &[O::V], fea: &O::V, branch: usize) -> Result<O::V> {
        let h = self.branch_features(ops, vars, fea, branch)?;
        conv_ref(ops, &h, self.layout.conv_out.at(vars))
    }

    /// Full differentiable pass: the assembled frame, not clamped.
    pub fn forward<T: Real, O: Ops<T>>(
        &self,
        ops: &mut O,
        vars: &[O::V],
        inputs: &[O::V],
        indicator: IndicatorFlag,
        pattern: CfaPattern,
    ) -> Result<O::V> {
        let branch = self.config.branch_for(indicator)?;
        let fea = self.integrated(ops, vars, inputs)?;
        let rgb = self.branch_rgb(ops, vars, &fea, branch)?;
        assemble(ops, &rgb, &inputs[REFERENCE], indicator, pattern)
    }

    /// Inference on one window of degraded pictures, clamped to `[0, 1]`.
    pub fn predict(&self, inputs: &[Image], indicator: IndicatorFlag, pattern: CfaPattern) -> Result<Image> {
        let mut e = Eager;
        let vars = self.bind(&mut e);
        let pics = inputs
            .iter()
            .map(|p| Ok(e.constant(images_to_tensor(&[p])?)))
            .collect::<Result<Vec<_>>>()?;
        let out = self.forward(&mut e, &vars, &pics, indicator, pattern)?;
        let out = unwrap_rc(out).map(|v| v.clamp(0.0, 1.0));
        Ok(tensor_to_images(&out)?.remove(0))
    }

    /// Reconstructs frame `n`. Demosaicing takes channel `c` from the branch for channel `c`.
    pub fn restore_frame(&self, seq: &DegradedSequence, n: usize) -> Result<Image> {
        let idx = crate::degrade::window_indices(seq.len(), n)?;
        let window: Vec<Image> = idx.iter().map(|&i| seq.pictures()[i].clone()).collect();
        match seq {
            DegradedSequence::Interlaced(s) => {
                if self.config.task != Task::Deinterlace {
                    return Err(Error::Config("model is not a deinterlacing model".into()));
                }
                self.predict(&window, IndicatorFlag::missing_field(s.parities[n]), CfaPattern::default())
            }
            DegradedSequence::Mosaic(s) => {
                if self.config.task != Task::Demosaic {
                    return Err(Error::Config("model is not a demosaicing model".into()));
                }
                self.demosaic_window(&window, s.pattern)
            }
        }
    }

    fn demosaic_window(&self, window: &[Image], pattern: CfaPattern) -> Result<Image> {
        let mut e = Eager;
        let vars = self.bind(&mut e);
        let pics = window
            .iter()
            .map(|p| Ok(e.constant(images_to_tensor(&[p])?)))
            .collect::<Result<Vec<_>>>()?;
        let fea = self.integrated(&mut e, &vars, &pics)?;
        let (h, w) = (window[0].height(), window[0].width());
        let mut combined = Tensor::zeros(&[1, 3, h, w]);
        let mut cache: Vec<Option<std::rc::Rc<Tensor<f32>>>> = vec![None; self.config.branch_names().len()];
        for ch in 0..3 {
            let branch = self.config.branch_for(IndicatorFlag::channel(ch).expect("RGB channel"))?;
            if cache[branch].is_none() {
                cache[branch] = Some(self.branch_rgb(&mut e, &vars, &fea, branch)?);
            }
            let rgb = cache[branch].as_ref().expect("cached branch");
            combined.data_mut()[ch * h * w..(ch + 1) * h * w].copy_from_slice(&rgb.data()[ch * h * w..(ch + 1) * h * w]);
        }
        let out = assemble_output(&combined, &pics[REFERENCE], IndicatorFlag::ChannelR, pattern)?;
        Ok(tensor_to_images(&out)?.remove(0))
    }

    pub fn restore_sequence(&self, seq: &DegradedSequence) -> Result<Vec<Image>> {
        (0..seq.len()).map(|n| self.restore_frame(seq, n)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::{interlace, mosaic, ProgressiveClip};
    use crate::graph::Graph;

    fn conv_count(c_out: usize, c_in: usize, k: usize) -> usize {
        c_out * c_in * k * k + c_out
    }

    /// Layer-by-layer count, independent of the builder.
    fn analytic_count(cfg: &ModelConfig) -> usize {
        let c = cfg.channels;
        let block = 2 * conv_count(c, c, 3);
        let features = conv_count(c, 3, 3) + cfg.feature_res_blocks * block;
        let off = conv_count(18 * cfg.deform_groups, c, 3);
        let mid = if cfg.align_variant.has_middle_conv() { conv_count(c, c, 3) } else { 0 };
        let align = cfg.align_blocks * (2 * off + 2 * conv_count(c, c, 3) + mid);
        let fuse = conv_count(c, 5 * c, 1);
        let attn = if cfg.attention.variant == AttentionVariant::None {
            0
        } else {
            conv_count(c, 15, 3) + conv_count(c, c, 3) + 4 * conv_count(c, c, 1) + 1
        };
        let integrate = if attn > 0 && cfg.fusion == Fusion::Concat { conv_count(c, 2 * c, 1) } else { 0 };
        let recon = cfg.branch_names().len() * cfg.recon_depth * block;
        features + align + fuse + attn + integrate + recon + conv_count(3, c, 3)
    }

    #[test]
    fn parameter_counts_match_analytic_sum() {
        for cfg in [
            ModelConfig::paper(Task::Deinterlace),
            ModelConfig::paper(Task::Demosaic),
            ModelConfig::toy(Task::Deinterlace),
            ModelConfig::toy(Task::Demosaic),
            ModelConfig {
                fusion: Fusion::Concat,
                align_variant: AlignVariant::Df,
                recon_mode: ReconMode::Single,
                recon_depth: 14,
                ..ModelConfig::toy(Task::Demosaic)
            },
        ] {
            let (model, count) = build_model(&cfg).unwrap();
            assert_eq!(count, analytic_count(&cfg), "{cfg:?}");
            assert_eq!(model.parameter_count(), count);
        }
        assert_eq!(build_model(&ModelConfig::paper(Task::Deinterlace)).unwrap().1, 2_597_444);
        assert_eq!(build_model(&ModelConfig::paper(Task::Demosaic)).unwrap().1, 3_114_436);
    }

    #[test]
    fn construction_is_deterministic_and_seeded() {
        let cfg = ModelConfig::toy(Task::Deinterlace);
        let a = build_model(&cfg).unwrap().0;
        let b = build_model(&cfg).unwrap().0;
        assert_eq!(a.params(), b.params());
        let c = build_model(&ModelConfig { seed: 1, ..cfg }).unwrap().0;
        assert_ne!(a.params(), c.params());
        assert!(a.params().get("align0.offset1.weight").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad_groups = ModelConfig { deform_groups: 3, ..ModelConfig::toy(Task::Deinterlace) };
        assert!(build_model(&bad_groups).is_err());
        let bad_k = ModelConfig::paper(Task::Deinterlace);
        let bad_k = ModelConfig { channels: 32, deform_groups: 8, ..bad_k };
        assert!(matches!(build_model(&bad_k), Err(Error::Config(_))));
        let cfg = ModelConfig::toy(Task::Deinterlace);
        assert!(cfg.branch_for(IndicatorFlag::ChannelG).is_err());
    }

    fn clip(h: usize, w: usize) -> ProgressiveClip {
        let frames = (0..5)
            .map(|t| Image::from_fn(h, w, |r, c, ch| ((t + r * 3 + c * 5 + ch * 7) % 13) as f32 / 12.0))
            .collect();
        ProgressiveClip::new(frames).unwrap()
    }

    #[test]
    fn deinterlace_forward_weaves_reference_rows() {
        let (model, _) = build_model(&ModelConfig::toy(Task::Deinterlace)).unwrap();
        let seq = DegradedSequence::Interlaced(interlace(&clip(8, 10), FieldParity::Odd).unwrap());
        let out = model.restore_frame(&seq, 2).unwrap();
        assert_eq!((out.height(), out.width()), (8, 10));
        let field = &seq.pictures()[2];
        for r in 0..4 {
            assert_eq!(out.row(2 * r), field.row(r));
        }
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn demosaic_forward_keeps_observed_samples() {
        let (model, _) = build_model(&ModelConfig::toy(Task::Demosaic)).unwrap();
        let seq = DegradedSequence::Mosaic(mosaic(&clip(6, 8), CfaPattern::Rggb).unwrap());
        let out = model.restore_frame(&seq, 0).unwrap();
        let m = &seq.pictures()[0];
        for r in 0..6 {
            for c in 0..8 {
                let ch = CfaPattern::Rggb.channel_at(r, c);
                assert_eq!(out.get(r, c, ch), m.get(r, c, ch));
            }
        }
    }

    #[test]
    fn attention_none_and_routing_gradients() {
        let cfg = ModelConfig {
            attention: AttentionConfig { variant: AttentionVariant::None, ..Default::default() },
            ..ModelConfig::toy(Task::Deinterlace)
        };
        let (model, _) = build_model(&cfg).unwrap();
        assert!(model.params().get("attn.scale").is_none());
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let inputs: Vec<_> = (0..5)
            .map(|i| g.constant(Tensor::from_fn(&[1, 3, 4, 6], |j| ((i * 31 + j) % 7) as f32 / 7.0)))
            .collect();
        let out = model.forward(&mut g, &vars, &inputs, IndicatorFlag::EvenField, CfaPattern::Rggb).unwrap();
        assert_eq!(g.value(&out).shape(), &[1, 3, 8, 6]);
        let loss = g.sum(out).unwrap();
        let grads = g.backward(loss).unwrap();
        let grad_of = |name: &str| {
            let i = model.params().names().iter().position(|n| n == name).unwrap();
            grads.get(vars[i]).map_or(0.0, |t| t.data().iter().map(|v| v.abs()).sum::<f32>())
        };
        assert!(grad_of("recon.even.block0.conv2.weight") > 0.0);
        assert_eq!(grad_of("recon.odd.block0.conv2.weight"), 0.0);
    }

    #[test]
    fn image_tensor_round_trip() {
        let img = Image::from_fn(3, 4, |r, c, ch| (r * 12 + c * 3 + ch) as f32 / 36.0);
        let t = images_to_tensor(&[&img]).unwrap();
        assert_eq!(t.shape(), &[1, 3, 3, 4]);
        assert_eq!(t.data()[12], img.get(0, 0, 1));
        assert_eq!(tensor_to_images(&t).unwrap()[0], img);
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = ModelConfig::toy(Task::Demosaic);
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<ModelConfig>(&text).unwrap(), cfg);
        assert!(toml::from_str::<ModelConfig>("chanels = 3").is_err());
    }
}
