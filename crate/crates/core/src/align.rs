//! Local branch: shared feature extraction, alignment of each supporting
//! picture to the reference with DfConv blocks, and fusion of the aligned
//! features into one tensor.
//!
//! A Df layer projects an offset source through a 3×3 convolution to the
//! `2·9·G` offset channels and then applies a deformable 3×3 convolution to
//! the supporting features. The first layer takes its offsets from the
//! reference features, the second from the intermediate result.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Ops;
use crate::nn::{conv_ref, deform, residual, ConvRef};
use crate::real::Real;

/// Index of the reference picture in a five-picture window.
pub const REFERENCE: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AlignVariant {
    /// Two Df layers with Conv + ReLU refining the second offset source.
    DfConv,
    /// Two Df layers, no middle convolution.
    Df,
    /// DfConv plus a skip connection from the supporting features.
    DfRes,
}

impl AlignVariant {
    pub const ALL: [AlignVariant; 3] = [AlignVariant::DfConv, AlignVariant::Df, AlignVariant::DfRes];

    pub fn name(self) -> &'static str {
        match self {
            AlignVariant::DfConv => "DfConv",
            AlignVariant::Df => "Df",
            AlignVariant::DfRes => "DfRes",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        AlignVariant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown alignment variant '{s}'")))
    }

    pub fn has_middle_conv(self) -> bool {
        self != AlignVariant::Df
    }
}

#[derive(Debug)]
pub struct FeatureWeights<'a, V> {
    pub conv1: ConvRef<'a, V>,
    pub blocks: Vec<[ConvRef<'a, V>; 2]>,
}

#[derive(Debug)]
pub struct DfLayerWeights<'a, V> {
    pub offset: ConvRef<'a, V>,
    pub deform: ConvRef<'a, V>,
}

#[derive(Debug)]
pub struct DfConvWeights<'a, V> {
    pub first: DfLayerWeights<'a, V>,
    /// Present for DfConv and DfRes.
    pub middle: Option<ConvRef<'a, V>>,
    pub second: DfLayerWeights<'a, V>,
}

/// Conv_1 followed by the residual blocks, applied with the same weights to every picture.
pub fn extract_features<T: Real, O: Ops<T>>(
    ops: &mut O,
    pictures: &[O::V],
    w: &FeatureWeights<'_, O::V>,
) -> Result<Vec<O::V>> {
    pictures
        .iter()
        .map(|p| {
            let (_, c, _, _) = ops.value(p).dims4()?;
            if c != 3 {
                return Err(Error::Dimension(format!("pictures must have 3 channels, got {c}")));
            }
            let mut f = conv_ref(ops, p, w.conv1)?;
            for [a, b] in &w.blocks {
                f = residual(ops, &f, (a.weight, a.bias), (b.weight, b.bias))?;
            }
            Ok(f)
        })
        .collect()
}

fn df_layer<T: Real, O: Ops<T>>(
    ops: &mut O,
    offset_source: &O::V,
    fea: &O::V,
    w: &DfLayerWeights<'_, O::V>,
    groups: usize,
) -> Result<O::V> {
    let offsets = conv_ref(ops, offset_source, w.offset)?;
    deform(ops, fea, &offsets, w.deform.weight, w.deform.bias, groups)
}

/// Aligns `fea_i` to `fea_ref`.
pub fn dfconv_block<T: Real, O: Ops<T>>(
    ops: &mut O,
    fea_ref: &O::V,
    fea_i: &O::V,
    variant: AlignVariant,
    w: &DfConvWeights<'_, O::V>,
    groups: usize,
) -> Result<O::V> {
    if ops.value(fea_ref).shape() != ops.value(fea_i).shape() {
        return Err(Error::shape(ops.value(fea_ref).shape(), ops.value(fea_i).shape()));
    }
    let interm = df_layer(ops, fea_ref, fea_i, &w.first, groups)?;
    let source = match (variant.has_middle_conv(), w.middle) {
        (true, Some(mid)) => {
            let h = conv_ref(ops, &interm, mid)?;
            ops.relu(&h)?
        }
        (false, _) => interm,
        (true, None) => {
            return Err(Error::Config(format!(
                "{} block is missing its middle convolution",
                variant.name()
            )))
        }
    };
    let out = df_layer(ops, &source, fea_i, &w.second, groups)?;
    match variant {
        AlignVariant::DfRes => ops.add(&out, fea_i),
        AlignVariant::DfConv | AlignVariant::Df => Ok(out),
    }
}

/// Aligns the four supporting features; the reference passes through.
/// Supporting picture `j` (0..4 in window order, skipping the reference)
/// uses `blocks[j % blocks.len()]`.
pub fn align_all<T: Real, O: Ops<T>>(
    ops: &mut O,
    features: &[O::V],
    variant: AlignVariant,
    blocks: &[DfConvWeights<'_, O::V>],
    groups: usize,
) -> Result<Vec<O::V>> {
    if features.len() != 5 {
        return Err(Error::Dimension(format!("expected 5 features, got {}", features.len())));
    }
    if blocks.is_empty() {
        return Err(Error::Config("at least one alignment block is required".into()));
    }
    let reference = &features[REFERENCE];
    let mut support = 0;
    let mut out = Vec::with_capacity(5);
    for (i, f) in features.iter().enumerate() {
        if i == REFERENCE {
            out.push(f.clone());
        } else {
            let block = &blocks[support % blocks.len()];
            out.push(dfconv_block(ops, reference, f, variant, block, groups)?);
            support += 1;
        }
    }
    Ok(out)
}

/// Channel concatenation followed by a 1×1 convolution.
pub fn fuse_local<T: Real, O: Ops<T>>(ops: &mut O, aligned: &[O::V], w: ConvRef<'_, O::V>) -> Result<O::V> {
    if aligned.len() != 5 {
        return Err(Error::Dimension(format!("expected 5 aligned features, got {}", aligned.len())));
    }
    let refs: Vec<&O::V> = aligned.iter().collect();
    let stacked = ops.concat_channels(&refs)?;
    conv_ref(ops, &stacked, w)
}
