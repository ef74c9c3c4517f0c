//! Fixed forward models: field interlacing and Bayer mosaicing, the inverse
//! weave, and assembly of five-picture training windows.
//!
//! Row convention: the odd field holds 0-based rows `{0, 2, 4, ...}` (1-based
//! odd scan lines) and the even field holds rows `{1, 3, 5, ...}`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One RGB picture, `height × width × 3`, interleaved (HWC), intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Dimension(format!(
                "{height}×{width}×3 image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..3 {
                    data.push(f(r, c, ch));
                }
            }
        }
        Image {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * 3 + ch]
    }

    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f32) {
        self.data[(row * self.width + col) * 3 + ch] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.width * 3..(r + 1) * self.width * 3]
    }

    /// Copy of the `h × w` window starting at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Image> {
        if top + h > self.height || left + w > self.width {
            return Err(Error::Dimension(format!(
                "crop {h}×{w} at ({top},{left}) exceeds {}×{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w * 3);
        for r in top..top + h {
            data.extend_from_slice(&self.data[(r * self.width + left) * 3..(r * self.width + left + w) * 3]);
        }
        Image::new(h, w, data)
    }

    fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldParity {
    /// 0-based rows 0, 2, 4, ...
    Odd,
    /// 0-based rows 1, 3, 5, ...
    Even,
}

impl FieldParity {
    pub fn flip(self) -> Self {
        match self {
            FieldParity::Odd => FieldParity::Even,
            FieldParity::Even => FieldParity::Odd,
        }
    }

    /// First 0-based frame row belonging to this field.
    pub fn first_row(self) -> usize {
        match self {
            FieldParity::Odd => 0,
            FieldParity::Even => 1,
        }
    }

    /// Parity of field `t` in a sequence starting with `self`.
    pub fn at(self, t: usize) -> Self {
        if t.is_multiple_of(2) {
            self
        } else {
            self.flip()
        }
    }
}

/// 2×2 Bayer phase. The name lists the colors of `(0,0), (0,1), (1,0), (1,1)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CfaPattern {
    #[default]
    Rggb,
    Bggr,
    Grbg,
    Gbrg,
}

impl CfaPattern {
    pub fn parse(id: &str) -> Result<Self> {
        match id.to_ascii_lowercase().as_str() {
            "rggb" => Ok(CfaPattern::Rggb),
            "bggr" => Ok(CfaPattern::Bggr),
            "grbg" => Ok(CfaPattern::Grbg),
            "gbrg" => Ok(CfaPattern::Gbrg),
            other => Err(Error::Config(format!("unknown CFA pattern '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CfaPattern::Rggb => "rggb",
            CfaPattern::Bggr => "bggr",
            CfaPattern::Grbg => "grbg",
            CfaPattern::Gbrg => "gbrg",
        }
    }

    /// Channel index (0 = R, 1 = G, 2 = B) sampled at `(row, col)`.
    pub fn channel_at(self, row: usize, col: usize) -> usize {
        let tile = match self {
            CfaPattern::Rggb => [0, 1, 1, 2],
            CfaPattern::Bggr => [2, 1, 1, 0],
            CfaPattern::Grbg => [1, 0, 2, 1],
            CfaPattern::Gbrg => [1, 2, 0, 1],
        };
        tile[(row % 2) * 2 + col % 2]
    }
}

/// Ground-truth progressive video.
#[derive(Clone, Debug, PartialEq)]
pub struct ProgressiveClip {
    pub frames: Vec<Image>,
    pub frame_rate: Option<f64>,
}

impl ProgressiveClip {
    pub fn new(frames: Vec<Image>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Dimension("clip needs at least one frame".into()))?;
        if frames.iter().any(|f| !f.same_shape(first)) {
            return Err(Error::Dimension("clip frames differ in size".into()));
        }
        if frames.iter().any(|f| f.data.iter().any(|v| !(0.0..=1.0).contains(v))) {
            return Err(Error::Dimension("clip values must lie in [0, 1]".into()));
        }
        Ok(ProgressiveClip {
            frames,
            frame_rate: None,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    /// Adds zero-mean Gaussian observation noise, clamped to `[0, 1]`. Off unless called.
    pub fn with_noise(&self, sigma: f32, rng: &mut impl Rng) -> Result<ProgressiveClip> {
        let normal = Normal::new(0.0f32, sigma)
            .map_err(|e| Error::Config(format!("noise sigma {sigma}: {e}")))?;
        let frames = self
            .frames
            .iter()
            .map(|f| {
                let mut f = f.clone();
                f.data
                    .iter_mut()
                    .for_each(|v| *v = (*v + normal.sample(rng)).clamp(0.0, 1.0));
                f
            })
            .collect();
        Ok(ProgressiveClip {
            frames,
            frame_rate: self.frame_rate,
        })
    }

    /// Smooth translating colour gratings, deterministic in `seed`.
    pub fn synthetic(frames: usize, height: usize, width: usize, seed: u64) -> Result<ProgressiveClip> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(Error::Dimension("synthetic clip needs positive dimensions".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tau = std::f32::consts::TAU;
        let waves: Vec<[f32; 9]> = (0..3)
            .map(|_| {
                let mut w = [0.0f32; 9];
                w[0] = rng.random_range(0.02..0.08) * tau;
                w[1] = rng.random_range(0.02..0.08) * tau;
                w[2] = rng.random_range(-1.0..1.0);
                w[3] = rng.random_range(-1.0..1.0);
                for p in &mut w[4..7] {
                    *p = rng.random_range(0.0..tau);
                }
                w[7] = rng.random_range(0.08..0.14);
                w[8] = rng.random_range(0.0..tau);
                w
            })
            .collect();
        let frames = (0..frames)
            .map(|t| {
                Image::from_fn(height, width, |r, c, ch| {
                    let s: f32 = waves
                        .iter()
                        .map(|w| {
                            let (y, x) = (r as f32 - w[2] * t as f32, c as f32 - w[3] * t as f32);
                            w[7] * (w[0] * y + w[1] * x + w[4 + ch] + 0.3 * (w[8] + 0.5 * w[0] * x).sin()).sin()
                        })
                        .sum();
                    (0.5 + s).clamp(0.0, 1.0)
                })
            })
            .collect();
        ProgressiveClip::new(frames)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterlacedSequence {
    pub fields: Vec<Image>,
    pub parities: Vec<FieldParity>,
    pub source_height: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MosaicSequence {
    pub frames: Vec<Image>,
    pub pattern: CfaPattern,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DegradedSequence {
    Interlaced(InterlacedSequence),
    Mosaic(MosaicSequence),
}

impl DegradedSequence {
    pub fn len(&self) -> usize {
        match self {
            DegradedSequence::Interlaced(s) => s.fields.len(),
            DegradedSequence::Mosaic(s) => s.frames.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pictures(&self) -> &[Image] {
        match self {
            DegradedSequence::Interlaced(s) => &s.fields,
            DegradedSequence::Mosaic(s) => &s.frames,
        }
    }
}

/// Which pattern of missing data a reconstruction targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IndicatorFlag {
    EvenField,
    OddField,
    ChannelR,
    ChannelG,
    ChannelB,
}

impl IndicatorFlag {
    /// Indicator naming the field that is missing when `present` is observed.
    pub fn missing_field(present: FieldParity) -> Self {
        match present {
            FieldParity::Odd => IndicatorFlag::EvenField,
            FieldParity::Even => IndicatorFlag::OddField,
        }
    }

    pub fn channel(ch: usize) -> Option<Self> {
        match ch {
            0 => Some(IndicatorFlag::ChannelR),
            1 => Some(IndicatorFlag::ChannelG),
            2 => Some(IndicatorFlag::ChannelB),
            _ => None,
        }
    }

    pub fn is_field(self) -> bool {
        matches!(self, IndicatorFlag::EvenField | IndicatorFlag::OddField)
    }

    pub fn name(self) -> &'static str {
        match self {
            IndicatorFlag::EvenField => "even",
            IndicatorFlag::OddField => "odd",
            IndicatorFlag::ChannelR => "r",
            IndicatorFlag::ChannelG => "g",
            IndicatorFlag::ChannelB => "b",
        }
    }
}

/// Keeps rows of alternating parity from consecutive frames.
pub fn interlace(clip: &ProgressiveClip, first_parity: FieldParity) -> Result<InterlacedSequence> {
    let h = clip.height();
    if !h.is_multiple_of(2) {
        return Err(Error::Dimension(format!("interlacing needs an even height, got {h}")));
    }
    let mut fields = Vec::with_capacity(clip.len());
    let mut parities = Vec::with_capacity(clip.len());
    for (t, frame) in clip.frames.iter().enumerate() {
        let parity = first_parity.at(t);
        fields.push(extract_field(frame, parity)?);
        parities.push(parity);
    }
    Ok(InterlacedSequence {
        fields,
        parities,
        source_height: h,
    })
}

/// The `H/2` rows of `frame` belonging to `parity`.
pub fn extract_field(frame: &Image, parity: FieldParity) -> Result<Image> {
    if !frame.height.is_multiple_of(2) {
        return Err(Error::Dimension(format!(
            "field extraction needs an even height, got {}",
            frame.height
        )));
    }
    let mut data = Vec::with_capacity(frame.data.len() / 2);
    for r in (parity.first_row()..frame.height).step_by(2) {
        data.extend_from_slice(frame.row(r));
    }
    Image::new(frame.height / 2, frame.width, data)
}

/// Zeroes every channel value not sampled by `pattern`.
pub fn mosaic(clip: &ProgressiveClip, pattern: CfaPattern) -> Result<MosaicSequence> {
    let frames = clip
        .frames
        .iter()
        .map(|f| mosaic_frame(f, pattern))
        .collect::<Result<Vec<_>>>()?;
    Ok(MosaicSequence { frames, pattern })
}

pub fn mosaic_frame(frame: &Image, pattern: CfaPattern) -> Result<Image> {
    if !frame.height.is_multiple_of(2) || !frame.width.is_multiple_of(2) {
        return Err(Error::Dimension(format!(
            "mosaicing needs even dimensions, got {}×{}",
            frame.height, frame.width
        )));
    }
    let mut out = Image::zeros(frame.height, frame.width);
    for r in 0..frame.height {
        for c in 0..frame.width {
            let ch = pattern.channel_at(r, c);
            out.set(r, c, ch, frame.get(r, c, ch));
        }
    }
    Ok(out)
}

/// Interleaves a known field with an estimate of its complement.
pub fn weave(known: &Image, estimated: &Image, known_parity: FieldParity) -> Result<Image> {
    if !known.same_shape(estimated) {
        return Err(Error::Dimension(format!(
            "weave of {}×{} and {}×{} fields",
            known.height, known.width, estimated.height, estimated.width
        )));
    }
    let (odd, even) = match known_parity {
        FieldParity::Odd => (known, estimated),
        FieldParity::Even => (estimated, known),
    };
    let mut data = Vec::with_capacity(known.data.len() * 2);
    for r in 0..known.height {
        data.extend_from_slice(odd.row(r));
        data.extend_from_slice(even.row(r));
    }
    Image::new(known.height * 2, known.width, data)
}

/// Degradation task selected when synthesizing data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegradeTask {
    Interlace,
    Mosaic,
}

/// Indices of the five pictures centered on `n`, replicated at sequence ends.
pub fn window_indices(len: usize, n: usize) -> Result<[usize; 5]> {
    if n >= len {
        return Err(Error::Index { index: n, len });
    }
    let clamp = |d: isize| (n as isize + d).clamp(0, len as isize - 1) as usize;
    Ok([clamp(-2), clamp(-1), n, clamp(1), clamp(2)])
}

/// Five degraded pictures, the indicator of what is missing, and the ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingWindow {
    pub inputs: Vec<Image>,
    pub indices: [usize; 5],
    pub indicator: IndicatorFlag,
    pub target: Image,
}

/// Builds the windows for frame `n`. Deinterlacing yields one window (the
/// field missing at `n`); demosaicing yields one per target channel.
pub fn make_training_window(
    seq: &DegradedSequence,
    clip: &ProgressiveClip,
    n: usize,
) -> Result<Vec<TrainingWindow>> {
    if clip.len() != seq.len() {
        return Err(Error::Dimension(format!(
            "sequence has {} pictures but the clip has {} frames",
            seq.len(),
            clip.len()
        )));
    }
    let indices = window_indices(seq.len(), n)?;
    let inputs: Vec<Image> = indices.iter().map(|&i| seq.pictures()[i].clone()).collect();
    let target = clip.frames[n].clone();
    let indicators: Vec<IndicatorFlag> = match seq {
        DegradedSequence::Interlaced(s) => vec![IndicatorFlag::missing_field(s.parities[n])],
        DegradedSequence::Mosaic(_) => vec![
            IndicatorFlag::ChannelR,
            IndicatorFlag::ChannelG,
            IndicatorFlag::ChannelB,
        ],
    };
    Ok(indicators
        .into_iter()
        .map(|indicator| TrainingWindow {
            inputs: inputs.clone(),
            indices,
            indicator,
            target: target.clone(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_clip(t: usize, h: usize, w: usize) -> ProgressiveClip {
        let frames = (0..t)
            .map(|k| {
                Image::from_fn(h, w, |r, c, ch| {
                    ((k * 7 + r * 5 + c * 3 + ch) % 11) as f32 / 10.0
                })
            })
            .collect();
        ProgressiveClip::new(frames).unwrap()
    }

    #[test]
    fn interlace_takes_alternating_rows() {
        let clip = ramp_clip(2, 4, 3);
        let seq = interlace(&clip, FieldParity::Odd).unwrap();
        assert_eq!(seq.parities, vec![FieldParity::Odd, FieldParity::Even]);
        assert_eq!(seq.fields[0].row(0), clip.frames[0].row(0));
        assert_eq!(seq.fields[0].row(1), clip.frames[0].row(2));
        assert_eq!(seq.fields[1].row(0), clip.frames[1].row(1));
        assert_eq!(seq.fields[1].row(1), clip.frames[1].row(3));
        assert_eq!(seq.source_height, 4);
    }

    #[test]
    fn interlace_row_values() {
        // Row r holds r/3; the odd field keeps rows 0 and 2.
        let frame = Image::from_fn(4, 2, |r, _, _| r as f32 / 3.0);
        let clip = ProgressiveClip::new(vec![frame]).unwrap();
        let seq = interlace(&clip, FieldParity::Odd).unwrap();
        assert_eq!(seq.fields[0].get(0, 0, 0), 0.0);
        assert_eq!(seq.fields[0].get(1, 1, 2), 2.0 / 3.0);
    }

    #[test]
    fn interlace_constant_and_odd_height() {
        let clip = ProgressiveClip::new(vec![Image::from_fn(4, 4, |_, _, _| 0.5); 3]).unwrap();
        let seq = interlace(&clip, FieldParity::Even).unwrap();
        assert!(seq.fields.iter().all(|f| f.data().iter().all(|&v| v == 0.5)));
        let odd = ProgressiveClip::new(vec![Image::zeros(3, 4)]).unwrap();
        assert!(matches!(interlace(&odd, FieldParity::Odd), Err(Error::Dimension(_))));
    }

    #[test]
    fn mosaic_rggb_positions() {
        let clip = ProgressiveClip::new(vec![Image::from_fn(2, 2, |_, _, _| 1.0)]).unwrap();
        let m = mosaic(&clip, CfaPattern::Rggb).unwrap();
        let f = &m.frames[0];
        assert_eq!([f.get(0, 0, 0), f.get(0, 0, 1), f.get(0, 0, 2)], [1.0, 0.0, 0.0]);
        assert_eq!([f.get(0, 1, 0), f.get(0, 1, 1), f.get(0, 1, 2)], [0.0, 1.0, 0.0]);
        assert_eq!([f.get(1, 0, 0), f.get(1, 0, 1), f.get(1, 0, 2)], [0.0, 1.0, 0.0]);
        assert_eq!([f.get(1, 1, 0), f.get(1, 1, 1), f.get(1, 1, 2)], [0.0, 0.0, 1.0]);
    }

    #[test]
    fn mosaic_sample_counts() {
        let clip = ProgressiveClip::new(vec![Image::from_fn(6, 8, |_, _, _| 1.0)]).unwrap();
        let f = &mosaic(&clip, CfaPattern::Rggb).unwrap().frames[0];
        let count = |ch: usize| (0..6).flat_map(|r| (0..8).map(move |c| (r, c))).filter(|&(r, c)| f.get(r, c, ch) != 0.0).count();
        assert_eq!((count(0), count(1), count(2)), (12, 24, 12));
    }

    #[test]
    fn mosaic_errors() {
        let clip = ProgressiveClip::new(vec![Image::zeros(4, 3)]).unwrap();
        assert!(mosaic(&clip, CfaPattern::Rggb).is_err());
        assert!(matches!(CfaPattern::parse("xtrans"), Err(Error::Config(_))));
        assert_eq!(CfaPattern::parse("GRBG").unwrap(), CfaPattern::Grbg);
    }

    #[test]
    fn weave_orders_rows_by_parity() {
        let a = Image::from_fn(2, 1, |r, _, _| [0.1, 0.3][r]);
        let b = Image::from_fn(2, 1, |r, _, _| [0.2, 0.4][r]);
        let odd = weave(&a, &b, FieldParity::Odd).unwrap();
        assert_eq!((0..4).map(|r| odd.get(r, 0, 0)).collect::<Vec<_>>(), vec![0.1, 0.2, 0.3, 0.4]);
        let even = weave(&a, &b, FieldParity::Even).unwrap();
        assert_eq!((0..4).map(|r| even.get(r, 0, 0)).collect::<Vec<_>>(), vec![0.2, 0.1, 0.4, 0.3]);
        assert!(weave(&a, &Image::zeros(3, 1), FieldParity::Odd).is_err());
    }

    #[test]
    fn window_assembly_deinterlace() {
        let clip = ramp_clip(5, 4, 4);
        let seq = DegradedSequence::Interlaced(interlace(&clip, FieldParity::Odd).unwrap());
        let w = make_training_window(&seq, &clip, 2).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].indices, [0, 1, 2, 3, 4]);
        assert_eq!(w[0].indicator, IndicatorFlag::EvenField);
        assert_eq!(w[0].target, clip.frames[2]);
        let w0 = make_training_window(&seq, &clip, 0).unwrap();
        assert_eq!(w0[0].indices, [0, 0, 0, 1, 2]);
        assert!(matches!(make_training_window(&seq, &clip, 5), Err(Error::Index { .. })));
    }

    #[test]
    fn window_assembly_demosaic() {
        let clip = ramp_clip(5, 4, 4);
        let seq = DegradedSequence::Mosaic(mosaic(&clip, CfaPattern::Rggb).unwrap());
        let w = make_training_window(&seq, &clip, 2).unwrap();
        let flags: Vec<_> = w.iter().map(|w| w.indicator).collect();
        assert_eq!(flags, vec![IndicatorFlag::ChannelR, IndicatorFlag::ChannelG, IndicatorFlag::ChannelB]);
        assert!(w.iter().all(|w| w.indices == [0, 1, 2, 3, 4] && w.target == clip.frames[2]));
    }

    #[test]
    fn noise_hook_is_seeded() {
        use rand::SeedableRng;
        let clip = ramp_clip(1, 2, 2);
        let a = clip.with_noise(0.05, &mut rand_chacha::ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = clip.with_noise(0.05, &mut rand_chacha::ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, clip);
    }
}
