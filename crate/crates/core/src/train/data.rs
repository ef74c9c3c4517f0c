use rand::Rng;

use crate::degrade::{
    interlace, mosaic, window_indices, CfaPattern, DegradedSequence, FieldParity, Image, IndicatorFlag,
    ProgressiveClip, TrainingWindow,
};
use crate::error::{Error, Result};
use crate::model::Task;

/// One trainable window: a frame of a degraded sequence and its target pattern.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowRef {
    pub sequence: usize,
    pub frame: usize,
    pub indicator: IndicatorFlag,
}

/// Degraded sequences synthesized from ground-truth clips, with every window
/// enumerated. Deinterlacing uses both first parities, so each frame is a
/// target for both of its fields; demosaicing has one window per channel.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    task: Task,
    pattern: CfaPattern,
    clips: Vec<ProgressiveClip>,
    sequences: Vec<(usize, DegradedSequence)>,
    windows: Vec<WindowRef>,
}

impl TrainingSet {
    pub fn new(task: Task, clips: Vec<ProgressiveClip>, pattern: CfaPattern) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::MissingData("training set has no clips".into()));
        }
        let mut sequences = Vec::new();
        for (i, clip) in clips.iter().enumerate() {
            match task {
                Task::Deinterlace => {
                    for parity in [FieldParity::Odd, FieldParity::Even] {
                        sequences.push((i, DegradedSequence::Interlaced(interlace(clip, parity)?)));
                    }
                }
                Task::Demosaic => sequences.push((i, DegradedSequence::Mosaic(mosaic(clip, pattern)?))),
            }
        }
        let mut windows = Vec::new();
        for (s, (_, seq)) in sequences.iter().enumerate() {
            for frame in 0..seq.len() {
                let indicators = match seq {
                    DegradedSequence::Interlaced(i) => vec![IndicatorFlag::missing_field(i.parities[frame])],
                    DegradedSequence::Mosaic(_) => (0..3).filter_map(IndicatorFlag::channel).collect(),
                };
                windows.extend(indicators.into_iter().map(|indicator| WindowRef {
                    sequence: s,
                    frame,
                    indicator,
                }));
            }
        }
        Ok(TrainingSet {
            task,
            pattern,
            clips,
            sequences,
            windows,
        })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn pattern(&self) -> CfaPattern {
        self.pattern
    }

    pub fn clips(&self) -> &[ProgressiveClip] {
        &self.clips
    }

    pub fn sequences(&self) -> impl Iterator<Item = (&ProgressiveClip, &DegradedSequence)> {
        self.sequences.iter().map(|(c, s)| (&self.clips[*c], s))
    }

    pub fn windows(&self) -> &[WindowRef] {
        &self.windows
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Smallest frame size over all clips.
    pub fn min_frame_size(&self) -> (usize, usize) {
        self.clips
            .iter()
            .map(|c| (c.height(), c.width()))
            .fold((usize::MAX, usize::MAX), |a, b| (a.0.min(b.0), a.1.min(b.1)))
    }

    pub fn window(&self, r: WindowRef) -> Result<TrainingWindow> {
        let (clip, seq) = self
            .sequences
            .get(r.sequence)
            .ok_or(Error::Index { index: r.sequence, len: self.sequences.len() })?;
        let indices = window_indices(seq.len(), r.frame)?;
        Ok(TrainingWindow {
            inputs: indices.iter().map(|&i| seq.pictures()[i].clone()).collect(),
            indices,
            indicator: r.indicator,
            target: self.clips[*clip].frames[r.frame].clone(),
        })
    }
}

/// Snaps a frame-space crop origin so the crop keeps the field parity
/// (deinterlacing: even row) or the Bayer phase (demosaicing: even row and column).
pub fn snap_origin(task: Task, row: usize, col: usize) -> (usize, usize) {
    match task {
        Task::Deinterlace => (row & !1, col),
        Task::Demosaic => (row & !1, col & !1),
    }
}

/// Crops the window at frame-space `origin` to `patch_h × patch_w`.
pub fn crop_window(window: &TrainingWindow, task: Task, origin: (usize, usize), patch: (usize, usize)) -> Result<TrainingWindow> {
    let (r0, c0) = snap_origin(task, origin.0, origin.1);
    let (ph, pw) = patch;
    if task == Task::Deinterlace && ph % 2 != 0 {
        return Err(Error::Dimension(format!("deinterlacing patches need an even height, got {ph}")));
    }
    let target = window.target.crop(r0, c0, ph, pw)?;
    let inputs = window
        .inputs
        .iter()
        .map(|p| match task {
            Task::Deinterlace => p.crop(r0 / 2, c0, ph / 2, pw),
            Task::Demosaic => p.crop(r0, c0, ph, pw),
        })
        .collect::<Result<Vec<Image>>>()?;
    Ok(TrainingWindow {
        inputs,
        indices: window.indices,
        indicator: window.indicator,
        target,
    })
}

/// Random crop applied identically to the five inputs and the target.
pub fn sample_patch(
    window: &TrainingWindow,
    task: Task,
    patch: (usize, usize),
    rng: &mut impl Rng,
) -> Result<(TrainingWindow, (usize, usize))> {
    let (h, w) = (window.target.height(), window.target.width());
    if patch.0 > h || patch.1 > w || patch.0 == 0 || patch.1 == 0 {
        return Err(Error::Dimension(format!(
            "patch {}×{} does not fit a {h}×{w} frame",
            patch.0, patch.1
        )));
    }
    let origin = snap_origin(task, rng.random_range(0..=h - patch.0), rng.random_range(0..=w - patch.1));
    Ok((crop_window(window, task, origin, patch)?, origin))
}
