use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{psnr, ssim};
use crate::degrade::{interlace, mosaic, CfaPattern, DegradedSequence, FieldParity, Image, ProgressiveClip};
use crate::error::{Error, Result};
use crate::io::{frame_name, read_clip, read_degraded, write_png};
use crate::model::{Model, Task};

/// Amplification applied to `|output − ground truth|` in difference images.
pub const DIFF_GAIN: f32 = 10.0;

/// Anything that turns a degraded sequence into full frames.
pub trait Restorer {
    fn restore(&self, seq: &DegradedSequence) -> Result<Vec<Image>>;

    /// Identifies the configuration being evaluated.
    fn fingerprint(&self) -> String {
        String::new()
    }
}

impl Restorer for Model {
    fn restore(&self, seq: &DegradedSequence) -> Result<Vec<Image>> {
        self.restore_sequence(seq)
    }

    fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self.config()).unwrap_or_default();
        Sha256::digest(&json)[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRow {
    pub clip: String,
    pub frames: usize,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ClipRow>,
    /// Means over every evaluated frame.
    pub frames: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub fingerprint: String,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<ClipRow>, fingerprint: String) -> Self {
        let frames: usize = rows.iter().map(|r| r.frames).sum();
        let mean = |f: fn(&ClipRow) -> f64| {
            if frames == 0 {
                0.0
            } else {
                rows.iter().map(|r| f(r) * r.frames as f64).sum::<f64>() / frames as f64
            }
        };
        EvalReport {
            psnr_db: mean(|r| r.psnr_db),
            ssim: mean(|r| r.ssim),
            frames,
            rows,
            fingerprint,
        }
    }

    /// `clip,frames,psnr_db,ssim` with a trailing `ALL` row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Config(format!("formatting report: {e}"));
        for r in &self.rows {
            w.serialize(r).map_err(err)?;
        }
        w.serialize(ClipRow {
            clip: "ALL".into(),
            frames: self.frames,
            psnr_db: self.psnr_db,
            ssim: self.ssim,
        })
        .map_err(err)?;
        let bytes = w.into_inner().map_err(|e| Error::Config(format!("formatting report: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub task: Task,
    pub first_parity: FieldParity,
    pub pattern: CfaPattern,
    pub peak: f64,
    /// Pixels excluded from each image edge before scoring.
    pub border: usize,
    /// Pre-degraded inputs, one subdirectory per clip; synthesized from the ground truth when absent.
    pub degraded_root: Option<PathBuf>,
    /// Where to write amplified difference images, one subdirectory per clip.
    pub diff_dir: Option<PathBuf>,
}

impl EvalOptions {
    pub fn new(task: Task) -> Self {
        EvalOptions {
            task,
            first_parity: FieldParity::Odd,
            pattern: CfaPattern::Rggb,
            peak: 1.0,
            border: 0,
            degraded_root: None,
            diff_dir: None,
        }
    }

    pub fn degrade(&self, clip: &ProgressiveClip) -> Result<DegradedSequence> {
        Ok(match self.task {
            Task::Deinterlace => DegradedSequence::Interlaced(interlace(clip, self.first_parity)?),
            Task::Demosaic => DegradedSequence::Mosaic(mosaic(clip, self.pattern)?),
        })
    }
}

/// `|a − b| × DIFF_GAIN`, clamped to `[0, 1]`.
pub fn difference_image(a: &Image, b: &Image) -> Result<Image> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::shape(&[a.height(), a.width()], &[b.height(), b.width()]));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| ((x - y).abs() * DIFF_GAIN).min(1.0))
        .collect();
    Image::new(a.height(), a.width(), data)
}

fn trim(img: &Image, border: usize) -> Result<Image> {
    if border == 0 {
        return Ok(img.clone());
    }
    let (h, w) = (img.height(), img.width());
    if 2 * border >= h || 2 * border >= w {
        return Err(Error::Config(format!("border {border} leaves nothing of a {h}×{w} frame")));
    }
    img.crop(border, border, h - 2 * border, w - 2 * border)
}

/// Restores one clip and scores every frame.
pub fn evaluate_clip(
    restorer: &dyn Restorer,
    name: &str,
    gt: &ProgressiveClip,
    seq: &DegradedSequence,
    opts: &EvalOptions,
) -> Result<ClipRow> {
    if !opts.task.matches(seq) {
        return Err(Error::Config(format!("clip {name}: inputs do not match the {} task", opts.task.name())));
    }
    if seq.len() > gt.len() {
        return Err(Error::MissingData(format!(
            "clip {name}: {} degraded pictures but only {} ground-truth frames",
            seq.len(),
            gt.len()
        )));
    }
    let out = restorer.restore(seq)?;
    if out.len() != seq.len() {
        return Err(Error::Dimension(format!("restorer returned {} of {} frames", out.len(), seq.len())));
    }
    if let Some(dir) = &opts.diff_dir {
        let d = dir.join(name);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let (mut p, mut s) = (0.0, 0.0);
    for (i, (o, g)) in out.iter().zip(&gt.frames).enumerate() {
        let (oc, gc) = (trim(o, opts.border)?, trim(g, opts.border)?);
        p += psnr(&oc, &gc, opts.peak)?;
        s += ssim(&oc, &gc)?;
        if let Some(dir) = &opts.diff_dir {
            write_png(&dir.join(name).join(frame_name(i)), &difference_image(o, g)?)?;
        }
    }
    let n = out.len();
    Ok(ClipRow {
        clip: name.to_string(),
        frames: n,
        psnr_db: p / n as f64,
        ssim: s / n as f64,
    })
}

/// Evaluates every clip directory under `gt_root`.
pub fn evaluate(restorer: &dyn Restorer, gt_root: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for dir in crate::io::clip_dirs(gt_root)? {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "clip".into());
        let gt = read_clip(&dir)?;
        let seq = match &opts.degraded_root {
            Some(root) => {
                let d = if dir == gt_root { root.clone() } else { root.join(&name) };
                read_degraded(&d)?
            }
            None => opts.degrade(&gt)?,
        };
        rows.push(evaluate_clip(restorer, &name, &gt, &seq, opts)?);
    }
    Ok(EvalReport::from_rows(rows, restorer.fingerprint()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{write_degraded, write_pictures};

    /// Returns the ground truth regardless of input.
    struct Oracle(ProgressiveClip);

    impl Restorer for Oracle {
        fn restore(&self, seq: &DegradedSequence) -> Result<Vec<Image>> {
            Ok(self.0.frames[..seq.len()].to_vec())
        }
    }

    fn clip(t: usize) -> ProgressiveClip {
        ProgressiveClip::synthetic(t, 12, 14, 3).unwrap()
    }

    #[test]
    fn oracle_scores_perfectly() {
        let dir = tempfile::tempdir().unwrap();
        let c = clip(5);
        write_pictures(&dir.path().join("a"), &c.frames).unwrap();
        let stored = read_clip(&dir.path().join("a")).unwrap();
        let report = evaluate(&Oracle(stored), dir.path(), &EvalOptions::new(Task::Deinterlace)).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].frames, 5);
        assert_eq!(report.psnr_db, 99.0);
        assert!((report.ssim - 1.0).abs() < 1e-9);
        let csv = report.to_csv().unwrap();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "clip,frames,psnr_db,ssim");
        assert!(lines[1].starts_with("a,5,99.0,"));
        assert!(lines[2].starts_with("ALL,5,99.0,"));
    }

    #[test]
    fn difference_images_written() {
        let dir = tempfile::tempdir().unwrap();
        let c = clip(3);
        write_pictures(&dir.path().join("gt").join("a"), &c.frames).unwrap();
        let shifted = ProgressiveClip::new(c.frames.iter().map(|f| {
            Image::from_fn(f.height(), f.width(), |r, col, ch| (f.get(r, col, ch) + 0.02).min(1.0))
        }).collect()).unwrap();
        let mut opts = EvalOptions::new(Task::Demosaic);
        opts.diff_dir = Some(dir.path().join("diff"));
        evaluate(&Oracle(shifted), &dir.path().join("gt"), &opts).unwrap();
        let d = crate::io::read_png(&dir.path().join("diff/a/000001.png")).unwrap();
        assert!(d.data().iter().any(|&v| (v - 0.2).abs() < 0.01));
    }

    #[test]
    fn missing_ground_truth_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let long = clip(6);
        write_pictures(&dir.path().join("gt").join("a"), &long.frames[..4]).unwrap();
        let seq = DegradedSequence::Mosaic(mosaic(&long, CfaPattern::Rggb).unwrap());
        write_degraded(&dir.path().join("deg").join("a"), &seq, (12, 14)).unwrap();
        let mut opts = EvalOptions::new(Task::Demosaic);
        opts.degraded_root = Some(dir.path().join("deg"));
        let err = evaluate(&Oracle(long), &dir.path().join("gt"), &opts).unwrap_err();
        assert!(matches!(err, Error::MissingData(_)), "{err}");
    }

    #[test]
    fn border_excludes_edges() {
        let dir = tempfile::tempdir().unwrap();
        let c = ProgressiveClip::synthetic(2, 14, 16, 3).unwrap();
        write_pictures(&dir.path().join("a"), &c.frames).unwrap();
        let stored = read_clip(&dir.path().join("a")).unwrap();
        let edged = ProgressiveClip::new(stored.frames.iter().map(|f| {
            Image::from_fn(14, 16, |r, col, ch| if r == 0 || col == 15 { 0.0 } else { f.get(r, col, ch) })
        }).collect()).unwrap();
        let mut opts = EvalOptions::new(Task::Demosaic);
        assert!(evaluate(&Oracle(edged.clone()), dir.path(), &opts).unwrap().psnr_db < 99.0);
        opts.border = 1;
        assert_eq!(evaluate(&Oracle(edged.clone()), dir.path(), &opts).unwrap().psnr_db, 99.0);
        opts.border = 7;
        assert!(evaluate(&Oracle(edged), dir.path(), &opts).is_err());
    }

    #[test]
    fn difference_gain() {
        let a = Image::from_fn(2, 2, |_, _, _| 0.5);
        let b = Image::from_fn(2, 2, |_, _, _| 0.53);
        let d = difference_image(&a, &b).unwrap();
        assert!(d.data().iter().all(|&v| (v - 0.3).abs() < 1e-5));
    }
}
