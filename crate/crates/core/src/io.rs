//! Clip directories of zero-padded 8-bit PNG frames, plus `meta.json` for
//! degraded sequences.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::degrade::{
    CfaPattern, DegradeTask, DegradedSequence, FieldParity, Image, InterlacedSequence, MosaicSequence,
    ProgressiveClip,
};
use crate::error::{Error, Result};

pub const META_FILE: &str = "meta.json";

/// Sidecar describing how a directory of pictures was degraded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradeMeta {
    pub task: DegradeTask,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_parity: Option<FieldParity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<CfaPattern>,
    pub source_height: usize,
    pub source_width: usize,
    pub frames: usize,
}

pub fn frame_name(i: usize) -> String {
    format!("{i:06}.png")
}

pub fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Image::new(h as usize, w as usize, data)
}

/// Quantizes to 8 bits with rounding; values are clamped to `[0, 1]` first.
/// Missing parent directories are created.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let raw: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    let buf: RgbImage = ImageBuffer::<Rgb<u8>, _>::from_raw(img.width() as u32, img.height() as u32, raw)
        .ok_or_else(|| Error::Dimension("image buffer size mismatch".into()))?;
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Sorted PNG files of a clip directory.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::MissingData(format!("no PNG frames in {}", dir.display())));
    }
    Ok(files)
}

pub fn read_pictures(dir: &Path) -> Result<Vec<Image>> {
    list_frames(dir)?.iter().map(|p| read_png(p)).collect()
}

pub fn read_clip(dir: &Path) -> Result<ProgressiveClip> {
    ProgressiveClip::new(read_pictures(dir)?)
}

pub fn write_pictures(dir: &Path, pictures: &[Image]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, p) in pictures.iter().enumerate() {
        write_png(&dir.join(frame_name(i)), p)?;
    }
    Ok(())
}

/// Subdirectories of `root` that contain PNG frames, sorted by name.
/// A root that itself holds frames is treated as a single clip.
pub fn clip_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if list_frames(root).is_ok() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && list_frames(p).is_ok())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::MissingData(format!("no clips under {}", root.display())));
    }
    Ok(dirs)
}

pub fn write_degraded(dir: &Path, seq: &DegradedSequence, source: (usize, usize)) -> Result<()> {
    write_pictures(dir, seq.pictures())?;
    let meta = match seq {
        DegradedSequence::Interlaced(s) => DegradeMeta {
            task: DegradeTask::Interlace,
            first_parity: s.parities.first().copied(),
            pattern: None,
            source_height: source.0,
            source_width: source.1,
            frames: s.fields.len(),
        },
        DegradedSequence::Mosaic(s) => DegradeMeta {
            task: DegradeTask::Mosaic,
            first_parity: None,
            pattern: Some(s.pattern),
            source_height: source.0,
            source_width: source.1,
            frames: s.frames.len(),
        },
    };
    let path = dir.join(META_FILE);
    fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
}

pub fn read_meta(dir: &Path) -> Result<DegradeMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_degraded(dir: &Path) -> Result<DegradedSequence> {
    let meta = read_meta(dir)?;
    let pictures = read_pictures(dir)?;
    match meta.task {
        DegradeTask::Interlace => {
            let first = meta
                .first_parity
                .ok_or_else(|| Error::Config("interlaced meta.json lacks first_parity".into()))?;
            if pictures.iter().any(|p| p.height() * 2 != meta.source_height) {
                return Err(Error::Dimension(format!(
                    "fields in {} do not match source height {}",
                    dir.display(),
                    meta.source_height
                )));
            }
            let parities = (0..pictures.len()).map(|t| first.at(t)).collect();
            Ok(DegradedSequence::Interlaced(InterlacedSequence {
                fields: pictures,
                parities,
                source_height: meta.source_height,
            }))
        }
        DegradeTask::Mosaic => Ok(DegradedSequence::Mosaic(MosaicSequence {
            frames: pictures,
            pattern: meta.pattern.unwrap_or_default(),
        })),
    }
}
