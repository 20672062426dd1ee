//! Dataset manifests (line-delimited JSON), PNG image I/O, and the
//! disk-backed sample source for tensor artifacts.

use crate::checkpoint::read_tensor;
use crate::error::{Error, Result};
use crate::networks::SampleSource;
use crate::synthdata::LesionBox;
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One manifest line: an image, its grade, split, and lesion boxes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    /// Image path relative to the manifest's directory.
    pub path: String,
    pub grade: u8,
    pub split: Split,
    pub lesions: Vec<LesionBox>,
}

pub fn write_manifest(records: &[ManifestRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Config(e.to_string()))?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| Error::MissingArtifact(format!("dataset manifest {}", path.display())))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: ManifestRecord = serde_json::from_str(line)
            .map_err(|e| Error::Config(format!("{} line {}: {e}", path.display(), i + 1)))?;
        records.push(r);
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset(path.display().to_string()));
    }
    Ok(records)
}

/// Saves a `3 x H x W` tensor with values in [0, 255] as an RGB PNG.
pub fn save_png<T: Scalar>(pixels: &Tensor<T>, path: &Path) -> Result<()> {
    let (c, h, w) = match pixels.shape() {
        &[c, h, w] => (c, h, w),
        other => return Err(Error::shape("save_png", format!("expected CxHxW, got {:?}", other))),
    };
    if c != 3 {
        return Err(Error::shape("save_png", format!("expected 3 channels, got {c}")));
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                pixels.data()[y * w + x].as_f64().clamp(0.0, 255.0).round() as u8,
                pixels.data()[(h + y) * w + x].as_f64().clamp(0.0, 255.0).round() as u8,
                pixels.data()[(2 * h + y) * w + x].as_f64().clamp(0.0, 255.0).round() as u8,
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path).map_err(|e| Error::InvalidImage(format!("{}: {e}", path.display())))
}

/// Loads a PNG or JPEG as a `3 x H x W` tensor with values in [0, 255].
pub fn load_image<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path)
        .map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(vec![3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for ch in 0..3 {
                t.data_mut()[(ch * h + y) * w + x] = T::of(px.0[ch] as f64);
            }
        }
    }
    Ok(t)
}

/// Sample source backed by per-sample tensor artifacts on disk.
pub struct DiskDataset {
    pub paths: Vec<PathBuf>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl DiskDataset {
    pub fn new(paths: Vec<PathBuf>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if paths.len() != labels.len() {
            return Err(Error::shape(
                "DiskDataset",
                format!("{} paths vs {} labels", paths.len(), labels.len()),
            ));
        }
        Ok(DiskDataset { paths, labels, classes })
    }
}

impl<T: Scalar> SampleSource<T> for DiskDataset {
    fn len(&self) -> usize {
        self.paths.len()
    }
    fn num_classes(&self) -> usize {
        self.classes
    }
    fn label(&self, index: usize) -> usize {
        self.labels[index]
    }
    fn load(&self, index: usize) -> Result<Tensor<T>> {
        read_tensor(&self.paths[index])
    }
}
