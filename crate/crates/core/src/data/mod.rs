//! Samples, dataset I/O, augmentation recipes and the synthetic generator.
//!
//! Dataset layout: `<root>/images/<id>.<ext>` and `<root>/edges/<id>.<ext>`,
//! paired by file stem.

mod augment;
mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, RgbImage};
use log::warn;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use augment::{
    apply_op, augment, augment_plan, plan_count, AugmentOp, AugmentSpec, CropMode,
};
pub use synth::{boundary_label, synth_generate, synth_one, synth_with_segmentation, SynthSample};

/// An image (`H×W×3`) and its edge label (`H×W×1`), both in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub label: Tensor,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor, label: Tensor) -> Result<Self> {
        let (h, w, c) = image.hwc()?;
        let (lh, lw, lc) = label.hwc()?;
        if c != 3 || lc != 1 || (h, w) != (lh, lw) {
            return Err(Error::shape("sample", &[h, w, 1], label.shape()));
        }
        if label.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Geometry("label values must lie in [0, 1]".into()));
        }
        Ok(Self {
            id: id.into(),
            image,
            label,
        })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }
}

/// Result of scanning a dataset directory.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    /// Paired samples in lexicographic id order.
    pub samples: Vec<Sample>,
    /// Files with no counterpart in the other directory.
    pub orphans: Vec<String>,
    /// Files that could not be decoded.
    pub corrupt: Vec<String>,
}

const RASTER_EXTS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "tif"];

/// Raster files in `dir` keyed by file stem; a missing directory is empty.
pub fn raster_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| RASTER_EXTS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// 8-bit raster as `H×W×3`, gray replicated across channels.
pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let img = decode(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
    Tensor::new(&[h as usize, w as usize, 3], data)
}

/// 8-bit raster as `H×W×1` luminance.
pub fn read_gray(path: &Path) -> Result<Tensor> {
    let img = decode(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
    Tensor::new(&[h as usize, w as usize, 1], data)
}

/// `round(255·v)` with halves rounded up, `v` clamped to `[0, 1]`.
pub fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0) + 0.5).floor() as u8
}

/// Writes an `H×W×C` map as 8-bit grayscale, averaging channels.
pub fn write_gray(path: &Path, map: &Tensor) -> Result<()> {
    let (h, w, c) = map.hwc()?;
    let px: Vec<u8> = map
        .data()
        .chunks_exact(c)
        .map(|p| quantize(p.iter().sum::<f64>() / c as f64))
        .collect();
    let img = GrayImage::from_raw(w as u32, h as u32, px).expect("buffer size");
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_rgb(path: &Path, map: &Tensor) -> Result<()> {
    let (h, w, c) = map.hwc()?;
    if c != 3 {
        return Err(Error::Geometry(format!("expected 3 channels, got {c}")));
    }
    let px: Vec<u8> = map.data().iter().map(|&v| quantize(v)).collect();
    let img = RgbImage::from_raw(w as u32, h as u32, px).expect("buffer size");
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads `<root>/images` and `<root>/edges`, pairing files by stem.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let images = raster_files(&root.join("images"))?;
    let edges = raster_files(&root.join("edges"))?;
    let mut ds = Dataset::default();
    for (id, ipath) in &images {
        let Some(epath) = edges.get(id) else {
            ds.orphans.push(format!("images/{}", file_name(ipath)));
            continue;
        };
        let loaded = read_rgb(ipath).and_then(|img| {
            let label = read_gray(epath)?;
            Sample::new(id.clone(), img, label)
        });
        match loaded {
            Ok(s) => ds.samples.push(s),
            Err(e) => {
                warn!("skipping {id}: {e}");
                ds.corrupt.push(id.clone());
            }
        }
    }
    for (id, epath) in &edges {
        if !images.contains_key(id) {
            ds.orphans.push(format!("edges/{}", file_name(epath)));
        }
    }
    Ok(ds)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Writes samples in the dataset layout as PNGs.
/// Grayscale maps paired by file stem, in stem order.
pub fn load_map_pairs(pred_dir: &Path, gt_dir: &Path) -> Result<(Vec<String>, Vec<Tensor>, Vec<Tensor>)> {
    let preds = raster_files(pred_dir)?;
    let gts = raster_files(gt_dir)?;
    let unpaired: Vec<String> = preds
        .keys()
        .filter(|k| !gts.contains_key(*k))
        .chain(gts.keys().filter(|k| !preds.contains_key(*k)))
        .cloned()
        .collect();
    if !unpaired.is_empty() {
        return Err(Error::Unpaired(unpaired));
    }
    if preds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut ids = Vec::with_capacity(preds.len());
    let (mut p, mut g) = (Vec::new(), Vec::new());
    for (id, path) in &preds {
        let pred = read_gray(path)?;
        let gt = read_gray(&gts[id])?;
        if pred.shape() != gt.shape() {
            return Err(Error::Unpaired(vec![format!("{id}: {:?} vs {:?}", pred.shape(), gt.shape())]));
        }
        ids.push(id.clone());
        p.push(pred);
        g.push(gt);
    }
    Ok((ids, p, g))
}

pub fn write_dataset(root: &Path, samples: &[Sample]) -> Result<()> {
    for sub in ["images", "edges"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for s in samples {
        write_rgb(&root.join("images").join(format!("{}.png", s.id)), &s.image)?;
        write_gray(&root.join("edges").join(format!("{}.png", s.id)), &s.label)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_rounds_half_up() {
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(-3.0), 0);
    }

    #[test]
    fn empty_directory_loads_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert!(ds.samples.is_empty() && ds.orphans.is_empty());
    }

    #[test]
    fn pairs_orphans_and_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let samples = synth_generate(2, 16, 16, 1);
        write_dataset(dir.path(), &samples).unwrap();
        fs::write(dir.path().join("images/zz_orphan.png"), b"not used").unwrap();
        fs::write(dir.path().join("images/bad.png"), b"garbage").unwrap();
        fs::write(dir.path().join("edges/bad.png"), b"garbage").unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.samples.len(), 2);
        assert_eq!(ds.orphans, vec!["images/zz_orphan.png".to_string()]);
        assert_eq!(ds.corrupt, vec!["bad".to_string()]);
        assert!(ds.samples[0].id < ds.samples[1].id);
        assert_eq!(ds.samples[0].label, samples[0].label);
    }

    #[test]
    fn full_intensity_reads_as_one() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.png");
        write_gray(&p, &Tensor::ones(&[2, 3, 1])).unwrap();
        assert_eq!(read_gray(&p).unwrap(), Tensor::ones(&[2, 3, 1]));
    }

    #[test]
    fn map_pairs_require_matching_stems_and_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let (p, g) = (dir.path().join("p"), dir.path().join("g"));
        fs::create_dir_all(&p).unwrap();
        fs::create_dir_all(&g).unwrap();
        assert!(matches!(load_map_pairs(&p, &g), Err(Error::EmptyDataset)));
        for stem in ["a", "b"] {
            write_gray(&p.join(format!("{stem}.png")), &Tensor::full(&[3, 4, 1], 0.5)).unwrap();
            write_gray(&g.join(format!("{stem}.png")), &Tensor::zeros(&[3, 4, 1])).unwrap();
        }
        let (ids, preds, gts) = load_map_pairs(&p, &g).unwrap();
        assert_eq!(ids, ["a", "b"]);
        assert_eq!((preds.len(), gts.len()), (2, 2));
        write_gray(&p.join("c.png"), &Tensor::zeros(&[3, 4, 1])).unwrap();
        assert!(matches!(load_map_pairs(&p, &g), Err(Error::Unpaired(v)) if v.len() == 1));
        write_gray(&g.join("c.png"), &Tensor::zeros(&[4, 3, 1])).unwrap();
        assert!(matches!(load_map_pairs(&p, &g), Err(Error::Unpaired(_))));
    }
}
