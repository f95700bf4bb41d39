//! Per-pixel label maps and (image, labels) datasets, in memory and on
//! disk. The on-disk layout is `<root>/images/*.png` (8-bit RGB),
//! `<root>/labels/*.png` (8-bit single channel of class indices, 255 =
//! void), matched by filename stem, plus `classes.txt` listing class names
//! in index order.

use crate::error::{Error, Result};
use crate::volume::FeatureVolume;
use image::{GrayImage, RgbImage};
use std::collections::BTreeMap;
use std::path::Path;

/// Sentinel for unlabeled pixels; excluded from losses and metrics.
pub const VOID_LABEL: u8 = 255;

/// Per-pixel class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::shape(format!(
                "label map length {} != {width}x{height}",
                labels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn filled(width: usize, height: usize, label: u8) -> Self {
        Self {
            width,
            height,
            labels: vec![label; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, label: u8) {
        self.labels[y * self.width + x] = label;
    }

    /// Ensures every non-void label is below `n_classes`.
    pub fn validate_classes(&self, n_classes: usize) -> Result<()> {
        for &l in &self.labels {
            if l != VOID_LABEL && l as usize >= n_classes {
                return Err(Error::invalid(format!(
                    "label {l} out of range for {n_classes} classes"
                )));
            }
        }
        Ok(())
    }
}

/// A labeled image collection with shared class names. The split tag is
/// informational ("train", "val", "test" or empty); splits live in
/// separate directory roots.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub pairs: Vec<(FeatureVolume, LabelMap)>,
    pub split: String,
}

impl Dataset {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Loads `<root>/images`, `<root>/labels` and `<root>/classes.txt`.
    pub fn load(root: &Path) -> Result<Self> {
        let class_names = read_classes(&root.join("classes.txt"))?;
        let images_dir = root.join("images");
        let labels_dir = root.join("labels");
        let mut stems = BTreeMap::new();
        for entry in std::fs::read_dir(&images_dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("png") {
                let stem = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .ok_or_else(|| Error::invalid(format!("bad file name {path:?}")))?
                    .to_string();
                stems.insert(stem, path);
            }
        }
        if stems.is_empty() {
            return Err(Error::Empty(format!("no images under {images_dir:?}")));
        }
        let mut pairs = Vec::with_capacity(stems.len());
        for (stem, img_path) in stems {
            let label_path = labels_dir.join(format!("{stem}.png"));
            let image = read_image_png(&img_path)?;
            let labels = read_index_png(&label_path)?;
            if labels.width() != image.width() || labels.height() != image.height() {
                return Err(Error::shape(format!(
                    "{stem}: image {}x{} but labels {}x{}",
                    image.width(),
                    image.height(),
                    labels.width(),
                    labels.height()
                )));
            }
            labels.validate_classes(class_names.len())?;
            pairs.push((image, labels));
        }
        // infer the split tag from the directory name when it matches
        let split = root
            .file_name()
            .and_then(|n| n.to_str())
            .filter(|n| ["train", "val", "test"].contains(n))
            .unwrap_or("")
            .to_string();
        Ok(Dataset {
            class_names,
            pairs,
            split,
        })
    }

    /// Writes the standard on-disk layout, images named `{prefix}0000.png`.
    pub fn save(&self, root: &Path, prefix: &str) -> Result<()> {
        std::fs::create_dir_all(root.join("images"))?;
        std::fs::create_dir_all(root.join("labels"))?;
        std::fs::write(root.join("classes.txt"), self.class_names.join("\n") + "\n")?;
        for (i, (image, labels)) in self.pairs.iter().enumerate() {
            let stem = format!("{prefix}{i:04}");
            write_image_png(image, &root.join("images").join(format!("{stem}.png")))?;
            write_index_png(labels, &root.join("labels").join(format!("{stem}.png")))?;
        }
        Ok(())
    }
}

fn read_classes(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    let names: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if names.is_empty() {
        return Err(Error::Empty(format!("{path:?} lists no classes")));
    }
    Ok(names)
}

/// 8-bit RGB PNG to a 3-channel volume scaled to [0, 1].
pub fn read_image_png(path: &Path) -> Result<FeatureVolume> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = FeatureVolume::zeros(3, h, w);
    for (x, y, pixel) in img.enumerate_pixels() {
        for c in 0..3 {
            out.set(c, y as usize, x as usize, pixel[c] as f64 / 255.0);
        }
    }
    Ok(out)
}

pub fn write_image_png(image: &FeatureVolume, path: &Path) -> Result<()> {
    let (c, h, w) = image.shape();
    if c != 3 {
        return Err(Error::shape(format!("png writer expects 3 channels, got {c}")));
    }
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = image::Rgb(std::array::from_fn(|ch| {
                (image.at(ch, y, x).clamp(0.0, 1.0) * 255.0).round() as u8
            }));
            img.put_pixel(x as u32, y as u32, px);
        }
    }
    img.save(path)?;
    Ok(())
}

/// Single-channel PNG of raw class indices.
pub fn read_index_png(path: &Path) -> Result<LabelMap> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    LabelMap::new(w, h, img.into_raw())
}

pub fn write_index_png(labels: &LabelMap, path: &Path) -> Result<()> {
    let img = GrayImage::from_raw(
        labels.width() as u32,
        labels.height() as u32,
        labels.labels().to_vec(),
    )
    .expect("label buffer matches dims by construction");
    img.save(path)?;
    Ok(())
}

/// Fixed deterministic palette for rendering label maps; void is black.
pub fn class_color(index: u8) -> [u8; 3] {
    if index == VOID_LABEL {
        return [0, 0, 0];
    }
    // low indices get hand-picked distinct colors, the rest a hashed hue
    const BASE: [[u8; 3]; 8] = [
        [90, 110, 90],
        [220, 60, 60],
        [60, 90, 220],
        [230, 210, 50],
        [60, 200, 200],
        [200, 60, 200],
        [240, 140, 40],
        [120, 230, 90],
    ];
    if (index as usize) < BASE.len() {
        return BASE[index as usize];
    }
    let h = (index as u32).wrapping_mul(2654435761);
    [
        (h >> 16) as u8 | 0x40,
        (h >> 8) as u8 | 0x40,
        h as u8 | 0x40,
    ]
}

/// Renders a label map through the fixed palette.
pub fn write_palette_png(labels: &LabelMap, path: &Path) -> Result<()> {
    let mut img = RgbImage::new(labels.width() as u32, labels.height() as u32);
    for y in 0..labels.height() {
        for x in 0..labels.width() {
            img.put_pixel(x as u32, y as u32, image::Rgb(class_color(labels.at(y, x))));
        }
    }
    img.save(path)?;
    Ok(())
}
