//! Dataset manifests, loading with face normalisation, and writing samples
//! back to disk as PNG + `.pts`.
//!
//! A manifest is a text file with one entry per line:
//! `<image> <pts> <train|val|test>`, paths relative to the manifest's
//! directory. `#` starts a comment line.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid_input, Error, Result};
use crate::geometry::{
    normalize_face, read_image_png, read_pts, write_image_png, write_mask_png, write_pts, ClassId, FaceSample, Image,
    SegMask,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(invalid_input(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub pts: PathBuf,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [image, pts, split] = fields[..] else {
                return Err(Error::Parse {
                    path: root.join("manifest.txt"),
                    reason: format!("line {}: expected `<image> <pts> <split>`", n + 1),
                });
            };
            entries.push(ManifestEntry {
                image: image.into(),
                pts: pts.into(),
                split: split.parse()?,
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
        })
    }

    /// Reads a manifest; relative entries resolve against its directory.
    pub fn read(path: &Path) -> Result<Self> {
        let root = path.parent().unwrap_or(Path::new("."));
        Self::parse(&fs::read_to_string(path)?, root)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!("{} {} {}\n", e.image.display(), e.pts.display(), e.split));
        }
        out
    }
}

/// Loaded samples with their split and source image name.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<FaceSample>,
    pub splits: Vec<Split>,
    pub names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.splits.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Samples of one split, in dataset order.
    pub fn subset(&self, split: Split) -> Vec<FaceSample> {
        self.indices(split)
            .into_iter()
            .map(|i| self.samples[i].clone())
            .collect()
    }

    /// Moves a seeded `fraction` of the training entries to validation.
    pub fn hold_out_validation(&mut self, fraction: f64, seed: u64) {
        let mut train = self.indices(Split::Train);
        train.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let count = (train.len() as f64 * fraction).round() as usize;
        for &i in &train[..count.min(train.len())] {
            self.splits[i] = Split::Val;
        }
    }
}

/// Pads image and mask with black background on the right and bottom so
/// both sides are multiples of `stride`. Landmarks are unchanged.
pub fn pad_to_stride(sample: &FaceSample, stride: usize) -> Result<FaceSample> {
    let (w, h) = (sample.image.width(), sample.image.height());
    let (pw, ph) = (w.div_ceil(stride) * stride, h.div_ceil(stride) * stride);
    if (pw, ph) == (w, h) {
        return Ok(sample.clone());
    }
    let mut image = Image::zeros(pw, ph);
    let mut mask = SegMask::filled(pw, ph, ClassId::Background);
    for y in 0..h {
        for x in 0..w {
            image.set_pixel(x, y, sample.image.pixel(x, y));
            mask.set(x, y, sample.mask.get(x, y));
        }
    }
    FaceSample::new(image, sample.landmarks.clone(), mask)
}

fn load_entry(root: &Path, entry: &ManifestEntry, target_height: Option<usize>, stride: usize) -> Result<FaceSample> {
    let image = read_image_png(&root.join(&entry.image))?;
    let landmarks = read_pts(&root.join(&entry.pts))?;
    let sample = match target_height {
        // normalisation without jitter never draws from the generator
        Some(h) => normalize_face(&image, &landmarks, h, 0.0, &mut ChaCha8Rng::seed_from_u64(0))?,
        None => {
            let mask = crate::geometry::landmarks_to_mask(
                &landmarks,
                image.width(),
                image.height(),
                crate::geometry::DEFAULT_EYEBROW_WIDTH_FRAC,
            );
            FaceSample::new(image, landmarks, mask)?
        }
    };
    pad_to_stride(&sample, stride)
}

/// Loads every manifest entry. With `target_height` the face is cropped and
/// rescaled; without it the image is used as stored. Either way the mask is
/// rebuilt from the landmarks and the sample padded to a multiple of
/// `stride`. Entries that fail to load are logged and skipped.
pub fn load_dataset(manifest: &DatasetManifest, target_height: Option<usize>, stride: usize) -> Result<Dataset> {
    let mut data = Dataset::default();
    for entry in &manifest.entries {
        match load_entry(&manifest.root, entry, target_height, stride) {
            Ok(sample) => {
                data.samples.push(sample);
                data.splits.push(entry.split);
                data.names.push(entry.image.display().to_string());
            }
            Err(e) => log::warn!("skipping {}: {e}", entry.image.display()),
        }
    }
    if data.is_empty() {
        return Err(invalid_input(format!(
            "no usable entries among {} in {}",
            manifest.entries.len(),
            manifest.root.display()
        )));
    }
    Ok(data)
}

/// Writes `face_NNNN.png`, `.pts` and `_mask.png` files plus
/// `manifest.txt` into `dir`.
pub fn write_dataset(dir: &Path, samples: &[FaceSample], splits: &[Split]) -> Result<DatasetManifest> {
    if samples.len() != splits.len() {
        return Err(invalid_input("one split per sample is required"));
    }
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, (s, &split)) in samples.iter().zip(splits).enumerate() {
        let stem = format!("face_{i:04}");
        let entry = ManifestEntry {
            image: format!("{stem}.png").into(),
            pts: format!("{stem}.pts").into(),
            split,
        };
        write_image_png(&dir.join(&entry.image), &s.image)?;
        write_pts(&dir.join(&entry.pts), &s.landmarks)?;
        write_mask_png(&dir.join(format!("{stem}_mask.png")), &s.mask)?;
        entries.push(entry);
    }
    let manifest = DatasetManifest {
        root: dir.to_path_buf(),
        entries,
    };
    fs::write(dir.join("manifest.txt"), manifest.to_text())?;
    Ok(manifest)
}
