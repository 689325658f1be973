//! Dataset storage, splitting and preprocessing.
//!
//! A dataset lives in a directory holding `images.dpsl` (`[N, H, W, C]`,
//! f32 in `[0,1]` or u8 scaled by 1/255 on load), `labels.dpsl` (`[N]`, u8 or
//! integral f32) and `manifest.json` with the split index lists and class
//! count.

mod fixtures;
mod tensor;

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use fixtures::{three_gaussians, toy_digits, toy_public, FIXTURE_SPLIT};
pub use tensor::{DType, TensorData, TensorFile, MAGIC};

use crate::error::{invalid, Error, Result};
use crate::rng::SeededRng;

pub const IMAGES_FILE: &str = "images.dpsl";
pub const LABELS_FILE: &str = "labels.dpsl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl SplitManifest {
    pub fn n_train(&self) -> usize {
        self.train_idx.len()
    }

    pub fn n_val(&self) -> usize {
        self.val_idx.len()
    }

    pub fn n_test(&self) -> usize {
        self.test_idx.len()
    }

    /// Every index below `n`, no index in two lists, no duplicates.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (name, list) in [
            ("train", &self.train_idx),
            ("val", &self.val_idx),
            ("test", &self.test_idx),
        ] {
            for &i in list {
                if i >= n {
                    return invalid(format!("{name} index {i} out of range for N={n}"));
                }
                if !seen.insert(i) {
                    return invalid(format!("index {i} appears twice in the split"));
                }
            }
        }
        Ok(())
    }
}

/// On-disk manifest: the split plus the class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    #[serde(rename = "K")]
    pub k: usize,
}

impl ManifestFile {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

/// Images `[N, H, W, C]` in `[0,1]` with labels in `0..K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f32>,
    height: usize,
    width: usize,
    channels: usize,
    labels: Vec<u32>,
    num_classes: usize,
    split: SplitManifest,
}

impl Dataset {
    pub fn new(
        images: Vec<f32>,
        dims: [usize; 3],
        labels: Vec<u32>,
        num_classes: usize,
        split: SplitManifest,
    ) -> Result<Self> {
        let [height, width, channels] = dims;
        let d = height
            .checked_mul(width)
            .and_then(|p| p.checked_mul(channels))
            .ok_or_else(|| Error::Validation("image dimensions overflow".into()))?;
        if d == 0 {
            return invalid("image dimensions must be positive");
        }
        if labels.len().checked_mul(d) != Some(images.len()) {
            return invalid(format!(
                "{} pixel values do not match {} labels of {d} pixels",
                images.len(),
                labels.len()
            ));
        }
        if let Some(bad) = images.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return invalid(format!("pixel value {bad} outside [0,1]"));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return invalid(format!("label {bad} not below K={num_classes}"));
        }
        split.validate(labels.len())?;
        Ok(Self {
            images,
            height,
            width,
            channels,
            labels,
            num_classes,
            split,
        })
    }

    /// Builds an unsplit dataset from flat f64 feature rows, clamping into `[0,1]`.
    pub fn from_rows(rows: &[Vec<f64>], dims: [usize; 3], labels: Vec<u32>, num_classes: usize) -> Result<Self> {
        let images = rows
            .iter()
            .flat_map(|r| r.iter().map(|&v| v.clamp(0.0, 1.0) as f32))
            .collect();
        Self::new(images, dims, labels, num_classes, SplitManifest::default())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn feature_dim(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    pub fn split(&self) -> &SplitManifest {
        &self.split
    }

    pub fn with_split(mut self, split: SplitManifest) -> Result<Self> {
        split.validate(self.len())?;
        self.split = split;
        Ok(self)
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let d = self.feature_dim();
        &self.images[i * d..(i + 1) * d]
    }

    pub fn image_f64(&self, i: usize) -> Vec<f64> {
        self.image(i).iter().map(|&v| v as f64).collect()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.image_f64(i)).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// The rows at `indices`, in that order, with an empty split.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let d = self.feature_dim();
        let mut images = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            images,
            height: self.height,
            width: self.width,
            channels: self.channels,
            labels,
            num_classes: self.num_classes,
            split: SplitManifest::default(),
        }
    }

    pub fn part(&self, part: SplitPart) -> Dataset {
        let idx = match part {
            SplitPart::Train => &self.split.train_idx,
            SplitPart::Val => &self.split.val_idx,
            SplitPart::Test => &self.split.test_idx,
        };
        self.select(idx)
    }

    /// Same images with labels replaced (and possibly a different class count).
    pub fn relabel(&self, labels: Vec<u32>, num_classes: usize) -> Result<Dataset> {
        Dataset::new(
            self.images.clone(),
            self.dims(),
            labels,
            num_classes,
            self.split.clone(),
        )
    }

    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.dims() != other.dims() || self.num_classes != other.num_classes {
            return invalid("cannot concatenate datasets of different shape or class count");
        }
        let mut images = self.images.clone();
        images.extend_from_slice(&other.images);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Dataset::new(images, self.dims(), labels, self.num_classes, SplitManifest::default())
    }
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let images = TensorFile::read(dir.join(IMAGES_FILE))?;
    let labels = TensorFile::read(dir.join(LABELS_FILE))?;
    let manifest = ManifestFile::parse(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    dataset_from_parts(images, labels, manifest)
}

/// Assembles a dataset from decoded container parts; the entry point shared
/// by [`load_dataset`] and the fuzz harness.
pub fn dataset_from_parts(images: TensorFile, labels: TensorFile, manifest: ManifestFile) -> Result<Dataset> {
    let dims = images.dims();
    if dims.len() != 4 {
        return Err(Error::Format(format!("images must be rank 4, got {dims:?}")));
    }
    if labels.dims() != [dims[0]] {
        return Err(Error::Format(format!(
            "labels shape {:?} does not match N={}",
            labels.dims(),
            dims[0]
        )));
    }
    let pixels: Vec<f32> = match images.into_data() {
        TensorData::F32(v) => v,
        TensorData::U8(v) => v.into_iter().map(|b| b as f32 / 255.0).collect(),
    };
    let labels: Vec<u32> = match labels.into_data() {
        TensorData::U8(v) => v.into_iter().map(u32::from).collect(),
        TensorData::F32(v) => {
            let mut out = Vec::with_capacity(v.len());
            for x in v {
                if !(x >= 0.0 && x.fract() == 0.0 && x <= u32::MAX as f32) {
                    return invalid(format!("label {x} is not a nonnegative integer"));
                }
                out.push(x as u32);
            }
            out
        }
    };
    let split = SplitManifest {
        train_idx: manifest.train_idx,
        val_idx: manifest.val_idx,
        test_idx: manifest.test_idx,
    };
    Dataset::new(pixels, [dims[1], dims[2], dims[3]], labels, manifest.k, split)
}

pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let [h, w, c] = ds.dims();
    TensorFile::from_f32(&[ds.len(), h, w, c], ds.images.clone())?.write(dir.join(IMAGES_FILE))?;
    let labels = if ds.num_classes <= 256 {
        TensorFile::from_u8(&[ds.len()], ds.labels.iter().map(|&l| l as u8).collect())?
    } else {
        TensorFile::from_f32(&[ds.len()], ds.labels.iter().map(|&l| l as f32).collect())?
    };
    labels.write(dir.join(LABELS_FILE))?;
    let manifest = ManifestFile {
        train_idx: ds.split.train_idx.clone(),
        val_idx: ds.split.val_idx.clone(),
        test_idx: ds.split.test_idx.clone(),
        k: ds.num_classes,
    };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string(&manifest)?)?;
    Ok(())
}

/// Shuffles under `seed` and assigns `floor(fraction * N)` indices to each
/// part. With `stratified`, each class is split close to proportionally.
pub fn split_dataset(
    ds: &Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
    stratified: bool,
) -> Result<Dataset> {
    let fr = [fractions.0, fractions.1, fractions.2];
    if fr.iter().any(|f| !(*f >= 0.0)) {
        return invalid("split fractions must be nonnegative");
    }
    if fr.iter().sum::<f64>() > 1.0 + 1e-12 {
        return invalid("split fractions sum to more than 1");
    }
    let n = ds.len();
    // Nudge before flooring so fractions like 55000/70000 land on the integer.
    let sizes: Vec<usize> = fr
        .iter()
        .map(|f| ((f * n as f64) * (1.0 + 1e-12)).floor() as usize)
        .collect();
    let mut rng = SeededRng::new(seed, SPLIT_STREAM);
    let parts = if stratified {
        stratified_parts(ds, &sizes, &fr, &mut rng)
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let mut parts = Vec::new();
        let mut at = 0;
        for &s in &sizes {
            let s = s.min(n - at);
            parts.push(order[at..at + s].to_vec());
            at += s;
        }
        parts
    };
    let mut parts = parts.into_iter().map(|mut p| {
        p.sort_unstable();
        p
    });
    let split = SplitManifest {
        train_idx: parts.next().unwrap_or_default(),
        val_idx: parts.next().unwrap_or_default(),
        test_idx: parts.next().unwrap_or_default(),
    };
    ds.clone().with_split(split)
}

const SPLIT_STREAM: u64 = 0x5eed_5917;

fn stratified_parts(ds: &Dataset, sizes: &[usize], fr: &[f64], rng: &mut SeededRng) -> Vec<Vec<usize>> {
    let k = ds.num_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for i in 0..ds.len() {
        by_class[ds.label(i)].push(i);
    }
    for members in &mut by_class {
        rng.shuffle(members);
    }
    let mut taken = vec![0usize; k];
    let mut parts = Vec::with_capacity(sizes.len());
    for (s, &size) in sizes.iter().enumerate() {
        let mut quota: Vec<usize> = (0..k)
            .map(|c| ((fr[s] * by_class[c].len() as f64).floor() as usize).min(by_class[c].len() - taken[c]))
            .collect();
        let mut remaining = size.saturating_sub(quota.iter().sum());
        // Largest-remainder top-up, respecting what each class has left.
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| {
            let ra = (fr[s] * by_class[a].len() as f64).fract();
            let rb = (fr[s] * by_class[b].len() as f64).fract();
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        while remaining > 0 {
            let mut progressed = false;
            for &c in &order {
                if remaining == 0 {
                    break;
                }
                if taken[c] + quota[c] < by_class[c].len() {
                    quota[c] += 1;
                    remaining -= 1;
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }
        let mut part = Vec::with_capacity(size);
        for c in 0..k {
            part.extend_from_slice(&by_class[c][taken[c]..taken[c] + quota[c]]);
            taken[c] += quota[c];
        }
        parts.push(part);
    }
    parts
}

/// Nearest-neighbour resampling: target pixel `(i, j)` reads source
/// `(floor(i*H/h), floor(j*W/w))`.
pub fn resize_nearest(ds: &Dataset, h: usize, w: usize) -> Result<Dataset> {
    if h == 0 || w == 0 {
        return invalid("resize target must be at least 1x1");
    }
    let [sh, sw, c] = ds.dims();
    let row_map: Vec<usize> = (0..h).map(|i| i * sh / h).collect();
    let col_map: Vec<usize> = (0..w).map(|j| j * sw / w).collect();
    let mut images = Vec::with_capacity(ds.len() * h * w * c);
    for n in 0..ds.len() {
        let src = ds.image(n);
        for &si in &row_map {
            for &sj in &col_map {
                let base = (si * sw + sj) * c;
                images.extend_from_slice(&src[base..base + c]);
            }
        }
    }
    Dataset::new(images, [h, w, c], ds.labels.clone(), ds.num_classes, ds.split.clone())
}
