//! Dataset ingestion, splitting, image transforms and the synthetic corpus.

mod synth;
mod transform;


pub use synth::make_synthetic;
pub use transform::{
    augment, denormalize, hflip, normalize, resize_bilinear, rot90, vflip, Normalization,
    IMAGENET_MEAN, IMAGENET_STD,
};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One labeled image. `image` is `(1, C, H, W)` with values in `[0, 1]`
/// until it is normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub image: Tensor<T>,
    pub label: usize,
    /// Path relative to the dataset root, with `/` separators.
    pub source_path: String,
    pub fold: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetMeta {
    pub class_names: Vec<String>,
    pub counts: Vec<usize>,
    pub k: usize,
    pub seed: u64,
}

impl DatasetMeta {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

fn ingestion(path: &Path, reason: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn is_hidden(path: &Path) -> bool {
    path.file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.starts_with('.'))
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Class directories under `root` and the PNG files in each, both sorted.
fn scan_tree(root: &Path) -> Result<Vec<(String, Vec<PathBuf>)>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut classes = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.is_dir() && !is_hidden(&path) {
            let name = path
                .file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| ingestion(&path, "class directory name is not UTF-8"))?
                .to_string();
            classes.push((name, path));
        }
    }
    classes.sort();
    if classes.is_empty() {
        return Err(ingestion(root, "no class directories found"));
    }
    let mut out = Vec::with_capacity(classes.len());
    for (name, dir) in classes {
        let mut files = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_file() && is_png(&path) && !is_hidden(&path) {
                files.push(path);
            }
        }
        files.sort();
        if files.is_empty() {
            return Err(ingestion(&dir, "class directory contains no PNG images"));
        }
        out.push((name, files));
    }
    Ok(out)
}

/// Decodes a PNG into a `(1, 3, H, W)` tensor in `[0, 1]`. 16-bit images are
/// scaled by 1/65535, 8-bit ones by 1/255; grayscale is replicated to three
/// channels and alpha is dropped.
pub fn read_image<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let sixteen = matches!(
        img.color(),
        image::ColorType::L16
            | image::ColorType::La16
            | image::ColorType::Rgb16
            | image::ColorType::Rgba16
    );
    let interleaved: Vec<f64> = if sixteen {
        img.to_rgb16()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 65535.0)
            .collect()
    } else {
        img.to_rgb8()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 255.0)
            .collect()
    };
    let mut planar = vec![T::zero(); 3 * h * w];
    for (i, px) in interleaved.chunks_exact(3).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            planar[c * h * w + i] = T::from_f64_lossy(v);
        }
    }
    Tensor::from_vec([1, 3, h, w], planar)
}

/// Loads `root/<class>/<image>.png`, optionally resizing every image to
/// `size`, and assigns stratified folds.
///
/// Labels follow the sorted class directory names. Within each class the
/// sorted file list is shuffled with a generator seeded by `seed` and dealt
/// round-robin over the folds, with the starting fold rotated between classes
/// so fold totals also stay balanced.
pub fn load_dataset<T: Scalar>(
    root: &Path,
    k: usize,
    seed: u64,
    size: Option<(usize, usize)>,
) -> Result<(DatasetMeta, Vec<Sample<T>>)> {
    if k == 0 {
        return Err(Error::config("fold count k must be at least 1"));
    }
    let tree = scan_tree(root)?;
    let smallest = tree.iter().map(|(_, f)| f.len()).min().unwrap_or(0);
    if k > smallest {
        return Err(Error::config(format!(
            "k = {k} exceeds the smallest class size {smallest}"
        )));
    }
    let folds = assign_folds(&tree.iter().map(|(_, f)| f.len()).collect::<Vec<_>>(), k, seed);

    let mut samples = Vec::new();
    for (label, ((_, files), class_folds)) in tree.iter().zip(folds).enumerate() {
        for (path, fold) in files.iter().zip(class_folds) {
            let mut image = read_image::<T>(path)?;
            if let Some(target) = size {
                image = resize_bilinear(&image, target)?;
            }
            samples.push(Sample {
                image,
                label,
                source_path: relative_path(root, path),
                fold,
            });
        }
    }
    let meta = DatasetMeta {
        class_names: tree.iter().map(|(n, _)| n.clone()).collect(),
        counts: tree.iter().map(|(_, f)| f.len()).collect(),
        k,
        seed,
    };
    Ok((meta, samples))
}

fn relative_path(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Fold index of every sample, per class, in sorted-file order.
pub fn assign_folds(counts: &[usize], k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut start = 0;
    counts
        .iter()
        .map(|&n| {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let mut folds = vec![0; n];
            for (rank, &i) in order.iter().enumerate() {
                folds[i] = (start + rank) % k;
            }
            start = (start + n) % k;
            folds
        })
        .collect()
}

/// Held-out fold `fold_index` versus everything else.
pub fn split<T>(
    samples: &[Sample<T>],
    fold_index: usize,
    k: usize,
) -> Result<(Vec<&Sample<T>>, Vec<&Sample<T>>)> {
    if fold_index >= k {
        return Err(Error::input(format!(
            "fold index {fold_index} out of range for k = {k}"
        )));
    }
    Ok(samples.iter().partition(|s| s.fold != fold_index))
}

/// Per-class training counts for a stratified split at `train_fraction`.
///
/// The overall training count is `floor(fraction * total)`. Each class first
/// gets `floor(fraction * count)`; the remaining slots go to the classes with
/// the largest fractional parts, lower label first on ties.
pub fn stratified_train_counts(counts: &[usize], train_fraction: f64) -> Result<Vec<usize>> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::input(format!(
            "train fraction {train_fraction} must lie strictly between 0 and 1"
        )));
    }
    // absorbs representation error such as 0.6 * 5 = 2.9999999999999996
    const SLACK: f64 = 1e-9;
    let total: usize = counts.iter().sum();
    let target = (train_fraction * total as f64 + SLACK).floor() as usize;
    let exact: Vec<f64> = counts.iter().map(|&n| train_fraction * n as f64).collect();
    let mut train: Vec<usize> = exact.iter().map(|e| (e + SLACK).floor() as usize).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - train[a] as f64;
        let fb = exact[b] - train[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut remaining = target.saturating_sub(train.iter().sum());
    for &c in &order {
        if remaining == 0 {
            break;
        }
        if train[c] < counts[c] {
            train[c] += 1;
            remaining -= 1;
        }
    }
    Ok(train)
}

/// Seeded stratified split into train and test at `train_fraction`.
pub fn ratio_split<T>(
    samples: &[Sample<T>],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<&Sample<T>>, Vec<&Sample<T>>)> {
    let classes = samples.iter().map(|s| s.label + 1).max().unwrap_or(0);
    let mut by_class: Vec<Vec<&Sample<T>>> = vec![Vec::new(); classes];
    for s in samples {
        by_class[s.label].push(s);
    }
    for members in &mut by_class {
        members.sort_by(|a, b| a.source_path.cmp(&b.source_path));
    }
    let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let train_counts = stratified_train_counts(&counts, train_fraction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (mut members, n_train) in by_class.into_iter().zip(train_counts) {
        members.shuffle(&mut rng);
        let rest = members.split_off(n_train);
        train.extend(members);
        test.extend(rest);
    }
    Ok((train, test))
}

/// Role assigned to a sample by a `split.txt` manifest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum SplitRole {
    Train,
    Val,
    Test,
}

/// Reads `root/split.txt` if present: one `<relative_path> <train|val|test>`
/// per line, `#` starts a comment.
pub fn read_manifest(root: &Path) -> Result<Option<BTreeMap<String, SplitRole>>> {
    let path = root.join("split.txt");
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut roles = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(rel), Some(role), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(ingestion(&path, format!("line {}: expected `<path> <role>`", lineno + 1)));
        };
        let role = match role {
            "train" => SplitRole::Train,
            "val" => SplitRole::Val,
            "test" => SplitRole::Test,
            other => {
                return Err(ingestion(
                    &path,
                    format!("line {}: unknown role `{other}`", lineno + 1),
                ))
            }
        };
        if roles.insert(rel.to_string(), role).is_some() {
            return Err(ingestion(&path, format!("line {}: `{rel}` listed twice", lineno + 1)));
        }
    }
    Ok(Some(roles))
}

/// Partitions samples by manifest role into `(train, val, test)`. Every
/// sample must be listed.
pub fn manifest_split<'a, T>(
    samples: &'a [Sample<T>],
    manifest: &BTreeMap<String, SplitRole>,
) -> Result<(Vec<&'a Sample<T>>, Vec<&'a Sample<T>>, Vec<&'a Sample<T>>)> {
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for s in samples {
        match manifest.get(&s.source_path) {
            Some(SplitRole::Train) => train.push(s),
            Some(SplitRole::Val) => val.push(s),
            Some(SplitRole::Test) => test.push(s),
            None => {
                return Err(Error::Ingestion {
                    path: PathBuf::from("split.txt"),
                    reason: format!("`{}` is not listed", s.source_path),
                })
            }
        }
    }
    Ok((train, val, test))
}

/// Stacks sample images into one batch tensor with its label vector.
pub fn collate<T: Scalar>(samples: &[&Sample<T>]) -> Result<(Tensor<T>, Vec<usize>)> {
    let images: Vec<&Tensor<T>> = samples.iter().map(|s| &s.image).collect();
    let x = Tensor::stack(&images)?;
    Ok((x, samples.iter().map(|s| s.label).collect()))
}
