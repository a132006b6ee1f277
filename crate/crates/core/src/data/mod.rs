//! Datasets: synthetic generation, stratified splits, PNG/manifest IO.

pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::rng;
use crate::stain::{separate, SnmfConfig, StainError, StainTriplet};

pub use synth::{synth_generate, ClassParams, SynthSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("stratification error: {0}")]
    Stratification(String),
    #[error(transparent)]
    Stain(#[from] StainError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    All,
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::All => "all",
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self, DataError> {
        match s {
            "all" => Ok(Split::All),
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(DataError::Manifest(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub id: String,
    pub triplet: StainTriplet,
    pub label: usize,
    /// Nuclei placed by the generator; `None` for loaded data.
    pub nuclei: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub items: Vec<Item>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.label).collect()
    }

    fn with_items(&self, items: Vec<Item>, split: Split) -> Dataset {
        Dataset {
            items,
            class_names: self.class_names.clone(),
            split,
        }
    }
}

/// Stratified split: each class contributes `round(fraction · count)` items
/// to the train side (at least one item on each side).
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::Stratification(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..dataset.num_classes() {
        let mut idx: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.items[i].label == class)
            .collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(DataError::Stratification(format!(
                "class {} has {} item(s); at least 2 needed",
                dataset.class_names[class],
                idx.len()
            )));
        }
        idx.shuffle(&mut rng::stream(seed, &[rng::tag::SPLIT, class as u64]));
        let k = ((train_fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        let (a, b) = idx.split_at(k);
        train.extend(a.iter().copied());
        test.extend(b.iter().copied());
    }
    train.sort_unstable();
    test.sort_unstable();
    let pick = |ix: &[usize]| ix.iter().map(|&i| dataset.items[i].clone()).collect();
    Ok((
        dataset.with_items(pick(&train), Split::Train),
        dataset.with_items(pick(&test), Split::Test),
    ))
}

/// `n` items drawn uniformly without replacement, kept in dataset order.
pub fn subset(dataset: &Dataset, n: usize, seed: u64) -> Result<Dataset, DataError> {
    if n > dataset.len() {
        return Err(DataError::Stratification(format!(
            "subset of {n} from {} items",
            dataset.len()
        )));
    }
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut rng::stream(seed, &[rng::tag::SUBSET]));
    idx.truncate(n);
    idx.sort_unstable();
    let items = idx.iter().map(|&i| dataset.items[i].clone()).collect();
    Ok(dataset.with_items(items, dataset.split))
}

pub fn load_rgb(path: &Path) -> Result<RgbImage, DataError> {
    Ok(image::open(path)?.to_rgb8())
}

pub fn save_png<P>(image: &image::ImageBuffer<P, Vec<u8>>, path: &Path) -> Result<(), DataError>
where
    P: image::Pixel<Subpixel = u8> + image::PixelWithColorType,
{
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    image.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// `<stem>_H.png` / `<stem>_E.png` next to an RGB tile.
pub fn stain_sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    path.with_file_name(format!("{stem}_{suffix}.png"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
}

pub const MANIFEST_HEADER: &str = "path,label,split";

/// Writes tiles as `<root>/<class>/<id>.png` plus `_H`/`_E` siblings and
/// returns the manifest rows.
pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<Vec<ManifestEntry>, DataError> {
    let mut rows = Vec::with_capacity(dataset.len());
    for item in &dataset.items {
        let rel = PathBuf::from(&dataset.class_names[item.label]).join(format!("{}.png", item.id));
        let abs = root.join(&rel);
        save_png(&item.triplet.rgb, &abs)?;
        save_png(&item.triplet.h_channel, &stain_sibling(&abs, "H"))?;
        save_png(&item.triplet.e_channel, &stain_sibling(&abs, "E"))?;
        rows.push(ManifestEntry {
            path: rel,
            label: item.label,
            split: dataset.split,
        });
    }
    Ok(rows)
}

pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path)?;
    if entries.is_empty() {
        w.write_record(MANIFEST_HEADER.split(','))?;
    }
    for e in entries {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, DataError> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != MANIFEST_HEADER {
        return Err(DataError::Manifest(format!(
            "expected header {MANIFEST_HEADER:?}, found {:?}",
            header.join(",")
        )));
    }
    Ok(r.deserialize().collect::<Result<Vec<ManifestEntry>, _>>()?)
}

/// Loads the RGB tile and its `_H`/`_E` siblings. Missing siblings yield
/// `Ok(None)` for the stain images so callers can separate on the fly.
pub fn load_entry(root: &Path, entry: &ManifestEntry) -> Result<(RgbImage, Option<(RgbImage, RgbImage)>), DataError> {
    let abs = root.join(&entry.path);
    let rgb = load_rgb(&abs)?;
    let (hp, ep) = (stain_sibling(&abs, "H"), stain_sibling(&abs, "E"));
    let stains = if hp.exists() && ep.exists() {
        Some((load_rgb(&hp)?, load_rgb(&ep)?))
    } else {
        None
    };
    Ok((rgb, stains))
}

/// Class names inferred from the first path component, ordered by label.
pub fn class_names_from(entries: &[ManifestEntry]) -> Vec<String> {
    let k = entries.iter().map(|e| e.label + 1).max().unwrap_or(0);
    let mut names: Vec<String> = (0..k).map(|i| format!("class{i}")).collect();
    for e in entries {
        if let Some(first) = e.path.components().next() {
            if e.path.components().count() > 1 {
                names[e.label] = first.as_os_str().to_string_lossy().into_owned();
            }
        }
    }
    names
}

/// Loads the manifest rows whose split is listed in `splits` (every row when
/// `splits` is empty). Tiles without `_H`/`_E` siblings are separated with
/// `stain`. Labels and class names come from the whole manifest.
pub fn load_dataset(manifest: &Path, splits: &[Split], stain: &SnmfConfig, exec: Exec) -> Result<Dataset, DataError> {
    let root = manifest.parent().unwrap_or(Path::new("."));
    let entries = read_manifest(manifest)?;
    let class_names = class_names_from(&entries);
    let rows: Vec<&ManifestEntry> = entries
        .iter()
        .filter(|e| splits.is_empty() || splits.contains(&e.split))
        .collect();
    let items = exec.try_map(rows.len(), |i| {
        let e = rows[i];
        let (rgb, stains) = load_entry(root, e)?;
        let triplet = match stains {
            Some((h, s)) => StainTriplet::new(rgb, h, s)?,
            None => separate(&rgb, stain)?.0,
        };
        Ok::<_, DataError>(Item {
            id: e.path.with_extension("").to_string_lossy().into_owned(),
            triplet,
            label: e.label,
            nuclei: None,
        })
    })?;
    if let Some(first) = items.first() {
        let dims = first.triplet.rgb.dimensions();
        if let Some(bad) = items.iter().find(|i| i.triplet.rgb.dimensions() != dims) {
            return Err(DataError::Manifest(format!(
                "{} is {:?}, expected {dims:?}",
                bad.id,
                bad.triplet.rgb.dimensions()
            )));
        }
    }
    Ok(Dataset {
        items,
        class_names,
        split: if splits.len() == 1 { splits[0] } else { Split::All },
    })
}
