//! On-disk dataset layout: `<root>/<split>/images/<id>.png`,
//! `<root>/<split>/annotations/<id>.json` and `<root>/manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::render::{render_modality, Image, Modality};
use super::scene::{generate_scene, SceneLimits};
use super::GroundTruth;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SCHEMA: &str = "modprompt-data/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub root: PathBuf,
    pub modality: Modality,
    /// `(split name, image count)` in write order.
    pub splits: Vec<(String, usize)>,
    pub vocab: Vec<String>,
    pub seed: u64,
    pub limits: SceneLimits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub size: usize,
    pub ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema: String,
    pub modality: Modality,
    pub vocab: Vec<String>,
    pub seed: u64,
    pub canvas: (usize, usize),
    pub splits: BTreeMap<String, SplitEntry>,
}

impl DatasetManifest {
    pub fn total(&self) -> usize {
        self.splits.values().map(|s| s.size).sum()
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub gt: GroundTruth,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub splits: BTreeMap<String, Vec<Sample>>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[Sample]> {
        self.splits
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Unknown {
                what: "split",
                name: name.to_string(),
            })
    }
}

/// Scene seed for image `index` of `split`. Independent of the modality, so
/// every modality written with the same generator seed is pixel-paired.
pub fn scene_seed(seed: u64, split: &str, index: usize) -> u64 {
    // FNV-1a over the split name, then splitmix64 finalisation
    let mut hsh: u64 = 0xcbf2_9ce4_8422_2325;
    for b in split.bytes() {
        hsh ^= b as u64;
        hsh = hsh.wrapping_mul(0x100_0000_01b3);
    }
    let mut z = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(hsh)
        .wrapping_add(index as u64);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn image_id(i: usize) -> String {
    format!("{i:06}")
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// The image exactly as it reads back from an 8-bit PNG.
pub fn quantize(image: &Image) -> Image {
    Image {
        pixels: image.pixels.map(|v| to_u8(v) as f32 / 255.0),
        modality: image.modality,
    }
}

/// Split `split` of a dataset generated in memory, identical to what
/// [`write_dataset`] followed by [`load_split`] yields.
pub fn synthesize_split(
    modality: Modality,
    vocab: &[String],
    limits: &SceneLimits,
    seed: u64,
    split: &str,
    size: usize,
) -> Result<Vec<Sample>> {
    limits.validate()?;
    (0..size)
        .map(|i| {
            let spec = generate_scene(scene_seed(seed, split, i), vocab, limits)?;
            Ok(Sample {
                id: image_id(i),
                image: quantize(&render_modality(&spec, modality)),
                gt: GroundTruth::from_scene(&spec),
            })
        })
        .collect()
}

pub fn save_png(image: &Image, path: &Path) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| to_u8(image.pixels.at3(c, y, x)));
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_png(path: &Path, modality: Modality) -> Result<Image> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            t.set3(c, y as usize, x as usize, p.0[c] as f32 / 255.0);
        }
    }
    Ok(Image { pixels: t, modality })
}

fn write_json<S: Serialize>(path: &Path, v: &S) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(v)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_dataset(cfg: &GenerationConfig) -> Result<DatasetManifest> {
    cfg.limits.validate()?;
    let mut splits = BTreeMap::new();
    for (name, size) in &cfg.splits {
        let img_dir = cfg.root.join(name).join("images");
        let ann_dir = cfg.root.join(name).join("annotations");
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        fs::create_dir_all(&ann_dir).map_err(|e| Error::io(&ann_dir, e))?;
        let mut ids = Vec::with_capacity(*size);
        for i in 0..*size {
            let spec = generate_scene(scene_seed(cfg.seed, name, i), &cfg.vocab, &cfg.limits)?;
            let image = render_modality(&spec, cfg.modality);
            let id = image_id(i);
            save_png(&image, &img_dir.join(format!("{id}.png")))?;
            write_json(&ann_dir.join(format!("{id}.json")), &GroundTruth::from_scene(&spec))?;
            ids.push(id);
        }
        splits.insert(name.clone(), SplitEntry { size: *size, ids });
    }
    let manifest = DatasetManifest {
        schema: SCHEMA.to_string(),
        modality: cfg.modality,
        vocab: cfg.vocab.clone(),
        seed: cfg.seed,
        canvas: cfg.limits.canvas,
        splits,
    };
    write_json(&cfg.root.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_slice(&bytes).map_err(|e| Error::Corrupt {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if manifest.schema != SCHEMA {
        return Err(Error::Corrupt {
            path,
            reason: format!("schema {:?}, expected {SCHEMA:?}", manifest.schema),
        });
    }
    Ok(manifest)
}

fn load_samples(root: &Path, manifest: &DatasetManifest, split: &str) -> Result<Vec<Sample>> {
    let entry = manifest.splits.get(split).ok_or_else(|| Error::Unknown {
        what: "split",
        name: split.to_string(),
    })?;
    entry
        .ids
        .iter()
        .map(|id| {
            let ann = root.join(split).join("annotations").join(format!("{id}.json"));
            let bytes = fs::read(&ann).map_err(|e| Error::Corrupt {
                path: ann.clone(),
                reason: e.to_string(),
            })?;
            let gt: GroundTruth = serde_json::from_slice(&bytes).map_err(|e| Error::Corrupt {
                path: ann.clone(),
                reason: e.to_string(),
            })?;
            gt.validate().map_err(|e| Error::Corrupt {
                path: ann.clone(),
                reason: e.to_string(),
            })?;
            gt.category_indices(&manifest.vocab).map_err(|e| Error::Corrupt {
                path: ann.clone(),
                reason: e.to_string(),
            })?;
            let png = root.join(split).join("images").join(format!("{id}.png"));
            let image = read_png(&png, manifest.modality)?;
            Ok(Sample {
                id: id.clone(),
                image,
                gt,
            })
        })
        .collect()
}

/// Loads one split of the dataset at `root`.
pub fn load_split(root: &Path, split: &str) -> Result<Vec<Sample>> {
    let manifest = read_manifest(root)?;
    load_samples(root, &manifest, split)
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = read_manifest(root)?;
    let mut splits = BTreeMap::new();
    for name in manifest.splits.keys() {
        splits.insert(name.clone(), load_samples(root, &manifest, name)?);
    }
    Ok(Dataset { manifest, splits })
}
