//! Synthetic paired multi-modality detection data.

mod io;
mod render;
mod scene;

use serde::{Deserialize, Serialize};

pub use io::{load_dataset, load_split, quantize, read_manifest, read_png, save_png, scene_seed, synthesize_split, write_dataset, Dataset, DatasetManifest, GenerationConfig, Sample, SCHEMA};
pub use render::{render_modality, Image, Modality};
pub use scene::{default_vocab, generate_scene, SceneLimits, SceneObject, SceneSpec, Shape, DEFAULT_VOCAB};

use crate::error::{Error, Result};

/// Annotated boxes `[x1, y1, x2, y2]` (pixels) with their category names.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub boxes: Vec<[f64; 4]>,
    pub categories: Vec<String>,
}

impl GroundTruth {
    pub fn from_scene(spec: &SceneSpec) -> Self {
        GroundTruth {
            boxes: spec.objects.iter().map(|o| o.bbox()).collect(),
            categories: spec.objects.iter().map(|o| o.category.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.boxes.len() != self.categories.len() {
            return Err(Error::Invalid(format!(
                "{} boxes but {} categories",
                self.boxes.len(),
                self.categories.len()
            )));
        }
        for b in &self.boxes {
            if !(b[0] < b[2] && b[1] < b[3]) || b.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!("degenerate box {b:?}")));
            }
        }
        Ok(())
    }

    /// Category indices into `vocab`; unknown names are an error.
    pub fn category_indices(&self, vocab: &[String]) -> Result<Vec<usize>> {
        self.categories
            .iter()
            .map(|c| {
                vocab.iter().position(|v| v == c).ok_or_else(|| Error::Unknown {
                    what: "category",
                    name: c.clone(),
                })
            })
            .collect()
    }
}
