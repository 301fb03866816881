//! Scene layout sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Disk,
    Rectangle,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Disk, Shape::Rectangle, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Disk => "disk",
            Shape::Rectangle => "rectangle",
            Shape::Triangle => "triangle",
        }
    }

    /// Shape used for category `index` of a vocabulary: a name that matches a
    /// shape keeps that shape, any other name cycles through the shapes.
    pub fn for_category(name: &str, index: usize) -> Shape {
        Shape::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .unwrap_or(Shape::ALL[index % Shape::ALL.len()])
    }

    /// Whether point `(py, px)` lies inside the shape inscribed in `bbox`.
    pub fn contains(self, bbox: [f64; 4], py: f64, px: f64) -> bool {
        let [x1, y1, x2, y2] = bbox;
        if px < x1 || px > x2 || py < y1 || py > y2 {
            return false;
        }
        let (cx, cy) = ((x1 + x2) / 2.0, (y1 + y2) / 2.0);
        let (hw, hh) = ((x2 - x1) / 2.0, (y2 - y1) / 2.0);
        match self {
            Shape::Rectangle => true,
            Shape::Disk => {
                let (dx, dy) = ((px - cx) / hw, (py - cy) / hh);
                dx * dx + dy * dy <= 1.0
            }
            Shape::Triangle => {
                // apex at top centre, base along the bottom edge
                let t = (py - y1) / (y2 - y1);
                (px - cx).abs() <= t * hw
            }
        }
    }
}

pub const DEFAULT_VOCAB: [&str; 3] = ["disk", "rectangle", "triangle"];

pub fn default_vocab() -> Vec<String> {
    DEFAULT_VOCAB.iter().map(|s| s.to_string()).collect()
}

/// Object count and extent ranges for scene sampling. Extents are rounded
/// to even pixel counts so boxes land on integer coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneLimits {
    pub canvas: (usize, usize),
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_extent: usize,
    pub max_extent: usize,
    /// Maximum IoU allowed between two placed objects.
    pub max_overlap: f64,
}

impl Default for SceneLimits {
    fn default() -> Self {
        SceneLimits {
            canvas: (96, 96),
            min_objects: 1,
            max_objects: 4,
            min_extent: 16,
            max_extent: 36,
            max_overlap: 0.1,
        }
    }
}

impl SceneLimits {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.canvas;
        if h == 0 || w == 0 {
            return Err(Error::Config("canvas must be non-empty".into()));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Config(format!(
                "object count range {}..={} is empty or allows zero objects",
                self.min_objects, self.max_objects
            )));
        }
        if self.min_extent < 2 || self.min_extent > self.max_extent {
            return Err(Error::Config(format!(
                "extent range {}..={} is invalid",
                self.min_extent, self.max_extent
            )));
        }
        if self.max_extent > h.min(w) {
            return Err(Error::Config(format!(
                "max extent {} larger than canvas {h}x{w}",
                self.max_extent
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub category: String,
    pub shape: Shape,
    /// `(y, x)` in pixels.
    pub center: (f64, f64),
    /// `(h, w)` in pixels.
    pub extent: (f64, f64),
    pub intensity: f64,
    /// Hue in `[0, 1)` used by the RGB renderer.
    pub hue: f64,
}

impl SceneObject {
    pub fn bbox(&self) -> [f64; 4] {
        let (cy, cx) = self.center;
        let (h, w) = self.extent;
        [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub canvas: (usize, usize),
    pub objects: Vec<SceneObject>,
}

fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    inter / (area(a) + area(b) - inter)
}

/// Samples a scene layout; a pure function of its arguments.
pub fn generate_scene(seed: u64, vocab: &[String], limits: &SceneLimits) -> Result<SceneSpec> {
    if vocab.is_empty() {
        return Err(Error::Config("vocabulary is empty".into()));
    }
    limits.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = limits.canvas;
    let target = rng.gen_range(limits.min_objects..=limits.max_objects);
    let half_min = limits.min_extent.div_ceil(2);
    let half_max = (limits.max_extent / 2).max(half_min);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(target);
    let mut attempts = 0;
    while objects.len() < target && attempts < 50 * target {
        attempts += 1;
        let k = rng.gen_range(0..vocab.len());
        let eh = 2 * rng.gen_range(half_min..=half_max);
        let ew = 2 * rng.gen_range(half_min..=half_max);
        let cy = rng.gen_range(eh / 2..=h - eh / 2);
        let cx = rng.gen_range(ew / 2..=w - ew / 2);
        let intensity: f64 = rng.gen();
        let hue: f64 = rng.gen();
        let obj = SceneObject {
            category: vocab[k].clone(),
            shape: Shape::for_category(&vocab[k], k),
            center: (cy as f64, cx as f64),
            extent: (eh as f64, ew as f64),
            intensity,
            hue,
        };
        let b = obj.bbox();
        if objects.iter().all(|o| iou(o.bbox(), b) <= limits.max_overlap) {
            objects.push(obj);
        }
    }
    if objects.len() < limits.min_objects {
        return Err(Error::Config(format!(
            "could not place {} objects without exceeding overlap {}",
            limits.min_objects, limits.max_overlap
        )));
    }
    Ok(SceneSpec {
        seed,
        canvas: limits.canvas,
        objects,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let v = default_vocab();
        let l = SceneLimits::default();
        let a = generate_scene(42, &v, &l).unwrap();
        let b = generate_scene(42, &v, &l).unwrap();
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
    }

    #[test]
    fn forced_single_object() {
        let l = SceneLimits {
            min_objects: 1,
            max_objects: 1,
            ..SceneLimits::default()
        };
        for seed in 0..20 {
            assert_eq!(generate_scene(seed, &default_vocab(), &l).unwrap().objects.len(), 1);
        }
    }

    #[test]
    fn every_box_inside_canvas_for_thousand_seeds() {
        let l = SceneLimits::default();
        let vocab = default_vocab();
        for seed in 0..1000 {
            let s = generate_scene(seed, &vocab, &l).unwrap();
            assert!(!s.objects.is_empty() && s.objects.len() <= l.max_objects);
            for o in &s.objects {
                let [x1, y1, x2, y2] = o.bbox();
                assert!(x1 >= 0.0 && y1 >= 0.0, "seed {seed}: {:?}", o.bbox());
                assert!(x2 <= 96.0 && y2 <= 96.0, "seed {seed}: {:?}", o.bbox());
                assert!(x1 < x2 && y1 < y2);
                assert!(vocab.contains(&o.category));
            }
        }
    }

    #[test]
    fn oversized_extent_is_a_config_error() {
        let l = SceneLimits {
            max_extent: 200,
            ..SceneLimits::default()
        };
        assert!(matches!(generate_scene(0, &default_vocab(), &l), Err(Error::Config(_))));
        assert!(generate_scene(0, &[], &SceneLimits::default()).is_err());
    }

    #[test]
    fn shape_membership() {
        let b = [0.0, 0.0, 10.0, 10.0];
        assert!(Shape::Disk.contains(b, 5.0, 5.0));
        assert!(!Shape::Disk.contains(b, 0.5, 0.5));
        assert!(Shape::Rectangle.contains(b, 0.5, 0.5));
        assert!(!Shape::Triangle.contains(b, 0.5, 0.5));
        assert!(Shape::Triangle.contains(b, 9.5, 0.5));
    }
}
