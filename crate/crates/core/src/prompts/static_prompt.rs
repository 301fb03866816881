//! Input-independent pixel-space prompts.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PATCH_KEY: &str = "prompt.patch";
pub const FRAME_KEY: &str = "prompt.frame";
pub const MAP_KEY: &str = "prompt.map";
pub const SCALE_KEY: &str = "prompt.scale";
pub const SHIFT_KEY: &str = "prompt.shift";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    /// `p × p` patch added at the top-left corner.
    Fixed,
    /// `p × p` patch added at a per-image random location while training.
    Random,
    /// Learnable values on the outer `p`-pixel frame.
    Padding,
    /// Additive full-resolution map `x + m`.
    WeightMap,
    /// Per-pixel affine map `w ⊙ x + b`.
    WeightMapV2,
}

impl PromptKind {
    pub const ALL: [PromptKind; 5] = [
        PromptKind::Fixed,
        PromptKind::Random,
        PromptKind::Padding,
        PromptKind::WeightMap,
        PromptKind::WeightMapV2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::Fixed => "fixed",
            PromptKind::Random => "random",
            PromptKind::Padding => "padding",
            PromptKind::WeightMap => "weight_map",
            PromptKind::WeightMapV2 => "weight_map_v2",
        }
    }

    pub fn uses_patch_size(self) -> bool {
        matches!(self, PromptKind::Fixed | PromptKind::Random | PromptKind::Padding)
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PromptKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Unknown {
                what: "prompt kind",
                name: s.to_string(),
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticPrompt {
    pub kind: PromptKind,
    pub patch_size: usize,
    /// `(H, W)`; prompts are always 3-channel.
    pub image_size: (usize, usize),
    /// Seed of the train-time placement schedule (random kind only).
    pub placement_seed: u64,
}

impl StaticPrompt {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if self.kind.uses_patch_size() {
            if self.patch_size == 0 {
                return Err(Error::Config("patch size must be positive".into()));
            }
            if self.patch_size > h.min(w) {
                return Err(Error::Config(format!(
                    "patch size {} larger than image {h}x{w}",
                    self.patch_size
                )));
            }
        }
        Ok(())
    }

    /// Where the patch goes for one image. Only the random kind in train mode
    /// draws from `rng`.
    pub fn origin(&self, mode: Mode, rng: &mut impl Rng) -> (usize, usize) {
        match (self.kind, mode) {
            (PromptKind::Random, Mode::Train) => {
                let (h, w) = self.image_size;
                let p = self.patch_size;
                (rng.gen_range(0..=h - p), rng.gen_range(0..=w - p))
            }
            _ => (0, 0),
        }
    }

    fn frame_mask<T: Scalar>(&self) -> Tensor<T> {
        let (h, w) = self.image_size;
        let p = self.patch_size;
        let mut m = Tensor::zeros(&[3, h, w]);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    if y < p || y >= h - p || x < p || x >= w - p {
                        m.set3(c, y, x, T::one());
                    }
                }
            }
        }
        m
    }
}

/// Zero (or identity, for the affine map) initialised prompt values.
pub fn init_prompt<T: Scalar>(
    kind: PromptKind,
    patch_size: usize,
    image_size: (usize, usize),
    seed: u64,
) -> Result<(StaticPrompt, ParamStore<T>)> {
    let prompt = StaticPrompt {
        kind,
        patch_size,
        image_size,
        placement_seed: seed,
    };
    prompt.validate()?;
    let (h, w) = image_size;
    let mut p = ParamStore::new();
    match kind {
        PromptKind::Fixed | PromptKind::Random => {
            p.insert(PATCH_KEY, Tensor::zeros(&[3, patch_size, patch_size]));
        }
        PromptKind::Padding => p.insert(FRAME_KEY, Tensor::zeros(&[3, h, w])),
        PromptKind::WeightMap => p.insert(MAP_KEY, Tensor::zeros(&[3, h, w])),
        PromptKind::WeightMapV2 => {
            p.insert(SCALE_KEY, Tensor::full(&[3, h, w], T::one()));
            p.insert(SHIFT_KEY, Tensor::zeros(&[3, h, w]));
        }
    }
    Ok((prompt, p))
}

/// Records the prompted, clamped image on `g`.
pub fn apply_static<T: Scalar>(
    g: &mut Graph<T>,
    params: &mut Binder<T>,
    prompt: &StaticPrompt,
    image: Var,
    origin: (usize, usize),
) -> Result<Var> {
    prompt.validate()?;
    let (c, h, w) = g.value(image).dims3();
    if c != 3 || (h, w) != prompt.image_size {
        return Err(Error::Shape(format!(
            "prompt for {:?} applied to [{c}, {h}, {w}]",
            prompt.image_size
        )));
    }
    let out = match prompt.kind {
        PromptKind::Fixed | PromptKind::Random => {
            let patch = params.var(g, PATCH_KEY)?;
            let p = prompt.patch_size;
            if origin.0 + p > h || origin.1 + p > w {
                return Err(Error::Invalid(format!("patch origin {origin:?} out of bounds")));
            }
            g.add_patch(image, patch, origin.0, origin.1)
        }
        PromptKind::Padding => {
            let frame = params.var(g, FRAME_KEY)?;
            let masked = g.mul_const(frame, prompt.frame_mask());
            g.add(image, masked)
        }
        PromptKind::WeightMap => {
            let m = params.var(g, MAP_KEY)?;
            g.add(image, m)
        }
        PromptKind::WeightMapV2 => {
            let s = params.var(g, SCALE_KEY)?;
            let b = params.var(g, SHIFT_KEY)?;
            let scaled = g.mul(s, image);
            g.add(scaled, b)
        }
    };
    Ok(g.clamp01(out))
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn image() -> Tensor<f64> {
        let data = (0..3 * 32 * 32).map(|i| ((i * 37 % 101) as f64) / 100.0).collect();
        Tensor::from_vec(&[3, 32, 32], data).unwrap()
    }

    fn apply(kind: PromptKind, p: usize, store: &ParamStore<f64>, x: Tensor<f64>, mode: Mode) -> Tensor<f64> {
        let prompt = StaticPrompt {
            kind,
            patch_size: p,
            image_size: (32, 32),
            placement_seed: 0,
        };
        let none = BTreeSet::new();
        let mut b = Binder::new(store, &none);
        let mut g = Graph::new();
        let v = g.constant(x);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let origin = prompt.origin(mode, &mut rng);
        let out = apply_static(&mut g, &mut b, &prompt, v, origin).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn fresh_prompts_are_identity() {
        for kind in PromptKind::ALL {
            let (_, store) = init_prompt::<f64>(kind, 6, (32, 32), 3).unwrap();
            for mode in [Mode::Train, Mode::Eval] {
                assert!(apply(kind, 6, &store, image(), mode).bitwise_eq(&image()), "{kind}");
            }
        }
    }

    #[test]
    fn unit_patch_lights_exactly_its_pixels() {
        let (_, mut store) = init_prompt::<f64>(PromptKind::Fixed, 30, (32, 32), 0).unwrap();
        *store.get_mut(PATCH_KEY).unwrap() = Tensor::full(&[3, 30, 30], 1.0);
        let out = apply(PromptKind::Fixed, 30, &store, Tensor::zeros(&[3, 32, 32]), Mode::Eval);
        let ones = out.data().iter().filter(|&&v| v == 1.0).count();
        let zeros = out.data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(ones, 30 * 30 * 3);
        assert_eq!(zeros, 3 * 32 * 32 - 30 * 30 * 3);
        assert_eq!(out.at3(2, 29, 29), 1.0);
        assert_eq!(out.at3(0, 30, 0), 0.0);
    }

    #[test]
    fn padding_touches_only_the_frame() {
        let (_, mut store) = init_prompt::<f64>(PromptKind::Padding, 3, (32, 32), 0).unwrap();
        *store.get_mut(FRAME_KEY).unwrap() = Tensor::full(&[3, 32, 32], 1.0);
        let out = apply(PromptKind::Padding, 3, &store, Tensor::zeros(&[3, 32, 32]), Mode::Eval);
        let lit = out.data().iter().filter(|&&v| v == 1.0).count();
        assert_eq!(lit, 3 * (32 * 32 - 26 * 26));
        assert_eq!(out.at3(0, 16, 16), 0.0);
    }

    #[test]
    fn random_placement_moves_only_in_train_mode() {
        let prompt = StaticPrompt {
            kind: PromptKind::Random,
            patch_size: 8,
            image_size: (32, 32),
            placement_seed: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let origins: BTreeSet<_> = (0..20).map(|_| prompt.origin(Mode::Train, &mut rng)).collect();
        assert!(origins.len() > 1);
        assert!(origins.iter().all(|&(y, x)| y <= 24 && x <= 24));
        assert_eq!(prompt.origin(Mode::Eval, &mut rng), (0, 0));
    }

    #[test]
    fn oversized_patch_is_rejected() {
        assert!(init_prompt::<f32>(PromptKind::Fixed, 33, (32, 32), 0).is_err());
        assert!(init_prompt::<f32>(PromptKind::WeightMap, 33, (32, 32), 0).is_ok());
        assert!("vp-zoom".parse::<PromptKind>().is_err());
    }

    #[test]
    fn outputs_are_clamped() {
        let (_, mut store) = init_prompt::<f64>(PromptKind::WeightMapV2, 0, (32, 32), 0).unwrap();
        *store.get_mut(SCALE_KEY).unwrap() = Tensor::full(&[3, 32, 32], 5.0);
        *store.get_mut(SHIFT_KEY).unwrap() = Tensor::full(&[3, 32, 32], -0.5);
        let out = apply(PromptKind::WeightMapV2, 0, &store, image(), Mode::Eval);
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
