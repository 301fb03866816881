//! A detector together with its embedding bank and optional pixel-space adapter.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::boxes::Detection;
use crate::data::{Image, Sample};
use crate::detector::{
    assign_targets, decode, detection_loss, forward, DecodeConfig, DetectorConfig, LossBreakdown, LossConfig,
    RawPredictions, RawVars,
};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::prompts::{apply_static, compose, translate, StaticPrompt, Translator};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::{effective_embeddings, EmbeddingBank};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Adapter {
    #[default]
    None,
    Static(StaticPrompt),
    Translator(Translator),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub detector: DetectorConfig,
    pub loss: LossConfig,
    pub vocab: Vec<String>,
    pub adapter: Adapter,
    pub params: ParamStore<T>,
}

/// Options for one recorded forward pass.
#[derive(Clone, Copy, Debug)]
pub struct PassOptions {
    /// Route the image through the adapter (disabled for retention audits).
    pub use_adapter: bool,
    /// Patch origin for patch prompts.
    pub origin: (usize, usize),
    /// Make the input image a differentiable leaf.
    pub image_grad: bool,
}

impl Default for PassOptions {
    fn default() -> Self {
        PassOptions {
            use_adapter: true,
            origin: (0, 0),
            image_grad: false,
        }
    }
}

pub struct Pass {
    pub image: Var,
    pub adapted: Var,
    pub raw: RawVars,
}

impl<T: Scalar> Model<T> {
    /// Fresh detector with offline embeddings for `vocab` and zero residuals.
    pub fn init(detector: DetectorConfig, vocab: &[String], seed: u64) -> Result<Self> {
        let mut params = detector.init_params(seed)?;
        params.extend(EmbeddingBank::new(vocab, detector.embed_dim, seed)?.into_store());
        Ok(Model {
            detector,
            loss: LossConfig::default(),
            vocab: vocab.to_vec(),
            adapter: Adapter::None,
            params,
        })
    }

    /// Attaches an adapter and its parameters, replacing any previous one.
    pub fn with_adapter(mut self, adapter: Adapter, params: ParamStore<T>) -> Self {
        self.params = self
            .params
            .filtered(|k| !k.starts_with("prompt.") && !k.starts_with("translator."));
        self.params.extend(params);
        self.adapter = adapter;
        self
    }

    pub fn bank(&self) -> Result<EmbeddingBank<T>> {
        EmbeddingBank::from_store(&self.params, &self.vocab)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            detector: self.detector.clone(),
            loss: self.loss.clone(),
            vocab: self.vocab.clone(),
            adapter: self.adapter.clone(),
            params: self.params.cast(),
        }
    }

    pub fn image_tensor(image: &Image) -> Tensor<T> {
        image.pixels.cast()
    }

    /// Records adapter, embeddings and detector for `image` on `g`.
    pub fn record(
        &self,
        g: &mut Graph<T>,
        binder: &mut Binder<T>,
        image: Tensor<T>,
        opts: PassOptions,
    ) -> Result<Pass> {
        let x = g.leaf(image, opts.image_grad);
        let adapted = if opts.use_adapter {
            match &self.adapter {
                Adapter::None => x,
                Adapter::Static(p) => apply_static(g, binder, p, x, opts.origin)?,
                Adapter::Translator(t) => {
                    let r = translate(g, binder, t, x)?;
                    compose(g, x, r)?
                }
            }
        } else {
            x
        };
        let emb = effective_embeddings(g, binder)?;
        let raw = forward(g, binder, &self.detector, adapted, emb)?;
        Ok(Pass {
            image: x,
            adapted,
            raw,
        })
    }

    pub fn predict(&self, image: &Image, use_adapter: bool) -> Result<RawPredictions<T>> {
        let none = BTreeSet::new();
        let mut b = Binder::new(&self.params, &none);
        let mut g = Graph::new();
        let opts = PassOptions {
            use_adapter,
            ..PassOptions::default()
        };
        let pass = self.record(&mut g, &mut b, Self::image_tensor(image), opts)?;
        Ok(RawPredictions::from_graph(&g, pass.raw, &self.detector))
    }

    pub fn detect(&self, image: &Image, cfg: &DecodeConfig, use_adapter: bool) -> Result<Vec<Detection>> {
        let raw = self.predict(image, use_adapter)?;
        Ok(decode(&raw, self.detector.image_size, cfg))
    }

    /// The image as the detector sees it after adaptation (eval placement).
    pub fn adapted_image(&self, image: &Image) -> Result<Image> {
        let none = BTreeSet::new();
        let mut b = Binder::new(&self.params, &none);
        let mut g = Graph::new();
        let pass = self.record(&mut g, &mut b, Self::image_tensor(image), PassOptions::default())?;
        Ok(Image {
            pixels: g.value(pass.adapted).cast(),
            modality: image.modality,
        })
    }

    /// Loss on one sample and gradients for every key in `trainable`.
    pub fn loss_and_grads(
        &self,
        sample: &Sample,
        trainable: &BTreeSet<String>,
        opts: PassOptions,
    ) -> Result<(LossBreakdown, BTreeMap<String, Tensor<T>>)> {
        let (b, grads, _) = self.loss_and_grads_with_input(Self::image_tensor(&sample.image), &sample.gt.boxes, &self.gt_indices(sample)?, trainable, opts)?;
        Ok((b, grads))
    }

    pub fn gt_indices(&self, sample: &Sample) -> Result<Vec<usize>> {
        sample.gt.category_indices(&self.vocab)
    }

    /// Like [`Model::loss_and_grads`] for a raw image tensor; also returns the
    /// gradient w.r.t. the input when `opts.image_grad` is set.
    pub fn loss_and_grads_with_input(
        &self,
        image: Tensor<T>,
        boxes: &[[f64; 4]],
        categories: &[usize],
        trainable: &BTreeSet<String>,
        opts: PassOptions,
    ) -> Result<(LossBreakdown, BTreeMap<String, Tensor<T>>, Option<Tensor<T>>)> {
        if let Some(missing) = trainable.iter().find(|k| !self.params.contains(k)) {
            return Err(Error::Unknown {
                what: "trainable parameter",
                name: missing.clone(),
            });
        }
        let mut binder = Binder::new(&self.params, trainable);
        let mut g = Graph::new();
        let pass = self.record(&mut g, &mut binder, image, opts)?;
        let assignment = assign_targets(
            boxes,
            categories,
            self.detector.grid(),
            self.detector.image_size,
            self.loss.center_radius,
        );
        let (root, breakdown) = detection_loss(&mut g, pass.raw, &assignment, &self.loss)?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite("detection loss".into()));
        }
        let grads = g.backward(root);
        let input_grad = if opts.image_grad {
            grads.get(pass.image).cloned()
        } else {
            None
        };
        Ok((breakdown, binder.collect(&grads), input_grad))
    }
}
