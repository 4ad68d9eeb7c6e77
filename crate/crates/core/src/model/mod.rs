// SPDX-License-Identifier: MIT OR Apache-2.0

//! A full ViT classifier assembled from dynamic-linear layers.
//!
//! Layer stack: `PatchEmbed`, `depth × [Residual(LN, MHSA), Residual(LN,
//! Linear, Activation, Linear)]`, final `LayerNorm`, `TokenSelect(0)`, head
//! `Linear`. The composed frozen map of this stack is affine in the image,
//! which is what [`Model::effective_row`] reads off.

mod weights;

pub use weights::{NamedTensor, WeightFile, WEIGHT_MAGIC};

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynlin::{
    ActivationKind, LayerNorm, LayerSpec, Linear, OperatorCache, PatchEmbed, SelfAttention,
};
use crate::error::{DaveError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub activation: ActivationKind,
    pub num_classes: usize,
    pub ln_eps: f64,
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DaveError::Schema(msg));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.width == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} is not divisible by heads {}", self.width, self.heads));
        }
        if self.num_classes == 0 || self.mlp_hidden() == 0 {
            return bad("num_classes and mlp width must be positive".into());
        }
        if !(self.ln_eps >= 0.0) || self.norm_std.iter().any(|s| !(*s > 0.0)) {
            return bad("ln_eps must be >= 0 and norm_std > 0".into());
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.width as f64 * self.mlp_ratio).round() as usize
    }

    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [3, self.image_size, self.image_size]
    }

    /// Maps a `[3, H, W]` image in `[0, 1]` units to model input space.
    pub fn standardize(&self, unit: &Tensor) -> Tensor {
        self.per_channel(unit, |c, v| (v - self.norm_mean[c]) / self.norm_std[c])
    }

    /// Inverse of [`ModelConfig::standardize`].
    pub fn unstandardize(&self, x: &Tensor) -> Tensor {
        self.per_channel(x, |c, v| v * self.norm_std[c] + self.norm_mean[c])
    }

    fn per_channel(&self, x: &Tensor, f: impl Fn(usize, f64) -> f64) -> Tensor {
        let plane = x.len() / 3;
        let data = x.data().iter().enumerate().map(|(i, &v)| f(i / plane.max(1), v)).collect();
        Tensor::new(x.shape(), data).expect("same shape")
    }

    /// Expected `DAVEWGT1` tensor names and dims, in canonical write order.
    pub fn tensor_schema(&self) -> Vec<(String, Vec<usize>)> {
        let (d, p, h) = (self.width, self.patch_size, self.mlp_hidden());
        let mut s: Vec<(String, Vec<usize>)> = vec![
            ("patch.proj".into(), vec![3 * p * p, d]),
            ("patch.bias".into(), vec![d]),
            ("patch.pos".into(), vec![1 + self.num_patches(), d]),
            ("patch.cls".into(), vec![d]),
        ];
        for i in 0..self.depth {
            let b = format!("blocks.{i}");
            s.push((format!("{b}.ln1.gamma"), vec![d]));
            s.push((format!("{b}.ln1.beta"), vec![d]));
            for w in ["wq", "wk", "wv", "wo"] {
                s.push((format!("{b}.attn.{w}"), vec![d, d]));
            }
            s.push((format!("{b}.attn.bo"), vec![d]));
            s.push((format!("{b}.ln2.gamma"), vec![d]));
            s.push((format!("{b}.ln2.beta"), vec![d]));
            s.push((format!("{b}.mlp.w1"), vec![d, h]));
            s.push((format!("{b}.mlp.b1"), vec![h]));
            s.push((format!("{b}.mlp.w2"), vec![h, d]));
            s.push((format!("{b}.mlp.b2"), vec![d]));
        }
        s.push(("final.ln.gamma".into(), vec![d]));
        s.push(("final.ln.beta".into(), vec![d]));
        s.push(("head.w".into(), vec![d, self.num_classes]));
        s.push(("head.b".into(), vec![self.num_classes]));
        s
    }
}

/// Row of the composed effective transformation for one logit.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveRow {
    pub class: usize,
    /// `[3, H, W]` coefficients.
    pub row: Tensor,
    /// Value of the frozen map at the zero image.
    pub frozen_offset: f64,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    layers: Vec<LayerSpec>,
    weights: Option<WeightFile>,
}

impl Model {
    /// Builds the standard ViT stack from a weight container, checking every
    /// tensor against the config.
    pub fn from_weights(weights: WeightFile) -> Result<Self> {
        let config: ModelConfig = serde_json::from_str(&weights.config_json)
            .map_err(|e| DaveError::Schema(format!("invalid config JSON: {e}")))?;
        config.validate()?;
        let schema = config.tensor_schema();
        for t in &weights.tensors {
            if weights.tensors.iter().filter(|o| o.name == t.name).count() > 1 {
                return Err(DaveError::Schema(format!("tensor {} appears twice", t.name)));
            }
            if !schema.iter().any(|(n, _)| *n == t.name) {
                return Err(DaveError::Schema(format!("unexpected tensor {}", t.name)));
            }
        }
        let fetch = |name: &str| -> Result<Tensor> {
            let (_, dims) = schema
                .iter()
                .find(|(n, _)| n == name)
                .expect("name comes from the schema");
            let t = weights
                .get(name)
                .ok_or_else(|| DaveError::Schema(format!("missing tensor {name}")))?;
            if &t.dims != dims {
                return Err(DaveError::Schema(format!(
                    "tensor {name} has dims {:?}, expected {:?}",
                    t.dims, dims
                )));
            }
            Tensor::new(dims, t.data.iter().map(|&v| v as f64).collect())
        };
        let vec = |name: &str| -> Result<Vec<f64>> { Ok(fetch(name)?.into_data()) };
        let ln = |prefix: &str| -> Result<LayerSpec> {
            Ok(LayerSpec::LayerNorm(LayerNorm {
                gamma: vec(&format!("{prefix}.gamma"))?,
                beta: vec(&format!("{prefix}.beta"))?,
                eps: config.ln_eps,
            }))
        };

        let mut layers = vec![LayerSpec::PatchEmbed(PatchEmbed {
            image_size: config.image_size,
            patch: config.patch_size,
            proj: fetch("patch.proj")?,
            bias: vec("patch.bias")?,
            pos: fetch("patch.pos")?,
            cls: vec("patch.cls")?,
        })];
        for i in 0..config.depth {
            let b = format!("blocks.{i}");
            layers.push(LayerSpec::Residual(vec![
                ln(&format!("{b}.ln1"))?,
                LayerSpec::SelfAttention(SelfAttention {
                    wq: fetch(&format!("{b}.attn.wq"))?,
                    wk: fetch(&format!("{b}.attn.wk"))?,
                    wv: fetch(&format!("{b}.attn.wv"))?,
                    wo: fetch(&format!("{b}.attn.wo"))?,
                    bias: vec(&format!("{b}.attn.bo"))?,
                    heads: config.heads,
                }),
            ]));
            layers.push(LayerSpec::Residual(vec![
                ln(&format!("{b}.ln2"))?,
                LayerSpec::Linear(Linear {
                    weight: fetch(&format!("{b}.mlp.w1"))?,
                    bias: vec(&format!("{b}.mlp.b1"))?,
                }),
                LayerSpec::Activation(config.activation),
                LayerSpec::Linear(Linear {
                    weight: fetch(&format!("{b}.mlp.w2"))?,
                    bias: vec(&format!("{b}.mlp.b2"))?,
                }),
            ]));
        }
        layers.push(ln("final.ln")?);
        layers.push(LayerSpec::TokenSelect(0));
        layers.push(LayerSpec::Linear(Linear {
            weight: fetch("head.w")?,
            bias: vec("head.b")?,
        }));

        let model = Self {
            config,
            layers,
            weights: Some(weights),
        };
        model.check_chain()?;
        Ok(model)
    }

    /// A model over an arbitrary layer stack (test fixtures). Such a model
    /// has no weight container and cannot be saved.
    pub fn from_layers(config: ModelConfig, layers: Vec<LayerSpec>) -> Result<Self> {
        config.validate()?;
        let model = Self {
            config,
            layers,
            weights: None,
        };
        model.check_chain()?;
        Ok(model)
    }

    fn check_chain(&self) -> Result<()> {
        for l in &self.layers {
            l.validate()?;
        }
        let logits = self.forward_logits(&Tensor::zeros(&self.config.input_shape()))?;
        if logits.len() != self.config.num_classes {
            return Err(DaveError::Schema(format!(
                "layer stack emits {} outputs, config declares {} classes",
                logits.len(),
                self.config.num_classes
            )));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_weights(WeightFile::load(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.weight_file()?.save(path)
    }

    pub fn weight_file(&self) -> Result<&WeightFile> {
        self.weights
            .as_ref()
            .ok_or_else(|| DaveError::Contract("model was built from raw layers".into()))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.config.input_shape()
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        if image.shape() != self.input_shape() {
            return Err(DaveError::shape("model input", image.shape(), &self.input_shape()));
        }
        Ok(())
    }

    fn check_class(&self, k: usize) -> Result<()> {
        if k >= self.config.num_classes {
            return Err(DaveError::Param(format!(
                "class {k} out of range for {} classes",
                self.config.num_classes
            )));
        }
        Ok(())
    }

    /// Conditioned forward pass with `C = X` at every layer: the logits and
    /// the operators frozen along the way.
    pub fn condition(&self, image: &Tensor) -> Result<(Tensor, Vec<OperatorCache>)> {
        self.check_image(image)?;
        let mut x = image.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (next, cache) = l.condition(&x)?;
            caches.push(cache);
            x = next;
        }
        let n = x.len();
        Ok((x.reshape(&[n])?, caches))
    }

    /// The composed frozen affine map evaluated at `x`.
    pub fn apply_frozen(&self, caches: &[OperatorCache], x: &Tensor) -> Result<Tensor> {
        self.check_image(x)?;
        if caches.len() != self.layers.len() {
            return Err(DaveError::Contract("cache list does not match layer stack".into()));
        }
        let mut y = x.clone();
        for (l, c) in self.layers.iter().zip(caches) {
            y = l.apply_frozen(c, &y)?;
        }
        let n = y.len();
        y.reshape(&[n])
    }

    pub fn forward_logits(&self, image: &Tensor) -> Result<Tensor> {
        self.check_image(image)?;
        let mut x = image.clone();
        for l in &self.layers {
            x = l.forward_standard(&x)?;
        }
        let n = x.len();
        x.reshape(&[n])
    }

    fn backward(&self, caches: &[OperatorCache], cograd: &[f64], full: bool) -> Result<Tensor> {
        if cograd.len() != self.config.num_classes {
            return Err(DaveError::shape(
                "cogradient",
                &[cograd.len()],
                &[self.config.num_classes],
            ));
        }
        let mut g = Tensor::new(&[1, cograd.len()], cograd.to_vec())?;
        for (l, c) in self.layers.iter().zip(caches).rev() {
            g = if full {
                l.backward_full(c, &g)?
            } else {
                l.backward_effective(c, &g)?
            };
        }
        Ok(g)
    }

    /// Effective-transformation row for an arbitrary logit cogradient.
    pub fn effective_backward(&self, image: &Tensor, cograd: &[f64]) -> Result<(Tensor, f64)> {
        let (_, caches) = self.condition(image)?;
        let row = self.backward(&caches, cograd, false)?;
        let at_zero = self.apply_frozen(&caches, &Tensor::zeros(&self.input_shape()))?;
        let offset = at_zero.data().iter().zip(cograd).map(|(a, b)| a * b).sum();
        Ok((row, offset))
    }

    pub fn effective_row(&self, image: &Tensor, k: usize) -> Result<EffectiveRow> {
        self.check_class(k)?;
        let (row, frozen_offset) = self.effective_backward(image, &self.one_hot(k))?;
        Ok(EffectiveRow {
            class: k,
            row,
            frozen_offset,
        })
    }

    fn one_hot(&self, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.config.num_classes];
        v[k] = 1.0;
        v
    }

    /// True gradient `∂ logit_k / ∂ image` by reverse accumulation through
    /// both the frozen path and the operator-generating paths.
    pub fn input_gradient(&self, image: &Tensor, k: usize) -> Result<Tensor> {
        self.check_class(k)?;
        let (_, caches) = self.condition(image)?;
        self.backward(&caches, &self.one_hot(k), true)
    }

    /// Central finite-difference gradient over every pixel. Exact up to
    /// `O(h²)`; used to validate [`Model::input_gradient`].
    pub fn input_gradient_fd(&self, image: &Tensor, k: usize, h: f64) -> Result<Tensor> {
        self.check_class(k)?;
        self.check_image(image)?;
        let values = (0..image.len())
            .into_par_iter()
            .map(|i| {
                let mut plus = image.clone();
                plus.data_mut()[i] += h;
                let mut minus = image.clone();
                minus.data_mut()[i] -= h;
                let a = self.forward_logits(&plus)?.data()[k];
                let b = self.forward_logits(&minus)?.data()[k];
                Ok((a - b) / (2.0 * h))
            })
            .collect::<Result<Vec<f64>>>()?;
        Tensor::new(image.shape(), values)
    }

    /// Whole-model operator variation along `dir`: logits of the frozen map
    /// conditioned at `image ± h·dir`, both applied to `image`, central
    /// differenced.
    pub fn directional_operator_variation(&self, image: &Tensor, dir: &Tensor, h: f64) -> Result<Tensor> {
        if dir.shape() != image.shape() {
            return Err(DaveError::shape("directional_operator_variation", image.shape(), dir.shape()));
        }
        let (_, plus) = self.condition(&image.add(&dir.scale(h))?)?;
        let (_, minus) = self.condition(&image.sub(&dir.scale(h))?)?;
        let a = self.apply_frozen(&plus, image)?;
        let b = self.apply_frozen(&minus, image)?;
        Ok(a.sub(&b)?.scale(0.5 / h))
    }
}

#[cfg(test)]
mod tests;
