//! Vision-transformer masked autoencoder: configuration and parameters.
//!
//! The forward passes live in [`forward`]. Parameters are a flat map from
//! dotted names to shared tensors so that many per-sample graphs can bind the
//! same weights without copying.

mod forward;

use std::collections::BTreeMap;
use std::sync::Arc;

use image::RgbImage;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{patchify, MaskError, Modality, PatchGrid};
use crate::rng;
use crate::stain::StainTriplet;
use crate::tensor::{Graph, Tensor, TensorError, Var};

pub use forward::{
    attention_image, attention_maps, decode_mae, decode_mae_ordered, decode_mmae, decode_mmae_ordered, embed_tokens, encode,
    encode_ordered, finetune_forward, global_embedding, pretrain_loss, reconstruction_loss, sincos_2d, threshold_map,
    EncoderOutput, LN_EPS,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid model config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mlp_ratio: usize,
    pub num_global_tokens: usize,
    pub image_size: usize,
    pub patch_size: usize,
    /// 1 for RGB only, 3 for RGB + H + E.
    pub modalities: usize,
}

impl EncoderConfig {
    pub fn embed_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn modality_list(&self) -> &'static [Modality] {
        if self.modalities == 3 {
            &Modality::ALL
        } else {
            &Modality::ALL[..1]
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub has_cross_attention: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub num_classes: usize,
}

impl ModelConfig {
    /// ViT-S/16 on 224-pixel tiles, 3-head decoder of width 192 and depth 2.
    pub fn vit_small(modalities: usize, num_classes: usize) -> Self {
        Self {
            encoder: EncoderConfig {
                depth: 12,
                heads: 6,
                head_dim: 64,
                mlp_ratio: 4,
                num_global_tokens: 1,
                image_size: 224,
                patch_size: 16,
                modalities,
            },
            decoder: DecoderConfig {
                depth: 2,
                heads: 3,
                embed_dim: 192,
                has_cross_attention: modalities == 3,
            },
            num_classes,
        }
    }

    /// 32-pixel tiles, 8-pixel patches (16 positions), width 32, depth 2.
    pub fn desk(modalities: usize, num_classes: usize) -> Self {
        Self {
            encoder: EncoderConfig {
                depth: 2,
                heads: 2,
                head_dim: 16,
                mlp_ratio: 4,
                num_global_tokens: 1,
                image_size: 32,
                patch_size: 8,
                modalities,
            },
            decoder: DecoderConfig {
                depth: 2,
                heads: 2,
                embed_dim: 32,
                has_cross_attention: modalities == 3,
            },
            num_classes,
        }
    }

    pub fn grid(&self) -> Result<PatchGrid, ModelError> {
        Ok(PatchGrid::new(self.encoder.image_size, self.encoder.patch_size)?)
    }

    pub fn is_multimodal(&self) -> bool {
        self.encoder.modalities == 3
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let e = &self.encoder;
        let d = &self.decoder;
        let bad = |m: String| Err(ModelError::Config(m));
        if e.depth == 0 || e.heads == 0 || e.head_dim == 0 || e.mlp_ratio == 0 {
            return bad("encoder depth, heads, head_dim and mlp_ratio must be positive".into());
        }
        if e.modalities != 1 && e.modalities != 3 {
            return bad(format!("modalities must be 1 or 3, got {}", e.modalities));
        }
        if !e.embed_dim().is_multiple_of(4) || !d.embed_dim.is_multiple_of(4) {
            return bad("embedding widths must be divisible by 4 for 2-D sin-cos positions".into());
        }
        if d.depth == 0 || d.heads == 0 || !d.embed_dim.is_multiple_of(d.heads) {
            return bad(format!("decoder width {} not divisible into {} heads", d.embed_dim, d.heads));
        }
        if e.modalities == 3 && !d.has_cross_attention {
            return bad("the multi-modal decoder needs its cross-attention layer".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        self.grid()?;
        Ok(())
    }
}

/// Input channels of a modality's patch projection. H and E images are gray.
pub fn channels(m: Modality) -> usize {
    match m {
        Modality::Rgb => 3,
        Modality::H | Modality::E => 1,
    }
}

/// Maps an 8-bit value to `[-1, 1]`.
pub fn pixel_value(v: u8) -> f64 {
    (v as f64 / 255.0 - 0.5) / 0.5
}

/// `[C × S × S]` input tensor; gray modalities read the first channel.
pub fn image_tensor(img: &RgbImage, m: Modality) -> Tensor {
    let (w, h) = img.dimensions();
    let c = channels(m);
    let n = (w * h) as usize;
    let mut data = vec![0.0; c * n];
    for (p, px) in img.pixels().enumerate() {
        for ch in 0..c {
            data[ch * n + p] = pixel_value(px.0[ch]);
        }
    }
    Tensor::new(vec![c, h as usize, w as usize], data).expect("image buffer")
}

/// Patch tokens of every modality the model reads.
pub type ModalityTokens = BTreeMap<Modality, Tensor>;

pub fn triplet_tokens(
    triplet: &StainTriplet,
    grid: &PatchGrid,
    modalities: &[Modality],
) -> Result<ModalityTokens, ModelError> {
    modalities
        .iter()
        .map(|&m| {
            let img = match m {
                Modality::Rgb => &triplet.rgb,
                Modality::H => &triplet.h_channel,
                Modality::E => &triplet.e_channel,
            };
            Ok((m, patchify(&image_tensor(img, m), grid)?))
        })
        .collect()
}

pub fn rgb_tokens(img: &RgbImage, grid: &PatchGrid) -> Result<Tensor, ModelError> {
    Ok(patchify(&image_tensor(img, Modality::Rgb), grid)?)
}

/// Named model weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Arc<Tensor>>,
}

const INIT_STD: f64 = 0.02;

fn trunc_normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let x: f64 = normal.sample(rng);
            if x.abs() <= 2.0 * std {
                break x;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

struct Init<'a, R: Rng> {
    rng: &'a mut R,
    out: BTreeMap<String, Arc<Tensor>>,
}

impl<R: Rng> Init<'_, R> {
    fn put(&mut self, name: String, t: Tensor) {
        self.out.insert(name, Arc::new(t));
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize) {
        let w = trunc_normal(self.rng, &[d_in, d_out], INIT_STD);
        self.put(format!("{name}.w"), w);
        self.put(format!("{name}.b"), Tensor::zeros(&[d_out]));
    }

    fn norm(&mut self, name: &str, d: usize) {
        self.put(format!("{name}.g"), Tensor::full(&[d], 1.0));
        self.put(format!("{name}.b"), Tensor::zeros(&[d]));
    }

    fn block(&mut self, name: &str, d: usize, mlp_ratio: usize) {
        self.norm(&format!("{name}.ln1"), d);
        self.linear(&format!("{name}.attn.qkv"), d, 3 * d);
        self.linear(&format!("{name}.attn.proj"), d, d);
        self.norm(&format!("{name}.ln2"), d);
        self.linear(&format!("{name}.mlp.fc1"), d, mlp_ratio * d);
        self.linear(&format!("{name}.mlp.fc2"), mlp_ratio * d, d);
    }
}

impl ModelParams {
    /// Truncated-normal (std 0.02) projections, zero biases, unit layer-norm
    /// gains, zero classifier.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let e = &cfg.encoder;
        let d = &cfg.decoder;
        let de = e.embed_dim();
        let dd = d.embed_dim;
        let p2 = e.patch_size * e.patch_size;
        let mut rng = rng::stream(seed, &[rng::tag::INIT]);
        let mut init = Init {
            rng: &mut rng,
            out: BTreeMap::new(),
        };
        for &m in e.modality_list() {
            init.linear(&format!("enc.patch.{m}"), p2 * channels(m), de);
        }
        if e.num_global_tokens > 0 {
            let t = trunc_normal(init.rng, &[e.num_global_tokens, de], INIT_STD);
            init.put("enc.global".into(), t);
        }
        for i in 0..e.depth {
            init.block(&format!("enc.block{i}"), de, e.mlp_ratio);
        }
        init.norm("enc.norm", de);

        init.linear("dec.embed", de, dd);
        let t = trunc_normal(init.rng, &[1, dd], INIT_STD);
        init.put("dec.mask_token".into(), t);
        if d.has_cross_attention {
            init.norm("dec.cross.ln_q", dd);
            init.norm("dec.cross.ln_kv", dd);
            init.linear("dec.cross.q", dd, dd);
            init.linear("dec.cross.kv", dd, 2 * dd);
            init.linear("dec.cross.proj", dd, dd);
            init.norm("dec.cross.ln2", dd);
            init.linear("dec.cross.mlp.fc1", dd, e.mlp_ratio * dd);
            init.linear("dec.cross.mlp.fc2", e.mlp_ratio * dd, dd);
        }
        for i in 0..d.depth {
            init.block(&format!("dec.block{i}"), dd, e.mlp_ratio);
        }
        init.norm("dec.norm", dd);
        init.linear("dec.pred", dd, p2 * 3);

        init.norm("head.norm", de);
        init.put("head.fc.w".into(), Tensor::zeros(&[de, cfg.num_classes]));
        init.put("head.fc.b".into(), Tensor::zeros(&[cfg.num_classes]));
        Ok(Self { tensors: init.out })
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self {
            tensors: tensors.into_iter().map(|(k, v)| (k, Arc::new(v))).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name).map(Arc::as_ref)
    }

    pub fn shared(&self, name: &str) -> Option<&Arc<Tensor>> {
        self.tensors.get(name)
    }

    pub fn set(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_string(), Arc::new(t));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// Copies the encoder (and patch/global tensors) from `other`, leaving
    /// this model's decoder and head untouched.
    pub fn load_encoder_from(&mut self, other: &ModelParams) {
        for (k, v) in &other.tensors {
            if k.starts_with("enc.") && self.tensors.contains_key(k) {
                self.tensors.insert(k.clone(), v.clone());
            }
        }
    }

    /// Applies `f(name, tensor)` to every weight in place.
    pub fn update(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        for (k, v) in self.tensors.iter_mut() {
            f(k, Arc::make_mut(v));
        }
    }

    /// Places every tensor on `g` as a leaf. `trainable(name)` decides which
    /// leaves require gradients.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), g.shared_leaf(v.clone(), trainable(k))))
                .collect(),
        }
    }
}

/// Parameters placed on one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var, ModelError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::Contract(format!("missing parameter {name}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Gradients after a backward pass; parameters the loss never reached
    /// get zeros.
    pub fn grads(&self, g: &Graph) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter(|(_, v)| g.requires_grad(**v))
            .map(|(k, v)| {
                let t = g
                    .grad(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.value(*v).shape()));
                (k.clone(), t)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests;
