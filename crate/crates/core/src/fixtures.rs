// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded models, layers and images used by tests, diagnostics and the
//! `genmodel` command.

use crate::dynlin::{
    ActivationKind, LayerNorm, LayerSpec, Linear, PatchEmbed, SelfAttention,
};
use crate::error::Result;
use crate::model::{Model, ModelConfig, NamedTensor, WeightFile};
use crate::rng::{Rng, Substream};
use crate::tensor::Tensor;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Depth 2, width 16, 2 heads, 8-pixel patches, 32-pixel images, 4 classes.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        patch_size: 8,
        width: 16,
        depth: 2,
        heads: 2,
        mlp_ratio: 2.0,
        activation: ActivationKind::GeluErf,
        num_classes: 4,
        ln_eps: 1e-6,
        norm_mean: IMAGENET_MEAN,
        norm_std: IMAGENET_STD,
    }
}

/// A few structurally different small configs on 32×32 inputs.
pub fn config_variants() -> Vec<ModelConfig> {
    let base = tiny_config();
    vec![
        base.clone(),
        ModelConfig {
            width: 12,
            depth: 1,
            heads: 3,
            activation: ActivationKind::GeluTanh,
            num_classes: 5,
            ..base.clone()
        },
        ModelConfig {
            patch_size: 4,
            width: 8,
            depth: 3,
            heads: 2,
            mlp_ratio: 3.0,
            activation: ActivationKind::Swish,
            num_classes: 3,
            ..base
        },
    ]
}

fn randn(s: &mut Substream, dims: &[usize], scale: f64, offset: f64) -> Vec<f32> {
    let n: usize = dims.iter().product();
    (0..n)
        .map(|_| (offset + scale * s.standard_normal()) as f32)
        .collect()
}

/// Seeded random weights for `config`.
pub fn random_weights(config: &ModelConfig, seed: u64) -> WeightFile {
    let rng = Rng::new(seed);
    let (d, h) = (config.width as f64, config.mlp_hidden() as f64);
    let patch_len = (3 * config.patch_size * config.patch_size) as f64;
    let tensors = config
        .tensor_schema()
        .into_iter()
        .enumerate()
        .map(|(i, (name, dims))| {
            let mut s = rng.substream(i as u64);
            let suffix = name.rsplit('.').next().unwrap_or_default();
            let data = match suffix {
                "proj" => randn(&mut s, &dims, 1.0 / patch_len.sqrt(), 0.0),
                "pos" | "cls" => randn(&mut s, &dims, 0.5, 0.0),
                "gamma" => randn(&mut s, &dims, 0.1, 1.0),
                "wq" | "wk" => randn(&mut s, &dims, 2.0 / d.sqrt(), 0.0),
                "wv" | "wo" | "w1" | "w" => randn(&mut s, &dims, 1.0 / d.sqrt(), 0.0),
                "w2" => randn(&mut s, &dims, 1.0 / h.sqrt(), 0.0),
                _ => randn(&mut s, &dims, 0.1, 0.0),
            };
            NamedTensor::new(name, &dims, data)
        })
        .collect();
    WeightFile {
        config_json: serde_json::to_string(config).expect("config serializes"),
        tensors,
    }
}

/// The `tiny-random` preset.
pub fn tiny_random_weights(seed: u64) -> WeightFile {
    random_weights(&tiny_config(), seed)
}

pub fn tiny_random(seed: u64) -> Model {
    Model::from_weights(tiny_random_weights(seed)).expect("fixture weights are consistent")
}

/// Random weights with `wq = wk = 0` (uniform attention), patch projections
/// that only see per-channel patch sums and a shared positional embedding
/// for every patch token. Logits are then invariant under any permutation
/// of patches composed with a permutation inside patches. Flips and quarter
/// turns are such permutations, so the model is exactly equivariant on that
/// subgroup.
pub fn uniform_mixing_weights(seed: u64) -> WeightFile {
    let mut w = tiny_random_weights(seed);
    let cfg = tiny_config();
    let p2 = cfg.patch_size * cfg.patch_size;
    for t in w.tensors.iter_mut() {
        if t.name.ends_with("attn.wq") || t.name.ends_with("attn.wk") {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        if t.name == "patch.proj" {
            let d = t.dims[1];
            for row in 0..t.dims[0] {
                let channel_row = (row / p2) * p2;
                for j in 0..d {
                    t.data[row * d + j] = t.data[channel_row * d + j];
                }
            }
        }
        if t.name == "patch.pos" {
            let d = t.dims[1];
            for row in 2..t.dims[0] {
                for j in 0..d {
                    t.data[row * d + j] = t.data[d + j];
                }
            }
        }
    }
    w
}

pub fn uniform_mixing(seed: u64) -> Model {
    Model::from_weights(uniform_mixing_weights(seed)).expect("fixture weights are consistent")
}

/// A ViT-shaped stack in which every operator is input independent:
/// attention with zero query/key projections, and plain linear maps where
/// the standard block has layer norms and activations.
pub fn fixed_mixing(seed: u64) -> Model {
    let cfg = ModelConfig {
        depth: 1,
        ..tiny_config()
    };
    let rng = Rng::new(seed);
    let mut idx = 0u64;
    let mut next = || {
        idx += 1;
        rng.substream(idx)
    };
    let d = cfg.width;
    let hidden = cfg.mlp_hidden();
    let lin = |s: &mut Substream, din: usize, dout: usize| {
        LayerSpec::Linear(Linear {
            weight: s.gaussian(&[din, dout]).scale(1.0 / (din as f64).sqrt()),
            bias: s.gaussian(&[dout]).scale(0.1).into_data(),
        })
    };
    let p = cfg.patch_size;
    let mut s = next();
    let patch = LayerSpec::PatchEmbed(PatchEmbed {
        image_size: cfg.image_size,
        patch: p,
        proj: s.gaussian(&[3 * p * p, d]).scale(1.0 / ((3 * p * p) as f64).sqrt()),
        bias: s.gaussian(&[d]).scale(0.1).into_data(),
        pos: s.gaussian(&[1 + cfg.num_patches(), d]).scale(0.5),
        cls: s.gaussian(&[d]).scale(0.5).into_data(),
    });
    let mut s = next();
    let attn = LayerSpec::SelfAttention(SelfAttention {
        wq: Tensor::zeros(&[d, d]),
        wk: Tensor::zeros(&[d, d]),
        wv: s.gaussian(&[d, d]).scale(1.0 / (d as f64).sqrt()),
        wo: s.gaussian(&[d, d]).scale(1.0 / (d as f64).sqrt()),
        bias: s.gaussian(&[d]).scale(0.1).into_data(),
        heads: cfg.heads,
    });
    let layers = vec![
        patch,
        LayerSpec::Residual(vec![lin(&mut next(), d, d), attn]),
        LayerSpec::Residual(vec![lin(&mut next(), d, hidden), lin(&mut next(), hidden, d)]),
        lin(&mut next(), d, d),
        LayerSpec::TokenSelect(0),
        lin(&mut next(), d, cfg.num_classes),
    ];
    Model::from_layers(cfg, layers).expect("fixture layers are consistent")
}

/// Detector weights: class `k`'s logit increases with the mean brightness of
/// quadrant `k` (quadrants row-major `[0, 1; 2, 3]`).
///
/// Token channels: `0/1` carry `±` patch mean brightness, `2..6` a one-hot
/// quadrant code, `6/7` constant `±A` anchors that pin each token's layer-norm
/// scale, `8..12` per-class evidence and `12` a zero reference. Block 0's MLP
/// gates brightness by quadrant; block 1's uniform attention pools the
/// evidence into CLS; the head reads it back.
pub fn detector_weights() -> WeightFile {
    const ANCHOR: f64 = 8.0;
    const CODE: f64 = 8.0;
    // Reference layer-norm scale of a patch token.
    let sigma = ((2.0 * ANCHOR * ANCHOR + CODE * CODE) / 16.0 - (CODE / 16.0).powi(2)).sqrt();
    // Pre-activation of the quadrant's own unit ≈ SLOPE·b + OFFSET; other
    // quadrants sit GATE_OFF lower.
    const SLOPE: f64 = 3.0;
    const OFFSET: f64 = 0.75;
    const GATE_OFF: f64 = 15.0;
    const HEAD: f64 = 4.0;

    let cfg = ModelConfig {
        image_size: 32,
        patch_size: 8,
        width: 16,
        depth: 2,
        heads: 2,
        mlp_ratio: 2.0,
        activation: ActivationKind::GeluErf,
        num_classes: 4,
        ln_eps: 1e-6,
        norm_mean: [0.0; 3],
        norm_std: [1.0; 3],
    };
    let (d, hidden) = (cfg.width, cfg.mlp_hidden());
    let grid = cfg.image_size / cfg.patch_size;
    let patch_len = 3 * cfg.patch_size * cfg.patch_size;
    let tokens = 1 + cfg.num_patches();

    let mut tensors = Vec::new();
    let mut put = |name: String, dims: &[usize], data: Vec<f64>| {
        tensors.push(NamedTensor::new(name, dims, data.into_iter().map(|v| v as f32).collect()));
    };
    let zeros = |n: usize| vec![0.0; n];
    let ones = |n: usize| vec![1.0; n];

    let mut proj = zeros(patch_len * d);
    for r in 0..patch_len {
        proj[r * d] = 1.0 / patch_len as f64;
        proj[r * d + 1] = -1.0 / patch_len as f64;
    }
    put("patch.proj".into(), &[patch_len, d], proj);
    put("patch.bias".into(), &[d], zeros(d));
    let mut pos = zeros(tokens * d);
    for t in 0..tokens {
        pos[t * d + 6] = ANCHOR;
        pos[t * d + 7] = -ANCHOR;
        if t > 0 {
            let n = t - 1;
            let (pr, pc) = (n / grid, n % grid);
            let quadrant = 2 * usize::from(pr >= grid / 2) + usize::from(pc >= grid / 2);
            pos[t * d + 2 + quadrant] = CODE;
        }
    }
    put("patch.pos".into(), &[tokens, d], pos);
    put("patch.cls".into(), &[d], zeros(d));

    // Block 0: attention off, MLP gates brightness by quadrant.
    let a = SLOPE * sigma / 2.0;
    let m = GATE_OFF * sigma / CODE;
    let mut w1 = zeros(d * hidden);
    let mut b1 = zeros(hidden);
    let mut w2 = zeros(hidden * d);
    for k in 0..4 {
        w1[k] = a;
        w1[hidden + k] = -a;
        w1[(2 + k) * hidden + k] = m;
        w1[12 * hidden + k] = -m;
        b1[k] = OFFSET - GATE_OFF;
        w2[k * d + 8 + k] = 1.0;
    }
    // Block 1: uniform attention pools class evidence (minus the zero
    // reference, which cancels the token mean) into every token.
    let mut wv = zeros(d * d);
    let mut wo = zeros(d * d);
    let per_quadrant = (cfg.num_patches() / 4) as f64;
    for k in 0..4 {
        wv[(8 + k) * d + k] = 1.0;
        wv[12 * d + k] = -1.0;
        wo[k * d + 8 + k] = sigma * tokens as f64 / per_quadrant;
    }
    for i in 0..cfg.depth {
        let b = format!("blocks.{i}");
        put(format!("{b}.ln1.gamma"), &[d], ones(d));
        put(format!("{b}.ln1.beta"), &[d], zeros(d));
        put(format!("{b}.attn.wq"), &[d, d], zeros(d * d));
        put(format!("{b}.attn.wk"), &[d, d], zeros(d * d));
        if i == 1 {
            put(format!("{b}.attn.wv"), &[d, d], wv.clone());
            put(format!("{b}.attn.wo"), &[d, d], wo.clone());
        } else {
            put(format!("{b}.attn.wv"), &[d, d], zeros(d * d));
            put(format!("{b}.attn.wo"), &[d, d], zeros(d * d));
        }
        put(format!("{b}.attn.bo"), &[d], zeros(d));
        put(format!("{b}.ln2.gamma"), &[d], ones(d));
        put(format!("{b}.ln2.beta"), &[d], zeros(d));
        if i == 0 {
            put(format!("{b}.mlp.w1"), &[d, hidden], w1.clone());
            put(format!("{b}.mlp.b1"), &[hidden], b1.clone());
            put(format!("{b}.mlp.w2"), &[hidden, d], w2.clone());
        } else {
            put(format!("{b}.mlp.w1"), &[d, hidden], zeros(d * hidden));
            put(format!("{b}.mlp.b1"), &[hidden], zeros(hidden));
            put(format!("{b}.mlp.w2"), &[hidden, d], zeros(hidden * d));
        }
        put(format!("{b}.mlp.b2"), &[d], zeros(d));
    }
    put("final.ln.gamma".into(), &[d], ones(d));
    put("final.ln.beta".into(), &[d], zeros(d));
    let mut head = zeros(d * 4);
    for k in 0..4 {
        head[(8 + k) * 4 + k] = HEAD;
        head[12 * 4 + k] = -HEAD;
    }
    put("head.w".into(), &[d, 4], head);
    put("head.b".into(), &[4], zeros(4));

    WeightFile {
        config_json: serde_json::to_string(&cfg).expect("config serializes"),
        tensors,
    }
}

pub fn detector() -> Model {
    Model::from_weights(detector_weights()).expect("detector weights are consistent")
}

/// Gaussian image with unit-variance entries.
pub fn random_image(seed: u64, size: usize) -> Tensor {
    Rng::new(seed).substream(0).gaussian(&[3, size, size])
}

/// A bright square on a dim textured background, in `[0, 1]` pixel units.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareImage {
    pub image: Tensor,
    /// `(row0, col0, row1, col1)`, exclusive upper bounds.
    pub bounds: (usize, usize, usize, usize),
    pub quadrant: usize,
}

/// Seeded single-square scene: background uniform in `[0, 0.3)`, one square
/// of side 5..=9 at brightness 0.9 lying entirely inside a random quadrant.
pub fn square_image(seed: u64, size: usize) -> SquareImage {
    let mut s = Rng::new(seed).substream(0);
    let half = size / 2;
    let quadrant = (s.next_u64() % 4) as usize;
    let side = 5 + (s.next_u64() % 5) as usize;
    let side = side.min(half);
    let r0 = (quadrant / 2) * half + (s.next_u64() % (half - side + 1) as u64) as usize;
    let c0 = (quadrant % 2) * half + (s.next_u64() % (half - side + 1) as u64) as usize;
    let mut img = Tensor::zeros(&[3, size, size]);
    let data = img.data_mut();
    for v in data.iter_mut() {
        *v = s.uniform(0.0, 0.3);
    }
    for c in 0..3 {
        for i in r0..r0 + side {
            for j in c0..c0 + side {
                data[(c * size + i) * size + j] = 0.9;
            }
        }
    }
    SquareImage {
        image: img,
        bounds: (r0, c0, r0 + side, c0 + side),
        quadrant,
    }
}

/// Radially symmetric Gaussian blob centred on the image.
pub fn radial_blob(size: usize, width: f64) -> Tensor {
    let c = (size as f64 - 1.0) / 2.0;
    Tensor::from_fn(&[3, size, size], |idx| {
        let (ch, rem) = (idx / (size * size), idx % (size * size));
        let (i, j) = ((rem / size) as f64, (rem % size) as f64);
        let r2 = (i - c).powi(2) + (j - c).powi(2);
        (0.5 + 0.25 * ch as f64) * (-r2 / (2.0 * width * width)).exp()
    })
}

/// One instance of every layer kind with a matching input shape.
pub struct LayerCase {
    pub name: &'static str,
    pub layer: LayerSpec,
    pub input_shape: Vec<usize>,
}

pub fn random_linear(s: &mut Substream, din: usize, dout: usize) -> LayerSpec {
    LayerSpec::Linear(Linear {
        weight: s.gaussian(&[din, dout]).scale(1.0 / (din as f64).sqrt()),
        bias: s.gaussian(&[dout]).scale(0.3).into_data(),
    })
}

pub fn random_attention(s: &mut Substream, din: usize, heads: usize, dh: usize, dout: usize) -> LayerSpec {
    let qk = 1.5 / (din as f64).sqrt();
    LayerSpec::SelfAttention(SelfAttention {
        wq: s.gaussian(&[din, heads * dh]).scale(qk),
        wk: s.gaussian(&[din, heads * dh]).scale(qk),
        wv: s.gaussian(&[din, heads * dh]).scale(1.0 / (din as f64).sqrt()),
        wo: s.gaussian(&[heads * dh, dout]).scale(1.0 / ((heads * dh) as f64).sqrt()),
        bias: s.gaussian(&[dout]).scale(0.3).into_data(),
        heads,
    })
}

pub fn random_layernorm(s: &mut Substream, d: usize) -> LayerSpec {
    LayerSpec::LayerNorm(LayerNorm {
        gamma: s.gaussian(&[d]).scale(0.2).map(|v| v + 1.0).into_data(),
        beta: s.gaussian(&[d]).scale(0.2).into_data(),
        eps: 1e-6,
    })
}

pub fn layer_zoo(seed: u64) -> Vec<LayerCase> {
    let rng = Rng::new(seed);
    let s = |i: u64| rng.substream(i);
    let p = 4;
    let mut ps = s(9);
    let patch = LayerSpec::PatchEmbed(PatchEmbed {
        image_size: 8,
        patch: p,
        proj: ps.gaussian(&[3 * p * p, 6]).scale(0.2),
        bias: ps.gaussian(&[6]).scale(0.3).into_data(),
        pos: ps.gaussian(&[5, 6]).scale(0.5),
        cls: ps.gaussian(&[6]).into_data(),
    });
    vec![
        LayerCase {
            name: "linear",
            layer: random_linear(&mut s(1), 6, 4),
            input_shape: vec![5, 6],
        },
        LayerCase {
            name: "self_attention",
            layer: random_attention(&mut s(2), 8, 2, 3, 6),
            input_shape: vec![5, 8],
        },
        LayerCase {
            name: "layernorm",
            layer: random_layernorm(&mut s(3), 8),
            input_shape: vec![5, 8],
        },
        LayerCase {
            name: "gelu_erf",
            layer: LayerSpec::Activation(ActivationKind::GeluErf),
            input_shape: vec![5, 6],
        },
        LayerCase {
            name: "gelu_tanh",
            layer: LayerSpec::Activation(ActivationKind::GeluTanh),
            input_shape: vec![5, 6],
        },
        LayerCase {
            name: "swish",
            layer: LayerSpec::Activation(ActivationKind::Swish),
            input_shape: vec![5, 6],
        },
        LayerCase {
            name: "residual_attention",
            layer: LayerSpec::Residual(vec![
                random_layernorm(&mut s(4), 8),
                random_attention(&mut s(5), 8, 2, 4, 8),
            ]),
            input_shape: vec![5, 8],
        },
        LayerCase {
            name: "residual_mlp",
            layer: LayerSpec::Residual(vec![
                random_layernorm(&mut s(6), 8),
                random_linear(&mut s(7), 8, 12),
                LayerSpec::Activation(ActivationKind::GeluErf),
                random_linear(&mut s(8), 12, 8),
            ]),
            input_shape: vec![5, 8],
        },
        LayerCase {
            name: "patch_embed",
            layer: patch,
            input_shape: vec![3, 8, 8],
        },
        LayerCase {
            name: "token_select",
            layer: LayerSpec::TokenSelect(0),
            input_shape: vec![5, 6],
        },
    ]
}

/// Uniform `[lo, hi)` tensor from substream `index`.
pub fn uniform_tensor(seed: u64, index: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut s = Rng::new(seed).substream(index);
    Tensor::from_fn(shape, |_| s.uniform(lo, hi))
}

/// Builds and loads a seeded random model for each of [`config_variants`].
pub fn variant_models(seed: u64) -> Result<Vec<Model>> {
    config_variants()
        .iter()
        .enumerate()
        .map(|(i, c)| Model::from_weights(random_weights(c, seed + i as u64)))
        .collect()
}
