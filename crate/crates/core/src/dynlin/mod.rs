// SPDX-License-Identifier: MIT OR Apache-2.0

//! ViT layers as dynamic-linear operators `F(X) = L(X)(X) + B`.
//!
//! Each layer is split into two steps:
//!
//! - [`LayerSpec::condition`] evaluates every input-dependent operator
//!   (attention matrices, inverse standard deviations, activation gates) at a
//!   conditioning input `C` and freezes them in an [`OperatorCache`];
//! - [`LayerSpec::apply_frozen`] applies the frozen affine map
//!   `X ↦ L(C)(X) + B`.
//!
//! The standard forward pass is `apply_frozen(condition(X), X)`, so evaluating
//! with `C = X` goes through exactly the same arithmetic as the ordinary layer.
//! [`LayerSpec::backward_effective`] is the adjoint of the frozen linear part;
//! [`LayerSpec::backward_full`] is the true input Jacobian transpose, which
//! additionally carries the operator-variation term.

mod activation;

pub use activation::ActivationKind;

use crate::error::{DaveError, Result};
use crate::tensor::{matmul, matmul_nt, matmul_tn, softmax_in_place, Tensor};

/// Token-wise affine projection `X W + 1 bᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[d_in, d_out]`.
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

/// Multi-head self-attention without query/key/value biases.
///
/// The per-head projections are stored side by side: head `h` owns columns
/// `h·d_h .. (h+1)·d_h` of `wq`, `wk`, `wv` and the same rows of `wo`.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttention {
    /// `[d_in, H·d_h]`.
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    /// `[H·d_h, d_out]`.
    pub wo: Tensor,
    pub bias: Vec<f64>,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

/// Splits a `[3, S, S]` image into `p × p` patches, projects them and
/// prepends the CLS token. CLS and positional embeddings are constants.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbed {
    pub image_size: usize,
    pub patch: usize,
    /// `[3·p², d]`, rows ordered `(channel, row, col)` inside the patch.
    pub proj: Tensor,
    pub bias: Vec<f64>,
    /// `[1 + num_patches, d]`.
    pub pos: Tensor,
    pub cls: Vec<f64>,
}

impl PatchEmbed {
    pub const CHANNELS: usize = 3;

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn width(&self) -> usize {
        self.proj.cols()
    }

    fn patch_len(&self) -> usize {
        Self::CHANNELS * self.patch * self.patch
    }

    fn image_shape(&self) -> [usize; 3] {
        [Self::CHANNELS, self.image_size, self.image_size]
    }

    /// Flat image index of component `j` of patch `n`.
    fn pixel_index(&self, n: usize, j: usize) -> usize {
        let p = self.patch;
        let (pr, pc) = (n / self.grid(), n % self.grid());
        let (c, rem) = (j / (p * p), j % (p * p));
        let (i, k) = (rem / p, rem % p);
        (c * self.image_size + pr * p + i) * self.image_size + pc * p + k
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Linear(Linear),
    SelfAttention(SelfAttention),
    LayerNorm(LayerNorm),
    Activation(ActivationKind),
    /// `X + H(X)` where `H` is the listed branch, applied in order.
    Residual(Vec<LayerSpec>),
    PatchEmbed(PatchEmbed),
    /// Keeps a single token (the CLS token at index 0 in a ViT).
    TokenSelect(usize),
}

/// Operators frozen at a conditioning input.
///
/// Kinds that also need the conditioning input itself for the full Jacobian
/// keep it in `cond`.
#[derive(Debug, Clone, PartialEq)]
pub enum OperatorCache {
    /// Linear and patch embedding: nothing depends on the input.
    Static,
    Attention { attn: Vec<Tensor>, cond: Tensor },
    LayerNorm { inv_std: Vec<f64>, cond: Tensor },
    Activation { gate: Tensor, cond: Tensor },
    Residual(Vec<OperatorCache>),
    TokenSelect { tokens: usize },
}

impl OperatorCache {
    fn kind(&self) -> &'static str {
        match self {
            OperatorCache::Static => "static",
            OperatorCache::Attention { .. } => "attention",
            OperatorCache::LayerNorm { .. } => "layernorm",
            OperatorCache::Activation { .. } => "activation",
            OperatorCache::Residual(_) => "residual",
            OperatorCache::TokenSelect { .. } => "token_select",
        }
    }
}

fn mismatch(layer: &LayerSpec, cache: &OperatorCache) -> DaveError {
    DaveError::Contract(format!(
        "cache of kind {} does not belong to a {} layer",
        cache.kind(),
        layer.kind()
    ))
}

fn expect_cols(x: &Tensor, d: usize, op: &'static str) -> Result<()> {
    if x.shape().len() != 2 || x.cols() != d {
        return Err(DaveError::shape(op, x.shape(), &[0, d]));
    }
    Ok(())
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Linear(_) => "linear",
            LayerSpec::SelfAttention(_) => "self_attention",
            LayerSpec::LayerNorm(_) => "layernorm",
            LayerSpec::Activation(_) => "activation",
            LayerSpec::Residual(_) => "residual",
            LayerSpec::PatchEmbed(_) => "patch_embed",
            LayerSpec::TokenSelect(_) => "token_select",
        }
    }

    /// Checks that the parameter shapes are mutually consistent.
    pub fn validate(&self) -> Result<()> {
        match self {
            LayerSpec::Linear(l) => {
                if l.weight.shape().len() != 2 || l.bias.len() != l.weight.cols() {
                    return Err(DaveError::shape("linear", l.weight.shape(), &[l.bias.len()]));
                }
            }
            LayerSpec::SelfAttention(a) => {
                let ws = a.wq.shape();
                if ws.len() != 2
                    || a.wk.shape() != ws
                    || a.wv.shape() != ws
                    || a.heads == 0
                    || ws[1] % a.heads != 0
                {
                    return Err(DaveError::shape("self_attention", ws, a.wk.shape()));
                }
                if a.wo.shape().len() != 2 || a.wo.rows() != ws[1] || a.bias.len() != a.wo.cols() {
                    return Err(DaveError::shape("self_attention", ws, a.wo.shape()));
                }
            }
            LayerSpec::LayerNorm(n) => {
                if n.gamma.len() != n.beta.len() || !(n.eps >= 0.0) {
                    return Err(DaveError::shape("layernorm", &[n.gamma.len()], &[n.beta.len()]));
                }
            }
            LayerSpec::Activation(_) => {}
            LayerSpec::Residual(branch) => {
                for l in branch {
                    l.validate()?;
                    if matches!(l, LayerSpec::PatchEmbed(_) | LayerSpec::TokenSelect(_)) {
                        return Err(DaveError::Contract(format!(
                            "{} cannot sit inside a residual branch",
                            l.kind()
                        )));
                    }
                }
            }
            LayerSpec::PatchEmbed(p) => {
                let d = p.proj.cols();
                if p.patch == 0
                    || p.image_size % p.patch != 0
                    || p.proj.shape() != [p.patch_len(), d]
                    || p.bias.len() != d
                    || p.cls.len() != d
                    || p.pos.shape() != [1 + p.num_patches(), d]
                {
                    return Err(DaveError::shape("patch_embed", p.proj.shape(), p.pos.shape()));
                }
            }
            LayerSpec::TokenSelect(_) => {}
        }
        Ok(())
    }

    /// Evaluates the layer at `c`, returning the output and the frozen operators.
    pub fn condition(&self, c: &Tensor) -> Result<(Tensor, OperatorCache)> {
        match self {
            LayerSpec::Residual(branch) => {
                let mut caches = Vec::with_capacity(branch.len());
                let mut y = c.clone();
                for inner in branch {
                    let (next, cache) = inner.condition(&y)?;
                    caches.push(cache);
                    y = next;
                }
                let out = c.add(&y)?;
                Ok((out, OperatorCache::Residual(caches)))
            }
            _ => {
                let cache = self.freeze(c)?;
                let out = self.apply_frozen(&cache, c)?;
                Ok((out, cache))
            }
        }
    }

    fn freeze(&self, c: &Tensor) -> Result<OperatorCache> {
        match self {
            LayerSpec::Linear(_) | LayerSpec::PatchEmbed(_) => Ok(OperatorCache::Static),
            LayerSpec::TokenSelect(idx) => {
                if c.shape().len() != 2 || *idx >= c.rows() {
                    return Err(DaveError::shape("token_select", c.shape(), &[*idx]));
                }
                Ok(OperatorCache::TokenSelect { tokens: c.rows() })
            }
            LayerSpec::SelfAttention(a) => {
                expect_cols(c, a.wq.rows(), "self_attention")?;
                let dh = a.wq.cols() / a.heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let q = matmul(c, &a.wq)?;
                let k = matmul(c, &a.wk)?;
                let mut attn = Vec::with_capacity(a.heads);
                for h in 0..a.heads {
                    let qh = q.columns(h * dh, (h + 1) * dh)?;
                    let kh = k.columns(h * dh, (h + 1) * dh)?;
                    let mut s = matmul_nt(&qh, &kh)?.scale(scale);
                    for i in 0..s.rows() {
                        softmax_in_place(s.row_mut(i));
                    }
                    attn.push(s);
                }
                Ok(OperatorCache::Attention {
                    attn,
                    cond: c.clone(),
                })
            }
            LayerSpec::LayerNorm(n) => {
                expect_cols(c, n.gamma.len(), "layernorm")?;
                let d = c.cols() as f64;
                let inv_std = (0..c.rows())
                    .map(|i| {
                        let row = c.row(i);
                        let mu = row.iter().sum::<f64>() / d;
                        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
                        1.0 / (var + n.eps).sqrt()
                    })
                    .collect();
                Ok(OperatorCache::LayerNorm {
                    inv_std,
                    cond: c.clone(),
                })
            }
            LayerSpec::Activation(kind) => Ok(OperatorCache::Activation {
                gate: c.map(|v| kind.gate(v)),
                cond: c.clone(),
            }),
            LayerSpec::Residual(_) => unreachable!("residual caches are built by condition"),
        }
    }

    /// The frozen affine map `X ↦ L(C)(X) + B`.
    pub fn apply_frozen(&self, cache: &OperatorCache, x: &Tensor) -> Result<Tensor> {
        match (self, cache) {
            (LayerSpec::Linear(l), OperatorCache::Static) => {
                matmul(x, &l.weight)?.add_row_vector(&l.bias)
            }
            (LayerSpec::PatchEmbed(p), OperatorCache::Static) => patch_forward(p, x),
            (LayerSpec::TokenSelect(idx), OperatorCache::TokenSelect { tokens }) => {
                if x.shape().len() != 2 || x.rows() != *tokens {
                    return Err(DaveError::shape("token_select", x.shape(), &[*tokens]));
                }
                x.row_range(*idx, idx + 1)
            }
            (LayerSpec::SelfAttention(a), OperatorCache::Attention { attn, cond }) => {
                if x.shape() != cond.shape() {
                    return Err(DaveError::shape("self_attention", x.shape(), cond.shape()));
                }
                let dh = a.wq.cols() / a.heads;
                let v = matmul(x, &a.wv)?;
                let mut mixed = Tensor::zeros(v.shape());
                for (h, ah) in attn.iter().enumerate() {
                    let oh = matmul(ah, &v.columns(h * dh, (h + 1) * dh)?)?;
                    for i in 0..oh.rows() {
                        mixed.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(oh.row(i));
                    }
                }
                matmul(&mixed, &a.wo)?.add_row_vector(&a.bias)
            }
            (LayerSpec::LayerNorm(n), OperatorCache::LayerNorm { inv_std, cond }) => {
                if x.shape() != cond.shape() {
                    return Err(DaveError::shape("layernorm", x.shape(), cond.shape()));
                }
                let d = x.cols() as f64;
                let mut out = x.clone();
                for (i, &s) in inv_std.iter().enumerate() {
                    let row = out.row_mut(i);
                    let mu = row.iter().sum::<f64>() / d;
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = (*v - mu) * s * n.gamma[j] + n.beta[j];
                    }
                }
                Ok(out)
            }
            (LayerSpec::Activation(_), OperatorCache::Activation { gate, .. }) => gate.mul(x),
            (LayerSpec::Residual(branch), OperatorCache::Residual(caches)) => {
                if branch.len() != caches.len() {
                    return Err(mismatch(self, cache));
                }
                let mut y = x.clone();
                for (inner, c) in branch.iter().zip(caches) {
                    y = inner.apply_frozen(c, &y)?;
                }
                x.add(&y)
            }
            _ => Err(mismatch(self, cache)),
        }
    }

    pub fn forward_standard(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.condition(x)?.0)
    }

    /// `L(C)(X) + B` together with the operators frozen at `C`.
    pub fn forward_conditioned(&self, x: &Tensor, c: &Tensor) -> Result<(Tensor, OperatorCache)> {
        if x.shape() != c.shape() {
            return Err(DaveError::shape("forward_conditioned", x.shape(), c.shape()));
        }
        let (_, cache) = self.condition(c)?;
        let out = self.apply_frozen(&cache, x)?;
        Ok((out, cache))
    }

    /// Adjoint of the frozen linear map applied to `grad_out`.
    pub fn backward_effective(&self, cache: &OperatorCache, grad_out: &Tensor) -> Result<Tensor> {
        self.backward(cache, grad_out, false)
    }

    /// Transpose of the full input Jacobian at the conditioning point,
    /// i.e. effective part plus operator variation.
    pub fn backward_full(&self, cache: &OperatorCache, grad_out: &Tensor) -> Result<Tensor> {
        self.backward(cache, grad_out, true)
    }

    fn backward(&self, cache: &OperatorCache, g: &Tensor, full: bool) -> Result<Tensor> {
        match (self, cache) {
            (LayerSpec::Linear(l), OperatorCache::Static) => {
                expect_cols(g, l.weight.cols(), "linear backward")?;
                matmul_nt(g, &l.weight)
            }
            (LayerSpec::PatchEmbed(p), OperatorCache::Static) => patch_backward(p, g),
            (LayerSpec::TokenSelect(idx), OperatorCache::TokenSelect { tokens }) => {
                if g.shape().len() != 2 || g.rows() != 1 {
                    return Err(DaveError::shape("token_select backward", g.shape(), &[1, 0]));
                }
                let mut out = Tensor::zeros(&[*tokens, g.cols()]);
                out.row_mut(*idx).copy_from_slice(g.row(0));
                Ok(out)
            }
            (LayerSpec::SelfAttention(a), OperatorCache::Attention { attn, cond }) => {
                attention_backward(a, attn, cond, g, full)
            }
            (LayerSpec::LayerNorm(n), OperatorCache::LayerNorm { inv_std, cond }) => {
                if g.shape() != cond.shape() {
                    return Err(DaveError::shape("layernorm backward", g.shape(), cond.shape()));
                }
                let d = g.cols() as f64;
                let mut out = g.clone();
                for (i, &s) in inv_std.iter().enumerate() {
                    let ghat: Vec<f64> = g.row(i).iter().zip(&n.gamma).map(|(a, b)| a * b).collect();
                    let mean_g = ghat.iter().sum::<f64>() / d;
                    let row = out.row_mut(i);
                    if full {
                        let c = cond.row(i);
                        let mu = c.iter().sum::<f64>() / d;
                        let xhat: Vec<f64> = c.iter().map(|v| (v - mu) * s).collect();
                        let mean_gx =
                            ghat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d;
                        for j in 0..row.len() {
                            row[j] = s * (ghat[j] - mean_g - xhat[j] * mean_gx);
                        }
                    } else {
                        for j in 0..row.len() {
                            row[j] = s * (ghat[j] - mean_g);
                        }
                    }
                }
                Ok(out)
            }
            (LayerSpec::Activation(kind), OperatorCache::Activation { gate, cond }) => {
                if full {
                    g.zip_map(cond, |gv, c| gv * kind.derivative(c))
                } else {
                    gate.mul(g)
                }
            }
            (LayerSpec::Residual(branch), OperatorCache::Residual(caches)) => {
                if branch.len() != caches.len() {
                    return Err(mismatch(self, cache));
                }
                let mut gb = g.clone();
                for (inner, c) in branch.iter().zip(caches).rev() {
                    gb = inner.backward(c, &gb, full)?;
                }
                g.add(&gb)
            }
            _ => Err(mismatch(self, cache)),
        }
    }

    /// `([L(X + hH) − L(X − hH)] / 2h)(X)`: the operator-variation term of the
    /// layer derivative along `dir`, by two conditioned evaluations.
    pub fn directional_operator_variation(&self, x: &Tensor, dir: &Tensor, h: f64) -> Result<Tensor> {
        if dir.shape() != x.shape() {
            return Err(DaveError::shape("directional_operator_variation", x.shape(), dir.shape()));
        }
        if !(h > 0.0) {
            return Err(DaveError::Param(format!("step must be positive, got {h}")));
        }
        let plus = x.add(&dir.scale(h))?;
        let minus = x.sub(&dir.scale(h))?;
        let (a, _) = self.forward_conditioned(x, &plus)?;
        let (b, _) = self.forward_conditioned(x, &minus)?;
        Ok(a.sub(&b)?.scale(0.5 / h))
    }
}

fn patch_forward(p: &PatchEmbed, x: &Tensor) -> Result<Tensor> {
    if x.shape() != p.image_shape() {
        return Err(DaveError::shape("patch_embed", x.shape(), &p.image_shape()));
    }
    let n = p.num_patches();
    let len = p.patch_len();
    let mut patches = Tensor::zeros(&[n, len]);
    for i in 0..n {
        let row = patches.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v = x.data()[p.pixel_index(i, j)];
        }
    }
    let proj = matmul(&patches, &p.proj)?.add_row_vector(&p.bias)?;
    let d = p.width();
    let mut out = Tensor::zeros(&[n + 1, d]);
    for j in 0..d {
        out.row_mut(0)[j] = p.cls[j] + p.pos.get2(0, j);
    }
    for i in 0..n {
        let src = proj.row(i);
        let dst = out.row_mut(i + 1);
        for j in 0..d {
            dst[j] = src[j] + p.pos.get2(i + 1, j);
        }
    }
    Ok(out)
}

fn patch_backward(p: &PatchEmbed, g: &Tensor) -> Result<Tensor> {
    let n = p.num_patches();
    if g.shape() != [n + 1, p.width()] {
        return Err(DaveError::shape("patch_embed backward", g.shape(), &[n + 1, p.width()]));
    }
    let gp = matmul_nt(&g.row_range(1, n + 1)?, &p.proj)?;
    let mut out = Tensor::zeros(&p.image_shape());
    let data = out.data_mut();
    for i in 0..n {
        for (j, v) in gp.row(i).iter().enumerate() {
            data[p.pixel_index(i, j)] = *v;
        }
    }
    Ok(out)
}

fn attention_backward(
    a: &SelfAttention,
    attn: &[Tensor],
    cond: &Tensor,
    g: &Tensor,
    full: bool,
) -> Result<Tensor> {
    if g.shape() != [cond.rows(), a.wo.cols()] {
        return Err(DaveError::shape("self_attention backward", g.shape(), &[cond.rows(), a.wo.cols()]));
    }
    let dh = a.wq.cols() / a.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    // Cogradient on the concatenated head outputs.
    let g_mixed = matmul_nt(g, &a.wo)?;
    let mut g_v = Tensor::zeros(g_mixed.shape());
    let mut g_q = Tensor::zeros(g_mixed.shape());
    let mut g_k = Tensor::zeros(g_mixed.shape());
    let (v, q, k) = if full {
        (
            Some(matmul(cond, &a.wv)?),
            Some(matmul(cond, &a.wq)?),
            Some(matmul(cond, &a.wk)?),
        )
    } else {
        (None, None, None)
    };
    for (h, ah) in attn.iter().enumerate() {
        let goh = g_mixed.columns(h * dh, (h + 1) * dh)?;
        let gvh = matmul_tn(ah, &goh)?;
        for i in 0..gvh.rows() {
            g_v.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(gvh.row(i));
        }
        if let (Some(v), Some(q), Some(k)) = (&v, &q, &k) {
            let vh = v.columns(h * dh, (h + 1) * dh)?;
            let qh = q.columns(h * dh, (h + 1) * dh)?;
            let kh = k.columns(h * dh, (h + 1) * dh)?;
            let g_attn = matmul_nt(&goh, &vh)?;
            let mut g_scores = Tensor::zeros(g_attn.shape());
            for i in 0..g_attn.rows() {
                let arow = ah.row(i);
                let grow = g_attn.row(i);
                let inner: f64 = arow.iter().zip(grow).map(|(x, y)| x * y).sum();
                for (o, (av, gv)) in g_scores.row_mut(i).iter_mut().zip(arow.iter().zip(grow)) {
                    *o = av * (gv - inner) * scale;
                }
            }
            let gqh = matmul(&g_scores, &kh)?;
            let gkh = matmul_tn(&g_scores, &qh)?;
            for i in 0..gqh.rows() {
                g_q.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(gqh.row(i));
                g_k.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(gkh.row(i));
            }
        }
    }
    let mut out = matmul_nt(&g_v, &a.wv)?;
    if full {
        out.add_assign(&matmul_nt(&g_q, &a.wq)?)?;
        out.add_assign(&matmul_nt(&g_k, &a.wk)?)?;
    }
    Ok(out)
}
