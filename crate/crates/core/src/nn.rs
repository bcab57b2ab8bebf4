//! Layers shared by the encoder, combiner and predictor. Each layer has an
//! `init_*` function registering its parameters under a name prefix and a
//! forward function reading them back from a [`Graph`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Init, Var};

pub fn init_linear<R: Rng>(init: &mut Init<'_, R>, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
    init.linear_weight(&format!("{name}/w"), fan_in, fan_out)?;
    init.constant(&format!("{name}/b"), &[fan_out], 0.0)?;
    Ok(())
}

/// `x · W + b` over the last axis of `x`.
pub fn linear(g: &mut Graph, name: &str, x: Var) -> Result<Var> {
    let w = g.param(&format!("{name}/w"))?;
    let b = g.param(&format!("{name}/b"))?;
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

/// Linear map using only the first `rows` input rows of the weight, for
/// inputs narrower than the layer was built for.
pub fn linear_rows(g: &mut Graph, name: &str, x: Var, rows: usize) -> Result<Var> {
    let w = g.param(&format!("{name}/w"))?;
    let b = g.param(&format!("{name}/b"))?;
    let full = g.shape(w)[0];
    let w = match rows {
        r if r == full => w,
        r if r < full => g.slice(w, 0, 0, r)?,
        r => return Err(Error::Config(format!("`{name}` has {full} input rows, {r} requested"))),
    };
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

pub fn init_layer_norm<R: Rng>(init: &mut Init<'_, R>, name: &str, width: usize) -> Result<()> {
    init.constant(&format!("{name}/gamma"), &[width], 1.0)?;
    init.constant(&format!("{name}/beta"), &[width], 0.0)?;
    Ok(())
}

/// Normalisation over the last axis followed by the learned affine map.
pub fn layer_norm(g: &mut Graph, name: &str, x: Var) -> Result<Var> {
    let axis = g.shape(x).len() - 1;
    let n = g.layer_norm(x, axis)?;
    let gamma = g.param(&format!("{name}/gamma"))?;
    let beta = g.param(&format!("{name}/beta"))?;
    let y = g.mul(n, gamma)?;
    g.add(y, beta)
}

pub fn init_mlp<R: Rng>(init: &mut Init<'_, R>, name: &str, fan_in: usize, hidden: usize, fan_out: usize) -> Result<()> {
    init_linear(init, &format!("{name}/fc1"), fan_in, hidden)?;
    init_linear(init, &format!("{name}/fc2"), hidden, fan_out)
}

/// One hidden layer with gelu.
pub fn mlp(g: &mut Graph, name: &str, x: Var) -> Result<Var> {
    let h = linear(g, &format!("{name}/fc1"), x)?;
    let h = g.gelu(h)?;
    linear(g, &format!("{name}/fc2"), h)
}

/// Like [`mlp`] but feeding only the first `rows` inputs of the first layer.
pub fn mlp_rows(g: &mut Graph, name: &str, x: Var, rows: usize) -> Result<Var> {
    let h = linear_rows(g, &format!("{name}/fc1"), x, rows)?;
    let h = g.gelu(h)?;
    linear(g, &format!("{name}/fc2"), h)
}

pub fn init_attention<R: Rng>(init: &mut Init<'_, R>, name: &str, width: usize) -> Result<()> {
    for leaf in ["q", "k", "v", "o"] {
        init_linear(init, &format!("{name}/{leaf}"), width, width)?;
    }
    Ok(())
}

fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, l, e) = (s[0], s[1], s[2]);
    let x = g.reshape(x, &[b, l, heads, e / heads])?;
    g.permute(x, &[0, 2, 1, 3])
}

/// Multi-head scaled dot-product attention of `q [B, Lq, E]` over
/// `kv [B, Lk, E]`, returning `[B, Lq, E]`.
pub fn attention(g: &mut Graph, name: &str, q: Var, kv: Var, heads: usize) -> Result<Var> {
    let qs = g.shape(q).to_vec();
    if qs.len() != 3 || g.shape(kv).len() != 3 || qs[2] % heads != 0 {
        return Err(Error::shape("attention", &[&qs, g.shape(kv)]));
    }
    let (b, lq, e) = (qs[0], qs[1], qs[2]);
    let dh = e / heads;
    let qp = linear(g, &format!("{name}/q"), q)?;
    let kp = linear(g, &format!("{name}/k"), kv)?;
    let vp = linear(g, &format!("{name}/v"), kv)?;
    let qh = split_heads(g, qp, heads)?;
    let kh = split_heads(g, kp, heads)?;
    let vh = split_heads(g, vp, heads)?;
    let kt = g.transpose(kh)?;
    let scores = g.matmul(qh, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let a = g.softmax(scores, 3)?;
    let o = g.matmul(a, vh)?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    let o = g.reshape(o, &[b, lq, e])?;
    linear(g, &format!("{name}/o"), o)
}

pub fn init_self_block<R: Rng>(init: &mut Init<'_, R>, name: &str, width: usize) -> Result<()> {
    init_layer_norm(init, &format!("{name}/ln1"), width)?;
    init_attention(init, &format!("{name}/attn"), width)?;
    init_layer_norm(init, &format!("{name}/ln2"), width)?;
    init_mlp(init, &format!("{name}/mlp"), width, 2 * width, width)
}

/// Pre-norm residual self-attention block over `x [B, L, E]`.
pub fn self_block(g: &mut Graph, name: &str, x: Var, heads: usize) -> Result<Var> {
    let h = layer_norm(g, &format!("{name}/ln1"), x)?;
    let a = attention(g, &format!("{name}/attn"), h, h, heads)?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, &format!("{name}/ln2"), x)?;
    let m = mlp(g, &format!("{name}/mlp"), h)?;
    g.add(x, m)
}

pub fn init_cross_block<R: Rng>(init: &mut Init<'_, R>, name: &str, width: usize) -> Result<()> {
    init_layer_norm(init, &format!("{name}/ln_q"), width)?;
    init_layer_norm(init, &format!("{name}/ln_kv"), width)?;
    init_attention(init, &format!("{name}/attn"), width)?;
    init_layer_norm(init, &format!("{name}/ln2"), width)?;
    init_mlp(init, &format!("{name}/mlp"), width, 2 * width, width)
}

/// Pre-norm residual block where queries `q [B, Lq, E]` attend to `kv [B, Lk, E]`.
pub fn cross_block(g: &mut Graph, name: &str, q: Var, kv: Var, heads: usize) -> Result<Var> {
    let hq = layer_norm(g, &format!("{name}/ln_q"), q)?;
    let hk = layer_norm(g, &format!("{name}/ln_kv"), kv)?;
    let a = attention(g, &format!("{name}/attn"), hq, hk, heads)?;
    let x = g.add(q, a)?;
    let h = layer_norm(g, &format!("{name}/ln2"), x)?;
    let m = mlp(g, &format!("{name}/mlp"), h)?;
    g.add(x, m)
}
