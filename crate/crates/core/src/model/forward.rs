use crate::mask::{MaskPlan, Modality};
use crate::tensor::{Graph, Tensor, Var};

use super::{Bound, ModalityTokens, ModelConfig, ModelError, ModelParams};

pub const LN_EPS: f64 = 1e-6;

/// Fixed 2-D sin-cos table `[side² × dim]`: the first half of the channels
/// encodes the grid row, the second half the column.
pub fn sincos_2d(side: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let quarter = half / 2;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut data = vec![0.0; side * side * dim];
    for r in 0..side {
        for c in 0..side {
            let row = &mut data[(r * side + c) * dim..][..dim];
            for (i, w) in omega.iter().enumerate() {
                row[i] = (r as f64 * w).sin();
                row[quarter + i] = (r as f64 * w).cos();
                row[half + i] = (c as f64 * w).sin();
                row[half + quarter + i] = (c as f64 * w).cos();
            }
        }
    }
    Tensor::matrix(side * side, dim, data).expect("table size")
}

fn linear(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var, ModelError> {
    let w = p.var(&format!("{name}.w"))?;
    let b = p.var(&format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    Ok(g.add_row(y, b)?)
}

fn norm(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var, ModelError> {
    let gamma = p.var(&format!("{name}.g"))?;
    let beta = p.var(&format!("{name}.b"))?;
    Ok(g.layer_norm(x, gamma, beta, LN_EPS)?)
}

/// Multi-head scaled dot-product attention; appends each head's
/// probability matrix to `probs`.
fn attention(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize, probs: &mut Vec<Var>) -> Result<Var, ModelError> {
    let d = g.value(q).cols();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * hd, hd)?;
        let kh = g.slice_cols(k, h * hd, hd)?;
        let vh = g.slice_cols(v, h * hd, hd)?;
        let kt = g.transpose(kh)?;
        let s = g.matmul(qh, kt)?;
        let s = g.scale(s, scale)?;
        let a = g.softmax(s, 1)?;
        probs.push(a);
        outs.push(g.matmul(a, vh)?);
    }
    Ok(g.concat_cols(&outs)?)
}

fn mlp(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var, ModelError> {
    let h = linear(g, p, &format!("{name}.fc1"), x)?;
    let h = g.gelu(h)?;
    linear(g, p, &format!("{name}.fc2"), h)
}

/// Pre-norm transformer block.
fn block(g: &mut Graph, p: &Bound, name: &str, x: Var, heads: usize, probs: &mut Vec<Var>) -> Result<Var, ModelError> {
    let d = g.value(x).cols();
    let h = norm(g, p, &format!("{name}.ln1"), x)?;
    let qkv = linear(g, p, &format!("{name}.attn.qkv"), h)?;
    let q = g.slice_cols(qkv, 0, d)?;
    let k = g.slice_cols(qkv, d, d)?;
    let v = g.slice_cols(qkv, 2 * d, d)?;
    let a = attention(g, q, k, v, heads, probs)?;
    let a = linear(g, p, &format!("{name}.attn.proj"), a)?;
    let x = g.add(x, a)?;
    let h = norm(g, p, &format!("{name}.ln2"), x)?;
    let h = mlp(g, p, &format!("{name}.mlp"), h)?;
    Ok(g.add(x, h)?)
}

/// Queries from `x`, keys and values from `ctx`, then an MLP.
fn cross_block(g: &mut Graph, p: &Bound, name: &str, x: Var, ctx: Var, heads: usize) -> Result<Var, ModelError> {
    let d = g.value(x).cols();
    let hq = norm(g, p, &format!("{name}.ln_q"), x)?;
    let hc = norm(g, p, &format!("{name}.ln_kv"), ctx)?;
    let q = linear(g, p, &format!("{name}.q"), hq)?;
    let kv = linear(g, p, &format!("{name}.kv"), hc)?;
    let k = g.slice_cols(kv, 0, d)?;
    let v = g.slice_cols(kv, d, d)?;
    let a = attention(g, q, k, v, heads, &mut Vec::new())?;
    let a = linear(g, p, &format!("{name}.proj"), a)?;
    let x = g.add(x, a)?;
    let h = norm(g, p, &format!("{name}.ln2"), x)?;
    let h = mlp(g, p, &format!("{name}.mlp"), h)?;
    Ok(g.add(x, h)?)
}

fn range(start: usize, len: usize) -> Vec<usize> {
    (start..start + len).collect()
}

/// One modality's visible tokens, in the order they are fed.
pub type TokenSeq<'a> = (Modality, &'a Tensor, &'a [usize]);

/// Token sequence entering the first encoder block: global tokens, then each
/// sequence's projected patches plus their position embeddings.
pub fn embed_tokens(g: &mut Graph, p: &Bound, cfg: &ModelConfig, seqs: &[TokenSeq]) -> Result<Var, ModelError> {
    let e = &cfg.encoder;
    let grid = cfg.grid()?;
    let pos = sincos_2d(grid.grid_side(), e.embed_dim());
    let mut parts = Vec::new();
    if e.num_global_tokens > 0 {
        parts.push(p.var("enc.global")?);
    }
    for &(m, tokens, idx) in seqs {
        if !e.modality_list().contains(&m) {
            return Err(ModelError::Contract(format!(
                "{m} tokens given to a model configured for {} modalities",
                e.modalities
            )));
        }
        if tokens.rows() != grid.num_positions() || tokens.cols() != grid.token_len(super::channels(m)) {
            return Err(ModelError::Contract(format!(
                "{m} tokens have shape {:?} on a {}-position grid",
                tokens.shape(),
                grid.num_positions()
            )));
        }
        if idx.is_empty() {
            continue;
        }
        let x = g.constant(tokens.gather_rows(idx)?);
        let y = linear(g, p, &format!("enc.patch.{m}"), x)?;
        let pe = g.constant(pos.gather_rows(idx)?);
        parts.push(g.add(y, pe)?);
    }
    if parts.is_empty() {
        return Err(ModelError::Contract("no tokens to encode".into()));
    }
    Ok(g.concat_rows(&parts)?)
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[G + visible × D]` after the final layer norm.
    pub latents: Var,
    /// Attention probabilities per layer, per head.
    pub attention: Vec<Vec<Var>>,
}

/// Encoder over sequences in the given order.
pub fn encode_ordered(g: &mut Graph, p: &Bound, cfg: &ModelConfig, seqs: &[TokenSeq]) -> Result<EncoderOutput, ModelError> {
    let e = &cfg.encoder;
    let mut x = embed_tokens(g, p, cfg, seqs)?;
    let mut attention = Vec::with_capacity(e.depth);
    for i in 0..e.depth {
        let mut probs = Vec::new();
        x = block(g, p, &format!("enc.block{i}"), x, e.heads, &mut probs)?;
        attention.push(probs);
    }
    let latents = norm(g, p, "enc.norm", x)?;
    Ok(EncoderOutput { latents, attention })
}

/// Encoder over the visible tokens of `plan`, concatenated RGB, H, E.
pub fn encode(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    tokens: &ModalityTokens,
    plan: &MaskPlan,
) -> Result<EncoderOutput, ModelError> {
    let mut seqs = Vec::new();
    for (m, idx) in &plan.visible {
        let t = tokens
            .get(m)
            .ok_or_else(|| ModelError::Contract(format!("plan uses {m} but no {m} tokens were given")))?;
        seqs.push((*m, t, idx.as_slice()));
    }
    encode_ordered(g, p, cfg, &seqs)
}

/// Projects latents to decoder width and lays them out as
/// `[global; position 0..M]` with the mask token at positions that have no
/// visible RGB token. RGB latents are rows `G..G + rgb_positions.len()`.
fn decoder_stream(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    latents: Var,
    rgb_positions: &[usize],
) -> Result<(Var, Var), ModelError> {
    let grid = cfg.grid()?;
    let m = grid.num_positions();
    let gl = cfg.encoder.num_global_tokens;
    let n = rgb_positions.len();
    if g.value(latents).rows() < gl + n {
        return Err(ModelError::Contract("fewer latents than visible RGB tokens".into()));
    }
    let x = linear(g, p, "dec.embed", latents)?;
    let mask = p.var("dec.mask_token")?;
    let mut slot = vec![n; m];
    for (j, &pos) in rgb_positions.iter().enumerate() {
        if pos >= m {
            return Err(ModelError::Contract(format!("position {pos} outside the {m}-position grid")));
        }
        slot[pos] = j;
    }
    let pool = if n > 0 {
        let vis = g.gather_rows(x, &range(gl, n))?;
        g.concat_rows(&[vis, mask])?
    } else {
        mask
    };
    let full = g.gather_rows(pool, &slot)?;
    let pos = g.constant(sincos_2d(grid.grid_side(), cfg.decoder.embed_dim));
    let full = g.add(full, pos)?;
    let stream = if gl > 0 {
        let glob = g.gather_rows(x, &range(0, gl))?;
        g.concat_rows(&[glob, full])?
    } else {
        full
    };
    Ok((stream, x))
}

/// Self-attention blocks, norm, pixel projection, then the rows of the
/// positions without a visible RGB token (ascending).
fn decoder_tail(g: &mut Graph, p: &Bound, cfg: &ModelConfig, mut x: Var, rgb_positions: &[usize]) -> Result<Var, ModelError> {
    let d = &cfg.decoder;
    for i in 0..d.depth {
        x = block(g, p, &format!("dec.block{i}"), x, d.heads, &mut Vec::new())?;
    }
    let x = norm(g, p, "dec.norm", x)?;
    let y = linear(g, p, "dec.pred", x)?;
    let gl = cfg.encoder.num_global_tokens;
    let m = cfg.grid()?.num_positions();
    let mut visible = vec![false; m];
    rgb_positions.iter().for_each(|&i| visible[i] = true);
    let rows: Vec<usize> = (0..m).filter(|&i| !visible[i]).map(|i| gl + i).collect();
    if rows.is_empty() {
        return Err(ModelError::Contract("every position is visible; nothing to reconstruct".into()));
    }
    Ok(g.gather_rows(y, &rows)?)
}

pub fn decode_mae_ordered(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    latents: Var,
    rgb_positions: &[usize],
) -> Result<Var, ModelError> {
    let (stream, _) = decoder_stream(g, p, cfg, latents, rgb_positions)?;
    decoder_tail(g, p, cfg, stream, rgb_positions)
}

/// Pixel predictions `[masked × P²·3]` for the positions masked in a
/// single-modality plan.
pub fn decode_mae(g: &mut Graph, p: &Bound, cfg: &ModelConfig, latents: Var, plan: &MaskPlan) -> Result<Var, ModelError> {
    if plan.modalities() != [Modality::Rgb] {
        return Err(ModelError::Contract(format!(
            "the single-modality decoder needs an RGB-only plan, got {:?}",
            plan.modalities()
        )));
    }
    decode_mae_ordered(g, p, cfg, latents, plan.visible(Modality::Rgb))
}

pub fn decode_mmae_ordered(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    latents: Var,
    rgb_positions: &[usize],
) -> Result<Var, ModelError> {
    if !cfg.decoder.has_cross_attention {
        return Err(ModelError::Contract("decoder has no cross-attention layer".into()));
    }
    let (stream, ctx) = decoder_stream(g, p, cfg, latents, rgb_positions)?;
    let x = cross_block(g, p, "dec.cross", stream, ctx, cfg.decoder.heads)?;
    decoder_tail(g, p, cfg, x, rgb_positions)
}

/// RGB pixel predictions for every position without a visible RGB token.
/// The decoder stream cross-attends to all encoder latents (global, RGB, H,
/// E) once before its self-attention blocks.
pub fn decode_mmae(g: &mut Graph, p: &Bound, cfg: &ModelConfig, latents: Var, plan: &MaskPlan) -> Result<Var, ModelError> {
    for m in Modality::ALL {
        if !plan.visible.contains_key(&m) {
            return Err(ModelError::Contract(format!("multi-modal plan is missing {m}")));
        }
    }
    decode_mmae_ordered(g, p, cfg, latents, plan.visible(Modality::Rgb))
}

fn standardize_rows(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        let rstd = 1.0 / (var + 1e-6).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * rstd);
    }
    debug_assert_eq!(out.rows(), r);
    out
}

/// Mean squared error over masked patch pixels. With `norm_pix` every
/// target patch is standardized by its own mean and variance first.
pub fn reconstruction_loss(g: &mut Graph, pred: Var, target: &Tensor, norm_pix: bool) -> Result<Var, ModelError> {
    if g.value(pred).shape() != target.shape() {
        return Err(ModelError::Contract(format!(
            "prediction {:?} vs target {:?}",
            g.value(pred).shape(),
            target.shape()
        )));
    }
    let t = if norm_pix { standardize_rows(target) } else { target.clone() };
    let t = g.constant(t);
    let d = g.sub(pred, t)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq)?)
}

/// Encode, decode and score one sample under `plan`.
pub fn pretrain_loss(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    tokens: &ModalityTokens,
    plan: &MaskPlan,
    norm_pix: bool,
) -> Result<Var, ModelError> {
    let out = encode(g, p, cfg, tokens, plan)?;
    let pred = if cfg.is_multimodal() {
        decode_mmae(g, p, cfg, out.latents, plan)?
    } else {
        decode_mae(g, p, cfg, out.latents, plan)?
    };
    let rgb = tokens
        .get(&Modality::Rgb)
        .ok_or_else(|| ModelError::Contract("RGB tokens are required as targets".into()))?;
    let target = rgb.gather_rows(&plan.hidden(Modality::Rgb))?;
    reconstruction_loss(g, pred, &target, norm_pix)
}

fn full_rgb(cfg: &ModelConfig) -> Result<Vec<usize>, ModelError> {
    Ok((0..cfg.grid()?.num_positions()).collect())
}

/// Class logits `[1 × C]` from every RGB token: mean over all encoded tokens
/// (global included), layer norm, linear.
pub fn finetune_forward(g: &mut Graph, p: &Bound, cfg: &ModelConfig, rgb_tokens: &Tensor) -> Result<Var, ModelError> {
    let all = full_rgb(cfg)?;
    let out = encode_ordered(g, p, cfg, &[(Modality::Rgb, rgb_tokens, &all)])?;
    let pooled = g.mean_rows(out.latents)?;
    let h = norm(g, p, "head.norm", pooled)?;
    linear(g, p, "head.fc", h)
}

/// Global-token embedding `[1 × D]` of an unmasked RGB tile.
pub fn global_embedding(params: &ModelParams, cfg: &ModelConfig, rgb_tokens: &Tensor) -> Result<Tensor, ModelError> {
    if cfg.encoder.num_global_tokens == 0 {
        return Err(ModelError::Contract("model has no global token".into()));
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, |_| false);
    let all = full_rgb(cfg)?;
    let out = encode_ordered(&mut g, &p, cfg, &[(Modality::Rgb, rgb_tokens, &all)])?;
    Ok(g.value(out.latents).gather_rows(&[0])?)
}

/// Zeros every value at or below the `q`-quantile (linear interpolation).
/// `q = 0` leaves the map unchanged; `q = 1` zeros everything.
pub fn threshold_map(values: &mut [f64], q: f64) {
    if q <= 0.0 || values.is_empty() {
        return;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q.min(1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let cut = sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64);
    values.iter_mut().filter(|v| **v <= cut).for_each(|v| *v = 0.0);
}

/// Per-head attention from the first global token to every patch at
/// encoder layer `layer`, as `[S × S]` maps (nearest upsampling).
pub fn attention_maps(
    params: &ModelParams,
    cfg: &ModelConfig,
    rgb_tokens: &Tensor,
    layer: usize,
    threshold: f64,
) -> Result<Vec<Tensor>, ModelError> {
    let e = &cfg.encoder;
    if e.num_global_tokens == 0 {
        return Err(ModelError::Contract("attention maps need a global token".into()));
    }
    if layer >= e.depth {
        return Err(ModelError::Contract(format!("layer {layer} of a {}-layer encoder", e.depth)));
    }
    let grid = cfg.grid()?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, |_| false);
    let all = full_rgb(cfg)?;
    let out = encode_ordered(&mut g, &p, cfg, &[(Modality::Rgb, rgb_tokens, &all)])?;
    let side = grid.grid_side();
    let s = grid.image_size();
    let ps = grid.patch_size();
    let gl = e.num_global_tokens;
    out.attention[layer]
        .iter()
        .map(|&a| {
            let row = g.value(a).row(0);
            let mut cells = row[gl..gl + side * side].to_vec();
            threshold_map(&mut cells, threshold);
            let mut map = vec![0.0; s * s];
            for y in 0..s {
                for x in 0..s {
                    map[y * s + x] = cells[(y / ps) * side + x / ps];
                }
            }
            Ok(Tensor::matrix(s, s, map)?)
        })
        .collect()
}

/// 8-bit grayscale rendering of a map, scaled so its maximum is white.
/// An all-zero map renders black.
pub fn attention_image(map: &Tensor) -> Result<image::GrayImage, ModelError> {
    if map.shape().len() != 2 {
        return Err(ModelError::Contract(format!("map of shape {:?}", map.shape())));
    }
    let (h, w) = (map.rows(), map.cols());
    let max = map.data().iter().copied().fold(0.0, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let px = map
        .data()
        .iter()
        .map(|v| (v.max(0.0) * scale + 0.5).floor().min(255.0) as u8)
        .collect();
    Ok(image::GrayImage::from_raw(w as u32, h as u32, px).expect("buffer size"))
}
