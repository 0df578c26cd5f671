//! Object encoder layers: inherent self-attention on the template stream,
//! mixed cross-attention over [vt | it | ht | sr], pre-norm residual blocks,
//! and the per-layer variation-token cache.

use crate::error::{Error, Result};
use crate::layout::{ModelVariant, Segment, TokenLayout};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Projection parameters of one attention block (staged tape vars).
#[derive(Copy, Clone, Debug)]
pub struct AttnVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// One encoder layer's parameters (staged tape vars).
#[derive(Copy, Clone, Debug)]
pub struct LayerVars {
    pub attn: AttnVars,
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
}

/// Live token streams threaded through the encoder stack.
#[derive(Copy, Clone, Debug)]
pub struct StreamVars {
    /// inherent-template stream, absent for HTM
    pub it: Option<Var>,
    /// joint [ht | sr] stream ([sr] alone for STM)
    pub hs: Var,
}

/// Per-layer hybrid-template activations reserved from the previous frame.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationCache {
    /// one [N_t, D] block per encoder layer, in layer order
    pub layers: Vec<Tensor>,
    /// frame the activations were produced in
    pub frame_index: u64,
}

impl VariationCache {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}

/// Reserve per-layer hybrid-template outputs verbatim as the next frame's
/// variation tokens. Pure assignment, no arithmetic.
pub fn make_variation_tokens(
    prev_ht_layers: &[Tensor],
    depth: usize,
    frame_index: u64,
) -> Result<VariationCache> {
    if prev_ht_layers.len() != depth {
        return Err(Error::contract(format!(
            "variation cache needs {depth} layers, got {}",
            prev_ht_layers.len()
        )));
    }
    Ok(VariationCache {
        layers: prev_ht_layers.to_vec(),
        frame_index,
    })
}

fn project(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let p = tape.matmul(x, w)?;
    tape.add_bias(p, b)
}

/// Multi-head self-attention over the inherent template only. Input is the
/// normalized it block [B, N_t, D]; output is A_it [B, N_t, D] before the
/// output projection.
pub fn inherent_self_attention(
    tape: &mut Tape,
    it_norm: Var,
    p: &AttnVars,
    heads: usize,
) -> Result<Var> {
    let q = project(tape, it_norm, p.wq, p.bq)?;
    let k = project(tape, it_norm, p.wk, p.bk)?;
    let v = project(tape, it_norm, p.wv, p.bv)?;
    let out = attention_core(tape, q, k, v, heads)?;
    Ok(out.context)
}

/// Projected query/key/value triplet of the mixed cross-attention plus the
/// layout describing its segment boundaries.
#[derive(Copy, Clone, Debug)]
pub struct MixedQkv {
    /// [B, n_ht + n_sr, D]
    pub q_z: Var,
    /// [B, n_vt + n_it + n_ht + n_sr, D]
    pub k_z: Var,
    pub v_z: Var,
    pub layout: TokenLayout,
}

/// Assemble the mixed attention inputs: queries from [ht | sr], keys/values
/// from every present segment in [vt | it | ht | sr] order. Absent segments
/// are omitted entirely.
pub fn assemble_mixed_qkv(
    tape: &mut Tape,
    vt_norm: Option<Var>,
    it_norm: Option<Var>,
    hs_norm: Var,
    n_ht: usize,
    p: &AttnVars,
) -> Result<MixedQkv> {
    let hs_shape = tape.value(hs_norm).shape().to_vec();
    if hs_shape.len() != 3 {
        return Err(Error::dim("mixed attention expects [B,N,D] streams"));
    }
    if n_ht > hs_shape[1] {
        return Err(Error::contract(format!(
            "hybrid segment {n_ht} exceeds joint stream of {} tokens",
            hs_shape[1]
        )));
    }
    let n_sr = hs_shape[1] - n_ht;
    let layout = TokenLayout {
        n_vt: vt_norm.map_or(0, |v| tape.value(v).shape()[1]),
        n_it: it_norm.map_or(0, |v| tape.value(v).shape()[1]),
        n_ht,
        n_sr,
    };
    layout.validate()?;

    let mut kv_parts: Vec<Var> = Vec::new();
    if let Some(vt) = vt_norm {
        kv_parts.push(vt);
    }
    if let Some(it) = it_norm {
        kv_parts.push(it);
    }
    kv_parts.push(hs_norm);
    let kv_src = if kv_parts.len() == 1 {
        kv_parts[0]
    } else {
        tape.concat_tokens(&kv_parts)?
    };

    let q_z = project(tape, hs_norm, p.wq, p.bq)?;
    let k_z = project(tape, kv_src, p.wk, p.bk)?;
    let v_z = project(tape, kv_src, p.wv, p.bv)?;
    Ok(MixedQkv { q_z, k_z, v_z, layout })
}

/// Output of one attention core evaluation.
#[derive(Copy, Clone, Debug)]
pub struct AttnOut {
    /// merged-head context [B, n_q, D], before the output projection
    pub context: Var,
    /// row-stochastic correlation map [B*H, n_q, n_kv]
    pub probs: Var,
}

fn attention_core(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<AttnOut> {
    let d_model = tape.value(q).last_extent();
    if d_model % heads != 0 {
        return Err(Error::dim(format!(
            "model dim {d_model} not divisible into {heads} heads"
        )));
    }
    let d_head = d_model / heads;
    let qh = tape.split_heads(q, heads)?;
    let kh = tape.split_heads(k, heads)?;
    let vh = tape.split_heads(v, heads)?;
    let raw = tape.batch_matmul(qh, kh, true)?;
    let scaled = tape.scale(raw, 1.0 / (d_head as f64).sqrt());
    let probs = tape.softmax_rows(scaled)?;
    let ctx = tape.batch_matmul(probs, vh, false)?;
    let merged = tape.merge_heads(ctx, heads)?;
    Ok(AttnOut {
        context: merged,
        probs,
    })
}

/// Mixed cross-attention A_z = Softmax(q_z k_z^T / sqrt(d)) v_z, split into
/// heads. The result rows order as [A_ht; A_sr].
pub fn mixed_cross_attention(tape: &mut Tape, qkv: &MixedQkv, heads: usize) -> Result<AttnOut> {
    attention_core(tape, qkv.q_z, qkv.k_z, qkv.v_z, heads)
}

/// The row-softmaxed correlation maps of the mixed attention, sliced into the
/// eight named blocks, one matrix per head. Value-level (no tape).
#[derive(Clone, Debug)]
pub struct CorrBlocks {
    pub layout: TokenLayout,
    /// one [n_q, n_kv] row-stochastic matrix per head
    pub per_head: Vec<Tensor>,
}

impl CorrBlocks {
    /// Extract block M_{qseg, kseg} of one head.
    pub fn block(&self, head: usize, qseg: Segment, kseg: Segment) -> Result<Tensor> {
        let m = &self.per_head[head];
        let qr = self.layout.q_range(qseg)?;
        let kr = self.layout.kv_range(kseg);
        let n_kv = self.layout.total_kv();
        let mut data = Vec::with_capacity(qr.len() * kr.len());
        for i in qr.clone() {
            for j in kr.clone() {
                data.push(m.data()[i * n_kv + j]);
            }
        }
        Tensor::new(vec![qr.len(), kr.len().max(1)], data).or_else(|_| {
            // empty block: segment absent
            Err(Error::contract(format!(
                "block ({}, {}) is empty under layout {:?}",
                qseg.name(),
                kseg.name(),
                self.layout
            )))
        })
    }
}

/// Compute the correlation maps directly from projected q_z/k_z values
/// (single sample: [n_q, D], [n_kv, D]).
pub fn correlation_blocks(
    q_z: &Tensor,
    k_z: &Tensor,
    heads: usize,
    layout: TokenLayout,
) -> Result<CorrBlocks> {
    if q_z.shape().len() != 2 || k_z.shape().len() != 2 {
        return Err(Error::dim("correlation_blocks expects 2-D q_z/k_z"));
    }
    let (n_q, d_model) = (q_z.shape()[0], q_z.shape()[1]);
    let n_kv = k_z.shape()[0];
    if k_z.shape()[1] != d_model || d_model % heads != 0 {
        return Err(Error::dim(format!(
            "correlation_blocks: q {:?} vs k {:?} with {heads} heads",
            q_z.shape(),
            k_z.shape()
        )));
    }
    if n_q != layout.total_q() || n_kv != layout.total_kv() {
        return Err(Error::contract(format!(
            "correlation_blocks: layout {:?} does not describe q {n_q} / kv {n_kv}",
            layout
        )));
    }
    q_z.assert_finite("correlation q_z")?;
    k_z.assert_finite("correlation k_z")?;
    let d_head = d_model / heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut per_head = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut m = vec![0.0; n_q * n_kv];
        for i in 0..n_q {
            let qrow = &q_z.data()[i * d_model + h * d_head..][..d_head];
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n_kv {
                let krow = &k_z.data()[j * d_model + h * d_head..][..d_head];
                let s: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                m[i * n_kv + j] = s;
                mx = mx.max(s);
            }
            let mut z = 0.0;
            for j in 0..n_kv {
                let e = (m[i * n_kv + j] - mx).exp();
                m[i * n_kv + j] = e;
                z += e;
            }
            for j in 0..n_kv {
                m[i * n_kv + j] /= z;
            }
        }
        per_head.push(Tensor::new(vec![n_q, n_kv], m)?);
    }
    Ok(CorrBlocks { layout, per_head })
}

fn ffn(tape: &mut Tape, x: Var, lp: &LayerVars) -> Result<Var> {
    let h = project(tape, x, lp.ffn_w1, lp.ffn_b1)?;
    let a = tape.gelu(h);
    project(tape, a, lp.ffn_w2, lp.ffn_b2)
}

/// Trace hooks captured during a layer forward.
#[derive(Copy, Clone, Debug)]
pub struct LayerTrace {
    pub mixed_probs: Var,
    pub q_z: Var,
    pub k_z: Var,
    pub layout: TokenLayout,
}

/// One pre-norm encoder layer. `vt` carries the previous frame's cached
/// hybrid-template block for this layer (already a tape constant), or None.
/// Returns the updated streams; vt is consumed as keys/values only.
pub fn encoder_layer_forward(
    tape: &mut Tape,
    s: &StreamVars,
    vt: Option<Var>,
    n_ht: usize,
    lp: &LayerVars,
    heads: usize,
    ln_eps: f64,
) -> Result<(StreamVars, LayerTrace)> {
    if vt.is_some() && n_ht == 0 {
        return Err(Error::contract(
            "variation tokens require a hybrid template stream",
        ));
    }
    // inherent stream: self-attention + FFN, isolated from everything else
    let (it_out, it_norm) = match s.it {
        Some(it) => {
            let n1 = tape.layer_norm(it, lp.ln1_g, lp.ln1_b, ln_eps)?;
            let a_it = inherent_self_attention(tape, n1, &lp.attn, heads)?;
            let o = project(tape, a_it, lp.attn.wo, lp.attn.bo)?;
            let it2 = tape.add(it, o)?;
            let n2 = tape.layer_norm(it2, lp.ln2_g, lp.ln2_b, ln_eps)?;
            let f = ffn(tape, n2, lp)?;
            let it3 = tape.add(it2, f)?;
            (Some(it3), Some(n1))
        }
        None => (None, None),
    };

    // mixed stream: queries [ht|sr], keys/values [vt|it|ht|sr]
    let hs_norm = tape.layer_norm(s.hs, lp.ln1_g, lp.ln1_b, ln_eps)?;
    let vt_norm = match vt {
        Some(v) => Some(tape.layer_norm(v, lp.ln1_g, lp.ln1_b, ln_eps)?),
        None => None,
    };
    let qkv = assemble_mixed_qkv(tape, vt_norm, it_norm, hs_norm, n_ht, &lp.attn)?;
    let attn = mixed_cross_attention(tape, &qkv, heads)?;
    let o = project(tape, attn.context, lp.attn.wo, lp.attn.bo)?;
    let hs2 = tape.add(s.hs, o)?;
    let n2 = tape.layer_norm(hs2, lp.ln2_g, lp.ln2_b, ln_eps)?;
    let f = ffn(tape, n2, lp)?;
    let hs3 = tape.add(hs2, f)?;

    Ok((
        StreamVars {
            it: it_out,
            hs: hs3,
        },
        LayerTrace {
            mixed_probs: attn.probs,
            q_z: qkv.q_z,
            k_z: qkv.k_z,
            layout: qkv.layout,
        },
    ))
}

/// Full stacked forward. `cache` supplies per-layer variation tokens as
/// constants ([B, N_t, D] each, layer k consumed by layer k); `new_cache`
/// returns this pass's per-layer hybrid-template outputs, detached.
pub struct BackboneOut {
    pub streams: StreamVars,
    /// detached [B, N_t, D] hybrid-template output per layer (empty when the
    /// variant has no hybrid template)
    pub new_cache: Vec<Tensor>,
    pub traces: Vec<LayerTrace>,
}

#[allow(clippy::too_many_arguments)]
pub fn forward_backbone(
    tape: &mut Tape,
    it_tokens: Option<Var>,
    ht_tokens: Option<Var>,
    sr_tokens: Var,
    cache: Option<&[Tensor]>,
    layers: &[LayerVars],
    variant: ModelVariant,
    heads: usize,
    ln_eps: f64,
) -> Result<BackboneOut> {
    if variant.has_inherent() != it_tokens.is_some() {
        return Err(Error::contract(format!(
            "variant {variant} expects inherent tokens: {}",
            variant.has_inherent()
        )));
    }
    if variant.has_hybrid() != ht_tokens.is_some() {
        return Err(Error::contract(format!(
            "variant {variant} expects hybrid tokens: {}",
            variant.has_hybrid()
        )));
    }
    if let Some(c) = cache {
        if !variant.supports_vt() {
            return Err(Error::contract(format!(
                "variant {variant} cannot consume a variation cache"
            )));
        }
        if c.len() != layers.len() {
            return Err(Error::contract(format!(
                "variation cache depth {} != encoder depth {}",
                c.len(),
                layers.len()
            )));
        }
    }

    let n_ht = ht_tokens.map_or(0, |h| tape.value(h).shape()[1]);
    let hs = match ht_tokens {
        Some(ht) => tape.concat_tokens(&[ht, sr_tokens])?,
        None => sr_tokens,
    };
    let mut streams = StreamVars {
        it: it_tokens,
        hs,
    };

    let batch = tape.value(streams.hs).shape()[0];
    let mut new_cache = Vec::new();
    let mut traces = Vec::new();
    for (k, lp) in layers.iter().enumerate() {
        let vt = match cache {
            Some(c) => {
                let t = &c[k];
                let t3 = match t.shape().len() {
                    2 => {
                        let (n, d) = (t.shape()[0], t.shape()[1]);
                        let mut stacked = Vec::with_capacity(batch * n * d);
                        for _ in 0..batch {
                            stacked.extend_from_slice(t.data());
                        }
                        Tensor::new(vec![batch, n, d], stacked)?
                    }
                    3 => t.clone(),
                    _ => {
                        return Err(Error::contract(
                            "variation cache entries must be [N,D] or [B,N,D]",
                        ))
                    }
                };
                Some(tape.constant(t3))
            }
            None => None,
        };
        let (next, trace) = encoder_layer_forward(tape, &streams, vt, n_ht, lp, heads, ln_eps)?;
        streams = next;
        traces.push(trace);
        if n_ht > 0 {
            let ht_slice = tape.slice_tokens(streams.hs, 0, n_ht)?;
            new_cache.push(tape.value(ht_slice).clone());
        }
    }
    Ok(BackboneOut {
        streams,
        new_cache,
        traces,
    })
}
