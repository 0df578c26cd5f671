//! Closed-form multiply-accumulate and parameter accounting.
//!
//! Counting conventions: projections cost rows * D^2, score + weighted-sum
//! cost 2 * n_q * n_kv * D per layer, FFN costs 8 * rows * D^2, convolutions
//! cost cells * 9 * c_in * c_out. Normalizations, nonlinearities, and bias
//! adds are ignored. Variation tokens add key/value projections and kv
//! columns only; building the cache itself is pure assignment and costs
//! nothing.

use crate::error::{Error, Result};
use crate::layout::{ModelVariant, TokenLayout};
use crate::model::ModelConfig;
use serde::Serialize;

#[derive(Clone, Debug, Serialize)]
pub struct ComplexityReport {
    pub components: Vec<(String, u64)>,
}

impl ComplexityReport {
    pub fn total(&self) -> u64 {
        self.components.iter().map(|(_, v)| v).sum()
    }

    pub fn get(&self, name: &str) -> u64 {
        self.components
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .unwrap_or(0)
    }
}

/// Analytic MAC count of one forward pass.
pub fn count_macs(
    cfg: &ModelConfig,
    variant: ModelVariant,
    vt_enabled: bool,
) -> Result<ComplexityReport> {
    cfg.validate()?;
    let layout = TokenLayout::for_variant(variant, vt_enabled, cfg.n_t(), cfg.n_sr())?;
    let d = cfg.dim as u64;
    let n_t = cfg.n_t() as u64;
    let (n_q, n_kv) = (layout.total_q() as u64, layout.total_kv() as u64);
    let depth = cfg.depth as u64;

    let embedded_tokens =
        (layout.n_it + layout.n_ht + layout.n_sr) as u64; // vt is cached, not embedded
    let patch_embed = embedded_tokens * (cfg.patch_cols() as u64) * d;

    let mut attn_proj = 0u64;
    let mut attn_scores = 0u64;
    if variant.has_inherent() {
        attn_proj += depth * 4 * n_t * d * d; // q,k,v,out over it
        attn_scores += depth * 2 * n_t * n_t * d;
    }
    attn_proj += depth * (2 * n_q + 2 * n_kv) * d * d; // q,out over n_q; k,v over n_kv
    attn_scores += depth * 2 * n_q * n_kv * d;

    let ffn_tokens = (layout.n_it + layout.n_ht + layout.n_sr) as u64;
    let ffn = depth * 8 * ffn_tokens * d * d;

    let cells = cfg.n_sr() as u64;
    let widths = cfg.head_widths();
    let mut head = 0u64;
    for branch in 0..3u64 {
        for i in 0..4 {
            head += cells * 9 * (widths[i] as u64) * (widths[i + 1] as u64);
        }
        let out_ch = if branch == 0 { 1 } else { 2 };
        head += cells * (widths[4] as u64) * out_ch;
    }

    Ok(ComplexityReport {
        components: vec![
            ("patch_embed".into(), patch_embed),
            ("attn_proj".into(), attn_proj),
            ("attn_scores".into(), attn_scores),
            ("ffn".into(), ffn),
            ("head".into(), head),
        ],
    })
}

/// The exact extra MACs that enabling variation tokens adds: N_t more
/// key/value projections and N_t more kv columns per layer, nothing else.
pub fn vt_overhead_macs(cfg: &ModelConfig, variant: ModelVariant) -> Result<u64> {
    if !variant.supports_vt() {
        return Err(Error::contract(format!(
            "variant {variant} cannot carry variation tokens"
        )));
    }
    let d = cfg.dim as u64;
    let n_t = cfg.n_t() as u64;
    let base = TokenLayout::for_variant(variant, false, cfg.n_t(), cfg.n_sr())?;
    let n_q = base.total_q() as u64;
    let depth = cfg.depth as u64;
    Ok(depth * (2 * n_t * d * d + 2 * n_q * n_t * d))
}

/// Analytic parameter census (matches the live model's named tensors,
/// including batch-norm running buffers).
pub fn count_params(cfg: &ModelConfig) -> Result<ComplexityReport> {
    cfg.validate()?;
    let d = cfg.dim as u64;
    let patch_embed =
        (cfg.patch_cols() as u64) * d + (cfg.n_t() as u64 + cfg.n_sr() as u64) * d;
    let depth = cfg.depth as u64;
    let attn_proj = depth * 4 * (d * d + d);
    let ffn = depth * (d * 4 * d + 4 * d + 4 * d * d + d);
    let norms = depth * 4 * d + 2 * d;
    let widths = cfg.head_widths();
    let mut head = 0u64;
    for branch in 0..3u64 {
        for i in 0..4 {
            let (cin, cout) = (widths[i] as u64, widths[i + 1] as u64);
            head += 9 * cin * cout + 4 * cout; // conv + bn affine + bn buffers
        }
        let out_ch = if branch == 0 { 1 } else { 2 };
        head += (widths[4] as u64) * out_ch + out_ch;
    }
    Ok(ComplexityReport {
        components: vec![
            ("patch_embed".into(), patch_embed),
            ("attn_proj".into(), attn_proj),
            ("attn_scores".into(), 0),
            ("ffn".into(), ffn),
            ("norms".into(), norms),
            ("head".into(), head),
        ],
    })
}
