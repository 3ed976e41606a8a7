//! Analytical cost model for the backbone, selector, and confidence proxy as
//! a function of retained token count. Counts are exact integers given a
//! config; nothing is ever measured.
//!
//! Counting convention: matrix products are billed as one operation per fused
//! multiply-add (the dominant-term convention behind the published per-clip
//! GFLOPs figures for video transformers); layernorm, softmax, and
//! activations are included as linear terms with the small per-element
//! constants below.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::ModelConfig;
use crate::policy::{keep_count, validate_p_ratio};
use crate::selector::{selector_flops, SelectorConfig};

/// Per-element cost charged for one layernorm pass (mean, variance, affine).
const LN_OPS_PER_ELEM: u128 = 5;
/// Per-element cost charged for softmax (exp, sum, divide).
const SOFTMAX_OPS_PER_ELEM: u128 = 3;
/// Per-element cost charged for the tanh-based gelu.
const GELU_OPS_PER_ELEM: u128 = 8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlopsReport {
    pub n_total: usize,
    pub n_kept: usize,
    pub p_ratio: f64,
    pub patch_embed: u128,
    pub attn_linear: u128,
    pub attn_quadratic: u128,
    pub mlp: u128,
    pub norm_softmax_act: u128,
    pub head: u128,
    pub selector: u128,
    pub proxy: u128,
    pub total: u128,
    pub config: ModelConfig,
}

impl FlopsReport {
    pub fn gflops(&self) -> f64 {
        self.total as f64 / 1e9
    }
}

/// Cost of one encoder block at n retained tokens: QKV + output projections
/// (4 n D^2), the two attention matrix products (2 n^2 D), the MLP
/// (2 mlp_ratio n D^2), plus the linear layernorm/softmax/gelu terms.
pub fn block_flops(n: usize, d: usize, heads: usize, mlp_ratio: usize) -> u128 {
    let (n, d, heads, mlp_ratio) = (n as u128, d as u128, heads as u128, mlp_ratio as u128);
    let attn_linear = 4 * n * d * d;
    let attn_quadratic = 2 * n * n * d;
    let mlp = 2 * mlp_ratio * n * d * d;
    let extras = 2 * LN_OPS_PER_ELEM * n * d
        + SOFTMAX_OPS_PER_ELEM * heads * n * n
        + GELU_OPS_PER_ELEM * n * mlp_ratio * d;
    attn_linear + attn_quadratic + mlp + extras
}

/// Full-model cost at ratio rho. The patch embedding is always billed at the
/// full token count (selection happens after embedding); the blocks and head
/// run on ceil(rho * N) tokens. Selector and proxy costs are optional
/// add-ons.
pub fn model_flops(
    cfg: &ModelConfig,
    rho: f64,
    include_selector: bool,
    include_proxy: Option<&ModelConfig>,
) -> Result<FlopsReport> {
    validate_p_ratio(rho)?;
    let n_total = cfg.grid().n();
    let n_kept = keep_count(n_total, rho);
    let (nk, d, c) = (n_kept as u128, cfg.embed_dim as u128, cfg.classes as u128);
    let patch_embed = n_total as u128 * cfg.patch_dim() as u128 * d + 2 * n_total as u128 * d;

    let attn_linear = cfg.blocks as u128 * 4 * nk * d * d;
    let attn_quadratic = cfg.blocks as u128 * 2 * nk * nk * d;
    let mlp = cfg.blocks as u128 * 2 * cfg.mlp_ratio as u128 * nk * d * d;
    let per_block = block_flops(n_kept, cfg.embed_dim, cfg.heads, cfg.mlp_ratio);
    let norm_softmax_act =
        cfg.blocks as u128 * per_block - attn_linear - attn_quadratic - mlp;
    let head = nk * d + d * c + c;

    // selector_flops bills one multiply-add as two operations; halve it so
    // the component is in the same multiply-add units as the backbone terms
    let selector = if include_selector {
        selector_flops(&SelectorConfig::for_model(cfg), n_total) / 2
    } else {
        0
    };
    let proxy = match include_proxy {
        Some(pcfg) => model_flops(pcfg, 1.0, false, None)?.total,
        None => 0,
    };
    let total =
        patch_embed + attn_linear + attn_quadratic + mlp + norm_softmax_act + head + selector + proxy;
    Ok(FlopsReport {
        n_total,
        n_kept,
        p_ratio: rho,
        patch_embed,
        attn_linear,
        attn_quadratic,
        mlp,
        norm_softmax_act,
        head,
        selector,
        proxy,
        total,
        config: cfg.clone(),
    })
}

/// Dataset-weighted mean cost under per-clip adaptive ratios, with the
/// percent reduction against the fixed base ratio.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptiveFlops {
    pub base_rho: f64,
    pub fixed_total: u128,
    pub mean_adaptive_total: f64,
    pub reduction_percent: f64,
    pub n_clips: usize,
    pub n_reduced: usize,
}

/// Bill every clip at its effective ratio (proxy cost included, since the
/// adaptive scheme must run the proxy on each clip) and compare against the
/// fixed budget without a proxy.
pub fn expected_adaptive_flops(
    cfg: &ModelConfig,
    proxy_cfg: &ModelConfig,
    base_rho: f64,
    effective_rhos: &[f64],
    include_selector: bool,
) -> Result<AdaptiveFlops> {
    let fixed = model_flops(cfg, base_rho, include_selector, None)?.total;
    let mut sum = 0.0;
    let mut n_reduced = 0;
    for &rho in effective_rhos {
        let r = model_flops(cfg, rho, include_selector, Some(proxy_cfg))?;
        sum += r.total as f64;
        if rho < base_rho {
            n_reduced += 1;
        }
    }
    let mean = sum / effective_rhos.len().max(1) as f64;
    Ok(AdaptiveFlops {
        base_rho,
        fixed_total: fixed,
        mean_adaptive_total: mean,
        reduction_percent: 100.0 * (1.0 - mean / fixed as f64),
        n_clips: effective_rhos.len(),
        n_reduced,
    })
}
