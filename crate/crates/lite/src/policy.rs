//! Selection policies: converting per-token scores into masks (top-K with
//! deterministic tie-breaking), the random baseline, attention-received and
//! motion-energy score baselines, and the adaptive compute budget driven by a
//! cheap confidence proxy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_clip, attention_received, ForwardOptions, ModelConfig, Params, SelectionMask};
use crate::oracle::{min_max_normalize, Provenance, TokenScores};
use crate::train::top_k_indices;

/// Proportion of tokens retained; valid in (0, 1].
pub fn validate_p_ratio(rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::config(format!("p_ratio {rho} must lie in (0, 1]")));
    }
    Ok(())
}

/// Number of retained tokens at ratio rho: ceil(rho * n).
pub fn keep_count(n: usize, rho: f64) -> usize {
    (rho * n as f64).ceil() as usize
}

/// Keep the ceil(rho * n) highest-scoring tokens, ties broken by lower index.
pub fn top_k_mask(scores: &TokenScores, rho: f64) -> Result<SelectionMask> {
    validate_p_ratio(rho)?;
    let n = scores.len();
    if n == 0 {
        return Err(Error::contract("top_k_mask on empty scores"));
    }
    let mut idx = top_k_indices(&scores.values, keep_count(n, rho));
    idx.sort_unstable();
    SelectionMask::new(idx, n)
}

/// Per-clip mask RNG keyed by (global seed, clip id, policy, rho) so cell
/// order in the sweep can never change results.
fn mask_rng(seed: u64, clip_id: usize, rho: f64) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(clip_id as u64).to_le_bytes());
    key[16..24].copy_from_slice(&rho.to_bits().to_le_bytes());
    key[24] = 0x7a; // random-mask domain tag
    ChaCha20Rng::from_seed(key)
}

/// Uniform sample without replacement of ceil(rho * n) indices, sorted.
pub fn random_mask(n: usize, rho: f64, seed: u64, clip_id: usize) -> Result<SelectionMask> {
    validate_p_ratio(rho)?;
    if n == 0 {
        return Err(Error::contract("random_mask with zero tokens"));
    }
    let k = keep_count(n, rho);
    let mut rng = mask_rng(seed, clip_id, rho);
    // partial Fisher-Yates: after k swaps the prefix is a uniform k-subset
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    let mut idx = pool[..k].to_vec();
    idx.sort_unstable();
    SelectionMask::new(idx, n)
}

/// Attention-magnitude baseline: total attention each token receives in the
/// probe block (column sums averaged over heads), min-max normalized.
pub fn attention_scores(params: &Params, cfg: &ModelConfig, pixels: &[f32]) -> Result<TokenScores> {
    let opts = ForwardOptions {
        attention: true,
        ..Default::default()
    };
    let (tape, art) = forward_clip(params, cfg, pixels, None, opts, false)?;
    let probs = art
        .attn_probs
        .ok_or_else(|| Error::contract("forward did not record attention matrices"))?;
    let received = attention_received(&tape, &probs);
    Ok(min_max_normalize(&received, Provenance::Attention))
}

/// Motion-energy baseline: mean absolute temporal pixel difference inside
/// each tube, min-max normalized. Frame pairs are taken within the tube's own
/// time window; a tube spanning a single frame compares against the next one.
pub fn motion_scores(pixels: &[f32], cfg: &ModelConfig) -> Result<TokenScores> {
    let (t, h, w) = (cfg.frames, cfg.height, cfg.width);
    if pixels.len() != t * h * w * 3 {
        return Err(Error::Shape {
            op: "motion_scores",
            lhs: vec![pixels.len()],
            rhs: vec![t, h, w, 3],
        });
    }
    if t < 2 {
        return Err(Error::contract("motion_scores needs at least 2 frames"));
    }
    let grid = cfg.grid();
    let px = |f: usize, y: usize, x: usize, c: usize| pixels[((f * h + y) * w + x) * 3 + c] as f64;
    let mut raw = vec![0.0; grid.n()];
    for n in 0..grid.n() {
        let (gt, gh, gw) = grid.position(n);
        let f0 = gt * cfg.tube_t;
        let pairs: Vec<(usize, usize)> = if cfg.tube_t >= 2 {
            (0..cfg.tube_t - 1).map(|dt| (f0 + dt, f0 + dt + 1)).collect()
        } else {
            let other = if f0 + 1 < t { f0 + 1 } else { f0 - 1 };
            vec![(f0, other)]
        };
        let mut sum = 0.0;
        for &(fa, fb) in &pairs {
            for dh in 0..cfg.tube_h {
                let y = gh * cfg.tube_h + dh;
                for dw in 0..cfg.tube_w {
                    let x = gw * cfg.tube_w + dw;
                    for c in 0..3 {
                        sum += (px(fb, y, x, c) - px(fa, y, x, c)).abs();
                    }
                }
            }
        }
        raw[n] = sum / (pairs.len() * cfg.tube_h * cfg.tube_w * 3) as f64;
    }
    Ok(min_max_normalize(&raw, Provenance::Motion))
}

/// Adaptive budget thresholds and the base-to-reduced ratio map.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BudgetPolicy {
    pub tau1: f64,
    pub tau2: f64,
    /// Pairs of (base rho, reduced rho) applied to high-confidence clips.
    pub reduced: Vec<(f64, f64)>,
}

impl Default for BudgetPolicy {
    fn default() -> Self {
        BudgetPolicy {
            tau1: 0.1,
            tau2: 0.5,
            reduced: vec![(0.9, 0.3), (0.7, 0.3), (0.5, 0.3), (0.3, 0.2)],
        }
    }
}

impl BudgetPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.tau1 && self.tau1 < self.tau2 && self.tau2 <= 1.0) {
            return Err(Error::config(format!(
                "budget: need 0 <= tau1 < tau2 <= 1, got tau1={} tau2={}",
                self.tau1, self.tau2
            )));
        }
        for &(base, red) in &self.reduced {
            validate_p_ratio(base)?;
            validate_p_ratio(red)?;
            if red > base {
                return Err(Error::config(format!(
                    "budget: reduced ratio {red} exceeds base {base}"
                )));
            }
        }
        Ok(())
    }

    fn lookup(&self, base: f64) -> Option<f64> {
        self.reduced
            .iter()
            .find(|(b, _)| (b - base).abs() < 1e-9)
            .map(|&(_, r)| r)
    }
}

/// Pick the effective ratio for one clip: high-confidence clips (c > tau2)
/// use the reduced budget; everything else keeps the base ratio. Never
/// increases the budget.
pub fn adaptive_budget(confidence: f64, base_rho: f64, policy: &BudgetPolicy) -> Result<f64> {
    validate_p_ratio(base_rho)?;
    if !(0.0..=1.0).contains(&confidence) {
        return Err(Error::contract(format!(
            "confidence {confidence} outside [0, 1]"
        )));
    }
    if confidence > policy.tau2 {
        policy.lookup(base_rho).ok_or_else(|| {
            Error::config(format!(
                "budget: base ratio {base_rho} has no reduced entry"
            ))
        })
    } else {
        Ok(base_rho)
    }
}

/// Maximum softmax probability of the proxy classifier on a clip (already
/// downsampled to the proxy's input geometry).
pub fn confidence_proxy(params: &Params, cfg: &ModelConfig, pixels: &[f32]) -> Result<f64> {
    let (tape, art) = forward_clip(params, cfg, pixels, None, ForwardOptions::default(), false)?;
    let logits = tape.data(art.logits);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::TokenScores;

    fn scores(values: Vec<f64>) -> TokenScores {
        TokenScores {
            values,
            provenance: Provenance::Random,
            degenerate: false,
        }
    }

    #[test]
    fn top_k_tie_resolves_to_lower_index() {
        let m = top_k_mask(&scores(vec![0.9, 0.1, 0.5, 0.5]), 0.5).unwrap();
        assert_eq!(m.indices(), &[0, 2]);
    }

    #[test]
    fn rho_one_keeps_everything() {
        let m = top_k_mask(&scores(vec![0.2, 0.8, 0.5]), 1.0).unwrap();
        assert_eq!(m.indices(), &[0, 1, 2]);
    }

    #[test]
    fn keep_count_uses_ceiling() {
        assert_eq!(keep_count(1568, 0.3), 471);
        assert_eq!(keep_count(64, 0.5), 32);
        assert_eq!(keep_count(10, 0.01), 1);
    }

    #[test]
    fn random_mask_is_reproducible_and_sized() {
        let a = random_mask(64, 0.5, 3, 17).unwrap();
        let b = random_mask(64, 0.5, 3, 17).unwrap();
        assert_eq!(a.indices(), b.indices());
        assert_eq!(a.len(), 32);
        let c = random_mask(64, 0.5, 4, 17).unwrap();
        assert_ne!(a.indices(), c.indices());
    }

    #[test]
    fn random_mask_inclusion_is_binomial() {
        // 10^5 draws at N=64, rho=0.5: per-index inclusion within 3 sigma
        let draws = 100_000usize;
        let n = 64;
        let mut counts = vec![0usize; n];
        for clip in 0..draws {
            for &i in random_mask(n, 0.5, 11, clip).unwrap().indices() {
                counts[i] += 1;
            }
        }
        let p = 0.5;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            let dev = (c as f64 - draws as f64 * p).abs();
            assert!(dev < 3.0 * sigma, "index {i}: count {c}, dev {dev:.1}");
        }
    }

    #[test]
    fn motion_single_changed_pixel_scores_its_tube_one() {
        let mut cfg = ModelConfig::desk();
        cfg.frames = 2;
        cfg.tube_t = 2;
        let mut pixels = vec![0.3f32; 2 * 32 * 32 * 3];
        // flip one pixel in frame 1 at (y=9, x=20) -> tube (0, 1, 2)
        let base = ((1 * 32 + 9) * 32 + 20) * 3;
        pixels[base] = 1.0;
        let s = motion_scores(&pixels, &cfg).unwrap();
        let hot = cfg.grid().index(0, 1, 2);
        assert_eq!(s.values[hot], 1.0);
        for (i, &v) in s.values.iter().enumerate() {
            if i != hot {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn motion_static_clip_is_degenerate_uniform() {
        let cfg = ModelConfig::desk();
        let pixels = vec![0.4f32; 8 * 32 * 32 * 3];
        let s = motion_scores(&pixels, &cfg).unwrap();
        assert!(s.degenerate);
        assert!(s.values.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn motion_moving_block_ranks_its_tubes_top() {
        // a bright 8x8 block jumps one tube to the right between frames
        let mut cfg = ModelConfig::desk();
        cfg.frames = 2;
        cfg.tube_t = 2;
        let mut pixels = vec![0.0f32; 2 * 32 * 32 * 3];
        for y in 8..16 {
            for x in 0..8 {
                let b0 = ((0 * 32 + y) * 32 + x) * 3;
                pixels[b0..b0 + 3].copy_from_slice(&[1.0; 3]);
                let b1 = ((1 * 32 + y) * 32 + x + 8) * 3;
                pixels[b1..b1 + 3].copy_from_slice(&[1.0; 3]);
            }
        }
        let s = motion_scores(&pixels, &cfg).unwrap();
        let grid = cfg.grid();
        let top: Vec<usize> = top_k_mask(&s, 2.0 / grid.n() as f64)
            .unwrap()
            .indices()
            .to_vec();
        let expect = vec![grid.index(0, 1, 0), grid.index(0, 1, 1)];
        assert_eq!(top, expect);
    }

    #[test]
    fn adaptive_budget_paper_examples() {
        let p = BudgetPolicy::default();
        assert_eq!(adaptive_budget(0.7, 0.5, &p).unwrap(), 0.3);
        assert_eq!(adaptive_budget(0.6, 0.3, &p).unwrap(), 0.2);
        assert_eq!(adaptive_budget(0.3, 0.5, &p).unwrap(), 0.5);
    }

    #[test]
    fn adaptive_budget_low_confidence_keeps_base() {
        let p = BudgetPolicy::default();
        assert_eq!(adaptive_budget(0.05, 0.9, &p).unwrap(), 0.9);
    }

    #[test]
    fn adaptive_budget_never_increases() {
        let p = BudgetPolicy::default();
        for &base in &[0.3, 0.5, 0.7, 0.9] {
            for &c in &[0.0, 0.1, 0.3, 0.5, 0.51, 0.8, 1.0] {
                let eff = adaptive_budget(c, base, &p).unwrap();
                assert!(eff <= base);
            }
        }
    }

    #[test]
    fn adaptive_budget_missing_base_is_config_error() {
        let p = BudgetPolicy::default();
        let err = adaptive_budget(0.9, 0.45, &p).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn budget_validation_rejects_inverted_thresholds() {
        let p = BudgetPolicy {
            tau1: 0.6,
            tau2: 0.5,
            reduced: vec![],
        };
        assert!(p.validate().is_err());
    }
}
