//! The token-value oracle: gradient of a chosen class logit w.r.t. the tapped
//! feature-map activations, mean-pooled over token positions into per-feature
//! importance weights, then a ReLU of the weighted activation combination,
//! min-max normalized to [0, 1].

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::model::{forward_clip, ForwardOptions, ModelConfig, Params};
use crate::train::top_k_indices;

/// Which score pipeline produced a set of token scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    OracleTrue,
    OraclePred,
    Selector,
    Attention,
    Motion,
    Random,
}

impl Provenance {
    pub fn name(&self) -> &'static str {
        match self {
            Provenance::OracleTrue => "oracle-true",
            Provenance::OraclePred => "oracle-pred",
            Provenance::Selector => "selector",
            Provenance::Attention => "attention",
            Provenance::Motion => "motion",
            Provenance::Random => "random",
        }
    }
}

/// Per-token scores in [0, 1]. After non-degenerate min-max normalization the
/// minimum is exactly 0 and the maximum exactly 1; degenerate inputs (all raw
/// values equal) map to a uniform 0.5 with the flag set.
#[derive(Debug, Clone)]
pub struct TokenScores {
    pub values: Vec<f64>,
    pub provenance: Provenance,
    pub degenerate: bool,
}

impl TokenScores {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

const DEGENERATE_EPS: f64 = 1e-12;

/// Min-max normalize raw scores to [0, 1], with the uniform-0.5 degenerate
/// rule when all raw values coincide.
pub fn min_max_normalize(raw: &[f64], provenance: Provenance) -> TokenScores {
    let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max - min < DEGENERATE_EPS {
        return TokenScores {
            values: vec![0.5; raw.len()],
            provenance,
            degenerate: true,
        };
    }
    let span = max - min;
    TokenScores {
        values: raw.iter().map(|v| (v - min) / span).collect(),
        provenance,
        degenerate: false,
    }
}

/// Per-feature importance: the mean over all N token positions of the logit
/// gradient, one weight per feature channel.
pub fn importance_weights(grads: &[f64], n: usize, d: usize) -> Vec<f64> {
    assert_eq!(grads.len(), n * d);
    let mut omega = vec![0.0; d];
    for row in grads.chunks(d) {
        for (o, g) in omega.iter_mut().zip(row) {
            *o += g;
        }
    }
    for o in omega.iter_mut() {
        *o /= n as f64;
    }
    omega
}

/// ReLU of the per-token weighted activation combination, then min-max.
pub fn token_scores(activations: &[f64], omega: &[f64], provenance: Provenance) -> TokenScores {
    let d = omega.len();
    assert_eq!(activations.len() % d, 0);
    let raw: Vec<f64> = activations
        .chunks(d)
        .map(|row| row.iter().zip(omega).map(|(a, w)| a * w).sum::<f64>().max(0.0))
        .collect();
    min_max_normalize(&raw, provenance)
}

/// Which class logit the oracle backpropagates from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleMode {
    /// The clip's true label (privileged information).
    TrueLabel,
    /// The argmax of the model's own prediction.
    Predicted,
}

impl OracleMode {
    pub fn provenance(&self) -> Provenance {
        match self {
            OracleMode::TrueLabel => Provenance::OracleTrue,
            OracleMode::Predicted => Provenance::OraclePred,
        }
    }
}

pub struct OracleOutput {
    pub scores: TokenScores,
    /// Class whose pre-softmax logit was differentiated.
    pub target_class: usize,
    pub predicted_class: usize,
    pub logits: Vec<f64>,
}

/// Full-token forward with activation tap, backward from the target class
/// logit (pre-softmax), then importance weights and token scores.
pub fn compute_oracle(
    params: &Params,
    cfg: &ModelConfig,
    pixels: &[f32],
    true_label: usize,
    mode: OracleMode,
) -> Result<OracleOutput> {
    let opts = ForwardOptions {
        tap: true,
        ..Default::default()
    };
    let (mut tape, art) = forward_clip(params, cfg, pixels, None, opts, true)?;
    let logits = tape.data(art.logits).to_vec();
    let predicted_class = top_k_indices(&logits, 1)[0];
    let target_class = match mode {
        OracleMode::TrueLabel => true_label,
        OracleMode::Predicted => predicted_class,
    };
    if target_class >= cfg.classes {
        return Err(Error::contract(format!(
            "oracle target class {target_class} out of {} classes",
            cfg.classes
        )));
    }
    let tap = art
        .tap
        .ok_or_else(|| Error::contract("forward did not record tap activations"))?;
    let activations = tape.data(tap).to_vec();
    let y_c = tape.select_element(art.logits, target_class)?;
    tape.backward(y_c)?;
    let grads = tape
        .grad(tap)
        .ok_or_else(|| Error::contract("tap activations received no gradient"))?
        .to_vec();
    let n = cfg.grid().n();
    let d = cfg.embed_dim;
    let omega = importance_weights(&grads, n, d);
    let scores = token_scores(&activations, &omega, mode.provenance());
    Ok(OracleOutput {
        scores,
        target_class,
        predicted_class,
        logits,
    })
}

#[derive(Serialize, Deserialize)]
struct ScoreSidecar {
    id: usize,
    mode: OracleMode,
    n: usize,
    degenerate: bool,
}

fn dump_stem(dir: &Path, mode: OracleMode, split: Split, clip_id: usize) -> PathBuf {
    let mode_dir = match mode {
        OracleMode::TrueLabel => "oracle-true",
        OracleMode::Predicted => "oracle-pred",
    };
    dir.join(mode_dir)
        .join(split.dir_name())
        .join(format!("clip_{clip_id:05}"))
}

/// One dump per clip: raw little-endian f32 scores plus a JSON sidecar.
pub fn dump_scores(
    dir: &Path,
    mode: OracleMode,
    split: Split,
    clip_id: usize,
    scores: &TokenScores,
) -> Result<()> {
    let stem = dump_stem(dir, mode, split, clip_id);
    if let Some(parent) = stem.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut raw = Vec::with_capacity(scores.len() * 4);
    for &v in &scores.values {
        raw.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(stem.with_extension("f32"), raw)?;
    let sidecar = ScoreSidecar {
        id: clip_id,
        mode,
        n: scores.len(),
        degenerate: scores.degenerate,
    };
    fs::write(
        stem.with_extension("json"),
        serde_json::to_vec_pretty(&sidecar)?,
    )?;
    Ok(())
}

pub fn load_scores(
    dir: &Path,
    mode: OracleMode,
    split: Split,
    clip_id: usize,
) -> Result<TokenScores> {
    let stem = dump_stem(dir, mode, split, clip_id);
    let jpath = stem.with_extension("json");
    if !jpath.is_file() {
        return Err(Error::MissingArtifact(jpath));
    }
    let sidecar: ScoreSidecar = serde_json::from_slice(&fs::read(&jpath)?)?;
    let raw = fs::read(stem.with_extension("f32"))?;
    let values: Vec<f64> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    if values.len() != sidecar.n {
        return Err(Error::contract(format!(
            "score dump for clip {clip_id}: {} values, sidecar says {}",
            values.len(),
            sidecar.n
        )));
    }
    Ok(TokenScores {
        values,
        provenance: sidecar.mode.provenance(),
        degenerate: sidecar.degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn importance_weights_mean_over_positions() {
        // N=2, D=2, grads [[1,2],[3,4]] -> omega [2,3]
        let omega = importance_weights(&[1.0, 2.0, 3.0, 4.0], 2, 2);
        assert_eq!(omega, vec![2.0, 3.0]);
        // constant gradient g across positions -> omega = g
        let omega = importance_weights(&[5.0, -1.0, 5.0, -1.0, 5.0, -1.0], 3, 2);
        assert_eq!(omega, vec![5.0, -1.0]);
        // zero gradients -> zero weights
        let omega = importance_weights(&[0.0; 6], 3, 2);
        assert_eq!(omega, vec![0.0, 0.0]);
    }

    #[test]
    fn token_scores_min_max_arithmetic() {
        // raw [2,4,6] -> [0, 0.5, 1]
        let s = min_max_normalize(&[2.0, 4.0, 6.0], Provenance::OracleTrue);
        assert_eq!(s.values, vec![0.0, 0.5, 1.0]);
        assert!(!s.degenerate);
    }

    #[test]
    fn all_negative_combination_is_degenerate_uniform() {
        // every weighted sum below zero -> all raw zero -> uniform 0.5
        let s = token_scores(&[-1.0, -2.0, -3.0], &[1.0], Provenance::OracleTrue);
        assert!(s.degenerate);
        assert!(s.values.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn relu_then_normalize() {
        // D=1, omega=[2], A=[[-1],[0],[3]] -> raw [0,0,6] -> [0,0,1]
        let s = token_scores(&[-1.0, 0.0, 3.0], &[2.0], Provenance::OracleTrue);
        assert_eq!(s.values, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn normalized_scores_hit_exact_bounds() {
        let s = min_max_normalize(&[0.3, 0.9, 0.7], Provenance::Attention);
        let min = s.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = s.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(min, 0.0);
        assert_eq!(max, 1.0);
    }

    #[test]
    fn positive_scale_of_logit_leaves_scores_unchanged() {
        // scaling activations and gradients consistently is removed by
        // min-max
        let acts = vec![0.5, -0.3, 1.2, 0.1, 0.9, -0.7];
        let omega = vec![0.4, -0.2];
        let base = token_scores(&acts, &omega, Provenance::OracleTrue);
        let alpha = 3.7;
        let acts2: Vec<f64> = acts.iter().map(|a| a * alpha).collect();
        let scaled = token_scores(&acts2, &omega, Provenance::OracleTrue);
        for (a, b) in base.values.iter().zip(&scaled.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scores = min_max_normalize(&[0.1, 0.5, 0.9], Provenance::OracleTrue);
        dump_scores(dir.path(), OracleMode::TrueLabel, Split::Test, 12, &scores).unwrap();
        let loaded = load_scores(dir.path(), OracleMode::TrueLabel, Split::Test, 12).unwrap();
        assert_eq!(loaded.len(), 3);
        for (a, b) in loaded.values.iter().zip(&scores.values) {
            assert!((a - b).abs() < 1e-7);
        }
    }
}
