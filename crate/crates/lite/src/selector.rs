//! The lightweight token selector: a three-layer fully connected network with
//! a sigmoid output, applied to each token embedding independently. Trained
//! with binary cross-entropy against the oracle's token scores, with the
//! backbone patch embedding frozen.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{embed, tubify, BoundParams, ModelConfig, Params};
use crate::oracle::{Provenance, TokenScores};
use crate::tensor::{Tape, TensorId};
use crate::train::{clip_global_norm, cosine_lr, shuffle_order, Adam, TrainHyperparams};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SelectorConfig {
    pub embed_dim: usize,
    pub hidden1: usize,
    pub hidden2: usize,
}

impl SelectorConfig {
    /// Hidden widths default to half the embedding dimension.
    pub fn for_model(model: &ModelConfig) -> Self {
        SelectorConfig {
            embed_dim: model.embed_dim,
            hidden1: model.embed_dim / 2,
            hidden2: model.embed_dim / 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden1 == 0 || self.hidden2 == 0 {
            return Err(Error::config("selector: all widths must be positive"));
        }
        Ok(())
    }
}

pub fn init_selector(cfg: &SelectorConfig, seed: u64) -> Params {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let sigma = 0.02;
    let mut trunc = |n: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * sigma;
            if z.abs() <= 2.0 * sigma {
                out.push(z);
            }
        }
        out
    };
    let (d, h1, h2) = (cfg.embed_dim, cfg.hidden1, cfg.hidden2);
    let mut p = Params::new();
    p.insert("fc1.w", vec![d, h1], trunc(d * h1));
    p.insert("fc1.b", vec![h1], vec![0.0; h1]);
    p.insert("fc2.w", vec![h1, h2], trunc(h1 * h2));
    p.insert("fc2.b", vec![h2], vec![0.0; h2]);
    p.insert("fc3.w", vec![h2, 1], trunc(h2));
    p.insert("fc3.b", vec![1], vec![0.0]);
    p
}

/// Pre-sigmoid selector outputs, shape (N, 1). Strictly per-token: every row
/// passes through the same small MLP with no cross-token interaction.
fn selector_logits(tape: &mut Tape, bound: &BoundParams, embeddings: TensorId) -> Result<TensorId> {
    let a0 = tape.matmul(embeddings, bound.id("fc1.w"))?;
    let a = tape.add_row_bias(a0, bound.id("fc1.b"))?;
    let g1 = tape.gelu(a);
    let b0 = tape.matmul(g1, bound.id("fc2.w"))?;
    let b = tape.add_row_bias(b0, bound.id("fc2.b"))?;
    let g2 = tape.gelu(b);
    let c0 = tape.matmul(g2, bound.id("fc3.w"))?;
    tape.add_row_bias(c0, bound.id("fc3.b"))
}

/// Score a sequence of token embeddings (N x D, row-major).
pub fn selector_score(
    selector: &Params,
    cfg: &SelectorConfig,
    embeddings: &[f64],
) -> Result<TokenScores> {
    if embeddings.len() % cfg.embed_dim != 0 {
        return Err(Error::Shape {
            op: "selector_score",
            lhs: vec![embeddings.len()],
            rhs: vec![cfg.embed_dim],
        });
    }
    let n = embeddings.len() / cfg.embed_dim;
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, selector, false);
    let e = tape.leaf(embeddings.to_vec(), vec![n, cfg.embed_dim], false);
    let logits = selector_logits(&mut tape, &bound, e)?;
    let s = tape.sigmoid(logits);
    Ok(TokenScores {
        values: tape.data(s).to_vec(),
        provenance: Provenance::Selector,
        degenerate: false,
    })
}

/// Frozen patch-embedding output for a clip (the full embedding including
/// positional terms), flattened N x D.
pub fn clip_embeddings(backbone: &Params, cfg: &ModelConfig, pixels: &[f32]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, backbone, false);
    let grid = cfg.grid();
    let v = tape.leaf(tubify(pixels, cfg)?, vec![grid.n(), cfg.patch_dim()], false);
    let z = embed(&mut tape, &bound, cfg, v)?;
    Ok(tape.data(z).to_vec())
}

/// One selector training example: embeddings (N x D) and oracle targets (N).
pub type SelectorSample = (Vec<f64>, Vec<f64>);

/// Train the selector against oracle targets with mean per-token BCE.
pub fn train_selector(
    cfg: &SelectorConfig,
    samples: &[SelectorSample],
    hp: &TrainHyperparams,
    seed: u64,
) -> Result<(Params, Vec<f64>)> {
    cfg.validate()?;
    for (e, t) in samples {
        if e.len() != t.len() * cfg.embed_dim {
            return Err(Error::contract(
                "selector sample: embeddings and targets disagree on token count",
            ));
        }
        if t.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract("selector targets must lie in [0, 1]"));
        }
    }
    let mut params = init_selector(cfg, seed);
    let mut adam = Adam::new(&params);
    let batches_per_epoch = samples.len().div_ceil(hp.batch_size);
    let total_steps = hp.epochs * batches_per_epoch;
    let mut step = 0;
    let mut epoch_losses = Vec::with_capacity(hp.epochs);
    let slot: std::collections::HashMap<String, usize> = params
        .entries()
        .iter()
        .enumerate()
        .map(|(i, e)| (e.name.clone(), i))
        .collect();
    for epoch in 0..hp.epochs {
        let order = shuffle_order(samples.len(), seed, epoch);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(hp.batch_size) {
            let mut grads: Vec<Vec<f64>> = params
                .entries()
                .iter()
                .map(|e| vec![0.0; e.data.len()])
                .collect();
            for &i in chunk {
                let (embeddings, targets) = &samples[i];
                let n = targets.len();
                let mut tape = Tape::new();
                let bound = BoundParams::bind(&mut tape, &params, true);
                let e = tape.leaf(embeddings.clone(), vec![n, cfg.embed_dim], false);
                let logits = selector_logits(&mut tape, &bound, e)?;
                let loss = tape.bce_with_logits_mean(logits, targets)?;
                let loss_val = tape.data(loss)[0];
                if !loss_val.is_finite() {
                    return Err(Error::Diverged(format!(
                        "selector loss {loss_val} at epoch {epoch}"
                    )));
                }
                epoch_loss += loss_val;
                tape.backward(loss)?;
                for (name, &id) in bound.iter() {
                    if let Some(g) = tape.grad(id) {
                        let s = slot[name.as_str()];
                        for (acc, gv) in grads[s].iter_mut().zip(g) {
                            *acc += gv;
                        }
                    }
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            for g in grads.iter_mut() {
                for v in g.iter_mut() {
                    *v *= inv;
                }
            }
            clip_global_norm(&mut grads, hp.clip_norm);
            adam.step(&mut params, &grads, cosine_lr(hp.lr, step, total_steps));
            step += 1;
        }
        epoch_losses.push(epoch_loss / samples.len() as f64);
    }
    Ok((params, epoch_losses))
}

/// Mean per-token BCE of the selector on a sample set (for held-out checks).
pub fn selector_bce(cfg: &SelectorConfig, params: &Params, samples: &[SelectorSample]) -> Result<f64> {
    let mut total = 0.0;
    for (embeddings, targets) in samples {
        let n = targets.len();
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, params, false);
        let e = tape.leaf(embeddings.clone(), vec![n, cfg.embed_dim], false);
        let logits = selector_logits(&mut tape, &bound, e)?;
        let loss = tape.bce_with_logits_mean(logits, targets)?;
        total += tape.data(loss)[0];
    }
    Ok(total / samples.len() as f64)
}

/// Exact multiply-add count of the selector per clip, reported with the
/// 1 multiply-add = 2 flops convention: 2 N (D h1 + h1 h2 + h2).
pub fn selector_flops(cfg: &SelectorConfig, n_tokens: usize) -> u128 {
    2 * n_tokens as u128
        * (cfg.embed_dim as u128 * cfg.hidden1 as u128
            + cfg.hidden1 as u128 * cfg.hidden2 as u128
            + cfg.hidden2 as u128)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SelectorConfig {
        SelectorConfig {
            embed_dim: 8,
            hidden1: 4,
            hidden2: 4,
        }
    }

    #[test]
    fn zero_weights_give_half_everywhere() {
        let cfg = small_cfg();
        let mut params = init_selector(&cfg, 0);
        for e in params.entries_mut() {
            e.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let embeddings = vec![0.3; 5 * cfg.embed_dim];
        let s = selector_score(&params, &cfg, &embeddings).unwrap();
        assert!(s.values.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn per_token_independence() {
        let cfg = small_cfg();
        let params = init_selector(&cfg, 1);
        let mut embeddings: Vec<f64> = (0..4 * cfg.embed_dim).map(|i| (i as f64).sin()).collect();
        let base = selector_score(&params, &cfg, &embeddings).unwrap();
        // replace token 2's embedding; all other scores must be unchanged
        for j in 0..cfg.embed_dim {
            embeddings[2 * cfg.embed_dim + j] = 9.0 + j as f64;
        }
        let changed = selector_score(&params, &cfg, &embeddings).unwrap();
        for i in [0usize, 1, 3] {
            assert_eq!(base.values[i], changed.values[i]);
        }
        assert_ne!(base.values[2], changed.values[2]);
    }

    #[test]
    fn outputs_in_open_unit_interval() {
        let cfg = small_cfg();
        let params = init_selector(&cfg, 2);
        let embeddings: Vec<f64> = (0..16 * cfg.embed_dim).map(|i| (i as f64 * 0.7).cos()).collect();
        let s = selector_score(&params, &cfg, &embeddings).unwrap();
        assert!(s.values.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn constant_half_targets_converge_to_half_output() {
        let cfg = small_cfg();
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(5);
        let samples: Vec<SelectorSample> = (0..16)
            .map(|_| {
                let e: Vec<f64> = (0..6 * cfg.embed_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                (e, vec![0.5; 6])
            })
            .collect();
        let hp = TrainHyperparams {
            epochs: 40,
            batch_size: 4,
            ..TrainHyperparams::default()
        };
        let (params, _) = train_selector(&cfg, &samples, &hp, 6).unwrap();
        let mut mean = 0.0;
        let mut count = 0;
        for (e, t) in &samples {
            let s = selector_score(&params, &cfg, e).unwrap();
            mean += s.values.iter().sum::<f64>();
            count += t.len();
        }
        mean /= count as f64;
        assert!((0.45..=0.55).contains(&mean), "mean output {mean}");
    }

    #[test]
    fn recovers_planted_linear_target_bce() {
        // targets generated by sigmoid(w^T p): the trained selector should
        // come within 5% of the planted model's BCE
        let cfg = small_cfg();
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(7);
        let w: Vec<f64> = (0..cfg.embed_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let make = |rng: &mut rand_chacha::ChaCha20Rng| -> SelectorSample {
            let n = 8;
            let e: Vec<f64> = (0..n * cfg.embed_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let t: Vec<f64> = e
                .chunks(cfg.embed_dim)
                .map(|row| {
                    let z: f64 = row.iter().zip(&w).map(|(a, b)| a * b).sum();
                    1.0 / (1.0 + (-z).exp())
                })
                .collect();
            (e, t)
        };
        let samples: Vec<SelectorSample> = (0..64).map(|_| make(&mut rng)).collect();
        // planted model's own BCE (entropy of the soft targets)
        let planted_bce: f64 = samples
            .iter()
            .flat_map(|(_, t)| t.iter())
            .map(|&p| -(p * p.ln() + (1.0 - p) * (1.0 - p).ln()))
            .sum::<f64>()
            / samples.iter().map(|(_, t)| t.len()).sum::<usize>() as f64;
        let hp = TrainHyperparams {
            epochs: 150,
            batch_size: 8,
            lr: 3e-3,
            ..TrainHyperparams::default()
        };
        let (params, _) = train_selector(&cfg, &samples, &hp, 8).unwrap();
        let bce = selector_bce(&cfg, &params, &samples).unwrap();
        assert!(
            bce <= planted_bce * 1.05,
            "trained BCE {bce} vs planted {planted_bce}"
        );
    }

    #[test]
    fn selector_gradcheck() {
        use crate::numdiff::{finite_diff, max_rel_error};
        let cfg = small_cfg();
        let params = init_selector(&cfg, 9);
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(10);
        let n = 3;
        let embeddings: Vec<f64> = (0..n * cfg.embed_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let targets: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        // flatten all selector params into one vector for finite differences
        let flat: Vec<f64> = params.entries().iter().flat_map(|e| e.data.clone()).collect();
        let unflatten = |v: &[f64]| -> Params {
            let mut p = params.clone();
            let mut k = 0;
            for e in p.entries_mut() {
                let len = e.data.len();
                e.data.copy_from_slice(&v[k..k + len]);
                k += len;
            }
            p
        };
        let loss_of = |v: &[f64]| -> f64 {
            let p = unflatten(v);
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &p, false);
            let e = tape.leaf(embeddings.clone(), vec![n, cfg.embed_dim], false);
            let logits = selector_logits(&mut tape, &bound, e).unwrap();
            let loss = tape.bce_with_logits_mean(logits, &targets).unwrap();
            tape.data(loss)[0]
        };
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &params, true);
        let e = tape.leaf(embeddings.clone(), vec![n, cfg.embed_dim], false);
        let logits = selector_logits(&mut tape, &bound, e).unwrap();
        let loss = tape.bce_with_logits_mean(logits, &targets).unwrap();
        tape.backward(loss).unwrap();
        let mut analytic = Vec::new();
        for entry in params.entries() {
            analytic.extend_from_slice(tape.grad(bound.id(&entry.name)).unwrap());
        }
        let numeric = finite_diff(&flat, 1e-5, loss_of);
        assert!(max_rel_error(&analytic, &numeric) < 1e-4);
    }

    #[test]
    fn flops_formula() {
        // D=768, h1=h2=384, N=1568 -> 2 N (D h1 + h1 h2 + h2)
        let cfg = SelectorConfig {
            embed_dim: 768,
            hidden1: 384,
            hidden2: 384,
        };
        let expect = 2u128 * 1568 * (768 * 384 + 384 * 384 + 384);
        assert_eq!(selector_flops(&cfg, 1568), expect);
        // N=1 is the per-token cost exactly
        assert_eq!(selector_flops(&cfg, 1), expect / 1568);
    }
}
