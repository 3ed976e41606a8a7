//! Supervised training for the backbone and the confidence proxy: Adam with
//! cosine learning-rate decay and global gradient-norm clipping, cross-entropy
//! loss, fixed-seed initialization. Single-threaded on purpose so identical
//! seeds give bit-identical checkpoints.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    forward, init_backbone, tubify, BoundParams, ForwardOptions, ModelConfig, Params,
    SelectionMask,
};
use crate::tensor::Tape;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainHyperparams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    /// Token-dropout augmentation: each training clip keeps a random subset
    /// of tokens with ratio drawn uniformly from [token_keep_min, 1]. At 1.0
    /// the augmentation is off. Inference under selection masks is the whole
    /// point of the model, so training should see partial token sets too.
    #[serde(default = "default_token_keep_min")]
    pub token_keep_min: f64,
}

fn default_token_keep_min() -> f64 {
    1.0
}

impl Default for TrainHyperparams {
    fn default() -> Self {
        TrainHyperparams {
            epochs: 12,
            batch_size: 8,
            lr: 1e-2,
            clip_norm: 1.0,
            token_keep_min: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LogRow {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub top1: f64,
}

/// Training log as CSV with columns epoch, split, loss, top1.
pub fn write_log(rows: &[LogRow], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = std::fs::File::create(path)?;
    writeln!(out, "epoch,split,loss,top1")?;
    for r in rows {
        writeln!(out, "{},{},{:.6},{:.6}", r.epoch, r.split, r.loss, r.top1)?;
    }
    Ok(())
}

pub(crate) struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl Adam {
    pub(crate) fn new(params: &Params) -> Self {
        Adam {
            m: params.entries().iter().map(|e| vec![0.0; e.data.len()]).collect(),
            v: params.entries().iter().map(|e| vec![0.0; e.data.len()]).collect(),
            t: 0,
        }
    }

    pub(crate) fn step(&mut self, params: &mut Params, grads: &[Vec<f64>], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for (i, e) in params.entries_mut().iter_mut().enumerate() {
            for j in 0..e.data.len() {
                let g = grads[i][j];
                self.m[i][j] = B1 * self.m[i][j] + (1.0 - B1) * g;
                self.v[i][j] = B2 * self.v[i][j] + (1.0 - B2) * g * g;
                let mhat = self.m[i][j] / bc1;
                let vhat = self.v[i][j] / bc2;
                e.data[j] -= lr * mhat / (vhat.sqrt() + EPS);
            }
        }
    }
}

pub(crate) fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

pub(crate) fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) {
    let norm: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
}

/// Deterministic epoch shuffle keyed by (seed, epoch).
pub(crate) fn shuffle_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(epoch as u64).to_le_bytes());
    key[16] = 0x5f; // shuffle domain tag
    let mut rng = ChaCha20Rng::from_seed(key);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Indices of the k highest values, ties broken by lower index first.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

pub fn topk_hit(logits: &[f64], label: usize, k: usize) -> bool {
    top_k_indices(logits, k).contains(&label)
}

/// One labelled training example: raw pixels plus class.
pub type Sample<'a> = (&'a [f32], usize);

/// Uniform random keep-set of ceil(rho * n) tokens for the token-dropout
/// augmentation (partial Fisher-Yates, then sorted).
fn dropout_mask(n: usize, rho: f64, rng: &mut ChaCha20Rng) -> SelectionMask {
    let k = (rho * n as f64).ceil() as usize;
    let mut pool: Vec<usize> = (0..n).collect();
    for j in 0..k {
        let pick = rng.gen_range(j..n);
        pool.swap(j, pick);
    }
    let mut idx: Vec<usize> = pool[..k].to_vec();
    idx.sort_unstable();
    SelectionMask::new(idx, n).expect("dropout mask indices are valid by construction")
}

fn forward_loss(
    params: &Params,
    cfg: &ModelConfig,
    pixels: &[f32],
    label: usize,
    mask: Option<&SelectionMask>,
    with_grads: bool,
) -> Result<(Tape, BoundParams, f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, with_grads);
    let grid = cfg.grid();
    let v = tape.leaf(tubify(pixels, cfg)?, vec![grid.n(), cfg.patch_dim()], false);
    let tokens = crate::model::embed(&mut tape, &bound, cfg, v)?;
    let art = forward(&mut tape, &bound, cfg, tokens, mask, ForwardOptions::default())?;
    let logits = tape.data(art.logits).to_vec();
    let loss = tape.cross_entropy(art.logits, label)?;
    let loss_val = tape.data(loss)[0];
    if with_grads {
        tape.backward(loss)?;
    }
    Ok((tape, bound, loss_val, logits))
}

/// Full-token evaluation over a sample set: (mean loss, top1, top5).
pub fn evaluate(params: &Params, cfg: &ModelConfig, samples: &[Sample]) -> Result<(f64, f64, f64)> {
    let mut loss_sum = 0.0;
    let mut hit1 = 0usize;
    let mut hit5 = 0usize;
    for &(pixels, label) in samples {
        let (_, _, loss, logits) = forward_loss(params, cfg, pixels, label, None, false)?;
        loss_sum += loss;
        if topk_hit(&logits, label, 1) {
            hit1 += 1;
        }
        if topk_hit(&logits, label, 5) {
            hit5 += 1;
        }
    }
    let n = samples.len() as f64;
    Ok((loss_sum / n, hit1 as f64 / n, hit5 as f64 / n))
}

/// Train a classifier (backbone or proxy) from scratch. Deterministic given
/// the seed; zero epochs returns the untouched initialization.
pub fn train_classifier(
    cfg: &ModelConfig,
    train: &[Sample],
    val: &[Sample],
    hp: &TrainHyperparams,
    seed: u64,
) -> Result<(Params, Vec<LogRow>)> {
    cfg.validate()?;
    if let Some(&(_, bad)) = train.iter().find(|(_, l)| *l >= cfg.classes) {
        return Err(Error::contract(format!(
            "label {bad} out of range for {} classes",
            cfg.classes
        )));
    }
    if !(hp.token_keep_min > 0.0 && hp.token_keep_min <= 1.0) {
        return Err(Error::config(format!(
            "token_keep_min {} must be in (0, 1]",
            hp.token_keep_min
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut params = init_backbone(cfg, &mut rng);
    // dedicated stream so the augmentation draws never shift init or shuffle
    let mut mask_rng = ChaCha20Rng::seed_from_u64(seed ^ 0x746f_6b65_6e5f_6472);
    let n_tokens = cfg.grid().n();
    let mut log = Vec::new();
    let batches_per_epoch = train.len().div_ceil(hp.batch_size);
    let total_steps = hp.epochs * batches_per_epoch;
    let mut adam = Adam::new(&params);
    let mut step = 0usize;
    let name_order: Vec<String> = params.entries().iter().map(|e| e.name.clone()).collect();
    let name_to_slot: HashMap<&str, usize> = name_order
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();

    for epoch in 0..hp.epochs {
        let order = shuffle_order(train.len(), seed, epoch);
        let mut epoch_loss = 0.0;
        let mut epoch_hits = 0usize;
        for chunk in order.chunks(hp.batch_size) {
            let mut grads: Vec<Vec<f64>> = params
                .entries()
                .iter()
                .map(|e| vec![0.0; e.data.len()])
                .collect();
            for &i in chunk {
                let (pixels, label) = train[i];
                let mask = if hp.token_keep_min < 1.0 {
                    let rho = mask_rng.gen_range(hp.token_keep_min..=1.0);
                    Some(dropout_mask(n_tokens, rho, &mut mask_rng))
                } else {
                    None
                };
                let (tape, bound, loss_val, logits) =
                    forward_loss(&params, cfg, pixels, label, mask.as_ref(), true)?;
                if !loss_val.is_finite() {
                    return Err(Error::Diverged(format!(
                        "loss {loss_val} at epoch {epoch}, step {step}"
                    )));
                }
                epoch_loss += loss_val;
                if topk_hit(&logits, label, 1) {
                    epoch_hits += 1;
                }
                for (name, &id) in bound.iter() {
                    if let Some(g) = tape.grad(id) {
                        let slot = name_to_slot[name.as_str()];
                        for (acc, gv) in grads[slot].iter_mut().zip(g) {
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
            let lr = cosine_lr(hp.lr, step, total_steps);
            adam.step(&mut params, &grads, lr);
            step += 1;
        }
        log.push(LogRow {
            epoch,
            split: "train",
            loss: epoch_loss / train.len() as f64,
            top1: epoch_hits as f64 / train.len() as f64,
        });
        if !val.is_empty() {
            let (vl, v1, _) = evaluate(&params, cfg, val)?;
            log.push(LogRow {
                epoch,
                split: "val",
                loss: vl,
                top1: v1,
            });
        }
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_dataset, DatasetSpec};
    use crate::model::ModelConfig;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            frames: 4,
            height: 16,
            width: 16,
            tube_t: 2,
            tube_h: 8,
            tube_w: 8,
            embed_dim: 16,
            heads: 2,
            blocks: 2,
            classes: 8,
            mlp_ratio: 2,
            ..ModelConfig::desk()
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = tiny_cfg();
        let pixels = vec![0.5f32; cfg.frames * cfg.height * cfg.width * 3];
        let train = vec![(pixels.as_slice(), 0usize)];
        let hp = TrainHyperparams {
            epochs: 0,
            ..TrainHyperparams::default()
        };
        let (params, log) = train_classifier(&cfg, &train, &[], &hp, 42).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let init = init_backbone(&cfg, &mut rng);
        assert!(log.is_empty());
        for (a, b) in params.entries().iter().zip(init.entries()) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn fixed_seed_gives_bit_identical_weights() {
        let cfg = tiny_cfg();
        let spec = DatasetSpec {
            clips_per_class: 1,
            frames: cfg.frames,
            height: cfg.height,
            width: cfg.width,
            glyph_size: 5.0,
            ..DatasetSpec::desk()
        };
        let ds = gen_dataset(&spec, &cfg).unwrap();
        let train: Vec<Sample> = ds
            .clips
            .iter()
            .map(|c| (c.pixels.as_slice(), c.class))
            .collect();
        let hp = TrainHyperparams {
            epochs: 2,
            ..TrainHyperparams::default()
        };
        let (a, _) = train_classifier(&cfg, &train, &[], &hp, 9).unwrap();
        let (b, _) = train_classifier(&cfg, &train, &[], &hp, 9).unwrap();
        for (ea, eb) in a.entries().iter().zip(b.entries()) {
            assert_eq!(ea.data, eb.data, "{}", ea.name);
        }
    }

    #[test]
    fn overfits_eight_clips() {
        let cfg = tiny_cfg();
        let spec = DatasetSpec {
            clips_per_class: 1,
            frames: cfg.frames,
            height: cfg.height,
            width: cfg.width,
            glyph_size: 5.0,
            noise_level: 0.05,
            ..DatasetSpec::desk()
        };
        let ds = gen_dataset(&spec, &cfg).unwrap();
        let train: Vec<Sample> = ds
            .clips
            .iter()
            .map(|c| (c.pixels.as_slice(), c.class))
            .collect();
        let hp = TrainHyperparams {
            epochs: 120,
            batch_size: 8,
            lr: 3e-3,
            ..TrainHyperparams::default()
        };
        let (params, _) = train_classifier(&cfg, &train, &[], &hp, 3).unwrap();
        let (_, top1, _) = evaluate(&params, &cfg, &train).unwrap();
        assert_eq!(top1, 1.0, "failed to overfit 8 clips");
    }

    #[test]
    fn token_dropout_training_is_deterministic_and_finite() {
        let cfg = tiny_cfg();
        let spec = DatasetSpec {
            clips_per_class: 1,
            frames: cfg.frames,
            height: cfg.height,
            width: cfg.width,
            glyph_size: 5.0,
            ..DatasetSpec::desk()
        };
        let ds = gen_dataset(&spec, &cfg).unwrap();
        let train: Vec<Sample> = ds
            .clips
            .iter()
            .map(|c| (c.pixels.as_slice(), c.class))
            .collect();
        let hp = TrainHyperparams {
            epochs: 2,
            token_keep_min: 0.4,
            ..TrainHyperparams::default()
        };
        let (a, log) = train_classifier(&cfg, &train, &[], &hp, 5).unwrap();
        let (b, _) = train_classifier(&cfg, &train, &[], &hp, 5).unwrap();
        for (ea, eb) in a.entries().iter().zip(b.entries()) {
            assert_eq!(ea.data, eb.data, "{}", ea.name);
        }
        assert!(log.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn bad_token_keep_min_is_a_config_error() {
        let cfg = tiny_cfg();
        let pixels = vec![0.5f32; cfg.frames * cfg.height * cfg.width * 3];
        let train = vec![(pixels.as_slice(), 0usize)];
        let hp = TrainHyperparams {
            token_keep_min: 0.0,
            ..TrainHyperparams::default()
        };
        assert!(train_classifier(&cfg, &train, &[], &hp, 0).is_err());
    }

    #[test]
    fn dropout_mask_has_exact_size_and_order() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for n in [1usize, 7, 64] {
            for rho in [0.1, 0.5, 1.0] {
                let m = dropout_mask(n, rho, &mut rng);
                assert_eq!(m.len(), (rho * n as f64).ceil() as usize);
                assert!(m.indices().windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    #[test]
    fn top_k_ties_break_to_lower_index() {
        let idx = top_k_indices(&[0.9, 0.1, 0.5, 0.5], 2);
        assert_eq!(idx, vec![0, 2]);
    }
}
