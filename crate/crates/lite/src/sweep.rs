//! The (policy, p_ratio, seed) evaluation sweep over the test split, emitting
//! one CSV row per cell. Resumable: cells already present in the CSV are kept
//! as-is and only missing cells are computed. All policies see identical
//! clips and identical backbone weights.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::config::{ExperimentConfig, POLICY_NAMES};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::flops::model_flops;
use crate::model::{forward_clip, ForwardOptions, Params};
use crate::oracle::{compute_oracle, OracleMode};
use crate::policy::{attention_scores, motion_scores, random_mask, top_k_mask};
use crate::selector::{clip_embeddings, selector_score, SelectorConfig};
use crate::train::topk_hit;

pub const SWEEP_HEADER: &str = "policy,p_ratio,seed,top1,top5,gflops,n_clips";
pub const BY_CLASS_HEADER: &str = "policy,p_ratio,seed,class,top1,n_clips";

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub policy: String,
    pub p_ratio: f64,
    pub seed: u64,
    pub top1: f64,
    pub top5: f64,
    pub gflops: f64,
    pub n_clips: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRow {
    pub policy: String,
    pub p_ratio: f64,
    pub seed: u64,
    pub class: usize,
    pub top1: f64,
    pub n_clips: usize,
}

/// Stable cell key; ratios are keyed by their canonical 6-decimal rendering.
fn cell_key(policy: &str, p_ratio: f64, seed: u64) -> (String, String, u64) {
    (policy.to_string(), format!("{p_ratio:.6}"), seed)
}

fn policy_order(policy: &str) -> usize {
    POLICY_NAMES.iter().position(|p| *p == policy).unwrap_or(POLICY_NAMES.len())
}

fn sort_rows(rows: &mut [SweepRow]) {
    rows.sort_by(|a, b| {
        policy_order(&a.policy)
            .cmp(&policy_order(&b.policy))
            .then(a.p_ratio.partial_cmp(&b.p_ratio).unwrap())
            .then(a.seed.cmp(&b.seed))
    });
}

fn sort_class_rows(rows: &mut [ClassRow]) {
    rows.sort_by(|a, b| {
        policy_order(&a.policy)
            .cmp(&policy_order(&b.policy))
            .then(a.p_ratio.partial_cmp(&b.p_ratio).unwrap())
            .then(a.seed.cmp(&b.seed))
            .then(a.class.cmp(&b.class))
    });
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut out = fs::File::create(path)?;
    writeln!(out, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{:.6},{},{:.6},{:.6},{:.6},{}",
            r.policy, r.p_ratio, r.seed, r.top1, r.top5, r.gflops, r.n_clips
        )?;
    }
    Ok(())
}

fn write_class_csv(rows: &[ClassRow], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut out = fs::File::create(path)?;
    writeln!(out, "{BY_CLASS_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{:.6},{},{},{:.6},{}",
            r.policy, r.p_ratio, r.seed, r.class, r.top1, r.n_clips
        )?;
    }
    Ok(())
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    if !path.is_file() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    parse_sweep_csv(&text)
}

fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::contract(format!(
                "sweep csv line {}: expected 7 fields, got {}",
                i + 1,
                f.len()
            )));
        }
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::contract(format!("sweep csv line {}: bad {what} {s:?}", i + 1)))
        };
        rows.push(SweepRow {
            policy: f[0].to_string(),
            p_ratio: parse_f(f[1], "p_ratio")?,
            seed: f[2]
                .parse()
                .map_err(|_| Error::contract(format!("sweep csv line {}: bad seed", i + 1)))?,
            top1: parse_f(f[3], "top1")?,
            top5: parse_f(f[4], "top5")?,
            gflops: parse_f(f[5], "gflops")?,
            n_clips: f[6]
                .parse()
                .map_err(|_| Error::contract(format!("sweep csv line {}: bad n_clips", i + 1)))?,
        });
    }
    Ok(rows)
}

pub fn read_class_rows(path: &Path) -> Result<Vec<ClassRow>> {
    if !path.is_file() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(Error::contract(format!(
                "by-class csv line {}: expected 6 fields",
                i + 1
            )));
        }
        let bad = |what: &str| Error::contract(format!("by-class csv line {}: bad {what}", i + 1));
        rows.push(ClassRow {
            policy: f[0].to_string(),
            p_ratio: f[1].parse().map_err(|_| bad("p_ratio"))?,
            seed: f[2].parse().map_err(|_| bad("seed"))?,
            class: f[3].parse().map_err(|_| bad("class"))?,
            top1: f[4].parse().map_err(|_| bad("top1"))?,
            n_clips: f[5].parse().map_err(|_| bad("n_clips"))?,
        });
    }
    Ok(rows)
}

/// Everything a sweep needs, already loaded and frozen.
pub struct SweepInputs<'a> {
    pub cfg: &'a ExperimentConfig,
    pub dataset: &'a Dataset,
    pub backbone: &'a Params,
    /// Required only when the policy list includes "selector".
    pub selector: Option<&'a Params>,
}

/// Per-clip score vectors, computed once per (clip, policy) and shared across
/// every (p_ratio, seed) cell.
struct ScoreCache {
    scores: HashMap<(usize, &'static str), Vec<f64>>,
}

impl ScoreCache {
    fn new() -> Self {
        ScoreCache {
            scores: HashMap::new(),
        }
    }

    fn get(
        &mut self,
        inputs: &SweepInputs,
        clip_pos: usize,
        policy: &str,
    ) -> Result<&Vec<f64>> {
        let tag: &'static str = POLICY_NAMES
            .iter()
            .find(|p| **p == policy)
            .copied()
            .ok_or_else(|| Error::config(format!("unknown policy {policy:?}")))?;
        if !self.scores.contains_key(&(clip_pos, tag)) {
            let clip = inputs.dataset.split(Split::Test)[clip_pos];
            let model = &inputs.cfg.model;
            let values = match tag {
                "oracle-true" => {
                    compute_oracle(inputs.backbone, model, &clip.pixels, clip.class, OracleMode::TrueLabel)?
                        .scores
                        .values
                }
                "oracle-pred" => {
                    compute_oracle(inputs.backbone, model, &clip.pixels, clip.class, OracleMode::Predicted)?
                        .scores
                        .values
                }
                "selector" => {
                    let sel = inputs
                        .selector
                        .ok_or_else(|| Error::contract("sweep: selector policy without selector weights"))?;
                    let cfg = SelectorConfig::for_model(model);
                    let emb = clip_embeddings(inputs.backbone, model, &clip.pixels)?;
                    selector_score(sel, &cfg, &emb)?.values
                }
                "attention" => attention_scores(inputs.backbone, model, &clip.pixels)?.values,
                "motion" => motion_scores(&clip.pixels, model)?.values,
                _ => Vec::new(), // random: masks come straight from the RNG
            };
            self.scores.insert((clip_pos, tag), values);
        }
        Ok(&self.scores[&(clip_pos, tag)])
    }
}

struct CellResult {
    top1: f64,
    top5: f64,
    per_class: Vec<(usize, f64, usize)>,
}

fn evaluate_cell(
    inputs: &SweepInputs,
    cache: &mut ScoreCache,
    policy: &str,
    rho: f64,
    seed: u64,
) -> Result<CellResult> {
    let model = &inputs.cfg.model;
    let n = model.grid().n();
    let clips = inputs.dataset.split(Split::Test);
    let mut hit1 = 0usize;
    let mut hit5 = 0usize;
    let mut class_hits: HashMap<usize, (usize, usize)> = HashMap::new();
    for (pos, clip) in clips.iter().enumerate() {
        let mask = if policy == "random" {
            random_mask(n, rho, seed, clip.id)?
        } else {
            let values = cache.get(inputs, pos, policy)?.clone();
            let scores = crate::oracle::TokenScores {
                values,
                provenance: crate::oracle::Provenance::Random,
                degenerate: false,
            };
            top_k_mask(&scores, rho)?
        };
        let (tape, art) = forward_clip(
            inputs.backbone,
            model,
            &clip.pixels,
            Some(&mask),
            ForwardOptions::default(),
            false,
        )?;
        let logits = tape.data(art.logits);
        let entry = class_hits.entry(clip.class).or_insert((0, 0));
        entry.1 += 1;
        if topk_hit(logits, clip.class, 1) {
            hit1 += 1;
            entry.0 += 1;
        }
        if topk_hit(logits, clip.class, 5) {
            hit5 += 1;
        }
    }
    let total = clips.len() as f64;
    let mut per_class: Vec<(usize, f64, usize)> = class_hits
        .into_iter()
        .map(|(c, (h, n))| (c, h as f64 / n as f64, n))
        .collect();
    per_class.sort_by_key(|&(c, _, _)| c);
    Ok(CellResult {
        top1: hit1 as f64 / total,
        top5: hit5 as f64 / total,
        per_class,
    })
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub class_rows: Vec<ClassRow>,
    pub recomputed: usize,
    pub reused: usize,
}

/// Run (or resume) the sweep and rewrite both CSVs in canonical order.
/// Deterministic score policies are evaluated once per (policy, p_ratio) and
/// replicated across seeds; only the random baseline depends on the seed.
pub fn run_sweep(inputs: &SweepInputs, csv_path: &Path, by_class_path: &Path) -> Result<SweepOutcome> {
    let sweep = &inputs.cfg.sweep;
    sweep.validate()?;
    if sweep.policies.iter().any(|p| p == "selector") && inputs.selector.is_none() {
        return Err(Error::contract(
            "sweep: policy list includes selector but no selector weights were given",
        ));
    }
    let existing: HashMap<_, SweepRow> = if csv_path.is_file() {
        read_sweep_csv(csv_path)?
            .into_iter()
            .map(|r| (cell_key(&r.policy, r.p_ratio, r.seed), r))
            .collect()
    } else {
        HashMap::new()
    };
    let existing_class: HashMap<(String, String, u64), Vec<ClassRow>> = {
        let mut m: HashMap<(String, String, u64), Vec<ClassRow>> = HashMap::new();
        for r in read_class_rows(by_class_path)? {
            m.entry(cell_key(&r.policy, r.p_ratio, r.seed))
                .or_default()
                .push(r);
        }
        m
    };

    let mut cache = ScoreCache::new();
    // evaluations shared across seeds for seed-independent policies
    let mut shared: HashMap<(String, String), (f64, f64, Vec<(usize, f64, usize)>)> = HashMap::new();
    let mut rows = Vec::new();
    let mut class_rows = Vec::new();
    let mut recomputed = 0;
    let mut reused = 0;
    for policy in &sweep.policies {
        for &rho in &sweep.p_ratios {
            let gflops = model_flops(&inputs.cfg.model, rho, policy == "selector", None)?.gflops();
            for &seed in &sweep.seeds {
                let key = cell_key(policy, rho, seed);
                if let Some(row) = existing.get(&key) {
                    if let Some(crows) = existing_class.get(&key) {
                        rows.push(row.clone());
                        class_rows.extend(crows.iter().cloned());
                        reused += 1;
                        continue;
                    }
                }
                let shared_key = (policy.clone(), format!("{rho:.6}"));
                let cell = if policy != "random" && shared.contains_key(&shared_key) {
                    let (t1, t5, pc) = shared[&shared_key].clone();
                    CellResult {
                        top1: t1,
                        top5: t5,
                        per_class: pc,
                    }
                } else {
                    let cell = evaluate_cell(inputs, &mut cache, policy, rho, seed)?;
                    if policy != "random" {
                        shared.insert(
                            shared_key,
                            (cell.top1, cell.top5, cell.per_class.clone()),
                        );
                    }
                    cell
                };
                recomputed += 1;
                let n_clips = inputs.dataset.split(Split::Test).len();
                rows.push(SweepRow {
                    policy: policy.clone(),
                    p_ratio: rho,
                    seed,
                    top1: cell.top1,
                    top5: cell.top5,
                    gflops,
                    n_clips,
                });
                for &(class, top1, n) in &cell.per_class {
                    class_rows.push(ClassRow {
                        policy: policy.clone(),
                        p_ratio: rho,
                        seed,
                        class,
                        top1,
                        n_clips: n,
                    });
                }
            }
        }
    }
    sort_rows(&mut rows);
    sort_class_rows(&mut class_rows);
    write_sweep_csv(&rows, csv_path)?;
    write_class_csv(&class_rows, by_class_path)?;
    Ok(SweepOutcome {
        rows,
        class_rows,
        recomputed,
        reused,
    })
}
