//! Orchestration of the full experiment: each stage reads its inputs from the
//! workspace directory, writes its artifacts back, and fails with a
//! missing-artifact error naming whatever a previous stage should have
//! produced. The CLI is a thin wrapper over these functions.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use serde::Serialize;

use crate::checkpoint::{self, CheckpointKind};
use crate::config::ExperimentConfig;
use crate::data::{downsample_spatial, gen_dataset, load_dataset, save_dataset, Dataset, Split, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::flops::{expected_adaptive_flops, AdaptiveFlops};
use crate::model::{forward_clip, ForwardOptions, ModelConfig, Params};
use crate::oracle::{compute_oracle, dump_scores, load_scores, OracleMode};
use crate::policy::{adaptive_budget, confidence_proxy, top_k_mask};
use crate::report::{report_decay, report_histogram, write_decay, write_histogram};
use crate::selector::{clip_embeddings, selector_score, train_selector, SelectorSample};
use crate::sweep::{run_sweep, SweepInputs, SweepOutcome};
use crate::train::{topk_hit, train_classifier, write_log, Sample};

/// Artifact layout under one output directory.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn backbone_stem(&self) -> PathBuf {
        self.root.join("checkpoints").join("backbone")
    }

    pub fn selector_stem(&self) -> PathBuf {
        self.root.join("checkpoints").join("selector")
    }

    pub fn proxy_stem(&self) -> PathBuf {
        self.root.join("checkpoints").join("proxy")
    }

    pub fn oracle_dir(&self) -> PathBuf {
        self.root.join("oracle")
    }

    pub fn log_path(&self, stage: &str) -> PathBuf {
        self.root.join("logs").join(format!("{stage}.csv"))
    }

    pub fn sweep_csv(&self) -> PathBuf {
        self.root.join("results").join("sweep.csv")
    }

    pub fn sweep_by_class_csv(&self) -> PathBuf {
        self.root.join("results").join("sweep_by_class.csv")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("reports")
    }
}

fn load_backbone(cfg: &ExperimentConfig, ws: &Workspace) -> Result<Params> {
    let (ck_cfg, params) = checkpoint::load(&ws.backbone_stem(), CheckpointKind::Backbone)?;
    let ck_model: ModelConfig = serde_json::from_value(ck_cfg)?;
    if ck_model != cfg.model {
        return Err(Error::config(
            "backbone checkpoint was trained with a different model config",
        ));
    }
    Ok(params)
}

pub fn cmd_gen_data(cfg: &ExperimentConfig, ws: &Workspace) -> Result<Dataset> {
    let ds = gen_dataset(&cfg.dataset, &cfg.model)?;
    save_dataset(&ds, &ws.dataset_dir())?;
    Ok(ds)
}

pub fn cmd_train_backbone(cfg: &ExperimentConfig, ws: &Workspace, seed: u64) -> Result<()> {
    let ds = load_dataset(&ws.dataset_dir())?;
    let train: Vec<Sample> = ds
        .split(Split::Train)
        .iter()
        .map(|c| (c.pixels.as_slice(), c.class))
        .collect();
    let val: Vec<Sample> = ds
        .split(Split::Val)
        .iter()
        .map(|c| (c.pixels.as_slice(), c.class))
        .collect();
    let (params, log) = train_classifier(&cfg.model, &train, &val, &cfg.backbone_train, seed)?;
    write_log(&log, &ws.log_path("backbone"))?;
    checkpoint::save(&ws.backbone_stem(), CheckpointKind::Backbone, &cfg.model, &params)
}

/// Dump oracle scores: true-label mode for every split (the selector trains
/// on them), predicted-label mode for the test split only.
pub fn cmd_compute_oracle(cfg: &ExperimentConfig, ws: &Workspace) -> Result<()> {
    let ds = load_dataset(&ws.dataset_dir())?;
    let backbone = load_backbone(cfg, ws)?;
    let dir = ws.oracle_dir();
    for split in Split::all() {
        for clip in ds.split(split) {
            let out = compute_oracle(&backbone, &cfg.model, &clip.pixels, clip.class, OracleMode::TrueLabel)?;
            dump_scores(&dir, OracleMode::TrueLabel, split, clip.id, &out.scores)?;
            if split == Split::Test {
                let out =
                    compute_oracle(&backbone, &cfg.model, &clip.pixels, clip.class, OracleMode::Predicted)?;
                dump_scores(&dir, OracleMode::Predicted, split, clip.id, &out.scores)?;
            }
        }
    }
    Ok(())
}

pub fn cmd_train_selector(cfg: &ExperimentConfig, ws: &Workspace, seed: u64) -> Result<()> {
    let ds = load_dataset(&ws.dataset_dir())?;
    let backbone = load_backbone(cfg, ws)?;
    let mut samples: Vec<SelectorSample> = Vec::new();
    for clip in ds.split(Split::Train) {
        let targets = load_scores(&ws.oracle_dir(), OracleMode::TrueLabel, Split::Train, clip.id)?;
        let embeddings = clip_embeddings(&backbone, &cfg.model, &clip.pixels)?;
        samples.push((embeddings, targets.values));
    }
    let (params, losses) = train_selector(&cfg.selector, &samples, &cfg.selector_train, seed)?;
    let log_path = ws.log_path("selector");
    if let Some(dir) = log_path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut out = fs::File::create(&log_path)?;
    writeln!(out, "epoch,loss")?;
    for (epoch, loss) in losses.iter().enumerate() {
        writeln!(out, "{epoch},{loss:.6}")?;
    }
    checkpoint::save(&ws.selector_stem(), CheckpointKind::Selector, &cfg.selector, &params)
}

pub fn cmd_train_proxy(cfg: &ExperimentConfig, ws: &Workspace, seed: u64) -> Result<()> {
    let ds = load_dataset(&ws.dataset_dir())?;
    let down = |pixels: &[f32]| {
        downsample_spatial(
            pixels,
            cfg.model.frames,
            cfg.model.height,
            cfg.model.width,
            cfg.proxy.downsample,
        )
    };
    let train_px: Vec<(Vec<f32>, usize)> = ds
        .split(Split::Train)
        .iter()
        .map(|c| (down(&c.pixels), c.class))
        .collect();
    let val_px: Vec<(Vec<f32>, usize)> = ds
        .split(Split::Val)
        .iter()
        .map(|c| (down(&c.pixels), c.class))
        .collect();
    let train: Vec<Sample> = train_px.iter().map(|(p, c)| (p.as_slice(), *c)).collect();
    let val: Vec<Sample> = val_px.iter().map(|(p, c)| (p.as_slice(), *c)).collect();
    let (params, log) = train_classifier(&cfg.proxy.model, &train, &val, &cfg.proxy_train, seed)?;
    write_log(&log, &ws.log_path("proxy"))?;
    checkpoint::save(&ws.proxy_stem(), CheckpointKind::Proxy, &cfg.proxy, &params)
}

pub fn cmd_sweep(cfg: &ExperimentConfig, ws: &Workspace) -> Result<SweepOutcome> {
    let ds = load_dataset(&ws.dataset_dir())?;
    let backbone = load_backbone(cfg, ws)?;
    let selector = if cfg.sweep.policies.iter().any(|p| p == "selector") {
        let (_, p) = checkpoint::load(&ws.selector_stem(), CheckpointKind::Selector)?;
        Some(p)
    } else {
        None
    };
    let inputs = SweepInputs {
        cfg,
        dataset: &ds,
        backbone: &backbone,
        selector: selector.as_ref(),
    };
    run_sweep(&inputs, &ws.sweep_csv(), &ws.sweep_by_class_csv())
}

#[derive(Debug, Clone, Serialize)]
pub struct AdaptiveReport {
    pub flops: AdaptiveFlops,
    pub top1_fixed: f64,
    pub top1_adaptive: f64,
    pub mean_confidence: f64,
}

/// LITE++ on the test split: proxy confidence picks each clip's effective
/// ratio, the selector picks the tokens, and the report compares accuracy and
/// billed flops against the fixed base ratio.
pub fn adaptive_report(cfg: &ExperimentConfig, ws: &Workspace) -> Result<AdaptiveReport> {
    let ds = load_dataset(&ws.dataset_dir())?;
    let backbone = load_backbone(cfg, ws)?;
    let (_, selector) = checkpoint::load(&ws.selector_stem(), CheckpointKind::Selector)?;
    let (_, proxy) = checkpoint::load(&ws.proxy_stem(), CheckpointKind::Proxy)?;
    let base = cfg.adaptive_base_rho;
    let mut rhos = Vec::new();
    let mut conf_sum = 0.0;
    let mut hit_fixed = 0usize;
    let mut hit_adaptive = 0usize;
    let clips = ds.split(Split::Test);
    for clip in &clips {
        let small = downsample_spatial(
            &clip.pixels,
            cfg.model.frames,
            cfg.model.height,
            cfg.model.width,
            cfg.proxy.downsample,
        );
        let c = confidence_proxy(&proxy, &cfg.proxy.model, &small)?;
        conf_sum += c;
        let rho = adaptive_budget(c, base, &cfg.budget)?;
        rhos.push(rho);
        let scores = {
            let emb = clip_embeddings(&backbone, &cfg.model, &clip.pixels)?;
            selector_score(&selector, &cfg.selector, &emb)?
        };
        for (rho, hits) in [(base, &mut hit_fixed), (rho, &mut hit_adaptive)] {
            let mask = top_k_mask(&scores, rho)?;
            let (tape, art) = forward_clip(
                &backbone,
                &cfg.model,
                &clip.pixels,
                Some(&mask),
                ForwardOptions::default(),
                false,
            )?;
            if topk_hit(tape.data(art.logits), clip.class, 1) {
                *hits += 1;
            }
        }
    }
    let flops = expected_adaptive_flops(&cfg.model, &cfg.proxy.model, base, &rhos, true)?;
    let n = clips.len() as f64;
    Ok(AdaptiveReport {
        flops,
        top1_fixed: hit_fixed as f64 / n,
        top1_adaptive: hit_adaptive as f64 / n,
        mean_confidence: conf_sum / n,
    })
}

/// Emit every report: score histogram, per-class decay, adaptive budget.
pub fn cmd_report(cfg: &ExperimentConfig, ws: &Workspace) -> Result<()> {
    let ds = load_dataset(&ws.dataset_dir())?;
    let dir = ws.report_dir();
    fs::create_dir_all(&dir)?;

    // histogram over test-split oracle dumps
    let mut dumped = Vec::new();
    for clip in ds.split(Split::Test) {
        let s = load_scores(&ws.oracle_dir(), OracleMode::TrueLabel, Split::Test, clip.id)?;
        dumped.push((clip.class, s.values));
    }
    let by_clip: Vec<(usize, &[f64])> = dumped.iter().map(|(c, v)| (*c, v.as_slice())).collect();
    let hist = report_histogram(&by_clip, NUM_CLASSES);
    write_histogram(&hist, &dir.join("histogram.json"), &dir.join("histogram.csv"))?;

    // per-class decay from the sweep
    let by_class_path = ws.sweep_by_class_csv();
    if !by_class_path.is_file() {
        return Err(Error::MissingArtifact(by_class_path));
    }
    let class_rows = crate::sweep::read_class_rows(&by_class_path)?;
    let decay_policy = if cfg.sweep.policies.iter().any(|p| p == "selector") {
        "selector"
    } else {
        cfg.sweep.policies[0].as_str()
    };
    let decay = report_decay(&class_rows, decay_policy, cfg.decay_rho)?;
    write_decay(&decay, &dir.join("decay.json"), &dir.join("decay.csv"))?;

    // adaptive budget
    let adaptive = adaptive_report(cfg, ws)?;
    fs::write(dir.join("adaptive.json"), serde_json::to_vec_pretty(&adaptive)?)?;
    Ok(())
}

/// Run every stage in order into one workspace.
pub fn run_full_pipeline(cfg: &ExperimentConfig, ws: &Workspace, seed: u64) -> Result<()> {
    cmd_gen_data(cfg, ws)?;
    cmd_train_backbone(cfg, ws, seed)?;
    cmd_compute_oracle(cfg, ws)?;
    cmd_train_selector(cfg, ws, seed)?;
    cmd_train_proxy(cfg, ws, seed)?;
    cmd_sweep(cfg, ws)?;
    cmd_report(cfg, ws)?;
    Ok(())
}
