use lite::checkpoint::{self, CheckpointKind};
use lite::config::ExperimentConfig;
use lite::data::{load_dataset, Split};
use lite::model::{forward_clip, ForwardOptions, TapConfig};
use lite::oracle::{compute_oracle, OracleMode};
use lite::policy::{random_mask, top_k_mask};
use lite::report::{gini, top_share};
use lite::train::topk_hit;

fn main() {
    let wd = std::env::var("PROBE_DIR").unwrap_or_else(|_| "/tmp/pilot3".into());
    let wd = std::path::Path::new(&wd);
    let ds = load_dataset(&wd.join("dataset")).unwrap();
    let (_, backbone) = checkpoint::load(&wd.join("checkpoints/backbone"), CheckpointKind::Backbone).unwrap();
    let clips = ds.split(Split::Test);
    let base = ExperimentConfig::default();

    // masked-robust accuracy reference: random masks
    {
        let mut hit = 0;
        for clip in clips.iter() {
            let (tape, art) = forward_clip(&backbone, &base.model, &clip.pixels, None, ForwardOptions::default(), false).unwrap();
            if topk_hit(tape.data(art.logits), clip.class, 1) { hit += 1; }
        }
        println!("full: {:.3}", hit as f64 / clips.len() as f64);
    }
    for rho in [0.3, 0.5] {
        let mut hit = 0;
        for (i, clip) in clips.iter().enumerate() {
            let mask = random_mask(base.model.grid().n(), rho, 0, i).unwrap();
            let (tape, art) = forward_clip(&backbone, &base.model, &clip.pixels, Some(&mask), ForwardOptions::default(), false).unwrap();
            if topk_hit(tape.data(art.logits), clip.class, 1) { hit += 1; }
        }
        println!("random@{rho}: {:.3}", hit as f64 / clips.len() as f64);
    }

    for (name, tap) in [
        ("b0 post", TapConfig { block: Some(0), post_residual: true }),
        ("b1 post", TapConfig { block: Some(1), post_residual: true }),
        ("b2 post", TapConfig { block: Some(2), post_residual: true }),
        ("b3 post", TapConfig { block: Some(3), post_residual: true }),
    ] {
        let mut cfg = ExperimentConfig::default();
        cfg.model.tap = tap;
        let n = base.model.grid().n();
        let mut all = Vec::new();
        let mut occl_wins = 0usize;
        let mut occl_wins_degen = 0usize;
        let mut degen = 0usize;
        let mut hits = [0usize; 3];
        let rhos = [0.1, 0.3, 0.5];
        for (i, clip) in clips.iter().enumerate() {
            let out = compute_oracle(&backbone, &cfg.model, &clip.pixels, clip.class, OracleMode::TrueLabel).unwrap();
            if out.scores.degenerate { degen += 1; }
            all.extend(out.scores.values.clone());
            for (slot, &rho) in rhos.iter().enumerate() {
                let mask = top_k_mask(&out.scores, rho).unwrap();
                let (tape, art) = forward_clip(&backbone, &cfg.model, &clip.pixels, Some(&mask), ForwardOptions::default(), false).unwrap();
                if topk_hit(tape.data(art.logits), clip.class, 1) { hits[slot] += 1; }
            }
            // occlusion: drop top 10% vs drop random 10%
            let top = top_k_mask(&out.scores, 0.1).unwrap();
            let rnd = random_mask(n, 0.1, 1234, i).unwrap();
            let logit_without = |drop: &lite::model::SelectionMask| {
                let keep = drop.complement().unwrap();
                let (tape, art) = forward_clip(&backbone, &cfg.model, &clip.pixels, Some(&keep), ForwardOptions::default(), false).unwrap();
                tape.data(art.logits)[clip.class]
            };
            if logit_without(&top) < logit_without(&rnd) {
                occl_wins += 1;
                if out.scores.degenerate { occl_wins_degen += 1; }
            }
        }
        let nc = clips.len() as f64;
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64;
        let skew = all.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / all.len() as f64 / var.powf(1.5);
        let mut s = all.clone(); s.sort_by(f64::total_cmp);
        println!("{name}: oracle@0.1/0.3/0.5 = {:.3} {:.3} {:.3} | occl win {:.3} (degen {:.2}) | top20 {:.3} gini {:.3} mean {:.3} med {:.3} skew {:.2} degen {}",
            hits[0] as f64/nc, hits[1] as f64/nc, hits[2] as f64/nc,
            occl_wins as f64/nc, if degen>0 { occl_wins_degen as f64/degen as f64 } else { f64::NAN }, top_share(&all, 0.2), gini(&all), mean, s[s.len()/2], skew, degen);
    }
}
