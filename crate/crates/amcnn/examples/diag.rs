//! Scratch diagnostic: how head-localized is the pretrained branch
//! consensus pre-activation that seeds the attention? Prints per-cell
//! log-attention stats (inside 2 sigma vs outside vs corners) and an
//! ASCII rendering of the map next to the ground truth.

use amcnn::data::{synth_dataset, Sample, SynthConfig};
use amcnn::density::SigmaPolicy;
use amcnn::model::{build_model, BranchLabel, Model, WeightInit};
use amcnn::trainer::{evaluate, patch_gt, pretrain_branch, TrainConfig};

fn ascii(grid: &[f64], mh: usize, mw: usize) -> Vec<String> {
    let ramp: Vec<char> = " .:-=+*#%@".chars().collect();
    let (mn, mx) = grid.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
        (a.min(v), b.max(v))
    });
    let span = (mx - mn).max(1e-12);
    (0..mh)
        .map(|r| {
            (0..mw)
                .map(|c| {
                    let t = (grid[r * mw + c] - mn) / span;
                    ramp[((t * 9.0).round() as usize).min(9)]
                })
                .collect()
        })
        .collect()
}

fn stats(name: &str, grid: &[f64], mh: usize, mw: usize, scene: &Sample<f64>, sigma: f64) {
    let heads = scene.annotations.points();
    let (mut inside, mut outside) = ((0.0, 0usize), (0.0, 0usize));
    for r in 0..mh {
        for c in 0..mw {
            let (cy, cx) = (4.0 * r as f64 + 1.5, 4.0 * c as f64 + 1.5);
            let near = heads
                .iter()
                .any(|&(x, y)| (x - cx) * (x - cx) + (y - cy) * (y - cy) <= 4.0 * sigma * sigma);
            let b = if near { &mut inside } else { &mut outside };
            b.0 += grid[r * mw + c];
            b.1 += 1;
        }
    }
    let corners = [0, mw - 1, (mh - 1) * mw, mh * mw - 1];
    let corner_mean = corners.iter().map(|&i| grid[i]).sum::<f64>() / 4.0;
    let (mn, mx) = grid.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
        (a.min(v), b.max(v))
    });
    println!(
        "{name}: in2s {:+.4} out {:+.4} (diff {:+.4})  corners {:+.4}  range [{:+.4},{:+.4}]",
        inside.0 / inside.1 as f64,
        outside.0 / outside.1 as f64,
        inside.0 / inside.1 as f64 - outside.0 / outside.1 as f64,
        corner_mean,
        mn,
        mx
    );
}

fn main() {
    let scenes = synth_dataset::<f64>(&SynthConfig::default(), 8, 51).unwrap();
    let held_out = synth_dataset::<f64>(&SynthConfig::default(), 4, 6006).unwrap();

    let mut cfg = TrainConfig::<f64>::default();
    cfg.lr = 2e-3;
    cfg.sigma = SigmaPolicy::Fixed { sigma: 4.0 };
    cfg.init = WeightInit::FanIn;
    cfg.c_f = 32;
    cfg.pretrain_iterations = 300;
    cfg.seed = 9;
    cfg.attention_kernel = 9;

    let mut model = build_model::<f64>(cfg.model_config()).unwrap();
    let mut pres = Vec::new();
    for label in BranchLabel::ALL {
        let (pre, _) = pretrain_branch(label, &scenes, &cfg).unwrap();
        let rep = evaluate(&pre, &scenes).unwrap();
        let rep_h = evaluate(&pre, &held_out).unwrap();
        println!("branch {} train MAE {:.3} held-out MAE {:.3}", label.as_str(), rep.mae, rep_h.mae);
        model.adopt_from(&pre, &format!("branch.{}.", label.as_str())).unwrap();
        pres.push(pre);
    }
    let refs: Vec<&Model<f64>> = pres.iter().collect();
    model.adopt_fused_head(&refs, 0.5).unwrap();
    model.seed_attention_from_heads(&refs, 8.0).unwrap();

    for (tag, scene) in [("train0", &scenes[0]), ("held0", &held_out[0]), ("held1", &held_out[1])] {
        let out = model.forward(&scene.image_tensor()).unwrap();
        let m = &out.attention_maps[0];
        let s = m.shape();
        let (mh, mw) = (s[1], s[2]);
        let log_m: Vec<f64> = m.to_vec().iter().map(|v| v.ln()).collect();
        let gt_grid = patch_gt(scene, cfg.sigma).unwrap().data().to_vec();

        // Density prediction, same grid.
        let pred = out.density.to_vec();

        println!("--- {tag}: {} heads ---", scene.annotations.points().len());
        stats("  logM", &log_m, mh, mw, scene, 4.0);
        stats("  pred", &pred, mh, mw, scene, 4.0);
        stats("  gt  ", &gt_grid, mh, mw, scene, 4.0);
        let a = ascii(&log_m, mh, mw);
        let b = ascii(&gt_grid, mh, mw);
        let c = ascii(&pred, mh, mw);
        println!("  logM (left) | gt (mid) | pred (right)");
        for ((ra, rb), rc) in a.iter().zip(&b).zip(&c) {
            println!("  {ra} | {rb} | {rc}");
        }
    }
}
