//! Scratch harness for picking overfit hyperparameters: trains each
//! candidate config on the acceptance scenes and reports training MAE
//! plus the head-localization factor of the attention map.

use std::time::Instant;

use amcnn::data::{synth_dataset, Sample, SynthConfig};
use amcnn::density::{resolve_sigmas, SigmaPolicy};
use amcnn::model::{build_model, BranchLabel, Model, Variant, WeightInit};
use amcnn::trainer::{evaluate, finetune, pretrain_branch, TrainConfig};

fn attention_factor(model: &Model<f64>, scenes: &[Sample<f64>], policy: SigmaPolicy<f64>) -> f64 {
    let mut inside = (0.0f64, 0usize);
    let mut outside = (0.0f64, 0usize);
    for scene in scenes {
        let out = model.forward(&scene.image_tensor()).unwrap();
        let sigmas = resolve_sigmas(&scene.annotations, policy, None).unwrap().sigmas;
        let heads = scene.annotations.points();
        for map in &out.attention_maps {
            let s = map.shape();
            let (mh, mw) = (s[1], s[2]);
            let grid = map.to_vec();
            for r in 0..mh {
                for c in 0..mw {
                    let (cy, cx) = (4.0 * r as f64 + 1.5, 4.0 * c as f64 + 1.5);
                    let near = heads.iter().zip(&sigmas).any(|(&(x, y), &sg)| {
                        (x - cx) * (x - cx) + (y - cy) * (y - cy) <= 4.0 * sg * sg
                    });
                    let b = if near { &mut inside } else { &mut outside };
                    b.0 += grid[r * mw + c];
                    b.1 += 1;
                }
            }
        }
    }
    (inside.0 / inside.1 as f64) / (outside.0 / outside.1 as f64)
}

fn describe_attention(model: &Model<f64>, scene: &Sample<f64>) -> String {
    let out = model.forward(&scene.image_tensor()).unwrap();
    let map = &out.attention_maps[0];
    let s = map.shape();
    let (mh, mw) = (s[1], s[2]);
    let grid = map.to_vec();
    let (mut mn, mut mx, mut argmax) = (f64::INFINITY, f64::NEG_INFINITY, 0);
    for (i, &v) in grid.iter().enumerate() {
        if v > mx {
            mx = v;
            argmax = i;
        }
        mn = mn.min(v);
    }
    let (ar, ac) = (argmax / mw, argmax % mw);
    let (ay, ax) = (4.0 * ar as f64 + 1.5, 4.0 * ac as f64 + 1.5);
    let d_head = scene
        .annotations
        .points()
        .iter()
        .map(|&(x, y)| ((x - ax).powi(2) + (y - ay).powi(2)).sqrt())
        .fold(f64::INFINITY, f64::min);
    format!(
        "score range {:.3}, peak at ({ay:.0},{ax:.0}) {d_head:.1}px from a head ({mh}x{mw})",
        (mx / mn).ln()
    )
}

fn main() {
    let scenes = synth_dataset::<f64>(&SynthConfig::default(), 8, 51).unwrap();
    let held_out = synth_dataset::<f64>(&SynthConfig::default(), 4, 6006).unwrap();

    let args: Vec<String> = std::env::args().skip(1).collect();
    // (name, lr, sigma, rescale, init, pretrain_iters, attention_kernel,
    //  variant, head_init_scale, attention_lr_mult, attention_init_gain)
    #[rustfmt::skip]
    let candidates: Vec<(&str, f64, SigmaPolicy<f64>, bool, WeightInit, usize, usize, Variant, f64, f64, f64)> = vec![
        ("g4 k9 mult0.25",  2e-3, SigmaPolicy::Fixed { sigma: 4.0 }, true, WeightInit::FanIn, 300, 9, Variant::AmCnn, 0.5, 0.25, 4.0),
        ("g8 k9 mult0.25",  2e-3, SigmaPolicy::Fixed { sigma: 4.0 }, true, WeightInit::FanIn, 300, 9, Variant::AmCnn, 0.5, 0.25, 8.0),
        ("g12 k9 mult0.25", 2e-3, SigmaPolicy::Fixed { sigma: 4.0 }, true, WeightInit::FanIn, 300, 9, Variant::AmCnn, 0.5, 0.25, 12.0),
        ("g8 k1 mult0.25",  2e-3, SigmaPolicy::Fixed { sigma: 4.0 }, true, WeightInit::FanIn, 300, 1, Variant::AmCnn, 0.5, 0.25, 8.0),
        ("g8 k9 mult1",     2e-3, SigmaPolicy::Fixed { sigma: 4.0 }, true, WeightInit::FanIn, 300, 9, Variant::AmCnn, 0.5, 1.0, 8.0),
        ("g8 k9 mult0.05",  2e-3, SigmaPolicy::Fixed { sigma: 4.0 }, true, WeightInit::FanIn, 300, 9, Variant::AmCnn, 0.5, 0.05, 8.0),
    ];

    for (name, lr, sigma, rescale, init, pre_iters, attn_k, variant, head_scale, attn_mult, attn_gain) in candidates {
        if !args.is_empty() && !args.iter().any(|a| name.contains(a.as_str())) {
            continue;
        }
        let mut cfg = TrainConfig::<f64>::default();
        cfg.lr = lr;
        cfg.sigma = sigma;
        cfg.rescale = rescale;
        cfg.init = init;
        cfg.attention_kernel = attn_k;
        cfg.variant = variant;
        cfg.c_f = 32;
        cfg.pretrain_iterations = pre_iters;
        cfg.finetune_iterations = 500;
        cfg.seed = 9;
        cfg.head_init_scale = head_scale;
        cfg.attention_lr_mult = attn_mult;
        cfg.attention_init_gain = attn_gain;
        let t0 = Instant::now();
        let mut model = build_model::<f64>(cfg.model_config()).unwrap();
        if pre_iters > 0 {
            let mut pres = Vec::new();
            for label in BranchLabel::ALL {
                let (pre, _) = pretrain_branch(label, &scenes, &cfg).unwrap();
                model.adopt_from(&pre, &format!("branch.{}.", label.as_str())).unwrap();
                pres.push(pre);
            }
            let refs: Vec<&Model<f64>> = pres.iter().collect();
            model.adopt_fused_head(&refs, cfg.head_init_scale).unwrap();
            if cfg.attention_init_gain > 0.0 {
                model.seed_attention_from_heads(&refs, cfg.attention_init_gain).unwrap();
            }
        }
        println!(
            "  init: attn held-out x{:.2}  [{}]",
            attention_factor(&model, &held_out, cfg.sigma),
            describe_attention(&model, &held_out[0]),
        );
        cfg.checkpoint_every = 100;
        let ckpt_dir = tempfile::tempdir().unwrap();
        let log = finetune(&mut model, &scenes, &cfg, None, Some(ckpt_dir.path()));
        for step in (100..=cfg.finetune_iterations).step_by(100) {
            let path = ckpt_dir.path().join(format!("checkpoint-{step:06}.amcnn"));
            let m = Model::<f64>::load_checkpoint(&path).unwrap();
            let report = evaluate(&m, &scenes).unwrap();
            println!(
                "  step {step}: MAE {:>6.3}  attn train x{:.2}  held-out x{:.2}  [{}]",
                report.mae,
                attention_factor(&m, &scenes, cfg.sigma),
                attention_factor(&m, &held_out, cfg.sigma),
                describe_attention(&m, &held_out[0]),
            );
        }
        match log {
            Ok(_) => {
                let report = evaluate(&model, &scenes).unwrap();
                let mean_gt =
                    report.rows.iter().map(|r| r.gt).sum::<f64>() / report.rows.len() as f64;
                let factor = attention_factor(&model, &held_out, cfg.sigma);
                let factor_knn =
                    attention_factor(&model, &held_out, SigmaPolicy::Knn { beta: 0.3 });
                let mean_pred =
                    report.rows.iter().map(|r| r.pred).sum::<f64>() / report.rows.len() as f64;
                println!(
                    "{name}: MAE {:>6.3} (budget {:.3})  attn x{:<6.2} (knn-radius x{:.2})  pred/gt {:.1}/{:.1}  {:.0}s",
                    report.mae,
                    0.1 * mean_gt,
                    factor,
                    factor_knn,
                    mean_pred,
                    mean_gt,
                    t0.elapsed().as_secs_f64()
                );
            }
            Err(e) => println!("{name}: DIVERGED/ERROR {e}"),
        }
    }
}
