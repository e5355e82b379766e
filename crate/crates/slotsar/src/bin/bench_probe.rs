// Scratch benchmark probe used while tuning the desk-scale benchmark.

use slotsar::encoders::FreezeMode;
use slotsar::mlsa::MlsaConfig;
use slotsar::model::{Model, ModelConfig};
use slotsar::numerics::Precision;
use slotsar::scattering::ScatterConfig;
use slotsar::synthgen::{generate_batch, preset_configs, Preset};
use slotsar::trainer::{evaluate_iterations, train, EvalOptions, MaskSource, Stage, TrainConfig};

fn bench_model_config(ablation: &str) -> ModelConfig {
    let mut cfg = ModelConfig {
        image_size: 112,
        tokens: 196,
        d_s: 32,
        d_feat: 64,
        d_slot: 64,
        scattering: ScatterConfig {
            scales: 2,
            orientations: 3,
            sigma0: 0.8,
            subsample: 8,
            support: None,
        },
        decoder_hidden: 128,
        encoder_blocks: 2,
        freeze: FreezeMode::FrozenAfterStage1,
        mlsa: MlsaConfig::default(),
        ..ModelConfig::default()
    };
    cfg.set_ablation(ablation).unwrap();
    cfg
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_scenes: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(300);
    let steps: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(500);
    let seeds: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1);
    let eval_n: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(n_scenes.min(200));
    let freeze: bool = args.get(5).map(|s| s == "frozen").unwrap_or(false);
    let lr: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(7e-4);

    let t0 = std::time::Instant::now();
    let configs = preset_configs(Preset::Stage2Complex, n_scenes, 777, 112);
    let data = generate_batch(&configs).unwrap();
    println!("generated {} scenes in {:.1}s", data.len(), t0.elapsed().as_secs_f64());

    for ablation in ["full", "baseline"] {
        for seed in 0..seeds {
            let t1 = std::time::Instant::now();
            let mut mc = bench_model_config(ablation);
            if freeze {
                mc.freeze = FreezeMode::Frozen;
            }
            let mut model = Model::new(mc, 100 + seed).unwrap();
            let cfg = TrainConfig {
                lr_peak: lr,
                schedule_scale: 0.02, // warmup 200, half-life 2000
                batch_size: 8,
                epochs: 1000,
                max_steps: Some(steps),
                seed: 100 + seed,
                stage: Stage::Pretrain,
                precision: Precision::F32,
                checkpoint_every: 0,
                ..TrainConfig::default()
            };
            let dir = std::env::temp_dir().join(format!("bench-{ablation}-{seed}"));
            let summary = train(&mut model, &data, &cfg, &dir, false).unwrap();
            let train_s = t1.elapsed().as_secs_f64();
            let t2 = std::time::Instant::now();
            let reports = evaluate_iterations(
                &model,
                &data[..eval_n],
                &EvalOptions {
                    mask_source: MaskSource::Attention,
                    config_id: format!("{ablation}-s{seed}"),
                    eval_seed: 9,
                    precision: Precision::F32,
                },
            )
            .unwrap();
            let last = reports.last().unwrap();
            let per_t: Vec<String> = reports
                .iter()
                .map(|r| format!("{:.3}", r.ari))
                .collect();
            println!(
                "{ablation} seed {seed}: loss {:.4} | ari/t {} | mbo {:.3} miou {:.3} | train {:.0}s eval {:.0}s",
                summary.final_loss,
                per_t.join(" "),
                last.mbo,
                last.miou,
                train_s,
                t2.elapsed().as_secs_f64()
            );
            // slot diagnostics over a few scenes
            let side = model.config.token_side();
            let mut sharp = 0.0;
            let mut slot0_mass = 0.0;
            let mut tgt_iou_best = 0.0;
            let mut alpha_frac = 0.0;
            let diag_n = 24usize;
            for i in 0..diag_n {
                let fwd = model
                    .forward(&data[i].image, "x", &slotsar::model::ForwardOptions {
                        train: false, stage2: false, slot_seed: i as u64, precision: Precision::F64,
                    })
                    .unwrap();
                let a = fwd.graph.value(fwd.iters.last().unwrap().a);
                let n = a.cols();
                // token-level target occupancy from the pixel mask
                let hm = data[i].mask.height / side;
                let mut tok_target = vec![false; n];
                for t in 0..n {
                    let (ty, tx) = (t / side, t % side);
                    let mut hits = 0usize;
                    for py in ty * hm..(ty + 1) * hm {
                        for px in tx * hm..(tx + 1) * hm {
                            if data[i].mask.labels[py * data[i].mask.width + px] == 1 {
                                hits += 1;
                            }
                        }
                    }
                    tok_target[t] = hits * 2 > hm * hm;
                }
                for t in 0..n {
                    sharp += (a.at2(0, t) - 0.5).abs() / (diag_n * n) as f64;
                    slot0_mass += a.at2(0, t) / (diag_n * n) as f64;
                }
                // best IoU of slot-argmax vs token target, over both slots
                let mut best = 0.0f64;
                for k in 0..2 {
                    let (mut inter, mut uni) = (0usize, 0usize);
                    for t in 0..n {
                        let p = a.at2(k, t) > 0.5;
                        if p && tok_target[t] { inter += 1; }
                        if p || tok_target[t] { uni += 1; }
                    }
                    if uni > 0 { best = best.max(inter as f64 / uni as f64); }
                }
                tgt_iou_best += best / diag_n as f64;
                let alpha = fwd.graph.value(fwd.alpha);
                for t in 0..n {
                    if alpha.at2(0, t) > 0.5 { alpha_frac += 1.0 / (diag_n * n) as f64; }
                }
            }
            println!(
                "  diag: attn sharpness {sharp:.3} slot0mass {slot0_mass:.3} token-IoU(best slot vs target) {tgt_iou_best:.3} alpha-slot0-frac {alpha_frac:.3}"
            );
        }
    }
}
