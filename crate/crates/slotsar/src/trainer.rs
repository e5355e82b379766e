//! End-to-end optimization and evaluation.
//!
//! The schedule is linear warmup to the peak rate followed by exponential
//! decay with a configurable half-life; gradients are globally clipped;
//! Adam applies bias-corrected moment updates. Training is deterministic
//! for a fixed seed: scene order, slot draws, and initialization all
//! derive from counters, and per-sample gradients computed in parallel
//! are reduced in index order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::{
    aggregate, masks_from_alpha, masks_from_attention, mbo, miou, LabelMap, MetricsReport,
    SceneMetrics,
};
use crate::model::{ForwardOptions, Model};
use crate::numerics::checkpoint::{read_archive, write_archive, EntryData};
use crate::numerics::graph::Gradients;
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::{Precision, Tensor};
use crate::seed::{derive_seed_n, rng_for_n};
use crate::synthgen::SceneSample;

/// Training phase of the two-stage protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

/// Optimization configuration.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub decay_half_life_steps: usize,
    /// Desk-scale factor rescaling warmup and half-life together.
    pub schedule_scale: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard step cap (stops mid-epoch); useful for short runs.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub stage: Stage,
    pub precision: Precision,
    /// Write a checkpoint every this many steps (0 = final only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_peak: 7e-4,
            warmup_steps: 10_000,
            decay_half_life_steps: 100_000,
            schedule_scale: 1.0,
            clip_norm: 1.0,
            batch_size: 16,
            epochs: 50,
            max_steps: None,
            seed: 0,
            stage: Stage::Pretrain,
            precision: Precision::F32,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_peak <= 0.0 {
            return Err(Error::Config("lr_peak must be > 0".to_string()));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::Config("clip_norm must be > 0".to_string()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be >= 1".to_string()));
        }
        if self.schedule_scale <= 0.0 {
            return Err(Error::Config("schedule_scale must be > 0".to_string()));
        }
        Ok(())
    }

    fn scaled_warmup(&self) -> f64 {
        self.warmup_steps as f64 * self.schedule_scale
    }

    fn scaled_half_life(&self) -> f64 {
        (self.decay_half_life_steps as f64 * self.schedule_scale).max(1.0)
    }
}

/// Learning rate at an optimizer step: linear warmup to the peak, then
/// exponential decay by half every half-life. Continuous at the boundary.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    let warmup = cfg.scaled_warmup();
    let s = step as f64;
    if s < warmup {
        cfg.lr_peak * s / warmup
    } else {
        cfg.lr_peak * 0.5f64.powf((s - warmup) / cfg.scaled_half_life())
    }
}

/// Scale all gradients so the global L2 norm is at most `clip_norm`.
/// Returns the pre-clip norm. Non-finite gradients abort with the
/// offending parameter named.
pub fn clip_gradients(grads: &mut Gradients, clip_norm: f64) -> Result<f64> {
    for (name, g) in grads.iter() {
        if !g.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient for parameter {name}"
            )));
        }
    }
    let norm = grads.global_norm();
    if norm > clip_norm {
        grads.scale(clip_norm / norm);
    }
    Ok(norm)
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam first/second moments plus the step counter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub t: u64,
}

impl AdamState {
    /// One bias-corrected update. Parameters without a gradient entry
    /// (frozen this step) are left untouched, moments included.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &Gradients,
        lr: f64,
        precision: Precision,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let Some(g) = grads.get(&name) else { continue };
            let shape = g.shape().to_vec();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(&shape));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(&shape));
            let p = params.get_mut(&name)?;
            for k in 0..g.numel() {
                let gv = g.data()[k];
                let mv = ADAM_BETA1 * m.data()[k] + (1.0 - ADAM_BETA1) * gv;
                let vv = ADAM_BETA2 * v.data()[k] + (1.0 - ADAM_BETA2) * gv * gv;
                m.data_mut()[k] = mv;
                v.data_mut()[k] = vv;
                let m_hat = mv / bc1;
                let v_hat = vv / bc2;
                p.data_mut()[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
            if precision == Precision::F32 {
                m.round_f32();
                v.round_f32();
                p.round_f32();
            }
        }
        Ok(())
    }
}

// ── Checkpointing ────────────────────────────────────────────────────

/// Write parameters, buffers, optimizer moments, and the step counter.
pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    adam: Option<&AdamState>,
    step: u64,
) -> Result<()> {
    let mut entries = BTreeMap::new();
    for (name, t) in model.params.iter() {
        entries.insert(name.clone(), EntryData::F32((**t).clone()));
    }
    for (name, t) in model.params.buffers() {
        entries.insert(name.clone(), EntryData::F32(t.clone()));
    }
    if let Some(adam) = adam {
        for (name, t) in &adam.m {
            entries.insert(format!("opt.m.{name}"), EntryData::F32(t.clone()));
        }
        for (name, t) in &adam.v {
            entries.insert(format!("opt.v.{name}"), EntryData::F32(t.clone()));
        }
        entries.insert(
            "opt.t".to_string(),
            EntryData::F32(Tensor::scalar(adam.t as f64)),
        );
    }
    entries.insert(
        "train.step".to_string(),
        EntryData::F32(Tensor::scalar(step as f64)),
    );
    write_archive(path, &entries)
}

/// Load a checkpoint into an existing model (shape-checked tensor by
/// tensor) and return the optimizer state and step counter.
pub fn load_checkpoint(path: &Path, model: &mut Model) -> Result<(AdamState, u64)> {
    let entries = read_archive(path)?;
    let mut adam = AdamState::default();
    let mut step = 0u64;
    let param_names: Vec<String> = model.params.names().cloned().collect();
    let buffer_names: Vec<String> = model.params.buffer_names().cloned().collect();
    for name in &param_names {
        match entries.get(name) {
            Some(EntryData::F32(t)) => {
                let dst = model.params.get_mut(name)?;
                if t.shape() != dst.shape() {
                    return Err(Error::Data(format!(
                        "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                        t.shape(),
                        dst.shape()
                    )));
                }
                *dst = t.clone();
            }
            _ => {
                return Err(Error::Data(format!(
                    "checkpoint {} is missing parameter {name}",
                    path.display()
                )))
            }
        }
    }
    for name in &buffer_names {
        if let Some(EntryData::F32(t)) = entries.get(name) {
            let dst = model.params.buffer_mut(name)?;
            if t.shape() != dst.shape() {
                return Err(Error::Data(format!(
                    "checkpoint buffer {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            *dst = t.clone();
        }
    }
    for (name, entry) in &entries {
        if let Some(stripped) = name.strip_prefix("opt.m.") {
            if let EntryData::F32(t) = entry {
                adam.m.insert(stripped.to_string(), t.clone());
            }
        } else if let Some(stripped) = name.strip_prefix("opt.v.") {
            if let EntryData::F32(t) = entry {
                adam.v.insert(stripped.to_string(), t.clone());
            }
        } else if name == "opt.t" {
            if let EntryData::F32(t) = entry {
                adam.t = t.item() as u64;
            }
        } else if name == "train.step" {
            if let EntryData::F32(t) = entry {
                step = t.item() as u64;
            }
        }
    }
    Ok((adam, step))
}

// ── Training loop ────────────────────────────────────────────────────

/// One loss-curve point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossPoint {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Outcome of a training run.
#[derive(Debug)]
pub struct TrainSummary {
    pub steps_run: usize,
    pub final_step: usize,
    pub final_loss: f64,
    pub curve: Vec<LossPoint>,
    pub checkpoint: PathBuf,
}

/// Run the training loop; writes `checkpoint.slts` and `loss.csv` into
/// `out_dir`. With `resume`, continues from the checkpoint in `out_dir`,
/// reproducing the exact loss sequence of an uninterrupted run.
pub fn train(
    model: &mut Model,
    dataset: &[SceneSample],
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: bool,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("training dataset is empty".to_string()));
    }
    std::fs::create_dir_all(out_dir)?;
    let ckpt_path = out_dir.join("checkpoint.slts");
    let csv_path = out_dir.join("loss.csv");

    let mut adam = AdamState::default();
    let mut start_step = 0usize;
    if resume {
        let (a, s) = load_checkpoint(&ckpt_path, model)?;
        adam = a;
        start_step = s as usize;
    }

    let steps_per_epoch = dataset.len().div_ceil(cfg.batch_size);
    let mut total_steps = cfg.epochs * steps_per_epoch;
    if let Some(cap) = cfg.max_steps {
        total_steps = total_steps.min(cap);
    }

    let mut csv = if resume && csv_path.exists() {
        std::fs::OpenOptions::new().append(true).open(&csv_path)?
    } else {
        let mut f = std::fs::File::create(&csv_path)?;
        writeln!(f, "step,lr,loss")?;
        f
    };

    let stage2 = cfg.stage == Stage::Finetune;
    let mut curve = Vec::new();
    let mut global_step = 0usize;
    let mut final_loss = f64::NAN;

    'outer: for epoch in 0..cfg.epochs {
        // deterministic shuffle per (seed, epoch)
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut rng = rng_for_n(cfg.seed, "shuffle", epoch as u64);
        for i in (1..order.len()).rev() {
            let j = rand::Rng::gen_range(&mut rng, 0..=i);
            order.swap(i, j);
        }
        for batch in order.chunks(cfg.batch_size) {
            if global_step >= total_steps {
                break 'outer;
            }
            if global_step < start_step {
                global_step += 1;
                continue;
            }
            let lr = lr_schedule(global_step, cfg);
            let results: Vec<Result<(f64, Gradients, Vec<crate::encoders::BnBatchStats>)>> = batch
                .par_iter()
                .enumerate()
                .map(|(pos, &scene_idx)| {
                    let sample = &dataset[scene_idx];
                    let slot_seed = derive_seed_n(
                        cfg.seed,
                        "slots",
                        (global_step * cfg.batch_size + pos) as u64,
                    );
                    let mut fwd = model.forward(
                        &sample.image,
                        &format!("{scene_idx:06}"),
                        &ForwardOptions {
                            train: true,
                            stage2,
                            slot_seed,
                            precision: cfg.precision,
                        },
                    )?;
                    let loss = fwd.graph.value(fwd.loss).item();
                    let grads = fwd.graph.backward(fwd.loss)?;
                    Ok((loss, grads, fwd.bn_stats))
                })
                .collect();

            // ordered reduction
            let mut sum_loss = 0.0;
            let mut grads = Gradients::default();
            let mut bn_acc: BTreeMap<String, (Vec<f64>, Vec<f64>, usize, usize)> = BTreeMap::new();
            let count = results.len();
            for r in results {
                let (loss, g, stats) = r?;
                sum_loss += loss;
                grads.accumulate(&g);
                for s in stats {
                    let entry = bn_acc
                        .entry(s.name.clone())
                        .or_insert_with(|| (vec![0.0; s.mean.len()], vec![0.0; s.var.len()], 0, s.count));
                    for (a, b) in entry.0.iter_mut().zip(&s.mean) {
                        *a += b;
                    }
                    for (a, b) in entry.1.iter_mut().zip(&s.var) {
                        *a += b;
                    }
                    entry.2 += 1;
                }
            }
            let mean_loss = sum_loss / count as f64;
            if !mean_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became non-finite at step {global_step}; last good checkpoint retained at {}",
                    ckpt_path.display()
                )));
            }
            grads.scale(1.0 / count as f64);
            clip_gradients(&mut grads, cfg.clip_norm)?;
            adam.step(&mut model.params, &grads, lr, cfg.precision)?;
            model.project_wavelet_params()?;

            // running statistics (momentum 0.1, unbiased variance)
            const BN_MOMENTUM: f64 = 0.1;
            for (name, (mean_sum, var_sum, batches, n_tokens)) in bn_acc {
                let scale = 1.0 / batches as f64;
                let unbias = n_tokens as f64 / (n_tokens as f64 - 1.0).max(1.0);
                let mean_name = format!("{name}.mean");
                let var_name = format!("{name}.var");
                {
                    let buf = model.params.buffer_mut(&mean_name)?;
                    for (b, &m) in buf.data_mut().iter_mut().zip(&mean_sum) {
                        *b = (1.0 - BN_MOMENTUM) * *b + BN_MOMENTUM * m * scale;
                    }
                    if cfg.precision == Precision::F32 {
                        buf.round_f32();
                    }
                }
                {
                    let buf = model.params.buffer_mut(&var_name)?;
                    for (b, &v) in buf.data_mut().iter_mut().zip(&var_sum) {
                        *b = (1.0 - BN_MOMENTUM) * *b + BN_MOMENTUM * v * scale * unbias;
                    }
                    if cfg.precision == Precision::F32 {
                        buf.round_f32();
                    }
                }
            }

            writeln!(csv, "{},{},{}", global_step, lr, mean_loss)?;
            curve.push(LossPoint {
                step: global_step,
                lr,
                loss: mean_loss,
            });
            final_loss = mean_loss;
            global_step += 1;

            if cfg.checkpoint_every > 0 && global_step % cfg.checkpoint_every == 0 {
                save_checkpoint(&ckpt_path, model, Some(&adam), global_step as u64)?;
            }
        }
        let _ = epoch;
    }
    csv.flush()?;
    save_checkpoint(&ckpt_path, model, Some(&adam), global_step as u64)?;
    Ok(TrainSummary {
        steps_run: global_step - start_step,
        final_step: global_step,
        final_loss,
        curve,
        checkpoint: ckpt_path,
    })
}

// ── Evaluation ───────────────────────────────────────────────────────

/// Which per-token map drives mask extraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSource {
    Alpha,
    Attention,
}

impl MaskSource {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(MaskSource::Alpha),
            "attention" => Ok(MaskSource::Attention),
            _ => Err(Error::Config(format!(
                "unknown mask source {s}; expected alpha or attention"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MaskSource::Alpha => "alpha",
            MaskSource::Attention => "attention",
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub mask_source: MaskSource,
    pub config_id: String,
    pub eval_seed: u64,
    pub precision: Precision,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            mask_source: MaskSource::Alpha,
            config_id: "eval".to_string(),
            eval_seed: 12345,
            precision: Precision::F64,
        }
    }
}

/// Score one scene's predicted map against its ground truth.
pub fn score_scene(
    index: usize,
    map: &Tensor,
    source: MaskSource,
    gt: &LabelMap,
) -> Result<SceneMetrics> {
    let pred = match source {
        MaskSource::Alpha => masks_from_alpha(map, gt.height, gt.width)?,
        MaskSource::Attention => masks_from_attention(map, gt.height, gt.width)?,
    };
    let ari_v = crate::metrics::ari(&pred, gt)?;
    let mbo_v = mbo(&pred, gt, 0)?;
    let (miou_v, assignment) = miou(&pred, gt)?;
    Ok(SceneMetrics {
        index,
        ari: ari_v,
        mbo: mbo_v,
        miou: miou_v,
        assignment,
    })
}

/// Evaluation-mode forward per scene, masks from the chosen source at the
/// final iteration, aggregated metrics.
pub fn evaluate(model: &Model, dataset: &[SceneSample], opts: &EvalOptions) -> Result<MetricsReport> {
    let reports = evaluate_iterations(model, dataset, opts)?;
    Ok(reports
        .into_iter()
        .last()
        .expect("at least one iteration report"))
}

/// Per-iteration reports (index t-1 holds the metrics computed from the
/// attention map after t refinements; for the alpha source only the last
/// entry differs from duplicates of the final decoding).
pub fn evaluate_iterations(
    model: &Model,
    dataset: &[SceneSample],
    opts: &EvalOptions,
) -> Result<Vec<MetricsReport>> {
    if dataset.is_empty() {
        return Err(Error::Data("evaluation dataset is empty".to_string()));
    }
    let iterations = model.config.mlsa.iterations;
    let per_scene: Vec<Result<Vec<SceneMetrics>>> = dataset
        .par_iter()
        .enumerate()
        .map(|(idx, sample)| {
            let fwd = model.forward(
                &sample.image,
                &format!("{idx:06}"),
                &ForwardOptions {
                    train: false,
                    stage2: true,
                    slot_seed: derive_seed_n(opts.eval_seed, "eval-slots", idx as u64),
                    precision: opts.precision,
                },
            )?;
            let mut rows = Vec::with_capacity(iterations);
            for t in 0..iterations {
                let map = match opts.mask_source {
                    MaskSource::Alpha => fwd.graph.value(fwd.alpha).clone(),
                    MaskSource::Attention => fwd.graph.value(fwd.iters[t].a).clone(),
                };
                rows.push(score_scene(idx, &map, opts.mask_source, &sample.mask)?);
            }
            Ok(rows)
        })
        .collect();

    let mut by_iter: Vec<Vec<SceneMetrics>> = (0..iterations).map(|_| Vec::new()).collect();
    for rows in per_scene {
        let rows = rows?;
        for (t, row) in rows.into_iter().enumerate() {
            by_iter[t].push(row);
        }
    }
    by_iter
        .into_iter()
        .enumerate()
        .map(|(t, rows)| {
            aggregate(
                &format!("{}-t{}", opts.config_id, t + 1),
                rows,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synthgen::{generate_batch, preset_configs, Preset};

    fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            image_size: 32,
            tokens: 16,
            d_s: 6,
            d_feat: 12,
            d_slot: 10,
            scattering: crate::scattering::ScatterConfig {
                scales: 1,
                orientations: 2,
                sigma0: 1.0,
                subsample: 4,
                support: Some(7),
            },
            decoder_hidden: 16,
            encoder_blocks: 1,
            ..ModelConfig::default()
        }
    }

    fn tiny_train_config(seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            epochs: 100,
            schedule_scale: 0.002, // warmup 20 steps, half-life 200
            seed,
            checkpoint_every: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 0.0);
        assert_eq!(lr_schedule(10_000, &cfg), 7e-4);
        assert!((lr_schedule(110_000, &cfg) - 3.5e-4).abs() < 1e-12);
    }

    #[test]
    fn lr_schedule_is_continuous_at_warmup() {
        let cfg = TrainConfig::default();
        let before = lr_schedule(9_999, &cfg);
        let at = lr_schedule(10_000, &cfg);
        let after = lr_schedule(10_001, &cfg);
        assert!((at - before) < 1e-7);
        assert!((at - after) < 1e-7);
        assert!(before < at && after < at);
    }

    #[test]
    fn lr_schedule_scales_with_desk_factor() {
        let cfg = TrainConfig {
            schedule_scale: 0.01,
            ..TrainConfig::default()
        };
        assert_eq!(lr_schedule(100, &cfg), 7e-4); // warmup now 100 steps
        assert!((lr_schedule(1100, &cfg) - 3.5e-4).abs() < 1e-12);
    }

    #[test]
    fn clipping_examples() {
        // two entries of 2/√8... construct a gradient of norm 2
        let mut grads = Gradients::default();
        grads.insert(
            "a".to_string(),
            Tensor::new(vec![2], vec![2.0 / 2.0_f64.sqrt(), 2.0 / 2.0_f64.sqrt()]).unwrap(),
        );
        let norm = clip_gradients(&mut grads, 1.0).unwrap();
        assert!((norm - 2.0).abs() < 1e-12);
        for v in grads.get("a").unwrap().data() {
            assert!((v - 0.5 / 2.0_f64.sqrt() * 2.0).abs() < 1e-12);
        }
        assert!((grads.global_norm() - 1.0).abs() < 1e-9);

        // below threshold: unchanged
        let mut small = Gradients::default();
        small.insert("a".to_string(), Tensor::new(vec![1], vec![0.5]).unwrap());
        clip_gradients(&mut small, 1.0).unwrap();
        assert_eq!(small.get("a").unwrap().data(), &[0.5]);

        // non-finite gradient aborts with the parameter named
        let mut bad = Gradients::default();
        bad.insert("w.bad".to_string(), Tensor::new(vec![1], vec![f64::NAN]).unwrap());
        let err = clip_gradients(&mut bad, 1.0).unwrap_err();
        assert!(err.to_string().contains("w.bad"));
    }

    #[test]
    fn post_clip_norm_is_min_of_norm_and_threshold() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mut grads = Gradients::default();
            for name in ["a", "b", "c"] {
                let data: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
                grads.insert(name.to_string(), Tensor::new(vec![5], data).unwrap());
            }
            let before = grads.global_norm();
            clip_gradients(&mut grads, 1.0).unwrap();
            assert!((grads.global_norm() - before.min(1.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let mut grads = Gradients::default();
        grads.insert("w".to_string(), Tensor::zeros(&[2]));
        let mut adam = AdamState::default();
        adam.step(&mut params, &grads, 1e-3, Precision::F64).unwrap();
        assert_eq!(params.get("w").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_matches_hand_formula() {
        // single scalar, g = 1: m̂ = 1, v̂ = 1, so Δ = −lr/(1 + ε)
        let mut params = ParamStore::new();
        params.insert("w", Tensor::scalar(0.0));
        let mut grads = Gradients::default();
        grads.insert("w".to_string(), Tensor::scalar(1.0));
        let mut adam = AdamState::default();
        let lr = 1e-2;
        adam.step(&mut params, &grads, lr, Precision::F64).unwrap();
        let expect = -lr * 1.0 / (1.0 + ADAM_EPS);
        assert!((params.get("w").unwrap().item() - expect).abs() < 1e-15);
        // repeated unit gradients keep stepping by about −lr
        for _ in 0..5 {
            adam.step(&mut params, &grads, lr, Precision::F64).unwrap();
        }
        assert!(params.get("w").unwrap().item() < -5.0 * lr * 0.9);
    }

    #[test]
    fn checkpoint_round_trips_moments_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = Model::new(tiny_model_config(), 3).unwrap();
        let mut adam = AdamState::default();
        // run real steps so the moments are non-trivial
        let configs = preset_configs(Preset::Stage1Simple, 4, 11, 32);
        let data = generate_batch(&configs).unwrap();
        let cfg = TrainConfig {
            max_steps: Some(2),
            ..tiny_train_config(5)
        };
        train(&mut model, &data, &cfg, dir.path(), false).unwrap();
        let ck = dir.path().join("checkpoint.slts");
        let mut model2 = Model::new(tiny_model_config(), 3).unwrap();
        let (adam2, step) = load_checkpoint(&ck, &mut model2).unwrap();
        assert_eq!(step, 2);
        // write again: byte-identical archives
        let ck2 = dir.path().join("again.slts");
        save_checkpoint(&ck2, &model2, Some(&adam2), step).unwrap();
        assert_eq!(std::fs::read(&ck).unwrap(), std::fs::read(&ck2).unwrap());
        adam.t = adam2.t;
    }

    #[test]
    fn one_step_is_bit_deterministic() {
        let configs = preset_configs(Preset::Stage1Simple, 4, 11, 32);
        let data = generate_batch(&configs).unwrap();
        let run = || {
            let dir = tempfile::tempdir().unwrap();
            let mut model = Model::new(tiny_model_config(), 3).unwrap();
            let cfg = TrainConfig {
                max_steps: Some(1),
                ..tiny_train_config(5)
            };
            let summary = train(&mut model, &data, &cfg, dir.path(), false).unwrap();
            summary.curve[0].loss.to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_loss_sequence() {
        let configs = preset_configs(Preset::Stage1Simple, 8, 13, 32);
        let data = generate_batch(&configs).unwrap();

        let dir_a = tempfile::tempdir().unwrap();
        let mut model_a = Model::new(tiny_model_config(), 3).unwrap();
        let cfg_full = TrainConfig {
            max_steps: Some(12),
            ..tiny_train_config(5)
        };
        let full = train(&mut model_a, &data, &cfg_full, dir_a.path(), false).unwrap();

        let dir_b = tempfile::tempdir().unwrap();
        let mut model_b = Model::new(tiny_model_config(), 3).unwrap();
        let cfg_half = TrainConfig {
            max_steps: Some(6),
            ..tiny_train_config(5)
        };
        train(&mut model_b, &data, &cfg_half, dir_b.path(), false).unwrap();
        let mut model_b2 = Model::new(tiny_model_config(), 3).unwrap();
        let resumed = train(&mut model_b2, &data, &cfg_full, dir_b.path(), true).unwrap();

        let tail_a: Vec<(usize, u64)> = full
            .curve
            .iter()
            .map(|p| (p.step, p.loss.to_bits()))
            .collect();
        let tail_b: Vec<(usize, u64)> = resumed
            .curve
            .iter()
            .map(|p| (p.step, p.loss.to_bits()))
            .collect();
        assert_eq!(&tail_a[6..], &tail_b[..]);

        // the loss.csv files agree line for line
        let csv_a = std::fs::read_to_string(dir_a.path().join("loss.csv")).unwrap();
        let csv_b = std::fs::read_to_string(dir_b.path().join("loss.csv")).unwrap();
        assert_eq!(csv_a, csv_b);
    }

    #[test]
    fn training_reduces_loss_on_simple_scenes() {
        // after 1000 steps on 500 simple scenes the loss sits below half
        // of the step-10 loss (median of 3 seeds)
        let configs = preset_configs(Preset::Stage1Simple, 500, 17, 32);
        let data = generate_batch(&configs).unwrap();
        let mut ratios = Vec::new();
        for seed in [1u64, 2, 3] {
            let dir = tempfile::tempdir().unwrap();
            let mut model = Model::new(tiny_model_config(), seed).unwrap();
            let cfg = TrainConfig {
                max_steps: Some(1000),
                schedule_scale: 0.01,
                ..tiny_train_config(seed)
            };
            let summary = train(&mut model, &data, &cfg, dir.path(), false).unwrap();
            let at_step_10 = summary.curve[9].loss;
            let late: f64 = summary.curve[summary.curve.len() - 10..]
                .iter()
                .map(|p| p.loss)
                .sum::<f64>()
                / 10.0;
            ratios.push(late / at_step_10);
        }
        ratios.sort_by(f64::total_cmp);
        assert!(
            ratios[1] < 0.5,
            "median loss ratio vs step 10 {ratios:?} not < 0.5"
        );
    }

    #[test]
    fn evaluation_is_deterministic() {
        let configs = preset_configs(Preset::Stage2Complex, 3, 19, 32);
        let data = generate_batch(&configs).unwrap();
        let model = Model::new(tiny_model_config(), 3).unwrap();
        let opts = EvalOptions {
            mask_source: MaskSource::Attention,
            config_id: "det".to_string(),
            ..EvalOptions::default()
        };
        let a = evaluate(&model, &data, &opts).unwrap();
        let b = evaluate(&model, &data, &opts).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn planted_alpha_equal_to_ground_truth_scores_perfectly() {
        // a token-aligned band target (straight edges only; bilinear
        // argmax reproduces it exactly) planted as one-hot alpha
        let side = 4usize; // token grid
        let h = 32usize;
        let scale = h / side;
        let band = [4usize, 5, 6, 7, 8, 9, 10, 11]; // token rows 1..=2
        let mut labels = vec![0u32; h * h];
        for py in 0..h {
            for px in 0..h {
                let tok = (py / scale) * side + px / scale;
                if band.contains(&tok) {
                    labels[py * h + px] = 1;
                }
            }
        }
        let gt = LabelMap::new(h, h, labels).unwrap();
        let mut alpha = Tensor::zeros(&[2, side * side]);
        for t in 0..side * side {
            if band.contains(&t) {
                alpha.set2(1, t, 1.0);
            } else {
                alpha.set2(0, t, 1.0);
            }
        }
        // slot 1 holds the target; Hungarian alignment absorbs the swap
        let row = score_scene(0, &alpha, MaskSource::Alpha, &gt).unwrap();
        assert_eq!(row.ari, 1.0);
        assert_eq!(row.mbo, 1.0);
        assert_eq!(row.miou, 1.0);
    }

    #[test]
    fn per_iteration_reports_carry_tagged_config_ids() {
        let configs = preset_configs(Preset::Stage2Complex, 2, 23, 32);
        let data = generate_batch(&configs).unwrap();
        let model = Model::new(tiny_model_config(), 3).unwrap();
        let opts = EvalOptions {
            mask_source: MaskSource::Attention,
            config_id: "abl".to_string(),
            ..EvalOptions::default()
        };
        let reports = evaluate_iterations(&model, &data, &opts).unwrap();
        assert_eq!(reports.len(), 3);
        assert_eq!(reports[0].config_id, "abl-t1");
        assert_eq!(reports[2].config_id, "abl-t3");
    }
}
