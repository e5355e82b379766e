//! Token encoders: the lightweight scattering refiner and the pluggable
//! visual backend.
//!
//! The scattering refiner is BN → [1×1 conv → BN → ReLU] ×2 followed by
//! single-head self-attention with a residual connection. The visual
//! backend is either a small trainable patch encoder (non-overlapping
//! patches, learned positional embedding, two pre-LN transformer blocks)
//! or precomputed token files.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::checkpoint::{self, EntryData};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

/// Refined scattering tokens (the encoder side's hand-off to slot
/// attention).
#[derive(Clone, Debug)]
pub struct ScatteringTokens {
    pub values: Tensor,
}

/// Visual tokens plus the backend that produced them.
#[derive(Clone, Debug)]
pub struct VisualTokens {
    pub values: Tensor,
    pub source: String,
}

/// Maximum allowed per-token L2 norm; larger values indicate a
/// degenerate backend.
pub const TOKEN_NORM_BOUND: f64 = 1e4;

pub fn check_token_norms(values: &Tensor, source: &str) -> Result<()> {
    let (n, d) = (values.rows(), values.cols());
    for t in 0..n {
        let norm: f64 = values.data()[t * d..(t + 1) * d]
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() || norm > TOKEN_NORM_BOUND {
            return Err(Error::Data(format!(
                "token {t} from backend {source} has norm {norm}"
            )));
        }
    }
    Ok(())
}

// ── Shared building blocks ───────────────────────────────────────────

/// Affine batch-norm parameters plus running-statistic constants.
#[derive(Clone, Copy, Debug)]
pub struct BnVars {
    pub gamma: Var,
    pub beta: Var,
    /// Running mean/var bound as constants (evaluation mode only).
    pub running_mean: Var,
    pub running_var: Var,
}

/// Batch statistics produced by one training-mode BN application.
#[derive(Clone, Debug)]
pub struct BnBatchStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// Apply batch normalization with affine terms. Training mode normalizes
/// with per-call statistics and reports them; evaluation mode uses the
/// bound running statistics.
pub fn batch_norm_apply(
    g: &mut Graph,
    x: Var,
    bn: &BnVars,
    name: &str,
    train: bool,
    stats_out: &mut Vec<BnBatchStats>,
) -> Result<Var> {
    let normalized = if train {
        let y = g.batch_norm(x, BN_EPS)?;
        let (mean, var) = g.batch_norm_stats(y).expect("bn node");
        stats_out.push(BnBatchStats {
            name: name.to_string(),
            mean,
            var,
            count: g.value(x).rows(),
        });
        y
    } else {
        let neg_mean = g.neg(bn.running_mean)?;
        let centered = g.add_row_vec(x, neg_mean)?;
        let var_eps = g.add_const(bn.running_var, BN_EPS)?;
        let std = g.sqrt(var_eps)?;
        let inv = g.recip(std)?;
        g.mul_row_vec(centered, inv)?
    };
    let scaled = g.mul_row_vec(normalized, bn.gamma)?;
    g.add_row_vec(scaled, bn.beta)
}

/// Layer norm with affine terms.
pub fn layer_norm_affine(g: &mut Graph, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let y = g.layer_norm(x, LN_EPS)?;
    let scaled = g.mul_row_vec(y, gain)?;
    g.add_row_vec(scaled, bias)
}

/// Linear layer weights.
#[derive(Clone, Copy, Debug)]
pub struct LinVars {
    pub w: Var,
    pub b: Var,
}

pub fn linear(g: &mut Graph, x: Var, l: &LinVars) -> Result<Var> {
    let y = g.matmul(x, l.w)?;
    g.add_row_vec(y, l.b)
}

/// Single-head dot-product attention projections (no biases).
#[derive(Clone, Copy, Debug)]
pub struct AttnVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

/// x + softmax(QKᵀ/√d)·V over tokens.
pub fn self_attention_residual(g: &mut Graph, x: Var, a: &AttnVars) -> Result<Var> {
    let d = g.value(x).cols();
    let q = g.matmul(x, a.w_q)?;
    let k = g.matmul(x, a.w_k)?;
    let v = g.matmul(x, a.w_v)?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, 1.0 / (d as f64).sqrt())?;
    let attn = g.softmax(scaled, 1)?;
    let out = g.matmul(attn, v)?;
    g.add(x, out)
}

// ── Scattering encoder ───────────────────────────────────────────────

/// Parameter handles for the scattering refiner.
#[derive(Clone, Copy, Debug)]
pub struct ScatEncVars {
    pub bn0: BnVars,
    pub conv1: LinVars,
    pub bn1: BnVars,
    pub conv2: LinVars,
    pub bn2: BnVars,
    pub attn: AttnVars,
}

/// F_s″ = SelfAttention(f_e(f_e(BN(F_s)))) with
/// f_e(F) = ReLU(BN(conv1×1(F))). Token-wise 1×1 convolution is a linear
/// map over the channel axis.
pub fn scattering_encode(
    g: &mut Graph,
    tokens: Var,
    vars: &ScatEncVars,
    prefix: &str,
    train: bool,
    stats_out: &mut Vec<BnBatchStats>,
) -> Result<Var> {
    let t = g.value(tokens);
    if t.rank() != 2 {
        return Err(Error::shape("scattering_encode", "tokens must be [N, D]"));
    }
    let x = batch_norm_apply(g, tokens, &vars.bn0, &format!("{prefix}.bn0"), train, stats_out)?;
    let c1 = linear(g, x, &vars.conv1)?;
    let b1 = batch_norm_apply(g, c1, &vars.bn1, &format!("{prefix}.bn1"), train, stats_out)?;
    let r1 = g.relu(b1)?;
    let c2 = linear(g, r1, &vars.conv2)?;
    let b2 = batch_norm_apply(g, c2, &vars.bn2, &format!("{prefix}.bn2"), train, stats_out)?;
    let r2 = g.relu(b2)?;
    self_attention_residual(g, r2, &vars.attn)
}

// ── Visual backend ───────────────────────────────────────────────────

/// Which visual encoder produces the semantic token stream.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum VisualBackend {
    /// Small trainable patch encoder.
    BuiltinPatchEncoder,
    /// Token files precomputed by an external model.
    PrecomputedFile { dir: PathBuf },
}

impl Default for VisualBackend {
    fn default() -> Self {
        VisualBackend::BuiltinPatchEncoder
    }
}

/// When the builtin encoder's parameters stop receiving gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreezeMode {
    Trainable,
    Frozen,
    /// Train during pretraining, freeze during fine-tuning.
    FrozenAfterStage1,
}

impl Default for FreezeMode {
    fn default() -> Self {
        FreezeMode::FrozenAfterStage1
    }
}

/// log(1+x), a light despeckling blur, then per-image standardization.
/// The blur plays the role a pretrained extractor's noise suppression
/// would; without it patch features are dominated by per-pixel speckle.
pub fn preprocess_image(image: &Tensor) -> Tensor {
    let (h, w) = (image.rows(), image.cols());
    let mut out = image.clone();
    for v in out.data_mut() {
        *v = (1.0 + v.max(0.0)).ln();
    }
    blur_circular(out.data_mut(), h, w, 1.5);
    // mean-center with a fixed gain; dividing by the per-image deviation
    // would re-amplify whatever speckle the blur removed
    let n = out.numel() as f64;
    let mean: f64 = out.data().iter().sum::<f64>() / n;
    for v in out.data_mut() {
        *v = *v - mean;
    }
    out
}

/// Separable circular Gaussian blur on a row-major grid.
pub fn blur_circular(field: &mut [f64], h: usize, w: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for d in -radius..=radius {
        kernel.push((-(d * d) as f64 / (2.0 * sigma * sigma)).exp());
    }
    let total: f64 = kernel.iter().sum();
    for v in &mut kernel {
        *v /= total;
    }
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w as isize {
            let mut s = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let cc = (c + k as isize - radius).rem_euclid(w as isize) as usize;
                s += field[r * w + cc] * kv;
            }
            tmp[r * w + c as usize] = s;
        }
    }
    for c in 0..w {
        for r in 0..h as isize {
            let mut s = 0.0;
            for (k, _kv) in kernel.iter().enumerate() {
                let rr = (r + k as isize - radius).rem_euclid(h as isize) as usize;
                s += tmp[rr * w + c];
            }
            field[r as usize * w + c] = s;
        }
    }
}

/// Cut an [H,W] image into non-overlapping p×p patches, flattened
/// row-major into [N, p²] in row-major patch order.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let (h, w) = (image.rows(), image.cols());
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} not divisible by patch size {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let n = gh * gw;
    let d = patch * patch;
    let mut out = vec![0.0; n * d];
    for gy in 0..gh {
        for gx in 0..gw {
            let t = gy * gw + gx;
            for py in 0..patch {
                for px in 0..patch {
                    out[t * d + py * patch + px] =
                        image.data()[(gy * patch + py) * w + (gx * patch + px)];
                }
            }
        }
    }
    Tensor::new(vec![n, d], out)
}

/// One pre-LN transformer block's parameters.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub attn: AttnVars,
    pub w_o: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub mlp1: LinVars,
    pub mlp2: LinVars,
}

/// Builtin patch encoder parameters.
#[derive(Clone, Debug)]
pub struct VisEncVars {
    pub embed: LinVars,
    pub pos: Var,
    pub blocks: Vec<BlockVars>,
    /// Final output norm, as in standard ViT feature extractors.
    pub ln_out_g: Var,
    pub ln_out_b: Var,
}

/// Builtin patch encoder: linear embedding + positional embedding +
/// pre-LN transformer blocks.
pub fn builtin_encode(g: &mut Graph, patches: Var, vars: &VisEncVars) -> Result<Var> {
    let emb = linear(g, patches, &vars.embed)?;
    let mut x = g.add(emb, vars.pos)?;
    for blk in &vars.blocks {
        let norm = layer_norm_affine(g, x, blk.ln1_g, blk.ln1_b)?;
        let d = g.value(norm).cols();
        let q = g.matmul(norm, blk.attn.w_q)?;
        let k = g.matmul(norm, blk.attn.w_k)?;
        let v = g.matmul(norm, blk.attn.w_v)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scaled = g.scale(scores, 1.0 / (d as f64).sqrt())?;
        let attn = g.softmax(scaled, 1)?;
        let pooled = g.matmul(attn, v)?;
        let proj = g.matmul(pooled, blk.w_o)?;
        x = g.add(x, proj)?;
        let norm2 = layer_norm_affine(g, x, blk.ln2_g, blk.ln2_b)?;
        let h1 = linear(g, norm2, &blk.mlp1)?;
        let a1 = g.relu(h1)?;
        let h2 = linear(g, a1, &blk.mlp2)?;
        x = g.add(x, h2)?;
    }
    layer_norm_affine(g, x, vars.ln_out_g, vars.ln_out_b)
}

// ── Precomputed feature files ────────────────────────────────────────

/// Write one precomputed-token file: a tensor archive holding "features"
/// [N, D_feat] plus the image id as a raw UTF-8 entry.
pub fn write_feature_file(path: &Path, image_id: &str, features: &Tensor) -> Result<()> {
    if features.rank() != 2 {
        return Err(Error::shape("write_feature_file", "features must be [N, D]"));
    }
    let mut entries = std::collections::BTreeMap::new();
    entries.insert("features".to_string(), EntryData::F32(features.clone()));
    entries.insert(
        "meta.image_id".to_string(),
        EntryData::Raw(image_id.as_bytes().to_vec()),
    );
    checkpoint::write_archive(path, &entries)
}

/// Read a feature file back as (image_id, features).
pub fn read_feature_file(path: &Path) -> Result<(String, Tensor)> {
    let entries = checkpoint::read_archive(path)?;
    let features = match entries.get("features") {
        Some(EntryData::F32(t)) => t.clone(),
        _ => {
            return Err(Error::Data(format!(
                "{} has no features entry",
                path.display()
            )))
        }
    };
    let id = match entries.get("meta.image_id") {
        Some(EntryData::Raw(bytes)) => String::from_utf8(bytes.clone())
            .map_err(|_| Error::Data("image id is not UTF-8".to_string()))?,
        _ => {
            return Err(Error::Data(format!(
                "{} has no meta.image_id entry",
                path.display()
            )))
        }
    };
    Ok((id, features))
}

/// Path of the feature file for one image id inside a feature directory.
pub fn feature_path(dir: &Path, image_id: &str) -> PathBuf {
    dir.join(format!("{image_id}.slts"))
}

/// Load precomputed tokens for an image id and validate them against the
/// expected token geometry.
pub fn load_precomputed(
    dir: &Path,
    image_id: &str,
    n: usize,
    d_feat: usize,
) -> Result<VisualTokens> {
    let path = feature_path(dir, image_id);
    let (id, features) = read_feature_file(&path)?;
    if id != image_id {
        return Err(Error::Data(format!(
            "feature file {} carries id {id}, expected {image_id}",
            path.display()
        )));
    }
    if features.shape() != [n, d_feat] {
        return Err(Error::Data(format!(
            "feature file {} has shape {:?}, expected [{n}, {d_feat}]",
            path.display(),
            features.shape()
        )));
    }
    check_token_norms(&features, "precomputed-file")?;
    Ok(VisualTokens {
        values: features,
        source: format!("precomputed:{image_id}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Precision, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn const_lin(g: &mut Graph, din: usize, dout: usize, rng: &mut ChaCha12Rng) -> LinVars {
        let w: Vec<f64> = (0..din * dout).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let b: Vec<f64> = (0..dout).map(|_| rng.gen_range(-0.1..0.1)).collect();
        LinVars {
            w: g.constant(Tensor::new(vec![din, dout], w).unwrap()),
            b: g.constant(Tensor::new(vec![dout], b).unwrap()),
        }
    }

    fn const_bn(g: &mut Graph, d: usize) -> BnVars {
        BnVars {
            gamma: g.constant(Tensor::ones(&[d])),
            beta: g.constant(Tensor::zeros(&[d])),
            running_mean: g.constant(Tensor::zeros(&[d])),
            running_var: g.constant(Tensor::ones(&[d])),
        }
    }

    fn const_attn(g: &mut Graph, d: usize, rng: &mut ChaCha12Rng) -> AttnVars {
        let mk = |g: &mut Graph, rng: &mut ChaCha12Rng| {
            let w: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-0.3..0.3)).collect();
            g.constant(Tensor::new(vec![d, d], w).unwrap())
        };
        AttnVars {
            w_q: mk(g, rng),
            w_k: mk(g, rng),
            w_v: mk(g, rng),
        }
    }

    fn scat_enc_vars(g: &mut Graph, d: usize, rng: &mut ChaCha12Rng) -> ScatEncVars {
        ScatEncVars {
            bn0: const_bn(g, d),
            conv1: const_lin(g, d, d, rng),
            bn1: const_bn(g, d),
            conv2: const_lin(g, d, d, rng),
            bn2: const_bn(g, d),
            attn: const_attn(g, d, rng),
        }
    }

    #[test]
    fn scattering_encode_preserves_shape() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let (n, d) = (196, 64);
        let mut g = Graph::new(Precision::F64);
        let vars = scat_enc_vars(&mut g, d, &mut rng);
        let data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = g.constant(Tensor::new(vec![n, d], data).unwrap());
        let mut stats = Vec::new();
        let y = scattering_encode(&mut g, x, &vars, "t", true, &mut stats).unwrap();
        assert_eq!(g.value(y).shape(), &[n, d]);
        assert_eq!(stats.len(), 3);
    }

    #[test]
    fn scattering_encode_handles_all_zero_input() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let (n, d) = (16, 8);
        let mut g = Graph::new(Precision::F64);
        let vars = scat_enc_vars(&mut g, d, &mut rng);
        let x = g.constant(Tensor::zeros(&[n, d]));
        let mut stats = Vec::new();
        let y = scattering_encode(&mut g, x, &vars, "t", true, &mut stats).unwrap();
        assert!(g.value(y).is_finite());
    }

    #[test]
    fn self_attention_is_uniform_for_identical_tokens() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let (n, d) = (6, 4);
        let mut g = Graph::new(Precision::F64);
        let a = const_attn(&mut g, d, &mut rng);
        let row: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut data = Vec::new();
        for _ in 0..n {
            data.extend_from_slice(&row);
        }
        let x = g.constant(Tensor::new(vec![n, d], data).unwrap());
        let y = self_attention_residual(&mut g, x, &a).unwrap();
        // identical tokens: attention rows are uniform 1/N, so every
        // output token is identical
        let t = g.value(y);
        for r in 1..n {
            for c in 0..d {
                assert!((t.at2(r, c) - t.at2(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn patchify_orders_pixels_row_major() {
        let img = Tensor::new(vec![4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        // token 0 is the top-left 2x2 patch
        assert_eq!(&p.data()[0..4], &[0.0, 1.0, 4.0, 5.0]);
        // token 3 is the bottom-right patch
        assert_eq!(&p.data()[12..16], &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn patchify_rejects_indivisible_sizes() {
        let img = Tensor::zeros(&[10, 10]);
        assert!(patchify(&img, 3).is_err());
    }

    #[test]
    fn builtin_constant_image_zero_pos_gives_identical_tokens() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let (h, patch, d) = (8, 2, 6);
        let n = (h / patch) * (h / patch);
        let img = preprocess_image(&Tensor::full(&[h, h], 2.0));
        let patches = patchify(&img, patch).unwrap();
        let mut g = Graph::new(Precision::F64);
        let embed = const_lin(&mut g, patch * patch, d, &mut rng);
        let pos = g.constant(Tensor::zeros(&[n, d]));
        let w_o = {
            let w: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-0.3..0.3)).collect();
            g.constant(Tensor::new(vec![d, d], w).unwrap())
        };
        let blocks = vec![BlockVars {
            ln1_g: g.constant(Tensor::ones(&[d])),
            ln1_b: g.constant(Tensor::zeros(&[d])),
            attn: const_attn(&mut g, d, &mut rng),
            w_o,
            ln2_g: g.constant(Tensor::ones(&[d])),
            ln2_b: g.constant(Tensor::zeros(&[d])),
            mlp1: const_lin(&mut g, d, 2 * d, &mut rng),
            mlp2: const_lin(&mut g, 2 * d, d, &mut rng),
        }];
        let ln_out_g = g.constant(Tensor::ones(&[d]));
        let ln_out_b = g.constant(Tensor::zeros(&[d]));
        let vars = VisEncVars {
            embed,
            pos,
            blocks,
            ln_out_g,
            ln_out_b,
        };
        let pv = g.input("patches", patches);
        let out = builtin_encode(&mut g, pv, &vars).unwrap();
        let t = g.value(out);
        assert_eq!(t.shape(), &[n, d]);
        for r in 1..n {
            for c in 0..d {
                assert!((t.at2(r, c) - t.at2(0, c)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn feature_file_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut feats = Tensor::zeros(&[9, 5]);
        for v in feats.data_mut() {
            *v = rng.gen_range(-1.0f32..1.0f32) as f64;
        }
        let path = feature_path(dir.path(), "000007");
        write_feature_file(&path, "000007", &feats).unwrap();
        let loaded = load_precomputed(dir.path(), "000007", 9, 5).unwrap();
        assert_eq!(loaded.values, feats);
        // second write of the loaded data is byte-identical
        let path2 = dir.path().join("again.slts");
        write_feature_file(&path2, "000007", &loaded.values).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn precomputed_shape_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let feats = Tensor::zeros(&[9, 5]);
        let path = feature_path(dir.path(), "x");
        write_feature_file(&path, "x", &feats).unwrap();
        assert!(load_precomputed(dir.path(), "x", 9, 6).is_err());
        assert!(load_precomputed(dir.path(), "x", 4, 5).is_err());
    }

    #[test]
    fn degenerate_norms_rejected() {
        let t = Tensor::full(&[2, 2], 1e5);
        assert!(check_token_norms(&t, "test").is_err());
    }

    #[test]
    fn gradients_reach_morlet_params_through_the_full_token_path() {
        use crate::numerics::{bind, grad_check, ParamStore};
        use crate::scattering::{
            gaussian_lowpass, kernel_spectrum, scattering_forward_graph, tokens_from_maps,
            BankVars, MorletVars, ScatterConfig,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let mut store = ParamStore::new();
        store.insert("scat.sigma[0,0]", Tensor::scalar(1.1));
        store.insert("scat.theta[0,0]", Tensor::scalar(0.4));
        store.insert("scat.xi[0,0]", Tensor::scalar(1.7));
        store.insert("scat.gamma[0,0]", Tensor::scalar(1.0));
        let mut img = Tensor::zeros(&[8, 8]);
        for v in img.data_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        let wdat: Vec<f64> = (0..2 * 3).map(|_| rng.gen_range(-0.5..0.5)).collect();
        store.insert("proj.w", Tensor::new(vec![2, 3], wdat).unwrap());
        store.insert("proj.b", Tensor::zeros(&[3]));
        let lp = gaussian_lowpass(7, 1.6);
        let cfg = ScatterConfig {
            scales: 1,
            orientations: 1,
            sigma0: 1.1,
            subsample: 2,
            support: Some(7),
        };
        let report = grad_check(
            |g, s| {
                let vars = MorletVars {
                    sigma: bind(g, s, "scat.sigma[0,0]")?,
                    theta: bind(g, s, "scat.theta[0,0]")?,
                    xi: bind(g, s, "scat.xi[0,0]")?,
                    gamma: bind(g, s, "scat.gamma[0,0]")?,
                };
                let bank = BankVars {
                    filters: vec![vars],
                    support: 7,
                    lowpass_spec: {
                        let spec = kernel_spectrum(&lp, 8, 8);
                        g.constant(spec)
                    },
                };
                let img_v = g.constant(img.clone());
                let maps = scattering_forward_graph(g, img_v, &bank, &cfg)?;
                let w = bind(g, s, "proj.w")?;
                let b = bind(g, s, "proj.b")?;
                let tok = tokens_from_maps(g, &maps, 16, w, b)?;
                let sq = g.mul(tok, tok)?;
                g.mean_all(sq)
            },
            &store,
            1e-5,
            1e-3,
        )
        .unwrap();
        assert!(report.all_pass(), "{:?}", report.entries);
    }
}
