//! Deterministic synthetic SAR-like scene generation and dataset
//! persistence.
//!
//! A scene is a clutter field (homogeneous, correlated texture, or
//! texture plus bright man-made-style rectangles), a scatterer-cluster
//! target placed uniformly at random and scaled to an exact
//! signal-to-clutter ratio, and multiplicative L-look gamma speckle.
//! Every draw derives from the per-scene seed, so datasets are a pure
//! function of (config, seed) and parallel generation equals serial.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::LabelMap;
use crate::numerics::tensor::Tensor;

/// Target footprint family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetShape {
    Rectangle,
    LShape,
    TShape,
}

impl TargetShape {
    pub fn id(self) -> u8 {
        match self {
            TargetShape::Rectangle => 0,
            TargetShape::LShape => 1,
            TargetShape::TShape => 2,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        Ok(match id {
            0 => TargetShape::Rectangle,
            1 => TargetShape::LShape,
            2 => TargetShape::TShape,
            _ => return Err(Error::Data(format!("unknown target shape id {id}"))),
        })
    }

    pub fn all() -> Vec<TargetShape> {
        vec![TargetShape::Rectangle, TargetShape::LShape, TargetShape::TShape]
    }
}

/// Background clutter family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClutterKind {
    Homogeneous,
    CorrelatedTexture,
    BrightStructures,
}

impl ClutterKind {
    pub fn id(self) -> u8 {
        match self {
            ClutterKind::Homogeneous => 0,
            ClutterKind::CorrelatedTexture => 1,
            ClutterKind::BrightStructures => 2,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        Ok(match id {
            0 => ClutterKind::Homogeneous,
            1 => ClutterKind::CorrelatedTexture,
            2 => ClutterKind::BrightStructures,
            _ => return Err(Error::Data(format!("unknown clutter kind id {id}"))),
        })
    }
}

/// Everything needed to generate one scene.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub target_shapes: Vec<TargetShape>,
    /// Requested signal-to-clutter ratio in dB, within [-5, 20].
    pub scr_db: f64,
    pub clutter_kind: ClutterKind,
    /// Speckle looks, >= 1. Infinity disables speckle.
    #[serde(
        serialize_with = "ser_looks",
        deserialize_with = "de_looks"
    )]
    pub looks: f64,
    pub seed: u64,
}

fn ser_looks<S: serde::Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_looks<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    use serde::Deserialize;
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum LooksRepr {
        Num(f64),
        Str(String),
    }
    match LooksRepr::deserialize(d)? {
        LooksRepr::Num(v) => Ok(v),
        LooksRepr::Str(s) if s == "inf" => Ok(f64::INFINITY),
        LooksRepr::Str(s) => s.parse::<f64>().map_err(serde::de::Error::custom),
    }
}

pub const SCR_DB_MIN: f64 = -5.0;
pub const SCR_DB_MAX: f64 = 20.0;
/// Allowed target area as a fraction of the scene.
pub const AREA_FRACTION_MIN: f64 = 0.01;
pub const AREA_FRACTION_MAX: f64 = 0.08;

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height != self.width {
            return Err(Error::Config(format!(
                "scene must be square, got {}x{}",
                self.height, self.width
            )));
        }
        if self.height < 32 {
            return Err(Error::Config("scene side must be >= 32 px".to_string()));
        }
        if !(SCR_DB_MIN..=SCR_DB_MAX).contains(&self.scr_db) {
            return Err(Error::Config(format!(
                "scr_db {} outside [{SCR_DB_MIN}, {SCR_DB_MAX}]",
                self.scr_db
            )));
        }
        if !(self.looks >= 1.0) {
            return Err(Error::Config(format!("looks {} must be >= 1", self.looks)));
        }
        if self.target_shapes.is_empty() {
            return Err(Error::Config("no target shapes configured".to_string()));
        }
        Ok(())
    }
}

/// One generated scene with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub image: Tensor,
    /// 0 = background, 1 = target.
    pub mask: LabelMap,
    pub config: SceneConfig,
    pub shape_used: TargetShape,
    /// SCR measured on the clean scene (before speckle), in dB.
    pub realized_scr_db: f64,
}

// ── Field helpers ────────────────────────────────────────────────────

/// Separable circular Gaussian blur.
fn blur_circular(field: &mut [f64], h: usize, w: usize, sigma: f64) {
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
    for r in 0..h as isize {
        for c in 0..w as isize {
            let mut s = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let cc = (c + k as isize - radius).rem_euclid(w as isize) as usize;
                s += field[r as usize * w + cc] * kv;
            }
            tmp[r as usize * w + c as usize] = s;
        }
    }
    for c in 0..w as isize {
        for r in 0..h as isize {
            let mut s = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let rr = (r + k as isize - radius).rem_euclid(h as isize) as usize;
                s += tmp[rr * w + c as usize] * kv;
            }
            field[r as usize * w + c as usize] = s;
        }
    }
}

/// Unit-mean lognormal texture with spatial correlation.
fn correlated_texture(h: usize, w: usize, rng: &mut ChaCha12Rng) -> Vec<f64> {
    let mut field: Vec<f64> = (0..h * w)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    blur_circular(&mut field, h, w, 3.0);
    // rescale to a fixed log-amplitude, then exponentiate with unit mean
    let mean = field.iter().sum::<f64>() / field.len() as f64;
    let std = (field.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / field.len() as f64)
        .sqrt()
        .max(1e-9);
    let tau = 0.5;
    field
        .iter()
        .map(|v| (tau * (v - mean) / std - tau * tau / 2.0).exp())
        .collect()
}

// ── Target rendering ─────────────────────────────────────────────────

struct Footprint {
    rows: usize,
    cols: usize,
    mask: Vec<bool>,
}

fn rect_footprint(rows: usize, cols: usize) -> Footprint {
    Footprint {
        rows,
        cols,
        mask: vec![true; rows * cols],
    }
}

fn l_footprint(rows: usize, cols: usize) -> Footprint {
    // vertical arm down the left, horizontal arm along the bottom
    let arm_r = (rows as f64 * 0.45).round().max(2.0) as usize;
    let arm_c = (cols as f64 * 0.45).round().max(2.0) as usize;
    let mut mask = vec![false; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            if c < arm_c || r >= rows - arm_r {
                mask[r * cols + c] = true;
            }
        }
    }
    Footprint { rows, cols, mask }
}

fn t_footprint(rows: usize, cols: usize) -> Footprint {
    // horizontal bar on top, stem down the middle
    let bar = (rows as f64 * 0.4).round().max(2.0) as usize;
    let stem = (cols as f64 * 0.4).round().max(2.0) as usize;
    let start = (cols - stem) / 2;
    let mut mask = vec![false; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            if r < bar || (c >= start && c < start + stem) {
                mask[r * cols + c] = true;
            }
        }
    }
    Footprint { rows, cols, mask }
}

/// Scatterer-cluster intensity profile over a footprint: a dim fill plus
/// a lattice of strong point scatterers with jitter. High-frequency
/// structure is what separates targets from smooth bright clutter in the
/// wavelet bands.
fn scatterer_profile(fp: &Footprint, rng: &mut ChaCha12Rng) -> Vec<f64> {
    let mut profile = vec![0.0; fp.rows * fp.cols];
    for r in 0..fp.rows {
        for c in 0..fp.cols {
            if fp.mask[r * fp.cols + c] {
                let lattice = r % 2 == 0 && c % 2 == 0;
                profile[r * fp.cols + c] = if lattice {
                    rng.gen_range(0.9..1.6)
                } else {
                    rng.gen_range(0.05..0.25)
                };
            }
        }
    }
    profile
}

// ── Core operations ──────────────────────────────────────────────────

/// Multiplicative L-look gamma speckle: out = clean ⊙ G with
/// G ~ Gamma(shape = L, scale = 1/L) i.i.d. (mean 1, variance 1/L).
pub fn speckle(clean: &Tensor, looks: f64, rng: &mut ChaCha12Rng) -> Result<Tensor> {
    if looks < 1.0 {
        return Err(Error::Config(format!("looks {looks} must be >= 1")));
    }
    if clean.data().iter().any(|&v| v < 0.0) {
        return Err(Error::Data("speckle input must be non-negative".to_string()));
    }
    if looks.is_infinite() {
        return Ok(clean.clone());
    }
    let gamma = Gamma::new(looks, 1.0 / looks)
        .map_err(|e| Error::Config(format!("bad gamma parameters: {e}")))?;
    let mut out = clean.clone();
    for v in out.data_mut() {
        *v *= gamma.sample(rng);
    }
    Ok(out)
}

/// Generate one scene deterministically from its config.
pub fn generate_scene(cfg: &SceneConfig) -> Result<SceneSample> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);

    // 1. clutter field, mean intensity ~1
    let mut image: Vec<f64> = match cfg.clutter_kind {
        ClutterKind::Homogeneous => vec![1.0; h * w],
        ClutterKind::CorrelatedTexture => correlated_texture(h, w, &mut rng),
        ClutterKind::BrightStructures => correlated_texture(h, w, &mut rng),
    };

    // 2. target footprint, sized into the allowed area fraction
    let shape = cfg.target_shapes[rng.gen_range(0..cfg.target_shapes.len())];
    let frac = rng.gen_range(0.035..0.075);
    let aspect = rng.gen_range(0.45..0.95);
    let area = frac * (h * w) as f64;
    let rows = (area * aspect).sqrt().round().max(4.0) as usize;
    let cols = (area / rows as f64).round().max(4.0) as usize;
    let fp = match shape {
        TargetShape::Rectangle => rect_footprint(rows, cols),
        TargetShape::LShape => l_footprint(rows, cols),
        TargetShape::TShape => t_footprint(rows, cols),
    };
    let margin = 2usize;
    if fp.rows + 2 * margin >= h || fp.cols + 2 * margin >= w {
        return Err(Error::Config(format!(
            "target footprint {}x{} does not fit in {h}x{w}",
            fp.rows, fp.cols
        )));
    }
    let top = rng.gen_range(margin..h - fp.rows - margin);
    let left = rng.gen_range(margin..w - fp.cols - margin);
    let mut mask = vec![0u32; h * w];
    for r in 0..fp.rows {
        for c in 0..fp.cols {
            if fp.mask[r * fp.cols + c] {
                mask[(top + r) * w + (left + c)] = 1;
            }
        }
    }

    // 3. bright structures (after placement so they avoid the target)
    if cfg.clutter_kind == ClutterKind::BrightStructures {
        let count = rng.gen_range(1..=3);
        let mut placed = 0;
        let mut attempts = 0;
        while placed < count && attempts < 50 {
            attempts += 1;
            let lo_h = (h / 14).max(4);
            let lo_w = (w / 14).max(4);
            let bh = rng.gen_range(lo_h..(h / 4).max(lo_h + 1));
            let bw = rng.gen_range(lo_w..(w / 4).max(lo_w + 1));
            let by = rng.gen_range(0..h - bh);
            let bx = rng.gen_range(0..w - bw);
            let gain: f64 = rng.gen_range(4.0..12.0);
            let overlaps = (by..by + bh)
                .any(|r| (bx..bx + bw).any(|c| mask[r * w + c] == 1));
            if overlaps {
                continue;
            }
            for r in by..by + bh {
                for c in bx..bx + bw {
                    image[r * w + c] *= gain;
                }
            }
            placed += 1;
        }
    }

    // 4. exact SCR: replace target pixels with a scaled scatterer profile
    let profile = scatterer_profile(&fp, &mut rng);
    let bg_power = {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (k, &m) in mask.iter().enumerate() {
            if m == 0 {
                sum += image[k];
                count += 1;
            }
        }
        sum / count as f64
    };
    let target_mean_goal = bg_power * 10f64.powf(cfg.scr_db / 10.0);
    let profile_mean = {
        let vals: Vec<f64> = fp
            .mask
            .iter()
            .zip(&profile)
            .filter(|(m, _)| **m)
            .map(|(_, &v)| v)
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    let gain = target_mean_goal / profile_mean;
    for r in 0..fp.rows {
        for c in 0..fp.cols {
            if fp.mask[r * fp.cols + c] {
                image[(top + r) * w + (left + c)] = profile[r * fp.cols + c] * gain;
            }
        }
    }

    // realized SCR on the clean scene
    let (mut ts, mut tn, mut bs, mut bn) = (0.0, 0usize, 0.0, 0usize);
    for (k, &m) in mask.iter().enumerate() {
        if m == 1 {
            ts += image[k];
            tn += 1;
        } else {
            bs += image[k];
            bn += 1;
        }
    }
    let realized_scr_db = 10.0 * ((ts / tn as f64) / (bs / bn as f64)).log10();

    // 5. speckle
    let clean = Tensor::new(vec![h, w], image)?;
    let mut speckled = speckle(&clean, cfg.looks, &mut rng)?;
    // storage is f32; round now so write→read→compare is bit-exact
    speckled.round_f32();

    Ok(SceneSample {
        image: speckled,
        mask: LabelMap::new(h, w, mask)?,
        config: cfg.clone(),
        shape_used: shape,
        realized_scr_db,
    })
}

// ── Presets ──────────────────────────────────────────────────────────

/// The two dataset regimes used by the two-stage training protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Homogeneous clutter, 4-look speckle, comfortable SCR.
    Stage1Simple,
    /// Correlated texture and bright structures, 1–4 looks, lower SCR.
    Stage2Complex,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "stage1-simple" => Ok(Preset::Stage1Simple),
            "stage2-complex" => Ok(Preset::Stage2Complex),
            _ => Err(Error::Config(format!(
                "unknown preset {s}; expected stage1-simple or stage2-complex"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Stage1Simple => "stage1-simple",
            Preset::Stage2Complex => "stage2-complex",
        }
    }
}

/// Per-scene configs for a preset; every field derives from the master
/// seed.
pub fn preset_configs(preset: Preset, count: usize, master_seed: u64, size: usize) -> Vec<SceneConfig> {
    (0..count)
        .map(|idx| {
            let seed = crate::seed::derive_seed_n(master_seed, "scene", idx as u64);
            let mut rng = ChaCha12Rng::seed_from_u64(crate::seed::derive_seed_n(
                master_seed,
                "scene-cfg",
                idx as u64,
            ));
            match preset {
                Preset::Stage1Simple => SceneConfig {
                    height: size,
                    width: size,
                    target_shapes: TargetShape::all(),
                    scr_db: rng.gen_range(6.0..12.0),
                    clutter_kind: ClutterKind::Homogeneous,
                    looks: 4.0,
                    seed,
                },
                Preset::Stage2Complex => SceneConfig {
                    height: size,
                    width: size,
                    target_shapes: TargetShape::all(),
                    scr_db: rng.gen_range(6.0..12.0),
                    clutter_kind: if rng.gen_bool(0.5) {
                        ClutterKind::CorrelatedTexture
                    } else {
                        ClutterKind::BrightStructures
                    },
                    looks: rng.gen_range(1..=4) as f64,
                    seed,
                },
            }
        })
        .collect()
}

/// Generate a batch of scenes in parallel; output order and content are
/// identical to serial generation because every scene derives only from
/// its own config.
pub fn generate_batch(configs: &[SceneConfig]) -> Result<Vec<SceneSample>> {
    configs.par_iter().map(generate_scene).collect()
}

// ── Dataset persistence ──────────────────────────────────────────────

pub const DATASET_MAGIC: &[u8; 4] = b"SSAR";
pub const DATASET_VERSION: u32 = 1;

/// Write samples as a binary container: header, then per sample the
/// config block, the image as little-endian f32, and the mask as packed
/// bits row-major.
pub fn write_dataset(samples: &[SceneSample], path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for s in samples {
        let cfg = &s.config;
        buf.extend_from_slice(&(cfg.height as u32).to_le_bytes());
        buf.extend_from_slice(&(cfg.width as u32).to_le_bytes());
        buf.push(cfg.target_shapes.len() as u8);
        for sh in &cfg.target_shapes {
            buf.push(sh.id());
        }
        buf.extend_from_slice(&cfg.scr_db.to_le_bytes());
        buf.push(cfg.clutter_kind.id());
        buf.extend_from_slice(&cfg.looks.to_le_bytes());
        buf.extend_from_slice(&cfg.seed.to_le_bytes());
        buf.push(s.shape_used.id());
        buf.extend_from_slice(&s.realized_scr_db.to_le_bytes());
        for &v in s.image.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let mut byte = 0u8;
        let mut bit = 0;
        for &l in &s.mask.labels {
            if l != 0 {
                byte |= 1 << bit;
            }
            bit += 1;
            if bit == 8 {
                buf.push(byte);
                byte = 0;
                bit = 0;
            }
        }
        if bit > 0 {
            buf.push(byte);
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)?.write_all(&buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Corrupt {
                path: self.path.to_path_buf(),
                offset: self.pos as u64,
                detail: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Read a dataset written by [`write_dataset`].
pub fn read_dataset(path: &Path) -> Result<Vec<SceneSample>> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    let mut c = Cursor {
        buf: &raw,
        pos: 0,
        path,
    };
    if c.take(4, "magic")? != DATASET_MAGIC {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            offset: 0,
            detail: "bad magic".to_string(),
        });
    }
    let version = c.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            offset: 4,
            detail: format!("unsupported version {version}"),
        });
    }
    let count = c.u32("sample count")? as usize;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let height = c.u32("height")? as usize;
        let width = c.u32("width")? as usize;
        let n_shapes = c.u8("shape count")? as usize;
        let mut target_shapes = Vec::with_capacity(n_shapes);
        for _ in 0..n_shapes {
            target_shapes.push(TargetShape::from_id(c.u8("shape id")?)?);
        }
        let scr_db = c.f64("scr")?;
        let clutter_kind = ClutterKind::from_id(c.u8("clutter kind")?)?;
        let looks = c.f64("looks")?;
        let seed = c.u64("seed")?;
        let shape_used = TargetShape::from_id(c.u8("shape used")?)?;
        let realized_scr_db = c.f64("realized scr")?;
        let hw = height * width;
        let img_bytes = c.take(4 * hw, "image")?;
        let data: Vec<f64> = img_bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let mask_bytes = c.take(hw.div_ceil(8), "mask")?;
        let mut labels = vec![0u32; hw];
        for (k, label) in labels.iter_mut().enumerate() {
            if mask_bytes[k / 8] >> (k % 8) & 1 == 1 {
                *label = 1;
            }
        }
        samples.push(SceneSample {
            image: Tensor::new(vec![height, width], data)?,
            mask: LabelMap::new(height, width, labels)?,
            config: SceneConfig {
                height,
                width,
                target_shapes,
                scr_db,
                clutter_kind,
                looks,
                seed,
            },
            shape_used,
            realized_scr_db,
        });
    }
    if c.pos != raw.len() {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            offset: c.pos as u64,
            detail: format!("{} trailing bytes", raw.len() - c.pos),
        });
    }
    Ok(samples)
}

// ── Portable map export ──────────────────────────────────────────────

/// Binary P5 graymap bytes.
pub fn pgm_bytes(gray: &[u8], width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

/// Binary P6 pixmap bytes (rgb interleaved).
pub fn ppm_bytes(rgb: &[u8], width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Export a binary mask as a P5 graymap (target = white).
pub fn write_mask_pgm(mask: &LabelMap, path: &Path) -> Result<()> {
    let gray: Vec<u8> = mask
        .labels
        .iter()
        .map(|&l| if l != 0 { 255 } else { 0 })
        .collect();
    std::fs::write(path, pgm_bytes(&gray, mask.width, mask.height))?;
    Ok(())
}

/// Normalize an intensity image into a P5 graymap.
pub fn write_image_pgm(image: &Tensor, path: &Path) -> Result<()> {
    let max = image.data().iter().cloned().fold(f64::MIN, f64::max);
    let min = image.data().iter().cloned().fold(f64::MAX, f64::min);
    let span = (max - min).max(1e-12);
    let gray: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| (255.0 * (v - min) / span).round() as u8)
        .collect();
    std::fs::write(path, pgm_bytes(&gray, image.cols(), image.rows()))?;
    Ok(())
}
