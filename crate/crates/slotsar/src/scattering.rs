//! Learnable Morlet filter bank and first-order wavelet scattering.
//!
//! A filter is ψ(u) = exp(−‖D_γ R_θ u‖² / 2σ²) · (exp(iξu′) − β) with
//! u′ = u₁cosθ + u₂sinθ and β chosen on the discrete grid so the filter
//! sums to zero. All four parameters (σ, θ, ξ, γ) are trainable; β is
//! recomputed from them on every forward pass.
//!
//! Scattering maps are first order: channel c = φ ⋆ |I ⋆ ψ_c| pooled down
//! by the subsample factor, plus one final φ ⋆ I channel, giving
//! C = scales·orientations + 1 channels. Filtering is circular via FFT.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::fft;
use crate::numerics::graph::{Graph, Var};
use crate::numerics::ops;
use crate::numerics::tensor::{Precision, Tensor};

/// Parameters of one Morlet wavelet.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MorletParams {
    /// Scale in pixels, > 0.
    pub sigma: f64,
    /// Orientation in radians.
    pub theta: f64,
    /// Spatial frequency in radians/pixel, >= 0.
    pub xi: f64,
    /// Aspect ratio, > 0.
    pub gamma: f64,
}

impl MorletParams {
    pub fn validate(&self) -> Result<()> {
        if self.sigma <= 0.0 {
            return Err(Error::Param(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if self.gamma <= 0.0 {
            return Err(Error::Param(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if self.xi < 0.0 {
            return Err(Error::Param(format!("xi must be >= 0, got {}", self.xi)));
        }
        Ok(())
    }
}

/// Static configuration of the scattering front end.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ScatterConfig {
    /// Number of dyadic scales J.
    pub scales: usize,
    /// Orientations per scale L.
    pub orientations: usize,
    /// Base scale σ₀ in pixels.
    pub sigma0: f64,
    /// Spatial pooling factor from input to feature maps.
    pub subsample: usize,
    /// Band-pass support override (odd); derived from σ_max when absent.
    pub support: Option<usize>,
}

impl Default for ScatterConfig {
    fn default() -> Self {
        ScatterConfig {
            scales: 3,
            orientations: 6,
            sigma0: 0.8,
            subsample: 8,
            support: None,
        }
    }
}

impl ScatterConfig {
    /// Band-pass channel count plus the low-pass channel.
    pub fn channels(&self) -> usize {
        self.scales * self.orientations + 1
    }

    pub fn band_support(&self) -> usize {
        match self.support {
            Some(s) => s,
            None => {
                let sigma_max = self.sigma0 * (1 << (self.scales - 1)) as f64;
                next_odd((8.0 * sigma_max).ceil() as usize).max(7)
            }
        }
    }

    pub fn lowpass_sigma(&self) -> f64 {
        0.8 * self.subsample as f64
    }

    pub fn lowpass_support(&self) -> usize {
        next_odd((6.0 * self.lowpass_sigma()).ceil() as usize).max(7)
    }
}

fn next_odd(n: usize) -> usize {
    if n % 2 == 0 {
        n + 1
    } else {
        n
    }
}

/// A bank of Morlet parameters plus the fixed Gaussian averaging filter.
#[derive(Clone, Debug)]
pub struct FilterBank {
    pub params: Vec<MorletParams>,
    pub support: usize,
    /// Real Gaussian averaging filter, normalized to sum to 1.
    pub lowpass: Tensor,
    pub config: ScatterConfig,
}

/// Dyadic initialization: σ_j = σ₀·2^j, ξ_j = 3π/(4·2^j), θ_l = πl/L,
/// γ = 4/L, ordered scale-major.
pub fn init_bank(config: &ScatterConfig) -> Result<FilterBank> {
    if config.scales < 1 || config.orientations < 1 {
        return Err(Error::Config(
            "scattering needs scales >= 1 and orientations >= 1".to_string(),
        ));
    }
    let mut params = Vec::with_capacity(config.scales * config.orientations);
    for j in 0..config.scales {
        for l in 0..config.orientations {
            params.push(MorletParams {
                sigma: config.sigma0 * (1u64 << j) as f64,
                theta: PI * l as f64 / config.orientations as f64,
                xi: 3.0 * PI / (4.0 * (1u64 << j) as f64),
                gamma: 4.0 / config.orientations as f64,
            });
        }
    }
    Ok(FilterBank {
        params,
        support: config.band_support(),
        lowpass: gaussian_lowpass(config.lowpass_support(), config.lowpass_sigma()),
        config: config.clone(),
    })
}

/// Normalized Gaussian on an odd support grid.
pub fn gaussian_lowpass(support: usize, sigma: f64) -> Tensor {
    let half = (support / 2) as isize;
    let mut data = Vec::with_capacity(support * support);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for r in -half..=half {
        for c in -half..=half {
            data.push((-((r * r + c * c) as f64) * inv).exp());
        }
    }
    let total: f64 = data.iter().sum();
    for v in &mut data {
        *v /= total;
    }
    Tensor::new(vec![support, support], data).unwrap()
}

/// Grid coordinate constants for an odd support. u₁ is the horizontal
/// offset (column), u₂ the vertical offset (row), both centered at 0.
fn grid_coords(support: usize) -> (Tensor, Tensor) {
    let half = (support / 2) as isize;
    let mut u1 = Vec::with_capacity(support * support);
    let mut u2 = Vec::with_capacity(support * support);
    for r in -half..=half {
        for c in -half..=half {
            u1.push(c as f64);
            u2.push(r as f64);
        }
    }
    (
        Tensor::new(vec![support, support], u1).unwrap(),
        Tensor::new(vec![support, support], u2).unwrap(),
    )
}

/// Graph handles for the trainable wavelet parameters of one filter.
#[derive(Clone, Copy, Debug)]
pub struct MorletVars {
    pub sigma: Var,
    pub theta: Var,
    pub xi: Var,
    pub gamma: Var,
}

/// Build one discretized complex filter [2,S,S] from scalar parameter
/// nodes. β is computed on the grid so the filter sums to zero exactly.
pub fn build_filter_graph(
    g: &mut Graph,
    p: MorletVars,
    support: usize,
) -> Result<Var> {
    if support < 7 || support % 2 == 0 {
        return Err(Error::Config(format!(
            "filter support must be odd and >= 7, got {support}"
        )));
    }
    let sigma_v = g.value(p.sigma).item();
    let gamma_v = g.value(p.gamma).item();
    if sigma_v <= 0.0 {
        return Err(Error::Param(format!("sigma must be > 0, got {sigma_v}")));
    }
    if gamma_v <= 0.0 {
        return Err(Error::Param(format!("gamma must be > 0, got {gamma_v}")));
    }
    let (u1t, u2t) = grid_coords(support);
    let u1 = g.constant(u1t);
    let u2 = g.constant(u2t);
    let ct = g.cos(p.theta)?;
    let st = g.sin(p.theta)?;
    // rotated coordinates: r1 = u₁cosθ + u₂sinθ (this is u′), r2 = −u₁sinθ + u₂cosθ
    let u1c = g.mul(u1, ct)?;
    let u2s = g.mul(u2, st)?;
    let r1 = g.add(u1c, u2s)?;
    let u1s = g.mul(u1, st)?;
    let u2c = g.mul(u2, ct)?;
    let nu1s = g.neg(u1s)?;
    let r2 = g.add(nu1s, u2c)?;
    // envelope exp(−(r1² + γ²r2²)/(2σ²))
    let r1sq = g.mul(r1, r1)?;
    let gsq = g.mul(p.gamma, p.gamma)?;
    let r2sq = g.mul(r2, r2)?;
    let gr2 = g.mul(r2sq, gsq)?;
    let quad = g.add(r1sq, gr2)?;
    let ssq = g.mul(p.sigma, p.sigma)?;
    let two_ssq = g.scale(ssq, 2.0)?;
    let inv = g.recip(two_ssq)?;
    let scaled = g.mul(quad, inv)?;
    let nscaled = g.neg(scaled)?;
    let env = g.exp(nscaled)?;
    // carrier exp(iξu′)
    let phase = g.mul(r1, p.xi)?;
    let cph = g.cos(phase)?;
    let sph = g.sin(phase)?;
    // β = Σ env·exp(iξu′) / Σ env
    let env_sum = g.sum_all(env)?;
    let ec = g.mul(env, cph)?;
    let es = g.mul(env, sph)?;
    let num_re = g.sum_all(ec)?;
    let num_im = g.sum_all(es)?;
    let beta_re = g.div(num_re, env_sum)?;
    let beta_im = g.div(num_im, env_sum)?;
    // ψ = env · (carrier − β)
    let dre = g.sub(cph, beta_re)?;
    let dim = g.sub(sph, beta_im)?;
    let psi_re = g.mul(env, dre)?;
    let psi_im = g.mul(env, dim)?;
    g.pack_complex(psi_re, psi_im)
}

/// Discretize one filter from plain parameters.
pub fn build_filter(p: &MorletParams, support: usize) -> Result<Tensor> {
    p.validate()?;
    let mut g = Graph::new(Precision::F64);
    let vars = MorletVars {
        sigma: g.constant(Tensor::scalar(p.sigma)),
        theta: g.constant(Tensor::scalar(p.theta)),
        xi: g.constant(Tensor::scalar(p.xi)),
        gamma: g.constant(Tensor::scalar(p.gamma)),
    };
    let v = build_filter_graph(&mut g, vars, support)?;
    Ok(g.value(v).clone())
}

impl FilterBank {
    /// Materialize every band-pass filter.
    pub fn filters(&self) -> Result<Vec<Tensor>> {
        self.params
            .iter()
            .map(|p| build_filter(p, self.support))
            .collect()
    }

    /// (|Σψ|, Σ|ψ|) of a discretized complex filter.
    pub fn zero_mean_defect(filter: &Tensor) -> (f64, f64) {
        let hw = filter.numel() / 2;
        let (re, im) = filter.data().split_at(hw);
        let sum_re: f64 = re.iter().sum();
        let sum_im: f64 = im.iter().sum();
        let abs_sum = (sum_re * sum_re + sum_im * sum_im).sqrt();
        let total: f64 = re
            .iter()
            .zip(im)
            .map(|(&r, &i)| (r * r + i * i).sqrt())
            .sum();
        (abs_sum, total)
    }
}

/// Precomputed spectrum of a real kernel embedded into an H×W grid.
pub fn kernel_spectrum(kernel: &Tensor, h: usize, w: usize) -> Tensor {
    let s = kernel.rows();
    let mut packed = vec![0.0; 2 * s * s];
    packed[..s * s].copy_from_slice(kernel.data());
    let packed = Tensor::new(vec![2, s, s], packed).unwrap();
    let embedded = ops::embed_kernel(&packed, h, w);
    let mut buf = fft::planes_to_complex(embedded.data(), h * w);
    fft::fft2d(&mut buf, h, w, false);
    Tensor::new(vec![2, h, w], fft::complex_to_planes(&buf)).unwrap()
}

/// Graph handles for a whole trainable bank.
pub struct BankVars {
    pub filters: Vec<MorletVars>,
    pub support: usize,
    /// Constant spectrum of the averaging filter on the image grid.
    pub lowpass_spec: Var,
}

impl BankVars {
    /// Bind a fixed (non-trainable) bank onto a graph.
    pub fn from_bank(g: &mut Graph, bank: &FilterBank, h: usize, w: usize) -> Result<Self> {
        let lp = kernel_spectrum(&bank.lowpass, h, w);
        let lowpass_spec = g.constant(lp);
        let filters = bank
            .params
            .iter()
            .map(|p| MorletVars {
                sigma: g.constant(Tensor::scalar(p.sigma)),
                theta: g.constant(Tensor::scalar(p.theta)),
                xi: g.constant(Tensor::scalar(p.xi)),
                gamma: g.constant(Tensor::scalar(p.gamma)),
            })
            .collect();
        Ok(BankVars {
            filters,
            support: bank.support,
            lowpass_spec,
        })
    }
}

/// First-order scattering of an [H,W] image node.
///
/// Returns scales·orientations band-pass maps followed by the low-pass
/// map, each pooled to [H/subsample, W/subsample].
pub fn scattering_forward_graph(
    g: &mut Graph,
    image: Var,
    bank: &BankVars,
    cfg: &ScatterConfig,
) -> Result<Vec<Var>> {
    let t = g.value(image);
    if t.rank() != 2 {
        return Err(Error::shape("scattering_forward", "image must be 2-d"));
    }
    let (h, w) = (t.rows(), t.cols());
    if h < bank.support || w < bank.support {
        return Err(Error::Config(format!(
            "image {h}x{w} smaller than filter support {}",
            bank.support
        )));
    }
    if h % cfg.subsample != 0 || w % cfg.subsample != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} not divisible by subsample {}",
            cfg.subsample
        )));
    }
    let zeros = g.constant(Tensor::zeros(&[h, w]));
    let ic = g.pack_complex(image, zeros)?;
    let spec = g.fft2d(ic, false)?;
    let mut out = Vec::with_capacity(bank.filters.len() + 1);
    for &fv in &bank.filters {
        let psi = build_filter_graph(g, fv, bank.support)?;
        let kfull = g.embed_kernel(psi, h, w)?;
        let kspec = g.fft2d(kfull, false)?;
        let prod = g.complex_mul(spec, kspec)?;
        let conv = g.fft2d(prod, true)?;
        let m = g.modulus(conv)?;
        let mzeros = g.constant(Tensor::zeros(&[h, w]));
        let mc = g.pack_complex(m, mzeros)?;
        let mspec = g.fft2d(mc, false)?;
        let smooth = g.complex_mul(mspec, bank.lowpass_spec)?;
        let sm = g.fft2d(smooth, true)?;
        let re = g.complex_real(sm)?;
        out.push(g.avg_pool2d(re, cfg.subsample)?);
    }
    let smooth0 = g.complex_mul(spec, bank.lowpass_spec)?;
    let sm0 = g.fft2d(smooth0, true)?;
    let re0 = g.complex_real(sm0)?;
    out.push(g.avg_pool2d(re0, cfg.subsample)?);
    Ok(out)
}

/// Scattering feature maps of a plain image through a fixed bank.
pub fn scattering_apply(image: &Tensor, bank: &FilterBank) -> Result<Vec<Tensor>> {
    let mut g = Graph::new(Precision::F64);
    let img = g.constant(image.clone());
    let bv = BankVars::from_bank(&mut g, bank, image.rows(), image.cols())?;
    let maps = scattering_forward_graph(&mut g, img, &bv, &bank.config)?;
    Ok(maps.into_iter().map(|v| g.value(v).clone()).collect())
}

/// Resize feature maps to the token grid, project channels to `d_s`, and
/// flatten row-major into [N, d_s].
pub fn tokens_from_maps(
    g: &mut Graph,
    maps: &[Var],
    n_tokens: usize,
    proj_w: Var,
    proj_b: Var,
) -> Result<Var> {
    let side = (n_tokens as f64).sqrt().round() as usize;
    if side * side != n_tokens {
        return Err(Error::Config(format!(
            "token count {n_tokens} is not a perfect square"
        )));
    }
    if maps.is_empty() {
        return Err(Error::shape("tokens_from_maps", "no feature maps"));
    }
    let mut cols = Vec::with_capacity(maps.len());
    for &m in maps {
        let (h, w) = {
            let t = g.value(m);
            (t.rows(), t.cols())
        };
        let resized = if h == side && w == side {
            m
        } else if h % side == 0 && w % side == 0 && h / side == w / side {
            g.avg_pool2d(m, h / side)?
        } else {
            g.bilinear_resize(m, side, side)?
        };
        cols.push(g.reshape(resized, &[n_tokens, 1])?);
    }
    let stacked = g.concat_cols(&cols)?;
    let projected = g.matmul(stacked, proj_w)?;
    g.add_row_vec(projected, proj_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn default_params() -> MorletParams {
        MorletParams {
            sigma: 1.4,
            theta: 0.7,
            xi: 2.0,
            gamma: 0.8,
        }
    }

    #[test]
    fn filters_are_zero_mean_for_any_params() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..20 {
            let p = MorletParams {
                sigma: rng.gen_range(0.5..4.0),
                theta: rng.gen_range(0.0..PI),
                xi: rng.gen_range(0.0..3.0),
                gamma: rng.gen_range(0.3..2.0),
            };
            let f = build_filter(&p, 15).unwrap();
            let (abs_sum, total) = FilterBank::zero_mean_defect(&f);
            assert!(abs_sum <= 1e-6 * total.max(1e-300), "{abs_sum} vs {total}");
        }
    }

    #[test]
    fn quarter_turn_rotates_the_grid() {
        // γ=1, θ=π/2 equals the θ=0 filter evaluated on a 90°-rotated grid
        let s = 11;
        let p0 = MorletParams {
            sigma: 1.5,
            theta: 0.0,
            xi: 1.8,
            gamma: 1.0,
        };
        let p90 = MorletParams { theta: PI / 2.0, ..p0 };
        let f0 = build_filter(&p0, s).unwrap();
        let f90 = build_filter(&p90, s).unwrap();
        let half = (s / 2) as isize;
        let idx = |r: isize, c: isize| ((r + half) as usize) * s + (c + half) as usize;
        let ss = s * s;
        // ψ_{π/2}(u1,u2) == ψ_0(u2, −u1): at grid point (row r = u2, col c = u1)
        for r in -half..=half {
            for c in -half..=half {
                // ψ_0 evaluated at (u1', u2') = (u2, −u1) sits at row −u1, col u2
                let rot = idx(-c, r);
                let here = idx(r, c);
                assert!((f90.data()[here] - f0.data()[rot]).abs() < 1e-9);
                assert!((f90.data()[ss + here] - f0.data()[ss + rot]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_frequency_filter_vanishes() {
        let p = MorletParams {
            xi: 0.0,
            ..default_params()
        };
        let f = build_filter(&p, 9).unwrap();
        assert!(f.data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn invalid_params_rejected() {
        let p = MorletParams {
            sigma: 0.0,
            ..default_params()
        };
        assert!(build_filter(&p, 9).is_err());
        let p = MorletParams {
            gamma: -1.0,
            ..default_params()
        };
        assert!(build_filter(&p, 9).is_err());
    }

    #[test]
    fn bank_initialization_follows_dyadic_convention() {
        let cfg = ScatterConfig {
            scales: 2,
            orientations: 4,
            sigma0: 0.8,
            subsample: 2,
            support: Some(9),
        };
        let bank = init_bank(&cfg).unwrap();
        assert_eq!(bank.params.len(), 8);
        // independent re-derivation of the initialization formulas
        for j in 0..2 {
            for l in 0..4 {
                let p = &bank.params[j * 4 + l];
                assert_eq!(p.sigma, 0.8 * f64::powi(2.0, j as i32));
                assert_eq!(p.theta, PI * l as f64 / 4.0);
                assert_eq!(p.xi, 3.0 * PI / (4.0 * f64::powi(2.0, j as i32)));
                assert_eq!(p.gamma, 1.0);
            }
        }
        let single = init_bank(&ScatterConfig {
            scales: 1,
            orientations: 1,
            ..cfg
        })
        .unwrap();
        assert_eq!(single.params.len(), 1);
        assert_eq!(single.params[0].theta, 0.0);
    }

    #[test]
    fn lowpass_sums_to_one() {
        let lp = gaussian_lowpass(11, 1.5);
        let s: f64 = lp.data().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    fn small_cfg() -> ScatterConfig {
        ScatterConfig {
            scales: 1,
            orientations: 2,
            sigma0: 1.0,
            subsample: 1,
            support: Some(7),
        }
    }

    #[test]
    fn constant_image_excites_only_the_lowpass_channel() {
        let cfg = small_cfg();
        let bank = init_bank(&cfg).unwrap();
        let img = Tensor::full(&[16, 16], 3.7);
        let maps = scattering_apply(&img, &bank).unwrap();
        assert_eq!(maps.len(), cfg.channels());
        for m in &maps[..maps.len() - 1] {
            for &v in m.data() {
                assert!(v.abs() <= 1e-6 * 3.7, "bandpass leaked {v}");
            }
        }
        let lp = maps.last().unwrap();
        for &v in lp.data() {
            assert!((v - 3.7).abs() < 1e-9);
        }
    }

    /// Direct O(n⁴) circular convolution, the oracle for the FFT path.
    fn direct_circ_conv(a: &Tensor, kernel: &Tensor, support: usize) -> Tensor {
        let (h, w) = (a.rows(), a.cols());
        let half = (support / 2) as isize;
        let mut out = Tensor::zeros(&[h, w]);
        for r in 0..h as isize {
            for c in 0..w as isize {
                let mut s = 0.0;
                for dr in -half..=half {
                    for dc in -half..=half {
                        let sr = (r - dr).rem_euclid(h as isize) as usize;
                        let sc = (c - dc).rem_euclid(w as isize) as usize;
                        let kv = kernel.data()
                            [((dr + half) as usize) * support + (dc + half) as usize];
                        s += a.data()[sr * w + sc] * kv;
                    }
                }
                out.data_mut()[(r as usize) * w + c as usize] = s;
            }
        }
        out
    }

    #[test]
    fn fft_path_matches_direct_convolution_oracle() {
        let cfg = small_cfg();
        let bank = init_bank(&cfg).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let mut img = Tensor::zeros(&[12, 12]);
        for v in img.data_mut() {
            *v = rng.gen_range(0.0..2.0);
        }
        let maps = scattering_apply(&img, &bank).unwrap();

        let s = bank.support;
        for (ci, p) in bank.params.iter().enumerate() {
            let f = build_filter(p, s).unwrap();
            let ss = s * s;
            let fre = Tensor::new(vec![s, s], f.data()[..ss].to_vec()).unwrap();
            let fim = Tensor::new(vec![s, s], f.data()[ss..].to_vec()).unwrap();
            let yre = direct_circ_conv(&img, &fre, s);
            let yim = direct_circ_conv(&img, &fim, s);
            let mut m = Tensor::zeros(&[12, 12]);
            for k in 0..144 {
                m.data_mut()[k] = (yre.data()[k].powi(2) + yim.data()[k].powi(2)).sqrt();
            }
            let lp = &bank.lowpass;
            let expect = direct_circ_conv(&m, lp, lp.rows());
            assert!(maps[ci].max_abs_diff(&expect) < 1e-9);
        }
    }

    #[test]
    fn centered_delta_reproduces_smoothed_filter_modulus() {
        let cfg = small_cfg();
        let bank = init_bank(&cfg).unwrap();
        let mut img = Tensor::zeros(&[14, 14]);
        img.data_mut()[7 * 14 + 7] = 1.0;
        let maps = scattering_apply(&img, &bank).unwrap();

        let s = bank.support;
        let half = (s / 2) as isize;
        for (ci, p) in bank.params.iter().enumerate() {
            let f = build_filter(p, s).unwrap();
            let ss = s * s;
            // |ψ| placed at the delta location on the image grid
            let mut m = Tensor::zeros(&[14, 14]);
            for dr in -half..=half {
                for dc in -half..=half {
                    let k = ((dr + half) as usize) * s + (dc + half) as usize;
                    let mag = (f.data()[k].powi(2) + f.data()[ss + k].powi(2)).sqrt();
                    let rr = (7 + dr).rem_euclid(14) as usize;
                    let cc = (7 + dc).rem_euclid(14) as usize;
                    m.data_mut()[rr * 14 + cc] = mag;
                }
            }
            let lp = &bank.lowpass;
            let expect = direct_circ_conv(&m, lp, lp.rows());
            assert!(maps[ci].max_abs_diff(&expect) < 1e-9);
        }
    }

    #[test]
    fn bandpass_channels_are_nonnegative() {
        let cfg = small_cfg();
        let bank = init_bank(&cfg).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut img = Tensor::zeros(&[16, 16]);
        for v in img.data_mut() {
            *v = rng.gen_range(-2.0..2.0);
        }
        let maps = scattering_apply(&img, &bank).unwrap();
        for m in &maps[..maps.len() - 1] {
            // low-pass of a nonnegative modulus stays nonnegative up to rounding
            assert!(m.data().iter().all(|&v| v >= -1e-12));
        }
    }

    #[test]
    fn bandpass_ignores_constant_shift() {
        let cfg = small_cfg();
        let bank = init_bank(&cfg).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let mut img = Tensor::zeros(&[16, 16]);
        for v in img.data_mut() {
            *v = rng.gen_range(0.0..2.0);
        }
        let maps = scattering_apply(&img, &bank).unwrap();
        let mut shifted = img.clone();
        for v in shifted.data_mut() {
            *v += 5.0;
        }
        let maps2 = scattering_apply(&shifted, &bank).unwrap();
        for (a, b) in maps.iter().zip(&maps2).take(maps.len() - 1) {
            let scale: f64 = a.data().iter().map(|v| v.abs()).fold(1e-9, f64::max);
            assert!(a.max_abs_diff(b) <= 1e-6 * scale.max(5.0));
        }
    }

    #[test]
    fn bandpass_is_one_homogeneous() {
        let cfg = small_cfg();
        let bank = init_bank(&cfg).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mut img = Tensor::zeros(&[16, 16]);
        for v in img.data_mut() {
            *v = rng.gen_range(0.0..2.0);
        }
        let maps = scattering_apply(&img, &bank).unwrap();
        let mut doubled = img.clone();
        for v in doubled.data_mut() {
            *v *= 2.0;
        }
        let maps2 = scattering_apply(&doubled, &bank).unwrap();
        for (a, b) in maps.iter().zip(&maps2).take(maps.len() - 1) {
            for (&x, &y) in a.data().iter().zip(b.data()) {
                assert!((y - 2.0 * x).abs() <= 1e-9 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn tokens_identity_projection_is_pure_flatten() {
        let mut g = Graph::new(Precision::F64);
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let c = 3;
        let side = 4;
        let n = side * side;
        let mut maps = Vec::new();
        let mut raw = Vec::new();
        for _ in 0..c {
            let mut m = Tensor::zeros(&[side, side]);
            for v in m.data_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            raw.push(m.clone());
            maps.push(g.constant(m));
        }
        let mut eye = Tensor::zeros(&[c, c]);
        for k in 0..c {
            eye.data_mut()[k * c + k] = 1.0;
        }
        let w = g.constant(eye);
        let b = g.constant(Tensor::zeros(&[c]));
        let tok = tokens_from_maps(&mut g, &maps, n, w, b).unwrap();
        let t = g.value(tok);
        assert_eq!(t.shape(), &[n, c]);
        for pos in 0..n {
            for ch in 0..c {
                assert_eq!(t.at2(pos, ch), raw[ch].data()[pos]);
            }
        }
    }

    #[test]
    fn tokens_constant_map_gives_identical_tokens() {
        let mut g = Graph::new(Precision::F64);
        let m = g.constant(Tensor::full(&[4, 4], 2.5));
        let w = g.constant(Tensor::new(vec![1, 2], vec![1.0, -0.5]).unwrap());
        let b = g.constant(Tensor::new(vec![2], vec![0.1, 0.2]).unwrap());
        let tok = tokens_from_maps(&mut g, &[m], 16, w, b).unwrap();
        let t = g.value(tok);
        for pos in 1..16 {
            assert_eq!(t.at2(pos, 0), t.at2(0, 0));
            assert_eq!(t.at2(pos, 1), t.at2(0, 1));
        }
    }

    #[test]
    fn tokens_pooling_averages_parents() {
        // 2×2 → 1 average pool: the single token is the mean of 4 parents
        let mut g = Graph::new(Precision::F64);
        let m = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap());
        let w = g.constant(Tensor::scalar(1.0).reshaped(vec![1, 1]).unwrap());
        let b = g.constant(Tensor::new(vec![1], vec![0.0]).unwrap());
        let tok = tokens_from_maps(&mut g, &[m], 1, w, b).unwrap();
        assert_eq!(g.value(tok).data(), &[3.0]);
    }

    #[test]
    fn tokens_reject_non_square_count() {
        let mut g = Graph::new(Precision::F64);
        let m = g.constant(Tensor::zeros(&[4, 4]));
        let w = g.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let b = g.constant(Tensor::zeros(&[1]));
        assert!(matches!(
            tokens_from_maps(&mut g, &[m], 15, w, b),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn morlet_gradients_flow_through_scattering() {
        use crate::numerics::{bind, grad_check, ParamStore};
        let mut store = ParamStore::new();
        store.insert("sigma", Tensor::scalar(1.2));
        store.insert("theta", Tensor::scalar(0.6));
        store.insert("xi", Tensor::scalar(1.5));
        store.insert("gamma", Tensor::scalar(0.9));
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let mut img = Tensor::zeros(&[12, 12]);
        for v in img.data_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        let lp = gaussian_lowpass(7, 1.0);
        let report = grad_check(
            |g, s| {
                let vars = MorletVars {
                    sigma: bind(g, s, "sigma")?,
                    theta: bind(g, s, "theta")?,
                    xi: bind(g, s, "xi")?,
                    gamma: bind(g, s, "gamma")?,
                };
                let img_v = g.constant(img.clone());
                let lp_spec = kernel_spectrum(&lp, 12, 12);
                let bank = BankVars {
                    filters: vec![vars],
                    support: 7,
                    lowpass_spec: g.constant(lp_spec),
                };
                let cfg = ScatterConfig {
                    scales: 1,
                    orientations: 1,
                    sigma0: 1.2,
                    subsample: 2,
                    support: Some(7),
                };
                let maps = scattering_forward_graph(g, img_v, &bank, &cfg)?;
                let sq = g.mul(maps[0], maps[0])?;
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
