//! Full pipeline assembly: scattering front end, token encoders,
//! multi-level slot attention, and the broadcast decoder, sharing one
//! parameter store.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::decoder::{decode, recon_loss, DecoderVars};
use crate::encoders::{
    check_token_norms, load_precomputed, patchify, preprocess_image, scattering_encode,
    AttnVars, BlockVars, BnBatchStats, BnVars, FreezeMode, LinVars, ScatEncVars, VisEncVars,
    VisualBackend,
};
use crate::error::{Error, Result};
use crate::mlsa::{mlsa_forward, IterVars, MlsaConfig, MlsaVars};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::gru::GruParams;
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::{Precision, Tensor};
use crate::scattering::{
    init_bank, kernel_spectrum, scattering_forward_graph, tokens_from_maps, BankVars,
    FilterBank, MorletVars, ScatterConfig,
};
use crate::seed::derive_seed;

/// Static architecture description; serialized into run configs.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub tokens: usize,
    pub d_s: usize,
    pub d_feat: usize,
    pub d_slot: usize,
    pub scattering: ScatterConfig,
    pub backend: VisualBackend,
    pub freeze: FreezeMode,
    pub mlsa: MlsaConfig,
    pub decoder_hidden: usize,
    pub encoder_blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 112,
            tokens: 196,
            d_s: 64,
            d_feat: 512,
            d_slot: 256,
            scattering: ScatterConfig::default(),
            backend: VisualBackend::BuiltinPatchEncoder,
            freeze: FreezeMode::FrozenAfterStage1,
            mlsa: MlsaConfig::default(),
            decoder_hidden: 1024,
            encoder_blocks: 2,
        }
    }
}

impl ModelConfig {
    pub fn token_side(&self) -> usize {
        (self.tokens as f64).sqrt().round() as usize
    }

    pub fn patch_size(&self) -> Result<usize> {
        let side = self.token_side();
        if side * side != self.tokens {
            return Err(Error::Config(format!(
                "token count {} is not a perfect square",
                self.tokens
            )));
        }
        if self.image_size % side != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by token side {side}",
                self.image_size
            )));
        }
        Ok(self.image_size / side)
    }

    pub fn validate(&self) -> Result<()> {
        self.patch_size()?;
        if self.image_size % self.scattering.subsample != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by scattering subsample {}",
                self.image_size, self.scattering.subsample
            )));
        }
        if self.scattering.band_support() > self.image_size
            || self.scattering.lowpass_support() > self.image_size
        {
            return Err(Error::Config(
                "filter support exceeds the image size".to_string(),
            ));
        }
        if self.mlsa.iterations < 1 {
            return Err(Error::Config("mlsa.iterations must be >= 1".to_string()));
        }
        Ok(())
    }

    /// Short tag describing the ablation state, used in config ids.
    pub fn ablation_tag(&self) -> &'static str {
        match (self.mlsa.use_spatial_map, self.mlsa.use_scattering_fusion) {
            (false, false) => "baseline",
            (true, false) => "ms-only",
            (false, true) => "fs-only",
            (true, true) => "full",
        }
    }

    /// Apply one of the named ablation configurations.
    pub fn set_ablation(&mut self, name: &str) -> Result<()> {
        let (ms, fs) = match name {
            "baseline" => (false, false),
            "ms-only" => (true, false),
            "fs-only" => (false, true),
            "full" => (true, true),
            _ => {
                return Err(Error::Config(format!(
                    "unknown ablation {name}; expected baseline|ms-only|fs-only|full"
                )))
            }
        };
        self.mlsa.use_spatial_map = ms;
        self.mlsa.use_scattering_fusion = fs;
        Ok(())
    }
}

/// The assembled model: config, parameters, and cached constants.
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    lowpass_spec: Arc<Tensor>,
    bank_support: usize,
}

/// Per-forward options.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub train: bool,
    /// Fine-tuning stage (controls frozen-after-stage-1 encoders).
    pub stage2: bool,
    pub slot_seed: u64,
    pub precision: Precision,
}

/// Everything a forward pass produces.
pub struct Forward {
    pub graph: Graph,
    pub loss: Var,
    pub alpha: Var,
    pub recon: Var,
    /// Detached visual features the decoder reconstructs.
    pub target: Var,
    pub iters: Vec<IterVars>,
    pub bn_stats: Vec<BnBatchStats>,
    pub visual_source: String,
}

fn xavier(shape: &[usize], rng: &mut ChaCha12Rng) -> Tensor {
    let (fan_in, fan_out) = match shape.len() {
        1 => (shape[0], shape[0]),
        _ => (shape[0], shape[shape.len() - 1]),
    };
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.gen_range(-limit..limit);
    }
    t
}

impl Model {
    /// Initialize all parameters deterministically from a seed. Every
    /// tensor gets its own stream derived from (seed, name), so adding a
    /// parameter never shifts the others.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut params = ParamStore::new();
        let add_xavier = |params: &mut ParamStore, name: &str, shape: &[usize]| {
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, name));
            params.insert(name, xavier(shape, &mut rng));
        };
        let add_zeros =
            |params: &mut ParamStore, name: &str, shape: &[usize]| params.insert(name, Tensor::zeros(shape));
        let add_ones =
            |params: &mut ParamStore, name: &str, shape: &[usize]| params.insert(name, Tensor::ones(shape));

        // scattering bank
        let bank = init_bank(&config.scattering)?;
        for (idx, p) in bank.params.iter().enumerate() {
            let (j, l) = (
                idx / config.scattering.orientations,
                idx % config.scattering.orientations,
            );
            params.insert(&format!("scat.sigma[{j},{l}]"), Tensor::scalar(p.sigma));
            params.insert(&format!("scat.theta[{j},{l}]"), Tensor::scalar(p.theta));
            params.insert(&format!("scat.xi[{j},{l}]"), Tensor::scalar(p.xi));
            params.insert(&format!("scat.gamma[{j},{l}]"), Tensor::scalar(p.gamma));
        }
        let channels = config.scattering.channels();
        add_xavier(&mut params, "scat.proj.w", &[channels, config.d_s]);
        add_zeros(&mut params, "scat.proj.b", &[config.d_s]);

        // scattering refiner
        let ds = config.d_s;
        for bn in ["bn0", "bn1", "bn2"] {
            add_ones(&mut params, &format!("enc.scat.{bn}.gamma"), &[ds]);
            add_zeros(&mut params, &format!("enc.scat.{bn}.beta"), &[ds]);
            params.insert_buffer(&format!("enc.scat.{bn}.mean"), Tensor::zeros(&[ds]));
            params.insert_buffer(&format!("enc.scat.{bn}.var"), Tensor::ones(&[ds]));
        }
        add_xavier(&mut params, "enc.scat.conv1.w", &[ds, ds]);
        add_zeros(&mut params, "enc.scat.conv1.b", &[ds]);
        add_xavier(&mut params, "enc.scat.conv2.w", &[ds, ds]);
        add_zeros(&mut params, "enc.scat.conv2.b", &[ds]);
        add_xavier(&mut params, "enc.scat.attn.wq", &[ds, ds]);
        add_xavier(&mut params, "enc.scat.attn.wk", &[ds, ds]);
        add_xavier(&mut params, "enc.scat.attn.wv", &[ds, ds]);

        // builtin visual encoder
        if config.backend == VisualBackend::BuiltinPatchEncoder {
            let p2 = config.patch_size()? * config.patch_size()?;
            let df = config.d_feat;
            add_xavier(&mut params, "enc.vis.embed.w", &[p2, df]);
            add_zeros(&mut params, "enc.vis.embed.b", &[df]);
            {
                // strong positional component, mirroring the positional
                // structure of pretrained feature extractors
                let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "enc.vis.pos"));
                let mut t = Tensor::zeros(&[config.tokens, df]);
                for v in t.data_mut() {
                    *v = rng.gen_range(-0.5..0.5);
                }
                params.insert("enc.vis.pos", t);
            }
            for b in 0..config.encoder_blocks {
                add_ones(&mut params, &format!("enc.vis.blk{b}.ln1.g"), &[df]);
                add_zeros(&mut params, &format!("enc.vis.blk{b}.ln1.b"), &[df]);
                add_xavier(&mut params, &format!("enc.vis.blk{b}.attn.wq"), &[df, df]);
                add_xavier(&mut params, &format!("enc.vis.blk{b}.attn.wk"), &[df, df]);
                add_xavier(&mut params, &format!("enc.vis.blk{b}.attn.wv"), &[df, df]);
                add_xavier(&mut params, &format!("enc.vis.blk{b}.wo"), &[df, df]);
                add_ones(&mut params, &format!("enc.vis.blk{b}.ln2.g"), &[df]);
                add_zeros(&mut params, &format!("enc.vis.blk{b}.ln2.b"), &[df]);
                add_xavier(&mut params, &format!("enc.vis.blk{b}.mlp1.w"), &[df, 2 * df]);
                add_zeros(&mut params, &format!("enc.vis.blk{b}.mlp1.b"), &[2 * df]);
                add_xavier(&mut params, &format!("enc.vis.blk{b}.mlp2.w"), &[2 * df, df]);
                add_zeros(&mut params, &format!("enc.vis.blk{b}.mlp2.b"), &[df]);
            }
            add_ones(&mut params, "enc.vis.ln_out.g", &[df]);
            add_zeros(&mut params, "enc.vis.ln_out.b", &[df]);
        }

        // slot attention
        let df = config.d_feat;
        let dsl = config.d_slot;
        add_xavier(&mut params, "slots.mu", &[dsl]);
        add_xavier(&mut params, "slots.log_sigma", &[dsl]);
        add_ones(&mut params, "mlsa.proj_v.ln.g", &[df]);
        add_zeros(&mut params, "mlsa.proj_v.ln.b", &[df]);
        add_xavier(&mut params, "mlsa.proj_v.l1.w", &[df, df]);
        add_zeros(&mut params, "mlsa.proj_v.l1.b", &[df]);
        add_xavier(&mut params, "mlsa.proj_v.l2.w", &[df, df]);
        add_zeros(&mut params, "mlsa.proj_v.l2.b", &[df]);
        add_ones(&mut params, "mlsa.proj_s.ln.g", &[ds]);
        add_zeros(&mut params, "mlsa.proj_s.ln.b", &[ds]);
        add_xavier(&mut params, "mlsa.proj_s.l1.w", &[ds, ds]);
        add_zeros(&mut params, "mlsa.proj_s.l1.b", &[ds]);
        add_xavier(&mut params, "mlsa.proj_s.l2.w", &[ds, ds]);
        add_zeros(&mut params, "mlsa.proj_s.l2.b", &[ds]);
        add_ones(&mut params, "mlsa.kv.ln.g", &[df]);
        add_zeros(&mut params, "mlsa.kv.ln.b", &[df]);
        add_xavier(&mut params, "mlsa.w_k", &[df, dsl]);
        add_xavier(&mut params, "mlsa.w_v", &[df, dsl]);
        add_ones(&mut params, "mlsa.q.ln.g", &[dsl]);
        add_zeros(&mut params, "mlsa.q.ln.b", &[dsl]);
        add_xavier(&mut params, "mlsa.w_q", &[dsl, dsl]);
        add_xavier(&mut params, "mlsa.w_f", &[ds, dsl]);
        for gate in ["z", "r", "h"] {
            add_xavier(&mut params, &format!("mlsa.gru.w_{gate}"), &[dsl, dsl]);
            add_xavier(&mut params, &format!("mlsa.gru.u_{gate}"), &[dsl, dsl]);
            add_zeros(&mut params, &format!("mlsa.gru.b_{gate}"), &[dsl]);
        }
        add_ones(&mut params, "mlsa.mlp.ln.g", &[dsl]);
        add_zeros(&mut params, "mlsa.mlp.ln.b", &[dsl]);
        add_xavier(&mut params, "mlsa.mlp.l1.w", &[dsl, 4 * dsl]);
        add_zeros(&mut params, "mlsa.mlp.l1.b", &[4 * dsl]);
        add_xavier(&mut params, "mlsa.mlp.l2.w", &[4 * dsl, dsl]);
        add_zeros(&mut params, "mlsa.mlp.l2.b", &[dsl]);

        // decoder
        {
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "dec.pos"));
            let mut t = Tensor::zeros(&[config.tokens, dsl]);
            for v in t.data_mut() {
                *v = rng.gen_range(-0.02..0.02);
            }
            params.insert("dec.pos", t);
        }
        let hidden = config.decoder_hidden;
        add_xavier(&mut params, "dec.l1.w", &[dsl, hidden]);
        add_zeros(&mut params, "dec.l1.b", &[hidden]);
        add_xavier(&mut params, "dec.l2.w", &[hidden, hidden]);
        add_zeros(&mut params, "dec.l2.b", &[hidden]);
        add_xavier(&mut params, "dec.l3.w", &[hidden, config.d_feat + 1]);
        add_zeros(&mut params, "dec.l3.b", &[config.d_feat + 1]);

        Ok(Model {
            lowpass_spec: Arc::new(kernel_spectrum(
                &bank.lowpass,
                config.image_size,
                config.image_size,
            )),
            bank_support: bank.support,
            config,
            params,
        })
    }

    /// Rebuild cached constants after loading parameters.
    pub fn with_params(config: ModelConfig, params: ParamStore) -> Result<Model> {
        config.validate()?;
        let bank = init_bank(&config.scattering)?;
        Ok(Model {
            lowpass_spec: Arc::new(kernel_spectrum(
                &bank.lowpass,
                config.image_size,
                config.image_size,
            )),
            bank_support: bank.support,
            config,
            params,
        })
    }

    /// Snapshot of the current (possibly trained) filter bank.
    pub fn filter_bank(&self) -> Result<FilterBank> {
        let cfg = &self.config.scattering;
        let mut bank = init_bank(cfg)?;
        for (idx, p) in bank.params.iter_mut().enumerate() {
            let (j, l) = (idx / cfg.orientations, idx % cfg.orientations);
            p.sigma = self.params.get(&format!("scat.sigma[{j},{l}]"))?.item();
            p.theta = self.params.get(&format!("scat.theta[{j},{l}]"))?.item();
            p.xi = self.params.get(&format!("scat.xi[{j},{l}]"))?.item();
            p.gamma = self.params.get(&format!("scat.gamma[{j},{l}]"))?.item();
        }
        Ok(bank)
    }

    /// Clamp wavelet parameters back into their valid domain after an
    /// optimizer step (σ, γ strictly positive; ξ non-negative).
    pub fn project_wavelet_params(&mut self) -> Result<()> {
        let cfg = &self.config.scattering;
        for j in 0..cfg.scales {
            for l in 0..cfg.orientations {
                for (name, floor) in [
                    (format!("scat.sigma[{j},{l}]"), 0.05),
                    (format!("scat.gamma[{j},{l}]"), 0.05),
                    (format!("scat.xi[{j},{l}]"), 0.0),
                ] {
                    let t = self.params.get_mut(&name)?;
                    if t.data()[0] < floor {
                        t.data_mut()[0] = floor;
                    }
                }
            }
        }
        Ok(())
    }

    fn bind(&self, g: &mut Graph, name: &str, trainable: bool) -> Result<Var> {
        let arc = Arc::clone(self.params.get(name)?);
        Ok(if trainable {
            g.param(name, arc)
        } else {
            g.constant_shared(arc)
        })
    }

    fn bind_lin(&self, g: &mut Graph, prefix: &str, trainable: bool) -> Result<LinVars> {
        Ok(LinVars {
            w: self.bind(g, &format!("{prefix}.w"), trainable)?,
            b: self.bind(g, &format!("{prefix}.b"), trainable)?,
        })
    }

    fn bind_bn(&self, g: &mut Graph, prefix: &str, trainable: bool) -> Result<BnVars> {
        Ok(BnVars {
            gamma: self.bind(g, &format!("{prefix}.gamma"), trainable)?,
            beta: self.bind(g, &format!("{prefix}.beta"), trainable)?,
            running_mean: {
                let t = self.params.buffer(&format!("{prefix}.mean"))?.clone();
                g.constant(t)
            },
            running_var: {
                let t = self.params.buffer(&format!("{prefix}.var"))?.clone();
                g.constant(t)
            },
        })
    }

    fn bind_mlsa(&self, g: &mut Graph, trainable: bool) -> Result<MlsaVars> {
        Ok(MlsaVars {
            mu: self.bind(g, "slots.mu", trainable)?,
            log_sigma: self.bind(g, "slots.log_sigma", trainable)?,
            proj_v_ln_g: self.bind(g, "mlsa.proj_v.ln.g", trainable)?,
            proj_v_ln_b: self.bind(g, "mlsa.proj_v.ln.b", trainable)?,
            proj_v_l1: self.bind_lin(g, "mlsa.proj_v.l1", trainable)?,
            proj_v_l2: self.bind_lin(g, "mlsa.proj_v.l2", trainable)?,
            proj_s_ln_g: self.bind(g, "mlsa.proj_s.ln.g", trainable)?,
            proj_s_ln_b: self.bind(g, "mlsa.proj_s.ln.b", trainable)?,
            proj_s_l1: self.bind_lin(g, "mlsa.proj_s.l1", trainable)?,
            proj_s_l2: self.bind_lin(g, "mlsa.proj_s.l2", trainable)?,
            kv_ln_g: self.bind(g, "mlsa.kv.ln.g", trainable)?,
            kv_ln_b: self.bind(g, "mlsa.kv.ln.b", trainable)?,
            w_k: self.bind(g, "mlsa.w_k", trainable)?,
            w_v: self.bind(g, "mlsa.w_v", trainable)?,
            q_ln_g: self.bind(g, "mlsa.q.ln.g", trainable)?,
            q_ln_b: self.bind(g, "mlsa.q.ln.b", trainable)?,
            w_q: self.bind(g, "mlsa.w_q", trainable)?,
            w_f: self.bind(g, "mlsa.w_f", trainable)?,
            gru: GruParams {
                w_z: self.bind(g, "mlsa.gru.w_z", trainable)?,
                u_z: self.bind(g, "mlsa.gru.u_z", trainable)?,
                b_z: self.bind(g, "mlsa.gru.b_z", trainable)?,
                w_r: self.bind(g, "mlsa.gru.w_r", trainable)?,
                u_r: self.bind(g, "mlsa.gru.u_r", trainable)?,
                b_r: self.bind(g, "mlsa.gru.b_r", trainable)?,
                w_h: self.bind(g, "mlsa.gru.w_h", trainable)?,
                u_h: self.bind(g, "mlsa.gru.u_h", trainable)?,
                b_h: self.bind(g, "mlsa.gru.b_h", trainable)?,
            },
            mlp_ln_g: self.bind(g, "mlsa.mlp.ln.g", trainable)?,
            mlp_ln_b: self.bind(g, "mlsa.mlp.ln.b", trainable)?,
            mlp_l1: self.bind_lin(g, "mlsa.mlp.l1", trainable)?,
            mlp_l2: self.bind_lin(g, "mlsa.mlp.l2", trainable)?,
        })
    }

    /// Whether the visual encoder receives gradients under the current
    /// stage and freeze mode.
    pub fn visual_trainable(&self, stage2: bool) -> bool {
        match self.config.freeze {
            FreezeMode::Trainable => true,
            FreezeMode::Frozen => false,
            FreezeMode::FrozenAfterStage1 => !stage2,
        }
    }

    /// One full forward pass over a single scene.
    pub fn forward(&self, image: &Tensor, image_id: &str, opts: &ForwardOptions) -> Result<Forward> {
        let cfg = &self.config;
        if image.shape() != [cfg.image_size, cfg.image_size] {
            return Err(Error::shape(
                "model_forward",
                format!(
                    "image {:?}, expected [{}, {}]",
                    image.shape(),
                    cfg.image_size,
                    cfg.image_size
                ),
            ));
        }
        let mut g = Graph::new(opts.precision);
        let train_all = opts.train;
        let mut bn_stats = Vec::new();

        // scattering tokens
        let image_v = g.input("image", image.clone());
        let filters: Vec<MorletVars> = {
            let sc = &cfg.scattering;
            let mut out = Vec::with_capacity(sc.scales * sc.orientations);
            for j in 0..sc.scales {
                for l in 0..sc.orientations {
                    out.push(MorletVars {
                        sigma: self.bind(&mut g, &format!("scat.sigma[{j},{l}]"), train_all)?,
                        theta: self.bind(&mut g, &format!("scat.theta[{j},{l}]"), train_all)?,
                        xi: self.bind(&mut g, &format!("scat.xi[{j},{l}]"), train_all)?,
                        gamma: self.bind(&mut g, &format!("scat.gamma[{j},{l}]"), train_all)?,
                    });
                }
            }
            out
        };
        let bank = BankVars {
            filters,
            support: self.bank_support,
            lowpass_spec: g.constant_shared(Arc::clone(&self.lowpass_spec)),
        };
        let maps = scattering_forward_graph(&mut g, image_v, &bank, &cfg.scattering)?;
        let proj_w = self.bind(&mut g, "scat.proj.w", train_all)?;
        let proj_b = self.bind(&mut g, "scat.proj.b", train_all)?;
        let scat_tokens = tokens_from_maps(&mut g, &maps, cfg.tokens, proj_w, proj_b)?;
        let scat_vars = ScatEncVars {
            bn0: self.bind_bn(&mut g, "enc.scat.bn0", train_all)?,
            conv1: self.bind_lin(&mut g, "enc.scat.conv1", train_all)?,
            bn1: self.bind_bn(&mut g, "enc.scat.bn1", train_all)?,
            conv2: self.bind_lin(&mut g, "enc.scat.conv2", train_all)?,
            bn2: self.bind_bn(&mut g, "enc.scat.bn2", train_all)?,
            attn: AttnVars {
                w_q: self.bind(&mut g, "enc.scat.attn.wq", train_all)?,
                w_k: self.bind(&mut g, "enc.scat.attn.wk", train_all)?,
                w_v: self.bind(&mut g, "enc.scat.attn.wv", train_all)?,
            },
        };
        let f_s = scattering_encode(
            &mut g,
            scat_tokens,
            &scat_vars,
            "enc.scat",
            opts.train,
            &mut bn_stats,
        )?;

        // visual tokens
        let (f_v, visual_source) = match &cfg.backend {
            VisualBackend::BuiltinPatchEncoder => {
                let trainable = opts.train && self.visual_trainable(opts.stage2);
                let patch = cfg.patch_size()?;
                let pre = preprocess_image(image);
                let patches = patchify(&pre, patch)?;
                let pv = g.input("patches", patches);
                let mut blocks = Vec::with_capacity(cfg.encoder_blocks);
                for b in 0..cfg.encoder_blocks {
                    blocks.push(BlockVars {
                        ln1_g: self.bind(&mut g, &format!("enc.vis.blk{b}.ln1.g"), trainable)?,
                        ln1_b: self.bind(&mut g, &format!("enc.vis.blk{b}.ln1.b"), trainable)?,
                        attn: AttnVars {
                            w_q: self.bind(&mut g, &format!("enc.vis.blk{b}.attn.wq"), trainable)?,
                            w_k: self.bind(&mut g, &format!("enc.vis.blk{b}.attn.wk"), trainable)?,
                            w_v: self.bind(&mut g, &format!("enc.vis.blk{b}.attn.wv"), trainable)?,
                        },
                        w_o: self.bind(&mut g, &format!("enc.vis.blk{b}.wo"), trainable)?,
                        ln2_g: self.bind(&mut g, &format!("enc.vis.blk{b}.ln2.g"), trainable)?,
                        ln2_b: self.bind(&mut g, &format!("enc.vis.blk{b}.ln2.b"), trainable)?,
                        mlp1: self.bind_lin(&mut g, &format!("enc.vis.blk{b}.mlp1"), trainable)?,
                        mlp2: self.bind_lin(&mut g, &format!("enc.vis.blk{b}.mlp2"), trainable)?,
                    });
                }
                let vars = VisEncVars {
                    embed: self.bind_lin(&mut g, "enc.vis.embed", trainable)?,
                    pos: self.bind(&mut g, "enc.vis.pos", trainable)?,
                    blocks,
                    ln_out_g: self.bind(&mut g, "enc.vis.ln_out.g", trainable)?,
                    ln_out_b: self.bind(&mut g, "enc.vis.ln_out.b", trainable)?,
                };
                let out = crate::encoders::builtin_encode(&mut g, pv, &vars)?;
                (out, "builtin-patch-encoder".to_string())
            }
            VisualBackend::PrecomputedFile { dir } => {
                let tokens = load_precomputed(dir, image_id, cfg.tokens, cfg.d_feat)?;
                let source = tokens.source.clone();
                (g.input("features", tokens.values), source)
            }
        };
        check_token_norms(g.value(f_v), &visual_source)?;

        // reconstruction target is the detached visual features
        let target = {
            let t = g.value(f_v).clone();
            g.constant(t)
        };

        // slot attention
        let mlsa_vars = self.bind_mlsa(&mut g, train_all)?;
        let mut rng = ChaCha12Rng::seed_from_u64(opts.slot_seed);
        let out = mlsa_forward(&mut g, f_v, f_s, &mlsa_vars, &cfg.mlsa, &mut rng)?;

        // decode and reconstruct
        let dec_vars = DecoderVars {
            pos: self.bind(&mut g, "dec.pos", train_all)?,
            l1: self.bind_lin(&mut g, "dec.l1", train_all)?,
            l2: self.bind_lin(&mut g, "dec.l2", train_all)?,
            l3: self.bind_lin(&mut g, "dec.l3", train_all)?,
        };
        let decoded = decode(&mut g, out.slots, &dec_vars, cfg.d_feat)?;
        let loss = recon_loss(&mut g, target, decoded.recon)?;

        Ok(Forward {
            graph: g,
            loss,
            alpha: decoded.alpha,
            recon: decoded.recon,
            target,
            iters: out.iters,
            bn_stats,
            visual_source,
        })
    }
}
