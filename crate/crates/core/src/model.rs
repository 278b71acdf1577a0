//! The encoder: embedding, stacked mixer/MLP blocks with residual layer
//! norms, and the projection through the inverse orthogonal basis to the
//! conditional representation.

use crate::error::{Error, Result};
use crate::flowmatch::WfmParams;
use crate::linalg::{uniform_sample, Mat, RngState};
use crate::mixers::{
    layer_norm, temporal_mlp_counted, LayerNormParams, LinearLayer, MhsaParams, Mixer, MlpParams,
    NormLinParams, RankKParams, VecTransParams,
};
use crate::transforms::{
    dim_extend, instance_norm, ortho_apply, ortho_inverse_apply, DimExtParams, InstanceNormState,
    OrthoBasis,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixerKind {
    VecTrans,
    RankK(usize),
    Mhsa(usize),
    NormLin,
    None,
}

impl MixerKind {
    pub fn name(&self) -> &'static str {
        match self {
            MixerKind::VecTrans => "vectrans",
            MixerKind::RankK(_) => "rank_k",
            MixerKind::Mhsa(_) => "mhsa",
            MixerKind::NormLin => "normlin",
            MixerKind::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemporalKind {
    Mlp,
    None,
}

/// Everything needed to shape the encoder.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub n_var: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub d_model: usize,
    pub d_ext: usize,
    pub depth: usize,
    pub mixer: MixerKind,
    pub temporal: TemporalKind,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_var", self.n_var),
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("d_model", self.d_model),
            ("d_ext", self.d_ext),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.lookback < 2 {
            return Err(Error::Config("lookback must be >= 2".into()));
        }
        if self.d_model < 2 {
            return Err(Error::Config("d_model must be >= 2".into()));
        }
        match self.mixer {
            MixerKind::Mhsa(h) => {
                if h == 0 || self.d_model % h != 0 {
                    return Err(Error::Config(format!(
                        "d_model {} not divisible by {h} heads",
                        self.d_model
                    )));
                }
            }
            MixerKind::RankK(k) => {
                if k == 0 {
                    return Err(Error::Config("rank k must be >= 1".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn d_ff(&self) -> usize {
        2 * self.d_model
    }
}

/// One encoder block: token mixer and temporal MLP, each behind a residual
/// connection and layer norm. Disabled sublayers keep their layer norm.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub mixer: Mixer,
    pub mlp: Option<MlpParams>,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
}

/// All learnable tensors of the encoder.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub phi: DimExtParams,
    pub embed: LinearLayer,
    pub blocks: Vec<BlockParams>,
    pub proj: LinearLayer,
}

/// Encoder plus velocity head: the full learnable state of the model.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub wfm: WfmParams,
}

/// The conditional representation together with the instance-norm state
/// needed to decode the forecast.
#[derive(Debug, Clone)]
pub struct CondOutput {
    pub cond: Mat,
    pub norm_state: InstanceNormState,
}

fn init_linear(rng: &mut RngState, fan_in: usize, fan_out: usize) -> Result<LinearLayer> {
    let bound = (1.0 / fan_in as f64).sqrt();
    Ok(LinearLayer {
        w: uniform_sample(rng, fan_in, fan_out, bound)?,
        b: Mat::zeros(1, fan_out),
    })
}

fn init_mixer(config: &ModelConfig, rng: &mut RngState) -> Result<Mixer> {
    let (n, d) = (config.n_var, config.d_model);
    Ok(match config.mixer {
        // Zero logits start at exactly uniform 1/N mixing.
        MixerKind::VecTrans => Mixer::VecTrans(VecTransParams {
            a: Mat::zeros(1, n),
            pre: init_linear(rng, d, d)?,
            post: init_linear(rng, d, d)?,
        }),
        MixerKind::RankK(k) => Mixer::RankK {
            params: RankKParams {
                a_mat: Mat::filled(n, k, 1.0),
                b_mat: Mat::zeros(n, k),
            },
            pre: init_linear(rng, d, d)?,
            post: init_linear(rng, d, d)?,
        },
        MixerKind::Mhsa(heads) => Mixer::Mhsa(MhsaParams {
            wq: init_linear(rng, d, d)?,
            wk: init_linear(rng, d, d)?,
            wv: init_linear(rng, d, d)?,
            wo: init_linear(rng, d, d)?,
            heads,
        }),
        MixerKind::NormLin => Mixer::NormLin {
            params: NormLinParams { w: Mat::zeros(n, n) },
            pre: init_linear(rng, d, d)?,
            post: init_linear(rng, d, d)?,
        },
        MixerKind::None => Mixer::None,
    })
}

/// Deterministic initialization: linear weights Uniform(+-sqrt(1/fan_in)),
/// biases zero, mixing logits zero, phi all ones, layer norm at identity.
pub fn init_params(config: &ModelConfig, rng: &mut RngState) -> Result<ModelParams> {
    config.validate()?;
    let d = config.d_model;
    let flat = config.d_ext * config.lookback;
    let embed = init_linear(rng, flat, d)?;
    let mut blocks = Vec::with_capacity(config.depth);
    for _ in 0..config.depth {
        let mixer = init_mixer(config, rng)?;
        let mlp = match config.temporal {
            TemporalKind::Mlp => Some(MlpParams {
                w1: init_linear(rng, d, config.d_ff())?.w,
                b1: Mat::zeros(1, config.d_ff()),
                w2: init_linear(rng, config.d_ff(), d)?.w,
                b2: Mat::zeros(1, d),
            }),
            TemporalKind::None => None,
        };
        blocks.push(BlockParams {
            mixer,
            mlp,
            ln1: LayerNormParams::unit(d),
            ln2: LayerNormParams::unit(d),
        });
    }
    let proj = init_linear(rng, d, config.horizon)?;
    let encoder = EncoderParams { phi: DimExtParams::ones(config.d_ext), embed, blocks, proj };
    let h = config.horizon;
    let wfm = WfmParams {
        w: init_linear(rng, 2 * h + 1, h)?.w,
        b: Mat::zeros(1, h),
        s: Mat::zeros(1, 1),
    };
    Ok(ModelParams { encoder, wfm })
}

/// Exact learnable scalar count for a config.
pub fn param_count(config: &ModelConfig) -> usize {
    let (n, d, h) = (config.n_var, config.d_model, config.horizon);
    let flat = config.d_ext * config.lookback;
    let mixer = match config.mixer {
        MixerKind::VecTrans => n + 2 * (d * d + d),
        MixerKind::RankK(k) => 2 * n * k + 2 * (d * d + d),
        MixerKind::Mhsa(_) => 4 * (d * d + d),
        MixerKind::NormLin => n * n + 2 * (d * d + d),
        MixerKind::None => 0,
    };
    let mlp = match config.temporal {
        TemporalKind::Mlp => 2 * d * config.d_ff() + config.d_ff() + d,
        TemporalKind::None => 0,
    };
    let per_block = mixer + mlp + 4 * d;
    config.d_ext                       // phi
        + flat * d + d                 // embed
        + config.depth * per_block
        + d * h + h                    // projection
        + (2 * h + 1) * h + h + 1      // velocity head + noise scale
}

/// The full conditioning pipeline: instance norm, orthogonal input basis,
/// dimension extension, embedding, the block stack, projection, and the
/// inverse output basis.
pub fn forward_cond(
    x: &Mat,
    params: &EncoderParams,
    basis: &OrthoBasis,
    config: &ModelConfig,
) -> Result<CondOutput> {
    let (cond, state) = forward_stages(x, params, basis, config)?;
    Ok(CondOutput { cond, norm_state: state })
}

fn stage_err(stage: &str, e: Error) -> Error {
    Error::Shape(format!("{stage}: {e}"))
}

fn forward_stages(
    x: &Mat,
    params: &EncoderParams,
    basis: &OrthoBasis,
    config: &ModelConfig,
) -> Result<(Mat, InstanceNormState)> {
    if x.rows() != config.n_var || x.cols() != config.lookback {
        return Err(Error::Shape(format!(
            "input {}x{}, config expects {}x{}",
            x.rows(),
            x.cols(),
            config.n_var,
            config.lookback
        )));
    }
    let (xn, state) = instance_norm(x).map_err(|e| stage_err("instance_norm", e))?;
    let z = ortho_apply(&xn, &basis.q_in).map_err(|e| stage_err("ortho_apply", e))?;
    let ext = dim_extend(&z, &params.phi).map_err(|e| stage_err("dim_extend", e))?;
    let mut h = params
        .embed
        .forward(&ext, None, "embed")
        .map_err(|e| stage_err("embed", e))?;
    for (i, block) in params.blocks.iter().enumerate() {
        let mixed = block
            .mixer
            .forward(&h, None)
            .map_err(|e| stage_err(&format!("block{i}.mixer"), e))?;
        let r1 = match block.mixer {
            Mixer::None => h,
            _ => h.add(&mixed),
        };
        let hvar = layer_norm(&r1, &block.ln1).map_err(|e| stage_err(&format!("block{i}.ln1"), e))?;
        let r2 = match &block.mlp {
            Some(mlp) => {
                let f = temporal_mlp_counted(&hvar, mlp, None)
                    .map_err(|e| stage_err(&format!("block{i}.mlp"), e))?;
                hvar.add(&f)
            }
            None => hvar,
        };
        h = layer_norm(&r2, &block.ln2).map_err(|e| stage_err(&format!("block{i}.ln2"), e))?;
    }
    let p = params
        .proj
        .forward(&h, None, "projection")
        .map_err(|e| stage_err("projection", e))?;
    let cond = ortho_inverse_apply(&p, &basis.q_out).map_err(|e| stage_err("ortho_inverse", e))?;
    Ok((cond, state))
}

/// A named view of every learnable tensor, in the fixed order used by the
/// checkpoint format, the optimizer, and the gradient checker.
pub struct TensorRef<'a> {
    pub name: String,
    pub mat: &'a Mat,
}

pub struct TensorMut<'a> {
    pub name: String,
    pub mat: &'a mut Mat,
}

impl ModelParams {
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        collect_names(self, &mut |name, mat| out.push(TensorRef { name, mat }));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        collect_names_mut(self, &mut |name, mat| out.push(TensorMut { name, mat }));
        out
    }

    /// Same structure with every tensor zeroed: the shape of a gradient or
    /// moment accumulator.
    pub fn zeros_like(&self) -> ModelParams {
        let mut copy = self.clone();
        for t in copy.tensors_mut() {
            for v in t.mat.data_mut() {
                *v = 0.0;
            }
        }
        copy
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors().iter().map(|t| t.mat.data().len()).sum()
    }

    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        let a = self.tensors();
        let b = other.tensors();
        a.iter()
            .zip(&b)
            .map(|(x, y)| x.mat.max_abs_diff(y.mat))
            .fold(0.0, f64::max)
    }
}

fn collect_names<'a>(p: &'a ModelParams, f: &mut impl FnMut(String, &'a Mat)) {
    f("phi".into(), &p.encoder.phi.phi);
    f("embed.w".into(), &p.encoder.embed.w);
    f("embed.b".into(), &p.encoder.embed.b);
    for (i, b) in p.encoder.blocks.iter().enumerate() {
        let pre = format!("block{i}.");
        match &b.mixer {
            Mixer::VecTrans(v) => {
                f(format!("{pre}mixer.a"), &v.a);
                f(format!("{pre}mixer.pre.w"), &v.pre.w);
                f(format!("{pre}mixer.pre.b"), &v.pre.b);
                f(format!("{pre}mixer.post.w"), &v.post.w);
                f(format!("{pre}mixer.post.b"), &v.post.b);
            }
            Mixer::RankK { params, pre: prelin, post } => {
                f(format!("{pre}mixer.a_mat"), &params.a_mat);
                f(format!("{pre}mixer.b_mat"), &params.b_mat);
                f(format!("{pre}mixer.pre.w"), &prelin.w);
                f(format!("{pre}mixer.pre.b"), &prelin.b);
                f(format!("{pre}mixer.post.w"), &post.w);
                f(format!("{pre}mixer.post.b"), &post.b);
            }
            Mixer::Mhsa(m) => {
                f(format!("{pre}mixer.wq.w"), &m.wq.w);
                f(format!("{pre}mixer.wq.b"), &m.wq.b);
                f(format!("{pre}mixer.wk.w"), &m.wk.w);
                f(format!("{pre}mixer.wk.b"), &m.wk.b);
                f(format!("{pre}mixer.wv.w"), &m.wv.w);
                f(format!("{pre}mixer.wv.b"), &m.wv.b);
                f(format!("{pre}mixer.wo.w"), &m.wo.w);
                f(format!("{pre}mixer.wo.b"), &m.wo.b);
            }
            Mixer::NormLin { params, pre: prelin, post } => {
                f(format!("{pre}mixer.w"), &params.w);
                f(format!("{pre}mixer.pre.w"), &prelin.w);
                f(format!("{pre}mixer.pre.b"), &prelin.b);
                f(format!("{pre}mixer.post.w"), &post.w);
                f(format!("{pre}mixer.post.b"), &post.b);
            }
            Mixer::None => {}
        }
        if let Some(mlp) = &b.mlp {
            f(format!("{pre}mlp.w1"), &mlp.w1);
            f(format!("{pre}mlp.b1"), &mlp.b1);
            f(format!("{pre}mlp.w2"), &mlp.w2);
            f(format!("{pre}mlp.b2"), &mlp.b2);
        }
        f(format!("{pre}ln1.gamma"), &b.ln1.gamma);
        f(format!("{pre}ln1.beta"), &b.ln1.beta);
        f(format!("{pre}ln2.gamma"), &b.ln2.gamma);
        f(format!("{pre}ln2.beta"), &b.ln2.beta);
    }
    f("proj.w".into(), &p.encoder.proj.w);
    f("proj.b".into(), &p.encoder.proj.b);
    f("wfm.w".into(), &p.wfm.w);
    f("wfm.b".into(), &p.wfm.b);
    f("wfm.s".into(), &p.wfm.s);
}

fn collect_names_mut<'a>(p: &'a mut ModelParams, f: &mut impl FnMut(String, &'a mut Mat)) {
    f("phi".into(), &mut p.encoder.phi.phi);
    f("embed.w".into(), &mut p.encoder.embed.w);
    f("embed.b".into(), &mut p.encoder.embed.b);
    for (i, b) in p.encoder.blocks.iter_mut().enumerate() {
        let pre = format!("block{i}.");
        match &mut b.mixer {
            Mixer::VecTrans(v) => {
                f(format!("{pre}mixer.a"), &mut v.a);
                f(format!("{pre}mixer.pre.w"), &mut v.pre.w);
                f(format!("{pre}mixer.pre.b"), &mut v.pre.b);
                f(format!("{pre}mixer.post.w"), &mut v.post.w);
                f(format!("{pre}mixer.post.b"), &mut v.post.b);
            }
            Mixer::RankK { params, pre: prelin, post } => {
                f(format!("{pre}mixer.a_mat"), &mut params.a_mat);
                f(format!("{pre}mixer.b_mat"), &mut params.b_mat);
                f(format!("{pre}mixer.pre.w"), &mut prelin.w);
                f(format!("{pre}mixer.pre.b"), &mut prelin.b);
                f(format!("{pre}mixer.post.w"), &mut post.w);
                f(format!("{pre}mixer.post.b"), &mut post.b);
            }
            Mixer::Mhsa(m) => {
                f(format!("{pre}mixer.wq.w"), &mut m.wq.w);
                f(format!("{pre}mixer.wq.b"), &mut m.wq.b);
                f(format!("{pre}mixer.wk.w"), &mut m.wk.w);
                f(format!("{pre}mixer.wk.b"), &mut m.wk.b);
                f(format!("{pre}mixer.wv.w"), &mut m.wv.w);
                f(format!("{pre}mixer.wv.b"), &mut m.wv.b);
                f(format!("{pre}mixer.wo.w"), &mut m.wo.w);
                f(format!("{pre}mixer.wo.b"), &mut m.wo.b);
            }
            Mixer::NormLin { params, pre: prelin, post } => {
                f(format!("{pre}mixer.w"), &mut params.w);
                f(format!("{pre}mixer.pre.w"), &mut prelin.w);
                f(format!("{pre}mixer.pre.b"), &mut prelin.b);
                f(format!("{pre}mixer.post.w"), &mut post.w);
                f(format!("{pre}mixer.post.b"), &mut post.b);
            }
            Mixer::None => {}
        }
        if let Some(mlp) = &mut b.mlp {
            f(format!("{pre}mlp.w1"), &mut mlp.w1);
            f(format!("{pre}mlp.b1"), &mut mlp.b1);
            f(format!("{pre}mlp.w2"), &mut mlp.w2);
            f(format!("{pre}mlp.b2"), &mut mlp.b2);
        }
        f(format!("{pre}ln1.gamma"), &mut b.ln1.gamma);
        f(format!("{pre}ln1.beta"), &mut b.ln1.beta);
        f(format!("{pre}ln2.gamma"), &mut b.ln2.gamma);
        f(format!("{pre}ln2.beta"), &mut b.ln2.beta);
    }
    f("proj.w".into(), &mut p.encoder.proj.w);
    f("proj.b".into(), &mut p.encoder.proj.b);
    f("wfm.w".into(), &mut p.wfm.w);
    f("wfm.b".into(), &mut p.wfm.b);
    f("wfm.s".into(), &mut p.wfm.s);
}
