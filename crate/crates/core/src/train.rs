//! Reverse-mode gradients for the fixed computation graph, a central
//! finite-difference verifier, the ADAM optimizer, early stopping, and
//! text checkpoints.
//!
//! The backward pass is written layer by layer against the cached forward
//! activations. Instance-norm statistics and the orthogonal bases are data,
//! not parameters: no gradient flows into them. The noise scale s receives
//! its total derivative through both occurrences of the initial state (the
//! interpolated state itself and the velocity-head input).

use crate::data::{GlobalStats, Sample};
use crate::error::{Error, Result};
use crate::flowmatch::{
    softplus, wfm_features, FlowTime, LossKind, LossSpec, StepDraws, WfmParams,
};
use crate::linalg::{mat_mul, mat_mul_nt, mat_mul_tn, Mat, RngState};
use crate::mixers::{
    gelu, gelu_prime, sigmoid, softmax_row, LayerNormParams, LinearLayer, Mixer, MlpParams,
    LAYER_NORM_EPS,
};
use crate::model::{
    forward_cond, CondOutput, MixerKind, ModelConfig, ModelParams, TemporalKind,
};
use crate::transforms::{
    dim_extend, instance_norm, normalize_with, ortho_apply, InstanceNormState, OrthoBasis,
};
use std::io::Write;
use std::path::Path;

/// Gradients mirror the parameter structure tensor for tensor.
pub type GradBundle = ModelParams;

pub const FD_TOLERANCE: f64 = 1e-4;

/// Entries where both the analytic and central-difference estimates are
/// below this are matching numerical zeros (cancellation dust); comparing
/// them against the 1e-8 denominator floor would only measure noise.
const FD_ZERO_MASK: f64 = 1e-9;

// Stream tags for deriving independent RNG streams from one seed.
pub const STREAM_INIT: u64 = 1;
pub const STREAM_SHUFFLE: u64 = 2;
pub const STREAM_NOISE: u64 = 3;
pub const STREAM_SYNTH: u64 = 4;
pub const STREAM_EVAL: u64 = 5;

// ---------------------------------------------------------------------------
// Cached forward pass
// ---------------------------------------------------------------------------

struct LnCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

fn ln_forward_cached(h: &Mat, p: &LayerNormParams) -> (Mat, LnCache) {
    let (n, d) = (h.rows(), h.cols());
    let mut out = Mat::zeros(n, d);
    let mut xhat = Mat::zeros(n, d);
    let mut inv_std = vec![0.0; n];
    let df = d as f64;
    for r in 0..n {
        let row = h.row(r);
        let m = row.iter().sum::<f64>() / df;
        let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / df;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[r] = inv;
        for c in 0..d {
            let xh = (row[c] - m) * inv;
            xhat.set(r, c, xh);
            out.set(r, c, p.gamma.get(0, c) * xh + p.beta.get(0, c));
        }
    }
    (out, LnCache { xhat, inv_std })
}

fn ln_backward(
    cache: &LnCache,
    p: &LayerNormParams,
    dout: &Mat,
    dgamma: &mut Mat,
    dbeta: &mut Mat,
) -> Mat {
    let (n, d) = (dout.rows(), dout.cols());
    let df = d as f64;
    let mut din = Mat::zeros(n, d);
    for r in 0..n {
        let do_row = dout.row(r);
        let xh_row = cache.xhat.row(r);
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        let mut dxhat = vec![0.0; d];
        for c in 0..d {
            dgamma.row_mut(0)[c] += do_row[c] * xh_row[c];
            dbeta.row_mut(0)[c] += do_row[c];
            let v = do_row[c] * p.gamma.get(0, c);
            dxhat[c] = v;
            mean_dxhat += v;
            mean_dxhat_xhat += v * xh_row[c];
        }
        mean_dxhat /= df;
        mean_dxhat_xhat /= df;
        let inv = cache.inv_std[r];
        for c in 0..d {
            din.set(r, c, inv * (dxhat[c] - mean_dxhat - xh_row[c] * mean_dxhat_xhat));
        }
    }
    din
}

struct MlpCache {
    input: Mat,
    z1: Mat,
    g1: Mat,
}

fn mlp_forward_cached(h: &Mat, p: &MlpParams) -> Result<(Mat, MlpCache)> {
    let mut z1 = mat_mul(h, &p.w1)?;
    for r in 0..z1.rows() {
        for (v, &b) in z1.row_mut(r).iter_mut().zip(p.b1.row(0)) {
            *v += b;
        }
    }
    let g1 = z1.map(gelu);
    let mut out = mat_mul(&g1, &p.w2)?;
    for r in 0..out.rows() {
        for (v, &b) in out.row_mut(r).iter_mut().zip(p.b2.row(0)) {
            *v += b;
        }
    }
    Ok((out, MlpCache { input: h.clone(), z1, g1 }))
}

fn colsum_into(m: &Mat, acc: &mut Mat) {
    for r in 0..m.rows() {
        for (a, &v) in acc.row_mut(0).iter_mut().zip(m.row(r)) {
            *a += v;
        }
    }
}

fn mlp_backward(cache: &MlpCache, p: &MlpParams, dout: &Mat, g: &mut MlpParams) -> Result<Mat> {
    let dw2 = mat_mul_tn(&cache.g1, dout)?;
    g.w2 = g.w2.add(&dw2);
    colsum_into(dout, &mut g.b2);
    let dg1 = mat_mul_nt(dout, &p.w2)?;
    let mut dz1 = dg1;
    for r in 0..dz1.rows() {
        for (v, &z) in dz1.row_mut(r).iter_mut().zip(cache.z1.row(r)) {
            *v *= gelu_prime(z);
        }
    }
    let dw1 = mat_mul_tn(&cache.input, &dz1)?;
    g.w1 = g.w1.add(&dw1);
    colsum_into(&dz1, &mut g.b1);
    mat_mul_nt(&dz1, &p.w1)
}

fn linear_forward_cached(x: &Mat, l: &LinearLayer) -> Result<Mat> {
    l.forward(x, None, "fwd")
}

/// Accumulates dW and db for `out = x w + b` and returns dx.
fn linear_backward(x: &Mat, l: &LinearLayer, dout: &Mat, g: &mut LinearLayer) -> Result<Mat> {
    let dw = mat_mul_tn(x, dout)?;
    g.w = g.w.add(&dw);
    colsum_into(dout, &mut g.b);
    mat_mul_nt(dout, &l.w)
}

enum MixerCache {
    VecTrans {
        input: Mat,
        u: Mat,
        sig: Vec<f64>,
        w: Vec<f64>,
        wsum: f64,
        mixed: Mat,
    },
    RankK {
        input: Mat,
        u: Mat,
        wsig: Mat,
        pmat: Mat,
        c: Vec<f64>,
        num: Mat,
        den: Vec<f64>,
        mixed: Mat,
    },
    Mhsa {
        input: Mat,
        q: Mat,
        k: Mat,
        v: Mat,
        probs: Vec<Mat>,
        concat: Mat,
    },
    NormLin {
        input: Mat,
        u: Mat,
        sg: Mat,
        rowsum: Vec<f64>,
        weff: Mat,
        mixed: Mat,
    },
    None,
}

fn mixer_forward_cached(mixer: &Mixer, h: &Mat) -> Result<(Mat, MixerCache)> {
    match mixer {
        Mixer::VecTrans(p) => {
            let u = linear_forward_cached(h, &p.pre)?;
            let n = u.rows();
            let sig: Vec<f64> = p.a.row(0).iter().map(|&v| sigmoid(v)).collect();
            let wsum: f64 = sig.iter().sum();
            let w: Vec<f64> = sig.iter().map(|v| v / wsum).collect();
            let mut gvec = vec![0.0; u.cols()];
            for (r, &wr) in w.iter().enumerate() {
                for (acc, &v) in gvec.iter_mut().zip(u.row(r)) {
                    *acc += wr * v;
                }
            }
            let mut mixed = Mat::zeros(n, u.cols());
            for r in 0..n {
                mixed.row_mut(r).copy_from_slice(&gvec);
            }
            let out = linear_forward_cached(&mixed, &p.post)?;
            Ok((out, MixerCache::VecTrans { input: h.clone(), u, sig, w, wsum, mixed }))
        }
        Mixer::RankK { params, pre, post } => {
            let u = linear_forward_cached(h, pre)?;
            let n = u.rows();
            let k = params.k();
            let wsig = params.b_mat.map(sigmoid);
            let pmat = mat_mul_tn(&wsig, &u)?;
            let mut c = vec![0.0; k];
            for r in 0..n {
                for (j, acc) in c.iter_mut().enumerate() {
                    *acc += wsig.get(r, j);
                }
            }
            let num = mat_mul(&params.a_mat, &pmat)?;
            let mut den = vec![0.0; n];
            let mut mixed = Mat::zeros(n, u.cols());
            for r in 0..n {
                let mut dsum = 0.0;
                for j in 0..k {
                    dsum += params.a_mat.get(r, j) * c[j];
                }
                if dsum == 0.0 {
                    return Err(Error::Invalid(format!(
                        "rank-k denominator is zero for token {r}"
                    )));
                }
                den[r] = dsum;
                let inv = 1.0 / dsum;
                for (o, &v) in mixed.row_mut(r).iter_mut().zip(num.row(r)) {
                    *o = v * inv;
                }
            }
            let out = linear_forward_cached(&mixed, post)?;
            Ok((out, MixerCache::RankK { input: h.clone(), u, wsig, pmat, c, num, den, mixed }))
        }
        Mixer::Mhsa(p) => {
            let (n, d) = (h.rows(), h.cols());
            if d % p.heads != 0 {
                return Err(Error::Shape(format!("width {d} not divisible by {} heads", p.heads)));
            }
            let dh = d / p.heads;
            let q = linear_forward_cached(h, &p.wq)?;
            let k = linear_forward_cached(h, &p.wk)?;
            let v = linear_forward_cached(h, &p.wv)?;
            let scale = 1.0 / (dh as f64).sqrt();
            let mut probs = Vec::with_capacity(p.heads);
            let mut concat = Mat::zeros(n, d);
            for head in 0..p.heads {
                let off = head * dh;
                let mut scores = Mat::zeros(n, n);
                for i in 0..n {
                    let qi = &q.row(i)[off..off + dh];
                    for j in 0..n {
                        let kj = &k.row(j)[off..off + dh];
                        let mut s = 0.0;
                        for (a, b) in qi.iter().zip(kj) {
                            s += a * b;
                        }
                        scores.set(i, j, s * scale);
                    }
                }
                for i in 0..n {
                    softmax_row(scores.row_mut(i));
                }
                for i in 0..n {
                    let out_row = &mut concat.row_mut(i)[off..off + dh];
                    for j in 0..n {
                        let pij = scores.get(i, j);
                        let vj = &v.row(j)[off..off + dh];
                        for (o, &x) in out_row.iter_mut().zip(vj) {
                            *o += pij * x;
                        }
                    }
                }
                probs.push(scores);
            }
            let out = linear_forward_cached(&concat, &p.wo)?;
            Ok((out, MixerCache::Mhsa { input: h.clone(), q, k, v, probs, concat }))
        }
        Mixer::NormLin { params, pre, post } => {
            let u = linear_forward_cached(h, pre)?;
            let sg = params.w.map(sigmoid);
            let n = sg.rows();
            let mut rowsum = vec![0.0; n];
            let mut weff = sg.clone();
            for r in 0..n {
                let s: f64 = weff.row(r).iter().sum();
                rowsum[r] = s;
                for v in weff.row_mut(r) {
                    *v /= s;
                }
            }
            let mixed = mat_mul(&weff, &u)?;
            let out = linear_forward_cached(&mixed, post)?;
            Ok((out, MixerCache::NormLin { input: h.clone(), u, sg, rowsum, weff, mixed }))
        }
        Mixer::None => Ok((h.clone(), MixerCache::None)),
    }
}

fn mixer_backward(
    mixer: &Mixer,
    cache: &MixerCache,
    dout: &Mat,
    grads: &mut Mixer,
) -> Result<Mat> {
    match (mixer, cache, grads) {
        (Mixer::VecTrans(p), MixerCache::VecTrans { input, u, sig, w, wsum, mixed }, Mixer::VecTrans(g)) => {
            let dmixed = linear_backward(mixed, &p.post, dout, &mut g.post)?;
            let dcols = u.cols();
            let n = u.rows();
            let mut dg = vec![0.0; dcols];
            for r in 0..n {
                for (acc, &v) in dg.iter_mut().zip(dmixed.row(r)) {
                    *acc += v;
                }
            }
            let mut dw = vec![0.0; n];
            let mut du = Mat::zeros(n, dcols);
            for r in 0..n {
                let urow = u.row(r);
                let mut s = 0.0;
                for (c, &dgc) in dg.iter().enumerate() {
                    s += dgc * urow[c];
                    du.set(r, c, w[r] * dgc);
                }
                dw[r] = s;
            }
            let dot: f64 = dw.iter().zip(w).map(|(a, b)| a * b).sum();
            for r in 0..n {
                let dsig = (dw[r] - dot) / wsum;
                let da = dsig * sig[r] * (1.0 - sig[r]);
                g.a.row_mut(0)[r] += da;
            }
            linear_backward(input, &p.pre, &du, &mut g.pre)
        }
        (
            Mixer::RankK { params, pre, post },
            MixerCache::RankK { input, u, wsig, pmat, c, num, den, mixed },
            Mixer::RankK { params: gp, pre: gpre, post: gpost },
        ) => {
            let dmixed = linear_backward(mixed, post, dout, gpost)?;
            let (n, dcols) = (u.rows(), u.cols());
            let k = params.k();
            let mut dnum = Mat::zeros(n, dcols);
            let mut dden = vec![0.0; n];
            for r in 0..n {
                let inv = 1.0 / den[r];
                let mut dot = 0.0;
                for (cix, &dm) in dmixed.row(r).iter().enumerate() {
                    dnum.set(r, cix, dm * inv);
                    dot += dm * num.get(r, cix);
                }
                dden[r] = -dot * inv * inv;
            }
            // dA = dnum P^T + dden c^T
            let danum = mat_mul_nt(&dnum, pmat)?;
            for r in 0..n {
                for j in 0..k {
                    gp.a_mat.row_mut(r)[j] += danum.get(r, j) + dden[r] * c[j];
                }
            }
            let dp = mat_mul_tn(&params.a_mat, &dnum)?;
            let mut dc = vec![0.0; k];
            for r in 0..n {
                for (j, acc) in dc.iter_mut().enumerate() {
                    *acc += dden[r] * params.a_mat.get(r, j);
                }
            }
            // dW = u dP^T + 1 dc^T, then through the sigmoid.
            let dwmat = mat_mul_nt(u, &dp)?;
            for r in 0..n {
                for j in 0..k {
                    let dwv = dwmat.get(r, j) + dc[j];
                    let sg = wsig.get(r, j);
                    gp.b_mat.row_mut(r)[j] += dwv * sg * (1.0 - sg);
                }
            }
            let du = mat_mul(wsig, &dp)?;
            linear_backward(input, pre, &du, gpre)
        }
        (Mixer::Mhsa(p), MixerCache::Mhsa { input, q, k, v, probs, concat }, Mixer::Mhsa(g)) => {
            let (n, d) = (input.rows(), input.cols());
            let dh = d / p.heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let dconcat = linear_backward(concat, &p.wo, dout, &mut g.wo)?;
            let mut dq = Mat::zeros(n, d);
            let mut dk = Mat::zeros(n, d);
            let mut dv = Mat::zeros(n, d);
            for head in 0..p.heads {
                let off = head * dh;
                let pmat = &probs[head];
                // dP = dOh Vh^T, dVh = P^T dOh
                let mut dp = Mat::zeros(n, n);
                for i in 0..n {
                    let doh = &dconcat.row(i)[off..off + dh];
                    for j in 0..n {
                        let vj = &v.row(j)[off..off + dh];
                        let mut s = 0.0;
                        for (a, b) in doh.iter().zip(vj) {
                            s += a * b;
                        }
                        dp.set(i, j, s);
                    }
                }
                for j in 0..n {
                    for i in 0..n {
                        let pij = pmat.get(i, j);
                        let doh = &dconcat.row(i)[off..off + dh];
                        let dvj = &mut dv.row_mut(j)[off..off + dh];
                        for (o, &x) in dvj.iter_mut().zip(doh) {
                            *o += pij * x;
                        }
                    }
                }
                // Softmax backward per row.
                let mut ds = Mat::zeros(n, n);
                for i in 0..n {
                    let prow = pmat.row(i);
                    let dprow = dp.row(i);
                    let dot: f64 = prow.iter().zip(dprow).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        ds.set(i, j, prow[j] * (dprow[j] - dot));
                    }
                }
                // dQh = dS Kh * scale, dKh = dS^T Qh * scale
                for i in 0..n {
                    let dsrow = ds.row(i);
                    let dqi = &mut dq.row_mut(i)[off..off + dh];
                    for j in 0..n {
                        let kj = &k.row(j)[off..off + dh];
                        let w = dsrow[j] * scale;
                        for (o, &x) in dqi.iter_mut().zip(kj) {
                            *o += w * x;
                        }
                    }
                }
                for j in 0..n {
                    let dkj_acc: Vec<f64> = {
                        let mut acc = vec![0.0; dh];
                        for i in 0..n {
                            let w = ds.get(i, j) * scale;
                            let qi = &q.row(i)[off..off + dh];
                            for (o, &x) in acc.iter_mut().zip(qi) {
                                *o += w * x;
                            }
                        }
                        acc
                    };
                    let dkj = &mut dk.row_mut(j)[off..off + dh];
                    for (o, x) in dkj.iter_mut().zip(dkj_acc) {
                        *o += x;
                    }
                }
            }
            let din_q = linear_backward(input, &p.wq, &dq, &mut g.wq)?;
            let din_k = linear_backward(input, &p.wk, &dk, &mut g.wk)?;
            let din_v = linear_backward(input, &p.wv, &dv, &mut g.wv)?;
            Ok(din_q.add(&din_k).add(&din_v))
        }
        (
            Mixer::NormLin { params, pre, post },
            MixerCache::NormLin { input, u, sg, rowsum, weff, mixed },
            Mixer::NormLin { params: gp, pre: gpre, post: gpost },
        ) => {
            let dmixed = linear_backward(mixed, post, dout, gpost)?;
            let dweff = mat_mul_nt(&dmixed, u)?;
            let du = mat_mul_tn(weff, &dmixed)?;
            let n = sg.rows();
            for r in 0..n {
                let dwrow = dweff.row(r);
                let werow = weff.row(r);
                let dot: f64 = dwrow.iter().zip(werow).map(|(a, b)| a * b).sum();
                for m in 0..n {
                    let dsg = (dwrow[m] - dot) / rowsum[r];
                    let s = sg.get(r, m);
                    gp.w.row_mut(r)[m] += dsg * s * (1.0 - s);
                }
            }
            let _ = params;
            linear_backward(input, pre, &du, gpre)
        }
        (Mixer::None, MixerCache::None, Mixer::None) => Ok(dout.clone()),
        _ => Err(Error::Gradient("mixer/cache/grad variants disagree".into())),
    }
}

struct BlockCache {
    input: Mat,
    mixer: MixerCache,
    r1: Mat,
    ln1: LnCache,
    hvar: Mat,
    mlp: Option<MlpCache>,
    r2: Mat,
    ln2: LnCache,
}

struct ForwardCache {
    z_ortho: Mat,
    extended: Mat,
    blocks: Vec<BlockCache>,
    h_final: Mat,
    proj_out: Mat,
    cond: Mat,
    state: InstanceNormState,
}

fn encoder_forward_cached(
    x: &Mat,
    params: &ModelParams,
    basis: &OrthoBasis,
    config: &ModelConfig,
) -> Result<ForwardCache> {
    if x.rows() != config.n_var || x.cols() != config.lookback {
        return Err(Error::Shape(format!(
            "input {}x{}, config expects {}x{}",
            x.rows(),
            x.cols(),
            config.n_var,
            config.lookback
        )));
    }
    let (xn, state) = instance_norm(x)?;
    let z_ortho = ortho_apply(&xn, &basis.q_in)?;
    let extended = dim_extend(&z_ortho, &params.encoder.phi)?;
    let mut h = linear_forward_cached(&extended, &params.encoder.embed)?;
    let mut blocks = Vec::with_capacity(params.encoder.blocks.len());
    for block in &params.encoder.blocks {
        let input = h;
        let (mixed, mixer_cache) = mixer_forward_cached(&block.mixer, &input)?;
        let r1 = match block.mixer {
            Mixer::None => input.clone(),
            _ => input.add(&mixed),
        };
        let (hvar, ln1) = ln_forward_cached(&r1, &block.ln1);
        let (r2, mlp_cache) = match &block.mlp {
            Some(mlp) => {
                let (f, cache) = mlp_forward_cached(&hvar, mlp)?;
                (hvar.add(&f), Some(cache))
            }
            None => (hvar.clone(), None),
        };
        let (hout, ln2) = ln_forward_cached(&r2, &block.ln2);
        blocks.push(BlockCache { input, mixer: mixer_cache, r1, ln1, hvar, mlp: mlp_cache, r2, ln2 });
        h = hout;
    }
    let h_final = h;
    let proj_out = linear_forward_cached(&h_final, &params.encoder.proj)?;
    let cond = mat_mul_nt(&proj_out, &basis.q_out)?;
    Ok(ForwardCache { z_ortho, extended, blocks, h_final, proj_out, cond, state })
}

fn encoder_backward(
    cache: &ForwardCache,
    params: &ModelParams,
    basis: &OrthoBasis,
    dcond: &Mat,
    grads: &mut GradBundle,
) -> Result<()> {
    // cond = proj_out q_out^T  =>  d proj_out = dcond q_out.
    let dproj_out = mat_mul(dcond, &basis.q_out)?;
    let mut dh = linear_backward(
        &cache.h_final,
        &params.encoder.proj,
        &dproj_out,
        &mut grads.encoder.proj,
    )?;
    for (i, block) in params.encoder.blocks.iter().enumerate().rev() {
        let bc = &cache.blocks[i];
        let gb = &mut grads.encoder.blocks[i];
        let dr2 = ln_backward(&bc.ln2, &block.ln2, &dh, &mut gb.ln2.gamma, &mut gb.ln2.beta);
        let dhvar_total = match (&block.mlp, &bc.mlp) {
            (Some(mlp), Some(mlp_cache)) => {
                let dmlp_in = mlp_backward(mlp_cache, mlp, &dr2, gb.mlp.as_mut().unwrap())?;
                dr2.add(&dmlp_in)
            }
            _ => dr2,
        };
        let dr1 = ln_backward(&bc.ln1, &block.ln1, &dhvar_total, &mut gb.ln1.gamma, &mut gb.ln1.beta);
        dh = match block.mixer {
            Mixer::None => dr1,
            _ => {
                let dmixer_in = mixer_backward(&block.mixer, &bc.mixer, &dr1, &mut gb.mixer)?;
                dr1.add(&dmixer_in)
            }
        };
    }
    let dext = linear_backward(&cache.extended, &params.encoder.embed, &dh, &mut grads.encoder.embed)?;
    // dphi[j] = sum_{n,tau} dext[n, j*T + tau] * z[n, tau]
    let t = cache.z_ortho.cols();
    for j in 0..params.encoder.phi.d() {
        let mut acc = 0.0;
        for n in 0..cache.z_ortho.rows() {
            let zrow = cache.z_ortho.row(n);
            let drow = &dext.row(n)[j * t..(j + 1) * t];
            for (a, b) in drow.iter().zip(zrow) {
                acc += a * b;
            }
        }
        grads.encoder.phi.phi.row_mut(0)[j] += acc;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Loss and its gradient
// ---------------------------------------------------------------------------

/// Per-entry weight matrix coefficients for the weighted-MAE losses:
/// w[n][i] = (2-t)^alpha * (i+1)^beta / (H*N).
fn weight_coeff(spec: &LossSpec, t: f64, n: usize, h: usize, col: usize) -> f64 {
    spec.path_weight(t) * ((col + 1) as f64).powf(spec.beta) / (h as f64 * n as f64)
}

#[inline]
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Loss of one sample given frozen draws, plus gradients accumulated into
/// `grads`. Returns the scalar loss.
fn sample_loss_grads(
    sample: &Sample,
    params: &ModelParams,
    basis: &OrthoBasis,
    config: &ModelConfig,
    spec: &LossSpec,
    draws: &StepDraws,
    grads: &mut GradBundle,
) -> Result<f64> {
    let cache = encoder_forward_cached(&sample.x, params, basis, config)?;
    let y_gt_norm = normalize_with(&sample.y, &cache.state)?;
    let (n, h) = (y_gt_norm.rows(), y_gt_norm.cols());
    let t = draws.t;
    let std = params.wfm.noise_std();
    let y0 = draws.eps.scale(std);
    let y_t = y_gt_norm.scale(t).add(&y0.scale(1.0 - t));

    let feats = wfm_features(&cache.cond, &y_t, t);
    let mut v = mat_mul(&feats, &params.wfm.w)?;
    for r in 0..n {
        for (o, &b) in v.row_mut(r).iter_mut().zip(params.wfm.b.row(0)) {
            *o += b;
        }
    }

    // Loss and the gradient dL/dv plus any direct contribution to y_t / y0.
    let mut dv = Mat::zeros(n, h);
    let mut dy_t = Mat::zeros(n, h);
    let mut dy0 = Mat::zeros(n, h);
    let loss = match spec.kind {
        LossKind::Wfm => {
            let y1 = y_t.add(&v.scale(1.0 - t));
            let mut loss = 0.0;
            for r in 0..n {
                for c in 0..h {
                    let resid = y1.get(r, c) - y_gt_norm.get(r, c);
                    let w = weight_coeff(spec, t, n, h, c);
                    loss += w * resid.abs();
                    let dy1 = w * sign0(resid);
                    // y1 = y_t + (1-t) v
                    dy_t.row_mut(r)[c] += dy1;
                    dv.row_mut(r)[c] += (1.0 - t) * dy1;
                }
            }
            loss
        }
        LossKind::VelWeighted | LossKind::VelMse => {
            let v_gt = y_gt_norm.sub(&y0);
            let mut loss = 0.0;
            for r in 0..n {
                for c in 0..h {
                    let resid = v.get(r, c) - v_gt.get(r, c);
                    match spec.kind {
                        LossKind::VelMse => {
                            let scale = 1.0 / (n as f64 * h as f64);
                            loss += resid * resid * scale;
                            let d = 2.0 * resid * scale;
                            dv.row_mut(r)[c] += d;
                            // v_gt = y_gt - y0: dL/dy0 = +d.
                            dy0.row_mut(r)[c] += d;
                        }
                        LossKind::VelWeighted => {
                            let w = weight_coeff(spec, t, n, h, c);
                            loss += w * resid.abs();
                            let d = w * sign0(resid);
                            dv.row_mut(r)[c] += d;
                            dy0.row_mut(r)[c] += d;
                        }
                        LossKind::Wfm => unreachable!(),
                    }
                }
            }
            loss
        }
    };

    // Velocity head backward: v = feats W + b.
    let dw = mat_mul_tn(&feats, &dv)?;
    grads.wfm.w = grads.wfm.w.add(&dw);
    colsum_into(&dv, &mut grads.wfm.b);
    let dfeats = mat_mul_nt(&dv, &params.wfm.w)?;
    let mut dcond = Mat::zeros(n, h);
    for r in 0..n {
        let drow = dfeats.row(r);
        for c in 0..h {
            dcond.row_mut(r)[c] += drow[c];
            dy_t.row_mut(r)[c] += drow[h + c];
        }
    }

    // y_t = t y_gt + (1-t) y0.
    for r in 0..n {
        for c in 0..h {
            dy0.row_mut(r)[c] += (1.0 - t) * dy_t.get(r, c);
        }
    }
    // y0 = softplus(s) eps: ds accumulates sigmoid(s) * sum(dy0 . eps).
    let dstd: f64 = dy0
        .data()
        .iter()
        .zip(draws.eps.data())
        .map(|(a, b)| a * b)
        .sum();
    grads.wfm.s.row_mut(0)[0] += dstd * sigmoid(params.wfm.s.get(0, 0));

    encoder_backward(&cache, params, basis, &dcond, grads)?;
    Ok(loss)
}

/// Forward-only loss used by the finite-difference verifier. Must follow the
/// exact computation of `sample_loss_grads`.
fn sample_loss_only(
    sample: &Sample,
    params: &ModelParams,
    basis: &OrthoBasis,
    config: &ModelConfig,
    spec: &LossSpec,
    draws: &StepDraws,
) -> Result<f64> {
    let cond_out: CondOutput = forward_cond(&sample.x, &params.encoder, basis, config)?;
    let y_gt_norm = normalize_with(&sample.y, &cond_out.norm_state)?;
    let (n, h) = (y_gt_norm.rows(), y_gt_norm.cols());
    let t = draws.t;
    let y0 = draws.eps.scale(params.wfm.noise_std());
    let y_t = y_gt_norm.scale(t).add(&y0.scale(1.0 - t));
    let feats = wfm_features(&cond_out.cond, &y_t, t);
    let mut v = mat_mul(&feats, &params.wfm.w)?;
    for r in 0..n {
        for (o, &b) in v.row_mut(r).iter_mut().zip(params.wfm.b.row(0)) {
            *o += b;
        }
    }
    let loss = match spec.kind {
        LossKind::Wfm => {
            let y1 = y_t.add(&v.scale(1.0 - t));
            let mut loss = 0.0;
            for r in 0..n {
                for c in 0..h {
                    let resid = y1.get(r, c) - y_gt_norm.get(r, c);
                    loss += weight_coeff(spec, t, n, h, c) * resid.abs();
                }
            }
            loss
        }
        LossKind::VelMse => {
            let v_gt = y_gt_norm.sub(&y0);
            let scale = 1.0 / (n as f64 * h as f64);
            v.sub(&v_gt).data().iter().map(|r| r * r * scale).sum()
        }
        LossKind::VelWeighted => {
            let v_gt = y_gt_norm.sub(&y0);
            let mut loss = 0.0;
            for r in 0..n {
                for c in 0..h {
                    let resid = v.get(r, c) - v_gt.get(r, c);
                    loss += weight_coeff(spec, t, n, h, c) * resid.abs();
                }
            }
            loss
        }
    };
    Ok(loss)
}

/// Batch loss (average over samples) and the exact analytic gradients of
/// that average. Draws one (t, noise) pair per sample from `rng`.
pub fn backward(
    batch: &[Sample],
    params: &ModelParams,
    basis: &OrthoBasis,
    config: &ModelConfig,
    spec: &LossSpec,
    rng: &mut RngState,
    with_noise: bool,
) -> Result<(f64, GradBundle)> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let draws: Vec<StepDraws> = batch
        .iter()
        .map(|_| StepDraws::sample(rng, config.n_var, config.horizon, with_noise))
        .collect::<Result<_>>()?;
    backward_with_draws(batch, &draws, params, basis, config, spec)
}

/// Same as [`backward`] but with caller-frozen draws (used by the gradient
/// checker so perturbed re-evaluations see identical randomness).
pub fn backward_with_draws(
    batch: &[Sample],
    draws: &[StepDraws],
    params: &ModelParams,
    basis: &OrthoBasis,
    config: &ModelConfig,
    spec: &LossSpec,
) -> Result<(f64, GradBundle)> {
    let mut grads = params.zeros_like();
    let mut loss_sum = 0.0;
    for (sample, d) in batch.iter().zip(draws) {
        loss_sum += sample_loss_grads(sample, params, basis, config, spec, d, &mut grads)?;
    }
    let inv = 1.0 / batch.len() as f64;
    for t in grads.tensors_mut() {
        for v in t.mat.data_mut() {
            *v *= inv;
        }
    }
    for t in grads.tensors() {
        if t.mat.has_nan() {
            return Err(Error::Gradient(format!("NaN in gradient tensor '{}'", t.name)));
        }
    }
    Ok((loss_sum * inv, grads))
}

/// Batch loss without gradients, for finite differencing.
pub fn batch_loss(
    batch: &[Sample],
    draws: &[StepDraws],
    params: &ModelParams,
    basis: &OrthoBasis,
    config: &ModelConfig,
    spec: &LossSpec,
) -> Result<f64> {
    let mut sum = 0.0;
    for (sample, d) in batch.iter().zip(draws) {
        sum += sample_loss_only(sample, params, basis, config, spec, d)?;
    }
    Ok(sum / batch.len() as f64)
}

// ---------------------------------------------------------------------------
// Finite-difference verification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FdReport {
    /// (tensor name, max relative error over its entries).
    pub per_tensor: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub worst_tensor: String,
    pub pass: bool,
}

/// Central-difference check of every gradient entry against the analytic
/// backward pass, with the (t, noise) draws frozen across perturbations.
/// `sabotage` zeroes the named tensor's analytic gradient first (negative
/// control for the checker itself).
pub fn finite_diff_check(
    params: &ModelParams,
    probe: &Sample,
    basis: &OrthoBasis,
    config: &ModelConfig,
    spec: &LossSpec,
    eps: f64,
    rng: &mut RngState,
    sabotage: Option<&str>,
) -> Result<FdReport> {
    if eps <= 0.0 {
        return Err(Error::Invalid(format!("eps {eps} must be positive")));
    }
    let draws = vec![StepDraws::sample(rng, config.n_var, config.horizon, true)?];
    let batch = std::slice::from_ref(probe);
    let (_, mut analytic) = backward_with_draws(batch, &draws, params, basis, config, spec)?;
    if let Some(name) = sabotage {
        let mut found = false;
        for t in analytic.tensors_mut() {
            if t.name == name {
                for v in t.mat.data_mut() {
                    *v = 0.0;
                }
                found = true;
            }
        }
        if !found {
            return Err(Error::Invalid(format!("no tensor named '{name}' to sabotage")));
        }
    }

    let mut work = params.clone();
    let names: Vec<String> = work.tensors().iter().map(|t| t.name.clone()).collect();
    let mut per_tensor = Vec::with_capacity(names.len());
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    for (ti, name) in names.iter().enumerate() {
        let len = work.tensors()[ti].mat.data().len();
        let mut tensor_max = 0.0f64;
        for i in 0..len {
            let orig = work.tensors()[ti].mat.data()[i];
            work.tensors_mut()[ti].mat.data_mut()[i] = orig + eps;
            let plus = batch_loss(batch, &draws, &work, basis, config, spec)?;
            work.tensors_mut()[ti].mat.data_mut()[i] = orig - eps;
            let minus = batch_loss(batch, &draws, &work, basis, config, spec)?;
            work.tensors_mut()[ti].mat.data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let an = analytic.tensors()[ti].mat.data()[i];
            if fd.abs() < FD_ZERO_MASK && an.abs() < FD_ZERO_MASK {
                continue;
            }
            let denom = fd.abs().max(an.abs()).max(1e-8);
            let rel = (fd - an).abs() / denom;
            tensor_max = tensor_max.max(rel);
        }
        if tensor_max > max_rel {
            max_rel = tensor_max;
            worst = name.clone();
        }
        per_tensor.push((name.clone(), tensor_max));
    }
    Ok(FdReport { per_tensor, max_rel_err: max_rel, worst_tensor: worst, pass: max_rel < FD_TOLERANCE })
}

// ---------------------------------------------------------------------------
// ADAM
// ---------------------------------------------------------------------------

/// Bias-corrected ADAM state: first/second moments mirroring the parameters.
pub struct AdamState {
    m: ModelParams,
    v: ModelParams,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(like: &ModelParams, lr: f64) -> Self {
        AdamState {
            m: like.zeros_like(),
            v: like.zeros_like(),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub fn adam_step(params: &mut ModelParams, grads: &GradBundle, state: &mut AdamState) {
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    let mut ms = state.m.tensors_mut();
    let mut vs = state.v.tensors_mut();
    let gs = grads.tensors();
    for ((pt, mt), (vt, gt)) in params
        .tensors_mut()
        .into_iter()
        .zip(ms.iter_mut())
        .zip(vs.iter_mut().zip(gs.iter()))
    {
        debug_assert_eq!(pt.name, gt.name);
        let p = pt.mat.data_mut();
        let m = mt.mat.data_mut();
        let v = vt.mat.data_mut();
        let g = gt.mat.data();
        for i in 0..p.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub loss: LossSpec,
    pub noise_in_training: bool,
    /// Euler steps for the validation forecasts driving early stopping.
    pub val_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 50,
            patience: 10,
            seed: 0,
            loss: LossSpec::wfm_default(),
            noise_in_training: true,
            val_steps: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
}

fn fisher_yates(idx: &mut [usize], rng: &mut RngState) {
    for i in (1..idx.len()).rev() {
        let j = rng.next_range(i + 1);
        idx.swap(i, j);
    }
}

/// Deterministic forecast for one lookback window, mapped back through the
/// instance norm (stays in whatever scale the window is in).
pub fn predict_window(
    x: &Mat,
    params: &ModelParams,
    basis: &OrthoBasis,
    config: &ModelConfig,
    k_steps: usize,
) -> Result<Mat> {
    let out = forward_cond(x, &params.encoder, basis, config)?;
    let y_norm = crate::flowmatch::infer_deterministic(&out.cond, &params.wfm, k_steps)?;
    crate::transforms::denorm(&y_norm, &out.norm_state)
}

/// Mean squared error of deterministic forecasts over a sample set.
pub fn forecast_mse(
    samples: &[Sample],
    params: &ModelParams,
    basis: &OrthoBasis,
    config: &ModelConfig,
    k_steps: usize,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Invalid("empty sample set".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for s in samples {
        let y_hat = predict_window(&s.x, params, basis, config, k_steps)?;
        for (a, b) in y_hat.data().iter().zip(s.y.data()) {
            let d = a - b;
            sum += d * d;
        }
        count += s.y.data().len();
    }
    Ok(sum / count as f64)
}

/// Full shuffled-epoch training with early stopping on validation MSE of
/// deterministic inference. Returns the best-epoch parameters and the
/// per-epoch history.
pub fn train_loop(
    train: &[Sample],
    val: &[Sample],
    init: ModelParams,
    basis: &OrthoBasis,
    model_config: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<(ModelParams, Vec<EpochStats>)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Invalid("train and val splits must be non-empty".into()));
    }
    if tcfg.lr < 0.0 || tcfg.batch_size == 0 || tcfg.max_epochs == 0 || tcfg.patience == 0 {
        return Err(Error::Config("lr, batch, epochs and patience must be positive".into()));
    }
    let mut params = init;
    let mut root = RngState::new(tcfg.seed);
    let mut shuffle_rng = root.split(STREAM_SHUFFLE);
    let mut noise_rng = root.split(STREAM_NOISE);
    let mut adam = AdamState::new(&params, tcfg.lr);

    let mut best_mse = f64::INFINITY;
    let mut best_params = params.clone();
    let mut stall = 0usize;
    let mut history = Vec::new();

    for epoch in 1..=tcfg.max_epochs {
        let mut idx: Vec<usize> = (0..train.len()).collect();
        fisher_yates(&mut idx, &mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in idx.chunks(tcfg.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (loss, grads) = backward(
                &batch,
                &params,
                basis,
                model_config,
                &tcfg.loss,
                &mut noise_rng,
                tcfg.noise_in_training,
            )?;
            adam_step(&mut params, &grads, &mut adam);
            loss_sum += loss;
            batches += 1;
        }
        let val_mse = forecast_mse(val, &params, basis, model_config, tcfg.val_steps)?;
        history.push(EpochStats { epoch, train_loss: loss_sum / batches as f64, val_mse });
        if val_mse < best_mse {
            best_mse = val_mse;
            best_params = params.clone();
            stall = 0;
        } else {
            stall += 1;
            if stall >= tcfg.patience {
                break;
            }
        }
    }
    Ok((best_params, history))
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &str = "VLIN1";

/// Everything a forecast needs: parameters, bases, shapes, and the global
/// standardization fitted at train time.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub basis: OrthoBasis,
    pub config: ModelConfig,
    pub stats: GlobalStats,
    pub standardize: bool,
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn mixer_kind_fields(config: &ModelConfig) -> (String, usize, usize) {
    match config.mixer {
        MixerKind::VecTrans => ("vectrans".into(), 0, 0),
        MixerKind::RankK(k) => ("rank_k".into(), k, 0),
        MixerKind::Mhsa(h) => ("mhsa".into(), 0, h),
        MixerKind::NormLin => ("normlin".into(), 0, 0),
        MixerKind::None => ("none".into(), 0, 0),
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(CHECKPOINT_MAGIC);
    out.push('\n');
    let (mixer, rank_k, heads) = mixer_kind_fields(&ckpt.config);
    let temporal = match ckpt.config.temporal {
        TemporalKind::Mlp => "mlp",
        TemporalKind::None => "none",
    };
    out.push_str(&format!(
        "n_var={} t={} h={} d_model={} d_ext={} layers={} mixer={} rank_k={} heads={} temporal={} standardize={} seed={}\n",
        ckpt.config.n_var,
        ckpt.config.lookback,
        ckpt.config.horizon,
        ckpt.config.d_model,
        ckpt.config.d_ext,
        ckpt.config.depth,
        mixer,
        rank_k,
        heads,
        temporal,
        u8::from(ckpt.standardize),
        ckpt.config.seed,
    ));
    let mut write_tensor = |name: &str, m: &Mat| {
        out.push_str(&format!("tensor {name} {} {}\n", m.rows(), m.cols()));
        for r in 0..m.rows() {
            let mut line = String::new();
            for (i, v) in m.row(r).iter().enumerate() {
                if i > 0 {
                    line.push(' ');
                }
                line.push_str(&fmt_f64(*v));
            }
            line.push('\n');
            out.push_str(&line);
        }
    };
    write_tensor("q_in", &ckpt.basis.q_in);
    write_tensor("q_out", &ckpt.basis.q_out);
    let mean = Mat::new(1, ckpt.stats.mean.len(), ckpt.stats.mean.clone())?;
    let std = Mat::new(1, ckpt.stats.std.len(), ckpt.stats.std.clone())?;
    write_tensor("global_mean", &mean);
    write_tensor("global_std", &std);
    for t in ckpt.params.tensors() {
        write_tensor(&t.name, t.mat);
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

fn parse_kv(line: &str) -> Result<std::collections::BTreeMap<String, String>> {
    let mut map = std::collections::BTreeMap::new();
    for pair in line.split_whitespace() {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("malformed config entry '{pair}'")))?;
        map.insert(k.to_string(), v.to_string());
    }
    Ok(map)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let magic = lines.next().ok_or_else(|| Error::Checkpoint("empty file".into()))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic '{magic}'")));
    }
    let cfg_line = lines.next().ok_or_else(|| Error::Checkpoint("truncated: no config".into()))?;
    let kv = parse_kv(cfg_line)?;
    let get = |k: &str| -> Result<&String> {
        kv.get(k).ok_or_else(|| Error::Checkpoint(format!("config key '{k}' missing")))
    };
    let parse_usize = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("config key '{k}' not an integer")))
    };
    let mixer = match get("mixer")?.as_str() {
        "vectrans" => MixerKind::VecTrans,
        "rank_k" => MixerKind::RankK(parse_usize("rank_k")?),
        "mhsa" => MixerKind::Mhsa(parse_usize("heads")?),
        "normlin" => MixerKind::NormLin,
        "none" => MixerKind::None,
        other => return Err(Error::Checkpoint(format!("unknown mixer '{other}'"))),
    };
    let temporal = match get("temporal")?.as_str() {
        "mlp" => TemporalKind::Mlp,
        "none" => TemporalKind::None,
        other => return Err(Error::Checkpoint(format!("unknown temporal kind '{other}'"))),
    };
    let config = ModelConfig {
        n_var: parse_usize("n_var")?,
        lookback: parse_usize("t")?,
        horizon: parse_usize("h")?,
        d_model: parse_usize("d_model")?,
        d_ext: parse_usize("d_ext")?,
        depth: parse_usize("layers")?,
        mixer,
        temporal,
        seed: get("seed")?
            .parse()
            .map_err(|_| Error::Checkpoint("seed not an integer".into()))?,
    };
    let standardize = get("standardize")?.as_str() == "1";

    let mut read_tensor = |lines: &mut std::str::Lines<'_>, expect_name: Option<&str>| -> Result<(String, Mat)> {
        let header = lines
            .next()
            .ok_or_else(|| Error::Checkpoint("truncated: tensor header missing".into()))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "tensor" {
            return Err(Error::Checkpoint(format!("malformed tensor header '{header}'")));
        }
        let name = parts[1].to_string();
        if let Some(want) = expect_name {
            if name != want {
                return Err(Error::Checkpoint(format!(
                    "tensor order mismatch: expected '{want}', found '{name}'"
                )));
            }
        }
        let rows: usize = parts[2]
            .parse()
            .map_err(|_| Error::Checkpoint("bad tensor rows".into()))?;
        let cols: usize = parts[3]
            .parse()
            .map_err(|_| Error::Checkpoint("bad tensor cols".into()))?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let line = lines
                .next()
                .ok_or_else(|| Error::Checkpoint(format!("truncated inside tensor '{name}'")))?;
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad value in tensor '{name}'")))?;
                data.push(v);
            }
        }
        if data.len() != rows * cols {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        let m = Mat::new(rows, cols, data)
            .map_err(|e| Error::Checkpoint(format!("tensor '{name}': {e}")))?;
        Ok((name, m))
    };

    let (_, q_in) = read_tensor(&mut lines, Some("q_in"))?;
    let (_, q_out) = read_tensor(&mut lines, Some("q_out"))?;
    let (_, mean) = read_tensor(&mut lines, Some("global_mean"))?;
    let (_, std) = read_tensor(&mut lines, Some("global_std"))?;
    if q_in.rows() != config.lookback || q_out.rows() != config.horizon {
        return Err(Error::Checkpoint("basis shape disagrees with config".into()));
    }

    // Build the parameter skeleton from the config, then fill it in order.
    let mut params = crate::model::init_params(&config, &mut RngState::new(config.seed))?;
    {
        let mut slots = params.tensors_mut();
        for slot in slots.iter_mut() {
            let (name, m) = read_tensor(&mut lines, Some(&slot.name))?;
            if m.rows() != slot.mat.rows() || m.cols() != slot.mat.cols() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' is {}x{}, config implies {}x{}",
                    m.rows(),
                    m.cols(),
                    slot.mat.rows(),
                    slot.mat.cols()
                )));
            }
            *slot.mat = m;
        }
    }
    Ok(Checkpoint {
        params,
        basis: OrthoBasis { q_in, q_out },
        config,
        stats: GlobalStats { mean: mean.data().to_vec(), std: std.data().to_vec() },
        standardize,
    })
}
