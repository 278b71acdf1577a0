//! Front-end transforms: per-sample instance normalization, the fitted
//! orthogonal temporal basis, and learnable dimension extension.

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::linalg::{jacobi_eigh, mat_mul, mat_mul_nt, mat_mul_tn, Mat};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Per-sample, per-variate moments of the lookback window, retained so the
/// forecast can be mapped back to the input scale.
#[derive(Debug, Clone)]
pub struct InstanceNormState {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

impl InstanceNormState {
    #[inline]
    pub fn scale(&self, row: usize) -> f64 {
        (self.var[row] + self.eps).sqrt()
    }
}

/// Normalizes each variate row of the lookback to mean 0, variance 1
/// (epsilon-regularized).
pub fn instance_norm(x: &Mat) -> Result<(Mat, InstanceNormState)> {
    let t = x.cols();
    if t < 2 {
        return Err(Error::Invalid(format!("lookback length {t} must be >= 2")));
    }
    let n = x.rows();
    let mut mean = vec![0.0; n];
    let mut var = vec![0.0; n];
    let mut out = x.clone();
    for r in 0..n {
        let row = x.row(r);
        let m = row.iter().sum::<f64>() / t as f64;
        let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / t as f64;
        mean[r] = m;
        var[r] = v;
        let inv = 1.0 / (v + INSTANCE_NORM_EPS).sqrt();
        for o in out.row_mut(r) {
            *o = (*o - m) * inv;
        }
    }
    Ok((out, InstanceNormState { mean, var, eps: INSTANCE_NORM_EPS }))
}

/// Maps a normalized forecast back to the lookback's scale and offset.
pub fn denorm(y_hat: &Mat, state: &InstanceNormState) -> Result<Mat> {
    if y_hat.rows() != state.mean.len() {
        return Err(Error::Shape(format!(
            "denorm: {} rows vs state for {} variates",
            y_hat.rows(),
            state.mean.len()
        )));
    }
    let mut out = y_hat.clone();
    for r in 0..out.rows() {
        let s = state.scale(r);
        let m = state.mean[r];
        for v in out.row_mut(r) {
            *v = *v * s + m;
        }
    }
    Ok(out)
}

/// Applies the lookback's normalization to another window (the training
/// target shares the lookback's moments).
pub fn normalize_with(y: &Mat, state: &InstanceNormState) -> Result<Mat> {
    if y.rows() != state.mean.len() {
        return Err(Error::Shape(format!(
            "normalize_with: {} rows vs state for {} variates",
            y.rows(),
            state.mean.len()
        )));
    }
    let mut out = y.clone();
    for r in 0..out.rows() {
        let inv = 1.0 / state.scale(r);
        let m = state.mean[r];
        for v in out.row_mut(r) {
            *v = (*v - m) * inv;
        }
    }
    Ok(out)
}

/// Orthogonal bases diagonalizing the train-set temporal autocorrelation of
/// the lookback (`q_in`, T x T) and of the target (`q_out`, H x H).
#[derive(Debug, Clone)]
pub struct OrthoBasis {
    pub q_in: Mat,
    pub q_out: Mat,
}

impl OrthoBasis {
    pub fn identity(t_len: usize, h_len: usize) -> Self {
        OrthoBasis { q_in: Mat::identity(t_len), q_out: Mat::identity(h_len) }
    }

    /// Max deviation of q^T q from the identity, over both bases.
    pub fn orthogonality_error(&self) -> f64 {
        let e_in = mat_mul_tn(&self.q_in, &self.q_in)
            .unwrap()
            .max_abs_diff(&Mat::identity(self.q_in.rows()));
        let e_out = mat_mul_tn(&self.q_out, &self.q_out)
            .unwrap()
            .max_abs_diff(&Mat::identity(self.q_out.rows()));
        e_in.max(e_out)
    }
}

/// Averaged outer product of instance-normalized rows: the temporal
/// autocorrelation estimate the bases are fitted to.
pub fn autocorrelation(rows: &[&[f64]], dim: usize) -> Result<Mat> {
    if rows.is_empty() {
        return Err(Error::Invalid("no rows for autocorrelation".into()));
    }
    let mut c = Mat::zeros(dim, dim);
    for row in rows {
        assert_eq!(row.len(), dim, "autocorrelation row length");
        for i in 0..dim {
            let ri = row[i];
            let crow = c.row_mut(i);
            for (j, &rj) in row.iter().enumerate() {
                crow[j] += ri * rj;
            }
        }
    }
    let scale = 1.0 / rows.len() as f64;
    let mut c = c.scale(scale);
    // Symmetrize: exact up to rounding already, this removes the rounding.
    for i in 0..dim {
        for j in (i + 1)..dim {
            let v = 0.5 * (c.get(i, j) + c.get(j, i));
            c.set(i, j, v);
            c.set(j, i, v);
        }
    }
    Ok(c)
}

/// Fits `q_in` on instance-normalized lookbacks and `q_out` on targets
/// normalized with the same per-sample state. Deterministic.
pub fn fit_ortho_basis(train: &[Sample], t_len: usize, h_len: usize) -> Result<OrthoBasis> {
    if train.is_empty() {
        return Err(Error::Invalid("cannot fit orthogonal basis on empty train set".into()));
    }
    let mut x_rows: Vec<Vec<f64>> = Vec::new();
    let mut y_rows: Vec<Vec<f64>> = Vec::new();
    for s in train {
        if s.x.cols() != t_len || s.y.cols() != h_len {
            return Err(Error::Shape(format!(
                "sample is {}x{} / {}x{}, expected lookback {t_len} and horizon {h_len}",
                s.x.rows(),
                s.x.cols(),
                s.y.rows(),
                s.y.cols()
            )));
        }
        let (xn, state) = instance_norm(&s.x)?;
        let yn = normalize_with(&s.y, &state)?;
        for r in 0..xn.rows() {
            x_rows.push(xn.row(r).to_vec());
            y_rows.push(yn.row(r).to_vec());
        }
    }
    let x_borrowed: Vec<&[f64]> = x_rows.iter().map(|r| r.as_slice()).collect();
    let y_borrowed: Vec<&[f64]> = y_rows.iter().map(|r| r.as_slice()).collect();
    let c_in = autocorrelation(&x_borrowed, t_len)?;
    let c_out = autocorrelation(&y_borrowed, h_len)?;
    let (_, q_in) = jacobi_eigh(&c_in, 1e-10)?;
    let (_, q_out) = jacobi_eigh(&c_out, 1e-10)?;
    Ok(OrthoBasis { q_in, q_out })
}

/// Forward change of temporal basis: `x * q`.
pub fn ortho_apply(x: &Mat, q: &Mat) -> Result<Mat> {
    mat_mul(x, q)
}

/// Inverse change of basis: `z * q^T`.
pub fn ortho_inverse_apply(z: &Mat, q: &Mat) -> Result<Mat> {
    mat_mul_nt(z, q)
}

/// Learnable extension multipliers phi (length d), stored as a 1 x d row.
#[derive(Debug, Clone)]
pub struct DimExtParams {
    pub phi: Mat,
}

impl DimExtParams {
    pub fn new(phi: Mat) -> Result<Self> {
        if phi.rows() != 1 || phi.cols() == 0 {
            return Err(Error::Invalid("phi must be a non-empty row vector".into()));
        }
        Ok(DimExtParams { phi })
    }

    pub fn ones(d: usize) -> Self {
        DimExtParams { phi: Mat::filled(1, d, 1.0) }
    }

    pub fn d(&self) -> usize {
        self.phi.cols()
    }
}

/// N x T -> N x (d*T): block j holds phi[j] * x. Flattening is fixed as
/// extension-major, time-minor.
pub fn dim_extend(x: &Mat, params: &DimExtParams) -> Result<Mat> {
    let (n, t) = (x.rows(), x.cols());
    let d = params.d();
    let mut out = Mat::zeros(n, d * t);
    for r in 0..n {
        let xrow = x.row(r);
        let orow = out.row_mut(r);
        for j in 0..d {
            let f = params.phi.get(0, j);
            for (tau, &v) in xrow.iter().enumerate() {
                orow[j * t + tau] = f * v;
            }
        }
    }
    Ok(out)
}
