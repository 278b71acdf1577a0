//! The WFM block: straight-path state interpolation, the linear velocity
//! head, the final-series-oriented weighted loss and its velocity-oriented
//! ablation variants, and K-step Euler inference.

use crate::error::{Error, Result};
use crate::linalg::{gaussian_sample, mat_mul_counted, FlopLedger, Mat, RngState};

#[inline]
pub fn softplus(x: f64) -> f64 {
    // ln(1 + e^x), stable for large |x|.
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Velocity head shared across variates: a single linear map over the
/// concatenation (cond_row, state_row, t), plus a learnable noise-scale
/// pre-activation whose softplus is the training noise std.
#[derive(Debug, Clone)]
pub struct WfmParams {
    /// (2H+1) x H.
    pub w: Mat,
    /// 1 x H.
    pub b: Mat,
    /// 1 x 1 pre-activation; std = softplus(s) > 0 always.
    pub s: Mat,
}

impl WfmParams {
    pub fn zeros(horizon: usize) -> Self {
        WfmParams {
            w: Mat::zeros(2 * horizon + 1, horizon),
            b: Mat::zeros(1, horizon),
            s: Mat::zeros(1, 1),
        }
    }

    pub fn horizon(&self) -> usize {
        self.w.cols()
    }

    pub fn noise_std(&self) -> f64 {
        softplus(self.s.get(0, 0))
    }
}

/// Interpolation time in the velocity field (distinct from series steps).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowTime(f64);

impl FlowTime {
    pub fn new(t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Invalid(format!("flow time {t} outside [0, 1]")));
        }
        Ok(FlowTime(t))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Final-series-oriented weighted MAE on the one-step extrapolation.
    Wfm,
    /// Same weighting applied to the velocity residual.
    VelWeighted,
    /// Plain MSE on the velocity residual.
    VelMse,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "wfm" => Ok(LossKind::Wfm),
            "vel_weighted" => Ok(LossKind::VelWeighted),
            "vel_mse" => Ok(LossKind::VelMse),
            other => Err(Error::Invalid(format!("unknown loss kind '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Wfm => "wfm",
            LossKind::VelWeighted => "vel_weighted",
            LossKind::VelMse => "vel_mse",
        }
    }
}

/// Loss configuration: path exponent alpha on (2-t), horizon exponent beta
/// on the step index. vel_mse ignores both.
#[derive(Debug, Clone, Copy)]
pub struct LossSpec {
    pub kind: LossKind,
    pub alpha: f64,
    pub beta: f64,
}

impl LossSpec {
    pub fn wfm_default() -> Self {
        LossSpec { kind: LossKind::Wfm, alpha: -0.5, beta: -0.5 }
    }

    /// Horizon weights i^beta for i = 1..=h.
    pub fn horizon_weights(&self, h: usize) -> Vec<f64> {
        (1..=h).map(|i| (i as f64).powf(self.beta)).collect()
    }

    /// Path weight (2-t)^alpha.
    pub fn path_weight(&self, t: f64) -> f64 {
        (2.0 - t).powf(self.alpha)
    }
}

/// Straight-path state: t * y_gt + (1-t) * y0.
pub fn interpolate_state(y_gt: &Mat, y0: &Mat, t: FlowTime) -> Result<Mat> {
    if y_gt.rows() != y0.rows() || y_gt.cols() != y0.cols() {
        return Err(Error::Shape(format!(
            "interpolate {}x{} vs {}x{}",
            y_gt.rows(),
            y_gt.cols(),
            y0.rows(),
            y0.cols()
        )));
    }
    let t = t.value();
    Ok(y_gt.scale(t).add(&y0.scale(1.0 - t)))
}

/// Feature matrix for the velocity head: each variate row is
/// (cond_row | state_row | t), N x (2H+1).
pub(crate) fn wfm_features(cond: &Mat, y_t: &Mat, t: f64) -> Mat {
    let (n, h) = (cond.rows(), cond.cols());
    let mut feats = Mat::zeros(n, 2 * h + 1);
    for r in 0..n {
        let row = feats.row_mut(r);
        row[..h].copy_from_slice(cond.row(r));
        row[h..2 * h].copy_from_slice(y_t.row(r));
        row[2 * h] = t;
    }
    feats
}

/// Predicted velocity: Linear(Concat(cond, state, t)). Affine in the state
/// for fixed cond and t.
pub fn wfm_velocity(cond: &Mat, y_t: &Mat, t: FlowTime, p: &WfmParams) -> Result<Mat> {
    wfm_velocity_counted(cond, y_t, t, p, None)
}

pub fn wfm_velocity_counted(
    cond: &Mat,
    y_t: &Mat,
    t: FlowTime,
    p: &WfmParams,
    ledger: Option<&mut FlopLedger>,
) -> Result<Mat> {
    let h = p.horizon();
    if cond.cols() != h || y_t.cols() != h || cond.rows() != y_t.rows() {
        return Err(Error::Shape(format!(
            "velocity head expects N x {h} cond and state, got {}x{} and {}x{}",
            cond.rows(),
            cond.cols(),
            y_t.rows(),
            y_t.cols()
        )));
    }
    let feats = wfm_features(cond, y_t, t.value());
    let mut v = mat_mul_counted(&feats, &p.w, ledger, "wfm.velocity")?;
    for r in 0..v.rows() {
        for (o, &b) in v.row_mut(r).iter_mut().zip(p.b.row(0)) {
            *o += b;
        }
    }
    Ok(v)
}

/// Weighted-MAE core shared by the wfm and vel_weighted kinds:
/// (1/(H*N)) * (2-t)^alpha * sum_i i^beta * ||residual column i||_1.
fn weighted_mae(residual: &Mat, t: f64, spec: &LossSpec) -> f64 {
    let (n, h) = (residual.rows(), residual.cols());
    let weights = spec.horizon_weights(h);
    let mut sum = 0.0;
    for r in 0..n {
        for (i, &v) in residual.row(r).iter().enumerate() {
            sum += weights[i] * v.abs();
        }
    }
    spec.path_weight(t) * sum / (h as f64 * n as f64)
}

/// Final-series loss on the one-step extrapolation against the normalized
/// ground truth.
pub fn wfm_loss(y1_hat: &Mat, y_gt_norm: &Mat, t: FlowTime, spec: &LossSpec) -> Result<f64> {
    if spec.kind != LossKind::Wfm {
        return Err(Error::Invalid(format!("wfm_loss called with kind {}", spec.kind.name())));
    }
    if y1_hat.rows() != y_gt_norm.rows() || y1_hat.cols() != y_gt_norm.cols() {
        return Err(Error::Shape("wfm_loss operand shapes differ".into()));
    }
    Ok(weighted_mae(&y1_hat.sub(y_gt_norm), t.value(), spec))
}

/// Velocity-oriented losses: plain MSE (vel_mse) or the weighted MAE scheme
/// applied to the velocity residual (vel_weighted).
pub fn velocity_loss(v_hat: &Mat, v_gt: &Mat, t: FlowTime, spec: &LossSpec) -> Result<f64> {
    if v_hat.rows() != v_gt.rows() || v_hat.cols() != v_gt.cols() {
        return Err(Error::Shape("velocity_loss operand shapes differ".into()));
    }
    let residual = v_hat.sub(v_gt);
    match spec.kind {
        LossKind::VelMse => {
            let n = residual.data().len() as f64;
            Ok(residual.data().iter().map(|v| v * v).sum::<f64>() / n)
        }
        LossKind::VelWeighted => Ok(weighted_mae(&residual, t.value(), spec)),
        LossKind::Wfm => Err(Error::Invalid("velocity_loss called with kind wfm".into())),
    }
}

/// Frozen per-sample draws for one training step: the flow time and the raw
/// unit-variance noise behind the initial state.
#[derive(Debug, Clone)]
pub struct StepDraws {
    pub t: f64,
    /// N x H, standard normal entries (all-zero when training without noise).
    pub eps: Mat,
}

impl StepDraws {
    pub fn sample(rng: &mut RngState, n: usize, h: usize, with_noise: bool) -> Result<Self> {
        let t = rng.next_f64();
        let eps = if with_noise {
            gaussian_sample(rng, n, h, 1.0)?
        } else {
            Mat::zeros(n, h)
        };
        Ok(StepDraws { t, eps })
    }
}

/// Training-step target construction: y0 = softplus(s) * eps, then the
/// straight-path interpolation at the drawn t.
pub struct StepTargets {
    pub t: FlowTime,
    pub y0: Mat,
    pub y_t: Mat,
}

pub fn training_step_targets(y_gt_norm: &Mat, p: &WfmParams, draws: &StepDraws) -> Result<StepTargets> {
    let t = FlowTime::new(draws.t)?;
    let y0 = draws.eps.scale(p.noise_std());
    let y_t = interpolate_state(y_gt_norm, &y0, t)?;
    Ok(StepTargets { t, y0, y_t })
}

/// Deterministic K-step Euler integration from the all-zero state.
pub fn infer_deterministic(cond: &Mat, p: &WfmParams, k_steps: usize) -> Result<Mat> {
    if k_steps == 0 {
        return Err(Error::Invalid("k_steps must be >= 1".into()));
    }
    let mut state = Mat::zeros(cond.rows(), cond.cols());
    let dt = 1.0 / k_steps as f64;
    for k in 0..k_steps {
        let t = FlowTime::new(k as f64 * dt)?;
        let v = wfm_velocity(cond, &state, t, p)?;
        state = state.add(&v.scale(dt));
    }
    Ok(state)
}

/// Single Euler rollout from an explicit initial state.
pub fn infer_from(cond: &Mat, p: &WfmParams, k_steps: usize, y0: &Mat) -> Result<Mat> {
    if k_steps == 0 {
        return Err(Error::Invalid("k_steps must be >= 1".into()));
    }
    let mut state = y0.clone();
    let dt = 1.0 / k_steps as f64;
    for k in 0..k_steps {
        let t = FlowTime::new(k as f64 * dt)?;
        let v = wfm_velocity(cond, &state, t, p)?;
        state = state.add(&v.scale(dt));
    }
    Ok(state)
}

/// Gaussian-start ensemble: every member integrates from
/// y0 = softplus(s) * eps. Returns the members and their mean.
pub fn infer_probabilistic(
    cond: &Mat,
    p: &WfmParams,
    k_steps: usize,
    m_samples: usize,
    rng: &mut RngState,
) -> Result<(Vec<Mat>, Mat)> {
    if m_samples == 0 {
        return Err(Error::Invalid("m_samples must be >= 1".into()));
    }
    let std = p.noise_std();
    let mut members = Vec::with_capacity(m_samples);
    let mut mean = Mat::zeros(cond.rows(), cond.cols());
    for _ in 0..m_samples {
        let y0 = gaussian_sample(rng, cond.rows(), cond.cols(), std)?;
        let member = infer_from(cond, p, k_steps, &y0)?;
        mean = mean.add(&member);
        members.push(member);
    }
    mean = mean.scale(1.0 / m_samples as f64);
    Ok((members, mean))
}
