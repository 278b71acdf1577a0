//! Executable property checks: the rank-1 factorization of the mixing
//! matrix, the dispersion law behind the horizon weights, the zero-start /
//! ensemble-mean equivalence of the affine velocity head, and its mirror on
//! a trained toy model.

use crate::data::{synth_generate, SynthKind};
use crate::error::Result;
use crate::flowmatch::{infer_deterministic, infer_probabilistic, LossSpec, WfmParams};
use crate::linalg::{gaussian_sample, second_singular_value, Mat, RngState};
use crate::mixers::{build_explicit_mixing_matrix, MixingParams};
use crate::model::ModelConfig;
use crate::train::{forecast_mse, Checkpoint};
use std::fmt;

#[derive(Debug, Clone)]
pub struct PropertyEntry {
    pub name: String,
    pub statistic: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl PropertyEntry {
    fn below(name: &str, statistic: f64, tolerance: f64) -> Self {
        PropertyEntry { name: name.to_string(), statistic, tolerance, pass: statistic < tolerance }
    }

    fn above(name: &str, statistic: f64, threshold: f64) -> Self {
        PropertyEntry { name: name.to_string(), statistic, tolerance: threshold, pass: statistic > threshold }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PropertyReport {
    pub entries: Vec<PropertyEntry>,
}

impl PropertyReport {
    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn merge(mut self, other: PropertyReport) -> PropertyReport {
        self.entries.extend(other.entries);
        self
    }
}

impl fmt::Display for PropertyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "{:<44} statistic={:<12.4e} tolerance={:<10.3e} {}",
                e.name,
                e.statistic,
                e.tolerance,
                if e.pass { "PASS" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Rank-1 structure of the vecTrans mixing matrix: over random logits the
/// explicit matrix has a vanishing second singular value and unit row sums,
/// and a constructed rank-2 row-stochastic control does not pass.
pub fn check_theorem1(n: usize, trials: usize, rng: &mut RngState) -> Result<PropertyReport> {
    let mut worst_sigma2 = 0.0f64;
    let mut worst_rowsum = 0.0f64;
    for _ in 0..trials {
        let a = gaussian_sample(rng, 1, n, 2.0)?;
        let m = build_explicit_mixing_matrix(&MixingParams::VecTrans(a.row(0)))?;
        worst_sigma2 = worst_sigma2.max(second_singular_value(&m)?);
        for r in 0..n {
            let s: f64 = m.row(r).iter().sum();
            worst_rowsum = worst_rowsum.max((s - 1.0).abs());
        }
    }
    // Negative control: rows alternate between two distinct positive
    // unit-L1 vectors, a rank-2 row-stochastic matrix.
    let unit_l1 = |rng: &mut RngState| -> Result<Vec<f64>> {
        let raw = gaussian_sample(rng, 1, n, 1.0)?;
        let pos: Vec<f64> = raw.row(0).iter().map(|v| v.abs() + 0.05).collect();
        let s: f64 = pos.iter().sum();
        Ok(pos.iter().map(|v| v / s).collect())
    };
    let w1 = unit_l1(rng)?;
    let w2 = unit_l1(rng)?;
    let mut control = Mat::zeros(n, n);
    for r in 0..n {
        control
            .row_mut(r)
            .copy_from_slice(if r % 2 == 0 { &w1 } else { &w2 });
    }
    let control_sigma2 = second_singular_value(&control)?;

    Ok(PropertyReport {
        entries: vec![
            PropertyEntry::below(&format!("theorem1.sigma2_max({trials} trials)"), worst_sigma2, 1e-10),
            PropertyEntry::below("theorem1.row_sum_deviation", worst_rowsum, 1e-12),
            PropertyEntry::above("theorem1.rank2_control_sigma2", control_sigma2, 1e-3),
        ],
    })
}

/// Premise of the horizon weighting: the implemented weights are exactly
/// i^-0.5, and on the cumulative-sum model the per-step dispersion grows as
/// sqrt(i) (log-log slope ~ 0.5, Var ratio at step 4 vs 1 ~ 4).
pub fn check_theorem2_weights(h: usize, rng: &mut RngState) -> Result<PropertyReport> {
    let spec = LossSpec::wfm_default();
    let weights = spec.horizon_weights(h);
    let mut weight_err = 0.0f64;
    for (i, w) in weights.iter().enumerate() {
        weight_err = weight_err.max((w - 1.0 / ((i + 1) as f64).sqrt()).abs());
    }

    let realizations = 10_000;
    let steps = h.max(8);
    let series = synth_generate(SynthKind::RandomWalk, realizations, steps, rng)?;
    let mut stds = Vec::with_capacity(steps);
    for i in 0..steps {
        let col: Vec<f64> = (0..realizations).map(|r| series.values.get(r, i)).collect();
        let mean = col.iter().sum::<f64>() / realizations as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / realizations as f64;
        stds.push(var.sqrt());
    }
    // Least-squares slope of log std against log step.
    let pts: Vec<(f64, f64)> = stds
        .iter()
        .enumerate()
        .map(|(i, s)| (((i + 1) as f64).ln(), s.ln()))
        .collect();
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let slope = sxy / sxx;

    let var_ratio = (stds[3] * stds[3]) / (stds[0] * stds[0]);

    Ok(PropertyReport {
        entries: vec![
            PropertyEntry::below("theorem2.weight_formula_deviation", weight_err, 1e-15),
            PropertyEntry {
                name: "theorem2.dispersion_loglog_slope".into(),
                statistic: slope,
                tolerance: 0.05,
                pass: (0.45..0.55).contains(&slope),
            },
            PropertyEntry {
                name: "theorem2.var_step4_over_step1".into(),
                statistic: var_ratio,
                tolerance: 0.4,
                pass: (var_ratio - 4.0).abs() < 0.4,
            },
        ],
    })
}

/// Zero-start inference equals the Gaussian-ensemble expectation for the
/// affine velocity head: the Monte-Carlo gap decays at the 1/sqrt(m) rate
/// for every step count checked.
pub fn check_theorem3(k_list: &[usize], rng: &mut RngState) -> Result<PropertyReport> {
    let h = 6;
    let n = 4;
    let mut entries = Vec::new();
    for &k in k_list {
        let mut local = rng.split(k as u64);
        let p = WfmParams {
            w: gaussian_sample(&mut local, 2 * h + 1, h, 0.3)?,
            b: gaussian_sample(&mut local, 1, h, 0.3)?,
            s: Mat::new(1, 1, vec![0.5413])?, // softplus ~ 1
        };
        let cond = gaussian_sample(&mut local, n, h, 1.0)?;
        let zero_start = infer_deterministic(&cond, &p, k)?;
        let (_, mean_small) = infer_probabilistic(&cond, &p, k, 1_000, &mut local.split(1))?;
        let (_, mean_large) = infer_probabilistic(&cond, &p, k, 10_000, &mut local.split(2))?;
        let gap_small = mean_small.max_abs_diff(&zero_start);
        let gap_large = mean_large.max_abs_diff(&zero_start);
        entries.push(PropertyEntry::below(
            &format!("theorem3.gap_ratio_10k_over_1k(K={k})"),
            gap_large / gap_small,
            0.6,
        ));

        // Degenerate noise: every member coincides with the zero-start
        // output bitwise; the ensemble mean only re-adds summation rounding.
        let mut pz = p.clone();
        pz.s = Mat::new(1, 1, vec![-800.0])?;
        let (members_z, mean_z) = infer_probabilistic(&cond, &pz, k, 16, &mut local.split(3))?;
        let zero_z = infer_deterministic(&cond, &pz, k)?;
        let member_gap = members_z
            .iter()
            .map(|m| m.max_abs_diff(&zero_z))
            .fold(0.0, f64::max);
        entries.push(PropertyEntry {
            name: format!("theorem3.zero_std_member_gap(K={k})"),
            statistic: member_gap,
            tolerance: 0.0,
            pass: member_gap == 0.0,
        });
        entries.push(PropertyEntry::below(
            &format!("theorem3.zero_std_mean_gap(K={k})"),
            mean_z.max_abs_diff(&zero_z),
            1e-14,
        ));
    }
    Ok(PropertyReport { entries })
}

/// Entrywise bound at m = 1e5: the ensemble-mean deviation stays within
/// 3 standard errors for at least 99% of entries.
pub fn check_theorem3_entrywise(rng: &mut RngState) -> Result<PropertyReport> {
    let (n, h, k, m) = (3, 4, 5, 100_000usize);
    let p = WfmParams {
        w: gaussian_sample(rng, 2 * h + 1, h, 0.3)?,
        b: gaussian_sample(rng, 1, h, 0.3)?,
        s: Mat::new(1, 1, vec![0.5413])?,
    };
    let cond = gaussian_sample(rng, n, h, 1.0)?;
    let zero_start = infer_deterministic(&cond, &p, k)?;
    let (members, mean) = infer_probabilistic(&cond, &p, k, m, rng)?;
    // Entrywise ensemble standard deviation.
    let mut var = Mat::zeros(n, h);
    for member in &members {
        for (v, (a, b)) in var
            .data_mut()
            .iter_mut()
            .zip(member.data().iter().zip(mean.data()))
        {
            let d = a - b;
            *v += d * d;
        }
    }
    let mut within = 0usize;
    let total = n * h;
    for i in 0..total {
        let std = (var.data()[i] / m as f64).sqrt();
        let dev = (mean.data()[i] - zero_start.data()[i]).abs();
        if dev < 3.0 * std / (m as f64).sqrt() {
            within += 1;
        }
    }
    let frac = within as f64 / total as f64;
    Ok(PropertyReport {
        entries: vec![PropertyEntry::above("theorem3.entrywise_3sigma_fraction(m=1e5)", frac, 0.99)],
    })
}

/// Mirror of the zero-start vs ensemble table on a trained model: test MSE
/// under zero-start and size-50 ensemble-mean inference agree to < 0.5%
/// relative, and smaller ensembles track no better.
pub fn check_table3_equivalence(
    ckpt: &Checkpoint,
    test: &[crate::data::Sample],
    k_steps: usize,
    rng: &mut RngState,
) -> Result<PropertyReport> {
    let zero_mse = forecast_mse(test, &ckpt.params, &ckpt.basis, &ckpt.config, k_steps)?;
    let ens_mse = ensemble_forecast_mse(ckpt, test, k_steps, 50, rng)?;
    let rel_gap = (ens_mse - zero_mse).abs() / zero_mse;

    let gap10 = (ensemble_forecast_mse(ckpt, test, k_steps, 10, rng)? - zero_mse).abs();
    let gap50 = (ens_mse - zero_mse).abs();

    Ok(PropertyReport {
        entries: vec![
            PropertyEntry::below("table3.relative_mse_gap(size=50)", rel_gap, 5e-3),
            PropertyEntry {
                name: "table3.gap_monotone(size10_minus_size50)".into(),
                statistic: gap10 - gap50,
                tolerance: 0.0,
                pass: gap10 >= gap50,
            },
        ],
    })
}

/// Test MSE when every forecast is the mean of an m-member Gaussian-start
/// ensemble (denormalized like the deterministic path).
pub fn ensemble_forecast_mse(
    ckpt: &Checkpoint,
    samples: &[crate::data::Sample],
    k_steps: usize,
    m_samples: usize,
    rng: &mut RngState,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for s in samples {
        let out = crate::model::forward_cond(&s.x, &ckpt.params.encoder, &ckpt.basis, &ckpt.config)?;
        let (_, mean) = infer_probabilistic(&out.cond, &ckpt.params.wfm, k_steps, m_samples, rng)?;
        let y_hat = crate::transforms::denorm(&mean, &out.norm_state)?;
        for (a, b) in y_hat.data().iter().zip(s.y.data()) {
            let d = a - b;
            sum += d * d;
        }
        count += s.y.data().len();
    }
    Ok(sum / count as f64)
}

/// The toy training setup shared by the acceptance suite and the property
/// checks: a four-variate sine mixture, 2000 steps, lookback 48, horizon 24.
pub fn toy_setup() -> (crate::model::ModelConfig, crate::train::TrainConfig, crate::data::SplitSpec) {
    let model = ModelConfig {
        n_var: 4,
        lookback: 48,
        horizon: 24,
        d_model: 64,
        d_ext: 2,
        depth: 2,
        mixer: crate::model::MixerKind::VecTrans,
        temporal: crate::model::TemporalKind::Mlp,
        seed: 7,
    };
    let train = crate::train::TrainConfig {
        lr: 1e-3,
        batch_size: 32,
        max_epochs: 50,
        patience: 10,
        seed: 7,
        loss: LossSpec::wfm_default(),
        noise_in_training: true,
        val_steps: 10,
    };
    let split = crate::data::SplitSpec::new(0.7, 0.1, 0.2).unwrap();
    (model, train, split)
}

/// Trains the toy model end to end and returns the checkpoint plus the test
/// split samples (in the standardized scale metrics are computed in).
pub fn train_toy_model(data_seed: u64) -> Result<(Checkpoint, Vec<crate::data::Sample>, Vec<crate::train::EpochStats>)> {
    let (mcfg, tcfg, split) = toy_setup();
    let mut root = RngState::new(data_seed);
    let mut synth_rng = root.split(crate::train::STREAM_SYNTH);
    let series = synth_generate(SynthKind::SineMixture, mcfg.n_var, 2000, &mut synth_rng)?;
    let (train_raw, val_raw, test_raw) =
        crate::data::split_chronological(&series, &split, mcfg.lookback, mcfg.horizon)?;
    let stats = crate::data::GlobalStats::fit(&train_raw)?;
    let train_s = crate::data::standardize(&train_raw, &stats)?;
    let val_s = crate::data::standardize(&val_raw, &stats)?;
    let test_s = crate::data::standardize(&test_raw, &stats)?;
    let train_w = crate::data::make_windows(&train_s, mcfg.lookback, mcfg.horizon, 1)?;
    let val_w = crate::data::make_windows(&val_s, mcfg.lookback, mcfg.horizon, 1)?;
    let test_w = crate::data::make_windows(&test_s, mcfg.lookback, mcfg.horizon, 1)?;
    let basis = crate::transforms::fit_ortho_basis(&train_w, mcfg.lookback, mcfg.horizon)?;
    let init = crate::model::init_params(&mcfg, &mut RngState::new(mcfg.seed).split(crate::train::STREAM_INIT))?;
    let (params, history) = crate::train::train_loop(&train_w, &val_w, init, &basis, &mcfg, &tcfg)?;
    let ckpt = Checkpoint { params, basis, config: mcfg, stats, standardize: true };
    Ok((ckpt, test_w, history))
}

/// Last-value persistence baseline: repeat the final lookback value across
/// the horizon.
pub fn persistence_mse(samples: &[crate::data::Sample]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for s in samples {
        let t = s.x.cols();
        for r in 0..s.x.rows() {
            let last = s.x.get(r, t - 1);
            for &y in s.y.row(r) {
                let d = last - y;
                sum += d * d;
            }
        }
        count += s.y.data().len();
    }
    sum / count as f64
}
