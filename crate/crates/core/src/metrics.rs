//! Point and probabilistic forecast metrics: MSE, MAE, the scale-free
//! trio (R^2, Pearson r, MASE), and normalized quantile risk.

use crate::error::{Error, Result};
use crate::linalg::Mat;
use std::collections::BTreeMap;
use std::fmt;

fn check_shapes(y_hat: &Mat, y: &Mat) -> Result<()> {
    if y_hat.rows() != y.rows() || y_hat.cols() != y.cols() {
        return Err(Error::Shape(format!(
            "metric operands {}x{} vs {}x{}",
            y_hat.rows(),
            y_hat.cols(),
            y.rows(),
            y.cols()
        )));
    }
    Ok(())
}

/// Mean squared error over all entries.
pub fn mse(y_hat: &Mat, y: &Mat) -> Result<f64> {
    check_shapes(y_hat, y)?;
    let n = y.data().len() as f64;
    Ok(y_hat
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Mean absolute error over all entries.
pub fn mae(y_hat: &Mat, y: &Mat) -> Result<f64> {
    check_shapes(y_hat, y)?;
    let n = y.data().len() as f64;
    Ok(y_hat
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

fn row_mean(row: &[f64]) -> f64 {
    row.iter().sum::<f64>() / row.len() as f64
}

/// Per-variate coefficient of determination averaged over variates.
/// Constant ground-truth rows are undefined and excluded; the count of
/// exclusions is returned alongside.
pub fn r_squared(y_hat: &Mat, y: &Mat) -> Result<(f64, usize)> {
    check_shapes(y_hat, y)?;
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut excluded = 0usize;
    for r in 0..y.rows() {
        let yr = y.row(r);
        let yh = y_hat.row(r);
        let mean = row_mean(yr);
        let ss_tot: f64 = yr.iter().map(|v| (v - mean) * (v - mean)).sum();
        if ss_tot == 0.0 {
            excluded += 1;
            continue;
        }
        let ss_res: f64 = yr.iter().zip(yh).map(|(a, b)| (a - b) * (a - b)).sum();
        sum += 1.0 - ss_res / ss_tot;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Metric("every ground-truth row is constant: R^2 undefined".into()));
    }
    Ok((sum / used as f64, excluded))
}

/// Per-variate Pearson correlation over the horizon, averaged over variates.
/// Zero-variance rows on either side are excluded.
pub fn pearson_r(y_hat: &Mat, y: &Mat) -> Result<(f64, usize)> {
    check_shapes(y_hat, y)?;
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut excluded = 0usize;
    for r in 0..y.rows() {
        let yr = y.row(r);
        let yh = y_hat.row(r);
        let my = row_mean(yr);
        let mh = row_mean(yh);
        let mut cov = 0.0;
        let mut vy = 0.0;
        let mut vh = 0.0;
        for (a, b) in yh.iter().zip(yr) {
            let da = a - mh;
            let db = b - my;
            cov += da * db;
            vh += da * da;
            vy += db * db;
        }
        if vy == 0.0 || vh == 0.0 {
            excluded += 1;
            continue;
        }
        sum += cov / (vh.sqrt() * vy.sqrt());
        used += 1;
    }
    if used == 0 {
        return Err(Error::Metric("no variate has variance on both sides: r undefined".into()));
    }
    Ok((sum / used as f64, excluded))
}

/// Mean absolute scaled error: per-variate MAE over the horizon divided by
/// the mean absolute first difference of the ground truth, averaged over
/// variates. Rows whose ground truth never moves are excluded.
pub fn mase(y_hat: &Mat, y: &Mat) -> Result<(f64, usize)> {
    check_shapes(y_hat, y)?;
    let h = y.cols();
    if h < 2 {
        return Err(Error::Invalid("MASE needs a horizon of at least 2".into()));
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut excluded = 0usize;
    for r in 0..y.rows() {
        let yr = y.row(r);
        let yh = y_hat.row(r);
        let diff_sum: f64 = yr.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
        if diff_sum == 0.0 {
            excluded += 1;
            continue;
        }
        let num: f64 = yr.iter().zip(yh).map(|(a, b)| (a - b).abs()).sum::<f64>() / h as f64;
        let den = diff_sum / (h - 1) as f64;
        sum += num / den;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Metric("every ground-truth row is flat: MASE undefined".into()));
    }
    Ok((sum / used as f64, excluded))
}

/// Pinball loss at quantile q.
pub fn quantile_loss(y: f64, y_hat: f64, q: f64) -> f64 {
    (q * (y - y_hat)).max((1.0 - q) * (y_hat - y))
}

/// Type-7 empirical quantile: linear interpolation between order statistics
/// of a sorted slice.
pub fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let m = sorted.len();
    if m == 1 {
        return sorted[0];
    }
    let pos = q * (m - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(m - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Normalized aggregate quantile risk of an ensemble forecast:
/// sum of pinball losses at the per-entry empirical quantile, divided by
/// the total absolute ground truth.
pub fn q_risk(ensemble: &[Mat], y: &Mat, q: f64) -> Result<f64> {
    if ensemble.is_empty() {
        return Err(Error::Invalid("empty ensemble".into()));
    }
    if !(0.0..1.0).contains(&q) || q == 0.0 {
        return Err(Error::Invalid(format!("quantile {q} outside (0, 1)")));
    }
    for m in ensemble {
        check_shapes(m, y)?;
    }
    let denom: f64 = y.data().iter().map(|v| v.abs()).sum();
    if denom == 0.0 {
        return Err(Error::Metric("ground truth is identically zero: Q-Risk undefined".into()));
    }
    let mut num = 0.0;
    let mut values = vec![0.0; ensemble.len()];
    for r in 0..y.rows() {
        for c in 0..y.cols() {
            for (slot, m) in values.iter_mut().zip(ensemble) {
                *slot = m.get(r, c);
            }
            values.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let pred = empirical_quantile(&values, q);
            num += quantile_loss(y.get(r, c), pred, q);
        }
    }
    Ok(num / denom)
}

/// All point metrics for one forecast, plus Q-Risk per requested quantile
/// for probabilistic runs. Degenerate variates are skipped with a warning
/// instead of poisoning the aggregate.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub mse: f64,
    pub mae: f64,
    pub r2: f64,
    pub pearson_r: f64,
    pub mase: f64,
    pub q_risk: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

impl MetricReport {
    pub fn compute(y_hat: &Mat, y: &Mat) -> Result<MetricReport> {
        let mut warnings = Vec::new();
        let (r2, ex) = r_squared(y_hat, y)?;
        if ex > 0 {
            warnings.push(format!("R^2: excluded {ex} constant variate(s)"));
        }
        let (r, ex) = pearson_r(y_hat, y)?;
        if ex > 0 {
            warnings.push(format!("r: excluded {ex} zero-variance variate(s)"));
        }
        let (ms, ex) = mase(y_hat, y)?;
        if ex > 0 {
            warnings.push(format!("MASE: excluded {ex} flat variate(s)"));
        }
        Ok(MetricReport {
            mse: mse(y_hat, y)?,
            mae: mae(y_hat, y)?,
            r2,
            pearson_r: r,
            mase: ms,
            q_risk: BTreeMap::new(),
            warnings,
        })
    }

    pub fn with_q_risk(mut self, ensemble: &[Mat], y: &Mat, quantiles: &[f64]) -> Result<MetricReport> {
        for &q in quantiles {
            self.q_risk.insert(format!("{q}"), q_risk(ensemble, y, q)?);
        }
        Ok(self)
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mse: {:.6}", self.mse)?;
        writeln!(f, "mae: {:.6}", self.mae)?;
        writeln!(f, "r2: {:.6}", self.r2)?;
        writeln!(f, "pearson_r: {:.6}", self.pearson_r)?;
        writeln!(f, "mase: {:.6}", self.mase)?;
        for (q, v) in &self.q_risk {
            writeln!(f, "q_risk_{q}: {v:.6}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian_sample, RngState};

    #[test]
    fn mse_mae_basics() {
        let y = Mat::new(1, 2, vec![0.0, 0.0]).unwrap();
        let y_hat = Mat::new(1, 2, vec![1.0, -1.0]).unwrap();
        assert_eq!(mse(&y_hat, &y).unwrap(), 1.0);
        assert_eq!(mae(&y_hat, &y).unwrap(), 1.0);
        assert_eq!(mse(&y, &y).unwrap(), 0.0);
        assert_eq!(mae(&y, &y).unwrap(), 0.0);
    }

    #[test]
    fn mse_mae_match_loop_oracle() {
        let mut rng = RngState::new(60);
        let y = gaussian_sample(&mut rng, 5, 10, 1.0).unwrap();
        let y_hat = gaussian_sample(&mut rng, 5, 10, 1.0).unwrap();
        let mut se = 0.0;
        let mut ae = 0.0;
        for r in 0..5 {
            for c in 0..10 {
                let d = y_hat.get(r, c) - y.get(r, c);
                se += d * d;
                ae += d.abs();
            }
        }
        assert!((mse(&y_hat, &y).unwrap() - se / 50.0).abs() < 1e-14);
        assert!((mae(&y_hat, &y).unwrap() - ae / 50.0).abs() < 1e-14);
    }

    #[test]
    fn r_squared_cases() {
        let mut rng = RngState::new(61);
        let y = gaussian_sample(&mut rng, 3, 8, 1.0).unwrap();
        let (r2, _) = r_squared(&y, &y).unwrap();
        assert!((r2 - 1.0).abs() < 1e-12);

        // Predicting the row mean gives exactly zero.
        let mut mean_pred = y.clone();
        for r in 0..3 {
            let m = row_mean(y.row(r));
            for v in mean_pred.row_mut(r) {
                *v = m;
            }
        }
        let (r2, _) = r_squared(&mean_pred, &y).unwrap();
        assert!(r2.abs() < 1e-12);

        // Constant row excluded.
        let yc = Mat::from_rows(&[vec![1.0, 1.0, 1.0], vec![0.0, 1.0, 2.0]]).unwrap();
        let yh = Mat::from_rows(&[vec![1.0, 1.0, 1.0], vec![0.0, 1.0, 2.0]]).unwrap();
        let (r2, excluded) = r_squared(&yh, &yc).unwrap();
        assert_eq!(excluded, 1);
        assert!((r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_cases() {
        let mut rng = RngState::new(62);
        let y = gaussian_sample(&mut rng, 3, 8, 1.0).unwrap();
        let (r, _) = pearson_r(&y, &y).unwrap();
        assert!((r - 1.0).abs() < 1e-12);

        // Anti-correlation: -y + c.
        let flipped = y.map(|v| -v + 2.0);
        let (r, _) = pearson_r(&flipped, &y).unwrap();
        assert!((r + 1.0).abs() < 1e-12);

        // Invariance under positive affine rescaling.
        let y_hat = gaussian_sample(&mut rng, 3, 8, 1.0).unwrap();
        let (r1, _) = pearson_r(&y_hat, &y).unwrap();
        let scaled = y_hat.map(|v| 3.5 * v - 0.7);
        let (r2, _) = pearson_r(&scaled, &y).unwrap();
        assert!((r1 - r2).abs() < 1e-12);
    }

    #[test]
    fn mase_hand_case() {
        let y = Mat::new(1, 4, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y_hat = y.map(|v| v + 1.0);
        let (m, _) = mase(&y_hat, &y).unwrap();
        assert!((m - 1.0).abs() < 1e-12);
        let (m, _) = mase(&y, &y).unwrap();
        assert_eq!(m, 0.0);
    }

    #[test]
    fn metrics_match_direct_formula_on_random_instances() {
        let mut rng = RngState::new(63);
        for _ in 0..20 {
            let y = gaussian_sample(&mut rng, 5, 10, 2.0).unwrap();
            let y_hat = gaussian_sample(&mut rng, 5, 10, 2.0).unwrap();
            // R^2 direct formula.
            let mut acc = 0.0;
            for r in 0..5 {
                let m = row_mean(y.row(r));
                let ss_res: f64 = y
                    .row(r)
                    .iter()
                    .zip(y_hat.row(r))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                let ss_tot: f64 = y.row(r).iter().map(|v| (v - m) * (v - m)).sum();
                acc += 1.0 - ss_res / ss_tot;
            }
            let (r2, _) = r_squared(&y_hat, &y).unwrap();
            assert!((r2 - acc / 5.0).abs() < 1e-12);

            // MASE direct formula.
            let mut acc = 0.0;
            for r in 0..5 {
                let num: f64 = y
                    .row(r)
                    .iter()
                    .zip(y_hat.row(r))
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
                    / 10.0;
                let den: f64 = y.row(r).windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>() / 9.0;
                acc += num / den;
            }
            let (m, _) = mase(&y_hat, &y).unwrap();
            assert!((m - acc / 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn q_risk_hand_case() {
        // y = 2, point forecast 1, q = 0.5: loss 0.5, normalized by |y| = 2.
        let y = Mat::filled(1, 1, 2.0);
        let ens = vec![Mat::filled(1, 1, 1.0)];
        let qr = q_risk(&ens, &y, 0.5).unwrap();
        assert_eq!(qr, 0.25);
    }

    #[test]
    fn q_risk_perfect_ensemble_is_zero() {
        let mut rng = RngState::new(64);
        let y = gaussian_sample(&mut rng, 3, 5, 1.0).unwrap();
        let ens = vec![y.clone(), y.clone(), y.clone()];
        for q in [0.1, 0.5, 0.9] {
            assert_eq!(q_risk(&ens, &y, q).unwrap(), 0.0);
        }
    }

    #[test]
    fn q_risk_matches_brute_force() {
        let mut rng = RngState::new(65);
        let y = gaussian_sample(&mut rng, 4, 6, 1.0).unwrap();
        let ens: Vec<Mat> = (0..7)
            .map(|_| gaussian_sample(&mut rng, 4, 6, 1.0).unwrap())
            .collect();
        for q in [0.25, 0.5, 0.8] {
            let got = q_risk(&ens, &y, q).unwrap();
            // Brute force: sort each entry's members, interpolate, pinball.
            let mut num = 0.0;
            let mut den = 0.0;
            for r in 0..4 {
                for c in 0..6 {
                    let mut vals: Vec<f64> = ens.iter().map(|m| m.get(r, c)).collect();
                    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    let pos = q * (vals.len() - 1) as f64;
                    let lo = pos.floor() as usize;
                    let frac = pos - lo as f64;
                    let pred = vals[lo] + frac * (vals[(lo + 1).min(vals.len() - 1)] - vals[lo]);
                    let yv = y.get(r, c);
                    num += (q * (yv - pred)).max((1.0 - q) * (pred - yv));
                    den += yv.abs();
                }
            }
            assert!((got - num / den).abs() < 1e-12);
        }
    }

    #[test]
    fn q_risk_point_forecast_at_median_is_half_relative_mae() {
        let mut rng = RngState::new(66);
        let y = gaussian_sample(&mut rng, 3, 5, 1.0).unwrap();
        let pred = gaussian_sample(&mut rng, 3, 5, 1.0).unwrap();
        let got = q_risk(&[pred.clone()], &y, 0.5).unwrap();
        let abs_err: f64 = pred.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).sum();
        let abs_y: f64 = y.data().iter().map(|v| v.abs()).sum();
        assert!((got - 0.5 * abs_err / abs_y).abs() < 1e-12);
    }

    #[test]
    fn q_risk_rejects_degenerate_input() {
        let y = Mat::zeros(2, 2);
        let ens = vec![Mat::zeros(2, 2)];
        assert!(q_risk(&ens, &y, 0.5).is_err());
        let y = Mat::filled(2, 2, 1.0);
        assert!(q_risk(&ens, &y, 0.0).is_err());
        assert!(q_risk(&[], &y, 0.5).is_err());
    }

    #[test]
    fn report_contains_all_metrics() {
        let mut rng = RngState::new(67);
        let y = gaussian_sample(&mut rng, 3, 6, 1.0).unwrap();
        let y_hat = gaussian_sample(&mut rng, 3, 6, 1.0).unwrap();
        let ens = vec![y_hat.clone(), y.clone()];
        let report = MetricReport::compute(&y_hat, &y)
            .unwrap()
            .with_q_risk(&ens, &y, &[0.5, 0.9])
            .unwrap();
        let text = report.to_string();
        for key in ["mse:", "mae:", "r2:", "pearson_r:", "mase:", "q_risk_0.5:", "q_risk_0.9:"] {
            assert!(text.contains(key), "missing {key} in {text}");
        }
    }
}
