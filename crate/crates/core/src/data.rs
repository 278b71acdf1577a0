//! CSV ingestion, chronological splits, sliding windows, global
//! standardization, and synthetic series for desk-scale experiments.

use crate::error::{Error, Result};
use crate::linalg::{Mat, RngState};
use std::path::Path;

/// A full multivariate series: `values` is variates x timesteps.
#[derive(Debug, Clone)]
pub struct RawSeries {
    pub names: Vec<String>,
    pub values: Mat,
    pub origin: String,
}

impl RawSeries {
    pub fn n_var(&self) -> usize {
        self.values.rows()
    }

    pub fn len(&self) -> usize {
        self.values.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copy of timestep columns `start..end` for all variates.
    pub fn slice_time(&self, start: usize, end: usize, origin: &str) -> RawSeries {
        assert!(start < end && end <= self.len(), "slice bounds");
        let v = self.n_var();
        let mut out = Mat::zeros(v, end - start);
        for r in 0..v {
            out.row_mut(r).copy_from_slice(&self.values.row(r)[start..end]);
        }
        RawSeries { names: self.names.clone(), values: out, origin: origin.to_string() }
    }
}

/// One training or evaluation example.
#[derive(Debug, Clone)]
pub struct Sample {
    /// Lookback window, variates x t_len.
    pub x: Mat,
    /// Target window immediately following `x`, variates x h_len.
    pub y: Mat,
}

/// Chronological (train, val, test) ratios.
#[derive(Debug, Clone, Copy)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        for (name, r) in [("train", train), ("val", val), ("test", test)] {
            if r <= 0.0 {
                return Err(Error::Invalid(format!(
                    "split ratio {name}={r} must be positive (degenerate split leaves a segment empty)"
                )));
            }
        }
        let sum = train + val + test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("split ratios sum to {sum}, expected 1")));
        }
        Ok(SplitSpec { train, val, test })
    }
}

/// Per-variate mean and standard deviation fitted on the train split.
#[derive(Debug, Clone)]
pub struct GlobalStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GlobalStats {
    /// Identity transform for pipelines that skip standardization.
    pub fn identity(n_var: usize) -> Self {
        GlobalStats { mean: vec![0.0; n_var], std: vec![1.0; n_var] }
    }

    pub fn fit(train: &RawSeries) -> Result<Self> {
        let v = train.n_var();
        let l = train.len() as f64;
        let mut mean = vec![0.0; v];
        let mut std = vec![0.0; v];
        for r in 0..v {
            let row = train.values.row(r);
            let m = row.iter().sum::<f64>() / l;
            let var = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / l;
            if var <= 0.0 {
                return Err(Error::Data(format!(
                    "variate '{}' is constant on the train split (std = 0)",
                    train.names[r]
                )));
            }
            mean[r] = m;
            std[r] = var.sqrt();
        }
        Ok(GlobalStats { mean, std })
    }
}

/// Parses a comma-separated file with a mandatory header row. A leading
/// timestamp column is skipped when its first data cell is not numeric.
pub fn load_csv(path: &Path) -> Result<RawSeries> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty file", path.display())))?;
    let mut names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();

    let rows: Vec<&str> = lines.collect();
    if rows.len() < 2 {
        return Err(Error::Data(format!(
            "{}: need at least 2 data rows, found {}",
            path.display(),
            rows.len()
        )));
    }

    let first_cells: Vec<&str> = rows[0].split(',').collect();
    if first_cells.len() != names.len() {
        return Err(Error::Data(format!(
            "{}: row 1 has {} cells, header has {}",
            path.display(),
            first_cells.len(),
            names.len()
        )));
    }
    let skip_first = first_cells[0].trim().parse::<f64>().is_err();
    if skip_first {
        names.remove(0);
        if names.is_empty() {
            return Err(Error::Data(format!("{}: no numeric columns", path.display())));
        }
    }

    let v = names.len();
    let l = rows.len();
    let mut values = Mat::zeros(v, l);
    for (t, line) in rows.iter().enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        let expected = v + usize::from(skip_first);
        if cells.len() != expected {
            return Err(Error::Data(format!(
                "{}: row {} has {} cells, expected {expected}",
                path.display(),
                t + 1,
                cells.len()
            )));
        }
        for (c, cell) in cells.iter().skip(usize::from(skip_first)).enumerate() {
            let parsed = cell.trim().parse::<f64>().map_err(|_| {
                Error::Data(format!(
                    "{}: non-numeric value '{}' at row {}, column '{}'",
                    path.display(),
                    cell.trim(),
                    t + 1,
                    names[c]
                ))
            })?;
            if !parsed.is_finite() {
                return Err(Error::Data(format!(
                    "{}: non-finite value at row {}, column '{}'",
                    path.display(),
                    t + 1,
                    names[c]
                )));
            }
            values.set(c, t, parsed);
        }
    }
    Ok(RawSeries { names, values, origin: path.display().to_string() })
}

/// Sliding windows at offsets 0, stride, 2*stride, ...
pub fn make_windows(series: &RawSeries, t_len: usize, h_len: usize, stride: usize) -> Result<Vec<Sample>> {
    if t_len == 0 || h_len == 0 || stride == 0 {
        return Err(Error::Invalid("t_len, h_len and stride must be >= 1".into()));
    }
    let l = series.len();
    if l < t_len + h_len {
        return Err(Error::Data(format!(
            "series '{}' has {l} steps, too short for a {t_len}+{h_len} window",
            series.origin
        )));
    }
    let count = (l - t_len - h_len) / stride + 1;
    let mut out = Vec::with_capacity(count);
    for w in 0..count {
        let start = w * stride;
        let xs = series.slice_time(start, start + t_len, &series.origin);
        let ys = series.slice_time(start + t_len, start + t_len + h_len, &series.origin);
        out.push(Sample { x: xs.values, y: ys.values });
    }
    Ok(out)
}

/// Closed-form window count used by `make_windows`.
pub fn window_count(len: usize, t_len: usize, h_len: usize, stride: usize) -> usize {
    if len < t_len + h_len {
        0
    } else {
        (len - t_len - h_len) / stride + 1
    }
}

/// Chronological split with boundaries at cumulative `floor(ratio * L)`.
/// Val and test are prepended with the final `t_len` steps of the preceding
/// segment so their first forecastable window starts at the boundary.
pub fn split_chronological(
    series: &RawSeries,
    spec: &SplitSpec,
    t_len: usize,
    h_len: usize,
) -> Result<(RawSeries, RawSeries, RawSeries)> {
    let l = series.len();
    let b1 = (spec.train * l as f64).floor() as usize;
    let b2 = ((spec.train + spec.val) * l as f64).floor() as usize;
    if b1 < t_len + h_len {
        return Err(Error::Data(format!(
            "train split of {b1} steps cannot form one {t_len}+{h_len} window"
        )));
    }
    if b2 - b1 < h_len || l - b2 < h_len {
        return Err(Error::Data(format!(
            "val ({}) or test ({}) split too short for horizon {h_len}",
            b2 - b1,
            l - b2
        )));
    }
    let train = series.slice_time(0, b1, "train");
    let val = series.slice_time(b1 - t_len, b2, "val");
    let test = series.slice_time(b2 - t_len, l, "test");
    Ok((train, val, test))
}

/// Per-variate z-score with train-split statistics.
pub fn standardize(series: &RawSeries, stats: &GlobalStats) -> Result<RawSeries> {
    if stats.mean.len() != series.n_var() {
        return Err(Error::Shape(format!(
            "stats cover {} variates, series has {}",
            stats.mean.len(),
            series.n_var()
        )));
    }
    let mut out = series.clone();
    for r in 0..series.n_var() {
        let (m, s) = (stats.mean[r], stats.std[r]);
        for v in out.values.row_mut(r) {
            *v = (*v - m) / s;
        }
    }
    Ok(out)
}

/// Inverse of [`standardize`].
pub fn destandardize(series: &RawSeries, stats: &GlobalStats) -> Result<RawSeries> {
    if stats.mean.len() != series.n_var() {
        return Err(Error::Shape(format!(
            "stats cover {} variates, series has {}",
            stats.mean.len(),
            series.n_var()
        )));
    }
    let mut out = series.clone();
    for r in 0..series.n_var() {
        let (m, s) = (stats.mean[r], stats.std[r]);
        for v in out.values.row_mut(r) {
            *v = *v * s + m;
        }
    }
    Ok(out)
}

/// Inverse z-score applied to a forecast matrix (variates x horizon).
pub fn destandardize_mat(m: &Mat, stats: &GlobalStats) -> Result<Mat> {
    if stats.mean.len() != m.rows() {
        return Err(Error::Shape(format!(
            "stats cover {} variates, matrix has {} rows",
            stats.mean.len(),
            m.rows()
        )));
    }
    let mut out = m.clone();
    for r in 0..m.rows() {
        let (mu, s) = (stats.mean[r], stats.std[r]);
        for v in out.row_mut(r) {
            *v = *v * s + mu;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// Sum of two rng-drawn sinusoids per variate plus N(0, 0.1) noise.
    SineMixture,
    /// Cumulative sum of N(0, 1) increments.
    RandomWalk,
}

impl SynthKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sine_mixture" => Ok(SynthKind::SineMixture),
            "random_walk" => Ok(SynthKind::RandomWalk),
            other => Err(Error::Invalid(format!("unknown synthetic kind '{other}'"))),
        }
    }
}

const SINE_NOISE_STD: f64 = 0.1;

/// Deterministic synthetic dataset generator.
pub fn synth_generate(kind: SynthKind, n_var: usize, length: usize, rng: &mut RngState) -> Result<RawSeries> {
    if n_var == 0 {
        return Err(Error::Invalid("n_var must be >= 1".into()));
    }
    if length < 8 {
        return Err(Error::Invalid(format!("length {length} must be >= 8")));
    }
    let mut values = Mat::zeros(n_var, length);
    match kind {
        SynthKind::SineMixture => {
            for r in 0..n_var {
                let w1 = 2.0 * std::f64::consts::PI / (16.0 + 48.0 * rng.next_f64());
                let w2 = 2.0 * std::f64::consts::PI / (16.0 + 48.0 * rng.next_f64());
                let p1 = 2.0 * std::f64::consts::PI * rng.next_f64();
                let p2 = 2.0 * std::f64::consts::PI * rng.next_f64();
                for t in 0..length {
                    let t_f = t as f64;
                    let v = (w1 * t_f + p1).sin()
                        + (w2 * t_f + p2).sin()
                        + SINE_NOISE_STD * rng.next_gaussian();
                    values.set(r, t, v);
                }
            }
        }
        SynthKind::RandomWalk => {
            for r in 0..n_var {
                let mut acc = 0.0;
                for t in 0..length {
                    acc += rng.next_gaussian();
                    values.set(r, t, acc);
                }
            }
        }
    }
    let names = (0..n_var).map(|i| format!("v{i}")).collect();
    let origin = match kind {
        SynthKind::SineMixture => "synth:sine_mixture",
        SynthKind::RandomWalk => "synth:random_walk",
    };
    Ok(RawSeries { names, values, origin: origin.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_csv_with_timestamp_column() {
        let f = write_temp("date,a,b\nt0,1,2\nt1,3,4\n");
        let s = load_csv(f.path()).unwrap();
        assert_eq!(s.names, vec!["a", "b"]);
        assert_eq!(s.n_var(), 2);
        assert_eq!(s.len(), 2);
        assert_eq!(s.values.row(0), &[1.0, 3.0]);
        assert_eq!(s.values.row(1), &[2.0, 4.0]);
    }

    #[test]
    fn load_csv_without_timestamp_column() {
        let f = write_temp("a,b\n1,2\n3,4\n5,6\n");
        let s = load_csv(f.path()).unwrap();
        assert_eq!(s.n_var(), 2);
        assert_eq!(s.len(), 3);
    }

    #[test]
    fn load_csv_reports_bad_cell() {
        let f = write_temp("date,a,b\nt0,abc,2\nt1,3,4\n");
        let err = load_csv(f.path()).unwrap_err().to_string();
        assert!(err.contains("row 1"), "{err}");
        assert!(err.contains("column 'a'"), "{err}");
    }

    #[test]
    fn load_csv_missing_file() {
        assert!(load_csv(Path::new("/nonexistent/x.csv")).is_err());
    }

    #[test]
    fn load_csv_too_few_rows() {
        let f = write_temp("a,b\n1,2\n");
        assert!(load_csv(f.path()).is_err());
    }

    fn series(len: usize) -> RawSeries {
        let mut values = Mat::zeros(1, len);
        for t in 0..len {
            values.set(0, t, t as f64);
        }
        RawSeries { names: vec!["v0".into()], values, origin: "test".into() }
    }

    #[test]
    fn window_counts_match_spec_examples() {
        assert_eq!(make_windows(&series(10), 4, 2, 1).unwrap().len(), 5);
        assert_eq!(make_windows(&series(6), 4, 2, 1).unwrap().len(), 1);
        // Stride 3 gives offsets 0 and 3.
        let w = make_windows(&series(10), 4, 2, 3).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[1].x.row(0), &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(w[1].y.row(0), &[7.0, 8.0]);
    }

    #[test]
    fn windows_are_contiguous() {
        let w = make_windows(&series(12), 5, 3, 2).unwrap();
        for s in &w {
            assert_eq!(s.y.get(0, 0), s.x.get(0, 4) + 1.0);
        }
    }

    #[test]
    fn too_short_series_errors() {
        assert!(make_windows(&series(5), 4, 2, 1).is_err());
    }

    #[test]
    fn split_indices_match_hand_arithmetic() {
        let s = series(100);
        let spec = SplitSpec::new(0.7, 0.1, 0.2).unwrap();
        let (train, val, test) = split_chronological(&s, &spec, 4, 2).unwrap();
        assert_eq!(train.values.row(0)[0], 0.0);
        assert_eq!(*train.values.row(0).last().unwrap(), 69.0);
        assert_eq!(val.values.row(0)[0], 66.0);
        assert_eq!(*val.values.row(0).last().unwrap(), 79.0);
        assert_eq!(test.values.row(0)[0], 76.0);
        assert_eq!(*test.values.row(0).last().unwrap(), 99.0);
    }

    #[test]
    fn degenerate_split_rejected() {
        assert!(SplitSpec::new(1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn small_split_yields_three_window_sets() {
        let s = series(10);
        let spec = SplitSpec::new(0.6, 0.2, 0.2).unwrap();
        let (train, val, test) = split_chronological(&s, &spec, 2, 1).unwrap();
        assert!(!make_windows(&train, 2, 1, 1).unwrap().is_empty());
        assert!(!make_windows(&val, 2, 1, 1).unwrap().is_empty());
        assert!(!make_windows(&test, 2, 1, 1).unwrap().is_empty());
    }

    #[test]
    fn constant_variate_rejected_at_fit() {
        let s = RawSeries {
            names: vec!["c".into()],
            values: Mat::filled(1, 10, 3.0),
            origin: "test".into(),
        };
        assert!(GlobalStats::fit(&s).is_err());
    }

    #[test]
    fn standardize_hand_case() {
        let s = RawSeries {
            names: vec!["v".into()],
            values: Mat::new(1, 2, vec![0.0, 2.0]).unwrap(),
            origin: "test".into(),
        };
        let stats = GlobalStats { mean: vec![1.0], std: vec![1.0] };
        let z = standardize(&s, &stats).unwrap();
        assert_eq!(z.values.row(0), &[-1.0, 1.0]);
    }

    #[test]
    fn random_walk_reproducible() {
        let a = synth_generate(SynthKind::RandomWalk, 3, 50, &mut RngState::new(4)).unwrap();
        let b = synth_generate(SynthKind::RandomWalk, 3, 50, &mut RngState::new(4)).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn random_walk_variance_grows_linearly() {
        // Var(y_i) = i * sigma^2 for the cumulative-sum model; Monte Carlo
        // over 10^4 realizations.
        let mut rng = RngState::new(12);
        let s = synth_generate(SynthKind::RandomWalk, 10_000, 16, &mut rng).unwrap();
        for step in [3usize, 7, 15] {
            let col: Vec<f64> = (0..s.n_var()).map(|r| s.values.get(r, step)).collect();
            let n = col.len() as f64;
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let expected = (step + 1) as f64;
            assert!(
                (var / expected - 1.0).abs() < 0.1,
                "step {step}: var {var} vs {expected}"
            );
        }
    }

    #[test]
    fn sine_mixture_bounded() {
        let s = synth_generate(SynthKind::SineMixture, 4, 2000, &mut RngState::new(7)).unwrap();
        let bound = 2.0 + 6.0 * SINE_NOISE_STD;
        assert!(s.values.max_abs() <= bound);
    }

    #[test]
    fn unknown_synth_kind_rejected() {
        assert!(SynthKind::parse("sawtooth").is_err());
    }

    proptest! {
        #[test]
        fn window_count_closed_form(len in 4usize..200, t in 1usize..8, h in 1usize..8, stride in 1usize..5) {
            prop_assume!(len >= t + h);
            let w = make_windows(&series(len), t, h, stride).unwrap();
            prop_assert_eq!(w.len(), window_count(len, t, h, stride));
            // Last window fits.
            let last_start = (w.len() - 1) * stride;
            prop_assert!(last_start + t + h <= len);
            // One more stride would not fit.
            prop_assert!(last_start + stride + t + h > len);
        }

        #[test]
        fn standardize_roundtrip_exact(seed in 0u64..1000) {
            let mut rng = RngState::new(seed);
            let s = synth_generate(SynthKind::RandomWalk, 3, 40, &mut rng).unwrap();
            let stats = GlobalStats::fit(&s).unwrap();
            let z = standardize(&s, &stats).unwrap();
            let back = destandardize(&z, &stats).unwrap();
            prop_assert!(back.values.max_abs_diff(&s.values) < 1e-12);
        }
    }
}
