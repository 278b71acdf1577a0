//! Dense row-major matrices, a cyclic Jacobi eigensolver, a splittable
//! deterministic RNG, and multiply-add instrumentation.

use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Dense real matrix, row-major. Immutable in spirit: every operation
/// returns a fresh matrix; in-place mutation is limited to constructors
/// and the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    /// Builds a matrix from row-major data, validating length and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Invalid(format!("non-positive dims {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "data length {} != {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!(
                "non-finite value {} at flat index {bad}",
                data[bad]
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Mat { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Invalid("empty row list".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged row list".into()));
        }
        Mat::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise sum. Panics on shape mismatch (internal invariant).
    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "add shape");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Mat { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "sub shape");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Mat { rows: self.rows, cols: self.cols, data }
    }

    pub fn scale(&self, s: f64) -> Mat {
        self.map(|v| v * s)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|v| v.is_nan())
    }

    /// Max absolute entry of `self - other`.
    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Multiply-add counters keyed by kernel label. Counters only grow within a
/// measurement scope.
#[derive(Debug, Clone, Default)]
pub struct FlopLedger {
    counts: BTreeMap<String, u64>,
}

impl FlopLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, label: &str, macs: u64) {
        *self.counts.entry(label.to_string()).or_insert(0) += macs;
    }

    pub fn get(&self, label: &str) -> u64 {
        self.counts.get(label).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, u64)> {
        self.counts.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// `a * b` with optional multiply-add accounting under `label`.
pub fn mat_mul_counted(
    a: &Mat,
    b: &Mat,
    ledger: Option<&mut FlopLedger>,
    label: &str,
) -> Result<Mat> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "mat_mul {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    if let Some(l) = ledger {
        l.add(label, (a.rows * a.cols * b.cols) as u64);
    }
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

pub fn mat_mul(a: &Mat, b: &Mat) -> Result<Mat> {
    mat_mul_counted(a, b, None, "mat_mul")
}

/// `a^T * b` without materializing the transpose.
pub fn mat_mul_tn(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.rows != b.rows {
        return Err(Error::Shape(format!(
            "mat_mul_tn {}x{} , {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Mat::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let arow = a.row(k);
        let brow = b.row(k);
        for (i, &aki) in arow.iter().enumerate() {
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aki * bkj;
            }
        }
    }
    Ok(out)
}

/// `a * b^T` without materializing the transpose.
pub fn mat_mul_nt(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.cols {
        return Err(Error::Shape(format!(
            "mat_mul_nt {}x{} , {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            let brow = b.row(j);
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out.data[i * b.rows + j] = s;
        }
    }
    Ok(out)
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues sorted descending and the orthogonal matrix whose
/// columns are the matching eigenvectors. Each eigenvector's sign is fixed so
/// its largest-magnitude component is positive, which makes the result
/// deterministic across runs.
pub fn jacobi_eigh(s: &Mat, tol: f64) -> Result<(Vec<f64>, Mat)> {
    let n = s.rows;
    if s.rows != s.cols {
        return Err(Error::Eigen(format!("matrix is {}x{}, not square", s.rows, s.cols)));
    }
    if tol <= 0.0 {
        return Err(Error::Invalid(format!("tol {tol} must be positive")));
    }
    let mut asym: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            asym = asym.max((s.get(i, j) - s.get(j, i)).abs());
        }
    }
    if asym > 1e-9 {
        return Err(Error::Eigen(format!("symmetry violation {asym:.3e} exceeds 1e-9")));
    }

    let mut a = s.clone();
    // Average the off-diagonal pairs so tiny asymmetries cannot bias rotations.
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a.get(i, j) + a.get(j, i));
            a.set(i, j, v);
            a.set(j, i, v);
        }
    }
    let mut q = Mat::identity(n);

    let max_off = |a: &Mat| -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                m = m.max(a.get(i, j).abs());
            }
        }
        m
    };

    for _sweep in 0..JACOBI_MAX_SWEEPS {
        if max_off(&a) < tol {
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for r in (p + 1)..n {
                let apq = a.get(p, r);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.get(r, r) - a.get(p, p)) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * c;

                let app = a.get(p, p);
                let arr = a.get(r, r);
                a.set(p, p, app - t * apq);
                a.set(r, r, arr + t * apq);
                a.set(p, r, 0.0);
                a.set(r, p, 0.0);
                for j in 0..n {
                    if j == p || j == r {
                        continue;
                    }
                    let ajp = a.get(j, p);
                    let ajr = a.get(j, r);
                    let np = c * ajp - sn * ajr;
                    let nr = sn * ajp + c * ajr;
                    a.set(j, p, np);
                    a.set(p, j, np);
                    a.set(j, r, nr);
                    a.set(r, j, nr);
                }
                for j in 0..n {
                    let qjp = q.get(j, p);
                    let qjr = q.get(j, r);
                    q.set(j, p, c * qjp - sn * qjr);
                    q.set(j, r, sn * qjp + c * qjr);
                }
            }
        }
    }
    if max_off(&a) >= tol {
        return Err(Error::Eigen(format!(
            "no convergence after {JACOBI_MAX_SWEEPS} sweeps (off-diagonal {:.3e} >= tol {tol:.3e})",
            max_off(&a)
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    order.sort_by(|&i, &j| diag[j].partial_cmp(&diag[i]).unwrap());

    let eigenvalues: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut vectors = Mat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        // Sign fix: largest-magnitude component positive.
        let mut best = 0usize;
        let mut best_abs = 0.0;
        for j in 0..n {
            let v = q.get(j, src).abs();
            if v > best_abs {
                best_abs = v;
                best = j;
            }
        }
        let flip = if q.get(best, src) < 0.0 { -1.0 } else { 1.0 };
        for j in 0..n {
            vectors.set(j, dst, flip * q.get(j, src));
        }
    }
    Ok((eigenvalues, vectors))
}

/// Largest singular value via the eigendecomposition of m^T m.
pub fn top_singular_value(m: &Mat) -> Result<f64> {
    let gram = mat_mul_tn(m, m)?;
    let tol = (gram.max_abs() * 1e-13).max(1e-30);
    let (vals, _) = jacobi_eigh(&gram, tol)?;
    Ok(vals[0].max(0.0).sqrt())
}

/// Second singular value. The dominant rank-1 component is deflated before
/// measuring, so an exactly rank-1 input reads at the floating-point noise
/// floor instead of sqrt(machine epsilon).
pub fn second_singular_value(m: &Mat) -> Result<f64> {
    let gram = mat_mul_tn(m, m)?;
    let tol = (gram.max_abs() * 1e-13).max(1e-30);
    let (_, q) = jacobi_eigh(&gram, tol)?;
    // Residual after removing the projection onto the top right-singular
    // direction: R = m - (m v1) v1^T.
    let n = m.cols();
    let mut v1 = Mat::zeros(n, 1);
    for i in 0..n {
        v1.set(i, 0, q.get(i, 0));
    }
    let mv1 = mat_mul(m, &v1)?;
    let mut residual = m.clone();
    for r in 0..m.rows() {
        let s = mv1.get(r, 0);
        for (c, v) in residual.row_mut(r).iter_mut().enumerate() {
            *v -= s * v1.get(c, 0);
        }
    }
    top_singular_value(&residual)
}

/// Splittable deterministic generator. The state is a counter advanced by a
/// fixed odd increment; each output is a hash of the counter, so identical
/// seeds and call sequences reproduce identical streams and child streams are
/// independent of the parent's later draws.
#[derive(Debug, Clone)]
pub struct RngState {
    state: u64,
    gauss_spare: Option<f64>,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState { state: seed, gauss_spare: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Derives an independent child stream. Different tags (or successive
    /// calls) give unrelated streams.
    pub fn split(&mut self, tag: u64) -> RngState {
        let mixed = self
            .next_u64()
            .wrapping_add(tag.wrapping_mul(0xD1B5_4A32_D192_ED03));
        RngState::new(mixed)
    }

    /// Standard normal via Box-Muller; pairs are cached so every draw costs
    /// one value from the stream on average.
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(v) = self.gauss_spare.take() {
            return v;
        }
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.gauss_spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn next_range(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_f64() * n as f64) as usize % n
    }
}

/// Matrix of i.i.d. N(0, std^2) entries drawn row-major from `rng`.
pub fn gaussian_sample(rng: &mut RngState, rows: usize, cols: usize, std: f64) -> Result<Mat> {
    if rows == 0 || cols == 0 {
        return Err(Error::Invalid(format!("non-positive dims {rows}x{cols}")));
    }
    if std < 0.0 {
        return Err(Error::Invalid(format!("negative std {std}")));
    }
    let mut m = Mat::zeros(rows, cols);
    for v in m.data.iter_mut() {
        *v = std * rng.next_gaussian();
    }
    Ok(m)
}

/// Matrix of i.i.d. Uniform(-bound, bound) entries.
pub fn uniform_sample(rng: &mut RngState, rows: usize, cols: usize, bound: f64) -> Result<Mat> {
    if rows == 0 || cols == 0 {
        return Err(Error::Invalid(format!("non-positive dims {rows}x{cols}")));
    }
    let mut m = Mat::zeros(rows, cols);
    for v in m.data.iter_mut() {
        *v = bound * (2.0 * rng.next_f64() - 1.0);
    }
    Ok(m)
}
