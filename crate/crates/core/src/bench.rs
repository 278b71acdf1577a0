//! Multiply-add accounting and single-threaded wall-clock timing for the
//! token mixers, checked against the closed-form complexity table.

use crate::error::{Error, Result};
use crate::linalg::{gaussian_sample, FlopLedger, Mat, RngState};
use crate::mixers::{LinearLayer, MhsaParams, Mixer, NormLinParams, RankKParams, VecTransParams};
use crate::model::MixerKind;
use std::fmt::Write as _;
use std::time::Instant;

/// Leading-order multiply-add counts per mixer forward:
///   mhsa     2 N^2 D + 4 N D^2
///   normlin  N^2 D + 2 N D^2
///   vectrans 2 N D^2 + N D
///   rank_k   2 N D^2 + 2 N D k + N k + N D
pub fn analytic_flops(kind: MixerKind, n: usize, d: usize) -> Result<u64> {
    let (n, d) = (n as u64, d as u64);
    Ok(match kind {
        MixerKind::Mhsa(_) => 2 * n * n * d + 4 * n * d * d,
        MixerKind::NormLin => n * n * d + 2 * n * d * d,
        MixerKind::VecTrans => 2 * n * d * d + n * d,
        MixerKind::RankK(k) => {
            let k = k as u64;
            2 * n * d * d + 2 * n * d * k + n * k + n * d
        }
        MixerKind::None => return Err(Error::Invalid("no FLOP model for mixer kind 'none'".into())),
    })
}

fn build_mixer(kind: MixerKind, n: usize, d: usize, rng: &mut RngState) -> Result<Mixer> {
    let lin = |rng: &mut RngState| -> Result<LinearLayer> {
        Ok(LinearLayer {
            w: gaussian_sample(rng, d, d, 0.2)?,
            b: gaussian_sample(rng, 1, d, 0.2)?,
        })
    };
    Ok(match kind {
        MixerKind::VecTrans => Mixer::VecTrans(VecTransParams {
            a: gaussian_sample(rng, 1, n, 1.0)?,
            pre: lin(rng)?,
            post: lin(rng)?,
        }),
        MixerKind::RankK(k) => Mixer::RankK {
            params: RankKParams {
                a_mat: gaussian_sample(rng, n, k, 1.0)?.map(|v| v.abs() + 0.1),
                b_mat: gaussian_sample(rng, n, k, 1.0)?,
            },
            pre: lin(rng)?,
            post: lin(rng)?,
        },
        MixerKind::Mhsa(heads) => Mixer::Mhsa(MhsaParams {
            wq: lin(rng)?,
            wk: lin(rng)?,
            wv: lin(rng)?,
            wo: lin(rng)?,
            heads,
        }),
        MixerKind::NormLin => Mixer::NormLin {
            params: NormLinParams { w: gaussian_sample(rng, n, n, 1.0)? },
            pre: lin(rng)?,
            post: lin(rng)?,
        },
        MixerKind::None => return Err(Error::Invalid("cannot bench mixer kind 'none'".into())),
    })
}

/// Runs the mixer forward once on random input with the instrumented matrix
/// core and returns the counted multiply-adds.
pub fn measured_flops(kind: MixerKind, n: usize, d: usize) -> Result<u64> {
    let mut rng = RngState::new(0xBE7C);
    let mixer = build_mixer(kind, n, d, &mut rng)?;
    let h = gaussian_sample(&mut rng, n, d, 1.0)?;
    let mut ledger = FlopLedger::new();
    mixer.forward(&h, Some(&mut ledger))?;
    Ok(ledger.total())
}

/// Counted multiply-adds broken out by kernel label.
pub fn measured_ledger(kind: MixerKind, n: usize, d: usize) -> Result<FlopLedger> {
    let mut rng = RngState::new(0xBE7C);
    let mixer = build_mixer(kind, n, d, &mut rng)?;
    let h = gaussian_sample(&mut rng, n, d, 1.0)?;
    let mut ledger = FlopLedger::new();
    mixer.forward(&h, Some(&mut ledger))?;
    Ok(ledger)
}

/// Median and spread (max - min) of single-threaded wall-clock seconds over
/// `repeats` runs after one warm-up.
pub fn time_mixer(kind: MixerKind, n: usize, d: usize, repeats: usize) -> Result<(f64, f64)> {
    if repeats < 5 {
        return Err(Error::Invalid(format!("repeats {repeats} must be >= 5")));
    }
    let mut rng = RngState::new(0x71ED);
    let mixer = build_mixer(kind, n, d, &mut rng)?;
    let h = gaussian_sample(&mut rng, n, d, 1.0)?;
    let mut sink = 0.0;
    let out = mixer.forward(&h, None)?;
    sink += out.get(0, 0);
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let out = mixer.forward(&h, None)?;
        times.push(start.elapsed().as_secs_f64());
        sink += out.get(0, 0);
    }
    // Keep the compiler from discarding the forwards.
    if !sink.is_finite() {
        return Err(Error::Invalid("non-finite benchmark output".into()));
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = times[times.len() / 2];
    let spread = times[times.len() - 1] - times[0];
    Ok((median, spread))
}

/// Exact slope/intercept of counts that are affine in N, plus the maximum
/// residual of the fit (0 when the counts are exactly affine).
pub fn affine_fit(ns: &[usize], counts: &[u64]) -> (f64, f64, f64) {
    assert!(ns.len() >= 2 && ns.len() == counts.len());
    let x0 = ns[0] as f64;
    let x1 = *ns.last().unwrap() as f64;
    let y0 = counts[0] as f64;
    let y1 = *counts.last().unwrap() as f64;
    let slope = (y1 - y0) / (x1 - x0);
    let intercept = y0 - slope * x0;
    let mut max_resid = 0.0f64;
    for (&n, &c) in ns.iter().zip(counts) {
        let fit = slope * n as f64 + intercept;
        max_resid = max_resid.max((c as f64 - fit).abs());
    }
    (slope, intercept, max_resid)
}

pub const BENCH_KINDS: [MixerKind; 4] = [
    MixerKind::VecTrans,
    MixerKind::RankK(4),
    MixerKind::NormLin,
    MixerKind::Mhsa(2),
];

/// Plain-text table: kind, N, D, analytic, measured, median seconds.
pub fn bench_report(sizes: &[usize], d: usize, repeats: usize) -> Result<String> {
    let mut out = String::new();
    writeln!(out, "{:<10} {:>6} {:>5} {:>14} {:>14} {:>12}", "kind", "N", "D", "analytic", "measured", "median_s").unwrap();
    let mut vectrans_counts = Vec::new();
    for &n in sizes {
        for kind in BENCH_KINDS {
            let analytic = analytic_flops(kind, n, d)?;
            let measured = measured_flops(kind, n, d)?;
            let (median, _) = time_mixer(kind, n, d, repeats)?;
            writeln!(
                out,
                "{:<10} {:>6} {:>5} {:>14} {:>14} {:>12.6}",
                kind.name(),
                n,
                d,
                analytic,
                measured,
                median
            )
            .unwrap();
            if kind == MixerKind::VecTrans {
                vectrans_counts.push(measured);
            }
        }
    }
    if sizes.len() >= 2 {
        let (slope, intercept, resid) = affine_fit(sizes, &vectrans_counts);
        writeln!(
            out,
            "vectrans measured count fit: {slope:.1} * N + {intercept:.1} (max residual {resid:.1})"
        )
        .unwrap();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_values_match_the_printed_formulas() {
        // vecTrans at N=100, D=64: 2*100*64^2 + 100*64 = 825,600.
        assert_eq!(analytic_flops(MixerKind::VecTrans, 100, 64).unwrap(), 825_600);
        // MHSA at N=100, D=64: 2*100^2*64 + 4*100*64^2 = 2,918,400.
        assert_eq!(analytic_flops(MixerKind::Mhsa(2), 100, 64).unwrap(), 2_918_400);
        // Unit shapes: vecTrans 2 + 1 = 3.
        assert_eq!(analytic_flops(MixerKind::VecTrans, 1, 1).unwrap(), 3);
    }

    #[test]
    fn unknown_kind_rejected() {
        assert!(analytic_flops(MixerKind::None, 4, 4).is_err());
    }

    #[test]
    fn measured_matches_analytic_within_factor_two() {
        for kind in BENCH_KINDS {
            let analytic = analytic_flops(kind, 64, 64).unwrap();
            let measured = measured_flops(kind, 64, 64).unwrap();
            let ratio = measured as f64 / analytic as f64;
            assert!(
                (0.5..2.0).contains(&ratio),
                "{}: measured {measured} vs analytic {analytic} (ratio {ratio})",
                kind.name()
            );
        }
    }

    #[test]
    fn measured_is_deterministic() {
        for kind in BENCH_KINDS {
            assert_eq!(
                measured_flops(kind, 48, 32).unwrap(),
                measured_flops(kind, 48, 32).unwrap()
            );
        }
    }

    #[test]
    fn vectrans_count_scales_linearly_in_n() {
        let d = 64;
        let a = measured_flops(MixerKind::VecTrans, 64, d).unwrap();
        let b = measured_flops(MixerKind::VecTrans, 128, d).unwrap();
        let ratio = b as f64 / a as f64;
        assert!((ratio - 2.0).abs() < 0.05, "ratio {ratio}");

        let ns = [32usize, 64, 128, 256];
        let counts: Vec<u64> = ns
            .iter()
            .map(|&n| measured_flops(MixerKind::VecTrans, n, d).unwrap())
            .collect();
        let (_, _, resid) = affine_fit(&ns, &counts);
        assert_eq!(resid, 0.0);
    }

    #[test]
    fn mhsa_quadratic_term_isolated_by_differencing() {
        let d = 64;
        // Subtract the projection cost 4 N D^2: the remainder is the
        // attention part, which must grow 4x when N doubles.
        let attn = |n: usize| -> u64 {
            let total = measured_flops(MixerKind::Mhsa(2), n, d).unwrap();
            total - 4 * (n as u64) * (d as u64) * (d as u64)
        };
        let a = attn(64);
        let b = attn(128);
        let ratio = b as f64 / a as f64;
        assert!((ratio - 4.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn timing_is_positive_and_reports_requested_repeats() {
        let (median, spread) = time_mixer(MixerKind::VecTrans, 32, 32, 5).unwrap();
        assert!(median > 0.0);
        assert!(spread >= 0.0);
        assert!(time_mixer(MixerKind::VecTrans, 32, 32, 4).is_err());
    }

    #[test]
    fn report_has_expected_rows() {
        let text = bench_report(&[32, 64], 32, 5).unwrap();
        let rows: Vec<&str> = text.lines().collect();
        // Header + 2 sizes x 4 kinds + fit line.
        assert_eq!(rows.len(), 1 + 8 + 1);
        assert!(text.contains("vectrans measured count fit"));
    }
}
