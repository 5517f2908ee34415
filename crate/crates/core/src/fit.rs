//! Peak-shape fitting for correlation histograms.
//!
//! The cross-correlation of the two arms of a continuously pumped pair
//! source is a two-sided exponential peak on a flat background:
//!
//! ```text
//! y(tau) = baseline + amplitude * exp(-|tau| / tau_side)
//! ```
//!
//! with independent decay constants on the negative (`tau_left`) and
//! positive (`tau_right`) sides; those sides estimate the coherence times
//! of the two arms. The fit is solved by variable projection: for fixed
//! decay constants the model is linear in (baseline, amplitude), so the
//! inner problem is a closed-form 2x2 least-squares solve, and only the
//! two log-decay constants are optimized numerically (Nelder-Mead). The
//! profiled objective also yields the decay-constant errors from its
//! numerical Hessian, while the linear covariance gives the baseline and
//! amplitude errors and their correlated zero-delay extrapolation
//! `y(0) = baseline + amplitude`.

use serde::{Deserialize, Serialize};

use crate::correlation::CorrelationHistogram;
use crate::error::{Error, Result};
use crate::types::Estimate;

/// Result of the two-sided exponential peak fit. Delay units are
/// picoseconds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoherenceFit {
    pub baseline: Estimate,
    pub amplitude: Estimate,
    /// Decay constant of the negative-delay side.
    pub tau_left_ps: Estimate,
    /// Decay constant of the positive-delay side.
    pub tau_right_ps: Estimate,
    /// Fitted curve at zero delay, `baseline + amplitude`, with the
    /// covariance of the two linear parameters folded in.
    pub zero_delay: Estimate,
    pub n_points: usize,
    /// Residual sum of squares at the optimum.
    pub sse: f64,
}

/// Two-sided exponential shape factor at delay `tau`.
fn shape(tau: f64, tau_left: f64, tau_right: f64) -> f64 {
    if tau < 0.0 {
        (tau / tau_left).exp()
    } else {
        (-tau / tau_right).exp()
    }
}

/// Closed-form linear subproblem: best (baseline, amplitude) for fixed
/// decay constants, plus the terms needed for covariance. Returns None
/// when the design is degenerate.
struct LinearSolution {
    baseline: f64,
    amplitude: f64,
    sse: f64,
    n: f64,
    sum_f: f64,
    sum_f2: f64,
    det: f64,
}

fn solve_linear(points: &[(f64, f64)], tau_left: f64, tau_right: f64) -> Option<LinearSolution> {
    let n = points.len() as f64;
    let (mut sum_f, mut sum_f2, mut sum_y, mut sum_fy) = (0.0, 0.0, 0.0, 0.0);
    for &(tau, y) in points {
        let f = shape(tau, tau_left, tau_right);
        sum_f += f;
        sum_f2 += f * f;
        sum_y += y;
        sum_fy += f * y;
    }
    let det = n * sum_f2 - sum_f * sum_f;
    if !(det > 1e-12 * n * sum_f2.max(1e-300)) {
        return None;
    }
    let baseline = (sum_f2 * sum_y - sum_f * sum_fy) / det;
    let amplitude = (n * sum_fy - sum_f * sum_y) / det;
    let mut sse = 0.0;
    for &(tau, y) in points {
        let r = y - baseline - amplitude * shape(tau, tau_left, tau_right);
        sse += r * r;
    }
    Some(LinearSolution { baseline, amplitude, sse, n, sum_f, sum_f2, det })
}

/// Deterministic Nelder-Mead on a 2-d objective. Returns the best vertex
/// after convergence of the simplex spread or `max_iter` steps.
fn nelder_mead_2d(
    mut f: impl FnMut(f64, f64) -> f64,
    start: (f64, f64),
    step: f64,
    max_iter: usize,
) -> (f64, f64) {
    let mut simplex = [
        (start.0, start.1),
        (start.0 + step, start.1),
        (start.0, start.1 + step),
    ];
    let mut values = simplex.map(|(a, b)| f(a, b));
    for _ in 0..max_iter {
        // Order: best, middle, worst.
        let mut order = [0usize, 1, 2];
        order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
        let [best, mid, worst] = order;
        if (values[worst] - values[best]).abs()
            <= 1e-12 * (values[best].abs() + values[worst].abs() + 1e-300)
        {
            break;
        }
        let centroid = (
            (simplex[best].0 + simplex[mid].0) / 2.0,
            (simplex[best].1 + simplex[mid].1) / 2.0,
        );
        let reflect = (
            centroid.0 + (centroid.0 - simplex[worst].0),
            centroid.1 + (centroid.1 - simplex[worst].1),
        );
        let f_reflect = f(reflect.0, reflect.1);
        if f_reflect < values[best] {
            let expand = (
                centroid.0 + 2.0 * (centroid.0 - simplex[worst].0),
                centroid.1 + 2.0 * (centroid.1 - simplex[worst].1),
            );
            let f_expand = f(expand.0, expand.1);
            if f_expand < f_reflect {
                simplex[worst] = expand;
                values[worst] = f_expand;
            } else {
                simplex[worst] = reflect;
                values[worst] = f_reflect;
            }
        } else if f_reflect < values[mid] {
            simplex[worst] = reflect;
            values[worst] = f_reflect;
        } else {
            let contract = (
                centroid.0 + 0.5 * (simplex[worst].0 - centroid.0),
                centroid.1 + 0.5 * (simplex[worst].1 - centroid.1),
            );
            let f_contract = f(contract.0, contract.1);
            if f_contract < values[worst] {
                simplex[worst] = contract;
                values[worst] = f_contract;
            } else {
                // Shrink toward the best vertex.
                for i in [mid, worst] {
                    simplex[i] = (
                        simplex[best].0 + 0.5 * (simplex[i].0 - simplex[best].0),
                        simplex[best].1 + 0.5 * (simplex[i].1 - simplex[best].1),
                    );
                    values[i] = f(simplex[i].0, simplex[i].1);
                }
            }
        }
    }
    let mut best = 0;
    for i in 1..3 {
        if values[i] < values[best] {
            best = i;
        }
    }
    simplex[best]
}

/// Fit `baseline + amplitude * exp(-|tau|/tau_side)` to (tau_ps, value)
/// points with independent decay constants per side.
///
/// Needs at least 8 points with at least 3 on each side of zero. The
/// decay constants are constrained (through their logarithms) to
/// `[0.05, 20] *` the span of the data.
pub fn fit_two_sided_exponential(points: &[(f64, f64)]) -> Result<CoherenceFit> {
    let n_left = points.iter().filter(|&&(t, _)| t < 0.0).count();
    let n_right = points.iter().filter(|&&(t, _)| t > 0.0).count();
    if points.len() < 8 || n_left < 3 || n_right < 3 {
        return Err(Error::Fit(format!(
            "peak fit needs >= 8 points with >= 3 per side, got {} ({n_left} left, \
             {n_right} right)",
            points.len()
        )));
    }
    let span = points
        .iter()
        .map(|&(t, _)| t.abs())
        .fold(0.0f64, f64::max);
    if !(span > 0.0) {
        return Err(Error::Fit("all points sit at zero delay".into()));
    }
    let (tau_min, tau_max) = (0.05 * span, 20.0 * span);

    // Initial guesses: baseline from the outer quarter of the delay span,
    // decay constants from the excess-weighted mean |tau| per side.
    let outer: Vec<f64> = points
        .iter()
        .filter(|&&(t, _)| t.abs() >= 0.75 * span)
        .map(|&(_, y)| y)
        .collect();
    let b0 = if outer.is_empty() {
        points.iter().map(|&(_, y)| y).sum::<f64>() / points.len() as f64
    } else {
        outer.iter().sum::<f64>() / outer.len() as f64
    };
    let tau0 = |side: f64| -> f64 {
        let (mut wsum, mut wtau) = (0.0, 0.0);
        for &(t, y) in points {
            if t * side > 0.0 && y > b0 {
                wsum += y - b0;
                wtau += (y - b0) * t.abs();
            }
        }
        if wsum > 0.0 {
            (wtau / wsum).clamp(tau_min, tau_max)
        } else {
            (0.2 * span).clamp(tau_min, tau_max)
        }
    };
    let start = (tau0(-1.0).ln(), tau0(1.0).ln());

    let objective = |ln_l: f64, ln_r: f64| -> f64 {
        let tl = ln_l.exp();
        let tr = ln_r.exp();
        if !(tau_min..=tau_max).contains(&tl) || !(tau_min..=tau_max).contains(&tr) {
            return f64::INFINITY;
        }
        match solve_linear(points, tl, tr) {
            Some(sol) => sol.sse,
            None => f64::INFINITY,
        }
    };
    let (ln_l, ln_r) = nelder_mead_2d(objective, start, 0.4, 400);
    let (tau_left, tau_right) = (ln_l.exp(), ln_r.exp());
    let sol = solve_linear(points, tau_left, tau_right).ok_or_else(|| {
        Error::Fit("degenerate design matrix at the optimum (flat shape factor)".into())
    })?;
    if !sol.sse.is_finite() {
        return Err(Error::Fit("peak fit did not converge to a finite residual".into()));
    }

    // Residual variance with 4 fitted parameters.
    let dof = (points.len() as f64 - 4.0).max(1.0);
    let sigma2 = sol.sse / dof;
    // Linear-parameter covariance from the 2x2 normal-equation inverse.
    let var_b = sigma2 * sol.sum_f2 / sol.det;
    let var_a = sigma2 * sol.n / sol.det;
    let cov_ba = -sigma2 * sol.sum_f / sol.det;
    let var_zero = (var_b + var_a + 2.0 * cov_ba).max(0.0);

    // Decay-constant errors from the numerical Hessian of the profiled
    // objective in log space: cov(ln tau) = 2 * sigma2 * H^{-1}.
    let h = 1e-3;
    let f00 = sol.sse;
    let fpp = objective(ln_l + h, ln_r + h);
    let fpm = objective(ln_l + h, ln_r - h);
    let fmp = objective(ln_l - h, ln_r + h);
    let fmm = objective(ln_l - h, ln_r - h);
    let fp0 = objective(ln_l + h, ln_r);
    let fm0 = objective(ln_l - h, ln_r);
    let f0p = objective(ln_l, ln_r + h);
    let f0m = objective(ln_l, ln_r - h);
    let h11 = (fp0 - 2.0 * f00 + fm0) / (h * h);
    let h22 = (f0p - 2.0 * f00 + f0m) / (h * h);
    let h12 = (fpp - fpm - fmp + fmm) / (4.0 * h * h);
    let hdet = h11 * h22 - h12 * h12;
    let (var_ln_l, var_ln_r) = if hdet > 0.0 && h11 > 0.0 {
        (2.0 * sigma2 * h22 / hdet, 2.0 * sigma2 * h11 / hdet)
    } else {
        (f64::NAN, f64::NAN)
    };

    Ok(CoherenceFit {
        baseline: Estimate { value: sol.baseline, std_err: var_b.max(0.0).sqrt() },
        amplitude: Estimate { value: sol.amplitude, std_err: var_a.max(0.0).sqrt() },
        tau_left_ps: Estimate {
            value: tau_left,
            std_err: tau_left * var_ln_l.max(0.0).sqrt(),
        },
        tau_right_ps: Estimate {
            value: tau_right,
            std_err: tau_right * var_ln_r.max(0.0).sqrt(),
        },
        zero_delay: Estimate { value: sol.baseline + sol.amplitude, std_err: var_zero.sqrt() },
        n_points: points.len(),
        sse: sol.sse,
    })
}

/// Fit the normalized correlation peak of a histogram, using only bins
/// holding at least `min_counts` raw pairs so empty-tail bins cannot drag
/// the unweighted fit.
pub fn fit_g2_peak(hist: &CorrelationHistogram, min_counts: u64) -> Result<CoherenceFit> {
    let g2 = hist.g2()?;
    let points: Vec<(f64, f64)> = (0..hist.n_bins())
        .filter(|&i| hist.counts[i] >= min_counts)
        .map(|i| (hist.tau_at(i) as f64, g2[i].value))
        .collect();
    fit_two_sided_exponential(&points)
}
