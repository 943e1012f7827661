//! Smooth unconstrained minimization: L-BFGS with backtracking Armijo line
//! search, falling back to Nelder-Mead when the function leaves the finite
//! region.

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    MaxIter,
    LineSearchFail,
    FallbackUsed,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub x: Vec<f64>,
    pub value: f64,
    pub initial_value: f64,
    /// Infinity norm of the gradient at `x` (NaN if unavailable).
    pub grad_norm: f64,
    pub iterations: usize,
    pub status: SolveStatus,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimizerError {
    #[error("objective is not finite at the starting point")]
    NonFiniteAtStart,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub gtol: f64,
    pub max_iter: usize,
    /// Relative decrease below which the run counts as converged; 0 disables.
    pub ftol: f64,
    pub memory: usize,
    pub armijo: f64,
    pub fallback_max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            gtol: 1e-6,
            max_iter: 500,
            ftol: 0.0,
            memory: 10,
            armijo: 1e-4,
            fallback_max_iter: 40_000,
        }
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dotp(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Minimizes `f`, which returns the value and writes the gradient.
///
/// Non-finite trial values shrink the line-search step. A run that saw such
/// values and did not converge is continued by Nelder-Mead from the best
/// point, reported as [`SolveStatus::FallbackUsed`].
pub fn minimize<F>(mut f: F, x0: &[f64], opts: &SolveOptions) -> Result<SolveReport, OptimizerError>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let d = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; d];
    let mut fx = f(&x, &mut g);
    if !fx.is_finite() || !all_finite(&g) {
        return Err(OptimizerError::NonFiniteAtStart);
    }
    let f0 = fx;
    if d == 0 {
        return Ok(SolveReport {
            x,
            value: fx,
            initial_value: f0,
            grad_norm: 0.0,
            iterations: 0,
            status: SolveStatus::Converged,
        });
    }
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();
    let mut xt = vec![0.0; d];
    let mut gt = vec![0.0; d];
    let mut dir = vec![0.0; d];
    let mut alpha_buf = vec![0.0; opts.memory];
    let mut status = SolveStatus::MaxIter;
    let mut iter = 0;
    let mut run_nonfinite = false;
    while iter < opts.max_iter {
        if inf_norm(&g) < opts.gtol {
            status = SolveStatus::Converged;
            break;
        }
        // two-loop recursion
        dir.iter_mut().zip(&g).for_each(|(di, gi)| *di = -gi);
        let m = s_hist.len();
        for k in (0..m).rev() {
            let a = rho_hist[k] * dotp(&s_hist[k], &dir);
            alpha_buf[k] = a;
            dir.iter_mut().zip(&y_hist[k]).for_each(|(di, yi)| *di -= a * yi);
        }
        let scale = if m > 0 {
            dotp(&s_hist[m - 1], &y_hist[m - 1]) / dotp(&y_hist[m - 1], &y_hist[m - 1])
        } else {
            1.0 / dotp(&g, &g).sqrt().max(1.0)
        };
        dir.iter_mut().for_each(|di| *di *= scale);
        for k in 0..m {
            let b = rho_hist[k] * dotp(&y_hist[k], &dir);
            dir.iter_mut().zip(&s_hist[k]).for_each(|(di, si)| *di += (alpha_buf[k] - b) * si);
        }
        let mut slope = dotp(&g, &dir);
        if !(slope < 0.0) || !all_finite(&dir) {
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            let sc = 1.0 / dotp(&g, &g).sqrt().max(1.0);
            dir.iter_mut().zip(&g).for_each(|(di, gi)| *di = -gi * sc);
            slope = dotp(&g, &dir);
        }
        let mut step = 1.0;
        let mut accepted = false;
        let mut saw_nonfinite = false;
        let mut ft = f64::NAN;
        for _ in 0..60 {
            xt.iter_mut()
                .zip(&x)
                .zip(&dir)
                .for_each(|((t, xi), di)| *t = xi + step * di);
            ft = f(&xt, &mut gt);
            if !ft.is_finite() || !all_finite(&gt) {
                saw_nonfinite = true;
                run_nonfinite = true;
            } else if ft <= fx + opts.armijo * step * slope {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        iter += 1;
        if !accepted {
            if !s_hist.is_empty() {
                s_hist.clear();
                y_hist.clear();
                rho_hist.clear();
                continue;
            }
            status = if saw_nonfinite {
                SolveStatus::FallbackUsed
            } else {
                SolveStatus::LineSearchFail
            };
            break;
        }
        let s: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dotp(&s, &y);
        let f_prev = fx;
        std::mem::swap(&mut x, &mut xt);
        std::mem::swap(&mut g, &mut gt);
        fx = ft;
        if sy > 1e-12 * dotp(&s, &s).sqrt() * dotp(&y, &y).sqrt() && sy > 0.0 {
            if s_hist.len() == opts.memory {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
            rho_hist.push(1.0 / sy);
        }
        if opts.ftol > 0.0 && (f_prev - fx) <= opts.ftol * f_prev.abs().max(1.0) {
            status = SolveStatus::Converged;
            break;
        }
    }
    if status == SolveStatus::MaxIter && inf_norm(&g) < opts.gtol {
        status = SolveStatus::Converged;
    }
    if status != SolveStatus::Converged && run_nonfinite {
        status = SolveStatus::FallbackUsed;
    }
    if status == SolveStatus::FallbackUsed {
        let nm = nelder_mead(
            |z| {
                let v = f(z, &mut gt);
                if v.is_finite() {
                    v
                } else {
                    f64::INFINITY
                }
            },
            &x,
            fx,
            opts.fallback_max_iter,
        );
        if nm.1 < fx {
            x = nm.0;
            fx = nm.1;
        }
        iter += nm.2;
        let v = f(&x, &mut g);
        let gn = if v.is_finite() && all_finite(&g) { inf_norm(&g) } else { f64::NAN };
        return Ok(SolveReport {
            x,
            value: fx,
            initial_value: f0,
            grad_norm: gn,
            iterations: iter,
            status,
        });
    }
    Ok(SolveReport {
        grad_norm: inf_norm(&g),
        x,
        value: fx,
        initial_value: f0,
        iterations: iter,
        status,
    })
}

/// Derivative-free simplex search from `x0`; returns (best point, best value,
/// iterations).
pub fn nelder_mead<F>(mut f: F, x0: &[f64], f_x0: f64, max_iter: usize) -> (Vec<f64>, f64, usize)
where
    F: FnMut(&[f64]) -> f64,
{
    let d = x0.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = vec![(x0.to_vec(), f_x0)];
    for k in 0..d {
        let mut v = x0.to_vec();
        v[k] = if v[k] != 0.0 { 1.05 * v[k] } else { 0.00025 };
        let fv = f(&v);
        simplex.push((v, fv));
    }
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut it = 0;
    while it < max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[d].1;
        let spread = simplex
            .iter()
            .skip(1)
            .map(|(v, _)| v.iter().zip(&simplex[0].0).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())))
            .fold(0.0f64, f64::max);
        if (worst - best).abs() <= 1e-10 && spread <= 1e-10 {
            break;
        }
        it += 1;
        let mut centroid = vec![0.0; d];
        for (v, _) in &simplex[..d] {
            centroid.iter_mut().zip(v).for_each(|(c, vi)| *c += vi / d as f64);
        }
        let along = |t: f64, c: &[f64], w: &[f64]| -> Vec<f64> {
            c.iter().zip(w).map(|(ci, wi)| ci + t * (ci - wi)).collect()
        };
        let xr = along(alpha, &centroid, &simplex[d].0);
        let fr = f(&xr);
        if fr < simplex[0].1 {
            let xe = along(gamma, &centroid, &simplex[d].0);
            let fe = f(&xe);
            simplex[d] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[d - 1].1 {
            simplex[d] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[d].1 {
                let xc = along(rho, &centroid, &simplex[d].0);
                let fc = f(&xc);
                (xc, fc)
            } else {
                let xc = along(-rho, &centroid, &simplex[d].0);
                let fc = f(&xc);
                (xc, fc)
            };
            if fc < simplex[d].1.min(fr) {
                simplex[d] = (xc, fc);
            } else {
                let x_best = simplex[0].0.clone();
                for (v, fv) in simplex.iter_mut().skip(1) {
                    v.iter_mut()
                        .zip(&x_best)
                        .for_each(|(vi, bi)| *vi = bi + sigma * (*vi - bi));
                    *fv = f(v);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, v) = simplex.swap_remove(0);
    (x, v, it)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_goes_to_origin() {
        let r = minimize(
            |x, g| {
                g[0] = 2.0 * x[0];
                g[1] = 2.0 * x[1];
                x[0] * x[0] + x[1] * x[1]
            },
            &[3.0, 4.0],
            &SolveOptions::default(),
        )
        .unwrap();
        assert_eq!(r.status, SolveStatus::Converged);
        assert!(r.x.iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn rosenbrock_within_200_iterations() {
        let r = minimize(
            |x, g| {
                let (a, b) = (x[0], x[1]);
                g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
                g[1] = 200.0 * (b - a * a);
                (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
            },
            &[-1.2, 1.0],
            &SolveOptions {
                max_iter: 200,
                ..SolveOptions::default()
            },
        )
        .unwrap();
        assert!(r.value < 1e-8, "{r:?}");
        assert!(r.iterations <= 200);
    }

    #[test]
    fn nan_region_triggers_fallback() {
        // Minimum at 5 sits inside a NaN region that starts at 3.
        let f = |x: &[f64], g: &mut [f64]| {
            if x[0] > 3.0 {
                g[0] = f64::NAN;
                return f64::NAN;
            }
            g[0] = 2.0 * (x[0] - 5.0);
            (x[0] - 5.0).powi(2)
        };
        let r = minimize(f, &[0.0], &SolveOptions::default()).unwrap();
        assert_eq!(r.status, SolveStatus::FallbackUsed);
        assert!(r.value <= 25.0);
        assert!(r.x[0] <= 3.0 && r.x[0] > 2.9);
    }

    #[test]
    fn non_finite_start_is_rejected() {
        let r = minimize(|_, _| f64::INFINITY, &[1.0], &SolveOptions::default());
        assert_eq!(r.unwrap_err(), OptimizerError::NonFiniteAtStart);
    }

    #[test]
    fn nelder_mead_finds_quadratic_minimum() {
        let (x, v, _) = nelder_mead(|x| (x[0] - 1.0).powi(2) + (x[1] + 2.0).powi(2), &[0.0, 0.0], 5.0, 10_000);
        assert!(v < 1e-12);
        assert!((x[0] - 1.0).abs() < 1e-5 && (x[1] + 2.0).abs() < 1e-5);
    }
}
