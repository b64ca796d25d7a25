//! Constant fitting and the normalized error metric.
//!
//! [`fit_constants`] minimizes the plain mean squared error of a skeleton
//! over its placeholder values with BFGS. Gradients are central differences,
//! the line search enforces the strong Wolfe conditions, and several random
//! starting points are tried. Numeric trouble never panics: points where the
//! expression is undefined score `+∞` and the line search backs away.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{Columns, Expr, Program};

/// Guard added to every component of `y` before taking its norm.
pub const MSE_N_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("length mismatch: {0} targets, {1} predictions")]
    Length(usize, usize),
    #[error("empty target vector")]
    Empty,
}

/// `(1/n) Σ (yᵢ − ŷᵢ)² / ‖y + ε‖₂`, or `+∞` when `ŷ` has a non-finite entry.
pub fn mse_n(y: &[f64], y_hat: &[f64]) -> Result<f64, MetricError> {
    if y.len() != y_hat.len() {
        return Err(MetricError::Length(y.len(), y_hat.len()));
    }
    if y.is_empty() {
        return Err(MetricError::Empty);
    }
    if y_hat.iter().any(|v| !v.is_finite()) {
        return Ok(f64::INFINITY);
    }
    let plain = scaled_mse_n(y, y_hat, 1.0);
    if plain.is_finite() {
        return Ok(plain);
    }
    // Huge targets overflow the squares; rescale by a power of two (exact).
    let big = y.iter().chain(y_hat).fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = 2f64.powi(big.log2().ceil() as i32);
    let r = scale * scaled_mse_n(y, y_hat, scale);
    Ok(if r.is_nan() { f64::INFINITY } else { r })
}

fn scaled_mse_n(y: &[f64], y_hat: &[f64], scale: f64) -> f64 {
    let sq: f64 = y
        .iter()
        .zip(y_hat)
        .map(|(a, b)| (a / scale - b / scale).powi(2))
        .sum();
    let norm = y
        .iter()
        .map(|v| ((v + MSE_N_EPS) / scale).powi(2))
        .sum::<f64>()
        .sqrt();
    sq / y.len() as f64 / norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub restarts: usize,
    pub max_iter: usize,
    pub c_min: f64,
    pub c_max: f64,
    pub seed: u64,
    /// Stop when the largest gradient component falls below this.
    pub grad_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            restarts: 10,
            max_iter: 100,
            c_min: -2.1,
            c_max: 2.1,
            seed: 0,
            grad_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Converged,
    MaxIter,
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    /// The skeleton with constants filled in (the skeleton itself on failure).
    pub expr: Expr,
    pub constants: Vec<f64>,
    /// Mean squared error at `constants`; `+∞` on failure.
    pub objective: f64,
    pub status: FitStatus,
    pub restarts: usize,
    pub iterations: usize,
}

/// Mean squared error of a compiled skeleton; `+∞` wherever it is undefined.
pub struct Objective<'a> {
    program: Program,
    x: Columns,
    y: &'a [f64],
}

impl<'a> Objective<'a> {
    pub fn new(skeleton: &Expr, x: &[f64], d: usize, y: &'a [f64]) -> Objective<'a> {
        Objective {
            program: Program::compile(skeleton),
            x: Columns::from_rows(x, d),
            y,
        }
    }

    pub fn dim(&self) -> usize {
        self.program.slots()
    }

    pub fn value(&self, c: &[f64]) -> f64 {
        match self.program.eval_columns(&self.x, c) {
            Ok(pred) => {
                let s: f64 = pred
                    .iter()
                    .zip(self.y)
                    .map(|(p, t)| (p - t) * (p - t))
                    .sum();
                let m = s / self.y.len().max(1) as f64;
                if m.is_finite() {
                    m
                } else {
                    f64::INFINITY
                }
            }
            Err(_) => f64::INFINITY,
        }
    }

    /// Central differences with step `1e-6 · (1 + |cᵢ|)`, falling back to a
    /// one-sided difference when one side is undefined.
    pub fn gradient(&self, c: &[f64], fc: f64) -> Vec<f64> {
        let mut probe = c.to_vec();
        (0..c.len())
            .map(|i| {
                let h = 1e-6 * (1.0 + c[i].abs());
                probe[i] = c[i] + h;
                let up = self.value(&probe);
                probe[i] = c[i] - h;
                let down = self.value(&probe);
                probe[i] = c[i];
                match (up.is_finite(), down.is_finite()) {
                    (true, true) => (up - down) / (2.0 * h),
                    (true, false) => (up - fc) / h,
                    (false, true) => (fc - down) / h,
                    (false, false) => 0.0,
                }
            })
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(x: &[f64], alpha: f64, p: &[f64]) -> Vec<f64> {
    x.iter().zip(p).map(|(a, b)| a + alpha * b).collect()
}

struct Point {
    alpha: f64,
    f: f64,
    g: Vec<f64>,
    slope: f64,
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;

/// Strong-Wolfe line search along `p` from `x`. Returns `None` when no
/// acceptable step with a finite objective is found.
fn line_search(obj: &Objective, x: &[f64], f0: f64, slope0: f64, p: &[f64]) -> Option<Point> {
    let eval = |alpha: f64| -> Point {
        let xa = axpy(x, alpha, p);
        let f = obj.value(&xa);
        if !f.is_finite() {
            return Point {
                alpha,
                f,
                g: Vec::new(),
                slope: f64::NAN,
            };
        }
        let g = obj.gradient(&xa, f);
        let slope = dot(&g, p);
        Point { alpha, f, g, slope }
    };
    let mut prev = Point {
        alpha: 0.0,
        f: f0,
        g: Vec::new(),
        slope: slope0,
    };
    let mut alpha = 1.0;
    for i in 0..30 {
        let cur = eval(alpha);
        if !cur.f.is_finite() {
            // undefined region: shrink toward the last good point
            return zoom(f0, slope0, prev, cur, &eval);
        }
        if cur.f > f0 + C1 * alpha * slope0 || (i > 0 && cur.f >= prev.f) {
            return zoom(f0, slope0, prev, cur, &eval);
        }
        if cur.slope.abs() <= -C2 * slope0 {
            return Some(cur);
        }
        if cur.slope >= 0.0 {
            return zoom(f0, slope0, cur, prev, &eval);
        }
        prev = cur;
        alpha *= 2.0;
    }
    (prev.alpha > 0.0).then_some(prev)
}

fn zoom(
    f0: f64,
    slope0: f64,
    mut lo: Point,
    mut hi: Point,
    eval: &dyn Fn(f64) -> Point,
) -> Option<Point> {
    for _ in 0..40 {
        let alpha = if hi.f.is_finite() && lo.slope.is_finite() {
            // minimizer of the quadratic through (lo.f, lo.slope) and hi.f
            let d = hi.alpha - lo.alpha;
            let denom = 2.0 * (hi.f - lo.f - lo.slope * d);
            let t = if denom > 0.0 {
                lo.alpha - lo.slope * d * d / denom
            } else {
                f64::NAN
            };
            let (a, b) = if lo.alpha < hi.alpha {
                (lo.alpha, hi.alpha)
            } else {
                (hi.alpha, lo.alpha)
            };
            let margin = 0.1 * (b - a);
            if t.is_finite() && t > a + margin && t < b - margin {
                t
            } else {
                0.5 * (lo.alpha + hi.alpha)
            }
        } else {
            0.5 * (lo.alpha + hi.alpha)
        };
        if (hi.alpha - lo.alpha).abs() < 1e-16 * (1.0 + lo.alpha.abs()) {
            break;
        }
        let cur = eval(alpha);
        if !cur.f.is_finite() || cur.f > f0 + C1 * alpha * slope0 || cur.f >= lo.f {
            hi = cur;
            continue;
        }
        if cur.slope.abs() <= -C2 * slope0 {
            return Some(cur);
        }
        if cur.slope * (hi.alpha - lo.alpha) >= 0.0 {
            hi = lo;
        }
        lo = cur;
    }
    // settle for sufficient decrease when curvature cannot be met
    (lo.alpha > 0.0 && lo.f < f0).then_some(lo)
}

struct Run {
    x: Vec<f64>,
    f: f64,
    iterations: usize,
    converged: bool,
}

/// One BFGS run from `x0`.
fn bfgs(obj: &Objective, x0: Vec<f64>, max_iter: usize, grad_tol: f64) -> Option<Run> {
    let n = x0.len();
    let mut x = x0;
    let mut f = obj.value(&x);
    if !f.is_finite() {
        return None;
    }
    let mut g = obj.gradient(&x, f);
    let mut h = vec![0.0; n * n];
    let reset = |h: &mut Vec<f64>| {
        h.fill(0.0);
        for i in 0..n {
            h[i * n + i] = 1.0;
        }
    };
    reset(&mut h);
    let mut fresh = true;
    for it in 0..max_iter {
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gmax <= grad_tol || f == 0.0 {
            return Some(Run {
                x,
                f,
                iterations: it,
                converged: true,
            });
        }
        let mut p: Vec<f64> = (0..n).map(|i| -dot(&h[i * n..(i + 1) * n], &g)).collect();
        let mut slope = dot(&g, &p);
        if slope >= 0.0 || !slope.is_finite() {
            reset(&mut h);
            fresh = true;
            p = g.iter().map(|v| -v).collect();
            slope = dot(&g, &p);
        }
        let Some(step) = line_search(obj, &x, f, slope, &p) else {
            if fresh {
                return Some(Run {
                    x,
                    f,
                    iterations: it,
                    converged: true,
                });
            }
            reset(&mut h);
            fresh = true;
            continue;
        };
        let x_new = axpy(&x, step.alpha, &p);
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yk: Vec<f64> = step.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yk);
        let f_old = f;
        x = x_new;
        f = step.f;
        g = step.g;
        if sy > 1e-14 * dot(&s, &s).sqrt() * dot(&yk, &yk).sqrt() && sy > 0.0 {
            if fresh {
                let scale = sy / dot(&yk, &yk);
                h.iter_mut().for_each(|v| *v *= scale);
                fresh = false;
            }
            // H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ
            let rho = 1.0 / sy;
            let hy: Vec<f64> = (0..n).map(|i| dot(&h[i * n..(i + 1) * n], &yk)).collect();
            let yhy = dot(&yk, &hy);
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] += -rho * (s[i] * hy[j] + hy[i] * s[j])
                        + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
        }
        if (f_old - f).abs() <= 1e-15 * f_old.abs().max(1e-300) {
            return Some(Run {
                x,
                f,
                iterations: it + 1,
                converged: true,
            });
        }
    }
    Some(Run {
        x,
        f,
        iterations: max_iter,
        converged: false,
    })
}

/// Starting points drawn for one restart before it is given up.
pub const START_DRAWS: usize = 100;

/// First uniform draw in `[c_min, c_max]^m` where the objective is finite.
fn feasible_start(
    obj: &Objective,
    m: usize,
    opts: &FitOptions,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<f64>> {
    (0..START_DRAWS).find_map(|_| {
        let x0: Vec<f64> = (0..m)
            .map(|_| rng.gen_range(opts.c_min..=opts.c_max))
            .collect();
        obj.value(&x0).is_finite().then_some(x0)
    })
}

/// Fits the placeholders of `skeleton` to `(x, y)` (`x` row-major `n × d`).
pub fn fit_constants(
    skeleton: &Expr,
    x: &[f64],
    d: usize,
    y: &[f64],
    opts: &FitOptions,
) -> FitResult {
    let obj = Objective::new(skeleton, x, d, y);
    let m = obj.dim();
    if m == 0 {
        let f = obj.value(&[]);
        let status = if f.is_finite() {
            FitStatus::Converged
        } else {
            FitStatus::Failed
        };
        return FitResult {
            expr: skeleton.clone(),
            constants: Vec::new(),
            objective: f,
            status,
            restarts: 0,
            iterations: 0,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<(Run, usize)> = None;
    let mut used = 0;
    for r in 0..opts.restarts.max(1) {
        used = r + 1;
        let Some(x0) = feasible_start(&obj, m, opts, &mut rng) else {
            continue;
        };
        let Some(run) = bfgs(&obj, x0, opts.max_iter, opts.grad_tol) else {
            continue;
        };
        if !run.f.is_finite() || run.x.iter().any(|v| !v.is_finite()) {
            continue;
        }
        let better = match &best {
            None => true,
            Some((b, _)) => run.f < b.f || (run.f == b.f && run.iterations < b.iterations),
        };
        let exact = run.f == 0.0;
        if better {
            best = Some((run, r));
        }
        if exact {
            break;
        }
    }
    match best {
        Some((run, _)) => FitResult {
            expr: skeleton
                .fill_placeholders(&run.x)
                .expect("one value per placeholder"),
            constants: run.x,
            objective: run.f,
            status: if run.converged {
                FitStatus::Converged
            } else {
                FitStatus::MaxIter
            },
            restarts: used,
            iterations: run.iterations,
        },
        None => FitResult {
            expr: skeleton.clone(),
            constants: Vec::new(),
            objective: f64::INFINITY,
            status: FitStatus::Failed,
            restarts: used,
            iterations: 0,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;

    #[test]
    fn mse_n_trivial() {
        assert_eq!(mse_n(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(mse_n(&[1.0], &[f64::NAN]).unwrap(), f64::INFINITY);
        assert!(mse_n(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mse_n(&[], &[]).is_err());
        let a = mse_n(&[1.0, -2.0, 0.5], &[0.5, -1.0, 1.0]).unwrap();
        let b = mse_n(&[10.0, -20.0, 5.0], &[5.0, -10.0, 10.0]).unwrap();
        assert!((b / a - 10.0).abs() < 1e-6);
    }

    #[test]
    fn no_placeholders() {
        let e = parse("x1").unwrap();
        let r = fit_constants(&e, &[1.0, 2.0], 1, &[1.0, 2.0], &FitOptions::default());
        assert_eq!(r.expr, e);
        assert_eq!(r.status, FitStatus::Converged);
        assert_eq!(r.restarts, 0);
        assert_eq!(r.objective, 0.0);
    }

    #[test]
    fn undefined_everywhere_fails() {
        let e = parse("log(C-x1*x1-5)").unwrap();
        let opts = FitOptions {
            restarts: 3,
            ..FitOptions::default()
        };
        let r = fit_constants(&e, &[1.0, 2.0, 3.0], 1, &[0.0, 0.0, 0.0], &opts);
        assert_eq!(r.status, FitStatus::Failed);
        assert_eq!(r.objective, f64::INFINITY);
        assert_eq!(r.restarts, 3);
    }

    #[test]
    fn quadratic_exact() {
        let e = parse("C*x1*x1+C").unwrap();
        let x: Vec<f64> = (0..20).map(|i| -2.0 + 0.2 * i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 1.5 * v * v - 0.7).collect();
        let r = fit_constants(&e, &x, 1, &y, &FitOptions::default());
        assert!(r.objective < 1e-20, "{r:?}");
        assert!((r.constants[0] - 1.5).abs() < 1e-8 && (r.constants[1] + 0.7).abs() < 1e-8);
    }
}
