//! Projected quasi-Newton minimization over a convex set with a cheap
//! Euclidean projection.
//!
//! Each iteration first tries a reduced projected Newton step: coordinates
//! that the projection pins in place under a small gradient step are held
//! fixed, the dense BFGS model is solved on the remaining ones, and an
//! Armijo search runs along the projection arc `P(x + a d)`. If that fails
//! the BFGS model `q(z) = g'(z - x) + (z - x)' B (z - x) / 2` is minimized
//! over the feasible set with spectral projected gradient steps and the
//! search runs along `z - x`. Iterates stay feasible throughout.

use nalgebra::{DMatrix, DVector};

pub(crate) trait SmoothProblem {
    fn dim(&self) -> usize;
    /// Objective value, writing the gradient into `grad`. Returns a
    /// non-finite value outside the function's domain.
    fn eval(&self, x: &DVector<f64>, grad: &mut DVector<f64>) -> f64;
    fn project(&self, x: &mut DVector<f64>);
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PqnOptions {
    pub max_iter: usize,
    pub tol_obj: f64,
    pub inner_iter: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct PqnOutcome {
    pub x: DVector<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
}

const ARMIJO: f64 = 1e-4;
const MIN_STEP: f64 = 1e-14;

struct Bfgs {
    b: DMatrix<f64>,
    h: DMatrix<f64>,
    fresh: bool,
}

impl Bfgs {
    fn identity(d: usize, scale: f64) -> Self {
        Self {
            b: DMatrix::identity(d, d) * scale,
            h: DMatrix::identity(d, d) / scale,
            fresh: true,
        }
    }

    fn update(&mut self, s: &DVector<f64>, y: &DVector<f64>) {
        let sy = s.dot(y);
        if !(sy > 1e-12 * s.norm() * y.norm()) {
            return;
        }
        if self.fresh {
            let gamma = y.norm_squared() / sy;
            let d = s.len();
            self.b = DMatrix::identity(d, d) * gamma;
            self.h = DMatrix::identity(d, d) / gamma;
            self.fresh = false;
        }
        let bs = &self.b * s;
        let sbs = s.dot(&bs);
        if sbs > 0.0 {
            self.b.ger(-1.0 / sbs, &bs, &bs, 1.0);
        }
        self.b.ger(1.0 / sy, y, y, 1.0);

        let rho = 1.0 / sy;
        let hy = &self.h * y;
        let yhy = y.dot(&hy);
        self.h.ger(-rho, s, &hy, 1.0);
        self.h.ger(-rho, &hy, s, 1.0);
        self.h.ger(rho * rho * yhy + rho, s, s, 1.0);
    }
}

/// Approximately minimizes the quadratic model over the feasible set.
fn solve_subproblem<P: SmoothProblem>(
    problem: &P,
    x: &DVector<f64>,
    g: &DVector<f64>,
    bfgs: &Bfgs,
    inner_iter: usize,
) -> DVector<f64> {
    let model = |z: &DVector<f64>| {
        let dz = z - x;
        g.dot(&dz) + 0.5 * dz.dot(&(&bfgs.b * &dz))
    };
    let mut z = x - &bfgs.h * g;
    problem.project(&mut z);
    if !(model(&z) < 0.0) {
        z = x.clone();
    }
    let mut grad_q = g + &bfgs.b * (&z - x);
    let diag_max = bfgs.b.diagonal().amax().max(1e-300);
    let mut alpha = 1.0 / diag_max;
    for _ in 0..inner_iter {
        let mut trial = &z - &grad_q * alpha;
        problem.project(&mut trial);
        let dz = trial - &z;
        if dz.amax() <= 1e-13 * z.amax().max(1.0) {
            break;
        }
        let bdz = &bfgs.b * &dz;
        let curv = dz.dot(&bdz);
        let slope = grad_q.dot(&dz);
        if slope >= 0.0 {
            break;
        }
        let t = if curv > 0.0 { (-slope / curv).min(1.0) } else { 1.0 };
        z.axpy(t, &dz, 1.0);
        grad_q.axpy(t, &bdz, 1.0);
        if curv > 0.0 {
            alpha = (dz.norm_squared() / curv).clamp(1e-12, 1e12);
        }
    }
    z
}

/// Coordinates that a short projected gradient step leaves unchanged while
/// their gradient is nonzero.
fn pinned<P: SmoothProblem>(problem: &P, x: &DVector<f64>, g: &DVector<f64>) -> Vec<bool> {
    let gmax = g.amax();
    if gmax == 0.0 {
        return vec![false; x.len()];
    }
    let t = 1e-8 * x.amax().max(1.0) / gmax;
    let mut probe = x - g * t;
    problem.project(&mut probe);
    (0..x.len())
        .map(|i| g[i] != 0.0 && (probe[i] - x[i]).abs() <= 1e-3 * t * g[i].abs())
        .collect()
}

/// Armijo search along `P(x + a d)`; returns the accepted point.
fn arc_search<P: SmoothProblem>(
    problem: &P,
    x: &DVector<f64>,
    f: f64,
    g: &DVector<f64>,
    dir: &DVector<f64>,
    g_new: &mut DVector<f64>,
) -> Option<(DVector<f64>, f64)> {
    let mut step = 1.0;
    for _ in 0..40 {
        let mut trial = x + dir * step;
        problem.project(&mut trial);
        let decrease = g.dot(&(&trial - x));
        if !(decrease < 0.0) {
            return None;
        }
        let ft = problem.eval(&trial, g_new);
        if ft.is_finite() && ft <= f + ARMIJO * decrease {
            return Some((trial, ft));
        }
        step *= 0.5;
    }
    None
}

/// `-B_FF^{-1} g_F` on the free coordinates, zero elsewhere.
fn reduced_newton(b: &DMatrix<f64>, g: &DVector<f64>, fixed: &[bool]) -> Option<DVector<f64>> {
    let free: Vec<usize> = (0..g.len()).filter(|&i| !fixed[i]).collect();
    if free.is_empty() {
        return None;
    }
    let bff = DMatrix::from_fn(free.len(), free.len(), |a, c| b[(free[a], free[c])]);
    let gf = DVector::from_fn(free.len(), |a, _| g[free[a]]);
    let step = bff.cholesky()?.solve(&gf);
    let mut dir = DVector::zeros(g.len());
    for (a, &i) in free.iter().enumerate() {
        dir[i] = -step[a];
    }
    Some(dir)
}

/// Runs the projected quasi-Newton iteration from `x0` (projected first).
/// Accepted objective values are appended to `trace`.
pub(crate) fn minimize<P: SmoothProblem>(
    problem: &P,
    x0: DVector<f64>,
    opts: PqnOptions,
    trace: &mut Vec<f64>,
) -> Result<PqnOutcome, String> {
    let d = problem.dim();
    let mut x = x0;
    problem.project(&mut x);
    let mut g = DVector::zeros(d);
    let mut f = problem.eval(&x, &mut g);
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(format!("objective is not finite at the starting point ({f})"));
    }
    trace.push(f);
    let mut bfgs = Bfgs::identity(d, g.amax().max(1.0));
    let mut g_new = DVector::zeros(d);

    for iter in 1..=opts.max_iter {
        let fixed = pinned(problem, &x, &g);
        let newton = if bfgs.fresh {
            None
        } else {
            reduced_newton(&bfgs.b, &g, &fixed).and_then(|dir| arc_search(problem, &x, f, &g, &dir, &mut g_new))
        };
        if let Some((x_new, f_new)) = newton {
            if g_new.iter().any(|v| !v.is_finite()) {
                return Err(format!("gradient is not finite at iteration {iter}"));
            }
            let done = accept(&mut x, &mut f, &mut g, &mut g_new, x_new, f_new, &mut bfgs, trace);
            if done < opts.tol_obj {
                return Ok(PqnOutcome { x, f, iterations: iter, converged: true });
            }
            continue;
        }
        let mut z = solve_subproblem(problem, &x, &g, &bfgs, opts.inner_iter);
        let mut dir = &z - &x;
        let mut gd = g.dot(&dir);
        if !(gd < 0.0) && !bfgs.fresh {
            bfgs = Bfgs::identity(d, g.amax().max(1.0));
            z = solve_subproblem(problem, &x, &g, &bfgs, opts.inner_iter);
            dir = &z - &x;
            gd = g.dot(&dir);
        }
        if !(gd < 0.0) {
            // no feasible descent direction: first-order stationary
            return Ok(PqnOutcome { x, f, iterations: iter, converged: true });
        }

        let mut step = 1.0;
        let mut accepted = None;
        while step >= MIN_STEP {
            let trial = &x + &dir * step;
            let ft = problem.eval(&trial, &mut g_new);
            if ft.is_finite() && ft <= f + ARMIJO * step * gd {
                accepted = Some((trial, ft));
                break;
            }
            let next = if ft.is_finite() {
                let denom = 2.0 * (ft - f - gd * step);
                if denom > 0.0 { -gd * step * step / denom } else { 0.5 * step }
            } else {
                0.25 * step
            };
            step = next.clamp(0.1 * step, 0.5 * step);
        }
        let Some((x_new, f_new)) = accepted else {
            if !bfgs.fresh {
                bfgs = Bfgs::identity(d, g.amax().max(1.0));
                continue;
            }
            // no decrease possible at working precision
            return Ok(PqnOutcome { x, f, iterations: iter, converged: true });
        };
        if g_new.iter().any(|v| !v.is_finite()) {
            return Err(format!("gradient is not finite at iteration {iter}"));
        }
        let rel = accept(&mut x, &mut f, &mut g, &mut g_new, x_new, f_new, &mut bfgs, trace);
        if rel < opts.tol_obj {
            return Ok(PqnOutcome { x, f, iterations: iter, converged: true });
        }
    }
    Ok(PqnOutcome { x, f, iterations: opts.max_iter, converged: false })
}

/// Moves to the accepted point, updates BFGS, and returns the relative
/// decrease.
#[allow(clippy::too_many_arguments)]
fn accept(
    x: &mut DVector<f64>,
    f: &mut f64,
    g: &mut DVector<f64>,
    g_new: &mut DVector<f64>,
    x_new: DVector<f64>,
    f_new: f64,
    bfgs: &mut Bfgs,
    trace: &mut Vec<f64>,
) -> f64 {
    let s = &x_new - &*x;
    let y = &*g_new - &*g;
    bfgs.update(&s, &y);
    let rel = (*f - f_new) / f.abs().max(1.0);
    *x = x_new;
    *f = f_new;
    std::mem::swap(g, g_new);
    trace.push(f_new);
    rel
}
