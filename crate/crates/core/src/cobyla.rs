//! Derivative-free constrained minimization by linear approximation.
//!
//! Objective and constraints are modelled by linear interpolation over a
//! simplex of `n + 1` evaluated points. Each iteration either improves the
//! simplex geometry or takes a trust-region step that minimizes the linear
//! objective subject to the linearized constraints. Progress is judged with
//! the merit function `f + μ·max_violation`; the radius `ρ` halves whenever
//! the current simplex is well shaped but no longer predicts useful steps.
//!
//! The trust region is the box `‖d‖∞ ≤ ρ`, which turns every step into a
//! linear program solved exactly by [`lp_minimize`]. Distances and simplex
//! quality are measured in the same norm.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Largest constraint violation still treated as feasible.
pub const FEASIBILITY_TOL: f64 = 1e-6;

const ALPHA: f64 = 0.25;
const BETA: f64 = 2.1;
const GAMMA: f64 = 0.5;
const ACCEPT_RATIO: f64 = 0.1;

pub type Constraint<'a> = Box<dyn Fn(&[f64]) -> f64 + 'a>;

#[derive(Clone, Debug, PartialEq)]
pub struct CobylaOptions {
    pub rho_beg: f64,
    pub rho_end: f64,
    pub max_evals: usize,
}

impl Default for CobylaOptions {
    fn default() -> Self {
        CobylaOptions { rho_beg: 0.5, rho_end: 1e-6, max_evals: 2000 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CobylaResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub max_violation: f64,
    pub evals: usize,
    /// Radius when the search stopped.
    pub rho: f64,
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum CobylaError {
    #[error("no feasible point within {evals} evaluations; least violation {max_violation:e}")]
    Infeasible { x: Vec<f64>, f: f64, max_violation: f64, evals: usize },
    #[error(transparent)]
    Invalid(#[from] Error),
}

fn violation(c: &[f64]) -> f64 {
    c.iter().fold(0.0, |acc, &v| acc.max(-v))
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, &x| acc.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Point {
    x: Vec<f64>,
    f: f64,
    c: Vec<f64>,
    viol: f64,
}

struct Evaluator<'a, F: FnMut(&[f64]) -> f64> {
    objective: F,
    constraints: &'a [Constraint<'a>],
    evals: usize,
    best_feasible: Option<(Vec<f64>, f64, f64)>,
    least_violating: Option<(Vec<f64>, f64, f64)>,
}

impl<F: FnMut(&[f64]) -> f64> Evaluator<'_, F> {
    fn eval(&mut self, x: Vec<f64>) -> Result<Point> {
        let f = (self.objective)(&x);
        let c: Vec<f64> = self.constraints.iter().map(|g| g(&x)).collect();
        self.evals += 1;
        if !f.is_finite() || c.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("objective or constraint non-finite at {:?}", x)));
        }
        let viol = violation(&c);
        if viol <= FEASIBILITY_TOL && self.best_feasible.as_ref().is_none_or(|b| f < b.1) {
            self.best_feasible = Some((x.clone(), f, viol));
        }
        if self.least_violating.as_ref().is_none_or(|b| viol < b.2 || (viol == b.2 && f < b.1)) {
            self.least_violating = Some((x.clone(), f, viol));
        }
        Ok(Point { x, f, c, viol })
    }
}

/// Minimizes `objective` subject to `constraints[k](x) ≥ 0`.
///
/// Returns the best feasible point seen (violation ≤ [`FEASIBILITY_TOL`]).
pub fn cobyla_minimize<F: FnMut(&[f64]) -> f64>(
    objective: F,
    constraints: &[Constraint<'_>],
    x0: &[f64],
    opts: &CobylaOptions,
) -> Result<CobylaResult, CobylaError> {
    let n = x0.len();
    if n == 0 {
        return Err(Error::Dimension("empty starting point".into()).into());
    }
    if !(opts.rho_beg > opts.rho_end && opts.rho_end > 0.0 && opts.rho_beg.is_finite()) {
        return Err(Error::Domain(format!("need rho_beg > rho_end > 0, got {} and {}", opts.rho_beg, opts.rho_end)).into());
    }
    if opts.max_evals < n + 2 {
        return Err(Error::Domain(format!("max_evals must be at least {}", n + 2)).into());
    }
    let mut ev = Evaluator { objective, constraints, evals: 0, best_feasible: None, least_violating: None };
    let rho = search(&mut ev, x0, opts)?;

    match ev.best_feasible {
        Some((x, f, max_violation)) => Ok(CobylaResult { x, f, max_violation, evals: ev.evals, rho }),
        None => {
            let (x, f, max_violation) = ev.least_violating.expect("at least one evaluation");
            Err(CobylaError::Infeasible { x, f, max_violation, evals: ev.evals })
        }
    }
}

fn search<F: FnMut(&[f64]) -> f64>(ev: &mut Evaluator<'_, F>, x0: &[f64], opts: &CobylaOptions) -> Result<f64> {
    let n = x0.len();
    let mut rho = opts.rho_beg;
    let mut mu = 0.0f64;

    let mut sim: Vec<Point> = Vec::with_capacity(n + 1);
    sim.push(ev.eval(x0.to_vec())?);
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += rho;
        sim.push(ev.eval(x)?);
        if ev.evals >= opts.max_evals {
            return Ok(rho);
        }
    }

    let merit = |p: &Point, mu: f64| p.f + mu * p.viol;
    let mut stalled = false;

    while ev.evals < opts.max_evals {
        let pole = choose_pole(&sim, mu);
        let others: Vec<usize> = (0..=n).filter(|&k| k != pole).collect();
        let disp: Vec<Vec<f64>> = others.iter().map(|&k| sim[k].x.iter().zip(&sim[pole].x).map(|(a, b)| a - b).collect()).collect();
        let inv = invert(&disp);

        // Vertex whose replacement most improves the simplex shape, if any is poor.
        let bad_vertex = match &inv {
            None => Some(0),
            Some(w) => {
                let far = (0..n)
                    .map(|r| (r, norm_inf(&disp[r])))
                    .filter(|&(_, d)| d > BETA * rho)
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(r, _)| r);
                far.or_else(|| {
                    (0..n)
                        .map(|r| (r, 1.0 / (0..n).map(|i| w[i][r].abs()).sum::<f64>()))
                        .filter(|&(_, s)| s < ALPHA * rho)
                        .min_by(|a, b| a.1.total_cmp(&b.1))
                        .map(|(r, _)| r)
                })
            }
        };

        if let Some(r) = bad_vertex {
            let dir: Vec<f64> = match &inv {
                Some(w) => (0..n).map(|i| if w[i][r] < 0.0 { -GAMMA * rho } else { GAMMA * rho }).collect(),
                None => {
                    let mut d = vec![0.0; n];
                    d[r % n] = GAMMA * rho;
                    d
                }
            };
            let step = match &inv {
                Some(w) => {
                    let (g, a) = linear_models(&sim, pole, &others, w);
                    let p = &sim[pole];
                    let score = |s: f64| {
                        let lin_f = s * dot(&g, &dir);
                        let lin_v = a.iter().zip(&p.c).fold(0.0f64, |acc, (ak, ck)| acc.max(-(ck + s * dot(ak, &dir))));
                        lin_f + mu * lin_v
                    };
                    if score(-1.0) < score(1.0) {
                        dir.iter().map(|v| -v).collect()
                    } else {
                        dir
                    }
                }
                None => dir,
            };
            let x: Vec<f64> = sim[pole].x.iter().zip(&step).map(|(a, b)| a + b).collect();
            sim[others[r]] = ev.eval(x)?;
            continue;
        }
        let w = inv.expect("acceptable simplex is invertible");

        if stalled {
            if rho <= opts.rho_end {
                break;
            }
            rho *= 0.5;
            if rho <= 1.5 * opts.rho_end {
                rho = opts.rho_end;
            }
            stalled = false;
            continue;
        }

        let (g, a) = linear_models(&sim, pole, &others, &w);
        let p = &sim[pole];
        let d = match trust_region_step(&g, &a, &p.c, rho) {
            Some(d) => d,
            None => {
                stalled = true;
                continue;
            }
        };
        if norm_inf(&d) < 0.5 * rho {
            stalled = true;
            continue;
        }

        let predicted_viol = a.iter().zip(&p.c).fold(0.0f64, |acc, (ak, ck)| acc.max(-(ck + dot(ak, &d))));
        let viol_drop = p.viol - predicted_viol;
        let f_change = dot(&g, &d);
        if viol_drop > 0.0 {
            let bar_mu = (f_change / viol_drop).max(0.0);
            if mu < 1.5 * bar_mu {
                mu = 2.0 * bar_mu;
                if choose_pole(&sim, mu) != pole {
                    continue;
                }
            }
        }
        let predicted = mu * viol_drop - f_change;
        if predicted <= 0.0 {
            stalled = true;
            continue;
        }

        let x: Vec<f64> = p.x.iter().zip(&d).map(|(a, b)| a + b).collect();
        let old_merit = merit(p, mu);
        let trial = ev.eval(x)?;
        let reduction = old_merit - merit(&trial, mu);

        let threshold = if reduction > 0.0 { 0.0 } else { 1.0 };
        let mut drop: Option<(usize, f64)> = None;
        for r in 0..n {
            let lambda = (0..n).map(|i| w[i][r] * d[i]).sum::<f64>().abs();
            let dist = norm_inf(&sim[others[r]].x.iter().zip(&trial.x).map(|(a, b)| a - b).collect::<Vec<_>>());
            let spread = (dist / rho).max(1.0);
            let score = lambda * spread * spread;
            if lambda > 0.0 && score > threshold && drop.is_none_or(|(_, s)| score > s) {
                drop = Some((r, score));
            }
        }
        if let Some((r, _)) = drop {
            sim[others[r]] = trial;
        }
        if !(reduction > 0.0 && reduction >= ACCEPT_RATIO * predicted) {
            stalled = true;
        }
    }
    Ok(rho)
}

fn choose_pole(sim: &[Point], mu: f64) -> usize {
    let mut best = 0;
    for k in 1..sim.len() {
        let (a, b) = (&sim[k], &sim[best]);
        let (ma, mb) = (a.f + mu * a.viol, b.f + mu * b.viol);
        if ma < mb || (ma == mb && a.viol < b.viol) {
            best = k;
        }
    }
    best
}

/// Gradients of the objective and of each constraint interpolated over the
/// simplex, given the inverse of its displacement matrix.
fn linear_models(sim: &[Point], pole: usize, others: &[usize], w: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = others.len();
    let p = &sim[pole];
    let apply = |diffs: &[f64]| -> Vec<f64> { (0..n).map(|i| dot(&w[i], diffs)).collect() };
    let df: Vec<f64> = others.iter().map(|&k| sim[k].f - p.f).collect();
    let g = apply(&df);
    let a = (0..p.c.len())
        .map(|j| {
            let dc: Vec<f64> = others.iter().map(|&k| sim[k].c[j] - p.c[j]).collect();
            apply(&dc)
        })
        .collect();
    (g, a)
}

/// Inverse of a square matrix by Gauss-Jordan elimination with partial
/// pivoting; `None` when (numerically) singular.
fn invert(m: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = m.len();
    let scale = m.iter().map(|r| norm_inf(r)).fold(0.0, f64::max);
    if scale == 0.0 {
        return None;
    }
    let mut a: Vec<Vec<f64>> = m.to_vec();
    let mut inv: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() <= 1e-13 * scale {
            return None;
        }
        a.swap(col, piv);
        inv.swap(col, piv);
        let d = a[col][col];
        for j in 0..n {
            a[col][j] /= d;
            inv[col][j] /= d;
        }
        for i in 0..n {
            if i != col {
                let factor = a[i][col];
                if factor != 0.0 {
                    for j in 0..n {
                        a[i][j] -= factor * a[col][j];
                        inv[i][j] -= factor * inv[col][j];
                    }
                }
            }
        }
    }
    Some(inv)
}

/// Step `d` with `‖d‖∞ ≤ rho` that first minimizes the largest violation of
/// the linearized constraints `c + a·d ≥ 0`, then minimizes `g·d` among
/// steps attaining that violation. A small `‖d‖₁` penalty keeps coordinates
/// that do not help at zero instead of at an arbitrary corner of the box.
fn trust_region_step(g: &[f64], a: &[Vec<f64>], c: &[f64], rho: f64) -> Option<Vec<f64>> {
    let n = g.len();
    // d = p − q with p, q ∈ [0, rho].
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    for i in 0..2 * n {
        let mut r = vec![0.0; 2 * n + 1];
        r[i] = 1.0;
        rows.push(r);
        rhs.push(rho);
    }
    for (ak, &ck) in a.iter().zip(c) {
        let mut r: Vec<f64> = ak.iter().map(|v| -v).chain(ak.iter().copied()).collect();
        r.push(-1.0);
        rows.push(r);
        rhs.push(ck);
    }

    let t = if a.is_empty() {
        0.0
    } else {
        let mut cost = vec![1e-9; 2 * n + 1];
        cost[2 * n] = 1.0;
        lp_minimize(&cost, &rows, &rhs)?[2 * n].max(0.0)
    };

    let slack = 1e-12 * (1.0 + t + c.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    let rows2: Vec<Vec<f64>> = rows.iter().map(|r| r[..2 * n].to_vec()).collect();
    let rhs2: Vec<f64> = rhs.iter().enumerate().map(|(k, &b)| if k < 2 * n { b } else { b + t + slack }).collect();
    let eps = 1e-6 * norm_inf(g) + 1e-12;
    let cost2: Vec<f64> = g.iter().map(|v| v + eps).chain(g.iter().map(|v| eps - v)).collect();
    let pq = lp_minimize(&cost2, &rows2, &rhs2)?;
    Some((0..n).map(|i| pq[i] - pq[n + i]).collect())
}

/// Minimizes `cost·x` subject to `rows·x ≤ rhs` and `x ≥ 0` with the two-phase
/// tableau simplex method and Bland's anti-cycling rule. `None` when the
/// problem is infeasible or unbounded.
pub fn lp_minimize(cost: &[f64], rows: &[Vec<f64>], rhs: &[f64]) -> Option<Vec<f64>> {
    let n = cost.len();
    let m = rows.len();
    let artificial: Vec<usize> = (0..m).filter(|&i| rhs[i] < 0.0).collect();
    let width = n + m + artificial.len();
    let mut tab = vec![vec![0.0; width + 1]; m];
    let mut basis = vec![0usize; m];
    let mut next_art = n + m;
    for i in 0..m {
        let sign = if rhs[i] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..n {
            tab[i][j] = sign * rows[i][j];
        }
        tab[i][n + i] = sign;
        tab[i][width] = sign * rhs[i];
        if rhs[i] < 0.0 {
            tab[i][next_art] = 1.0;
            basis[i] = next_art;
            next_art += 1;
        } else {
            basis[i] = n + i;
        }
    }

    if !artificial.is_empty() {
        let mut phase1 = vec![0.0; width];
        for c in phase1.iter_mut().skip(n + m) {
            *c = 1.0;
        }
        run_simplex(&mut tab, &mut basis, &phase1, width)?;
        let infeas: f64 = (0..m).filter(|&i| basis[i] >= n + m).map(|i| tab[i][width]).sum();
        let scale = 1.0 + rhs.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if infeas > 1e-9 * scale {
            return None;
        }
        for i in 0..m {
            if basis[i] >= n + m {
                if let Some(j) = (0..n + m).find(|&j| tab[i][j].abs() > 1e-12) {
                    pivot(&mut tab, &mut basis, i, j);
                }
            }
        }
    }

    let mut phase2 = vec![0.0; width];
    phase2[..n].copy_from_slice(cost);
    run_simplex(&mut tab, &mut basis, &phase2, n + m)?;

    let mut x = vec![0.0; n];
    for i in 0..m {
        if basis[i] < n {
            x[basis[i]] = tab[i][width];
        }
    }
    Some(x)
}

fn pivot(tab: &mut [Vec<f64>], basis: &mut [usize], r: usize, c: usize) {
    let width = tab[r].len();
    let p = tab[r][c];
    for j in 0..width {
        tab[r][j] /= p;
    }
    for i in 0..tab.len() {
        if i != r {
            let factor = tab[i][c];
            if factor != 0.0 {
                for j in 0..width {
                    tab[i][j] -= factor * tab[r][j];
                }
            }
        }
    }
    basis[r] = c;
}

/// Runs simplex iterations over columns `0..allowed`; `None` if unbounded.
fn run_simplex(tab: &mut [Vec<f64>], basis: &mut [usize], cost: &[f64], allowed: usize) -> Option<()> {
    let m = tab.len();
    let width = cost.len();
    let cscale = 1.0 + cost.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    for _ in 0..50_000 {
        let entering = (0..allowed).find(|&j| {
            if basis.contains(&j) {
                return false;
            }
            let reduced = cost[j] - (0..m).map(|i| cost[basis[i]] * tab[i][j]).sum::<f64>();
            reduced < -1e-11 * cscale
        });
        let Some(c) = entering else { return Some(()) };
        let mut leave: Option<(usize, f64)> = None;
        for i in 0..m {
            if tab[i][c] > 1e-12 {
                let ratio = tab[i][width] / tab[i][c];
                let better = match leave {
                    None => true,
                    Some((l, best)) => ratio < best - 1e-15 || (ratio <= best + 1e-15 && basis[i] < basis[l]),
                };
                if better {
                    leave = Some((i, ratio));
                }
            }
        }
        let (r, _) = leave?;
        pivot(tab, basis, r, c);
    }
    Some(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(rho_beg: f64, rho_end: f64) -> CobylaOptions {
        CobylaOptions { rho_beg, rho_end, max_evals: 2000 }
    }

    #[test]
    fn lp_small_problem() {
        // max x + y s.t. x + 2y ≤ 4, 3x + y ≤ 6  ->  (1.6, 1.2)
        let x = lp_minimize(&[-1.0, -1.0], &[vec![1.0, 2.0], vec![3.0, 1.0]], &[4.0, 6.0]).unwrap();
        assert!((x[0] - 1.6).abs() < 1e-12 && (x[1] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn lp_with_negative_rhs() {
        // min x s.t. x ≥ 2 (as -x ≤ -2), x ≤ 5
        let x = lp_minimize(&[1.0], &[vec![-1.0], vec![1.0]], &[-2.0, 5.0]).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-12);
        assert!(lp_minimize(&[1.0], &[vec![-1.0], vec![1.0]], &[-6.0, 5.0]).is_none());
    }

    #[test]
    fn feasible_unconstrained_optimum() {
        let cons: Vec<Constraint> = vec![Box::new(|x: &[f64]| x[0])];
        let r = cobyla_minimize(|x: &[f64]| (x[0] - 1.0).powi(2), &cons, &[5.0], &opts(0.5, 1e-6)).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-3, "{:?}", r);
        assert!(r.evals <= 2000);
    }

    #[test]
    fn linear_objective_on_disk() {
        let cons: Vec<Constraint> = vec![Box::new(|x: &[f64]| 1.0 - x[0] * x[0] - x[1] * x[1])];
        let r = cobyla_minimize(|x: &[f64]| x[0] + x[1], &cons, &[0.0, 0.0], &opts(0.5, 1e-6)).unwrap();
        let h = -core::f64::consts::FRAC_1_SQRT_2;
        assert!((r.x[0] - h).abs() < 1e-2 && (r.x[1] - h).abs() < 1e-2, "{:?}", r);
        assert!(r.max_violation <= FEASIBILITY_TOL);
    }

    #[test]
    fn infeasible_start_reaches_corner() {
        let cons: Vec<Constraint> = vec![Box::new(|x: &[f64]| x[0] - 2.0)];
        let r = cobyla_minimize(|x: &[f64]| x[0], &cons, &[0.0], &opts(0.5, 1e-6)).unwrap();
        assert!((r.x[0] - 2.0).abs() < 1e-3, "{:?}", r);
    }

    #[test]
    fn reports_infeasibility() {
        let cons: Vec<Constraint> = vec![Box::new(|x: &[f64]| x[0] - 1.0), Box::new(|x: &[f64]| -x[0])];
        match cobyla_minimize(|x: &[f64]| x[0], &cons, &[0.0], &opts(0.5, 1e-4)) {
            Err(CobylaError::Infeasible { x, max_violation, .. }) => {
                assert!((max_violation - 0.5).abs() < 1e-3, "{}", max_violation);
                assert!((x[0] - 0.5).abs() < 1e-2);
            }
            other => panic!("{:?}", other),
        }
    }

    #[test]
    fn rejects_bad_options() {
        let cons: Vec<Constraint> = Vec::new();
        assert!(cobyla_minimize(|x: &[f64]| x[0], &cons, &[0.0], &opts(1e-6, 0.5)).is_err());
        assert!(cobyla_minimize(|x: &[f64]| x[0], &cons, &[], &opts(0.5, 1e-6)).is_err());
        let few = CobylaOptions { max_evals: 2, ..opts(0.5, 1e-6) };
        assert!(cobyla_minimize(|x: &[f64]| x[0], &cons, &[0.0], &few).is_err());
    }

    #[test]
    fn deterministic() {
        let run = || {
            let cons: Vec<Constraint> = vec![Box::new(|x: &[f64]| 1.0 - x[0] * x[0] - x[1] * x[1])];
            cobyla_minimize(|x: &[f64]| x[0] + 2.0 * x[1], &cons, &[0.1, 0.2], &opts(0.5, 1e-5)).unwrap()
        };
        assert_eq!(run(), run());
    }
}
