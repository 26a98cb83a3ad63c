//! Damped Gauss-Newton / Levenberg-Marquardt over stacked residual blocks,
//! with matrix-free conjugate-gradient inner solves on the normal equations.
//!
//! The Jacobian is never materialized as a dense matrix: residual blocks
//! store their derivative only with respect to the few parameters they
//! depend on, and the solver consumes the two actions `v -> J v` and
//! `u -> J^T u` plus the exact diagonal of `J^T J`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Matrix-free view of a Jacobian at a linearization point.
pub trait JacobianOracle {
    fn num_rows(&self) -> usize;
    fn num_cols(&self) -> usize;
    /// `out = J v`, `v` of length `num_cols`, `out` of length `num_rows`.
    fn apply_j(&self, v: &[f64], out: &mut [f64]);
    /// `out = J^T u`, `u` of length `num_rows`, `out` of length `num_cols`.
    fn apply_jt(&self, u: &[f64], out: &mut [f64]);
    /// Exact diagonal of `J^T J`, accumulated per block.
    fn jtj_diag(&self) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy)]
struct BlockInfo {
    row0: u32,
    nrows: u16,
    ncols: u16,
    col_off: u32,
    data_off: u32,
}

/// Block-sparse Jacobian: each residual block holds a small dense derivative
/// over the parameter indices it touches.
#[derive(Debug, Clone)]
pub struct BlockJacobian {
    num_rows: usize,
    num_cols: usize,
    blocks: Vec<BlockInfo>,
    cols: Vec<u32>,
    data: Vec<f64>,
}

impl BlockJacobian {
    pub fn new(num_rows: usize, num_cols: usize) -> Self {
        BlockJacobian {
            num_rows,
            num_cols,
            blocks: Vec::new(),
            cols: Vec::new(),
            data: Vec::new(),
        }
    }

    /// Appends one residual block. `data` is row-major `nrows x cols.len()`.
    pub fn push_block(&mut self, row0: usize, nrows: usize, cols: &[usize], data: &[f64]) {
        debug_assert_eq!(data.len(), nrows * cols.len());
        debug_assert!(row0 + nrows <= self.num_rows);
        self.blocks.push(BlockInfo {
            row0: row0 as u32,
            nrows: nrows as u16,
            ncols: cols.len() as u16,
            col_off: self.cols.len() as u32,
            data_off: self.data.len() as u32,
        });
        self.cols.extend(cols.iter().map(|&c| {
            debug_assert!(c < self.num_cols);
            c as u32
        }));
        self.data.extend_from_slice(data);
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// First row of the first block containing a non-finite derivative.
    pub fn first_non_finite(&self) -> Option<usize> {
        for b in &self.blocks {
            let start = b.data_off as usize;
            let len = b.nrows as usize * b.ncols as usize;
            if self.data[start..start + len].iter().any(|v| !v.is_finite()) {
                return Some(b.row0 as usize);
            }
        }
        None
    }
}

impl JacobianOracle for BlockJacobian {
    fn num_rows(&self) -> usize {
        self.num_rows
    }

    fn num_cols(&self) -> usize {
        self.num_cols
    }

    fn apply_j(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.num_cols);
        debug_assert_eq!(out.len(), self.num_rows);
        out.fill(0.0);
        for b in &self.blocks {
            let cols = &self.cols[b.col_off as usize..b.col_off as usize + b.ncols as usize];
            let mut off = b.data_off as usize;
            for r in 0..b.nrows as usize {
                let mut acc = 0.0;
                for &c in cols {
                    acc += self.data[off] * v[c as usize];
                    off += 1;
                }
                out[b.row0 as usize + r] += acc;
            }
        }
    }

    fn apply_jt(&self, u: &[f64], out: &mut [f64]) {
        debug_assert_eq!(u.len(), self.num_rows);
        debug_assert_eq!(out.len(), self.num_cols);
        out.fill(0.0);
        for b in &self.blocks {
            let cols = &self.cols[b.col_off as usize..b.col_off as usize + b.ncols as usize];
            let mut off = b.data_off as usize;
            for r in 0..b.nrows as usize {
                let ur = u[b.row0 as usize + r];
                for &c in cols {
                    out[c as usize] += self.data[off] * ur;
                    off += 1;
                }
            }
        }
    }

    fn jtj_diag(&self) -> Vec<f64> {
        let mut diag = vec![0.0; self.num_cols];
        for b in &self.blocks {
            let cols = &self.cols[b.col_off as usize..b.col_off as usize + b.ncols as usize];
            let mut off = b.data_off as usize;
            for _ in 0..b.nrows as usize {
                for &c in cols {
                    diag[c as usize] += self.data[off] * self.data[off];
                    off += 1;
                }
            }
        }
        diag
    }
}

/// Levenberg-Marquardt and inner-CG settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    /// Initial damping.
    pub lambda0: f64,
    /// Damping multiplier after a rejected or energy-increasing step.
    pub lambda_up: f64,
    /// Damping multiplier after an energy-decreasing step.
    pub lambda_down: f64,
    pub max_outer_iters: usize,
    /// Inner CG iteration cap; 0 selects `10 * dim(x)`.
    pub cg_max_iters: usize,
    /// Relative normal-equation residual tolerance for the inner CG.
    pub cg_tol: f64,
    /// Relative energy-difference threshold for convergence.
    pub converge_eps: f64,
    /// Consecutive below-threshold iterations required to stop.
    pub converge_window: usize,
    /// Accept energy-increasing steps (up to the budget below).
    pub allow_nonmonotonic: bool,
    /// Maximum consecutive energy-increasing accepted steps.
    pub nonmonotonic_budget: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            lambda0: 1e-4,
            lambda_up: 10.0,
            lambda_down: 0.5,
            max_outer_iters: 60,
            cg_max_iters: 0,
            cg_tol: 1e-6,
            converge_eps: 1e-6,
            converge_window: 3,
            allow_nonmonotonic: true,
            nonmonotonic_budget: 3,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if self.lambda0.is_nan() || self.lambda0 <= 0.0 {
            return Err(Error::Config("lambda0 must be > 0".into()));
        }
        if !(self.lambda_up > 1.0 && self.lambda_down > 0.0 && self.lambda_down < 1.0) {
            return Err(Error::Config("need lambda_up > 1 > lambda_down > 0".into()));
        }
        if self.cg_tol.is_nan()
            || self.cg_tol <= 0.0
            || self.converge_eps.is_nan()
            || self.converge_eps <= 0.0
        {
            return Err(Error::Config("tolerances must be > 0".into()));
        }
        Ok(())
    }

    fn resolved_cg_max_iters(&self, dim: usize) -> usize {
        if self.cg_max_iters == 0 {
            10 * dim.max(1)
        } else {
            self.cg_max_iters
        }
    }
}

/// Step vector plus the quality actually achieved by the inner CG.
#[derive(Debug, Clone)]
pub struct CgResult {
    pub step: Vec<f64>,
    pub iterations: usize,
    /// Relative normal-equation residual of the returned iterate.
    pub achieved_tol: f64,
}

/// Approximately solves `(J^T J + lambda diag(J^T J)) dx = -J^T f` by
/// conjugate gradient using only the matrix-free actions. Diagonal entries
/// below `1e-12` are clamped before damping. Returns the best iterate seen.
pub fn cgne_solve(
    oracle: &dyn JacobianOracle,
    f: &[f64],
    lambda: f64,
    opts: &SolverOptions,
) -> CgResult {
    let n = oracle.num_cols();
    let m = oracle.num_rows();
    let max_iters = opts.resolved_cg_max_iters(n);

    let mut diag = oracle.jtj_diag();
    for d in &mut diag {
        *d = d.max(1e-12);
    }

    // b = -J^T f
    let mut b = vec![0.0; n];
    oracle.apply_jt(f, &mut b);
    for v in &mut b {
        *v = -*v;
    }
    let b_norm = norm(&b);
    if b_norm == 0.0 {
        return CgResult {
            step: vec![0.0; n],
            iterations: 0,
            achieved_tol: 0.0,
        };
    }

    let mut x = vec![0.0; n];
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rs = dot(&r, &r);
    let mut jv = vec![0.0; m];
    let mut ap = vec![0.0; n];
    let mut best_x = x.clone();
    let mut best_rel = 1.0;
    let mut iterations = 0;

    for _ in 0..max_iters {
        // ap = (J^T J + lambda D) p
        oracle.apply_j(&p, &mut jv);
        oracle.apply_jt(&jv, &mut ap);
        for i in 0..n {
            ap[i] += lambda * diag[i] * p[i];
        }
        let p_ap = dot(&p, &ap);
        if p_ap <= 0.0 || !p_ap.is_finite() {
            break;
        }
        let alpha = rs / p_ap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        iterations += 1;
        let rs_new = dot(&r, &r);
        let rel = rs_new.sqrt() / b_norm;
        if rel < best_rel {
            best_rel = rel;
            best_x.copy_from_slice(&x);
        }
        if rel < opts.cg_tol {
            break;
        }
        let beta = rs_new / rs;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rs = rs_new;
    }

    CgResult {
        step: best_x,
        iterations,
        achieved_tol: best_rel,
    }
}

/// Nonlinear least-squares problem seen by the LM loop.
pub trait LeastSquaresProblem {
    fn dim(&self) -> usize;
    /// Stacked scaled residual vector at `x`.
    fn residuals(&self, x: &[f64]) -> Result<Vec<f64>>;
    /// Residuals plus the block Jacobian at `x`.
    fn linearize(&self, x: &[f64]) -> Result<(Vec<f64>, BlockJacobian)>;
    /// Fires after every accepted step; returns `true` when the call changed
    /// the residual definition (e.g. refreshed ICP correspondences) so the
    /// energy must be re-evaluated.
    fn on_accepted_step(&mut self, _x: &[f64]) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TraceEntry {
    pub iteration: usize,
    pub energy: f64,
    pub lambda: f64,
    pub step_norm: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct LmResult {
    /// Lowest-energy parameter vector observed.
    pub x: Vec<f64>,
    pub energy: f64,
    pub trace: Vec<TraceEntry>,
    pub iterations: usize,
}

/// Levenberg-Marquardt with non-monotonic step acceptance.
///
/// Energy-increasing steps are taken while the consecutive budget lasts
/// (damping still grows); afterwards increasing steps are rejected until a
/// decrease re-arms the budget. The lowest energy observed is returned.
pub fn lm_minimize<P: LeastSquaresProblem + ?Sized>(
    problem: &mut P,
    x0: &[f64],
    opts: &SolverOptions,
) -> Result<LmResult> {
    opts.validate()?;
    let mut x = x0.to_vec();
    let f0 = problem.residuals(&x)?;
    let mut energy = sum_sq(&f0);
    if !energy.is_finite() {
        return Err(Error::NonFiniteInitialEnergy);
    }

    let mut lambda = opts.lambda0;
    let mut trace = vec![TraceEntry {
        iteration: 0,
        energy,
        lambda,
        step_norm: 0.0,
        accepted: true,
    }];
    let mut best_energy = energy;
    let mut best_x = x.clone();
    let mut rising_streak = 0usize;
    let mut plateau = 0usize;
    let mut iterations = 0usize;

    for iteration in 1..=opts.max_outer_iters {
        iterations = iteration;
        let (f, jac) = problem.linearize(&x)?;
        let cg = cgne_solve(&jac, &f, lambda, opts);
        let trial: Vec<f64> = x.iter().zip(&cg.step).map(|(a, b)| a + b).collect();
        let trial_energy = problem.residuals(&trial).map(|f| sum_sq(&f))?;

        let accepted = if trial_energy.is_finite() && trial_energy < energy {
            lambda *= opts.lambda_down;
            rising_streak = 0;
            true
        } else if trial_energy.is_finite()
            && opts.allow_nonmonotonic
            && rising_streak < opts.nonmonotonic_budget
        {
            lambda *= opts.lambda_up;
            rising_streak += 1;
            true
        } else {
            lambda *= opts.lambda_up;
            false
        };

        let new_energy = if accepted {
            x = trial;
            let changed = problem.on_accepted_step(&x);
            let e = if changed {
                sum_sq(&problem.residuals(&x)?)
            } else {
                trial_energy
            };
            if e < best_energy {
                best_energy = e;
                best_x.copy_from_slice(&x);
            }
            e
        } else {
            energy
        };

        trace.push(TraceEntry {
            iteration,
            energy: new_energy,
            lambda,
            step_norm: norm(&cg.step),
            accepted,
        });

        // Relative energy change, floored so fully converged problems
        // (energy near zero) still register a plateau.
        if (energy - new_energy).abs() <= opts.converge_eps * (energy.abs() + 1e-24) {
            plateau += 1;
        } else {
            plateau = 0;
        }
        energy = new_energy;
        if plateau >= opts.converge_window {
            break;
        }
    }

    Ok(LmResult {
        x: best_x,
        energy: best_energy,
        trace,
        iterations,
    })
}

/// Writes a trace as CSV with columns
/// `iteration,energy,lambda,step_norm,accepted`.
pub fn write_trace_csv(path: &std::path::Path, trace: &[TraceEntry]) -> Result<()> {
    use std::io::Write;
    let mut out = String::from("iteration,energy,lambda,step_norm,accepted\n");
    for e in trace {
        out.push_str(&format!(
            "{},{:.17e},{:.17e},{:.17e},{}\n",
            e.iteration, e.energy, e.lambda, e.step_norm, e.accepted as u8
        ));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub(crate) fn sum_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// `f_i = x_i - c_i`: quadratic bowl centered at `c`.
    struct Bowl {
        center: Vec<f64>,
    }

    impl LeastSquaresProblem for Bowl {
        fn dim(&self) -> usize {
            self.center.len()
        }

        fn residuals(&self, x: &[f64]) -> Result<Vec<f64>> {
            Ok(x.iter().zip(&self.center).map(|(a, c)| a - c).collect())
        }

        fn linearize(&self, x: &[f64]) -> Result<(Vec<f64>, BlockJacobian)> {
            let f = self.residuals(x)?;
            let mut jac = BlockJacobian::new(f.len(), x.len());
            for i in 0..x.len() {
                jac.push_block(i, 1, &[i], &[1.0]);
            }
            Ok((f, jac))
        }
    }

    /// Rosenbrock residuals `(10 (y - x^2), 1 - x)`.
    struct Rosenbrock;

    impl LeastSquaresProblem for Rosenbrock {
        fn dim(&self) -> usize {
            2
        }

        fn residuals(&self, x: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]])
        }

        fn linearize(&self, x: &[f64]) -> Result<(Vec<f64>, BlockJacobian)> {
            let f = self.residuals(x)?;
            let mut jac = BlockJacobian::new(2, 2);
            jac.push_block(0, 1, &[0, 1], &[-20.0 * x[0], 10.0]);
            jac.push_block(1, 1, &[0], &[-1.0]);
            Ok((f, jac))
        }
    }

    fn identity_oracle(n: usize) -> BlockJacobian {
        let mut j = BlockJacobian::new(n, n);
        for i in 0..n {
            j.push_block(i, 1, &[i], &[1.0]);
        }
        j
    }

    #[test]
    fn cg_identity_system_returns_negated_rhs() {
        let j = identity_oracle(4);
        let f = vec![1.0, -2.0, 3.0, 0.5];
        let r = cgne_solve(&j, &f, 0.0, &SolverOptions::default());
        for (s, b) in r.step.iter().zip(&f) {
            assert!((s + b).abs() < 1e-12);
        }
    }

    #[test]
    fn cg_zero_rhs_returns_zero() {
        let j = identity_oracle(3);
        let r = cgne_solve(&j, &[0.0; 3], 1.0, &SolverOptions::default());
        assert_eq!(r.step, vec![0.0; 3]);
        assert_eq!(r.iterations, 0);
    }

    #[test]
    fn damping_shrinks_steps_monotonically() {
        let mut rng = StdRng::seed_from_u64(31);
        let mut jac = BlockJacobian::new(20, 6);
        let cols: Vec<usize> = (0..6).collect();
        for row in 0..20 {
            let data: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            jac.push_block(row, 1, &cols, &data);
        }
        let f: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let opts = SolverOptions {
            cg_tol: 1e-12,
            ..SolverOptions::default()
        };
        let mut last = f64::INFINITY;
        for lambda in [1e2, 1e4, 1e6] {
            let r = cgne_solve(&jac, &f, lambda, &opts);
            let n = norm(&r.step);
            assert!(n < last, "lambda={lambda}: {n} !< {last}");
            last = n;
        }
    }

    #[test]
    fn block_jacobian_actions_are_adjoint() {
        let mut rng = StdRng::seed_from_u64(77);
        let mut jac = BlockJacobian::new(12, 7);
        for b in 0..5 {
            let cols = [b % 7, (b + 3) % 7];
            let data: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            jac.push_block(b * 2, 2, &cols, &data);
        }
        let v: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut jv = vec![0.0; 12];
        let mut jtu = vec![0.0; 7];
        jac.apply_j(&v, &mut jv);
        jac.apply_jt(&u, &mut jtu);
        // <J v, u> == <v, J^T u>
        assert!((dot(&jv, &u) - dot(&v, &jtu)).abs() < 1e-12);
        // Diagonal matches explicit columns of J.
        let diag = jac.jtj_diag();
        for c in 0..7 {
            let mut e = vec![0.0; 7];
            e[c] = 1.0;
            let mut col = vec![0.0; 12];
            jac.apply_j(&e, &mut col);
            assert!((diag[c] - dot(&col, &col)).abs() < 1e-12);
        }
    }

    #[test]
    fn bowl_converges_in_three_iterations() {
        let mut bowl = Bowl {
            center: vec![1.0, -2.0, 0.5],
        };
        let res = lm_minimize(&mut bowl, &[4.0, 4.0, 4.0], &SolverOptions::default()).unwrap();
        // The energy is ||x - c||^2, so a 1e-10 parameter error is 1e-20 in
        // energy; it must be reached within three iterations.
        let hit = res
            .trace
            .iter()
            .find(|t| t.energy <= 1e-20)
            .expect("trace reaches 1e-20");
        assert!(hit.iteration <= 3, "converged at {}", hit.iteration);
        for (a, c) in res.x.iter().zip(&bowl.center) {
            assert!((a - c).abs() < 1e-10);
        }
    }

    #[test]
    fn rosenbrock_converges() {
        let res = lm_minimize(&mut Rosenbrock, &[-1.2, 1.0], &SolverOptions::default()).unwrap();
        assert!((res.x[0] - 1.0).abs() < 1e-6, "x = {:?}", res.x);
        assert!((res.x[1] - 1.0).abs() < 1e-6, "x = {:?}", res.x);
    }

    #[test]
    fn returned_energy_is_trace_minimum() {
        for x0 in [[-1.2, 1.0], [3.0, -4.0], [0.0, 0.0]] {
            let res = lm_minimize(&mut Rosenbrock, &x0, &SolverOptions::default()).unwrap();
            let trace_min = res
                .trace
                .iter()
                .map(|t| t.energy)
                .fold(f64::INFINITY, f64::min);
            assert_eq!(res.energy, trace_min);
            let e0 = res.trace[0].energy;
            assert!(res.energy <= e0);
        }
    }

    #[test]
    fn non_finite_initial_energy_errors() {
        let mut bowl = Bowl { center: vec![0.0] };
        let err = lm_minimize(&mut bowl, &[f64::NAN], &SolverOptions::default());
        assert!(matches!(err, Err(Error::NonFiniteInitialEnergy)));
    }

    #[test]
    fn options_validation() {
        let opts = SolverOptions {
            lambda0: 0.0,
            ..SolverOptions::default()
        };
        assert!(opts.validate().is_err());
        let opts = SolverOptions {
            lambda_down: 1.5,
            ..SolverOptions::default()
        };
        assert!(opts.validate().is_err());
        assert!(SolverOptions::default().validate().is_ok());
    }
}
