//! Smooth subproblem solver: augmented Lagrangian over a dense damped-BFGS
//! inner minimizer with Armijo backtracking.
//!
//! The merit for fixed multipliers (nu, mu) and penalty weight beta is
//!
//! ```text
//! M(w) = F(w) + nu' h(w) + beta/2 ||h(w)||^2
//!             + sum_j [ beta/2 max(0, mu_j/beta + c_j(w))^2 - mu_j^2/(2 beta) ]
//! ```
//!
//! i.e. classic multiplier treatment of the equality rows h and a shifted
//! squared hinge on the inequality rows c <= 0. After each inner solve the
//! first-order updates nu += beta h and mu = max(0, mu + beta c) run, and
//! beta grows tenfold whenever the combined infeasibility fails to halve.
//! Everything is deterministic: same inputs, same iterates.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::smoothing::{SmoothedInstance, SmoothingError};

/// A smooth nonlinear program with equality and inequality rows.
pub trait NlpProgram {
    fn dim(&self) -> usize;
    fn num_eq(&self) -> usize;
    fn num_ineq(&self) -> usize;
    fn objective(&self, w: &[f64]) -> Result<f64, NlpError>;
    fn objective_grad(&self, w: &[f64], out: &mut [f64]) -> Result<(), NlpError>;
    fn eq_values(&self, w: &[f64], out: &mut [f64]) -> Result<(), NlpError>;
    /// Row-major num_eq x dim.
    fn eq_jacobian(&self, w: &[f64], out: &mut [f64]) -> Result<(), NlpError>;
    fn ineq_values(&self, w: &[f64], out: &mut [f64]) -> Result<(), NlpError>;
    /// Row-major num_ineq x dim.
    fn ineq_jacobian(&self, w: &[f64], out: &mut [f64]) -> Result<(), NlpError>;
}

#[derive(Debug, Error)]
pub enum NlpError {
    #[error("evaluation failed at the start point: {0}")]
    BadStart(String),
    #[error(transparent)]
    Smoothing(#[from] SmoothingError),
    #[error("evaluation failed: {0}")]
    Eval(String),
}

impl From<crate::expr::EvalError> for NlpError {
    fn from(e: crate::expr::EvalError) -> Self {
        NlpError::Eval(e.to_string())
    }
}

#[derive(Debug, Clone)]
pub struct NlpOptions {
    pub equality_penalty_init: f64,
    pub multiplier_update: bool,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Stationarity tolerance for the subproblem KKT residual.
    pub grad_tol: f64,
    /// Feasibility tolerance on the equality rows.
    pub eq_tol: f64,
    /// Feasibility tolerance on the inequality rows. Held looser than the
    /// equality tolerance: chasing inequality violations below the
    /// multiplier-estimation floor only blows the penalty up and with it
    /// the rounding noise of the merit line search.
    pub ineq_tol: f64,
    pub armijo_c: f64,
    pub backtrack_factor: f64,
}

impl Default for NlpOptions {
    fn default() -> Self {
        NlpOptions {
            equality_penalty_init: 10.0,
            multiplier_update: true,
            max_outer: 30,
            max_inner: 500,
            grad_tol: 1e-8,
            eq_tol: 1e-10,
            ineq_tol: 1e-7,
            armijo_c: 1e-4,
            backtrack_factor: 0.5,
        }
    }
}

impl NlpOptions {
    /// Tolerances tied to the continuation parameter r: the stationarity
    /// tolerance tightens as the smoothing vanishes and the equality
    /// tolerance stays two orders stricter.
    pub fn for_continuation(r: f64) -> Self {
        let grad_tol = (1e-2 * r).max(1e-9);
        NlpOptions {
            grad_tol,
            eq_tol: (1e-2 * grad_tol).max(1e-12),
            ineq_tol: grad_tol.max(1e-8),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NlpStatus {
    Converged,
    IterationLimit,
    LineSearchFailure,
}

#[derive(Debug, Clone)]
pub struct NlpResult {
    pub w: Vec<f64>,
    pub kkt_residual: f64,
    pub equality_residual: f64,
    pub inequality_violation: f64,
    pub status: NlpStatus,
    pub inner_iterations: usize,
    /// Final equality multipliers.
    pub eq_multipliers: Vec<f64>,
    /// Final inequality multipliers (nonnegative).
    pub ineq_multipliers: Vec<f64>,
    /// Final penalty weight, for warm-starting a follow-up solve.
    pub penalty: f64,
}

/// Multiplier and penalty warm start carried between related solves
/// (successive continuation subproblems).
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub eq_multipliers: Vec<f64>,
    pub ineq_multipliers: Vec<f64>,
    pub penalty: f64,
}

impl WarmStart {
    pub fn from_result(res: &NlpResult) -> Self {
        WarmStart {
            eq_multipliers: res.eq_multipliers.clone(),
            ineq_multipliers: res.ineq_multipliers.clone(),
            penalty: res.penalty,
        }
    }
}

impl NlpProgram for SmoothedInstance {
    fn dim(&self) -> usize {
        self.n()
    }
    fn num_eq(&self) -> usize {
        SmoothedInstance::num_eq(self)
    }
    fn num_ineq(&self) -> usize {
        SmoothedInstance::num_ineq(self)
    }
    fn objective(&self, w: &[f64]) -> Result<f64, NlpError> {
        let p = self.blocks.point(w);
        let mut stack = Vec::new();
        Ok(self.objective.value.eval_with(&p, &mut stack)?)
    }
    fn objective_grad(&self, w: &[f64], out: &mut [f64]) -> Result<(), NlpError> {
        let p = self.blocks.point(w);
        let mut stack = Vec::new();
        for (c, maybe) in self.objective.grad.iter().enumerate() {
            out[c] = match maybe {
                Some(comp) => comp.eval_with(&p, &mut stack)?,
                None => 0.0,
            };
        }
        Ok(())
    }
    fn eq_values(&self, w: &[f64], out: &mut [f64]) -> Result<(), NlpError> {
        let mut stack = Vec::new();
        SmoothedInstance::eq_values(self, w, out, &mut stack)?;
        Ok(())
    }
    fn eq_jacobian(&self, w: &[f64], out: &mut [f64]) -> Result<(), NlpError> {
        let mut stack = Vec::new();
        SmoothedInstance::eq_jacobian(self, w, out, &mut stack)?;
        Ok(())
    }
    fn ineq_values(&self, w: &[f64], out: &mut [f64]) -> Result<(), NlpError> {
        let p = self.blocks.point(w);
        let mut stack = Vec::new();
        for (j, row) in self.ineq.iter().enumerate() {
            out[j] = row.value.eval_with(&p, &mut stack)?;
        }
        Ok(())
    }
    fn ineq_jacobian(&self, w: &[f64], out: &mut [f64]) -> Result<(), NlpError> {
        let p = self.blocks.point(w);
        let mut stack = Vec::new();
        let n = self.n();
        out.fill(0.0);
        for (j, row) in self.ineq.iter().enumerate() {
            for (c, maybe) in row.grad.iter().enumerate() {
                if let Some(comp) = maybe {
                    out[j * n + c] = comp.eval_with(&p, &mut stack)?;
                }
            }
        }
        Ok(())
    }
}

/// Scratch space for merit evaluations.
struct Workspace {
    h: Vec<f64>,
    c: Vec<f64>,
    jh: Vec<f64>,
    jc: Vec<f64>,
    grad_f: Vec<f64>,
}

impl Workspace {
    fn new(prog: &dyn NlpProgram) -> Self {
        let (n, me, mi) = (prog.dim(), prog.num_eq(), prog.num_ineq());
        Workspace {
            h: vec![0.0; me],
            c: vec![0.0; mi],
            jh: vec![0.0; me * n],
            jc: vec![0.0; mi * n],
            grad_f: vec![0.0; n],
        }
    }
}

fn merit_value(
    prog: &dyn NlpProgram,
    w: &[f64],
    nu: &[f64],
    mu: &[f64],
    beta: f64,
    ws: &mut Workspace,
) -> Result<f64, NlpError> {
    let mut v = prog.objective(w)?;
    prog.eq_values(w, &mut ws.h)?;
    for (j, hj) in ws.h.iter().enumerate() {
        v += nu[j] * hj + 0.5 * beta * hj * hj;
    }
    prog.ineq_values(w, &mut ws.c)?;
    for (j, cj) in ws.c.iter().enumerate() {
        let shifted = (mu[j] / beta + cj).max(0.0);
        v += 0.5 * beta * shifted * shifted - mu[j] * mu[j] / (2.0 * beta);
    }
    Ok(v)
}

fn merit_grad(
    prog: &dyn NlpProgram,
    w: &[f64],
    nu: &[f64],
    mu: &[f64],
    beta: f64,
    ws: &mut Workspace,
    out: &mut [f64],
) -> Result<(), NlpError> {
    let n = prog.dim();
    prog.objective_grad(w, out)?;
    prog.eq_values(w, &mut ws.h)?;
    prog.eq_jacobian(w, &mut ws.jh)?;
    for (j, hj) in ws.h.iter().enumerate() {
        let coef = nu[j] + beta * hj;
        if coef != 0.0 {
            for c in 0..n {
                out[c] += coef * ws.jh[j * n + c];
            }
        }
    }
    prog.ineq_values(w, &mut ws.c)?;
    prog.ineq_jacobian(w, &mut ws.jc)?;
    for (j, cj) in ws.c.iter().enumerate() {
        let coef = beta * (mu[j] / beta + cj).max(0.0);
        if coef != 0.0 {
            for c in 0..n {
                out[c] += coef * ws.jc[j * n + c];
            }
        }
    }
    Ok(())
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

/// Inequality rows this close to the boundary count as active when
/// estimating multipliers.
const ACTIVE_TOL: f64 = 1e-6;

/// Least-squares multiplier estimates at a point: minimize
/// ||grad F + Jh' nu + Jc' mu||_2 over nu free and mu >= 0 supported on the
/// active inequality rows, by iteratively dropping negative mu components.
/// First-order estimates mu + beta*c become useless once beta is large
/// (every rounding error in c is amplified by beta); the least-squares
/// estimates stay clean and make the reported KKT residual honest.
pub fn least_squares_multipliers(
    prog: &dyn NlpProgram,
    w: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), NlpError> {
    let n = prog.dim();
    let (me, mi) = (prog.num_eq(), prog.num_ineq());
    let mut ws = Workspace::new(prog);
    prog.objective_grad(w, &mut ws.grad_f)?;
    prog.eq_jacobian(w, &mut ws.jh)?;
    prog.ineq_jacobian(w, &mut ws.jc)?;
    prog.ineq_values(w, &mut ws.c)?;

    let mut active: Vec<usize> = (0..mi).filter(|&j| ws.c[j] >= -ACTIVE_TOL).collect();
    let target = -DVector::from_column_slice(&ws.grad_f);
    loop {
        let cols = me + active.len();
        if cols == 0 {
            return Ok((vec![], vec![0.0; mi]));
        }
        let mut mat = DMatrix::<f64>::zeros(n, cols);
        for j in 0..me {
            for i in 0..n {
                mat[(i, j)] = ws.jh[j * n + i];
            }
        }
        for (aj, &j) in active.iter().enumerate() {
            for i in 0..n {
                mat[(i, me + aj)] = ws.jc[j * n + i];
            }
        }
        let svd = mat.svd(true, true);
        let sol = svd
            .solve(&target, 1e-12)
            .map_err(|e| NlpError::Eval(e.to_string()))?;
        let negative: Vec<usize> = active
            .iter()
            .enumerate()
            .filter(|(aj, _)| sol[me + aj] < -1e-12)
            .map(|(aj, _)| aj)
            .collect();
        if negative.is_empty() {
            let nu = sol.as_slice()[..me].to_vec();
            let mut mu = vec![0.0; mi];
            for (aj, &j) in active.iter().enumerate() {
                mu[j] = sol[me + aj].max(0.0);
            }
            return Ok((nu, mu));
        }
        for aj in negative.into_iter().rev() {
            active.remove(aj);
        }
    }
}

/// Inner minimizer: damped BFGS on a fixed merit. Returns (iterations,
/// line-search-ok). The direct Hessian approximation is kept positive
/// definite by Powell damping; directions come from a Cholesky solve. The
/// approximation is caller-owned so curvature learned in one round of the
/// multiplier loop carries into the next.
pub(crate) fn bfgs_minimize<F, G>(
    n: usize,
    w: &mut Vec<f64>,
    b: &mut DMatrix<f64>,
    mut value: F,
    mut grad: G,
    tol: f64,
    max_iter: usize,
    armijo_c: f64,
    backtrack: f64,
) -> Result<(usize, bool), NlpError>
where
    F: FnMut(&[f64]) -> Result<f64, NlpError>,
    G: FnMut(&[f64], &mut [f64]) -> Result<(), NlpError>,
{
    let mut g = vec![0.0; n];
    grad(w, &mut g)?;
    let mut fw = value(w)?;
    if !fw.is_finite() {
        return Err(NlpError::BadStart("merit is not finite".into()));
    }
    let mut iter = 0;
    while iter < max_iter {
        if inf_norm(&g) <= tol {
            return Ok((iter, true));
        }
        iter += 1;

        let gv = DVector::from_column_slice(&g);
        let dir = match b.clone().cholesky() {
            Some(ch) => -ch.solve(&gv),
            None => {
                *b = DMatrix::identity(n, n);
                -gv.clone()
            }
        };
        let mut slope: f64 = dir.iter().zip(&g).map(|(d, gi)| d * gi).sum();
        let dir = if slope >= 0.0 {
            // Not a descent direction (stale curvature): reset.
            *b = DMatrix::identity(n, n);
            slope = -gv.dot(&gv);
            -gv
        } else {
            dir
        };

        // Armijo backtracking; evaluation errors reject the step. Near the
        // minimizer the true merit decrease sinks below f64 rounding of the
        // merit itself while the analytic gradient still has full relative
        // accuracy, so inside that noise band a step is also accepted when
        // the directional derivative has collapsed toward zero.
        let noise = 64.0 * f64::EPSILON * (1.0 + fw.abs());
        let mut alpha = 1.0;
        let mut accepted = None;
        let mut g_new = vec![0.0; n];
        let mut have_grad = false;
        while alpha >= 1e-16 {
            let trial: Vec<f64> = w
                .iter()
                .zip(dir.iter())
                .map(|(wi, di)| wi + alpha * di)
                .collect();
            match value(&trial) {
                Ok(ft) if ft.is_finite() => {
                    if ft <= fw + armijo_c * alpha * slope {
                        accepted = Some((trial, ft));
                        break;
                    }
                    if ft <= fw + noise {
                        grad(&trial, &mut g_new)?;
                        let new_slope: f64 =
                            dir.iter().zip(&g_new).map(|(d, gi)| d * gi).sum();
                        if new_slope.abs() <= 0.5 * slope.abs() {
                            have_grad = true;
                            accepted = Some((trial, ft.min(fw)));
                            break;
                        }
                    }
                    alpha *= backtrack;
                }
                _ => alpha *= backtrack,
            }
        }
        let Some((w_new, f_new)) = accepted else {
            return Ok((iter, false));
        };

        if !have_grad {
            grad(&w_new, &mut g_new)?;
        }
        let s = DVector::from_iterator(n, w_new.iter().zip(w.iter()).map(|(a, b)| a - b));
        let yv = DVector::from_iterator(n, g_new.iter().zip(&g).map(|(a, b)| a - b));

        // Powell-damped BFGS update on the direct approximation.
        let bs = &*b * &s;
        let sbs = s.dot(&bs);
        let sy = s.dot(&yv);
        if sbs > 0.0 {
            let theta = if sy >= 0.2 * sbs {
                1.0
            } else {
                0.8 * sbs / (sbs - sy)
            };
            let r = &yv * theta + &bs * (1.0 - theta);
            let sr = s.dot(&r);
            if sr > 1e-14 * s.norm() * r.norm() {
                *b = &*b - (&bs * bs.transpose()) / sbs + (&r * r.transpose()) / sr;
            }
        }

        *w = w_new;
        fw = f_new;
        g = g_new;
    }
    Ok((iter, true))
}

/// Solve the subproblem to approximate stationarity.
pub fn solve_subproblem(
    prog: &dyn NlpProgram,
    w0: &[f64],
    opts: &NlpOptions,
) -> Result<NlpResult, NlpError> {
    solve_subproblem_warm(prog, w0, opts, None)
}

/// As `solve_subproblem`, seeding multipliers and penalty from an earlier
/// solve. Without the warm start every continuation step re-learns the
/// multipliers from zero, which forces the penalty through the roof and
/// stalls the line search at the f64 noise floor.
pub fn solve_subproblem_warm(
    prog: &dyn NlpProgram,
    w0: &[f64],
    opts: &NlpOptions,
    warm: Option<&WarmStart>,
) -> Result<NlpResult, NlpError> {
    let n = prog.dim();
    assert_eq!(w0.len(), n, "start point dimension mismatch");
    let (me, mi) = (prog.num_eq(), prog.num_ineq());
    let mut ws = Workspace::new(prog);

    let mut w = w0.to_vec();
    if prog.objective(&w).is_err() {
        return Err(NlpError::BadStart(
            "objective not evaluable at the start point".into(),
        ));
    }
    let (mut nu, mut mu, mut beta) = match warm {
        Some(ws) if ws.eq_multipliers.len() == me && ws.ineq_multipliers.len() == mi => (
            ws.eq_multipliers.clone(),
            ws.ineq_multipliers.clone(),
            ws.penalty.clamp(opts.equality_penalty_init, 1e6),
        ),
        _ => (
            vec![0.0; me],
            vec![0.0; mi],
            opts.equality_penalty_init,
        ),
    };
    let mut total_inner = 0;
    let mut prev_infeas = f64::INFINITY;
    let mut line_search_ok = true;
    let mut best_score = f64::INFINITY;
    let mut stalled_rounds = 0usize;
    // Curvature carries across multiplier rounds; only the multiplier and
    // penalty shifts of the merit change between them.
    let mut bmat = DMatrix::<f64>::identity(n, n);

    let mut best: Option<NlpResult> = None;

    for _outer in 0..opts.max_outer {
        let inner_tol = 0.5 * opts.grad_tol;
        let (nu_c, mu_c, beta_c) = (nu.clone(), mu.clone(), beta);
        let mut ws_val = Workspace::new(prog);
        let mut ws_grad = Workspace::new(prog);
        let (iters, ls_ok) = bfgs_minimize(
            n,
            &mut w,
            &mut bmat,
            |wv| merit_value(prog, wv, &nu_c, &mu_c, beta_c, &mut ws_val),
            |wv, out| merit_grad(prog, wv, &nu_c, &mu_c, beta_c, &mut ws_grad, out),
            inner_tol,
            opts.max_inner,
            opts.armijo_c,
            opts.backtrack_factor,
        )?;
        total_inner += iters;
        line_search_ok = ls_ok;

        prog.eq_values(&w, &mut ws.h)?;
        prog.ineq_values(&w, &mut ws.c)?;
        let eq_res = inf_norm(&ws.h);
        let ineq_viol = ws.c.iter().fold(0.0f64, |a, v| a.max(v.max(0.0)));
        let infeas = eq_res.max(ineq_viol);
        let feasible = eq_res <= opts.eq_tol && ineq_viol <= opts.ineq_tol;

        // Least-squares multiplier estimates at the inner solution; the
        // first-order updates nu + beta*h degrade once beta is large.
        let (nu_hat, mu_hat) = least_squares_multipliers(prog, &w)?;
        let kkt = kkt_residual_nlp(prog, &w, &nu_hat, &mu_hat)?;

        let result = NlpResult {
            w: w.clone(),
            kkt_residual: kkt,
            equality_residual: eq_res,
            inequality_violation: ineq_viol,
            status: NlpStatus::Converged,
            inner_iterations: total_inner,
            eq_multipliers: nu_hat.clone(),
            ineq_multipliers: mu_hat.clone(),
            penalty: beta,
        };
        let better = match &best {
            None => true,
            Some(b) => {
                infeas.max(kkt) < b.equality_residual.max(b.inequality_violation).max(b.kkt_residual)
            }
        };
        if better {
            best = Some(result);
        }

        if kkt <= opts.grad_tol && feasible {
            let mut done = best.unwrap();
            done.status = NlpStatus::Converged;
            return Ok(done);
        }
        // Leave once the combined measure stops making real progress
        // (typically the f64 noise floor of the merit line search).
        let score = kkt.max(infeas);
        if score < 0.9 * best_score {
            best_score = score;
            stalled_rounds = 0;
        } else {
            stalled_rounds += 1;
            if stalled_rounds >= 3 {
                break;
            }
        }

        if opts.multiplier_update {
            nu = nu_hat;
            mu = mu_hat;
        }
        if infeas > 0.5 * prev_infeas && !feasible {
            // Past ~1e9 the quadratic terms drown the merit in rounding
            // noise and the line search cannot certify descent any more.
            beta = (beta * 10.0).min(1e9);
        }
        prev_infeas = infeas;
    }

    let mut out = best.expect("at least one outer round ran");
    out.status = if line_search_ok {
        NlpStatus::IterationLimit
    } else {
        NlpStatus::LineSearchFailure
    };
    Ok(out)
}

/// KKT residual of the subproblem Lagrangian at (w, multipliers): the
/// infinity norm of grad F + Jh' nu + Jc' mu plus the largest
/// complementarity mismatch |mu_j c_j| of the inequality multipliers.
pub fn kkt_residual_nlp(
    prog: &dyn NlpProgram,
    w: &[f64],
    eq_multipliers: &[f64],
    ineq_multipliers: &[f64],
) -> Result<f64, NlpError> {
    let n = prog.dim();
    let mut ws = Workspace::new(prog);
    prog.objective_grad(w, &mut ws.grad_f)?;
    prog.eq_jacobian(w, &mut ws.jh)?;
    prog.ineq_jacobian(w, &mut ws.jc)?;
    prog.ineq_values(w, &mut ws.c)?;
    let mut stat = ws.grad_f.clone();
    for (j, nj) in eq_multipliers.iter().enumerate() {
        if *nj != 0.0 {
            for c in 0..n {
                stat[c] += nj * ws.jh[j * n + c];
            }
        }
    }
    let mut comp = 0.0f64;
    for (j, mj) in ineq_multipliers.iter().enumerate() {
        if *mj != 0.0 {
            for c in 0..n {
                stat[c] += mj * ws.jc[j * n + c];
            }
        }
        comp = comp.max((mj * ws.c[j]).abs());
    }
    Ok(inf_norm(&stat) + comp)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A hand-written quadratic program with linear equality rows.
    struct Quadratic {
        q: DMatrix<f64>,
        c: DVector<f64>,
        a: DMatrix<f64>,
        b: DVector<f64>,
    }

    impl NlpProgram for Quadratic {
        fn dim(&self) -> usize {
            self.q.nrows()
        }
        fn num_eq(&self) -> usize {
            self.a.nrows()
        }
        fn num_ineq(&self) -> usize {
            0
        }
        fn objective(&self, w: &[f64]) -> Result<f64, NlpError> {
            let wv = DVector::from_column_slice(w);
            Ok(0.5 * wv.dot(&(&self.q * &wv)) + self.c.dot(&wv))
        }
        fn objective_grad(&self, w: &[f64], out: &mut [f64]) -> Result<(), NlpError> {
            let wv = DVector::from_column_slice(w);
            let g = &self.q * &wv + &self.c;
            out.copy_from_slice(g.as_slice());
            Ok(())
        }
        fn eq_values(&self, w: &[f64], out: &mut [f64]) -> Result<(), NlpError> {
            let wv = DVector::from_column_slice(w);
            let h = &self.a * &wv - &self.b;
            out.copy_from_slice(h.as_slice());
            Ok(())
        }
        fn eq_jacobian(&self, _w: &[f64], out: &mut [f64]) -> Result<(), NlpError> {
            for (r, row) in self.a.row_iter().enumerate() {
                for (cix, v) in row.iter().enumerate() {
                    out[r * self.dim() + cix] = *v;
                }
            }
            Ok(())
        }
        fn ineq_values(&self, _w: &[f64], _out: &mut [f64]) -> Result<(), NlpError> {
            Ok(())
        }
        fn ineq_jacobian(&self, _w: &[f64], _out: &mut [f64]) -> Result<(), NlpError> {
            Ok(())
        }
    }

    struct Xorshift(u64);
    impl Xorshift {
        fn next_f64(&mut self) -> f64 {
            self.0 ^= self.0 << 13;
            self.0 ^= self.0 >> 7;
            self.0 ^= self.0 << 17;
            (self.0 >> 11) as f64 / (1u64 << 53) as f64
        }
        fn range(&mut self, lo: f64, hi: f64) -> f64 {
            lo + (hi - lo) * self.next_f64()
        }
    }

    fn random_qp(rng: &mut Xorshift, n: usize, me: usize) -> Quadratic {
        // Q = R'R + I keeps things convex and well conditioned.
        let r = DMatrix::from_fn(n, n, |_, _| rng.range(-1.0, 1.0));
        let q = &r.transpose() * &r + DMatrix::<f64>::identity(n, n);
        let c = DVector::from_fn(n, |_, _| rng.range(-1.0, 1.0));
        let a = DMatrix::from_fn(me, n, |_, _| rng.range(-1.0, 1.0));
        let b = DVector::from_fn(me, |_, _| rng.range(-1.0, 1.0));
        Quadratic { q, c, a, b }
    }

    fn analytic_kkt(qp: &Quadratic) -> DVector<f64> {
        let n = qp.dim();
        let me = qp.num_eq();
        let mut kkt = DMatrix::<f64>::zeros(n + me, n + me);
        kkt.view_mut((0, 0), (n, n)).copy_from(&qp.q);
        kkt.view_mut((n, 0), (me, n)).copy_from(&qp.a);
        kkt.view_mut((0, n), (n, me)).copy_from(&qp.a.transpose());
        let mut rhs = DVector::<f64>::zeros(n + me);
        rhs.rows_mut(0, n).copy_from(&(-&qp.c));
        rhs.rows_mut(n, me).copy_from(&qp.b);
        kkt.lu().solve(&rhs).expect("KKT system is nonsingular")
    }

    #[test]
    fn recovers_analytic_solution_of_random_equality_qps() {
        let mut rng = Xorshift(77);
        for trial in 0..20 {
            let n = 2 + (rng.next_f64() * 8.0) as usize;
            let me = 1 + (rng.next_f64() * (n as f64 - 1.0)) as usize;
            let qp = random_qp(&mut rng, n, me.min(n - 1));
            let sol = analytic_kkt(&qp);
            let opts = NlpOptions {
                grad_tol: 1e-10,
                eq_tol: 1e-10,
                ..Default::default()
            };
            let w0 = vec![0.0; n];
            let res = solve_subproblem(&qp, &w0, &opts).unwrap();
            for i in 0..n {
                assert!(
                    (res.w[i] - sol[i]).abs() <= 1e-6,
                    "trial {trial} component {i}: {} vs {}",
                    res.w[i],
                    sol[i]
                );
            }
        }
    }

    #[test]
    fn contradictory_equalities_hit_iteration_limit() {
        // h1: w = 0, h2: w = 1 cannot both hold.
        let qp = Quadratic {
            q: DMatrix::identity(1, 1),
            c: DVector::zeros(1),
            a: DMatrix::from_column_slice(2, 1, &[1.0, 1.0]),
            b: DVector::from_column_slice(&[0.0, 1.0]),
        };
        let res = solve_subproblem(&qp, &[0.3], &NlpOptions::default()).unwrap();
        assert_ne!(res.status, NlpStatus::Converged);
        assert!(res.equality_residual >= 0.4, "{res:?}");
    }

    #[test]
    fn deterministic_bit_identical_runs() {
        let mut rng = Xorshift(31);
        let qp = random_qp(&mut rng, 6, 2);
        let opts = NlpOptions::default();
        let a = solve_subproblem(&qp, &[0.1; 6], &opts).unwrap();
        let b = solve_subproblem(&qp, &[0.1; 6], &opts).unwrap();
        assert_eq!(a.w, b.w);
        assert_eq!(a.kkt_residual.to_bits(), b.kkt_residual.to_bits());
        assert_eq!(a.inner_iterations, b.inner_iterations);
    }

    #[test]
    fn merit_is_nonincreasing_along_accepted_steps() {
        let mut rng = Xorshift(8);
        let qp = random_qp(&mut rng, 5, 2);
        let nu = vec![0.0; 2];
        let mu: Vec<f64> = vec![];
        let beta = 10.0;
        let mut trace = Vec::new();
        let mut ws_v = Workspace::new(&qp);
        let mut ws_g = Workspace::new(&qp);
        let mut w = vec![0.5; 5];
        let mut b = DMatrix::identity(5, 5);
        bfgs_minimize(
            5,
            &mut w,
            &mut b,
            |wv| {
                let v = merit_value(&qp, wv, &nu, &mu, beta, &mut ws_v)?;
                trace.push(v);
                Ok(v)
            },
            |wv, out| merit_grad(&qp, wv, &nu, &mu, beta, &mut ws_g, out),
            1e-9,
            200,
            1e-4,
            0.5,
        )
        .unwrap();
        // Accepted merit values form a nonincreasing subsequence: replay by
        // keeping the running minimum of evaluations that were accepted.
        let mut accepted = Vec::new();
        let mut current = f64::INFINITY;
        for v in trace {
            if v < current {
                current = v;
                accepted.push(v);
            }
        }
        for pair in accepted.windows(2) {
            assert!(pair[1] <= pair[0]);
        }
    }

    #[test]
    fn kkt_residual_zero_at_stationary_point_and_positive_elsewhere() {
        let mut rng = Xorshift(5);
        let qp = random_qp(&mut rng, 4, 2);
        let sol = analytic_kkt(&qp);
        let w: Vec<f64> = sol.as_slice()[..4].to_vec();
        let nu: Vec<f64> = sol.as_slice()[4..].to_vec();
        let r = kkt_residual_nlp(&qp, &w, &nu, &[]).unwrap();
        assert!(r <= 1e-10, "residual {r}");
        let w_off: Vec<f64> = w.iter().map(|v| v + 0.1).collect();
        let r_off = kkt_residual_nlp(&qp, &w_off, &nu, &[]).unwrap();
        assert!(r_off > 1e-3);
    }

    #[test]
    fn zero_multipliers_reduce_to_objective_gradient_norm() {
        let mut rng = Xorshift(6);
        let qp = random_qp(&mut rng, 4, 1);
        let w = vec![0.2, -0.4, 0.8, 0.1];
        let r = kkt_residual_nlp(&qp, &w, &[0.0], &[]).unwrap();
        let mut g = vec![0.0; 4];
        qp.objective_grad(&w, &mut g).unwrap();
        assert_eq!(r, inf_norm(&g));
    }

    #[test]
    fn kkt_residual_is_consistent_with_directional_differences() {
        // The stationarity part of the residual is the gradient of the
        // Lagrangian; check it against central differences of the scalar
        // Lagrangian along coordinate directions.
        let mut rng = Xorshift(12);
        let qp = random_qp(&mut rng, 4, 2);
        let w = vec![0.3, -0.2, 0.5, -0.7];
        let nu = vec![0.4, -1.2];
        let lagrangian = |wv: &[f64]| -> f64 {
            let mut h = vec![0.0; 2];
            qp.eq_values(wv, &mut h).unwrap();
            qp.objective(wv).unwrap() + nu[0] * h[0] + nu[1] * h[1]
        };
        let mut worst = 0.0f64;
        let mut grad = vec![0.0; 4];
        qp.objective_grad(&w, &mut grad).unwrap();
        let mut jh = vec![0.0; 8];
        qp.eq_jacobian(&w, &mut jh).unwrap();
        for c in 0..4 {
            let an = grad[c] + nu[0] * jh[c] + nu[1] * jh[4 + c];
            let h = 1e-6;
            let mut wp = w.clone();
            wp[c] += h;
            let mut wm = w.clone();
            wm[c] -= h;
            let fd = (lagrangian(&wp) - lagrangian(&wm)) / (2.0 * h);
            worst = worst.max((an - fd).abs() / an.abs().max(1.0));
        }
        assert!(worst <= 1e-6, "worst {worst}");
    }
}
