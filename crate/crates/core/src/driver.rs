//! Outer continuation loops.
//!
//! Three solvers share the same skeleton: build a single-level instance,
//! draw the start multipliers s0 ~ U(0,1)^m from the seeded xorshift64*
//! generator, then repeatedly solve a smooth subproblem and shrink the
//! driving parameter:
//!
//! - svf-sbal: smoothed SVF subproblems with r_k = delta^k r0 and
//!   rho_k = max(rho_bar, delta^k rho0),
//! - kp-sbal: the same smoothing applied to the KKT instance,
//! - kp-rlx: smooth programs with the complementarity product relaxed to
//!   -eps_k <= s'g(x,y) <= 0 and eps_k = shrink^k eps0.
//!
//! After each subproblem the residual Res_k is the infinity norm over the
//! subproblem KKT residual at the iterate and every feasibility component
//! of the ORIGINAL instance (stationarity rows, inequality violations,
//! complementarity products, dominance). The loop stops at the first of:
//!
//! 1. Res_k <= 5e-5
//! 2. k >= max outer iterations (default 50)
//! 3. k >= 20 and |Res_k - Res_{k-1}| <= 1e-8
//! 4. k >= 30 and Res_k <= 5e-4
//!
//! For nonconvex lower levels both reference starts u0 = y0 and u0 = -y0
//! run to completion and the run with the smaller final residual is
//! adopted (ties break toward the smaller upper objective).

use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::expr::{self, Block, Expr};
use crate::nlp::{self, NlpError, NlpOptions, NlpProgram, NlpStatus};
use crate::problem::BilevelProblem;
use crate::reformulate::{build_kp, build_svf, mpec_residual, IneqKind, MpecInstance};
use crate::rng::Xorshift64Star;
use crate::smoothing::{smooth_instance, CompiledWithGrad, SmoothingError};

#[derive(Debug, Error)]
pub enum DriverError {
    #[error(transparent)]
    Smoothing(#[from] SmoothingError),
    #[error(transparent)]
    Nlp(#[from] NlpError),
    #[error(transparent)]
    Eval(#[from] crate::expr::EvalError),
    #[error("start point dimension mismatch: {0}")]
    BadStart(String),
}

/// Continuation schedule; `r/rho` are halved geometrically by `delta` and
/// rho is floored at `rho_bar`.
#[derive(Debug, Clone, Serialize)]
pub struct ScheduleParams {
    pub r0: f64,
    pub rho0: f64,
    pub rho_bar: f64,
    pub delta: f64,
    pub max_outer_k: usize,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            r0: 1.0,
            rho0: 1.0,
            rho_bar: 0.01,
            delta: 0.1,
            max_outer_k: 50,
        }
    }
}

/// Relaxation schedule for kp-rlx.
#[derive(Debug, Clone, Serialize)]
pub struct RlxParams {
    pub eps0: f64,
    pub shrink: f64,
    pub max_outer_k: usize,
}

impl Default for RlxParams {
    fn default() -> Self {
        RlxParams {
            eps0: 1.0,
            shrink: 0.1,
            max_outer_k: 50,
        }
    }
}

/// Smoothing parameters never go below this floor (relevant for delta = 0).
const R_FLOOR: f64 = 1e-16;

/// The first stopping criterion satisfied, in the fixed order 1..4.
pub(crate) fn stop_criterion(
    k: usize,
    res_k: f64,
    res_prev: Option<f64>,
    max_outer_k: usize,
) -> Option<u8> {
    if res_k <= 5e-5 {
        return Some(1);
    }
    if k >= max_outer_k {
        return Some(2);
    }
    if k >= 20 {
        if let Some(prev) = res_prev {
            if (res_k - prev).abs() <= 1e-8 {
                return Some(3);
            }
        }
    }
    if k >= 30 && res_k <= 5e-4 {
        return Some(4);
    }
    None
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    pub solver: String,
    pub problem: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Reference point; absent for KP modes.
    pub u: Option<Vec<f64>>,
    pub s: Vec<f64>,
    /// Res_0 .. Res_K (length = outer iterations + 1).
    pub res_trace: Vec<f64>,
    /// Stopping criterion hit (1-4); 0 when the run aborted.
    pub criterion: u8,
    pub objective_upper: f64,
    pub objective_lower: f64,
    pub wall_time_s: f64,
    /// "y0", "-y0" or "n/a".
    pub u0_strategy: String,
    pub seed: u64,
    /// True when delta drove r below the floor and it was clamped.
    pub r_clamped: bool,
    pub subproblem_failures: usize,
    pub final_status: String,
}

impl SolveReport {
    pub fn final_res(&self) -> f64 {
        *self.res_trace.last().unwrap_or(&f64::INFINITY)
    }
}

fn status_name(s: NlpStatus) -> &'static str {
    match s {
        NlpStatus::Converged => "converged",
        NlpStatus::IterationLimit => "iteration-limit",
        NlpStatus::LineSearchFailure => "line-search-failure",
    }
}

fn draw_s0(m: usize, seed: u64) -> Vec<f64> {
    let mut rng = Xorshift64Star::new(seed);
    (0..m).map(|_| rng.next_f64()).collect()
}

fn objectives(prob: &BilevelProblem, x: &[f64], y: &[f64]) -> (f64, f64) {
    let f_up = prob.eval_upper(x, y).unwrap_or(f64::NAN);
    let f_lo = prob.eval_lower(x, y).unwrap_or(f64::NAN);
    (f_up, f_lo)
}

/// One SBAL continuation run over a prepared instance and start vector.
fn sbal_run(
    prob: &BilevelProblem,
    base: &MpecInstance,
    solver: &str,
    strategy: &str,
    mut w: Vec<f64>,
    params: &ScheduleParams,
    seed: u64,
) -> Result<SolveReport, DriverError> {
    let t0 = Instant::now();
    let mut r_clamped = false;
    let mut failures = 0usize;
    let mut final_status = "converged".to_string();

    let r_at = |k: usize, clamped: &mut bool| -> f64 {
        let raw = params.r0 * params.delta.powi(k as i32);
        if raw < R_FLOOR {
            *clamped = true;
            R_FLOOR
        } else {
            raw
        }
    };
    let rho_at =
        |k: usize| -> f64 { (params.rho0 * params.delta.powi(k as i32)).max(params.rho_bar) };

    // Res_0: subproblem KKT residual at the start point (with its best
    // multiplier estimates) plus the original-instance feasibility audit.
    let program0 = smooth_instance(base, r_at(0, &mut r_clamped), rho_at(0))?;
    let kkt0 = nlp::least_squares_multipliers(&program0, &w)
        .and_then(|(nu, mu)| nlp::kkt_residual_nlp(&program0, &w, &nu, &mu))
        .unwrap_or(f64::INFINITY);
    let audit0 = mpec_residual(base, &w)?.max();
    let mut trace = vec![kkt0.max(audit0)];

    let mut warm: Option<nlp::WarmStart> = None;
    let criterion = loop {
        let k = trace.len() - 1;
        let prev = k.checked_sub(1).map(|i| trace[i]);
        if let Some(c) = stop_criterion(k, trace[k], prev, params.max_outer_k) {
            break c;
        }
        let r_k = r_at(k, &mut r_clamped);
        let rho_k = rho_at(k);
        let program = smooth_instance(base, r_k, rho_k)?;
        let opts = NlpOptions::for_continuation(r_k);
        let sub_kkt = match nlp::solve_subproblem_warm(&program, &w, &opts, warm.as_ref()) {
            Ok(res) => {
                w = res.w.clone();
                final_status = status_name(res.status).to_string();
                if res.status != NlpStatus::Converged {
                    failures += 1;
                }
                warm = Some(nlp::WarmStart::from_result(&res));
                res.kkt_residual
            }
            Err(err) => {
                failures += 1;
                final_status = format!("subproblem error: {err}");
                if k == 0 {
                    // Nothing recoverable yet: report the start as-is.
                    let p = base.blocks.point(&w);
                    let (fu, fl) = objectives(prob, p.x.unwrap(), p.y.unwrap());
                    return Ok(SolveReport {
                        solver: solver.into(),
                        problem: prob.meta.name.clone(),
                        x: p.x.unwrap().to_vec(),
                        y: p.y.unwrap().to_vec(),
                        u: p.u.map(|v| v.to_vec()),
                        s: p.s.unwrap().to_vec(),
                        res_trace: trace,
                        criterion: 0,
                        objective_upper: fu,
                        objective_lower: fl,
                        wall_time_s: t0.elapsed().as_secs_f64(),
                        u0_strategy: strategy.into(),
                        seed,
                        r_clamped,
                        subproblem_failures: failures,
                        final_status,
                    });
                }
                f64::INFINITY
            }
        };
        let audit = mpec_residual(base, &w)?.max();
        trace.push(sub_kkt.max(audit));
    };

    let p = base.blocks.point(&w);
    let (fu, fl) = objectives(prob, p.x.unwrap(), p.y.unwrap());
    Ok(SolveReport {
        solver: solver.into(),
        problem: prob.meta.name.clone(),
        x: p.x.unwrap().to_vec(),
        y: p.y.unwrap().to_vec(),
        u: p.u.map(|v| v.to_vec()),
        s: p.s.unwrap().to_vec(),
        res_trace: trace,
        criterion,
        objective_upper: fu,
        objective_lower: fl,
        wall_time_s: t0.elapsed().as_secs_f64(),
        u0_strategy: strategy.into(),
        seed,
        r_clamped,
        subproblem_failures: failures,
        final_status,
    })
}

/// SVF continuation. For nonconvex lower levels both u0 strategies run and
/// the better final residual wins (ties break on the upper objective).
pub fn solve_svf_sbal(
    prob: &BilevelProblem,
    start: (&[f64], &[f64]),
    params: &ScheduleParams,
    seed: u64,
) -> Result<SolveReport, DriverError> {
    let (x0, y0) = start;
    if x0.len() != prob.d || y0.len() != prob.l {
        return Err(DriverError::BadStart(format!(
            "got ({}, {}), expected ({}, {})",
            x0.len(),
            y0.len(),
            prob.d,
            prob.l
        )));
    }
    let base = build_svf(prob);
    let s0 = draw_s0(prob.m, seed);
    let strategies: &[(&str, f64)] = if prob.meta.lower_convex {
        &[("y0", 1.0)]
    } else {
        &[("y0", 1.0), ("-y0", -1.0)]
    };
    let mut best: Option<SolveReport> = None;
    for (name, sign) in strategies {
        let u0: Vec<f64> = y0.iter().map(|v| sign * v).collect();
        let w0 = base.pack(x0, y0, Some(&u0), &s0);
        let report = sbal_run(prob, &base, "svf-sbal", name, w0, params, seed)?;
        let better = match &best {
            None => true,
            Some(b) => {
                report.final_res() < b.final_res()
                    || (report.final_res() == b.final_res()
                        && report.objective_upper < b.objective_upper)
            }
        };
        if better {
            best = Some(report);
        }
    }
    Ok(best.expect("at least one strategy ran"))
}

/// SBAL continuation on the KKT instance.
pub fn solve_kp_sbal(
    prob: &BilevelProblem,
    start: (&[f64], &[f64]),
    params: &ScheduleParams,
    seed: u64,
) -> Result<SolveReport, DriverError> {
    let (x0, y0) = start;
    if x0.len() != prob.d || y0.len() != prob.l {
        return Err(DriverError::BadStart(format!(
            "got ({}, {}), expected ({}, {})",
            x0.len(),
            y0.len(),
            prob.d,
            prob.l
        )));
    }
    let base = build_kp(prob);
    let s0 = draw_s0(prob.m, seed);
    let w0 = base.pack(x0, y0, None, &s0);
    sbal_run(prob, &base, "kp-sbal", "n/a", w0, params, seed)
}

/// The relaxed KKT program at a fixed eps: stationarity rows as equalities,
/// g(x,y) <= 0, s >= 0 and -s'g(x,y) - eps <= 0 as inequalities.
struct RlxProgram {
    blocks: crate::reformulate::BlockMap,
    objective: CompiledWithGrad,
    equalities: Vec<CompiledWithGrad>,
    inequalities: Vec<CompiledWithGrad>,
}

impl RlxProgram {
    fn new(base: &MpecInstance, eps: f64) -> RlxProgram {
        let blocks = base.blocks;
        let objective = CompiledWithGrad::new(&base.objective, &blocks);
        let equalities = base
            .equalities
            .iter()
            .map(|e| CompiledWithGrad::new(e, &blocks))
            .collect();
        let mut ineq_exprs: Vec<Arc<Expr>> = Vec::new();
        for row in &base.inequalities {
            match row.kind {
                IneqKind::LowerAtY | IneqKind::Upper | IneqKind::SlackNonneg => {
                    ineq_exprs.push(row.expr.clone())
                }
                _ => {}
            }
        }
        // -s'g(x,y) <= eps
        let mut product = Expr::constant(0.0);
        for pair in &base.comp_pairs {
            product = expr::add(
                product,
                expr::mul(Expr::var(Block::S, pair.s_index), pair.g_expr.clone()),
            );
        }
        ineq_exprs.push(expr::sub(expr::neg(product), Expr::constant(eps)));
        let inequalities = ineq_exprs
            .iter()
            .map(|e| CompiledWithGrad::new(e, &blocks))
            .collect();
        RlxProgram {
            blocks,
            objective,
            equalities,
            inequalities,
        }
    }
}

impl NlpProgram for RlxProgram {
    fn dim(&self) -> usize {
        self.blocks.n()
    }
    fn num_eq(&self) -> usize {
        self.equalities.len()
    }
    fn num_ineq(&self) -> usize {
        self.inequalities.len()
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
        let p = self.blocks.point(w);
        let mut stack = Vec::new();
        for (j, row) in self.equalities.iter().enumerate() {
            out[j] = row.value.eval_with(&p, &mut stack)?;
        }
        Ok(())
    }
    fn eq_jacobian(&self, w: &[f64], out: &mut [f64]) -> Result<(), NlpError> {
        let p = self.blocks.point(w);
        let mut stack = Vec::new();
        let n = self.dim();
        out.fill(0.0);
        for (j, row) in self.equalities.iter().enumerate() {
            for (c, maybe) in row.grad.iter().enumerate() {
                if let Some(comp) = maybe {
                    out[j * n + c] = comp.eval_with(&p, &mut stack)?;
                }
            }
        }
        Ok(())
    }
    fn ineq_values(&self, w: &[f64], out: &mut [f64]) -> Result<(), NlpError> {
        let p = self.blocks.point(w);
        let mut stack = Vec::new();
        for (j, row) in self.inequalities.iter().enumerate() {
            out[j] = row.value.eval_with(&p, &mut stack)?;
        }
        Ok(())
    }
    fn ineq_jacobian(&self, w: &[f64], out: &mut [f64]) -> Result<(), NlpError> {
        let p = self.blocks.point(w);
        let mut stack = Vec::new();
        let n = self.dim();
        out.fill(0.0);
        for (j, row) in self.inequalities.iter().enumerate() {
            for (c, maybe) in row.grad.iter().enumerate() {
                if let Some(comp) = maybe {
                    out[j * n + c] = comp.eval_with(&p, &mut stack)?;
                }
            }
        }
        Ok(())
    }
}

/// Relaxation continuation on the KKT instance. The complementarity product
/// is relaxed two-sidedly: s >= 0 and g <= 0 force s'g <= 0, and the row
/// -s'g <= eps_k bounds it from below.
pub fn solve_kp_rlx(
    prob: &BilevelProblem,
    start: (&[f64], &[f64]),
    params: &RlxParams,
    seed: u64,
) -> Result<SolveReport, DriverError> {
    let (x0, y0) = start;
    if x0.len() != prob.d || y0.len() != prob.l {
        return Err(DriverError::BadStart(format!(
            "got ({}, {}), expected ({}, {})",
            x0.len(),
            y0.len(),
            prob.d,
            prob.l
        )));
    }
    let t0 = Instant::now();
    let base = build_kp(prob);
    let s0 = draw_s0(prob.m, seed);
    let mut w = base.pack(x0, y0, None, &s0);
    let mut failures = 0usize;
    let mut final_status = "converged".to_string();

    let comp_product = |w: &[f64]| -> f64 {
        let p = base.blocks.point(w);
        let s = p.s.unwrap();
        base.comp_pairs
            .iter()
            .map(|pair| s[pair.s_index] * pair.g_expr.eval(&p).unwrap_or(f64::NAN))
            .sum::<f64>()
    };

    let program0 = RlxProgram::new(&base, params.eps0);
    let kkt0 = nlp::least_squares_multipliers(&program0, &w)
        .and_then(|(nu, mu)| nlp::kkt_residual_nlp(&program0, &w, &nu, &mu))
        .unwrap_or(f64::INFINITY);
    let audit0 = mpec_residual(&base, &w)?.max();
    let mut trace = vec![kkt0.max(audit0).max(comp_product(&w).abs())];

    let mut warm: Option<nlp::WarmStart> = None;
    let criterion = loop {
        let k = trace.len() - 1;
        let prev = k.checked_sub(1).map(|i| trace[i]);
        if let Some(c) = stop_criterion(k, trace[k], prev, params.max_outer_k) {
            break c;
        }
        let eps_k = (params.eps0 * params.shrink.powi(k as i32)).max(R_FLOOR);
        let program = RlxProgram::new(&base, eps_k);
        let opts = NlpOptions::for_continuation(eps_k);
        let sub_kkt = match nlp::solve_subproblem_warm(&program, &w, &opts, warm.as_ref()) {
            Ok(res) => {
                w = res.w.clone();
                final_status = status_name(res.status).to_string();
                if res.status != NlpStatus::Converged {
                    failures += 1;
                }
                warm = Some(nlp::WarmStart::from_result(&res));
                res.kkt_residual
            }
            Err(err) => {
                failures += 1;
                final_status = format!("subproblem error: {err}");
                if k == 0 {
                    break 0;
                }
                f64::INFINITY
            }
        };
        let audit = mpec_residual(&base, &w)?.max();
        trace.push(sub_kkt.max(audit).max(comp_product(&w).abs()));
    };

    let p = base.blocks.point(&w);
    let (fu, fl) = objectives(prob, p.x.unwrap(), p.y.unwrap());
    Ok(SolveReport {
        solver: "kp-rlx".into(),
        problem: prob.meta.name.clone(),
        x: p.x.unwrap().to_vec(),
        y: p.y.unwrap().to_vec(),
        u: None,
        s: p.s.unwrap().to_vec(),
        res_trace: trace,
        criterion,
        objective_upper: fu,
        objective_lower: fl,
        wall_time_s: t0.elapsed().as_secs_f64(),
        u0_strategy: "n/a".into(),
        seed,
        r_clamped: false,
        subproblem_failures: failures,
        final_status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parse::parse_problem;

    const ISOLATED_SRC: &str = "\
var x[1];
var y[2];
upper {
  minimize x[1]^2 - 2*x[1] + 3*y[1] + y[2];
  x[1] - 1 <= 0;
  -x[1] - 1 <= 0;
}
lower {
  minimize 0.5*((y[1] - x[1] + 0.625)^2 + (y[2] - 3.375)^2);
  -y[1]^2 + y[2]^2 + 4 <= 0;
  (y[1] - 1)^2 + y[2]^2 - 9 <= 0;
  x[1] + y[2] - 1.5 <= 0;
}
meta { name = IsolatedKktFailure; xref = 0; yref = -2, 0; Fstar = -6; fstar = 6.640625;
       x0 = 0; y0 = -2, 0; xbox = -1, 1; ybox = -4, 4, -4, 4; }
";

    #[test]
    fn schedule_values_follow_the_update_rule() {
        let params = ScheduleParams::default();
        let mut clamped = false;
        let r = |k: usize| params.r0 * params.delta.powi(k as i32);
        let rho = |k: usize| (params.rho0 * params.delta.powi(k as i32)).max(params.rho_bar);
        assert_eq!((r(0), rho(0)), (1.0, 1.0));
        assert_eq!((r(1), rho(1)), (0.1, 0.1));
        assert_eq!((r(2), rho(2)), (0.010000000000000002, 0.010000000000000002));
        assert_eq!(rho(3), 0.01);
        assert_eq!(rho(9), 0.01);
        assert!(!clamped);
        let _ = &mut clamped;
    }

    #[test]
    fn criterion_precedence_follows_the_fixed_order() {
        // 1 beats 4 when both hold.
        assert_eq!(stop_criterion(35, 4e-5, Some(4e-5), 50), Some(1));
        assert_eq!(stop_criterion(35, 4e-4, Some(1.0), 50), Some(4));
        // 2 beats 3 and 4 at the cap.
        assert_eq!(stop_criterion(50, 4e-4, Some(4e-4), 50), Some(2));
        // 3 needs k >= 20 and a stalled trace.
        assert_eq!(stop_criterion(20, 0.3, Some(0.3), 50), Some(3));
        assert_eq!(stop_criterion(19, 0.3, Some(0.3), 50), None);
        // nothing satisfied
        assert_eq!(stop_criterion(5, 0.3, Some(0.5), 50), None);
    }

    #[test]
    fn svf_sbal_solves_the_isolated_model_from_the_shipped_start() {
        let prob = parse_problem(ISOLATED_SRC).unwrap();
        let (x0, y0) = prob.start_point();
        let report =
            solve_svf_sbal(&prob, (&x0, &y0), &ScheduleParams::default(), 42).unwrap();
        assert_eq!(report.criterion, 1, "{report:?}");
        assert!(report.x[0].abs() <= 1e-3, "{:?}", report.x);
        assert!((report.y[0] + 2.0).abs() <= 1e-3, "{:?}", report.y);
        assert!(report.y[1].abs() <= 1e-3, "{:?}", report.y);
        assert!((report.objective_upper + 6.0).abs() <= 1e-2);
        // Trace length matches outer iterations + 1 and the last entry is
        // below the first criterion threshold.
        assert!(report.final_res() <= 5e-5);
    }

    #[test]
    fn seeded_runs_are_identical() {
        let prob = parse_problem(ISOLATED_SRC).unwrap();
        let (x0, y0) = prob.start_point();
        let a = solve_svf_sbal(&prob, (&x0, &y0), &ScheduleParams::default(), 7).unwrap();
        let b = solve_svf_sbal(&prob, (&x0, &y0), &ScheduleParams::default(), 7).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
        assert_eq!(a.res_trace, b.res_trace);
        assert_eq!(a.criterion, b.criterion);
        assert_eq!(a.u0_strategy, b.u0_strategy);
    }

    #[test]
    fn kp_sbal_misses_the_kp_infeasible_solution() {
        let prob = parse_problem(ISOLATED_SRC).unwrap();
        let (x0, y0) = prob.start_point();
        let report = solve_kp_sbal(&prob, (&x0, &y0), &ScheduleParams::default(), 42).unwrap();
        let err = ((report.x[0]).powi(2)
            + (report.y[0] + 2.0).powi(2)
            + (report.y[1]).powi(2))
        .sqrt();
        assert!(err > 1e-3, "kp-sbal should not reach the reference: {err}");
    }

    #[test]
    fn kp_rlx_misses_the_kp_infeasible_solution() {
        let prob = parse_problem(ISOLATED_SRC).unwrap();
        let (x0, y0) = prob.start_point();
        let report = solve_kp_rlx(&prob, (&x0, &y0), &RlxParams::default(), 42).unwrap();
        let err = ((report.x[0]).powi(2)
            + (report.y[0] + 2.0).powi(2)
            + (report.y[1]).powi(2))
        .sqrt();
        assert!(err > 1e-3, "kp-rlx should not reach the reference: {err}");
    }

    #[test]
    fn m_zero_problem_converges_by_criterion_one_for_all_solvers() {
        let prob = parse_problem(
            "var x[1]; var y[1]; upper{ minimize x[1]^2 + y[1]^2; } \
             lower{ minimize (y[1]-x[1])^2; } meta { name = MinimalToy; }",
        )
        .unwrap();
        let (x0, y0) = (vec![0.5], vec![-0.5]);
        for report in [
            solve_svf_sbal(&prob, (&x0, &y0), &ScheduleParams::default(), 1).unwrap(),
            solve_kp_sbal(&prob, (&x0, &y0), &ScheduleParams::default(), 1).unwrap(),
            solve_kp_rlx(&prob, (&x0, &y0), &RlxParams::default(), 1).unwrap(),
        ] {
            assert_eq!(report.criterion, 1, "{}: {report:?}", report.solver);
            assert!(report.x[0].abs() <= 1e-3);
            assert!(report.y[0].abs() <= 1e-3);
        }
    }

    #[test]
    fn delta_zero_clamps_r_and_reports_it() {
        let prob = parse_problem(
            "var x[1]; var y[1]; upper{ minimize x[1]^2 + y[1]^2; } \
             lower{ minimize (y[1]-x[1])^2; y[1] - 1 <= 0; }",
        )
        .unwrap();
        let params = ScheduleParams {
            delta: 0.0,
            max_outer_k: 3,
            ..Default::default()
        };
        let report = solve_svf_sbal(&prob, (&[0.4], &[0.2]), &params, 42).unwrap();
        assert!(report.r_clamped, "{report:?}");
    }

    #[test]
    fn subproblem_failure_at_start_is_reported_best_effort() {
        // log(y) is undefined at the shipped start y0 = -1.
        let prob = parse_problem(
            "var x[1]; var y[1]; upper{ minimize x[1]^2 + log(y[1]); } \
             lower{ minimize (y[1]-x[1])^2; } meta { y0 = -1; }",
        )
        .unwrap();
        let report = solve_svf_sbal(&prob, (&[0.0], &[-1.0]), &ScheduleParams::default(), 3)
            .unwrap();
        assert_eq!(report.criterion, 0);
        assert!(report.final_status.contains("subproblem error"));
        assert_eq!(report.y, vec![-1.0]);
    }

    #[test]
    fn rlx_epsilon_trace_and_product_sign() {
        // At any feasible point of the relaxed program, s'g lies in
        // [-eps, 0]; run one outer solve and check the product directly.
        let prob = parse_problem(
            "var x[1]; var y[1]; upper{ minimize (x[1]-1)^2 + (y[1]+1)^2; } \
             lower{ minimize (y[1]-x[1])^2; y[1] - 0.5 <= 0; } \
             meta { lower_convex = true; }",
        )
        .unwrap();
        let report = solve_kp_rlx(&prob, (&[1.0], &[0.0]), &RlxParams::default(), 11).unwrap();
        assert_eq!(report.criterion, 1, "{report:?}");
        // final point: product within the final relaxation width
        let g = report.y[0] - 0.5;
        let prod = report.s[0] * g;
        assert!(prod <= 1e-6, "s'g = {prod}");
        assert!(prod >= -1e-3, "s'g = {prod}");
    }

    #[test]
    fn report_serializes_with_trace_as_array() {
        let prob = parse_problem(
            "var x[1]; var y[1]; upper{ minimize x[1]^2 + y[1]^2; } \
             lower{ minimize (y[1]-x[1])^2; } meta { name = MinimalToy; }",
        )
        .unwrap();
        let report =
            solve_svf_sbal(&prob, (&[0.1], &[0.1]), &ScheduleParams::default(), 5).unwrap();
        let json = serde_json::to_value(&report).unwrap();
        assert!(json["res_trace"].is_array());
        assert_eq!(json["solver"], "svf-sbal");
        assert_eq!(json["seed"], 5);
    }
}
