//! Brute-force ground truth at desk scale.
//!
//! The oracle answers three questions without trusting any solver code:
//!
//! - the lower-level value function V(x) and its argmin set at a fixed x,
//!   by grid filtering plus local polish,
//! - the global bilevel solution, by an outer grid over x with the value
//!   function evaluated at every node and refinement around the incumbent,
//! - agreement of symbolic derivatives with central finite differences.
//!
//! Grid scans keep nodes whose constraint violation is below a small slack,
//! collect grid-local minima of the objective among them, and polish each
//! candidate by an augmented-Lagrangian descent restricted to the y
//! variables. Isolated feasible points are found only when they sit on the
//! grid, which is the documented contract for shipped problems. Results can
//! be cached to disk as JSON keyed by a hash of the model text and the grid
//! parameters.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{self, Block, Compiled, EvalError, Expr, Point};
use crate::nlp::{self, NlpError, NlpOptions, NlpProgram};
use crate::parse;
use crate::problem::BilevelProblem;
use crate::rng::Xorshift64Star;
use crate::smoothing;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("lower dimension {0} exceeds the grid limit 3")]
    LowerDimensionTooLarge(usize),
    #[error("upper dimension {0} exceeds the grid limit 2")]
    UpperDimensionTooLarge(usize),
    #[error("no feasible grid node: the feasible set may be empty or off-grid")]
    EmptyFeasibleRegion,
    #[error("no bilevel-feasible pair found on the grid")]
    NoBilevelFeasiblePair,
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("polish failed: {0}")]
    Polish(String),
    #[error("cache i/o: {0}")]
    Cache(String),
}

/// Grid parameters. Resolutions are per axis and forced odd so box centers
/// are always grid nodes.
#[derive(Debug, Clone, Serialize)]
pub struct GridSpec {
    pub resolution: usize,
    pub refine_rounds: usize,
    pub shrink: f64,
    /// Feasibility tolerance required of polished points.
    pub feas_tol: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            resolution: 201,
            refine_rounds: 3,
            shrink: 0.1,
            feas_tol: 1e-9,
        }
    }
}

/// Slack for keeping raw grid nodes; far looser than `feas_tol` because
/// cell-sized overshoot is expected before polish.
const GRID_SLACK: f64 = 1e-6;
/// Candidates polished per scan.
const MAX_POLISH: usize = 24;
/// Argmins closer than this merge into one cluster.
const CLUSTER_RADIUS: f64 = 1e-4;
/// Total grid-node budget for one value-function scan.
const NODE_BUDGET: usize = 300_000;
/// Total node budget for a global scan (outer times inner).
const GLOBAL_BUDGET: usize = 14_000_000;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValueFunction {
    pub value: f64,
    /// Cluster representatives of the argmin set, lexicographically sorted.
    pub argmins: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlobalSolution {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub upper_value: f64,
    pub lower_value: f64,
}

fn odd_at_most(r: usize) -> usize {
    let r = r.max(3);
    if r % 2 == 0 {
        r - 1
    } else {
        r
    }
}

/// Largest odd resolution from the preference ladder whose dims-th power
/// stays within the budget.
fn pick_resolution(preferred: usize, dims: usize, budget: usize) -> usize {
    let ladder = [preferred, 101, 41, 21, 11, 5, 3];
    for &r in &ladder {
        let r = odd_at_most(r.min(preferred));
        if (r as f64).powi(dims as i32) <= budget as f64 {
            return r;
        }
    }
    3
}

struct Grid {
    axes: Vec<Vec<f64>>,
}

impl Grid {
    fn new(boxes: &[(f64, f64)], res: usize) -> Grid {
        let axes = boxes
            .iter()
            .map(|&(lo, hi)| {
                (0..res)
                    .map(|i| lo + (hi - lo) * i as f64 / (res - 1) as f64)
                    .collect()
            })
            .collect();
        Grid { axes }
    }

    fn len(&self) -> usize {
        self.axes.iter().map(|a| a.len()).product()
    }

    fn decode(&self, mut idx: usize, out: &mut Vec<f64>) {
        out.clear();
        for axis in &self.axes {
            out.push(axis[idx % axis.len()]);
            idx /= axis.len();
        }
    }

    /// Neighbor along one axis, if inside the grid.
    fn neighbor(&self, idx: usize, axis: usize, step: isize) -> Option<usize> {
        let mut stride = 1;
        for a in &self.axes[..axis] {
            stride *= a.len();
        }
        let pos = (idx / stride) % self.axes[axis].len();
        let new = pos as isize + step;
        if new < 0 || new as usize >= self.axes[axis].len() {
            return None;
        }
        Some((idx as isize + step * stride as isize) as usize)
    }
}

/// The lower-level problem at fixed x, over y only, with box rows.
struct FixedLower {
    x: Vec<f64>,
    l: usize,
    f: Compiled,
    f_grad: Vec<Option<Compiled>>,
    g: Vec<Compiled>,
    g_grad: Vec<Vec<Option<Compiled>>>,
    boxes: Vec<(f64, f64)>,
}

impl FixedLower {
    fn new(prob: &BilevelProblem, x: &[f64], boxes: &[(f64, f64)]) -> FixedLower {
        let compile_grad = |e: &Arc<Expr>| -> Vec<Option<Compiled>> {
            (0..prob.l)
                .map(|j| {
                    let de = expr::diff(e, Block::Y, j);
                    if de.is_zero() {
                        None
                    } else {
                        Some(Compiled::new(&de))
                    }
                })
                .collect()
        };
        FixedLower {
            x: x.to_vec(),
            l: prob.l,
            f: Compiled::new(&prob.lower_objective),
            f_grad: compile_grad(&prob.lower_objective),
            g: prob.lower_constraints.iter().map(|g| Compiled::new(g)).collect(),
            g_grad: prob.lower_constraints.iter().map(compile_grad).collect(),
            boxes: boxes.to_vec(),
        }
    }

    fn point<'a>(&'a self, y: &'a [f64]) -> Point<'a> {
        Point {
            x: Some(&self.x),
            y: Some(y),
            u: None,
            s: None,
        }
    }

    fn violation(&self, y: &[f64]) -> Result<f64, EvalError> {
        let p = self.point(y);
        let mut stack = Vec::new();
        let mut v = 0.0f64;
        for g in &self.g {
            v = v.max(g.eval_with(&p, &mut stack)?.max(0.0));
        }
        for (j, &(lo, hi)) in self.boxes.iter().enumerate() {
            v = v.max(lo - y[j]).max(y[j] - hi);
        }
        Ok(v.max(0.0))
    }
}

impl NlpProgram for FixedLower {
    fn dim(&self) -> usize {
        self.l
    }
    fn num_eq(&self) -> usize {
        0
    }
    fn num_ineq(&self) -> usize {
        self.g.len() + 2 * self.l
    }
    fn objective(&self, w: &[f64]) -> Result<f64, NlpError> {
        let mut stack = Vec::new();
        Ok(self.f.eval_with(&self.point(w), &mut stack)?)
    }
    fn objective_grad(&self, w: &[f64], out: &mut [f64]) -> Result<(), NlpError> {
        let p = self.point(w);
        let mut stack = Vec::new();
        for (j, maybe) in self.f_grad.iter().enumerate() {
            out[j] = match maybe {
                Some(c) => c.eval_with(&p, &mut stack)?,
                None => 0.0,
            };
        }
        Ok(())
    }
    fn eq_values(&self, _w: &[f64], _out: &mut [f64]) -> Result<(), NlpError> {
        Ok(())
    }
    fn eq_jacobian(&self, _w: &[f64], _out: &mut [f64]) -> Result<(), NlpError> {
        Ok(())
    }
    fn ineq_values(&self, w: &[f64], out: &mut [f64]) -> Result<(), NlpError> {
        let p = self.point(w);
        let mut stack = Vec::new();
        for (i, g) in self.g.iter().enumerate() {
            out[i] = g.eval_with(&p, &mut stack)?;
        }
        let m = self.g.len();
        for (j, &(lo, hi)) in self.boxes.iter().enumerate() {
            out[m + 2 * j] = lo - w[j];
            out[m + 2 * j + 1] = w[j] - hi;
        }
        Ok(())
    }
    fn ineq_jacobian(&self, w: &[f64], out: &mut [f64]) -> Result<(), NlpError> {
        let n = self.l;
        out.fill(0.0);
        let p = self.point(w);
        let mut stack = Vec::new();
        for (i, grads) in self.g_grad.iter().enumerate() {
            for (j, maybe) in grads.iter().enumerate() {
                if let Some(c) = maybe {
                    out[i * n + j] = c.eval_with(&p, &mut stack)?;
                }
            }
        }
        let m = self.g.len();
        for j in 0..self.l {
            out[(m + 2 * j) * n + j] = -1.0;
            out[(m + 2 * j + 1) * n + j] = 1.0;
        }
        Ok(())
    }
}

fn polish(lower: &FixedLower, y0: &[f64], feas_tol: f64) -> Option<(Vec<f64>, f64)> {
    let opts = NlpOptions {
        grad_tol: 1e-9,
        eq_tol: (feas_tol * 1e-2).max(1e-12),
        ineq_tol: (feas_tol * 1e-2).max(1e-12),
        max_outer: 40,
        max_inner: 300,
        ..Default::default()
    };
    let res = nlp::solve_subproblem(lower, y0, &opts).ok()?;
    let viol = lower.violation(&res.w).ok()?;
    if viol <= feas_tol {
        let f = lower.objective(&res.w).ok()?;
        f.is_finite().then_some((res.w, f))
    } else {
        None
    }
}

/// One grid scan at fixed x: feasible nodes, grid-local minima, polish.
/// Returns polished (y, f) candidates sorted by objective.
fn scan_lower(
    prob: &BilevelProblem,
    x: &[f64],
    boxes: &[(f64, f64)],
    res: usize,
    feas_tol: f64,
    max_polish: usize,
) -> Result<Vec<(Vec<f64>, f64)>, OracleError> {
    let lower = FixedLower::new(prob, x, boxes);
    let grid = Grid::new(boxes, res);
    let total = grid.len();
    let mut stack = Vec::new();
    let mut y = Vec::with_capacity(prob.l);
    let mut fvals = vec![f64::INFINITY; total];
    let mut any_feasible = false;
    for idx in 0..total {
        grid.decode(idx, &mut y);
        let p = lower.point(&y);
        let mut viol = 0.0f64;
        let mut ok = true;
        for g in &lower.g {
            match g.eval_with(&p, &mut stack) {
                Ok(v) => viol = viol.max(v),
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok || viol > GRID_SLACK {
            continue;
        }
        match lower.f.eval_with(&p, &mut stack) {
            Ok(v) if v.is_finite() => {
                fvals[idx] = v;
                any_feasible = true;
            }
            _ => {}
        }
    }
    if !any_feasible {
        return Err(OracleError::EmptyFeasibleRegion);
    }

    // Grid-local minima among feasible nodes.
    let mut candidates: Vec<(usize, f64)> = Vec::new();
    for idx in 0..total {
        let f = fvals[idx];
        if !f.is_finite() {
            continue;
        }
        let mut is_min = true;
        'axes: for axis in 0..prob.l {
            for step in [-1isize, 1] {
                if let Some(nb) = grid.neighbor(idx, axis, step) {
                    if fvals[nb] < f {
                        is_min = false;
                        break 'axes;
                    }
                }
            }
        }
        if is_min {
            candidates.push((idx, f));
        }
    }
    candidates.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    candidates.truncate(max_polish);

    let mut polished: Vec<(Vec<f64>, f64)> = Vec::new();
    for (idx, node_f) in candidates {
        grid.decode(idx, &mut y);
        if let Some((py, pf)) = polish(&lower, &y, feas_tol) {
            polished.push((py, pf));
        } else if lower
            .violation(&y)
            .map(|v| v <= feas_tol)
            .unwrap_or(false)
        {
            // Polish failed but the node itself is feasible to tolerance.
            polished.push((y.clone(), node_f));
        }
    }
    if polished.is_empty() {
        return Err(OracleError::EmptyFeasibleRegion);
    }
    polished.sort_by(|a, b| a.1.total_cmp(&b.1).then(lex_cmp(&a.0, &b.0)));
    Ok(polished)
}

fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (ai, bi) in a.iter().zip(b) {
        match ai.total_cmp(bi) {
            std::cmp::Ordering::Equal => continue,
            other => return other,
        }
    }
    std::cmp::Ordering::Equal
}

fn cluster(points: Vec<(Vec<f64>, f64)>, radius: f64) -> Vec<(Vec<f64>, f64)> {
    let mut reps: Vec<(Vec<f64>, f64)> = Vec::new();
    for (y, f) in points {
        let dup = reps.iter().any(|(r, _)| {
            r.iter()
                .zip(&y)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
                <= radius
        });
        if !dup {
            reps.push((y, f));
        }
    }
    reps
}

/// The value function V(x) with its argmin clusters.
pub fn value_function(
    prob: &BilevelProblem,
    x: &[f64],
    spec: &GridSpec,
    cache_dir: Option<&Path>,
) -> Result<ValueFunction, OracleError> {
    if prob.l > 3 {
        return Err(OracleError::LowerDimensionTooLarge(prob.l));
    }
    let boxes = prob.y_box();
    let key = cache_key(&[
        &parse::pretty_print(prob),
        &format!("value@{x:?}"),
        &format!("{spec:?}"),
    ]);
    if let Some(hit) = cache_read::<ValueFunction>(cache_dir, key) {
        return Ok(hit);
    }

    let res = pick_resolution(spec.resolution, prob.l, NODE_BUDGET);
    let mut best = scan_lower(prob, x, &boxes, res, spec.feas_tol, MAX_POLISH)?;
    let mut value = best[0].1;
    let mut reps = cluster(
        best.drain(..)
            .filter(|(_, f)| *f <= value + 1e-6)
            .collect(),
        CLUSTER_RADIUS,
    );

    // Refine around each representative; the shrunken box is centered on
    // the representative so it stays a grid node.
    for round in 1..=spec.refine_rounds {
        let mut refined: Vec<(Vec<f64>, f64)> = Vec::new();
        for (rep, repf) in &reps {
            let factor = spec.shrink.powi(round as i32);
            let local: Vec<(f64, f64)> = boxes
                .iter()
                .zip(rep)
                .map(|(&(lo, hi), &c)| {
                    let half = (hi - lo) * factor / 2.0;
                    (c - half, c + half)
                })
                .collect();
            match scan_lower(prob, x, &local, res, spec.feas_tol, 4) {
                Ok(mut cands) => refined.push(cands.swap_remove(0)),
                Err(_) => refined.push((rep.clone(), *repf)),
            }
        }
        value = refined
            .iter()
            .map(|(_, f)| *f)
            .fold(f64::INFINITY, f64::min);
        refined.retain(|(_, f)| *f <= value + 1e-6);
        refined.sort_by(|a, b| lex_cmp(&a.0, &b.0));
        reps = cluster(refined, CLUSTER_RADIUS);
    }

    let mut argmins: Vec<Vec<f64>> = reps.into_iter().map(|(y, _)| y).collect();
    argmins.sort_by(|a, b| lex_cmp(a, b));
    let out = ValueFunction { value, argmins };
    cache_write(cache_dir, key, &out);
    Ok(out)
}

/// Global bilevel solve: outer grid over x, value function at every node,
/// upper objective minimized over bilevel-feasible pairs, then x-window
/// refinement around the incumbent (the y-box always stays full so the
/// dominance test remains honest).
pub fn global_solve(
    prob: &BilevelProblem,
    spec: &GridSpec,
    cache_dir: Option<&Path>,
) -> Result<GlobalSolution, OracleError> {
    if prob.d > 2 {
        return Err(OracleError::UpperDimensionTooLarge(prob.d));
    }
    if prob.l > 3 {
        return Err(OracleError::LowerDimensionTooLarge(prob.l));
    }
    let key = cache_key(&[&parse::pretty_print(prob), "global", &format!("{spec:?}")]);
    if let Some(hit) = cache_read::<GlobalSolution>(cache_dir, key) {
        return Ok(hit);
    }

    let y_boxes = prob.y_box();
    let res_x = if prob.d == 1 {
        odd_at_most(spec.resolution)
    } else {
        odd_at_most(41.min(spec.resolution))
    };
    let outer_nodes = (res_x as f64).powi(prob.d as i32) as usize;
    let res_y = pick_resolution(
        spec.resolution,
        prob.l,
        (GLOBAL_BUDGET / outer_nodes.max(1)).max(1000),
    );

    let mut x_boxes = prob.x_box();
    let mut incumbent: Option<GlobalSolution> = None;

    for _round in 0..=spec.refine_rounds {
        let grid = Grid::new(&x_boxes, res_x);
        let total = grid.len();
        let found: Vec<Option<GlobalSolution>> = (0..total)
            .into_par_iter()
            .map(|idx| {
                let mut x = Vec::with_capacity(prob.d);
                grid.decode(idx, &mut x);
                let cands = scan_lower(prob, &x, &y_boxes, res_y, spec.feas_tol, 8).ok()?;
                let v = cands[0].1;
                let mut best: Option<GlobalSolution> = None;
                for (y, f) in cands.iter().filter(|(_, f)| *f <= v + 1e-6) {
                    let p = Point::xy(&x, y);
                    let upper_ok = prob
                        .upper_constraints
                        .iter()
                        .all(|gj| matches!(gj.eval(&p), Ok(val) if val <= GRID_SLACK));
                    if !upper_ok {
                        continue;
                    }
                    let fv = match prob.upper_objective.eval(&p) {
                        Ok(v) if v.is_finite() => v,
                        _ => continue,
                    };
                    let better = match &best {
                        None => true,
                        Some(b) => fv < b.upper_value,
                    };
                    if better {
                        best = Some(GlobalSolution {
                            x: x.clone(),
                            y: y.clone(),
                            upper_value: fv,
                            lower_value: *f,
                        });
                    }
                }
                best
            })
            .collect();
        for cand in found.into_iter().flatten() {
            let better = match &incumbent {
                None => true,
                Some(inc) => {
                    cand.upper_value < inc.upper_value - 1e-12
                        || (cand.upper_value <= inc.upper_value + 1e-12
                            && lex_cmp(&cand.x, &inc.x).is_lt())
                }
            };
            if better {
                incumbent = Some(cand);
            }
        }
        let Some(inc) = &incumbent else {
            return Err(OracleError::NoBilevelFeasiblePair);
        };
        // Shrink the x window around the incumbent for the next round.
        let full = prob.x_box();
        x_boxes = full
            .iter()
            .zip(&inc.x)
            .map(|(&(lo, hi), &c)| {
                let half = (hi - lo) * spec.shrink / 2.0;
                (c - half, c + half)
            })
            .collect();
        // Window shrinks each round because it is rebuilt around the new
        // incumbent from the previous (already shrunken) spacing; keep the
        // original bounds as a hard clamp.
        x_boxes = x_boxes
            .iter()
            .zip(&full)
            .map(|(&(lo, hi), &(flo, fhi))| (lo.max(flo), hi.min(fhi)))
            .collect();
    }

    let out = incumbent.ok_or(OracleError::NoBilevelFeasiblePair)?;
    cache_write(cache_dir, key, &out);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Finite-difference audits.

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub samples: usize,
    pub skipped: usize,
}

impl FdReport {
    fn absorb(&mut self, rel: f64) {
        self.max_rel_error = self.max_rel_error.max(rel);
        self.samples += 1;
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// First-order audit: symbolic gradients of `e` against central differences
/// with step 1e-6, at `samples` random points inside the boxes.
pub fn fd_check_expr(
    e: &Arc<Expr>,
    d: usize,
    l: usize,
    x_box: &[(f64, f64)],
    y_box: &[(f64, f64)],
    samples: usize,
    seed: u64,
) -> FdReport {
    let mut rng = Xorshift64Star::new(seed);
    let mut report = FdReport::default();
    let grads_x = expr::gradient_block(e, Block::X, d);
    let grads_y = expr::gradient_block(e, Block::Y, l);
    const H: f64 = 1e-6;
    for _ in 0..samples {
        let x: Vec<f64> = x_box.iter().map(|&(lo, hi)| rng.range(lo, hi)).collect();
        let y: Vec<f64> = y_box.iter().map(|&(lo, hi)| rng.range(lo, hi)).collect();
        let mut ok = true;
        for (block, dim, grads) in [(Block::X, d, &grads_x), (Block::Y, l, &grads_y)] {
            for k in 0..dim {
                let mut xp = x.clone();
                let mut yp = y.clone();
                let mut xm = x.clone();
                let mut ym = y.clone();
                match block {
                    Block::X => {
                        xp[k] += H;
                        xm[k] -= H;
                    }
                    _ => {
                        yp[k] += H;
                        ym[k] -= H;
                    }
                }
                let fp = e.eval(&Point::xy(&xp, &yp));
                let fm = e.eval(&Point::xy(&xm, &ym));
                let an = grads[k].eval(&Point::xy(&x, &y));
                match (fp, fm, an) {
                    (Ok(fp), Ok(fm), Ok(an)) => {
                        report.absorb(rel_err(an, (fp - fm) / (2.0 * H)));
                    }
                    _ => {
                        ok = false;
                    }
                }
            }
        }
        if !ok {
            report.skipped += 1;
        }
    }
    report
}

/// Second-order audit: symbolic second-derivative blocks against central
/// differences of the symbolic gradients with step 1e-4.
pub fn fd_check_expr_second(
    e: &Arc<Expr>,
    d: usize,
    l: usize,
    x_box: &[(f64, f64)],
    y_box: &[(f64, f64)],
    samples: usize,
    seed: u64,
) -> FdReport {
    let mut rng = Xorshift64Star::new(seed);
    let mut report = FdReport::default();
    const H: f64 = 1e-4;
    let blocks = [(Block::X, d), (Block::Y, l)];
    for _ in 0..samples {
        let x: Vec<f64> = x_box.iter().map(|&(lo, hi)| rng.range(lo, hi)).collect();
        let y: Vec<f64> = y_box.iter().map(|&(lo, hi)| rng.range(lo, hi)).collect();
        let mut ok = true;
        for &(rb, rdim) in &blocks {
            for i in 0..rdim {
                let gi = expr::diff(e, rb, i);
                for &(cb, cdim) in &blocks {
                    for j in 0..cdim {
                        let hij = expr::diff(&gi, cb, j);
                        let mut xp = x.clone();
                        let mut yp = y.clone();
                        let mut xm = x.clone();
                        let mut ym = y.clone();
                        match cb {
                            Block::X => {
                                xp[j] += H;
                                xm[j] -= H;
                            }
                            _ => {
                                yp[j] += H;
                                ym[j] -= H;
                            }
                        }
                        let gp = gi.eval(&Point::xy(&xp, &yp));
                        let gm = gi.eval(&Point::xy(&xm, &ym));
                        let an = hij.eval(&Point::xy(&x, &y));
                        match (gp, gm, an) {
                            (Ok(gp), Ok(gm), Ok(an)) => {
                                report.absorb(rel_err(an, (gp - gm) / (2.0 * H)));
                            }
                            _ => ok = false,
                        }
                    }
                }
            }
        }
        if !ok {
            report.skipped += 1;
        }
    }
    report
}

/// Shift-function audit. The step is tied to the curvature scale
/// sqrt(t^2 + 4 r rho): a fixed step loses the derivative entirely when
/// r*rho is tiny, while the scaled step keeps both truncation and rounding
/// far below the tolerance.
pub fn fd_check_shift(samples: usize, seed: u64) -> FdReport {
    let mut rng = Xorshift64Star::new(seed);
    let mut report = FdReport::default();
    for _ in 0..samples {
        let g = rng.range(-10.0, 10.0);
        let s = rng.range(0.0, 10.0);
        let r = 10f64.powf(rng.range(-8.0, 0.0));
        let rho = 10f64.powf(rng.range(-3.0, 1.0));
        let Ok(dv) = smoothing::shift_derivatives(g, s, r, rho) else {
            report.skipped += 1;
            continue;
        };
        let t = rho * s + g;
        let h = 1e-4 * (t * t + 4.0 * r * rho).sqrt().max(1e-300);
        let hs = h / rho;
        let at = |gg: f64, ss: f64| smoothing::shift(gg, ss, r, rho).unwrap();
        let (zp, zm) = (at(g + h, s), at(g - h, s));
        let (sp, sm) = (at(g, s + hs), at(g, s - hs));
        report.absorb(rel_err(dv.dz_dg, (zp.z - zm.z) / (2.0 * h)));
        report.absorb(rel_err(dv.dk_dg, (zp.kappa - zm.kappa) / (2.0 * h)));
        report.absorb(rel_err(dv.dz_ds, (sp.z - sm.z) / (2.0 * hs)));
        report.absorb(rel_err(dv.dk_ds, (sp.kappa - sm.kappa) / (2.0 * hs)));
    }
    report
}

/// First- and second-order audits over every expression of a problem.
pub fn fd_check_problem(
    prob: &BilevelProblem,
    points_per_expr: usize,
    seed: u64,
) -> (FdReport, FdReport) {
    let x_box = prob.x_box();
    let y_box = prob.y_box();
    let mut first = FdReport::default();
    let mut second = FdReport::default();
    let exprs: Vec<&Arc<Expr>> = [&prob.upper_objective, &prob.lower_objective]
        .into_iter()
        .chain(prob.upper_constraints.iter())
        .chain(prob.lower_constraints.iter())
        .collect();
    for (i, e) in exprs.iter().enumerate() {
        let r1 = fd_check_expr(
            e,
            prob.d,
            prob.l,
            &x_box,
            &y_box,
            points_per_expr,
            seed ^ (i as u64).wrapping_mul(0x9e3779b97f4a7c15),
        );
        let r2 = fd_check_expr_second(
            e,
            prob.d,
            prob.l,
            &x_box,
            &y_box,
            points_per_expr,
            seed ^ (i as u64).wrapping_mul(0xd1b54a32d192ed03),
        );
        first.max_rel_error = first.max_rel_error.max(r1.max_rel_error);
        first.samples += r1.samples;
        first.skipped += r1.skipped;
        second.max_rel_error = second.max_rel_error.max(r2.max_rel_error);
        second.samples += r2.samples;
        second.skipped += r2.skipped;
    }
    (first, second)
}

// ---------------------------------------------------------------------------
// Disk cache.

fn cache_key(parts: &[&str]) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for p in parts {
        p.hash(&mut h);
    }
    h.finish()
}

fn cache_read<T: for<'de> Deserialize<'de>>(dir: Option<&Path>, key: u64) -> Option<T> {
    let dir = dir?;
    let path = dir.join(format!("{key:016x}.json"));
    let text = std::fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

fn cache_write<T: Serialize>(dir: Option<&Path>, key: u64, value: &T) {
    let Some(dir) = dir else { return };
    if std::fs::create_dir_all(dir).is_err() {
        return;
    }
    let path = dir.join(format!("{key:016x}.json"));
    if let Ok(text) = serde_json::to_string_pretty(value) {
        let _ = std::fs::write(path, text);
    }
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
meta { xbox = -1, 1; ybox = -4, 4, -4, 4; }
";

    fn isolated() -> BilevelProblem {
        parse_problem(ISOLATED_SRC).unwrap()
    }

    #[test]
    fn value_function_finds_both_argmins_at_zero() {
        let vf = value_function(&isolated(), &[0.0], &GridSpec::default(), None).unwrap();
        assert!(
            (vf.value - 6.640625).abs() <= 1e-6,
            "V(0) = {}",
            vf.value
        );
        assert_eq!(vf.argmins.len(), 2, "{:?}", vf.argmins);
        let near = |p: &[f64], q: [f64; 2]| {
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt() <= 1e-3
        };
        assert!(near(&vf.argmins[0], [-2.0, 0.0]), "{:?}", vf.argmins);
        assert!(near(&vf.argmins[1], [2.5, 1.5]), "{:?}", vf.argmins);
    }

    #[test]
    fn value_function_single_argmin_left_of_zero() {
        let vf = value_function(&isolated(), &[-0.5], &GridSpec::default(), None).unwrap();
        assert_eq!(vf.argmins.len(), 1, "{:?}", vf.argmins);
        let p = &vf.argmins[0];
        assert!(((p[0] + 2.0).powi(2) + p[1].powi(2)).sqrt() <= 1e-3);
    }

    #[test]
    fn value_function_is_continuous_across_zero() {
        // Both branches meet at x = 0; the kink slopes are -25/8 and 11/8,
        // so |V(h) - V(0)| stays within ~4|h| of each other near zero.
        let spec = GridSpec::default();
        let v0 = value_function(&isolated(), &[0.0], &spec, None)
            .unwrap()
            .value;
        for h in [-0.01, 0.01] {
            let vh = value_function(&isolated(), &[h], &spec, None).unwrap().value;
            assert!((vh - v0).abs() <= 4.0 * h.abs() + 1e-4, "V({h}) = {vh}");
        }
    }

    #[test]
    fn strictly_convex_unconstrained_lower_matches_analytic_minimizer() {
        let prob = parse_problem(
            "var x[1]; var y[2]; upper{ minimize x[1]; } \
             lower{ minimize (y[1]-0.3)^2 + 2*(y[2]+0.7)^2; } \
             meta { ybox = -2, 2, -2, 2; }",
        )
        .unwrap();
        let vf = value_function(&prob, &[0.0], &GridSpec::default(), None).unwrap();
        assert_eq!(vf.argmins.len(), 1);
        assert!((vf.argmins[0][0] - 0.3).abs() <= 1e-6);
        assert!((vf.argmins[0][1] + 0.7).abs() <= 1e-6);
        assert!(vf.value.abs() <= 1e-9);
    }

    #[test]
    fn empty_feasible_region_is_reported() {
        let prob = parse_problem(
            "var x[1]; var y[1]; upper{ minimize x[1]; } \
             lower{ minimize y[1]^2; y[1]^2 + 1 <= 0; } meta { ybox = -2, 2; }",
        )
        .unwrap();
        let err = value_function(&prob, &[0.0], &GridSpec::default(), None).unwrap_err();
        assert!(matches!(err, OracleError::EmptyFeasibleRegion));
    }

    #[test]
    fn global_solve_recovers_the_known_solution() {
        let sol = global_solve(&isolated(), &GridSpec::default(), None).unwrap();
        assert!(sol.x[0].abs() <= 1e-3, "{sol:?}");
        assert!((sol.y[0] + 2.0).abs() <= 1e-3, "{sol:?}");
        assert!(sol.y[1].abs() <= 1e-3, "{sol:?}");
        assert!((sol.upper_value + 6.0).abs() <= 1e-3, "{sol:?}");
    }

    #[test]
    fn global_solve_on_the_minimal_toy() {
        let prob = parse_problem(
            "var x[1]; var y[1]; upper{ minimize x[1]^2 + y[1]^2; } \
             lower{ minimize (y[1]-x[1])^2; } meta { xbox = -2, 2; ybox = -2, 2; }",
        )
        .unwrap();
        let sol = global_solve(&prob, &GridSpec::default(), None).unwrap();
        assert!(sol.x[0].abs() <= 1e-6, "{sol:?}");
        assert!(sol.y[0].abs() <= 1e-6, "{sol:?}");
        assert!(sol.upper_value.abs() <= 1e-9);
    }

    #[test]
    fn cache_round_trips() {
        let dir = std::env::temp_dir().join("bilevel-oracle-cache-test");
        let _ = std::fs::remove_dir_all(&dir);
        let a = value_function(&isolated(), &[0.25], &GridSpec::default(), Some(&dir)).unwrap();
        let b = value_function(&isolated(), &[0.25], &GridSpec::default(), Some(&dir)).unwrap();
        assert_eq!(a.value, b.value);
        assert_eq!(a.argmins, b.argmins);
        let entries = std::fs::read_dir(&dir).unwrap().count();
        assert_eq!(entries, 1);
    }

    #[test]
    fn fd_polynomials_are_near_machine_accurate() {
        let prob = isolated();
        let r = fd_check_expr(
            &prob.lower_objective,
            1,
            2,
            &[(-1.0, 1.0)],
            &[(-2.0, 2.0), (-2.0, 2.0)],
            200,
            9,
        );
        assert!(r.max_rel_error <= 1e-9, "{r:?}");
        assert_eq!(r.skipped, 0);
    }

    #[test]
    fn fd_constant_is_exact() {
        let c = Expr::constant(4.25);
        let r = fd_check_expr(&c, 1, 1, &[(-1.0, 1.0)], &[(-1.0, 1.0)], 50, 3);
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn fd_shift_stays_within_tolerance() {
        let r = fd_check_shift(1000, 42);
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
    }

    #[test]
    fn fd_problem_sweep_meets_first_and_second_order_bounds() {
        let (first, second) = fd_check_problem(&isolated(), 10, 123);
        assert!(first.max_rel_error <= 1e-6, "{first:?}");
        assert!(second.max_rel_error <= 1e-5, "{second:?}");
    }
}
