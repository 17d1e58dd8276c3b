//! Stationarity certification for feasible points of the SVF reformulation.
//!
//! At a feasible point (x, y, u, s) the lower constraints split into
//!
//! - I_y: active at y (|g_i(x,y)| <= tau),
//! - I_g: active at u with s_i > tau,
//! - I_0: biactive at u (g_i(x,u) and s_i both within tau of zero),
//! - I_s: inactive at u (g_i(x,u) < -tau).
//!
//! A certificate consists of multipliers (lambda_0, lambda, lambda_G,
//! mu_phi, mu_g) solving the stationarity system: an x-row, a y-row, a
//! u-row and orthogonality rows on I_g, plus a class-specific sign
//! condition on the biactive set with a = mu_g_i and
//! b = grad_y g_i(x,u)' mu_phi:
//!
//! - W: no condition,
//! - C: a*b >= 0 (same-sign patterns),
//! - M: a > 0 and b > 0, or a*b = 0,
//! - S: a >= 0 and b >= 0.
//!
//! W and S reduce to one linear feasibility problem; C enumerates the two
//! same-sign patterns and M the three patterns {a = 0}, {b = 0},
//! {a, b >= 0} per biactive index. All subproblems go through the
//! deterministic phase-one simplex; a phase-two pass minimizes the total
//! nonnegative multiplier mass so the returned certificate is canonical.

use thiserror::Error;

use crate::expr::{self, Block, EvalError, Point};
use crate::problem::BilevelProblem;
use crate::reformulate::{build_svf, mpec_residual};
use crate::simplex::{self, LpOutcome, LpProblem};

#[derive(Debug, Error)]
pub enum StationarityError {
    #[error("point is not feasible for the reformulation: residual {residual:e} > tau {tau:e}")]
    InfeasiblePoint { residual: f64, tau: f64 },
    #[error("y is not feasible for the lower level: violation {0:e}")]
    LowerInfeasible(f64),
    #[error("biactive set has {0} indices; enumeration is capped at 10")]
    TooManyBiactive(usize),
    #[error("certificate precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Lp(#[from] simplex::LpError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum StationarityClass {
    None,
    W,
    C,
    M,
    S,
}

impl StationarityClass {
    pub fn name(self) -> &'static str {
        match self {
            StationarityClass::None => "none",
            StationarityClass::W => "W",
            StationarityClass::C => "C",
            StationarityClass::M => "M",
            StationarityClass::S => "S",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "W" | "w" => Some(StationarityClass::W),
            "C" | "c" => Some(StationarityClass::C),
            "M" | "m" => Some(StationarityClass::M),
            "S" | "s" => Some(StationarityClass::S),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IndexSets {
    pub active_y: Vec<usize>,
    pub active_g: Vec<usize>,
    pub biactive: Vec<usize>,
    pub inactive: Vec<usize>,
    pub active_upper: Vec<usize>,
    pub tau_act: f64,
}

impl IndexSets {
    /// Active set at u: I_g union I_0, ascending.
    pub fn active_u(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .active_g
            .iter()
            .chain(&self.biactive)
            .copied()
            .collect();
        v.sort_unstable();
        v
    }
}

/// Residuals of the individual certificate conditions (infinity norms).
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct ConditionResiduals {
    pub stationarity_x: f64,
    pub stationarity_y: f64,
    pub stationarity_u: f64,
    /// Orthogonality rows on I_g and the mu_g = 0 rows on I_s.
    pub orthogonality: f64,
    /// |lambda_0 * (f(x,y) - f(x,u))|.
    pub dominance_complementarity: f64,
    /// Violation of the class-specific sign condition on I_0.
    pub sign_condition: f64,
}

impl ConditionResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity_x
            .max(self.stationarity_y)
            .max(self.stationarity_u)
            .max(self.orthogonality)
            .max(self.dominance_complementarity)
            .max(self.sign_condition)
    }
}

#[derive(Debug, Clone)]
pub struct StationarityCertificate {
    pub class: StationarityClass,
    pub lambda0: f64,
    /// Per lower constraint at y; zero off the active set.
    pub lambda: Vec<f64>,
    /// Per upper constraint; zero off the active set.
    pub lambda_upper: Vec<f64>,
    pub mu_phi: Vec<f64>,
    /// Per lower constraint at u; zero on I_s.
    pub mu_g: Vec<f64>,
    pub index_sets: IndexSets,
    pub residuals: ConditionResiduals,
    /// Phase-one infeasibility of the best attempt when class is None.
    pub infeasibility: f64,
}

impl StationarityCertificate {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "class": self.class.name(),
            "lambda0": self.lambda0,
            "lambda": self.lambda,
            "lambda_upper": self.lambda_upper,
            "mu_phi": self.mu_phi,
            "mu_g": self.mu_g,
            "index_sets": {
                "active_y": self.index_sets.active_y,
                "active_g": self.index_sets.active_g,
                "biactive": self.index_sets.biactive,
                "inactive": self.index_sets.inactive,
                "active_upper": self.index_sets.active_upper,
                "tau_act": self.index_sets.tau_act,
            },
            "residuals": self.residuals,
            "infeasibility": self.infeasibility,
        })
    }
}

/// The candidate point for certification.
#[derive(Debug, Clone)]
pub struct SvfPoint {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub u: Vec<f64>,
    pub s: Vec<f64>,
}

/// Numeric derivative data of the problem at the point.
struct Blocks {
    grad1_upper: Vec<f64>,
    grad2_upper: Vec<f64>,
    grad1_f_y: Vec<f64>,
    grad2_f_y: Vec<f64>,
    grad1_f_u: Vec<f64>,
    grad2_f_u: Vec<f64>,
    grad1_g_y: Vec<Vec<f64>>,
    grad2_g_y: Vec<Vec<f64>>,
    grad1_g_u: Vec<Vec<f64>>,
    grad2_g_u: Vec<Vec<f64>>,
    grad1_big_g: Vec<Vec<f64>>,
    grad2_big_g: Vec<Vec<f64>>,
    /// cross[j][k] = d^2 L / (d u_j d x_k), L = f + sum_{active u} s_i g_i.
    cross: Vec<Vec<f64>>,
    /// huu[j][k] = d^2 L / (d u_j d u_k).
    huu: Vec<Vec<f64>>,
    dominance_gap: f64,
}

fn eval_grad(
    e: &std::sync::Arc<crate::expr::Expr>,
    block: Block,
    dim: usize,
    p: &Point,
) -> Result<Vec<f64>, EvalError> {
    expr::gradient_block(e, block, dim)
        .iter()
        .map(|g| g.eval(p))
        .collect()
}

fn evaluate_blocks(
    prob: &BilevelProblem,
    pt: &SvfPoint,
    sets: &IndexSets,
) -> Result<Blocks, StationarityError> {
    let p_y = Point::xy(&pt.x, &pt.y);
    let p_u = Point::xy(&pt.x, &pt.u);
    let (d, l) = (prob.d, prob.l);

    let grad1_upper = eval_grad(&prob.upper_objective, Block::X, d, &p_y)?;
    let grad2_upper = eval_grad(&prob.upper_objective, Block::Y, l, &p_y)?;
    let grad1_f_y = eval_grad(&prob.lower_objective, Block::X, d, &p_y)?;
    let grad2_f_y = eval_grad(&prob.lower_objective, Block::Y, l, &p_y)?;
    let grad1_f_u = eval_grad(&prob.lower_objective, Block::X, d, &p_u)?;
    let grad2_f_u = eval_grad(&prob.lower_objective, Block::Y, l, &p_u)?;

    let mut grad1_g_y = Vec::new();
    let mut grad2_g_y = Vec::new();
    let mut grad1_g_u = Vec::new();
    let mut grad2_g_u = Vec::new();
    for g in &prob.lower_constraints {
        grad1_g_y.push(eval_grad(g, Block::X, d, &p_y)?);
        grad2_g_y.push(eval_grad(g, Block::Y, l, &p_y)?);
        grad1_g_u.push(eval_grad(g, Block::X, d, &p_u)?);
        grad2_g_u.push(eval_grad(g, Block::Y, l, &p_u)?);
    }
    let mut grad1_big_g = Vec::new();
    let mut grad2_big_g = Vec::new();
    for gj in &prob.upper_constraints {
        grad1_big_g.push(eval_grad(gj, Block::X, d, &p_y)?);
        grad2_big_g.push(eval_grad(gj, Block::Y, l, &p_y)?);
    }

    // Second-derivative blocks of the lower Lagrangian at (x, u).
    let mut cross = vec![vec![0.0; d]; l];
    let mut huu = vec![vec![0.0; l]; l];
    let hxf = expr::hessian_block(&prob.lower_objective, Block::Y, l, Block::X, d);
    let hyf = expr::hessian_block(&prob.lower_objective, Block::Y, l, Block::Y, l);
    for j in 0..l {
        for k in 0..d {
            cross[j][k] = hxf[j][k].eval(&p_u)?;
        }
        for k in 0..l {
            huu[j][k] = hyf[j][k].eval(&p_u)?;
        }
    }
    for &i in sets.active_u().iter() {
        let si = pt.s[i];
        if si == 0.0 {
            continue;
        }
        let hxg = expr::hessian_block(&prob.lower_constraints[i], Block::Y, l, Block::X, d);
        let hyg = expr::hessian_block(&prob.lower_constraints[i], Block::Y, l, Block::Y, l);
        for j in 0..l {
            for k in 0..d {
                cross[j][k] += si * hxg[j][k].eval(&p_u)?;
            }
            for k in 0..l {
                huu[j][k] += si * hyg[j][k].eval(&p_u)?;
            }
        }
    }

    let dominance_gap = prob.lower_objective.eval(&p_y)? - prob.lower_objective.eval(&p_u)?;

    Ok(Blocks {
        grad1_upper,
        grad2_upper,
        grad1_f_y,
        grad2_f_y,
        grad1_f_u,
        grad2_f_u,
        grad1_g_y,
        grad2_g_y,
        grad1_g_u,
        grad2_g_u,
        grad1_big_g,
        grad2_big_g,
        cross,
        huu,
        dominance_gap,
    })
}

/// Partition the constraints at a feasible point; |g| <= tau counts as
/// active and s <= tau counts as zero (closed classification).
pub fn index_sets(
    prob: &BilevelProblem,
    pt: &SvfPoint,
    tau_act: f64,
) -> Result<IndexSets, StationarityError> {
    let inst = build_svf(prob);
    let w = inst.pack(&pt.x, &pt.y, Some(&pt.u), &pt.s);
    let res = mpec_residual(&inst, &w)?;
    if res.max() > tau_act {
        return Err(StationarityError::InfeasiblePoint {
            residual: res.max(),
            tau: tau_act,
        });
    }
    let p_y = Point::xy(&pt.x, &pt.y);
    let p_u = Point::xy(&pt.x, &pt.u);
    let mut sets = IndexSets {
        active_y: Vec::new(),
        active_g: Vec::new(),
        biactive: Vec::new(),
        inactive: Vec::new(),
        active_upper: Vec::new(),
        tau_act,
    };
    for (i, g) in prob.lower_constraints.iter().enumerate() {
        if g.eval(&p_y)?.abs() <= tau_act {
            sets.active_y.push(i);
        }
        let gu = g.eval(&p_u)?;
        if gu.abs() <= tau_act {
            if pt.s[i] > tau_act {
                sets.active_g.push(i);
            } else {
                sets.biactive.push(i);
            }
        } else {
            sets.inactive.push(i);
        }
    }
    for (j, gj) in prob.upper_constraints.iter().enumerate() {
        if gj.eval(&p_y)?.abs() <= tau_act {
            sets.active_upper.push(j);
        }
    }
    Ok(sets)
}

/// Column layout of the multiplier LP.
struct Layout {
    lambda0: Option<usize>,
    lambda: Vec<(usize, usize)>,
    lambda_upper: Vec<(usize, usize)>,
    /// First of l consecutive mu_phi columns.
    mu_phi: usize,
    mu_g: Vec<(usize, usize)>,
    num_vars: usize,
    l: usize,
}

fn layout(sets: &IndexSets, l: usize, dominance_active: bool) -> Layout {
    let mut col = 0;
    let lambda0 = dominance_active.then(|| {
        let c = col;
        col += 1;
        c
    });
    let lambda: Vec<(usize, usize)> = sets
        .active_y
        .iter()
        .map(|&i| {
            let c = col;
            col += 1;
            (i, c)
        })
        .collect();
    let lambda_upper: Vec<(usize, usize)> = sets
        .active_upper
        .iter()
        .map(|&j| {
            let c = col;
            col += 1;
            (j, c)
        })
        .collect();
    let mu_phi = col;
    col += l;
    let mu_g: Vec<(usize, usize)> = sets
        .active_u()
        .iter()
        .map(|&i| {
            let c = col;
            col += 1;
            (i, c)
        })
        .collect();
    Layout {
        lambda0,
        lambda,
        lambda_upper,
        mu_phi,
        mu_g,
        num_vars: col,
        l,
    }
}

/// Assemble the equality system shared by all classes. The objective
/// minimizes the total nonnegative multiplier mass.
fn base_lp(bl: &Blocks, lay: &Layout, sets: &IndexSets, d: usize) -> LpProblem {
    let n = lay.num_vars;
    let mut nonneg = vec![false; n];
    let mut objective = vec![0.0; n];
    if let Some(c) = lay.lambda0 {
        nonneg[c] = true;
        objective[c] = 1.0;
    }
    for &(_, c) in lay.lambda.iter().chain(&lay.lambda_upper) {
        nonneg[c] = true;
        objective[c] = 1.0;
    }

    let mut eq_rows = Vec::new();
    // x-rows
    for k in 0..d {
        let mut row = vec![0.0; n];
        if let Some(c) = lay.lambda0 {
            row[c] = bl.grad1_f_y[k] - bl.grad1_f_u[k];
        }
        for &(i, c) in &lay.lambda {
            row[c] = bl.grad1_g_y[i][k];
        }
        for &(j, c) in &lay.lambda_upper {
            row[c] = bl.grad1_big_g[j][k];
        }
        for jj in 0..lay.l {
            row[lay.mu_phi + jj] = bl.cross[jj][k];
        }
        for &(i, c) in &lay.mu_g {
            row[c] = bl.grad1_g_u[i][k];
        }
        eq_rows.push((row, -bl.grad1_upper[k]));
    }
    // y-rows
    for k in 0..lay.l {
        let mut row = vec![0.0; n];
        if let Some(c) = lay.lambda0 {
            row[c] = bl.grad2_f_y[k];
        }
        for &(i, c) in &lay.lambda {
            row[c] = bl.grad2_g_y[i][k];
        }
        for &(j, c) in &lay.lambda_upper {
            row[c] = bl.grad2_big_g[j][k];
        }
        eq_rows.push((row, -bl.grad2_upper[k]));
    }
    // u-rows
    for k in 0..lay.l {
        let mut row = vec![0.0; n];
        if let Some(c) = lay.lambda0 {
            row[c] = -bl.grad2_f_u[k];
        }
        for jj in 0..lay.l {
            row[lay.mu_phi + jj] = bl.huu[jj][k];
        }
        for &(i, c) in &lay.mu_g {
            row[c] = bl.grad2_g_u[i][k];
        }
        eq_rows.push((row, 0.0));
    }
    // orthogonality rows on I_g
    for &i in &sets.active_g {
        let mut row = vec![0.0; n];
        for jj in 0..lay.l {
            row[lay.mu_phi + jj] = bl.grad2_g_u[i][jj];
        }
        eq_rows.push((row, 0.0));
    }

    LpProblem {
        num_vars: n,
        eq_rows,
        le_rows: Vec::new(),
        nonneg,
        objective,
    }
}

/// Per-biactive-index sign pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SignPattern {
    BothNonneg,
    BothNonpos,
    AZero,
    BZero,
}

fn add_pattern_rows(lp: &mut LpProblem, lay: &Layout, bl: &Blocks, i: usize, pat: SignPattern) {
    let col_a = lay
        .mu_g
        .iter()
        .find(|(ci, _)| *ci == i)
        .map(|(_, c)| *c)
        .expect("biactive index has a mu_g column");
    let mut a_row = vec![0.0; lp.num_vars];
    a_row[col_a] = 1.0;
    let mut b_row = vec![0.0; lp.num_vars];
    for jj in 0..lay.l {
        b_row[lay.mu_phi + jj] = bl.grad2_g_u[i][jj];
    }
    match pat {
        SignPattern::BothNonneg => {
            lp.le_rows.push((a_row.iter().map(|v| -v).collect(), 0.0));
            lp.le_rows.push((b_row.iter().map(|v| -v).collect(), 0.0));
        }
        SignPattern::BothNonpos => {
            lp.le_rows.push((a_row, 0.0));
            lp.le_rows.push((b_row, 0.0));
        }
        SignPattern::AZero => lp.eq_rows.push((a_row, 0.0)),
        SignPattern::BZero => lp.eq_rows.push((b_row, 0.0)),
    }
}

fn patterns_for_class(class: StationarityClass, count: usize) -> Vec<Vec<SignPattern>> {
    use SignPattern::*;
    match class {
        StationarityClass::W => vec![vec![]],
        StationarityClass::S => vec![vec![BothNonneg; count]],
        StationarityClass::C => cartesian(&[BothNonneg, BothNonpos], count),
        StationarityClass::M => cartesian(&[AZero, BZero, BothNonneg], count),
        StationarityClass::None => vec![],
    }
}

fn cartesian(choices: &[SignPattern], count: usize) -> Vec<Vec<SignPattern>> {
    let mut out: Vec<Vec<SignPattern>> = vec![vec![]];
    for _ in 0..count {
        let mut next = Vec::with_capacity(out.len() * choices.len());
        for prefix in &out {
            for &c in choices {
                let mut v = prefix.clone();
                v.push(c);
                next.push(v);
            }
        }
        out = next;
    }
    out
}

/// Search for multipliers establishing `mode` at a feasible point; weaker
/// classes are tried when the requested one is refuted, so the result is
/// the strongest certified class not above `mode`.
pub fn certify(
    prob: &BilevelProblem,
    pt: &SvfPoint,
    mode: StationarityClass,
    tau: f64,
) -> Result<StationarityCertificate, StationarityError> {
    let sets = index_sets(prob, pt, tau)?;
    if sets.biactive.len() > 10 && matches!(mode, StationarityClass::C | StationarityClass::M) {
        return Err(StationarityError::TooManyBiactive(sets.biactive.len()));
    }
    let bl = evaluate_blocks(prob, pt, &sets)?;
    let dominance_active = bl.dominance_gap.abs() <= tau;
    let lay = layout(&sets, prob.l, dominance_active);

    let classes: Vec<StationarityClass> = [
        StationarityClass::S,
        StationarityClass::M,
        StationarityClass::C,
        StationarityClass::W,
    ]
    .into_iter()
    .filter(|c| *c <= mode)
    .collect();

    let mut best_infeasibility = f64::INFINITY;
    for class in classes {
        for pats in patterns_for_class(class, sets.biactive.len()) {
            let mut lp = base_lp(&bl, &lay, &sets, prob.d);
            for (&i, &pat) in sets.biactive.iter().zip(&pats) {
                add_pattern_rows(&mut lp, &lay, &bl, i, pat);
            }
            match simplex::solve(&lp)? {
                LpOutcome::Feasible { v, .. } => {
                    return Ok(assemble_certificate(prob, &sets, &bl, &lay, &v, class));
                }
                LpOutcome::Infeasible { phase_one_value } => {
                    best_infeasibility = best_infeasibility.min(phase_one_value);
                }
            }
        }
    }

    Ok(StationarityCertificate {
        class: StationarityClass::None,
        lambda0: 0.0,
        lambda: vec![0.0; prob.m],
        lambda_upper: vec![0.0; prob.p],
        mu_phi: vec![0.0; prob.l],
        mu_g: vec![0.0; prob.m],
        residuals: ConditionResiduals {
            stationarity_x: best_infeasibility,
            stationarity_y: best_infeasibility,
            stationarity_u: best_infeasibility,
            orthogonality: 0.0,
            dominance_complementarity: 0.0,
            sign_condition: 0.0,
        },
        index_sets: sets,
        infeasibility: best_infeasibility,
    })
}

fn assemble_certificate(
    prob: &BilevelProblem,
    sets: &IndexSets,
    bl: &Blocks,
    lay: &Layout,
    v: &[f64],
    class: StationarityClass,
) -> StationarityCertificate {
    let lambda0 = lay.lambda0.map(|c| v[c]).unwrap_or(0.0);
    let mut lambda = vec![0.0; prob.m];
    for &(i, c) in &lay.lambda {
        lambda[i] = v[c];
    }
    let mut lambda_upper = vec![0.0; prob.p];
    for &(j, c) in &lay.lambda_upper {
        lambda_upper[j] = v[c];
    }
    let mu_phi: Vec<f64> = (0..prob.l).map(|j| v[lay.mu_phi + j]).collect();
    let mut mu_g = vec![0.0; prob.m];
    for &(i, c) in &lay.mu_g {
        mu_g[i] = v[c];
    }
    let residuals = condition_residuals(
        bl, sets, prob.d, prob.l, lambda0, &lambda, &lambda_upper, &mu_phi, &mu_g, class,
    );
    StationarityCertificate {
        class,
        lambda0,
        lambda,
        lambda_upper,
        mu_phi,
        mu_g,
        index_sets: sets.clone(),
        residuals,
        infeasibility: 0.0,
    }
}

/// Evaluate the certificate conditions for given multipliers. This is the
/// independent verification path: it recomputes every row from the symbolic
/// derivative blocks and takes no shortcuts through the LP.
#[allow(clippy::too_many_arguments)]
pub fn verify_multipliers(
    prob: &BilevelProblem,
    pt: &SvfPoint,
    tau_act: f64,
    lambda0: f64,
    lambda: &[f64],
    lambda_upper: &[f64],
    mu_phi: &[f64],
    mu_g: &[f64],
    class: StationarityClass,
) -> Result<ConditionResiduals, StationarityError> {
    let sets = index_sets(prob, pt, tau_act)?;
    let bl = evaluate_blocks(prob, pt, &sets)?;
    Ok(condition_residuals(
        &bl, &sets, prob.d, prob.l, lambda0, lambda, lambda_upper, mu_phi, mu_g, class,
    ))
}

#[allow(clippy::too_many_arguments)]
fn condition_residuals(
    bl: &Blocks,
    sets: &IndexSets,
    d: usize,
    l: usize,
    lambda0: f64,
    lambda: &[f64],
    lambda_upper: &[f64],
    mu_phi: &[f64],
    mu_g: &[f64],
    class: StationarityClass,
) -> ConditionResiduals {
    let active_u = sets.active_u();

    let mut rx = 0.0f64;
    for k in 0..d {
        let mut v = bl.grad1_upper[k] + lambda0 * (bl.grad1_f_y[k] - bl.grad1_f_u[k]);
        for &i in &sets.active_y {
            v += lambda[i] * bl.grad1_g_y[i][k];
        }
        for &j in &sets.active_upper {
            v += lambda_upper[j] * bl.grad1_big_g[j][k];
        }
        for (jj, mp) in mu_phi.iter().enumerate() {
            v += bl.cross[jj][k] * mp;
        }
        for &i in &active_u {
            v += mu_g[i] * bl.grad1_g_u[i][k];
        }
        rx = rx.max(v.abs());
    }

    let mut ry = 0.0f64;
    for k in 0..l {
        let mut v = bl.grad2_upper[k] + lambda0 * bl.grad2_f_y[k];
        for &i in &sets.active_y {
            v += lambda[i] * bl.grad2_g_y[i][k];
        }
        for &j in &sets.active_upper {
            v += lambda_upper[j] * bl.grad2_big_g[j][k];
        }
        ry = ry.max(v.abs());
    }

    let mut ru = 0.0f64;
    for k in 0..l {
        let mut v = -lambda0 * bl.grad2_f_u[k];
        for (jj, mp) in mu_phi.iter().enumerate() {
            v += bl.huu[jj][k] * mp;
        }
        for &i in &active_u {
            v += mu_g[i] * bl.grad2_g_u[i][k];
        }
        ru = ru.max(v.abs());
    }

    let mut orth = 0.0f64;
    for &i in &sets.active_g {
        let b: f64 = (0..l).map(|jj| bl.grad2_g_u[i][jj] * mu_phi[jj]).sum();
        orth = orth.max(b.abs());
    }
    for &i in &sets.inactive {
        orth = orth.max(mu_g[i].abs());
    }

    let mut sign = 0.0f64;
    for &i in &sets.biactive {
        let a = mu_g[i];
        let b: f64 = (0..l).map(|jj| bl.grad2_g_u[i][jj] * mu_phi[jj]).sum();
        let viol = match class {
            StationarityClass::W | StationarityClass::None => 0.0,
            StationarityClass::C => (-(a * b)).max(0.0),
            StationarityClass::M => {
                if a > 0.0 && b > 0.0 {
                    0.0
                } else {
                    (a * b).abs()
                }
            }
            StationarityClass::S => (-a).max(0.0).max((-b).max(0.0)),
        };
        sign = sign.max(viol);
    }

    ConditionResiduals {
        stationarity_x: rx,
        stationarity_y: ry,
        stationarity_u: ru,
        orthogonality: orth,
        dominance_complementarity: (lambda0 * bl.dominance_gap).abs(),
        sign_condition: sign,
    }
}

/// Outcome of the lower-level KKT check at (x, y).
#[derive(Debug, Clone)]
pub enum LowerKkt {
    /// Multipliers s >= 0 supported on the active set with stationarity
    /// residual below tolerance.
    Pair(Vec<f64>),
    /// No such multipliers exist; the minimal attainable infinity norm.
    Infeasible { residual: f64 },
}

/// Minimize ||grad_y f + sum_{i active} s_i grad_y g_i||_inf over s >= 0 by
/// linear programming (epigraph form).
pub fn lower_kkt_check(
    prob: &BilevelProblem,
    x: &[f64],
    y: &[f64],
    tau: f64,
) -> Result<LowerKkt, StationarityError> {
    let p = Point::xy(x, y);
    let mut active = Vec::new();
    for (i, g) in prob.lower_constraints.iter().enumerate() {
        let v = g.eval(&p)?;
        if v > tau {
            return Err(StationarityError::LowerInfeasible(v));
        }
        if v.abs() <= tau {
            active.push(i);
        }
    }
    let grad_f = eval_grad(&prob.lower_objective, Block::Y, prob.l, &p)?;
    let grads: Vec<Vec<f64>> = active
        .iter()
        .map(|&i| eval_grad(&prob.lower_constraints[i], Block::Y, prob.l, &p))
        .collect::<Result<_, _>>()?;

    // Variables: s over the active set, then the epigraph bound t.
    let na = active.len();
    let mut le_rows = Vec::new();
    for k in 0..prob.l {
        let mut up = vec![0.0; na + 1];
        let mut dn = vec![0.0; na + 1];
        for (ai, grad) in grads.iter().enumerate() {
            up[ai] = grad[k];
            dn[ai] = -grad[k];
        }
        up[na] = -1.0;
        dn[na] = -1.0;
        le_rows.push((up, -grad_f[k]));
        le_rows.push((dn, grad_f[k]));
    }
    let mut objective = vec![0.0; na + 1];
    objective[na] = 1.0;
    let lp = LpProblem {
        num_vars: na + 1,
        eq_rows: Vec::new(),
        le_rows,
        nonneg: vec![true; na + 1],
        objective,
    };
    match simplex::solve(&lp)? {
        LpOutcome::Feasible { v, objective } => {
            if objective <= tau {
                let mut s = vec![0.0; prob.m];
                for (ai, &i) in active.iter().enumerate() {
                    s[i] = v[ai];
                }
                Ok(LowerKkt::Pair(s))
            } else {
                Ok(LowerKkt::Infeasible {
                    residual: objective,
                })
            }
        }
        // The epigraph program is always feasible (t large), so phase-one
        // failure is numerical; surface it as a residual.
        LpOutcome::Infeasible { phase_one_value } => Ok(LowerKkt::Infeasible {
            residual: phase_one_value,
        }),
    }
}

/// KP S-stationarity data mapped from an SVF certificate with y = u.
#[derive(Debug, Clone)]
pub struct KpCertificate {
    pub mu: Vec<f64>,
    pub mu_phi: Vec<f64>,
    pub lambda_upper: Vec<f64>,
    pub stationarity_x: f64,
    pub stationarity_y: f64,
    pub orthogonality: f64,
    pub sign_condition: f64,
}

impl KpCertificate {
    pub fn max_residual(&self) -> f64 {
        self.stationarity_x
            .max(self.stationarity_y)
            .max(self.orthogonality)
            .max(self.sign_condition)
    }
}

/// Map an S-certificate at a point with y = u to KP multipliers
/// mu_i = mu_g_i + lambda_i and verify the KP S-stationarity system.
pub fn svf_to_kp_certificate(
    prob: &BilevelProblem,
    pt: &SvfPoint,
    cert: &StationarityCertificate,
    tau: f64,
) -> Result<KpCertificate, StationarityError> {
    if cert.class < StationarityClass::S {
        return Err(StationarityError::Precondition(format!(
            "certificate class is {}, S is required",
            cert.class.name()
        )));
    }
    let gap = pt
        .y
        .iter()
        .zip(&pt.u)
        .fold(0.0f64, |a, (yi, ui)| a.max((yi - ui).abs()));
    if gap > tau {
        return Err(StationarityError::Precondition(format!(
            "y and u differ by {gap:e} > tau"
        )));
    }

    let sets = index_sets(prob, pt, cert.index_sets.tau_act)?;
    let bl = evaluate_blocks(prob, pt, &sets)?;
    let mu: Vec<f64> = (0..prob.m).map(|i| cert.mu_g[i] + cert.lambda[i]).collect();
    let active_u = sets.active_u();

    // x-row: the lambda0 terms cancel identically at y = u.
    let mut rx = 0.0f64;
    for k in 0..prob.d {
        let mut v = bl.grad1_upper[k];
        for (jj, mp) in cert.mu_phi.iter().enumerate() {
            v += bl.cross[jj][k] * mp;
        }
        for &i in &active_u {
            v += mu[i] * bl.grad1_g_u[i][k];
        }
        for &j in &sets.active_upper {
            v += cert.lambda_upper[j] * bl.grad1_big_g[j][k];
        }
        rx = rx.max(v.abs());
    }
    // y-row: the sum of the SVF y-row and u-row.
    let mut ry = 0.0f64;
    for k in 0..prob.l {
        let mut v = bl.grad2_upper[k];
        for &i in &active_u {
            v += mu[i] * bl.grad2_g_u[i][k];
        }
        for (jj, mp) in cert.mu_phi.iter().enumerate() {
            v += bl.huu[jj][k] * mp;
        }
        for &j in &sets.active_upper {
            v += cert.lambda_upper[j] * bl.grad2_big_g[j][k];
        }
        ry = ry.max(v.abs());
    }
    let mut orth = 0.0f64;
    for &i in &sets.active_g {
        let b: f64 = (0..prob.l)
            .map(|jj| bl.grad2_g_u[i][jj] * cert.mu_phi[jj])
            .sum();
        orth = orth.max(b.abs());
    }
    for &i in &sets.inactive {
        orth = orth.max(mu[i].abs());
    }
    let mut sign = 0.0f64;
    for &i in &sets.biactive {
        let b: f64 = (0..prob.l)
            .map(|jj| bl.grad2_g_u[i][jj] * cert.mu_phi[jj])
            .sum();
        sign = sign.max((-mu[i]).max(0.0)).max((-b).max(0.0));
    }

    let out = KpCertificate {
        mu,
        mu_phi: cert.mu_phi.clone(),
        lambda_upper: cert.lambda_upper.clone(),
        stationarity_x: rx,
        stationarity_y: ry,
        orthogonality: orth,
        sign_condition: sign,
    };
    if out.max_residual() > tau {
        return Err(StationarityError::Precondition(format!(
            "mapped KP residual {:e} exceeds tau {tau:e}",
            out.max_residual()
        )));
    }
    Ok(out)
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
";

    fn isolated() -> BilevelProblem {
        parse_problem(ISOLATED_SRC).unwrap()
    }

    fn known_point() -> SvfPoint {
        SvfPoint {
            x: vec![0.0],
            y: vec![-2.0, 0.0],
            u: vec![2.5, 1.5],
            s: vec![0.625, 0.0, 0.0],
        }
    }

    #[test]
    fn index_sets_of_the_known_point() {
        let sets = index_sets(&isolated(), &known_point(), 1e-6).unwrap();
        assert_eq!(sets.active_y, vec![0, 1]);
        assert_eq!(sets.active_g, vec![0]);
        assert_eq!(sets.biactive, vec![2]);
        assert_eq!(sets.inactive, vec![1]);
        assert!(sets.active_upper.is_empty());
    }

    #[test]
    fn classification_is_stable_under_small_perturbations() {
        let tau = 1e-6;
        let mut pt = known_point();
        pt.s[2] = tau / 4.0;
        let sets = index_sets(&isolated(), &pt, tau).unwrap();
        assert_eq!(sets.active_g, vec![0]);
        assert_eq!(sets.biactive, vec![2]);
        assert_eq!(sets.inactive, vec![1]);
    }

    #[test]
    fn all_slack_point_lands_in_inactive_set() {
        let prob = parse_problem(
            "var x[1]; var y[1]; upper{ minimize x[1]^2 + y[1]^2; } \
             lower{ minimize (y[1]-x[1])^2; y[1] - 10 <= 0; }",
        )
        .unwrap();
        let pt = SvfPoint {
            x: vec![0.3],
            y: vec![0.3],
            u: vec![0.3],
            s: vec![0.0],
        };
        let sets = index_sets(&prob, &pt, 1e-6).unwrap();
        assert!(sets.active_g.is_empty());
        assert!(sets.biactive.is_empty());
        assert_eq!(sets.inactive, vec![0]);
    }

    #[test]
    fn boundary_activity_uses_the_closed_rule() {
        let prob = parse_problem(
            "var x[1]; var y[1]; upper{ minimize x[1]^2 + y[1]^2; } \
             lower{ minimize (y[1]-x[1])^2; y[1] - 10 <= 0; }",
        )
        .unwrap();
        let tau = 1e-6;
        // g(x,u) = u - 10 = -tau exactly: counts as active, s = 0 -> biactive.
        let pt = SvfPoint {
            x: vec![10.0 - tau],
            y: vec![10.0 - tau],
            u: vec![10.0 - tau],
            s: vec![0.0],
        };
        let sets = index_sets(&prob, &pt, tau).unwrap();
        assert_eq!(sets.biactive, vec![0]);
    }

    #[test]
    fn infeasible_point_is_rejected() {
        let mut pt = known_point();
        pt.s[0] = 2.0; // breaks the stationarity rows
        let err = index_sets(&isolated(), &pt, 1e-6).unwrap_err();
        assert!(matches!(err, StationarityError::InfeasiblePoint { .. }));
    }

    #[test]
    fn certify_w_reproduces_the_reference_multipliers() {
        let cert = certify(&isolated(), &known_point(), StationarityClass::W, 1e-6).unwrap();
        assert_eq!(cert.class, StationarityClass::W);
        let expect = |a: f64, b: f64| assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        expect(cert.lambda0, 8.0 / 27.0);
        expect(cert.lambda[0], 0.0);
        expect(cert.lambda[1], 35.0 / 81.0);
        expect(cert.lambda[2], 0.0);
        expect(cert.mu_g[0], -221.0 / 1242.0);
        expect(cert.mu_g[1], 0.0);
        expect(cert.mu_g[2], 12.0 / 23.0);
        expect(cert.mu_phi[0], -10.0 / 69.0);
        expect(cert.mu_phi[1], -50.0 / 207.0);
        expect(cert.lambda_upper[0], 0.0);
        expect(cert.lambda_upper[1], 0.0);
        assert!(cert.residuals.max() <= 1e-10, "{:?}", cert.residuals);
    }

    #[test]
    fn reference_multipliers_verify_independently() {
        let res = verify_multipliers(
            &isolated(),
            &known_point(),
            1e-6,
            8.0 / 27.0,
            &[0.0, 35.0 / 81.0, 0.0],
            &[0.0, 0.0],
            &[-10.0 / 69.0, -50.0 / 207.0],
            &[-221.0 / 1242.0, 0.0, 12.0 / 23.0],
            StationarityClass::W,
        )
        .unwrap();
        assert!(res.max() <= 1e-10, "{res:?}");
    }

    #[test]
    fn point_off_stationarity_is_refuted() {
        // The other lower-level solution paired as (y, u) = (u, u) is
        // feasible for the reformulation but the upper gradient cannot be
        // cancelled there.
        let prob = isolated();
        let pt = SvfPoint {
            x: vec![0.0],
            y: vec![2.5, 1.5],
            u: vec![2.5, 1.5],
            s: vec![0.625, 0.0, 0.0],
        };
        let cert = certify(&prob, &pt, StationarityClass::W, 1e-6).unwrap();
        assert_eq!(cert.class, StationarityClass::None);
        assert!(cert.infeasibility > 1e-6, "{}", cert.infeasibility);
    }

    #[test]
    fn unconstrained_toy_is_s_stationary_with_zero_multipliers() {
        let prob = parse_problem(
            "var x[1]; var y[1]; upper{ minimize x[1]^2 + y[1]^2; } \
             lower{ minimize (y[1]-x[1])^2; }",
        )
        .unwrap();
        let pt = SvfPoint {
            x: vec![0.0],
            y: vec![0.0],
            u: vec![0.0],
            s: vec![],
        };
        let cert = certify(&prob, &pt, StationarityClass::S, 1e-8).unwrap();
        assert_eq!(cert.class, StationarityClass::S);
        assert!(cert.residuals.max() <= 1e-12);
    }

    #[test]
    fn class_monotonicity_on_an_s_point() {
        // Biactive convex model: at x = (1,1) the lower solution (0,2) has
        // both bounds active with zero multipliers.
        let prob = parse_problem(
            "var x[2]; var y[2]; \
             upper{ minimize (x[1]-1)^2 + (x[2]-1)^2 + y[1]^2 + (y[2]-2)^2; } \
             lower{ minimize (y[1] - x[1] + 1)^2 + (y[2] - x[2] - 1)^2; \
                    -y[1] <= 0; y[2] - 2 <= 0; }",
        )
        .unwrap();
        let pt = SvfPoint {
            x: vec![1.0, 1.0],
            y: vec![0.0, 2.0],
            u: vec![0.0, 2.0],
            s: vec![0.0, 0.0],
        };
        for mode in [
            StationarityClass::S,
            StationarityClass::M,
            StationarityClass::C,
            StationarityClass::W,
        ] {
            let cert = certify(&prob, &pt, mode, 1e-7).unwrap();
            assert_eq!(cert.class, mode, "mode {mode:?}");
            assert!(cert.residuals.max() <= 1e-9);
        }
    }

    #[test]
    fn lower_kkt_holds_at_u_and_fails_at_isolated_y() {
        let prob = isolated();
        match lower_kkt_check(&prob, &[0.0], &[2.5, 1.5], 1e-9).unwrap() {
            LowerKkt::Pair(s) => {
                assert!((s[0] - 0.625).abs() <= 1e-9);
                assert!(s[1].abs() <= 1e-12);
                assert!(s[2].abs() <= 1e-9);
            }
            LowerKkt::Infeasible { residual } => panic!("expected a pair, got {residual}"),
        }
        match lower_kkt_check(&prob, &[0.0], &[-2.0, 0.0], 1e-9).unwrap() {
            LowerKkt::Infeasible { residual } => {
                assert!((residual - 27.0 / 8.0).abs() <= 1e-9, "{residual}");
            }
            LowerKkt::Pair(_) => panic!("KKT cannot hold at the isolated point"),
        }
    }

    #[test]
    fn lower_kkt_with_m_zero() {
        let prob = parse_problem(
            "var x[1]; var y[1]; upper{ minimize x[1]^2 + y[1]^2; } \
             lower{ minimize (y[1]-x[1])^2; }",
        )
        .unwrap();
        match lower_kkt_check(&prob, &[0.5], &[0.5], 1e-9).unwrap() {
            LowerKkt::Pair(s) => assert!(s.is_empty()),
            LowerKkt::Infeasible { .. } => panic!("stationary point"),
        }
        match lower_kkt_check(&prob, &[0.5], &[0.9], 1e-9).unwrap() {
            LowerKkt::Infeasible { residual } => {
                assert!((residual - 0.8).abs() <= 1e-9); // |2 (y - x)|
            }
            LowerKkt::Pair(_) => panic!("not stationary"),
        }
    }

    #[test]
    fn lower_kkt_rejects_infeasible_y() {
        let err = lower_kkt_check(&isolated(), &[0.0], &[0.0, 0.0], 1e-9).unwrap_err();
        assert!(matches!(err, StationarityError::LowerInfeasible(_)));
    }

    #[test]
    fn kp_mapping_on_a_convex_problem_with_y_equal_u() {
        let prob = parse_problem(
            "var x[1]; var y[1]; \
             upper{ minimize (x[1]-1)^2 + (y[1]+1)^2; } \
             lower{ minimize (y[1]-x[1])^2; y[1] - 0.5 <= 0; }",
        )
        .unwrap();
        // At x = 1 the lower level minimizes (y-1)^2 under y <= 0.5:
        // y = 0.5 with multiplier s = 1 from 2(y - x) + s = 0.
        let pt = SvfPoint {
            x: vec![1.0],
            y: vec![0.5],
            u: vec![0.5],
            s: vec![1.0],
        };
        let cert = certify(&prob, &pt, StationarityClass::S, 1e-7).unwrap();
        assert_eq!(cert.class, StationarityClass::S, "{:?}", cert.residuals);
        let kp = svf_to_kp_certificate(&prob, &pt, &cert, 1e-9).unwrap();
        assert!(kp.max_residual() <= 1e-9);
        assert!((kp.mu[0] - (cert.mu_g[0] + cert.lambda[0])).abs() <= 1e-12);
    }

    #[test]
    fn kp_mapping_rejects_y_not_equal_u() {
        let cert = certify(&isolated(), &known_point(), StationarityClass::W, 1e-6).unwrap();
        let mut fake = cert.clone();
        fake.class = StationarityClass::S;
        let err = svf_to_kp_certificate(&isolated(), &known_point(), &fake, 1e-9).unwrap_err();
        assert!(matches!(err, StationarityError::Precondition(_)));
    }

    #[test]
    fn kp_mapping_additivity_with_zero_mu_g() {
        let prob = parse_problem(
            "var x[1]; var y[1]; \
             upper{ minimize (x[1]-1)^2 + (y[1]+1)^2; } \
             lower{ minimize (y[1]-x[1])^2; y[1] - 0.5 <= 0; }",
        )
        .unwrap();
        let pt = SvfPoint {
            x: vec![1.0],
            y: vec![0.5],
            u: vec![0.5],
            s: vec![1.0],
        };
        let mut cert = certify(&prob, &pt, StationarityClass::S, 1e-7).unwrap();
        for v in cert.mu_g.iter_mut() {
            *v = 0.0;
        }
        let mu: Vec<f64> = (0..prob.m).map(|i| cert.mu_g[i] + cert.lambda[i]).collect();
        assert_eq!(mu, cert.lambda);
    }

    #[test]
    fn scaling_the_lower_objective_preserves_classification() {
        // f -> t f with s -> t s at the same point: the certified class must
        // not change (the multiplier system rescales internally).
        let t = 3.7;
        let scaled_src = format!(
            "var x[1];\nvar y[2];\nupper {{\n  minimize x[1]^2 - 2*x[1] + 3*y[1] + y[2];\n  \
             x[1] - 1 <= 0;\n  -x[1] - 1 <= 0;\n}}\nlower {{\n  minimize {t}*(0.5*((y[1] - x[1] \
             + 0.625)^2 + (y[2] - 3.375)^2));\n  -y[1]^2 + y[2]^2 + 4 <= 0;\n  (y[1] - 1)^2 + \
             y[2]^2 - 9 <= 0;\n  x[1] + y[2] - 1.5 <= 0;\n}}\n"
        );
        let scaled = parse_problem(&scaled_src).unwrap();
        let base_pt = known_point();
        let scaled_pt = SvfPoint {
            s: base_pt.s.iter().map(|v| v * t).collect(),
            ..base_pt.clone()
        };
        let c1 = certify(&isolated(), &base_pt, StationarityClass::W, 1e-6).unwrap();
        let c2 = certify(&scaled, &scaled_pt, StationarityClass::W, 1e-6).unwrap();
        assert_eq!(c1.class, c2.class);
        assert!(c2.residuals.max() <= 1e-9);
    }
}
