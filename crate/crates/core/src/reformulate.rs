//! Single-level reformulations of a bilevel problem.
//!
//! Two instances are built over a composite variable w:
//!
//! - SVF: w = (x, y, u, s). The reference point u carries the lower-level
//!   stationarity system grad_y f(x,u) + sum_i s_i grad_y g_i(x,u) = 0 with
//!   complementarity 0 <= s_i  perp  -g_i(x,u) >= 0, and the hierarchy is the
//!   dominance row f(x,y) - f(x,u) <= 0.
//! - KP: w = (x, y, s). The same stationarity-plus-complementarity system is
//!   posed at y itself and there is no dominance row.
//!
//! Instances are immutable after construction; residual evaluation is pure.

use std::sync::Arc;

use serde_json::json;

use crate::expr::{self, Block, EvalError, Expr, Point};
use crate::problem::BilevelProblem;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpecKind {
    Svf,
    Kp,
}

/// Offsets of the variable blocks inside the composite vector w.
#[derive(Debug, Clone, Copy)]
pub struct BlockMap {
    pub d: usize,
    pub l: usize,
    pub m: usize,
    pub has_u: bool,
}

impl BlockMap {
    pub fn n(&self) -> usize {
        if self.has_u {
            self.d + 2 * self.l + self.m
        } else {
            self.d + self.l + self.m
        }
    }

    pub fn offset(&self, b: Block) -> usize {
        match b {
            Block::X => 0,
            Block::Y => self.d,
            Block::U => {
                debug_assert!(self.has_u);
                self.d + self.l
            }
            Block::S => {
                if self.has_u {
                    self.d + 2 * self.l
                } else {
                    self.d + self.l
                }
            }
        }
    }

    pub fn len(&self, b: Block) -> usize {
        match b {
            Block::X => self.d,
            Block::Y | Block::U => self.l,
            Block::S => self.m,
        }
    }

    /// Split a composite vector into a block-indexed evaluation point.
    pub fn point<'a>(&self, w: &'a [f64]) -> Point<'a> {
        debug_assert_eq!(w.len(), self.n());
        let x = &w[..self.d];
        let y = &w[self.d..self.d + self.l];
        if self.has_u {
            let u = &w[self.d + self.l..self.d + 2 * self.l];
            let s = &w[self.d + 2 * self.l..];
            Point {
                x: Some(x),
                y: Some(y),
                u: Some(u),
                s: Some(s),
            }
        } else {
            let s = &w[self.d + self.l..];
            Point {
                x: Some(x),
                y: Some(y),
                u: None,
                s: Some(s),
            }
        }
    }
}

/// Role of an inequality row inside an instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IneqKind {
    /// f(x,y) - f(x,u) <= 0 (SVF only).
    Dominance,
    /// g_i(x,y) <= 0.
    LowerAtY,
    /// g_i(x,u) <= 0 (SVF only; implied by the complementarity encoding,
    /// kept for residual audits and comparator solvers).
    LowerAtU,
    /// G_j(x,y) <= 0.
    Upper,
    /// -s_i <= 0.
    SlackNonneg,
}

#[derive(Debug, Clone)]
pub struct IneqRow {
    pub expr: Arc<Expr>,
    pub kind: IneqKind,
    /// Index of the originating constraint within its family.
    pub index: usize,
}

/// A complementarity pair 0 <= s_i  perp  -g_i >= 0, stored as the s-index
/// and the g expression (posed at u for SVF and at y for KP).
#[derive(Debug, Clone)]
pub struct CompPair {
    pub s_index: usize,
    pub g_expr: Arc<Expr>,
}

/// A flat NLP-with-complementarity over the composite variable w.
#[derive(Debug, Clone)]
pub struct MpecInstance {
    pub kind: MpecKind,
    pub blocks: BlockMap,
    pub objective: Arc<Expr>,
    /// The stationarity rows (length l).
    pub equalities: Vec<Arc<Expr>>,
    pub inequalities: Vec<IneqRow>,
    pub comp_pairs: Vec<CompPair>,
}

/// Component-wise feasibility residuals of an instance at a point.
/// A point is feasible at tolerance tau iff every component is <= tau.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualBreakdown {
    /// Infinity norm of the stationarity rows.
    pub equality_inf_norm: f64,
    /// Infinity norm of max(0, row) over all inequality rows except the
    /// dominance row, which is reported separately.
    pub inequality_violation_inf_norm: f64,
    /// max_i |s_i * g_i| over the complementarity pairs.
    pub complementarity_inf_norm: f64,
    /// max(0, f(x,y) - f(x,u)); zero for instances without a dominance row.
    pub dominance_violation: f64,
}

impl ResidualBreakdown {
    pub fn max(&self) -> f64 {
        self.equality_inf_norm
            .max(self.inequality_violation_inf_norm)
            .max(self.complementarity_inf_norm)
            .max(self.dominance_violation)
    }

    pub fn feasible_at(&self, tau: f64) -> bool {
        self.max() <= tau
    }
}

/// Stationarity rows grad_b f + sum_i s_i grad_b g_i at the block `b`.
fn stationarity_rows(f: &Arc<Expr>, g: &[Arc<Expr>], block: Block, l: usize) -> Vec<Arc<Expr>> {
    let grad_f = expr::gradient_block(f, block, l);
    let grad_g: Vec<Vec<Arc<Expr>>> = g
        .iter()
        .map(|gi| expr::gradient_block(gi, block, l))
        .collect();
    (0..l)
        .map(|j| {
            let mut row = grad_f[j].clone();
            for (i, gg) in grad_g.iter().enumerate() {
                row = expr::add(row, expr::mul(Expr::var(Block::S, i), gg[j].clone()));
            }
            row
        })
        .collect()
}

/// Build the surrogate value function instance over w = (x, y, u, s).
pub fn build_svf(prob: &BilevelProblem) -> MpecInstance {
    let blocks = BlockMap {
        d: prob.d,
        l: prob.l,
        m: prob.m,
        has_u: true,
    };
    let f_at_u = prob.lower_objective.rename_block(Block::Y, Block::U);
    let g_at_u: Vec<Arc<Expr>> = prob
        .lower_constraints
        .iter()
        .map(|g| g.rename_block(Block::Y, Block::U))
        .collect();

    let equalities = stationarity_rows(&f_at_u, &g_at_u, Block::U, prob.l);

    let mut inequalities = Vec::new();
    // Kept as a literal subtraction: downstream code recovers f(x,u) from
    // the right-hand side of this row.
    inequalities.push(IneqRow {
        expr: Arc::new(Expr::Sub(prob.lower_objective.clone(), f_at_u.clone())),
        kind: IneqKind::Dominance,
        index: 0,
    });
    for (i, g) in prob.lower_constraints.iter().enumerate() {
        inequalities.push(IneqRow {
            expr: g.clone(),
            kind: IneqKind::LowerAtY,
            index: i,
        });
    }
    for (i, g) in g_at_u.iter().enumerate() {
        inequalities.push(IneqRow {
            expr: g.clone(),
            kind: IneqKind::LowerAtU,
            index: i,
        });
    }
    for (j, gj) in prob.upper_constraints.iter().enumerate() {
        inequalities.push(IneqRow {
            expr: gj.clone(),
            kind: IneqKind::Upper,
            index: j,
        });
    }
    for i in 0..prob.m {
        inequalities.push(IneqRow {
            expr: expr::neg(Expr::var(Block::S, i)),
            kind: IneqKind::SlackNonneg,
            index: i,
        });
    }

    let comp_pairs = g_at_u
        .iter()
        .enumerate()
        .map(|(i, g)| CompPair {
            s_index: i,
            g_expr: g.clone(),
        })
        .collect();

    MpecInstance {
        kind: MpecKind::Svf,
        blocks,
        objective: prob.upper_objective.clone(),
        equalities,
        inequalities,
        comp_pairs,
    }
}

/// Build the KKT reformulation instance over w = (x, y, s).
pub fn build_kp(prob: &BilevelProblem) -> MpecInstance {
    let blocks = BlockMap {
        d: prob.d,
        l: prob.l,
        m: prob.m,
        has_u: false,
    };
    let equalities = stationarity_rows(
        &prob.lower_objective,
        &prob.lower_constraints,
        Block::Y,
        prob.l,
    );

    let mut inequalities = Vec::new();
    for (i, g) in prob.lower_constraints.iter().enumerate() {
        inequalities.push(IneqRow {
            expr: g.clone(),
            kind: IneqKind::LowerAtY,
            index: i,
        });
    }
    for (j, gj) in prob.upper_constraints.iter().enumerate() {
        inequalities.push(IneqRow {
            expr: gj.clone(),
            kind: IneqKind::Upper,
            index: j,
        });
    }
    for i in 0..prob.m {
        inequalities.push(IneqRow {
            expr: expr::neg(Expr::var(Block::S, i)),
            kind: IneqKind::SlackNonneg,
            index: i,
        });
    }

    let comp_pairs = prob
        .lower_constraints
        .iter()
        .enumerate()
        .map(|(i, g)| CompPair {
            s_index: i,
            g_expr: g.clone(),
        })
        .collect();

    MpecInstance {
        kind: MpecKind::Kp,
        blocks,
        objective: prob.upper_objective.clone(),
        equalities,
        inequalities,
        comp_pairs,
    }
}

/// Exact component-wise feasibility residuals at w.
pub fn mpec_residual(inst: &MpecInstance, w: &[f64]) -> Result<ResidualBreakdown, EvalError> {
    assert_eq!(w.len(), inst.blocks.n(), "composite dimension mismatch");
    let p = inst.blocks.point(w);
    let s = p.s.unwrap();

    let mut eq = 0.0f64;
    for row in &inst.equalities {
        eq = eq.max(row.eval(&p)?.abs());
    }
    let mut ineq = 0.0f64;
    let mut dom = 0.0f64;
    for row in &inst.inequalities {
        let v = row.expr.eval(&p)?;
        if row.kind == IneqKind::Dominance {
            dom = dom.max(v.max(0.0));
        } else {
            ineq = ineq.max(v.max(0.0));
        }
    }
    let mut comp = 0.0f64;
    for pair in &inst.comp_pairs {
        let g = pair.g_expr.eval(&p)?;
        comp = comp.max((s[pair.s_index] * g).abs());
    }
    Ok(ResidualBreakdown {
        equality_inf_norm: eq,
        inequality_violation_inf_norm: ineq,
        complementarity_inf_norm: comp,
        dominance_violation: dom,
    })
}

impl MpecInstance {
    pub fn n(&self) -> usize {
        self.blocks.n()
    }

    /// Assemble a composite vector from per-block values.
    pub fn pack(&self, x: &[f64], y: &[f64], u: Option<&[f64]>, s: &[f64]) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.n());
        w.extend_from_slice(x);
        w.extend_from_slice(y);
        if self.blocks.has_u {
            w.extend_from_slice(u.expect("SVF instance needs a u block"));
        }
        w.extend_from_slice(s);
        debug_assert_eq!(w.len(), self.n());
        w
    }

    /// Debug dump: blocks, constraint strings, pair indices.
    pub fn to_debug_json(&self) -> serde_json::Value {
        json!({
            "kind": match self.kind { MpecKind::Svf => "svf", MpecKind::Kp => "kp" },
            "n": self.n(),
            "blocks": {
                "d": self.blocks.d,
                "l": self.blocks.l,
                "m": self.blocks.m,
                "has_u": self.blocks.has_u,
            },
            "objective": self.objective.to_string(),
            "equalities": self.equalities.iter().map(|e| e.to_string()).collect::<Vec<_>>(),
            "inequalities": self.inequalities.iter().map(|r| json!({
                "kind": format!("{:?}", r.kind),
                "index": r.index,
                "expr": r.expr.to_string(),
            })).collect::<Vec<_>>(),
            "comp_pairs": self.comp_pairs.iter().map(|c| json!({
                "s_index": c.s_index,
                "g": c.g_expr.to_string(),
            })).collect::<Vec<_>>(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parse::parse_problem;

    pub(crate) const ISOLATED_SRC: &str = "\
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

    /// The known SVF-feasible point (x, y, u, s).
    fn feasible_w(inst: &MpecInstance) -> Vec<f64> {
        inst.pack(
            &[0.0],
            &[-2.0, 0.0],
            Some(&[2.5, 1.5]),
            &[0.625, 0.0, 0.0],
        )
    }

    #[test]
    fn svf_dimensions_and_structure() {
        let inst = build_svf(&isolated());
        assert_eq!(inst.n(), 8);
        assert_eq!(inst.equalities.len(), 2);
        assert_eq!(inst.comp_pairs.len(), 3);
        let dom_rows = inst
            .inequalities
            .iter()
            .filter(|r| r.kind == IneqKind::Dominance)
            .count();
        assert_eq!(dom_rows, 1);
    }

    #[test]
    fn svf_stationarity_rows_match_hand_derivation() {
        // h1 = u1 - x + 5/8 - 2 s1 u1 + 2 s2 (u1 - 1)
        // h2 = u2 - 27/8 + 2 s1 u2 + 2 s2 u2 + s3
        let inst = build_svf(&isolated());
        let check = |x: f64, u: [f64; 2], s: [f64; 3]| {
            let w = inst.pack(&[x], &[0.3, -0.7], Some(&u), &s);
            let p = inst.blocks.point(&w);
            let h1 = inst.equalities[0].eval(&p).unwrap();
            let h2 = inst.equalities[1].eval(&p).unwrap();
            let h1_hand = u[0] - x + 0.625 - 2.0 * s[0] * u[0] + 2.0 * s[1] * (u[0] - 1.0);
            let h2_hand = u[1] - 3.375 + 2.0 * s[0] * u[1] + 2.0 * s[1] * u[1] + s[2];
            assert!((h1 - h1_hand).abs() <= 1e-12, "{h1} vs {h1_hand}");
            assert!((h2 - h2_hand).abs() <= 1e-12, "{h2} vs {h2_hand}");
        };
        check(0.0, [2.5, 1.5], [0.625, 0.0, 0.0]);
        check(0.7, [-1.2, 2.0], [0.3, 1.1, 0.25]);
    }

    #[test]
    fn paper_point_is_svf_feasible() {
        let inst = build_svf(&isolated());
        let w = feasible_w(&inst);
        let res = mpec_residual(&inst, &w).unwrap();
        assert!(res.feasible_at(1e-12), "{res:?}");
    }

    #[test]
    fn perturbed_slack_shows_linear_equality_residual() {
        let inst = build_svf(&isolated());
        let w = inst.pack(
            &[0.0],
            &[-2.0, 0.0],
            Some(&[2.5, 1.5]),
            &[0.725, 0.0, 0.0],
        );
        let res = mpec_residual(&inst, &w).unwrap();
        // h rows are linear in s: the 0.1 bump scales grad g1(x,u) = (-5, 3).
        assert!((res.equality_inf_norm - 0.5).abs() <= 1e-12, "{res:?}");
    }

    #[test]
    fn kp_dimensions() {
        let inst = build_kp(&isolated());
        assert_eq!(inst.n(), 6);
        assert_eq!(inst.equalities.len(), 2);
        assert_eq!(inst.comp_pairs.len(), 3);
        assert!(!inst
            .inequalities
            .iter()
            .any(|r| r.kind == IneqKind::Dominance));
    }

    #[test]
    fn kp_rejects_the_global_solution() {
        // At (x, y) = (0, (-2, 0)) the second stationarity row reads
        // -27/8 + s3, and s3 stays off the active set; with the active
        // gradients having zero second components the row cannot be
        // cancelled by any s >= 0 supported on the active set.
        let inst = build_kp(&isolated());
        for s1 in [0.0, 0.1, 0.5, 2.0] {
            for s2 in [0.0, 0.3, 1.7] {
                let w = inst.pack(&[0.0], &[-2.0, 0.0], None, &[s1, s2, 0.0]);
                let res = mpec_residual(&inst, &w).unwrap();
                assert!(
                    res.equality_inf_norm >= 27.0 / 8.0 - 1e-9,
                    "s=({s1},{s2}): {res:?}"
                );
            }
        }
    }

    #[test]
    fn m_zero_problem_has_no_pairs() {
        let prob = parse_problem(
            "var x[1]; var y[1]; upper{ minimize x[1]^2 + y[1]^2; } \
             lower{ minimize (y[1]-x[1])^2; }",
        )
        .unwrap();
        let svf = build_svf(&prob);
        assert_eq!(svf.n(), 3);
        assert_eq!(svf.equalities.len(), 1);
        assert!(svf.comp_pairs.is_empty());
        let kp = build_kp(&prob);
        assert_eq!(kp.n(), 2);
    }

    #[test]
    fn all_zero_point_on_minimal_model() {
        let prob = parse_problem(
            "var x[1]; var y[1]; upper{ minimize x[1]^2 + y[1]^2; } \
             lower{ minimize (y[1]-x[1])^2; }",
        )
        .unwrap();
        let inst = build_svf(&prob);
        let w = vec![0.0; 3];
        let res = mpec_residual(&inst, &w).unwrap();
        assert_eq!(res.dominance_violation, 0.0);
        // equality = grad_u f(0, 0) = 2*(u - x) = 0 here
        assert_eq!(res.equality_inf_norm, 0.0);
    }

    #[test]
    fn complementarity_residual_ignores_y() {
        let inst = build_svf(&isolated());
        let mut w = feasible_w(&inst);
        let base = mpec_residual(&inst, &w).unwrap().complementarity_inf_norm;
        w[1] = 3.0; // y1
        w[2] = -1.0; // y2
        let moved = mpec_residual(&inst, &w).unwrap().complementarity_inf_norm;
        assert_eq!(base, moved);
    }

    #[test]
    fn constraint_permutation_leaves_residuals_invariant() {
        // Permute the lower constraints in the source and apply the induced
        // permutation to s: every residual component must be unchanged.
        let src_perm = "\
var x[1];
var y[2];
upper {
  minimize x[1]^2 - 2*x[1] + 3*y[1] + y[2];
  x[1] - 1 <= 0;
  -x[1] - 1 <= 0;
}
lower {
  minimize 0.5*((y[1] - x[1] + 0.625)^2 + (y[2] - 3.375)^2);
  x[1] + y[2] - 1.5 <= 0;
  -y[1]^2 + y[2]^2 + 4 <= 0;
  (y[1] - 1)^2 + y[2]^2 - 9 <= 0;
}
";
        // permutation: new (g1', g2', g3') = old (g3, g1, g2)
        let a = build_svf(&isolated());
        let b = build_svf(&parse_problem(src_perm).unwrap());
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
        };
        for _ in 0..100 {
            let x = [next()];
            let y = [next(), next()];
            let u = [next(), next()];
            let s = [next().abs(), next().abs(), next().abs()];
            let wa = a.pack(&x, &y, Some(&u), &s);
            let wb = b.pack(&x, &y, Some(&u), &[s[2], s[0], s[1]]);
            let ra = mpec_residual(&a, &wa).unwrap();
            let rb = mpec_residual(&b, &wb).unwrap();
            assert!((ra.equality_inf_norm - rb.equality_inf_norm).abs() <= 1e-10);
            assert!(
                (ra.inequality_violation_inf_norm - rb.inequality_violation_inf_norm).abs()
                    <= 1e-10
            );
            assert!((ra.complementarity_inf_norm - rb.complementarity_inf_norm).abs() <= 1e-10);
            assert!((ra.dominance_violation - rb.dominance_violation).abs() <= 1e-10);
        }
    }

    #[test]
    fn svf_with_u_fixed_to_y_reproduces_kp_rows() {
        let prob = isolated();
        let svf = build_svf(&prob);
        let kp = build_kp(&prob);
        for (se, ke) in svf.equalities.iter().zip(&kp.equalities) {
            let renamed = se.rename_block(Block::U, Block::Y);
            assert_eq!(renamed.to_string(), ke.to_string());
        }
        for (sc, kc) in svf.comp_pairs.iter().zip(&kp.comp_pairs) {
            assert_eq!(sc.s_index, kc.s_index);
            assert_eq!(
                sc.g_expr.rename_block(Block::U, Block::Y).to_string(),
                kc.g_expr.to_string()
            );
        }
    }
}
