//! Validated bilevel problems.
//!
//! A problem holds the upper objective F and constraints G (over x and y),
//! and the lower objective f and constraints g (over x and y), all in
//! `e <= 0` form, plus optional metadata: a name, a lower-level convexity
//! flag, a reference solution and objective values when known, a shipped
//! start point, and per-axis boxes for the brute-force oracle.

use std::sync::Arc;

use crate::expr::{Block, Expr, Point};

#[derive(Debug, Clone, Default)]
pub struct ProblemMeta {
    pub name: String,
    pub lower_convex: bool,
    /// Known best solution, used as the benchmark reference.
    pub x_ref: Option<Vec<f64>>,
    pub y_ref: Option<Vec<f64>>,
    /// Upper objective value at the reference solution.
    pub upper_star: Option<f64>,
    /// Lower objective value at the reference solution.
    pub lower_star: Option<f64>,
    /// Shipped start point; zeros when absent.
    pub x0: Option<Vec<f64>>,
    pub y0: Option<Vec<f64>>,
    pub x_box: Option<Vec<(f64, f64)>>,
    pub y_box: Option<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone)]
pub struct BilevelProblem {
    /// Upper variable dimension.
    pub d: usize,
    /// Lower variable dimension.
    pub l: usize,
    /// Number of lower constraints.
    pub m: usize,
    /// Number of upper constraints.
    pub p: usize,
    pub upper_objective: Arc<Expr>,
    pub upper_constraints: Vec<Arc<Expr>>,
    pub lower_objective: Arc<Expr>,
    pub lower_constraints: Vec<Arc<Expr>>,
    pub meta: ProblemMeta,
}

impl BilevelProblem {
    /// Build and validate. Every expression may reference only the declared
    /// x and y blocks, within the declared dimensions.
    pub fn new(
        d: usize,
        l: usize,
        upper_objective: Arc<Expr>,
        upper_constraints: Vec<Arc<Expr>>,
        lower_objective: Arc<Expr>,
        lower_constraints: Vec<Arc<Expr>>,
        meta: ProblemMeta,
    ) -> Result<Self, String> {
        let prob = BilevelProblem {
            d,
            l,
            m: lower_constraints.len(),
            p: upper_constraints.len(),
            upper_objective,
            upper_constraints,
            lower_objective,
            lower_constraints,
            meta,
        };
        prob.validate()?;
        Ok(prob)
    }

    fn validate(&self) -> Result<(), String> {
        let all = self.all_expressions();
        for (what, e) in &all {
            let mut blocks = Vec::new();
            e.blocks_used(&mut blocks);
            for b in blocks {
                match b {
                    Block::X => {
                        if let Some(i) = e.max_index(Block::X) {
                            if i >= self.d {
                                return Err(format!(
                                    "{what} references x[{}] but d = {}",
                                    i + 1,
                                    self.d
                                ));
                            }
                        }
                    }
                    Block::Y => {
                        if let Some(i) = e.max_index(Block::Y) {
                            if i >= self.l {
                                return Err(format!(
                                    "{what} references y[{}] but l = {}",
                                    i + 1,
                                    self.l
                                ));
                            }
                        }
                    }
                    Block::U | Block::S => {
                        return Err(format!(
                            "{what} references block {b:?}; source models may only use x and y"
                        ))
                    }
                }
            }
        }
        for (name, vals, want) in [
            ("xref", &self.meta.x_ref, self.d),
            ("yref", &self.meta.y_ref, self.l),
            ("x0", &self.meta.x0, self.d),
            ("y0", &self.meta.y0, self.l),
        ] {
            if let Some(v) = vals {
                if v.len() != want {
                    return Err(format!(
                        "metadata {name} has {} components, expected {want}",
                        v.len()
                    ));
                }
            }
        }
        Ok(())
    }

    fn all_expressions(&self) -> Vec<(String, Arc<Expr>)> {
        let mut out = vec![
            ("upper objective".to_string(), self.upper_objective.clone()),
            ("lower objective".to_string(), self.lower_objective.clone()),
        ];
        for (i, c) in self.upper_constraints.iter().enumerate() {
            out.push((format!("upper constraint {}", i + 1), c.clone()));
        }
        for (i, c) in self.lower_constraints.iter().enumerate() {
            out.push((format!("lower constraint {}", i + 1), c.clone()));
        }
        out
    }

    /// Shipped start point; zeros when the metadata has none.
    pub fn start_point(&self) -> (Vec<f64>, Vec<f64>) {
        let x0 = self.meta.x0.clone().unwrap_or_else(|| vec![0.0; self.d]);
        let y0 = self.meta.y0.clone().unwrap_or_else(|| vec![0.0; self.l]);
        (x0, y0)
    }

    /// Oracle boxes; [-10, 10] per axis when the metadata has none.
    pub fn x_box(&self) -> Vec<(f64, f64)> {
        self.meta
            .x_box
            .clone()
            .unwrap_or_else(|| vec![(-10.0, 10.0); self.d])
    }

    pub fn y_box(&self) -> Vec<(f64, f64)> {
        self.meta
            .y_box
            .clone()
            .unwrap_or_else(|| vec![(-10.0, 10.0); self.l])
    }

    pub fn eval_upper(&self, x: &[f64], y: &[f64]) -> Result<f64, crate::expr::EvalError> {
        self.upper_objective.eval(&Point::xy(x, y))
    }

    pub fn eval_lower(&self, x: &[f64], y: &[f64]) -> Result<f64, crate::expr::EvalError> {
        self.lower_objective.eval(&Point::xy(x, y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{add, powi};

    #[test]
    fn rejects_out_of_dimension_reference() {
        let f = add(powi(Expr::var(Block::Y, 2), 2), Expr::constant(1.0));
        let err = BilevelProblem::new(
            1,
            2,
            Expr::constant(0.0),
            vec![],
            f,
            vec![],
            ProblemMeta::default(),
        )
        .unwrap_err();
        assert!(err.contains("y[3]"), "{err}");
    }

    #[test]
    fn rejects_source_reference_to_u() {
        let err = BilevelProblem::new(
            1,
            1,
            Expr::var(Block::U, 0),
            vec![],
            Expr::constant(0.0),
            vec![],
            ProblemMeta::default(),
        )
        .unwrap_err();
        assert!(err.contains("source models"), "{err}");
    }
}
