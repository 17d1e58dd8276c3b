//! Dense two-phase simplex with Bland's rule.
//!
//! Solves  min c'v  s.t.  A_eq v = b_eq,  A_le v <= b_le,  v_i >= 0 for the
//! flagged components, the rest free. Free variables are split into positive
//! parts, `<=` rows get slack columns, and phase one minimizes the sum of
//! artificial variables. Bland's rule (smallest eligible index enters, the
//! smallest basic index leaves among ratio ties) makes every run finite and
//! deterministic, which matters more than speed at the sizes certification
//! produces (tens of columns).

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LpError {
    #[error("objective is unbounded below on the feasible set")]
    Unbounded,
    #[error("dimension mismatch in LP data: {0}")]
    BadData(String),
}

#[derive(Debug, Clone)]
pub struct LpProblem {
    pub num_vars: usize,
    /// Rows a'v = b.
    pub eq_rows: Vec<(Vec<f64>, f64)>,
    /// Rows a'v <= b.
    pub le_rows: Vec<(Vec<f64>, f64)>,
    /// Sign restriction per variable; `true` means v_i >= 0.
    pub nonneg: Vec<bool>,
    /// Phase-two costs; all zeros asks only for a feasible point.
    pub objective: Vec<f64>,
}

impl LpProblem {
    pub fn feasibility(num_vars: usize) -> Self {
        LpProblem {
            num_vars,
            eq_rows: Vec::new(),
            le_rows: Vec::new(),
            nonneg: vec![false; num_vars],
            objective: vec![0.0; num_vars],
        }
    }
}

#[derive(Debug, Clone)]
pub enum LpOutcome {
    Feasible { v: Vec<f64>, objective: f64 },
    /// Phase-one optimum: the minimal total artificial mass, a certificate
    /// of infeasibility when positive.
    Infeasible { phase_one_value: f64 },
}

const PIVOT_TOL: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-8;

struct Tableau {
    /// m x (n_cols + 1), last column is the RHS.
    rows: Vec<Vec<f64>>,
    basis: Vec<usize>,
    n_cols: usize,
}

impl Tableau {
    fn pivot(&mut self, row: usize, col: usize) {
        let piv = self.rows[row][col];
        debug_assert!(piv.abs() > PIVOT_TOL);
        let inv = 1.0 / piv;
        for v in self.rows[row].iter_mut() {
            *v *= inv;
        }
        let pivot_row = self.rows[row].clone();
        for (r, data) in self.rows.iter_mut().enumerate() {
            if r == row {
                continue;
            }
            let factor = data[col];
            if factor != 0.0 {
                for (a, b) in data.iter_mut().zip(&pivot_row) {
                    *a -= factor * b;
                }
            }
        }
        self.basis[row] = col;
    }

    fn rhs(&self, row: usize) -> f64 {
        self.rows[row][self.n_cols]
    }

    /// One simplex pass over a cost vector; `allowed` masks the columns that
    /// may enter. Returns Err on unboundedness.
    fn run(&mut self, costs: &[f64], allowed: &dyn Fn(usize) -> bool) -> Result<(), LpError> {
        loop {
            // Reduced costs priced against the current basis.
            let mut entering = None;
            for j in 0..self.n_cols {
                if !allowed(j) || self.basis.contains(&j) {
                    continue;
                }
                let mut red = costs[j];
                for (r, &b) in self.basis.iter().enumerate() {
                    if costs[b] != 0.0 {
                        red -= costs[b] * self.rows[r][j];
                    }
                }
                if red < -PIVOT_TOL {
                    entering = Some(j);
                    break; // Bland: first eligible index
                }
            }
            let Some(col) = entering else {
                return Ok(());
            };
            let mut leave: Option<(usize, f64)> = None;
            for r in 0..self.rows.len() {
                let a = self.rows[r][col];
                if a > PIVOT_TOL {
                    let ratio = self.rhs(r) / a;
                    let better = match leave {
                        None => true,
                        Some((lr, lratio)) => {
                            ratio < lratio - PIVOT_TOL
                                || (ratio <= lratio + PIVOT_TOL
                                    && self.basis[r] < self.basis[lr])
                        }
                    };
                    if better {
                        leave = Some((r, ratio));
                    }
                }
            }
            let Some((row, _)) = leave else {
                return Err(LpError::Unbounded);
            };
            self.pivot(row, col);
        }
    }
}

/// Solve an LP. Returns the optimal point over the original variables, or an
/// infeasibility certificate (the phase-one optimum).
pub fn solve(lp: &LpProblem) -> Result<LpOutcome, LpError> {
    let n = lp.num_vars;
    if lp.nonneg.len() != n || lp.objective.len() != n {
        return Err(LpError::BadData(
            "nonneg/objective length must equal num_vars".into(),
        ));
    }
    for (a, _) in lp.eq_rows.iter().chain(&lp.le_rows) {
        if a.len() != n {
            return Err(LpError::BadData("row length must equal num_vars".into()));
        }
    }

    // Column layout: for each variable one column (nonneg) or a +/- pair
    // (free); then one slack per <= row; then one artificial per row.
    let mut col_of_var: Vec<(usize, Option<usize>)> = Vec::with_capacity(n);
    let mut n_struct = 0;
    for i in 0..n {
        if lp.nonneg[i] {
            col_of_var.push((n_struct, None));
            n_struct += 1;
        } else {
            col_of_var.push((n_struct, Some(n_struct + 1)));
            n_struct += 2;
        }
    }
    let m = lp.eq_rows.len() + lp.le_rows.len();
    if m == 0 {
        return Ok(LpOutcome::Feasible {
            v: vec![0.0; n],
            objective: 0.0,
        });
    }
    let n_slack = lp.le_rows.len();
    let n_cols = n_struct + n_slack + m;

    let mut rows = Vec::with_capacity(m);
    for (ridx, (a, b)) in lp.eq_rows.iter().chain(&lp.le_rows).enumerate() {
        let is_le = ridx >= lp.eq_rows.len();
        let mut row = vec![0.0; n_cols + 1];
        for (i, &ai) in a.iter().enumerate() {
            let (plus, minus) = col_of_var[i];
            row[plus] = ai;
            if let Some(mcol) = minus {
                row[mcol] = -ai;
            }
        }
        if is_le {
            row[n_struct + (ridx - lp.eq_rows.len())] = 1.0;
        }
        row[n_cols] = *b;
        if row[n_cols] < 0.0 {
            for v in row.iter_mut() {
                *v = -*v;
            }
        }
        // artificial column
        row[n_struct + n_slack + ridx] = 1.0;
        rows.push(row);
    }

    let basis: Vec<usize> = (0..m).map(|r| n_struct + n_slack + r).collect();
    let mut tab = Tableau {
        rows,
        basis,
        n_cols,
    };

    // Phase one: minimize the artificial mass.
    let mut phase1_costs = vec![0.0; n_cols];
    for c in n_struct + n_slack..n_cols {
        phase1_costs[c] = 1.0;
    }
    tab.run(&phase1_costs, &|_| true)?;
    let phase1_value: f64 = tab
        .basis
        .iter()
        .enumerate()
        .filter(|(_, &b)| b >= n_struct + n_slack)
        .map(|(r, _)| tab.rhs(r))
        .sum();
    let scale = lp
        .eq_rows
        .iter()
        .chain(&lp.le_rows)
        .map(|(_, b)| b.abs())
        .fold(1.0f64, f64::max);
    if phase1_value > FEAS_TOL * scale {
        return Ok(LpOutcome::Infeasible {
            phase_one_value: phase1_value,
        });
    }

    // Drive leftover zero-level artificials out of the basis.
    for r in 0..m {
        if tab.basis[r] >= n_struct + n_slack {
            let col = (0..n_struct + n_slack)
                .find(|&j| tab.rows[r][j].abs() > PIVOT_TOL && !tab.basis.contains(&j));
            if let Some(col) = col {
                tab.pivot(r, col);
            }
            // A row with no eligible column is redundant; its artificial
            // stays basic at (numerical) zero which is harmless in phase two
            // because artificial columns are barred from entering.
        }
    }

    // Phase two over the real objective.
    let mut phase2_costs = vec![0.0; n_cols];
    for i in 0..n {
        let (plus, minus) = col_of_var[i];
        phase2_costs[plus] = lp.objective[i];
        if let Some(mcol) = minus {
            phase2_costs[mcol] = -lp.objective[i];
        }
    }
    let limit = n_struct + n_slack;
    tab.run(&phase2_costs, &|j| j < limit)?;

    let mut v = vec![0.0; n];
    for (r, &b) in tab.basis.iter().enumerate() {
        if b < n_struct {
            let val = tab.rhs(r);
            for (i, &(plus, minus)) in col_of_var.iter().enumerate() {
                if b == plus {
                    v[i] += val;
                } else if Some(b) == minus {
                    v[i] -= val;
                }
            }
        }
    }
    let objective = v
        .iter()
        .zip(&lp.objective)
        .map(|(vi, ci)| vi * ci)
        .sum::<f64>();
    Ok(LpOutcome::Feasible { v, objective })
}
