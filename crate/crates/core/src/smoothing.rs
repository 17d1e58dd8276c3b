//! Smoothing-barrier shift algebra and smoothed subproblems.
//!
//! For a complementarity pair 0 <= s  perp  -g >= 0 the shift pair
//!
//! ```text
//! z     = ( sqrt((rho*s + g)^2 + 4*r*rho) - (rho*s + g) ) / 2
//! kappa = ( sqrt((rho*s + g)^2 + 4*r*rho) + (rho*s + g) ) / 2
//! ```
//!
//! satisfies z >= 0, kappa >= 0, z*kappa = rho*r and z + g = kappa - rho*s.
//! A smoothed instance replaces the stationarity rows by
//!
//! ```text
//! phi_j = grad_j f + sum_i (kappa_i / rho) grad_j g_i = 0      (l rows)
//! psi_i = z_i + g_i = 0                                        (m rows)
//! ```
//!
//! where the g_i are posed at the reference block (u for SVF, y for KP).
//! At any root of psi the products satisfy s_i g_i = -r, so complementarity
//! is recovered as r -> 0. All rows are continuously differentiable for
//! r > 0 with analytic gradients assembled from the symbolic derivative
//! blocks and the shift derivative ratios.
//!
//! The larger of z, kappa is always computed by the explicit formula and the
//! smaller as rho*r / larger, which avoids the classic quadratic-root
//! cancellation when |rho*s + g| dominates sqrt(4*r*rho).

use std::sync::Arc;

use thiserror::Error;

use crate::expr::{self, Block, Compiled, EvalError, Expr};
use crate::reformulate::{BlockMap, IneqKind, IneqRow, MpecInstance, MpecKind};

#[derive(Debug, Error)]
pub enum SmoothingError {
    #[error("rho must be positive, got {0}")]
    NonpositiveRho(f64),
    #[error("r must be nonnegative, got {0}")]
    NegativeR(f64),
    #[error("r must be strictly positive here, got {0}")]
    NonpositiveR(f64),
    #[error("singular shift: r = 0 with rho*s + g = 0 has no derivative")]
    SingularShift,
    #[error("implied barrier variable z is not positive")]
    NonpositiveZ,
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// The shift pair at one complementarity pair, with the inputs echoed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftPair {
    pub z: f64,
    pub kappa: f64,
    pub g_value: f64,
    pub s_value: f64,
    pub r: f64,
    pub rho: f64,
}

/// Compute the shift pair with the cancellation-safe branch.
pub fn shift(g_value: f64, s_value: f64, r: f64, rho: f64) -> Result<ShiftPair, SmoothingError> {
    if rho <= 0.0 {
        return Err(SmoothingError::NonpositiveRho(rho));
    }
    if r < 0.0 {
        return Err(SmoothingError::NegativeR(r));
    }
    let t = rho * s_value + g_value;
    let disc = (t * t + 4.0 * r * rho).sqrt();
    let (z, kappa) = if t >= 0.0 {
        let kappa = 0.5 * (disc + t);
        let z = if kappa > 0.0 { rho * r / kappa } else { 0.0 };
        (z, kappa)
    } else {
        let z = 0.5 * (disc - t);
        let kappa = if z > 0.0 { rho * r / z } else { 0.0 };
        (z, kappa)
    };
    Ok(ShiftPair {
        z,
        kappa,
        g_value,
        s_value,
        r,
        rho,
    })
}

/// Derivative ratios of the shift pair. For inputs g, s with gradient
/// grad g of the constraint in the (x, u) variables:
///
/// ```text
/// grad_(x,u) z     = dz_dg * grad g        dz_dg = -z / (z + kappa)
/// grad_(x,u) kappa = dk_dg * grad g        dk_dg = kappa / (z + kappa)
/// d z / d s        = -rho * z / (z + kappa)
/// d kappa / d s    =  rho * kappa / (z + kappa)
/// ```
#[derive(Debug, Clone, Copy)]
pub struct ShiftDerivatives {
    pub pair: ShiftPair,
    pub dz_dg: f64,
    pub dk_dg: f64,
    pub dz_ds: f64,
    pub dk_ds: f64,
}

/// Requires r > 0 so that z + kappa > 0; r = 0 with rho*s + g = 0 is the
/// nonsmooth corner and is rejected.
pub fn shift_derivatives(
    g_value: f64,
    s_value: f64,
    r: f64,
    rho: f64,
) -> Result<ShiftDerivatives, SmoothingError> {
    let pair = shift(g_value, s_value, r, rho)?;
    let total = pair.z + pair.kappa;
    if total == 0.0 {
        return Err(SmoothingError::SingularShift);
    }
    Ok(ShiftDerivatives {
        pair,
        dz_dg: -pair.z / total,
        dk_dg: pair.kappa / total,
        dz_ds: -rho * pair.z / total,
        dk_ds: rho * pair.kappa / total,
    })
}

/// A compiled expression together with its compiled gradient in w.
pub(crate) struct CompiledWithGrad {
    pub value: Compiled,
    /// One entry per composite component; `None` for identically-zero ones.
    pub grad: Vec<Option<Compiled>>,
}

impl CompiledWithGrad {
    pub(crate) fn new(e: &Arc<Expr>, blocks: &BlockMap) -> Self {
        let value = Compiled::new(e);
        let mut grad = Vec::with_capacity(blocks.n());
        let order: &[Block] = if blocks.has_u {
            &[Block::X, Block::Y, Block::U, Block::S]
        } else {
            &[Block::X, Block::Y, Block::S]
        };
        for b in order {
            for i in 0..blocks.len(*b) {
                let de = expr::diff(e, *b, i);
                if de.is_zero() {
                    grad.push(None);
                } else {
                    grad.push(Some(Compiled::new(&de)));
                }
            }
        }
        CompiledWithGrad { value, grad }
    }
}

/// The smoothed subproblem for an instance at parameters (r, rho).
///
/// Equalities: l phi rows followed by m psi rows. Inequalities: the original
/// rows minus the complementarity-related ones (lower constraints at the
/// reference block and explicit s >= 0 rows, both implied by psi = 0 and
/// kappa >= 0).
pub struct SmoothedInstance {
    pub kind: MpecKind,
    pub blocks: BlockMap,
    pub r: f64,
    pub rho: f64,
    /// Block carrying the stationarity system: U for SVF, Y for KP.
    pub stat_block: Block,
    pub(crate) objective: CompiledWithGrad,
    /// d f / d (stat block)_j for j in 0..l, with gradients.
    pub(crate) stat_f: Vec<CompiledWithGrad>,
    /// d g_i / d (stat block)_j, with gradients.
    pub(crate) stat_g: Vec<Vec<CompiledWithGrad>>,
    /// g_i at the reference block, with gradients.
    pub(crate) g_ref: Vec<CompiledWithGrad>,
    /// f at the reference block (used by the reduced augmented objective).
    pub(crate) f_ref: Compiled,
    /// Inequality rows kept in the smoothed model.
    pub inequality_rows: Vec<IneqRow>,
    pub(crate) ineq: Vec<CompiledWithGrad>,
}

impl SmoothedInstance {
    pub fn num_eq(&self) -> usize {
        self.blocks.l + self.blocks.m
    }

    pub fn num_ineq(&self) -> usize {
        self.ineq.len()
    }

    pub fn n(&self) -> usize {
        self.blocks.n()
    }
}

/// Build the smoothed subproblem. Requires r > 0 and rho > 0.
pub fn smooth_instance(
    base: &MpecInstance,
    r: f64,
    rho: f64,
) -> Result<SmoothedInstance, SmoothingError> {
    if rho <= 0.0 {
        return Err(SmoothingError::NonpositiveRho(rho));
    }
    if r <= 0.0 {
        return Err(SmoothingError::NonpositiveR(r));
    }
    let blocks = base.blocks;
    let stat_block = if blocks.has_u { Block::U } else { Block::Y };

    let g_ref_exprs: Vec<Arc<Expr>> = base.comp_pairs.iter().map(|c| c.g_expr.clone()).collect();
    debug_assert_eq!(g_ref_exprs.len(), blocks.m);

    // Stationarity rows are linear in s: substituting s = 0 recovers the
    // grad-f part, the comp-pair expressions give the grad-g parts.
    let stat_f_exprs: Vec<Arc<Expr>> = base.equalities.iter().map(zero_out_s).collect();
    let stat_g_exprs: Vec<Vec<Arc<Expr>>> = g_ref_exprs
        .iter()
        .map(|g| expr::gradient_block(g, stat_block, blocks.l))
        .collect();

    // f at the reference block, needed by the reduced augmented objective.
    // The SVF dominance row was built as Sub(f_at_y, f_at_u); KP instances
    // have no dominance row and no use for f_ref.
    let f_ref_expr = match base.kind {
        MpecKind::Svf => {
            let dom = base
                .inequalities
                .iter()
                .find(|r| r.kind == IneqKind::Dominance)
                .expect("SVF instance carries a dominance row");
            match dom.expr.as_ref() {
                Expr::Sub(_, f_at_u) => f_at_u.clone(),
                _ => unreachable!("dominance row is built as a subtraction"),
            }
        }
        MpecKind::Kp => Expr::constant(0.0),
    };

    let mut inequality_rows = Vec::new();
    for row in &base.inequalities {
        let keep = match (base.kind, row.kind) {
            (_, IneqKind::SlackNonneg) => false,
            (MpecKind::Svf, IneqKind::LowerAtU) => false,
            (MpecKind::Kp, IneqKind::LowerAtY) => false,
            _ => true,
        };
        if keep {
            inequality_rows.push(row.clone());
        }
    }

    let objective = CompiledWithGrad::new(&base.objective, &blocks);
    let stat_f = stat_f_exprs
        .iter()
        .map(|e| CompiledWithGrad::new(e, &blocks))
        .collect();
    let stat_g = stat_g_exprs
        .iter()
        .map(|row| row.iter().map(|e| CompiledWithGrad::new(e, &blocks)).collect())
        .collect();
    let g_ref = g_ref_exprs
        .iter()
        .map(|e| CompiledWithGrad::new(e, &blocks))
        .collect();
    let ineq = inequality_rows
        .iter()
        .map(|r| CompiledWithGrad::new(&r.expr, &blocks))
        .collect();

    Ok(SmoothedInstance {
        kind: base.kind,
        blocks,
        r,
        rho,
        stat_block,
        objective,
        stat_f,
        stat_g,
        g_ref,
        f_ref: Compiled::new(&f_ref_expr),
        inequality_rows,
        ineq,
    })
}

/// Substitute s = 0 into an expression (used to peel the grad-f part off a
/// stationarity row, which is linear in s).
fn zero_out_s(e: &Arc<Expr>) -> Arc<Expr> {
    fn walk(e: &Arc<Expr>) -> Arc<Expr> {
        match e.as_ref() {
            Expr::Const(_) => e.clone(),
            Expr::Var(Block::S, _) => Expr::constant(0.0),
            Expr::Var(_, _) => e.clone(),
            Expr::Neg(a) => expr::neg(walk(a)),
            Expr::Add(a, b) => expr::add(walk(a), walk(b)),
            Expr::Sub(a, b) => expr::sub(walk(a), walk(b)),
            Expr::Mul(a, b) => expr::mul(walk(a), walk(b)),
            Expr::Div(a, b) => expr::div(walk(a), walk(b)),
            Expr::Pow(a, k) => expr::powi(walk(a), *k),
            Expr::Call(f, a) => expr::call(*f, walk(a)),
        }
    }
    walk(e)
}

impl SmoothedInstance {
    /// Values of the smoothed equality rows: l phi rows then m psi rows.
    pub fn eq_values(
        &self,
        w: &[f64],
        out: &mut [f64],
        stack: &mut Vec<f64>,
    ) -> Result<(), SmoothingError> {
        let p = self.blocks.point(w);
        let s = p.s.unwrap();
        let (l, m) = (self.blocks.l, self.blocks.m);
        debug_assert_eq!(out.len(), l + m);

        let mut kappas = vec![0.0; m];
        let mut zs = vec![0.0; m];
        let mut gvals = vec![0.0; m];
        for i in 0..m {
            let g = self.g_ref[i].value.eval_with(&p, stack)?;
            let pair = shift(g, s[i], self.r, self.rho)?;
            gvals[i] = g;
            zs[i] = pair.z;
            kappas[i] = pair.kappa;
        }
        for j in 0..l {
            let mut v = self.stat_f[j].value.eval_with(&p, stack)?;
            for i in 0..m {
                let gij = self.stat_g[i][j].value.eval_with(&p, stack)?;
                v += kappas[i] / self.rho * gij;
            }
            out[j] = v;
        }
        for i in 0..m {
            out[l + i] = zs[i] + gvals[i];
        }
        Ok(())
    }

    /// Dense Jacobian of the equality rows, row-major (l+m) x n.
    pub fn eq_jacobian(
        &self,
        w: &[f64],
        out: &mut [f64],
        stack: &mut Vec<f64>,
    ) -> Result<(), SmoothingError> {
        let p = self.blocks.point(w);
        let s = p.s.unwrap();
        let (l, m, n) = (self.blocks.l, self.blocks.m, self.blocks.n());
        debug_assert_eq!(out.len(), (l + m) * n);
        out.fill(0.0);
        let s_off = self.blocks.offset(Block::S);

        let mut deriv = Vec::with_capacity(m);
        let mut gvals = vec![0.0; m];
        let mut grad_g = vec![vec![0.0; n]; m];
        for i in 0..m {
            let g = self.g_ref[i].value.eval_with(&p, stack)?;
            gvals[i] = g;
            deriv.push(shift_derivatives(g, s[i], self.r, self.rho)?);
            for (c, maybe) in self.g_ref[i].grad.iter().enumerate() {
                if let Some(comp) = maybe {
                    grad_g[i][c] = comp.eval_with(&p, stack)?;
                }
            }
        }

        // phi rows
        for j in 0..l {
            let row = &mut out[j * n..(j + 1) * n];
            for (c, maybe) in self.stat_f[j].grad.iter().enumerate() {
                if let Some(comp) = maybe {
                    row[c] += comp.eval_with(&p, stack)?;
                }
            }
            for i in 0..m {
                let gij = self.stat_g[i][j].value.eval_with(&p, stack)?;
                let kr = deriv[i].pair.kappa / self.rho;
                for (c, maybe) in self.stat_g[i][j].grad.iter().enumerate() {
                    if let Some(comp) = maybe {
                        row[c] += kr * comp.eval_with(&p, stack)?;
                    }
                }
                // kappa varies with (x, u) through g and with s_i directly
                let coef = gij / self.rho;
                for c in 0..n {
                    if grad_g[i][c] != 0.0 {
                        row[c] += coef * deriv[i].dk_dg * grad_g[i][c];
                    }
                }
                row[s_off + i] += coef * deriv[i].dk_ds;
            }
        }
        // psi rows: grad z + grad g = (1 + dz_dg) grad g + dz_ds e_s
        for i in 0..m {
            let row = &mut out[(l + i) * n..(l + i + 1) * n];
            let scale = 1.0 + deriv[i].dz_dg;
            for c in 0..n {
                if grad_g[i][c] != 0.0 {
                    row[c] += scale * grad_g[i][c];
                }
            }
            row[s_off + i] += deriv[i].dz_ds;
        }
        Ok(())
    }

    /// The reduced augmented Lagrangian
    ///
    /// ```text
    /// f(x,u) + sum_i [ -r ln z_i + s_i (z_i + g_i) + (z_i + g_i)^2 / (2 rho) ]
    /// ```
    ///
    /// with z eliminated through the shift formula. The s values are taken
    /// from `s_estimate`, not from the composite vector, so the multiplier
    /// estimate can be varied independently of the point. Only defined for
    /// SVF instances (the reference objective f(x,u) is needed).
    pub fn augmented_objective(
        &self,
        w: &[f64],
        s_estimate: &[f64],
    ) -> Result<f64, SmoothingError> {
        assert_eq!(s_estimate.len(), self.blocks.m);
        let p = self.blocks.point(w);
        let mut stack = Vec::new();
        let mut total = self.f_ref.eval_with(&p, &mut stack)?;
        for i in 0..self.blocks.m {
            let g = self.g_ref[i].value.eval_with(&p, &mut stack)?;
            let pair = shift(g, s_estimate[i], self.r, self.rho)?;
            if pair.z <= 0.0 {
                return Err(SmoothingError::NonpositiveZ);
            }
            let zg = pair.z + g;
            total += -self.r * pair.z.ln() + s_estimate[i] * zg + zg * zg / (2.0 * self.rho);
        }
        Ok(total)
    }

    /// Gradient of `augmented_objective` with respect to the stationarity
    /// block and to `s_estimate`, computed by direct differentiation of the
    /// formula (including the z chain terms). Algebraically this equals the
    /// (phi, psi) rows; the two routes are compared in tests.
    pub fn augmented_objective_grad(
        &self,
        w: &[f64],
        s_estimate: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>), SmoothingError> {
        let p = self.blocks.point(w);
        let mut stack = Vec::new();
        let (l, m) = (self.blocks.l, self.blocks.m);
        let stat_off = self.blocks.offset(self.stat_block);

        // d f / d u_j
        let mut du = vec![0.0; l];
        for (j, sf) in self.stat_f.iter().enumerate() {
            du[j] = sf.value.eval_with(&p, &mut stack)?;
        }
        let mut ds = vec![0.0; m];
        for i in 0..m {
            let g = self.g_ref[i].value.eval_with(&p, &mut stack)?;
            let d = shift_derivatives(g, s_estimate[i], self.r, self.rho)?;
            if d.pair.z <= 0.0 {
                return Err(SmoothingError::NonpositiveZ);
            }
            let zg = d.pair.z + g;
            // common factor of the terms through (z + g)
            let through = s_estimate[i] + zg / self.rho;
            for j in 0..l {
                let dg_duj = self.g_ref[i].grad[stat_off + j]
                    .as_ref()
                    .map(|c| c.eval_with(&p, &mut stack))
                    .transpose()?
                    .unwrap_or(0.0);
                let dz_duj = d.dz_dg * dg_duj;
                du[j] += -self.r / d.pair.z * dz_duj + through * (dz_duj + dg_duj);
            }
            // d z / d s with g fixed
            let dz_dsi = d.dz_ds;
            ds[i] = -self.r / d.pair.z * dz_dsi + zg + through * dz_dsi;
        }
        Ok((du, ds))
    }
}
