//! Dense convex QP solver for the per-tick control problem.
//!
//! Solves
//!
//! ```text
//! min ½ xᵀHx + gᵀx   s.t.   A x ≤ b,   lb ≤ x ≤ ub
//! ```
//!
//! with the Goldfarb–Idnani dual active-set method. The working set is kept
//! as a Cholesky factor of `H` plus a QR-like factorization that is updated
//! with Givens rotations when constraints enter or leave, so each pivot costs
//! O(n²). No feasible starting point is needed, and an infeasible problem is
//! detected when a violated constraint cannot be brought into the working set.
//!
//! Constraints are numbered `0..m` for the rows of `A`, then `m..m+n` for the
//! lower bounds and `m+n..m+2n` for the upper bounds.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a_ineq: DMatrix<f64>,
    pub b_ineq: DVector<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
}

impl QpProblem {
    /// Unconstrained problem with infinite bounds.
    pub fn new(h: DMatrix<f64>, g: DVector<f64>) -> Self {
        let n = g.len();
        Self {
            h,
            g,
            a_ineq: DMatrix::zeros(0, n),
            b_ineq: DVector::zeros(0),
            lb: DVector::from_element(n, f64::NEG_INFINITY),
            ub: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn with_inequalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_ineq = a;
        self.b_ineq = b;
        self
    }

    pub fn with_bounds(mut self, lb: DVector<f64>, ub: DVector<f64>) -> Self {
        self.lb = lb;
        self.ub = ub;
        self
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn num_inequalities(&self) -> usize {
        self.a_ineq.nrows()
    }

    /// Total number of constraint slots (rows, lower bounds, upper bounds).
    pub fn num_constraints(&self) -> usize {
        self.num_inequalities() + 2 * self.dim()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.g.dot(x)
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.dim();
        if self.h.shape() != (n, n) {
            return Err(QpError::DimensionMismatch(format!("H is {:?}, expected ({n}, {n})", self.h.shape())));
        }
        if self.a_ineq.ncols() != n || self.a_ineq.nrows() != self.b_ineq.len() {
            return Err(QpError::DimensionMismatch(format!(
                "A is {:?} with {} right-hand sides",
                self.a_ineq.shape(),
                self.b_ineq.len()
            )));
        }
        if self.lb.len() != n || self.ub.len() != n {
            return Err(QpError::DimensionMismatch("bounds length".into()));
        }
        if self.h.iter().chain(self.g.iter()).chain(self.a_ineq.iter()).any(|v| !v.is_finite()) {
            return Err(QpError::InvalidProblem("non-finite H, g or A".into()));
        }
        if self.b_ineq.iter().any(|v| v.is_nan()) {
            return Err(QpError::InvalidProblem("NaN in b".into()));
        }
        let scale = self.h.amax().max(1.0);
        if (&self.h - self.h.transpose()).amax() > 1e-10 * scale {
            return Err(QpError::InvalidProblem("H is not symmetric".into()));
        }
        if self.lb.iter().zip(self.ub.iter()).any(|(l, u)| !(l <= u)) {
            return Err(QpError::InvalidProblem("lb > ub".into()));
        }
        Ok(())
    }

    /// Constraint `i` in the form `a_iᵀx ≤ b_i`.
    fn row(&self, i: usize) -> Row<'_> {
        let m = self.num_inequalities();
        let n = self.dim();
        if i < m {
            Row::Dense(self, i)
        } else if i < m + n {
            Row::Axis { j: i - m, sign: -1.0, rhs: -self.lb[i - m] }
        } else {
            Row::Axis { j: i - m - n, sign: 1.0, rhs: self.ub[i - m - n] }
        }
    }
}

enum Row<'a> {
    Dense(&'a QpProblem, usize),
    Axis { j: usize, sign: f64, rhs: f64 },
}

impl Row<'_> {
    fn rhs(&self) -> f64 {
        match *self {
            Row::Dense(p, i) => p.b_ineq[i],
            Row::Axis { rhs, .. } => rhs,
        }
    }

    fn dot(&self, x: &DVector<f64>) -> f64 {
        match *self {
            Row::Dense(p, i) => p.a_ineq.row(i).transpose().dot(x),
            Row::Axis { j, sign, .. } => sign * x[j],
        }
    }

    fn dense(&self, n: usize) -> DVector<f64> {
        match *self {
            Row::Dense(p, i) => p.a_ineq.row(i).transpose(),
            Row::Axis { j, sign, .. } => {
                let mut v = DVector::zeros(n);
                v[j] = sign;
                v
            }
        }
    }

    fn norm(&self) -> f64 {
        match *self {
            Row::Dense(p, i) => p.a_ineq.row(i).norm(),
            Row::Axis { .. } => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIterations,
    Infeasible,
}

impl QpStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            QpStatus::Optimal => "optimal",
            QpStatus::MaxIterations => "max_iter",
            QpStatus::Infeasible => "infeasible",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub kkt_residual: f64,
    /// Active constraint indices, ascending.
    pub active_set: Vec<usize>,
    /// One multiplier per constraint slot, zero for inactive ones.
    pub multipliers: DVector<f64>,
    pub iterations: usize,
    /// Largest violation of the constraint that could not be added
    /// (only meaningful when infeasible).
    pub infeasibility: f64,
    /// Diagonal shift that was added to `H` to make it factorizable.
    pub regularization: f64,
}

/// Max of the scaled stationarity, primal feasibility, dual feasibility and
/// complementarity residuals of `(x, multipliers)`.
pub fn check_kkt(problem: &QpProblem, x: &DVector<f64>, multipliers: &DVector<f64>) -> f64 {
    let n = problem.dim();
    let hx = &problem.h * x;
    let mut grad = &hx + &problem.g;
    let mut primal: f64 = 0.0;
    let mut dual: f64 = 0.0;
    let mut comp: f64 = 0.0;
    for i in 0..problem.num_constraints() {
        let row = problem.row(i);
        let b = row.rhs();
        let mu = multipliers.get(i).copied().unwrap_or(0.0);
        if !b.is_finite() {
            dual = dual.max(mu.abs());
            continue;
        }
        let ax = row.dot(x);
        primal = primal.max(ax - b);
        dual = dual.max(-mu);
        comp = comp.max((mu * (b - ax)).abs() / b.abs().max(1.0));
        if mu != 0.0 {
            grad += row.dense(n) * mu;
        }
    }
    let scale = 1f64.max(problem.g.amax()).max(hx.amax());
    (grad.amax() / scale).max(primal).max(dual).max(comp)
}

#[derive(Debug, Clone)]
pub struct QpSolver {
    pub max_iterations: usize,
}

impl Default for QpSolver {
    fn default() -> Self {
        Self { max_iterations: 500 }
    }
}

impl QpSolver {
    pub fn new() -> Self {
        Self::default()
    }

    /// Solves `problem`. Constraints listed in `warm_start` are preferred when
    /// choosing which violated constraint enters next; the minimizer does not
    /// depend on it.
    pub fn solve(&mut self, problem: &QpProblem, warm_start: Option<&[usize]>) -> Result<QpSolution, QpError> {
        problem.validate()?;
        let n = problem.dim();
        let total = problem.num_constraints();

        let (chol, regularization) = factorize(&problem.h)?;
        // J = L⁻ᵀ so that J Jᵀ = H⁻¹
        let l = chol.l();
        let mut jmat = l
            .transpose()
            .solve_upper_triangular(&DMatrix::identity(n, n))
            .ok_or_else(|| QpError::InvalidProblem("singular Cholesky factor".into()))?;
        let mut x = -chol.solve(&problem.g);
        let mut r = DMatrix::<f64>::zeros(n, n);
        let mut active: Vec<usize> = Vec::with_capacity(n);
        let mut u: Vec<f64> = Vec::with_capacity(n);
        let mut in_active = vec![false; total];
        let mut preferred = vec![false; total];
        for &i in warm_start.unwrap_or(&[]) {
            if i < total {
                preferred[i] = true;
            }
        }

        let mut iterations = 0;
        let mut status = QpStatus::Optimal;
        let mut infeasibility = 0.0;

        'outer: loop {
            // pick the entering constraint
            let xnorm = x.amax();
            let mut pick: Option<(usize, f64, bool)> = None;
            for i in 0..total {
                if in_active[i] {
                    continue;
                }
                let row = problem.row(i);
                let b = row.rhs();
                if !b.is_finite() {
                    continue;
                }
                let slack = b - row.dot(&x);
                let tol = 1e-12 * b.abs().max(row.norm() * xnorm).max(1.0);
                if slack >= -tol {
                    continue;
                }
                let better = match pick {
                    None => true,
                    Some((_, best, best_pref)) => {
                        (preferred[i] && !best_pref) || (preferred[i] == best_pref && slack < best)
                    }
                };
                if better {
                    pick = Some((i, slack, preferred[i]));
                }
            }
            let Some((p, _, _)) = pick else { break };
            let np = -problem.row(p).dense(n); // n_pᵀx ≥ -b_p form
            let bp = -problem.row(p).rhs();
            let mut u_new = 0.0;

            loop {
                iterations += 1;
                if iterations > self.max_iterations {
                    status = QpStatus::MaxIterations;
                    break 'outer;
                }
                let q = active.len();
                let d = jmat.transpose() * &np;
                let mut z = DVector::zeros(n);
                for k in q..n {
                    z.axpy(d[k], &jmat.column(k), 1.0);
                }
                let rvec = if q > 0 {
                    r.view((0, 0), (q, q))
                        .solve_upper_triangular(&d.rows(0, q).into_owned())
                        .unwrap_or_else(|| DVector::zeros(q))
                } else {
                    DVector::zeros(0)
                };

                // partial (dual) step
                let mut t1 = f64::INFINITY;
                let mut drop_k = None;
                for k in 0..q {
                    if rvec[k] > 0.0 {
                        let ratio = u[k] / rvec[k];
                        if ratio < t1 {
                            t1 = ratio;
                            drop_k = Some(k);
                        }
                    }
                }
                // full (primal) step
                let tail: f64 = d.rows(q, n - q).norm_squared();
                let dependent = tail <= 1e-20 * d.norm_squared().max(f64::MIN_POSITIVE);
                let slack_p = np.dot(&x) - bp;
                let t2 = if dependent { f64::INFINITY } else { -slack_p / z.dot(&np) };

                let t = t1.min(t2);
                if !t.is_finite() {
                    status = QpStatus::Infeasible;
                    infeasibility = -slack_p;
                    break 'outer;
                }
                if !t2.is_finite() {
                    for k in 0..q {
                        u[k] -= t * rvec[k];
                    }
                    u_new += t;
                    let k = drop_k.expect("finite t1 has an index");
                    remove_constraint(&mut jmat, &mut r, &mut active, &mut u, &mut in_active, k);
                    continue;
                }
                x.axpy(t, &z, 1.0);
                for k in 0..q {
                    u[k] -= t * rvec[k];
                }
                u_new += t;
                if t2 <= t1 {
                    add_constraint(&mut jmat, &mut r, &d, q);
                    active.push(p);
                    u.push(u_new);
                    in_active[p] = true;
                    continue 'outer;
                }
                let k = drop_k.expect("partial step has an index");
                remove_constraint(&mut jmat, &mut r, &mut active, &mut u, &mut in_active, k);
            }
        }

        let mut multipliers = DVector::zeros(total);
        for (&i, &mu) in active.iter().zip(&u) {
            multipliers[i] = mu.max(0.0);
        }
        let mut active_set = active.clone();
        active_set.sort_unstable();
        let kkt_residual = check_kkt(problem, &x, &multipliers);
        Ok(QpSolution {
            objective: problem.objective(&x),
            x,
            status,
            kkt_residual,
            active_set,
            multipliers,
            iterations,
            infeasibility,
            regularization,
        })
    }
}

/// Cholesky of `H`, shifting the diagonal by ε = 1e-9·tr(H)/n (growing tenfold)
/// until it succeeds.
fn factorize(h: &DMatrix<f64>) -> Result<(nalgebra::Cholesky<f64, nalgebra::Dyn>, f64), QpError> {
    let n = h.nrows();
    if let Some(c) = h.clone().cholesky() {
        if c.l().diagonal().iter().all(|d| *d > 1e-12 * h.amax().max(1e-300).sqrt()) {
            return Ok((c, 0.0));
        }
    }
    let mut eps = 1e-9 * (h.trace() / n.max(1) as f64).abs().max(1e-12);
    for _ in 0..20 {
        let shifted = h + DMatrix::identity(n, n) * eps;
        if let Some(c) = shifted.cholesky() {
            return Ok((c, eps));
        }
        eps *= 10.0;
    }
    Err(QpError::InvalidProblem("H could not be regularized to positive definite".into()))
}

/// Appends a column to `R` after rotating `d = Jᵀn` so that only its first
/// `q + 1` entries are nonzero.
fn add_constraint(jmat: &mut DMatrix<f64>, r: &mut DMatrix<f64>, d: &DVector<f64>, q: usize) {
    let n = jmat.nrows();
    let mut d = d.clone();
    for j in ((q + 1)..n).rev() {
        let (a, b) = (d[j - 1], d[j]);
        if b == 0.0 {
            continue;
        }
        let h = a.hypot(b);
        let (c, s) = (a / h, b / h);
        d[j - 1] = h;
        d[j] = 0.0;
        for i in 0..n {
            let (x, y) = (jmat[(i, j - 1)], jmat[(i, j)]);
            jmat[(i, j - 1)] = c * x + s * y;
            jmat[(i, j)] = -s * x + c * y;
        }
    }
    for i in 0..=q {
        r[(i, q)] = d[i];
    }
}

/// Removes the `k`-th active constraint and restores the triangular `R`.
fn remove_constraint(
    jmat: &mut DMatrix<f64>,
    r: &mut DMatrix<f64>,
    active: &mut Vec<usize>,
    u: &mut Vec<f64>,
    in_active: &mut [bool],
    k: usize,
) {
    let n = jmat.nrows();
    let q = active.len();
    for col in k..q - 1 {
        for i in 0..n {
            r[(i, col)] = r[(i, col + 1)];
        }
    }
    for i in 0..n {
        r[(i, q - 1)] = 0.0;
    }
    for i in k..q - 1 {
        let (a, b) = (r[(i, i)], r[(i + 1, i)]);
        if b == 0.0 {
            continue;
        }
        let h = a.hypot(b);
        let (c, s) = (a / h, b / h);
        for col in i..q - 1 {
            let (x, y) = (r[(i, col)], r[(i + 1, col)]);
            r[(i, col)] = c * x + s * y;
            r[(i + 1, col)] = -s * x + c * y;
        }
        r[(i + 1, i)] = 0.0;
        for row in 0..n {
            let (x, y) = (jmat[(row, i)], jmat[(row, i + 1)]);
            jmat[(row, i)] = c * x + s * y;
            jmat[(row, i + 1)] = -s * x + c * y;
        }
    }
    in_active[active[k]] = false;
    active.remove(k);
    u.remove(k);
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use nalgebra::dvector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Minimum over every subset of rows treated as equalities, keeping only
    /// primal-feasible candidates.
    pub(crate) fn enumerate_active_sets(p: &QpProblem) -> Option<f64> {
        let n = p.dim();
        let m = p.num_inequalities();
        let mut best: Option<f64> = None;
        for mask in 0u32..(1 << m) {
            let rows: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
            let k = rows.len();
            let mut kkt = DMatrix::zeros(n + k, n + k);
            let mut rhs = DVector::zeros(n + k);
            kkt.view_mut((0, 0), (n, n)).copy_from(&p.h);
            rhs.rows_mut(0, n).copy_from(&(-&p.g));
            for (c, &i) in rows.iter().enumerate() {
                for j in 0..n {
                    kkt[(n + c, j)] = p.a_ineq[(i, j)];
                    kkt[(j, n + c)] = p.a_ineq[(i, j)];
                }
                rhs[n + c] = p.b_ineq[i];
            }
            let Some(sol) = kkt.lu().solve(&rhs) else { continue };
            let x = sol.rows(0, n).into_owned();
            if (&p.a_ineq * &x - &p.b_ineq).iter().all(|v| *v <= 1e-9) {
                let f = p.objective(&x);
                if best.is_none_or(|b| f < b) {
                    best = Some(f);
                }
            }
        }
        best
    }

    pub(crate) fn random_problem(rng: &mut ChaCha8Rng, n: usize, m: usize) -> QpProblem {
        let f = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let h = &f * f.transpose() + DMatrix::identity(n, n) * 0.1;
        let g = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
        let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        // x = 0 strictly feasible
        let b = DVector::from_fn(m, |_, _| rng.random_range(0.1..1.0));
        QpProblem::new(h, g).with_inequalities(a, b)
    }

    #[test]
    fn unconstrained_stationary_point() {
        let p = QpProblem::new(DMatrix::identity(2, 2), dvector![-1.0, -2.0]);
        let s = QpSolver::new().solve(&p, None).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.x.clone() - dvector![1.0, 2.0]).amax() < 1e-15);
        assert!(s.kkt_residual <= 1e-12);
        assert!(check_kkt(&p, &s.x, &s.multipliers) <= 1e-12);
    }

    #[test]
    fn clipped_coordinate() {
        let p = QpProblem::new(DMatrix::identity(2, 2), dvector![-1.0, -2.0])
            .with_bounds(dvector![f64::NEG_INFINITY, f64::NEG_INFINITY], dvector![0.5, f64::INFINITY]);
        let s = QpSolver::new().solve(&p, None).unwrap();
        assert!((s.x.clone() - dvector![0.5, 2.0]).amax() < 1e-12);
        assert_eq!(s.active_set, vec![2]);
        // hand KKT point: x = (0.5, 2), multiplier of x0 ≤ 0.5 is 1 - 0.5 = 0.5
        let mut mu = DVector::zeros(4);
        mu[2] = 0.5;
        assert!(check_kkt(&p, &dvector![0.5, 2.0], &mu) <= 1e-9);
    }

    #[test]
    fn perturbation_raises_residual() {
        let p = QpProblem::new(DMatrix::identity(2, 2), dvector![-1.0, -2.0]);
        let mu = DVector::zeros(4);
        assert!(check_kkt(&p, &dvector![1.001, 2.0], &mu) >= 1e-4);
    }

    #[test]
    fn matches_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let p = random_problem(&mut rng, 5, 4);
            let s = QpSolver::new().solve(&p, None).unwrap();
            assert_eq!(s.status, QpStatus::Optimal);
            assert!(s.kkt_residual <= 1e-8, "kkt {}", s.kkt_residual);
            let oracle = enumerate_active_sets(&p).unwrap();
            assert!((s.objective - oracle).abs() <= 1e-7, "{} vs {oracle}", s.objective);
        }
    }

    #[test]
    fn detects_infeasibility() {
        // x ≤ -1 and x ≥ 1
        let p = QpProblem::new(DMatrix::identity(1, 1), dvector![0.0])
            .with_inequalities(DMatrix::from_row_slice(2, 1, &[1.0, -1.0]), dvector![-1.0, -1.0]);
        let s = QpSolver::new().solve(&p, None).unwrap();
        assert_eq!(s.status, QpStatus::Infeasible);
        assert!(s.infeasibility > 0.5);
    }

    #[test]
    fn rejects_invalid_problems() {
        let mut h = DMatrix::identity(2, 2);
        h[(0, 1)] = 1.0;
        assert!(QpSolver::new().solve(&QpProblem::new(h, dvector![0.0, 0.0]), None).is_err());
        let p = QpProblem::new(DMatrix::identity(2, 2), dvector![0.0, 0.0]).with_bounds(dvector![1.0, 0.0], dvector![0.0, 1.0]);
        assert!(QpSolver::new().solve(&p, None).is_err());
        let p = QpProblem::new(DMatrix::identity(2, 2), dvector![0.0]);
        assert!(matches!(QpSolver::new().solve(&p, None), Err(QpError::DimensionMismatch(_))));
    }

    #[test]
    fn singular_hessian_is_regularized() {
        // rank-1 H with box bounds
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let p = QpProblem::new(h, dvector![-1.0, 0.0]).with_bounds(dvector![-1.0, -1.0], dvector![1.0, 1.0]);
        let s = QpSolver::new().solve(&p, None).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!(s.regularization > 0.0);
        // ½(x0+x1)² - x0 on the box is minimized at (1, -1)
        assert!((s.objective + 1.0).abs() < 1e-6, "{}", s.objective);
    }

    #[test]
    fn deterministic_and_warm_start_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let mut p = random_problem(&mut rng, 7, 12);
            p.lb = DVector::from_element(7, -0.5);
            p.ub = DVector::from_element(7, 0.5);
            let cold = QpSolver::new().solve(&p, None).unwrap();
            let again = QpSolver::new().solve(&p, None).unwrap();
            assert_eq!(cold.x, again.x);
            let warm = QpSolver::new().solve(&p, Some(&cold.active_set)).unwrap();
            assert!((&warm.x - &cold.x).amax() <= 1e-9);
            let warm2 = QpSolver::new().solve(&p, Some(&cold.active_set)).unwrap();
            assert_eq!(warm.x, warm2.x);
        }
    }

    #[test]
    fn objective_scaling_keeps_argmin() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let p = random_problem(&mut rng, 5, 6);
            let mut scaled = p.clone();
            scaled.h *= 37.5;
            scaled.g *= 37.5;
            let a = QpSolver::new().solve(&p, None).unwrap();
            let b = QpSolver::new().solve(&scaled, None).unwrap();
            assert!((a.x - b.x).amax() <= 1e-9);
        }
    }
}
