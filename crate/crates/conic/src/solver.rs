//! Primal-dual interior-point method.
//!
//! Internally the problem is the minimization
//!
//! ```text
//!     minimize    f(x) = -c'x - sum w log x
//!     subject to  A x = b,   G x + s = h,   s in K
//! ```
//!
//! where `K` is a product of half-lines (one per finite bound) and
//! three-dimensional second-order cones. A rotated cone on `(u, v, z)` maps to
//! the slack `(x_u + x_v, x_u - x_v, 2 x_z)`, which lies in the ordinary cone
//! `t >= |(a, b)|` exactly when `x_u x_v >= x_z^2` with `x_u, x_v >= 0`.
//!
//! Steps use Nesterov-Todd scaling and a Mehrotra predictor-corrector. The
//! log terms enter through their Hessian `diag(w / x^2)`. Each iteration
//! factors the reduced matrix `M = H + G' W^-2 G` once and solves
//!
//! ```text
//!     [ M  A' ] [dx]   [r1]
//!     [ A  0  ] [dy] = [r2]
//! ```
//!
//! through the Schur complement `A M^-1 A'`, falling back to a dense LU of
//! the whole block when `M` is singular. The start need not satisfy `Ax = b`.

use nalgebra::{DMatrix, DVector, Dyn, LU};

use crate::dense::Cholesky;

use crate::error::ConicError;
use crate::presolve::{independent_rows, RowSelection};
use crate::problem::{ConicProblem, RotatedCone};

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Relative tolerance on primal residual, dual residual and duality gap.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Upper bound on the centering factor `sigma = mu_target / mu` used by
    /// the corrector step.
    pub barrier_reduction: f64,
    /// Drop linearly dependent equality rows before solving.
    pub presolve: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { tolerance: 1e-8, max_iterations: 200, barrier_reduction: 0.5, presolve: true }
    }
}

impl SolverConfig {
    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    pub fn validate(&self) -> Result<(), ConicError> {
        if self.tolerance <= 0.0 || !self.tolerance.is_finite() {
            return Err(ConicError::BadConfig(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        if self.max_iterations == 0 {
            return Err(ConicError::BadConfig("max_iterations must be at least 1".into()));
        }
        if !(self.barrier_reduction > 0.0 && self.barrier_reduction <= 1.0) {
            return Err(ConicError::BadConfig(format!(
                "barrier_reduction must lie in (0, 1], got {}",
                self.barrier_reduction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Optimal,
    Infeasible,
    NumericalFailure,
}

/// Scaled KKT residuals at the returned point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Residuals {
    /// `|Ax - b|_inf / (1 + |b|_inf)`
    pub primal: f64,
    /// Stationarity residual, `/(1 + |grad F|_inf)`
    pub dual: f64,
    /// Larger of the duality gap and the cone complementarity `|s o z|`,
    /// `/(1 + |objective|)`
    pub complementarity: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        self.primal.max(self.dual).max(self.complementarity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub status: Status,
    pub x: Vec<f64>,
    /// `c'x + sum w log x` at `x`.
    pub objective: f64,
    pub residuals: Residuals,
    pub iterations: usize,
}

impl Solution {
    pub fn is_optimal(&self) -> bool {
        self.status == Status::Optimal
    }
}

/// Backend contract. The default backend is [`InteriorPoint`]; alternative
/// implementations can be plugged in for cross-validation.
pub trait ConicSolver: Send + Sync {
    fn solve(&self, problem: &ConicProblem, config: &SolverConfig) -> Result<Solution, ConicError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct InteriorPoint;

impl ConicSolver for InteriorPoint {
    fn solve(&self, problem: &ConicProblem, config: &SolverConfig) -> Result<Solution, ConicError> {
        solve(problem, config)
    }
}

/// Solves `problem` with the in-repo interior-point method.
pub fn solve(problem: &ConicProblem, config: &SolverConfig) -> Result<Solution, ConicError> {
    solve_from(problem, config, None)
}

/// Like [`solve`], starting from `start` instead of the default point. The
/// start must lie strictly inside every bound, cone and log domain; it need
/// not satisfy the equalities.
pub fn solve_from(
    problem: &ConicProblem,
    config: &SolverConfig,
    start: Option<&[f64]>,
) -> Result<Solution, ConicError> {
    problem.validate()?;
    config.validate()?;
    if let Some(x0) = start {
        check_start(problem, x0)?;
    }
    // Solve in units of the problem's own magnitude so that the iteration
    // does not depend on how the data happen to be scaled.
    let sigma = problem.magnitude();
    let scaled = problem.rescaled(sigma);
    let start: Option<Vec<f64>> = start.map(|x0| x0.iter().map(|v| v / sigma).collect());
    let Some(mut ipm) = Ipm::setup(&scaled, config, start.as_deref()) else {
        return Ok(Solution {
            status: Status::Infeasible,
            x: vec![0.0; problem.num_vars()],
            objective: f64::NAN,
            residuals: Residuals::default(),
            iterations: 0,
        });
    };
    let (status, iterations, residuals) = ipm.run(config);
    let x: Vec<f64> = ipm.x.iter().map(|v| v * sigma).collect();
    Ok(Solution { status, objective: problem.objective_value(&x), x, residuals, iterations })
}

/// Fraction of the distance to the boundary kept on each step.
const STEP_FRACTION: f64 = 0.99;
/// Relative margin keeping initial cone points off the boundary.
const CONE_MARGIN: f64 = 1e-3;
/// Consecutive short steps with a large primal residual before the problem
/// is declared infeasible.
const STALL_LIMIT: usize = 15;
/// Neighbourhood of the central path: every block keeps its smallest scaled
/// eigenvalue squared above this fraction of `mu`.
const CENTRALITY: f64 = 1e-2;

/// A finite bound as a half-line constraint `s = sign * (x_var - bound) >= 0`.
#[derive(Debug, Clone, Copy)]
struct Bound {
    var: usize,
    sign: f64,
    bound: f64,
}

impl Bound {
    fn slack(&self, x: &[f64]) -> f64 {
        self.sign * (x[self.var] - self.bound)
    }
}

/// Second-order cone slack `(x_u + x_v, x_u - x_v, 2 x_z)` of a rotated cone.
fn soc_slack(k: &RotatedCone, x: &[f64]) -> [f64; 3] {
    [x[k.u] + x[k.v], x[k.u] - x[k.v], 2.0 * x[k.z]]
}

/// `T' v` for the map `T` behind [`soc_slack`], as contributions to `(u, v, z)`.
fn soc_adjoint(v: &[f64; 3]) -> [f64; 3] {
    [v[0] + v[1], v[0] - v[1], 2.0 * v[2]]
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// `sqrt(t^2 - |x|^2)` computed without cancellation; `None` outside the cone.
fn soc_norm(a: &[f64; 3]) -> Option<f64> {
    let r = a[1].hypot(a[2]);
    let d = (a[0] - r) * (a[0] + r);
    (a[0] > r && d > 0.0).then(|| d.sqrt())
}

/// Jordan product `a o b`.
fn jordan(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [dot3(a, b), a[0] * b[1] + b[0] * a[1], a[0] * b[2] + b[0] * a[2]]
}

/// Solves `l o x = r` for `x`.
fn jordan_div(l: &[f64; 3], r: &[f64; 3]) -> [f64; 3] {
    let det = (l[0] - l[1].hypot(l[2])) * (l[0] + l[1].hypot(l[2]));
    let x0 = (l[0] * r[0] - l[1] * r[1] - l[2] * r[2]) / det;
    [x0, (r[1] - x0 * l[1]) / l[0], (r[2] - x0 * l[2]) / l[0]]
}

/// Nesterov-Todd scaling `W = beta [[w0, w1'], [w1, I + w1 w1' / (1 + w0)]]`
/// of one second-order cone, with `W z = W^-1 s`.
#[derive(Debug, Clone, Copy)]
struct NtScaling {
    beta: f64,
    w: [f64; 3],
}

impl NtScaling {
    fn new(s: &[f64; 3], z: &[f64; 3]) -> Option<Self> {
        let (sn, zn) = (soc_norm(s)?, soc_norm(z)?);
        let sb = [s[0] / sn, s[1] / sn, s[2] / sn];
        let zb = [z[0] / zn, z[1] / zn, z[2] / zn];
        let gamma = ((1.0 + dot3(&sb, &zb)) / 2.0).sqrt();
        let w = [
            (sb[0] + zb[0]) / (2.0 * gamma),
            (sb[1] - zb[1]) / (2.0 * gamma),
            (sb[2] - zb[2]) / (2.0 * gamma),
        ];
        Some(Self { beta: (sn / zn).sqrt(), w })
    }

    fn apply(&self, v: &[f64; 3], inverse: bool) -> [f64; 3] {
        let (scale, sign) = if inverse { (1.0 / self.beta, -1.0) } else { (self.beta, 1.0) };
        let w = &self.w;
        let w1v1 = w[1] * v[1] + w[2] * v[2];
        let head = w[0] * v[0] + sign * w1v1;
        let k = sign * v[0] + w1v1 / (1.0 + w[0]);
        [scale * head, scale * (v[1] + k * w[1]), scale * (v[2] + k * w[2])]
    }

    fn mul(&self, v: &[f64; 3]) -> [f64; 3] {
        self.apply(v, false)
    }

    fn inv(&self, v: &[f64; 3]) -> [f64; 3] {
        self.apply(v, true)
    }

    /// `W^-2` as a dense 3x3 matrix.
    fn inv_square(&self) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for (c, e) in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]].iter().enumerate() {
            let col = self.inv(&self.inv(e));
            for r in 0..3 {
                out[r][c] = col[r];
            }
        }
        out
    }
}

/// Largest `alpha` with `a + alpha d` in the cone, or infinity.
fn soc_max_step(a: &[f64; 3], d: &[f64; 3]) -> f64 {
    let mut alpha = f64::INFINITY;
    if d[0] < 0.0 {
        alpha = -a[0] / d[0];
    }
    let c0 = (a[0] - a[1].hypot(a[2])) * (a[0] + a[1].hypot(a[2]));
    let c1 = 2.0 * (a[0] * d[0] - a[1] * d[1] - a[2] * d[2]);
    let c2 = d[0] * d[0] - d[1] * d[1] - d[2] * d[2];
    if let Some(root) = first_positive_root(c0, c1, c2) {
        alpha = alpha.min(root);
    }
    alpha
}

struct Ipm {
    n: usize,
    a: DMatrix<f64>,
    /// `a` in row-major order.
    a_rows: Vec<f64>,
    b: DVector<f64>,
    /// Linear part of the minimization gradient (`-c`).
    lin: DVector<f64>,
    log_w: Vec<f64>,
    log_vars: Vec<usize>,
    bounds: Vec<Bound>,
    cones: Vec<RotatedCone>,
    x: DVector<f64>,
    y: DVector<f64>,
    sl: Vec<f64>,
    zl: Vec<f64>,
    sc: Vec<[f64; 3]>,
    zc: Vec<[f64; 3]>,
}

/// Residuals and scalings at the current iterate.
struct Eval {
    grad: DVector<f64>,
    rx: DVector<f64>,
    ry: DVector<f64>,
    /// `s - (h - G x)` per bound and per cone.
    rl: Vec<f64>,
    rc: Vec<[f64; 3]>,
    gap: f64,
    lam_l: Vec<f64>,
    nt: Vec<NtScaling>,
    lam_c: Vec<[f64; 3]>,
}

/// Complementarity right-hand sides `r` in `lambda o (ds~ + dz~) = r`.
struct Targets {
    l: Vec<f64>,
    c: Vec<[f64; 3]>,
}

struct Direction {
    dx: DVector<f64>,
    dy: DVector<f64>,
    dsl: Vec<f64>,
    dzl: Vec<f64>,
    dsc: Vec<[f64; 3]>,
    dzc: Vec<[f64; 3]>,
}

impl Direction {
    fn is_finite(&self) -> bool {
        self.dx.iter().chain(self.dy.iter()).chain(&self.dsl).chain(&self.dzl).all(|v| v.is_finite())
            && self.dsc.iter().chain(&self.dzc).flatten().all(|v| v.is_finite())
    }
}

impl Ipm {
    /// Builds the internal form; returns `None` when presolve proves the
    /// equalities inconsistent.
    fn setup(problem: &ConicProblem, config: &SolverConfig, start: Option<&[f64]>) -> Option<Self> {
        let n = problem.num_vars();
        let (lo, hi) = (problem.lower(), problem.upper());

        let mut rows: Vec<(Vec<f64>, f64)> = problem
            .equalities()
            .iter()
            .map(|eq| {
                let mut dense = vec![0.0; n];
                for &(j, a) in &eq.coeffs {
                    dense[j] += a;
                }
                (dense, eq.rhs)
            })
            .collect();
        // Fixed variables become equality rows.
        for j in 0..n {
            if lo[j] == hi[j] {
                let mut dense = vec![0.0; n];
                dense[j] = 1.0;
                rows.push((dense, lo[j]));
            }
        }
        if config.presolve {
            match independent_rows(&rows, 1e-10) {
                RowSelection::Independent(keep) => {
                    rows = keep.into_iter().map(|i| rows[i].clone()).collect();
                }
                RowSelection::Inconsistent { .. } => return None,
            }
        }
        let m = rows.len();
        let a = DMatrix::from_fn(m, n, |i, j| rows[i].0[j]);
        let b = DVector::from_iterator(m, rows.iter().map(|r| r.1));

        let mut log_w = vec![0.0; n];
        for t in problem.log_terms() {
            log_w[t.var] += t.weight;
        }
        let log_vars: Vec<usize> = (0..n).filter(|&j| log_w[j] > 0.0).collect();
        let mut bounds = Vec::new();
        for j in 0..n {
            if lo[j] < hi[j] {
                if lo[j].is_finite() {
                    bounds.push(Bound { var: j, sign: 1.0, bound: lo[j] });
                }
                if hi[j].is_finite() {
                    bounds.push(Bound { var: j, sign: -1.0, bound: hi[j] });
                }
            }
        }
        let cones = problem.cones().to_vec();

        let mut x = start.map_or_else(|| initial_point(problem), <[f64]>::to_vec);
        for j in 0..n {
            if lo[j] == hi[j] {
                x[j] = lo[j];
            }
        }
        let lin = DVector::from_iterator(n, problem.objective().iter().map(|c| -c));

        // Perfectly centred start: s from x, z = mu0 s^-1.
        let mu0 = lin.amax().max(log_w.iter().cloned().fold(0.0, f64::max)).max(1.0);
        let sl: Vec<f64> = bounds.iter().map(|bd| bd.slack(&x)).collect();
        let zl = sl.iter().map(|s| mu0 / s).collect();
        let sc: Vec<[f64; 3]> = cones.iter().map(|k| soc_slack(k, &x)).collect();
        let zc = sc
            .iter()
            .map(|s| {
                let d = soc_norm(s).map_or(f64::MIN_POSITIVE, |r| r * r);
                [mu0 * s[0] / d, -mu0 * s[1] / d, -mu0 * s[2] / d]
            })
            .collect();
        let a_rows = rows.iter().flat_map(|r| r.0.iter().copied()).collect();
        Some(Ipm {
            n,
            a,
            a_rows,
            b,
            lin,
            log_w,
            log_vars,
            bounds,
            cones,
            x: DVector::from_vec(x),
            y: DVector::zeros(m),
            sl,
            zl,
            sc,
            zc,
        })
    }

    fn degree(&self) -> f64 {
        (self.bounds.len() + self.cones.len()) as f64
    }

    fn evaluate(&self) -> Option<Eval> {
        let x = self.x.as_slice();
        let mut grad = self.lin.clone();
        for &j in &self.log_vars {
            grad[j] -= self.log_w[j] / x[j];
        }
        // r_x = grad f + A'y + G'z with G = -sign e_j for bounds and -T for cones.
        let mut rx = &grad + self.a.tr_mul(&self.y);
        for (bd, z) in self.bounds.iter().zip(&self.zl) {
            rx[bd.var] -= bd.sign * z;
        }
        for (k, z) in self.cones.iter().zip(&self.zc) {
            let t = soc_adjoint(z);
            rx[k.u] -= t[0];
            rx[k.v] -= t[1];
            rx[k.z] -= t[2];
        }
        let ry = &self.a * &self.x - &self.b;
        let rl = self.bounds.iter().zip(&self.sl).map(|(bd, s)| s - bd.slack(x)).collect();
        let rc = self
            .cones
            .iter()
            .zip(&self.sc)
            .map(|(k, s)| {
                let t = soc_slack(k, x);
                [s[0] - t[0], s[1] - t[1], s[2] - t[2]]
            })
            .collect();
        let gap = self.sl.iter().zip(&self.zl).map(|(s, z)| s * z).sum::<f64>()
            + self.sc.iter().zip(&self.zc).map(|(s, z)| dot3(s, z)).sum::<f64>();
        let lam_l = self.sl.iter().zip(&self.zl).map(|(s, z)| (s * z).sqrt()).collect();
        let mut nt = Vec::with_capacity(self.cones.len());
        let mut lam_c = Vec::with_capacity(self.cones.len());
        for (s, z) in self.sc.iter().zip(&self.zc) {
            let w = NtScaling::new(s, z)?;
            lam_c.push(w.mul(z));
            nt.push(w);
        }
        Some(Eval { grad, rx, ry, rl, rc, gap, lam_l, nt, lam_c })
    }

    /// Scaled residuals and the scaled gap `s'z` on its own.
    fn residuals(&self, ev: &Eval) -> (Residuals, f64) {
        let mut primal = if ev.ry.is_empty() { 0.0 } else { ev.ry.amax() / (1.0 + self.b.amax()) };
        let cone_scale = 1.0 + self.bounds.iter().map(|bd| bd.bound.abs()).fold(0.0, f64::max);
        let cone_res = ev
            .rl
            .iter()
            .map(|r| r.abs())
            .chain(ev.rc.iter().flat_map(|r| r.iter().map(|v| v.abs())))
            .fold(0.0, f64::max);
        primal = primal.max(cone_res / cone_scale);
        let dual = ev.rx.amax() / (1.0 + ev.grad.amax());
        let x = self.x.as_slice();
        let lin: f64 = -self.lin.dot(&self.x);
        let logs: f64 = self.log_vars.iter().map(|&j| self.log_w[j] * x[j].ln()).sum();
        // s'z alone lets a cone pair sit on the boundary slightly rotated
        // against each other, which costs half the digits in x; the vector
        // part of the Jordan product s o z measures that rotation.
        let twist = self
            .sc
            .iter()
            .zip(&self.zc)
            .map(|(s, z)| {
                let p = jordan(s, z);
                p[1].hypot(p[2])
            })
            .fold(0.0, f64::max);
        let scale = 1.0 + (lin + logs).abs();
        (Residuals { primal, dual, complementarity: ev.gap.max(twist) / scale }, ev.gap / scale)
    }

    /// Reduced matrix `M = H + G' W^-2 G`, row-major.
    fn newton_matrix(&self, ev: &Eval) -> Vec<f64> {
        let x = self.x.as_slice();
        let n = self.n;
        let mut m = vec![0.0; n * n];
        for &j in &self.log_vars {
            m[j * n + j] += self.log_w[j] / (x[j] * x[j]);
        }
        for ((bd, s), z) in self.bounds.iter().zip(&self.sl).zip(&self.zl) {
            m[bd.var * n + bd.var] += z / s;
        }
        // T maps (u, v, z) to the cone slack.
        const T: [[f64; 3]; 3] = [[1.0, 1.0, 0.0], [1.0, -1.0, 0.0], [0.0, 0.0, 2.0]];
        for (k, w) in self.cones.iter().zip(&ev.nt) {
            let phi = w.inv_square();
            let idx = [k.u, k.v, k.z];
            for a in 0..3 {
                for b in 0..3 {
                    let mut acc = 0.0;
                    for p in 0..3 {
                        for q in 0..3 {
                            acc += T[p][a] * phi[p][q] * T[q][b];
                        }
                    }
                    m[idx[a] * n + idx[b]] += acc;
                }
            }
        }
        m
    }

    /// Solves the linearized KKT system for complementarity targets `t`.
    fn direction(&self, ev: &Eval, fac: &Factor, t: &Targets) -> Direction {
        // q = W^-2 r_z + W^-1 (lambda \ t); then r1 = -r_x - G'q.
        let ql: Vec<f64> = (0..self.bounds.len())
            .map(|i| {
                let (s, z) = (self.sl[i], self.zl[i]);
                (z / s) * ev.rl[i] + t.l[i] / s
            })
            .collect();
        let qc: Vec<[f64; 3]> = (0..self.cones.len())
            .map(|i| {
                let w = &ev.nt[i];
                let a = w.inv(&w.inv(&ev.rc[i]));
                let b = w.inv(&jordan_div(&ev.lam_c[i], &t.c[i]));
                [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
            })
            .collect();
        let mut r1 = -&ev.rx;
        for (bd, q) in self.bounds.iter().zip(&ql) {
            r1[bd.var] += bd.sign * q;
        }
        for (k, q) in self.cones.iter().zip(&qc) {
            let tq = soc_adjoint(q);
            r1[k.u] += tq[0];
            r1[k.v] += tq[1];
            r1[k.z] += tq[2];
        }
        let r2 = -&ev.ry;
        let (dx, dy) = fac.solve(&self.a_rows, &r1, &r2);

        // G dx per block, then ds = -r_z - G dx and dz = W^-2 G dx + q.
        let mut dsl = Vec::with_capacity(self.bounds.len());
        let mut dzl = Vec::with_capacity(self.bounds.len());
        for (i, bd) in self.bounds.iter().enumerate() {
            let gdx = -bd.sign * dx[bd.var];
            dsl.push(-ev.rl[i] - gdx);
            dzl.push((self.zl[i] / self.sl[i]) * gdx + ql[i]);
        }
        let mut dsc = Vec::with_capacity(self.cones.len());
        let mut dzc = Vec::with_capacity(self.cones.len());
        for (i, k) in self.cones.iter().enumerate() {
            let t = soc_slack(k, dx.as_slice());
            let gdx = [-t[0], -t[1], -t[2]];
            let w = &ev.nt[i];
            let p = w.inv(&w.inv(&gdx));
            dsc.push([-ev.rc[i][0] - gdx[0], -ev.rc[i][1] - gdx[1], -ev.rc[i][2] - gdx[2]]);
            dzc.push([p[0] + qc[i][0], p[1] + qc[i][1], p[2] + qc[i][2]]);
        }
        Direction { dx, dy, dsl, dzl, dsc, dzc }
    }

    /// Largest step in `(0, 1]` keeping slacks, multipliers and log
    /// variables interior, scaled by `fraction`.
    fn step_length(&self, d: &Direction, fraction: f64) -> f64 {
        let mut alpha = f64::INFINITY;
        let mut limit = |value: f64, delta: f64| {
            if delta < 0.0 {
                alpha = alpha.min(-value / delta);
            }
        };
        for i in 0..self.bounds.len() {
            limit(self.sl[i], d.dsl[i]);
            limit(self.zl[i], d.dzl[i]);
        }
        for &j in &self.log_vars {
            limit(self.x[j], d.dx[j]);
        }
        for i in 0..self.cones.len() {
            alpha = alpha.min(soc_max_step(&self.sc[i], &d.dsc[i]));
            alpha = alpha.min(soc_max_step(&self.zc[i], &d.dzc[i]));
        }
        (fraction * alpha).min(1.0)
    }

    fn gap_after(&self, d: &Direction, alpha: f64) -> f64 {
        let mut gap = 0.0;
        for i in 0..self.bounds.len() {
            gap += (self.sl[i] + alpha * d.dsl[i]) * (self.zl[i] + alpha * d.dzl[i]);
        }
        for i in 0..self.cones.len() {
            let s = self.sc[i];
            let z = self.zc[i];
            for c in 0..3 {
                gap += (s[c] + alpha * d.dsc[i][c]) * (z[c] + alpha * d.dzc[i][c]);
            }
        }
        gap
    }

    /// `min_k lambda_min(k)^2 / mu` after a step of length `alpha`, where
    /// `lambda` is the scaled point of block `k`. For a cone, the two
    /// eigenvalues `e1, e2` satisfy `e1 e2 = sqrt(det s det z)` and
    /// `e1^2 + e2^2 = 2 s'z`.
    fn centrality_after(&self, d: &Direction, alpha: f64) -> f64 {
        let nu = self.degree();
        if nu == 0.0 {
            return f64::INFINITY;
        }
        let mu = self.gap_after(d, alpha) / nu;
        let mut worst = f64::INFINITY;
        for i in 0..self.bounds.len() {
            worst = worst.min((self.sl[i] + alpha * d.dsl[i]) * (self.zl[i] + alpha * d.dzl[i]));
        }
        for i in 0..self.cones.len() {
            let s: [f64; 3] = std::array::from_fn(|c| self.sc[i][c] + alpha * d.dsc[i][c]);
            let z: [f64; 3] = std::array::from_fn(|c| self.zc[i][c] + alpha * d.dzc[i][c]);
            let (Some(sn), Some(zn)) = (soc_norm(&s), soc_norm(&z)) else {
                return 0.0;
            };
            let (p, q) = (sn * zn, dot3(&s, &z));
            let e = 0.5 * ((2.0 * (q + p)).sqrt() - (2.0 * (q - p)).max(0.0).sqrt());
            worst = worst.min(e * e);
        }
        worst / mu
    }

    fn apply(&mut self, d: &Direction, alpha: f64) {
        self.x.axpy(alpha, &d.dx, 1.0);
        self.y.axpy(alpha, &d.dy, 1.0);
        for (v, dv) in self.sl.iter_mut().zip(&d.dsl).chain(self.zl.iter_mut().zip(&d.dzl)) {
            *v += alpha * dv;
        }
        for (v, dv) in self.sc.iter_mut().zip(&d.dsc).chain(self.zc.iter_mut().zip(&d.dzc)) {
            for c in 0..3 {
                v[c] += alpha * dv[c];
            }
        }
    }

    /// Targets `sigma mu e - lambda o lambda - (ds~ o dz~)` where the last
    /// term is the Mehrotra correction from `aff`, if given.
    fn targets(&self, ev: &Eval, target: f64, aff: Option<&Direction>) -> Targets {
        let l = (0..self.bounds.len())
            .map(|i| {
                let corr = aff.map_or(0.0, |d| d.dsl[i] * d.dzl[i]);
                target - ev.lam_l[i] * ev.lam_l[i] - corr
            })
            .collect();
        let c = (0..self.cones.len())
            .map(|i| {
                let lam = &ev.lam_c[i];
                let ll = jordan(lam, lam);
                let corr = aff.map_or([0.0; 3], |d| {
                    let w = &ev.nt[i];
                    jordan(&w.inv(&d.dsc[i]), &w.mul(&d.dzc[i]))
                });
                [target - ll[0] - corr[0], -ll[1] - corr[1], -ll[2] - corr[2]]
            })
            .collect();
        Targets { l, c }
    }

    fn run(&mut self, config: &SolverConfig) -> (Status, usize, Residuals) {
        let tol = config.tolerance;
        let nu = self.degree();
        let mut stalled = 0usize;
        let mut last = Residuals::default();
        for iter in 0..config.max_iterations {
            let Some(ev) = self.evaluate() else {
                return (Status::NumericalFailure, iter, last);
            };
            let (res, gap) = self.residuals(&ev);
            last = res;
            if res.primal <= tol && res.dual <= tol && res.complementarity <= tol {
                return (Status::Optimal, iter, res);
            }
            if self.x.iter().any(|v| !v.is_finite() || v.abs() > 1e15) {
                return (Status::NumericalFailure, iter, res);
            }
            let Some(fac) = Factor::new(self.newton_matrix(&ev), self.n, &self.a_rows, &self.a) else {
                return (Status::NumericalFailure, iter, res);
            };
            let mu = if nu > 0.0 { ev.gap / nu } else { 0.0 };

            // Once only the cone twist is left, re-centre at the current mu.
            let polish = res.primal <= tol && gap <= tol;
            let (mut dir, mut alpha) = if polish {
                let dir = self.direction(&ev, &fac, &self.targets(&ev, mu, None));
                let alpha = self.step_length(&dir, STEP_FRACTION);
                (dir, alpha)
            } else {
                let aff = self.direction(&ev, &fac, &self.targets(&ev, 0.0, None));
                let alpha_aff = self.step_length(&aff, 1.0);
                let sigma = if mu > 0.0 {
                    let mu_aff = self.gap_after(&aff, alpha_aff) / nu;
                    (mu_aff / mu).max(0.0).powi(3).min(config.barrier_reduction)
                } else {
                    0.0
                };
                let dir = self.direction(&ev, &fac, &self.targets(&ev, sigma * mu, Some(&aff)));
                let alpha = self.step_length(&dir, STEP_FRACTION);
                (dir, alpha)
            };
            if alpha < 1e-8 {
                // The corrector can overshoot far from the central path;
                // fall back to a pure centering step.
                dir = self.direction(&ev, &fac, &self.targets(&ev, mu, None));
                alpha = self.step_length(&dir, STEP_FRACTION);
            }
            if !alpha.is_finite() || alpha <= 0.0 || !dir.is_finite() {
                return (Status::NumericalFailure, iter, res);
            }
            // Never demand more centrality than the current point has.
            let floor = CENTRALITY.min(0.5 * self.centrality_after(&dir, 0.0));
            for _ in 0..30 {
                if self.centrality_after(&dir, alpha) >= floor {
                    break;
                }
                alpha *= 0.8;
            }
            self.apply(&dir, alpha);

            if res.primal > tol && alpha < 1e-3 {
                stalled += 1;
                if stalled >= STALL_LIMIT {
                    return (Status::Infeasible, iter + 1, res);
                }
            } else {
                stalled = 0;
            }
        }
        let status = if last.primal > tol.sqrt() { Status::Infeasible } else { Status::NumericalFailure };
        (status, config.max_iterations, last)
    }
}

/// Factorization of the reduced Newton system, either through Cholesky of
/// `M` and of `A M^-1 A'`, or as a dense LU of the full block matrix.
struct Factor {
    /// `M`, row-major, kept for refinement.
    m: Vec<f64>,
    kind: FactorKind,
}

enum FactorKind {
    Schur {
        m_chol: Cholesky,
        s_chol: Option<Cholesky>,
        /// Row `i` holds `M^-1 a_i` for equality row `a_i`.
        m_inv_at: Vec<f64>,
    },
    Full(LU<f64, Dyn, Dyn>),
}

/// Rounds of iterative refinement on each Newton solve.
const REFINEMENT_ROUNDS: usize = 2;

impl Factor {
    fn new(m: Vec<f64>, n: usize, a_rows: &[f64], a: &DMatrix<f64>) -> Option<Self> {
        let kind = FactorKind::new(&m, n, a_rows, a)?;
        Some(Factor { m, kind })
    }

    /// Solves `M dx + A' dy = r1`, `A dx = r2`, refining against the
    /// residual of the unfactored system.
    fn solve(&self, a_rows: &[f64], r1: &DVector<f64>, r2: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let n = r1.len();
        let (mut dx, mut dy) = self.kind.solve(a_rows, r1, r2);
        for _ in 0..REFINEMENT_ROUNDS {
            let mut e1 = r1.clone();
            for (i, row) in self.m.chunks(n).enumerate() {
                e1[i] -= row.iter().zip(dx.iter()).map(|(p, q)| p * q).sum::<f64>();
            }
            let mut e2 = r2.clone();
            for (k, ai) in a_rows.chunks(n).enumerate() {
                let yk = dy[k];
                let mut acc = 0.0;
                for (j, a) in ai.iter().enumerate() {
                    e1[j] -= a * yk;
                    acc += a * dx[j];
                }
                e2[k] -= acc;
            }
            let (cx, cy) = self.kind.solve(a_rows, &e1, &e2);
            if !(cx.iter().chain(cy.iter()).all(|v| v.is_finite())) {
                break;
            }
            dx += cx;
            dy += cy;
        }
        (dx, dy)
    }
}

impl FactorKind {
    fn new(m: &[f64], n: usize, a_rows: &[f64], a: &DMatrix<f64>) -> Option<Self> {
        let k = a.nrows();
        if let Some(m_chol) = Cholesky::new(m.to_vec(), n) {
            if k == 0 {
                return Some(FactorKind::Schur { m_chol, s_chol: None, m_inv_at: Vec::new() });
            }
            let mut m_inv_at = a_rows.to_vec();
            for row in m_inv_at.chunks_mut(n) {
                m_chol.solve_in_place(row);
            }
            let mut s = vec![0.0; k * k];
            for i in 0..k {
                let ai = &a_rows[i * n..(i + 1) * n];
                for j in 0..=i {
                    let v: f64 = ai.iter().zip(&m_inv_at[j * n..(j + 1) * n]).map(|(p, q)| p * q).sum();
                    s[i * k + j] = v;
                    s[j * k + i] = v;
                }
            }
            if let Some(s_chol) = Cholesky::new(s, k) {
                return Some(FactorKind::Schur { m_chol, s_chol: Some(s_chol), m_inv_at });
            }
        }
        let mut kkt = DMatrix::zeros(n + k, n + k);
        for i in 0..n {
            for j in 0..n {
                kkt[(i, j)] = m[i * n + j];
            }
        }
        kkt.view_mut((0, n), (n, k)).copy_from(&a.transpose());
        kkt.view_mut((n, 0), (k, n)).copy_from(a);
        let lu = LU::new(kkt);
        lu.is_invertible().then_some(FactorKind::Full(lu))
    }

    fn solve(&self, a_rows: &[f64], r1: &DVector<f64>, r2: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        match self {
            FactorKind::Schur { m_chol, s_chol, m_inv_at } => {
                let n = r1.len();
                let mut dx = r1.as_slice().to_vec();
                m_chol.solve_in_place(&mut dx);
                match s_chol {
                    None => (DVector::from_vec(dx), DVector::zeros(0)),
                    Some(s_chol) => {
                        // A M^-1 (r1 - A' dy) = r2
                        let mut dy: Vec<f64> = a_rows
                            .chunks(n)
                            .zip(r2.iter())
                            .map(|(ai, r)| ai.iter().zip(&dx).map(|(p, q)| p * q).sum::<f64>() - r)
                            .collect();
                        s_chol.solve_in_place(&mut dy);
                        for (row, yi) in m_inv_at.chunks(n).zip(&dy) {
                            for (d, v) in dx.iter_mut().zip(row) {
                                *d -= v * yi;
                            }
                        }
                        (DVector::from_vec(dx), DVector::from_vec(dy))
                    }
                }
            }
            FactorKind::Full(lu) => {
                let n = r1.len();
                let mut rhs = DVector::zeros(n + r2.len());
                rhs.rows_mut(0, n).copy_from(r1);
                rhs.rows_mut(n, r2.len()).copy_from(r2);
                let sol = lu.solve(&rhs).unwrap_or_else(|| DVector::from_element(rhs.len(), f64::NAN));
                (sol.rows(0, n).into_owned(), sol.rows(n, r2.len()).into_owned())
            }
        }
    }
}

fn check_start(problem: &ConicProblem, x0: &[f64]) -> Result<(), ConicError> {
    let n = problem.num_vars();
    if x0.len() != n {
        return Err(ConicError::BadStart(format!("expected {n} entries, got {}", x0.len())));
    }
    let (lo, hi) = (problem.lower(), problem.upper());
    for j in 0..n {
        if lo[j] < hi[j] && !(x0[j] > lo[j] && x0[j] < hi[j]) {
            return Err(ConicError::BadStart(format!("variable {j} is not strictly inside its bounds")));
        }
    }
    for t in problem.log_terms() {
        if x0[t.var] <= 0.0 || x0[t.var].is_nan() {
            return Err(ConicError::BadStart(format!("log variable {} must be positive", t.var)));
        }
    }
    for k in problem.cones() {
        if !(x0[k.u] > 0.0 && x0[k.v] > 0.0 && k.slack(x0) > 0.0) {
            return Err(ConicError::BadStart(format!("cone ({}, {}, {}) is not strictly satisfied", k.u, k.v, k.z)));
        }
    }
    Ok(())
}

/// Smallest positive root of `c0 + c1 t + c2 t^2` given `c0 > 0`.
fn first_positive_root(c0: f64, c1: f64, c2: f64) -> Option<f64> {
    let scale = c1.abs().max(c2.abs()).max(c0.abs());
    if c2.abs() <= 1e-300 || c2.abs() <= 1e-15 * scale {
        return (c1 < 0.0).then(|| -c0 / c1);
    }
    let disc = c1 * c1 - 4.0 * c2 * c0;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    // Numerically stable pair of roots.
    let q = -0.5 * (c1 + c1.signum() * sq);
    let mut roots = [q / c2, if q != 0.0 { c0 / q } else { f64::INFINITY }];
    roots.sort_by(f64::total_cmp);
    roots.into_iter().find(|&r| r > 0.0 && r.is_finite())
}

/// Analytic centre of the box bounds, with cone members pushed into the
/// strict interior.
fn initial_point(problem: &ConicProblem) -> Vec<f64> {
    let (lo, hi) = (problem.lower(), problem.upper());
    let n = problem.num_vars();
    let mut x: Vec<f64> = (0..n)
        .map(|j| match (lo[j].is_finite(), hi[j].is_finite()) {
            (true, true) => 0.5 * (lo[j] + hi[j]),
            (true, false) => lo[j] + lo[j].abs().max(1.0),
            (false, true) => hi[j] - hi[j].abs().max(1.0),
            (false, false) => 0.0,
        })
        .collect();
    let free = |j: usize| !lo[j].is_finite() && !hi[j].is_finite();
    for t in problem.log_terms() {
        if x[t.var] <= 0.0 {
            x[t.var] = if hi[t.var].is_finite() { 0.5 * hi[t.var] } else { 1.0 };
        }
    }
    // Free cone sides start at 1.
    for k in problem.cones() {
        for j in [k.u, k.v] {
            if x[j] <= 0.0 && free(j) {
                x[j] = 1.0;
            }
        }
    }
    // Free cone centres start just inside the boundary; shared ones take the
    // tightest value over all cones they belong to.
    let mut z_target: Vec<Option<f64>> = vec![None; n];
    for k in problem.cones() {
        if free(k.z) {
            let r = (1.0 - CONE_MARGIN) * (x[k.u].max(0.0) * x[k.v].max(0.0)).sqrt();
            z_target[k.z] = Some(z_target[k.z].map_or(r, |t: f64| t.min(r)));
        }
    }
    for (j, t) in z_target.into_iter().enumerate() {
        if let Some(t) = t {
            x[j] = t;
        }
    }
    // Anything still on or outside a cone boundary gets its centre shrunk.
    for k in problem.cones() {
        let (u, v) = (x[k.u], x[k.v]);
        if u > 0.0 && v > 0.0 {
            let cap = (1.0 - CONE_MARGIN) * (u * v).sqrt();
            if x[k.z].abs() > cap {
                x[k.z] = cap * x[k.z].signum();
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roots_of_quadratic() {
        // 1 - 3t + 2t^2 = (1 - t)(1 - 2t)
        assert!((first_positive_root(1.0, -3.0, 2.0).unwrap() - 0.5).abs() < 1e-15);
        // 1 + t never hits zero for t > 0
        assert_eq!(first_positive_root(1.0, 1.0, 0.0), None);
        // 1 - t^2
        assert!((first_positive_root(1.0, 0.0, -1.0).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(first_positive_root(1.0, 0.0, 1.0), None);
    }

    #[test]
    fn nt_scaling_maps_z_and_s_to_the_same_point() {
        let s = [2.0, 0.5, -1.2];
        let z = [1.5, -0.3, 0.9];
        let w = NtScaling::new(&s, &z).unwrap();
        let (wz, wis) = (w.mul(&z), w.inv(&s));
        for c in 0..3 {
            assert!((wz[c] - wis[c]).abs() < 1e-12, "{wz:?} vs {wis:?}");
        }
        let back = w.inv(&w.mul(&s));
        for c in 0..3 {
            assert!((back[c] - s[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn jordan_division_inverts_product() {
        let l = [2.0, 0.3, -0.7];
        let x = [0.4, 1.1, 0.2];
        let r = jordan(&l, &x);
        let y = jordan_div(&l, &r);
        for c in 0..3 {
            assert!((x[c] - y[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn soc_step_stops_at_boundary() {
        // (1, 0, 0) + a (0, 1, 0) leaves the cone at a = 1.
        assert!((soc_max_step(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]) - 1.0).abs() < 1e-15);
        assert_eq!(soc_max_step(&[1.0, 0.0, 0.0], &[1.0, 0.5, 0.0]), f64::INFINITY);
    }

    #[test]
    fn initial_point_is_strictly_interior() {
        let mut p = ConicProblem::new(4);
        p.set_bounds(0, 0.81, 1.21).set_bounds(1, 0.81, 1.21).set_bounds(3, 0.0, f64::INFINITY).add_cone(0, 1, 2);
        let x = initial_point(&p);
        assert!((x[0] - 1.01).abs() < 1e-12);
        assert!(p.cones()[0].slack(&x) > 0.0);
        assert!(x[3] > 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        assert!(SolverConfig::default().with_tolerance(0.0).validate().is_err());
        let cfg = SolverConfig { max_iterations: 0, ..SolverConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
