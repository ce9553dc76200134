//! Problem description for the conic solver.
//!
//! A [`ConicProblem`] is the maximization
//!
//! ```text
//!     maximize    c'x + sum_k w_k log x_{i_k}
//!     subject to  A x = b
//!                 lower <= x <= upper
//!                 x_u * x_v >= x_z^2,  x_u >= 0,  x_v >= 0   for each cone (u, v, z)
//! ```
//!
//! The cone is the rotated second-order cone, which is also the set of 2x2
//! positive semidefinite matrices `[[x_u, x_z], [x_z, x_v]]`.

use std::fmt::Write as _;

use crate::error::ConicError;

/// One linear equality row `sum coeffs[k].1 * x[coeffs[k].0] = rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Equality {
    pub coeffs: Vec<(usize, f64)>,
    pub rhs: f64,
}

/// A weighted logarithm `weight * log(x[var])` in the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogTerm {
    pub var: usize,
    pub weight: f64,
}

/// Rotated second-order cone membership `x_u * x_v >= x_z^2` with `x_u, x_v >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RotatedCone {
    pub u: usize,
    pub v: usize,
    pub z: usize,
}

impl RotatedCone {
    pub fn new(u: usize, v: usize, z: usize) -> Self {
        Self { u, v, z }
    }

    /// `x_u * x_v - x_z^2`; non-negative inside the cone.
    pub fn slack(&self, x: &[f64]) -> f64 {
        x[self.u] * x[self.v] - x[self.z] * x[self.z]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConicProblem {
    n: usize,
    objective: Vec<f64>,
    log_terms: Vec<LogTerm>,
    equalities: Vec<Equality>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    cones: Vec<RotatedCone>,
}

impl ConicProblem {
    /// A problem over `n` free variables with a zero objective.
    pub fn new(n: usize) -> Self {
        Self {
            n,
            objective: vec![0.0; n],
            log_terms: Vec::new(),
            equalities: Vec::new(),
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
            cones: Vec::new(),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.n
    }

    pub fn objective(&self) -> &[f64] {
        &self.objective
    }

    pub fn log_terms(&self) -> &[LogTerm] {
        &self.log_terms
    }

    pub fn equalities(&self) -> &[Equality] {
        &self.equalities
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn cones(&self) -> &[RotatedCone] {
        &self.cones
    }

    pub fn set_objective(&mut self, var: usize, coeff: f64) -> &mut Self {
        self.objective[var] = coeff;
        self
    }

    /// Replaces the linear objective vector.
    pub fn set_objective_vector(&mut self, c: Vec<f64>) -> &mut Self {
        assert_eq!(c.len(), self.n, "objective length must match variable count");
        self.objective = c;
        self
    }

    pub fn add_log_term(&mut self, var: usize, weight: f64) -> &mut Self {
        self.log_terms.push(LogTerm { var, weight });
        self
    }

    pub fn set_bounds(&mut self, var: usize, lower: f64, upper: f64) -> &mut Self {
        self.lower[var] = lower;
        self.upper[var] = upper;
        self
    }

    /// Adds `sum coeffs = rhs`. Repeated indices are summed.
    pub fn add_equality(&mut self, coeffs: Vec<(usize, f64)>, rhs: f64) -> &mut Self {
        self.equalities.push(Equality { coeffs, rhs });
        self
    }

    pub fn add_cone(&mut self, u: usize, v: usize, z: usize) -> &mut Self {
        self.cones.push(RotatedCone { u, v, z });
        self
    }

    /// Objective value `c'x + sum w log x` at `x`. Returns `-inf` outside the
    /// log domain.
    pub fn objective_value(&self, x: &[f64]) -> f64 {
        let linear: f64 = self.objective.iter().zip(x).map(|(c, x)| c * x).sum();
        let logs: f64 = self
            .log_terms
            .iter()
            .map(|t| {
                if x[t.var] > 0.0 {
                    t.weight * x[t.var].ln()
                } else {
                    f64::NEG_INFINITY
                }
            })
            .sum();
        linear + logs
    }

    /// Checks structural invariants: indices in range, distinct cone
    /// members, positive log weights, ordered bounds, finite data.
    pub fn validate(&self) -> Result<(), ConicError> {
        let n = self.n;
        let check = |index: usize| {
            if index < n {
                Ok(())
            } else {
                Err(ConicError::IndexOutOfRange { index, n })
            }
        };
        if self.objective.iter().any(|c| !c.is_finite()) {
            return Err(ConicError::NonFinite("objective"));
        }
        for t in &self.log_terms {
            check(t.var)?;
            if t.weight <= 0.0 || !t.weight.is_finite() {
                return Err(ConicError::BadLogWeight { index: t.var, weight: t.weight });
            }
        }
        for row in &self.equalities {
            if !row.rhs.is_finite() {
                return Err(ConicError::NonFinite("equality right-hand side"));
            }
            for &(j, a) in &row.coeffs {
                check(j)?;
                if !a.is_finite() {
                    return Err(ConicError::NonFinite("equality coefficients"));
                }
            }
        }
        for j in 0..n {
            let (lo, hi) = (self.lower[j], self.upper[j]);
            if lo.is_nan() || hi.is_nan() || lo > hi || lo == f64::INFINITY || hi == f64::NEG_INFINITY {
                return Err(ConicError::BadBounds { index: j, lower: lo, upper: hi });
            }
        }
        for k in &self.cones {
            check(k.u)?;
            check(k.v)?;
            check(k.z)?;
            if k.u == k.v || k.u == k.z || k.v == k.z {
                return Err(ConicError::DegenerateCone { u: k.u, v: k.v, z: k.z });
            }
        }
        Ok(())
    }

    /// Largest finite bound or right-hand side magnitude, or 1 if there is
    /// none. Used as the unit of the variables.
    pub fn magnitude(&self) -> f64 {
        let m = self
            .lower
            .iter()
            .chain(&self.upper)
            .chain(self.equalities.iter().map(|e| &e.rhs))
            .filter(|v| v.is_finite())
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        if m > 0.0 {
            m
        } else {
            1.0
        }
    }

    /// The same problem in the variables `y = x / sigma`. Cones are
    /// homogeneous and the log terms only shift by a constant, so the
    /// optimizers correspond. A purely linear objective is normalized to unit
    /// max norm.
    pub fn rescaled(&self, sigma: f64) -> ConicProblem {
        let mut p = self.clone();
        for v in p.lower.iter_mut().chain(p.upper.iter_mut()) {
            *v /= sigma;
        }
        for e in &mut p.equalities {
            e.rhs /= sigma;
        }
        let cmax = p.objective.iter().fold(0.0_f64, |m, c| m.max(c.abs()));
        let factor = if p.log_terms.is_empty() && cmax > 0.0 { 1.0 / cmax } else { sigma };
        for c in &mut p.objective {
            *c *= factor;
        }
        p
    }

    /// Worst violation of each constraint class at `x`.
    pub fn check_feasible(&self, x: &[f64], tol: f64) -> FeasibilityReport {
        assert_eq!(x.len(), self.n, "point length must match variable count");
        let equality = self
            .equalities
            .iter()
            .map(|row| {
                let lhs: f64 = row.coeffs.iter().map(|&(j, a)| a * x[j]).sum();
                (lhs - row.rhs).abs()
            })
            .fold(0.0, f64::max);
        let bound = (0..self.n)
            .map(|j| (self.lower[j] - x[j]).max(x[j] - self.upper[j]).max(0.0))
            .fold(0.0, f64::max);
        let cone = self
            .cones
            .iter()
            .map(|k| (-k.slack(x)).max(-x[k.u]).max(-x[k.v]).max(0.0))
            .fold(0.0, f64::max);
        FeasibilityReport { equality, bound, cone, tol }
    }

    /// Plain-text dump for cross-checking with external solvers.
    ///
    /// ```text
    /// conic-problem 1
    /// vars <n>
    /// obj <j> <c_j>               (non-zero entries only)
    /// log <j> <w>
    /// bound <j> <lower> <upper>   (non-free variables only)
    /// eq <rhs> <j>:<a> <j>:<a> ...
    /// cone <u> <v> <z>
    /// ```
    pub fn to_dump(&self) -> String {
        let mut out = String::new();
        writeln!(out, "conic-problem 1").unwrap();
        writeln!(out, "vars {}", self.n).unwrap();
        for (j, &c) in self.objective.iter().enumerate() {
            if c != 0.0 {
                writeln!(out, "obj {j} {c}").unwrap();
            }
        }
        for t in &self.log_terms {
            writeln!(out, "log {} {}", t.var, t.weight).unwrap();
        }
        for j in 0..self.n {
            let (lo, hi) = (self.lower[j], self.upper[j]);
            if lo.is_finite() || hi.is_finite() {
                writeln!(out, "bound {j} {lo} {hi}").unwrap();
            }
        }
        for row in &self.equalities {
            write!(out, "eq {}", row.rhs).unwrap();
            for &(j, a) in &row.coeffs {
                write!(out, " {j}:{a}").unwrap();
            }
            out.push('\n');
        }
        for k in &self.cones {
            writeln!(out, "cone {} {} {}", k.u, k.v, k.z).unwrap();
        }
        out
    }

    /// Parses the format written by [`ConicProblem::to_dump`].
    pub fn from_dump(text: &str) -> Result<Self, ConicError> {
        let mut problem: Option<ConicProblem> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let err = |message: &str| ConicError::Dump { line, message: message.to_string() };
            let mut parts = raw.split_whitespace();
            let Some(tag) = parts.next() else { continue };
            let fields: Vec<&str> = parts.collect();
            let num = |s: &str| s.parse::<f64>().map_err(|_| err("bad number"));
            let idx_of = |s: &str| s.parse::<usize>().map_err(|_| err("bad index"));
            match tag {
                "conic-problem" => {}
                "vars" => {
                    let n = idx_of(fields.first().ok_or_else(|| err("missing count"))?)?;
                    problem = Some(ConicProblem::new(n));
                }
                _ => {
                    let p = problem.as_mut().ok_or_else(|| err("entry before `vars`"))?;
                    let need = |k: usize| {
                        if fields.len() == k {
                            Ok(())
                        } else {
                            Err(err("wrong field count"))
                        }
                    };
                    let in_range = |j: usize| if j < p.n { Ok(j) } else { Err(err("index out of range")) };
                    match tag {
                        "obj" => {
                            need(2)?;
                            let j = in_range(idx_of(fields[0])?)?;
                            p.objective[j] = num(fields[1])?;
                        }
                        "log" => {
                            need(2)?;
                            let j = in_range(idx_of(fields[0])?)?;
                            p.add_log_term(j, num(fields[1])?);
                        }
                        "bound" => {
                            need(3)?;
                            let j = in_range(idx_of(fields[0])?)?;
                            p.set_bounds(j, num(fields[1])?, num(fields[2])?);
                        }
                        "eq" => {
                            let rhs = num(fields.first().ok_or_else(|| err("missing rhs"))?)?;
                            let mut coeffs = Vec::with_capacity(fields.len().saturating_sub(1));
                            for f in &fields[1..] {
                                let (j, a) = f.split_once(':').ok_or_else(|| err("expected j:a"))?;
                                coeffs.push((in_range(idx_of(j)?)?, num(a)?));
                            }
                            p.add_equality(coeffs, rhs);
                        }
                        "cone" => {
                            need(3)?;
                            let u = in_range(idx_of(fields[0])?)?;
                            let v = in_range(idx_of(fields[1])?)?;
                            let z = in_range(idx_of(fields[2])?)?;
                            p.add_cone(u, v, z);
                        }
                        _ => return Err(err("unknown entry")),
                    }
                }
            }
        }
        problem.ok_or(ConicError::Dump { line: 0, message: "missing `vars` line".into() })
    }
}

/// Worst constraint violations by class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeasibilityReport {
    pub equality: f64,
    pub bound: f64,
    /// `max(z^2 - u v, -u, -v, 0)` over cones.
    pub cone: f64,
    pub tol: f64,
}

impl FeasibilityReport {
    pub fn passed(&self) -> bool {
        self.equality <= self.tol && self.bound <= self.tol && self.cone <= self.tol
    }

    pub fn worst(&self) -> f64 {
        self.equality.max(self.bound).max(self.cone)
    }
}
