//! Dense two-phase primal simplex. All variables are nonnegative; upper
//! bounds are expressed as ordinary rows.

use std::fmt::Write as _;

use thiserror::Error;

const EPS: f64 = 1e-9;
const PIVOT_EPS: f64 = 1e-11;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cmp {
    Le,
    Ge,
    Eq,
}

impl Cmp {
    fn symbol(self) -> &'static str {
        match self {
            Cmp::Le => "<=",
            Cmp::Ge => ">=",
            Cmp::Eq => "=",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Row {
    pub coefs: Vec<(usize, f64)>,
    pub cmp: Cmp,
    pub rhs: f64,
    pub label: String,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    /// Labels of the rows whose artificial variables stayed positive.
    #[error("infeasible (rows: {})", .0.join(", "))]
    Infeasible(Vec<String>),
    #[error("unbounded")]
    Unbounded,
    #[error("iteration limit reached")]
    IterationLimit,
    #[error("non-finite coefficient in {0}")]
    NonFinite(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
}

/// minimize c·x subject to rows, x ≥ 0.
#[derive(Debug, Clone, Default)]
pub struct LinearProgram {
    pub names: Vec<String>,
    pub objective: Vec<f64>,
    pub rows: Vec<Row>,
}

impl LinearProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_var(&mut self, name: impl Into<String>, cost: f64) -> usize {
        self.names.push(name.into());
        self.objective.push(cost);
        self.names.len() - 1
    }

    pub fn n_vars(&self) -> usize {
        self.names.len()
    }

    pub fn add_row(&mut self, label: impl Into<String>, coefs: Vec<(usize, f64)>, cmp: Cmp, rhs: f64) {
        self.rows.push(Row { coefs, cmp, rhs, label: label.into() });
    }

    pub fn evaluate(&self, x: &[f64]) -> f64 {
        self.objective.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    /// Largest violation over all rows and nonnegativity bounds.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst = x.iter().fold(0.0f64, |w, v| w.max(-v));
        for r in &self.rows {
            let lhs: f64 = r.coefs.iter().map(|(j, a)| a * x[*j]).sum();
            let v = match r.cmp {
                Cmp::Le => lhs - r.rhs,
                Cmp::Ge => r.rhs - lhs,
                Cmp::Eq => (lhs - r.rhs).abs(),
            };
            worst = worst.max(v);
        }
        worst
    }

    pub fn dump(&self) -> String {
        let mut out = String::new();
        let term = |out: &mut String, a: f64, j: usize, first: bool| {
            if first {
                let _ = write!(out, "{a}*{}", self.names[j]);
            } else if a < 0.0 {
                let _ = write!(out, " - {}*{}", -a, self.names[j]);
            } else {
                let _ = write!(out, " + {a}*{}", self.names[j]);
            }
        };
        out.push_str("min: ");
        let mut first = true;
        for (j, &c) in self.objective.iter().enumerate() {
            if c != 0.0 {
                term(&mut out, c, j, first);
                first = false;
            }
        }
        if first {
            out.push('0');
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{}: ", r.label);
            for (k, &(j, a)) in r.coefs.iter().enumerate() {
                term(&mut out, a, j, k == 0);
            }
            let _ = writeln!(out, " {} {}", r.cmp.symbol(), r.rhs);
        }
        out
    }

    pub fn solve(&self) -> Result<LpSolution, LpError> {
        for r in &self.rows {
            if !r.rhs.is_finite() || r.coefs.iter().any(|(_, a)| !a.is_finite()) {
                return Err(LpError::NonFinite(r.label.clone()));
            }
        }
        if self.objective.iter().any(|c| !c.is_finite()) {
            return Err(LpError::NonFinite("objective".into()));
        }
        Tableau::build(self).run(self)
    }
}

struct Tableau {
    m: usize,
    n: usize,
    /// Row-major (m + 1) × (width + 1); the last row is the objective,
    /// the last column the right-hand side.
    t: Vec<f64>,
    width: usize,
    basis: Vec<usize>,
    first_art: usize,
    art_row: Vec<usize>,
}

impl Tableau {
    fn build(lp: &LinearProgram) -> Self {
        let n = lp.n_vars();
        let m = lp.rows.len();
        // Normalize every row to a nonnegative right-hand side.
        let mut cmps = Vec::with_capacity(m);
        let mut signs = Vec::with_capacity(m);
        for r in &lp.rows {
            let s = if r.rhs < 0.0 { -1.0 } else { 1.0 };
            let cmp = match (r.cmp, s < 0.0) {
                (Cmp::Le, true) => Cmp::Ge,
                (Cmp::Ge, true) => Cmp::Le,
                (c, _) => c,
            };
            cmps.push(cmp);
            signs.push(s);
        }
        let n_slack = cmps.iter().filter(|c| **c != Cmp::Eq).count();
        let n_art = cmps.iter().filter(|c| **c != Cmp::Le).count();
        let first_art = n + n_slack;
        let width = first_art + n_art;
        let stride = width + 1;
        let mut t = vec![0.0; (m + 1) * stride];
        let mut basis = vec![0; m];
        let mut art_row = Vec::with_capacity(n_art);
        let (mut slack, mut art) = (n, first_art);
        for (i, r) in lp.rows.iter().enumerate() {
            let row = &mut t[i * stride..(i + 1) * stride];
            for &(j, a) in &r.coefs {
                row[j] += signs[i] * a;
            }
            row[width] = signs[i] * r.rhs;
            match cmps[i] {
                Cmp::Le => {
                    row[slack] = 1.0;
                    basis[i] = slack;
                    slack += 1;
                }
                Cmp::Ge => {
                    row[slack] = -1.0;
                    slack += 1;
                    row[art] = 1.0;
                    basis[i] = art;
                    art_row.push(i);
                    art += 1;
                }
                Cmp::Eq => {
                    row[art] = 1.0;
                    basis[i] = art;
                    art_row.push(i);
                    art += 1;
                }
            }
        }
        Tableau { m, n, t, width, basis, first_art, art_row }
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.t[i * (self.width + 1) + j]
    }

    fn pivot(&mut self, pr: usize, pc: usize) {
        let stride = self.width + 1;
        let p = self.t[pr * stride + pc];
        for v in &mut self.t[pr * stride..(pr + 1) * stride] {
            *v /= p;
        }
        let (before, rest) = self.t.split_at_mut(pr * stride);
        let (prow, after) = rest.split_at_mut(stride);
        let eliminate = |row: &mut [f64]| {
            let f = row[pc];
            if f.abs() > 0.0 {
                for (v, pv) in row.iter_mut().zip(prow.iter()) {
                    *v -= f * pv;
                }
                row[pc] = 0.0;
            }
        };
        for row in before.chunks_mut(stride) {
            eliminate(row);
        }
        for row in after.chunks_mut(stride) {
            eliminate(row);
        }
        self.basis[pr] = pc;
    }

    /// Write the reduced-cost row for cost vector `c` (over all columns).
    fn load_objective(&mut self, c: &[f64]) {
        let stride = self.width + 1;
        let m = self.m;
        let mut obj = vec![0.0; stride];
        obj[..c.len()].copy_from_slice(c);
        for i in 0..m {
            let cb = c.get(self.basis[i]).copied().unwrap_or(0.0);
            if cb != 0.0 {
                for (o, v) in obj.iter_mut().zip(&self.t[i * stride..(i + 1) * stride]) {
                    *o -= cb * v;
                }
            }
        }
        self.t[m * stride..].copy_from_slice(&obj);
    }

    /// Optimize the loaded objective over columns `< limit`.
    fn iterate(&mut self, limit: usize) -> Result<(), LpError> {
        let stride = self.width + 1;
        let max_iter = 50 * (self.m + self.width) + 1000;
        let mut degenerate_run = 0usize;
        for _ in 0..max_iter {
            let obj = &self.t[self.m * stride..];
            // Dantzig's rule, switching to Bland's after a run of degenerate pivots.
            let bland = degenerate_run > 50;
            let mut pc = None;
            let mut best = -EPS;
            for (j, &d) in obj[..limit].iter().enumerate() {
                if d < best {
                    pc = Some(j);
                    if bland {
                        break;
                    }
                    best = d;
                }
            }
            let Some(pc) = pc else { return Ok(()) };
            let mut pr = None;
            let mut ratio = f64::INFINITY;
            for i in 0..self.m {
                let a = self.at(i, pc);
                if a > PIVOT_EPS {
                    let r = self.at(i, self.width) / a;
                    let better = r < ratio - EPS
                        || (r <= ratio + EPS && pr.is_some_and(|p: usize| self.basis[i] < self.basis[p]));
                    if better {
                        ratio = r;
                        pr = Some(i);
                    }
                }
            }
            let Some(pr) = pr else { return Err(LpError::Unbounded) };
            if ratio.abs() <= EPS {
                degenerate_run += 1;
            } else {
                degenerate_run = 0;
            }
            self.pivot(pr, pc);
        }
        Err(LpError::IterationLimit)
    }

    fn run(mut self, lp: &LinearProgram) -> Result<LpSolution, LpError> {
        let stride = self.width + 1;
        if self.first_art < self.width {
            let mut c1 = vec![0.0; self.width];
            for v in &mut c1[self.first_art..] {
                *v = 1.0;
            }
            self.load_objective(&c1);
            self.iterate(self.width)?;
            let infeas = -self.t[self.m * stride + self.width];
            let scale = 1.0 + lp.rows.iter().map(|r| r.rhs.abs()).fold(0.0, f64::max);
            if infeas > 1e-7 * scale {
                let mut rows: Vec<String> = Vec::new();
                for i in 0..self.m {
                    if self.basis[i] >= self.first_art && self.at(i, self.width) > 1e-7 * scale {
                        let k = self.basis[i] - self.first_art;
                        rows.push(lp.rows[self.art_row[k]].label.clone());
                    }
                }
                return Err(LpError::Infeasible(rows));
            }
            // Drive remaining zero-level artificials out of the basis.
            for i in 0..self.m {
                if self.basis[i] < self.first_art {
                    continue;
                }
                let col = (0..self.first_art).find(|&j| self.at(i, j).abs() > 1e-7);
                if let Some(j) = col {
                    self.pivot(i, j);
                }
                // Otherwise the row is redundant; its artificial stays basic at zero
                // and can never re-enter since phase 2 ignores artificial columns.
            }
        }
        let mut c2 = lp.objective.clone();
        c2.resize(self.width, 0.0);
        self.load_objective(&c2);
        self.iterate(self.first_art)?;
        let mut x = vec![0.0; self.n];
        for i in 0..self.m {
            if self.basis[i] < self.n {
                x[self.basis[i]] = self.at(i, self.width).max(0.0);
            }
        }
        let objective = lp.evaluate(&x);
        Ok(LpSolution { x, objective })
    }
}
