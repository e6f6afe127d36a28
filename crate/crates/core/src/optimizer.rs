//! Cyclic coordinate maximization of the empirical log-likelihood.
//!
//! With every other coordinate fixed, `P(pattern)` is affine in `theta_e`
//! with slope proportional to `Z_a Z_b`, so each coordinate step maximizes
//! `t -> sum_i w_i log(1 + t p_i)` exactly.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{log_likelihood, magnetizations_all, MessageCache};
use crate::model::{EdgeVector, ParamBox, WeightedPatterns};
use crate::tree::{EdgeId, Tree};

/// Slack allowed on ascent checks.
pub const ASCENT_SLACK: f64 = 1e-12;

/// Closed interval searched by each coordinate update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const FULL: Interval = Interval { lo: -1.0, hi: 1.0 };
    /// Nonnegative correlations, i.e. flip probabilities at most one half.
    pub const FERROMAGNETIC: Interval = Interval { lo: 0.0, hi: 1.0 };

    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(-1.0..=1.0).contains(&lo) || !(-1.0..=1.0).contains(&hi) || !(lo < hi) {
            return Err(Error::InvalidArgument(format!(
                "search interval [{lo}, {hi}] must satisfy -1 <= lo < hi <= 1"
            )));
        }
        Ok(Interval { lo, hi })
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

impl From<&ParamBox> for Interval {
    fn from(b: &ParamBox) -> Self {
        let (lo, hi) = b.interval();
        Interval { lo, hi }
    }
}

fn default_sweep_tolerance() -> f64 {
    1e-10
}
fn default_solver_tolerance() -> f64 {
    1e-12
}
fn default_max_sweeps() -> usize {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptConfig {
    #[serde(default = "default_sweep_tolerance")]
    pub sweep_tolerance: f64,
    #[serde(default = "default_solver_tolerance")]
    pub solver_tolerance: f64,
    #[serde(default = "default_max_sweeps")]
    pub max_sweeps: usize,
    /// Update order; ascending edge ids when absent.
    #[serde(default)]
    pub edge_order: Option<Vec<EdgeId>>,
    /// Search interval for every coordinate; `[-1, 1]` when absent.
    #[serde(default)]
    pub clamp: Option<Interval>,
    /// Accepted for compatibility and ignored.
    #[serde(default)]
    pub step_size: Option<f64>,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            sweep_tolerance: default_sweep_tolerance(),
            solver_tolerance: default_solver_tolerance(),
            max_sweeps: default_max_sweeps(),
            edge_order: None,
            clamp: None,
            step_size: None,
        }
    }
}

impl OptConfig {
    pub fn validate(&self, n_edges: usize) -> Result<()> {
        if !(self.sweep_tolerance > 0.0) || !(self.solver_tolerance > 0.0) {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        if self.max_sweeps == 0 {
            return Err(Error::Config("max_sweeps must be at least 1".into()));
        }
        if let Some(order) = &self.edge_order {
            let mut seen = vec![false; n_edges];
            if order.len() != n_edges {
                return Err(Error::Config("edge_order must list every edge once".into()));
            }
            for &e in order {
                if e >= n_edges || seen[e] {
                    return Err(Error::Config("edge_order must be a permutation of edge ids".into()));
                }
                seen[e] = true;
            }
        }
        if let Some(c) = self.clamp {
            Interval::new(c.lo, c.hi).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn order(&self, n_edges: usize) -> Vec<EdgeId> {
        self.edge_order.clone().unwrap_or_else(|| (0..n_edges).collect())
    }

    pub fn domain(&self) -> Interval {
        self.clamp.unwrap_or(Interval::FULL)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolutionKind {
    Interior,
    LowerBoundary,
    UpperBoundary,
    /// Every product was zero; the coordinate was left unchanged.
    FlatCoordinate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordinateSolution {
    pub value: f64,
    pub kind: SolutionKind,
}

/// `g(t) = sum_i w_i p_i / (1 + t p_i)`, with vanishing denominators
/// read as the one-sided limit.
pub fn coordinate_derivative(products: &[f64], weights: &[f64], t: f64) -> f64 {
    let mut g = 0.0;
    for (&p, &w) in products.iter().zip(weights) {
        if p == 0.0 {
            continue;
        }
        let den = 1.0 + t * p;
        if den <= 0.0 {
            return p.signum() * f64::INFINITY;
        }
        g += w * p / den;
    }
    g
}

/// One-dimensional maximizer of `sum_i w_i log(1 + t p_i)` on `domain`.
pub fn solve_coordinate(
    products: &[f64],
    weights: &[f64],
    domain: Interval,
    tol: f64,
    current: f64,
) -> CoordinateSolution {
    if products.iter().all(|&p| p == 0.0) {
        return CoordinateSolution {
            value: current,
            kind: SolutionKind::FlatCoordinate,
        };
    }
    let g = |t| coordinate_derivative(products, weights, t);
    if g(domain.lo) <= 0.0 {
        return CoordinateSolution {
            value: domain.lo,
            kind: SolutionKind::LowerBoundary,
        };
    }
    if g(domain.hi) >= 0.0 {
        return CoordinateSolution {
            value: domain.hi,
            kind: SolutionKind::UpperBoundary,
        };
    }
    let (mut lo, mut hi) = (domain.lo, domain.hi);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    CoordinateSolution {
        value: 0.5 * (lo + hi),
        kind: SolutionKind::Interior,
    }
}

/// Exact coordinate step on edge `e` starting from `theta`, with the
/// magnetizations across `e` computed at `theta`.
pub fn coordinate_update(
    tree: &Tree,
    theta: &EdgeVector,
    data: &WeightedPatterns,
    e: EdgeId,
    domain: Interval,
    tol: f64,
) -> Result<CoordinateSolution> {
    tree.edge(e)?;
    let mut products = Vec::with_capacity(data.len());
    for p in data.patterns() {
        products.push(magnetizations_all(tree, theta, p)?.product_across(e));
    }
    Ok(solve_coordinate(&products, data.weights(), domain, tol, theta[e]))
}

fn gain(products: &[f64], weights: &[f64], from: f64, to: f64) -> f64 {
    let mut s = 0.0;
    for (&p, &w) in products.iter().zip(weights) {
        let (a, b) = (1.0 + from * p, 1.0 + to * p);
        if a != b {
            s += w * (b.ln() - a.ln());
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    /// Largest coordinate change in a sweep fell below `sweep_tolerance`.
    Converged,
    MaxSweeps,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptTrace {
    /// `iterates[k]` is the parameter after `k` full sweeps.
    pub iterates: Vec<EdgeVector>,
    pub objective: Vec<f64>,
    /// Largest coordinate change of sweep `k`; entry 0 is NaN.
    pub max_change: Vec<f64>,
    pub termination: Termination,
    pub flat_updates: usize,
    pub boundary_updates: usize,
    /// Smallest objective change over all single updates.
    pub min_update_gain: f64,
}

impl OptTrace {
    pub fn final_theta(&self) -> &EdgeVector {
        self.iterates.last().expect("trace is never empty")
    }

    pub fn final_objective(&self) -> f64 {
        *self.objective.last().expect("trace is never empty")
    }

    pub fn sweeps(&self) -> usize {
        self.iterates.len() - 1
    }

    pub fn converged(&self) -> bool {
        self.termination == Termination::Converged
    }

    pub fn is_monotone(&self) -> bool {
        self.min_update_gain >= -ASCENT_SLACK
            && self.objective.windows(2).all(|w| w[1] >= w[0] - ASCENT_SLACK)
    }

    pub fn to_csv(&self) -> String {
        let n = self.iterates[0].len();
        let mut out = String::from("sweep,objective,max_coord_change");
        for e in 0..n {
            let _ = write!(out, ",theta_{e}");
        }
        out.push('\n');
        for (k, th) in self.iterates.iter().enumerate() {
            let _ = write!(out, "{k},{:.16e},{:.16e}", self.objective[k], self.max_change[k]);
            for v in th.as_slice() {
                let _ = write!(out, ",{v:.16e}");
            }
            out.push('\n');
        }
        out
    }
}

/// Cyclic coordinate maximization from `theta0`.
pub fn fit(
    tree: &Tree,
    theta0: &EdgeVector,
    data: &WeightedPatterns,
    config: &OptConfig,
) -> Result<OptTrace> {
    let n = tree.n_edges();
    config.validate(n)?;
    if theta0.len() != n {
        return Err(Error::InvalidArgument("theta0 length does not match the tree".into()));
    }
    let domain = config.domain();
    if theta0.as_slice().iter().any(|&v| !domain.contains(v)) {
        return Err(Error::InvalidArgument(format!(
            "theta0 lies outside the search interval [{}, {}]",
            domain.lo, domain.hi
        )));
    }
    let order = config.order(n);
    let mut cache = MessageCache::new(tree, theta0.clone(), data)?;
    let start = log_likelihood(tree, theta0, data)?;
    let mut trace = OptTrace {
        iterates: vec![theta0.clone()],
        objective: vec![start],
        max_change: vec![f64::NAN],
        termination: Termination::MaxSweeps,
        flat_updates: 0,
        boundary_updates: 0,
        min_update_gain: f64::INFINITY,
    };
    for _ in 0..config.max_sweeps {
        let mut biggest = 0.0f64;
        for &e in &order {
            let products = cache.products_across(e)?;
            let current = cache.theta()[e];
            let sol = solve_coordinate(&products, data.weights(), domain, config.solver_tolerance, current);
            match sol.kind {
                SolutionKind::FlatCoordinate => trace.flat_updates += 1,
                SolutionKind::LowerBoundary | SolutionKind::UpperBoundary => trace.boundary_updates += 1,
                SolutionKind::Interior => {}
            }
            let g = gain(&products, data.weights(), current, sol.value);
            trace.min_update_gain = trace.min_update_gain.min(g);
            biggest = biggest.max((sol.value - current).abs());
            if sol.value != current {
                cache.set(e, sol.value);
            }
        }
        let th = cache.theta().clone();
        let obj = log_likelihood(tree, &th, data)?;
        if !obj.is_finite() {
            return Err(Error::NonFinite("objective".into()));
        }
        trace.iterates.push(th);
        trace.objective.push(obj);
        trace.max_change.push(biggest);
        if biggest < config.sweep_tolerance {
            trace.termination = Termination::Converged;
            break;
        }
    }
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ConfinementReport {
    pub all_interior: bool,
    pub first_escape_sweep: Option<usize>,
}

/// Checks every iterate against the open box.
pub fn confinement_report(trace: &OptTrace, bx: &ParamBox) -> ConfinementReport {
    let first = trace.iterates.iter().position(|th| !bx.contains_open(th));
    ConfinementReport {
        all_interior: first.is_none(),
        first_escape_sweep: first,
    }
}
