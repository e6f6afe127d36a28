//! Curvature of the likelihood over parameter boxes, plus the concentration
//! and sample-size calculators that go with it.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::likelihood::{
    deterministic_bounds, hessian_with_plan, pattern_hessian, HessianMatrix, HessianPlan,
    HessianScaleConstants,
};
use crate::model::{exact_leaf_distribution, sample_spins_trial, EdgeVector, ParamBox, SampleSet, WeightedPatterns};
use crate::tree::Tree;

/// Largest number of points a scan may evaluate.
pub const DEFAULT_SCAN_BUDGET: usize = 200_000;
/// Tensor grids are only used up to this many edges.
pub const TENSOR_GRID_MAX_EDGES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PopulationMode {
    Exact,
    MonteCarlo { m: u64, seed: u64 },
}

/// Population Hessian `E_{theta_star}[ d^2 log P_{theta_hat}(pattern) ]`.
pub fn population_hessian(
    tree: &Tree,
    theta_star: &EdgeVector,
    theta_hat: &EdgeVector,
    mode: PopulationMode,
) -> Result<HessianMatrix> {
    let plan = HessianPlan::new(tree)?;
    match mode {
        PopulationMode::Exact => {
            let dist = exact_leaf_distribution(tree, theta_star)?;
            hessian_with_plan(tree, &plan, theta_hat, &dist)
        }
        PopulationMode::MonteCarlo { m, seed } => {
            let s = crate::model::sample_spins(tree, theta_star, seed, m)?;
            hessian_with_plan(tree, &plan, theta_hat, s.weighted())
        }
    }
}

/// Empirical Hessian of `samples` with per-entry standard errors of the mean.
pub fn hessian_with_standard_errors(
    tree: &Tree,
    theta_hat: &EdgeVector,
    samples: &SampleSet,
) -> Result<(HessianMatrix, HessianMatrix)> {
    let plan = HessianPlan::new(tree)?;
    let n = tree.n_edges();
    let mean = hessian_with_plan(tree, &plan, theta_hat, samples.weighted())?;
    let mut var = vec![0.0; n * n];
    for (p, w) in samples.weighted().iter() {
        let h = pattern_hessian(tree, &plan, theta_hat, p)?;
        for (k, v) in var.iter_mut().enumerate() {
            let d = h.as_row_major()[k] - mean.as_row_major()[k];
            *v += w * d * d;
        }
    }
    let m = samples.m() as f64;
    let se = var.into_iter().map(|v| (v / m).sqrt()).collect();
    Ok((mean, HessianMatrix::from_row_major(n, se)?))
}

/// `(lambda_min, lambda_max)` of a symmetric matrix.
pub fn extreme_eigenvalues(h: &HessianMatrix, tol: f64) -> Result<(f64, f64)> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument("eigenvalue tolerance must be positive".into()));
    }
    if h.asymmetry() > 1e-12 {
        return Err(Error::InvalidArgument("matrix is not symmetric".into()));
    }
    let n = h.dim();
    if n == 0 {
        return Err(Error::InvalidArgument("empty matrix".into()));
    }
    if h.as_row_major().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix entry".into()));
    }
    let m = DMatrix::from_row_slice(n, n, h.as_row_major());
    let eig = SymmetricEigen::try_new(m, tol.min(f64::EPSILON), 0)
        .ok_or_else(|| Error::NonFinite("eigen-decomposition did not converge".into()))?;
    let vals = eig.eigenvalues;
    Ok((vals.min(), vals.max()))
}

/// Largest absolute eigenvalue.
pub fn spectral_norm(h: &HessianMatrix) -> Result<f64> {
    let (lo, hi) = extreme_eigenvalues(h, 1e-12)?;
    Ok(lo.abs().max(hi.abs()))
}

/// Where the Hessian at a scanned point comes from.
#[derive(Debug, Clone)]
pub enum HessianSource<'a> {
    Empirical(&'a SampleSet),
    /// Exact expectation under a fixed truth.
    Population { theta_star: EdgeVector },
    /// Exact expectation with the truth set to the scanned point itself.
    FisherMatched,
}

impl HessianSource<'_> {
    fn label(&self) -> String {
        match self {
            HessianSource::Empirical(s) => format!("empirical(m={})", s.m()),
            HessianSource::Population { .. } => "population-exact".into(),
            HessianSource::FisherMatched => "population-exact(theta_star=theta_hat)".into(),
        }
    }
}

/// Axis-aligned region `prod_e [lo_e, hi_e]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanRegion {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ScanRegion {
    pub fn from_box(bx: &ParamBox, n_edges: usize) -> Self {
        let (lo, hi) = bx.interval();
        ScanRegion {
            lo: vec![lo; n_edges],
            hi: vec![hi; n_edges],
        }
    }

    /// Smallest region containing every point.
    pub fn bounding(points: &[EdgeVector]) -> Result<Self> {
        let first = points
            .first()
            .ok_or_else(|| Error::InvalidArgument("no points to bound".into()))?;
        let mut lo = first.as_slice().to_vec();
        let mut hi = lo.clone();
        for p in points {
            for (e, &v) in p.as_slice().iter().enumerate() {
                lo[e] = lo[e].min(v);
                hi[e] = hi[e].max(v);
            }
        }
        Ok(ScanRegion { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    pub fn l2_diameter(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt()
    }

    fn axis(&self, e: usize, k: usize, g: usize) -> f64 {
        if g == 1 || self.hi[e] == self.lo[e] {
            return self.lo[e];
        }
        self.lo[e] + (self.hi[e] - self.lo[e]) * k as f64 / (g - 1) as f64
    }

    fn validate(&self) -> Result<()> {
        if self.lo.len() != self.hi.len() || self.lo.is_empty() {
            return Err(Error::InvalidArgument("scan region bounds have different lengths".into()));
        }
        for (a, b) in self.lo.iter().zip(&self.hi) {
            if !(-1.0 <= *a && a <= b && *b <= 1.0) {
                return Err(Error::InvalidArgument(format!("scan interval [{a}, {b}] is invalid")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScanLayout {
    TensorGrid,
    CenterSlicesPlusRandom,
    Diagonal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanOptions {
    pub grid_points_per_edge: usize,
    /// Scan only points with all coordinates moving together.
    pub diag_only: bool,
    /// Random interior points added when the tensor grid is too large.
    pub random_points: usize,
    pub seed: u64,
    pub budget: usize,
}

impl Default for ScanOptions {
    fn default() -> Self {
        ScanOptions {
            grid_points_per_edge: 3,
            diag_only: false,
            random_points: 64,
            seed: 0,
            budget: DEFAULT_SCAN_BUDGET,
        }
    }
}

/// Per-point extreme eigenvalues over a scan. Aggregates are extremes over
/// the scanned points only, not over the continuous region.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LandscapeReport {
    pub region: ScanRegion,
    pub layout: ScanLayout,
    pub grid_points_per_edge: usize,
    pub delta: Option<f64>,
    pub mode: String,
    pub points: Vec<Vec<f64>>,
    pub lambda_min: Vec<f64>,
    pub lambda_max: Vec<f64>,
    pub scanned_inf_lambda_min: f64,
    pub scanned_sup_lambda_max: f64,
    /// Per edge, the smallest and largest diagonal entry seen.
    pub diag_min: Vec<f64>,
    pub diag_max: Vec<f64>,
}

impl LandscapeReport {
    /// `min_e sup |H_ee|` over the scan.
    pub fn min_sup_abs_diagonal(&self) -> f64 {
        self.diag_min
            .iter()
            .zip(&self.diag_max)
            .map(|(a, b)| a.abs().max(b.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("point_index");
        for e in 0..self.region.dim() {
            let _ = write!(out, ",theta_{e}");
        }
        out.push_str(",lambda_min,lambda_max\n");
        for (i, p) in self.points.iter().enumerate() {
            let _ = write!(out, "{i}");
            for v in p {
                let _ = write!(out, ",{v:.16e}");
            }
            let _ = writeln!(out, ",{:.16e},{:.16e}", self.lambda_min[i], self.lambda_max[i]);
        }
        out
    }
}

/// Points visited by [`box_scan`], in evaluation order.
pub fn scan_points(region: &ScanRegion, opts: &ScanOptions) -> Result<(ScanLayout, Vec<Vec<f64>>)> {
    region.validate()?;
    let g = opts.grid_points_per_edge;
    if g < 2 {
        return Err(Error::InvalidArgument("grid_points_per_edge must be at least 2".into()));
    }
    let n = region.dim();
    if opts.diag_only {
        let pts = (0..g).map(|k| (0..n).map(|e| region.axis(e, k, g)).collect()).collect();
        return Ok((ScanLayout::Diagonal, pts));
    }
    if n <= TENSOR_GRID_MAX_EDGES {
        let total = (g as f64).powi(n as i32);
        if total > opts.budget as f64 {
            return Err(Error::Budget(format!(
                "{g}^{n} grid points exceed the budget of {}",
                opts.budget
            )));
        }
        let total = total as usize;
        let mut pts = Vec::with_capacity(total);
        for idx in 0..total {
            let mut rest = idx;
            let mut p = vec![0.0; n];
            for (e, slot) in p.iter_mut().enumerate() {
                *slot = region.axis(e, rest % g, g);
                rest /= g;
            }
            pts.push(p);
        }
        return Ok((ScanLayout::TensorGrid, pts));
    }
    let total = n * g + opts.random_points;
    if total > opts.budget {
        return Err(Error::Budget(format!("{total} scan points exceed the budget of {}", opts.budget)));
    }
    let center = region.center();
    let mut pts = Vec::with_capacity(total);
    for e in 0..n {
        for k in 0..g {
            let mut p = center.clone();
            p[e] = region.axis(e, k, g);
            pts.push(p);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.random_points {
        pts.push(
            (0..n)
                .map(|e| {
                    if region.hi[e] > region.lo[e] {
                        rng.random_range(region.lo[e]..region.hi[e])
                    } else {
                        region.lo[e]
                    }
                })
                .collect(),
        );
    }
    Ok((ScanLayout::CenterSlicesPlusRandom, pts))
}

/// Hessians on every point of a scan, in scan order.
pub(crate) fn scan_hessians(
    tree: &Tree,
    source: &HessianSource<'_>,
    points: &[Vec<f64>],
) -> Result<Vec<HessianMatrix>> {
    let plan = HessianPlan::new(tree)?;
    let fixed: Option<WeightedPatterns> = match source {
        HessianSource::Population { theta_star } => Some(exact_leaf_distribution(tree, theta_star)?),
        _ => None,
    };
    let eval = |p: &Vec<f64>| -> Result<HessianMatrix> {
        let th = EdgeVector::for_tree(tree, p.clone())?;
        match source {
            HessianSource::Empirical(s) => hessian_with_plan(tree, &plan, &th, s.weighted()),
            HessianSource::Population { .. } => {
                hessian_with_plan(tree, &plan, &th, fixed.as_ref().expect("set above"))
            }
            HessianSource::FisherMatched => {
                let dist = exact_leaf_distribution(tree, &th)?;
                hessian_with_plan(tree, &plan, &th, &dist)
            }
        }
    };
    #[cfg(feature = "parallel")]
    let out: Vec<Result<HessianMatrix>> = {
        use rayon::prelude::*;
        points.par_iter().map(eval).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let out: Vec<Result<HessianMatrix>> = points.iter().map(eval).collect();
    out.into_iter().collect()
}

pub fn box_scan(
    tree: &Tree,
    source: &HessianSource<'_>,
    region: &ScanRegion,
    delta: Option<f64>,
    opts: &ScanOptions,
) -> Result<LandscapeReport> {
    if region.dim() != tree.n_edges() {
        return Err(Error::InvalidArgument("scan region dimension does not match the tree".into()));
    }
    let (layout, points) = scan_points(region, opts)?;
    let hs = scan_hessians(tree, source, &points)?;
    let n = tree.n_edges();
    let mut lambda_min = Vec::with_capacity(points.len());
    let mut lambda_max = Vec::with_capacity(points.len());
    let mut diag_min = vec![f64::INFINITY; n];
    let mut diag_max = vec![f64::NEG_INFINITY; n];
    for h in &hs {
        let (lo, hi) = extreme_eigenvalues(h, 1e-12)?;
        lambda_min.push(lo);
        lambda_max.push(hi);
        for (e, d) in h.diagonal().into_iter().enumerate() {
            diag_min[e] = diag_min[e].min(d);
            diag_max[e] = diag_max[e].max(d);
        }
    }
    Ok(LandscapeReport {
        region: region.clone(),
        layout,
        grid_points_per_edge: opts.grid_points_per_edge,
        delta,
        mode: source.label(),
        scanned_inf_lambda_min: lambda_min.iter().copied().fold(f64::INFINITY, f64::min),
        scanned_sup_lambda_max: lambda_max.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        points,
        lambda_min,
        lambda_max,
        diag_min,
        diag_max,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BernsteinParams {
    pub p: usize,
    pub d: usize,
    pub n: u64,
    pub r: f64,
    pub l: f64,
    pub sigma2: f64,
    pub theta_diam: f64,
    pub t: f64,
}

/// `2 d |Theta|^p (1 + 4 n L / t)^p exp(-(t^2 / 8) / (sigma^2 + R t / 6))`,
/// not capped at 1.
pub fn bernstein_bound(b: &BernsteinParams) -> Result<f64> {
    if !(b.t > 0.0) {
        return Err(Error::InvalidArgument("deviation level t must be positive".into()));
    }
    for (name, v) in [("R", b.r), ("L", b.l), ("sigma2", b.sigma2), ("theta_diam", b.theta_diam)] {
        if !(v >= 0.0) {
            return Err(Error::InvalidArgument(format!("{name} must be nonnegative")));
        }
    }
    let p = b.p as f64;
    let log = (2.0 * b.d as f64).ln() + p * b.theta_diam.ln() + p * (1.0 + 4.0 * b.n as f64 * b.l / b.t).ln()
        - (b.t * b.t / 8.0) / (b.sigma2 + b.r * b.t / 6.0);
    Ok(log.exp())
}

/// Smallest `t` with `bernstein_bound <= prob`, by bisection.
pub fn bernstein_deviation_level(b: &BernsteinParams, prob: f64) -> Result<f64> {
    if !(prob > 0.0) {
        return Err(Error::InvalidArgument("probability must be positive".into()));
    }
    let at = |t| bernstein_bound(&BernsteinParams { t, ..*b });
    let mut hi = 1e-6f64.max(b.r);
    let mut steps = 0;
    while at(hi)? > prob {
        hi *= 2.0;
        steps += 1;
        if steps > 2000 || !hi.is_finite() {
            return Err(Error::NonFinite("no deviation level reaches the probability".into()));
        }
    }
    let mut lo = 0.0f64;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if at(mid)? > prob {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// `|Theta|^p (1 + 2 / eps)^p`.
pub fn covering_number_bound(theta_diam: f64, p: usize, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("eps must be positive".into()));
    }
    Ok((theta_diam * (1.0 + 2.0 / eps)).powi(p as i32))
}

/// `ceil((c / delta)^(diam + 8) log(1 / eps))`, at least 1.
pub fn sample_complexity(delta: f64, diam: usize, eps: f64, c: f64) -> Result<u64> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidArgument("eps must lie in (0, 1)".into()));
    }
    if !(delta > 0.0) || !(c > 0.0) {
        return Err(Error::InvalidArgument("delta and C must be positive".into()));
    }
    let raw = (c / delta).powi(diam as i32 + 8) * (1.0 / eps).ln();
    if !raw.is_finite() {
        return Err(Error::NonFinite("sample complexity overflows".into()));
    }
    // Undo roundoff that would push an exact integer up by one.
    let near = raw.round();
    let v = if (raw - near).abs() <= 1e-9 * near.max(1.0) { near } else { raw.ceil() };
    Ok((v as u64).max(1))
}

/// One trial of [`hessian_deviation_experiment`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationRow {
    pub trial: u64,
    pub m: u64,
    /// `sup` over scanned points of `|H_hat - H|_2`.
    pub sup_deviation: f64,
    /// Largest `|lambda_max(H_hat) - lambda_max(H)| - |H_hat - H|_2` seen; never positive.
    pub weyl_excess: f64,
}

/// Parameters of the matrix Bernstein bound for `H_hat - H = sum_k X_k`
/// with `X_k = (H_k - H) / m`, measured by enumeration at the scan points.
pub fn measured_bernstein_params(
    tree: &Tree,
    theta_star: &EdgeVector,
    points: &[Vec<f64>],
    m: u64,
    delta: f64,
    c_bar: f64,
) -> Result<BernsteinParams> {
    let plan = HessianPlan::new(tree)?;
    let dist = exact_leaf_distribution(tree, theta_star)?;
    let n = tree.n_edges();
    let mf = m as f64;
    let mut r = 0.0f64;
    let mut sigma2 = 0.0f64;
    for p in points {
        let th = EdgeVector::for_tree(tree, p.clone())?;
        let h = hessian_with_plan(tree, &plan, &th, &dist)?;
        let mut second = DMatrix::<f64>::zeros(n, n);
        for (pat, w) in dist.iter() {
            let dev = pattern_hessian(tree, &plan, &th, pat)?.sub(&h);
            r = r.max(spectral_norm(&dev)?);
            let dm = DMatrix::from_row_slice(n, n, dev.as_row_major());
            second += &dm * &dm * w;
        }
        let sym = HessianMatrix::from_row_major(n, symmetrize(&second))?;
        sigma2 = sigma2.max(spectral_norm(&sym)? / mf);
    }
    let bounds = deterministic_bounds(delta, tree.diameter(), c_bar, HessianScaleConstants::default());
    let region_diam = {
        let pts: Vec<EdgeVector> = points
            .iter()
            .map(|p| EdgeVector::for_tree(tree, p.clone()))
            .collect::<Result<_>>()?;
        ScanRegion::bounding(&pts)?.l2_diameter()
    };
    Ok(BernsteinParams {
        p: n,
        d: n,
        n: m,
        r: r / mf,
        l: 2.0 * (n as f64).powf(1.5) * bounds.third_deriv_bound / mf,
        sigma2,
        theta_diam: region_diam,
        t: 1.0,
    })
}

fn symmetrize(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = 0.5 * (m[(i, j)] + m[(j, i)]);
        }
    }
    out
}

/// Per trial, the largest spectral deviation between the empirical Hessian
/// of `m` samples and the exact population Hessian over the scan points.
pub fn hessian_deviation_experiment(
    tree: &Tree,
    theta_star: &EdgeVector,
    region: &ScanRegion,
    opts: &ScanOptions,
    m: u64,
    trials: u64,
    seed: u64,
) -> Result<Vec<DeviationRow>> {
    let (_, points) = scan_points(region, opts)?;
    let pop = scan_hessians(tree, &HessianSource::Population { theta_star: theta_star.clone() }, &points)?;
    let pop_top: Vec<f64> = pop
        .iter()
        .map(|h| extreme_eigenvalues(h, 1e-12).map(|x| x.1))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(trials as usize);
    for trial in 0..trials {
        let s = sample_spins_trial(tree, theta_star, seed, trial, m)?;
        let emp = scan_hessians(tree, &HessianSource::Empirical(&s), &points)?;
        let mut sup = 0.0f64;
        let mut weyl = f64::NEG_INFINITY;
        for ((he, hp), top) in emp.iter().zip(&pop).zip(&pop_top) {
            let dev = spectral_norm(&he.sub(hp))?;
            let (_, emp_top) = extreme_eigenvalues(he, 1e-12)?;
            sup = sup.max(dev);
            weyl = weyl.max((emp_top - top).abs() - dev);
        }
        rows.push(DeviationRow {
            trial,
            m,
            sup_deviation: sup,
            weyl_excess: weyl,
        });
    }
    Ok(rows)
}
