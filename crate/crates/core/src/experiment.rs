//! Reproducible experiment drivers. Every driver takes a validated
//! [`ExperimentConfig`], derives all randomness from the master seed, and
//! returns CSV reports whose bytes depend only on the configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::landscape::{
    bernstein_bound, bernstein_deviation_level, box_scan, covering_number_bound,
    hessian_deviation_experiment, measured_bernstein_params, sample_complexity, scan_points,
    BernsteinParams, HessianSource, LandscapeReport, ScanOptions, ScanRegion,
};
use crate::likelihood::log_likelihood;
use crate::model::{
    sample_spins_trial, trial_rng, BoxConstants, EdgeVector, LeafPattern, ParamBox, SampleSet,
    ENUMERATION_LEAF_LIMIT,
};
use crate::optimizer::{confinement_report, fit, Interval, OptConfig, OptTrace, ASCENT_SLACK};
use crate::tree::{build_balanced, build_caterpillar, build_random, parse_newick, Tree};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Gaps at or below this are left out of convergence-rate fits.
pub const GAP_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    ErrorScaling,
    Convergence,
    Landscape,
    SteelDemo,
    Bernstein,
    Simulate,
    Fit,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::ErrorScaling => "error-scaling",
            ExperimentKind::Convergence => "convergence",
            ExperimentKind::Landscape => "landscape",
            ExperimentKind::SteelDemo => "steel-demo",
            ExperimentKind::Bernstein => "bernstein",
            ExperimentKind::Simulate => "simulate",
            ExperimentKind::Fit => "fit",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BuilderName {
    Balanced,
    Caterpillar,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TreeSource {
    Newick(String),
    NewickPath(PathBuf),
    Builder {
        name: BuilderName,
        /// Depth for `balanced`, leaf count otherwise.
        size: usize,
        #[serde(default)]
        seed: u64,
    },
}

impl Default for TreeSource {
    fn default() -> Self {
        TreeSource::Builder {
            name: BuilderName::Balanced,
            size: 2,
            seed: 0,
        }
    }
}

impl TreeSource {
    /// The tree and a newick string that parses back to the same edge ids.
    pub fn build(&self, base_dir: &Path) -> Result<(Tree, String)> {
        let text = match self {
            TreeSource::Newick(s) => s.trim().to_string(),
            TreeSource::NewickPath(p) => {
                let path = if p.is_absolute() { p.clone() } else { base_dir.join(p) };
                std::fs::read_to_string(&path)
                    .map_err(|e| Error::Config(format!("cannot read tree {}: {e}", path.display())))?
                    .trim()
                    .to_string()
            }
            TreeSource::Builder { name, size, seed } => {
                let t = match name {
                    BuilderName::Balanced => build_balanced(*size),
                    BuilderName::Caterpillar => build_caterpillar(*size),
                    BuilderName::Random => build_random(*size, *seed),
                }?;
                t.to_newick()
            }
        };
        Ok((parse_newick(&text)?, text))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ThetaPlacement {
    #[default]
    Center,
    Explicit(Vec<f64>),
    RandomInBox { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScanBox {
    #[default]
    Estimation,
    Truth,
}

fn default_grid() -> usize {
    3
}
fn default_random_points() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSettings {
    #[serde(default = "default_grid")]
    pub grid_points_per_edge: usize,
    #[serde(default = "default_random_points")]
    pub random_points: usize,
    #[serde(default)]
    pub diag_only: bool,
    #[serde(default)]
    pub region: ScanBox,
}

impl Default for ScanSettings {
    fn default() -> Self {
        ScanSettings {
            grid_points_per_edge: default_grid(),
            random_points: default_random_points(),
            diag_only: false,
            region: ScanBox::Estimation,
        }
    }
}

fn default_inits() -> usize {
    32
}
fn default_slice_points() -> usize {
    41
}
fn default_separation() -> f64 {
    0.05
}
fn default_objective_tie() -> f64 {
    1e-9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteelSettings {
    #[serde(default = "default_inits")]
    pub inits_per_pair: usize,
    /// Restrict the search to one pattern pair.
    #[serde(default)]
    pub patterns: Option<[String; 2]>,
    #[serde(default = "default_slice_points")]
    pub slice_points: usize,
    #[serde(default = "default_separation")]
    pub min_separation: f64,
    #[serde(default = "default_objective_tie")]
    pub objective_tie: f64,
}

impl Default for SteelSettings {
    fn default() -> Self {
        SteelSettings {
            inits_per_pair: default_inits(),
            patterns: None,
            slice_points: default_slice_points(),
            min_separation: default_separation(),
            objective_tie: default_objective_tie(),
        }
    }
}

fn default_probability() -> f64 {
    0.5
}
fn default_multipliers() -> Vec<f64> {
    vec![0.5, 1.0, 2.0, 4.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BernsteinSettings {
    /// Probability at which the bound's deviation level is reported.
    #[serde(default = "default_probability")]
    pub probability: f64,
    /// Deviation levels to tabulate, as multiples of the median observed deviation.
    #[serde(default = "default_multipliers")]
    pub t_multipliers: Vec<f64>,
}

impl Default for BernsteinSettings {
    fn default() -> Self {
        BernsteinSettings {
            probability: default_probability(),
            t_multipliers: default_multipliers(),
        }
    }
}

fn default_delta() -> f64 {
    0.05
}
fn default_m() -> Vec<u64> {
    vec![10_000]
}
fn default_trials() -> u64 {
    20
}
fn default_eps() -> f64 {
    0.05
}
fn default_complexity_constant() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub kind: Option<ExperimentKind>,
    #[serde(default)]
    pub tree: TreeSource,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub box_constants: BoxConstants,
    #[serde(default)]
    pub theta_star: ThetaPlacement,
    #[serde(default = "default_m")]
    pub m: Vec<u64>,
    #[serde(default = "default_trials")]
    pub trials: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptConfig,
    /// L2 radius of the initial offset from the truth; `0.5 delta` when absent.
    #[serde(default)]
    pub init_radius: Option<f64>,
    /// Target failure probability, read as a trial quantile.
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Constant in the sample-complexity formula.
    #[serde(default = "default_complexity_constant")]
    pub complexity_constant: f64,
    #[serde(default)]
    pub scan: ScanSettings,
    #[serde(default)]
    pub steel: SteelSettings,
    #[serde(default)]
    pub bernstein: BernsteinSettings,
    /// Starting point for `fit`; estimation box center when absent.
    #[serde(default)]
    pub theta0: Option<Vec<f64>>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form, output directory excluded.
    pub fn hash(&self) -> String {
        let canonical = ExperimentConfig {
            output_dir: None,
            ..self.clone()
        };
        let digest = Sha256::digest(canonical.to_json().as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        self.box_constants.truth_box(self.delta).map_err(cfg)?;
        self.box_constants.estimation_box(self.delta).map_err(cfg)?;
        if self.m.is_empty() || self.m.contains(&0) {
            return Err(Error::Config("m must be a nonempty list of positive counts".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if let Some(r) = self.init_radius {
            if !(r >= 0.0) {
                return Err(Error::Config("init_radius must be nonnegative".into()));
            }
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(Error::Config("eps must lie in (0, 1)".into()));
        }
        if !(self.complexity_constant > 0.0) {
            return Err(Error::Config("complexity_constant must be positive".into()));
        }
        if self.scan.grid_points_per_edge < 2 {
            return Err(Error::Config("scan.grid_points_per_edge must be at least 2".into()));
        }
        if self.steel.inits_per_pair == 0 || self.steel.slice_points < 2 {
            return Err(Error::Config("steel settings need inits_per_pair >= 1 and slice_points >= 2".into()));
        }
        if !(self.bernstein.probability > 0.0) || self.bernstein.t_multipliers.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::Config("bernstein probability and multipliers must be positive".into()));
        }
        Ok(())
    }

    /// Resolve the tree and boxes. Relative paths are taken from `base_dir`.
    pub fn prepare(&self, base_dir: &Path) -> Result<Prepared> {
        self.validate()?;
        let (tree, newick) = self
            .tree
            .build(base_dir)
            .map_err(|e| if e.is_numerical() { e } else { Error::Config(e.to_string()) })?;
        self.optimizer.validate(tree.n_edges())?;
        let truth_box = self.box_constants.truth_box(self.delta)?;
        let estimation_box = self.box_constants.estimation_box(self.delta)?;
        let n = tree.n_edges();
        let theta_star = match &self.theta_star {
            ThetaPlacement::Center => truth_box.center(n),
            ThetaPlacement::Explicit(v) => {
                let th = EdgeVector::for_tree(&tree, v.clone()).map_err(|e| Error::Config(e.to_string()))?;
                if !truth_box.contains_closed(&th) {
                    log::warn!("explicit theta_star lies outside the truth box");
                }
                th
            }
            ThetaPlacement::RandomInBox { seed } => {
                let mut rng = trial_rng(*seed, 0, b"cfn-star");
                let (lo, hi) = truth_box.interval();
                EdgeVector::new((0..n).map(|_| rng.random_range(lo..=hi)).collect())?
            }
        };
        Ok(Prepared {
            config: self.clone(),
            hash: self.hash(),
            newick,
            tree,
            truth_box,
            estimation_box,
            theta_star,
        })
    }
}

/// A configuration with its tree and parameters resolved.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub hash: String,
    pub tree: Tree,
    /// Source newick; reparsing it reproduces the edge ids of `tree`.
    pub newick: String,
    pub truth_box: ParamBox,
    pub estimation_box: ParamBox,
    pub theta_star: EdgeVector,
}

impl Prepared {
    pub fn preamble(&self, kind: ExperimentKind) -> Vec<String> {
        let b = &self.config.box_constants;
        vec![
            format!("# cfn {} output", kind.name()),
            format!("# config_sha256: {}", self.hash),
            format!("# seed: {}", self.config.seed),
            format!("# tree: {}", self.newick),
            format!("# delta: {}", self.config.delta),
            format!(
                "# box_constants: c_hat={} c={} C={} C_hat={}",
                b.c_hat_lower, b.c_lower, b.c_upper, b.c_hat_upper
            ),
            format!("# versions: cfn-core {VERSION}"),
        ]
    }

    pub fn init_radius(&self) -> f64 {
        self.config.init_radius.unwrap_or(0.5 * self.config.delta)
    }

    /// `theta_star` plus a uniform draw from the L2 ball of radius `init_radius`,
    /// clipped to the optimizer's search interval.
    pub fn initial_point(&self, key: u64) -> Result<EdgeVector> {
        let n = self.tree.n_edges();
        let mut rng = trial_rng(self.config.seed, key, b"cfn-init");
        let dir: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let u: f64 = rng.random();
        let r = self.init_radius() * u.powf(1.0 / n as f64);
        let domain = self.config.optimizer.domain();
        let v = (0..n)
            .map(|e| {
                let off = if norm > 0.0 { r * dir[e] / norm } else { 0.0 };
                (self.theta_star[e] + off).clamp(domain.lo, domain.hi)
            })
            .collect();
        EdgeVector::new(v)
    }

    fn scan_region(&self) -> ScanRegion {
        let bx = match self.config.scan.region {
            ScanBox::Estimation => &self.estimation_box,
            ScanBox::Truth => &self.truth_box,
        };
        ScanRegion::from_box(bx, self.tree.n_edges())
    }

    fn scan_options(&self) -> ScanOptions {
        ScanOptions {
            grid_points_per_edge: self.config.scan.grid_points_per_edge,
            diag_only: self.config.scan.diag_only,
            random_points: self.config.scan.random_points,
            seed: self.config.seed,
            ..ScanOptions::default()
        }
    }

    fn report(&self, kind: ExperimentKind, name: &str, header: &[&str]) -> CsvReport {
        CsvReport::new(name, self.preamble(kind), header.iter().map(|s| s.to_string()).collect())
    }

    fn theta_header(&self, prefix: &[&str], suffix: &[&str]) -> Vec<String> {
        let mut h: Vec<String> = prefix.iter().map(|s| s.to_string()).collect();
        h.extend((0..self.tree.n_edges()).map(|e| format!("theta_{e}")));
        h.extend(suffix.iter().map(|s| s.to_string()));
        h
    }
}

/// Fixed-precision float formatting shared by every report (17 significant digits).
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvReport {
    pub name: String,
    pub preamble: Vec<String>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvReport {
    pub fn new(name: &str, preamble: Vec<String>, header: Vec<String>) -> Self {
        CsvReport {
            name: name.to_string(),
            preamble,
            header,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "row width must match the header of {}", self.name);
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for line in &self.preamble {
            out.push_str(line);
            out.push('\n');
        }
        out.push_str(&self.header.join(","));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_to(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(&self.name);
        std::fs::write(&path, self.render())?;
        Ok(path)
    }

    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i].as_str()).collect())
    }
}

/// Result of one experiment run: reports plus a JSON summary.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub reports: Vec<CsvReport>,
    pub summary: serde_json::Value,
}

impl ExperimentOutput {
    pub fn report(&self, name: &str) -> Option<&CsvReport> {
        self.reports.iter().find(|r| r.name == name)
    }
}

fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Linear-interpolation quantile of `values` at level `q`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos - pos.floor());
    if i + 1 < v.len() {
        v[i] + frac * (v[i + 1] - v[i])
    } else {
        v[i]
    }
}

/// Ordinary least squares `y = a + b x`; returns `(b, a, r^2)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    if x.len() < 2 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (slope, icpt, r2)
}

// ---------------------------------------------------------------------------
// error scaling

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorRow {
    pub m: u64,
    pub trial: u64,
    pub error: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorScalingSummary {
    pub m: u64,
    pub median_error: f64,
    pub quantile_error: f64,
    /// `quantile_error * sqrt(m / |E|) / log(|E| / eps)`.
    pub bound_normalized: f64,
    pub used: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone)]
pub struct ErrorScalingResult {
    pub rows: Vec<ErrorRow>,
    pub per_m: Vec<ErrorScalingSummary>,
    /// Least-squares slope of log median error against log m.
    pub slope: f64,
    pub intercept: f64,
    pub excluded: usize,
    pub output: ExperimentOutput,
}

fn trial_key(m_index: usize, trial: u64) -> u64 {
    ((m_index as u64) << 32) | trial
}

pub fn run_error_scaling(p: &Prepared) -> Result<ErrorScalingResult> {
    let c = &p.config;
    let mut distinct = c.m.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 3 || (distinct[distinct.len() - 1] as f64) < 100.0 * distinct[0] as f64 {
        log::warn!("error scaling works best with at least 3 sample sizes spanning 2 decades");
    }
    let jobs: Vec<(usize, u64)> = (0..c.m.len()).flat_map(|i| (0..c.trials).map(move |t| (i, t))).collect();
    let results = par_map(&jobs, |&(i, trial)| -> Result<ErrorRow> {
        let m = c.m[i];
        let key = trial_key(i, trial);
        let s = sample_spins_trial(&p.tree, &p.theta_star, c.seed, key, m)?;
        let init = p.initial_point(key)?;
        let tr = fit(&p.tree, &init, s.weighted(), &c.optimizer)?;
        Ok(ErrorRow {
            m,
            trial,
            error: tr.final_theta().l2_distance(&p.theta_star),
            converged: tr.converged(),
        })
    });
    let rows: Vec<ErrorRow> = results.into_iter().collect::<Result<_>>()?;

    let mut rep = p.report(ExperimentKind::ErrorScaling, "error_scaling.csv", &["m", "trial", "error", "converged"]);
    for r in &rows {
        rep.push(vec![r.m.to_string(), r.trial.to_string(), fmt_f64(r.error), r.converged.to_string()]);
    }
    let n_e = p.tree.n_edges() as f64;
    let mut per_m = Vec::new();
    for (i, &m) in c.m.iter().enumerate() {
        let mine: Vec<&ErrorRow> = rows.iter().skip(i * c.trials as usize).take(c.trials as usize).collect();
        let used: Vec<f64> = mine.iter().filter(|r| r.converged).map(|r| r.error).collect();
        let q = quantile(&used, 1.0 - c.eps);
        per_m.push(ErrorScalingSummary {
            m,
            median_error: median(&used),
            quantile_error: q,
            bound_normalized: q * (m as f64 / n_e).sqrt() / (n_e / c.eps).ln(),
            used: used.len(),
            excluded: mine.len() - used.len(),
        });
    }
    let pts: Vec<&ErrorScalingSummary> = per_m.iter().filter(|s| s.median_error > 0.0).collect();
    let (slope, intercept, _) = linear_fit(
        &pts.iter().map(|s| (s.m as f64).ln()).collect::<Vec<_>>(),
        &pts.iter().map(|s| s.median_error.ln()).collect::<Vec<_>>(),
    );
    let excluded: usize = per_m.iter().map(|s| s.excluded).sum();

    let mut sum = p.report(
        ExperimentKind::ErrorScaling,
        "error_scaling_summary.csv",
        &["m", "median_error", "quantile_error", "quantile_level", "bound_normalized", "used", "excluded"],
    );
    for s in &per_m {
        sum.push(vec![
            s.m.to_string(),
            fmt_f64(s.median_error),
            fmt_f64(s.quantile_error),
            fmt_f64(1.0 - c.eps),
            fmt_f64(s.bound_normalized),
            s.used.to_string(),
            s.excluded.to_string(),
        ]);
    }
    let mut fitrep = p.report(ExperimentKind::ErrorScaling, "error_scaling_fit.csv", &["quantity", "value"]);
    fitrep.push(vec!["loglog_slope".into(), fmt_f64(slope)]);
    fitrep.push(vec!["loglog_intercept".into(), fmt_f64(intercept)]);
    fitrep.push(vec!["excluded_nonconverged".into(), excluded.to_string()]);

    let summary = json!({
        "kind": "error-scaling",
        "per_m": per_m,
        "loglog_slope": slope,
        "excluded_nonconverged": excluded,
    });
    Ok(ErrorScalingResult {
        rows,
        per_m,
        slope,
        intercept,
        excluded,
        output: ExperimentOutput {
            reports: vec![rep, sum, fitrep],
            summary,
        },
    })
}

// ---------------------------------------------------------------------------
// convergence

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceTrial {
    pub trial: u64,
    pub sweeps: usize,
    pub converged: bool,
    pub gaps: Vec<f64>,
    pub distances: Vec<f64>,
    /// `exp(slope)` of the log-gap fit.
    pub empirical_rate: f64,
    pub r_squared: f64,
    pub fit_points: usize,
    pub rho_hat: f64,
    pub l_hat: f64,
    /// `1 - rho_hat / l_hat`.
    pub reference_rate: f64,
    /// `gap_k <= reference_rate^(k-1) gap_0 (1 + 0.1)` on every fitted sweep.
    pub bound_holds: bool,
    /// Up to the optimizer's ascent slack.
    pub gaps_nonincreasing: bool,
}

#[derive(Debug, Clone)]
pub struct ConvergenceResult {
    pub trials: Vec<ConvergenceTrial>,
    pub output: ExperimentOutput,
}

pub fn run_convergence(p: &Prepared) -> Result<ConvergenceResult> {
    let c = &p.config;
    if c.m.len() != 1 {
        log::warn!("convergence uses only the first sample size");
    }
    let m = c.m[0];
    let long = OptConfig {
        sweep_tolerance: c.optimizer.sweep_tolerance.min(1e-15),
        max_sweeps: c.optimizer.max_sweeps.max(1000),
        ..c.optimizer.clone()
    };
    let jobs: Vec<u64> = (0..c.trials).collect();
    let results = par_map(&jobs, |&trial| -> Result<(ConvergenceTrial, OptTrace)> {
        let s = sample_spins_trial(&p.tree, &p.theta_star, c.seed, trial, m)?;
        let init = p.initial_point(trial)?;
        let tr = fit(&p.tree, &init, s.weighted(), &long)?;
        let best = tr.objective.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let opt = tr.final_theta();
        let gaps: Vec<f64> = tr.objective.iter().map(|o| (best - o).max(0.0)).collect();
        let distances: Vec<f64> = tr.iterates.iter().map(|th| th.l2_distance(opt)).collect();
        let fit_idx: Vec<usize> = (0..gaps.len()).take_while(|&k| gaps[k] > GAP_FLOOR).collect();
        let (slope, _, r2) = linear_fit(
            &fit_idx.iter().map(|&k| k as f64).collect::<Vec<_>>(),
            &fit_idx.iter().map(|&k| gaps[k].ln()).collect::<Vec<_>>(),
        );
        let region = ScanRegion::bounding(&tr.iterates)?;
        let scan = box_scan(&p.tree, &HessianSource::Empirical(&s), &region, Some(c.delta), &p.scan_options())?;
        let rho_hat = -scan.scanned_sup_lambda_max;
        let l_hat = scan.min_sup_abs_diagonal();
        let reference_rate = 1.0 - rho_hat / l_hat;
        let bound_holds = fit_idx
            .iter()
            .all(|&k| gaps[k] <= reference_rate.powi(k as i32 - 1) * gaps[0] * 1.1);
        let gaps_nonincreasing = gaps.windows(2).all(|w| w[1] <= w[0] + ASCENT_SLACK);
        Ok((
            ConvergenceTrial {
                trial,
                sweeps: tr.sweeps(),
                converged: tr.converged(),
                gaps,
                distances,
                empirical_rate: slope.exp(),
                r_squared: r2,
                fit_points: fit_idx.len(),
                rho_hat,
                l_hat,
                reference_rate,
                bound_holds,
                gaps_nonincreasing,
            },
            tr,
        ))
    });
    let results: Vec<(ConvergenceTrial, OptTrace)> = results.into_iter().collect::<Result<_>>()?;

    let mut rep = p.report(
        ExperimentKind::Convergence,
        "convergence.csv",
        &["trial", "sweep", "objective", "gap", "distance_to_limit"],
    );
    let mut sum = p.report(
        ExperimentKind::Convergence,
        "convergence_summary.csv",
        &[
            "trial", "sweeps", "converged", "empirical_rate", "r_squared", "fit_points", "rho_hat", "l_hat",
            "reference_rate", "bound_holds", "gaps_nonincreasing",
        ],
    );
    for (t, tr) in &results {
        for k in 0..t.gaps.len() {
            rep.push(vec![
                t.trial.to_string(),
                k.to_string(),
                fmt_f64(tr.objective[k]),
                fmt_f64(t.gaps[k]),
                fmt_f64(t.distances[k]),
            ]);
        }
        sum.push(vec![
            t.trial.to_string(),
            t.sweeps.to_string(),
            t.converged.to_string(),
            fmt_f64(t.empirical_rate),
            fmt_f64(t.r_squared),
            t.fit_points.to_string(),
            fmt_f64(t.rho_hat),
            fmt_f64(t.l_hat),
            fmt_f64(t.reference_rate),
            t.bound_holds.to_string(),
            t.gaps_nonincreasing.to_string(),
        ]);
    }
    let trials: Vec<ConvergenceTrial> = results.into_iter().map(|(t, _)| t).collect();
    let summary = json!({
        "kind": "convergence",
        "m": m,
        "trials": trials.iter().map(|t| json!({
            "trial": t.trial,
            "empirical_rate": t.empirical_rate,
            "r_squared": t.r_squared,
            "reference_rate": t.reference_rate,
        })).collect::<Vec<_>>(),
    });
    Ok(ConvergenceResult {
        trials,
        output: ExperimentOutput {
            reports: vec![rep, sum],
            summary,
        },
    })
}

// ---------------------------------------------------------------------------
// landscape

#[derive(Debug, Clone)]
pub struct LandscapeResult {
    pub empirical: Vec<(u64, LandscapeReport)>,
    /// Fixed truth, exact expectation (small trees only).
    pub population: Option<LandscapeReport>,
    /// Truth equal to each scanned point (small trees only).
    pub fisher: Option<LandscapeReport>,
    pub theoretical_sample_complexity: u64,
    pub output: ExperimentOutput,
}

fn landscape_csv(p: &Prepared, name: &str, r: &LandscapeReport) -> CsvReport {
    let mut rep = CsvReport::new(name, p.preamble(ExperimentKind::Landscape), Vec::new());
    rep.preamble.push(format!("# mode: {}", r.mode));
    rep.preamble.push(format!("# layout: {:?}; aggregates are scanned extremes", r.layout));
    let mut lines = r.to_csv();
    let header = lines.lines().next().unwrap_or_default().to_string();
    rep.header = header.split(',').map(str::to_string).collect();
    lines = lines.split_once('\n').map(|x| x.1.to_string()).unwrap_or_default();
    for l in lines.lines() {
        rep.push(l.split(',').map(str::to_string).collect());
    }
    rep
}

pub fn run_landscape(p: &Prepared) -> Result<LandscapeResult> {
    let c = &p.config;
    let region = p.scan_region();
    let opts = p.scan_options();
    let mut empirical = Vec::new();
    for (i, &m) in c.m.iter().enumerate() {
        let s = sample_spins_trial(&p.tree, &p.theta_star, c.seed, i as u64, m)?;
        empirical.push((m, box_scan(&p.tree, &HessianSource::Empirical(&s), &region, Some(c.delta), &opts)?));
    }
    let small = p.tree.n_leaves() <= ENUMERATION_LEAF_LIMIT;
    let population = if small {
        let src = HessianSource::Population { theta_star: p.theta_star.clone() };
        Some(box_scan(&p.tree, &src, &region, Some(c.delta), &opts)?)
    } else {
        None
    };
    let fisher = if small {
        Some(box_scan(&p.tree, &HessianSource::FisherMatched, &region, Some(c.delta), &opts)?)
    } else {
        None
    };
    let complexity = sample_complexity(c.delta, p.tree.diameter(), c.eps, c.complexity_constant)?;

    let mut reports = Vec::new();
    let mut sum = p.report(ExperimentKind::Landscape, "landscape_summary.csv", &["source", "quantity", "value"]);
    let mut add = |name: String, r: &LandscapeReport, sum: &mut CsvReport| {
        sum.push(vec![name.clone(), "scanned_inf_lambda_min".into(), fmt_f64(r.scanned_inf_lambda_min)]);
        sum.push(vec![name.clone(), "scanned_sup_lambda_max".into(), fmt_f64(r.scanned_sup_lambda_max)]);
        sum.push(vec![name.clone(), "points".into(), r.points.len().to_string()]);
        reports.push(landscape_csv(p, &format!("landscape_{name}.csv"), r));
    };
    for (m, r) in &empirical {
        add(format!("empirical_m{m}"), r, &mut sum);
    }
    if let Some(r) = &population {
        add("population".into(), r, &mut sum);
    }
    if let Some(r) = &fisher {
        add("fisher".into(), r, &mut sum);
    }
    sum.push(vec![
        "theoretical requirement".into(),
        "sample_complexity".into(),
        complexity.to_string(),
    ]);
    reports.push(sum);
    let summary = json!({
        "kind": "landscape",
        "empirical": empirical.iter().map(|(m, r)| json!({
            "m": m,
            "scanned_sup_lambda_max": r.scanned_sup_lambda_max,
            "scanned_inf_lambda_min": r.scanned_inf_lambda_min,
        })).collect::<Vec<_>>(),
        "population_scanned_sup_lambda_max": population.as_ref().map(|r| r.scanned_sup_lambda_max),
        "theoretical_requirement_sample_complexity": complexity,
    });
    Ok(LandscapeResult {
        empirical,
        population,
        fisher,
        theoretical_sample_complexity: complexity,
        output: ExperimentOutput { reports, summary },
    })
}

// ---------------------------------------------------------------------------
// non-concavity witness

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WitnessMaximum {
    pub init_id: usize,
    pub init: Vec<f64>,
    pub theta: Vec<f64>,
    pub objective: f64,
}

/// A 2-sample quartet instance with several equally good limits, frozen
/// together with the search settings that found it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteelFixture {
    pub tree: String,
    /// Edge labels of `tree`, pinning the meaning of every theta index.
    pub edges: Vec<String>,
    pub patterns: [String; 2],
    pub discovery_seed: u64,
    pub inits_per_pair: usize,
    pub search_interval: Interval,
    pub optimizer: OptConfig,
    pub maxima: Vec<WitnessMaximum>,
    pub separation: f64,
    pub objective_spread: f64,
    /// Coordinate updates that found every product zero.
    pub flat_updates: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FixtureCheck {
    /// Largest L-infinity distance between the refitted maxima.
    pub separation: f64,
    /// Largest difference between refitted objectives.
    pub objective_spread: f64,
    /// Largest deviation of a refit from its stored limit.
    pub refit_deviation: f64,
    /// Largest deviation of a stored objective from a fresh evaluation.
    pub objective_deviation: f64,
}

impl SteelFixture {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("fixture: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fixture serializes")
    }

    pub fn samples(&self) -> Result<SampleSet> {
        SampleSet::from_patterns(
            self.patterns
                .iter()
                .map(|s| s.parse::<LeafPattern>())
                .collect::<Result<Vec<_>>>()?,
        )
    }

    /// Refit from every stored initialization and recompute the witness quantities.
    pub fn verify(&self) -> Result<FixtureCheck> {
        let tree = parse_newick(&self.tree)?;
        if tree.edge_table() != self.edges {
            return Err(Error::Config("fixture edge table does not match its tree".into()));
        }
        let s = self.samples()?;
        s.check_tree(&tree)?;
        let mut fitted = Vec::new();
        let mut check = FixtureCheck {
            separation: 0.0,
            objective_spread: 0.0,
            refit_deviation: 0.0,
            objective_deviation: 0.0,
        };
        for mx in &self.maxima {
            let init = EdgeVector::for_tree(&tree, mx.init.clone())?;
            let tr = fit(&tree, &init, s.weighted(), &self.optimizer)?;
            let stored = EdgeVector::for_tree(&tree, mx.theta.clone())?;
            check.refit_deviation = check.refit_deviation.max(tr.final_theta().linf_distance(&stored));
            let fresh = log_likelihood(&tree, &stored, s.weighted())?;
            check.objective_deviation = check.objective_deviation.max((fresh - mx.objective).abs());
            fitted.push((tr.final_theta().clone(), tr.final_objective()));
        }
        for a in &fitted {
            for b in &fitted {
                check.separation = check.separation.max(a.0.linf_distance(&b.0));
                check.objective_spread = check.objective_spread.max((a.1 - b.1).abs());
            }
        }
        Ok(check)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairOutcome {
    pub patterns: [String; 2],
    pub best_objective: f64,
    /// One representative per cluster of limits at the best objective.
    pub maxima: Vec<WitnessMaximum>,
    pub separation: f64,
    pub flat_updates: usize,
    pub failed_inits: usize,
}

impl PairOutcome {
    pub fn is_witness(&self, min_separation: f64) -> bool {
        self.maxima.len() >= 2 && self.separation >= min_separation
    }
}

#[derive(Debug, Clone)]
pub struct SteelResult {
    pub pairs: Vec<PairOutcome>,
    pub fixture: Option<SteelFixture>,
    pub output: ExperimentOutput,
}

/// Pattern classes up to global spin flip, which leaves every pattern's
/// probability unchanged.
fn pattern_classes(n_leaves: usize) -> Vec<LeafPattern> {
    (0..1u64 << (n_leaves - 1)).map(|i| LeafPattern::from_index(i, n_leaves)).collect()
}

pub fn steel_optimizer(base: &OptConfig) -> OptConfig {
    OptConfig {
        clamp: Some(base.clamp.unwrap_or(Interval::FERROMAGNETIC)),
        sweep_tolerance: base.sweep_tolerance.min(1e-13),
        max_sweeps: base.max_sweeps.max(5000),
        ..base.clone()
    }
}

fn search_pair(
    tree: &Tree,
    pair: [LeafPattern; 2],
    pair_index: u64,
    seed: u64,
    settings: &SteelSettings,
    opt: &OptConfig,
) -> Result<(PairOutcome, Vec<(usize, Option<OptTrace>)>)> {
    let s = SampleSet::from_patterns(pair.to_vec())?;
    let domain = opt.domain();
    let n = tree.n_edges();
    let mut rng = trial_rng(seed, pair_index, b"cfn-stee");
    let inits: Vec<Vec<f64>> = (0..settings.inits_per_pair)
        .map(|_| {
            (0..n)
                .map(|_| {
                    let u: f64 = rng.random();
                    domain.lo + (domain.hi - domain.lo) * (0.05 + 0.9 * u)
                })
                .collect()
        })
        .collect();
    let runs: Vec<(usize, Option<OptTrace>)> = inits
        .iter()
        .enumerate()
        .map(|(i, init)| {
            let th = EdgeVector::new(init.clone()).expect("init inside [-1, 1]");
            (i, fit(tree, &th, s.weighted(), opt).ok())
        })
        .collect();
    let ok: Vec<(usize, &OptTrace)> = runs.iter().filter_map(|(i, t)| t.as_ref().map(|t| (*i, t))).collect();
    let best = ok.iter().map(|(_, t)| t.final_objective()).fold(f64::NEG_INFINITY, f64::max);
    let mut maxima: Vec<WitnessMaximum> = Vec::new();
    let mut flat = 0;
    for (i, t) in &ok {
        if best - t.final_objective() > settings.objective_tie {
            continue;
        }
        flat += t.flat_updates;
        let th = t.final_theta();
        let close = maxima.iter().any(|m| {
            th.as_slice().iter().zip(&m.theta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
                < settings.min_separation
        });
        if !close {
            maxima.push(WitnessMaximum {
                init_id: *i,
                init: inits[*i].clone(),
                theta: th.as_slice().to_vec(),
                objective: t.final_objective(),
            });
        }
    }
    let mut separation = 0.0f64;
    for a in &maxima {
        for b in &maxima {
            separation = separation.max(a.theta.iter().zip(&b.theta).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
        }
    }
    let outcome = PairOutcome {
        patterns: [pair[0].to_string(), pair[1].to_string()],
        best_objective: best,
        maxima,
        separation,
        flat_updates: flat,
        failed_inits: runs.len() - ok.len(),
    };
    Ok((outcome, runs))
}

/// Objective on a grid over two edges, the rest held at `base`.
pub fn likelihood_slice(
    tree: &Tree,
    samples: &SampleSet,
    base: &EdgeVector,
    edges: (usize, usize),
    range: Interval,
    points: usize,
) -> Result<Vec<(f64, f64, f64)>> {
    tree.edge(edges.0)?;
    tree.edge(edges.1)?;
    if points < 2 {
        return Err(Error::InvalidArgument("slice needs at least 2 points per axis".into()));
    }
    let at = |k: usize| range.lo + (range.hi - range.lo) * k as f64 / (points - 1) as f64;
    let mut out = Vec::with_capacity(points * points);
    for i in 0..points {
        for j in 0..points {
            let (a, b) = (at(i), at(j));
            let th = base.with(edges.0, a).with(edges.1, b);
            let v = match log_likelihood(tree, &th, samples.weighted()) {
                Ok(v) => v,
                Err(Error::ZeroProbability) | Err(Error::Degenerate(_)) => f64::NEG_INFINITY,
                Err(e) => return Err(e),
            };
            out.push((a, b, v));
        }
    }
    Ok(out)
}

pub fn run_steel_demo(p: &Prepared) -> Result<SteelResult> {
    let c = &p.config;
    if p.tree.n_leaves() != 4 {
        return Err(Error::Config("the non-concavity demo needs a 4-leaf tree".into()));
    }
    let opt = steel_optimizer(&c.optimizer);
    let pairs: Vec<[LeafPattern; 2]> = match &c.steel.patterns {
        Some([a, b]) => vec![[a.parse()?, b.parse()?]],
        None => {
            let cls = pattern_classes(4);
            let mut v = Vec::new();
            for i in 0..cls.len() {
                for j in i..cls.len() {
                    v.push([cls[i].clone(), cls[j].clone()]);
                }
            }
            v
        }
    };
    for pair in &pairs {
        SampleSet::from_patterns(pair.to_vec())?.check_tree(&p.tree)?;
    }
    let indexed: Vec<(u64, [LeafPattern; 2])> = pairs.into_iter().enumerate().map(|(i, p)| (i as u64, p)).collect();
    let found = par_map(&indexed, |(i, pair)| search_pair(&p.tree, pair.clone(), *i, c.seed, &c.steel, &opt));
    let found: Vec<(PairOutcome, Vec<(usize, Option<OptTrace>)>)> = found.into_iter().collect::<Result<_>>()?;

    let mut rep = p.report(
        ExperimentKind::SteelDemo,
        "steel_demo.csv",
        &[],
    );
    rep.header = p.theta_header(&["pattern_pair", "init_id"], &["objective", "converged"]);
    for (outcome, runs) in &found {
        let label = format!("{}|{}", outcome.patterns[0], outcome.patterns[1]);
        for (i, tr) in runs {
            let mut row = vec![label.clone(), i.to_string()];
            match tr {
                Some(t) => {
                    row.extend(t.final_theta().as_slice().iter().map(|v| fmt_f64(*v)));
                    row.push(fmt_f64(t.final_objective()));
                    row.push(t.converged().to_string());
                }
                None => {
                    row.extend((0..p.tree.n_edges()).map(|_| "nan".to_string()));
                    row.push("nan".into());
                    row.push("false".into());
                }
            }
            rep.push(row);
        }
    }
    let pairs: Vec<PairOutcome> = found.into_iter().map(|(o, _)| o).collect();
    let witnesses: Vec<&PairOutcome> = pairs.iter().filter(|o| o.is_witness(c.steel.min_separation)).collect();
    let chosen = witnesses
        .iter()
        .find(|o| o.flat_updates == 0)
        .or_else(|| witnesses.first())
        .copied();
    let mut reports = vec![rep];
    let fixture = chosen.map(|o| {
        let spread = o
            .maxima
            .iter()
            .map(|m| o.best_objective - m.objective)
            .fold(0.0, f64::max);
        SteelFixture {
            tree: p.newick.clone(),
            edges: p.tree.edge_table(),
            patterns: o.patterns.clone(),
            discovery_seed: c.seed,
            inits_per_pair: c.steel.inits_per_pair,
            search_interval: opt.domain(),
            optimizer: opt.clone(),
            maxima: o.maxima.clone(),
            separation: o.separation,
            objective_spread: spread,
            flat_updates: o.flat_updates,
        }
    });
    if let Some(fx) = &fixture {
        let s = fx.samples()?;
        let a = &fx.maxima[0].theta;
        let b = &fx.maxima[1].theta;
        let mut order: Vec<usize> = (0..a.len()).collect();
        order.sort_by(|&i, &j| (b[j] - a[j]).abs().total_cmp(&(b[i] - a[i]).abs()).then(i.cmp(&j)));
        let edges = (order[0].min(order[1]), order[0].max(order[1]));
        let base = EdgeVector::new(a.clone())?;
        let grid = likelihood_slice(&p.tree, &s, &base, edges, fx.search_interval, c.steel.slice_points)?;
        let mut slice = p.report(
            ExperimentKind::SteelDemo,
            "steel_slice.csv",
            &[],
        );
        slice.header = vec![format!("theta_{}", edges.0), format!("theta_{}", edges.1), "objective".into()];
        slice.preamble.push(format!("# patterns: {}|{}", fx.patterns[0], fx.patterns[1]));
        slice.preamble.push(format!("# other edges fixed at: {}", a.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(" ")));
        for (x, y, v) in grid {
            slice.push(vec![fmt_f64(x), fmt_f64(y), fmt_f64(v)]);
        }
        reports.push(slice);
    }
    let summary = json!({
        "kind": "steel-demo",
        "pairs_searched": pairs.len(),
        "witness_pairs": witnesses.iter().map(|o| format!("{}|{}", o.patterns[0], o.patterns[1])).collect::<Vec<_>>(),
        "chosen": fixture.as_ref().map(|f| json!({
            "patterns": f.patterns,
            "separation": f.separation,
            "objective": f.maxima[0].objective,
            "maxima": f.maxima.iter().map(|m| m.theta.clone()).collect::<Vec<_>>(),
        })),
    });
    Ok(SteelResult {
        pairs,
        fixture,
        output: ExperimentOutput { reports, summary },
    })
}

// ---------------------------------------------------------------------------
// matrix Bernstein comparison

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BernsteinRow {
    pub m: u64,
    pub t: f64,
    pub bound: f64,
    pub covering_number: f64,
    /// Fraction of trials whose scanned sup deviation exceeded `t`.
    pub exceedance: f64,
}

#[derive(Debug, Clone)]
pub struct BernsteinResult {
    pub deviations: Vec<(u64, Vec<f64>)>,
    pub params: Vec<BernsteinParams>,
    /// Deviation level where the bound reaches the configured probability, per m.
    pub levels: Vec<f64>,
    pub rows: Vec<BernsteinRow>,
    pub output: ExperimentOutput,
}

pub fn run_bernstein(p: &Prepared) -> Result<BernsteinResult> {
    let c = &p.config;
    if p.tree.n_leaves() > ENUMERATION_LEAF_LIMIT {
        return Err(Error::Config("the Bernstein comparison needs an exact population Hessian".into()));
    }
    let region = p.scan_region();
    let opts = p.scan_options();
    let (_, points) = scan_points(&region, &opts)?;
    let mut dev_rep = p.report(
        ExperimentKind::Bernstein,
        "bernstein_deviations.csv",
        &["m", "trial", "sup_deviation", "weyl_excess"],
    );
    let mut bound_rep = p.report(
        ExperimentKind::Bernstein,
        "bernstein.csv",
        &["m", "t", "bound", "bound_capped", "covering_number", "exceedance"],
    );
    let mut par_rep = p.report(
        ExperimentKind::Bernstein,
        "bernstein_params.csv",
        &["m", "p", "d", "n", "R", "L", "sigma2", "theta_diam", "level_probability", "deviation_level"],
    );
    let mut deviations = Vec::new();
    let mut params = Vec::new();
    let mut levels = Vec::new();
    let mut rows = Vec::new();
    // same seed for every m: trial k at a smaller m sees a prefix of the larger sample
    for &m in &c.m {
        let devs = hessian_deviation_experiment(&p.tree, &p.theta_star, &region, &opts, m, c.trials, c.seed)?;
        for d in &devs {
            dev_rep.push(vec![m.to_string(), d.trial.to_string(), fmt_f64(d.sup_deviation), fmt_f64(d.weyl_excess)]);
        }
        let sups: Vec<f64> = devs.iter().map(|d| d.sup_deviation).collect();
        let bp = measured_bernstein_params(&p.tree, &p.theta_star, &points, m, c.delta, c.box_constants.c_hat_lower)?;
        let level = bernstein_deviation_level(&bp, c.bernstein.probability)?;
        par_rep.push(vec![
            m.to_string(),
            bp.p.to_string(),
            bp.d.to_string(),
            bp.n.to_string(),
            fmt_f64(bp.r),
            fmt_f64(bp.l),
            fmt_f64(bp.sigma2),
            fmt_f64(bp.theta_diam),
            fmt_f64(c.bernstein.probability),
            fmt_f64(level),
        ]);
        let med = median(&sups);
        let mut ts: Vec<f64> = c.bernstein.t_multipliers.iter().map(|k| k * med).collect();
        ts.push(level);
        for t in ts {
            if !(t > 0.0) {
                continue;
            }
            let bparams = BernsteinParams { t, ..bp };
            let bound = bernstein_bound(&bparams)?;
            let covering = covering_number_bound(bp.theta_diam, bp.p, t / (2.0 * bp.n as f64 * bp.l))?;
            let exceed = sups.iter().filter(|&&s| s > t).count() as f64 / sups.len() as f64;
            bound_rep.push(vec![
                m.to_string(),
                fmt_f64(t),
                fmt_f64(bound),
                fmt_f64(bound.min(1.0)),
                fmt_f64(covering),
                fmt_f64(exceed),
            ]);
            rows.push(BernsteinRow {
                m,
                t,
                bound,
                covering_number: covering,
                exceedance: exceed,
            });
        }
        deviations.push((m, sups));
        params.push(bp);
        levels.push(level);
    }
    let summary = json!({
        "kind": "bernstein",
        "median_sup_deviation": deviations.iter().map(|(m, s)| json!({"m": m, "median": median(s)})).collect::<Vec<_>>(),
        "deviation_levels": levels,
    });
    Ok(BernsteinResult {
        deviations,
        params,
        levels,
        rows,
        output: ExperimentOutput {
            reports: vec![dev_rep, bound_rep, par_rep],
            summary,
        },
    })
}

// ---------------------------------------------------------------------------
// simulate / fit

pub fn run_simulate(p: &Prepared) -> Result<(SampleSet, ExperimentOutput)> {
    let c = &p.config;
    let s = sample_spins_trial(&p.tree, &p.theta_star, c.seed, 0, c.m[0])?;
    let mut rep = p.report(ExperimentKind::Simulate, "samples.csv", &["pattern", "count"]);
    rep.preamble.push(format!(
        "# theta_star: {}",
        p.theta_star.as_slice().iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(" ")
    ));
    rep.preamble.push(format!("# leaves: {}", p.tree.leaf_names().join(" ")));
    for (pat, cnt) in s.patterns().iter().zip(s.counts()) {
        rep.push(vec![pat.to_string(), cnt.to_string()]);
    }
    let summary = json!({"kind": "simulate", "m": s.m(), "distinct_patterns": s.n_distinct()});
    Ok((s, ExperimentOutput { reports: vec![rep], summary }))
}

pub fn run_fit(p: &Prepared, samples: &SampleSet) -> Result<(OptTrace, ExperimentOutput)> {
    let c = &p.config;
    samples.check_tree(&p.tree)?;
    let theta0 = match &c.theta0 {
        Some(v) => EdgeVector::for_tree(&p.tree, v.clone()).map_err(|e| Error::Config(e.to_string()))?,
        None => p.estimation_box.center(p.tree.n_edges()),
    };
    let tr = fit(&p.tree, &theta0, samples.weighted(), &c.optimizer)?;
    let mut rep = CsvReport::new("fit_trace.csv", p.preamble(ExperimentKind::Fit), Vec::new());
    let csv = tr.to_csv();
    let (head, body) = csv.split_once('\n').unwrap_or((&csv, ""));
    rep.header = head.split(',').map(str::to_string).collect();
    for l in body.lines() {
        rep.push(l.split(',').map(str::to_string).collect());
    }
    let conf = confinement_report(&tr, &p.estimation_box);
    let summary = json!({
        "kind": "fit",
        "sweeps": tr.sweeps(),
        "termination": tr.termination,
        "objective": tr.final_objective(),
        "theta": tr.final_theta().as_slice(),
        "within_estimation_box": conf.all_interior,
        "first_escape_sweep": conf.first_escape_sweep,
    });
    Ok((tr, ExperimentOutput { reports: vec![rep], summary }))
}
