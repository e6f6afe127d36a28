//! CFN parameterization, parameter boxes, forward simulation and the
//! brute-force leaf distribution.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Index, IndexMut};
use std::str::FromStr;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::Tree;

/// Largest leaf count accepted by the enumeration oracles.
pub const ENUMERATION_LEAF_LIMIT: usize = 14;

/// One parameter `theta_e = 1 - 2 p_e` per edge id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EdgeVector(Vec<f64>);

impl EdgeVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "edge parameter {v} outside [-1, 1]"
            )));
        }
        Ok(EdgeVector(values))
    }

    pub fn uniform(n_edges: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; n_edges])
    }

    pub fn for_tree(tree: &Tree, values: Vec<f64>) -> Result<Self> {
        if values.len() != tree.n_edges() {
            return Err(Error::InvalidArgument(format!(
                "{} parameters for {} edges",
                values.len(),
                tree.n_edges()
            )));
        }
        Self::new(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Flip probabilities `p_e = (1 - theta_e) / 2`.
    pub fn flip_probabilities(&self) -> Vec<f64> {
        self.0.iter().map(|t| (1.0 - t) / 2.0).collect()
    }

    pub fn with(&self, e: usize, value: f64) -> Self {
        let mut out = self.clone();
        out.0[e] = value;
        out
    }

    pub fn l2_distance(&self, other: &EdgeVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn linf_distance(&self, other: &EdgeVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Index<usize> for EdgeVector {
    type Output = f64;
    fn index(&self, e: usize) -> &f64 {
        &self.0[e]
    }
}

impl IndexMut<usize> for EdgeVector {
    fn index_mut(&mut self, e: usize) -> &mut f64 {
        &mut self.0[e]
    }
}

/// Per-edge parameter interval `[1 - 2 C delta, 1 - 2 c delta]`, i.e. flip
/// probabilities in `[c delta, C delta]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamBox {
    pub delta: f64,
    pub lower_flip: f64,
    pub upper_flip: f64,
}

impl ParamBox {
    pub fn new(delta: f64, lower_flip: f64, upper_flip: f64) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(Error::ParamBox(format!("delta must be > 0 (got {delta})")));
        }
        if !(lower_flip > 0.0) {
            return Err(Error::ParamBox(format!("c must be > 0 (got {lower_flip})")));
        }
        if !(lower_flip < upper_flip) {
            return Err(Error::ParamBox(format!(
                "need c < C (got c = {lower_flip}, C = {upper_flip})"
            )));
        }
        if !(2.0 * upper_flip * delta < 1.0) {
            return Err(Error::ParamBox(format!(
                "need 2 C delta < 1 (got {})",
                2.0 * upper_flip * delta
            )));
        }
        Ok(ParamBox {
            delta,
            lower_flip,
            upper_flip,
        })
    }

    pub fn lo(&self) -> f64 {
        1.0 - 2.0 * self.upper_flip * self.delta
    }

    pub fn hi(&self) -> f64 {
        1.0 - 2.0 * self.lower_flip * self.delta
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.lo(), self.hi())
    }

    pub fn center_value(&self) -> f64 {
        0.5 * (self.lo() + self.hi())
    }

    pub fn center(&self, n_edges: usize) -> EdgeVector {
        EdgeVector(vec![self.center_value(); n_edges])
    }

    pub fn width(&self) -> f64 {
        self.hi() - self.lo()
    }

    pub fn contains_open(&self, theta: &EdgeVector) -> bool {
        theta.0.iter().all(|&t| t > self.lo() && t < self.hi())
    }

    pub fn contains_closed(&self, theta: &EdgeVector) -> bool {
        theta.0.iter().all(|&t| t >= self.lo() && t <= self.hi())
    }

    /// L2 diameter of the box in `n_edges` dimensions.
    pub fn l2_diameter(&self, n_edges: usize) -> f64 {
        self.width() * (n_edges as f64).sqrt()
    }
}

/// The four flip-probability coefficients that define the truth box and
/// the (larger) estimation box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxConstants {
    /// Estimation box lower coefficient.
    pub c_hat_lower: f64,
    /// Truth box lower coefficient.
    pub c_lower: f64,
    /// Truth box upper coefficient.
    pub c_upper: f64,
    /// Estimation box upper coefficient.
    pub c_hat_upper: f64,
}

impl Default for BoxConstants {
    fn default() -> Self {
        BoxConstants {
            c_hat_lower: 0.75,
            c_lower: 1.0,
            c_upper: 1.5,
            c_hat_upper: 2.0,
        }
    }
}

impl BoxConstants {
    /// Checks the nesting `C_hat > C > c > c_hat > 0` and `C_hat >= 2 c_hat`.
    pub fn validate(&self) -> Result<()> {
        let BoxConstants {
            c_hat_lower,
            c_lower,
            c_upper,
            c_hat_upper,
        } = *self;
        if !(c_hat_upper > c_upper && c_upper > c_lower && c_lower > c_hat_lower && c_hat_lower > 0.0)
        {
            return Err(Error::ParamBox(format!(
                "box constants must satisfy C_hat > C > c > c_hat > 0 (got {self:?})"
            )));
        }
        if !(c_hat_upper >= 2.0 * c_hat_lower) {
            return Err(Error::ParamBox("need C_hat >= 2 c_hat".into()));
        }
        Ok(())
    }

    pub fn truth_box(&self, delta: f64) -> Result<ParamBox> {
        self.validate()?;
        ParamBox::new(delta, self.c_lower, self.c_upper)
    }

    pub fn estimation_box(&self, delta: f64) -> Result<ParamBox> {
        self.validate()?;
        ParamBox::new(delta, self.c_hat_lower, self.c_hat_upper)
    }
}

/// Spins at the leaves, in the tree's leaf order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LeafPattern(Vec<i8>);

impl LeafPattern {
    pub fn new(spins: Vec<i8>) -> Result<Self> {
        if spins.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::InvalidArgument("spins must be +1 or -1".into()));
        }
        Ok(LeafPattern(spins))
    }

    /// Pattern number `index` in `0..2^n`: bit `i` set means leaf `i` is -1.
    pub fn from_index(index: u64, n_leaves: usize) -> Self {
        LeafPattern(
            (0..n_leaves)
                .map(|i| if index >> i & 1 == 1 { -1 } else { 1 })
                .collect(),
        )
    }

    pub fn spins(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn negated(&self) -> Self {
        LeafPattern(self.0.iter().map(|s| -s).collect())
    }
}

impl fmt::Display for LeafPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &s in &self.0 {
            f.write_str(if s > 0 { "+" } else { "-" })?;
        }
        Ok(())
    }
}

impl FromStr for LeafPattern {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '+' => Ok(1),
                '-' => Ok(-1),
                other => Err(Error::Samples(format!("bad spin character {other:?} in {s:?}"))),
            })
            .collect::<Result<Vec<i8>>>()
            .map(LeafPattern)
    }
}

/// Distinct leaf patterns with nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPatterns {
    patterns: Vec<LeafPattern>,
    weights: Vec<f64>,
}

impl WeightedPatterns {
    pub fn new(patterns: Vec<LeafPattern>, weights: Vec<f64>) -> Result<Self> {
        if patterns.len() != weights.len() || patterns.is_empty() {
            return Err(Error::InvalidArgument(
                "need matching, nonempty pattern and weight lists".into(),
            ));
        }
        Ok(WeightedPatterns { patterns, weights })
    }

    pub fn patterns(&self) -> &[LeafPattern] {
        &self.patterns
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LeafPattern, f64)> {
        self.patterns.iter().zip(self.weights.iter().copied())
    }

    /// Probability of `pattern` (zero if absent).
    pub fn probability(&self, pattern: &LeafPattern) -> f64 {
        self.patterns
            .binary_search(pattern)
            .map(|i| self.weights[i])
            .unwrap_or(0.0)
    }
}

/// `m` observations, aggregated as distinct patterns with multiplicities.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    weighted: WeightedPatterns,
    counts: Vec<u64>,
    m: u64,
}

impl SampleSet {
    /// Aggregate `(pattern, count)` pairs; repeated patterns are merged.
    pub fn from_counts<I>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (LeafPattern, u64)>,
    {
        let mut map = BTreeMap::new();
        for (p, c) in pairs {
            if c == 0 {
                return Err(Error::Samples(format!("pattern {p} has count 0")));
            }
            *map.entry(p).or_insert(0u64) += c;
        }
        Self::from_map(map)
    }

    pub fn from_patterns<I>(patterns: I) -> Result<Self>
    where
        I: IntoIterator<Item = LeafPattern>,
    {
        Self::from_counts(patterns.into_iter().map(|p| (p, 1)))
    }

    fn from_map(map: BTreeMap<LeafPattern, u64>) -> Result<Self> {
        if map.is_empty() {
            return Err(Error::Samples("sample set is empty".into()));
        }
        let width = map.keys().next().unwrap().len();
        if map.keys().any(|p| p.len() != width) {
            return Err(Error::Samples("patterns have different lengths".into()));
        }
        let m: u64 = map.values().sum();
        let (patterns, counts): (Vec<_>, Vec<_>) = map.into_iter().unzip();
        let weights = counts.iter().map(|&c| c as f64 / m as f64).collect();
        Ok(SampleSet {
            weighted: WeightedPatterns { patterns, weights },
            counts,
            m,
        })
    }

    pub fn patterns(&self) -> &[LeafPattern] {
        &self.weighted.patterns
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn m(&self) -> u64 {
        self.m
    }

    pub fn n_distinct(&self) -> usize {
        self.counts.len()
    }

    pub fn weighted(&self) -> &WeightedPatterns {
        &self.weighted
    }

    pub fn check_tree(&self, tree: &Tree) -> Result<()> {
        let n = self.patterns()[0].len();
        if n != tree.n_leaves() {
            return Err(Error::Samples(format!(
                "patterns have {n} spins but the tree has {} leaves",
                tree.n_leaves()
            )));
        }
        Ok(())
    }

    /// CSV with header `pattern,count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pattern,count\n");
        for (p, c) in self.patterns().iter().zip(&self.counts) {
            out.push_str(&format!("{p},{c}\n"));
        }
        out
    }

    pub fn from_csv(text: &str, tree: &Tree) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        match lines.next() {
            Some("pattern,count") => {}
            other => {
                return Err(Error::Samples(format!(
                    "expected header \"pattern,count\", got {other:?}"
                )))
            }
        }
        let mut pairs = Vec::new();
        for line in lines {
            let (p, c) = line
                .split_once(',')
                .ok_or_else(|| Error::Samples(format!("malformed row {line:?}")))?;
            let pattern: LeafPattern = p.trim().parse()?;
            if pattern.len() != tree.n_leaves() {
                return Err(Error::Samples(format!(
                    "pattern {pattern} has {} spins, tree has {} leaves",
                    pattern.len(),
                    tree.n_leaves()
                )));
            }
            let count: u64 = c
                .trim()
                .parse()
                .map_err(|_| Error::Samples(format!("bad count in row {line:?}")))?;
            pairs.push((pattern, count));
        }
        Self::from_counts(pairs)
    }
}

// ---------------------------------------------------------------------------
// Simulation

/// Generator keyed by `(master_seed, trial, tag)`. Different tags give
/// independent generators for the same trial.
pub fn trial_rng(master_seed: u64, trial: u64, tag: &[u8; 8]) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&master_seed.to_le_bytes());
    key[8..16].copy_from_slice(&trial.to_le_bytes());
    key[16..24].copy_from_slice(tag);
    ChaCha8Rng::from_seed(key)
}

/// Counter-based generator for sample `sample` of trial `trial`: each
/// sample reads its own stream, so samples can be drawn in any order or
/// in parallel.
fn sample_rng(master_seed: u64, trial: u64, sample: u64) -> ChaCha8Rng {
    let mut rng = trial_rng(master_seed, trial, b"cfn-spin");
    rng.set_stream(sample);
    rng
}

pub(crate) fn unit_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn draw_pattern(tree: &Tree, flip: &[f64], rng: &mut impl RngCore, spins: &mut [i8]) -> LeafPattern {
    let trav = tree.traversal();
    spins[trav.root] = if rng.next_u64() & 1 == 0 { 1 } else { -1 };
    for &node in &trav.preorder[1..] {
        let (parent, e) = trav.parent[node].expect("non-root node has a parent");
        let flipped = unit_f64(rng) < flip[e];
        spins[node] = if flipped { -spins[parent] } else { spins[parent] };
    }
    LeafPattern(tree.leaves().iter().map(|&l| spins[l]).collect())
}

/// Draw `m` configurations under `theta` and keep the leaf restrictions.
/// Same as [`sample_spins_trial`] with trial index 0.
pub fn sample_spins(tree: &Tree, theta: &EdgeVector, seed: u64, m: u64) -> Result<SampleSet> {
    sample_spins_trial(tree, theta, seed, 0, m)
}

/// Sampling for one trial of a multi-trial experiment.
pub fn sample_spins_trial(
    tree: &Tree,
    theta: &EdgeVector,
    master_seed: u64,
    trial: u64,
    m: u64,
) -> Result<SampleSet> {
    if m < 1 {
        return Err(Error::InvalidArgument("need m >= 1 samples".into()));
    }
    if theta.len() != tree.n_edges() {
        return Err(Error::InvalidArgument("theta length does not match the tree".into()));
    }
    let flip = theta.flip_probabilities();
    const CHUNK: u64 = 8192;
    let n_chunks = m.div_ceil(CHUNK);
    let chunk = |c: u64| {
        let mut spins = vec![0i8; tree.n_nodes()];
        let mut local: BTreeMap<LeafPattern, u64> = BTreeMap::new();
        for s in c * CHUNK..((c + 1) * CHUNK).min(m) {
            let mut rng = sample_rng(master_seed, trial, s);
            *local
                .entry(draw_pattern(tree, &flip, &mut rng, &mut spins))
                .or_insert(0) += 1;
        }
        local
    };
    #[cfg(feature = "parallel")]
    let parts: Vec<_> = {
        use rayon::prelude::*;
        (0..n_chunks).into_par_iter().map(chunk).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<_> = (0..n_chunks).map(chunk).collect();
    let mut total = BTreeMap::new();
    for part in parts {
        for (p, c) in part {
            *total.entry(p).or_insert(0u64) += c;
        }
    }
    SampleSet::from_map(total)
}

/// Exact leaf-pattern distribution by summing the joint weight
/// `(1/2) prod_e (1 + theta_e s_u s_v) / 2` over all spin assignments.
pub fn exact_leaf_distribution(tree: &Tree, theta: &EdgeVector) -> Result<WeightedPatterns> {
    let n = tree.n_leaves();
    if n > ENUMERATION_LEAF_LIMIT {
        return Err(Error::TooLarge {
            leaves: n,
            limit: ENUMERATION_LEAF_LIMIT,
        });
    }
    let internal: Vec<usize> = tree.internal_nodes().collect();
    let mut spins = vec![0i8; tree.n_nodes()];
    let n_patterns = 1u64 << n;
    let mut probs = Vec::with_capacity(n_patterns as usize);
    for idx in 0..n_patterns {
        for (i, &leaf) in tree.leaves().iter().enumerate() {
            spins[leaf] = if idx >> i & 1 == 1 { -1 } else { 1 };
        }
        let mut total = 0.0;
        for assign in 0..(1u64 << internal.len()) {
            for (k, &v) in internal.iter().enumerate() {
                spins[v] = if assign >> k & 1 == 1 { -1 } else { 1 };
            }
            let mut w = 0.5;
            for (e, &(a, b)) in tree.edges().iter().enumerate() {
                w *= 0.5 * (1.0 + theta[e] * f64::from(spins[a] * spins[b]));
            }
            total += w;
        }
        probs.push((LeafPattern::from_index(idx, n), total));
    }
    probs.sort_by(|a, b| a.0.cmp(&b.0));
    let (patterns, weights) = probs.into_iter().unzip();
    WeightedPatterns::new(patterns, weights)
}

/// Every leaf pattern of `tree`, in sorted order.
pub fn all_patterns(n_leaves: usize) -> Vec<LeafPattern> {
    let mut v: Vec<_> = (0..1u64 << n_leaves)
        .map(|i| LeafPattern::from_index(i, n_leaves))
        .collect();
    v.sort();
    v
}
