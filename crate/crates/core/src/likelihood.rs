//! Magnetizations and the log-likelihood with its first two derivatives.
//!
//! For a leaf pattern, the magnetization of a directed edge `(head, tail)`
//! is `P(+ at head | leaves beyond head) - P(- at head | same)`. All `2|E|`
//! of them come from one upward and one downward sweep with
//! `Z_x = q(theta_xa Z_a, theta_xb Z_b)`, `q(s, t) = (s + t) / (1 + s t)`.

use crate::error::{Error, Result};
use crate::model::{EdgeVector, LeafPattern, WeightedPatterns, ENUMERATION_LEAF_LIMIT};
use crate::tree::{DirectedEdge, EdgeId, NodeId, PathDecomposition, Traversal, Tree};

/// Denominators smaller than this are reported as degenerate.
pub const DENOMINATOR_FLOOR: f64 = 1e-14;

#[inline]
pub fn q(s: f64, t: f64) -> Result<f64> {
    let den = 1.0 + s * t;
    if den.abs() < DENOMINATOR_FLOOR {
        return Err(Error::Degenerate(format!(
            "q({s}, {t}) has vanishing denominator"
        )));
    }
    Ok((s + t) / den)
}

/// Magnetizations of one pattern, indexed by [`Tree::directed_index`].
#[derive(Debug, Clone, PartialEq)]
pub struct MagnetizationTable {
    values: Vec<f64>,
}

impl MagnetizationTable {
    pub fn get(&self, tree: &Tree, d: DirectedEdge) -> f64 {
        self.values[tree.directed_index(d)]
    }

    /// `Z` at `head` with respect to the subtree away from `tail`.
    pub fn at(&self, tree: &Tree, edge: EdgeId, head: NodeId) -> f64 {
        self.get(tree, tree.directed(edge, head))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `Z_a Z_b` for `e = {a, b}`.
    pub fn product_across(&self, e: EdgeId) -> f64 {
        self.values[2 * e] * self.values[2 * e + 1]
    }
}

/// Message at `head` from the two neighbours other than `tail`.
fn combine(
    tree: &Tree,
    theta: &EdgeVector,
    pattern: &LeafPattern,
    head: NodeId,
    tail: NodeId,
    msg: impl Fn(DirectedEdge) -> f64,
) -> Result<f64> {
    if let Some(o) = tree.leaf_ordinal(head) {
        return Ok(f64::from(pattern.spins()[o]));
    }
    let mut terms = [0.0; 2];
    let mut k = 0;
    for &(w, e) in tree.neighbors(head) {
        if w != tail {
            terms[k] = theta[e] * msg(tree.directed(e, w));
            k += 1;
        }
    }
    q(terms[0], terms[1])
}

/// All directed magnetizations of `pattern` by a two-pass schedule.
pub fn magnetizations_all(
    tree: &Tree,
    theta: &EdgeVector,
    pattern: &LeafPattern,
) -> Result<MagnetizationTable> {
    let trav = tree.traversal();
    let mut values = vec![f64::NAN; 2 * tree.n_edges()];
    fill_table(tree, trav, theta, pattern, &mut values)?;
    Ok(MagnetizationTable { values })
}

fn fill_table(
    tree: &Tree,
    trav: &Traversal,
    theta: &EdgeVector,
    pattern: &LeafPattern,
    values: &mut [f64],
) -> Result<()> {
    // upward: Z(node, parent)
    for node in trav.postorder() {
        if let Some((parent, e)) = trav.parent[node] {
            let z = combine(tree, theta, pattern, node, parent, |d| {
                values[tree.directed_index(d)]
            })?;
            values[tree.directed_index(tree.directed(e, node))] = z;
        }
    }
    // downward: Z(parent, node)
    for &node in &trav.preorder {
        if let Some((parent, e)) = trav.parent[node] {
            let z = combine(tree, theta, pattern, parent, node, |d| {
                values[tree.directed_index(d)]
            })?;
            values[tree.directed_index(tree.directed(e, parent))] = z;
        }
    }
    Ok(())
}

/// Magnetization straight from its definition: enumerate every spin
/// assignment of the internal nodes of the component at `d.head` and
/// condition on the observed leaves there.
pub fn magnetization_by_definition(
    tree: &Tree,
    theta: &EdgeVector,
    pattern: &LeafPattern,
    d: DirectedEdge,
) -> Result<f64> {
    if tree.n_leaves() > ENUMERATION_LEAF_LIMIT {
        return Err(Error::TooLarge {
            leaves: tree.n_leaves(),
            limit: ENUMERATION_LEAF_LIMIT,
        });
    }
    // collect component nodes and edges
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    let mut stack = vec![(d.head, d.tail)];
    while let Some((n, from)) = stack.pop() {
        nodes.push(n);
        for &(w, e) in tree.neighbors(n) {
            if w != from {
                edges.push(e);
                stack.push((w, n));
            }
        }
    }
    let free: Vec<NodeId> = nodes.iter().copied().filter(|&n| !tree.is_leaf(n)).collect();
    let mut spins = vec![0i8; tree.n_nodes()];
    for &n in &nodes {
        if let Some(o) = tree.leaf_ordinal(n) {
            spins[n] = pattern.spins()[o];
        }
    }
    let mut mass = [0.0f64; 2]; // [+, -]
    for assign in 0..(1u64 << free.len()) {
        for (k, &v) in free.iter().enumerate() {
            spins[v] = if assign >> k & 1 == 1 { -1 } else { 1 };
        }
        let mut w = 0.5;
        for &e in &edges {
            let (a, b) = tree.edges()[e];
            w *= 0.5 * (1.0 + theta[e] * f64::from(spins[a] * spins[b]));
        }
        mass[usize::from(spins[d.head] < 0)] += w;
    }
    let total = mass[0] + mass[1];
    if total <= 0.0 {
        return Err(Error::ZeroProbability);
    }
    Ok((mass[0] - mass[1]) / total)
}

/// `log P(pattern)` by sum-product pruning from `trav.root`, with the
/// partial likelihoods rescaled at every node.
pub fn log_pattern_probability_from(
    tree: &Tree,
    trav: &Traversal,
    theta: &EdgeVector,
    pattern: &LeafPattern,
) -> Result<f64> {
    let mut partial = vec![[1.0f64, 1.0f64]; tree.n_nodes()];
    let mut log_scale = 0.0;
    for (ord, &leaf) in tree.leaves().iter().enumerate() {
        partial[leaf] = if pattern.spins()[ord] > 0 {
            [1.0, 0.0]
        } else {
            [0.0, 1.0]
        };
    }
    for node in trav.postorder() {
        let [lp, lm] = partial[node];
        let max = lp.max(lm);
        if max <= 0.0 {
            return Err(Error::ZeroProbability);
        }
        partial[node] = [lp / max, lm / max];
        log_scale += max.ln();
        if let Some((parent, e)) = trav.parent[node] {
            let same = 0.5 * (1.0 + theta[e]);
            let diff = 0.5 * (1.0 - theta[e]);
            let [cp, cm] = partial[node];
            partial[parent][0] *= same * cp + diff * cm;
            partial[parent][1] *= diff * cp + same * cm;
        }
    }
    let [rp, rm] = partial[trav.root];
    let p = 0.5 * (rp + rm);
    if p <= 0.0 {
        return Err(Error::ZeroProbability);
    }
    Ok(p.ln() + log_scale)
}

pub fn log_pattern_probability(tree: &Tree, theta: &EdgeVector, pattern: &LeafPattern) -> Result<f64> {
    log_pattern_probability_from(tree, tree.traversal(), theta, pattern)
}

/// Neumaier-compensated sum.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }
    pub(crate) fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

fn check_inputs(tree: &Tree, theta: &EdgeVector, data: &WeightedPatterns) -> Result<()> {
    if theta.len() != tree.n_edges() {
        return Err(Error::InvalidArgument("theta length does not match the tree".into()));
    }
    if data.patterns()[0].len() != tree.n_leaves() {
        return Err(Error::InvalidArgument("pattern length does not match the tree".into()));
    }
    Ok(())
}

/// Weighted average log-likelihood `sum_i w_i log P(pattern_i)`.
pub fn log_likelihood(tree: &Tree, theta: &EdgeVector, data: &WeightedPatterns) -> Result<f64> {
    check_inputs(tree, theta, data)?;
    let mut acc = CompensatedSum::default();
    for (p, w) in data.iter() {
        acc.add(w * log_pattern_probability(tree, theta, p)?);
    }
    let v = acc.value();
    if !v.is_finite() {
        return Err(Error::NonFinite("log-likelihood".into()));
    }
    Ok(v)
}

/// Per-sample gradient entry `Z_x Z_y / (1 + theta_e Z_x Z_y)`.
#[inline]
pub fn gradient_term(theta_e: f64, product: f64) -> Result<f64> {
    let den = 1.0 + theta_e * product;
    if den.abs() < DENOMINATOR_FLOOR {
        return Err(Error::Degenerate(
            "gradient denominator 1 + theta Z_x Z_y vanishes".into(),
        ));
    }
    Ok(product / den)
}

pub fn gradient(tree: &Tree, theta: &EdgeVector, data: &WeightedPatterns) -> Result<Vec<f64>> {
    check_inputs(tree, theta, data)?;
    let n = tree.n_edges();
    let acc = reduce_patterns(data, n, |p, w, acc| {
        let table = magnetizations_all(tree, theta, p)?;
        for (e, slot) in acc.iter_mut().enumerate() {
            *slot += w * gradient_term(theta[e], table.product_across(e))?;
        }
        Ok(())
    })?;
    Ok(acc)
}

/// Sum `f` over patterns in fixed-size chunks so the reduction order, and
/// hence the result, does not depend on the thread count.
fn reduce_patterns<F>(data: &WeightedPatterns, len: usize, f: F) -> Result<Vec<f64>>
where
    F: Fn(&LeafPattern, f64, &mut [f64]) -> Result<()> + Sync,
{
    const CHUNK: usize = 32;
    let patterns = data.patterns();
    let weights = data.weights();
    let n_chunks = patterns.len().div_ceil(CHUNK);
    let run = |c: usize| -> Result<Vec<f64>> {
        let mut acc = vec![0.0; len];
        for i in c * CHUNK..((c + 1) * CHUNK).min(patterns.len()) {
            f(&patterns[i], weights[i], &mut acc)?;
        }
        Ok(acc)
    };
    #[cfg(feature = "parallel")]
    let parts: Vec<Result<Vec<f64>>> = {
        use rayon::prelude::*;
        if n_chunks > 1 {
            (0..n_chunks).into_par_iter().map(run).collect()
        } else {
            (0..n_chunks).map(run).collect()
        }
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Result<Vec<f64>>> = (0..n_chunks).map(run).collect();
    let mut total = vec![0.0; len];
    for part in parts {
        for (t, v) in total.iter_mut().zip(part?) {
            *t += v;
        }
    }
    Ok(total)
}

/// Dense symmetric matrix indexed by edge id.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianMatrix {
    n: usize,
    data: Vec<f64>,
}

impl HessianMatrix {
    pub fn zeros(n: usize) -> Self {
        HessianMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    /// From a row-major buffer; rejects asymmetry beyond `1e-12`.
    pub fn from_row_major(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::InvalidArgument("matrix buffer has the wrong size".into()));
        }
        let m = HessianMatrix { n, data };
        if m.asymmetry() > 1e-12 {
            return Err(Error::InvalidArgument("matrix is not symmetric".into()));
        }
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Sets `(i, j)` and `(j, i)`.
    pub fn set_sym(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
        self.data[j * self.n + i] = v;
    }

    pub fn as_row_major(&self) -> &[f64] {
        &self.data
    }

    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n {
            for j in 0..i {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn sub(&self, other: &HessianMatrix) -> HessianMatrix {
        HessianMatrix {
            n: self.n,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }
}

/// Per-pair data for the off-diagonal Hessian formula, with every
/// magnetization it reads resolved to a directed index.
#[derive(Debug, Clone)]
struct PairTerm {
    e: EdgeId,
    f: EdgeId,
    zx: usize,
    zy: usize,
    zv: usize,
    path_theta: Vec<EdgeId>,
    // (theta_{y_j w_j}, Z_{w_j}, theta_{y_j y_{j-1}}, Z_{y_{j-1}}) for j = 0..=N
    factors: Vec<(EdgeId, usize, EdgeId, usize)>,
}

/// Precomputed path decompositions of every unordered edge pair.
#[derive(Debug, Clone)]
pub struct HessianPlan {
    n_edges: usize,
    pairs: Vec<PairTerm>,
}

impl HessianPlan {
    pub fn new(tree: &Tree) -> Result<Self> {
        let n = tree.n_edges();
        let mut pairs = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for e in 0..n {
            for f in e + 1..n {
                pairs.push(pair_term(tree, &tree.edge_path_decomposition(e, f)?));
            }
        }
        Ok(HessianPlan { n_edges: n, pairs })
    }
}

fn pair_term(tree: &Tree, d: &PathDecomposition) -> PairTerm {
    let di = |edge, head| tree.directed_index(tree.directed(edge, head));
    let factors = (0..=d.n)
        .map(|j| {
            let prev = d.y(j as isize - 1);
            (
                d.side_edges[j],
                di(d.side_edges[j], d.side[j]),
                d.path_edges[j],
                di(d.path_edges[j], prev),
            )
        })
        .collect::<Vec<_>>();
    PairTerm {
        e: d.e,
        f: d.f,
        zx: di(d.e, d.x),
        zy: di(d.e, d.y),
        zv: di(d.f, d.v),
        path_theta: d.path_edges[1..].to_vec(),
        factors,
    }
}

/// Add `weight` times the one-pattern Hessian to `acc` (row-major).
fn accumulate_pattern_hessian(
    plan: &HessianPlan,
    theta: &EdgeVector,
    table: &MagnetizationTable,
    weight: f64,
    acc: &mut [f64],
) -> Result<()> {
    let n = plan.n_edges;
    let z = table.values();
    for e in 0..n {
        let g = gradient_term(theta[e], table.product_across(e))?;
        acc[e * n + e] -= weight * g * g;
    }
    for t in &plan.pairs {
        let h = off_diagonal_term(t, theta, z)?;
        acc[t.e * n + t.f] += weight * h;
        acc[t.f * n + t.e] += weight * h;
    }
    Ok(())
}

// Z_x Z_v / (1 + theta_e Z_x Z_y)^2 * prod_{j=1}^{N} theta_{y_j y_{j-1}}
//   * prod_{j=0}^{N} (1 - (theta_{y_j w_j} Z_{w_j})^2)
//                    / (1 + theta_{y_j w_j} theta_{y_j y_{j-1}} Z_{w_j} Z_{y_{j-1}})^2
fn off_diagonal_term(t: &PairTerm, theta: &EdgeVector, z: &[f64]) -> Result<f64> {
    let lead_den = 1.0 + theta[t.e] * z[t.zx] * z[t.zy];
    if lead_den.abs() < DENOMINATOR_FLOOR {
        return Err(Error::Degenerate("Hessian leading denominator vanishes".into()));
    }
    let mut h = z[t.zx] * z[t.zv] / (lead_den * lead_den);
    for &pe in &t.path_theta {
        h *= theta[pe];
    }
    for &(we, wz, pe, pz) in &t.factors {
        let side = theta[we] * z[wz];
        let den = 1.0 + side * theta[pe] * z[pz];
        if den.abs() < DENOMINATOR_FLOOR {
            return Err(Error::Degenerate("Hessian path denominator vanishes".into()));
        }
        h *= (1.0 - side * side) / (den * den);
    }
    Ok(h)
}

/// Hessian of the weighted log-likelihood.
pub fn hessian(tree: &Tree, theta: &EdgeVector, data: &WeightedPatterns) -> Result<HessianMatrix> {
    let plan = HessianPlan::new(tree)?;
    hessian_with_plan(tree, &plan, theta, data)
}

pub fn hessian_with_plan(
    tree: &Tree,
    plan: &HessianPlan,
    theta: &EdgeVector,
    data: &WeightedPatterns,
) -> Result<HessianMatrix> {
    check_inputs(tree, theta, data)?;
    let n = tree.n_edges();
    let acc = reduce_patterns(data, n * n, |p, w, acc| {
        let table = magnetizations_all(tree, theta, p)?;
        accumulate_pattern_hessian(plan, theta, &table, w, acc)
    })?;
    Ok(HessianMatrix { n, data: acc })
}

/// Hessian of `log P(pattern)` for a single pattern.
pub fn pattern_hessian(
    tree: &Tree,
    plan: &HessianPlan,
    theta: &EdgeVector,
    pattern: &LeafPattern,
) -> Result<HessianMatrix> {
    let n = tree.n_edges();
    let table = magnetizations_all(tree, theta, pattern)?;
    let mut acc = vec![0.0; n * n];
    accumulate_pattern_hessian(plan, theta, &table, 1.0, &mut acc)?;
    Ok(HessianMatrix { n, data: acc })
}

/// Central difference of the `(e1, e2)` Hessian entry along `e3`.
#[allow(clippy::too_many_arguments)]
pub fn third_derivative_fd(
    tree: &Tree,
    theta: &EdgeVector,
    data: &WeightedPatterns,
    e1: EdgeId,
    e2: EdgeId,
    e3: EdgeId,
    h: f64,
) -> Result<f64> {
    let plan = HessianPlan::new(tree)?;
    third_derivative_fd_with_plan(tree, &plan, theta, data, (e1, e2, e3), h)
}

pub fn third_derivative_fd_with_plan(
    tree: &Tree,
    plan: &HessianPlan,
    theta: &EdgeVector,
    data: &WeightedPatterns,
    (e1, e2, e3): (EdgeId, EdgeId, EdgeId),
    h: f64,
) -> Result<f64> {
    for e in [e1, e2, e3] {
        tree.edge(e)?;
    }
    let (up, down) = (theta[e3] + h, theta[e3] - h);
    if !(h > 0.0) || up >= 1.0 || down <= -1.0 {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {h} leaves (-1, 1) at edge {e3}"
        )));
    }
    let hp = hessian_with_plan(tree, plan, &theta.with(e3, up), data)?;
    let hm = hessian_with_plan(tree, plan, &theta.with(e3, down), data)?;
    Ok((hp.get(e1, e2) - hm.get(e1, e2)) / (2.0 * h))
}

/// Constants for the generic Hessian entry scale `C (C_tilde / delta)^(diam/2 + 4)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HessianScaleConstants {
    pub c: f64,
    pub c_tilde: f64,
}

impl Default for HessianScaleConstants {
    fn default() -> Self {
        HessianScaleConstants { c: 1.0, c_tilde: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeterministicBounds {
    /// `1 / (2 c_hat delta)`.
    pub grad_bound: f64,
    /// `4 diam / (2 c_hat delta)^(4 diam + 2)`.
    pub third_deriv_bound: f64,
    pub hessian_entry_scale: f64,
}

pub fn deterministic_bounds(
    delta: f64,
    diam: usize,
    c_bar: f64,
    scale: HessianScaleConstants,
) -> DeterministicBounds {
    let base = 2.0 * c_bar * delta;
    let d = diam as f64;
    DeterministicBounds {
        grad_bound: 1.0 / base,
        third_deriv_bound: 4.0 * d / base.powf(4.0 * d + 2.0),
        hessian_entry_scale: scale.c * (scale.c_tilde / delta).powf(d / 2.0 + 4.0),
    }
}

// ---------------------------------------------------------------------------
// Incremental messages for coordinate updates

/// Directed magnetizations for every pattern of a data set, kept in sync
/// with a parameter vector that changes one coordinate at a time.
///
/// Changing `theta_e` only invalidates the messages whose subtree contains
/// `e`; they are recomputed lazily, so reading the two messages across the
/// next edge costs time proportional to its distance from `e`.
#[derive(Debug, Clone)]
pub struct MessageCache<'a> {
    tree: &'a Tree,
    patterns: &'a [LeafPattern],
    theta: EdgeVector,
    // z[d * n_patterns + i]
    z: Vec<f64>,
    dirty: Vec<bool>,
}

impl<'a> MessageCache<'a> {
    pub fn new(tree: &'a Tree, theta: EdgeVector, data: &'a WeightedPatterns) -> Result<Self> {
        check_inputs(tree, &theta, data)?;
        let np = data.len();
        let nd = 2 * tree.n_edges();
        let mut z = vec![0.0; nd * np];
        for (i, p) in data.patterns().iter().enumerate() {
            let t = magnetizations_all(tree, &theta, p)?;
            for (d, &v) in t.values().iter().enumerate() {
                z[d * np + i] = v;
            }
        }
        Ok(MessageCache {
            tree,
            patterns: data.patterns(),
            theta,
            z,
            dirty: vec![false; nd],
        })
    }

    pub fn theta(&self) -> &EdgeVector {
        &self.theta
    }

    pub fn set(&mut self, e: EdgeId, value: f64) {
        self.theta[e] = value;
        let (a, b) = self.tree.edges()[e];
        for (start, away) in [(a, b), (b, a)] {
            let mut stack = vec![(start, away)];
            while let Some((h, from)) = stack.pop() {
                for &(t, te) in self.tree.neighbors(h) {
                    if t != from {
                        let idx = self.tree.directed_index(self.tree.directed(te, h));
                        self.dirty[idx] = true;
                        stack.push((t, h));
                    }
                }
            }
        }
    }

    fn ensure(&mut self, idx: usize) -> Result<()> {
        if !self.dirty[idx] {
            return Ok(());
        }
        let d = self.tree.directed_from_index(idx);
        let mut kids = [(0usize, 0usize); 2];
        let mut k = 0;
        for &(w, e) in self.tree.neighbors(d.head) {
            if w != d.tail {
                kids[k] = (e, self.tree.directed_index(self.tree.directed(e, w)));
                k += 1;
            }
        }
        debug_assert_eq!(k, 2, "leaf messages never go stale");
        for &(_, c) in &kids {
            self.ensure(c)?;
        }
        let np = self.patterns.len();
        let (ta, tb) = (self.theta[kids[0].0], self.theta[kids[1].0]);
        for i in 0..np {
            let s = ta * self.z[kids[0].1 * np + i];
            let t = tb * self.z[kids[1].1 * np + i];
            self.z[idx * np + i] = q(s, t)?;
        }
        self.dirty[idx] = false;
        Ok(())
    }

    /// `Z_a Z_b` across `e = {a, b}` for every pattern, at the current theta.
    pub fn products_across(&mut self, e: EdgeId) -> Result<Vec<f64>> {
        self.ensure(2 * e)?;
        self.ensure(2 * e + 1)?;
        let np = self.patterns.len();
        Ok((0..np)
            .map(|i| self.z[2 * e * np + i] * self.z[(2 * e + 1) * np + i])
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{exact_leaf_distribution, SampleSet};
    use crate::tree::{build_balanced, build_random, parse_newick};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pat(s: &str) -> LeafPattern {
        s.parse().unwrap()
    }

    fn samples(list: &[(&str, u64)]) -> SampleSet {
        SampleSet::from_counts(list.iter().map(|&(p, c)| (pat(p), c))).unwrap()
    }

    #[test]
    fn leaf_headed_entries_equal_spins() {
        let t = build_random(7, 3).unwrap();
        let th = EdgeVector::uniform(t.n_edges(), 0.8).unwrap();
        let p = pat("+--+-++");
        let table = magnetizations_all(&t, &th, &p).unwrap();
        for (o, &leaf) in t.leaves().iter().enumerate() {
            let e = t.neighbors(leaf)[0].1;
            assert_eq!(table.at(&t, e, leaf), f64::from(p.spins()[o]));
        }
    }

    #[test]
    fn two_leaf_magnetizations() {
        let t = parse_newick("(A,B);").unwrap();
        let table = magnetizations_all(&t, &EdgeVector::uniform(1, 0.5).unwrap(), &pat("++")).unwrap();
        assert_eq!(table.values(), &[1.0, 1.0]);
    }

    #[test]
    fn cherry_magnetization() {
        let t = parse_newick("((A,B),(C,D));").unwrap();
        let th = EdgeVector::uniform(5, 0.9).unwrap();
        let x = t.neighbors(t.leaves()[0])[0].0;
        let center = t
            .neighbors(x)
            .iter()
            .find(|(w, _)| !t.is_leaf(*w))
            .copied()
            .unwrap();
        let d = t.directed(center.1, x);
        let expect = 1.8 / 1.81;
        let table = magnetizations_all(&t, &th, &pat("++++")).unwrap();
        assert!((table.get(&t, d) - expect).abs() < 1e-15);
        assert!((magnetization_by_definition(&t, &th, &pat("++++"), d).unwrap() - expect).abs() < 1e-14);
        assert!(magnetization_by_definition(&t, &th, &pat("+-++"), d).unwrap().abs() < 1e-15);
    }

    #[test]
    fn recursion_matches_definition_on_six_leaves() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = build_random(6, 5).unwrap();
        let th = EdgeVector::new((0..t.n_edges()).map(|_| rng.random_range(0.7..0.95)).collect()).unwrap();
        let p = LeafPattern::from_index(rng.random_range(0..64), 6);
        let table = magnetizations_all(&t, &th, &p).unwrap();
        for i in 0..2 * t.n_edges() {
            let d = t.directed_from_index(i);
            let brute = magnetization_by_definition(&t, &th, &p, d).unwrap();
            assert!((table.values()[i] - brute).abs() < 1e-10);
        }
    }

    #[test]
    fn degenerate_q() {
        assert!(matches!(q(1.0, -1.0), Err(Error::Degenerate(_))));
        let t = parse_newick("((A,B),(C,D));").unwrap();
        // a cherry with perfect edges and disagreeing leaves
        let th = EdgeVector::uniform(5, 1.0).unwrap();
        assert!(magnetizations_all(&t, &th, &pat("+-++")).is_err());
    }

    #[test]
    fn log_likelihood_examples() {
        let t = parse_newick("(A,B);").unwrap();
        let th = EdgeVector::uniform(1, 0.5).unwrap();
        let ll = log_likelihood(&t, &th, samples(&[("++", 1)]).weighted()).unwrap();
        assert!((ll - 0.375f64.ln()).abs() < 1e-14);

        let t = build_random(7, 1).unwrap();
        let th = EdgeVector::uniform(t.n_edges(), 0.0).unwrap();
        let ll = log_likelihood(&t, &th, samples(&[("+-+--++", 1)]).weighted()).unwrap();
        assert!((ll + 7.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_identity_on_quartet() {
        let t = build_balanced(2).unwrap();
        let th = EdgeVector::uniform(5, 0.8).unwrap();
        let exact = exact_leaf_distribution(&t, &th).unwrap();
        let ll = log_likelihood(&t, &th, &exact).unwrap();
        let neg_entropy: f64 = exact.weights().iter().map(|p| p * p.ln()).sum();
        assert!((ll - neg_entropy).abs() < 1e-10);
    }

    #[test]
    fn zero_probability_at_boundary() {
        let t = parse_newick("(A,B);").unwrap();
        let th = EdgeVector::uniform(1, 1.0).unwrap();
        assert_eq!(
            log_likelihood(&t, &th, samples(&[("+-", 1)]).weighted()),
            Err(Error::ZeroProbability)
        );
    }

    #[test]
    fn gradient_examples() {
        let t = parse_newick("(A,B);").unwrap();
        let g = gradient(&t, &EdgeVector::uniform(1, 0.5).unwrap(), samples(&[("++", 1)]).weighted()).unwrap();
        assert!((g[0] - 2.0 / 3.0).abs() < 1e-15);
        let g = gradient(
            &t,
            &EdgeVector::uniform(1, 0.0).unwrap(),
            samples(&[("++", 1), ("+-", 1)]).weighted(),
        )
        .unwrap();
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn hessian_two_leaf() {
        let t = parse_newick("(A,B);").unwrap();
        let h = hessian(&t, &EdgeVector::uniform(1, 0.5).unwrap(), samples(&[("++", 1)]).weighted()).unwrap();
        assert!((h.get(0, 0) + 4.0 / 9.0).abs() < 1e-15);
    }

    fn random_instance(seed: u64, t: &Tree) -> (EdgeVector, SampleSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let th = EdgeVector::new((0..t.n_edges()).map(|_| rng.random_range(0.8..0.9)).collect()).unwrap();
        let pats: Vec<LeafPattern> = (0..50)
            .map(|_| LeafPattern::from_index(rng.random_range(0..1u64 << t.n_leaves()), t.n_leaves()))
            .collect();
        (th, SampleSet::from_patterns(pats).unwrap())
    }

    #[test]
    fn hessian_matches_fd_and_is_symmetric() {
        let t = build_balanced(2).unwrap();
        let (th, s) = random_instance(5, &t);
        let h = hessian(&t, &th, s.weighted()).unwrap();
        assert_eq!(h.asymmetry(), 0.0);
        let step = 1e-4;
        for f in 0..5 {
            let gp = gradient(&t, &th.with(f, th[f] + step), s.weighted()).unwrap();
            let gm = gradient(&t, &th.with(f, th[f] - step), s.weighted()).unwrap();
            for e in 0..5 {
                let fd = (gp[e] - gm[e]) / (2.0 * step);
                assert!((fd - h.get(e, f)).abs() < 1e-5, "({e},{f}) fd {fd} vs {}", h.get(e, f));
            }
        }
    }

    #[test]
    fn literal_leading_factor_fails_fd() {
        // With an extra theta_e in the leading factor, off-diagonal entries
        // would be scaled by theta_e < 1 and miss the finite differences.
        let t = build_balanced(2).unwrap();
        let (th, s) = random_instance(8, &t);
        let h = hessian(&t, &th, s.weighted()).unwrap();
        let step = 1e-4;
        let (e, f) = (0, 1);
        let gp = gradient(&t, &th.with(f, th[f] + step), s.weighted()).unwrap();
        let gm = gradient(&t, &th.with(f, th[f] - step), s.weighted()).unwrap();
        let fd = (gp[e] - gm[e]) / (2.0 * step);
        let literal = th[e] * h.get(e, f);
        assert!((fd - h.get(e, f)).abs() < 1e-6);
        assert!((fd - literal).abs() > 1e-3, "fd {fd} literal {literal}");
    }

    #[test]
    fn third_derivative_two_leaf_closed_form() {
        let t = parse_newick("(A,B);").unwrap();
        let th = EdgeVector::uniform(1, 0.5).unwrap();
        let s = samples(&[("++", 1)]);
        let v = third_derivative_fd(&t, &th, s.weighted(), 0, 0, 0, 1e-4).unwrap();
        assert!((v - 2.0 / 1.5f64.powi(3)).abs() < 1e-4);
        let b = deterministic_bounds(0.2, 1, 0.5, HessianScaleConstants::default());
        assert!(v.abs() <= b.third_deriv_bound);
        assert!(third_derivative_fd(&t, &th, s.weighted(), 0, 0, 0, 0.6).is_err());
    }

    #[test]
    fn deterministic_bound_values() {
        let b = deterministic_bounds(0.2, 1, 0.5, HessianScaleConstants::default());
        assert!((b.grad_bound - 5.0).abs() < 1e-12);
        assert!((b.third_deriv_bound - 62500.0).abs() < 1e-6);
        let b2 = deterministic_bounds(0.2, 2, 0.5, HessianScaleConstants::default());
        assert!(b2.third_deriv_bound > b.third_deriv_bound);
        let b3 = deterministic_bounds(0.1, 1, 0.5, HessianScaleConstants::default());
        assert!((b3.grad_bound - 10.0).abs() < 1e-12);
        let s = deterministic_bounds(0.5, 2, 0.5, HessianScaleConstants { c: 2.0, c_tilde: 1.0 });
        assert!((s.hessian_entry_scale - 2.0 * 2f64.powi(5)).abs() < 1e-9);
    }

    #[test]
    fn message_cache_tracks_full_recompute() {
        let t = build_random(8, 21).unwrap();
        let (th, s) = random_instance(2, &t);
        let mut cache = MessageCache::new(&t, th.clone(), s.weighted()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut cur = th;
        for _ in 0..40 {
            let e = rng.random_range(0..t.n_edges());
            let v = rng.random_range(0.5..0.95);
            cache.set(e, v);
            cur[e] = v;
            let f = rng.random_range(0..t.n_edges());
            let prods = cache.products_across(f).unwrap();
            for (i, p) in s.patterns().iter().enumerate() {
                let full = magnetizations_all(&t, &cur, p).unwrap();
                assert!((prods[i] - full.product_across(f)).abs() < 1e-14);
            }
        }
    }
}
