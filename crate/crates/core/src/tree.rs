//! Unrooted binary tree topologies.
//!
//! Nodes have degree 1 (leaves) or 3 (internal). Edges carry stable ids
//! `0..|E|`; every `EdgeVector` in the crate is indexed by them. Directed
//! edges index the `2|E|` magnetization messages: the directed edge with
//! head `h` and tail `t` stands for the component containing `h` once the
//! edge `{h, t}` is removed.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type NodeId = usize;
pub type EdgeId = usize;

/// An edge with an orientation. The head is the node whose descendant
/// subtree (away from the tail) the directed edge refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DirectedEdge {
    pub edge: EdgeId,
    pub head: NodeId,
    pub tail: NodeId,
}

/// A rooted view of the tree used to schedule message passing.
#[derive(Debug, Clone)]
pub struct Traversal {
    pub root: NodeId,
    /// Pre-order: every node appears after its parent.
    pub preorder: Vec<NodeId>,
    /// `(parent, edge to parent)` per node; `None` at the root.
    pub parent: Vec<Option<(NodeId, EdgeId)>>,
}

impl Traversal {
    pub fn postorder(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.preorder.iter().rev().copied()
    }
}

#[derive(Debug, Clone)]
pub struct Tree {
    adjacency: Vec<Vec<(NodeId, EdgeId)>>,
    edges: Vec<(NodeId, NodeId)>,
    leaves: Vec<NodeId>,
    leaf_names: Vec<Option<String>>,
    leaf_ordinal: Vec<Option<usize>>,
    traversal: Traversal,
}

impl Tree {
    /// Assemble a tree from an edge list. `leaves` fixes the leaf order and
    /// must list every degree-1 node exactly once.
    pub fn from_edges(
        n_nodes: usize,
        edges: Vec<(NodeId, NodeId)>,
        leaves: Vec<NodeId>,
        leaf_names: Vec<Option<String>>,
    ) -> Result<Tree> {
        if n_nodes < 2 {
            return Err(Error::Topology("a tree needs at least 2 leaves".into()));
        }
        if edges.len() + 1 != n_nodes {
            return Err(Error::Topology(format!(
                "{} edges for {} nodes (expected |E| = |V| - 1)",
                edges.len(),
                n_nodes
            )));
        }
        if leaf_names.len() != leaves.len() {
            return Err(Error::Topology("one name slot per leaf required".into()));
        }
        let mut adjacency = vec![Vec::new(); n_nodes];
        for (id, &(a, b)) in edges.iter().enumerate() {
            if a >= n_nodes || b >= n_nodes || a == b {
                return Err(Error::Topology(format!("bad edge {id}: ({a}, {b})")));
            }
            adjacency[a].push((b, id));
            adjacency[b].push((a, id));
        }
        for (node, nbrs) in adjacency.iter().enumerate() {
            if nbrs.len() != 1 && nbrs.len() != 3 {
                return Err(Error::Topology(format!(
                    "node {node} has degree {} (only 1 or 3 allowed)",
                    nbrs.len()
                )));
            }
        }
        let mut leaf_ordinal = vec![None; n_nodes];
        for (ord, &leaf) in leaves.iter().enumerate() {
            if leaf >= n_nodes || adjacency[leaf].len() != 1 || leaf_ordinal[leaf].is_some() {
                return Err(Error::Topology(format!("node {leaf} listed as leaf is invalid")));
            }
            leaf_ordinal[leaf] = Some(ord);
        }
        let n_deg1 = adjacency.iter().filter(|a| a.len() == 1).count();
        if n_deg1 != leaves.len() {
            return Err(Error::Topology("leaf list does not cover all degree-1 nodes".into()));
        }
        if leaves.len() < 2 {
            return Err(Error::Topology("a tree needs at least 2 leaves".into()));
        }
        let mut names = BTreeSet::new();
        for name in leaf_names.iter().flatten() {
            if !names.insert(name.as_str()) {
                return Err(Error::Topology(format!("duplicate leaf label {name:?}")));
            }
        }

        let root = default_root(&adjacency);
        let traversal = bfs_traversal(&adjacency, root);
        if traversal.preorder.len() != n_nodes {
            return Err(Error::Topology("graph is not connected".into()));
        }
        Ok(Tree {
            adjacency,
            edges,
            leaves,
            leaf_names,
            leaf_ordinal,
            traversal,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.adjacency.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn edges(&self) -> &[(NodeId, NodeId)] {
        &self.edges
    }

    pub fn edge(&self, e: EdgeId) -> Result<(NodeId, NodeId)> {
        self.edges.get(e).copied().ok_or(Error::InvalidEdge(e))
    }

    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    pub fn neighbors(&self, node: NodeId) -> &[(NodeId, EdgeId)] {
        &self.adjacency[node]
    }

    pub fn degree(&self, node: NodeId) -> usize {
        self.adjacency[node].len()
    }

    pub fn is_leaf(&self, node: NodeId) -> bool {
        self.adjacency[node].len() == 1
    }

    /// Position of `node` in the leaf order, if it is a leaf.
    pub fn leaf_ordinal(&self, node: NodeId) -> Option<usize> {
        self.leaf_ordinal[node]
    }

    pub fn leaf_name(&self, ordinal: usize) -> String {
        self.leaf_names
            .get(ordinal)
            .cloned()
            .flatten()
            .unwrap_or_else(|| format!("t{ordinal}"))
    }

    pub fn leaf_names(&self) -> Vec<String> {
        (0..self.n_leaves()).map(|i| self.leaf_name(i)).collect()
    }

    /// Cached traversal from the default root: the lowest-indexed internal
    /// node, or node 0 for the single-edge tree.
    pub fn traversal(&self) -> &Traversal {
        &self.traversal
    }

    pub fn traversal_from(&self, root: NodeId) -> Traversal {
        bfs_traversal(&self.adjacency, root)
    }

    pub fn internal_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.n_nodes()).filter(|&v| !self.is_leaf(v))
    }

    /// Orient `e` so that `head` is the given endpoint.
    pub fn directed(&self, e: EdgeId, head: NodeId) -> DirectedEdge {
        let (a, b) = self.edges[e];
        debug_assert!(head == a || head == b);
        DirectedEdge {
            edge: e,
            head,
            tail: if head == a { b } else { a },
        }
    }

    /// Dense index of a directed edge in `0..2|E|`.
    pub fn directed_index(&self, d: DirectedEdge) -> usize {
        let (a, _) = self.edges[d.edge];
        2 * d.edge + usize::from(d.head != a)
    }

    pub fn directed_from_index(&self, idx: usize) -> DirectedEdge {
        let e = idx / 2;
        let (a, b) = self.edges[e];
        if idx % 2 == 0 {
            DirectedEdge { edge: e, head: a, tail: b }
        } else {
            DirectedEdge { edge: e, head: b, tail: a }
        }
    }

    /// Graph distances from `src` to every node.
    pub fn bfs_distances(&self, src: NodeId) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.n_nodes()];
        dist[src] = 0;
        let mut queue = VecDeque::from([src]);
        while let Some(v) = queue.pop_front() {
            for &(w, _) in &self.adjacency[v] {
                if dist[w] == usize::MAX {
                    dist[w] = dist[v] + 1;
                    queue.push_back(w);
                }
            }
        }
        dist
    }

    /// Length (in edges) of the longest simple path.
    pub fn diameter(&self) -> usize {
        let d0 = self.bfs_distances(0);
        let far = argmax(&d0);
        let d1 = self.bfs_distances(far);
        d1[argmax(&d1)]
    }

    /// Orient the pair `(e, f)` and enumerate the path between them.
    ///
    /// `e = {x, y}` is oriented so that `f` lies in the component of `y`,
    /// and `f = {u, v}` so that `u` is the endpoint closer to `y`.
    pub fn edge_path_decomposition(&self, e: EdgeId, f: EdgeId) -> Result<PathDecomposition> {
        let (e0, e1) = self.edge(e)?;
        let (f0, f1) = self.edge(f)?;
        if e == f {
            return Err(Error::SameEdge(e));
        }
        // Root the tree at one endpoint of e; f is on the other endpoint's
        // side iff that endpoint is an ancestor of f's nearer endpoint.
        let mut x = e0;
        let mut y = e1;
        let mut trav = self.traversal_from(x);
        let nearer = |t: &Traversal| {
            let depth = |mut n: NodeId| {
                let mut d = 0;
                while let Some((p, _)) = t.parent[n] {
                    n = p;
                    d += 1;
                }
                d
            };
            if depth(f0) <= depth(f1) {
                (f0, f1)
            } else {
                (f1, f0)
            }
        };
        let (mut u, mut v) = nearer(&trav);
        let on_y_side = |t: &Traversal, mut n: NodeId, y: NodeId| loop {
            if n == y {
                return true;
            }
            match t.parent[n] {
                Some((p, _)) => n = p,
                None => return false,
            }
        };
        if !on_y_side(&trav, u, y) {
            std::mem::swap(&mut x, &mut y);
            trav = self.traversal_from(x);
            (u, v) = nearer(&trav);
        }

        // Walk from u up to y: y_0 = u, y_{j+1} = parent(y_j).
        let mut path = vec![u];
        let mut path_edges = vec![f];
        let mut cur = u;
        while cur != y {
            let (p, pe) = trav.parent[cur].expect("y is an ancestor of u");
            path.push(p);
            path_edges.push(pe);
            cur = p;
        }
        let n = path.len() - 1;
        let mut side = Vec::with_capacity(n + 1);
        let mut side_edges = Vec::with_capacity(n + 1);
        for j in 0..=n {
            let prev = if j == 0 { v } else { path[j - 1] };
            let next = if j == n { x } else { path[j + 1] };
            let &(w, we) = self.adjacency[path[j]]
                .iter()
                .find(|&&(w, _)| w != prev && w != next)
                .ok_or_else(|| Error::Topology(format!("path node {} is not internal", path[j])))?;
            side.push(w);
            side_edges.push(we);
        }
        // path_edges[j] joins y_j and y_{j-1}; j = 0 is f itself.
        Ok(PathDecomposition {
            e,
            f,
            x,
            y,
            u,
            v,
            n,
            path,
            path_edges,
            side,
            side_edges,
        })
    }

    /// Leaf-label bipartitions induced by the internal edges, each recorded
    /// by the side that does not contain the smallest label. Two labelled
    /// binary trees are isomorphic iff their split sets agree.
    pub fn splits(&self) -> BTreeSet<BTreeSet<String>> {
        let names = self.leaf_names();
        let anchor = names.iter().min().cloned().unwrap_or_default();
        let mut out = BTreeSet::new();
        for (e, &(a, b)) in self.edges.iter().enumerate() {
            if self.is_leaf(a) || self.is_leaf(b) {
                continue;
            }
            let side = self.component_leaves(self.directed(e, b));
            let side: BTreeSet<String> = side.into_iter().map(|o| names[o].clone()).collect();
            let all: BTreeSet<String> = names.iter().cloned().collect();
            let canon = if side.contains(&anchor) {
                all.difference(&side).cloned().collect()
            } else {
                side
            };
            out.insert(canon);
        }
        out
    }

    /// Leaf ordinals in the component of `d.head` after deleting `d.edge`.
    pub fn component_leaves(&self, d: DirectedEdge) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![(d.head, d.tail)];
        while let Some((n, from)) = stack.pop() {
            if let Some(o) = self.leaf_ordinal[n] {
                out.push(o);
            }
            for &(w, _) in &self.adjacency[n] {
                if w != from {
                    stack.push((w, n));
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Newick text with leaf labels and no branch lengths. Rooted at the
    /// default traversal root, so internal trees print as a trifurcation.
    pub fn to_newick(&self) -> String {
        let mut s = String::new();
        let root = self.traversal.root;
        if self.is_leaf(root) {
            // single edge
            let (a, b) = self.edges[0];
            let _ = write!(
                s,
                "({},{});",
                quote_label(&self.leaf_name(self.leaf_ordinal[a].unwrap())),
                quote_label(&self.leaf_name(self.leaf_ordinal[b].unwrap()))
            );
            return s;
        }
        self.write_subtree(&mut s, root, usize::MAX);
        s.push(';');
        s
    }

    fn write_subtree(&self, s: &mut String, node: NodeId, from: NodeId) {
        if let Some(o) = self.leaf_ordinal[node] {
            s.push_str(&quote_label(&self.leaf_name(o)));
            return;
        }
        s.push('(');
        let mut first = true;
        for &(w, _) in &self.adjacency[node] {
            if w == from {
                continue;
            }
            if !first {
                s.push(',');
            }
            first = false;
            self.write_subtree(s, w, node);
        }
        s.push(')');
    }

    /// One line per edge id: `id: a-b` with leaf labels for pendant ends.
    pub fn edge_table(&self) -> Vec<String> {
        self.edges
            .iter()
            .enumerate()
            .map(|(id, &(a, b))| format!("{id}: {}-{}", self.node_label(a), self.node_label(b)))
            .collect()
    }

    fn node_label(&self, n: NodeId) -> String {
        match self.leaf_ordinal[n] {
            Some(o) => self.leaf_name(o),
            None => format!("#{n}"),
        }
    }
}

fn argmax(v: &[usize]) -> usize {
    v.iter()
        .enumerate()
        .max_by_key(|&(i, &d)| (d, std::cmp::Reverse(i)))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

fn default_root(adjacency: &[Vec<(NodeId, EdgeId)>]) -> NodeId {
    adjacency.iter().position(|a| a.len() == 3).unwrap_or(0)
}

fn bfs_traversal(adjacency: &[Vec<(NodeId, EdgeId)>], root: NodeId) -> Traversal {
    let mut parent = vec![None; adjacency.len()];
    let mut seen = vec![false; adjacency.len()];
    let mut preorder = Vec::with_capacity(adjacency.len());
    let mut queue = VecDeque::from([root]);
    seen[root] = true;
    while let Some(v) = queue.pop_front() {
        preorder.push(v);
        for &(w, e) in &adjacency[v] {
            if !seen[w] {
                seen[w] = true;
                parent[w] = Some((v, e));
                queue.push_back(w);
            }
        }
    }
    Traversal {
        root,
        preorder,
        parent,
    }
}

/// The path between two edges, indexed as `y_j` for `j = 0..=n`.
///
/// `path[0] = u` and `path[n] = y`; `side[j]` is the third neighbour `w_j`
/// of `y_j`. The conventional extensions are `y_{-1} = v` and
/// `y_{n+1} = x`. `path_edges[j]` joins `y_j` and `y_{j-1}` (so
/// `path_edges[0] == f`), and `side_edges[j]` joins `y_j` and `w_j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathDecomposition {
    pub e: EdgeId,
    pub f: EdgeId,
    pub x: NodeId,
    pub y: NodeId,
    pub u: NodeId,
    pub v: NodeId,
    pub n: usize,
    pub path: Vec<NodeId>,
    pub path_edges: Vec<EdgeId>,
    pub side: Vec<NodeId>,
    pub side_edges: Vec<EdgeId>,
}

impl PathDecomposition {
    /// `y_j` for `j` in `-1..=n+1`.
    pub fn y(&self, j: isize) -> NodeId {
        if j < 0 {
            self.v
        } else if j as usize > self.n {
            self.x
        } else {
            self.path[j as usize]
        }
    }
}

// ---------------------------------------------------------------------------
// Builders

/// Two complete rooted binary trees of depth `depth - 1` joined by one
/// central edge: `2^depth` leaves, diameter `2 depth - 1`.
pub fn build_balanced(depth: usize) -> Result<Tree> {
    if depth < 1 {
        return Err(Error::InvalidArgument("balanced tree depth must be >= 1".into()));
    }
    let mut b = EdgeListBuilder::default();
    let left = b.node();
    let right = b.node();
    b.edge(left, right);
    grow_complete(&mut b, left, depth - 1);
    grow_complete(&mut b, right, depth - 1);
    b.finish()
}

fn grow_complete(b: &mut EdgeListBuilder, node: NodeId, depth: usize) {
    if depth == 0 {
        b.mark_leaf(node);
        return;
    }
    for _ in 0..2 {
        let c = b.node();
        b.edge(node, c);
        grow_complete(b, c, depth - 1);
    }
}

/// Caterpillar on `n_leaves` leaves; its diameter is `n_leaves - 1`.
pub fn build_caterpillar(n_leaves: usize) -> Result<Tree> {
    if n_leaves < 2 {
        return Err(Error::InvalidArgument("caterpillar needs >= 2 leaves".into()));
    }
    let mut b = EdgeListBuilder::default();
    if n_leaves == 2 {
        let a = b.node();
        let c = b.node();
        b.edge(a, c);
        b.mark_leaf(a);
        b.mark_leaf(c);
        return b.finish();
    }
    let spine: Vec<NodeId> = (0..n_leaves - 2).map(|_| b.node()).collect();
    for w in spine.windows(2) {
        b.edge(w[0], w[1]);
    }
    let first = b.node();
    b.edge(spine[0], first);
    b.mark_leaf(first);
    for &s in &spine {
        let l = b.node();
        b.edge(s, l);
        b.mark_leaf(l);
    }
    let last = b.node();
    b.edge(*spine.last().unwrap(), last);
    b.mark_leaf(last);
    b.finish()
}

/// Uniform-ish random topology by stepwise leaf addition on a random edge.
pub fn build_random(n_leaves: usize, seed: u64) -> Result<Tree> {
    if n_leaves < 2 {
        return Err(Error::InvalidArgument("random tree needs >= 2 leaves".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = EdgeListBuilder::default();
    let a = b.node();
    let c = b.node();
    b.edge(a, c);
    b.mark_leaf(a);
    b.mark_leaf(c);
    for _ in 2..n_leaves {
        let pick = rng.random_range(0..b.edges.len());
        let (p, q) = b.edges[pick];
        let mid = b.node();
        let leaf = b.node();
        b.edges[pick] = (p, mid);
        b.edge(mid, q);
        b.edge(mid, leaf);
        b.mark_leaf(leaf);
    }
    b.finish()
}

#[derive(Default)]
struct EdgeListBuilder {
    n: usize,
    edges: Vec<(NodeId, NodeId)>,
    leaves: Vec<NodeId>,
}

impl EdgeListBuilder {
    fn node(&mut self) -> NodeId {
        self.n += 1;
        self.n - 1
    }
    fn edge(&mut self, a: NodeId, b: NodeId) {
        self.edges.push((a, b));
    }
    fn mark_leaf(&mut self, v: NodeId) {
        self.leaves.push(v);
    }
    fn finish(self) -> Result<Tree> {
        let names = (0..self.leaves.len()).map(|i| Some(format!("t{i}"))).collect();
        Tree::from_edges(self.n, self.edges, self.leaves, names)
    }
}

// ---------------------------------------------------------------------------
// Newick

enum PNode {
    Leaf(Option<String>),
    Group(Vec<PNode>),
}

struct NewickParser<'a> {
    src: &'a [u8],
    pos: usize,
    saw_length: bool,
    saw_internal_label: bool,
}

impl<'a> NewickParser<'a> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            pos: self.pos,
            msg: msg.into(),
        })
    }

    fn skip_ws(&mut self) {
        loop {
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            // bracketed comments
            if self.peek() == Some(b'[') {
                while self.pos < self.src.len() && self.src[self.pos] != b']' {
                    self.pos += 1;
                }
                self.pos += 1;
                continue;
            }
            break;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn subtree(&mut self) -> Result<PNode> {
        self.skip_ws();
        let node = if self.peek() == Some(b'(') {
            self.pos += 1;
            let mut children = vec![self.subtree()?];
            loop {
                self.skip_ws();
                match self.peek() {
                    Some(b',') => {
                        self.pos += 1;
                        children.push(self.subtree()?);
                    }
                    Some(b')') => {
                        self.pos += 1;
                        break;
                    }
                    Some(c) => return self.err(format!("unexpected '{}'", c as char)),
                    None => return self.err("unbalanced parenthesis"),
                }
            }
            if self.label()?.is_some() {
                self.saw_internal_label = true;
            }
            PNode::Group(children)
        } else {
            PNode::Leaf(self.label()?)
        };
        self.branch_length()?;
        Ok(node)
    }

    fn label(&mut self) -> Result<Option<String>> {
        self.skip_ws();
        if self.peek() == Some(b'\'') {
            self.pos += 1;
            let start = self.pos;
            while self.pos < self.src.len() && self.src[self.pos] != b'\'' {
                self.pos += 1;
            }
            if self.pos >= self.src.len() {
                return self.err("unterminated quoted label");
            }
            let s = String::from_utf8_lossy(&self.src[start..self.pos]).into_owned();
            self.pos += 1;
            return Ok(Some(s));
        }
        let start = self.pos;
        while let Some(c) = self.peek() {
            if b"(),:;[]'".contains(&c) || c.is_ascii_whitespace() {
                break;
            }
            self.pos += 1;
        }
        if self.pos == start {
            Ok(None)
        } else {
            Ok(Some(
                String::from_utf8_lossy(&self.src[start..self.pos]).into_owned(),
            ))
        }
    }

    fn branch_length(&mut self) -> Result<()> {
        self.skip_ws();
        if self.peek() != Some(b':') {
            return Ok(());
        }
        self.pos += 1;
        self.skip_ws();
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_ascii_digit() || b"+-.eE".contains(&c) {
                self.pos += 1;
            } else {
                break;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("");
        if text.parse::<f64>().is_err() {
            return self.err(format!("malformed branch length {text:?}"));
        }
        self.saw_length = true;
        Ok(())
    }
}

/// Parse a Newick string into an unrooted binary tree.
///
/// A degree-2 outermost group is suppressed into a single edge; a
/// trifurcating outermost group becomes an internal node. Branch lengths
/// are accepted and ignored.
pub fn parse_newick(text: &str) -> Result<Tree> {
    let mut p = NewickParser {
        src: text.as_bytes(),
        pos: 0,
        saw_length: false,
        saw_internal_label: false,
    };
    let root = p.subtree()?;
    p.skip_ws();
    if p.peek() != Some(b';') {
        return p.err("expected terminating ';'");
    }
    p.pos += 1;
    p.skip_ws();
    if p.pos != p.src.len() {
        return p.err("trailing input after ';'");
    }
    if p.saw_length {
        log::warn!("newick branch lengths are ignored");
    }
    if p.saw_internal_label {
        log::warn!("newick internal node labels are ignored");
    }

    let children = match root {
        PNode::Leaf(_) => return Err(Error::Topology("fewer than 2 leaves".into())),
        PNode::Group(c) => c,
    };
    let mut b = NewickBuilder::default();
    match children.len() {
        2 => {
            let mut it = children.into_iter();
            let (l, r) = (it.next().unwrap(), it.next().unwrap());
            let a = b.node(&l);
            let c = b.node(&r);
            b.edges.push((a, c));
            b.expand(a, l)?;
            b.expand(c, r)?;
        }
        3 => {
            let r = b.alloc();
            for child in children {
                b.attach(r, child)?;
            }
        }
        1 => return Err(Error::Topology("outermost group has a single child".into())),
        k => {
            return Err(Error::Topology(format!(
                "outermost group has {k} children (multifurcation)"
            )))
        }
    }
    b.finish()
}

#[derive(Default)]
struct NewickBuilder {
    n: usize,
    edges: Vec<(NodeId, NodeId)>,
    // (text order, node, label)
    leaves: Vec<(usize, NodeId, Option<String>)>,
    leaf_counter: usize,
}

impl NewickBuilder {
    fn alloc(&mut self) -> NodeId {
        self.n += 1;
        self.n - 1
    }

    // Allocate a node for `p` (registering it as a leaf if needed).
    fn node(&mut self, p: &PNode) -> NodeId {
        let id = self.alloc();
        if let PNode::Leaf(name) = p {
            self.leaves.push((self.leaf_counter, id, name.clone()));
            self.leaf_counter += 1;
        }
        id
    }

    fn attach(&mut self, parent: NodeId, child: PNode) -> Result<()> {
        let id = self.node(&child);
        self.edges.push((parent, id));
        self.expand(id, child)
    }

    fn expand(&mut self, id: NodeId, p: PNode) -> Result<()> {
        match p {
            PNode::Leaf(_) => Ok(()),
            PNode::Group(children) => {
                if children.len() != 2 {
                    return Err(Error::Topology(format!(
                        "internal node with {} children (need exactly 2)",
                        children.len()
                    )));
                }
                for c in children {
                    self.attach(id, c)?;
                }
                Ok(())
            }
        }
    }

    fn finish(mut self) -> Result<Tree> {
        self.leaves.sort_by_key(|&(ord, _, _)| ord);
        let nodes = self.leaves.iter().map(|&(_, n, _)| n).collect();
        let names = self.leaves.into_iter().map(|(_, _, s)| s).collect();
        Tree::from_edges(self.n, self.edges, nodes, names)
    }
}

fn quote_label(s: &str) -> String {
    if s.bytes().any(|c| b"(),:;[]' ".contains(&c)) {
        format!("'{s}'")
    } else {
        s.to_string()
    }
}
