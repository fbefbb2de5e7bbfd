//! Rooted trees with a degree-one root, edge variances and sparsity structures.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeId = usize;

/// Default bound on the number of leaves for exhaustive enumeration.
pub const ENUMERATION_CAP: usize = 10;

/// Rooted tree on nodes `0..n` with root `0`.
///
/// `leaves[k]` is the node carrying data coordinate `k`. Validation runs on
/// construction and the value is immutable afterwards.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RootedTree {
    parent: Vec<Option<NodeId>>,
    children: Vec<Vec<NodeId>>,
    leaves: Vec<NodeId>,
    slot: Vec<Option<usize>>,
    preorder: Vec<NodeId>,
    span: Vec<(usize, usize)>,
    dfs_leaves: Vec<usize>,
    rank: Vec<usize>,
}

/// Checks the structural rules for a parent array and leaf list.
pub fn validate(parent: &[Option<NodeId>], leaves: &[NodeId]) -> Result<()> {
    let n = parent.len();
    if n < 2 {
        return Err(Error::InvalidTree("a tree needs a root and at least one leaf".into()));
    }
    if parent[0].is_some() {
        return Err(Error::InvalidTree("node 0 is the root and cannot have a parent".into()));
    }
    for (i, p) in parent.iter().enumerate().skip(1) {
        match *p {
            None => return Err(Error::Disconnected { node: i }),
            Some(p) if p >= n => {
                return Err(Error::InvalidTree(format!("node {i} has unknown parent {p}")))
            }
            Some(p) if p == i => return Err(Error::CycleDetected { node: i }),
            _ => {}
        }
    }
    // 0 = unvisited, 1 = on current walk, 2 = reaches the root
    let mut state = vec![0u8; n];
    state[0] = 2;
    let mut walk = Vec::new();
    for start in 1..n {
        let mut v = start;
        while state[v] == 0 {
            state[v] = 1;
            walk.push(v);
            v = parent[v].expect("non-root has a parent");
        }
        if state[v] == 1 {
            return Err(Error::CycleDetected { node: v });
        }
        for w in walk.drain(..) {
            state[w] = 2;
        }
    }

    let mut nchild = vec![0usize; n];
    for p in parent.iter().flatten() {
        nchild[*p] += 1;
    }
    if leaves.is_empty() {
        return Err(Error::InvalidTree("no leaves given".into()));
    }
    let mut is_leaf = vec![false; n];
    for &l in leaves {
        if l == 0 || l >= n {
            return Err(Error::InvalidTree(format!("leaf id {l} is not a non-root node")));
        }
        if is_leaf[l] {
            return Err(Error::InvalidTree(format!("leaf {l} listed twice")));
        }
        is_leaf[l] = true;
    }
    if nchild[0] != 1 {
        return Err(Error::DegreeViolation {
            node: 0,
            degree: nchild[0],
            reason: "root must have degree 1",
        });
    }
    for i in 1..n {
        let degree = nchild[i] + 1;
        if is_leaf[i] {
            if nchild[i] != 0 {
                return Err(Error::DegreeViolation {
                    node: i,
                    degree,
                    reason: "leaf must have degree 1",
                });
            }
        } else if nchild[i] == 0 {
            return Err(Error::DegreeViolation {
                node: i,
                degree,
                reason: "childless node is not listed as a leaf",
            });
        } else if nchild[i] == 1 {
            return Err(Error::DegreeViolation {
                node: i,
                degree,
                reason: "internal node must have degree at least 3",
            });
        }
    }
    Ok(())
}

impl RootedTree {
    pub fn from_parents(parent: Vec<Option<NodeId>>, leaves: Vec<NodeId>) -> Result<Self> {
        validate(&parent, &leaves)?;
        let n = parent.len();
        let mut children = vec![Vec::new(); n];
        for (i, p) in parent.iter().enumerate() {
            if let Some(p) = p {
                children[*p].push(i);
            }
        }
        let mut slot = vec![None; n];
        for (k, &l) in leaves.iter().enumerate() {
            slot[l] = Some(k);
        }

        let mut preorder = Vec::with_capacity(n);
        let mut stack = vec![0];
        while let Some(v) = stack.pop() {
            preorder.push(v);
            for &c in children[v].iter().rev() {
                stack.push(c);
            }
        }

        // leaf spans: contiguous ranges of the DFS leaf order
        let mut span = vec![(0, 0); n];
        let mut dfs_leaves = Vec::with_capacity(leaves.len());
        for &v in &preorder {
            if let Some(k) = slot[v] {
                span[v] = (dfs_leaves.len(), dfs_leaves.len() + 1);
                dfs_leaves.push(k);
            }
        }
        for &v in preorder.iter().rev() {
            if !children[v].is_empty() {
                let lo = children[v].iter().map(|&c| span[c].0).min().unwrap();
                let hi = children[v].iter().map(|&c| span[c].1).max().unwrap();
                span[v] = (lo, hi);
            }
        }
        let mut rank = vec![0; leaves.len()];
        for (r, &k) in dfs_leaves.iter().enumerate() {
            rank[k] = r;
        }
        Ok(RootedTree {
            parent,
            children,
            leaves,
            slot,
            preorder,
            span,
            dfs_leaves,
            rank,
        })
    }

    /// Root, hub and `d` leaves below the hub. For `d = 1` the leaf hangs
    /// directly below the root.
    pub fn star(d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::TooSmall { what: "leaf count", min: 1, got: 0 });
        }
        if d == 1 {
            return Self::from_parents(vec![None, Some(0)], vec![1]);
        }
        let hub = d + 1;
        let mut parent = vec![None; d + 2];
        parent[hub] = Some(0);
        for p in parent.iter_mut().take(d + 1).skip(1) {
            *p = Some(hub);
        }
        Self::from_parents(parent, (1..=d).collect())
    }

    /// Balanced binary tree over `d` leaves, leaves numbered `1..=d` left to right.
    pub fn balanced_binary(d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::TooSmall { what: "leaf count", min: 1, got: 0 });
        }
        let mut parent: Vec<Option<NodeId>> = vec![None; d + 1];
        let mut next = d + 1;
        fn build(
            lo: usize,
            hi: usize,
            up: NodeId,
            parent: &mut Vec<Option<NodeId>>,
            next: &mut usize,
        ) {
            if hi - lo == 1 {
                parent[lo] = Some(up);
                return;
            }
            let id = *next;
            *next += 1;
            parent.push(Some(up));
            let mid = lo + (hi - lo) / 2;
            build(lo, mid, id, parent, next);
            build(mid, hi, id, parent, next);
        }
        build(1, d + 1, 0, &mut parent, &mut next);
        Self::from_parents(parent, (1..=d).collect())
    }

    /// Re-checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        validate(&self.parent, &self.leaves)
    }

    pub fn num_nodes(&self) -> usize {
        self.parent.len()
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn parent(&self, v: NodeId) -> Option<NodeId> {
        self.parent[v]
    }

    pub fn parents(&self) -> &[Option<NodeId>] {
        &self.parent
    }

    pub fn children(&self, v: NodeId) -> &[NodeId] {
        &self.children[v]
    }

    /// Node ids of the leaves, in data order.
    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    pub fn leaf_node(&self, slot: usize) -> NodeId {
        self.leaves[slot]
    }

    pub fn leaf_slot(&self, v: NodeId) -> Option<usize> {
        self.slot[v]
    }

    pub fn is_leaf(&self, v: NodeId) -> bool {
        self.slot[v].is_some()
    }

    /// Root, or a leaf.
    pub fn is_determined(&self, v: NodeId) -> bool {
        v == 0 || self.is_leaf(v)
    }

    pub fn root_child(&self) -> NodeId {
        self.children[0][0]
    }

    pub fn preorder(&self) -> &[NodeId] {
        &self.preorder
    }

    /// Data slots of the leaves below `v`, in DFS order.
    pub fn subtree_slots(&self, v: NodeId) -> &[usize] {
        let (lo, hi) = self.span[v];
        &self.dfs_leaves[lo..hi]
    }

    /// True if the leaf with data slot `slot` lies below `v` (or is `v`).
    pub fn contains_slot(&self, v: NodeId, slot: usize) -> bool {
        let (lo, hi) = self.span[v];
        let r = self.rank[slot];
        lo <= r && r < hi
    }

    /// Leaf node ids below `node`, sorted.
    pub fn descendant_leaves(&self, node: NodeId) -> Result<BTreeSet<NodeId>> {
        if node >= self.num_nodes() {
            return Err(Error::UnknownNode(node));
        }
        Ok(self.subtree_slots(node).iter().map(|&k| self.leaves[k]).collect())
    }

    /// Internal nodes with more than two children exist.
    pub fn is_binary(&self) -> bool {
        self.children.iter().skip(1).all(|c| c.is_empty() || c.len() == 2)
    }

    /// Position in the contraction naming order: root, leaves by id, latent nodes by id.
    fn name_key(&self, v: NodeId) -> (u8, NodeId) {
        if v == 0 {
            (0, 0)
        } else if self.is_leaf(v) {
            (1, v)
        } else {
            (2, v)
        }
    }
}

/// Nonnegative variance per node; entry `i` belongs to the edge above `i` and
/// the root entry is always zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeParams {
    pub theta: Vec<f64>,
}

impl EdgeParams {
    pub fn new(tree: &RootedTree, theta: Vec<f64>) -> Result<Self> {
        let n = tree.num_nodes();
        let theta = if theta.len() == n - 1 {
            std::iter::once(0.0).chain(theta).collect()
        } else {
            theta
        };
        if theta.len() != n {
            return Err(Error::InvalidParams(format!(
                "expected {} or {} edge variances, got {}",
                n - 1,
                n,
                theta.len()
            )));
        }
        if theta[0] != 0.0 {
            return Err(Error::InvalidParams("root entry must be 0".into()));
        }
        for (i, t) in theta.iter().enumerate() {
            if !t.is_finite() || *t < 0.0 {
                return Err(Error::InvalidParams(format!("theta[{i}] = {t} is not a finite nonnegative value")));
            }
        }
        Ok(EdgeParams { theta })
    }

    pub fn zeros(tree: &RootedTree) -> Self {
        EdgeParams { theta: vec![0.0; tree.num_nodes()] }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        EdgeParams { theta: self.theta.iter().map(|t| t * factor).collect() }
    }

    pub fn get(&self, v: NodeId) -> f64 {
        self.theta[v]
    }
}

/// Covariance of the leaves: entry `(j, k)` is the sum of variances from the
/// root down to the last common ancestor of leaves `j` and `k`.
pub fn build_covariance(tree: &RootedTree, theta: &EdgeParams) -> DMatrix<f64> {
    let d = tree.num_leaves();
    let mut cum = vec![0.0; tree.num_nodes()];
    for &v in tree.preorder().iter().skip(1) {
        cum[v] = cum[tree.parent(v).unwrap()] + theta.theta[v];
    }
    let mut sigma = DMatrix::zeros(d, d);
    for &v in tree.preorder() {
        if let Some(k) = tree.leaf_slot(v) {
            sigma[(k, k)] = cum[v];
            continue;
        }
        let ch = tree.children(v);
        for (a, &ca) in ch.iter().enumerate() {
            for &cb in &ch[a + 1..] {
                for &j in tree.subtree_slots(ca) {
                    for &k in tree.subtree_slots(cb) {
                        sigma[(j, k)] = cum[v];
                        sigma[(k, j)] = cum[v];
                    }
                }
            }
        }
    }
    sigma
}

/// Set of nodes whose parent edge carries zero variance.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SparsityStructure {
    pub zeroed: BTreeSet<NodeId>,
}

impl SparsityStructure {
    pub fn new(tree: &RootedTree, zeroed: impl IntoIterator<Item = NodeId>) -> Result<Self> {
        let zeroed: BTreeSet<NodeId> = zeroed.into_iter().collect();
        for &v in &zeroed {
            if v == 0 || v >= tree.num_nodes() {
                return Err(Error::InvalidSparsity(v));
            }
        }
        Ok(SparsityStructure { zeroed })
    }

    pub fn empty() -> Self {
        SparsityStructure { zeroed: BTreeSet::new() }
    }

    pub fn contains(&self, v: NodeId) -> bool {
        self.zeroed.contains(&v)
    }
}

/// Surviving edge of a contraction, between two named vertices, remembering
/// the original edge by its child node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct ContractedEdge {
    pub upper: NodeId,
    pub lower: NodeId,
    pub original: NodeId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ContractedTree {
    pub nodes: Vec<NodeId>,
    pub edges: Vec<ContractedEdge>,
    /// Name of the merged vertex holding each original node.
    pub rep: Vec<NodeId>,
}

impl ContractedTree {
    /// True when the vertex set is exactly the root plus the leaves.
    pub fn is_over_determined(&self, tree: &RootedTree) -> bool {
        self.nodes.len() == tree.num_leaves() + 1 && self.nodes.iter().all(|&v| tree.is_determined(v))
    }

    /// Each surviving edge as the set of leaf nodes it separates from the root.
    pub fn cuts(&self, tree: &RootedTree) -> BTreeSet<BTreeSet<NodeId>> {
        self.edges
            .iter()
            .map(|e| tree.descendant_leaves(e.original).expect("edge of this tree"))
            .collect()
    }
}

struct UnionFind {
    up: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { up: (0..n).collect() }
    }
    fn find(&mut self, mut v: usize) -> usize {
        while self.up[v] != v {
            self.up[v] = self.up[self.up[v]];
            v = self.up[v];
        }
        v
    }
}

/// Contracts the zeroed edges one after another in `order`; each merged
/// vertex keeps the name that comes first in the order root, leaves, latent.
pub fn contract_in_order(tree: &RootedTree, order: &[NodeId]) -> Result<ContractedTree> {
    let n = tree.num_nodes();
    let mut uf = UnionFind::new(n);
    let mut zero = vec![false; n];
    for &v in order {
        if v == 0 || v >= n {
            return Err(Error::InvalidSparsity(v));
        }
        zero[v] = true;
        let a = uf.find(v);
        let b = uf.find(tree.parent(v).unwrap());
        if a == b {
            continue;
        }
        if tree.name_key(a) < tree.name_key(b) {
            uf.up[b] = a;
        } else {
            uf.up[a] = b;
        }
    }
    let rep: Vec<NodeId> = (0..n).map(|v| uf.find(v)).collect();
    let mut nodes: Vec<NodeId> = rep.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    nodes.sort_by_key(|&v| tree.name_key(v));
    let mut edges = Vec::new();
    for v in 1..n {
        if !zero[v] {
            edges.push(ContractedEdge {
                upper: rep[tree.parent(v).unwrap()],
                lower: rep[v],
                original: v,
            });
        }
    }
    Ok(ContractedTree { nodes, edges, rep })
}

pub fn contract_set(tree: &RootedTree, sparsity: &SparsityStructure) -> Result<ContractedTree> {
    let order: Vec<NodeId> = sparsity.zeroed.iter().copied().collect();
    contract_in_order(tree, &order)
}

/// Contraction that must land exactly on the determined nodes.
pub fn contract_fully_observed(tree: &RootedTree, sparsity: &SparsityStructure) -> Result<ContractedTree> {
    let c = contract_set(tree, sparsity)?;
    if !c.is_over_determined(tree) {
        return Err(Error::NotFullyObserved);
    }
    Ok(c)
}

/// Every zero-variance component holds exactly one determined node.
pub fn is_fully_observed(tree: &RootedTree, sparsity: &SparsityStructure) -> bool {
    match contract_set(tree, sparsity) {
        Ok(c) => c.is_over_determined(tree),
        Err(_) => false,
    }
}

/// All fully-observed sparsity structures, by assigning each latent node the
/// value of a determined node.
pub fn enumerate_fully_observed(tree: &RootedTree, cap: usize) -> Result<Vec<SparsityStructure>> {
    let d = tree.num_leaves();
    if d > cap {
        return Err(Error::TooLarge { what: "leaf count for enumeration", size: d, limit: cap });
    }
    // values: 0 = root, k + 1 = leaf slot k
    fn assign(tree: &RootedTree, v: NodeId, pv: usize) -> Vec<Vec<NodeId>> {
        if let Some(k) = tree.leaf_slot(v) {
            return if pv == k + 1 { vec![vec![v]] } else { vec![vec![]] };
        }
        let inside = pv > 0 && tree.contains_slot(v, pv - 1);
        let mut options = vec![pv];
        if !inside {
            options.extend(tree.subtree_slots(v).iter().map(|&k| k + 1));
        }
        let mut out = Vec::new();
        for val in options {
            let mut partial: Vec<Vec<NodeId>> = vec![if val == pv { vec![v] } else { vec![] }];
            for &c in tree.children(v) {
                let sub = assign(tree, c, val);
                let mut next = Vec::with_capacity(partial.len() * sub.len());
                for p in &partial {
                    for s in &sub {
                        let mut z = p.clone();
                        z.extend_from_slice(s);
                        next.push(z);
                    }
                }
                partial = next;
            }
            out.extend(partial);
        }
        out
    }
    let mut set: BTreeSet<SparsityStructure> = BTreeSet::new();
    for z in assign(tree, tree.root_child(), 0) {
        set.insert(SparsityStructure { zeroed: z.into_iter().collect() });
    }
    Ok(set.into_iter().collect())
}

/// Reference enumeration: filter every subset of edges. Only for small trees.
pub fn enumerate_fully_observed_by_filter(tree: &RootedTree) -> Result<Vec<SparsityStructure>> {
    let m = tree.num_nodes() - 1;
    if m > 20 {
        return Err(Error::TooLarge { what: "edge count for subset filter", size: m, limit: 20 });
    }
    let mut out = Vec::new();
    for mask in 0u32..(1u32 << m) {
        let s = SparsityStructure {
            zeroed: (0..m).filter(|b| mask >> b & 1 == 1).map(|b| b + 1).collect(),
        };
        if is_fully_observed(tree, &s) {
            out.push(s);
        }
    }
    out.sort();
    Ok(out)
}

/// Tree rerooted at a leaf, with the map back to the original edges.
#[derive(Debug, Clone)]
pub struct Rerooted {
    pub tree: RootedTree,
    /// Original node id of every new node; the new root maps to the chosen leaf.
    pub node_map: Vec<NodeId>,
    /// For every new node, the original edges (by child node) merged into the
    /// edge above it.
    pub merged: Vec<Vec<NodeId>>,
}

impl Rerooted {
    /// Edge variances on the rerooted tree: sums over merged original edges.
    pub fn map_theta(&self, theta: &EdgeParams) -> EdgeParams {
        EdgeParams {
            theta: self.merged.iter().map(|m| m.iter().map(|&e| theta.theta[e]).sum()).collect(),
        }
    }
}

/// Removes the root, roots the tree at the leaf with data slot `slot`, and
/// suppresses nodes left with degree 2. Remaining leaves keep data order and
/// are numbered `1..d`; latent nodes follow in preorder.
pub fn reroot_at_leaf(tree: &RootedTree, slot: usize) -> Result<Rerooted> {
    let d = tree.num_leaves();
    if slot >= d {
        return Err(Error::UnknownLeaf(slot));
    }
    if d < 2 {
        return Err(Error::TooSmall { what: "leaf count for rerooting", min: 2, got: d });
    }
    let n = tree.num_nodes();
    // undirected adjacency without the root; edges named by original child
    let mut adj: Vec<Vec<(NodeId, NodeId)>> = vec![Vec::new(); n];
    for v in 1..n {
        let p = tree.parent(v).unwrap();
        if p != 0 {
            adj[v].push((p, v));
            adj[p].push((v, v));
        }
    }
    let start = tree.leaf_node(slot);

    // (new parent, original node, merged edges)
    let mut found: Vec<(usize, NodeId, Vec<NodeId>)> = Vec::new();
    let mut stack: Vec<(usize, NodeId, NodeId, NodeId)> = Vec::new();
    for &(w, e) in adj[start].iter().rev() {
        stack.push((0, start, w, e));
    }
    let mut order_new: Vec<NodeId> = vec![start];
    while let Some((new_parent, mut from, mut v, e)) = stack.pop() {
        let mut merged = vec![e];
        loop {
            let onward: Vec<(NodeId, NodeId)> = adj[v].iter().copied().filter(|&(w, _)| w != from).collect();
            if onward.len() == 1 && !tree.is_leaf(v) {
                merged.push(onward[0].1);
                from = v;
                v = onward[0].0;
            } else {
                break;
            }
        }
        merged.sort_unstable();
        let idx = order_new.len();
        order_new.push(v);
        found.push((new_parent, v, merged));
        for &(w, e2) in adj[v].iter().rev() {
            if w != from {
                stack.push((idx, v, w, e2));
            }
        }
    }

    // renumber: root 0, remaining leaves by data order, latent by discovery order
    let mut new_id = vec![usize::MAX; order_new.len()];
    new_id[0] = 0;
    let mut leaf_nodes = Vec::new();
    for k in 0..d {
        if k != slot {
            leaf_nodes.push(tree.leaf_node(k));
        }
    }
    let mut next = leaf_nodes.len() + 1;
    for (i, &v) in order_new.iter().enumerate().skip(1) {
        if let Some(k) = tree.leaf_slot(v) {
            new_id[i] = if k < slot { k + 1 } else { k };
        } else {
            new_id[i] = next;
            next += 1;
        }
    }
    let m = order_new.len();
    let mut parent = vec![None; m];
    let mut node_map = vec![0; m];
    let mut merged = vec![Vec::new(); m];
    node_map[0] = start;
    for (i, (np, v, mg)) in found.into_iter().enumerate() {
        let id = new_id[i + 1];
        parent[id] = Some(new_id[np]);
        node_map[id] = v;
        merged[id] = mg;
    }
    let leaves: Vec<NodeId> = (1..=leaf_nodes.len()).collect();
    let t = RootedTree::from_parents(parent, leaves)?;
    Ok(Rerooted { tree: t, node_map, merged })
}
