//! Newick and JSON encodings of a tree with edge variances.
//!
//! Newick: the outermost node is the root and is labeled `0` (or left
//! unlabeled). If it has a single child, that child hangs below the root and
//! the outermost branch length must be zero. With two or more children an
//! implicit hub is inserted below the root, and the outermost branch length
//! becomes the hub's variance. Leaves carry labels `1..=d`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numfmt::{format_sig, JSON_DIGITS};
use crate::tree::{EdgeParams, NodeId, RootedTree};

#[derive(Debug)]
struct PNode {
    label: Option<String>,
    length: Option<f64>,
    children: Vec<PNode>,
    offset: usize,
}

struct Parser<'a> {
    s: &'a [u8],
    pos: usize,
}

fn perr(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse { offset, message: message.into() }
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.s.get(self.pos).copied()
    }

    fn node(&mut self) -> Result<PNode> {
        let offset = {
            self.skip_ws();
            self.pos
        };
        let mut children = Vec::new();
        if self.peek() == Some(b'(') {
            self.pos += 1;
            loop {
                children.push(self.node()?);
                match self.peek() {
                    Some(b',') => self.pos += 1,
                    Some(b')') => {
                        self.pos += 1;
                        break;
                    }
                    Some(c) => return Err(perr(self.pos, format!("expected ',' or ')', found '{}'", c as char))),
                    None => return Err(perr(self.pos, "unexpected end of input inside a subtree")),
                }
            }
        }
        let label = self.label();
        let mut length = None;
        if self.peek() == Some(b':') {
            self.pos += 1;
            self.skip_ws();
            let start = self.pos;
            while self.pos < self.s.len() && !b"(),:;".contains(&self.s[self.pos]) && !self.s[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            let text = std::str::from_utf8(&self.s[start..self.pos]).map_err(|_| perr(start, "invalid UTF-8"))?;
            let v: f64 = text.parse().map_err(|_| perr(start, format!("invalid branch length '{text}'")))?;
            if !v.is_finite() || v < 0.0 {
                return Err(perr(start, format!("branch length {text} is not finite and nonnegative")));
            }
            length = Some(v);
        }
        if children.is_empty() && label.is_none() {
            return Err(perr(offset, "leaf without a label"));
        }
        Ok(PNode { label, length, children, offset })
    }

    fn label(&mut self) -> Option<String> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.s.len() && !b"(),:;".contains(&self.s[self.pos]) && !self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if self.pos > start {
            Some(String::from_utf8_lossy(&self.s[start..self.pos]).into_owned())
        } else {
            None
        }
    }
}

/// Parses a Newick string into a tree and its edge variances.
pub fn parse_newick(text: &str) -> Result<(RootedTree, EdgeParams)> {
    let mut p = Parser { s: text.as_bytes(), pos: 0 };
    let top = p.node()?;
    match p.peek() {
        Some(b';') => p.pos += 1,
        Some(c) => return Err(perr(p.pos, format!("expected ';', found '{}'", c as char))),
        None => return Err(perr(p.pos, "missing terminating ';'")),
    }
    if p.peek().is_some() {
        return Err(perr(p.pos, "trailing characters after ';'"));
    }
    if let Some(l) = &top.label {
        if l != "0" {
            return Err(perr(top.offset, format!("outermost node must be labeled 0, found '{l}'")));
        }
    }
    if top.children.is_empty() {
        return Err(perr(top.offset, "outermost node must have children"));
    }

    fn count_leaves(n: &PNode) -> usize {
        if n.children.is_empty() {
            1
        } else {
            n.children.iter().map(count_leaves).sum()
        }
    }
    let d = count_leaves(&top);

    struct Builder {
        d: usize,
        parent: Vec<Option<NodeId>>,
        theta: Vec<f64>,
        next: usize,
    }
    impl Builder {
        fn slot(&mut self, id: NodeId) {
            if self.parent.len() <= id {
                self.parent.resize(id + 1, None);
                self.theta.resize(id + 1, 0.0);
            }
        }
        fn add(&mut self, n: &PNode, up: NodeId) -> Result<()> {
            let len = n.length.ok_or_else(|| perr(n.offset, "missing branch length"))?;
            let id = if n.children.is_empty() {
                let l = n.label.as_deref().unwrap_or("");
                let k: usize = l
                    .parse()
                    .map_err(|_| perr(n.offset, format!("leaf label '{l}' is not an integer")))?;
                if k == 0 || k > self.d {
                    return Err(perr(n.offset, format!("leaf label {k} outside 1..={}", self.d)));
                }
                if self.parent.get(k).copied().flatten().is_some() {
                    return Err(perr(n.offset, format!("leaf label {k} used twice")));
                }
                k
            } else {
                let id = self.next;
                self.next += 1;
                id
            };
            self.slot(id);
            self.parent[id] = Some(up);
            self.theta[id] = len;
            for c in &n.children {
                self.add(c, id)?;
            }
            Ok(())
        }
    }
    let mut b = Builder { d, parent: vec![None; d + 1], theta: vec![0.0; d + 1], next: d + 1 };
    if top.children.len() == 1 {
        if top.length.unwrap_or(0.0) != 0.0 {
            return Err(perr(top.offset, "root with a single child must have branch length 0"));
        }
        b.add(&top.children[0], 0)?;
    } else {
        let hub = b.next;
        b.next += 1;
        b.slot(hub);
        b.parent[hub] = Some(0);
        b.theta[hub] = top.length.unwrap_or(0.0);
        for c in &top.children {
            b.add(c, hub)?;
        }
    }
    let tree = RootedTree::from_parents(b.parent, (1..=d).collect())?;
    let theta = EdgeParams::new(&tree, b.theta)?;
    Ok((tree, theta))
}

/// Writes the tree in the Newick convention read by [`parse_newick`].
pub fn to_newick(tree: &RootedTree, theta: &EdgeParams) -> String {
    fn write(tree: &RootedTree, theta: &EdgeParams, v: NodeId, out: &mut String) {
        if let Some(k) = tree.leaf_slot(v) {
            out.push_str(&(k + 1).to_string());
        } else {
            out.push('(');
            for (i, &c) in tree.children(v).iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write(tree, theta, c, out);
            }
            out.push(')');
        }
        out.push(':');
        out.push_str(&format_sig(theta.theta[v], JSON_DIGITS));
    }
    let c = tree.root_child();
    let mut out = String::new();
    if tree.is_leaf(c) {
        out.push('(');
        write(tree, theta, c, &mut out);
        out.push_str(")0:0.0;");
    } else {
        out.push('(');
        for (i, &g) in tree.children(c).iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            write(tree, theta, g, &mut out);
        }
        out.push_str(")0:");
        out.push_str(&format_sig(theta.theta[c], JSON_DIGITS));
        out.push(';');
    }
    out
}

/// Edge variance keyed by the set of leaf slots below the edge. Two trees with
/// equal maps have the same topology and parameters up to node naming.
pub fn cluster_map(tree: &RootedTree, theta: &EdgeParams) -> BTreeMap<Vec<usize>, f64> {
    let mut m = BTreeMap::new();
    for v in 1..tree.num_nodes() {
        let mut c = tree.subtree_slots(v).to_vec();
        c.sort_unstable();
        m.insert(c, theta.theta[v]);
    }
    m
}

/// JSON tree document: `parent[i]` is `null` (or `-1`) for the root,
/// `theta` has one entry per node with the root entry 0, and `leaves` lists
/// the leaf node ids in data order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeDoc {
    pub parent: Vec<Option<i64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leaves: Option<Vec<NodeId>>,
}

impl TreeDoc {
    pub fn from_tree(tree: &RootedTree, theta: Option<&EdgeParams>) -> Self {
        TreeDoc {
            parent: tree.parents().iter().map(|p| p.map(|p| p as i64)).collect(),
            theta: theta.map(|t| t.theta.clone()),
            leaves: Some(tree.leaves().to_vec()),
        }
    }

    /// Builds the tree; variances default to zero when absent.
    pub fn into_tree(self) -> Result<(RootedTree, EdgeParams)> {
        let n = self.parent.len();
        let mut parent = Vec::with_capacity(n);
        for (i, p) in self.parent.iter().enumerate() {
            parent.push(match p {
                None | Some(-1) => None,
                Some(v) if *v >= 0 && (*v as usize) < n => Some(*v as usize),
                Some(v) => return Err(Error::InvalidTree(format!("node {i} has unknown parent {v}"))),
            });
        }
        let leaves = match self.leaves {
            Some(l) => l,
            None => {
                let mut has_child = vec![false; n];
                for p in parent.iter().flatten() {
                    has_child[*p] = true;
                }
                (1..n).filter(|&i| !has_child[i]).collect()
            }
        };
        let tree = RootedTree::from_parents(parent, leaves)?;
        let theta = match self.theta {
            Some(t) => EdgeParams::new(&tree, t)?,
            None => EdgeParams::zeros(&tree),
        };
        Ok((tree, theta))
    }
}

pub fn parse_tree_json(text: &str) -> Result<(RootedTree, EdgeParams)> {
    let doc: TreeDoc = serde_json::from_str(text).map_err(|e| {
        let offset = line_col_to_offset(text, e.line(), e.column());
        perr(offset, e.to_string())
    })?;
    doc.into_tree()
}

fn line_col_to_offset(text: &str, line: usize, col: usize) -> usize {
    let mut off = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return off + col.saturating_sub(1);
        }
        off += l.len();
    }
    off
}

/// Reads either encoding: JSON when the first non-blank byte is `{`.
pub fn parse_tree_any(text: &str) -> Result<(RootedTree, EdgeParams)> {
    if text.trim_start().starts_with('{') {
        parse_tree_json(text)
    } else {
        parse_newick(text.trim())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::build_covariance;

    const FIG: &str = "((1:9.0,2:0.0):4.0,(3:0.0,4:16.0):16.0)0:0.0;";

    #[test]
    fn parses_figure_tree() {
        let (t, th) = parse_newick(FIG).unwrap();
        assert_eq!(t.num_leaves(), 4);
        assert_eq!(t.num_nodes(), 8);
        let hub = t.root_child();
        assert_eq!(hub, 5);
        assert_eq!(th.theta[hub], 0.0);
        assert_eq!(th.theta[1..=4], [9.0, 0.0, 0.0, 16.0]);
        assert_eq!(th.theta[6..], [4.0, 16.0]);
        let s = build_covariance(&t, &th);
        assert_eq!(s[(0, 0)], 13.0);
        assert_eq!(s[(0, 1)], 4.0);
        assert_eq!(s[(2, 3)], 16.0);
        assert_eq!(s[(1, 2)], 0.0);
    }

    #[test]
    fn parses_single_leaf() {
        let (t, th) = parse_newick("(1:1.0)0:0.0;").unwrap();
        assert_eq!(t.num_leaves(), 1);
        assert_eq!(th.theta, vec![0.0, 1.0]);
    }

    #[test]
    fn malformed_inputs() {
        for bad in ["((1:1.0;", "(1:1.0,2:1.0)0:0.0", "(1:1.0,1:2.0)0:0.0;", "(1:1.0,3:1.0)0:0.0;", "(1,2:1.0)0;", "(1:1.0)0:2.0;"] {
            let e = parse_newick(bad).unwrap_err();
            assert_eq!(e.kind(), "ParseError", "{bad}: {e}");
        }
        match parse_newick("((1:1.0;") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 7),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn round_trip() {
        let (t, th) = parse_newick(FIG).unwrap();
        let text = to_newick(&t, &th);
        let (t2, th2) = parse_newick(&text).unwrap();
        assert_eq!(cluster_map(&t, &th), cluster_map(&t2, &th2));
        let (t3, th3) = parse_newick("(1:0.1)0:0.0;").unwrap();
        let (t4, th4) = parse_newick(&to_newick(&t3, &th3)).unwrap();
        assert_eq!(cluster_map(&t3, &th3), cluster_map(&t4, &th4));
    }

    #[test]
    fn json_round_trip() {
        let (t, th) = parse_newick(FIG).unwrap();
        let text = serde_json::to_string(&TreeDoc::from_tree(&t, Some(&th))).unwrap();
        let (t2, th2) = parse_tree_any(&text).unwrap();
        assert_eq!(t, t2);
        assert_eq!(th, th2);
        let (t3, _) = parse_tree_json(r#"{"parent":[-1,3,3,0]}"#).unwrap();
        assert_eq!(t3.leaves(), &[1, 2]);
    }
}
