//! Label trees and hierarchical softmax.
//!
//! A label tree arranges all classes under a virtual root. Raw per-node
//! scores are normalized per sibling group (a softmax over each parent's
//! children); the class-conditional probability of a node is the product
//! of the conditionals along its root path. The cross-entropy loss sums
//! `-t * log p` over every node, so coarse (ancestor-only) targets are a
//! prefix of fine ones.
//!
//! All probability work happens in log space with log-sum-exp
//! stabilization; score vectors are indexed by node position in the
//! tree's stable node order.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("schema violations: {}", fmt_violations(.0))]
    Schema(Vec<Violation>),
}

fn fmt_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

/// One schema violation: the offending node id (when known) and a reason.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub node_id: Option<u32>,
    pub reason: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.node_id {
            Some(id) => write!(f, "node {id}: {}", self.reason),
            None => write!(f, "{}", self.reason),
        }
    }
}

/// A row of the tree schema file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeRow {
    pub id: u32,
    /// `None` marks a child of the virtual root.
    pub parent: Option<u32>,
    pub name: String,
}

/// Immutable label tree with precomputed traversal structure.
#[derive(Debug, Clone)]
pub struct LabelTree {
    ids: Vec<u32>,
    names: Vec<String>,
    parent: Vec<Option<usize>>,
    level: Vec<u32>,
    children: Vec<Vec<usize>>,
    /// Sibling groups: the root group first, then per-parent groups.
    groups: Vec<Vec<usize>>,
    frontier: Vec<usize>,
    /// Parents precede children.
    topo: Vec<usize>,
    index_of: HashMap<u32, usize>,
    depth: u32,
}

impl LabelTree {
    /// Number of (non-root) nodes; the length of every score vector.
    pub fn n_nodes(&self) -> usize {
        self.ids.len()
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn node_id(&self, idx: usize) -> u32 {
        self.ids[idx]
    }

    pub fn node_name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn node_level(&self, idx: usize) -> u32 {
        self.level[idx]
    }

    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.index_of.get(&id).copied()
    }

    pub fn find_by_name(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn parent_of(&self, idx: usize) -> Option<usize> {
        self.parent[idx]
    }

    pub fn children_of(&self, idx: usize) -> &[usize] {
        &self.children[idx]
    }

    /// Indices of frontier (childless) nodes, in node order.
    pub fn frontier(&self) -> &[usize] {
        &self.frontier
    }

    /// Frontier node ids.
    pub fn frontier_ids(&self) -> Vec<u32> {
        self.frontier.iter().map(|&i| self.ids[i]).collect()
    }

    pub fn sibling_groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    /// Node indices from a root child down to `idx`, inclusive.
    pub fn path_to_root(&self, idx: usize) -> Vec<usize> {
        let mut path = vec![idx];
        let mut cur = idx;
        while let Some(p) = self.parent[cur] {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    pub fn build(rows: Vec<TreeRow>) -> Result<Self, TreeError> {
        let violations = validate_tree(&rows);
        if !violations.is_empty() {
            return Err(TreeError::Schema(violations));
        }
        let n = rows.len();
        let mut index_of = HashMap::with_capacity(n);
        for (i, r) in rows.iter().enumerate() {
            index_of.insert(r.id, i);
        }
        let parent: Vec<Option<usize>> = rows
            .iter()
            .map(|r| r.parent.map(|p| index_of[&p]))
            .collect();
        let mut children = vec![Vec::new(); n];
        let mut root_group = Vec::new();
        for (i, p) in parent.iter().enumerate() {
            match p {
                Some(pi) => children[*pi].push(i),
                None => root_group.push(i),
            }
        }
        // BFS from the root for levels and the topological order.
        let mut level = vec![0u32; n];
        let mut topo = Vec::with_capacity(n);
        let mut queue: std::collections::VecDeque<usize> = root_group.iter().copied().collect();
        for &i in &root_group {
            level[i] = 1;
        }
        while let Some(i) = queue.pop_front() {
            topo.push(i);
            for &c in &children[i] {
                level[c] = level[i] + 1;
                queue.push_back(c);
            }
        }
        let mut groups = vec![root_group];
        for ch in children.iter() {
            if !ch.is_empty() {
                groups.push(ch.clone());
            }
        }
        let frontier: Vec<usize> = (0..n).filter(|&i| children[i].is_empty()).collect();
        let depth = level.iter().copied().max().unwrap_or(0);
        Ok(LabelTree {
            ids: rows.iter().map(|r| r.id).collect(),
            names: rows.into_iter().map(|r| r.name).collect(),
            parent,
            level,
            children,
            groups,
            frontier,
            topo,
            index_of,
            depth,
        })
    }

    /// Convenience constructor from `(id, parent, name)` tuples.
    pub fn from_spec(spec: &[(u32, Option<u32>, &str)]) -> Result<Self, TreeError> {
        LabelTree::build(
            spec.iter()
                .map(|&(id, parent, name)| TreeRow {
                    id,
                    parent,
                    name: name.to_string(),
                })
                .collect(),
        )
    }

    /// Canonical serialization (rows sorted by id) used for hashing.
    pub fn canonical_text(&self) -> String {
        let mut rows: Vec<(u32, Option<u32>, &str)> = (0..self.n_nodes())
            .map(|i| {
                (
                    self.ids[i],
                    self.parent[i].map(|p| self.ids[p]),
                    self.names[i].as_str(),
                )
            })
            .collect();
        rows.sort_unstable_by_key(|r| r.0);
        let mut out = String::new();
        for (id, parent, name) in rows {
            match parent {
                Some(p) => out.push_str(&format!("{id}\t{p}\t{name}\n")),
                None => out.push_str(&format!("{id}\t-\t{name}\n")),
            }
        }
        out
    }
}

/// Structural checks on raw schema rows.
///
/// Empty result means well-formed: unique ids, parents exist, no node is
/// its own ancestor, and at least one node hangs off the virtual root.
pub fn validate_tree(rows: &[TreeRow]) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut index_of: HashMap<u32, usize> = HashMap::new();
    for (i, r) in rows.iter().enumerate() {
        if let Some(prev) = index_of.insert(r.id, i) {
            violations.push(Violation {
                node_id: Some(r.id),
                reason: format!("duplicate id (rows {} and {})", prev + 1, i + 1),
            });
        }
        if r.parent == Some(r.id) {
            violations.push(Violation {
                node_id: Some(r.id),
                reason: "node is its own parent".into(),
            });
        }
    }
    if rows.is_empty() {
        violations.push(Violation {
            node_id: None,
            reason: "tree has no nodes".into(),
        });
        return violations;
    }
    for r in rows {
        if let Some(p) = r.parent {
            if !index_of.contains_key(&p) {
                violations.push(Violation {
                    node_id: Some(r.id),
                    reason: format!("parent {p} does not exist"),
                });
            }
        }
    }
    if !violations.is_empty() {
        return violations;
    }
    let roots: Vec<usize> = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.parent.is_none())
        .map(|(i, _)| i)
        .collect();
    if roots.is_empty() {
        violations.push(Violation {
            node_id: None,
            reason: "no root child: every node has a parent".into(),
        });
        return violations;
    }
    // Reachability from the virtual root; unreached nodes sit on a cycle.
    let mut children = vec![Vec::new(); rows.len()];
    for (i, r) in rows.iter().enumerate() {
        if let Some(p) = r.parent {
            children[index_of[&p]].push(i);
        }
    }
    let mut reached = vec![false; rows.len()];
    let mut stack = roots;
    while let Some(i) = stack.pop() {
        if reached[i] {
            continue;
        }
        reached[i] = true;
        stack.extend(children[i].iter().copied());
    }
    for (i, r) in rows.iter().enumerate() {
        if !reached[i] {
            violations.push(Violation {
                node_id: Some(r.id),
                reason: "unreachable from root (parent cycle)".into(),
            });
        }
    }
    violations
}

/// Parse the tree schema: one `id <TAB> parent <TAB> name` row per line,
/// `-` as the parent of root children; `#` starts a comment.
pub fn parse_tree(text: &str) -> Result<Vec<TreeRow>, TreeError> {
    let mut rows = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, ['\t', ' ']).map(str::trim);
        let id = parts
            .next()
            .and_then(|s| s.parse::<u32>().ok())
            .ok_or_else(|| TreeError::Parse {
                line: lineno + 1,
                msg: format!("bad id in {line:?}"),
            })?;
        let parent_str = parts.next().ok_or_else(|| TreeError::Parse {
            line: lineno + 1,
            msg: "missing parent column".into(),
        })?;
        let parent = if parent_str == "-" {
            None
        } else {
            Some(parent_str.parse::<u32>().map_err(|_| TreeError::Parse {
                line: lineno + 1,
                msg: format!("bad parent {parent_str:?}"),
            })?)
        };
        let name = parts.next().unwrap_or("").trim().to_string();
        let name = if name.is_empty() {
            format!("node-{id}")
        } else {
            name
        };
        rows.push(TreeRow { id, parent, name });
    }
    Ok(rows)
}

/// Load and validate a tree schema file.
pub fn load_tree(path: impl AsRef<Path>) -> Result<LabelTree, TreeError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| TreeError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    LabelTree::build(parse_tree(&text)?)
}

/// Scratch buffers for per-pixel hierarchical evaluation.
#[derive(Debug, Clone)]
pub struct HierWorkspace {
    /// log conditional probability per node
    pub log_cond: Vec<f64>,
    /// conditional probability per node
    pub cond: Vec<f64>,
    /// log class-conditional probability per node
    pub log_p: Vec<f64>,
    /// gradient w.r.t. log class-conditionals, filled by callers before
    /// [`LabelTree::score_grad_from_logp_grad`]
    pub u: Vec<f64>,
    acc: Vec<f64>,
}

impl HierWorkspace {
    pub fn new(tree: &LabelTree) -> Self {
        let n = tree.n_nodes();
        HierWorkspace {
            log_cond: vec![0.0; n],
            cond: vec![0.0; n],
            log_p: vec![0.0; n],
            u: vec![0.0; n],
            acc: vec![0.0; n],
        }
    }
}

impl LabelTree {
    /// Fill the workspace with conditionals and class-conditionals for
    /// one pixel's raw scores.
    pub fn eval_probs(&self, scores: &[f64], ws: &mut HierWorkspace) {
        assert_eq!(scores.len(), self.n_nodes());
        for group in &self.groups {
            let mut m = f64::NEG_INFINITY;
            for &i in group {
                m = m.max(scores[i]);
            }
            let mut sum = 0.0;
            for &i in group {
                sum += (scores[i] - m).exp();
            }
            let lse = m + sum.ln();
            for &i in group {
                let lc = scores[i] - lse;
                ws.log_cond[i] = lc;
                ws.cond[i] = lc.exp();
            }
        }
        for &i in &self.topo {
            ws.log_p[i] = ws.log_cond[i]
                + match self.parent[i] {
                    Some(p) => ws.log_p[p],
                    None => 0.0,
                };
        }
    }

    /// Gradient of a scalar loss w.r.t. raw scores, given the gradient
    /// `ws.u` w.r.t. every node's log class-conditional probability.
    ///
    /// With `U(a)` the sum of `u` over `a`'s subtree,
    /// `dL/dy_k = U(k) - cond(k) * sum of U over k's sibling group`.
    /// Requires `eval_probs` to have filled the workspace.
    pub fn score_grad_from_logp_grad(&self, ws: &mut HierWorkspace, grad: &mut [f64]) {
        ws.acc.copy_from_slice(&ws.u);
        for &i in self.topo.iter().rev() {
            if let Some(p) = self.parent[i] {
                ws.acc[p] += ws.acc[i];
            }
        }
        for group in &self.groups {
            let mut total = 0.0;
            for &i in group {
                total += ws.acc[i];
            }
            for &i in group {
                grad[i] = ws.acc[i] - ws.cond[i] * total;
            }
        }
    }
}

/// Conditional probabilities per sibling group for one pixel.
pub fn sibling_softmax(tree: &LabelTree, scores: &[f64]) -> Vec<f64> {
    let mut ws = HierWorkspace::new(tree);
    tree.eval_probs(scores, &mut ws);
    ws.cond
}

/// Class-conditional probabilities (product of conditionals along the
/// root path) from per-node conditionals.
pub fn class_conditional(tree: &LabelTree, conditionals: &[f64]) -> Vec<f64> {
    assert_eq!(conditionals.len(), tree.n_nodes());
    let mut p = vec![0.0; tree.n_nodes()];
    for &i in &tree.topo {
        p[i] = conditionals[i]
            * match tree.parent[i] {
                Some(par) => p[par],
                None => 1.0,
            };
    }
    p
}

/// Hard target: 1 on the labeled node and each of its ancestors.
pub fn hard_target(tree: &LabelTree, node_idx: usize) -> Vec<f64> {
    let mut t = vec![0.0; tree.n_nodes()];
    for i in tree.path_to_root(node_idx) {
        t[i] = 1.0;
    }
    t
}

/// Alternative hard target marking only the deepest labeled node.
pub fn hard_target_deepest(tree: &LabelTree, node_idx: usize) -> Vec<f64> {
    let mut t = vec![0.0; tree.n_nodes()];
    t[node_idx] = 1.0;
    t
}

/// Hierarchical cross-entropy `-sum t(n) log p(n)` for one pixel.
pub fn hier_ce_loss(tree: &LabelTree, scores: &[f64], target: &[f64]) -> f64 {
    let mut ws = HierWorkspace::new(tree);
    hier_ce_loss_ws(tree, scores, target, &mut ws)
}

pub fn hier_ce_loss_ws(
    tree: &LabelTree,
    scores: &[f64],
    target: &[f64],
    ws: &mut HierWorkspace,
) -> f64 {
    assert_eq!(target.len(), tree.n_nodes());
    tree.eval_probs(scores, ws);
    let mut loss = 0.0;
    for i in 0..tree.n_nodes() {
        if target[i] != 0.0 {
            loss -= target[i] * ws.log_p[i];
        }
    }
    loss
}

/// Analytic gradient of [`hier_ce_loss`] w.r.t. the raw scores.
pub fn hier_ce_grad(tree: &LabelTree, scores: &[f64], target: &[f64]) -> Vec<f64> {
    let mut ws = HierWorkspace::new(tree);
    let mut grad = vec![0.0; tree.n_nodes()];
    hier_ce_grad_ws(tree, scores, target, &mut ws, &mut grad);
    grad
}

pub fn hier_ce_grad_ws(
    tree: &LabelTree,
    scores: &[f64],
    target: &[f64],
    ws: &mut HierWorkspace,
    grad: &mut [f64],
) {
    tree.eval_probs(scores, ws);
    for i in 0..tree.n_nodes() {
        ws.u[i] = -target[i];
    }
    tree.score_grad_from_logp_grad(ws, grad);
}

/// Ready-made trees used across the pipeline.
pub mod trees {
    use super::{LabelTree, TreeRow};

    /// The production 7-level atlas: 132 brain labels plus background,
    /// 133 frontier classes. Ships as `data/atlas_133.tree`.
    pub fn atlas_133() -> LabelTree {
        let text = include_str!("../data/atlas_133.tree");
        LabelTree::build(super::parse_tree(text).expect("bundled atlas parses"))
            .expect("bundled atlas validates")
    }

    /// Small tree for the synthetic phantom task: background, a cranial
    /// cavity shell, and three tissue classes under a brain node.
    pub fn phantom() -> LabelTree {
        LabelTree::build(vec![
            row(0, None, "background"),
            row(1, None, "cranial-cavity"),
            row(2, None, "brain"),
            row(3, Some(2), "tissue-a"),
            row(4, Some(2), "tissue-b"),
            row(5, Some(2), "tissue-c"),
        ])
        .expect("phantom tree validates")
    }

    fn row(id: u32, parent: Option<u32>, name: &str) -> TreeRow {
        TreeRow {
            id,
            parent,
            name: name.to_string(),
        }
    }
}
