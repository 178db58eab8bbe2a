use rand::Rng;
use serde::{Deserialize, Serialize};

/// Euler–Mascheroni constant.
const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Average path length of an unsuccessful search in a binary search tree of
/// `n` nodes: `2H(n−1) − 2(n−1)/n` with `H(i) = ln i + γ`, `c(2) = 1`,
/// `c(n ≤ 1) = 0`.
pub fn avg_path_c(n: usize) -> f64 {
    match n {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => {
            let m = (n - 1) as f64;
            2.0 * (m.ln() + EULER_GAMMA) - 2.0 * m / n as f64
        }
    }
}

/// `⌈log2 ψ⌉`.
pub fn height_limit(subsample_size: usize) -> usize {
    if subsample_size <= 1 {
        0
    } else {
        (usize::BITS - (subsample_size - 1).leading_zeros()) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Internal {
        feature: usize,
        split: f64,
        left: usize,
        right: usize,
    },
    External {
        size: usize,
    },
}

/// One isolation tree, nodes stored in an arena with the root at index 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationTree {
    pub nodes: Vec<Node>,
    pub height_limit: usize,
}

impl IsolationTree {
    /// A tree that is a single leaf holding `size` points.
    pub fn leaf(size: usize, height_limit: usize) -> Self {
        IsolationTree {
            nodes: vec![Node::External { size }],
            height_limit,
        }
    }

    /// Grows a tree over `sample` (row indices into `rows`).
    pub(crate) fn grow<R: AsRef<[f64]>>(rows: &[R], sample: Vec<usize>, height_limit: usize, rng: &mut impl Rng) -> Self {
        let mut tree = IsolationTree {
            nodes: Vec::new(),
            height_limit,
        };
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut candidates: Vec<usize> = Vec::with_capacity(dim);
        tree.grow_node(rows, sample, 0, dim, &mut candidates, rng);
        tree
    }

    fn grow_node<R: AsRef<[f64]>>(
        &mut self,
        rows: &[R],
        points: Vec<usize>,
        depth: usize,
        dim: usize,
        candidates: &mut Vec<usize>,
        rng: &mut impl Rng,
    ) -> usize {
        let id = self.nodes.len();
        if depth >= self.height_limit || points.len() <= 1 {
            self.nodes.push(Node::External { size: points.len() });
            return id;
        }

        // uniform over features with non-zero range at this node
        candidates.clear();
        candidates.extend(0..dim);
        let chosen = loop {
            if candidates.is_empty() {
                break None;
            }
            let k = rng.random_range(0..candidates.len());
            let f = candidates[k];
            let (lo, hi) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| {
                let v = rows[p].as_ref()[f];
                (lo.min(v), hi.max(v))
            });
            if hi > lo {
                break Some((f, lo, hi));
            }
            candidates.swap_remove(k);
        };
        let Some((feature, lo, hi)) = chosen else {
            self.nodes.push(Node::External { size: points.len() });
            return id;
        };

        let split = rng.random_range(lo..hi);
        let (left_pts, right_pts): (Vec<usize>, Vec<usize>) =
            points.into_iter().partition(|&p| rows[p].as_ref()[feature] < split);
        self.nodes.push(Node::Internal {
            feature,
            split,
            left: 0,
            right: 0,
        });
        let left = self.grow_node(rows, left_pts, depth + 1, dim, candidates, rng);
        let right = self.grow_node(rows, right_pts, depth + 1, dim, candidates, rng);
        if let Node::Internal { left: l, right: r, .. } = &mut self.nodes[id] {
            *l = left;
            *r = right;
        }
        id
    }

    /// Edges from the root to the leaf reached by `x`, plus `c(size)` of that leaf.
    pub fn path_length(&self, x: &[f64]) -> f64 {
        let mut node = 0;
        let mut edges = 0usize;
        loop {
            match self.nodes[node] {
                Node::Internal {
                    feature,
                    split,
                    left,
                    right,
                } => {
                    node = if x[feature] < split { left } else { right };
                    edges += 1;
                }
                Node::External { size } => return edges as f64 + avg_path_c(size),
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Internal { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
                Node::External { .. } => 0,
            }
        }
        walk(&self.nodes, 0)
    }

    /// Sum of leaf sizes; equals the subsample size of the fit.
    pub fn total_size(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match n {
                Node::External { size } => *size,
                Node::Internal { .. } => 0,
            })
            .sum()
    }
}
