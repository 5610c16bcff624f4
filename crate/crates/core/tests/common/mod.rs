//! Shared test helpers: an independent brute-force CART oracle used to
//! cross-check the forest's tree growing.

#![allow(dead_code)]

use todqos::rforest::{Node, RegressionTree};

/// Exhaustive-search CART regression tree. Independent of the production
/// builder: no presorting machinery, no incremental partition reuse; every
/// node re-enumerates all (feature, midpoint) candidates by brute force.
///
/// It follows the same pinned arithmetic contract: left sums accumulate over
/// samples ordered by `(value, row)`, right sums are `total - left`, the
/// score is `sum_l^2/n_l + sum_r^2/n_r`, ties break to the lowest feature
/// then lowest threshold, and `x <= threshold` goes left.
#[derive(Debug, PartialEq)]
pub enum OracleNode {
    Split { feature: usize, threshold: f64, left: Box<OracleNode>, right: Box<OracleNode> },
    Leaf { mean: f64, n: usize },
}

pub fn oracle_tree(
    x: &[Vec<f64>],
    y: &[f64],
    rows: &[usize],
    max_depth: usize,
    min_leaf: usize,
) -> OracleNode {
    build(x, y, rows, 0, max_depth, min_leaf)
}

fn build(
    x: &[Vec<f64>],
    y: &[f64],
    rows: &[usize],
    depth: usize,
    max_depth: usize,
    min_leaf: usize,
) -> OracleNode {
    let n = rows.len();
    let total: f64 = rows.iter().map(|&r| y[r]).sum();
    let first = y[rows[0]];
    let constant = rows.iter().all(|&r| y[r] == first);
    if depth >= max_depth || n < 2 * min_leaf || constant {
        return OracleNode::Leaf { mean: total / n as f64, n };
    }

    let p = x[rows[0]].len();
    let mut best: Option<(usize, f64, f64)> = None;
    for f in 0..p {
        let mut ordered: Vec<usize> = rows.to_vec();
        ordered.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
        for i in 0..n - 1 {
            let v = x[ordered[i]][f];
            let v_next = x[ordered[i + 1]][f];
            if v == v_next {
                continue;
            }
            let threshold = 0.5 * (v + v_next);
            let n_l = i + 1;
            let n_r = n - n_l;
            if n_l < min_leaf || n_r < min_leaf {
                continue;
            }
            // Fresh pass in sorted order for the left sum.
            let mut sum_l = 0.0;
            for &r in &ordered[..n_l] {
                sum_l += y[r];
            }
            let sum_r = total - sum_l;
            let score = sum_l * sum_l / n_l as f64 + sum_r * sum_r / n_r as f64;
            if best.map_or(true, |(_, _, s)| score > s) {
                best = Some((f, threshold, score));
            }
        }
    }

    let Some((feature, threshold, _)) = best else {
        return OracleNode::Leaf { mean: total / n as f64, n };
    };
    let left_rows: Vec<usize> = rows.iter().copied().filter(|&r| x[r][feature] <= threshold).collect();
    let right_rows: Vec<usize> = rows.iter().copied().filter(|&r| x[r][feature] > threshold).collect();
    OracleNode::Split {
        feature,
        threshold,
        left: Box::new(build(x, y, &left_rows, depth + 1, max_depth, min_leaf)),
        right: Box::new(build(x, y, &right_rows, depth + 1, max_depth, min_leaf)),
    }
}

/// Structural equality between an oracle tree and a flat production tree:
/// same shape, bitwise-equal thresholds and leaf means.
pub fn trees_identical(oracle: &OracleNode, tree: &RegressionTree) -> bool {
    fn walk(oracle: &OracleNode, nodes: &[Node], idx: usize) -> bool {
        match (oracle, &nodes[idx]) {
            (
                OracleNode::Split { feature, threshold, left, right },
                Node::Split { feature: f2, threshold: t2, left: l2, right: r2 },
            ) => {
                *feature == *f2 as usize
                    && threshold.to_bits() == t2.to_bits()
                    && walk(left, nodes, *l2 as usize)
                    && walk(right, nodes, *r2 as usize)
            }
            (OracleNode::Leaf { mean, n }, Node::Leaf { mean: m2, n: n2 }) => {
                mean.to_bits() == m2.to_bits() && *n == *n2 as usize
            }
            _ => false,
        }
    }
    walk(oracle, &tree.nodes, 0)
}

pub fn oracle_predict(node: &OracleNode, x: &[f64]) -> f64 {
    match node {
        OracleNode::Leaf { mean, .. } => *mean,
        OracleNode::Split { feature, threshold, left, right } => {
            if x[*feature] <= *threshold {
                oracle_predict(left, x)
            } else {
                oracle_predict(right, x)
            }
        }
    }
}
