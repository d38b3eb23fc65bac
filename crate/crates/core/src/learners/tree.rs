//! Axis-aligned regression trees with weighted variance-reduction splits.
//!
//! Candidate thresholds are midpoints of sorted distinct values, ties in
//! improvement break toward the smallest (feature, threshold), and
//! feature subsampling draws from a caller-provided substream, so a tree
//! is a pure function of (data, rows, options, stream).
//!
//! Rows are presorted once per feature and the sorted orders are
//! stably partitioned down the tree, so no per-node sorting happens on
//! the hot path. Split decisions only ever compare weighted prefix sums
//! at boundaries between distinct values, which makes the result
//! independent of tie order.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        /// Weighted squared-error reduction achieved by this split.
        improvement: f64,
        left: usize,
        right: usize,
    },
    Leaf { value: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    i = if row[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, TreeNode::Leaf { .. }))
            .count()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TreeOpts {
    /// Maximum split depth (root at 0); `None` grows to purity/min_node.
    pub max_depth: Option<usize>,
    /// Minimum rows required in each child.
    pub min_node: usize,
    /// Features tried per split; `None` means all.
    pub mtry: Option<usize>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    improvement: f64,
}

/// Weighted SSE-reduction scan over one feature's sorted segment.
fn scan_feature(
    x: &Matrix,
    feature: usize,
    order: &[u32],
    y: &[f64],
    w: &[f64],
    min_node: usize,
    s_tot: f64,
    w_tot: f64,
) -> Option<(f64, f64)> {
    let n = order.len();
    if w_tot <= 0.0 {
        return None;
    }
    let parent_score = s_tot * s_tot / w_tot;
    let mut best: Option<(f64, f64)> = None;
    let mut s_left = 0.0;
    let mut w_left = 0.0;
    for i in 0..n - 1 {
        let r = order[i] as usize;
        s_left += w[r] * y[r];
        w_left += w[r];
        let v = x[(r, feature)];
        let v_next = x[(order[i + 1] as usize, feature)];
        if v == v_next {
            continue;
        }
        let n_left = i + 1;
        let n_right = n - n_left;
        if n_left < min_node || n_right < min_node {
            continue;
        }
        let w_right = w_tot - w_left;
        if w_left <= 0.0 || w_right <= 0.0 {
            continue;
        }
        let s_right = s_tot - s_left;
        let improvement = s_left * s_left / w_left + s_right * s_right / w_right - parent_score;
        let threshold = 0.5 * (v + v_next);
        let better = match best {
            None => improvement > 0.0,
            Some((bt, bi)) => {
                improvement > bi + 1e-15 || ((improvement - bi).abs() <= 1e-15 && threshold < bt)
            }
        };
        if better {
            best = Some((threshold, improvement));
        }
    }
    best
}

fn candidate_features(p: usize, mtry: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match mtry {
        None => (0..p).collect(),
        Some(m) if m >= p => (0..p).collect(),
        Some(m) => {
            // Partial Fisher-Yates: first m entries of a seeded shuffle,
            // sorted so the scan order (and tie-breaks) stay canonical.
            use rand::Rng;
            let mut idx: Vec<usize> = (0..p).collect();
            for i in 0..m {
                let j = rng.random_range(i..p);
                idx.swap(i, j);
            }
            let mut chosen = idx[..m].to_vec();
            chosen.sort_unstable();
            chosen
        }
    }
}

/// Build a regression tree over `rows` (indices into x/y/w, repeats
/// allowed for bootstrap multiplicities).
pub fn build_tree(
    x: &Matrix,
    rows: Vec<u32>,
    y: &[f64],
    w: &[f64],
    opts: &TreeOpts,
    rng: &mut ChaCha8Rng,
) -> Tree {
    let p = x.cols;
    let n = rows.len();
    // One sorted order per feature, stably partitioned at each split so
    // children inherit sorted segments.
    let mut orders: Vec<Vec<u32>> = Vec::with_capacity(p);
    for f in 0..p {
        let mut o = rows.clone();
        o.sort_by(|&a, &b| x[(a as usize, f)].total_cmp(&x[(b as usize, f)]));
        orders.push(o);
    }
    let mut scratch: Vec<u32> = Vec::with_capacity(n);

    let mut nodes = Vec::new();
    nodes.push(TreeNode::Leaf { value: 0.0 });
    // (node slot, segment start, segment end, depth)
    let mut stack: Vec<(usize, usize, usize, usize)> = vec![(0, 0, n, 0)];

    while let Some((slot, start, end, depth)) = stack.pop() {
        let seg_len = end - start;
        let mut s_tot = 0.0;
        let mut w_tot = 0.0;
        for &r in &orders[0][start..end] {
            s_tot += w[r as usize] * y[r as usize];
            w_tot += w[r as usize];
        }
        nodes[slot] = TreeNode::Leaf {
            value: if w_tot > 0.0 { s_tot / w_tot } else { 0.0 },
        };

        let depth_ok = opts.max_depth.map(|d| depth < d).unwrap_or(true);
        if !depth_ok || seg_len < 2 * opts.min_node.max(1) {
            continue;
        }
        let features = candidate_features(p, opts.mtry, rng);
        let mut best: Option<BestSplit> = None;
        for &f in &features {
            if let Some((threshold, improvement)) = scan_feature(
                x,
                f,
                &orders[f][start..end],
                y,
                w,
                opts.min_node,
                s_tot,
                w_tot,
            ) {
                let better = match &best {
                    None => true,
                    Some(b) => {
                        improvement > b.improvement + 1e-15
                            || ((improvement - b.improvement).abs() <= 1e-15
                                && (f, threshold) < (b.feature, b.threshold))
                    }
                };
                if better {
                    best = Some(BestSplit {
                        feature: f,
                        threshold,
                        improvement,
                    });
                }
            }
        }
        let Some(split) = best else { continue };
        // Stable partition of every feature's segment by the split.
        let mut n_left = 0;
        for f in 0..p {
            scratch.clear();
            let seg = &mut orders[f][start..end];
            let mut write = 0;
            for i in 0..seg.len() {
                let r = seg[i];
                if x[(r as usize, split.feature)] <= split.threshold {
                    seg[write] = r;
                    write += 1;
                } else {
                    scratch.push(r);
                }
            }
            seg[write..].copy_from_slice(&scratch);
            n_left = write;
        }
        let left = nodes.len();
        nodes.push(TreeNode::Leaf { value: 0.0 });
        let right = nodes.len();
        nodes.push(TreeNode::Leaf { value: 0.0 });
        nodes[slot] = TreeNode::Split {
            feature: split.feature,
            threshold: split.threshold,
            improvement: split.improvement,
            left,
            right,
        };
        stack.push((left, start, start + n_left, depth + 1));
        stack.push((right, start + n_left, end, depth + 1));
    }
    Tree { nodes }
}
