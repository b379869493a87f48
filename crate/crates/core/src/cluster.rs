//! Agglomerative clustering of neurons and the resulting dendrogram.
//!
//! Leaves are numbered `0..n`; the cluster created by merge `i` gets id
//! `n + i`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{invalid_param, Error, Result};
use crate::rf::RfImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linkage {
    Single,
    Complete,
    #[default]
    Average,
}

/// `d(i, j)² = ‖Bᵢ − Bⱼ‖² + ‖Aᵢ − Aⱼ‖²` over benign and adversarial RF images.
pub fn neuron_distance_matrix(benign: &[RfImage], adversarial: &[RfImage]) -> Result<Vec<Vec<f64>>> {
    if benign.len() != adversarial.len() {
        return Err(Error::InvalidInput("benign and adversarial RF counts differ".into()));
    }
    let n = benign.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        0.0
                    } else {
                        (benign[i].squared_distance(&benign[j]) + adversarial[i].squared_distance(&adversarial[j])).sqrt()
                    }
                })
                .collect()
        })
        .collect();
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    /// Smaller of the two merged node ids.
    pub left: usize,
    pub right: usize,
    pub height: f64,
    /// Leaves under the new node.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dendrogram {
    leaves: usize,
    merges: Vec<Merge>,
    order: Vec<usize>,
}

/// Merges the closest pair of clusters until one remains, updating
/// distances with the Lance–Williams recurrence. Equal distances go to the
/// pair with the smallest `(min id, max id)`.
pub fn agglomerate(dist: &[Vec<f64>], linkage: Linkage) -> Result<Dendrogram> {
    let n = dist.len();
    if n == 0 {
        return Err(invalid_param("distances", "need at least one point"));
    }
    for (i, row) in dist.iter().enumerate() {
        if row.len() != n {
            return Err(invalid_param("distances", "matrix must be square"));
        }
        if row[i] != 0.0 {
            return Err(invalid_param("distances", "diagonal must be zero"));
        }
        for (j, &d) in row.iter().enumerate() {
            if !d.is_finite() || d < 0.0 || d != dist[j][i] {
                return Err(invalid_param("distances", "must be finite, nonnegative and symmetric"));
            }
        }
    }
    let mut d: Vec<Vec<f64>> = dist.to_vec();
    let mut id: Vec<usize> = (0..n).collect();
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut merges = Vec::with_capacity(n - 1);
    for step in 0..n - 1 {
        let mut best: Option<(f64, usize, usize, usize, usize)> = None;
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in i + 1..n {
                if !active[j] {
                    continue;
                }
                let (lo, hi) = (id[i].min(id[j]), id[i].max(id[j]));
                let better = match best {
                    None => true,
                    Some((bd, blo, bhi, _, _)) => d[i][j] < bd || (d[i][j] == bd && (lo, hi) < (blo, bhi)),
                };
                if better {
                    best = Some((d[i][j], lo, hi, i, j));
                }
            }
        }
        let (height, lo, hi, i, j) = best.expect("two active clusters remain");
        let (si, sj) = (size[i] as f64, size[j] as f64);
        for m in 0..n {
            if !active[m] || m == i || m == j {
                continue;
            }
            let v = match linkage {
                Linkage::Single => d[i][m].min(d[j][m]),
                Linkage::Complete => d[i][m].max(d[j][m]),
                Linkage::Average => (si * d[i][m] + sj * d[j][m]) / (si + sj),
            };
            d[i][m] = v;
            d[m][i] = v;
        }
        active[j] = false;
        size[i] += size[j];
        id[i] = n + step;
        merges.push(Merge {
            left: lo,
            right: hi,
            height,
            count: size[i],
        });
    }
    Ok(Dendrogram::from_merges(n, merges))
}

impl Dendrogram {
    fn from_merges(leaves: usize, merges: Vec<Merge>) -> Self {
        let mut d = Self {
            leaves,
            merges,
            order: Vec::new(),
        };
        d.order = d.compute_order();
        d
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    pub fn root(&self) -> usize {
        if self.merges.is_empty() {
            0
        } else {
            self.leaves + self.merges.len() - 1
        }
    }

    pub fn node_count(&self) -> usize {
        self.leaves + self.merges.len()
    }

    pub fn children(&self, node: usize) -> Option<(usize, usize)> {
        node.checked_sub(self.leaves)
            .and_then(|i| self.merges.get(i))
            .map(|m| (m.left, m.right))
    }

    pub fn height(&self, node: usize) -> f64 {
        node.checked_sub(self.leaves)
            .and_then(|i| self.merges.get(i))
            .map_or(0.0, |m| m.height)
    }

    /// Smallest leaf under each node.
    fn min_leaves(&self) -> Vec<usize> {
        let mut min: Vec<usize> = (0..self.leaves).collect();
        for m in &self.merges {
            min.push(min[m.left].min(min[m.right]));
        }
        min
    }

    /// Leaf display order: at each node the subtree holding the smaller
    /// neuron id comes first.
    pub fn leaf_order(&self) -> &[usize] {
        &self.order
    }

    fn compute_order(&self) -> Vec<usize> {
        let min = self.min_leaves();
        let mut order = Vec::with_capacity(self.leaves);
        let mut stack = vec![self.root()];
        while let Some(node) = stack.pop() {
            match self.children(node) {
                None => order.push(node),
                Some((a, b)) => {
                    let (first, second) = if min[a] <= min[b] { (a, b) } else { (b, a) };
                    stack.push(second);
                    stack.push(first);
                }
            }
        }
        order
    }

    /// Sorted leaves under all of `nodes`.
    pub fn select_subtree(&self, nodes: &[usize]) -> Result<Vec<usize>> {
        let mut selected = vec![false; self.leaves];
        for &node in nodes {
            if node >= self.node_count() {
                return Err(Error::NotFound { what: "dendrogram node", id: node });
            }
            let mut stack = vec![node];
            while let Some(x) = stack.pop() {
                match self.children(x) {
                    None => selected[x] = true,
                    Some((a, b)) => {
                        stack.push(a);
                        stack.push(b);
                    }
                }
            }
        }
        Ok((0..self.leaves).filter(|&i| selected[i]).collect())
    }

    /// Parent of every node; the root maps to `None`.
    pub fn parents(&self) -> Vec<Option<usize>> {
        let mut parent = vec![None; self.node_count()];
        for (i, m) in self.merges.iter().enumerate() {
            parent[m.left] = Some(self.leaves + i);
            parent[m.right] = Some(self.leaves + i);
        }
        parent
    }

    /// Nodes from `leaf` up to and including the root.
    pub fn path_to_root(&self, leaf: usize) -> Result<Vec<usize>> {
        if leaf >= self.leaves {
            return Err(Error::NotFound { what: "neuron", id: leaf });
        }
        let parent = self.parents();
        let mut path = vec![leaf];
        let mut x = leaf;
        while let Some(p) = parent[x] {
            path.push(p);
            x = p;
        }
        Ok(path)
    }

    /// Nested form `{id, height, count, children}`; leaves carry `neuron_id`.
    pub fn to_nested_json(&self) -> Value {
        let min = self.min_leaves();
        self.node_json(self.root(), &min)
    }

    fn node_json(&self, node: usize, min: &[usize]) -> Value {
        match self.children(node) {
            None => json!({"id": node, "height": 0.0, "count": 1, "neuron_id": node, "children": []}),
            Some((a, b)) => {
                let (first, second) = if min[a] <= min[b] { (a, b) } else { (b, a) };
                json!({
                    "id": node,
                    "height": self.height(node),
                    "count": self.merges[node - self.leaves].count,
                    "children": [self.node_json(first, min), self.node_json(second, min)],
                })
            }
        }
    }

    pub fn to_json(&self) -> Value {
        json!({
            "leaves": self.leaves,
            "root": self.root(),
            "leaf_order": self.order,
            "merges": self.merges,
            "tree": self.to_nested_json(),
        })
    }

    /// Checks the structural invariants: `n − 1` merges, every non-root
    /// node used once as a child of a later node, counts that add up and
    /// heights that never decrease towards the root.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let n = self.leaves;
        if self.merges.len() + 1 != n {
            return Err(format!("{} merges for {n} leaves", self.merges.len()));
        }
        let mut used = vec![false; self.node_count()];
        let mut count: Vec<usize> = vec![1; n];
        for (i, m) in self.merges.iter().enumerate() {
            let id = n + i;
            for c in [m.left, m.right] {
                if c >= id {
                    return Err(format!("node {id} references later node {c}"));
                }
                if used[c] {
                    return Err(format!("node {c} has two parents"));
                }
                used[c] = true;
                if self.height(c) > m.height {
                    return Err(format!("height decreases from {c} to {id}"));
                }
            }
            if m.count != count[m.left] + count[m.right] {
                return Err(format!("count of node {id} is wrong"));
            }
            count.push(m.count);
        }
        if used[..self.node_count() - 1].iter().any(|&u| !u) {
            return Err("a non-root node has no parent".into());
        }
        let mut order = self.order.clone();
        order.sort_unstable();
        if order != (0..n).collect::<Vec<_>>() {
            return Err("leaf order is not a permutation".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(points: &[f64]) -> Vec<Vec<f64>> {
        points.iter().map(|a| points.iter().map(|b| (a - b).abs()).collect()).collect()
    }

    #[test]
    fn two_points() {
        let d = agglomerate(&line(&[0.0, 2.5]), Linkage::Average).unwrap();
        assert_eq!(d.merges(), &[Merge { left: 0, right: 1, height: 2.5, count: 2 }]);
        d.check_invariants().unwrap();
    }

    #[test]
    fn collinear_single_linkage() {
        let d = agglomerate(&line(&[0.0, 1.0, 10.0]), Linkage::Single).unwrap();
        assert_eq!((d.merges()[0].left, d.merges()[0].right, d.merges()[0].height), (0, 1, 1.0));
        assert_eq!((d.merges()[1].left, d.merges()[1].right, d.merges()[1].height), (2, 3, 9.0));
        assert_eq!(d.leaf_order(), &[0, 1, 2]);
        assert_eq!(d.select_subtree(&[4]).unwrap(), vec![0, 1, 2]);
        assert_eq!(d.select_subtree(&[2]).unwrap(), vec![2]);
        assert_eq!(d.select_subtree(&[3, 2]).unwrap(), vec![0, 1, 2]);
        assert!(d.select_subtree(&[5]).is_err());
        assert_eq!(d.path_to_root(0).unwrap(), vec![0, 3, 4]);
    }

    #[test]
    fn linkages_differ_on_later_merges() {
        let pts = line(&[0.0, 1.0, 3.0]);
        assert_eq!(agglomerate(&pts, Linkage::Complete).unwrap().merges()[1].height, 3.0);
        assert_eq!(agglomerate(&pts, Linkage::Average).unwrap().merges()[1].height, 2.5);
    }

    #[test]
    fn ties_use_smallest_ids() {
        let d = agglomerate(&line(&[0.0, 1.0, 2.0, 3.0]), Linkage::Single).unwrap();
        let pairs: Vec<(usize, usize)> = d.merges().iter().map(|m| (m.left, m.right)).collect();
        assert_eq!(pairs, vec![(0, 1), (2, 3), (4, 5)]);
    }

    #[test]
    fn leaf_order_puts_smaller_id_first() {
        let d = agglomerate(&line(&[10.0, 0.0, 0.5, 10.2]), Linkage::Average).unwrap();
        assert_eq!(d.leaf_order(), &[0, 3, 1, 2]);
    }

    #[test]
    fn rejects_bad_matrices() {
        assert!(agglomerate(&[], Linkage::Single).is_err());
        assert!(agglomerate(&[vec![0.0, 1.0], vec![2.0, 0.0]], Linkage::Single).is_err());
        assert!(agglomerate(&[vec![1.0]], Linkage::Single).is_err());
    }

    #[test]
    fn json_shapes() {
        let d = agglomerate(&line(&[0.0, 1.0, 10.0]), Linkage::Single).unwrap();
        let v = d.to_json();
        assert_eq!(v["root"], 4);
        assert_eq!(v["tree"]["children"][0]["id"], 3);
        assert_eq!(v["tree"]["children"][1]["neuron_id"], 2);
        assert_eq!(v["merges"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn dead_neurons_have_zero_distance() {
        let dead = RfImage { size: 2, pixels: vec![0.0; 12] };
        let live = RfImage { size: 2, pixels: vec![0.5; 12] };
        let m = neuron_distance_matrix(&[dead.clone(), dead.clone(), live.clone()], &[dead.clone(), dead, live]).unwrap();
        assert_eq!(m[0][1], 0.0);
        assert!((m[0][2] - (2.0 * 12.0 * 0.25f64).sqrt()).abs() < 1e-12);
    }
}
