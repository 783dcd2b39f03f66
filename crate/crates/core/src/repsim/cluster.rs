//! Agglomerative clustering of representation correlation matrices.
//!
//! Clusters are merged bottom-up on the dissimilarity `d = 1 - r` using
//! Lance-Williams updates. Merge order is fully deterministic: among pairs at
//! the minimal distance the one whose clusters contain the lowest leaf
//! indices wins, so equal inputs always produce the same tree.

use serde::{Deserialize, Serialize};

use super::{RepCorrelationMatrix, RepsimError};

/// Tolerated asymmetry and diagonal drift when validating input matrices.
const SYMMETRY_TOL: f64 = 1e-12;

/// Lance-Williams update rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Linkage {
    /// Size-weighted mean of member distances.
    #[default]
    Average,
    /// Largest member distance.
    Complete,
    /// Smallest member distance.
    Single,
}

/// One agglomeration step.
///
/// `left` and `right` are node ids: ids below the leaf count refer to
/// leaves, higher ids refer to earlier merges in order (`leaf_count + t` is
/// the node created by `merges[t]`). `left` always holds the lower minimal
/// leaf index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    /// Dissimilarity at which the two clusters fused.
    pub height: f64,
}

/// Full agglomeration history over named leaves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub leaf_names: Vec<String>,
    /// `leaf_names.len() - 1` merges in execution order.
    pub merges: Vec<Merge>,
}

impl Dendrogram {
    pub fn leaf_count(&self) -> usize {
        self.leaf_names.len()
    }

    /// Height of a node: 0 for leaves, merge height otherwise.
    pub fn node_height(&self, node: usize) -> f64 {
        if node < self.leaf_count() {
            0.0
        } else {
            self.merges[node - self.leaf_count()].height
        }
    }

    /// Leaves in left-to-right display order (left subtree first).
    pub fn leaf_order(&self) -> Vec<usize> {
        let mut order = Vec::with_capacity(self.leaf_count());
        if self.leaf_count() == 0 {
            return order;
        }
        self.collect_leaves(self.root(), &mut order);
        order
    }

    fn root(&self) -> usize {
        self.leaf_count() + self.merges.len() - 1
    }

    fn collect_leaves(&self, node: usize, out: &mut Vec<usize>) {
        if node < self.leaf_count() {
            out.push(node);
        } else {
            let merge = &self.merges[node - self.leaf_count()];
            self.collect_leaves(merge.left, out);
            self.collect_leaves(merge.right, out);
        }
    }

    /// Newick serialization with branch lengths.
    ///
    /// A branch length is the parent height minus the child height, so the
    /// distance from any leaf to the root equals the root merge height.
    pub fn to_newick(&self) -> String {
        let mut out = String::new();
        if self.merges.is_empty() {
            if let Some(name) = self.leaf_names.first() {
                out.push_str(name);
            }
        } else {
            self.write_newick(self.root(), &mut out);
        }
        out.push(';');
        out
    }

    fn write_newick(&self, node: usize, out: &mut String) {
        if node < self.leaf_count() {
            out.push_str(&self.leaf_names[node]);
        } else {
            let merge = &self.merges[node - self.leaf_count()];
            out.push('(');
            self.write_newick(merge.left, out);
            out.push(':');
            out.push_str(&format_branch(merge.height - self.node_height(merge.left)));
            out.push(',');
            self.write_newick(merge.right, out);
            out.push(':');
            out.push_str(&format_branch(merge.height - self.node_height(merge.right)));
            out.push(')');
        }
    }
}

fn format_branch(len: f64) -> String {
    format!("{:.6}", len)
}

struct Cluster {
    id: usize,
    min_leaf: usize,
    size: usize,
}

/// Agglomerates the leaves of a correlation matrix on `d = 1 - r`.
///
/// The input must be square against its names, symmetric within `1e-12`,
/// with entries in `[-1, 1]` and a unit diagonal. Average, complete and
/// single linkage all produce monotone merge heights on such inputs.
pub fn hcluster(corr: &RepCorrelationMatrix, linkage: Linkage) -> Result<Dendrogram, RepsimError> {
    let k = corr.names.len();
    validate(corr, k)?;

    // Dissimilarities indexed by node id; merges append rows and columns.
    let total = 2 * k - 1;
    let mut dist = vec![f64::NAN; total * total];
    for i in 0..k {
        for j in (i + 1)..k {
            let d = 1.0 - corr.values.get(i, j);
            dist[i * total + j] = d;
            dist[j * total + i] = d;
        }
    }

    let mut active: Vec<Cluster> = (0..k)
        .map(|i| Cluster {
            id: i,
            min_leaf: i,
            size: 1,
        })
        .collect();
    let mut merges = Vec::with_capacity(k - 1);

    for step in 0..(k - 1) {
        // Active clusters stay ordered by minimal leaf, so scanning pairs in
        // order with a strict improvement test implements the tie-break.
        let mut best = (0usize, 1usize);
        let mut best_d = f64::INFINITY;
        for a in 0..active.len() {
            for b in (a + 1)..active.len() {
                let d = dist[active[a].id * total + active[b].id];
                if d < best_d {
                    best_d = d;
                    best = (a, b);
                }
            }
        }
        let (a, b) = best;
        let new_id = k + step;
        merges.push(Merge {
            left: active[a].id,
            right: active[b].id,
            height: best_d,
        });

        let (size_a, size_b) = (active[a].size as f64, active[b].size as f64);
        let (id_a, id_b) = (active[a].id, active[b].id);
        for c in active.iter() {
            if c.id == id_a || c.id == id_b {
                continue;
            }
            let dac = dist[id_a * total + c.id];
            let dbc = dist[id_b * total + c.id];
            let d = match linkage {
                Linkage::Average => (size_a * dac + size_b * dbc) / (size_a + size_b),
                Linkage::Complete => dac.max(dbc),
                Linkage::Single => dac.min(dbc),
            };
            dist[new_id * total + c.id] = d;
            dist[c.id * total + new_id] = d;
        }

        let merged = Cluster {
            id: new_id,
            min_leaf: active[a].min_leaf,
            size: active[a].size + active[b].size,
        };
        active.remove(b);
        active[a] = merged;
    }

    Ok(Dendrogram {
        leaf_names: corr.names.clone(),
        merges,
    })
}

fn validate(corr: &RepCorrelationMatrix, k: usize) -> Result<(), RepsimError> {
    if k < 2 {
        return Err(RepsimError::DegenerateSample(format!(
            "clustering needs at least 2 leaves, got {k}"
        )));
    }
    if corr.values.rows() != k || corr.values.cols() != k {
        return Err(RepsimError::ShapeMismatch {
            context: "correlation matrix side against names",
            expected: k,
            actual: corr.values.rows().max(corr.values.cols()),
        });
    }
    for i in 0..k {
        for j in 0..k {
            let v = corr.values.get(i, j);
            if !v.is_finite() || !(-1.0..=1.0).contains(&v) {
                return Err(RepsimError::InvalidMatrix(format!(
                    "entry ({i}, {j}) = {v} outside [-1, 1]"
                )));
            }
            if (v - corr.values.get(j, i)).abs() > SYMMETRY_TOL {
                return Err(RepsimError::InvalidMatrix(format!(
                    "asymmetric at ({i}, {j})"
                )));
            }
        }
        if (corr.values.get(i, i) - 1.0).abs() > SYMMETRY_TOL {
            return Err(RepsimError::InvalidMatrix(format!(
                "diagonal entry {i} is not 1"
            )));
        }
    }
    Ok(())
}
