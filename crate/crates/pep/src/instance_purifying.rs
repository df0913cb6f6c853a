//! Whether two descriptors describe the same object: a learned pairwise
//! affinity matrix, trained against the ground-truth co-instance indicator
//! and thresholded into merge groups at inference.

use ndarray::{ArrayD, IxDyn};

use crate::autodiff::{Graph, NodeId};
use crate::config::LossNorm;
use crate::error::{Error, Result};
use crate::params::{BiasInit, Init, ParamStore, Session};
use crate::semantics_perceiving::{binary_cross_entropy, DescriptorSet, Provenance};

pub struct Purifier {
    pub c_d: usize,
}

impl Purifier {
    pub fn register(init: &mut Init, store: &mut ParamStore, c_d: usize) -> Self {
        init.linear(store, "purify.proj", c_d, c_d, BiasInit::Zero);
        Self { c_d }
    }

    /// N x N affinity: descriptors are projected, their scaled Gram matrix is
    /// symmetrized, and the diagonal gets a constant self-affinity boost
    /// before the sigmoid. Errors when the set is empty.
    pub fn affinity(&self, sess: &mut Session, set: &DescriptorSet, bias_self: f64) -> Result<NodeId> {
        if set.items.is_empty() {
            return Err(Error::InvalidInput(
                "affinity needs at least one descriptor".into(),
            ));
        }
        let rows: Vec<NodeId> = set.items.iter().map(|d| d.vec_node).collect();
        let x = sess.g.stack_rows(&rows);
        let p = sess.linear("purify.proj", x);
        let gram = sess.g.gram_scaled(p, 1.0 / (self.c_d as f64).sqrt());
        let sym = sess.g.symmetrize(gram);
        let shifted = sess.g.add_diag_const(sym, bias_self);
        Ok(sess.g.sigmoid(shifted))
    }
}

/// Mean element-wise binary cross-entropy between the predicted affinity and
/// the ground-truth indicator. `Sum` keeps the raw total.
pub fn loss_purifying(
    g: &mut Graph,
    affinity: NodeId,
    target: &ndarray::Array2<f64>,
    eps: f64,
    norm: LossNorm,
) -> NodeId {
    let n = target.nrows();
    let t = target
        .view()
        .into_shape_with_order(IxDyn(&[n, n]))
        .expect("square target")
        .to_owned();
    binary_cross_entropy(g, affinity, &t, eps, norm)
}

/// One merged group: member descriptor indices and the representative chosen
/// among them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    pub members: Vec<usize>,
    pub representative: usize,
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, i: usize) -> usize {
        if self.parent[i] != i {
            let root = self.find(self.parent[i]);
            self.parent[i] = root;
        }
        self.parent[i]
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Smaller root wins so group identity is order-independent.
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.parent[hi] = lo;
        }
    }
}

/// Merges descriptors whose pairwise affinity reaches `tau_merge`. Merging is
/// transitive: the groups are the connected components of the thresholded
/// matrix. The model's matrix is symmetric by construction; for raw inputs
/// the larger of the two mirrored entries decides, so the result never
/// depends on which triangle a caller populated. Each group's representative
/// is its most confident member, ties preferring originals over mined and
/// then the lowest index.
pub fn purify(set: &DescriptorSet, affinity: &ArrayD<f64>, tau_merge: f64) -> Vec<Group> {
    let n = set.items.len();
    assert_eq!(affinity.shape(), &[n, n], "affinity must be N x N");
    let mut uf = UnionFind::new(n);
    for i in 0..n {
        for j in (i + 1)..n {
            if affinity[[i, j]].max(affinity[[j, i]]) >= tau_merge {
                uf.union(i, j);
            }
        }
    }
    let mut by_root: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        let r = uf.find(i);
        by_root[r].push(i);
    }
    by_root
        .into_iter()
        .filter(|m| !m.is_empty())
        .map(|members| {
            let representative = *members
                .iter()
                .min_by(|&&a, &&b| {
                    let da = &set.items[a];
                    let db = &set.items[b];
                    db.confidence
                        .partial_cmp(&da.confidence)
                        .unwrap()
                        .then_with(|| {
                            let rank = |p: Provenance| match p {
                                Provenance::Original => 0,
                                Provenance::Mined => 1,
                            };
                            rank(da.provenance).cmp(&rank(db.provenance))
                        })
                        .then(a.cmp(&b))
                })
                .expect("group is non-empty");
            Group {
                members,
                representative,
            }
        })
        .collect()
}
