//! Central finite-difference verification of analytic gradients.

use ndarray::ArrayD;

use super::{Gradients, Graph, NodeId, Value};

/// Default perturbation step for central differences.
pub const FD_STEP: f64 = 1e-4;

/// Relative error floor: differences below this magnitude are compared
/// absolutely, which keeps near-zero gradients from blowing up the ratio.
pub const REL_FLOOR: f64 = 1e-4;

/// Relative error between an analytic and a numeric derivative.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Outcome of checking one leaf tensor.
#[derive(Debug, Clone)]
pub struct LeafCheck {
    pub max_rel_err: f64,
    /// Flat index where the worst error occurred.
    pub argmax: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Checks gradients of a scalar-valued function at `leaves` by rebuilding the
/// graph per perturbation. `build` must be a pure function of the leaf values.
///
/// Returns one [`LeafCheck`] per leaf, in order.
pub fn check_grads<F>(leaves: &[ArrayD<f64>], build: F, step: f64) -> Vec<LeafCheck>
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let eval = |vals: &[ArrayD<f64>]| -> (f64, Graph, Vec<NodeId>, NodeId) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vals
            .iter()
            .map(|v| g.param(Value::new(v.clone())))
            .collect();
        let root = build(&mut g, &ids);
        let y = g.scalar(root);
        (y, g, ids, root)
    };

    let (_, graph, ids, root) = eval(leaves);
    let grads: Gradients = graph.backward(root);

    let mut out = Vec::with_capacity(leaves.len());
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads
            .get(ids[li])
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(leaf.raw_dim()));
        let mut worst = LeafCheck {
            max_rel_err: 0.0,
            argmax: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        let flat_analytic: Vec<f64> = analytic.iter().copied().collect();
        for idx in 0..leaf.len() {
            let mut plus = leaves.to_vec();
            let mut minus = leaves.to_vec();
            {
                let p = plus[li].as_slice_mut().unwrap();
                p[idx] += step;
                let m = minus[li].as_slice_mut().unwrap();
                m[idx] -= step;
            }
            let (yp, ..) = eval(&plus);
            let (ym, ..) = eval(&minus);
            let numeric = (yp - ym) / (2.0 * step);
            let a = flat_analytic[idx];
            let e = rel_err(a, numeric);
            if e > worst.max_rel_err {
                worst = LeafCheck {
                    max_rel_err: e,
                    argmax: idx,
                    analytic: a,
                    numeric,
                };
            }
        }
        out.push(worst);
    }
    out
}

/// Worst relative error across all leaves.
pub fn max_rel_err(checks: &[LeafCheck]) -> f64 {
    checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
}
