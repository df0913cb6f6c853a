//! Mining indistinguishable neighbors: each original descriptor conditions a
//! small conv head over its window, predicted instance centers become key
//! pixels, and the source descriptor is replicated onto them with coordinate
//! concatenation.

use ndarray::ArrayD;

use crate::autodiff::{Graph, NodeId};
use crate::config::LossNorm;
use crate::params::{BiasInit, Init, ParamStore, Session};
use crate::semantics_perceiving::{
    binary_cross_entropy, cross_entropy, local_maxima, DescriptorSet, InstanceDescriptor,
    Provenance,
};
use crate::supervision::Window;

/// Initial center probability from the zero-input head (sigmoid of the final
/// bias), mirroring the classifier prior.
const CENTER_PRIOR: f64 = 0.01;

/// Per-window instance-center probabilities, kept as `[1, rows, cols]`.
pub struct CenterMap {
    pub node: NodeId,
    pub window: Window,
    pub source_id: usize,
}

/// A predicted neighbor-instance center inside one excavation window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyPixel {
    /// (row, col) in the source descriptor's stage grid.
    pub location: (usize, usize),
    pub score: f64,
    pub source_id: usize,
}

/// A freshly minted descriptor together with its class prediction node.
pub struct Mined {
    pub desc: InstanceDescriptor,
    /// `[C_P]` softmax used by the mined-classification loss.
    pub class_probs: NodeId,
}

pub struct Excavator {
    pub c_d: usize,
    pub c_p: usize,
}

impl Excavator {
    pub fn register(
        init: &mut Init,
        store: &mut ParamStore,
        c_feat: usize,
        c_d: usize,
        c_p: usize,
        width: usize,
    ) -> Self {
        init.conv(store, "excav.conv1", width, c_feat + c_d, 3, BiasInit::Zero);
        init.conv(store, "excav.conv2", width, width, 3, BiasInit::Zero);
        let prior = (CENTER_PRIOR / (1.0 - CENTER_PRIOR)).ln();
        init.conv(store, "excav.conv3", 1, width, 3, BiasInit::Const(prior));
        init.linear(store, "excav.mint", c_d, c_d + 2, BiasInit::Zero);
        init.linear(store, "excav.cls", c_p, c_d, BiasInit::Zero);
        Self { c_d, c_p }
    }

    /// Predicts the center map in `descriptor`'s window: the stage feature is
    /// cropped, the descriptor broadcast-concatenated onto every pixel, and a
    /// three-layer conv head emits per-pixel probabilities.
    pub fn excavate(
        &self,
        sess: &mut Session,
        stage_feat: NodeId,
        descriptor: &InstanceDescriptor,
        radius: usize,
        full_map: bool,
    ) -> CenterMap {
        let shape = sess.g.value(stage_feat).shape().to_vec();
        let grid = (shape[1], shape[2]);
        let window = if full_map {
            Window {
                origin: (0, 0),
                rows: grid.0,
                cols: grid.1,
            }
        } else {
            Window::around(descriptor.location, radius, grid)
        };
        let patch = sess.g.crop(
            stage_feat,
            window.origin.0,
            window.origin.1,
            window.rows,
            window.cols,
        );
        let cond = sess
            .g
            .broadcast_c(descriptor.vec_node, window.rows, window.cols);
        let x = sess.g.concat_c(&[patch, cond]);
        let x = sess.conv("excav.conv1", x, 1, 1);
        let x = sess.g.silu(x);
        let x = sess.conv("excav.conv2", x, 1, 1);
        let x = sess.g.silu(x);
        let x = sess.conv("excav.conv3", x, 1, 1);
        let node = sess.g.sigmoid(x);
        CenterMap {
            node,
            window,
            source_id: descriptor.id,
        }
    }

    /// Replicates the source vector onto each key pixel: the vector is
    /// concatenated with the key's normalized grid coordinates and projected
    /// back to descriptor width. Class and confidence come from the mined
    /// class head and the key score.
    pub fn mint(
        &self,
        sess: &mut Session,
        source: &InstanceDescriptor,
        keys: &[KeyPixel],
        stage_size: (usize, usize),
    ) -> Vec<Mined> {
        keys.iter()
            .map(|key| {
                debug_assert_eq!(key.source_id, source.id);
                let rn = 2.0 * (key.location.0 as f64 / stage_size.0 as f64) - 1.0;
                let cn = 2.0 * (key.location.1 as f64 / stage_size.1 as f64) - 1.0;
                let coords = sess.g.constant(
                    ArrayD::from_shape_vec(ndarray::IxDyn(&[2]), vec![rn, cn]).unwrap(),
                );
                let cat = sess.g.concat_c(&[source.vec_node, coords]);
                let vec_node = sess.linear("excav.mint", cat);
                let logits = sess.linear("excav.cls", vec_node);
                let class_probs = sess.g.softmax_c(logits);
                let pv = sess.g.value(class_probs);
                let (mut class_id, mut best) = (1usize, f64::NEG_INFINITY);
                for k in 1..self.c_p {
                    if pv[[k]] > best {
                        best = pv[[k]];
                        class_id = k;
                    }
                }
                Mined {
                    desc: InstanceDescriptor {
                        id: usize::MAX, // assigned when appended to the set
                        vec_node,
                        stage: source.stage,
                        location: key.location,
                        class_id,
                        confidence: key.score,
                        provenance: Provenance::Mined,
                        source_id: Some(source.id),
                    },
                    class_probs,
                }
            })
            .collect()
    }
}

/// Key pixels of one center map: 3x3 local maxima at or above `tau_key`,
/// plateau ties to the lexicographically smallest cell, highest scores kept
/// up to `k_max`.
pub fn extract_key_pixels(
    map_values: &ArrayD<f64>,
    window: Window,
    source_id: usize,
    tau_key: f64,
    k_max: usize,
) -> Vec<KeyPixel> {
    let flat = map_values
        .view()
        .into_shape_with_order((window.rows, window.cols))
        .expect("center map matches its window");
    let mut keys: Vec<KeyPixel> = local_maxima(&flat.to_owned(), tau_key)
        .into_iter()
        .map(|(r, c)| KeyPixel {
            location: (window.origin.0 + r, window.origin.1 + c),
            score: flat[[r, c]],
            source_id,
        })
        .collect();
    keys.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.location.cmp(&b.location))
    });
    keys.truncate(k_max);
    keys
}

/// Appends mined descriptors to the set, highest score first, respecting the
/// global cap. Returns the retained ones with their final ids.
pub fn append_mined(set: &mut DescriptorSet, mut mined: Vec<Mined>, n_cap: usize) -> Vec<Mined> {
    mined.sort_by(|a, b| {
        b.desc
            .confidence
            .partial_cmp(&a.desc.confidence)
            .unwrap()
            .then(a.desc.source_id.cmp(&b.desc.source_id))
            .then(a.desc.location.cmp(&b.desc.location))
    });
    let room = n_cap.saturating_sub(set.n_all());
    mined.truncate(room);
    for m in &mut mined {
        m.desc.id = set.items.len();
        set.items.push(m.desc.clone());
        set.n_mined += 1;
    }
    mined
}

/// Sum over windows of per-window binary cross-entropy against the center
/// targets.
pub fn loss_excavating(
    g: &mut Graph,
    maps: &[CenterMap],
    targets: &[ArrayD<f64>],
    eps: f64,
    norm: LossNorm,
) -> NodeId {
    assert_eq!(maps.len(), targets.len(), "one center target per window");
    if maps.is_empty() {
        return g.constant(ndarray::arr0(0.0).into_dyn());
    }
    let terms: Vec<NodeId> = maps
        .iter()
        .zip(targets.iter())
        .map(|(m, t)| {
            let t3 = t
                .view()
                .into_shape_with_order((1, t.shape()[0], t.shape()[1]))
                .expect("2-d center target")
                .to_owned()
                .into_dyn();
            binary_cross_entropy(g, m.node, &t3, eps, norm)
        })
        .collect();
    g.add_n(&terms)
}

/// Sum over mined descriptors of the cross-entropy between their class
/// softmax and the one-hot target.
pub fn loss_excavating_cls(
    g: &mut Graph,
    mined: &[Mined],
    targets: &[ArrayD<f64>],
    eps: f64,
    norm: LossNorm,
) -> NodeId {
    assert_eq!(mined.len(), targets.len(), "one class target per mined descriptor");
    if mined.is_empty() {
        return g.constant(ndarray::arr0(0.0).into_dyn());
    }
    let terms: Vec<NodeId> = mined
        .iter()
        .zip(targets.iter())
        .map(|(m, t)| cross_entropy(g, m.class_probs, t, eps, norm))
        .collect();
    g.add_n(&terms)
}
