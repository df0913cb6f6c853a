//! A single shared pixel-level basis: every stage contributes through a head
//! and a projection, the sums get coordinate channels folded in, and each
//! descriptor renders its mask as a per-pixel dot product with the basis.

use ndarray::{ArrayD, IxDyn};

use crate::autodiff::{Graph, NodeId};
use crate::backbone::{Pyramid, SubnetHead};
use crate::config::LossNorm;
use crate::error::{Error, Result};
use crate::params::{BiasInit, Init, ParamStore, Session};
use crate::semantics_perceiving::{binary_cross_entropy, InstanceDescriptor};

/// Normalized cell-center coordinates, one row channel and one column
/// channel, spanning [-1, 1].
pub fn coord_channels(h: usize, w: usize) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(&[2, h, w]), |ix| {
        let (axis, r, c) = (ix[0], ix[1], ix[2]);
        if axis == 0 {
            2.0 * (r as f64 + 0.5) / h as f64 - 1.0
        } else {
            2.0 * (c as f64 + 0.5) / w as f64 - 1.0
        }
    })
}

pub struct MaskHead {
    head: SubnetHead,
    pub c_b: usize,
    pub mask_stride: usize,
}

impl MaskHead {
    pub fn register(
        init: &mut Init,
        store: &mut ParamStore,
        c_feat: usize,
        c_b: usize,
        head_width: usize,
        mask_stride: usize,
    ) -> Self {
        let head = SubnetHead::register(init, store, "maskhead.head", c_feat, head_width);
        init.conv(store, "maskhead.proj", c_b, head_width, 1, BiasInit::Zero);
        init.conv(store, "maskhead.fuse", c_b, c_b + 2, 1, BiasInit::Zero);
        Self {
            head,
            c_b,
            mask_stride,
        }
    }

    /// The shared basis at mask resolution: head + projection per stage,
    /// bilinear resize, sum, then a 1x1 fuse over the sum and two coordinate
    /// channels. Location sensitivity comes from those channels; without
    /// them, identical descriptors anywhere would render identical masks.
    pub fn general_features(&self, sess: &mut Session, pyramid: &Pyramid) -> NodeId {
        let (ih, iw) = pyramid.image_size;
        assert_eq!(
            (ih % self.mask_stride, iw % self.mask_stride),
            (0, 0),
            "mask stride must divide the image size"
        );
        let (hm, wm) = (ih / self.mask_stride, iw / self.mask_stride);
        let per_stage: Vec<NodeId> = pyramid
            .stages
            .iter()
            .map(|&s| {
                let x = self.head.apply(sess, s);
                let x = sess.conv("maskhead.proj", x, 1, 0);
                sess.g.resize_bilinear(x, hm, wm)
            })
            .collect();
        let summed = sess.g.add_n(&per_stage);
        let coords = sess.g.constant(coord_channels(hm, wm));
        let cat = sess.g.concat_c(&[summed, coords]);
        sess.conv("maskhead.fuse", cat, 1, 0)
    }
}

/// Per-pixel dot product of the descriptor with the basis, through a
/// sigmoid: a 1x1 dynamic convolution whose kernel is the descriptor.
pub fn render_mask(
    g: &mut Graph,
    descriptor: &InstanceDescriptor,
    basis: NodeId,
) -> Result<NodeId> {
    let dw = g.value(descriptor.vec_node).shape()[0];
    let bw = g.value(basis).shape()[0];
    if dw != bw {
        return Err(Error::InvalidInput(format!(
            "descriptor width {dw} does not match basis width {bw}"
        )));
    }
    let logits = g.dot_c(descriptor.vec_node, basis);
    Ok(g.sigmoid(logits))
}

/// Sum over descriptors of per-mask binary cross-entropy. Callers pass only
/// descriptors with an assigned instance; targets are binary masks at the
/// same resolution.
pub fn loss_mask(
    g: &mut Graph,
    masks: &[NodeId],
    targets: &[ArrayD<f64>],
    eps: f64,
    norm: LossNorm,
) -> NodeId {
    assert_eq!(masks.len(), targets.len(), "one target per rendered mask");
    if masks.is_empty() {
        return g.constant(ndarray::arr0(0.0).into_dyn());
    }
    let terms: Vec<NodeId> = masks
        .iter()
        .zip(targets.iter())
        .map(|(&m, t)| {
            assert_eq!(
                g.value(m).shape(),
                t.shape(),
                "mask and target resolution differ"
            );
            binary_cross_entropy(g, m, t, eps, norm)
        })
        .collect();
    g.add_n(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::{check_grads, max_rel_err, FD_STEP};
    use crate::backbone::{image_node, Backbone};
    use crate::config::CLAMP_EPS;
    use crate::semantics_perceiving::Provenance;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn descriptor_from(g: &mut Graph, v: Vec<f64>) -> InstanceDescriptor {
        let n = v.len();
        let node = g.constant(ArrayD::from_shape_vec(IxDyn(&[n]), v).unwrap());
        InstanceDescriptor {
            id: 0,
            vec_node: node,
            stage: 1,
            location: (0, 0),
            class_id: 1,
            confidence: 1.0,
            provenance: Provenance::Original,
            source_id: None,
        }
    }

    #[test]
    fn coord_channels_hold_cell_centers() {
        let c = coord_channels(2, 4);
        assert_eq!(c.shape(), &[2, 2, 4]);
        let cols: Vec<f64> = (0..4).map(|j| c[[1, 0, j]]).collect();
        assert_eq!(cols, vec![-0.75, -0.25, 0.25, 0.75]);
        let rows: Vec<f64> = (0..2).map(|i| c[[0, i, 0]]).collect();
        assert_eq!(rows, vec![-0.5, 0.5]);
    }

    #[test]
    fn basis_shape_at_stride_four() {
        let mut store = ParamStore::new();
        let mut init = Init::new(90);
        let bb = Backbone::register(&mut init, &mut store, 4);
        let mh = MaskHead::register(&mut init, &mut store, 4, 5, 6, 4);
        let mut sess = Session::new(&store);
        let img = Array3::zeros((3, 64, 64));
        let x = image_node(&mut sess, &img).unwrap();
        let pyr = bb.forward(&mut sess, x, 64, 64);
        let basis = mh.general_features(&mut sess, &pyr);
        assert_eq!(sess.g.value(basis).shape(), &[5, 16, 16]);
    }

    #[test]
    fn zeroed_head_gives_zero_basis() {
        let mut store = ParamStore::new();
        let mut init = Init::new(91);
        let bb = Backbone::register(&mut init, &mut store, 4);
        let mh = MaskHead::register(&mut init, &mut store, 4, 5, 6, 4);
        let names: Vec<String> = store.names().map(str::to_owned).collect();
        for name in names {
            if name.starts_with("maskhead.") && name.ends_with(".w") {
                let shape = store.value(&name).shape().to_vec();
                store.set(&name, ArrayD::zeros(IxDyn(&shape)));
            }
        }
        let mut sess = Session::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let img = Array3::from_shape_fn((3, 64, 64), |_| rng.gen_range(0.0..1.0));
        let x = image_node(&mut sess, &img).unwrap();
        let pyr = bb.forward(&mut sess, x, 64, 64);
        let basis = mh.general_features(&mut sess, &pyr);
        assert!(sess.g.value(basis).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn basis_is_deterministic_for_fixed_parameters() {
        let run = || {
            let mut store = ParamStore::new();
            let mut init = Init::new(92);
            let bb = Backbone::register(&mut init, &mut store, 4);
            let mh = MaskHead::register(&mut init, &mut store, 4, 5, 6, 4);
            let mut sess = Session::new(&store);
            let mut rng = ChaCha8Rng::seed_from_u64(92);
            let img = Array3::from_shape_fn((3, 64, 64), |_| rng.gen_range(0.0..1.0));
            let x = image_node(&mut sess, &img).unwrap();
            let pyr = bb.forward(&mut sess, x, 64, 64);
            let basis = mh.general_features(&mut sess, &pyr);
            sess.g.value(basis).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_descriptor_renders_half() {
        let mut g = Graph::new();
        let basis = g.constant(ArrayD::from_shape_fn(IxDyn(&[4, 3, 3]), |ix| {
            (ix[0] + ix[1] * ix[2]) as f64 * 0.1
        }));
        let d = descriptor_from(&mut g, vec![0.0; 4]);
        let m = render_mask(&mut g, &d, basis).unwrap();
        assert!(g.value(m).iter().all(|&p| (p - 0.5).abs() < 1e-12));
    }

    #[test]
    fn one_hot_basis_gives_uniform_sigmoid() {
        let mut g = Graph::new();
        let (v, dk) = (0.7, -1.3);
        let mut b = ArrayD::zeros(IxDyn(&[3, 2, 2]));
        for r in 0..2 {
            for c in 0..2 {
                b[[1, r, c]] = v;
            }
        }
        let basis = g.constant(b);
        let d = descriptor_from(&mut g, vec![0.0, dk, 0.0]);
        let m = render_mask(&mut g, &d, basis).unwrap();
        let want = 1.0 / (1.0 + (-(v * dk)).exp());
        assert!(g.value(m).iter().all(|&p| (p - want).abs() < 1e-12));
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let mut g = Graph::new();
        let basis = g.constant(ArrayD::zeros(IxDyn(&[4, 2, 2])));
        let d = descriptor_from(&mut g, vec![0.0; 3]);
        assert!(matches!(
            render_mask(&mut g, &d, basis),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn render_matches_naive_dot_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(93);
        for _ in 0..100 {
            let mut g = Graph::new();
            let bv = ArrayD::from_shape_fn(IxDyn(&[4, 2, 2]), |_| rng.gen_range(-1.0..1.0));
            let dv: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let basis = g.constant(bv.clone());
            let d = descriptor_from(&mut g, dv.clone());
            let m = render_mask(&mut g, &d, basis).unwrap();
            let got = g.value(m);
            for r in 0..2 {
                for c in 0..2 {
                    let logit: f64 = (0..4).map(|k| dv[k] * bv[[k, r, c]]).sum();
                    let want = 1.0 / (1.0 + (-logit).exp());
                    assert!((got[[r, c]] - want).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn logits_are_linear_in_the_descriptor() {
        let mut rng = ChaCha8Rng::seed_from_u64(94);
        let mut g = Graph::new();
        let basis_v = ArrayD::from_shape_fn(IxDyn(&[3, 2, 2]), |_| rng.gen_range(-1.0..1.0));
        let d1: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d2: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (a, b) = (0.6, -1.7);
        let combo: Vec<f64> = d1.iter().zip(&d2).map(|(x, y)| a * x + b * y).collect();
        let logits_of = |g: &mut Graph, v: Vec<f64>| {
            let basis = g.constant(basis_v.clone());
            let n = v.len();
            let d = g.constant(ArrayD::from_shape_vec(IxDyn(&[n]), v).unwrap());
            let l = g.dot_c(d, basis);
            g.value(l).clone()
        };
        let l1 = logits_of(&mut g, d1);
        let l2 = logits_of(&mut g, d2);
        let lc = logits_of(&mut g, combo);
        for (got, (x, y)) in lc.iter().zip(l1.iter().zip(l2.iter())) {
            assert!((got - (a * x + b * y)).abs() < 1e-10);
        }
    }

    #[test]
    fn mask_loss_analytic_values_and_additivity() {
        let mut g = Graph::new();
        // All-0.5 prediction scores ln 2 regardless of the target.
        let m = g.constant(ArrayD::from_elem(IxDyn(&[2, 2]), 0.5));
        let t = ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        let l = loss_mask(&mut g, &[m], &[t], CLAMP_EPS, LossNorm::Mean);
        assert!((g.scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);

        // Perfect prediction scores ~0.
        let m = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![1.0, 0.0]).unwrap());
        let t = ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![1.0, 0.0]).unwrap();
        let l = loss_mask(&mut g, &[m], &[t], CLAMP_EPS, LossNorm::Mean);
        assert!(g.scalar(l).abs() < 1e-9);

        // Three masks sum their independent terms.
        let mut rng = ChaCha8Rng::seed_from_u64(95);
        let mut masks = vec![];
        let mut targets = vec![];
        for _ in 0..3 {
            let p = ArrayD::from_shape_fn(IxDyn(&[2, 2]), |_| rng.gen_range(0.05..0.95));
            masks.push(g.constant(p));
            targets.push(ArrayD::from_shape_fn(IxDyn(&[2, 2]), |_| {
                f64::from(u32::from(rng.gen_bool(0.5)))
            }));
        }
        let total = loss_mask(&mut g, &masks, &targets, CLAMP_EPS, LossNorm::Mean);
        let mut sum = 0.0;
        for (&m, t) in masks.iter().zip(&targets) {
            let term = binary_cross_entropy(&mut g, m, t, CLAMP_EPS, LossNorm::Mean);
            sum += g.scalar(term);
        }
        assert!((g.scalar(total) - sum).abs() < 1e-8);
    }

    #[test]
    fn gradient_reaches_descriptor_and_basis() {
        let mut rng = ChaCha8Rng::seed_from_u64(96);
        let mut g = Graph::new();
        let basis = g.param(std::sync::Arc::new(ArrayD::from_shape_fn(
            IxDyn(&[3, 2, 2]),
            |_| rng.gen_range(-0.5..0.5),
        )));
        let dvec = g.param(std::sync::Arc::new(ArrayD::from_shape_fn(
            IxDyn(&[3]),
            |_| rng.gen_range(-0.5..0.5),
        )));
        let logits = g.dot_c(dvec, basis);
        let m = g.sigmoid(logits);
        let t = ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let l = loss_mask(&mut g, &[m], &[t], CLAMP_EPS, LossNorm::Mean);
        let grads = g.backward(l);
        let gd = grads.get(dvec).unwrap();
        let gb = grads.get(basis).unwrap();
        assert!(gd.iter().map(|v| v * v).sum::<f64>() > 0.0);
        assert!(gb.iter().map(|v| v * v).sum::<f64>() > 0.0);
    }

    #[test]
    fn mask_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        let basis = ArrayD::from_shape_fn(IxDyn(&[3, 3, 3]), |_| rng.gen_range(-0.6..0.6));
        let d1 = ArrayD::from_shape_fn(IxDyn(&[3]), |_| rng.gen_range(-0.6..0.6));
        let d2 = ArrayD::from_shape_fn(IxDyn(&[3]), |_| rng.gen_range(-0.6..0.6));
        let t1 = ArrayD::from_shape_fn(IxDyn(&[3, 3]), |_| f64::from(u32::from(rng.gen_bool(0.4))));
        let t2 = ArrayD::from_shape_fn(IxDyn(&[3, 3]), |_| f64::from(u32::from(rng.gen_bool(0.4))));
        let checks = check_grads(
            &[basis, d1, d2],
            move |g, ids| {
                let masks: Vec<NodeId> = [ids[1], ids[2]]
                    .iter()
                    .map(|&d| {
                        let logits = g.dot_c(d, ids[0]);
                        g.sigmoid(logits)
                    })
                    .collect();
                loss_mask(g, &masks, &[t1.clone(), t2.clone()], CLAMP_EPS, LossNorm::Mean)
            },
            FD_STEP,
        );
        let worst = max_rel_err(&checks);
        assert!(worst <= 1e-4, "mask loss rel err {worst:.3e}");
    }
}
