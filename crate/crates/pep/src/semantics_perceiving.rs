//! Per-pixel semantic classification over the pyramid, the descriptor field,
//! and selection of high-confidence original instance descriptors.

use ndarray::{Array2, ArrayD};

use crate::autodiff::{Graph, NodeId};
use crate::backbone::{Pyramid, SubnetHead, STAGES};
use crate::config::LossNorm;
use crate::params::{BiasInit, Init, ParamStore, Session};

/// Where a descriptor came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Original,
    Mined,
}

/// One candidate instance: a descriptor vector plus its bookkeeping.
#[derive(Debug, Clone)]
pub struct InstanceDescriptor {
    pub id: usize,
    /// Graph node holding the `[C_D]` vector.
    pub vec_node: NodeId,
    /// Pyramid stage, 1-based.
    pub stage: usize,
    /// (row, col) in the stage grid.
    pub location: (usize, usize),
    /// Predicted foreground class, 1-based.
    pub class_id: usize,
    pub confidence: f64,
    pub provenance: Provenance,
    /// Originating original descriptor, for mined ones.
    pub source_id: Option<usize>,
}

/// Ordered descriptor collection; originals first, mined appended.
#[derive(Debug, Clone, Default)]
pub struct DescriptorSet {
    pub items: Vec<InstanceDescriptor>,
    pub n_ori: usize,
    pub n_mined: usize,
}

impl DescriptorSet {
    pub fn n_all(&self) -> usize {
        self.items.len()
    }

    pub fn originals(&self) -> impl Iterator<Item = &InstanceDescriptor> {
        self.items.iter().filter(|d| d.provenance == Provenance::Original)
    }
}

/// Classification subnetwork: shared head plus a 1x1 classifier with the
/// background-heavy bias prior.
pub struct Perceiver {
    head: SubnetHead,
    c_p: usize,
}

/// Initial foreground probability targeted by the classifier bias.
const FG_PRIOR: f64 = 0.01;

impl Perceiver {
    pub fn register(
        init: &mut Init,
        store: &mut ParamStore,
        c_feat: usize,
        head_width: usize,
        c_p: usize,
    ) -> Self {
        assert!(c_p >= 2, "need at least background plus one class");
        let head = SubnetHead::register(init, store, "perceive.head", c_feat, head_width);
        init.conv(store, "perceive.cls", c_p, head_width, 1, BiasInit::None);
        // Softmax prior: background logit 0, each foreground class starts
        // near FG_PRIOR to keep early background-dominated losses small.
        let bg_prob = 1.0 - FG_PRIOR * (c_p - 1) as f64;
        let fg_bias = (FG_PRIOR / bg_prob).ln();
        let mut bias = ArrayD::zeros(ndarray::IxDyn(&[c_p]));
        for k in 1..c_p {
            bias[[k]] = fg_bias;
        }
        store.register("perceive.cls.b", bias);
        Self { head, c_p }
    }

    pub fn c_p(&self) -> usize {
        self.c_p
    }

    /// Per-stage class probability maps `[C_P, H_s, W_s]`.
    pub fn perceive(&self, sess: &mut Session, pyr: &Pyramid) -> [NodeId; STAGES] {
        let mut out = [NodeId::default(); STAGES];
        for (s, &stage) in pyr.stages.iter().enumerate() {
            let t = self.head.apply(sess, stage);
            let logits = sess.conv("perceive.cls", t, 1, 0);
            out[s] = sess.g.softmax_c(logits);
        }
        out
    }
}

/// Descriptor-field subnetwork: shared head plus a linear 1x1 projection to
/// descriptor width. Carries no loss of its own; supervision arrives through
/// every consumer of the vectors.
pub struct DescriptorExtractor {
    head: SubnetHead,
    pub c_d: usize,
}

impl DescriptorExtractor {
    pub fn register(
        init: &mut Init,
        store: &mut ParamStore,
        c_feat: usize,
        head_width: usize,
        c_d: usize,
    ) -> Self {
        let head = SubnetHead::register(init, store, "descfield.head", c_feat, head_width);
        init.conv(store, "descfield.proj", c_d, head_width, 1, BiasInit::Zero);
        Self { head, c_d }
    }

    pub fn extract(&self, sess: &mut Session, pyr: &Pyramid) -> [NodeId; STAGES] {
        let mut out = [NodeId::default(); STAGES];
        for (s, &stage) in pyr.stages.iter().enumerate() {
            let t = self.head.apply(sess, stage);
            out[s] = sess.conv("descfield.proj", t, 1, 0);
        }
        out
    }
}

/// Categorical cross-entropy of a probability map `p` (`[C, H, W]`) against a
/// one-hot target: `-sum G*log(clamp(P))`, per-pixel mean under
/// [`LossNorm::Mean`].
pub fn cross_entropy(
    g: &mut Graph,
    p: NodeId,
    target: &ArrayD<f64>,
    eps: f64,
    norm: LossNorm,
) -> NodeId {
    let shape = g.value(p).shape().to_vec();
    assert_eq!(shape, target.shape(), "cross_entropy: prediction/target shape mismatch");
    let logp = g.log_clamp(p, eps);
    let t = g.constant(target.clone());
    let prod = g.mul(t, logp);
    let s = g.sum_all(prod);
    let denom = match norm {
        // One target unit per pixel: normalize by spatial size, not by C.
        LossNorm::Mean => shape[1..].iter().product::<usize>() as f64,
        LossNorm::Sum => 1.0,
    };
    g.affine(s, -1.0 / denom, 0.0)
}

/// Elementwise binary cross-entropy of probabilities `p` against a binary
/// target of the same shape: `-mean[t*log(p) + (1-t)*log(1-p)]` (or raw sum).
pub fn binary_cross_entropy(
    g: &mut Graph,
    p: NodeId,
    target: &ArrayD<f64>,
    eps: f64,
    norm: LossNorm,
) -> NodeId {
    let shape = g.value(p).shape().to_vec();
    assert_eq!(shape, target.shape(), "binary_cross_entropy: shape mismatch");
    debug_assert!(target.iter().all(|&t| t == 0.0 || t == 1.0));
    let logp = g.log_clamp(p, eps);
    let t = g.constant(target.clone());
    let pos = g.mul(t, logp);
    let q = g.affine(p, -1.0, 1.0);
    let logq = g.log_clamp(q, eps);
    let tc = g.constant(target.mapv(|v| 1.0 - v));
    let neg = g.mul(tc, logq);
    let both = g.add(pos, neg);
    let s = g.sum_all(both);
    let denom = match norm {
        LossNorm::Mean => shape.iter().product::<usize>() as f64,
        LossNorm::Sum => 1.0,
    };
    g.affine(s, -1.0 / denom, 0.0)
}

/// Sum of per-stage cross-entropies against the semantic targets.
pub fn loss_perceiving(
    g: &mut Graph,
    maps: &[NodeId; STAGES],
    targets: &[ArrayD<f64>; STAGES],
    eps: f64,
    norm: LossNorm,
) -> NodeId {
    let terms: Vec<NodeId> = maps
        .iter()
        .zip(targets.iter())
        .map(|(&m, t)| cross_entropy(g, m, t, eps, norm))
        .collect();
    g.add_n(&terms)
}

/// 3x3 local maxima at or above `threshold`, plateaus resolved to their
/// lexicographically smallest member. The tie rule makes extraction total:
/// same map in, same pixel list out.
pub fn local_maxima(conf: &Array2<f64>, threshold: f64) -> Vec<(usize, usize)> {
    let (h, w) = conf.dim();
    let mut out = Vec::new();
    for r in 0..h {
        'pixel: for c in 0..w {
            let v = conf[[r, c]];
            if v < threshold {
                continue;
            }
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                        continue;
                    }
                    let nv = conf[[nr as usize, nc as usize]];
                    if nv > v || (nv == v && (nr as usize, nc as usize) < (r, c)) {
                        continue 'pixel;
                    }
                }
            }
            out.push((r, c));
        }
    }
    out
}

/// Foreground confidence and argmax class at every pixel of a `[C_P, H, W]`
/// probability map. Class ids are 1-based; channel 0 is background.
pub fn foreground_confidence(probs: &ArrayD<f64>) -> (Array2<f64>, Array2<usize>) {
    let c_p = probs.shape()[0];
    let (h, w) = (probs.shape()[1], probs.shape()[2]);
    let mut conf = Array2::zeros((h, w));
    let mut class = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let (mut best_k, mut best_v) = (1usize, f64::NEG_INFINITY);
            for k in 1..c_p {
                let v = probs[[k, r, c]];
                if v > best_v {
                    best_v = v;
                    best_k = k;
                }
            }
            conf[[r, c]] = best_v;
            class[[r, c]] = best_k;
        }
    }
    (conf, class)
}

/// Selects original descriptors: high-confidence 3x3 peaks of the foreground
/// probability, ranked by confidence, truncated to `n_cap`.
pub fn select_original_descriptors(
    g: &mut Graph,
    maps: &[NodeId; STAGES],
    fields: &[NodeId; STAGES],
    tau_conf: f64,
    n_cap: usize,
) -> DescriptorSet {
    // (negated confidence, stage, row, col, class) so that sort is
    // confidence-descending with (stage, row, col) tie-break.
    let mut picks: Vec<(f64, usize, usize, usize, usize)> = Vec::new();
    for s in 0..STAGES {
        let probs = g.value(maps[s]).clone();
        let (conf, class) = foreground_confidence(&probs);
        for (r, c) in local_maxima(&conf, tau_conf) {
            picks.push((-conf[[r, c]], s + 1, r, c, class[[r, c]]));
        }
    }
    picks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    picks.truncate(n_cap);

    let items: Vec<InstanceDescriptor> = picks
        .into_iter()
        .enumerate()
        .map(|(id, (nconf, stage, r, c, class_id))| InstanceDescriptor {
            id,
            vec_node: g.pixel_vec(fields[stage - 1], r, c),
            stage,
            location: (r, c),
            class_id,
            confidence: -nconf,
            provenance: Provenance::Original,
            source_id: None,
        })
        .collect();
    let n_ori = items.len();
    DescriptorSet {
        items,
        n_ori,
        n_mined: 0,
    }
}

/// Mints original descriptors at caller-chosen stage locations, reading
/// confidence and class from the predicted maps. Used for teacher-forced
/// training and for freezing discrete choices in gradient checks.
pub fn descriptors_at(
    g: &mut Graph,
    maps: &[NodeId; STAGES],
    fields: &[NodeId; STAGES],
    locations: &[(usize, usize, usize)],
) -> DescriptorSet {
    let items: Vec<InstanceDescriptor> = locations
        .iter()
        .enumerate()
        .map(|(id, &(stage, r, c))| {
            assert!((1..=STAGES).contains(&stage), "stage {stage} out of range");
            let probs = g.value(maps[stage - 1]).clone();
            let (conf, class) = foreground_confidence(&probs);
            InstanceDescriptor {
                id,
                vec_node: g.pixel_vec(fields[stage - 1], r, c),
                stage,
                location: (r, c),
                class_id: class[[r, c]],
                confidence: conf[[r, c]],
                provenance: Provenance::Original,
                source_id: None,
            }
        })
        .collect();
    let n_ori = items.len();
    DescriptorSet {
        items,
        n_ori,
        n_mined: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::{check_grads, max_rel_err, FD_STEP};
    use crate::backbone::{image_node, Backbone};
    use crate::config::CLAMP_EPS;
    use ndarray::{Array3, ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn softmax_target_pair(
        rng: &mut ChaCha8Rng,
        c: usize,
        h: usize,
        w: usize,
    ) -> (ArrayD<f64>, ArrayD<f64>) {
        let logits = ArrayD::from_shape_fn(IxDyn(&[c, h, w]), |_| rng.gen_range(-2.0..2.0));
        let mut g = Graph::new();
        let l = g.constant(logits);
        let p = g.softmax_c(l);
        let probs = g.value(p).clone();
        let mut onehot = ArrayD::zeros(IxDyn(&[c, h, w]));
        for r in 0..h {
            for cc in 0..w {
                let k = rng.gen_range(0..c);
                onehot[[k, r, cc]] = 1.0;
            }
        }
        (probs, onehot)
    }

    fn naive_ce(p: &ArrayD<f64>, t: &ArrayD<f64>, eps: f64) -> f64 {
        let (c, h, w) = (p.shape()[0], p.shape()[1], p.shape()[2]);
        let mut acc = 0.0;
        for r in 0..h {
            for cc in 0..w {
                for k in 0..c {
                    acc -= t[[k, r, cc]] * p[[k, r, cc]].max(eps).ln();
                }
            }
        }
        acc
    }

    #[test]
    fn cross_entropy_matches_naive_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let (probs, onehot) = softmax_target_pair(&mut rng, 3, 2, 2);
            let mut g = Graph::new();
            let p = g.constant(probs.clone());
            let ce = cross_entropy(&mut g, p, &onehot, CLAMP_EPS, LossNorm::Sum);
            let got = g.scalar(ce);
            let want = naive_ce(&probs, &onehot, CLAMP_EPS);
            assert!((got - want).abs() < 1e-8, "CE {got} vs naive {want}");
        }
    }

    #[test]
    fn cross_entropy_perfect_prediction_is_zero() {
        let mut onehot = ArrayD::zeros(IxDyn(&[2, 1, 1]));
        onehot[[1, 0, 0]] = 1.0;
        let mut g = Graph::new();
        let p = g.constant(onehot.clone());
        let ce = cross_entropy(&mut g, p, &onehot, CLAMP_EPS, LossNorm::Sum);
        assert_eq!(g.scalar(ce), 0.0);
    }

    #[test]
    fn cross_entropy_half_confidence_is_ln2() {
        let mut p = ArrayD::from_elem(IxDyn(&[2, 1, 1]), 0.5);
        p[[0, 0, 0]] = 0.5;
        let mut t = ArrayD::zeros(IxDyn(&[2, 1, 1]));
        t[[1, 0, 0]] = 1.0;
        let mut g = Graph::new();
        let pn = g.constant(p);
        let ce = cross_entropy(&mut g, pn, &t, CLAMP_EPS, LossNorm::Sum);
        assert!((g.scalar(ce) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn mean_norm_divides_by_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let (probs, onehot) = softmax_target_pair(&mut rng, 3, 4, 5);
        let mut g = Graph::new();
        let p = g.constant(probs);
        let raw = cross_entropy(&mut g, p, &onehot, CLAMP_EPS, LossNorm::Sum);
        let mean = cross_entropy(&mut g, p, &onehot, CLAMP_EPS, LossNorm::Mean);
        assert!((g.scalar(raw) / 20.0 - g.scalar(mean)).abs() < 1e-12);
    }

    #[test]
    fn binary_cross_entropy_analytic_values() {
        let p = ArrayD::from_elem(IxDyn(&[1, 1]), 0.5);
        let t = ArrayD::from_elem(IxDyn(&[1, 1]), 1.0);
        let mut g = Graph::new();
        let pn = g.constant(p);
        let l = binary_cross_entropy(&mut g, pn, &t, CLAMP_EPS, LossNorm::Mean);
        assert!((g.scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);

        // Near-perfect prediction: loss within clamp distance of zero.
        let p = ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.0 - 1e-12, 1e-12]).unwrap();
        let t = ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.0, 0.0]).unwrap();
        let mut g = Graph::new();
        let pn = g.constant(p);
        let l = binary_cross_entropy(&mut g, pn, &t, CLAMP_EPS, LossNorm::Mean);
        assert!(g.scalar(l).abs() < 1e-8);
    }

    #[test]
    fn loss_perceiving_is_additive_over_stages() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut g = Graph::new();
        let mut maps = [NodeId::default(); STAGES];
        let mut targets: Vec<ArrayD<f64>> = Vec::new();
        let mut expect = 0.0;
        for s in 0..STAGES {
            let side = 1 << (STAGES - s);
            let (probs, onehot) = softmax_target_pair(&mut rng, 3, side, side);
            let p = g.constant(probs.clone());
            maps[s] = p;
            let ce = cross_entropy(&mut g, p, &onehot, CLAMP_EPS, LossNorm::Mean);
            expect += g.scalar(ce);
            targets.push(onehot);
        }
        let targets: [ArrayD<f64>; STAGES] = targets.try_into().unwrap();
        let total = loss_perceiving(&mut g, &maps, &targets, CLAMP_EPS, LossNorm::Mean);
        assert!((g.scalar(total) - expect).abs() < 1e-8);
    }

    #[test]
    fn perfect_stages_give_zero_perceiving_loss() {
        let mut g = Graph::new();
        let mut maps = [NodeId::default(); STAGES];
        let mut targets: Vec<ArrayD<f64>> = Vec::new();
        for s in 0..STAGES {
            let mut onehot = ArrayD::zeros(IxDyn(&[2, 2, 2]));
            for r in 0..2 {
                for c in 0..2 {
                    onehot[[(s + r + c) % 2, r, c]] = 1.0;
                }
            }
            maps[s] = g.constant(onehot.clone());
            targets.push(onehot);
        }
        let targets: [ArrayD<f64>; STAGES] = targets.try_into().unwrap();
        let total = loss_perceiving(&mut g, &maps, &targets, CLAMP_EPS, LossNorm::Mean);
        assert_eq!(g.scalar(total), 0.0);
    }

    #[test]
    fn ce_gradient_matches_finite_differences_through_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let logits = ArrayD::from_shape_fn(IxDyn(&[3, 2, 2]), |_| rng.gen_range(-1.5..1.5));
        let mut onehot = ArrayD::zeros(IxDyn(&[3, 2, 2]));
        for r in 0..2 {
            for c in 0..2 {
                onehot[[rng.gen_range(0..3), r, c]] = 1.0;
            }
        }
        let checks = check_grads(
            &[logits],
            move |g, ids| {
                let p = g.softmax_c(ids[0]);
                cross_entropy(g, p, &onehot, CLAMP_EPS, LossNorm::Mean)
            },
            FD_STEP,
        );
        let worst = max_rel_err(&checks);
        assert!(worst <= 1e-4, "CE through softmax: rel err {worst:.3e}");
    }

    #[test]
    fn uniform_logits_give_uniform_probabilities() {
        // Zeroed classifier weights and bias produce logits 0 everywhere.
        let mut store = ParamStore::new();
        let mut init = Init::new(40);
        let bb = Backbone::register(&mut init, &mut store, 4);
        let pc = Perceiver::register(&mut init, &mut store, 4, 4, 3);
        store.set("perceive.cls.w", ArrayD::zeros(IxDyn(&[3, 4, 1, 1])));
        store.set("perceive.cls.b", ArrayD::zeros(IxDyn(&[3])));
        let mut sess = Session::new(&store);
        let img = image_node(&mut sess, &Array3::zeros((3, 64, 64))).unwrap();
        let pyr = bb.forward(&mut sess, img, 64, 64);
        let maps = pc.perceive(&mut sess, &pyr);
        for &m in &maps {
            let v = sess.g.value(m);
            assert!(v.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-12));
        }
    }

    #[test]
    fn probabilities_sum_to_one_under_random_weights() {
        let mut store = ParamStore::new();
        let mut init = Init::new(41);
        let bb = Backbone::register(&mut init, &mut store, 4);
        let pc = Perceiver::register(&mut init, &mut store, 4, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let img_arr = Array3::from_shape_fn((3, 64, 64), |_| rng.gen_range(0.0..1.0));
        let mut sess = Session::new(&store);
        let img = image_node(&mut sess, &img_arr).unwrap();
        let pyr = bb.forward(&mut sess, img, 64, 64);
        let maps = pc.perceive(&mut sess, &pyr);
        for &m in &maps {
            let v = sess.g.value(m);
            let (h, w) = (v.shape()[1], v.shape()[2]);
            for r in 0..h {
                for c in 0..w {
                    let s: f64 = (0..4).map(|k| v[[k, r, c]]).sum();
                    assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn classifier_prior_starts_near_background() {
        let mut store = ParamStore::new();
        let mut init = Init::new(42);
        let bb = Backbone::register(&mut init, &mut store, 4);
        let pc = Perceiver::register(&mut init, &mut store, 4, 4, 4);
        store.set("perceive.cls.w", ArrayD::zeros(IxDyn(&[4, 4, 1, 1])));
        let mut sess = Session::new(&store);
        let img = image_node(&mut sess, &Array3::zeros((3, 64, 64))).unwrap();
        let pyr = bb.forward(&mut sess, img, 64, 64);
        let maps = pc.perceive(&mut sess, &pyr);
        let v = sess.g.value(maps[0]);
        for k in 1..4 {
            assert!(
                (v[[k, 0, 0]] - 0.01).abs() < 1e-6,
                "foreground prior should start near 0.01, got {}",
                v[[k, 0, 0]]
            );
        }
    }

    fn fabricated_maps(g: &mut Graph, peaks: &[(usize, usize, usize, f64)]) -> ([NodeId; STAGES], [NodeId; STAGES]) {
        // Background-heavy maps with foreground bumps at requested
        // (stage, row, col, confidence) spots. Stage s grid is 8x8.
        let mut maps = [NodeId::default(); STAGES];
        let mut fields = [NodeId::default(); STAGES];
        for s in 0..STAGES {
            let mut probs = ArrayD::zeros(IxDyn(&[3, 8, 8]));
            for r in 0..8 {
                for c in 0..8 {
                    probs[[0, r, c]] = 1.0;
                }
            }
            for &(ps, pr, pc, conf) in peaks {
                if ps == s + 1 {
                    probs[[0, pr, pc]] = 1.0 - conf;
                    probs[[1, pr, pc]] = conf;
                }
            }
            maps[s] = g.constant(probs);
            fields[s] = g.constant(ArrayD::from_elem(IxDyn(&[4, 8, 8]), s as f64));
        }
        (maps, fields)
    }

    #[test]
    fn all_background_maps_select_nothing() {
        let mut g = Graph::new();
        let (maps, fields) = fabricated_maps(&mut g, &[]);
        let set = select_original_descriptors(&mut g, &maps, &fields, 0.3, 30);
        assert_eq!(set.n_all(), 0);
        assert_eq!(set.n_ori, 0);
    }

    #[test]
    fn single_peak_selected_with_its_confidence() {
        let mut g = Graph::new();
        let (maps, fields) = fabricated_maps(&mut g, &[(2, 3, 4, 0.9)]);
        let set = select_original_descriptors(&mut g, &maps, &fields, 0.5, 30);
        assert_eq!(set.n_all(), 1);
        let d = &set.items[0];
        assert_eq!(d.stage, 2);
        assert_eq!(d.location, (3, 4));
        assert_eq!(d.class_id, 1);
        assert!((d.confidence - 0.9).abs() < 1e-12);
        assert_eq!(d.provenance, Provenance::Original);
        assert_eq!(g.value(d.vec_node).shape(), &[4]);
    }

    #[test]
    fn cap_keeps_highest_confidence_in_tiebreak_order() {
        let mut g = Graph::new();
        // Peaks spaced at least 2 apart so each is a 3x3 local max.
        let peaks: Vec<(usize, usize, usize, f64)> = (0..8)
            .map(|i| (1 + i % 2, 2 * (i / 2) + 1, 1 + 3 * (i % 2), 0.4 + 0.05 * i as f64))
            .collect();
        let (maps, fields) = fabricated_maps(&mut g, &peaks);
        let set = select_original_descriptors(&mut g, &maps, &fields, 0.3, 3);
        assert_eq!(set.n_all(), 3);
        let confs: Vec<f64> = set.items.iter().map(|d| d.confidence).collect();
        assert!(confs.windows(2).all(|w| w[0] >= w[1]), "sorted descending: {confs:?}");
        assert!((confs[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn raising_threshold_never_selects_more() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..20 {
            let mut g = Graph::new();
            let mut maps = [NodeId::default(); STAGES];
            let mut fields = [NodeId::default(); STAGES];
            for s in 0..STAGES {
                let logits = ArrayD::from_shape_fn(IxDyn(&[3, 6, 6]), |_| rng.gen_range(-2.0..2.0));
                let l = g.constant(logits);
                maps[s] = g.softmax_c(l);
                fields[s] = g.constant(ArrayD::zeros(IxDyn(&[4, 6, 6])));
            }
            let mut prev = usize::MAX;
            for tau in [0.1, 0.3, 0.5, 0.7, 0.9] {
                let n = select_original_descriptors(&mut g, &maps, &fields, tau, 30).n_all();
                assert!(n <= prev, "count must not grow with tau");
                prev = n;
            }
        }
    }

    #[test]
    fn plateau_keeps_lexicographically_smallest() {
        let mut conf = Array2::zeros((4, 4));
        conf[[1, 1]] = 0.8;
        conf[[1, 2]] = 0.8;
        conf[[2, 1]] = 0.8;
        conf[[2, 2]] = 0.8;
        let peaks = local_maxima(&conf, 0.3);
        assert_eq!(peaks, vec![(1, 1)]);
    }

    #[test]
    fn descriptor_vector_reads_field_at_its_pixel() {
        let mut g = Graph::new();
        let (maps, _) = fabricated_maps(&mut g, &[(3, 2, 5, 0.8)]);
        let mut fields = [NodeId::default(); STAGES];
        for s in 0..STAGES {
            let f = ArrayD::from_shape_fn(IxDyn(&[4, 8, 8]), |ix| {
                (ix[0] * 100 + ix[1] * 10 + ix[2]) as f64
            });
            fields[s] = g.constant(f);
        }
        let set = select_original_descriptors(&mut g, &maps, &fields, 0.5, 30);
        assert_eq!(set.n_all(), 1);
        let v = g.value(set.items[0].vec_node);
        assert_eq!(v[[0]], 25.0);
        assert_eq!(v[[3]], 325.0);
    }
}
