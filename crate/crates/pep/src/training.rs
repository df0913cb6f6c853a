//! End-to-end orchestration: one forward pass wires perceive, select,
//! excavate, mint, affinity, and mask rendering into the five-term
//! objective; the optimizer is SGD with momentum, step decay, and global
//! gradient clipping. Inference reuses the same pathway and merges
//! descriptors through the affinity matrix.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use serde::Serialize;

use crate::autodiff::NodeId;
use crate::backbone::{image_node, Backbone, Pyramid};
use crate::checkpoint;
use crate::config::{
    LossNorm, ModelConfig, RunConfig, TeacherForcing, TrainConfig, CLAMP_EPS, MASK_BINARIZE,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, Detection};
use crate::instance_purifying::{loss_purifying, purify, Group, Purifier};
use crate::mask_learning::{loss_mask, render_mask, MaskHead};
use crate::object_excavating::{
    append_mined, extract_key_pixels, loss_excavating, loss_excavating_cls, CenterMap, Excavator,
    Mined,
};
use crate::params::{Init, ParamStore, Session};
use crate::semantics_perceiving::{
    descriptors_at, loss_perceiving, select_original_descriptors, DescriptorExtractor,
    DescriptorSet, Perceiver, Provenance,
};
use crate::supervision::{
    assign_descriptors, build_affinity_target, build_center_target, build_mask_targets,
    build_semantic_targets, containing_cell, route_stage, Scene,
};

/// Mask-overlap threshold for the no-purifying fallback suppression.
const NMS_IOU: f64 = 0.5;

/// Per-image loss terms and their weighted total. `total` is always the
/// left-to-right sum `l_p + alpha*l_e + beta*l_pe + gamma*l_matrix +
/// delta*l_mask`, bit-for-bit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub l_p: f64,
    pub l_e: f64,
    pub l_pe: f64,
    pub l_matrix: f64,
    pub l_mask: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn recompute_total(&self) -> f64 {
        self.l_p
            + self.alpha * self.l_e
            + self.beta * self.l_pe
            + self.gamma * self.l_matrix
            + self.delta * self.l_mask
    }
}

/// Everything one training forward produces.
pub struct SceneForward {
    pub set: DescriptorSet,
    pub center_maps: Vec<CenterMap>,
    pub mined: Vec<Mined>,
    pub affinity: Option<NodeId>,
    /// (descriptor id, rendered mask node) for assigned descriptors.
    pub masks: Vec<(usize, NodeId)>,
    /// Unweighted term nodes, ordered as in [`LossBreakdown`].
    pub loss_nodes: [NodeId; 5],
    pub total: NodeId,
    pub breakdown: LossBreakdown,
    /// True when no descriptors were selected and only the perceiving loss
    /// contributed.
    pub skipped: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    /// Eq-weights (alpha, beta, gamma, delta).
    pub weights: [f64; 4],
    pub norm: LossNorm,
    /// Take descriptor locations from ground-truth centers instead of the
    /// predicted maps (teacher forcing).
    pub use_gt_locations: bool,
    pub center_fraction: f64,
    pub scale_ranges: [f64; 4],
    /// Step index, only for error reporting.
    pub step: usize,
}

pub struct PepModel {
    pub cfg: ModelConfig,
    backbone: Backbone,
    perceiver: Perceiver,
    extractor: DescriptorExtractor,
    excavator: Excavator,
    purifier: Purifier,
    mask_head: MaskHead,
}

impl PepModel {
    /// Registers every subnetwork in a fixed order; the order defines the
    /// checkpoint layout. Ablation switches do not change the layout, only
    /// which pathways run.
    pub fn new(cfg: &ModelConfig, seed: u64) -> (Self, ParamStore) {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let c_p = cfg.num_classes + 1;
        let backbone = Backbone::register(&mut init, &mut store, cfg.c_feat);
        let perceiver = Perceiver::register(&mut init, &mut store, cfg.c_feat, cfg.head_width, c_p);
        let extractor =
            DescriptorExtractor::register(&mut init, &mut store, cfg.c_feat, cfg.head_width, cfg.c_d);
        let excavator = Excavator::register(
            &mut init,
            &mut store,
            cfg.c_feat,
            cfg.c_d,
            c_p,
            cfg.excav_width,
        );
        let purifier = Purifier::register(&mut init, &mut store, cfg.c_d);
        let mask_head = MaskHead::register(
            &mut init,
            &mut store,
            cfg.c_feat,
            cfg.c_b,
            cfg.head_width,
            cfg.mask_stride,
        );
        (
            Self {
                cfg: cfg.clone(),
                backbone,
                perceiver,
                extractor,
                excavator,
                purifier,
                mask_head,
            },
            store,
        )
    }

    /// Rebuilds the model a checkpoint was trained with and restores its
    /// parameters.
    pub fn from_checkpoint(bin_path: &Path) -> Result<(Self, ParamStore)> {
        let cfg = checkpoint::read_model_config(bin_path)?;
        let (model, mut store) = Self::new(&cfg, 0);
        checkpoint::restore(&mut store, bin_path)?;
        Ok((model, store))
    }

    fn zero(&self, sess: &mut Session) -> NodeId {
        sess.g.constant(ndarray::arr0(0.0).into_dyn())
    }

    /// The full training forward for one scene.
    pub fn forward_scene(
        &self,
        sess: &mut Session,
        scene: &Scene,
        opt: &ForwardOptions,
    ) -> Result<SceneForward> {
        let (h, w) = scene.size();
        let c_p = self.cfg.num_classes + 1;
        let image = image_node(sess, &scene.image)?;
        let pyr = self.backbone.forward(sess, image, h, w);
        let maps = self.perceiver.perceive(sess, &pyr);
        let fields = self.extractor.extract(sess, &pyr);

        let sem_targets = build_semantic_targets(
            scene,
            &pyr.sizes,
            c_p,
            opt.center_fraction,
            &opt.scale_ranges,
        );
        let l_p = loss_perceiving(&mut sess.g, &maps, &sem_targets, CLAMP_EPS, opt.norm);

        let mut set = if opt.use_gt_locations {
            let mut locations: Vec<(usize, usize, usize)> = Vec::new();
            for inst in &scene.instances {
                let stage = route_stage(inst, &opt.scale_ranges);
                let stride = Pyramid::stride(stage - 1);
                let grid = (h.div_ceil(stride), w.div_ceil(stride));
                let cell = containing_cell(inst.center, stride, grid);
                let loc = (stage, cell.0, cell.1);
                if !locations.contains(&loc) {
                    locations.push(loc);
                }
            }
            descriptors_at(&mut sess.g, &maps, &fields, &locations)
        } else {
            select_original_descriptors(
                &mut sess.g,
                &maps,
                &fields,
                self.cfg.tau_conf,
                self.cfg.n_cap,
            )
        };

        let weights = opt.weights;
        if set.items.is_empty() {
            let z = self.zero(sess);
            let ze = sess.g.affine(z, weights[0], 0.0);
            let zpe = sess.g.affine(z, weights[1], 0.0);
            let zm = sess.g.affine(z, weights[2], 0.0);
            let zk = sess.g.affine(z, weights[3], 0.0);
            let total = sess.g.add_n(&[l_p, ze, zpe, zm, zk]);
            let breakdown = self.breakdown_from(sess, opt, l_p, z, z, z, z, total)?;
            return Ok(SceneForward {
                set,
                center_maps: vec![],
                mined: vec![],
                affinity: None,
                masks: vec![],
                loss_nodes: [l_p, z, z, z, z],
                total,
                breakdown,
                skipped: true,
            });
        }

        // Excavating: per-original window prediction, then minting at the
        // predicted key pixels. Key pixels always come from the current
        // maps; teacher forcing only steers original locations.
        let mut center_maps: Vec<CenterMap> = Vec::new();
        let mut center_targets: Vec<ArrayD<f64>> = Vec::new();
        let mut mined: Vec<Mined> = Vec::new();
        if self.cfg.enable_excavating {
            let assignment_ori = assign_descriptors(&set, scene, opt.center_fraction);
            let originals: Vec<_> = set.items.clone();
            let mut all_minted = Vec::new();
            for d in &originals {
                let cm = self.excavator.excavate(
                    sess,
                    pyr.stages[d.stage - 1],
                    d,
                    self.cfg.window_radius,
                    self.cfg.full_map_excavation,
                );
                center_targets.push(build_center_target(
                    scene,
                    d.stage,
                    cm.window,
                    assignment_ori.map[d.id],
                    self.cfg.excavate_source_center,
                ));
                let keys = extract_key_pixels(
                    sess.g.value(cm.node),
                    cm.window,
                    d.id,
                    self.cfg.tau_key,
                    self.cfg.k_max,
                );
                let grid = pyr.sizes[d.stage - 1];
                all_minted.extend(self.excavator.mint(sess, d, &keys, grid));
                center_maps.push(cm);
            }
            mined = append_mined(&mut set, all_minted, self.cfg.n_cap);
        }

        let assignment = assign_descriptors(&set, scene, opt.center_fraction);

        let l_e = if self.cfg.enable_excavating {
            loss_excavating(&mut sess.g, &center_maps, &center_targets, CLAMP_EPS, opt.norm)
        } else {
            self.zero(sess)
        };

        let l_pe = if self.cfg.enable_excavating {
            let targets: Vec<ArrayD<f64>> = mined
                .iter()
                .map(|m| {
                    let mut t = ArrayD::zeros(IxDyn(&[c_p]));
                    let class = assignment.map[m.desc.id]
                        .map_or(0, |k| scene.instances[k].class_id);
                    t[[class]] = 1.0;
                    t
                })
                .collect();
            loss_excavating_cls(&mut sess.g, &mined, &targets, CLAMP_EPS, opt.norm)
        } else {
            self.zero(sess)
        };

        let (affinity, l_matrix) = if self.cfg.enable_purifying {
            let aff = self.purifier.affinity(sess, &set, self.cfg.bias_self)?;
            let target = build_affinity_target(&assignment);
            let l = loss_purifying(&mut sess.g, aff, &target, CLAMP_EPS, opt.norm);
            (Some(aff), l)
        } else {
            (None, self.zero(sess))
        };

        let basis = self.mask_head.general_features(sess, &pyr);
        let mask_size = (h / self.cfg.mask_stride, w / self.cfg.mask_stride);
        let mask_targets = build_mask_targets(&assignment, scene, mask_size);
        let mut masks = Vec::new();
        let mut mask_nodes = Vec::new();
        let mut mask_target_arrays = Vec::new();
        for (d, target) in set.items.iter().zip(mask_targets.into_iter()) {
            if let Some(t) = target {
                let m = render_mask(&mut sess.g, d, basis)?;
                masks.push((d.id, m));
                mask_nodes.push(m);
                mask_target_arrays.push(t);
            }
        }
        let l_mask = loss_mask(&mut sess.g, &mask_nodes, &mask_target_arrays, CLAMP_EPS, opt.norm);

        let we = sess.g.affine(l_e, weights[0], 0.0);
        let wpe = sess.g.affine(l_pe, weights[1], 0.0);
        let wm = sess.g.affine(l_matrix, weights[2], 0.0);
        let wk = sess.g.affine(l_mask, weights[3], 0.0);
        let total = sess.g.add_n(&[l_p, we, wpe, wm, wk]);
        let breakdown = self.breakdown_from(sess, opt, l_p, l_e, l_pe, l_matrix, l_mask, total)?;

        Ok(SceneForward {
            set,
            center_maps,
            mined,
            affinity,
            masks,
            loss_nodes: [l_p, l_e, l_pe, l_matrix, l_mask],
            total,
            breakdown,
            skipped: false,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn breakdown_from(
        &self,
        sess: &Session,
        opt: &ForwardOptions,
        l_p: NodeId,
        l_e: NodeId,
        l_pe: NodeId,
        l_matrix: NodeId,
        l_mask: NodeId,
        total: NodeId,
    ) -> Result<LossBreakdown> {
        let b = LossBreakdown {
            l_p: sess.g.scalar(l_p),
            l_e: sess.g.scalar(l_e),
            l_pe: sess.g.scalar(l_pe),
            l_matrix: sess.g.scalar(l_matrix),
            l_mask: sess.g.scalar(l_mask),
            alpha: opt.weights[0],
            beta: opt.weights[1],
            gamma: opt.weights[2],
            delta: opt.weights[3],
            total: sess.g.scalar(total),
        };
        for (term, v) in [
            ("perceiving", b.l_p),
            ("excavating", b.l_e),
            ("excavating-cls", b.l_pe),
            ("matrix", b.l_matrix),
            ("mask", b.l_mask),
            ("total", b.total),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: opt.step,
                    term: term.to_owned(),
                    value: v,
                });
            }
        }
        Ok(b)
    }

    /// Inference: originals, mined, affinity-based merging, and one mask per
    /// merged group, upsampled bilinearly and binarized.
    pub fn infer(
        &self,
        store: &ParamStore,
        image: &Array3<f64>,
        image_id: u64,
        min_score: f64,
    ) -> Result<Vec<Detection>> {
        let (_, h, w) = image.dim();
        let mut sess = Session::new(store);
        let x = image_node(&mut sess, image)?;
        let pyr = self.backbone.forward(&mut sess, x, h, w);
        let maps = self.perceiver.perceive(&mut sess, &pyr);
        let fields = self.extractor.extract(&mut sess, &pyr);
        let mut set = select_original_descriptors(
            &mut sess.g,
            &maps,
            &fields,
            self.cfg.tau_conf,
            self.cfg.n_cap,
        );
        if set.items.is_empty() {
            return Ok(vec![]);
        }
        if self.cfg.enable_excavating {
            let originals: Vec<_> = set.items.clone();
            let mut all_minted = Vec::new();
            for d in &originals {
                let cm = self.excavator.excavate(
                    &mut sess,
                    pyr.stages[d.stage - 1],
                    d,
                    self.cfg.window_radius,
                    self.cfg.full_map_excavation,
                );
                let keys = extract_key_pixels(
                    sess.g.value(cm.node),
                    cm.window,
                    d.id,
                    self.cfg.tau_key,
                    self.cfg.k_max,
                );
                let grid = pyr.sizes[d.stage - 1];
                all_minted.extend(self.excavator.mint(&mut sess, d, &keys, grid));
            }
            append_mined(&mut set, all_minted, self.cfg.n_cap);
        }

        let basis = self.mask_head.general_features(&mut sess, &pyr);
        let upscaled_mask = |sess: &mut Session, d: &crate::semantics_perceiving::InstanceDescriptor|
            -> Result<Array2<bool>> {
            let m = render_mask(&mut sess.g, d, basis)?;
            let m3 = m_as_3d(&mut sess.g, m);
            let up = sess.g.resize_bilinear(m3, h, w);
            let v = sess.g.value(up);
            Ok(Array2::from_shape_fn((h, w), |(r, c)| {
                v[[0, r, c]] >= MASK_BINARIZE
            }))
        };

        let groups: Vec<Group> = if self.cfg.enable_purifying {
            let aff = self.purifier.affinity(&mut sess, &set, self.cfg.bias_self)?;
            let values = sess.g.value(aff).clone();
            purify(&set, &values, self.cfg.tau_merge)
        } else {
            // Fallback suppression: score-ranked masks, greedily kept while
            // they overlap every kept mask below NMS_IOU.
            let mut order: Vec<usize> = (0..set.items.len()).collect();
            order.sort_by(|&a, &b| {
                let da = &set.items[a];
                let db = &set.items[b];
                db.confidence
                    .partial_cmp(&da.confidence)
                    .unwrap()
                    .then_with(|| {
                        let rank = |p: Provenance| matches!(p, Provenance::Mined) as u8;
                        rank(da.provenance).cmp(&rank(db.provenance))
                    })
                    .then(a.cmp(&b))
            });
            let mut kept: Vec<(usize, Array2<bool>)> = Vec::new();
            for i in order {
                let mask = upscaled_mask(&mut sess, &set.items[i])?;
                let clashes = kept.iter().any(|(_, k)| {
                    crate::evaluation::mask_iou(k, &mask).map_or(false, |iou| iou >= NMS_IOU)
                });
                if !clashes {
                    kept.push((i, mask));
                }
            }
            kept.into_iter()
                .map(|(i, _)| Group {
                    members: vec![i],
                    representative: i,
                })
                .collect()
        };

        let mut detections = Vec::new();
        for group in &groups {
            let rep = &set.items[group.representative];
            let prob_node = if self.cfg.merge_average_masks && group.members.len() > 1 {
                let rendered: Vec<NodeId> = group
                    .members
                    .iter()
                    .map(|&i| render_mask(&mut sess.g, &set.items[i], basis))
                    .collect::<Result<_>>()?;
                let sum = sess.g.add_n(&rendered);
                sess.g.affine(sum, 1.0 / group.members.len() as f64, 0.0)
            } else {
                render_mask(&mut sess.g, rep, basis)?
            };
            let m3 = m_as_3d(&mut sess.g, prob_node);
            let up = sess.g.resize_bilinear(m3, h, w);
            let v = sess.g.value(up);
            let mask = Array2::from_shape_fn((h, w), |(r, c)| v[[0, r, c]] >= MASK_BINARIZE);
            if !mask.iter().any(|&b| b) {
                continue; // nothing crossed the binarization threshold
            }
            let score = group
                .members
                .iter()
                .map(|&i| set.items[i].confidence)
                .fold(f64::NEG_INFINITY, f64::max);
            if score < min_score {
                continue;
            }
            detections.push(Detection {
                image_id,
                class_id: rep.class_id,
                mask,
                score: score.clamp(0.0, 1.0),
            });
        }
        detections.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        Ok(detections)
    }
}

/// `[H, W]` node viewed as `[1, H, W]` so the bilinear resize applies.
fn m_as_3d(g: &mut crate::autodiff::Graph, m: NodeId) -> NodeId {
    let shape = g.value(m).shape().to_vec();
    debug_assert_eq!(shape.len(), 2);
    let v = g.value(m).clone();
    let reshaped = v
        .into_shape_with_order(IxDyn(&[1, shape[0], shape[1]]))
        .expect("mask is 2-d");
    // Inference-only path: no gradient flows through the binarized output,
    // so a constant copy is sound.
    g.constant(reshaped)
}

/// SGD with momentum, decoupled-by-name weight decay (".w" entries only),
/// step-decay schedule, and global-norm gradient clipping.
pub struct Sgd {
    velocity: IndexMap<String, ArrayD<f64>>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    decay_factor: f64,
    milestone_steps: Vec<usize>,
    clip: f64,
}

impl Sgd {
    pub fn new(t: &TrainConfig) -> Self {
        let milestone_steps = t
            .milestones
            .iter()
            .map(|&f| (f * t.steps as f64).round() as usize)
            .collect();
        Self {
            velocity: IndexMap::new(),
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            decay_factor: t.decay_factor,
            milestone_steps,
            clip: t.grad_clip_norm,
        }
    }

    /// Learning rate in effect at a 0-based step index.
    pub fn lr_at(&self, step: usize) -> f64 {
        let passed = self.milestone_steps.iter().filter(|&&m| step >= m).count();
        self.lr * self.decay_factor.powi(passed as i32)
    }

    /// One update from batch-mean gradients. Returns the pre-clip global
    /// gradient norm.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &IndexMap<String, ArrayD<f64>>,
        step_idx: usize,
    ) -> f64 {
        let norm: f64 = grads
            .values()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let scale = if norm > self.clip { self.clip / norm } else { 1.0 };
        let lr = self.lr_at(step_idx);
        for (name, grad) in grads {
            let current = store.value(name);
            let mut g = grad * scale;
            if name.ends_with(".w") && self.weight_decay > 0.0 {
                g = g + &*current * self.weight_decay;
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            *v = &*v * self.momentum + g;
            let updated = &*current - &(&*v * lr);
            store.set(name, updated);
        }
        norm
    }
}

#[derive(Debug)]
pub struct TrainReport {
    pub steps_run: usize,
    pub final_loss: f64,
    pub step10_loss: Option<f64>,
    pub skipped_scenes: usize,
    pub early_stopped: bool,
    pub checkpoint: PathBuf,
}

/// Decides teacher forcing for one batch item deterministically.
fn use_gt_locations(mode: TeacherForcing, step: usize, item: usize) -> bool {
    match mode {
        TeacherForcing::Mixed => (step + item) % 2 == 0,
        TeacherForcing::Predicted => false,
        TeacherForcing::GroundTruth => true,
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    config: &'a RunConfig,
    seed: u64,
    dataset_hash: Option<&'a str>,
    parameter_count: usize,
    scene_count: usize,
}

/// Full training loop. Scenes cycle in order; each batch item gets its own
/// graph; gradients are batch-means. Writes `manifest.json`, `train.log`,
/// periodic checkpoints, and a final `model.bin` under `out_dir`.
pub fn train(
    cfg: &RunConfig,
    scenes: &[Scene],
    dataset_hash: Option<&str>,
    out_dir: &Path,
) -> Result<TrainReport> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Dataset("training needs at least one scene".into()));
    }
    for scene in scenes {
        let (h, w) = scene.size();
        crate::backbone::Backbone::check_input(h, w)?;
        if h % cfg.model.mask_stride != 0 || w % cfg.model.mask_stride != 0 {
            return Err(Error::Dataset(format!(
                "scene {}: {h}x{w} not divisible by mask stride {}",
                scene.id, cfg.model.mask_stride
            )));
        }
        for inst in &scene.instances {
            if inst.class_id > cfg.model.num_classes {
                return Err(Error::Dataset(format!(
                    "scene {} uses class {} but the model has {} classes",
                    scene.id, inst.class_id, cfg.model.num_classes
                )));
            }
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::WriteFile {
        path: out_dir.to_path_buf(),
        source: e,
    })?;

    let (model, mut store) = PepModel::new(&cfg.model, cfg.train.seed);
    let manifest = RunManifest {
        config: cfg,
        seed: cfg.train.seed,
        dataset_hash,
        parameter_count: store.scalar_count(),
        scene_count: scenes.len(),
    };
    let mpath = out_dir.join("manifest.json");
    fs::write(
        &mpath,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| Error::WriteFile {
        path: mpath,
        source: e,
    })?;
    let log_path = out_dir.join("train.log");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::WriteFile {
            path: log_path.clone(),
            source: e,
        })?;

    let mut sgd = Sgd::new(&cfg.train);
    let t = &cfg.train;
    let mut skipped_scenes = 0usize;
    let mut step10_loss = None;
    let mut early_stopped = false;
    let mut steps_run = 0usize;
    let mut last_loss = f64::INFINITY;

    for step in 0..t.steps {
        let mut grads: IndexMap<String, ArrayD<f64>> = IndexMap::new();
        let mut mean = LossBreakdown {
            l_p: 0.0,
            l_e: 0.0,
            l_pe: 0.0,
            l_matrix: 0.0,
            l_mask: 0.0,
            alpha: t.alpha,
            beta: t.beta,
            gamma: t.gamma,
            delta: t.delta,
            total: 0.0,
        };
        for item in 0..t.batch_size {
            let scene = &scenes[(step * t.batch_size + item) % scenes.len()];
            let mut sess = Session::new(&store);
            let opt = ForwardOptions {
                weights: [t.alpha, t.beta, t.gamma, t.delta],
                norm: t.loss_norm,
                use_gt_locations: use_gt_locations(t.teacher_forcing, step, item),
                center_fraction: cfg.data.center_fraction,
                scale_ranges: cfg.data.scale_ranges,
                step,
            };
            let fwd = model.forward_scene(&mut sess, scene, &opt)?;
            if fwd.skipped {
                skipped_scenes += 1;
            }
            mean.l_p += fwd.breakdown.l_p;
            mean.l_e += fwd.breakdown.l_e;
            mean.l_pe += fwd.breakdown.l_pe;
            mean.l_matrix += fwd.breakdown.l_matrix;
            mean.l_mask += fwd.breakdown.l_mask;
            mean.total += fwd.breakdown.total;
            let g = sess.g.backward(fwd.total);
            for (name, node) in sess.bound() {
                if let Some(grad) = g.get(*node) {
                    match grads.get_mut(name) {
                        Some(acc) => *acc = &*acc + grad,
                        None => {
                            grads.insert(name.clone(), grad.clone());
                        }
                    }
                }
            }
        }
        let inv = 1.0 / t.batch_size as f64;
        for (name, g) in grads.iter_mut() {
            *g = &*g * inv;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    step,
                    term: format!("gradient of {name}"),
                    value: f64::NAN,
                });
            }
        }
        for f in [
            &mut mean.l_p,
            &mut mean.l_e,
            &mut mean.l_pe,
            &mut mean.l_matrix,
            &mut mean.l_mask,
            &mut mean.total,
        ] {
            *f *= inv;
        }
        let norm = sgd.step(&mut store, &grads, step);
        steps_run = step + 1;
        last_loss = mean.total;
        if step == 9 {
            step10_loss = Some(mean.total);
        }

        if steps_run % t.log_every == 0 || steps_run == t.steps {
            writeln!(
                log,
                "step={} lr={:.6} total={:.6} l_p={:.6} l_e={:.6} l_pe={:.6} l_matrix={:.6} l_mask={:.6} grad_norm={:.4} skipped={}",
                steps_run,
                sgd.lr_at(step),
                mean.total,
                mean.l_p,
                mean.l_e,
                mean.l_pe,
                mean.l_matrix,
                mean.l_mask,
                norm,
                skipped_scenes
            )
            .map_err(|e| Error::WriteFile {
                path: log_path.clone(),
                source: e,
            })?;
        }
        if t.checkpoint_every > 0 && steps_run % t.checkpoint_every == 0 && steps_run != t.steps {
            let path = out_dir.join(format!("ckpt_{steps_run}.bin"));
            checkpoint::save(&store, &cfg.model, &path)?;
        }

        // Early stop: cheap loss gate first, then a training-set AP check.
        if let (Some(ratio), Some(base)) = (t.early_stop_loss_ratio, step10_loss) {
            if steps_run >= t.early_stop_min_steps
                && steps_run % t.early_stop_every == 0
                && mean.total <= ratio * base
            {
                let mut dets = Vec::new();
                for scene in scenes {
                    dets.extend(model.infer(&store, &scene.image, scene.id, 0.0)?);
                }
                let report = evaluate(
                    &dets,
                    scenes,
                    cfg.model.num_classes,
                    cfg.eval.size_buckets,
                )?;
                if report.ap50.unwrap_or(0.0) >= t.early_stop_ap50 {
                    early_stopped = true;
                    writeln!(
                        log,
                        "step={} early_stop ap50={:.4} total={:.6}",
                        steps_run,
                        report.ap50.unwrap_or(0.0),
                        mean.total
                    )
                    .ok();
                    break;
                }
            }
        }
    }

    let checkpoint_path = out_dir.join("model.bin");
    checkpoint::save(&store, &cfg.model, &checkpoint_path)?;
    Ok(TrainReport {
        steps_run,
        final_loss: last_loss,
        step10_loss,
        skipped_scenes,
        early_stopped,
        checkpoint: checkpoint_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DataConfig;
    use crate::data::generate_scene;

    fn tiny_model_cfg() -> ModelConfig {
        ModelConfig {
            c_feat: 8,
            c_d: 8,
            c_b: 8,
            head_width: 8,
            excav_width: 8,
            window_radius: 4,
            ..ModelConfig::default()
        }
    }

    fn tiny_run_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model = tiny_model_cfg();
        cfg.train.batch_size = 2;
        cfg.train.steps = 3;
        cfg.train.log_every = 1;
        cfg.train.checkpoint_every = 1000;
        cfg
    }

    fn default_options(step: usize, gt: bool) -> ForwardOptions {
        ForwardOptions {
            weights: [1.0, 1.0, 1.0, 1.0],
            norm: LossNorm::Mean,
            use_gt_locations: gt,
            center_fraction: 0.2,
            scale_ranges: [16.0, 32.0, 64.0, 128.0],
            step,
        }
    }

    #[test]
    fn breakdown_total_matches_recomputation_exactly() {
        let cfg = tiny_model_cfg();
        let (model, store) = PepModel::new(&cfg, 7);
        let scene = generate_scene(&DataConfig::default(), 0);
        let mut sess = Session::new(&store);
        let fwd = model
            .forward_scene(&mut sess, &scene, &default_options(0, true))
            .unwrap();
        assert_eq!(fwd.breakdown.total, fwd.breakdown.recompute_total());
        assert_eq!(fwd.breakdown.total, sess.g.scalar(fwd.total));
        assert!(!fwd.skipped);
        assert!(fwd.set.n_ori > 0);
    }

    #[test]
    fn fresh_model_selects_nothing_and_skips_to_perceiving_loss() {
        // The classifier prior keeps every confidence near 0.01, far below
        // tau_conf, so predicted selection is empty at initialization.
        let cfg = tiny_model_cfg();
        let (model, store) = PepModel::new(&cfg, 8);
        let scene = generate_scene(&DataConfig::default(), 1);
        let mut sess = Session::new(&store);
        let fwd = model
            .forward_scene(&mut sess, &scene, &default_options(0, false))
            .unwrap();
        assert!(fwd.skipped);
        assert_eq!(fwd.breakdown.total, fwd.breakdown.l_p);
        assert_eq!(fwd.breakdown.l_e, 0.0);
        assert_eq!(fwd.breakdown.l_mask, 0.0);
    }

    #[test]
    fn ablation_switches_zero_their_terms() {
        let scene = generate_scene(&DataConfig::default(), 2);
        let mut cfg = tiny_model_cfg();
        cfg.enable_excavating = false;
        let (model, store) = PepModel::new(&cfg, 9);
        let mut sess = Session::new(&store);
        let fwd = model
            .forward_scene(&mut sess, &scene, &default_options(0, true))
            .unwrap();
        assert_eq!(fwd.breakdown.l_e, 0.0);
        assert_eq!(fwd.breakdown.l_pe, 0.0);
        assert!(fwd.mined.is_empty());
        assert!(fwd.set.n_mined == 0, "no mined descriptors without excavating");
        assert!(fwd.breakdown.l_matrix > 0.0, "purifying still on");

        let mut cfg = tiny_model_cfg();
        cfg.enable_purifying = false;
        let (model, store) = PepModel::new(&cfg, 9);
        let mut sess = Session::new(&store);
        let fwd = model
            .forward_scene(&mut sess, &scene, &default_options(0, true))
            .unwrap();
        assert_eq!(fwd.breakdown.l_matrix, 0.0);
        assert!(fwd.affinity.is_none());
    }

    #[test]
    fn lr_schedule_hits_the_documented_sequence() {
        let mut t = TrainConfig::default();
        t.steps = 2000;
        let sgd = Sgd::new(&t);
        assert_eq!(sgd.lr_at(0), 0.01);
        assert_eq!(sgd.lr_at(1499), 0.01);
        assert!((sgd.lr_at(1500) - 0.001).abs() < 1e-15);
        assert!((sgd.lr_at(1839) - 0.001).abs() < 1e-15);
        assert!((sgd.lr_at(1840) - 0.0001).abs() < 1e-15);
        assert!((sgd.lr_at(1999) - 0.0001).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_touches_weights_but_not_biases() {
        let mut t = TrainConfig::default();
        t.weight_decay = 0.1;
        t.lr = 1.0;
        t.momentum = 0.0;
        t.steps = 10;
        t.milestones = vec![];
        let mut sgd = Sgd::new(&t);
        let mut store = ParamStore::new();
        store.register("x.w", ArrayD::from_elem(IxDyn(&[2]), 1.0));
        store.register("x.b", ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let mut grads = IndexMap::new();
        grads.insert("x.w".to_owned(), ArrayD::zeros(IxDyn(&[2])));
        grads.insert("x.b".to_owned(), ArrayD::zeros(IxDyn(&[2])));
        sgd.step(&mut store, &grads, 0);
        assert!((store.value("x.w")[[0]] - 0.9).abs() < 1e-12);
        assert_eq!(store.value("x.b")[[0]], 1.0);
    }

    #[test]
    fn gradient_clipping_bounds_the_applied_norm() {
        let mut t = TrainConfig::default();
        t.weight_decay = 0.0;
        t.momentum = 0.0;
        t.lr = 1.0;
        t.grad_clip_norm = 1.0;
        t.milestones = vec![];
        t.steps = 10;
        let mut sgd = Sgd::new(&t);
        let mut store = ParamStore::new();
        store.register("x.w", ArrayD::zeros(IxDyn(&[4])));
        let mut grads = IndexMap::new();
        grads.insert("x.w".to_owned(), ArrayD::from_elem(IxDyn(&[4]), 100.0));
        let norm = sgd.step(&mut store, &grads, 0);
        assert!(norm > 1.0);
        let applied: f64 = store.value("x.w").iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((applied - 1.0).abs() < 1e-9, "update norm {applied}");
    }

    #[test]
    fn one_small_step_descends_on_most_seeds() {
        let data_cfg = DataConfig::default();
        let scene = generate_scene(&data_cfg, 3);
        let mut wins = 0;
        for seed in 0..10u64 {
            let cfg = tiny_model_cfg();
            let (model, mut store) = PepModel::new(&cfg, seed);
            let opt = default_options(0, true);
            let before = {
                let mut sess = Session::new(&store);
                let fwd = model.forward_scene(&mut sess, &scene, &opt).unwrap();
                let g = sess.g.backward(fwd.total);
                let mut grads = IndexMap::new();
                for (name, node) in sess.bound() {
                    if let Some(grad) = g.get(*node) {
                        grads.insert(name.clone(), grad.clone());
                    }
                }
                let mut t = TrainConfig::default();
                t.lr = 1e-4;
                t.momentum = 0.0;
                t.weight_decay = 0.0;
                t.milestones = vec![];
                t.steps = 1;
                let mut sgd = Sgd::new(&t);
                sgd.step(&mut store, &grads, 0);
                fwd.breakdown.total
            };
            let after = {
                let mut sess = Session::new(&store);
                model
                    .forward_scene(&mut sess, &scene, &opt)
                    .unwrap()
                    .breakdown
                    .total
            };
            if after < before {
                wins += 1;
            }
        }
        assert!(wins >= 9, "descent on {wins}/10 seeds");
    }

    #[test]
    fn training_is_deterministic_for_a_fixed_seed() {
        let data_cfg = DataConfig::default();
        let scenes: Vec<Scene> = (0..2).map(|i| generate_scene(&data_cfg, i)).collect();
        let run = || {
            let dir = tempfile::tempdir().unwrap();
            let report = train(&tiny_run_cfg(), &scenes, None, dir.path()).unwrap();
            let bytes = fs::read(dir.path().join("model.bin")).unwrap();
            (report.final_loss, bytes)
        };
        let (l1, b1) = run();
        let (l2, b2) = run();
        assert_eq!(l1, l2);
        assert_eq!(b1, b2);
    }

    #[test]
    fn train_writes_manifest_log_and_checkpoint() {
        let data_cfg = DataConfig::default();
        let scenes: Vec<Scene> = (0..2).map(|i| generate_scene(&data_cfg, i)).collect();
        let dir = tempfile::tempdir().unwrap();
        let report = train(&tiny_run_cfg(), &scenes, Some("abc123"), dir.path()).unwrap();
        assert_eq!(report.steps_run, 3);
        let manifest = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        assert!(manifest.contains("\"momentum\": 0.9"));
        assert!(manifest.contains("\"weight_decay\": 0.0001"));
        assert!(manifest.contains("abc123"));
        let log = fs::read_to_string(dir.path().join("train.log")).unwrap();
        assert_eq!(log.lines().count(), 3, "one line per step at log_every=1");
        assert!(log.lines().next().unwrap().contains("l_matrix="));
        assert!(report.checkpoint.exists());
        let (model2, store2) = PepModel::from_checkpoint(&report.checkpoint).unwrap();
        assert_eq!(model2.cfg.c_feat, 8);
        assert!(store2.scalar_count() > 0);
    }

    #[test]
    fn infer_finds_nothing_when_the_classifier_sits_at_its_prior() {
        // Zeroed head weights leave the class logits at their biases, so
        // every foreground probability is the 0.01 prior, below tau_conf.
        let cfg = tiny_model_cfg();
        let (model, mut store) = PepModel::new(&cfg, 11);
        let names: Vec<String> = store.names().map(str::to_owned).collect();
        for name in names {
            if name.starts_with("perceive.") && name.ends_with(".w") {
                let shape = store.value(&name).shape().to_vec();
                store.set(&name, ArrayD::zeros(IxDyn(&shape)));
            }
        }
        let blank = Array3::from_elem((3, 64, 64), 0.9);
        let dets = model.infer(&store, &blank, 0, 0.0).unwrap();
        assert!(dets.is_empty());
    }

    #[test]
    fn class_count_mismatch_is_a_dataset_error() {
        let mut scene = generate_scene(&DataConfig::default(), 4);
        scene.instances[0].class_id = 7;
        let dir = tempfile::tempdir().unwrap();
        let err = train(&tiny_run_cfg(), &[scene], None, dir.path()).unwrap_err();
        assert!(matches!(err, Error::Dataset(_)));
    }

    #[test]
    fn poisoned_parameters_name_the_offending_term() {
        let cfg = tiny_model_cfg();
        let (model, mut store) = PepModel::new(&cfg, 12);
        let shape = store.value("perceive.cls.w").shape().to_vec();
        store.set("perceive.cls.w", ArrayD::from_elem(IxDyn(&shape), f64::NAN));
        let scene = generate_scene(&DataConfig::default(), 5);
        let mut sess = Session::new(&store);
        let err = match model.forward_scene(&mut sess, &scene, &default_options(3, true)) {
            Ok(_) => panic!("NaN parameters must not produce a finite loss"),
            Err(e) => e,
        };
        match err {
            Error::NonFiniteLoss { step, term, .. } => {
                assert_eq!(step, 3);
                assert_eq!(term, "perceiving");
            }
            other => panic!("expected non-finite loss, got {other:?}"),
        }
    }
}
