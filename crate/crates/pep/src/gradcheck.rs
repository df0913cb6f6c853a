//! Finite-difference verification of the analytic gradients behind every
//! loss term. Each parameter tensor is probed at its largest-gradient
//! entries with central differences on a micro model; a sabotage mode
//! negates the analytic values so the harness can prove it would catch a
//! broken backward pass.

use ndarray::ArrayD;

use crate::config::{DataConfig, LossNorm, ModelConfig};
use crate::data::generate_scene;
use crate::error::Result;
use crate::params::{ParamStore, Session};
use crate::supervision::Scene;
use crate::training::{ForwardOptions, PepModel};

pub const FD_STEP: f64 = 1e-4;
pub const REL_FLOOR: f64 = 1e-4;
/// Maximum accepted relative error between analytic and FD gradients.
pub const GRAD_TOL: f64 = 1e-4;
/// Entries probed per parameter tensor, largest analytic magnitude first.
const PROBES_PER_TENSOR: usize = 2;

pub const TERM_NAMES: [&str; 5] =
    ["perceiving", "excavating", "excavating-cls", "matrix", "mask"];

#[derive(Debug, Clone)]
pub struct TermReport {
    pub term: &'static str,
    pub max_rel_err: f64,
    pub probes: usize,
}

impl TermReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= GRAD_TOL
    }
}

/// Model small enough for thousands of finite-difference forwards. tau_key 0
/// turns every window maximum into a key pixel so the mined-classification
/// and affinity paths stay populated.
fn micro_model() -> ModelConfig {
    ModelConfig {
        c_feat: 6,
        c_d: 6,
        c_b: 6,
        head_width: 6,
        excav_width: 6,
        window_radius: 2,
        k_max: 2,
        tau_key: 0.0,
        ..ModelConfig::default()
    }
}

fn micro_scene() -> Scene {
    let cfg = DataConfig {
        image_size: 64,
        min_instances: 2,
        max_instances: 3,
        overlap_bias: 0.5,
        seed: 5,
        ..DataConfig::default()
    };
    generate_scene(&cfg, 0)
}

fn options() -> ForwardOptions {
    ForwardOptions {
        weights: [1.0, 1.0, 1.0, 1.0],
        norm: LossNorm::Mean,
        use_gt_locations: true,
        center_fraction: 0.2,
        scale_ranges: [16.0, 32.0, 64.0, 128.0],
        step: 0,
    }
}

fn term_value(model: &PepModel, store: &ParamStore, scene: &Scene, term: usize) -> Result<f64> {
    let mut sess = Session::new(store);
    let fwd = model.forward_scene(&mut sess, scene, &options())?;
    Ok(match term {
        0 => fwd.breakdown.l_p,
        1 => fwd.breakdown.l_e,
        2 => fwd.breakdown.l_pe,
        3 => fwd.breakdown.l_matrix,
        4 => fwd.breakdown.l_mask,
        _ => unreachable!("five loss terms"),
    })
}

/// Checks one loss term (index into [`TERM_NAMES`]) against central
/// differences over every parameter tensor.
pub fn check_term(term: usize, sabotage: bool) -> Result<TermReport> {
    let (model, store) = PepModel::new(&micro_model(), 17);
    let scene = micro_scene();

    let mut analytic: Vec<(String, ArrayD<f64>)> = Vec::new();
    {
        let mut sess = Session::new(&store);
        let fwd = model.forward_scene(&mut sess, &scene, &options())?;
        let grads = sess.g.backward(fwd.loss_nodes[term]);
        for (name, node) in sess.bound() {
            let g = grads
                .get(*node)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(store.value(name).raw_dim()));
            analytic.push((name.clone(), g));
        }
    }

    let mut max_rel_err = 0.0f64;
    let mut probes = 0usize;
    for (name, grad) in &analytic {
        let flat: Vec<f64> = grad.iter().copied().collect();
        let mut order: Vec<usize> = (0..flat.len()).collect();
        order.sort_by(|&a, &b| {
            flat[b]
                .abs()
                .partial_cmp(&flat[a].abs())
                .unwrap()
                .then(a.cmp(&b))
        });
        for &idx in order.iter().take(PROBES_PER_TENSOR) {
            let base = store.value(name);
            let probe = |delta: f64| -> Result<f64> {
                let mut bumped = (*base).clone();
                bumped.as_slice_mut().expect("standard layout")[idx] += delta;
                let mut st = store.clone();
                st.set(name, bumped);
                term_value(&model, &st, &scene, term)
            };
            let fd = (probe(FD_STEP)? - probe(-FD_STEP)?) / (2.0 * FD_STEP);
            let an = if sabotage { -flat[idx] } else { flat[idx] };
            let rel = (fd - an).abs() / REL_FLOOR.max(fd.abs()).max(an.abs());
            max_rel_err = max_rel_err.max(rel);
            probes += 1;
        }
    }
    Ok(TermReport {
        term: TERM_NAMES[term],
        max_rel_err,
        probes,
    })
}

/// Checks all five loss terms. With `sabotage` the analytic gradients are
/// negated, so a correct harness reports failures.
pub fn run(sabotage: bool) -> Result<Vec<TermReport>> {
    (0..TERM_NAMES.len())
        .map(|t| check_term(t, sabotage))
        .collect()
}
