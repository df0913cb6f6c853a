//! Ground-truth scenes and every supervision target: semantic maps, window
//! center maps, affinity targets, mask targets, and the descriptor-instance
//! assignment they all share.

use ndarray::{Array2, Array3, ArrayD, IxDyn};

use crate::backbone::{Pyramid, STAGES};
use crate::semantics_perceiving::DescriptorSet;

/// One ground-truth object.
#[derive(Debug, Clone)]
pub struct GtInstance {
    /// Foreground class, 1-based.
    pub class_id: usize,
    /// Occlusion-clipped mask; the supervision source.
    pub visible_mask: Array2<bool>,
    /// Pre-occlusion mask, kept for dataset inspection.
    pub full_mask: Array2<bool>,
    /// Mass center of the visible mask, (row, col) in image coordinates.
    pub center: (f64, f64),
    /// Inclusive pixel bounds of the visible mask: (r0, c0, r1, c1).
    pub bbox: (usize, usize, usize, usize),
}

impl GtInstance {
    /// Builds an instance from its masks; `None` when nothing is visible.
    pub fn new(class_id: usize, visible_mask: Array2<bool>, full_mask: Array2<bool>) -> Option<Self> {
        assert!(class_id >= 1, "class ids are 1-based; 0 is background");
        let mut count = 0usize;
        let (mut sr, mut sc) = (0.0f64, 0.0f64);
        let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0usize, 0usize);
        for ((r, c), &on) in visible_mask.indexed_iter() {
            if !on {
                continue;
            }
            count += 1;
            sr += r as f64 + 0.5;
            sc += c as f64 + 0.5;
            r0 = r0.min(r);
            c0 = c0.min(c);
            r1 = r1.max(r);
            c1 = c1.max(c);
        }
        if count == 0 {
            return None;
        }
        Some(Self {
            class_id,
            visible_mask,
            full_mask,
            center: (sr / count as f64, sc / count as f64),
            bbox: (r0, c0, r1, c1),
        })
    }

    pub fn area(&self) -> usize {
        self.visible_mask.iter().filter(|&&b| b).count()
    }

    /// True when an image-coordinate point lies in the central `fraction` of
    /// the instance's bounding box, centered on its mass center.
    pub fn in_center_region(&self, point: (f64, f64), fraction: f64) -> bool {
        let (r0, c0, r1, c1) = self.bbox;
        let half_h = (r1 + 1 - r0) as f64 * fraction * 0.5;
        let half_w = (c1 + 1 - c0) as f64 * fraction * 0.5;
        (point.0 - self.center.0).abs() <= half_h && (point.1 - self.center.1).abs() <= half_w
    }
}

/// An image with its ground truth.
#[derive(Debug, Clone)]
pub struct Scene {
    pub id: u64,
    /// `[3, H, W]`, values in [0, 1].
    pub image: Array3<f64>,
    pub instances: Vec<GtInstance>,
}

impl Scene {
    pub fn size(&self) -> (usize, usize) {
        let (_, h, w) = self.image.dim();
        (h, w)
    }
}

/// Center of grid cell (r, c) in image coordinates.
pub fn cell_center(r: usize, c: usize, stride: usize) -> (f64, f64) {
    (
        (r as f64 + 0.5) * stride as f64,
        (c as f64 + 0.5) * stride as f64,
    )
}

/// Grid cell containing an image-coordinate point, clamped to the grid.
pub fn containing_cell(point: (f64, f64), stride: usize, size: (usize, usize)) -> (usize, usize) {
    let r = (point.0 / stride as f64).floor().max(0.0) as usize;
    let c = (point.1 / stride as f64).floor().max(0.0) as usize;
    (r.min(size.0 - 1), c.min(size.1 - 1))
}

/// Stage (1-based) an instance is supervised at: the first stage whose
/// sqrt-area upper bound admits it, the coarsest stage otherwise.
pub fn route_stage(instance: &GtInstance, scale_ranges: &[f64; 4]) -> usize {
    let scale = (instance.area() as f64).sqrt();
    for (i, &bound) in scale_ranges.iter().enumerate() {
        if scale < bound {
            return i + 1;
        }
    }
    STAGES
}

/// Descriptor index -> instance index (into `Scene::instances`) or none.
#[derive(Debug, Clone, Default)]
pub struct Assignment {
    pub map: Vec<Option<usize>>,
}

/// Matches descriptors to instances by center-region containment, nearest
/// instance center winning when regions overlap. The cell holding an
/// instance's center always counts as inside, so tiny instances whose scaled
/// region collapses below one cell remain assignable.
pub fn assign_descriptors(
    set: &DescriptorSet,
    scene: &Scene,
    center_fraction: f64,
) -> Assignment {
    let map = set
        .items
        .iter()
        .map(|d| {
            let stride = Pyramid::stride(d.stage - 1);
            let point = cell_center(d.location.0, d.location.1, stride);
            let mut best: Option<(f64, usize)> = None;
            for (k, inst) in scene.instances.iter().enumerate() {
                let center_cell = containing_cell(inst.center, stride, grid_size_for(scene, stride));
                let inside = inst.in_center_region(point, center_fraction)
                    || center_cell == d.location;
                if !inside {
                    continue;
                }
                let dist = (point.0 - inst.center.0).hypot(point.1 - inst.center.1);
                if best.map_or(true, |(bd, _)| dist < bd) {
                    best = Some((dist, k));
                }
            }
            best.map(|(_, k)| k)
        })
        .collect();
    Assignment { map }
}

fn grid_size_for(scene: &Scene, stride: usize) -> (usize, usize) {
    let (h, w) = scene.size();
    (h.div_ceil(stride), w.div_ceil(stride))
}

/// One-hot semantic target per stage: each instance labels the grid cells of
/// its center region at its routed stage; nearest center wins contested
/// cells; everything else is background (channel 0).
pub fn build_semantic_targets(
    scene: &Scene,
    sizes: &[(usize, usize); STAGES],
    c_p: usize,
    center_fraction: f64,
    scale_ranges: &[f64; 4],
) -> [ArrayD<f64>; STAGES] {
    std::array::from_fn(|s| {
        let (h, w) = sizes[s];
        let stride = Pyramid::stride(s);
        let mut target = ArrayD::zeros(IxDyn(&[c_p, h, w]));
        for r in 0..h {
            for c in 0..w {
                let point = cell_center(r, c, stride);
                let mut best: Option<(f64, usize)> = None;
                for inst in &scene.instances {
                    if route_stage(inst, scale_ranges) != s + 1 {
                        continue;
                    }
                    let center_cell = containing_cell(inst.center, stride, (h, w));
                    let inside =
                        inst.in_center_region(point, center_fraction) || center_cell == (r, c);
                    if !inside {
                        continue;
                    }
                    let dist = (point.0 - inst.center.0).hypot(point.1 - inst.center.1);
                    if best.map_or(true, |(bd, _)| dist < bd) {
                        best = Some((dist, inst.class_id));
                    }
                }
                match best {
                    Some((_, class_id)) => target[[class_id, r, c]] = 1.0,
                    None => target[[0, r, c]] = 1.0,
                }
            }
        }
        target
    })
}

/// Geometry of one excavation window in a stage grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub origin: (usize, usize),
    pub rows: usize,
    pub cols: usize,
}

impl Window {
    /// Radius-`r` Chebyshev window around `center`, clipped to the grid.
    pub fn around(center: (usize, usize), radius: usize, grid: (usize, usize)) -> Self {
        let r0 = center.0.saturating_sub(radius);
        let c0 = center.1.saturating_sub(radius);
        let r1 = (center.0 + radius).min(grid.0 - 1);
        let c1 = (center.1 + radius).min(grid.1 - 1);
        Self {
            origin: (r0, c0),
            rows: r1 - r0 + 1,
            cols: c1 - c0 + 1,
        }
    }

    pub fn contains(&self, cell: (usize, usize)) -> bool {
        cell.0 >= self.origin.0
            && cell.0 < self.origin.0 + self.rows
            && cell.1 >= self.origin.1
            && cell.1 < self.origin.1 + self.cols
    }
}

/// Binary window map marking neighbor-instance centers: 1 where some
/// instance's center cell falls, excluding (by default) the instance already
/// assigned to the source descriptor.
pub fn build_center_target(
    scene: &Scene,
    stage: usize,
    window: Window,
    assigned_instance: Option<usize>,
    include_source_center: bool,
) -> ArrayD<f64> {
    let stride = Pyramid::stride(stage - 1);
    let grid = grid_size_for(scene, stride);
    let mut target = ArrayD::zeros(IxDyn(&[window.rows, window.cols]));
    for (k, inst) in scene.instances.iter().enumerate() {
        if Some(k) == assigned_instance && !include_source_center {
            continue;
        }
        let cell = containing_cell(inst.center, stride, grid);
        if window.contains(cell) {
            target[[cell.0 - window.origin.0, cell.1 - window.origin.1]] = 1.0;
        }
    }
    target
}

/// Downsampled binary mask for each assigned descriptor; `None` for
/// unassigned ones (they carry no mask supervision).
pub fn build_mask_targets(
    assignment: &Assignment,
    scene: &Scene,
    mask_size: (usize, usize),
) -> Vec<Option<ArrayD<f64>>> {
    assignment
        .map
        .iter()
        .map(|assigned| {
            assigned.map(|k| downsample_mask(&scene.instances[k].visible_mask, mask_size))
        })
        .collect()
}

/// Majority-area downsampling: an output cell is 1 iff the mask covers more
/// than half of the corresponding input block.
pub fn downsample_mask(mask: &Array2<bool>, out_size: (usize, usize)) -> ArrayD<f64> {
    let (h, w) = mask.dim();
    let (oh, ow) = out_size;
    assert!(
        h % oh == 0 && w % ow == 0,
        "mask {h}x{w} not divisible by target {oh}x{ow}"
    );
    let (fr, fc) = (h / oh, w / ow);
    let mut out = ArrayD::zeros(IxDyn(&[oh, ow]));
    for i in 0..oh {
        for j in 0..ow {
            let mut covered = 0usize;
            for r in i * fr..(i + 1) * fr {
                for c in j * fc..(j + 1) * fc {
                    covered += mask[[r, c]] as usize;
                }
            }
            if 2 * covered > fr * fc {
                out[[i, j]] = 1.0;
            }
        }
    }
    out
}

/// Same-instance indicator over descriptors: `G[i][j] = 1` iff both map to
/// the same instance; unassigned descriptors are singletons. Always an
/// equivalence-relation indicator.
pub fn build_affinity_target(assignment: &Assignment) -> Array2<f64> {
    let n = assignment.map.len();
    let mut g = Array2::zeros((n, n));
    for i in 0..n {
        g[[i, i]] = 1.0;
        for j in i + 1..n {
            if let (Some(a), Some(b)) = (assignment.map[i], assignment.map[j]) {
                if a == b {
                    g[[i, j]] = 1.0;
                    g[[j, i]] = 1.0;
                }
            }
        }
    }
    g
}
