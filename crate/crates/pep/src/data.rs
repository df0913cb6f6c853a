//! Synthetic overlapping-shapes scenes and a COCO-annotation-format loader.
//!
//! The generator exists to manufacture the hard case on purpose: shapes of
//! the same class stacked next to and on top of each other, with both the
//! occlusion-clipped visible mask and the full mask kept per instance.
//!
//! Persisted datasets are a directory of PNGs plus `annotations.json` in
//! COCO structure (polygon segmentation only). Masks round-trip exactly:
//! boundaries are traced along pixel edges and rasterized back by even-odd
//! parity at pixel centers.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::supervision::{GtInstance, Scene};

pub const ANNOTATION_FILE: &str = "annotations.json";
pub const CLASS_NAMES: [&str; 3] = ["circle", "square", "triangle"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    fn class_id(self) -> usize {
        match self {
            ShapeKind::Circle => 1,
            ShapeKind::Square => 2,
            ShapeKind::Triangle => 3,
        }
    }

    fn base_color(self) -> [f64; 3] {
        match self {
            ShapeKind::Circle => [0.80, 0.22, 0.20],
            ShapeKind::Square => [0.20, 0.68, 0.28],
            ShapeKind::Triangle => [0.22, 0.32, 0.80],
        }
    }
}

/// A placed shape before occlusion. `center` is (x, y) in image coordinates,
/// `size` its half-extent (circle radius, square half-side, triangle
/// half-height).
struct Shape {
    kind: ShapeKind,
    center: (f64, f64),
    size: f64,
    color: [f64; 3],
}

impl Shape {
    fn covers(&self, r: usize, c: usize) -> bool {
        let (px, py) = (c as f64 + 0.5, r as f64 + 0.5);
        let (cx, cy) = self.center;
        let s = self.size;
        match self.kind {
            ShapeKind::Circle => (px - cx).powi(2) + (py - cy).powi(2) <= s * s,
            ShapeKind::Square => (px - cx).abs() <= s && (py - cy).abs() <= s,
            ShapeKind::Triangle => {
                let verts = [(cx, cy - s), (cx - s, cy + s), (cx + s, cy + s)];
                point_in_loops(&[verts.iter().flat_map(|&(x, y)| [x, y]).collect()], px, py)
            }
        }
    }

    fn full_mask(&self, h: usize, w: usize) -> Array2<bool> {
        Array2::from_shape_fn((h, w), |(r, c)| self.covers(r, c))
    }

    /// Conservative axis-aligned bounds, (x0, y0, x1, y1).
    fn bounds(&self) -> (f64, f64, f64, f64) {
        let (cx, cy) = self.center;
        let s = self.size;
        (cx - s, cy - s, cx + s, cy + s)
    }
}

fn bounds_intersect(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> bool {
    a.0 <= b.2 && b.0 <= a.2 && a.1 <= b.3 && b.1 <= a.3
}

fn scene_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 of the pair, so scenes are independently seeded and a
    // parallel prefetcher cannot change content.
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One synthetic scene, deterministic in (config seed, index). Later shapes
/// occlude earlier ones; instances whose visible mask vanishes are dropped.
pub fn generate_scene(cfg: &DataConfig, index: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(cfg.seed, index));
    let side = cfg.image_size;
    let n_target = rng.gen_range(cfg.min_instances..=cfg.max_instances);

    let smin = (side as f64 / 10.0).max(4.0);
    let smax = side as f64 / 5.0;
    let mut shapes: Vec<Shape> = Vec::new();
    for _ in 0..n_target {
        let kind = match rng.gen_range(0..3) {
            0 => ShapeKind::Circle,
            1 => ShapeKind::Square,
            _ => ShapeKind::Triangle,
        };
        let size = rng.gen_range(smin..smax);
        let margin = size + 1.0;
        let lo = margin;
        let hi = side as f64 - margin;
        if hi <= lo {
            continue;
        }
        let base = kind.base_color();
        let color = [
            (base[0] + rng.gen_range(-0.08..0.08)).clamp(0.05, 0.95),
            (base[1] + rng.gen_range(-0.08..0.08)).clamp(0.05, 0.95),
            (base[2] + rng.gen_range(-0.08..0.08)).clamp(0.05, 0.95),
        ];
        let overlap = !shapes.is_empty() && rng.gen_bool(cfg.overlap_bias);
        let mut placed = None;
        if overlap {
            let t = rng.gen_range(0..shapes.len());
            let (tx, ty) = shapes[t].center;
            let reach = 0.8 * (shapes[t].size + size);
            for _ in 0..40 {
                let cx = (tx + rng.gen_range(-reach..reach)).clamp(lo, hi);
                let cy = (ty + rng.gen_range(-reach..reach)).clamp(lo, hi);
                let cand = Shape { kind, center: (cx, cy), size, color };
                if bounds_intersect(cand.bounds(), shapes[t].bounds()) {
                    placed = Some(cand);
                    break;
                }
            }
            if placed.is_none() {
                // Coincident centers always intersect, even after clamping.
                let cx = tx.clamp(lo, hi);
                let cy = ty.clamp(lo, hi);
                placed = Some(Shape { kind, center: (cx, cy), size, color });
            }
        } else {
            for _ in 0..60 {
                let cx = rng.gen_range(lo..hi);
                let cy = rng.gen_range(lo..hi);
                let cand = Shape { kind, center: (cx, cy), size, color };
                if shapes.iter().all(|s| !bounds_intersect(cand.bounds(), s.bounds())) {
                    placed = Some(cand);
                    break;
                }
            }
            // Retries exhausted: drop the instance rather than violate the
            // disjointness the caller asked for.
        }
        if let Some(s) = placed {
            shapes.push(s);
        }
    }

    let full_masks: Vec<Array2<bool>> = shapes.iter().map(|s| s.full_mask(side, side)).collect();

    // Z-order: the last shape covering a pixel owns it.
    let mut owner: Array2<Option<usize>> = Array2::from_elem((side, side), None);
    for (i, m) in full_masks.iter().enumerate() {
        for ((r, c), &on) in m.indexed_iter() {
            if on {
                owner[[r, c]] = Some(i);
            }
        }
    }

    let mut image = Array3::from_elem((3, side, side), 0.92);
    for ((r, c), &own) in owner.indexed_iter() {
        if let Some(i) = own {
            for ch in 0..3 {
                image[[ch, r, c]] = shapes[i].color[ch];
            }
        }
    }
    for v in image.iter_mut() {
        *v = (*v + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0);
    }

    let instances = shapes
        .iter()
        .enumerate()
        .filter_map(|(i, s)| {
            let visible = Array2::from_shape_fn((side, side), |(r, c)| owner[[r, c]] == Some(i));
            GtInstance::new(s.kind.class_id(), visible, full_masks[i].clone())
        })
        .collect();

    Scene {
        id: index,
        image,
        instances,
    }
}

pub fn generate_dataset(cfg: &DataConfig, count: usize) -> Vec<Scene> {
    (0..count as u64).map(|i| generate_scene(cfg, i)).collect()
}

// COCO-structure annotation schema. `segmentation` stays a raw value so an
// RLE object can be detected and rejected by annotation id.

#[derive(Serialize, Deserialize)]
struct CocoRoot {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u32,
    segmentation: serde_json::Value,
    area: f64,
    bbox: [f64; 4],
    iscrowd: u8,
}

#[derive(Serialize, Deserialize)]
struct CocoCategory {
    id: u32,
    name: String,
}

/// Boundary loops of a binary mask, traced along pixel edges, each loop a
/// flat [x0, y0, x1, y1, ...] in image coordinates. Rasterizing them back
/// with even-odd parity at pixel centers reproduces the mask exactly.
pub fn mask_to_polygons(mask: &Array2<bool>) -> Vec<Vec<f64>> {
    let (h, w) = mask.dim();
    let at = |r: isize, c: isize| -> bool {
        r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && mask[[r as usize, c as usize]]
    };
    // Directed boundary edges on the corner grid: each side of a set pixel
    // whose neighbor is clear, oriented clockwise around the pixel. In/out
    // degrees match at every vertex, so greedy chaining closes loops.
    let mut out: BTreeMap<(u32, u32), Vec<(u32, u32)>> = BTreeMap::new();
    let mut push = |a: (u32, u32), b: (u32, u32)| out.entry(a).or_default().push(b);
    for r in 0..h {
        for c in 0..w {
            if !mask[[r, c]] {
                continue;
            }
            let (ri, ci) = (r as isize, c as isize);
            let (x, y) = (c as u32, r as u32);
            if !at(ri - 1, ci) {
                push((x, y), (x + 1, y));
            }
            if !at(ri, ci + 1) {
                push((x + 1, y), (x + 1, y + 1));
            }
            if !at(ri + 1, ci) {
                push((x + 1, y + 1), (x, y + 1));
            }
            if !at(ri, ci - 1) {
                push((x, y + 1), (x, y));
            }
        }
    }
    for targets in out.values_mut() {
        targets.sort_unstable();
    }
    let mut loops = Vec::new();
    let starts: Vec<(u32, u32)> = out.keys().copied().collect();
    for start in starts {
        while out.get(&start).is_some_and(|t| !t.is_empty()) {
            let mut path: Vec<(u32, u32)> = vec![start];
            let mut cur = start;
            loop {
                let next = out.get_mut(&cur).expect("edge chain stays balanced").remove(0);
                if next == start {
                    break;
                }
                path.push(next);
                cur = next;
            }
            loops.push(simplify_loop(path));
        }
    }
    loops
        .into_iter()
        .map(|l| l.into_iter().flat_map(|(x, y)| [f64::from(x), f64::from(y)]).collect())
        .collect()
}

/// Drops intermediate vertices on straight runs.
fn simplify_loop(path: Vec<(u32, u32)>) -> Vec<(u32, u32)> {
    let n = path.len();
    let mut keep = Vec::with_capacity(n);
    for i in 0..n {
        let prev = path[(i + n - 1) % n];
        let here = path[i];
        let next = path[(i + 1) % n];
        let d1 = (here.0 as i64 - prev.0 as i64, here.1 as i64 - prev.1 as i64);
        let d2 = (next.0 as i64 - here.0 as i64, next.1 as i64 - here.1 as i64);
        if d1.0 * d2.1 != d1.1 * d2.0 {
            keep.push(here);
        }
    }
    keep
}

/// Even-odd parity over all loops at point (px, py).
fn point_in_loops(loops: &[Vec<f64>], px: f64, py: f64) -> bool {
    let mut inside = false;
    for l in loops {
        let n = l.len() / 2;
        for i in 0..n {
            let (x1, y1) = (l[2 * i], l[2 * i + 1]);
            let j = (i + 1) % n;
            let (x2, y2) = (l[2 * j], l[2 * j + 1]);
            if (y1 > py) != (y2 > py) {
                let xi = x1 + (py - y1) * (x2 - x1) / (y2 - y1);
                if px < xi {
                    inside = !inside;
                }
            }
        }
    }
    inside
}

/// Even-odd rasterization at pixel centers.
pub fn rasterize_polygons(loops: &[Vec<f64>], h: usize, w: usize) -> Array2<bool> {
    Array2::from_shape_fn((h, w), |(r, c)| {
        point_in_loops(loops, c as f64 + 0.5, r as f64 + 0.5)
    })
}

fn image_file_name(id: u64) -> String {
    format!("img_{id:05}.png")
}

pub(crate) fn encode_image(image: &Array3<f64>, path: &Path) -> Result<()> {
    let (_, h, w) = image.dim();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        let (r, c) = (y as usize, x as usize);
        for ch in 0..3 {
            px.0[ch] = (image[[ch, r, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub(crate) fn decode_image(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            out[[ch, y as usize, x as usize]] = f64::from(px.0[ch]) / 255.0;
        }
    }
    Ok(out)
}

/// Writes scenes as PNGs plus one COCO-structure annotation file. Visible
/// masks become polygon segmentations; full masks are not persisted.
pub fn save_dataset(scenes: &[Scene], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::WriteFile {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut next_ann = 1u64;
    for scene in scenes {
        let (h, w) = scene.size();
        let file_name = image_file_name(scene.id);
        encode_image(&scene.image, &dir.join(&file_name))?;
        images.push(CocoImage {
            id: scene.id,
            file_name,
            width: w as u32,
            height: h as u32,
        });
        for inst in &scene.instances {
            let polys = mask_to_polygons(&inst.visible_mask);
            let area = inst.area() as f64;
            let (r0, c0, r1, c1) = inst.bbox;
            annotations.push(CocoAnnotation {
                id: next_ann,
                image_id: scene.id,
                category_id: inst.class_id as u32,
                segmentation: serde_json::to_value(&polys).expect("polygons serialize"),
                area,
                bbox: [
                    c0 as f64,
                    r0 as f64,
                    (c1 - c0 + 1) as f64,
                    (r1 - r0 + 1) as f64,
                ],
                iscrowd: 0,
            });
            next_ann += 1;
        }
    }
    let categories = CLASS_NAMES
        .iter()
        .enumerate()
        .map(|(i, &name)| CocoCategory {
            id: (i + 1) as u32,
            name: name.to_owned(),
        })
        .collect();
    let root = CocoRoot {
        images,
        annotations,
        categories,
    };
    let path = dir.join(ANNOTATION_FILE);
    let json = serde_json::to_string_pretty(&root).expect("annotation tree serializes");
    fs::write(&path, json).map_err(|e| Error::WriteFile {
        path,
        source: e,
    })
}

#[derive(Debug)]
pub struct LoadedDataset {
    pub scenes: Vec<Scene>,
    /// Annotations dropped for malformed polygons or unknown categories.
    pub skipped: usize,
}

/// Reads a dataset directory written by [`save_dataset`] or any COCO-shaped
/// annotation file with polygon segmentation. Category ids are remapped to
/// contiguous 1-based class ids in ascending id order.
pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let path = dir.join(ANNOTATION_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::ReadFile {
        path: path.clone(),
        source: e,
    })?;
    let root: CocoRoot = serde_json::from_slice(&bytes).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;

    let mut cat_ids: Vec<u32> = root.categories.iter().map(|c| c.id).collect();
    cat_ids.sort_unstable();
    cat_ids.dedup();
    let remap: BTreeMap<u32, usize> = cat_ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, i + 1))
        .collect();

    let mut skipped = 0usize;
    let mut per_image: BTreeMap<u64, Vec<(u64, usize, Vec<Vec<f64>>)>> = BTreeMap::new();
    for ann in &root.annotations {
        let loops: Vec<Vec<f64>> = match serde_json::from_value(ann.segmentation.clone()) {
            Ok(l) => l,
            Err(_) => return Err(Error::RleUnsupported { id: ann.id }),
        };
        let well_formed = !loops.is_empty()
            && loops
                .iter()
                .all(|l| l.len() >= 6 && l.len() % 2 == 0 && l.iter().all(|v| v.is_finite()));
        let Some(&class_id) = remap.get(&ann.category_id) else {
            skipped += 1;
            continue;
        };
        if !well_formed {
            skipped += 1;
            continue;
        }
        per_image
            .entry(ann.image_id)
            .or_default()
            .push((ann.id, class_id, loops));
    }

    let mut scenes = Vec::new();
    for img in &root.images {
        let img_path = dir.join(&img.file_name);
        let image = decode_image(&img_path)?;
        let (h, w) = (img.height as usize, img.width as usize);
        let mut instances = Vec::new();
        if let Some(anns) = per_image.get_mut(&img.id) {
            anns.sort_by_key(|(id, _, _)| *id);
            for (_, class_id, loops) in anns.iter() {
                let mask = rasterize_polygons(loops, h, w);
                // Loaded data has no pre-occlusion mask; reuse the visible one.
                match GtInstance::new(*class_id, mask.clone(), mask) {
                    Some(inst) => instances.push(inst),
                    None => skipped += 1,
                }
            }
        }
        scenes.push(Scene {
            id: img.id,
            image,
            instances,
        });
    }
    Ok(LoadedDataset { scenes, skipped })
}

/// SHA-256 over the annotation file and every image it references, in
/// annotation order. Identifies a dataset in run manifests.
pub fn dataset_hash(dir: &Path) -> Result<String> {
    let path = dir.join(ANNOTATION_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::ReadFile {
        path: path.clone(),
        source: e,
    })?;
    let root: CocoRoot = serde_json::from_slice(&bytes).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    for img in &root.images {
        let img_path = dir.join(&img.file_name);
        let img_bytes = fs::read(&img_path).map_err(|e| Error::ReadFile {
            path: img_path.clone(),
            source: e,
        })?;
        hasher.update(&img_bytes);
    }
    Ok(format!("{:x}", hasher.finalize()))
}
