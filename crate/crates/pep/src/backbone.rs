//! Five-stage feature pyramid over strides 4..64 and the shared four-layer
//! conv heads the subnetworks apply to its stages.

use ndarray::Array3;

use crate::autodiff::NodeId;
use crate::error::{Error, Result};
use crate::params::{BiasInit, Init, ParamStore, Session};

/// Number of pyramid stages. Stage s (1-based) has stride 2^(s+1).
pub const STAGES: usize = 5;

/// Smallest usable input side: stage 5 downsamples by 64, and stage sizes
/// must keep strictly decreasing, which 32-pixel inputs cannot satisfy.
pub const MIN_SIDE: usize = 64;

/// Feature pyramid for one image: node per stage plus stage geometry.
pub struct Pyramid {
    pub stages: [NodeId; STAGES],
    /// (rows, cols) per stage.
    pub sizes: [(usize, usize); STAGES],
    /// Input image size (rows, cols).
    pub image_size: (usize, usize),
}

impl Pyramid {
    /// Stride of stage `s` (0-based index).
    pub fn stride(s: usize) -> usize {
        1 << (s + 2)
    }
}

/// Strided-conv encoder with 1x1 laterals, top-down fusion, and 3x3 smoothing.
pub struct Backbone {
    c_feat: usize,
}

impl Backbone {
    pub fn register(init: &mut Init, store: &mut ParamStore, c_feat: usize) -> Self {
        init.conv(store, "backbone.enc1", c_feat, 3, 3, BiasInit::Zero);
        for i in 2..=6 {
            init.conv(store, &format!("backbone.enc{i}"), c_feat, c_feat, 3, BiasInit::Zero);
        }
        for s in 1..=STAGES {
            init.conv(store, &format!("backbone.lat{s}"), c_feat, c_feat, 1, BiasInit::Zero);
            init.conv(store, &format!("backbone.smooth{s}"), c_feat, c_feat, 3, BiasInit::Zero);
        }
        Self { c_feat }
    }

    pub fn c_feat(&self) -> usize {
        self.c_feat
    }

    /// Validates image geometry against the stride plan.
    pub fn check_input(h: usize, w: usize) -> Result<()> {
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::InvalidInput(format!(
                "image dimensions must be divisible by 32, got {h}x{w}"
            )));
        }
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::InvalidInput(format!(
                "image dimensions must be at least {MIN_SIDE}, got {h}x{w}"
            )));
        }
        Ok(())
    }

    /// Builds the pyramid for one `[3, H, W]` image already placed on the
    /// graph as `image` (constant or parameter node).
    pub fn forward(&self, sess: &mut Session, image: NodeId, h: usize, w: usize) -> Pyramid {
        let mut x = sess.conv("backbone.enc1", image, 2, 1);
        x = sess.g.silu(x);
        let mut raw = Vec::with_capacity(STAGES);
        for i in 2..=6 {
            x = sess.conv(&format!("backbone.enc{i}"), x, 2, 1);
            x = sess.g.silu(x);
            raw.push(x);
        }

        let mut sizes = [(0usize, 0usize); STAGES];
        for (s, &node) in raw.iter().enumerate() {
            let shape = sess.g.value(node).shape();
            sizes[s] = (shape[1], shape[2]);
        }

        // Top-down: lateral 1x1, add the upsampled coarser stage, smooth 3x3.
        let mut stages = [NodeId::default(); STAGES];
        let mut above: Option<NodeId> = None;
        for s in (0..STAGES).rev() {
            let lat = sess.conv(&format!("backbone.lat{}", s + 1), raw[s], 1, 0);
            let merged = match above {
                Some(up_src) => {
                    let up = sess.g.resize_bilinear(up_src, sizes[s].0, sizes[s].1);
                    sess.g.add(lat, up)
                }
                None => lat,
            };
            above = Some(merged);
            stages[s] = sess.conv(&format!("backbone.smooth{}", s + 1), merged, 1, 1);
        }
        Pyramid {
            stages,
            sizes,
            image_size: (h, w),
        }
    }
}

/// Places a `[3, H, W]` image tensor on the graph after validating geometry.
pub fn image_node(sess: &mut Session, image: &Array3<f64>) -> Result<NodeId> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::InvalidInput(format!("expected 3 image channels, got {c}")));
    }
    Backbone::check_input(h, w)?;
    Ok(sess.g.constant(image.clone().into_dyn()))
}

/// Four 3x3 conv layers of a fixed width, applied to any pyramid stage.
pub struct SubnetHead {
    name: String,
    pub width: usize,
}

impl SubnetHead {
    pub fn register(
        init: &mut Init,
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        width: usize,
    ) -> Self {
        init.conv(store, &format!("{name}.conv1"), width, c_in, 3, BiasInit::Zero);
        for i in 2..=4 {
            init.conv(store, &format!("{name}.conv{i}"), width, width, 3, BiasInit::Zero);
        }
        Self {
            name: name.to_owned(),
            width,
        }
    }

    /// Spatial shape is preserved (stride 1, padding 1).
    pub fn apply(&self, sess: &mut Session, x: NodeId) -> NodeId {
        let mut y = x;
        for i in 1..=4 {
            y = sess.conv(&format!("{}.conv{i}", self.name), y, 1, 1);
            y = sess.g.silu(y);
        }
        y
    }
}
