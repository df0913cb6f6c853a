//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a per-forward-pass arena of eagerly evaluated nodes. Ops
//! cover exactly what the segmentation pipeline needs: convolution, the
//! pointwise nonlinearities, channel softmax, resampling, gather/scatter of
//! descriptor vectors, and the small dense-matrix ops of the affinity graph.
//! Values are computed at construction time; [`Graph::backward`] walks the
//! arena in reverse and accumulates gradients for every node that needs one.
//!
//! All arithmetic is double precision so analytic gradients can be verified
//! against central finite differences to tight tolerances.

pub mod check;
mod math;

use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, Ix1, Ix2, Ix3, Ix4};

use math::{bilinear_taps, col2im_acc, conv_out_len, im2col, standardize};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Shared tensor value. Leaves alias caller-owned data; op outputs are fresh.
pub type Value = Arc<ArrayD<f64>>;

enum Op {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    Silu(NodeId),
    Sigmoid(NodeId),
    SoftmaxC(NodeId),
    LogClamp {
        x: NodeId,
        eps: f64,
    },
    Add(NodeId, NodeId),
    AddN(Vec<NodeId>),
    Mul(NodeId, NodeId),
    Affine {
        x: NodeId,
        scale: f64,
    },
    SumAll(NodeId),
    MeanAll(NodeId),
    ConcatC(Vec<NodeId>),
    Crop {
        x: NodeId,
        r0: usize,
        c0: usize,
    },
    ResizeBilinear(NodeId),
    BroadcastC(NodeId),
    PixelVec {
        x: NodeId,
        row: usize,
        col: usize,
    },
    StackRows(Vec<NodeId>),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    GramScaled {
        x: NodeId,
        scale: f64,
    },
    Symmetrize(NodeId),
    AddDiagConst(NodeId),
    DotC {
        vec: NodeId,
        map: NodeId,
    },
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `id`, if one flowed there.
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.grads[id.0].as_ref()
    }
}

/// Arena of eagerly evaluated tensor ops supporting one backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Current value of a node.
    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    /// Value of a scalar (0-d) node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert!(v.ndim() == 0, "scalar() on node of shape {:?}", v.shape());
        *v.first().unwrap()
    }

    // Non-finite values are allowed to flow: divergence must reach the loss
    // scalars so the trainer can report which term blew up at which step.
    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Leaf that participates in gradient computation (a parameter).
    pub fn param(&mut self, value: Value) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf excluded from gradient computation (input data, targets).
    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.nodes.push(Node {
            value: Arc::new(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// 2-D convolution of `x: [C_in, H, W]` with `w: [C_out, C_in, kh, kw]`
    /// plus optional per-channel bias, zero padding `pad`, square stride.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let wv = self.value(w).view().into_dimensionality::<Ix4>().unwrap();
        let (co, ci, kh, kw) = wv.dim();
        let (xc, h, wdt) = xv.dim();
        assert_eq!(ci, xc, "conv2d: weight expects {ci} channels, input has {xc}");
        let oh = conv_out_len(h, kh, stride, pad);
        let ow = conv_out_len(wdt, kw, stride, pad);
        let cols = im2col(&xv, kh, kw, stride, pad);
        let wmat = wv.to_shape((co, ci * kh * kw)).unwrap();
        let mut out = standardize(wmat.dot(&cols)); // [co, oh*ow]
        if let Some(bid) = b {
            let bv = self.value(bid).view().into_dimensionality::<Ix1>().unwrap();
            assert_eq!(bv.len(), co, "conv2d: bias length mismatch");
            for (mut row, bc) in out.rows_mut().into_iter().zip(bv.iter()) {
                row += *bc;
            }
        }
        let value = out.into_shape_with_order((co, oh, ow)).unwrap().into_dyn();
        let needs =
            self.needs(x) || self.needs(w) || b.map(|bid| self.needs(bid)).unwrap_or(false);
        self.push(value, Op::Conv2d { x, w, b, stride, pad }, needs)
    }

    /// x * sigmoid(x), elementwise.
    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(|t| t * sigmoid_scalar(t));
        let needs = self.needs(x);
        self.push(v, Op::Silu(x), needs)
    }

    /// Logistic sigmoid, elementwise.
    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(sigmoid_scalar);
        let needs = self.needs(x);
        self.push(v, Op::Sigmoid(x), needs)
    }

    /// Softmax over axis 0 (the channel axis), max-shifted for stability.
    pub fn softmax_c(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let v = softmax_axis0(xv);
        let needs = self.needs(x);
        self.push(v, Op::SoftmaxC(x), needs)
    }

    /// ln(max(x, eps)), elementwise. Gradient is zero in the clamped region.
    /// NaN passes through: f64::max would silently clamp it to eps and hide
    /// a diverged upstream value from the trainer's finiteness checks.
    pub fn log_clamp(&mut self, x: NodeId, eps: f64) -> NodeId {
        let v = self
            .value(x)
            .mapv(|t| if t.is_nan() { t } else { t.max(eps).ln() });
        let needs = self.needs(x);
        self.push(v, Op::LogClamp { x, eps }, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add: shape mismatch");
        let v = self.value(a) + self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), needs)
    }

    /// Elementwise sum of any number of equally shaped tensors.
    pub fn add_n(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty(), "add_n: empty input");
        let mut v = self.value(xs[0]).clone();
        for &x in &xs[1..] {
            assert_eq!(v.shape(), self.value(x).shape(), "add_n: shape mismatch");
            v += self.value(x);
        }
        let needs = xs.iter().any(|&x| self.needs(x));
        self.push(v, Op::AddN(xs.to_vec()), needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul: shape mismatch");
        let v = self.value(a) * self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), needs)
    }

    /// scale * x + shift, elementwise.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let v = self.value(x).mapv(|t| scale * t + shift);
        let needs = self.needs(x);
        self.push(v, Op::Affine { x, scale }, needs)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = ndarray::arr0(self.value(x).sum()).into_dyn();
        let needs = self.needs(x);
        self.push(v, Op::SumAll(x), needs)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let len = self.value(x).len();
        assert!(len > 0, "mean_all: empty tensor");
        let v = ndarray::arr0(self.value(x).sum() / len as f64).into_dyn();
        let needs = self.needs(x);
        self.push(v, Op::MeanAll(x), needs)
    }

    /// Concatenate along axis 0. Inputs must share all trailing dimensions.
    pub fn concat_c(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty(), "concat_c: empty input");
        let views: Vec<_> = xs.iter().map(|&x| self.value(x).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_c: shape mismatch");
        let needs = xs.iter().any(|&x| self.needs(x));
        self.push(v, Op::ConcatC(xs.to_vec()), needs)
    }

    /// Spatial crop of `[C, H, W]` to `[C, h, w]` starting at `(r0, c0)`.
    pub fn crop(&mut self, x: NodeId, r0: usize, c0: usize, h: usize, w: usize) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let (_, xh, xw) = xv.dim();
        assert!(r0 + h <= xh && c0 + w <= xw, "crop: window out of bounds");
        let v = xv
            .slice(ndarray::s![.., r0..r0 + h, c0..c0 + w])
            .to_owned()
            .into_dyn();
        let needs = self.needs(x);
        self.push(v, Op::Crop { x, r0, c0 }, needs)
    }

    /// Bilinear resample of `[C, H, W]` to `[C, oh, ow]` (half-pixel centers,
    /// edge clamp).
    pub fn resize_bilinear(&mut self, x: NodeId, oh: usize, ow: usize) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = xv.dim();
        let ty = bilinear_taps(h, oh);
        let tx = bilinear_taps(w, ow);
        let mut out = Array3::<f64>::zeros((c, oh, ow));
        for ci in 0..c {
            for (i, &(ylo, yhi, wyl, wyh)) in ty.iter().enumerate() {
                for (j, &(xlo, xhi, wxl, wxh)) in tx.iter().enumerate() {
                    out[[ci, i, j]] = wyl * (wxl * xv[[ci, ylo, xlo]] + wxh * xv[[ci, ylo, xhi]])
                        + wyh * (wxl * xv[[ci, yhi, xlo]] + wxh * xv[[ci, yhi, xhi]]);
                }
            }
        }
        let needs = self.needs(x);
        self.push(out.into_dyn(), Op::ResizeBilinear(x), needs)
    }

    /// Tile a `[C]` vector to `[C, h, w]`.
    pub fn broadcast_c(&mut self, x: NodeId, h: usize, w: usize) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix1>().unwrap();
        let c = xv.len();
        let mut out = Array3::<f64>::zeros((c, h, w));
        for (ci, &t) in xv.iter().enumerate() {
            out.index_axis_mut(Axis(0), ci).fill(t);
        }
        let needs = self.needs(x);
        self.push(out.into_dyn(), Op::BroadcastC(x), needs)
    }

    /// Extract the `[C]` fiber of `[C, H, W]` at one spatial location.
    pub fn pixel_vec(&mut self, x: NodeId, row: usize, col: usize) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let (_, h, w) = xv.dim();
        assert!(row < h && col < w, "pixel_vec: ({row},{col}) outside {h}x{w}");
        let v = xv.slice(ndarray::s![.., row, col]).to_owned().into_dyn();
        let needs = self.needs(x);
        self.push(v, Op::PixelVec { x, row, col }, needs)
    }

    /// Stack `[C]` vectors into `[N, C]`.
    pub fn stack_rows(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty(), "stack_rows: empty input");
        let c = self.value(xs[0]).len();
        let mut out = Array2::<f64>::zeros((xs.len(), c));
        for (i, &x) in xs.iter().enumerate() {
            let xv = self.value(x).view().into_dimensionality::<Ix1>().unwrap();
            assert_eq!(xv.len(), c, "stack_rows: vector length mismatch");
            out.row_mut(i).assign(&xv);
        }
        let needs = xs.iter().any(|&x| self.needs(x));
        self.push(out.into_dyn(), Op::StackRows(xs.to_vec()), needs)
    }

    /// Affine map: `x · wᵀ (+ b)`, where `x` is `[N, C_in]` or a bare `[C_in]`
    /// vector and `w` is `[C_out, C_in]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let wv = self.value(w).view().into_dimensionality::<Ix2>().unwrap();
        let (co, ci) = wv.dim();
        let xd = self.value(x).ndim();
        assert!(xd == 1 || xd == 2, "linear: input must be 1-D or 2-D");
        let x2 = if xd == 1 {
            self.value(x)
                .view()
                .into_shape_with_order((1, self.value(x).len()))
                .unwrap()
        } else {
            self.value(x).view().into_dimensionality::<Ix2>().unwrap()
        };
        assert_eq!(x2.ncols(), ci, "linear: expects {ci} features, got {}", x2.ncols());
        let mut out = x2.dot(&wv.t()); // [N, co]
        if let Some(bid) = b {
            let bv = self.value(bid).view().into_dimensionality::<Ix1>().unwrap();
            assert_eq!(bv.len(), co, "linear: bias length mismatch");
            for mut row in out.rows_mut() {
                row += &bv;
            }
        }
        let value = if xd == 1 {
            out.into_shape_with_order(co).unwrap().into_dyn()
        } else {
            out.into_dyn()
        };
        let needs =
            self.needs(x) || self.needs(w) || b.map(|bid| self.needs(bid)).unwrap_or(false);
        self.push(value, Op::Linear { x, w, b }, needs)
    }

    /// `scale · X Xᵀ` for `X: [N, C]`.
    pub fn gram_scaled(&mut self, x: NodeId, scale: f64) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let v = xv.dot(&xv.t()).mapv(|t| t * scale).into_dyn();
        let needs = self.needs(x);
        self.push(v, Op::GramScaled { x, scale }, needs)
    }

    /// `(X + Xᵀ) / 2` for square `X`.
    pub fn symmetrize(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(xv.nrows(), xv.ncols(), "symmetrize: matrix must be square");
        let v = ((&xv + &xv.t()) * 0.5).into_dyn();
        let needs = self.needs(x);
        self.push(v, Op::Symmetrize(x), needs)
    }

    /// Add a constant to the main diagonal of a square matrix.
    pub fn add_diag_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(xv.nrows(), xv.ncols(), "add_diag_const: matrix must be square");
        let mut v = xv.to_owned();
        for i in 0..v.nrows() {
            v[[i, i]] += c;
        }
        let needs = self.needs(x);
        self.push(v.into_dyn(), Op::AddDiagConst(x), needs)
    }

    /// Per-pixel dot product of a `[C]` vector against a `[C, H, W]` map,
    /// yielding `[H, W]` (a 1x1 dynamic convolution).
    pub fn dot_c(&mut self, vec: NodeId, map: NodeId) -> NodeId {
        let vv = self.value(vec).view().into_dimensionality::<Ix1>().unwrap();
        let mv = self.value(map).view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = mv.dim();
        assert_eq!(vv.len(), c, "dot_c: vector length {} != map channels {c}", vv.len());
        let mflat = mv.to_shape((c, h * w)).unwrap();
        let out = vv
            .dot(&mflat)
            .into_shape_with_order((h, w))
            .unwrap()
            .into_dyn();
        let needs = self.needs(vec) || self.needs(map);
        self.push(out, Op::DotC { vec, map }, needs)
    }

    /// Reverse pass from a scalar root. Returns per-node gradients; nodes the
    /// root does not depend on (or that opted out) have `None`.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert!(
            self.value(root).ndim() == 0,
            "backward: root must be scalar, got shape {:?}",
            self.value(root).shape()
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ndarray::arr0(1.0).into_dyn());
        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(NodeId(id), &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<ArrayD<f64>>], id: NodeId, delta: ArrayD<f64>) {
        if !self.needs(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&self, id: NodeId, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        match &self.nodes[id.0].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let xv = self.value(*x).view().into_dimensionality::<Ix3>().unwrap();
                let wv = self.value(*w).view().into_dimensionality::<Ix4>().unwrap();
                let (co, ci, kh, kw) = wv.dim();
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let (gco, goh, gow) = gv.dim();
                debug_assert_eq!(gco, co);
                let gmat = gv.to_shape((co, goh * gow)).unwrap();
                if self.needs(*w) || self.needs(*x) {
                    let cols = im2col(&xv, kh, kw, *stride, *pad);
                    if self.needs(*w) {
                        // ndarray's dot yields a column-major result when both
                        // operand leading strides are 1 (true here whenever the
                        // output map is 1x1), so normalize before reshaping.
                        let dw = standardize(gmat.dot(&cols.t()));
                        self.acc(
                            grads,
                            *w,
                            dw.into_shape_with_order((co, ci, kh, kw)).unwrap().into_dyn(),
                        );
                    }
                    if self.needs(*x) {
                        let wmat = wv.to_shape((co, ci * kh * kw)).unwrap();
                        let dcols = wmat.t().dot(&gmat);
                        let mut dx = Array3::<f64>::zeros(xv.dim());
                        col2im_acc(&dcols, &mut dx.view_mut(), kh, kw, *stride, *pad);
                        self.acc(grads, *x, dx.into_dyn());
                    }
                }
                if let Some(bid) = b {
                    if self.needs(*bid) {
                        let db = gmat.sum_axis(Axis(1));
                        self.acc(grads, *bid, db.into_dyn());
                    }
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                let dx = ndarray::Zip::from(g).and(xv.view()).map_collect(|&gi, &t| {
                    let s = sigmoid_scalar(t);
                    gi * s * (1.0 + t * (1.0 - s))
                });
                self.acc(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let yv = self.value(id);
                let dx = ndarray::Zip::from(g)
                    .and(yv.view())
                    .map_collect(|&gi, &y| gi * y * (1.0 - y));
                self.acc(grads, *x, dx);
            }
            Op::SoftmaxC(x) => {
                // dx = y ⊙ (g − ⟨g, y⟩ over the channel axis)
                let y = self.value(id);
                let gy = g * y;
                let dx = if y.ndim() == 1 {
                    let s = gy.sum();
                    y * &g.mapv(|t| t - s)
                } else {
                    let s = gy.sum_axis(Axis(0));
                    let mut shifted = g.clone();
                    for mut ch in shifted.axis_iter_mut(Axis(0)) {
                        ch -= &s;
                    }
                    &shifted * y
                };
                self.acc(grads, *x, dx);
            }
            Op::LogClamp { x, eps } => {
                let xv = self.value(*x);
                let dx = ndarray::Zip::from(g)
                    .and(xv.view())
                    .map_collect(|&gi, &t| if t > *eps { gi / t } else { 0.0 });
                self.acc(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::AddN(xs) => {
                for &x in xs {
                    self.acc(grads, x, g.clone());
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.acc(grads, *a, g * self.value(*b));
                }
                if self.needs(*b) {
                    self.acc(grads, *b, g * self.value(*a));
                }
            }
            Op::Affine { x, scale, .. } => {
                self.acc(grads, *x, g.mapv(|t| t * scale));
            }
            Op::SumAll(x) => {
                let s = *g.first().unwrap();
                let dx = ArrayD::from_elem(self.value(*x).raw_dim(), s);
                self.acc(grads, *x, dx);
            }
            Op::MeanAll(x) => {
                let len = self.value(*x).len() as f64;
                let s = *g.first().unwrap() / len;
                let dx = ArrayD::from_elem(self.value(*x).raw_dim(), s);
                self.acc(grads, *x, dx);
            }
            Op::ConcatC(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = self.value(x).shape()[0];
                    let part = g
                        .slice_axis(Axis(0), ndarray::Slice::from(offset..offset + n))
                        .to_owned();
                    self.acc(grads, x, part);
                    offset += n;
                }
            }
            Op::Crop { x, r0, c0 } => {
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let (_, gh, gw) = gv.dim();
                let mut dx = Array3::<f64>::zeros(
                    self.value(*x)
                        .view()
                        .into_dimensionality::<Ix3>()
                        .unwrap()
                        .dim(),
                );
                dx.slice_mut(ndarray::s![.., *r0..r0 + gh, *c0..c0 + gw])
                    .assign(&gv);
                self.acc(grads, *x, dx.into_dyn());
            }
            Op::ResizeBilinear(x) => {
                let xv = self.value(*x).view().into_dimensionality::<Ix3>().unwrap();
                let (c, h, w) = xv.dim();
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let (_, oh, ow) = gv.dim();
                let ty = bilinear_taps(h, oh);
                let tx = bilinear_taps(w, ow);
                let mut dx = Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    for (i, &(ylo, yhi, wyl, wyh)) in ty.iter().enumerate() {
                        for (j, &(xlo, xhi, wxl, wxh)) in tx.iter().enumerate() {
                            let gij = gv[[ci, i, j]];
                            dx[[ci, ylo, xlo]] += gij * wyl * wxl;
                            dx[[ci, ylo, xhi]] += gij * wyl * wxh;
                            dx[[ci, yhi, xlo]] += gij * wyh * wxl;
                            dx[[ci, yhi, xhi]] += gij * wyh * wxh;
                        }
                    }
                }
                self.acc(grads, *x, dx.into_dyn());
            }
            Op::BroadcastC(x) => {
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let dx = gv.sum_axis(Axis(2)).sum_axis(Axis(1));
                self.acc(grads, *x, dx.into_dyn());
            }
            Op::PixelVec { x, row, col } => {
                let xv = self.value(*x);
                let mut dx = ArrayD::<f64>::zeros(xv.raw_dim());
                {
                    let mut d3 = dx.view_mut().into_dimensionality::<Ix3>().unwrap();
                    let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                    d3.slice_mut(ndarray::s![.., *row, *col]).assign(&g1);
                }
                self.acc(grads, *x, dx);
            }
            Op::StackRows(xs) => {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                for (i, &x) in xs.iter().enumerate() {
                    self.acc(grads, x, gv.row(i).to_owned().into_dyn());
                }
            }
            Op::Linear { x, w, b } => {
                let wv = self.value(*w).view().into_dimensionality::<Ix2>().unwrap();
                let xd = self.value(*x).ndim();
                let n = if xd == 1 { 1 } else { self.value(*x).shape()[0] };
                let ci = wv.ncols();
                let co = wv.nrows();
                let x2 = self
                    .value(*x)
                    .view()
                    .into_shape_with_order((n, ci))
                    .unwrap();
                let g2 = g.view().into_shape_with_order((n, co)).unwrap();
                if self.needs(*x) {
                    let dx = g2.dot(&wv);
                    let dx = if xd == 1 {
                        dx.into_shape_with_order(ci).unwrap().into_dyn()
                    } else {
                        dx.into_dyn()
                    };
                    self.acc(grads, *x, dx);
                }
                if self.needs(*w) {
                    let dw = g2.t().dot(&x2);
                    self.acc(grads, *w, dw.into_dyn());
                }
                if let Some(bid) = b {
                    if self.needs(*bid) {
                        self.acc(grads, *bid, g2.sum_axis(Axis(0)).into_dyn());
                    }
                }
            }
            Op::GramScaled { x, scale } => {
                let xv = self.value(*x).view().into_dimensionality::<Ix2>().unwrap();
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let dx = (&gv.dot(&xv) + &gv.t().dot(&xv)).mapv(|t| t * scale);
                self.acc(grads, *x, dx.into_dyn());
            }
            Op::Symmetrize(x) => {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let dx = ((&gv + &gv.t()) * 0.5).into_dyn();
                self.acc(grads, *x, dx);
            }
            Op::AddDiagConst(x) => {
                self.acc(grads, *x, g.clone());
            }
            Op::DotC { vec, map } => {
                let vv = self.value(*vec).view().into_dimensionality::<Ix1>().unwrap();
                let mv = self.value(*map).view().into_dimensionality::<Ix3>().unwrap();
                let (c, h, w) = mv.dim();
                let gflat = g.view().into_shape_with_order(h * w).unwrap();
                if self.needs(*vec) {
                    let mflat = mv.to_shape((c, h * w)).unwrap();
                    let dv = mflat.dot(&gflat);
                    self.acc(grads, *vec, dv.into_dyn());
                }
                if self.needs(*map) {
                    let mut dm = Array3::<f64>::zeros((c, h, w));
                    for (ci, &vc) in vv.iter().enumerate() {
                        let mut ch = dm.index_axis_mut(Axis(0), ci);
                        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                        ch.assign(&g2.mapv(|t| t * vc));
                    }
                    self.acc(grads, *map, dm.into_dyn());
                }
            }
        }
    }
}

#[inline]
fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_axis0(x: &ArrayD<f64>) -> ArrayD<f64> {
    if x.ndim() == 1 {
        let v = x.view().into_dimensionality::<Ix1>().unwrap();
        let m = v.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let e: Array1<f64> = v.mapv(|t| (t - m).exp());
        let s = e.sum();
        (e / s).into_dyn()
    } else {
        let mut out = x.clone();
        let c = out.shape()[0];
        // Per-position max over channels, then normalize.
        let mut m = out.index_axis(Axis(0), 0).to_owned();
        for ci in 1..c {
            let ch = out.index_axis(Axis(0), ci);
            ndarray::Zip::from(&mut m).and(&ch).for_each(|a, &b| {
                if b > *a {
                    *a = b;
                }
            });
        }
        for mut ch in out.axis_iter_mut(Axis(0)) {
            ndarray::Zip::from(&mut ch).and(&m).for_each(|a, &b| *a = (*a - b).exp());
        }
        let mut s = out.index_axis(Axis(0), 0).to_owned();
        for ci in 1..c {
            s += &out.index_axis(Axis(0), ci);
        }
        for mut ch in out.axis_iter_mut(Axis(0)) {
            ndarray::Zip::from(&mut ch).and(&s).for_each(|a, &b| *a /= b);
        }
        out
    }
}

#[cfg(test)]
mod tests;
