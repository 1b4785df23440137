//! Minimal reverse-mode automatic differentiation on a flat tape.
//!
//! Each training sample builds its own [`Graph`]: leaves hold parameter and
//! input arrays, interior nodes record the operation plus whatever forward
//! intermediates the backward pass needs. Node ids are indices into the tape,
//! so construction order is already a topological order and the backward pass
//! is a single reverse sweep.
//!
//! The scalar type is generic so training runs in `f32` while gradient
//! checks run the identical code in `f64`.

use ndarray::{Array2, Array3, ArrayD, Axis, Ix3, ScalarOperand};
use ndarray::LinalgScalar;
use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar types the tape can differentiate over.
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("f64 conversion")
    }
    fn to_f64_(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("f64 conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Elementwise product with a constant (non-differentiated) array.
    MulConst(NodeId, ArrayD<T>),
    /// Elementwise difference with a constant array (gradient passes through).
    SubConst(NodeId),
    Scale(NodeId, T),
    Silu(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        /// im2col matrix cached from the forward pass.
        cols: Array2<T>,
    },
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        xhat: ArrayD<T>,
        inv_std: Vec<T>,
    },
    /// Concatenation along axis 0.
    Concat2(NodeId, NodeId),
    UpsampleNearest2(NodeId),
    Reshape(NodeId),
    /// `out.flat[i] = src.flat[index[i]]`; backward scatter-adds.
    Gather {
        x: NodeId,
        index: Vec<usize>,
    },
    /// Batched matrix product over the leading axis with optional transposes.
    BatMatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    SoftmaxLast(NodeId),
    /// Scalar-valued weighted sum: `sum(x * weights)`.
    WeightedSum(NodeId, ArrayD<T>),
}

struct Node<T> {
    value: ArrayD<T>,
    op: Op<T>,
}

/// Computation tape. All arrays are kept in standard (row-major) layout.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<T> {
        &self.nodes[id.0].value
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> T {
        let v = &self.nodes[id.0].value;
        debug_assert_eq!(v.len(), 1);
        *v.iter().next().expect("scalar node")
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>) -> NodeId {
        debug_assert!(value.is_standard_layout());
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: ArrayD<T>) -> NodeId {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(value, Op::Mul(a, b))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.mul(a, a)
    }

    pub fn mul_const(&mut self, a: NodeId, constant: ArrayD<T>) -> NodeId {
        let value = &self.nodes[a.0].value * &constant;
        self.push(value, Op::MulConst(a, constant))
    }

    pub fn sub_const(&mut self, a: NodeId, constant: ArrayD<T>) -> NodeId {
        let value = &self.nodes[a.0].value - &constant;
        self.push(value, Op::SubConst(a))
    }

    pub fn scale(&mut self, a: NodeId, k: T) -> NodeId {
        let value = self.nodes[a.0].value.mapv(|v| v * k);
        self.push(value, Op::Scale(a, k))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.mapv(silu);
        self.push(value, Op::Silu(a))
    }

    /// 2-D convolution of `x` (`C_in x H x W`) with `w`
    /// (`C_out x C_in x kh x kw`) plus optional per-channel bias.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .map_err(|_| Error::shape("conv2d input must be C x H x W".to_string()))?;
        let wdyn = &self.nodes[w.0].value;
        if wdyn.ndim() != 4 {
            return Err(Error::shape("conv2d weight must be Co x Ci x kh x kw".to_string()));
        }
        let (c_in, h, wd) = xv.dim();
        let wshape = wdyn.shape().to_vec();
        let (c_out, wc_in, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        if wc_in != c_in {
            return Err(Error::shape(format!(
                "conv2d weight expects {wc_in} input channels, got {c_in}"
            )));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw || stride == 0 {
            return Err(Error::invalid(format!(
                "conv2d geometry invalid: input {h}x{wd}, kernel {kh}x{kw}, pad {pad}, stride {stride}"
            )));
        }
        let h_out = (h + 2 * pad - kh) / stride + 1;
        let w_out = (wd + 2 * pad - kw) / stride + 1;
        let cols = im2col(&xv, kh, kw, stride, pad, h_out, w_out);
        let wflat = self.nodes[w.0]
            .value
            .view()
            .into_shape_with_order((c_out, c_in * kh * kw))
            .expect("weight reshape");
        let mut out = wflat.dot(&cols); // (C_out, H_out*W_out)
        if let Some(bid) = b {
            let bv = &self.nodes[bid.0].value;
            if bv.len() != c_out {
                return Err(Error::shape(format!(
                    "conv2d bias length {} != {c_out} output channels",
                    bv.len()
                )));
            }
            for (mut row, &bias) in out.axis_iter_mut(Axis(0)).zip(bv.iter()) {
                row.mapv_inplace(|v| v + bias);
            }
        }
        let value = out
            .into_shape_with_order((c_out, h_out, w_out))
            .expect("conv output reshape")
            .into_dyn();
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
        ))
    }

    /// Group normalization over `C x H x W` with per-channel affine.
    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
    ) -> Result<NodeId> {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .map_err(|_| Error::shape("group_norm input must be C x H x W".to_string()))?;
        let (c, h, w) = xv.dim();
        if groups == 0 || c % groups != 0 {
            return Err(Error::invalid(format!(
                "group count {groups} must divide {c} channels"
            )));
        }
        if self.nodes[gamma.0].value.len() != c || self.nodes[beta.0].value.len() != c {
            return Err(Error::shape("group_norm affine params must have C entries".to_string()));
        }
        let eps = T::from_f64(1e-5);
        let cg = c / groups;
        let m = cg * h * w;
        let mut xhat = xv.to_owned();
        let mut inv_std = Vec::with_capacity(groups);
        for g in 0..groups {
            let mut slab = xhat.slice_mut(ndarray::s![g * cg..(g + 1) * cg, .., ..]);
            let mean = slab.iter().copied().sum::<T>() / T::from_f64(m as f64);
            let var = slab
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<T>()
                / T::from_f64(m as f64);
            let istd = T::one() / (var + eps).sqrt();
            slab.mapv_inplace(|v| (v - mean) * istd);
            inv_std.push(istd);
        }
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let mut value = xhat.clone();
        for ci in 0..c {
            let (gc, bc) = (gv[[ci]], bv[[ci]]);
            value
                .slice_mut(ndarray::s![ci, .., ..])
                .mapv_inplace(|v| v * gc + bc);
        }
        Ok(self.push(
            value.into_dyn(),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat: xhat.into_dyn(),
                inv_std,
            },
        ))
    }

    /// Concatenates along axis 0 (channel axis for feature maps).
    pub fn concat2(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if av.shape()[1..] != bv.shape()[1..] {
            return Err(Error::shape(format!(
                "concat trailing dims differ: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let value = ndarray::concatenate(Axis(0), &[av.view(), bv.view()])
            .expect("concat")
            .as_standard_layout()
            .to_owned();
        Ok(self.push(value, Op::Concat2(a, b)))
    }

    /// Nearest-neighbor 2x upsampling of `C x H x W`.
    pub fn upsample_nearest2(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .map_err(|_| Error::shape("upsample input must be C x H x W".to_string()))?;
        let (c, h, w) = av.dim();
        let value = Array3::from_shape_fn((c, 2 * h, 2 * w), |(ci, y, x)| av[[ci, y / 2, x / 2]]);
        Ok(self.push(value.into_dyn(), Op::UpsampleNearest2(a)))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let av = &self.nodes[a.0].value;
        if av.len() != shape.iter().product::<usize>() {
            return Err(Error::shape(format!(
                "cannot reshape {} elements to {shape:?}",
                av.len()
            )));
        }
        let value = av
            .view()
            .into_shape_with_order(shape)
            .expect("reshape")
            .to_owned();
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Arbitrary rearrangement via flat-index gather; `index` must address
    /// valid flat positions of `a` and have `out_shape`'s element count.
    pub fn gather(&mut self, a: NodeId, index: Vec<usize>, out_shape: &[usize]) -> NodeId {
        let av = &self.nodes[a.0].value;
        let flat = av.as_slice().expect("standard layout");
        assert_eq!(index.len(), out_shape.iter().product::<usize>());
        let data: Vec<T> = index.iter().map(|&i| flat[i]).collect();
        let value = ArrayD::from_shape_vec(ndarray::IxDyn(out_shape), data).expect("gather shape");
        self.push(value, Op::Gather { x: a, index })
    }

    /// Batched matmul over the leading axis: `(B, M, K) x (B, K, N)`;
    /// `ta`/`tb` transpose the trailing two axes of the respective operand.
    pub fn bat_mat_mul(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .map_err(|_| Error::shape("bat_mat_mul operands must be 3-D".to_string()))?;
        let bv = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .map_err(|_| Error::shape("bat_mat_mul operands must be 3-D".to_string()))?;
        if av.dim().0 != bv.dim().0 {
            return Err(Error::shape("bat_mat_mul batch sizes differ".to_string()));
        }
        let batch = av.dim().0;
        let (m, ka) = if ta {
            (av.dim().2, av.dim().1)
        } else {
            (av.dim().1, av.dim().2)
        };
        let (kb, n) = if tb {
            (bv.dim().2, bv.dim().1)
        } else {
            (bv.dim().1, bv.dim().2)
        };
        if ka != kb {
            return Err(Error::shape(format!(
                "bat_mat_mul inner dims differ: {ka} vs {kb}"
            )));
        }
        let mut out = Array3::zeros((batch, m, n));
        for i in 0..batch {
            let a2 = av.index_axis(Axis(0), i);
            let b2 = bv.index_axis(Axis(0), i);
            let a2 = if ta { a2.reversed_axes() } else { a2 };
            let b2 = if tb { b2.reversed_axes() } else { b2 };
            out.index_axis_mut(Axis(0), i).assign(&a2.dot(&b2));
        }
        Ok(self.push(
            out.into_dyn().as_standard_layout().to_owned(),
            Op::BatMatMul { a, b, ta, tb },
        ))
    }

    /// Softmax along the last axis.
    pub fn softmax_last(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let last = av.ndim() - 1;
        let mut value = av.clone();
        for mut lane in value.lanes_mut(Axis(last)) {
            let max = lane.iter().copied().fold(T::neg_infinity(), T::max);
            lane.mapv_inplace(|v| (v - max).exp());
            let sum = lane.iter().copied().sum::<T>();
            lane.mapv_inplace(|v| v / sum);
        }
        self.push(value, Op::SoftmaxLast(a))
    }

    /// Scalar node `sum(a * weights)`; with normalized weights this is a
    /// (masked) mean — the root of every loss.
    pub fn weighted_sum(&mut self, a: NodeId, weights: ArrayD<T>) -> NodeId {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.shape(), weights.shape(), "weighted_sum shape mismatch");
        let total = av
            .iter()
            .zip(weights.iter())
            .map(|(&v, &w)| v * w)
            .sum::<T>();
        let value = ArrayD::from_shape_vec(ndarray::IxDyn(&[1]), vec![total]).unwrap();
        self.push(value, Op::WeightedSum(a, weights))
    }

    /// Reverse sweep from a finite scalar root; returns one gradient slot per
    /// node (None where the gradient never flowed).
    pub fn backward(&self, root: NodeId) -> Result<Vec<Option<ArrayD<T>>>> {
        let root_val = &self.nodes[root.0].value;
        if root_val.len() != 1 {
            return Err(Error::invalid("backward root must be scalar".to_string()));
        }
        let lv = root_val.iter().next().unwrap().to_f64_();
        if !lv.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {lv}")));
        }
        let mut grads: Vec<Option<ArrayD<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::from_shape_vec(ndarray::IxDyn(&[1]), vec![T::one()]).unwrap());
        for id in (0..=root.0).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            // Re-store so callers can inspect intermediate gradients.
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, gout.clone());
                    accumulate(&mut grads, *b, gout.clone());
                }
                Op::Mul(a, b) => {
                    let ga = &gout * &self.nodes[b.0].value;
                    let gb = &gout * &self.nodes[a.0].value;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MulConst(a, c) => {
                    accumulate(&mut grads, *a, &gout * c);
                }
                Op::SubConst(a) => {
                    accumulate(&mut grads, *a, gout.clone());
                }
                Op::Scale(a, k) => {
                    accumulate(&mut grads, *a, gout.mapv(|v| v * *k));
                }
                Op::Silu(a) => {
                    let ga = ndarray::Zip::from(&gout)
                        .and(&self.nodes[a.0].value)
                        .map_collect(|&g, &x| g * silu_grad(x));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                    cols,
                } => {
                    let (gx, gw, gb) = conv2d_backward(
                        &gout,
                        &self.nodes[x.0].value,
                        &self.nodes[w.0].value,
                        cols,
                        *stride,
                        *pad,
                    );
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    if let Some(bid) = b {
                        accumulate(&mut grads, *bid, gb);
                    }
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    xhat,
                    inv_std,
                } => {
                    let (gx, gg, gb) = group_norm_backward(
                        &gout,
                        xhat,
                        inv_std,
                        &self.nodes[gamma.0].value,
                        *groups,
                    );
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gamma, gg);
                    accumulate(&mut grads, *beta, gb);
                }
                Op::Concat2(a, b) => {
                    let na = self.nodes[a.0].value.shape()[0];
                    let ga = gout.slice_axis(Axis(0), ndarray::Slice::from(0..na)).to_owned();
                    let gb = gout.slice_axis(Axis(0), ndarray::Slice::from(na..)).to_owned();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::UpsampleNearest2(a) => {
                    let g3 = gout.view().into_dimensionality::<Ix3>().unwrap();
                    let (c, h2, w2) = g3.dim();
                    let mut ga = Array3::<T>::zeros((c, h2 / 2, w2 / 2));
                    for ci in 0..c {
                        for y in 0..h2 {
                            for x in 0..w2 {
                                ga[[ci, y / 2, x / 2]] = ga[[ci, y / 2, x / 2]] + g3[[ci, y, x]];
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga.into_dyn());
                }
                Op::Reshape(a) => {
                    let shape = self.nodes[a.0].value.shape();
                    let ga = gout
                        .view()
                        .into_shape_with_order(shape)
                        .expect("reshape grad")
                        .to_owned();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gather { x, index } => {
                    let mut ga = ArrayD::zeros(self.nodes[x.0].value.raw_dim());
                    {
                        let ga_flat = ga.as_slice_mut().expect("standard layout");
                        let g_flat = gout.as_slice().expect("standard layout");
                        for (i, &src) in index.iter().enumerate() {
                            ga_flat[src] = ga_flat[src] + g_flat[i];
                        }
                    }
                    accumulate(&mut grads, *x, ga);
                }
                Op::BatMatMul { a, b, ta, tb } => {
                    let (ga, gb) = bat_mat_mul_backward(
                        &gout,
                        &self.nodes[a.0].value,
                        &self.nodes[b.0].value,
                        *ta,
                        *tb,
                    );
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::SoftmaxLast(a) => {
                    let y = &self.nodes[id].value;
                    let last = y.ndim() - 1;
                    let mut ga = gout.clone();
                    // dx = y * (dy - sum(dy * y)) per lane.
                    for (mut glane, ylane) in ga
                        .lanes_mut(Axis(last))
                        .into_iter()
                        .zip(y.lanes(Axis(last)))
                    {
                        let dot = glane
                            .iter()
                            .zip(ylane.iter())
                            .map(|(&g, &yv)| g * yv)
                            .sum::<T>();
                        for (g, &yv) in glane.iter_mut().zip(ylane.iter()) {
                            *g = yv * (*g - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::WeightedSum(a, weights) => {
                    let g = gout.iter().next().copied().unwrap();
                    accumulate(&mut grads, *a, weights.mapv(|w| w * g));
                }
            }
            grads[id] = Some(gout);
        }
        Ok(grads)
    }
}

fn accumulate<T: Real>(grads: &mut [Option<ArrayD<T>>], id: NodeId, g: ArrayD<T>) {
    // Stored gradients must stay standard-layout: downstream backward rules
    // reshape and slice them, and matmul results can arrive F-ordered.
    let g = if g.is_standard_layout() {
        g
    } else {
        g.as_standard_layout().to_owned()
    };
    match &mut grads[id.0] {
        Some(existing) => *existing = &*existing + &g,
        slot @ None => *slot = Some(g),
    }
}

fn silu<T: Real>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

fn silu_grad<T: Real>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

fn im2col<T: Real>(
    x: &ndarray::ArrayView3<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
) -> Array2<T> {
    let (c_in, h, w) = x.dim();
    let mut cols = Array2::zeros((c_in * kh * kw, h_out * w_out));
    for ci in 0..c_in {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w_out {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * w_out + ox]] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn conv2d_backward<T: Real>(
    gout: &ArrayD<T>,
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    cols: &Array2<T>,
    stride: usize,
    pad: usize,
) -> (ArrayD<T>, ArrayD<T>, ArrayD<T>) {
    let g3 = gout.view().into_dimensionality::<Ix3>().unwrap();
    let (c_out, h_out, w_out) = g3.dim();
    let x3 = x.view().into_dimensionality::<Ix3>().unwrap();
    let (c_in, h, wd) = x3.dim();
    let wshape = w.shape();
    let (kh, kw) = (wshape[2], wshape[3]);
    let gflat = g3
        .into_shape_with_order((c_out, h_out * w_out))
        .expect("grad reshape");
    // dW = dY . cols^T; the product of degenerate shapes can come back
    // F-ordered, so normalize before reshaping.
    let gw_mat = gflat.dot(&cols.t());
    let gw_mat = if gw_mat.is_standard_layout() {
        gw_mat
    } else {
        gw_mat.as_standard_layout().to_owned()
    };
    let gw = gw_mat
        .into_shape_with_order((c_out, c_in, kh, kw))
        .expect("gw reshape")
        .into_dyn();
    // db = row sums of dY
    let gb = gflat.sum_axis(Axis(1)).into_dyn();
    // dcols = W^T . dY, then col2im scatter.
    let wflat = w
        .view()
        .into_shape_with_order((c_out, c_in * kh * kw))
        .expect("w reshape");
    let gcols = wflat.t().dot(&gflat);
    let mut gx = Array3::<T>::zeros((c_in, h, wd));
    for ci in 0..c_in {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w_out {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        gx[[ci, iy as usize, ix as usize]] =
                            gx[[ci, iy as usize, ix as usize]] + gcols[[row, oy * w_out + ox]];
                    }
                }
            }
        }
    }
    (gx.into_dyn(), gw, gb)
}

fn group_norm_backward<T: Real>(
    gout: &ArrayD<T>,
    xhat: &ArrayD<T>,
    inv_std: &[T],
    gamma: &ArrayD<T>,
    groups: usize,
) -> (ArrayD<T>, ArrayD<T>, ArrayD<T>) {
    let g3 = gout.view().into_dimensionality::<Ix3>().unwrap();
    let xh3 = xhat.view().into_dimensionality::<Ix3>().unwrap();
    let (c, h, w) = g3.dim();
    let cg = c / groups;
    let m = T::from_f64((cg * h * w) as f64);
    let mut ggamma = ndarray::Array1::<T>::zeros(c);
    let mut gbeta = ndarray::Array1::<T>::zeros(c);
    for ci in 0..c {
        let gslice = g3.slice(ndarray::s![ci, .., ..]);
        let xslice = xh3.slice(ndarray::s![ci, .., ..]);
        gbeta[ci] = gslice.iter().copied().sum::<T>();
        ggamma[ci] = gslice
            .iter()
            .zip(xslice.iter())
            .map(|(&g, &xh)| g * xh)
            .sum::<T>();
    }
    let mut gx = Array3::<T>::zeros((c, h, w));
    for g in 0..groups {
        let range = ndarray::s![g * cg..(g + 1) * cg, .., ..];
        let gsl = g3.slice(range);
        let xsl = xh3.slice(range);
        // dxhat = dy * gamma_c
        let mut dxhat = gsl.to_owned();
        for (ci_local, mut plane) in dxhat.axis_iter_mut(Axis(0)).enumerate() {
            let gc = gamma[[g * cg + ci_local]];
            plane.mapv_inplace(|v| v * gc);
        }
        let mean_dxhat = dxhat.iter().copied().sum::<T>() / m;
        let mean_dxhat_xhat = dxhat
            .iter()
            .zip(xsl.iter())
            .map(|(&d, &xh)| d * xh)
            .sum::<T>()
            / m;
        let istd = inv_std[g];
        let mut out = gx.slice_mut(range);
        ndarray::Zip::from(&mut out)
            .and(&dxhat)
            .and(&xsl)
            .for_each(|o, &d, &xh| {
                *o = istd * (d - mean_dxhat - xh * mean_dxhat_xhat);
            });
    }
    (gx.into_dyn(), ggamma.into_dyn(), gbeta.into_dyn())
}

fn bat_mat_mul_backward<T: Real>(
    gout: &ArrayD<T>,
    a: &ArrayD<T>,
    b: &ArrayD<T>,
    ta: bool,
    tb: bool,
) -> (ArrayD<T>, ArrayD<T>) {
    let g3 = gout.view().into_dimensionality::<Ix3>().unwrap();
    let a3 = a.view().into_dimensionality::<Ix3>().unwrap();
    let b3 = b.view().into_dimensionality::<Ix3>().unwrap();
    let batch = g3.dim().0;
    let mut ga = Array3::<T>::zeros(a3.dim());
    let mut gb = Array3::<T>::zeros(b3.dim());
    for i in 0..batch {
        let g2 = g3.index_axis(Axis(0), i);
        let a2 = a3.index_axis(Axis(0), i);
        let b2 = b3.index_axis(Axis(0), i);
        let aop = if ta { a2.reversed_axes() } else { a2 };
        let bop = if tb { b2.reversed_axes() } else { b2 };
        // C = Aop . Bop: dAop = g . Bop^T, dBop = Aop^T . g
        let d_aop = g2.dot(&bop.reversed_axes());
        let d_bop = aop.reversed_axes().dot(&g2);
        if ta {
            ga.index_axis_mut(Axis(0), i).assign(&d_aop.reversed_axes());
        } else {
            ga.index_axis_mut(Axis(0), i).assign(&d_aop);
        }
        if tb {
            gb.index_axis_mut(Axis(0), i).assign(&d_bop.reversed_axes());
        } else {
            gb.index_axis_mut(Axis(0), i).assign(&d_bop);
        }
    }
    (ga.into_dyn(), gb.into_dyn())
}
