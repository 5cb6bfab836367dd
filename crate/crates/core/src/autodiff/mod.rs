//! Reverse-mode differentiation over a closed set of tensor ops.
//!
//! A [`Graph`] is an append-only tape. Each [`Graph::apply`] evaluates one op
//! eagerly and records it; [`Graph::backward`] then walks the tape in reverse
//! and accumulates gradients into every node that requires them.
//!
//! Spatial tensors are rank 4, `[channels, z, y, x]` (batch size is always
//! one). Conv weights are `[out, in, 3, 3, 3]`, biases `[out]` and reductions
//! produce shape `[1]`. The scalar type is chosen when the graph is built:
//! `Graph<f32>` for training, `Graph<f64>` for gradient checking.

pub mod gradcheck;
pub(crate) mod kernels;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::warp::{warp_linear, warp_linear_backward};
use kernels::{AxisTaps, ConvGeom};

pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions};

/// Floating-point scalar the engine can run on.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Send + Sync + Debug + Default + Sum + AddAssign + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Spatial axis; x is the fastest-varying.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    /// Position of this axis in a `[c, z, y, x]` shape.
    pub fn dim(self) -> usize {
        match self {
            Axis::X => 3,
            Axis::Y => 2,
            Axis::Z => 1,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 5 {
            return Err(Error::Shape(format!(
                "tensor rank must be 1..=5, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "tensor shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }

    fn dims4(&self) -> Option<[usize; 4]> {
        <[usize; 4]>::try_from(self.shape.as_slice()).ok()
    }

    fn spatial(&self) -> Option<[usize; 3]> {
        self.dims4().map(|[_, d, h, w]| [d, h, w])
    }
}

/// Views a volume as a `[c, z, y, x]` tensor (same memory order).
pub fn volume_tensor<T: Real>(vol: &crate::volume::Volume) -> Tensor<T> {
    let [nx, ny, nz] = vol.dims();
    Tensor {
        shape: vec![vol.channels(), nz, ny, nx],
        data: vol.data().iter().map(|&v| T::lit(v as f64)).collect(),
    }
}

/// Converts a `[c, z, y, x]` tensor back into a volume on `grid`.
pub fn tensor_volume<T: Real>(
    t: &Tensor<T>,
    grid: crate::volume::Grid,
) -> Result<crate::volume::Volume> {
    match t.dims4() {
        Some([c, d, h, w]) if [w, h, d] == grid.dims() => crate::volume::Volume::new(
            grid,
            c,
            t.data.iter().map(|v| v.to_f32().unwrap()).collect(),
        ),
        _ => Err(Error::Shape(format!(
            "tensor {:?} does not fit grid {:?}",
            t.shape,
            grid.dims()
        ))),
    }
}

/// Graph operations. Attributes are carried inline.
#[derive(Debug, Clone, PartialEq)]
pub enum Op<T> {
    Leaf,
    /// Inputs: x `[ci,d,h,w]`, weight `[co,ci,3,3,3]`, bias `[co]`. Zero padding 1.
    Conv3d {
        stride: usize,
    },
    LeakyRelu {
        slope: T,
    },
    /// `x * mask / keep`, with a precomputed 0/1 mask.
    Dropout {
        mask: Vec<T>,
        keep: T,
    },
    UpsampleTrilinear2x,
    ConcatChannels,
    Add,
    Subtract,
    Scale {
        factor: T,
    },
    Exp,
    /// `a / (b + eps)`.
    DivideEps {
        eps: T,
    },
    Square,
    Abs,
    ReduceMean,
    /// Forward difference along an axis, zero at the far boundary.
    ShiftDiff {
        axis: Axis,
    },
    /// `out[i] = x[clamp(i + offset)]` along an axis.
    Shift {
        axis: Axis,
        offset: isize,
    },
    /// Separable correlation with `kernel` along all three axes, zero padding.
    GaussianBlur {
        kernel: Vec<T>,
    },
    /// Inputs: image `[c,d,h,w]`, field `[3,d,h,w]`.
    WarpTrilinear,
    /// Max over channels, shape `[1,d,h,w]`.
    ChannelMax,
    /// Elementwise `max(a, b)`.
    Maximum,
    ClampMin {
        floor: T,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv3d,
    LeakyRelu,
    Dropout,
    UpsampleTrilinear2x,
    ConcatChannels,
    Add,
    Subtract,
    Scale,
    Exp,
    DivideEps,
    Square,
    Abs,
    ReduceMean,
    ShiftDiff,
    Shift,
    GaussianBlur,
    WarpTrilinear,
    ChannelMax,
    Maximum,
    ClampMin,
}

impl OpKind {
    /// Every differentiable op kind.
    pub const ALL: [OpKind; 20] = [
        OpKind::Conv3d,
        OpKind::LeakyRelu,
        OpKind::Dropout,
        OpKind::UpsampleTrilinear2x,
        OpKind::ConcatChannels,
        OpKind::Add,
        OpKind::Subtract,
        OpKind::Scale,
        OpKind::Exp,
        OpKind::DivideEps,
        OpKind::Square,
        OpKind::Abs,
        OpKind::ReduceMean,
        OpKind::ShiftDiff,
        OpKind::Shift,
        OpKind::GaussianBlur,
        OpKind::WarpTrilinear,
        OpKind::ChannelMax,
        OpKind::Maximum,
        OpKind::ClampMin,
    ];
}

impl<T> Op<T> {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv3d { .. } => OpKind::Conv3d,
            Op::LeakyRelu { .. } => OpKind::LeakyRelu,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::UpsampleTrilinear2x => OpKind::UpsampleTrilinear2x,
            Op::ConcatChannels => OpKind::ConcatChannels,
            Op::Add => OpKind::Add,
            Op::Subtract => OpKind::Subtract,
            Op::Scale { .. } => OpKind::Scale,
            Op::Exp => OpKind::Exp,
            Op::DivideEps { .. } => OpKind::DivideEps,
            Op::Square => OpKind::Square,
            Op::Abs => OpKind::Abs,
            Op::ReduceMean => OpKind::ReduceMean,
            Op::ShiftDiff { .. } => OpKind::ShiftDiff,
            Op::Shift { .. } => OpKind::Shift,
            Op::GaussianBlur { .. } => OpKind::GaussianBlur,
            Op::WarpTrilinear => OpKind::WarpTrilinear,
            Op::ChannelMax => OpKind::ChannelMax,
            Op::Maximum => OpKind::Maximum,
            Op::ClampMin { .. } => OpKind::ClampMin,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// How the right operand of a binary op maps onto the left.
#[derive(Debug, Clone, Copy)]
enum Bcast {
    Same,
    /// `[1,d,h,w]` against `[c,d,h,w]`.
    Channel {
        plane: usize,
    },
    Scalar,
}

impl Bcast {
    fn resolve(a: &[usize], b: &[usize]) -> Option<Bcast> {
        if a == b {
            Some(Bcast::Same)
        } else if b.iter().product::<usize>() == 1 {
            Some(Bcast::Scalar)
        } else if a.len() == 4 && b.len() == 4 && b[0] == 1 && a[1..] == b[1..] {
            Some(Bcast::Channel {
                plane: a[1] * a[2] * a[3],
            })
        } else {
            None
        }
    }

    #[inline]
    fn idx(self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Channel { plane } => i % plane,
            Bcast::Scalar => 0,
        }
    }

    /// Sums a full-size gradient down to the right operand's size.
    fn reduce<T: Real>(self, full: Vec<T>, b_len: usize) -> Vec<T> {
        match self {
            Bcast::Same => full,
            _ => {
                let mut out = vec![T::zero(); b_len];
                for (i, v) in full.into_iter().enumerate() {
                    out[self.idx(i)] += v;
                }
                out
            }
        }
    }
}

fn shape_err<T>(op: &Op<T>, shapes: &[&[usize]], what: &str) -> Error {
    Error::Shape(format!("{:?}: {what}; input shapes {shapes:?}", op.kind()))
}

/// An append-only computation tape.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Every node id, in tape order.
    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    fn push(
        &mut self,
        op: Op<T>,
        inputs: Vec<NodeId>,
        value: Tensor<T>,
        requires_grad: bool,
    ) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient in [`Graph::backward`].
    pub fn param(&mut self, t: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, Vec::new(), t, true)
    }

    /// A leaf treated as constant: no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, Vec::new(), t, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn op(&self, id: NodeId) -> &Op<T> {
        &self.nodes[id.0].op
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    /// Evaluates `op` on existing nodes and appends the result.
    pub fn apply(&mut self, op: Op<T>, inputs: &[NodeId]) -> Result<NodeId> {
        if matches!(op, Op::Leaf) {
            return Err(Error::Contract(
                "leaves are created with param/constant".into(),
            ));
        }
        if let Some(bad) = inputs.iter().find(|id| id.0 >= self.nodes.len()) {
            return Err(Error::Contract(format!("unknown node {bad:?}")));
        }
        let value = {
            let ins: Vec<&Tensor<T>> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
            forward(&op, &ins)?
        };
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        Ok(self.push(op, inputs.to_vec(), value, requires_grad))
    }

    /// Accumulates d(loss)/d(node) into every node that requires a gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let n = self.nodes[loss.0].value.len();
        if n != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, node {} has {n} elements",
                loss.0
            )));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|id| self.nodes[id.0].requires_grad)
                .collect();
            let ins: Vec<&Tensor<T>> = node
                .inputs
                .iter()
                .map(|id| &self.nodes[id.0].value)
                .collect();
            let input_grads = backward(&node.op, &ins, &node.value, &gout, &needs);
            let inputs = node.inputs.clone();
            self.grads[i] = Some(gout);
            for (id, g) in inputs.into_iter().zip(input_grads) {
                let Some(g) = g else { continue };
                match &mut self.grads[id.0] {
                    Some(acc) => acc.data.iter_mut().zip(g).for_each(|(a, v)| *a += v),
                    slot @ None => {
                        *slot = Some(Tensor {
                            shape: self.nodes[id.0].value.shape.clone(),
                            data: g,
                        })
                    }
                }
            }
        }
        Ok(())
    }

    pub fn conv3d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        self.apply(Op::Conv3d { stride }, &[x, w, b])
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: T) -> Result<NodeId> {
        self.apply(Op::LeakyRelu { slope }, &[x])
    }

    pub fn dropout(&mut self, x: NodeId, mask: Vec<T>, keep: T) -> Result<NodeId> {
        self.apply(Op::Dropout { mask, keep }, &[x])
    }

    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::UpsampleTrilinear2x, &[x])
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.apply(Op::ConcatChannels, xs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Subtract, &[a, b])
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> Result<NodeId> {
        self.apply(Op::Scale { factor }, &[x])
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Exp, &[x])
    }

    pub fn divide_eps(&mut self, a: NodeId, b: NodeId, eps: T) -> Result<NodeId> {
        self.apply(Op::DivideEps { eps }, &[a, b])
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Square, &[x])
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Abs, &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::ReduceMean, &[x])
    }

    pub fn shift_diff(&mut self, x: NodeId, axis: Axis) -> Result<NodeId> {
        self.apply(Op::ShiftDiff { axis }, &[x])
    }

    pub fn shift(&mut self, x: NodeId, axis: Axis, offset: isize) -> Result<NodeId> {
        self.apply(Op::Shift { axis, offset }, &[x])
    }

    pub fn blur(&mut self, x: NodeId, kernel: Vec<T>) -> Result<NodeId> {
        self.apply(Op::GaussianBlur { kernel }, &[x])
    }

    pub fn warp(&mut self, image: NodeId, field: NodeId) -> Result<NodeId> {
        self.apply(Op::WarpTrilinear, &[image, field])
    }

    pub fn channel_max(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::ChannelMax, &[x])
    }

    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Maximum, &[a, b])
    }

    pub fn clamp_min(&mut self, x: NodeId, floor: T) -> Result<NodeId> {
        self.apply(Op::ClampMin { floor }, &[x])
    }
}

fn expect_arity<T>(op: &Op<T>, ins: &[&Tensor<T>], n: usize) -> Result<()> {
    if ins.len() != n {
        let shapes: Vec<&[usize]> = ins.iter().map(|t| t.shape.as_slice()).collect();
        return Err(shape_err(op, &shapes, &format!("expected {n} inputs")));
    }
    Ok(())
}

fn unary<T: Real>(x: &Tensor<T>, f: impl Fn(T) -> T + Sync) -> Tensor<T> {
    Tensor {
        shape: x.shape.clone(),
        data: x
            .data
            .par_iter()
            .with_min_len(4096)
            .map(|&v| f(v))
            .collect(),
    }
}

fn binary<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    bc: Bcast,
    f: impl Fn(T, T) -> T + Sync,
) -> Tensor<T> {
    Tensor {
        shape: a.shape.clone(),
        data: a
            .data
            .par_iter()
            .with_min_len(4096)
            .enumerate()
            .map(|(i, &v)| f(v, b.data[bc.idx(i)]))
            .collect(),
    }
}

fn spatial_taps<T: Real>(op: &Op<T>, dims: [usize; 3]) -> Vec<(usize, AxisTaps<T>)> {
    let [d, h, w] = dims;
    let len = |a: Axis| match a {
        Axis::X => w,
        Axis::Y => h,
        Axis::Z => d,
    };
    match op {
        Op::UpsampleTrilinear2x => Axis::ALL
            .iter()
            .map(|&a| (a.dim(), AxisTaps::upsample2x(len(a))))
            .collect(),
        Op::GaussianBlur { kernel } => Axis::ALL
            .iter()
            .map(|&a| (a.dim(), AxisTaps::blur(len(a), kernel)))
            .collect(),
        Op::Shift { axis, offset } => vec![(axis.dim(), AxisTaps::shift(len(*axis), *offset))],
        Op::ShiftDiff { axis } => vec![(axis.dim(), AxisTaps::forward_diff(len(*axis)))],
        _ => unreachable!("not a separable op"),
    }
}

fn forward<T: Real>(op: &Op<T>, ins: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let shapes: Vec<&[usize]> = ins.iter().map(|t| t.shape.as_slice()).collect();
    match op {
        Op::Leaf => unreachable!(),
        Op::Conv3d { stride } => {
            expect_arity(op, ins, 3)?;
            let (x, w, b) = (ins[0], ins[1], ins[2]);
            let Some([ci, d, h, wd]) = x.dims4() else {
                return Err(shape_err(op, &shapes, "input must be rank 4"));
            };
            let ok = w.shape.len() == 5
                && w.shape[1] == ci
                && w.shape[2..] == [3, 3, 3]
                && b.shape == [w.shape[0]];
            if !ok || !(1..=2).contains(stride) {
                return Err(shape_err(
                    op,
                    &shapes,
                    "expected weight [co,ci,3,3,3], bias [co], stride 1 or 2",
                ));
            }
            let geom = ConvGeom::new(ci, w.shape[0], [d, h, wd], *stride);
            let data = kernels::conv3d_forward(&geom, &x.data, &w.data, &b.data);
            let [od, oh, ow] = geom.out_dims;
            Ok(Tensor {
                shape: vec![geom.co, od, oh, ow],
                data,
            })
        }
        Op::LeakyRelu { slope } => {
            expect_arity(op, ins, 1)?;
            let s = *slope;
            Ok(unary(ins[0], |v| if v > T::zero() { v } else { s * v }))
        }
        Op::Dropout { mask, keep } => {
            expect_arity(op, ins, 1)?;
            if mask.len() != ins[0].len() || *keep <= T::zero() {
                return Err(shape_err(
                    op,
                    &shapes,
                    "mask length must match input, keep > 0",
                ));
            }
            let x = ins[0];
            Ok(Tensor {
                shape: x.shape.clone(),
                data: x
                    .data
                    .iter()
                    .zip(mask)
                    .map(|(&v, &m)| v * m / *keep)
                    .collect(),
            })
        }
        Op::UpsampleTrilinear2x
        | Op::GaussianBlur { .. }
        | Op::Shift { .. }
        | Op::ShiftDiff { .. } => {
            expect_arity(op, ins, 1)?;
            let Some(mut shape) = ins[0].dims4() else {
                return Err(shape_err(op, &shapes, "input must be rank 4"));
            };
            if let Op::GaussianBlur { kernel } = op {
                if kernel.len() % 2 == 0 {
                    return Err(shape_err(op, &shapes, "blur kernel length must be odd"));
                }
            }
            let mut data = ins[0].data.clone();
            for (dim, taps) in spatial_taps(op, [shape[1], shape[2], shape[3]]) {
                data = kernels::apply_axis(&data, shape, dim, &taps);
                shape[dim] = taps.out_len();
            }
            Ok(Tensor {
                shape: shape.to_vec(),
                data,
            })
        }
        Op::ConcatChannels => {
            if ins.is_empty() {
                return Err(shape_err(op, &shapes, "needs at least one input"));
            }
            let Some(sp) = ins[0].spatial() else {
                return Err(shape_err(op, &shapes, "inputs must be rank 4"));
            };
            if ins.iter().any(|t| t.spatial() != Some(sp)) {
                return Err(shape_err(op, &shapes, "spatial dims differ"));
            }
            let c: usize = ins.iter().map(|t| t.shape[0]).sum();
            let mut data = Vec::with_capacity(ins.iter().map(|t| t.len()).sum());
            for t in ins {
                data.extend_from_slice(&t.data);
            }
            Ok(Tensor {
                shape: vec![c, sp[0], sp[1], sp[2]],
                data,
            })
        }
        Op::Add | Op::Subtract | Op::DivideEps { .. } | Op::Maximum => {
            expect_arity(op, ins, 2)?;
            let Some(bc) = Bcast::resolve(&ins[0].shape, &ins[1].shape) else {
                return Err(shape_err(op, &shapes, "operands not broadcast-compatible"));
            };
            let (a, b) = (ins[0], ins[1]);
            Ok(match op {
                Op::Add => binary(a, b, bc, |x, y| x + y),
                Op::Subtract => binary(a, b, bc, |x, y| x - y),
                Op::DivideEps { eps } => {
                    let e = *eps;
                    binary(a, b, bc, |x, y| x / (y + e))
                }
                _ => binary(a, b, bc, |x, y| if x >= y { x } else { y }),
            })
        }
        Op::Scale { factor } => {
            expect_arity(op, ins, 1)?;
            let f = *factor;
            Ok(unary(ins[0], |v| v * f))
        }
        Op::Exp => {
            expect_arity(op, ins, 1)?;
            Ok(unary(ins[0], |v| v.exp()))
        }
        Op::Square => {
            expect_arity(op, ins, 1)?;
            Ok(unary(ins[0], |v| v * v))
        }
        Op::Abs => {
            expect_arity(op, ins, 1)?;
            Ok(unary(ins[0], |v| v.abs()))
        }
        Op::ClampMin { floor } => {
            expect_arity(op, ins, 1)?;
            let f = *floor;
            Ok(unary(ins[0], |v| if v >= f { v } else { f }))
        }
        Op::ReduceMean => {
            expect_arity(op, ins, 1)?;
            let x = ins[0];
            // fixed-order f64 accumulation
            let s: f64 = x.data.iter().map(|v| v.to_f64().unwrap()).sum();
            Ok(Tensor::scalar(T::lit(s / x.len() as f64)))
        }
        Op::WarpTrilinear => {
            expect_arity(op, ins, 2)?;
            let (img, field) = (ins[0], ins[1]);
            match (img.dims4(), field.dims4()) {
                (Some([c, d, h, w]), Some([3, fd, fh, fw])) if [d, h, w] == [fd, fh, fw] => {
                    let data = warp_linear(&img.data, c, [w, h, d], &field.data);
                    Ok(Tensor {
                        shape: img.shape.clone(),
                        data,
                    })
                }
                _ => Err(shape_err(
                    op,
                    &shapes,
                    "expected image [c,d,h,w] and field [3,d,h,w]",
                )),
            }
        }
        Op::ChannelMax => {
            expect_arity(op, ins, 1)?;
            let Some([c, d, h, w]) = ins[0].dims4() else {
                return Err(shape_err(op, &shapes, "input must be rank 4"));
            };
            let plane = d * h * w;
            let x = &ins[0].data;
            let data = (0..plane)
                .map(|v| {
                    (1..c).fold(x[v], |m, k| {
                        if x[k * plane + v] > m {
                            x[k * plane + v]
                        } else {
                            m
                        }
                    })
                })
                .collect();
            Ok(Tensor {
                shape: vec![1, d, h, w],
                data,
            })
        }
    }
}

/// Gradients of every input that `needs` flags, in input order.
fn backward<T: Real>(
    op: &Op<T>,
    ins: &[&Tensor<T>],
    out: &Tensor<T>,
    gout: &Tensor<T>,
    needs: &[bool],
) -> Vec<Option<Vec<T>>> {
    let g = &gout.data;
    let elementwise = |f: &(dyn Fn(usize) -> T + Sync)| -> Vec<Option<Vec<T>>> {
        vec![needs[0].then(|| {
            (0..g.len())
                .into_par_iter()
                .with_min_len(4096)
                .map(f)
                .collect()
        })]
    };
    match op {
        Op::Leaf => Vec::new(),
        Op::Conv3d { stride } => {
            let (x, w) = (ins[0], ins[1]);
            let [ci, d, h, wd] = x.dims4().unwrap();
            let geom = ConvGeom::new(ci, w.shape[0], [d, h, wd], *stride);
            vec![
                needs[0].then(|| kernels::conv3d_backward_input(&geom, &w.data, g)),
                needs[1].then(|| kernels::conv3d_backward_weight(&geom, &x.data, g)),
                needs[2].then(|| kernels::conv3d_backward_bias(geom.co, g)),
            ]
        }
        Op::LeakyRelu { slope } => {
            let x = &ins[0].data;
            elementwise(&|i| {
                if x[i] > T::zero() {
                    g[i]
                } else {
                    *slope * g[i]
                }
            })
        }
        Op::Dropout { mask, keep } => elementwise(&|i| g[i] * mask[i] / *keep),
        Op::UpsampleTrilinear2x
        | Op::GaussianBlur { .. }
        | Op::Shift { .. }
        | Op::ShiftDiff { .. } => {
            if !needs[0] {
                return vec![None];
            }
            let in_shape = ins[0].dims4().unwrap();
            // forward applied the axes in order; undo them in reverse
            let mut shapes = vec![in_shape];
            let passes = spatial_taps(op, [in_shape[1], in_shape[2], in_shape[3]]);
            for (dim, taps) in &passes {
                let mut s = *shapes.last().unwrap();
                s[*dim] = taps.out_len();
                shapes.push(s);
            }
            let mut grad = g.clone();
            for (k, (dim, taps)) in passes.iter().enumerate().rev() {
                grad = kernels::apply_axis_transpose(&grad, shapes[k], *dim, taps);
            }
            vec![Some(grad)]
        }
        Op::ConcatChannels => {
            let mut at = 0;
            ins.iter()
                .zip(needs)
                .map(|(t, &need)| {
                    let part = &g[at..at + t.len()];
                    at += t.len();
                    need.then(|| part.to_vec())
                })
                .collect()
        }
        Op::Add | Op::Subtract | Op::DivideEps { .. } | Op::Maximum => {
            let (a, b) = (ins[0], ins[1]);
            let bc = Bcast::resolve(&a.shape, &b.shape).unwrap();
            type ElemGrad<'a, T> = Box<dyn Fn(usize) -> T + Sync + 'a>;
            let (ga, gb): (ElemGrad<T>, ElemGrad<T>) = match op {
                Op::Add => (Box::new(|i| g[i]), Box::new(|i| g[i])),
                Op::Subtract => (Box::new(|i| g[i]), Box::new(|i| -g[i])),
                Op::DivideEps { eps } => {
                    let e = *eps;
                    (
                        Box::new(move |i| g[i] / (b.data[bc.idx(i)] + e)),
                        Box::new(move |i| {
                            let den = b.data[bc.idx(i)] + e;
                            -g[i] * a.data[i] / (den * den)
                        }),
                    )
                }
                _ => (
                    Box::new(move |i| {
                        if a.data[i] >= b.data[bc.idx(i)] {
                            g[i]
                        } else {
                            T::zero()
                        }
                    }),
                    Box::new(move |i| {
                        if a.data[i] >= b.data[bc.idx(i)] {
                            T::zero()
                        } else {
                            g[i]
                        }
                    }),
                ),
            };
            let n = g.len();
            vec![
                needs[0].then(|| (0..n).into_par_iter().with_min_len(4096).map(&ga).collect()),
                needs[1].then(|| {
                    let full: Vec<T> = (0..n).into_par_iter().with_min_len(4096).map(&gb).collect();
                    bc.reduce(full, b.len())
                }),
            ]
        }
        Op::Scale { factor } => elementwise(&|i| g[i] * *factor),
        Op::Exp => {
            let y = &out.data;
            elementwise(&|i| g[i] * y[i])
        }
        Op::Square => {
            let x = &ins[0].data;
            let two = T::lit(2.0);
            elementwise(&|i| two * x[i] * g[i])
        }
        Op::Abs => {
            let x = &ins[0].data;
            elementwise(&|i| {
                if x[i] > T::zero() {
                    g[i]
                } else if x[i] < T::zero() {
                    -g[i]
                } else {
                    T::zero()
                }
            })
        }
        Op::ClampMin { floor } => {
            let x = &ins[0].data;
            elementwise(&|i| if x[i] >= *floor { g[i] } else { T::zero() })
        }
        Op::ReduceMean => {
            let n = ins[0].len();
            let v = g[0] / T::lit(n as f64);
            vec![needs[0].then(|| vec![v; n])]
        }
        Op::WarpTrilinear => {
            let (img, field) = (ins[0], ins[1]);
            let [c, d, h, w] = img.dims4().unwrap();
            let (gi, gf) =
                warp_linear_backward(&img.data, c, [w, h, d], &field.data, g, needs[0], needs[1]);
            vec![gi, gf]
        }
        Op::ChannelMax => {
            let x = &ins[0].data;
            let [c, d, h, w] = ins[0].dims4().unwrap();
            let plane = d * h * w;
            vec![needs[0].then(|| {
                let mut gx = vec![T::zero(); x.len()];
                for v in 0..plane {
                    let mut best = 0;
                    for k in 1..c {
                        if x[k * plane + v] > x[best * plane + v] {
                            best = k;
                        }
                    }
                    gx[best * plane + v] = g[v];
                }
                gx
            })]
        }
    }
}
