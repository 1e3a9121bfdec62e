//! Operation tape and differentiable value handles.

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels;
use super::{assert_same_shape, Tensor};

/// One recorded operation. Saved buffers (softmax probabilities,
/// normalisation statistics) live inside the variant that needs them.
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Relu(usize),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Sqrt(usize),
    NegativePart(usize),
    Conv2d { input: usize, kernel: usize, stride: usize, pad: usize },
    BiasAdd { input: usize, bias: usize },
    MatVec { matrix: usize, vector: usize },
    ConcatChannels(usize, usize),
    UpsampleNearest { input: usize, factor: usize },
    UpsampleBilinear { input: usize, factor: usize },
    AvgPool { input: usize, factor: usize },
    CropHw { input: usize },
    Slice1d { input: usize, start: usize },
    InstanceNorm { input: usize, mean: Vec<f64>, inv_std: Vec<f64> },
    Reshape(usize),
    SumAll(usize),
    MeanAll(usize),
    /// Sum of absolute values.
    L1(usize),
    /// Sum of squares.
    L2Sq(usize),
    /// Mean of squared differences.
    Mse(usize, usize),
    CrossEntropyLogits { logits: usize, target: usize, probs: Vec<f64> },
    /// max(max_{j != target} z_j - z_target, 0) with the hinge
    /// subgradient at the active pair.
    CwMargin { logits: usize, target: usize, runner_up: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

struct TapeInner {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Recording tape. One tape per restoration job; cloning the handle is
/// cheap and shares the underlying storage.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new(), grads: Vec::new() })),
        }
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Value {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { value, op, requires_grad });
        inner.grads.push(None);
        Value { tape: self.clone(), id }
    }

    /// Differentiable leaf: gradients accumulate here during backward.
    pub fn leaf(&self, value: Tensor) -> Value {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input (images, masks, targets).
    pub fn constant(&self, value: Tensor) -> Value {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone)]
pub struct Value {
    tape: Tape,
    id: usize,
}

macro_rules! with_nodes {
    ($self:ident, $inner:ident, $body:expr) => {{
        let $inner = $self.tape.inner.borrow();
        $body
    }};
}

impl Value {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        with_nodes!(self, inner, inner.nodes[self.id].value.shape().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        with_nodes!(self, inner, inner.nodes[self.id].value.clone())
    }

    pub fn item(&self) -> f64 {
        with_nodes!(self, inner, inner.nodes[self.id].value.item())
    }

    pub fn requires_grad(&self) -> bool {
        with_nodes!(self, inner, inner.nodes[self.id].requires_grad)
    }

    /// Gradient accumulated by the last [`Value::backward`] call, if any.
    pub fn grad(&self) -> Option<Tensor> {
        let inner = self.tape.inner.borrow();
        inner.grads[self.id]
            .as_ref()
            .map(|g| Tensor::new(inner.nodes[self.id].value.shape().to_vec(), g.clone()))
    }

    fn same_tape(&self, other: &Value) {
        assert!(
            Rc::ptr_eq(&self.tape.inner, &other.tape.inner),
            "values come from different tapes"
        );
    }

    fn unary(&self, value: Tensor, op: Op) -> Value {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: &Value, value: Tensor, op: Op) -> Value {
        self.same_tape(other);
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    pub fn add(&self, other: &Value) -> Value {
        let (a, b) = (self.to_tensor(), other.to_tensor());
        assert_same_shape("add", a.shape(), b.shape());
        let out = Tensor::new(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
        );
        self.binary(other, out, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Value) -> Value {
        let (a, b) = (self.to_tensor(), other.to_tensor());
        assert_same_shape("sub", a.shape(), b.shape());
        let out = Tensor::new(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect(),
        );
        self.binary(other, out, Op::Sub(self.id, other.id))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Value) -> Value {
        let (a, b) = (self.to_tensor(), other.to_tensor());
        assert_same_shape("mul", a.shape(), b.shape());
        let out = Tensor::new(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
        );
        self.binary(other, out, Op::Mul(self.id, other.id))
    }

    pub fn add_scalar(&self, c: f64) -> Value {
        let out = self.to_tensor().map(|x| x + c);
        self.unary(out, Op::AddScalar(self.id))
    }

    pub fn mul_scalar(&self, c: f64) -> Value {
        let out = self.to_tensor().map(|x| x * c);
        self.unary(out, Op::MulScalar(self.id, c))
    }

    pub fn relu(&self) -> Value {
        let out = self.to_tensor().map(|x| x.max(0.0));
        self.unary(out, Op::Relu(self.id))
    }

    pub fn leaky_relu(&self, slope: f64) -> Value {
        let out = self.to_tensor().map(|x| if x > 0.0 { x } else { slope * x });
        self.unary(out, Op::LeakyRelu(self.id, slope))
    }

    pub fn sigmoid(&self) -> Value {
        let out = self.to_tensor().map(|x| 1.0 / (1.0 + (-x).exp()));
        self.unary(out, Op::Sigmoid(self.id))
    }

    pub fn tanh(&self) -> Value {
        let out = self.to_tensor().map(f64::tanh);
        self.unary(out, Op::Tanh(self.id))
    }

    /// Elementwise square root; the derivative at 0 is taken as 0 so
    /// that sqrt of an exactly-zero norm stays NaN-free.
    pub fn sqrt(&self) -> Value {
        let out = self.to_tensor().map(f64::sqrt);
        self.unary(out, Op::Sqrt(self.id))
    }

    /// Elementwise max(-x, 0).
    pub fn negative_part(&self) -> Value {
        let out = self.to_tensor().map(|x| (-x).max(0.0));
        self.unary(out, Op::NegativePart(self.id))
    }

    /// 2-D correlation of a [C_in,H,W] input with a [C_out,C_in,K,K] kernel.
    pub fn conv2d(&self, kernel: &Value, stride: usize, pad: usize) -> Value {
        self.same_tape(kernel);
        let input = self.to_tensor();
        let kt = kernel.to_tensor();
        let ishape = input.shape().to_vec();
        let kshape = kt.shape().to_vec();
        assert!(ishape.len() == 3, "conv2d input must be [C,H,W], got {:?}", ishape);
        assert!(kshape.len() == 4, "conv2d kernel must be [C_out,C_in,K,K], got {:?}", kshape);
        assert!(kshape[2] == kshape[3], "conv2d kernel must be square, got {:?}", kshape);
        assert!(
            ishape[0] == kshape[1],
            "conv2d channel mismatch: input {:?} has {} channels, kernel {:?} expects {}",
            ishape,
            ishape[0],
            kshape,
            kshape[1]
        );
        assert!(stride == 1 || stride == 2, "conv2d stride must be 1 or 2, got {}", stride);
        let (ci, h, w) = (ishape[0], ishape[1], ishape[2]);
        let (co, k) = (kshape[0], kshape[2]);
        assert!(
            h + 2 * pad >= k && w + 2 * pad >= k,
            "conv2d kernel {}x{} larger than padded input {}x{}",
            k,
            k,
            h + 2 * pad,
            w + 2 * pad
        );
        let data = kernels::conv2d_forward(input.data(), (ci, h, w), kt.data(), (co, k), stride, pad);
        let oh = kernels::conv_out_dim(h, k, stride, pad);
        let ow = kernels::conv_out_dim(w, k, stride, pad);
        let out = Tensor::new(vec![co, oh, ow], data);
        self.binary(kernel, out, Op::Conv2d { input: self.id, kernel: kernel.id, stride, pad })
    }

    /// Add a per-channel bias [C] to a [C,H,W] feature map.
    pub fn bias_add(&self, bias: &Value) -> Value {
        self.same_tape(bias);
        let input = self.to_tensor();
        let b = bias.to_tensor();
        let ishape = input.shape().to_vec();
        assert!(ishape.len() == 3, "bias_add input must be [C,H,W], got {:?}", ishape);
        assert!(
            b.shape() == [ishape[0]],
            "bias_add: bias shape {:?} does not match {} channels",
            b.shape(),
            ishape[0]
        );
        let (c, hw) = (ishape[0], ishape[1] * ishape[2]);
        let mut data = input.data().to_vec();
        for ch in 0..c {
            let bv = b.data()[ch];
            for x in &mut data[ch * hw..(ch + 1) * hw] {
                *x += bv;
            }
        }
        let out = Tensor::new(ishape, data);
        self.binary(bias, out, Op::BiasAdd { input: self.id, bias: bias.id })
    }

    /// Matrix-vector product: self is [M,N], `v` is [N]; result [M].
    pub fn matvec(&self, v: &Value) -> Value {
        self.same_tape(v);
        let m = self.to_tensor();
        let x = v.to_tensor();
        let mshape = m.shape().to_vec();
        assert!(mshape.len() == 2, "matvec matrix must be [M,N], got {:?}", mshape);
        assert!(
            x.shape() == [mshape[1]],
            "matvec: vector shape {:?} does not match matrix {:?}",
            x.shape(),
            mshape
        );
        let (rows, cols) = (mshape[0], mshape[1]);
        let mut data = vec![0.0; rows];
        for r in 0..rows {
            let row = &m.data()[r * cols..][..cols];
            data[r] = row.iter().zip(x.data()).map(|(a, b)| a * b).sum();
        }
        let out = Tensor::new(vec![rows], data);
        self.binary(v, out, Op::MatVec { matrix: self.id, vector: v.id })
    }

    /// Concatenate two [C,H,W] maps along the channel axis.
    pub fn concat_channels(&self, other: &Value) -> Value {
        self.same_tape(other);
        let a = self.to_tensor();
        let b = other.to_tensor();
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        assert!(
            sa.len() == 3 && sb.len() == 3 && sa[1..] == sb[1..],
            "concat_channels: incompatible shapes {:?} vs {:?}",
            sa,
            sb
        );
        let mut data = a.data().to_vec();
        data.extend_from_slice(b.data());
        let out = Tensor::new(vec![sa[0] + sb[0], sa[1], sa[2]], data);
        self.binary(other, out, Op::ConcatChannels(self.id, other.id))
    }

    pub fn upsample_nearest(&self, factor: usize) -> Value {
        assert!(factor >= 2, "upsample factor must be >= 2, got {}", factor);
        let input = self.to_tensor();
        let s = input.shape().to_vec();
        assert!(s.len() == 3, "upsample input must be [C,H,W], got {:?}", s);
        let data = kernels::upsample_nearest_forward(input.data(), (s[0], s[1], s[2]), factor);
        let out = Tensor::new(vec![s[0], s[1] * factor, s[2] * factor], data);
        self.unary(out, Op::UpsampleNearest { input: self.id, factor })
    }

    pub fn upsample_bilinear(&self, factor: usize) -> Value {
        assert!(factor >= 2, "upsample factor must be >= 2, got {}", factor);
        let input = self.to_tensor();
        let s = input.shape().to_vec();
        assert!(s.len() == 3, "upsample input must be [C,H,W], got {:?}", s);
        let data = kernels::upsample_bilinear_forward(input.data(), (s[0], s[1], s[2]), factor);
        let out = Tensor::new(vec![s[0], s[1] * factor, s[2] * factor], data);
        self.unary(out, Op::UpsampleBilinear { input: self.id, factor })
    }

    /// Non-overlapping box average; spatial dims must divide by `factor`.
    pub fn avg_pool(&self, factor: usize) -> Value {
        assert!(factor >= 2, "avg_pool factor must be >= 2, got {}", factor);
        let input = self.to_tensor();
        let s = input.shape().to_vec();
        assert!(s.len() == 3, "avg_pool input must be [C,H,W], got {:?}", s);
        assert!(
            s[1] % factor == 0 && s[2] % factor == 0,
            "avg_pool: dims {:?} not divisible by factor {}",
            s,
            factor
        );
        let data = kernels::avg_pool_forward(input.data(), (s[0], s[1], s[2]), factor);
        let out = Tensor::new(vec![s[0], s[1] / factor, s[2] / factor], data);
        self.unary(out, Op::AvgPool { input: self.id, factor })
    }

    /// Keep the top-left h x w window of a [C,H,W] map.
    pub fn crop_hw(&self, h: usize, w: usize) -> Value {
        let input = self.to_tensor();
        let s = input.shape().to_vec();
        assert!(s.len() == 3, "crop_hw input must be [C,H,W], got {:?}", s);
        assert!(
            h <= s[1] && w <= s[2],
            "crop_hw: target {}x{} exceeds input {:?}",
            h,
            w,
            s
        );
        let mut data = vec![0.0; s[0] * h * w];
        for c in 0..s[0] {
            for y in 0..h {
                let src = &input.data()[c * s[1] * s[2] + y * s[2]..][..w];
                data[c * h * w + y * w..][..w].copy_from_slice(src);
            }
        }
        let out = Tensor::new(vec![s[0], h, w], data);
        self.unary(out, Op::CropHw { input: self.id })
    }

    /// Contiguous window of a rank-1 tensor.
    pub fn slice1d(&self, start: usize, len: usize) -> Value {
        let input = self.to_tensor();
        assert!(
            input.shape().len() == 1,
            "slice1d input must be rank 1, got {:?}",
            input.shape()
        );
        assert!(
            start + len <= input.len(),
            "slice1d window {}..{} exceeds length {}",
            start,
            start + len,
            input.len()
        );
        let out = Tensor::new(vec![len], input.data()[start..start + len].to_vec());
        self.unary(out, Op::Slice1d { input: self.id, start })
    }

    /// Per-channel normalisation to zero mean, unit variance.
    pub fn instance_norm(&self, eps: f64) -> Value {
        let input = self.to_tensor();
        let s = input.shape().to_vec();
        assert!(s.len() == 3, "instance_norm input must be [C,H,W], got {:?}", s);
        assert!(
            s[1] * s[2] >= 2,
            "instance_norm needs at least 2 pixels per channel, got {:?}",
            s
        );
        let (data, mean, inv_std) =
            kernels::instance_norm_forward(input.data(), (s[0], s[1], s[2]), eps);
        let out = Tensor::new(s, data);
        self.unary(out, Op::InstanceNorm { input: self.id, mean, inv_std })
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Value {
        let out = self.to_tensor().reshape(shape);
        self.unary(out, Op::Reshape(self.id))
    }

    pub fn sum_all(&self) -> Value {
        let out = Tensor::scalar(self.to_tensor().data().iter().sum());
        self.unary(out, Op::SumAll(self.id))
    }

    pub fn mean_all(&self) -> Value {
        let t = self.to_tensor();
        let out = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        self.unary(out, Op::MeanAll(self.id))
    }

    /// Sum of absolute values.
    pub fn l1(&self) -> Value {
        let out = Tensor::scalar(self.to_tensor().data().iter().map(|x| x.abs()).sum());
        self.unary(out, Op::L1(self.id))
    }

    /// Sum of squares.
    pub fn l2_sq(&self) -> Value {
        let out = Tensor::scalar(self.to_tensor().data().iter().map(|x| x * x).sum());
        self.unary(out, Op::L2Sq(self.id))
    }

    /// Mean of squared differences.
    pub fn mse(&self, other: &Value) -> Value {
        let (a, b) = (self.to_tensor(), other.to_tensor());
        assert_same_shape("mse", a.shape(), b.shape());
        let n = a.len() as f64;
        let s: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.binary(other, Tensor::scalar(s / n), Op::Mse(self.id, other.id))
    }

    /// Cross-entropy of logits [K] against a class index.
    pub fn cross_entropy_logits(&self, target: usize) -> Value {
        let z = self.to_tensor();
        assert!(z.shape().len() == 1, "cross_entropy logits must be [K], got {:?}", z.shape());
        let k = z.len();
        assert!(target < k, "target class {} out of range for {} logits", target, k);
        let zmax = z.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.data().iter().map(|&v| (v - zmax).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / denom).collect();
        let loss = denom.ln() + zmax - z.data()[target];
        self.unary(Tensor::scalar(loss), Op::CrossEntropyLogits {
            logits: self.id,
            target,
            probs,
        })
    }

    /// Hinged classification margin max(max_{j != t} z_j - z_t, 0) of a
    /// logit vector; zero means the target class wins outright.
    pub fn cw_margin(&self, target: usize) -> Value {
        let z = self.to_tensor();
        assert!(z.shape().len() == 1, "cw_margin logits must be [K], got {:?}", z.shape());
        assert!(z.len() >= 2, "cw_margin needs at least two classes");
        assert!(target < z.len(), "target class {} out of range for {} logits", target, z.len());
        let mut runner_up = usize::MAX;
        for (j, &v) in z.data().iter().enumerate() {
            if j == target {
                continue;
            }
            if runner_up == usize::MAX || v > z.data()[runner_up] {
                runner_up = j;
            }
        }
        let margin = (z.data()[runner_up] - z.data()[target]).max(0.0);
        self.unary(Tensor::scalar(margin), Op::CwMargin { logits: self.id, target, runner_up })
    }

    /// Reverse pass from a scalar node. Gradients of all leaves that
    /// require grad become available through [`Value::grad`].
    pub fn backward(&self) {
        let mut inner = self.tape.inner.borrow_mut();
        assert!(
            inner.nodes[self.id].value.len() == 1,
            "backward requires a scalar loss, got shape {:?}",
            inner.nodes[self.id].value.shape()
        );
        for g in &mut inner.grads {
            *g = None;
        }
        inner.grads[self.id] = Some(vec![1.0]);
        let inner = &mut *inner;
        for id in (0..=self.id).rev() {
            if inner.grads[id].is_none() || !inner.nodes[id].requires_grad {
                continue;
            }
            let go = inner.grads[id].take().unwrap();
            backprop(&inner.nodes, &mut inner.grads, id, &go);
            inner.grads[id] = Some(go);
        }
    }
}

fn ensure(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    if grads[id].is_none() {
        grads[id] = Some(vec![0.0; len]);
    }
    grads[id].as_mut().unwrap()
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, delta: &[f64]) {
    if !nodes[id].requires_grad {
        return;
    }
    let g = ensure(grads, id, nodes[id].value.len());
    for (gi, &d) in g.iter_mut().zip(delta.iter()) {
        *gi += d;
    }
}

fn accumulate_mapped(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    id: usize,
    go: &[f64],
    f: impl Fn(usize, f64) -> f64,
) {
    if !nodes[id].requires_grad {
        return;
    }
    let g = ensure(grads, id, nodes[id].value.len());
    for (i, (gi, &d)) in g.iter_mut().zip(go.iter()).enumerate() {
        *gi += f(i, d);
    }
}

fn dims3(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2])
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, go: &[f64]) {
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, go);
            accumulate(nodes, grads, *b, go);
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, go);
            accumulate_mapped(nodes, grads, *b, go, |_, d| -d);
        }
        Op::Mul(a, b) => {
            let (a, b) = (*a, *b);
            if nodes[a].requires_grad {
                let bv = nodes[b].value.data();
                accumulate_mapped(nodes, grads, a, go, |i, d| d * bv[i]);
            }
            if nodes[b].requires_grad {
                let av = nodes[a].value.data();
                accumulate_mapped(nodes, grads, b, go, |i, d| d * av[i]);
            }
        }
        Op::AddScalar(a) => accumulate(nodes, grads, *a, go),
        Op::MulScalar(a, c) => {
            let c = *c;
            accumulate_mapped(nodes, grads, *a, go, |_, d| d * c);
        }
        Op::Relu(a) => {
            let x = nodes[*a].value.data();
            accumulate_mapped(nodes, grads, *a, go, |i, d| if x[i] > 0.0 { d } else { 0.0 });
        }
        Op::LeakyRelu(a, slope) => {
            let x = nodes[*a].value.data();
            let s = *slope;
            accumulate_mapped(nodes, grads, *a, go, |i, d| if x[i] > 0.0 { d } else { s * d });
        }
        Op::Sigmoid(a) => {
            let y = nodes[id].value.data();
            accumulate_mapped(nodes, grads, *a, go, |i, d| d * y[i] * (1.0 - y[i]));
        }
        Op::Tanh(a) => {
            let y = nodes[id].value.data();
            accumulate_mapped(nodes, grads, *a, go, |i, d| d * (1.0 - y[i] * y[i]));
        }
        Op::Sqrt(a) => {
            let y = nodes[id].value.data();
            accumulate_mapped(nodes, grads, *a, go, |i, d| {
                if y[i] > 0.0 {
                    d / (2.0 * y[i])
                } else {
                    0.0
                }
            });
        }
        Op::NegativePart(a) => {
            // subgradient at 0 is 0
            let x = nodes[*a].value.data();
            accumulate_mapped(nodes, grads, *a, go, |i, d| if x[i] < 0.0 { -d } else { 0.0 });
        }
        Op::Conv2d { input, kernel, stride, pad } => {
            let (input, kernel, stride, pad) = (*input, *kernel, *stride, *pad);
            let idims = dims3(&nodes[input].value);
            let ks = nodes[kernel].value.shape();
            let kdims = (ks[0], ks[2]);
            if nodes[input].requires_grad {
                let gi = kernels::conv2d_backward_input(
                    go,
                    idims,
                    nodes[kernel].value.data(),
                    kdims,
                    stride,
                    pad,
                );
                accumulate(nodes, grads, input, &gi);
            }
            if nodes[kernel].requires_grad {
                let gk = kernels::conv2d_backward_kernel(
                    go,
                    nodes[input].value.data(),
                    idims,
                    kdims,
                    stride,
                    pad,
                );
                accumulate(nodes, grads, kernel, &gk);
            }
        }
        Op::BiasAdd { input, bias } => {
            accumulate(nodes, grads, *input, go);
            if nodes[*bias].requires_grad {
                let (c, h, w) = dims3(&nodes[*input].value);
                let mut gb = vec![0.0; c];
                for ch in 0..c {
                    gb[ch] = go[ch * h * w..(ch + 1) * h * w].iter().sum();
                }
                accumulate(nodes, grads, *bias, &gb);
            }
        }
        Op::MatVec { matrix, vector } => {
            let (matrix, vector) = (*matrix, *vector);
            let ms = nodes[matrix].value.shape();
            let (rows, cols) = (ms[0], ms[1]);
            if nodes[matrix].requires_grad {
                let x = nodes[vector].value.data();
                let mut gm = vec![0.0; rows * cols];
                for r in 0..rows {
                    let g = go[r];
                    for (gmv, &xv) in gm[r * cols..][..cols].iter_mut().zip(x.iter()) {
                        *gmv = g * xv;
                    }
                }
                accumulate(nodes, grads, matrix, &gm);
            }
            if nodes[vector].requires_grad {
                let m = nodes[matrix].value.data();
                let mut gx = vec![0.0; cols];
                for r in 0..rows {
                    let g = go[r];
                    for (gxv, &mv) in gx.iter_mut().zip(m[r * cols..][..cols].iter()) {
                        *gxv += g * mv;
                    }
                }
                accumulate(nodes, grads, vector, &gx);
            }
        }
        Op::ConcatChannels(a, b) => {
            let na = nodes[*a].value.len();
            accumulate(nodes, grads, *a, &go[..na]);
            accumulate(nodes, grads, *b, &go[na..]);
        }
        Op::UpsampleNearest { input, factor } => {
            let dims = dims3(&nodes[*input].value);
            let gi = kernels::upsample_nearest_backward(go, dims, *factor);
            accumulate(nodes, grads, *input, &gi);
        }
        Op::UpsampleBilinear { input, factor } => {
            let dims = dims3(&nodes[*input].value);
            let gi = kernels::upsample_bilinear_backward(go, dims, *factor);
            accumulate(nodes, grads, *input, &gi);
        }
        Op::AvgPool { input, factor } => {
            let dims = dims3(&nodes[*input].value);
            let gi = kernels::avg_pool_backward(go, dims, *factor);
            accumulate(nodes, grads, *input, &gi);
        }
        Op::CropHw { input } => {
            let (c, ih, iw) = dims3(&nodes[*input].value);
            let (h, w) = {
                let s = nodes[id].value.shape();
                (s[1], s[2])
            };
            let mut gi = vec![0.0; c * ih * iw];
            for ch in 0..c {
                for y in 0..h {
                    let src = &go[ch * h * w + y * w..][..w];
                    let dst = &mut gi[ch * ih * iw + y * iw..][..w];
                    for (d, &s) in dst.iter_mut().zip(src.iter()) {
                        *d += s;
                    }
                }
            }
            accumulate(nodes, grads, *input, &gi);
        }
        Op::Slice1d { input, start } => {
            let mut gi = vec![0.0; nodes[*input].value.len()];
            for (g, &d) in gi[*start..*start + go.len()].iter_mut().zip(go.iter()) {
                *g += d;
            }
            accumulate(nodes, grads, *input, &gi);
        }
        Op::InstanceNorm { input, mean, inv_std } => {
            let dims = dims3(&nodes[*input].value);
            let gi = kernels::instance_norm_backward(
                go,
                nodes[*input].value.data(),
                dims,
                mean,
                inv_std,
            );
            accumulate(nodes, grads, *input, &gi);
        }
        Op::Reshape(a) => accumulate(nodes, grads, *a, go),
        Op::SumAll(a) => {
            let g = go[0];
            accumulate_mapped(nodes, grads, *a, &vec![g; nodes[*a].value.len()], |_, d| d);
        }
        Op::MeanAll(a) => {
            let g = go[0] / nodes[*a].value.len() as f64;
            accumulate_mapped(nodes, grads, *a, &vec![g; nodes[*a].value.len()], |_, d| d);
        }
        Op::L1(a) => {
            let g = go[0];
            let x = nodes[*a].value.data().to_vec();
            accumulate_mapped(nodes, grads, *a, &vec![g; x.len()], |i, d| {
                if x[i] > 0.0 {
                    d
                } else if x[i] < 0.0 {
                    -d
                } else {
                    0.0
                }
            });
        }
        Op::L2Sq(a) => {
            let g = go[0];
            let x = nodes[*a].value.data().to_vec();
            accumulate_mapped(nodes, grads, *a, &vec![g; x.len()], |i, d| 2.0 * x[i] * d);
        }
        Op::Mse(a, b) => {
            let (a, b) = (*a, *b);
            let g = go[0];
            let n = nodes[a].value.len() as f64;
            if nodes[a].requires_grad {
                let av = nodes[a].value.data().to_vec();
                let bv = nodes[b].value.data().to_vec();
                let delta: Vec<f64> =
                    av.iter().zip(&bv).map(|(x, y)| g * 2.0 * (x - y) / n).collect();
                accumulate(nodes, grads, a, &delta);
            }
            if nodes[b].requires_grad {
                let av = nodes[a].value.data().to_vec();
                let bv = nodes[b].value.data().to_vec();
                let delta: Vec<f64> =
                    av.iter().zip(&bv).map(|(x, y)| -g * 2.0 * (x - y) / n).collect();
                accumulate(nodes, grads, b, &delta);
            }
        }
        Op::CrossEntropyLogits { logits, target, probs } => {
            let g = go[0];
            let t = *target;
            let delta: Vec<f64> = probs
                .iter()
                .enumerate()
                .map(|(i, &p)| g * (p - if i == t { 1.0 } else { 0.0 }))
                .collect();
            accumulate(nodes, grads, *logits, &delta);
        }
        Op::CwMargin { logits, target, runner_up } => {
            if nodes[id].value.data()[0] > 0.0 {
                let g = go[0];
                let mut delta = vec![0.0; nodes[*logits].value.len()];
                delta[*runner_up] = g;
                delta[*target] = -g;
                accumulate(nodes, grads, *logits, &delta);
            }
        }
    }
}
