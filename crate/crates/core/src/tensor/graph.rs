//! The computation record: an append-only tape of primitive operations.
//!
//! Nodes are stored in execution order, which is a topological order of the
//! dataflow graph, so the backward pass is a single reverse sweep.

use super::float::{matmul, Float};
use super::kernels::{self, conv_out_size, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::sampling::{self, RegionBox, RoiTaps};
use super::Tensor;
use crate::error::{contract_err, shape_err, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        out_c: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    AvgPool {
        x: Var,
        k: usize,
    },
    Upsample2(Var),
    Concat(Vec<Var>),
    SelectChannel {
        x: Var,
        ch: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MulChannel {
        x: Var,
        m: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    AddScalar(Var),
    Relu(Var),
    Swish(Var),
    Sigmoid(Var),
    Log(Var),
    Abs(Var),
    ClampMin {
        x: Var,
        min: T,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    SumPerItem(Var),
    NormalizeItems {
        x: Var,
        inv_std: Vec<T>,
    },
    Reshape(Var),
    GlobalAvgPool(Var),
    AffineGrid {
        theta: Var,
        h: usize,
        w: usize,
    },
    GridSample {
        x: Var,
        grid: Var,
    },
    RoiPool {
        x: Var,
        taps: RoiTaps,
        bins: usize,
    },
    GatherLast {
        x: Var,
        idx: Vec<usize>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Conv2d { x, w, b, .. } | Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Concat(xs) => xs.clone(),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![*a, *b],
            MulChannel { x, m } => vec![*x, *m],
            GridSample { x, grid } => vec![*x, *grid],
            MaxPool2 { x, .. }
            | AvgPool { x, .. }
            | SelectChannel { x, .. }
            | Scale { x, .. }
            | ClampMin { x, .. }
            | Softmax { x, .. }
            | RoiPool { x, .. }
            | NormalizeItems { x, .. }
            | GatherLast { x, .. } => vec![*x],
            AffineGrid { theta, .. } => vec![*theta],
            Upsample2(x) | AddScalar(x) | Relu(x) | Swish(x) | Sigmoid(x) | Log(x) | Abs(x)
            | SumAll(x) | MeanAll(x) | SumLast(x) | SumPerItem(x) | Reshape(x)
            | GlobalAvgPool(x) => vec![*x],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Append-only computation record over element type `T`.
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    params: Vec<(Var, ParamId)>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims4(t: &Tensor<impl Float>, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(shape_err!("{what}: expected NCHW tensor, got shape {s:?}")),
    }
}

fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Parameter leaves registered through [`Graph::param`].
    pub fn param_links(&self) -> &[(Var, ParamId)] {
        &self.params
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, mut value: Tensor<T>, needs_grad: bool) -> Var {
        value.grad = None;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Free variable whose gradient is reported by [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Copies a parameter into the graph. Frozen parameters become constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let v = self.leaf(store.tensor(id).clone(), !store.is_frozen(id));
        self.params.push((v, id));
        v
    }

    fn tensor(shape: &[usize], data: Vec<T>) -> Tensor<T> {
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        }
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let xv = &self.nodes[x.0].value;
        let data = xv.data.iter().map(|&v| f(v)).collect();
        let t = Self::tensor(&xv.shape.clone(), data);
        self.push(t, op)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err!("{what}: shapes {sa:?} and {sb:?} differ"));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = av
            .data
            .iter()
            .zip(&bv.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Self::tensor(&av.shape.clone(), data);
        self.push(t, op)
    }

    // ----- layers -------------------------------------------------------

    /// 2-D convolution of an NCHW input with an OIKK kernel.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, c, h, wd) = dims4(self.value(x), "conv2d input")?;
        let (o, ci, k, k2) = dims4(self.value(w), "conv2d kernel")?;
        if k != k2 {
            return Err(shape_err!("conv2d: kernel must be square, got {k}x{k2}"));
        }
        if ci != c {
            return Err(shape_err!(
                "conv2d: input has {c} channels but kernel expects {ci}"
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(shape_err!(
                    "conv2d: bias shape {:?} does not match {o} output channels",
                    self.shape(b)
                ));
            }
        }
        let (Some(ho), Some(wo)) = (
            conv_out_size(h, k, stride, pad),
            conv_out_size(wd, k, stride, pad),
        ) else {
            return Err(shape_err!(
                "conv2d: spatial {h}x{wd} with padding {pad} is smaller than kernel {k} (stride {stride})"
            ));
        };
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let y = kernels::conv2d_forward(
            self.data(x),
            n,
            &geom,
            self.data(w),
            b.map(|b| self.data(b)),
            o,
        );
        let t = Self::tensor(&[n, o, ho, wo], y);
        Ok(self.push(
            t,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                out_c: o,
            },
        ))
    }

    /// Dense layer: `x [N, in] · wᵀ [in, out] + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, fin) = match *self.shape(x) {
            [n, f] => (n, f),
            ref s => return Err(shape_err!("linear: expected [N, in] input, got {s:?}")),
        };
        let (fout, win) = match *self.shape(w) {
            [o, i] => (o, i),
            ref s => return Err(shape_err!("linear: expected [out, in] weight, got {s:?}")),
        };
        if win != fin {
            return Err(shape_err!(
                "linear: input width {fin} != weight width {win}"
            ));
        }
        let mut y = vec![T::zero(); n * fout];
        matmul(
            false,
            true,
            n,
            fin,
            fout,
            self.data(x),
            self.data(w),
            T::zero(),
            &mut y,
        );
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(shape_err!(
                    "linear: bias shape {:?} != [{fout}]",
                    self.shape(b)
                ));
            }
            let bd = self.data(b);
            for row in y.chunks_mut(fout) {
                row.iter_mut().zip(bd).for_each(|(v, &bv)| *v += bv);
            }
        }
        let t = Self::tensor(&[n, fout], y);
        Ok(self.push(t, Op::Linear { x, w, b }))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x), "max_pool2")?;
        if h < 2 || w < 2 {
            return Err(shape_err!("max_pool2: spatial {h}x{w} smaller than 2x2"));
        }
        let (y, argmax) = kernels::max_pool2_forward(self.data(x), n * c, h, w);
        let t = Self::tensor(&[n, c, h / 2, w / 2], y);
        Ok(self.push(t, Op::MaxPool2 { x, argmax }))
    }

    /// Non-overlapping `k×k` average pooling.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x), "avg_pool")?;
        if k == 0 || h < k || w < k {
            return Err(shape_err!("avg_pool: window {k} does not fit {h}x{w}"));
        }
        let y = kernels::avg_pool_forward(self.data(x), n * c, h, w, k);
        let t = Self::tensor(&[n, c, h / k, w / k], y);
        Ok(self.push(t, Op::AvgPool { x, k }))
    }

    /// Bilinear ×2 upsampling (half-pixel centres, edge clamped).
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x), "upsample2")?;
        let y = kernels::upsample2_forward(self.data(x), n * c, h, w);
        let t = Self::tensor(&[n, c, 2 * h, 2 * w], y);
        Ok(self.push(t, Op::Upsample2(x)))
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(contract_err!("concat of zero tensors"));
        };
        let (n, _, h, w) = dims4(self.value(first), "concat")?;
        let mut total_c = 0;
        for &x in xs {
            let (ni, ci, hi, wi) = dims4(self.value(x), "concat")?;
            if (ni, hi, wi) != (n, h, w) {
                return Err(shape_err!(
                    "concat: {:?} incompatible with {:?}",
                    self.shape(x),
                    self.shape(first)
                ));
            }
            total_c += ci;
        }
        let mut y = Vec::with_capacity(n * total_c * h * w);
        for b in 0..n {
            for &x in xs {
                let c = self.shape(x)[1];
                let sz = c * h * w;
                y.extend_from_slice(&self.data(x)[b * sz..(b + 1) * sz]);
            }
        }
        let t = Self::tensor(&[n, total_c, h, w], y);
        Ok(self.push(t, Op::Concat(xs.to_vec())))
    }

    /// Extracts channel `ch` of an NCHW tensor as `[N, 1, H, W]`.
    pub fn select_channel(&mut self, x: Var, ch: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x), "select_channel")?;
        if ch >= c {
            return Err(shape_err!("select_channel: channel {ch} of {c}"));
        }
        let hw = h * w;
        let src = self.data(x);
        let mut y = Vec::with_capacity(n * hw);
        for b in 0..n {
            y.extend_from_slice(&src[(b * c + ch) * hw..(b * c + ch + 1) * hw]);
        }
        let t = Self::tensor(&[n, 1, h, w], y);
        Ok(self.push(t, Op::SelectChannel { x, ch }))
    }

    // ----- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.binary(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.binary(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.binary(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        Ok(self.binary(a, b, |x, y| x / y, Op::Div(a, b)))
    }

    /// `x [N, C, H, W] * m [N, 1, H, W]`, broadcasting the mask over channels.
    pub fn mul_channel(&mut self, x: Var, m: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x), "mul_channel")?;
        if self.shape(m) != [n, 1, h, w] {
            return Err(shape_err!(
                "mul_channel: mask {:?} does not broadcast over {:?}",
                self.shape(m),
                self.shape(x)
            ));
        }
        let hw = h * w;
        let (xd, md) = (self.data(x), self.data(m));
        let mut y = vec![T::zero(); n * c * hw];
        for b in 0..n {
            let mb = &md[b * hw..(b + 1) * hw];
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for i in 0..hw {
                    y[off + i] = xd[off + i] * mb[i];
                }
            }
        }
        let t = Self::tensor(&[n, c, h, w], y);
        Ok(self.push(t, Op::MulChannel { x, m }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        self.unary(x, |v| v * c, Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    /// `x · sigmoid(x)`.
    pub fn swish(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Swish(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn clamp_min(&mut self, x: Var, min: f64) -> Var {
        let min = T::lit(min);
        self.unary(x, |v| v.max(min), Op::ClampMin { x, min })
    }

    /// Numerically stable softmax (max-subtracted) along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err!(
                "softmax: axis {axis} out of range for {shape:?}"
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xd = self.data(x);
        let mut y = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mut mx = T::neg_infinity();
                for k in 0..len {
                    mx = mx.max(xd[at(k)]);
                }
                let mut s = T::zero();
                for k in 0..len {
                    let e = (xd[at(k)] - mx).exp();
                    y[at(k)] = e;
                    s += e;
                }
                for k in 0..len {
                    y[at(k)] = y[at(k)] / s;
                }
            }
        }
        let t = Self::tensor(&shape, y);
        Ok(self.push(t, Op::Softmax { x, axis }))
    }

    // ----- reductions and reshapes ---------------------------------------

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: T = self.data(x).iter().copied().sum();
        self.push(Self::tensor(&[1], vec![s]), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s: T = d.iter().copied().sum::<T>() / T::lit(d.len() as f64);
        self.push(Self::tensor(&[1], vec![s]), Op::MeanAll(x))
    }

    /// Sums the last axis away.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some((&k, rest)) = shape.split_last() else {
            return Err(shape_err!("sum_last: empty shape"));
        };
        let out_shape = if rest.is_empty() {
            vec![1]
        } else {
            rest.to_vec()
        };
        let y = self
            .data(x)
            .chunks(k)
            .map(|c| c.iter().copied().sum())
            .collect();
        Ok(self.push(Self::tensor(&out_shape, y), Op::SumLast(x)))
    }

    /// Sums every axis but the first: `[N, ...] -> [N]`.
    pub fn sum_per_item(&mut self, x: Var) -> Var {
        let n = self.shape(x)[0];
        let per = self.value(x).len() / n;
        let y = self
            .data(x)
            .chunks(per)
            .map(|c| c.iter().copied().sum())
            .collect();
        self.push(Self::tensor(&[n], y), Op::SumPerItem(x))
    }

    /// Shifts and scales every item (first axis) to zero mean and unit
    /// variance over its remaining elements; `eps` is added to the variance.
    pub fn normalize_items(&mut self, x: Var, eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let per = self.value(x).len() / shape[0].max(1);
        let mut y = Vec::with_capacity(self.value(x).len());
        let mut inv_std = Vec::with_capacity(shape[0]);
        for c in self.data(x).chunks(per) {
            let len = T::lit(per as f64);
            let mean = c.iter().copied().sum::<T>() / len;
            let var = c.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / len;
            let inv = T::one() / (var + T::lit(eps)).sqrt();
            y.extend(c.iter().map(|&v| (v - mean) * inv));
            inv_std.push(inv);
        }
        self.push(Self::tensor(&shape, y), Op::NormalizeItems { x, inv_std })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() {
            return Err(shape_err!(
                "reshape: cannot view {:?} as {shape:?}",
                self.shape(x)
            ));
        }
        let t = Self::tensor(shape, self.data(x).to_vec());
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x), "global_avg_pool")?;
        let inv = T::one() / T::lit((h * w) as f64);
        let y = self
            .data(x)
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        Ok(self.push(Self::tensor(&[n, c], y), Op::GlobalAvgPool(x)))
    }

    /// Picks `x[m, idx[m]]` from an `[M, C]` tensor.
    pub fn gather_last(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, c) = match *self.shape(x) {
            [m, c] => (m, c),
            ref s => return Err(shape_err!("gather_last: expected [M, C], got {s:?}")),
        };
        if idx.len() != m {
            return Err(shape_err!(
                "gather_last: {} indices for {m} rows",
                idx.len()
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(shape_err!("gather_last: index {bad} out of range {c}"));
        }
        let xd = self.data(x);
        let y = idx
            .iter()
            .enumerate()
            .map(|(r, &i)| xd[r * c + i])
            .collect();
        Ok(self.push(
            Self::tensor(&[m], y),
            Op::GatherLast {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    // ----- spatial transforms --------------------------------------------

    /// `theta [N, 6] -> grid [N, H, W, 2]` of normalized sampling coordinates.
    pub fn affine_grid(&mut self, theta: Var, h: usize, w: usize) -> Result<Var> {
        let n = match *self.shape(theta) {
            [n, 6] => n,
            ref s => return Err(shape_err!("affine_grid: expected [N, 6] theta, got {s:?}")),
        };
        if h == 0 || w == 0 {
            return Err(contract_err!("affine_grid: output size must be positive"));
        }
        let td = self.data(theta);
        let mut y = Vec::with_capacity(n * h * w * 2);
        for b in 0..n {
            y.extend(sampling::affine_grid_values(&td[b * 6..b * 6 + 6], h, w));
        }
        Ok(self.push(
            Self::tensor(&[n, h, w, 2], y),
            Op::AffineGrid { theta, h, w },
        ))
    }

    /// Bilinear sampling of `x [N, C, H, W]` at `grid [N, Ho, Wo, 2]`.
    /// Locations outside `[-1, 1]` read zero.
    pub fn grid_sample(&mut self, x: Var, grid: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x), "grid_sample input")?;
        let (gn, ho, wo) = match *self.shape(grid) {
            [gn, ho, wo, 2] => (gn, ho, wo),
            ref s => {
                return Err(shape_err!(
                    "grid_sample: grid must be [N, H, W, 2], got {s:?}"
                ))
            }
        };
        if gn != n {
            return Err(shape_err!("grid_sample: batch {n} vs grid batch {gn}"));
        }
        let y = sampling::grid_sample_forward(self.data(x), n, c, h, w, self.data(grid), ho, wo);
        Ok(self.push(Self::tensor(&[n, c, ho, wo], y), Op::GridSample { x, grid }))
    }

    /// Averages each box of `x [N, C, H, W]` onto a `bins×bins` grid;
    /// output `[N * boxes, C, bins, bins]`, box-minor.
    pub fn roi_pool(&mut self, x: Var, boxes: &[RegionBox], bins: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x), "roi_pool")?;
        if boxes.is_empty() || bins == 0 {
            return Err(contract_err!(
                "roi_pool: needs at least one box and one bin"
            ));
        }
        let taps = sampling::roi_taps(boxes, h, w, bins);
        let y = sampling::roi_pool_forward(self.data(x), n, c, h, w, &taps, bins);
        let t = Self::tensor(&[n * boxes.len(), c, bins, bins], y);
        Ok(self.push(t, Op::RoiPool { x, taps, bins }))
    }

    // ----- backward ------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Every node that depends on a
    /// gradient-requiring leaf receives its gradient; each node is visited
    /// once, in reverse execution order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(contract_err!("backward on an empty computation record"));
        }
        if self.value(loss).len() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let want = |v: Var| self.nodes[v.0].needs_grad;
        // Mutable access to the (lazily allocated) gradient of an input.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                let len = self.nodes[v.0].value.len();
                grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                out_c,
            } => {
                let n = self.shape(*x)[0];
                let xd = self.data(*x);
                let wd = self.data(*w);
                let mut dx = want(*x).then(|| {
                    grads[x.0]
                        .take()
                        .unwrap_or_else(|| vec![T::zero(); xd.len()])
                });
                let mut dw = want(*w).then(|| {
                    grads[w.0]
                        .take()
                        .unwrap_or_else(|| vec![T::zero(); wd.len()])
                });
                let mut db = b
                    .filter(|b| want(*b))
                    .map(|b| grads[b.0].take().unwrap_or_else(|| vec![T::zero(); *out_c]));
                kernels::conv2d_backward(
                    xd,
                    n,
                    geom,
                    wd,
                    *out_c,
                    gy,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    grads[x.0] = Some(dx);
                }
                if let Some(dw) = dw {
                    grads[w.0] = Some(dw);
                }
                if let (Some(db), Some(b)) = (db, b) {
                    grads[b.0] = Some(db);
                }
            }
            Op::Linear { x, w, b } => {
                let (n, fin) = (self.shape(*x)[0], self.shape(*x)[1]);
                let fout = self.shape(*w)[0];
                if want(*x) {
                    let wd = self.data(*w);
                    matmul(false, false, n, fout, fin, gy, wd, T::one(), acc!(*x));
                }
                if want(*w) {
                    let xd = self.data(*x);
                    matmul(true, false, fout, n, fin, gy, xd, T::one(), acc!(*w));
                }
                if let Some(b) = b.filter(|b| want(*b)) {
                    let db = acc!(b);
                    for row in gy.chunks(fout) {
                        db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let dx = acc!(*x);
                for (&a, &g) in argmax.iter().zip(gy) {
                    dx[a as usize] += g;
                }
            }
            Op::AvgPool { x, k } => {
                let (n, c, h, w) = dims4(self.value(*x), "").expect("validated in forward");
                kernels::avg_pool_backward(gy, n * c, h, w, *k, acc!(*x));
            }
            Op::Upsample2(x) => {
                let (n, c, h, w) = dims4(self.value(*x), "").expect("validated in forward");
                kernels::upsample2_backward(gy, n * c, h, w, acc!(*x));
            }
            Op::Concat(xs) => {
                let shape = node.value.shape();
                let (n, total_c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let mut off = 0;
                for &x in xs {
                    let c = self.shape(x)[1];
                    if want(x) {
                        let dx = acc!(x);
                        for b in 0..n {
                            let src = &gy[(b * total_c + off) * hw..(b * total_c + off + c) * hw];
                            let dst = &mut dx[b * c * hw..(b + 1) * c * hw];
                            dst.iter_mut().zip(src).for_each(|(d, &g)| *d += g);
                        }
                    }
                    off += c;
                }
            }
            Op::SelectChannel { x, ch } => {
                let (n, c, h, w) = dims4(self.value(*x), "").expect("validated in forward");
                let hw = h * w;
                let dx = acc!(*x);
                for b in 0..n {
                    let dst = &mut dx[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    dst.iter_mut()
                        .zip(&gy[b * hw..(b + 1) * hw])
                        .for_each(|(d, &g)| *d += g);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if want(v) {
                        acc!(v).iter_mut().zip(gy).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    acc!(*a).iter_mut().zip(gy).for_each(|(d, &g)| *d += g);
                }
                if want(*b) {
                    acc!(*b).iter_mut().zip(gy).for_each(|(d, &g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    let bd = self.data(*b);
                    for ((d, &g), &bv) in acc!(*a).iter_mut().zip(gy).zip(bd) {
                        *d += g * bv;
                    }
                }
                if want(*b) {
                    let ad = self.data(*a);
                    for ((d, &g), &av) in acc!(*b).iter_mut().zip(gy).zip(ad) {
                        *d += g * av;
                    }
                }
            }
            Op::Div(a, b) => {
                let bd = self.data(*b);
                if want(*a) {
                    for ((d, &g), &bv) in acc!(*a).iter_mut().zip(gy).zip(bd) {
                        *d += g / bv;
                    }
                }
                if want(*b) {
                    for ((d, &g), (&yv, &bv)) in acc!(*b).iter_mut().zip(gy).zip(y.iter().zip(bd)) {
                        *d -= g * yv / bv;
                    }
                }
            }
            Op::MulChannel { x, m } => {
                let (n, c, h, w) = dims4(self.value(*x), "").expect("validated in forward");
                let hw = h * w;
                if want(*x) {
                    let md = self.data(*m);
                    let dx = acc!(*x);
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            for i in 0..hw {
                                dx[off + i] += gy[off + i] * md[b * hw + i];
                            }
                        }
                    }
                }
                if want(*m) {
                    let xd = self.data(*x);
                    let dm = acc!(*m);
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            for i in 0..hw {
                                dm[b * hw + i] += gy[off + i] * xd[off + i];
                            }
                        }
                    }
                }
            }
            Op::Scale { x, c } => {
                let c = *c;
                acc!(*x).iter_mut().zip(gy).for_each(|(d, &g)| *d += g * c);
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                acc!(*x).iter_mut().zip(gy).for_each(|(d, &g)| *d += g);
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                for ((d, &g), &xv) in acc!(*x).iter_mut().zip(gy).zip(xd) {
                    if xv > T::zero() {
                        *d += g;
                    }
                }
            }
            Op::Swish(x) => {
                let xd = self.data(*x);
                for ((d, &g), &xv) in acc!(*x).iter_mut().zip(gy).zip(xd) {
                    let s = sigmoid(xv);
                    *d += g * s * (T::one() + xv * (T::one() - s));
                }
            }
            Op::Sigmoid(x) => {
                for ((d, &g), &yv) in acc!(*x).iter_mut().zip(gy).zip(y) {
                    *d += g * yv * (T::one() - yv);
                }
            }
            Op::Log(x) => {
                let xd = self.data(*x);
                for ((d, &g), &xv) in acc!(*x).iter_mut().zip(gy).zip(xd) {
                    *d += g / xv;
                }
            }
            Op::Abs(x) => {
                let xd = self.data(*x);
                for ((d, &g), &xv) in acc!(*x).iter_mut().zip(gy).zip(xd) {
                    if xv > T::zero() {
                        *d += g;
                    } else if xv < T::zero() {
                        *d -= g;
                    }
                }
            }
            Op::ClampMin { x, min } => {
                let xd = self.data(*x);
                for ((d, &g), &xv) in acc!(*x).iter_mut().zip(gy).zip(xd) {
                    if xv >= *min {
                        *d += g;
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let dx = acc!(*x);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let mut dot = T::zero();
                        for k in 0..len {
                            dot += gy[at(k)] * y[at(k)];
                        }
                        for k in 0..len {
                            dx[at(k)] += y[at(k)] * (gy[at(k)] - dot);
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                let g = gy[0];
                acc!(*x).iter_mut().for_each(|d| *d += g);
            }
            Op::MeanAll(x) => {
                let len = self.value(*x).len();
                let g = gy[0] / T::lit(len as f64);
                acc!(*x).iter_mut().for_each(|d| *d += g);
            }
            Op::SumLast(x) => {
                let k = *self.shape(*x).last().expect("non-empty");
                for (chunk, &g) in acc!(*x).chunks_mut(k).zip(gy) {
                    chunk.iter_mut().for_each(|d| *d += g);
                }
            }
            Op::SumPerItem(x) => {
                let n = self.shape(*x)[0];
                let per = self.value(*x).len() / n;
                for (chunk, &g) in acc!(*x).chunks_mut(per).zip(gy) {
                    chunk.iter_mut().for_each(|d| *d += g);
                }
            }
            Op::NormalizeItems { x, inv_std } => {
                let per = y.len() / inv_std.len();
                let len = T::lit(per as f64);
                let dx = acc!(*x);
                for (i, &inv) in inv_std.iter().enumerate() {
                    let r = i * per..(i + 1) * per;
                    let (g, yv) = (&gy[r.clone()], &y[r.clone()]);
                    let g_mean = g.iter().copied().sum::<T>() / len;
                    let gy_mean = g.iter().zip(yv).map(|(&a, &b)| a * b).sum::<T>() / len;
                    for ((d, &gi), &yi) in dx[r].iter_mut().zip(g).zip(yv) {
                        *d += inv * (gi - g_mean - yi * gy_mean);
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = dims4(self.value(*x), "").expect("validated in forward");
                let inv = T::one() / T::lit((h * w) as f64);
                for (chunk, &g) in acc!(*x).chunks_mut(h * w).zip(gy) {
                    chunk.iter_mut().for_each(|d| *d += g * inv);
                }
            }
            Op::GatherLast { x, idx } => {
                let c = self.shape(*x)[1];
                let dx = acc!(*x);
                for (r, (&i, &g)) in idx.iter().zip(gy).enumerate() {
                    dx[r * c + i] += g;
                }
            }
            Op::AffineGrid { theta, h, w } => {
                let n = self.shape(*theta)[0];
                let dt = acc!(*theta);
                for b in 0..n {
                    let hw2 = h * w * 2;
                    sampling::affine_grid_backward(
                        &gy[b * hw2..(b + 1) * hw2],
                        *h,
                        *w,
                        &mut dt[b * 6..b * 6 + 6],
                    );
                }
            }
            Op::GridSample { x, grid } => {
                let (n, c, h, w) = dims4(self.value(*x), "").expect("validated in forward");
                let (ho, wo) = (node.value.shape()[2], node.value.shape()[3]);
                let xd = self.data(*x);
                let gd = self.data(*grid);
                let mut dx = want(*x).then(|| {
                    grads[x.0]
                        .take()
                        .unwrap_or_else(|| vec![T::zero(); xd.len()])
                });
                let mut dg = want(*grid).then(|| {
                    grads[grid.0]
                        .take()
                        .unwrap_or_else(|| vec![T::zero(); gd.len()])
                });
                sampling::grid_sample_backward(
                    xd,
                    n,
                    c,
                    h,
                    w,
                    gd,
                    ho,
                    wo,
                    gy,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    grads[x.0] = Some(dx);
                }
                if let Some(dg) = dg {
                    grads[grid.0] = Some(dg);
                }
            }
            Op::RoiPool { x, taps, bins } => {
                let (n, c, h, w) = dims4(self.value(*x), "").expect("validated in forward");
                sampling::roi_pool_backward(gy, n, c, h, w, taps, *bins, acc!(*x));
            }
        }
    }
}
