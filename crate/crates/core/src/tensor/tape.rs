//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in execution order, so the tape is topologically
//! sorted by construction; `backward` walks it once in reverse.

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Log,
    Exp,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose(Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Upsample2x(Var),
    AvgPool2x(Var),
    LogSoftmax {
        input: Var,
        split: (usize, usize, usize),
    },
    L2Normalize {
        input: Var,
        split: (usize, usize, usize),
        eps: T,
        norms: Vec<T>,
    },
    MaskedMean {
        input: Var,
        mask: Vec<bool>,
        count: usize,
    },
    PickMean {
        input: Var,
        picks: Vec<usize>,
    },
    StackRows {
        rows: Vec<Option<Var>>,
        width: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records differentiable operations and replays them backwards.
///
/// One tape per thread; tapes share nothing.
#[derive(Debug)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf: receives a gradient on `backward`.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf: never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` loss with respect to `v`, if any
    /// flowed there.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    // ---- elementwise -------------------------------------------------

    pub fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match op {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (na, nb) = (self.value(a).numel(), self.value(b).numel());
        let out_shape = if sa == sb || nb == 1 {
            sa.clone()
        } else if na == 1 {
            sb.clone()
        } else {
            return Err(shape_err(name, &sa, &sb));
        };
        let n = out_shape.iter().product::<usize>();
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let at = |i: usize| if na == 1 { xa[0] } else { xa[i] };
        let bt = |i: usize| if nb == 1 { xb[0] } else { xb[i] };
        if op == Binary::Div && T::STRICT && xb.iter().any(|&v| v == T::zero()) {
            return Err(Error::DivByZero { op: "div" });
        }
        let data: Vec<T> = (0..n)
            .map(|i| match op {
                Binary::Add => at(i) + bt(i),
                Binary::Sub => at(i) - bt(i),
                Binary::Mul => at(i) * bt(i),
                Binary::Div => at(i) / bt(i),
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn unary(&mut self, op: Unary, a: Var) -> Var {
        let f: fn(T) -> T = match op {
            Unary::Relu => |x| if x > T::zero() { x } else { T::zero() },
            Unary::Log => |x| x.ln(),
            Unary::Exp => |x| x.exp(),
            Unary::Neg => |x| -x,
        };
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, Op::Unary(op, a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Neg, a)
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let value = self.value(a).map(|x| x * k);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, k), rg)
    }

    // ---- reductions and layout --------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(a);
        self.push(value, Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::invalid(
                "transpose",
                format!("rank-2 input required, got {s:?}"),
            ));
        }
        let data = kernels::transpose(self.value(a).data(), s[0], s[1]);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![s[1], s[0]], data)?, Op::Transpose(a), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let data = kernels::matmul(
            self.value(a).data(),
            self.value(b).data(),
            sa[0],
            sa[1],
            sb[1],
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![sa[0], sb[1]], data)?, Op::MatMul(a, b), rg))
    }

    // ---- convolution and resampling ---------------------------------

    /// Zero-padded square convolution, `input [N,C,H,W]`, `kernel [K,C,k,k]`
    /// with `k` in {1, 3}, `bias [K]`, stride 1 or 2.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        let sb = self.shape(bias).to_vec();
        if si.len() != 4 || sk.len() != 4 || sk[2] != sk[3] || !(sk[2] == 1 || sk[2] == 3) {
            return Err(shape_err("conv2d", &si, &sk));
        }
        if si[1] != sk[1] {
            return Err(Error::invalid(
                "conv2d",
                format!(
                    "channel mismatch: input {:?} has {} channels, kernel {:?} expects {}",
                    si, si[1], sk, sk[1]
                ),
            ));
        }
        if sb != [sk[0]] {
            return Err(shape_err("conv2d bias", &sb, &[sk[0]]));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::invalid(
                "conv2d",
                format!("stride {stride} unsupported"),
            ));
        }
        let geom = ConvGeom {
            n: si[0],
            c: si[1],
            h: si[2],
            w: si[3],
            k: sk[0],
            ksize: sk[2],
            stride,
            pad: sk[2] / 2,
        };
        let data = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let out = Tensor::new(vec![geom.n, geom.k, geom.out_h(), geom.out_w()], data)?;
        let rg = self.rg(input) || self.rg(kernel) || self.rg(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    fn planes(&self, a: Var, op: &'static str) -> Result<(usize, usize, usize, Vec<usize>)> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::invalid(op, format!("need rank >= 2, got {s:?}")));
        }
        let r = s.len();
        Ok((s[..r - 2].iter().product(), s[r - 2], s[r - 1], s))
    }

    /// Nearest-neighbour 2x upsampling of the last two axes.
    pub fn upsample_nearest2x(&mut self, a: Var) -> Result<Var> {
        let (p, h, w, mut s) = self.planes(a, "upsample_nearest2x")?;
        let data = kernels::upsample2x(self.value(a).data(), p, h, w);
        let r = s.len();
        s[r - 2] *= 2;
        s[r - 1] *= 2;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(s, data)?, Op::Upsample2x(a), rg))
    }

    /// 2x2 stride-2 average pooling of the last two axes (even extents).
    pub fn avg_pool2x(&mut self, a: Var) -> Result<Var> {
        let (p, h, w, mut s) = self.planes(a, "avg_pool2x")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(
                "avg_pool2x",
                format!("odd spatial extent {s:?}"),
            ));
        }
        let data = kernels::avgpool2x(self.value(a).data(), p, h, w);
        let r = s.len();
        s[r - 2] /= 2;
        s[r - 1] /= 2;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(s, data)?, Op::AvgPool2x(a), rg))
    }

    // ---- normalisation ----------------------------------------------

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::invalid(
                "log_softmax",
                format!("axis {axis} out of range for {s:?}"),
            ));
        }
        if let Some(bad) = self.value(a).data().iter().find(|v| v.is_nan()) {
            return Err(Error::NonFinite {
                op: "log_softmax",
                detail: format!("input contains {bad}"),
            });
        }
        let split = kernels::axis_split(&s, axis);
        let data = kernels::log_softmax(self.value(a).data(), split.0, split.1, split.2);
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(s, data)?,
            Op::LogSoftmax { input: a, split },
            rg,
        ))
    }

    /// Unit-normalises every lane along `axis`; lanes with norm `<= eps`
    /// become zero.
    pub fn l2_normalize(&mut self, a: Var, axis: usize, eps: T) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::invalid(
                "l2_normalize",
                format!("axis {axis} out of range for {s:?}"),
            ));
        }
        let split = kernels::axis_split(&s, axis);
        let (data, norms) =
            kernels::l2_normalize(self.value(a).data(), split.0, split.1, split.2, eps);
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(s, data)?,
            Op::L2Normalize {
                input: a,
                split,
                eps,
                norms,
            },
            rg,
        ))
    }

    /// Per-channel mean of `input [D,H,W]` over pixels where `mask [H*W]` is
    /// set. `None` when the mask selects nothing.
    pub fn masked_mean(&mut self, input: Var, mask: &[bool]) -> Result<Option<Var>> {
        let s = self.shape(input).to_vec();
        if s.len() != 3 || s[1] * s[2] != mask.len() {
            return Err(shape_err("masked_mean", &s, &[mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Ok(None);
        }
        let px = mask.len();
        let x = self.value(input).data();
        let inv = T::one() / T::c(count as f64);
        let data: Vec<T> = (0..s[0])
            .map(|d| {
                let plane = &x[d * px..(d + 1) * px];
                plane
                    .iter()
                    .zip(mask)
                    .filter(|(_, &m)| m)
                    .map(|(&v, _)| v)
                    .sum::<T>()
                    * inv
            })
            .collect();
        let rg = self.rg(input);
        Ok(Some(self.push(
            Tensor::new(vec![s[0]], data)?,
            Op::MaskedMean {
                input,
                mask: mask.to_vec(),
                count,
            },
            rg,
        )))
    }

    /// Mean of `-input[i]` over the flat indices `picks`: the negative
    /// log-likelihood once `input` holds log-probabilities. An empty pick
    /// list yields a constant zero.
    pub fn pick_mean_neg(&mut self, input: Var, picks: Vec<usize>) -> Result<Var> {
        let n = self.value(input).numel();
        if let Some(&bad) = picks.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(
                "pick_mean_neg",
                format!("index {bad} out of range {n}"),
            ));
        }
        let x = self.value(input).data();
        let v = if picks.is_empty() {
            T::zero()
        } else {
            -picks.iter().map(|&i| x[i]).sum::<T>() / T::c(picks.len() as f64)
        };
        let rg = self.rg(input) && !picks.is_empty();
        Ok(self.push(Tensor::scalar(v), Op::PickMean { input, picks }, rg))
    }

    /// Stacks rank-1 rows of length `width` into `[rows, width]`; missing
    /// rows are zero.
    pub fn stack_rows(&mut self, rows: &[Option<Var>], width: usize) -> Result<Var> {
        let mut data = vec![T::zero(); rows.len() * width];
        for (r, row) in rows.iter().enumerate() {
            if let Some(v) = row {
                let s = self.shape(*v);
                if s != [width] {
                    return Err(shape_err("stack_rows", s, &[width]));
                }
                data[r * width..(r + 1) * width].copy_from_slice(self.value(*v).data());
            }
        }
        let rg = rows.iter().flatten().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(vec![rows.len(), width], data)?,
            Op::StackRows {
                rows: rows.to_vec(),
                width,
            },
            rg,
        ))
    }

    // ---- backward ----------------------------------------------------

    fn accumulate(&mut self, v: Var, g: &[T]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    /// Populates gradients of `loss` with respect to every node that
    /// requires them. Errors on non-scalar loss or a second call without
    /// [`Tape::reset_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Backward("empty tape".into()));
        }
        if self.backward_done {
            return Err(Error::Backward(
                "gradients already computed; call reset_grads first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, g: &[T]) {
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => self.back_binary(*kind, *a, *b, g),
            Op::Unary(kind, a) => {
                let x = self.value(*a).data();
                let y = self.nodes[idx].value.data();
                let d: Vec<T> = match kind {
                    Unary::Relu => x
                        .iter()
                        .zip(g)
                        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                        .collect(),
                    Unary::Log => x.iter().zip(g).map(|(&x, &g)| g / x).collect(),
                    Unary::Exp => y.iter().zip(g).map(|(&y, &g)| g * y).collect(),
                    Unary::Neg => g.iter().map(|&g| -g).collect(),
                };
                self.accumulate(*a, &d);
            }
            Op::Scale(a, k) => {
                let d: Vec<T> = g.iter().map(|&g| g * *k).collect();
                self.accumulate(*a, &d);
            }
            Op::Sum(a) => {
                let d = vec![g[0]; self.value(*a).numel()];
                self.accumulate(*a, &d);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                let d = vec![g[0] / T::c(n as f64); n];
                self.accumulate(*a, &d);
            }
            Op::Reshape(a) => self.accumulate(*a, g),
            Op::Transpose(a) => {
                let s = self.shape(*a).to_vec();
                let d = kernels::transpose(g, s[1], s[0]);
                self.accumulate(*a, &d);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    let bt = kernels::transpose(self.value(*b).data(), k, n);
                    let da = kernels::matmul(g, &bt, m, n, k);
                    self.accumulate(*a, &da);
                }
                if self.rg(*b) {
                    let at = kernels::transpose(self.value(*a).data(), m, k);
                    let db = kernels::matmul(&at, g, k, m, n);
                    self.accumulate(*b, &db);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let (d_in, d_ker, d_bias) = kernels::conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g,
                    self.rg(*input),
                    self.rg(*kernel),
                );
                if self.rg(*input) {
                    self.accumulate(*input, &d_in);
                }
                if self.rg(*kernel) {
                    self.accumulate(*kernel, &d_ker);
                }
                self.accumulate(*bias, &d_bias);
            }
            Op::Upsample2x(a) => {
                let s = self.shape(*a).to_vec();
                let r = s.len();
                let p = s[..r - 2].iter().product();
                let d = kernels::upsample2x_adjoint(g, p, s[r - 2], s[r - 1]);
                self.accumulate(*a, &d);
            }
            Op::AvgPool2x(a) => {
                let s = self.shape(*a).to_vec();
                let r = s.len();
                let p: usize = s[..r - 2].iter().product();
                let (h, w) = (s[r - 2], s[r - 1]);
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::c(0.25);
                let mut d = vec![T::zero(); p * h * w];
                for pl in 0..p {
                    for y in 0..h {
                        for x in 0..w {
                            d[pl * h * w + y * w + x] =
                                g[pl * oh * ow + (y / 2) * ow + x / 2] * quarter;
                        }
                    }
                }
                self.accumulate(*a, &d);
            }
            Op::LogSoftmax {
                input,
                split: (outer, len, inner),
            } => {
                let y = self.nodes[idx].value.data();
                let mut d = vec![T::zero(); y.len()];
                for o in 0..*outer {
                    let base = o * len * inner;
                    for i in 0..*inner {
                        let gs: T = (0..*len).map(|j| g[base + j * inner + i]).sum();
                        for j in 0..*len {
                            let at = base + j * inner + i;
                            d[at] = g[at] - y[at].exp() * gs;
                        }
                    }
                }
                self.accumulate(*input, &d);
            }
            Op::L2Normalize {
                input,
                split: (outer, len, inner),
                eps,
                norms,
            } => {
                let y = self.nodes[idx].value.data();
                let mut d = vec![T::zero(); y.len()];
                for o in 0..*outer {
                    let base = o * len * inner;
                    for i in 0..*inner {
                        let n = norms[o * inner + i];
                        if n <= *eps {
                            continue;
                        }
                        let dot: T = (0..*len)
                            .map(|j| y[base + j * inner + i] * g[base + j * inner + i])
                            .sum();
                        for j in 0..*len {
                            let at = base + j * inner + i;
                            d[at] = (g[at] - y[at] * dot) / n;
                        }
                    }
                }
                self.accumulate(*input, &d);
            }
            Op::MaskedMean { input, mask, count } => {
                let dch = self.shape(*input)[0];
                let px = mask.len();
                let inv = T::one() / T::c(*count as f64);
                let mut d = vec![T::zero(); dch * px];
                for c in 0..dch {
                    for (p, &m) in mask.iter().enumerate() {
                        if m {
                            d[c * px + p] = g[c] * inv;
                        }
                    }
                }
                self.accumulate(*input, &d);
            }
            Op::PickMean { input, picks } => {
                if !picks.is_empty() {
                    let mut d = vec![T::zero(); self.value(*input).numel()];
                    let w = g[0] / T::c(picks.len() as f64);
                    for &i in picks {
                        d[i] -= w;
                    }
                    self.accumulate(*input, &d);
                }
            }
            Op::StackRows { rows, width } => {
                for (r, row) in rows.iter().enumerate() {
                    if let Some(v) = row {
                        let slice = g[r * width..(r + 1) * width].to_vec();
                        self.accumulate(*v, &slice);
                    }
                }
            }
        }
        self.nodes[idx].op = op;
    }

    fn back_binary(&mut self, kind: Binary, a: Var, b: Var, g: &[T]) {
        let xa = self.value(a).data().to_vec();
        let xb = self.value(b).data().to_vec();
        let (na, nb) = (xa.len(), xb.len());
        let n = g.len();
        let at = |i: usize| if na == 1 && n != 1 { xa[0] } else { xa[i] };
        let bt = |i: usize| if nb == 1 && n != 1 { xb[0] } else { xb[i] };
        let reduce = |d: Vec<T>, len: usize| -> Vec<T> {
            if len == 1 && d.len() != 1 {
                vec![d.iter().copied().sum()]
            } else {
                d
            }
        };
        if self.rg(a) {
            let da: Vec<T> = (0..n)
                .map(|i| match kind {
                    Binary::Add | Binary::Sub => g[i],
                    Binary::Mul => g[i] * bt(i),
                    Binary::Div => g[i] / bt(i),
                })
                .collect();
            self.accumulate(a, &reduce(da, na));
        }
        if self.rg(b) {
            let db: Vec<T> = (0..n)
                .map(|i| match kind {
                    Binary::Add => g[i],
                    Binary::Sub => -g[i],
                    Binary::Mul => g[i] * at(i),
                    Binary::Div => -g[i] * at(i) / (bt(i) * bt(i)),
                })
                .collect();
            self.accumulate(b, &reduce(db, nb));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_and_relu_values() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s).data(), &[4.0, 6.0]);
        let r = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(r);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn product_rule() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.param(Tensor::scalar(5.0));
        let p = tape.mul(x, y).unwrap();
        tape.backward(p).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[5.0]);
        assert_eq!(tape.grad(y).unwrap().data(), &[3.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn strict_mode_rejects_zero_division() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2], &[1.0, 1.0]));
        let b = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(tape.div(a, b), Err(Error::DivByZero { .. })));
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::filled(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.div(a, b).is_ok());
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[4], &[1.0, -2.0, 3.0, 0.5]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);

        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_twice_requires_reset() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(tape.backward(s).is_err());
        tape.reset_grads();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
        assert!(Tape::<f64>::new().backward(Var(0)).is_err());
    }

    #[test]
    fn conv_counts_padding() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::filled(&[1, 1, 3, 3], 1.0));
        let k = tape.constant(Tensor::filled(&[1, 1, 3, 3], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, k, b, 1).unwrap();
        let v = tape.value(y);
        assert_eq!(v.at(&[0, 0, 1, 1]), 9.0);
        assert_eq!(v.at(&[0, 0, 0, 0]), 4.0);
        assert_eq!(v.at(&[0, 0, 0, 1]), 6.0);
    }

    #[test]
    fn conv_identity_kernel_and_channel_check() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..20).map(|i| i as f64 * 0.5 - 3.0).collect();
        let x = tape.constant(t(&[1, 1, 4, 5], &data));
        let mut kd = vec![0.0; 9];
        kd[4] = 1.0;
        let k = tape.constant(t(&[1, 1, 3, 3], &kd));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, k, b, 1).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
        let y2 = tape.conv2d(x, k, b, 2).unwrap();
        assert_eq!(tape.shape(y2), &[1, 1, 2, 3]);

        let bad = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let err = tape.conv2d(x, bad, b, 1).unwrap_err().to_string();
        assert!(err.contains("channel"), "{err}");
    }

    #[test]
    fn upsample_blocks_and_adjoint() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.upsample_nearest2x(x).unwrap();
        assert_eq!(
            tape.value(y).data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0; 4]);

        let c = tape.constant(Tensor::filled(&[1, 3, 2], 7.0));
        let up = tape.upsample_nearest2x(c).unwrap();
        let down = tape.avg_pool2x(up).unwrap();
        assert_eq!(tape.value(down), tape.value(c));
    }

    #[test]
    fn log_softmax_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.log_softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v + std::f64::consts::LN_2).abs() < 1e-15);
        }
        let x = tape.constant(t(&[2], &[1000.0, 0.0]));
        let y = tape.log_softmax(x, 0).unwrap();
        let v = tape.value(y).data();
        assert!(v[0].abs() < 1e-12 && (v[1] + 1000.0).abs() < 1e-9);
        let x = tape.constant(t(&[2], &[f64::NAN, 0.0]));
        assert!(tape.log_softmax(x, 0).is_err());
    }

    #[test]
    fn masked_mean_and_absent() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[1, 2, 2], &[1.0, 3.0, 5.0, 7.0]));
        let m = tape
            .masked_mean(x, &[true, true, false, false])
            .unwrap()
            .unwrap();
        assert_eq!(tape.value(m).data(), &[2.0]);
        assert!(tape.masked_mean(x, &[false; 4]).unwrap().is_none());
        let s = tape.sum(m);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn l2_normalize_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[3.0, 4.0]));
        let y = tape.l2_normalize(x, 0, 1e-8).unwrap();
        assert_eq!(tape.value(y).data(), &[0.6, 0.8]);
        let z = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.l2_normalize(z, 0, 1e-8).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn constants_never_get_gradients() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let x = tape.param(t(&[2], &[3.0, 4.0]));
        let p = tape.mul(c, x).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 2.0]);
    }
}
