use std::sync::atomic::{AtomicU64, Ordering};

use num_complex::Complex64;

use super::{fft, matmul_into, numel, row_norms, shape_err, Result, Tensor, TensorError};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

const GATHER_ZERO: u32 = u32::MAX;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Real(Vec<f64>),
    Complex(Vec<Complex64>),
}

impl Value {
    fn len(&self) -> usize {
        match self {
            Value::Real(v) => v.len(),
            Value::Complex(v) => v.len(),
        }
    }

    fn zeros_like(&self) -> Value {
        match self {
            Value::Real(v) => Value::Real(vec![0.0; v.len()]),
            Value::Complex(v) => Value::Complex(vec![Complex64::new(0.0, 0.0); v.len()]),
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MulB {
        x: usize,
        w: usize,
        outer: usize,
        mid: usize,
        inner: usize,
    },
    AddB {
        x: usize,
        w: usize,
        outer: usize,
        mid: usize,
        inner: usize,
    },
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: usize,
        rows: usize,
        cols: usize,
    },
    Reshape(usize),
    Gather {
        x: usize,
        idx: Vec<u32>,
    },
    Sum(usize),
    Mean(usize),
    RowNorm {
        x: usize,
        rows: usize,
        cols: usize,
    },
    ClampMin(usize, f64),
    Tanh(usize),
    Relu(usize),
    Abs(usize),
    Softplus(usize),
    Exp(usize),
    Log(usize),
    LogSoftmax {
        x: usize,
        outer: usize,
        classes: usize,
        inner: usize,
    },
    Fft2 {
        x: usize,
        h: usize,
        w: usize,
    },
    Ifft2 {
        x: usize,
        h: usize,
        w: usize,
    },
    RealPart(usize),
    CAdd(usize, usize),
    CSub(usize, usize),
    CScale(usize, f64),
    CMul(usize, usize),
    CMulReal {
        z: usize,
        w: usize,
        outer: usize,
        mid: usize,
        inner: usize,
    },
    CAbs(usize),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Records one forward pass and replays it backwards once.
///
/// Nodes are appended in evaluation order, so parents always precede their
/// children and the reverse sweep is a plain reverse iteration.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Value>>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn real<'a>(v: &'a Value, op: &'static str) -> Result<&'a [f64]> {
    match v {
        Value::Real(d) => Ok(d),
        Value::Complex(_) => Err(TensorError::Dtype {
            op,
            expected: "real",
        }),
    }
}

fn cplx<'a>(v: &'a Value, op: &'static str) -> Result<&'a [Complex64]> {
    match v {
        Value::Complex(d) => Ok(d),
        Value::Real(_) => Err(TensorError::Dtype {
            op,
            expected: "complex",
        }),
    }
}

fn split_broadcast(
    op: &'static str,
    x: &[usize],
    w: &[usize],
    axis: usize,
) -> Result<(usize, usize, usize)> {
    if axis + w.len() > x.len() || x[axis..axis + w.len()] != *w {
        return Err(shape_err(
            op,
            format!("{w:?} does not match {x:?} at axis {axis}"),
        ));
    }
    Ok((
        numel(&x[..axis]),
        numel(w),
        numel(&x[axis + w.len()..]),
    ))
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
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

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.idx)
    }

    fn push(&mut self, shape: Vec<usize>, value: Value, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn rv(&self, i: usize, op: &'static str) -> Result<&[f64]> {
        real(&self.nodes[i].value, op)
    }

    fn cv(&self, i: usize, op: &'static str) -> Result<&[Complex64]> {
        cplx(&self.nodes[i].value, op)
    }

    // ----- leaves --------------------------------------------------------

    /// Trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            Value::Real(t.data().to_vec()),
            Op::Leaf,
            true,
        )
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            Value::Real(t.data().to_vec()),
            Op::Leaf,
            false,
        )
    }

    pub fn constant_vec(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(TensorError::BufferLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(self.push(shape.to_vec(), Value::Real(data), Op::Leaf, false))
    }

    pub fn constant_complex(&mut self, shape: &[usize], data: Vec<Complex64>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(TensorError::BufferLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(self.push(shape.to_vec(), Value::Complex(data), Op::Leaf, false))
    }

    /// `1.0` where `x > c`, else `0.0`. The mask is a constant: no gradient.
    pub fn gt_const(&mut self, x: Var, c: f64) -> Result<Var> {
        let i = self.check(x)?;
        let data = self
            .rv(i, "gt_const")?
            .iter()
            .map(|&v| if v > c { 1.0 } else { 0.0 })
            .collect();
        let shape = self.nodes[i].shape.clone();
        Ok(self.push(shape, Value::Real(data), Op::Leaf, false))
    }

    // ----- accessors -----------------------------------------------------

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.idx].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.idx].value {
            Value::Real(d) => d,
            Value::Complex(_) => panic!("value() called on a complex node"),
        }
    }

    pub fn cvalue(&self, v: Var) -> &[Complex64] {
        match &self.nodes[v.idx].value {
            Value::Complex(d) => d,
            Value::Real(_) => panic!("cvalue() called on a real node"),
        }
    }

    pub fn is_complex(&self, v: Var) -> bool {
        matches!(self.nodes[v.idx].value, Value::Complex(_))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec())
            .expect("recorded node has a consistent shape")
    }

    /// Gradient of a trainable leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        match self.grads.get(v.idx)? {
            Some(Value::Real(g)) => Some(g),
            _ => None,
        }
    }

    // ----- elementwise ---------------------------------------------------

    fn binary_real(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        mk: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        if self.nodes[ia].shape != self.nodes[ib].shape {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.nodes[ia].shape, self.nodes[ib].shape),
            ));
        }
        let data = self
            .rv(ia, op)?
            .iter()
            .zip(self.rv(ib, op)?)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(ia) || self.rg(ib);
        let shape = self.nodes[ia].shape.clone();
        Ok(self.push(shape, Value::Real(data), mk(ia, ib), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_real(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_real(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_real(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_real(a, b, "div", |x, y| x / y, Op::Div)
    }

    fn unary_real(&mut self, x: Var, op: &'static str, f: impl Fn(f64) -> f64, o: Op) -> Result<Var> {
        let i = self.check(x)?;
        let data = self.rv(i, op)?.iter().map(|&v| f(v)).collect();
        let shape = self.nodes[i].shape.clone();
        let rg = self.rg(i);
        Ok(self.push(shape, Value::Real(data), o, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let i = self.check(x)?;
        self.unary_real(x, "scale", |v| v * c, Op::Scale(i, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let i = self.check(x)?;
        self.unary_real(x, "add_scalar", |v| v + c, Op::AddScalar(i))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Result<Var> {
        let i = self.check(x)?;
        self.unary_real(x, "clamp_min", |v| v.max(lo), Op::ClampMin(i, lo))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        self.unary_real(x, "tanh", f64::tanh, Op::Tanh(i))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        self.unary_real(x, "relu", |v| v.max(0.0), Op::Relu(i))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        self.unary_real(x, "abs", f64::abs, Op::Abs(i))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        self.unary_real(x, "softplus", softplus, Op::Softplus(i))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        self.unary_real(x, "exp", f64::exp, Op::Exp(i))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        self.unary_real(x, "log", f64::ln, Op::Log(i))
    }

    /// `x * w` where `w` matches the axes of `x` starting at `axis`.
    pub fn mul_bcast(&mut self, x: Var, w: Var, axis: usize) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let (outer, mid, inner) =
            split_broadcast("mul_bcast", &self.nodes[ix].shape, &self.nodes[iw].shape, axis)?;
        let (xv, wv) = (self.rv(ix, "mul_bcast")?, self.rv(iw, "mul_bcast")?);
        let mut out = Vec::with_capacity(xv.len());
        for o in 0..outer {
            for (m, &wm) in wv.iter().enumerate() {
                let base = (o * mid + m) * inner;
                out.extend(xv[base..base + inner].iter().map(|&v| v * wm));
            }
        }
        let rg = self.rg(ix) || self.rg(iw);
        let shape = self.nodes[ix].shape.clone();
        Ok(self.push(
            shape,
            Value::Real(out),
            Op::MulB {
                x: ix,
                w: iw,
                outer,
                mid,
                inner,
            },
            rg,
        ))
    }

    /// `x + w` where `w` matches the axes of `x` starting at `axis`.
    pub fn add_bcast(&mut self, x: Var, w: Var, axis: usize) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let (outer, mid, inner) =
            split_broadcast("add_bcast", &self.nodes[ix].shape, &self.nodes[iw].shape, axis)?;
        let (xv, wv) = (self.rv(ix, "add_bcast")?, self.rv(iw, "add_bcast")?);
        let mut out = Vec::with_capacity(xv.len());
        for o in 0..outer {
            for (m, &wm) in wv.iter().enumerate() {
                let base = (o * mid + m) * inner;
                out.extend(xv[base..base + inner].iter().map(|&v| v + wm));
            }
        }
        let rg = self.rg(ix) || self.rg(iw);
        let shape = self.nodes[ix].shape.clone();
        Ok(self.push(
            shape,
            Value::Real(out),
            Op::AddB {
                x: ix,
                w: iw,
                outer,
                mid,
                inner,
            },
            rg,
        ))
    }

    // ----- linear algebra and layout -----------------------------------

    /// `a[m,k] * b[k,n]`, or `a * b[i]` for every slice of `b[batch,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (&self.nodes[ia].shape, &self.nodes[ib].shape);
        if sa.len() != 2 || !(sb.len() == 2 || sb.len() == 3) {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[0], sa[1]);
        let (batch, kb, n) = if sb.len() == 2 {
            (1, sb[0], sb[1])
        } else {
            (sb[0], sb[1], sb[2])
        };
        if k != kb {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let out_shape = if sb.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let (av, bv) = (self.rv(ia, "matmul")?, self.rv(ib, "matmul")?);
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            matmul_into(
                av,
                &bv[bi * k * n..(bi + 1) * k * n],
                m,
                k,
                n,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(
            out_shape,
            Value::Real(out),
            Op::MatMul {
                a: ia,
                b: ib,
                batch,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let s = &self.nodes[i].shape;
        if s.len() != 2 {
            return Err(shape_err("transpose", format!("{s:?} is not 2-D")));
        }
        let (rows, cols) = (s[0], s[1]);
        let xv = self.rv(i, "transpose")?;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = xv[r * cols + c];
            }
        }
        let rg = self.rg(i);
        Ok(self.push(
            vec![cols, rows],
            Value::Real(out),
            Op::Transpose { x: i, rows, cols },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let i = self.check(x)?;
        if numel(shape) != self.nodes[i].value.len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.nodes[i].shape),
            ));
        }
        let value = self.nodes[i].value.clone();
        let rg = self.rg(i);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(i), rg))
    }

    /// `out[j] = x[idx[j]]`; `None` entries read as zero. Backward scatters.
    pub fn gather(&mut self, x: Var, idx: &[Option<usize>], shape: &[usize]) -> Result<Var> {
        let i = self.check(x)?;
        if numel(shape) != idx.len() {
            return Err(shape_err("gather", "index count does not match shape"));
        }
        let n = self.nodes[i].value.len();
        let mut packed = Vec::with_capacity(idx.len());
        for ix in idx {
            match ix {
                Some(j) if *j >= n => {
                    return Err(shape_err("gather", format!("index {j} out of {n}")))
                }
                Some(j) => packed.push(*j as u32),
                None => packed.push(GATHER_ZERO),
            }
        }
        let xv = self.rv(i, "gather")?;
        let out = packed
            .iter()
            .map(|&j| if j == GATHER_ZERO { 0.0 } else { xv[j as usize] })
            .collect();
        let rg = self.rg(i);
        Ok(self.push(
            shape.to_vec(),
            Value::Real(out),
            Op::Gather { x: i, idx: packed },
            rg,
        ))
    }

    /// Axis permutation: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let i = self.check(x)?;
        let shape = self.nodes[i].shape.clone();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", format!("{perm:?} for {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let mut in_strides = vec![1; shape.len()];
        for d in (0..shape.len().saturating_sub(1)).rev() {
            in_strides[d] = in_strides[d + 1] * shape[d + 1];
        }
        let total = numel(&shape);
        let mut idx = Vec::with_capacity(total);
        let mut counter = vec![0usize; shape.len()];
        for _ in 0..total {
            let src: usize = counter
                .iter()
                .zip(perm)
                .map(|(&c, &p)| c * in_strides[p])
                .sum();
            idx.push(Some(src));
            for d in (0..counter.len()).rev() {
                counter[d] += 1;
                if counter[d] < out_shape[d] {
                    break;
                }
                counter[d] = 0;
            }
        }
        self.gather(x, &idx, &out_shape)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let s = self.rv(i, "sum")?.iter().sum();
        let rg = self.rg(i);
        Ok(self.push(vec![], Value::Real(vec![s]), Op::Sum(i), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let v = self.rv(i, "mean")?;
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(i);
        Ok(self.push(vec![], Value::Real(vec![s]), Op::Mean(i), rg))
    }

    /// L2 norm of every row of a 2-D tensor.
    pub fn rowwise_l2_norm(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let s = &self.nodes[i].shape;
        if s.len() != 2 {
            return Err(shape_err("rowwise_l2_norm", format!("{s:?} is not 2-D")));
        }
        let (rows, cols) = (s[0], s[1]);
        let out = row_norms(self.rv(i, "rowwise_l2_norm")?, rows, cols);
        let rg = self.rg(i);
        Ok(self.push(
            vec![rows],
            Value::Real(out),
            Op::RowNorm { x: i, rows, cols },
            rg,
        ))
    }

    /// Log-softmax over `axis`.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let i = self.check(x)?;
        let s = self.nodes[i].shape.clone();
        if axis >= s.len() {
            return Err(shape_err("log_softmax", format!("axis {axis} for {s:?}")));
        }
        let (outer, classes, inner) = (numel(&s[..axis]), s[axis], numel(&s[axis + 1..]));
        let xv = self.rv(i, "log_softmax")?;
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for p in 0..inner {
                let at = |c: usize| (o * classes + c) * inner + p;
                let mx = (0..classes).map(|c| xv[at(c)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + (0..classes).map(|c| (xv[at(c)] - mx).exp()).sum::<f64>().ln();
                for c in 0..classes {
                    out[at(c)] = xv[at(c)] - lse;
                }
            }
        }
        let rg = self.rg(i);
        Ok(self.push(
            s,
            Value::Real(out),
            Op::LogSoftmax {
                x: i,
                outer,
                classes,
                inner,
            },
            rg,
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let l = self.log_softmax(x, axis)?;
        self.exp(l)
    }

    // ----- spectral ------------------------------------------------------

    fn plane_dims(&self, i: usize, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.nodes[i].shape;
        if s.len() < 2 {
            return Err(shape_err(op, format!("{s:?} has fewer than 2 axes")));
        }
        Ok((s[s.len() - 2], s[s.len() - 1]))
    }

    /// Unnormalized 2-D DFT over the last two axes of a real tensor.
    pub fn fft2(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let (h, w) = self.plane_dims(i, "fft2")?;
        let out = fft::fft2_real(self.rv(i, "fft2")?, h, w);
        let (shape, rg) = (self.nodes[i].shape.clone(), self.rg(i));
        Ok(self.push(shape, Value::Complex(out), Op::Fft2 { x: i, h, w }, rg))
    }

    /// Inverse 2-D DFT over the last two axes, scaled by `1/(H*W)`.
    pub fn ifft2(&mut self, z: Var) -> Result<Var> {
        let i = self.check(z)?;
        let (h, w) = self.plane_dims(i, "ifft2")?;
        let out = fft::ifft2(self.cv(i, "ifft2")?, h, w);
        let (shape, rg) = (self.nodes[i].shape.clone(), self.rg(i));
        Ok(self.push(shape, Value::Complex(out), Op::Ifft2 { x: i, h, w }, rg))
    }

    pub fn real_part(&mut self, z: Var) -> Result<Var> {
        let i = self.check(z)?;
        let out = self.cv(i, "real_part")?.iter().map(|c| c.re).collect();
        let (shape, rg) = (self.nodes[i].shape.clone(), self.rg(i));
        Ok(self.push(shape, Value::Real(out), Op::RealPart(i), rg))
    }

    /// Largest `|Im|` of a complex node.
    pub fn max_imag(&self, z: Var) -> f64 {
        self.cvalue(z).iter().map(|c| c.im.abs()).fold(0.0, f64::max)
    }

    fn binary_complex(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(Complex64, Complex64) -> Complex64,
        mk: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        if self.nodes[ia].shape != self.nodes[ib].shape {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.nodes[ia].shape, self.nodes[ib].shape),
            ));
        }
        let out = self
            .cv(ia, op)?
            .iter()
            .zip(self.cv(ib, op)?)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(ia) || self.rg(ib);
        let shape = self.nodes[ia].shape.clone();
        Ok(self.push(shape, Value::Complex(out), mk(ia, ib), rg))
    }

    pub fn cadd(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_complex(a, b, "cadd", |x, y| x + y, Op::CAdd)
    }

    pub fn csub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_complex(a, b, "csub", |x, y| x - y, Op::CSub)
    }

    pub fn cmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_complex(a, b, "cmul", |x, y| x * y, Op::CMul)
    }

    pub fn cscale(&mut self, z: Var, c: f64) -> Result<Var> {
        let i = self.check(z)?;
        let out = self.cv(i, "cscale")?.iter().map(|&v| v * c).collect();
        let (shape, rg) = (self.nodes[i].shape.clone(), self.rg(i));
        Ok(self.push(shape, Value::Complex(out), Op::CScale(i, c), rg))
    }

    /// Complex `z` times real `w`, with `w` broadcast from `axis` like [`Tape::mul_bcast`].
    pub fn cmul_real(&mut self, z: Var, w: Var, axis: usize) -> Result<Var> {
        let (iz, iw) = (self.check(z)?, self.check(w)?);
        let (outer, mid, inner) =
            split_broadcast("cmul_real", &self.nodes[iz].shape, &self.nodes[iw].shape, axis)?;
        let (zv, wv) = (self.cv(iz, "cmul_real")?, self.rv(iw, "cmul_real")?);
        let mut out = Vec::with_capacity(zv.len());
        for o in 0..outer {
            for (m, &wm) in wv.iter().enumerate() {
                let base = (o * mid + m) * inner;
                out.extend(zv[base..base + inner].iter().map(|&v| v * wm));
            }
        }
        let rg = self.rg(iz) || self.rg(iw);
        let shape = self.nodes[iz].shape.clone();
        Ok(self.push(
            shape,
            Value::Complex(out),
            Op::CMulReal {
                z: iz,
                w: iw,
                outer,
                mid,
                inner,
            },
            rg,
        ))
    }

    /// Elementwise modulus of a complex tensor.
    pub fn cabs(&mut self, z: Var) -> Result<Var> {
        let i = self.check(z)?;
        let out = self.cv(i, "cabs")?.iter().map(|c| c.norm()).collect();
        let (shape, rg) = (self.nodes[i].shape.clone(), self.rg(i));
        Ok(self.push(shape, Value::Real(out), Op::CAbs(i), rg))
    }

    // ----- reverse sweep -------------------------------------------------

    /// Populate gradients of every trainable leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.check(loss)?;
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if self.nodes[li].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[li].shape.clone()));
        }
        if !self.nodes[li].requires_grad {
            return Err(TensorError::Detached);
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Value>> = vec![None; self.nodes.len()];
        grads[li] = Some(match self.nodes[li].value {
            Value::Real(_) => Value::Real(vec![1.0]),
            Value::Complex(_) => {
                return Err(TensorError::Dtype {
                    op: "backward",
                    expected: "real",
                })
            }
        });
        for i in (0..=li).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
        }
        // Keep only leaf gradients.
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) || !n.requires_grad {
                grads[i] = None;
            } else if grads[i].is_none() {
                grads[i] = Some(n.value.zeros_like());
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Value, grads: &mut [Option<Value>]) -> Result<()> {
        let nodes = &self.nodes;
        let rg = |j: usize| nodes[j].requires_grad;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let g = real(g, "add")?;
                if rg(*a) {
                    acc_real(grads, nodes, *a, |d| add_into(d, g));
                }
                if rg(*b) {
                    acc_real(grads, nodes, *b, |d| add_into(d, g));
                }
            }
            Op::Sub(a, b) => {
                let g = real(g, "sub")?;
                if rg(*a) {
                    acc_real(grads, nodes, *a, |d| add_into(d, g));
                }
                if rg(*b) {
                    acc_real(grads, nodes, *b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
                }
            }
            Op::Mul(a, b) => {
                let g = real(g, "mul")?;
                let (av, bv) = (real(&nodes[*a].value, "mul")?, real(&nodes[*b].value, "mul")?);
                if rg(*a) {
                    acc_real(grads, nodes, *a, |d| {
                        for ((d, g), y) in d.iter_mut().zip(g).zip(bv) {
                            *d += g * y;
                        }
                    });
                }
                if rg(*b) {
                    acc_real(grads, nodes, *b, |d| {
                        for ((d, g), x) in d.iter_mut().zip(g).zip(av) {
                            *d += g * x;
                        }
                    });
                }
            }
            Op::Div(a, b) => {
                let g = real(g, "div")?;
                let (av, bv) = (real(&nodes[*a].value, "div")?, real(&nodes[*b].value, "div")?);
                if rg(*a) {
                    acc_real(grads, nodes, *a, |d| {
                        for ((d, g), y) in d.iter_mut().zip(g).zip(bv) {
                            *d += g / y;
                        }
                    });
                }
                if rg(*b) {
                    acc_real(grads, nodes, *b, |d| {
                        for (((d, g), x), y) in d.iter_mut().zip(g).zip(av).zip(bv) {
                            *d -= g * x / (y * y);
                        }
                    });
                }
            }
            Op::Scale(x, c) => {
                let g = real(g, "scale")?;
                acc_real(grads, nodes, *x, |d| {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g * c)
                });
            }
            Op::AddScalar(x) | Op::Reshape(x) => match g {
                Value::Real(g) => acc_real(grads, nodes, *x, |d| add_into(d, g)),
                Value::Complex(g) => acc_complex(grads, nodes, *x, |d| {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g)
                }),
            },
            Op::MulB {
                x,
                w,
                outer,
                mid,
                inner,
            } => {
                let g = real(g, "mul_bcast")?;
                let (xv, wv) = (real(&nodes[*x].value, "mul_bcast")?, real(&nodes[*w].value, "mul_bcast")?);
                if rg(*x) {
                    acc_real(grads, nodes, *x, |d| {
                        for o in 0..*outer {
                            for m in 0..*mid {
                                let base = (o * mid + m) * inner;
                                for p in base..base + inner {
                                    d[p] += g[p] * wv[m];
                                }
                            }
                        }
                    });
                }
                if rg(*w) {
                    acc_real(grads, nodes, *w, |d| {
                        for o in 0..*outer {
                            for m in 0..*mid {
                                let base = (o * mid + m) * inner;
                                d[m] += (base..base + inner).map(|p| g[p] * xv[p]).sum::<f64>();
                            }
                        }
                    });
                }
            }
            Op::AddB {
                x,
                w,
                outer,
                mid,
                inner,
            } => {
                let g = real(g, "add_bcast")?;
                if rg(*x) {
                    acc_real(grads, nodes, *x, |d| add_into(d, g));
                }
                if rg(*w) {
                    acc_real(grads, nodes, *w, |d| {
                        for o in 0..*outer {
                            for m in 0..*mid {
                                let base = (o * mid + m) * inner;
                                d[m] += g[base..base + inner].iter().sum::<f64>();
                            }
                        }
                    });
                }
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                let g = real(g, "matmul")?;
                let (av, bv) = (real(&nodes[*a].value, "matmul")?, real(&nodes[*b].value, "matmul")?);
                let (m, k, n) = (*m, *k, *n);
                if rg(*a) {
                    // dA = sum_b g[b] * B[b]^T
                    acc_real(grads, nodes, *a, |d| {
                        for bi in 0..*batch {
                            let gb = &g[bi * m * n..(bi + 1) * m * n];
                            let bb = &bv[bi * k * n..(bi + 1) * k * n];
                            for i in 0..m {
                                let grow = &gb[i * n..(i + 1) * n];
                                for p in 0..k {
                                    let brow = &bb[p * n..(p + 1) * n];
                                    d[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                                }
                            }
                        }
                    });
                }
                if rg(*b) {
                    // dB[b] = A^T * g[b]
                    acc_real(grads, nodes, *b, |d| {
                        for bi in 0..*batch {
                            let gb = &g[bi * m * n..(bi + 1) * m * n];
                            let db = &mut d[bi * k * n..(bi + 1) * k * n];
                            for i in 0..m {
                                let grow = &gb[i * n..(i + 1) * n];
                                for p in 0..k {
                                    let aip = av[i * k + p];
                                    if aip == 0.0 {
                                        continue;
                                    }
                                    let drow = &mut db[p * n..(p + 1) * n];
                                    for (dv, gv) in drow.iter_mut().zip(grow) {
                                        *dv += aip * gv;
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::Transpose { x, rows, cols } => {
                let g = real(g, "transpose")?;
                acc_real(grads, nodes, *x, |d| {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            d[r * cols + c] += g[c * rows + r];
                        }
                    }
                });
            }
            Op::Gather { x, idx } => {
                let g = real(g, "gather")?;
                acc_real(grads, nodes, *x, |d| {
                    for (&j, gv) in idx.iter().zip(g) {
                        if j != GATHER_ZERO {
                            d[j as usize] += gv;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let g = real(g, "sum")?[0];
                acc_real(grads, nodes, *x, |d| d.iter_mut().for_each(|d| *d += g));
            }
            Op::Mean(x) => {
                let n = nodes[*x].value.len() as f64;
                let g = real(g, "mean")?[0] / n;
                acc_real(grads, nodes, *x, |d| d.iter_mut().for_each(|d| *d += g));
            }
            Op::RowNorm { x, rows, cols } => {
                let g = real(g, "rowwise_l2_norm")?;
                let xv = real(&nodes[*x].value, "rowwise_l2_norm")?;
                let norms = real(&nodes[i].value, "rowwise_l2_norm")?;
                acc_real(grads, nodes, *x, |d| {
                    for r in 0..*rows {
                        if norms[r] == 0.0 {
                            continue;
                        }
                        let s = g[r] / norms[r];
                        for c in 0..*cols {
                            d[r * cols + c] += s * xv[r * cols + c];
                        }
                    }
                });
            }
            Op::ClampMin(x, lo) => {
                let g = real(g, "clamp_min")?;
                let xv = real(&nodes[*x].value, "clamp_min")?;
                acc_real(grads, nodes, *x, |d| {
                    for ((d, g), v) in d.iter_mut().zip(g).zip(xv) {
                        if v > lo {
                            *d += g;
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                let g = real(g, "tanh")?;
                let y = real(&nodes[i].value, "tanh")?;
                acc_real(grads, nodes, *x, |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * (1.0 - y * y);
                    }
                });
            }
            Op::Relu(x) => {
                let g = real(g, "relu")?;
                let xv = real(&nodes[*x].value, "relu")?;
                acc_real(grads, nodes, *x, |d| {
                    for ((d, g), v) in d.iter_mut().zip(g).zip(xv) {
                        if *v > 0.0 {
                            *d += g;
                        }
                    }
                });
            }
            Op::Abs(x) => {
                let g = real(g, "abs")?;
                let xv = real(&nodes[*x].value, "abs")?;
                acc_real(grads, nodes, *x, |d| {
                    for ((d, g), v) in d.iter_mut().zip(g).zip(xv) {
                        if *v > 0.0 {
                            *d += g;
                        } else if *v < 0.0 {
                            *d -= g;
                        }
                    }
                });
            }
            Op::Softplus(x) => {
                let g = real(g, "softplus")?;
                let xv = real(&nodes[*x].value, "softplus")?;
                acc_real(grads, nodes, *x, |d| {
                    for ((d, g), v) in d.iter_mut().zip(g).zip(xv) {
                        *d += g * sigmoid(*v);
                    }
                });
            }
            Op::Exp(x) => {
                let g = real(g, "exp")?;
                let y = real(&nodes[i].value, "exp")?;
                acc_real(grads, nodes, *x, |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * y;
                    }
                });
            }
            Op::Log(x) => {
                let g = real(g, "log")?;
                let xv = real(&nodes[*x].value, "log")?;
                acc_real(grads, nodes, *x, |d| {
                    for ((d, g), v) in d.iter_mut().zip(g).zip(xv) {
                        *d += g / v;
                    }
                });
            }
            Op::LogSoftmax {
                x,
                outer,
                classes,
                inner,
            } => {
                let g = real(g, "log_softmax")?;
                let y = real(&nodes[i].value, "log_softmax")?;
                let (classes, inner) = (*classes, *inner);
                acc_real(grads, nodes, *x, |d| {
                    for o in 0..*outer {
                        for p in 0..inner {
                            let at = |c: usize| (o * classes + c) * inner + p;
                            let gs: f64 = (0..classes).map(|c| g[at(c)]).sum();
                            for c in 0..classes {
                                d[at(c)] += g[at(c)] - y[at(c)].exp() * gs;
                            }
                        }
                    }
                });
            }
            Op::Fft2 { x, h, w } => {
                // Adjoint of the forward DFT is the unnormalized inverse DFT.
                let g = cplx(g, "fft2")?;
                let mut buf = g.to_vec();
                fft::dft2_unnormalized(&mut buf, *h, *w, true);
                match nodes[*x].value {
                    Value::Real(_) => acc_real(grads, nodes, *x, |d| {
                        d.iter_mut().zip(&buf).for_each(|(d, b)| *d += b.re)
                    }),
                    Value::Complex(_) => acc_complex(grads, nodes, *x, |d| {
                        d.iter_mut().zip(&buf).for_each(|(d, b)| *d += b)
                    }),
                }
            }
            Op::Ifft2 { x, h, w } => {
                let g = cplx(g, "ifft2")?;
                let mut buf = g.to_vec();
                fft::dft2_unnormalized(&mut buf, *h, *w, false);
                let s = 1.0 / (h * w) as f64;
                acc_complex(grads, nodes, *x, |d| {
                    d.iter_mut().zip(&buf).for_each(|(d, b)| *d += b * s)
                });
            }
            Op::RealPart(z) => {
                let g = real(g, "real_part")?;
                acc_complex(grads, nodes, *z, |d| {
                    d.iter_mut().zip(g).for_each(|(d, g)| d.re += g)
                });
            }
            Op::CAdd(a, b) | Op::CSub(a, b) => {
                let g = cplx(g, "cadd")?;
                let sign = if matches!(nodes[i].op, Op::CSub(..)) { -1.0 } else { 1.0 };
                if rg(*a) {
                    acc_complex(grads, nodes, *a, |d| {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g)
                    });
                }
                if rg(*b) {
                    acc_complex(grads, nodes, *b, |d| {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g * sign)
                    });
                }
            }
            Op::CScale(z, c) => {
                let g = cplx(g, "cscale")?;
                acc_complex(grads, nodes, *z, |d| {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g * c)
                });
            }
            Op::CMul(a, b) => {
                let g = cplx(g, "cmul")?;
                let (av, bv) = (cplx(&nodes[*a].value, "cmul")?, cplx(&nodes[*b].value, "cmul")?);
                if rg(*a) {
                    acc_complex(grads, nodes, *a, |d| {
                        for ((d, g), y) in d.iter_mut().zip(g).zip(bv) {
                            *d += y.conj() * g;
                        }
                    });
                }
                if rg(*b) {
                    acc_complex(grads, nodes, *b, |d| {
                        for ((d, g), x) in d.iter_mut().zip(g).zip(av) {
                            *d += x.conj() * g;
                        }
                    });
                }
            }
            Op::CMulReal {
                z,
                w,
                outer,
                mid,
                inner,
            } => {
                let g = cplx(g, "cmul_real")?;
                let (zv, wv) = (cplx(&nodes[*z].value, "cmul_real")?, real(&nodes[*w].value, "cmul_real")?);
                if rg(*z) {
                    acc_complex(grads, nodes, *z, |d| {
                        for o in 0..*outer {
                            for m in 0..*mid {
                                let base = (o * mid + m) * inner;
                                for p in base..base + inner {
                                    d[p] += g[p] * wv[m];
                                }
                            }
                        }
                    });
                }
                if rg(*w) {
                    acc_real(grads, nodes, *w, |d| {
                        for o in 0..*outer {
                            for m in 0..*mid {
                                let base = (o * mid + m) * inner;
                                d[m] += (base..base + inner)
                                    .map(|p| (zv[p].conj() * g[p]).re)
                                    .sum::<f64>();
                            }
                        }
                    });
                }
            }
            Op::CAbs(z) => {
                let g = real(g, "cabs")?;
                let zv = cplx(&nodes[*z].value, "cabs")?;
                acc_complex(grads, nodes, *z, |d| {
                    for ((d, g), v) in d.iter_mut().zip(g).zip(zv) {
                        let n = v.norm();
                        if n > 0.0 {
                            *d += v * (g / n);
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
}

fn acc_real(grads: &mut [Option<Value>], nodes: &[Node], j: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[j].requires_grad {
        return;
    }
    let slot = grads[j].get_or_insert_with(|| nodes[j].value.zeros_like());
    match slot {
        Value::Real(d) => f(d),
        Value::Complex(_) => unreachable!("real gradient routed to complex node"),
    }
}

fn acc_complex(
    grads: &mut [Option<Value>],
    nodes: &[Node],
    j: usize,
    f: impl FnOnce(&mut [Complex64]),
) {
    if !nodes[j].requires_grad {
        return;
    }
    let slot = grads[j].get_or_insert_with(|| nodes[j].value.zeros_like());
    match slot {
        Value::Complex(d) => f(d),
        Value::Real(_) => unreachable!("complex gradient routed to real node"),
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
