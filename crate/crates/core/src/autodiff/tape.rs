use super::tensor::{matmul_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Elementwise operation kinds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Relu,
    Square,
    Scale(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    /// Population variance: divides by the count, not count − 1.
    VarPopulation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unary {
    Exp,
    Log,
    Relu,
    Square,
    Scale(f64),
    AddScalar(f64),
    ClampMin(f64),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    LogSoftmax {
        input: Var,
        axis: usize,
    },
    Reduce {
        input: Var,
        kind: Reduction,
        axis: Option<usize>,
    },
    Gather {
        input: Var,
        indices: Vec<usize>,
    },
    ScaleColumns(Var, Var),
    SelectRow(Var, usize),
    PairwiseSqDist(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of tensor operations for reverse-mode differentiation.
///
/// Node ids are issued in order, so every input precedes its consumer and
/// a single reverse sweep visits each node once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: one optional gradient buffer per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; all zeros when `v` did not reach the loss.
    pub fn get(&self, v: Var) -> Vec<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.shapes[v.0].iter().product()],
        }
    }

    pub fn get_opt(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Accumulates the gradient for `v` into `target`'s grad slot.
    pub fn write_to(&self, v: Var, target: &mut Tensor) -> Result<()> {
        target.accumulate_grad(&self.get(v))
    }
}

/// (outer, len, inner) decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf holding a copy of `t`; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let needs = t.requires_grad();
        let mut value = t.clone();
        value.zero_grad();
        self.push(value, Op::Leaf, needs)
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let value = t.with_requires_grad(false);
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.matmul(bv)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() != 2 {
            return Err(Error::shape("transpose", av.shape(), &[]));
        }
        let out = av.transpose();
        let needs = self.needs(a);
        Ok(self.push(out, Op::Transpose(a), needs))
    }

    /// Dispatches on `kind`; binary kinds take `b`, unary kinds ignore it.
    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let binary = |k| match b {
            Some(b) => Ok((k, b)),
            None => Err(Error::Config(format!("{kind:?} needs two operands"))),
        };
        match kind {
            Elementwise::Add => binary(Binary::Add).and_then(|(k, b)| self.binary(k, a, b)),
            Elementwise::Sub => binary(Binary::Sub).and_then(|(k, b)| self.binary(k, a, b)),
            Elementwise::Mul => binary(Binary::Mul).and_then(|(k, b)| self.binary(k, a, b)),
            Elementwise::Div => binary(Binary::Div).and_then(|(k, b)| self.binary(k, a, b)),
            Elementwise::Exp => self.unary(Unary::Exp, a),
            Elementwise::Log => self.unary(Unary::Log, a),
            Elementwise::Relu => self.unary(Unary::Relu, a),
            Elementwise::Square => self.unary(Unary::Square, a),
            Elementwise::Scale(c) => self.unary(Unary::Scale(c), a),
        }
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

    /// Elementwise quotient; every denominator must be strictly positive.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    /// Natural log; every argument must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Square, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(Unary::Scale(c), a)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(Unary::AddScalar(c), a)
    }

    /// `max(a, floor)`; gradient flows only through entries above the floor.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.unary(Unary::ClampMin(floor), a)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let shape = if av.shape() == bv.shape() {
            av.shape().to_vec()
        } else if bv.numel() == 1 {
            av.shape().to_vec()
        } else if av.numel() == 1 {
            bv.shape().to_vec()
        } else {
            return Err(Error::shape(name, av.shape(), bv.shape()));
        };
        if kind == Binary::Div {
            if let Some(bad) = bv.data().iter().find(|&&d| !(d > 0.0)) {
                return Err(Error::Domain {
                    op: "div",
                    detail: format!("non-positive denominator {bad}"),
                });
            }
        }
        let n: usize = shape.iter().product();
        let (ad, bd) = (av.data(), bv.data());
        let (sa, sb) = (ad.len() == 1 && n > 1, bd.len() == 1 && n > 1);
        let out: Vec<f64> = (0..n)
            .map(|i| {
                let x = if sa { ad[0] } else { ad[i] };
                let y = if sb { bd[0] } else { bd[i] };
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                }
            })
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Binary(kind, a, b), needs))
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let av = self.value(a);
        if kind == Unary::Log {
            if let Some(bad) = av.data().iter().find(|&&d| !(d > 0.0)) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("non-positive argument {bad}"),
                });
            }
        }
        let out: Vec<f64> = av
            .data()
            .iter()
            .map(|&x| match kind {
                Unary::Exp => x.exp(),
                Unary::Log => x.ln(),
                Unary::Relu => x.max(0.0),
                Unary::Square => x * x,
                Unary::Scale(c) => x * c,
                Unary::AddScalar(c) => x + c,
                Unary::ClampMin(f) => x.max(f),
            })
            .collect();
        let value = Tensor::new(av.shape(), out)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Unary(kind, a), needs))
    }

    /// Softmax of a vector.
    pub fn softmax(&mut self, v: Var) -> Result<Var> {
        let shape = self.value(v).shape().to_vec();
        if shape.len() != 1 {
            return Err(Error::shape("softmax", &shape, &[]));
        }
        self.softmax_axis(v, 0)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_masked(a, axis, None)
    }

    /// Softmax along `axis` restricted to entries where `mask` is true.
    ///
    /// Masked-out entries get weight exactly 0 and no gradient; the
    /// survivors of each slice are renormalized to sum to one.
    pub fn softmax_masked(&mut self, a: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let av = self.value(a);
        if let Some(m) = mask {
            if m.len() != av.numel() {
                return Err(Error::shape("softmax_masked", av.shape(), &[m.len()]));
            }
        }
        if av.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("softmax"));
        }
        let shape = av.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis { axis, shape });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = av.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let keep = |k: usize| mask.is_none_or(|m| m[idx(k)]);
                let max = (0..len)
                    .filter(|&k| keep(k))
                    .map(|k| x[idx(k)])
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(Error::Config("softmax slice fully masked".into()));
                }
                let mut z = 0.0;
                for k in (0..len).filter(|&k| keep(k)) {
                    let e = (x[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[idx(k)] /= z;
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { input: a, axis }, needs))
    }

    /// Log-softmax along `axis`.
    pub fn log_softmax_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        if av.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("log_softmax"));
        }
        let shape = av.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis { axis, shape });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = av.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| x[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|k| (x[idx(k)] - max).exp()).sum::<f64>().ln();
                for k in 0..len {
                    out[idx(k)] = x[idx(k)] - lse;
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::LogSoftmax { input: a, axis }, needs))
    }

    /// Reduces along `axis`, or over every entry when `axis` is `None`.
    pub fn reduce(&mut self, kind: Reduction, a: Var, axis: Option<usize>) -> Result<Var> {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        let (outer, len, inner, out_shape) = match axis {
            None => (1, av.numel(), 1, vec![]),
            Some(ax) if ax < shape.len() => {
                let (o, l, i) = split_axis(&shape, ax);
                let mut s = shape.clone();
                s.remove(ax);
                (o, l, i, s)
            }
            Some(ax) => return Err(Error::Axis { axis: ax, shape }),
        };
        if kind == Reduction::VarPopulation && len < 2 {
            return Err(Error::InsufficientSamples(format!(
                "variance needs at least 2 elements along the axis, got {len}"
            )));
        }
        let x = av.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let vals = (0..len).map(|k| x[(o * len + k) * inner + i]);
                let sum: f64 = vals.clone().sum();
                out[o * inner + i] = match kind {
                    Reduction::Sum => sum,
                    Reduction::Mean => sum / len as f64,
                    Reduction::VarPopulation => {
                        let mean = sum / len as f64;
                        vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64
                    }
                };
            }
        }
        let needs = self.needs(a);
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(value, Op::Reduce { input: a, kind, axis }, needs))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduction::Sum, a, None)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduction::Mean, a, None)
    }

    /// Picks `a[indices[j], j]` from a 2-D tensor, giving a vector of length `cols`.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() != 2 || av.shape()[1] != indices.len() {
            return Err(Error::shape("gather_rows", av.shape(), &[indices.len()]));
        }
        let (rows, cols) = (av.shape()[0], av.shape()[1]);
        let mut out = Vec::with_capacity(cols);
        for (j, &r) in indices.iter().enumerate() {
            if r >= rows {
                return Err(Error::Index {
                    index: r,
                    len: rows,
                });
            }
            out.push(av.data()[r * cols + j]);
        }
        let needs = self.needs(a);
        let op = Op::Gather {
            input: a,
            indices: indices.to_vec(),
        };
        Ok(self.push(Tensor::vector(out), op, needs))
    }

    /// Multiplies column `j` of `x[m×b]` by `w[j]`.
    pub fn scale_columns(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.shape().len() != 2 || wv.shape() != [xv.shape()[1]] {
            return Err(Error::shape("scale_columns", xv.shape(), wv.shape()));
        }
        let cols = xv.shape()[1];
        let out: Vec<f64> = xv
            .data()
            .iter()
            .enumerate()
            .map(|(k, v)| v * wv.data()[k % cols])
            .collect();
        let value = Tensor::new(xv.shape(), out)?;
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(value, Op::ScaleColumns(x, w), needs))
    }

    /// Row `i` of a 2-D tensor as a vector.
    pub fn select_row(&mut self, a: Var, i: usize) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() != 2 {
            return Err(Error::shape("select_row", av.shape(), &[]));
        }
        if i >= av.shape()[0] {
            return Err(Error::Index {
                index: i,
                len: av.shape()[0],
            });
        }
        let value = Tensor::vector(av.row(i).to_vec());
        let needs = self.needs(a);
        Ok(self.push(value, Op::SelectRow(a, i), needs))
    }

    /// Squared Euclidean distances between the rows of `x[a×r]` and `y[b×r]`.
    pub fn pairwise_sq_dist(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xv, yv) = (self.value(x), self.value(y));
        if xv.shape().len() != 2 || yv.shape().len() != 2 || xv.shape()[1] != yv.shape()[1] {
            return Err(Error::shape("pairwise_sq_dist", xv.shape(), yv.shape()));
        }
        let (a, b) = (xv.shape()[0], yv.shape()[0]);
        let mut out = vec![0.0; a * b];
        for i in 0..a {
            for j in 0..b {
                out[i * b + j] = xv
                    .row(i)
                    .iter()
                    .zip(yv.row(j))
                    .map(|(u, v)| (u - v) * (u - v))
                    .sum();
            }
        }
        let needs = self.needs(x) || self.needs(y);
        Ok(self.push(Tensor::new(&[a, b], out)?, Op::PairwiseSqDist(x, y), needs))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| self.value(v);

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (p, q, s) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.needs(*a) {
                    let bt = bv.transpose();
                    let mut ga = vec![0.0; p * q];
                    matmul_into(g, bt.data(), &mut ga, p, s, q);
                    acc(*a, ga);
                }
                if self.needs(*b) {
                    let at = av.transpose();
                    let mut gb = vec![0.0; q * s];
                    matmul_into(at.data(), g, &mut gb, q, p, s);
                    acc(*b, gb);
                }
            }
            Op::Transpose(a) => {
                let shape = node.value.shape();
                let gt = Tensor::new(shape, g.to_vec()).expect("grad shape").transpose();
                acc(*a, gt.into_data());
            }
            Op::Binary(kind, a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                let n = g.len();
                let pick = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
                // Contributions for a scalar operand are summed down to one entry.
                let fold = |d_len: usize, per: Vec<f64>| {
                    if d_len == 1 && n > 1 {
                        vec![per.iter().sum()]
                    } else {
                        per
                    }
                };
                if self.needs(*a) {
                    let per: Vec<f64> = (0..n)
                        .map(|i| match kind {
                            Binary::Add | Binary::Sub => g[i],
                            Binary::Mul => g[i] * pick(bd, i),
                            Binary::Div => g[i] / pick(bd, i),
                        })
                        .collect();
                    acc(*a, fold(ad.len(), per));
                }
                if self.needs(*b) {
                    let per: Vec<f64> = (0..n)
                        .map(|i| match kind {
                            Binary::Add => g[i],
                            Binary::Sub => -g[i],
                            Binary::Mul => g[i] * pick(ad, i),
                            Binary::Div => {
                                let y = pick(bd, i);
                                -g[i] * pick(ad, i) / (y * y)
                            }
                        })
                        .collect();
                    acc(*b, fold(bd.len(), per));
                }
            }
            Op::Unary(kind, a) => {
                let x = val(*a).data();
                let y = node.value.data();
                let ga: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| match kind {
                        Unary::Exp => gi * y[i],
                        Unary::Log => gi / x[i],
                        Unary::Relu => {
                            if x[i] > 0.0 {
                                *gi
                            } else {
                                0.0
                            }
                        }
                        Unary::Square => 2.0 * x[i] * gi,
                        Unary::Scale(c) => gi * c,
                        Unary::AddScalar(_) => *gi,
                        Unary::ClampMin(f) => {
                            if x[i] > *f {
                                *gi
                            } else {
                                0.0
                            }
                        }
                    })
                    .collect();
                acc(*a, ga);
            }
            Op::Softmax { input, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut ga = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| y[idx(k)] * g[idx(k)]).sum();
                        for k in 0..len {
                            ga[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                acc(*input, ga);
            }
            Op::LogSoftmax { input, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut ga = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let gsum: f64 = (0..len).map(|k| g[idx(k)]).sum();
                        for k in 0..len {
                            ga[idx(k)] = g[idx(k)] - y[idx(k)].exp() * gsum;
                        }
                    }
                }
                acc(*input, ga);
            }
            Op::Reduce { input, kind, axis } => {
                let xv = val(*input);
                let x = xv.data();
                let (outer, len, inner) = match axis {
                    None => (1, x.len(), 1),
                    Some(ax) => split_axis(xv.shape(), *ax),
                };
                let mut ga = vec![0.0; x.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let gi = g[o * inner + i];
                        let idx = |k: usize| (o * len + k) * inner + i;
                        match kind {
                            Reduction::Sum => (0..len).for_each(|k| ga[idx(k)] = gi),
                            Reduction::Mean => (0..len).for_each(|k| ga[idx(k)] = gi / len as f64),
                            Reduction::VarPopulation => {
                                let mean = (0..len).map(|k| x[idx(k)]).sum::<f64>() / len as f64;
                                for k in 0..len {
                                    ga[idx(k)] = gi * 2.0 * (x[idx(k)] - mean) / len as f64;
                                }
                            }
                        }
                    }
                }
                acc(*input, ga);
            }
            Op::Gather { input, indices } => {
                let cols = indices.len();
                let mut ga = vec![0.0; val(*input).numel()];
                for (j, &r) in indices.iter().enumerate() {
                    ga[r * cols + j] += g[j];
                }
                acc(*input, ga);
            }
            Op::ScaleColumns(x, w) => {
                let (xv, wv) = (val(*x), val(*w));
                let cols = wv.numel();
                if self.needs(*x) {
                    let gx = g
                        .iter()
                        .enumerate()
                        .map(|(k, gk)| gk * wv.data()[k % cols])
                        .collect();
                    acc(*x, gx);
                }
                if self.needs(*w) {
                    let mut gw = vec![0.0; cols];
                    for (k, (gk, xk)) in g.iter().zip(xv.data()).enumerate() {
                        gw[k % cols] += gk * xk;
                    }
                    acc(*w, gw);
                }
            }
            Op::SelectRow(a, i) => {
                let av = val(*a);
                let cols = av.shape()[1];
                let mut ga = vec![0.0; av.numel()];
                ga[i * cols..(i + 1) * cols].copy_from_slice(g);
                acc(*a, ga);
            }
            Op::PairwiseSqDist(x, y) => {
                let (xv, yv) = (val(*x), val(*y));
                let (a, b, r) = (xv.shape()[0], yv.shape()[0], xv.shape()[1]);
                let mut gx = vec![0.0; a * r];
                let mut gy = vec![0.0; b * r];
                for i in 0..a {
                    for j in 0..b {
                        let gij = g[i * b + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for d in 0..r {
                            let diff = 2.0 * gij * (xv.data()[i * r + d] - yv.data()[j * r + d]);
                            gx[i * r + d] += diff;
                            gy[j * r + d] -= diff;
                        }
                    }
                }
                acc(*x, gx);
                acc(*y, gy);
            }
        }
    }
}
