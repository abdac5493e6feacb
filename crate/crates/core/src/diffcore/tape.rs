//! Wengert-list tape. Every primitive appends one node holding its output
//! value; `backward` walks the list in reverse once.

use super::{DiffError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Square(Var),
    // constant-operand forms of mul and add
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Conv2d { input: Var, kernel: Var },
    Sum(Var),
    Mean(Var),
    SumAxis { a: Var, axis: usize },
    Broadcast(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Softmax { a: Var, axis: usize },
    Max { a: Var, axis: usize, argmax: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Square(..) => "square",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::Broadcast(..) => "broadcast",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Softmax { .. } => "softmax",
            Op::Max { .. } => "max",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive operations. Inputs always precede the node using them.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward pass: one optional gradient buffer per tape node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (if any) into `target.grad`.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor) -> Result<(), DiffError> {
        match self.get(v) {
            Some(g) => target.accumulate_grad(g),
            None => target.accumulate_grad(&vec![0.0; target.numel()]),
        }
    }
}

/// (outer, axis length, inner) decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Maps each flat index of `out_shape` to the flat index of `in_shape` it reads under broadcasting.
fn broadcast_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let pad = out_shape.len() - in_shape.len();
    let mut strides = vec![0usize; out_shape.len()];
    let mut acc = 1;
    for d in (0..in_shape.len()).rev() {
        strides[d + pad] = if in_shape[d] == 1 { 0 } else { acc };
        acc *= in_shape[d];
    }
    let numel: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    for _ in 0..numel {
        map.push(offset);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    map
}

fn conv2d_forward(
    input: &[f64],
    kernel: &[f64],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; c_out * plane];
    for co in 0..c_out {
        let out_plane = &mut out[co * plane..(co + 1) * plane];
        for ci in 0..c_in {
            let in_plane = &input[ci * plane..(ci + 1) * plane];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wgt = kernel[((co * c_in + ci) * 3 + ky) * 3 + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let (y_lo, y_hi) = tap_range(ky, h);
                    let (x_lo, x_hi) = tap_range(kx, w);
                    for y in y_lo..y_hi {
                        let sy = y + ky - 1;
                        let o = &mut out_plane[y * w + x_lo..y * w + x_hi];
                        let i = &in_plane[sy * w + x_lo + kx - 1..sy * w + x_hi + kx - 1];
                        for (ov, iv) in o.iter_mut().zip(i) {
                            *ov += wgt * iv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Output rows/cols for which tap `k` (0..3, offset k-1) reads inside the unpadded input.
fn tap_range(k: usize, n: usize) -> (usize, usize) {
    match k {
        0 => (1, n),
        1 => (0, n),
        _ => (0, n - 1),
    }
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are finite")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(
        &mut self,
        op: Op,
        shape: Vec<usize>,
        value: Vec<f64>,
        needs_grad: bool,
    ) -> Result<Var, DiffError> {
        if value.iter().any(|x| !x.is_finite()) {
            return Err(DiffError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records `t` as a leaf; it receives gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.values().to_vec(),
            op: Op::Leaf,
            needs_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant leaf that never receives gradients.
    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var, DiffError> {
        let t = Tensor::new(shape.to_vec(), values)?;
        Ok(self.leaf(&t))
    }

    /// Copy of `v`'s value as a gradient-free constant.
    pub fn detach(&mut self, v: Var) -> Var {
        let node = &self.nodes[v.0];
        let (shape, value) = (node.shape.clone(), node.value.clone());
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(DiffError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, DiffError> {
        self.same_shape(name, a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let needs = self.ng(a) || self.ng(b);
        self.push(op, self.shape(a).to_vec(), value, needs)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var, DiffError> {
        let value = self.value(a).iter().map(|x| f(*x)).collect();
        let needs = self.ng(a);
        self.push(op, self.shape(a).to_vec(), value, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("div", a, b)?;
        if self.value(b).iter().any(|v| *v == 0.0) {
            return Err(DiffError::Domain {
                op: "div",
                detail: "zero divisor".into(),
            });
        }
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, DiffError> {
        if let Some(bad) = self.value(a).iter().find(|v| **v <= 0.0) {
            return Err(DiffError::Domain {
                op: "log",
                detail: format!("non-positive operand {bad}"),
            });
        }
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// `a * c` for a constant scalar `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, DiffError> {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    /// `a + c` for a constant scalar `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var, DiffError> {
        self.unary(a, Op::Offset(a), |x| x + c)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for (o, bv) in row.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o += aip * bv;
                }
            }
        }
        let needs = self.ng(a) || self.ng(b);
        self.push(Op::MatMul(a, b), vec![m, n], out, needs)
    }

    /// 3x3 convolution, stride 1, zero padding 1.
    /// `input: [c_in, h, w]`, `kernel: [c_out, c_in, 3, 3]` -> `[c_out, h, w]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var) -> Result<Var, DiffError> {
        let (si, sk) = (self.shape(input), self.shape(kernel));
        if si.len() != 3 || sk.len() != 4 || sk[1] != si[0] || sk[2] != 3 || sk[3] != 3 {
            return Err(DiffError::ShapeMismatch {
                op: "conv2d",
                left: si.to_vec(),
                right: sk.to_vec(),
            });
        }
        let (c_in, h, w, c_out) = (si[0], si[1], si[2], sk[0]);
        let out = conv2d_forward(self.value(input), self.value(kernel), c_in, c_out, h, w);
        let needs = self.ng(input) || self.ng(kernel);
        self.push(Op::Conv2d { input, kernel }, vec![c_out, h, w], out, needs)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        let s = self.value(a).iter().sum();
        let needs = self.ng(a);
        self.push(Op::Sum(a), vec![1], vec![s], needs)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, DiffError> {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let needs = self.ng(a);
        self.push(Op::Mean(a), vec![1], vec![s], needs)
    }

    /// Sum along `axis`, keeping it with length 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, DiffError> {
        let shape = self.shape(a).to_vec();
        self.check_axis("sum_axis", &shape, axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let v = self.value(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &v[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let needs = self.ng(a);
        self.push(Op::SumAxis { a, axis }, out_shape, out, needs)
    }

    fn check_axis(&self, op: &'static str, shape: &[usize], axis: usize) -> Result<(), DiffError> {
        if axis >= shape.len() {
            return Err(DiffError::ShapeMismatch {
                op,
                left: shape.to_vec(),
                right: vec![axis],
            });
        }
        Ok(())
    }

    /// Expands `a` to `shape` under right-aligned broadcasting (size-1 dims stretch).
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let sa = self.shape(a).to_vec();
        let ok = sa.len() <= shape.len()
            && sa
                .iter()
                .rev()
                .zip(shape.iter().rev())
                .all(|(x, y)| *x == *y || *x == 1);
        if !ok || shape.contains(&0) {
            return Err(DiffError::ShapeMismatch {
                op: "broadcast",
                left: sa,
                right: shape.to_vec(),
            });
        }
        let map = broadcast_map(&sa, shape);
        let v = self.value(a);
        let out = map.iter().map(|i| v[*i]).collect();
        let needs = self.ng(a);
        self.push(Op::Broadcast(a), shape.to_vec(), out, needs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).len() || shape.contains(&0) {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                left: self.shape(a).to_vec(),
                right: shape.to_vec(),
            });
        }
        let out = self.value(a).to_vec();
        let needs = self.ng(a);
        self.push(Op::Reshape(a), shape.to_vec(), out, needs)
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, DiffError> {
        let first = parts.first().ok_or(DiffError::Invalid("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        self.check_axis("concat", &base, axis)?;
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    left: base.clone(),
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis];
                out.extend_from_slice(&self.value(*p)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let needs = parts.iter().any(|p| self.ng(*p));
        self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            shape,
            out,
            needs,
        )
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, DiffError> {
        let shape = self.shape(a).to_vec();
        self.check_axis("slice", &shape, axis)?;
        if len == 0 || start + len > shape[axis] {
            return Err(DiffError::ShapeMismatch {
                op: "slice",
                left: shape,
                right: vec![start, len],
            });
        }
        let (outer, alen, inner) = split_axis(&shape, axis);
        let v = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&v[(o * alen + start) * inner..(o * alen + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let needs = self.ng(a);
        self.push(Op::Slice { a, axis, start }, out_shape, out, needs)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, DiffError> {
        let shape = self.shape(a).to_vec();
        self.check_axis("softmax", &shape, axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let v = self.value(a);
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mx = (0..len).map(|l| v[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (v[at(l)] - mx).exp();
                    out[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[at(l)] /= z;
                }
            }
        }
        let needs = self.ng(a);
        self.push(Op::Softmax { a, axis }, shape, out, needs)
    }

    /// Maximum along `axis` (kept with length 1); ties resolve to the first index.
    pub fn max(&mut self, a: Var, axis: usize) -> Result<Var, DiffError> {
        let shape = self.shape(a).to_vec();
        self.check_axis("max", &shape, axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let v = self.value(a);
        let mut out = vec![0.0; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                for l in 1..len {
                    if v[(o * len + l) * inner + i] > v[(o * len + best) * inner + i] {
                        best = l;
                    }
                }
                out[o * inner + i] = v[(o * len + best) * inner + i];
                argmax[o * inner + i] = best;
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let needs = self.ng(a);
        self.push(Op::Max { a, axis, argmax }, out_shape, out, needs)
    }

    /// Reverse pass from a one-element `loss`, seeded with 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients, DiffError> {
        self.backward_seeded(loss, 1.0)
    }

    /// Reverse pass from a one-element `loss`, seeded with `seed` (the gradient of `seed * loss`).
    pub fn backward_seeded(&self, loss: Var, seed: f64) -> Result<Gradients, DiffError> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(DiffError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![seed]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(DiffError::NonFinite {
                        op: self.nodes[i].op.name(),
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<(), DiffError> {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                acc(*a, &mut |s| {
                    for ((x, gi), bi) in s.iter_mut().zip(g).zip(bv) {
                        *x += gi * bi;
                    }
                });
                acc(*b, &mut |s| {
                    for ((x, gi), ai) in s.iter_mut().zip(g).zip(av) {
                        *x += gi * ai;
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                acc(*a, &mut |s| {
                    for ((x, gi), bi) in s.iter_mut().zip(g).zip(bv) {
                        *x += gi / bi;
                    }
                });
                acc(*b, &mut |s| {
                    for (((x, gi), ai), bi) in s.iter_mut().zip(g).zip(av).zip(bv) {
                        *x -= gi * ai / (bi * bi);
                    }
                });
            }
            Op::Neg(a) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y)),
            Op::Exp(a) => acc(*a, &mut |s| {
                for ((x, gi), yi) in s.iter_mut().zip(g).zip(&node.value) {
                    *x += gi * yi;
                }
            }),
            Op::Log(a) => {
                let av = &self.nodes[a.0].value;
                acc(*a, &mut |s| {
                    for ((x, gi), ai) in s.iter_mut().zip(g).zip(av) {
                        *x += gi / ai;
                    }
                })
            }
            Op::Tanh(a) => acc(*a, &mut |s| {
                for ((x, gi), yi) in s.iter_mut().zip(g).zip(&node.value) {
                    *x += gi * (1.0 - yi * yi);
                }
            }),
            Op::Square(a) => {
                let av = &self.nodes[a.0].value;
                acc(*a, &mut |s| {
                    for ((x, gi), ai) in s.iter_mut().zip(g).zip(av) {
                        *x += 2.0 * gi * ai;
                    }
                })
            }
            Op::Scale(a, c) => acc(*a, &mut |s| {
                for (x, gi) in s.iter_mut().zip(g) {
                    *x += gi * c;
                }
            }),
            Op::Offset(a) => acc(*a, &mut |s| add_into(s, g)),
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                // dA = G B^T
                acc(*a, &mut |s| {
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            s[i * k + p] += gi.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                // dB = A^T G
                acc(*b, &mut |s| {
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (x, y) in s[p * n..(p + 1) * n].iter_mut().zip(gi) {
                                *x += aip * y;
                            }
                        }
                    }
                });
            }
            Op::Conv2d { input, kernel } => {
                let si = &self.nodes[input.0].shape;
                let (c_in, h, w) = (si[0], si[1], si[2]);
                let c_out = self.nodes[kernel.0].shape[0];
                let plane = h * w;
                let iv = &self.nodes[input.0].value;
                let kv = &self.nodes[kernel.0].value;
                acc(*input, &mut |s| {
                    for co in 0..c_out {
                        let gp = &g[co * plane..(co + 1) * plane];
                        for ci in 0..c_in {
                            let sp = &mut s[ci * plane..(ci + 1) * plane];
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let wgt = kv[((co * c_in + ci) * 3 + ky) * 3 + kx];
                                    if wgt == 0.0 {
                                        continue;
                                    }
                                    let (y_lo, y_hi) = tap_range(ky, h);
                                    let (x_lo, x_hi) = tap_range(kx, w);
                                    for y in y_lo..y_hi {
                                        let sy = y + ky - 1;
                                        let dst = &mut sp
                                            [sy * w + x_lo + kx - 1..sy * w + x_hi + kx - 1];
                                        let src = &gp[y * w + x_lo..y * w + x_hi];
                                        for (d, v) in dst.iter_mut().zip(src) {
                                            *d += wgt * v;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                acc(*kernel, &mut |s| {
                    for co in 0..c_out {
                        let gp = &g[co * plane..(co + 1) * plane];
                        for ci in 0..c_in {
                            let ip = &iv[ci * plane..(ci + 1) * plane];
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (y_lo, y_hi) = tap_range(ky, h);
                                    let (x_lo, x_hi) = tap_range(kx, w);
                                    let mut total = 0.0;
                                    for y in y_lo..y_hi {
                                        let sy = y + ky - 1;
                                        let a = &gp[y * w + x_lo..y * w + x_hi];
                                        let b = &ip[sy * w + x_lo + kx - 1..sy * w + x_hi + kx - 1];
                                        total += a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
                                    }
                                    s[((co * c_in + ci) * 3 + ky) * 3 + kx] += total;
                                }
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0] / n))
            }
            Op::SumAxis { a, axis } => {
                let (outer, len, inner) = split_axis(&self.nodes[a.0].shape, *axis);
                acc(*a, &mut |s| {
                    for o in 0..outer {
                        let gs = &g[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            add_into(&mut s[(o * len + l) * inner..(o * len + l + 1) * inner], gs);
                        }
                    }
                })
            }
            Op::Broadcast(a) => {
                let map = broadcast_map(&self.nodes[a.0].shape, &node.shape);
                acc(*a, &mut |s| {
                    for (gi, i) in g.iter().zip(&map) {
                        s[*i] += gi;
                    }
                })
            }
            Op::Reshape(a) => acc(*a, &mut |s| add_into(s, g)),
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut start = 0;
                for p in parts {
                    let len = self.nodes[p.0].shape[*axis];
                    acc(*p, &mut |s| {
                        for o in 0..outer {
                            add_into(
                                &mut s[o * len * inner..(o + 1) * len * inner],
                                &g[(o * total + start) * inner..(o * total + start + len) * inner],
                            );
                        }
                    });
                    start += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let (outer, alen, inner) = split_axis(&self.nodes[a.0].shape, *axis);
                let len = node.shape[*axis];
                acc(*a, &mut |s| {
                    for o in 0..outer {
                        add_into(
                            &mut s[(o * alen + start) * inner..(o * alen + start + len) * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                })
            }
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = split_axis(&node.shape, *axis);
                let y = &node.value;
                acc(*a, &mut |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                s[at(l)] += y[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                })
            }
            Op::Max { a, axis, argmax } => {
                let (outer, len, inner) = split_axis(&self.nodes[a.0].shape, *axis);
                acc(*a, &mut |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let l = argmax[o * inner + i];
                            s[(o * len + l) * inner + i] += g[o * inner + i];
                        }
                    }
                })
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(t: &mut Tape, shape: &[usize], v: Vec<f64>) -> Var {
        t.leaf(&Tensor::new(shape.to_vec(), v).unwrap().with_grad())
    }

    #[test]
    fn add_elementwise() {
        let mut t = Tape::new();
        let a = leaf(&mut t, &[2], vec![1.0, 2.0]);
        let b = leaf(&mut t, &[2], vec![3.0, 4.0]);
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c), &[4.0, 6.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::new();
        let a = leaf(&mut t, &[2], vec![0.0, 0.0]);
        let s = t.softmax(a, 0).unwrap();
        assert_eq!(t.value(s), &[0.5, 0.5]);
    }

    #[test]
    fn laplacian_kills_constant_field() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[1, 5, 5], vec![3.0; 25]);
        let k = t
            .constant(&[1, 1, 3, 3], vec![0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0])
            .unwrap();
        let y = t.conv2d(x, k).unwrap();
        // zero padding only affects the border; the interior is exactly 0
        for i in 1..4 {
            for j in 1..4 {
                assert_eq!(t.value(y)[i * 5 + j], 0.0);
            }
        }
    }

    #[test]
    fn power_rule() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[1], vec![3.0]);
        let y = t.square(x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn constant_loss_gives_zero_grad() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[1], vec![3.0]);
        let c = t.constant(&[1], vec![2.0]).unwrap();
        let _unused = t.square(x).unwrap();
        let g = t.backward(c).unwrap();
        let mut xt = Tensor::scalar(3.0).with_grad();
        g.accumulate_into(x, &mut xt).unwrap();
        assert_eq!(xt.grad().unwrap(), &[0.0]);
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[1], vec![2.0]);
        let y = t.mul(x, x).unwrap();
        let z = t.add(y, x).unwrap();
        let g = t.backward(z).unwrap();
        assert_eq!(g.get(x).unwrap(), &[5.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2], vec![1.0, 2.0]);
        assert!(matches!(t.backward(x), Err(DiffError::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = leaf(&mut t, &[2], vec![1.0, 2.0]);
        let b = leaf(&mut t, &[3], vec![1.0, 2.0, 3.0]);
        let err = t.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2]") && err.contains("[3]"), "{err}");
    }

    #[test]
    fn domain_errors() {
        let mut t = Tape::new();
        let a = leaf(&mut t, &[2], vec![1.0, 0.0]);
        let b = leaf(&mut t, &[2], vec![1.0, 1.0]);
        assert!(matches!(t.log(a), Err(DiffError::Domain { .. })));
        assert!(matches!(t.div(b, a), Err(DiffError::Domain { .. })));
    }

    #[test]
    fn overflow_is_an_error() {
        let mut t = Tape::new();
        let a = leaf(&mut t, &[1], vec![1000.0]);
        assert!(matches!(t.exp(a), Err(DiffError::NonFinite { op: "exp" })));
    }

    #[test]
    fn broadcast_row_and_reduce() {
        let mut t = Tape::new();
        let a = leaf(&mut t, &[2, 1], vec![1.0, 2.0]);
        let b = t.broadcast(a, &[3, 2, 4]).unwrap();
        assert_eq!(t.shape(b), &[3, 2, 4]);
        assert_eq!(&t.value(b)[..8], &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
        let s = t.sum(b).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap(), &[12.0, 12.0]);
    }

    #[test]
    fn concat_slice_round_trip() {
        let mut t = Tape::new();
        let a = leaf(&mut t, &[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut t, &[2, 1], vec![5.0, 6.0]);
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.value(c), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = t.slice(c, 1, 2, 1).unwrap();
        assert_eq!(t.value(s), &[5.0, 6.0]);
    }

    #[test]
    fn max_routes_gradient_to_argmax() {
        let mut t = Tape::new();
        let a = leaf(&mut t, &[2, 2], vec![1.0, 5.0, 3.0, 2.0]);
        let m = t.max(a, 0).unwrap();
        assert_eq!(t.value(m), &[3.0, 5.0]);
        let s = t.sum(m).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap(), &[0.0, 1.0, 1.0, 0.0]);
    }
}
