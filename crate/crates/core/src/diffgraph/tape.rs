use super::array::{gemm, Array};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Silu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    PositivePart(Var),
    Neg(Var),
    Scale(Var, f64),
    Add(Var, Var),
    Sub(Var, Var),
    AddConst(Var),
    MulConst(Var, Array),
    RowDot(Var, Array),
    SliceRows { x: Var, start: usize },
    Broadcast(Var),
    Sum(Var),
    MeanAbs(Var),
    MeanSq(Var),
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run record of a computation.
///
/// Nodes are appended in creation order, so every node's inputs precede it
/// and a single reverse sweep is a valid topological traversal. All
/// reductions sum sequentially in index order, which makes forward values
/// and gradients bitwise reproducible.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a backward pass, retained for leaf nodes only.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// Gradient with respect to a leaf, `None` when the leaf does not
    /// influence the differentiated output.
    pub fn get(&self, var: Var) -> Option<&Array> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Array> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    pub fn value(&self, var: Var) -> &Array {
        &self.nodes[var.0].value
    }

    /// Leaf that is never differentiated.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Tape::backward`].
    pub fn parameter(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = &self.nodes[x.0].value;
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Array::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.grad_of(&[x]);
        self.push(value, op, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: &[usize]) -> Result<()> {
        if self.shape(a) != b {
            return Err(Error::Dimension {
                op,
                left: self.shape(a).to_vec(),
                right: b.to_vec(),
            });
        }
        Ok(())
    }

    /// `x · wᵀ + b` for `x: [batch, in]`, `w: [out, in]`, `b: [out]`.
    pub fn affine(&mut self, w: Var, b: Var, x: Var) -> Result<Var> {
        let (ws, bs, xs) = (self.shape(w), self.shape(b), self.shape(x));
        if ws.len() != 2 || xs.len() != 2 || xs[1] != ws[1] {
            return Err(Error::Dimension {
                op: "affine",
                left: ws.to_vec(),
                right: xs.to_vec(),
            });
        }
        if bs != [ws[0]] {
            return Err(Error::Dimension {
                op: "affine bias",
                left: ws.to_vec(),
                right: bs.to_vec(),
            });
        }
        let (rows, fan_in, fan_out) = (xs[0], ws[1], ws[0]);
        let mut out = vec![0.0; rows * fan_out];
        gemm(
            rows,
            fan_in,
            fan_out,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            0.0,
            &mut out,
        );
        let bias = self.value(b).data();
        for row in out.chunks_exact_mut(fan_out) {
            for (o, bi) in row.iter_mut().zip(bias) {
                *o += bi;
            }
        }
        let rg = self.grad_of(&[w, b, x]);
        let value = Array::matrix(rows, fan_out, out)?;
        Ok(self.push(value, Op::Affine { x, w, b }, rg))
    }

    /// Elementwise `x · σ(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    /// Per-row normalization over the feature axis with population variance,
    /// followed by the affine map `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::Dimension {
                op: "layer_norm",
                left: xs,
                right: vec![],
            });
        }
        let (rows, f) = (xs[0], xs[1]);
        self.same_shape("layer_norm gamma", gamma, &[f])?;
        self.same_shape("layer_norm beta", beta, &[f])?;
        if f == 1 && eps <= 0.0 {
            return Err(Error::DivisionHazard);
        }
        let src = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; rows * f];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * f];
        for r in 0..rows {
            let row = &src[r * f..(r + 1) * f];
            let mean = row.iter().sum::<f64>() / f as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..f {
                let xh = (row[j] - mean) * s;
                xhat[r * f + j] = xh;
                out[r * f + j] = g[j] * xh + bt[j];
            }
        }
        let rg = self.grad_of(&[x, gamma, beta]);
        let value = Array::matrix(rows, f, out)?;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        Ok(self.push(value, op, rg))
    }

    /// Elementwise `max(x, 0)`; the subgradient at 0 is 0.
    pub fn positive_part(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::PositivePart(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| c * v, Op::Scale(x, c))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let bs = self.shape(b).to_vec();
        self.same_shape(name, a, &bs)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Array::new(bs, data)?;
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    /// `x + c` for a constant array `c` of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Array) -> Result<Var> {
        self.same_shape("add_const", x, c.shape())?;
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(a, b)| a + b)
            .collect();
        let value = Array::new(c.shape().to_vec(), data)?;
        let rg = self.grad_of(&[x]);
        Ok(self.push(value, Op::AddConst(x), rg))
    }

    /// Elementwise `x ⊙ c` for a constant array `c`.
    pub fn mul_const(&mut self, x: Var, c: Array) -> Result<Var> {
        self.same_shape("mul_const", x, c.shape())?;
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(a, b)| a * b)
            .collect();
        let value = Array::new(c.shape().to_vec(), data)?;
        let rg = self.grad_of(&[x]);
        Ok(self.push(value, Op::MulConst(x, c), rg))
    }

    /// Row-wise inner product of `x: [rows, k]` with a constant `c: [rows, k]`,
    /// giving `[rows]`.
    pub fn row_dot(&mut self, x: Var, c: Array) -> Result<Var> {
        self.same_shape("row_dot", x, c.shape())?;
        let src = self.value(x);
        let rows = src.rows();
        let k = src.row_len();
        let data = (0..rows)
            .map(|r| {
                src.data()[r * k..(r + 1) * k]
                    .iter()
                    .zip(&c.data()[r * k..(r + 1) * k])
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        let rg = self.grad_of(&[x]);
        Ok(self.push(Array::vector(data), Op::RowDot(x, c), rg))
    }

    /// Rows `start..start + len` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(x);
        if len == 0 || start + len > src.rows() {
            return Err(Error::Dimension {
                op: "slice_rows",
                left: src.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let k = src.row_len();
        let mut shape = src.shape().to_vec();
        shape[0] = len;
        let value = Array::new(shape, src.data()[start * k..(start + len) * k].to_vec())?;
        let rg = self.grad_of(&[x]);
        Ok(self.push(value, Op::SliceRows { x, start }, rg))
    }

    /// Repeats a scalar into a vector of length `n`.
    pub fn broadcast(&mut self, x: Var, n: usize) -> Result<Var> {
        if !self.value(x).is_scalar() || n == 0 {
            return Err(Error::Dimension {
                op: "broadcast",
                left: self.shape(x).to_vec(),
                right: vec![n],
            });
        }
        let v = self.value(x).data()[0];
        let rg = self.grad_of(&[x]);
        Ok(self.push(Array::filled(&[n], v), Op::Broadcast(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.grad_of(&[x]);
        self.push(Array::scalar(s), Op::Sum(x), rg)
    }

    /// `(1/B) Σ |xᵢ|`; the subgradient of `|·|` at 0 is 0.
    pub fn reduce_mean_abs(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::EmptyBatch("reduce_mean_abs"));
        }
        let s = self.value(x).data().iter().map(|v| v.abs()).sum::<f64>() / n as f64;
        let rg = self.grad_of(&[x]);
        Ok(self.push(Array::scalar(s), Op::MeanAbs(x), rg))
    }

    /// `(1/B) Σ xᵢ²`.
    pub fn reduce_mean_sq(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::EmptyBatch("reduce_mean_sq"));
        }
        let s = self.value(x).data().iter().map(|v| v * v).sum::<f64>() / n as f64;
        let rg = self.grad_of(&[x]);
        Ok(self.push(Array::scalar(s), Op::MeanSq(x), rg))
    }

    /// Reverse sweep from a scalar output seeded with 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let value = self.value(loss);
        if !value.is_scalar() {
            return Err(Error::NonScalarLoss(value.shape().to_vec()));
        }
        self.backward_with_seed(loss, Array::new(value.shape().to_vec(), vec![1.0])?)
    }

    /// Vector–Jacobian product: reverse sweep from `output` seeded with
    /// `seed` (same shape as the output's value).
    pub fn backward_with_seed(&self, output: Var, seed: Array) -> Result<Gradients> {
        if seed.shape() != self.shape(output) {
            return Err(Error::Dimension {
                op: "backward seed",
                left: self.shape(output).to_vec(),
                right: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Array>], v: Var, g: Array) {
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn zeros_like(&self, v: Var) -> Array {
        Array::zeros(self.shape(v))
    }

    fn map_grad(&self, g: &Array, x: Var, f: impl Fn(f64, f64) -> f64) -> Array {
        let data = g
            .data()
            .iter()
            .zip(self.value(x).data())
            .map(|(&gi, &xi)| f(gi, xi))
            .collect();
        Array::new(g.shape().to_vec(), data).expect("same shape")
    }

    fn propagate(&self, i: usize, g: &Array, grads: &mut [Option<Array>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::Affine { x, w, b } => {
                let (rows, fan_out) = (g.shape()[0], g.shape()[1]);
                let fan_in = self.shape(w)[1];
                if self.wants(x) {
                    let mut dx = vec![0.0; rows * fan_in];
                    gemm(
                        rows,
                        fan_out,
                        fan_in,
                        g.data(),
                        false,
                        self.value(w).data(),
                        false,
                        0.0,
                        &mut dx,
                    );
                    self.accumulate(grads, x, Array::matrix(rows, fan_in, dx).unwrap());
                }
                if self.wants(w) {
                    let slot = grads[w.0].get_or_insert_with(|| self.zeros_like(w));
                    gemm(
                        fan_out,
                        rows,
                        fan_in,
                        g.data(),
                        true,
                        self.value(x).data(),
                        false,
                        1.0,
                        slot.data_mut(),
                    );
                }
                if self.wants(b) {
                    let slot = grads[b.0].get_or_insert_with(|| self.zeros_like(b));
                    let db = slot.data_mut();
                    for row in g.data().chunks_exact(fan_out) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
            }
            &Op::Silu(x) => {
                if self.wants(x) {
                    let dx = self.map_grad(g, x, |gi, xi| {
                        let s = sigmoid(xi);
                        gi * s * (1.0 + xi * (1.0 - s))
                    });
                    self.accumulate(grads, x, dx);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let f = g.shape()[1];
                let gd = g.data();
                if self.wants(gamma) {
                    let slot = grads[gamma.0].get_or_insert_with(|| self.zeros_like(gamma));
                    let dg = slot.data_mut();
                    for (grow, xrow) in gd.chunks_exact(f).zip(xhat.chunks_exact(f)) {
                        for j in 0..f {
                            dg[j] += grow[j] * xrow[j];
                        }
                    }
                }
                if self.wants(beta) {
                    let slot = grads[beta.0].get_or_insert_with(|| self.zeros_like(beta));
                    let db = slot.data_mut();
                    for grow in gd.chunks_exact(f) {
                        for j in 0..f {
                            db[j] += grow[j];
                        }
                    }
                }
                if self.wants(x) {
                    let gam = self.value(gamma).data();
                    let mut dx = vec![0.0; gd.len()];
                    for (r, s) in rstd.iter().enumerate() {
                        let grow = &gd[r * f..(r + 1) * f];
                        let xrow = &xhat[r * f..(r + 1) * f];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..f {
                            let dxh = grow[j] * gam[j];
                            m1 += dxh;
                            m2 += dxh * xrow[j];
                        }
                        m1 /= f as f64;
                        m2 /= f as f64;
                        for j in 0..f {
                            dx[r * f + j] = s * (grow[j] * gam[j] - m1 - xrow[j] * m2);
                        }
                    }
                    self.accumulate(grads, x, Array::new(g.shape().to_vec(), dx).unwrap());
                }
            }
            &Op::PositivePart(x) => {
                if self.wants(x) {
                    let dx = self.map_grad(g, x, |gi, xi| if xi > 0.0 { gi } else { 0.0 });
                    self.accumulate(grads, x, dx);
                }
            }
            &Op::Neg(x) => {
                if self.wants(x) {
                    let dx = self.map_grad(g, x, |gi, _| -gi);
                    self.accumulate(grads, x, dx);
                }
            }
            &Op::Scale(x, c) => {
                if self.wants(x) {
                    let dx = self.map_grad(g, x, |gi, _| c * gi);
                    self.accumulate(grads, x, dx);
                }
            }
            &Op::Add(a, b) => {
                if self.wants(a) {
                    self.accumulate(grads, a, g.clone());
                }
                if self.wants(b) {
                    self.accumulate(grads, b, g.clone());
                }
            }
            &Op::Sub(a, b) => {
                if self.wants(a) {
                    self.accumulate(grads, a, g.clone());
                }
                if self.wants(b) {
                    let db = self.map_grad(g, b, |gi, _| -gi);
                    self.accumulate(grads, b, db);
                }
            }
            &Op::AddConst(x) => {
                if self.wants(x) {
                    self.accumulate(grads, x, g.clone());
                }
            }
            Op::MulConst(x, c) => {
                if self.wants(*x) {
                    let data = g.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
                    self.accumulate(grads, *x, Array::new(g.shape().to_vec(), data).unwrap());
                }
            }
            Op::RowDot(x, c) => {
                if self.wants(*x) {
                    let k = c.row_len();
                    let mut dx = c.clone();
                    for (row, gi) in dx.data_mut().chunks_exact_mut(k).zip(g.data()) {
                        row.iter_mut().for_each(|v| *v *= gi);
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            &Op::SliceRows { x, start } => {
                if self.wants(x) {
                    let k = self.value(x).row_len();
                    let slot = grads[x.0].get_or_insert_with(|| self.zeros_like(x));
                    let dst = &mut slot.data_mut()[start * k..start * k + g.len()];
                    for (d, v) in dst.iter_mut().zip(g.data()) {
                        *d += v;
                    }
                }
            }
            &Op::Broadcast(x) => {
                if self.wants(x) {
                    let s = g.data().iter().sum();
                    self.accumulate(grads, x, Array::scalar(s));
                }
            }
            &Op::Sum(x) => {
                if self.wants(x) {
                    let s = g.data()[0];
                    self.accumulate(grads, x, Array::filled(self.shape(x), s));
                }
            }
            &Op::MeanAbs(x) => {
                if self.wants(x) {
                    let scale = g.data()[0] / self.value(x).len() as f64;
                    let data = self
                        .value(x)
                        .data()
                        .iter()
                        .map(|&v| {
                            if v > 0.0 {
                                scale
                            } else if v < 0.0 {
                                -scale
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    self.accumulate(grads, x, Array::new(self.shape(x).to_vec(), data).unwrap());
                }
            }
            &Op::MeanSq(x) => {
                if self.wants(x) {
                    let scale = 2.0 * g.data()[0] / self.value(x).len() as f64;
                    let data = self.value(x).data().iter().map(|&v| scale * v).collect();
                    self.accumulate(grads, x, Array::new(self.shape(x).to_vec(), data).unwrap());
                }
            }
        }
    }
}
