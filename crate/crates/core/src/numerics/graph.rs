//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! Every node is a 2-D value (`rows × cols`); scalars are `1 × 1` and
//! per-channel vectors are `1 × d`. Nodes are appended in execution order,
//! so the tape is topologically sorted by construction and `backward`
//! walks it once in reverse.

use super::{Float, NumericsError, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Storage<F> {
    Owned(Vec<F>),
    Param(usize),
}

enum Op<F> {
    Leaf,
    Param,
    StopGrad,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    Softmax {
        input: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    Gelu(Var),
    MaskedFill {
        input: Var,
        keep: Vec<bool>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<F>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node<F> {
    rows: usize,
    cols: usize,
    value: Storage<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Recording of one forward computation.
///
/// Parameters are borrowed from a flat slice and never copied; the graph
/// hands out one leaf per parameter index so repeated uses accumulate into a
/// single gradient.
pub struct Graph<'p, F: Float> {
    params: &'p [Tensor<F>],
    nodes: Vec<Node<F>>,
    param_vars: Vec<Option<Var>>,
    grads: Vec<Option<Vec<F>>>,
    backward_done: bool,
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> NumericsError {
    NumericsError::Shape(format!(
        "{op}: incompatible shapes [{}, {}] and [{}, {}]",
        a.0, a.1, b.0, b.1
    ))
}

impl<F: Float> Graph<'static, F> {
    /// A graph with no parameter store.
    pub fn standalone() -> Self {
        Graph::new(&[])
    }
}

impl<'p, F: Float> Graph<'p, F> {
    pub fn new(params: &'p [Tensor<F>]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].rows
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].cols
    }

    pub fn value(&self, v: Var) -> &[F] {
        match &self.nodes[v.0].value {
            Storage::Owned(d) => d,
            Storage::Param(i) => self.params[*i].data(),
        }
    }

    pub fn tensor(&self, v: Var) -> Tensor<F> {
        let (r, c) = self.shape(v);
        Tensor::new(vec![r, c], self.value(v).to_vec()).expect("node shape")
    }

    pub fn scalar(&self, v: Var) -> F {
        self.value(v)[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<F>, op: Op<F>, rg: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value: Storage::Owned(value),
            op,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Adds a constant or trainable leaf; `requires_grad` follows the tensor.
    pub fn leaf(&mut self, t: &Tensor<F>) -> Var {
        let rg = t.requires_grad;
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Leaf, rg)
    }

    pub fn constant(
        &mut self,
        rows: usize,
        cols: usize,
        data: Vec<F>,
    ) -> Result<Var, NumericsError> {
        if rows * cols != data.len() {
            return Err(NumericsError::Shape(format!(
                "constant: [{rows}, {cols}] needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(self.push(rows, cols, data, Op::Leaf, false))
    }

    /// Leaf for parameter `idx` of the borrowed store.
    pub fn param(&mut self, idx: usize) -> Var {
        if let Some(v) = self.param_vars[idx] {
            return v;
        }
        let t = &self.params[idx];
        let rg = t.requires_grad;
        self.nodes.push(Node {
            rows: t.rows(),
            cols: t.cols(),
            value: Storage::Param(idx),
            op: Op::Param,
            requires_grad: rg,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[idx] = Some(v);
        v
    }

    /// Identical value, no gradient flows back through it.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let v = self.value(a).to_vec();
        self.push(r, c, v, Op::StopGrad, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(shape_err("matmul", (m, k), (k2, n)));
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            k,
            n,
            self.value(a),
            k as isize,
            1,
            self.value(b),
            n as isize,
            1,
            F::zero(),
            &mut out,
            n as isize,
            1,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(m, n, out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let src = self.value(a);
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push(c, r, out, Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, NumericsError> {
        let (r, c) = self.shape(a);
        if r * c != rows * cols {
            return Err(shape_err("reshape", (r, c), (rows, cols)));
        }
        let v = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(rows, cols, v, Op::Reshape(a), rg))
    }

    fn zip(
        &mut self,
        name: &str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
    ) -> Result<Vec<F>, NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        Ok(self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.zip("add", a, b, |x, y| x + y)?;
        let (r, c) = self.shape(a);
        let rg = self.rg(&[a, b]);
        Ok(self.push(r, c, out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.zip("sub", a, b, |x, y| x - y)?;
        let (r, c) = self.shape(a);
        let rg = self.rg(&[a, b]);
        Ok(self.push(r, c, out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.zip("mul", a, b, |x, y| x * y)?;
        let (r, c) = self.shape(a);
        let rg = self.rg(&[a, b]);
        Ok(self.push(r, c, out, Op::Mul(a, b), rg))
    }

    fn check_row(&self, name: &str, a: Var, row: Var) -> Result<(), NumericsError> {
        let (_, c) = self.shape(a);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != c {
            return Err(shape_err(name, self.shape(a), (rr, rc)));
        }
        Ok(())
    }

    /// `a + row`, with the `1 × cols` row broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        self.check_row("add_row", a, row)?;
        let (r, c) = self.shape(a);
        let rv = self.value(row);
        let out: Vec<F> = self
            .value(a)
            .chunks_exact(c.max(1))
            .flat_map(|chunk| chunk.iter().zip(rv).map(|(&x, &y)| x + y))
            .collect();
        let rg = self.rg(&[a, row]);
        Ok(self.push(r, c, out, Op::AddRow(a, row), rg))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        self.check_row("mul_row", a, row)?;
        let (r, c) = self.shape(a);
        let rv = self.value(row);
        let out: Vec<F> = self
            .value(a)
            .chunks_exact(c.max(1))
            .flat_map(|chunk| chunk.iter().zip(rv).map(|(&x, &y)| x * y))
            .collect();
        let rg = self.rg(&[a, row]);
        Ok(self.push(r, c, out, Op::MulRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let rg = self.rg(&[a]);
        self.push(r, c, out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: F) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x + s).collect();
        let rg = self.rg(&[a]);
        self.push(r, c, out, Op::AddScalar(a), rg)
    }

    /// Concatenation along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, NumericsError> {
        if inputs.is_empty() {
            return Err(NumericsError::Shape("concat: no inputs".into()));
        }
        let (r0, c0) = self.shape(inputs[0]);
        match axis {
            0 => {
                let mut rows = 0;
                for &v in inputs {
                    let (r, c) = self.shape(v);
                    if c != c0 {
                        return Err(shape_err("concat(axis 0)", (r0, c0), (r, c)));
                    }
                    rows += r;
                }
                let mut out = Vec::with_capacity(rows * c0);
                for &v in inputs {
                    out.extend_from_slice(self.value(v));
                }
                let rg = self.rg(inputs);
                Ok(self.push(
                    rows,
                    c0,
                    out,
                    Op::Concat {
                        inputs: inputs.to_vec(),
                        axis,
                    },
                    rg,
                ))
            }
            1 => {
                let mut cols = 0;
                for &v in inputs {
                    let (r, c) = self.shape(v);
                    if r != r0 {
                        return Err(shape_err("concat(axis 1)", (r0, c0), (r, c)));
                    }
                    cols += c;
                }
                let mut out = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for &v in inputs {
                        let c = self.cols(v);
                        out.extend_from_slice(&self.value(v)[i * c..(i + 1) * c]);
                    }
                }
                let rg = self.rg(inputs);
                Ok(self.push(
                    r0,
                    cols,
                    out,
                    Op::Concat {
                        inputs: inputs.to_vec(),
                        axis,
                    },
                    rg,
                ))
            }
            _ => Err(NumericsError::Shape(format!(
                "concat: axis {axis} out of range"
            ))),
        }
    }

    /// Contiguous slice of `len` rows (`axis = 0`) or columns (`axis = 1`).
    pub fn slice(
        &mut self,
        a: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, NumericsError> {
        let (r, c) = self.shape(a);
        let src = self.value(a);
        let (out, rows, cols) = match axis {
            0 if start + len <= r => (src[start * c..(start + len) * c].to_vec(), len, c),
            1 if start + len <= c => {
                let mut out = Vec::with_capacity(r * len);
                for i in 0..r {
                    out.extend_from_slice(&src[i * c + start..i * c + start + len]);
                }
                (out, r, len)
            }
            _ => {
                return Err(NumericsError::Shape(format!(
                    "slice: axis {axis} range {start}..{} outside [{r}, {c}]",
                    start + len
                )))
            }
        };
        let rg = self.rg(&[a]);
        Ok(self.push(
            rows,
            cols,
            out,
            Op::Slice {
                input: a,
                axis,
                start,
            },
            rg,
        ))
    }

    /// Row lookup: output row `i` is `table[indices[i]]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var, NumericsError> {
        let (r, c) = self.shape(table);
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(NumericsError::Index(format!(
                "gather_rows: index {bad} out of range for table with {r} rows"
            )));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            indices.len(),
            c,
            out,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Softmax along `axis` (1 = within each row, 0 = within each column),
    /// computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, NumericsError> {
        let (r, c) = self.shape(a);
        let src = self.value(a);
        let mut out = vec![F::zero(); r * c];
        match axis {
            1 => {
                for i in 0..r {
                    softmax_strided(&src[i * c..], &mut out[i * c..], c, 1);
                }
            }
            0 => {
                for j in 0..c {
                    softmax_strided(&src[j..], &mut out[j..], r, c);
                }
            }
            _ => {
                return Err(NumericsError::Shape(format!(
                    "softmax: axis {axis} out of range"
                )))
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(r, c, out, Op::Softmax { input: a, axis }, rg))
    }

    /// Row-wise layer normalization followed by `gain ⊙ x̂ + bias`, where
    /// `gain` and `bias` are `1 × cols`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: F,
    ) -> Result<Var, NumericsError> {
        self.check_row("layer_norm(gain)", x, gain)?;
        self.check_row("layer_norm(bias)", x, bias)?;
        let (r, c) = self.shape(x);
        if c == 0 {
            return Err(NumericsError::Shape("layer_norm: zero-width rows".into()));
        }
        let src = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let inv_c = F::one() / F::from_usize(c).unwrap();
        let mut out = Vec::with_capacity(r * c);
        let mut means = Vec::with_capacity(r);
        let mut rstds = Vec::with_capacity(r);
        for row in src.chunks_exact(c) {
            let mean = row.iter().copied().sum::<F>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_c;
            let rstd = F::one() / (var + eps).sqrt();
            for j in 0..c {
                out.push((row[j] - mean) * rstd * g[j] + b[j]);
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            r,
            c,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let rg = self.rg(&[a]);
        self.push(r, c, out, Op::Gelu(a), rg)
    }

    /// Replaces entries whose `keep` flag is false with `value`.
    pub fn masked_fill(&mut self, a: Var, keep: &[bool], value: F) -> Result<Var, NumericsError> {
        let (r, c) = self.shape(a);
        if keep.len() != r * c {
            return Err(NumericsError::Shape(format!(
                "masked_fill: mask of {} entries for [{r}, {c}]",
                keep.len()
            )));
        }
        let out = self
            .value(a)
            .iter()
            .zip(keep)
            .map(|(&x, &k)| if k { x } else { value })
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push(
            r,
            c,
            out,
            Op::MaskedFill {
                input: a,
                keep: keep.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`; returns a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumericsError> {
        let (r, c) = self.shape(logits);
        if targets.len() != r || r == 0 {
            return Err(NumericsError::Shape(format!(
                "cross_entropy: {} targets for {r} rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(NumericsError::Index(format!(
                "cross_entropy: target {bad} out of range for {c} classes"
            )));
        }
        let src = self.value(logits);
        let mut probs = vec![F::zero(); r * c];
        let mut total = F::zero();
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            total += lse - row[targets[i]];
        }
        let loss = total / F::from_usize(r).unwrap();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(1, 1, vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().copied().sum::<F>() / F::from_usize(v.len().max(1)).unwrap();
        let rg = self.rg(&[a]);
        self.push(1, 1, vec![s], Op::Mean(a), rg)
    }

    /// First non-finite node value, if any.
    pub fn first_non_finite(&self) -> Option<Var> {
        (0..self.nodes.len())
            .map(Var)
            .find(|&v| self.value(v).iter().any(|x| !x.is_finite()))
    }

    pub fn ensure_finite(&self, v: Var) -> Result<(), NumericsError> {
        if self.value(v).iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(NumericsError::NonFinite(format!(
                "node {} has a non-finite value",
                v.0
            )))
        }
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Reverse pass from a scalar `loss`. Gradients of every node that
    /// requires one become available through [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        if self.backward_done {
            return Err(NumericsError::State(
                "backward already ran on this graph; call reset_grads first".into(),
            ));
        }
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(NumericsError::Shape(format!(
                "backward: loss must be scalar, got [{r}, {c}]"
            )));
        }
        self.ensure_finite(loss)?;
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(NumericsError::NonFinite(format!(
                        "gradient of node {i} is non-finite"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for parameter `idx`, if that parameter took part in the loss.
    pub fn param_grad(&self, idx: usize) -> Option<&[F]> {
        self.param_vars[idx].and_then(|v| self.grad(v))
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&Self, &mut [F])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].rows * self.nodes[v.0].cols;
        let mut buf = self.grads[v.0].take().unwrap_or_else(|| vec![F::zero(); n]);
        f(self, &mut buf);
        self.grads[v.0] = Some(buf);
    }

    fn backprop_node(&mut self, i: usize, g: &[F]) {
        let (rows, cols) = (self.nodes[i].rows, self.nodes[i].cols);
        // The op is moved out for the duration so its saved state can be
        // read while gradient slots are updated.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf | Op::Param | Op::StopGrad => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.shape(a);
                let n = cols;
                self.acc(a, |s, da| {
                    // dA += dC · Bᵀ
                    F::gemm(
                        m,
                        n,
                        k,
                        g,
                        n as isize,
                        1,
                        s.value(b),
                        1,
                        n as isize,
                        F::one(),
                        da,
                        k as isize,
                        1,
                    );
                });
                self.acc(b, |s, db| {
                    // dB += Aᵀ · dC
                    F::gemm(
                        k,
                        m,
                        n,
                        s.value(a),
                        1,
                        k as isize,
                        g,
                        n as isize,
                        1,
                        F::one(),
                        db,
                        n as isize,
                        1,
                    );
                });
            }
            &Op::Transpose(a) => {
                self.acc(a, |_, da| {
                    for r in 0..rows {
                        for c in 0..cols {
                            da[c * rows + r] += g[r * cols + c];
                        }
                    }
                });
            }
            &Op::Reshape(a) | &Op::AddScalar(a) => {
                self.acc(a, |_, da| add_into(da, g));
            }
            &Op::Add(a, b) => {
                self.acc(a, |_, da| add_into(da, g));
                self.acc(b, |_, db| add_into(db, g));
            }
            &Op::Sub(a, b) => {
                self.acc(a, |_, da| add_into(da, g));
                self.acc(b, |_, db| db.iter_mut().zip(g).for_each(|(d, &x)| *d -= x));
            }
            &Op::Mul(a, b) => {
                self.acc(a, |s, da| {
                    for ((d, &x), &y) in da.iter_mut().zip(g).zip(s.value(b)) {
                        *d += x * y;
                    }
                });
                self.acc(b, |s, db| {
                    for ((d, &x), &y) in db.iter_mut().zip(g).zip(s.value(a)) {
                        *d += x * y;
                    }
                });
            }
            &Op::AddRow(a, row) => {
                self.acc(a, |_, da| add_into(da, g));
                self.acc(row, |_, dr| {
                    for chunk in g.chunks_exact(cols) {
                        add_into(dr, chunk);
                    }
                });
            }
            &Op::MulRow(a, row) => {
                self.acc(a, |s, da| {
                    let rv = s.value(row);
                    for (dchunk, gchunk) in da.chunks_exact_mut(cols).zip(g.chunks_exact(cols)) {
                        for j in 0..cols {
                            dchunk[j] += gchunk[j] * rv[j];
                        }
                    }
                });
                self.acc(row, |s, dr| {
                    for (achunk, gchunk) in s.value(a).chunks_exact(cols).zip(g.chunks_exact(cols))
                    {
                        for j in 0..cols {
                            dr[j] += gchunk[j] * achunk[j];
                        }
                    }
                });
            }
            &Op::Scale(a, sc) => {
                self.acc(a, |_, da| {
                    da.iter_mut().zip(g).for_each(|(d, &x)| *d += x * sc)
                });
            }
            Op::Concat { inputs, axis } => {
                let mut offset = 0;
                for &v in inputs {
                    let (r, c) = self.shape(v);
                    if *axis == 0 {
                        let part = &g[offset * cols..(offset + r) * cols];
                        self.acc(v, |_, dv| add_into(dv, part));
                        offset += r;
                    } else {
                        self.acc(v, |_, dv| {
                            for i in 0..r {
                                add_into(
                                    &mut dv[i * c..(i + 1) * c],
                                    &g[i * cols + offset..i * cols + offset + c],
                                );
                            }
                        });
                        offset += c;
                    }
                }
            }
            &Op::Slice { input, axis, start } => {
                let in_cols = self.cols(input);
                self.acc(input, |_, da| {
                    if axis == 0 {
                        add_into(&mut da[start * in_cols..(start + rows) * in_cols], g);
                    } else {
                        for i in 0..rows {
                            add_into(
                                &mut da[i * in_cols + start..i * in_cols + start + cols],
                                &g[i * cols..(i + 1) * cols],
                            );
                        }
                    }
                });
            }
            Op::Gather { table, indices } => {
                self.acc(*table, |_, dt| {
                    for (r, &idx) in indices.iter().enumerate() {
                        add_into(
                            &mut dt[idx * cols..(idx + 1) * cols],
                            &g[r * cols..(r + 1) * cols],
                        );
                    }
                });
            }
            &Op::Softmax { input, axis } => {
                self.acc(input, |s, da| {
                    let y = s.value(Var(i));
                    let (n_groups, len, stride, step) = if axis == 1 {
                        (rows, cols, cols, 1)
                    } else {
                        (cols, rows, 1, cols)
                    };
                    for grp in 0..n_groups {
                        let base = grp * stride;
                        let mut dot = F::zero();
                        for t in 0..len {
                            let idx = base + t * step;
                            dot += g[idx] * y[idx];
                        }
                        for t in 0..len {
                            let idx = base + t * step;
                            da[idx] += y[idx] * (g[idx] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let c = cols;
                let xhat =
                    |s: &Self, r: usize, j: usize| (s.value(x)[r * c + j] - mean[r]) * rstd[r];
                self.acc(gain, |s, dg| {
                    for r in 0..rows {
                        for j in 0..c {
                            dg[j] += g[r * c + j] * xhat(s, r, j);
                        }
                    }
                });
                self.acc(bias, |_, db| {
                    for chunk in g.chunks_exact(c) {
                        add_into(db, chunk);
                    }
                });
                let inv_c = F::one() / F::from_usize(c).unwrap();
                self.acc(x, |s, dx| {
                    let gv = s.value(gain);
                    for r in 0..rows {
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for j in 0..c {
                            let dxh = g[r * c + j] * gv[j];
                            m1 += dxh;
                            m2 += dxh * xhat(s, r, j);
                        }
                        m1 *= inv_c;
                        m2 *= inv_c;
                        for j in 0..c {
                            let dxh = g[r * c + j] * gv[j];
                            dx[r * c + j] += rstd[r] * (dxh - m1 - xhat(s, r, j) * m2);
                        }
                    }
                });
            }
            &Op::Gelu(a) => {
                self.acc(a, |s, da| {
                    for ((d, &x), &gx) in da.iter_mut().zip(s.value(a)).zip(g) {
                        *d += gx * gelu_grad(x);
                    }
                });
            }
            Op::MaskedFill { input, keep } => {
                self.acc(*input, |_, da| {
                    for ((d, &x), &k) in da.iter_mut().zip(g).zip(keep) {
                        if k {
                            *d += x;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g[0] / F::from_usize(targets.len()).unwrap();
                let c = self.cols(*logits);
                self.acc(*logits, |_, dl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let p = probs[r * c + j];
                            let y = if j == t { F::one() } else { F::zero() };
                            dl[r * c + j] += (p - y) * scale;
                        }
                    }
                });
            }
            &Op::Sum(a) => {
                let s0 = g[0];
                self.acc(a, |_, da| da.iter_mut().for_each(|d| *d += s0));
            }
            &Op::Mean(a) => {
                let n = F::from_usize(self.value(a).len().max(1)).unwrap();
                let s0 = g[0] / n;
                self.acc(a, |_, da| da.iter_mut().for_each(|d| *d += s0));
            }
        }
        self.nodes[i].op = op;
    }
}

fn add_into<F: Float>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn softmax_strided<F: Float>(src: &[F], out: &mut [F], len: usize, step: usize) {
    let mut max = F::neg_infinity();
    for t in 0..len {
        max = max.max(src[t * step]);
    }
    let mut total = F::zero();
    for t in 0..len {
        let e = (src[t * step] - max).exp();
        out[t * step] = e;
        total += e;
    }
    let inv = F::one() / total;
    for t in 0..len {
        out[t * step] *= inv;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<F: Float>(x: F) -> F {
    let c = F::from_f64c(GELU_C);
    let a = F::from_f64c(GELU_A);
    let half = F::from_f64c(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<F: Float>(x: F) -> F {
    let c = F::from_f64c(GELU_C);
    let a = F::from_f64c(GELU_A);
    let half = F::from_f64c(0.5);
    let three = F::from_f64c(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * a * x * x)
}
