//! Tape-based reverse-mode differentiation.
//!
//! Every differentiable op appends a node to the tape. `backward` walks the
//! nodes in reverse creation order once, adding each contribution into the
//! input gradients, so accumulation order is fixed by the forward order.

use std::borrow::Cow;
use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use super::real::Real;
use super::tensor::{dims2, gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::error::{contract, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Linear(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Softmax(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    Mse(Var, Var),
    Sum(Var),
    GateExpand {
        gates: Var,
        mask: Vec<bool>,
        shared: usize,
        expert: usize,
    },
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
pub struct Tape<'a, T: Real = f32> {
    nodes: RefCell<Vec<Node<'a, T>>>,
    bound: RefCell<HashMap<usize, Var>>,
    grad_enabled: bool,
}

impl<'a, T: Real> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
            grad_enabled: true,
        }
    }

    /// A tape that never tracks gradients, whatever the tensors' flags say.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Cow<'a, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(nodes.len() - 1)
    }

    fn owned(&self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.0].requires_grad)
        };
        self.push(Cow::Owned(value), op, rg)
    }

    /// Binds a model parameter by reference. Binding the same tensor twice
    /// returns the same handle, so repeated uses accumulate into one gradient.
    pub fn param(&self, tensor: &'a Tensor<T>) -> Var {
        let key = tensor as *const Tensor<T> as usize;
        if let Some(&v) = self.bound.borrow().get(&key) {
            return v;
        }
        let v = self.push(Cow::Borrowed(tensor), Op::Leaf, tensor.requires_grad);
        self.bound.borrow_mut().insert(key, v);
        v
    }

    /// Owned leaf; `requires_grad` is taken from the tensor.
    pub fn leaf(&self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad;
        self.push(Cow::Owned(tensor), Op::Leaf, rg)
    }

    pub fn constant(&self, tensor: Tensor<T>) -> Var {
        self.push(Cow::Owned(tensor), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| n[v.0].value.as_ref())
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let t = self.value(v);
        Tensor::from_vec(t.shape(), t.data().to_vec()).expect("consistent shape")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            let (m, k) = dims2("matmul", &ta)?;
            let (k2, n) = dims2("matmul", &tb)?;
            if k != k2 || ta.shape().len() != 2 || tb.shape().len() != 2 {
                return Err(Error::Shape {
                    op: "matmul",
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                });
            }
            let mut c = vec![T::zero(); m * n];
            gemm_nn(m, k, n, ta.data(), tb.data(), &mut c, false);
            Tensor::from_vec(&[m, n], c)?
        };
        Ok(self.owned(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `x[m×k] · w[n×k]ᵀ`, the layout every projection weight uses.
    pub fn linear(&self, x: Var, w: Var) -> Result<Var> {
        let out = {
            let (tx, tw) = (self.value(x), self.value(w));
            let (m, k) = dims2("linear", &tx)?;
            let (n, k2) = dims2("linear", &tw)?;
            if k != k2 || tw.shape().len() != 2 {
                return Err(Error::Shape {
                    op: "linear",
                    lhs: tx.shape().to_vec(),
                    rhs: tw.shape().to_vec(),
                });
            }
            let mut c = vec![T::zero(); m * n];
            gemm_nt(m, k, n, tx.data(), tw.data(), &mut c, false);
            Tensor::from_vec(&[m, n], c)?
        };
        Ok(self.owned(out, Op::Linear(x, w), &[x, w]))
    }

    fn zip(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("add", a, b, |x, y| x + y)?;
        Ok(self.owned(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("sub", a, b, |x, y| x - y)?;
        Ok(self.owned(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("mul", a, b, |x, y| x * y)?;
        Ok(self.owned(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`n` vector to every row of `a[m×n]`.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let out = {
            let (ta, tr) = (self.value(a), self.value(row));
            let n = ta.cols();
            if tr.numel() != n {
                return Err(Error::Shape {
                    op: "add_row",
                    lhs: ta.shape().to_vec(),
                    rhs: tr.shape().to_vec(),
                });
            }
            let mut data = ta.data().to_vec();
            for chunk in data.chunks_mut(n) {
                for (x, &r) in chunk.iter_mut().zip(tr.data()) {
                    *x += r;
                }
            }
            Tensor::from_vec(ta.shape(), data)?
        };
        Ok(self.owned(out, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        let out = {
            let ta = self.value(a);
            let data = ta.data().iter().map(|&x| x * c).collect();
            Tensor::from_vec(ta.shape(), data).expect("same shape")
        };
        self.owned(out, Op::Scale(a, c), &[a])
    }

    pub fn silu(&self, a: Var) -> Var {
        let out = {
            let ta = self.value(a);
            let data = ta.data().iter().map(|&x| x * sigmoid(x)).collect();
            Tensor::from_vec(ta.shape(), data).expect("same shape")
        };
        self.owned(out, Op::Silu(a), &[a])
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&self, a: Var) -> Var {
        let out = {
            let ta = self.value(a);
            let n = ta.cols();
            let mut data = ta.data().to_vec();
            for row in data.chunks_mut(n) {
                softmax_in_place(row);
            }
            Tensor::from_vec(ta.shape(), data).expect("same shape")
        };
        self.owned(out, Op::Softmax(a), &[a])
    }

    /// `x / rms(x) * gain` per row.
    pub fn rms_norm(&self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (out, inv) = {
            let (tx, tg) = (self.value(x), self.value(gain));
            let n = tx.cols();
            if tg.numel() != n {
                return Err(Error::Shape {
                    op: "rms_norm",
                    lhs: tx.shape().to_vec(),
                    rhs: tg.shape().to_vec(),
                });
            }
            let eps = T::from_f64_lossy(eps);
            let nf = T::from_usize(n).expect("width");
            let mut inv = Vec::with_capacity(tx.rows());
            let mut data = Vec::with_capacity(tx.numel());
            for row in tx.data().chunks(n) {
                let ms = row.iter().map(|&v| v * v).sum::<T>() / nf;
                let r = T::one() / (ms + eps).sqrt();
                inv.push(r);
                data.extend(row.iter().zip(tg.data()).map(|(&v, &g)| v * r * g));
            }
            (Tensor::from_vec(tx.shape(), data)?, inv)
        };
        Ok(self.owned(out, Op::RmsNorm { x, gain, inv }, &[x, gain]))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[tq × heads·dh]`, `k` and `v` are `[tk × heads·dh]`. The output
    /// keeps heads concatenated along columns (before any output projection).
    /// With `causal`, query `i` only sees keys `j <= i`.
    pub fn attention(&self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (out, probs) = {
            let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
            let (nq, width) = dims2("attention", &tq)?;
            let (nk, wk) = dims2("attention", &tk)?;
            if wk != width || tv.shape() != tk.shape() || heads == 0 || width % heads != 0 {
                return Err(Error::Shape {
                    op: "attention",
                    lhs: tq.shape().to_vec(),
                    rhs: tk.shape().to_vec(),
                });
            }
            if causal && nq != nk {
                return Err(contract("causal attention needs equal query and key lengths"));
            }
            let dh = width / heads;
            let scale = T::one() / T::from_usize(dh).expect("dh").sqrt();
            let mut probs = vec![T::zero(); heads * nq * nk];
            let mut out = vec![T::zero(); nq * width];
            let w = width as isize;
            for h in 0..heads {
                let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
                T::gemm(
                    nq,
                    dh,
                    nk,
                    scale,
                    &tq.data()[h * dh..],
                    w,
                    1,
                    &tk.data()[h * dh..],
                    1,
                    w,
                    T::zero(),
                    p,
                    nk as isize,
                    1,
                );
                for i in 0..nq {
                    let row = &mut p[i * nk..(i + 1) * nk];
                    if causal {
                        for x in row.iter_mut().skip(i + 1) {
                            *x = T::neg_infinity();
                        }
                    }
                    softmax_in_place(row);
                }
                T::gemm(
                    nq,
                    nk,
                    dh,
                    T::one(),
                    p,
                    nk as isize,
                    1,
                    &tv.data()[h * dh..],
                    w,
                    1,
                    T::zero(),
                    &mut out[h * dh..],
                    w,
                    1,
                );
            }
            (Tensor::from_vec(&[nq, width], out)?, probs)
        };
        Ok(self.owned(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Row lookup `table[ids[i]]`.
    pub fn embed(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = {
            let tt = self.value(table);
            let (rows, n) = dims2("embed", &tt)?;
            if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
                return Err(crate::error::input(format!(
                    "index {bad} out of range for table with {rows} rows"
                )));
            }
            let mut data = Vec::with_capacity(ids.len() * n);
            for &i in ids {
                data.extend_from_slice(tt.row(i));
            }
            Tensor::from_vec(&[ids.len(), n], data)?
        };
        Ok(self.owned(
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean token cross-entropy over rows whose target is `Some`.
    pub fn cross_entropy(&self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (loss, probs, count) = {
            let tl = self.value(logits);
            let (rows, v) = dims2("cross_entropy", &tl)?;
            if rows != targets.len() {
                return Err(Error::Shape {
                    op: "cross_entropy",
                    lhs: tl.shape().to_vec(),
                    rhs: vec![targets.len()],
                });
            }
            let mut probs = tl.data().to_vec();
            let mut total = T::zero();
            let mut count = 0usize;
            for (row, target) in probs.chunks_mut(v).zip(targets) {
                softmax_in_place(row);
                if let Some(t) = *target {
                    if t >= v {
                        return Err(crate::error::input(format!("target {t} >= vocab {v}")));
                    }
                    total -= row[t].max(T::min_positive_value()).ln();
                    count += 1;
                }
            }
            let loss = if count == 0 {
                T::zero()
            } else {
                total / T::from_usize(count).expect("count")
            };
            (loss, probs, count)
        };
        Ok(self.owned(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse(&self, a: Var, b: Var) -> Result<Var> {
        let loss = {
            let diff = self.zip("mse", a, b, |x, y| x - y)?;
            let n = T::from_usize(diff.numel().max(1)).expect("numel");
            diff.data().iter().map(|&d| d * d).sum::<T>() / n
        };
        Ok(self.owned(Tensor::scalar(loss), Op::Mse(a, b), &[a, b]))
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.owned(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).numel().max(1)).expect("numel");
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// Expands per-expert gates `[t × n_routed]` into per-neuron multipliers
    /// `[t × (shared + n_routed·expert)]`: shared columns are 1, a selected
    /// expert's columns are `1 + gate`, unselected ones are 0.
    pub fn gate_expand(&self, gates: Var, mask: &[bool], shared: usize, expert: usize) -> Result<Var> {
        let out = {
            let tg = self.value(gates);
            let (rows, nr) = dims2("gate_expand", &tg)?;
            if mask.len() != rows * nr {
                return Err(Error::Shape {
                    op: "gate_expand",
                    lhs: tg.shape().to_vec(),
                    rhs: vec![mask.len()],
                });
            }
            let width = shared + nr * expert;
            let mut data = vec![T::zero(); rows * width];
            for t in 0..rows {
                let row = &mut data[t * width..(t + 1) * width];
                row[..shared].fill(T::one());
                for j in 0..nr {
                    if mask[t * nr + j] {
                        let g = T::one() + tg.data()[t * nr + j];
                        row[shared + j * expert..shared + (j + 1) * expert].fill(g);
                    }
                }
            }
            Tensor::from_vec(&[rows, width], data)?
        };
        Ok(self.owned(
            out,
            Op::GateExpand {
                gates,
                mask: mask.to_vec(),
                shared,
                expert,
            },
            &[gates],
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if !nodes[loss.0].value.is_scalar() {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            propagate(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            bound: self.bound.borrow().clone(),
        })
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

fn accumulate<T: Real>(
    nodes: &[Node<'_, T>],
    grads: &mut [Option<Vec<T>>],
    v: Var,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
    f(slot);
}

fn propagate<T: Real>(nodes: &[Node<'_, T>], node: &Node<'_, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |v: Var| -> &Tensor<T> { nodes[v.0].value.as_ref() };
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = dims2("matmul", val(*a)).expect("shape");
            let n = val(*b).cols();
            accumulate(nodes, grads, *a, |da| gemm_nt(m, n, k, g, val(*b).data(), da, true));
            accumulate(nodes, grads, *b, |db| gemm_tn(k, m, n, val(*a).data(), g, db, true));
        }
        Op::Linear(x, w) => {
            let (m, k) = dims2("linear", val(*x)).expect("shape");
            let n = val(*w).rows();
            accumulate(nodes, grads, *x, |dx| gemm_nn(m, n, k, g, val(*w).data(), dx, true));
            accumulate(nodes, grads, *w, |dw| gemm_tn(n, m, k, g, val(*x).data(), dw, true));
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |d| add_into(d, g));
            accumulate(nodes, grads, *b, |d| add_into(d, g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |d| add_into(d, g));
            accumulate(nodes, grads, *b, |d| {
                for (x, &y) in d.iter_mut().zip(g) {
                    *x -= y;
                }
            });
        }
        Op::Mul(a, b) => {
            accumulate(nodes, grads, *a, |d| {
                for ((x, &y), &o) in d.iter_mut().zip(g).zip(val(*b).data()) {
                    *x += y * o;
                }
            });
            accumulate(nodes, grads, *b, |d| {
                for ((x, &y), &o) in d.iter_mut().zip(g).zip(val(*a).data()) {
                    *x += y * o;
                }
            });
        }
        Op::AddRow(a, row) => {
            accumulate(nodes, grads, *a, |d| add_into(d, g));
            let n = val(*row).numel();
            accumulate(nodes, grads, *row, |d| {
                for chunk in g.chunks(n) {
                    add_into(d, chunk);
                }
            });
        }
        Op::Scale(a, c) => {
            accumulate(nodes, grads, *a, |d| {
                for (x, &y) in d.iter_mut().zip(g) {
                    *x += y * *c;
                }
            });
        }
        Op::Silu(a) => {
            accumulate(nodes, grads, *a, |d| {
                for ((x, &y), &z) in d.iter_mut().zip(g).zip(val(*a).data()) {
                    let s = sigmoid(z);
                    *x += y * s * (T::one() + z * (T::one() - s));
                }
            });
        }
        Op::Softmax(a) => {
            let y = node.value.data();
            let n = node.value.cols();
            accumulate(nodes, grads, *a, |d| {
                for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                    for ((x, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *x += yi * (gi - dot);
                    }
                }
            });
        }
        Op::RmsNorm { x, gain, inv } => {
            let tx = val(*x);
            let tg = val(*gain);
            let n = tx.cols();
            let nf = T::from_usize(n).expect("width");
            accumulate(nodes, grads, *x, |dx| {
                for (r, ((dxr, gr), xr)) in dx
                    .chunks_mut(n)
                    .zip(g.chunks(n))
                    .zip(tx.data().chunks(n))
                    .enumerate()
                {
                    let ir = inv[r];
                    let dot = gr
                        .iter()
                        .zip(xr)
                        .zip(tg.data())
                        .map(|((&gy, &xv), &gv)| gy * gv * xv)
                        .sum::<T>()
                        / nf;
                    for j in 0..n {
                        dxr[j] += ir * (gr[j] * tg.data()[j] - xr[j] * ir * ir * dot);
                    }
                }
            });
            accumulate(nodes, grads, *gain, |dg| {
                for (r, (gr, xr)) in g.chunks(n).zip(tx.data().chunks(n)).enumerate() {
                    for j in 0..n {
                        dg[j] += gr[j] * xr[j] * inv[r];
                    }
                }
            });
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            probs,
        } => attention_backward(nodes, grads, g, *q, *k, *v, *heads, probs),
        Op::Embed { table, ids } => {
            let n = val(*table).cols();
            accumulate(nodes, grads, *table, |d| {
                for (r, &i) in ids.iter().enumerate() {
                    add_into(&mut d[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                }
            });
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
            count,
        } => {
            if *count == 0 {
                return;
            }
            let v = val(*logits).cols();
            let scale = g[0] / T::from_usize(*count).expect("count");
            accumulate(nodes, grads, *logits, |d| {
                for (r, target) in targets.iter().enumerate() {
                    let Some(t) = *target else { continue };
                    let pr = &probs[r * v..(r + 1) * v];
                    let dr = &mut d[r * v..(r + 1) * v];
                    for (j, (x, &p)) in dr.iter_mut().zip(pr).enumerate() {
                        let y = if j == t { T::one() } else { T::zero() };
                        *x += scale * (p - y);
                    }
                }
            });
        }
        Op::Mse(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let n = T::from_usize(ta.numel().max(1)).expect("numel");
            let two = T::one() + T::one();
            let c = g[0] * two / n;
            accumulate(nodes, grads, *a, |d| {
                for ((x, &p), &q) in d.iter_mut().zip(ta.data()).zip(tb.data()) {
                    *x += c * (p - q);
                }
            });
            accumulate(nodes, grads, *b, |d| {
                for ((x, &p), &q) in d.iter_mut().zip(ta.data()).zip(tb.data()) {
                    *x -= c * (p - q);
                }
            });
        }
        Op::Sum(a) => {
            accumulate(nodes, grads, *a, |d| {
                for x in d.iter_mut() {
                    *x += g[0];
                }
            });
        }
        Op::GateExpand {
            gates,
            mask,
            shared,
            expert,
        } => {
            let nr = val(*gates).cols();
            let width = shared + nr * expert;
            accumulate(nodes, grads, *gates, |d| {
                for (t, gr) in g.chunks(width).enumerate() {
                    for j in 0..nr {
                        if mask[t * nr + j] {
                            let lo = shared + j * expert;
                            d[t * nr + j] += gr[lo..lo + expert].iter().copied().sum::<T>();
                        }
                    }
                }
            });
        }
    }
}

fn add_into<T: Real>(d: &mut [T], g: &[T]) {
    for (x, &y) in d.iter_mut().zip(g) {
        *x += y;
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Real>(
    nodes: &[Node<'_, T>],
    grads: &mut [Option<Vec<T>>],
    g: &[T],
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    probs: &[T],
) {
    let tq = nodes[q.0].value.as_ref();
    let tk = nodes[k.0].value.as_ref();
    let tv = nodes[v.0].value.as_ref();
    let (nq, width) = (tq.rows(), tq.cols());
    let nk = tk.rows();
    let dh = width / heads;
    let w = width as isize;
    let scale = T::one() / T::from_usize(dh).expect("dh").sqrt();

    // dS per head, already scaled; reused by the q and k gradients.
    let mut dscores = vec![T::zero(); heads * nq * nk];
    for h in 0..heads {
        let p = &probs[h * nq * nk..(h + 1) * nq * nk];
        let ds = &mut dscores[h * nq * nk..(h + 1) * nq * nk];
        // dP = dO_h · V_hᵀ
        T::gemm(
            nq,
            dh,
            nk,
            T::one(),
            &g[h * dh..],
            w,
            1,
            &tv.data()[h * dh..],
            1,
            w,
            T::zero(),
            ds,
            nk as isize,
            1,
        );
        for i in 0..nq {
            let pr = &p[i * nk..(i + 1) * nk];
            let dr = &mut ds[i * nk..(i + 1) * nk];
            let dot = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum::<T>();
            for (x, &pi) in dr.iter_mut().zip(pr) {
                *x = pi * (*x - dot) * scale;
            }
        }
    }
    accumulate(nodes, grads, q, |dq| {
        for h in 0..heads {
            T::gemm(
                nq,
                nk,
                dh,
                T::one(),
                &dscores[h * nq * nk..],
                nk as isize,
                1,
                &tk.data()[h * dh..],
                w,
                1,
                T::one(),
                &mut dq[h * dh..],
                w,
                1,
            );
        }
    });
    accumulate(nodes, grads, k, |dk| {
        for h in 0..heads {
            T::gemm(
                nk,
                nq,
                dh,
                T::one(),
                &dscores[h * nq * nk..],
                1,
                nk as isize,
                &tq.data()[h * dh..],
                w,
                1,
                T::one(),
                &mut dk[h * dh..],
                w,
                1,
            );
        }
    });
    accumulate(nodes, grads, v, |dv| {
        for h in 0..heads {
            T::gemm(
                nk,
                nq,
                dh,
                T::one(),
                &probs[h * nq * nk..],
                1,
                nk as isize,
                &g[h * dh..],
                w,
                1,
                T::one(),
                &mut dv[h * dh..],
                w,
                1,
            );
        }
    });
}

/// Result of a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    bound: HashMap<usize, Var>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a tensor bound with [`Tape::param`].
    pub fn wrt_tensor(&self, tensor: &Tensor<T>) -> Option<&[T]> {
        let key = tensor as *const Tensor<T> as usize;
        self.bound.get(&key).and_then(|&v| self.wrt(v))
    }

    /// Adds this pass's gradient into the tensor's own buffer.
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor<T>) {
        if let Some(g) = self.wrt(v) {
            let slot = tensor.grad.get_or_insert_with(|| vec![T::zero(); g.len()]);
            add_into(slot, g);
        }
    }
}
