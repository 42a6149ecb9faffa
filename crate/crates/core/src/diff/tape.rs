//! Tensor-level reverse-mode tape.
//!
//! Every op evaluates eagerly and appends a node holding its value and
//! whatever it needs for the backward pass. Nodes only reference earlier
//! nodes, so walking the node list backwards is a valid topological order.
//! The tape owns plain data and is `Send`; a forward/backward pair must still
//! stay on one thread at a time.

use std::collections::{BTreeMap, HashMap};

use super::kernels::{axpy, dot, mm_acc, mm_nt_acc, mm_tn_acc};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a tensor in a parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Added under the square root by [`Tape::standardize`].
pub const STANDARDIZE_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddBias(Var, Var),
    MulBias(Var, Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Bilinear {
        left: Var,
        weight: Var,
        right: Var,
        /// `left · weight`, shape `[n, r, l]`
        partial: Vec<T>,
    },
    PairAdd(Var, Var),
    PairMul(Var, Var),
    Reshape(Var),
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    Narrow {
        x: Var,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Sqrt(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Standardize {
        x: Var,
        inv_std: Vec<T>,
    },
    Cosine {
        a: Var,
        b: Var,
        inv_na: Vec<T>,
        inv_nb: Vec<T>,
    },
    Take {
        x: Var,
        index: Vec<usize>,
    },
    Mask {
        x: Var,
        mask: Vec<T>,
    },
    EmbedBag {
        table: ParamId,
        bags: Vec<Vec<usize>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            consumed: false,
        }
    }

    /// Drops all recorded nodes so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.consumed = false;
    }

    /// Sign pattern of every ReLU input on the tape (`true` for positive).
    /// Two evaluations with equal patterns lie on the same linear piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                out.extend(self.nodes[x.0].value.data().iter().map(|v| *v > T::zero()));
            }
        }
        out
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

    pub fn scalar(&self, v: Var) -> Result<T> {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Leaf => false,
            Op::Param | Op::EmbedBag { .. } => true,
            _ => parents.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn var(&mut self, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf, &[]);
        self.nodes[v.0].needs_grad = true;
        v
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// Registers a parameter. Repeated calls with the same id return the
    /// same node, so gradients from every use accumulate in one place.
    pub fn param(&mut self, id: ParamId, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param, &[]);
        self.params.insert(id, v);
        v
    }

    fn binary_same(&mut self, a: Var, b: Var, name: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(name, self.shape(a), self.shape(b));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).unwrap()
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let x = self.value(a);
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|&p| f(p)).collect()).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "add")?;
        let v = self.zip_map(a, b, |p, q| p + q);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "sub")?;
        let v = self.zip_map(a, b, |p, q| p - q);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "mul")?;
        let v = self.zip_map(a, b, |p, q| p * q);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let v = self.map(a, |p| p * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let v = self.map(a, |p| p + c);
        self.push(v, Op::AddScalar(a), &[a])
    }

    /// `x[.., d] + bias[d]`
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] {
            return shape_err("add_bias", self.shape(x), self.shape(bias));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(d) {
            for (o, &bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    /// `x[.., d] * gain[d]`
    pub fn mul_bias(&mut self, x: Var, gain: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] {
            return shape_err("mul_bias", self.shape(x), self.shape(gain));
        }
        let g = self.value(gain).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(d) {
            for (o, &gv) in row.iter_mut().zip(&g) {
                *o *= gv;
            }
        }
        Ok(self.push(out, Op::MulBias(x, gain), &[x, gain]))
    }

    /// `[m,k] · [k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", sa, sb);
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![T::zero(); m * n];
        mm_acc(self.value(a).data(), self.value(b).data(), &mut c, m, k, n);
        let out = Tensor::new(vec![m, n], c)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `[m,k] · [n,k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return shape_err("matmul_nt", sa, sb);
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut c = vec![T::zero(); m * n];
        mm_nt_acc(self.value(a).data(), self.value(b).data(), &mut c, m, k, n);
        let out = Tensor::new(vec![m, n], c)?;
        Ok(self.push(out, Op::MatMulNt(a, b), &[a, b]))
    }

    /// `out[i,j,r] = Σ_kl left[i,k] · weight[k,r,l] · right[j,l]`, the
    /// bilinear form for every ordered pair of rows.
    pub fn bilinear(&mut self, left: Var, weight: Var, right: Var) -> Result<Var> {
        let (sl, sw, sr) = (self.shape(left), self.shape(weight), self.shape(right));
        if sl.len() != 2 || sw.len() != 3 || sr.len() != 2 || sl[1] != sw[0] || sw[2] != sr[1] {
            return shape_err("bilinear", sl, sw);
        }
        let (n, k, r, l, m) = (sl[0], sl[1], sw[1], sw[2], sr[0]);
        let mut partial = vec![T::zero(); n * r * l];
        mm_acc(
            self.value(left).data(),
            self.value(weight).data(),
            &mut partial,
            n,
            k,
            r * l,
        );
        let rd = self.value(right).data();
        let mut out = vec![T::zero(); n * m * r];
        for i in 0..n {
            for j in 0..m {
                let rj = &rd[j * l..(j + 1) * l];
                let o = &mut out[(i * m + j) * r..(i * m + j + 1) * r];
                for (q, ov) in o.iter_mut().enumerate() {
                    *ov = dot(&partial[(i * r + q) * l..(i * r + q + 1) * l], rj);
                }
            }
        }
        let out = Tensor::new(vec![n, m, r], out)?;
        Ok(self.push(
            out,
            Op::Bilinear {
                left,
                weight,
                right,
                partial,
            },
            &[left, weight, right],
        ))
    }

    fn pair_shapes(&self, p: Var, q: Var, name: &'static str) -> Result<(usize, usize, usize)> {
        let (sp, sq) = (self.shape(p), self.shape(q));
        if sp.len() != 2 || sq.len() != 2 || sp[1] != sq[1] {
            return shape_err(name, sp, sq);
        }
        Ok((sp[0], sq[0], sp[1]))
    }

    /// `out[i,j,:] = p[i,:] + q[j,:]`
    pub fn pair_add(&mut self, p: Var, q: Var) -> Result<Var> {
        let (n, m, d) = self.pair_shapes(p, q, "pair_add")?;
        let (pd, qd) = (self.value(p).data(), self.value(q).data());
        let mut out = Vec::with_capacity(n * m * d);
        for i in 0..n {
            for j in 0..m {
                out.extend(pd[i * d..(i + 1) * d].iter().zip(&qd[j * d..(j + 1) * d]).map(|(&a, &b)| a + b));
            }
        }
        let out = Tensor::new(vec![n, m, d], out)?;
        Ok(self.push(out, Op::PairAdd(p, q), &[p, q]))
    }

    /// `out[i,j,:] = p[i,:] ⊙ q[j,:]`
    pub fn pair_mul(&mut self, p: Var, q: Var) -> Result<Var> {
        let (n, m, d) = self.pair_shapes(p, q, "pair_mul")?;
        let (pd, qd) = (self.value(p).data(), self.value(q).data());
        let mut out = Vec::with_capacity(n * m * d);
        for i in 0..n {
            for j in 0..m {
                out.extend(pd[i * d..(i + 1) * d].iter().zip(&qd[j * d..(j + 1) * d]).map(|(&a, &b)| a * b));
            }
        }
        let out = Tensor::new(vec![n, m, d], out)?;
        Ok(self.push(out, Op::PairMul(p, q), &[p, q]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let lead: Vec<usize> = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let rows = self.value(*first).rows();
        let mut width = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != lead.len() + 1 || s[..s.len() - 1] != lead[..] {
                return shape_err("concat", self.shape(*first), s);
            }
            width += self.value(x).last_dim();
        }
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &x in xs {
                out.extend_from_slice(self.value(x).row(r));
            }
        }
        let mut shape = lead;
        shape.push(width);
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Concat(xs.to_vec()), xs))
    }

    /// Stacks rows of tensors sharing a last axis into `[Σ rows, d]`.
    pub fn stack_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Contract("stack of nothing".into()))?;
        let d = self.value(*first).last_dim();
        let mut out = Vec::new();
        for &x in xs {
            if self.value(x).last_dim() != d {
                return shape_err("stack_rows", self.shape(*first), self.shape(x));
            }
            out.extend_from_slice(self.value(x).data());
        }
        let rows = out.len() / d;
        let out = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(out, Op::StackRows(xs.to_vec()), xs))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let d = self.value(x).last_dim();
        if start + len > d || len == 0 {
            return shape_err("narrow", self.shape(x), &[start, len]);
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(xv.rows() * len);
        for r in 0..xv.rows() {
            out.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Narrow { x, start }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_f64();
        self.push(Tensor::scalar(T::from_f64(s)), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let s = self.value(x).sum_f64() / n as f64;
        Ok(self.push(Tensor::scalar(T::from_f64(s)), Op::Mean(x), &[x]))
    }

    /// `[n, d] -> [d]`
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || xv.shape()[0] == 0 {
            return shape_err("mean_rows", xv.shape(), &[]);
        }
        let (n, d) = (xv.shape()[0], xv.shape()[1]);
        let mut acc = vec![0.0f64; d];
        for r in 0..n {
            for (a, v) in acc.iter_mut().zip(xv.row(r)) {
                *a += v.to_f64();
            }
        }
        let out = Tensor::vector(acc.into_iter().map(|a| T::from_f64(a / n as f64)).collect());
        Ok(self.push(out, Op::MeanRows(x), &[x]))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let v = self.map(x, |p| p.sqrt());
        self.push(v, Op::Sqrt(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.map(x, |p| p.exp());
        self.push(v, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let v = self.map(x, |p| p.ln());
        self.push(v, Op::Log(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.map(x, |p| if p > T::zero() { p } else { T::zero() });
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.map(x, |p| p.tanh());
        self.push(v, Op::Tanh(x), &[x])
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let d = out.last_dim();
        for row in out.data_mut().chunks_exact_mut(d) {
            softmax_in_place(row);
        }
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Log-softmax over the last axis, max-subtracted.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let d = out.last_dim();
        for row in out.data_mut().chunks_exact_mut(d) {
            let m = row.iter().copied().fold(row[0], T::max);
            let lse: f64 = row.iter().map(|&v| (v - m).to_f64().exp()).sum::<f64>().ln() + m.to_f64();
            let lse = T::from_f64(lse);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(out, Op::LogSoftmax(x), &[x])
    }

    /// `(x − mean) / sqrt(var + ε)` over the last axis.
    pub fn standardize(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let d = out.last_dim();
        let mut inv_std = Vec::with_capacity(out.rows());
        for row in out.data_mut().chunks_exact_mut(d) {
            let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + STANDARDIZE_EPS).sqrt();
            for v in row.iter_mut() {
                *v = T::from_f64((v.to_f64() - mean) * inv);
            }
            inv_std.push(T::from_f64(inv));
        }
        self.push(out, Op::Standardize { x, inv_std }, &[x])
    }

    /// Pairwise cosine similarity: `[n,d] × [m,d] -> [n,m]`. Fails on a
    /// zero-norm row.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return shape_err("cosine", sa, sb);
        }
        let (n, m) = (sa[0], sb[0]);
        let inv_norms = |t: &Tensor<T>| -> Result<Vec<T>> {
            (0..t.rows())
                .map(|r| {
                    let nrm = t.row(r).iter().map(|v| v.to_f64().powi(2)).sum::<f64>().sqrt();
                    if nrm == 0.0 || !nrm.is_finite() {
                        Err(Error::numeric("cosine", format!("row {r} has norm {nrm}")))
                    } else {
                        Ok(T::from_f64(1.0 / nrm))
                    }
                })
                .collect()
        };
        let inv_na = inv_norms(self.value(a))?;
        let inv_nb = inv_norms(self.value(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                out.push(dot(av.row(i), bv.row(j)) * inv_na[i] * inv_nb[j]);
            }
        }
        let out = Tensor::new(vec![n, m], out)?;
        Ok(self.push(out, Op::Cosine { a, b, inv_na, inv_nb }, &[a, b]))
    }

    /// Gathers flat elements of `x` into a new tensor of `shape`.
    pub fn take(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if index.len() != shape.iter().product::<usize>() {
            return shape_err("take", &[index.len()], shape);
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.numel()) {
            return shape_err("take", xv.shape(), &[bad]);
        }
        let data = index.iter().map(|&i| xv.data()[i]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(out, Op::Take { x, index }, &[x]))
    }

    /// Selects whole rows (over the last axis) of `x`.
    pub fn take_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let d = self.value(x).last_dim();
        let index = rows.iter().flat_map(|&r| (r * d)..(r * d + d)).collect();
        self.take(x, index, &[rows.len(), d])
    }

    /// Multiplies by a fixed mask (already scaled for inverted dropout).
    pub fn apply_mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return shape_err("apply_mask", self.shape(x), &[mask.len()]);
        }
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&a, &b)| a * b).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mask { x, mask }, &[x]))
    }

    /// Row `i` of the output is the mean of `table` rows listed in `bags[i]`.
    /// The table is read in place; its gradient comes back as sparse rows.
    pub fn embed_bag(&mut self, table_id: ParamId, table: &Tensor<T>, bags: Vec<Vec<usize>>) -> Result<Var> {
        if table.shape().len() != 2 {
            return shape_err("embed_bag", table.shape(), &[]);
        }
        let (v, d) = (table.shape()[0], table.shape()[1]);
        let mut out = vec![T::zero(); bags.len() * d];
        for (i, bag) in bags.iter().enumerate() {
            if bag.is_empty() {
                return Err(Error::Contract(format!("empty bag at row {i}")));
            }
            let w = T::from_f64(1.0 / bag.len() as f64);
            for &r in bag {
                if r >= v {
                    return shape_err("embed_bag", table.shape(), &[r]);
                }
                axpy(w, table.row(r), &mut out[i * d..(i + 1) * d]);
            }
        }
        let out = Tensor::new(vec![bags.len(), d], out)?;
        Ok(self.push(out, Op::EmbedBag { table: table_id, bags }, &[]))
    }

    /// Backpropagates from a scalar root.
    pub fn backward(&mut self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        self.backward_seeded(&[(root, Tensor::full(self.shape(root), T::one()))])
    }

    /// Backpropagates from several nodes at once, each with an upstream
    /// gradient of its own shape.
    pub fn backward_seeded(&mut self, seeds: &[(Var, Tensor<T>)]) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Contract("tape already differentiated; reset it first".into()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            if g.shape() != self.shape(*v) {
                return shape_err("backward seed", self.shape(*v), g.shape());
            }
            accumulate(&mut grads[v.0], g.clone());
        }
        let mut sparse: BTreeMap<ParamId, SparseRows<T>> = BTreeMap::new();
        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads, &mut sparse);
            grads[idx] = Some(g);
        }
        let mut params = BTreeMap::new();
        for (&id, &v) in &self.params {
            if let Some(g) = &grads[v.0] {
                params.insert(id, GradBuf::Dense(g.clone()));
            }
        }
        for (id, rows) in sparse {
            params.insert(id, GradBuf::Rows(rows));
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn propagate(
        &self,
        idx: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        sparse: &mut BTreeMap<ParamId, SparseRows<T>>,
    ) {
        let node = &self.nodes[idx];
        let need = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        let gd = g.data();
        let like = |v: Var, data: Vec<T>| Tensor::new(val(v).shape().to_vec(), data).unwrap();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                if need(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if need(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if need(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if need(*b) {
                    accumulate(&mut grads[b.0], like(*b, gd.iter().map(|&x| -x).collect()));
                }
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    let d = gd.iter().zip(val(*b).data()).map(|(&x, &y)| x * y).collect();
                    accumulate(&mut grads[a.0], like(*a, d));
                }
                if need(*b) {
                    let d = gd.iter().zip(val(*a).data()).map(|(&x, &y)| x * y).collect();
                    accumulate(&mut grads[b.0], like(*b, d));
                }
            }
            Op::Scale(a, c) => {
                accumulate(&mut grads[a.0], like(*a, gd.iter().map(|&x| x * *c).collect()));
            }
            Op::AddScalar(a) => accumulate(&mut grads[a.0], g.clone()),
            Op::AddBias(x, b) => {
                if need(*x) {
                    accumulate(&mut grads[x.0], g.clone());
                }
                if need(*b) {
                    let d = val(*b).numel();
                    let mut acc = vec![0.0f64; d];
                    for row in gd.chunks_exact(d) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a += v.to_f64();
                        }
                    }
                    accumulate(&mut grads[b.0], like(*b, acc.into_iter().map(T::from_f64).collect()));
                }
            }
            Op::MulBias(x, gain) => {
                let d = val(*gain).numel();
                let gv = val(*gain).data();
                if need(*x) {
                    let mut dx = gd.to_vec();
                    for row in dx.chunks_exact_mut(d) {
                        for (a, &s) in row.iter_mut().zip(gv) {
                            *a *= s;
                        }
                    }
                    accumulate(&mut grads[x.0], like(*x, dx));
                }
                if need(*gain) {
                    let mut acc = vec![0.0f64; d];
                    for (grow, xrow) in gd.chunks_exact(d).zip(val(*x).data().chunks_exact(d)) {
                        for k in 0..d {
                            acc[k] += (grow[k] * xrow[k]).to_f64();
                        }
                    }
                    accumulate(&mut grads[gain.0], like(*gain, acc.into_iter().map(T::from_f64).collect()));
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if need(*a) {
                    let mut da = vec![T::zero(); m * k];
                    mm_nt_acc(gd, val(*b).data(), &mut da, m, n, k);
                    accumulate(&mut grads[a.0], like(*a, da));
                }
                if need(*b) {
                    let mut db = vec![T::zero(); k * n];
                    mm_tn_acc(val(*a).data(), gd, &mut db, m, k, n);
                    accumulate(&mut grads[b.0], like(*b, db));
                }
            }
            Op::MatMulNt(a, b) => {
                // C = A Bᵀ; dA = G B, dB = Gᵀ A
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[0];
                if need(*a) {
                    let mut da = vec![T::zero(); m * k];
                    mm_acc(gd, val(*b).data(), &mut da, m, n, k);
                    accumulate(&mut grads[a.0], like(*a, da));
                }
                if need(*b) {
                    let mut db = vec![T::zero(); n * k];
                    mm_tn_acc(gd, val(*a).data(), &mut db, m, n, k);
                    accumulate(&mut grads[b.0], like(*b, db));
                }
            }
            Op::Bilinear {
                left,
                weight,
                right,
                partial,
            } => {
                let (n, k) = (val(*left).shape()[0], val(*left).shape()[1]);
                let (r, l) = (val(*weight).shape()[1], val(*weight).shape()[2]);
                let m = val(*right).shape()[0];
                let rd = val(*right).data();
                // d partial[i,q,:] = Σ_j G[i,j,q] right[j,:]
                let mut dpart = vec![T::zero(); n * r * l];
                let mut dright = vec![T::zero(); m * l];
                for i in 0..n {
                    for j in 0..m {
                        let gij = &gd[(i * m + j) * r..(i * m + j + 1) * r];
                        let rj = &rd[j * l..(j + 1) * l];
                        for (q, &gv) in gij.iter().enumerate() {
                            if gv == T::zero() {
                                continue;
                            }
                            axpy(gv, rj, &mut dpart[(i * r + q) * l..(i * r + q + 1) * l]);
                            if need(*right) {
                                axpy(gv, &partial[(i * r + q) * l..(i * r + q + 1) * l], &mut dright[j * l..(j + 1) * l]);
                            }
                        }
                    }
                }
                if need(*right) {
                    accumulate(&mut grads[right.0], like(*right, dright));
                }
                if need(*left) {
                    let mut dleft = vec![T::zero(); n * k];
                    mm_nt_acc(&dpart, val(*weight).data(), &mut dleft, n, r * l, k);
                    accumulate(&mut grads[left.0], like(*left, dleft));
                }
                if need(*weight) {
                    let mut dw = vec![T::zero(); k * r * l];
                    mm_tn_acc(val(*left).data(), &dpart, &mut dw, n, k, r * l);
                    accumulate(&mut grads[weight.0], like(*weight, dw));
                }
            }
            Op::PairAdd(p, q) | Op::PairMul(p, q) => {
                let is_mul = matches!(node.op, Op::PairMul(..));
                let (n, d) = (val(*p).shape()[0], val(*p).shape()[1]);
                let m = val(*q).shape()[0];
                let (pd, qd) = (val(*p).data(), val(*q).data());
                let mut dp = vec![T::zero(); n * d];
                let mut dq = vec![T::zero(); m * d];
                for i in 0..n {
                    for j in 0..m {
                        let gij = &gd[(i * m + j) * d..(i * m + j + 1) * d];
                        for c in 0..d {
                            if is_mul {
                                dp[i * d + c] += gij[c] * qd[j * d + c];
                                dq[j * d + c] += gij[c] * pd[i * d + c];
                            } else {
                                dp[i * d + c] += gij[c];
                                dq[j * d + c] += gij[c];
                            }
                        }
                    }
                }
                if need(*p) {
                    accumulate(&mut grads[p.0], like(*p, dp));
                }
                if need(*q) {
                    accumulate(&mut grads[q.0], like(*q, dq));
                }
            }
            Op::Reshape(x) => accumulate(&mut grads[x.0], like(*x, gd.to_vec())),
            Op::Concat(xs) => {
                let rows = g.rows();
                let width = g.last_dim();
                let mut offset = 0;
                for &x in xs {
                    let w = val(x).last_dim();
                    if need(x) {
                        let mut dx = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dx.extend_from_slice(&gd[r * width + offset..r * width + offset + w]);
                        }
                        accumulate(&mut grads[x.0], like(x, dx));
                    }
                    offset += w;
                }
            }
            Op::StackRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let len = val(x).numel();
                    if need(x) {
                        accumulate(&mut grads[x.0], like(x, gd[offset..offset + len].to_vec()));
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, start } => {
                let d = val(*x).last_dim();
                let w = g.last_dim();
                let mut dx = vec![T::zero(); val(*x).numel()];
                for r in 0..g.rows() {
                    dx[r * d + start..r * d + start + w].copy_from_slice(&gd[r * w..(r + 1) * w]);
                }
                accumulate(&mut grads[x.0], like(*x, dx));
            }
            Op::Sum(x) => accumulate(&mut grads[x.0], Tensor::full(val(*x).shape(), gd[0])),
            Op::Mean(x) => {
                let n = val(*x).numel() as f64;
                accumulate(&mut grads[x.0], Tensor::full(val(*x).shape(), T::from_f64(gd[0].to_f64() / n)));
            }
            Op::MeanRows(x) => {
                let (n, d) = (val(*x).shape()[0], val(*x).shape()[1]);
                let w = T::from_f64(1.0 / n as f64);
                let row: Vec<T> = gd.iter().map(|&v| v * w).collect();
                let mut dx = Vec::with_capacity(n * d);
                for _ in 0..n {
                    dx.extend_from_slice(&row);
                }
                accumulate(&mut grads[x.0], like(*x, dx));
            }
            Op::Sqrt(x) => {
                let two = T::from_f64(2.0);
                let d = gd.iter().zip(node.value.data()).map(|(&gv, &y)| gv / (two * y)).collect();
                accumulate(&mut grads[x.0], like(*x, d));
            }
            Op::Exp(x) => {
                let d = gd.iter().zip(node.value.data()).map(|(&gv, &y)| gv * y).collect();
                accumulate(&mut grads[x.0], like(*x, d));
            }
            Op::Log(x) => {
                let d = gd.iter().zip(val(*x).data()).map(|(&gv, &v)| gv / v).collect();
                accumulate(&mut grads[x.0], like(*x, d));
            }
            Op::Relu(x) => {
                let d = gd
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                accumulate(&mut grads[x.0], like(*x, d));
            }
            Op::Tanh(x) => {
                let d = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &y)| gv * (T::one() - y * y))
                    .collect();
                accumulate(&mut grads[x.0], like(*x, d));
            }
            Op::Softmax(x) => {
                let d = g.last_dim();
                let mut dx = Vec::with_capacity(gd.len());
                for (grow, yrow) in gd.chunks_exact(d).zip(node.value.data().chunks_exact(d)) {
                    let s = dot(grow, yrow);
                    dx.extend(grow.iter().zip(yrow).map(|(&gv, &y)| y * (gv - s)));
                }
                accumulate(&mut grads[x.0], like(*x, dx));
            }
            Op::LogSoftmax(x) => {
                let d = g.last_dim();
                let mut dx = Vec::with_capacity(gd.len());
                for (grow, yrow) in gd.chunks_exact(d).zip(node.value.data().chunks_exact(d)) {
                    let s: T = grow.iter().copied().sum();
                    dx.extend(grow.iter().zip(yrow).map(|(&gv, &y)| gv - y.exp() * s));
                }
                accumulate(&mut grads[x.0], like(*x, dx));
            }
            Op::Standardize { x, inv_std } => {
                let d = g.last_dim();
                let dn = d as f64;
                let mut dx = Vec::with_capacity(gd.len());
                for ((grow, yrow), &inv) in gd.chunks_exact(d).zip(node.value.data().chunks_exact(d)).zip(inv_std) {
                    let mg = grow.iter().map(|v| v.to_f64()).sum::<f64>() / dn;
                    let mgy = grow.iter().zip(yrow).map(|(a, b)| a.to_f64() * b.to_f64()).sum::<f64>() / dn;
                    let inv = inv.to_f64();
                    dx.extend(
                        grow.iter()
                            .zip(yrow)
                            .map(|(&gv, &y)| T::from_f64(inv * (gv.to_f64() - mg - y.to_f64() * mgy))),
                    );
                }
                accumulate(&mut grads[x.0], like(*x, dx));
            }
            Op::Cosine { a, b, inv_na, inv_nb } => {
                let (av, bv) = (val(*a), val(*b));
                let (n, m, d) = (av.rows(), bv.rows(), av.last_dim());
                let c = node.value.data();
                let mut da = vec![T::zero(); n * d];
                let mut db = vec![T::zero(); m * d];
                for i in 0..n {
                    for j in 0..m {
                        let gv = gd[i * m + j];
                        if gv == T::zero() {
                            continue;
                        }
                        let cij = c[i * m + j];
                        let s = inv_na[i] * inv_nb[j];
                        if need(*a) {
                            let row = &mut da[i * d..(i + 1) * d];
                            axpy(gv * s, bv.row(j), row);
                            axpy(-gv * cij * inv_na[i] * inv_na[i], av.row(i), row);
                        }
                        if need(*b) {
                            let row = &mut db[j * d..(j + 1) * d];
                            axpy(gv * s, av.row(i), row);
                            axpy(-gv * cij * inv_nb[j] * inv_nb[j], bv.row(j), row);
                        }
                    }
                }
                if need(*a) {
                    accumulate(&mut grads[a.0], like(*a, da));
                }
                if need(*b) {
                    accumulate(&mut grads[b.0], like(*b, db));
                }
            }
            Op::Take { x, index } => {
                let mut dx = vec![T::zero(); val(*x).numel()];
                for (&i, &gv) in index.iter().zip(gd) {
                    dx[i] += gv;
                }
                accumulate(&mut grads[x.0], like(*x, dx));
            }
            Op::Mask { x, mask } => {
                let d = gd.iter().zip(mask).map(|(&gv, &mv)| gv * mv).collect();
                accumulate(&mut grads[x.0], like(*x, d));
            }
            Op::EmbedBag { table, bags } => {
                let d = g.last_dim();
                let rows = sparse.entry(*table).or_insert_with(|| SparseRows::new(d));
                for (i, bag) in bags.iter().enumerate() {
                    let w = T::from_f64(1.0 / bag.len() as f64);
                    for &r in bag {
                        axpy(w, &gd[i * d..(i + 1) * d], rows.row_mut(r));
                    }
                }
            }
        }
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(row[0], T::max);
    let mut total = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += v.to_f64();
    }
    let inv = T::from_f64(1.0 / total);
    for v in row.iter_mut() {
        *v *= inv;
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Row-sparse gradient of an embedding table.
#[derive(Clone, Debug)]
pub struct SparseRows<T> {
    pub dim: usize,
    pub rows: BTreeMap<usize, Vec<T>>,
}

impl<T: Real> SparseRows<T> {
    pub fn new(dim: usize) -> Self {
        SparseRows {
            dim,
            rows: BTreeMap::new(),
        }
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let d = self.dim;
        self.rows.entry(r).or_insert_with(|| vec![T::zero(); d])
    }
}

#[derive(Clone, Debug)]
pub enum GradBuf<T> {
    Dense(Tensor<T>),
    Rows(SparseRows<T>),
}

impl<T: Real> GradBuf<T> {
    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &GradBuf<T>, scale: T) {
        match (self, other) {
            (GradBuf::Dense(a), GradBuf::Dense(b)) => axpy(scale, b.data(), a.data_mut()),
            (GradBuf::Rows(a), GradBuf::Rows(b)) => {
                for (&r, v) in &b.rows {
                    axpy(scale, v, a.row_mut(r));
                }
            }
            (GradBuf::Dense(a), GradBuf::Rows(b)) => {
                let d = b.dim;
                for (&r, v) in &b.rows {
                    axpy(scale, v, &mut a.data_mut()[r * d..(r + 1) * d]);
                }
            }
            (s @ GradBuf::Rows(_), GradBuf::Dense(b)) => {
                let mut dense = b.clone();
                for v in dense.data_mut() {
                    *v *= scale;
                }
                if let GradBuf::Rows(a) = &*s {
                    let d = a.dim;
                    for (&r, v) in &a.rows {
                        axpy(T::one(), v, &mut dense.data_mut()[r * d..(r + 1) * d]);
                    }
                }
                *s = GradBuf::Dense(dense);
            }
        }
    }

    /// Dense copy with the given full shape.
    pub fn to_dense(&self, shape: &[usize]) -> Tensor<T> {
        match self {
            GradBuf::Dense(t) => t.clone(),
            GradBuf::Rows(s) => {
                let mut t = Tensor::zeros(shape);
                for (&r, v) in &s.rows {
                    t.data_mut()[r * s.dim..(r + 1) * s.dim].copy_from_slice(v);
                }
                t
            }
        }
    }
}

/// Result of a backward pass.
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: BTreeMap<ParamId, GradBuf<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient at any node, `None` when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].as_ref()
    }

    pub fn params(&self) -> &BTreeMap<ParamId, GradBuf<T>> {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads<T> {
        ParamGrads { bufs: self.params }
    }
}

/// Accumulated parameter gradients, keyed by parameter id. Parameters
/// absent from the map had zero gradient.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads<T> {
    pub bufs: BTreeMap<ParamId, GradBuf<T>>,
}

impl<T: Real> ParamGrads<T> {
    pub fn new() -> Self {
        ParamGrads { bufs: BTreeMap::new() }
    }

    /// `self += scale * other`, visiting parameters in id order.
    pub fn accumulate(&mut self, other: &ParamGrads<T>, scale: T) {
        for (id, g) in &other.bufs {
            match self.bufs.get_mut(id) {
                Some(acc) => acc.add_scaled(g, scale),
                None => {
                    let mut copy = g.clone();
                    match &mut copy {
                        GradBuf::Dense(t) => t.data_mut().iter_mut().for_each(|v| *v *= scale),
                        GradBuf::Rows(s) => s.rows.values_mut().flatten().for_each(|v| *v *= scale),
                    }
                    self.bufs.insert(*id, copy);
                }
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&GradBuf<T>> {
        self.bufs.get(&id)
    }

    pub fn all_finite(&self) -> bool {
        self.bufs.values().all(|g| match g {
            GradBuf::Dense(t) => t.all_finite(),
            GradBuf::Rows(s) => s.rows.values().flatten().all(|v| v.is_finite()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.var(t(&[], &[3.0]));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.var(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let m = tape.mean(x).unwrap();
        let g = tape.backward(m).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn reused_value_sums_gradients() {
        // f = x·a + x·b, used twice vs. once each
        let mut tape = Tape::new();
        let x = tape.var(t(&[2], &[1.5, -2.0]));
        let a = tape.constant(t(&[2], &[3.0, 4.0]));
        let b = tape.constant(t(&[2], &[-1.0, 0.5]));
        let xa = tape.mul(x, a).unwrap();
        let xb = tape.mul(x, b).unwrap();
        let s = tape.add(xa, xb).unwrap();
        let f = tape.sum(s);
        let g = tape.backward(f).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0, 4.5]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.var(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn second_backward_needs_reset() {
        let mut tape = Tape::new();
        let x = tape.var(t(&[], &[1.0]));
        let y = tape.exp(x);
        tape.backward(y).unwrap();
        assert!(tape.backward(y).is_err());
        tape.reset();
        assert!(tape.is_empty());
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x);
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_is_stable_for_large_inputs() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::vector(vec![50.0, -50.0, 49.0, 0.0, 50.0]));
        let y = tape.softmax(x);
        let total: f64 = tape.value(y).sum_f64();
        assert!((total - 1.0).abs() < 1e-6, "{total}");
        assert!(tape.value(y).all_finite());
    }

    #[test]
    fn cosine_self_and_negation() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, -2.0, -3.0]));
        let c = tape.cosine(a, a).unwrap();
        let v = tape.value(c).data();
        assert!((v[0] - 1.0).abs() < 1e-12);
        assert!((v[1] + 1.0).abs() < 1e-12);
        assert!((v[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_rejects_zero_rows() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        assert!(matches!(tape.cosine(a, a), Err(Error::Numeric { .. })));
    }

    #[test]
    fn standardize_closed_form() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.standardize(x);
        let s = (2.0f64 / 3.0 + STANDARDIZE_EPS).sqrt();
        let want = [-1.0 / s, 0.0, 1.0 / s];
        for (a, b) in tape.value(y).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((tape.value(y).data()[0] + 1.2247).abs() < 1e-4);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn param_is_registered_once() {
        let mut tape = Tape::<f64>::new();
        let w = t(&[2], &[1.0, 2.0]);
        let a = tape.param(ParamId(0), &w);
        let b = tape.param(ParamId(0), &w);
        assert_eq!(a, b);
        let s = tape.add(a, b).unwrap();
        let f = tape.sum(s);
        let g = tape.backward(f).unwrap();
        match g.params().get(&ParamId(0)).unwrap() {
            GradBuf::Dense(t) => assert_eq!(t.data(), &[2.0, 2.0]),
            _ => panic!(),
        }
    }

    #[test]
    fn embed_bag_gradient_is_sparse() {
        let mut tape = Tape::<f64>::new();
        let table = Tensor::from_f64(&[4, 2], &[0., 1., 2., 3., 4., 5., 6., 7.]).unwrap();
        let e = tape.embed_bag(ParamId(3), &table, vec![vec![1, 3], vec![1]]).unwrap();
        assert_eq!(tape.value(e).data(), &[4.0, 5.0, 2.0, 3.0]);
        let f = tape.sum(e);
        let g = tape.backward(f).unwrap();
        match g.params().get(&ParamId(3)).unwrap() {
            GradBuf::Rows(s) => {
                assert_eq!(s.rows.keys().copied().collect::<Vec<_>>(), vec![1, 3]);
                assert_eq!(s.rows[&1], vec![1.5, 1.5]);
                assert_eq!(s.rows[&3], vec![0.5, 0.5]);
            }
            _ => panic!(),
        }
    }
}
