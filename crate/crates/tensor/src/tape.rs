//! Define-by-run reverse-mode autodiff.
//!
//! Every op appends a node holding its output value; `backward` walks the
//! nodes in reverse creation order. Parameters enter the tape as leaves that
//! remember their `ParamId`, so gradients can be accumulated back into the
//! owning `ParamStore`.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::real::{gemm, Real};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        a_batched: bool,
        b_batched: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: T,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        axes: Vec<usize>,
    },
    Gather {
        a: Var,
        index: Arc<[Option<usize>]>,
        inner: usize,
    },
    Concat {
        parts: Vec<Var>,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu {
        a: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        smoothing: T,
        probs: Vec<T>,
    },
    Sum {
        a: Var,
    },
    MeanAxis {
        a: Var,
        axis: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Gradients of leaf nodes produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Maps each output linear index of a permutation to its input offset.
fn permute_offsets(in_shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = numel(&out_shape);
    let mut offsets = Vec::with_capacity(total);
    let mut coord = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for d in (0..coord.len()).rev() {
            coord[d] += 1;
            off += src_strides[d];
            if coord[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            coord[d] = 0;
        }
    }
    offsets
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("node shape consistent")
    }

    /// Leaf from a tensor; gradients are tracked when `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, rg)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(TensorError::shape("constant", shape, &[data.len()]));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        let v = self.push(p.tensor.shape().to_vec(), p.tensor.data().to_vec(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Batched matrix product `[..., m, k] x [..., k, n]`. Either side may
    /// omit the batch extents, in which case it is shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(TensorError::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(TensorError::shape("matmul", &sa, &sb));
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let (batch_shape, a_batched, b_batched) = if ba == bb {
            (ba.to_vec(), true, true)
        } else if bb.is_empty() {
            (ba.to_vec(), true, false)
        } else if ba.is_empty() {
            (bb.to_vec(), false, true)
        } else {
            return Err(TensorError::shape("matmul", &sa, &sb));
        };
        let batch = numel(&batch_shape);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            if a_batched && !b_batched {
                gemm(batch * m, k, n, av, false, bv, false, &mut out, false);
            } else {
                for i in 0..batch {
                    let ao = if a_batched { i * m * k } else { 0 };
                    let bo = if b_batched { i * k * n } else { 0 };
                    gemm(
                        m,
                        k,
                        n,
                        &av[ao..ao + m * k],
                        false,
                        &bv[bo..bo + k * n],
                        false,
                        &mut out[i * m * n..(i + 1) * m * n],
                        false,
                    );
                }
            }
        }
        let mut shape = batch_shape;
        shape.extend([m, n]);
        let ng = self.needs(&[a, b]);
        Ok(self.push(
            shape,
            out,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                a_batched,
                b_batched,
            },
            ng,
        ))
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(TensorError::shape(op, sa, sb));
        }
        Ok(())
    }

    /// `a + b`, where `b`'s shape equals `a`'s or is a trailing suffix of it.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("add", a, b)?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let out: Vec<T> = if bv.is_empty() {
            av.clone()
        } else {
            av.chunks(bv.len())
                .flat_map(|ch| ch.iter().zip(bv).map(|(&x, &y)| x + y))
                .collect()
        };
        let shape = self.shape(a).to_vec();
        let ng = self.needs(&[a, b]);
        Ok(self.push(shape, out, Op::Add { a, b }, ng))
    }

    /// `a * b` elementwise with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("mul", a, b)?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let out: Vec<T> = if bv.is_empty() {
            av.clone()
        } else {
            av.chunks(bv.len())
                .flat_map(|ch| ch.iter().zip(bv).map(|(&x, &y)| x * y))
                .collect()
        };
        let shape = self.shape(a).to_vec();
        let ng = self.needs(&[a, b]);
        Ok(self.push(shape, out, Op::Mul { a, b }, ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(&[a]);
        self.push(shape, out, Op::Scale { a, c }, ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(TensorError::shape("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        let ng = self.needs(&[a]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape { a }, ng))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if axes.len() != sa.len()
            || axes
                .iter()
                .any(|&x| x >= sa.len() || std::mem::replace(&mut seen[x], true))
        {
            return Err(TensorError::shape("permute", &sa, axes));
        }
        let offsets = permute_offsets(&sa, axes);
        let av = self.value(a);
        let out = offsets.iter().map(|&o| av[o]).collect();
        let shape = axes.iter().map(|&x| sa[x]).collect();
        let ng = self.needs(&[a]);
        Ok(self.push(
            shape,
            out,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
            ng,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(TensorError::contract("transpose", "rank must be at least 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    /// Selects rows along axis 0. `None` entries produce zero rows.
    /// Gradients scatter-add back into the source rows.
    pub fn gather_rows(&mut self, a: Var, index: Arc<[Option<usize>]>) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.is_empty() {
            return Err(TensorError::contract("gather_rows", "scalar input"));
        }
        let rows = sa[0];
        let inner = numel(&sa[1..]);
        if let Some(bad) = index.iter().flatten().find(|&&r| r >= rows) {
            return Err(TensorError::contract(
                "gather_rows",
                format!("row {bad} out of range for {rows} rows"),
            ));
        }
        let av = self.value(a);
        let mut out = vec![T::zero(); index.len() * inner];
        for (dst, src) in index.iter().enumerate() {
            if let Some(r) = src {
                out[dst * inner..(dst + 1) * inner].copy_from_slice(&av[r * inner..(r + 1) * inner]);
            }
        }
        let mut shape = vec![index.len()];
        shape.extend_from_slice(&sa[1..]);
        let ng = self.needs(&[a]);
        Ok(self.push(shape, out, Op::Gather { a, index, inner }, ng))
    }

    /// Concatenates along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::contract("concat", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(TensorError::shape("concat", self.shape(*first), s));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let ng = self.needs(parts);
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    /// Softmax over the last axis. Rows that are entirely `-inf` map to zeros.
    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let n = *sa
            .last()
            .ok_or_else(|| TensorError::contract("softmax_last", "scalar input"))?;
        if n == 0 {
            return Err(TensorError::contract("softmax_last", "empty last axis"));
        }
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let ng = self.needs(&[a]);
        Ok(self.push(sa, out, Op::Softmax { a }, ng))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx
            .last()
            .ok_or_else(|| TensorError::contract("layer_norm", "scalar input"))?;
        if d == 0 || eps <= 0.0 {
            return Err(TensorError::contract("layer_norm", "requires d > 0 and eps > 0"));
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::shape("layer_norm", &sx, self.shape(gamma)));
        }
        let eps = T::from_f64_lossy(eps);
        let dn = T::from_usize(d).expect("usize to float");
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = (var + eps).sqrt().recip();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let ng = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            sx,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::from_f64_lossy(GELU_C);
        let k = T::from_f64_lossy(GELU_A);
        let half = T::from_f64_lossy(0.5);
        let out = self
            .value(a)
            .iter()
            .map(|&x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(&[a]);
        self.push(shape, out, Op::Gelu { a }, ng)
    }

    /// Mean label-smoothed cross entropy over a `[B, C]` batch of logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != targets.len() {
            return Err(TensorError::shape("cross_entropy", &sl, &[targets.len()]));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(TensorError::contract(
                "cross_entropy",
                format!("smoothing {smoothing} outside [0, 1)"),
            ));
        }
        let (b, c) = (sl[0], sl[1]);
        if b == 0 {
            return Err(TensorError::contract("cross_entropy", "empty batch"));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::Label { index: bad, classes: c });
        }
        let eps = T::from_f64_lossy(smoothing);
        let cn = T::from_usize(c).expect("usize to float");
        let mut probs = self.value(logits).to_vec();
        let mut total = T::zero();
        for (row, &y) in probs.chunks_mut(c).zip(targets) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
            let mut loss = T::zero();
            for (j, v) in row.iter_mut().enumerate() {
                let logp = *v - lse;
                let q = eps / cn + if j == y { T::one() - eps } else { T::zero() };
                loss = loss - q * logp;
                *v = logp.exp();
            }
            total = total + loss;
        }
        let loss = total / T::from_usize(b).expect("usize to float");
        let ng = self.needs(&[logits]);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing: eps,
                probs,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum::<T>();
        let ng = self.needs(&[a]);
        self.push(Vec::new(), vec![s], Op::Sum { a }, ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, T::from_usize(n).expect("usize to float").recip())
    }

    /// Mean over one axis, removing it from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || sa[axis] == 0 {
            return Err(TensorError::contract(
                "mean_axis",
                format!("axis {axis} invalid for shape {sa:?}"),
            ));
        }
        let pre = numel(&sa[..axis]);
        let n = sa[axis];
        let post = numel(&sa[axis + 1..]);
        let inv = T::from_usize(n).expect("usize to float").recip();
        let av = self.value(a);
        let mut out = vec![T::zero(); pre * post];
        for p in 0..pre {
            for i in 0..n {
                let src = &av[(p * n + i) * post..(p * n + i + 1) * post];
                for (o, &v) in out[p * post..(p + 1) * post].iter_mut().zip(src) {
                    *o = *o + v;
                }
            }
        }
        out.iter_mut().for_each(|o| *o = *o * inv);
        let mut shape = sa;
        shape.remove(axis);
        let ng = self.needs(&[a]);
        Ok(self.push(shape, out, Op::MeanAxis { a, axis }, ng))
    }

    /// `x @ w (+ bias)` for `x: [..., k]`, `w: [k, n]`, `bias: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let k = *sx.last().ok_or_else(|| TensorError::shape("linear", &sx, self.shape(w)))?;
        let rows = numel(&sx) / k.max(1);
        let flat = self.reshape(x, &[rows, k])?;
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = bias {
            y = self.add(y, b)?;
        }
        let n = self.shape(w)[1];
        let mut shape = sx;
        *shape.last_mut().expect("non-empty") = n;
        self.reshape(y, &shape)
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..=1.0).contains(&p) {
            return Err(TensorError::contract("dropout", format!("p = {p} outside [0, 1]")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(if p < 1.0 { 1.0 / (1.0 - p) } else { 0.0 });
        let n = self.value(x).len();
        let mask = (0..n)
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let shape = self.shape(x).to_vec();
        let m = self.constant(&shape, mask)?;
        self.mul(x, m)
    }

    /// Reverse pass from a scalar `loss`. Parameter gradients are accumulated
    /// into `store`; gradients of all leaves are returned.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let ln = self.node(loss);
        if ln.value.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: ln.shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(id), true) = (node.param, node.needs_grad) {
                let g = grads[i]
                    .get_or_insert_with(|| vec![T::zero(); node.value.len()])
                    .as_slice();
                store.get_mut(id).tensor.accumulate_grad(g)?;
            }
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                a_batched,
                b_batched,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                if wants(*a) {
                    let ga = grad_slot(grads, *a, av.len());
                    if *a_batched && !*b_batched {
                        gemm(batch * m, n, k, g, false, bv, true, ga, true);
                    } else {
                        for i in 0..batch {
                            let ao = if *a_batched { i * m * k } else { 0 };
                            let bo = if *b_batched { i * k * n } else { 0 };
                            gemm(
                                m,
                                n,
                                k,
                                &g[i * m * n..(i + 1) * m * n],
                                false,
                                &bv[bo..bo + k * n],
                                true,
                                &mut ga[ao..ao + m * k],
                                true,
                            );
                        }
                    }
                }
                if wants(*b) {
                    let gb = grad_slot(grads, *b, bv.len());
                    if *a_batched && !*b_batched {
                        gemm(k, batch * m, n, av, true, g, false, gb, true);
                    } else {
                        for i in 0..batch {
                            let ao = if *a_batched { i * m * k } else { 0 };
                            let bo = if *b_batched { i * k * n } else { 0 };
                            gemm(
                                k,
                                m,
                                n,
                                &av[ao..ao + m * k],
                                true,
                                &g[i * m * n..(i + 1) * m * n],
                                false,
                                &mut gb[bo..bo + k * n],
                                true,
                            );
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    add_into(grad_slot(grads, *a, g.len()), g);
                }
                if wants(*b) {
                    let nb = nodes[b.0].value.len();
                    let gb = grad_slot(grads, *b, nb);
                    if nb > 0 {
                        for ch in g.chunks(nb) {
                            add_into(gb, ch);
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let nb = bv.len();
                if nb == 0 {
                    return;
                }
                if wants(*a) {
                    let ga = grad_slot(grads, *a, av.len());
                    for (gc, gch) in ga.chunks_mut(nb).zip(g.chunks(nb)) {
                        for ((o, &gi), &bi) in gc.iter_mut().zip(gch).zip(bv) {
                            *o = *o + gi * bi;
                        }
                    }
                }
                if wants(*b) {
                    let gb = grad_slot(grads, *b, nb);
                    for (ach, gch) in av.chunks(nb).zip(g.chunks(nb)) {
                        for ((o, &gi), &ai) in gb.iter_mut().zip(gch).zip(ach) {
                            *o = *o + gi * ai;
                        }
                    }
                }
            }
            Op::Scale { a, c } => {
                if wants(*a) {
                    let ga = grad_slot(grads, *a, g.len());
                    for (o, &gi) in ga.iter_mut().zip(g) {
                        *o = *o + gi * *c;
                    }
                }
            }
            Op::Reshape { a } => {
                if wants(*a) {
                    add_into(grad_slot(grads, *a, g.len()), g);
                }
            }
            Op::Permute { a, axes } => {
                if wants(*a) {
                    let offsets = permute_offsets(&nodes[a.0].shape, axes);
                    let ga = grad_slot(grads, *a, g.len());
                    for (&o, &gi) in offsets.iter().zip(g) {
                        ga[o] = ga[o] + gi;
                    }
                }
            }
            Op::Gather { a, index, inner } => {
                if wants(*a) {
                    let inner = *inner;
                    let ga = grad_slot(grads, *a, nodes[a.0].value.len());
                    for (dst, src) in index.iter().enumerate() {
                        if let Some(r) = src {
                            add_into(
                                &mut ga[r * inner..(r + 1) * inner],
                                &g[dst * inner..(dst + 1) * inner],
                            );
                        }
                    }
                }
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    if wants(*p) {
                        add_into(grad_slot(grads, *p, len), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::Softmax { a } => {
                if wants(*a) {
                    let n = *node.shape.last().expect("softmax rank >= 1");
                    let ga = grad_slot(grads, *a, g.len());
                    for ((gr, pr), out) in g.chunks(n).zip(node.value.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot = gr.iter().zip(pr).map(|(&x, &y)| x * y).sum::<T>();
                        for ((o, &gi), &pi) in out.iter_mut().zip(gr).zip(pr) {
                            *o = *o + pi * (gi - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = nodes[gamma.0].value.len();
                let gv = &nodes[gamma.0].value;
                let dn = T::from_usize(d).expect("usize to float");
                if wants(*gamma) {
                    let gg = grad_slot(grads, *gamma, d);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, &gi), &hi) in gg.iter_mut().zip(gr).zip(hr) {
                            *o = *o + gi * hi;
                        }
                    }
                }
                if wants(*beta) {
                    let gb = grad_slot(grads, *beta, d);
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                }
                if wants(*x) {
                    let gx = grad_slot(grads, *x, g.len());
                    for (r, ((gr, hr), out)) in g
                        .chunks(d)
                        .zip(xhat.chunks(d))
                        .zip(gx.chunks_mut(d))
                        .enumerate()
                    {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * hr[j];
                        }
                        mean_dh = mean_dh / dn;
                        mean_dh_h = mean_dh_h / dn;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            out[j] = out[j] + rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                if wants(*a) {
                    let c = T::from_f64_lossy(GELU_C);
                    let k = T::from_f64_lossy(GELU_A);
                    let half = T::from_f64_lossy(0.5);
                    let three = T::from_f64_lossy(3.0);
                    let av = &nodes[a.0].value;
                    let ga = grad_slot(grads, *a, g.len());
                    for ((o, &gi), &x) in ga.iter_mut().zip(g).zip(av) {
                        let th = (c * (x + k * x * x * x)).tanh();
                        let dy = half * (T::one() + th)
                            + half * x * (T::one() - th * th) * c * (T::one() + three * k * x * x);
                        *o = *o + gi * dy;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                probs,
            } => {
                if wants(*logits) {
                    let b = targets.len();
                    let c = probs.len() / b;
                    let cn = T::from_usize(c).expect("usize to float");
                    let scale = g[0] / T::from_usize(b).expect("usize to float");
                    let gl = grad_slot(grads, *logits, probs.len());
                    for (r, &y) in targets.iter().enumerate() {
                        for j in 0..c {
                            let q = *smoothing / cn + if j == y { T::one() - *smoothing } else { T::zero() };
                            let o = &mut gl[r * c + j];
                            *o = *o + scale * (probs[r * c + j] - q);
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if wants(*a) {
                    let ga = grad_slot(grads, *a, nodes[a.0].value.len());
                    ga.iter_mut().for_each(|o| *o = *o + g[0]);
                }
            }
            Op::MeanAxis { a, axis } => {
                if wants(*a) {
                    let sa = &nodes[a.0].shape;
                    let pre = numel(&sa[..*axis]);
                    let n = sa[*axis];
                    let post = numel(&sa[axis + 1..]);
                    let inv = T::from_usize(n).expect("usize to float").recip();
                    let ga = grad_slot(grads, *a, nodes[a.0].value.len());
                    for p in 0..pre {
                        for i in 0..n {
                            let dst = &mut ga[(p * n + i) * post..(p * n + i + 1) * post];
                            for (o, &gi) in dst.iter_mut().zip(&g[p * post..(p + 1) * post]) {
                                *o = *o + gi * inv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn grad_slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (o, &s) in dst.iter_mut().zip(src) {
        *o = *o + s;
    }
}

/// Numerically stable in-place softmax; an all `-inf` row becomes zeros.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    if mx == T::neg_infinity() {
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s = s + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / s);
}
