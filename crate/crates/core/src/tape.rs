//! Recorded forward operations and reverse-mode gradients.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operations are
//! appended in execution order, so the node list is already topologically
//! sorted and `backward` is a single reverse sweep.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
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
    Linear {
        x: Var,
        w: Var,
        b: Var,
        rows: usize,
        din: usize,
        dout: usize,
    },
    Relu {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    MatmulNt {
        a: Var,
        b: Var,
        groups: usize,
        m: usize,
        n: usize,
        k: usize,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    ConcatBroadcast {
        local: Var,
        global: Var,
        batch: usize,
        points: usize,
        d_local: usize,
        d_global: usize,
    },
    Reshape {
        x: Var,
    },
    Narrow {
        x: Var,
        /// flat element offset and count of the kept block
        offset: usize,
        len: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        /// softmax over the candidate set of each row
        probs: Vec<T>,
        exclude_target: bool,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Statistics measured by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all recorded values and gradients.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// `x[..., Din] · w[Din, Dout] + b[Dout]`, leading dimensions preserved.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() < 2 || ws.len() != 2 || ws[0] != last_dim(&xs) {
            return Err(Error::Shape {
                op: "linear",
                lhs: xs,
                rhs: ws,
            });
        }
        if bs != [ws[1]] {
            return Err(Error::Shape {
                op: "linear bias",
                lhs: ws,
                rhs: bs,
            });
        }
        let (din, dout) = (ws[0], ws[1]);
        let rows = self.value(x).numel() / din.max(1);
        let mut out = kernels::matmul_nn(self.value(x).data(), self.value(w).data(), rows, din, dout);
        let bias = self.value(b).data();
        for row in out.chunks_mut(dout.max(1)) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Relu { x }, rg)
    }

    /// Max over the point axis of `x[B, N, D]`. Gradient goes to the first
    /// index attaining the maximum.
    pub fn max_pool_points(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::Shape {
                op: "max_pool_points",
                lhs: shape,
                rhs: vec![0, 0, 0],
            });
        }
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        if n == 0 {
            return Err(Error::EmptyCloud);
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * d);
        let mut argmax = Vec::with_capacity(b * d);
        for bi in 0..b {
            let base = bi * n * d;
            let mut best: Vec<T> = src[base..base + d].to_vec();
            let mut idx = vec![0usize; d];
            for ni in 1..n {
                let row = &src[base + ni * d..base + (ni + 1) * d];
                for j in 0..d {
                    if row[j] > best[j] {
                        best[j] = row[j];
                        idx[j] = ni;
                    }
                }
            }
            out.extend(best);
            argmax.extend(idx);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![b, d], out)?, Op::MaxPool { x, argmax }, rg))
    }

    /// Training-mode batch norm over all leading rows of `x[..., D]`.
    /// Returns the normalized output and the biased batch statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(Var, BatchStats<T>)> {
        let shape = self.shape(x).to_vec();
        let d = last_dim(&shape);
        self.check_affine(&shape, gamma, beta)?;
        let rows = self.value(x).numel() / d.max(1);
        if rows < 2 {
            return Err(Error::BatchTooSmall(format!(
                "batch norm needs at least 2 rows in training mode, got {rows}"
            )));
        }
        let src = self.value(x).data();
        let m = T::from_usize(rows).unwrap();
        let mut mean = vec![T::zero(); d];
        for row in src.chunks(d) {
            for (acc, &v) in mean.iter_mut().zip(row) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        let mut var = vec![T::zero(); d];
        for row in src.chunks(d) {
            for ((acc, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
                let c = v - mu;
                *acc += c * c;
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let eps: T = lit(BN_EPS);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = Vec::with_capacity(src.len());
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(d) {
            for j in 0..d {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + bt[j]);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training: true,
            },
            rg,
        );
        Ok((v, BatchStats { mean, var }))
    }

    /// Inference-mode batch norm with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = last_dim(&shape);
        self.check_affine(&shape, gamma, beta)?;
        if running_mean.len() != d || running_var.len() != d {
            return Err(Error::Shape {
                op: "batch_norm running stats",
                lhs: shape,
                rhs: vec![running_mean.len(), running_var.len()],
            });
        }
        let eps: T = lit(BN_EPS);
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = Vec::with_capacity(src.len());
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(d) {
            for j in 0..d {
                let h = (row[j] - running_mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + bt[j]);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training: false,
            },
            rg,
        ))
    }

    fn check_affine(&self, shape: &[usize], gamma: Var, beta: Var) -> Result<()> {
        let d = last_dim(shape);
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Error::Shape {
                    op: "batch_norm affine",
                    lhs: shape.to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Inverted dropout: zero with probability `rate`, scale survivors by
    /// `1/(1-rate)`. Identity outside training.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep: T = lit(1.0 / (1.0 - rate));
        let src = self.value(x);
        let mask: Vec<T> = (0..src.numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = src.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Dropout { x, mask }, rg))
    }

    /// `a[G, M, K] · b[G, N, K]ᵀ → [G, M, N]`; rank-2 inputs are one group.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || Error::Shape {
            op: "matmul_nt",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (groups, m, n, k, out_shape) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[1] => (1, sa[0], sb[0], sa[1], vec![sa[0], sb[0]]),
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[2] => {
                (sa[0], sa[1], sb[1], sa[2], vec![sa[0], sa[1], sb[1]])
            }
            _ => return Err(mismatch()),
        };
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = Vec::with_capacity(groups * m * n);
        for g in 0..groups {
            out.extend(kernels::matmul_nt(
                &ad[g * m * k..(g + 1) * m * k],
                &bd[g * n * k..(g + 1) * n * k],
                m,
                k,
                n,
            ));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::MatmulNt {
                a,
                b,
                groups,
                m,
                n,
                k,
            },
            rg,
        ))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Divides every row (last axis) by its Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let d = last_dim(src.shape()).max(1);
        let eps: T = lit(NORM_EPS);
        let mut norms = Vec::with_capacity(src.numel() / d);
        let mut data = Vec::with_capacity(src.numel());
        for row in src.data().chunks(d) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            norms.push(norm);
            data.extend(row.iter().map(|&v| v / norm));
        }
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::L2Normalize { x, norms }, rg)
    }

    /// `[local[B, N, Dl] ∥ global[B, Dg] broadcast over N] → [B, N, Dl + Dg]`.
    pub fn concat_broadcast(&mut self, local: Var, global: Var) -> Result<Var> {
        let sl = self.shape(local).to_vec();
        let sg = self.shape(global).to_vec();
        if sl.len() != 3 || sg.len() != 2 || sl[0] != sg[0] {
            return Err(Error::Shape {
                op: "concat_broadcast",
                lhs: sl,
                rhs: sg,
            });
        }
        let (batch, points, d_local, d_global) = (sl[0], sl[1], sl[2], sg[1]);
        let ld = self.value(local).data();
        let gd = self.value(global).data();
        let mut out = Vec::with_capacity(batch * points * (d_local + d_global));
        for b in 0..batch {
            let g_row = &gd[b * d_global..(b + 1) * d_global];
            for n in 0..points {
                let base = (b * points + n) * d_local;
                out.extend_from_slice(&ld[base..base + d_local]);
                out.extend_from_slice(g_row);
            }
        }
        let rg = self.rg(local) || self.rg(global);
        Ok(self.push(
            Tensor::new(vec![batch, points, d_local + d_global], out)?,
            Op::ConcatBroadcast {
                local,
                global,
                batch,
                points,
                d_local,
                d_global,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Rows `start..start + len` along the first axis.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || start + len > shape[0] {
            return Err(Error::Shape {
                op: "narrow",
                lhs: shape,
                rhs: vec![start, len],
            });
        }
        let row: usize = shape[1..].iter().product();
        let offset = start * row;
        let mut out_shape = shape;
        out_shape[0] = len;
        let data = self.value(x).data()[offset..offset + len * row].to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Narrow {
                x,
                offset,
                len: len * row,
            },
            rg,
        ))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.cross_entropy(logits, labels, false)
    }

    /// Like [`Tape::softmax_cross_entropy`] but the target logit is left out
    /// of the normalizer: `-(s_y - log Σ_{t≠y} exp s_t)`. Not bounded below
    /// by zero.
    pub fn cross_entropy_excluding_target(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.cross_entropy(logits, labels, true)
    }

    fn cross_entropy(&mut self, logits: Var, labels: &[usize], exclude_target: bool) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![labels.len()],
            });
        }
        let (rows, k) = (shape[0], shape[1]);
        if rows == 0 {
            return Err(Error::BatchTooSmall("cross entropy over zero rows".into()));
        }
        if exclude_target && k < 2 {
            return Err(Error::BatchTooSmall(
                "excluding the target needs at least two candidates".into(),
            ));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(Error::Index(format!("label {l} at row {i} not in [0, {k})")));
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); rows * k];
        let mut total = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = &src[i * k..(i + 1) * k];
            let in_set = |t: usize| !(exclude_target && t == label);
            let max = (0..k)
                .filter(|&t| in_set(t))
                .map(|t| row[t])
                .fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for t in (0..k).filter(|&t| in_set(t)) {
                let e = (row[t] - max).exp();
                probs[i * k + t] = e;
                z += e;
            }
            for t in (0..k).filter(|&t| in_set(t)) {
                probs[i * k + t] /= z;
            }
            let log_norm = max + z.ln();
            total += log_norm - row[label];
        }
        let loss = total / T::from_usize(rows).unwrap();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                exclude_target,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients of every node that
    /// requires one are available through [`Tape::grad`] afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[id] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, contrib: Vec<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            slot @ None => {
                *slot = Some(
                    Tensor::new(self.shape(v).to_vec(), contrib).expect("gradient shape"),
                );
            }
        }
    }

    fn propagate(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &self.nodes[id].op {
            Op::Leaf => {}
            &Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            } => {
                if self.rg(x) {
                    let dx = kernels::matmul_nt(gd, self.value(w).data(), rows, dout, din);
                    self.accumulate(grads, x, dx);
                }
                if self.rg(w) {
                    let dw = kernels::matmul_tn(self.value(x).data(), gd, rows, din, dout);
                    self.accumulate(grads, w, dw);
                }
                if self.rg(b) {
                    let mut db = vec![T::zero(); dout];
                    for row in gd.chunks(dout.max(1)) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Relu { x } => {
                let dx = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, x, dx);
            }
            Op::MaxPool { x, argmax } => {
                let shape = self.shape(*x);
                let (n, d) = (shape[1], shape[2]);
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (flat, (&idx, &gv)) in argmax.iter().zip(gd).enumerate() {
                    let (b, j) = (flat / d, flat % d);
                    dx[(b * n + idx) * d + j] += gv;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let d = inv_std.len();
                let rows = gd.len() / d.max(1);
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); d];
                let mut sum_gx = vec![T::zero(); d];
                for (grow, hrow) in gd.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        sum_g[j] += grow[j];
                        sum_gx[j] += grow[j] * hrow[j];
                    }
                }
                if self.rg(*x) {
                    let mut dx = Vec::with_capacity(gd.len());
                    if *training {
                        let m = T::from_usize(rows).unwrap();
                        for (grow, hrow) in gd.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                let v = gam[j] * inv_std[j] / m
                                    * (m * grow[j] - sum_g[j] - hrow[j] * sum_gx[j]);
                                dx.push(v);
                            }
                        }
                    } else {
                        for grow in gd.chunks(d) {
                            for j in 0..d {
                                dx.push(grow[j] * gam[j] * inv_std[j]);
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, sum_gx);
                self.accumulate(grads, *beta, sum_g);
            }
            Op::Dropout { x, mask } => {
                let dx = gd.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                self.accumulate(grads, *x, dx);
            }
            &Op::MatmulNt {
                a,
                b,
                groups,
                m,
                n,
                k,
            } => {
                let ad = self.value(a).data();
                let bd = self.value(b).data();
                if self.rg(a) {
                    let mut da = Vec::with_capacity(groups * m * k);
                    for g in 0..groups {
                        // dA = G · B
                        da.extend(kernels::matmul_nn(
                            &gd[g * m * n..(g + 1) * m * n],
                            &bd[g * n * k..(g + 1) * n * k],
                            m,
                            n,
                            k,
                        ));
                    }
                    self.accumulate(grads, a, da);
                }
                if self.rg(b) {
                    let mut db = Vec::with_capacity(groups * n * k);
                    for g in 0..groups {
                        // dB = Gᵀ · A
                        db.extend(kernels::matmul_tn(
                            &gd[g * m * n..(g + 1) * m * n],
                            &ad[g * m * k..(g + 1) * m * k],
                            m,
                            n,
                            k,
                        ));
                    }
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Scale { x, factor } => {
                let dx = gd.iter().map(|&v| v * factor).collect();
                self.accumulate(grads, x, dx);
            }
            &Op::Add { a, b } => {
                self.accumulate(grads, a, gd.to_vec());
                self.accumulate(grads, b, gd.to_vec());
            }
            &Op::Mul { a, b } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if self.rg(a) {
                    self.accumulate(grads, a, gd.iter().zip(bv).map(|(&g, &y)| g * y).collect());
                }
                if self.rg(b) {
                    self.accumulate(grads, b, gd.iter().zip(av).map(|(&g, &y)| g * y).collect());
                }
            }
            &Op::Sum { x } => {
                let n = self.value(x).numel();
                self.accumulate(grads, x, vec![gd[0]; n]);
            }
            Op::L2Normalize { x, norms } => {
                let y = self.nodes[id].value.data();
                let d = y.len() / norms.len().max(1);
                let eps: T = lit(NORM_EPS);
                let mut dx = Vec::with_capacity(y.len());
                for ((yrow, grow), &norm) in y.chunks(d).zip(gd.chunks(d)).zip(norms) {
                    if norm <= eps {
                        dx.extend(grow.iter().map(|&g| g / norm));
                        continue;
                    }
                    let dot: T = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                    dx.extend(yrow.iter().zip(grow).map(|(&yv, &g)| (g - yv * dot) / norm));
                }
                self.accumulate(grads, *x, dx);
            }
            &Op::ConcatBroadcast {
                local,
                global,
                batch,
                points,
                d_local,
                d_global,
            } => {
                let width = d_local + d_global;
                let mut dl = Vec::with_capacity(batch * points * d_local);
                let mut dg = vec![T::zero(); batch * d_global];
                for b in 0..batch {
                    for n in 0..points {
                        let row = &gd[(b * points + n) * width..(b * points + n + 1) * width];
                        dl.extend_from_slice(&row[..d_local]);
                        for (acc, &v) in dg[b * d_global..(b + 1) * d_global]
                            .iter_mut()
                            .zip(&row[d_local..])
                        {
                            *acc += v;
                        }
                    }
                }
                self.accumulate(grads, local, dl);
                self.accumulate(grads, global, dg);
            }
            &Op::Reshape { x } => {
                self.accumulate(grads, x, gd.to_vec());
            }
            &Op::Narrow { x, offset, len } => {
                let mut full = vec![T::zero(); self.value(x).numel()];
                full[offset..offset + len].copy_from_slice(&gd[..len]);
                self.accumulate(grads, x, full);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                exclude_target,
            } => {
                let rows = labels.len();
                let k = probs.len() / rows;
                let scale = gd[0] / T::from_usize(rows).unwrap();
                let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &label) in labels.iter().enumerate() {
                    if *exclude_target {
                        dl[i * k + label] = -scale;
                    } else {
                        dl[i * k + label] -= scale;
                    }
                }
                self.accumulate(grads, *logits, dl);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        t(shape, &v)
    }

    /// Central-difference check of d(build)/d(inputs).
    fn gradcheck<F>(inputs: Vec<Tensor<f64>>, build: F)
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let loss = build(&mut tape, &vars);
        tape.backward(loss).unwrap();
        let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| tape.grad(v).unwrap().clone()).collect();
        let h = 1e-4;
        let eval = |xs: &[Tensor<f64>]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
            let loss = build(&mut tape, &vars);
            tape.value(loss).item()
        };
        for (which, input) in inputs.iter().enumerate() {
            for i in 0..input.numel() {
                let mut plus = inputs.clone();
                plus[which].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[which].data_mut()[i] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[which].data()[i];
                let rel = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-3));
                assert!(rel < 1e-4, "input {which}[{i}]: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn linear_forward_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let cases = [
            (vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], vec![1.0, 2.0]),
            (vec![0.0; 4], vec![3.0, 4.0], vec![3.0, 4.0]),
            (vec![1.0; 4], vec![1.0, 0.0], vec![4.0, 3.0]),
        ];
        for (w, b, expect) in cases {
            let w = tape.constant(t(&[2, 2], &w));
            let b = tape.constant(t(&[2], &b));
            let y = tape.linear(x, w, b).unwrap();
            assert_eq!(tape.value(y).data(), expect.as_slice());
        }
    }

    #[test]
    fn linear_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let w = tape.constant(Tensor::zeros(&[2, 4]));
        let b = tape.constant(Tensor::zeros(&[4]));
        match tape.linear(x, w, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 4]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn relu_values_and_tie_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]), true);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[-1.0, 2.0]), true);
        let y = tape.relu(x);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn max_pool_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 2, 2], &[1.0, 5.0, 3.0, 2.0]), true);
        let y = tape.max_pool_points(x).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 5.0]);

        let single = tape.constant(t(&[1, 1, 3], &[4.0, -1.0, 2.0]));
        let y1 = tape.max_pool_points(single).unwrap();
        assert_eq!(tape.value(y1).data(), &[4.0, -1.0, 2.0]);

        let empty = tape.constant(Tensor::zeros(&[1, 0, 3]));
        assert!(matches!(tape.max_pool_points(empty), Err(Error::EmptyCloud)));
    }

    #[test]
    fn max_pool_ties_route_to_first_index() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 3, 1], &[2.0, 2.0, 1.0]), true);
        let y = tape.max_pool_points(x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn batch_norm_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3, 2], &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0]));
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let (y, stats) = tape.batch_norm_train(x, g, b).unwrap();
        let out = tape.value(y);
        for r in 0..3 {
            assert_eq!(out.row(r)[1], 0.0);
        }
        assert_eq!(stats.mean, vec![2.0, 5.0]);

        // mean 0, var 1 → unchanged up to epsilon
        let x = tape.constant(t(&[2, 1], &[-1.0, 1.0]));
        let g1 = tape.constant(Tensor::full(&[1], 1.0));
        let b1 = tape.constant(Tensor::zeros(&[1]));
        let (y, _) = tape.batch_norm_train(x, g1, b1).unwrap();
        let scale = 1.0 / (1.0f64 + BN_EPS).sqrt();
        assert!((tape.value(y).data()[1] - scale).abs() < 1e-12);

        let tiny = tape.constant(t(&[1, 1], &[1.0]));
        assert!(matches!(
            tape.batch_norm_train(tiny, g1, b1),
            Err(Error::BatchTooSmall(_))
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::<f64>::new();
        let uniform = tape.constant(Tensor::zeros(&[2, 16]));
        let l = tape.softmax_cross_entropy(uniform, &[3, 15]).unwrap();
        assert!((tape.value(l).item() - 16f64.ln()).abs() < 1e-12);

        let mut sat = vec![0.0; 4];
        sat[2] = 1000.0;
        let s = tape.constant(t(&[1, 4], &sat));
        let l = tape.softmax_cross_entropy(s, &[2]).unwrap();
        assert!(tape.value(l).item().abs() < 1e-12);

        let h = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        let l = tape.softmax_cross_entropy(h, &[0]).unwrap();
        assert!((tape.value(l).item() - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!((tape.value(l).item() - 0.3133).abs() < 1e-4);

        assert!(matches!(
            tape.softmax_cross_entropy(h, &[2]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn backward_simple_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[2, 3], 0.7), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);

        assert!(matches!(tape.backward(sq), Err(Error::Contract(_))));
    }

    #[test]
    fn dropout_behaviour() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[100_000], 1.0), true);
        assert_eq!(tape.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.5, false, &mut rng).unwrap(), x);
        assert!(matches!(
            tape.dropout(x, 1.0, true, &mut rng),
            Err(Error::Config(_))
        ));
        let y = tape.dropout(x, 0.5, true, &mut rng).unwrap();
        let zeros = tape.value(y).data().iter().filter(|&&v| v == 0.0).count();
        let frac = zeros as f64 / 100_000.0;
        assert!((frac - 0.5).abs() < 0.01, "zero fraction {frac}");
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn gradcheck_linear_relu_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inputs = vec![random(&[2, 4, 3], &mut rng), random(&[3, 5], &mut rng), random(&[5], &mut rng)];
        gradcheck(inputs, |tape, v| {
            let h = tape.linear(v[0], v[1], v[2]).unwrap();
            let h = tape.relu(h);
            let p = tape.max_pool_points(h).unwrap();
            let sq = tape.mul(p, p).unwrap();
            tape.sum(sq)
        });
    }

    #[test]
    fn gradcheck_batch_norm_both_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let weights = random(&[6, 3], &mut rng);
        let inputs = vec![random(&[6, 3], &mut rng), random(&[3], &mut rng), random(&[3], &mut rng)];
        let w2 = weights.clone();
        gradcheck(inputs.clone(), move |tape, v| {
            let (y, _) = tape.batch_norm_train(v[0], v[1], v[2]).unwrap();
            let c = tape.constant(w2.clone());
            let p = tape.mul(y, c).unwrap();
            tape.sum(p)
        });
        gradcheck(inputs, move |tape, v| {
            let y = tape
                .batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0])
                .unwrap();
            let c = tape.constant(weights.clone());
            let p = tape.mul(y, c).unwrap();
            tape.sum(p)
        });
    }

    #[test]
    fn gradcheck_normalize_matmul_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let inputs = vec![random(&[4, 3], &mut rng), random(&[4, 3], &mut rng)];
        gradcheck(inputs.clone(), |tape, v| {
            let a = tape.l2_normalize(v[0]);
            let b = tape.l2_normalize(v[1]);
            let s = tape.matmul_nt(a, b).unwrap();
            let s = tape.scale(s, 1.0 / 0.3);
            tape.softmax_cross_entropy(s, &[0, 1, 2, 3]).unwrap()
        });
        gradcheck(inputs, |tape, v| {
            let s = tape.matmul_nt(v[0], v[1]).unwrap();
            tape.cross_entropy_excluding_target(s, &[0, 1, 2, 3]).unwrap()
        });
    }

    #[test]
    fn gradcheck_grouped_matmul_concat_dropout() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let inputs = vec![
            random(&[2, 3, 2], &mut rng),
            random(&[2, 3, 2], &mut rng),
            random(&[2, 4], &mut rng),
        ];
        gradcheck(inputs, |tape, v| {
            let s = tape.matmul_nt(v[0], v[1]).unwrap();
            let flat = tape.reshape(s, &[6, 3]).unwrap();
            let ce = tape.softmax_cross_entropy(flat, &[0, 1, 2, 0, 1, 2]).unwrap();
            let c = tape.concat_broadcast(v[0], v[2]).unwrap();
            let mut drop_rng = ChaCha8Rng::seed_from_u64(99);
            let d = tape.dropout(c, 0.3, true, &mut drop_rng).unwrap();
            let sq = tape.mul(d, d).unwrap();
            let s2 = tape.sum(sq);
            tape.add(ce, s2).unwrap()
        });
    }

    #[test]
    fn gradcheck_narrow() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        gradcheck(vec![random(&[4, 3], &mut rng)], |tape, v| {
            let a = tape.narrow(v[0], 0, 2).unwrap();
            let b = tape.narrow(v[0], 2, 2).unwrap();
            let s = tape.matmul_nt(a, b).unwrap();
            tape.softmax_cross_entropy(s, &[0, 1]).unwrap()
        });
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let y = tape.narrow(x, 1, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[3., 4., 5., 6.]);
        assert!(tape.narrow(x, 2, 2).is_err());
    }

    #[test]
    fn repeated_backward_is_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(random(&[70, 3], &mut rng).cast(), true);
            let w = tape.leaf(random(&[3, 8], &mut rng).cast(), true);
            let b = tape.leaf(Tensor::zeros(&[8]), true);
            let y = tape.linear(x, w, b).unwrap();
            let y = tape.relu(y);
            let s = tape.sum(y);
            tape.backward(s).unwrap();
            (tape.grad(x).unwrap().clone(), tape.grad(w).unwrap().clone())
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert!(a1.bit_eq(&a2) && b1.bit_eq(&b2));
    }
}
