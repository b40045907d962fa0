//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Operations append nodes to a [`Graph`]; `backward` walks the tape in
//! reverse, accumulating gradients additively across fan-out. Kernels are
//! single-threaded with fixed summation order, so identical inputs produce
//! bit-identical outputs.

use std::rc::Rc;

use crate::error::{CoreError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const RMSNORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

enum Op<R: Real> {
    Input,
    Param,
    Matmul { a: NodeId, b: NodeId },
    MatmulNt { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Neg { a: NodeId },
    Scale { a: NodeId, c: R },
    AffineConst { a: NodeId, scale: R },
    AddRow { a: NodeId, b: NodeId },
    MulRow { a: NodeId, b: NodeId },
    Silu { a: NodeId },
    RmsNorm { a: NodeId, gain: NodeId, inv_rms: Vec<R> },
    MaskedSoftmax { a: NodeId, mask: Rc<Vec<bool>> },
    LogSoftmax { a: NodeId },
    Rope { a: NodeId, cos: Rc<Vec<R>>, sin: Rc<Vec<R>> },
    GatherRows { a: NodeId, idx: Rc<Vec<usize>> },
    ConcatRows { parts: Vec<NodeId> },
    SliceCols { a: NodeId, start: usize, len: usize },
    ConcatCols { parts: Vec<NodeId> },
    MeanAll { a: NodeId },
    MseToConst { a: NodeId, target: Rc<Tensor<R>> },
    NllRows { a: NodeId, targets: Rc<Vec<usize>> },
    Detach,
}

struct Node<R: Real> {
    value: Tensor<R>,
    op: Op<R>,
    needs_grad: bool,
}

/// Gradients from one backward pass; indexed by [`NodeId`].
pub struct Gradients<R: Real> {
    grads: Vec<Option<Vec<R>>>,
}

impl<R: Real> Gradients<R> {
    pub fn get(&self, id: NodeId) -> Option<&[R]> {
        self.grads[id.0].as_deref()
    }
}

pub struct Graph<R: Real> {
    nodes: Vec<Node<R>>,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<R> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<R>) -> NodeId {
        self.push(value, Op::Input, false)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<R>) -> NodeId {
        self.push(value, Op::Param, true)
    }

    pub fn scalar_input(&mut self, v: R) -> NodeId {
        self.input(Tensor::scalar(v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if ka != kb {
            return Err(CoreError::Shape(format!(
                "matmul inner dims {} vs {}",
                ka, kb
            )));
        }
        let mut out = vec![R::ZERO; m * n];
        matmul_nn(
            &self.value(a).data,
            &self.value(b).data,
            m,
            ka,
            n,
            &mut out,
        );
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::Matmul { a, b },
            needs,
        ))
    }

    /// `a[m,k] · b[n,k]ᵀ -> [m,n]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.value(a).dims2()?;
        let (n, kb) = self.value(b).dims2()?;
        if ka != kb {
            return Err(CoreError::Shape(format!(
                "matmul_nt inner dims {} vs {}",
                ka, kb
            )));
        }
        let mut out = vec![R::ZERO; m * n];
        matmul_nt(
            &self.value(a).data,
            &self.value(b).data,
            m,
            ka,
            n,
            &mut out,
        );
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatmulNt { a, b },
            needs,
        ))
    }

    fn binary_same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.value(a).shape != self.value(b).shape {
            return Err(CoreError::Shape(format!(
                "{}: {:?} vs {:?}",
                what,
                self.value(a).shape,
                self.value(b).shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add")?;
        let data = zip_map(&self.value(a).data, &self.value(b).data, |x, y| x + y);
        let shape = self.value(a).shape.clone();
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor { shape, data }, Op::Add { a, b }, needs))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub")?;
        let data = zip_map(&self.value(a).data, &self.value(b).data, |x, y| x - y);
        let shape = self.value(a).shape.clone();
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor { shape, data }, Op::Sub { a, b }, needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul")?;
        let data = zip_map(&self.value(a).data, &self.value(b).data, |x, y| x * y);
        let shape = self.value(a).shape.clone();
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor { shape, data }, Op::Mul { a, b }, needs))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data.iter().map(|&x| -x).collect();
        let shape = self.value(a).shape.clone();
        let needs = self.ng(a);
        self.push(Tensor { shape, data }, Op::Neg { a }, needs)
    }

    pub fn scale(&mut self, a: NodeId, c: R) -> NodeId {
        let data = self.value(a).data.iter().map(|&x| x * c).collect();
        let shape = self.value(a).shape.clone();
        let needs = self.ng(a);
        self.push(Tensor { shape, data }, Op::Scale { a, c }, needs)
    }

    /// `scale*a + bias` with a constant bias tensor.
    pub fn affine_const(&mut self, a: NodeId, scale: R, bias: Rc<Tensor<R>>) -> Result<NodeId> {
        if self.value(a).shape != bias.shape {
            return Err(CoreError::Shape(format!(
                "affine_const: {:?} vs {:?}",
                self.value(a).shape,
                bias.shape
            )));
        }
        let data = zip_map(&self.value(a).data, &bias.data, |x, b| x * scale + b);
        let shape = self.value(a).shape.clone();
        let needs = self.ng(a);
        Ok(self.push(Tensor { shape, data }, Op::AffineConst { a, scale }, needs))
    }

    /// Row-broadcast add: `a[m,n] + b[n]`.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        if self.value(b).numel() != n {
            return Err(CoreError::Shape(format!(
                "add_row: {} cols vs {} bias",
                n,
                self.value(b).numel()
            )));
        }
        let mut data = vec![R::ZERO; m * n];
        for i in 0..m {
            let arow = self.value(a).row(i);
            let brow = &self.value(b).data;
            let orow = &mut data[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = arow[j] + brow[j];
            }
        }
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::AddRow { a, b }, needs))
    }

    /// Row-broadcast multiply: `a[m,n] ⊙ b[n]`.
    pub fn mul_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        if self.value(b).numel() != n {
            return Err(CoreError::Shape(format!(
                "mul_row: {} cols vs {} scale",
                n,
                self.value(b).numel()
            )));
        }
        let mut data = vec![R::ZERO; m * n];
        for i in 0..m {
            let arow = self.value(a).row(i);
            let brow = &self.value(b).data;
            let orow = &mut data[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = arow[j] * brow[j];
            }
        }
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MulRow { a, b }, needs))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let data = self
            .value(a)
            .data
            .iter()
            .map(|&x| x * sigmoid(x))
            .collect();
        let shape = self.value(a).shape.clone();
        let needs = self.ng(a);
        self.push(Tensor { shape, data }, Op::Silu { a }, needs)
    }

    /// RMS normalization over the last axis with a learned gain:
    /// `y = x / sqrt(mean(x^2) + eps) ⊙ gain`.
    pub fn rmsnorm(&mut self, a: NodeId, gain: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        if self.value(gain).numel() != n {
            return Err(CoreError::Shape(format!(
                "rmsnorm gain {} vs {} cols",
                self.value(gain).numel(),
                n
            )));
        }
        let eps = R::from_f64(RMSNORM_EPS);
        let mut inv_rms = vec![R::ZERO; m];
        let mut data = vec![R::ZERO; m * n];
        for i in 0..m {
            let row = self.value(a).row(i);
            let mut ss = R::ZERO;
            for &x in row {
                ss += x * x;
            }
            let inv = R::ONE / (ss / R::from_usize(n) + eps).sqrt();
            inv_rms[i] = inv;
            let g = &self.value(gain).data;
            let out = &mut data[i * n..(i + 1) * n];
            for j in 0..n {
                out[j] = row[j] * inv * g[j];
            }
        }
        let needs = self.ng(a) || self.ng(gain);
        Ok(self.push(
            Tensor::new(vec![m, n], data)?,
            Op::RmsNorm { a, gain, inv_rms },
            needs,
        ))
    }

    /// Row-wise softmax restricted to visible entries. Masked entries get
    /// exactly zero probability; rows are stabilized by max-subtraction over
    /// the visible set. A fully masked row is an error.
    pub fn masked_softmax(&mut self, a: NodeId, mask: Rc<Vec<bool>>) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        if mask.len() != m * n {
            return Err(CoreError::Shape(format!(
                "mask len {} vs logits {}x{}",
                mask.len(),
                m,
                n
            )));
        }
        let mut data = vec![R::ZERO; m * n];
        for i in 0..m {
            let row = self.value(a).row(i);
            let mrow = &mask[i * n..(i + 1) * n];
            let mut maxv: Option<R> = None;
            for j in 0..n {
                if mrow[j] {
                    maxv = Some(match maxv {
                        Some(v) => v.maximum(row[j]),
                        None => row[j],
                    });
                }
            }
            let maxv = maxv.ok_or(CoreError::DegenerateRow { row: i })?;
            let out = &mut data[i * n..(i + 1) * n];
            let mut denom = R::ZERO;
            for j in 0..n {
                if mrow[j] {
                    let e = (row[j] - maxv).exp();
                    out[j] = e;
                    denom += e;
                }
            }
            let inv = R::ONE / denom;
            for v in out.iter_mut() {
                *v *= inv;
            }
        }
        let needs = self.ng(a);
        Ok(self.push(
            Tensor::new(vec![m, n], data)?,
            Op::MaskedSoftmax { a, mask },
            needs,
        ))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        let mut data = vec![R::ZERO; m * n];
        for i in 0..m {
            let row = self.value(a).row(i);
            let mut maxv = row[0];
            for &x in row {
                maxv = maxv.maximum(x);
            }
            let mut denom = R::ZERO;
            for &x in row {
                denom += (x - maxv).exp();
            }
            let lse = maxv + denom.ln();
            let out = &mut data[i * n..(i + 1) * n];
            for j in 0..n {
                out[j] = row[j] - lse;
            }
        }
        let needs = self.ng(a);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::LogSoftmax { a }, needs))
    }

    /// Rotate consecutive channel pairs by per-(row, pair) angles.
    pub fn rope(&mut self, a: NodeId, cos: Rc<Vec<R>>, sin: Rc<Vec<R>>) -> Result<NodeId> {
        let (m, d) = self.value(a).dims2()?;
        if d % 2 != 0 || cos.len() != m * d / 2 || sin.len() != m * d / 2 {
            return Err(CoreError::Shape(format!(
                "rope: dim {} angles {}",
                d,
                cos.len()
            )));
        }
        let half = d / 2;
        let mut data = vec![R::ZERO; m * d];
        for i in 0..m {
            let row = self.value(a).row(i);
            let out = &mut data[i * d..(i + 1) * d];
            for p in 0..half {
                let (c, s) = (cos[i * half + p], sin[i * half + p]);
                let (x0, x1) = (row[2 * p], row[2 * p + 1]);
                out[2 * p] = x0 * c - x1 * s;
                out[2 * p + 1] = x0 * s + x1 * c;
            }
        }
        let needs = self.ng(a);
        Ok(self.push(Tensor::new(vec![m, d], data)?, Op::Rope { a, cos, sin }, needs))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: Rc<Vec<usize>>) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx.iter() {
            if i >= m {
                return Err(CoreError::Shape(format!("gather row {} of {}", i, m)));
            }
            data.extend_from_slice(self.value(a).row(i));
        }
        let needs = self.ng(a);
        Ok(self.push(
            Tensor::new(vec![idx.len(), n], data)?,
            Op::GatherRows { a, idx },
            needs,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(CoreError::InvalidArgument("concat of nothing".into()));
        }
        let (_, n) = self.value(parts[0]).dims2()?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (mp, np) = self.value(p).dims2()?;
            if np != n {
                return Err(CoreError::Shape(format!("concat_rows cols {} vs {}", np, n)));
            }
            rows += mp;
            data.extend_from_slice(&self.value(p).data);
        }
        let needs = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(vec![rows, n], data)?,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        if start + len > n {
            return Err(CoreError::Shape(format!(
                "slice_cols {}..{} of {}",
                start,
                start + len,
                n
            )));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&self.value(a).row(i)[start..start + len]);
        }
        let needs = self.ng(a);
        Ok(self.push(
            Tensor::new(vec![m, len], data)?,
            Op::SliceCols { a, start, len },
            needs,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(CoreError::InvalidArgument("concat of nothing".into()));
        }
        let (m, _) = self.value(parts[0]).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (mp, np) = self.value(p).dims2()?;
            if mp != m {
                return Err(CoreError::Shape(format!("concat_cols rows {} vs {}", mp, m)));
            }
            widths.push(np);
            total += np;
        }
        let mut data = vec![R::ZERO; m * total];
        for i in 0..m {
            let mut off = 0;
            for (pi, &p) in parts.iter().enumerate() {
                let row = self.value(p).row(i);
                data[i * total + off..i * total + off + widths[pi]].copy_from_slice(row);
                off += widths[pi];
            }
        }
        let needs = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(vec![m, total], data)?,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let mut sum = R::ZERO;
        for &x in &self.value(a).data {
            sum += x;
        }
        let mean = sum / R::from_usize(self.value(a).numel());
        let needs = self.ng(a);
        self.push(Tensor::scalar(mean), Op::MeanAll { a }, needs)
    }

    /// `mean((a - target)^2)` against a constant target.
    pub fn mse_to_const(&mut self, a: NodeId, target: Rc<Tensor<R>>) -> Result<NodeId> {
        if self.value(a).shape != target.shape {
            return Err(CoreError::Shape(format!(
                "mse: {:?} vs {:?}",
                self.value(a).shape,
                target.shape
            )));
        }
        let mut sum = R::ZERO;
        for (&x, &t) in self.value(a).data.iter().zip(&target.data) {
            let d = x - t;
            sum += d * d;
        }
        let mean = sum / R::from_usize(self.value(a).numel());
        let needs = self.ng(a);
        Ok(self.push(
            Tensor::scalar(mean),
            Op::MseToConst { a, target },
            needs,
        ))
    }

    /// Negative mean log-likelihood of per-row targets over log-probabilities.
    pub fn nll_rows(&mut self, logp: NodeId, targets: Rc<Vec<usize>>) -> Result<NodeId> {
        let (m, n) = self.value(logp).dims2()?;
        if targets.len() != m {
            return Err(CoreError::Shape(format!(
                "nll: {} targets vs {} rows",
                targets.len(),
                m
            )));
        }
        let mut sum = R::ZERO;
        for (i, &t) in targets.iter().enumerate() {
            if t >= n {
                return Err(CoreError::Shape(format!("nll target {} of {}", t, n)));
            }
            sum += self.value(logp).row(i)[t];
        }
        let v = -(sum / R::from_usize(m));
        let needs = self.ng(logp);
        Ok(self.push(Tensor::scalar(v), Op::NllRows { a: logp, targets }, needs))
    }

    /// Identity value; blocks gradient flow.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).clone();
        self.push(value, Op::Detach, false)
    }

    /// Run reverse-mode accumulation from a scalar output.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<R>> {
        if self.value(loss).numel() != 1 {
            return Err(CoreError::InvalidArgument(
                "backward seed must be scalar".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<R>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![R::ONE]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            self.accumulate(NodeId(id), &gout, &mut grads);
            grads[id] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn add_grad(&self, grads: &mut [Option<Vec<R>>], id: NodeId, contrib: &[R]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let slot = &mut grads[id.0];
        match slot {
            Some(g) => {
                for (gi, &c) in g.iter_mut().zip(contrib) {
                    *gi += c;
                }
            }
            None => {
                *slot = Some(contrib.to_vec());
            }
        }
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate(&self, id: NodeId, gout: &[R], grads: &mut [Option<Vec<R>>]) {
        let node = &self.nodes[id.0];
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.ng(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![R::ZERO; m * k];
                    matmul_nt(gout, &self.value(*b).data, m, n, k, &mut da);
                    self.add_grad(grads, *a, &da);
                }
                if self.ng(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![R::ZERO; k * n];
                    matmul_tn(&self.value(*a).data, gout, m, k, n, &mut db);
                    self.add_grad(grads, *b, &db);
                }
            }
            Op::MatmulNt { a, b } => {
                // C[m,n] = A[m,k] · B[n,k]ᵀ
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if self.ng(*a) {
                    // dA = dC · B
                    let mut da = vec![R::ZERO; m * k];
                    matmul_nn(gout, &self.value(*b).data, m, n, k, &mut da);
                    self.add_grad(grads, *a, &da);
                }
                if self.ng(*b) {
                    // dB = dCᵀ · A
                    let mut db = vec![R::ZERO; n * k];
                    matmul_tn(gout, &self.value(*a).data, m, n, k, &mut db);
                    self.add_grad(grads, *b, &db);
                }
            }
            Op::Add { a, b } => {
                self.add_grad(grads, *a, gout);
                self.add_grad(grads, *b, gout);
            }
            Op::Sub { a, b } => {
                self.add_grad(grads, *a, gout);
                if self.ng(*b) {
                    let neg: Vec<R> = gout.iter().map(|&g| -g).collect();
                    self.add_grad(grads, *b, &neg);
                }
            }
            Op::Mul { a, b } => {
                if self.ng(*a) {
                    let da = zip_map(gout, &self.value(*b).data, |g, y| g * y);
                    self.add_grad(grads, *a, &da);
                }
                if self.ng(*b) {
                    let db = zip_map(gout, &self.value(*a).data, |g, x| g * x);
                    self.add_grad(grads, *b, &db);
                }
            }
            Op::Neg { a } => {
                let da: Vec<R> = gout.iter().map(|&g| -g).collect();
                self.add_grad(grads, *a, &da);
            }
            Op::Scale { a, c } => {
                let da: Vec<R> = gout.iter().map(|&g| g * *c).collect();
                self.add_grad(grads, *a, &da);
            }
            Op::AffineConst { a, scale } => {
                let da: Vec<R> = gout.iter().map(|&g| g * *scale).collect();
                self.add_grad(grads, *a, &da);
            }
            Op::AddRow { a, b } => {
                self.add_grad(grads, *a, gout);
                if self.ng(*b) {
                    let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let mut db = vec![R::ZERO; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += gout[i * n + j];
                        }
                    }
                    self.add_grad(grads, *b, &db);
                }
            }
            Op::MulRow { a, b } => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                if self.ng(*a) {
                    let brow = &self.value(*b).data;
                    let mut da = vec![R::ZERO; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = gout[i * n + j] * brow[j];
                        }
                    }
                    self.add_grad(grads, *a, &da);
                }
                if self.ng(*b) {
                    let mut db = vec![R::ZERO; n];
                    let aval = &self.value(*a).data;
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += gout[i * n + j] * aval[i * n + j];
                        }
                    }
                    self.add_grad(grads, *b, &db);
                }
            }
            Op::Silu { a } => {
                let da = zip_map(gout, &self.value(*a).data, |g, x| {
                    let s = sigmoid(x);
                    g * (s + x * s * (R::ONE - s))
                });
                self.add_grad(grads, *a, &da);
            }
            Op::RmsNorm { a, gain, inv_rms } => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let g = &self.value(*gain).data;
                let x = &self.value(*a).data;
                if self.ng(*a) {
                    let mut da = vec![R::ZERO; m * n];
                    let nr = R::from_usize(n);
                    for i in 0..m {
                        let inv = inv_rms[i];
                        // dx = inv * (gy - x * inv^2 * <gy, x> / n)
                        let mut dot = R::ZERO;
                        for j in 0..n {
                            dot += gout[i * n + j] * g[j] * x[i * n + j];
                        }
                        let coef = inv * inv * dot / nr;
                        for j in 0..n {
                            da[i * n + j] = inv * (gout[i * n + j] * g[j] - x[i * n + j] * coef);
                        }
                    }
                    self.add_grad(grads, *a, &da);
                }
                if self.ng(*gain) {
                    let mut dg = vec![R::ZERO; n];
                    for i in 0..m {
                        let inv = inv_rms[i];
                        for j in 0..n {
                            dg[j] += gout[i * n + j] * x[i * n + j] * inv;
                        }
                    }
                    self.add_grad(grads, *gain, &dg);
                }
            }
            Op::MaskedSoftmax { a, mask } => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let p = &node.value.data;
                let mut da = vec![R::ZERO; m * n];
                for i in 0..m {
                    let mut dot = R::ZERO;
                    for j in 0..n {
                        dot += gout[i * n + j] * p[i * n + j];
                    }
                    for j in 0..n {
                        if mask[i * n + j] {
                            da[i * n + j] = p[i * n + j] * (gout[i * n + j] - dot);
                        }
                    }
                }
                self.add_grad(grads, *a, &da);
            }
            Op::LogSoftmax { a } => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let logp = &node.value.data;
                let mut da = vec![R::ZERO; m * n];
                for i in 0..m {
                    let mut gsum = R::ZERO;
                    for j in 0..n {
                        gsum += gout[i * n + j];
                    }
                    for j in 0..n {
                        da[i * n + j] = gout[i * n + j] - logp[i * n + j].exp() * gsum;
                    }
                }
                self.add_grad(grads, *a, &da);
            }
            Op::Rope { a, cos, sin } => {
                // Inverse rotation.
                let (m, d) = (self.shape(*a)[0], self.shape(*a)[1]);
                let half = d / 2;
                let mut da = vec![R::ZERO; m * d];
                for i in 0..m {
                    for p in 0..half {
                        let (c, s) = (cos[i * half + p], sin[i * half + p]);
                        let (g0, g1) = (gout[i * d + 2 * p], gout[i * d + 2 * p + 1]);
                        da[i * d + 2 * p] = g0 * c + g1 * s;
                        da[i * d + 2 * p + 1] = -g0 * s + g1 * c;
                    }
                }
                self.add_grad(grads, *a, &da);
            }
            Op::GatherRows { a, idx } => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut da = vec![R::ZERO; m * n];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        da[i * n + j] += gout[r * n + j];
                    }
                }
                self.add_grad(grads, *a, &da);
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.add_grad(grads, p, &gout[off..off + len]);
                    off += len;
                }
            }
            Op::SliceCols { a, start, len } => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut da = vec![R::ZERO; m * n];
                for i in 0..m {
                    for j in 0..*len {
                        da[i * n + start + j] = gout[i * len + j];
                    }
                }
                self.add_grad(grads, *a, &da);
            }
            Op::ConcatCols { parts } => {
                let m = self.shape(id)[0];
                let total = self.shape(id)[1];
                let mut off = 0;
                for &p in parts {
                    let np = self.shape(p)[1];
                    if self.ng(p) {
                        let mut dp = vec![R::ZERO; m * np];
                        for i in 0..m {
                            dp[i * np..(i + 1) * np]
                                .copy_from_slice(&gout[i * total + off..i * total + off + np]);
                        }
                        self.add_grad(grads, p, &dp);
                    }
                    off += np;
                }
            }
            Op::MeanAll { a } => {
                let n = self.value(*a).numel();
                let g = gout[0] / R::from_usize(n);
                let da = vec![g; n];
                self.add_grad(grads, *a, &da);
            }
            Op::MseToConst { a, target } => {
                let n = self.value(*a).numel();
                let coef = gout[0] * R::from_f64(2.0) / R::from_usize(n);
                let da = zip_map(&self.value(*a).data, &target.data, |x, t| coef * (x - t));
                self.add_grad(grads, *a, &da);
            }
            Op::NllRows { a, targets } => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let coef = -gout[0] / R::from_usize(m);
                let mut da = vec![R::ZERO; m * n];
                for (i, &t) in targets.iter().enumerate() {
                    da[i * n + t] = coef;
                }
                self.add_grad(grads, *a, &da);
            }
            Op::Detach => {}
        }
    }
}

#[inline]
fn sigmoid<R: Real>(x: R) -> R {
    R::ONE / (R::ONE + (-x).exp())
}

fn zip_map<R: Real>(a: &[R], b: &[R], f: impl Fn(R, R) -> R) -> Vec<R> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// `c[m,n] += a[m,k] · b[k,n]`, row-major, fixed ikj order.
pub fn matmul_nn<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize, c: &mut [R]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`.
pub fn matmul_nt<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize, c: &mut [R]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = R::ZERO;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            crow[j] += acc;
        }
    }
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`.
pub fn matmul_tn<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize, c: &mut [R]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}
