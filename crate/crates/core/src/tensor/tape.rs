//! Append-only tape of recorded operations. Node ids are assigned in
//! creation order, so the list is always topologically sorted and the
//! backward pass is a single reverse sweep that visits each node once.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::conv::{self, ConvGeom, ConvTGeom};
use super::{Result, Scalar, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AddKind {
    /// Identical shapes.
    Same,
    /// (batch, n) + (n,)
    Row,
    /// (batch, c, h, w) + (c,)
    Channel,
}

#[derive(Clone, Debug)]
enum Rec<S: Scalar> {
    Leaf,
    Relu { x: NodeId },
    Tanh { x: NodeId },
    Sigmoid { x: NodeId },
    Add { a: NodeId, b: NodeId, kind: AddKind },
    Matmul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Conv2d { x: NodeId, w: NodeId, stride: usize, pad: usize },
    ConvT2d { x: NodeId, w: NodeId, stride: usize, pad: usize },
    Reshape { x: NodeId },
    Concat { parts: Vec<NodeId>, axis: usize },
    Dropout { x: NodeId, mask: Vec<S> },
    BatchMean { x: NodeId },
    BceLoss { p: NodeId, t: NodeId },
    MseLoss { a: NodeId, b: NodeId },
    Gram { x: NodeId },
    Scale { x: NodeId, factor: S },
}

struct Node<S: Scalar> {
    shape: Vec<usize>,
    value: Vec<S>,
    grad: Option<Vec<S>>,
    /// True when a gradient must flow through this node (leaf with
    /// requires_grad, or any input requiring one).
    requires: bool,
    rec: Rec<S>,
}

/// Parameter-sized configuration for [`Tape::forward_op`], the uniform
/// dispatch entry used by the gradient-check suite.
#[derive(Clone, Debug)]
pub enum OpSpec {
    Matmul,
    Add,
    Relu,
    Tanh,
    Sigmoid,
    Reshape { shape: Vec<usize> },
    Concat { axis: usize },
    Dropout { rate: f64, train: bool, seed: u64 },
    Conv2d { stride: usize, pad: usize },
    ConvT2d { stride: usize, pad: usize, out_pad: usize },
    BatchMean,
    BceLoss,
    MseLoss,
    Gram,
    Scale { factor: f64 },
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    consumed: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

const BCE_EPS: f64 = 1e-7;

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor as a leaf, honoring its requires_grad flag.
    pub fn leaf(&mut self, t: &Tensor<S>) -> NodeId {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Rec::Leaf)
    }

    /// Insert a tensor as a frozen leaf (gradients flow through it but are
    /// not retained for it).
    pub fn leaf_frozen(&mut self, t: &Tensor<S>) -> NodeId {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Rec::Leaf)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[S] {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Copy the gradient of a bound leaf into the original tensor.
    pub fn export_grad(&self, id: NodeId, dst: &mut Tensor<S>) -> Result<()> {
        let node = &self.nodes[id.0];
        if node.shape != dst.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "export_grad",
                lhs: node.shape.clone(),
                rhs: dst.shape().to_vec(),
            });
        }
        dst.set_grad(node.grad.clone());
        Ok(())
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, requires: bool, rec: Rec<S>) -> NodeId {
        self.nodes.push(Node { shape, value, grad: None, requires, rec });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires
    }

    fn check_finite(&self, id: NodeId, op: &'static str) -> Result<NodeId> {
        if self.nodes[id.0].value.iter().all(|v| v.is_finite()) {
            Ok(id)
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    // ---- ops -------------------------------------------------------------

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v: Vec<S> =
            self.value(x).iter().map(|&a| if a > S::ZERO { a } else { S::ZERO }).collect();
        let id = self.push(self.shape(x).to_vec(), v, self.requires(x), Rec::Relu { x });
        self.check_finite(id, "relu")
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let v: Vec<S> = self.value(x).iter().map(|a| a.tanh()).collect();
        let id = self.push(self.shape(x).to_vec(), v, self.requires(x), Rec::Tanh { x });
        self.check_finite(id, "tanh")
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let one = S::ONE;
        let v: Vec<S> = self.value(x).iter().map(|&a| one / (one + (-a).exp())).collect();
        let id = self.push(self.shape(x).to_vec(), v, self.requires(x), Rec::Sigmoid { x });
        self.check_finite(id, "sigmoid")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let kind = if sa == sb {
            AddKind::Same
        } else if sb.len() == 1 && sa.len() == 2 && sa[1] == sb[0] {
            AddKind::Row
        } else if sb.len() == 1 && sa.len() == 4 && sa[1] == sb[0] {
            AddKind::Channel
        } else {
            return Err(TensorError::ShapeMismatch { op: "add", lhs: sa, rhs: sb });
        };
        let av = self.value(a);
        let bv = self.value(b);
        let v: Vec<S> = match kind {
            AddKind::Same => av.iter().zip(bv).map(|(&x, &y)| x + y).collect(),
            AddKind::Row => {
                let n = sb[0];
                av.iter().enumerate().map(|(i, &x)| x + bv[i % n]).collect()
            }
            AddKind::Channel => {
                let hw = sa[2] * sa[3];
                let c = sa[1];
                av.iter().enumerate().map(|(i, &x)| x + bv[(i / hw) % c]).collect()
            }
        };
        let req = self.requires(a) || self.requires(b);
        let id = self.push(sa, v, req, Rec::Add { a, b, kind });
        self.check_finite(id, "add")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let v = conv::matmul(self.value(a), self.value(b), m, k, n);
        let req = self.requires(a) || self.requires(b);
        let id = self.push(vec![m, n], v, req, Rec::Matmul { a, b, m, k, n });
        self.check_finite(id, "matmul")
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: sx, rhs: sw });
        }
        if stride < 1 {
            return Err(TensorError::Invalid { op: "conv2d", msg: "stride must be >= 1".into() });
        }
        let k = sw[2];
        let oh = conv::conv_out_dim(sx[2], k, stride, pad);
        let ow = conv::conv_out_dim(sx[3], k, stride, pad);
        let (oh, ow) = match (oh, ow) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: sx, rhs: sw }),
        };
        let g = ConvGeom {
            batch: sx[0],
            c_in: sx[1],
            h: sx[2],
            w: sx[3],
            c_out: sw[0],
            k,
            stride,
            pad,
            oh,
            ow,
        };
        let v = conv::conv2d_fwd(self.value(x), self.value(w), &g);
        let req = self.requires(x) || self.requires(w);
        let id = self.push(vec![sx[0], sw[0], oh, ow], v, req, Rec::Conv2d { x, w, stride, pad });
        self.check_finite(id, "conv2d")
    }

    pub fn conv2d_transposed(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] || sw[2] != sw[3] {
            return Err(TensorError::ShapeMismatch { op: "conv2d_transposed", lhs: sx, rhs: sw });
        }
        if stride < 1 || out_pad >= stride {
            return Err(TensorError::Invalid {
                op: "conv2d_transposed",
                msg: format!("need stride >= 1 and out_pad < stride, got {stride}/{out_pad}"),
            });
        }
        let k = sw[2];
        let oh = conv::conv_transposed_out_dim(sx[2], k, stride, pad, out_pad);
        let ow = conv::conv_transposed_out_dim(sx[3], k, stride, pad, out_pad);
        let (oh, ow) = match (oh, ow) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d_transposed",
                    lhs: sx,
                    rhs: sw,
                })
            }
        };
        let g = ConvTGeom {
            batch: sx[0],
            c_in: sx[1],
            h: sx[2],
            w: sx[3],
            c_out: sw[1],
            k,
            stride,
            pad,
            oh,
            ow,
        };
        let v = conv::conv_transposed2d_fwd(self.value(x), self.value(w), &g);
        let req = self.requires(x) || self.requires(w);
        let id =
            self.push(vec![sx[0], sw[1], oh, ow], v, req, Rec::ConvT2d { x, w, stride, pad });
        self.check_finite(id, "conv2d_transposed")
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let v = self.value(x).to_vec();
        Ok(self.push(shape, v, self.requires(x), Rec::Reshape { x }))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::Invalid { op: "concat", msg: "no inputs".into() });
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range for rank {}", first.len()),
            });
        }
        let mut out_shape = first.clone();
        for &p in &parts[1..] {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let mut v = Vec::with_capacity(out_shape.iter().product());
        let chunks: Vec<usize> =
            parts.iter().map(|&p| self.shape(p)[axis..].iter().product()).collect();
        for o in 0..outer {
            for (pi, &p) in parts.iter().enumerate() {
                let c = chunks[pi];
                v.extend_from_slice(&self.value(p)[o * c..(o + 1) * c]);
            }
        }
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(out_shape, v, req, Rec::Concat { parts: parts.to_vec(), axis }))
    }

    /// Inverted dropout. In train mode each kept element is scaled by
    /// 1/(1-rate); in eval mode this is the identity.
    pub fn dropout(&mut self, x: NodeId, rate: f64, train: bool, seed: u64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Invalid {
                op: "dropout",
                msg: format!("rate must lie in [0, 1), got {rate}"),
            });
        }
        let n = self.value(x).len();
        let mask: Vec<S> = if train {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let keep = S::from_f64(1.0 / (1.0 - rate));
            (0..n)
                .map(|_| if rng.gen::<f64>() < rate { S::ZERO } else { keep })
                .collect()
        } else {
            vec![S::ONE; n]
        };
        let v: Vec<S> = self.value(x).iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        Ok(self.push(self.shape(x).to_vec(), v, self.requires(x), Rec::Dropout { x, mask }))
    }

    /// Mean over every element, yielding a scalar.
    pub fn batch_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).len();
        let mut acc = S::ZERO;
        for &v in self.value(x) {
            acc += v;
        }
        let v = acc / S::from_f64(n as f64);
        let id = self.push(vec![1], vec![v], self.requires(x), Rec::BatchMean { x });
        self.check_finite(id, "batch_mean")
    }

    /// Mean binary cross-entropy between probabilities `p` and targets `t`,
    /// with probabilities clamped away from {0, 1}.
    pub fn bce_loss(&mut self, p: NodeId, t: NodeId) -> Result<NodeId> {
        if self.shape(p) != self.shape(t) {
            return Err(TensorError::ShapeMismatch {
                op: "bce_loss",
                lhs: self.shape(p).to_vec(),
                rhs: self.shape(t).to_vec(),
            });
        }
        let n = self.value(p).len();
        let mut acc = 0.0f64;
        for (&pv, &tv) in self.value(p).iter().zip(self.value(t)) {
            let pc = pv.to_f64().clamp(BCE_EPS, 1.0 - BCE_EPS);
            let tv = tv.to_f64();
            acc -= tv * pc.ln() + (1.0 - tv) * (1.0 - pc).ln();
        }
        let v = S::from_f64(acc / n as f64);
        let req = self.requires(p) || self.requires(t);
        let id = self.push(vec![1], vec![v], req, Rec::BceLoss { p, t });
        self.check_finite(id, "bce_loss")
    }

    /// Mean squared error over every element.
    pub fn mse_loss(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "mse_loss",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let n = self.value(a).len();
        let mut acc = S::ZERO;
        for (&x, &y) in self.value(a).iter().zip(self.value(b)) {
            let d = x - y;
            acc += d * d;
        }
        let v = acc / S::from_f64(n as f64);
        let req = self.requires(a) || self.requires(b);
        let id = self.push(vec![1], vec![v], req, Rec::MseLoss { a, b });
        self.check_finite(id, "mse_loss")
    }

    /// Per-sample Gram matrix of a (b, c, h, w) feature map, normalized by
    /// c·h·w: G[b][i][j] = sum_hw f_i f_j / (c·h·w).
    pub fn gram(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] * s[3] == 0 {
            return Err(TensorError::Invalid {
                op: "gram",
                msg: format!("expected (b, c, h, w) with h*w >= 1, got {s:?}"),
            });
        }
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let norm = S::from_f64(1.0 / (c * hw) as f64);
        let mut v = vec![S::ZERO; b * c * c];
        for bi in 0..b {
            let f = &self.value(x)[bi * c * hw..(bi + 1) * c * hw];
            let g = conv::matmul_nt(f, f, c, hw, c);
            for (dst, gv) in v[bi * c * c..(bi + 1) * c * c].iter_mut().zip(g) {
                *dst = gv * norm;
            }
        }
        let id = self.push(vec![b, c, c], v, self.requires(x), Rec::Gram { x });
        self.check_finite(id, "gram")
    }

    /// Multiply every element by a fixed constant.
    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let f = S::from_f64(factor);
        let v: Vec<S> = self.value(x).iter().map(|&a| a * f).collect();
        let id = self.push(self.shape(x).to_vec(), v, self.requires(x), Rec::Scale { x, factor: f });
        self.check_finite(id, "scale")
    }

    /// Uniform dispatch over the op set; used by the gradient-check suite.
    pub fn forward_op(&mut self, spec: &OpSpec, inputs: &[NodeId]) -> Result<NodeId> {
        let need = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(TensorError::Invalid {
                    op: "forward_op",
                    msg: format!("expected {n} inputs, got {}", inputs.len()),
                });
            }
            Ok(())
        };
        match spec {
            OpSpec::Matmul => {
                need(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpSpec::Add => {
                need(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpSpec::Relu => {
                need(1)?;
                self.relu(inputs[0])
            }
            OpSpec::Tanh => {
                need(1)?;
                self.tanh(inputs[0])
            }
            OpSpec::Sigmoid => {
                need(1)?;
                self.sigmoid(inputs[0])
            }
            OpSpec::Reshape { shape } => {
                need(1)?;
                self.reshape(inputs[0], shape.clone())
            }
            OpSpec::Concat { axis } => self.concat(inputs, *axis),
            OpSpec::Dropout { rate, train, seed } => {
                need(1)?;
                self.dropout(inputs[0], *rate, *train, *seed)
            }
            OpSpec::Conv2d { stride, pad } => {
                need(2)?;
                self.conv2d(inputs[0], inputs[1], *stride, *pad)
            }
            OpSpec::ConvT2d { stride, pad, out_pad } => {
                need(2)?;
                self.conv2d_transposed(inputs[0], inputs[1], *stride, *pad, *out_pad)
            }
            OpSpec::BatchMean => {
                need(1)?;
                self.batch_mean(inputs[0])
            }
            OpSpec::BceLoss => {
                need(2)?;
                self.bce_loss(inputs[0], inputs[1])
            }
            OpSpec::MseLoss => {
                need(2)?;
                self.mse_loss(inputs[0], inputs[1])
            }
            OpSpec::Gram => {
                need(1)?;
                self.gram(inputs[0])
            }
            OpSpec::Scale { factor } => {
                need(1)?;
                self.scale(inputs[0], *factor)
            }
        }
    }

    // ---- backward --------------------------------------------------------

    fn grad_buf(&mut self, id: NodeId) -> &mut Vec<S> {
        let numel = self.nodes[id.0].value.len();
        self.nodes[id.0].grad.get_or_insert_with(|| vec![S::ZERO; numel])
    }

    fn add_grad(&mut self, id: NodeId, g: &[S]) {
        if !self.nodes[id.0].requires {
            return;
        }
        let buf = self.grad_buf(id);
        for (b, &v) in buf.iter_mut().zip(g) {
            *b += v;
        }
    }

    /// Reverse sweep from a scalar loss. May be called once per tape.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.consumed {
            return Err(TensorError::BackwardConsumed);
        }
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(TensorError::NonScalarLoss { shape: loss_node.shape.clone() });
        }
        self.consumed = true;
        if !self.nodes[loss.0].requires {
            return Ok(());
        }
        *self.grad_buf(loss) = vec![S::ONE];
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires || self.nodes[i].grad.is_none() {
                continue;
            }
            let g = self.nodes[i].grad.clone().expect("grad present");
            let rec = self.nodes[i].rec.clone();
            match rec {
                Rec::Leaf => {}
                Rec::Relu { x } => {
                    let dg: Vec<S> = self.nodes[x.0]
                        .value
                        .iter()
                        .zip(&g)
                        .map(|(&xv, &gv)| if xv > S::ZERO { gv } else { S::ZERO })
                        .collect();
                    self.add_grad(x, &dg);
                }
                Rec::Tanh { x } => {
                    let dg: Vec<S> = self.nodes[i]
                        .value
                        .iter()
                        .zip(&g)
                        .map(|(&y, &gv)| gv * (S::ONE - y * y))
                        .collect();
                    self.add_grad(x, &dg);
                }
                Rec::Sigmoid { x } => {
                    let dg: Vec<S> = self.nodes[i]
                        .value
                        .iter()
                        .zip(&g)
                        .map(|(&y, &gv)| gv * y * (S::ONE - y))
                        .collect();
                    self.add_grad(x, &dg);
                }
                Rec::Add { a, b, kind } => {
                    self.add_grad(a, &g);
                    if self.nodes[b.0].requires {
                        let db: Vec<S> = match kind {
                            AddKind::Same => g.clone(),
                            AddKind::Row => {
                                let n = self.nodes[b.0].value.len();
                                let mut acc = vec![S::ZERO; n];
                                for (i, &gv) in g.iter().enumerate() {
                                    acc[i % n] += gv;
                                }
                                acc
                            }
                            AddKind::Channel => {
                                let shape = &self.nodes[i].shape;
                                let (c, hw) = (shape[1], shape[2] * shape[3]);
                                let mut acc = vec![S::ZERO; c];
                                for (i, &gv) in g.iter().enumerate() {
                                    acc[(i / hw) % c] += gv;
                                }
                                acc
                            }
                        };
                        self.add_grad(b, &db);
                    }
                }
                Rec::Matmul { a, b, m, k, n } => {
                    if self.nodes[a.0].requires {
                        let da = conv::matmul_nt(&g, &self.nodes[b.0].value, m, n, k);
                        self.add_grad(a, &da);
                    }
                    if self.nodes[b.0].requires {
                        let db = conv::matmul_tn(&self.nodes[a.0].value, &g, k, m, n);
                        self.add_grad(b, &db);
                    }
                }
                Rec::Conv2d { x, w, stride, pad } => {
                    let sx = self.nodes[x.0].shape.clone();
                    let sw = self.nodes[w.0].shape.clone();
                    let so = self.nodes[i].shape.clone();
                    let geom = ConvGeom {
                        batch: sx[0],
                        c_in: sx[1],
                        h: sx[2],
                        w: sx[3],
                        c_out: sw[0],
                        k: sw[2],
                        stride,
                        pad,
                        oh: so[2],
                        ow: so[3],
                    };
                    if self.nodes[x.0].requires {
                        let dx = conv::conv2d_bwd_input(&g, &self.nodes[w.0].value, &geom);
                        self.add_grad(x, &dx);
                    }
                    if self.nodes[w.0].requires {
                        let dw = conv::conv2d_bwd_weight(&self.nodes[x.0].value, &g, &geom);
                        self.add_grad(w, &dw);
                    }
                }
                Rec::ConvT2d { x, w, stride, pad } => {
                    let sx = self.nodes[x.0].shape.clone();
                    let sw = self.nodes[w.0].shape.clone();
                    let so = self.nodes[i].shape.clone();
                    let geom = ConvTGeom {
                        batch: sx[0],
                        c_in: sx[1],
                        h: sx[2],
                        w: sx[3],
                        c_out: sw[1],
                        k: sw[2],
                        stride,
                        pad,
                        oh: so[2],
                        ow: so[3],
                    };
                    if self.nodes[x.0].requires {
                        let dx = conv::conv_transposed2d_bwd_input(&g, &self.nodes[w.0].value, &geom);
                        self.add_grad(x, &dx);
                    }
                    if self.nodes[w.0].requires {
                        let dw =
                            conv::conv_transposed2d_bwd_weight(&self.nodes[x.0].value, &g, &geom);
                        self.add_grad(w, &dw);
                    }
                }
                Rec::Reshape { x } => self.add_grad(x, &g),
                Rec::Concat { parts, axis } => {
                    let out_shape = self.nodes[i].shape.clone();
                    let outer: usize = out_shape[..axis].iter().product();
                    let chunks: Vec<usize> =
                        parts.iter().map(|&p| self.nodes[p.0].shape[axis..].iter().product()).collect();
                    let total: usize = chunks.iter().sum();
                    for (pi, &p) in parts.iter().enumerate() {
                        if !self.nodes[p.0].requires {
                            continue;
                        }
                        let c = chunks[pi];
                        let offset: usize = chunks[..pi].iter().sum();
                        let mut dp = Vec::with_capacity(outer * c);
                        for o in 0..outer {
                            let base = o * total + offset;
                            dp.extend_from_slice(&g[base..base + c]);
                        }
                        self.add_grad(p, &dp);
                    }
                }
                Rec::Dropout { x, mask } => {
                    let dg: Vec<S> = g.iter().zip(&mask).map(|(&gv, &m)| gv * m).collect();
                    self.add_grad(x, &dg);
                }
                Rec::BatchMean { x } => {
                    let n = self.nodes[x.0].value.len();
                    let gv = g[0] / S::from_f64(n as f64);
                    let dg = vec![gv; n];
                    self.add_grad(x, &dg);
                }
                Rec::BceLoss { p, t } => {
                    let n = self.nodes[p.0].value.len();
                    let scale = g[0].to_f64() / n as f64;
                    if self.nodes[p.0].requires {
                        let dp: Vec<S> = self.nodes[p.0]
                            .value
                            .iter()
                            .zip(&self.nodes[t.0].value)
                            .map(|(&pv, &tv)| {
                                let pc = pv.to_f64().clamp(BCE_EPS, 1.0 - BCE_EPS);
                                S::from_f64(scale * (pc - tv.to_f64()) / (pc * (1.0 - pc)))
                            })
                            .collect();
                        self.add_grad(p, &dp);
                    }
                    if self.nodes[t.0].requires {
                        let dt: Vec<S> = self.nodes[p.0]
                            .value
                            .iter()
                            .map(|&pv| {
                                let pc = pv.to_f64().clamp(BCE_EPS, 1.0 - BCE_EPS);
                                S::from_f64(scale * ((1.0 - pc).ln() - pc.ln()))
                            })
                            .collect();
                        self.add_grad(t, &dt);
                    }
                }
                Rec::MseLoss { a, b } => {
                    let n = self.nodes[a.0].value.len();
                    let scale = g[0] / S::from_f64(n as f64 / 2.0);
                    let diff: Vec<S> = self.nodes[a.0]
                        .value
                        .iter()
                        .zip(&self.nodes[b.0].value)
                        .map(|(&x, &y)| (x - y) * scale)
                        .collect();
                    if self.nodes[a.0].requires {
                        self.add_grad(a, &diff);
                    }
                    if self.nodes[b.0].requires {
                        let neg: Vec<S> = diff.iter().map(|&d| -d).collect();
                        self.add_grad(b, &neg);
                    }
                }
                Rec::Gram { x } => {
                    // dF = (G + Gᵀ) F / (c·h·w)
                    let sx = self.nodes[x.0].shape.clone();
                    let (b, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
                    let norm = S::from_f64(1.0 / (c * hw) as f64);
                    let mut dx = vec![S::ZERO; b * c * hw];
                    for bi in 0..b {
                        let gg = &g[bi * c * c..(bi + 1) * c * c];
                        let f = &self.nodes[x.0].value[bi * c * hw..(bi + 1) * c * hw];
                        let mut sym = vec![S::ZERO; c * c];
                        for r in 0..c {
                            for s2 in 0..c {
                                sym[r * c + s2] = (gg[r * c + s2] + gg[s2 * c + r]) * norm;
                            }
                        }
                        let df = conv::matmul(&sym, f, c, c, hw);
                        dx[bi * c * hw..(bi + 1) * c * hw].copy_from_slice(&df);
                    }
                    self.add_grad(x, &dx);
                }
                Rec::Scale { x, factor } => {
                    let dg: Vec<S> = g.iter().map(|&gv| gv * factor).collect();
                    self.add_grad(x, &dg);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f32>) -> Tensor<f32> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn relu_matches_definition() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![3], vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![1], vec![0.0]));
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y), &[0.5]);
    }

    #[test]
    fn conv_transposed_hits_table_doubling() {
        // 4x4 input, 5x5 filter, stride 2, pad 2, out-pad 1 -> 8x8.
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::zeros(vec![1, 1, 4, 4]));
        let w = tape.leaf(&Tensor::zeros(vec![1, 1, 5, 5]));
        let y = tape.conv2d_transposed(x, w, 2, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 8, 8]);
    }

    #[test]
    fn mse_gradient_matches_hand_calculus() {
        // loss = mse(w*x, y), w=1, x=2, y=0 -> dL/dw = 2(wx-y)x = 8.
        let mut tape = Tape::new();
        let w = tape.leaf(&t(vec![1, 1], vec![1.0]).with_grad());
        let x = tape.leaf(&t(vec![1, 1], vec![2.0]));
        let y = tape.leaf(&t(vec![1, 1], vec![0.0]));
        let wx = tape.matmul(w, x).unwrap();
        let loss = tape.mse_loss(wx, y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[8.0]);
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![1], vec![2.0]).with_grad());
        let y = tape.relu(x).unwrap();
        let loss = tape.batch_mean(y).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(TensorError::BackwardConsumed)));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![2], vec![1.0, 2.0]).with_grad());
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(TensorError::NonScalarLoss { .. })));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(&Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(&Tensor::zeros(vec![4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn non_finite_output_is_flagged() {
        let mut tape = Tape::new();
        let p = tape.leaf(&t(vec![1], vec![f32::NAN]));
        let q = tape.leaf(&t(vec![1], vec![0.5]));
        assert!(matches!(tape.mse_loss(p, q), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![4], vec![1.0, -2.0, 3.0, -4.0]));
        let y = tape.dropout(x, 0.5, false, 7).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn dropout_train_scales_kept_elements() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![1000], vec![1.0; 1000]));
        let y = tape.dropout(x, 0.25, true, 99).unwrap();
        let kept = tape.value(y).iter().filter(|v| **v > 0.0).count();
        assert!((kept as f64 - 750.0).abs() < 60.0);
        for &v in tape.value(y) {
            assert!(v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-6);
        }
    }

    #[test]
    fn concat_axis1_roundtrip() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).with_grad());
        let b = tape.leaf(&t(vec![2, 1], vec![5.0, 6.0]).with_grad());
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 3]);
        assert_eq!(tape.value(c), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let m = tape.batch_mean(c).unwrap();
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(b).unwrap().len(), 2);
    }

    #[test]
    fn gram_of_ones_matches_normalizer() {
        // All-one features, c=2, h=w=1: inner products 1, normalizer c·h·w=2.
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![1, 2, 1, 1], vec![1.0, 1.0]));
        let g = tape.gram(x).unwrap();
        assert_eq!(tape.value(g), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn gram_orthogonal_channels_have_zero_offdiagonal() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![1, 2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let g = tape.gram(x).unwrap();
        let v = tape.value(g);
        assert_eq!(v[1], 0.0);
        assert_eq!(v[2], 0.0);
    }

    #[test]
    fn conv_and_transposed_are_shape_inverse() {
        // The stride-2 pad-2 5x5 configs used by the generators double, the
        // matching conv halves back.
        for s in [8usize, 16, 32] {
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(&Tensor::zeros(vec![1, 2, s, s]));
            let wt = tape.leaf(&Tensor::zeros(vec![2, 3, 5, 5]));
            let up = tape.conv2d_transposed(x, wt, 2, 2, 1).unwrap();
            assert_eq!(tape.shape(up), &[1, 3, 2 * s, 2 * s]);
            let wc = tape.leaf(&Tensor::zeros(vec![2, 3, 5, 5]));
            let down = tape.conv2d(up, wc, 2, 2).unwrap();
            assert_eq!(tape.shape(down), &[1, 2, s, s]);
        }
    }
}
