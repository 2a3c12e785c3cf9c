//! Reverse-mode autodiff over a flat, topologically ordered node list.
//!
//! Each node owns its forward value and an optional operation record holding
//! whatever forward context its backward rule needs (pool argmax, dropout
//! mask, ...). `backward` walks the list once in reverse, accumulating
//! gradient contributions in a side table and committing them to the node
//! tensors at the end of each visit. Graphs are built per forward pass and
//! a second `backward` call on the same graph is an error.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels;
use super::Tensor;
use crate::{Error, Result};

/// Handle to a node in one specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Dropout and batch-norm-free model switch: training applies stochastic
/// masking, evaluation is deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Backward rule for one operation. `out` is the node's forward value,
/// `out_grad` the incoming gradient, `inputs` the forward values of the
/// node's inputs and `needs` flags which of them require a contribution.
/// Implementations return one optional gradient buffer per input.
///
/// The trait is public so downstream modules (quantizers, binary
/// activations) can add custom differentiable operations via [`Graph::push`].
pub trait GraphOp {
    fn name(&self) -> &'static str;
    fn backward(&self, out: &Tensor, out_grad: &[f32], inputs: &[&Tensor], needs: &[bool]) -> Vec<Option<Vec<f32>>>;
}

struct Node {
    tensor: Tensor,
    op: Option<Box<dyn GraphOp>>,
    inputs: Vec<NodeId>,
    needs_grad: bool,
}

/// Single-use computation graph; see module docs.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), backward_done: false }
    }

    /// Leaf that participates in differentiation (weights, inputs under test).
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.leaf(t, true)
    }

    /// Leaf treated as a constant (data batches, frozen targets).
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.leaf(t, false)
    }

    fn leaf(&mut self, mut t: Tensor, needs_grad: bool) -> NodeId {
        t.grad = None;
        self.nodes.push(Node { tensor: t, op: None, inputs: Vec::new(), needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Appends a computed node. Public extension point for custom operations;
    /// inputs must already live in this graph.
    pub fn push(&mut self, tensor: Tensor, op: Box<dyn GraphOp>, inputs: Vec<NodeId>) -> NodeId {
        let needs_grad = inputs.iter().any(|id| self.nodes[id.0].needs_grad);
        self.nodes.push(Node { tensor, op: Some(op), inputs, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn tensor(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn data(&self, id: NodeId) -> &[f32] {
        &self.nodes[id.0].tensor.data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    /// Gradient committed by `backward`, if this node received one.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    // ---- operations -----------------------------------------------------

    /// 3x3 stride-1 pad-1 convolution with per-channel bias.
    /// x: [Cin,H,W], w: [Cout,Cin,3,3], b: [Cout] -> [Cout,H,W].
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 3 {
            return Err(Error::shape("conv2d", format!("input must be [Cin,H,W], got {xs:?}")));
        }
        if ws.len() != 4 || ws[2] != 3 || ws[3] != 3 {
            return Err(Error::shape("conv2d", format!("weight must be [Cout,Cin,3,3], got {ws:?}")));
        }
        if ws[1] != xs[0] {
            return Err(Error::shape(
                "conv2d",
                format!("weight Cin {} does not match input Cin {}", ws[1], xs[0]),
            ));
        }
        if bs != [ws[0]] {
            return Err(Error::shape("conv2d", format!("bias must be [Cout={}], got {bs:?}", ws[0])));
        }
        let (cin, h, wd, cout) = (xs[0], xs[1], xs[2], ws[0]);
        let mut out = Tensor::zeros(&[cout, h, wd]);
        kernels::conv2d_fwd(self.data(x), self.data(w), self.data(b), cin, h, wd, cout, &mut out.data);
        Ok(self.push(out, Box::new(OpConv2d { cin, h, w: wd, cout }), vec![x, w, b]))
    }

    /// 2x2 non-overlapping max pool; H and W must be even.
    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::shape("maxpool2", format!("input must be [C,H,W], got {xs:?}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("maxpool2", format!("H and W must be even, got {h}x{w}")));
        }
        let mut out = Tensor::zeros(&[c, h / 2, w / 2]);
        let mut argmax = vec![0u32; out.numel()];
        kernels::maxpool2_fwd(self.data(x), c, h, w, &mut out.data, &mut argmax);
        Ok(self.push(out, Box::new(OpMaxpool2 { in_len: c * h * w, argmax }), vec![x]))
    }

    /// Elementwise max(0, x); subgradient 0 at exactly 0.
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let t = self.tensor(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| v.max(0.0)).collect(),
            grad: None,
        };
        self.push(out, Box::new(OpRelu), vec![x])
    }

    /// x[N,Din] * W[Dout,Din]^T + b[Dout] -> [N,Dout].
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::shape("linear", format!("need x [N,Din] and W [Dout,Din], got {xs:?} and {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape("linear", format!("inner dim mismatch: x Din {} vs W Din {}", xs[1], ws[1])));
        }
        if bs != [ws[0]] {
            return Err(Error::shape("linear", format!("bias must be [Dout={}], got {bs:?}", ws[0])));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = Tensor::zeros(&[n, dout]);
        kernels::mm_nt(self.data(x), self.data(w), n, din, dout, &mut out.data);
        for i in 0..n {
            for j in 0..dout {
                out.data[i * dout + j] += self.data(b)[j];
            }
        }
        Ok(self.push(out, Box::new(OpLinear { n, din, dout }), vec![x, w, b]))
    }

    /// Row-wise softmax with max subtraction, x: [N,M].
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::shape("softmax_rows", format!("input must be [N,M], got {xs:?}")));
        }
        let mut out = Tensor::zeros(&xs);
        kernels::softmax_rows_fwd(self.data(x), xs[0], xs[1], &mut out.data);
        Ok(self.push(out, Box::new(OpSoftmaxRows { n: xs[0], m: xs[1] }), vec![x]))
    }

    /// C = A*B, A: [n,k], B: [k,m].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let asp = self.shape(a).to_vec();
        let bsp = self.shape(b).to_vec();
        if asp.len() != 2 || bsp.len() != 2 || asp[1] != bsp[0] {
            return Err(Error::shape("matmul", format!("cannot multiply {asp:?} by {bsp:?}")));
        }
        let (n, k, m) = (asp[0], asp[1], bsp[1]);
        let mut out = Tensor::zeros(&[n, m]);
        kernels::mm_nn(self.data(a), self.data(b), n, k, m, &mut out.data);
        Ok(self.push(out, Box::new(OpMatmul { n, k, m }), vec![a, b]))
    }

    /// C = A*B^T, A: [n,k], B: [m,k].
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let asp = self.shape(a).to_vec();
        let bsp = self.shape(b).to_vec();
        if asp.len() != 2 || bsp.len() != 2 || asp[1] != bsp[1] {
            return Err(Error::shape("matmul_nt", format!("cannot multiply {asp:?} by {bsp:?}^T")));
        }
        let (n, k, m) = (asp[0], asp[1], bsp[0]);
        let mut out = Tensor::zeros(&[n, m]);
        kernels::mm_nt(self.data(a), self.data(b), n, k, m, &mut out.data);
        Ok(self.push(out, Box::new(OpMatmulNt { n, k, m }), vec![a, b]))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, x: NodeId, alpha: f32) -> NodeId {
        let t = self.tensor(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| v * alpha).collect(),
            grad: None,
        };
        self.push(out, Box::new(OpScale { alpha }), vec![x])
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("shape mismatch: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect(),
            grad: None,
        };
        Ok(self.push(out, Box::new(OpAdd), vec![a, b]))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("shape mismatch: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect(),
            grad: None,
        };
        Ok(self.push(out, Box::new(OpMul), vec![a, b]))
    }

    /// Sum of all elements, as a [1] scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f32 = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Box::new(OpSum), vec![x])
    }

    /// Same data, new shape; element counts must agree.
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != self.tensor(x).numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} ({} elems) as {shape:?} ({n} elems)", self.shape(x), self.tensor(x).numel()),
            ));
        }
        let out = Tensor { shape: shape.to_vec(), data: self.data(x).to_vec(), grad: None };
        Ok(self.push(out, Box::new(OpReshape), vec![x]))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose2(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::shape("transpose2", format!("input must be 2-D, got {xs:?}")));
        }
        let (r, c) = (xs[0], xs[1]);
        let xd = self.data(x);
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = xd[i * c + j];
            }
        }
        Ok(self.push(out, Box::new(OpTranspose2 { r, c }), vec![x]))
    }

    /// Inverted dropout: in train mode zeroes each element with probability p
    /// and scales survivors by 1/(1-p); eval mode is the identity. The mask is
    /// drawn from a dedicated RNG seeded with `seed`.
    pub fn dropout(&mut self, x: NodeId, p: f32, mode: Mode, seed: u64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout", format!("p must be in [0,1), got {p}")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - p);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = self.tensor(x);
        let mask: Vec<f32> = (0..t.numel())
            .map(|_| if rng.random::<f32>() < p { 0.0 } else { keep_scale })
            .collect();
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().zip(&mask).map(|(v, m)| v * m).collect(),
            grad: None,
        };
        Ok(self.push(out, Box::new(OpDropout { mask }), vec![x]))
    }

    /// Stacks two feature maps along the channel axis; spatial dims must match.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let asp = self.shape(a).to_vec();
        let bsp = self.shape(b).to_vec();
        if asp.len() != 3 || bsp.len() != 3 {
            return Err(Error::shape("concat_channels", format!("inputs must be [C,H,W], got {asp:?} and {bsp:?}")));
        }
        if asp[1..] != bsp[1..] {
            return Err(Error::shape(
                "concat_channels",
                format!("spatial dims differ: {}x{} vs {}x{}", asp[1], asp[2], bsp[1], bsp[2]),
            ));
        }
        let mut data = Vec::with_capacity(self.tensor(a).numel() + self.tensor(b).numel());
        data.extend_from_slice(self.data(a));
        data.extend_from_slice(self.data(b));
        let out = Tensor { shape: vec![asp[0] + bsp[0], asp[1], asp[2]], data, grad: None };
        let na = self.tensor(a).numel();
        Ok(self.push(out, Box::new(OpConcatChannels { na }), vec![a, b]))
    }

    /// Mean over all entries of the squared difference, as a [1] scalar.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::shape(
                "mse",
                format!("shape mismatch: {:?} vs {:?}", self.shape(pred), self.shape(target)),
            ));
        }
        let n = self.tensor(pred).numel().max(1);
        let s: f32 = self
            .data(pred)
            .iter()
            .zip(self.data(target))
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        Ok(self.push(Tensor::scalar(s / n as f32), Box::new(OpMse), vec![pred, target]))
    }

    /// Single-head scaled dot-product self-attention:
    /// softmax_rows((xWq)(xWk)^T / sqrt(D)) * (xWv); x: [N,D], Wq/Wk/Wv: [D,D].
    pub fn self_attention(&mut self, x: NodeId, wq: NodeId, wk: NodeId, wv: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::shape("self_attention", format!("x must be [N,D], got {xs:?}")));
        }
        let d = xs[1];
        for (name, w) in [("Wq", wq), ("Wk", wk), ("Wv", wv)] {
            if self.shape(w) != [d, d] {
                return Err(Error::shape(
                    "self_attention",
                    format!("{name} must be [D,D]=[{d},{d}], got {:?}", self.shape(w)),
                ));
            }
        }
        let q = self.matmul(x, wq)?;
        let k = self.matmul(x, wk)?;
        let v = self.matmul(x, wv)?;
        let scores = self.matmul_nt(q, k)?;
        let scaled = self.scale(scores, 1.0 / (d as f32).sqrt());
        let attn = self.softmax_rows(scaled)?;
        self.matmul(attn, v)
    }

    /// Reverse-topological gradient accumulation from a scalar root. Commits
    /// gradients into the `grad` field of every node on a path from the root
    /// to a parameter leaf. Errors on a non-scalar root or a repeated call.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph("backward already ran on this graph; build a fresh graph per pass".into()));
        }
        let r = root.0;
        if r >= self.nodes.len() {
            return Err(Error::Graph("backward root is not a node of this graph".into()));
        }
        if self.nodes[r].tensor.numel() != 1 {
            return Err(Error::Graph(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[r].tensor.shape
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[r] = Some(vec![1.0]);
        for i in (0..=r).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let propagated = {
                let (before, at) = self.nodes.split_at(i);
                let node = &at[0];
                node.op.as_ref().map(|op| {
                    let ins: Vec<&Tensor> = node.inputs.iter().map(|id| &before[id.0].tensor).collect();
                    let needs: Vec<bool> = node.inputs.iter().map(|id| before[id.0].needs_grad).collect();
                    let contribs = op.backward(&node.tensor, &g, &ins, &needs);
                    debug_assert_eq!(contribs.len(), node.inputs.len(), "op {} returned wrong arity", op.name());
                    (contribs, node.inputs.clone())
                })
            };
            if let Some((contribs, inputs)) = propagated {
                for (c, id) in contribs.into_iter().zip(inputs) {
                    let Some(c) = c else { continue };
                    debug_assert_eq!(c.len(), self.nodes[id.0].tensor.numel());
                    match &mut grads[id.0] {
                        Some(acc) => {
                            for (a, v) in acc.iter_mut().zip(&c) {
                                *a += v;
                            }
                        }
                        slot @ None => *slot = Some(c),
                    }
                }
            }
            self.nodes[i].tensor.grad = Some(g);
        }
        Ok(())
    }
}

// ---- operation records ----------------------------------------------------

struct OpConv2d {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
}

impl GraphOp for OpConv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn backward(&self, _out: &Tensor, g: &[f32], inputs: &[&Tensor], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let (x, wt) = (&inputs[0].data, &inputs[1].data);
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0f32; self.cin * self.h * self.w];
            kernels::conv2d_bwd_input(g, wt, self.cin, self.h, self.w, self.cout, &mut dx);
            dx
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![0.0f32; self.cout * self.cin * 9];
            kernels::conv2d_bwd_weight(g, x, self.cin, self.h, self.w, self.cout, &mut dw);
            dw
        });
        let db = needs[2].then(|| {
            let mut db = vec![0.0f32; self.cout];
            kernels::conv2d_bwd_bias(g, self.cout, self.h * self.w, &mut db);
            db
        });
        vec![dx, dw, db]
    }
}

struct OpMaxpool2 {
    in_len: usize,
    argmax: Vec<u32>,
}

impl GraphOp for OpMaxpool2 {
    fn name(&self) -> &'static str {
        "maxpool2"
    }
    fn backward(&self, _out: &Tensor, g: &[f32], _inputs: &[&Tensor], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        vec![needs[0].then(|| {
            let mut dx = vec![0.0f32; self.in_len];
            for (j, &src) in self.argmax.iter().enumerate() {
                dx[src as usize] += g[j];
            }
            dx
        })]
    }
}

struct OpRelu;

impl GraphOp for OpRelu {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(&self, _out: &Tensor, g: &[f32], inputs: &[&Tensor], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        vec![needs[0].then(|| {
            inputs[0]
                .data
                .iter()
                .zip(g)
                .map(|(x, gv)| if *x > 0.0 { *gv } else { 0.0 })
                .collect()
        })]
    }
}

struct OpLinear {
    n: usize,
    din: usize,
    dout: usize,
}

impl GraphOp for OpLinear {
    fn name(&self) -> &'static str {
        "linear"
    }
    fn backward(&self, _out: &Tensor, g: &[f32], inputs: &[&Tensor], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let (x, w) = (&inputs[0].data, &inputs[1].data);
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0f32; self.n * self.din];
            kernels::mm_nn(g, w, self.n, self.dout, self.din, &mut dx);
            dx
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![0.0f32; self.dout * self.din];
            kernels::mm_tn(g, x, self.n, self.dout, self.din, &mut dw);
            dw
        });
        let db = needs[2].then(|| {
            let mut db = vec![0.0f32; self.dout];
            for i in 0..self.n {
                for j in 0..self.dout {
                    db[j] += g[i * self.dout + j];
                }
            }
            db
        });
        vec![dx, dw, db]
    }
}

struct OpSoftmaxRows {
    n: usize,
    m: usize,
}

impl GraphOp for OpSoftmaxRows {
    fn name(&self) -> &'static str {
        "softmax_rows"
    }
    fn backward(&self, out: &Tensor, g: &[f32], _inputs: &[&Tensor], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        vec![needs[0].then(|| {
            let mut dx = vec![0.0f32; self.n * self.m];
            kernels::softmax_rows_bwd(&out.data, g, self.n, self.m, &mut dx);
            dx
        })]
    }
}

struct OpMatmul {
    n: usize,
    k: usize,
    m: usize,
}

impl GraphOp for OpMatmul {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, _out: &Tensor, g: &[f32], inputs: &[&Tensor], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let (a, b) = (&inputs[0].data, &inputs[1].data);
        let da = needs[0].then(|| {
            let mut da = vec![0.0f32; self.n * self.k];
            kernels::mm_nt(g, b, self.n, self.m, self.k, &mut da);
            da
        });
        let db = needs[1].then(|| {
            let mut db = vec![0.0f32; self.k * self.m];
            kernels::mm_tn(a, g, self.n, self.k, self.m, &mut db);
            db
        });
        vec![da, db]
    }
}

struct OpMatmulNt {
    n: usize,
    k: usize,
    m: usize,
}

impl GraphOp for OpMatmulNt {
    fn name(&self) -> &'static str {
        "matmul_nt"
    }
    fn backward(&self, _out: &Tensor, g: &[f32], inputs: &[&Tensor], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let (a, b) = (&inputs[0].data, &inputs[1].data);
        let da = needs[0].then(|| {
            let mut da = vec![0.0f32; self.n * self.k];
            kernels::mm_nn(g, b, self.n, self.m, self.k, &mut da);
            da
        });
        let db = needs[1].then(|| {
            let mut db = vec![0.0f32; self.m * self.k];
            kernels::mm_tn(g, a, self.n, self.m, self.k, &mut db);
            db
        });
        vec![da, db]
    }
}

struct OpScale {
    alpha: f32,
}

impl GraphOp for OpScale {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _out: &Tensor, g: &[f32], _inputs: &[&Tensor], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        vec![needs[0].then(|| g.iter().map(|v| v * self.alpha).collect())]
    }
}

struct OpAdd;

impl GraphOp for OpAdd {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _out: &Tensor, g: &[f32], _inputs: &[&Tensor], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())]
    }
}

struct OpMul;

impl GraphOp for OpMul {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, _out: &Tensor, g: &[f32], inputs: &[&Tensor], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let (a, b) = (&inputs[0].data, &inputs[1].data);
        vec![
            needs[0].then(|| g.iter().zip(b).map(|(gv, bv)| gv * bv).collect()),
            needs[1].then(|| g.iter().zip(a).map(|(gv, av)| gv * av).collect()),
        ]
    }
}

struct OpSum;

impl GraphOp for OpSum {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, _out: &Tensor, g: &[f32], inputs: &[&Tensor], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        vec![needs[0].then(|| vec![g[0]; inputs[0].numel()])]
    }
}

struct OpReshape;

impl GraphOp for OpReshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, _out: &Tensor, g: &[f32], _inputs: &[&Tensor], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        vec![needs[0].then(|| g.to_vec())]
    }
}

struct OpTranspose2 {
    r: usize,
    c: usize,
}

impl GraphOp for OpTranspose2 {
    fn name(&self) -> &'static str {
        "transpose2"
    }
    fn backward(&self, _out: &Tensor, g: &[f32], _inputs: &[&Tensor], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        vec![needs[0].then(|| {
            // g is laid out [c,r]; route back to [r,c].
            let mut dx = vec![0.0f32; self.r * self.c];
            for j in 0..self.c {
                for i in 0..self.r {
                    dx[i * self.c + j] = g[j * self.r + i];
                }
            }
            dx
        })]
    }
}

struct OpDropout {
    mask: Vec<f32>,
}

impl GraphOp for OpDropout {
    fn name(&self) -> &'static str {
        "dropout"
    }
    fn backward(&self, _out: &Tensor, g: &[f32], _inputs: &[&Tensor], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        vec![needs[0].then(|| g.iter().zip(&self.mask).map(|(gv, m)| gv * m).collect())]
    }
}

struct OpConcatChannels {
    na: usize,
}

impl GraphOp for OpConcatChannels {
    fn name(&self) -> &'static str {
        "concat_channels"
    }
    fn backward(&self, _out: &Tensor, g: &[f32], _inputs: &[&Tensor], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        vec![
            needs[0].then(|| g[..self.na].to_vec()),
            needs[1].then(|| g[self.na..].to_vec()),
        ]
    }
}

struct OpMse;

impl GraphOp for OpMse {
    fn name(&self) -> &'static str {
        "mse"
    }
    fn backward(&self, _out: &Tensor, g: &[f32], inputs: &[&Tensor], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let (p, t) = (&inputs[0].data, &inputs[1].data);
        let scale = 2.0 * g[0] / p.len().max(1) as f32;
        let dp = needs[0].then(|| p.iter().zip(t).map(|(pv, tv)| scale * (pv - tv)).collect::<Vec<f32>>());
        let dt = needs[1].then(|| p.iter().zip(t).map(|(pv, tv)| -scale * (pv - tv)).collect::<Vec<f32>>());
        vec![dp, dt]
    }
}
