//! Define-by-run tape for reverse-mode differentiation.
//!
//! Every primitive appends one node holding its output value and the saved
//! state its backward rule needs. Nodes only reference earlier nodes, so a
//! single reverse sweep over the node list visits each entry exactly once in
//! a valid order.

use super::conv::{conv2d_backward, conv2d_forward, ConvGeom};
use super::tensor::{all_finite, Tensor};
use crate::error::{ensure, Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise primitives. Binary kinds accept equal shapes or a one-element
/// operand broadcast against the other.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    /// Power with a fixed real exponent.
    Pow(f64),
    Relu,
    Sigmoid,
    /// `max(x, floor)`.
    MaxScalar(f64),
}

impl Elementwise {
    fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul | Self::Div)
    }

    fn name(self) -> &'static str {
        match self {
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
            Self::Div => "div",
            Self::Neg => "neg",
            Self::Exp => "exp",
            Self::Log => "log",
            Self::Pow(_) => "pow",
            Self::Relu => "relu",
            Self::Sigmoid => "sigmoid",
            Self::MaxScalar(_) => "max_scalar",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    /// 2x2 window, stride 2.
    MaxPool2,
    /// Nearest-neighbour x2.
    Upsample2,
    /// Per-channel spatial mean, output `[N, C, 1, 1]`.
    GlobalAvg,
}

enum Op {
    Leaf,
    Binary {
        kind: Elementwise,
        a: Var,
        b: Var,
    },
    Unary {
        kind: Elementwise,
        a: Var,
    },
    Clamp {
        a: Var,
        lo: f64,
        hi: f64,
    },
    Affine {
        a: Var,
        scale: f64,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    SumPerSample {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2 {
        x: Var,
    },
    GlobalAvg {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    SliceChannels {
        a: Var,
        start: usize,
    },
    ChannelNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    ScaleChannels {
        x: Var,
        gate: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-channel batch moments measured by [`Graph::batch_norm_train`].
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Elements per channel (`N * H * W`).
    pub count: usize,
}

/// The tape: an append-only list of executed primitives.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    branch_sig: Option<u64>,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that also fingerprints every branch decision (relu signs,
    /// maxpool winners, clamp hits). Finite-difference probes whose
    /// fingerprint differs from the base point have crossed a kink.
    pub fn with_branch_tracking() -> Self {
        Self {
            nodes: Vec::new(),
            branch_sig: Some(FNV_OFFSET),
        }
    }

    pub fn branch_signature(&self) -> Option<u64> {
        self.branch_sig
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn mark_branch(&mut self, bits: impl Iterator<Item = u64>) {
        if let Some(sig) = self.branch_sig.as_mut() {
            for b in bits {
                *sig = (*sig ^ b).wrapping_mul(FNV_PRIME);
            }
        }
    }

    /// A leaf that does not take part in differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn record(
        &mut self,
        name: &'static str,
        shape: &[usize],
        data: Vec<f64>,
        inputs: &[Var],
        op: Op,
    ) -> Result<Var> {
        let value = Tensor::finite(name, shape, data)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---------------------------------------------------------------- elementwise

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let name = kind.name();
        match (kind.is_binary(), b) {
            (true, Some(b)) => self.binary(kind, a, b),
            (false, None) => self.unary(kind, a),
            (true, None) => Err(Error::contract(name, "binary operation needs two operands")),
            (false, Some(_)) => Err(Error::contract(name, "unary operation takes one operand")),
        }
    }

    fn binary(&mut self, kind: Elementwise, a: Var, b: Var) -> Result<Var> {
        let name = kind.name();
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (na, nb) = (self.value(a).numel(), self.value(b).numel());
        let shape = if sa == sb || nb == 1 {
            sa
        } else if na == 1 {
            sb
        } else {
            return Err(Error::contract(
                name,
                format!("shape mismatch {sa:?} vs {sb:?}"),
            ));
        };
        let n = shape.iter().product::<usize>();
        let (da, db) = (self.data(a), self.data(b));
        let at = |i: usize| if na == 1 { da[0] } else { da[i] };
        let bt = |i: usize| if nb == 1 { db[0] } else { db[i] };
        if kind == Elementwise::Div {
            if let Some(i) = (0..nb).find(|&i| db[i] == 0.0) {
                return Err(Error::domain(
                    "div",
                    format!("division by zero at flat index {i}"),
                ));
            }
        }
        let out: Vec<f64> = (0..n)
            .map(|i| match kind {
                Elementwise::Add => at(i) + bt(i),
                Elementwise::Sub => at(i) - bt(i),
                Elementwise::Mul => at(i) * bt(i),
                Elementwise::Div => at(i) / bt(i),
                _ => unreachable!(),
            })
            .collect();
        self.record(name, &shape, out, &[a, b], Op::Binary { kind, a, b })
    }

    fn unary(&mut self, kind: Elementwise, a: Var) -> Result<Var> {
        let name = kind.name();
        let x = self.data(a);
        if kind == Elementwise::Log {
            if let Some(i) = x.iter().position(|&v| v <= 0.0) {
                return Err(Error::domain(
                    "log",
                    format!("non-positive input {} at flat index {i}", x[i]),
                ));
            }
        }
        let out: Vec<f64> = x
            .iter()
            .map(|&v| match kind {
                Elementwise::Neg => -v,
                Elementwise::Exp => v.exp(),
                Elementwise::Log => v.ln(),
                Elementwise::Pow(p) => v.powf(p),
                Elementwise::Relu => v.max(0.0),
                Elementwise::Sigmoid => sigmoid(v),
                Elementwise::MaxScalar(c) => v.max(c),
                _ => unreachable!(),
            })
            .collect();
        match kind {
            Elementwise::Relu => {
                let bits: Vec<u64> = x.iter().map(|&v| (v > 0.0) as u64).collect();
                self.mark_branch(bits.into_iter());
            }
            Elementwise::MaxScalar(c) => {
                let bits: Vec<u64> = x.iter().map(|&v| (v > c) as u64).collect();
                self.mark_branch(bits.into_iter());
            }
            _ => {}
        }
        let shape = self.shape(a).to_vec();
        self.record(name, &shape, out, &[a], Op::Unary { kind, a })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Div, a, b)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Neg, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Log, a)
    }

    pub fn pow(&mut self, a: Var, exponent: f64) -> Result<Var> {
        self.unary(Elementwise::Pow(exponent), a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Sigmoid, a)
    }

    pub fn max_scalar(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.unary(Elementwise::MaxScalar(floor), a)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where a bound is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        ensure!(lo <= hi, "clamp", "empty interval [{lo}, {hi}]");
        let x = self.data(a);
        let out: Vec<f64> = x.iter().map(|&v| v.clamp(lo, hi)).collect();
        let bits: Vec<u64> = x
            .iter()
            .map(|&v| ((v > lo) as u64) | (((v < hi) as u64) << 1))
            .collect();
        self.mark_branch(bits.into_iter());
        let shape = self.shape(a).to_vec();
        self.record("clamp", &shape, out, &[a], Op::Clamp { a, lo, hi })
    }

    /// `scale * x + shift` with compile-time constants.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let out: Vec<f64> = self.data(a).iter().map(|&v| scale * v + shift).collect();
        let shape = self.shape(a).to_vec();
        self.record("affine", &shape, out, &[a], Op::Affine { a, scale })
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum();
        self.record("sum", &[1], vec![s], &[a], Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.data(a);
        let m = x.iter().sum::<f64>() / x.len() as f64;
        self.record("mean", &[1], vec![m], &[a], Op::Mean { a })
    }

    /// Sums everything but the leading axis: `[N, ...] -> [N]`.
    pub fn sum_per_sample(&mut self, a: Var) -> Result<Var> {
        let n = self.shape(a)[0];
        let len = self.value(a).numel() / n;
        let out: Vec<f64> = self.data(a).chunks(len).map(|c| c.iter().sum()).collect();
        self.record("sum_per_sample", &[n], out, &[a], Op::SumPerSample { a })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        self.record("reshape", shape, t.into_vec(), &[a], Op::Reshape { a })
    }

    // ---------------------------------------------------------------- spatial

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad, groups)?;
        if let Some(b) = b {
            ensure!(
                self.shape(b) == [geom.out_channels],
                "conv2d",
                "bias shape {:?} does not match {} output channels",
                self.shape(b),
                geom.out_channels
            );
        }
        let fwd = conv2d_forward(&geom, self.data(x), self.data(w), b.map(|b| self.data(b)));
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        let cols = if inputs.iter().any(|&v| self.requires_grad(v)) {
            fwd.cols
        } else {
            Vec::new()
        };
        self.record(
            "conv2d",
            &geom.out_shape(),
            fwd.out,
            &inputs,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
        )
    }

    pub fn pool(&mut self, kind: PoolKind, x: Var) -> Result<Var> {
        match kind {
            PoolKind::MaxPool2 => self.maxpool2(x),
            PoolKind::Upsample2 => self.upsample2(x),
            PoolKind::GlobalAvg => self.global_avg(x),
        }
    }

    /// 2x2 max pooling; ties go to the first element in row-major order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("maxpool2")?;
        ensure!(
            h % 2 == 0 && w % 2 == 0,
            "maxpool2",
            "spatial extents {h}x{w} must be even"
        );
        let (oh, ow) = (h / 2, w / 2);
        let src = self.data(x);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        self.mark_branch(argmax.iter().map(|&i| i as u64));
        self.record(
            "maxpool2",
            &[n, c, oh, ow],
            out,
            &[x],
            Op::MaxPool2 { x, argmax },
        )
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("upsample2")?;
        let src = self.data(x);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            for oy in 0..oh {
                let row = &src[plane * h * w + (oy / 2) * w..][..w];
                let dst = &mut out[plane * oh * ow + oy * ow..][..ow];
                for (ox, d) in dst.iter_mut().enumerate() {
                    *d = row[ox / 2];
                }
            }
        }
        self.record("upsample2", &[n, c, oh, ow], out, &[x], Op::Upsample2 { x })
    }

    pub fn global_avg(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("global_avg")?;
        let plane = h * w;
        let out: Vec<f64> = self
            .data(x)
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        self.record("global_avg", &[n, c, 1, 1], out, &[x], Op::GlobalAvg { x })
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4("concat_channels")?;
        let (nb, cb, hb, wb) = self.value(b).dims4("concat_channels")?;
        ensure!(
            (n, h, w) == (nb, hb, wb),
            "concat_channels",
            "non-channel extents differ: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let plane = h * w;
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            out.extend_from_slice(&da[i * ca * plane..][..ca * plane]);
            out.extend_from_slice(&db[i * cb * plane..][..cb * plane]);
        }
        self.record(
            "concat_channels",
            &[n, ca + cb, h, w],
            out,
            &[a, b],
            Op::Concat { a, b },
        )
    }

    /// Channels `[start, start + len)` of an NCHW tensor.
    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(a).dims4("slice_channels")?;
        ensure!(
            len > 0 && start + len <= c,
            "slice_channels",
            "range {start}..{} outside {c} channels",
            start + len
        );
        let plane = h * w;
        let src = self.data(a);
        let mut out = Vec::with_capacity(n * len * plane);
        for i in 0..n {
            out.extend_from_slice(&src[(i * c + start) * plane..][..len * plane]);
        }
        self.record(
            "slice_channels",
            &[n, len, h, w],
            out,
            &[a],
            Op::SliceChannels { a, start },
        )
    }

    // ---------------------------------------------------------------- layers

    /// Batch normalisation over the `N * H * W` axis with batch moments.
    /// Moments take part in differentiation.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchMoments)> {
        const OP: &str = "batch_norm_train";
        let (n, c, h, w) = self.value(x).dims4(OP)?;
        self.check_affine(OP, c, gamma, beta)?;
        let count = n * h * w;
        ensure!(
            count >= 2,
            OP,
            "need at least two elements per channel, got {count}"
        );
        let src = self.data(x);
        let plane = h * w;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let values =
                || (0..n).flat_map(move |i| src[(i * c + ch) * plane..][..plane].iter().copied());
            let m = values().sum::<f64>() / count as f64;
            let v = values().map(|x| (x - m) * (x - m)).sum::<f64>() / count as f64;
            mean[ch] = m;
            var[ch] = v;
        }
        let var_vars = &var;
        let (y, xhat, inv_std) = self.normalize(x, gamma, beta, &mean, var_vars, eps);
        let v = self.record(
            OP,
            &[n, c, h, w],
            y,
            &[x, gamma, beta],
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
            },
        )?;
        Ok((v, BatchMoments { mean, var, count }))
    }

    /// Batch normalisation with fixed statistics: a per-channel affine map.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        const OP: &str = "batch_norm_eval";
        let (n, c, h, w) = self.value(x).dims4(OP)?;
        self.check_affine(OP, c, gamma, beta)?;
        ensure!(
            mean.len() == c && var.len() == c,
            OP,
            "statistics cover {} channels, input has {c}",
            mean.len()
        );
        let (y, xhat, inv_std) = self.normalize(x, gamma, beta, mean, var, eps);
        self.record(
            OP,
            &[n, c, h, w],
            y,
            &[x, gamma, beta],
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: false,
            },
        )
    }

    fn check_affine(&self, op: &'static str, c: usize, gamma: Var, beta: Var) -> Result<()> {
        ensure!(
            self.shape(gamma) == [c] && self.shape(beta) == [c],
            op,
            "gamma/beta shapes {:?}/{:?} do not match {c} channels",
            self.shape(gamma),
            self.shape(beta)
        );
        Ok(())
    }

    fn normalize(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let shape = self.shape(x);
        let (c, plane) = (shape[1], shape[2] * shape[3]);
        let (g, b) = (self.data(gamma), self.data(beta));
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let src = self.data(x);
        let mut xhat = vec![0.0; src.len()];
        let mut y = vec![0.0; src.len()];
        for (p, (chunk_x, (chunk_h, chunk_y))) in src
            .chunks(plane)
            .zip(xhat.chunks_mut(plane).zip(y.chunks_mut(plane)))
            .enumerate()
        {
            let ch = p % c;
            for ((&xv, hv), yv) in chunk_x
                .iter()
                .zip(chunk_h.iter_mut())
                .zip(chunk_y.iter_mut())
            {
                *hv = (xv - mean[ch]) * inv_std[ch];
                *yv = g[ch] * *hv + b[ch];
            }
        }
        (y, xhat, inv_std)
    }

    /// Fully connected map `x[N, In] -> x * w^T + b` with `w[Out, In]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        const OP: &str = "linear";
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        ensure!(
            xs.len() == 2 && ws.len() == 2,
            OP,
            "expected 2-D operands, got {xs:?} and {ws:?}"
        );
        let (n, inp, out) = (xs[0], xs[1], ws[0]);
        ensure!(
            ws[1] == inp,
            OP,
            "weight {ws:?} does not accept {inp} inputs"
        );
        if let Some(b) = b {
            ensure!(
                self.shape(b) == [out],
                OP,
                "bias shape {:?} does not match {out}",
                self.shape(b)
            );
        }
        let (xd, wd) = (self.data(x), self.data(w));
        let bias = b.map(|b| self.data(b));
        let mut y = vec![0.0; n * out];
        for i in 0..n {
            for o in 0..out {
                let dot: f64 = xd[i * inp..][..inp]
                    .iter()
                    .zip(&wd[o * inp..][..inp])
                    .map(|(a, b)| a * b)
                    .sum();
                y[i * out + o] = dot + bias.map_or(0.0, |b| b[o]);
            }
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.record(OP, &[n, out], y, &inputs, Op::Linear { x, w, b })
    }

    /// Multiplies each `(n, c)` plane of `x` by `gate[n, c]`.
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        const OP: &str = "scale_channels";
        let (n, c, h, w) = self.value(x).dims4(OP)?;
        ensure!(
            self.value(gate).numel() == n * c && self.shape(gate)[0] == n,
            OP,
            "gate shape {:?} does not cover [{n}, {c}]",
            self.shape(gate)
        );
        let plane = h * w;
        let g = self.data(gate);
        let out: Vec<f64> = self
            .data(x)
            .chunks(plane)
            .enumerate()
            .flat_map(|(p, chunk)| chunk.iter().map(move |v| v * g[p]))
            .collect();
        self.record(
            OP,
            &[n, c, h, w],
            out,
            &[x, gate],
            Op::ScaleChannels { x, gate },
        )
    }

    // ---------------------------------------------------------------- backward

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        ensure!(
            self.value(loss).numel() == 1,
            "backward",
            "loss must be a scalar, got shape {:?}",
            self.shape(loss)
        );
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients {
                grads,
                shapes: self.shapes(),
            });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !all_finite(g) {
                    let j = g.iter().position(|v| !v.is_finite()).unwrap_or(0);
                    return Err(Error::domain(
                        "backward",
                        format!("non-finite gradient at node {i}, index {j}"),
                    ));
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.shapes(),
        })
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        self.nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect()
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (da, db) = (self.data(*a), self.data(*b));
                let (na, nb) = (da.len(), db.len());
                let at = |i: usize| if na == 1 { da[0] } else { da[i] };
                let bt = |i: usize| if nb == 1 { db[0] } else { db[i] };
                let n = g.len();
                let (ga, gb): (Vec<f64>, Vec<f64>) = match kind {
                    Elementwise::Add => (g.to_vec(), g.to_vec()),
                    Elementwise::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
                    Elementwise::Mul => (
                        (0..n).map(|i| g[i] * bt(i)).collect(),
                        (0..n).map(|i| g[i] * at(i)).collect(),
                    ),
                    Elementwise::Div => (
                        (0..n).map(|i| g[i] / bt(i)).collect(),
                        (0..n).map(|i| -g[i] * at(i) / (bt(i) * bt(i))).collect(),
                    ),
                    _ => unreachable!(),
                };
                self.accumulate_broadcast(grads, *a, ga);
                self.accumulate_broadcast(grads, *b, gb);
            }
            Op::Unary { kind, a } => {
                let x = self.data(*a);
                let ga: Vec<f64> = (0..g.len())
                    .map(|i| {
                        g[i] * match kind {
                            Elementwise::Neg => -1.0,
                            Elementwise::Exp => y[i],
                            Elementwise::Log => 1.0 / x[i],
                            Elementwise::Pow(p) => {
                                if *p == 0.0 {
                                    0.0
                                } else {
                                    p * x[i].powf(p - 1.0)
                                }
                            }
                            Elementwise::Relu => (x[i] > 0.0) as u8 as f64,
                            Elementwise::Sigmoid => y[i] * (1.0 - y[i]),
                            Elementwise::MaxScalar(c) => (x[i] > *c) as u8 as f64,
                            _ => unreachable!(),
                        }
                    })
                    .collect();
                self.accumulate_vec(grads, *a, ga);
            }
            Op::Clamp { a, lo, hi } => {
                let x = self.data(*a);
                self.accumulate(grads, *a, |acc| {
                    for i in 0..acc.len() {
                        if x[i] > *lo && x[i] < *hi {
                            acc[i] += g[i];
                        }
                    }
                });
            }
            Op::Affine { a, scale } => {
                self.accumulate(grads, *a, |acc| {
                    for (d, gv) in acc.iter_mut().zip(g) {
                        *d += scale * gv;
                    }
                });
            }
            Op::Sum { a } => {
                self.accumulate(grads, *a, |acc| acc.iter_mut().for_each(|d| *d += g[0]))
            }
            Op::Mean { a } => {
                let share = g[0] / self.value(*a).numel() as f64;
                self.accumulate(grads, *a, |acc| acc.iter_mut().for_each(|d| *d += share));
            }
            Op::SumPerSample { a } => {
                let len = self.value(*a).numel() / g.len();
                self.accumulate(grads, *a, |acc| {
                    for (chunk, gv) in acc.chunks_mut(len).zip(g) {
                        chunk.iter_mut().for_each(|d| *d += gv);
                    }
                });
            }
            Op::Reshape { a } => self.accumulate(grads, *a, |acc| add_into(acc, g)),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let want = (
                    self.requires_grad(*w),
                    b.is_some_and(|b| self.requires_grad(b)),
                );
                let (xd, wd) = (self.data(*x), self.data(*w));
                let mut cg = None;
                if self.requires_grad(*x) {
                    self.accumulate(grads, *x, |acc| {
                        cg = Some(conv2d_backward(geom, xd, cols, wd, g, Some(acc), want))
                    });
                }
                let cg = cg.unwrap_or_else(|| conv2d_backward(geom, xd, cols, wd, g, None, want));
                if let Some(dw) = cg.dw {
                    self.accumulate_vec(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    self.accumulate_vec(grads, *b, db);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                self.accumulate(grads, *x, |acc| {
                    for (&idx, gv) in argmax.iter().zip(g) {
                        acc[idx] += gv;
                    }
                });
            }
            Op::Upsample2 { x } => {
                let (n, c, h, w) = self
                    .value(*x)
                    .dims4("upsample2")
                    .expect("checked in forward");
                let (oh, ow) = (2 * h, 2 * w);
                self.accumulate(grads, *x, |acc| {
                    for plane in 0..n * c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                acc[plane * h * w + (oy / 2) * w + ox / 2] +=
                                    g[plane * oh * ow + oy * ow + ox];
                            }
                        }
                    }
                });
            }
            Op::GlobalAvg { x } => {
                let s = self.shape(*x);
                let plane = s[2] * s[3];
                self.accumulate(grads, *x, |acc| {
                    for (chunk, gv) in acc.chunks_mut(plane).zip(g) {
                        let share = gv / plane as f64;
                        chunk.iter_mut().for_each(|d| *d += share);
                    }
                });
            }
            Op::Concat { a, b } => {
                let sa = self.shape(*a);
                let (n, ca, plane) = (sa[0], sa[1], sa[2] * sa[3]);
                let cb = self.shape(*b)[1];
                let ct = ca + cb;
                self.accumulate(grads, *a, |acc| {
                    for i in 0..n {
                        add_into(
                            &mut acc[i * ca * plane..][..ca * plane],
                            &g[i * ct * plane..][..ca * plane],
                        );
                    }
                });
                self.accumulate(grads, *b, |acc| {
                    for i in 0..n {
                        add_into(
                            &mut acc[i * cb * plane..][..cb * plane],
                            &g[(i * ct + ca) * plane..][..cb * plane],
                        );
                    }
                });
            }
            Op::SliceChannels { a, start } => {
                let sa = self.shape(*a);
                let (n, c, plane) = (sa[0], sa[1], sa[2] * sa[3]);
                let len = node.value.shape()[1];
                self.accumulate(grads, *a, |acc| {
                    for i in 0..n {
                        add_into(
                            &mut acc[(i * c + start) * plane..][..len * plane],
                            &g[i * len * plane..][..len * plane],
                        );
                    }
                });
            }
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = self.shape(*x);
                let (c, plane) = (s[1], s[2] * s[3]);
                let count = (xhat.len() / c) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (p, (gc, hc)) in g.chunks(plane).zip(xhat.chunks(plane)).enumerate() {
                    let ch = p % c;
                    for (gv, hv) in gc.iter().zip(hc) {
                        sum_g[ch] += gv;
                        sum_gx[ch] += gv * hv;
                    }
                }
                if self.requires_grad(*x) {
                    let gam = self.data(*gamma);
                    self.accumulate(grads, *x, |acc| {
                        for (p, ((ac, gc), hc)) in acc
                            .chunks_mut(plane)
                            .zip(g.chunks(plane))
                            .zip(xhat.chunks(plane))
                            .enumerate()
                        {
                            let ch = p % c;
                            let k = gam[ch] * inv_std[ch];
                            if *batch_stats {
                                let (mg, mgx) = (sum_g[ch] / count, sum_gx[ch] / count);
                                for ((a, gv), hv) in ac.iter_mut().zip(gc).zip(hc) {
                                    *a += k * (gv - mg - hv * mgx);
                                }
                            } else {
                                for (a, gv) in ac.iter_mut().zip(gc) {
                                    *a += k * gv;
                                }
                            }
                        }
                    });
                }
                self.accumulate_vec(grads, *gamma, sum_gx);
                self.accumulate_vec(grads, *beta, sum_g);
            }
            Op::Linear { x, w, b } => {
                let (n, inp) = (self.shape(*x)[0], self.shape(*x)[1]);
                let out = self.shape(*w)[0];
                let (xd, wd) = (self.data(*x), self.data(*w));
                self.accumulate(grads, *x, |acc| {
                    for i in 0..n {
                        for o in 0..out {
                            let gv = g[i * out + o];
                            for j in 0..inp {
                                acc[i * inp + j] += gv * wd[o * inp + j];
                            }
                        }
                    }
                });
                self.accumulate(grads, *w, |acc| {
                    for i in 0..n {
                        for o in 0..out {
                            let gv = g[i * out + o];
                            for j in 0..inp {
                                acc[o * inp + j] += gv * xd[i * inp + j];
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    self.accumulate(grads, *b, |acc| {
                        for row in g.chunks(out) {
                            add_into(acc, row);
                        }
                    });
                }
            }
            Op::ScaleChannels { x, gate } => {
                let s = self.shape(*x);
                let plane = s[2] * s[3];
                let (xd, gd) = (self.data(*x), self.data(*gate));
                self.accumulate(grads, *x, |acc| {
                    for (p, (ac, gc)) in acc.chunks_mut(plane).zip(g.chunks(plane)).enumerate() {
                        for (a, gv) in ac.iter_mut().zip(gc) {
                            *a += gv * gd[p];
                        }
                    }
                });
                self.accumulate(grads, *gate, |acc| {
                    for (p, (xc, gc)) in xd.chunks(plane).zip(g.chunks(plane)).enumerate() {
                        acc[p] += xc.iter().zip(gc).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let acc = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(acc);
    }

    /// Like [`Self::accumulate`] for a full-size contribution, which becomes
    /// the accumulator itself when none exists yet.
    fn accumulate_vec(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(contrib.len(), self.nodes[v.0].value.numel());
        match &mut grads[v.0] {
            Some(acc) => add_into(acc, &contrib),
            slot => *slot = Some(contrib),
        }
    }

    fn accumulate_broadcast(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if self.value(v).numel() == 1 && contrib.len() != 1 {
            let total: f64 = contrib.iter().sum();
            self.accumulate(grads, v, |acc| acc[0] += total);
        } else {
            self.accumulate_vec(grads, v, contrib);
        }
    }
}

fn add_into(acc: &mut [f64], src: &[f64]) {
    for (a, s) in acc.iter_mut().zip(src) {
        *a += s;
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when `v` does not reach the loss or does
    /// not require gradients.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads.get(v.0)?.as_ref().map(|g| {
            Tensor::new(&self.shapes[v.0], g.clone()).expect("gradient shape mirrors value")
        })
    }

    /// Gradient of `v`, zeros when it was never reached.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}
