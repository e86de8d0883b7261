use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    AddRow { x: Var, bias: Var },
    ChannelAdd { x: Var, s: Var },
    ChannelMul { x: Var, s: Var },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    Upsample { x: Var, factor: usize },
    Bilinear { x: Var, planes: usize, in_h: usize, in_w: usize, out_h: usize, out_w: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Clamp { x: Var, lo: f32, hi: f32 },
    Sum(Var),
    Mean(Var),
    SpatialMean { x: Var, plane: usize },
    Gather { x: Var, map: Vec<Option<usize>> },
    Reshape(Var),
    Concat { parts: Vec<Var> },
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, batch: usize, heads: usize, probs: Vec<f32>, mask: Rc<Vec<bool>> },
    Rotary { x: Var, heads: usize, cos: Vec<f32>, sin: Vec<f32> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed operations.
///
/// Nodes are appended as operations run, so every node's inputs precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    param_lookup: HashMap<String, Var>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zeros if the loss does not depend on it.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Vec<f32> {
        self.get(v)
            .map(<[f32]>::to_vec)
            .unwrap_or_else(|| vec![0.0; tape.data(v).len()])
    }

    /// Copies the gradient of `v` into `tensor.grad`.
    pub fn populate(&self, tape: &Tape, v: Var, tensor: &mut Tensor) {
        tensor.grad = Some(self.get_or_zeros(tape, v));
    }
}

fn check_finite(op: &'static str, data: &[f32]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, contribution: &[f32]) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution.to_vec()),
    }
}

fn accumulate_owned(grads: &mut [Option<Vec<f32>>], v: Var, contribution: Vec<f32>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(&contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
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

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].data
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("tape node shape is consistent")
    }

    pub fn item(&self, v: Var) -> Result<f32> {
        let d = self.data(v);
        if d.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on value of shape {:?}",
                self.shape(v)
            )));
        }
        Ok(d[0])
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f32>,
        op: Op,
        needs_grad: bool,
    ) -> Result<Var> {
        check_finite(name, &data)?;
        Ok(self.push(shape, data, op, needs_grad))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf; it is differentiable iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        check_finite("leaf", t.data())?;
        Ok(self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad))
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f32>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        check_finite("constant", t.data())?;
        Ok(self.push(shape.to_vec(), t.into_data(), Op::Leaf, false))
    }

    /// Non-differentiable copy of `v` (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, data) = (n.shape.clone(), n.data.clone());
        self.push(shape, data, Op::Leaf, false)
    }

    /// Registers a named trainable parameter. Repeated registration of the
    /// same name returns the existing handle.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Result<Var> {
        if let Some(&v) = self.param_lookup.get(name) {
            return Ok(v);
        }
        check_finite("param", t.data())?;
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true);
        self.params.push((name.to_string(), v));
        self.param_lookup.insert(name.to_string(), v);
        Ok(v)
    }

    /// Registers a named parameter as a constant (frozen or inference use).
    pub fn frozen_param(&mut self, name: &str, t: &Tensor) -> Result<Var> {
        if let Some(&v) = self.param_lookup.get(name) {
            return Ok(v);
        }
        check_finite("param", t.data())?;
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false);
        self.param_lookup.insert(name.to_string(), v);
        Ok(v)
    }

    /// Trainable parameters registered so far, in registration order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data: Vec<f32> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let ng = self.ng(a) || self.ng(b);
        self.push_checked("add", self.shape(a).to_vec(), data, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data: Vec<f32> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let ng = self.ng(a) || self.ng(b);
        self.push_checked("sub", self.shape(a).to_vec(), data, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data: Vec<f32> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let ng = self.ng(a) || self.ng(b);
        self.push_checked("mul", self.shape(a).to_vec(), data, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let data: Vec<f32> = self.data(a).iter().map(|x| x * s).collect();
        let ng = self.ng(a);
        self.push_checked("scale", self.shape(a).to_vec(), data, Op::Scale(a, s), ng)
    }

    /// Matrix product of `a[m×k]` and `b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push_checked("matmul", vec![m, n], data, Op::MatMul { a, b, m, k, n }, ng)
    }

    /// Adds `bias[D]` to every row of `x[..., D]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [d] {
            return Err(Error::dim(
                "add_row",
                format!("bias {:?} for rows of {}", self.shape(bias), d),
            ));
        }
        let b = self.data(bias);
        let data: Vec<f32> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % d])
            .collect();
        let ng = self.ng(x) || self.ng(bias);
        self.push_checked("add_row", self.shape(x).to_vec(), data, Op::AddRow { x, bias }, ng)
    }

    /// Splits `x[B×C×...]` into (batch, channels, plane) and validates a
    /// per-channel operand of shape `[C]`, `[1×C]` or `[B×C]`.
    fn channel_layout(&self, op: &'static str, x: Var, s: Var) -> Result<(usize, usize, usize, bool)> {
        let sx = self.shape(x);
        if sx.len() < 2 {
            return Err(Error::dim(op, format!("input {:?} has no channel axis", sx)));
        }
        let (b, c) = (sx[0], sx[1]);
        let plane: usize = sx[2..].iter().product();
        let ss = self.shape(s);
        let per_batch = match ss {
            [cc] if *cc == c => false,
            [1, cc] if *cc == c => false,
            [bb, cc] if *bb == b && *cc == c => true,
            _ => {
                return Err(Error::dim(
                    op,
                    format!("operand {:?} for input {:?}", ss, sx),
                ))
            }
        };
        Ok((b, c, plane, per_batch))
    }

    /// `x[b,c,...] + s[b,c]` broadcast over trailing axes.
    pub fn channel_add(&mut self, x: Var, s: Var) -> Result<Var> {
        let (b, c, plane, per_batch) = self.channel_layout("channel_add", x, s)?;
        let (xd, sd) = (self.data(x), self.data(s));
        let mut data = xd.to_vec();
        for bi in 0..b {
            for ci in 0..c {
                let sv = sd[if per_batch { bi * c + ci } else { ci }];
                let off = (bi * c + ci) * plane;
                data[off..off + plane].iter_mut().for_each(|v| *v += sv);
            }
        }
        let ng = self.ng(x) || self.ng(s);
        self.push_checked("channel_add", self.shape(x).to_vec(), data, Op::ChannelAdd { x, s }, ng)
    }

    /// `x[b,c,...] · s[b,c]` broadcast over trailing axes.
    pub fn channel_mul(&mut self, x: Var, s: Var) -> Result<Var> {
        let (b, c, plane, per_batch) = self.channel_layout("channel_mul", x, s)?;
        let (xd, sd) = (self.data(x), self.data(s));
        let mut data = xd.to_vec();
        for bi in 0..b {
            for ci in 0..c {
                let sv = sd[if per_batch { bi * c + ci } else { ci }];
                let off = (bi * c + ci) * plane;
                data[off..off + plane].iter_mut().for_each(|v| *v *= sv);
            }
        }
        let ng = self.ng(x) || self.ng(s);
        self.push_checked("channel_mul", self.shape(x).to_vec(), data, Op::ChannelMul { x, s }, ng)
    }

    /// Cross-correlation of `x[B×C×H×W]` with `w[O×C×kh×kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, padding).ok_or_else(|| {
            Error::dim(
                "conv2d",
                format!(
                    "input {:?}, kernel {:?}, stride {}, padding {}",
                    self.shape(x),
                    self.shape(w),
                    stride,
                    padding
                ),
            )
        })?;
        let data = kernels::conv2d_forward(self.data(x), self.data(w), &geom);
        let ng = self.ng(x) || self.ng(w);
        self.push_checked("conv2d", geom.out_shape(), data, Op::Conv2d { x, w, geom }, ng)
    }

    /// Nearest-neighbour upsampling of `x[B×C×H×W]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(Error::dim("upsample", format!("{:?} by {}", s, factor)));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let xd = self.data(x);
        let mut data = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            for y in 0..oh {
                for xx in 0..ow {
                    data[(p * oh + y) * ow + xx] = xd[(p * h + y / factor) * w + xx / factor];
                }
            }
        }
        let ng = self.ng(x);
        self.push_checked("upsample", vec![s[0], s[1], oh, ow], data, Op::Upsample { x, factor }, ng)
    }

    /// Bilinear resize (align-corners-false) over the last two axes.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || out_h == 0 || out_w == 0 {
            return Err(Error::dim("bilinear_resize", format!("{:?} -> {}x{}", s, out_h, out_w)));
        }
        let (in_h, in_w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes: usize = s[..s.len() - 2].iter().product();
        let data = kernels::bilinear_resize(self.data(x), planes, in_h, in_w, out_h, out_w);
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([out_h, out_w]);
        let ng = self.ng(x);
        self.push_checked(
            "bilinear_resize",
            shape,
            data,
            Op::Bilinear { x, planes, in_h, in_w, out_h, out_w },
            ng,
        )
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "input {:?}, gamma {:?}, beta {:?}",
                    self.shape(x),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let xd = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let rows = xd.len() / d;
        let mut xhat = vec![0.0f32; xd.len()];
        let mut rstd = vec![0.0f32; rows];
        let mut data = vec![0.0f32; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            rstd[r] = rs as f32;
            for j in 0..d {
                let xh = ((row[j] as f64 - mean) * rs) as f32;
                xhat[r * d + j] = xh;
                data[r * d + j] = xh * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push_checked(
            "layer_norm",
            self.shape(x).to_vec(),
            data,
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            ng,
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f32> = self.data(x).iter().map(|&v| kernels::gelu(v)).collect();
        let ng = self.ng(x);
        self.push_checked("gelu", self.shape(x).to_vec(), data, Op::Gelu(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f32> = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let ng = self.ng(x);
        self.push_checked("relu", self.shape(x).to_vec(), data, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f32> = self.data(x).iter().map(|&v| kernels::sigmoid(v)).collect();
        let ng = self.ng(x);
        self.push_checked("sigmoid", self.shape(x).to_vec(), data, Op::Sigmoid(x), ng)
    }

    /// Elementwise clamp; gradient passes where `lo ≤ x ≤ hi`.
    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Result<Var> {
        let data: Vec<f32> = self.data(x).iter().map(|&v| v.clamp(lo, hi)).collect();
        let ng = self.ng(x);
        self.push_checked("clamp", self.shape(x).to_vec(), data, Op::Clamp { x, lo, hi }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().map(|&v| v as f64).sum::<f64>() as f32;
        let ng = self.ng(x);
        self.push_checked("sum", Vec::new(), vec![s], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.data(x).len().max(1);
        let s = (self.data(x).iter().map(|&v| v as f64).sum::<f64>() / n as f64) as f32;
        let ng = self.ng(x);
        self.push_checked("mean", Vec::new(), vec![s], Op::Mean(x), ng)
    }

    /// Mean squared difference of two same-shape values.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Global average pool: `[B×C×...] → [B×C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(Error::dim("spatial_mean", format!("{:?}", s)));
        }
        let plane: usize = s[2..].iter().product();
        let data: Vec<f32> = self
            .data(x)
            .chunks(plane)
            .map(|c| (c.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
            .collect();
        let ng = self.ng(x);
        self.push_checked("spatial_mean", vec![s[0], s[1]], data, Op::SpatialMean { x, plane }, ng)
    }

    /// `out[i] = x[map[i]]`, or zero where `map[i]` is `None`. Covers
    /// permutations, padding, cropping and embedding lookups.
    pub fn gather(&mut self, x: Var, map: Vec<Option<usize>>, out_shape: &[usize]) -> Result<Var> {
        let numel: usize = out_shape.iter().product();
        if numel != map.len() {
            return Err(Error::dim(
                "gather",
                format!("map of {} entries for shape {:?}", map.len(), out_shape),
            ));
        }
        let xd = self.data(x);
        let mut data = Vec::with_capacity(map.len());
        for m in &map {
            match *m {
                Some(j) if j >= xd.len() => {
                    return Err(Error::Index {
                        op: "gather",
                        index: j,
                        size: xd.len(),
                    })
                }
                Some(j) => data.push(xd[j]),
                None => data.push(0.0),
            }
        }
        let ng = self.ng(x);
        self.push_checked("gather", out_shape.to_vec(), data, Op::Gather { x, map }, ng)
    }

    /// Row lookup into `table[N×D]`: returns `[ids.len() × D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("embedding", format!("table {:?}", s)));
        }
        let (n, d) = (s[0], s[1]);
        let mut map = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(Error::Index {
                    op: "embedding",
                    index: id,
                    size: n,
                });
            }
            map.extend((0..d).map(|j| Some(id * d + j)));
        }
        self.gather(table, map, &[ids.len(), d])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.data(x).len() {
            return Err(Error::dim("reshape", format!("{:?} -> {:?}", self.shape(x), shape)));
        }
        let data = self.data(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), ng))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::dim("concat", format!("{:?} vs trailing {:?}", s, tail)));
            }
            rows += s[0];
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(shape, data, Op::Concat { parts: parts.to_vec() }, ng))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() || s[0] == 0 {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("logits {:?} with {} targets", s, targets.len()),
            ));
        }
        let (n, v) = (s[0], s[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index {
                op: "softmax_cross_entropy",
                index: t,
                size: v,
            });
        }
        let ld = self.data(logits);
        let mut probs = vec![0.0f64; n * v];
        let mut total = 0.0f64;
        for r in 0..n {
            let row = &ld[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let sum_exp: f64 = row.iter().map(|&l| (l as f64 - max).exp()).sum();
            let lse = max + sum_exp.ln();
            total += lse - row[targets[r]] as f64;
            for j in 0..v {
                probs[r * v + j] = (row[j] as f64 - max).exp() / sum_exp;
            }
        }
        let loss = (total / n as f64) as f32;
        let ng = self.ng(logits);
        self.push_checked(
            "softmax_cross_entropy",
            Vec::new(),
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Multi-head scaled dot-product attention over `batch` sequences packed
    /// row-wise in `q`, `k`, `v` (`[batch·L × D]`). `mask[i·L + j]` allows query
    /// `i` to attend to key `j`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        mask: Rc<Vec<bool>>,
    ) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if s.len() != 2 || self.shape(k) != s || self.shape(v) != s {
            return Err(Error::dim("attention", format!("q {:?}, k {:?}, v {:?}", s, self.shape(k), self.shape(v))));
        }
        let (rows, d) = (s[0], s[1]);
        if batch == 0 || rows % batch != 0 || heads == 0 || d % heads != 0 {
            return Err(Error::dim("attention", format!("{} rows, batch {}, dim {}, heads {}", rows, batch, d, heads)));
        }
        let len = rows / batch;
        if mask.len() != len * len {
            return Err(Error::dim("attention", format!("mask of {} for length {}", mask.len(), len)));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![0.0f32; batch * heads * len * len];
        let mut out = vec![0.0f32; rows * d];
        let mut scores = vec![0.0f64; len];
        for b in 0..batch {
            for h in 0..heads {
                let pbase = (b * heads + h) * len * len;
                for i in 0..len {
                    let qi = &qd[(b * len + i) * d + h * dh..(b * len + i) * d + (h + 1) * dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..len {
                        if mask[i * len + j] {
                            let kj = &kd[(b * len + j) * d + h * dh..(b * len + j) * d + (h + 1) * dh];
                            let sc = (kernels::dot(qi, kj) * scale) as f64;
                            scores[j] = sc;
                            max = max.max(sc);
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        return Err(Error::Contract(format!("attention row {} has no visible keys", i)));
                    }
                    let mut total = 0.0f64;
                    for j in 0..len {
                        if mask[i * len + j] {
                            let e = (scores[j] - max).exp();
                            scores[j] = e;
                            total += e;
                        }
                    }
                    let orow = (b * len + i) * d + h * dh;
                    for j in 0..len {
                        if mask[i * len + j] {
                            let p = (scores[j] / total) as f32;
                            probs[pbase + i * len + j] = p;
                            let vj = &vd[(b * len + j) * d + h * dh..(b * len + j) * d + (h + 1) * dh];
                            for t in 0..dh {
                                out[orow + t] += p * vj[t];
                            }
                        }
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push_checked(
            "attention",
            s,
            out,
            Op::Attention { q, k, v, batch, heads, probs, mask },
            ng,
        )
    }

    /// Rotary position embedding on `x[rows × D]` split into `heads` heads.
    /// Pairs `(2j, 2j+1)` of each head rotate by `positions[row]·θ_j`, with
    /// `θ_j = base^(−2j/head_dim)`.
    pub fn rotary(&mut self, x: Var, positions: &[usize], heads: usize, base: f32) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != positions.len() {
            return Err(Error::dim("rotary", format!("{:?} with {} positions", s, positions.len())));
        }
        let d = s[1];
        if heads == 0 || d % heads != 0 || (d / heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "rotary needs an even head dimension, got model dim {} with {} heads",
                d, heads
            )));
        }
        let dh = d / heads;
        let half = dh / 2;
        let mut cos = vec![0.0f32; positions.len() * half];
        let mut sin = vec![0.0f32; positions.len() * half];
        for (r, &pos) in positions.iter().enumerate() {
            for j in 0..half {
                let theta = (base as f64).powf(-2.0 * j as f64 / dh as f64);
                let angle = pos as f64 * theta;
                cos[r * half + j] = angle.cos() as f32;
                sin[r * half + j] = angle.sin() as f32;
            }
        }
        let xd = self.data(x);
        let mut out = vec![0.0f32; xd.len()];
        for r in 0..positions.len() {
            for h in 0..heads {
                for j in 0..half {
                    let i0 = r * d + h * dh + 2 * j;
                    let (c, sn) = (cos[r * half + j], sin[r * half + j]);
                    let (a, b) = (xd[i0], xd[i0 + 1]);
                    out[i0] = a * c - b * sn;
                    out[i0 + 1] = a * sn + b * c;
                }
            }
        }
        let ng = self.ng(x);
        self.push_checked("rotary", s, out, Op::Rotary { x, heads, cos, sin }, ng)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.data(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite gradient at tape node {}", i)));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g);
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g);
                }
                if self.ng(*b) {
                    accumulate_owned(grads, *b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let c = g.iter().zip(self.data(*b)).map(|(g, y)| g * y).collect();
                    accumulate_owned(grads, *a, c);
                }
                if self.ng(*b) {
                    let c = g.iter().zip(self.data(*a)).map(|(g, x)| g * x).collect();
                    accumulate_owned(grads, *b, c);
                }
            }
            Op::Scale(a, s) => {
                accumulate_owned(grads, *a, g.iter().map(|v| v * s).collect());
            }
            Op::MatMul { a, b, m, k, n } => {
                if self.ng(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::matmul_nt_acc(&mut ga, g, self.data(*b), *m, *n, *k);
                    accumulate_owned(grads, *a, ga);
                }
                if self.ng(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::matmul_tn_acc(&mut gb, self.data(*a), g, *m, *k, *n);
                    accumulate_owned(grads, *b, gb);
                }
            }
            Op::AddRow { x, bias } => {
                if self.ng(*x) {
                    accumulate(grads, *x, g);
                }
                if self.ng(*bias) {
                    let d = self.data(*bias).len();
                    let mut gb = vec![0.0f64; d];
                    for (i, v) in g.iter().enumerate() {
                        gb[i % d] += *v as f64;
                    }
                    accumulate_owned(grads, *bias, gb.into_iter().map(|v| v as f32).collect());
                }
            }
            Op::ChannelAdd { x, s } | Op::ChannelMul { x, s } => {
                let is_mul = matches!(node.op, Op::ChannelMul { .. });
                let (b, c, plane, per_batch) = self
                    .channel_layout("channel", *x, *s)
                    .expect("validated at forward");
                let sd = self.data(*s);
                let xd = self.data(*x);
                if self.ng(*x) {
                    let gx: Vec<f32> = if is_mul {
                        g.iter()
                            .enumerate()
                            .map(|(i, gv)| {
                                let bc = i / plane;
                                let (bi, ci) = (bc / c, bc % c);
                                gv * sd[if per_batch { bi * c + ci } else { ci }]
                            })
                            .collect()
                    } else {
                        g.to_vec()
                    };
                    accumulate_owned(grads, *x, gx);
                }
                if self.ng(*s) {
                    let mut gs = vec![0.0f64; sd.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * plane;
                            let acc: f64 = if is_mul {
                                g[off..off + plane]
                                    .iter()
                                    .zip(&xd[off..off + plane])
                                    .map(|(gv, xv)| (*gv as f64) * (*xv as f64))
                                    .sum()
                            } else {
                                g[off..off + plane].iter().map(|&v| v as f64).sum()
                            };
                            gs[if per_batch { bi * c + ci } else { ci }] += acc;
                        }
                    }
                    accumulate_owned(grads, *s, gs.into_iter().map(|v| v as f32).collect());
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (gx, gw) = kernels::conv2d_backward(
                    self.data(*x),
                    self.data(*w),
                    g,
                    geom,
                    self.ng(*x),
                    self.ng(*w),
                );
                if let Some(gx) = gx {
                    accumulate_owned(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    accumulate_owned(grads, *w, gw);
                }
            }
            Op::Upsample { x, factor } => {
                let s = self.shape(*x);
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (h * factor, w * factor);
                let mut gx = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for y in 0..oh {
                        for xx in 0..ow {
                            gx[(p * h + y / factor) * w + xx / factor] += g[(p * oh + y) * ow + xx];
                        }
                    }
                }
                accumulate_owned(grads, *x, gx);
            }
            Op::Bilinear { x, planes, in_h, in_w, out_h, out_w } => {
                let gx = kernels::bilinear_resize_backward(g, *planes, *in_h, *in_w, *out_h, *out_w);
                accumulate_owned(grads, *x, gx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gd = self.data(*gamma);
                let d = gd.len();
                let rows = g.len() / d;
                if self.ng(*gamma) {
                    let mut gg = vec![0.0f64; d];
                    for (i, v) in g.iter().enumerate() {
                        gg[i % d] += (*v as f64) * (xhat[i] as f64);
                    }
                    accumulate_owned(grads, *gamma, gg.into_iter().map(|v| v as f32).collect());
                }
                if self.ng(*beta) {
                    let mut gb = vec![0.0f64; d];
                    for (i, v) in g.iter().enumerate() {
                        gb[i % d] += *v as f64;
                    }
                    accumulate_owned(grads, *beta, gb.into_iter().map(|v| v as f32).collect());
                }
                if self.ng(*x) {
                    let mut gx = vec![0.0f32; g.len()];
                    for r in 0..rows {
                        let mut mean_gh = 0.0f64;
                        let mut mean_ghx = 0.0f64;
                        for j in 0..d {
                            let gh = (g[r * d + j] * gd[j]) as f64;
                            mean_gh += gh;
                            mean_ghx += gh * xhat[r * d + j] as f64;
                        }
                        mean_gh /= d as f64;
                        mean_ghx /= d as f64;
                        for j in 0..d {
                            let gh = (g[r * d + j] * gd[j]) as f64;
                            gx[r * d + j] = (rstd[r] as f64
                                * (gh - mean_gh - xhat[r * d + j] as f64 * mean_ghx))
                                as f32;
                        }
                    }
                    accumulate_owned(grads, *x, gx);
                }
            }
            Op::Gelu(x) => {
                let c = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(g, &v)| g * kernels::gelu_grad(v))
                    .collect();
                accumulate_owned(grads, *x, c);
            }
            Op::Relu(x) => {
                let c = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate_owned(grads, *x, c);
            }
            Op::Sigmoid(x) => {
                let c = g
                    .iter()
                    .zip(&node.data)
                    .map(|(g, &y)| g * y * (1.0 - y))
                    .collect();
                accumulate_owned(grads, *x, c);
            }
            Op::Clamp { x, lo, hi } => {
                let c = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(g, &v)| if v >= *lo && v <= *hi { *g } else { 0.0 })
                    .collect();
                accumulate_owned(grads, *x, c);
            }
            Op::Sum(x) => {
                let n = self.data(*x).len();
                accumulate_owned(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.data(*x).len();
                accumulate_owned(grads, *x, vec![g[0] / n as f32; n]);
            }
            Op::SpatialMean { x, plane } => {
                let inv = 1.0 / *plane as f32;
                let mut gx = Vec::with_capacity(g.len() * plane);
                for &v in g {
                    gx.extend(std::iter::repeat(v * inv).take(*plane));
                }
                accumulate_owned(grads, *x, gx);
            }
            Op::Gather { x, map } => {
                let mut gx = vec![0.0f32; self.data(*x).len()];
                for (i, m) in map.iter().enumerate() {
                    if let Some(j) = m {
                        gx[*j] += g[i];
                    }
                }
                accumulate_owned(grads, *x, gx);
            }
            Op::Reshape(x) => accumulate(grads, *x, g),
            Op::Concat { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.data(p).len();
                    if self.ng(p) {
                        accumulate(grads, p, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let n = targets.len();
                let v = probs.len() / n;
                let scale = g[0] as f64 / n as f64;
                let mut gl = vec![0.0f32; probs.len()];
                for r in 0..n {
                    for j in 0..v {
                        let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                        gl[r * v + j] = ((probs[r * v + j] - onehot) * scale) as f32;
                    }
                }
                accumulate_owned(grads, *logits, gl);
            }
            Op::Attention { q, k, v, batch, heads, probs, mask } => {
                self.attention_backward(*q, *k, *v, *batch, *heads, probs, mask, g, grads);
            }
            Op::Rotary { x, heads, cos, sin } => {
                let d = node.shape[1];
                let dh = d / heads;
                let half = dh / 2;
                let rows = node.shape[0];
                let mut gx = vec![0.0f32; g.len()];
                for r in 0..rows {
                    for h in 0..*heads {
                        for j in 0..half {
                            let i0 = r * d + h * dh + 2 * j;
                            let (c, s) = (cos[r * half + j], sin[r * half + j]);
                            let (g0, g1) = (g[i0], g[i0 + 1]);
                            gx[i0] = g0 * c + g1 * s;
                            gx[i0 + 1] = -g0 * s + g1 * c;
                        }
                    }
                }
                accumulate_owned(grads, *x, gx);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        probs: &[f32],
        mask: &[bool],
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let (rows, d) = (self.shape(q)[0], self.shape(q)[1]);
        let len = rows / batch;
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut gq = vec![0.0f32; rows * d];
        let mut gk = vec![0.0f32; rows * d];
        let mut gv = vec![0.0f32; rows * d];
        let mut dp = vec![0.0f32; len];
        for b in 0..batch {
            for h in 0..heads {
                let pbase = (b * heads + h) * len * len;
                let span = |row: usize| (b * len + row) * d + h * dh..(b * len + row) * d + (h + 1) * dh;
                for i in 0..len {
                    let go = &g[span(i)];
                    let mut weighted = 0.0f64;
                    for j in 0..len {
                        if mask[i * len + j] {
                            let p = probs[pbase + i * len + j];
                            let vj = &vd[span(j)];
                            dp[j] = kernels::dot(go, vj);
                            weighted += (p * dp[j]) as f64;
                            let gvj = &mut gv[span(j)];
                            for t in 0..dh {
                                gvj[t] += p * go[t];
                            }
                        }
                    }
                    let qi_range = span(i);
                    for j in 0..len {
                        if mask[i * len + j] {
                            let p = probs[pbase + i * len + j];
                            let ds = p * (dp[j] - weighted as f32) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let kr = span(j);
                            for t in 0..dh {
                                gq[qi_range.start + t] += ds * kd[kr.start + t];
                                gk[kr.start + t] += ds * qd[qi_range.start + t];
                            }
                        }
                    }
                }
            }
        }
        if self.ng(q) {
            accumulate_owned(grads, q, gq);
        }
        if self.ng(k) {
            accumulate_owned(grads, k, gk);
        }
        if self.ng(v) {
            accumulate_owned(grads, v, gv);
        }
    }

    /// Gradients for every registered trainable parameter, by name.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(String, Vec<f32>)> {
        self.params
            .iter()
            .map(|(name, v)| (name.clone(), grads.get_or_zeros(self, *v)))
            .collect()
    }
}
