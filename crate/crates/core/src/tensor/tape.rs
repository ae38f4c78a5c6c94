use super::kernels::{self, ConvGeom};
use super::{s, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization statistics for [`Tape::batch_norm`].
#[derive(Clone, Debug)]
pub enum NormStats<F> {
    /// Normalize by the statistics of the input itself; gradients flow through them.
    Batch { eps: F },
    /// Normalize by fixed per-channel statistics.
    Fixed { mean: Vec<F>, var: Vec<F>, eps: F },
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    AddRowBias {
        x: Var,
        bias: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Vec<F>,
    },
    LeakyRelu {
        x: Var,
        slope: F,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<F>,
        probs: Vec<F>,
    },
    Sum {
        x: Var,
    },
    Scale {
        x: Var,
        factor: F,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        batch_stats: bool,
    },
    Modulate {
        h: Var,
        gamma: Var,
        beta: Var,
    },
    SelectRows {
        x: Var,
        indices: Vec<usize>,
    },
    MergeRows {
        parts: Vec<(Var, Vec<usize>)>,
    },
    SlicePrefix {
        x: Var,
        dims: Vec<usize>,
    },
    GlobalAvgPool {
        x: Var,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    leaf_grad: Option<Vec<F>>,
}

/// Operation record for one forward pass.
///
/// Nodes are appended in execution order, so inputs always precede outputs.
/// [`Tape::backward`] may be called repeatedly: leaf gradients accumulate
/// until [`Tape::zero_grads`].
#[derive(Debug, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

fn dim_err(op: &'static str, detail: String) -> Error {
    Error::Dimension { op, detail }
}

/// Channel count and elements per (sample, channel) of a `B×C[×H×W]` tensor.
fn channel_layout(shape: &[usize]) -> Option<(usize, usize, usize)> {
    if shape.len() < 2 {
        return None;
    }
    let spatial: usize = shape[2..].iter().product();
    Some((shape[0], shape[1], spatial))
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            leaf_grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf; it is differentiable when `t.requires_grad()` is set.
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        let rg = t.requires_grad();
        let mut value = t;
        value.zero_grad();
        self.push(value, Op::Leaf, rg)
    }

    /// Active side (`x >= 0`) of every Leaky ReLU input recorded so far, in tape order.
    ///
    /// Two forward passes with equal patterns lie on the same linear piece of
    /// every activation, which finite-difference checks use to avoid kinks.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::LeakyRelu { x, .. } = node.op {
                out.extend(self.nodes[x.0].value.data().iter().map(|&v| v >= F::zero()));
            }
        }
        out
    }

    /// Records a leaf that receives gradients.
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t.with_grad())
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, mut t: Tensor<F>) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a differentiable leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].leaf_grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.leaf_grad = None;
        }
    }

    /// Matrix product `a[M×K] · b[K×N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        kernels::gemm_nn(
            m,
            k,
            n,
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, rg))
    }

    /// `x[M×N] + bias[N]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(dim_err("add_row_bias", format!("{sx:?} + {sb:?}")));
        }
        let n = sx[1];
        let b = self.value(bias).data();
        let out: Vec<F> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % n])
            .collect();
        let shape = sx.to_vec();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRowBias { x, bias }, rg))
    }

    /// Cross-correlation of `x[B×C×H×W]` with `w[F×C×k×k]` (no kernel flip).
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || stride == 0 {
            return Err(dim_err(
                "conv2d",
                format!("input {sx:?}, weight {sw:?}, stride {stride}"),
            ));
        }
        let k = sw[2];
        let (h, wd) = (sx[2] + 2 * pad, sx[3] + 2 * pad);
        if k > h || k > wd || (h - k) % stride != 0 || (wd - k) % stride != 0 {
            return Err(dim_err(
                "conv2d",
                format!("kernel {k} stride {stride} pad {pad} gives non-integral output on {sx:?}"),
            ));
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            height: sx[2],
            width: sx[3],
            out_ch: sw[0],
            kernel: k,
            stride,
            pad,
            out_h: (h - k) / stride + 1,
            out_w: (wd - k) / stride + 1,
        };
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let (p, plen, f) = (geom.patches(), geom.patch_len(), geom.out_ch);
        let wt = kernels::transpose(f, plen, self.value(w).data());
        let mut pf = vec![F::zero(); p * f];
        kernels::gemm_nn(p, plen, f, &cols, &wt, &mut pf);
        let out = patches_to_nchw(&pf, &geom);
        let shape = vec![geom.batch, f, geom.out_h, geom.out_w];
        let rg = self.rg(x) || self.rg(w);
        // cols are only needed for the weight gradient
        let cols = if self.rg(w) { cols } else { Vec::new() };
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d { x, w, geom, cols },
            rg,
        ))
    }

    /// Elementwise `max(x, slope·x)`. The derivative at exactly 0 is taken as 1.
    pub fn leaky_relu(&mut self, x: Var, slope: F) -> Result<Var> {
        if !(slope >= F::zero() && slope < F::one()) {
            return Err(Error::InvalidValue(format!(
                "leaky_relu slope {slope} outside [0, 1)"
            )));
        }
        let out: Vec<F> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v >= F::zero() { v } else { slope * v })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::LeakyRelu { x, slope }, rg))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let b = self.shape(logits).first().copied().unwrap_or(0);
        if b == 0 {
            return Err(Error::Empty("batch"));
        }
        let w = vec![F::one() / s::<F>(b as f64); b];
        self.softmax_xent_weighted(logits, labels, &w)
    }

    /// `Σᵢ wᵢ · (-log softmax(logitsᵢ)[labelᵢ])`, stabilized by max-subtraction.
    pub fn softmax_xent_weighted(
        &mut self,
        logits: Var,
        labels: &[usize],
        weights: &[F],
    ) -> Result<Var> {
        let sl = self.shape(logits);
        if sl.len() != 2 || sl[0] != labels.len() || labels.len() != weights.len() {
            return Err(dim_err(
                "softmax_xent",
                format!(
                    "logits {sl:?}, {} labels, {} weights",
                    labels.len(),
                    weights.len()
                ),
            ));
        }
        let (b, c) = (sl[0], sl[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: c,
            });
        }
        let z = self.value(logits).data();
        let mut probs = vec![F::zero(); b * c];
        let mut total = F::zero();
        for i in 0..b {
            let row = &z[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut denom = F::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[i * c + j] = e;
                denom += e;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p = *p / denom;
            }
            let nll = denom.ln() - (row[labels[i]] - max);
            total += weights[i] * nll;
        }
        let rg = self.rg(logits);
        let op = Op::SoftmaxXent {
            logits,
            labels: labels.to_vec(),
            weights: weights.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(total), op, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self
            .value(x)
            .data()
            .iter()
            .fold(F::zero(), |acc, &v| acc + v);
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::Sum { x }, rg)
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Var {
        let t = self.value(x);
        let out = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|&v| v * factor).collect(),
        )
        .expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Scale { x, factor }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y)
            .map(|(t, rg)| self.push(t, Op::Add { a, b }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y)
            .map(|(t, rg)| self.push(t, Op::Mul { a, b }, rg))
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(F, F) -> F,
    ) -> Result<(Tensor<F>, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(op, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((
            Tensor::new(ta.shape().to_vec(), data)?,
            self.rg(a) || self.rg(b),
        ))
    }

    /// Per-channel normalization of `x[B×C(×H×W)]` followed by `gamma·x̂ + beta`.
    ///
    /// With [`NormStats::Batch`] the returned pair holds the batch mean and the
    /// biased batch variance per channel.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<F>,
    ) -> Result<(Var, Option<(Vec<F>, Vec<F>)>)> {
        let sx = self.shape(x).to_vec();
        let (b, c, sp) =
            channel_layout(&sx).ok_or_else(|| dim_err("batch_norm", format!("{sx:?}")))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(dim_err(
                "batch_norm",
                format!(
                    "input {sx:?}, gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let xd = self.value(x).data();
        let (mean, var, eps, batch_stats) = match stats {
            NormStats::Batch { eps } => {
                let n = s::<F>((b * sp) as f64);
                let mut mean = vec![F::zero(); c];
                let mut var = vec![F::zero(); c];
                for ch in 0..c {
                    let mut acc = F::zero();
                    for bi in 0..b {
                        let base = (bi * c + ch) * sp;
                        for &v in &xd[base..base + sp] {
                            acc += v;
                        }
                    }
                    let mu = acc / n;
                    let mut sq = F::zero();
                    for bi in 0..b {
                        let base = (bi * c + ch) * sp;
                        for &v in &xd[base..base + sp] {
                            sq += (v - mu) * (v - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = sq / n;
                }
                (mean, var, eps, true)
            }
            NormStats::Fixed { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(dim_err(
                        "batch_norm",
                        format!("{} channels, stats of {}", c, mean.len()),
                    ));
                }
                (mean, var, eps, false)
            }
        };
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![F::zero(); xd.len()];
        let mut out = vec![F::zero(); xd.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * sp;
                for i in base..base + sp {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + be[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        };
        let v = self.push(Tensor::new(sx, out)?, op, rg);
        Ok((v, batch_stats.then_some((mean, var))))
    }

    /// Per-sample, per-channel affine `gamma[b,c]·h[b,c,…] + beta[b,c]`.
    pub fn modulate(&mut self, h: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sh = self.shape(h).to_vec();
        let (b, c, sp) =
            channel_layout(&sh).ok_or_else(|| dim_err("modulate", format!("{sh:?}")))?;
        if self.shape(gamma) != [b, c] || self.shape(beta) != [b, c] {
            return Err(dim_err(
                "modulate",
                format!(
                    "features {sh:?}, gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let (hd, g, be) = (
            self.value(h).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let mut out = vec![F::zero(); hd.len()];
        for bc in 0..b * c {
            for i in bc * sp..(bc + 1) * sp {
                out[i] = g[bc] * hd[i] + be[bc];
            }
        }
        let rg = self.rg(h) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(Tensor::new(sh, out)?, Op::Modulate { h, gamma, beta }, rg))
    }

    /// Gathers rows of the leading axis.
    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let n = self.shape(x).first().copied().unwrap_or(0);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(dim_err("select_rows", format!("index {bad} of {n} rows")));
        }
        let out = self.value(x).select_rows(indices);
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::SelectRows {
                x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Inverse of a partition by [`Tape::select_rows`]: row `idx[j]` of the
    /// output is row `j` of the corresponding part.
    pub fn merge_rows(&mut self, parts: &[(Var, Vec<usize>)]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("merge_rows parts"))?.0;
        let tail = self.shape(first)[1..].to_vec();
        let total: usize = parts.iter().map(|(_, idx)| idx.len()).sum();
        let row: usize = tail.iter().product();
        let mut out = vec![F::zero(); total * row];
        let mut seen = vec![false; total];
        for (v, idx) in parts {
            let t = self.value(*v);
            if t.shape()[1..] != tail[..] || t.shape()[0] != idx.len() {
                return Err(dim_err(
                    "merge_rows",
                    format!("part {:?} with {} indices", t.shape(), idx.len()),
                ));
            }
            for (j, &i) in idx.iter().enumerate() {
                if i >= total || seen[i] {
                    return Err(dim_err(
                        "merge_rows",
                        format!("indices do not partition 0..{total}"),
                    ));
                }
                seen[i] = true;
                out[i * row..(i + 1) * row].copy_from_slice(&t.data()[j * row..(j + 1) * row]);
            }
        }
        let mut shape = vec![total];
        shape.extend(tail);
        let rg = parts.iter().any(|(v, _)| self.rg(*v));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MergeRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Leading sub-block `x[0..dims[0], 0..dims[1], …]`.
    pub fn slice_prefix(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != dims.len() || dims.iter().zip(&sx).any(|(d, s)| d > s) {
            return Err(dim_err("slice_prefix", format!("{dims:?} from {sx:?}")));
        }
        let mut out = Vec::with_capacity(dims.iter().product());
        for_each_prefix_offset(&sx, dims, |off| out.push(self.value(x).data()[off]));
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(dims.to_vec(), out)?,
            Op::SlicePrefix {
                x,
                dims: dims.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over spatial axes: `B×C×H×W → B×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(dim_err("global_avg_pool", format!("{sx:?}")));
        }
        let sp = sx[2] * sx[3];
        let n = s::<F>(sp as f64);
        let out: Vec<F> = self
            .value(x)
            .data()
            .chunks(sp)
            .map(|plane| plane.iter().fold(F::zero(), |a, &v| a + v) / n)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![sx[0], sx[1]], out)?,
            Op::GlobalAvgPool { x },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`; leaf gradients accumulate (`+=`).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 || shape.len() > 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<F>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.leaf_grad {
                    Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.leaf_grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[F], adj: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        let mut send = |v: Var, grad: Vec<F>| match &mut adj[v.0] {
            Some(buf) => buf.iter_mut().zip(&grad).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(grad),
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    let mut da = vec![F::zero(); m * k];
                    kernels::gemm_nt(m, n, k, g, val(*b).data(), &mut da);
                    send(*a, da);
                }
                if wants(*b) {
                    let mut db = vec![F::zero(); k * n];
                    kernels::gemm_tn(k, m, n, val(*a).data(), g, &mut db);
                    send(*b, db);
                }
            }
            Op::AddRowBias { x, bias } => {
                let n = val(*bias).numel();
                if wants(*x) {
                    send(*x, g.to_vec());
                }
                if wants(*bias) {
                    let mut db = vec![F::zero(); n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                    send(*bias, db);
                }
            }
            Op::Conv2d { x, w, geom, cols } => {
                let (p, plen, f) = (geom.patches(), geom.patch_len(), geom.out_ch);
                let gp = nchw_to_patches(g, geom);
                if wants(*w) {
                    let mut dw = vec![F::zero(); f * plen];
                    kernels::gemm_tn(f, p, plen, &gp, cols, &mut dw);
                    send(*w, dw);
                }
                if wants(*x) {
                    let mut dcols = vec![F::zero(); p * plen];
                    kernels::gemm_nn(p, f, plen, &gp, val(*w).data(), &mut dcols);
                    let mut dx = vec![F::zero(); val(*x).numel()];
                    kernels::col2im(&dcols, geom, &mut dx);
                    send(*x, dx);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let dx = val(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v >= F::zero() { gv } else { gv * *slope })
                    .collect();
                send(*x, dx);
            }
            Op::SoftmaxXent {
                logits,
                labels,
                weights,
                probs,
            } => {
                let c = val(*logits).shape()[1];
                let up = g[0];
                let mut dz = probs.clone();
                for (r, (&l, &w)) in labels.iter().zip(weights).enumerate() {
                    dz[r * c + l] -= F::one();
                    for v in &mut dz[r * c..(r + 1) * c] {
                        *v = *v * w * up;
                    }
                }
                send(*logits, dz);
            }
            Op::Sum { x } => send(*x, vec![g[0]; val(*x).numel()]),
            Op::Scale { x, factor } => send(*x, g.iter().map(|&v| v * *factor).collect()),
            Op::Add { a, b } => {
                if wants(*a) {
                    send(*a, g.to_vec());
                }
                if wants(*b) {
                    send(*b, g.to_vec());
                }
            }
            Op::Mul { a, b } => {
                if wants(*a) {
                    send(
                        *a,
                        g.iter().zip(val(*b).data()).map(|(&u, &v)| u * v).collect(),
                    );
                }
                if wants(*b) {
                    send(
                        *b,
                        g.iter().zip(val(*a).data()).map(|(&u, &v)| u * v).collect(),
                    );
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (b, c, sp) = channel_layout(val(*x).shape()).expect("checked in forward");
                let gam = val(*gamma).data();
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * sp;
                        for j in base..base + sp {
                            dgamma[ch] += g[j] * xhat[j];
                            dbeta[ch] += g[j];
                        }
                    }
                }
                if wants(*x) {
                    let mut dx = vec![F::zero(); g.len()];
                    let n = s::<F>((b * sp) as f64);
                    for bi in 0..b {
                        for ch in 0..c {
                            let base = (bi * c + ch) * sp;
                            let scale = gam[ch] * inv_std[ch];
                            for j in base..base + sp {
                                dx[j] = if *batch_stats {
                                    // dβ = Σ dy and dγ = Σ dy·x̂ per channel
                                    scale * (g[j] - dbeta[ch] / n - xhat[j] * dgamma[ch] / n)
                                } else {
                                    scale * g[j]
                                };
                            }
                        }
                    }
                    send(*x, dx);
                }
                if wants(*gamma) {
                    send(*gamma, dgamma);
                }
                if wants(*beta) {
                    send(*beta, dbeta);
                }
            }
            Op::Modulate { h, gamma, beta } => {
                let (b, c, sp) = channel_layout(val(*h).shape()).expect("checked in forward");
                let (hd, gm) = (val(*h).data(), val(*gamma).data());
                if wants(*h) {
                    let mut dh = vec![F::zero(); g.len()];
                    for bc in 0..b * c {
                        for j in bc * sp..(bc + 1) * sp {
                            dh[j] = g[j] * gm[bc];
                        }
                    }
                    send(*h, dh);
                }
                let mut dg = vec![F::zero(); b * c];
                let mut db = vec![F::zero(); b * c];
                for bc in 0..b * c {
                    for j in bc * sp..(bc + 1) * sp {
                        dg[bc] += g[j] * hd[j];
                        db[bc] += g[j];
                    }
                }
                if wants(*gamma) {
                    send(*gamma, dg);
                }
                if wants(*beta) {
                    send(*beta, db);
                }
            }
            Op::SelectRows { x, indices } => {
                let src = val(*x);
                let row = src.row_len();
                let mut dx = vec![F::zero(); src.numel()];
                for (j, &r) in indices.iter().enumerate() {
                    for (a, &b) in dx[r * row..(r + 1) * row]
                        .iter_mut()
                        .zip(&g[j * row..(j + 1) * row])
                    {
                        *a += b;
                    }
                }
                send(*x, dx);
            }
            Op::MergeRows { parts } => {
                let row = nodes[i].value.row_len();
                for (v, idx) in parts {
                    if !wants(*v) {
                        continue;
                    }
                    let mut dv = Vec::with_capacity(idx.len() * row);
                    for &r in idx {
                        dv.extend_from_slice(&g[r * row..(r + 1) * row]);
                    }
                    send(*v, dv);
                }
            }
            Op::SlicePrefix { x, dims } => {
                let sx = val(*x).shape();
                let mut dx = vec![F::zero(); val(*x).numel()];
                let mut j = 0;
                for_each_prefix_offset(sx, dims, |off| {
                    dx[off] = g[j];
                    j += 1;
                });
                send(*x, dx);
            }
            Op::GlobalAvgPool { x } => {
                let sx = val(*x).shape();
                let sp = sx[2] * sx[3];
                let n = s::<F>(sp as f64);
                let mut dx = Vec::with_capacity(val(*x).numel());
                for &gv in g {
                    dx.extend(std::iter::repeat_n(gv / n, sp));
                }
                send(*x, dx);
            }
        }
    }
}

/// Visits, in row-major order, the flat offsets within `shape` of the leading block `dims`.
fn for_each_prefix_offset(shape: &[usize], dims: &[usize], mut f: impl FnMut(usize)) {
    if dims.contains(&0) {
        return;
    }
    let nd = shape.len();
    if nd == 0 {
        f(0);
        return;
    }
    let mut strides = vec![1usize; nd];
    for i in (0..nd - 1).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let mut idx = vec![0usize; nd];
    loop {
        let base: usize = idx[..nd - 1].iter().zip(&strides).map(|(i, s)| i * s).sum();
        for last in 0..dims[nd - 1] {
            f(base + last);
        }
        // odometer over the leading axes
        let mut ax = nd - 1;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < dims[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

fn patches_to_nchw<F: Scalar>(pf: &[F], g: &ConvGeom) -> Vec<F> {
    let hw = g.out_h * g.out_w;
    let f = g.out_ch;
    let mut out = vec![F::zero(); pf.len()];
    for b in 0..g.batch {
        for p in 0..hw {
            for c in 0..f {
                out[(b * f + c) * hw + p] = pf[(b * hw + p) * f + c];
            }
        }
    }
    out
}

fn nchw_to_patches<F: Scalar>(x: &[F], g: &ConvGeom) -> Vec<F> {
    let hw = g.out_h * g.out_w;
    let f = g.out_ch;
    let mut out = vec![F::zero(); x.len()];
    for b in 0..g.batch {
        for c in 0..f {
            for p in 0..hw {
                out[(b * hw + p) * f + c] = x[(b * f + c) * hw + p];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut tape = Tape::<f64>::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let p = tape.constant(t(&[1, 1], &[2.0]));
        let q = tape.constant(t(&[1, 1], &[3.0]));
        let r = tape.matmul(p, q).unwrap();
        assert_eq!(tape.value(r).data(), &[6.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn conv_identity_kernel_and_zero_weights() {
        let mut tape = Tape::<f64>::new();
        let xs: Vec<f64> = (0..25).map(|i| i as f64 * 0.1).collect();
        let x = tape.constant(t(&[1, 1, 5, 5], &xs));
        let ones = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, ones, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &xs[..]);

        let zeros = tape.constant(Tensor::zeros(&[3, 1, 3, 3]));
        let z = tape.conv2d(x, zeros, 1, 1).unwrap();
        assert_eq!(tape.shape(z), &[1, 3, 5, 5]);
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_rejects_non_integral_extent() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 6, 6]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(tape.conv2d(x, w, 2, 0).is_err());
        assert!(tape.conv2d(x, w, 2, 1).is_err());
        let big = tape.constant(Tensor::zeros(&[1, 1, 9, 9]));
        assert!(tape.conv2d(x, big, 1, 1).is_err());
    }

    #[test]
    fn leaky_relu_values_and_kink_convention() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[4], &[-1.0, 3.0, -2.0, 0.0]));
        let y = tape.leaky_relu(x, 0.01).unwrap();
        assert_eq!(tape.value(y).data(), &[-0.01, 3.0, -0.02, 0.0]);
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.01, 1.0, 0.01, 1.0]);
        assert!(tape.leaky_relu(x, 1.0).is_err());
    }

    #[test]
    fn xent_uniform_and_margins() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[3, 10]));
        let l = tape.softmax_xent(z, &[0, 4, 9]).unwrap();
        assert!((tape.value(l).data()[0] - 10f64.ln()).abs() < 1e-12);

        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 10.0] {
            let mut logits = vec![0.0; 10];
            logits[2] = margin;
            let z = tape.constant(t(&[1, 10], &logits));
            let l = tape.softmax_xent(z, &[2]).unwrap();
            let v = tape.value(l).data()[0];
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-3);
    }

    #[test]
    fn xent_rejects_bad_label() {
        let mut tape = Tape::<f32>::new();
        let z = tape.constant(Tensor::zeros(&[1, 3]));
        assert_eq!(
            tape.softmax_xent(z, &[3]),
            Err(Error::LabelOutOfRange {
                label: 3,
                classes: 3
            })
        );
    }

    #[test]
    fn xent_gradient_is_softmax_minus_onehot() {
        let mut tape = Tape::<f64>::new();
        let z = tape.param(t(&[1, 3], &[0.5, -1.0, 2.0]));
        let l = tape.softmax_xent(z, &[1]).unwrap();
        tape.backward(l).unwrap();
        let e: Vec<f64> = [0.5f64, -1.0, 2.0].iter().map(|v| v.exp()).collect();
        let sum: f64 = e.iter().sum();
        let want = [e[0] / sum, e[1] / sum - 1.0, e[2] / sum];
        for (a, b) in tape.grad(z).unwrap().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sum_gradient_is_ones_and_backward_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]));
        let l = tape.sum(x);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0; 4]);
        tape.zero_grads();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(&[3]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constant_input_to_batch_norm_yields_beta() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[4, 2, 3, 3], 0.7));
        let g = tape.constant(t(&[2], &[1.5, 2.0]));
        let b = tape.constant(t(&[2], &[0.25, -1.0]));
        let (y, stats) = tape
            .batch_norm(x, g, b, NormStats::Batch { eps: 1e-5 })
            .unwrap();
        let (mean, var) = stats.unwrap();
        assert!(var.iter().all(|&v| v < 1e-20));
        assert!((mean[0] - 0.7).abs() < 1e-15);
        for (i, v) in tape.value(y).data().iter().enumerate() {
            let beta = if (i / 9) % 2 == 0 { 0.25 } else { -1.0 };
            assert!((v - beta).abs() < 1e-9);
        }
    }

    #[test]
    fn select_and_merge_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[4, 2], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]));
        let a = tape.select_rows(x, &[0, 3]).unwrap();
        let b = tape.select_rows(x, &[1, 2]).unwrap();
        let m = tape
            .merge_rows(&[(a, vec![0, 3]), (b, vec![1, 2])])
            .unwrap();
        assert_eq!(tape.value(m).data(), tape.value(x).data());
        let bad = tape.merge_rows(&[(a, vec![0, 1]), (b, vec![1, 2])]);
        assert!(bad.is_err());
    }

    #[test]
    fn slice_prefix_takes_leading_block() {
        let mut tape = Tape::<f64>::new();
        let v: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let x = tape.param(t(&[2, 3, 4], &v));
        let y = tape.slice_prefix(x, &[1, 2, 3]).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 1.0, 2.0, 4.0, 5.0, 6.0]);
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        let g = tape.grad(x).unwrap();
        assert_eq!(g.iter().filter(|&&v| v == 1.0).count(), 6);
        assert_eq!(g[3], 0.0);
        assert_eq!(g[12], 0.0);
    }

    #[test]
    fn forward_does_not_mutate_inputs() {
        let mut tape = Tape::<f64>::new();
        let src = t(
            &[1, 1, 4, 4],
            &(0..16).map(|i| i as f64 - 7.5).collect::<Vec<_>>(),
        );
        let x = tape.param(src.clone());
        let w = tape.param(t(&[2, 1, 3, 3], &[0.1; 18]));
        let y = tape.conv2d(x, w, 1, 1).unwrap();
        let y = tape.leaky_relu(y, 0.1).unwrap();
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert_eq!(tape.value(x).data(), src.data());
    }
}
