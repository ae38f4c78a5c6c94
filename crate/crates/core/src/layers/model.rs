use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::batchnorm::{width_channels, Branch, Mode, NormOutcome, NormUnit, SwitchableDualBN};
use super::encoder::{EncodingScheme, LambdaEncoder};
use super::film::{film_forward, FiLMBlock, Mlp, MlpVars};
use crate::error::{Error, Result};
use crate::tensor::{s, Scalar, Tape, Tensor, Var};

/// Activation slope of the backbone's Leaky ReLUs.
pub const BACKBONE_SLOPE: f64 = 0.1;

/// Batch-norm flavour of every normalization layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnStyle {
    /// `BN_c` / `BN_a` pair routed by `λ`.
    Dual,
    /// A single BN shared by all `λ`.
    Normal,
}

impl std::fmt::Display for BnStyle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BnStyle::Dual => "dual",
            BnStyle::Normal => "normal",
        })
    }
}

impl std::str::FromStr for BnStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "dual" => Ok(BnStyle::Dual),
            "normal" => Ok(BnStyle::Normal),
            other => Err(Error::InvalidValue(format!("unknown bn style {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    /// Batch norm (dual and switchable as configured), followed by FiLM when the model is conditioned.
    Norm,
    LeakyRelu {
        slope: f64,
    },
    GlobalAvgPool,
    Dense {
        out_features: usize,
    },
}

/// Architecture of a conditional, optionally slimmable network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    /// `(C, H, W)` of one input image.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub classes: usize,
    /// Width factors, ascending.
    pub widths: Vec<f64>,
    pub bn: BnStyle,
    /// `None` builds an unconditioned network (no FiLM blocks).
    pub encoding: Option<EncodingScheme>,
}

impl ModelSpec {
    /// conv(16,k3) → BN+FiLM → LReLU → conv(32,k4,s2,p1) → BN+FiLM → LReLU → GAP → dense(classes).
    ///
    /// The stride-2 layer uses a 4×4 kernel so even input extents halve exactly.
    pub fn desk(
        input: [usize; 3],
        classes: usize,
        widths: &[f64],
        bn: BnStyle,
        encoding: Option<EncodingScheme>,
    ) -> Result<Self> {
        let spec = ModelSpec {
            input,
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 16,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
                LayerSpec::Norm,
                LayerSpec::LeakyRelu {
                    slope: BACKBONE_SLOPE,
                },
                LayerSpec::Conv {
                    out_channels: 32,
                    kernel: 4,
                    stride: 2,
                    pad: 1,
                },
                LayerSpec::Norm,
                LayerSpec::LeakyRelu {
                    slope: BACKBONE_SLOPE,
                },
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense {
                    out_features: classes,
                },
            ],
            classes,
            widths: widths.to_vec(),
            bn,
            encoding,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn conditioned(&self) -> bool {
        self.encoding.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidValue(m));
        if self.widths.is_empty() {
            return bad("width list is empty".into());
        }
        if self.widths.iter().any(|&w| !(w > 0.0 && w <= 1.0)) {
            return bad(format!(
                "width factors {:?} must lie in (0, 1]",
                self.widths
            ));
        }
        if self.widths.windows(2).any(|p| p[0] >= p[1]) {
            return bad(format!(
                "width factors {:?} must be strictly ascending",
                self.widths
            ));
        }
        if self.classes < 2 {
            return bad("at least two classes required".into());
        }
        match self.layers.last() {
            Some(LayerSpec::Dense { out_features }) if *out_features == self.classes => {}
            _ => return bad("last layer must be a dense layer with one output per class".into()),
        }
        let mut spatial = true;
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                LayerSpec::Norm => {
                    if !matches!(
                        self.layers.get(i.wrapping_sub(1)),
                        Some(LayerSpec::Conv { .. } | LayerSpec::Dense { .. })
                    ) {
                        return bad(format!(
                            "normalization layer {i} must follow a conv or dense layer"
                        ));
                    }
                }
                LayerSpec::Conv { .. } if !spatial => {
                    return bad(format!("conv layer {i} after pooling"))
                }
                LayerSpec::GlobalAvgPool => spatial = false,
                LayerSpec::Dense { .. } if spatial => {
                    return bad(format!("dense layer {i} before pooling"))
                }
                LayerSpec::LeakyRelu { slope } if !(0.0..1.0).contains(slope) => {
                    return bad(format!("slope {slope} outside [0, 1)"))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn has_width(&self, width: f64) -> bool {
        self.widths.iter().any(|&w| (w - width).abs() < 1e-9)
    }
}

/// Trainable state of one layer.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerState<F> {
    Conv {
        weight: Tensor<F>,
        stride: usize,
        pad: usize,
    },
    Norm {
        bn: SwitchableDualBN<F>,
        film: Option<FiLMBlock<F>>,
    },
    LeakyRelu {
        slope: f64,
    },
    GlobalAvgPool,
    Dense {
        weight: Tensor<F>,
        bias: Tensor<F>,
    },
}

/// Running-statistic update produced by a train-mode forward pass.
#[derive(Clone, Debug)]
pub struct StatUpdate<F> {
    pub layer: usize,
    pub width_index: usize,
    pub branch: Branch,
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

/// Per-forward routing summary.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RoutingReport {
    /// Rows routed to `BN_c` and to `BN_a` (single-BN rows count as `clean`).
    pub clean_rows: usize,
    pub adv_rows: usize,
    /// Normalization calls that fell back to running statistics in train mode.
    pub fallbacks: usize,
}

/// Handles and side effects of one forward pass.
#[derive(Debug)]
pub struct Forward<F> {
    pub logits: Var,
    /// `(parameter index, tape handle)` for every parameter bound as a differentiable leaf.
    pub bound: Vec<(usize, Var)>,
    pub stats: Vec<StatUpdate<F>>,
    pub routing: RoutingReport,
}

/// Forward-pass options besides the inputs.
#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    pub width: f64,
    pub mode: Mode,
    /// Bind parameters as differentiable leaves.
    pub param_grads: bool,
}

impl RunOptions {
    pub fn eval(width: f64) -> Self {
        RunOptions {
            width,
            mode: Mode::Eval,
            param_grads: false,
        }
    }

    pub fn train(width: f64) -> Self {
        RunOptions {
            width,
            mode: Mode::Train,
            param_grads: true,
        }
    }
}

/// A conditional network `f(x, λ; θ)` with optional width switching.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<F> {
    spec: ModelSpec,
    encoder: Option<LambdaEncoder>,
    layers: Vec<LayerState<F>>,
    param_base: Vec<usize>,
}

fn fmt_width(w: f64) -> String {
    format!("{w:.2}")
}

fn branch_tag<F: Scalar>(unit: &NormUnit<F>, b: Branch) -> &'static str {
    if unit.is_dual() {
        b.tag()
    } else {
        "n"
    }
}

impl<F: Scalar> Model<F> {
    /// Initializes a model. Backbone and FiLM weights draw from independent
    /// seeded streams, so conditioned and unconditioned models with the same
    /// seed share their backbone initialization.
    pub fn new(spec: ModelSpec, encoder: Option<LambdaEncoder>, seed: u64) -> Result<Self> {
        spec.validate()?;
        match (&spec.encoding, &encoder) {
            (None, None) => {}
            (Some(s), Some(e)) if *s == e.scheme() => {}
            _ => {
                return Err(Error::InvalidValue(
                    "encoder does not match the model's conditioning".into(),
                ))
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut film_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_F11A_0000_0001);
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut channels = spec.input[0];
        let n_layers = spec.layers.len();
        for (i, l) in spec.layers.iter().enumerate() {
            let state = match *l {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                } => {
                    let fan_in = channels * kernel * kernel;
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                    let data = (0..out_channels * fan_in)
                        .map(|_| s(normal.sample(&mut rng)))
                        .collect();
                    let weight = Tensor::new(vec![out_channels, channels, kernel, kernel], data)?
                        .with_grad();
                    channels = out_channels;
                    LayerState::Conv {
                        weight,
                        stride,
                        pad,
                    }
                }
                LayerSpec::Norm => {
                    let bn =
                        SwitchableDualBN::new(channels, &spec.widths, spec.bn == BnStyle::Dual);
                    let film = encoder
                        .as_ref()
                        .map(|e| FiLMBlock::new(e.dim(), channels, &mut film_rng));
                    LayerState::Norm { bn, film }
                }
                LayerSpec::LeakyRelu { slope } => LayerState::LeakyRelu { slope },
                LayerSpec::GlobalAvgPool => LayerState::GlobalAvgPool,
                LayerSpec::Dense { out_features } => {
                    let bound = (1.0 / channels as f64).sqrt();
                    let u = Uniform::new(-bound, bound).expect("valid range");
                    let w = (0..channels * out_features)
                        .map(|_| s(u.sample(&mut rng)))
                        .collect();
                    let b = (0..out_features).map(|_| s(u.sample(&mut rng))).collect();
                    let weight = Tensor::new(vec![channels, out_features], w)?.with_grad();
                    let bias = Tensor::new(vec![out_features], b)?.with_grad();
                    channels = out_features;
                    debug_assert!(i + 1 < n_layers || out_features == spec.classes);
                    LayerState::Dense { weight, bias }
                }
            };
            layers.push(state);
        }
        let mut model = Model {
            spec,
            encoder,
            layers,
            param_base: Vec::new(),
        };
        model.index_params();
        Ok(model)
    }

    fn index_params(&mut self) {
        let mut base = 0;
        self.param_base = self
            .layers
            .iter()
            .map(|l| {
                let here = base;
                base += match l {
                    LayerState::Conv { .. } => 1,
                    LayerState::Norm { bn, film } => {
                        bn.entries()
                            .iter()
                            .map(|(_, u)| 2 * u.branches().len())
                            .sum::<usize>()
                            + if film.is_some() { 8 } else { 0 }
                    }
                    LayerState::Dense { .. } => 2,
                    _ => 0,
                };
                here
            })
            .collect();
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn encoder(&self) -> Option<&LambdaEncoder> {
        self.encoder.as_ref()
    }

    pub fn layers(&self) -> &[LayerState<F>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerState<F>] {
        &mut self.layers
    }

    /// All trainable tensors with stable names, in optimizer order.
    pub fn params(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                LayerState::Conv { weight, .. } => {
                    out.push((format!("layers.{i}.conv.weight"), weight))
                }
                LayerState::Norm { bn, film } => {
                    for (w, unit) in bn.entries() {
                        for &b in unit.branches() {
                            let st = unit.select(b);
                            let p =
                                format!("layers.{i}.bn.w{}.{}", fmt_width(*w), branch_tag(unit, b));
                            out.push((format!("{p}.gamma"), &st.gamma));
                            out.push((format!("{p}.beta"), &st.beta));
                        }
                    }
                    if let Some(f) = film {
                        for (g, m) in [("g1", &f.g1), ("g2", &f.g2)] {
                            for (n, t) in ["w1", "b1", "w2", "b2"].iter().zip(m.params()) {
                                out.push((format!("layers.{i}.film.{g}.{n}"), t));
                            }
                        }
                    }
                }
                LayerState::Dense { weight, bias } => {
                    out.push((format!("layers.{i}.dense.weight"), weight));
                    out.push((format!("layers.{i}.dense.bias"), bias));
                }
                _ => {}
            }
        }
        out
    }

    /// Mutable trainable tensors, same order as [`Model::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = Vec::new();
        for l in self.layers.iter_mut() {
            match l {
                LayerState::Conv { weight, .. } => out.push(weight),
                LayerState::Norm { bn, film } => {
                    for (_, unit) in bn.entries_mut() {
                        match unit {
                            NormUnit::Single(st) => {
                                out.push(&mut st.gamma);
                                out.push(&mut st.beta);
                            }
                            NormUnit::Dual(d) => {
                                out.push(&mut d.bn_c.gamma);
                                out.push(&mut d.bn_c.beta);
                                out.push(&mut d.bn_a.gamma);
                                out.push(&mut d.bn_a.beta);
                            }
                        }
                    }
                    if let Some(f) = film {
                        out.extend(f.g1.params_mut());
                        out.extend(f.g2.params_mut());
                    }
                }
                LayerState::Dense { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                _ => {}
            }
        }
        out
    }

    /// Running statistics: `(name, mean or var)` for every normalization branch and width.
    pub fn buffers(&self) -> Vec<(String, &[F])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if let LayerState::Norm { bn, .. } = l {
                for (w, unit) in bn.entries() {
                    for &b in unit.branches() {
                        let st = unit.select(b);
                        let p = format!("layers.{i}.bn.w{}.{}", fmt_width(*w), branch_tag(unit, b));
                        out.push((format!("{p}.running_mean"), &st.running_mean[..]));
                        out.push((format!("{p}.running_var"), &st.running_var[..]));
                    }
                }
            }
        }
        out
    }

    /// Mutable running statistics, same order as [`Model::buffers`].
    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<F>> {
        let mut out = Vec::new();
        for l in self.layers.iter_mut() {
            if let LayerState::Norm { bn, .. } = l {
                for (_, unit) in bn.entries_mut() {
                    match unit {
                        NormUnit::Single(st) => {
                            out.push(&mut st.running_mean);
                            out.push(&mut st.running_var);
                        }
                        NormUnit::Dual(d) => {
                            out.push(&mut d.bn_c.running_mean);
                            out.push(&mut d.bn_c.running_var);
                            out.push(&mut d.bn_a.running_mean);
                            out.push(&mut d.bn_a.running_var);
                        }
                    }
                }
            }
        }
        out
    }

    pub fn zero_grads(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }

    /// Adds tape gradients of bound parameters into the model's gradient buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape<F>, bound: &[(usize, Var)]) {
        let mut params = self.params_mut();
        for &(idx, var) in bound {
            if let Some(g) = tape.grad(var) {
                params[idx].accumulate_grad(g);
            }
        }
    }

    /// Folds running-statistic updates from a train-mode forward into the BN branches.
    pub fn commit_stats(&mut self, updates: Vec<StatUpdate<F>>) {
        for u in updates {
            if let LayerState::Norm { bn, .. } = &mut self.layers[u.layer] {
                bn.entries_mut()[u.width_index]
                    .1
                    .select_mut(u.branch)
                    .update_running(&u.mean, &u.var);
            }
        }
    }

    /// Conditioning vectors `z[B×d]` for per-sample `λ`s.
    pub fn encode_batch(&self, lambdas: &[f64]) -> Result<Option<Tensor<F>>> {
        let Some(enc) = &self.encoder else {
            return Ok(None);
        };
        let d = enc.dim();
        let mut cache: BTreeMap<u64, Vec<F>> = BTreeMap::new();
        let mut data = Vec::with_capacity(lambdas.len() * d);
        for &l in lambdas {
            let key = l.to_bits();
            if let std::collections::btree_map::Entry::Vacant(e) = cache.entry(key) {
                e.insert(enc.encode(l)?.into_iter().map(s).collect());
            }
            data.extend_from_slice(&cache[&key]);
        }
        Ok(Some(Tensor::new(vec![lambdas.len(), d], data)?))
    }

    /// Records `f(x, λ; θ)` for the width-`α` subnetwork on `tape`.
    ///
    /// `lambdas` holds one value per sample. Each normalization layer routes
    /// samples with `λ = 0` through `BN_c` and the rest through `BN_a`,
    /// normalizing each group over its own rows. Train mode returns the
    /// running-statistic updates without applying them.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        x: Var,
        lambdas: &[f64],
        opts: RunOptions,
    ) -> Result<Forward<F>> {
        let batch = tape.shape(x)[0];
        if lambdas.len() != batch {
            return Err(Error::Dimension {
                op: "forward",
                detail: format!("{} lambdas for a batch of {batch}", lambdas.len()),
            });
        }
        if batch == 0 {
            return Err(Error::Empty("batch"));
        }
        if let Some(&bad) = lambdas.iter().find(|&&l| !(0.0..=1.0).contains(&l)) {
            return Err(Error::LambdaOutOfRange(bad));
        }
        if tape.shape(x)[1..] != self.spec.input {
            return Err(Error::Dimension {
                op: "forward",
                detail: format!(
                    "input {:?}, model expects {:?}",
                    tape.shape(x),
                    self.spec.input
                ),
            });
        }
        if !self.spec.has_width(opts.width) {
            return Err(Error::UnknownWidth(opts.width));
        }
        let width_index = self
            .spec
            .widths
            .iter()
            .position(|&w| (w - opts.width).abs() < 1e-9)
            .expect("checked");
        let z = self.encode_batch(lambdas)?.map(|t| tape.constant(t));

        let mut groups: Vec<(Branch, Vec<usize>)> = Vec::new();
        if self.spec.bn == BnStyle::Dual {
            for b in [Branch::Clean, Branch::Adversarial] {
                let idx: Vec<usize> = (0..batch)
                    .filter(|&i| Branch::for_lambda(lambdas[i]) == b)
                    .collect();
                if !idx.is_empty() {
                    groups.push((b, idx));
                }
            }
        } else {
            groups.push((Branch::Clean, (0..batch).collect()));
        }

        let mut bound = Vec::new();
        let mut bind =
            |tape: &mut Tape<F>, idx: usize, t: &Tensor<F>, dims: &[usize]| -> Result<Var> {
                let v = if opts.param_grads {
                    let v = tape.param(t.clone());
                    bound.push((idx, v));
                    v
                } else {
                    tape.constant(t.clone())
                };
                if dims == t.shape() {
                    Ok(v)
                } else {
                    tape.slice_prefix(v, dims)
                }
            };

        let mut stats = Vec::new();
        let mut routing = RoutingReport::default();
        let mut first_norm = true;
        let mut h = x;
        let mut channels = self.spec.input[0];
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let base = self.param_base[li];
            h = match layer {
                LayerState::Conv {
                    weight,
                    stride,
                    pad,
                } => {
                    let sh = weight.shape();
                    let out_c = width_channels(sh[0], opts.width);
                    let w = bind(tape, base, weight, &[out_c, channels, sh[2], sh[3]])?;
                    channels = out_c;
                    tape.conv2d(h, w, *stride, *pad)?
                }
                LayerState::Norm { bn, film } => {
                    let unit = &bn.entries()[width_index].1;
                    if unit.channels() != channels {
                        return Err(Error::Dimension {
                            op: "norm",
                            detail: format!(
                                "{} BN channels for {channels} features",
                                unit.channels()
                            ),
                        });
                    }
                    let branches = unit.branches();
                    let unit_base = base
                        + bn.entries()[..width_index]
                            .iter()
                            .map(|(_, u)| 2 * u.branches().len())
                            .sum::<usize>();
                    let mut parts = Vec::with_capacity(groups.len());
                    for (branch, idx) in &groups {
                        let st = unit.select(*branch);
                        let bi = branches
                            .iter()
                            .position(|b| b == branch)
                            .expect("branch exists");
                        let g = bind(tape, unit_base + 2 * bi, &st.gamma, st.gamma.shape())?;
                        let b = bind(tape, unit_base + 2 * bi + 1, &st.beta, st.beta.shape())?;
                        let sub = if idx.len() == batch {
                            h
                        } else {
                            tape.select_rows(h, idx)?
                        };
                        let outcome = st.forward(tape, g, b, sub, opts.mode)?;
                        if first_norm {
                            match branch {
                                Branch::Clean => routing.clean_rows += idx.len(),
                                Branch::Adversarial => routing.adv_rows += idx.len(),
                            }
                        }
                        match outcome {
                            NormOutcome::Train { output, mean, var } => {
                                stats.push(StatUpdate {
                                    layer: li,
                                    width_index,
                                    branch: *branch,
                                    mean,
                                    var,
                                });
                                parts.push((output, idx.clone()));
                            }
                            NormOutcome::Fallback(v) => {
                                routing.fallbacks += 1;
                                parts.push((v, idx.clone()));
                            }
                            NormOutcome::Eval(v) => parts.push((v, idx.clone())),
                        }
                    }
                    first_norm = false;
                    let mut out = if parts.len() == 1 {
                        parts[0].0
                    } else {
                        tape.merge_rows(&parts)?
                    };
                    if let (Some(f), Some(z)) = (film, z) {
                        let film_base = base
                            + bn.entries()
                                .iter()
                                .map(|(_, u)| 2 * u.branches().len())
                                .sum::<usize>();
                        let d = f.encoding_dim();
                        let mut bind_mlp =
                            |tape: &mut Tape<F>, m: &Mlp<F>, off: usize| -> Result<MlpVars> {
                                Ok(MlpVars {
                                    w1: bind(tape, off, &m.w1, &[d, channels])?,
                                    b1: bind(tape, off + 1, &m.b1, &[channels])?,
                                    w2: bind(tape, off + 2, &m.w2, &[channels, channels])?,
                                    b2: bind(tape, off + 3, &m.b2, &[channels])?,
                                })
                            };
                        let g1 = bind_mlp(tape, &f.g1, film_base)?;
                        let g2 = bind_mlp(tape, &f.g2, film_base + 4)?;
                        out = film_forward(tape, &g1, &g2, out, z)?;
                    }
                    out
                }
                LayerState::LeakyRelu { slope } => tape.leaky_relu(h, s(*slope))?,
                LayerState::GlobalAvgPool => tape.global_avg_pool(h)?,
                LayerState::Dense { weight, bias } => {
                    let full_out = weight.shape()[1];
                    let out = if li == last {
                        full_out
                    } else {
                        width_channels(full_out, opts.width)
                    };
                    let w = bind(tape, base, weight, &[channels, out])?;
                    let b = bind(tape, base + 1, bias, &[out])?;
                    channels = out;
                    let y = tape.matmul(h, w)?;
                    tape.add_row_bias(y, b)?
                }
            };
        }
        Ok(Forward {
            logits: h,
            bound,
            stats,
            routing,
        })
    }

    /// Eval-mode logits.
    pub fn logits(&self, x: &Tensor<F>, lambdas: &[f64], width: f64) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let fwd = self.forward(&mut tape, xv, lambdas, RunOptions::eval(width))?;
        Ok(tape.value(fwd.logits).clone())
    }

    /// Gradient of the summed eval-mode cross-entropy with respect to the input, and the summed loss.
    pub fn input_gradient(
        &self,
        x: &Tensor<F>,
        labels: &[usize],
        lambdas: &[f64],
        width: f64,
    ) -> Result<(Tensor<F>, F)> {
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let fwd = self.forward(&mut tape, xv, lambdas, RunOptions::eval(width))?;
        let ones = vec![F::one(); labels.len()];
        let loss = tape.softmax_xent_weighted(fwd.logits, labels, &ones)?;
        tape.backward(loss)?;
        let g = tape
            .grad(xv)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![F::zero(); x.numel()]);
        Ok((
            Tensor::new(x.shape().to_vec(), g)?,
            tape.value(loss).data()[0],
        ))
    }

    /// Per-sample eval-mode cross-entropy.
    pub fn sample_losses(
        &self,
        x: &Tensor<F>,
        labels: &[usize],
        lambdas: &[f64],
        width: f64,
    ) -> Result<Vec<f64>> {
        let logits = self.logits(x, lambdas, width)?;
        let c = self.spec.classes;
        Ok(logits
            .data()
            .chunks(c)
            .zip(labels)
            .map(|(row, &y)| {
                let row: Vec<f64> = row.iter().map(|v| v.to_f64_lossy()).collect();
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
                lse - row[y]
            })
            .collect())
    }

    /// Converts the element type, e.g. to run gradient checks on a trained model.
    pub fn cast<G: Scalar>(&self) -> Model<G> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                LayerState::Conv {
                    weight,
                    stride,
                    pad,
                } => LayerState::Conv {
                    weight: weight.cast(),
                    stride: *stride,
                    pad: *pad,
                },
                LayerState::Norm { bn, film } => LayerState::Norm {
                    bn: bn.cast(),
                    film: film.as_ref().map(|f| f.cast()),
                },
                LayerState::LeakyRelu { slope } => LayerState::LeakyRelu { slope: *slope },
                LayerState::GlobalAvgPool => LayerState::GlobalAvgPool,
                LayerState::Dense { weight, bias } => LayerState::Dense {
                    weight: weight.cast(),
                    bias: bias.cast(),
                },
            })
            .collect();
        Model {
            spec: self.spec.clone(),
            encoder: self.encoder.clone(),
            layers,
            param_base: self.param_base.clone(),
        }
    }
}

/// Fourth-order central difference `(8(f(h) - f(-h)) - (f(2h) - f(-2h))) / 12h`.
///
/// `f` returns the value and the activation kink pattern. The step starts at
/// `h` and shrinks tenfold (at most four times) until no stencil point
/// crosses a kink relative to the unperturbed pattern.
fn stencil(h: f64, base: &[bool], f: impl Fn(f64) -> Result<(f64, Vec<bool>)>) -> Result<f64> {
    let mut step = h;
    for attempt in 0..5 {
        let pts = [f(step)?, f(-step)?, f(2.0 * step)?, f(-2.0 * step)?];
        if attempt == 4 || pts.iter().all(|(_, k)| k == base) {
            let near = pts[0].0 - pts[1].0;
            let far = pts[2].0 - pts[3].0;
            return Ok((8.0 * near - far) / (12.0 * step));
        }
        step /= 10.0;
    }
    unreachable!()
}

/// Kink-avoiding finite-difference estimate of the derivative of the summed
/// eval-mode cross-entropy with respect to input coordinate `i`.
pub fn input_difference(
    model: &Model<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    lambdas: &[f64],
    width: f64,
    i: usize,
    h: f64,
) -> Result<f64> {
    if i >= x.numel() {
        return Err(Error::InvalidValue(format!(
            "coordinate {i} of {}",
            x.numel()
        )));
    }
    let loss_of = |p: &Tensor<f64>| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        let xv = tape.constant(p.clone());
        let fwd = model.forward(&mut tape, xv, lambdas, RunOptions::eval(width))?;
        let ones = vec![1.0; labels.len()];
        let loss = tape.softmax_xent_weighted(fwd.logits, labels, &ones)?;
        Ok((tape.value(loss).data()[0], tape.kink_pattern()))
    };
    let (_, base) = loss_of(x)?;
    stencil(h, &base, |d| {
        let mut p = x.clone();
        p.data_mut()[i] += d;
        loss_of(&p)
    })
}

/// Settings of [`model_gradcheck`].
#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    pub width: f64,
    pub mode: Mode,
    /// Largest finite-difference step.
    pub h: f64,
    /// Input coordinates checked (seeded sample when fewer than the input size).
    pub input_coords: usize,
    /// Coordinates checked per parameter tensor.
    pub param_coords: usize,
    pub seed: u64,
}

/// Maximum relative error between tape gradients of the mean cross-entropy
/// and kink-avoiding fourth-order central differences (see `stencil`), over
/// seeded samples of input and parameter coordinates.
pub fn model_gradcheck(
    model: &Model<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    lambdas: &[f64],
    opts: GradcheckOptions,
) -> Result<f64> {
    let GradcheckOptions {
        width,
        mode,
        h,
        input_coords,
        param_coords,
        seed,
    } = opts;
    let loss_of = |m: &Model<f64>, x: &Tensor<f64>| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let fwd = m.forward(
            &mut tape,
            xv,
            lambdas,
            RunOptions {
                width,
                mode,
                param_grads: false,
            },
        )?;
        let loss = tape.softmax_xent(fwd.logits, labels)?;
        Ok((tape.value(loss).data()[0], tape.kink_pattern()))
    };
    let (_, base) = loss_of(model, x)?;

    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let fwd = model.forward(
        &mut tape,
        xv,
        lambdas,
        RunOptions {
            width,
            mode,
            param_grads: true,
        },
    )?;
    let loss = tape.softmax_xent(fwd.logits, labels)?;
    tape.backward(loss)?;
    let mut probe = model.clone();
    probe.zero_grads();
    probe.accumulate_grads(&tape, &fwd.bound);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |numel: usize, coords: usize| -> Vec<usize> {
        if numel <= coords {
            (0..numel).collect()
        } else {
            rand::seq::index::sample(&mut rng, numel, coords).into_vec()
        }
    };
    let mut worst = 0.0f64;
    let input_grad = tape
        .grad(xv)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    for i in pick(x.numel(), input_coords) {
        let analytic = input_grad[i];
        let numeric = stencil(h, &base, |d| {
            let mut p = x.clone();
            p.data_mut()[i] += d;
            loss_of(model, &p)
        })?;
        worst = worst.max(crate::tensor::relative_error(analytic, numeric));
    }

    let grads: Vec<Vec<f64>> = probe
        .params()
        .iter()
        .map(|(_, t)| {
            t.grad()
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();
    for (p, grad) in grads.iter().enumerate() {
        for k in pick(grad.len(), param_coords) {
            let numeric = stencil(h, &base, |d| {
                let mut m = model.clone();
                m.params_mut()[p].data_mut()[k] += d;
                loss_of(&m, x)
            })?;
            worst = worst.max(crate::tensor::relative_error(grad[k], numeric));
        }
    }
    Ok(worst)
}
