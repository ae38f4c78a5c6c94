//! OAT, OATS and the fixed-`λ` baselines.
//!
//! All modes share one step: for each width, generate adversarial examples
//! for the samples with `λ > 0` (eval-mode normalization, same `λ` and width),
//! run clean and adversarial train-mode forwards, weight the per-sample
//! losses by `(1 − λ)/B` and `λ/B`, and accumulate gradients. Gradients are
//! averaged over widths before one momentum-SGD update.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attacks::{attack, AttackSpec, Conditioned};
use crate::data::{BatchIterator, Dataset};
use crate::error::{Error, Result};
use crate::layers::{BnStyle, EncodingScheme, LambdaEncoder, Model, ModelSpec, RunOptions};
use crate::tensor::{s, Scalar, Tape, Tensor};

/// Default weight support.
pub const S1: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 1.0];
pub const S2: [f64; 8] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.6, 0.8, 1.0];
/// Held-out weights for generalization checks.
pub const S3: [f64; 6] = [0.15, 0.25, 0.35, 0.5, 0.7, 0.9];
/// `S1` without 0.
pub const S4: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 1.0];

/// Discrete sampling distribution over `λ`.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaDistribution {
    support: Vec<f64>,
    weights: Vec<f64>,
}

impl LambdaDistribution {
    pub fn new(support: &[f64], weights: &[f64]) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::Empty("lambda support"));
        }
        if support.len() != weights.len() {
            return Err(Error::InvalidValue(format!(
                "{} weights for {} lambdas",
                weights.len(),
                support.len()
            )));
        }
        if let Some(&l) = support.iter().find(|&&l| !(0.0..=1.0).contains(&l)) {
            return Err(Error::LambdaOutOfRange(l));
        }
        if support.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidValue(format!(
                "lambda support {support:?} must be strictly ascending"
            )));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidValue(format!(
                "lambda weights {weights:?} must be non-negative and sum to 1"
            )));
        }
        Ok(LambdaDistribution {
            support: support.to_vec(),
            weights: weights.to_vec(),
        })
    }

    pub fn uniform(support: &[f64]) -> Result<Self> {
        let w = vec![1.0 / support.len().max(1) as f64; support.len()];
        Self::new(support, &w)
    }

    pub fn point(lambda: f64) -> Result<Self> {
        Self::new(&[lambda], &[1.0])
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.support.len() == 1 {
            return self.support[0];
        }
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (&l, &w) in self.support.iter().zip(&self.weights) {
            acc += w;
            if u < acc {
                return l;
            }
        }
        *self.support.last().expect("non-empty")
    }

    /// `n` i.i.d. draws, one per sample.
    pub fn sample_batch(&self, n: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..n).map(|_| self.sample(rng)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TrainMode {
    /// Clean ERM, `λ = 0`.
    Standard,
    /// Dedicated model at fixed `λ`.
    PgdAt(f64),
    /// Once-for-all: `λ` sampled per sample, conditioned model.
    Oat,
    /// Dedicated slimmable model at fixed `λ`.
    PgdAts(f64),
    /// Once-for-all over `λ` and width.
    Oats,
}

impl TrainMode {
    pub fn conditioned(self) -> bool {
        matches!(self, TrainMode::Oat | TrainMode::Oats)
    }

    pub fn slimmable(self) -> bool {
        matches!(self, TrainMode::PgdAts(_) | TrainMode::Oats)
    }

    pub fn fixed_lambda(self) -> Option<f64> {
        match self {
            TrainMode::Standard => Some(0.0),
            TrainMode::PgdAt(l) | TrainMode::PgdAts(l) => Some(l),
            TrainMode::Oat | TrainMode::Oats => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Standard => "standard",
            TrainMode::PgdAt(_) => "pgd_at",
            TrainMode::Oat => "oat",
            TrainMode::PgdAts(_) => "pgd_ats",
            TrainMode::Oats => "oats",
        }
    }

    /// Parses a mode name; `lambda` is used by the fixed-`λ` modes.
    pub fn parse(name: &str, lambda: f64) -> Result<Self> {
        match name.trim() {
            "standard" => Ok(TrainMode::Standard),
            "pgd_at" => Ok(TrainMode::PgdAt(lambda)),
            "oat" => Ok(TrainMode::Oat),
            "pgd_ats" => Ok(TrainMode::PgdAts(lambda)),
            "oats" => Ok(TrainMode::Oats),
            other => Err(Error::InvalidValue(format!(
                "unknown training mode {other:?}"
            ))),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.fixed_lambda() {
            Some(l) if *self != TrainMode::Standard => write!(f, "{}({l})", self.name()),
            _ => f.write_str(self.name()),
        }
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    /// `oat`, `pgd_at(0.3)`, ...
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        match t.split_once('(') {
            Some((name, rest)) => {
                let l: f64 = rest
                    .trim_end_matches(')')
                    .trim()
                    .parse()
                    .map_err(|_| Error::InvalidValue(format!("bad lambda in {s:?}")))?;
                TrainMode::parse(name, l)
            }
            None => TrainMode::parse(t, 1.0),
        }
    }
}

/// Everything a training run needs besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Normalization style of conditioned models; baselines always use a single BN.
    pub bn_style: BnStyle,
    pub lambda_dist: LambdaDistribution,
    pub encoding: EncodingScheme,
    pub widths: Vec<f64>,
    pub attack: AttackSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Caps the total number of steps `T`.
    pub max_steps: Option<usize>,
}

impl TrainConfig {
    /// Defaults: uniform over `S1`, RO-128, PGD-7, 30 epochs, batch 64, lr 0.05, momentum 0.9, wd 5e-4.
    pub fn new(mode: TrainMode) -> Self {
        TrainConfig {
            mode,
            bn_style: BnStyle::Dual,
            lambda_dist: LambdaDistribution::uniform(&S1).expect("valid set"),
            encoding: EncodingScheme::RandomOrthogonal(128),
            widths: if mode.slimmable() {
                vec![0.5, 0.75, 1.0]
            } else {
                vec![1.0]
            },
            attack: AttackSpec::pgd7(),
            epochs: 30,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            max_steps: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode.slimmable() && self.widths.len() < 2 {
            return Err(Error::InvalidValue(format!(
                "{} needs at least two widths",
                self.mode.name()
            )));
        }
        if !self.mode.slimmable() && self.widths.len() != 1 {
            return Err(Error::InvalidValue(format!(
                "{} trains exactly one width",
                self.mode.name()
            )));
        }
        if let Some(l) = self.mode.fixed_lambda() {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::LambdaOutOfRange(l));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidValue("batch size 0".into()));
        }
        if !(self.lr >= 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::InvalidValue(
                "lr, momentum and weight decay must be non-negative".into(),
            ));
        }
        self.attack.validate()
    }

    /// `T`: epochs × batches per epoch, capped by `max_steps`.
    pub fn total_steps(&self, dataset_len: usize) -> usize {
        let t = self.epochs * dataset_len.div_ceil(self.batch_size.max(1));
        self.max_steps.map_or(t, |m| m.min(t))
    }

    pub fn sample_lambdas(&self, n: usize, rng: &mut impl Rng) -> Vec<f64> {
        match self.mode.fixed_lambda() {
            Some(l) => vec![l; n],
            None => self.lambda_dist.sample_batch(n, rng),
        }
    }

    /// Initial model for this configuration; seeded by `seed`.
    /// Architecture trained under this configuration.
    pub fn model_spec(&self, input: [usize; 3], classes: usize) -> Result<ModelSpec> {
        if self.mode.conditioned() {
            ModelSpec::desk(
                input,
                classes,
                &self.widths,
                self.bn_style,
                Some(self.encoding),
            )
        } else {
            ModelSpec::desk(input, classes, &self.widths, BnStyle::Normal, None)
        }
    }

    pub fn build_model<F: Scalar>(&self, input: [usize; 3], classes: usize) -> Result<Model<F>> {
        self.validate()?;
        let spec = self.model_spec(input, classes)?;
        let enc = if self.mode.conditioned() {
            Some(LambdaEncoder::new(
                self.encoding,
                self.lambda_dist.support(),
                self.seed,
            )?)
        } else {
            None
        };
        Model::new(spec, enc, self.seed)
    }
}

/// `(1 − λ)·L_c + λ·L_a`
pub fn oat_loss(clean: f64, adv: f64, lambda: f64) -> f64 {
    (1.0 - lambda) * clean + lambda * adv
}

/// `0.5 · base · (1 + cos(π t / T))`
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * t).cos())
}

/// `v ← m·v + g + wd·θ; θ ← θ − lr·v`, elementwise.
pub fn sgd_update<F: Scalar>(
    theta: &mut [F],
    velocity: &mut [F],
    grad: &[F],
    lr: F,
    momentum: F,
    weight_decay: F,
) {
    for ((t, v), &g) in theta.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v + g + weight_decay * *t;
        *t -= lr * *v;
    }
}

/// Momentum buffers mirroring the model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<F> {
    pub velocity: Vec<Vec<F>>,
    pub step: usize,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(model: &Model<F>, momentum: f64, weight_decay: f64) -> Self {
        let velocity = model
            .params()
            .iter()
            .map(|(_, t)| vec![F::zero(); t.numel()])
            .collect();
        OptimizerState {
            velocity,
            step: 0,
            momentum,
            weight_decay,
        }
    }

    /// One update at learning rate `lr`. Parameters without a gradient this step are left alone.
    pub fn apply(&mut self, model: &mut Model<F>, lr: f64) {
        let (lr, m, wd) = (s(lr), s(self.momentum), s(self.weight_decay));
        for (p, v) in model.params_mut().into_iter().zip(&mut self.velocity) {
            let Some(g) = p.grad().map(|g| g.to_vec()) else {
                continue;
            };
            sgd_update(p.data_mut(), v, &g, lr, m, wd);
        }
        self.step += 1;
    }
}

/// Per-step telemetry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    /// Batch-averaged hybrid loss, averaged over widths.
    pub loss: f64,
    /// Mean clean cross-entropy over the rows with `λ < 1`.
    pub loss_clean: f64,
    /// Mean adversarial cross-entropy over the rows with `λ > 0`.
    pub loss_adv: f64,
    /// Rows normalized by `BN_c` and `BN_a` (summed over widths and both forwards).
    pub clean_rows: usize,
    pub adv_rows: usize,
    /// Train-mode normalizations that fell back to running statistics.
    pub fallbacks: usize,
}

fn row_nll<F: Scalar>(logits: &Tensor<F>, labels: &[usize]) -> Vec<f64> {
    let c = logits.row_len();
    logits
        .data()
        .chunks(c)
        .zip(labels)
        .map(|(row, &y)| {
            let max = row
                .iter()
                .map(|v| v.to_f64_lossy())
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = row
                .iter()
                .map(|v| (v.to_f64_lossy() - max).exp())
                .sum::<f64>()
                .ln()
                + max;
            lse - row[y].to_f64_lossy()
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// One optimizer step of any mode over the given widths (see module docs).
#[allow(clippy::too_many_arguments)]
pub fn train_step<F: Scalar>(
    model: &mut Model<F>,
    opt: &mut OptimizerState<F>,
    x: &Tensor<F>,
    labels: &[usize],
    lambdas: &[f64],
    widths: &[f64],
    spec: &AttackSpec,
    lr: f64,
    rng: &mut impl Rng,
) -> Result<StepReport> {
    let batch = labels.len();
    if batch == 0 {
        return Err(Error::Empty("batch"));
    }
    if lambdas.len() != batch || x.shape().first() != Some(&batch) {
        return Err(Error::Dimension {
            op: "train_step",
            detail: format!(
                "{:?} images, {batch} labels, {} lambdas",
                x.shape(),
                lambdas.len()
            ),
        });
    }
    if widths.is_empty() {
        return Err(Error::Empty("width list"));
    }
    if let Some(&w) = widths.iter().find(|&&w| !model.spec().has_width(w)) {
        return Err(Error::UnknownWidth(w));
    }
    let clean_idx: Vec<usize> = (0..batch).filter(|&i| lambdas[i] < 1.0).collect();
    let adv_idx: Vec<usize> = (0..batch).filter(|&i| lambdas[i] > 0.0).collect();
    let pick = |idx: &[usize], v: &[f64]| -> Vec<f64> { idx.iter().map(|&i| v[i]).collect() };
    let pick_labels = |idx: &[usize]| -> Vec<usize> { idx.iter().map(|&i| labels[i]).collect() };
    let inv_b = 1.0 / batch as f64;

    model.zero_grads();
    let mut report = StepReport {
        step: opt.step,
        lr,
        ..StepReport::default()
    };
    let (mut clean_nll, mut adv_nll) = (Vec::new(), Vec::new());
    for &width in widths {
        let x_adv = if adv_idx.is_empty() {
            None
        } else {
            let ls = pick(&adv_idx, lambdas);
            let target = Conditioned {
                model: &*model,
                lambdas: &ls,
                width,
            };
            Some(attack(
                &target,
                &x.select_rows(&adv_idx),
                &pick_labels(&adv_idx),
                spec,
                rng,
            )?)
        };

        let mut tape = Tape::new();
        let mut terms = Vec::new();
        let mut bound = Vec::new();
        let mut stats = Vec::new();
        let mut heads = Vec::new();
        let parts: [(&Vec<usize>, Option<&Tensor<F>>, fn(f64) -> f64); 2] = [
            (&clean_idx, None, |l| 1.0 - l),
            (&adv_idx, x_adv.as_ref(), |l| l),
        ];
        for (k, (idx, adv, weight_of)) in parts.into_iter().enumerate() {
            if idx.is_empty() {
                continue;
            }
            let input = match adv {
                Some(a) => a.clone(),
                None => x.select_rows(idx),
            };
            let ls = pick(idx, lambdas);
            let ys = pick_labels(idx);
            let xv = tape.constant(input);
            let fwd = model.forward(&mut tape, xv, &ls, RunOptions::train(width))?;
            let weights: Vec<F> = ls.iter().map(|&l| s(weight_of(l) * inv_b)).collect();
            terms.push(tape.softmax_xent_weighted(fwd.logits, &ys, &weights)?);
            heads.push((k, fwd.logits, ys));
            bound.extend(fwd.bound);
            stats.extend(fwd.stats);
            report.clean_rows += fwd.routing.clean_rows;
            report.adv_rows += fwd.routing.adv_rows;
            report.fallbacks += fwd.routing.fallbacks;
        }
        let mut loss = terms[0];
        for &t in &terms[1..] {
            loss = tape.add(loss, t)?;
        }
        let value = tape.value(loss).data()[0].to_f64_lossy();
        if !value.is_finite() {
            return Err(Error::NonFiniteGradient("train_step"));
        }
        report.loss += value / widths.len() as f64;
        for (k, logits, ys) in heads {
            let nll = row_nll(tape.value(logits), &ys);
            if k == 0 { &mut clean_nll } else { &mut adv_nll }.extend(nll);
        }
        tape.backward(loss)?;
        model.accumulate_grads(&tape, &bound);
        model.commit_stats(stats);
    }
    if widths.len() > 1 {
        let scale = s(1.0 / widths.len() as f64);
        model
            .params_mut()
            .into_iter()
            .for_each(|p| p.scale_grad(scale));
    }
    if model
        .params()
        .iter()
        .any(|(_, p)| p.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
    {
        return Err(Error::NonFiniteGradient("train_step"));
    }
    opt.apply(model, lr);
    report.loss_clean = mean(&clean_nll);
    report.loss_adv = mean(&adv_nll);
    Ok(report)
}

/// OAT step at the model's single width.
#[allow(clippy::too_many_arguments)]
pub fn oat_train_step<F: Scalar>(
    model: &mut Model<F>,
    opt: &mut OptimizerState<F>,
    x: &Tensor<F>,
    labels: &[usize],
    lambdas: &[f64],
    spec: &AttackSpec,
    lr: f64,
    rng: &mut impl Rng,
) -> Result<StepReport> {
    let width = *model.spec().widths.last().expect("validated");
    train_step(model, opt, x, labels, lambdas, &[width], spec, lr, rng)
}

/// OATS step: every width of the model, gradients averaged.
#[allow(clippy::too_many_arguments)]
pub fn oats_train_step<F: Scalar>(
    model: &mut Model<F>,
    opt: &mut OptimizerState<F>,
    x: &Tensor<F>,
    labels: &[usize],
    lambdas: &[f64],
    spec: &AttackSpec,
    lr: f64,
    rng: &mut impl Rng,
) -> Result<StepReport> {
    let widths = model.spec().widths.clone();
    train_step(model, opt, x, labels, lambdas, &widths, spec, lr, rng)
}

/// Dedicated baseline step with one `λ` for the whole batch.
#[allow(clippy::too_many_arguments)]
pub fn pgd_at_step<F: Scalar>(
    model: &mut Model<F>,
    opt: &mut OptimizerState<F>,
    x: &Tensor<F>,
    labels: &[usize],
    lambda: f64,
    spec: &AttackSpec,
    lr: f64,
    rng: &mut impl Rng,
) -> Result<StepReport> {
    let widths = model.spec().widths.clone();
    train_step(
        model,
        opt,
        x,
        labels,
        &vec![lambda; labels.len()],
        &widths,
        spec,
        lr,
        rng,
    )
}

/// RNG for step `t` of a run seeded with `seed`.
pub fn step_rng(seed: u64, t: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0A7_57E9_0000_0000);
    rng.set_stream(t as u64);
    rng
}

/// Trains `model` on `data` for `cfg.total_steps` steps, calling `on_step` after each.
pub fn train<F: Scalar>(
    model: &mut Model<F>,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepReport),
) -> Result<OptimizerState<F>> {
    cfg.validate()?;
    if data.image_shape() != model.spec().input {
        return Err(Error::Dimension {
            op: "train",
            detail: format!(
                "data {:?}, model {:?}",
                data.image_shape(),
                model.spec().input
            ),
        });
    }
    let mut batches = BatchIterator::new(data.len(), cfg.batch_size, cfg.seed)?;
    let total = cfg.total_steps(data.len());
    let mut opt = OptimizerState::new(model, cfg.momentum, cfg.weight_decay);
    for t in 0..total {
        let lr = cosine_lr(t, total, cfg.lr);
        let mut rng = step_rng(cfg.seed, t);
        let (x, y) = batches.next_batch::<F>(data);
        let lambdas = cfg.sample_lambdas(y.len(), &mut rng);
        let report = train_step(
            model,
            &mut opt,
            &x,
            &y,
            &lambdas,
            &cfg.widths,
            &cfg.attack,
            lr,
            &mut rng,
        )?;
        on_step(&report);
    }
    Ok(opt)
}
