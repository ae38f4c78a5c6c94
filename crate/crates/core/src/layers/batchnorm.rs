use crate::error::{Error, Result};
use crate::tensor::{s, NormStats, Scalar, Tape, Tensor, Var};

/// BN epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistics momentum `m` in `run ← (1-m)·run + m·batch`.
pub const BN_MOMENTUM: f64 = 0.1;

/// Normalization mode of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics; nothing is updated.
    Eval,
}

/// Which side of a dual BN a sample is routed to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    /// `BN_c`, used for `λ = 0`.
    Clean,
    /// `BN_a`, used for every `λ ≠ 0`.
    Adversarial,
}

impl Branch {
    /// Routing rule: `λ = 0` goes to the clean branch, everything else to the adversarial one.
    pub fn for_lambda(lambda: f64) -> Branch {
        if lambda == 0.0 {
            Branch::Clean
        } else {
            Branch::Adversarial
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Branch::Clean => "c",
            Branch::Adversarial => "a",
        }
    }
}

/// Per-channel affine plus running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<F> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
    pub momentum: F,
    pub eps: F,
}

impl<F: Scalar> BatchNormState<F> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: Tensor::full(&[channels], F::one()).with_grad(),
            beta: Tensor::zeros(&[channels]).with_grad(),
            running_mean: vec![F::zero(); channels],
            running_var: vec![F::one(); channels],
            momentum: s(BN_MOMENTUM),
            eps: s(BN_EPS),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn cast<G: Scalar>(&self) -> BatchNormState<G> {
        let conv = |v: &[F]| {
            v.iter()
                .map(|x| G::from_f64_lossy(x.to_f64_lossy()))
                .collect()
        };
        BatchNormState {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: conv(&self.running_mean),
            running_var: conv(&self.running_var),
            momentum: G::from_f64_lossy(self.momentum.to_f64_lossy()),
            eps: G::from_f64_lossy(self.eps.to_f64_lossy()),
        }
    }

    /// Folds a batch mean and unbiased batch variance into the running statistics.
    pub fn update_running(&mut self, mean: &[F], var: &[F]) {
        let m = self.momentum;
        let keep = F::one() - m;
        for (r, &b) in self.running_mean.iter_mut().zip(mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(var) {
            *r = keep * *r + m * b;
        }
    }

    /// Records normalization of `h` on the tape.
    ///
    /// In train mode with at least two values per channel the batch statistics
    /// are used and returned (mean, unbiased variance) for the caller to fold
    /// into the running statistics. With fewer values the layer falls back to
    /// its running statistics and returns `Fallback`.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        gamma: Var,
        beta: Var,
        h: Var,
        mode: Mode,
    ) -> Result<NormOutcome<F>> {
        let shape = tape.shape(h);
        if shape.len() < 2 || shape[1] != self.channels() {
            return Err(Error::Dimension {
                op: "batchnorm_forward",
                detail: format!("input {shape:?} for {} channels", self.channels()),
            });
        }
        let per_channel: usize = shape[0] * shape[2..].iter().product::<usize>();
        let fixed = NormStats::Fixed {
            mean: self.running_mean.clone(),
            var: self.running_var.clone(),
            eps: self.eps,
        };
        match mode {
            Mode::Eval => {
                let (y, _) = tape.batch_norm(h, gamma, beta, fixed)?;
                Ok(NormOutcome::Eval(y))
            }
            Mode::Train if per_channel < 2 => {
                let (y, _) = tape.batch_norm(h, gamma, beta, fixed)?;
                Ok(NormOutcome::Fallback(y))
            }
            Mode::Train => {
                let (y, stats) =
                    tape.batch_norm(h, gamma, beta, NormStats::Batch { eps: self.eps })?;
                let (mean, var) = stats.expect("batch statistics requested");
                let n = s::<F>(per_channel as f64);
                let correction = n / (n - F::one());
                let unbiased = var.into_iter().map(|v| v * correction).collect();
                Ok(NormOutcome::Train {
                    output: y,
                    mean,
                    var: unbiased,
                })
            }
        }
    }
}

/// Result of [`BatchNormState::forward`].
#[derive(Debug)]
pub enum NormOutcome<F> {
    Train {
        output: Var,
        mean: Vec<F>,
        var: Vec<F>,
    },
    Eval(Var),
    Fallback(Var),
}

impl<F> NormOutcome<F> {
    pub fn output(&self) -> Var {
        match self {
            NormOutcome::Train { output, .. } => *output,
            NormOutcome::Eval(v) | NormOutcome::Fallback(v) => *v,
        }
    }
}

/// Two independent batch norms: `bn_c` for clean (`λ = 0`) and `bn_a` for adversarial (`λ ≠ 0`) features.
#[derive(Clone, Debug, PartialEq)]
pub struct DualBNState<F> {
    pub bn_c: BatchNormState<F>,
    pub bn_a: BatchNormState<F>,
}

impl<F: Scalar> DualBNState<F> {
    pub fn new(channels: usize) -> Self {
        DualBNState {
            bn_c: BatchNormState::new(channels),
            bn_a: BatchNormState::new(channels),
        }
    }

    pub fn cast<G: Scalar>(&self) -> DualBNState<G> {
        DualBNState {
            bn_c: self.bn_c.cast(),
            bn_a: self.bn_a.cast(),
        }
    }

    pub fn branch(&self, b: Branch) -> &BatchNormState<F> {
        match b {
            Branch::Clean => &self.bn_c,
            Branch::Adversarial => &self.bn_a,
        }
    }

    pub fn branch_mut(&mut self, b: Branch) -> &mut BatchNormState<F> {
        match b {
            Branch::Clean => &mut self.bn_c,
            Branch::Adversarial => &mut self.bn_a,
        }
    }
}

/// Normalization units of one layer: either a plain BN or a λ-routed dual BN.
#[derive(Clone, Debug, PartialEq)]
pub enum NormUnit<F> {
    Single(BatchNormState<F>),
    Dual(DualBNState<F>),
}

impl<F: Scalar> NormUnit<F> {
    /// The BN that serves `branch`; a single BN serves both.
    pub fn select(&self, branch: Branch) -> &BatchNormState<F> {
        match self {
            NormUnit::Single(bn) => bn,
            NormUnit::Dual(d) => d.branch(branch),
        }
    }

    pub fn select_mut(&mut self, branch: Branch) -> &mut BatchNormState<F> {
        match self {
            NormUnit::Single(bn) => bn,
            NormUnit::Dual(d) => d.branch_mut(branch),
        }
    }

    pub fn cast<G: Scalar>(&self) -> NormUnit<G> {
        match self {
            NormUnit::Single(bn) => NormUnit::Single(bn.cast()),
            NormUnit::Dual(d) => NormUnit::Dual(d.cast()),
        }
    }

    pub fn is_dual(&self) -> bool {
        matches!(self, NormUnit::Dual(_))
    }

    pub fn channels(&self) -> usize {
        self.select(Branch::Clean).channels()
    }

    /// The branches that exist, in storage order.
    pub fn branches(&self) -> &'static [Branch] {
        match self {
            NormUnit::Single(_) => &[Branch::Clean],
            NormUnit::Dual(_) => &[Branch::Clean, Branch::Adversarial],
        }
    }
}

/// One normalization unit per width factor (switchable BN).
#[derive(Clone, Debug, PartialEq)]
pub struct SwitchableDualBN<F> {
    entries: Vec<(f64, NormUnit<F>)>,
}

impl<F: Scalar> SwitchableDualBN<F> {
    /// Builds units for `widths` over a layer of `full_channels` channels.
    pub fn new(full_channels: usize, widths: &[f64], dual: bool) -> Self {
        let entries = widths
            .iter()
            .map(|&w| {
                let c = width_channels(full_channels, w);
                let unit = if dual {
                    NormUnit::Dual(DualBNState::new(c))
                } else {
                    NormUnit::Single(BatchNormState::new(c))
                };
                (w, unit)
            })
            .collect();
        SwitchableDualBN { entries }
    }

    pub fn cast<G: Scalar>(&self) -> SwitchableDualBN<G> {
        SwitchableDualBN {
            entries: self.entries.iter().map(|(w, u)| (*w, u.cast())).collect(),
        }
    }

    pub fn widths(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|(w, _)| *w)
    }

    pub fn entries(&self) -> &[(f64, NormUnit<F>)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(f64, NormUnit<F>)] {
        &mut self.entries
    }

    pub fn index_of(&self, width: f64) -> Result<usize> {
        self.entries
            .iter()
            .position(|(w, _)| same_width(*w, width))
            .ok_or(Error::UnknownWidth(width))
    }

    pub fn unit(&self, width: f64) -> Result<&NormUnit<F>> {
        Ok(&self.entries[self.index_of(width)?].1)
    }

    pub fn unit_mut(&mut self, width: f64) -> Result<&mut NormUnit<F>> {
        let i = self.index_of(width)?;
        Ok(&mut self.entries[i].1)
    }
}

/// Normalizes a standalone feature map with `bn`, updating its running
/// statistics in train mode. Returns the output and whether train mode fell
/// back to running statistics.
pub fn batchnorm_forward<F: Scalar>(
    bn: &mut BatchNormState<F>,
    h: &Tensor<F>,
    mode: Mode,
) -> Result<(Tensor<F>, bool)> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let g = tape.constant(bn.gamma.clone());
    let b = tape.constant(bn.beta.clone());
    let outcome = bn.forward(&mut tape, g, b, hv, mode)?;
    let y = tape.value(outcome.output()).clone();
    let fallback = matches!(outcome, NormOutcome::Fallback(_));
    if let NormOutcome::Train { mean, var, .. } = outcome {
        bn.update_running(&mean, &var);
    }
    Ok((y, fallback))
}

/// Routes a feature map through `BN_c` (`λ = 0`) or `BN_a` (`λ ≠ 0`); only the selected branch is touched.
pub fn dual_bn_forward<F: Scalar>(
    dbn: &mut DualBNState<F>,
    h: &Tensor<F>,
    lambda: f64,
    mode: Mode,
) -> Result<Tensor<F>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::LambdaOutOfRange(lambda));
    }
    batchnorm_forward(dbn.branch_mut(Branch::for_lambda(lambda)), h, mode).map(|(y, _)| y)
}

/// `ceil(α·C)`, robust to representation error in `α`.
pub fn width_channels(full: usize, width: f64) -> usize {
    let c = ((width * full as f64) - 1e-9).ceil();
    (c.max(1.0) as usize).min(full)
}

pub fn same_width(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-9
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn input(b: usize, c: usize, hw: usize, seed: u64) -> Tensor<f64> {
        let n = b * c * hw * hw;
        let data: Vec<f64> = (0..n)
            .map(|i| ((i as f64 + seed as f64) * 0.7311).sin() * 2.0 + 0.5)
            .collect();
        Tensor::new(vec![b, c, hw, hw], data).unwrap()
    }

    fn run(
        bn: &BatchNormState<f64>,
        x: &Tensor<f64>,
        mode: Mode,
    ) -> (Tensor<f64>, NormOutcome<f64>) {
        let mut tape = Tape::new();
        let h = tape.constant(x.clone());
        let g = tape.constant(bn.gamma.clone());
        let b = tape.constant(bn.beta.clone());
        let out = bn.forward(&mut tape, g, b, h, mode).unwrap();
        (tape.value(out.output()).clone(), out)
    }

    #[test]
    fn train_output_has_beta_mean_and_gamma_std() {
        let mut bn = BatchNormState::<f64>::new(3);
        bn.gamma = Tensor::from_f64(&[3], &[0.5, 2.0, 1.5]).unwrap();
        bn.beta = Tensor::from_f64(&[3], &[-1.0, 0.3, 4.0]).unwrap();
        let x = input(4, 3, 4, 1);
        let (y, _) = run(&bn, &x, Mode::Train);
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|b| y.data()[(b * 3 + ch) * 16..(b * 3 + ch + 1) * 16].to_vec())
                .collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!((mean - bn.beta.data()[ch]).abs() < 1e-3);
            assert!((std - bn.gamma.data()[ch]).abs() < 1e-3);
        }
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let mut bn = BatchNormState::<f64>::new(1);
        bn.beta = Tensor::from_f64(&[1], &[0.42]).unwrap();
        let x = Tensor::full(&[3, 1, 2, 2], 5.0);
        let (y, _) = run(&bn, &x, Mode::Train);
        assert!(y.data().iter().all(|v| (v - 0.42).abs() < 1e-9));
    }

    #[test]
    fn eval_with_unit_stats_is_identity() {
        let bn = BatchNormState::<f64>::new(2);
        let x = input(2, 2, 3, 5);
        let (y, _) = run(&bn, &x, Mode::Eval);
        let scale = 1.0 / (1.0 + BN_EPS).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b * scale).abs() < 1e-12);
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn single_value_per_channel_falls_back() {
        let bn = BatchNormState::<f64>::new(2);
        let x = Tensor::from_f64(&[1, 2], &[0.3, -0.2]).unwrap();
        let (_, outcome) = run(&bn, &x, Mode::Train);
        assert!(matches!(outcome, NormOutcome::Fallback(_)));
    }

    #[test]
    fn running_update_uses_momentum() {
        let mut bn = BatchNormState::<f64>::new(1);
        bn.update_running(&[2.0], &[3.0]);
        assert!((bn.running_mean[0] - 0.2).abs() < 1e-12);
        assert!((bn.running_var[0] - (0.9 + 0.3)).abs() < 1e-12);
    }

    #[test]
    fn routing_rule() {
        assert_eq!(Branch::for_lambda(0.0), Branch::Clean);
        assert_eq!(Branch::for_lambda(0.1), Branch::Adversarial);
        assert_eq!(Branch::for_lambda(1.0), Branch::Adversarial);
    }

    #[test]
    fn switchable_channel_counts() {
        let s = SwitchableDualBN::<f32>::new(16, &[0.5, 0.75, 1.0], true);
        let counts: Vec<usize> = s.entries().iter().map(|(_, u)| u.channels()).collect();
        assert_eq!(counts, vec![8, 12, 16]);
        assert!(s.unit(0.25).is_err());
        assert_eq!(width_channels(10, 0.25), 3);
        assert_eq!(width_channels(32, 0.75), 24);
    }
}
