//! L∞ white-box attacks: FGSM, PGD and MI-FGSM.
//!
//! Every attack reads the model only through [`AttackTarget`], which returns
//! the input gradient of the summed cross-entropy. Outputs always satisfy
//! `‖x_adv − x‖∞ ≤ ε` and `x_adv ∈ [0,1]`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::Model;
use crate::tensor::{s, sign, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackKind {
    Fgsm,
    Pgd,
    MiFgsm,
}

/// Attack hyper-parameters, in `[0,1]` pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub epsilon: f64,
    /// Per-iteration step. MI-FGSM ignores it and uses `ε / iters`.
    pub step: f64,
    pub iters: usize,
    /// Momentum decay, MI-FGSM only.
    pub mu: f64,
    /// Uniform start in the ε-ball, PGD only.
    pub random_start: bool,
}

impl AttackSpec {
    pub fn fgsm(epsilon: f64) -> Self {
        AttackSpec {
            kind: AttackKind::Fgsm,
            epsilon,
            step: epsilon,
            iters: 1,
            mu: 0.0,
            random_start: false,
        }
    }

    /// PGD with random start.
    pub fn pgd(epsilon: f64, step: f64, iters: usize) -> Self {
        AttackSpec {
            kind: AttackKind::Pgd,
            epsilon,
            step,
            iters,
            mu: 0.0,
            random_start: true,
        }
    }

    pub fn mi_fgsm(epsilon: f64, iters: usize, mu: f64) -> Self {
        AttackSpec {
            kind: AttackKind::MiFgsm,
            epsilon,
            step: epsilon / iters.max(1) as f64,
            iters,
            mu,
            random_start: false,
        }
    }

    /// ε = 8/255, n = 7, step 2/255: the training attack.
    pub fn pgd7() -> Self {
        Self::pgd(8.0 / 255.0, 2.0 / 255.0, 7)
    }

    /// ε = 8/255, n = 20, step 2/255.
    pub fn pgd20() -> Self {
        Self::pgd(8.0 / 255.0, 2.0 / 255.0, 20)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidValue(m));
        if !(self.epsilon >= 0.0 && self.epsilon <= 1.0) {
            return bad(format!("epsilon {} outside [0, 1]", self.epsilon));
        }
        if self.kind != AttackKind::Fgsm && self.iters == 0 {
            return bad("iterative attacks need at least one iteration".into());
        }
        if !(self.step > 0.0) && self.epsilon > 0.0 {
            return bad(format!("step {} must be positive", self.step));
        }
        if !self.mu.is_finite() || self.mu < 0.0 {
            return bad(format!(
                "momentum {} must be a non-negative number",
                self.mu
            ));
        }
        Ok(())
    }
}

/// Short descriptor such as `PGD-7`, `FGSM` or `MIFGSM-10`.
impl fmt::Display for AttackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            AttackKind::Fgsm => write!(f, "FGSM"),
            AttackKind::Pgd => write!(f, "PGD-{}", self.iters),
            AttackKind::MiFgsm => write!(f, "MIFGSM-{}", self.iters),
        }
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s
            .trim()
            .to_ascii_lowercase()
            .replace(['-', '_'], "")
            .as_str()
        {
            "fgsm" => Ok(AttackKind::Fgsm),
            "pgd" => Ok(AttackKind::Pgd),
            "mifgsm" => Ok(AttackKind::MiFgsm),
            _ => Err(Error::InvalidValue(format!("unknown attack {s:?}"))),
        }
    }
}

/// Anything that can report `∇_x Σ_i L(f(x_i), y_i)`.
pub trait AttackTarget<F: Scalar> {
    fn loss_gradient(&self, x: &Tensor<F>, labels: &[usize]) -> Result<Tensor<F>>;
}

/// Batched classifier evaluated with running statistics.
pub trait Classifier<F: Scalar> {
    fn class_logits(&self, x: &Tensor<F>, lambdas: &[f64], width: f64) -> Result<Tensor<F>>;

    /// `∇_x Σ_i L(f(x_i, λ_i), y_i)`.
    fn loss_input_gradient(
        &self,
        x: &Tensor<F>,
        labels: &[usize],
        lambdas: &[f64],
        width: f64,
    ) -> Result<Tensor<F>>;
}

impl<F: Scalar> Classifier<F> for Model<F> {
    fn class_logits(&self, x: &Tensor<F>, lambdas: &[f64], width: f64) -> Result<Tensor<F>> {
        self.logits(x, lambdas, width)
    }

    fn loss_input_gradient(
        &self,
        x: &Tensor<F>,
        labels: &[usize],
        lambdas: &[f64],
        width: f64,
    ) -> Result<Tensor<F>> {
        Ok(self.input_gradient(x, labels, lambdas, width)?.0)
    }
}

/// A classifier pinned to per-sample `λ`s and one width.
#[derive(Debug)]
pub struct Conditioned<'a, M: ?Sized> {
    pub model: &'a M,
    pub lambdas: &'a [f64],
    pub width: f64,
}

impl<F: Scalar, M: Classifier<F> + ?Sized> AttackTarget<F> for Conditioned<'_, M> {
    fn loss_gradient(&self, x: &Tensor<F>, labels: &[usize]) -> Result<Tensor<F>> {
        self.model
            .loss_input_gradient(x, labels, self.lambdas, self.width)
    }
}

fn checked_gradient<F: Scalar, T: AttackTarget<F> + ?Sized>(
    target: &T,
    x: &Tensor<F>,
    labels: &[usize],
    who: &'static str,
) -> Result<Tensor<F>> {
    let g = target.loss_gradient(x, labels)?;
    if !g.is_valid() {
        return Err(Error::NonFiniteGradient(who));
    }
    Ok(g)
}

fn check_input<F: Scalar>(x: &Tensor<F>, labels: &[usize]) -> Result<()> {
    if x.shape().is_empty() || x.shape()[0] != labels.len() {
        return Err(Error::Dimension {
            op: "attack",
            detail: format!("input {:?} with {} labels", x.shape(), labels.len()),
        });
    }
    if x.data().iter().any(|&v| !(v >= F::zero() && v <= F::one())) {
        return Err(Error::InvalidValue("attack input outside [0, 1]".into()));
    }
    Ok(())
}

/// `x ← Π_{B∞(x0,ε) ∩ [0,1]}(x + step · direction)`, in place.
fn ascend<F: Scalar>(
    x: &mut Tensor<F>,
    x0: &Tensor<F>,
    direction: impl Fn(usize) -> F,
    step: F,
    eps: F,
) {
    for (i, (v, &o)) in x.data_mut().iter_mut().zip(x0.data()).enumerate() {
        let moved = *v + step * direction(i);
        let projected = moved.max(o - eps).min(o + eps);
        *v = projected.max(F::zero()).min(F::one());
    }
}

/// `clip(x + ε·sign(∇_x L))`.
pub fn fgsm<F: Scalar, T: AttackTarget<F> + ?Sized>(
    target: &T,
    x: &Tensor<F>,
    labels: &[usize],
    epsilon: f64,
) -> Result<Tensor<F>> {
    check_input(x, labels)?;
    let g = checked_gradient(target, x, labels, "fgsm")?;
    let mut adv = x.clone();
    let eps = s(epsilon);
    ascend(&mut adv, x, |i| sign(g.data()[i]), eps, eps);
    Ok(adv)
}

/// Projected gradient ascent on the loss within the ε-ball.
pub fn pgd<F: Scalar, T: AttackTarget<F> + ?Sized>(
    target: &T,
    x: &Tensor<F>,
    labels: &[usize],
    spec: &AttackSpec,
    rng: &mut impl Rng,
) -> Result<Tensor<F>> {
    check_input(x, labels)?;
    let eps: F = s(spec.epsilon);
    let mut adv = x.clone();
    if spec.random_start && spec.epsilon > 0.0 {
        for v in adv.data_mut() {
            let d: F = s(rng.random_range(-spec.epsilon..=spec.epsilon));
            *v = (*v + d).max(F::zero()).min(F::one());
        }
    }
    for _ in 0..spec.iters {
        let g = checked_gradient(target, &adv, labels, "pgd")?;
        ascend(&mut adv, x, |i| sign(g.data()[i]), s(spec.step), eps);
    }
    Ok(adv)
}

/// Momentum iterative FGSM with per-sample L1-normalized gradients and step `ε / n`.
pub fn mi_fgsm<F: Scalar, T: AttackTarget<F> + ?Sized>(
    target: &T,
    x: &Tensor<F>,
    labels: &[usize],
    spec: &AttackSpec,
) -> Result<Tensor<F>> {
    check_input(x, labels)?;
    let eps: F = s(spec.epsilon);
    let step: F = s(spec.epsilon / spec.iters as f64);
    let mu: F = s(spec.mu);
    let row = x.row_len();
    let mut adv = x.clone();
    let mut momentum = vec![F::zero(); x.numel()];
    for _ in 0..spec.iters {
        let g = checked_gradient(target, &adv, labels, "mi_fgsm")?;
        for (m_row, g_row) in momentum
            .chunks_mut(row.max(1))
            .zip(g.data().chunks(row.max(1)))
        {
            let l1: F = g_row.iter().map(|v| v.abs()).sum();
            for (m, &gv) in m_row.iter_mut().zip(g_row) {
                let normalized = if l1 > F::zero() { gv / l1 } else { F::zero() };
                *m = mu * *m + normalized;
            }
        }
        ascend(&mut adv, x, |i| sign(momentum[i]), step, eps);
    }
    Ok(adv)
}

/// Dispatches on `spec.kind`.
pub fn attack<F: Scalar, T: AttackTarget<F> + ?Sized>(
    target: &T,
    x: &Tensor<F>,
    labels: &[usize],
    spec: &AttackSpec,
    rng: &mut impl Rng,
) -> Result<Tensor<F>> {
    spec.validate()?;
    match spec.kind {
        AttackKind::Fgsm => fgsm(target, x, labels, spec.epsilon),
        AttackKind::Pgd => pgd(target, x, labels, spec, rng),
        AttackKind::MiFgsm => mi_fgsm(target, x, labels, spec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Binary logistic model `p(y=1|x) = σ(w·x + b)` with `y ∈ {0, 1}`.
    struct Linear {
        w: Vec<f64>,
        b: f64,
    }

    impl AttackTarget<f64> for Linear {
        fn loss_gradient(&self, x: &Tensor<f64>, labels: &[usize]) -> Result<Tensor<f64>> {
            let d = self.w.len();
            let mut g = Vec::with_capacity(x.numel());
            for (row, &y) in x.data().chunks(d).zip(labels) {
                let z: f64 = row.iter().zip(&self.w).map(|(a, b)| a * b).sum::<f64>() + self.b;
                let p = 1.0 / (1.0 + (-z).exp());
                g.extend(self.w.iter().map(|w| (p - y as f64) * w));
            }
            Tensor::new(x.shape().to_vec(), g)
        }
    }

    struct Flat;

    impl AttackTarget<f64> for Flat {
        fn loss_gradient(&self, x: &Tensor<f64>, _: &[usize]) -> Result<Tensor<f64>> {
            Ok(Tensor::zeros(x.shape()))
        }
    }

    struct Broken;

    impl AttackTarget<f64> for Broken {
        fn loss_gradient(&self, x: &Tensor<f64>, _: &[usize]) -> Result<Tensor<f64>> {
            Ok(Tensor::full(x.shape(), f64::NAN))
        }
    }

    fn random_case(rng: &mut ChaCha8Rng) -> (Linear, Tensor<f64>, Vec<usize>) {
        let d = rng.random_range(1..12);
        let b = rng.random_range(1..5);
        let w = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = Tensor::new(
            vec![b, d],
            (0..b * d).map(|_| rng.random_range(0.0..=1.0)).collect(),
        )
        .unwrap();
        let y = (0..b).map(|_| rng.random_range(0..2)).collect();
        (
            Linear {
                w,
                b: rng.random_range(-1.0..1.0),
            },
            x,
            y,
        )
    }

    fn linf(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.max_abs_diff(b)
    }

    #[test]
    fn zero_budget_returns_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (m, x, y) = random_case(&mut rng);
        assert_eq!(fgsm(&m, &x, &y, 0.0).unwrap(), x);
        let spec = AttackSpec {
            epsilon: 0.0,
            ..AttackSpec::pgd7()
        };
        assert_eq!(pgd(&m, &x, &y, &spec, &mut rng).unwrap(), x);
    }

    #[test]
    fn zero_gradient_leaves_input_unchanged() {
        let x = Tensor::from_f64(&[1, 3], &[0.2, 0.5, 0.9]).unwrap();
        assert_eq!(fgsm(&Flat, &x, &[0], 0.1).unwrap(), x);
        let spec = AttackSpec::mi_fgsm(0.1, 10, 1.0);
        assert_eq!(mi_fgsm(&Flat, &x, &[0], &spec).unwrap(), x);
    }

    #[test]
    fn nan_gradient_is_an_error() {
        let x = Tensor::from_f64(&[1, 2], &[0.2, 0.5]).unwrap();
        assert_eq!(
            fgsm(&Broken, &x, &[0], 0.1),
            Err(Error::NonFiniteGradient("fgsm"))
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(pgd(&Broken, &x, &[0], &AttackSpec::pgd7(), &mut rng).is_err());
    }

    #[test]
    fn linear_model_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let (m, x, y) = random_case(&mut rng);
            let eps = 8.0 / 255.0;
            let adv = fgsm(&m, &x, &y, eps).unwrap();
            // loss rises along +w for y=0 and −w for y=1
            let d = m.w.len();
            for (i, (&a, &o)) in adv.data().iter().zip(x.data()).enumerate() {
                let label_sign = if y[i / d] == 0 { 1.0 } else { -1.0 };
                let want = (o + eps * sign(m.w[i % d]) * label_sign).clamp(0.0, 1.0);
                assert_eq!(a, want);
            }
            let spec = AttackSpec {
                random_start: false,
                ..AttackSpec::pgd7()
            };
            assert_eq!(pgd(&m, &x, &y, &spec, &mut rng).unwrap(), adv);
        }
    }

    #[test]
    fn single_step_pgd_and_mi_fgsm_equal_fgsm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let (m, x, y) = random_case(&mut rng);
            let eps = rng.random_range(0.0..0.3);
            let f = fgsm(&m, &x, &y, eps).unwrap();
            let one = AttackSpec {
                kind: AttackKind::Pgd,
                epsilon: eps,
                step: eps,
                iters: 1,
                mu: 0.0,
                random_start: false,
            };
            assert_eq!(pgd(&m, &x, &y, &one, &mut rng).unwrap(), f);
            assert_eq!(
                mi_fgsm(&m, &x, &y, &AttackSpec::mi_fgsm(eps, 1, 1.0)).unwrap(),
                f
            );
        }
    }

    #[test]
    fn mi_fgsm_without_momentum_is_pgd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (m, x, y) = random_case(&mut rng);
            let mi = AttackSpec::mi_fgsm(8.0 / 255.0, 10, 0.0);
            let p = AttackSpec {
                kind: AttackKind::Pgd,
                random_start: false,
                ..mi
            };
            assert_eq!(
                mi_fgsm(&m, &x, &y, &mi).unwrap(),
                pgd(&m, &x, &y, &p, &mut rng).unwrap()
            );
        }
    }

    #[test]
    fn budget_and_range_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let (m, x, y) = random_case(&mut rng);
            let eps = 8.0 / 255.0;
            for spec in [
                AttackSpec::fgsm(eps),
                AttackSpec::pgd7(),
                AttackSpec::mi_fgsm(eps, 10, 1.0),
            ] {
                let adv = attack(&m, &x, &y, &spec, &mut rng).unwrap();
                assert!(linf(&adv, &x) <= eps + 1e-7);
                assert!(adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn rejects_out_of_range_input() {
        let x = Tensor::from_f64(&[1, 2], &[0.2, 1.5]).unwrap();
        assert!(fgsm(&Flat, &x, &[0], 0.1).is_err());
    }

    #[test]
    fn descriptors() {
        assert_eq!(AttackSpec::pgd20().to_string(), "PGD-20");
        assert_eq!(AttackSpec::fgsm(0.1).to_string(), "FGSM");
        assert_eq!("MI-FGSM".parse::<AttackKind>().unwrap(), AttackKind::MiFgsm);
        assert!(AttackSpec {
            iters: 0,
            ..AttackSpec::pgd7()
        }
        .validate()
        .is_err());
    }
}
