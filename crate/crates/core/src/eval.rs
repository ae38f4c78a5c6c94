//! Standard and robust accuracy, trade-off sweeps, saliency and FLOP counts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attacks::{attack, AttackSpec, Classifier, Conditioned};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::{input_difference, width_channels, LayerSpec, Model, ModelSpec};
use crate::tensor::{relative_error, Scalar, Tensor};

/// Images per evaluation chunk.
pub const EVAL_BATCH: usize = 250;

/// One point of an SA–RA trade-off curve.
#[derive(Clone, Debug, PartialEq)]
pub struct TradeoffPoint {
    pub lambda: f64,
    pub width: f64,
    /// Standard accuracy, percent.
    pub sa: f64,
    /// Robust accuracy, percent.
    pub ra: f64,
    /// Attack descriptor, e.g. `PGD-20`.
    pub attack: String,
    pub epsilon: f64,
    pub steps: usize,
    pub seed: u64,
}

fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn correct<F: Scalar>(logits: &Tensor<F>, labels: &[usize]) -> usize {
    logits
        .data()
        .chunks(logits.row_len())
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count()
}

fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n.div_ceil(EVAL_BATCH))
        .map(move |c| (c * EVAL_BATCH..((c + 1) * EVAL_BATCH).min(n)).collect())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::LambdaOutOfRange(lambda))
    }
}

/// Clean accuracy in percent at `(λ, α)`.
pub fn eval_sa<F: Scalar, M: Classifier<F> + ?Sized>(
    model: &M,
    data: &Dataset,
    lambda: f64,
    width: f64,
) -> Result<f64> {
    check_lambda(lambda)?;
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut hits = 0;
    for idx in chunks(data.len()) {
        let (x, y) = data.batch::<F>(&idx);
        hits += correct(&model.class_logits(&x, &vec![lambda; y.len()], width)?, &y);
    }
    Ok(100.0 * hits as f64 / data.len() as f64)
}

/// Accuracy in percent on white-box attacks generated against `model` at the same `(λ, α)`.
///
/// Random starts draw from a stream seeded by `seed` and the chunk index.
pub fn eval_ra<F: Scalar, M: Classifier<F> + ?Sized>(
    model: &M,
    data: &Dataset,
    lambda: f64,
    width: f64,
    spec: &AttackSpec,
    seed: u64,
) -> Result<f64> {
    check_lambda(lambda)?;
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut hits = 0;
    for (c, idx) in chunks(data.len()).enumerate() {
        let (x, y) = data.batch::<F>(&idx);
        let lambdas = vec![lambda; y.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);
        let target = Conditioned {
            model,
            lambdas: &lambdas,
            width,
        };
        let adv = attack(&target, &x, &y, spec, &mut rng)?;
        hits += correct(&model.class_logits(&adv, &lambdas, width)?, &y);
    }
    Ok(100.0 * hits as f64 / data.len() as f64)
}

/// One [`TradeoffPoint`] per `(λ, α)`, `λ` outermost.
pub fn sweep_tradeoff<F: Scalar, M: Classifier<F> + ?Sized>(
    model: &M,
    data: &Dataset,
    lambdas: &[f64],
    widths: &[f64],
    spec: &AttackSpec,
    seed: u64,
) -> Result<Vec<TradeoffPoint>> {
    lambdas.iter().try_for_each(|&l| check_lambda(l))?;
    let mut out = Vec::with_capacity(lambdas.len() * widths.len());
    for &lambda in lambdas {
        for &width in widths {
            out.push(TradeoffPoint {
                lambda,
                width,
                sa: eval_sa(model, data, lambda, width)?,
                ra: eval_ra(model, data, lambda, width, spec, seed)?,
                attack: spec.to_string(),
                epsilon: spec.epsilon,
                steps: spec.iters,
                seed,
            });
        }
    }
    Ok(out)
}

/// `∇_x L_c` for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap<F> {
    /// `C×H×W`, same shape as the image.
    pub values: Tensor<F>,
    pub source: usize,
    pub lambda: f64,
}

/// Clean-loss input gradient of image `index` of `data`, eval mode.
pub fn jacobian_saliency<F: Scalar, M: Classifier<F> + ?Sized>(
    model: &M,
    data: &Dataset,
    index: usize,
    lambda: f64,
    width: f64,
) -> Result<SaliencyMap<F>> {
    check_lambda(lambda)?;
    if index >= data.len() {
        return Err(Error::InvalidValue(format!(
            "image {index} of {}",
            data.len()
        )));
    }
    let (x, y) = data.batch::<F>(&[index]);
    let g = model.loss_input_gradient(&x, &y, &[lambda], width)?;
    if !g.is_valid() {
        return Err(Error::NonFiniteGradient("jacobian_saliency"));
    }
    let values = g.reshape(&data.image_shape())?;
    Ok(SaliencyMap {
        values,
        source: index,
        lambda,
    })
}

/// Largest relative error between [`jacobian_saliency`] of image `index` and
/// kink-avoiding fourth-order differences of its eval-mode loss, over all pixels.
pub fn saliency_gradcheck(
    model: &Model<f64>,
    data: &Dataset,
    index: usize,
    lambda: f64,
    width: f64,
    h: f64,
) -> Result<f64> {
    let map = jacobian_saliency::<f64, _>(model, data, index, lambda, width)?;
    let (x, y) = data.batch::<f64>(&[index]);
    let mut worst = 0.0f64;
    for (i, &analytic) in map.values.data().iter().enumerate() {
        let numeric = input_difference(model, &x, &y, &[lambda], width, i, h)?;
        worst = worst.max(relative_error(analytic, numeric));
    }
    Ok(worst)
}

/// Cosine similarity between `|saliency|` and the image; 0 when either is all-zero.
pub fn saliency_alignment<F: Scalar>(map: &SaliencyMap<F>, image: &[f32]) -> f64 {
    let s: Vec<f64> = map
        .values
        .data()
        .iter()
        .map(|v| v.to_f64_lossy().abs())
        .collect();
    let dot: f64 = s.iter().zip(image).map(|(a, &b)| a * b as f64).sum();
    let ns = s.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ni = image
        .iter()
        .map(|&v| (v as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    if ns == 0.0 || ni == 0.0 {
        0.0
    } else {
        dot / (ns * ni)
    }
}

/// Mean [`saliency_alignment`] over the first `count` images.
pub fn mean_alignment<F: Scalar, M: Classifier<F> + ?Sized>(
    model: &M,
    data: &Dataset,
    count: usize,
    lambda: f64,
    width: f64,
) -> Result<f64> {
    let n = count.min(data.len());
    if n == 0 {
        return Err(Error::Empty("dataset"));
    }
    let mut total = 0.0;
    for i in 0..n {
        total += saliency_alignment(
            &jacobian_saliency(model, data, i, lambda, width)?,
            data.image(i),
        );
    }
    Ok(total / n as f64)
}

/// Multiply-adds of one forward pass of a single image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCount {
    /// Convolutions and dense layers.
    pub backbone: u64,
    /// FiLM perceptrons.
    pub film: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.backbone + self.film
    }

    /// FiLM share relative to the backbone.
    pub fn film_overhead(&self) -> f64 {
        self.film as f64 / self.backbone as f64
    }
}

/// Analytic multiply-add count of the width-`α` subnetwork. Normalization,
/// activations and pooling are not counted.
pub fn flops_count(spec: &ModelSpec, width: f64) -> Result<FlopCount> {
    if !spec.has_width(width) {
        return Err(Error::UnknownWidth(width));
    }
    let d = spec.encoding.map(|e| e.dim() as u64);
    let [mut c, mut h, mut w] = spec.input;
    let mut count = FlopCount::default();
    let last = spec.layers.len() - 1;
    for (i, l) in spec.layers.iter().enumerate() {
        match *l {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                let oc = width_channels(out_channels, width);
                h = (h + 2 * pad - kernel) / stride + 1;
                w = (w + 2 * pad - kernel) / stride + 1;
                count.backbone += (oc * c * kernel * kernel * h * w) as u64;
                c = oc;
            }
            LayerSpec::Norm => {
                if let Some(d) = d {
                    // two perceptrons d→C→C
                    count.film += 2 * (d * c as u64 + (c * c) as u64);
                }
            }
            LayerSpec::Dense { out_features } => {
                let o = if i == last {
                    out_features
                } else {
                    width_channels(out_features, width)
                };
                count.backbone += (c * o) as u64;
                c = o;
            }
            LayerSpec::GlobalAvgPool => {
                h = 1;
                w = 1;
            }
            LayerSpec::LeakyRelu { .. } => {}
        }
    }
    Ok(count)
}

/// [`flops_count`] for a model.
pub fn model_flops<F: Scalar>(model: &Model<F>, width: f64) -> Result<FlopCount> {
    flops_count(model.spec(), width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_glyphs, GlyphStyle};
    use crate::layers::{BnStyle, EncodingScheme};

    /// Scores class `y` highest when pixel 0 encodes `y / 10`; ignores λ.
    struct Oracle;

    impl Classifier<f64> for Oracle {
        fn class_logits(&self, x: &Tensor<f64>, _: &[f64], _: f64) -> Result<Tensor<f64>> {
            let n = x.shape()[0];
            let mut out = vec![0.0; n * 10];
            for i in 0..n {
                let y = (x.data()[i * x.row_len()] * 10.0).round() as usize;
                out[i * 10 + y.min(9)] = 1.0;
            }
            Tensor::new(vec![n, 10], out)
        }

        fn loss_input_gradient(
            &self,
            x: &Tensor<f64>,
            _: &[usize],
            _: &[f64],
            _: f64,
        ) -> Result<Tensor<f64>> {
            Ok(Tensor::zeros(x.shape()))
        }
    }

    struct Constant;

    impl Classifier<f64> for Constant {
        fn class_logits(&self, x: &Tensor<f64>, _: &[f64], _: f64) -> Result<Tensor<f64>> {
            let n = x.shape()[0];
            Tensor::new(
                vec![n, 10],
                (0..n * 10)
                    .map(|k| if k % 10 == 3 { 1.0 } else { 0.0 })
                    .collect(),
            )
        }

        fn loss_input_gradient(
            &self,
            x: &Tensor<f64>,
            _: &[usize],
            _: &[f64],
            _: f64,
        ) -> Result<Tensor<f64>> {
            Ok(Tensor::zeros(x.shape()))
        }
    }

    fn coded(n: usize) -> Dataset {
        let mut px = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 10;
            px.extend([y as f32 / 10.0, 0.5, 0.5, 0.5]);
            labels.push(y);
        }
        Dataset::new(px, [1, 2, 2], labels, 10, "coded").unwrap()
    }

    #[test]
    fn perfect_and_chance_accuracy() {
        let d = coded(300);
        assert_eq!(eval_sa(&Oracle, &d, 0.0, 1.0).unwrap(), 100.0);
        assert_eq!(eval_sa(&Constant, &d, 0.0, 1.0).unwrap(), 10.0);
        let spec = AttackSpec::pgd7();
        assert_eq!(eval_ra(&Constant, &d, 1.0, 1.0, &spec, 0).unwrap(), 10.0);
        assert!(eval_sa(&Oracle, &d, 1.5, 1.0).is_err());
    }

    #[test]
    fn zero_budget_robust_accuracy_equals_standard() {
        let d = synth_glyphs(10, 10, 16, 0.15, 0, GlyphStyle::default()).unwrap();
        let spec = ModelSpec::desk([1, 16, 16], 10, &[1.0], BnStyle::Dual, None).unwrap();
        let m = Model::<f32>::new(spec, None, 0).unwrap();
        let zero = AttackSpec {
            epsilon: 0.0,
            ..AttackSpec::pgd7()
        };
        assert_eq!(
            eval_ra(&m, &d, 0.5, 1.0, &zero, 1).unwrap(),
            eval_sa(&m, &d, 0.5, 1.0).unwrap()
        );
        let fgsm0 = AttackSpec::fgsm(0.0);
        assert_eq!(
            eval_ra(&m, &d, 0.5, 1.0, &fgsm0, 1).unwrap(),
            eval_sa(&m, &d, 0.5, 1.0).unwrap()
        );
    }

    #[test]
    fn accuracy_ignores_positive_logit_scaling() {
        struct Scaled<'a>(&'a Model<f64>, f64);
        impl Classifier<f64> for Scaled<'_> {
            fn class_logits(&self, x: &Tensor<f64>, l: &[f64], w: f64) -> Result<Tensor<f64>> {
                let mut t = self.0.logits(x, l, w)?;
                t.data_mut().iter_mut().for_each(|v| *v *= self.1);
                Ok(t)
            }
            fn loss_input_gradient(
                &self,
                x: &Tensor<f64>,
                y: &[usize],
                l: &[f64],
                w: f64,
            ) -> Result<Tensor<f64>> {
                self.0.loss_input_gradient(x, y, l, w)
            }
        }
        let d = synth_glyphs(5, 10, 16, 0.3, 1, GlyphStyle::default()).unwrap();
        let spec = ModelSpec::desk([1, 16, 16], 10, &[1.0], BnStyle::Dual, None).unwrap();
        let m = Model::<f64>::new(spec, None, 2).unwrap();
        let base = eval_sa(&m, &d, 0.0, 1.0).unwrap();
        for k in [1e-3, 0.5, 7.0, 1e3] {
            assert_eq!(eval_sa(&Scaled(&m, k), &d, 0.0, 1.0).unwrap(), base);
        }
    }

    #[test]
    fn sweep_emits_one_point_per_pair() {
        let d = coded(20);
        let pts = sweep_tradeoff(
            &Oracle,
            &d,
            &crate::training::S2,
            &[1.0],
            &AttackSpec::pgd7(),
            3,
        )
        .unwrap();
        assert_eq!(pts.len(), 8);
        assert_eq!(pts[0].attack, "PGD-7");
        assert!(sweep_tradeoff(&Oracle, &d, &[0.2, 1.1], &[1.0], &AttackSpec::pgd7(), 3).is_err());
    }

    #[test]
    fn constant_model_saliency_is_zero() {
        let d = coded(3);
        let m = jacobian_saliency(&Constant, &d, 1, 1.0, 1.0).unwrap();
        assert_eq!(m.values.shape(), &[1, 2, 2]);
        assert!(m.values.data().iter().all(|&v| v == 0.0));
        assert_eq!(saliency_alignment(&m, d.image(1)), 0.0);
    }

    #[test]
    fn saliency_matches_finite_differences() {
        // unclipped pixels: an all-zero patch would put activations exactly on a kink
        let style = GlyphStyle {
            background: 0.3,
            contrast: 0.4,
            ..GlyphStyle::default()
        };
        let d = synth_glyphs(1, 10, 16, 0.05, 2, style).unwrap();
        let spec = ModelSpec::desk(
            [1, 16, 16],
            10,
            &[1.0],
            BnStyle::Dual,
            Some(EncodingScheme::Dct(8)),
        )
        .unwrap();
        let enc =
            crate::layers::LambdaEncoder::new(EncodingScheme::Dct(8), &crate::training::S1, 0)
                .unwrap();
        let m = Model::<f64>::new(spec, Some(enc), 3).unwrap();
        let worst = saliency_gradcheck(&m, &d, 4, 0.3, 1.0, 1e-4).unwrap();
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn flops_grow_with_width_and_film_is_cheap() {
        let enc = EncodingScheme::RandomOrthogonal(128);
        let spec =
            ModelSpec::desk([1, 16, 16], 10, &[0.5, 0.75, 1.0], BnStyle::Dual, Some(enc)).unwrap();
        let c: Vec<FlopCount> = spec
            .widths
            .iter()
            .map(|&w| flops_count(&spec, w).unwrap())
            .collect();
        assert!(c[0].total() < c[1].total() && c[1].total() < c[2].total());
        // conv1 16·1·9·256 + conv2 32·16·16·64 + dense 32·10
        assert_eq!(c[2].backbone, 36_864 + 524_288 + 320);
        // per BN: 2·(128·C + C²)
        assert_eq!(c[2].film, 2 * (128 * 16 + 256) + 2 * (128 * 32 + 1024));
        assert!(c[2].film_overhead() < 0.05);
        assert!(flops_count(&spec, 0.6).is_err());
    }

    #[test]
    fn dense_layer_counts_m_times_n() {
        let spec = ModelSpec {
            input: [3, 1, 1],
            layers: vec![
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense { out_features: 7 },
            ],
            classes: 7,
            widths: vec![1.0],
            bn: BnStyle::Normal,
            encoding: None,
        };
        assert_eq!(flops_count(&spec, 1.0).unwrap().backbone, 21);
    }
}
