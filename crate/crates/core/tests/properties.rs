use oat_core::attacks::{fgsm, mi_fgsm, pgd, Conditioned};
use oat_core::data::BatchIterator;
use oat_core::tensor::gradcheck;
use oat_core::training::{cosine_lr, oat_loss, sgd_update, LambdaDistribution};
use oat_core::{AttackSpec, BnStyle, EncodingScheme, LambdaEncoder, Model, ModelSpec, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const S1: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 1.0];

fn linf(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .fold(0.0, f64::max)
}

fn small_model(seed: u64) -> Model<f32> {
    let spec = ModelSpec::desk(
        [1, 16, 16],
        10,
        &[1.0],
        BnStyle::Dual,
        Some(EncodingScheme::RandomOrthogonal(16)),
    )
    .unwrap();
    let enc = LambdaEncoder::new(EncodingScheme::RandomOrthogonal(16), &S1, seed).unwrap();
    Model::new(spec, Some(enc), seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attacks_stay_in_budget_and_range(
        seed in any::<u64>(),
        pixels in prop::collection::vec(0.0f32..=1.0, 256),
        label in 0usize..10,
        lambda in 0.0f64..=1.0,
        eps in 0.0f64..0.1,
        iters in 1usize..4,
    ) {
        let model = small_model(seed);
        let x = Tensor::new(vec![1, 1, 16, 16], pixels).unwrap();
        let labels = [label];
        let lambdas = [lambda];
        let target = Conditioned { model: &model, lambdas: &lambdas, width: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let advs = [
            fgsm(&target, &x, &labels, eps).unwrap(),
            pgd(&target, &x, &labels, &AttackSpec::pgd(eps, eps / 2.0, iters), &mut rng).unwrap(),
            mi_fgsm(&target, &x, &labels, &AttackSpec::mi_fgsm(eps, iters, 1.0)).unwrap(),
        ];
        for adv in &advs {
            prop_assert!(linf(adv, &x) <= eps + 1e-7);
            prop_assert!(adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn matmul_gradient_matches_differences(
        m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..m * k).map(|_| r.random_range(-1.0..1.0)).collect();
        let b = Tensor::new(vec![k, n], (0..k * n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let x = Tensor::new(vec![m, k], a).unwrap();
        let err = gradcheck(
            |t, v| {
                let w = t.constant(b.clone());
                let y = t.matmul(v, w)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-3,
        )
        .unwrap();
        prop_assert!(err < 1e-8, "rel. err {err}");
    }

    #[test]
    fn cosine_schedule_decays_from_base_to_zero(total in 1usize..500, base in 1e-4f64..1.0) {
        prop_assert!((cosine_lr(0, total, base) - base).abs() < 1e-12);
        prop_assert!(cosine_lr(total, total, base).abs() < 1e-12);
        for t in 1..=total {
            prop_assert!(cosine_lr(t, total, base) <= cosine_lr(t - 1, total, base));
        }
    }

    #[test]
    fn sgd_matches_closed_form(
        theta in prop::collection::vec(-1.0f64..1.0, 1..16),
        lr in 0.0f64..0.5,
        wd in 0.0f64..1e-2,
    ) {
        let grad: Vec<f64> = theta.iter().map(|t| 2.0 * t).collect();
        let mut th = theta.clone();
        let mut vel = vec![0.0; theta.len()];
        sgd_update(&mut th, &mut vel, &grad, lr, 0.9, wd);
        for ((&t0, &t1), &g) in theta.iter().zip(&th).zip(&grad) {
            prop_assert!((t1 - (t0 - lr * (g + wd * t0))).abs() < 1e-12);
        }
    }

    #[test]
    fn oat_loss_interpolates(clean in 0.0f64..10.0, adv in 0.0f64..10.0, lambda in 0.0f64..=1.0) {
        let l = oat_loss(clean, adv, lambda);
        prop_assert!(l >= clean.min(adv) - 1e-12 && l <= clean.max(adv) + 1e-12);
        prop_assert_eq!(oat_loss(clean, adv, 0.0), clean);
        prop_assert_eq!(oat_loss(clean, adv, 1.0), adv);
    }

    #[test]
    fn epoch_order_is_a_permutation(len in 1usize..300, seed in any::<u64>(), epoch in 0u64..5) {
        let mut p = BatchIterator::permutation(len, seed, epoch);
        p.sort_unstable();
        prop_assert_eq!(p, (0..len).collect::<Vec<_>>());
    }

    #[test]
    fn encodings_are_unit_norm(lambda in 0.0f64..=1.0, seed in any::<u64>(), d in prop::sample::select(vec![8usize, 16, 128])) {
        for scheme in [EncodingScheme::RandomOrthogonal(d), EncodingScheme::Dct(d)] {
            let e = LambdaEncoder::new(scheme, &S1, seed).unwrap().encode(lambda).unwrap();
            let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn lambda_samples_stay_on_support(seed in any::<u64>(), n in 1usize..64) {
        let dist = LambdaDistribution::uniform(&S1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prop_assert!(dist.sample_batch(n, &mut rng).iter().all(|l| S1.contains(l)));
    }
}

#[test]
fn encoder_rejects_out_of_range_lambda() {
    let enc = LambdaEncoder::new(EncodingScheme::Dct(8), &S1, 0).unwrap();
    assert!(enc.encode(1.5).is_err());
    assert!(enc.encode(-0.1).is_err());
}
