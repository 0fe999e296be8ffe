use rand::Rng;
use sha2::{Digest, Sha256};
use ugnn::data::{gen_moons2d, parse_cifar10, MoonsParams};
use ugnn::layers::Activation;
use ugnn::training::{self, TrainConfig};
use ugnn::upd::UpdKind;
use ugnn::verification::{map_oracle_grid2d, map_oracle_penalty, GridOptions, PenaltySchedule};
use ugnn::{margin, seeded_rng, MlpConfig, Tensor, UgnnConfig, UgnnModel};

fn trained_toy() -> UgnnModel<f64> {
    let data = gen_moons2d::<f64>(&MoonsParams {
        count: 400,
        noise: 0.1,
        seed: 1,
    })
    .unwrap();
    let mut model = UgnnModel::build_mlp(&MlpConfig {
        dims: vec![2; 5],
        classes: 2,
        activation: Activation::MaxMin,
        head: UpdKind::Bounded,
        seed: 2,
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 30,
        lr: 0.01,
        batch_size: 32,
        seed: 3,
        ..TrainConfig::default()
    };
    training::train(&mut model, &data, &cfg).unwrap();
    model
}

fn toy_points(n: usize, seed: u64) -> Vec<Tensor<f64>> {
    let data = gen_moons2d::<f64>(&MoonsParams { count: n, noise: 0.1, seed }).unwrap();
    (0..n).map(|i| data.sample(i)).collect()
}

#[test]
fn logit_differences_are_one_lipschitz() {
    let mut model = UgnnModel::<f64>::build_mlp(&MlpConfig {
        dims: vec![6, 6, 4],
        classes: 4,
        activation: Activation::MaxMin,
        head: UpdKind::Unbounded,
        seed: 4,
    })
    .unwrap();
    model.freeze().unwrap();
    let mut rng = seeded_rng(5);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let a = Tensor::<f64>::randn(&[6], 1.0, &mut rng);
        let d = Tensor::<f64>::randn(&[6], rng.random_range(1e-3..2.0), &mut rng);
        let b = a.add(&d).unwrap();
        let (fa, fb) = (model.forward(&a).unwrap(), model.forward(&b).unwrap());
        for i in 0..4 {
            for j in i + 1..4 {
                let change = ((fa[i] - fa[j]) - (fb[i] - fb[j])).abs();
                worst = worst.max(change / d.norm());
            }
        }
    }
    assert!(worst <= 1.0 + 1e-6, "{worst}");
    assert!(worst > 0.9, "bound should be nearly attained: {worst}");
}

#[test]
fn trained_toy_adversarial_lands_near_the_boundary() {
    let model = trained_toy();
    let mut checked = 0;
    for x in toy_points(200, 6) {
        let m = margin(&model.forward(&x).unwrap()).unwrap();
        // near the boundary: within one hinge margin
        if m.value <= 0.0 || m.value > 0.5 {
            continue;
        }
        let adv = model.closest_adversarial(&x).unwrap();
        assert!((adv.gradient_norm - 1.0).abs() <= 1e-9);
        let step = adv.point.sub(&x).unwrap().norm();
        assert!((step - m.value).abs() <= 1e-9 * m.value.max(1.0));
        assert!(adv.residual_gap <= 0.1 * m.value, "gap {} vs M {}", adv.residual_gap, m.value);
        checked += 1;
    }
    assert!(checked >= 10, "only {checked} points near the boundary");
}

#[test]
fn grid_and_penalty_oracles_agree_on_a_trained_toy() {
    let model = trained_toy();
    let (mut agree, mut total) = (0, 0);
    for x in toy_points(40, 7) {
        let p = map_oracle_penalty(&model, &x, &PenaltySchedule::default()).unwrap();
        let g = map_oracle_grid2d(&model, &x, &GridOptions::default()).unwrap();
        if !(p.converged && g.converged) {
            continue;
        }
        total += 1;
        // the grid search is global; the penalty descent can only stop farther out
        assert!(g.distance <= p.distance * (1.0 + 1e-3), "grid {} penalty {}", g.distance, p.distance);
        if (p.distance - g.distance).abs() <= 0.02 * g.distance {
            agree += 1;
        }
    }
    assert!(total >= 30, "{total}");
    assert!(agree * 10 >= total * 9, "{agree}/{total} within 2%");
}

#[test]
fn fresh_conv_model_certifies_within_its_margin() {
    let mut model = UgnnModel::<f32>::build(&UgnnConfig {
        seed: 8,
        ..UgnnConfig::new(32, 3, 4)
    })
    .unwrap();
    model.freeze().unwrap();
    let x = Tensor::<f32>::randn(&[3, 32, 32], 1.0, &mut seeded_rng(9));
    let r = model.certify(&x, 0.0).unwrap();
    assert_eq!(r.radius, r.margin);
    let adv = r.adversarial.unwrap();
    let step = adv.sub(&x).unwrap().norm();
    assert!((step - r.margin).abs() <= 1e-3 * r.margin.max(1.0));
}

/// Decoded pixels of a fixed synthetic record, hashed as little-endian f32.
#[test]
fn cifar_decode_is_stable() {
    let mut rec = vec![7u8];
    rec.extend((0..3072u32).map(|k| ((k * 31 + 7) % 256) as u8));
    let data = parse_cifar10::<f32>(&rec).unwrap();
    assert_eq!(data.labels, vec![7]);
    let mut h = Sha256::new();
    for v in data.inputs.data() {
        h.update(v.to_le_bytes());
    }
    let hex: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(hex, GOLDEN);
}

const GOLDEN: &str = "82e4d96c49d7fd71c52d80bada73addd8ad18c6c489d181ab564142610848fd0";
