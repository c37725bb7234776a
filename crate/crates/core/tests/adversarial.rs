use aliascope::adversarial::linf_distance;
use aliascope::instrumentation::Spread;
use aliascope::nn::ops::{softmax_cross_entropy, Reduction};
use aliascope::nn::{Network, Tensor};
use aliascope::{
    adversarial_sweep, analyze_dataset, build_model, generate_dataset, pgd_attack, train, AttackConfig, DatasetSpec,
    Family, ImageSet, ModelSpec, ThresholdRule, TrainConfig,
};
use std::sync::OnceLock;

fn data() -> ImageSet {
    generate_dataset(&DatasetSpec {
        n_freqs: 2,
        size: 8,
        count: 128,
        noise_amplitude: 0.05,
        seed: 11,
    })
    .unwrap()
    .to_image_set()
}

/// Small trained model shared by every test.
fn network() -> &'static Network<f32> {
    static NET: OnceLock<Network<f32>> = OnceLock::new();
    NET.get_or_init(|| {
        let spec = ModelSpec::resnet(Family::ResnetC, 2, 1, 4, 8);
        let config = TrainConfig {
            epochs: 4,
            batch_size: 16,
            lr_drop_epoch: 4,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        train(build_model(&spec, 3).unwrap(), &data(), &config)
            .unwrap()
            .model
            .network
    })
}

fn batch(n: usize) -> (Tensor<f32>, Vec<usize>) {
    data().batch(&(0..n).collect::<Vec<_>>())
}

fn loss(x: &Tensor<f32>, labels: &[usize]) -> f64 {
    let logits = network().forward_eval(x).unwrap();
    softmax_cross_entropy(&logits, labels, Reduction::Sum).unwrap().loss as f64
}

fn attack(epsilon: f64) -> AttackConfig {
    AttackConfig {
        steps: 10,
        ..AttackConfig::default()
    }
    .with_epsilon(epsilon)
}

#[test]
fn zero_radius_returns_the_input() {
    let (x, labels) = batch(8);
    let adv = pgd_attack(network(), &x, &labels, &attack(0.0)).unwrap();
    assert_eq!(adv.data(), x.data());
}

#[test]
fn perturbation_stays_inside_the_ball() {
    let (x, labels) = batch(16);
    for eps in [1e-4, 0.01, 0.02, 0.05, 0.3] {
        for random_start in [false, true] {
            let config = AttackConfig {
                random_start,
                seed: 5,
                ..attack(eps)
            };
            let adv = pgd_attack(network(), &x, &labels, &config).unwrap();
            let d = linf_distance(&adv, &x);
            assert!(d <= eps, "eps {eps}: {d}");
            assert!(d > 0.0);
        }
    }
}

#[test]
fn clip_range_is_respected() {
    let (x, labels) = batch(8);
    let config = AttackConfig {
        clip_range: Some((-0.5, 0.5)),
        ..attack(0.2)
    };
    let adv = pgd_attack(network(), &x, &labels, &config).unwrap();
    assert!(linf_distance(&adv, &x) <= 0.2);
    for (&a, &c) in adv.data().iter().zip(x.data()) {
        // Inside the clip range unless the clean value itself was outside it.
        assert!(
            (-0.5..=0.5).contains(&a) || (a - c).abs() <= 0.2 && !(-0.5..=0.5).contains(&c),
            "{a} from {c}"
        );
    }
}

#[test]
fn attack_raises_the_loss() {
    let (x, labels) = batch(32);
    let clean = loss(&x, &labels);
    let mut last = clean;
    for eps in [0.01, 0.05, 0.2] {
        let adv = pgd_attack(network(), &x, &labels, &attack(eps)).unwrap();
        let l = loss(&adv, &labels);
        assert!(l > clean, "eps {eps}: {l} vs clean {clean}");
        last = l;
    }
    assert!(last > 2.0 * clean, "{last} vs {clean}");
}

#[test]
fn attack_is_deterministic() {
    let (x, labels) = batch(8);
    let config = AttackConfig {
        random_start: true,
        seed: 9,
        ..attack(0.05)
    };
    let a = pgd_attack(network(), &x, &labels, &config).unwrap();
    let b = pgd_attack(network(), &x, &labels, &config).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn sweep_zero_row_matches_clean_analysis() {
    let data = data();
    let rule = ThresholdRule::new(10.0).unwrap();
    let table = adversarial_sweep(network(), &data, &[0.0, 0.05, 0.3], &rule, &attack(0.0), Some(40)).unwrap();
    let clean = analyze_dataset(network(), &data, &rule, Some(40), "m", "d").unwrap();

    assert_eq!(table.samples, 40);
    assert_eq!(
        table.points,
        clean.points.iter().map(|p| p.name.clone()).collect::<Vec<_>>()
    );
    let zero = &table.rows[0];
    assert_eq!(zero.top1, clean.accuracy.top1);
    assert_eq!(zero.top5, clean.accuracy.top5);
    assert_eq!(zero.max_perturbation, 0.0);
    let shares: Vec<f64> = clean
        .samples
        .iter()
        .filter_map(|s| s.pooled_fractions.map(|f| f.aliased_total()))
        .collect();
    assert_eq!(zero.pooled, Spread::of(&shares));
    for (p, spread) in zero.per_point.iter().enumerate() {
        let shares: Vec<f64> = clean
            .samples
            .iter()
            .map(|s| s.per_point_fractions[p].aliased_total())
            .collect();
        assert_eq!(Some(*spread), Spread::of(&shares));
    }
    for row in &table.rows {
        assert!(row.max_perturbation <= row.epsilon);
    }
    assert!(table.rows[2].top1 < zero.top1, "{:?}", table.rows);
}

#[test]
fn sweep_rejects_bad_radius_lists() {
    let data = data();
    let rule = ThresholdRule::new(10.0).unwrap();
    let base = attack(0.0);
    assert!(adversarial_sweep(network(), &data, &[0.01], &rule, &base, Some(4)).is_err());
    assert!(adversarial_sweep(network(), &data, &[], &rule, &base, Some(4)).is_err());
    assert!(adversarial_sweep(network(), &data, &[0.0, -0.01], &rule, &base, Some(4)).is_err());
    assert!(adversarial_sweep(network(), &data, &[0.0], &rule, &base, Some(0)).is_err());
}

#[test]
fn untrained_network_is_refused() {
    let spec = ModelSpec::resnet(Family::ResnetC, 2, 1, 4, 8);
    let model = build_model::<f32>(&spec, 0).unwrap();
    let (x, labels) = batch(2);
    assert!(pgd_attack(&model.network, &x, &labels, &attack(0.01)).is_err());
}

#[test]
fn label_count_must_match_batch() {
    let (x, labels) = batch(4);
    assert!(pgd_attack(network(), &x, &labels[..3], &attack(0.01)).is_err());
}
