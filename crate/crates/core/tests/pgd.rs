use conflicts_core::data::{SynthKind, SynthSpec};
use conflicts_core::{
    eval_accuracy, eval_robust_accuracy, fit, pgd_attack, synth_dataset, AdvSpec, LayerSpec, ParamModel, ScheduleKind,
    Topology, TrainPlan,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn attacks_stay_in_the_ball_and_the_unit_box() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let topos = [
        Topology::new(vec![6], vec![LayerSpec::Dense { out: 8 }, LayerSpec::Relu], 3).unwrap(),
        Topology::new(
            vec![1, 6, 6],
            vec![
                LayerSpec::Conv {
                    out_channels: 2,
                    kernel: 3,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
            ],
            4,
        )
        .unwrap(),
    ];
    for attack in 0..1000 {
        let topo = &topos[attack % 2];
        let model = ParamModel::new(topo.clone(), attack as u64 / 50).unwrap();
        let x: Vec<f64> = (0..topo.input_len()).map(|_| rng.random::<f64>()).collect();
        let gamma = rng.random_range(0.0..0.4);
        let spec = AdvSpec {
            steps: rng.random_range(1..12),
            step_size: rng.random_range(0.001..0.2),
            random_start: rng.random_bool(0.5),
            ..AdvSpec::standard(gamma)
        };
        let y = rng.random_range(0..topo.num_classes);
        let adv = pgd_attack(&model, &x, y, &spec, attack as u64).unwrap();
        for (a, b) in adv.iter().zip(&x) {
            assert!(
                (a - b).abs() <= gamma + 1e-12,
                "attack {attack}: moved {}",
                (a - b).abs()
            );
            assert!((0.0..=1.0).contains(a), "attack {attack}: left the box");
        }
    }
}

/// For a two-class linear model the input gradient of the cross-entropy is
/// `(1 − p_y)(w_other − w_y)`, so every ascent step moves each coordinate
/// toward the same face of the ball.
#[test]
fn linear_model_attack_hits_the_closed_form_corner() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..50 {
        let d = rng.random_range(1..20);
        let model = ParamModel::new(Topology::new(vec![d], vec![], 2).unwrap(), case).unwrap();
        let w = model.params().tensors()[0].data();
        let x: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
        let y = rng.random_range(0..2);
        let gamma = rng.random_range(0.01..0.3);
        let adv = pgd_attack(&model, &x, y, &AdvSpec::standard(gamma), case).unwrap();
        for i in 0..d {
            let toward = w[(1 - y) * d + i] - w[y * d + i];
            let want = if toward > 0.0 {
                (x[i] + gamma).min(1.0)
            } else {
                (x[i] - gamma).max(0.0)
            };
            assert!(
                (adv[i] - want).abs() < 1e-6,
                "case {case} coord {i}: {} vs {want}",
                adv[i]
            );
        }
    }
}

#[test]
fn robust_accuracy_never_exceeds_clean_accuracy() {
    let (train, test) = synth_dataset(&SynthSpec {
        side: 8,
        ..SynthSpec::new(SynthKind::GaussianBlobs, 300, 100, 4, 6)
    })
    .unwrap();
    let plan = TrainPlan {
        epochs: 3,
        batch_size: 25,
        lr_initial: 0.05,
        lr_max: 0.2,
        schedule_kind: ScheduleKind::OneCycle,
        seed: 1,
    };
    for seed in 0..3 {
        let mut model = ParamModel::new(Topology::reference(&[1, 8, 8], 4).unwrap(), seed).unwrap();
        fit(&mut model, &train, &plan).unwrap();
        let clean = eval_accuracy(&model, &test).unwrap();
        assert_eq!(
            eval_robust_accuracy(&model, &test, &AdvSpec::standard(0.0), seed).unwrap(),
            clean
        );
        for gamma in [0.05, 0.1, 0.25] {
            let robust = eval_robust_accuracy(&model, &test, &AdvSpec::standard(gamma), seed).unwrap();
            assert!(robust <= clean, "seed {seed} γ {gamma}: {robust} > {clean}");
        }
    }
}
