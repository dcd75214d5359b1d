use proptest::prelude::*;
use rand::Rng;

use hpformer::config::{run_training, RunConfig};
use hpformer::geom::seeded_rng;
use hpformer::model::{Backbone, BlockInput, Fusion, Model, ModelConfig};
use hpformer::numcore::{Graph, Tensor};
use hpformer::synth::{self, nearest_centroid_accuracy};
use hpformer::train::{cross_entropy_loss, late_fusion_loss, BlockSpec, TrainConfig};

fn tiny(fusion: Fusion, gamma_init: f64) -> ModelConfig {
    ModelConfig {
        widths: vec![4, 6, 8, 8],
        k: 4,
        n_input: 48,
        num_classes: 3,
        bands: 2,
        fusion,
        gamma_init,
        ..ModelConfig::default()
    }
}

fn block(seed: u64, n: usize, bands: usize) -> BlockInput {
    let mut rng = seeded_rng(seed);
    BlockInput {
        coords: (0..n)
            .map(|_| [0, 1, 2].map(|_| rng.random_range(-0.5..0.5)))
            .collect(),
        bands: (0..n * bands).map(|_| rng.random_range(0.0..1.0)).collect(),
        fps_start: rng.random_range(0..n),
    }
}

fn logits(model: &Model, input: &BlockInput) -> Tensor {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    let out = model.forward(&mut g, &vars, input).unwrap();
    g.value(out.logits).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn gamma_zero_cpa_is_mid_sum(seed in 0u64..1000, data in 0u64..1000) {
        let cpa = Model::new(tiny(Fusion::MidCpa, 0.0), seed).unwrap();
        let sum = Model::new(tiny(Fusion::MidSum, 0.0), seed).unwrap();
        let input = block(data, 48, 2);
        prop_assert_eq!(logits(&cpa, &input), logits(&sum, &input));
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000, data in 0u64..1000) {
        let m = Model::new(tiny(Fusion::MidCpa, 0.3), seed).unwrap();
        let input = block(data, 48, 2);
        prop_assert_eq!(logits(&m, &input), logits(&m, &input));
    }

    #[test]
    fn permuting_points_permutes_logits(seed in 0u64..1000, data in 0u64..1000, perm in Just((0..48).collect::<Vec<usize>>()).prop_shuffle()) {
        let m = Model::new(tiny(Fusion::MidCpa, 0.4), seed).unwrap();
        let input = block(data, 48, 2);
        // perm[new] = old
        let moved = BlockInput {
            coords: perm.iter().map(|&i| input.coords[i]).collect(),
            bands: perm.iter().flat_map(|&i| input.bands[i * 2..i * 2 + 2].to_vec()).collect(),
            fps_start: perm.iter().position(|&i| i == input.fps_start).unwrap(),
        };
        let (a, b) = (logits(&m, &input), logits(&m, &moved));
        for (new, &old) in perm.iter().enumerate() {
            prop_assert_eq!(a.row(old), b.row(new));
        }
    }
}

#[test]
fn every_parameter_gets_gradient() {
    for fusion in [
        Fusion::Early,
        Fusion::Late,
        Fusion::MidSum,
        Fusion::MidConcat,
        Fusion::MidCpa,
    ] {
        for backbone in [
            Backbone::VsaTransformer,
            Backbone::PointwiseMlp,
            Backbone::EdgeGraph,
        ] {
            let cfg = ModelConfig {
                backbone,
                ..tiny(fusion, 0.5)
            };
            let m = Model::new(cfg, 3).unwrap();
            let labels: Vec<u32> = (0..48).map(|i| (i % 3) as u32).collect();
            let mut live = std::collections::BTreeSet::new();
            for data in 0..2 {
                let mut g = Graph::new();
                let vars = m.bind(&mut g, true);
                let out = m.forward(&mut g, &vars, &block(data, 48, 2)).unwrap();
                let loss = match out.branch_logits {
                    Some((a, b)) => {
                        let la =
                            cross_entropy_loss(&mut g, a, &labels, &[1.0; 3], u32::MAX).unwrap();
                        let lb =
                            cross_entropy_loss(&mut g, b, &labels, &[1.0; 3], u32::MAX).unwrap();
                        late_fusion_loss(&mut g, la, lb, 0.5).unwrap()
                    }
                    None => cross_entropy_loss(&mut g, out.logits, &labels, &[1.0; 3], u32::MAX)
                        .unwrap(),
                };
                let grads = g.backward(loss).unwrap();
                for (name, v) in &vars {
                    if grads
                        .get(*v)
                        .is_some_and(|t| t.data().iter().any(|x| *x != 0.0))
                    {
                        live.insert(name.clone());
                    }
                }
            }
            let dead: Vec<&String> = m.params.keys().filter(|k| !live.contains(*k)).collect();
            assert!(
                dead.is_empty(),
                "{fusion:?}/{backbone:?} dead parameters: {dead:?}"
            );
        }
    }
}

/// Reduced-cost model on the overfit scene, trained without early stopping.
#[test]
fn overfit_loss_windows_do_not_increase() {
    let mut cfg = RunConfig::from_parts(
        &ModelConfig {
            widths: vec![8, 16, 32, 32],
            k: 8,
            n_input: 512,
            num_classes: 4,
            bands: synth::BANDS,
            ..ModelConfig::default()
        },
        TrainConfig {
            epochs: 110,
            batch: 4,
            lr: 2e-3,
            ..TrainConfig::default()
        },
    );
    cfg.data.validate_on_train = true;
    cfg.blocks = BlockSpec::default();
    let scene = synth::overfit_scene(0);
    let out = run_training(&cfg, &scene, None, |_| {}).unwrap();
    let losses: Vec<f64> = out.report.records.iter().map(|r| r.loss).collect();
    assert_eq!(losses.len(), 110);
    let windows: Vec<f64> = losses[50..]
        .chunks(20)
        .map(|w| w.iter().sum::<f64>() / w.len() as f64)
        .collect();
    assert!(
        windows.windows(2).all(|w| w[1] <= w[0]),
        "window means {windows:?}"
    );
}

#[test]
fn xor_geometry_alone_is_uninformative() {
    for seed in 0..3 {
        let c = synth::xor_scene(seed);
        let labels = c.labels.as_ref().unwrap();
        let geo: Vec<f64> = c.coords.iter().flatten().copied().collect();
        let acc = nearest_centroid_accuracy(&geo, 3, labels).unwrap();
        assert!(
            acc <= 0.60,
            "seed {seed}: geometry nearest-centroid accuracy {acc}"
        );
        let acc = nearest_centroid_accuracy(&c.attrs, c.bands(), labels).unwrap();
        assert!(
            acc <= 0.60,
            "seed {seed}: spectral nearest-centroid accuracy {acc}"
        );
    }
}
