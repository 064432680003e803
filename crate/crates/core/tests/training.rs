use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use skipnet::blocks::ConnectivityKind;
use skipnet::config::RunConfig;
use skipnet::features::{normalize, spectrogram};
use skipnet::model::{AcousticModel, ModelConfig};
use skipnet::synth::{random_transcript, render, synth_alphabet, SynthConfig};
use skipnet::train::{lr_at, sgd_step, train, SgdState, TrainConfig, TrainOutputs, Utterance};

fn utterances(n: usize, seed: u64) -> Vec<Utterance> {
    let cfg = RunConfig::toy();
    let synth = SynthConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let text = random_transcript(&synth, &mut rng);
            let wave = render(&text, &synth, &mut rng).unwrap();
            let f = normalize(&spectrogram(&wave, &cfg.features).unwrap()).unwrap();
            Utterance::new(format!("u{i}"), f.features, &text, &synth_alphabet()).unwrap()
        })
        .collect()
}

fn toy_model(kind: ConnectivityKind, width: usize) -> ModelConfig {
    ModelConfig {
        connectivity: kind,
        width,
        ..RunConfig::toy().model
    }
}

#[test]
fn single_utterance_loss_strictly_decreases() {
    let utt = &utterances(1, 11)[0];
    let cfg = TrainConfig::default();
    for kind in ConnectivityKind::ALL {
        let mut model = AcousticModel::new(toy_model(kind, 32), 3).unwrap();
        let mut state = SgdState::default();
        let mut losses = Vec::new();
        for epoch in 1..=20 {
            let g = model.batch_loss_and_grads(&[(&utt.features, &utt.target)]).unwrap();
            losses.push(g.loss);
            model.params_mut().zero_grad();
            model.params_mut().accumulate_grads(&g.grads, 1.0).unwrap();
            model.apply_batch_stats(&g.batch_stats);
            sgd_step(model.params_mut(), &mut state, lr_at(&cfg, epoch), cfg.momentum, cfg.clip_norm).unwrap();
        }
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "{kind}: {losses:?}");
        }
    }
}

fn run(seed: u64, dir: &std::path::Path) -> (String, Vec<Vec<f64>>) {
    let utts = utterances(6, 5);
    let mut model = AcousticModel::new(toy_model(ConnectivityKind::Highway, 8), seed).unwrap();
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 2,
        seed,
        lr_drop_epochs: vec![2, 3],
        ..Default::default()
    };
    let report = train(&mut model, &utts, &utts[..2], &synth_alphabet(), &cfg, &TrainOutputs::in_dir(dir)).unwrap();
    for row in &report.rows {
        assert_eq!(row.lr, lr_at(&cfg, row.epoch));
    }
    let csv = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    let without_wall: String = csv
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string() + "\n")
        .collect();
    (without_wall, model.params().iter().map(|p| p.value.data().to_vec()).collect())
}

#[test]
fn same_seed_same_metrics_and_parameters() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let (csv_a, params_a) = run(1, a.path());
    let (csv_b, params_b) = run(1, b.path());
    assert_eq!(csv_a, csv_b);
    assert_eq!(params_a, params_b);
    assert!(csv_a.lines().count() == 9, "{csv_a}");
    let (_, params_c) = run(2, c.path());
    assert_ne!(params_a, params_c);
}
