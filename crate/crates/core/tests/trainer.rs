use procwarm::corpus::CorpusRecipe;
use procwarm::exec::Exec;
use procwarm::grammar::GrammarSpec;
use procwarm::images::ImageSet;
use procwarm::model::{init_model, init_vision_model, ModelConfig, ModelParams};
use procwarm::rng::{self, Lane};
use procwarm::trainer::{
    evaluate_images, train_vision, train_warmup, RecordKind, RunOptions, TrainConfig, TrainError,
    WarmupData,
};
use rand_distr::{Distribution, Normal};

fn small() -> ModelConfig {
    ModelConfig {
        depth: 2,
        width: 16,
        heads: 2,
        mlp_ratio: 2,
        seq_len: 8,
        vocab_size: 4,
        num_classes: 2,
        image_size: 8,
        patch_size: 4,
        channels: 1,
        ..ModelConfig::desk()
    }
}

fn warm_cfg(steps: usize) -> TrainConfig {
    let mut c = TrainConfig::warmup_default();
    c.steps = steps;
    c.warmup_steps = steps / 10;
    c.batch_size = 8;
    c.lr = 1e-3;
    c
}

/// Class 0 is dark, class 1 bright, both with pixel noise.
fn separable(count: usize, seed: u64) -> ImageSet {
    let cfg = small();
    let n = cfg.image_size * cfg.image_size;
    let noise = Normal::new(0.0f32, 0.3).unwrap();
    let mut r = rng::keyed(seed, 0, Lane::Dataset);
    let mut pixels = Vec::with_capacity(count * n);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % 2;
        let level = if label == 0 { -1.0 } else { 1.0 };
        pixels.extend((0..n).map(|_| level + noise.sample(&mut r)));
        labels.push(label);
    }
    ImageSet {
        channels: 1,
        size: cfg.image_size,
        num_classes: 2,
        pixels,
        labels,
    }
}

#[test]
fn zero_steps_returns_input() {
    let c = init_model(&small(), 3).unwrap();
    let recipe = CorpusRecipe::new(GrammarSpec::dyck(2, 8), 3);
    let (out, m) = train_warmup(
        &c,
        WarmupData::Stream(&recipe),
        &warm_cfg(0),
        RunOptions::new(Exec::Reference),
    )
    .unwrap();
    assert!(out.tensors.iter().zip(&c.tensors).all(|(a, b)| a.bit_eq(b)));
    assert!(m.records.is_empty());
}

#[test]
fn frozen_tables_survive_training() {
    let c = init_model(&small(), 4).unwrap();
    let recipe = CorpusRecipe::new(GrammarSpec::dyck(2, 8), 4);
    let (out, m) = train_warmup(
        &c,
        WarmupData::Stream(&recipe),
        &warm_cfg(100),
        RunOptions::new(Exec::Parallel),
    )
    .unwrap();
    assert_eq!(m.of_kind(RecordKind::Train).count(), 100);
    for name in ["tok_embed", "pos_embed"] {
        let (a, b) = (c.get(name).unwrap(), out.get(name).unwrap());
        assert!(a.bit_eq(b), "{name} moved");
    }
    let moved = c
        .tensors
        .iter()
        .zip(&out.tensors)
        .filter(|(a, _)| !a.frozen)
        .all(|(a, b)| a.data != b.data);
    assert!(moved);
}

#[test]
fn parallel_matches_reference() {
    let c = init_model(&small(), 5).unwrap();
    let recipe = CorpusRecipe::new(GrammarSpec::dyck(2, 8), 5);
    let run = |exec| {
        train_warmup(
            &c,
            WarmupData::Stream(&recipe),
            &warm_cfg(20),
            RunOptions::new(exec),
        )
        .unwrap()
    };
    let (a, ma) = run(Exec::Parallel);
    let (b, mb) = run(Exec::Reference);
    assert!(a.bit_eq(&b));
    let losses = |m: &procwarm::trainer::RunMetrics| {
        m.records
            .iter()
            .map(|r| r.loss.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(losses(&ma), losses(&mb));
    assert!(mb.records.iter().all(|r| r.wall_clock == 0.0));
}

#[test]
fn separable_images_are_learned() {
    let set = separable(64, 1);
    let c = init_vision_model(&small(), 1).unwrap();
    let mut cfg = TrainConfig::vision_default().with_epochs(50);
    cfg.batch_size = 16;
    cfg.lr = 1e-3;
    cfg.augment = false;
    let (out, m) = train_vision(&c, &set, None, &cfg, RunOptions::new(Exec::Parallel)).unwrap();
    assert_eq!(m.of_kind(RecordKind::Train).count(), 200);
    let params = ModelParams::<f32>::from_checkpoint(&out).unwrap();
    let (_, acc) = evaluate_images(&params, &set, Exec::Parallel).unwrap();
    assert!(acc >= 0.99, "train accuracy {acc}");
}

#[test]
fn divergence_aborts() {
    let c = init_model(&small(), 2).unwrap();
    let recipe = CorpusRecipe::new(GrammarSpec::dyck(2, 8), 2);
    let mut cfg = warm_cfg(10);
    cfg.warmup_steps = 0;
    cfg.lr = 1e30;
    match train_warmup(
        &c,
        WarmupData::Stream(&recipe),
        &cfg,
        RunOptions::new(Exec::Reference),
    ) {
        Err(TrainError::NonFinite { step, lr, .. }) => {
            assert!(step >= 2, "step {step}");
            assert!(lr > 0.0);
        }
        other => panic!(
            "expected a non-finite abort, got {:?}",
            other.map(|(_, m)| m.records.len())
        ),
    }
}
