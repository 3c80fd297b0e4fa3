use proptest::prelude::*;
use rand::Rng;

use procwarm::corpus::{build_corpus, Ablation};
use procwarm::exec::Exec;
use procwarm::grammar::{
    build_mask, closer_positions, recognize, sample_sequence, GrammarSpec, Language,
};
use procwarm::model::params::{block_index, layout};
use procwarm::model::{init_model, Checkpoint, ModelConfig, ModelParams, Stage};
use procwarm::rng::{self, Lane};
use procwarm::surgery::{shuffle_weights, transfer_layers, LayerRange, ShuffleScope};
use procwarm::trainer::{AdamW, AdamWConfig, CosineSchedule, RecordKind, RunMetrics, StepRecord};

fn spec_for(lang: u8, k: usize, half: usize) -> GrammarSpec {
    let n = 2 * half;
    match lang % 3 {
        0 => GrammarSpec::ww(k + 1, n),
        1 => GrammarSpec::dyck(k, n),
        _ => GrammarSpec::dyck_shuffle(k, n),
    }
}

fn tiny(depth: usize) -> ModelConfig {
    ModelConfig {
        preset: "tiny".into(),
        depth,
        width: 8,
        heads: 2,
        mlp_ratio: 2,
        seq_len: 6,
        vocab_size: 4,
        num_classes: 3,
        image_size: 8,
        patch_size: 4,
        channels: 3,
    }
}

fn kind_of(ckpt: &Checkpoint, name: &str) -> procwarm::model::TensorKind {
    layout(&ckpt.config, ckpt.stage)
        .into_iter()
        .find(|(n, _, _)| n == name)
        .map(|(_, _, k)| k)
        .unwrap()
}

fn sorted_bits(v: &[f32]) -> Vec<u32> {
    let mut b: Vec<u32> = v.iter().map(|x| x.to_bits()).collect();
    b.sort_unstable();
    b
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn samples_are_accepted(lang in 0u8..3, k in 1usize..9, half in 1usize..20, seed: u64) {
        let spec = spec_for(lang, k, half);
        let s = sample_sequence(&spec, seed).unwrap();
        prop_assert_eq!(s.len(), spec.seq_len);
        prop_assert!(recognize(&spec, &s));
    }

    #[test]
    fn masks_are_consistent(lang in 0u8..3, k in 1usize..9, half in 1usize..20, ratio in 0.05f64..=1.0, seed: u64) {
        let spec = spec_for(lang, k, half);
        let s = sample_sequence(&spec, seed).unwrap();
        let m = build_mask(&spec, &s, ratio, seed ^ 1).unwrap();
        prop_assert!(m.is_consistent(spec.mask_id()));
        if spec.language == Language::WW {
            let second: Vec<usize> = (half..2 * half).collect();
            prop_assert_eq!(m.positions().collect::<Vec<_>>(), second);
        } else {
            let closers = closer_positions(&spec, &s.0);
            prop_assert_eq!(m.targets.len(), (ratio * closers.len() as f64).ceil() as usize);
            for (p, sym) in &m.targets {
                prop_assert!(closers.contains(p));
                prop_assert!(spec.is_closer(*sym));
            }
        }
    }

    #[test]
    fn schedule_shape(peak in 1e-5f64..1.0, warm in 0usize..50, extra in 1usize..500) {
        let s = CosineSchedule { peak, warmup_steps: warm, total_steps: warm + extra };
        let lrs: Vec<f64> = (0..=warm + extra + 5).map(|t| s.lr(t)).collect();
        prop_assert!(lrs.iter().all(|&l| (0.0..=peak).contains(&l)));
        prop_assert!(lrs[..=warm].windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(lrs[warm..].windows(2).all(|w| w[0] >= w[1]));
        prop_assert_eq!(s.lr(warm), peak);
    }

    #[test]
    fn metrics_round_trip(
        rows in prop::collection::vec((any::<bool>(), 1u64..1000, 0.0f64..1.0, 0.0f64..20.0, 0.0f64..=1.0), 0..40),
    ) {
        let mut m = RunMetrics::new("run", Stage::Warmup, "abc");
        let mut step = 0;
        for (eval, gap, lr, loss, accuracy) in rows {
            step += gap;
            m.records.push(StepRecord {
                kind: if eval { RecordKind::Eval } else { RecordKind::Train },
                step, lr, loss, accuracy, wall_clock: 0.0,
            });
        }
        let text = m.to_jsonl();
        let back = RunMetrics::from_jsonl(&text).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(back.to_jsonl(), text);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn corpus_is_identical_across_exec_modes(lang in 0u8..3, k in 1usize..6, half in 1usize..10, seed: u64, shuffled: bool) {
        let spec = spec_for(lang, k, half);
        let ablation = if shuffled && spec.language != Language::WW { Ablation::SequenceShuffled } else { Ablation::None };
        let a = build_corpus(spec, 40, 0.5, seed, ablation, Exec::Parallel).unwrap();
        let b = build_corpus(spec, 40, 0.5, seed, ablation, Exec::Reference).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn shuffle_preserves_values_and_scope(depth in 1usize..4, scope in 0u8..3, seed: u64) {
        let scope = [ShuffleScope::All, ShuffleScope::AttentionOnly, ShuffleScope::MlpOnly][scope as usize];
        let c = init_model(&tiny(depth), seed).unwrap();
        let s = shuffle_weights(&c, scope, seed.wrapping_add(1)).unwrap();
        for (a, b) in c.tensors.iter().zip(&s.tensors) {
            use procwarm::model::TensorKind::*;
            let kind = kind_of(&c, &a.name);
            let covered = block_index(&a.name).is_some() && match scope {
                ShuffleScope::All => matches!(kind, AttentionWeight | MlpWeight),
                ShuffleScope::AttentionOnly => kind == AttentionWeight,
                ShuffleScope::MlpOnly => kind == MlpWeight,
            };
            if covered {
                prop_assert_eq!(sorted_bits(&a.data), sorted_bits(&b.data));
                prop_assert!(a.data != b.data, "{} unchanged", a.name);
            } else {
                prop_assert!(a.bit_eq(b), "{} changed", a.name);
            }
        }
    }

    #[test]
    fn transfer_partitions_blocks(depth in 1usize..8, range in 0u8..3, s1: u64, s2: u64) {
        prop_assume!(s1 != s2);
        let range = [LayerRange::First, LayerRange::Middle, LayerRange::Final][range as usize];
        let cfg = tiny(depth);
        let target = init_model(&cfg, s1).unwrap();
        let donor = init_model(&cfg, s2).unwrap();
        let out = transfer_layers(&target, &donor, range).unwrap();
        let blocks = range.blocks(depth);
        for ((t, d), o) in target.tensors.iter().zip(&donor.tensors).zip(&out.tensors) {
            let from_donor = block_index(&t.name).is_some_and(|b| blocks.contains(&b));
            let want = if from_donor { d } else { t };
            prop_assert_eq!(&o.data, &want.data, "{}", &o.name);
        }
        let same = transfer_layers(&target, &target, range).unwrap();
        prop_assert!(same.tensors.iter().zip(&target.tensors).all(|(a, b)| a.bit_eq(b)));
        let all: usize = [LayerRange::First, LayerRange::Middle, LayerRange::Final].iter().map(|r| r.blocks(depth).len()).sum();
        prop_assert_eq!(all, depth);
    }

    #[test]
    fn frozen_tensors_never_move(seed: u64, steps in 1usize..6) {
        let c = init_model(&tiny(2), seed).unwrap();
        let frozen: Vec<bool> = c.tensors.iter().map(|t| t.frozen).collect();
        prop_assert!(frozen.iter().any(|&f| f));
        let mut p = ModelParams::<f32>::from_checkpoint(&c).unwrap();
        let before = p.clone();
        let decay = vec![true; frozen.len()];
        let mut opt = AdamW::new(&p, AdamWConfig::default(), frozen.clone(), decay);
        let mut r = rng::keyed(seed, 0, Lane::Init);
        for _ in 0..steps {
            let mut g = p.zeros_like();
            for t in g.tensors_mut() {
                t.iter_mut().for_each(|x| *x = r.random_range(-1.0..1.0));
            }
            opt.apply(&mut p, &g, 1e-2);
        }
        for (i, (a, b)) in before.tensors().iter().zip(p.tensors()).enumerate() {
            if frozen[i] {
                prop_assert_eq!(*a, b);
                prop_assert!(opt.moments(i).0.is_empty() && opt.moments(i).1.is_empty());
            } else {
                prop_assert!(*a != b);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip(depth in 1usize..4, seed: u64, vision: bool) {
        let cfg = tiny(depth);
        let c = if vision {
            procwarm::model::init_vision_model(&cfg, seed).unwrap()
        } else {
            init_model(&cfg, seed).unwrap()
        };
        let dir = tempfile::tempdir().unwrap();
        c.write(dir.path()).unwrap();
        let back = Checkpoint::read(dir.path()).unwrap();
        prop_assert!(back.bit_eq(&c));
        prop_assert_eq!(back.content_hash(), c.content_hash());
    }
}
