//! Acceptance suite. Runs every criterion, prints one `PASS`/`FAIL` line
//! for each and exits non-zero if any failed.
//!
//! Set `PROCWARM_ACCEPTANCE=1,4,7` to run a subset.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::Rng;

use procwarm::corpus::{Ablation, CorpusRecipe};
use procwarm::exec::Exec;
use procwarm::grammar::{
    enumerate_completions, recognize, recognize_slice, GrammarSpec, Language, Symbol,
};
use procwarm::images::{shapes, ShapesSpec};
use procwarm::model::params::{block_index, layout};
use procwarm::model::{init_model, Checkpoint, Input, ModelConfig, ModelParams, Stage, TensorKind};
use procwarm::rng::{self, Lane};
use procwarm::surgery::{
    reset_embeddings_and_head, shuffle_weights, transfer_layers, LayerRange, ShuffleScope,
};
use procwarm::trainer::{
    loss_and_grad, train_vision, train_warmup, GradOptions, RecordKind, RunOptions, Targets,
    TrainConfig, WarmupData,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Desk preset sized for k=4 Dyck at length 32.
fn desk_dyck() -> ModelConfig {
    ModelConfig {
        seq_len: 32,
        vocab_size: 8,
        ..ModelConfig::desk()
    }
}

fn warmup_config(steps: usize, batch: usize, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::warmup_default();
    c.steps = steps;
    c.warmup_steps = steps / 15;
    c.batch_size = batch;
    c.lr = 1e-3;
    c.seed = seed;
    c
}

fn soundness() -> Outcome {
    let start = Instant::now();
    let mut rejected = Vec::new();
    for lang in [Language::WW, Language::Dyck, Language::DyckShuffle] {
        let recipe = CorpusRecipe::new(GrammarSpec::default_for(lang, 196), 1);
        let mut bad = 0;
        for chunk in 0..10 {
            let ex = recipe
                .examples(chunk * 10_000, 10_000, Exec::Parallel)
                .unwrap();
            bad += ex
                .iter()
                .filter(|e| !recognize(&recipe.spec, &e.source))
                .count();
        }
        rejected.push(format!("{lang}: {bad} rejected"));
    }
    let secs = start.elapsed().as_secs_f64();
    let all_ok = rejected.iter().all(|r| r.ends_with(": 0 rejected"));
    outcome(
        all_ok && secs < 60.0,
        format!(
            "3 x 100000 sequences at k=64, N=196; {}; {secs:.1}s (limit 60s)",
            rejected.join(", ")
        ),
    )
}

fn brute_force() -> Outcome {
    let spec = GrammarSpec::dyck(1, 8);
    let mut valid = 0;
    let mut disagree = 0;
    for bits in 0u32..256 {
        let s: Vec<Symbol> = (0..8).map(|i| ((bits >> i) & 1) as Symbol).collect();
        let mut depth = 0i32;
        let mut ok = true;
        for &c in &s {
            depth += if c == 0 { 1 } else { -1 };
            ok &= depth >= 0;
        }
        ok &= depth == 0;
        valid += usize::from(ok);
        disagree += usize::from(recognize_slice(&spec, &s) != ok);
    }
    outcome(
        valid == 14 && disagree == 0,
        format!("{valid} valid of 256 (expected 14), {disagree} recognizer disagreements"),
    )
}

fn completions() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    for (spec, unique) in [
        (GrammarSpec::dyck(2, 12), true),
        (GrammarSpec::ww(128, 12), true),
        (GrammarSpec::dyck_shuffle(2, 12), false),
    ] {
        let ex = CorpusRecipe::new(spec, 3)
            .examples(0, 1000, Exec::Parallel)
            .unwrap();
        let mut bad = 0;
        let mut multiple = 0;
        for e in &ex {
            let c = enumerate_completions(&spec, e, usize::MAX).unwrap();
            let ok = if unique {
                c.len() == 1 && c[0] == e.source
            } else {
                !c.is_empty() && c.contains(&e.source)
            };
            bad += usize::from(!ok);
            multiple += usize::from(c.len() > 1);
        }
        pass &= bad == 0;
        notes.push(format!(
            "{}: {bad} violations, {multiple} with several completions",
            spec.language
        ));
    }
    outcome(
        pass,
        format!("1000 examples each at N=12; {}", notes.join("; ")),
    )
}

fn gradient_config() -> ModelConfig {
    ModelConfig {
        depth: 2,
        width: 16,
        heads: 2,
        mlp_ratio: 2,
        seq_len: 6,
        vocab_size: 5,
        num_classes: 4,
        image_size: 8,
        patch_size: 4,
        channels: 2,
        ..ModelConfig::desk()
    }
}

/// Worst relative error between analytic and central-difference gradients
/// over 20 random entries of each tensor kind.
fn worst_gradient_error(stage: Stage, seed: u64) -> (f64, usize) {
    let cfg = gradient_config();
    let mut p = ModelParams::<f64>::zeros(&cfg, stage);
    let names = p.layout();
    let mut r = rng::keyed(seed, 0, Lane::Init);
    for ((name, _, _), t) in names.iter().zip(p.tensors_mut()) {
        let gain = name.contains("norm") && name.ends_with(".weight");
        t.iter_mut()
            .for_each(|x| *x = r.random_range(-0.5..0.5) + if gain { 1.0 } else { 0.0 });
    }
    let ids: Vec<u16> = vec![0, 1, 5, 3, 5, 2, 4, 5, 0, 0, 1, 2, 5, 5, 5, 3, 1, 0];
    let masked = vec![
        vec![(2, 2), (4, 1)],
        vec![(1, 3)],
        vec![(0, 4), (1, 2), (2, 0)],
    ];
    let pixels: Vec<f32> = (0..3 * cfg.channels * 64)
        .map(|_| r.random_range(-1.0..1.0))
        .collect();
    let labels = [0usize, 3, 1];
    let (input, targets, opts) = match stage {
        Stage::Warmup => (
            Input::Tokens {
                ids: &ids,
                batch: 3,
            },
            Targets::Masked(&masked),
            GradOptions::default(),
        ),
        Stage::Vision => (
            Input::Images {
                pixels: &pixels,
                batch: 3,
            },
            Targets::Labels(&labels),
            GradOptions {
                skip_input: false,
                label_smoothing: 0.1,
            },
        ),
    };
    let analytic = loss_and_grad(&p, input, targets, opts, Exec::Reference)
        .unwrap()
        .grads;
    let mut by_kind: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
    for (i, (_, shape, kind)) in names.iter().enumerate() {
        let n: usize = shape.iter().product();
        by_kind
            .entry(format!("{kind:?}"))
            .or_default()
            .extend((0..n).map(|j| (i, j)));
    }
    let h = 1e-5;
    let mut worst = 0.0f64;
    for slots in by_kind.values() {
        for _ in 0..20 {
            let (i, j) = slots[r.random_range(0..slots.len())];
            let orig = p.tensors()[i][j];
            p.tensors_mut()[i][j] = orig + h;
            let up = loss_and_grad(&p, input, targets, opts, Exec::Reference)
                .unwrap()
                .loss;
            p.tensors_mut()[i][j] = orig - h;
            let down = loss_and_grad(&p, input, targets, opts, Exec::Reference)
                .unwrap()
                .loss;
            p.tensors_mut()[i][j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.tensors()[i][j];
            let scale = a.abs().max(numeric.abs());
            if scale > 1e-9 {
                worst = worst.max((a - numeric).abs() / scale);
            }
        }
    }
    (worst, by_kind.len())
}

fn gradients() -> Outcome {
    let (w1, k1) = worst_gradient_error(Stage::Warmup, 1);
    let (w2, k2) = worst_gradient_error(Stage::Vision, 2);
    let worst = w1.max(w2);
    outcome(
        worst < 1e-4,
        format!("depth 2, width 16, f64; {k1} warm-up and {k2} vision tensor kinds; worst relative error {worst:.2e} (limit 1e-4)"),
    )
}

fn freeze() -> Outcome {
    let c = init_model(&desk_dyck(), 5).unwrap();
    let recipe = CorpusRecipe::new(GrammarSpec::dyck(4, 32), 5);
    let (out, m) = train_warmup(
        &c,
        WarmupData::Stream(&recipe),
        &warmup_config(500, 16, 5),
        RunOptions::new(Exec::Parallel),
    )
    .unwrap();
    let steps = m.of_kind(RecordKind::Train).count();
    let frozen_same = ["tok_embed", "pos_embed"]
        .iter()
        .all(|n| c.get(n).unwrap().bit_eq(out.get(n).unwrap()));
    let trained_moved = c
        .tensors
        .iter()
        .zip(&out.tensors)
        .filter(|(a, _)| !a.frozen)
        .all(|(a, b)| a.data != b.data);
    outcome(
        steps == 500 && frozen_same && trained_moved,
        format!("{steps} steps; token and position tables bit-identical: {frozen_same}; every trainable tensor updated: {trained_moved}"),
    )
}

fn learnability() -> Outcome {
    const TARGET: f64 = 0.90;
    const WINDOW: usize = 100;
    let mut best = Vec::new();
    let mut notes = Vec::new();
    for seed in 1..=3u64 {
        let c = init_model(&desk_dyck(), seed).unwrap();
        let recipe = CorpusRecipe::new(GrammarSpec::dyck(4, 32), seed);
        let mut window = VecDeque::with_capacity(WINDOW);
        let mut top = 0.0f64;
        let mut reached = None;
        let hook = |r: &procwarm::trainer::StepRecord, _: &ModelParams<f32>| {
            if window.len() == WINDOW {
                window.pop_front();
            }
            window.push_back(r.accuracy);
            if window.len() == WINDOW {
                let m = window.iter().sum::<f64>() / WINDOW as f64;
                top = top.max(m);
                if m >= TARGET {
                    reached = Some(r.step);
                    return true;
                }
            }
            false
        };
        train_warmup(
            &c,
            WarmupData::Stream(&recipe),
            &warmup_config(5000, 32, seed),
            RunOptions::new(Exec::Parallel).with_hook(hook),
        )
        .unwrap();
        best.push(top);
        notes.push(match reached {
            Some(s) => format!("seed {seed}: {top:.3} at step {s}"),
            None => format!("seed {seed}: best {top:.3}, not reached"),
        });
    }
    let med = median(&best);
    outcome(
        med >= TARGET,
        format!(
            "k=4 Dyck, N=32, desk model; masked-token accuracy over {WINDOW} unseen batches; {}; median {med:.3} (target {TARGET})",
            notes.join(", ")
        ),
    )
}

fn check_surgery(c: &Checkpoint) -> Result<(), String> {
    let kinds = layout(&c.config, c.stage);
    let kind = |name: &str| kinds.iter().find(|(n, _, _)| n == name).unwrap().2;
    let sorted = |v: &[f32]| {
        let mut b: Vec<u32> = v.iter().map(|x| x.to_bits()).collect();
        b.sort_unstable();
        b
    };
    for (scope, covers) in [
        (
            ShuffleScope::All,
            &[TensorKind::AttentionWeight, TensorKind::MlpWeight][..],
        ),
        (
            ShuffleScope::AttentionOnly,
            &[TensorKind::AttentionWeight][..],
        ),
        (ShuffleScope::MlpOnly, &[TensorKind::MlpWeight][..]),
    ] {
        let s = shuffle_weights(c, scope, 9).map_err(|e| e.to_string())?;
        for (a, b) in c.tensors.iter().zip(&s.tensors) {
            let covered = block_index(&a.name).is_some() && covers.contains(&kind(&a.name));
            if covered && (sorted(&a.data) != sorted(&b.data) || a.data == b.data) {
                return Err(format!("{scope}: {} not a permutation", a.name));
            }
            if !covered && !a.bit_eq(b) {
                return Err(format!("{scope}: {} outside scope changed", a.name));
            }
        }
    }
    let donor = init_model(&c.config, c.seed + 1).map_err(|e| e.to_string())?;
    let mut covered = vec![0usize; c.config.depth];
    for range in [LayerRange::First, LayerRange::Middle, LayerRange::Final] {
        let blocks = range.blocks(c.config.depth);
        blocks.clone().for_each(|b| covered[b] += 1);
        let out = transfer_layers(c, &donor, range).map_err(|e| e.to_string())?;
        for ((t, d), o) in c.tensors.iter().zip(&donor.tensors).zip(&out.tensors) {
            let want = if block_index(&t.name).is_some_and(|b| blocks.contains(&b)) {
                d
            } else {
                t
            };
            if !o.bit_eq(&procwarm::model::NamedTensor {
                frozen: t.frozen,
                ..want.clone()
            }) {
                return Err(format!("{range}: {} wrong source", t.name));
            }
        }
        let same = transfer_layers(c, c, range).map_err(|e| e.to_string())?;
        if !same
            .tensors
            .iter()
            .zip(&c.tensors)
            .all(|(a, b)| a.bit_eq(b))
        {
            return Err(format!("{range}: self-transfer changed the model"));
        }
    }
    if covered.iter().any(|&n| n != 1) {
        return Err(format!("ranges do not partition the blocks: {covered:?}"));
    }
    Ok(())
}

fn surgery() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    for cfg in [desk_dyck(), ModelConfig::vit_t()] {
        let c = init_model(&cfg, 4).unwrap();
        match check_surgery(&c) {
            Ok(()) => notes.push(format!("{} (depth {}): ok", cfg.preset, cfg.depth)),
            Err(e) => {
                pass = false;
                notes.push(format!("{}: {e}", cfg.preset));
            }
        }
    }
    let final_blocks = LayerRange::Final.blocks(12);
    pass &= final_blocks == (8..12);
    outcome(
        pass,
        format!("3 shuffle scopes and 3 transfer ranges; {}; final third of 12 blocks = {final_blocks:?}", notes.join(", ")),
    )
}

fn direction() -> Outcome {
    const SEEDS: u64 = 5;
    let mut mc = desk_dyck();
    mc.patch_size = 8;
    let data = ShapesSpec::new(100);
    let train = shapes(&data, 0, 1000, Exec::Parallel);
    let test = shapes(&data, 1 << 32, 500, Exec::Parallel);
    let mut arms: [Vec<f64>; 3] = Default::default();
    for seed in 1..=SEEDS {
        let base = init_model(&mc, seed).unwrap();
        for (arm, ablation) in [None, Some(Ablation::None), Some(Ablation::SequenceShuffled)]
            .into_iter()
            .enumerate()
        {
            let start = match ablation {
                None => base.clone(),
                Some(a) => {
                    let recipe = CorpusRecipe::new(GrammarSpec::dyck(4, 32), seed).with_ablation(a);
                    train_warmup(
                        &base,
                        WarmupData::Stream(&recipe),
                        &warmup_config(600, 32, seed),
                        RunOptions::new(Exec::Parallel),
                    )
                    .unwrap()
                    .0
                }
            };
            let vision = reset_embeddings_and_head(&start, seed).unwrap();
            let mut cfg = TrainConfig::vision_default().with_epochs(12);
            cfg.batch_size = 64;
            cfg.lr = 1e-3;
            cfg.seed = seed;
            let (_, m) = train_vision(
                &vision,
                &train,
                Some(&test),
                &cfg,
                RunOptions::new(Exec::Parallel),
            )
            .unwrap();
            arms[arm].push(m.last(RecordKind::Eval).unwrap().accuracy);
        }
    }
    let [random, warm, shuffled] = arms.map(|a| mean(&a));
    outcome(
        warm >= random && shuffled <= warm,
        format!(
            "{SEEDS} seeds, shapes task 1000/500 images, 12 epochs; mean test top-1: random-init {random:.4}, warm-up {warm:.4}, shuffled warm-up {shuffled:.4}"
        ),
    )
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

const PIPELINE: &str = "\
preset = desk
language = dyck
k = 4
seq_len = 32
warmup.steps = 40
warmup.batch_size = 16
finetune.epochs = 2
finetune.batch_size = 32
patch_size = 8
train_images = 128
test_images = 64
";

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("pipeline.txt");
    fs::write(&config, PIPELINE).unwrap();
    let run = |dir: &Path| {
        Command::new(env!("CARGO_BIN_EXE_procwarm"))
            .args(["--reference-mode", "--seed", "3", "--out-dir"])
            .arg(dir)
            .arg("pipeline")
            .arg("--config")
            .arg(&config)
            .output()
            .unwrap()
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = run(d);
        if !o.status.success() {
            return outcome(
                false,
                format!(
                    "pipeline failed: {}",
                    String::from_utf8_lossy(&o.stderr).trim()
                ),
            );
        }
    }
    let files = files_under(&a);
    let differing: Vec<String> = files
        .iter()
        .filter(|f| fs::read(a.join(f)).ok() != fs::read(b.join(f)).ok())
        .map(|f| f.display().to_string())
        .collect();
    let same_listing = files == files_under(&b);
    let has = |suffix: &str| {
        files
            .iter()
            .filter(|f| f.to_string_lossy().ends_with(suffix))
            .count()
    };
    let (tokens, tensors, metrics) = (has("tokens.u16"), has("tensors.f32"), has("metrics.jsonl"));
    let rerun = run(&a);
    let skipped = String::from_utf8_lossy(&rerun.stdout)
        .matches("up to date")
        .count();
    outcome(
        differing.is_empty() && same_listing && tokens == 1 && tensors == 4 && metrics == 3 && skipped == 5,
        format!(
            "two reference-mode pipeline runs; {} files compared ({tokens} corpus, {tensors} checkpoints, {metrics} metrics); differing: {differing:?}; rerun skipped {skipped}/5 stages",
            files.len()
        ),
    )
}

type Criterion = (usize, &'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        (1, "grammar soundness", soundness),
        (2, "brute-force oracle", brute_force),
        (3, "completion uniqueness", completions),
        (4, "gradient correctness", gradients),
        (5, "freeze contract", freeze),
        (6, "warm-up learnability", learnability),
        (7, "surgery invariants", surgery),
        (8, "warm-start direction", direction),
        (9, "reference-mode determinism", determinism),
    ];
    let selected: Option<Vec<usize>> = std::env::var("PROCWARM_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut stdout = std::io::stdout();
    let mut failed = 0;
    for (n, name, run) in criteria {
        if selected.as_ref().is_some_and(|s| !s.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let o = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        failed += usize::from(!o.pass);
        writeln!(
            stdout,
            "criterion {n} ({name}): {} [{:.1}s] {}",
            if o.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            o.detail
        )
        .unwrap();
        stdout.flush().unwrap();
    }
    if failed > 0 {
        writeln!(stdout, "acceptance: {failed} criteria failed").unwrap();
        std::process::exit(1);
    }
}
