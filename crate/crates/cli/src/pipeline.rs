//! End-to-end run: generate → warmup → surgery → finetune (warm-started and
//! random-init) → report. Each stage is skipped when its recorded inputs
//! are unchanged.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use procwarm::atomic;
use procwarm::kv::{KvDoc, KvError};

use crate::args::{
    Cli, FinetuneArgs, GenerateArgs, GrammarArgs, PipelineArgs, ReportArgs, SurgeryArgs,
    TrainFlags, WarmupArgs,
};
use crate::commands::{finetune, generate, surgery, warmup};
use crate::{report, CliError};

fn get<T: FromStr>(d: &KvDoc, key: &str, default: T) -> Result<T, KvError> {
    Ok(d.parse_opt(key)?.unwrap_or(default))
}

fn flags(d: &KvDoc, prefix: &str) -> Result<TrainFlags, KvError> {
    let k = |name: &str| format!("{prefix}.{name}");
    Ok(TrainFlags {
        config: None,
        batch_size: d.parse_opt(&k("batch_size"))?,
        steps: d.parse_opt(&k("steps"))?,
        warmup_steps: d.parse_opt(&k("warmup_steps"))?,
        epochs: d.parse_opt(&k("epochs"))?,
        warmup_epochs: d.parse_opt(&k("warmup_epochs"))?,
        lr: d.parse_opt(&k("lr"))?,
        weight_decay: d.parse_opt(&k("weight_decay"))?,
        beta1: d.parse_opt(&k("beta1"))?,
        beta2: d.parse_opt(&k("beta2"))?,
        checkpoint_every: d.parse_opt(&k("checkpoint_every"))?,
        eval_every: d.parse_opt(&k("eval_every"))?,
        label_smoothing: d.parse_opt(&k("label_smoothing"))?,
        no_augment: !get(d, &k("augment"), true)?,
    })
}

/// Small defaults sized for a laptop-class CPU.
pub const DEFAULT_CONFIG: &str = "\
preset = desk
language = dyck
k = 4
seq_len = 32
warmup.steps = 600
warmup.batch_size = 32
warmup.lr = 1e-3
finetune.epochs = 12
finetune.batch_size = 64
finetune.lr = 1e-3
patch_size = 8
train_images = 1000
test_images = 250
data_seed = 0
";

pub fn pipeline(cli: &Cli, a: &PipelineArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let text = match &a.config {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| CliError::Missing(format!("{}: {e}", p.display())))?,
        None => DEFAULT_CONFIG.to_string(),
    };
    let d = KvDoc::parse(&text)?;
    let grammar = GrammarArgs {
        language: get(&d, "language", "dyck".to_string())?,
        k: get(&d, "k", 4)?,
        vocab: get(&d, "vocab", 128)?,
        seq_len: get(&d, "seq_len", 32)?,
        p_open: get(&d, "p_open", 0.6)?,
        mask_ratio: get(&d, "mask_ratio", 0.5)?,
        ablation: get(&d, "ablation", "none".to_string())?,
    };
    let preset: String = get(&d, "preset", "desk".to_string())?;
    let patch_size: Option<usize> = d.parse_opt("patch_size")?;
    let warm_flags = flags(&d, "warmup")?;
    let tune_flags = flags(&d, "finetune")?;
    let steps = warm_flags.steps.unwrap_or(600);
    let batch = warm_flags.batch_size.unwrap_or(32);

    let corpus = generate(
        cli,
        &GenerateArgs {
            grammar: grammar.clone(),
            count: steps * batch,
            name: "corpus".into(),
        },
        out,
    )?;
    let warm = warmup(
        cli,
        &WarmupArgs {
            corpus: Some(corpus.clone()),
            grammar: grammar.clone(),
            init: None,
            preset: preset.clone(),
            patch_size,
            budget_images: None,
            train: TrainFlags {
                steps: Some(steps),
                batch_size: Some(batch),
                ..warm_flags
            },
            name: "warmup".into(),
        },
        out,
    )?;
    let cut = surgery(
        cli,
        &SurgeryArgs {
            input: warm.join("checkpoint"),
            plan: None,
            name: "surgery".into(),
        },
        out,
    )?;
    let tune = |name: &str, checkpoint: Option<&Path>, out: &mut dyn Write| {
        finetune(
            cli,
            &FinetuneArgs {
                checkpoint: checkpoint.map(Path::to_path_buf),
                random_init: checkpoint.is_none(),
                preset: preset.clone(),
                patch_size,
                data: None,
                test_data: None,
                train_images: get(&d, "train_images", 1000)?,
                test_images: get(&d, "test_images", 250)?,
                data_seed: get(&d, "data_seed", 0)?,
                train: tune_flags.clone(),
                name: name.into(),
            },
            out,
        )
    };
    let warm_run = tune("finetune-warm", Some(&cut.join("checkpoint")), out)?;
    let random_run = tune("finetune-random", None, out)?;
    report::report(
        cli,
        &ReportArgs {
            runs: vec![
                format!("random-init={}", random_run.display()),
                format!("warmup-init={}", warm_run.display()),
            ],
            baseline: Some("random-init".into()),
            name: "report".into(),
        },
        out,
    )?;

    let mut manifest = KvDoc::parse(&text)?;
    manifest
        .push("reference_mode", cli.reference_mode)
        .push("seed", cli.seed);
    for stage in [
        "corpus",
        "warmup",
        "surgery",
        "finetune-warm",
        "finetune-random",
    ] {
        if let Some(h) = crate::stage::recorded_output(&cli.out_dir.join(stage)) {
            manifest.push(&format!("output.{stage}"), h);
        }
    }
    atomic::write_file(
        &cli.out_dir.join("pipeline.txt"),
        manifest.render().as_bytes(),
    )?;
    Ok(())
}
