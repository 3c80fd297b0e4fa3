use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use procwarm::corpus::{
    build_corpus, corpus_stats, read_corpus, write_corpus, Ablation, CorpusRecipe,
};
use procwarm::exec::Exec;
use procwarm::grammar::{GrammarSpec, Language};
use procwarm::images::{read_images, shapes, ImageSet, ShapesSpec};
use procwarm::kv::{sha256_hex, short_hash, KvDoc};
use procwarm::model::{init_model, init_vision_model, Checkpoint, ModelConfig, Stage};
use procwarm::surgery::{apply_plan, SurgeryPlan, SurgeryStep};
use procwarm::trainer::{
    budget_steps, train_vision, train_warmup, RecordKind, RunMetrics, RunOptions, TrainConfig,
    WarmupData,
};

use crate::args::{
    Cli, Command, FinetuneArgs, GenerateArgs, GrammarArgs, StatsArgs, SurgeryArgs, TrainFlags,
    WarmupArgs,
};
use crate::stage::{recorded_output, up_to_date, write_marker, StageInputs};
use crate::{pipeline, report, CliError};

/// Index offset separating synthetic test images from training images.
pub const TEST_OFFSET: u64 = 1 << 32;

pub fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Generate(a) => generate(cli, a, out).map(|_| ()),
        Command::Stats(a) => stats(a, out),
        Command::Warmup(a) => warmup(cli, a, out).map(|_| ()),
        Command::Surgery(a) => surgery(cli, a, out).map(|_| ()),
        Command::Finetune(a) => finetune(cli, a, out).map(|_| ()),
        Command::Report(a) => report::report(cli, a, out).map(|_| ()),
        Command::Pipeline(a) => pipeline::pipeline(cli, a, out),
    }
}

pub fn exec(cli: &Cli) -> Exec {
    Exec::from_reference_flag(cli.reference_mode)
}

/// Short hash over the named files of `dir`, or `None` if any is missing.
pub fn hash_files(dir: &Path, names: &[&str]) -> Option<String> {
    let mut acc = String::new();
    for n in names {
        acc.push_str(n);
        acc.push_str(&sha256_hex(&fs::read(dir.join(n)).ok()?));
    }
    Some(short_hash(acc.as_bytes()))
}

/// Key/value statistics written next to the corpus by `stats`.
pub const STATS_FILE: &str = "stats.txt";

const CORPUS_FILES: &[&str] = &["manifest.txt", "tokens.u16", "masks.u16"];
const CHECKPOINT_FILES: &[&str] = &["checkpoint/manifest.txt", "checkpoint/tensors.f32"];

fn checkpoint_and_metrics() -> Vec<&'static str> {
    let mut v = CHECKPOINT_FILES.to_vec();
    v.push("metrics.jsonl");
    v
}

pub fn grammar_spec(g: &GrammarArgs) -> Result<GrammarSpec, CliError> {
    let language: Language = g
        .language
        .parse()
        .map_err(|_| CliError::Usage(format!("unknown language `{}`", g.language)))?;
    let mut spec = match language {
        Language::WW => GrammarSpec::ww(g.vocab, g.seq_len),
        Language::Dyck => GrammarSpec::dyck(g.k, g.seq_len),
        Language::DyckShuffle => GrammarSpec::dyck_shuffle(g.k, g.seq_len),
    };
    spec.p_open = g.p_open;
    spec.validate()?;
    Ok(spec)
}

pub fn recipe(g: &GrammarArgs, seed: u64) -> Result<CorpusRecipe, CliError> {
    let ablation: Ablation = g
        .ablation
        .parse()
        .map_err(|_| CliError::Usage(format!("unknown ablation `{}`", g.ablation)))?;
    if !(g.mask_ratio > 0.0 && g.mask_ratio <= 1.0) {
        return Err(CliError::Usage(format!(
            "mask ratio {} outside (0, 1]",
            g.mask_ratio
        )));
    }
    let mut r = CorpusRecipe::new(grammar_spec(g)?, seed).with_ablation(ablation);
    r.mask_ratio = g.mask_ratio;
    Ok(r)
}

/// Stage defaults, then the config file, then explicit flags.
pub fn train_config(stage: Stage, flags: &TrainFlags, seed: u64) -> Result<TrainConfig, CliError> {
    let mut c = match &flags.config {
        Some(path) => TrainConfig::from_kv(stage, &KvDoc::parse(&read_text(path)?)?)?,
        None => TrainConfig::default_for(stage),
    };
    c.seed = seed;
    if let Some(v) = flags.steps {
        c.steps = v;
        // Keep the default warm-up proportion unless told otherwise.
        c.warmup_steps = v / 15;
    }
    if let Some(v) = flags.epochs {
        c = c.with_epochs(v);
    }
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = flags.$f { c.$f = v; } )* };
    }
    set!(
        batch_size,
        warmup_steps,
        warmup_epochs,
        lr,
        weight_decay,
        beta1,
        beta2,
        checkpoint_every,
        eval_every,
        label_smoothing
    );
    if flags.no_augment {
        c.augment = false;
    }
    c.validate().map_err(CliError::Usage)?;
    Ok(c)
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Missing(format!("{}: {e}", path.display())))
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.join("manifest.txt").exists() {
        return Err(CliError::Missing(format!(
            "no checkpoint at {}",
            path.display()
        )));
    }
    let ckpt = Checkpoint::read(path)?;
    // A checkpoint produced by an earlier stage must still match what that
    // stage recorded.
    if let Some(stage_dir) = path.parent() {
        if let Some(recorded) = recorded_output(stage_dir) {
            let names = if stage_dir.join("metrics.jsonl").exists() {
                checkpoint_and_metrics()
            } else {
                let mut v = CHECKPOINT_FILES.to_vec();
                v.push("provenance.txt");
                v
            };
            if hash_files(stage_dir, &names).as_deref() != Some(recorded.as_str()) {
                return Err(CliError::ConfigMismatch(format!(
                    "{} changed since its producing stage recorded hash {recorded}",
                    path.display()
                )));
            }
        }
    }
    Ok(ckpt)
}

fn skipped(out: &mut dyn Write, dir: &Path) -> Result<(), CliError> {
    writeln!(out, "up to date: {}", dir.display())?;
    Ok(())
}

pub fn generate(cli: &Cli, a: &GenerateArgs, out: &mut dyn Write) -> Result<PathBuf, CliError> {
    let r = recipe(&a.grammar, cli.seed)?;
    if a.count == 0 {
        return Err(CliError::Usage("count must be positive".into()));
    }
    let dir = cli.out_dir.join(&a.name);
    let mut inputs = StageInputs::new("generate");
    inputs.add("corpus", r.config_hash(a.count));
    if up_to_date(&dir, &inputs, || hash_files(&dir, CORPUS_FILES)) {
        skipped(out, &dir)?;
        return Ok(dir);
    }
    let c = build_corpus(
        r.spec,
        a.count,
        r.mask_ratio,
        r.global_seed,
        r.ablation,
        exec(cli),
    )?;
    write_corpus(&c, &dir)?;
    let h = hash_files(&dir, CORPUS_FILES).expect("just written");
    write_marker(&dir, &inputs, &h)?;
    writeln!(
        out,
        "wrote {} ({} examples, config {})",
        dir.display(),
        a.count,
        c.config_hash()
    )?;
    Ok(dir)
}

pub fn stats(a: &StatsArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if !a.corpus.join("manifest.txt").exists() {
        return Err(CliError::Missing(format!(
            "no corpus at {}",
            a.corpus.display()
        )));
    }
    let c = read_corpus(&a.corpus)?;
    let s = corpus_stats(&c)?;
    let mut kv = s.to_kv();
    kv.push("config_hash", c.config_hash());
    let path = a.corpus.join(STATS_FILE);
    procwarm::atomic::write_file(&path, kv.render().as_bytes())?;
    write!(out, "{}", s.report())?;
    writeln!(out, "wrote {}", path.display())?;
    Ok(())
}

pub fn warmup(cli: &Cli, a: &WarmupArgs, out: &mut dyn Write) -> Result<PathBuf, CliError> {
    let stored = match &a.corpus {
        Some(p) => {
            if !p.join("manifest.txt").exists() {
                return Err(CliError::Missing(format!("no corpus at {}", p.display())));
            }
            Some(read_corpus(p)?)
        }
        None => None,
    };
    let streamed = recipe(&a.grammar, cli.seed)?;
    let data = match &stored {
        Some(c) => WarmupData::Stored(c),
        None => WarmupData::Stream(&streamed),
    };
    let spec = stored.as_ref().map_or(streamed.spec, |c| c.recipe.spec);

    let mut mc = ModelConfig::preset(&a.preset)?;
    mc.seq_len = spec.seq_len;
    mc.vocab_size = spec.vocab_size;
    if let Some(p) = a.patch_size {
        mc.patch_size = p;
    }
    let init = match &a.init {
        Some(p) => {
            let c = read_checkpoint(p)?;
            c.require_stage(Stage::Warmup)?;
            if c.config != mc {
                return Err(CliError::ConfigMismatch(format!(
                    "initial checkpoint config {} does not match grammar-derived config {}",
                    c.config.hash(),
                    mc.hash()
                )));
            }
            c
        }
        None => init_model(&mc, cli.seed)?,
    };
    let mut cfg = train_config(Stage::Warmup, &a.train, cli.seed)?;
    if let Some(images) = a.budget_images {
        cfg.steps = budget_steps(images, 0.01, cfg.batch_size);
        cfg.warmup_steps = a.train.warmup_steps.unwrap_or(cfg.steps / 15);
        cfg.validate().map_err(CliError::Usage)?;
    }

    let dir = cli.out_dir.join(&a.name);
    let mut inputs = StageInputs::new("warmup");
    inputs
        .add(
            "data",
            match &stored {
                Some(c) => format!("stored:{}", c.config_hash()),
                None => format!("stream:{}", streamed.config_hash(0)),
            },
        )
        .add("init", init.content_hash())
        .add("train", cfg.hash())
        .add("model", mc.hash())
        .add("reference_mode", cli.reference_mode);
    let files = checkpoint_and_metrics();
    if up_to_date(&dir, &inputs, || hash_files(&dir, &files)) {
        skipped(out, &dir)?;
        return Ok(dir);
    }
    let opts = RunOptions {
        exec: exec(cli),
        out_dir: Some(dir.clone()),
        run_id: a.name.clone(),
        hook: None,
    };
    let (_, metrics) = train_warmup(&init, data, &cfg, opts)?;
    write_marker(
        &dir,
        &inputs,
        &hash_files(&dir, &files).expect("just written"),
    )?;
    summarize(out, &dir, &metrics)?;
    Ok(dir)
}

fn summarize(out: &mut dyn Write, dir: &Path, m: &RunMetrics) -> Result<(), CliError> {
    let last = m.last(RecordKind::Eval).or(m.last(RecordKind::Train));
    match last {
        Some(r) => writeln!(
            out,
            "wrote {} (step {}, loss {:.4}, accuracy {:.4})",
            dir.display(),
            r.step,
            r.loss,
            r.accuracy
        )?,
        None => writeln!(out, "wrote {} (no steps)", dir.display())?,
    }
    Ok(())
}

pub fn surgery(cli: &Cli, a: &SurgeryArgs, out: &mut dyn Write) -> Result<PathBuf, CliError> {
    let input = read_checkpoint(&a.input)?;
    let plan = match &a.plan {
        Some(p) => SurgeryPlan::parse(&read_text(p)?)?,
        None => SurgeryPlan::handoff(cli.seed),
    };
    let dir = cli.out_dir.join(&a.name);
    let mut inputs = StageInputs::new("surgery");
    inputs
        .add("input", input.content_hash())
        .add("plan", plan.render().replace('\n', "; "));
    for step in &plan.steps {
        if let SurgeryStep::TransferLayers { donor, .. } = step {
            let d = Path::new(donor);
            let h = hash_files(d, &["manifest.txt", "tensors.f32"])
                .ok_or_else(|| CliError::Missing(format!("no donor checkpoint at {donor}")))?;
            inputs.add("donor", h);
        }
    }
    let mut files = CHECKPOINT_FILES.to_vec();
    files.push("provenance.txt");
    if up_to_date(&dir, &inputs, || hash_files(&dir, &files)) {
        skipped(out, &dir)?;
        return Ok(dir);
    }
    let outcome = apply_plan(&input, &plan, |donor| {
        Checkpoint::read(Path::new(donor)).map_err(Into::into)
    })?;
    outcome.checkpoint.write(&dir.join("checkpoint"))?;
    let mut prov = outcome.provenance;
    prov.push("plan_ends_with_handoff", plan.ends_with_handoff());
    procwarm::atomic::write_file(&dir.join("provenance.txt"), prov.render().as_bytes())?;
    write_marker(
        &dir,
        &inputs,
        &hash_files(&dir, &files).expect("just written"),
    )?;
    writeln!(
        out,
        "wrote {} (stage {}, {} steps)",
        dir.display(),
        outcome.checkpoint.stage,
        plan.steps.len()
    )?;
    Ok(dir)
}

/// Training and test sets for a fine-tuning run.
pub fn vision_data(
    a: &FinetuneArgs,
    exec: Exec,
) -> Result<(ImageSet, Option<ImageSet>, String), CliError> {
    match &a.data {
        Some(p) => {
            let train = read_images(p)?;
            let test = a.test_data.as_deref().map(read_images).transpose()?;
            let tag = format!(
                "{}:{}",
                train.config_hash(),
                test.as_ref().map_or("none".into(), |t| t.config_hash())
            );
            Ok((train, test, tag))
        }
        None => {
            let spec = ShapesSpec::new(a.data_seed);
            let train = shapes(&spec, 0, a.train_images, exec);
            let test = (a.test_images > 0).then(|| shapes(&spec, TEST_OFFSET, a.test_images, exec));
            let tag = format!(
                "shapes:{}:{}:{}",
                a.data_seed, a.train_images, a.test_images
            );
            Ok((train, test, tag))
        }
    }
}

pub fn finetune(cli: &Cli, a: &FinetuneArgs, out: &mut dyn Write) -> Result<PathBuf, CliError> {
    let init = match (&a.checkpoint, a.random_init) {
        (Some(p), false) => {
            let c = read_checkpoint(p)?;
            if c.stage != Stage::Vision {
                return Err(CliError::StageGuard(format!(
                    "refusing to fine-tune {}: it is a {} checkpoint; run `surgery` with a plan ending in `reset` and `retag stage=vision` first",
                    p.display(),
                    c.stage
                )));
            }
            c
        }
        (None, true) => {
            let mut mc = ModelConfig::preset(&a.preset)?;
            if let Some(p) = a.patch_size {
                mc.patch_size = p;
            }
            init_vision_model(&mc, cli.seed)?
        }
        _ => {
            return Err(CliError::Usage(
                "give exactly one of --checkpoint or --random-init".into(),
            ))
        }
    };
    let cfg = train_config(Stage::Vision, &a.train, cli.seed)?;
    let (train, test, data_tag) = vision_data(a, exec(cli))?;

    let dir = cli.out_dir.join(&a.name);
    let mut inputs = StageInputs::new("finetune");
    inputs
        .add("init", init.content_hash())
        .add("data", &data_tag)
        .add("train", cfg.hash())
        .add("reference_mode", cli.reference_mode);
    let files = checkpoint_and_metrics();
    if up_to_date(&dir, &inputs, || hash_files(&dir, &files)) {
        skipped(out, &dir)?;
        return Ok(dir);
    }
    let opts = RunOptions {
        exec: exec(cli),
        out_dir: Some(dir.clone()),
        run_id: a.name.clone(),
        hook: None,
    };
    let (_, metrics) = train_vision(&init, &train, test.as_ref(), &cfg, opts)?;
    write_marker(
        &dir,
        &inputs,
        &hash_files(&dir, &files).expect("just written"),
    )?;
    summarize(out, &dir, &metrics)?;
    Ok(dir)
}
