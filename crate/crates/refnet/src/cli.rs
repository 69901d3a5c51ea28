//! Command-line entry point: corpus preparation, synthesis, training, batch
//! decoding, evaluation, the chat loop, and the gradient checker.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::ParamStore;
use crate::config::{derive_seed, sha256_file, AppConfig};
use crate::corpus::{
    align_spans, build_vocab, encode_sample, load_corpus, response_coverage, save_corpus,
    synthesize_corpus, EncodedSample, RawSample, SynthConfig, Vocabulary,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_corpus_with, BrevityMode, GoldSample, Hypothesis, RefMode};
use crate::infer::{decode_corpus, ChatSession, DecodeLine, DecodeResult};
use crate::model::{ModelDims, ModelParams};
use crate::scalar::{Precision, Scalar};
use crate::train::{
    restore_model, save_checkpoint, train, CheckpointMeta, ForceMode, TrainOutcome,
};

#[derive(Parser, Debug)]
#[command(
    name = "refnet",
    version,
    about = "Background-grounded conversation model with span reference and token generation"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct GlobalArgs {
    /// JSON config file; flags override it, it overrides defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; every stage derives its own stream from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker cap for parallel sections (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true, value_parser = clap::builder::ValueParser::new(|s: &str| s.parse::<Precision>()))]
    precision: Option<Precision>,
    /// Training/decoding ablation: none, reference, or generation.
    #[arg(long, global = true, value_parser = clap::builder::ValueParser::new(|s: &str| s.parse::<ForceMode>()))]
    force_mode: Option<ForceMode>,
    /// Drop the switcher loss from the training objective.
    #[arg(long, global = true, action = ArgAction::SetTrue)]
    no_switcher_loss: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Ingest JSONL corpora: tokenize, align spans when absent, build the
    /// vocabulary, and emit canonical splits.
    Prepare {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long, default_value = "prepared")]
        out_dir: PathBuf,
        #[arg(long)]
        min_span_len: Option<usize>,
        #[arg(long)]
        vocab_max: Option<usize>,
    },
    /// Generate a synthetic grounded-dialogue corpus.
    Synth {
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        background_len: Option<usize>,
        #[arg(long)]
        synth_vocab: Option<usize>,
        #[arg(long)]
        span_min: Option<usize>,
        #[arg(long)]
        span_max: Option<usize>,
        #[arg(long)]
        template_set: Option<usize>,
    },
    /// Train on a JSONL corpus and write the best checkpoint.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        /// Fraction split off for validation when --val is absent.
        #[arg(long, default_value_t = 0.1)]
        val_frac: f64,
        /// Existing vocabulary file; built from the training split otherwise.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
        /// Training log (JSON lines); stdout when absent.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        clip_norm: Option<f64>,
        #[arg(long)]
        embed: Option<usize>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        attn: Option<usize>,
        #[arg(long)]
        matching_hidden: Option<usize>,
        #[arg(long, action = ArgAction::SetTrue)]
        untie_pointer_params: bool,
        #[arg(long, action = ArgAction::SetTrue)]
        exclude_span_tokens_from_lg: bool,
    },
    /// Decode a corpus with a trained checkpoint, one JSON line per sample.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        max_span_len: Option<usize>,
        /// Keep emitting spans after the first one under force-reference.
        #[arg(long, action = ArgAction::SetTrue)]
        ref_loop: bool,
        /// Per-hop pointer argmax instead of the joint product argmax.
        #[arg(long, action = ArgAction::SetTrue)]
        sequential_span_argmax: bool,
    },
    /// Score decodes against a test corpus.
    Eval {
        #[arg(long)]
        decodes: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value = "SR", value_parser = clap::builder::ValueParser::new(|s: &str| s.parse::<RefMode>()))]
        mode: RefMode,
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long)]
        rouge_beta: Option<f64>,
        #[arg(long, value_parser = clap::builder::ValueParser::new(|s: &str| s.parse::<BrevityMode>()))]
        bleu_brevity: Option<BrevityMode>,
        /// Mean of per-sentence BLEU instead of corpus BLEU.
        #[arg(long, action = ArgAction::SetTrue)]
        per_sentence_bleu: bool,
    },
    /// Interactive session against a background document.
    Chat {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        background: PathBuf,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Verify analytic gradients of the full training loss on a small model.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

/// Parses argv and runs; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("REFNET_LOG", "info"))
        .format_timestamp(None)
        .try_init()
        .ok();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn resolve_config(global: &GlobalArgs) -> Result<AppConfig> {
    let mut cfg = match &global.config {
        Some(path) => AppConfig::from_file(path)?,
        None => AppConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = global.jobs {
        cfg.jobs = jobs;
    }
    if let Some(p) = global.precision {
        cfg.precision = p;
    }
    if let Some(fm) = global.force_mode {
        cfg.force_mode = fm;
    }
    if global.no_switcher_loss {
        cfg.use_switcher_loss = false;
    }
    Ok(cfg)
}

fn init_workers(jobs: usize) {
    if jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .ok();
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = resolve_config(&cli.global)?;
    match cli.command {
        Command::Prepare {
            train,
            val,
            test,
            out_dir,
            min_span_len,
            vocab_max,
        } => {
            if let Some(m) = min_span_len {
                cfg.min_span_len = m;
            }
            if let Some(v) = vocab_max {
                cfg.vocab_max = v;
            }
            cfg.validate()?;
            init_workers(cfg.jobs);
            cmd_prepare(&cfg, &train, val.as_deref(), test.as_deref(), &out_dir)
        }
        Command::Synth {
            n,
            out,
            background_len,
            synth_vocab,
            span_min,
            span_max,
            template_set,
        } => {
            cfg.validate()?;
            let mut synth_cfg = SynthConfig::default();
            if let Some(b) = background_len {
                synth_cfg.background_len = b;
            }
            if let Some(v) = synth_vocab {
                synth_cfg.vocab_size = v;
            }
            if let Some(s) = span_min {
                synth_cfg.span_len_range.0 = s;
            }
            if let Some(s) = span_max {
                synth_cfg.span_len_range.1 = s;
            }
            if let Some(t) = template_set {
                synth_cfg.template_set = t;
            }
            cmd_synth(&cfg, n, &synth_cfg, &out)
        }
        Command::Train {
            train,
            val,
            val_frac,
            vocab,
            out,
            log,
            epochs,
            batch_size,
            learning_rate,
            clip_norm,
            embed,
            hidden,
            attn,
            matching_hidden,
            untie_pointer_params,
            exclude_span_tokens_from_lg,
        } => {
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(b) = batch_size {
                cfg.batch_size = b;
            }
            if let Some(l) = learning_rate {
                cfg.learning_rate = l;
            }
            if let Some(c) = clip_norm {
                cfg.clip_norm = c;
            }
            if let Some(e) = embed {
                cfg.embed_dim = e;
            }
            if let Some(h) = hidden {
                cfg.per_direction_hidden = h;
            }
            if let Some(a) = attn {
                cfg.attn_dim = Some(a);
            }
            if let Some(m) = matching_hidden {
                cfg.matching_hidden = Some(m);
            }
            if untie_pointer_params {
                cfg.untie_pointer_params = true;
            }
            if exclude_span_tokens_from_lg {
                cfg.exclude_span_tokens_from_lg = true;
            }
            cfg.validate()?;
            init_workers(cfg.jobs);
            match cfg.precision {
                Precision::F32 => cmd_train::<f32>(
                    &cfg,
                    &train,
                    val.as_deref(),
                    val_frac,
                    vocab.as_deref(),
                    &out,
                    log.as_deref(),
                ),
                Precision::F64 => cmd_train::<f64>(
                    &cfg,
                    &train,
                    val.as_deref(),
                    val_frac,
                    vocab.as_deref(),
                    &out,
                    log.as_deref(),
                ),
            }
        }
        Command::Decode {
            checkpoint,
            vocab,
            input,
            out,
            max_len,
            max_span_len,
            ref_loop,
            sequential_span_argmax,
        } => {
            if let Some(m) = max_len {
                cfg.max_len = m;
            }
            if let Some(m) = max_span_len {
                cfg.max_span_len = m;
            }
            if ref_loop {
                cfg.ref_loop = true;
            }
            if sequential_span_argmax {
                cfg.sequential_span_argmax = true;
            }
            cfg.validate()?;
            init_workers(cfg.jobs);
            match cfg.precision {
                Precision::F32 => cmd_decode::<f32>(&cfg, &checkpoint, &vocab, &input, &out),
                Precision::F64 => cmd_decode::<f64>(&cfg, &checkpoint, &vocab, &input, &out),
            }
        }
        Command::Eval {
            decodes,
            test,
            mode,
            out,
            rouge_beta,
            bleu_brevity,
            per_sentence_bleu,
        } => {
            if let Some(b) = rouge_beta {
                cfg.rouge_beta = b;
            }
            if let Some(b) = bleu_brevity {
                cfg.bleu_brevity = b;
            }
            if per_sentence_bleu {
                cfg.per_sentence_bleu = true;
            }
            cfg.validate()?;
            cmd_eval(&cfg, &decodes, &test, mode, out.as_deref())
        }
        Command::Chat {
            checkpoint,
            vocab,
            background,
            max_len,
        } => {
            if let Some(m) = max_len {
                cfg.max_len = m;
            }
            cfg.validate()?;
            match cfg.precision {
                Precision::F32 => cmd_chat::<f32>(&cfg, &checkpoint, &vocab, &background),
                Precision::F64 => cmd_chat::<f64>(&cfg, &checkpoint, &vocab, &background),
            }
        }
        Command::Gradcheck { step, tol } => {
            if cli.global.precision == Some(Precision::F32) {
                return Err(Error::Config(
                    "gradient checking requires --precision f64".into(),
                ));
            }
            cmd_gradcheck(step, tol)
        }
    }
}

fn provenance(cfg: &AppConfig, inputs: &[&Path]) -> Result<serde_json::Value> {
    let mut hashes = BTreeMap::new();
    for p in inputs {
        hashes.insert(p.display().to_string(), sha256_file(p)?);
    }
    Ok(serde_json::json!({
        "config": cfg,
        "inputs": hashes,
    }))
}

fn write_sidecar(cfg: &AppConfig, artifact: &Path, inputs: &[&Path]) -> Result<()> {
    let mut prov = provenance(cfg, inputs)?;
    prov["artifact"] = serde_json::json!({
        "path": artifact.display().to_string(),
        "sha256": sha256_file(artifact)?,
    });
    let sidecar = artifact.with_extension(match artifact.extension() {
        Some(e) => format!("{}.meta.json", e.to_string_lossy()),
        None => "meta.json".to_string(),
    });
    std::fs::write(&sidecar, serde_json::to_string_pretty(&prov)?)?;
    Ok(())
}

fn cmd_prepare(
    cfg: &AppConfig,
    train: &Path,
    val: Option<&Path>,
    test: Option<&Path>,
    out_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut report = serde_json::Map::new();
    let mut splits: Vec<(&str, &Path)> = vec![("train", train)];
    if let Some(v) = val {
        splits.push(("val", v));
    }
    if let Some(t) = test {
        splits.push(("test", t));
    }
    let mut train_samples: Vec<RawSample> = Vec::new();
    let mut input_paths: Vec<&Path> = Vec::new();
    for (name, path) in &splits {
        input_paths.push(path);
        let (mut samples, stats) = load_corpus(path)?;
        let mut aligned = 0usize;
        let mut span_cut = 0usize;
        samples.retain_mut(|s| {
            if s.background.len() > cfg.background_limit {
                s.background.truncate(cfg.background_limit);
            }
            if s.spans.is_empty() {
                s.spans = align_spans(&s.background, &s.response, cfg.min_span_len)
                    .expect("min_span_len validated");
                if !s.spans.is_empty() {
                    aligned += 1;
                }
            } else if s.spans.iter().any(|a| a.bg_end >= cfg.background_limit) {
                span_cut += 1;
                return false;
            }
            true
        });
        let out_path = out_dir.join(format!("{name}.jsonl"));
        save_corpus(&out_path, &samples)?;
        log::info!(
            "{name}: read {} kept {} (bad json {}, bad spans {}, cut spans {span_cut}, aligned {aligned})",
            stats.read,
            samples.len(),
            stats.bad_json,
            stats.bad_spans
        );
        report.insert(
            name.to_string(),
            serde_json::json!({
                "read": stats.read,
                "kept": samples.len(),
                "bad_json": stats.bad_json,
                "bad_spans": stats.bad_spans,
                "spans_cut_by_truncation": span_cut,
                "aligned_fallback": aligned,
            }),
        );
        if *name == "train" {
            train_samples = samples;
        }
    }
    if train_samples.is_empty() {
        return Err(Error::Data("training split is empty after ingestion".into()));
    }
    let vocab = build_vocab(&train_samples, cfg.vocab_max)?;
    let vocab_path = out_dir.join("vocab.txt");
    vocab.save(&vocab_path)?;
    report.insert("vocab_size".into(), serde_json::json!(vocab.len()));
    report.insert(
        "response_coverage".into(),
        serde_json::json!(response_coverage(&train_samples, &vocab)),
    );
    report.insert("provenance".into(), provenance(cfg, &input_paths)?);
    let report_path = out_dir.join("prepare_report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    println!("prepared {} split(s) into {}", splits.len(), out_dir.display());
    Ok(())
}

fn cmd_synth(cfg: &AppConfig, n: usize, synth_cfg: &SynthConfig, out: &Path) -> Result<()> {
    let samples = synthesize_corpus(derive_seed(cfg.seed, "synth"), n, synth_cfg)?;
    save_corpus(out, &samples)?;
    let mut prov = provenance(cfg, &[])?;
    prov["synth"] = serde_json::to_value(synth_cfg)?;
    prov["n"] = serde_json::json!(n);
    write_sidecar(cfg, out, &[])?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

/// Encodes a tokenized corpus, dropping samples whose annotations do not
/// survive truncation.
fn encode_all(
    cfg: &AppConfig,
    samples: &[RawSample],
    vocab: &Vocabulary,
) -> (Vec<EncodedSample>, usize) {
    let limits = cfg.encode_limits();
    let mut out = Vec::with_capacity(samples.len());
    let mut dropped = 0usize;
    for s in samples {
        match encode_sample(s, vocab, limits) {
            Ok(e) => out.push(e),
            Err(e) => {
                dropped += 1;
                log::debug!("dropping sample: {e}");
            }
        }
    }
    if dropped > 0 {
        log::info!("dropped {dropped} samples during encoding");
    }
    (out, dropped)
}

fn cmd_train<F: Scalar>(
    cfg: &AppConfig,
    train_path: &Path,
    val_path: Option<&Path>,
    val_frac: f64,
    vocab_path: Option<&Path>,
    out: &Path,
    log_path: Option<&Path>,
) -> Result<()> {
    let (train_raw, _) = load_corpus(train_path)?;
    let (mut train_raw, val_raw) = match val_path {
        Some(vp) => {
            let (v, _) = load_corpus(vp)?;
            (train_raw, v)
        }
        None => {
            if !(0.0..1.0).contains(&val_frac) || val_frac <= 0.0 {
                return Err(Error::Config(format!("val_frac {val_frac} out of (0, 1)")));
            }
            let mut all = train_raw;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "split"));
            use rand::seq::SliceRandom;
            all.shuffle(&mut rng);
            let n_val = ((all.len() as f64) * val_frac).ceil() as usize;
            let val = all.split_off(all.len().saturating_sub(n_val.max(1)));
            (all, val)
        }
    };
    if train_raw.is_empty() || val_raw.is_empty() {
        return Err(Error::Data("empty train or validation split".into()));
    }
    // span fallback for corpora without annotations
    for s in train_raw.iter_mut() {
        if s.spans.is_empty() {
            s.spans = align_spans(&s.background, &s.response, cfg.min_span_len)?;
        }
    }

    let vocab = match vocab_path {
        Some(p) => Vocabulary::load(p)?,
        None => build_vocab(&train_raw, cfg.vocab_max)?,
    };
    let (train_set, _) = encode_all(cfg, &train_raw, &vocab);
    let (val_set, _) = encode_all(cfg, &val_raw, &vocab);
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data("no usable samples after encoding".into()));
    }

    let dims = cfg.dims(vocab.len());
    let mut store = ParamStore::<F>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "init"));
    let params = ModelParams::init(&mut store, dims, &mut rng)?;
    log::info!(
        "training {} samples ({} validation), {} parameters",
        train_set.len(),
        val_set.len(),
        store.total_elements()
    );

    let mut log_file: Box<dyn Write> = match log_path {
        Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => Box::new(std::io::stdout()),
    };
    let decode_opts = {
        let mut base = cfg.clone();
        base.force_mode = ForceMode::None;
        base.decode_options()
    };
    let outcome: TrainOutcome<F> = train(
        &mut store,
        &params,
        &train_set,
        &val_set,
        &vocab,
        &cfg.train_config(),
        &decode_opts,
        |entry| {
            let line = serde_json::to_string(entry).expect("log entry serializes");
            let _ = writeln!(log_file, "{line}");
            let _ = log_file.flush();
        },
    )?;

    let meta = CheckpointMeta {
        config: serde_json::to_value(cfg)?,
        dims,
        vocab_hash: vocab.content_hash(),
        epoch: outcome.best_epoch,
        val_bleu: outcome.best_val_bleu,
    };
    save_checkpoint(out, &outcome.best_store, &meta)?;
    if vocab_path.is_none() {
        let vp = out.with_extension("vocab.txt");
        vocab.save(&vp)?;
        log::info!("vocabulary written to {}", vp.display());
    }
    println!(
        "best epoch {} (validation BLEU {:.2}); checkpoint {}",
        outcome.best_epoch,
        100.0 * outcome.best_val_bleu,
        out.display()
    );
    if outcome.aborted {
        return Err(Error::Numeric(format!(
            "training diverged; last good checkpoint kept at {}",
            out.display()
        )));
    }
    Ok(())
}

fn load_model_and_vocab<F: Scalar>(
    checkpoint: &Path,
    vocab_path: &Path,
) -> Result<(ModelParams, ParamStore<F>, Vocabulary, ModelDims)> {
    let (params, store, meta) = restore_model::<F>(checkpoint)?;
    let vocab = Vocabulary::load(vocab_path)?;
    if vocab.content_hash() != meta.vocab_hash {
        return Err(Error::Data(format!(
            "vocabulary {} does not match the checkpoint (hash mismatch)",
            vocab_path.display()
        )));
    }
    if vocab.len() != meta.dims.vocab {
        return Err(Error::Data("vocabulary size does not match checkpoint dims".into()));
    }
    let dims = meta.dims;
    Ok((params, store, vocab, dims))
}

fn cmd_decode<F: Scalar>(
    cfg: &AppConfig,
    checkpoint: &Path,
    vocab_path: &Path,
    input: &Path,
    out: &Path,
) -> Result<()> {
    let (params, store, vocab, _) = load_model_and_vocab::<F>(checkpoint, vocab_path)?;
    let (raw, _) = load_corpus(input)?;
    let (samples, _) = encode_all(cfg, &raw, &vocab);
    let results = decode_corpus(&store, &params, &samples, &vocab, &cfg.decode_options())?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(out)?);
    for (id, r) in results.iter().enumerate() {
        serde_json::to_writer(&mut f, &DecodeLine::from_result(id, r))?;
        writeln!(f)?;
    }
    drop(f);
    write_sidecar(cfg, out, &[checkpoint, vocab_path, input])?;
    println!("decoded {} samples to {}", results.len(), out.display());
    Ok(())
}

fn cmd_eval(
    cfg: &AppConfig,
    decodes: &Path,
    test: &Path,
    mode: RefMode,
    out: Option<&Path>,
) -> Result<()> {
    use std::io::BufRead;
    let f = std::fs::File::open(decodes)
        .map_err(|e| Error::Data(format!("cannot open decodes {}: {e}", decodes.display())))?;
    let mut lines: Vec<DecodeLine> = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        lines.push(serde_json::from_str(&line)?);
    }
    let (test_raw, _) = load_corpus(test)?;
    if lines.len() != test_raw.len() {
        return Err(Error::Contract(format!(
            "decode count {} != test count {}",
            lines.len(),
            test_raw.len()
        )));
    }
    let offenders: Vec<usize> = lines
        .iter()
        .enumerate()
        .filter(|(i, l)| l.id != *i)
        .map(|(i, _)| i)
        .collect();
    if !offenders.is_empty() {
        return Err(Error::Contract(format!(
            "decode ids out of order at lines {offenders:?}"
        )));
    }

    let hyps: Vec<Hypothesis> = lines
        .iter()
        .map(|l| {
            let r = DecodeResult {
                units: l.units.clone(),
                surface: crate::corpus::tokenize(&l.response),
                switcher: l.switcher.clone(),
                ended_by_eos: false,
            };
            r.hypothesis()
        })
        .collect();
    let golds: Vec<GoldSample> = test_raw
        .iter()
        .map(|s| {
            let mut references = vec![s.response.clone()];
            if mode == RefMode::MR {
                references.extend(s.references.iter().cloned());
            }
            let gold_spans = s
                .spans
                .iter()
                .map(|a| s.background[a.bg_start..=a.bg_end].to_vec())
                .collect();
            GoldSample {
                references,
                gold_spans,
            }
        })
        .collect();

    let mut report = evaluate_corpus_with(&hyps, &golds, mode, cfg.rouge_beta, cfg.bleu_brevity)?;
    if cfg.per_sentence_bleu {
        let mut sum = 0.0;
        for (h, g) in hyps.iter().zip(golds.iter()) {
            sum += crate::eval::corpus_bleu4_with(
                &[h.tokens.clone()],
                &[g.references.clone()],
                cfg.bleu_brevity,
            )?;
        }
        report.bleu4 = sum / hyps.len().max(1) as f64;
    }

    let mut json = serde_json::to_value(&report)?;
    json["provenance"] = provenance(cfg, &[decodes, test])?;
    let text = serde_json::to_string_pretty(&json)?;
    match out {
        Some(p) => std::fs::write(p, &text)?,
        None => println!("{text}"),
    }
    println!(
        "{:?}: BLEU-4 {:.2}  ROUGE-1 {:.2}  ROUGE-2 {:.2}  ROUGE-L {:.2}  span F1 {:.2}  avg len {:.2}  (n={})",
        report.mode,
        100.0 * report.bleu4,
        100.0 * report.rouge1,
        100.0 * report.rouge2,
        100.0 * report.rouge_l,
        100.0 * report.span_f1,
        report.avg_length,
        report.n
    );
    Ok(())
}

fn cmd_chat<F: Scalar>(
    cfg: &AppConfig,
    checkpoint: &Path,
    vocab_path: &Path,
    background: &Path,
) -> Result<()> {
    let (params, store, vocab, _) = load_model_and_vocab::<F>(checkpoint, vocab_path)?;
    let text = std::fs::read_to_string(background)
        .map_err(|e| Error::Data(format!("cannot read background {}: {e}", background.display())))?;
    let tokens = crate::corpus::tokenize(&text);
    if tokens.is_empty() {
        return Err(Error::Data("background tokenized to nothing".into()));
    }
    let mut session = ChatSession {
        store: &store,
        params: &params,
        vocab: &vocab,
        background: tokens,
        limits: cfg.encode_limits(),
        opts: cfg.decode_options(),
    };
    let stdin = std::io::stdin();
    session.run(stdin.lock(), std::io::stdout())
}

fn cmd_gradcheck(step: f64, tol: f64) -> Result<()> {
    let report = crate::gradcheck::mini_total_loss_check(step, tol)?;
    println!("{:<24} {:>12} {:>12} {:>10}", "parameter", "norm rel", "elem rel", "unresolved");
    for e in &report.entries {
        println!(
            "{:<24} {:>12.3e} {:>12.3e} {:>10}{}",
            e.name,
            e.norm_rel_err,
            e.max_rel_err,
            e.unresolved,
            if e.flagged { "  FLAGGED" } else { "" }
        );
    }
    println!(
        "max relative error: {:.3e} (elementwise over resolvable), {:.3e} (per-parameter norm); tolerance {:.1e}",
        report.max_rel_err, report.max_norm_rel_err, report.tol
    );
    if report.passed() {
        println!("gradient check passed");
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check failed: max relative error {:.3e} > {:.1e}",
            report.max_rel_err.max(report.max_norm_rel_err),
            report.tol
        )))
    }
}
