//! Training: the three teacher-forced losses and their combination, global
//! gradient clipping, Adam, the epoch loop with validation-based model
//! selection, and binary checkpoints.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradSink, Graph, ParamStore};
use crate::corpus::{EncodedSample, Vocabulary};
use crate::decoder::{self, StepOutput};
use crate::error::{Error, Result};
use crate::eval::corpus_bleu4;
use crate::infer::{decode_corpus, DecodeOptions};
use crate::model::{build_sample_ctx, teacher_forced_pass, ModelParams, StepRole, TfStep};
use crate::scalar::{Precision, Scalar};

/// Floor applied to gathered probabilities before logs.
pub const LOG_FLOOR: f64 = 1e-12;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForceMode {
    #[default]
    None,
    Reference,
    Generation,
}

impl std::str::FromStr for ForceMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "none" => Ok(ForceMode::None),
            "reference" => Ok(ForceMode::Reference),
            "generation" => Ok(ForceMode::Generation),
            other => Err(format!("unknown force mode `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub use_switcher_loss: bool,
    pub force_mode: ForceMode,
    pub exclude_span_tokens_from_lg: bool,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 32,
            epochs: 30,
            clip_norm: 2.0,
            seed: 0,
            use_switcher_loss: true,
            force_mode: ForceMode::None,
            exclude_span_tokens_from_lg: false,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0
            || self.batch_size == 0
            || self.epochs == 0
            || self.clip_norm <= 0.0
        {
            return Err(Error::Config(
                "learning rate, batch size, epochs, and clip norm must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            use_switcher_loss: self.use_switcher_loss,
            force_mode: self.force_mode,
            exclude_span_tokens_from_lg: self.exclude_span_tokens_from_lg,
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LossOptions {
    pub use_switcher_loss: bool,
    pub force_mode: ForceMode,
    pub exclude_span_tokens_from_lg: bool,
}

impl LossOptions {
    pub fn standard() -> Self {
        LossOptions {
            use_switcher_loss: true,
            force_mode: ForceMode::None,
            exclude_span_tokens_from_lg: false,
        }
    }
}

/// The three loss components of one sample as graph nodes.
pub struct LossNodes {
    pub lg: crate::autodiff::TensorId,
    pub lr: crate::autodiff::TensorId,
    pub ls: crate::autodiff::TensorId,
    pub total: crate::autodiff::TensorId,
}

/// Builds the per-sample losses over a teacher-forced pass.
///
/// The generation loss runs over the flat token sequence (span tokens
/// included unless excluded by options); the reference loss adds span-level
/// pointer supervision at span-start steps; the switcher loss supervises the
/// reference/generation decision at unit steps.
pub fn build_losses<F: Scalar>(
    g: &mut Graph<F>,
    params: &ModelParams,
    ctx: &crate::model::SampleCtx,
    steps: &[TfStep],
    opts: &LossOptions,
) -> Result<LossNodes> {
    let floor = F::from_f64(LOG_FLOOR);
    let all3 = [true, true, true];
    let mut lg_terms = Vec::new();
    let mut lr_terms = Vec::new();
    let mut ls_terms = Vec::new();

    for step in steps {
        let is_span_token = !matches!(step.role, StepRole::TokenUnit);
        let skip_lg = is_span_token
            && (opts.exclude_span_tokens_from_lg || opts.force_mode == ForceMode::Reference);
        if !skip_lg {
            let mix = decoder::mixture_prob_node(g, params, ctx, &step.heads, step.state.alpha_sm, step.gold)?;
            let lp = g.log_floor(mix, floor);
            lg_terms.push(g.scale_shift(lp, F::from_f64(-1.0), F::zero()));
        }

        match step.role {
            StepRole::SpanStart { start, end } => {
                if opts.force_mode != ForceMode::Generation {
                    let ptrs = decoder::reference_pointers(g, params, ctx, step.heads.o1)?;
                    let lp_r = g.log_group_prob(step.heads.f_logits, &all3, &[0])?;
                    let lp_s = g.log_group_prob(ptrs.scores1, &ctx.hm.mask, &[start])?;
                    let lp_e = g.log_group_prob(ptrs.scores2, &ctx.hm.mask, &[end])?;
                    let sum = g.sum_scalars(&[lp_r, lp_s, lp_e])?;
                    lr_terms.push(g.scale_shift(sum, F::from_f64(-1.0), F::zero()));
                }
                if opts.use_switcher_loss {
                    let lp = if opts.force_mode == ForceMode::Generation {
                        g.log_group_prob(step.heads.f_logits, &all3, &[1, 2])?
                    } else {
                        g.log_group_prob(step.heads.f_logits, &all3, &[0])?
                    };
                    ls_terms.push(g.scale_shift(lp, F::from_f64(-1.0), F::zero()));
                }
            }
            StepRole::TokenUnit => {
                if opts.use_switcher_loss {
                    let lp = g.log_group_prob(step.heads.f_logits, &all3, &[1, 2])?;
                    ls_terms.push(g.scale_shift(lp, F::from_f64(-1.0), F::zero()));
                }
            }
            StepRole::SpanInterior => {}
        }
    }

    let lg = g.sum_scalars(&lg_terms)?;
    let lr = g.sum_scalars(&lr_terms)?;
    let ls = g.sum_scalars(&ls_terms)?;
    let total = g.sum_scalars(&[lg, lr, ls])?;
    Ok(LossNodes { lg, lr, ls, total })
}

/// Loss components of one sample as plain numbers.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossValues {
    pub lg: f64,
    pub lr: f64,
    pub ls: f64,
    pub total: f64,
}

/// Forward + backward for one sample; gradients land in a fresh sink.
pub fn sample_loss_and_grads<F: Scalar>(
    store: &ParamStore<F>,
    params: &ModelParams,
    sample: &EncodedSample,
    opts: &LossOptions,
) -> Result<(LossValues, GradSink<F>)> {
    let mut g = Graph::new(store);
    let ctx = build_sample_ctx(&mut g, params, sample)?;
    let steps = teacher_forced_pass(&mut g, params, &ctx, sample)?;
    let nodes = build_losses(&mut g, params, &ctx, &steps, opts)?;
    let values = LossValues {
        lg: g.scalar(nodes.lg).as_f64(),
        lr: g.scalar(nodes.lr).as_f64(),
        ls: g.scalar(nodes.ls).as_f64(),
        total: g.scalar(nodes.total).as_f64(),
    };
    let sink = g.backward(nodes.total)?;
    Ok((values, sink))
}

/// One teacher-forced step as values, for the reference loss computations
/// below.
pub struct ValueStep<F> {
    pub out: StepOutput<F>,
    pub role: StepRole,
    pub gold: u32,
}

fn neg_ln_floor(p: f64) -> f64 {
    -p.max(LOG_FLOOR).ln()
}

/// Generation loss over flat tokens: −log of the predict/copy mixture at
/// each gold token.
pub fn generation_loss_value<F: Scalar>(
    steps: &[ValueStep<F>],
    bg_copy_ids: &[u32],
    vocab_len: usize,
    exclude_span_tokens: bool,
) -> f64 {
    let mut total = 0.0;
    for s in steps {
        if exclude_span_tokens && !matches!(s.role, StepRole::TokenUnit) {
            continue;
        }
        let p_gp = s.out.switcher[1].as_f64();
        let p_gc = s.out.switcher[2].as_f64();
        let mut p = 0.0;
        if (s.gold as usize) < vocab_len {
            p += p_gp * s.out.vocab[s.gold as usize].as_f64();
        }
        for (pos, &id) in bg_copy_ids.iter().enumerate() {
            if id == s.gold {
                p += p_gc * s.out.alpha_sm[pos].as_f64();
            }
        }
        total += neg_ln_floor(p);
    }
    total
}

/// Reference loss over unit steps: −log[P(r)·α¹(start)·α²(end)] at span
/// units, zero elsewhere.
pub fn reference_loss_value<F: Scalar>(steps: &[ValueStep<F>]) -> f64 {
    let mut total = 0.0;
    for s in steps {
        if let StepRole::SpanStart { start, end } = s.role {
            let p = s.out.switcher[0].as_f64()
                * s.out.alpha_r1[start].as_f64()
                * s.out.alpha_r2[end].as_f64();
            total += neg_ln_floor(p);
        }
    }
    total
}

/// Switcher loss over unit steps: −log P(r) at span units, −log P(g)
/// elsewhere.
pub fn switcher_loss_value<F: Scalar>(steps: &[ValueStep<F>]) -> f64 {
    let mut total = 0.0;
    for s in steps {
        match s.role {
            StepRole::SpanStart { .. } => total += neg_ln_floor(s.out.switcher[0].as_f64()),
            StepRole::TokenUnit => {
                total += neg_ln_floor(s.out.switcher[1].as_f64() + s.out.switcher[2].as_f64())
            }
            StepRole::SpanInterior => {}
        }
    }
    total
}

/// Global L2 clipping: if the norm over all parameters exceeds `max_norm`,
/// every gradient is scaled by `max_norm / norm`. Returns the pre-clip norm.
pub fn clip_gradients<F: Scalar>(
    store: &ParamStore<F>,
    sink: &mut GradSink<F>,
    max_norm: f64,
) -> Result<f64> {
    let mut sq = 0.0f64;
    for pid in 0..store.len() {
        let mut acc = 0.0f64;
        if let Some(g) = &sink.dense[pid] {
            for v in g {
                acc += v.as_f64() * v.as_f64();
            }
        }
        for g in sink.rows[pid].values() {
            for v in g {
                acc += v.as_f64() * v.as_f64();
            }
        }
        if !acc.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient in parameter {}",
                store.name(pid)
            )));
        }
        sq += acc;
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        sink.scale(F::from_f64(max_norm / norm));
    }
    Ok(norm)
}

/// Adam with bias correction; moments live per parameter, flattened.
pub struct Adam<F> {
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    t: u64,
    pub learning_rate: f64,
}

impl<F: Scalar> Adam<F> {
    pub fn new(store: &ParamStore<F>, learning_rate: f64) -> Self {
        let m = (0..store.len())
            .map(|p| vec![F::zero(); store.value(p).len()])
            .collect();
        let v = (0..store.len())
            .map(|p| vec![F::zero(); store.value(p).len()])
            .collect();
        Adam {
            m,
            v,
            t: 0,
            learning_rate,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, sink: &GradSink<F>) {
        self.t += 1;
        let b1 = F::from_f64(ADAM_BETA1);
        let b2 = F::from_f64(ADAM_BETA2);
        let eps = F::from_f64(ADAM_EPS);
        let one = F::one();
        let bc1 = F::from_f64(1.0 - ADAM_BETA1.powi(self.t as i32));
        let bc2 = F::from_f64(1.0 - ADAM_BETA2.powi(self.t as i32));
        let lr = F::from_f64(self.learning_rate);
        for pid in 0..store.len() {
            let grads = sink.param_grad(store, pid);
            let m = &mut self.m[pid];
            let v = &mut self.v[pid];
            let values = store.value_mut(pid);
            for i in 0..values.len() {
                let gi = grads[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] = values[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_bleu: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<F> {
    pub best_store: ParamStore<F>,
    pub best_epoch: usize,
    pub best_val_bleu: f64,
    pub logs: Vec<EpochLog>,
    /// Set when a non-finite loss aborted training; the best store still
    /// holds the last good parameters.
    pub aborted: bool,
}

/// Mean gradient of one batch, accumulated per sample in index order so the
/// result does not depend on worker count.
fn batch_grads<F: Scalar>(
    store: &ParamStore<F>,
    params: &ModelParams,
    batch: &[&EncodedSample],
    opts: &LossOptions,
) -> Result<(f64, GradSink<F>)> {
    let per_sample: Vec<Result<(LossValues, GradSink<F>)>> = batch
        .par_iter()
        .map(|s| sample_loss_and_grads(store, params, s, opts))
        .collect();
    let mut merged = GradSink::new(store.len());
    let mut loss_sum = 0.0;
    for r in per_sample {
        let (values, sink) = r?;
        loss_sum += values.total;
        merged.merge(&sink);
    }
    let inv = 1.0 / batch.len() as f64;
    merged.scale(F::from_f64(inv));
    Ok((loss_sum * inv, merged))
}

/// Epoch loop with seeded shuffling, teacher forcing, greedy-decode
/// validation BLEU after each epoch, and best-checkpoint selection.
pub fn train<F: Scalar>(
    store: &mut ParamStore<F>,
    params: &ModelParams,
    train_set: &[EncodedSample],
    val_set: &[EncodedSample],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    decode_opts: &DecodeOptions,
    mut log_line: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("train and validation splits must be nonempty".into()));
    }
    let opts = cfg.loss_options();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(store, cfg.learning_rate);
    let mut best_store = store.clone();
    let mut best_epoch = 0usize;
    let mut best_val_bleu = f64::NEG_INFINITY;
    let mut logs = Vec::new();
    let mut aborted = false;

    let val_refs: Vec<Vec<Vec<String>>> = val_set
        .iter()
        .map(|s| vec![s.response_tokens.clone()])
        .collect();

    'epochs: for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&EncodedSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, mut sink) = batch_grads(store, params, &batch, &opts)?;
            if !loss.is_finite() {
                log::warn!("non-finite loss at epoch {epoch}; aborting with last good parameters");
                aborted = true;
                break 'epochs;
            }
            clip_gradients(store, &mut sink, cfg.clip_norm)?;
            adam.step(store, &sink);
            loss_sum += loss;
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;

        let decodes = decode_corpus(store, params, val_set, vocab, decode_opts)?;
        let hyps: Vec<Vec<String>> = decodes.iter().map(|d| d.surface.clone()).collect();
        let val_bleu = corpus_bleu4(&hyps, &val_refs)?;

        let entry = EpochLog {
            epoch,
            train_loss,
            val_bleu,
            seconds: start.elapsed().as_secs_f64(),
        };
        log_line(&entry);
        logs.push(entry);

        if val_bleu > best_val_bleu {
            best_val_bleu = val_bleu;
            best_epoch = epoch;
            best_store = store.clone();
        }
    }

    if best_epoch == 0 {
        // aborted before the first validation pass
        best_store = store.clone();
        best_val_bleu = 0.0;
    }
    Ok(TrainOutcome {
        best_store,
        best_epoch,
        best_val_bleu,
        logs,
        aborted,
    })
}

/// Checkpoint metadata serialized as JSON inside the binary file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Resolved application config for provenance.
    pub config: serde_json::Value,
    pub dims: crate::model::ModelDims,
    pub vocab_hash: String,
    pub epoch: usize,
    pub val_bleu: f64,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"RFNT";
const CHECKPOINT_VERSION: u32 = 1;

/// Little-endian layout: magic, format version, metadata length + UTF-8 JSON
/// metadata, then per tensor (name length, name, rank, dims, raw f32 data).
pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    store: &ParamStore<F>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let meta_bytes = serde_json::to_vec(meta)?;
    f.write_all(&(meta_bytes.len() as u64).to_le_bytes())?;
    f.write_all(&meta_bytes)?;
    for (_, entry) in store.iter() {
        f.write_all(&(entry.name.len() as u32).to_le_bytes())?;
        f.write_all(entry.name.as_bytes())?;
        f.write_all(&(entry.shape.len() as u32).to_le_bytes())?;
        for &d in &entry.shape {
            f.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &entry.value {
            f.write_all(&v.to_stored().to_le_bytes())?;
        }
    }
    Ok(())
}

pub struct LoadedCheckpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

pub fn read_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let mut f = std::io::BufReader::new(
        std::fs::File::open(path)
            .map_err(|e| Error::Data(format!("cannot open checkpoint {}: {e}", path.display())))?,
    );
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Data("not a checkpoint file (bad magic)".into()));
    }
    let mut u32buf = [0u8; 4];
    f.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let mut u64buf = [0u8; 8];
    f.read_exact(&mut u64buf)?;
    let meta_len = u64::from_le_bytes(u64buf) as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    f.read_exact(&mut meta_bytes)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)?;

    let mut tensors = Vec::new();
    loop {
        match f.read_exact(&mut u32buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name = vec![0u8; name_len];
        f.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Data("bad tensor name".into()))?;
        f.read_exact(&mut u32buf)?;
        let rank = u32::from_le_bytes(u32buf) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            f.read_exact(&mut u64buf)?;
            shape.push(u64::from_le_bytes(u64buf) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut f32buf = [0u8; 4];
        for _ in 0..numel {
            f.read_exact(&mut f32buf)?;
            data.push(f32::from_le_bytes(f32buf));
        }
        tensors.push((name, shape, data));
    }
    Ok(LoadedCheckpoint { meta, tensors })
}

/// Rebuilds the parameter layout from checkpoint metadata and fills every
/// tensor by name. Reload is bit-exact at 32-bit storage.
pub fn restore_model<F: Scalar>(path: &Path) -> Result<(ModelParams, ParamStore<F>, CheckpointMeta)> {
    let loaded = read_checkpoint(path)?;
    let mut store = ParamStore::<F>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = ModelParams::init(&mut store, loaded.meta.dims, &mut rng)?;
    if loaded.tensors.len() != store.len() {
        return Err(Error::Data(format!(
            "checkpoint holds {} tensors, model expects {}",
            loaded.tensors.len(),
            store.len()
        )));
    }
    for (name, shape, data) in &loaded.tensors {
        let pid = (0..store.len())
            .find(|&p| store.name(p) == name)
            .ok_or_else(|| Error::Data(format!("unknown tensor {name} in checkpoint")))?;
        if store.shape(pid) != shape.as_slice() {
            return Err(Error::Data(format!(
                "tensor {name} has shape {:?}, model expects {:?}",
                shape,
                store.shape(pid)
            )));
        }
        let slot = store.value_mut(pid);
        for (v, &raw) in slot.iter_mut().zip(data.iter()) {
            *v = F::from_stored(raw);
        }
    }
    Ok((params, store, loaded.meta))
}
