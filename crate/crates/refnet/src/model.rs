//! Model assembly: the full parameter set, per-sample encoding context, and
//! the teacher-forced pass that drives training.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, TensorId};
use crate::corpus::{EncodedSample, Unit, SOS};
use crate::decoder::{self, StepHeads, StepState};
use crate::encoder::{
    encode_sequence, matching_layer, prepare_keys, uniform_init, AttentionParams, AttnKeys,
    EncodedSeq, GruParams,
};
use crate::error::Result;
use crate::scalar::Scalar;

/// Layer sizes. `hidden` is per direction for the encoders and also the
/// decoder state size; bidirectional outputs are twice that.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub matching_hidden: usize,
    pub attn: usize,
    pub untie_pointer_params: bool,
}

impl ModelDims {
    pub fn enc_out(&self) -> usize {
        2 * self.hidden
    }
    pub fn match_out(&self) -> usize {
        2 * self.matching_hidden
    }
    /// Width of the pointer query vectors o¹ and o² (they share attention
    /// parameters, so they share a width).
    pub fn o_dim(&self) -> usize {
        self.hidden
    }
}

/// Every learnable tensor of the model, registered in a fixed order so a
/// checkpoint can be restored by name into an identical layout.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub embedding: ParamId,
    pub ctx_fwd: GruParams,
    pub ctx_bwd: GruParams,
    pub bg_fwd: GruParams,
    pub bg_bwd: GruParams,
    pub match_fwd: GruParams,
    pub match_bwd: GruParams,
    pub attn_kc: AttentionParams,
    pub attn_sc: AttentionParams,
    pub attn_sm: AttentionParams,
    pub attn_ptr: AttentionParams,
    /// Separate second-hop pointer attention, only when untied.
    pub attn_ptr2: Option<AttentionParams>,
    pub w_o1: ParamId,
    pub b_o1: ParamId,
    pub w_o2: ParamId,
    pub b_o2: ParamId,
    pub w_gp: ParamId,
    pub b_gp: ParamId,
    pub w_f: ParamId,
    pub b_f: ParamId,
    pub w_hs: ParamId,
    pub b_hs: ParamId,
    pub dec_gru: GruParams,
}

impl ModelParams {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        dims: ModelDims,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let embed = dims.embed;
        let hidden = dims.hidden;
        let enc_out = dims.enc_out();
        let match_out = dims.match_out();
        let o_dim = dims.o_dim();
        let attn = dims.attn;

        let embedding = store.add(
            "embedding",
            &[dims.vocab, embed],
            uniform_init(rng, dims.vocab * embed),
        )?;
        let ctx_fwd = GruParams::register(store, rng, "ctx_gru_f", embed, hidden)?;
        let ctx_bwd = GruParams::register(store, rng, "ctx_gru_b", embed, hidden)?;
        let bg_fwd = GruParams::register(store, rng, "bg_gru_f", embed, hidden)?;
        let bg_bwd = GruParams::register(store, rng, "bg_gru_b", embed, hidden)?;
        let match_fwd =
            GruParams::register(store, rng, "match_gru_f", enc_out * 2, dims.matching_hidden)?;
        let match_bwd =
            GruParams::register(store, rng, "match_gru_b", enc_out * 2, dims.matching_hidden)?;
        let attn_kc = AttentionParams::register(store, rng, "attn_kc", enc_out, enc_out, attn)?;
        let attn_sc = AttentionParams::register(store, rng, "attn_sc", enc_out, hidden, attn)?;
        let attn_sm = AttentionParams::register(store, rng, "attn_sm", match_out, hidden, attn)?;
        let attn_ptr = AttentionParams::register(store, rng, "attn_ptr", match_out, o_dim, attn)?;
        let attn_ptr2 = if dims.untie_pointer_params {
            Some(AttentionParams::register(
                store, rng, "attn_ptr2", match_out, o_dim, attn,
            )?)
        } else {
            None
        };
        let fused_in = hidden + enc_out + match_out;
        let w_o1 = store.add("w_o1", &[o_dim, fused_in], uniform_init(rng, o_dim * fused_in))?;
        let b_o1 = store.add("b_o1", &[o_dim], vec![F::zero(); o_dim])?;
        let o2_in = o_dim + match_out;
        let w_o2 = store.add("w_o2", &[o_dim, o2_in], uniform_init(rng, o_dim * o2_in))?;
        let b_o2 = store.add("b_o2", &[o_dim], vec![F::zero(); o_dim])?;
        let w_gp = store.add(
            "w_gp",
            &[dims.vocab, o_dim],
            uniform_init(rng, dims.vocab * o_dim),
        )?;
        let b_gp = store.add("b_gp", &[dims.vocab], vec![F::zero(); dims.vocab])?;
        let w_f = store.add("w_f", &[3, fused_in], uniform_init(rng, 3 * fused_in))?;
        let b_f = store.add("b_f", &[3], vec![F::zero(); 3])?;
        let hs_in = match_out + enc_out;
        let w_hs = store.add("w_hs", &[hidden, hs_in], uniform_init(rng, hidden * hs_in))?;
        let b_hs = store.add("b_hs", &[hidden], vec![F::zero(); hidden])?;
        let dec_in = embed + enc_out + match_out;
        let dec_gru = GruParams::register(store, rng, "dec_gru", dec_in, hidden)?;

        Ok(ModelParams {
            dims,
            embedding,
            ctx_fwd,
            ctx_bwd,
            bg_fwd,
            bg_bwd,
            match_fwd,
            match_bwd,
            attn_kc,
            attn_sc,
            attn_sm,
            attn_ptr,
            attn_ptr2,
            w_o1,
            b_o1,
            w_o2,
            b_o2,
            w_gp,
            b_gp,
            w_f,
            b_f,
            w_hs,
            b_hs,
            dec_gru,
        })
    }
}

/// Everything the decoder needs about one encoded sample: encoder outputs,
/// prepared attention keys, the initial decoder state, and the copy support.
pub struct SampleCtx {
    pub ctx: EncodedSeq,
    pub bg: EncodedSeq,
    pub hm: EncodedSeq,
    pub keys_sc: AttnKeys,
    pub keys_sm: AttnKeys,
    pub keys_ptr: AttnKeys,
    pub keys_ptr2: Option<AttnKeys>,
    pub h0: TensorId,
    /// Copy-aggregation id of each background position.
    pub bg_copy_ids: Vec<u32>,
    /// Background positions holding each aggregation id.
    pub copy_positions: BTreeMap<u32, Vec<usize>>,
    pub n_ext: usize,
    /// Embedding-table id of each background position (extended ids fall
    /// back to UNK here).
    pub bg_embed_ids: Vec<u32>,
}

/// Encodes context and background, runs the matching layer, and initializes
/// the decoder state from the last real rows of both sequences.
pub fn build_sample_ctx<'a, F: Scalar>(
    g: &mut Graph<'a, F>,
    params: &ModelParams,
    sample: &EncodedSample,
) -> Result<SampleCtx> {
    let ctx = encode_sequence(g, &params.ctx_fwd, &params.ctx_bwd, params.embedding, &sample.context_ids)?;
    let bg = encode_sequence(g, &params.bg_fwd, &params.bg_bwd, params.embedding, &sample.bg_embed_ids)?;
    let keys_kc = prepare_keys(g, &params.attn_kc, ctx.h, &ctx.mask)?;
    let hm = matching_layer(g, &params.match_fwd, &params.match_bwd, &params.attn_kc, &bg, &keys_kc)?;
    let keys_sc = prepare_keys(g, &params.attn_sc, ctx.h, &ctx.mask)?;
    let keys_sm = prepare_keys(g, &params.attn_sm, hm.h, &hm.mask)?;
    let keys_ptr = prepare_keys(g, &params.attn_ptr, hm.h, &hm.mask)?;
    let keys_ptr2 = match &params.attn_ptr2 {
        Some(p) => Some(prepare_keys(g, p, hm.h, &hm.mask)?),
        None => None,
    };

    let last = g.concat(&[hm.rows[bg.len - 1], ctx.rows[ctx.len - 1]])?;
    let w = g.param(params.w_hs);
    let b = g.param(params.b_hs);
    let wv = g.matvec(w, last)?;
    let pre = g.add(wv, b)?;
    let h0 = g.relu(pre);

    let mut copy_positions: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (pos, &id) in sample.bg_copy_ids.iter().enumerate() {
        copy_positions.entry(id).or_default().push(pos);
    }

    Ok(SampleCtx {
        ctx,
        bg,
        hm,
        keys_sc,
        keys_sm,
        keys_ptr,
        keys_ptr2,
        h0,
        bg_copy_ids: sample.bg_copy_ids.clone(),
        copy_positions,
        n_ext: sample.ext_tokens.len(),
        bg_embed_ids: sample.bg_embed_ids.clone(),
    })
}

/// Role of one flat response position in the unit segmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepRole {
    TokenUnit,
    SpanStart { start: usize, end: usize },
    SpanInterior,
}

#[derive(Clone, Copy, Debug)]
pub struct FlatStep {
    pub gold: u32,
    pub role: StepRole,
}

/// Expands the unit sequence into flat positions tagged with their role.
pub fn flatten_units(sample: &EncodedSample) -> Vec<FlatStep> {
    let mut out = Vec::with_capacity(sample.response.flat.len());
    for unit in &sample.response.units {
        match *unit {
            Unit::Token(id) => out.push(FlatStep {
                gold: id,
                role: StepRole::TokenUnit,
            }),
            Unit::Span { start, end } => {
                out.push(FlatStep {
                    gold: sample.bg_copy_ids[start],
                    role: StepRole::SpanStart { start, end },
                });
                for p in start + 1..=end {
                    out.push(FlatStep {
                        gold: sample.bg_copy_ids[p],
                        role: StepRole::SpanInterior,
                    });
                }
            }
        }
    }
    debug_assert_eq!(
        out.iter().map(|s| s.gold).collect::<Vec<_>>(),
        sample.response.flat
    );
    out
}

/// One teacher-forced step: the state that made the prediction, the head
/// outputs, and the supervision target.
pub struct TfStep {
    pub state: StepState,
    pub heads: StepHeads,
    pub role: StepRole,
    pub gold: u32,
}

/// Runs the decoder over the gold flat token sequence. Prediction at step t
/// happens after consuming token t−1 (SOS first), with attention contexts
/// recomputed at every state update.
pub fn teacher_forced_pass<'a, F: Scalar>(
    g: &mut Graph<'a, F>,
    params: &ModelParams,
    ctx: &SampleCtx,
    sample: &EncodedSample,
) -> Result<Vec<TfStep>> {
    let flat = flatten_units(sample);
    let mut st = decoder::initial_step_state(g, params, ctx)?;
    let mut prev = decoder::embed_unit_token(g, params, SOS)?;
    let mut steps = Vec::with_capacity(flat.len());
    for fs in flat {
        st = decoder::advance_token(g, params, ctx, &st, prev)?;
        let heads = decoder::step_heads(g, params, &st)?;
        steps.push(TfStep {
            state: st,
            heads,
            role: fs.role,
            gold: fs.gold,
        });
        prev = decoder::embed_unit_token(g, params, fs.gold)?;
    }
    Ok(steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, encode_sample, synthesize_corpus, EncodeLimits, SynthConfig};
    use rand::SeedableRng;

    pub(crate) fn mini_dims(vocab: usize) -> ModelDims {
        ModelDims {
            vocab,
            embed: 8,
            hidden: 12,
            matching_hidden: 12,
            attn: 12,
            untie_pointer_params: false,
        }
    }

    #[test]
    fn param_registration_is_deterministic_and_named() {
        let dims = mini_dims(30);
        let mut s1 = ParamStore::<f64>::new();
        let mut s2 = ParamStore::<f64>::new();
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        ModelParams::init(&mut s1, dims, &mut r1).unwrap();
        ModelParams::init(&mut s2, dims, &mut r2).unwrap();
        assert_eq!(s1.len(), s2.len());
        for pid in 0..s1.len() {
            assert_eq!(s1.name(pid), s2.name(pid));
            assert_eq!(s1.value(pid), s2.value(pid));
        }
    }

    #[test]
    fn untied_pointer_adds_second_attention() {
        let mut dims = mini_dims(30);
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = store.len();
        let _ = base;
        dims.untie_pointer_params = true;
        let params = ModelParams::init(&mut store, dims, &mut rng).unwrap();
        assert!(params.attn_ptr2.is_some());
        assert!((0..store.len()).any(|p| store.name(p).starts_with("attn_ptr2")));
    }

    #[test]
    fn flatten_matches_flat_ids_on_synthetic_data() {
        let corpus = synthesize_corpus(21, 10, &SynthConfig::default()).unwrap();
        let vocab = build_vocab(&corpus, 25_000).unwrap();
        for raw in &corpus {
            let enc = encode_sample(raw, &vocab, EncodeLimits::default()).unwrap();
            let flat = flatten_units(&enc);
            assert_eq!(flat.len(), enc.response.flat.len());
            let starts = flat
                .iter()
                .filter(|s| matches!(s.role, StepRole::SpanStart { .. }))
                .count();
            assert_eq!(starts, 1);
        }
    }
}
