//! Hybrid decoding step: state updates with fresh attention contexts, the
//! three-way decoding switcher, two-hop soft span pointers over the matched
//! background, vocabulary prediction, and the copy distribution.

use crate::autodiff::{Graph, TensorId};
use crate::corpus::UNK;
use crate::encoder::{attention_scores, cross_attention, gru_step};
use crate::error::{Error, Result};
use crate::model::{ModelParams, SampleCtx};
use crate::scalar::Scalar;

/// Decoder state at one step: the hidden vector plus the attention contexts
/// computed from it (they feed both the heads and the next update).
#[derive(Clone, Copy, Debug)]
pub struct StepState {
    pub h: TensorId,
    pub c_sc: TensorId,
    pub c_sm: TensorId,
    pub alpha_sm: TensorId,
}

fn attend<F: Scalar>(
    g: &mut Graph<F>,
    params: &ModelParams,
    ctx: &SampleCtx,
    h: TensorId,
) -> Result<StepState> {
    let (_, c_sc) = cross_attention(g, &params.attn_sc, &ctx.keys_sc, h)?;
    let (alpha_sm, c_sm) = cross_attention(g, &params.attn_sm, &ctx.keys_sm, h)?;
    Ok(StepState {
        h,
        c_sc,
        c_sm,
        alpha_sm,
    })
}

/// State at t = 0: the ReLU-initialized hidden vector with its attention
/// contexts.
pub fn initial_step_state<F: Scalar>(
    g: &mut Graph<F>,
    params: &ModelParams,
    ctx: &SampleCtx,
) -> Result<StepState> {
    attend(g, params, ctx, ctx.h0)
}

/// Embedding row for a decoder input token; extended copy ids fall back to
/// the UNK embedding.
pub fn embed_unit_token<F: Scalar>(
    g: &mut Graph<F>,
    params: &ModelParams,
    id: u32,
) -> Result<TensorId> {
    let row = if (id as usize) < params.dims.vocab {
        id as usize
    } else {
        UNK as usize
    };
    g.embed_row(params.embedding, row)
}

/// One GRU update consuming a token embedding and the current attention
/// contexts, followed by fresh attention at the new state.
pub fn advance_token<F: Scalar>(
    g: &mut Graph<F>,
    params: &ModelParams,
    ctx: &SampleCtx,
    st: &StepState,
    token_embed: TensorId,
) -> Result<StepState> {
    let input = g.concat(&[token_embed, st.c_sc, st.c_sm])?;
    let h = gru_step(g, &params.dec_gru, st.h, input)?;
    attend(g, params, ctx, h)
}

/// Advances the state through one emitted unit. A span of n tokens updates
/// the GRU n times, one background token at a time, recomputing the attention
/// contexts at every sub-step; the final state carries the whole span.
pub fn advance_unit<F: Scalar>(
    g: &mut Graph<F>,
    params: &ModelParams,
    ctx: &SampleCtx,
    st: &StepState,
    unit: crate::corpus::Unit,
) -> Result<StepState> {
    match unit {
        crate::corpus::Unit::Token(id) => {
            let e = embed_unit_token(g, params, id)?;
            advance_token(g, params, ctx, st, e)
        }
        crate::corpus::Unit::Span { start, end } => {
            if start > end || end >= ctx.bg_embed_ids.len() {
                return Err(Error::Contract(format!(
                    "span ({start}, {end}) out of background range {}",
                    ctx.bg_embed_ids.len()
                )));
            }
            let mut cur = *st;
            for pos in start..=end {
                let e = g.embed_row(params.embedding, ctx.bg_embed_ids[pos] as usize)?;
                cur = advance_token(g, params, ctx, &cur, e)?;
            }
            Ok(cur)
        }
    }
}

/// Head outputs at one step: the pointer query o¹, the switcher logits and
/// probabilities, and the vocabulary distribution.
pub struct StepHeads {
    pub o1: TensorId,
    pub f_logits: TensorId,
    pub switcher: TensorId,
    pub vocab_probs: TensorId,
}

pub fn step_heads<F: Scalar>(
    g: &mut Graph<F>,
    params: &ModelParams,
    st: &StepState,
) -> Result<StepHeads> {
    let fused = g.concat(&[st.h, st.c_sc, st.c_sm])?;
    let w_o1 = g.param(params.w_o1);
    let b_o1 = g.param(params.b_o1);
    let o1w = g.matvec(w_o1, fused)?;
    let o1 = g.add(o1w, b_o1)?;
    let w_f = g.param(params.w_f);
    let b_f = g.param(params.b_f);
    let fw = g.matvec(w_f, fused)?;
    let f_logits = g.add(fw, b_f)?;
    let switcher = g.softmax(f_logits)?;
    let w_gp = g.param(params.w_gp);
    let b_gp = g.param(params.b_gp);
    let vw = g.matvec(w_gp, o1)?;
    let vocab_logits = g.add(vw, b_gp)?;
    let vocab_probs = g.softmax(vocab_logits)?;
    Ok(StepHeads {
        o1,
        f_logits,
        switcher,
        vocab_probs,
    })
}

/// Two-hop pointer outputs; scores are pre-softmax logits for stable log
/// gathering.
pub struct PointerNodes {
    pub scores1: TensorId,
    pub alpha1: TensorId,
    pub o2: TensorId,
    pub scores2: TensorId,
    pub alpha2: TensorId,
}

/// First hop points at the span start; its context vector conditions the
/// second hop, which points at the span end. Both hops share the same
/// attention parameters unless untied. No start/end ordering mask is applied
/// here: these are soft pointers.
pub fn reference_pointers<F: Scalar>(
    g: &mut Graph<F>,
    params: &ModelParams,
    ctx: &SampleCtx,
    o1: TensorId,
) -> Result<PointerNodes> {
    let scores1 = attention_scores(g, &params.attn_ptr, &ctx.keys_ptr, o1)?;
    let alpha1 = g.masked_softmax(scores1, &ctx.hm.mask)?;
    let c_r = g.tmatvec(ctx.hm.h, alpha1)?;
    let cat = g.concat(&[o1, c_r])?;
    let w_o2 = g.param(params.w_o2);
    let b_o2 = g.param(params.b_o2);
    let ow = g.matvec(w_o2, cat)?;
    let o2 = g.add(ow, b_o2)?;
    let (hop2_params, hop2_keys) = match (&params.attn_ptr2, &ctx.keys_ptr2) {
        (Some(p), Some(k)) => (p, k),
        _ => (&params.attn_ptr, &ctx.keys_ptr),
    };
    let scores2 = attention_scores(g, hop2_params, hop2_keys, o2)?;
    let alpha2 = g.masked_softmax(scores2, &ctx.hm.mask)?;
    Ok(PointerNodes {
        scores1,
        alpha1,
        o2,
        scores2,
        alpha2,
    })
}

/// Probability of the span [start, end]: start mass from hop one times end
/// mass from hop two.
pub fn span_probability<F: Scalar>(
    alpha1: &[F],
    alpha2: &[F],
    start: usize,
    end: usize,
) -> Result<F> {
    if start > end || end >= alpha1.len() || alpha2.len() != alpha1.len() {
        return Err(Error::Contract(format!(
            "span ({start}, {end}) invalid for pointer length {}",
            alpha1.len()
        )));
    }
    Ok(alpha1[start] * alpha2[end])
}

/// Joint argmax of the span probability over start ≤ end with the span length
/// capped; ties resolve to the smallest start, then the smallest end.
pub fn argmax_span<F: Scalar>(
    alpha1: &[F],
    alpha2: &[F],
    mask: &[bool],
    max_span_len: usize,
) -> (usize, usize, F) {
    let mut best = (0usize, 0usize, F::neg_infinity());
    for s in 0..alpha1.len() {
        if !mask[s] {
            continue;
        }
        let e_hi = (s + max_span_len - 1).min(alpha1.len() - 1);
        for e in s..=e_hi {
            if !mask[e] {
                continue;
            }
            let p = alpha1[s] * alpha2[e];
            if p > best.2 {
                best = (s, e, p);
            }
        }
    }
    best
}

/// Sequential (per-hop) argmax with the same tie-breaking, selectable for
/// comparison against the joint rule.
pub fn argmax_span_sequential<F: Scalar>(
    alpha1: &[F],
    alpha2: &[F],
    mask: &[bool],
    max_span_len: usize,
) -> (usize, usize, F) {
    let mut s_best = (0usize, F::neg_infinity());
    for (s, &a) in alpha1.iter().enumerate() {
        if mask[s] && a > s_best.1 {
            s_best = (s, a);
        }
    }
    let s = s_best.0;
    let e_hi = (s + max_span_len - 1).min(alpha2.len() - 1);
    let mut e_best = (s, F::neg_infinity());
    for e in s..=e_hi {
        if mask[e] && alpha2[e] > e_best.1 {
            e_best = (e, alpha2[e]);
        }
    }
    (s, e_best.0, alpha1[s] * alpha2[e_best.0])
}

/// Graph node for the generation mixture evaluated at one target id:
/// P(g_p)·P_vocab(w) + P(g_c)·Σ α over background positions holding w.
pub fn mixture_prob_node<F: Scalar>(
    g: &mut Graph<F>,
    params: &ModelParams,
    ctx: &SampleCtx,
    heads: &StepHeads,
    alpha_sm: TensorId,
    gold: u32,
) -> Result<TensorId> {
    let mut parts = Vec::with_capacity(2);
    if (gold as usize) < params.dims.vocab {
        let p_gp = g.gather_sum(heads.switcher, &[1])?;
        let pv = g.gather_sum(heads.vocab_probs, &[gold as usize])?;
        parts.push(g.mul(p_gp, pv)?);
    }
    if let Some(positions) = ctx.copy_positions.get(&gold) {
        let p_gc = g.gather_sum(heads.switcher, &[2])?;
        let pc = g.gather_sum(alpha_sm, positions)?;
        parts.push(g.mul(p_gc, pc)?);
    }
    if parts.is_empty() {
        return Err(Error::Contract(format!(
            "target id {gold} is neither in the vocabulary nor in the background"
        )));
    }
    g.sum_scalars(&parts)
}

/// All per-step distributions as plain values, for inference and checks.
#[derive(Clone, Debug)]
pub struct StepOutput<F> {
    pub switcher: [F; 3],
    pub f: Vec<F>,
    pub o1: Vec<F>,
    pub c_sc: Vec<F>,
    pub c_sm: Vec<F>,
    pub alpha_sm: Vec<F>,
    pub vocab: Vec<F>,
    pub alpha_r1: Vec<F>,
    pub alpha_r2: Vec<F>,
}

pub fn extract_step_output<F: Scalar>(
    g: &Graph<F>,
    st: &StepState,
    heads: &StepHeads,
    ptrs: &PointerNodes,
) -> StepOutput<F> {
    let sw = g.value(heads.switcher);
    StepOutput {
        switcher: [sw[0], sw[1], sw[2]],
        f: g.value(heads.f_logits).to_vec(),
        o1: g.value(heads.o1).to_vec(),
        c_sc: g.value(st.c_sc).to_vec(),
        c_sm: g.value(st.c_sm).to_vec(),
        alpha_sm: g.value(st.alpha_sm).to_vec(),
        vocab: g.value(heads.vocab_probs).to_vec(),
        alpha_r1: g.value(ptrs.alpha1).to_vec(),
        alpha_r2: g.value(ptrs.alpha2).to_vec(),
    }
}

/// Full generation distribution over vocabulary plus extended copy ids, as
/// values. Total mass is P(g_p) + P(g_c).
pub fn generation_distribution<F: Scalar>(
    vocab_probs: &[F],
    alpha_sm: &[F],
    p_gp: F,
    p_gc: F,
    bg_copy_ids: &[u32],
    n_ext: usize,
) -> Vec<F> {
    let mut out = vec![F::zero(); vocab_probs.len() + n_ext];
    for (w, &p) in vocab_probs.iter().enumerate() {
        out[w] = p_gp * p;
    }
    for (pos, &id) in bg_copy_ids.iter().enumerate() {
        out[id as usize] = out[id as usize] + p_gc * alpha_sm[pos];
    }
    out
}
