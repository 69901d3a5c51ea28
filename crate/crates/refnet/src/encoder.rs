//! Sequence encoding: GRU cells, bidirectional encoders over token
//! embeddings, additive cross-attention, and the matching layer that turns
//! background states into context-aware representations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, TensorId};
use crate::corpus::PAD;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub fn uniform_init<F: Scalar>(rng: &mut ChaCha8Rng, n: usize) -> Vec<F> {
    (0..n).map(|_| F::from_f64(rng.gen_range(-0.08..0.08))).collect()
}

/// Update, reset, and candidate gates for one GRU direction.
#[derive(Clone, Copy, Debug)]
pub struct GruParams {
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub b_h: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruParams {
    pub fn register<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
    ) -> Result<Self> {
        let weight = |store: &mut ParamStore<F>, rng: &mut ChaCha8Rng, name: &str, r: usize, c: usize| {
            let init = uniform_init(rng, r * c);
            store.add(&format!("{prefix}.{name}"), &[r, c], init)
        };
        let w_z = weight(store, rng, "w_z", hidden_dim, input_dim)?;
        let u_z = weight(store, rng, "u_z", hidden_dim, hidden_dim)?;
        let b_z = store.add(&format!("{prefix}.b_z"), &[hidden_dim], vec![F::zero(); hidden_dim])?;
        let w_r = weight(store, rng, "w_r", hidden_dim, input_dim)?;
        let u_r = weight(store, rng, "u_r", hidden_dim, hidden_dim)?;
        let b_r = store.add(&format!("{prefix}.b_r"), &[hidden_dim], vec![F::zero(); hidden_dim])?;
        let w_h = weight(store, rng, "w_h", hidden_dim, input_dim)?;
        let u_h = weight(store, rng, "u_h", hidden_dim, hidden_dim)?;
        let b_h = store.add(&format!("{prefix}.b_h"), &[hidden_dim], vec![F::zero(); hidden_dim])?;
        Ok(GruParams {
            w_z,
            u_z,
            b_z,
            w_r,
            u_r,
            b_r,
            w_h,
            u_h,
            b_h,
            input_dim,
            hidden_dim,
        })
    }
}

/// Standard GRU recurrence:
/// z = σ(Wz·x + Uz·h + bz), r = σ(Wr·x + Ur·h + br),
/// ĥ = tanh(Wh·x + Uh·(r⊙h) + bh), h' = (1−z)⊙h + z⊙ĥ.
pub fn gru_step<F: Scalar>(
    g: &mut Graph<F>,
    cell: &GruParams,
    h_prev: TensorId,
    x: TensorId,
) -> Result<TensorId> {
    let gate = |g: &mut Graph<F>, w: ParamId, u: ParamId, b: ParamId, hin: TensorId, xin: TensorId| -> Result<TensorId> {
        let wp = g.param(w);
        let up = g.param(u);
        let bp = g.param(b);
        let wx = g.matvec(wp, xin)?;
        let uh = g.matvec(up, hin)?;
        let s = g.add(wx, uh)?;
        g.add(s, bp)
    };
    let z_pre = gate(g, cell.w_z, cell.u_z, cell.b_z, h_prev, x)?;
    let z = g.sigmoid(z_pre);
    let r_pre = gate(g, cell.w_r, cell.u_r, cell.b_r, h_prev, x)?;
    let r = g.sigmoid(r_pre);
    let rh = g.mul(r, h_prev)?;
    let cand_pre = gate(g, cell.w_h, cell.u_h, cell.b_h, rh, x)?;
    let cand = g.tanh(cand_pre);
    let one_minus_z = g.scale_shift(z, F::from_f64(-1.0), F::one());
    let keep = g.mul(one_minus_z, h_prev)?;
    let take = g.mul(z, cand)?;
    g.add(keep, take)
}

/// Bidirectional encoding of one sequence: per-position concatenation of the
/// forward and backward states. Rows at or beyond `len` are zero and must be
/// masked downstream.
#[derive(Clone, Debug)]
pub struct EncodedSeq {
    pub rows: Vec<TensorId>,
    /// All rows stacked, [L × 2·hidden].
    pub h: TensorId,
    pub mask: Vec<bool>,
    pub len: usize,
}

/// Runs a forward and a backward GRU over precomputed input vectors. The
/// backward direction starts at `len - 1`, so trailing padding never leaks
/// into real positions.
pub fn bigru_over_inputs<F: Scalar>(
    g: &mut Graph<F>,
    fwd: &GruParams,
    bwd: &GruParams,
    inputs: &[TensorId],
    len: usize,
) -> Result<EncodedSeq> {
    if len == 0 || inputs.is_empty() {
        return Err(Error::Contract("cannot encode an empty sequence".into()));
    }
    debug_assert!(len <= inputs.len());
    let hidden = fwd.hidden_dim;
    let mut fwd_states = Vec::with_capacity(len);
    let mut h = g.zeros(&[hidden]);
    for &x in &inputs[..len] {
        h = gru_step(g, fwd, h, x)?;
        fwd_states.push(h);
    }
    let mut bwd_states = vec![0usize; len];
    let mut hb = g.zeros(&[hidden]);
    for t in (0..len).rev() {
        hb = gru_step(g, bwd, hb, inputs[t])?;
        bwd_states[t] = hb;
    }
    let mut rows = Vec::with_capacity(inputs.len());
    let mut mask = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        if t < len {
            rows.push(g.concat(&[fwd_states[t], bwd_states[t]])?);
            mask.push(true);
        } else {
            rows.push(g.zeros(&[2 * hidden]));
            mask.push(false);
        }
    }
    let h = g.stack_rows(&rows)?;
    Ok(EncodedSeq { rows, h, mask, len })
}

/// Embeds token ids and runs the bidirectional encoder. Trailing PAD ids
/// define the real length; PAD rows come out zero and masked.
pub fn encode_sequence<F: Scalar>(
    g: &mut Graph<F>,
    fwd: &GruParams,
    bwd: &GruParams,
    embedding: ParamId,
    ids: &[u32],
) -> Result<EncodedSeq> {
    let len = ids.iter().position(|&id| id == PAD).unwrap_or(ids.len());
    if len == 0 {
        return Err(Error::Contract("cannot encode an empty sequence".into()));
    }
    let embed_dim = fwd.input_dim;
    let mut inputs = Vec::with_capacity(ids.len());
    for (t, &id) in ids.iter().enumerate() {
        if t < len {
            inputs.push(g.embed_row(embedding, id as usize)?);
        } else {
            inputs.push(g.zeros(&[embed_dim]));
        }
    }
    bigru_over_inputs(g, fwd, bwd, &inputs, len)
}

/// Additive attention parameters: score = vᵀ·tanh(key_proj·key + query_proj·query + b).
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    /// Stored [key_dim × attn] so the key side is one matmul over all rows.
    pub key_proj: ParamId,
    pub query_proj: ParamId,
    pub v: ParamId,
    pub b: ParamId,
}

impl AttentionParams {
    pub fn register<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        key_dim: usize,
        query_dim: usize,
        attn_dim: usize,
    ) -> Result<Self> {
        let key_proj = store.add(
            &format!("{prefix}.key_proj"),
            &[key_dim, attn_dim],
            uniform_init(rng, key_dim * attn_dim),
        )?;
        let query_proj = store.add(
            &format!("{prefix}.query_proj"),
            &[attn_dim, query_dim],
            uniform_init(rng, attn_dim * query_dim),
        )?;
        let v = store.add(&format!("{prefix}.v"), &[attn_dim], uniform_init(rng, attn_dim))?;
        let b = store.add(&format!("{prefix}.b"), &[attn_dim], vec![F::zero(); attn_dim])?;
        Ok(AttentionParams {
            key_proj,
            query_proj,
            v,
            b,
        })
    }
}

/// Key side of one attention target, projected once per sequence.
#[derive(Clone, Debug)]
pub struct AttnKeys {
    pub keys: TensorId,
    proj: TensorId,
    pub mask: Vec<bool>,
}

pub fn prepare_keys<F: Scalar>(
    g: &mut Graph<F>,
    params: &AttentionParams,
    keys: TensorId,
    mask: &[bool],
) -> Result<AttnKeys> {
    let kp = g.param(params.key_proj);
    let proj = g.matmul(keys, kp)?;
    Ok(AttnKeys {
        keys,
        proj,
        mask: mask.to_vec(),
    })
}

/// Unnormalized attention logits of `query` against every key row.
pub fn attention_scores<F: Scalar>(
    g: &mut Graph<F>,
    params: &AttentionParams,
    keys: &AttnKeys,
    query: TensorId,
) -> Result<TensorId> {
    let qp = g.param(params.query_proj);
    let b = g.param(params.b);
    let q = g.matvec(qp, query)?;
    let qb = g.add(q, b)?;
    let pre = g.add_bias_rows(keys.proj, qb)?;
    let act = g.tanh(pre);
    let v = g.param(params.v);
    g.matvec(act, v)
}

/// Masked softmax over additive scores and the convex combination of key
/// rows: returns (weights, context).
pub fn cross_attention<F: Scalar>(
    g: &mut Graph<F>,
    params: &AttentionParams,
    keys: &AttnKeys,
    query: TensorId,
) -> Result<(TensorId, TensorId)> {
    let scores = attention_scores(g, params, keys, query)?;
    let weights = g.masked_softmax(scores, &keys.mask)?;
    let context = g.tmatvec(keys.keys, weights)?;
    Ok((weights, context))
}

/// Context-aware background representation: every background state reads the
/// context with attention, and a further BiGRU runs over the concatenations.
pub fn matching_layer<F: Scalar>(
    g: &mut Graph<F>,
    fwd: &GruParams,
    bwd: &GruParams,
    attn: &AttentionParams,
    bg: &EncodedSeq,
    ctx_keys: &AttnKeys,
) -> Result<EncodedSeq> {
    let mut inputs = Vec::with_capacity(bg.rows.len());
    for t in 0..bg.rows.len() {
        if t < bg.len {
            let (_, c) = cross_attention(g, attn, ctx_keys, bg.rows[t])?;
            inputs.push(g.concat(&[bg.rows[t], c])?);
        } else {
            inputs.push(g.zeros(&[fwd.input_dim]));
        }
    }
    bigru_over_inputs(g, fwd, bwd, &inputs, bg.len)
}
