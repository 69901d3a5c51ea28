//! Decoding: the greedy loop that switches between emitting a background
//! span and generating a token, forced-mode ablations, batch decoding, and an
//! interactive terminal session.

use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore};
use crate::corpus::{encode_sample, EncodeLimits, EncodedSample, RawSample, Vocabulary, EOS};
use crate::decoder::{
    self, argmax_span, argmax_span_sequential, generation_distribution, reference_pointers,
    step_heads,
};
use crate::error::{Error, Result};
use crate::eval::Hypothesis;
use crate::model::{build_sample_ctx, ModelParams};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitKind {
    Ref,
    Pred,
    Copy,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecodedUnit {
    pub kind: UnitKind,
    pub text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bg_start: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bg_end: Option<usize>,
    /// Set when a span hit the length budget and was cut short.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecodeResult {
    pub units: Vec<DecodedUnit>,
    /// Flat emitted tokens, EOS excluded.
    pub surface: Vec<String>,
    /// Switcher triple (P(r), P(g_p), P(g_c)) of every step, including the
    /// step that emitted EOS.
    pub switcher: Vec<[f64; 3]>,
    pub ended_by_eos: bool,
}

impl DecodeResult {
    pub fn hypothesis(&self) -> Hypothesis {
        Hypothesis {
            tokens: self.surface.clone(),
            first_span: self
                .units
                .iter()
                .find(|u| u.kind == UnitKind::Ref)
                .map(|u| u.text.split_whitespace().map(|t| t.to_string()).collect()),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DecodeLimits {
    pub max_len: usize,
    pub max_span_len: usize,
}

impl Default for DecodeLimits {
    fn default() -> Self {
        DecodeLimits {
            max_len: 40,
            max_span_len: 30,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    /// Reference when P(r) ≥ P(g), otherwise generate.
    Combined,
    /// Always emit the argmax span; stops after one span unless looping.
    ForceReference { loop_spans: bool },
    /// Token-by-token with the switcher renormalized over (P(g_p), P(g_c)).
    ForceGeneration,
}

#[derive(Clone, Copy, Debug)]
pub struct DecodeOptions {
    pub limits: DecodeLimits,
    pub mode: DecodeMode,
    /// Per-hop argmax instead of the joint product argmax.
    pub sequential_span_argmax: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            limits: DecodeLimits::default(),
            mode: DecodeMode::Combined,
            sequential_span_argmax: false,
        }
    }
}

fn argmax_ascending<F: Scalar>(values: &[F]) -> usize {
    let mut best = 0usize;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding of one encoded input. At each step the switcher picks
/// span reference or token generation; spans advance the state token by
/// token, so the loop continues from the full span semantics.
pub fn greedy_decode<F: Scalar>(
    store: &ParamStore<F>,
    params: &ModelParams,
    sample: &EncodedSample,
    vocab: &Vocabulary,
    opts: &DecodeOptions,
) -> Result<DecodeResult> {
    let mut g = Graph::new(store);
    let ctx = build_sample_ctx(&mut g, params, sample)?;
    let mut st = decoder::initial_step_state(&mut g, params, &ctx)?;
    let mut prev_unit = crate::corpus::Unit::Token(crate::corpus::SOS);

    let mut units: Vec<DecodedUnit> = Vec::new();
    let mut surface: Vec<String> = Vec::new();
    let mut switcher_log: Vec<[f64; 3]> = Vec::new();
    let mut ended_by_eos = false;

    while surface.len() < opts.limits.max_len {
        st = decoder::advance_unit(&mut g, params, &ctx, &st, prev_unit)?;
        let heads = step_heads(&mut g, params, &st)?;
        let sw = g.value(heads.switcher);
        let (p_r, p_gp, p_gc) = (sw[0], sw[1], sw[2]);
        switcher_log.push([p_r.as_f64(), p_gp.as_f64(), p_gc.as_f64()]);

        let reference = match opts.mode {
            DecodeMode::Combined => p_r >= p_gp + p_gc,
            DecodeMode::ForceReference { .. } => true,
            DecodeMode::ForceGeneration => false,
        };

        if reference {
            let ptrs = reference_pointers(&mut g, params, &ctx, heads.o1)?;
            let a1 = g.value(ptrs.alpha1);
            let a2 = g.value(ptrs.alpha2);
            let (s, e, _) = if opts.sequential_span_argmax {
                argmax_span_sequential(a1, a2, &ctx.hm.mask, opts.limits.max_span_len)
            } else {
                argmax_span(a1, a2, &ctx.hm.mask, opts.limits.max_span_len)
            };
            let budget = opts.limits.max_len - surface.len();
            let (e, truncated) = if e - s + 1 > budget {
                (s + budget - 1, true)
            } else {
                (e, false)
            };
            let text: Vec<String> = (s..=e)
                .map(|p| sample.surface_of(vocab, sample.bg_copy_ids[p]))
                .collect();
            surface.extend(text.iter().cloned());
            units.push(DecodedUnit {
                kind: UnitKind::Ref,
                text: text.join(" "),
                bg_start: Some(s),
                bg_end: Some(e),
                truncated,
            });
            prev_unit = crate::corpus::Unit::Span { start: s, end: e };
            if let DecodeMode::ForceReference { loop_spans: false } = opts.mode {
                break;
            }
        } else {
            let (mp, mc) = match opts.mode {
                DecodeMode::ForceGeneration => {
                    let z = p_gp + p_gc;
                    (p_gp / z, p_gc / z)
                }
                _ => (p_gp, p_gc),
            };
            let dist = generation_distribution(
                g.value(heads.vocab_probs),
                g.value(st.alpha_sm),
                mp,
                mc,
                &ctx.bg_copy_ids,
                ctx.n_ext,
            );
            let w = argmax_ascending(&dist) as u32;
            if w == EOS {
                ended_by_eos = true;
                break;
            }
            let vocab_part = if (w as usize) < params.dims.vocab {
                mp * g.value(heads.vocab_probs)[w as usize]
            } else {
                F::zero()
            };
            let copy_part = dist[w as usize] - vocab_part;
            let text = sample.surface_of(vocab, w);
            if copy_part > vocab_part {
                let alpha = g.value(st.alpha_sm);
                let pos = ctx
                    .copy_positions
                    .get(&w)
                    .and_then(|ps| {
                        ps.iter()
                            .copied()
                            .max_by(|&a, &b| alpha[a].partial_cmp(&alpha[b]).unwrap().then(b.cmp(&a)))
                    })
                    .unwrap_or(0);
                units.push(DecodedUnit {
                    kind: UnitKind::Copy,
                    text: text.clone(),
                    bg_start: Some(pos),
                    bg_end: Some(pos),
                    truncated: false,
                });
            } else {
                units.push(DecodedUnit {
                    kind: UnitKind::Pred,
                    text: text.clone(),
                    bg_start: None,
                    bg_end: None,
                    truncated: false,
                });
            }
            surface.push(text);
            prev_unit = crate::corpus::Unit::Token(w);
        }
    }

    Ok(DecodeResult {
        units,
        surface,
        switcher: switcher_log,
        ended_by_eos,
    })
}

/// Decodes a batch in parallel with read-only parameters; output order is
/// the input order.
pub fn decode_corpus<F: Scalar>(
    store: &ParamStore<F>,
    params: &ModelParams,
    samples: &[EncodedSample],
    vocab: &Vocabulary,
    opts: &DecodeOptions,
) -> Result<Vec<DecodeResult>> {
    samples
        .par_iter()
        .map(|s| greedy_decode(store, params, s, vocab, opts))
        .collect()
}

/// Wire form of one batch-decode line.
#[derive(Serialize, Deserialize)]
pub struct DecodeLine {
    pub id: usize,
    pub response: String,
    pub units: Vec<DecodedUnit>,
    pub switcher: Vec<[f64; 3]>,
}

impl DecodeLine {
    pub fn from_result(id: usize, r: &DecodeResult) -> Self {
        DecodeLine {
            id,
            response: r.surface.join(" "),
            units: r.units.clone(),
            switcher: r.switcher.clone(),
        }
    }
}

/// Renders a decoded response with referenced spans bracketed, plus one
/// offset note per referenced span.
pub fn render_decode(result: &DecodeResult) -> Vec<String> {
    let mut pieces = Vec::new();
    for u in &result.units {
        match u.kind {
            UnitKind::Ref => pieces.push(format!("[{}]", u.text)),
            _ => pieces.push(u.text.clone()),
        }
    }
    let mut lines = vec![format!("response: {}", pieces.join(" "))];
    for u in &result.units {
        if u.kind == UnitKind::Ref {
            let mark = if u.truncated { ", truncated" } else { "" };
            lines.push(format!(
                "  span ({}, {}){}: {}",
                u.bg_start.unwrap(),
                u.bg_end.unwrap(),
                mark,
                u.text
            ));
        }
    }
    lines
}

/// Line-oriented interactive session over any reader/writer pair. Keeps a
/// rolling dialogue context; the encoder tail-truncates it per its limit.
pub struct ChatSession<'a, F: Scalar> {
    pub store: &'a ParamStore<F>,
    pub params: &'a ModelParams,
    pub vocab: &'a Vocabulary,
    pub background: Vec<String>,
    pub limits: EncodeLimits,
    pub opts: DecodeOptions,
}

impl<'a, F: Scalar> ChatSession<'a, F> {
    pub fn respond(&self, context: &[Vec<String>]) -> Result<DecodeResult> {
        let raw = RawSample {
            background: self.background.clone(),
            context: context.to_vec(),
            response: Vec::new(),
            spans: Vec::new(),
            references: Vec::new(),
        };
        let sample = encode_sample(&raw, self.vocab, self.limits)?;
        greedy_decode(self.store, self.params, &sample, self.vocab, &self.opts)
    }

    pub fn run(&mut self, input: impl BufRead, mut out: impl Write) -> Result<()> {
        if self.background.is_empty() {
            return Err(Error::Data("background is empty after tokenization".into()));
        }
        writeln!(
            out,
            "background loaded ({} tokens). /reset, /background <file>, /quit",
            self.background.len()
        )?;
        let mut context: Vec<Vec<String>> = Vec::new();
        for line in input.lines() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            if trimmed == "/quit" {
                writeln!(out, "bye")?;
                return Ok(());
            }
            if trimmed == "/reset" {
                context.clear();
                writeln!(out, "context cleared")?;
                continue;
            }
            if let Some(path) = trimmed.strip_prefix("/background ") {
                let text = std::fs::read_to_string(Path::new(path.trim()))
                    .map_err(|e| Error::Data(format!("cannot read background {path}: {e}")))?;
                let tokens = crate::corpus::tokenize(&text);
                if tokens.is_empty() {
                    writeln!(out, "background file tokenized to nothing; keeping previous")?;
                    continue;
                }
                self.background = tokens;
                context.clear();
                writeln!(out, "background loaded ({} tokens)", self.background.len())?;
                continue;
            }
            context.push(crate::corpus::tokenize(trimmed));
            let result = self.respond(&context)?;
            for l in render_decode(&result) {
                writeln!(out, "{l}")?;
            }
            context.push(result.surface.clone());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SynthConfig;
    use crate::decoder::tests::fixture;
    use crate::model::ModelDims;

    fn tiny_dims(vocab: usize) -> ModelDims {
        ModelDims {
            vocab,
            embed: 6,
            hidden: 5,
            matching_hidden: 5,
            attn: 4,
            untie_pointer_params: false,
        }
    }

    fn tiny_cfg() -> SynthConfig {
        SynthConfig {
            background_len: 9,
            vocab_size: 24,
            span_len_range: (2, 3),
            template_set: 2,
        }
    }

    #[test]
    fn decode_is_deterministic() {
        let f = fixture(41, 3, &tiny_cfg(), tiny_dims);
        let opts = DecodeOptions::default();
        for s in &f.samples {
            let a = greedy_decode(&f.store, &f.params, s, &f.vocab, &opts).unwrap();
            let b = greedy_decode(&f.store, &f.params, s, &f.vocab, &opts).unwrap();
            assert_eq!(a.surface, b.surface);
            assert_eq!(a.switcher, b.switcher);
        }
    }

    #[test]
    fn switch_rule_fidelity_and_provenance() {
        let f = fixture(43, 4, &tiny_cfg(), tiny_dims);
        let opts = DecodeOptions::default();
        for s in &f.samples {
            let r = greedy_decode(&f.store, &f.params, s, &f.vocab, &opts).unwrap();
            // surface equals unit concatenation
            let joined: Vec<String> = r
                .units
                .iter()
                .flat_map(|u| u.text.split_whitespace().map(|t| t.to_string()).collect::<Vec<_>>())
                .collect();
            assert_eq!(joined, r.surface);
            for (u, sw) in r.units.iter().zip(r.switcher.iter()) {
                let is_ref = u.kind == UnitKind::Ref;
                assert_eq!(is_ref, sw[0] >= sw[1] + sw[2]);
                // provenance soundness: recorded offsets hold the text
                if let (Some(a), Some(b)) = (u.bg_start, u.bg_end) {
                    let bg_text: Vec<String> = (a..=b)
                        .map(|p| s.surface_of(&f.vocab, s.bg_copy_ids[p]))
                        .collect();
                    assert_eq!(bg_text.join(" "), u.text);
                }
            }
            assert!(r.surface.len() <= opts.limits.max_len);
        }
    }

    #[test]
    fn saturated_predict_switcher_with_eos_peak_gives_empty_response() {
        let f = fixture(47, 1, &tiny_cfg(), tiny_dims);
        let mut store = f.store.clone();
        // switcher pinned to predicting-generation, vocabulary pinned to EOS
        store.value_mut(f.params.b_f).copy_from_slice(&[-50.0, 50.0, -50.0]);
        for v in store.value_mut(f.params.w_gp) {
            *v = 0.0;
        }
        let bias_len = store.value(f.params.b_gp).len();
        let mut bias = vec![0.0; bias_len];
        bias[EOS as usize] = 50.0;
        store.value_mut(f.params.b_gp).copy_from_slice(&bias);
        let r = greedy_decode(
            &store,
            &f.params,
            &f.samples[0],
            &f.vocab,
            &DecodeOptions::default(),
        )
        .unwrap();
        assert!(r.ended_by_eos);
        assert!(r.surface.is_empty());
        assert_eq!(r.switcher.len(), 1);
    }

    #[test]
    fn saturated_reference_switcher_emits_span_first() {
        let f = fixture(53, 1, &tiny_cfg(), tiny_dims);
        let mut store = f.store.clone();
        store.value_mut(f.params.b_f).copy_from_slice(&[50.0, -50.0, -50.0]);
        let r = greedy_decode(
            &store,
            &f.params,
            &f.samples[0],
            &f.vocab,
            &DecodeOptions::default(),
        )
        .unwrap();
        assert_eq!(r.units[0].kind, UnitKind::Ref);
    }

    #[test]
    fn force_generation_never_references() {
        let f = fixture(59, 3, &tiny_cfg(), tiny_dims);
        let opts = DecodeOptions {
            mode: DecodeMode::ForceGeneration,
            ..DecodeOptions::default()
        };
        for s in &f.samples {
            let r = greedy_decode(&f.store, &f.params, s, &f.vocab, &opts).unwrap();
            assert!(r.units.iter().all(|u| u.kind != UnitKind::Ref));
        }
    }

    #[test]
    fn force_reference_emits_single_background_span() {
        let f = fixture(61, 3, &tiny_cfg(), tiny_dims);
        let opts = DecodeOptions {
            mode: DecodeMode::ForceReference { loop_spans: false },
            ..DecodeOptions::default()
        };
        for s in &f.samples {
            let r = greedy_decode(&f.store, &f.params, s, &f.vocab, &opts).unwrap();
            assert_eq!(r.units.len(), 1);
            assert_eq!(r.units[0].kind, UnitKind::Ref);
            // all emitted tokens are background substrings at the offsets
            let (a, b) = (r.units[0].bg_start.unwrap(), r.units[0].bg_end.unwrap());
            let bg: Vec<String> = (a..=b)
                .map(|p| s.surface_of(&f.vocab, s.bg_copy_ids[p]))
                .collect();
            assert_eq!(r.surface, bg);
        }
    }

    #[test]
    fn span_budget_is_respected_with_truncation_note() {
        let f = fixture(67, 1, &tiny_cfg(), tiny_dims);
        let opts = DecodeOptions {
            limits: DecodeLimits {
                max_len: 2,
                max_span_len: 30,
            },
            mode: DecodeMode::ForceReference { loop_spans: true },
            ..DecodeOptions::default()
        };
        let r = greedy_decode(&f.store, &f.params, &f.samples[0], &f.vocab, &opts).unwrap();
        assert!(r.surface.len() <= 2);
        if r.units[0].truncated {
            let u = &r.units[0];
            assert_eq!(u.bg_end.unwrap() - u.bg_start.unwrap() + 1, 2);
        }
    }

    #[test]
    fn render_brackets_spans_with_offsets() {
        let r = DecodeResult {
            units: vec![
                DecodedUnit {
                    kind: UnitKind::Pred,
                    text: "it".into(),
                    bg_start: None,
                    bg_end: None,
                    truncated: false,
                },
                DecodedUnit {
                    kind: UnitKind::Ref,
                    text: "d e f".into(),
                    bg_start: Some(3),
                    bg_end: Some(5),
                    truncated: false,
                },
            ],
            surface: ["it", "d", "e", "f"].iter().map(|s| s.to_string()).collect(),
            switcher: vec![],
            ended_by_eos: true,
        };
        let lines = render_decode(&r);
        assert!(lines[0].contains("[d e f]"));
        assert!(lines.iter().any(|l| l.contains("(3, 5)")));
    }

    #[test]
    fn chat_session_quits_cleanly_and_bounds_context() {
        let f = fixture(71, 1, &tiny_cfg(), tiny_dims);
        let background: Vec<String> = f.samples[0]
            .bg_copy_ids
            .iter()
            .map(|&id| f.samples[0].surface_of(&f.vocab, id))
            .collect();
        let mut session = ChatSession {
            store: &f.store,
            params: &f.params,
            vocab: &f.vocab,
            background,
            limits: EncodeLimits::default(),
            opts: DecodeOptions::default(),
        };
        let input = b"hello there\nwhat comes after w001 ?\n/reset\n/quit\n" as &[u8];
        let mut out = Vec::new();
        session.run(std::io::BufReader::new(input), &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.contains("response:"));
        assert!(text.contains("context cleared"));
        assert!(text.trim_end().ends_with("bye"));
    }
}
