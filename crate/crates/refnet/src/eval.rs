//! Corpus-level metrics: BLEU-4, ROUGE-1/2/L, span F1, and average response
//! length, with single-reference (SR) and multi-reference (MR) handling.
//!
//! Scores are reported in [0, 1]; display layers multiply by 100.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BLEU_SMOOTH_EPS: f64 = 1e-9;
pub const DEFAULT_ROUGE_BETA: f64 = 1.2;

/// Which reference length feeds the brevity penalty under multiple
/// references. Shortest keeps corpus scores monotone in the reference set
/// (adding references can never lower the score); closest is the other
/// common convention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BrevityMode {
    #[default]
    Shortest,
    Closest,
}

impl std::str::FromStr for BrevityMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "shortest" => Ok(BrevityMode::Shortest),
            "closest" => Ok(BrevityMode::Closest),
            other => Err(format!("unknown brevity mode `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RefMode {
    SR,
    MR,
}

impl std::str::FromStr for RefMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "SR" | "sr" => Ok(RefMode::SR),
            "MR" | "mr" => Ok(RefMode::MR),
            other => Err(format!("unknown reference mode `{other}` (expected SR or MR)")),
        }
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut map: HashMap<&[String], u64> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *map.entry(w).or_insert(0) += 1;
        }
    }
    map
}

/// Corpus-level BLEU-4 with default brevity handling.
pub fn corpus_bleu4(hypotheses: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64> {
    corpus_bleu4_with(hypotheses, references, BrevityMode::default())
}

/// Corpus-level BLEU-4: modified n-gram precisions with per-reference
/// clipping, a brevity penalty from the selected reference length (ties to
/// the shorter), zero precisions smoothed to a tiny epsilon.
pub fn corpus_bleu4_with(
    hypotheses: &[Vec<String>],
    references: &[Vec<Vec<String>>],
    brevity: BrevityMode,
) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Contract(format!(
            "hypothesis count {} != reference count {}",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matched = [0u64; 4];
    let mut total = [0u64; 4];
    let mut hyp_len = 0u64;
    let mut ref_len = 0u64;
    for (hyp, refs) in hypotheses.iter().zip(references.iter()) {
        if refs.is_empty() {
            return Err(Error::Contract("sample with zero references".into()));
        }
        hyp_len += hyp.len() as u64;
        let chosen = match brevity {
            BrevityMode::Shortest => refs.iter().map(|r| r.len()).min().unwrap(),
            BrevityMode::Closest => refs
                .iter()
                .map(|r| r.len())
                .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
                .unwrap(),
        };
        ref_len += chosen as u64;
        for n in 1..=4 {
            let hc = ngram_counts(hyp, n);
            if hc.is_empty() {
                continue;
            }
            let refs_counts: Vec<HashMap<&[String], u64>> =
                refs.iter().map(|r| ngram_counts(r, n)).collect();
            for (gram, &c) in &hc {
                let clip = refs_counts
                    .iter()
                    .map(|rc| rc.get(gram).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                matched[n - 1] += c.min(clip);
                total[n - 1] += c;
            }
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        let p = if total[n] == 0 || matched[n] == 0 {
            BLEU_SMOOTH_EPS
        } else {
            matched[n] as f64 / total[n] as f64
        };
        log_sum += p.ln();
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(bp * (log_sum / 4.0).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RougeKind {
    R1,
    R2,
    L,
}

fn f_measure(p: f64, r: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    if p <= 0.0 || r <= 0.0 {
        return 0.0;
    }
    (1.0 + b2) * p * r / (r + b2 * p)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Per-sample ROUGE against one reference.
pub fn rouge_sample(kind: RougeKind, hyp: &[String], rf: &[String], beta: f64) -> f64 {
    match kind {
        RougeKind::R1 | RougeKind::R2 => {
            let n = if kind == RougeKind::R1 { 1 } else { 2 };
            let hc = ngram_counts(hyp, n);
            let rc = ngram_counts(rf, n);
            let hyp_total: u64 = hc.values().sum();
            let ref_total: u64 = rc.values().sum();
            if hyp_total == 0 || ref_total == 0 {
                return 0.0;
            }
            let overlap: u64 = hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum();
            f_measure(
                overlap as f64 / hyp_total as f64,
                overlap as f64 / ref_total as f64,
                beta,
            )
        }
        RougeKind::L => {
            if hyp.is_empty() || rf.is_empty() {
                return 0.0;
            }
            let l = lcs_len(hyp, rf) as f64;
            f_measure(l / hyp.len() as f64, l / rf.len() as f64, beta)
        }
    }
}

/// Mean per-sample ROUGE; in MR mode each sample takes its best reference.
pub fn corpus_rouge(
    kind: RougeKind,
    hypotheses: &[Vec<String>],
    references: &[Vec<Vec<String>>],
    beta: f64,
) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Contract(format!(
            "hypothesis count {} != reference count {}",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (hyp, refs) in hypotheses.iter().zip(references.iter()) {
        if refs.is_empty() {
            return Err(Error::Contract("sample with zero references".into()));
        }
        sum += refs
            .iter()
            .map(|r| rouge_sample(kind, hyp, r, beta))
            .fold(0.0, f64::max);
    }
    Ok(sum / hypotheses.len() as f64)
}

/// Token-overlap F1 between a predicted span and the best gold span; no
/// prediction scores zero.
pub fn span_f1_sample(predicted: Option<&[String]>, golds: &[Vec<String>]) -> f64 {
    let Some(pred) = predicted else {
        return 0.0;
    };
    if pred.is_empty() {
        return 0.0;
    }
    let mut best = 0.0f64;
    let mut pred_counts: HashMap<&str, i64> = HashMap::new();
    for t in pred {
        *pred_counts.entry(t.as_str()).or_insert(0) += 1;
    }
    for gold in golds {
        if gold.is_empty() {
            continue;
        }
        let mut gold_counts: HashMap<&str, i64> = HashMap::new();
        for t in gold {
            *gold_counts.entry(t.as_str()).or_insert(0) += 1;
        }
        let overlap: i64 = pred_counts
            .iter()
            .map(|(t, &c)| c.min(gold_counts.get(t).copied().unwrap_or(0)))
            .sum();
        let p = overlap as f64 / pred.len() as f64;
        let r = overlap as f64 / gold.len() as f64;
        best = best.max(f_measure(p, r, 1.0));
    }
    best
}

/// One decoded response prepared for scoring.
#[derive(Clone, Debug)]
pub struct Hypothesis {
    pub tokens: Vec<String>,
    /// Surface tokens of the first referenced unit, when the decode emitted
    /// one.
    pub first_span: Option<Vec<String>>,
}

/// Scoring view of one test sample.
#[derive(Clone, Debug)]
pub struct GoldSample {
    pub references: Vec<Vec<String>>,
    pub gold_spans: Vec<Vec<String>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: RefMode,
    pub bleu4: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub span_f1: f64,
    pub avg_length: f64,
    pub n: usize,
}

/// All metrics over an aligned decode/test pair.
pub fn evaluate_corpus(
    hypotheses: &[Hypothesis],
    golds: &[GoldSample],
    mode: RefMode,
    rouge_beta: f64,
) -> Result<EvalReport> {
    evaluate_corpus_with(hypotheses, golds, mode, rouge_beta, BrevityMode::default())
}

pub fn evaluate_corpus_with(
    hypotheses: &[Hypothesis],
    golds: &[GoldSample],
    mode: RefMode,
    rouge_beta: f64,
    brevity: BrevityMode,
) -> Result<EvalReport> {
    if hypotheses.len() != golds.len() {
        return Err(Error::Contract(format!(
            "decode count {} != test count {}",
            hypotheses.len(),
            golds.len()
        )));
    }
    let hyp_tokens: Vec<Vec<String>> = hypotheses.iter().map(|h| h.tokens.clone()).collect();
    let refs: Vec<Vec<Vec<String>>> = golds.iter().map(|g| g.references.clone()).collect();

    let bleu4 = corpus_bleu4_with(&hyp_tokens, &refs, brevity)?;
    let rouge1 = corpus_rouge(RougeKind::R1, &hyp_tokens, &refs, rouge_beta)?;
    let rouge2 = corpus_rouge(RougeKind::R2, &hyp_tokens, &refs, rouge_beta)?;
    let rouge_l = corpus_rouge(RougeKind::L, &hyp_tokens, &refs, rouge_beta)?;

    let mut f1_sum = 0.0;
    let mut f1_n = 0usize;
    for (h, g) in hypotheses.iter().zip(golds.iter()) {
        if g.gold_spans.is_empty() {
            continue;
        }
        let golds_considered: &[Vec<String>] = match mode {
            RefMode::SR => &g.gold_spans[..1],
            RefMode::MR => &g.gold_spans,
        };
        f1_sum += span_f1_sample(h.first_span.as_deref(), golds_considered);
        f1_n += 1;
    }
    let span_f1 = if f1_n == 0 { 0.0 } else { f1_sum / f1_n as f64 };

    let avg_length = if hypotheses.is_empty() {
        0.0
    } else {
        hyp_tokens.iter().map(|t| t.len() as f64).sum::<f64>() / hypotheses.len() as f64
    };

    Ok(EvalReport {
        mode,
        bleu4,
        rouge1,
        rouge2,
        rouge_l,
        span_f1,
        avg_length,
        n: hypotheses.len(),
    })
}
