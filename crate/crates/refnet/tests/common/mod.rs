//! Shared test support: independent second implementations of the metrics
//! (structured differently from the library, same definitions) and small
//! fixtures.

use std::collections::HashMap;

/// Second BLEU-4 implementation: string-keyed n-gram tables, per-n scanning
/// loops, shortest-reference brevity, epsilon on zero precisions.
pub fn oracle_bleu4(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> f64 {
    fn key(w: &[String]) -> String {
        w.join("\u{1}")
    }
    let mut matched = [0.0f64; 4];
    let mut total = [0.0f64; 4];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (h, rs) in hyps.iter().zip(refs.iter()) {
        hyp_len += h.len();
        ref_len += rs.iter().map(|r| r.len()).min().unwrap();
        for n in 1..=4usize {
            if h.len() < n {
                continue;
            }
            let mut counts: HashMap<String, usize> = HashMap::new();
            for i in 0..=h.len() - n {
                *counts.entry(key(&h[i..i + n])).or_default() += 1;
            }
            for (k, v) in &counts {
                let clip = rs
                    .iter()
                    .map(|r| {
                        if r.len() < n {
                            0
                        } else {
                            (0..=r.len() - n).filter(|&i| key(&r[i..i + n]) == *k).count()
                        }
                    })
                    .max()
                    .unwrap_or(0);
                matched[n - 1] += (*v).min(clip) as f64;
                total[n - 1] += *v as f64;
            }
        }
    }
    if hyp_len == 0 {
        return 0.0;
    }
    let mut log_p = 0.0;
    for n in 0..4 {
        let p = if total[n] == 0.0 || matched[n] == 0.0 {
            1e-9
        } else {
            matched[n] / total[n]
        };
        log_p += p.ln() / 4.0;
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    bp * log_p.exp()
}

fn oracle_f(p: f64, r: f64, beta: f64) -> f64 {
    if p <= 0.0 || r <= 0.0 {
        0.0
    } else {
        (1.0 + beta * beta) * p * r / (r + beta * beta * p)
    }
}

/// Second ROUGE-N implementation: sorted n-gram lists with two-pointer
/// overlap counting.
pub fn oracle_rouge_n(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>], n: usize, beta: f64) -> f64 {
    fn grams(t: &[String], n: usize) -> Vec<String> {
        if t.len() < n {
            return Vec::new();
        }
        let mut v: Vec<String> = (0..=t.len() - n).map(|i| t[i..i + n].join("\u{1}")).collect();
        v.sort();
        v
    }
    let mut sum = 0.0;
    for (h, rs) in hyps.iter().zip(refs.iter()) {
        let hg = grams(h, n);
        let mut best = 0.0f64;
        for r in rs {
            let rg = grams(r, n);
            if hg.is_empty() || rg.is_empty() {
                continue;
            }
            let (mut i, mut j, mut overlap) = (0usize, 0usize, 0usize);
            while i < hg.len() && j < rg.len() {
                match hg[i].cmp(&rg[j]) {
                    std::cmp::Ordering::Equal => {
                        overlap += 1;
                        i += 1;
                        j += 1;
                    }
                    std::cmp::Ordering::Less => i += 1,
                    std::cmp::Ordering::Greater => j += 1,
                }
            }
            best = best.max(oracle_f(
                overlap as f64 / hg.len() as f64,
                overlap as f64 / rg.len() as f64,
                beta,
            ));
        }
        sum += best;
    }
    sum / hyps.len() as f64
}

/// Second ROUGE-L implementation: recursive memoized LCS.
pub fn oracle_rouge_l(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>], beta: f64) -> f64 {
    fn lcs(a: &[String], b: &[String], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() || j == b.len() {
            return 0;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if a[i] == b[j] {
            1 + lcs(a, b, i + 1, j + 1, memo)
        } else {
            lcs(a, b, i + 1, j, memo).max(lcs(a, b, i, j + 1, memo))
        };
        memo.insert((i, j), v);
        v
    }
    let mut sum = 0.0;
    for (h, rs) in hyps.iter().zip(refs.iter()) {
        let mut best = 0.0f64;
        for r in rs {
            if h.is_empty() || r.is_empty() {
                continue;
            }
            let mut memo = HashMap::new();
            let l = lcs(h, r, 0, 0, &mut memo) as f64;
            best = best.max(oracle_f(l / h.len() as f64, l / r.len() as f64, beta));
        }
        sum += best;
    }
    sum / hyps.len() as f64
}

pub fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(|t| t.to_string()).collect()
}
