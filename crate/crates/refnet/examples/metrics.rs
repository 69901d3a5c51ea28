//! Score a few hand-built hypothesis/reference pairs with BLEU-4,
//! ROUGE-1/2/L, and span F1.

use refnet::eval::{
    corpus_bleu4, corpus_rouge, span_f1_sample, RougeKind, DEFAULT_ROUGE_BETA,
};

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(|t| t.to_string()).collect()
}

fn main() -> refnet::Result<()> {
    let pairs = [
        ("it made $ 279 , 167 , 575 at the box office .", "it made $ 279 , 167 , 575 ."),
        ("i loved the part where bond arrives in st . petersburg", "bond arrives in st . petersburg and meets his contact"),
        ("the answer is w1 w2 w3 .", "it is w4 w5 ."),
    ];
    for (hyp, rf) in pairs {
        let h = vec![toks(hyp)];
        let r = vec![vec![toks(rf)]];
        println!("hyp: {hyp}\nref: {rf}");
        println!("  BLEU-4  {:.2}", 100.0 * corpus_bleu4(&h, &r)?);
        for (name, kind) in [("ROUGE-1", RougeKind::R1), ("ROUGE-2", RougeKind::R2), ("ROUGE-L", RougeKind::L)] {
            println!(
                "  {name} {:.2}",
                100.0 * corpus_rouge(kind, &h, &r, DEFAULT_ROUGE_BETA)?
            );
        }
        println!();
    }

    let predicted = toks("bond arrives in st . petersburg");
    let gold = toks("bond arrives in st . petersburg and meets his cia contact");
    println!(
        "span F1 of a partial span match: {:.2}",
        100.0 * span_f1_sample(Some(&predicted), &[gold])
    );
    Ok(())
}
