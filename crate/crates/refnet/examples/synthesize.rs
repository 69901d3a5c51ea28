//! Generate a small synthetic grounded-dialogue corpus and show how samples
//! carry exact span annotations into encoded form.

use refnet::corpus::{
    build_vocab, encode_sample, synthesize_corpus, EncodeLimits, SynthConfig, Unit,
};

fn main() -> refnet::Result<()> {
    let cfg = SynthConfig {
        background_len: 24,
        vocab_size: 40,
        span_len_range: (3, 5),
        template_set: 3,
    };
    let corpus = synthesize_corpus(7, 5, &cfg)?;
    let vocab = build_vocab(&corpus, 25_000)?;
    println!("vocabulary: {} entries\n", vocab.len());

    for (i, sample) in corpus.iter().enumerate() {
        let ann = &sample.spans[0];
        println!("sample {i}");
        println!("  background: {}", sample.background.join(" "));
        println!("  question:   {}", sample.context[0].join(" "));
        println!("  response:   {}", sample.response.join(" "));
        println!(
            "  span:       background[{}..={}] = {:?}",
            ann.bg_start,
            ann.bg_end,
            &sample.background[ann.bg_start..=ann.bg_end].join(" ")
        );
        let encoded = encode_sample(sample, &vocab, EncodeLimits::default())?;
        let units: Vec<String> = encoded
            .response
            .units
            .iter()
            .map(|u| match u {
                Unit::Token(id) => format!("token({})", vocab.token(*id)),
                Unit::Span { start, end } => format!("span({start}, {end})"),
            })
            .collect();
        println!("  units:      {}\n", units.join(" "));
    }
    Ok(())
}
