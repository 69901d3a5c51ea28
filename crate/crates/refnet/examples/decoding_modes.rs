//! Compare combined decoding against the two forced modes on one trained
//! model: force-reference extracts a single span, force-generation goes
//! token by token, and the combined switch rule mixes both.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use refnet::autodiff::ParamStore;
use refnet::corpus::{build_vocab, encode_sample, synthesize_corpus, EncodeLimits, EncodedSample, SynthConfig};
use refnet::infer::{greedy_decode, DecodeMode, DecodeOptions};
use refnet::model::{ModelDims, ModelParams};
use refnet::train::{train, TrainConfig};

fn main() -> refnet::Result<()> {
    let synth = SynthConfig {
        background_len: 24,
        vocab_size: 60,
        span_len_range: (3, 4),
        template_set: 2,
    };
    let corpus = synthesize_corpus(23, 700, &synth)?;
    let vocab = build_vocab(&corpus, 25_000)?;
    let encoded: Vec<EncodedSample> = corpus
        .iter()
        .map(|r| encode_sample(r, &vocab, EncodeLimits::default()))
        .collect::<refnet::Result<_>>()?;
    let (train_set, val_set) = encoded.split_at(640);

    let dims = ModelDims {
        vocab: vocab.len(),
        embed: 24,
        hidden: 24,
        matching_hidden: 24,
        attn: 24,
        untie_pointer_params: false,
    };
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = ModelParams::init(&mut store, dims, &mut rng)?;
    let cfg = TrainConfig {
        epochs: 12,
        learning_rate: 0.004,
        batch_size: 32,
        seed: 2,
        ..TrainConfig::default()
    };
    let outcome = train(&mut store, &params, train_set, val_set, &vocab, &cfg, &DecodeOptions::default(), |_| {})?;
    let best = &outcome.best_store;

    let modes = [
        ("combined", DecodeMode::Combined),
        ("force reference", DecodeMode::ForceReference { loop_spans: false }),
        ("force generation", DecodeMode::ForceGeneration),
    ];
    for sample in &val_set[..3] {
        println!("gold: {}", sample.response_tokens.join(" "));
        for (name, mode) in modes {
            let opts = DecodeOptions {
                mode,
                ..DecodeOptions::default()
            };
            let d = greedy_decode(best, &params, sample, &vocab, &opts)?;
            println!("  {name:<16} {}", d.surface.join(" "));
        }
        println!();
    }
    Ok(())
}
