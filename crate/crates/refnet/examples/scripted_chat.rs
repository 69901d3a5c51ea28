//! Drive the chat session programmatically: train a small model, then feed
//! it a scripted conversation over one background document.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use refnet::autodiff::ParamStore;
use refnet::corpus::{build_vocab, encode_sample, synthesize_corpus, EncodeLimits, EncodedSample, SynthConfig};
use refnet::infer::{ChatSession, DecodeOptions};
use refnet::model::{ModelDims, ModelParams};
use refnet::train::{train, TrainConfig};

fn main() -> refnet::Result<()> {
    let synth = SynthConfig {
        background_len: 24,
        vocab_size: 60,
        span_len_range: (3, 4),
        template_set: 2,
    };
    let corpus = synthesize_corpus(31, 700, &synth)?;
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
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = ModelParams::init(&mut store, dims, &mut rng)?;
    let cfg = TrainConfig {
        epochs: 12,
        learning_rate: 0.004,
        batch_size: 32,
        seed: 3,
        ..TrainConfig::default()
    };
    let outcome = train(&mut store, &params, train_set, val_set, &vocab, &cfg, &DecodeOptions::default(), |_| {})?;

    // hold a conversation about a held-out background
    let background = corpus[640].background.clone();
    let question = corpus[640].context[0].join(" ");
    let mut session = ChatSession {
        store: &outcome.best_store,
        params: &params,
        vocab: &vocab,
        background,
        limits: EncodeLimits::default(),
        opts: DecodeOptions::default(),
    };
    let script = format!("{question}\n/reset\n/quit\n");
    let mut out = Vec::new();
    session.run(std::io::BufReader::new(script.as_bytes()), &mut out)?;
    print!("{}", String::from_utf8_lossy(&out));
    Ok(())
}
