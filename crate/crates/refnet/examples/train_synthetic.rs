//! End-to-end on a small synthetic corpus: generate, train for a few epochs,
//! then decode held-out samples and show where each emitted unit came from.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use refnet::autodiff::ParamStore;
use refnet::corpus::{build_vocab, encode_sample, synthesize_corpus, EncodeLimits, EncodedSample, SynthConfig};
use refnet::infer::{decode_corpus, render_decode, DecodeOptions};
use refnet::model::{ModelDims, ModelParams};
use refnet::train::{train, TrainConfig};

fn main() -> refnet::Result<()> {
    let synth = SynthConfig {
        background_len: 24,
        vocab_size: 60,
        span_len_range: (3, 4),
        template_set: 2,
    };
    let corpus = synthesize_corpus(11, 700, &synth)?;
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
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = ModelParams::init(&mut store, dims, &mut rng)?;
    println!("{} training samples, {} parameters", train_set.len(), store.total_elements());

    let cfg = TrainConfig {
        epochs: 12,
        learning_rate: 0.004,
        batch_size: 32,
        seed: 1,
        ..TrainConfig::default()
    };
    let outcome = train(
        &mut store,
        &params,
        train_set,
        val_set,
        &vocab,
        &cfg,
        &DecodeOptions::default(),
        |log| {
            println!(
                "epoch {:>2}  loss {:>7.3}  val BLEU {:>5.1}  ({:.1}s)",
                log.epoch,
                log.train_loss,
                100.0 * log.val_bleu,
                log.seconds
            );
        },
    )?;
    println!(
        "\nbest epoch {} with validation BLEU {:.1}\n",
        outcome.best_epoch,
        100.0 * outcome.best_val_bleu
    );

    let decodes = decode_corpus(
        &outcome.best_store,
        &params,
        &val_set[..3],
        &vocab,
        &DecodeOptions::default(),
    )?;
    for (d, s) in decodes.iter().zip(val_set.iter()) {
        println!("gold: {}", s.response_tokens.join(" "));
        for line in render_decode(d) {
            println!("{line}");
        }
        println!();
    }
    Ok(())
}
