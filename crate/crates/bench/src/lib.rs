//! Shared fixtures for the benchmarks in `benches/`.

use gareader::corpus::{synth_generate, EncodedExample, SynthConfig, Vocab};
use gareader::{Model, ReaderConfig};

/// A freshly initialised reader and a few encoded two-hop examples.
pub fn fixture(hops: usize, hidden: usize, use_char: bool) -> (Model, Vec<EncodedExample>) {
    let data = synth_generate(&SynthConfig {
        n_examples: 16,
        hops: 2,
        ..SynthConfig::default()
    })
    .expect("synthetic corpus");
    let vocab = Vocab::build(&data);
    let encoded = data.iter().map(|e| vocab.encode(e)).collect();
    let config = ReaderConfig {
        hops,
        hidden,
        word_dim: hidden,
        use_char,
        dropout: 0.0,
        ..ReaderConfig::default()
    };
    let model = Model::new(config, vocab, 1).expect("valid config");
    (model, encoded)
}
