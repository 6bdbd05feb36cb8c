//! Shared fixtures for the benchmarks.

use kblam_core::adapters::{AdapterSet, TokenStore};
use kblam_core::embed::HashNgram;
use kblam_core::kb::{synthesize_kb, KnowledgeBase, SynthesisConfig};
use kblam_core::model::{Model, ModelConfig, TransformerWeights};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub model: Model,
    pub adapters: AdapterSet,
    pub kb: KnowledgeBase,
    pub store: TokenStore,
    pub backend: HashNgram,
}

/// Randomly initialized desk-sized model with `names × 3` encoded triples.
pub fn fixture(names: usize) -> Fixture {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let weights = TransformerWeights::init(&cfg, &mut rng);
    let backend = HashNgram::new(256).expect("valid dim");
    let adapters = AdapterSet::init(&cfg, &weights, 256, &mut rng);
    let kb = synthesize_kb(&SynthesisConfig {
        num_names: names,
        ..SynthesisConfig::default()
    })
    .expect("valid synthesis config");
    let store = TokenStore::build(&kb, &backend, &adapters).expect("encodable KB");
    Fixture {
        model: Model::new(cfg, weights).expect("valid model"),
        adapters,
        kb,
        store,
        backend,
    }
}
