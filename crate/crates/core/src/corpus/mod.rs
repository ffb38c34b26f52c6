//! Seeded synthetic worlds, scenes, captions and downstream instances.

pub mod downstream;
pub mod io;
pub mod scene;
pub mod split;
pub mod world;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use downstream::{gen_downstream_instance, TaskInstance, TaskKind};
pub use io::{corpus_from_bytes, corpus_to_bytes, load_corpus, save_corpus};
pub use scene::{
    gen_caption, gen_scene, CaptionSample, Geometry, Region, SceneConfig, SceneSample,
};
pub use split::{
    gen_corpus, make_batches, Batch, BatchStream, Corpus, CorpusConfig, CorpusSplit, PairedBatch,
    SplitKind, UnpairedBatch,
};
pub use world::{
    gen_world, ConceptWorld, TokenKind, WordVocab, WorldSpec, CLS, MASK, N_SPECIALS, QUERY,
};

/// Independent RNG stream for `(seed, parts...)`, mixed with SplitMix64.
pub fn derived_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h = splitmix(h ^ splitmix(p.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    ChaCha8Rng::seed_from_u64(splitmix(h))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
