use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, WvlpError};
use crate::nnmath::DenseArray;

pub const CLS: u32 = 0;
pub const MASK: u32 = 1;
pub const QUERY: u32 = 2;
pub const N_SPECIALS: usize = 3;

/// What a token id stands for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Special,
    Object(usize),
    Attribute(usize),
    Filler(usize),
}

/// Closed vocabulary: specials, then one token per object class, one per
/// attribute class, then filler words. Ids are dense in `[0, size)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordVocab {
    pub n_objects: usize,
    pub n_attributes: usize,
    pub n_fillers: usize,
}

impl WordVocab {
    pub fn size(&self) -> usize {
        N_SPECIALS + self.n_objects + self.n_attributes + self.n_fillers
    }

    pub fn n_words(&self) -> usize {
        self.n_objects + self.n_attributes + self.n_fillers
    }

    pub fn object_token(&self, o: usize) -> u32 {
        debug_assert!(o < self.n_objects);
        (N_SPECIALS + o) as u32
    }

    pub fn attribute_token(&self, a: usize) -> u32 {
        debug_assert!(a < self.n_attributes);
        (N_SPECIALS + self.n_objects + a) as u32
    }

    pub fn filler_token(&self, f: usize) -> u32 {
        debug_assert!(f < self.n_fillers);
        (N_SPECIALS + self.n_objects + self.n_attributes + f) as u32
    }

    pub fn kind(&self, token: u32) -> TokenKind {
        let t = token as usize;
        if t < N_SPECIALS {
            TokenKind::Special
        } else if t < N_SPECIALS + self.n_objects {
            TokenKind::Object(t - N_SPECIALS)
        } else if t < N_SPECIALS + self.n_objects + self.n_attributes {
            TokenKind::Attribute(t - N_SPECIALS - self.n_objects)
        } else {
            TokenKind::Filler(t - N_SPECIALS - self.n_objects - self.n_attributes)
        }
    }

    pub fn is_attribute(&self, token: u32) -> bool {
        matches!(self.kind(token), TokenKind::Attribute(_))
    }

    /// Object class of an object-word token.
    pub fn object_class(&self, token: u32) -> Option<usize> {
        match self.kind(token) {
            TokenKind::Object(o) => Some(o),
            _ => None,
        }
    }

    pub fn name(&self, token: u32) -> String {
        match self.kind(token) {
            TokenKind::Special => ["[CLS]", "[MASK]", "?"][token as usize].to_string(),
            TokenKind::Object(o) => format!("obj{o}"),
            TokenKind::Attribute(a) => format!("attr{a}"),
            TokenKind::Filler(f) => format!("w{f}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub seed: u64,
    pub n_objects: usize,
    pub n_attributes: usize,
    pub d_v: usize,
    pub n_fillers: usize,
    /// Head count of the last hallucinator layer; `d_v` must be divisible by it.
    pub last_layer_heads: usize,
}

/// Latent concept space the synthetic detector and captions are drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptWorld {
    pub seed: u64,
    pub d_v: usize,
    /// `[n_objects, d_v]`, unit-norm rows.
    pub object_prototypes: DenseArray<f32>,
    /// `[n_attributes, d_v]`, rows of norm 0.5.
    pub attribute_offsets: DenseArray<f32>,
    pub vocab: WordVocab,
}

pub const ATTRIBUTE_OFFSET_NORM: f64 = 0.5;

fn random_directions(rng: &mut ChaCha8Rng, n: usize, d: usize, norm: f64) -> DenseArray<f32> {
    let mut out = Vec::with_capacity(n * d);
    for _ in 0..n {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.extend(v.iter().map(|x| (x / len * norm) as f32));
    }
    DenseArray::matrix(n, d, out)
}

pub fn gen_world(spec: &WorldSpec) -> Result<ConceptWorld> {
    if spec.n_objects == 0 || spec.n_attributes == 0 || spec.n_fillers == 0 {
        return Err(WvlpError::Config(
            "object, attribute and filler counts must be ≥ 1".into(),
        ));
    }
    if spec.d_v < 8 {
        return Err(WvlpError::Config(format!(
            "d_v = {} is below the minimum of 8",
            spec.d_v
        )));
    }
    if spec.last_layer_heads == 0 || !spec.d_v.is_multiple_of(spec.last_layer_heads) {
        return Err(WvlpError::Config(format!(
            "d_v = {} is not divisible by the last hallucinator layer's {} heads",
            spec.d_v, spec.last_layer_heads
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let object_prototypes = random_directions(&mut rng, spec.n_objects, spec.d_v, 1.0);
    let attribute_offsets =
        random_directions(&mut rng, spec.n_attributes, spec.d_v, ATTRIBUTE_OFFSET_NORM);
    Ok(ConceptWorld {
        seed: spec.seed,
        d_v: spec.d_v,
        object_prototypes,
        attribute_offsets,
        vocab: WordVocab {
            n_objects: spec.n_objects,
            n_attributes: spec.n_attributes,
            n_fillers: spec.n_fillers,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> WorldSpec {
        WorldSpec {
            seed,
            n_objects: 8,
            n_attributes: 4,
            d_v: 32,
            n_fillers: 10,
            last_layer_heads: 4,
        }
    }

    #[test]
    fn vocabulary_arithmetic() {
        let w = gen_world(&spec(1)).unwrap();
        assert_eq!(w.vocab.n_words(), 22);
        assert_eq!(w.vocab.size(), 22 + N_SPECIALS);
        let mut all: Vec<u32> = (0..8).map(|o| w.vocab.object_token(o)).collect();
        all.extend((0..4).map(|a| w.vocab.attribute_token(a)));
        all.extend((0..10).map(|f| w.vocab.filler_token(f)));
        all.extend([CLS, MASK, QUERY]);
        all.sort();
        assert_eq!(all, (0..25).collect::<Vec<u32>>());
        assert_eq!(
            w.vocab.kind(w.vocab.attribute_token(3)),
            TokenKind::Attribute(3)
        );
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        assert_eq!(gen_world(&spec(1)).unwrap(), gen_world(&spec(1)).unwrap());
        let (a, b) = (gen_world(&spec(1)).unwrap(), gen_world(&spec(2)).unwrap());
        assert!(a.object_prototypes.max_abs_diff(&b.object_prototypes) > 0.0);
    }

    #[test]
    fn norms_and_distinctness() {
        let w = gen_world(&spec(3)).unwrap();
        for r in 0..8 {
            let n: f32 = w
                .object_prototypes
                .row(r)
                .iter()
                .map(|x| x * x)
                .sum::<f32>()
                .sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
        for r in 0..4 {
            let n: f32 = w
                .attribute_offsets
                .row(r)
                .iter()
                .map(|x| x * x)
                .sum::<f32>()
                .sqrt();
            assert!((n - 0.5).abs() < 1e-5);
        }
        for i in 0..8 {
            for j in i + 1..8 {
                let d: f32 = w
                    .object_prototypes
                    .row(i)
                    .iter()
                    .zip(w.object_prototypes.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                assert!(d > 0.0);
            }
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut s = spec(1);
        s.d_v = 30;
        assert!(matches!(gen_world(&s), Err(WvlpError::Config(_))));
        let mut s = spec(1);
        s.d_v = 4;
        s.last_layer_heads = 1;
        assert!(gen_world(&s).is_err());
        let mut s = spec(1);
        s.n_objects = 0;
        assert!(gen_world(&s).is_err());
    }
}
