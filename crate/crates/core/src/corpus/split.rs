use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::derived_rng;
use super::scene::{gen_caption, gen_scene, CaptionSample, SceneConfig, SceneSample};
use super::world::{gen_world, ConceptWorld, WorldSpec};
use crate::error::{Result, WvlpError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SplitKind {
    Pretrain,
    FinetuneTrain,
    FinetuneVal,
    FinetuneTest,
    Shifted,
}

impl SplitKind {
    pub const ALL: [SplitKind; 5] = [
        SplitKind::Pretrain,
        SplitKind::FinetuneTrain,
        SplitKind::FinetuneVal,
        SplitKind::FinetuneTest,
        SplitKind::Shifted,
    ];

    pub fn label(self) -> &'static str {
        match self {
            SplitKind::Pretrain => "pretrain",
            SplitKind::FinetuneTrain => "finetune-train",
            SplitKind::FinetuneVal => "finetune-val",
            SplitKind::FinetuneTest => "finetune-test",
            SplitKind::Shifted => "shifted-domain",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.label() == s)
    }

    fn stream(self) -> u64 {
        self as u64 + 1
    }
}

/// Every knob of the synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_objects: usize,
    pub n_attributes: usize,
    pub d_v: usize,
    pub n_fillers: usize,
    pub regions: usize,
    pub noise_sigma: f64,
    pub temperature: f64,
    pub fillers_per_caption: usize,
    pub max_caption_len: usize,
    pub pretrain_scenes: usize,
    pub pretrain_captions: usize,
    pub finetune_train: usize,
    pub finetune_val: usize,
    pub finetune_test: usize,
    pub shifted_test: usize,
    /// Zipf exponent of the attribute frequencies in the shifted domain.
    pub shift_exponent: f64,
    pub last_layer_heads: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            n_objects: 8,
            n_attributes: 6,
            d_v: 32,
            n_fillers: 10,
            regions: 8,
            noise_sigma: 0.1,
            temperature: 0.1,
            fillers_per_caption: 2,
            max_caption_len: 16,
            pretrain_scenes: 2000,
            pretrain_captions: 2000,
            finetune_train: 1000,
            finetune_val: 100,
            finetune_test: 200,
            shifted_test: 200,
            shift_exponent: 1.5,
            last_layer_heads: 4,
        }
    }
}

impl CorpusConfig {
    pub fn world_spec(&self) -> WorldSpec {
        WorldSpec {
            seed: self.seed,
            n_objects: self.n_objects,
            n_attributes: self.n_attributes,
            d_v: self.d_v,
            n_fillers: self.n_fillers,
            last_layer_heads: self.last_layer_heads,
        }
    }

    pub fn scene_config(&self, attribute_weights: Option<Vec<f64>>) -> SceneConfig {
        SceneConfig {
            regions: self.regions,
            noise_sigma: self.noise_sigma,
            temperature: self.temperature,
            attribute_weights,
        }
    }

    /// Attribute frequencies of the shifted domain: Zipf over a seeded permutation.
    pub fn shifted_attribute_weights(&self) -> Vec<f64> {
        let mut order: Vec<usize> = (0..self.n_attributes).collect();
        order.shuffle(&mut derived_rng(self.seed, &[0x5eed, 99]));
        let mut w = vec![0.0; self.n_attributes];
        for (rank, &a) in order.iter().enumerate() {
            w[a] = 1.0 / ((rank + 1) as f64).powf(self.shift_exponent);
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.regions == 0 {
            return Err(WvlpError::Config("regions per scene must be ≥ 1".into()));
        }
        let longest = 2 * 4.min(self.regions) + self.fillers_per_caption;
        if longest > self.max_caption_len {
            return Err(WvlpError::Config(format!(
                "captions can reach {longest} tokens, above max_caption_len = {}",
                self.max_caption_len
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSplit {
    pub kind: SplitKind,
    pub scenes: Vec<SceneSample>,
    pub captions: Vec<CaptionSample>,
    /// `pairing[i]` = index of the scene caption `i` describes. Absent on the
    /// pre-training split.
    pub pairing: Option<Vec<u32>>,
}

impl CorpusSplit {
    pub fn is_paired(&self) -> bool {
        self.pairing.is_some()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub world: ConceptWorld,
    pub splits: Vec<CorpusSplit>,
}

impl Corpus {
    pub fn split(&self, kind: SplitKind) -> Result<&CorpusSplit> {
        self.splits
            .iter()
            .find(|s| s.kind == kind)
            .ok_or_else(|| WvlpError::Config(format!("corpus has no {} split", kind.label())))
    }
}

fn gen_scenes(
    world: &ConceptWorld,
    cfg: &SceneConfig,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SceneSample>> {
    (0..n)
        .map(|i| gen_scene(world, rng, i as u32, cfg))
        .collect()
}

fn paired_split(
    kind: SplitKind,
    world: &ConceptWorld,
    config: &CorpusConfig,
    scene_cfg: &SceneConfig,
    n: usize,
) -> Result<CorpusSplit> {
    let mut rng = derived_rng(config.seed, &[kind.stream()]);
    let scenes = gen_scenes(world, scene_cfg, n, &mut rng)?;
    let captions = scenes
        .iter()
        .map(|s| gen_caption(s, world, &mut rng, config.fillers_per_caption))
        .collect::<Result<Vec<_>>>()?;
    Ok(CorpusSplit {
        kind,
        scenes,
        captions,
        pairing: Some((0..n as u32).collect()),
    })
}

/// Generates the world and all five splits. Pure in `config`.
pub fn gen_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let world = gen_world(&config.world_spec())?;
    let base = config.scene_config(None);

    let mut rng = derived_rng(config.seed, &[SplitKind::Pretrain.stream()]);
    let scenes = gen_scenes(&world, &base, config.pretrain_scenes, &mut rng)?;
    // captions describe a disjoint set of scenes that is then discarded
    let mut hidden_rng = derived_rng(config.seed, &[SplitKind::Pretrain.stream(), 1]);
    let mut captions = Vec::with_capacity(config.pretrain_captions);
    for i in 0..config.pretrain_captions {
        let hidden = gen_scene(&world, &mut hidden_rng, i as u32, &base)?;
        let mut c = gen_caption(&hidden, &world, &mut hidden_rng, config.fillers_per_caption)?;
        c.source_scene = None;
        captions.push(c);
    }
    let pretrain = CorpusSplit {
        kind: SplitKind::Pretrain,
        scenes,
        captions,
        pairing: None,
    };

    let shifted_cfg = config.scene_config(Some(config.shifted_attribute_weights()));
    let splits = vec![
        pretrain,
        paired_split(
            SplitKind::FinetuneTrain,
            &world,
            config,
            &base,
            config.finetune_train,
        )?,
        paired_split(
            SplitKind::FinetuneVal,
            &world,
            config,
            &base,
            config.finetune_val,
        )?,
        paired_split(
            SplitKind::FinetuneTest,
            &world,
            config,
            &base,
            config.finetune_test,
        )?,
        paired_split(
            SplitKind::Shifted,
            &world,
            config,
            &shifted_cfg,
            config.shifted_test,
        )?,
    ];
    Ok(Corpus {
        config: config.clone(),
        world,
        splits,
    })
}

/// Scenes and captions drawn independently; captions carry tokens only.
#[derive(Clone, Debug)]
pub struct UnpairedBatch<'a> {
    pub scenes: Vec<&'a SceneSample>,
    /// Epoch each scene was drawn in (tags are redrawn once per epoch).
    pub scene_epochs: Vec<usize>,
    pub captions: Vec<&'a [u32]>,
}

#[derive(Clone, Debug)]
pub struct PairedBatch<'a> {
    pub scenes: Vec<&'a SceneSample>,
    pub captions: Vec<&'a CaptionSample>,
}

#[derive(Clone, Debug)]
pub enum Batch<'a> {
    Unpaired(UnpairedBatch<'a>),
    Paired(PairedBatch<'a>),
}

/// Deterministic batch sequence: batch `s` is a pure function of
/// `(seed, s)`, so a resumed run sees the same batches.
#[derive(Clone, Debug)]
pub struct BatchStream<'a> {
    split: &'a CorpusSplit,
    batch_size: usize,
    paired: bool,
    seed: u64,
    next: usize,
}

/// `(epoch, index)` pairs for positions `start..start+len` of an endless
/// sequence of seeded permutations of `0..n`.
fn epoch_slots(n: usize, start: usize, len: usize, seed: u64, stream: u64) -> Vec<(usize, usize)> {
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (start..start + len)
        .map(|j| {
            let (e, pos) = (j / n, j % n);
            if cached.as_ref().is_none_or(|(ce, _)| *ce != e) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut derived_rng(seed, &[stream, e as u64]));
                cached = Some((e, perm));
            }
            (e, cached.as_ref().unwrap().1[pos])
        })
        .collect()
}

impl<'a> BatchStream<'a> {
    pub fn batch_at(&self, step: usize) -> Batch<'a> {
        let start = step * self.batch_size;
        let s = self.split;
        if self.paired {
            let slots = epoch_slots(s.captions.len(), start, self.batch_size, self.seed, 7);
            let pairing = s.pairing.as_ref().expect("paired stream on paired split");
            Batch::Paired(PairedBatch {
                scenes: slots
                    .iter()
                    .map(|&(_, i)| &s.scenes[pairing[i] as usize])
                    .collect(),
                captions: slots.iter().map(|&(_, i)| &s.captions[i]).collect(),
            })
        } else {
            let sc = epoch_slots(s.scenes.len(), start, self.batch_size, self.seed, 11);
            let cap = epoch_slots(s.captions.len(), start, self.batch_size, self.seed, 13);
            Batch::Unpaired(UnpairedBatch {
                scenes: sc.iter().map(|&(_, i)| &s.scenes[i]).collect(),
                scene_epochs: sc.iter().map(|&(e, _)| e).collect(),
                captions: cap
                    .iter()
                    .map(|&(_, i)| s.captions[i].tokens.as_slice())
                    .collect(),
            })
        }
    }
}

impl<'a> Iterator for BatchStream<'a> {
    type Item = Batch<'a>;

    fn next(&mut self) -> Option<Self::Item> {
        let b = self.batch_at(self.next);
        self.next += 1;
        Some(b)
    }
}

pub fn make_batches(
    split: &CorpusSplit,
    batch_size: usize,
    paired: bool,
    seed: u64,
) -> Result<BatchStream<'_>> {
    if batch_size == 0 {
        return Err(WvlpError::Config("batch size must be ≥ 1".into()));
    }
    if split.scenes.is_empty() || split.captions.is_empty() {
        return Err(WvlpError::Empty(format!(
            "{} split has no samples",
            split.kind.label()
        )));
    }
    if paired && !split.is_paired() {
        return Err(WvlpError::Contract(format!(
            "paired batches requested on the {} split, which has no pairing",
            split.kind.label()
        )));
    }
    Ok(BatchStream {
        split,
        batch_size,
        paired,
        seed,
        next: 0,
    })
}
