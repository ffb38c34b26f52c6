//! Run configuration: one TOML document holding every tunable, plus presets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusConfig, N_SPECIALS};
use crate::encoder::EncoderConfig;
use crate::error::{Result, WvlpError};
use crate::model::ModelConfig;
use crate::objectives::ObjectiveConfig;
use crate::train::{OptimConfig, TrainConfig};
use crate::vocab::DictionaryConfig;
use crate::wfh::WfhConfig;

pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub train: TrainConfig,
    /// Scenes/captions of the test split scored all-against-all.
    pub eval_pairs: usize,
    /// Pairs per inference graph while scoring.
    pub eval_chunk: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                steps: 600,
                batch_size: 16,
                optim: OptimConfig {
                    lr: 1e-3,
                    weight_decay: 1e-4,
                    ..OptimConfig::default()
                },
                checkpoint_every: 0,
            },
            eval_pairs: 200,
            eval_chunk: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub dictionary: DictionaryConfig,
    pub model: ModelConfig,
    pub objectives: ObjectiveConfig,
    pub pretrain: TrainConfig,
    pub finetune: FinetuneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset("desk").expect("desk preset")
    }
}

pub const PRESETS: [&str; 4] = ["micro", "desk", "bench", "paper"];

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = match name {
            "micro" => Self::micro(),
            "desk" => Self::desk(),
            "bench" => Self::bench(),
            "paper" => Self::paper(),
            _ => {
                return Err(WvlpError::Config(format!(
                    "unknown preset {name:?} (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        };
        c.resolve();
        Ok(c)
    }

    fn desk() -> Self {
        Self {
            seed: 1,
            corpus: CorpusConfig::default(),
            dictionary: DictionaryConfig::default(),
            model: ModelConfig {
                encoder: EncoderConfig {
                    d_model: 64,
                    n_layers: 4,
                    n_heads: 4,
                    d_v: 32,
                    vocab_size: 0,
                    max_text_len: 16,
                    max_regions: 8,
                    d_ff: 128,
                },
                wfh: WfhConfig::default(),
                hallucinator: true,
                attributes: true,
                n_objects: 8,
                gamma: 16.0,
                vqa_hidden: 85,
                rec_hidden: 64,
            },
            objectives: ObjectiveConfig::default(),
            pretrain: TrainConfig {
                optim: OptimConfig {
                    lr: 2e-3,
                    ..OptimConfig::default()
                },
                ..TrainConfig::default()
            },
            finetune: FinetuneConfig::default(),
        }
    }

    fn micro() -> Self {
        let mut c = Self::desk();
        c.corpus = CorpusConfig {
            n_objects: 4,
            n_attributes: 3,
            d_v: 8,
            n_fillers: 7,
            regions: 3,
            fillers_per_caption: 1,
            max_caption_len: 8,
            pretrain_scenes: 16,
            pretrain_captions: 16,
            finetune_train: 8,
            finetune_val: 4,
            finetune_test: 8,
            shifted_test: 8,
            last_layer_heads: 2,
            ..CorpusConfig::default()
        };
        c.dictionary.size = 8;
        c.dictionary.epochs = 2;
        c.dictionary.batch_size = 16;
        c.model.encoder.d_model = 8;
        c.model.encoder.n_layers = 1;
        c.model.encoder.n_heads = 2;
        c.model.encoder.d_ff = 16;
        c.model.wfh = WfhConfig {
            layers: 1,
            self_heads: 2,
            cross_heads: 2,
            last_cross_heads: 2,
            ..WfhConfig::default()
        };
        c.model.vqa_hidden = 10;
        c.model.rec_hidden = 8;
        c.pretrain.steps = 2;
        c.pretrain.batch_size = 4;
        c.finetune.train.steps = 2;
        c.finetune.train.batch_size = 2;
        c.finetune.eval_pairs = 8;
        c
    }

    /// Attribute-bottleneck benchmark for the baseline comparison: four
    /// regions per scene so that object words alone rarely pin down a scene,
    /// twelve attributes, and a small paired set for fine-tuning.
    fn bench() -> Self {
        let mut c = Self::desk();
        c.corpus.regions = 4;
        c.corpus.n_attributes = 12;
        c.corpus.finetune_train = 200;
        c.model.encoder.max_regions = 4;
        c.model.encoder.d_model = 32;
        c.model.encoder.n_layers = 2;
        c.model.encoder.d_ff = 64;
        c.model.vqa_hidden = 43;
        c.model.rec_hidden = 32;
        c.pretrain.steps = 3000;
        c
    }

    fn paper() -> Self {
        let mut c = Self::desk();
        c.corpus = CorpusConfig {
            n_objects: 1600,
            n_attributes: 400,
            d_v: 2048,
            regions: 36,
            max_caption_len: 36,
            last_layer_heads: 16,
            ..CorpusConfig::default()
        };
        c.dictionary.size = 1024;
        c.model.encoder.d_model = 768;
        c.model.encoder.n_layers = 12;
        c.model.encoder.n_heads = 12;
        c.model.encoder.d_ff = 3072;
        c.model.wfh = WfhConfig {
            layers: 2,
            self_heads: 12,
            cross_heads: 12,
            last_cross_heads: 16,
            ..WfhConfig::default()
        };
        c.model.vqa_hidden = 1024;
        c.model.rec_hidden = 768;
        c.pretrain.batch_size = 400;
        c.pretrain.optim.lr = 1.5625e-4;
        c
    }

    /// Copies the corpus-determined sizes into the model section.
    pub fn resolve(&mut self) {
        let c = &self.corpus;
        let e = &mut self.model.encoder;
        e.vocab_size = N_SPECIALS + c.n_objects + c.n_attributes + c.n_fillers;
        e.d_v = c.d_v;
        e.max_text_len = c.max_caption_len;
        e.max_regions = c.regions;
        self.model.n_objects = c.n_objects;
        if self.model.hallucinator {
            self.corpus.last_layer_heads = self.model.wfh.last_cross_heads;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        if self.dictionary.size == 0 {
            return Err(WvlpError::Config("dictionary size must be ≥ 1".into()));
        }
        if self.pretrain.batch_size == 0 || self.finetune.train.batch_size == 0 {
            return Err(WvlpError::Config("batch sizes must be ≥ 1".into()));
        }
        if self.finetune.eval_chunk == 0 {
            return Err(WvlpError::Config("eval_chunk must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Baseline variant: no hallucinator, no attribute summands.
    pub fn baseline(&self) -> Self {
        let mut c = self.clone();
        c.model.hallucinator = false;
        c.model.attributes = false;
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut c: Self = toml::from_str(text).map_err(|e| WvlpError::Config(e.to_string()))?;
        c.resolve();
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| WvlpError::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Writes the resolved config into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| WvlpError::io(dir, e))?;
        let path = dir.join(CONFIG_FILE);
        std::fs::write(&path, self.to_toml()).map_err(|e| WvlpError::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid_and_round_trip() {
        for p in PRESETS {
            let c = RunConfig::preset(p).unwrap();
            c.validate().unwrap();
            assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        }
        assert!(RunConfig::preset("huge").is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut text = RunConfig::preset("micro").unwrap().to_toml();
        text.push_str("\n[extra]\nfoo = 1\n");
        assert!(matches!(
            RunConfig::from_toml(&text),
            Err(WvlpError::Config(_))
        ));
        let bad = RunConfig::preset("micro")
            .unwrap()
            .to_toml()
            .replace("mask_prob", "mask_probability");
        assert!(RunConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn full_size_preset_keeps_reference_values() {
        let c = RunConfig::preset("paper").unwrap();
        assert_eq!(c.model.encoder.d_model, 768);
        assert_eq!(c.model.wfh.last_cross_heads, 16);
        assert_eq!(c.pretrain.batch_size, 400);
        assert_eq!(c.pretrain.optim.lr, 1.5625e-4);
        assert_eq!(c.pretrain.optim.weight_decay, 0.01);
        assert_eq!(c.finetune.train.optim.weight_decay, 1e-4);
        assert_eq!(c.corpus.regions, 36);
    }
}
