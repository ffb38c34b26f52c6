//! Full parameter set (embeddings, encoder, hallucinator, heads) and the
//! checkpoint format.
//!
//! Checkpoint layout: `wvlp-ckpt 1`, `config <n>` followed by `n` bytes of
//! model-config TOML, one `name dims... byte-offset` line per tensor, `end`,
//! then the concatenated little-endian f32 payload.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::encoder::{Embeddings, Encoder, EncoderConfig};
use crate::error::{Result, WvlpError};
use crate::nnmath::{DenseArray, Linear, ParamStore, Real};
use crate::wfh::{WfhConfig, WfhStack};

const CKPT_MAGIC: &str = "wvlp-ckpt 1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub wfh: WfhConfig,
    /// Off: S1 is text only and there is no hallucination loss.
    pub hallucinator: bool,
    /// Off: tag rows (and hallucinator tag inputs) carry object tokens only.
    pub attributes: bool,
    pub n_objects: usize,
    pub gamma: f64,
    pub vqa_hidden: usize,
    pub rec_hidden: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.hallucinator {
            self.wfh.validate(self.encoder.d_model, self.encoder.d_v)?;
        }
        if self.n_objects == 0 || self.vqa_hidden == 0 || self.rec_hidden == 0 {
            return Err(WvlpError::Config(
                "head widths and object count must be positive".into(),
            ));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(WvlpError::Config(format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PretrainHeads {
    /// Vocabulary classifier at masked caption positions.
    pub mlm: Linear,
    /// Object-class classifier at masked tag positions.
    pub mtc: Linear,
    /// Object-class classifier at masked visual positions.
    pub moc: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct RetrievalHead {
    pub f_t: Linear,
    pub f_v: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct TaskHeads {
    pub retrieval: RetrievalHead,
    pub vqa: [Linear; 2],
    pub ve: Linear,
    pub rec: [Linear; 2],
}

#[derive(Clone, Debug)]
pub struct ModelLayout {
    pub emb: Embeddings,
    pub encoder: Encoder,
    pub wfh: Option<WfhStack>,
    pub pretrain: PretrainHeads,
    pub tasks: TaskHeads,
}

#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    pub config: ModelConfig,
    pub layout: ModelLayout,
    pub params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut s = ParamStore::new();
        let e = &config.encoder;
        let d = e.d_model;
        let emb = Embeddings::new(&mut s, e, rng)?;
        let encoder = Encoder::new(&mut s, e, rng)?;
        let wfh = if config.hallucinator {
            Some(WfhStack::new(&mut s, &config.wfh, d, e.d_v, rng)?)
        } else {
            None
        };
        let pretrain = PretrainHeads {
            mlm: Linear::new(&mut s, "head.mlm", d, e.vocab_size, true, rng)?,
            mtc: Linear::new(&mut s, "head.mtc", d, config.n_objects, true, rng)?,
            moc: Linear::new(&mut s, "head.moc", d, config.n_objects, true, rng)?,
        };
        let tasks = TaskHeads {
            retrieval: RetrievalHead {
                f_t: Linear::new(&mut s, "head.retrieval.text", d, d, true, rng)?,
                f_v: Linear::new(&mut s, "head.retrieval.visual", d, d, true, rng)?,
            },
            vqa: [
                Linear::new(
                    &mut s,
                    "head.vqa.hidden",
                    2 * d,
                    config.vqa_hidden,
                    true,
                    rng,
                )?,
                Linear::new(&mut s, "head.vqa.out", config.vqa_hidden, 2, true, rng)?,
            ],
            ve: Linear::new(&mut s, "head.ve", 2 * d, 3, true, rng)?,
            rec: [
                Linear::new(&mut s, "head.rec.hidden", d, config.rec_hidden, true, rng)?,
                Linear::new(&mut s, "head.rec.out", config.rec_hidden, 1, true, rng)?,
            ],
        };
        Ok(Self {
            config,
            layout: ModelLayout {
                emb,
                encoder,
                wfh,
                pretrain,
                tasks,
            },
            params: s,
        })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
        }
    }

    /// Copies every named tensor into the matching parameter.
    pub fn load_tensors(&mut self, tensors: &[(String, DenseArray<f32>)]) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(WvlpError::Contract(format!(
                "checkpoint has {} tensors, model has {}",
                tensors.len(),
                self.params.len()
            )));
        }
        for (name, value) in tensors {
            let id = self.params.id(name).ok_or_else(|| {
                WvlpError::Contract(format!("checkpoint tensor {name} is not a model parameter"))
            })?;
            let p = self.params.get_mut(id);
            if p.value.shape() != value.shape() {
                return Err(WvlpError::Shape(format!(
                    "{name}: checkpoint {:?} vs model {:?}",
                    value.shape(),
                    p.value.shape()
                )));
            }
            p.value = value.cast();
        }
        Ok(())
    }

    pub fn tensors(&self) -> Vec<(String, DenseArray<f32>)> {
        self.params
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.cast()))
            .collect()
    }
}

/// Named tensors plus an optional text block (model config or trainer state).
#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub text: String,
    pub tensors: Vec<(String, DenseArray<f32>)>,
}

pub fn tensor_file_to_bytes(file: &TensorFile) -> Vec<u8> {
    let mut m = String::new();
    writeln!(m, "{CKPT_MAGIC}").unwrap();
    writeln!(m, "config {}", file.text.len()).unwrap();
    m.push_str(&file.text);
    m.push('\n');
    let mut offset = 0usize;
    for (name, t) in &file.tensors {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        writeln!(m, "{name} {} {offset}", dims.join(" ")).unwrap();
        offset += 4 * t.len();
    }
    m.push_str("end\n");
    let mut bytes = m.into_bytes();
    bytes.reserve(offset);
    for (_, t) in &file.tensors {
        for x in t.values() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    bytes
}

pub fn tensor_file_from_bytes(bytes: &[u8], path: &Path) -> Result<TensorFile> {
    let manifest = |detail: String| WvlpError::Manifest {
        path: path.into(),
        detail,
    };
    let truncated = |detail: String| WvlpError::Truncated {
        path: path.into(),
        detail,
    };
    let mut pos = 0usize;
    let line = |pos: &mut usize| -> Result<&str> {
        let rest = &bytes[*pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| truncated("manifest line without newline".into()))?;
        *pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|e| manifest(e.to_string()))
    };
    let first = line(&mut pos).map_err(|_| WvlpError::BadMagic {
        path: path.into(),
        expected: CKPT_MAGIC.into(),
    })?;
    if first != CKPT_MAGIC {
        if let Some(v) = first.strip_prefix("wvlp-ckpt ") {
            let found = v.parse().map_err(|e| manifest(format!("version: {e}")))?;
            return Err(WvlpError::BadVersion {
                path: path.into(),
                found,
            });
        }
        return Err(WvlpError::BadMagic {
            path: path.into(),
            expected: CKPT_MAGIC.into(),
        });
    }
    let n: usize = line(&mut pos)?
        .strip_prefix("config ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| manifest("missing config length".into()))?;
    if pos + n + 1 > bytes.len() {
        return Err(truncated("config block".into()));
    }
    let text = std::str::from_utf8(&bytes[pos..pos + n])
        .map_err(|e| manifest(e.to_string()))?
        .to_string();
    pos += n + 1;
    let mut entries = Vec::new();
    loop {
        let l = line(&mut pos)?;
        if l == "end" {
            break;
        }
        let parts: Vec<&str> = l.split_whitespace().collect();
        if parts.len() < 3 {
            return Err(manifest(format!("unreadable tensor line {l:?}")));
        }
        let nums: std::result::Result<Vec<usize>, _> =
            parts[1..].iter().map(|s| s.parse::<usize>()).collect();
        let nums = nums.map_err(|e| manifest(format!("{l:?}: {e}")))?;
        let (dims, offset) = nums.split_at(nums.len() - 1);
        entries.push((parts[0].to_string(), dims.to_vec(), offset[0]));
    }
    let payload = &bytes[pos..];
    let mut expected = 0usize;
    let mut tensors = Vec::with_capacity(entries.len());
    for (name, dims, offset) in entries {
        if offset != expected {
            return Err(manifest(format!(
                "{name}: offset {offset}, expected {expected}"
            )));
        }
        let len: usize = dims.iter().product();
        let end = offset + 4 * len;
        if end > payload.len() {
            return Err(truncated(format!(
                "{name} needs bytes up to {end}, payload has {}",
                payload.len()
            )));
        }
        let values = payload[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, DenseArray::from_vec(&dims, values)?));
        expected = end;
    }
    if expected != payload.len() {
        return Err(manifest(format!(
            "{} trailing payload bytes",
            payload.len() - expected
        )));
    }
    Ok(TensorFile { text, tensors })
}

pub fn save_tensor_file(file: &TensorFile, path: &Path) -> Result<()> {
    std::fs::write(path, tensor_file_to_bytes(file)).map_err(|e| WvlpError::io(path, e))
}

pub fn load_tensor_file(path: &Path) -> Result<TensorFile> {
    let bytes = std::fs::read(path).map_err(|e| WvlpError::io(path, e))?;
    tensor_file_from_bytes(&bytes, path)
}

pub fn model_to_file<T: Real>(model: &Model<T>) -> Result<TensorFile> {
    Ok(TensorFile {
        text: toml::to_string(&model.config).map_err(|e| WvlpError::Config(e.to_string()))?,
        tensors: model.tensors(),
    })
}

/// Rebuilds the layout from the stored config, then copies the tensors in.
pub fn model_from_file(file: &TensorFile, path: &Path) -> Result<Model<f32>> {
    let config: ModelConfig = toml::from_str(&file.text).map_err(|e| WvlpError::Manifest {
        path: path.into(),
        detail: format!("model config: {e}"),
    })?;
    // initial values are overwritten below
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut model = Model::new(config, &mut rng)?;
    model.load_tensors(&file.tensors)?;
    Ok(model)
}

pub fn save_model<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    save_tensor_file(&model_to_file(model)?, path)
}

pub fn load_model(path: &Path) -> Result<Model<f32>> {
    model_from_file(&load_tensor_file(path)?, path)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn micro_config(hallucinator: bool, attributes: bool) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                d_v: 8,
                vocab_size: 17,
                max_text_len: 8,
                max_regions: 3,
                d_ff: 8,
            },
            wfh: WfhConfig {
                layers: 2,
                self_heads: 2,
                cross_heads: 2,
                last_cross_heads: 2,
                ..WfhConfig::default()
            },
            hallucinator,
            attributes,
            n_objects: 4,
            gamma: 16.0,
            vqa_hidden: 6,
            rec_hidden: 8,
        }
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m: Model<f32> = Model::new(micro_config(true, true), &mut rng).unwrap();
        let bytes = tensor_file_to_bytes(&model_to_file(&m).unwrap());
        let back = model_from_file(
            &tensor_file_from_bytes(&bytes, Path::new("m")).unwrap(),
            Path::new("m"),
        )
        .unwrap();
        assert_eq!(back.config, m.config);
        for ((_, a), (_, b)) in m.params.iter().zip(back.params.iter()) {
            assert_eq!(a.name, b.name);
            let (x, y): (Vec<u32>, Vec<u32>) = (
                a.value.values().iter().map(|v| v.to_bits()).collect(),
                b.value.values().iter().map(|v| v.to_bits()).collect(),
            );
            assert_eq!(x, y);
        }
        assert_eq!(tensor_file_to_bytes(&model_to_file(&back).unwrap()), bytes);
    }

    #[test]
    fn baseline_has_no_hallucinator_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m: Model<f32> = Model::new(micro_config(false, false), &mut rng).unwrap();
        assert!(m.params.iter().all(|(_, p)| !p.name.starts_with("wfh.")));
        let w: Model<f32> = Model::new(micro_config(true, false), &mut rng).unwrap();
        assert!(w.params.iter().any(|(_, p)| p.name.starts_with("wfh.")));
    }

    #[test]
    fn damaged_checkpoints_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m: Model<f32> = Model::new(micro_config(true, true), &mut rng).unwrap();
        let bytes = tensor_file_to_bytes(&model_to_file(&m).unwrap());
        let p = Path::new("x");
        assert!(matches!(
            tensor_file_from_bytes(&bytes[..bytes.len() - 2], p),
            Err(WvlpError::Truncated { .. })
        ));
        assert!(matches!(
            tensor_file_from_bytes(b"nope\n", p),
            Err(WvlpError::BadMagic { .. })
        ));
        let mut v = bytes.clone();
        v[10] = b'7';
        assert!(matches!(
            tensor_file_from_bytes(&v, p),
            Err(WvlpError::BadVersion { .. })
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            tensor_file_from_bytes(&extra, p),
            Err(WvlpError::Manifest { .. })
        ));
    }

    #[test]
    fn mismatched_dimensions_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m: Model<f32> = Model::new(micro_config(true, true), &mut rng).unwrap();
        let mut other_cfg = micro_config(true, true);
        other_cfg.n_objects = 5;
        let mut other: Model<f32> = Model::new(other_cfg, &mut rng).unwrap();
        assert!(matches!(
            other.load_tensors(&m.tensors()),
            Err(WvlpError::Shape(_))
        ));
        let mut base: Model<f32> = Model::new(micro_config(false, true), &mut rng).unwrap();
        assert!(base.load_tensors(&m.tensors()).is_err());
    }
}
