//! Corpus files: a UTF-8 manifest terminated by an `end` line, then a
//! little-endian payload of f32 features and u32 token ids.

use std::fmt::Write as _;
use std::path::Path;

use super::scene::{CaptionSample, Region, SceneSample};
use super::split::{Corpus, CorpusConfig, CorpusSplit, SplitKind};
use super::world::{ConceptWorld, WordVocab};
use crate::error::{Result, WvlpError};
use crate::nnmath::DenseArray;

const MAGIC_LINE: &str = "wvlp-corpus 1";
const NO_SOURCE: u32 = u32::MAX;

pub(crate) struct Writer {
    pub bytes: Vec<u8>,
}

impl Writer {
    pub fn u32(&mut self, x: u32) {
        self.bytes.extend_from_slice(&x.to_le_bytes());
    }
    pub fn f32s(&mut self, xs: &[f32]) {
        for x in xs {
            self.bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    pub fn u32s(&mut self, xs: &[u32]) {
        for &x in xs {
            self.u32(x);
        }
    }
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
    pub path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(WvlpError::Truncated {
                path: self.path.into(),
                detail: format!(
                    "needed {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    pub fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn manifest(corpus: &Corpus) -> String {
    let c = &corpus.config;
    let mut m = String::new();
    writeln!(m, "{MAGIC_LINE}").unwrap();
    let fields: [(&str, String); 18] = [
        ("seed", c.seed.to_string()),
        ("n_objects", c.n_objects.to_string()),
        ("n_attributes", c.n_attributes.to_string()),
        ("d_v", c.d_v.to_string()),
        ("n_fillers", c.n_fillers.to_string()),
        ("regions", c.regions.to_string()),
        ("noise_sigma", format!("{:?}", c.noise_sigma)),
        ("temperature", format!("{:?}", c.temperature)),
        ("fillers_per_caption", c.fillers_per_caption.to_string()),
        ("max_caption_len", c.max_caption_len.to_string()),
        ("pretrain_scenes", c.pretrain_scenes.to_string()),
        ("pretrain_captions", c.pretrain_captions.to_string()),
        ("finetune_train", c.finetune_train.to_string()),
        ("finetune_val", c.finetune_val.to_string()),
        ("finetune_test", c.finetune_test.to_string()),
        ("shifted_test", c.shifted_test.to_string()),
        ("shift_exponent", format!("{:?}", c.shift_exponent)),
        ("last_layer_heads", c.last_layer_heads.to_string()),
    ];
    for (k, v) in fields {
        writeln!(m, "{k} {v}").unwrap();
    }
    for s in &corpus.splits {
        writeln!(
            m,
            "split {} scenes {} captions {} paired {}",
            s.kind.label(),
            s.scenes.len(),
            s.captions.len(),
            s.is_paired() as u8
        )
        .unwrap();
    }
    m.push_str("end\n");
    m
}

pub fn corpus_to_bytes(corpus: &Corpus) -> Vec<u8> {
    let mut w = Writer {
        bytes: manifest(corpus).into_bytes(),
    };
    w.f32s(corpus.world.object_prototypes.values());
    w.f32s(corpus.world.attribute_offsets.values());
    for split in &corpus.splits {
        for scene in &split.scenes {
            w.u32(scene.id);
            w.u32(scene.regions.len() as u32);
            for (b, r) in scene.regions.iter().enumerate() {
                w.u32(r.object);
                w.u32(r.attribute);
                w.f32s(&r.feature);
                w.f32s(&r.geometry);
                w.f32s(&scene.p_obj[b]);
                w.f32s(&scene.p_attr[b]);
                w.u32(scene.object_tags[b]);
                w.u32(scene.attribute_tags[b]);
            }
        }
        for cap in &split.captions {
            w.u32(cap.tokens.len() as u32);
            w.u32s(&cap.tokens);
            w.u32(cap.source_scene.unwrap_or(NO_SOURCE));
        }
        if let Some(p) = &split.pairing {
            w.u32s(p);
        }
    }
    w.bytes
}

struct SplitHeader {
    kind: SplitKind,
    scenes: usize,
    captions: usize,
    paired: bool,
}

fn parse_manifest(text: &str, path: &str) -> Result<(CorpusConfig, Vec<SplitHeader>)> {
    let bad = |detail: String| WvlpError::Manifest {
        path: path.into(),
        detail,
    };
    let mut lines = text.lines();
    match lines.next() {
        Some(MAGIC_LINE) => {}
        Some(l) if l.starts_with("wvlp-corpus ") => {
            let found = l["wvlp-corpus ".len()..]
                .parse::<u32>()
                .map_err(|e| bad(format!("version: {e}")))?;
            return Err(WvlpError::BadVersion {
                path: path.into(),
                found,
            });
        }
        _ => {
            return Err(WvlpError::BadMagic {
                path: path.into(),
                expected: MAGIC_LINE.to_string(),
            })
        }
    }
    let mut doc = String::new();
    let mut splits = Vec::new();
    for line in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["end"] => break,
            ["split", label, "scenes", n, "captions", m, "paired", p] => {
                let kind = SplitKind::from_label(label)
                    .ok_or_else(|| bad(format!("unknown split {label}")))?;
                let num = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("{line}: {e}")));
                splits.push(SplitHeader {
                    kind,
                    scenes: num(n)?,
                    captions: num(m)?,
                    paired: *p == "1",
                });
            }
            [key, value] => {
                writeln!(doc, "{key} = {value}").unwrap();
            }
            _ => return Err(bad(format!("unreadable line {line:?}"))),
        }
    }
    let config: CorpusConfig = toml::from_str(&doc).map_err(|e| bad(e.to_string()))?;
    Ok((config, splits))
}

pub fn corpus_from_bytes(bytes: &[u8], path: &str) -> Result<Corpus> {
    const END: &[u8] = b"\nend\n";
    let header_end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .map(|i| i + END.len())
        .ok_or_else(|| {
            if bytes.starts_with(b"wvlp-corpus") {
                WvlpError::Truncated {
                    path: path.into(),
                    detail: "manifest has no end line".into(),
                }
            } else {
                WvlpError::BadMagic {
                    path: path.into(),
                    expected: MAGIC_LINE.to_string(),
                }
            }
        })?;
    let text = std::str::from_utf8(&bytes[..header_end]).map_err(|e| WvlpError::Manifest {
        path: path.into(),
        detail: e.to_string(),
    })?;
    let (config, headers) = parse_manifest(text, path)?;
    let mut r = Reader {
        bytes,
        pos: header_end,
        path,
    };
    let (no, na, dv) = (config.n_objects, config.n_attributes, config.d_v);
    let world = ConceptWorld {
        seed: config.seed,
        d_v: dv,
        object_prototypes: DenseArray::matrix(no, dv, r.f32s(no * dv)?),
        attribute_offsets: DenseArray::matrix(na, dv, r.f32s(na * dv)?),
        vocab: WordVocab {
            n_objects: no,
            n_attributes: na,
            n_fillers: config.n_fillers,
        },
    };
    let mut splits = Vec::new();
    for h in headers {
        let mut scenes = Vec::with_capacity(h.scenes);
        for _ in 0..h.scenes {
            let id = r.u32()?;
            let nb = r.u32()? as usize;
            let mut s = SceneSample {
                id,
                regions: Vec::with_capacity(nb),
                p_obj: Vec::with_capacity(nb),
                p_attr: Vec::with_capacity(nb),
                object_tags: Vec::with_capacity(nb),
                attribute_tags: Vec::with_capacity(nb),
            };
            for _ in 0..nb {
                let object = r.u32()?;
                let attribute = r.u32()?;
                let feature = r.f32s(dv)?;
                let g = r.f32s(4)?;
                s.regions.push(Region {
                    object,
                    attribute,
                    feature,
                    geometry: [g[0], g[1], g[2], g[3]],
                });
                s.p_obj.push(r.f32s(no)?);
                s.p_attr.push(r.f32s(na)?);
                s.object_tags.push(r.u32()?);
                s.attribute_tags.push(r.u32()?);
            }
            scenes.push(s);
        }
        let mut captions = Vec::with_capacity(h.captions);
        for _ in 0..h.captions {
            let n = r.u32()? as usize;
            let tokens = r.u32s(n)?;
            let src = r.u32()?;
            captions.push(CaptionSample {
                tokens,
                source_scene: (src != NO_SOURCE).then_some(src),
            });
        }
        let pairing = if h.paired {
            Some(r.u32s(h.captions)?)
        } else {
            None
        };
        splits.push(CorpusSplit {
            kind: h.kind,
            scenes,
            captions,
            pairing,
        });
    }
    if r.pos != bytes.len() {
        return Err(WvlpError::Manifest {
            path: path.into(),
            detail: format!("{} trailing bytes after payload", bytes.len() - r.pos),
        });
    }
    Ok(Corpus {
        config,
        world,
        splits,
    })
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    std::fs::write(path, corpus_to_bytes(corpus)).map_err(|e| WvlpError::io(path, e))
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let bytes = std::fs::read(path).map_err(|e| WvlpError::io(path, e))?;
    corpus_from_bytes(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::split::gen_corpus;

    fn small() -> Corpus {
        gen_corpus(&CorpusConfig {
            pretrain_scenes: 12,
            pretrain_captions: 9,
            finetune_train: 5,
            finetune_val: 3,
            finetune_test: 4,
            shifted_test: 4,
            ..CorpusConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let c = small();
        let bytes = corpus_to_bytes(&c);
        let back = corpus_from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back, c);
        assert_eq!(corpus_to_bytes(&back), bytes);
    }

    #[test]
    fn generation_is_byte_identical() {
        assert_eq!(corpus_to_bytes(&small()), corpus_to_bytes(&small()));
    }

    #[test]
    fn damaged_files_rejected() {
        let bytes = corpus_to_bytes(&small());
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            corpus_from_bytes(cut, "x"),
            Err(WvlpError::Truncated { .. })
        ));
        assert!(matches!(
            corpus_from_bytes(b"hello\nend\n", "x"),
            Err(WvlpError::BadMagic { .. })
        ));
        let mut v2 = bytes.clone();
        v2[12] = b'2';
        assert!(matches!(
            corpus_from_bytes(&v2, "x"),
            Err(WvlpError::BadVersion { .. })
        ));
    }
}
