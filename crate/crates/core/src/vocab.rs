//! Visual dictionary learned by K-means with momentum centroid updates.

use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Result, WvlpError};
use crate::nnmath::{DenseArray, Real};

pub const DICT_MAGIC: &[u8; 4] = b"WFHD";
pub const DICT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// `C` features drawn uniformly without replacement.
    #[default]
    RandomSample,
    /// D² seeding.
    KMeansPlusPlus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisualDictionary<T: Real = f32> {
    /// `[C, d_v]`.
    pub entries: DenseArray<T>,
    pub momentum: T,
    pub steps: u64,
}

impl<T: Real> VisualDictionary<T> {
    pub fn new(entries: DenseArray<T>, momentum: f64) -> Result<Self> {
        if entries.shape().len() != 2 || entries.rows() == 0 {
            return Err(WvlpError::Config(
                "dictionary needs at least one entry".into(),
            ));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(WvlpError::Config(format!(
                "momentum {momentum} outside [0, 1)"
            )));
        }
        if !entries.is_finite() {
            return Err(WvlpError::Contract(
                "dictionary entries must be finite".into(),
            ));
        }
        Ok(Self {
            entries,
            momentum: T::of(momentum),
            steps: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_v(&self) -> usize {
        self.entries.cols()
    }

    pub fn entry(&self, c: usize) -> &[T] {
        self.entries.row(c)
    }

    pub fn cast<U: Real>(&self) -> VisualDictionary<U> {
        VisualDictionary {
            entries: self.entries.cast(),
            momentum: U::of(self.momentum.as_f64()),
            steps: self.steps,
        }
    }
}

fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        let d = *x - *y;
        acc += d * d;
    }
    acc
}

fn check_dims<T: Real>(features: &DenseArray<T>, d_v: usize) -> Result<()> {
    if features.shape().len() != 2 || features.cols() != d_v {
        return Err(WvlpError::Shape(format!(
            "features {:?} against dictionary dimension {d_v}",
            features.shape()
        )));
    }
    Ok(())
}

pub fn kmeans_init<T: Real>(
    features: &DenseArray<T>,
    c: usize,
    momentum: f64,
    scheme: InitScheme,
    rng: &mut impl Rng,
) -> Result<VisualDictionary<T>> {
    let n = features.rows();
    if c == 0 {
        return Err(WvlpError::Config("dictionary size C must be ≥ 1".into()));
    }
    if n < c {
        return Err(WvlpError::Empty(format!(
            "{n} features cannot seed {c} dictionary entries"
        )));
    }
    let d = features.cols();
    let picked: Vec<usize> = match scheme {
        InitScheme::RandomSample => sample(rng, n, c).into_vec(),
        InitScheme::KMeansPlusPlus => {
            let mut picked = vec![rng.gen_range(0..n)];
            let mut best: Vec<f64> = (0..n)
                .map(|i| sq_dist(features.row(i), features.row(picked[0])).as_f64())
                .collect();
            while picked.len() < c {
                let total: f64 = best.iter().sum();
                let next = if total <= 0.0 {
                    (0..n).find(|i| !picked.contains(i)).unwrap()
                } else {
                    let mut u = rng.gen::<f64>() * total;
                    let mut chosen = n - 1;
                    for (i, &w) in best.iter().enumerate() {
                        if u < w {
                            chosen = i;
                            break;
                        }
                        u -= w;
                    }
                    chosen
                };
                picked.push(next);
                for (i, b) in best.iter_mut().enumerate() {
                    *b = b.min(sq_dist(features.row(i), features.row(next)).as_f64());
                }
            }
            picked
        }
    };
    let mut entries = Vec::with_capacity(c * d);
    for &i in &picked {
        entries.extend_from_slice(features.row(i));
    }
    VisualDictionary::new(DenseArray::matrix(c, d, entries), momentum)
}

/// Nearest entry by squared distance; ties go to the lowest index.
pub fn assign<T: Real>(feature: &[T], dict: &VisualDictionary<T>) -> Result<usize> {
    if feature.len() != dict.d_v() {
        return Err(WvlpError::Shape(format!(
            "feature of length {} against dictionary dimension {}",
            feature.len(),
            dict.d_v()
        )));
    }
    let mut best = 0;
    let mut best_d = sq_dist(feature, dict.entry(0));
    for c in 1..dict.len() {
        let d = sq_dist(feature, dict.entry(c));
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    Ok(best)
}

pub fn assign_batch<T: Real>(
    features: &DenseArray<T>,
    dict: &VisualDictionary<T>,
) -> Result<Vec<usize>> {
    check_dims(features, dict.d_v())?;
    (0..features.rows())
        .map(|i| assign(features.row(i), dict))
        .collect()
}

/// `d_c ← m·d_c + (1−m)·mean(assigned)` for every entry that received at
/// least one feature; others are left as they are.
pub fn momentum_update<T: Real>(
    dict: &mut VisualDictionary<T>,
    batch: &DenseArray<T>,
) -> Result<Vec<usize>> {
    if batch.rows() == 0 {
        return Err(WvlpError::Empty("momentum update on an empty batch".into()));
    }
    let assignment = assign_batch(batch, dict)?;
    let (c, d) = (dict.len(), dict.d_v());
    let mut sums = vec![T::zero(); c * d];
    let mut counts = vec![0usize; c];
    for (i, &a) in assignment.iter().enumerate() {
        counts[a] += 1;
        for (s, x) in sums[a * d..(a + 1) * d].iter_mut().zip(batch.row(i)) {
            *s += *x;
        }
    }
    let m = dict.momentum;
    for k in 0..c {
        if counts[k] == 0 {
            continue;
        }
        let n = T::of(counts[k] as f64);
        for (e, s) in dict
            .entries
            .row_mut(k)
            .iter_mut()
            .zip(&sums[k * d..(k + 1) * d])
        {
            *e = m * *e + (T::one() - m) * (*s / n);
        }
    }
    dict.steps += 1;
    Ok(assignment)
}

/// Mean squared distance from each feature to its assigned entry.
pub fn quantization_error<T: Real>(
    features: &DenseArray<T>,
    dict: &VisualDictionary<T>,
) -> Result<f64> {
    let a = assign_batch(features, dict)?;
    if a.is_empty() {
        return Err(WvlpError::Empty("quantization error of no features".into()));
    }
    let total: f64 = a
        .iter()
        .enumerate()
        .map(|(i, &c)| sq_dist(features.row(i), dict.entry(c)).as_f64())
        .sum();
    Ok(total / a.len() as f64)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DictionaryConfig {
    pub size: usize,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub init: InitScheme,
}

impl Default for DictionaryConfig {
    fn default() -> Self {
        Self {
            size: 64,
            momentum: 0.99,
            epochs: 10,
            batch_size: 256,
            init: InitScheme::RandomSample,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BuildReport {
    pub init_error: f64,
    /// Quantization error on the training features after each epoch.
    pub epoch_errors: Vec<f64>,
}

/// Seeds the dictionary, then runs `epochs` passes of shuffled mini-batch
/// momentum updates over `features`.
pub fn build_dictionary<T: Real>(
    features: &DenseArray<T>,
    cfg: &DictionaryConfig,
    rng: &mut impl Rng,
) -> Result<(VisualDictionary<T>, BuildReport)> {
    if cfg.batch_size == 0 {
        return Err(WvlpError::Config(
            "dictionary batch size must be ≥ 1".into(),
        ));
    }
    let mut dict = kmeans_init(features, cfg.size, cfg.momentum, cfg.init, rng)?;
    let init_error = quantization_error(features, &dict)?;
    let n = features.rows();
    let d = features.cols();
    let mut epoch_errors = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let order = sample(rng, n, n).into_vec();
        for chunk in order.chunks(cfg.batch_size) {
            let mut vals = Vec::with_capacity(chunk.len() * d);
            for &i in chunk {
                vals.extend_from_slice(features.row(i));
            }
            momentum_update(&mut dict, &DenseArray::matrix(chunk.len(), d, vals))?;
        }
        epoch_errors.push(quantization_error(features, &dict)?);
    }
    Ok((
        dict,
        BuildReport {
            init_error,
            epoch_errors,
        },
    ))
}

pub fn dictionary_to_bytes(dict: &VisualDictionary<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 4 * dict.entries.len());
    out.extend_from_slice(DICT_MAGIC);
    out.extend_from_slice(&DICT_VERSION.to_le_bytes());
    out.extend_from_slice(&(dict.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dict.d_v() as u32).to_le_bytes());
    out.extend_from_slice(&dict.momentum.to_le_bytes());
    for x in dict.entries.values() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn dictionary_from_bytes(bytes: &[u8], path: &Path) -> Result<VisualDictionary<f32>> {
    let truncated = |detail: String| WvlpError::Truncated {
        path: path.into(),
        detail,
    };
    if bytes.len() < 4 || &bytes[..4] != DICT_MAGIC {
        return Err(WvlpError::BadMagic {
            path: path.into(),
            expected: "WFHD".into(),
        });
    }
    if bytes.len() < 20 {
        return Err(truncated(format!(
            "header needs 20 bytes, file has {}",
            bytes.len()
        )));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    let version = word(1);
    if version != DICT_VERSION {
        return Err(WvlpError::BadVersion {
            path: path.into(),
            found: version,
        });
    }
    let (c, d) = (word(2) as usize, word(3) as usize);
    let momentum = f32::from_bits(word(4));
    let expected = 20 + 4 * c * d;
    if bytes.len() < expected {
        return Err(truncated(format!(
            "payload needs {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    if bytes.len() > expected {
        return Err(WvlpError::Manifest {
            path: path.into(),
            detail: format!("{} trailing bytes", bytes.len() - expected),
        });
    }
    let values: Vec<f32> = bytes[20..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let mut dict = VisualDictionary::new(DenseArray::matrix(c, d, values), 0.0)?;
    dict.momentum = momentum;
    Ok(dict)
}

pub fn save_dictionary(dict: &VisualDictionary<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, dictionary_to_bytes(dict)).map_err(|e| WvlpError::io(path, e))
}

pub fn load_dictionary(path: &Path) -> Result<VisualDictionary<f32>> {
    let bytes = std::fs::read(path).map_err(|e| WvlpError::io(path, e))?;
    dictionary_from_bytes(&bytes, path)
}
