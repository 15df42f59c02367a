//! Dataset indexing, nearest-neighbour and linear SVM classifiers on
//! standardized descriptors, and the evaluation protocols.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::descriptor::{assemble_descriptor, scaled_grid, ChannelMode};
use crate::error::{domain, Error, Result};
use crate::image_io::load_image;
use crate::network::NetConfig;

pub const MODEL_MAGIC: &[u8; 4] = b"QQM1";
const STD_FLOOR: f64 = 1e-12;
const IMAGE_EXTENSIONS: [&str; 5] = ["png", "pgm", "ppm", "pnm", "pbm"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub path: PathBuf,
    pub label: String,
    pub sample: String,
    pub size: Option<String>,
    pub condition: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub entries: Vec<DatasetEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Kthtips2,
    Curet,
    Umd,
    Flat,
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kthtips2" => Ok(Layout::Kthtips2),
            "curet" => Ok(Layout::Curet),
            "umd" => Ok(Layout::Umd),
            "flat" => Ok(Layout::Flat),
            _ => Err(domain!("unknown dataset layout {s:?}")),
        }
    }
}

impl DatasetIndex {
    pub fn labels(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.entries.iter().map(|e| e.label.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.labels().len() < 2 {
            return Err(domain!("dataset needs at least 2 classes"));
        }
        let bad: Vec<PathBuf> = self
            .entries
            .iter()
            .filter(|e| e.label.is_empty() || e.size.as_deref().is_some_and(|s| s.parse::<i64>().is_err()))
            .map(|e| e.path.clone())
            .collect();
        if !bad.is_empty() {
            return Err(Error::Ingestion {
                message: "empty label or non-integer size label".into(),
                paths: bad,
            });
        }
        Ok(())
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| Error::Ingestion {
            message: format!("cannot read directory: {e}"),
            paths: vec![dir.to_path_buf()],
        })?
        .map(|d| d.map(|d| d.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

fn images_below(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in sorted_dir(dir)? {
        if p.is_dir() {
            out.extend(images_below(&p)?);
        } else if is_image(&p) {
            out.push(p);
        }
    }
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Indexes a directory tree with one subdirectory per class.
///
/// `kthtips2` parses file names such as `42a-scale_4_im_5_col.png` into
/// size `4`, sample `a` and condition `5`.
pub fn index_dataset(root: impl AsRef<Path>, layout: Layout) -> Result<DatasetIndex> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::Ingestion {
            message: "dataset root is not a directory".into(),
            paths: vec![root.to_path_buf()],
        });
    }
    let kth = Regex::new(r"^\d+([a-z])-scale_(\d+)_im_(\d+)_[a-z]+$").expect("valid pattern");
    let mut entries = Vec::new();
    let mut empty = Vec::new();
    let mut unparsable = Vec::new();
    for class_dir in sorted_dir(root)?.into_iter().filter(|p| p.is_dir()) {
        let label = class_dir.file_name().unwrap().to_string_lossy().into_owned();
        let files = images_below(&class_dir)?;
        if files.is_empty() {
            empty.push(class_dir.clone());
            continue;
        }
        for path in files {
            let name = stem(&path);
            let entry = match layout {
                Layout::Kthtips2 => match kth.captures(&name) {
                    Some(c) => DatasetEntry {
                        label: label.clone(),
                        sample: c[1].to_string(),
                        size: Some(c[2].to_string()),
                        condition: Some(c[3].to_string()),
                        path,
                    },
                    None => {
                        unparsable.push(path);
                        continue;
                    }
                },
                Layout::Curet => DatasetEntry {
                    label: label.clone(),
                    sample: label.clone(),
                    size: None,
                    condition: Some(name),
                    path,
                },
                Layout::Umd | Layout::Flat => DatasetEntry {
                    label: label.clone(),
                    sample: name,
                    size: None,
                    condition: None,
                    path,
                },
            };
            entries.push(entry);
        }
    }
    if !empty.is_empty() {
        return Err(Error::Ingestion {
            message: "class directory without images".into(),
            paths: empty,
        });
    }
    if !unparsable.is_empty() {
        return Err(Error::Ingestion {
            message: "file name does not match the layout".into(),
            paths: unparsable,
        });
    }
    let index = DatasetIndex { entries };
    index.validate()?;
    Ok(index)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Nn,
    LinearSvm,
}

impl FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nn" => Ok(ClassifierKind::Nn),
            "svm" | "linear_svm" => Ok(ClassifierKind::LinearSvm),
            _ => Err(domain!("unknown classifier {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmParams {
    fn default() -> Self {
        SvmParams {
            lambda: 1e-4,
            epochs: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub kind: ClassifierKind,
    /// Sorted class labels; every other label reference is an index here.
    pub labels: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// NN: standardized exemplars with their label index.
    pub exemplars: Vec<(usize, Vec<f64>)>,
    /// SVM: one `(weights, bias)` per label.
    pub hyperplanes: Vec<(Vec<f64>, f64)>,
    /// Hash of the network configuration the descriptors came from; empty
    /// when unknown.
    pub config_hash: String,
}

impl TrainedModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

fn standardization(descriptors: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = descriptors.len() as f64;
    let dim = descriptors[0].len();
    let mut mean = vec![0.0; dim];
    for d in descriptors {
        for (m, v) in mean.iter_mut().zip(d) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for d in descriptors {
        for ((s, v), m) in var.iter_mut().zip(d).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.into_iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
    (mean, std)
}

/// Pegasos subgradient descent on the hinge loss for one binary problem,
/// with the bias carried as an extra constant feature. The visiting order
/// per epoch is shared across all one-vs-rest problems.
fn pegasos(xs: &[Vec<f64>], ys: &[f64], order: &[Vec<usize>], lambda: f64) -> (Vec<f64>, f64) {
    let dim = xs[0].len();
    // w = scale * v keeps the shrink step O(1)
    let mut v = vec![0.0; dim + 1];
    let mut scale = 1.0;
    let mut t = 0usize;
    for epoch in order {
        for &i in epoch {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let x = &xs[i];
            let margin = scale * (x.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() + v[dim]);
            let shrink = 1.0 - eta * lambda;
            if shrink > 0.0 {
                scale *= shrink;
            } else {
                scale = 1.0;
                v.iter_mut().for_each(|w| *w = 0.0);
            }
            if ys[i] * margin < 1.0 {
                let step = eta * ys[i] / scale;
                for (w, a) in v.iter_mut().zip(x) {
                    *w += step * a;
                }
                v[dim] += step;
            }
            if scale < 1e-9 {
                v.iter_mut().for_each(|w| *w *= scale);
                scale = 1.0;
            }
        }
    }
    let bias = v[dim] * scale;
    v.truncate(dim);
    v.iter_mut().for_each(|w| *w *= scale);
    (v, bias)
}

pub fn train(
    descriptors: &[Vec<f64>],
    labels: &[String],
    kind: ClassifierKind,
    svm: &SvmParams,
) -> Result<TrainedModel> {
    if descriptors.is_empty() || descriptors.len() != labels.len() {
        return Err(domain!(
            "need one label per descriptor ({} descriptors, {} labels)",
            descriptors.len(),
            labels.len()
        ));
    }
    let dim = descriptors[0].len();
    if dim == 0 || descriptors.iter().any(|d| d.len() != dim) {
        return Err(domain!("descriptors must share a non-zero length"));
    }
    let names: Vec<String> = labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if names.iter().any(|l| l.is_empty()) {
        return Err(domain!("empty class label"));
    }
    let label_idx: Vec<usize> = labels
        .iter()
        .map(|l| names.binary_search(l).expect("label present"))
        .collect();
    let (mean, std) = standardization(descriptors);
    let mut model = TrainedModel {
        kind,
        labels: names,
        mean,
        std,
        exemplars: Vec::new(),
        hyperplanes: Vec::new(),
        config_hash: String::new(),
    };
    let xs: Vec<Vec<f64>> = descriptors.iter().map(|d| model.standardize(d)).collect();
    match kind {
        ClassifierKind::Nn => {
            model.exemplars = label_idx.into_iter().zip(xs).collect();
        }
        ClassifierKind::LinearSvm => {
            if model.labels.len() < 2 {
                return Err(domain!("a linear SVM needs at least 2 classes"));
            }
            if !(svm.lambda > 0.0) || svm.epochs == 0 {
                return Err(domain!("SVM needs lambda > 0 and at least one epoch"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(svm.seed);
            let order: Vec<Vec<usize>> = (0..svm.epochs)
                .map(|_| {
                    let mut o: Vec<usize> = (0..xs.len()).collect();
                    o.shuffle(&mut rng);
                    o
                })
                .collect();
            model.hyperplanes = (0..model.labels.len())
                .map(|c| {
                    let ys: Vec<f64> = label_idx.iter().map(|&l| if l == c { 1.0 } else { -1.0 }).collect();
                    pegasos(&xs, &ys, &order, svm.lambda)
                })
                .collect();
        }
    }
    Ok(model)
}

/// NN returns the Euclidean distance to the nearest exemplar, SVM the
/// winning one-vs-rest margin. Ties go to the lexicographically smallest
/// label.
pub fn predict(model: &TrainedModel, descriptor: &[f64]) -> Result<(String, f64)> {
    if descriptor.len() != model.dim() {
        return Err(domain!(
            "descriptor length {} does not match model length {}",
            descriptor.len(),
            model.dim()
        ));
    }
    let x = model.standardize(descriptor);
    let (idx, score) = match model.kind {
        ClassifierKind::Nn => {
            let mut best = (usize::MAX, f64::INFINITY);
            for (l, e) in &model.exemplars {
                let d2: f64 = e.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum();
                if d2 < best.1 || (d2 == best.1 && *l < best.0) {
                    best = (*l, d2);
                }
            }
            (best.0, best.1.sqrt())
        }
        ClassifierKind::LinearSvm => {
            let mut best = (usize::MAX, f64::NEG_INFINITY);
            for (l, (w, b)) in model.hyperplanes.iter().enumerate() {
                let m = w.iter().zip(&x).map(|(a, v)| a * v).sum::<f64>() + b;
                if m > best.1 {
                    best = (l, m);
                }
            }
            best
        }
    };
    Ok((model.labels[idx].clone(), score))
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    kind: ClassifierKind,
    labels: Vec<String>,
    dim: usize,
    config_hash: String,
    /// NN: label index of each stored exemplar, in payload order.
    exemplar_labels: Vec<usize>,
}

/// `QQM1`, u32 LE header length, JSON header, then f64 LE payload: mean,
/// std, then exemplars (NN) or weights followed by bias per class (SVM).
pub fn write_model_to(w: &mut impl Write, model: &TrainedModel) -> Result<()> {
    let header = ModelHeader {
        kind: model.kind,
        labels: model.labels.clone(),
        dim: model.dim(),
        config_hash: model.config_hash.clone(),
        exemplar_labels: model.exemplars.iter().map(|(l, _)| *l).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let mut put = |vals: &[f64]| -> std::io::Result<()> {
        for v in vals {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    };
    put(&model.mean)?;
    put(&model.std)?;
    for (_, e) in &model.exemplars {
        put(e)?;
    }
    for (wts, b) in &model.hyperplanes {
        put(wts)?;
        put(&[*b])?;
    }
    Ok(())
}

pub fn model_bytes(model: &TrainedModel) -> Vec<u8> {
    let mut out = Vec::new();
    write_model_to(&mut out, model).expect("writing to memory");
    out
}

pub fn write_model(path: impl AsRef<Path>, model: &TrainedModel) -> Result<()> {
    fs::write(path, model_bytes(model))?;
    Ok(())
}

pub fn read_model_from(r: &mut impl Read) -> Result<TrainedModel> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Format("truncated model file".into()))?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Format("not a QQM1 model file".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(|_| Error::Format("truncated model header".into()))?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json).map_err(|_| Error::Format("truncated model header".into()))?;
    let h: ModelHeader = serde_json::from_slice(&json)?;
    let mut take = |n: usize| -> Result<Vec<f64>> {
        let mut buf = vec![0u8; 8 * n];
        r.read_exact(&mut buf).map_err(|_| Error::Format("truncated model payload".into()))?;
        Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    };
    let mean = take(h.dim)?;
    let std = take(h.dim)?;
    let mut model = TrainedModel {
        kind: h.kind,
        labels: h.labels,
        mean,
        std,
        exemplars: Vec::new(),
        hyperplanes: Vec::new(),
        config_hash: h.config_hash,
    };
    match h.kind {
        ClassifierKind::Nn => {
            for l in h.exemplar_labels {
                if l >= model.labels.len() {
                    return Err(Error::Format("exemplar label out of range".into()));
                }
                model.exemplars.push((l, take(h.dim)?));
            }
        }
        ClassifierKind::LinearSvm => {
            for _ in 0..model.labels.len() {
                let w = take(h.dim)?;
                let b = take(1)?[0];
                model.hyperplanes.push((w, b));
            }
        }
    }
    Ok(model)
}

pub fn read_model(path: impl AsRef<Path>) -> Result<TrainedModel> {
    read_model_from(&mut fs::File::open(path)?)
}

/// Relative scale factors with a tabulated scale-matched split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchFactor {
    Sqrt2,
    Two,
    TwoSqrt2,
    Four,
}

impl MatchFactor {
    pub const ALL: [MatchFactor; 4] = [MatchFactor::Sqrt2, MatchFactor::Two, MatchFactor::TwoSqrt2, MatchFactor::Four];

    pub fn value(self) -> f64 {
        match self {
            MatchFactor::Sqrt2 => 2f64.sqrt(),
            MatchFactor::Two => 2.0,
            MatchFactor::TwoSqrt2 => 2.0 * 2f64.sqrt(),
            MatchFactor::Four => 4.0,
        }
    }

    /// `(train sizes, test sizes)` on the KTH-TIPS2 size labels.
    pub fn split(self) -> (&'static [&'static str], &'static [&'static str]) {
        match self {
            MatchFactor::Sqrt2 => (&["5", "6", "9", "10"], &["3", "4", "7", "8"]),
            MatchFactor::Two => (&["7", "8", "9", "10"], &["3", "4", "5", "6"]),
            MatchFactor::TwoSqrt2 => (&["8", "9", "10"], &["2", "3", "4"]),
            MatchFactor::Four => (&["10"], &["2"]),
        }
    }
}

impl FromStr for MatchFactor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sqrt2" => Ok(MatchFactor::Sqrt2),
            "2" | "two" => Ok(MatchFactor::Two),
            "2sqrt2" | "two_sqrt2" => Ok(MatchFactor::TwoSqrt2),
            "4" | "four" => Ok(MatchFactor::Four),
            _ => Err(domain!("unknown scale factor {s:?}; expected sqrt2, 2, 2sqrt2 or 4")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Protocol {
    /// Each sample id in turn is the test set, the rest train.
    LeaveOneSampleOut,
    /// Train and test on disjoint size labels; with `covariant` the test
    /// grid of initial scales is multiplied by the factor.
    ScaleMatched { factor: MatchFactor, covariant: bool },
    /// Train at one size label, test at each of the others as a fold;
    /// with `aggregated` training uses the five scaled grids.
    ScaleAggregated {
        train_size: String,
        test_sizes: Vec<String>,
        aggregated: bool,
    },
    /// Random half/half split per class, repeated.
    RandomSplit { repeats: usize },
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Protocol::LeaveOneSampleOut => "leave_one_sample_out",
            Protocol::ScaleMatched { .. } => "scale_matched",
            Protocol::ScaleAggregated { .. } => "scale_aggregated",
            Protocol::RandomSplit { .. } => "random_split",
        }
    }
}

/// Supplies descriptors for dataset entries at a grid of initial variances.
pub trait DescriptorSource: Sync {
    fn descriptor(&self, entry: &DatasetEntry, s0_list: &[f64]) -> Result<Arc<Vec<f64>>>;
}

/// Image path and the bit patterns of the variance grid.
type CacheKey = (PathBuf, Vec<u64>);

/// Loads images from disk and caches descriptors by path and grid.
pub struct ImageDescriptors {
    pub cfg: NetConfig,
    pub mode: ChannelMode,
    cache: Mutex<HashMap<CacheKey, Arc<Vec<f64>>>>,
}

impl ImageDescriptors {
    pub fn new(cfg: NetConfig, mode: ChannelMode) -> Self {
        ImageDescriptors {
            cfg,
            mode,
            cache: Mutex::new(HashMap::new()),
        }
    }
}

impl DescriptorSource for ImageDescriptors {
    fn descriptor(&self, entry: &DatasetEntry, s0_list: &[f64]) -> Result<Arc<Vec<f64>>> {
        let key = (entry.path.clone(), s0_list.iter().map(|v| v.to_bits()).collect());
        if let Some(d) = self.cache.lock().unwrap().get(&key) {
            return Ok(d.clone());
        }
        let cfg = NetConfig {
            s0_list: s0_list.to_vec(),
            ..self.cfg.clone()
        };
        let img = load_image(&entry.path)?;
        let d = Arc::new(assemble_descriptor(&img, &cfg, self.mode)?.values);
        self.cache.lock().unwrap().insert(key, d.clone());
        Ok(d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub name: String,
    pub train_count: usize,
    pub test_count: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub protocol: Protocol,
    pub classifier: ClassifierKind,
    pub seed: u64,
    pub config_hash: String,
    pub labels: Vec<String>,
    pub folds: Vec<FoldReport>,
    pub mean_accuracy: f64,
    /// Summed over folds; rows are true labels, columns predictions.
    pub confusion: Vec<Vec<usize>>,
}

struct Fold {
    name: String,
    train: Vec<(usize, Vec<f64>)>,
    test: Vec<(usize, Vec<f64>)>,
}

/// Variance grid for initial scales multiplied by `factor`.
fn grid_for(cfg: &NetConfig, factor: f64) -> Vec<f64> {
    scaled_grid(&cfg.s0_list, factor)
}

fn folds_for(
    index: &DatasetIndex,
    protocol: &Protocol,
    cfg: &NetConfig,
    seed: u64,
) -> Result<Vec<Fold>> {
    let base = grid_for(cfg, 1.0);
    let all: Vec<usize> = (0..index.entries.len()).collect();
    let require_sizes = || -> Result<()> {
        if index.entries.iter().any(|e| e.size.is_none()) {
            return Err(domain!("protocol {} needs size labels on every entry", protocol.name()));
        }
        Ok(())
    };
    let with_size = |sizes: &[&str]| -> Vec<usize> {
        all.iter()
            .copied()
            .filter(|&i| index.entries[i].size.as_deref().is_some_and(|s| sizes.contains(&s)))
            .collect()
    };
    let mut folds = Vec::new();
    match protocol {
        Protocol::LeaveOneSampleOut => {
            let samples: BTreeSet<&str> = index.entries.iter().map(|e| e.sample.as_str()).collect();
            if samples.len() < 2 {
                return Err(domain!("leave-one-sample-out needs at least 2 sample ids"));
            }
            for s in samples {
                let (test, train): (Vec<usize>, Vec<usize>) = all.iter().partition(|&&i| index.entries[i].sample == s);
                folds.push((format!("sample_{s}"), train, vec![base.clone()], test, base.clone()));
            }
        }
        Protocol::ScaleMatched { factor, covariant } => {
            require_sizes()?;
            let (tr, te) = factor.split();
            let test_grid = if *covariant { grid_for(cfg, factor.value()) } else { base.clone() };
            folds.push((format!("s_{:.4}", factor.value()), with_size(tr), vec![base.clone()], with_size(te), test_grid));
        }
        Protocol::ScaleAggregated {
            train_size,
            test_sizes,
            aggregated,
        } => {
            require_sizes()?;
            let train = with_size(&[train_size.as_str()]);
            let grids: Vec<Vec<f64>> = if *aggregated {
                (0..5).map(|j| grid_for(cfg, 2f64.powf(j as f64 / 2.0))).collect()
            } else {
                vec![base.clone()]
            };
            for t in test_sizes {
                folds.push((format!("size_{t}"), train.clone(), grids.clone(), with_size(&[t.as_str()]), base.clone()));
            }
        }
        Protocol::RandomSplit { repeats } => {
            if *repeats == 0 {
                return Err(domain!("random split needs at least one repeat"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, e) in index.entries.iter().enumerate() {
                by_class.entry(e.label.as_str()).or_default().push(i);
            }
            for r in 0..*repeats {
                let (mut train, mut test) = (Vec::new(), Vec::new());
                for members in by_class.values() {
                    let mut m = members.clone();
                    m.shuffle(&mut rng);
                    let half = m.len() / 2;
                    test.extend_from_slice(&m[..half]);
                    train.extend_from_slice(&m[half..]);
                }
                train.sort_unstable();
                test.sort_unstable();
                folds.push((format!("split_{r}"), train, vec![base.clone()], test, base.clone()));
            }
        }
    }
    Ok(folds
        .into_iter()
        .map(|(name, train, train_grids, test, test_grid)| Fold {
            name,
            train: train
                .iter()
                .flat_map(|&i| train_grids.iter().map(move |g| (i, g.clone())))
                .collect(),
            test: test.into_iter().map(|i| (i, test_grid.clone())).collect(),
        })
        .collect())
}

/// Runs a protocol end to end. Descriptor computation and fold evaluation
/// run in parallel; the report is deterministic given the seed.
pub fn run_protocol(
    index: &DatasetIndex,
    protocol: &Protocol,
    cfg: &NetConfig,
    source: &dyn DescriptorSource,
    kind: ClassifierKind,
    svm: &SvmParams,
    seed: u64,
) -> Result<ProtocolReport> {
    index.validate()?;
    cfg.validate()?;
    let labels = index.labels();
    let folds = folds_for(index, protocol, cfg, seed)?;
    let results = folds
        .par_iter()
        .map(|fold| -> Result<(FoldReport, Vec<Vec<usize>>)> {
            if fold.train.is_empty() || fold.test.is_empty() {
                return Err(domain!("fold {} has an empty train or test set", fold.name));
            }
            let fetch = |items: &[(usize, Vec<f64>)]| -> Result<Vec<(usize, Arc<Vec<f64>>)>> {
                items
                    .par_iter()
                    .map(|(i, g)| Ok((*i, source.descriptor(&index.entries[*i], g)?)))
                    .collect()
            };
            let train_d = fetch(&fold.train)?;
            let test_d = fetch(&fold.test)?;
            let xs: Vec<Vec<f64>> = train_d.iter().map(|(_, d)| d.as_ref().clone()).collect();
            let ys: Vec<String> = train_d.iter().map(|(i, _)| index.entries[*i].label.clone()).collect();
            let model = train(&xs, &ys, kind, svm)?;
            let mut confusion = vec![vec![0usize; labels.len()]; labels.len()];
            let mut correct = 0;
            for (i, d) in &test_d {
                let truth = &index.entries[*i].label;
                let (pred, _) = predict(&model, d)?;
                correct += usize::from(&pred == truth);
                let r = labels.binary_search(truth).expect("known label");
                let c = labels.binary_search(&pred).expect("known label");
                confusion[r][c] += 1;
            }
            let report = FoldReport {
                name: fold.name.clone(),
                train_count: fold.train.len(),
                test_count: test_d.len(),
                accuracy: correct as f64 / test_d.len() as f64,
            };
            Ok((report, confusion))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut confusion = vec![vec![0usize; labels.len()]; labels.len()];
    for (_, c) in &results {
        for (row, add) in confusion.iter_mut().zip(c) {
            for (a, b) in row.iter_mut().zip(add) {
                *a += b;
            }
        }
    }
    let folds: Vec<FoldReport> = results.into_iter().map(|(f, _)| f).collect();
    let mean_accuracy = folds.iter().map(|f| f.accuracy).sum::<f64>() / folds.len() as f64;
    Ok(ProtocolReport {
        protocol: protocol.clone(),
        classifier: kind,
        seed,
        config_hash: cfg.hash(),
        labels,
        folds,
        mean_accuracy,
        confusion,
    })
}
