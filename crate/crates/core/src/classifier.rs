//! Probabilistic k-nearest-neighbour fraud scoring.
//!
//! Features are min-max normalized on the training set, distances are
//! Euclidean, and the score is the fraction of fraud-labelled points among
//! the `k` nearest (ties broken by training order).

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ClassifierError;
use crate::exec::Exec;
use crate::graph::FeatureVector;

pub const DEFAULT_K: usize = 5;
/// Scores at or above this are classified as fraud.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

const MAGIC: &[u8; 6] = b"FSKNN1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Fraud,
    Honest,
}

impl Label {
    pub fn is_fraud(self) -> bool {
        self == Label::Fraud
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub features: Vec<f64>,
    pub label: Label,
    #[serde(default)]
    pub worker_id: Option<String>,
}

impl LabeledExample {
    pub fn new(features: &FeatureVector, label: Label, worker_id: Option<String>) -> Self {
        LabeledExample {
            features: features.to_array().to_vec(),
            label,
            worker_id,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnModel {
    k: usize,
    mins: Vec<f64>,
    maxs: Vec<f64>,
    points: Vec<Vec<f64>>,
    labels: Vec<Label>,
}

fn normalize(x: &[f64], mins: &[f64], maxs: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(mins.iter().zip(maxs))
        .map(|(&v, (&lo, &hi))| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
        .collect()
}

/// Fit normalization and store the training set.
pub fn train(examples: &[LabeledExample], k: usize) -> Result<KnnModel, ClassifierError> {
    let n = examples.len();
    if k == 0 || k > n {
        return Err(ClassifierError::BadK { k, n });
    }
    let has_fraud = examples.iter().any(|e| e.label.is_fraud());
    let has_honest = examples.iter().any(|e| !e.label.is_fraud());
    if !(has_fraud && has_honest) {
        return Err(ClassifierError::SingleClass);
    }
    let dim = examples[0].features.len();
    if examples
        .iter()
        .any(|e| e.features.len() != dim || e.features.iter().any(|v| !v.is_finite()))
    {
        return Err(ClassifierError::Dimension);
    }
    let mut mins = vec![f64::INFINITY; dim];
    let mut maxs = vec![f64::NEG_INFINITY; dim];
    for e in examples {
        for (d, &v) in e.features.iter().enumerate() {
            mins[d] = mins[d].min(v);
            maxs[d] = maxs[d].max(v);
        }
    }
    let points = examples
        .iter()
        .map(|e| normalize(&e.features, &mins, &maxs))
        .collect();
    Ok(KnnModel {
        k,
        mins,
        maxs,
        points,
        labels: examples.iter().map(|e| e.label).collect(),
    })
}

impl KnnModel {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.mins.len()
    }

    /// Normalized training vectors, in insertion order.
    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    /// Fraction of fraud among the `k` nearest training points.
    pub fn score(&self, features: &[f64]) -> f64 {
        let q = normalize(features, &self.mins, &self.maxs);
        let mut d: Vec<(f64, usize)> = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let s: f64 = p.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum();
                (s, i)
            })
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if self.k < d.len() {
            d.select_nth_unstable_by(self.k - 1, cmp);
            d.truncate(self.k);
        }
        let fraud = d.iter().filter(|(_, i)| self.labels[*i].is_fraud()).count();
        fraud as f64 / self.k as f64
    }

    pub fn score_features(&self, f: &FeatureVector) -> f64 {
        self.score(&f.to_array())
    }

    pub fn score_many(&self, queries: &[Vec<f64>], exec: Exec) -> Vec<f64> {
        exec.map(queries.iter().collect(), |q| self.score(q))
    }

    /// Write the binary model file.
    ///
    /// Layout: `FSKNN1`, then little-endian `u64` k, dimension and row
    /// count, the per-dimension minima and maxima as `f64`, then one row per
    /// training point: its label (`1.0` fraud, `0.0` honest) followed by its
    /// normalized coordinates, all `f64`.
    pub fn save<W: Write>(&self, mut w: W) -> Result<(), ClassifierError> {
        w.write_all(MAGIC)?;
        for v in [self.k as u64, self.dim() as u64, self.len() as u64] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in self.mins.iter().chain(&self.maxs) {
            w.write_all(&v.to_le_bytes())?;
        }
        for (p, l) in self.points.iter().zip(&self.labels) {
            let lv: f64 = if l.is_fraud() { 1.0 } else { 0.0 };
            w.write_all(&lv.to_le_bytes())?;
            for v in p {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self, ClassifierError> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ClassifierError::Format("bad magic".into()));
        }
        let mut u = || -> Result<u64, ClassifierError> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        };
        let (k, dim, n) = (u()? as usize, u()? as usize, u()? as usize);
        if k == 0 || k > n || dim > 4096 {
            return Err(ClassifierError::Format(format!("k={k} dim={dim} n={n}")));
        }
        let mut f = || -> Result<f64, ClassifierError> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(f64::from_le_bytes(b))
        };
        let mins = (0..dim).map(|_| f()).collect::<Result<Vec<_>, _>>()?;
        let maxs = (0..dim).map(|_| f()).collect::<Result<Vec<_>, _>>()?;
        let mut points = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(match f()? {
                1.0 => Label::Fraud,
                0.0 => Label::Honest,
                l => return Err(ClassifierError::Format(format!("label {l}"))),
            });
            points.push((0..dim).map(|_| f()).collect::<Result<Vec<_>, _>>()?);
        }
        Ok(KnnModel {
            k,
            mins,
            maxs,
            points,
            labels,
        })
    }
}

/// Confusion counts with fraud as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn add(&mut self, truth: Label, predicted_fraud: bool) {
        match (truth.is_fraud(), predicted_fraud) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn merge(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.tn += o.tn;
        self.fn_ += o.fn_;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn fpr(&self) -> f64 {
        ratio(self.fp, self.fp + self.tn)
    }

    pub fn fnr(&self) -> f64 {
        ratio(self.fn_, self.fn_ + self.tp)
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvMetrics {
    pub fpr: f64,
    pub fnr: f64,
    pub accuracy: f64,
    pub confusion: Confusion,
    /// Seed that produced usable folds.
    pub seed: u64,
}

const MAX_FOLD_ATTEMPTS: usize = 10;

/// Stratified dealing of example indices into `folds` buckets.
fn stratified_folds(examples: &[LabeledExample], folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fraud: Vec<usize> = (0..examples.len()).filter(|&i| examples[i].label.is_fraud()).collect();
    let mut honest: Vec<usize> = (0..examples.len()).filter(|&i| !examples[i].label.is_fraud()).collect();
    fraud.shuffle(&mut rng);
    honest.shuffle(&mut rng);
    let mut out = vec![Vec::new(); folds];
    for (j, i) in fraud.into_iter().chain(honest).enumerate() {
        out[j % folds].push(i);
    }
    out
}

/// `folds`-fold stratified cross-validation, thresholding scores at 0.5.
pub fn cross_validate(
    examples: &[LabeledExample],
    folds: usize,
    k: usize,
    seed: u64,
    exec: Exec,
) -> Result<CvMetrics, ClassifierError> {
    if folds < 2 {
        return Err(ClassifierError::BadFolds(folds));
    }
    let both = |idx: &[usize]| {
        idx.iter().any(|&i| examples[i].label.is_fraud())
            && idx.iter().any(|&i| !examples[i].label.is_fraud())
    };
    let mut chosen = None;
    for attempt in 0..MAX_FOLD_ATTEMPTS {
        let s = seed.wrapping_add(attempt as u64);
        let f = stratified_folds(examples, folds, s);
        if f.iter().all(|fold| both(fold)) {
            chosen = Some((s, f));
            break;
        }
    }
    let (used_seed, fold_idx) = chosen.ok_or(ClassifierError::FoldResample(MAX_FOLD_ATTEMPTS))?;

    let results = exec.map_range(folds, |f| -> Result<Confusion, ClassifierError> {
        let mut in_test = vec![false; examples.len()];
        for &i in &fold_idx[f] {
            in_test[i] = true;
        }
        let train_set: Vec<LabeledExample> = examples
            .iter()
            .zip(&in_test)
            .filter(|(_, t)| !**t)
            .map(|(e, _)| e.clone())
            .collect();
        let model = train(&train_set, k)?;
        let mut c = Confusion::default();
        for &i in &fold_idx[f] {
            let r = model.score(&examples[i].features);
            c.add(examples[i].label, r >= DEFAULT_THRESHOLD);
        }
        Ok(c)
    });
    let mut confusion = Confusion::default();
    for r in results {
        confusion.merge(&r?);
    }
    Ok(CvMetrics {
        fpr: confusion.fpr(),
        fnr: confusion.fnr(),
        accuracy: confusion.accuracy(),
        confusion,
        seed: used_seed,
    })
}
