//! Accuracy, harmonic mean and the three benchmark protocols.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{domain_shift, Dataset, Sample, Shift, Split, SplitSpec, Vocabulary};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::prompts::{class_inputs, encode_image_prompted, encode_text_prompted, PromptBank, PromptConfig};
use crate::tensor::Tensor;

/// Images scored per forward pass.
const EVAL_CHUNK: usize = 64;

/// `2ab / (a + b)` for percentages; both must be positive.
pub fn harmonic_mean(base: f64, novel: f64) -> Result<f64> {
    if !(base > 0.0 && novel > 0.0) {
        return Err(Error::UndefinedMetric(format!(
            "harmonic mean needs positive accuracies, got {base} and {novel}"
        )));
    }
    Ok(2.0 * base * novel / (base + novel))
}

/// Anything that maps images to an index into `class_names`.
pub trait Classifier: Sync {
    fn predict(&self, images: &[Tensor<f32>], class_names: &[Vec<u32>]) -> Result<Vec<usize>>;
}

/// A frozen backbone with a (possibly empty) prompt bank.
pub struct PromptedClassifier<'a> {
    pub model: &'a Model<f32>,
    pub bank: &'a PromptBank<Tensor<f32>>,
    pub cfg: &'a PromptConfig,
    pub vocab: &'a Vocabulary,
}

impl PromptedClassifier<'_> {
    /// Normalised text embeddings, one row per class.
    pub fn class_embeddings(&self, class_names: &[Vec<u32>]) -> Result<Tensor<f32>> {
        if class_names.is_empty() {
            return Err(Error::Contract("classification needs at least one class".into()));
        }
        let inputs = class_inputs(self.cfg, class_names, self.vocab)?;
        encode_text_prompted(self.model, self.bank, self.cfg, &inputs)
    }

    /// Normalised image embeddings, one row per image.
    pub fn image_embeddings(&self, images: &[Tensor<f32>]) -> Result<Tensor<f32>> {
        let chunks: Vec<Tensor<f32>> = images
            .par_chunks(EVAL_CHUNK)
            .map(|c| encode_image_prompted(self.model, self.bank, self.cfg, c))
            .collect::<Result<_>>()?;
        let mut rows = Vec::with_capacity(images.len() * self.model.config.d_vl);
        for c in &chunks {
            rows.extend_from_slice(c.data());
        }
        Tensor::new(vec![images.len(), self.model.config.d_vl], rows)
    }
}

impl Classifier for PromptedClassifier<'_> {
    fn predict(&self, images: &[Tensor<f32>], class_names: &[Vec<u32>]) -> Result<Vec<usize>> {
        let z = self.class_embeddings(class_names)?;
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.image_embeddings(images)?;
        // the temperature is a positive scale and cannot change the argmax
        Ok((0..images.len())
            .map(|i| {
                let xi = x.row(i);
                let mut best = (0, f32::NEG_INFINITY);
                for c in 0..z.rows() {
                    let s: f32 = xi.iter().zip(z.row(c)).map(|(a, b)| a * b).sum();
                    if s > best.1 {
                        best = (c, s);
                    }
                }
                best.0
            })
            .collect())
    }
}

/// Accuracy of one evaluation arm.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArmResult {
    /// Percent correct.
    pub accuracy: f64,
    pub samples: usize,
    /// Percent correct per class name.
    pub per_class: BTreeMap<String, f64>,
}

/// Classifies `samples` among `classes` (ids) and scores the result.
pub fn evaluate_arm(
    clf: &dyn Classifier,
    samples: &[&Sample],
    classes: &[u32],
    names: &BTreeMap<u32, Vec<u32>>,
    vocab: &Vocabulary,
) -> Result<ArmResult> {
    if samples.is_empty() {
        return Err(Error::Contract("empty test set".into()));
    }
    let class_names = classes
        .iter()
        .map(|c| {
            names
                .get(c)
                .cloned()
                .ok_or_else(|| Error::Contract(format!("no name for class {c}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = samples
        .iter()
        .map(|s| {
            classes
                .iter()
                .position(|&c| c == s.class)
                .ok_or_else(|| Error::Contract(format!("sample of class {} outside the arm", s.class)))
        })
        .collect::<Result<Vec<_>>>()?;
    let images: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.clone()).collect();
    let preds = clf.predict(&images, &class_names)?;
    if preds.len() != labels.len() {
        return Err(Error::Contract(format!(
            "classifier returned {} predictions for {} images",
            preds.len(),
            labels.len()
        )));
    }
    let mut hits = vec![0usize; classes.len()];
    let mut totals = vec![0usize; classes.len()];
    for (&p, &l) in preds.iter().zip(&labels) {
        totals[l] += 1;
        if p == l {
            hits[l] += 1;
        }
    }
    let correct: usize = hits.iter().sum();
    let mut per_class = BTreeMap::new();
    for (i, name) in class_names.iter().enumerate() {
        if totals[i] > 0 {
            per_class.insert(
                vocab.detokenize(name)?,
                100.0 * hits[i] as f64 / totals[i] as f64,
            );
        }
    }
    Ok(ArmResult {
        accuracy: 100.0 * correct as f64 / labels.len() as f64,
        samples: labels.len(),
        per_class,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub base_acc: f64,
    pub novel_acc: f64,
    pub hm: f64,
    pub per_class: BTreeMap<String, f64>,
    /// Number of runs averaged into this record.
    pub seeds: usize,
}

impl MetricsRecord {
    /// Checks ranges and that `hm` agrees with the two arms.
    pub fn validate(&self) -> Result<()> {
        for v in [self.base_acc, self.novel_acc, self.hm] {
            if !(0.0..=100.0).contains(&v) {
                return Err(Error::Invariant(format!("accuracy {v} outside [0, 100]")));
            }
        }
        let hm = harmonic_mean(self.base_acc, self.novel_acc).unwrap_or(0.0);
        if (hm - self.hm).abs() > 1e-9 {
            return Err(Error::Invariant(format!(
                "hm {} disagrees with recomputed {hm}",
                self.hm
            )));
        }
        Ok(())
    }

    /// Means over runs; the harmonic mean is recomputed from the mean arms.
    pub fn average(records: &[MetricsRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Contract("nothing to average".into()));
        }
        let n = records.len() as f64;
        let base = records.iter().map(|r| r.base_acc).sum::<f64>() / n;
        let novel = records.iter().map(|r| r.novel_acc).sum::<f64>() / n;
        let mut per_class: BTreeMap<String, f64> = BTreeMap::new();
        for r in records {
            for (k, v) in &r.per_class {
                *per_class.entry(k.clone()).or_default() += v / n;
            }
        }
        Ok(Self {
            base_acc: base,
            novel_acc: novel,
            hm: harmonic_mean(base, novel).unwrap_or(0.0),
            per_class,
            seeds: records.iter().map(|r| r.seeds).sum(),
        })
    }
}

/// Base accuracy over `base_test` among base names, novel accuracy over
/// `novel_test` among novel names.
pub fn base_to_novel_eval(
    clf: &dyn Classifier,
    ds: &Dataset,
    spec: &SplitSpec,
    split: &Split,
    vocab: &Vocabulary,
) -> Result<MetricsRecord> {
    let names = ds.class_names();
    let pick = |idx: &[usize]| idx.iter().map(|&i| &ds.samples[i]).collect::<Vec<_>>();
    let base = evaluate_arm(clf, &pick(&split.base_test), &spec.base, &names, vocab)?;
    let novel = evaluate_arm(clf, &pick(&split.novel_test), &spec.novel, &names, vocab)?;
    let mut per_class = base.per_class;
    per_class.extend(novel.per_class);
    Ok(MetricsRecord {
        base_acc: base.accuracy,
        novel_acc: novel.accuracy,
        hm: harmonic_mean(base.accuracy, novel.accuracy).unwrap_or(0.0),
        per_class,
        seeds: 1,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CrossDatasetReport {
    pub source: ArmResult,
    pub targets: BTreeMap<String, ArmResult>,
    /// Mean accuracy over the targets.
    pub average: f64,
}

/// Scores a source-trained classifier on its own test data and on each
/// target dataset, every time among that dataset's own class names.
pub fn cross_dataset_eval(
    clf: &dyn Classifier,
    source: &Dataset,
    targets: &[(String, Dataset)],
    vocab: &Vocabulary,
) -> Result<CrossDatasetReport> {
    let arm = |ds: &Dataset| {
        let samples: Vec<&Sample> = ds.samples.iter().collect();
        evaluate_arm(clf, &samples, &ds.class_ids(), &ds.class_names(), vocab)
    };
    let source = arm(source)?;
    let mut out = BTreeMap::new();
    for (name, ds) in targets {
        out.insert(name.clone(), arm(ds)?);
    }
    if out.is_empty() {
        return Err(Error::Contract("cross-dataset evaluation needs a target".into()));
    }
    let average = out.values().map(|a| a.accuracy).sum::<f64>() / out.len() as f64;
    Ok(CrossDatasetReport {
        source,
        targets: out,
        average,
    })
}

/// Accuracy on `ds` after each shift, keyed by shift label.
pub fn domain_gen_eval(
    clf: &dyn Classifier,
    ds: &Dataset,
    shifts: &[Shift],
    vocab: &Vocabulary,
) -> Result<BTreeMap<String, ArmResult>> {
    let classes = ds.class_ids();
    let names = ds.class_names();
    let mut out = BTreeMap::new();
    for shift in shifts {
        let shifted = ds
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| domain_shift(s, shift, i as u64))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Sample> = shifted.iter().collect();
        out.insert(shift.label(), evaluate_arm(clf, &refs, &classes, &names, vocab)?);
    }
    Ok(out)
}
