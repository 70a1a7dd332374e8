//! The standard corpora, one base-to-novel run, and sweeps over prompt
//! design axes.

use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{
    benchmark_classes, make_dataset, split, world_classes, Dataset, Split, SplitSpec, Style,
    Vocabulary,
};
use crate::embed::csv_err;
use crate::error::{Error, Result};
use crate::eval::{base_to_novel_eval, MetricsRecord, PromptedClassifier};
use crate::model::Model;
use crate::prompts::{init_prompts, Coupling, InitMode, PromptBank, PromptConfig, Variant};
use crate::tensor::Tensor;
use crate::train::{prompt_tune, TuneConfig, TuneTask};

/// Images per class in the pretraining corpus.
pub const WORLD_PER_CLASS: usize = 48;
pub const WORLD_SEED: u64 = 1;
/// Images per class in the benchmark corpus: 16 shots plus 20 test images.
pub const BENCH_PER_CLASS: usize = 36;
pub const BENCH_SEED: u64 = 7;
pub const BENCH_BASE: usize = 12;
pub const BENCH_SHOTS: usize = 16;

/// Clean renderings of every pretraining concept.
pub fn world_corpus(vocab: &Vocabulary) -> Result<Dataset> {
    make_dataset(&world_classes(), WORLD_PER_CLASS, &Style::CLEAN, vocab, WORLD_SEED)
}

/// Twenty held-out concepts in the shifted style.
pub fn benchmark_corpus(vocab: &Vocabulary) -> Result<Dataset> {
    make_dataset(&benchmark_classes(), BENCH_PER_CLASS, &Style::SHIFTED, vocab, BENCH_SEED)
}

/// Class partition and shot count for a base-to-novel run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Protocol {
    pub base_classes: usize,
    pub shots: usize,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            base_classes: BENCH_BASE,
            shots: BENCH_SHOTS,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub metrics: MetricsRecord,
    pub bank: PromptBank<Tensor<f32>>,
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub spec: SplitSpec,
    pub split: Split,
    /// Set when template initialisation had to fall back to random rows.
    pub init_warning: Option<String>,
}

/// Splits `ds` with the tuning seed, tunes a fresh bank on the base shots and
/// scores both arms. The unprompted variant skips tuning.
pub fn tune_and_eval(
    model: &Model<f32>,
    ds: &Dataset,
    protocol: Protocol,
    prompt: &PromptConfig,
    tcfg: &TuneConfig,
    vocab: &Vocabulary,
    log: Option<&mut dyn Write>,
) -> Result<RunOutcome> {
    let spec = SplitSpec::random(&ds.class_ids(), protocol.base_classes, protocol.shots, tcfg.seed)?;
    let sp = split(ds, &spec)?;
    let (bank, init_warning) = init_prompts(
        prompt,
        &model.config,
        &model.backbone.text.token_embed,
        vocab,
        tcfg.seed,
    )?;
    let (bank, epoch_losses, steps) = if prompt.variant == Variant::None {
        (bank, Vec::new(), 0)
    } else {
        let task = TuneTask::from_dataset(&ds.subset(&sp.base_train), &spec.base)?;
        let out = prompt_tune(model, bank, prompt, tcfg, vocab, &task, log)?;
        (out.bank, out.epoch_losses, out.steps)
    };
    let clf = PromptedClassifier {
        model,
        bank: &bank,
        cfg: prompt,
        vocab,
    };
    let metrics = base_to_novel_eval(&clf, ds, &spec, &sp, vocab)?;
    Ok(RunOutcome {
        metrics,
        bank,
        epoch_losses,
        steps,
        spec,
        split: sp,
        init_warning,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Depth,
    Length,
    Init,
    Variant,
    Coupling,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 5] = [
        SweepAxis::Depth,
        SweepAxis::Length,
        SweepAxis::Init,
        SweepAxis::Variant,
        SweepAxis::Coupling,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Depth => "depth",
            SweepAxis::Length => "length",
            SweepAxis::Init => "init",
            SweepAxis::Variant => "variant",
            SweepAxis::Coupling => "coupling",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SweepAxis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sweep axis {s:?}")))
    }
}

/// Prompt lengths visited by a length sweep.
pub const SWEEP_LENGTHS: [usize; 4] = [1, 2, 4, 8];

/// Labelled configurations along `axis`, all other settings taken from
/// `base`. Depth covers `1..=layers`; the variant axis visits the
/// vision-only, language-only, independent and coupled designs.
pub fn sweep_points(axis: SweepAxis, base: &PromptConfig, layers: usize) -> Vec<(String, PromptConfig)> {
    let with = |f: &dyn Fn(&mut PromptConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match axis {
        SweepAxis::Depth => (1..=layers)
            .map(|j| (j.to_string(), with(&|c| c.depth = j)))
            .collect(),
        SweepAxis::Length => SWEEP_LENGTHS
            .iter()
            .map(|&b| (b.to_string(), with(&|c| c.length = b)))
            .collect(),
        SweepAxis::Init => InitMode::ALL
            .iter()
            .map(|&m| (m.name().to_string(), with(&|c| c.init = m)))
            .collect(),
        SweepAxis::Variant => [
            Variant::VisionDeep,
            Variant::TextDeep,
            Variant::IndependentVl,
            Variant::Maple,
        ]
        .iter()
        .map(|&v| (v.name().to_string(), with(&|c| c.variant = v)))
        .collect(),
        SweepAxis::Coupling => [Coupling::LangToVision, Coupling::VisionToLang]
            .iter()
            .map(|&d| (d.name().to_string(), with(&|c| c.coupling = d)))
            .collect(),
    }
}

/// One sweep point averaged over seeds, per-seed records kept.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub variant: String,
    pub depth: usize,
    pub length: usize,
    pub init: String,
    pub coupling: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<MetricsRecord>,
    pub mean: MetricsRecord,
}

/// Runs every point along `axis` for every seed. Points and seeds run
/// concurrently; rows come back in point order regardless.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    model: &Model<f32>,
    ds: &Dataset,
    protocol: Protocol,
    axis: SweepAxis,
    base: &PromptConfig,
    tcfg: &TuneConfig,
    seeds: &[u64],
    vocab: &Vocabulary,
) -> Result<Vec<SweepRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    let points = sweep_points(axis, base, model.config.layers);
    for (_, p) in &points {
        p.validate(&model.config)?;
    }
    let jobs: Vec<(usize, u64)> = (0..points.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let t = TuneConfig { seed, ..tcfg.clone() };
            tune_and_eval(model, ds, protocol, &points[i].1, &t, vocab, None).map(|o| o.metrics)
        })
        .collect::<Result<Vec<_>>>()?;
    points
        .iter()
        .zip(records.chunks(seeds.len()))
        .map(|((value, p), recs)| {
            Ok(SweepRow {
                axis: axis.name().to_string(),
                value: value.clone(),
                variant: p.variant.name().to_string(),
                depth: p.depth,
                length: p.length,
                init: p.init.name().to_string(),
                coupling: p.coupling.name().to_string(),
                seeds: seeds.to_vec(),
                per_seed: recs.to_vec(),
                mean: MetricsRecord::average(recs)?,
            })
        })
        .collect()
}

/// One CSV line per row: the point, mean metrics, then `;`-joined per-seed
/// values.
pub fn write_sweep_csv<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "axis", "value", "variant", "depth", "length", "init", "coupling", "seeds", "base_acc",
        "novel_acc", "hm", "base_acc_seeds", "novel_acc_seeds", "hm_seeds",
    ])
    .map_err(csv_err)?;
    let join = |v: Vec<String>| v.join(";");
    for r in rows {
        let per = |f: fn(&MetricsRecord) -> f64| join(r.per_seed.iter().map(|m| f(m).to_string()).collect());
        w.write_record([
            r.axis.clone(),
            r.value.clone(),
            r.variant.clone(),
            r.depth.to_string(),
            r.length.to_string(),
            r.init.clone(),
            r.coupling.clone(),
            join(r.seeds.iter().map(u64::to_string).collect()),
            r.mean.base_acc.to_string(),
            r.mean.novel_acc.to_string(),
            r.mean.hm.to_string(),
            per(|m| m.base_acc),
            per(|m| m.novel_acc),
            per(|m| m.hm),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
