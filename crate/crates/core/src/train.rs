//! Contrastive pretraining and frozen-backbone prompt tuning.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::{derive_seed, Dataset, Vocabulary};
use crate::error::{Error, Result};
use crate::gradcheck::{check_gradients_mixed, check_scalar_fn, GradCheckReport, ScalarFn};
use crate::graph::{Gradients, Graph, Var};
use crate::model::{
    contrastive_pretrain_loss, cosine_logits, encode_images_with, encode_texts_with, Backbone,
    Bind, Injection, Model, ModelConfig,
};
use crate::prompts::{
    class_inputs, image_graph, init_prompts, resolve, text_graph, PromptBank, PromptConfig,
    Variant,
};
use crate::tensor::{Real, Tensor};

// ---- optimisers -------------------------------------------------------------

/// `v = momentum * v + g; p -= lr * v`, element-wise over matching lists.
pub fn sgd_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    lr: f64,
    momentum: f64,
    velocity: &mut [Tensor<T>],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Contract(format!(
            "sgd over {} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    let (lr, mu) = (T::of(lr), T::of(momentum));
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape("sgd_step", p.shape(), g.shape()));
        }
        for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = mu * *vi + gi;
            *pi = *pi - lr * *vi;
        }
    }
    Ok(())
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64, shapes: &[&[usize]]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let step = T::of(self.lr * c2.sqrt() / c1);
        let eps = T::of(self.eps * c2.sqrt());
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (pj, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                *pj = *pj - step * m[j] / (v[j].sqrt() + eps);
            }
        }
    }
}

// ---- logging ------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

fn log_line(log: &mut Option<&mut dyn Write>, rec: &LogRecord) -> Result<()> {
    if let Some(w) = log.as_mut() {
        let line = serde_json::to_string(rec).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

fn check_finite(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Training {
            step,
            reason: format!("loss is {loss}"),
        })
    }
}

// ---- pretraining --------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Temperature of the contrastive objective (the tuned model uses its own).
    pub temperature: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 32,
            lr: 1e-3,
            temperature: 0.07,
            seed: 0,
        }
    }
}

/// Batches of distinct classes: every batch holds at most one sample per
/// class, so no batch contains a duplicate caption.
fn distinct_class_batches(ds: &Dataset, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in ds.samples.iter().enumerate() {
        by_class.entry(s.class).or_default().push(i);
    }
    for v in by_class.values_mut() {
        v.shuffle(rng);
    }
    let mut out = Vec::new();
    loop {
        let mut live: Vec<u32> = by_class
            .iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(&c, _)| c)
            .collect();
        if live.len() < 2 {
            break;
        }
        live.shuffle(rng);
        for chunk in live.chunks(batch) {
            if chunk.len() < 2 {
                continue;
            }
            out.push(
                chunk
                    .iter()
                    .map(|c| by_class.get_mut(c).and_then(Vec::pop).expect("live class"))
                    .collect(),
            );
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: Model<f32>,
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Trains a fresh backbone with the symmetric contrastive loss using Adam.
pub fn pretrain(
    config: &ModelConfig,
    ds: &Dataset,
    cfg: &PretrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<PretrainOutcome> {
    if ds.class_ids().len() < 2 {
        return Err(Error::Insufficient("pretraining needs at least 2 classes".into()));
    }
    let mut model = Model::<f32>::init(config.clone(), cfg.seed)?;
    let shapes: Vec<Vec<usize>> = model
        .backbone
        .named()
        .iter()
        .map(|(_, t)| t.shape().to_vec())
        .collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut adam = Adam::new(cfg.lr, &shape_refs);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x9e7]));
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let batches = distinct_class_batches(ds, cfg.batch_size, &mut rng);
        let mut total = 0.0;
        for idx in &batches {
            let images: Vec<Tensor<f32>> = idx.iter().map(|&i| ds.samples[i].image.clone()).collect();
            let captions: Vec<Vec<u32>> = idx.iter().map(|&i| ds.samples[i].caption.clone()).collect();
            let mut g = Graph::<f32>::new();
            let w = model.backbone.bind(&mut g, true);
            let x = encode_images_with(&mut g, &w.vision, config, &images, Injection::NONE)?;
            let z = encode_texts_with(&mut g, &w.text, config, &captions, None, Injection::NONE)?;
            let loss = contrastive_pretrain_loss(&mut g, x, z, cfg.temperature)?;
            let lv = g.value(loss).data()[0] as f64;
            check_finite(step, lv)?;
            let grads = g.backward(loss)?;
            let leaves: Vec<Var> = w.named().into_iter().map(|(_, &v)| v).collect();
            let gl: Vec<Tensor<f32>> = leaves.iter().map(|&v| grads.wrt(v)).collect();
            drop(g);
            let mut params: Vec<&mut Tensor<f32>> = backbone_leaves_mut(&mut model.backbone);
            adam.update(&mut params, &gl);
            log_line(
                &mut log,
                &LogRecord {
                    step,
                    epoch,
                    loss: lv,
                    lr: cfg.lr,
                },
            )?;
            total += lv;
            step += 1;
        }
        epoch_losses.push(total / batches.len().max(1) as f64);
    }
    // the contrastive temperature is frozen into the model from here on, at
    // the f32 precision checkpoints record
    model.temperature = cfg.temperature as f32 as f64;
    Ok(PretrainOutcome {
        model,
        epoch_losses,
        steps: step,
    })
}

/// Mutable references to every backbone leaf, in [`Backbone::named`] order.
pub fn backbone_leaves_mut<T>(b: &mut Backbone<Tensor<T>>) -> Vec<&mut Tensor<T>> {
    let mut out: Vec<&mut Tensor<T>> = Vec::new();
    let v = &mut b.vision;
    out.push(&mut v.patch_embed);
    out.push(&mut v.class_token);
    out.push(&mut v.pos);
    tower_leaves(&mut v.tower, &mut out);
    let t = &mut b.text;
    out.push(&mut t.token_embed);
    out.push(&mut t.pos);
    tower_leaves(&mut t.tower, &mut out);
    out
}

fn tower_leaves<'a, T>(t: &'a mut crate::model::Tower<Tensor<T>>, out: &mut Vec<&'a mut Tensor<T>>) {
    for b in &mut t.blocks {
        out.push(&mut b.ln1.gain);
        out.push(&mut b.ln1.bias);
        out.push(&mut b.q.weight);
        out.push(&mut b.q.bias);
        out.push(&mut b.k);
        out.push(&mut b.v.weight);
        out.push(&mut b.v.bias);
        out.push(&mut b.o.weight);
        out.push(&mut b.o.bias);
        out.push(&mut b.ln2.gain);
        out.push(&mut b.ln2.bias);
        out.push(&mut b.fc1.weight);
        out.push(&mut b.fc1.bias);
        out.push(&mut b.fc2.weight);
        out.push(&mut b.fc2.bias);
    }
    out.push(&mut t.ln_final.gain);
    out.push(&mut t.ln_final.bias);
    out.push(&mut t.proj);
}

/// SHA-256 over every backbone leaf's name, shape and raw bits, plus the
/// temperature.
pub fn backbone_hash<T: Real>(model: &Model<T>) -> String {
    let mut h = Sha256::new();
    for (name, t) in model.backbone.named() {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.bits().to_le_bytes());
        }
    }
    h.update(model.temperature.to_bits().to_le_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

// ---- prompt tuning ------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct TuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 4,
            lr: 0.0035,
            momentum: 0.9,
            seed: 1,
        }
    }
}

impl TuneConfig {
    /// Settings for the source model of transfer experiments (2 epochs,
    /// lr 0.0026); pair with a prompt depth of 3.
    pub fn source() -> Self {
        Self {
            epochs: 2,
            lr: 0.0026,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "need lr >= 0 and momentum in [0, 1), got {} and {}",
                self.lr, self.momentum
            )));
        }
        Ok(())
    }
}

/// Few-shot training data: images, labels as indices into `class_names`.
#[derive(Clone, Debug)]
pub struct TuneTask {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
    pub class_names: Vec<Vec<u32>>,
}

impl TuneTask {
    /// Labels are positions of each sample's class in `classes`.
    pub fn from_dataset(ds: &Dataset, classes: &[u32]) -> Result<Self> {
        let names = ds.class_names();
        let class_names = classes
            .iter()
            .map(|c| {
                names
                    .get(c)
                    .cloned()
                    .ok_or_else(|| Error::Insufficient(format!("class {c} has no samples")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut images = Vec::with_capacity(ds.len());
        let mut labels = Vec::with_capacity(ds.len());
        for s in &ds.samples {
            if let Some(pos) = classes.iter().position(|&c| c == s.class) {
                images.push(s.image.clone());
                labels.push(pos);
            }
        }
        Ok(Self {
            images,
            labels,
            class_names,
        })
    }
}

/// Embeddings that do not depend on prompts for this variant.
struct Frozen<T: Real> {
    images: Option<Tensor<T>>,
    texts: Option<Tensor<T>>,
}

fn frozen_side<T: Real>(
    model: &Model<T>,
    cfg: &PromptConfig,
    images: &[Tensor<T>],
    class_inputs: &[Vec<u32>],
) -> Result<Frozen<T>> {
    let images = if cfg.variant.prompts_vision() {
        None
    } else {
        let mut rows = Vec::new();
        for chunk in images.chunks(64) {
            rows.extend_from_slice(model.encode_images(chunk)?.data());
        }
        Some(Tensor::new(vec![images.len(), model.config.d_vl], rows)?)
    };
    let texts = if cfg.variant.prompts_text() {
        None
    } else {
        Some(model.encode_texts(class_inputs)?)
    };
    Ok(Frozen { images, texts })
}

/// Cross-entropy of prompted classification for one batch. Returns the loss
/// node and the bound bank.
#[allow(clippy::too_many_arguments)]
fn batch_loss<T: Real>(
    g: &mut Graph<T>,
    model: &Model<T>,
    cfg: &PromptConfig,
    bank: &PromptBank<Var>,
    images: &[Tensor<T>],
    cached_images: Option<Tensor<T>>,
    cached_texts: Option<&Tensor<T>>,
    class_inputs: &[Vec<u32>],
    labels: &[usize],
) -> Result<Var> {
    let r = resolve(g, bank, cfg)?;
    let x = match cached_images {
        Some(t) => g.constant(t),
        None => {
            let w = model.backbone.vision.bind(g, false);
            image_graph(g, &w, &model.config, &r, images)?
        }
    };
    let z = match cached_texts {
        Some(t) => g.constant(t.clone()),
        None => {
            let w = model.backbone.text.bind(g, false);
            text_graph(g, &w, &model.config, &r, class_inputs)?
        }
    };
    let logits = cosine_logits(g, x, z, model.temperature)?;
    g.cross_entropy(logits, labels)
}

fn bank_grads<T: Real>(bank: &PromptBank<Var>, grads: &Gradients<T>) -> Result<Vec<Tensor<T>>> {
    bank.named()
        .into_iter()
        .map(|(name, &v)| match grads.get(v) {
            Some(_) => Ok(grads.wrt(v)),
            None => Err(Error::Invariant(format!(
                "trainable tensor {name} received no gradient"
            ))),
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TuneOutcome {
    pub bank: PromptBank<Tensor<f32>>,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// SGD on the prompt bank only. The backbone is checked against its hash
/// after every epoch.
pub fn prompt_tune(
    model: &Model<f32>,
    bank: PromptBank<Tensor<f32>>,
    cfg: &PromptConfig,
    tcfg: &TuneConfig,
    vocab: &Vocabulary,
    task: &TuneTask,
    mut log: Option<&mut dyn Write>,
) -> Result<TuneOutcome> {
    tcfg.validate()?;
    cfg.validate(&model.config)?;
    bank.check(cfg, &model.config)?;
    if task.images.is_empty() {
        return Err(Error::Insufficient("no training samples".into()));
    }
    let before = backbone_hash(model);
    let inputs = class_inputs(cfg, &task.class_names, vocab)?;
    let frozen = frozen_side(model, cfg, &task.images, &inputs)?;
    let mut bank = bank;
    let mut velocity: Vec<Tensor<f32>> = bank
        .named()
        .iter()
        .map(|(_, t)| Tensor::zeros(t.shape()))
        .collect();
    let mut order: Vec<usize> = (0..task.images.len()).collect();
    let mut epoch_losses = Vec::with_capacity(tcfg.epochs);
    let mut step = 0;
    for epoch in 0..tcfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            tcfg.seed,
            &[epoch as u64],
        )));
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(tcfg.batch_size) {
            let images: Vec<Tensor<f32>> = idx.iter().map(|&i| task.images[i].clone()).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| task.labels[i]).collect();
            let cached_images = frozen.images.as_ref().map(|t| gather(t, idx));
            let mut g = Graph::<f32>::new();
            let pb = bank.bind(&mut g, true);
            let loss = batch_loss(
                &mut g,
                model,
                cfg,
                &pb,
                &images,
                cached_images,
                frozen.texts.as_ref(),
                &inputs,
                &labels,
            )?;
            let lv = g.value(loss).data()[0] as f64;
            check_finite(step, lv)?;
            if cfg.variant != Variant::None {
                let grads = g.backward(loss)?;
                let gl = bank_grads(&pb, &grads)?;
                drop(g);
                let mut params: Vec<Tensor<f32>> =
                    bank.named().into_iter().map(|(_, t)| t.clone()).collect();
                sgd_step(&mut params, &gl, tcfg.lr, tcfg.momentum, &mut velocity)?;
                let names: Vec<String> = bank.named().into_iter().map(|(n, _)| n).collect();
                bank = PromptBank::from_named(names.into_iter().zip(params).collect())?;
            }
            log_line(
                &mut log,
                &LogRecord {
                    step,
                    epoch,
                    loss: lv,
                    lr: tcfg.lr,
                },
            )?;
            total += lv;
            batches += 1;
            step += 1;
        }
        epoch_losses.push(total / batches as f64);
        let after = backbone_hash(model);
        if after != before {
            return Err(Error::Invariant(format!(
                "backbone changed during epoch {epoch}: {before} -> {after}"
            )));
        }
    }
    Ok(TuneOutcome {
        bank,
        epoch_losses,
        steps: step,
    })
}

fn gather<T: Real>(t: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let mut out = Vec::with_capacity(idx.len() * t.cols());
    for &i in idx {
        out.extend_from_slice(t.row(i));
    }
    Tensor::new(vec![idx.len(), t.cols()], out).expect("non-empty batch")
}

// ---- gradient-check objective -------------------------------------------------

/// The prompt-tuning loss as a function of the bank tensors (in
/// [`PromptBank::named`] order), buildable at any precision.
pub struct TuningObjective {
    pub model: Model<f32>,
    pub cfg: PromptConfig,
    pub layout: PromptBank<Tensor<f32>>,
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
    pub class_inputs: Vec<Vec<u32>>,
}

impl ScalarFn for TuningObjective {
    fn build<T: Real>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var> {
        let model = Model::<T> {
            config: self.model.config.clone(),
            backbone: self.model.backbone.map(|_, t| t.cast()),
            temperature: self.model.temperature,
        };
        let mut it = inputs.iter().copied();
        let bank = self.layout.map(|_, _| it.next().expect("one input per bank tensor"));
        let images: Vec<Tensor<T>> = self.images.iter().map(|t| t.cast()).collect();
        batch_loss(
            g,
            &model,
            &self.cfg,
            &bank,
            &images,
            None,
            None,
            &self.class_inputs,
            &self.labels,
        )
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckSummary {
    pub coordinates: usize,
    pub report64: GradCheckReport,
    pub report32: GradCheckReport,
    /// `(h, worst 64-bit relative error)`: an error falling as `h^2` is
    /// truncation in the oracle, not a wrong derivative.
    pub step_sweep: Vec<(f64, f64)>,
}

/// Step of the reference central differences.
pub const GRADCHECK_STEP: f64 = 1e-5;
/// Worst relative error allowed in 64-bit.
pub const GRADCHECK_TOL_64: f64 = 1e-6;
/// Worst relative error allowed for 32-bit analytic gradients.
pub const GRADCHECK_TOL_32: f64 = 1e-3;

impl GradcheckSummary {
    pub fn passed(&self) -> bool {
        self.report64.max_rel_err <= GRADCHECK_TOL_64 && self.report32.max_rel_err <= GRADCHECK_TOL_32
    }
}

/// Two-layer, width-8 coupled model with `J = 2`, `b = 1`: checks every
/// trainable scalar against central differences at `h = 1e-5`.
pub fn tiny_gradcheck(seed: u64) -> Result<GradcheckSummary> {
    let config = ModelConfig::tiny(2, 8);
    let model = Model::<f32>::init(config.clone(), seed)?;
    let vocab = Vocabulary::standard();
    let cfg = PromptConfig {
        depth: 2,
        length: 1,
        ..PromptConfig::for_model(Variant::Maple, 2)
    };
    let (layout, _) = init_prompts(&cfg, &config, &model.backbone.text.token_embed, &vocab, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x6c]));
    let s = config.image_size;
    let images: Vec<Tensor<f32>> = (0..2)
        .map(|_| Tensor::from_fn(&[s, s, 3], |_| rng.random::<f32>()))
        .collect();
    let names: Vec<Vec<u32>> = ["red circle", "blue square", "green ring"]
        .iter()
        .map(|n| vocab.tokenize(n))
        .collect::<Result<_>>()?;
    let class_inputs = class_inputs(&cfg, &names, &vocab)?;
    let objective = TuningObjective {
        model,
        cfg,
        layout: layout.clone(),
        images,
        labels: vec![0, 2],
        class_inputs,
    };
    let inputs: Vec<Tensor<f32>> = layout.named().into_iter().map(|(_, t)| t.clone()).collect();
    let wide: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast()).collect();
    let report64 = check_scalar_fn(&objective, &wide, GRADCHECK_STEP)?;
    let report32 = check_gradients_mixed(&objective, &inputs, GRADCHECK_STEP)?;
    let step_sweep = [1e-3, 1e-4, 1e-5, 1e-6]
        .iter()
        .map(|&h| Ok((h, check_scalar_fn(&objective, &wide, h)?.max_rel_err)))
        .collect::<Result<_>>()?;
    Ok(GradcheckSummary {
        coordinates: report64.coordinates,
        report64,
        report32,
        step_sweep,
    })
}
