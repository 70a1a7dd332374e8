//! Flat `key = value` run configuration.
//!
//! One key per line, `#` starts a comment, unknown or repeated keys are
//! rejected. [`RunConfig::serialize`] writes every key, so a serialized
//! config parses back to itself.

use std::fmt::Display;
use std::str::FromStr;

use crate::data::{benchmark_classes, make_dataset, transfer_classes, world_classes, Dataset, Style, Vocabulary};
use crate::error::{Error, Result};
use crate::experiment::{
    Protocol, SweepAxis, BENCH_BASE, BENCH_PER_CLASS, BENCH_SEED, BENCH_SHOTS, WORLD_PER_CLASS,
    WORLD_SEED,
};
use crate::model::ModelConfig;
use crate::prompts::{Coupling, InitMode, PromptConfig, Variant};
use crate::train::{PretrainConfig, TuneConfig};

/// Which concept set a generated corpus draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Corpus {
    World,
    Benchmark,
    Transfer,
}

impl Corpus {
    pub const ALL: [Corpus; 3] = [Corpus::World, Corpus::Benchmark, Corpus::Transfer];

    pub fn name(self) -> &'static str {
        match self {
            Corpus::World => "world",
            Corpus::Benchmark => "benchmark",
            Corpus::Transfer => "transfer",
        }
    }
}

impl FromStr for Corpus {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Corpus::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown corpus {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StyleName {
    Clean,
    Shifted,
}

impl StyleName {
    pub fn name(self) -> &'static str {
        match self {
            StyleName::Clean => "clean",
            StyleName::Shifted => "shifted",
        }
    }

    pub fn style(self) -> Style {
        match self {
            StyleName::Clean => Style::CLEAN,
            StyleName::Shifted => Style::SHIFTED,
        }
    }
}

impl FromStr for StyleName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(StyleName::Clean),
            "shifted" => Ok(StyleName::Shifted),
            _ => Err(Error::Config(format!("unknown style {s:?}"))),
        }
    }
}

/// A generated corpus: concept set, style, size and seed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusSpec {
    pub corpus: Corpus,
    pub style: StyleName,
    pub per_class: usize,
    pub seed: u64,
}

impl CorpusSpec {
    pub fn generate(&self, vocab: &Vocabulary) -> Result<Dataset> {
        let classes = match self.corpus {
            Corpus::World => world_classes(),
            Corpus::Benchmark => benchmark_classes(),
            Corpus::Transfer => transfer_classes(),
        };
        make_dataset(&classes, self.per_class, &self.style.style(), vocab, self.seed)
    }
}

/// Everything a CLI run can be configured with.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Seeds tuning, pretraining and (as the first of a run) sweeps.
    pub seed: u64,
    pub model: ModelConfig,
    pub prompt: PromptConfig,
    pub tune: TuneConfig,
    pub protocol: Protocol,
    pub pretrain: PretrainConfig,
    /// Corpus the backbone is pretrained on.
    pub pretrain_data: CorpusSpec,
    /// Corpus tuned and evaluated on.
    pub data: CorpusSpec,
    pub sweep_axis: SweepAxis,
    pub sweep_seeds: usize,
    pub embed_pca: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            seed: 1,
            prompt: PromptConfig::for_model(Variant::Maple, model.layers),
            model,
            tune: TuneConfig::default(),
            protocol: Protocol {
                base_classes: BENCH_BASE,
                shots: BENCH_SHOTS,
            },
            pretrain: PretrainConfig::default(),
            pretrain_data: CorpusSpec {
                corpus: Corpus::World,
                style: StyleName::Clean,
                per_class: WORLD_PER_CLASS,
                seed: WORLD_SEED,
            },
            data: CorpusSpec {
                corpus: Corpus::Benchmark,
                style: StyleName::Shifted,
                per_class: BENCH_PER_CLASS,
                seed: BENCH_SEED,
            },
            sweep_axis: SweepAxis::Variant,
            sweep_seeds: 3,
            embed_pca: true,
        }
    }
}

/// Every key with its unit and a short description, in file order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "integer", "tuning and pretraining seed; sweeps use seed, seed+1, ..."),
    ("model.layers", "blocks", "transformer blocks per branch"),
    ("model.d_v", "dims", "vision width"),
    ("model.d_l", "dims", "language width"),
    ("model.d_vl", "dims", "joint embedding width"),
    ("model.image_size", "pixels", "square input side"),
    ("model.patch_size", "pixels", "square patch side"),
    ("model.context_len", "tokens", "padded caption length"),
    ("model.vision_heads", "heads", "vision attention heads"),
    ("model.text_heads", "heads", "language attention heads"),
    ("model.vocab_size", "tokens", "token embedding rows"),
    ("model.mlp_ratio", "x width", "feed-forward expansion"),
    ("prompt.variant", "name", "none|text_shallow|text_deep|vision_deep|independent_vl|maple|maple_progressive"),
    ("prompt.depth", "layers", "prompted layers J"),
    ("prompt.length", "tokens", "prompt tokens b per layer and branch"),
    ("prompt.init", "name", "template_first_layer|template_all_layers|random_all"),
    ("prompt.coupling", "name", "lang_to_vision|vision_to_lang"),
    ("tune.epochs", "epochs", "prompt-tuning epochs"),
    ("tune.batch_size", "images", "prompt-tuning batch"),
    ("tune.lr", "step", "SGD learning rate"),
    ("tune.momentum", "fraction", "SGD momentum"),
    ("split.base_classes", "classes", "classes in the base arm; the rest are novel"),
    ("split.shots", "images/class", "training shots per base class"),
    ("pretrain.epochs", "epochs", "contrastive pretraining epochs"),
    ("pretrain.batch_size", "pairs", "contrastive batch"),
    ("pretrain.lr", "step", "Adam learning rate"),
    ("pretrain.temperature", "scale", "contrastive temperature, kept by the model"),
    ("pretrain.corpus", "name", "world|benchmark|transfer"),
    ("pretrain.style", "name", "clean|shifted"),
    ("pretrain.per_class", "images/class", "pretraining corpus size"),
    ("pretrain.data_seed", "integer", "pretraining corpus seed"),
    ("data.corpus", "name", "world|benchmark|transfer"),
    ("data.style", "name", "clean|shifted"),
    ("data.per_class", "images/class", "benchmark corpus size"),
    ("data.seed", "integer", "benchmark corpus seed"),
    ("sweep.axis", "name", "depth|length|init|variant|coupling"),
    ("sweep.seeds", "runs", "seeds averaged per sweep point"),
    ("embed.pca", "bool", "append two PCA coordinates to exported embeddings"),
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

impl RunConfig {
    pub fn get(&self, key: &str) -> Result<String> {
        let m = &self.model;
        let v = match key {
            "seed" => self.seed.to_string(),
            "model.layers" => m.layers.to_string(),
            "model.d_v" => m.d_v.to_string(),
            "model.d_l" => m.d_l.to_string(),
            "model.d_vl" => m.d_vl.to_string(),
            "model.image_size" => m.image_size.to_string(),
            "model.patch_size" => m.patch_size.to_string(),
            "model.context_len" => m.context_len.to_string(),
            "model.vision_heads" => m.vision_heads.to_string(),
            "model.text_heads" => m.text_heads.to_string(),
            "model.vocab_size" => m.vocab_size.to_string(),
            "model.mlp_ratio" => m.mlp_ratio.to_string(),
            "prompt.variant" => self.prompt.variant.name().to_string(),
            "prompt.depth" => self.prompt.depth.to_string(),
            "prompt.length" => self.prompt.length.to_string(),
            "prompt.init" => self.prompt.init.name().to_string(),
            "prompt.coupling" => self.prompt.coupling.name().to_string(),
            "tune.epochs" => self.tune.epochs.to_string(),
            "tune.batch_size" => self.tune.batch_size.to_string(),
            "tune.lr" => self.tune.lr.to_string(),
            "tune.momentum" => self.tune.momentum.to_string(),
            "split.base_classes" => self.protocol.base_classes.to_string(),
            "split.shots" => self.protocol.shots.to_string(),
            "pretrain.epochs" => self.pretrain.epochs.to_string(),
            "pretrain.batch_size" => self.pretrain.batch_size.to_string(),
            "pretrain.lr" => self.pretrain.lr.to_string(),
            "pretrain.temperature" => self.pretrain.temperature.to_string(),
            "pretrain.corpus" => self.pretrain_data.corpus.name().to_string(),
            "pretrain.style" => self.pretrain_data.style.name().to_string(),
            "pretrain.per_class" => self.pretrain_data.per_class.to_string(),
            "pretrain.data_seed" => self.pretrain_data.seed.to_string(),
            "data.corpus" => self.data.corpus.name().to_string(),
            "data.style" => self.data.style.name().to_string(),
            "data.per_class" => self.data.per_class.to_string(),
            "data.seed" => self.data.seed.to_string(),
            "sweep.axis" => self.sweep_axis.name().to_string(),
            "sweep.seeds" => self.sweep_seeds.to_string(),
            "embed.pca" => self.embed_pca.to_string(),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        };
        Ok(v)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        match key {
            "seed" => self.seed = parse_value(key, v)?,
            "model.layers" => m.layers = parse_value(key, v)?,
            "model.d_v" => m.d_v = parse_value(key, v)?,
            "model.d_l" => m.d_l = parse_value(key, v)?,
            "model.d_vl" => m.d_vl = parse_value(key, v)?,
            "model.image_size" => m.image_size = parse_value(key, v)?,
            "model.patch_size" => m.patch_size = parse_value(key, v)?,
            "model.context_len" => m.context_len = parse_value(key, v)?,
            "model.vision_heads" => m.vision_heads = parse_value(key, v)?,
            "model.text_heads" => m.text_heads = parse_value(key, v)?,
            "model.vocab_size" => m.vocab_size = parse_value(key, v)?,
            "model.mlp_ratio" => m.mlp_ratio = parse_value(key, v)?,
            "prompt.variant" => self.prompt.variant = parse_value(key, v)?,
            "prompt.depth" => self.prompt.depth = parse_value(key, v)?,
            "prompt.length" => self.prompt.length = parse_value(key, v)?,
            "prompt.init" => self.prompt.init = parse_value::<InitMode>(key, v)?,
            "prompt.coupling" => self.prompt.coupling = parse_value::<Coupling>(key, v)?,
            "tune.epochs" => self.tune.epochs = parse_value(key, v)?,
            "tune.batch_size" => self.tune.batch_size = parse_value(key, v)?,
            "tune.lr" => self.tune.lr = parse_value(key, v)?,
            "tune.momentum" => self.tune.momentum = parse_value(key, v)?,
            "split.base_classes" => self.protocol.base_classes = parse_value(key, v)?,
            "split.shots" => self.protocol.shots = parse_value(key, v)?,
            "pretrain.epochs" => self.pretrain.epochs = parse_value(key, v)?,
            "pretrain.batch_size" => self.pretrain.batch_size = parse_value(key, v)?,
            "pretrain.lr" => self.pretrain.lr = parse_value(key, v)?,
            "pretrain.temperature" => self.pretrain.temperature = parse_value(key, v)?,
            "pretrain.corpus" => self.pretrain_data.corpus = parse_value(key, v)?,
            "pretrain.style" => self.pretrain_data.style = parse_value(key, v)?,
            "pretrain.per_class" => self.pretrain_data.per_class = parse_value(key, v)?,
            "pretrain.data_seed" => self.pretrain_data.seed = parse_value(key, v)?,
            "data.corpus" => self.data.corpus = parse_value(key, v)?,
            "data.style" => self.data.style = parse_value(key, v)?,
            "data.per_class" => self.data.per_class = parse_value(key, v)?,
            "data.seed" => self.data.seed = parse_value(key, v)?,
            "sweep.axis" => self.sweep_axis = parse_value(key, v)?,
            "sweep.seeds" => self.sweep_seeds = parse_value(key, v)?,
            "embed.pca" => self.embed_pca = parse_value(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `text` on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Applies every `key = value` line of `text`; a key may appear once.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: repeated key {key:?}", n + 1)));
            }
            self.set(key, value)?;
        }
        Ok(())
    }

    /// Applies a single `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {pair:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn serialize(&self) -> String {
        KEYS.iter()
            .map(|(k, _, _)| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    /// Checks every section against the model it will run on.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.prompt.validate(&self.model)?;
        self.tune_config().validate()?;
        if self.sweep_seeds == 0 {
            return Err(Error::Config("sweep.seeds must be positive".into()));
        }
        if self.protocol.shots == 0 || self.protocol.base_classes == 0 {
            return Err(Error::Config("split.shots and split.base_classes must be positive".into()));
        }
        if self.data.per_class == 0 || self.pretrain_data.per_class == 0 {
            return Err(Error::Config("per_class must be positive".into()));
        }
        if self.model.vocab_size < Vocabulary::standard().len() {
            return Err(Error::Config(format!(
                "model.vocab_size {} is below the vocabulary size {}",
                self.model.vocab_size,
                Vocabulary::standard().len()
            )));
        }
        Ok(())
    }

    pub fn tune_config(&self) -> TuneConfig {
        TuneConfig {
            seed: self.seed,
            ..self.tune.clone()
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            seed: self.seed,
            ..self.pretrain.clone()
        }
    }

    pub fn sweep_seed_list(&self) -> Vec<u64> {
        (0..self.sweep_seeds as u64).map(|k| self.seed + k).collect()
    }

    /// `key = default  [unit]  description` for every key.
    pub fn help_text() -> String {
        let d = Self::default();
        let mut out = String::from("Configuration keys (key = default  [unit]  meaning):\n");
        for (k, unit, what) in KEYS {
            out.push_str(&format!(
                "  {k} = {}  [{unit}]  {what}\n",
                d.get(k).expect("listed key")
            ));
        }
        out
    }
}
