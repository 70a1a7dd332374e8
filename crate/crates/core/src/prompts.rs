//! Learnable prompt banks and their injection into the frozen encoders.
//!
//! Language prompts are prepended to the word tokens (`[P, W]`) and vision
//! prompts appended after the patch tokens (`[c, E, P̃]`). For deep variants
//! block `i < J` receives a fresh prompt set that replaces the previous
//! block's prompt outputs; the outputs of block `J` are kept and flow through
//! the remaining blocks as ordinary tokens.
//!
//! The coupled variants store prompts on one side only and derive the other
//! side through a per-layer affine map, so both branches backpropagate into
//! the same parameters.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Vocabulary, TEMPLATE};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{
    cosine_logits, encode_images_with, encode_texts_with, Bind, Injection, Linear, Model,
    ModelConfig, Placement, TextWeights, VisionWeights,
};
use crate::tensor::{Real, Tensor};

pub const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    None,
    TextShallow,
    TextDeep,
    VisionDeep,
    IndependentVl,
    Maple,
    MapleProgressive,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::None,
        Variant::TextShallow,
        Variant::TextDeep,
        Variant::VisionDeep,
        Variant::IndependentVl,
        Variant::Maple,
        Variant::MapleProgressive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::TextShallow => "text_shallow",
            Variant::TextDeep => "text_deep",
            Variant::VisionDeep => "vision_deep",
            Variant::IndependentVl => "independent_vl",
            Variant::Maple => "maple",
            Variant::MapleProgressive => "maple_progressive",
        }
    }

    pub fn is_coupled(self) -> bool {
        matches!(self, Variant::Maple | Variant::MapleProgressive)
    }

    pub fn prompts_text(self) -> bool {
        !matches!(self, Variant::None | Variant::VisionDeep)
    }

    pub fn prompts_vision(self) -> bool {
        matches!(
            self,
            Variant::VisionDeep | Variant::IndependentVl | Variant::Maple | Variant::MapleProgressive
        )
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InitMode {
    TemplateFirstLayer,
    TemplateAllLayers,
    RandomAll,
}

impl InitMode {
    pub const ALL: [InitMode; 3] = [
        InitMode::TemplateFirstLayer,
        InitMode::TemplateAllLayers,
        InitMode::RandomAll,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InitMode::TemplateFirstLayer => "template_first_layer",
            InitMode::TemplateAllLayers => "template_all_layers",
            InitMode::RandomAll => "random_all",
        }
    }
}

impl FromStr for InitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        InitMode::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown init mode {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Coupling {
    LangToVision,
    VisionToLang,
}

impl Coupling {
    pub fn name(self) -> &'static str {
        match self {
            Coupling::LangToVision => "lang_to_vision",
            Coupling::VisionToLang => "vision_to_lang",
        }
    }
}

impl FromStr for Coupling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [Coupling::LangToVision, Coupling::VisionToLang]
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown coupling direction {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptConfig {
    pub variant: Variant,
    /// Prompt depth J.
    pub depth: usize,
    /// Prompt length b (per set, both branches).
    pub length: usize,
    pub init: InitMode,
    pub coupling: Coupling,
}

impl PromptConfig {
    /// `J = ceil(0.75 K)`, `b = 2`, template-initialised first layer.
    pub fn for_model(variant: Variant, layers: usize) -> Self {
        Self {
            variant,
            depth: (3 * layers).div_ceil(4).max(1),
            length: 2,
            init: InitMode::TemplateFirstLayer,
            coupling: Coupling::LangToVision,
        }
    }

    /// Full-scale design points: `J = 9`, `b = 2` for the multi-modal
    /// variants, `J = 12`, `b = 4` for single-branch deep prompting.
    pub fn preset(variant: Variant) -> Self {
        let (depth, length) = match variant {
            Variant::TextDeep | Variant::VisionDeep => (12, 4),
            Variant::TextShallow => (1, 4),
            Variant::None => (0, 2),
            _ => (9, 2),
        };
        Self {
            depth,
            length,
            ..Self::for_model(variant, 12)
        }
    }

    /// Number of layers that receive fresh prompts.
    pub fn effective_depth(&self) -> usize {
        match self.variant {
            Variant::None => 0,
            Variant::TextShallow => 1,
            _ => self.depth,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.variant == Variant::None {
            return Ok(());
        }
        if self.length == 0 {
            return Err(Error::Config("prompt length must be at least 1".into()));
        }
        let j = self.effective_depth();
        if j == 0 || j > model.layers {
            return Err(Error::Config(format!(
                "prompt depth {j} outside 1..={}",
                model.layers
            )));
        }
        Ok(())
    }

    /// Trainable scalar count implied by the configuration.
    pub fn census(&self, model: &ModelConfig) -> usize {
        let (j, b) = (self.effective_depth(), self.length);
        let (dl, dv) = (model.d_l, model.d_v);
        let (src, dst) = match self.coupling {
            Coupling::LangToVision => (dl, dv),
            Coupling::VisionToLang => (dv, dl),
        };
        match self.variant {
            Variant::None => 0,
            Variant::TextShallow | Variant::TextDeep => j * b * dl,
            Variant::VisionDeep => j * b * dv,
            Variant::IndependentVl => j * b * (dl + dv),
            Variant::Maple => j * b * src + j * (src * dst + dst),
            Variant::MapleProgressive => {
                j * b * src + j * (src * dst + dst) + (j - 1) * (src * src + src)
            }
        }
    }
}

// ---- bank -------------------------------------------------------------------

/// Trainable prompt state. Which fields are populated depends on the variant.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank<P> {
    /// Language sets `P_k`, each `b x d_l`.
    pub text: Vec<P>,
    /// Vision sets `P̃_k`, each `b x d_v`.
    pub vision: Vec<P>,
    /// Per-layer coupling maps from the stored side to the derived side.
    pub coupling: Vec<Linear<P>>,
    /// Progressive maps `G_1 .. G_{J-1}` on the stored side.
    pub progressive: Vec<Linear<P>>,
}

impl<P> PromptBank<P> {
    pub fn empty() -> Self {
        Self {
            text: Vec::new(),
            vision: Vec::new(),
            coupling: Vec::new(),
            progressive: Vec::new(),
        }
    }

    pub fn try_map<'p, Q, E>(
        &'p self,
        f: &mut dyn FnMut(&str, &'p P) -> Result<Q, E>,
    ) -> Result<PromptBank<Q>, E> {
        let sets = |v: &'p [P], at: &str, f: &mut dyn FnMut(&str, &'p P) -> Result<Q, E>| {
            v.iter()
                .enumerate()
                .map(|(k, p)| f(&format!("prompt.{at}.{k}"), p))
                .collect::<Result<Vec<_>, E>>()
        };
        let maps = |v: &'p [Linear<P>],
                    at: &str,
                    first: usize,
                    f: &mut dyn FnMut(&str, &'p P) -> Result<Q, E>| {
            v.iter()
                .enumerate()
                .map(|(k, l)| {
                    Ok(Linear {
                        weight: f(&format!("prompt.{at}.{}.weight", k + first), &l.weight)?,
                        bias: f(&format!("prompt.{at}.{}.bias", k + first), &l.bias)?,
                    })
                })
                .collect::<Result<Vec<_>, E>>()
        };
        Ok(PromptBank {
            text: sets(&self.text, "text", f)?,
            vision: sets(&self.vision, "vision", f)?,
            coupling: maps(&self.coupling, "coupling", 0, f)?,
            progressive: maps(&self.progressive, "progressive", 1, f)?,
        })
    }

    pub fn map<'p, Q>(&'p self, mut f: impl FnMut(&str, &'p P) -> Q) -> PromptBank<Q> {
        let r: Result<_, std::convert::Infallible> = self.try_map(&mut |n, p| Ok(f(n, p)));
        match r {
            Ok(b) => b,
            Err(e) => match e {},
        }
    }

    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        self.map(|n, p| out.push((n.to_string(), p)));
        out
    }
}

impl<T: Real> PromptBank<Tensor<T>> {
    pub fn scalar_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Rebuilds a bank from named tensors, as produced by [`PromptBank::named`].
    pub fn from_named(items: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut left: BTreeMap<String, Tensor<T>> = items.into_iter().collect();
        let mut sets = |at: &str| -> Vec<Tensor<T>> {
            (0..)
                .map_while(|k| left.remove(&format!("prompt.{at}.{k}")))
                .collect()
        };
        let text = sets("text");
        let vision = sets("vision");
        let mut maps = |at: &str, first: usize| -> Vec<Linear<Tensor<T>>> {
            (first..)
                .map_while(|k| {
                    let w = format!("prompt.{at}.{k}.weight");
                    let b = format!("prompt.{at}.{k}.bias");
                    if left.contains_key(&w) && left.contains_key(&b) {
                        Some(Linear {
                            weight: left.remove(&w)?,
                            bias: left.remove(&b)?,
                        })
                    } else {
                        None
                    }
                })
                .collect()
        };
        let coupling = maps("coupling", 0);
        let progressive = maps("progressive", 1);
        if let Some(n) = left.keys().next() {
            return Err(Error::Format(format!("unexpected prompt tensor {n}")));
        }
        Ok(PromptBank {
            text,
            vision,
            coupling,
            progressive,
        })
    }

    /// Checks that exactly the fields demanded by `cfg` are present with the
    /// right shapes.
    pub fn check(&self, cfg: &PromptConfig, model: &ModelConfig) -> Result<()> {
        let expect = PromptBank::<Tensor<T>>::layout(cfg, model);
        let got: Vec<(String, Vec<usize>)> = self
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if got != expect {
            return Err(Error::Contract(format!(
                "prompt bank does not match variant {}: expected {:?}, found {:?}",
                cfg.variant,
                expect.iter().map(|(n, _)| n).collect::<Vec<_>>(),
                got.iter().map(|(n, _)| n).collect::<Vec<_>>()
            )));
        }
        Ok(())
    }

    /// Names and shapes a bank for `cfg` must have.
    pub fn layout(cfg: &PromptConfig, model: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let shapes = Shapes::of(cfg, model);
        let bank = PromptBank {
            text: vec![vec![cfg.length, model.d_l]; shapes.text],
            vision: vec![vec![cfg.length, model.d_v]; shapes.vision],
            coupling: (0..shapes.coupling)
                .map(|_| Linear {
                    weight: vec![shapes.src, shapes.dst],
                    bias: vec![shapes.dst],
                })
                .collect(),
            progressive: (0..shapes.progressive)
                .map(|_| Linear {
                    weight: vec![shapes.src, shapes.src],
                    bias: vec![shapes.src],
                })
                .collect(),
        };
        bank.named()
            .into_iter()
            .map(|(n, s)| (n, s.clone()))
            .collect()
    }
}

/// Set counts per field for a configuration.
struct Shapes {
    text: usize,
    vision: usize,
    coupling: usize,
    progressive: usize,
    src: usize,
    dst: usize,
}

impl Shapes {
    fn of(cfg: &PromptConfig, model: &ModelConfig) -> Self {
        let j = cfg.effective_depth();
        let reverse = cfg.coupling == Coupling::VisionToLang;
        let (src, dst) = if reverse {
            (model.d_v, model.d_l)
        } else {
            (model.d_l, model.d_v)
        };
        let mut s = Shapes {
            text: 0,
            vision: 0,
            coupling: 0,
            progressive: 0,
            src,
            dst,
        };
        match cfg.variant {
            Variant::None => {}
            Variant::TextShallow | Variant::TextDeep => s.text = j,
            Variant::VisionDeep => s.vision = j,
            Variant::IndependentVl => {
                s.text = j;
                s.vision = j;
            }
            Variant::Maple | Variant::MapleProgressive => {
                if reverse {
                    s.vision = j;
                } else {
                    s.text = j;
                }
                s.coupling = j;
                if cfg.variant == Variant::MapleProgressive {
                    s.progressive = j - 1;
                }
            }
        }
        s
    }
}

impl<T: Real> Bind<T> for PromptBank<Tensor<T>> {
    type Bound = PromptBank<Var>;
    fn bind(&self, g: &mut Graph<T>, trainable: bool) -> PromptBank<Var> {
        self.map(|_, t| g.leaf(t.clone(), trainable))
    }
}

/// Builds a bank for `cfg`. Returns a warning when template initialisation
/// had to be topped up with random rows.
pub fn init_prompts<T: Real>(
    cfg: &PromptConfig,
    model: &ModelConfig,
    token_embed: &Tensor<T>,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<(PromptBank<Tensor<T>>, Option<String>)> {
    cfg.validate(model)?;
    let shapes = Shapes::of(cfg, model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut warning = None;
    let template = if cfg.init == InitMode::RandomAll {
        Vec::new()
    } else {
        vocab.tokenize(TEMPLATE)?
    };
    let b = cfg.length;
    let mut text = Vec::with_capacity(shapes.text);
    for k in 0..shapes.text {
        let mut set = Tensor::randn(&[b, model.d_l], PROMPT_INIT_STD, &mut rng);
        let templated = match cfg.init {
            InitMode::TemplateFirstLayer => k == 0,
            InitMode::TemplateAllLayers => true,
            InitMode::RandomAll => false,
        };
        if templated {
            if b > template.len() {
                warning = Some(format!(
                    "prompt length {b} exceeds the {}-token template; remaining rows are random",
                    template.len()
                ));
            }
            for (r, &id) in template.iter().take(b).enumerate() {
                let src = token_embed.row(id as usize);
                set.data_mut()[r * model.d_l..(r + 1) * model.d_l].copy_from_slice(src);
            }
        }
        text.push(set);
    }
    let vision = (0..shapes.vision)
        .map(|_| Tensor::randn(&[b, model.d_v], PROMPT_INIT_STD, &mut rng))
        .collect();
    let mut affine = |n: usize, i: usize, o: usize| -> Vec<Linear<Tensor<T>>> {
        (0..n)
            .map(|_| Linear {
                weight: Tensor::randn(&[i, o], PROMPT_INIT_STD, &mut rng),
                bias: Tensor::zeros(&[o]),
            })
            .collect()
    };
    let coupling = affine(shapes.coupling, shapes.src, shapes.dst);
    let progressive = affine(shapes.progressive, shapes.src, shapes.src);
    Ok((
        PromptBank {
            text,
            vision,
            coupling,
            progressive,
        },
        warning,
    ))
}

// ---- graph-level resolution ---------------------------------------------------

fn affine<T: Real>(g: &mut Graph<T>, l: &Linear<Var>, x: Var) -> Result<Var> {
    let y = g.matmul(x, l.weight)?;
    g.add_rows(y, l.bias)
}

/// The stored sets of a coupled bank (language side unless reversed).
fn stored<'b>(bank: &'b PromptBank<Var>, cfg: &PromptConfig) -> &'b [Var] {
    match cfg.coupling {
        Coupling::LangToVision => &bank.text,
        Coupling::VisionToLang => &bank.vision,
    }
}

/// Effective stored set for layer `k`: `S_0`, then `S_k + G_k(effective S_{k-1})`.
pub fn progressive_compose<T: Real>(
    g: &mut Graph<T>,
    bank: &PromptBank<Var>,
    cfg: &PromptConfig,
    k: usize,
) -> Result<Var> {
    if cfg.variant != Variant::MapleProgressive {
        return Err(Error::Contract(format!(
            "progressive composition needs maple_progressive, not {}",
            cfg.variant
        )));
    }
    let sets = stored(bank, cfg);
    if k >= sets.len() {
        return Err(Error::Contract(format!(
            "layer {k} is beyond prompt depth {}",
            sets.len()
        )));
    }
    let mut eff = sets[0];
    for (i, &s) in sets.iter().enumerate().take(k + 1).skip(1) {
        let cond = affine(g, &bank.progressive[i - 1], eff)?;
        eff = g.add(s, cond)?;
    }
    Ok(eff)
}

/// The derived prompts for layer `k`: `F_k` applied to the (effective)
/// stored set.
pub fn couple<T: Real>(
    g: &mut Graph<T>,
    bank: &PromptBank<Var>,
    cfg: &PromptConfig,
    k: usize,
) -> Result<Var> {
    if !cfg.variant.is_coupled() {
        return Err(Error::Contract(format!(
            "variant {} has no coupling function",
            cfg.variant
        )));
    }
    let sets = stored(bank, cfg);
    if k >= sets.len() || k >= bank.coupling.len() {
        return Err(Error::Contract(format!(
            "layer {k} is beyond prompt depth {}",
            sets.len()
        )));
    }
    let src = if cfg.variant == Variant::MapleProgressive {
        progressive_compose(g, bank, cfg, k)?
    } else {
        sets[k]
    };
    affine(g, &bank.coupling[k], src)
}

/// Per-layer prompt rows for both branches.
#[derive(Clone, Debug, Default)]
pub struct Resolved {
    pub text: Vec<Var>,
    pub vision: Vec<Var>,
    /// Single input-level text prompt (shallow prompting).
    pub shallow: Option<Var>,
}

/// Expands a bound bank into the prompt rows every layer consumes.
pub fn resolve<T: Real>(
    g: &mut Graph<T>,
    bank: &PromptBank<Var>,
    cfg: &PromptConfig,
) -> Result<Resolved> {
    let mut r = Resolved::default();
    match cfg.variant {
        Variant::None => {}
        Variant::TextShallow => r.shallow = bank.text.first().copied(),
        Variant::TextDeep => r.text = bank.text.clone(),
        Variant::VisionDeep => r.vision = bank.vision.clone(),
        Variant::IndependentVl => {
            r.text = bank.text.clone();
            r.vision = bank.vision.clone();
        }
        Variant::Maple | Variant::MapleProgressive => {
            let j = stored(bank, cfg).len();
            let mut source = Vec::with_capacity(j);
            let mut derived = Vec::with_capacity(j);
            let mut eff = None;
            for k in 0..j {
                // effective sets are built incrementally rather than via
                // progressive_compose, which would redo the chain per layer
                let s = stored(bank, cfg)[k];
                let e = match (cfg.variant, eff) {
                    (Variant::MapleProgressive, Some(prev)) => {
                        let cond = affine(g, &bank.progressive[k - 1], prev)?;
                        g.add(s, cond)?
                    }
                    _ => s,
                };
                eff = Some(e);
                derived.push(affine(g, &bank.coupling[k], e)?);
                source.push(e);
            }
            match cfg.coupling {
                Coupling::LangToVision => {
                    r.text = source;
                    r.vision = derived;
                }
                Coupling::VisionToLang => {
                    r.vision = source;
                    r.text = derived;
                }
            }
        }
    }
    Ok(r)
}

/// Text-encoder input for each class. Variants that prompt the language
/// branch take the bare class name; the others use the hand-written template.
pub fn class_inputs(
    cfg: &PromptConfig,
    names: &[Vec<u32>],
    vocab: &Vocabulary,
) -> Result<Vec<Vec<u32>>> {
    if !cfg.variant.prompts_text() {
        let template = vocab.tokenize(TEMPLATE)?;
        return Ok(names
            .iter()
            .map(|n| template.iter().chain(n).copied().collect())
            .collect());
    }
    Ok(names.to_vec())
}

pub fn text_graph<T: Real>(
    g: &mut Graph<T>,
    w: &TextWeights<Var>,
    model: &ModelConfig,
    r: &Resolved,
    captions: &[Vec<u32>],
) -> Result<Var> {
    let inject = Injection {
        layers: &r.text,
        placement: Placement::Prepend,
    };
    encode_texts_with(g, w, model, captions, r.shallow, inject)
}

pub fn image_graph<T: Real>(
    g: &mut Graph<T>,
    w: &VisionWeights<Var>,
    model: &ModelConfig,
    r: &Resolved,
    images: &[Tensor<T>],
) -> Result<Var> {
    let inject = Injection {
        layers: &r.vision,
        placement: Placement::Append,
    };
    encode_images_with(g, w, model, images, inject)
}

/// Prompted text embeddings `B x d_vl` for already-built encoder inputs.
pub fn encode_text_prompted<T: Real>(
    model: &Model<T>,
    bank: &PromptBank<Tensor<T>>,
    cfg: &PromptConfig,
    captions: &[Vec<u32>],
) -> Result<Tensor<T>> {
    cfg.validate(&model.config)?;
    let mut g = Graph::new();
    let w = model.backbone.text.bind(&mut g, false);
    let pb = bank.bind(&mut g, false);
    let r = resolve(&mut g, &pb, cfg)?;
    let z = text_graph(&mut g, &w, &model.config, &r, captions)?;
    Ok(g.value(z).clone())
}

/// Prompted image embeddings `B x d_vl`.
pub fn encode_image_prompted<T: Real>(
    model: &Model<T>,
    bank: &PromptBank<Tensor<T>>,
    cfg: &PromptConfig,
    images: &[Tensor<T>],
) -> Result<Tensor<T>> {
    cfg.validate(&model.config)?;
    let mut g = Graph::new();
    let w = model.backbone.vision.bind(&mut g, false);
    let pb = bank.bind(&mut g, false);
    let r = resolve(&mut g, &pb, cfg)?;
    let x = image_graph(&mut g, &w, &model.config, &r, images)?;
    Ok(g.value(x).clone())
}

/// Class probabilities `B x C` for a batch of images against class names.
pub fn classify<T: Real>(
    model: &Model<T>,
    bank: &PromptBank<Tensor<T>>,
    cfg: &PromptConfig,
    vocab: &Vocabulary,
    images: &[Tensor<T>],
    class_names: &[Vec<u32>],
) -> Result<Tensor<T>> {
    if class_names.is_empty() {
        return Err(Error::Contract("classification needs at least one class".into()));
    }
    cfg.validate(&model.config)?;
    let inputs = class_inputs(cfg, class_names, vocab)?;
    let mut g = Graph::new();
    let w = model.backbone.bind(&mut g, false);
    let pb = bank.bind(&mut g, false);
    let r = resolve(&mut g, &pb, cfg)?;
    let x = image_graph(&mut g, &w.vision, &model.config, &r, images)?;
    let z = text_graph(&mut g, &w.text, &model.config, &r, &inputs)?;
    let logits = cosine_logits(&mut g, x, z, model.temperature)?;
    let p = g.softmax(logits, 1.0)?;
    Ok(g.value(p).clone())
}
