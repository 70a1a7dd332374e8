//! Dual-encoder vision/language transformer with a shared embedding space.
//!
//! Both towers are pre-norm transformer stacks. The vision tower embeds
//! non-overlapping patches, prepends a class token and reads the class token
//! out after the last block. The text tower embeds word ids, runs causal
//! attention and reads out the last non-pad position. Each readout passes
//! through a final layer norm, a bias-free projection to `d_vl` and L2
//! normalisation.
//!
//! Weights live in plain trees ([`Backbone`]) generic over the leaf type, so
//! the same structure holds tensors, graph handles or gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{AttentionSpec, Graph, Mask, Var};
use crate::tensor::{Real, Tensor};

pub const LAYERNORM_EPS: f64 = 1e-5;
/// Expected row norm of a fresh token or text-position embedding.
pub const TEXT_EMBED_NORM: f64 = 0.5;
/// Std of fresh class-token and image-position embeddings.
pub const VISION_EMBED_STD: f64 = 0.5;
/// Temperature of a fresh model; pretraining replaces it with its own.
pub const DEFAULT_TEMPERATURE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Transformer blocks per tower (K).
    pub layers: usize,
    pub d_v: usize,
    pub d_l: usize,
    pub d_vl: usize,
    pub image_size: usize,
    pub patch_size: usize,
    /// Text sequence length N, including padding.
    pub context_len: usize,
    pub vision_heads: usize,
    pub text_heads: usize,
    pub vocab_size: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            d_v: 96,
            d_l: 64,
            d_vl: 64,
            image_size: 32,
            patch_size: 8,
            context_len: 8,
            vision_heads: 4,
            text_heads: 4,
            vocab_size: crate::data::Vocabulary::standard().len(),
            mlp_ratio: 4,
        }
    }
}

impl ModelConfig {
    /// ViT-B/16 image tower with a 512-wide, 77-token text tower.
    pub fn clip_b16() -> Self {
        Self {
            layers: 12,
            d_v: 768,
            d_l: 512,
            d_vl: 512,
            image_size: 224,
            patch_size: 16,
            context_len: 77,
            vision_heads: 12,
            text_heads: 8,
            vocab_size: 49408,
            mlp_ratio: 4,
        }
    }

    /// Small configuration used by gradient checks: every width is `d`.
    pub fn tiny(layers: usize, d: usize) -> Self {
        Self {
            layers,
            d_v: d,
            d_l: d,
            d_vl: d,
            image_size: 8,
            patch_size: 4,
            context_len: 8,
            vision_heads: 2,
            text_heads: 2,
            vocab_size: crate::data::Vocabulary::standard().len(),
            mlp_ratio: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("d_v", self.d_v),
            ("d_l", self.d_l),
            ("d_vl", self.d_vl),
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("context_len", self.context_len),
            ("vision_heads", self.vision_heads),
            ("text_heads", self.text_heads),
            ("vocab_size", self.vocab_size),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not a multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.d_v.is_multiple_of(self.vision_heads) {
            return Err(Error::Config(format!(
                "d_v {} is not divisible by {} vision heads",
                self.d_v, self.vision_heads
            )));
        }
        if !self.d_l.is_multiple_of(self.text_heads) {
            return Err(Error::Config(format!(
                "d_l {} is not divisible by {} text heads",
                self.d_l, self.text_heads
            )));
        }
        Ok(())
    }

    /// Number of image patches M.
    pub fn patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Values per flattened patch.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

// ---- parameter trees ------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<P> {
    /// `in x out`
    pub weight: P,
    pub bias: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<P> {
    pub gain: P,
    pub bias: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<P> {
    pub ln1: Norm<P>,
    pub q: Linear<P>,
    /// Key projection without bias: a key bias only shifts each query's
    /// scores by a constant, which softmax ignores.
    pub k: P,
    pub v: Linear<P>,
    pub o: Linear<P>,
    pub ln2: Norm<P>,
    pub fc1: Linear<P>,
    pub fc2: Linear<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tower<P> {
    pub blocks: Vec<Block<P>>,
    pub ln_final: Norm<P>,
    /// Bias-free projection into the joint space, `width x d_vl`.
    pub proj: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisionWeights<P> {
    /// `patch_dim x d_v`, no bias.
    pub patch_embed: P,
    pub class_token: P,
    /// `(M + 1) x d_v`
    pub pos: P,
    pub tower: Tower<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextWeights<P> {
    pub token_embed: P,
    /// `N x d_l`
    pub pos: P,
    pub tower: Tower<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<P> {
    pub vision: VisionWeights<P>,
    pub text: TextWeights<P>,
}

type Visit<'a, 'p, P, Q, E> = &'a mut dyn FnMut(&str, &'p P) -> Result<Q, E>;

impl<P> Linear<P> {
    fn try_map<'p, Q, E>(&'p self, at: &str, f: Visit<'_, 'p, P, Q, E>) -> Result<Linear<Q>, E> {
        Ok(Linear {
            weight: f(&format!("{at}.weight"), &self.weight)?,
            bias: f(&format!("{at}.bias"), &self.bias)?,
        })
    }
}

impl<P> Norm<P> {
    fn try_map<'p, Q, E>(&'p self, at: &str, f: Visit<'_, 'p, P, Q, E>) -> Result<Norm<Q>, E> {
        Ok(Norm {
            gain: f(&format!("{at}.gain"), &self.gain)?,
            bias: f(&format!("{at}.bias"), &self.bias)?,
        })
    }
}

impl<P> Block<P> {
    fn try_map<'p, Q, E>(&'p self, at: &str, f: Visit<'_, 'p, P, Q, E>) -> Result<Block<Q>, E> {
        Ok(Block {
            ln1: self.ln1.try_map(&format!("{at}.ln1"), f)?,
            q: self.q.try_map(&format!("{at}.q"), f)?,
            k: f(&format!("{at}.k.weight"), &self.k)?,
            v: self.v.try_map(&format!("{at}.v"), f)?,
            o: self.o.try_map(&format!("{at}.o"), f)?,
            ln2: self.ln2.try_map(&format!("{at}.ln2"), f)?,
            fc1: self.fc1.try_map(&format!("{at}.fc1"), f)?,
            fc2: self.fc2.try_map(&format!("{at}.fc2"), f)?,
        })
    }
}

impl<P> Tower<P> {
    fn try_map<'p, Q, E>(&'p self, at: &str, f: Visit<'_, 'p, P, Q, E>) -> Result<Tower<Q>, E> {
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| b.try_map(&format!("{at}.blocks.{i}"), f))
            .collect::<Result<_, E>>()?;
        Ok(Tower {
            blocks,
            ln_final: self.ln_final.try_map(&format!("{at}.ln_final"), f)?,
            proj: f(&format!("{at}.proj"), &self.proj)?,
        })
    }
}

impl<P> VisionWeights<P> {
    pub fn try_map<'p, Q, E>(&'p self, f: Visit<'_, 'p, P, Q, E>) -> Result<VisionWeights<Q>, E> {
        Ok(VisionWeights {
            patch_embed: f("vision.patch_embed", &self.patch_embed)?,
            class_token: f("vision.class_token", &self.class_token)?,
            pos: f("vision.pos", &self.pos)?,
            tower: self.tower.try_map("vision", f)?,
        })
    }
}

impl<P> TextWeights<P> {
    pub fn try_map<'p, Q, E>(&'p self, f: Visit<'_, 'p, P, Q, E>) -> Result<TextWeights<Q>, E> {
        Ok(TextWeights {
            token_embed: f("text.token_embed", &self.token_embed)?,
            pos: f("text.pos", &self.pos)?,
            tower: self.tower.try_map("text", f)?,
        })
    }
}

impl<P> Backbone<P> {
    /// Structure-preserving map over every leaf with its dotted name.
    pub fn try_map<'p, Q, E>(&'p self, f: Visit<'_, 'p, P, Q, E>) -> Result<Backbone<Q>, E> {
        Ok(Backbone {
            vision: self.vision.try_map(f)?,
            text: self.text.try_map(f)?,
        })
    }

    pub fn map<'p, Q>(&'p self, mut f: impl FnMut(&str, &'p P) -> Q) -> Backbone<Q> {
        let r: Result<_, std::convert::Infallible> = self.try_map(&mut |n, p| Ok(f(n, p)));
        match r {
            Ok(b) => b,
            Err(e) => match e {},
        }
    }

    /// Leaves in a fixed depth-first order with their dotted names.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        self.map(|n, p| out.push((n.to_string(), p)));
        out
    }
}

impl<T: Real> Backbone<Tensor<T>> {
    /// Fresh weights: unit gains, zero biases, `N(0, 1/fan_in)` matrices and
    /// text embeddings with row norm near [`TEXT_EMBED_NORM`] and
    /// [`VISION_EMBED_STD`]-scale image embeddings.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut linear = |i: usize, o: usize| Linear {
            weight: Tensor::randn(&[i, o], 1.0 / (i as f64).sqrt(), &mut rng),
            bias: Tensor::zeros(&[o]),
        };
        let norm = |d: usize| Norm {
            gain: Tensor::full(&[d], T::one()),
            bias: Tensor::zeros(&[d]),
        };
        let tower = |d: usize, linear: &mut dyn FnMut(usize, usize) -> Linear<Tensor<T>>| {
            let hidden = d * cfg.mlp_ratio;
            let blocks = (0..cfg.layers)
                .map(|_| Block {
                    ln1: norm(d),
                    q: linear(d, d),
                    k: linear(d, d).weight,
                    v: linear(d, d),
                    o: linear(d, d),
                    ln2: norm(d),
                    fc1: linear(d, hidden),
                    fc2: linear(hidden, d),
                })
                .collect();
            Tower {
                blocks,
                ln_final: norm(d),
                proj: linear(d, cfg.d_vl).weight,
            }
        };
        let vision_tower = tower(cfg.d_v, &mut linear);
        let text_tower = tower(cfg.d_l, &mut linear);
        let patch_embed = linear(cfg.patch_dim(), cfg.d_v).weight;
        let mut emb_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let text_std = TEXT_EMBED_NORM / (cfg.d_l as f64).sqrt();
        let mut emb = |shape: &[usize], std: f64| Tensor::randn(shape, std, &mut emb_rng);
        Ok(Backbone {
            vision: VisionWeights {
                patch_embed,
                class_token: emb(&[1, cfg.d_v], VISION_EMBED_STD),
                pos: emb(&[cfg.patches() + 1, cfg.d_v], VISION_EMBED_STD),
                tower: vision_tower,
            },
            text: TextWeights {
                token_embed: emb(&[cfg.vocab_size, cfg.d_l], text_std),
                pos: emb(&[cfg.context_len, cfg.d_l], text_std),
                tower: text_tower,
            },
        })
    }

    pub fn scalar_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Weight trees that can be placed on a graph as parameters or constants.
pub trait Bind<T: Real> {
    type Bound;
    fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Self::Bound;
}

fn leaf<T: Real>(g: &mut Graph<T>, t: &Tensor<T>, trainable: bool) -> Var {
    g.leaf(t.clone(), trainable)
}

impl<T: Real> Bind<T> for VisionWeights<Tensor<T>> {
    type Bound = VisionWeights<Var>;
    fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Self::Bound {
        let r: Result<_, std::convert::Infallible> =
            self.try_map(&mut |_, t| Ok(leaf(g, t, trainable)));
        match r {
            Ok(b) => b,
            Err(e) => match e {},
        }
    }
}

impl<T: Real> Bind<T> for TextWeights<Tensor<T>> {
    type Bound = TextWeights<Var>;
    fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Self::Bound {
        let r: Result<_, std::convert::Infallible> =
            self.try_map(&mut |_, t| Ok(leaf(g, t, trainable)));
        match r {
            Ok(b) => b,
            Err(e) => match e {},
        }
    }
}

impl<T: Real> Bind<T> for Backbone<Tensor<T>> {
    type Bound = Backbone<Var>;
    fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Self::Bound {
        Backbone {
            vision: self.vision.bind(g, trainable),
            text: self.text.bind(g, trainable),
        }
    }
}

// ---- forward pass -----------------------------------------------------------

/// Where fresh prompt rows sit within each sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Placement {
    /// `[P, W]`
    Prepend,
    /// `[c, E, P]`
    Append,
}

/// Per-layer prompt rows for a tower. `layers[i]` (a `b x width` node) is
/// inserted before block `i`; it replaces the previous prompt rows when
/// `i > 0`. Blocks past `layers.len()` propagate whatever prompt outputs the
/// last injected layer produced.
#[derive(Clone, Copy, Debug)]
pub struct Injection<'a> {
    pub layers: &'a [Var],
    pub placement: Placement,
}

impl Injection<'_> {
    pub const NONE: Injection<'static> = Injection {
        layers: &[],
        placement: Placement::Append,
    };
}

fn linear<T: Real>(g: &mut Graph<T>, l: &Linear<Var>, x: Var) -> Result<Var> {
    let y = g.matmul(x, l.weight)?;
    g.add_rows(y, l.bias)
}

fn norm<T: Real>(g: &mut Graph<T>, n: &Norm<Var>, x: Var) -> Result<Var> {
    g.layernorm(x, n.gain, n.bias, LAYERNORM_EPS)
}

fn block<T: Real>(g: &mut Graph<T>, b: &Block<Var>, x: Var, spec: AttentionSpec) -> Result<Var> {
    let h = norm(g, &b.ln1, x)?;
    let q = linear(g, &b.q, h)?;
    let k = g.matmul(h, b.k)?;
    let v = linear(g, &b.v, h)?;
    let a = g.attention(q, k, v, spec)?;
    let a = linear(g, &b.o, a)?;
    let x = g.add(x, a)?;
    let h = norm(g, &b.ln2, x)?;
    let h = linear(g, &b.fc1, h)?;
    let h = g.gelu(h);
    let h = linear(g, &b.fc2, h)?;
    g.add(x, h)
}

/// Splices `prompt` into every packed sequence of `x`. `held` is the number
/// of prompt rows each sequence already carries (0 or `b`), which are dropped.
fn splice<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    seq: usize,
    held: usize,
    prompt: Var,
    placement: Placement,
) -> Result<Var> {
    let rows = g.value(x).rows();
    let batch = rows / seq;
    let mut parts = Vec::with_capacity(2 * batch);
    for s in 0..batch {
        let base = s * seq;
        match placement {
            Placement::Prepend => {
                parts.push(prompt);
                parts.push(g.slice_rows(x, base + held, base + seq)?);
            }
            Placement::Append => {
                parts.push(g.slice_rows(x, base, base + seq - held)?);
                parts.push(prompt);
            }
        }
    }
    g.concat_rows(&parts)
}

/// Runs the block stack over packed `(batch * seq) x width` rows.
/// Returns the final rows and the per-sequence length after injection.
#[allow(clippy::too_many_arguments)]
pub fn run_tower<T: Real>(
    g: &mut Graph<T>,
    tower: &Tower<Var>,
    mut x: Var,
    mut seq: usize,
    heads: usize,
    mask: Mask,
    inject: Injection<'_>,
    label: &str,
) -> Result<(Var, usize)> {
    if inject.layers.len() > tower.blocks.len() {
        return Err(Error::Config(format!(
            "prompt depth {} exceeds {} layers",
            inject.layers.len(),
            tower.blocks.len()
        )));
    }
    let mut held = 0;
    for (i, b) in tower.blocks.iter().enumerate() {
        if let Some(&p) = inject.layers.get(i) {
            let plen = g.value(p).rows();
            x = splice(g, x, seq, held, p, inject.placement)?;
            seq = seq - held + plen;
            held = plen;
        }
        let width = g.value(x).cols();
        g.mark(label, vec![g.value(x).rows() / seq, seq, width]);
        let spec = AttentionSpec {
            heads,
            seq_len: seq,
            mask,
        };
        x = block(g, b, x, spec)?;
    }
    Ok((x, seq))
}

/// Final norm, projection and normalisation of the readout rows.
pub fn readout<T: Real>(g: &mut Graph<T>, tower: &Tower<Var>, x: Var, rows: &[usize]) -> Result<Var> {
    let r = g.gather_rows(x, rows)?;
    let r = norm(g, &tower.ln_final, r)?;
    let r = g.matmul(r, tower.proj)?;
    Ok(g.l2_normalize(r))
}

/// Flattens an `H x W x 3` image into `M x (p*p*3)` patch rows, patches in
/// row-major order, values within a patch ordered (y, x, channel).
pub fn patchify<T: Real>(cfg: &ModelConfig, image: &Tensor<T>) -> Result<Vec<T>> {
    let s = cfg.image_size;
    let want = [s, s, 3];
    if image.shape() != want {
        return Err(Error::shape("image", image.shape(), &want));
    }
    let p = cfg.patch_size;
    let side = s / p;
    let mut out = Vec::with_capacity(image.len());
    let px = image.data();
    for py in 0..side {
        for pxi in 0..side {
            for y in 0..p {
                let row = (py * p + y) * s + pxi * p;
                out.extend_from_slice(&px[row * 3..(row + p) * 3]);
            }
        }
    }
    Ok(out)
}

/// Patch, class-token and position embedding for a batch of images:
/// `(B * (M + 1)) x d_v` rows.
pub fn embed_images<T: Real>(
    g: &mut Graph<T>,
    w: &VisionWeights<Var>,
    cfg: &ModelConfig,
    images: &[Tensor<T>],
) -> Result<Var> {
    if images.is_empty() {
        return Err(Error::EmptyAxis("image batch"));
    }
    let m = cfg.patches();
    let mut flat = Vec::with_capacity(images.len() * m * cfg.patch_dim());
    for img in images {
        flat.extend(patchify(cfg, img)?);
    }
    let patches = g.constant(Tensor::new(vec![images.len() * m, cfg.patch_dim()], flat)?);
    let e = g.matmul(patches, w.patch_embed)?;
    let mut parts = Vec::with_capacity(2 * images.len());
    for b in 0..images.len() {
        parts.push(w.class_token);
        parts.push(g.slice_rows(e, b * m, (b + 1) * m)?);
    }
    let x = g.concat_rows(&parts)?;
    g.add_rows(x, w.pos)
}

/// Token and position embedding for padded captions: `(B * N) x d_l` rows
/// plus each caption's unpadded length.
pub fn embed_texts<T: Real>(
    g: &mut Graph<T>,
    w: &TextWeights<Var>,
    cfg: &ModelConfig,
    captions: &[Vec<u32>],
) -> Result<(Var, Vec<usize>)> {
    if captions.is_empty() {
        return Err(Error::EmptyAxis("caption batch"));
    }
    let n = cfg.context_len;
    let mut ids = Vec::with_capacity(captions.len() * n);
    let mut lens = Vec::with_capacity(captions.len());
    for c in captions {
        if c.is_empty() || c.len() > n {
            return Err(Error::Parameter(format!(
                "caption length {} outside 1..={n}",
                c.len()
            )));
        }
        if let Some(&bad) = c.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Vocabulary(format!("token id {bad}")));
        }
        ids.extend(c.iter().map(|&t| t as usize));
        ids.extend(std::iter::repeat_n(0, n - c.len()));
        lens.push(c.len());
    }
    let x = g.embedding(w.token_embed, &ids)?;
    Ok((g.add_rows(x, w.pos)?, lens))
}

/// Image embeddings `B x d_vl` with optional per-layer vision prompts.
pub fn encode_images_with<T: Real>(
    g: &mut Graph<T>,
    w: &VisionWeights<Var>,
    cfg: &ModelConfig,
    images: &[Tensor<T>],
    inject: Injection<'_>,
) -> Result<Var> {
    let x = embed_images(g, w, cfg, images)?;
    let (x, seq) = run_tower(
        g,
        &w.tower,
        x,
        cfg.patches() + 1,
        cfg.vision_heads,
        Mask::None,
        inject,
        "vision.tokens",
    )?;
    let class_rows: Vec<usize> = (0..images.len()).map(|b| b * seq).collect();
    readout(g, &w.tower, x, &class_rows)
}

/// Text embeddings `B x d_vl` with optional per-layer language prompts.
/// `prefix` prompt rows already prepended to the input (shallow prompting)
/// are passed as `shallow`.
pub fn encode_texts_with<T: Real>(
    g: &mut Graph<T>,
    w: &TextWeights<Var>,
    cfg: &ModelConfig,
    captions: &[Vec<u32>],
    shallow: Option<Var>,
    inject: Injection<'_>,
) -> Result<Var> {
    let (mut x, lens) = embed_texts(g, w, cfg, captions)?;
    let mut seq = cfg.context_len;
    if let Some(p) = shallow {
        x = splice(g, x, seq, 0, p, Placement::Prepend)?;
        seq += g.value(p).rows();
    }
    let (x, out_seq) = run_tower(
        g,
        &w.tower,
        x,
        seq,
        cfg.text_heads,
        Mask::Causal,
        inject,
        "text.tokens",
    )?;
    let offset = out_seq - cfg.context_len;
    let rows: Vec<usize> = lens
        .iter()
        .enumerate()
        .map(|(b, &len)| b * out_seq + offset + len - 1)
        .collect();
    readout(g, &w.tower, x, &rows)
}

/// `softmax(x Zᵀ / τ)` on the graph; `x` is `B x d`, `z` is `C x d`.
pub fn similarity_probs<T: Real>(g: &mut Graph<T>, x: Var, z: Var, tau: f64) -> Result<Var> {
    let logits = cosine_logits(g, x, z, tau)?;
    g.softmax(logits, 1.0)
}

/// `x Zᵀ / τ`
pub fn cosine_logits<T: Real>(g: &mut Graph<T>, x: Var, z: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let zt = g.transpose(z)?;
    let s = g.matmul(x, zt)?;
    Ok(g.scale(s, T::of(1.0 / tau)))
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("temperature must be > 0, got {tau}")))
    }
}

/// Class probabilities for unit-norm image embeddings `x` (`d_vl` or
/// `B x d_vl`) against unit-norm class embeddings `z` (`C x d_vl`).
pub fn zero_shot_logits<T: Real>(x: &Tensor<T>, z: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
    check_tau(tau)?;
    let x2 = if x.shape().len() == 1 {
        x.clone().reshape(vec![1, x.len()])?
    } else {
        x.clone()
    };
    let mut g = Graph::new();
    let xv = g.constant(x2);
    let zv = g.constant(z.clone());
    let p = similarity_probs(&mut g, xv, zv, tau)?;
    let out = g.value(p).clone();
    if x.shape().len() == 1 {
        out.reshape(vec![z.rows()])
    } else {
        Ok(out)
    }
}

/// Symmetric InfoNCE over a `B x B` similarity matrix with matched pairs on
/// the diagonal.
pub fn contrastive_pretrain_loss<T: Real>(
    g: &mut Graph<T>,
    images: Var,
    texts: Var,
    tau: f64,
) -> Result<Var> {
    let b = g.value(images).rows();
    if b < 2 || g.value(texts).rows() != b {
        return Err(Error::Parameter(format!(
            "contrastive loss needs matching batches of at least 2, got {b} and {}",
            g.value(texts).rows()
        )));
    }
    let targets: Vec<usize> = (0..b).collect();
    let logits = cosine_logits(g, images, texts, tau)?;
    let i2t = g.cross_entropy(logits, &targets)?;
    let lt = g.transpose(logits)?;
    let t2i = g.cross_entropy(lt, &targets)?;
    let both = g.add(i2t, t2i)?;
    Ok(g.scale(both, T::of(0.5)))
}

/// A backbone plus the configuration and temperature it was built with.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real = f32> {
    pub config: ModelConfig,
    pub backbone: Backbone<Tensor<T>>,
    pub temperature: f64,
}

impl<T: Real> Model<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let backbone = Backbone::init(&config, seed)?;
        Ok(Self {
            config,
            backbone,
            temperature: DEFAULT_TEMPERATURE as f32 as f64,
        })
    }

    pub fn encode_images(&self, images: &[Tensor<T>]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let w = self.backbone.vision.bind(&mut g, false);
        let z = encode_images_with(&mut g, &w, &self.config, images, Injection::NONE)?;
        Ok(g.value(z).clone())
    }

    pub fn encode_texts(&self, captions: &[Vec<u32>]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let w = self.backbone.text.bind(&mut g, false);
        let z = encode_texts_with(&mut g, &w, &self.config, captions, None, Injection::NONE)?;
        Ok(g.value(z).clone())
    }

    /// Unit-norm `d_vl` embedding of one `H x W x 3` image.
    pub fn encode_image(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let z = self.encode_images(std::slice::from_ref(image))?;
        z.reshape(vec![self.config.d_vl])
    }

    /// Unit-norm `d_vl` embedding of one caption (unpadded token ids).
    pub fn encode_text(&self, tokens: &[u32]) -> Result<Tensor<T>> {
        let z = self.encode_texts(&[tokens.to_vec()])?;
        z.reshape(vec![self.config.d_vl])
    }
}
