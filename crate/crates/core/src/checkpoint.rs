//! MPLT checkpoint files.
//!
//! Layout, little-endian: magic `"MPLT"`, version `u32`, tensor count `u32`;
//! then per tensor a `u16` name length, the UTF-8 name, a `u8` rank, one
//! `u32` per dimension and the values as `f32`.
//!
//! Besides backbone (`vision.*`, `text.*`) and prompt (`prompt.*`) tensors a
//! checkpoint carries `temperature`, `config.model`, `config.prompt` and
//! `meta.step`, all small `f32` vectors.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use crate::data::Cursor;
use crate::error::{Error, Result};
use crate::model::{Backbone, Model, ModelConfig};
use crate::prompts::{Coupling, InitMode, PromptBank, PromptConfig, Variant};
use crate::tensor::Tensor;

pub const MPLT_MAGIC: &[u8; 4] = b"MPLT";
pub const MPLT_VERSION: u32 = 1;

const TEMPERATURE: &str = "temperature";
const MODEL_CONFIG: &str = "config.model";
const PROMPT_CONFIG: &str = "config.prompt";
const STEP: &str = "meta.step";
/// Largest integer every `f32` below it represents exactly.
const EXACT_F32_INT: u64 = 1 << 24;

/// Named tensors in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))
    }

    pub fn write<W: Write>(&self, out: &mut W) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MPLT_MAGIC);
        buf.extend_from_slice(&MPLT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Format(format!("tensor name of {} bytes", name.len())))?;
            let rank = u8::try_from(t.shape().len())
                .map_err(|_| Error::Format(format!("{name} has rank {}", t.shape().len())))?;
            buf.extend_from_slice(&len.to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d)
                    .map_err(|_| Error::Format(format!("{name} dimension {d} overflows u32")))?;
                buf.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read<R: Read>(input: &mut R) -> Result<Self> {
        let mut buf = Vec::new();
        input.read_to_end(&mut buf)?;
        let mut cur = Cursor::new(&buf, "checkpoint");
        cur.magic(MPLT_MAGIC, MPLT_VERSION)?;
        let count = cur.u32()? as usize;
        let mut seen = HashSet::new();
        let mut tensors = Vec::with_capacity(count.min(1 << 12));
        for _ in 0..count {
            let len = cur.u16()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(Error::Format(format!("duplicate tensor {name}")));
            }
            let rank = cur.u8()? as usize;
            let shape = (0..rank)
                .map(|_| cur.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("{name} shape overflows")))?;
            let data = cur.f32s(n)?;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        cur.finish()?;
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        self.write(&mut bytes)?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut std::fs::File::open(path)?)
    }

    /// Bundles a model with an optional prompt configuration and bank.
    pub fn pack(
        model: &Model<f32>,
        prompts: Option<(&PromptConfig, &PromptBank<Tensor<f32>>)>,
        step: u64,
    ) -> Result<Self> {
        if step >= EXACT_F32_INT {
            return Err(Error::Parameter(format!("step {step} too large to record")));
        }
        let vec = |v: Vec<f32>| Tensor::new(vec![v.len()], v).expect("1-D");
        let c = &model.config;
        let echo = [
            c.layers,
            c.d_v,
            c.d_l,
            c.d_vl,
            c.image_size,
            c.patch_size,
            c.context_len,
            c.vision_heads,
            c.text_heads,
            c.vocab_size,
            c.mlp_ratio,
        ];
        if echo.iter().any(|&v| v as u64 >= EXACT_F32_INT) {
            return Err(Error::Config("model dimension too large to record".into()));
        }
        let mut tensors = vec![
            (MODEL_CONFIG.to_string(), vec(echo.iter().map(|&v| v as f32).collect())),
            (STEP.to_string(), vec(vec![step as f32])),
            (TEMPERATURE.to_string(), vec(vec![model.temperature as f32])),
        ];
        if let Some((cfg, _)) = prompts {
            tensors.push((PROMPT_CONFIG.to_string(), vec(prompt_echo(cfg))));
        }
        tensors.extend(
            model
                .backbone
                .named()
                .into_iter()
                .map(|(n, t)| (n, t.clone())),
        );
        if let Some((cfg, bank)) = prompts {
            bank.check(cfg, &model.config)?;
            tensors.extend(bank.named().into_iter().map(|(n, t)| (n, t.clone())));
        }
        Ok(Self { tensors })
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let e = ints(self.require(MODEL_CONFIG)?, 11, MODEL_CONFIG)?;
        let cfg = ModelConfig {
            layers: e[0],
            d_v: e[1],
            d_l: e[2],
            d_vl: e[3],
            image_size: e[4],
            patch_size: e[5],
            context_len: e[6],
            vision_heads: e[7],
            text_heads: e[8],
            vocab_size: e[9],
            mlp_ratio: e[10],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn step(&self) -> Result<u64> {
        Ok(ints(self.require(STEP)?, 1, STEP)?[0] as u64)
    }

    pub fn model(&self) -> Result<Model<f32>> {
        let config = self.model_config()?;
        let tau = self.require(TEMPERATURE)?;
        if tau.len() != 1 || tau.data()[0].is_nan() || tau.data()[0] <= 0.0 {
            return Err(Error::Format("temperature must be one positive value".into()));
        }
        let layout = Backbone::<Tensor<f32>>::init(&config, 0)?;
        let backbone = layout.try_map(&mut |name, want: &Tensor<f32>| {
            let t = self.require(name)?;
            if t.shape() != want.shape() {
                return Err(Error::Format(format!(
                    "{name} has shape {:?}, configuration implies {:?}",
                    t.shape(),
                    want.shape()
                )));
            }
            Ok(t.clone())
        })?;
        Ok(Model {
            config,
            backbone,
            temperature: tau.data()[0] as f64,
        })
    }

    /// The prompt configuration and bank, if the checkpoint holds them.
    pub fn prompts(&self) -> Result<Option<(PromptConfig, PromptBank<Tensor<f32>>)>> {
        let Some(echo) = self.get(PROMPT_CONFIG) else {
            return Ok(None);
        };
        let e = ints(echo, 5, PROMPT_CONFIG)?;
        let bad = |what: &str| Error::Format(format!("unknown {what} code in {PROMPT_CONFIG}"));
        let cfg = PromptConfig {
            variant: *Variant::ALL.get(e[0]).ok_or_else(|| bad("variant"))?,
            depth: e[1],
            length: e[2],
            init: *InitMode::ALL.get(e[3]).ok_or_else(|| bad("init"))?,
            coupling: match e[4] {
                0 => Coupling::LangToVision,
                1 => Coupling::VisionToLang,
                _ => return Err(bad("coupling")),
            },
        };
        let model = self.model_config()?;
        cfg.validate(&model)?;
        let items = self
            .tensors
            .iter()
            .filter(|(n, _)| n.starts_with("prompt."))
            .cloned()
            .collect();
        let bank = PromptBank::from_named(items)?;
        bank.check(&cfg, &model)?;
        Ok(Some((cfg, bank)))
    }
}

fn prompt_echo(cfg: &PromptConfig) -> Vec<f32> {
    let variant = Variant::ALL.iter().position(|&v| v == cfg.variant).expect("listed");
    let init = InitMode::ALL.iter().position(|&v| v == cfg.init).expect("listed");
    let coupling = match cfg.coupling {
        Coupling::LangToVision => 0,
        Coupling::VisionToLang => 1,
    };
    [variant, cfg.depth, cfg.length, init, coupling]
        .iter()
        .map(|&v| v as f32)
        .collect()
}

fn ints(t: &Tensor<f32>, n: usize, name: &str) -> Result<Vec<usize>> {
    if t.shape() != [n] {
        return Err(Error::Format(format!("{name} must hold {n} values")));
    }
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && (v as u64) < EXACT_F32_INT {
                Ok(v as usize)
            } else {
                Err(Error::Format(format!("{name} holds non-integer {v}")))
            }
        })
        .collect()
}
