//! Run configuration: TOML with one section per module, named presets, and
//! the precedence defaults < file < preset < explicit overrides.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jacobian::NonPositivePolicy;
use crate::loss::{EdtLossForm, LossWeights, MaskLossKind, Similarity};
use crate::metrics::SmoothnessOptions;
use crate::optim::OptimizerConfig;
use crate::pipeline::PipelineConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub iterations: usize,
    pub learning_rate: f64,
    pub lr_decay_power: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub integration_steps: usize,
    pub levels: Vec<usize>,
    pub roi_dilation: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub gamma0: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub similarity: Similarity,
    pub lncc_window: usize,
    pub mask_loss: MaskLossKind,
    pub edt_loss_form: EdtLossForm,
    pub edt_use_spacing: bool,
}

/// `crop_margin = 8` or `crop_margin = "none"` (full-size solves).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropMargin {
    Voxels(usize),
    FullSize,
}

impl Serialize for CropMargin {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            CropMargin::Voxels(n) => s.serialize_u64(*n as u64),
            CropMargin::FullSize => s.serialize_str("none"),
        }
    }
}

impl<'de> Deserialize<'de> for CropMargin {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => Ok(CropMargin::Voxels(n as usize)),
            Raw::S(s) if s == "none" => Ok(CropMargin::FullSize),
            Raw::S(s) => Err(serde::de::Error::custom(format!(
                "crop_margin must be a voxel count or \"none\", got \"{s}\""
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub crop_margin: CropMargin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub sdlogj_policy: NonPositivePolicy,
    pub sdlogj_exclude_background: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub optimizer: OptimizerSection,
    pub loss: LossSection,
    pub pipeline: PipelineSection,
    pub eval: EvalSection,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let o = OptimizerConfig::default();
        OptimizerSection {
            iterations: o.iterations,
            learning_rate: o.learning_rate,
            lr_decay_power: o.lr_decay_power,
            adam_beta1: o.adam_beta1,
            adam_beta2: o.adam_beta2,
            adam_eps: o.adam_eps,
            integration_steps: o.integration_steps,
            levels: o.levels,
            roi_dilation: o.roi_dilation,
            seed: o.seed,
        }
    }
}

impl Default for LossSection {
    fn default() -> Self {
        let o = OptimizerConfig::default();
        LossSection {
            gamma0: o.weights.gamma0,
            gamma1: o.weights.gamma1,
            gamma2: o.weights.gamma2,
            similarity: o.similarity,
            lncc_window: o.lncc_window,
            mask_loss: o.mask_loss,
            edt_loss_form: o.edt_loss_form,
            edt_use_spacing: false,
        }
    }
}

impl Default for PipelineSection {
    fn default() -> Self {
        let margin = PipelineConfig::default().crop_margin;
        PipelineSection {
            crop_margin: margin.map_or(CropMargin::FullSize, CropMargin::Voxels),
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        let s = SmoothnessOptions::default();
        EvalSection {
            sdlogj_policy: s.policy,
            sdlogj_exclude_background: s.exclude_background,
        }
    }
}

/// Loss variants for cardiac (MSE similarity) and abdomen (LNCC) registration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    CardiacDice,
    CardiacEdt,
    CardiacHybrid,
    AbdomenDice,
    AbdomenEdt,
    AbdomenHybrid,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::CardiacDice,
        Preset::CardiacEdt,
        Preset::CardiacHybrid,
        Preset::AbdomenDice,
        Preset::AbdomenEdt,
        Preset::AbdomenHybrid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::CardiacDice => "cardiac-dice",
            Preset::CardiacEdt => "cardiac-edt",
            Preset::CardiacHybrid => "cardiac-hybrid",
            Preset::AbdomenDice => "abdomen-dice",
            Preset::AbdomenEdt => "abdomen-edt",
            Preset::AbdomenHybrid => "abdomen-hybrid",
        }
    }

    /// `(gamma0, gamma1, gamma2)`.
    pub fn weights(self) -> (f64, f64, f64) {
        match self {
            Preset::CardiacEdt => (1.0, 10.0, 0.01),
            Preset::AbdomenEdt => (1.0, 100.0, 0.1),
            _ => (1.0, 0.1, 0.01),
        }
    }

    pub fn similarity(self) -> Similarity {
        match self {
            Preset::CardiacDice | Preset::CardiacEdt | Preset::CardiacHybrid => Similarity::Mse,
            _ => Similarity::Lncc,
        }
    }

    pub fn mask_loss(self) -> MaskLossKind {
        match self {
            Preset::CardiacDice | Preset::AbdomenDice => MaskLossKind::Dice,
            Preset::CardiacEdt | Preset::AbdomenEdt => MaskLossKind::Edt,
            Preset::CardiacHybrid | Preset::AbdomenHybrid => MaskLossKind::EdtAndDice,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Preset::ALL.iter().map(|p| p.name()).collect();
                Error::InvalidConfig(format!("unknown preset `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

fn parse_error(text: &str, e: &toml::de::Error) -> Error {
    Error::Parse {
        line: e
            .span()
            .map_or(0, |s| text[..s.start].matches('\n').count() + 1),
        message: e.message().to_string(),
    }
}

impl RunConfig {
    /// Parse a config file; absent keys keep their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| parse_error(text, &e))
    }

    /// The full effective configuration, every key written out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn apply_preset(&mut self, preset: Preset) {
        let (g0, g1, g2) = preset.weights();
        self.loss.gamma0 = g0;
        self.loss.gamma1 = g1;
        self.loss.gamma2 = g2;
        self.loss.similarity = preset.similarity();
        self.loss.mask_loss = preset.mask_loss();
    }

    /// Apply a `section.key=value` override, value in TOML syntax.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (path, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("override `{assignment}` is not key=value")))?;
        let (section, key) = path.trim().split_once('.').ok_or_else(|| {
            Error::InvalidConfig(format!("override key `{}` must be section.key", path.trim()))
        })?;
        let mut doc: toml::Table = toml::from_str(&self.to_toml()).expect("own output parses");
        let table = doc
            .get_mut(section)
            .and_then(toml::Value::as_table_mut)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown config section `{section}`")))?;
        let snippet = format!("v = {}", value.trim());
        let parsed: toml::Table = toml::from_str(&snippet)
            .or_else(|_| toml::from_str(&format!("v = {:?}", value.trim())))
            .map_err(|e| Error::InvalidConfig(format!("bad value in `{assignment}`: {}", e.message())))?;
        table.insert(key.to_string(), parsed["v"].clone());
        let text = toml::to_string(&doc).expect("table serializes");
        *self = toml::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("override `{assignment}`: {}", e.message())))?;
        Ok(())
    }

    /// Build the pipeline configuration; fails on invalid values.
    pub fn to_pipeline(&self) -> Result<PipelineConfig> {
        let o = &self.optimizer;
        let l = &self.loss;
        let optimizer = OptimizerConfig {
            iterations: o.iterations,
            learning_rate: o.learning_rate,
            lr_decay_power: o.lr_decay_power,
            adam_beta1: o.adam_beta1,
            adam_beta2: o.adam_beta2,
            adam_eps: o.adam_eps,
            weights: LossWeights::new(l.gamma0, l.gamma1, l.gamma2)?,
            similarity: l.similarity,
            lncc_window: l.lncc_window,
            mask_loss: l.mask_loss,
            edt_loss_form: l.edt_loss_form,
            integration_steps: o.integration_steps,
            levels: o.levels.clone(),
            roi_dilation: o.roi_dilation,
            seed: o.seed,
        };
        optimizer.validate()?;
        Ok(PipelineConfig {
            optimizer,
            crop_margin: match self.pipeline.crop_margin {
                CropMargin::Voxels(n) => Some(n),
                CropMargin::FullSize => None,
            },
            smoothness: SmoothnessOptions {
                policy: self.eval.sdlogj_policy,
                exclude_background: self.eval.sdlogj_exclude_background,
            },
            edt_use_spacing: l.edt_use_spacing,
        })
    }

    /// defaults < `file` < `preset` < `overrides`, in that order.
    pub fn layered(file: Option<&str>, preset: Option<Preset>, overrides: &[String]) -> Result<Self> {
        let mut cfg = match file {
            Some(text) => RunConfig::from_toml(text)?,
            None => RunConfig::default(),
        };
        if let Some(p) = preset {
            cfg.apply_preset(p);
        }
        for o in overrides {
            cfg.set(o)?;
        }
        Ok(cfg)
    }
}
