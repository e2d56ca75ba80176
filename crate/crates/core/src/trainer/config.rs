use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossTerms, TemperatureConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Step1,
    Step2,
    Finetune,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Step1, Stage::Step2, Stage::Finetune];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Step1 => "step1",
            Stage::Step2 => "step2",
            Stage::Finetune => "finetune",
        }
    }

    pub fn previous(self) -> Option<Stage> {
        match self {
            Stage::Step1 => None,
            Stage::Step2 => Some(Stage::Step1),
            Stage::Finetune => Some(Stage::Step2),
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Stage::Step1 => 1,
            Stage::Step2 => 2,
            Stage::Finetune => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.code() == code)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Stage> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown stage `{s}` (step1, step2, finetune)")))
    }
}

/// Trainable parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    EncImg,
    #[serde(rename = "enc_2d")]
    Enc2d,
    #[serde(rename = "enc_3d")]
    Enc3d,
    #[serde(rename = "dec_2d")]
    Dec2d,
    #[serde(rename = "dec_3d")]
    Dec3d,
    Tokens,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::EncImg,
        Group::Enc2d,
        Group::Enc3d,
        Group::Dec2d,
        Group::Dec3d,
        Group::Tokens,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    /// Condition decoders on a per-source representation token.
    pub token: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 64,
            encoder_hidden: vec![128],
            decoder_hidden: vec![128],
            token: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    /// Weight of the triplet term in `L_pair + α L_triplet`.
    pub alpha: f64,
    pub tau_pair: TemperatureConfig,
    pub tau_triplet: TemperatureConfig,
    pub pair_2d_3d: bool,
    pub pair_image_2d: bool,
    pub pair_image_3d: bool,
    pub triplet: bool,
    /// Weight of the pose regression losses; only the finetune may use them.
    pub task_weight: f64,
    pub train: Vec<Group>,
    /// Extra checkpoint every N steps (0: end of stage only).
    pub checkpoint_every: usize,
    /// Defaults to a value derived from the top-level seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl StageConfig {
    pub fn default_for(stage: Stage) -> StageConfig {
        match stage {
            Stage::Step1 => StageConfig {
                batch_size: 256,
                steps: 1500,
                lr: 1e-3,
                alpha: 0.0,
                tau_pair: TemperatureConfig::new(1.0 / 14.0, 1.0 / 100.0, 1e4),
                tau_triplet: TemperatureConfig::new(1.0 / 14.0, 1.0 / 100.0, 1e4),
                pair_2d_3d: true,
                pair_image_2d: false,
                pair_image_3d: false,
                triplet: false,
                task_weight: 0.0,
                train: vec![Group::Enc2d, Group::Enc3d],
                checkpoint_every: 0,
                seed: None,
            },
            Stage::Step2 => StageConfig {
                batch_size: 64,
                steps: 1500,
                lr: 1e-3,
                alpha: 1.0,
                tau_pair: TemperatureConfig::new(1.0 / 5.0, 1.0 / 10.0, 1e4),
                tau_triplet: TemperatureConfig::new(1.0 / 5.0, 1.0 / 10.0, 1e4),
                pair_2d_3d: false,
                pair_image_2d: true,
                pair_image_3d: true,
                triplet: true,
                task_weight: 0.0,
                train: vec![Group::EncImg],
                checkpoint_every: 0,
                seed: None,
            },
            Stage::Finetune => StageConfig {
                batch_size: 64,
                steps: 1000,
                lr: 1e-3,
                alpha: 1.0,
                tau_pair: TemperatureConfig::new(1.0 / 5.0, 1.0 / 5.0, 1e4),
                tau_triplet: TemperatureConfig::new(1.0 / 5.0, 1.0 / 5.0, 1e4),
                pair_2d_3d: true,
                pair_image_2d: true,
                pair_image_3d: true,
                triplet: true,
                task_weight: 1.0,
                train: Group::ALL.to_vec(),
                checkpoint_every: 0,
                seed: None,
            },
        }
    }

    pub fn terms(&self) -> LossTerms {
        LossTerms {
            pair_2d_3d: self.pair_2d_3d,
            pair_image_2d: self.pair_image_2d,
            pair_image_3d: self.pair_image_3d,
            triplet: self.triplet,
        }
    }

    pub fn trains(&self, g: Group) -> bool {
        self.train.contains(&g)
    }

    /// Checks the stage invariants; errors name the offending field.
    pub fn validate(&self, stage: Stage, model: &ModelConfig) -> Result<()> {
        let field = |f: &str| format!("{stage}.{f}");
        if self.batch_size < 2 {
            return Err(Error::config(field("batch_size"), "must be at least 2"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(field("lr"), "must be finite and non-negative"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(field("alpha"), "must be finite and non-negative"));
        }
        if !(self.task_weight >= 0.0 && self.task_weight.is_finite()) {
            return Err(Error::config(field("task_weight"), "must be finite and non-negative"));
        }
        self.tau_pair
            .validate()
            .map_err(|e| Error::config(field("tau_pair"), e.to_string()))?;
        self.tau_triplet
            .validate()
            .map_err(|e| Error::config(field("tau_triplet"), e.to_string()))?;
        let mut train = self.train.clone();
        train.sort_unstable();
        if train.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config(field("train"), "lists a group twice"));
        }
        let expected: Vec<Group> = match stage {
            Stage::Step1 => vec![Group::Enc2d, Group::Enc3d],
            Stage::Step2 => vec![Group::EncImg],
            Stage::Finetune => Group::ALL
                .into_iter()
                .filter(|g| model.token || *g != Group::Tokens)
                .collect(),
        };
        let tokens_ok = stage == Stage::Finetune && !model.token;
        let train_cmp: Vec<Group> = if tokens_ok {
            train.iter().copied().filter(|g| *g != Group::Tokens).collect()
        } else {
            train
        };
        if train_cmp != expected {
            return Err(Error::config(
                field("train"),
                format!("{stage} must train exactly {expected:?}"),
            ));
        }
        match stage {
            Stage::Step1 => {
                if self.triplet {
                    return Err(Error::config(field("triplet"), "step1 uses only the 2D-3D pair loss"));
                }
                if self.pair_image_2d || self.pair_image_3d {
                    return Err(Error::config(
                        field(if self.pair_image_2d { "pair_image_2d" } else { "pair_image_3d" }),
                        "step1 has no image encoder to align",
                    ));
                }
                if !self.pair_2d_3d {
                    return Err(Error::config(field("pair_2d_3d"), "step1 needs the 2D-3D pair loss"));
                }
            }
            Stage::Step2 => {
                if self.pair_2d_3d {
                    return Err(Error::config(
                        field("pair_2d_3d"),
                        "both pose encoders are frozen in step2",
                    ));
                }
                if !self.pair_image_2d && !self.pair_image_3d && !self.triplet {
                    return Err(Error::config(field("triplet"), "step2 needs at least one loss term"));
                }
            }
            Stage::Finetune => {
                if !(self.task_weight > 0.0) {
                    return Err(Error::config(field("task_weight"), "the finetune needs the task loss"));
                }
            }
        }
        if stage != Stage::Finetune && self.task_weight != 0.0 {
            return Err(Error::config(field("task_weight"), "only the finetune uses the task loss"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub step1: StageConfig,
    pub step2: StageConfig,
    pub finetune: StageConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            model: ModelConfig::default(),
            step1: StageConfig::default_for(Stage::Step1),
            step2: StageConfig::default_for(Stage::Step2),
            finetune: StageConfig::default_for(Stage::Finetune),
        }
    }
}

// Partial forms used for parsing, so that each stage section falls back to
// its own defaults field by field.

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    embed_dim: Option<usize>,
    encoder_hidden: Option<Vec<usize>>,
    decoder_hidden: Option<Vec<usize>>,
    token: Option<bool>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStage {
    batch_size: Option<usize>,
    steps: Option<usize>,
    lr: Option<f64>,
    alpha: Option<f64>,
    tau_pair: Option<TemperatureConfig>,
    tau_triplet: Option<TemperatureConfig>,
    pair_2d_3d: Option<bool>,
    pair_image_2d: Option<bool>,
    pair_image_3d: Option<bool>,
    triplet: Option<bool>,
    task_weight: Option<f64>,
    train: Option<Vec<Group>>,
    checkpoint_every: Option<usize>,
    seed: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    model: Option<RawModel>,
    step1: Option<RawStage>,
    step2: Option<RawStage>,
    finetune: Option<RawStage>,
}

macro_rules! merge {
    ($dst:expr, $src:expr, $($f:ident),+) => {
        $(if let Some(v) = $src.$f { $dst.$f = v; })+
    };
}

fn merge_stage(stage: Stage, raw: Option<RawStage>) -> StageConfig {
    let mut s = StageConfig::default_for(stage);
    if let Some(r) = raw {
        merge!(
            s, r, batch_size, steps, lr, alpha, tau_pair, tau_triplet, pair_2d_3d, pair_image_2d,
            pair_image_3d, triplet, task_weight, train, checkpoint_every
        );
        s.seed = r.seed.or(s.seed);
    }
    s
}

impl TrainConfig {
    pub fn stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::Step1 => &self.step1,
            Stage::Step2 => &self.step2,
            Stage::Finetune => &self.finetune,
        }
    }

    pub fn stage_mut(&mut self, stage: Stage) -> &mut StageConfig {
        match stage {
            Stage::Step1 => &mut self.step1,
            Stage::Step2 => &mut self.step2,
            Stage::Finetune => &mut self.finetune,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.embed_dim < 2 {
            return Err(Error::config("model.embed_dim", "must be at least 2"));
        }
        if m.encoder_hidden.contains(&0) {
            return Err(Error::config("model.encoder_hidden", "widths must be positive"));
        }
        if m.decoder_hidden.contains(&0) {
            return Err(Error::config("model.decoder_hidden", "widths must be positive"));
        }
        for stage in Stage::ALL {
            self.stage(stage).validate(stage, m)?;
        }
        Ok(())
    }

    /// Parses TOML; absent keys take their stage defaults. Unknown keys and
    /// invariant violations are errors.
    pub fn from_toml_str(text: &str) -> Result<TrainConfig> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| Error::config("toml", e.message().to_string()))?;
        let mut cfg = TrainConfig::default();
        if let Some(s) = raw.seed {
            cfg.seed = s;
        }
        if let Some(m) = raw.model {
            merge!(cfg.model, m, embed_dim, encoder_hidden, decoder_hidden, token);
        }
        cfg.step1 = merge_stage(Stage::Step1, raw.step1);
        cfg.step2 = merge_stage(Stage::Step2, raw.step2);
        cfg.finetune = merge_stage(Stage::Finetune, raw.finetune);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        TrainConfig::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is representable in TOML")
    }

    /// CRC32 of the canonical TOML form.
    pub fn fingerprint(&self) -> u32 {
        crc32fast::hash(self.to_toml_string().as_bytes())
    }

    /// The same schedule with the triplet term weighted by zero in Step2 and
    /// the finetune.
    pub fn pair_only(&self) -> TrainConfig {
        let mut c = self.clone();
        c.step2.alpha = 0.0;
        c.finetune.alpha = 0.0;
        c
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        self.stage(stage)
            .seed
            .unwrap_or_else(|| crate::util::derive_seed(self.seed, stage.code() as u64))
    }
}
