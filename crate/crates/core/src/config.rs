//! Flat dotted-key JSON configuration.
//!
//! Every key has a default; files and `key=value` overrides may only touch
//! known keys and must keep the default's JSON type.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::datasets::DataSpec;
use crate::envs::{Benchmark, NoiseScale, NoiseSpec};
use crate::error::{CoreError, Result};
use crate::losses::{LocalityWindow, LossWeights};
use crate::model::ArchConfig;

/// The six model families, in table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Dwmr,
    Ae,
    BetaVae,
    Deepcubeai,
    DwmrAe,
    DwmrBetaVae,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Dwmr,
        Family::Ae,
        Family::BetaVae,
        Family::Deepcubeai,
        Family::DwmrAe,
        Family::DwmrBetaVae,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Dwmr => "dwmr",
            Family::Ae => "ae",
            Family::BetaVae => "beta_vae",
            Family::Deepcubeai => "deepcubeai",
            Family::DwmrAe => "dwmr_ae",
            Family::DwmrBetaVae => "dwmr_beta_vae",
        }
    }

    /// Human-readable row label.
    pub fn label(self) -> &'static str {
        match self {
            Family::Dwmr => "DWMR",
            Family::Ae => "AE",
            Family::BetaVae => "β-VAE",
            Family::Deepcubeai => "DeepCubeAI",
            Family::DwmrAe => "DWMR+AE",
            Family::DwmrBetaVae => "DWMR+β-VAE",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown family `{s}`")))
    }

    pub fn has_decoder(self) -> bool {
        self != Family::Dwmr
    }

    pub fn has_regularizers(self) -> bool {
        matches!(self, Family::Dwmr | Family::DwmrAe | Family::DwmrBetaVae)
    }

    pub fn is_variational(self) -> bool {
        matches!(self, Family::BetaVae | Family::DwmrBetaVae)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    TwoStep,
    FullyDifferentiable,
    StraightThrough,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::TwoStep => "two_step",
            Variant::FullyDifferentiable => "fully_differentiable",
            Variant::StraightThrough => "straight_through",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "two_step" => Ok(Variant::TwoStep),
            "fully_differentiable" => Ok(Variant::FullyDifferentiable),
            "straight_through" => Ok(Variant::StraightThrough),
            _ => Err(CoreError::Config(format!("unknown variant `{s}`"))),
        }
    }

    /// Two-step for every family except DeepCubeAI, whose objective is
    /// written around straight-through rounding.
    pub fn default_for(family: Family) -> Self {
        match family {
            Family::Deepcubeai => Variant::StraightThrough,
            _ => Variant::TwoStep,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Predictor input of the joint step in the two-step variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JointInput {
    Soft,
    StraightThrough,
}

/// Per-epoch multiplicative factors, each in [0.9, 1.1].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleFactors {
    pub lr_enc: f64,
    pub lr_pred: f64,
    pub lr_dec: f64,
    pub tau: f64,
    pub weights: LossWeights,
}

impl ScheduleFactors {
    pub const CONSTANT: ScheduleFactors = ScheduleFactors {
        lr_enc: 1.0,
        lr_pred: 1.0,
        lr_dec: 1.0,
        tau: 1.0,
        weights: LossWeights {
            var: 1.0,
            cor: 1.0,
            cos: 1.0,
            loc: 1.0,
            rec: 1.0,
            kl: 1.0,
        },
    };

    fn all(&self) -> [(&'static str, f64); 10] {
        let w = &self.weights;
        [
            ("lr_enc", self.lr_enc),
            ("lr_pred", self.lr_pred),
            ("lr_dec", self.lr_dec),
            ("tau", self.tau),
            ("lambda_var", w.var),
            ("lambda_cor", w.cor),
            ("lambda_cos", w.cos),
            ("lambda_loc", w.loc),
            ("lambda_rec", w.rec),
            ("lambda_kl", w.kl),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, f) in self.all() {
            if !(0.9..=1.1).contains(&f) {
                return Err(CoreError::Config(format!(
                    "schedule factor schedule.{name} = {f} outside [0.9, 1.1]"
                )));
            }
        }
        Ok(())
    }
}

/// Everything the training loop needs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub benchmark: Benchmark,
    pub family: Family,
    pub variant: Variant,
    pub joint_input: JointInput,
    pub arch: ArchConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_enc: f64,
    pub lr_pred: f64,
    pub lr_dec: f64,
    pub tau: f64,
    pub weights: LossWeights,
    pub gamma: f64,
    pub window: LocalityWindow,
    /// 0 evaluates every distinct triplet.
    pub cos_triplets: usize,
    pub temperature: f64,
    pub schedule: ScheduleFactors,
    pub seed: u64,
    pub per_step_metrics: bool,
    pub checkpoint_every_epoch: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CoreError::Config(m));
        self.arch.validate()?;
        if self.arch.benchmark != self.benchmark {
            return err("architecture benchmark differs from the run benchmark".into());
        }
        if self.arch.decoder != self.family.has_decoder() {
            return err(format!("family {} decoder flag mismatch", self.family));
        }
        if self.batch_size < 2 {
            return err(format!("batch size must be at least 2, got {}", self.batch_size));
        }
        if self.epochs == 0 {
            return err("epochs must be positive".into());
        }
        for (name, lr) in [("lr_enc", self.lr_enc), ("lr_pred", self.lr_pred), ("lr_dec", self.lr_dec)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return err(format!("train.{name} must be positive, got {lr}"));
            }
        }
        // τ = 0 is the "no EMA" ablation (φ′ = φ after every step).
        if !(0.0..1.0).contains(&self.tau) {
            return err(format!("train.tau must lie in [0, 1), got {}", self.tau));
        }
        let w = &self.weights;
        for (name, v) in [
            ("lambda_var", w.var),
            ("lambda_cor", w.cor),
            ("lambda_cos", w.cos),
            ("lambda_loc", w.loc),
            ("lambda_rec", w.rec),
            ("lambda_kl", w.kl),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(format!("loss.{name} must be non-negative, got {v}"));
            }
        }
        if !(self.gamma >= 0.0 && self.gamma <= 0.5) {
            return err(format!("loss.gamma must lie in [0, 0.5], got {}", self.gamma));
        }
        self.window.validate(self.arch.k()).map_err(|e| CoreError::Config(e.to_string()))?;
        if !(self.temperature > 0.0) {
            return err(format!("loss.temperature must be positive, got {}", self.temperature));
        }
        self.schedule.validate()
    }
}

/// Probe fitting settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            lr: 0.01,
            weight_decay: 0.001,
            batch_size: 256,
        }
    }
}

const FAMILY_ORDER: &str = "dwmr,ae,beta_vae,deepcubeai,dwmr_ae,dwmr_beta_vae";

/// Documented defaults. `0` for `train.epochs` means the benchmark default
/// (40 puzzle / 20 IceSlider); `"auto"` for `variant` means the family
/// default.
pub fn default_values() -> BTreeMap<String, Value> {
    let pairs = [
        ("benchmark", json!("puzzle")),
        ("family", json!("dwmr")),
        ("variant", json!("auto")),
        ("two_step_b_input", json!("soft")),
        ("seed", json!(0)),
        ("data.noise", json!(0.0)),
        ("data.noise_scale", json!("std")),
        ("data.train_size", json!(0)),
        ("data.val_size", json!(0)),
        ("data.test_size", json!(0)),
        ("data.traj_len", json!(0)),
        ("data.seed", json!(1)),
        ("data.digits_per_class", json!(crate::datasets::DEFAULT_DIGITS_PER_CLASS)),
        ("data.rock_density", json!(crate::envs::DEFAULT_ROCK_DENSITY)),
        ("data.mnist_dir", json!("")),
        ("model.latent_bits", json!(64)),
        ("model.enc_widths", json!([16, 32, 32, 64, 64])),
        ("model.enc_hidden", json!(96)),
        ("model.gn_groups", json!(4)),
        ("model.pred_hidden", json!(128)),
        ("model.ice_enc_channels", json!(32)),
        ("model.ice_pred_channels", json!(32)),
        ("model.ice_res_blocks", json!(4)),
        ("train.epochs", json!(0)),
        ("train.batch_size", json!(256)),
        ("train.lr_enc", json!(1e-3)),
        ("train.lr_pred", json!(1e-3)),
        ("train.lr_dec", json!(1e-3)),
        ("train.tau", json!(0.9)),
        ("train.per_step_metrics", json!(false)),
        ("train.checkpoint_every_epoch", json!(true)),
        ("loss.lambda_var", json!(25.0)),
        ("loss.lambda_cor", json!(5.0)),
        ("loss.lambda_cos", json!(5.0)),
        ("loss.lambda_loc", json!(1.0)),
        ("loss.lambda_rec", json!(1.0)),
        ("loss.lambda_kl", json!(0.1)),
        ("loss.gamma", json!(0.45)),
        ("loss.window_lower", json!(1)),
        ("loss.window_upper", json!(6)),
        ("loss.cos_triplets", json!(0)),
        ("loss.temperature", json!(1.0)),
        ("schedule.lr_enc", json!(1.0)),
        ("schedule.lr_pred", json!(1.0)),
        ("schedule.lr_dec", json!(1.0)),
        ("schedule.tau", json!(1.0)),
        ("schedule.lambda_var", json!(1.0)),
        ("schedule.lambda_cor", json!(1.0)),
        ("schedule.lambda_cos", json!(1.0)),
        ("schedule.lambda_loc", json!(1.0)),
        ("schedule.lambda_rec", json!(1.0)),
        ("schedule.lambda_kl", json!(1.0)),
        ("probe.epochs", json!(15)),
        ("probe.lr", json!(0.01)),
        ("probe.weight_decay", json!(0.001)),
        ("probe.batch_size", json!(256)),
        ("sweep.points", json!(24)),
        ("sweep.seeds", json!(10)),
        ("sweep.seed", json!(0)),
        ("ablate.components", json!("var,cor,cos,loc,ema")),
        ("ablate.seeds", json!(10)),
        ("report.families", json!(FAMILY_ORDER)),
        ("report.metric", json!("f1")),
    ];
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// A complete key → value map.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<String, Value>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: default_values(),
        }
    }
}

fn same_kind(default: &Value, v: &Value) -> bool {
    match (default, v) {
        (Value::Number(d), Value::Number(n)) => !(d.is_u64() || d.is_i64()) || n.is_u64() || n.is_i64(),
        (Value::Bool(_), Value::Bool(_)) | (Value::String(_), Value::String(_)) => true,
        (Value::Array(_), Value::Array(a)) => a.iter().all(|x| x.is_u64()),
        _ => false,
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let parsed: Value =
            serde_json::from_str(text).map_err(|e| CoreError::Config(format!("config is not valid JSON: {e}")))?;
        let obj = parsed
            .as_object()
            .ok_or_else(|| CoreError::Config("config must be a flat JSON object".into()))?;
        let mut cfg = Self::default();
        for (k, v) in obj {
            cfg.set_value(k, v.clone())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn set_value(&mut self, key: &str, value: Value) -> Result<()> {
        let default = self
            .values
            .get(key)
            .ok_or_else(|| CoreError::Config(format!("unknown config key `{key}`")))?;
        if !same_kind(default, &value) {
            return Err(CoreError::Config(format!(
                "config key `{key}` expects a value like {default}, got {value}"
            )));
        }
        self.values.insert(key.to_string(), value);
        Ok(())
    }

    /// Applies a `key=value` override; the value is parsed as JSON and falls
    /// back to a plain string.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (k, v) = spec
            .split_once('=')
            .ok_or_else(|| CoreError::Config(format!("override `{spec}` is not of the form key=value")))?;
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        self.set_value(k.trim(), value)
    }

    pub fn get(&self, key: &str) -> &Value {
        self.values.get(key).unwrap_or_else(|| panic!("config key `{key}` has no default"))
    }

    pub fn f64(&self, key: &str) -> f64 {
        self.get(key).as_f64().expect("numeric key")
    }

    pub fn usize(&self, key: &str) -> usize {
        self.get(key).as_u64().expect("integer key") as usize
    }

    pub fn u64(&self, key: &str) -> u64 {
        self.get(key).as_u64().expect("integer key")
    }

    pub fn bool(&self, key: &str) -> bool {
        self.get(key).as_bool().expect("boolean key")
    }

    pub fn str(&self, key: &str) -> &str {
        self.get(key).as_str().expect("string key")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.values).expect("config serializes")
    }

    pub fn values(&self) -> &BTreeMap<String, Value> {
        &self.values
    }

    pub fn benchmark(&self) -> Result<Benchmark> {
        Benchmark::parse(self.str("benchmark"))
            .ok_or_else(|| CoreError::Config(format!("unknown benchmark `{}`", self.str("benchmark"))))
    }

    pub fn family(&self) -> Result<Family> {
        Family::parse(self.str("family"))
    }

    pub fn data_spec(&self) -> Result<DataSpec> {
        let benchmark = self.benchmark()?;
        let mut spec = DataSpec::paper(benchmark);
        for (i, key) in ["data.train_size", "data.val_size", "data.test_size"].iter().enumerate() {
            let n = self.usize(key);
            if n > 0 {
                spec.sizes[i] = n;
            }
        }
        if self.usize("data.traj_len") > 0 {
            spec.traj_len = self.usize("data.traj_len");
        }
        let base = self.u64("data.seed");
        spec.seeds = [base, base + 1, base + 2];
        let noise = self.f64("data.noise");
        if noise < 0.0 {
            return Err(CoreError::Config(format!("data.noise must be non-negative, got {noise}")));
        }
        let scale = match self.str("data.noise_scale") {
            "std" => NoiseScale::Std,
            "variance" => NoiseScale::Variance,
            s => return Err(CoreError::Config(format!("data.noise_scale must be std or variance, got `{s}`"))),
        };
        spec.noise = (noise > 0.0).then_some(NoiseSpec { scale: noise, mode: scale });
        spec.digits_per_class = self.usize("data.digits_per_class");
        spec.rock_density = self.f64("data.rock_density");
        if !(0.0..1.0).contains(&spec.rock_density) {
            return Err(CoreError::Config("data.rock_density must lie in [0, 1)".into()));
        }
        let dir = self.str("data.mnist_dir");
        spec.mnist_dir = (!dir.is_empty()).then(|| PathBuf::from(dir));
        Ok(spec)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let benchmark = self.benchmark()?;
        let family = self.family()?;
        let variant = match self.str("variant") {
            "auto" => Variant::default_for(family),
            s => Variant::parse(s)?,
        };
        let joint_input = match self.str("two_step_b_input") {
            "soft" => JointInput::Soft,
            "straight_through" => JointInput::StraightThrough,
            s => return Err(CoreError::Config(format!("two_step_b_input must be soft or straight_through, got `{s}`"))),
        };
        let mut arch = ArchConfig::new(benchmark);
        arch.latent_bits = self.usize("model.latent_bits");
        arch.enc_widths = self
            .get("model.enc_widths")
            .as_array()
            .expect("array key")
            .iter()
            .map(|v| v.as_u64().unwrap_or(0) as usize)
            .collect();
        arch.enc_hidden = self.usize("model.enc_hidden");
        arch.gn_groups = self.usize("model.gn_groups");
        arch.pred_hidden = self.usize("model.pred_hidden");
        arch.ice_enc_channels = self.usize("model.ice_enc_channels");
        arch.ice_pred_channels = self.usize("model.ice_pred_channels");
        arch.ice_res_blocks = self.usize("model.ice_res_blocks");
        arch.decoder = family.has_decoder();
        let epochs = match self.usize("train.epochs") {
            0 => match benchmark {
                Benchmark::Puzzle => 40,
                Benchmark::IceSlider => 20,
            },
            e => e,
        };
        let weights = LossWeights {
            var: self.f64("loss.lambda_var"),
            cor: self.f64("loss.lambda_cor"),
            cos: self.f64("loss.lambda_cos"),
            loc: self.f64("loss.lambda_loc"),
            rec: self.f64("loss.lambda_rec"),
            kl: self.f64("loss.lambda_kl"),
        };
        let schedule = ScheduleFactors {
            lr_enc: self.f64("schedule.lr_enc"),
            lr_pred: self.f64("schedule.lr_pred"),
            lr_dec: self.f64("schedule.lr_dec"),
            tau: self.f64("schedule.tau"),
            weights: LossWeights {
                var: self.f64("schedule.lambda_var"),
                cor: self.f64("schedule.lambda_cor"),
                cos: self.f64("schedule.lambda_cos"),
                loc: self.f64("schedule.lambda_loc"),
                rec: self.f64("schedule.lambda_rec"),
                kl: self.f64("schedule.lambda_kl"),
            },
        };
        let tc = TrainConfig {
            benchmark,
            family,
            variant,
            joint_input,
            arch,
            epochs,
            batch_size: self.usize("train.batch_size"),
            lr_enc: self.f64("train.lr_enc"),
            lr_pred: self.f64("train.lr_pred"),
            lr_dec: self.f64("train.lr_dec"),
            tau: self.f64("train.tau"),
            weights,
            gamma: self.f64("loss.gamma"),
            window: LocalityWindow {
                lower: self.usize("loss.window_lower"),
                upper: self.usize("loss.window_upper"),
            },
            cos_triplets: self.usize("loss.cos_triplets"),
            temperature: self.f64("loss.temperature"),
            schedule,
            seed: self.u64("seed"),
            per_step_metrics: self.bool("train.per_step_metrics"),
            checkpoint_every_epoch: self.bool("train.checkpoint_every_epoch"),
        };
        tc.validate()?;
        Ok(tc)
    }

    pub fn probe_config(&self) -> Result<ProbeConfig> {
        let pc = ProbeConfig {
            epochs: self.usize("probe.epochs"),
            lr: self.f64("probe.lr"),
            weight_decay: self.f64("probe.weight_decay"),
            batch_size: self.usize("probe.batch_size"),
        };
        if pc.epochs == 0 || pc.batch_size == 0 || !(pc.lr > 0.0) || pc.weight_decay < 0.0 {
            return Err(CoreError::Config("probe settings must be positive".into()));
        }
        Ok(pc)
    }

    /// Family order for report tables.
    pub fn family_order(&self) -> Result<Vec<Family>> {
        self.str("report.families")
            .split(',')
            .map(|s| Family::parse(s.trim()))
            .collect()
    }
}
