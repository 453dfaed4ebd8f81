use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::algorithms::{HyperParams, Method, NormMode};
use crate::domains::{synth_rotated, DomainSet, RotatedClusters};
use crate::error::{Error, Result};
use crate::model::ModelSpec;

/// Which domain(s) to hold out: one index, or every domain in turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeldOut {
    #[default]
    All,
    Domain(usize),
}

impl HeldOut {
    pub fn folds(self, num_domains: usize) -> Vec<usize> {
        match self {
            HeldOut::All => (0..num_domains).collect(),
            HeldOut::Domain(d) => vec![d],
        }
    }
}

impl fmt::Display for HeldOut {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeldOut::All => f.write_str("ALL"),
            HeldOut::Domain(d) => write!(f, "{d}"),
        }
    }
}

impl std::str::FromStr for HeldOut {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(HeldOut::All);
        }
        s.parse()
            .map(HeldOut::Domain)
            .map_err(|_| Error::Config(format!("held_out must be ALL or a domain index, got `{s}`")))
    }
}

impl Serialize for HeldOut {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            HeldOut::All => s.serialize_str("ALL"),
            HeldOut::Domain(d) => s.serialize_u64(*d as u64),
        }
    }
}

impl<'de> Deserialize<'de> for HeldOut {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Index(usize),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Index(i) => Ok(HeldOut::Domain(i)),
            Raw::Word(w) => w.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Parameters of the rotated-cluster generator, named like the `gen` flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub domains: usize,
    pub classes: usize,
    pub n: usize,
    pub angle: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            domains: 4,
            classes: 3,
            n: 150,
            angle: 25.0,
            noise: 0.3,
            seed: 7,
        }
    }
}

impl From<&SynthSpec> for RotatedClusters {
    fn from(s: &SynthSpec) -> Self {
        RotatedClusters {
            num_domains: s.domains,
            classes: s.classes,
            n_per_domain: s.n,
            angle_step_deg: s.angle,
            noise_sd: s.noise,
            seed: s.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetSource {
    File { path: PathBuf },
    Synthetic(SynthSpec),
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SynthSpec::default())
    }
}

impl DatasetSource {
    /// Relative file paths resolve against `base`.
    pub fn load(&self, base: Option<&Path>) -> Result<DomainSet> {
        match self {
            DatasetSource::File { path } => match base {
                Some(b) if path.is_relative() => DomainSet::load(b.join(path)),
                _ => DomainSet::load(path),
            },
            DatasetSource::Synthetic(s) => synth_rotated(&s.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    /// Unset: the preset decides (off without a preset).
    pub batchnorm: Option<bool>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![16],
            batchnorm: None,
        }
    }
}

/// Hyperparameters given explicitly in a config file or on the command
/// line. Unset fields fall back to the preset, then to the defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HpOverrides {
    pub alpha: Option<Vec<f64>>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub lambda: Option<f64>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub second_order: Option<bool>,
    pub eq3_strict: Option<bool>,
    pub aggregate_mtrain: Option<bool>,
    pub undo_norm: Option<NormMode>,
    pub ffo_momentum: Option<bool>,
}

impl HpOverrides {
    pub fn apply(&self, hp: &mut HyperParams) {
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = &self.$f {
                    hp.$f = v.clone();
                }
            )*};
        }
        set!(
            alpha,
            beta,
            gamma,
            lambda,
            lambda1,
            lambda2,
            momentum,
            weight_decay,
            second_order,
            eq3_strict,
            aggregate_mtrain,
            undo_norm,
            ffo_momentum
        );
    }

    /// Fields set in `other` win.
    pub fn merged_with(&self, other: &HpOverrides) -> HpOverrides {
        macro_rules! pick {
            ($($f:ident),*) => {
                HpOverrides { $($f: other.$f.clone().or_else(|| self.$f.clone()),)* }
            };
        }
        pick!(
            alpha,
            beta,
            gamma,
            lambda,
            lambda1,
            lambda2,
            momentum,
            weight_decay,
            second_order,
            eq3_strict,
            aggregate_mtrain,
            undo_norm,
            ffo_momentum
        )
    }
}

/// Named hyperparameter bundle. Presets never change the data.
#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub method: Method,
    pub hp: HpOverrides,
    pub batchnorm: bool,
}

fn preset(name: &'static str, method: Method, batchnorm: bool, hp: HpOverrides) -> Preset {
    Preset {
        name,
        method,
        hp,
        batchnorm,
    }
}

fn smldg(alpha: &[f64], gamma: f64, beta: f64) -> HpOverrides {
    HpOverrides {
        alpha: Some(alpha.to_vec()),
        gamma: Some(gamma),
        beta: Some(beta),
        ..HpOverrides::default()
    }
}

fn sundo(gamma: f64, lambda: f64) -> HpOverrides {
    HpOverrides {
        gamma: Some(gamma),
        lambda: Some(lambda),
        ..HpOverrides::default()
    }
}

/// Every preset. The `ixmas_*` group turns on hidden-layer normalisation.
/// The `desk_*` group holds the settings used on the synthetic benchmark.
pub fn presets() -> Vec<Preset> {
    use Method::*;
    vec![
        preset("ixmas_smldg", SMldg, true, smldg(&[0.9, 0.9, 0.9], 0.001, 2.0)),
        preset("ixmas_ffo", FfoSMldg, true, smldg(&[1.0, 1.0, 1.0], 0.9, 1.1)),
        preset("ixmas_sundo", SUndo, true, sundo(0.005, 1000.0)),
        preset("vlcs_smldg", SMldg, false, smldg(&[0.05, 0.6], 0.001, 1.2)),
        preset("vlcs_ffo", FfoSMldg, false, smldg(&[0.3, 0.3], 0.01, 1.5)),
        preset("vlcs_sundo", SUndo, false, sundo(0.01, 50.0)),
        preset("pacs_smldg", SMldg, false, smldg(&[0.002, 0.002], 0.001, 1.85)),
        preset("pacs_ffo", FfoSMldg, false, smldg(&[0.01, 0.01], 0.9, 1.75)),
        preset("pacs_sundo", SUndo, false, sundo(0.001, 100.0)),
        preset("desk_agg", Agg, false, smldg(&[0.1], 0.05, 1.0)),
        preset("desk_smldg", SMldg, false, smldg(&[0.1], 0.05, 1.0)),
        preset("desk_fo_smldg", FoSMldg, false, smldg(&[0.1], 0.05, 1.0)),
        preset("desk_ffo", FfoSMldg, false, smldg(&[0.1], 0.5, 1.0)),
    ]
}

pub fn find_preset(name: &str) -> Result<Preset> {
    presets()
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))
}

/// One experiment as written in a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub preset: Option<String>,
    pub dataset: DatasetSource,
    pub held_out: HeldOut,
    pub model: ModelConfig,
    pub hp: HpOverrides,
    pub iters: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub eval_every: usize,
    pub train_frac: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::Agg,
            preset: None,
            dataset: DatasetSource::default(),
            held_out: HeldOut::All,
            model: ModelConfig::default(),
            hp: HpOverrides::default(),
            iters: 300,
            batch_size: 32,
            seeds: (0..20).collect(),
            eval_every: 50,
            train_frac: 0.7,
        }
    }
}

/// Fully resolved experiment: concrete hyperparameters and model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub method: Method,
    pub preset: Option<String>,
    pub dataset: DatasetSource,
    pub held_out: HeldOut,
    pub spec: ModelSpec,
    pub hp: HyperParams,
    pub iters: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub eval_every: usize,
    pub train_frac: f64,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Defaults, then the preset, then explicit `hp` entries.
    pub fn hyperparams(&self) -> Result<HyperParams> {
        let mut hp = HyperParams::default();
        if let Some(name) = &self.preset {
            find_preset(name)?.hp.apply(&mut hp);
        }
        self.hp.apply(&mut hp);
        hp.validate()?;
        Ok(hp)
    }

    /// Checks the config against its dataset and fixes every derived value.
    pub fn resolve(&self, set: &DomainSet) -> Result<ResolvedConfig> {
        let hp = self.hyperparams()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed required".into()));
        }
        if self.iters > 0 && (self.eval_every == 0 || self.batch_size == 0) {
            return Err(Error::Config("eval_every and batch_size must be positive".into()));
        }
        if let HeldOut::Domain(d) = self.held_out {
            if d >= set.len() {
                return Err(Error::Config(format!("held_out {d} but the dataset has {} domains", set.len())));
            }
        }
        let batchnorm = match (self.model.batchnorm, &self.preset) {
            (Some(b), _) => b,
            (None, Some(name)) => find_preset(name)?.batchnorm,
            (None, None) => false,
        };
        let mut sizes = vec![set.dim];
        sizes.extend(&self.model.hidden);
        sizes.push(set.classes);
        let spec = ModelSpec::mlp(sizes).with_batchnorm(batchnorm);
        spec.validate()?;
        Ok(ResolvedConfig {
            method: self.method,
            preset: self.preset.clone(),
            dataset: self.dataset.clone(),
            held_out: self.held_out,
            spec,
            hp,
            iters: self.iters,
            batch_size: self.batch_size,
            seeds: self.seeds.clone(),
            eval_every: self.eval_every.max(1),
            train_frac: self.train_frac,
        })
    }
}
