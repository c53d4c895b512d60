//! Experiment configuration files.
//!
//! A config is a flat TOML table. Every key is optional; unset keys take the
//! task preset's value. Unknown keys are rejected. The resolved config of a
//! run is written back as a complete file, which reproduces the run when
//! loaded again.

use std::path::{Path, PathBuf};

use cmad_core::aggregation::MaskPreset;
use cmad_core::costs::RunningProfile;
use cmad_core::experiment::{ExperimentConfig, Gmm2dTarget, Method, ScoreSource, Task};
use cmad_core::sde::NoiseSchedule;
use cmad_core::shapes;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Environment variable naming the directory relative output paths live in.
pub const OUTPUT_ROOT_VAR: &str = "CMAD_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Index(usize),
    Name(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub task: Option<String>,
    pub method: Option<String>,
    pub agents: Option<usize>,
    /// `h-stripes`, `v-stripes`, `halves` or `explicit`.
    pub mask: Option<String>,
    /// Per-agent coordinate lists for `mask = "explicit"`.
    pub mask_sets: Option<Vec<Vec<usize>>>,
    /// Class name (shapes16) or class / mode index.
    pub target: Option<Target>,
    pub gmm2d_target: Option<String>,

    pub lambda: Option<f64>,
    pub agent_lambdas: Option<Vec<f64>>,
    pub alpha_run: Option<f64>,
    /// `constant` or `linear-ramp`.
    pub running_profile: Option<String>,
    pub beta_seam: Option<f64>,
    pub gamma_seam: Option<f64>,
    pub charbonnier_eps: Option<f64>,

    pub beta_min: Option<f64>,
    pub beta_max: Option<f64>,
    pub steps: Option<usize>,
    pub eps: Option<f64>,

    pub joint_updates: Option<usize>,
    pub outer: Option<usize>,
    pub inner: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub lr_theta: Option<f64>,
    pub shuffle_agents: Option<bool>,

    pub policy_hidden: Option<Vec<usize>>,
    pub policy_time_dim: Option<usize>,
    pub nn2_hidden: Option<Vec<usize>>,
    pub c0: Option<f64>,

    pub alpha_guid: Option<f64>,
    pub eval_samples: Option<usize>,
    pub eval_chunk: Option<usize>,
    pub grid_samples: Option<usize>,
    pub seed: Option<u64>,

    pub score_source: Option<String>,
    pub score_hidden: Option<Vec<usize>>,
    pub score_time_dim: Option<usize>,
    pub score_steps: Option<usize>,
    pub score_batch: Option<usize>,
    pub score_lr: Option<f64>,

    pub classifier_hidden: Option<Vec<usize>>,
    pub classifier_steps: Option<usize>,
    pub classifier_batch: Option<usize>,
    pub classifier_lr: Option<f64>,
    pub classifier_augment: Option<f64>,
    pub classifier_min_accuracy: Option<f64>,
    pub train_per_class: Option<usize>,
    pub held_per_class: Option<usize>,

    pub output_dir: Option<String>,
    pub score_checkpoint: Option<String>,
    pub classifier_checkpoint: Option<String>,
    pub policies_checkpoint: Option<String>,
    /// Write policy checkpoints every this many updates (0 disables).
    pub checkpoint_every: Option<usize>,
}

/// A fully resolved configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    /// Output directory as written in the config.
    pub output_dir: String,
    pub score_checkpoint: Option<String>,
    pub classifier_checkpoint: Option<String>,
    pub policies_checkpoint: Option<String>,
    pub checkpoint_every: usize,
    pub grid_samples: usize,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn parse_named<T>(key: &str, value: &str, parse: impl Fn(&str) -> Option<T>, allowed: &[&str]) -> Result<T> {
    parse(value).ok_or_else(|| config_err(format!("{key}: unknown value `{value}`; expected one of {}", allowed.join(", "))))
}

fn mask_name(m: &MaskPreset) -> &'static str {
    match m {
        MaskPreset::HStripes => "h-stripes",
        MaskPreset::VStripes => "v-stripes",
        MaskPreset::Halves => "halves",
        MaskPreset::Explicit(_) => "explicit",
    }
}

fn profile_name(p: RunningProfile) -> &'static str {
    match p {
        RunningProfile::Constant => "constant",
        RunningProfile::LinearRamp => "linear-ramp",
    }
}

impl FileConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err(e.message().to_string()))
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        Self::deserialize(toml::Value::Table(table)).map_err(|e| config_err(e.message().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config fields are plain TOML values")
    }

    /// Fill in the task preset and check every value.
    pub fn resolve(&self) -> Result<RunConfig> {
        let task = match &self.task {
            Some(t) => parse_named("task", t, Task::parse, &["gmm2d", "shapes16"])?,
            None => Task::Shapes16,
        };
        let method = match &self.method {
            Some(m) => parse_named("method", m, Method::parse, &Method::ALL.map(|m| m.name()))?,
            None => Method::ControlWise,
        };
        let mut e = match task {
            Task::Gmm2d => ExperimentConfig::gmm2d(method),
            Task::Shapes16 => ExperimentConfig::shapes16(method, 2),
        };
        if let Some(n) = self.agents {
            e.num_agents = n;
        }
        if let Some(m) = &self.mask {
            e.mask = match m.as_str() {
                "h-stripes" => MaskPreset::HStripes,
                "v-stripes" => MaskPreset::VStripes,
                "halves" => MaskPreset::Halves,
                "explicit" => {
                    let sets = self.mask_sets.clone().ok_or_else(|| config_err("mask = \"explicit\" needs mask_sets"))?;
                    MaskPreset::Explicit(sets)
                }
                other => {
                    return Err(config_err(format!(
                        "mask: unknown preset `{other}`; expected one of h-stripes, v-stripes, halves, explicit"
                    )))
                }
            };
        } else if self.mask_sets.is_some() {
            return Err(config_err("mask_sets is only used with mask = \"explicit\""));
        }
        match &self.target {
            Some(Target::Index(i)) => e.soc.target_label = *i,
            Some(Target::Name(name)) => {
                if task != Task::Shapes16 {
                    return Err(config_err("target names are only defined for shapes16; use an index"));
                }
                e.soc.target_label = shapes::class_index(name).ok_or_else(|| {
                    config_err(format!("target: unknown class `{name}`; expected one of {}", shapes::CLASS_NAMES.join(", ")))
                })?;
            }
            None => {}
        }
        if let Some(g) = &self.gmm2d_target {
            e.gmm2d_target = parse_named("gmm2d_target", g, Gmm2dTarget::parse, &["quadratic-well", "gaussian"])?;
        }
        macro_rules! set {
            ($field:ident => $($dst:tt)+) => {
                if let Some(v) = self.$field.clone() {
                    e.$($dst)+ = v;
                }
            };
        }
        set!(lambda => soc.lambda);
        if let Some(l) = &self.agent_lambdas {
            e.soc.agent_lambdas = Some(l.clone());
        }
        set!(alpha_run => soc.alpha_run);
        if let Some(p) = &self.running_profile {
            e.soc.running_profile = match p.as_str() {
                "constant" => RunningProfile::Constant,
                "linear-ramp" => RunningProfile::LinearRamp,
                other => {
                    return Err(config_err(format!("running_profile: unknown value `{other}`; expected constant or linear-ramp")))
                }
            };
        }
        set!(beta_seam => soc.beta_seam);
        set!(gamma_seam => soc.gamma_seam);
        set!(charbonnier_eps => soc.charbonnier_eps);
        if self.beta_min.is_some() || self.beta_max.is_some() {
            let d = NoiseSchedule::default();
            e.schedule = NoiseSchedule::new(self.beta_min.unwrap_or(d.beta_min), self.beta_max.unwrap_or(d.beta_max))?;
        }
        set!(steps => steps);
        set!(eps => eps);
        set!(joint_updates => joint_updates);
        set!(outer => outer);
        set!(inner => inner);
        set!(batch => batch);
        set!(lr => lr);
        set!(lr_theta => lr_theta);
        set!(shuffle_agents => shuffle_agents);
        set!(policy_hidden => policy.hidden);
        set!(policy_time_dim => policy.time_dim);
        set!(nn2_hidden => policy.nn2_hidden);
        set!(c0 => policy.c0);
        set!(alpha_guid => alpha_guid);
        set!(eval_samples => eval_samples);
        set!(eval_chunk => eval_chunk);
        set!(seed => seed);
        if let Some(s) = &self.score_source {
            e.score_source = parse_named("score_source", s, ScoreSource::parse, &["analytic", "trained"])?;
        }
        set!(score_hidden => score_hidden);
        set!(score_time_dim => score_time_dim);
        set!(score_steps => score_train.steps);
        set!(score_batch => score_train.batch);
        set!(score_lr => score_train.lr);
        set!(classifier_hidden => classifier.hidden);
        set!(classifier_steps => classifier.steps);
        set!(classifier_batch => classifier.batch);
        set!(classifier_lr => classifier.lr);
        set!(classifier_augment => classifier.augment);
        set!(classifier_min_accuracy => classifier.min_accuracy);
        set!(train_per_class => train_per_class);
        set!(held_per_class => held_per_class);
        // Score and classifier training share the experiment seed.
        e.score_train.seed = e.seed;
        e.classifier.seed = e.seed;
        e.validate()?;
        if e.policy.time_dim == 0 {
            return Err(config_err("policy_time_dim must be at least 1"));
        }
        let grid_samples = self.grid_samples.unwrap_or(64);
        if grid_samples == 0 {
            return Err(config_err("grid_samples must be at least 1"));
        }
        Ok(RunConfig {
            experiment: e,
            output_dir: self.output_dir.clone().unwrap_or_else(|| "cmad-out".into()),
            score_checkpoint: self.score_checkpoint.clone(),
            classifier_checkpoint: self.classifier_checkpoint.clone(),
            policies_checkpoint: self.policies_checkpoint.clone(),
            checkpoint_every: self.checkpoint_every.unwrap_or(0),
            grid_samples,
        })
    }
}

impl RunConfig {
    /// Every setting spelled out, in config-file form.
    pub fn snapshot(&self) -> FileConfig {
        let e = &self.experiment;
        FileConfig {
            task: Some(e.task.name().into()),
            method: Some(e.method.name().into()),
            agents: Some(e.num_agents),
            mask: Some(mask_name(&e.mask).into()),
            mask_sets: match &e.mask {
                MaskPreset::Explicit(s) => Some(s.clone()),
                _ => None,
            },
            target: Some(Target::Index(e.soc.target_label)),
            gmm2d_target: Some(e.gmm2d_target.name().into()),
            lambda: Some(e.soc.lambda),
            agent_lambdas: e.soc.agent_lambdas.clone(),
            alpha_run: Some(e.soc.alpha_run),
            running_profile: Some(profile_name(e.soc.running_profile).into()),
            beta_seam: Some(e.soc.beta_seam),
            gamma_seam: Some(e.soc.gamma_seam),
            charbonnier_eps: Some(e.soc.charbonnier_eps),
            beta_min: Some(e.schedule.beta_min),
            beta_max: Some(e.schedule.beta_max),
            steps: Some(e.steps),
            eps: Some(e.eps),
            joint_updates: Some(e.joint_updates),
            outer: Some(e.outer),
            inner: Some(e.inner),
            batch: Some(e.batch),
            lr: Some(e.lr),
            lr_theta: Some(e.lr_theta),
            shuffle_agents: Some(e.shuffle_agents),
            policy_hidden: Some(e.policy.hidden.clone()),
            policy_time_dim: Some(e.policy.time_dim),
            nn2_hidden: Some(e.policy.nn2_hidden.clone()),
            c0: Some(e.policy.c0),
            alpha_guid: Some(e.alpha_guid),
            eval_samples: Some(e.eval_samples),
            eval_chunk: Some(e.eval_chunk),
            grid_samples: Some(self.grid_samples),
            seed: Some(e.seed),
            score_source: Some(e.score_source.name().into()),
            score_hidden: Some(e.score_hidden.clone()),
            score_time_dim: Some(e.score_time_dim),
            score_steps: Some(e.score_train.steps),
            score_batch: Some(e.score_train.batch),
            score_lr: Some(e.score_train.lr),
            classifier_hidden: Some(e.classifier.hidden.clone()),
            classifier_steps: Some(e.classifier.steps),
            classifier_batch: Some(e.classifier.batch),
            classifier_lr: Some(e.classifier.lr),
            classifier_augment: Some(e.classifier.augment),
            classifier_min_accuracy: Some(e.classifier.min_accuracy),
            train_per_class: Some(e.train_per_class),
            held_per_class: Some(e.held_per_class),
            output_dir: Some(self.output_dir.clone()),
            score_checkpoint: self.score_checkpoint.clone(),
            classifier_checkpoint: self.classifier_checkpoint.clone(),
            policies_checkpoint: self.policies_checkpoint.clone(),
            checkpoint_every: Some(self.checkpoint_every),
        }
    }

    /// The output directory, placed under `$CMAD_OUTPUT_ROOT` when relative.
    pub fn output_path(&self) -> PathBuf {
        resolve_path(&self.output_dir)
    }
}

/// Relative paths are taken from `$CMAD_OUTPUT_ROOT` when it is set.
pub fn resolve_path(p: &str) -> PathBuf {
    let path = Path::new(p);
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

/// Read a config file into a table (an empty table when `path` is `None`).
pub fn load_table(path: Option<&Path>) -> Result<toml::Table> {
    let Some(path) = path else {
        return Ok(toml::Table::new());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.parse::<toml::Table>().map_err(|e| config_err(format!("{}: {}", path.display(), e.message())))
}

/// Apply a `key=value` override; the value is read as TOML, falling back to
/// a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) =
        assignment.split_once('=').ok_or_else(|| config_err(format!("override `{assignment}` is not KEY=VALUE")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("just inserted"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    table.insert(key.to_string(), value);
    Ok(())
}
