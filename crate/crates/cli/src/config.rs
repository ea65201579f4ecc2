//! Run configuration: a flat TOML file.
//!
//! Every key is optional except `version`, which must be `1`. Unknown keys
//! are rejected. Example:
//!
//! ```toml
//! version = 1
//! mode = "splitfed_cl"   # splitfed_cl | fedavg | no_correction | no_consistency
//! seed = 7
//! rounds = 30
//! client_sizes = [100, 150, 200, 50]
//! corruption_ratios = [0.2, 0.5, 0.8, 0.0]
//! ```
//!
//! See [`RunConfig`] for the full key list and defaults. The environment
//! variable `SFCL_SEED` overrides `seed`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sfcl_core::annsim::DifficultyParams;
use sfcl_core::data::{FederationLayout, SceneConfig};
use sfcl_core::nn::{AdamConfig, Arch, PerturbParams};
use sfcl_core::protocol::{Mode, ProtocolConfig, Schedule};

use crate::error::{CliError, CliResult};

pub const CONFIG_VERSION: u32 = 1;
pub const SEED_ENV: &str = "SFCL_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub mode: String,
    pub seed: u64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,

    pub height: usize,
    pub width: usize,
    pub classes: u8,
    pub noise_std: f64,
    pub ghost_contrast: f64,
    pub ghost_offset: f64,

    pub client_sizes: Vec<usize>,
    pub corruption_ratios: Vec<f64>,
    pub test_size: usize,
    /// Train on the clean labels (reference run); corruption ratios are ignored.
    pub clean_labels: bool,
    pub rho: f64,
    pub amax_scale: f64,
    /// Normal sampling offset of the deformation direction; 0 picks `max(1, w/4)`.
    pub delta: f64,

    pub fe_channels: usize,
    pub hidden_channels: usize,

    pub gamma_start: f64,
    pub gamma_end: f64,
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub schedule_rounds: usize,
    pub warmup_rounds: usize,
    pub tau0: f64,
    pub correction_threshold: f64,
    pub eta: f64,
    pub logit_init: f64,
    pub teacher_decay: f64,
    pub norm_decay: f64,
    pub norm_floor: f64,
    pub perturb_noise: f64,
    pub perturb_shift: f64,
    pub wire_activations: bool,

    /// Corrupted samples per client written to `labels_before_after/`.
    pub dump_samples: usize,
    /// Worker threads for client training; 0 means one per client.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = ProtocolConfig::default();
        let scene = SceneConfig::default();
        let layout = FederationLayout::default();
        let arch = Arch::default();
        Self {
            version: CONFIG_VERSION,
            mode: p.mode.name().to_string(),
            seed: 0,
            rounds: 100,
            local_epochs: p.local_epochs,
            batch_size: p.batch_size,
            lr: p.optimizer.lr,
            beta1: p.optimizer.beta1,
            beta2: p.optimizer.beta2,
            adam_eps: p.optimizer.eps,
            height: scene.height,
            width: scene.width,
            classes: scene.classes,
            noise_std: scene.noise_std,
            ghost_contrast: scene.ghost_contrast,
            ghost_offset: scene.ghost_offset,
            client_sizes: layout.client_sizes,
            corruption_ratios: layout.corruption_ratios,
            test_size: layout.test_size,
            clean_labels: false,
            rho: layout.corruption.rho,
            amax_scale: layout.corruption.amax_scale,
            delta: layout.corruption.delta.unwrap_or(0.0),
            fe_channels: arch.fe_channels,
            hidden_channels: arch.hidden_channels,
            gamma_start: p.schedule.gamma_start,
            gamma_end: p.schedule.gamma_end,
            lambda_start: p.schedule.lambda_start,
            lambda_end: p.schedule.lambda_end,
            schedule_rounds: p.schedule.horizon,
            warmup_rounds: p.schedule.warmup_rounds,
            tau0: p.tau0,
            correction_threshold: p.correction_threshold,
            eta: p.eta,
            logit_init: p.logit_init,
            teacher_decay: p.teacher_decay,
            norm_decay: p.norm_decay,
            norm_floor: p.norm_floor,
            perturb_noise: p.perturb.noise_fraction,
            perturb_shift: p.perturb.shift,
            wire_activations: p.wire_activations,
            dump_samples: 2,
            threads: 0,
        }
    }
}

/// The core configuration objects a run is built from.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub scene: SceneConfig,
    pub layout: FederationLayout,
    pub arch: Arch,
    pub protocol: ProtocolConfig,
}

impl RunConfig {
    /// 30 rounds on one CPU: a larger step size, and schedules compressed so
    /// that λ reaches 0 and the warm-up completes halfway through.
    pub fn desk() -> Self {
        Self { rounds: 30, lr: 2e-3, schedule_rounds: 15, warmup_rounds: 6, ..Self::default() }
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let config: Self = toml::from_str(text).map_err(|e| CliError::Config(toml_message(text, &e)))?;
        if line_of(text, "version").is_none() {
            return Err(CliError::Config(format!("missing `version` (expected version = {CONFIG_VERSION})")));
        }
        if config.version != CONFIG_VERSION {
            return Err(field_error(text, "version", &format!("unsupported version {} (expected {CONFIG_VERSION})", config.version)));
        }
        config.resolve().map_err(|(key, msg)| field_error(text, key, &msg))?;
        Ok(config)
    }

    /// Reads the file and applies the `SFCL_SEED` override.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let Ok(seed) = std::env::var(SEED_ENV) {
            config.seed = seed
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}={seed:?} is not an unsigned integer")))?;
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn mode(&self) -> Option<Mode> {
        Mode::parse(&self.mode)
    }

    /// Label used in result tables.
    pub fn run_name(&self) -> String {
        if self.clean_labels {
            "clean_reference".to_string()
        } else {
            self.mode.clone()
        }
    }

    /// Builds and validates the core configuration. Errors name the key at fault.
    pub fn resolve(&self) -> Result<Resolved, (&'static str, String)> {
        let mode = self.mode().ok_or_else(|| {
            let names: Vec<&str> = Mode::ALL.iter().map(|m| m.name()).collect();
            ("mode", format!("unknown mode {:?}; expected one of {}", self.mode, names.join(", ")))
        })?;
        if self.rounds == 0 {
            return Err(("rounds", "must be at least 1".into()));
        }
        let defaults = SceneConfig::default();
        // object sizes follow the frame so that small test scenes still fit
        let k = self.height.min(self.width) as f64 / defaults.height.min(defaults.width) as f64;
        let scene = SceneConfig {
            axis_range: defaults.axis_range.iter().map(|&(lo, hi)| ((lo * k).max(3.0), (hi * k).max(3.0))).collect(),
            height: self.height,
            width: self.width,
            noise_std: self.noise_std,
            ghost_contrast: self.ghost_contrast,
            ghost_offset: self.ghost_offset,
            seed: self.seed,
            ..defaults
        };
        if self.classes != scene.classes {
            return Err(("classes", format!("the scene generator draws {} classes", scene.classes)));
        }
        scene.validate().map_err(|e| ("height", e.to_string()))?;
        if !(self.ghost_contrast >= 0.0 && self.ghost_offset >= 0.0) {
            return Err(("ghost_contrast", "echo contrast and offset must be non-negative".into()));
        }
        let corruption = DifficultyParams {
            rho: self.rho,
            amax_scale: self.amax_scale,
            delta: if self.delta > 0.0 { Some(self.delta) } else { None },
            ..DifficultyParams::default()
        };
        corruption.validate().map_err(|e| ("amax_scale", e.to_string()))?;
        if self.delta < 0.0 {
            return Err(("delta", "must be non-negative".into()));
        }
        let ratios =
            if self.clean_labels { vec![0.0; self.client_sizes.len()] } else { self.corruption_ratios.clone() };
        let layout = FederationLayout {
            client_sizes: self.client_sizes.clone(),
            corruption_ratios: ratios,
            test_size: self.test_size,
            corruption,
        };
        layout.validate().map_err(|e| {
            let key = match e {
                sfcl_core::Error::Config(m) if m.contains("ratio") => "corruption_ratios",
                sfcl_core::Error::Config(m) if m.contains("test") => "test_size",
                _ => "client_sizes",
            };
            (key, e.to_string())
        })?;
        let arch = Arch {
            in_channels: 1,
            classes: self.classes as usize,
            fe_channels: self.fe_channels,
            hidden_channels: self.hidden_channels,
        };
        arch.validate().map_err(|e| ("fe_channels", e.to_string()))?;
        let protocol = ProtocolConfig {
            mode,
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            optimizer: AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps },
            schedule: Schedule {
                gamma_start: self.gamma_start,
                gamma_end: self.gamma_end,
                lambda_start: self.lambda_start,
                lambda_end: self.lambda_end,
                horizon: self.schedule_rounds,
                warmup_rounds: self.warmup_rounds,
            },
            tau0: self.tau0,
            correction_threshold: self.correction_threshold,
            eta: self.eta,
            logit_init: self.logit_init,
            teacher_decay: self.teacher_decay,
            norm_decay: self.norm_decay,
            norm_floor: self.norm_floor,
            perturb: PerturbParams { noise_fraction: self.perturb_noise, shift: self.perturb_shift },
            wire_activations: self.wire_activations,
            seed: self.seed,
        };
        protocol.validate().map_err(|e| (protocol_key(&e), e.to_string()))?;
        Ok(Resolved { scene, layout, arch, protocol })
    }
}

fn protocol_key(e: &sfcl_core::Error) -> &'static str {
    let sfcl_core::Error::Config(m) = e else { return "mode" };
    [
        ("schedule", "schedule_rounds"),
        ("gamma", "gamma_start"),
        ("lambda", "lambda_start"),
        ("local_epochs", "local_epochs"),
        ("optimizer", "lr"),
        ("tau0", "tau0"),
        ("correction", "correction_threshold"),
        ("logit", "eta"),
        ("EMA", "teacher_decay"),
        ("floor", "norm_floor"),
        ("perturbation", "perturb_noise"),
    ]
    .iter()
    .find(|(needle, _)| m.contains(needle))
    .map_or("mode", |&(_, key)| key)
}

/// 1-based line of `key = ...` in the source, if present.
fn line_of(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|l| {
        let l = l.trim_start();
        l.strip_prefix(key).is_some_and(|rest| rest.trim_start().starts_with('='))
    })
    .map(|i| i + 1)
}

fn field_error(text: &str, key: &str, msg: &str) -> CliError {
    match line_of(text, key) {
        Some(line) => CliError::Config(format!("line {line}, field `{key}`: {msg}")),
        None => CliError::Config(format!("field `{key}` (default value): {msg}")),
    }
}

fn toml_message(text: &str, e: &toml::de::Error) -> String {
    let msg = e.message().trim();
    match e.span() {
        Some(span) => {
            let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
            format!("line {line}: {msg}")
        }
        None => msg.to_string(),
    }
}
