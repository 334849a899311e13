//! Layered run configuration: built-in defaults, then an optional key=value
//! file, then command-line overrides. Keys are the dotted field paths of
//! [`RunConfig`]; anything else is rejected.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use topocell::oracle::{Day, OracleRules};
use topocell::patterns::FrameConfig;
use topocell::stats::MaskConfig;
use topocell::sweep::{AlignmentConfig, SweepConfig};
use topocell::trainer::TrainConfig;
use topocell::wnet::NetConfig;

use crate::CliError;

pub const ECHO_FILE: &str = "topocell.conf";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameSettings {
    /// Pixels per side; also the network resolution.
    pub resolution: usize,
    pub scale_um: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSettings {
    pub base_channels: usize,
    pub channel_cap: usize,
    pub disc_layers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub learning_rate: f64,
    pub lambda_rec: f64,
    pub lambda_adv: f64,
    pub warmup_fraction: f64,
    pub ramp_end_fraction: f64,
    pub crop_window: Option<usize>,
    pub checkpoint_every: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSettings {
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsSettings {
    pub sections_per_side: usize,
    pub min_pixels: usize,
    pub mask: MaskConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSettings {
    pub widths_um: Vec<f64>,
    pub separations_um: Vec<f64>,
    pub days: Vec<Day>,
    pub densities: Vec<f64>,
    pub line_angle_deg: f64,
    pub replicates: usize,
    pub alignment: AlignmentConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Single-threaded execution.
    pub deterministic: bool,
    pub frame: FrameSettings,
    pub net: NetSettings,
    pub train: TrainSettings,
    pub dataset: DatasetSettings,
    pub oracle: OracleRules,
    pub stats: StatsSettings,
    pub sweep: SweepSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let frame = FrameConfig::desk();
        let net = NetConfig::desk();
        let train = TrainConfig::default();
        let sweep = SweepConfig::default();
        Self {
            seed: 0,
            deterministic: false,
            frame: FrameSettings {
                resolution: frame.resolution,
                scale_um: frame.scale_um,
            },
            net: NetSettings {
                base_channels: net.base_channels,
                channel_cap: net.channel_cap,
                disc_layers: net.disc_layers,
            },
            train: TrainSettings {
                epochs: train.epochs,
                learning_rate: train.learning_rate,
                lambda_rec: train.lambda_rec,
                lambda_adv: train.lambda_adv,
                warmup_fraction: train.warmup_fraction,
                ramp_end_fraction: train.ramp_end_fraction,
                crop_window: train.crop_window,
                checkpoint_every: train.checkpoint_every,
            },
            dataset: DatasetSettings { count: 256 },
            oracle: OracleRules::default(),
            stats: StatsSettings {
                sections_per_side: 16,
                min_pixels: 1,
                mask: MaskConfig::default(),
            },
            sweep: SweepSettings {
                widths_um: sweep.widths_um,
                separations_um: sweep.separations_um,
                days: sweep.days,
                densities: sweep.densities,
                line_angle_deg: sweep.line_angle_deg,
                replicates: sweep.replicates,
                alignment: sweep.alignment,
            },
        }
    }
}

impl RunConfig {
    pub fn frame(&self) -> FrameConfig {
        FrameConfig::with_scale(self.frame.resolution, self.frame.scale_um)
    }

    pub fn net(&self) -> NetConfig {
        NetConfig {
            resolution: self.frame.resolution,
            base_channels: self.net.base_channels,
            channel_cap: self.net.channel_cap,
            disc_layers: self.net.disc_layers,
        }
    }

    pub fn train(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            lambda_rec: t.lambda_rec,
            lambda_adv: t.lambda_adv,
            warmup_fraction: t.warmup_fraction,
            ramp_end_fraction: t.ramp_end_fraction,
            seed: self.seed,
            crop_window: t.crop_window,
            checkpoint_every: t.checkpoint_every,
            checkpoint_path: None,
        }
    }

    pub fn sweep(&self) -> SweepConfig {
        let s = &self.sweep;
        SweepConfig {
            widths_um: s.widths_um.clone(),
            separations_um: s.separations_um.clone(),
            days: s.days.clone(),
            densities: s.densities.clone(),
            line_angle_deg: s.line_angle_deg,
            replicates: s.replicates,
            seed: self.seed,
            alignment: s.alignment,
        }
    }

    /// Checks every section against its module's rules.
    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
        self.frame().validate().map_err(|e| usage(&e))?;
        self.net().validate().map_err(|e| usage(&e))?;
        self.train().validate().map_err(|e| usage(&e))?;
        self.oracle.validate().map_err(|e| usage(&e))?;
        self.sweep().validate().map_err(|e| usage(&e))?;
        if self.dataset.count == 0 {
            return Err(CliError::Config("dataset.count must be at least 1".into()));
        }
        let g = self.stats.sections_per_side;
        if g == 0 || self.frame.resolution % g != 0 {
            return Err(CliError::Config(format!(
                "stats.sections_per_side {g} must divide frame.resolution {}",
                self.frame.resolution
            )));
        }
        for (key, m) in [("stats.mask", &self.stats.mask), ("sweep.alignment.mask", &self.sweep.alignment.mask)] {
            if !(0.0..=1.0).contains(&m.threshold) || !(m.min_diameter_um >= 0.0) {
                return Err(CliError::Config(format!(
                    "{key}: threshold must lie in [0, 1] and min_diameter_um be non-negative"
                )));
            }
        }
        Ok(())
    }

    /// Flattened `key = value` view, sorted by key.
    pub fn entries(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    /// The effective configuration in the same format the loader reads.
    pub fn echo(&self) -> String {
        let mut text = String::new();
        for (k, v) in self.entries() {
            text.push_str(&format!("{k} = {}\n", render(&v)));
        }
        text
    }

    /// Applies one override, rejecting unknown keys and ill-typed values.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), CliError> {
        let mut tree = serde_json::to_value(&*self).expect("config serializes");
        let slot = lookup(&mut tree, key).ok_or_else(|| CliError::Config(format!("unknown key `{key}`")))?;
        *slot = parse_value(slot, raw.trim());
        *self = serde_json::from_value(tree).map_err(|e| CliError::Config(format!("{key} = {raw}: {e}")))?;
        Ok(())
    }

    /// Applies a key=value file: one pair per line, `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("{origin}:{}: expected key = value", n + 1)))?;
            self.set(k.trim(), v).map_err(|e| match e {
                CliError::Config(m) => CliError::Config(format!("{origin}:{}: {m}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }
}

/// Objects and arrays of objects are walked; everything else is a leaf.
fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    let join = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                flatten(&join(k), child, out);
            }
        }
        Value::Array(items) if !items.is_empty() && items.iter().all(Value::is_object) => {
            for (i, child) in items.iter().enumerate() {
                flatten(&join(&i.to_string()), child, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

fn lookup<'a>(tree: &'a mut Value, key: &str) -> Option<&'a mut Value> {
    let mut node = tree;
    for part in key.split('.') {
        node = match node {
            Value::Object(m) => m.get_mut(part)?,
            Value::Array(items) if items.iter().all(Value::is_object) => items.get_mut(part.parse::<usize>().ok()?)?,
            _ => return None,
        };
    }
    match node {
        Value::Object(_) => None,
        Value::Array(items) if !items.is_empty() && items.iter().all(Value::is_object) => None,
        leaf => Some(leaf),
    }
}

/// Lists are written comma-separated, optional values as `none`.
fn render(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::Array(items) => items.iter().map(render).collect::<Vec<_>>().join(","),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn parse_value(current: &Value, raw: &str) -> Value {
    if raw == "none" {
        return Value::Null;
    }
    if let Value::Array(_) = current {
        if raw.is_empty() {
            return Value::Array(Vec::new());
        }
        return Value::Array(raw.split(',').map(|p| scalar(p.trim())).collect());
    }
    scalar(raw)
}

fn scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("oracle.theta_align_um", "14").unwrap();
        cfg.set("sweep.widths_um", "5,10").unwrap();
        cfg.set("train.crop_window", "128").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.echo(), "echo").unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = RunConfig::default();
        let err = cfg.set("oracle.theta", "3").unwrap_err();
        assert!(err.to_string().contains("unknown key"));
        assert!(cfg.apply_text("seed = 1\nbogus = 2\n", "f").unwrap_err().to_string().contains("f:2"));
    }

    #[test]
    fn ill_typed_values_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("train.epochs", "2.5").is_err());
        assert!(cfg.set("deterministic", "maybe").is_err());
        assert!(cfg.set("sweep.days", "0,2").is_err());
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn nested_profiles_are_addressable() {
        let mut cfg = RunConfig::default();
        cfg.set("oracle.day_profiles.3.radius_um", "11").unwrap();
        assert_eq!(cfg.oracle.day_profiles[3].radius_um, 11.0);
        assert!(cfg.entries().contains_key("oracle.day_profiles.0.capacity_per_mm2"));
        assert!(cfg.set("oracle.day_profiles.4.radius_um", "1").is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# header\n\nseed = 9 # trailing\n", "f").unwrap();
        assert_eq!(cfg.seed, 9);
        assert!(cfg.apply_text("seed 9", "f").is_err());
    }
}
