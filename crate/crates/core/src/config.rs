//! Global run configuration.
//!
//! Resolution order: preset defaults, then the TOML file, then dotted
//! `--set key=value` overrides. Keys unknown to the preset are rejected with
//! their full dotted path. [`GlobalConfig::to_toml`] dumps the resolved
//! configuration; loading that dump reproduces it exactly.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::risk::RiskParams;
use crate::sim::{ScenarioConfig, ScenarioKind};
use crate::teacher::TeacherConfig;
use crate::train::{RunSpec, TrainConfig};

/// Leaves that may be absent from a serialised preset.
const OPTIONAL_KEYS: &[&str] = &["teacher.memory_file"];
/// Tables replaced wholesale rather than merged key by key.
const OPAQUE_TABLES: &[&str] = &["scenario.success_region"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Merge with 5 background vehicles and a 2e4-step budget.
    MergeLite,
    Merge,
    Highway,
    Intersection,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::MergeLite => "merge-lite",
            Self::Merge => "merge",
            Self::Highway => "highway",
            Self::Intersection => "intersection",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "merge-lite" => Ok(Self::MergeLite),
            "merge" => Ok(Self::Merge),
            "highway" => Ok(Self::Highway),
            "intersection" => Ok(Self::Intersection),
            other => Err(Error::config(
                "preset",
                format!("unknown preset `{other}` (expected merge-lite|merge|highway|intersection)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalConfig {
    pub out_dir: PathBuf,
    pub scenario: ScenarioConfig,
    pub train: TrainConfig,
    pub risk: RiskParams,
    pub teacher: TeacherConfig,
}

impl GlobalConfig {
    pub fn preset(p: Preset) -> Self {
        let (scenario, total_steps) = match p {
            Preset::MergeLite => {
                let mut s = ScenarioConfig::preset(ScenarioKind::Merge);
                s.n_background = 5;
                (s, 20_000)
            }
            Preset::Merge => (ScenarioConfig::preset(ScenarioKind::Merge), 100_000),
            Preset::Highway => (ScenarioConfig::preset(ScenarioKind::Highway), 100_000),
            Preset::Intersection => (ScenarioConfig::preset(ScenarioKind::Intersection), 100_000),
        };
        Self {
            out_dir: PathBuf::from("runs").join(p.as_str()),
            scenario,
            train: TrainConfig {
                total_steps,
                ..TrainConfig::default()
            },
            risk: RiskParams::default(),
            teacher: TeacherConfig::default(),
        }
    }

    /// Resolves a configuration. `file` may name a top-level `preset`; an
    /// explicit `preset` argument wins over it. `scenario` swaps the
    /// scenario block for that kind's full preset before the file applies.
    pub fn resolve(
        file: Option<&Path>,
        preset: Option<Preset>,
        scenario: Option<ScenarioKind>,
        overrides: &[String],
    ) -> Result<Self> {
        let mut user = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Error::config("--config", format!("cannot read {}: {e}", path.display()))
                })?;
                text.parse::<Table>()
                    .map_err(|e| Error::parse(path.display().to_string(), e.message()))?
            }
            None => Table::new(),
        };
        let file_preset = match user.remove("preset") {
            Some(Value::String(s)) => Some(s.parse::<Preset>()?),
            Some(_) => return Err(Error::config("preset", "must be a string")),
            None => None,
        };
        let mut base_cfg = Self::preset(preset.or(file_preset).unwrap_or(Preset::MergeLite));
        if let Some(kind) = scenario {
            base_cfg.scenario = ScenarioConfig::preset(kind);
        }
        let Value::Table(mut base) =
            Value::try_from(&base_cfg).map_err(|e| Error::config("preset", e.to_string()))?
        else {
            unreachable!("config serialises to a table");
        };
        merge(&mut base, user, "")?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o.clone(), "override must look like key=value"))?;
            set_dotted(&mut base, key.trim(), parse_scalar(raw.trim()))?;
        }
        let cfg = GlobalConfig::deserialize(Value::Table(base))
            .map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.run_spec().validate()
    }

    pub fn run_spec(&self) -> RunSpec {
        RunSpec {
            scenario: self.scenario.clone(),
            train: self.train.clone(),
            risk: self.risk,
            teacher: self.teacher.clone(),
            out_dir: self.out_dir.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises to TOML")
    }

    /// Writes `effective_config.toml` into the output directory.
    pub fn dump(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))?;
        let path = self.out_dir.join("effective_config.toml");
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

fn merge(base: &mut Table, user: Table, prefix: &str) -> Result<()> {
    for (k, v) in user {
        let path = join(prefix, &k);
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(u)) if !OPAQUE_TABLES.contains(&path.as_str()) => {
                merge(b, u, &path)?;
            }
            (Some(slot), v) => *slot = v,
            (None, v) if OPTIONAL_KEYS.contains(&path.as_str()) => {
                base.insert(k, v);
            }
            (None, _) => return Err(Error::config(path, "unknown key")),
        }
    }
    Ok(())
}

fn set_dotted(base: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut t = base;
    for (i, part) in parts.iter().enumerate() {
        let path = parts[..=i].join(".");
        if i + 1 == parts.len() {
            if t.contains_key(*part) || OPTIONAL_KEYS.contains(&path.as_str()) {
                t.insert(part.to_string(), value);
                return Ok(());
            }
            return Err(Error::config(path, "unknown key"));
        }
        t = match t.get_mut(*part) {
            Some(Value::Table(next)) => next,
            _ => return Err(Error::config(path, "unknown key")),
        };
    }
    Err(Error::config(key, "empty key"))
}

/// Parses an override value as TOML, falling back to a bare string.
fn parse_scalar(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::Variant;

    #[test]
    fn merge_lite_defaults() {
        let c = GlobalConfig::resolve(None, None, None, &[]).unwrap();
        assert_eq!(c.scenario.kind, ScenarioKind::Merge);
        assert_eq!(c.scenario.n_background, 5);
        assert_eq!(c.train.total_steps, 20_000);
        assert_eq!(c.train.lr, 5e-4);
        assert_eq!(c.train.rollout_size, 1600);
        assert_eq!(c.teacher.n_shot, 3);
        assert_eq!(c.teacher.memory_capacity, 20);
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let c = GlobalConfig::resolve(
            None,
            None,
            None,
            &["train.variant=v-ppo".into(), "train.total_steps=2000".into(), "risk.delta=3.5".into()],
        )
        .unwrap();
        assert_eq!(c.train.variant, Variant::VPpo);
        assert_eq!(c.train.total_steps, 2000);
        assert_eq!(c.risk.delta, 3.5);
        let e = GlobalConfig::resolve(None, None, None, &["train.bogus=1".into()]).unwrap_err();
        assert!(e.to_string().contains("train.bogus"), "{e}");
    }

    #[test]
    fn file_keys_are_checked_and_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "preset = \"highway\"\n[train]\nseed = 9\n[teacher]\nmemory_file = \"m.json\"\n").unwrap();
        let c = GlobalConfig::resolve(Some(&p), None, None, &[]).unwrap();
        assert_eq!(c.scenario.kind, ScenarioKind::Highway);
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.teacher.memory_file, Some(PathBuf::from("m.json")));

        std::fs::write(&p, c.to_toml()).unwrap();
        assert_eq!(GlobalConfig::resolve(Some(&p), None, None, &[]).unwrap(), c);

        std::fs::write(&p, "[scenario]\nlanes = 3\n").unwrap();
        let e = GlobalConfig::resolve(Some(&p), None, None, &[]).unwrap_err();
        assert!(e.to_string().contains("scenario.lanes"), "{e}");

        let missing = dir.path().join("nope.toml");
        let e = GlobalConfig::resolve(Some(&missing), None, None, &[]).unwrap_err();
        assert!(e.to_string().contains("nope.toml"), "{e}");
    }

    #[test]
    fn invalid_values_name_the_field() {
        let e = GlobalConfig::resolve(None, None, None, &["train.teacher_window_fraction=1.5".into()])
            .unwrap_err();
        assert!(e.to_string().contains("train.teacher_window_fraction"), "{e}");
    }
}
