//! Run configuration: a small `key = value` config dialect with `[section]`
//! headers, `#` comments, and `include` directives, plus the typed config
//! structs built from it.
//!
//! Dialect (version 1):
//!   - `key = value` pairs, whitespace-trimmed; keys are namespaced by the
//!     enclosing `[section]` as `section.key`.
//!   - `include path/to/file.conf` splices another file at that point
//!     (relative to the including file).
//!   - `#` starts a comment.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{AttackKind, OptimizerConfig};
use crate::control::ControllerConfig;
use crate::defense::DefenseKind;
use crate::error::{Result, SimError};
use crate::fusion::NoiseModel;
use crate::safety::AebsSetting;
use crate::sensor::{RadarParams, RenderParams};
use crate::world::{ScenarioConfig, ScenarioId};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

/// Flat section.key -> value map parsed from a config file.
pub type ConfigMap = BTreeMap<String, String>;

pub fn parse_config_file(path: &Path) -> Result<ConfigMap> {
    let mut map = ConfigMap::new();
    parse_into(path, &mut map, 0)?;
    Ok(map)
}

fn parse_into(path: &Path, map: &mut ConfigMap, depth: usize) -> Result<()> {
    if depth > 8 {
        return Err(SimError::Config(format!(
            "include depth exceeded at {}",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(path).map_err(|e| {
        SimError::Config(format!("cannot read config {}: {e}", path.display()))
    })?;
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| SimError::ConfigParse {
                file: path.display().to_string(),
                line: lineno + 1,
                msg: "unterminated section header".into(),
            })?;
            section = name.trim().to_string();
            continue;
        }
        if let Some(rest) = line.strip_prefix("include") {
            let target = rest.trim().trim_matches('"');
            if target.is_empty() {
                return Err(SimError::ConfigParse {
                    file: path.display().to_string(),
                    line: lineno + 1,
                    msg: "include needs a path".into(),
                });
            }
            let base = path.parent().unwrap_or(Path::new("."));
            parse_into(&base.join(target), map, depth + 1)?;
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| SimError::ConfigParse {
            file: path.display().to_string(),
            line: lineno + 1,
            msg: format!("expected `key = value`, got `{line}`"),
        })?;
        let key = if section.is_empty() {
            k.trim().to_string()
        } else {
            format!("{}.{}", section, k.trim())
        };
        map.insert(key, v.trim().to_string());
    }
    Ok(())
}

/// FNV-1a over the canonical key=value listing.
pub fn config_hash(map: &ConfigMap) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for (k, v) in map {
        for b in k.bytes().chain("=".bytes()).chain(v.bytes()).chain("\n".bytes()) {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

/// Everything one closed-loop run needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub scenario: ScenarioId,
    pub seed: u64,
    pub attack: AttackKind,
    pub aebs: AebsSetting,
    pub driver_enabled: bool,
    pub driver_threshold: f64,
    pub defense: DefenseKind,
    pub render: RenderParams,
    pub radar: RadarParams,
    pub controller: ControllerConfig,
    pub optimizer: OptimizerConfig,
    pub noise: NoiseModel,
    /// Fuse radar into the primary (cruise-control) feed. The default loop
    /// is camera-only; the emergency-brake feed always fuses radar.
    pub radar_for_acc: bool,
    /// Run the gap law even in calibration scenarios (the defense sweep
    /// drives the cruise-control stack at a stationary target).
    pub force_acc: bool,
    /// Sample stealth metrics every N attacked frames (0 disables).
    pub stealth_every: u64,
    /// Keep per-cycle rows in the record.
    pub log_rows: bool,
    pub config_hash: u64,
}

impl RunConfig {
    pub fn new(scenario: ScenarioId, seed: u64) -> Self {
        RunConfig {
            scenario,
            seed,
            attack: AttackKind::None,
            aebs: AebsSetting::Disabled,
            driver_enabled: false,
            driver_threshold: 0.15,
            defense: DefenseKind::None,
            render: RenderParams::default(),
            radar: RadarParams::default(),
            controller: ControllerConfig::default(),
            optimizer: OptimizerConfig::default(),
            noise: NoiseModel::default(),
            radar_for_acc: false,
            force_acc: false,
            stealth_every: 10,
            log_rows: true,
            config_hash: 0,
        }
    }

    pub fn scenario_config(&self) -> Result<ScenarioConfig> {
        ScenarioConfig::build(self.scenario, self.seed)
    }

    /// Builds a run config from a parsed map plus defaults, recording the
    /// hash of the map for the log header.
    pub fn from_map(map: &ConfigMap) -> Result<Self> {
        let get = |k: &str| map.get(k).map(|s| s.as_str());
        let scenario = ScenarioId::parse(get("run.scenario").unwrap_or("SC1"))?;
        let seed: u64 = parse_num(map, "run.seed", 0)?;
        let mut cfg = RunConfig::new(scenario, seed);
        if let Some(v) = get("run.attack") {
            cfg.attack = AttackKind::parse(v)?;
        }
        if let Some(v) = get("safety.aebs") {
            cfg.aebs = AebsSetting::parse(v)?;
        }
        if let Some(v) = get("safety.driver") {
            cfg.driver_enabled = parse_bool(v, "safety.driver")?;
        }
        cfg.driver_threshold = parse_num(map, "safety.driver_threshold", cfg.driver_threshold)?;
        if let Some(v) = get("defense.kind") {
            cfg.defense = DefenseKind::parse(v)?;
        }
        if let Some(v) = get("render.weather") {
            cfg.render = cfg.render.with_weather(v)?;
        }
        cfg.render.cam_height = parse_num(map, "render.cam_height", cfg.render.cam_height)?;
        cfg.render.lateral_offset =
            parse_num(map, "render.lateral_offset", cfg.render.lateral_offset)?;
        cfg.controller.tau_hw = parse_num(map, "controller.tau_hw", cfg.controller.tau_hw)?;
        cfg.controller.d0 = parse_num(map, "controller.d0", cfg.controller.d0)?;
        cfg.controller.k1 = parse_num(map, "controller.k1", cfg.controller.k1)?;
        cfg.controller.k2 = parse_num(map, "controller.k2", cfg.controller.k2)?;
        cfg.controller.kv = parse_num(map, "controller.kv", cfg.controller.kv)?;
        cfg.optimizer.lambda = parse_num(map, "attack.lambda", cfg.optimizer.lambda)?;
        cfg.optimizer.p_norm = parse_num(map, "attack.p_norm", cfg.optimizer.p_norm)?;
        cfg.optimizer.q_keep = parse_num(map, "attack.q_keep", cfg.optimizer.q_keep)?;
        cfg.optimizer.steps = parse_num(map, "attack.steps", cfg.optimizer.steps as u64)? as usize;
        cfg.noise.sigma = parse_num(map, "attack.sigma", cfg.noise.sigma)?;
        if let Some(v) = get("fusion.radar_for_acc") {
            cfg.radar_for_acc = parse_bool(v, "fusion.radar_for_acc")?;
        }
        cfg.config_hash = config_hash(map);
        Ok(cfg)
    }

    /// Cell label used in file names and summary rows.
    pub fn cell_label(&self) -> String {
        format!(
            "{}-{}-{}-{}-{}",
            self.scenario.name(),
            self.attack.name(),
            match self.aebs {
                AebsSetting::Independent => "independent",
                AebsSetting::SharedCamera => "shared",
                AebsSetting::Disabled => "disabled",
            },
            if self.driver_enabled {
                format!("driver{:.3}", self.driver_threshold)
            } else {
                "nodriver".into()
            },
            self.defense.name().replace(':', "_"),
        )
    }

    pub fn run_file_name(&self) -> String {
        format!("run-{}-seed{}.jsonl", self.cell_label(), self.seed)
    }
}

fn parse_bool(v: &str, key: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        other => Err(SimError::Config(format!("bad boolean `{other}` for {key}"))),
    }
}

fn parse_num<T: std::str::FromStr>(map: &ConfigMap, key: &str, default: T) -> Result<T> {
    match map.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| SimError::Config(format!("bad numeric value `{v}` for {key}"))),
    }
}

/// Experiment matrix: the cross product of the listed axes, expanded into
/// concrete run configs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentMatrix {
    pub scenarios: Vec<ScenarioId>,
    pub attacks: Vec<AttackKind>,
    pub aebs: Vec<AebsSetting>,
    pub driver_enabled: bool,
    pub driver_thresholds: Vec<f64>,
    pub defenses: Vec<DefenseKind>,
    pub seeds: Vec<u64>,
    pub base: Box<RunConfig>,
}

impl ExperimentMatrix {
    pub fn from_map(map: &ConfigMap) -> Result<Self> {
        let base = RunConfig::from_map(map)?;
        let list = |key: &str, default: &str| -> Vec<String> {
            map.get(key)
                .map(|s| s.as_str())
                .unwrap_or(default)
                .split(',')
                .map(|p| p.trim().to_string())
                .filter(|p| !p.is_empty())
                .collect()
        };
        let scenarios = list("matrix.scenarios", "SC1")
            .iter()
            .map(|s| ScenarioId::parse(s))
            .collect::<Result<Vec<_>>>()?;
        let attacks = list("matrix.attacks", "none")
            .iter()
            .map(|s| AttackKind::parse(s))
            .collect::<Result<Vec<_>>>()?;
        let aebs = list("matrix.safeties", "disabled")
            .iter()
            .map(|s| AebsSetting::parse(s))
            .collect::<Result<Vec<_>>>()?;
        let driver_enabled = map
            .get("matrix.driver")
            .map(|v| parse_bool(v, "matrix.driver"))
            .transpose()?
            .unwrap_or(base.driver_enabled);
        let driver_thresholds = list("matrix.driver_thresholds", "0.15")
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| SimError::Config(format!("bad driver threshold `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let defenses = list("matrix.defenses", "none")
            .iter()
            .map(|s| DefenseKind::parse(s))
            .collect::<Result<Vec<_>>>()?;
        let seeds = parse_seed_list(map.get("matrix.seeds").map(|s| s.as_str()).unwrap_or("0"))?;
        let m = ExperimentMatrix {
            scenarios,
            attacks,
            aebs,
            driver_enabled,
            driver_thresholds,
            defenses,
            seeds,
            base: Box::new(base),
        };
        if m.expand().is_empty() {
            return Err(SimError::Config("matrix expands to zero runs".into()));
        }
        Ok(m)
    }

    pub fn expand(&self) -> Vec<RunConfig> {
        let mut out = Vec::new();
        for sc in &self.scenarios {
            for at in &self.attacks {
                for ae in &self.aebs {
                    for th in &self.driver_thresholds {
                        for de in &self.defenses {
                            for seed in &self.seeds {
                                let mut cfg = (*self.base).clone();
                                cfg.scenario = *sc;
                                cfg.attack = *at;
                                cfg.aebs = *ae;
                                cfg.driver_enabled = self.driver_enabled;
                                cfg.driver_threshold = *th;
                                cfg.defense = *de;
                                cfg.seed = *seed;
                                out.push(cfg);
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Seed lists: `0..20` (half-open) or `1,2,7`.
pub fn parse_seed_list(s: &str) -> Result<Vec<u64>> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once("..") {
        let start: u64 = a
            .trim()
            .parse()
            .map_err(|_| SimError::Config(format!("bad seed range `{s}`")))?;
        let end: u64 = b
            .trim()
            .parse()
            .map_err(|_| SimError::Config(format!("bad seed range `{s}`")))?;
        if end <= start {
            return Err(SimError::Config(format!("empty seed range `{s}`")));
        }
        Ok((start..end).collect())
    } else {
        s.split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| SimError::Config(format!("bad seed `{p}`")))
            })
            .collect()
    }
}

/// Output directory override: flag value wins, then the environment.
pub fn resolve_out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("ACCSIM_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_comments_and_includes() {
        let dir = std::env::temp_dir().join(format!("accsim-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("base.conf"), "[controller]\nk1 = 0.2\n").unwrap();
        std::fs::write(
            dir.join("main.conf"),
            "# comment\ninclude base.conf\n[run]\nscenario = SC2\nseed = 9\n[safety]\naebs = shared\n",
        )
        .unwrap();
        let map = parse_config_file(&dir.join("main.conf")).unwrap();
        assert_eq!(map.get("controller.k1").unwrap(), "0.2");
        assert_eq!(map.get("run.scenario").unwrap(), "SC2");
        let cfg = RunConfig::from_map(&map).unwrap();
        assert_eq!(cfg.scenario, ScenarioId::Sc2);
        assert_eq!(cfg.seed, 9);
        assert!((cfg.controller.k1 - 0.2).abs() < 1e-12);
        assert_eq!(cfg.aebs, AebsSetting::SharedCamera);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn parse_error_reports_line() {
        let dir = std::env::temp_dir().join(format!("accsim-cfg-err-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("bad.conf"), "[run]\nscenario SC1\n").unwrap();
        let err = parse_config_file(&dir.join("bad.conf")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad.conf:2"), "got: {msg}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn unknown_scenario_in_map_is_error() {
        let mut map = ConfigMap::new();
        map.insert("run.scenario".into(), "SC9".into());
        assert!(RunConfig::from_map(&map).is_err());
    }

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seed_list("0..4").unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(parse_seed_list("3,5,8").unwrap(), vec![3, 5, 8]);
        assert!(parse_seed_list("5..5").is_err());
    }

    #[test]
    fn matrix_expansion_counts() {
        let mut map = ConfigMap::new();
        map.insert("matrix.scenarios".into(), "SC1,SC2,SC3,SC4".into());
        map.insert("matrix.attacks".into(), "ca-opt".into());
        map.insert("matrix.safeties".into(), "disabled".into());
        map.insert("matrix.seeds".into(), "0..10".into());
        let m = ExperimentMatrix::from_map(&map).unwrap();
        assert_eq!(m.expand().len(), 40);
    }

    #[test]
    fn hash_stable_and_order_independent() {
        let mut a = ConfigMap::new();
        a.insert("x".into(), "1".into());
        a.insert("y".into(), "2".into());
        let mut b = ConfigMap::new();
        b.insert("y".into(), "2".into());
        b.insert("x".into(), "1".into());
        assert_eq!(config_hash(&a), config_hash(&b));
        a.insert("z".into(), "3".into());
        assert_ne!(config_hash(&a), config_hash(&b));
    }
}
