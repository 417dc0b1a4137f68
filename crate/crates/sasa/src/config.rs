//! Flat `key=value` configuration with dotted namespaces.
//!
//! Every field of [`Config`] is addressable by its dotted path in the
//! serialized tree (`train.adam.lr`, `targets.1.style_signal.gain`, ...).
//! Arrays of scalars are written as comma-separated lists. A few short
//! aliases (`trainer.lr`, `loss.lambda1`, `arch.*`, `data.image_size`, ...)
//! map onto the canonical paths. Files hold one `key = value` per line;
//! `#` starts a comment.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use sasa_core::bench::ProtocolSpec;
use sasa_core::nets::ArchConfig;
use sasa_core::trainer::StagePolicy;

/// Options of a single command invocation (which method, target and seed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    /// Method name for `train`/`baseline` (see `sasa_core::bench::MethodConfig`).
    pub method: String,
    /// 1-based target number for single-target commands.
    pub target: usize,
    pub seed: u64,
    /// Name of the protocol directory under the output root.
    pub protocol: String,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            method: String::from("sasa"),
            target: 2,
            seed: 0,
            protocol: String::from("st"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Config {
    #[serde(flatten)]
    pub protocol: ProtocolSpec,
    pub run: RunOptions,
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected `key = value`, got `{}`", n + 1, raw.trim()))?;
        let k = k.trim();
        if k.is_empty() {
            bail!("line {}: empty key", n + 1);
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Splits a `key=value` command-line override.
pub fn parse_set(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| anyhow!("--set expects key=value, got `{s}`"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn parse_scalar(key: &str, like: &Value, text: &str) -> Result<Value> {
    let bad = || anyhow!("{key}: cannot parse `{text}` as {}", kind_name(like));
    Ok(match like {
        Value::Bool(_) => Value::Bool(match text {
            "true" | "1" | "yes" | "on" => true,
            "false" | "0" | "no" | "off" => false,
            _ => return Err(bad()),
        }),
        Value::Number(n) if n.is_u64() => Value::from(text.parse::<u64>().map_err(|_| bad())?),
        Value::Number(n) if n.is_i64() => Value::from(text.parse::<i64>().map_err(|_| bad())?),
        Value::Number(_) => {
            let x: f64 = text.parse().map_err(|_| bad())?;
            serde_json::Number::from_f64(x).map(Value::Number).ok_or_else(bad)?
        }
        Value::String(_) => Value::String(text.to_string()),
        _ => return Err(bad()),
    })
}

fn kind_name(v: &Value) -> &'static str {
    match v {
        Value::Bool(_) => "a boolean",
        Value::Number(n) if n.is_u64() => "a non-negative integer",
        Value::Number(n) if n.is_i64() => "an integer",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "a list",
        _ => "a value",
    }
}

fn is_scalar_list(a: &[Value]) -> bool {
    a.iter().all(|v| !v.is_array() && !v.is_object())
}

/// Parses a comma list whose element type follows the current list (or, for
/// an empty list, its numeric form).
fn parse_list(key: &str, current: &[Value], text: &str) -> Result<Value> {
    if text.trim().is_empty() {
        return Ok(Value::Array(Vec::new()));
    }
    let proto = current.first().cloned().unwrap_or(Value::from(0u64));
    let items = text
        .split(',')
        .map(|t| {
            let t = t.trim();
            // allow integers where floats are stored, and floats in an empty integer list
            parse_scalar(key, &proto, t).or_else(|e| match proto {
                Value::Number(_) => parse_scalar(key, &Value::from(0.5f64), t),
                _ => Err(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Value::Array(items))
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    let join = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                flatten(&join(k), x, out);
            }
        }
        Value::Array(a) if is_scalar_list(a) => {
            let items: Vec<String> = a.iter().map(scalar_text).collect();
            out.push((prefix.to_string(), items.join(",")));
        }
        Value::Array(a) => {
            for (i, x) in a.iter().enumerate() {
                flatten(&join(&i.to_string()), x, out);
            }
        }
        _ => out.push((prefix.to_string(), scalar_text(v))),
    }
}

fn scalar_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::from("none"),
        other => other.to_string(),
    }
}

/// Rewrites short aliases to canonical paths. Structural aliases are
/// handled in [`Config::set`].
fn canonical(key: &str) -> String {
    const PREFIXES: [(&str, &str); 4] = [
        ("trainer.", "train."),
        ("loss.", "train.loss."),
        ("arch.", "pretrain.arch."),
        ("batch.", "train.batch."),
    ];
    match key {
        "trainer.lr" => return String::from("train.adam.lr"),
        "trainer.weight_decay" => return String::from("train.adam.weight_decay"),
        "pretrain.lr" => return String::from("pretrain.adam.lr"),
        "pretrain.weight_decay" => return String::from("pretrain.adam.weight_decay"),
        _ => {}
    }
    for (from, to) in PREFIXES {
        if let Some(rest) = key.strip_prefix(from) {
            return format!("{to}{rest}");
        }
    }
    key.to_string()
}

impl Config {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut tree = serde_json::to_value(&*self)?;
        let key = canonical(key);
        match key.as_str() {
            "train.stage_policy" => {
                let p = match value {
                    "fixed" => StagePolicy::default(),
                    "accuracy" => StagePolicy::accuracy_default(),
                    _ => bail!("train.stage_policy: expected `fixed` or `accuracy`, got `{value}`"),
                };
                tree["train"]["stage_policy"] = serde_json::to_value(p)?;
            }
            "train.switch_fraction" => {
                let f: f64 = value.parse().map_err(|_| anyhow!("{key}: `{value}` is not a number"))?;
                tree["train"]["stage_policy"] = serde_json::to_value(StagePolicy::FixedFraction(f))?;
            }
            "pretrain.arch.preset" => {
                let size = self.protocol.pretrain.arch.image_size;
                let arch = match value {
                    "desk" => ArchConfig::default(),
                    "resnet18" => ArchConfig::resnet18(),
                    _ => bail!("arch.preset: expected `desk` or `resnet18`, got `{value}`"),
                };
                tree["pretrain"]["arch"] = serde_json::to_value(ArchConfig { image_size: size, ..arch })?;
            }
            "data.image_size" => {
                let like = Value::Array(vec![Value::from(0u64), Value::from(0u64)]);
                let size = parse_list(&key, like.as_array().expect("array"), value)?;
                if size.as_array().map(Vec::len) != Some(2) {
                    bail!("data.image_size: expected `height,width`");
                }
                tree["source"]["image_size"] = size.clone();
                tree["pretrain"]["arch"]["image_size"] = size.clone();
                for t in tree["targets"].as_array_mut().expect("targets list") {
                    t["image_size"] = size.clone();
                }
            }
            _ => set_path(&mut tree, &key, value)?,
        }
        *self = serde_json::from_value(tree).with_context(|| format!("{key} = {value}"))?;
        Ok(())
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Defaults, then the optional file, then the `--set` overrides.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut cfg = Config::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            cfg.apply(&parse_kv(&text).with_context(|| format!("in {}", p.display()))?)?;
        }
        for s in sets {
            let (k, v) = parse_set(s)?;
            cfg.set(&k, &v)?;
        }
        cfg.protocol.validate().map_err(|e| anyhow!("{e}"))?;
        cfg.target_index()?;
        Ok(cfg)
    }

    /// Every key with its current value, sorted by key.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out.sort();
        out
    }

    /// The merged configuration as a `key = value` file.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// 1-based run target as an index into `protocol.targets`.
    pub fn target_index(&self) -> Result<usize> {
        let t = self.run.target;
        if t == 0 || t > self.protocol.targets.len() {
            bail!("run.target: {t} is not between 1 and {}", self.protocol.targets.len());
        }
        Ok(t - 1)
    }
}

fn set_path(tree: &mut Value, key: &str, value: &str) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        let next = match node {
            Value::Object(m) => m.get_mut(*part),
            Value::Array(a) if !is_scalar_list(a) => part.parse::<usize>().ok().and_then(move |ix| a.get_mut(ix)),
            _ => None,
        };
        let Some(next) = next else {
            bail!("unknown config key `{key}`");
        };
        if last {
            *next = match &*next {
                Value::Array(a) if is_scalar_list(a) => parse_list(key, a, value)?,
                Value::Object(_) | Value::Array(_) => bail!("`{key}` is a section, not a value"),
                Value::Null => bail!("`{key}` cannot be set"),
                like => parse_scalar(key, like, value)?,
            };
            return Ok(());
        }
        node = next;
    }
    bail!("empty config key")
}

/// Reads a persisted snapshot without applying defaults twice.
pub fn from_kv_text(text: &str) -> Result<Config> {
    let mut cfg = Config::default();
    cfg.apply(&parse_kv(text)?)?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_text() {
        let mut cfg = Config::default();
        cfg.set("trainer.lr", "0.0005").unwrap();
        cfg.set("loss.lambda1", "0.01").unwrap();
        cfg.set("seeds", "3,4").unwrap();
        cfg.set("targets.0.style_signal.gain", "1,1.1,0.9").unwrap();
        let back = from_kv_text(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.protocol.train.adam.lr, 0.0005);
        assert_eq!(back.protocol.train.loss.lambda1, 0.01);
        assert_eq!(back.protocol.seeds, vec![3, 4]);
        assert_eq!(back.protocol.targets[0].style_signal.gain, [1.0, 1.1, 0.9]);
    }

    #[test]
    fn aliases_and_structural_keys() {
        let mut cfg = Config::default();
        cfg.set("trainer.stage_policy", "accuracy").unwrap();
        assert_eq!(cfg.protocol.train.stage_policy, StagePolicy::accuracy_default());
        cfg.set("trainer.switch_fraction", "0.4").unwrap();
        assert_eq!(cfg.protocol.train.stage_policy, StagePolicy::FixedFraction(0.4));
        cfg.set("data.image_size", "16,16").unwrap();
        assert_eq!(cfg.protocol.pretrain.arch.image_size, (16, 16));
        assert!(cfg.protocol.targets.iter().all(|t| t.image_size == (16, 16)));
        cfg.set("arch.backbone.Plain.widths", "4,8").unwrap();
        assert_eq!(cfg.protocol.pretrain.arch.backbone, sasa_core::nets::Backbone::Plain { widths: vec![4, 8] });
        cfg.set("arch.preset", "resnet18").unwrap();
        assert_eq!(cfg.protocol.pretrain.arch.feature_dim, 512);
        assert_eq!(cfg.protocol.pretrain.arch.image_size, (16, 16));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut cfg = Config::default();
        assert!(cfg.set("trainer.nope", "1").is_err());
        assert!(cfg.set("train.steps", "-3").is_err());
        assert!(cfg.set("train.live_only_adv", "maybe").is_err());
        assert!(cfg.set("train", "1").is_err());
        assert!(parse_kv("just words").is_err());
        assert_eq!(Config::default(), cfg, "failed sets leave the config untouched");
    }

    #[test]
    fn file_parsing_skips_comments() {
        let kv = parse_kv("# header\n\ntrainer.steps = 10  # inline\nrun.method=joint\n").unwrap();
        assert_eq!(kv, vec![("trainer.steps".into(), "10".into()), ("run.method".into(), "joint".into())]);
    }
}
