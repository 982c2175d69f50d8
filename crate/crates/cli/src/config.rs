//! Experiment configuration files: loading, bundled presets, `key=value`
//! overrides and notices for defaulted keys.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use pnsaf::harness::ExperimentSpec;
use toml::{Table, Value};

pub const BUNDLED: [(&str, &str); 5] = [
    ("subband_count", include_str!("../configs/subband_count.toml")),
    ("threshold_snr30", include_str!("../configs/threshold_snr30.toml")),
    ("threshold_snr20", include_str!("../configs/threshold_snr20.toml")),
    ("tracking_snr30", include_str!("../configs/tracking_snr30.toml")),
    ("tracking_snr20", include_str!("../configs/tracking_snr20.toml")),
];

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

pub fn bundled_names() -> String {
    BUNDLED.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ")
}

/// A parsed configuration tree plus the text it came from.
#[derive(Debug, Clone)]
pub struct ConfigDocument {
    pub source: String,
    text: String,
    table: Table,
    overridden: bool,
}

impl ConfigDocument {
    /// `arg` is a file path or, if no such file exists, a bundled preset name.
    pub fn load(arg: &str) -> Result<Self> {
        let path = Path::new(arg);
        let (source, text) = if path.exists() {
            let text =
                std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
            (path.display().to_string(), text)
        } else if let Some(text) = bundled(arg) {
            (format!("bundled config `{arg}`"), text.to_string())
        } else {
            bail!(
                "no config file `{arg}` and no bundled config of that name (bundled: {})",
                bundled_names()
            );
        };
        Self::parse(source, text)
    }

    pub fn parse(source: String, text: String) -> Result<Self> {
        let table: Table = text.parse().map_err(|e| anyhow!("{source}: {e}"))?;
        Ok(ConfigDocument {
            source,
            text,
            table,
            overridden: false,
        })
    }

    /// Applies `key=value`; dotted keys descend into tables, numeric segments
    /// index arrays (`algorithms.0.step_control.mu=0.5`). Values are read
    /// as TOML, falling back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| anyhow!("override `{assignment}` is not of the form key=value"))?;
        let key = key.trim();
        if key.is_empty() {
            bail!("override `{assignment}` has an empty key");
        }
        let value = parse_value(raw.trim());
        let segments: Vec<&str> = key.split('.').collect();
        set_path(&mut self.table, &segments, value, key)?;
        self.overridden = true;
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) -> Result<()> {
        let seed = i64::try_from(seed).context("seed must fit in a signed 64-bit TOML integer")?;
        self.table.insert("base_seed".into(), Value::Integer(seed));
        self.overridden = true;
        Ok(())
    }

    /// One message per key that will take its default value.
    pub fn notices(&self) -> Vec<String> {
        let mut out = Vec::new();
        let t = &self.table;
        let top: [(&str, &str); 5] = [
            ("prototype_length", "8 × num_subbands"),
            ("stopband_db", "60"),
            ("path_flip_sample", "none (no path change)"),
            ("base_seed", "0"),
            ("metrics", "stride 1, no ERLE, step sizes recorded"),
        ];
        for (key, default) in top {
            if !t.contains_key(key) {
                out.push(format!("`{key}` not set, using {default}"));
            }
        }
        if let Some(Value::Table(m)) = t.get("metrics") {
            for (key, default) in [
                ("nmsd_stride", "1"),
                ("erle_window", "none (ERLE off)"),
                ("record_steps", "true"),
            ] {
                if !m.contains_key(key) {
                    out.push(format!("`metrics.{key}` not set, using {default}"));
                }
            }
        }
        if let Some(Value::Table(input)) = t.get("input") {
            if input.get("kind").and_then(Value::as_str) == Some("ar1") {
                for (key, default) in [("pole", "0.95"), ("innovation_variance", "1")] {
                    if !input.contains_key(key) {
                        out.push(format!("`input.{key}` not set, using {default}"));
                    }
                }
            }
        }
        if let Some(Value::Table(path)) = t.get("path") {
            if path.get("kind").and_then(Value::as_str) == Some("sparse") && !path.contains_key("decay_rate") {
                out.push("`path.decay_rate` not set, using 4".into());
            }
        }
        if let Some(Value::Array(algs)) = t.get("algorithms") {
            for (i, alg) in algs.iter().enumerate() {
                let Some(a) = alg.as_table() else { continue };
                let name = a.get("name").and_then(Value::as_str).unwrap_or("?");
                if !a.contains_key("regularization") {
                    out.push(format!("algorithm {i} (`{name}`): regularization not set, using 0.001"));
                }
                match a.get("gain_rule").and_then(Value::as_table) {
                    None => out.push(format!(
                        "algorithm {i} (`{name}`): gain_rule not set, using IPNLMS alpha = 0, xi = 0.001"
                    )),
                    Some(g) if g.get("rule").and_then(Value::as_str) == Some("ipnlms") => {
                        for (key, default) in [("alpha", "0"), ("xi", "0.001")] {
                            if !g.contains_key(key) {
                                out.push(format!(
                                    "algorithm {i} (`{name}`): gain_rule.{key} not set, using {default}"
                                ));
                            }
                        }
                    }
                    Some(_) => {}
                }
                if let Some(s) = a.get("step_control").and_then(Value::as_table) {
                    let defaults: &[(&str, &str)] = match s.get("rule").and_then(Value::as_str) {
                        Some("shrinkage_vss") => &[("lambda", "3.5"), ("kappa", "1")],
                        Some("set_membership") => &[("gamma", "9")],
                        _ => &[],
                    };
                    for (key, default) in defaults {
                        if !s.contains_key(*key) {
                            out.push(format!(
                                "algorithm {i} (`{name}`): step_control.{key} not set, using {default}"
                            ));
                        }
                    }
                }
            }
        }
        out
    }

    /// Deserializes into an [`ExperimentSpec`]. Without overrides the original
    /// text is parsed directly so errors carry line and column numbers.
    pub fn to_spec(&self) -> Result<ExperimentSpec> {
        let spec: ExperimentSpec = if self.overridden {
            Value::Table(self.table.clone())
                .try_into()
                .map_err(|e| anyhow!("{} (after overrides): {e}", self.source))?
        } else {
            toml::from_str(&self.text).map_err(|e| anyhow!("{}: {e}", self.source))?
        };
        spec.validate()
            .with_context(|| format!("{}: invalid experiment", self.source))?;
        Ok(spec)
    }
}

fn set_path(table: &mut Table, segments: &[&str], value: Value, key: &str) -> Result<()> {
    let (head, rest) = segments.split_first().expect("non-empty key");
    if head.is_empty() {
        bail!("override `{key}` has an empty segment");
    }
    if rest.is_empty() {
        table.insert(head.to_string(), value);
        return Ok(());
    }
    match table
        .entry(head.to_string())
        .or_insert_with(|| Value::Table(Table::new()))
    {
        Value::Table(t) => set_path(t, rest, value, key),
        Value::Array(items) => {
            let idx: usize = rest[0]
                .parse()
                .map_err(|_| anyhow!("override `{key}`: `{head}` is an array, expected an index after it"))?;
            let len = items.len();
            let item = items
                .get_mut(idx)
                .ok_or_else(|| anyhow!("override `{key}`: index {idx} out of range (length {len})"))?;
            match (item, &rest[1..]) {
                (slot, []) => {
                    *slot = value;
                    Ok(())
                }
                (Value::Table(t), tail) => set_path(t, tail, value, key),
                _ => bail!("override `{key}`: element {idx} of `{head}` is not a table"),
            }
        }
        _ => bail!("override `{key}`: `{head}` is not a table"),
    }
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_configs_parse_and_validate() {
        for (name, _) in BUNDLED {
            let doc = ConfigDocument::load(name).unwrap();
            let spec = doc.to_spec().unwrap_or_else(|e| panic!("{name}: {e:#}"));
            assert!(spec.ensemble_size == 25, "{name}");
        }
    }

    #[test]
    fn scalar_override() {
        let mut doc = ConfigDocument::load("tracking_snr30").unwrap();
        doc.apply_override("ensemble_size=2").unwrap();
        doc.apply_override("input.pole=0.9").unwrap();
        let spec = doc.to_spec().unwrap();
        assert_eq!(spec.ensemble_size, 2);
        assert!(matches!(spec.input, pnsaf::harness::InputSpec::Ar1 { pole, .. } if pole == 0.9));
    }

    #[test]
    fn indexed_override() {
        let mut doc = ConfigDocument::load("tracking_snr30").unwrap();
        doc.apply_override("algorithms.0.step_control.mu=0.25").unwrap();
        let spec = doc.to_spec().unwrap();
        assert!(matches!(
            spec.algorithms[0].step_control,
            pnsaf::harness::StepControlSpec::Fixed { mu } if mu == 0.25
        ));
        assert!(doc.apply_override("algorithms.9.step_control.mu=1").is_err());
        assert!(doc.apply_override("nonsense").is_err());
    }

    #[test]
    fn unknown_keys_rejected_with_line() {
        let text = "filter_length = 8\nnum_subbands = 2\nbogus = 1\n".to_string();
        let doc = ConfigDocument::parse("t.toml".into(), text).unwrap();
        let err = format!("{:#}", doc.to_spec().unwrap_err());
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn notices_for_defaults() {
        let text = r#"
filter_length = 64
num_subbands = 2
snr_db = 30.0
run_length = 1000
ensemble_size = 1
[input]
kind = "ar1"
[path]
kind = "sparse"
active_taps = 4
[[algorithms]]
name = "a"
step_control = { rule = "shrinkage_vss" }
"#;
        let doc = ConfigDocument::parse("t".into(), text.into()).unwrap();
        let notices = doc.notices().join("\n");
        for needle in [
            "stopband_db",
            "input.pole",
            "decay_rate",
            "regularization",
            "gain_rule",
            "lambda",
            "kappa",
        ] {
            assert!(notices.contains(needle), "missing {needle} in\n{notices}");
        }
        doc.to_spec().unwrap();
    }
}
