//! `key=value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Experiment files
//! group keys by prefix: `landmark.iterations=600`, `seg_net.head_width=96`.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{invalid_config, Result};
use crate::training::TrainConfig;

pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| invalid_config(format!("line {}: expected key=value, got {line:?}", lineno + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(invalid_config(format!("line {}: empty key", lineno + 1)));
        }
        if map.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(invalid_config(format!("line {}: duplicate key {k:?}", lineno + 1)));
        }
    }
    Ok(map)
}

/// Parses `prefix + key` into `slot` when present.
pub(crate) fn read_into<V: FromStr>(
    map: &BTreeMap<String, String>,
    prefix: &str,
    key: &str,
    slot: &mut V,
) -> Result<()> {
    let full = format!("{prefix}{key}");
    if let Some(v) = map.get(&full) {
        *slot = v
            .parse()
            .map_err(|_| invalid_config(format!("{full}: cannot parse {v:?}")))?;
    }
    Ok(())
}

/// Overrides fields of `base` from keys under `prefix`.
pub fn train_config_from_map(map: &BTreeMap<String, String>, prefix: &str, base: &TrainConfig) -> Result<TrainConfig> {
    let mut c = base.clone();
    read_into(map, prefix, "iterations", &mut c.iterations)?;
    read_into(map, prefix, "learning_rate", &mut c.learning_rate)?;
    read_into(map, prefix, "momentum", &mut c.momentum)?;
    read_into(map, prefix, "batch_size", &mut c.batch_size)?;
    read_into(map, prefix, "loss_scale", &mut c.loss_scale)?;
    read_into(map, prefix, "sigma", &mut c.sigma)?;
    read_into(map, prefix, "occlusion_prob", &mut c.occlusion_prob)?;
    read_into(map, prefix, "translate", &mut c.translate)?;
    read_into(map, prefix, "warmup_iterations", &mut c.warmup_iterations)?;
    read_into(map, prefix, "checkpoint_every", &mut c.checkpoint_every)?;
    read_into(map, prefix, "seed", &mut c.seed)?;
    c.validate()?;
    Ok(c)
}

pub fn train_config_to_text(c: &TrainConfig, prefix: &str) -> String {
    format!(
        "{p}iterations={}\n{p}learning_rate={}\n{p}momentum={}\n{p}batch_size={}\n{p}loss_scale={}\n{p}sigma={}\n{p}occlusion_prob={}\n{p}translate={}\n{p}warmup_iterations={}\n{p}checkpoint_every={}\n{p}seed={}\n",
        c.iterations,
        c.learning_rate,
        c.momentum,
        c.batch_size,
        c.loss_scale,
        c.sigma,
        c.occlusion_prob,
        c.translate,
        c.warmup_iterations,
        c.checkpoint_every,
        c.seed,
        p = prefix
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_blanks_skipped() {
        let m = parse_key_values("# note\n\n a = 1 \nb=x=y\n").unwrap();
        assert_eq!(m["a"], "1");
        assert_eq!(m["b"], "x=y");
        assert_eq!(m.len(), 2);
    }

    #[test]
    fn malformed_lines_rejected() {
        assert!(parse_key_values("novalue\n").is_err());
        assert!(parse_key_values("=3\n").is_err());
        assert!(parse_key_values("a=1\na=2\n").is_err());
    }

    #[test]
    fn train_config_round_trip() {
        let c = TrainConfig {
            iterations: 77,
            learning_rate: 0.0125,
            warmup_iterations: 7,
            ..TrainConfig::default()
        };
        let text = train_config_to_text(&c, "x.");
        let back = train_config_from_map(&parse_key_values(&text).unwrap(), "x.", &TrainConfig::default()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn bad_value_names_key() {
        let m = parse_key_values("seg.iterations=lots").unwrap();
        let err = train_config_from_map(&m, "seg.", &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("seg.iterations"));
    }
}
