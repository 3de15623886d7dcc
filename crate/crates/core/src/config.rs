//! Experiment configuration: one JSON file covering corpus, backbone, and
//! training, with `key.path=value` overrides applied on top. Unknown keys
//! are rejected.

use crate::backbone::BackboneConfig;
use crate::corpus::SyntheticCorpusSpec;
use crate::error::{Error, Result};
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: SyntheticCorpusSpec,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub ci_eps: f32,
    /// held-out corpus size (per class), drawn from a shifted seed stream
    pub heldout_per_class: usize,
    pub threshold: f64,
}

impl RunConfig {
    pub fn defaults() -> Self {
        RunConfig {
            corpus: SyntheticCorpusSpec::default(),
            backbone: BackboneConfig::default(),
            train: TrainConfig::default(),
            ci_eps: crate::cues::DEFAULT_CI_EPS,
            heldout_per_class: 250,
            threshold: 0.5,
        }
    }

    /// Held-out corpus spec: same family, disjoint seed stream.
    pub fn heldout_spec(&self) -> SyntheticCorpusSpec {
        SyntheticCorpusSpec {
            n_per_class: self.heldout_per_class,
            seed: self.corpus.seed ^ 0x48_45_4c_44_4f_55_54, // held-out stream tag
            ..self.corpus.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.corpus.img_size != self.backbone.img_size {
            return Err(Error::Config(format!(
                "corpus img_size {} != backbone img_size {}",
                self.corpus.img_size, self.backbone.img_size
            )));
        }
        if self.corpus.smooth_kernel % 2 == 0 {
            return Err(Error::Config("smooth_kernel must be odd".into()));
        }
        if self.ci_eps <= 0.0 {
            return Err(Error::Config("ci_eps must be positive".into()));
        }
        Ok(())
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::defaults()
    }
}

/// Load a config file (or defaults when `path` is `None`) and apply
/// `key.path=value` overrides. Overrides are parsed as JSON scalars first,
/// falling back to strings.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str::<serde_json::Value>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => serde_json::to_value(RunConfig::defaults())?,
    };
    for ov in overrides {
        apply_override(&mut value, ov)?;
    }
    // fill omitted sections with defaults, then reject unknown keys
    let merged = merge_defaults(serde_json::to_value(RunConfig::defaults())?, value);
    let cfg: RunConfig =
        serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn merge_defaults(defaults: serde_json::Value, given: serde_json::Value) -> serde_json::Value {
    match (defaults, given) {
        (serde_json::Value::Object(mut d), serde_json::Value::Object(g)) => {
            for (k, v) in g {
                let merged = match d.remove(&k) {
                    Some(dv) => merge_defaults(dv, v),
                    None => v, // unknown key survives so deserialization rejects it
                };
                d.insert(k, merged);
            }
            serde_json::Value::Object(d)
        }
        (_, given) => given,
    }
}

pub fn apply_override(value: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cur = value;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override path {path:?} hits a non-object")))?;
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), parsed);
            return Ok(());
        }
        cur = obj
            .entry((*part).to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("non-empty path")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip() {
        let cfg = load_config(None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::defaults());
        assert_eq!(cfg.train.lr, 1e-4);
        assert_eq!(cfg.train.batch, 16);
        assert_eq!(cfg.backbone.d, 32);
    }

    #[test]
    fn overrides_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"train": {"lr": 0.01, "steps": 7}}"#).unwrap();
        let cfg = load_config(
            Some(&p),
            &["train.lr=0.5".into(), "backbone.seed=9".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.lr, 0.5);
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.backbone.seed, 9);
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"train": {"learning_rate": 0.01}}"#).unwrap();
        assert!(load_config(Some(&p), &[]).is_err());
        assert!(load_config(None, &["nonsense.key=1".into()]).is_err());
    }

    #[test]
    fn mismatched_sizes_rejected() {
        let cfg = load_config(None, &["corpus.img_size=64".into()]);
        assert!(cfg.is_err());
    }

    #[test]
    fn heldout_stream_differs() {
        let cfg = RunConfig::defaults();
        let h = cfg.heldout_spec();
        assert_ne!(h.seed, cfg.corpus.seed);
        assert_eq!(h.n_per_class, cfg.heldout_per_class);
        assert_eq!(h.img_size, cfg.corpus.img_size);
    }
}
