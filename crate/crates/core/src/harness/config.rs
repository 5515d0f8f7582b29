//! Flat `section.key=value` configuration files with command-line
//! overrides.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::HarnessError;

/// Every key any command understands.
pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "scene.n_objects",
    "scene.frames",
    "scene.frame_w",
    "scene.frame_h",
    "scene.size",
    "scene.aspect",
    "scene.velocity_x",
    "scene.velocity_y",
    "scene.relative_speed",
    "scene.jitter_sigma",
    "scene.jump_prob",
    "scene.jump_magnitude",
    "scene.layout",
    "scene.occlusions_per_object",
    "scene.occlusion_len",
    "scene.entry_exit_prob",
    "scene.shot_changes",
    "scene.embedding_dim",
    "scene.embedding_noise",
    "scene.min_identity_distance",
    "output.dir",
    "output.rasters",
    "output.embeddings",
    "output.results",
    "output.record",
    "output.report",
    "input.scene",
    "input.replay",
    "grid.strides",
    "grid.scale_multipliers",
    "grid.aspect_ratios",
    "detector.backend",
    "detector.response_iou_floor",
    "detector.regression_noise_sigma",
    "detector.confidence_model",
    "detector.confidence_gain",
    "detector.confidence_constant",
    "detector.confidence_noise_sigma",
    "detector.dropout_prob",
    "detector.nms_threshold",
    "generator.sigma_det",
    "generator.sigma_active",
    "generator.nms_redetect",
    "generator.merge_iou",
    "generator.k",
    "generator.strategy",
    "motion.mode",
    "motion.block_size",
    "motion.search_radius",
    "motion.grid_step",
    "linker.enabled",
    "linker.distance_threshold",
    "linker.embedding_cadence",
    "bench.objects",
    "bench.frames",
    "bench.warmup",
];

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    value: String,
    /// `None` for command-line overrides.
    line: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigMap {
    path: Option<PathBuf>,
    entries: BTreeMap<String, Entry>,
}

impl ConfigMap {
    pub fn parse(text: &str, path: Option<&Path>) -> Result<Self, HarnessError> {
        let mut map = Self {
            path: path.map(Path::to_path_buf),
            entries: BTreeMap::new(),
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| HarnessError::Config {
                origin: map.source_name(),
                line: Some(i + 1),
                msg,
            };
            let Some((k, v)) = line.split_once('=') else {
                return Err(err(format!("expected key=value, got `{line}`")));
            };
            let (k, v) = (k.trim(), v.trim());
            if !KNOWN_KEYS.contains(&k) {
                return Err(err(format!("unknown key `{k}`")));
            }
            if map.entries.contains_key(k) {
                return Err(err(format!("duplicate key `{k}`")));
            }
            map.entries.insert(
                k.to_string(),
                Entry {
                    value: v.to_string(),
                    line: Some(i + 1),
                },
            );
        }
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse(&text, Some(path))
    }

    fn source_name(&self) -> String {
        self.path
            .as_ref()
            .map_or_else(|| "<defaults>".to_string(), |p| p.display().to_string())
    }

    /// Applies a `key=value` override; malformed or unknown keys are usage
    /// errors.
    pub fn set_override(&mut self, kv: &str) -> Result<(), HarnessError> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| HarnessError::Usage(format!("override `{kv}` is not key=value")))?;
        let k = k.trim();
        if !KNOWN_KEYS.contains(&k) {
            return Err(HarnessError::Usage(format!("unknown key `{k}`")));
        }
        self.entries.insert(
            k.to_string(),
            Entry {
                value: v.trim().to_string(),
                line: None,
            },
        );
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        debug_assert!(KNOWN_KEYS.contains(&key), "{key}");
        self.entries.insert(
            key.to_string(),
            Entry {
                value: value.to_string(),
                line: None,
            },
        );
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    fn invalid(&self, key: &str, msg: String) -> HarnessError {
        let e = self.entries.get(key);
        HarnessError::Config {
            origin: match e {
                Some(Entry { line: None, .. }) => "override".to_string(),
                _ => self.source_name(),
            },
            line: e.and_then(|e| e.line),
            msg: format!("`{key}`: {msg}"),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, HarnessError> {
        debug_assert!(KNOWN_KEYS.contains(&key), "{key}");
        match self.entries.get(key) {
            None => Ok(None),
            Some(e) => e
                .value
                .parse()
                .map(Some)
                .map_err(|_| self.invalid(key, format!("cannot parse `{}`", e.value))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, HarnessError> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Comma-separated list; an empty value is an empty list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, HarnessError> {
        let Some(e) = self.entries.get(key) else { return Ok(None) };
        if e.value.is_empty() {
            return Ok(Some(Vec::new()));
        }
        e.value
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| self.invalid(key, format!("cannot parse list item `{}`", s.trim())))
            })
            .collect::<Result<Vec<T>, _>>()
            .map(Some)
    }

    /// `lo,hi`, or a single value meaning `lo = hi`.
    pub fn get_range(&self, key: &str) -> Result<Option<(f64, f64)>, HarnessError> {
        match self.get_list::<f64>(key)?.as_deref() {
            None => Ok(None),
            Some([v]) => Ok(Some((*v, *v))),
            Some([a, b]) => Ok(Some((*a, *b))),
            Some(_) => Err(self.invalid(key, "expected one value or lo,hi".into())),
        }
    }

    /// Error attributed to `key` for semantically invalid values.
    pub fn reject(&self, key: &str, msg: impl Into<String>) -> HarnessError {
        self.invalid(key, msg.into())
    }
}
