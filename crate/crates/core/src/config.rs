//! Pipeline configuration as a sectioned TOML document.
//!
//! Every section maps onto a module's config type and rejects unknown keys.
//! Seeds are stored as TOML integers and therefore must fit in an `i64`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregator::{AggTrainConfig, AggregatorDims};
use crate::covis::OverlapConfig;
use crate::localize::{PqParams, RansacConfig};
use crate::scr::ScrTrainConfig;
use crate::synthgen::SceneConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid value for {key}: {message}")]
    Invalid { key: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    /// Output dimension of the local-descriptor PCA.
    pub local_dim: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { local_dim: 128 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    /// Hypotheses per query, including the query's own descriptor.
    pub k: usize,
    pub use_pq: bool,
    pub pq: PqParams,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: 10,
            use_pq: true,
            pq: PqParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// `[translation, rotation_deg]` pairs, tightest first.
    pub thresholds: Vec<[f64; 2]>,
    pub curve_k_max: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![[0.05, 0.5], [0.1, 1.0], [0.25, 2.0]],
            curve_k_max: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub scene: SceneConfig,
    pub covis: OverlapConfig,
    pub aggregator: AggTrainConfig,
    pub features: FeatureConfig,
    pub scr: ScrTrainConfig,
    pub retrieval: RetrievalConfig,
    pub ransac: RansacConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::desk_benchmark()
    }
}

impl PipelineConfig {
    /// Standard synthetic benchmark at a size that trains in minutes on one
    /// CPU core.
    pub fn desk_benchmark() -> Self {
        Self {
            scene: SceneConfig::standard(),
            covis: OverlapConfig::default(),
            aggregator: AggTrainConfig {
                iterations: 2000,
                learning_rate: 1e-3,
                weight_decay: 0.1,
                descriptor_dim: 32,
                dims: AggregatorDims::default(),
                ..AggTrainConfig::default()
            },
            features: FeatureConfig::default(),
            scr: ScrTrainConfig {
                buffer_capacity: 100_000,
                batch_size: 1024,
                iterations: 5000,
                width: 128,
                hidden_blocks: 2,
                learning_rate: 3e-3,
                graph_augmentation: 0.0,
                local_noise: 0.008,
                ..ScrTrainConfig::default()
            },
            retrieval: RetrievalConfig::default(),
            ransac: RansacConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    /// Sets every stage seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.scene.seed = seed;
        self.aggregator.seed = seed;
        self.scr.seed = seed;
        self.retrieval.pq.seed = seed;
        self.ransac.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &str, message: String| ConfigError::Invalid {
            key: key.into(),
            message,
        };
        self.scene.validate().map_err(|e| invalid("scene", e.to_string()))?;
        self.covis.validate().map_err(|e| invalid("covis", e.to_string()))?;
        self.aggregator
            .validate()
            .map_err(|e| invalid("aggregator", e.to_string()))?;
        self.scr.validate().map_err(|e| invalid("scr", e.to_string()))?;
        self.ransac.validate().map_err(|e| invalid("ransac", e.to_string()))?;
        if self.aggregator.dims.d_feat != self.scene.feat_dim {
            return Err(invalid(
                "aggregator.dims.d_feat",
                format!("must equal scene.feat_dim = {}", self.scene.feat_dim),
            ));
        }
        if self.features.local_dim == 0 || self.features.local_dim > self.scene.local_dim {
            return Err(invalid(
                "features.local_dim",
                format!("must lie in [1, {}]", self.scene.local_dim),
            ));
        }
        if self.retrieval.k == 0 {
            return Err(invalid("retrieval.k", "must be >= 1".into()));
        }
        if self.retrieval.use_pq
            && !self
                .aggregator
                .descriptor_dim
                .is_multiple_of(self.retrieval.pq.m.max(1))
        {
            return Err(invalid(
                "retrieval.pq.m",
                format!(
                    "must divide aggregator.descriptor_dim = {}",
                    self.aggregator.descriptor_dim
                ),
            ));
        }
        for [t, r] in &self.eval.thresholds {
            if !(*t >= 0.0 && *r >= 0.0) {
                return Err(invalid("eval.thresholds", "entries must be non-negative".into()));
            }
        }
        let seeds = [
            ("scene.seed", self.scene.seed),
            ("aggregator.seed", self.aggregator.seed),
            ("scr.seed", self.scr.seed),
            ("retrieval.pq.seed", self.retrieval.pq.seed),
            ("ransac.seed", self.ransac.seed),
        ];
        for (key, s) in seeds {
            if s > i64::MAX as u64 {
                return Err(invalid(key, "seeds must fit in a signed 64-bit integer".into()));
            }
        }
        Ok(())
    }

    /// Parses a document layered over [`PipelineConfig::desk_benchmark`]:
    /// keys the document omits keep their benchmark values, including keys
    /// inside a section that is only partly given.
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let parse_err = |message: String| ConfigError::Parse {
            path: origin.into(),
            message,
        };
        let doc: toml::Table = text.parse().map_err(|e: toml::de::Error| parse_err(e.to_string()))?;
        let mut base = toml::Table::try_from(Self::desk_benchmark()).expect("config types serialize to TOML");
        merge_tables(&mut base, doc);
        let cfg: Self = base.try_into().map_err(|e: toml::de::Error| parse_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config types serialize to TOML")
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text, &path.display().to_string())
    }
}

// Overlays `top` onto `base`, recursing into tables. Keys absent from `base`
// are inserted so that unknown-key checks still see them.
fn merge_tables(base: &mut toml::Table, top: toml::Table) {
    for (key, value) in top {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge_tables(b, t),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string();
        let back = PipelineConfig::from_toml_str(&text, "mem").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml_string(), text);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = PipelineConfig::from_toml_str("[scr]\niterations = 7\n\n[ransac]\ninlier_threshold = 4.0\n", "mem")
            .unwrap();
        assert_eq!(cfg.scr.iterations, 7);
        assert_eq!(cfg.ransac.inlier_threshold, 4.0);
        assert_eq!(cfg.scene, SceneConfig::standard());
        let bench = PipelineConfig::desk_benchmark();
        assert_eq!(cfg.scr.width, bench.scr.width);
        assert_eq!(cfg.scr.batch_size, bench.scr.batch_size);
        assert_eq!(cfg.ransac.max_iterations, bench.ransac.max_iterations);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        let e = PipelineConfig::from_toml_str("[scr]\nitertions = 7\n", "bench.cfg").unwrap_err();
        assert!(e.to_string().contains("itertions"), "{e}");
        assert!(e.to_string().starts_with("bench.cfg"));
        assert!(PipelineConfig::from_toml_str("[nonsense]\n", "x").is_err());
        let e = PipelineConfig::from_toml_str("[retrieval]\nk = 0\n", "x").unwrap_err();
        assert!(e.to_string().contains("retrieval.k"));
    }

    #[test]
    fn seed_override_and_range() {
        let cfg = PipelineConfig::default().with_seed(42);
        assert_eq!((cfg.scene.seed, cfg.scr.seed, cfg.ransac.seed), (42, 42, 42));
        assert!(PipelineConfig::default().with_seed(u64::MAX).validate().is_err());
    }
}
