//! TOML run configuration. Every section has embedded defaults, so an empty
//! file is a valid (synthetic-data) run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::barycenter::AggregationConfig;
use crate::data::{load_idx, partition_label_skew, synth_blobs, ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::federation::{
    partition_rng, AggregationMode, ClientWeighting, EvalMode, FederationConfig, PriorMode,
};
use crate::kde::DEFAULT_KDE_BANDWIDTH;
use crate::model::MlpShape;
use crate::numerics::SeededRng;
use crate::svgd::SvgdConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationSection {
    pub num_clients: usize,
    pub sample_size: usize,
    pub rounds: usize,
    pub particles: usize,
    pub kde_bandwidth: f64,
    pub init_scale: f64,
    pub seed: u64,
    pub mode: AggregationMode,
    pub prior: PriorMode,
    pub eval: EvalMode,
    pub weighting: ClientWeighting,
}

impl Default for FederationSection {
    fn default() -> Self {
        let d = FederationConfig::default();
        Self {
            num_clients: d.num_clients,
            sample_size: d.sample_size,
            rounds: d.rounds,
            particles: d.particles,
            kde_bandwidth: DEFAULT_KDE_BANDWIDTH,
            init_scale: d.init_scale,
            seed: d.seed,
            mode: d.mode,
            prior: d.prior,
            eval: d.eval,
            weighting: d.weighting,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    #[default]
    Blobs,
    Idx,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// IDX image and label files; relative paths resolve against the config file.
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Use only the first `limit` IDX samples.
    pub limit: Option<usize>,
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub spread: f64,
    pub labels_per_client: usize,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Blobs,
            images: None,
            labels: None,
            limit: None,
            classes: 10,
            per_class: 100,
            dim: 20,
            spread: 0.15,
            labels_per_client: 5,
            test_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden_dim: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// One full run per seed per grid cell.
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { seeds: vec![0] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub federation: FederationSection,
    pub svgd: SvgdConfig,
    pub aggregation: AggregationConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, parses and validates `path`; relative data paths are resolved
    /// to absolute paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
        let parent = path.parent().unwrap_or(Path::new("."));
        // absolute, so a config snapshot written elsewhere still points at the data
        let base = std::path::absolute(parent).map_err(|e| Error::io(parent, e))?;
        for p in [&mut cfg.data.images, &mut cfg.data.labels].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.federation_config().validate()?;
        let d = &self.data;
        if d.labels_per_client == 0 {
            return Err(Error::config("data.labels_per_client", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&d.test_fraction) || d.test_fraction == 0.0 {
            return Err(Error::config("data.test_fraction", "must be in (0, 1)"));
        }
        match d.source {
            DataSource::Idx => {
                if d.images.is_none() {
                    return Err(Error::config("data.images", "required when source = \"idx\""));
                }
                if d.labels.is_none() {
                    return Err(Error::config("data.labels", "required when source = \"idx\""));
                }
            }
            DataSource::Blobs => {
                if d.classes < 2 || d.per_class == 0 || d.dim == 0 {
                    return Err(Error::config("data", "blobs need classes >= 2, per_class >= 1, dim >= 1"));
                }
                if !(d.spread >= 0.0 && d.spread.is_finite()) {
                    return Err(Error::config("data.spread", "must be >= 0"));
                }
            }
        }
        if self.model.hidden_dim == 0 {
            return Err(Error::config("model.hidden_dim", "must be >= 1"));
        }
        if self.ablation.seeds.is_empty() {
            return Err(Error::config("ablation.seeds", "at least one seed"));
        }
        Ok(())
    }

    pub fn federation_config(&self) -> FederationConfig {
        let f = &self.federation;
        FederationConfig {
            num_clients: f.num_clients,
            sample_size: f.sample_size,
            rounds: f.rounds,
            particles: f.particles,
            kde_bandwidth: f.kde_bandwidth,
            init_scale: f.init_scale,
            seed: f.seed,
            mode: f.mode,
            prior: f.prior,
            eval: f.eval,
            weighting: f.weighting,
            svgd: self.svgd.clone(),
            aggregation: self.aggregation.clone(),
        }
    }

    /// Full dataset before partitioning. Synthetic blobs depend on the seed.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let d = &self.data;
        match d.source {
            DataSource::Idx => {
                let images = d.images.as_deref().ok_or_else(|| Error::config("data.images", "missing"))?;
                let labels = d.labels.as_deref().ok_or_else(|| Error::config("data.labels", "missing"))?;
                let full = load_idx(images, labels)?;
                Ok(match d.limit {
                    Some(n) => full.truncated(n),
                    None => full,
                })
            }
            DataSource::Blobs => {
                let mut rng = SeededRng::new(self.federation.seed).derive(0xB10B);
                synth_blobs(d.classes, d.per_class, d.dim, d.spread, &mut rng)
            }
        }
    }

    pub fn shape_for(&self, data: &Dataset) -> Result<MlpShape> {
        MlpShape::new(data.dim(), self.model.hidden_dim, data.classes())
    }

    pub fn partition(&self, data: &Dataset) -> Result<Vec<ClientShard>> {
        partition_label_skew(
            data,
            self.federation.num_clients,
            self.data.labels_per_client,
            self.data.test_fraction,
            &mut partition_rng(self.federation.seed),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let f = cfg.federation_config();
        assert_eq!((f.num_clients, f.sample_size, f.rounds, f.particles), (10, 2, 50, 10));
        assert_eq!(f.kde_bandwidth, 0.55);
        assert_eq!(f.svgd.step_eta, 0.01);
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.federation.mode = AggregationMode::ParamAvg;
        cfg.svgd.kernel = crate::svgd::SvgdKernel::POLYNOMIAL_DEFAULT;
        cfg.svgd.minibatch = Some(32);
        cfg.aggregation.client_weights = Some(vec![0.1; 10]);
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn errors_name_the_field() {
        let err = RunConfig::from_toml_str("[federation]\nnum_clients = 3\nsample_size = 4\n").unwrap_err();
        assert!(err.to_string().contains("federation.sample_size"), "{err}");
        let err = RunConfig::from_toml_str("[svgd]\nstep_etaa = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("step_etaa"), "{err}");
        let err = RunConfig::from_toml_str("[data]\nsource = \"idx\"\n").unwrap_err();
        assert!(err.to_string().contains("data.images"), "{err}");
    }

    #[test]
    fn relative_data_paths_become_absolute() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[data]\nsource = \"idx\"\nimages = \"d/img\"\nlabels = \"/abs/lbl\"\n").unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        let images = cfg.data.images.unwrap();
        assert!(images.is_absolute());
        assert!(images.ends_with("d/img"));
        assert_eq!(cfg.data.labels.unwrap(), PathBuf::from("/abs/lbl"));
    }

    #[test]
    fn kernel_table_parses() {
        let cfg = RunConfig::from_toml_str("[svgd.kernel]\nkind = \"sigmoid\"\nscale = 1.0\nbias = 0.0\n").unwrap();
        assert_eq!(cfg.svgd.kernel, crate::svgd::SvgdKernel::SIGMOID_DEFAULT);
    }
}
