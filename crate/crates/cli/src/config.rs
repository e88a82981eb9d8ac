use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use spoofscope::datagen::CorpusConfig;
use spoofscope::metrics::TdcfCosts;
use spoofscope::model::ModelConfig;
use spoofscope::train::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub train_manifest: Option<PathBuf>,
    pub dev_manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
}

/// Everything one run needs, loaded from a TOML file and then patched by
/// command-line flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, replaces the corpus and training seeds.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub costs: TdcfCosts,
    pub corpus: CorpusConfig,
    pub data: DataPaths,
}

impl RunConfig {
    /// Desk-scale model and training presets with every other section at
    /// its default.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            ..Default::default()
        }
    }

    /// Reads `path` on top of `base`: keys present in the file replace the
    /// base values, table by table. Relative paths are taken relative to
    /// the file.
    pub fn load(path: &Path, base: &RunConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let file: toml::Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let mut merged = toml::Table::try_from(base)?;
        merge(&mut merged, file);
        let mut cfg: RunConfig = merged
            .try_into()
            .with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.data.train_manifest,
            &mut cfg.data.dev_manifest,
            &mut cfg.data.eval_manifest,
            &mut cfg.out,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>, desk: bool) -> Result<Self> {
        let base = if desk { Self::desk() } else { Self::default() };
        match path {
            Some(p) => Self::load(p, &base),
            None => Ok(base),
        }
    }

    /// Pushes the run-level seed into the components and checks every
    /// invariant, including that referenced manifests exist.
    pub fn finalize(mut self) -> Result<Self> {
        if let Some(seed) = self.seed {
            self.train.seed = seed;
            self.corpus.seed = seed;
        }
        self.model.validate()?;
        self.train.validate()?;
        self.costs.validate()?;
        self.corpus.validate()?;
        for p in [&self.data.train_manifest, &self.data.dev_manifest, &self.data.eval_manifest]
            .into_iter()
            .flatten()
        {
            if !p.is_file() {
                bail!("manifest {} does not exist", p.display());
            }
        }
        Ok(self)
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .context("no output directory: pass --out or set `out` in the config")
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

fn merge(dst: &mut toml::Table, src: toml::Table) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (Some(toml::Value::Table(d)), toml::Value::Table(s)) => merge(d, s),
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
}
