//! On-disk layout of a pipeline run directory and loading of the frozen
//! model bundle served to teleoperation sessions.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::FailureClassifier;
use crate::dubins::{DubinsParams, RenderSpec, Renderer};
use crate::error::{Error, Result};
use crate::grid::load_grid;
use crate::nn::load_checkpoint;
use crate::reach::{RiskCritic, SafetyCritic};
use crate::session::ModelBundle;
use crate::world_model::WorldModel;

/// Component name of safety critics inside their checkpoints.
pub const CRITIC_COMPONENT: &str = "critic";

/// Which dataset a latent stack was trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// All three actions.
    Full,
    /// The ablation's restricted action subset.
    Restricted,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Restricted => "restricted",
        }
    }
}

/// Environment description shared by every artifact of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub params: DubinsParams,
    pub render: RenderSpec,
    pub margin_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("bundle.json")
    }

    pub fn dataset(&self, v: Variant) -> PathBuf {
        self.root.join("data").join(format!("{}.lsfd", v.as_str()))
    }

    pub fn grid(&self) -> PathBuf {
        self.root.join("grid").join("gt.lsfv")
    }

    pub fn world_model(&self, v: Variant) -> PathBuf {
        self.models().join(format!("wm_{}.lsfc", v.as_str()))
    }

    pub fn classifier(&self, v: Variant) -> PathBuf {
        self.models().join(format!("classifier_{}.lsfc", v.as_str()))
    }

    pub fn latent_critic(&self, v: Variant) -> PathBuf {
        self.models().join(format!("critic_latent_{}.lsfc", v.as_str()))
    }

    pub fn priv_critic(&self) -> PathBuf {
        self.models().join("critic_priv.lsfc")
    }

    pub fn risk_critic(&self) -> PathBuf {
        self.models().join("critic_risk.lsfc")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    fn models(&self) -> PathBuf {
        self.root.join("models")
    }
}

/// Sidecar provenance file next to an artifact.
pub fn stamp_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".stamp.json");
    artifact.with_file_name(name)
}

pub fn save_manifest(m: &BundleManifest, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(m).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<BundleManifest> {
    let text = fs::read_to_string(path).map_err(|_| Error::MissingArtifact {
        stage: "gen-data",
        path: path.display().to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn optional<T>(path: &Path, load: impl FnOnce(&Path) -> Result<T>) -> Result<Option<T>> {
    if path.exists() {
        load(path).map(Some)
    } else {
        Ok(None)
    }
}

/// Loads every full-variant model present in a run directory. Only the
/// manifest is mandatory; sessions then refuse modes whose models are absent.
pub fn load_bundle(layout: &RunLayout) -> Result<ModelBundle> {
    let m = load_manifest(&layout.manifest())?;
    let ck = |p: &Path| load_checkpoint(p);
    Ok(ModelBundle {
        params: m.params,
        renderer: Renderer::new(m.render, m.params)?,
        margin_scale: m.margin_scale,
        gt: optional(&layout.grid(), load_grid)?,
        wm: optional(&layout.world_model(Variant::Full), |p| WorldModel::from_checkpoint(&ck(p)?))?,
        classifier: optional(&layout.classifier(Variant::Full), |p| FailureClassifier::from_checkpoint(&ck(p)?))?,
        latent: optional(&layout.latent_critic(Variant::Full), |p| {
            SafetyCritic::from_checkpoint(&ck(p)?, CRITIC_COMPONENT)
        })?,
        privileged: optional(&layout.priv_critic(), |p| SafetyCritic::from_checkpoint(&ck(p)?, CRITIC_COMPONENT))?,
        risk: optional(&layout.risk_critic(), |p| RiskCritic::from_checkpoint(&ck(p)?))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::FilterMode;

    #[test]
    fn layout_paths_are_distinct() {
        let l = RunLayout::new("/run");
        let paths = [
            l.manifest(),
            l.dataset(Variant::Full),
            l.dataset(Variant::Restricted),
            l.grid(),
            l.world_model(Variant::Full),
            l.world_model(Variant::Restricted),
            l.classifier(Variant::Full),
            l.classifier(Variant::Restricted),
            l.latent_critic(Variant::Full),
            l.latent_critic(Variant::Restricted),
            l.priv_critic(),
            l.risk_critic(),
        ];
        let unique: std::collections::BTreeSet<_> = paths.iter().collect();
        assert_eq!(unique.len(), paths.len());
        assert_eq!(stamp_path(&l.grid()), PathBuf::from("/run/grid/gt.lsfv.stamp.json"));
    }

    #[test]
    fn bundle_needs_only_the_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let l = RunLayout::new(dir.path());
        assert!(matches!(load_bundle(&l), Err(Error::MissingArtifact { stage: "gen-data", .. })));
        let m = BundleManifest {
            params: DubinsParams::default(),
            render: RenderSpec::default(),
            margin_scale: 4.0,
        };
        save_manifest(&m, &l.manifest()).unwrap();
        assert_eq!(load_manifest(&l.manifest()).unwrap(), m);
        let b = load_bundle(&l).unwrap();
        assert!(b.supports(FilterMode::Off));
        assert!(!b.supports(FilterMode::LatentHj));
        assert!(!b.supports(FilterMode::PrivHj));
        assert!(!b.supports(FilterMode::Cmdp));
    }
}
