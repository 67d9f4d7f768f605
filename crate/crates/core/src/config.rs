//! The pipeline configuration document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assoc::AssocConfig;
use crate::backend::BackendConfig;
use crate::error::{Error, Result};
use crate::geometry::IcpConfig;
use crate::postprocess::PostprocessConfig;
use crate::types::CameraRig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub assoc: AssocConfig,
    pub icp: IcpConfig,
    pub backend: BackendConfig,
    pub post: PostprocessConfig,
    pub rig: CameraRig,
}

/// On-disk form: every section may be omitted. A missing `assoc` section
/// is scaled to whatever rig the document declares.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    assoc: Option<AssocConfig>,
    icp: Option<IcpConfig>,
    backend: Option<BackendConfig>,
    post: Option<PostprocessConfig>,
    rig: Option<CameraRig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::for_rig(CameraRig::default())
    }
}

impl PipelineConfig {
    pub fn for_rig(rig: CameraRig) -> Self {
        Self {
            assoc: AssocConfig::for_rig(&rig),
            icp: IcpConfig::default(),
            backend: BackendConfig::default(),
            post: PostprocessConfig::default(),
            rig,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.rig.validate()?;
        self.assoc.validate()?;
        self.icp.validate()?;
        self.backend.validate()?;
        self.post.validate()
    }

    /// Parses and validates. Type errors name the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Document = parse_json(text)?;
        let rig = doc.rig.unwrap_or_default();
        let base = Self::for_rig(rig);
        let cfg = Self {
            assoc: doc.assoc.unwrap_or(base.assoc),
            icp: doc.icp.unwrap_or(base.icp),
            backend: doc.backend.unwrap_or(base.backend),
            post: doc.post.unwrap_or(base.post),
            rig,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Deserializes a JSON document; errors carry the offending field path.
pub(crate) fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = PipelineConfig::default();
        let back = PipelineConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_json(), cfg.to_json());
    }

    #[test]
    fn empty_document_is_default() {
        assert_eq!(PipelineConfig::from_json("{}").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn missing_assoc_follows_rig() {
        let cfg = PipelineConfig::from_json(
            r#"{"rig": {"f": 1000, "cx": 640, "cy": 480, "baseline_m": 0.11, "width_px": 1280, "height_px": 960}}"#,
        )
        .unwrap();
        assert_eq!(cfg.assoc.delta_px, 64.0);
    }

    #[test]
    fn type_error_names_field() {
        let err = PipelineConfig::from_json(r#"{"backend": {"huber_k": "three"}}"#).unwrap_err();
        match err {
            Error::Config { path, .. } => assert_eq!(path, "backend.huber_k"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_key_rejected() {
        let err = PipelineConfig::from_json(r#"{"post": {"dedupe_radius": 1}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
        assert!(PipelineConfig::from_json(r#"{"extra": 1}"#).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let mut cfg = PipelineConfig::default();
        cfg.post.dedupe_radius_m = 0.0;
        assert!(matches!(
            PipelineConfig::from_json(&cfg.to_json()).unwrap_err(),
            Error::Validation(_)
        ));
    }
}
