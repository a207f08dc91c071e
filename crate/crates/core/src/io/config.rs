//! TOML engine configuration. Every field is optional so command-line
//! flags can fill or override any of them.
//!
//! ```toml
//! checkpoint = "model.ckpt"
//! variant = "sf"
//!
//! [window]
//! clip_len = 300
//! window_len = 30
//! fps_in = 30.0
//!
//! [noise]
//! spatial_drop_p = 0.1
//! seed = 7
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::feedback::Variant;
use crate::noise::NoiseConfig;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSection {
    pub clip_len: Option<usize>,
    pub window_len: Option<usize>,
    pub fps_in: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub spatial_drop_p: Option<f64>,
    pub frame_drop_p: Option<f64>,
    pub id_confusion_p: Option<f64>,
    pub seed: Option<u64>,
}

impl NoiseSection {
    /// Fills unset fields from `base`.
    pub fn resolve(&self, base: NoiseConfig) -> NoiseConfig {
        NoiseConfig {
            spatial_drop_p: self.spatial_drop_p.unwrap_or(base.spatial_drop_p),
            frame_drop_p: self.frame_drop_p.unwrap_or(base.frame_drop_p),
            id_confusion_p: self.id_confusion_p.unwrap_or(base.id_confusion_p),
            seed: self.seed.unwrap_or(base.seed),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub checkpoint: Option<PathBuf>,
    pub variant: Option<Variant>,
    #[serde(default)]
    pub window: WindowSection,
    #[serde(default)]
    pub noise: NoiseSection,
}

pub fn parse_config(text: &str) -> Result<FileConfig> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

pub fn load_config(path: &Path) -> Result<FileConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_file() {
        let cfg = parse_config(
            r#"
checkpoint = "m.ckpt"
variant = "sf+cf"
[window]
clip_len = 300
window_len = 30
fps_in = 22.95
[noise]
spatial_drop_p = 0.1
seed = 9
"#,
        )
        .unwrap();
        assert_eq!(cfg.checkpoint.as_deref(), Some(Path::new("m.ckpt")));
        assert_eq!(cfg.variant, Some(Variant::SemanticControl));
        assert_eq!(cfg.window.window_len, Some(30));
        let noise = cfg.noise.resolve(NoiseConfig::default());
        assert_eq!(noise.spatial_drop_p, 0.1);
        assert_eq!(noise.frame_drop_p, 0.0);
        assert_eq!(noise.seed, 9);
    }

    #[test]
    fn empty_and_bad_files() {
        assert_eq!(parse_config("").unwrap(), FileConfig::default());
        assert!(matches!(parse_config("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(parse_config("variant = \"xx\""), Err(Error::Config(_))));
    }
}
