//! Self-describing JSON checkpoints.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Result, VncaError};
use crate::nca::UpdateRule;
use crate::optim::Adam;

pub const FORMAT: &str = "vnca-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Hex SHA-256 of the style image file, or of its pixels when generated.
    pub style_sha256: String,
    pub frame_index: u32,
    pub seed: u64,
    /// `H x W x D` of the training volume.
    pub volume_dims: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub rule: UpdateRule,
    pub optimizer: Option<Adam>,
    /// Epochs completed.
    pub epoch: usize,
    /// Render scale that maps the unstylized training frame's brightest pixel to 1.
    pub exposure: f32,
    pub gamma: f32,
    pub config: RunConfig,
    pub provenance: Provenance,
}

impl Checkpoint {
    pub fn new(rule: UpdateRule, config: RunConfig, provenance: Provenance, exposure: f32, gamma: f32) -> Self {
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            rule,
            optimizer: None,
            epoch: 0,
            exposure,
            gamma,
            config,
            provenance,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let bad = |reason: String| VncaError::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        if ck.format != FORMAT || ck.version != VERSION {
            return Err(bad(format!(
                "expected {FORMAT} v{VERSION}, found {} v{}",
                ck.format, ck.version
            )));
        }
        if ck.rule.params.w1.len() != ck.rule.input_dim() * ck.rule.hidden_dim
            || ck.rule.params.w2.len() != ck.rule.hidden_dim * ck.rule.channels
            || !ck.rule.params.is_finite()
        {
            return Err(bad("rule parameters are inconsistent or non-finite".into()));
        }
        Ok(ck)
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_json().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| VncaError::io(path, e))?;
        Self::from_json(&text, path)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| VncaError::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut f = std::fs::File::create(&tmp).map_err(|e| VncaError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| VncaError::io(&tmp, e))?;
    f.sync_all().map_err(|e| VncaError::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| VncaError::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Encoding;

    fn sample() -> Checkpoint {
        let rule = UpdateRule::new(12, 8, 0.5, Encoding::default(), 3).unwrap();
        Checkpoint::new(rule, RunConfig::default(), Provenance::default(), 1.5, 0.1)
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert!(!dir.path().join("ck.json.tmp").exists());
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.json");
        std::fs::write(&path, "{\"format\": \"other\"}").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(VncaError::Checkpoint { .. })));
        let mut ck = sample();
        ck.rule.params.w2.pop();
        std::fs::write(&path, ck.to_json()).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn sha_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
