//! Run manifest: resolved config echo, content hashes of inputs, a listing of
//! every output file, and the wall-clock time of the run.

use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{:02x}", b)).collect()
}

pub struct RunManifest {
    command: &'static str,
    config_echo: String,
    inputs: Vec<(PathBuf, String)>,
    outputs: Vec<(PathBuf, String)>,
    started: Instant,
}

impl RunManifest {
    pub fn new(command: &'static str, config_echo: String) -> RunManifest {
        RunManifest {
            command,
            config_echo,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn record_input(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::Io(format!("cannot hash input {}: {}", path.display(), e)))?;
        self.inputs.push((path.to_path_buf(), sha256_hex(&bytes)));
        Ok(())
    }

    /// Writes `content` to `path` and lists it as an output.
    pub fn write_output(&mut self, path: &Path, content: &str) -> Result<(), CliError> {
        std::fs::write(path, content)
            .map_err(|e| CliError::Io(format!("cannot write {}: {}", path.display(), e)))?;
        self.outputs
            .push((path.to_path_buf(), sha256_hex(content.as_bytes())));
        Ok(())
    }

    pub fn finish(self, out_dir: &Path) -> Result<(), CliError> {
        let mut text = String::from("# run-manifest v1\n");
        text.push_str(&format!("command = {}\n", self.command));
        text.push_str(&format!(
            "elapsed_ms = {}\n",
            self.started.elapsed().as_millis()
        ));
        text.push_str(&format!(
            "config_sha256 = {}\n",
            sha256_hex(self.config_echo.as_bytes())
        ));
        for (path, hash) in &self.inputs {
            text.push_str(&format!("input {} sha256={}\n", path.display(), hash));
        }
        for (path, hash) in &self.outputs {
            text.push_str(&format!("output {} sha256={}\n", path.display(), hash));
        }
        text.push_str("-- config --\n");
        text.push_str(&self.config_echo);
        let path = out_dir.join(format!("manifest-{}.txt", self.command));
        std::fs::write(&path, text)
            .map_err(|e| CliError::Io(format!("cannot write {}: {}", path.display(), e)))?;
        Ok(())
    }
}
