//! Run provenance. Deterministic fields go into each output's header; the
//! wall-clock time and thread count only go into the `.manifest` sidecar.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const MANIFEST_MAGIC: &str = "pals-manifest v1";

pub struct RunManifest {
    pub command: &'static str,
    pub config_path: Option<PathBuf>,
    /// Resolved configuration as TOML.
    pub config_snapshot: String,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub threads: usize,
    started: Instant,
}

/// FNV-1a, enough to tell two configurations apart at a glance.
fn digest(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

impl RunManifest {
    pub fn new(command: &'static str, config_path: Option<PathBuf>, config_snapshot: String, threads: usize) -> Self {
        Self {
            command,
            config_path,
            config_snapshot,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            threads,
            started: Instant::now(),
        }
    }

    /// Fields that are a pure function of the command line and its inputs.
    pub fn header(&self) -> Vec<(String, String)> {
        let mut h = vec![
            ("command".to_string(), self.command.to_string()),
            ("tool_version".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("config".to_string(), self.config_path.as_deref().map_or("none".into(), show)),
            ("config_digest".to_string(), format!("{:016x}", digest(&self.config_snapshot))),
        ];
        if let Some(seed) = self.seed {
            h.push(("seed".to_string(), seed.to_string()));
        }
        if !self.inputs.is_empty() {
            let inputs: Vec<String> = self.inputs.iter().map(|p| show(p)).collect();
            h.push(("inputs".to_string(), inputs.join(",")));
        }
        h
    }

    pub fn sidecar_text(&self) -> String {
        let mut s = format!("# {MANIFEST_MAGIC}\n");
        for (k, v) in self.header() {
            let _ = writeln!(s, "{k} = {v}");
        }
        let outputs: Vec<String> = self.outputs.iter().map(|p| show(p)).collect();
        let _ = writeln!(s, "outputs = {}", outputs.join(","));
        let _ = writeln!(s, "threads = {}", self.threads);
        let _ = writeln!(s, "wall_clock_seconds = {:.3}", self.started.elapsed().as_secs_f64());
        s.push_str("\n# resolved configuration\n");
        s.push_str(&self.config_snapshot);
        s
    }
}

/// `<path>.manifest`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".manifest");
    PathBuf::from(os)
}
