//! Config file layering and run provenance.
//!
//! The config file is INI: `key = value` lines under `[section]` headers.
//! Flags override file values, which override built-in defaults.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;
use manner_align::{BackendDescriptor, PromptSet, RewriteVariant, SamplingConfig};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::Failure;

const KNOWN_KEYS: &[(&str, &[&str])] = &[
    ("backend", &["descriptor"]),
    ("sampling", &["profile", "temperature", "top_p", "top_k", "max_length"]),
    ("align", &["variant", "concurrency", "tag_map", "checkpoint"]),
    ("prompts", &["dir"]),
    ("ppl", &["eval_count"]),
    ("run", &["seed"]),
];

#[derive(Debug, Default)]
pub struct FileConfig {
    ini: Option<Ini>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let ini = Ini::load_from_file(path)
            .map_err(|e| Failure::Usage(format!("reading config {}: {e}", path.display())))?;
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if let Some((key, _)) = props.iter().next() {
                    return Err(Failure::Usage(format!("config key `{key}` is outside any section")));
                }
                continue;
            };
            if section == "sources" {
                continue;
            }
            let keys = KNOWN_KEYS
                .iter()
                .find(|(s, _)| *s == section)
                .map(|(_, k)| *k)
                .ok_or_else(|| Failure::Usage(format!("unknown config section [{section}]")))?;
            if let Some((key, _)) = props.iter().find(|(k, _)| !keys.contains(k)) {
                return Err(Failure::Usage(format!("unknown config key `{key}` in [{section}]")));
            }
        }
        Ok(Self { ini: Some(ini) })
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.ini.as_ref()?.section(Some(section))?.get(key)
    }

    pub fn parsed<T>(&self, section: &str, key: &str) -> Result<Option<T>, Failure>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.get(section, key)
            .map(|v| v.parse::<T>().map_err(|e| Failure::Usage(format!("config [{section}] {key} = {v}: {e}"))))
            .transpose()
    }

    /// `[sources]` entries: input path or file stem -> source tag.
    pub fn source_tags(&self) -> BTreeMap<String, String> {
        self.ini
            .as_ref()
            .and_then(|i| i.section(Some("sources")))
            .map(|s| s.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect())
            .unwrap_or_default()
    }
}

/// Flag, else file value, else default.
pub fn layer<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// Rewrite-stage sampling from a profile plus per-field overrides.
pub fn sampling(
    file: &FileConfig,
    profile: Option<String>,
    temperature: Option<f64>,
    top_p: Option<f64>,
    top_k: Option<u32>,
    max_length: Option<usize>,
) -> Result<SamplingConfig, Failure> {
    let profile = layer(profile, file.get("sampling", "profile").map(str::to_string), "vicuna".into());
    let base = SamplingConfig::profile(&profile)
        .ok_or_else(|| Failure::Usage(format!("unknown sampling profile `{profile}` (expected vicuna|qwen)")))?;
    let cfg = SamplingConfig {
        temperature: layer(temperature, file.parsed("sampling", "temperature")?, base.temperature),
        top_p: layer(top_p, file.parsed("sampling", "top_p")?, base.top_p),
        top_k: top_k.or(file.parsed("sampling", "top_k")?).or(base.top_k),
        max_length: layer(max_length, file.parsed("sampling", "max_length")?, base.max_length),
        sampling_enabled: base.sampling_enabled,
    };
    cfg.validate().map_err(Failure::Usage)?;
    Ok(cfg)
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct RunPaths {
    pub inputs: Vec<PathBuf>,
    pub output: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub tag_map: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
}

/// Everything that determines a run's outputs. Serializes in a fixed
/// field order; the SHA-256 of that form is the config hash.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: String,
    #[serde(serialize_with = "as_display")]
    pub backend: BackendDescriptor,
    pub sampling: SamplingConfig,
    pub variant: RewriteVariant,
    pub concurrency: usize,
    pub paths: RunPaths,
    pub seed: u64,
    /// Command-specific settings, sorted by key.
    pub params: BTreeMap<String, serde_json::Value>,
}

fn as_display<S: serde::Serializer>(d: &BackendDescriptor, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(d)
}

impl RunConfig {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            backend: BackendDescriptor::reference("reference"),
            sampling: SamplingConfig::default(),
            variant: RewriteVariant::default(),
            concurrency: 1,
            paths: RunPaths::default(),
            seed: 0,
            params: BTreeMap::new(),
        }
    }

    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("run config serializes")
    }

    pub fn config_hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    /// Inputs must exist; output directories are created.
    pub fn check_paths(&self) -> Result<(), Failure> {
        let must_exist = self.paths.inputs.iter().chain(&self.paths.tag_map).chain(&self.paths.prompts);
        for p in must_exist {
            if !p.exists() {
                return Err(Failure::data(format!("{} does not exist", p.display())));
            }
        }
        for p in self.paths.output.iter().chain(&self.paths.checkpoint) {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)
                    .map_err(|e| Failure::data(format!("creating {}: {e}", parent.display())))?;
            }
        }
        Ok(())
    }

    pub fn provenance(&self, prompts: &PromptSet, backend_name: &str) -> Provenance {
        Provenance {
            tool: concat!("manner-align ", env!("CARGO_PKG_VERSION")).into(),
            command: self.command.clone(),
            config_hash: self.config_hash(),
            prompt_digests: prompts.digests(),
            backend: backend_name.into(),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub command: String,
    pub config_hash: String,
    pub prompt_digests: BTreeMap<String, String>,
    pub backend: String,
    pub seed: u64,
}

impl Provenance {
    /// `# key: value` lines for text outputs.
    pub fn comment_header(&self) -> String {
        let mut out = format!(
            "# tool: {}\n# command: {}\n# config_hash: {}\n# backend: {}\n# seed: {}\n",
            self.tool, self.command, self.config_hash, self.backend, self.seed
        );
        for (file, digest) in &self.prompt_digests {
            out.push_str(&format!("# prompt {file}: {digest}\n"));
        }
        out
    }
}
