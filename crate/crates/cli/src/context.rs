//! Output staging, run manifests and input lineage.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use serde::{Deserialize, Serialize};

use headprune::fingerprint;

pub const MANIFEST_SUFFIX: &str = ".manifest.json";

/// Settings shared by every command.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub out_dir: PathBuf,
    pub force: bool,
    pub seed: Option<u64>,
}

/// Record of one command run, written next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    /// Input path as given, with its content fingerprint.
    pub inputs: BTreeMap<String, String>,
    /// Output file name, with its content fingerprint.
    pub outputs: BTreeMap<String, String>,
    /// Fingerprints of the upstream roots (`data`, `model`, ...) the outputs
    /// derive from.
    pub lineage: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

pub fn file_fingerprint(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(fingerprint(&bytes))
}

/// Fingerprint of a set of files in `dir`, independent of listing order.
pub fn dir_fingerprint(dir: &Path, names: &[String]) -> Result<String> {
    let mut sorted = names.to_vec();
    sorted.sort();
    let mut text = String::new();
    for name in sorted {
        text.push_str(&format!("{name} {}\n", file_fingerprint(&dir.join(&name))?));
    }
    Ok(fingerprint(text.as_bytes()))
}

/// Manifest in the same directory that lists `path` among its outputs.
fn producer_of(path: &Path) -> Result<Option<(PathBuf, RunManifest)>> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
        return Ok(None);
    };
    let Ok(entries) = fs::read_dir(&dir) else {
        return Ok(None);
    };
    let mut manifests: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(MANIFEST_SUFFIX))
        .collect();
    manifests.sort();
    for m in manifests {
        let manifest = RunManifest::read(&m)?;
        if manifest.outputs.contains_key(name) {
            return Ok(Some((m, manifest)));
        }
    }
    Ok(None)
}

/// Upstream fingerprints gathered from a command's inputs. Two inputs that
/// disagree on a root mean one of them is stale.
#[derive(Debug, Default)]
pub struct Lineage {
    roots: BTreeMap<String, (String, String)>,
    inputs: BTreeMap<String, String>,
}

impl Lineage {
    pub fn root(&mut self, key: &str, fp: &str, source: &str) -> Result<()> {
        if let Some((existing, from)) = self.roots.get(key) {
            if existing != fp {
                bail!(
                    "stale input: {source} derives from {key} {}, but {from} derives from {key} {}",
                    &fp[..12.min(fp.len())],
                    &existing[..12.min(existing.len())]
                );
            }
            return Ok(());
        }
        self.roots.insert(key.to_string(), (fp.to_string(), source.to_string()));
        Ok(())
    }

    /// Registers an input file and absorbs the lineage of its producer.
    pub fn file(&mut self, path: &Path) -> Result<String> {
        let fp = file_fingerprint(path)?;
        let shown = path.display().to_string();
        if let Some((mpath, m)) = producer_of(path)? {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if m.outputs[name] != fp {
                bail!(
                    "stale input: {shown} changed after {} recorded it",
                    mpath.display()
                );
            }
            for (k, v) in &m.lineage {
                self.root(k, v, &shown)?;
            }
        }
        self.inputs.insert(shown, fp.clone());
        Ok(fp)
    }

    /// Registers a directory artifact (`data`, `model`) made of `names`.
    pub fn dir(&mut self, key: &str, dir: &Path, names: &[String]) -> Result<String> {
        let shown = dir.display().to_string();
        for name in names {
            self.file(&dir.join(name))?;
        }
        let fp = dir_fingerprint(dir, names)?;
        self.root(key, &fp, &shown)?;
        self.inputs.insert(shown, fp.clone());
        Ok(fp)
    }

    pub fn roots(&self) -> BTreeMap<String, String> {
        self.roots.iter().map(|(k, (v, _))| (k.clone(), v.clone())).collect()
    }
}

/// Files written to a staging directory and moved into the output
/// directory only when the whole command succeeded. Dropping an uncommitted
/// set removes the staged files.
pub struct Outputs {
    out_dir: PathBuf,
    staging: PathBuf,
    force: bool,
    names: Vec<String>,
    committed: bool,
}

impl Outputs {
    pub fn new(ctx: &Ctx, command: &str) -> Result<Self> {
        fs::create_dir_all(&ctx.out_dir).with_context(|| format!("creating {}", ctx.out_dir.display()))?;
        let staging = ctx.out_dir.join(format!(".{command}.staging.{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir(&staging).with_context(|| format!("creating {}", staging.display()))?;
        Ok(Self {
            out_dir: ctx.out_dir.clone(),
            staging,
            force: ctx.force,
            names: Vec::new(),
            committed: false,
        })
    }

    pub fn staging_dir(&self) -> &Path {
        &self.staging
    }

    /// Fails early if `name` would overwrite an existing file without
    /// `--force`.
    pub fn reserve(&mut self, name: &str) -> Result<PathBuf> {
        let target = self.out_dir.join(name);
        if target.exists() && !self.force {
            bail!("{} exists; pass --force to overwrite", target.display());
        }
        if !self.names.iter().any(|n| n == name) {
            self.names.push(name.to_string());
        }
        Ok(self.staging.join(name))
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let path = self.reserve(name)?;
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
    }

    /// Writes `<stem>.manifest.json` and moves every staged file into place.
    pub fn commit(
        mut self,
        command: &str,
        stem: &str,
        ctx: &Ctx,
        config: serde_json::Value,
        lineage: &Lineage,
        own_roots: &[(&str, String)],
    ) -> Result<RunManifest> {
        let mut outputs = BTreeMap::new();
        for name in &self.names {
            outputs.insert(name.clone(), file_fingerprint(&self.staging.join(name))?);
        }
        let mut roots = lineage.roots();
        for (k, v) in own_roots {
            roots.insert(k.to_string(), v.clone());
        }
        let manifest = RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: ctx.seed,
            config,
            inputs: lineage.inputs.clone(),
            outputs,
            lineage: roots,
        };
        let mname = format!("{stem}{MANIFEST_SUFFIX}");
        self.write(&mname, serde_json::to_string_pretty(&manifest)? + "\n")?;
        for name in &self.names {
            let target = self.out_dir.join(name);
            fs::rename(self.staging.join(name), &target)
                .with_context(|| format!("moving output into {}", target.display()))?;
        }
        self.committed = true;
        let _ = fs::remove_dir_all(&self.staging);
        Ok(manifest)
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}
