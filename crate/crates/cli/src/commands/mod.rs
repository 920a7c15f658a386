pub mod analysis;
pub mod pipeline;
pub mod pruning;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context as _, Result};

use headprune::metrics::ALL_PAIRS;
use headprune::nmt::checkpoint::{BLOB_FILE, HEADER_FILE};
use headprune::nmt::data::task_file_names;
use headprune::nmt::{Checkpoint, Split, SyntheticTaskSpec, TaskData};
use headprune::ranking::EvalSet;

use crate::context::Lineage;

pub fn load_task(lineage: &mut Lineage, dir: &Path) -> Result<TaskData> {
    let spec_path = dir.join("task.json");
    let text = fs::read_to_string(&spec_path).with_context(|| format!("reading {}", spec_path.display()))?;
    let spec: SyntheticTaskSpec = serde_json::from_str(&text).with_context(|| format!("parsing {}", spec_path.display()))?;
    lineage.dir("data", dir, &task_file_names(&spec))?;
    TaskData::read(dir).with_context(|| format!("loading corpus from {}", dir.display()))
}

pub fn load_model(lineage: &mut Lineage, dir: &Path) -> Result<Checkpoint> {
    lineage.dir("model", dir, &[HEADER_FILE.to_string(), BLOB_FILE.to_string()])?;
    Checkpoint::load(dir).with_context(|| format!("loading checkpoint from {}", dir.display()))
}

/// Resolves a `--pairs` value: a comma-separated list of language tags,
/// where `all` stands for the joint scope over every pair.
pub fn parse_scopes(value: &str, task: &TaskData) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for item in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let scope = if item.eq_ignore_ascii_case("all") {
            ALL_PAIRS.to_string()
        } else if task.spec.langs.iter().any(|l| l == item) {
            item.to_string()
        } else {
            bail!("unknown language pair {item:?}; available: {}", task.spec.langs.join(","));
        };
        if !out.contains(&scope) {
            out.push(scope);
        }
    }
    if out.is_empty() {
        bail!("--pairs selects no language pair");
    }
    Ok(out)
}

/// Language tags covered by a scope.
pub fn scope_langs(scope: &str, task: &TaskData) -> Vec<String> {
    if scope == ALL_PAIRS {
        task.spec.langs.clone()
    } else {
        vec![scope.to_string()]
    }
}

pub fn eval_sets(task: &TaskData, split: Split, langs: &[String]) -> Result<Vec<EvalSet>> {
    langs
        .iter()
        .map(|lang| {
            let corpus = &task.split(split)[lang];
            Ok(EvalSet {
                pair: lang.clone(),
                sources: corpus
                    .sources()
                    .map(|s| task.vocab.encode_source(lang, s))
                    .collect::<headprune::Result<Vec<_>>>()?,
                references: corpus.references().map(<[_]>::to_vec).collect(),
            })
        })
        .collect()
}

pub fn check_model_fits_task(ckpt: &Checkpoint, task: &TaskData) -> Result<()> {
    if ckpt.config.vocab_size != task.spec.vocab_size {
        bail!(
            "model vocabulary {} does not match corpus vocabulary {}",
            ckpt.config.vocab_size,
            task.spec.vocab_size
        );
    }
    Ok(())
}

pub fn parse_list<T: std::str::FromStr>(value: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for item in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if seen.insert(item.to_string()) {
            out.push(item.parse::<T>().map_err(|e| anyhow::anyhow!("invalid {what} {item:?}: {e}"))?);
        }
    }
    if out.is_empty() {
        bail!("no {what} given");
    }
    Ok(out)
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}
