//! Metric tables, heatmaps, rankings and rank spread.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::BufReader;
use std::path::PathBuf;

use anyhow::{bail, Context as _, Result};
use clap::Args;
use serde::Serialize;

use headprune::capture::{read_jsonl, validate_capture, AttentionCapture};
use headprune::metrics::{aggregate, normalize, read_tables_csv, MetricKind, MetricTable, ALL_PAIRS};
use headprune::ranking::{rank_by_metric, rank_random, rank_std_across_pairs, read_rankings_csv, write_rankings_csv, HeadRanking};
use headprune::{AttnType, HeadLayout};

use super::{load_model, parse_list, read_file};
use crate::context::{Ctx, Lineage, Outputs};
use crate::svg;

#[derive(Debug, Args, Serialize)]
pub struct MetricsArgs {
    /// Attention dump written by dump-attn.
    #[arg(long)]
    pub attn: PathBuf,
    /// Checkpoint the dump was captured from.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "conf,var,cov")]
    pub kinds: String,
    /// Attention types: enc, cross.
    #[arg(long, default_value = "enc,cross")]
    pub types: String,
    /// Language tags for per-pair tables, or `all` for every pair present.
    /// The joint ALL table over the selected pairs is always written.
    #[arg(long, default_value = "all")]
    pub pairs: String,
}

pub fn metric_file_name(kind: MetricKind, attn: AttnType, pair: &str) -> String {
    format!("metric.{kind}.{attn}.{pair}.csv")
}

pub fn metrics(ctx: &Ctx, a: MetricsArgs) -> Result<()> {
    let mut lineage = Lineage::default();
    let ckpt = load_model(&mut lineage, &a.model)?;
    lineage.file(&a.attn)?;
    let layout = ckpt.config.layout();
    let kinds: Vec<MetricKind> = parse_list(&a.kinds, "metric")?;
    let types: Vec<AttnType> = parse_list(&a.types, "attention type")?;

    let file = fs::File::open(&a.attn).with_context(|| format!("opening {}", a.attn.display()))?;
    let captures = read_jsonl(BufReader::new(file), &layout)?;
    let mut violations = Vec::new();
    for c in &captures {
        for v in validate_capture(c, &layout) {
            violations.push(format!("{} sentence {} {}: {v}", c.pair, c.sid, c.attn));
        }
    }
    if !violations.is_empty() {
        bail!("attention dump fails validation:\n{}", violations.join("\n"));
    }

    let present: BTreeSet<String> = captures.iter().map(|c| c.pair.clone()).collect();
    let pairs: Vec<String> = if a.pairs.trim().eq_ignore_ascii_case("all") {
        present.iter().cloned().collect()
    } else {
        let wanted: Vec<String> = parse_list(&a.pairs, "pair")?;
        for p in &wanted {
            if !present.contains(p) {
                bail!("pair {p:?} not in the dump; present: {}", present.iter().cloned().collect::<Vec<_>>().join(","));
            }
        }
        wanted
    };
    let mut scopes: Vec<(String, Vec<AttentionCapture>)> = pairs
        .iter()
        .map(|p| (p.clone(), captures.iter().filter(|c| &c.pair == p).cloned().collect()))
        .collect();
    scopes.push((
        ALL_PAIRS.to_string(),
        captures.iter().filter(|c| pairs.contains(&c.pair)).cloned().collect(),
    ));

    let mut out = Outputs::new(ctx, "metrics")?;
    for &kind in &kinds {
        for &attn in &types {
            for (pair, _) in &scopes {
                out.reserve(&metric_file_name(kind, attn, pair))?;
            }
        }
    }
    for &kind in &kinds {
        for &attn in &types {
            for (pair, caps) in &scopes {
                let table = normalize(&aggregate(caps, kind, attn, &layout, pair)?)?;
                let mut buf = Vec::new();
                table.write_csv(&mut buf)?;
                out.write(&metric_file_name(kind, attn, pair), buf)?;
            }
        }
    }
    eprintln!(
        "wrote {} metric tables to {}",
        kinds.len() * types.len() * scopes.len(),
        ctx.out_dir.display()
    );
    out.commit("metrics", &metrics_stem(&kinds, &types), ctx, serde_json::to_value(&a)?, &lineage, &[])?;
    Ok(())
}

fn metrics_stem(kinds: &[MetricKind], types: &[AttnType]) -> String {
    let kinds: Vec<&str> = kinds.iter().map(|k| k.as_str()).collect();
    let types: Vec<&str> = types.iter().map(|t| t.as_str()).collect();
    format!("metrics.{}.{}", kinds.join("+"), types.join("+"))
}

fn load_tables(lineage: &mut Lineage, paths: &[PathBuf]) -> Result<Vec<MetricTable>> {
    let mut tables = Vec::new();
    for p in paths {
        lineage.file(p)?;
        tables.extend(read_tables_csv(read_file(p)?.as_slice()).with_context(|| format!("reading {}", p.display()))?);
    }
    if tables.is_empty() {
        bail!("no metric tables given");
    }
    Ok(tables)
}

fn uniform_kind(tables: &[MetricTable]) -> Result<(MetricKind, AttnType)> {
    let (kind, attn) = (tables[0].kind, tables[0].attn);
    for t in tables {
        if t.kind != kind {
            bail!("mixed metric kinds: {} and {}", kind, t.kind);
        }
        if t.attn != attn {
            bail!("mixed attention types: {} and {}", attn, t.attn);
        }
    }
    Ok((kind, attn))
}

#[derive(Debug, Args, Serialize)]
pub struct HeatmapArgs {
    /// Metric table CSVs of one metric kind and attention type.
    #[arg(long, num_args = 1.., required = true)]
    pub tables: Vec<PathBuf>,
    /// Output file name (default `heatmap.<metric>.<attn>.svg`).
    #[arg(long)]
    pub name: Option<String>,
}

pub fn heatmap(ctx: &Ctx, a: HeatmapArgs) -> Result<()> {
    let mut lineage = Lineage::default();
    let tables = load_tables(&mut lineage, &a.tables)?;
    let (kind, attn) = uniform_kind(&tables)?;
    let layers = tables.iter().flat_map(|t| t.rows.iter().map(|r| r.head.layer + 1)).max().unwrap_or(1);
    let heads = tables.iter().flat_map(|t| t.rows.iter().map(|r| r.head.head + 1)).max().unwrap_or(1);
    let name = a.name.clone().unwrap_or_else(|| format!("heatmap.{kind}.{attn}.svg"));
    let mut out = Outputs::new(ctx, "heatmap")?;
    out.write(&name, svg::heatmap(&tables, layers, heads))?;
    let (lo, hi) = svg::shared_scale(&tables);
    eprintln!("shared color scale {lo:.4} .. {hi:.4}");
    out.commit("heatmap", name.trim_end_matches(".svg"), ctx, serde_json::to_value(&a)?, &lineage, &[])?;
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct RankArgs {
    /// conf, var, cov or rand.
    #[arg(long)]
    pub method: String,
    /// Metric table CSVs (metric methods): one ranking per table.
    #[arg(long, num_args = 1..)]
    pub tables: Vec<PathBuf>,
    /// Checkpoint fixing the head universe.
    #[arg(long)]
    pub model: PathBuf,
    /// Attention type for random rankings.
    #[arg(long, default_value = "enc")]
    pub attn: String,
    /// Number of random rankings.
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    /// Output file name (default `ranking.<method>.<attn>.csv`).
    #[arg(long)]
    pub name: Option<String>,
}

/// Seeded random rankings `rand-0`, `rand-1`, ... for seeds `seed`, `seed+1`, ...
pub fn random_rankings(layout: &HeadLayout, attn: AttnType, pair: &str, seed: u64, runs: usize) -> Vec<HeadRanking> {
    (0..runs as u64)
        .map(|i| {
            let mut r = rank_random(layout, attn, pair, seed + i);
            r.method = format!("rand-{i}");
            r
        })
        .collect()
}

pub fn rank(ctx: &Ctx, a: RankArgs) -> Result<()> {
    let mut lineage = Lineage::default();
    let ckpt = load_model(&mut lineage, &a.model)?;
    let layout = ckpt.config.layout();
    let (rankings, attn) = if a.method == "rand" {
        if a.runs == 0 {
            bail!("--runs must be >= 1");
        }
        let attn: AttnType = a.attn.parse()?;
        (random_rankings(&layout, attn, ALL_PAIRS, ctx.seed.unwrap_or(0), a.runs), attn)
    } else {
        let wanted: MetricKind = a.method.parse()?;
        let tables = load_tables(&mut lineage, &a.tables)?;
        let (kind, attn) = uniform_kind(&tables)?;
        if kind != wanted {
            bail!("--method {} given {} tables", a.method, kind);
        }
        let rankings = tables
            .iter()
            .map(|t| rank_by_metric(t, &layout))
            .collect::<headprune::Result<Vec<_>>>()?;
        (rankings, attn)
    };
    let name = a.name.clone().unwrap_or_else(|| format!("ranking.{}.{attn}.csv", a.method));
    let mut out = Outputs::new(ctx, "rank")?;
    let mut buf = Vec::new();
    write_rankings_csv(&mut buf, &rankings)?;
    out.write(&name, buf)?;
    out.commit("rank", name.trim_end_matches(".csv"), ctx, serde_json::to_value(&a)?, &lineage, &[])?;
    Ok(())
}

pub fn load_rankings(lineage: &mut Lineage, paths: &[PathBuf]) -> Result<Vec<HeadRanking>> {
    let mut all = Vec::new();
    for p in paths {
        lineage.file(p)?;
        all.extend(read_rankings_csv(read_file(p)?.as_slice()).with_context(|| format!("reading {}", p.display()))?);
    }
    if all.is_empty() {
        bail!("no rankings given");
    }
    Ok(all)
}

#[derive(Debug, Args, Serialize)]
pub struct RankStdArgs {
    /// Ranking CSVs holding one ranking per language pair for one method and
    /// attention type; joint ALL rankings are ignored.
    #[arg(long, num_args = 1.., required = true)]
    pub rankings: Vec<PathBuf>,
    /// Output base name (default `rank-std.<method>.<attn>`).
    #[arg(long)]
    pub name: Option<String>,
}

pub fn rank_std(ctx: &Ctx, a: RankStdArgs) -> Result<()> {
    let mut lineage = Lineage::default();
    let rankings = load_rankings(&mut lineage, &a.rankings)?;
    let (method, attn) = (rankings[0].method.clone(), rankings[0].attn);
    let mut by_pair = BTreeMap::new();
    for r in rankings.into_iter().filter(|r| r.pair != ALL_PAIRS) {
        if r.method != method || r.attn != attn {
            bail!("rankings mix {method}/{attn} with {}/{}", r.method, r.attn);
        }
        if by_pair.insert(r.pair.clone(), r).is_some() {
            bail!("two rankings for the same language pair");
        }
    }
    let spread = rank_std_across_pairs(&by_pair)?;
    let base = a.name.clone().unwrap_or_else(|| format!("rank-std.{method}.{attn}"));
    let mut csv = String::from("attn,layer,head,std\n");
    for (h, s) in &spread {
        csv.push_str(&format!("{},{},{},{}\n", h.attn, h.layer, h.head, s));
    }
    let mut out = Outputs::new(ctx, "rank-std")?;
    out.write(&format!("{base}.csv"), csv)?;
    let title = format!("{method} / {attn}: rank std across {} pairs", by_pair.len());
    out.write(&format!("{base}.svg"), svg::rank_std_bars(&title, &spread))?;
    out.commit("rank-std", &base, ctx, serde_json::to_value(&a)?, &lineage, &[])?;
    Ok(())
}
