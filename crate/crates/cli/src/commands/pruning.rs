//! Sequential backward selection, pruning curves and curve comparisons.

use std::fs;
use std::io::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context as _, Result};
use clap::Args;
use serde::Serialize;

use headprune::nmt::Split;
use headprune::ranking::{
    self, average_curves, prune_curve, read_curves_csv, write_curves_csv, write_rankings_csv, write_sbs_log,
    CorpusEvaluator, CountingEvaluator, HeadRanking, MaskEvaluator, PruneCurve,
};
use headprune::stats::{compare_curves, polyfit, write_mwu_csv, MwuRow, DEFAULT_DEGREE};
use headprune::{AttnType, HeadMask};

use super::analysis::{load_rankings, random_rankings};
use super::{check_model_fits_task, eval_sets, load_model, load_task, parse_list, parse_scopes, read_file, scope_langs};
use crate::context::{Ctx, Lineage, Outputs};
use crate::svg;

#[derive(Debug, Args, Serialize)]
pub struct SbsArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "dev")]
    pub split: String,
    /// enc or cross.
    #[arg(long)]
    pub attn: String,
    /// Scopes to rank: language tags for language-specific runs, `all` for
    /// one joint run over every pair.
    #[arg(long, default_value = "all")]
    pub pairs: String,
}

pub fn sbs(ctx: &Ctx, a: SbsArgs) -> Result<()> {
    let mut lineage = Lineage::default();
    let task = load_task(&mut lineage, &a.data)?;
    let ckpt = load_model(&mut lineage, &a.model)?;
    check_model_fits_task(&ckpt, &task)?;
    let split: Split = a.split.parse()?;
    let attn: AttnType = a.attn.parse()?;
    let scopes = parse_scopes(&a.pairs, &task)?;
    let model = ckpt.model();
    let layout = ckpt.config.layout();

    let ranking_name = format!("ranking.sbs.{attn}.csv");
    let log_name = |scope: &str| format!("sbs-log.{attn}.{scope}.jsonl");
    let mut out = Outputs::new(ctx, "sbs")?;
    out.reserve(&ranking_name)?;
    for s in &scopes {
        out.reserve(&log_name(s))?;
    }
    let mut rankings = Vec::new();
    let mut calls = serde_json::Map::new();
    for scope in &scopes {
        let evaluator = CountingEvaluator::new(CorpusEvaluator {
            model: &model,
            sets: eval_sets(&task, split, &scope_langs(scope, &task))?,
        });
        let baseline = evaluator.evaluate(&HeadMask::empty())?;
        let before = evaluator.calls();
        let log_path = out.reserve(&log_name(scope))?;
        let mut log_file = fs::File::create(&log_path)?;
        let result = ranking::sbs(&evaluator, &layout, attn, scope, &baseline, |step| {
            write_sbs_log(&mut log_file, std::slice::from_ref(step))?;
            log_file.flush().map_err(|e| headprune::Error::io(&log_path, e))?;
            eprintln!(
                "{scope} step {:>2}: masked {} (bleu {:.2}, drop {:.3})",
                step.step + 1,
                step.selected,
                step.bleu,
                step.drop
            );
            Ok(())
        });
        let outcome = match result {
            Ok(o) => o,
            Err(failure) => {
                // keep what was completed next to the other outputs
                let partial = ctx.out_dir.join(format!("{}.partial", log_name(scope)));
                let mut buf = Vec::new();
                write_sbs_log(&mut buf, &failure.completed)?;
                fs::write(&partial, buf)?;
                eprintln!("partial selection log kept in {}", partial.display());
                return Err(failure.into());
            }
        };
        let used = evaluator.calls() - before;
        println!("{scope}: {used} translate calls for {} {attn} heads (baseline {baseline})", layout.count(attn));
        calls.insert(scope.clone(), used.into());
        rankings.push(outcome.ranking);
    }
    let mut buf = Vec::new();
    write_rankings_csv(&mut buf, &rankings)?;
    out.write(&ranking_name, buf)?;
    let snapshot = serde_json::json!({ "args": a, "translate_calls": calls });
    out.commit("sbs", &format!("sbs.{attn}"), ctx, snapshot, &lineage, &[])?;
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct CurveArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Ranking CSVs; every ranking becomes one curve. Random rankings
    /// (`rand-<run>`) are averaged into one `rand` curve.
    #[arg(long, num_args = 1..)]
    pub rankings: Vec<PathBuf>,
    /// `rand` draws seeded random rankings instead of reading --rankings.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    /// Attention type of random rankings.
    #[arg(long, default_value = "enc")]
    pub attn: String,
    /// Scope label of random rankings: a language tag or `all`.
    #[arg(long, default_value = "all")]
    pub pairs: String,
    /// Evaluate every curve on these pairs instead of the ranking's own scope.
    #[arg(long)]
    pub eval_pairs: Option<String>,
    /// Heads masked between consecutive points.
    #[arg(long, default_value_t = 1)]
    pub step: usize,
    /// Degree of the smoothing polynomial drawn over each curve; 0 disables it.
    #[arg(long, default_value_t = DEFAULT_DEGREE)]
    pub degree: usize,
    /// Output base name (default `curve.<methods>.<attn>`).
    #[arg(long)]
    pub name: Option<String>,
}

pub fn curve(ctx: &Ctx, a: CurveArgs) -> Result<()> {
    let mut lineage = Lineage::default();
    let task = load_task(&mut lineage, &a.data)?;
    let ckpt = load_model(&mut lineage, &a.model)?;
    check_model_fits_task(&ckpt, &task)?;
    let split: Split = a.split.parse()?;
    let layout = ckpt.config.layout();
    let rankings: Vec<HeadRanking> = match a.method.as_deref() {
        Some("rand") => {
            if a.runs == 0 {
                bail!("--runs must be >= 1");
            }
            let scope = parse_scopes(&a.pairs, &task)?;
            if scope.len() != 1 {
                bail!("random curves take a single --pairs scope");
            }
            random_rankings(&layout, a.attn.parse()?, &scope[0], ctx.seed.unwrap_or(0), a.runs)
        }
        Some(other) => bail!("--method {other:?}: only `rand` is generated here; pass --rankings otherwise"),
        None => load_rankings(&mut lineage, &a.rankings)?,
    };
    for r in &rankings {
        r.validate(&layout)?;
    }
    let attn = rankings[0].attn;
    if rankings.iter().any(|r| r.attn != attn) {
        bail!("rankings mix attention types");
    }
    let eval_override = a.eval_pairs.as_deref().map(|p| parse_scopes(p, &task)).transpose()?;
    let model = ckpt.model();

    let mut curves = Vec::new();
    let mut random = Vec::new();
    for r in &rankings {
        let langs: Vec<String> = match &eval_override {
            Some(scopes) => scopes.iter().flat_map(|s| scope_langs(s, &task)).collect(),
            None => scope_langs(&r.pair, &task),
        };
        let evaluator = CorpusEvaluator {
            model: &model,
            sets: eval_sets(&task, split, &langs)?,
        };
        let c = prune_curve(&evaluator, r, a.step)?;
        eprintln!(
            "{} {}: baseline {:.2}, all {} heads masked {:.2}",
            r.method,
            r.pair,
            c.points[0].bleu,
            r.len(),
            c.points.last().map_or(0.0, |p| p.bleu)
        );
        if r.method.starts_with("rand-") {
            random.push(c);
        } else {
            curves.push(c);
        }
    }
    if !random.is_empty() {
        let mut by_pair: std::collections::BTreeMap<String, Vec<PruneCurve>> = Default::default();
        for c in random {
            by_pair.entry(c.pair.clone()).or_default().push(c);
        }
        for group in by_pair.values() {
            curves.push(average_curves(group, "rand")?);
        }
    }
    if a.degree > 0 {
        for c in &mut curves {
            let pts: Vec<(f64, f64)> = c.points.iter().map(|p| (p.k as f64, p.bleu)).collect();
            match polyfit(&pts, a.degree) {
                Ok(fit) => c.fitted = Some(fit.sample(64)),
                Err(e) => eprintln!("warning: no smoothing for {} {}: {e}", c.method, c.pair),
            }
        }
    }

    let mut methods: Vec<String> = curves.iter().map(|c| c.method.clone()).collect();
    methods.dedup();
    let base = a.name.clone().unwrap_or_else(|| format!("curve.{}.{attn}", methods.join("+")));
    let mut out = Outputs::new(ctx, "curve")?;
    let mut buf = Vec::new();
    write_curves_csv(&mut buf, &curves)?;
    out.write(&format!("{base}.csv"), buf)?;
    let title = format!("BLEU while pruning {attn} heads ({} split)", split.as_str());
    out.write(&format!("{base}.svg"), svg::curves(&title, &curves))?;
    out.commit("curve", &base, ctx, serde_json::to_value(&a)?, &lineage, &[])?;
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct MwuArgs {
    /// Curve CSV of the first sample set (e.g. language-specific rankings).
    #[arg(long)]
    pub a: PathBuf,
    /// Curve CSV of the second sample set (e.g. the joint ranking).
    #[arg(long)]
    pub b: PathBuf,
    /// Only compare these methods.
    #[arg(long)]
    pub methods: Option<String>,
    /// Only compare curves of these scopes from the first file.
    #[arg(long)]
    pub pairs: Option<String>,
    /// Output file name (default `mwu.csv`).
    #[arg(long)]
    pub name: Option<String>,
}

fn load_curves(lineage: &mut Lineage, path: &PathBuf) -> Result<Vec<PruneCurve>> {
    lineage.file(path)?;
    read_curves_csv(read_file(path)?.as_slice()).with_context(|| format!("reading {}", path.display()))
}

pub fn mwu(ctx: &Ctx, a: MwuArgs) -> Result<()> {
    let mut lineage = Lineage::default();
    let left = load_curves(&mut lineage, &a.a)?;
    let right = load_curves(&mut lineage, &a.b)?;
    let methods: Option<Vec<String>> = a.methods.as_deref().map(|m| parse_list(m, "method")).transpose()?;
    let pairs: Option<Vec<String>> = a.pairs.as_deref().map(|p| parse_list(p, "pair")).transpose()?;
    let mut rows = Vec::new();
    for ca in &left {
        if methods.as_ref().is_some_and(|m| !m.contains(&ca.method)) || pairs.as_ref().is_some_and(|p| !p.contains(&ca.pair)) {
            continue;
        }
        // same scope if present, otherwise the only curve of that method
        let candidates: Vec<&PruneCurve> = right.iter().filter(|c| c.method == ca.method && c.attn == ca.attn).collect();
        let cb = match candidates.iter().find(|c| c.pair == ca.pair) {
            Some(c) => *c,
            None => match candidates.as_slice() {
                [] => continue,
                [one] => *one,
                _ => bail!("several {} {} curves in {} and none for pair {}", ca.method, ca.attn, a.b.display(), ca.pair),
            },
        };
        let r = compare_curves(ca, cb).with_context(|| format!("comparing {} {} with {}", ca.method, ca.pair, cb.pair))?;
        let verdict = if r.p > 0.05 { "no significant difference" } else { "significant difference" };
        println!("{} {} {} vs {}: U={} p={:.4} ({}) {verdict}", ca.method, ca.attn, ca.pair, cb.pair, r.u, r.p, r.mode);
        rows.push(MwuRow::new(&ca.method, ca.attn, &ca.pair, &cb.pair, &r));
    }
    if rows.is_empty() {
        bail!("no curve in {} has a counterpart in {}", a.a.display(), a.b.display());
    }
    let mut out = Outputs::new(ctx, "mwu")?;
    let mut buf = Vec::new();
    write_mwu_csv(&mut buf, &rows)?;
    let name = a.name.as_deref().unwrap_or("mwu.csv");
    out.write(name, buf)?;
    out.commit("mwu", name.trim_end_matches(".csv"), ctx, serde_json::to_value(&a)?, &lineage, &[])?;
    Ok(())
}
