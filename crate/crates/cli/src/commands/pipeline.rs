//! Corpus generation, training, translation and attention dumps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::PathBuf;

use anyhow::{bail, Context as _, Result};
use clap::Args;
use serde::Serialize;

use headprune::capture::{read_jsonl, validate_capture, write_jsonl};
use headprune::nmt::checkpoint::{BLOB_FILE, HEADER_FILE};
use headprune::nmt::{self, examples, ModelConfig, Split, SyntheticTaskSpec, TrainConfig};
use headprune::{corpus_bleu, HeadMask};

use super::{check_model_fits_task, eval_sets, load_model, load_task, parse_scopes, scope_langs};
use crate::context::{dir_fingerprint, Ctx, Lineage, Outputs};

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    /// Language tags; each names its transform: id, rev, swap or offset<k>.
    #[arg(long, default_value = "rev,offset3,swap")]
    pub langs: String,
    #[arg(long, default_value_t = 3)]
    pub min_len: usize,
    #[arg(long, default_value_t = 12)]
    pub max_len: usize,
    #[arg(long, default_value_t = 5000)]
    pub train: usize,
    #[arg(long, default_value_t = 300)]
    pub dev: usize,
    #[arg(long, default_value_t = 300)]
    pub test: usize,
    #[arg(long, default_value_t = 64)]
    pub vocab: usize,
    /// Longest model input, tags and BOS/EOS included.
    #[arg(long, default_value_t = 24)]
    pub max_seq_len: usize,
}

pub fn gen_data(ctx: &Ctx, a: GenDataArgs) -> Result<()> {
    let spec = SyntheticTaskSpec {
        langs: a.langs.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        min_len: a.min_len,
        max_len: a.max_len,
        train: a.train,
        dev: a.dev,
        test: a.test,
        vocab_size: a.vocab,
        max_seq_len: a.max_seq_len,
        seed: ctx.seed.unwrap_or(7),
    };
    let names = nmt::data::task_file_names(&spec);
    let mut out = Outputs::new(ctx, "gen-data")?;
    for n in &names {
        out.reserve(n)?;
    }
    let task = nmt::gen_corpus(&spec)?;
    task.write(out.staging_dir())?;
    let fp = dir_fingerprint(out.staging_dir(), &names)?;
    out.commit("gen-data", "gen-data", ctx, serde_json::to_value(&spec)?, &Lineage::default(), &[("data", fp)])?;
    eprintln!(
        "wrote {} languages x {}/{}/{} sentences to {}",
        spec.langs.len(),
        spec.train,
        spec.dev,
        spec.test,
        ctx.out_dir.display()
    );
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Corpus directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 4)]
    pub enc_layers: usize,
    #[arg(long, default_value_t = 2)]
    pub dec_layers: usize,
    #[arg(long, default_value_t = 128)]
    pub ffn: usize,
    #[arg(long, default_value_t = 16)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 2e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 200)]
    pub warmup: usize,
    /// Keep the learning rate constant after warmup.
    #[arg(long)]
    pub no_decay: bool,
}

pub fn train(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let mut lineage = Lineage::default();
    let task = load_task(&mut lineage, &a.data)?;
    let seed = ctx.seed.unwrap_or(1);
    let config = ModelConfig {
        vocab_size: task.spec.vocab_size,
        d_model: a.d_model,
        heads: a.heads,
        enc_layers: a.enc_layers,
        dec_layers: a.dec_layers,
        ffn: a.ffn,
        max_len: task.spec.max_seq_len,
        seed,
    };
    config.validate()?;
    let tc = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        warmup_steps: a.warmup,
        linear_decay: !a.no_decay,
        seed,
        ..Default::default()
    };
    tc.validate()?;
    let mut out = Outputs::new(ctx, "train")?;
    for n in [HEADER_FILE, BLOB_FILE, "train-log.csv"] {
        out.reserve(n)?;
    }
    let train_set = examples(&task, Split::Train)?;
    let dev = examples(&task, Split::Dev)?;
    let mut log = String::from("epoch,step,train_loss,dev_loss\n");
    let (ckpt, report) = nmt::train(&config, &train_set, &dev, &tc, |e| {
        eprintln!(
            "epoch {:>3}  step {:>6}  train loss {:.5}  dev loss {:.5}",
            e.epoch + 1,
            e.step,
            e.train_loss,
            e.dev_loss
        );
        let _ = writeln!(log, "{},{},{},{}", e.epoch + 1, e.step, e.train_loss, e.dev_loss);
    })?;
    eprintln!("initial dev loss {:.5}", report.initial_dev_loss);
    ckpt.save(out.staging_dir())?;
    out.write("train-log.csv", log)?;
    let fp = dir_fingerprint(out.staging_dir(), &[HEADER_FILE.to_string(), BLOB_FILE.to_string()])?;
    let snapshot = serde_json::json!({ "args": a, "model": config, "train": tc });
    out.commit("train", "train", ctx, snapshot, &lineage, &[("model", fp)])?;
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct TranslateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Comma-separated language tags, or `all`.
    #[arg(long, default_value = "all")]
    pub pairs: String,
    /// Head mask file: one `enc|cross <layer> <head>` per line.
    #[arg(long)]
    pub mask: Option<PathBuf>,
}

fn load_mask(lineage: &mut Lineage, path: Option<&PathBuf>) -> Result<HeadMask> {
    match path {
        None => Ok(HeadMask::empty()),
        Some(p) => {
            lineage.file(p)?;
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            HeadMask::parse(&text).with_context(|| format!("parsing mask {}", p.display()))
        }
    }
}

pub fn translate(ctx: &Ctx, a: TranslateArgs) -> Result<()> {
    let mut lineage = Lineage::default();
    let task = load_task(&mut lineage, &a.data)?;
    let ckpt = load_model(&mut lineage, &a.model)?;
    check_model_fits_task(&ckpt, &task)?;
    let mask = load_mask(&mut lineage, a.mask.as_ref())?;
    let split: Split = a.split.parse()?;
    let langs: Vec<String> = parse_scopes(&a.pairs, &task)?
        .iter()
        .flat_map(|s| scope_langs(s, &task))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let model = ckpt.model();
    let mut out = Outputs::new(ctx, "translate")?;
    let bleu_name = format!("bleu.{}.txt", split.as_str());
    out.reserve(&bleu_name)?;
    let mut report = String::new();
    let mut failures = String::new();
    let mut all_h = Vec::new();
    let mut all_r = Vec::new();
    for set in eval_sets(&task, split, &langs)? {
        let t = model.translate(&set.pair, &set.sources, &mask, false)?;
        for f in &t.failures {
            let _ = writeln!(failures, "{}\t{}\t{}", set.pair, f.sid, f.reason);
            eprintln!("warning: {} sentence {} skipped: {}", set.pair, f.sid, f.reason);
        }
        let hyps = t.hypotheses_or_empty();
        let text: String = hyps.iter().map(|h| task.vocab.to_text(h) + "\n").collect();
        out.write(&format!("hyp.{}.{}.txt", split.as_str(), set.pair), text)?;
        let score = corpus_bleu(&hyps, &set.references)?;
        let _ = writeln!(report, "{}\t{score}", set.pair);
        all_h.extend(hyps);
        all_r.extend(set.references);
    }
    if langs.len() > 1 {
        let _ = writeln!(report, "ALL\t{}", corpus_bleu(&all_h, &all_r)?);
    }
    print!("{report}");
    out.write(&bleu_name, report)?;
    if !failures.is_empty() {
        out.write(&format!("failures.{}.txt", split.as_str()), failures)?;
    }
    out.commit("translate", &format!("translate.{}", split.as_str()), ctx, serde_json::to_value(&a)?, &lineage, &[])?;
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct DumpAttnArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "dev")]
    pub split: String,
    /// Comma-separated language tags, or `all`.
    #[arg(long, default_value = "all")]
    pub pairs: String,
    #[arg(long)]
    pub mask: Option<PathBuf>,
}

pub fn attn_file_name(split: Split) -> String {
    format!("attn.{}.jsonl", split.as_str())
}

pub fn dump_attn(ctx: &Ctx, a: DumpAttnArgs) -> Result<()> {
    let mut lineage = Lineage::default();
    let task = load_task(&mut lineage, &a.data)?;
    let ckpt = load_model(&mut lineage, &a.model)?;
    check_model_fits_task(&ckpt, &task)?;
    let mask = load_mask(&mut lineage, a.mask.as_ref())?;
    let split: Split = a.split.parse()?;
    let langs: Vec<String> = parse_scopes(&a.pairs, &task)?
        .iter()
        .flat_map(|s| scope_langs(s, &task))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let model = ckpt.model();
    let mut out = Outputs::new(ctx, "dump-attn")?;
    let name = attn_file_name(split);
    let path = out.reserve(&name)?;
    let mut captures = Vec::new();
    for set in eval_sets(&task, split, &langs)? {
        let t = model.translate(&set.pair, &set.sources, &mask, true)?;
        for f in &t.failures {
            eprintln!("warning: {} sentence {} skipped: {}", set.pair, f.sid, f.reason);
        }
        captures.extend(t.captures);
    }
    let file = fs::File::create(&path)?;
    let mut w = std::io::BufWriter::new(file);
    write_jsonl(&mut w, &captures)?;
    std::io::Write::flush(&mut w)?;
    eprintln!("captured {} attention matrix sets", captures.len());
    out.commit("dump-attn", &format!("dump-attn.{}", split.as_str()), ctx, serde_json::to_value(&a)?, &lineage, &[])?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Attention dump (JSON lines).
    #[arg(long)]
    pub attn: PathBuf,
    /// Checkpoint directory fixing the expected head grid.
    #[arg(long)]
    pub model: PathBuf,
}

pub fn validate(a: ValidateArgs) -> Result<()> {
    let mut lineage = Lineage::default();
    let ckpt = load_model(&mut lineage, &a.model)?;
    lineage.file(&a.attn)?;
    let layout = ckpt.config.layout();
    let file = fs::File::open(&a.attn).with_context(|| format!("opening {}", a.attn.display()))?;
    let captures = read_jsonl(BufReader::new(file), &layout)?;
    let mut bad = BTreeMap::new();
    for c in &captures {
        let v = validate_capture(c, &layout);
        if !v.is_empty() {
            bad.insert((c.attn, c.pair.clone(), c.sid), v);
        }
    }
    if bad.is_empty() {
        println!("ok: {} captures valid", captures.len());
        return Ok(());
    }
    for ((attn, pair, sid), vs) in &bad {
        for v in vs {
            println!("{pair} sentence {sid} {attn}: {v}");
        }
    }
    bail!("{} of {} captures have violations", bad.len(), captures.len())
}
