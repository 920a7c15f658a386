//! Command-level behaviour of the `headprune` binary on a small corpus and a
//! briefly trained model with 4 encoder and 8 cross-attention heads.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use common::{csv_rows, dir_files, population_mean_std, read_manifest, run, run_fail, scratch};

const GEN: &[&str] = &["gen-data", "--langs", "rev,offset3,swap", "--train", "240", "--dev", "10", "--test", "10"];

/// Working directory holding `data/`, `model/` and `attn/`.
fn fixture() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = scratch("cli-fixture");
        run(&dir, &[&["--out-dir", "data", "--seed", "7"], GEN].concat());
        run(
            &dir,
            &[
                "--out-dir", "model", "train", "--data", "data", "--d-model", "16", "--heads", "4", "--enc-layers", "1",
                "--dec-layers", "2", "--ffn", "32", "--epochs", "1",
            ],
        );
        run(&dir, &["--out-dir", "attn", "dump-attn", "--model", "model", "--data", "data"]);
        dir
    })
}

fn work(name: &str) -> PathBuf {
    let dir = fixture().join(name);
    if dir.exists() {
        fs::remove_dir_all(&dir).unwrap();
    }
    dir
}

fn svg_doc(text: &str) -> roxmltree::Document<'_> {
    roxmltree::Document::parse(text).expect("well-formed SVG")
}

fn assert_self_contained(svg: &str) {
    let doc = svg_doc(svg);
    for node in doc.descendants() {
        for attr in node.attributes() {
            assert!(attr.name() != "href", "external reference in {}", node.tag_name().name());
            assert!(!attr.value().contains("url("), "url() reference");
        }
        assert!(node.tag_name().name() != "image" && node.tag_name().name() != "script");
    }
}

#[test]
fn gen_data_is_deterministic() {
    let dir = scratch("cli-gen-data");
    run(&dir, &[&["--out-dir", "a", "--seed", "7"], GEN].concat());
    run(&dir, &[&["--out-dir", "b", "--seed", "7"], GEN].concat());
    let a = dir_files(&dir.join("a"));
    assert!(a.contains_key("train.rev.src") && a.contains_key("gen-data.manifest.json"));
    assert_eq!(a, dir_files(&dir.join("b")));
    run(&dir, &[&["--out-dir", "c", "--seed", "8"], GEN].concat());
    assert_ne!(a["train.tgt"], dir_files(&dir.join("c"))["train.tgt"]);
}

#[test]
fn empty_mask_file_matches_no_mask() {
    let dir = fixture();
    let out = work("empty-mask");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join("empty.mask"), "").unwrap();
    let o = out.to_str().unwrap();
    run(dir, &["--out-dir", &format!("{o}/plain"), "translate", "--model", "model", "--data", "data"]);
    run(
        dir,
        &[
            "--out-dir", &format!("{o}/masked"), "translate", "--model", "model", "--data", "data", "--mask",
            &format!("{o}/empty.mask"),
        ],
    );
    for lang in ["rev", "offset3", "swap"] {
        let name = format!("hyp.test.{lang}.txt");
        assert_eq!(fs::read(out.join("plain").join(&name)).unwrap(), fs::read(out.join("masked").join(&name)).unwrap());
    }
    assert_eq!(
        fs::read(out.join("plain/bleu.test.txt")).unwrap(),
        fs::read(out.join("masked/bleu.test.txt")).unwrap()
    );
}

#[test]
fn dump_passes_validation_and_corruption_is_reported() {
    let dir = fixture();
    let stdout = run(dir, &["validate", "--attn", "attn/attn.dev.jsonl", "--model", "model"]);
    assert!(stdout.starts_with("ok: 60 captures valid"), "{stdout}");

    let out = work("corrupt");
    fs::create_dir_all(&out).unwrap();
    let text = fs::read_to_string(dir.join("attn/attn.dev.jsonl")).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let mut rec: serde_json::Value = serde_json::from_str(&lines[0]).unwrap();
    let w = rec["w"].as_array_mut().unwrap();
    w[0][0] = serde_json::json!(w[0][0].as_f64().unwrap() + 0.25);
    lines[0] = rec.to_string();
    fs::write(out.join("bad.jsonl"), lines.join("\n") + "\n").unwrap();
    let err = run_fail(dir, &["validate", "--attn", out.join("bad.jsonl").to_str().unwrap(), "--model", "model"]);
    assert!(err.contains("sentence 0"), "{err}");
    let err = run_fail(
        dir,
        &["--out-dir", out.join("m").to_str().unwrap(), "metrics", "--attn", out.join("bad.jsonl").to_str().unwrap(), "--model", "model"],
    );
    assert!(err.contains("fails validation"), "{err}");
    assert!(!out.join("m").join("metric.conf.enc.ALL.csv").exists());
}

#[test]
fn metrics_emit_normalized_tables_reproducibly() {
    let dir = fixture();
    let out = work("metrics");
    let o = out.to_str().unwrap();
    let args = |sub: &str| -> Vec<String> {
        ["--out-dir", &format!("{o}/{sub}"), "metrics", "--attn", "attn/attn.dev.jsonl", "--model", "model", "--types", "enc"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    };
    let first: Vec<String> = args("a");
    run(dir, &first.iter().map(String::as_str).collect::<Vec<_>>());
    let files = dir_files(&out.join("a"));
    let tables: Vec<&String> = files.keys().filter(|k| k.starts_with("metric.")).collect();
    assert_eq!(tables.len(), 12, "{tables:?}");
    for name in &tables {
        let z: Vec<f64> = csv_rows(&out.join("a").join(name.as_str()))
            .iter()
            .map(|r| r["normalized"].parse().unwrap())
            .collect();
        assert_eq!(z.len(), 4);
        let (mean, std) = population_mean_std(&z);
        assert!(mean.abs() < 1e-9, "{name}: mean {mean}");
        assert!((std - 1.0).abs() < 1e-9 || z.iter().all(|&v| v == 0.0), "{name}: std {std}");
    }
    let second = args("b");
    run(dir, &second.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(files, dir_files(&out.join("b")));
}

fn write_table(path: &Path, kind: &str, pair: &str, layers: usize, heads: usize, raw: &[f64]) {
    let (mean, std) = population_mean_std(raw);
    let mut s = String::from("metric,attn,pair,layer,head,raw,normalized\n");
    for l in 0..layers {
        for h in 0..heads {
            let v = raw[l * heads + h];
            s.push_str(&format!("{kind},enc,{pair},{l},{h},{v},{}\n", (v - mean) / std));
        }
    }
    fs::write(path, s).unwrap();
}

#[test]
fn heatmap_panels_share_one_color_scale() {
    let out = scratch("cli-heatmap-shared");
    write_table(&out.join("a.csv"), "conf", "rev", 2, 2, &[0.0, 0.0, 0.0, 1.0]);
    write_table(&out.join("b.csv"), "conf", "swap", 2, 2, &[1.0, 2.0, 3.0, 4.0]);
    run(&out, &["heatmap", "--tables", "a.csv", "b.csv"]);
    let svg = fs::read_to_string(out.join("heatmap.conf.enc.svg")).unwrap();
    assert_self_contained(&svg);
    let doc = svg_doc(&svg);
    let scale = doc.descendants().find(|n| n.attribute("class") == Some("scale")).unwrap();
    let top: f64 = scale.attribute("data-max").unwrap().parse().unwrap();
    let bottom: f64 = scale.attribute("data-min").unwrap().parse().unwrap();
    // pair a: z of the lone 1.0 is sqrt(3); pair b spans +-3/sqrt(5)
    assert!((top - 3f64.sqrt()).abs() < 1e-12, "{top}");
    assert!((bottom + 3.0 / 5f64.sqrt()).abs() < 1e-12, "{bottom}");
    let panels: Vec<_> = doc.descendants().filter(|n| n.attribute("class") == Some("panel")).collect();
    assert_eq!(panels.len(), 2);
    let fill = |pair: &str, layer: &str, head: &str| -> String {
        let p = panels.iter().find(|p| p.attribute("data-pair") == Some(pair)).unwrap();
        let cell = p
            .descendants()
            .find(|c| c.attribute("data-layer") == Some(layer) && c.attribute("data-head") == Some(head))
            .unwrap();
        cell.attribute("fill").unwrap().to_string()
    };
    assert_eq!(fill("rev", "1", "1"), "#b40426");
    assert_ne!(fill("swap", "1", "1"), "#b40426");
    assert_eq!(fill("swap", "0", "0"), "#3b4cc0");

    run(&out, &["heatmap", "--tables", "a.csv", "--name", "single.svg"]);
    let single = fs::read_to_string(out.join("single.svg")).unwrap();
    let doc = svg_doc(&single);
    assert_eq!(doc.descendants().filter(|n| n.attribute("class") == Some("cell")).count(), 4);

    write_table(&out.join("c.csv"), "cov", "rev", 2, 2, &[0.0, 0.0, 0.0, 1.0]);
    let err = run_fail(&out, &["heatmap", "--tables", "a.csv", "c.csv", "--name", "mixed.svg"]);
    assert!(err.contains("mixed metric kinds"), "{err}");
    assert!(!out.join("mixed.svg").exists());
}

#[test]
fn heatmap_lays_layers_down_and_heads_across() {
    let out = scratch("cli-heatmap-grid");
    let raw: Vec<f64> = (0..96).map(|i| ((i * 37) % 96) as f64).collect();
    write_table(&out.join("t.csv"), "conf", "ALL", 6, 16, &raw);
    run(&out, &["heatmap", "--tables", "t.csv"]);
    let svg = fs::read_to_string(out.join("heatmap.conf.enc.svg")).unwrap();
    let doc = svg_doc(&svg);
    let cells: Vec<(usize, usize, f64, f64)> = doc
        .descendants()
        .filter(|n| n.attribute("class") == Some("cell"))
        .map(|n| {
            (
                n.attribute("data-layer").unwrap().parse().unwrap(),
                n.attribute("data-head").unwrap().parse().unwrap(),
                n.attribute("x").unwrap().parse().unwrap(),
                n.attribute("y").unwrap().parse().unwrap(),
            )
        })
        .collect();
    assert_eq!(cells.len(), 96);
    let mut xs: Vec<f64> = cells.iter().map(|c| c.2).collect();
    let mut ys: Vec<f64> = cells.iter().map(|c| c.3).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    ys.sort_by(f64::total_cmp);
    ys.dedup();
    assert_eq!((ys.len(), xs.len()), (6, 16));
    for &(layer, head, x, y) in &cells {
        assert_eq!(ys[layer], y);
        assert_eq!(xs[head], x);
    }
}

fn write_curve(path: &Path, pair: &str, bleu: &[f64]) {
    let mut s = String::from("method,attn,pair,k,bleu\n");
    for (k, b) in bleu.iter().enumerate() {
        s.push_str(&format!("conf,enc,{pair},{k},{b}\n"));
    }
    fs::write(path, s).unwrap();
}

#[test]
fn mwu_on_identical_curves_reports_p_one() {
    let out = scratch("cli-mwu");
    let bleu = [40.0, 39.5, 38.0, 35.2, 30.1, 22.4, 10.0];
    write_curve(&out.join("a.csv"), "rev", &bleu);
    write_curve(&out.join("b.csv"), "rev", &bleu);
    let stdout = run(&out, &["mwu", "--a", "a.csv", "--b", "b.csv"]);
    assert!(stdout.contains("no significant difference"), "{stdout}");
    let rows = csv_rows(&out.join("mwu.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["p"].parse::<f64>().unwrap(), 1.0);
    assert_eq!((rows[0]["n"].as_str(), rows[0]["m"].as_str()), ("6", "6"));
    assert_eq!(
        fs::read_to_string(out.join("mwu.csv")).unwrap().lines().next().unwrap(),
        "metric,attn,pairA,pairB,U,n,m,p,mode"
    );
}

#[test]
fn sbs_over_eight_cross_heads_makes_36_translate_calls() {
    let dir = fixture();
    let out = work("sbs");
    let o = out.to_str().unwrap();
    let stdout = run(dir, &["--out-dir", o, "sbs", "--model", "model", "--data", "data", "--attn", "cross"]);
    assert!(stdout.contains("36 translate calls for 8 cross heads"), "{stdout}");
    let manifest = read_manifest(&out.join("sbs.cross.manifest.json"));
    assert_eq!(manifest["config"]["translate_calls"]["ALL"], 36);
    let log = fs::read_to_string(out.join("sbs-log.cross.ALL.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 8);
    let ranking = csv_rows(&out.join("ranking.sbs.cross.csv"));
    assert_eq!(ranking.len(), 8);
    assert!(ranking.iter().all(|r| r["method"] == "sbs" && r["pair"] == "ALL"));
}

#[test]
fn existing_outputs_need_force() {
    let out = scratch("cli-force");
    run(&out, &[&["--out-dir", "d", "--seed", "7"], GEN].concat());
    let before = dir_files(&out.join("d"));
    let err = run_fail(&out, &[&["--out-dir", "d", "--seed", "8"], GEN].concat());
    assert!(err.contains("--force"), "{err}");
    assert_eq!(before, dir_files(&out.join("d")));
    assert_eq!(fs::read_dir(out.join("d")).unwrap().count(), before.len());
    run(&out, &[&["--out-dir", "d", "--seed", "8", "--force"], GEN].concat());
    assert_ne!(before["train.tgt"], dir_files(&out.join("d"))["train.tgt"]);
}

#[test]
fn stale_inputs_are_rejected() {
    let out = scratch("cli-stale");
    run(&out, &[&["--out-dir", "data", "--seed", "7"], GEN].concat());
    run(
        &out,
        &["--out-dir", "model", "train", "--data", "data", "--d-model", "8", "--heads", "2", "--enc-layers", "1", "--dec-layers", "1", "--ffn", "8", "--epochs", "0"],
    );
    run(&out, &["--out-dir", "tr", "translate", "--model", "model", "--data", "data"]);

    // edited by hand after the manifest recorded it
    let dev = out.join("data/dev.tgt");
    let text = fs::read_to_string(&dev).unwrap();
    fs::write(&dev, text.replacen(' ', "  ", 1)).unwrap();
    let err = run_fail(&out, &["--out-dir", "tr2", "translate", "--model", "model", "--data", "data"]);
    assert!(err.contains("stale input") && err.contains("dev.tgt"), "{err}");

    // regenerated corpus: the model was trained on a different one
    run(&out, &[&["--out-dir", "data", "--seed", "9", "--force"], GEN].concat());
    let err = run_fail(&out, &["--out-dir", "tr3", "translate", "--model", "model", "--data", "data"]);
    assert!(err.contains("stale input"), "{err}");
    assert!(!out.join("tr3").join("translate.test.manifest.json").exists());
}

#[test]
fn random_curve_is_the_mean_of_its_seeded_runs() {
    let dir = fixture();
    let out = work("rand-curve");
    let o = out.to_str().unwrap();
    let curve_args = |sub: &str, seed: u64, runs: usize| -> Vec<String> {
        [
            "--out-dir", &format!("{o}/{sub}"), "--seed", &seed.to_string(), "curve", "--model", "model", "--data", "data",
            "--method", "rand", "--attn", "cross", "--runs", &runs.to_string(), "--step", "2", "--degree", "2",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect()
    };
    let go = |a: Vec<String>| run(dir, &a.iter().map(String::as_str).collect::<Vec<_>>());
    go(curve_args("avg", 3, 5));
    let mut singles = Vec::new();
    for i in 0..5 {
        go(curve_args(&format!("single{i}"), 3 + i, 1));
        singles.push(csv_rows(&out.join(format!("single{i}/curve.rand.cross.csv"))));
    }
    let avg = csv_rows(&out.join("avg/curve.rand.cross.csv"));
    let ks: Vec<&str> = avg.iter().map(|r| r["k"].as_str()).collect();
    assert_eq!(ks, ["0", "2", "4", "6", "8"]);
    for (row, r) in avg.iter().enumerate() {
        let mean = singles.iter().map(|s| s[row]["bleu"].parse::<f64>().unwrap()).sum::<f64>() / 5.0;
        let got: f64 = r["bleu"].parse().unwrap();
        assert!((got - mean).abs() < 1e-12, "k={}: {got} vs {mean}", r["k"]);
        assert_eq!(r["method"], "rand");
    }
    let svg = fs::read_to_string(out.join("avg/curve.rand.cross.svg")).unwrap();
    assert_self_contained(&svg);
    let doc = svg_doc(&svg);
    assert_eq!(doc.descendants().filter(|n| n.attribute("class") == Some("curve")).count(), 1);
    assert_eq!(doc.descendants().filter(|n| n.attribute("class") == Some("fit")).count(), 1);
}

#[test]
fn failed_commands_leave_no_outputs() {
    let dir = fixture();
    let out = work("failed");
    let o = out.to_str().unwrap();
    let err = run_fail(dir, &["--out-dir", o, "translate", "--model", "no-such-model", "--data", "data"]);
    assert!(err.contains("error:"), "{err}");
    let err = run_fail(dir, &["--out-dir", o, "translate", "--model", "model", "--data", "data", "--pairs", "klingon"]);
    assert!(err.contains("unknown language pair"), "{err}");
    let err = run_fail(dir, &["--out-dir", o, "rank", "--method", "entropy", "--model", "model", "--tables", "x.csv"]);
    assert!(!err.is_empty());
    let leftover: Vec<_> = if out.exists() { fs::read_dir(&out).unwrap().collect() } else { Vec::new() };
    assert!(leftover.is_empty(), "{leftover:?}");
}

#[test]
fn rank_std_writes_table_and_bars() {
    let dir = fixture();
    let out = work("rank-std");
    let o = out.to_str().unwrap();
    run(dir, &["--out-dir", &format!("{o}/m"), "metrics", "--attn", "attn/attn.dev.jsonl", "--model", "model", "--kinds", "cov"]);
    let tables: Vec<String> = ["rev", "offset3", "swap", "ALL"]
        .iter()
        .map(|p| format!("{o}/m/metric.cov.cross.{p}.csv"))
        .collect();
    let mut args = vec!["--out-dir", o, "rank", "--method", "cov", "--model", "model", "--tables"];
    args.extend(tables.iter().map(String::as_str));
    run(dir, &args);
    let rankings = csv_rows(&out.join("ranking.cov.cross.csv"));
    assert_eq!(rankings.len(), 32);
    run(dir, &["--out-dir", o, "rank-std", "--rankings", &format!("{o}/ranking.cov.cross.csv")]);
    let rows = csv_rows(&out.join("rank-std.cov.cross.csv"));
    assert_eq!(rows.len(), 8);
    // oracle: population std of each head's 1-based rank over the three pairs
    for r in &rows {
        let ranks: Vec<f64> = rankings
            .iter()
            .filter(|x| x["pair"] != "ALL" && x["layer"] == r["layer"] && x["head"] == r["head"])
            .map(|x| x["rank"].parse().unwrap())
            .collect();
        assert_eq!(ranks.len(), 3);
        let (_, std) = population_mean_std(&ranks);
        assert!((r["std"].parse::<f64>().unwrap() - std).abs() < 1e-12);
    }
    let svg = fs::read_to_string(out.join("rank-std.cov.cross.svg")).unwrap();
    assert_self_contained(&svg);
    assert_eq!(svg_doc(&svg).descendants().filter(|n| n.attribute("class") == Some("bar")).count(), 8);
}
