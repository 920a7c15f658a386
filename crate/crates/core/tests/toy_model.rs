//! End-to-end behaviour of the toy translation model: learning a copy task,
//! divergence detection, and the capture contract under masking.

use std::io::BufReader;
use std::sync::OnceLock;

use headprune::capture::{read_jsonl, write_jsonl};
use headprune::metrics::aggregate;
use headprune::nmt::{examples, gen_corpus, train, Batch, Checkpoint, ModelConfig, Split, SyntheticTaskSpec, TaskData, TrainConfig};
use headprune::{head_universe, validate_capture, AttnType, Error, HeadMask, MetricKind};

fn copy_task() -> TaskData {
    gen_corpus(&SyntheticTaskSpec {
        langs: vec!["id".into()],
        min_len: 3,
        max_len: 8,
        train: 200,
        dev: 50,
        test: 50,
        vocab_size: 24,
        max_seq_len: 12,
        seed: 11,
    })
    .unwrap()
}

fn copy_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 24,
        d_model: 32,
        heads: 1,
        enc_layers: 1,
        dec_layers: 1,
        ffn: 64,
        max_len: 12,
        seed: 5,
    }
}

/// One-layer, one-head model trained for 30 epochs on the copy task.
fn copy_model() -> &'static (TaskData, Checkpoint) {
    static MODEL: OnceLock<(TaskData, Checkpoint)> = OnceLock::new();
    MODEL.get_or_init(|| {
        let task = copy_task();
        let tc = TrainConfig {
            epochs: 30,
            batch_size: 16,
            warmup_steps: 50,
            ..Default::default()
        };
        let (ckpt, _) = train(
            &copy_config(),
            &examples(&task, Split::Train).unwrap(),
            &examples(&task, Split::Dev).unwrap(),
            &tc,
            |_| {},
        )
        .unwrap();
        (task, ckpt)
    })
}

fn dev_sources(task: &TaskData) -> Vec<Vec<u32>> {
    examples(task, Split::Dev).unwrap().into_iter().map(|e| e.source).collect()
}

#[test]
fn copy_task_reaches_high_dev_token_accuracy() {
    let (task, ckpt) = copy_model();
    let model = ckpt.model();
    let dev = examples(task, Split::Dev).unwrap();
    let batch = Batch::new(dev.iter().map(|e| (e.source.as_slice(), e.reference.as_slice())));
    let probs = model.teacher_forced_probs(&batch, &HeadMask::empty()).unwrap();
    let correct = batch
        .tgt_out
        .iter()
        .enumerate()
        .filter(|&(row, &gold)| {
            let r = probs.row(row);
            let best = (0..r.len()).fold(0, |b, j| if r[j] > r[b] { j } else { b });
            best == gold as usize
        })
        .count();
    let accuracy = correct as f64 / batch.tgt_out.len() as f64;
    assert!(accuracy > 0.9, "dev token accuracy {accuracy}");
}

#[test]
fn huge_learning_rate_is_reported_as_divergence() {
    let task = copy_task();
    let tc = TrainConfig {
        epochs: 5,
        lr: 1e30,
        warmup_steps: 0,
        clip_norm: 0.0,
        ..Default::default()
    };
    let err = train(&copy_config(), &examples(&task, Split::Train).unwrap(), &[], &tc, |_| {}).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }), "{err}");
}

#[test]
fn masking_any_single_head_keeps_captures_valid() {
    let (task, ckpt) = copy_model();
    let model = ckpt.model();
    let layout = ckpt.config.layout();
    let sources = dev_sources(task);
    let plain = model.translate("id", &sources, &HeadMask::empty(), true).unwrap();
    for head in head_universe(&layout) {
        let mask = HeadMask::empty().with(head);
        let t = model.translate("id", &sources, &mask, true).unwrap();
        assert_eq!(t.captures.len(), plain.captures.len());
        for c in &t.captures {
            assert!(validate_capture(c, &layout).is_empty(), "{head} sentence {}", c.sid);
            if c.attn == head.attn {
                assert!(c.slot(head.layer, head.head).unwrap().masked);
            }
        }
    }
}

#[test]
fn metrics_survive_the_dump_round_trip() {
    let (task, ckpt) = copy_model();
    let model = ckpt.model();
    let layout = ckpt.config.layout();
    let t = model.translate("id", &dev_sources(task), &HeadMask::empty(), true).unwrap();
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &t.captures).unwrap();
    let back = read_jsonl(BufReader::new(buf.as_slice()), &layout).unwrap();
    for kind in MetricKind::ALL {
        for attn in AttnType::ALL {
            let a = aggregate(&t.captures, kind, attn, &layout, "id").unwrap();
            let b = aggregate(&back, kind, attn, &layout, "id").unwrap();
            assert_eq!(a.scores, b.scores, "{kind} {attn}");
        }
    }
}
