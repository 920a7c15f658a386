//! Greedy batched decoding with key/value caching, head masking and
//! attention capture.

use ndarray::{s, Array1, Array2, ArrayView1};
use rayon::prelude::*;

use super::data::{BOS, EOS};
use super::layers::{Real, Segments};
use super::model::{MaskFlags, Model};
use crate::capture::{AttentionCapture, AttentionMatrix};
use crate::corpus::Token;
use crate::error::Result;
use crate::heads::{AttnType, HeadMask};

/// Sentences decoded together in one packed batch.
const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceFailure {
    pub sid: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Translation {
    /// One entry per input sentence; `None` when the sentence was skipped.
    pub hypotheses: Vec<Option<Vec<Token>>>,
    pub failures: Vec<SentenceFailure>,
    /// EncSelf then Cross capture per translated sentence, in sentence order.
    pub captures: Vec<AttentionCapture>,
}

impl Translation {
    /// Hypotheses with skipped sentences replaced by empty output.
    pub fn hypotheses_or_empty(&self) -> Vec<Vec<Token>> {
        self.hypotheses
            .iter()
            .map(|h| h.clone().unwrap_or_default())
            .collect()
    }
}

struct Decoded {
    sid: usize,
    tokens: Vec<Token>,
    captures: Option<[AttentionCapture; 2]>,
}

fn softmax_vec<T: Real>(v: &mut Array1<T>) {
    let max = v.fold(T::neg_infinity(), |a, &b| a.max(b));
    v.mapv_inplace(|x| (x - max).exp());
    let z = v.sum();
    *v /= z;
}

fn argmax<T: Real>(row: ArrayView1<'_, T>) -> Token {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as Token
}

impl<T: Real> Model<T> {
    /// Greedy translation of encoded sources (language tag, tokens, EOS).
    /// Sentence ids in failures and captures are indices into `sources`.
    pub fn translate(
        &self,
        pair: &str,
        sources: &[Vec<Token>],
        mask: &HeadMask,
        capture: bool,
    ) -> Result<Translation> {
        let flags = MaskFlags::new(&self.config, mask)?;
        let mut failures = Vec::new();
        let mut valid = Vec::with_capacity(sources.len());
        for (sid, src) in sources.iter().enumerate() {
            if src.is_empty() {
                failures.push(SentenceFailure {
                    sid,
                    reason: "empty source".into(),
                });
            } else if src.len() > self.config.max_len {
                failures.push(SentenceFailure {
                    sid,
                    reason: format!(
                        "source length {} exceeds max length {}",
                        src.len(),
                        self.config.max_len
                    ),
                });
            } else if let Some(&t) = src.iter().find(|&&t| t as usize >= self.config.vocab_size) {
                failures.push(SentenceFailure {
                    sid,
                    reason: format!("token {t} outside vocabulary"),
                });
            } else {
                valid.push(sid);
            }
        }

        let decoded: Vec<Vec<Decoded>> = valid
            .par_chunks(CHUNK)
            .map(|ids| self.decode_chunk(pair, sources, ids, &flags, capture))
            .collect();

        let mut hypotheses = vec![None; sources.len()];
        let mut captures = Vec::new();
        for d in decoded.into_iter().flatten() {
            hypotheses[d.sid] = Some(d.tokens);
            if let Some(caps) = d.captures {
                captures.extend(caps);
            }
        }
        Ok(Translation {
            hypotheses,
            failures,
            captures,
        })
    }

    fn decode_chunk(
        &self,
        pair: &str,
        sources: &[Vec<Token>],
        ids: &[usize],
        flags: &MaskFlags,
        capture: bool,
    ) -> Vec<Decoded> {
        let cfg = &self.config;
        let p = &self.params;
        let d = cfg.d_model;
        let heads = cfg.heads;
        let dk = cfg.head_dim();
        let scale = T::lit(1.0 / (dk as f64).sqrt());
        let emb_scale = T::lit((d as f64).sqrt());
        let max_steps = cfg.max_len - 1;
        let n = ids.len();

        let src: Vec<Token> = ids.iter().flat_map(|&i| sources[i].iter().copied()).collect();
        let src_segs = Segments::from_lengths(ids.iter().map(|&i| sources[i].len()));
        let enc = self.encode(&src, &src_segs, flags);
        let mem = enc.memory.view();
        let cross_kv: Vec<(Array2<T>, Array2<T>)> = p
            .dec
            .iter()
            .map(|l| (l.cross.k.forward(&mem), l.cross.v.forward(&mem)))
            .collect();

        let mut self_k: Vec<Vec<Array2<T>>> = (0..p.dec.len())
            .map(|_| (0..n).map(|_| Array2::zeros((max_steps, d))).collect())
            .collect();
        let mut self_v = self_k.clone();
        // cross_rows[i][l * heads + h] holds one captured row per step
        let mut cross_rows: Vec<Vec<Vec<Vec<f64>>>> = if capture {
            vec![vec![Vec::new(); p.dec.len() * heads]; n]
        } else {
            Vec::new()
        };

        let mut outputs: Vec<Vec<Token>> = vec![Vec::new(); n];
        let mut last: Vec<Token> = vec![BOS; n];
        let mut active: Vec<usize> = (0..n).collect();

        for t in 0..max_steps {
            if active.is_empty() {
                break;
            }
            let na = active.len();
            let mut x = Array2::<T>::zeros((na, d));
            for (r, &i) in active.iter().enumerate() {
                let mut row = x.row_mut(r);
                row.assign(&p.tgt_emb.row(last[i] as usize));
                row *= emb_scale;
                row += &self.positions.row(t);
            }
            for (l, layer) in p.dec.iter().enumerate() {
                let a = layer.ln1.apply(&x);
                let q = layer.self_attn.q.forward(&a.view());
                let k = layer.self_attn.k.forward(&a.view());
                let v = layer.self_attn.v.forward(&a.view());
                let mut ctx = Array2::<T>::zeros((na, d));
                for (r, &i) in active.iter().enumerate() {
                    self_k[l][i].row_mut(t).assign(&k.row(r));
                    self_v[l][i].row_mut(t).assign(&v.row(r));
                    for h in 0..heads {
                        let cols = h * dk..(h + 1) * dk;
                        let keys = self_k[l][i].slice(s![0..=t, cols.clone()]);
                        let vals = self_v[l][i].slice(s![0..=t, cols.clone()]);
                        let mut w = keys.dot(&q.slice(s![r, cols.clone()]));
                        w *= scale;
                        softmax_vec(&mut w);
                        ctx.slice_mut(s![r, cols]).assign(&vals.t().dot(&w));
                    }
                }
                x += &layer.self_attn.o.forward(&ctx.view());

                let b = layer.ln2.apply(&x);
                let qc = layer.cross.q.forward(&b.view());
                let (kc, vc) = &cross_kv[l];
                let mut ctx = Array2::<T>::zeros((na, d));
                for (r, &i) in active.iter().enumerate() {
                    let sr = src_segs.range(i);
                    for h in 0..heads {
                        if flags.cross[l][h] {
                            if capture {
                                cross_rows[i][l * heads + h].push(vec![0.0; sr.len()]);
                            }
                            continue;
                        }
                        let cols = h * dk..(h + 1) * dk;
                        let keys = kc.slice(s![sr.clone(), cols.clone()]);
                        let vals = vc.slice(s![sr.clone(), cols.clone()]);
                        let mut w = keys.dot(&qc.slice(s![r, cols.clone()]));
                        w *= scale;
                        softmax_vec(&mut w);
                        ctx.slice_mut(s![r, cols]).assign(&vals.t().dot(&w));
                        if capture {
                            cross_rows[i][l * heads + h].push(w.iter().map(|v| v.as_f64()).collect());
                        }
                    }
                }
                x += &layer.cross.o.forward(&ctx.view());

                let c = layer.ln3.apply(&x);
                x += &layer.ffn.forward(c).0;
            }
            let logits = p.out.forward(&p.dec_norm.apply(&x).view());
            let mut still = Vec::with_capacity(na);
            for (r, &i) in active.iter().enumerate() {
                let tok = argmax(logits.row(r));
                last[i] = tok;
                if tok != EOS {
                    outputs[i].push(tok);
                    if t + 1 < max_steps {
                        still.push(i);
                    }
                }
            }
            active = still;
        }

        let mut result = Vec::with_capacity(n);
        for (i, (&sid, tokens)) in ids.iter().zip(outputs).enumerate() {
            let captures = capture.then(|| {
                let src_len = src_segs.range(i).len();
                let mut encc = AttentionCapture::new(
                    sid,
                    pair,
                    AttnType::EncSelf,
                    cfg.enc_layers,
                    heads,
                    src_len,
                    src_len,
                );
                for (l, lc) in enc.layers.iter().enumerate() {
                    for h in 0..heads {
                        match &lc.attn.probs[i * heads + h] {
                            Some(a) => {
                                let data = a.iter().map(|v| v.as_f64()).collect();
                                let m = AttentionMatrix::new(src_len, src_len, data)
                                    .expect("square attention block");
                                encc.set(l, h, m, false);
                            }
                            None => encc.set(l, h, AttentionMatrix::zeros(src_len, src_len), true),
                        }
                    }
                }
                let rows = &mut cross_rows[i];
                let tgt_len = rows.first().map_or(0, Vec::len);
                let mut crossc = AttentionCapture::new(
                    sid,
                    pair,
                    AttnType::Cross,
                    cfg.dec_layers,
                    heads,
                    tgt_len,
                    src_len,
                );
                for l in 0..cfg.dec_layers {
                    for h in 0..heads {
                        let r = std::mem::take(&mut rows[l * heads + h]);
                        let m = AttentionMatrix::from_rows(&r).expect("fixed-width rows");
                        crossc.set(l, h, m, flags.cross[l][h]);
                    }
                }
                [encc, crossc]
            });
            result.push(Decoded {
                sid,
                tokens,
                captures,
            });
        }
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::validate_capture;
    use crate::heads::HeadId;
    use crate::nmt::config::ModelConfig;
    use crate::nmt::model::Batch;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 20,
            d_model: 8,
            heads: 2,
            enc_layers: 2,
            dec_layers: 2,
            ffn: 16,
            max_len: 8,
            seed: 5,
        }
    }

    fn sources() -> Vec<Vec<Token>> {
        vec![
            vec![3, 11, 12, 13, 2],
            vec![4, 19, 2],
            vec![3, 15, 16, 17, 18, 11, 2],
        ]
    }

    #[test]
    fn greedy_matches_teacher_forcing() {
        let m = Model::<f64>::new(tiny()).unwrap();
        let srcs = sources();
        let out = m.translate("x", &srcs, &HeadMask::empty(), true).unwrap();
        for (sid, hyp) in out.hypotheses.iter().enumerate() {
            let hyp = hyp.as_ref().unwrap();
            let batch = Batch::new([(srcs[sid].as_slice(), hyp.as_slice())]);
            let probs = m.teacher_forced_probs(&batch, &HeadMask::empty()).unwrap();
            // every emitted token is the argmax of the teacher-forced step
            for (pos, &tok) in hyp.iter().enumerate() {
                assert_eq!(argmax(probs.row(pos)), tok, "sentence {sid} pos {pos}");
            }
            if hyp.len() + 1 < m.config.max_len {
                assert_eq!(argmax(probs.row(hyp.len())), EOS);
            }
        }
    }

    #[test]
    fn captures_are_valid_and_masked_heads_zeroed() {
        let m = Model::<f64>::new(tiny()).unwrap();
        let layout = m.config.layout();
        let mask = HeadMask::from_iter([HeadId::enc(0, 1), HeadId::cross(1, 0)]);
        let out = m.translate("x", &sources(), &mask, true).unwrap();
        assert_eq!(out.captures.len(), 6);
        for cap in &out.captures {
            assert!(validate_capture(cap, &layout).is_empty(), "{:?}", validate_capture(cap, &layout));
        }
        let enc0 = &out.captures[0];
        assert!(enc0.slot(0, 1).unwrap().masked);
        assert!(enc0.slot(0, 1).unwrap().matrix.is_zero());
        let cross0 = &out.captures[1];
        assert_eq!(cross0.attn, AttnType::Cross);
        assert!(cross0.slot(1, 0).unwrap().masked);
        // one row per decoding step: the emitted tokens plus EOS unless the step limit hit first
        let steps = (out.hypotheses[0].as_ref().unwrap().len() + 1).min(m.config.max_len - 1);
        assert_eq!(cross0.query_len, steps);
        assert_eq!(cross0.key_len, 5);
    }

    #[test]
    fn empty_mask_is_deterministic() {
        let m = Model::<f32>::new(tiny()).unwrap();
        let a = m.translate("x", &sources(), &HeadMask::empty(), false).unwrap();
        let b = m.translate("x", &sources(), &HeadMask::empty(), false).unwrap();
        assert_eq!(a, b);
        assert!(a.captures.is_empty());
    }

    #[test]
    fn all_heads_masked_still_terminates() {
        let m = Model::<f32>::new(tiny()).unwrap();
        let mask: HeadMask = crate::heads::head_universe(&m.config.layout()).into_iter().collect();
        let out = m.translate("x", &sources(), &mask, true).unwrap();
        for h in out.hypotheses.iter() {
            let h = h.as_ref().unwrap();
            assert!(h.len() < m.config.max_len);
            assert!(h.iter().all(|&t| (t as usize) < m.config.vocab_size));
        }
    }

    #[test]
    fn overlong_source_is_skipped_not_fatal() {
        let m = Model::<f32>::new(tiny()).unwrap();
        let mut srcs = sources();
        srcs.insert(1, vec![3; 9]);
        let out = m.translate("x", &srcs, &HeadMask::empty(), false).unwrap();
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].sid, 1);
        assert!(out.hypotheses[1].is_none());
        assert!(out.hypotheses[0].is_some() && out.hypotheses[2].is_some());
    }

    #[test]
    fn invalid_mask_is_an_error() {
        let m = Model::<f32>::new(tiny()).unwrap();
        let mask = HeadMask::from_iter([HeadId::cross(2, 0)]);
        assert!(m.translate("x", &sources(), &mask, false).is_err());
    }
}
