//! Pre-norm transformer encoder-decoder: parameters, teacher-forced forward
//! pass and its backward pass.

use std::collections::BTreeMap;

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::data::{BOS, EOS};
use super::layers::{
    embedding, sinusoidal, AttnCache, AttnInput, Attention, FeedForward, FfnCache, LayerNorm,
    Linear, LnCache, Real, Segments,
};
use crate::corpus::Token;
use crate::error::{Error, Result};
use crate::heads::{AttnType, HeadId, HeadMask};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<T> {
    pub ln1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub ln2: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer<T> {
    pub ln1: LayerNorm<T>,
    pub self_attn: Attention<T>,
    pub ln2: LayerNorm<T>,
    pub cross: Attention<T>,
    pub ln3: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}

/// Every trainable tensor of the model. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub src_emb: Array2<T>,
    pub tgt_emb: Array2<T>,
    pub enc: Vec<EncoderLayer<T>>,
    pub enc_norm: LayerNorm<T>,
    pub dec: Vec<DecoderLayer<T>>,
    pub dec_norm: LayerNorm<T>,
    pub out: Linear<T>,
}

/// A named parameter tensor, flattened row-major.
pub struct ParamRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

/// Walks the tensors of a component in canonical order.
trait Visit<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>);
    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [T]>);
}

fn push_tensor<'a, T, D: ndarray::Dimension>(
    out: &mut Vec<ParamRef<'a, T>>,
    name: String,
    a: &'a ndarray::Array<T, D>,
) {
    out.push(ParamRef {
        name,
        shape: a.shape().to_vec(),
        data: a.as_slice().expect("standard layout"),
    });
}

impl<T> Visit<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        push_tensor(out, format!("{prefix}.w"), &self.w);
        push_tensor(out, format!("{prefix}.b"), &self.b);
    }
    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [T]>) {
        out.push(self.w.as_slice_mut().expect("standard layout"));
        out.push(self.b.as_slice_mut().expect("standard layout"));
    }
}

impl<T> Visit<T> for LayerNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        push_tensor(out, format!("{prefix}.gamma"), &self.gamma);
        push_tensor(out, format!("{prefix}.beta"), &self.beta);
    }
    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [T]>) {
        out.push(self.gamma.as_slice_mut().expect("standard layout"));
        out.push(self.beta.as_slice_mut().expect("standard layout"));
    }
}

impl<T> Visit<T> for Attention<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.q.visit(&format!("{prefix}.q"), out);
        self.k.visit(&format!("{prefix}.k"), out);
        self.v.visit(&format!("{prefix}.v"), out);
        self.o.visit(&format!("{prefix}.o"), out);
    }
    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [T]>) {
        self.q.visit_mut(out);
        self.k.visit_mut(out);
        self.v.visit_mut(out);
        self.o.visit_mut(out);
    }
}

impl<T> Visit<T> for FeedForward<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.up.visit(&format!("{prefix}.up"), out);
        self.down.visit(&format!("{prefix}.down"), out);
    }
    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [T]>) {
        self.up.visit_mut(out);
        self.down.visit_mut(out);
    }
}

impl<T> Visit<T> for EncoderLayer<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.ln1.visit(&format!("{prefix}.ln1"), out);
        self.attn.visit(&format!("{prefix}.attn"), out);
        self.ln2.visit(&format!("{prefix}.ln2"), out);
        self.ffn.visit(&format!("{prefix}.ffn"), out);
    }
    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [T]>) {
        self.ln1.visit_mut(out);
        self.attn.visit_mut(out);
        self.ln2.visit_mut(out);
        self.ffn.visit_mut(out);
    }
}

impl<T> Visit<T> for DecoderLayer<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.ln1.visit(&format!("{prefix}.ln1"), out);
        self.self_attn.visit(&format!("{prefix}.self_attn"), out);
        self.ln2.visit(&format!("{prefix}.ln2"), out);
        self.cross.visit(&format!("{prefix}.cross"), out);
        self.ln3.visit(&format!("{prefix}.ln3"), out);
        self.ffn.visit(&format!("{prefix}.ffn"), out);
    }
    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [T]>) {
        self.ln1.visit_mut(out);
        self.self_attn.visit_mut(out);
        self.ln2.visit_mut(out);
        self.cross.visit_mut(out);
        self.ln3.visit_mut(out);
        self.ffn.visit_mut(out);
    }
}

impl<T: Real> Params<T> {
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let src_emb = embedding(&mut rng, cfg.vocab_size, d);
        let tgt_emb = embedding(&mut rng, cfg.vocab_size, d);
        let enc = (0..cfg.enc_layers)
            .map(|_| EncoderLayer {
                ln1: LayerNorm::new(d),
                attn: Attention::init(&mut rng, d),
                ln2: LayerNorm::new(d),
                ffn: FeedForward::init(&mut rng, d, cfg.ffn),
            })
            .collect();
        let dec = (0..cfg.dec_layers)
            .map(|_| DecoderLayer {
                ln1: LayerNorm::new(d),
                self_attn: Attention::init(&mut rng, d),
                ln2: LayerNorm::new(d),
                cross: Attention::init(&mut rng, d),
                ln3: LayerNorm::new(d),
                ffn: FeedForward::init(&mut rng, d, cfg.ffn),
            })
            .collect();
        Self {
            src_emb,
            tgt_emb,
            enc,
            enc_norm: LayerNorm::new(d),
            dec,
            dec_norm: LayerNorm::new(d),
            out: Linear::init(&mut rng, d, cfg.vocab_size),
        }
    }

    /// Named tensors in canonical order.
    pub fn tensors(&self) -> Vec<ParamRef<'_, T>> {
        let mut out = Vec::new();
        push_tensor(&mut out, "src_emb".into(), &self.src_emb);
        push_tensor(&mut out, "tgt_emb".into(), &self.tgt_emb);
        for (i, l) in self.enc.iter().enumerate() {
            l.visit(&format!("enc.{i}"), &mut out);
        }
        self.enc_norm.visit("enc_norm", &mut out);
        for (i, l) in self.dec.iter().enumerate() {
            l.visit(&format!("dec.{i}"), &mut out);
        }
        self.dec_norm.visit("dec_norm", &mut out);
        self.out.visit("out", &mut out);
        out
    }

    /// Mutable tensors in the same order as [`Params::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        out.push(self.src_emb.as_slice_mut().expect("standard layout"));
        out.push(self.tgt_emb.as_slice_mut().expect("standard layout"));
        for l in &mut self.enc {
            l.visit_mut(&mut out);
        }
        self.enc_norm.visit_mut(&mut out);
        for l in &mut self.dec {
            l.visit_mut(&mut out);
        }
        self.dec_norm.visit_mut(&mut out);
        self.out.visit_mut(&mut out);
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(T::zero());
        }
        z
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn flatten(&self) -> Vec<T> {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter().copied())
            .collect()
    }

    /// Overwrites every parameter from a flat vector in canonical order.
    pub fn load_flat(&mut self, flat: &[T]) -> Result<()> {
        let total = self.num_params();
        if flat.len() != total {
            return Err(Error::LengthMismatch(format!(
                "expected {total} parameters, got {}",
                flat.len()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.iter_mut().zip(b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.tensors_mut() {
            for x in t {
                *x *= factor;
            }
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|&x| x.as_f64() * x.as_f64())
            .sum()
    }
}

/// Per-layer head mask flags derived from a [`HeadMask`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskFlags {
    pub enc: Vec<Vec<bool>>,
    pub cross: Vec<Vec<bool>>,
}

impl MaskFlags {
    pub fn new(cfg: &ModelConfig, mask: &HeadMask) -> Result<Self> {
        mask.validate(&cfg.layout())?;
        let mut enc = vec![vec![false; cfg.heads]; cfg.enc_layers];
        let mut cross = vec![vec![false; cfg.heads]; cfg.dec_layers];
        for id in mask {
            match id.attn {
                AttnType::EncSelf => enc[id.layer][id.head] = true,
                AttnType::Cross => cross[id.layer][id.head] = true,
            }
        }
        Ok(Self { enc, cross })
    }
}

/// Sentences packed for teacher-forced training.
#[derive(Debug, Clone)]
pub struct Batch {
    pub src: Vec<Token>,
    pub src_segs: Segments,
    /// Decoder inputs: BOS followed by the reference.
    pub tgt_in: Vec<Token>,
    /// Decoder targets: the reference followed by EOS.
    pub tgt_out: Vec<Token>,
    pub tgt_segs: Segments,
}

impl Batch {
    /// `pairs` holds (encoded source, reference) tuples.
    pub fn new<'a>(pairs: impl IntoIterator<Item = (&'a [Token], &'a [Token])>) -> Self {
        let mut src = Vec::new();
        let mut tgt_in = Vec::new();
        let mut tgt_out = Vec::new();
        let mut src_lens = Vec::new();
        let mut tgt_lens = Vec::new();
        for (s, r) in pairs {
            src.extend_from_slice(s);
            src_lens.push(s.len());
            tgt_in.push(BOS);
            tgt_in.extend_from_slice(r);
            tgt_out.extend_from_slice(r);
            tgt_out.push(EOS);
            tgt_lens.push(r.len() + 1);
        }
        Self {
            src,
            src_segs: Segments::from_lengths(src_lens),
            tgt_in,
            tgt_out,
            tgt_segs: Segments::from_lengths(tgt_lens),
        }
    }

    pub fn len(&self) -> usize {
        self.src_segs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src_segs.is_empty()
    }

    pub fn target_tokens(&self) -> usize {
        self.tgt_out.len()
    }
}

pub(crate) struct EncLayerCache<T> {
    ln1: LnCache<T>,
    pub(crate) attn: AttnCache<T>,
    ln2: LnCache<T>,
    ffn: FfnCache<T>,
}

pub(crate) struct DecLayerCache<T> {
    ln1: LnCache<T>,
    self_attn: AttnCache<T>,
    ln2: LnCache<T>,
    pub(crate) cross: AttnCache<T>,
    ln3: LnCache<T>,
    ffn: FfnCache<T>,
}

pub(crate) struct EncoderOutput<T> {
    pub(crate) memory: Array2<T>,
    pub(crate) layers: Vec<EncLayerCache<T>>,
    norm: LnCache<T>,
}

pub(crate) struct ForwardCache<T> {
    pub(crate) enc: EncoderOutput<T>,
    pub(crate) dec: Vec<DecLayerCache<T>>,
    dec_norm: LnCache<T>,
    dec_final: Array2<T>,
    /// Softmax probabilities of the output layer.
    probs: Array2<T>,
}

/// A model ready for training or inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: Params<T>,
    pub(crate) positions: Array2<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config);
        Ok(Self::from_params(config, params))
    }

    pub fn from_params(config: ModelConfig, params: Params<T>) -> Self {
        let positions = sinusoidal(config.max_len, config.d_model);
        Self {
            config,
            params,
            positions,
        }
    }

    /// Same weights in a different float type.
    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut params = Params::<U>::init(&self.config);
        for (dst, src) in params.tensors_mut().into_iter().zip(self.params.tensors()) {
            for (d, &s) in dst.iter_mut().zip(src.data) {
                *d = U::lit(s.as_f64());
            }
        }
        Model::from_params(self.config.clone(), params)
    }

    pub(crate) fn embed(
        &self,
        table: &Array2<T>,
        tokens: &[Token],
        segs: &Segments,
    ) -> Array2<T> {
        let d = self.config.d_model;
        let scale = T::lit((d as f64).sqrt());
        let mut x = Array2::zeros((tokens.len(), d));
        for seg in 0..segs.len() {
            for (pos, row) in segs.range(seg).enumerate() {
                let mut dst = x.row_mut(row);
                dst.assign(&table.row(tokens[row] as usize));
                dst *= scale;
                dst += &self.positions.row(pos);
            }
        }
        x
    }

    pub(crate) fn encode(
        &self,
        src: &[Token],
        segs: &Segments,
        flags: &MaskFlags,
    ) -> EncoderOutput<T> {
        let mut x = self.embed(&self.params.src_emb, src, segs);
        let mut layers = Vec::with_capacity(self.params.enc.len());
        for (l, layer) in self.params.enc.iter().enumerate() {
            let (a, ln1) = layer.ln1.forward(&x);
            let (att, attn) = layer.attn.forward(AttnInput {
                q_in: a,
                kv_in: None,
                q_segs: segs,
                k_segs: segs,
                causal: false,
                masked: &flags.enc[l],
            });
            x += &att;
            let (b, ln2) = layer.ln2.forward(&x);
            let (f, ffn) = layer.ffn.forward(b);
            x += &f;
            layers.push(EncLayerCache {
                ln1,
                attn,
                ln2,
                ffn,
            });
        }
        let (memory, norm) = self.params.enc_norm.forward(&x);
        EncoderOutput {
            memory,
            layers,
            norm,
        }
    }

    pub(crate) fn forward(&self, batch: &Batch, flags: &MaskFlags) -> ForwardCache<T> {
        let enc = self.encode(&batch.src, &batch.src_segs, flags);
        let mut x = self.embed(&self.params.tgt_emb, &batch.tgt_in, &batch.tgt_segs);
        let no_mask = vec![false; self.config.heads];
        let mut dec = Vec::with_capacity(self.params.dec.len());
        for (l, layer) in self.params.dec.iter().enumerate() {
            let (a, ln1) = layer.ln1.forward(&x);
            let (att, self_attn) = layer.self_attn.forward(AttnInput {
                q_in: a,
                kv_in: None,
                q_segs: &batch.tgt_segs,
                k_segs: &batch.tgt_segs,
                causal: true,
                masked: &no_mask,
            });
            x += &att;
            let (b, ln2) = layer.ln2.forward(&x);
            let (crs, cross) = layer.cross.forward(AttnInput {
                q_in: b,
                kv_in: Some(enc.memory.clone()),
                q_segs: &batch.tgt_segs,
                k_segs: &batch.src_segs,
                causal: false,
                masked: &flags.cross[l],
            });
            x += &crs;
            let (c, ln3) = layer.ln3.forward(&x);
            let (f, ffn) = layer.ffn.forward(c);
            x += &f;
            dec.push(DecLayerCache {
                ln1,
                self_attn,
                ln2,
                cross,
                ln3,
                ffn,
            });
        }
        let (dec_final, dec_norm) = self.params.dec_norm.forward(&x);
        let mut probs = self.params.out.forward(&dec_final.view());
        super::layers::softmax_rows(&mut probs);
        ForwardCache {
            enc,
            dec,
            dec_norm,
            dec_final,
            probs,
        }
    }

    /// Summed token cross-entropy of a batch (f64 accumulation).
    pub fn loss(&self, batch: &Batch, mask: &HeadMask) -> Result<f64> {
        let flags = MaskFlags::new(&self.config, mask)?;
        let cache = self.forward(batch, &flags);
        Ok(token_nll(&cache.probs, &batch.tgt_out))
    }

    /// Summed loss and its gradient over the batch.
    pub fn loss_and_grad(&self, batch: &Batch, mask: &HeadMask) -> Result<(f64, Params<T>)> {
        let flags = MaskFlags::new(&self.config, mask)?;
        let cache = self.forward(batch, &flags);
        let loss = token_nll(&cache.probs, &batch.tgt_out);
        let grad = self.backward(batch, &cache);
        Ok((loss, grad))
    }

    fn backward(&self, batch: &Batch, cache: &ForwardCache<T>) -> Params<T> {
        let p = &self.params;
        let mut g = p.zeros_like();
        let scale = T::lit((self.config.d_model as f64).sqrt());

        let mut dlogits = cache.probs.clone();
        for (row, &t) in batch.tgt_out.iter().enumerate() {
            dlogits[[row, t as usize]] -= T::one();
        }
        let dfinal = p.out.backward(&cache.dec_final.view(), &dlogits, &mut g.out);
        let mut dx = p.dec_norm.backward(&cache.dec_norm, &dfinal, &mut g.dec_norm);
        let mut dmem = Array2::<T>::zeros(cache.enc.memory.raw_dim());

        for l in (0..p.dec.len()).rev() {
            let layer = &p.dec[l];
            let lc = &cache.dec[l];
            let gl = &mut g.dec[l];
            let dc = layer.ffn.backward(&lc.ffn, &dx, &mut gl.ffn);
            dx += &layer.ln3.backward(&lc.ln3, &dc, &mut gl.ln3);
            let (db, dm) =
                layer
                    .cross
                    .backward(&lc.cross, &dx, &batch.tgt_segs, &batch.src_segs, &mut gl.cross);
            dmem += &dm.expect("cross attention has a separate key input");
            dx += &layer.ln2.backward(&lc.ln2, &db, &mut gl.ln2);
            let (da, _) = layer.self_attn.backward(
                &lc.self_attn,
                &dx,
                &batch.tgt_segs,
                &batch.tgt_segs,
                &mut gl.self_attn,
            );
            dx += &layer.ln1.backward(&lc.ln1, &da, &mut gl.ln1);
        }
        for (row, &t) in batch.tgt_in.iter().enumerate() {
            let mut dst = g.tgt_emb.row_mut(t as usize);
            dst.scaled_add(scale, &dx.row(row));
        }

        let mut dx = p.enc_norm.backward(&cache.enc.norm, &dmem, &mut g.enc_norm);
        for l in (0..p.enc.len()).rev() {
            let layer = &p.enc[l];
            let lc = &cache.enc.layers[l];
            let gl = &mut g.enc[l];
            let db = layer.ffn.backward(&lc.ffn, &dx, &mut gl.ffn);
            dx += &layer.ln2.backward(&lc.ln2, &db, &mut gl.ln2);
            let (da, _) =
                layer
                    .attn
                    .backward(&lc.attn, &dx, &batch.src_segs, &batch.src_segs, &mut gl.attn);
            dx += &layer.ln1.backward(&lc.ln1, &da, &mut gl.ln1);
        }
        for (row, &t) in batch.src.iter().enumerate() {
            let mut dst = g.src_emb.row_mut(t as usize);
            dst.scaled_add(scale, &dx.row(row));
        }
        g
    }

    /// L2 norm of every analysed head's context vector over a teacher-forced
    /// batch; masked heads come out as exactly zero.
    pub fn head_context_norms(&self, batch: &Batch, mask: &HeadMask) -> Result<BTreeMap<HeadId, f64>> {
        let flags = MaskFlags::new(&self.config, mask)?;
        let cache = self.forward(batch, &flags);
        let dk = self.config.head_dim();
        let mut out = BTreeMap::new();
        let mut collect = |attn: AttnType, l: usize, ctx: &Array2<T>| {
            for h in 0..self.config.heads {
                let n: f64 = ctx
                    .slice(s![.., h * dk..(h + 1) * dk])
                    .iter()
                    .map(|v| v.as_f64() * v.as_f64())
                    .sum();
                out.insert(HeadId::new(attn, l, h), n.sqrt());
            }
        };
        for (l, lc) in cache.enc.layers.iter().enumerate() {
            collect(AttnType::EncSelf, l, lc.attn.context());
        }
        for (l, lc) in cache.dec.iter().enumerate() {
            collect(AttnType::Cross, l, lc.cross.context());
        }
        Ok(out)
    }

    /// Teacher-forced output distributions, one row per target position.
    pub fn teacher_forced_probs(&self, batch: &Batch, mask: &HeadMask) -> Result<Array2<T>> {
        let flags = MaskFlags::new(&self.config, mask)?;
        Ok(self.forward(batch, &flags).probs)
    }
}

fn token_nll<T: Real>(probs: &Array2<T>, targets: &[Token]) -> f64 {
    targets
        .iter()
        .enumerate()
        .map(|(row, &t)| {
            let p = probs[[row, t as usize]].as_f64();
            // NaN must survive the clamp so divergence is detected
            if p.is_nan() {
                p
            } else {
                -p.max(f64::MIN_POSITIVE).ln()
            }
        })
        .sum()
}
