use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Conditioning, ModelConfig};
use crate::data::vocab::{BOS_ID, EOS_ID, PAD_ID};
use crate::error::{Error, Result};
use crate::tensor::{AttentionLayout, Graph, NodeId, ParamId, ParamStore, Tensor};

const LN_EPS: f64 = 1e-5;

/// Name of the intervention table parameter.
pub const INTERVENTION_PARAM: &str = "intervention";

#[derive(Clone, Debug)]
struct AttnIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Clone, Debug)]
struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct LnIds {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct EncLayer {
    ln1: LnIds,
    attn: AttnIds,
    ln2: LnIds,
    ffn: FfnIds,
}

#[derive(Clone, Debug)]
struct DecLayer {
    ln1: LnIds,
    self_attn: AttnIds,
    ln2: LnIds,
    cross: AttnIds,
    ln3: LnIds,
    ffn: FfnIds,
}

#[derive(Clone, Debug)]
struct Layout {
    src_emb: ParamId,
    tgt_emb: ParamId,
    enc: Vec<EncLayer>,
    enc_ln: LnIds,
    dec: Vec<DecLayer>,
    dec_ln: LnIds,
    out_w: ParamId,
    out_b: ParamId,
    intervention: Option<ParamId>,
}

/// Source ids, target ids and an optional domain index, already mapped
/// through the vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedExample {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
    pub label: Option<usize>,
}

/// A padded teacher-forcing batch with labels already resolved for the
/// model's conditioning mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Encoder inputs, tag included when the mode prepends one.
    pub src: Vec<Vec<u32>>,
    /// Domain index whose intervention row is added, per example.
    pub interventions: Vec<Option<usize>>,
    /// `[bos] + target`.
    pub tgt_in: Vec<Vec<u32>>,
    /// `target + [eos]`.
    pub tgt_out: Vec<Vec<u32>>,
}

/// Encoder output for a padded batch.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub h: NodeId,
    pub batch: usize,
    pub len: usize,
    pub key_valid: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct TransformerModel {
    config: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
    positions: Vec<f64>,
}

/// `[tag] + src` when a label is given, `src` otherwise.
pub fn prepend_tag(src: &[u32], label: Option<usize>, config: &ModelConfig) -> Result<Vec<u32>> {
    let out = match label {
        None => src.to_vec(),
        Some(i) if i < config.num_domains => {
            let mut v = Vec::with_capacity(src.len() + 1);
            v.push(crate::data::vocab::tag_id(i));
            v.extend_from_slice(src);
            v
        }
        Some(i) => return Err(Error::UnknownLabel(format!("domain #{i}"))),
    };
    if out.len() > config.max_len {
        return Err(Error::SequenceTooLong {
            len: out.len(),
            max: config.max_len,
        });
    }
    Ok(out)
}

/// Replaces a label by pad (`None`) with probability `p`. Unlabeled examples
/// stay unlabeled and consume no randomness.
pub fn mask_label<R: Rng + ?Sized>(label: Option<usize>, p: f64, rng: &mut R) -> Option<usize> {
    let l = label?;
    if rng.gen::<f64>() < p {
        None
    } else {
        Some(l)
    }
}

fn sinusoids(max_len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in 0..d / 2 {
            let rate = (10000f64).powf(2.0 * i as f64 / d as f64);
            pe[pos * d + 2 * i] = (pos as f64 / rate).sin();
            pe[pos * d + 2 * i + 1] = (pos as f64 / rate).cos();
        }
        if d % 2 == 1 {
            pe[pos * d + d - 1] = 0.0;
        }
    }
    pe
}

struct Builder<F> {
    store: ParamStore,
    init: F,
    d: usize,
    ff: usize,
}

impl<F: FnMut(&str, &[usize]) -> Result<Tensor>> Builder<F> {
    fn add(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let t = (self.init)(name, shape)?;
        Ok(self.store.add(name, t))
    }

    fn ln(&mut self, p: &str) -> Result<LnIds> {
        Ok(LnIds {
            gain: self.add(&format!("{p}.gain"), &[self.d])?,
            bias: self.add(&format!("{p}.bias"), &[self.d])?,
        })
    }

    fn attn(&mut self, p: &str) -> Result<AttnIds> {
        let d = self.d;
        Ok(AttnIds {
            wq: self.add(&format!("{p}.wq"), &[d, d])?,
            bq: self.add(&format!("{p}.bq"), &[d])?,
            wk: self.add(&format!("{p}.wk"), &[d, d])?,
            bk: self.add(&format!("{p}.bk"), &[d])?,
            wv: self.add(&format!("{p}.wv"), &[d, d])?,
            bv: self.add(&format!("{p}.bv"), &[d])?,
            wo: self.add(&format!("{p}.wo"), &[d, d])?,
            bo: self.add(&format!("{p}.bo"), &[d])?,
        })
    }

    fn ffn(&mut self, p: &str) -> Result<FfnIds> {
        let (d, ff) = (self.d, self.ff);
        Ok(FfnIds {
            w1: self.add(&format!("{p}.w1"), &[d, ff])?,
            b1: self.add(&format!("{p}.b1"), &[ff])?,
            w2: self.add(&format!("{p}.w2"), &[ff, d])?,
            b2: self.add(&format!("{p}.b2"), &[d])?,
        })
    }
}

impl TransformerModel {
    /// Randomly initialized model. Weight matrices are Xavier-uniform, token
    /// embeddings uniform with variance `1/d_model`, the pad embedding, biases
    /// and the whole intervention table zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        Self::build(config, |name, shape| {
            let n: usize = shape.iter().product();
            let data = if name.ends_with("emb") {
                let a = (3.0 / d as f64).sqrt();
                let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-a..a)).collect();
                v[PAD_ID as usize * d..(PAD_ID as usize + 1) * d].fill(0.0);
                v
            } else if name.ends_with(".gain") {
                vec![1.0; n]
            } else if shape.len() == 2 && name != INTERVENTION_PARAM {
                let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-a..a)).collect()
            } else {
                vec![0.0; n]
            };
            Tensor::new(shape.to_vec(), data)
        })
    }

    /// Rebuilds a model from a parameter store, checking names and shapes.
    pub fn from_params(config: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut it = store.iter();
        let model = Self::build(config, |name, shape| {
            let (_, p) = it
                .next()
                .ok_or_else(|| Error::format("parameters", format!("missing `{name}`")))?;
            if p.name != name || p.tensor.shape() != shape {
                return Err(Error::format(
                    "parameters",
                    format!("expected `{name}` {shape:?}, found `{}` {:?}", p.name, p.tensor.shape()),
                ));
            }
            Tensor::new(shape.to_vec(), p.tensor.data().to_vec())
        })?;
        if it.next().is_some() {
            return Err(Error::format("parameters", "unexpected extra parameters"));
        }
        if let Some(id) = model.layout.intervention {
            let d = model.config.d_model;
            if model.params.tensor(id).data()[..d].iter().any(|&x| x != 0.0) {
                return Err(Error::format("parameters", "intervention pad row is not zero"));
            }
        }
        Ok(model)
    }

    fn build<F>(config: ModelConfig, init: F) -> Result<Self>
    where
        F: FnMut(&str, &[usize]) -> Result<Tensor>,
    {
        let (d, ff, v) = (config.d_model, config.d_ff, config.vocab_size);
        let mut b = Builder {
            store: ParamStore::new(),
            init,
            d,
            ff,
        };
        let src_emb = b.add("src.emb", &[v, d])?;
        let tgt_emb = b.add("tgt.emb", &[v, d])?;
        let mut enc = Vec::with_capacity(config.enc_layers);
        for i in 0..config.enc_layers {
            let p = format!("enc.{i}");
            enc.push(EncLayer {
                ln1: b.ln(&format!("{p}.ln1"))?,
                attn: b.attn(&format!("{p}.attn"))?,
                ln2: b.ln(&format!("{p}.ln2"))?,
                ffn: b.ffn(&format!("{p}.ffn"))?,
            });
        }
        let enc_ln = b.ln("enc.ln")?;
        let mut dec = Vec::with_capacity(config.dec_layers);
        for i in 0..config.dec_layers {
            let p = format!("dec.{i}");
            dec.push(DecLayer {
                ln1: b.ln(&format!("{p}.ln1"))?,
                self_attn: b.attn(&format!("{p}.self"))?,
                ln2: b.ln(&format!("{p}.ln2"))?,
                cross: b.attn(&format!("{p}.cross"))?,
                ln3: b.ln(&format!("{p}.ln3"))?,
                ffn: b.ffn(&format!("{p}.ffn"))?,
            });
        }
        let dec_ln = b.ln("dec.ln")?;
        let out_w = b.add("out.w", &[d, v])?;
        let out_b = b.add("out.b", &[v])?;
        let intervention = match config.conditioning {
            Conditioning::AdditiveIntervention { .. } => {
                let id = b.add(INTERVENTION_PARAM, &[config.num_domains + 1, d])?;
                b.store.freeze_rows(id, vec![0]);
                Some(id)
            }
            _ => None,
        };
        let store = b.store;
        let positions = sinusoids(config.max_len, d);
        Ok(TransformerModel {
            config,
            params: store,
            layout: Layout {
                src_emb,
                tgt_emb,
                enc,
                enc_ln,
                dec,
                dec_ln,
                out_w,
                out_b,
                intervention,
            },
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// The intervention table (`|D| + 1` rows, pad row first), if any.
    pub fn intervention_table(&self) -> Option<&Tensor> {
        self.layout.intervention.map(|id| self.params.tensor(id))
    }

    /// Resolves labels for this model's mode and pads the batch. `mask_rng`
    /// enables training-time label masking in intervention mode.
    pub fn make_batch(&self, examples: &[&EncodedExample], mut mask_rng: Option<&mut ChaCha8Rng>) -> Result<Batch> {
        if examples.is_empty() {
            return Err(Error::Empty("batch has no examples".into()));
        }
        let mut batch = Batch {
            src: Vec::with_capacity(examples.len()),
            interventions: Vec::with_capacity(examples.len()),
            tgt_in: Vec::with_capacity(examples.len()),
            tgt_out: Vec::with_capacity(examples.len()),
        };
        for ex in examples {
            let (src, iv) = self.resolve_source(&ex.source, ex.label, mask_rng.as_deref_mut())?;
            if ex.target.len() + 1 > self.config.max_len {
                return Err(Error::SequenceTooLong {
                    len: ex.target.len() + 1,
                    max: self.config.max_len,
                });
            }
            let mut tin = Vec::with_capacity(ex.target.len() + 1);
            tin.push(BOS_ID);
            tin.extend_from_slice(&ex.target);
            let mut tout = ex.target.clone();
            tout.push(EOS_ID);
            batch.src.push(src);
            batch.interventions.push(iv);
            batch.tgt_in.push(tin);
            batch.tgt_out.push(tout);
        }
        Ok(batch)
    }

    /// Encoder input and intervention index for one source under `label`.
    pub fn resolve_source(
        &self,
        source: &[u32],
        label: Option<usize>,
        mask_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Vec<u32>, Option<usize>)> {
        if let Some(i) = label {
            if i >= self.config.num_domains {
                return Err(Error::UnknownLabel(format!("domain #{i}")));
            }
        }
        match self.config.conditioning {
            Conditioning::None => Ok((prepend_tag(source, None, &self.config)?, None)),
            Conditioning::TagPrefix => Ok((prepend_tag(source, label, &self.config)?, None)),
            Conditioning::AdditiveIntervention { mask_probability } => {
                let label = match mask_rng {
                    Some(rng) => mask_label(label, mask_probability, rng),
                    None => label,
                };
                Ok((prepend_tag(source, None, &self.config)?, label))
            }
        }
    }

    fn check_ids(&self, seqs: &[Vec<u32>]) -> Result<usize> {
        let mut max = 0;
        for s in seqs {
            if s.is_empty() {
                return Err(Error::Empty("empty encoder or decoder input".into()));
            }
            if s.len() > self.config.max_len {
                return Err(Error::SequenceTooLong {
                    len: s.len(),
                    max: self.config.max_len,
                });
            }
            if let Some(&id) = s.iter().find(|&&id| id as usize >= self.config.vocab_size) {
                return Err(Error::TokenOutOfRange {
                    id,
                    size: self.config.vocab_size,
                });
            }
            max = max.max(s.len());
        }
        Ok(max)
    }

    /// Scaled token embeddings plus positions, padded to the longest sequence.
    fn embed(
        &self,
        g: &mut Graph,
        table: ParamId,
        seqs: &[Vec<u32>],
        len: usize,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(NodeId, Vec<bool>)> {
        let d = self.config.d_model;
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut valid = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            for i in 0..len {
                ids.push(s.get(i).copied().unwrap_or(PAD_ID) as usize);
                valid.push(i < s.len());
            }
        }
        let mut pos = Vec::with_capacity(seqs.len() * len * d);
        for _ in seqs {
            pos.extend_from_slice(&self.positions[..len * d]);
        }
        let t = g.param(table);
        let e = g.embedding(t, &ids)?;
        let e = g.scale(e, (d as f64).sqrt());
        let p = g.constant(Tensor::new(vec![seqs.len() * len, d], pos)?);
        let x = g.add(e, p)?;
        let x = match rng {
            Some(r) => g.dropout(x, self.config.dropout, r),
            None => x,
        };
        Ok((x, valid))
    }

    fn layer_norm(&self, g: &mut Graph, x: NodeId, ln: LnIds) -> Result<NodeId> {
        let gain = g.param(ln.gain);
        let bias = g.param(ln.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }

    fn attention(
        &self,
        g: &mut Graph,
        x: NodeId,
        kv: NodeId,
        ids: &AttnIds,
        layout: AttentionLayout,
    ) -> Result<NodeId> {
        let p = |g: &mut Graph, id| g.param(id);
        let (wq, bq, wk, bk) = (p(g, ids.wq), p(g, ids.bq), p(g, ids.wk), p(g, ids.bk));
        let (wv, bv, wo, bo) = (p(g, ids.wv), p(g, ids.bv), p(g, ids.wo), p(g, ids.bo));
        let q = g.linear(x, wq, Some(bq))?;
        let k = g.linear(kv, wk, Some(bk))?;
        let v = g.linear(kv, wv, Some(bv))?;
        let a = g.attention(q, k, v, layout)?;
        g.linear(a, wo, Some(bo))
    }

    fn ffn(&self, g: &mut Graph, x: NodeId, ids: &FfnIds) -> Result<NodeId> {
        let (w1, b1, w2, b2) = (g.param(ids.w1), g.param(ids.b1), g.param(ids.w2), g.param(ids.b2));
        let h = g.linear(x, w1, Some(b1))?;
        let h = g.relu(h);
        g.linear(h, w2, Some(b2))
    }

    fn residual(&self, g: &mut Graph, x: NodeId, branch: NodeId, rng: &mut Option<&mut ChaCha8Rng>) -> Result<NodeId> {
        let b = match rng {
            Some(r) => g.dropout(branch, self.config.dropout, *r),
            None => branch,
        };
        g.add(x, b)
    }

    /// Runs the encoder stack and final normalization. `rng` enables dropout.
    pub fn encode(&self, g: &mut Graph, src: &[Vec<u32>], mut rng: Option<&mut ChaCha8Rng>) -> Result<Encoded> {
        let len = self.check_ids(src)?;
        let batch = src.len();
        let (mut x, key_valid) = self.embed(g, self.layout.src_emb, src, len, rng.as_deref_mut())?;
        for layer in &self.layout.enc {
            let h = self.layer_norm(g, x, layer.ln1)?;
            let layout = AttentionLayout {
                batch,
                q_len: len,
                k_len: len,
                heads: self.config.heads,
                key_valid: key_valid.clone(),
                causal: false,
            };
            let a = self.attention(g, h, h, &layer.attn, layout)?;
            x = self.residual(g, x, a, &mut rng)?;
            let h = self.layer_norm(g, x, layer.ln2)?;
            let f = self.ffn(g, h, &layer.ffn)?;
            x = self.residual(g, x, f, &mut rng)?;
        }
        let h = self.layer_norm(g, x, self.layout.enc_ln)?;
        Ok(Encoded {
            h,
            batch,
            len,
            key_valid,
        })
    }

    /// Adds the intervention row of each example's domain to all of that
    /// example's encoder rows. `None` (pad) leaves the rows untouched.
    pub fn apply_intervention(&self, g: &mut Graph, enc: &Encoded, labels: &[Option<usize>]) -> Result<Encoded> {
        let Some(table) = self.layout.intervention else {
            return Err(Error::Config("model has no intervention table".into()));
        };
        if labels.len() != enc.batch {
            return Err(Error::Shape(format!(
                "{} labels for a batch of {}",
                labels.len(),
                enc.batch
            )));
        }
        let mut rows = Vec::with_capacity(enc.batch * enc.len);
        for l in labels {
            let row = match *l {
                Some(i) if i < self.config.num_domains => Some(i + 1),
                Some(i) => return Err(Error::UnknownLabel(format!("domain #{i}"))),
                None => None,
            };
            rows.extend(std::iter::repeat_n(row, enc.len));
        }
        let t = g.param(table);
        let h = g.add_rows(enc.h, t, &rows)?;
        Ok(Encoded { h, ..enc.clone() })
    }

    /// Decoder logits `[batch * tgt_len, vocab]` for teacher-forced inputs.
    pub fn decode(
        &self,
        g: &mut Graph,
        memory: &Encoded,
        tgt_in: &[Vec<u32>],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let len = self.check_ids(tgt_in)?;
        let batch = tgt_in.len();
        if batch != memory.batch {
            return Err(Error::Shape(format!(
                "decoder batch {batch} vs encoder batch {}",
                memory.batch
            )));
        }
        let (mut x, valid) = self.embed(g, self.layout.tgt_emb, tgt_in, len, rng.as_deref_mut())?;
        for layer in &self.layout.dec {
            let h = self.layer_norm(g, x, layer.ln1)?;
            let layout = AttentionLayout {
                batch,
                q_len: len,
                k_len: len,
                heads: self.config.heads,
                key_valid: valid.clone(),
                causal: true,
            };
            let a = self.attention(g, h, h, &layer.self_attn, layout)?;
            x = self.residual(g, x, a, &mut rng)?;
            let h = self.layer_norm(g, x, layer.ln2)?;
            let layout = AttentionLayout {
                batch,
                q_len: len,
                k_len: memory.len,
                heads: self.config.heads,
                key_valid: memory.key_valid.clone(),
                causal: false,
            };
            let c = self.attention(g, h, memory.h, &layer.cross, layout)?;
            x = self.residual(g, x, c, &mut rng)?;
            let h = self.layer_norm(g, x, layer.ln3)?;
            let f = self.ffn(g, h, &layer.ffn)?;
            x = self.residual(g, x, f, &mut rng)?;
        }
        let h = self.layer_norm(g, x, self.layout.dec_ln)?;
        let (w, b) = (g.param(self.layout.out_w), g.param(self.layout.out_b));
        g.linear(h, w, Some(b))
    }

    /// Encoder output for a prepared batch, intervention applied in ints mode.
    pub fn encode_batch(
        &self,
        g: &mut Graph,
        src: &[Vec<u32>],
        interventions: &[Option<usize>],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Encoded> {
        let enc = self.encode(g, src, rng)?;
        if self.layout.intervention.is_some() {
            self.apply_intervention(g, &enc, interventions)
        } else {
            Ok(enc)
        }
    }

    /// Logits `[batch * tgt_len, vocab]`. `rng` switches on training-mode dropout.
    pub fn forward(&self, g: &mut Graph, batch: &Batch, mut rng: Option<&mut ChaCha8Rng>) -> Result<NodeId> {
        let enc = self.encode_batch(g, &batch.src, &batch.interventions, rng.as_deref_mut())?;
        self.decode(g, &enc, &batch.tgt_in, rng)
    }

    /// Label-smoothed cross-entropy of a batch.
    pub fn loss(&self, g: &mut Graph, batch: &Batch, smoothing: f64, rng: Option<&mut ChaCha8Rng>) -> Result<NodeId> {
        let logits = self.forward(g, batch, rng)?;
        let len = batch.tgt_out.iter().map(Vec::len).max().unwrap_or(0);
        let mut targets = Vec::with_capacity(batch.tgt_out.len() * len);
        for t in &batch.tgt_out {
            targets.extend(t.iter().map(|&x| x as usize));
            targets.extend(std::iter::repeat_n(PAD_ID as usize, len - t.len()));
        }
        g.cross_entropy(logits, &targets, smoothing, PAD_ID as usize)
    }

    /// Sum of plain negative log-likelihood and number of predicted tokens.
    pub fn nll(&self, batch: &Batch) -> Result<(f64, usize)> {
        let mut g = Graph::with_params(&self.params);
        let loss = self.loss(&mut g, batch, 0.0, None)?;
        let n: usize = batch.tgt_out.iter().map(Vec::len).sum();
        Ok((g.value(loss)[0] * n as f64, n))
    }
}
