use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::regime::Regime;
use crate::data::{CorpusSet, ParallelExample, ShardedMix, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{write_atomic, Checkpoint, EncodedExample, ModelConfig, Provenance, TransformerModel};
use crate::numfmt::g6;
use crate::tensor::{adam_step, AdamConfig, AdamState, Graph};

const MASK_STREAM: u64 = 101;
const DROPOUT_STREAM: u64 = 102;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Peak learning rate, reached at the end of warmup.
    pub lr: f64,
    pub warmup_steps: usize,
    pub adam: AdamConfig,
    pub label_smoothing: f64,
    pub dropout: f64,
    pub virtual_epochs: usize,
    pub ft_virtual_epochs: usize,
    /// Target-token budget per shard; `None` makes every epoch a full pass.
    pub shard_target_tokens: Option<usize>,
    pub batch_size: usize,
    /// Label mask probability for intervention models.
    pub mask_probability: f64,
    /// Dev examples scored after each epoch (evenly spaced subset).
    pub dev_limit: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-3,
            warmup_steps: 400,
            adam: AdamConfig::default(),
            label_smoothing: 0.1,
            dropout: 0.1,
            virtual_epochs: 30,
            ft_virtual_epochs: 10,
            shard_target_tokens: Some(100_000),
            batch_size: 32,
            mask_probability: 0.2,
            dev_limit: 500,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label smoothing {} not in [0, 1)", self.label_smoothing));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if !(0.0..=1.0).contains(&self.mask_probability) {
            return bad(format!("mask probability {} not in [0, 1]", self.mask_probability));
        }
        if self.virtual_epochs == 0 {
            return bad("virtual_epochs must be at least 1".into());
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return bad("batch size and learning rate must be positive".into());
        }
        if self.shard_target_tokens == Some(0) {
            return bad("shard_target_tokens must be positive".into());
        }
        Ok(())
    }

    /// Inverse square root decay after linear warmup; `step` is 1-based.
    pub fn lr_at(&self, step: u64) -> f64 {
        let s = step as f64;
        if self.warmup_steps == 0 {
            return self.lr;
        }
        let w = self.warmup_steps as f64;
        self.lr * (s / w).min((w / s).sqrt())
    }
}

/// One line of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps completed so far.
    pub step: u64,
    /// Mean label-smoothed batch loss over the epoch.
    pub train_loss: f64,
    /// Per-token negative log-likelihood on the dev subset.
    pub dev_loss: f64,
    pub dev_ppl: f64,
}

pub fn loss_csv(records: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,step,train_loss,dev_loss,dev_ppl\n");
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.epoch,
            r.step,
            g6(r.train_loss),
            g6(r.dev_loss),
            g6(r.dev_ppl)
        );
    }
    s
}

pub fn write_loss_csv(path: &Path, records: &[EpochRecord]) -> Result<()> {
    write_atomic(path, loss_csv(records).as_bytes())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
}

/// Maps examples to ids; the label becomes the domain index.
pub fn encode_examples(vocab: &Vocabulary, examples: &[ParallelExample]) -> Result<Vec<EncodedExample>> {
    examples
        .iter()
        .map(|e| {
            let label = match &e.domain {
                None => None,
                Some(d) => Some(vocab.domain_index(d).ok_or_else(|| Error::UnknownLabel(d.clone()))?),
            };
            Ok(EncodedExample {
                source: vocab.encode(&e.source),
                target: vocab.encode(&e.target),
                label,
            })
        })
        .collect()
}

fn spaced_subset<T: Clone>(items: &[T], limit: usize) -> Vec<T> {
    if items.len() <= limit {
        return items.to_vec();
    }
    (0..limit).map(|i| items[i * items.len() / limit].clone()).collect()
}

/// Mean per-token NLL over `examples`, evaluated in batches without dropout
/// or masking.
pub fn dev_loss(model: &TransformerModel, examples: &[EncodedExample], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0;
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&EncodedExample> = chunk.iter().collect();
        let batch = model.make_batch(&refs, None)?;
        let (nll, n) = model.nll(&batch)?;
        total += nll;
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::Empty("dev set is empty".into()));
    }
    Ok(total / tokens as f64)
}

/// Copies every parent parameter into `model` by name. Parameters the parent
/// lacks (the intervention table when fine-tuning an unconditioned model)
/// keep their initial values.
fn inherit(model: &mut TransformerModel, parent: &TransformerModel) -> Result<()> {
    for (_, p) in parent.params.iter() {
        let id = model
            .params
            .find(&p.name)
            .ok_or_else(|| Error::format("parent checkpoint", format!("unknown parameter `{}`", p.name)))?;
        let dst = &mut model.params.get_mut(id).tensor;
        if dst.shape() != p.tensor.shape() {
            return Err(Error::format(
                "parent checkpoint",
                format!("shape of `{}` differs", p.name),
            ));
        }
        dst.data_mut().copy_from_slice(p.tensor.data());
    }
    Ok(())
}

/// Trains one regime. Fine-tuning regimes start from `parent` with fresh
/// optimizer state and run `ft_virtual_epochs`; the rest start from a
/// seeded initialization of `arch` and run `virtual_epochs`.
pub fn train(
    cfg: &TrainConfig,
    regime: &Regime,
    arch: &ModelConfig,
    corpora: &CorpusSet,
    vocab: &Vocabulary,
    parent: Option<&Checkpoint>,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let conditioning = regime.mode().conditioning(cfg.mask_probability);
    let (mut model, epochs, parent_id) = match (regime.kind().is_finetune(), parent) {
        (true, Some(p)) => {
            p.check_vocab(vocab)?;
            let mut c = p.model.config().clone();
            c.conditioning = conditioning;
            c.dropout = cfg.dropout;
            let mut m = TransformerModel::new(c, cfg.seed)?;
            inherit(&mut m, &p.model)?;
            (m, cfg.ft_virtual_epochs, Some(p.id()))
        }
        (true, None) => {
            return Err(Error::Regime(format!(
                "fine-tuning regime `{regime}` needs a parent checkpoint"
            )))
        }
        (false, Some(_)) => return Err(Error::Regime(format!("regime `{regime}` takes no parent"))),
        (false, None) => {
            let mut c = arch.clone();
            c.conditioning = conditioning;
            c.dropout = cfg.dropout;
            c.vocab_size = vocab.len();
            c.num_domains = vocab.num_domains();
            (TransformerModel::new(c, cfg.seed)?, cfg.virtual_epochs, None)
        }
    };

    let train_mix = regime.train_mix(corpora)?;
    let train_examples = encode_examples(vocab, &train_mix)?;
    let dev_examples = spaced_subset(
        &encode_examples(vocab, &regime.dev_mix(corpora)?)?,
        cfg.dev_limit.max(1),
    );
    let mix = ShardedMix::new(train_mix, cfg.shard_target_tokens, cfg.seed)?;

    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    mask_rng.set_stream(MASK_STREAM);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    drop_rng.set_stream(DROPOUT_STREAM);
    let mut state = AdamState::for_store(&model.params);
    let mut log = Vec::with_capacity(epochs);

    for epoch in 0..epochs {
        let mut loss_sum = 0.0;
        let batches = mix.epoch_batches(epoch, cfg.batch_size, cfg.seed);
        for idx in &batches {
            let refs: Vec<&EncodedExample> = idx.iter().map(|&i| &train_examples[i]).collect();
            let batch = model.make_batch(&refs, Some(&mut mask_rng))?;
            let grads = {
                let mut g = Graph::with_params(&model.params);
                let loss = model.loss(&mut g, &batch, cfg.label_smoothing, Some(&mut drop_rng))?;
                let value = g.value(loss)[0];
                if !value.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step: state.t as usize + 1,
                        loss: value,
                    });
                }
                loss_sum += value;
                g.backward(loss)?.into_params()
            };
            let lr = cfg.lr_at(state.t + 1);
            adam_step(&mut model.params, &grads, &mut state, lr, &cfg.adam)?;
        }
        let dev = dev_loss(&model, &dev_examples, cfg.batch_size)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            step: state.t,
            train_loss: loss_sum / batches.len() as f64,
            dev_loss: dev,
            dev_ppl: dev.exp(),
        };
        progress(&record);
        log.push(record);
    }

    let checkpoint = Checkpoint {
        model,
        vocab_fingerprint: vocab.fingerprint(),
        provenance: Provenance {
            system: regime.system_name(),
            regime: regime.kind().name().to_string(),
            domain: regime.domain().map(str::to_string),
            seed: cfg.seed,
            virtual_epochs: epochs,
            steps: state.t,
            parent: parent_id,
        },
    };
    Ok(TrainOutcome { checkpoint, log })
}
