use serde::{Deserialize, Serialize};

use super::transformer::{Encoded, TransformerModel};
use crate::data::vocab::{BOS_ID, EOS_ID, FIRST_TAG_ID};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Beam { size: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    /// Maximum number of generated tokens, eos included.
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            strategy: Strategy::Greedy,
            max_len: 32,
        }
    }
}

/// Log-probabilities of the next token over ids that may be generated:
/// every non-reserved id plus eos. Everything else gets `-inf`.
fn next_log_probs(row: &[f64]) -> Vec<f64> {
    let allowed = |i: usize| i as u32 == EOS_ID || i as u32 >= FIRST_TAG_ID;
    let max = row
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(_, &x)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(_, &x)| (x - max).exp())
        .sum();
    let lse = max + z.ln();
    row.iter()
        .enumerate()
        .map(|(i, &x)| if allowed(i) { x - lse } else { f64::NEG_INFINITY })
        .collect()
}

struct Memory {
    data: Vec<f64>,
    len: usize,
    d: usize,
    valid: Vec<bool>,
}

impl Memory {
    /// Memory rows for the listed batch entries, in order.
    fn gather(&self, which: &[usize]) -> (Vec<f64>, Vec<bool>) {
        let w = self.len * self.d;
        let mut data = Vec::with_capacity(which.len() * w);
        let mut valid = Vec::with_capacity(which.len() * self.len);
        for &b in which {
            data.extend_from_slice(&self.data[b * w..(b + 1) * w]);
            valid.extend_from_slice(&self.valid[b * self.len..(b + 1) * self.len]);
        }
        (data, valid)
    }
}

impl TransformerModel {
    fn memory(&self, src: &[Vec<u32>], labels: &[Option<usize>]) -> Result<Memory> {
        let mut inputs = Vec::with_capacity(src.len());
        let mut ivs = Vec::with_capacity(src.len());
        for (s, &l) in src.iter().zip(labels) {
            let (input, iv) = self.resolve_source(s, l, None)?;
            inputs.push(input);
            ivs.push(iv);
        }
        let mut g = Graph::with_params(&self.params);
        let enc = self.encode_batch(&mut g, &inputs, &ivs, None)?;
        Ok(Memory {
            data: g.value(enc.h).to_vec(),
            len: enc.len,
            d: self.config().d_model,
            valid: enc.key_valid,
        })
    }

    /// Next-token log-probabilities for each prefix, which all share one length.
    fn step(&self, mem: &Memory, which: &[usize], prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let (data, valid) = mem.gather(which);
        let mut g = Graph::with_params(&self.params);
        let h = g.constant(Tensor::new(vec![which.len() * mem.len, mem.d], data)?);
        let enc = Encoded {
            h,
            batch: which.len(),
            len: mem.len,
            key_valid: valid,
        };
        let logits = self.decode(&mut g, &enc, prefixes, None)?;
        let v = self.config().vocab_size;
        let t = prefixes[0].len();
        let lv = g.value(logits);
        Ok((0..which.len())
            .map(|b| next_log_probs(&lv[(b * t + t - 1) * v..(b * t + t) * v]))
            .collect())
    }

    fn max_steps(&self, cfg: &DecodeConfig) -> usize {
        cfg.max_len.min(self.config().max_len)
    }

    /// Translates a batch of sources under the given labels. Labels are
    /// ignored by unconditioned models, prepended as tags or added as
    /// interventions otherwise. Outputs exclude bos and eos.
    pub fn translate_batch(
        &self,
        src: &[Vec<u32>],
        labels: &[Option<usize>],
        cfg: &DecodeConfig,
    ) -> Result<Vec<Vec<u32>>> {
        if src.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} sources with {} labels",
                src.len(),
                labels.len()
            )));
        }
        if src.is_empty() {
            return Ok(Vec::new());
        }
        match cfg.strategy {
            Strategy::Greedy => self.greedy(src, labels, cfg),
            Strategy::Beam { size } if size >= 1 => self.beam(src, labels, cfg, size),
            Strategy::Beam { size } => Err(Error::Config(format!("beam size {size}"))),
        }
    }

    pub fn translate(&self, src: &[u32], label: Option<usize>, cfg: &DecodeConfig) -> Result<Vec<u32>> {
        Ok(self.translate_batch(&[src.to_vec()], &[label], cfg)?.remove(0))
    }

    fn greedy(&self, src: &[Vec<u32>], labels: &[Option<usize>], cfg: &DecodeConfig) -> Result<Vec<Vec<u32>>> {
        let mem = self.memory(src, labels)?;
        let mut prefixes: Vec<Vec<u32>> = vec![vec![BOS_ID]; src.len()];
        let mut active: Vec<usize> = (0..src.len()).collect();
        for _ in 0..self.max_steps(cfg) {
            if active.is_empty() {
                break;
            }
            let batch: Vec<Vec<u32>> = active.iter().map(|&b| prefixes[b].clone()).collect();
            let lps = self.step(&mem, &active, &batch)?;
            let mut still = Vec::with_capacity(active.len());
            for (&b, lp) in active.iter().zip(&lps) {
                // First maximum wins, so ties go to the lowest id.
                let mut best = 0;
                for (i, &x) in lp.iter().enumerate() {
                    if x > lp[best] {
                        best = i;
                    }
                }
                prefixes[b].push(best as u32);
                if best as u32 != EOS_ID {
                    still.push(b);
                }
            }
            active = still;
        }
        Ok(prefixes.into_iter().map(strip).collect())
    }

    fn beam(&self, src: &[Vec<u32>], labels: &[Option<usize>], cfg: &DecodeConfig, k: usize) -> Result<Vec<Vec<u32>>> {
        let mem = self.memory(src, labels)?;
        let mut out = Vec::with_capacity(src.len());
        for b in 0..src.len() {
            let mut alive: Vec<(Vec<u32>, f64)> = vec![(vec![BOS_ID], 0.0)];
            let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();
            for _ in 0..self.max_steps(cfg) {
                if alive.is_empty() {
                    break;
                }
                let which = vec![b; alive.len()];
                let prefixes: Vec<Vec<u32>> = alive.iter().map(|(p, _)| p.clone()).collect();
                let lps = self.step(&mem, &which, &prefixes)?;
                let mut cands: Vec<(f64, usize, usize)> = Vec::new();
                for (h, lp) in lps.iter().enumerate() {
                    for (tok, &x) in lp.iter().enumerate() {
                        if x.is_finite() {
                            cands.push((alive[h].1 + x, h, tok));
                        }
                    }
                }
                cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
                let mut next = Vec::with_capacity(k);
                for &(score, h, tok) in cands.iter().take(k) {
                    let mut p = alive[h].0.clone();
                    p.push(tok as u32);
                    if tok as u32 == EOS_ID {
                        finished.push((p, score));
                    } else {
                        next.push((p, score));
                    }
                }
                alive = next;
                let best_alive = alive.iter().map(|a| a.1).fold(f64::NEG_INFINITY, f64::max);
                let best_done = finished.iter().map(|a| a.1).fold(f64::NEG_INFINITY, f64::max);
                if best_done >= best_alive {
                    break;
                }
            }
            let pool = if finished.is_empty() { &alive } else { &finished };
            let mut best = &pool[0];
            for c in pool {
                if c.1 > best.1 {
                    best = c;
                }
            }
            out.push(strip(best.0.clone()));
        }
        Ok(out)
    }
}

fn strip(mut seq: Vec<u32>) -> Vec<u32> {
    if seq.last() == Some(&EOS_ID) {
        seq.pop();
    }
    seq.remove(0);
    seq
}
