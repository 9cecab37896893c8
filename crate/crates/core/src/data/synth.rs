use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusSet, DomainCorpus, ParallelExample, Splits};
use crate::error::{Error, Result};

/// Deterministic source -> target mapping that defines a domain.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Identity,
    /// Every token upper-cased.
    Uppercase,
    /// Token order reversed.
    Reverse,
    /// Each base token replaced by the token `shift` places later in the
    /// inventory (wrapping), then `suffix` appended to the sentence.
    SuffixCipher {
        shift: usize,
        suffix: String,
    },
}

impl Transform {
    pub fn apply(&self, source: &[String], inventory: &Inventory) -> Vec<String> {
        match self {
            Transform::Identity => source.to_vec(),
            Transform::Uppercase => source.iter().map(|t| t.to_uppercase()).collect(),
            Transform::Reverse => source.iter().rev().cloned().collect(),
            Transform::SuffixCipher { shift, suffix } => source
                .iter()
                .map(|t| inventory.shifted(t, *shift))
                .chain(std::iter::once(suffix.clone()))
                .collect(),
        }
    }
}

/// Contiguous range of base-inventory indices that source sentences draw from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.dev + self.test
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub transform: Transform,
    pub lexicon: Lexicon,
    pub sizes: SplitSizes,
}

/// Everything needed to regenerate a multi-domain corpus from a seed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub base_vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub domains: Vec<DomainSpec>,
    /// Out-of-domain data; always the identity transform.
    pub general_lexicon: Lexicon,
    pub general_sizes: SplitSizes,
}

impl Default for SyntheticTaskSpec {
    /// Four domains with disjoint source lexicons and a general corpus that
    /// spans all of them.
    fn default() -> Self {
        let domain = |name: &str, transform, start| DomainSpec {
            name: name.into(),
            transform,
            lexicon: Lexicon { start, len: 10 },
            sizes: SplitSizes {
                train: 20_000,
                dev: 500,
                test: 1_000,
            },
        };
        SyntheticTaskSpec {
            base_vocab_size: 40,
            min_len: 3,
            max_len: 8,
            domains: vec![
                domain("DOM_ID", Transform::Identity, 30),
                domain("DOM_UPPER", Transform::Uppercase, 0),
                domain("DOM_REV", Transform::Reverse, 10),
                domain(
                    "DOM_CIPHER",
                    Transform::SuffixCipher {
                        shift: 1,
                        suffix: ".".into(),
                    },
                    20,
                ),
            ],
            general_lexicon: Lexicon { start: 0, len: 40 },
            general_sizes: SplitSizes {
                train: 80_000,
                dev: 500,
                test: 1_000,
            },
        }
    }
}

/// The closed base token inventory: `a`..`z`, then `aa`, `ab`, ...
#[derive(Clone, Debug)]
pub struct Inventory {
    words: Vec<String>,
}

impl Inventory {
    pub fn new(size: usize) -> Self {
        Inventory {
            words: (0..size).map(base_word).collect(),
        }
    }

    pub fn word(&self, i: usize) -> &str {
        &self.words[i]
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    fn position(&self, w: &str) -> Option<usize> {
        base_index(w).filter(|&i| i < self.words.len())
    }

    fn shifted(&self, w: &str, shift: usize) -> String {
        match self.position(w) {
            Some(i) => self.words[(i + shift) % self.words.len()].clone(),
            None => w.to_string(),
        }
    }
}

fn base_word(mut i: usize) -> String {
    let mut chars = Vec::new();
    loop {
        chars.push((b'a' + (i % 26) as u8) as char);
        if i < 26 {
            break;
        }
        i = i / 26 - 1;
    }
    chars.iter().rev().collect()
}

fn base_index(w: &str) -> Option<usize> {
    if w.is_empty() || !w.bytes().all(|b| b.is_ascii_lowercase()) {
        return None;
    }
    let mut i = 0usize;
    for b in w.bytes() {
        i = i.checked_mul(26)?.checked_add((b - b'a') as usize + 1)?;
    }
    Some(i - 1)
}

impl SyntheticTaskSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: SyntheticTaskSpec = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn domain_names(&self) -> Vec<String> {
        self.domains.iter().map(|d| d.name.clone()).collect()
    }

    pub fn inventory(&self) -> Inventory {
        Inventory::new(self.base_vocab_size)
    }

    /// The deterministic target for `source` in domain `name` (`None` = general).
    pub fn reference(&self, domain: Option<&str>, source: &[String]) -> Result<Vec<String>> {
        let inv = self.inventory();
        match domain {
            None => Ok(Transform::Identity.apply(source, &inv)),
            Some(name) => self
                .domains
                .iter()
                .find(|d| d.name == name)
                .map(|d| d.transform.apply(source, &inv))
                .ok_or_else(|| Error::UnknownLabel(name.to_string())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.base_vocab_size < 2 {
            return bad("base_vocab_size must be at least 2".into());
        }
        if self.min_len == 0 || self.max_len < self.min_len {
            return bad(format!("invalid length range {}..={}", self.min_len, self.max_len));
        }
        if self.domains.len() < 2 {
            return bad("at least two domains are required".into());
        }
        let mut names = HashSet::new();
        for d in &self.domains {
            if d.name.is_empty()
                || d.name.chars().any(|c| c.is_whitespace() || c == '<' || c == '>')
                || d.name == super::GENERAL_DIR
            {
                return bad(format!("invalid domain name `{}`", d.name));
            }
            if !names.insert(d.name.as_str()) {
                return bad(format!("duplicate domain `{}`", d.name));
            }
            self.check_lexicon(&d.lexicon, &d.name)?;
            if let Transform::SuffixCipher { suffix, .. } = &d.transform {
                if suffix.is_empty() || suffix.contains(char::is_whitespace) || suffix.starts_with('<') {
                    return bad(format!("invalid suffix `{suffix}`"));
                }
            }
        }
        self.check_lexicon(&self.general_lexicon, "general")?;
        if !self.has_disagreeing_domains() {
            return bad("no two domains have transformations that disagree".into());
        }
        Ok(())
    }

    fn check_lexicon(&self, lex: &Lexicon, who: &str) -> Result<()> {
        if lex.len == 0 || lex.start + lex.len > self.base_vocab_size {
            return Err(Error::Config(format!(
                "lexicon {}..{} of `{who}` outside base vocabulary of {}",
                lex.start,
                lex.start + lex.len,
                self.base_vocab_size
            )));
        }
        Ok(())
    }

    fn has_disagreeing_domains(&self) -> bool {
        let inv = self.inventory();
        let probe: Vec<String> = (0..self.max_len.max(2))
            .map(|i| inv.word(i % inv.len()).to_string())
            .collect();
        let outs: Vec<_> = self.domains.iter().map(|d| d.transform.apply(&probe, &inv)).collect();
        outs.iter().any(|o| o != &outs[0])
    }

    fn space_size(&self, lex: &Lexicon) -> u128 {
        (self.min_len..=self.max_len)
            .map(|l| (lex.len as u128).saturating_pow(l as u32))
            .fold(0u128, u128::saturating_add)
    }
}

/// Generates every domain plus the general corpus.
///
/// Each group draws `train + dev + test` sentences from its own RNG stream,
/// removes duplicates, then fills test, dev and train in that order, so
/// duplicates shrink the training split.
pub fn generate_corpus(spec: &SyntheticTaskSpec, seed: u64) -> Result<CorpusSet> {
    spec.validate()?;
    let inv = spec.inventory();
    let mut domains = Vec::with_capacity(spec.domains.len());
    for (i, d) in spec.domains.iter().enumerate() {
        let splits = generate_group(
            spec,
            &inv,
            &d.name,
            Some(&d.name),
            &d.transform,
            &d.lexicon,
            &d.sizes,
            seed,
            i as u64 + 1,
        )?;
        domains.push(DomainCorpus {
            name: d.name.clone(),
            splits,
        });
    }
    let general = generate_group(
        spec,
        &inv,
        "general",
        None,
        &Transform::Identity,
        &spec.general_lexicon,
        &spec.general_sizes,
        seed,
        0,
    )?;
    Ok(CorpusSet { domains, general })
}

#[allow(clippy::too_many_arguments)]
fn generate_group(
    spec: &SyntheticTaskSpec,
    inv: &Inventory,
    who: &str,
    label: Option<&str>,
    transform: &Transform,
    lex: &Lexicon,
    sizes: &SplitSizes,
    seed: u64,
    stream: u64,
) -> Result<Splits> {
    let requested = sizes.total() as u128;
    let available = spec.space_size(lex);
    if requested > available {
        return Err(Error::SpaceExhausted {
            domain: who.to_string(),
            requested,
            available,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut seen = HashSet::with_capacity(sizes.total());
    let mut unique = Vec::with_capacity(sizes.total());
    for _ in 0..sizes.total() {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let source: Vec<String> = (0..len)
            .map(|_| inv.word(lex.start + rng.gen_range(0..lex.len)).to_string())
            .collect();
        if seen.insert(source.clone()) {
            unique.push(source);
        }
    }
    let mut it = unique.into_iter().map(|source| {
        let target = transform.apply(&source, inv);
        ParallelExample {
            source,
            target,
            domain: label.map(str::to_string),
        }
    });
    let test: Vec<_> = it.by_ref().take(sizes.test).collect();
    let dev: Vec<_> = it.by_ref().take(sizes.dev).collect();
    let train: Vec<_> = it.take(sizes.train).collect();
    Ok(Splits { train, dev, test })
}
