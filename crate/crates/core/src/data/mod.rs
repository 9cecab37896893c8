//! Parallel examples, synthetic multi-domain corpora, vocabulary and batching.

mod batch;
mod corpus;
mod synth;
pub mod vocab;

pub use batch::ShardedMix;
pub use corpus::{read_tsv, write_tsv, CorpusSet, DomainCorpus, Splits, GENERAL_DIR};
pub use synth::{generate_corpus, DomainSpec, Lexicon, SplitSizes, SyntheticTaskSpec, Transform};
pub use vocab::Vocabulary;

use crate::error::{Error, Result};

/// A named domain with its tag id and intervention row.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DomainLabel {
    pub name: String,
    pub index: usize,
}

impl DomainLabel {
    pub fn tag_id(&self) -> u32 {
        vocab::tag_id(self.index)
    }

    /// Row 0 of the intervention table is the pad row.
    pub fn intervention_row(&self) -> usize {
        self.index + 1
    }
}

/// Source tokens, target tokens and an optional domain name.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ParallelExample {
    pub source: Vec<String>,
    pub target: Vec<String>,
    /// `None` for out-of-domain (general) data.
    pub domain: Option<String>,
}

impl ParallelExample {
    pub fn new(source: Vec<String>, target: Vec<String>, domain: Option<String>) -> Result<Self> {
        if source.is_empty() || target.is_empty() {
            return Err(Error::Empty("parallel example needs a source and a target".into()));
        }
        if let Some(t) = source.iter().chain(&target).find(|t| vocab::is_reserved_form(t)) {
            return Err(Error::format("example", format!("reserved token `{t}` in text")));
        }
        Ok(ParallelExample { source, target, domain })
    }

    /// Whitespace-tokenizes both sides.
    pub fn from_text(source: &str, target: &str, domain: Option<&str>) -> Result<Self> {
        let split = |s: &str| s.split_whitespace().map(str::to_string).collect();
        ParallelExample::new(split(source), split(target), domain.map(str::to_string))
    }

    pub fn source_text(&self) -> String {
        self.source.join(" ")
    }

    pub fn target_text(&self) -> String {
        self.target.join(" ")
    }
}

/// Resolves domain names against an ordered domain list.
pub fn resolve_label(domains: &[String], name: &str) -> Result<DomainLabel> {
    domains
        .iter()
        .position(|d| d == name)
        .map(|index| DomainLabel {
            name: name.to_string(),
            index,
        })
        .ok_or_else(|| Error::UnknownLabel(name.to_string()))
}
