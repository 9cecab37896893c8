use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::ParallelExample;
use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
/// Id of the first domain tag; tag `i` has id `FIRST_TAG_ID + i`.
pub const FIRST_TAG_ID: u32 = 4;

/// Surface form of a domain tag token.
pub fn tag_token(domain: &str) -> String {
    format!("<{domain}>")
}

pub fn tag_id(domain_index: usize) -> u32 {
    FIRST_TAG_ID + domain_index as u32
}

/// True for the special-token shape `<...>` that synthetic text never uses.
pub fn is_reserved_form(token: &str) -> bool {
    token.starts_with('<') && token.ends_with('>')
}

/// Token/id bijection. Reserved tokens (pad, bos, eos, unk, then one tag per
/// domain) always occupy the lowest ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    num_domains: usize,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>, num_domains: usize) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::format("vocabulary", format!("duplicate token `{t}`")));
            }
        }
        Ok(Vocabulary {
            tokens,
            index,
            num_domains,
        })
    }

    /// Builds the vocabulary from every token in `corpora` (sources and
    /// targets), ordered by descending frequency with lexicographic ties.
    pub fn build<'a, I>(domains: &[String], corpora: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a ParallelExample>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut seen_any = false;
        for ex in corpora {
            seen_any = true;
            for t in ex.source.iter().chain(&ex.target) {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        if !seen_any {
            return Err(Error::Empty("cannot build a vocabulary from no examples".into()));
        }
        let mut tokens: Vec<String> = [PAD, BOS, EOS, UNK].iter().map(|s| s.to_string()).collect();
        tokens.extend(domains.iter().map(|d| tag_token(d)));
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        for (t, _) in ranked {
            if is_reserved_form(t) {
                return Err(Error::format("corpus", format!("reserved token `{t}` in text")));
            }
            tokens.push(t.to_string());
        }
        Vocabulary::from_tokens(tokens, domains.len())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_domains(&self) -> usize {
        self.num_domains
    }

    /// Domain names in tag order.
    pub fn domains(&self) -> Vec<String> {
        (0..self.num_domains)
            .map(|i| {
                let t = &self.tokens[tag_id(i) as usize];
                t[1..t.len() - 1].to_string()
            })
            .collect()
    }

    pub fn domain_index(&self, name: &str) -> Option<usize> {
        let id = *self.index.get(&tag_token(name))?;
        let i = id.checked_sub(FIRST_TAG_ID)? as usize;
        (i < self.num_domains).then_some(i)
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Maps ids back to tokens, dropping reserved ids.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| !self.is_reserved(i))
            .map(|&i| self.token(i).unwrap_or(UNK).to_string())
            .collect()
    }

    pub fn is_reserved(&self, id: u32) -> bool {
        (id as usize) < FIRST_TAG_ID as usize + self.num_domains
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// SHA-256 over the ordered token list, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// One token per line; line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        let fixed = [PAD, BOS, EOS, UNK];
        if tokens.len() < fixed.len() || tokens[..fixed.len()] != fixed {
            return Err(Error::format("vocabulary", "missing reserved block"));
        }
        let num_domains = tokens[FIRST_TAG_ID as usize..]
            .iter()
            .take_while(|t| is_reserved_form(t))
            .count();
        Vocabulary::from_tokens(tokens, num_domains)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(src: &str, tgt: &str) -> ParallelExample {
        ParallelExample::from_text(src, tgt, None).unwrap()
    }

    #[test]
    fn frequency_order_with_reserved_block() {
        let corpus = [ex("a b", "b")];
        let v = Vocabulary::build(&["DOM_A".into(), "DOM_B".into()], &corpus).unwrap();
        assert_eq!(
            v.tokens(),
            &["<pad>", "<bos>", "<eos>", "<unk>", "<DOM_A>", "<DOM_B>", "b", "a"]
        );
        assert_eq!(v.id("b"), 6);
        assert_eq!(v.id("never-seen"), UNK_ID);
        assert_eq!(v.domain_index("DOM_B"), Some(1));
        assert_eq!(v.domain_index("DOM_C"), None);
        assert_eq!(v.domains(), vec!["DOM_A", "DOM_B"]);
    }

    #[test]
    fn fingerprint_is_stable_and_order_sensitive() {
        let c1 = [ex("x y y", "z")];
        let a = Vocabulary::build(&["D".into()], &c1).unwrap();
        let b = Vocabulary::build(&["D".into()], &c1).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c2 = [ex("x x y", "z")];
        let c = Vocabulary::build(&["D".into()], &c2).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocabulary::build(&["P".into(), "Q".into()], &[ex("m n o", "O N M")]).unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        let w = Vocabulary::load(&path).unwrap();
        assert_eq!(v, w);
        assert_eq!(w.num_domains(), 2);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let none: [ParallelExample; 0] = [];
        assert!(Vocabulary::build(&[], &none).is_err());
    }

    #[test]
    fn decode_drops_reserved() {
        let v = Vocabulary::build(&["D".into()], &[ex("a", "b")]).unwrap();
        let ids = [BOS_ID, tag_id(0), v.id("a"), EOS_ID];
        assert_eq!(v.decode(&ids), vec!["a"]);
    }
}
