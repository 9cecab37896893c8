use std::fs;
use std::path::Path;

use super::ParallelExample;
use crate::error::{Error, Result};

pub const GENERAL_DIR: &str = "general";
const SPLITS: [&str; 3] = ["train", "dev", "test"];

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<ParallelExample>,
    pub dev: Vec<ParallelExample>,
    pub test: Vec<ParallelExample>,
}

impl Splits {
    fn parts(&self) -> [&Vec<ParallelExample>; 3] {
        [&self.train, &self.dev, &self.test]
    }

    pub fn all(&self) -> impl Iterator<Item = &ParallelExample> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainCorpus {
    pub name: String,
    pub splits: Splits,
}

/// Every labeled domain plus the unlabeled general corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusSet {
    pub domains: Vec<DomainCorpus>,
    pub general: Splits,
}

impl CorpusSet {
    pub fn domain_names(&self) -> Vec<String> {
        self.domains.iter().map(|d| d.name.clone()).collect()
    }

    pub fn domain(&self, name: &str) -> Option<&DomainCorpus> {
        self.domains.iter().find(|d| d.name == name)
    }

    pub fn all_examples(&self) -> impl Iterator<Item = &ParallelExample> {
        self.domains
            .iter()
            .flat_map(|d| d.splits.all())
            .chain(self.general.all())
    }

    /// Writes `<dir>/<domain>/{train,dev,test}.tsv` and `<dir>/general/...`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let groups = self
            .domains
            .iter()
            .map(|d| (d.name.as_str(), &d.splits))
            .chain(std::iter::once((GENERAL_DIR, &self.general)));
        for (name, splits) in groups {
            let sub = dir.join(name);
            fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            for (split, examples) in SPLITS.iter().zip(splits.parts()) {
                write_tsv(&sub.join(format!("{split}.tsv")), examples)?;
            }
        }
        Ok(())
    }

    /// Loads the layout written by [`CorpusSet::save`] for the given domains.
    pub fn load(dir: &Path, domains: &[String]) -> Result<Self> {
        let read_splits = |name: &str| -> Result<Splits> {
            let sub = dir.join(name);
            Ok(Splits {
                train: read_tsv(&sub.join("train.tsv"))?,
                dev: read_tsv(&sub.join("dev.tsv"))?,
                test: read_tsv(&sub.join("test.tsv"))?,
            })
        };
        let domains = domains
            .iter()
            .map(|name| {
                Ok(DomainCorpus {
                    name: name.clone(),
                    splits: read_splits(name)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CorpusSet {
            domains,
            general: read_splits(GENERAL_DIR)?,
        })
    }
}

/// UTF-8 TSV: `source \t target \t domain` with an empty domain for general data.
pub fn write_tsv(path: &Path, examples: &[ParallelExample]) -> Result<()> {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&ex.source_text());
        out.push('\t');
        out.push_str(&ex.target_text());
        out.push('\t');
        out.push_str(ex.domain.as_deref().unwrap_or(""));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_tsv(path: &Path) -> Result<Vec<ParallelExample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, line)| {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::format(
                    "corpus TSV",
                    format!("{}:{}: expected 3 fields, got {}", path.display(), n + 1, fields.len()),
                ));
            }
            let domain = (!fields[2].is_empty()).then_some(fields[2]);
            ParallelExample::from_text(fields[0], fields[1], domain)
        })
        .collect()
}
