use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{CorpusSet, ParallelExample};
use crate::error::{Error, Result};
use crate::model::Conditioning;

/// How the domain label is supplied, independent of the mask probability.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    None,
    Tags,
    Ints,
}

impl Mode {
    pub fn conditioning(self, mask_probability: f64) -> Conditioning {
        match self {
            Mode::None => Conditioning::None,
            Mode::Tags => Conditioning::TagPrefix,
            Mode::Ints => Conditioning::AdditiveIntervention { mask_probability },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::None => "none",
            Mode::Tags => "tags",
            Mode::Ints => "ints",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "base" => Ok(Mode::None),
            "tags" => Ok(Mode::Tags),
            "ints" => Ok(Mode::Ints),
            other => Err(Error::Regime(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "domain", rename_all = "snake_case")]
pub enum RegimeKind {
    GeneralBase,
    CombinedBase,
    Combined,
    InDomain,
    MultiDomFt,
    SingleDomFt(String),
}

impl RegimeKind {
    pub fn name(&self) -> &'static str {
        match self {
            RegimeKind::GeneralBase => "general",
            RegimeKind::CombinedBase => "combined-base",
            RegimeKind::Combined => "combined",
            RegimeKind::InDomain => "in-dom",
            RegimeKind::MultiDomFt => "multi-dom-ft",
            RegimeKind::SingleDomFt(_) => "single-dom-ft",
        }
    }

    pub fn is_finetune(&self) -> bool {
        matches!(self, RegimeKind::MultiDomFt | RegimeKind::SingleDomFt(_))
    }

    /// Parses a regime name; `single-dom-ft` needs the domain separately.
    pub fn parse(name: &str, domain: Option<&str>) -> Result<Self> {
        let kind = match name {
            "general" | "general-base" => RegimeKind::GeneralBase,
            "combined-base" => RegimeKind::CombinedBase,
            "combined" => RegimeKind::Combined,
            "in-dom" => RegimeKind::InDomain,
            "multi-dom-ft" => RegimeKind::MultiDomFt,
            "single-dom-ft" => RegimeKind::SingleDomFt(
                domain
                    .ok_or_else(|| Error::Regime("single-dom-ft needs a domain".into()))?
                    .to_string(),
            ),
            other => return Err(Error::Regime(format!("unknown regime `{other}`"))),
        };
        if domain.is_some() && !matches!(kind, RegimeKind::SingleDomFt(_)) {
            return Err(Error::Regime(format!("regime `{name}` takes no domain")));
        }
        Ok(kind)
    }
}

/// A training recipe: which data, which conditioning, and whether it starts
/// from the general base model.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Regime {
    kind: RegimeKind,
    mode: Mode,
}

impl Regime {
    /// Unconditioned regimes (general, combined base, single-domain
    /// fine-tuning) take mode `None`; the rest take tags or ints.
    pub fn new(kind: RegimeKind, mode: Mode) -> Result<Self> {
        let unconditioned = matches!(
            kind,
            RegimeKind::GeneralBase | RegimeKind::CombinedBase | RegimeKind::SingleDomFt(_)
        );
        if unconditioned != (mode == Mode::None) {
            return Err(Error::Regime(format!(
                "regime `{}` cannot use mode `{}`",
                kind.name(),
                mode.name()
            )));
        }
        Ok(Regime { kind, mode })
    }

    pub fn kind(&self) -> &RegimeKind {
        &self.kind
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Report name, e.g. `combined-ints`, `general-base`, `single-dom-ft`.
    pub fn system_name(&self) -> String {
        match (&self.kind, self.mode) {
            (RegimeKind::GeneralBase, _) => "general-base".into(),
            (RegimeKind::SingleDomFt(_), _) => "single-dom-ft".into(),
            (RegimeKind::CombinedBase, _) => "combined-base".into(),
            (k, m) => format!("{}-{}", k.name(), m.name()),
        }
    }

    /// File stem for the checkpoint, unique within a regime matrix.
    pub fn file_stem(&self) -> String {
        match &self.kind {
            RegimeKind::SingleDomFt(d) => format!("single-dom-ft-{d}"),
            _ => self.system_name(),
        }
    }

    pub fn domain(&self) -> Option<&str> {
        match &self.kind {
            RegimeKind::SingleDomFt(d) => Some(d),
            _ => None,
        }
    }

    fn pick<'a>(
        &self,
        corpora: &'a CorpusSet,
        split: fn(&'a crate::data::Splits) -> &'a Vec<ParallelExample>,
    ) -> Result<Vec<ParallelExample>> {
        let domains = || corpora.domains.iter().flat_map(|d| split(&d.splits).iter().cloned());
        let general = || split(&corpora.general).iter().cloned();
        let out: Vec<ParallelExample> = match &self.kind {
            RegimeKind::GeneralBase => general().collect(),
            RegimeKind::CombinedBase | RegimeKind::Combined => domains().chain(general()).collect(),
            RegimeKind::InDomain | RegimeKind::MultiDomFt => domains().collect(),
            RegimeKind::SingleDomFt(name) => split(
                &corpora
                    .domain(name)
                    .ok_or_else(|| Error::UnknownLabel(name.clone()))?
                    .splits,
            )
            .clone(),
        };
        if out.is_empty() {
            return Err(Error::Empty(format!("no data for regime `{}`", self.file_stem())));
        }
        Ok(out)
    }

    /// The training mix. General examples carry no label.
    pub fn train_mix(&self, corpora: &CorpusSet) -> Result<Vec<ParallelExample>> {
        self.pick(corpora, |s| &s.train)
    }

    pub fn dev_mix(&self, corpora: &CorpusSet) -> Result<Vec<ParallelExample>> {
        self.pick(corpora, |s| &s.dev)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.file_stem())
    }
}

/// The nine systems of the regime matrix, single-domain fine-tuning last.
pub fn matrix_regimes(domains: &[String]) -> Vec<Regime> {
    let mut out = vec![
        Regime::new(RegimeKind::GeneralBase, Mode::None),
        Regime::new(RegimeKind::CombinedBase, Mode::None),
    ];
    for kind in [RegimeKind::Combined, RegimeKind::InDomain, RegimeKind::MultiDomFt] {
        for mode in [Mode::Tags, Mode::Ints] {
            out.push(Regime::new(kind.clone(), mode));
        }
    }
    for d in domains {
        out.push(Regime::new(RegimeKind::SingleDomFt(d.clone()), Mode::None));
    }
    out.into_iter().map(|r| r.expect("matrix regimes are valid")).collect()
}
