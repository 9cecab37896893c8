use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::bleu::corpus_bleu;
use crate::data::{ParallelExample, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{DecodeConfig, TransformerModel};
use crate::numfmt::g6;

/// Column name of the no-label condition.
pub const NONE_LABEL: &str = "None";

/// Scores indexed by (test domain, provided label). The last label is `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationMatrix {
    pub system: String,
    pub test_domains: Vec<String>,
    pub labels: Vec<String>,
    /// `cells[i][j]`: test domain `i` under label `j`.
    pub cells: Vec<Vec<f64>>,
}

impl AblationMatrix {
    pub fn new(
        system: impl Into<String>,
        test_domains: Vec<String>,
        labels: Vec<String>,
        cells: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if labels.last().map(String::as_str) != Some(NONE_LABEL) {
            return Err(Error::format("ablation matrix", "last label must be None"));
        }
        if test_domains.is_empty() || cells.len() != test_domains.len() {
            return Err(Error::format(
                "ablation matrix",
                format!("{} rows for {} test domains", cells.len(), test_domains.len()),
            ));
        }
        if let Some(r) = cells.iter().position(|r| r.len() != labels.len()) {
            return Err(Error::format(
                "ablation matrix",
                format!(
                    "row `{}` has {} cells for {} labels",
                    test_domains[r],
                    cells[r].len(),
                    labels.len()
                ),
            ));
        }
        if cells.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::format("ablation matrix", "non-finite cell"));
        }
        Ok(AblationMatrix {
            system: system.into(),
            test_domains,
            labels,
            cells,
        })
    }

    pub fn row(&self, domain: &str) -> Option<&[f64]> {
        self.test_domains
            .iter()
            .position(|d| d == domain)
            .map(|i| self.cells[i].as_slice())
    }

    pub fn cell(&self, domain: &str, label: &str) -> Option<f64> {
        let j = self.labels.iter().position(|l| l == label)?;
        self.row(domain).map(|r| r[j])
    }

    /// Matched-label score per test domain.
    pub fn diagonal(&self) -> Result<Vec<f64>> {
        self.test_domains
            .iter()
            .map(|d| self.cell(d, d).ok_or_else(|| Error::UnknownLabel(d.clone())))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("test_domain");
        for l in &self.labels {
            s.push(',');
            s.push_str(l);
        }
        s.push('\n');
        for (d, row) in self.test_domains.iter().zip(&self.cells) {
            s.push_str(d);
            for x in row {
                let _ = write!(s, ",{}", g6(*x));
            }
            s.push('\n');
        }
        s
    }

    /// Parses the CSV layout of [`AblationMatrix::to_csv`]: a header of
    /// provided labels ending in `None`, then one row per test domain.
    pub fn from_csv(system: impl Into<String>, text: &str) -> Result<Self> {
        let bad = |d: String| Error::format("ablation CSV", d);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let labels: Vec<String> = header.split(',').skip(1).map(|s| s.trim().to_string()).collect();
        let mut domains = Vec::new();
        let mut cells = Vec::new();
        for (n, line) in lines.enumerate() {
            let mut fields = line.split(',').map(str::trim);
            let d = fields.next().unwrap_or_default().to_string();
            let row = fields
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| bad(format!("line {}: bad number `{f}`", n + 2)))
                })
                .collect::<Result<Vec<f64>>>()?;
            domains.push(d);
            cells.push(row);
        }
        AblationMatrix::new(system, domains, labels, cells)
    }

    pub fn load(system: impl Into<String>, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(system, &text)
    }
}

/// Sample standard deviation (denominator `n - 1`). The mean is taken
/// relative to the first value, so a constant row gives exactly zero.
pub fn robustness_std(row: &[f64]) -> Result<f64> {
    if row.len() < 2 {
        return Err(Error::Empty("standard deviation needs at least two values".into()));
    }
    if row.iter().any(|x| !x.is_finite()) {
        return Err(Error::format("robustness row", "non-finite value"));
    }
    let x0 = row[0];
    let n = row.len() as f64;
    let shift = row.iter().map(|x| x - x0).sum::<f64>() / n;
    let ss: f64 = row.iter().map(|x| (x - x0 - shift).powi(2)).sum();
    Ok((ss / (n - 1.0)).sqrt())
}

/// Per test domain std of one system's ablation matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessSummary {
    pub system: String,
    pub test_domains: Vec<String>,
    pub std: Vec<f64>,
}

impl RobustnessSummary {
    pub fn of(m: &AblationMatrix) -> Result<Self> {
        Ok(RobustnessSummary {
            system: m.system.clone(),
            test_domains: m.test_domains.clone(),
            std: m.cells.iter().map(|r| robustness_std(r)).collect::<Result<_>>()?,
        })
    }

    pub fn get(&self, domain: &str) -> Option<f64> {
        self.test_domains.iter().position(|d| d == domain).map(|i| self.std[i])
    }
}

/// A test set for one domain.
#[derive(Clone, Debug)]
pub struct TestSet {
    pub domain: String,
    pub examples: Vec<ParallelExample>,
}

/// A completed ablation with every decoded hypothesis kept.
#[derive(Clone, Debug)]
pub struct AblationRun {
    pub matrix: AblationMatrix,
    /// `hypotheses[i][j]`: outputs for test set `i` under label `j`.
    pub hypotheses: Vec<Vec<Vec<String>>>,
}

impl AblationRun {
    /// Outputs under the matched label.
    pub fn matched(&self, i: usize) -> &[String] {
        let d = &self.matrix.test_domains[i];
        let j = self
            .matrix
            .labels
            .iter()
            .position(|l| l == d)
            .expect("test domain is a label");
        &self.hypotheses[i][j]
    }
}

const DECODE_CHUNK: usize = 64;

/// Decodes every test set under every label (all domains, then None) and
/// scores each cell with corpus BLEU. `models` holds one model shared by all
/// test sets or one model per test set. Cells run on up to `jobs` threads.
pub fn run_ablation(
    system: &str,
    models: &[&TransformerModel],
    tests: &[TestSet],
    vocab: &Vocabulary,
    decode: &DecodeConfig,
    jobs: usize,
) -> Result<AblationRun> {
    if models.len() != 1 && models.len() != tests.len() {
        return Err(Error::Config(format!(
            "{} models for {} test sets",
            models.len(),
            tests.len()
        )));
    }
    let domains = vocab.domains();
    let mut labels = domains.clone();
    labels.push(NONE_LABEL.to_string());
    let label_ids: Vec<Option<usize>> = (0..domains.len()).map(Some).chain([None]).collect();

    let cells: Vec<(usize, usize)> = (0..tests.len())
        .flat_map(|i| (0..label_ids.len()).map(move |j| (i, j)))
        .collect();
    let results: Mutex<Vec<Option<Result<(f64, Vec<String>)>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    let next = Mutex::new(0usize);
    let worker = || loop {
        let k = {
            let mut n = next.lock().expect("lock");
            if *n >= cells.len() {
                return;
            }
            *n += 1;
            *n - 1
        };
        let (i, j) = cells[k];
        let model = models[if models.len() == 1 { 0 } else { i }];
        let out = score_cell(model, &tests[i], label_ids[j], vocab, decode);
        results.lock().expect("lock")[k] = Some(out);
    };
    std::thread::scope(|s| {
        for _ in 1..jobs.max(1).min(cells.len()) {
            s.spawn(worker);
        }
        worker();
    });

    let mut scores = vec![vec![0.0; labels.len()]; tests.len()];
    let mut hyps = vec![vec![Vec::new(); labels.len()]; tests.len()];
    for (k, r) in results.into_inner().expect("lock").into_iter().enumerate() {
        let (i, j) = cells[k];
        let (score, h) = r.expect("every cell evaluated")?;
        scores[i][j] = score;
        hyps[i][j] = h;
    }
    let matrix = AblationMatrix::new(system, tests.iter().map(|t| t.domain.clone()).collect(), labels, scores)?;
    Ok(AblationRun {
        matrix,
        hypotheses: hyps,
    })
}

fn score_cell(
    model: &TransformerModel,
    test: &TestSet,
    label: Option<usize>,
    vocab: &Vocabulary,
    decode: &DecodeConfig,
) -> Result<(f64, Vec<String>)> {
    let hyps = translate_all(model, &test.examples, label, vocab, decode)?;
    let refs: Vec<String> = test.examples.iter().map(ParallelExample::target_text).collect();
    Ok((corpus_bleu(&hyps, &refs)?.score, hyps))
}

/// Translates every source under one label, returning detokenized text.
pub fn translate_all(
    model: &TransformerModel,
    examples: &[ParallelExample],
    label: Option<usize>,
    vocab: &Vocabulary,
    decode: &DecodeConfig,
) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(DECODE_CHUNK) {
        let src: Vec<Vec<u32>> = chunk.iter().map(|e| vocab.encode(&e.source)).collect();
        let labels = vec![label; chunk.len()];
        for ids in model.translate_batch(&src, &labels, decode)? {
            out.push(vocab.decode(&ids).join(" "));
        }
    }
    Ok(out)
}
