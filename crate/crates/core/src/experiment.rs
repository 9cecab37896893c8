//! Reproducible experiment runs: the on-disk layout, manifests, and the
//! steps behind each command-line subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{generate_corpus, CorpusSet, SyntheticTaskSpec, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{
    emit_reports, paired_bootstrap, run_ablation, AblationMatrix, AblationRun, Comparison, RobustnessSummary, TestSet,
};
use crate::model::{write_atomic, Checkpoint, Conditioning, DecodeConfig, ModelConfig, Preset, TransformerModel};
use crate::train::{
    matrix_regimes, train, train_regimes, write_loss_csv, EpochRecord, Mode, Regime, RegimeKind, TrainConfig,
    TrainOutcome, TrainedRegime,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATA_DIR: &str = "data";
pub const SPEC_FILE: &str = "spec.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const DATA_INFO_FILE: &str = "data.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const REPORT_DIR: &str = "report";

/// Refuses a non-empty `dir` unless `force` is set, then creates it.
pub fn prepare_output(dir: &Path, force: bool) -> Result<()> {
    if let Ok(mut entries) = fs::read_dir(dir) {
        if entries.next().is_some() && !force {
            return Err(Error::OutputNotEmpty(dir.to_path_buf()));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Summary written next to a generated corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataInfo {
    pub seed: u64,
    pub domains: Vec<String>,
    pub vocab_size: usize,
    pub vocab_fingerprint: String,
}

/// Generates the corpus and writes it with its spec, vocabulary and summary.
pub fn gen_data(spec: &SyntheticTaskSpec, seed: u64, out: &Path) -> Result<DataInfo> {
    let corpora = generate_corpus(spec, seed)?;
    let vocab = Vocabulary::build(&corpora.domain_names(), corpora.all_examples())?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_atomic(&out.join(SPEC_FILE), spec.to_json().as_bytes())?;
    corpora.save(out)?;
    vocab.save(&out.join(VOCAB_FILE))?;
    let info = DataInfo {
        seed,
        domains: corpora.domain_names(),
        vocab_size: vocab.len(),
        vocab_fingerprint: vocab.fingerprint(),
    };
    write_json(&out.join(DATA_INFO_FILE), &info)?;
    Ok(info)
}

pub fn load_data(dir: &Path) -> Result<(CorpusSet, Vocabulary)> {
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
    let corpora = CorpusSet::load(dir, &vocab.domains())?;
    Ok((corpora, vocab))
}

pub fn checkpoint_path(dir: &Path, regime: &Regime) -> PathBuf {
    dir.join(format!("{}.ckpt", regime.file_stem()))
}

pub fn loss_log_path(dir: &Path, regime: &Regime) -> PathBuf {
    dir.join(format!("{}.loss.csv", regime.file_stem()))
}

fn save_trained(dir: &Path, regime: &Regime, outcome: &TrainOutcome) -> Result<PathBuf> {
    let path = checkpoint_path(dir, regime);
    outcome.checkpoint.save(&path)?;
    write_loss_csv(&loss_log_path(dir, regime), &outcome.log)?;
    Ok(path)
}

/// What a single train or finetune command was asked to do.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub regime: String,
    pub mode: Mode,
    pub domain: Option<String>,
    pub preset: Preset,
    pub train: TrainConfig,
    pub data: PathBuf,
    pub parent: Option<PathBuf>,
}

impl TrainManifest {
    pub fn regime(&self) -> Result<Regime> {
        Regime::new(RegimeKind::parse(&self.regime, self.domain.as_deref())?, self.mode)
    }
}

/// Trains one regime into `out`, writing the manifest first.
pub fn train_single(m: &TrainManifest, out: &Path, progress: &mut dyn FnMut(&EpochRecord)) -> Result<PathBuf> {
    let regime = m.regime()?;
    m.train.validate()?;
    let (corpora, vocab) = load_data(&m.data)?;
    let parent = match &m.parent {
        Some(p) => Some(Checkpoint::load_for(p, &vocab)?),
        None => None,
    };
    write_json(&out.join(MANIFEST_FILE), m)?;
    let arch = ModelConfig::from_preset(m.preset, vocab.len(), vocab.num_domains(), Conditioning::None);
    let outcome = train(&m.train, &regime, &arch, &corpora, &vocab, parent.as_ref(), progress)?;
    save_trained(out, &regime, &outcome)
}

/// Decoding and significance settings shared by ablation runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub decode: DecodeConfig,
    pub jobs: usize,
    /// Use only the first `n` examples of each test set.
    pub test_limit: Option<usize>,
    pub bootstrap_iterations: usize,
    pub bootstrap_seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            decode: DecodeConfig::default(),
            jobs: 1,
            test_limit: None,
            bootstrap_iterations: 1000,
            bootstrap_seed: 1,
        }
    }
}

pub fn test_sets(corpora: &CorpusSet, limit: Option<usize>) -> Vec<TestSet> {
    corpora
        .domains
        .iter()
        .map(|d| {
            let n = limit.unwrap_or(usize::MAX).min(d.splits.test.len());
            TestSet {
                domain: d.name.clone(),
                examples: d.splits.test[..n].to_vec(),
            }
        })
        .collect()
}

/// Groups checkpoints by system name in first-seen order. A system made of
/// single-domain checkpoints must have exactly one per domain, ordered like
/// `domains`.
pub fn group_systems<'a>(
    checkpoints: &'a [Checkpoint],
    domains: &[String],
) -> Result<Vec<(String, Vec<&'a TransformerModel>)>> {
    let mut names: Vec<&str> = Vec::new();
    for c in checkpoints {
        if !names.contains(&c.provenance.system.as_str()) {
            names.push(&c.provenance.system);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let members: Vec<&Checkpoint> = checkpoints.iter().filter(|c| c.provenance.system == name).collect();
            let per_domain = members.iter().any(|c| c.provenance.domain.is_some());
            let models = if per_domain {
                domains
                    .iter()
                    .map(|d| {
                        let hits: Vec<_> = members
                            .iter()
                            .filter(|c| c.provenance.domain.as_deref() == Some(d))
                            .collect();
                        match hits.as_slice() {
                            [c] => Ok(&c.model),
                            _ => Err(Error::Config(format!(
                                "system `{name}` needs exactly one checkpoint for `{d}`, got {}",
                                hits.len()
                            ))),
                        }
                    })
                    .collect::<Result<Vec<_>>>()?
            } else if members.len() == 1 {
                vec![&members[0].model]
            } else {
                return Err(Error::Config(format!(
                    "{} checkpoints for system `{name}`",
                    members.len()
                )));
            };
            Ok((name.to_string(), models))
        })
        .collect()
}

/// Everything the report bundle is built from.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub runs: Vec<AblationRun>,
    pub summaries: Vec<RobustnessSummary>,
    pub comparisons: Vec<Comparison>,
}

impl Evaluation {
    pub fn matrices(&self) -> Vec<AblationMatrix> {
        self.runs.iter().map(|r| r.matrix.clone()).collect()
    }

    pub fn matrix(&self, system: &str) -> Option<&AblationMatrix> {
        self.runs.iter().map(|r| &r.matrix).find(|m| m.system == system)
    }

    pub fn summary(&self, system: &str) -> Option<&RobustnessSummary> {
        self.summaries.iter().find(|s| s.system == system)
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        emit_reports(dir, &self.matrices(), &self.summaries, &self.comparisons)
    }
}

/// Settings whose ints and tags systems are compared with the bootstrap.
const PAIRED: [RegimeKind; 3] = [RegimeKind::Combined, RegimeKind::InDomain, RegimeKind::MultiDomFt];

/// Ablates every system, summarizes robustness and bootstraps each ints
/// system against its tags counterpart on matched labels.
pub fn evaluate(
    checkpoints: &[Checkpoint],
    corpora: &CorpusSet,
    vocab: &Vocabulary,
    settings: &EvalSettings,
) -> Result<Evaluation> {
    if checkpoints.is_empty() {
        return Err(Error::Empty("no checkpoints to evaluate".into()));
    }
    for c in checkpoints {
        c.check_vocab(vocab)?;
    }
    let tests = test_sets(corpora, settings.test_limit);
    let systems = group_systems(checkpoints, &corpora.domain_names())?;
    let runs = systems
        .iter()
        .map(|(name, models)| run_ablation(name, models, &tests, vocab, &settings.decode, settings.jobs))
        .collect::<Result<Vec<_>>>()?;
    let summaries = runs
        .iter()
        .map(|r| RobustnessSummary::of(&r.matrix))
        .collect::<Result<Vec<_>>>()?;

    let mut comparisons = Vec::new();
    for kind in PAIRED {
        let a_name = format!("{}-{}", kind.name(), Mode::Ints.name());
        let b_name = format!("{}-{}", kind.name(), Mode::Tags.name());
        let find = |n: &str| runs.iter().find(|r| r.matrix.system == n);
        let (Some(a), Some(b)) = (find(&a_name), find(&b_name)) else {
            continue;
        };
        for (i, t) in tests.iter().enumerate() {
            let refs: Vec<String> = t.examples.iter().map(|e| e.target_text()).collect();
            let result = paired_bootstrap(
                a.matched(i),
                b.matched(i),
                &refs,
                settings.bootstrap_iterations,
                settings.bootstrap_seed,
            )?;
            comparisons.push(Comparison {
                system_a: a_name.clone(),
                system_b: b_name.clone(),
                domain: t.domain.clone(),
                result,
            });
        }
    }
    Ok(Evaluation {
        runs,
        summaries,
        comparisons,
    })
}

/// Reads every `*.csv` in `dir` as an ablation matrix named after its file
/// stem, in file name order.
pub fn fixture_matrices(dir: &Path) -> Result<Vec<AblationMatrix>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Empty(format!("no CSV files in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let stem = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            AblationMatrix::load(stem, p)
        })
        .collect()
}

/// Builds the report bundle straight from ablation CSVs, without decoding.
pub fn fixture_report(fixture: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let matrices = fixture_matrices(fixture)?;
    let summaries = matrices.iter().map(RobustnessSummary::of).collect::<Result<Vec<_>>>()?;
    emit_reports(out, &matrices, &summaries, &[])
}

/// A complete experiment: data generation, training, ablation and reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentManifest {
    /// Task spec file; the built-in default task when absent.
    pub spec: Option<PathBuf>,
    /// Seed of the generated corpus.
    pub seed: u64,
    pub preset: Preset,
    pub train: TrainConfig,
    /// Checkpoint file stems to train, e.g. `combined-ints`; empty runs the
    /// whole matrix.
    pub regimes: Vec<String>,
    pub out_dir: Option<PathBuf>,
    pub eval: EvalSettings,
}

impl Default for ExperimentManifest {
    fn default() -> Self {
        ExperimentManifest {
            spec: None,
            seed: 1,
            preset: Preset::Desk,
            train: TrainConfig::default(),
            regimes: Vec::new(),
            out_dir: None,
            eval: EvalSettings::default(),
        }
    }
}

impl ExperimentManifest {
    /// Loads a manifest; a relative spec path is taken relative to the
    /// manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut m: ExperimentManifest = read_json(path)?;
        if let (Some(spec), Some(base)) = (&m.spec, path.parent()) {
            if spec.is_relative() {
                m.spec = Some(base.join(spec));
            }
        }
        Ok(m)
    }

    pub fn task_spec(&self) -> Result<SyntheticTaskSpec> {
        match &self.spec {
            Some(p) => SyntheticTaskSpec::load(p),
            None => Ok(SyntheticTaskSpec::default()),
        }
    }

    /// The regimes to train, in matrix order.
    pub fn selected_regimes(&self, domains: &[String]) -> Result<Vec<Regime>> {
        let all = matrix_regimes(domains);
        if self.regimes.is_empty() {
            return Ok(all);
        }
        if let Some(bad) = self.regimes.iter().find(|s| !all.iter().any(|r| &r.file_stem() == *s)) {
            return Err(Error::Config(format!("unknown regime `{bad}`")));
        }
        Ok(all
            .into_iter()
            .filter(|r| self.regimes.contains(&r.file_stem()))
            .collect())
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub trained: Vec<TrainedRegime>,
    pub checkpoints: Vec<PathBuf>,
    pub evaluation: Evaluation,
    pub report_files: Vec<PathBuf>,
}

/// Runs the manifest into `out`: `manifest.json`, `data/`, `checkpoints/`
/// (one `.ckpt` and one `.loss.csv` per regime) and `report/`.
pub fn run_experiment(
    m: &ExperimentManifest,
    out: &Path,
    progress: &mut dyn FnMut(&Regime, &EpochRecord),
) -> Result<ExperimentOutcome> {
    m.train.validate()?;
    let spec = m.task_spec()?;
    spec.validate()?;
    let regimes = m.selected_regimes(&spec.domain_names())?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join(MANIFEST_FILE), m)?;

    let data_dir = out.join(DATA_DIR);
    gen_data(&spec, m.seed, &data_dir)?;
    let (corpora, vocab) = load_data(&data_dir)?;
    let arch = ModelConfig::from_preset(m.preset, vocab.len(), vocab.num_domains(), Conditioning::None);
    let trained = train_regimes(&m.train, &regimes, &arch, &corpora, &vocab, progress)?;

    let ckpt_dir = out.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let checkpoints = trained
        .iter()
        .map(|t| save_trained(&ckpt_dir, &t.regime, &t.outcome))
        .collect::<Result<Vec<_>>>()?;

    let models: Vec<Checkpoint> = trained.iter().map(|t| t.outcome.checkpoint.clone()).collect();
    let evaluation = evaluate(&models, &corpora, &vocab, &m.eval)?;
    let report_files = evaluation.write(&out.join(REPORT_DIR))?;
    Ok(ExperimentOutcome {
        trained,
        checkpoints,
        evaluation,
        report_files,
    })
}
