use super::regime::{matrix_regimes, Regime, RegimeKind};
use super::trainer::{train, EpochRecord, TrainConfig, TrainOutcome};
use crate::data::{CorpusSet, Vocabulary};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// A trained regime with its loss log.
#[derive(Clone, Debug)]
pub struct TrainedRegime {
    pub regime: Regime,
    pub outcome: TrainOutcome,
}

/// Trains every regime of the matrix in order. The general base model is
/// trained first and is the parent of every fine-tuned model.
pub fn regime_matrix(
    cfg: &TrainConfig,
    arch: &ModelConfig,
    corpora: &CorpusSet,
    vocab: &Vocabulary,
    progress: &mut dyn FnMut(&Regime, &EpochRecord),
) -> Result<Vec<TrainedRegime>> {
    let regimes = matrix_regimes(&corpora.domain_names());
    train_regimes(cfg, &regimes, arch, corpora, vocab, progress)
}

/// Trains `regimes` in order. Fine-tuning regimes take the general base
/// model trained earlier in the same list as their parent.
pub fn train_regimes(
    cfg: &TrainConfig,
    regimes: &[Regime],
    arch: &ModelConfig,
    corpora: &CorpusSet,
    vocab: &Vocabulary,
    progress: &mut dyn FnMut(&Regime, &EpochRecord),
) -> Result<Vec<TrainedRegime>> {
    let mut out: Vec<TrainedRegime> = Vec::with_capacity(regimes.len());
    for regime in regimes {
        let parent = if regime.kind().is_finetune() {
            let base = out
                .iter()
                .find(|t| *t.regime.kind() == RegimeKind::GeneralBase)
                .ok_or_else(|| Error::Regime(format!("`{regime}` needs general-base trained before it")))?;
            Some(&base.outcome.checkpoint)
        } else {
            None
        };
        let outcome = train(cfg, regime, arch, corpora, vocab, parent, &mut |r| progress(regime, r))?;
        out.push(TrainedRegime {
            regime: regime.clone(),
            outcome,
        });
    }
    Ok(out)
}
