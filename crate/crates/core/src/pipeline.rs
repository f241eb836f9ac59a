//! Corpus to trained model: the path shared by the command line and the
//! experiment tests.

use crate::checkpoint::Checkpoint;
use crate::data::{SynthCorpus, Vocab};
use crate::error::{Error, Result};
use crate::model::BobModel;
use crate::objectives::{LossBreakdown, TrainData, Trainer};
use crate::run_config::RunConfig;

/// Vocabulary over the training dialogues and inference pairs.
pub fn build_vocab(corpus: &SynthCorpus) -> Vocab {
    Vocab::build(
        corpus
            .dialogues
            .iter()
            .flat_map(|d| d.texts())
            .chain(corpus.inference.iter().flat_map(|p| p.texts())),
    )
}

/// Fresh trainer and encoded data for `corpus`. The model seed is the
/// training seed.
pub fn prepare(corpus: &SynthCorpus, config: &RunConfig) -> Result<(Checkpoint, TrainData)> {
    if corpus.dialogues.is_empty() {
        return Err(Error::Empty("dialogue corpus"));
    }
    let vocab = build_vocab(corpus);
    let mut model_cfg = config.model.clone();
    model_cfg.vocab_size = vocab.len();
    let data = TrainData::new(&corpus.dialogues, &corpus.inference, &vocab, &model_cfg);
    if data.dialogues.is_empty() {
        return Err(Error::Empty("encodable dialogues"));
    }
    let model = BobModel::new(model_cfg, config.train.seed)?;
    let trainer = Trainer::new(model, config.train.clone())?;
    Ok((Checkpoint::new(trainer, vocab), data))
}

/// Train from scratch until `max_steps`, reporting every step to `log`.
pub fn train(
    corpus: &SynthCorpus,
    config: &RunConfig,
    log: impl FnMut(u64, &LossBreakdown),
) -> Result<Checkpoint> {
    let (mut ckpt, data) = prepare(corpus, config)?;
    ckpt.trainer.run(&data, log)?;
    Ok(ckpt)
}
