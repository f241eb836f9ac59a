use bob_core::checkpoint::{Checkpoint, MAGIC, VERSION};
use bob_core::data::synth_generate;
use bob_core::inference::score_examples;
use bob_core::model::ModelConfig;
use bob_core::pipeline::prepare;
use bob_core::run_config::RunConfig;
use bob_core::Error;

fn trained(steps: u64) -> (Checkpoint, bob_core::objectives::TrainData) {
    let corpus = synth_generate(4, 6).unwrap();
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        num_layers: 1,
        hidden_size: 8,
        num_heads: 2,
        ffn_size: 12,
        ..cfg.model
    };
    cfg.train.batch_size = 4;
    cfg.train.max_steps = steps;
    let (mut ckpt, data) = prepare(&corpus, &cfg).unwrap();
    ckpt.trainer.run(&data, |_, _| {}).unwrap();
    (ckpt, data)
}

#[test]
fn save_load_save_is_byte_identical() {
    let (ckpt, _) = trained(3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ckpt.save(&path).unwrap();
    let first = std::fs::read(&path).unwrap();
    assert!(first.starts_with(MAGIC));
    Checkpoint::load(&path).unwrap().save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
}

#[test]
fn reloaded_model_scores_bit_identically() {
    let (ckpt, _) = trained(3);
    let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
    let probe = synth_generate(4, 6).unwrap().dialogues[..6].to_vec();
    let a = score_examples(ckpt.model(), &ckpt.vocab, &probe).unwrap();
    let b = score_examples(back.model(), &back.vocab, &probe).unwrap();
    let bits = |s: &[bob_core::inference::TokenScores]| -> Vec<u64> {
        s.iter().flat_map(|t| t.d1.iter().chain(&t.d2)).map(|x| x.to_bits()).collect()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(back.trainer.step, 3);
    assert_eq!(back.trainer.optimizer, ckpt.trainer.optimizer);
}

#[test]
fn resumed_training_continues_identically() {
    let (mut straight, data) = trained(2);
    let mut resumed = Checkpoint::from_bytes(&straight.to_bytes().unwrap()).unwrap();
    for _ in 0..3 {
        let a = straight.trainer.train_step(&data).unwrap();
        let b = resumed.trainer.train_step(&data).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn version_mismatch_fails_loudly() {
    let (ckpt, _) = trained(0);
    let mut bytes = ckpt.to_bytes().unwrap();
    bytes[MAGIC.len()..MAGIC.len() + 4].copy_from_slice(&(VERSION + 1).to_le_bytes());
    let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
    assert!(err.contains("version"), "{err}");
}

#[test]
fn damaged_files_are_rejected() {
    let (ckpt, _) = trained(0);
    let bytes = ckpt.to_bytes().unwrap();
    assert!(matches!(Checkpoint::from_bytes(b"NOTACKPT"), Err(Error::Checkpoint(_))));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
    assert!(Checkpoint::load("/nonexistent/m.ckpt").is_err());
}
