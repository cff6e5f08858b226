//! End to end through the library: generate, load, train, checkpoint, score.

use l2c::data::{generate_dataset, Dataset, GenConfig, Split};
use l2c::training::{load_checkpoint, save_checkpoint, PreparedPairs, PreparedSingles, TrainConfig, Trainer};

#[test]
fn generated_dataset_trains_and_checkpoints() {
    let t = tempfile::tempdir().unwrap();
    let root = t.path().join("data");
    let generated = generate_dataset(&GenConfig::new(5, 30, 20), &root).unwrap();
    generated.write().unwrap();
    let ds = Dataset::load(&root).unwrap();
    assert_eq!(ds.train, generated.train);
    assert_eq!(ds.vocab, generated.vocab);
    assert!(!ds.split(Split::Val).pairs.is_empty());

    let train = ds.split(Split::Train);
    let pairs = PreparedPairs::new(&train.pairs, &ds.root, &ds.vocab).unwrap();
    let singles = PreparedSingles::new(&train.singles, &ds.root, &ds.vocab).unwrap();
    let val = PreparedPairs::new(&ds.val.pairs, &ds.root, &ds.vocab).unwrap();
    let cfg = TrainConfig {
        d: 16,
        k: 3,
        hidden: 32,
        embed: 16,
        lr: 3e-3,
        ..TrainConfig::desk()
    };
    let mut trainer = Trainer::new(cfg, ds.vocab.clone(), pairs.len(), singles.len()).unwrap();
    let first = trainer.step(&pairs, &singles).unwrap();
    let mut last = first;
    for _ in 0..40 {
        last = trainer.step(&pairs, &singles).unwrap();
    }
    assert!(last.total.is_finite());
    assert!(last.l_diff < first.l_diff, "{} -> {}", first.l_diff, last.l_diff);

    let ckpt = t.path().join("ckpt");
    save_checkpoint(&trainer, &ckpt).unwrap();
    let restored = load_checkpoint(&ckpt).unwrap();
    let (r1, r2) = (
        trainer.evaluate(&val, "val").unwrap(),
        restored.evaluate(&val, "val").unwrap(),
    );
    assert_eq!(r1, r2);
    for m in [r1.bleu4, r1.rouge_l, r1.cider_d] {
        assert!(m.is_finite() && m >= 0.0);
    }
}
