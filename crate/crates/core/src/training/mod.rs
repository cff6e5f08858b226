//! Alternating optimization of the comparison and single-image caption
//! losses plus the confidence-map regularizer, with periodic validation and
//! ROUGE-L model selection.

mod checkpoint;
mod config;
mod sampler;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, FORMAT_VERSION, MANIFEST_FILE};
pub use config::TrainConfig;
pub use sampler::{EpochSampler, SamplerState};

use crate::data::{PairRecord, SingleRecord, Vocab};
use crate::decoder;
use crate::encoder;
use crate::error::{Error, Result};
use crate::metrics::{score_corpus, EvalReport};
use crate::model::{ImageBatch, L2cModel};
use crate::tensor::{AdamState, BatchStats, Gradients, Tape, Tensor, Var};

/// Rendered comparison examples with their training targets.
#[derive(Clone, Debug)]
pub struct PreparedPairs {
    pub ids: Vec<String>,
    pub a: Vec<(Tensor, Tensor)>,
    pub b: Vec<(Tensor, Tensor)>,
    /// First reference caption encoded as `BOS ... EOS`.
    pub targets: Vec<Vec<usize>>,
    pub refs: Vec<Vec<String>>,
}

impl PreparedPairs {
    pub fn new(records: &[PairRecord], root: &Path, vocab: &Vocab) -> Result<Self> {
        let mut out = PreparedPairs {
            ids: Vec::new(),
            a: Vec::new(),
            b: Vec::new(),
            targets: Vec::new(),
            refs: Vec::new(),
        };
        for r in records {
            let first = r
                .captions
                .first()
                .ok_or_else(|| Error::Data(format!("pair {} has no captions", r.id)))?;
            out.ids.push(r.id.clone());
            out.a.push(r.a.load(root)?);
            out.b.push(r.b.load(root)?);
            out.targets.push(vocab.encode_caption(first));
            out.refs.push(r.captions.clone());
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// First images of `idx` followed by their second images.
    pub fn batch(&self, idx: &[usize], map_size: usize) -> Result<ImageBatch> {
        let a = idx.iter().map(|&i| (&self.a[i].0, &self.a[i].1));
        let b = idx.iter().map(|&i| (&self.b[i].0, &self.b[i].1));
        ImageBatch::stack(a.chain(b), map_size)
    }
}

#[derive(Clone, Debug)]
pub struct PreparedSingles {
    pub ids: Vec<String>,
    pub images: Vec<(Tensor, Tensor)>,
    pub targets: Vec<Vec<usize>>,
}

impl PreparedSingles {
    pub fn new(records: &[SingleRecord], root: &Path, vocab: &Vocab) -> Result<Self> {
        let mut out = PreparedSingles {
            ids: Vec::new(),
            images: Vec::new(),
            targets: Vec::new(),
        };
        for r in records {
            let first = r
                .captions
                .first()
                .ok_or_else(|| Error::Data(format!("single {} has no captions", r.id)))?;
            out.ids.push(r.id.clone());
            out.images.push(r.spec.load(root)?);
            out.targets.push(vocab.encode_caption(first));
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn batch(&self, idx: &[usize], map_size: usize) -> Result<ImageBatch> {
        ImageBatch::stack(idx.iter().map(|&i| (&self.images[i].0, &self.images[i].1)), map_size)
    }
}

/// Loss values of one step. Disabled terms are reported as 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_diff: f64,
    pub l_single: f64,
    pub l_tv: f64,
    pub total: f64,
}

/// The loss graph of one step, before backward.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub l_diff: Var,
    pub l_single: Option<Var>,
    pub l_tv: Option<Var>,
    pub total: Var,
    pub stats: Option<BatchStats>,
}

impl LossVars {
    pub fn report(&self, tape: &Tape) -> LossReport {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
        LossReport {
            l_diff: tape.value(self.l_diff).item(),
            l_single: get(self.l_single),
            l_tv: get(self.l_tv),
            total: tape.value(self.total).item(),
        }
    }
}

/// Builds every loss term for the given pair and single indices.
///
/// All images of the step go through the encoder together: first images of
/// the pairs, their second images, then the singles.
pub fn forward_losses(
    model: &L2cModel,
    cfg: &TrainConfig,
    tape: &mut Tape,
    pairs: &PreparedPairs,
    pair_idx: &[usize],
    singles: &PreparedSingles,
    single_idx: &[usize],
) -> Result<LossVars> {
    if pair_idx.is_empty() {
        return Err(Error::Data("empty pair batch".into()));
    }
    let with_single = !cfg.no_single_task;
    if with_single && single_idx.is_empty() {
        return Err(Error::Data("empty single-image batch".into()));
    }
    let map = model.map_size();
    let mut batch = pairs.batch(pair_idx, map)?;
    if with_single {
        batch = batch.concat(&singles.batch(single_idx, map)?)?;
    }
    let enc = model.encode(tape, &batch, true)?;
    let related = model.relate(tape, enc.nodes)?;
    let p = pair_idx.len();
    let ctx = model.pair_context(tape, related, p, 0)?;
    let targets: Vec<Vec<usize>> = pair_idx.iter().map(|&i| pairs.targets[i].clone()).collect();
    let (l_diff, _) = decoder::teacher_forced_nll(tape, model.store(), &model.decoder, ctx, &targets)?;
    let mut total = l_diff;
    let l_single = if with_single {
        let ctx = model.single_context(tape, related, single_idx.len(), 2 * p)?;
        let targets: Vec<Vec<usize>> = single_idx.iter().map(|&i| singles.targets[i].clone()).collect();
        let (l, _) = decoder::teacher_forced_nll(tape, model.store(), &model.decoder, ctx, &targets)?;
        total = tape.add(total, l)?;
        Some(l)
    } else {
        None
    };
    let l_tv = match enc.confidence {
        Some(c) if !cfg.no_tv => {
            let l = encoder::tv_loss(tape, c)?;
            let weighted = tape.scale(l, cfg.lambda_tv)?;
            total = tape.add(total, weighted)?;
            Some(l)
        }
        _ => None,
    };
    Ok(LossVars {
        l_diff,
        l_single,
        l_tv,
        total,
        stats: enc.stats,
    })
}

/// One validation point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub loss: LossReport,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
}

/// Index of the highest ROUGE-L; the earliest wins ties.
pub fn select_best(history: &[HistoryEntry]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (i, h) in history.iter().enumerate() {
        if best.is_none_or(|b| h.rouge_l > history[b].rouge_l) {
            best = Some(i);
        }
    }
    best.ok_or_else(|| Error::Data("cannot select from an empty history".into()))
}

/// Model, optimizer and bookkeeping of a training run.
pub struct Trainer {
    pub model: L2cModel,
    pub adam: AdamState,
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub iteration: usize,
    pub history: Vec<HistoryEntry>,
    pair_sampler: EpochSampler,
    single_sampler: EpochSampler,
    last_finite: Option<LossReport>,
}

impl Trainer {
    pub fn new(config: TrainConfig, vocab: Vocab, n_pairs: usize, n_singles: usize) -> Result<Self> {
        config.validate()?;
        let model = L2cModel::new(config.model_config(vocab.len()))?;
        Ok(Trainer {
            model,
            adam: AdamState::new(),
            pair_sampler: EpochSampler::new(config.seed, "pairs", n_pairs),
            single_sampler: EpochSampler::new(config.seed, "singles", n_singles),
            config,
            vocab,
            iteration: 0,
            history: Vec::new(),
            last_finite: None,
        })
    }

    pub fn sampler_states(&self) -> [(usize, SamplerState); 2] {
        [
            (self.pair_sampler.len(), self.pair_sampler.state()),
            (self.single_sampler.len(), self.single_sampler.state()),
        ]
    }

    pub(crate) fn set_samplers(&mut self, states: [(usize, SamplerState); 2]) {
        let [(np, sp), (ns, ss)] = states;
        self.pair_sampler = EpochSampler::resume(self.config.seed, "pairs", np, sp);
        self.single_sampler = EpochSampler::resume(self.config.seed, "singles", ns, ss);
    }

    /// Checks that the samplers were built for datasets of these sizes.
    pub fn check_data(&self, pairs: &PreparedPairs, singles: &PreparedSingles) -> Result<()> {
        if pairs.len() != self.pair_sampler.len() || singles.len() != self.single_sampler.len() {
            return Err(Error::Data(format!(
                "trainer expects {} pairs and {} singles, got {} and {}",
                self.pair_sampler.len(),
                self.single_sampler.len(),
                pairs.len(),
                singles.len()
            )));
        }
        Ok(())
    }

    /// Samples both batches, computes the losses and takes one Adam step.
    pub fn step(&mut self, pairs: &PreparedPairs, singles: &PreparedSingles) -> Result<LossReport> {
        self.check_data(pairs, singles)?;
        let pair_idx = self.pair_sampler.next_batch(self.config.batch_pair);
        let single_idx = if self.config.no_single_task {
            Vec::new()
        } else {
            self.single_sampler.next_batch(self.config.batch_single)
        };
        let mut tape = Tape::new();
        let (report, grads, stats) = self
            .forward_backward(&mut tape, pairs, &pair_idx, singles, &single_idx)
            .map_err(|e| self.diverged(e))?;
        let mut grads = grads;
        if self.config.clip_norm > 0.0 {
            grads.clip_param_norm(self.config.clip_norm);
        }
        let ids = self.model.active_ids();
        self.adam.step(self.model.store_mut(), &grads, &ids, self.config.lr)?;
        if let Some(stats) = stats {
            self.model.update_running_stats(&stats)?;
        }
        self.iteration += 1;
        self.last_finite = Some(report);
        Ok(report)
    }

    fn forward_backward(
        &self,
        tape: &mut Tape,
        pairs: &PreparedPairs,
        pair_idx: &[usize],
        singles: &PreparedSingles,
        single_idx: &[usize],
    ) -> Result<(LossReport, Gradients, Option<BatchStats>)> {
        let vars = forward_losses(&self.model, &self.config, tape, pairs, pair_idx, singles, single_idx)?;
        let report = vars.report(tape);
        let grads = tape.backward(vars.total)?;
        Ok((report, grads, vars.stats))
    }

    fn diverged(&self, e: Error) -> Error {
        match e {
            Error::NonFinite { op } => Error::Diverged {
                iteration: self.iteration,
                detail: format!(
                    "{op} produced a non-finite value; last finite losses {:?}",
                    self.last_finite
                ),
            },
            other => other,
        }
    }

    /// Greedy captions for `pairs`, scored against all their references.
    pub fn evaluate(&self, pairs: &PreparedPairs, split: &str) -> Result<EvalReport> {
        evaluate(&self.model, &self.vocab, &self.config, pairs, split)
    }
}

const EVAL_CHUNK: usize = 32;

/// Decodes every pair (batch-norm in inference mode) and scores the captions.
pub fn evaluate(
    model: &L2cModel,
    vocab: &Vocab,
    cfg: &TrainConfig,
    pairs: &PreparedPairs,
    split: &str,
) -> Result<EvalReport> {
    if vocab.len() != model.config().vocab_size {
        return Err(Error::Data(format!(
            "vocabulary has {} tokens but the model was built for {}",
            vocab.len(),
            model.config().vocab_size
        )));
    }
    let map = model.map_size();
    let mut hyps = Vec::with_capacity(pairs.len());
    let all: Vec<usize> = (0..pairs.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let a = ImageBatch::stack(chunk.iter().map(|&i| (&pairs.a[i].0, &pairs.a[i].1)), map)?;
        let b = ImageBatch::stack(chunk.iter().map(|&i| (&pairs.b[i].0, &pairs.b[i].1)), map)?;
        for ids in model.caption_pairs(&a, &b, cfg.max_len)? {
            hyps.push(vocab.decode(&ids));
        }
    }
    score_corpus(split, &pairs.ids, &hyps, &pairs.refs, cfg.rouge_beta)
}

/// Training and validation data for [`fit`].
pub struct FitData<'a> {
    pub train_pairs: &'a PreparedPairs,
    pub train_singles: &'a PreparedSingles,
    pub val_pairs: &'a PreparedPairs,
}

pub const BEST_DIR: &str = "best";
pub const LAST_DIR: &str = "last";
pub const HISTORY_FILE: &str = "history.csv";

/// Runs the trainer up to `max_iters`, validating every `eval_every` steps.
///
/// With `out` set, the best-so-far model goes to `out/best`, the final state
/// to `out/last` and the history to `out/history.csv`. `log` receives every
/// step's losses.
pub fn fit(
    trainer: &mut Trainer,
    data: &FitData<'_>,
    out: Option<&Path>,
    mut log: impl FnMut(usize, &LossReport),
) -> Result<()> {
    trainer.check_data(data.train_pairs, data.train_singles)?;
    while trainer.iteration < trainer.config.max_iters {
        let report = trainer.step(data.train_pairs, data.train_singles)?;
        log(trainer.iteration, &report);
        if trainer.iteration.is_multiple_of(trainer.config.eval_every) {
            let eval = trainer.evaluate(data.val_pairs, "val")?;
            trainer.history.push(HistoryEntry {
                iteration: trainer.iteration,
                loss: report,
                bleu4: eval.bleu4,
                rouge_l: eval.rouge_l,
                cider_d: eval.cider_d,
            });
            let newest = trainer.history.len() - 1;
            if let Some(dir) = out {
                if select_best(&trainer.history)? == newest {
                    save_checkpoint(trainer, &dir.join(BEST_DIR))?;
                }
                write_history(trainer, &dir.join(HISTORY_FILE))?;
            }
        }
    }
    if let Some(dir) = out {
        save_checkpoint(trainer, &dir.join(LAST_DIR))?;
        write_history(trainer, &dir.join(HISTORY_FILE))?;
    }
    Ok(())
}

fn write_history(trainer: &Trainer, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "iteration,l_diff,l_single,l_tv,total,bleu4,rouge_l,cider_d").expect("vec write");
    for h in &trainer.history {
        writeln!(
            buf,
            "{},{},{},{},{},{},{},{}",
            h.iteration, h.loss.l_diff, h.loss.l_single, h.loss.l_tv, h.loss.total, h.bleu4, h.rouge_l, h.cider_d
        )
        .expect("vec write");
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}
