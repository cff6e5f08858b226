use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;

use super::manifest::RunManifest;
use super::{CaptionArgs, ConfigArgs, EvalArgs, GenDataArgs, GradcheckArgs, Outcome, SweepKArgs, TrainArgs};
use crate::data::{generate_dataset, render, CreatureSpec, Dataset, GenConfig, Split, SplitFractions};
use crate::error::{Error, Result};
use crate::model::{ImageBatch, L2cModel};
use crate::tensor::Tape;
use crate::training::{
    fit, load_checkpoint, select_best, FitData, LossReport, PreparedPairs, PreparedSingles, TrainConfig, Trainer,
    BEST_DIR, HISTORY_FILE, LAST_DIR,
};
use crate::verify::{op_gradchecks, pathway_gradchecks, GRADCHECK_TOL};

const CONFIG_FILE: &str = "config.txt";
const SWEEP_FILE: &str = "sweep_k.csv";

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn pretty(value: &impl serde::Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)?)
}

pub(super) fn gen_data(a: GenDataArgs) -> Result<Outcome> {
    let fractions = SplitFractions(
        a.fractions
            .as_slice()
            .try_into()
            .map_err(|_| Error::Config("--fractions takes three values".into()))?,
    );
    let cfg = GenConfig {
        fractions,
        single_captions: a.single_captions,
        ..GenConfig::new(a.seed, a.n_pairs, a.n_singles)
    };
    let ds = generate_dataset(&cfg, &a.out)?;
    let written = ds.write()?;
    let config = json!({
        "n_pairs": a.n_pairs,
        "n_singles": a.n_singles,
        "fractions": a.fractions,
        "single_captions": a.single_captions,
    });
    let mut manifest = RunManifest::new("gen-data", &config, a.seed, &[])?;
    manifest.outputs = written.clone();
    manifest.write(&a.out)?;
    log::info!(
        "wrote {} train / {} val / {} test pairs to {}",
        ds.train.pairs.len(),
        ds.val.pairs.len(),
        ds.test.pairs.len(),
        a.out.display()
    );
    println!("{}", pretty(&json!({ "out": a.out, "files": written }))?);
    Ok(Outcome::Ok)
}

/// Applies a config file, `--set` overrides and ablation flags on top of `base`.
fn apply_config_args(mut cfg: TrainConfig, a: &ConfigArgs) -> Result<TrainConfig> {
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        cfg.apply_text(&text)?;
    }
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {o:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.no_semantic_pool |= a.no_semantic_pool;
    cfg.no_tv |= a.no_tv;
    cfg.no_gcn |= a.no_gcn;
    cfg.no_single_task |= a.no_single_task;
    cfg.validate()?;
    Ok(cfg)
}

fn config_inputs(a: &ConfigArgs, data: &Path) -> Vec<PathBuf> {
    let mut inputs = vec![data.to_path_buf()];
    inputs.extend(a.config.clone());
    inputs
}

struct TrainingData {
    ds: Dataset,
    train_pairs: PreparedPairs,
    train_singles: PreparedSingles,
    val_pairs: PreparedPairs,
}

impl TrainingData {
    fn load(dir: &Path) -> Result<Self> {
        let ds = Dataset::load(dir)?;
        let train_pairs = PreparedPairs::new(&ds.train.pairs, &ds.root, &ds.vocab)?;
        let train_singles = PreparedSingles::new(&ds.train.singles, &ds.root, &ds.vocab)?;
        let val_pairs = PreparedPairs::new(&ds.val.pairs, &ds.root, &ds.vocab)?;
        if val_pairs.is_empty() {
            return Err(Error::Data(format!(
                "{}: the val split has no pairs to select on",
                dir.display()
            )));
        }
        Ok(TrainingData {
            ds,
            train_pairs,
            train_singles,
            val_pairs,
        })
    }

    fn fit_data(&self) -> FitData<'_> {
        FitData {
            train_pairs: &self.train_pairs,
            train_singles: &self.train_singles,
            val_pairs: &self.val_pairs,
        }
    }
}

fn step_logger(every: usize) -> impl FnMut(usize, &LossReport) {
    move |it, r| {
        if every > 0 && it % every == 0 {
            log::info!(
                "iter {it}: l_diff {:.4} l_single {:.4} l_tv {:.4} total {:.4}",
                r.l_diff,
                r.l_single,
                r.l_tv,
                r.total
            );
        }
    }
}

fn resumed_trainer(dir: &Path, a: &ConfigArgs, data: &TrainingData) -> Result<Trainer> {
    let mut t = load_checkpoint(dir)?;
    let cfg = apply_config_args(t.config.clone(), a)?;
    let same = |c: &TrainConfig| {
        (
            c.model_config(0),
            c.no_tv,
            c.no_single_task,
            c.batch_pair,
            c.batch_single,
            c.seed,
        )
    };
    if same(&cfg) != same(&t.config) {
        return Err(Error::Config(
            "a resumed run may change schedule and optimisation settings only, not the model, ablations, batches or seed"
                .into(),
        ));
    }
    if t.vocab != data.ds.vocab {
        return Err(Error::Data(format!(
            "{}: vocabulary differs from the dataset's",
            dir.display()
        )));
    }
    t.config = cfg;
    Ok(t)
}

pub(super) fn train(a: TrainArgs) -> Result<Outcome> {
    let data = TrainingData::load(&a.data)?;
    let mut trainer = match &a.resume {
        Some(dir) => resumed_trainer(dir, &a.cfg, &data)?,
        None => {
            let cfg = apply_config_args(TrainConfig::preset(&a.cfg.preset)?, &a.cfg)?;
            Trainer::new(
                cfg,
                data.ds.vocab.clone(),
                data.train_pairs.len(),
                data.train_singles.len(),
            )?
        }
    };
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_text(&a.out.join(CONFIG_FILE), &trainer.config.to_text())?;
    let mut inputs = config_inputs(&a.cfg, &a.data);
    inputs.extend(a.resume.clone());
    let mut manifest = RunManifest::new("train", &trainer.config, trainer.config.seed, &inputs)?;

    let start = Instant::now();
    fit(
        &mut trainer,
        &data.fit_data(),
        Some(&a.out),
        step_logger(a.cfg.log_every),
    )?;
    log::info!(
        "{} iterations in {:.1}s",
        trainer.iteration,
        start.elapsed().as_secs_f64()
    );

    let best = if trainer.history.is_empty() {
        None
    } else {
        Some(&trainer.history[select_best(&trainer.history)?])
    };
    manifest.outputs = [CONFIG_FILE, HISTORY_FILE, LAST_DIR]
        .iter()
        .chain(best.map(|_| &BEST_DIR))
        .map(|f| a.out.join(f))
        .collect();
    manifest.write(&a.out)?;
    let summary = json!({
        "iterations": trainer.iteration,
        "best_iteration": best.map(|b| b.iteration),
        "best_val_rouge_l": best.map(|b| b.rouge_l),
        "best": best.map(|_| a.out.join(BEST_DIR)),
        "last": a.out.join(LAST_DIR),
    });
    println!("{}", pretty(&summary)?);
    Ok(Outcome::Ok)
}

pub(super) fn eval(a: EvalArgs) -> Result<Outcome> {
    let split: Split = a.split.parse()?;
    let trainer = load_checkpoint(&a.ckpt)?;
    let ds = Dataset::load(&a.data)?;
    if trainer.vocab != ds.vocab {
        return Err(Error::Data(format!(
            "checkpoint {} and dataset {} use different vocabularies",
            a.ckpt.display(),
            a.data.display()
        )));
    }
    let pairs = PreparedPairs::new(&ds.split(split).pairs, &ds.root, &trainer.vocab)?;
    if pairs.is_empty() {
        return Err(Error::Data(format!("the {} split has no pairs", split.name())));
    }
    let report = trainer.evaluate(&pairs, split.name())?;
    let text = pretty(&report)?;
    if let Some(out) = &a.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let path = out.join(format!("eval_{}.json", split.name()));
        write_text(&path, &format!("{text}\n"))?;
        let config = json!({ "split": split.name(), "checkpoint_config": trainer.config });
        let mut m = RunManifest::new("eval", &config, trainer.config.seed, &[a.ckpt.clone(), a.data.clone()])?;
        m.outputs.push(path);
        m.write(out)?;
    }
    println!("{text}");
    Ok(Outcome::Ok)
}

fn parse_spec(arg: &str) -> Result<CreatureSpec> {
    let path = Path::new(arg);
    let text = if !arg.trim_start().starts_with('{') && path.is_file() {
        fs::read_to_string(path).map_err(|e| Error::io(path, e))?
    } else {
        arg.to_string()
    };
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("creature spec {arg:?}: {e}")))
}

pub(super) fn caption(a: CaptionArgs) -> Result<Outcome> {
    let (spec_a, spec_b) = (parse_spec(&a.pair_spec_a)?, parse_spec(&a.pair_spec_b)?);
    let trainer = load_checkpoint(&a.ckpt)?;
    let model = &trainer.model;
    let (ia, ma) = render(&spec_a);
    let (ib, mb) = render(&spec_b);
    let map = model.map_size();
    let batch_a = ImageBatch::stack([(&ia, &ma)], map)?;
    let batch_b = ImageBatch::stack([(&ib, &mb)], map)?;
    let ids = model.caption_pairs(&batch_a, &batch_b, trainer.config.max_len)?;
    let text = trainer.vocab.decode(&ids[0]);
    if let Some(out) = &a.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let path = out.join("caption.txt");
        write_text(&path, &format!("{text}\n"))?;
        let config = json!({ "a": spec_a, "b": spec_b, "max_len": trainer.config.max_len });
        let mut m = RunManifest::new("caption", &config, trainer.config.seed, std::slice::from_ref(&a.ckpt))?;
        m.outputs.push(path);
        m.write(out)?;
    }
    println!("{text}");
    Ok(Outcome::Ok)
}

pub(super) fn gradcheck(a: GradcheckArgs) -> Result<Outcome> {
    let start = Instant::now();
    let mut rows = op_gradchecks(a.seed, a.trials)?;
    rows.extend(pathway_gradchecks(a.seed)?);
    let failed = rows.iter().filter(|r| !r.passed()).count();
    println!("check\tmax_rel_error\tchecked\tresult");
    for r in &rows {
        let verdict = if r.passed() { "pass" } else { "FAIL" };
        println!("{}\t{:.3e}\t{}\t{verdict}", r.name, r.max_rel_error, r.checked);
    }
    log::info!(
        "{} checks, {failed} above {GRADCHECK_TOL:e}, {:.1}s",
        rows.len(),
        start.elapsed().as_secs_f64()
    );
    if let Some(out) = &a.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let path = out.join("gradcheck.json");
        write_text(&path, &format!("{}\n", pretty(&rows)?))?;
        let config = json!({ "trials": a.trials, "tolerance": GRADCHECK_TOL });
        let mut m = RunManifest::new("gradcheck", &config, a.seed, &[])?;
        m.outputs.push(path);
        m.write(out)?;
    }
    Ok(if failed == 0 {
        Outcome::Ok
    } else {
        Outcome::VerificationFailed
    })
}

/// Confidence channels and node rows the model produces for one pair.
fn node_layout(model: &L2cModel, pairs: &PreparedPairs) -> Result<(usize, usize)> {
    let mut tape = Tape::new();
    let enc = model.encode(&mut tape, &pairs.batch(&[0], model.map_size())?, false)?;
    let channels = enc.confidence.map_or(0, |c| tape.shape(c)[1]);
    Ok((channels, tape.shape(enc.nodes)[1]))
}

pub(super) fn sweep_k(a: SweepKArgs) -> Result<Outcome> {
    if a.values.is_empty() {
        return Err(Error::Config("--values needs at least one K".into()));
    }
    let base = apply_config_args(TrainConfig::preset(&a.cfg.preset)?, &a.cfg)?;
    for &k in &a.values {
        TrainConfig { k, ..base.clone() }.validate()?;
    }
    let data = TrainingData::load(&a.data)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let config = json!({ "values": a.values, "base": base });
    let mut manifest = RunManifest::new("sweep-k", &config, base.seed, &config_inputs(&a.cfg, &a.data))?;

    let mut csv = String::from("k,best_iteration,bleu4,rouge_l,cider_d,confidence_channels,node_rows\n");
    for &k in &a.values {
        let cfg = TrainConfig { k, ..base.clone() };
        let dir = a.out.join(format!("k{k}"));
        log::info!("K = {k}: training into {}", dir.display());
        let mut trainer = Trainer::new(
            cfg,
            data.ds.vocab.clone(),
            data.train_pairs.len(),
            data.train_singles.len(),
        )?;
        fit(&mut trainer, &data.fit_data(), Some(&dir), step_logger(a.cfg.log_every))?;
        let best = &trainer.history[select_best(&trainer.history)?];
        let reloaded = load_checkpoint(&dir.join(BEST_DIR))?;
        let report = reloaded.evaluate(&data.val_pairs, "val")?;
        write_text(&dir.join("eval_val.json"), &format!("{}\n", pretty(&report)?))?;
        let (channels, rows) = node_layout(&reloaded.model, &data.val_pairs)?;
        csv.push_str(&format!(
            "{k},{},{},{},{},{channels},{rows}\n",
            best.iteration, report.bleu4, report.rouge_l, report.cider_d
        ));
        manifest.outputs.push(dir);
    }
    let path = a.out.join(SWEEP_FILE);
    write_text(&path, &csv)?;
    manifest.outputs.push(path);
    manifest.write(&a.out)?;
    print!("{csv}");
    Ok(Outcome::Ok)
}
