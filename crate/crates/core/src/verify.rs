//! Gradient-check suite covering every tensor op and each composed model
//! pathway, shared by the command line, the tests and the C interface.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{generate_records, Vocab};
use crate::error::Result;
use crate::model::L2cModel;
use crate::tensor::{
    gradient_check_params, gradient_check_sampled, BatchNormMode, GradCheckReport, ParamId, ParamStore, Tape, Tensor,
    Var,
};
use crate::training::{forward_losses, LossVars, PreparedPairs, PreparedSingles, TrainConfig};
use crate::{decoder, encoder, graph};

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Components compared per parameter tensor in pathway checks.
const PER_TENSOR: usize = 24;

/// One line of the gradient-check table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl CheckRow {
    fn new(name: &str, r: GradCheckReport) -> Self {
        CheckRow {
            name: name.to_string(),
            max_rel_error: r.max_rel_error,
            checked: r.checked,
        }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOL
    }
}

pub(crate) fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Random values bounded away from zero so relu/abs kinks stay out of reach of the step.
pub(crate) fn random_off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Contract a tensor-valued result with fixed random weights so every output
/// component influences the scalar being checked.
pub(crate) fn weighted_sum(t: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(t.shape(v), &mut rng);
    let w = t.constant(w)?;
    let p = t.mul(v, w)?;
    t.sum(p)
}

type Build = fn(&mut Tape, Var, &mut ChaCha8Rng) -> Result<Var>;

/// Every forward op, each paired with an input shape and a way to build it.
fn op_cases() -> Vec<(&'static str, Vec<usize>, Build)> {
    vec![
        ("add", vec![3, 4], |t, x, r| {
            let c = t.constant(random(&[3, 4], r))?;
            t.add(x, c)
        }),
        ("add_scalar", vec![3], |t, x, r| {
            let s = t.constant(Tensor::scalar(r.gen_range(-1.0..1.0)))?;
            t.add(s, x)
        }),
        ("sub", vec![3, 4], |t, x, r| {
            let c = t.constant(random(&[3, 4], r))?;
            t.sub(c, x)
        }),
        ("mul", vec![3, 4], |t, x, r| {
            let c = t.constant(random(&[3, 4], r))?;
            let y = t.mul(x, c)?;
            t.mul(y, x)
        }),
        ("mul_scalar_leaf", vec![], |t, x, r| {
            let c = t.constant(random(&[2, 3], r))?;
            t.mul(c, x)
        }),
        ("scale", vec![5], |t, x, _| t.scale(x, -2.5)),
        ("add_row", vec![4], |t, x, r| {
            let c = t.constant(random(&[3, 4], r))?;
            t.add_row(c, x)
        }),
        ("matmul_lhs", vec![3, 4], |t, x, r| {
            let c = t.constant(random(&[4, 2], r))?;
            t.matmul(x, c)
        }),
        ("matmul_rhs", vec![4, 2], |t, x, r| {
            let c = t.constant(random(&[3, 4], r))?;
            t.matmul(c, x)
        }),
        ("bmm", vec![2, 3, 4], |t, x, r| {
            let c = t.constant(random(&[2, 4, 3], r))?;
            let y = t.bmm(x, c)?;
            t.bmm(y, x)
        }),
        ("transpose", vec![2, 3, 4], |t, x, _| t.transpose(x)),
        ("reshape", vec![2, 6], |t, x, _| t.reshape(x, &[3, 4])),
        ("narrow", vec![3, 5, 2], |t, x, _| t.narrow(x, 1, 1, 3)),
        ("concat", vec![2, 3], |t, x, r| {
            let c = t.constant(random(&[2, 2], r))?;
            t.concat(&[x, c, x], 1)
        }),
        ("relu", vec![10], |t, x, _| t.relu(x)),
        ("sigmoid", vec![10], |t, x, _| t.sigmoid(x)),
        ("tanh", vec![10], |t, x, _| t.tanh(x)),
        ("abs", vec![10], |t, x, _| t.abs(x)),
        ("softmax_axis1", vec![2, 3, 4], |t, x, _| t.softmax(x, 1)),
        ("softmax_last", vec![3, 5], |t, x, _| t.softmax(x, 1)),
        ("sum", vec![3, 2], |t, x, _| t.sum(x)),
        ("mean", vec![3, 2], |t, x, _| t.mean(x)),
        ("mean_axis", vec![2, 3, 4], |t, x, _| t.mean_axis(x, 1)),
        ("conv2d_input", vec![2, 3, 6, 6], |t, x, r| {
            let w = t.constant(random(&[4, 3, 3, 3], r))?;
            let b = t.constant(random(&[4], r))?;
            t.conv2d(x, w, Some(b), 2, 1)
        }),
        ("conv2d_kernel", vec![4, 3, 3, 3], |t, w, r| {
            let x = t.constant(random(&[2, 3, 5, 5], r))?;
            t.conv2d(x, w, None, 1, 1)
        }),
        ("conv2d_bias", vec![4], |t, b, r| {
            let x = t.constant(random(&[2, 3, 4, 4], r))?;
            let w = t.constant(random(&[4, 3, 1, 1], r))?;
            t.conv2d(x, w, Some(b), 1, 0)
        }),
        ("batch_norm_train_input", vec![3, 2, 3, 3], |t, x, r| {
            let g = t.constant(random(&[2], r))?;
            let b = t.constant(random(&[2], r))?;
            Ok(t.batch_norm(x, g, b, BatchNormMode::Train { eps: 1e-5 })?.0)
        }),
        ("batch_norm_train_gamma", vec![2], |t, g, r| {
            let x = t.constant(random(&[3, 2, 2, 2], r))?;
            let b = t.constant(random(&[2], r))?;
            Ok(t.batch_norm(x, g, b, BatchNormMode::Train { eps: 1e-5 })?.0)
        }),
        ("batch_norm_eval_input", vec![2, 3], |t, x, r| {
            let g = t.constant(random(&[3], r))?;
            let b = t.constant(random(&[3], r))?;
            let mode = BatchNormMode::Eval {
                mean: &[0.1, -0.2, 0.3],
                var: &[1.5, 0.5, 2.0],
                eps: 1e-5,
            };
            Ok(t.batch_norm(x, g, b, mode)?.0)
        }),
        ("embedding", vec![6, 3], |t, x, _| t.embedding(x, &[1, 4, 1, 0])),
        ("cross_entropy", vec![3, 5], |t, x, _| {
            t.cross_entropy(x, &[4, 0, 2], &[true, false, true])
        }),
    ]
}

/// Checks every tensor op on `trials` random inputs; one row per op holding the worst trial.
pub fn op_gradchecks(seed: u64, trials: usize) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for (name, shape, build) in op_cases() {
        let mut worst = GradCheckReport {
            max_rel_error: 0.0,
            checked: 0,
        };
        for _ in 0..trials {
            let x = if shape.is_empty() {
                Tensor::scalar(rng.gen_range(0.1..1.0))
            } else {
                random_off_kink(&shape, &mut rng)
            };
            let s: u64 = rng.gen();
            let r = gradient_check_sampled(
                |t, xv| {
                    let mut r = ChaCha8Rng::seed_from_u64(s);
                    let y = build(t, xv, &mut r)?;
                    weighted_sum(t, y, s ^ 0x55)
                },
                &x,
                GRADCHECK_EPS,
                None,
            )?;
            worst.max_rel_error = worst.max_rel_error.max(r.max_rel_error);
            worst.checked += r.checked;
        }
        rows.push(CheckRow::new(&format!("op/{name}"), worst));
    }
    Ok(rows)
}

/// A small model plus two pairs and two singles, enough to exercise every pathway.
struct Fixture {
    model: L2cModel,
    cfg: TrainConfig,
    pairs: PreparedPairs,
    singles: PreparedSingles,
}

impl Fixture {
    fn new(seed: u64) -> Result<Self> {
        let (p, s) = generate_records(seed, 2, 2, 2)?;
        let vocab = Vocab::build(
            p.iter()
                .flat_map(|r| &r.captions)
                .chain(s.iter().flat_map(|r| &r.captions))
                .map(String::as_str),
            1,
        );
        let cfg = TrainConfig {
            d: 4,
            k: 3,
            hidden: 6,
            embed: 4,
            seed,
            ..TrainConfig::desk()
        };
        let mut model = L2cModel::new(cfg.model_config(vocab.len()))?;
        let mut pairs = PreparedPairs::new(&p, Path::new("."), &vocab)?;
        let mut singles = PreparedSingles::new(&s, Path::new("."), &vocab)?;

        // Rendered backgrounds are flat and biases start at zero, which puts
        // relu inputs and neighbouring confidences exactly on their kinks.
        // Jitter both so the check runs at a generic point.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let images = pairs
            .a
            .iter_mut()
            .chain(pairs.b.iter_mut())
            .chain(singles.images.iter_mut());
        for (img, _) in images {
            for v in img.data_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
        let store = model.store_mut();
        let ids: Vec<ParamId> = store.trainable_ids().collect();
        for id in ids {
            for v in store.get_mut(id).data_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
        Ok(Fixture {
            pairs,
            singles,
            model,
            cfg,
        })
    }

    /// Check a loss term of the real training objective against the model parameters.
    fn loss_row(&self, name: &str, ids: &[ParamId], pick: fn(&LossVars) -> Option<Var>) -> Result<CheckRow> {
        let r = gradient_check_params(
            |tape, store| {
                let mut m = self.model.clone();
                *m.store_mut() = store.clone();
                let vars = forward_losses(&m, &self.cfg, tape, &self.pairs, &[0, 1], &self.singles, &[0, 1])?;
                pick(&vars).ok_or_else(|| crate::Error::GradCheck(format!("{name}: term disabled")))
            },
            self.model.store(),
            ids,
            GRADCHECK_EPS,
            Some(PER_TENSOR),
        )?;
        Ok(CheckRow::new(name, r))
    }

    fn params_row<F>(&self, name: &str, ids: &[ParamId], f: F) -> Result<CheckRow>
    where
        F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
    {
        let r = gradient_check_params(f, self.model.store(), ids, GRADCHECK_EPS, Some(PER_TENSOR))?;
        Ok(CheckRow::new(name, r))
    }
}

/// Checks the composed pathways: pooling, TV, affinity, GCN, node difference,
/// the LSTM step and each term of the training loss.
pub fn pathway_gradchecks(seed: u64) -> Result<Vec<CheckRow>> {
    let fx = Fixture::new(seed)?;
    let m = &fx.model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let mut rows = Vec::new();

    let masks = Tensor::from_fn(&[2, 4, 4], |i| if i % 5 == 0 { 0.0 } else { 1.0 });
    let c_fixed = Tensor::from_fn(&[2, 3, 4, 4], |_| rng.gen_range(0.05..1.0));
    let f_fixed = random(&[2, 5, 4, 4], &mut rng);
    let s1: u64 = rng.gen();
    let r = gradient_check_sampled(
        |t, f| {
            let c = t.constant(c_fixed.clone())?;
            let (v, _) = encoder::semantic_pool(t, f, &masks, c)?;
            weighted_sum(t, v, s1)
        },
        &random(&[2, 5, 4, 4], &mut rng),
        GRADCHECK_EPS,
        None,
    )?;
    rows.push(CheckRow::new("semantic_pool/features", r));
    let r = gradient_check_sampled(
        |t, c| {
            let f = t.constant(f_fixed.clone())?;
            let (v, _) = encoder::semantic_pool(t, f, &masks, c)?;
            weighted_sum(t, v, s1)
        },
        &c_fixed,
        GRADCHECK_EPS,
        None,
    )?;
    rows.push(CheckRow::new("semantic_pool/confidence", r));
    // strictly increasing entries keep every forward difference away from the kink of |x|
    let ramp = Tensor::from_fn(&[2, 3, 4, 4], |i| 0.1 * i as f64 + 0.01 * ((i * 7) % 5) as f64);
    let r = gradient_check_sampled(encoder::tv_loss, &ramp, GRADCHECK_EPS, None)?;
    rows.push(CheckRow::new("tv_loss", r));

    let images = fx.pairs.batch(&[0, 1], m.map_size())?;
    let s2: u64 = rng.gen();
    let mut enc_ids = m.encoder.backbone_ids();
    enc_ids.extend(m.encoder.head_ids());
    rows.push(fx.params_row("encoder+pool", &enc_ids, |tape, store| {
        let x = tape.constant(images.images.clone())?;
        let f = encoder::backbone(tape, store, &m.encoder, x)?;
        let (c, _) = encoder::confidence_head(tape, store, &m.encoder, f, true)?;
        let (v, _) = encoder::semantic_pool(tape, f, &images.masks, c)?;
        weighted_sum(tape, v, s2)
    })?);

    let nodes = random(&[2, 3, 4], &mut rng);
    let s3: u64 = rng.gen();
    rows.push(
        fx.params_row("affinity+normalize", &[m.graph.w_i, m.graph.w_j], |tape, store| {
            let v = tape.constant(nodes.clone())?;
            let a = graph::affinity(tape, store, &m.graph, v)?;
            let a_hat = graph::normalize_adjacency(tape, a)?;
            weighted_sum(tape, a_hat, s3)
        })?,
    );
    rows.push(fx.params_row("gcn", &m.graph.ids(), |tape, store| {
        let v = tape.constant(nodes.clone())?;
        let r = graph::relate(tape, store, &m.graph, v)?;
        weighted_sum(tape, r, s3)
    })?);
    let other = random(&[2, 3, 4], &mut rng);
    let r = gradient_check_sampled(
        |t, v| {
            let o = t.constant(other.clone())?;
            let d = graph::node_difference(t, v, o)?;
            weighted_sum(t, d, s3)
        },
        &nodes,
        GRADCHECK_EPS,
        None,
    )?;
    rows.push(CheckRow::new("node_difference", r));

    let ctx = random(&[2, 4], &mut rng);
    let s4: u64 = rng.gen();
    rows.push(fx.params_row("lstm_step", &m.decoder.ids(), |tape, store| {
        let c = tape.constant(ctx.clone())?;
        let state = decoder::DecoderState::zeros(tape, 2, m.decoder.config().hidden)?;
        let (l1, state) = decoder::decode_step(tape, store, &m.decoder, &[1, 4], c, state)?;
        let (l2, _) = decoder::decode_step(tape, store, &m.decoder, &[5, 6], c, state)?;
        let both = tape.concat(&[l1, l2], 0)?;
        weighted_sum(tape, both, s4)
    })?);

    let ids = m.active_ids();
    rows.push(fx.loss_row("loss/l_diff", &ids, |v| Some(v.l_diff))?);
    rows.push(fx.loss_row("loss/l_single", &ids, |v| v.l_single)?);
    rows.push(fx.loss_row("loss/l_tv", &ids, |v| v.l_tv)?);
    rows.push(fx.loss_row("loss/total", &ids, |v| Some(v.total))?);
    Ok(rows)
}

/// Every op and every pathway.
pub fn gradcheck_all(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rows = op_gradchecks(seed, 3)?;
    rows.extend(pathway_gradchecks(seed)?);
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pathways_pass() {
        let rows: Vec<CheckRow> = (0..6).flat_map(|s| pathway_gradchecks(s).unwrap()).collect();
        assert_eq!(rows.len(), 72);
        for row in &rows {
            assert!(row.passed(), "{row:?}");
            assert!(row.checked > 0, "{row:?}");
        }
    }
}
