//! Shared LSTM caption decoder. The node set is averaged into a context
//! vector that is fed, together with the previous word embedding, at every
//! step.

use rand::Rng;

use crate::data::{BOS, EOS, PAD};
use crate::encoder::scaled_init;
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderConfig {
    pub vocab: usize,
    pub embed: usize,
    pub d: usize,
    pub hidden: usize,
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub embedding: ParamId,
    /// `[E + D + H, 4H]`, gate blocks ordered input, forget, candidate, output.
    pub lstm_w: ParamId,
    pub lstm_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    cfg: DecoderConfig,
}

impl DecoderParams {
    pub fn register(store: &mut ParamStore, cfg: DecoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let DecoderConfig {
            vocab,
            embed,
            d,
            hidden,
        } = cfg;
        if vocab < 4 || embed < 1 || d < 1 || hidden < 1 {
            return Err(Error::Config(format!("invalid decoder shape {cfg:?}")));
        }
        let fan_in = embed + d + hidden;
        let mut bias = Tensor::zeros(&[4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        Ok(DecoderParams {
            embedding: store.add("decoder.embedding", scaled_init(&[vocab, embed], 1.0, rng)),
            lstm_w: store.add(
                "decoder.lstm.weight",
                scaled_init(&[fan_in, 4 * hidden], (1.0 / fan_in as f64).sqrt(), rng),
            ),
            lstm_b: store.add("decoder.lstm.bias", bias),
            out_w: store.add(
                "decoder.out.weight",
                scaled_init(&[hidden, vocab], (1.0 / hidden as f64).sqrt(), rng),
            ),
            out_b: store.add("decoder.out.bias", Tensor::zeros(&[vocab])),
            cfg,
        })
    }

    pub fn config(&self) -> DecoderConfig {
        self.cfg
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.embedding, self.lstm_w, self.lstm_b, self.out_w, self.out_b]
    }
}

/// Hidden and cell state for a batch of sequences.
#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub h: Var,
    pub c: Var,
    pub t: usize,
}

impl DecoderState {
    pub fn zeros(tape: &mut Tape, batch: usize, hidden: usize) -> Result<Self> {
        Ok(DecoderState {
            h: tape.constant(Tensor::zeros(&[batch, hidden]))?,
            c: tape.constant(Tensor::zeros(&[batch, hidden]))?,
            t: 0,
        })
    }
}

/// Mean over the node axis of `v[N, K, D]`, giving `[N, D]`.
pub fn context(tape: &mut Tape, v: Var) -> Result<Var> {
    if tape.shape(v).len() != 3 {
        return Err(Error::shape(
            "context",
            format!("expected [N, K, D], got {:?}", tape.shape(v)),
        ));
    }
    tape.mean_axis(v, 1)
}

/// Gate nonlinearities and the state update from pre-activations `[N, 4H]`.
fn lstm_cell(tape: &mut Tape, gates: Var, c: Var, hidden: usize) -> Result<(Var, Var)> {
    let i = tape.narrow(gates, 1, 0, hidden)?;
    let f = tape.narrow(gates, 1, hidden, hidden)?;
    let g = tape.narrow(gates, 1, 2 * hidden, hidden)?;
    let o = tape.narrow(gates, 1, 3 * hidden, hidden)?;
    let i = tape.sigmoid(i)?;
    let f = tape.sigmoid(f)?;
    let g = tape.tanh(g)?;
    let o = tape.sigmoid(o)?;
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let squashed = tape.tanh(c)?;
    let h = tape.mul(o, squashed)?;
    Ok((h, c))
}

fn check_context(tape: &Tape, p: &DecoderParams, ctx: Var) -> Result<usize> {
    match *tape.shape(ctx) {
        [n, d] if d == p.cfg.d => Ok(n),
        ref s => Err(Error::shape(
            "decoder",
            format!("context {s:?}, expected [N, {}]", p.cfg.d),
        )),
    }
}

/// One LSTM step for the batch: returns logits `[N, vocab]` and the new state.
pub fn decode_step(
    tape: &mut Tape,
    store: &ParamStore,
    p: &DecoderParams,
    y_prev: &[usize],
    ctx: Var,
    state: DecoderState,
) -> Result<(Var, DecoderState)> {
    let n = check_context(tape, p, ctx)?;
    if y_prev.len() != n {
        return Err(Error::shape(
            "decode_step",
            format!("{} tokens for batch {n}", y_prev.len()),
        ));
    }
    let table = tape.param(store, p.embedding)?;
    let w = tape.param(store, p.lstm_w)?;
    let b = tape.param(store, p.lstm_b)?;
    let out_w = tape.param(store, p.out_w)?;
    let out_b = tape.param(store, p.out_b)?;
    let emb = tape.embedding(table, y_prev)?;
    let x = tape.concat(&[emb, ctx, state.h], 1)?;
    let gates = tape.matmul(x, w)?;
    let gates = tape.add_row(gates, b)?;
    let (h, c) = lstm_cell(tape, gates, state.c, p.cfg.hidden)?;
    let logits = tape.matmul(h, out_w)?;
    let logits = tape.add_row(logits, out_b)?;
    Ok((logits, DecoderState { h, c, t: state.t + 1 }))
}

/// Mean per-token negative log-likelihood of `seqs` under teacher forcing.
///
/// Each sequence must be `BOS ... EOS`; shorter ones are padded and the
/// padded targets are ignored. Returns the loss and the number of targets.
pub fn teacher_forced_nll(
    tape: &mut Tape,
    store: &ParamStore,
    p: &DecoderParams,
    ctx: Var,
    seqs: &[Vec<usize>],
) -> Result<(Var, usize)> {
    let n = check_context(tape, p, ctx)?;
    if seqs.len() != n {
        return Err(Error::shape(
            "teacher_forced_nll",
            format!("{} sequences for batch {n}", seqs.len()),
        ));
    }
    for s in seqs {
        if s.len() < 2 || s[0] != BOS || *s.last().unwrap() != EOS {
            return Err(Error::Data(format!("target must be BOS ... EOS, got {s:?}")));
        }
    }
    let steps = seqs.iter().map(Vec::len).max().unwrap_or(0) - 1;
    let token = |s: &Vec<usize>, t: usize| s.get(t).copied().unwrap_or(PAD);
    let (e, hd) = (p.cfg.embed, p.cfg.hidden);

    let table = tape.param(store, p.embedding)?;
    let w = tape.param(store, p.lstm_w)?;
    let b = tape.param(store, p.lstm_b)?;
    let out_w = tape.param(store, p.out_w)?;
    let out_b = tape.param(store, p.out_b)?;
    // Same arithmetic as `decode_step`, with the input and context terms
    // hoisted out of the loop.
    let w_x = tape.narrow(w, 0, 0, e)?;
    let w_c = tape.narrow(w, 0, e, p.cfg.d)?;
    let w_h = tape.narrow(w, 0, e + p.cfg.d, hd)?;
    let inputs: Vec<usize> = (0..steps).flat_map(|t| seqs.iter().map(move |s| token(s, t))).collect();
    let emb = tape.embedding(table, &inputs)?;
    let x_terms = tape.matmul(emb, w_x)?;
    let c_term = tape.matmul(ctx, w_c)?;
    let c_term = tape.add_row(c_term, b)?;

    let mut state = DecoderState::zeros(tape, n, hd)?;
    let mut hs = Vec::with_capacity(steps);
    for t in 0..steps {
        let xt = tape.narrow(x_terms, 0, t * n, n)?;
        let ht = tape.matmul(state.h, w_h)?;
        let gates = tape.add(xt, ht)?;
        let gates = tape.add(gates, c_term)?;
        let (h, c) = lstm_cell(tape, gates, state.c, hd)?;
        hs.push(h);
        state = DecoderState { h, c, t: t + 1 };
    }
    let all_h = tape.concat(&hs, 0)?;
    let logits = tape.matmul(all_h, out_w)?;
    let logits = tape.add_row(logits, out_b)?;
    let targets: Vec<usize> = (1..=steps)
        .flat_map(|t| seqs.iter().map(move |s| token(s, t)))
        .collect();
    let mask: Vec<bool> = targets.iter().map(|&y| y != PAD).collect();
    let count = mask.iter().filter(|&&m| m).count();
    let total = tape.cross_entropy(logits, &targets, &mask)?;
    Ok((tape.scale(total, 1.0 / count as f64)?, count))
}

/// Argmax decoding from `BOS`; ties go to the lowest id and `BOS` itself is
/// never emitted. A sequence ends at
/// `EOS` (not included) or after `max_len` tokens.
pub fn greedy_decode(
    tape: &mut Tape,
    store: &ParamStore,
    p: &DecoderParams,
    ctx: Var,
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    if max_len < 1 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let n = check_context(tape, p, ctx)?;
    let mut out = vec![Vec::new(); n];
    let mut done = vec![false; n];
    let mut prev = vec![BOS; n];
    let mut state = DecoderState::zeros(tape, n, p.cfg.hidden)?;
    for _ in 0..max_len {
        let (logits, next) = decode_step(tape, store, p, &prev, ctx, state)?;
        state = next;
        let lt = tape.value(logits);
        let v = lt.shape()[1];
        for (i, row) in lt.data().chunks_exact(v).enumerate() {
            if done[i] {
                continue;
            }
            let best = argmax(row);
            if best == EOS {
                done[i] = true;
            } else {
                out[i].push(best);
                prev[i] = best;
            }
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(out)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in row.iter().enumerate() {
        if j != BOS && x > row[best] {
            best = j;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradient_check_params, AdamState};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(vocab: usize) -> DecoderConfig {
        DecoderConfig {
            vocab,
            embed: 3,
            d: 4,
            hidden: 5,
        }
    }

    fn setup(vocab: usize, seed: u64) -> (ParamStore, DecoderParams) {
        let mut store = ParamStore::new();
        let p = DecoderParams::register(&mut store, cfg(vocab), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (store, p)
    }

    fn zeroed(vocab: usize) -> (ParamStore, DecoderParams) {
        let (mut store, p) = setup(vocab, 0);
        for id in p.ids() {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        (store, p)
    }

    fn random(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn nll(store: &ParamStore, p: &DecoderParams, ctx: &Tensor, seqs: &[Vec<usize>]) -> f64 {
        let mut tape = Tape::new();
        let c = tape.constant(ctx.clone()).unwrap();
        let (l, _) = teacher_forced_nll(&mut tape, store, p, c, seqs).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn context_is_node_mean() {
        let mut tape = Tape::new();
        let v = tape
            .constant(Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap())
            .unwrap();
        let c = context(&mut tape, v).unwrap();
        assert_eq!(tape.value(c).data(), &[2.0, 4.0]);
    }

    #[test]
    fn zero_model_is_uniform() {
        let (store, p) = zeroed(30);
        let ctx = random(&[2, 4], &mut ChaCha8Rng::seed_from_u64(1));
        let loss = nll(&store, &p, &ctx, &[vec![BOS, 7, 9, EOS], vec![BOS, 5, EOS]]);
        assert!((loss - 30f64.ln()).abs() < 1e-12);
        let mut tape = Tape::new();
        let c = tape.constant(ctx).unwrap();
        let out = greedy_decode(&mut tape, &store, &p, c, 6).unwrap();
        assert_eq!(out, vec![vec![PAD; 6]; 2]);
    }

    #[test]
    fn padding_does_not_change_the_loss() {
        let (store, p) = setup(12, 2);
        let ctx = random(&[1, 4], &mut ChaCha8Rng::seed_from_u64(3));
        let seq = vec![BOS, 6, 8, 4, EOS];
        let alone = nll(&store, &p, &ctx, std::slice::from_ref(&seq));
        let ctx2 = Tensor::new(&[2, 4], [ctx.data(), ctx.data()].concat()).unwrap();
        // the longer partner adds targets, so compare the summed contribution
        let long = vec![BOS, 5, 6, 7, 8, 9, 10, EOS];
        let long_alone = nll(&store, &p, &ctx, std::slice::from_ref(&long));
        let both = nll(&store, &p, &ctx2, &[seq.clone(), long.clone()]);
        let want = (alone * 4.0 + long_alone * 7.0) / 11.0;
        assert!((both - want).abs() < 1e-12);
    }

    #[test]
    fn hoisted_loop_matches_stepwise_decoding() {
        let (store, p) = setup(10, 4);
        let ctx = random(&[2, 4], &mut ChaCha8Rng::seed_from_u64(5));
        let seqs = vec![vec![BOS, 4, 5, EOS], vec![BOS, 9, 8, EOS]];
        let mut tape = Tape::new();
        let c = tape.constant(ctx).unwrap();
        let mut state = DecoderState::zeros(&mut tape, 2, 5).unwrap();
        let mut total = 0.0;
        for t in 0..3 {
            let prev: Vec<usize> = seqs.iter().map(|s| s[t]).collect();
            let (logits, next) = decode_step(&mut tape, &store, &p, &prev, c, state).unwrap();
            state = next;
            let targets: Vec<usize> = seqs.iter().map(|s| s[t + 1]).collect();
            let l = tape.cross_entropy(logits, &targets, &[true, true]).unwrap();
            total += tape.value(l).item();
        }
        assert_eq!(state.t, 3);
        let (l, count) = teacher_forced_nll(&mut tape, &store, &p, c, &seqs).unwrap();
        assert_eq!(count, 6);
        assert!((tape.value(l).item() - total / 6.0).abs() < 1e-12);
    }

    #[test]
    fn gates_stay_in_range_and_steps_are_deterministic() {
        let (store, p) = setup(10, 6);
        let ctx = random(&[1, 4], &mut ChaCha8Rng::seed_from_u64(7)).map(|x| 50.0 * x);
        let run = || {
            let mut tape = Tape::new();
            let c = tape.constant(ctx.clone()).unwrap();
            let s = DecoderState::zeros(&mut tape, 1, 5).unwrap();
            let (logits, s) = decode_step(&mut tape, &store, &p, &[BOS], c, s).unwrap();
            (
                tape.value(logits).clone(),
                tape.value(s.h).clone(),
                tape.value(s.c).clone(),
            )
        };
        let (l1, h1, c1) = run();
        assert_eq!(run(), (l1, h1.clone(), c1.clone()));
        // |c| <= |i g| < 1 from a zero state, and |h| <= |c|-bounded tanh
        assert!(c1.data().iter().all(|x| x.abs() < 1.0));
        assert!(h1.data().iter().all(|x| x.abs() < 1.0));
    }

    #[test]
    fn contract_errors() {
        let (store, p) = setup(10, 8);
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::zeros(&[1, 4])).unwrap();
        assert!(teacher_forced_nll(&mut tape, &store, &p, c, &[vec![BOS]]).is_err());
        assert!(teacher_forced_nll(&mut tape, &store, &p, c, &[vec![5, EOS]]).is_err());
        let s = DecoderState::zeros(&mut tape, 1, 5).unwrap();
        assert!(decode_step(&mut tape, &store, &p, &[10], c, s).is_err());
        assert!(greedy_decode(&mut tape, &store, &p, c, 0).is_err());
        let wrong = tape.constant(Tensor::zeros(&[1, 3])).unwrap();
        assert!(greedy_decode(&mut tape, &store, &p, wrong, 3).is_err());
    }

    #[test]
    fn greedy_output_contract() {
        for seed in 0..20 {
            let (store, p) = setup(6, seed);
            let ctx = random(&[3, 4], &mut ChaCha8Rng::seed_from_u64(seed + 100));
            let mut tape = Tape::new();
            let c = tape.constant(ctx).unwrap();
            for seq in greedy_decode(&mut tape, &store, &p, c, 8).unwrap() {
                assert!(seq.len() <= 8);
                assert!(!seq.contains(&BOS) && !seq.contains(&EOS));
            }
        }
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 0.0, 3.0, 3.0]), 2);
        assert_eq!(argmax(&[0.0; 4]), 0);
        assert_eq!(argmax(&[0.0, 9.0, 1.0]), 2);
    }

    #[test]
    fn loss_gradients() {
        let (store, p) = setup(7, 9);
        let ctx = random(&[2, 4], &mut ChaCha8Rng::seed_from_u64(10));
        let seqs = vec![vec![BOS, 4, 5, 6, EOS], vec![BOS, 6, EOS]];
        let report = gradient_check_params(
            |t, store| {
                let c = t.constant(ctx.clone())?;
                Ok(teacher_forced_nll(t, store, &p, c, &seqs)?.0)
            },
            &store,
            &p.ids(),
            1e-5,
            Some(150),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn overfits_one_caption() {
        let (mut store, p) = setup(9, 11);
        let ctx = random(&[1, 4], &mut ChaCha8Rng::seed_from_u64(12));
        let seq = vec![BOS, 4, 7, 5, 8, 6, EOS];
        let mut adam = AdamState::new();
        let ids = p.ids();
        for _ in 0..500 {
            let mut tape = Tape::new();
            let c = tape.constant(ctx.clone()).unwrap();
            let (l, _) = teacher_forced_nll(&mut tape, &store, &p, c, std::slice::from_ref(&seq)).unwrap();
            let g = tape.backward(l).unwrap();
            adam.step(&mut store, &g, &ids, 1e-2).unwrap();
        }
        let loss = nll(&store, &p, &ctx, std::slice::from_ref(&seq));
        assert!(loss < 0.05, "{loss}");
        let mut tape = Tape::new();
        let c = tape.constant(ctx).unwrap();
        let out = greedy_decode(&mut tape, &store, &p, c, 10).unwrap();
        assert_eq!(out[0], seq[1..seq.len() - 1]);
    }
}
