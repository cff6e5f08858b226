//! Image encoder: a small convolutional backbone produces the feature map
//! `F`, a confidence head produces per-pixel part distributions `C`, and
//! semantic pooling aggregates `F` under the mask `B` into `K` part nodes.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{BatchNormMode, BatchStats, ParamId, ParamStore, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Shape of the encoder. `map_size` is derived: the backbone downsamples by 4.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub d: usize,
    pub k: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.d < 1 || self.in_channels < 1 {
            return Err(Error::Config(format!(
                "encoder needs K >= 1, D >= 1 and input channels >= 1, got K={} D={} C={}",
                self.k, self.d, self.in_channels
            )));
        }
        if self.image_size < 4 {
            return Err(Error::Config(format!("image size {} below 4", self.image_size)));
        }
        Ok(())
    }

    /// Side of the feature map, `H = W`.
    pub fn map_size(&self) -> usize {
        let half = |s: usize| (s - 1) / 2 + 1;
        half(half(self.image_size))
    }

    fn mid(&self) -> usize {
        (self.d / 2).max(1)
    }
}

/// Normal(0, sqrt(2 / fan_in)) weights.
pub(crate) fn he_init(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    scaled_init(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

pub(crate) fn scaled_init(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, data).expect("extents match data")
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
    pub head1_w: ParamId,
    pub head1_b: ParamId,
    pub bn_gamma: ParamId,
    pub bn_beta: ParamId,
    pub bn_mean: ParamId,
    pub bn_var: ParamId,
    pub head2_w: ParamId,
    pub head2_b: ParamId,
}

impl EncoderParams {
    /// Registers backbone and head parameters. Biases start at zero.
    pub fn register(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let (c, mid, d, k) = (cfg.in_channels, cfg.mid(), cfg.d, cfg.k);
        EncoderParams {
            conv1_w: store.add("encoder.conv1.weight", he_init(&[mid, c, 3, 3], c * 9, rng)),
            conv1_b: store.add("encoder.conv1.bias", Tensor::zeros(&[mid])),
            conv2_w: store.add("encoder.conv2.weight", he_init(&[d, mid, 3, 3], mid * 9, rng)),
            conv2_b: store.add("encoder.conv2.bias", Tensor::zeros(&[d])),
            head1_w: store.add("encoder.head1.weight", he_init(&[mid, d, 3, 3], d * 9, rng)),
            head1_b: store.add("encoder.head1.bias", Tensor::zeros(&[mid])),
            bn_gamma: store.add("encoder.bn.gamma", Tensor::ones(&[mid])),
            bn_beta: store.add("encoder.bn.beta", Tensor::zeros(&[mid])),
            bn_mean: store.add_buffer("encoder.bn.running_mean", Tensor::zeros(&[mid])),
            bn_var: store.add_buffer("encoder.bn.running_var", Tensor::ones(&[mid])),
            head2_w: store.add("encoder.head2.weight", he_init(&[k, mid, 1, 1], mid, rng)),
            head2_b: store.add("encoder.head2.bias", Tensor::zeros(&[k])),
        }
    }

    pub fn backbone_ids(&self) -> Vec<ParamId> {
        vec![self.conv1_w, self.conv1_b, self.conv2_w, self.conv2_b]
    }

    /// Trainable parameters of the confidence head.
    pub fn head_ids(&self) -> Vec<ParamId> {
        vec![
            self.head1_w,
            self.head1_b,
            self.bn_gamma,
            self.bn_beta,
            self.head2_w,
            self.head2_b,
        ]
    }

    /// Blend fresh batch statistics into the running estimates.
    pub fn update_running_stats(&self, store: &mut ParamStore, stats: &BatchStats) -> Result<()> {
        let blend = |running: &Tensor, batch: &[f64]| {
            if batch.len() != running.numel() {
                return Err(Error::shape(
                    "update_running_stats",
                    format!("{} statistics for {} channels", batch.len(), running.numel()),
                ));
            }
            let data = running
                .data()
                .iter()
                .zip(batch)
                .map(|(r, b)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b)
                .collect();
            Tensor::new(running.shape(), data)
        };
        let mean = blend(store.get(self.bn_mean), &stats.mean)?;
        let var = blend(store.get(self.bn_var), &stats.var)?;
        store.set(self.bn_mean, mean)?;
        store.set(self.bn_var, var)
    }
}

/// `images[N, Cin, S, S]` to `F[N, D, S/4, S/4]`.
pub fn backbone(tape: &mut Tape, store: &ParamStore, p: &EncoderParams, images: Var) -> Result<Var> {
    let w1 = tape.param(store, p.conv1_w)?;
    let b1 = tape.param(store, p.conv1_b)?;
    let w2 = tape.param(store, p.conv2_w)?;
    let b2 = tape.param(store, p.conv2_b)?;
    let x = tape.conv2d(images, w1, Some(b1), 2, 1)?;
    let x = tape.relu(x)?;
    let x = tape.conv2d(x, w2, Some(b2), 2, 1)?;
    tape.relu(x)
}

/// `F[N, D, H, W]` to `C[N, K, H, W]`, a distribution over `K` at every pixel.
/// Returns the batch statistics when `train` is set.
pub fn confidence_head(
    tape: &mut Tape,
    store: &ParamStore,
    p: &EncoderParams,
    f: Var,
    train: bool,
) -> Result<(Var, Option<BatchStats>)> {
    let w1 = tape.param(store, p.head1_w)?;
    let b1 = tape.param(store, p.head1_b)?;
    let gamma = tape.param(store, p.bn_gamma)?;
    let beta = tape.param(store, p.bn_beta)?;
    let w2 = tape.param(store, p.head2_w)?;
    let b2 = tape.param(store, p.head2_b)?;
    let x = tape.conv2d(f, w1, Some(b1), 1, 1)?;
    let (x, stats) = if train {
        tape.batch_norm(x, gamma, beta, BatchNormMode::Train { eps: BN_EPS })?
    } else {
        let mode = BatchNormMode::Eval {
            mean: store.get(p.bn_mean).data(),
            var: store.get(p.bn_var).data(),
            eps: BN_EPS,
        };
        tape.batch_norm(x, gamma, beta, mode)?
    };
    let x = tape.relu(x)?;
    let logits = tape.conv2d(x, w2, Some(b2), 1, 0)?;
    Ok((tape.softmax(logits, 1)?, stats))
}

/// Nodes `V[N, K, D]` with `v_k = sum_ij F[:, i, j] B[i, j] C[k, i, j]`.
///
/// `masks` is `[N, H, W]` and enters as a constant. Images whose mask is all
/// zero get zero nodes; their batch indices are returned so callers can warn.
pub fn semantic_pool(tape: &mut Tape, f: Var, masks: &Tensor, c: Var) -> Result<(Var, Vec<usize>)> {
    let (fs, cs) = (tape.shape(f).to_vec(), tape.shape(c).to_vec());
    let ok = fs.len() == 4
        && cs.len() == 4
        && masks.rank() == 3
        && fs[0] == cs[0]
        && fs[2..] == cs[2..]
        && masks.shape() == [fs[0], fs[2], fs[3]];
    if !ok {
        return Err(Error::shape(
            "semantic_pool",
            format!("F {fs:?}, mask {:?}, C {cs:?}", masks.shape()),
        ));
    }
    let (n, d, k, hw) = (fs[0], fs[1], cs[1], fs[2] * fs[3]);
    let mut expanded = Vec::with_capacity(n * k * hw);
    let mut empty = Vec::new();
    for (i, m) in masks.data().chunks_exact(hw).enumerate() {
        if m.iter().all(|&v| v == 0.0) {
            empty.push(i);
        }
        for _ in 0..k {
            expanded.extend_from_slice(m);
        }
    }
    if !empty.is_empty() {
        log::warn!("semantic_pool: all-zero mask for batch entries {empty:?}");
    }
    let b = tape.constant(Tensor::new(&[n, k, fs[2], fs[3]], expanded)?)?;
    let weights = tape.mul(c, b)?;
    let weights = tape.reshape(weights, &[n, k, hw])?;
    let f = tape.reshape(f, &[n, d, hw])?;
    let ft = tape.transpose(f)?;
    Ok((tape.bmm(weights, ft)?, empty))
}

/// Total variation of `C[N, K, H, W]`: absolute forward differences along
/// both spatial axes at in-range indices, divided by `N K H W`.
pub fn tv_loss(tape: &mut Tape, c: Var) -> Result<Var> {
    let s = tape.shape(c).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("tv_loss", format!("expected [N, K, H, W], got {s:?}")));
    }
    let count: usize = s.iter().product();
    let mut total: Option<Var> = None;
    for axis in [2, 3] {
        let len = s[axis];
        if len < 2 {
            continue;
        }
        let hi = tape.narrow(c, axis, 1, len - 1)?;
        let lo = tape.narrow(c, axis, 0, len - 1)?;
        let diff = tape.sub(hi, lo)?;
        let diff = tape.abs(diff)?;
        let part = tape.sum(diff)?;
        total = Some(match total {
            Some(t) => tape.add(t, part)?,
            None => part,
        });
    }
    match total {
        Some(t) => tape.scale(t, 1.0 / count as f64),
        None => tape.constant(Tensor::scalar(0.0)),
    }
}
