//! The full comparison captioner: one encoder, one graph and one decoder,
//! shared by both images of a pair and by the single-image task.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{downsample_mask, IMAGE_CHANNELS, IMAGE_SIZE};
use crate::decoder::{self, DecoderConfig, DecoderParams};
use crate::encoder::{self, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::graph::{self, GraphParams};
use crate::tensor::{BatchStats, ParamId, ParamStore, Tape, Tensor, Var};

/// Structural hyperparameters. Everything needed to rebuild the parameter set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub d: usize,
    pub k: usize,
    pub hidden: usize,
    pub embed: usize,
    pub gcn_layers: usize,
    pub vocab_size: usize,
    pub init_seed: u64,
    /// Replace masked semantic pooling by global average pooling copied to all nodes.
    pub no_semantic_pool: bool,
    /// Feed the pooled nodes to the decoder without the graph.
    pub no_gcn: bool,
}

impl ModelConfig {
    /// Small defaults that train in seconds on one core.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            in_channels: IMAGE_CHANNELS,
            image_size: IMAGE_SIZE,
            d: 32,
            k: 4,
            hidden: 64,
            embed: 32,
            gcn_layers: 2,
            vocab_size,
            init_seed: 0,
            no_semantic_pool: false,
            no_gcn: false,
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            in_channels: self.in_channels,
            image_size: self.image_size,
            d: self.d,
            k: self.k,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            vocab: self.vocab_size,
            embed: self.embed,
            d: self.d,
            hidden: self.hidden,
        }
    }
}

/// Output of [`L2cModel::encode`].
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[N, K, D]`
    pub nodes: Var,
    /// `[N, K, H, W]`, absent when semantic pooling is ablated.
    pub confidence: Option<Var>,
    pub stats: Option<BatchStats>,
    pub empty_masks: Vec<usize>,
}

/// A batch of images `[N, C, S, S]` and their downsampled masks `[N, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub images: Tensor,
    pub masks: Tensor,
}

impl ImageBatch {
    /// Stacks full-resolution `(image, mask)` pairs, pooling masks to `map_size`.
    pub fn stack<'a>(items: impl IntoIterator<Item = (&'a Tensor, &'a Tensor)>, map_size: usize) -> Result<Self> {
        let mut shape = None;
        let (mut images, mut masks, mut n) = (Vec::new(), Vec::new(), 0);
        for (img, mask) in items {
            if *shape.get_or_insert_with(|| img.shape().to_vec()) != img.shape() {
                return Err(Error::shape(
                    "ImageBatch::stack",
                    format!("mixed image shapes {:?}", img.shape()),
                ));
            }
            images.extend_from_slice(img.data());
            masks.extend_from_slice(downsample_mask(mask, map_size).data());
            n += 1;
        }
        let shape = shape.ok_or_else(|| Error::Data("empty image batch".into()))?;
        let mut full = vec![n];
        full.extend(shape);
        Ok(ImageBatch {
            images: Tensor::new(&full, images)?,
            masks: Tensor::new(&[n, map_size, map_size], masks)?,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `self` followed by `other` along the batch axis.
    pub fn concat(&self, other: &ImageBatch) -> Result<ImageBatch> {
        let join = |a: &Tensor, b: &Tensor| {
            if a.shape()[1..] != b.shape()[1..] {
                return Err(Error::shape(
                    "ImageBatch::concat",
                    format!("{:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
            let mut shape = a.shape().to_vec();
            shape[0] += b.shape()[0];
            Tensor::new(&shape, [a.data(), b.data()].concat())
        };
        Ok(ImageBatch {
            images: join(&self.images, &other.images)?,
            masks: join(&self.masks, &other.masks)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct L2cModel {
    config: ModelConfig,
    store: ParamStore,
    pub encoder: EncoderParams,
    pub graph: GraphParams,
    pub decoder: DecoderParams,
}

impl L2cModel {
    /// Fresh parameters drawn from `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let enc_cfg = config.encoder();
        enc_cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let encoder = EncoderParams::register(&mut store, &enc_cfg, &mut rng);
        let graph = GraphParams::register(&mut store, config.d, config.gcn_layers, &mut rng)?;
        let decoder = DecoderParams::register(&mut store, config.decoder(), &mut rng)?;
        Ok(L2cModel {
            config,
            store,
            encoder,
            graph,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn map_size(&self) -> usize {
        self.config.encoder().map_size()
    }

    /// Trainable parameters on a pathway the current configuration uses.
    pub fn active_ids(&self) -> Vec<ParamId> {
        let mut ids = self.encoder.backbone_ids();
        if !self.config.no_semantic_pool {
            ids.extend(self.encoder.head_ids());
        }
        if !self.config.no_gcn {
            ids.extend(self.graph.ids());
        }
        ids.extend(self.decoder.ids());
        ids
    }

    /// Image batch to nodes. `train` selects batch statistics for the head.
    pub fn encode(&self, tape: &mut Tape, batch: &ImageBatch, train: bool) -> Result<Encoded> {
        let x = tape.constant(batch.images.clone())?;
        let f = encoder::backbone(tape, &self.store, &self.encoder, x)?;
        if self.config.no_semantic_pool {
            let [n, d, h, w] = [0, 1, 2, 3].map(|i| tape.shape(f)[i]);
            let flat = tape.reshape(f, &[n, d, h * w])?;
            let avg = tape.mean_axis(flat, 2)?;
            let node = tape.reshape(avg, &[n, 1, d])?;
            let nodes = tape.concat(&vec![node; self.config.k], 1)?;
            return Ok(Encoded {
                nodes,
                confidence: None,
                stats: None,
                empty_masks: Vec::new(),
            });
        }
        let (c, stats) = encoder::confidence_head(tape, &self.store, &self.encoder, f, train)?;
        let (nodes, empty_masks) = encoder::semantic_pool(tape, f, &batch.masks, c)?;
        Ok(Encoded {
            nodes,
            confidence: Some(c),
            stats,
            empty_masks,
        })
    }

    /// Graph reasoning, or the identity when the graph is ablated.
    pub fn relate(&self, tape: &mut Tape, nodes: Var) -> Result<Var> {
        if self.config.no_gcn {
            Ok(nodes)
        } else {
            graph::relate(tape, &self.store, &self.graph, nodes)
        }
    }

    /// Difference context for pairs laid out as `[a_0..a_P, b_0..b_P]` along the batch.
    pub fn pair_context(&self, tape: &mut Tape, related: Var, pairs: usize, offset: usize) -> Result<Var> {
        let a = tape.narrow(related, 0, offset, pairs)?;
        let b = tape.narrow(related, 0, offset + pairs, pairs)?;
        let diff = graph::node_difference(tape, a, b)?;
        decoder::context(tape, diff)
    }

    /// Context for single images occupying `[offset, offset + count)` of the batch.
    pub fn single_context(&self, tape: &mut Tape, related: Var, count: usize, offset: usize) -> Result<Var> {
        let v = tape.narrow(related, 0, offset, count)?;
        decoder::context(tape, v)
    }

    pub fn update_running_stats(&mut self, stats: &BatchStats) -> Result<()> {
        self.encoder.update_running_stats(&mut self.store, stats)
    }

    /// Greedy comparison captions (token ids) for `a[i]` against `b[i]`,
    /// using running batch-norm statistics.
    pub fn caption_pairs(&self, a: &ImageBatch, b: &ImageBatch, max_len: usize) -> Result<Vec<Vec<usize>>> {
        if a.len() != b.len() {
            return Err(Error::Data(format!(
                "{} first images but {} second images",
                a.len(),
                b.len()
            )));
        }
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, &a.concat(b)?, false)?;
        let related = self.relate(&mut tape, enc.nodes)?;
        let ctx = self.pair_context(&mut tape, related, a.len(), 0)?;
        decoder::greedy_decode(&mut tape, &self.store, &self.decoder, ctx, max_len)
    }

    /// Greedy single-image captions.
    pub fn caption_singles(&self, batch: &ImageBatch, max_len: usize) -> Result<Vec<Vec<usize>>> {
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, batch, false)?;
        let related = self.relate(&mut tape, enc.nodes)?;
        let ctx = self.single_context(&mut tape, related, batch.len(), 0)?;
        decoder::greedy_decode(&mut tape, &self.store, &self.decoder, ctx, max_len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{render, CreatureSpec};
    use crate::tensor::gradient_check_params;

    fn tiny(vocab: usize) -> ModelConfig {
        ModelConfig {
            in_channels: IMAGE_CHANNELS,
            image_size: 8,
            d: 4,
            k: 3,
            hidden: 5,
            embed: 3,
            gcn_layers: 2,
            vocab_size: vocab,
            init_seed: 1,
            no_semantic_pool: false,
            no_gcn: false,
        }
    }

    fn batch(seed: u64, n: usize, size: usize) -> ImageBatch {
        let items: Vec<(Tensor, Tensor)> = CreatureSpec::enumerate(seed)
            .step_by(37)
            .take(n)
            .map(|s| {
                let (img, mask) = render(&s);
                // crop the centre so tiny test models stay tiny
                let off = (IMAGE_SIZE - size) / 2;
                let crop = |t: &Tensor, ch: usize| {
                    Tensor::from_fn(&[ch, size, size], |i| {
                        let (c, y, x) = (i / (size * size), i / size % size, i % size);
                        t.data()[c * IMAGE_SIZE * IMAGE_SIZE + (y + off) * IMAGE_SIZE + x + off]
                    })
                };
                (
                    crop(&img, IMAGE_CHANNELS),
                    crop(&mask, 1).reshaped(&[size, size]).unwrap(),
                )
            })
            .collect();
        ImageBatch::stack(items.iter().map(|(a, b)| (a, b)), size / 4).unwrap()
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = L2cModel::new(tiny(9)).unwrap();
        let b = L2cModel::new(tiny(9)).unwrap();
        for id in a.store().ids() {
            assert_eq!(a.store().get(id), b.store().get(id));
        }
        let c = L2cModel::new(ModelConfig {
            init_seed: 2,
            ..tiny(9)
        })
        .unwrap();
        assert_ne!(a.store().get(a.encoder.conv1_w), c.store().get(c.encoder.conv1_w));
    }

    #[test]
    fn ablations_drop_parameter_groups() {
        let full = L2cModel::new(tiny(9)).unwrap();
        let n = full.active_ids().len();
        let no_gcn = L2cModel::new(ModelConfig {
            no_gcn: true,
            ..tiny(9)
        })
        .unwrap();
        assert_eq!(no_gcn.active_ids().len(), n - full.graph.ids().len());
        let no_pool = L2cModel::new(ModelConfig {
            no_semantic_pool: true,
            ..tiny(9)
        })
        .unwrap();
        assert_eq!(no_pool.active_ids().len(), n - full.encoder.head_ids().len());
    }

    #[test]
    fn k_is_honoured_end_to_end() {
        for k in [1, 3, 6] {
            let m = L2cModel::new(ModelConfig { k, ..tiny(9) }).unwrap();
            let mut tape = Tape::new();
            let enc = m.encode(&mut tape, &batch(0, 2, 8), true).unwrap();
            assert_eq!(tape.shape(enc.confidence.unwrap())[1], k);
            let related = m.relate(&mut tape, enc.nodes).unwrap();
            assert_eq!(tape.shape(related), &[2, k, 4]);
        }
    }

    #[test]
    fn average_pool_ablation_replicates_nodes() {
        let m = L2cModel::new(ModelConfig {
            no_semantic_pool: true,
            ..tiny(9)
        })
        .unwrap();
        let mut tape = Tape::new();
        let enc = m.encode(&mut tape, &batch(0, 2, 8), true).unwrap();
        assert!(enc.confidence.is_none());
        let v = tape.value(enc.nodes);
        assert_eq!(v.shape(), &[2, 3, 4]);
        assert_eq!(v.data()[..4], v.data()[4..8]);
    }

    #[test]
    fn identical_pair_has_zero_context() {
        let m = L2cModel::new(tiny(9)).unwrap();
        let one = batch(3, 1, 8);
        let mut tape = Tape::new();
        let enc = m.encode(&mut tape, &one.concat(&one).unwrap(), false).unwrap();
        let related = m.relate(&mut tape, enc.nodes).unwrap();
        let ctx = m.pair_context(&mut tape, related, 1, 0).unwrap();
        assert!(tape.value(ctx).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn captions_are_deterministic() {
        let m = L2cModel::new(tiny(9)).unwrap();
        let (a, b) = (batch(1, 2, 8), batch(2, 2, 8));
        let first = m.caption_pairs(&a, &b, 5).unwrap();
        assert_eq!(first, m.caption_pairs(&a, &b, 5).unwrap());
        assert_eq!(m.caption_singles(&a, 5).unwrap().len(), 2);
        assert!(m.caption_pairs(&a, &batch(2, 1, 8), 5).is_err());
    }

    #[test]
    fn full_comparison_loss_gradients() {
        let m = L2cModel::new(tiny(9)).unwrap();
        let images = batch(4, 4, 8);
        let seqs = vec![vec![1, 4, 5, 2], vec![1, 6, 2]];
        let report = gradient_check_params(
            |tape, store| {
                // re-run the pipeline against the perturbed store
                let x = tape.constant(images.images.clone())?;
                let f = encoder::backbone(tape, store, &m.encoder, x)?;
                let (c, _) = encoder::confidence_head(tape, store, &m.encoder, f, true)?;
                let (v, _) = encoder::semantic_pool(tape, f, &images.masks, c)?;
                let r = graph::relate(tape, store, &m.graph, v)?;
                let a = tape.narrow(r, 0, 0, 2)?;
                let b = tape.narrow(r, 0, 2, 2)?;
                let diff = graph::node_difference(tape, a, b)?;
                let ctx = decoder::context(tape, diff)?;
                let (l, _) = decoder::teacher_forced_nll(tape, store, &m.decoder, ctx, &seqs)?;
                let tv = encoder::tv_loss(tape, c)?;
                tape.add(l, tv)
            },
            m.store(),
            &m.active_ids(),
            1e-5,
            Some(300),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
