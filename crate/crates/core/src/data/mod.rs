//! Synthetic creature dataset: specs, rendering, caption templates,
//! vocabulary, and the JSONL dataset layout.

pub mod captions;
pub mod creature;
pub mod dataset;
pub mod render;
pub mod vocab;

pub use creature::{Attribute, BeakLength, Color, CreatureSpec, Size, Tail};
pub use dataset::{
    generate_dataset, generate_records, Dataset, GenConfig, ImageSource, PairRecord, SingleRecord, Split, SplitData,
    SplitFractions,
};
pub use render::{downsample_mask, render, IMAGE_CHANNELS, IMAGE_SIZE};
pub use vocab::{normalize, tokenize, Vocab, BOS, EOS, PAD, UNK};
