use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::captions::{caption_pair, caption_single, SINGLE_CAPTIONS};
use super::creature::CreatureSpec;
use super::render::{render, IMAGE_CHANNELS, IMAGE_SIZE};
use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Where an image comes from: a synthetic spec, or precomputed tensor files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageSource {
    Spec(CreatureSpec),
    /// Paths to an `8 x 32 x 32` image tensor and a `32 x 32` mask tensor,
    /// relative to the dataset directory unless absolute.
    Files {
        image: PathBuf,
        mask: PathBuf,
    },
}

impl ImageSource {
    pub fn spec(&self) -> Option<&CreatureSpec> {
        match self {
            ImageSource::Spec(s) => Some(s),
            ImageSource::Files { .. } => None,
        }
    }

    /// Image and full-resolution mask.
    pub fn load(&self, base: &Path) -> Result<(Tensor, Tensor)> {
        match self {
            ImageSource::Spec(spec) => Ok(render(spec)),
            ImageSource::Files { image, mask } => {
                let read = |p: &Path| -> Result<Tensor> {
                    let full = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
                    let bytes = fs::read(&full).map_err(|e| Error::io(&full, e))?;
                    Tensor::read_from(&bytes[..])
                };
                let (img, m) = (read(image)?, read(mask)?);
                if img.shape() != [IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE] || m.shape() != [IMAGE_SIZE, IMAGE_SIZE] {
                    return Err(Error::Data(format!(
                        "image {:?} / mask {:?}: expected [{IMAGE_CHANNELS}, {IMAGE_SIZE}, {IMAGE_SIZE}] and [{IMAGE_SIZE}, {IMAGE_SIZE}]",
                        img.shape(),
                        m.shape()
                    )));
                }
                if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::Data(format!("mask {} is not binary", mask.display())));
                }
                Ok((img, m))
            }
        }
    }
}

/// A comparison example: two images and five reference descriptions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub a: ImageSource,
    pub b: ImageSource,
    pub captions: Vec<String>,
}

/// A single-image captioning example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingleRecord {
    pub id: String,
    pub spec: ImageSource,
    pub captions: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn pairs_file(self) -> String {
        format!("{}.jsonl", self.name())
    }

    pub fn singles_file(self) -> String {
        format!("singles_{}.jsonl", self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?} (train, val, test)")))
    }
}

pub const VOCAB_FILE: &str = "vocab.txt";

/// Train/val/test fractions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitFractions(pub [f64; 3]);

impl Default for SplitFractions {
    fn default() -> Self {
        Self([0.8, 0.1, 0.1])
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let f = self.0;
        if f.iter().any(|v| !v.is_finite() || *v < 0.0) || ((f[0] + f[1] + f[2]) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions {f:?} must be nonnegative and sum to 1"
            )));
        }
        Ok(())
    }

    /// Split sizes: rounded train and val counts, the remainder for test.
    pub fn sizes(&self, n: usize) -> Result<[usize; 3]> {
        self.validate()?;
        let train = (n as f64 * self.0[0]).round() as usize;
        let val = (n as f64 * self.0[1]).round() as usize;
        let test = n
            .checked_sub(train + val)
            .ok_or_else(|| Error::Config(format!("cannot split {n} records as {:?}", self.0)))?;
        let sizes = [train, val, test];
        for (i, (&size, &frac)) in sizes.iter().zip(&self.0).enumerate() {
            if frac > 0.0 && size == 0 {
                return Err(Error::Config(format!(
                    "{n} records are too few for a nonempty {} split",
                    Split::ALL[i].name()
                )));
            }
        }
        Ok(sizes)
    }
}

/// Pairs and singles for one split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplitData {
    pub pairs: Vec<PairRecord>,
    pub singles: Vec<SingleRecord>,
}

/// A generated or loaded dataset directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub train: SplitData,
    pub val: SplitData,
    pub test: SplitData,
    pub vocab: Vocab,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &SplitData {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub seed: u64,
    pub n_pairs: usize,
    pub n_singles: usize,
    pub fractions: SplitFractions,
    pub single_captions: usize,
}

impl GenConfig {
    pub fn new(seed: u64, n_pairs: usize, n_singles: usize) -> Self {
        Self {
            seed,
            n_pairs,
            n_singles,
            fractions: SplitFractions::default(),
            single_captions: SINGLE_CAPTIONS,
        }
    }
}

/// `n_pairs` comparison records with attribute-distinct `(a, b)` pairs and
/// `n_singles` attribute-distinct single records, deterministic in `seed`.
pub fn generate_records(
    seed: u64,
    n_pairs: usize,
    n_singles: usize,
    single_captions: usize,
) -> Result<(Vec<PairRecord>, Vec<SingleRecord>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_pairs = CreatureSpec::COMBINATIONS * 64;
    if n_pairs > max_pairs || n_singles > CreatureSpec::COMBINATIONS {
        return Err(Error::Config(format!(
            "at most {max_pairs} pairs and {} singles are available",
            CreatureSpec::COMBINATIONS
        )));
    }

    let mut seen = BTreeSet::new();
    let mut pairs = Vec::with_capacity(n_pairs);
    let mut attempts = 0usize;
    while pairs.len() < n_pairs {
        attempts += 1;
        if attempts > 100 * n_pairs + 1000 {
            return Err(Error::Config(format!("could not draw {n_pairs} distinct pairs")));
        }
        let a = CreatureSpec::random(&mut rng);
        // mostly near-identical creatures, as in fine-grained comparison data
        let changes = match rng.gen_range(0..10) {
            0 => 0,
            1..=5 => 1,
            _ => 2,
        };
        let b = a.mutated(changes, &mut rng);
        if !seen.insert((a.key(), b.key())) {
            continue;
        }
        let captions = caption_pair(&a, &b, &mut rng);
        pairs.push(PairRecord {
            id: format!("p{:05}", pairs.len()),
            a: ImageSource::Spec(a),
            b: ImageSource::Spec(b),
            captions,
        });
    }

    let mut seen = BTreeSet::new();
    let mut singles = Vec::with_capacity(n_singles);
    while singles.len() < n_singles {
        let spec = CreatureSpec::random(&mut rng);
        if !seen.insert(spec.key()) {
            continue;
        }
        let captions = caption_single(&spec, single_captions, &mut rng);
        singles.push(SingleRecord {
            id: format!("s{:05}", singles.len()),
            spec: ImageSource::Spec(spec),
            captions,
        });
    }
    Ok((pairs, singles))
}

fn split_vec<T: Clone>(items: &[T], sizes: [usize; 3]) -> [Vec<T>; 3] {
    let (train, rest) = items.split_at(sizes[0]);
    let (val, test) = rest.split_at(sizes[1]);
    [train.to_vec(), val.to_vec(), test.to_vec()]
}

/// Generate a dataset in memory. The vocabulary covers the training captions.
pub fn generate_dataset(cfg: &GenConfig, root: &Path) -> Result<Dataset> {
    let pair_sizes = cfg.fractions.sizes(cfg.n_pairs)?;
    let single_sizes = if cfg.n_singles == 0 {
        [0, 0, 0]
    } else {
        cfg.fractions.sizes(cfg.n_singles)?
    };
    let (pairs, singles) = generate_records(cfg.seed, cfg.n_pairs, cfg.n_singles, cfg.single_captions)?;
    let [ptr, pva, pte] = split_vec(&pairs, pair_sizes);
    let [str_, sva, ste] = split_vec(&singles, single_sizes);
    let vocab = Vocab::build(
        ptr.iter()
            .flat_map(|r| &r.captions)
            .chain(str_.iter().flat_map(|r| &r.captions))
            .map(String::as_str),
        1,
    );
    Ok(Dataset {
        root: root.to_path_buf(),
        train: SplitData {
            pairs: ptr,
            singles: str_,
        },
        val: SplitData {
            pairs: pva,
            singles: sva,
        },
        test: SplitData {
            pairs: pte,
            singles: ste,
        },
        vocab,
    })
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

fn validate_pairs(path: &Path, pairs: &[PairRecord]) -> Result<()> {
    for p in pairs {
        if p.captions.is_empty() {
            return Err(Error::Data(format!(
                "{}: pair {} has no captions",
                path.display(),
                p.id
            )));
        }
    }
    Ok(())
}

impl Dataset {
    /// Write split files and `vocab.txt` into `self.root`. Returns the written paths.
    pub fn write(&self) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let mut written = Vec::new();
        for split in Split::ALL {
            let data = self.split(split);
            let p = self.root.join(split.pairs_file());
            write_jsonl(&p, &data.pairs)?;
            written.push(p);
            let s = self.root.join(split.singles_file());
            write_jsonl(&s, &data.singles)?;
            written.push(s);
        }
        let v = self.root.join(VOCAB_FILE);
        self.vocab.save(&v)?;
        written.push(v);
        Ok(written)
    }

    /// Load a dataset directory. Missing singles files are treated as empty.
    pub fn load(root: &Path) -> Result<Self> {
        let vocab = Vocab::load(&root.join(VOCAB_FILE))?;
        let mut splits = Vec::new();
        for split in Split::ALL {
            let p = root.join(split.pairs_file());
            let pairs: Vec<PairRecord> = read_jsonl(&p)?;
            validate_pairs(&p, &pairs)?;
            let s = root.join(split.singles_file());
            let singles = if s.exists() { read_jsonl(&s)? } else { Vec::new() };
            splits.push(SplitData { pairs, singles });
        }
        let mut it = splits.into_iter();
        Ok(Dataset {
            root: root.to_path_buf(),
            train: it.next().unwrap(),
            val: it.next().unwrap(),
            test: it.next().unwrap(),
            vocab,
        })
    }
}
