//! Deterministic rasterizer for [`CreatureSpec`]s.
//!
//! Each body part paints into its own channel so that attribute values
//! are linearly readable from the image:
//!
//! | channel | content |
//! |---|---|
//! | 0 | body and head silhouette |
//! | 1 | belly, intensity encodes color |
//! | 2 | wing, intensity encodes color |
//! | 3 | crest, intensity encodes color |
//! | 4 | beak |
//! | 5 | tail |
//! | 6 | body, intensity encodes size |
//! | 7 | union of all parts (equals the mask) |

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::creature::{BeakLength, CreatureSpec, Size, Tail};
use crate::tensor::Tensor;

pub const IMAGE_CHANNELS: usize = 8;
pub const IMAGE_SIZE: usize = 32;

const CH_BODY: usize = 0;
const CH_BELLY: usize = 1;
const CH_WING: usize = 2;
const CH_CREST: usize = 3;
const CH_BEAK: usize = 4;
const CH_TAIL: usize = 5;
const CH_SIZE: usize = 6;
const CH_UNION: usize = 7;

#[derive(Clone, Copy, Debug)]
enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Rect { x0: f64, x1: f64, y0: f64, y1: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => {
                let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
                dx * dx + dy * dy <= 1.0
            }
            Shape::Rect { x0, x1, y0, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
        }
    }
}

/// Body part regions of a creature, in pixel coordinates.
#[derive(Clone, Debug)]
pub struct Layout {
    body: Vec<Shape>,
    belly: Shape,
    wing: Shape,
    crest: Shape,
    beak: Shape,
    tail: Vec<Shape>,
}

impl Layout {
    pub fn of(spec: &CreatureSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.placement);
        let dx = rng.gen_range(-2i32..=2) as f64;
        let dy = rng.gen_range(-2i32..=2) as f64;
        let (cx, cy) = (14.0 + dx, 17.0 + dy);
        let r = match spec.size {
            Size::Small => 5.0,
            Size::Medium => 6.25,
            Size::Large => 7.5,
        };
        let (rx, ry) = (1.2 * r, 0.85 * r);
        let (hx, hy, hr) = (cx + 1.1 * r, cy - 0.7 * r, 0.45 * r);
        let beak_len = match spec.beak {
            BeakLength::Short => 2.0,
            BeakLength::Long => 4.5,
        };
        let tail_x0 = cx - rx - 4.0;
        let tail_x1 = cx - rx + 1.0;
        let tail = match spec.tail {
            Tail::Plain => vec![Shape::Rect {
                x0: tail_x0,
                x1: tail_x1,
                y0: cy - 1.2,
                y1: cy + 1.2,
            }],
            Tail::Forked => vec![
                Shape::Rect {
                    x0: tail_x0,
                    x1: tail_x1,
                    y0: cy - 3.0,
                    y1: cy - 1.5,
                },
                Shape::Rect {
                    x0: tail_x0,
                    x1: tail_x1,
                    y0: cy + 1.5,
                    y1: cy + 3.0,
                },
                Shape::Rect {
                    x0: tail_x1 - 1.5,
                    x1: tail_x1,
                    y0: cy - 3.0,
                    y1: cy + 3.0,
                },
            ],
        };
        Layout {
            body: vec![
                Shape::Ellipse { cx, cy, rx, ry },
                Shape::Ellipse {
                    cx: hx,
                    cy: hy,
                    rx: hr,
                    ry: hr,
                },
            ],
            belly: Shape::Ellipse {
                cx: cx + 0.1 * r,
                cy: cy + 0.35 * r,
                rx: 0.8 * r,
                ry: 0.45 * r,
            },
            wing: Shape::Ellipse {
                cx: cx - 0.2 * r,
                cy: cy - 0.2 * r,
                rx: 0.7 * r,
                ry: 0.35 * r,
            },
            crest: Shape::Ellipse {
                cx: hx,
                cy: hy - hr - 0.8,
                rx: 1.6,
                ry: 1.6,
            },
            beak: Shape::Rect {
                x0: hx + hr - 0.5,
                x1: hx + hr + beak_len,
                y0: hy - 0.9,
                y1: hy + 0.9,
            },
            tail,
        }
    }

    /// Pixels covered by the belly blob, as a `32 x 32` 0/1 grid.
    pub fn belly_region(&self) -> Vec<bool> {
        grid(|x, y| self.belly.contains(x, y))
    }
}

fn grid(f: impl Fn(f64, f64) -> bool) -> Vec<bool> {
    let mut out = vec![false; IMAGE_SIZE * IMAGE_SIZE];
    for py in 0..IMAGE_SIZE {
        for px in 0..IMAGE_SIZE {
            out[py * IMAGE_SIZE + px] = f(px as f64 + 0.5, py as f64 + 0.5);
        }
    }
    out
}

/// Render `spec` into an `8 x 32 x 32` image and its `32 x 32` binary mask.
pub fn render(spec: &CreatureSpec) -> (Tensor, Tensor) {
    let layout = Layout::of(spec);
    let n = IMAGE_SIZE * IMAGE_SIZE;
    let mut image = Tensor::zeros(&[IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE]);
    let mut mask = Tensor::zeros(&[IMAGE_SIZE, IMAGE_SIZE]);
    let size_code = (spec.size.rank() + 1) as f64 / Size::ALL.len() as f64;
    {
        let img = image.data_mut();
        let mut paint = |channel: usize, shapes: &[Shape], value: f64| {
            for py in 0..IMAGE_SIZE {
                for px in 0..IMAGE_SIZE {
                    let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
                    if shapes.iter().any(|s| s.contains(x, y)) {
                        img[channel * n + py * IMAGE_SIZE + px] = value;
                        img[CH_UNION * n + py * IMAGE_SIZE + px] = 1.0;
                    }
                }
            }
        };
        paint(CH_BODY, &layout.body, 1.0);
        paint(CH_SIZE, &layout.body, size_code);
        paint(CH_BELLY, &[layout.belly], spec.belly.intensity());
        paint(CH_WING, &[layout.wing], spec.wing.intensity());
        paint(CH_CREST, &[layout.crest], spec.crest.intensity());
        paint(CH_BEAK, &[layout.beak], 1.0);
        paint(CH_TAIL, &layout.tail, 1.0);
    }
    mask.data_mut()
        .copy_from_slice(&image.data()[CH_UNION * n..(CH_UNION + 1) * n]);
    (image, mask)
}

/// Max-pool a square binary mask down to `out x out`.
pub fn downsample_mask(mask: &Tensor, out: usize) -> Tensor {
    let size = mask.shape()[0];
    assert!(
        out > 0 && size.is_multiple_of(out),
        "mask {size} not divisible into {out}"
    );
    let f = size / out;
    let mut res = Tensor::zeros(&[out, out]);
    for oy in 0..out {
        for ox in 0..out {
            let mut m: f64 = 0.0;
            for y in oy * f..(oy + 1) * f {
                for x in ox * f..(ox + 1) * f {
                    m = m.max(mask.data()[y * size + x]);
                }
            }
            res.set(&[oy, ox], m);
        }
    }
    res
}
