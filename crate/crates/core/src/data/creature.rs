use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Medium,
    Large,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Blue,
    Green,
    Yellow,
    Black,
    White,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BeakLength {
    Short,
    Long,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tail {
    Plain,
    Forked,
}

impl Size {
    pub const ALL: [Size; 3] = [Size::Small, Size::Medium, Size::Large];

    pub fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Medium => "medium",
            Size::Large => "large",
        }
    }

    pub fn rank(self) -> usize {
        self as usize
    }
}

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Blue,
        Color::Green,
        Color::Yellow,
        Color::Black,
        Color::White,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Blue => "blue",
            Color::Green => "green",
            Color::Yellow => "yellow",
            Color::Black => "black",
            Color::White => "white",
        }
    }

    /// Channel intensity in (0, 1].
    pub fn intensity(self) -> f64 {
        (self as usize + 1) as f64 / Self::ALL.len() as f64
    }
}

impl BeakLength {
    pub const ALL: [BeakLength; 2] = [BeakLength::Short, BeakLength::Long];

    pub fn word(self) -> &'static str {
        match self {
            BeakLength::Short => "short",
            BeakLength::Long => "long",
        }
    }
}

impl Tail {
    pub const ALL: [Tail; 2] = [Tail::Plain, Tail::Forked];

    pub fn word(self) -> &'static str {
        match self {
            Tail::Plain => "plain",
            Tail::Forked => "forked",
        }
    }
}

/// Attributes of a synthetic creature. Fully determines its rendering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreatureSpec {
    pub size: Size,
    pub belly: Color,
    pub wing: Color,
    pub crest: Color,
    pub beak: BeakLength,
    pub tail: Tail,
    /// Seed for the small positional jitter of the drawing.
    pub placement: u64,
}

/// The attribute axes, in the order captions mention them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Attribute {
    Size,
    Beak,
    Tail,
    Belly,
    Wing,
    Crest,
}

impl Attribute {
    pub const ALL: [Attribute; 6] = [
        Attribute::Size,
        Attribute::Beak,
        Attribute::Tail,
        Attribute::Belly,
        Attribute::Wing,
        Attribute::Crest,
    ];
}

/// Attribute values without the placement seed.
pub type AttributeKey = (Size, Color, Color, Color, BeakLength, Tail);

impl CreatureSpec {
    /// Number of distinct attribute combinations.
    pub const COMBINATIONS: usize = 3 * 6 * 6 * 6 * 2 * 2;

    pub fn key(&self) -> AttributeKey {
        (self.size, self.belly, self.wing, self.crest, self.beak, self.tail)
    }

    /// Every attribute combination with the given placement.
    pub fn enumerate(placement: u64) -> impl Iterator<Item = CreatureSpec> {
        let mut out = Vec::with_capacity(Self::COMBINATIONS);
        for size in Size::ALL {
            for belly in Color::ALL {
                for wing in Color::ALL {
                    for crest in Color::ALL {
                        for beak in BeakLength::ALL {
                            for tail in Tail::ALL {
                                out.push(CreatureSpec {
                                    size,
                                    belly,
                                    wing,
                                    crest,
                                    beak,
                                    tail,
                                    placement,
                                });
                            }
                        }
                    }
                }
            }
        }
        out.into_iter()
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        CreatureSpec {
            size: *Size::ALL.choose(rng).unwrap(),
            belly: *Color::ALL.choose(rng).unwrap(),
            wing: *Color::ALL.choose(rng).unwrap(),
            crest: *Color::ALL.choose(rng).unwrap(),
            beak: *BeakLength::ALL.choose(rng).unwrap(),
            tail: *Tail::ALL.choose(rng).unwrap(),
            placement: rng.gen(),
        }
    }

    /// Copy with `changes` distinct attributes set to different values and a fresh placement.
    pub fn mutated(&self, changes: usize, rng: &mut impl Rng) -> Self {
        let mut out = *self;
        out.placement = rng.gen();
        let attrs: Vec<Attribute> = Attribute::ALL
            .choose_multiple(rng, changes.min(Attribute::ALL.len()))
            .copied()
            .collect();
        fn other<T: Copy + PartialEq>(all: &[T], cur: T, rng: &mut impl Rng) -> T {
            let choices: Vec<T> = all.iter().copied().filter(|&v| v != cur).collect();
            *choices.choose(rng).unwrap()
        }
        for attr in attrs {
            match attr {
                Attribute::Size => out.size = other(&Size::ALL, out.size, rng),
                Attribute::Beak => out.beak = other(&BeakLength::ALL, out.beak, rng),
                Attribute::Tail => out.tail = other(&Tail::ALL, out.tail, rng),
                Attribute::Belly => out.belly = other(&Color::ALL, out.belly, rng),
                Attribute::Wing => out.wing = other(&Color::ALL, out.wing, rng),
                Attribute::Crest => out.crest = other(&Color::ALL, out.crest, rng),
            }
        }
        out
    }

    /// Attributes on which `self` and `other` differ, in caption order.
    pub fn differences(&self, other: &CreatureSpec) -> Vec<Attribute> {
        Attribute::ALL
            .into_iter()
            .filter(|attr| match attr {
                Attribute::Size => self.size != other.size,
                Attribute::Beak => self.beak != other.beak,
                Attribute::Tail => self.tail != other.tail,
                Attribute::Belly => self.belly != other.belly,
                Attribute::Wing => self.wing != other.wing,
                Attribute::Crest => self.crest != other.crest,
            })
            .collect()
    }
}
