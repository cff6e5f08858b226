//! Template bank for comparison and single-creature captions.
//!
//! Comparison captions come in five paraphrase styles. Styles 0/1 and 2/3
//! are role-swapped versions of each other and style 4 is role-free, so the
//! bank is closed under exchanging `animal1` and `animal2`.

use rand::seq::SliceRandom;
use rand::Rng;

use super::creature::{Attribute, CreatureSpec};

pub const FIRST: &str = "animal1";
pub const SECOND: &str = "animal2";
pub const PAIR_CAPTIONS: usize = 5;
pub const SINGLE_CAPTIONS: usize = 10;

/// Captions for identical creatures.
pub const SAME_FAMILY: [&str; PAIR_CAPTIONS] = [
    "the two animals appear to be exactly the same",
    "the two animals look exactly the same",
    "both animals appear to be exactly the same",
    "the two animals appear to be identical",
    "there is no difference between the two animals",
];

/// Noun used for an attribute in comparison captions.
pub fn attribute_noun(attr: Attribute) -> &'static str {
    match attr {
        Attribute::Size => "body",
        Attribute::Beak => "beak",
        Attribute::Tail => "tail",
        Attribute::Belly => "belly",
        Attribute::Wing => "wing",
        Attribute::Crest => "crest",
    }
}

enum Delta {
    /// first is `more` than second on an ordered attribute
    Ordered {
        noun: &'static str,
        rel: &'static str,
        rel_rev: &'static str,
        aspect: &'static str,
    },
    Categorical {
        noun: &'static str,
        first: &'static str,
        second: &'static str,
        aspect: &'static str,
    },
}

fn delta(attr: Attribute, a: &CreatureSpec, b: &CreatureSpec) -> Delta {
    let ordered = |greater: bool, more: &'static str, less: &'static str, aspect| {
        let (rel, rel_rev) = if greater { (more, less) } else { (less, more) };
        Delta::Ordered {
            noun: attribute_noun(attr),
            rel,
            rel_rev,
            aspect,
        }
    };
    let categorical = |first, second, aspect| Delta::Categorical {
        noun: attribute_noun(attr),
        first,
        second,
        aspect,
    };
    match attr {
        Attribute::Size => ordered(a.size > b.size, "larger", "smaller", "body size"),
        Attribute::Beak => ordered(a.beak > b.beak, "longer", "shorter", "beak length"),
        Attribute::Tail => categorical(a.tail.word(), b.tail.word(), "tail shapes"),
        Attribute::Belly => categorical(a.belly.word(), b.belly.word(), "belly colors"),
        Attribute::Wing => categorical(a.wing.word(), b.wing.word(), "wing colors"),
        Attribute::Crest => categorical(a.crest.word(), b.crest.word(), "crest colors"),
    }
}

fn clause(d: &Delta, style: usize) -> String {
    let (x, y) = (FIRST, SECOND);
    match *d {
        Delta::Ordered {
            noun,
            rel,
            rel_rev,
            aspect,
        } => match style {
            0 => format!("{x} has a {rel} {noun} than {y}"),
            1 => format!("{y} has a {rel_rev} {noun} than {x}"),
            2 => format!("the {noun} of {x} is {rel} than that of {y}"),
            3 => format!("the {noun} of {y} is {rel_rev} than that of {x}"),
            _ => format!("the two animals differ in {aspect}"),
        },
        Delta::Categorical {
            noun,
            first,
            second,
            aspect,
        } => match style {
            0 => format!("{x} has a {first} {noun} while {y} has a {second} {noun}"),
            1 => format!("{y} has a {second} {noun} while {x} has a {first} {noun}"),
            2 => format!("the {noun} of {x} is {first} and the {noun} of {y} is {second}"),
            3 => format!("the {noun} of {y} is {second} and the {noun} of {x} is {first}"),
            _ => format!("the two animals have different {aspect}"),
        },
    }
}

/// The comparison caption of `a` against `b` in paraphrase `style` (0..5).
pub fn pair_caption(a: &CreatureSpec, b: &CreatureSpec, style: usize) -> String {
    let diffs = a.differences(b);
    if diffs.is_empty() {
        return SAME_FAMILY[style % PAIR_CAPTIONS].to_string();
    }
    diffs
        .iter()
        .map(|&attr| clause(&delta(attr, a, b), style % PAIR_CAPTIONS))
        .collect::<Vec<_>>()
        .join(" and ")
}

/// Five reference captions for a pair. The first is always style 0; `rng`
/// orders the other four.
pub fn caption_pair(a: &CreatureSpec, b: &CreatureSpec, rng: &mut impl Rng) -> Vec<String> {
    let mut styles: Vec<usize> = (1..PAIR_CAPTIONS).collect();
    styles.shuffle(rng);
    std::iter::once(0)
        .chain(styles)
        .map(|s| pair_caption(a, b, s))
        .collect()
}

/// Single-creature description in one of ten styles.
pub fn single_caption(spec: &CreatureSpec, style: usize) -> String {
    let (size, belly, wing, crest, beak, tail) = (
        spec.size.word(),
        spec.belly.word(),
        spec.wing.word(),
        spec.crest.word(),
        spec.beak.word(),
        spec.tail.word(),
    );
    match style % SINGLE_CAPTIONS {
        0 => {
            format!("a {size} animal with a {belly} belly {wing} wings a {crest} crest a {beak} beak and a {tail} tail")
        }
        1 => format!("this {size} animal has a {belly} belly and {wing} wings"),
        2 => format!("this animal has a {crest} crest and a {beak} beak"),
        3 => format!("a {size} animal with a {tail} tail"),
        4 => format!("the animal has {wing} wings and a {crest} crest"),
        5 => format!("this {size} animal has a {beak} beak and a {tail} tail"),
        6 => format!("the belly of this animal is {belly}"),
        7 => format!("a {size} animal with {wing} wings and a {belly} belly"),
        8 => format!("this animal has a {tail} tail and a {crest} crest"),
        _ => format!("a {size} {belly} animal with a {beak} beak"),
    }
}

/// `count` single captions (at least one). The first is the complete style 0.
pub fn caption_single(spec: &CreatureSpec, count: usize, rng: &mut impl Rng) -> Vec<String> {
    let mut styles: Vec<usize> = (1..SINGLE_CAPTIONS).collect();
    styles.shuffle(rng);
    std::iter::once(0)
        .chain(styles)
        .take(count.clamp(1, SINGLE_CAPTIONS))
        .map(|s| single_caption(spec, s))
        .collect()
}

/// Exchange the `animal1` and `animal2` roles in a caption.
pub fn swap_roles(caption: &str) -> String {
    caption
        .split(' ')
        .map(|w| match w {
            FIRST => SECOND,
            SECOND => FIRST,
            other => other,
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::creature::{Color, Size};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn base() -> CreatureSpec {
        CreatureSpec::enumerate(3).nth(500).unwrap()
    }

    #[test]
    fn identical_specs_use_the_same_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let caps = caption_pair(&base(), &base(), &mut rng);
        assert_eq!(caps[0], "the two animals appear to be exactly the same");
        let got: BTreeSet<_> = caps.iter().map(String::as_str).collect();
        let want: BTreeSet<_> = SAME_FAMILY.into_iter().collect();
        assert_eq!(got, want);
    }

    #[test]
    fn single_difference_mentions_its_attribute() {
        let a = base();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for changes in 0..40 {
            let b = a.mutated(1, &mut rng);
            let attr = a.differences(&b)[0];
            for cap in caption_pair(&a, &b, &mut rng) {
                let words: Vec<&str> = cap.split(' ').collect();
                assert!(
                    words.contains(&attribute_noun(attr)),
                    "{changes}: '{cap}' does not mention {attr:?}"
                );
            }
        }
    }

    #[test]
    fn swapping_creatures_swaps_roles() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a = CreatureSpec::random(&mut rng);
            let b = a.mutated(rng.gen_range(0..4), &mut rng);
            let ab: BTreeSet<String> = (0..PAIR_CAPTIONS).map(|s| pair_caption(&a, &b, s)).collect();
            let ba: BTreeSet<String> = (0..PAIR_CAPTIONS)
                .map(|s| swap_roles(&pair_caption(&b, &a, s)))
                .collect();
            assert_eq!(ab, ba);
        }
    }

    #[test]
    fn canonical_comparison_wording() {
        let a = CreatureSpec {
            size: Size::Large,
            belly: Color::Red,
            ..base()
        };
        let b = CreatureSpec {
            size: Size::Small,
            belly: Color::Blue,
            ..base()
        };
        assert_eq!(
            pair_caption(&a, &b, 0),
            "animal1 has a larger body than animal2 and animal1 has a red belly while animal2 has a blue belly"
        );
        assert_eq!(
            pair_caption(&a, &b, 3),
            "the body of animal2 is smaller than that of animal1 and the belly of animal2 is blue and the belly of animal1 is red"
        );
    }

    #[test]
    fn single_captions_count_and_lead() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let caps = caption_single(&base(), 10, &mut rng);
        assert_eq!(caps.len(), 10);
        assert_eq!(caps[0], single_caption(&base(), 0));
        let distinct: BTreeSet<_> = caps.iter().collect();
        assert_eq!(distinct.len(), 10);
        assert_eq!(caption_single(&base(), 0, &mut rng).len(), 1);
    }
}
