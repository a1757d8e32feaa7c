// SPDX-License-Identifier: MIT OR Apache-2.0

//! Fixed 64-symbol vocabulary shared by prompts and answers.

pub const VOCAB_SIZE: usize = 64;

pub const PAD: u16 = 0;
/// Marks padded answer slots that the language-modeling loss skips.
pub const IGNORE: u16 = 1;
pub const BOS: u16 = 2;
pub const EOS: u16 = 3;
pub const QMARK: u16 = 4;
pub const WHAT: u16 = 5;
pub const COUNT: u16 = 6;
pub const WHICH: u16 = 7;
pub const DOMINANT: u16 = 8;
pub const NONE: u16 = 9;
const CLASS_BASE: u16 = 10;
const DIGIT_BASE: u16 = 20;
const REGION_BASE: u16 = 30;

pub const NUM_CLASSES: usize = 10;
pub const NUM_REGIONS: usize = 4;

/// Token for object class `c` in `1..=10`; class 0 (background) maps to `NONE`.
pub fn class_token(c: u16) -> u16 {
    assert!(c as usize <= NUM_CLASSES, "class {c} out of range");
    if c == 0 {
        NONE
    } else {
        CLASS_BASE + c - 1
    }
}

pub fn token_class(t: u16) -> Option<u16> {
    match t {
        NONE => Some(0),
        t if (CLASS_BASE..CLASS_BASE + NUM_CLASSES as u16).contains(&t) => Some(t - CLASS_BASE + 1),
        _ => None,
    }
}

pub fn digit_token(d: u16) -> u16 {
    assert!(d < 10, "digit {d} out of range");
    DIGIT_BASE + d
}

pub fn token_digit(t: u16) -> Option<u16> {
    (DIGIT_BASE..DIGIT_BASE + 10)
        .contains(&t)
        .then(|| t - DIGIT_BASE)
}

pub fn region_token(r: usize) -> u16 {
    assert!(r < NUM_REGIONS, "region {r} out of range");
    REGION_BASE + r as u16
}

pub fn token_region(t: u16) -> Option<usize> {
    (REGION_BASE..REGION_BASE + NUM_REGIONS as u16)
        .contains(&t)
        .then(|| (t - REGION_BASE) as usize)
}

pub fn token_name(t: u16) -> String {
    match t {
        PAD => "<pad>".into(),
        IGNORE => "<ignore>".into(),
        BOS => "<bos>".into(),
        EOS => "<eos>".into(),
        QMARK => "?".into(),
        WHAT => "what".into(),
        COUNT => "count".into(),
        WHICH => "which".into(),
        DOMINANT => "dominant".into(),
        NONE => "none".into(),
        t => {
            if let Some(c) = token_class(t) {
                format!("class{c}")
            } else if let Some(d) = token_digit(t) {
                d.to_string()
            } else if let Some(r) = token_region(t) {
                format!("region{r}")
            } else {
                format!("<unused{t}>")
            }
        }
    }
}
