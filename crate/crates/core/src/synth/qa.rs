// SPDX-License-Identifier: MIT OR Apache-2.0

//! Templated question/answer pairs whose answers depend on the image.

use super::image::SyntheticImage;
use super::vocab::{self, BOS, COUNT, DOMINANT, EOS, QMARK, WHAT, WHICH};
use crate::numerics::RngStream;

/// Fixed prompt length in tokens.
pub const PROMPT_LEN: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Template {
    /// "what class is at region r?" (quadrant majority, background answers `none`)
    RegionClass = 0,
    /// "count class c?" (number of objects of class c)
    CountClass = 1,
    /// "which class dominates?" (object class covering most patches)
    Dominant = 2,
}

impl Template {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Template::RegionClass),
            1 => Some(Template::CountClass),
            2 => Some(Template::Dominant),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QaPair {
    pub template: Template,
    pub prompt: Vec<u16>,
    /// Answer tokens, terminated by `EOS`.
    pub answer: Vec<u16>,
    /// Dominant object class, the global label used for linear probing.
    pub probe_label: u16,
}

/// Patch indices of quadrant `r` (0 = top-left, row-major order of quadrants).
pub fn region_patches(grid: usize, r: usize) -> Vec<usize> {
    let half = grid / 2;
    let (r0, c0) = ((r / 2) * half, (r % 2) * half);
    let (r1, c1) = (
        if r / 2 == 0 { half } else { grid },
        if r.is_multiple_of(2) { half } else { grid },
    );
    let mut out = Vec::new();
    for row in r0..r1 {
        for col in c0..c1 {
            out.push(row * grid + col);
        }
    }
    out
}

/// Object class with the largest patch footprint; ties go to the smaller class.
pub fn dominant_class(image: &SyntheticImage, patch: usize) -> u16 {
    let mut area = [0usize; vocab::NUM_CLASSES + 1];
    for (k, o) in image.objects.iter().enumerate() {
        area[o.class as usize] += image.object_patches(k, patch).len();
    }
    let mut best = 0u16;
    for c in 1..=vocab::NUM_CLASSES {
        if area[c] > area[best as usize] {
            best = c as u16;
        }
    }
    best
}

/// Draws a template and builds its prompt and correct answer from the
/// image's object list.
pub fn generate_qa(image: &SyntheticImage, patch: usize, rng: &mut RngStream) -> QaPair {
    assert!(
        !image.objects.is_empty(),
        "QA generation needs at least one object"
    );
    let grid = image.labels.grid();
    let probe_label = dominant_class(image, patch);
    let template = Template::from_u8(rng.below(3) as u8).expect("valid template");
    let (prompt, answer_tok) = match template {
        Template::RegionClass => {
            let r = rng.below(vocab::NUM_REGIONS);
            let cells = region_patches(grid, r);
            let mut counts = [0usize; vocab::NUM_CLASSES + 1];
            for (k, o) in image.objects.iter().enumerate() {
                for q in image.object_patches(k, patch) {
                    if cells.contains(&q) {
                        counts[o.class as usize] += 1;
                    }
                }
            }
            let object_cells: usize = counts.iter().sum();
            counts[0] = cells.len() - object_cells;
            let mut best = 0usize;
            for c in 1..counts.len() {
                if counts[c] > counts[best] {
                    best = c;
                }
            }
            (
                vec![BOS, WHAT, vocab::region_token(r), QMARK],
                vocab::class_token(best as u16),
            )
        }
        Template::CountClass => {
            let c = if rng.uniform() < 0.5 {
                image.objects[rng.below(image.objects.len())].class
            } else {
                1 + rng.below(vocab::NUM_CLASSES) as u16
            };
            let n = image.objects.iter().filter(|o| o.class == c).count() as u16;
            (
                vec![BOS, COUNT, vocab::class_token(c), QMARK],
                vocab::digit_token(n),
            )
        }
        Template::Dominant => (
            vec![BOS, WHICH, DOMINANT, QMARK],
            vocab::class_token(probe_label),
        ),
    };
    QaPair {
        template,
        prompt,
        answer: vec![answer_tok, EOS],
        probe_label,
    }
}

/// Right-pads an answer to `k` slots with the ignore token.
pub fn pad_answer(answer: &[u16], k: usize) -> Vec<u16> {
    let mut v = answer.to_vec();
    v.resize(k.max(answer.len()), vocab::IGNORE);
    v
}

/// Strips ignore-padding.
pub fn unpad_answer(answer: &[u16]) -> Vec<u16> {
    answer
        .iter()
        .copied()
        .filter(|&t| t != vocab::IGNORE)
        .collect()
}
