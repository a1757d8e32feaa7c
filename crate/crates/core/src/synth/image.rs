// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::vocab::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};

const MAX_PLACEMENT_TRIES: usize = 100;
const TEXTURE_SEED: u64 = 0x7e87_u64;

/// Parameters of the synthetic scene generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSpec {
    /// Patches per side.
    pub grid: usize,
    /// Pixels per patch side.
    pub patch: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Per-pixel Gaussian noise.
    pub noise_std: f64,
    /// Amplitude of the zero-mean class texture tiled inside each patch.
    pub texture_amp: f64,
}

impl Default for ImageSpec {
    fn default() -> Self {
        Self {
            grid: 8,
            patch: 4,
            num_classes: NUM_CLASSES,
            min_objects: 1,
            max_objects: 4,
            noise_std: 0.05,
            texture_amp: 0.25,
        }
    }
}

impl ImageSpec {
    pub fn side(&self) -> usize {
        self.grid * self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid * self.grid
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(m.to_string()));
        if self.grid < 2 {
            return bad("grid must be at least 2");
        }
        if self.patch < 2 || !self.patch.is_multiple_of(2) {
            return bad("patch size must be an even number >= 2");
        }
        if self.num_classes == 0 || self.num_classes > NUM_CLASSES {
            return bad("num_classes must be in 1..=10");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects || self.max_objects > 4 {
            return bad("object counts must satisfy 1 <= min <= max <= 4");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and non-negative");
        }
        if !(self.texture_amp >= 0.0 && self.texture_amp.is_finite()) {
            return bad("texture_amp must be finite and non-negative");
        }
        Ok(())
    }
}

/// Base pixel intensity of object class `c` (`1..=10`); background is 0.
pub fn class_intensity(c: u16) -> f64 {
    if c == 0 {
        0.0
    } else {
        0.2 + 0.08 * f64::from(c - 1)
    }
}

/// Balanced ±1 pattern of `patch × patch` pixels for class `c`; sums to zero.
pub fn class_texture(c: u16, patch: usize) -> Vec<f64> {
    let n = patch * patch;
    let mut t: Vec<f64> = (0..n).map(|i| if i < n / 2 { 1.0 } else { -1.0 }).collect();
    let mut rng = RngStream::new(TEXTURE_SEED).substream_idx(u64::from(c));
    rng.shuffle(&mut t);
    t
}

/// g×g grid of class ids, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchLabelMap {
    grid: usize,
    ids: Vec<u16>,
}

impl PatchLabelMap {
    pub fn new(grid: usize, ids: Vec<u16>) -> Result<Self> {
        if grid == 0 || ids.len() != grid * grid {
            return Err(Error::InvalidArgument(format!(
                "label map of {} entries is not a {grid}x{grid} grid",
                ids.len()
            )));
        }
        Ok(Self { grid, ids })
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn ids(&self) -> &[u16] {
        &self.ids
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.ids[row * self.grid + col]
    }

    /// Distinct non-background classes, ascending.
    pub fn object_classes(&self) -> Vec<u16> {
        let mut v: Vec<u16> = self.ids.iter().copied().filter(|&c| c != 0).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Patch indices carrying class `c`.
    pub fn patches_of(&self, c: u16) -> Vec<usize> {
        self.ids
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == c)
            .map(|(i, _)| i)
            .collect()
    }

    /// Plain-text grid: one row per line, ids separated by single spaces.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in 0..self.grid {
            let row: Vec<String> = (0..self.grid).map(|c| self.get(r, c).to_string()).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let rows: Vec<Vec<u16>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split_whitespace()
                    .map(|t| {
                        t.parse::<u16>()
                            .map_err(|e| Error::Format(format!("bad label {t:?}: {e}")))
                    })
                    .collect::<Result<Vec<u16>>>()
            })
            .collect::<Result<_>>()?;
        let g = rows.len();
        if rows.iter().any(|r| r.len() != g) {
            return Err(Error::Format("label grid is not square".into()));
        }
        Self::new(g, rows.into_iter().flatten().collect())
    }
}

/// One rectangle in pixel coordinates (half-open) plus its patch footprint.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub class: u16,
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticImage {
    pub pixels: Tensor,
    pub labels: PatchLabelMap,
    pub objects: Vec<SceneObject>,
}

#[derive(Clone, Copy)]
struct PatchRect {
    r0: usize,
    c0: usize,
    r1: usize,
    c1: usize,
}

impl PatchRect {
    /// True if the rectangles overlap or touch (including diagonally).
    fn near(&self, o: &PatchRect) -> bool {
        self.r0 <= o.r1 && o.r0 <= self.r1 && self.c0 <= o.c1 && o.c0 <= self.c1
    }
}

/// Draws a scene of non-overlapping textured rectangles.
///
/// Rectangles are placed on the patch grid with at least one empty patch
/// between objects, then each pixel edge is jittered by at most one pixel so
/// objects are not perfectly patch-aligned. Patch labels come from majority
/// pixel ownership, which with this jitter recovers each object's patch
/// footprint exactly.
pub fn generate_image(rng: &mut RngStream, spec: &ImageSpec) -> Result<SyntheticImage> {
    spec.validate()?;
    let (g, p) = (spec.grid, spec.patch);
    let side = spec.side();
    let target = spec.min_objects + rng.below(spec.max_objects - spec.min_objects + 1);
    let mut placed: Vec<(PatchRect, u16)> = Vec::new();
    let max_extent = 4.min(g);
    for _ in 0..target {
        let class = 1 + rng.below(spec.num_classes) as u16;
        let mut accepted = None;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let h = rng.range_inclusive(1, max_extent);
            let w = rng.range_inclusive(1, max_extent);
            if h * w < 2 {
                continue;
            }
            let r0 = rng.below(g - h + 1);
            let c0 = rng.below(g - w + 1);
            let rect = PatchRect {
                r0,
                c0,
                r1: r0 + h - 1,
                c1: c0 + w - 1,
            };
            let grown = PatchRect {
                r0: rect.r0.saturating_sub(1),
                c0: rect.c0.saturating_sub(1),
                r1: rect.r1 + 1,
                c1: rect.c1 + 1,
            };
            if placed.iter().all(|(o, _)| !grown.near(o)) {
                accepted = Some(rect);
                break;
            }
        }
        if let Some(rect) = accepted {
            placed.push((rect, class));
        }
    }

    // Each edge moves by at most one pixel; both edges of one axis never move
    // inward together, so a one-patch-wide object keeps 3/4 coverage.
    let edge_shifts = |rng: &mut RngStream| -> (isize, isize) {
        let lo = rng.below(3) as isize - 1;
        let mut hi = rng.below(3) as isize - 1;
        if lo == 1 && hi == -1 {
            hi = 0;
        }
        (lo, hi)
    };
    let shift = |edge: usize, d: isize| (edge as isize + d).clamp(0, side as isize) as usize;
    let mut objects = Vec::with_capacity(placed.len());
    for (rect, class) in &placed {
        let (dt, db) = edge_shifts(rng);
        let (dl, dr) = edge_shifts(rng);
        objects.push(SceneObject {
            class: *class,
            top: shift(rect.r0 * p, dt),
            left: shift(rect.c0 * p, dl),
            bottom: shift((rect.r1 + 1) * p, db),
            right: shift((rect.c1 + 1) * p, dr),
            intensity: class_intensity(*class),
        });
    }

    let mut owner = vec![usize::MAX; side * side];
    for (k, o) in objects.iter().enumerate() {
        for y in o.top..o.bottom {
            for x in o.left..o.right {
                owner[y * side + x] = k;
            }
        }
    }
    let textures: Vec<Vec<f64>> = (0..=spec.num_classes as u16)
        .map(|c| class_texture(c, p))
        .collect();
    let mut pixels = Tensor::zeros(&[side, side]);
    for y in 0..side {
        for x in 0..side {
            let base = match owner[y * side + x] {
                usize::MAX => 0.0,
                k => {
                    let o = &objects[k];
                    o.intensity
                        + spec.texture_amp * textures[o.class as usize][(y % p) * p + (x % p)]
                }
            };
            pixels.set(y, x, base + spec.noise_std * rng.normal());
        }
    }

    let mut ids = vec![0u16; g * g];
    for pr in 0..g {
        for pc in 0..g {
            let mut counts = vec![0usize; objects.len() + 1];
            for y in pr * p..(pr + 1) * p {
                for x in pc * p..(pc + 1) * p {
                    match owner[y * side + x] {
                        usize::MAX => counts[0] += 1,
                        k => counts[k + 1] += 1,
                    }
                }
            }
            let (best, n) = counts
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .expect("nonempty");
            if best > 0 && 2 * n > p * p {
                ids[pr * g + pc] = objects[best - 1].class;
            }
        }
    }
    Ok(SyntheticImage {
        pixels,
        labels: PatchLabelMap::new(g, ids)?,
        objects,
    })
}

impl SyntheticImage {
    /// Patch footprint of object `k` under majority ownership.
    pub fn object_patches(&self, k: usize, patch: usize) -> Vec<usize> {
        let o = &self.objects[k];
        let g = self.labels.grid();
        let mut out = Vec::new();
        for pr in 0..g {
            for pc in 0..g {
                let y0 = pr * patch;
                let x0 = pc * patch;
                let oy = (o.bottom.min(y0 + patch)).saturating_sub(o.top.max(y0));
                let ox = (o.right.min(x0 + patch)).saturating_sub(o.left.max(x0));
                if 2 * oy * ox > patch * patch {
                    out.push(pr * g + pc);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_fixed_seed() {
        let spec = ImageSpec::default();
        let a = generate_image(&mut RngStream::new(0), &spec).unwrap();
        let b = generate_image(&mut RngStream::new(0), &spec).unwrap();
        assert_eq!(a, b);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.pixels), bits(&b.pixels));
    }

    #[test]
    fn labels_are_declared_classes_and_objects_are_disjoint() {
        let spec = ImageSpec::default();
        for seed in 0..200 {
            let img = generate_image(&mut RngStream::new(seed), &spec).unwrap();
            assert!((1..=4).contains(&img.objects.len()));
            let declared: Vec<u16> = img.objects.iter().map(|o| o.class).collect();
            for &c in img.labels.ids() {
                assert!(c == 0 || declared.contains(&c));
            }
            let mut used = std::collections::HashSet::new();
            for k in 0..img.objects.len() {
                let patches = img.object_patches(k, spec.patch);
                assert!(
                    patches.len() >= 2,
                    "seed {seed} object {k} covers {patches:?}"
                );
                for q in patches {
                    assert!(used.insert(q), "patch {q} shared");
                    assert_eq!(img.labels.ids()[q], img.objects[k].class);
                }
            }
            assert_eq!(
                used.len(),
                img.labels.ids().iter().filter(|&&c| c != 0).count()
            );
        }
    }

    #[test]
    fn object_intensity_statistics() {
        let spec = ImageSpec::default();
        let p = spec.patch;
        for seed in 0..50 {
            let img = generate_image(&mut RngStream::new(seed), &spec).unwrap();
            for o in &img.objects {
                // patches lying fully inside the pixel rectangle: texture sums to zero there
                let mut vals = Vec::new();
                for pr in 0..spec.grid {
                    for pc in 0..spec.grid {
                        let (y0, x0) = (pr * p, pc * p);
                        if y0 >= o.top && y0 + p <= o.bottom && x0 >= o.left && x0 + p <= o.right {
                            for y in y0..y0 + p {
                                for x in x0..x0 + p {
                                    vals.push(img.pixels.get(y, x));
                                }
                            }
                        }
                    }
                }
                if vals.is_empty() {
                    continue;
                }
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let tol = 3.0 * spec.noise_std / (vals.len() as f64).sqrt();
                assert!(
                    (mean - o.intensity).abs() <= tol,
                    "mean {mean} vs {} (tol {tol})",
                    o.intensity
                );
            }
        }
    }

    #[test]
    fn textures_are_balanced() {
        for c in 0..=10 {
            assert_eq!(class_texture(c, 4).iter().sum::<f64>(), 0.0);
        }
        assert_ne!(class_texture(1, 4), class_texture(2, 4));
    }

    #[test]
    fn label_text_round_trip() {
        let img = generate_image(&mut RngStream::new(9), &ImageSpec::default()).unwrap();
        let text = img.labels.to_text();
        assert_eq!(PatchLabelMap::from_text(&text).unwrap(), img.labels);
        assert!(PatchLabelMap::from_text("0 1\n2\n").is_err());
    }
}
