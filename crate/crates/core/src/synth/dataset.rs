// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dataset generation, train/probe splits and the on-disk container.
//!
//! Container layout (little-endian):
//!
//! ```text
//! "PRDS" | version u16 | grid u16 | patch u16 | count u32
//! per example:
//!   id u32
//!   pixels f32 × side²
//!   labels u16 × grid²
//!   objects u8, then per object: class u16, top/left/bottom/right u16, intensity f32
//!   template u8 | probe_label u16
//!   prompt_len u8, u16 × prompt_len
//!   answer_len u8, u16 × answer_len
//! CRC32 (IEEE) of everything above, u32
//! ```

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::image::{generate_image, ImageSpec, PatchLabelMap, SceneObject, SyntheticImage};
use super::qa::{generate_qa, QaPair, Template};
use crate::error::{Error, Result};
use crate::numerics::{stable_hash, RngStream, Tensor};
use crate::par::Exec;

const MAGIC: &[u8; 4] = b"PRDS";
const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    ProbeTrain,
    ProbeTest,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::ProbeTrain, Split::ProbeTest];

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.bin",
            Split::ProbeTrain => "probe_train.bin",
            Split::ProbeTest => "probe_test.bin",
        }
    }

    /// Plain-text export of the split's patch-label grids.
    pub fn labels_file_name(self) -> &'static str {
        match self {
            Split::Train => "train.labels.txt",
            Split::ProbeTrain => "probe_train.labels.txt",
            Split::ProbeTest => "probe_test.labels.txt",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "probe-train" => Ok(Split::ProbeTrain),
            "probe-test" => Ok(Split::ProbeTest),
            other => Err(Error::Validation(format!(
                "unknown split {other:?} (expected train, probe-train or probe-test)"
            ))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::ProbeTrain => "probe-train",
            Split::ProbeTest => "probe-test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: u32,
    pub image: SyntheticImage,
    pub qa: QaPair,
}

/// Builds example `id` from its own substream of `seed`.
pub fn generate_example(seed: u64, id: u32, spec: &ImageSpec) -> Result<Example> {
    let mut rng = RngStream::new(seed).substream_idx(u64::from(id));
    let image = generate_image(&mut rng, spec)?;
    let qa = generate_qa(&image, spec.patch, &mut rng);
    Ok(Example { id, image, qa })
}

/// Assigns ids `0..n` to splits 80/10/10 by ranking them on a hash of the id.
/// Within each split ids are returned ascending.
pub fn split_ids(n: usize) -> [Vec<u32>; 3] {
    let mut ranked: Vec<u32> = (0..n as u32).collect();
    ranked.sort_by_key(|id| (stable_hash(&id.to_le_bytes()), *id));
    let train_end = n * 8 / 10;
    let probe_end = n * 9 / 10;
    let mut out = [
        ranked[..train_end].to_vec(),
        ranked[train_end..probe_end].to_vec(),
        ranked[probe_end..].to_vec(),
    ];
    for v in &mut out {
        v.sort_unstable();
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub probe_train: usize,
    pub probe_test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u16,
    pub seed: u64,
    pub n: usize,
    pub counts: SplitCounts,
    pub spec: ImageSpec,
}

impl Manifest {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Format(format!("manifest: {e}")))
    }
}

/// An in-memory dataset with all three splits.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: Vec<Example>,
    pub probe_train: Vec<Example>,
    pub probe_test: Vec<Example>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[Example] {
        match s {
            Split::Train => &self.train,
            Split::ProbeTrain => &self.probe_train,
            Split::ProbeTest => &self.probe_test,
        }
    }

    pub fn spec(&self) -> &ImageSpec {
        &self.manifest.spec
    }
}

pub fn generate_dataset(n: usize, seed: u64, spec: &ImageSpec, exec: Exec) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Validation("dataset size must be at least 1".into()));
    }
    spec.validate()?;
    let [tr, pt, te] = split_ids(n);
    let build = |ids: &[u32]| -> Result<Vec<Example>> {
        exec.map(ids, |&id| generate_example(seed, id, spec))
            .into_iter()
            .collect()
    };
    let train = build(&tr)?;
    let probe_train = build(&pt)?;
    let probe_test = build(&te)?;
    Ok(Dataset {
        manifest: Manifest {
            format_version: VERSION,
            seed,
            n,
            counts: SplitCounts {
                train: train.len(),
                probe_train: probe_train.len(),
                probe_test: probe_test.len(),
            },
            spec: spec.clone(),
        },
        train,
        probe_train,
        probe_test,
    })
}

fn put_u16(buf: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v =
        u16::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u16")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serializes one split.
pub fn encode_split(examples: &[Example], spec: &ImageSpec) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    put_u16(&mut buf, spec.grid, "grid")?;
    put_u16(&mut buf, spec.patch, "patch")?;
    buf.extend_from_slice(&(examples.len() as u32).to_le_bytes());
    let side = spec.side();
    for ex in examples {
        buf.extend_from_slice(&ex.id.to_le_bytes());
        if ex.image.pixels.shape() != [side, side] {
            return Err(Error::Format(format!(
                "example {} has wrong image shape",
                ex.id
            )));
        }
        for &v in ex.image.pixels.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &c in ex.image.labels.ids() {
            buf.extend_from_slice(&c.to_le_bytes());
        }
        buf.push(ex.image.objects.len() as u8);
        for o in &ex.image.objects {
            buf.extend_from_slice(&o.class.to_le_bytes());
            for e in [o.top, o.left, o.bottom, o.right] {
                put_u16(&mut buf, e, "object edge")?;
            }
            buf.extend_from_slice(&(o.intensity as f32).to_le_bytes());
        }
        buf.push(ex.qa.template as u8);
        buf.extend_from_slice(&ex.qa.probe_label.to_le_bytes());
        for seq in [&ex.qa.prompt, &ex.qa.answer] {
            buf.push(
                u8::try_from(seq.len())
                    .map_err(|_| Error::Format("token sequence too long".into()))?,
            );
            for t in seq.iter() {
                buf.extend_from_slice(&t.to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Verifies the trailing checksum and returns the payload it covers.
pub(crate) fn verify_crc(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < 4 {
        return Err(Error::Format("file too short for checksum".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok(body)
}

pub fn decode_split(bytes: &[u8]) -> Result<(usize, usize, Vec<Example>)> {
    let body = verify_crc(bytes)?;
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad dataset magic".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {version}"
        )));
    }
    let grid = r.u16()? as usize;
    let patch = r.u16()? as usize;
    let count = r.u32()? as usize;
    let side = grid * patch;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let id = r.u32()?;
        let mut px = Vec::with_capacity(side * side);
        for _ in 0..side * side {
            px.push(f64::from(r.f32()?));
        }
        let pixels = Tensor::from_vec(vec![side, side], px)?;
        let mut ids = Vec::with_capacity(grid * grid);
        for _ in 0..grid * grid {
            ids.push(r.u16()?);
        }
        let labels = PatchLabelMap::new(grid, ids)?;
        let n_obj = r.u8()? as usize;
        let mut objects = Vec::with_capacity(n_obj);
        for _ in 0..n_obj {
            let class = r.u16()?;
            let top = r.u16()? as usize;
            let left = r.u16()? as usize;
            let bottom = r.u16()? as usize;
            let right = r.u16()? as usize;
            let intensity = f64::from(r.f32()?);
            objects.push(SceneObject {
                class,
                top,
                left,
                bottom,
                right,
                intensity,
            });
        }
        let template =
            Template::from_u8(r.u8()?).ok_or_else(|| Error::Format("bad template id".into()))?;
        let probe_label = r.u16()?;
        let mut seqs = Vec::with_capacity(2);
        for _ in 0..2 {
            let len = r.u8()? as usize;
            let mut s = Vec::with_capacity(len);
            for _ in 0..len {
                s.push(r.u16()?);
            }
            seqs.push(s);
        }
        let answer = seqs.pop().expect("two sequences");
        let prompt = seqs.pop().expect("two sequences");
        out.push(Example {
            id,
            image: SyntheticImage {
                pixels,
                labels,
                objects,
            },
            qa: QaPair {
                template,
                prompt,
                answer,
                probe_label,
            },
        });
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes after last example".into()));
    }
    Ok((grid, patch, out))
}

pub const MANIFEST_FILE: &str = "manifest.toml";

/// Writes the three split containers, their label-grid exports and the
/// manifest into `dir`, creating it if needed.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in Split::ALL {
        let bytes = encode_split(ds.split(s), ds.spec())?;
        let path = dir.join(s.file_name());
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        let path = dir.join(s.labels_file_name());
        fs::write(&path, labels_to_text(ds.split(s))).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, ds.manifest.to_toml()).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Manifest::from_toml(&text)
}

pub fn read_split(dir: &Path, split: Split) -> Result<Vec<Example>> {
    let path = dir.join(split.file_name());
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(decode_split(&bytes)?.2)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    Ok(Dataset {
        train: read_split(dir, Split::Train)?,
        probe_train: read_split(dir, Split::ProbeTrain)?,
        probe_test: read_split(dir, Split::ProbeTest)?,
        manifest,
    })
}

/// Label maps of a split as plain-text grids, each preceded by `# example <id>`.
pub fn labels_to_text(examples: &[Example]) -> String {
    let mut s = String::new();
    for ex in examples {
        s.push_str(&format!("# example {}\n", ex.id));
        s.push_str(&ex.image.labels.to_text());
        s.push('\n');
    }
    s
}

pub fn labels_from_text(text: &str) -> Result<Vec<(u32, PatchLabelMap)>> {
    let mut out = Vec::new();
    let mut current: Option<(u32, String)> = None;
    let flush = |cur: Option<(u32, String)>, out: &mut Vec<(u32, PatchLabelMap)>| -> Result<()> {
        if let Some((id, body)) = cur {
            out.push((id, PatchLabelMap::from_text(&body)?));
        }
        Ok(())
    };
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# example ") {
            flush(current.take(), &mut out)?;
            let id = rest
                .trim()
                .parse()
                .map_err(|e| Error::Format(format!("bad example id {rest:?}: {e}")))?;
            current = Some((id, String::new()));
        } else if let Some((_, body)) = current.as_mut() {
            body.push_str(line);
            body.push('\n');
        } else if !line.trim().is_empty() {
            return Err(Error::Format("label grid before example header".into()));
        }
    }
    flush(current, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_fractions() {
        for n in [1usize, 7, 10, 99, 1000, 1234] {
            let [a, b, c] = split_ids(n);
            assert_eq!(a.len() + b.len() + c.len(), n);
            let f = |x: f64| x * n as f64;
            assert!((a.len() as f64 - f(0.8)).abs() <= 1.0);
            assert!((b.len() as f64 - f(0.1)).abs() <= 1.0);
            assert!((c.len() as f64 - f(0.1)).abs() <= 1.0);
        }
    }

    #[test]
    fn container_round_trip_and_corruption() {
        let spec = ImageSpec::default();
        let ds = generate_dataset(20, 3, &spec, Exec::Sequential).unwrap();
        let bytes = encode_split(&ds.train, &spec).unwrap();
        let (g, p, back) = decode_split(&bytes).unwrap();
        assert_eq!((g, p), (8, 4));
        assert_eq!(back.len(), ds.train.len());
        for (a, b) in back.iter().zip(&ds.train) {
            assert_eq!(a.image.labels, b.image.labels);
            assert_eq!(a.qa, b.qa);
            for (x, y) in a.image.pixels.data().iter().zip(b.image.pixels.data()) {
                assert_eq!(*x, f64::from(*y as f32));
            }
        }
        // re-encoding the decoded split reproduces the bytes
        assert_eq!(encode_split(&back, &spec).unwrap(), bytes);
        let mut bad = bytes.clone();
        bad[40] ^= 0x10;
        assert!(matches!(decode_split(&bad), Err(Error::Checksum { .. })));
    }

    #[test]
    fn zero_examples_is_rejected() {
        assert!(matches!(
            generate_dataset(0, 1, &ImageSpec::default(), Exec::Sequential),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn parallel_and_sequential_generation_agree() {
        let spec = ImageSpec::default();
        let a = generate_dataset(30, 5, &spec, Exec::Sequential).unwrap();
        let b = generate_dataset(30, 5, &spec, Exec::Parallel).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.probe_test, b.probe_test);
    }

    #[test]
    fn label_text_file_round_trip() {
        let ds = generate_dataset(10, 8, &ImageSpec::default(), Exec::Sequential).unwrap();
        let text = labels_to_text(&ds.train);
        let back = labels_from_text(&text).unwrap();
        assert_eq!(back.len(), ds.train.len());
        for ((id, map), ex) in back.iter().zip(&ds.train) {
            assert_eq!(*id, ex.id);
            assert_eq!(map, &ex.image.labels);
        }
    }

    #[test]
    fn written_files_are_byte_identical_across_runs() {
        let spec = ImageSpec::default();
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        for d in &dirs {
            let ds = generate_dataset(50, 21, &spec, Exec::Parallel).unwrap();
            write_dataset(&ds, d.path()).unwrap();
        }
        for name in [
            "train.bin",
            "probe_train.bin",
            "probe_test.bin",
            MANIFEST_FILE,
        ] {
            let a = fs::read(dirs[0].path().join(name)).unwrap();
            let b = fs::read(dirs[1].path().join(name)).unwrap();
            assert_eq!(a, b, "{name}");
        }
        let back = read_dataset(dirs[0].path()).unwrap();
        assert_eq!(back.manifest.n, 50);
        assert_eq!(
            back.train.len() + back.probe_train.len() + back.probe_test.len(),
            50
        );
    }

    #[test]
    fn object_classes_are_uniform_chi_square() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let spec = ImageSpec::default();
        let mut counts = vec![0f64; spec.num_classes];
        for id in 0..10_000 {
            let ex = generate_example(1234, id, &spec).unwrap();
            for o in &ex.image.objects {
                counts[o.class as usize - 1] += 1.0;
            }
        }
        let total: f64 = counts.iter().sum();
        let expected = total / spec.num_classes as f64;
        let stat: f64 = counts
            .iter()
            .map(|c| (c - expected).powi(2) / expected)
            .sum();
        let dist = ChiSquared::new((spec.num_classes - 1) as f64).unwrap();
        let p = 1.0 - dist.cdf(stat);
        assert!(p > 0.001, "chi2 {stat} p {p} counts {counts:?}");
    }
}
