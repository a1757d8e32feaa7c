// SPDX-License-Identifier: MIT OR Apache-2.0

//! The pipeline behind the command line: data generation, training, hidden
//! state dumps, per-layer metrics and baseline-versus-regularized reports.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::archive::TensorArchive;
use super::checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FILE};
use super::config::{RunConfig, CONFIG_FILE};
use super::svg::{heatmap, line_overlay, Series};
use crate::diagnostics::{
    layer_report, logit_lens, similarity_map, to_grid, LayerRow, LensLayer, SplitFeatures,
};
use crate::error::{Error, Result};
use crate::model::{EpochSampler, Mllm, Sample, StepReport, Trainer};
use crate::numerics::{RngStream, Tensor};
use crate::par::Exec;
use crate::synth::vocab::token_name;
use crate::synth::{
    generate_dataset, read_split, write_dataset, Example, ImageSpec, Manifest, Split,
};

pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_SUMMARY: &str = "metrics.toml";
pub const LENS_CSV: &str = "lens.csv";
/// Tokens listed per layer in logit-lens outputs.
pub const LENS_TOP_K: usize = 5;

/// Version tag written into reports.
pub fn version_string() -> String {
    format!("prelab-v{}", env!("CARGO_PKG_VERSION"))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn csv_error(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.into_inner()
        .map_err(|e| Error::Format(format!("csv: {e}")))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(bytes.as_slice())
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(csv_error)
}

// ---- gen-data ------------------------------------------------------------

/// Generates `n` examples and writes them under `out`. Invalid arguments are
/// rejected before anything touches the file system.
pub fn gen_data(n: usize, seed: u64, spec: &ImageSpec, out: &Path, exec: Exec) -> Result<Manifest> {
    let ds = generate_dataset(n, seed, spec, exec)?;
    write_dataset(&ds, out)?;
    Ok(ds.manifest)
}

// ---- train ---------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub l_lm: f64,
    pub l_pre: Option<f64>,
    pub l_total: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub wall_time: f64,
}

impl From<&StepReport> for TrainLogRow {
    fn from(r: &StepReport) -> Self {
        Self {
            step: r.step,
            l_lm: r.lm,
            l_pre: r.pre,
            l_total: r.total,
            grad_norm: r.grad_norm,
            lr: r.lr,
            wall_time: r.seconds,
        }
    }
}

fn check_dataset_fits(cfg: &RunConfig, examples: &[Example]) -> Result<()> {
    let Some(ex) = examples.first() else {
        return Err(Error::Validation("training split is empty".into()));
    };
    let side = cfg.model.grid * cfg.model.patch;
    if ex.image.pixels.shape() != [side, side] {
        return Err(Error::Validation(format!(
            "dataset images are {:?} but the model expects {side}×{side}",
            ex.image.pixels.shape()
        )));
    }
    Ok(())
}

/// Trains a freshly initialized model on `examples`. Batches are drawn by an
/// epoch sampler seeded from the model seed, so runs differing only in the
/// predictive weight see identical batch sequences.
pub fn train_model(
    cfg: &RunConfig,
    examples: &[Example],
    exec: Exec,
    mut on_step: impl FnMut(&StepReport, &Mllm) -> Result<()>,
) -> Result<(Mllm, Vec<StepReport>)> {
    cfg.validate()?;
    check_dataset_fits(cfg, examples)?;
    let model = Mllm::new(cfg.model.clone())?;
    let mut trainer = Trainer::new(model, cfg.train_config(), exec);
    let mut sampler = EpochSampler::new(
        examples.len(),
        RngStream::new(cfg.model.seed).substream("batches"),
    );
    let mut log = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let batch: Vec<Sample<'_>> = sampler
            .next_batch(cfg.batch_size)
            .into_iter()
            .map(|i| (&examples[i]).into())
            .collect();
        let r = trainer.step(&batch)?;
        on_step(&r, &trainer.model)?;
        log.push(r);
    }
    Ok((trainer.model, log))
}

/// `train`: writes the config snapshot, the per-step log and the final
/// checkpoint into the run directory.
pub fn cmd_train(
    cfg: &RunConfig,
    exec: Exec,
    mut progress: impl FnMut(&StepReport),
) -> Result<(Mllm, Vec<StepReport>)> {
    cfg.validate()?;
    let examples = read_split(&cfg.dataset, Split::Train)?;
    check_dataset_fits(cfg, &examples)?;
    let out = &cfg.out_dir;
    create_dir(out)?;
    cfg.save(&out.join(CONFIG_FILE))?;
    let (model, log) = train_model(cfg, &examples, exec, |r, m| {
        progress(r);
        if cfg.diag_every > 0 && r.step % cfg.diag_every == 0 && r.step < cfg.steps {
            save_checkpoint(m, &out.join(format!("checkpoint-step{:06}.prea", r.step)))?;
        }
        Ok(())
    })?;
    let rows: Vec<TrainLogRow> = log.iter().map(TrainLogRow::from).collect();
    write_file(&out.join(TRAIN_LOG_FILE), csv_bytes(&rows)?)?;
    save_checkpoint(&model, &out.join(CHECKPOINT_FILE))?;
    Ok((model, log))
}

pub fn read_train_log(run: &Path) -> Result<Vec<TrainLogRow>> {
    read_csv(&run.join(TRAIN_LOG_FILE))
}

/// Config and final weights of a finished run.
pub fn load_run(run: &Path) -> Result<(RunConfig, Mllm)> {
    let cfg = RunConfig::load(&run.join(CONFIG_FILE))?;
    let model = load_checkpoint(cfg.model.clone(), &run.join(CHECKPOINT_FILE))?;
    Ok((cfg, model))
}

// ---- dump ----------------------------------------------------------------

pub fn hidden_file(split: Split) -> String {
    format!("hidden-{split}.prea")
}

/// Pre-projector features `Z` followed by the visual states entering and
/// leaving every decoder layer, `L + 2` tensors per example.
pub fn visual_states(
    model: &Mllm,
    examples: &[Example],
    exec: Exec,
) -> Result<Vec<(Tensor, Vec<Tensor>)>> {
    exec.map(examples, |ex| {
        let t = model.forward(ex.into())?;
        let layers = (0..t.hidden.len()).map(|l| t.visual(l)).collect();
        Ok((t.z, layers))
    })
    .into_iter()
    .collect()
}

fn entry_name(id: u32, what: &str) -> String {
    format!("ex{id:06}/{what}")
}

pub fn dump_archive(model: &Mllm, examples: &[Example], exec: Exec) -> Result<TensorArchive> {
    let states = visual_states(model, examples, exec)?;
    let mut a = TensorArchive::new();
    for (ex, (z, layers)) in examples.iter().zip(states) {
        a.push(entry_name(ex.id, "z"), z)?;
        for (l, h) in layers.into_iter().enumerate() {
            a.push(entry_name(ex.id, &format!("h{l}")), h)?;
        }
    }
    Ok(a)
}

/// `dump`: hidden states of one split, written as `hidden-<split>.prea` in the run directory.
pub fn cmd_dump(run: &Path, data: &Path, split: Split, exec: Exec) -> Result<PathBuf> {
    let (_, model) = load_run(run)?;
    let examples = read_split(data, split)?;
    let path = run.join(hidden_file(split));
    dump_archive(&model, &examples, exec)?.write(&path)?;
    Ok(path)
}

fn features_from_states(examples: &[Example], states: Vec<Vec<Tensor>>) -> SplitFeatures {
    SplitFeatures {
        states,
        patch_labels: examples
            .iter()
            .map(|e| e.image.labels.ids().to_vec())
            .collect(),
        probe_labels: examples.iter().map(|e| e.qa.probe_label as usize).collect(),
    }
}

/// Decoder-layer visual states of `examples`, computed directly.
pub fn split_features(model: &Mllm, examples: &[Example], exec: Exec) -> Result<SplitFeatures> {
    let states = visual_states(model, examples, exec)?
        .into_iter()
        .map(|(_, l)| l)
        .collect();
    Ok(features_from_states(examples, states))
}

/// Decoder-layer visual states of `examples`, read back from a dump.
pub fn split_features_from_archive(
    archive: &TensorArchive,
    examples: &[Example],
    layers: usize,
) -> Result<SplitFeatures> {
    let expected = examples.len() * (layers + 2);
    if archive.len() != expected {
        return Err(Error::Format(format!(
            "dump holds {} entries, expected {expected} for {} examples",
            archive.len(),
            examples.len()
        )));
    }
    let states = examples
        .iter()
        .map(|ex| {
            (0..=layers)
                .map(|l| {
                    archive
                        .require(&entry_name(ex.id, &format!("h{l}")))
                        .cloned()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(features_from_states(examples, states))
}

// ---- metrics -------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub layer: usize,
    pub probe_acc: f64,
    pub cohesion: f64,
    pub coupling: f64,
    pub contrast: f64,
    pub eff_dim: usize,
    pub redundancy: f64,
    pub contrast_floored: usize,
    pub images: usize,
}

impl From<&LayerRow> for MetricsRow {
    fn from(r: &LayerRow) -> Self {
        Self {
            layer: r.layer,
            probe_acc: r.probe_acc,
            cohesion: r.patch.cohesion,
            coupling: r.patch.coupling,
            contrast: r.patch.contrast,
            eff_dim: r.eff_dim.dim,
            redundancy: r.redundancy,
            contrast_floored: r.patch.floored,
            images: r.patch.images,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LensRow {
    pub layer: usize,
    pub rank: usize,
    pub token: usize,
    pub name: String,
    pub mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub lambda: f64,
    pub target_layer: usize,
    pub anchor: String,
    pub probe_train_examples: usize,
    pub probe_test_examples: usize,
    pub eff_dim_degenerate_layers: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct MetricsOutput {
    pub rows: Vec<LayerRow>,
    pub lens: Vec<LensLayer>,
}

impl MetricsOutput {
    pub fn csv_rows(&self) -> Vec<MetricsRow> {
        self.rows.iter().map(MetricsRow::from).collect()
    }

    pub fn lens_rows(&self) -> Vec<LensRow> {
        self.lens
            .iter()
            .flat_map(|l| {
                l.top
                    .iter()
                    .enumerate()
                    .map(move |(rank, &(token, mass))| LensRow {
                        layer: l.layer,
                        rank: rank + 1,
                        token,
                        name: token_name(token as u16),
                        mass,
                    })
            })
            .collect()
    }
}

/// Per-layer table plus the logit lens over the probe-test states.
pub fn compute_metrics(
    model: &Mllm,
    train: &SplitFeatures,
    test: &SplitFeatures,
    exec: Exec,
) -> Result<MetricsOutput> {
    let rows = layer_report(train, test, exec)?;
    let lens = logit_lens(model, &test.states, LENS_TOP_K)?;
    Ok(MetricsOutput { rows, lens })
}

fn read_dump(run: &Path, split: Split) -> Result<TensorArchive> {
    let path = run.join(hidden_file(split));
    if !path.exists() {
        return Err(Error::Validation(format!(
            "{} is missing; run `dump --split {split}` first",
            path.display()
        )));
    }
    TensorArchive::read(&path)
}

/// `metrics`: reads both probe-split dumps of a run and writes `metrics.csv`,
/// `lens.csv` and `metrics.toml`.
pub fn cmd_metrics(run: &Path, data: &Path, exec: Exec) -> Result<MetricsOutput> {
    let (cfg, model) = load_run(run)?;
    let layers = cfg.model.layers;
    let train_ex = read_split(data, Split::ProbeTrain)?;
    let test_ex = read_split(data, Split::ProbeTest)?;
    let train =
        split_features_from_archive(&read_dump(run, Split::ProbeTrain)?, &train_ex, layers)?;
    let test = split_features_from_archive(&read_dump(run, Split::ProbeTest)?, &test_ex, layers)?;
    let out = compute_metrics(&model, &train, &test, exec)?;
    write_file(&run.join(METRICS_CSV), csv_bytes(&out.csv_rows())?)?;
    write_file(&run.join(LENS_CSV), csv_bytes(&out.lens_rows())?)?;
    let summary = MetricsSummary {
        version: version_string(),
        config_hash: cfg.hash(),
        seed: cfg.model.seed,
        lambda: cfg.model.lambda,
        target_layer: cfg.model.target_layer(),
        anchor: cfg.model.anchor.to_string(),
        probe_train_examples: train.len(),
        probe_test_examples: test.len(),
        eff_dim_degenerate_layers: out
            .rows
            .iter()
            .filter(|r| r.eff_dim.degenerate)
            .map(|r| r.layer)
            .collect(),
    };
    let text = toml::to_string(&summary).map_err(|e| Error::Format(format!("summary: {e}")))?;
    write_file(&run.join(METRICS_SUMMARY), text)?;
    Ok(out)
}

pub fn read_metrics(run: &Path) -> Result<Vec<MetricsRow>> {
    read_csv(&run.join(METRICS_CSV))
}

pub fn read_lens(run: &Path) -> Result<Vec<LensRow>> {
    read_csv(&run.join(LENS_CSV))
}

pub fn read_summary(run: &Path) -> Result<MetricsSummary> {
    let path = run.join(METRICS_SUMMARY);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::Format(format!("summary: {e}")))
}

// ---- report --------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ReportOptions {
    /// Position within the probe-test split of the image used for heatmaps.
    pub example: usize,
    /// Patch the similarity maps are taken from.
    pub patch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub layer: usize,
    pub metric: String,
    pub baseline: f64,
    pub pre: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LensComparisonRow {
    pub layer: usize,
    pub rank: usize,
    pub baseline_token: String,
    pub baseline_mass: f64,
    pub pre_token: String,
    pub pre_mass: f64,
}

pub type MetricAccessor = fn(&MetricsRow) -> f64;

/// Metrics shown as overlays, with the CSV accessor for each.
pub const PLOTTED_METRICS: [(&str, MetricAccessor); 4] = [
    ("probe_acc", |r| r.probe_acc),
    ("contrast", |r| r.contrast),
    ("eff_dim", |r| r.eff_dim as f64),
    ("redundancy", |r| r.redundancy),
];

const COMPARED_METRICS: [(&str, MetricAccessor); 6] = [
    ("probe_acc", |r| r.probe_acc),
    ("cohesion", |r| r.cohesion),
    ("coupling", |r| r.coupling),
    ("contrast", |r| r.contrast),
    ("eff_dim", |r| r.eff_dim as f64),
    ("redundancy", |r| r.redundancy),
];

/// `report`: comparison tables, one overlay SVG per plotted metric and
/// similarity heatmaps at the first, middle and last layer of both runs.
/// Returns the written paths.
pub fn cmd_report(
    baseline: &Path,
    pre: &Path,
    data: &Path,
    out: &Path,
    opts: &ReportOptions,
) -> Result<Vec<PathBuf>> {
    let base_rows = read_metrics(baseline)?;
    let pre_rows = read_metrics(pre)?;
    if base_rows.len() != pre_rows.len() || base_rows.is_empty() {
        return Err(Error::Validation(format!(
            "metric tables have {} and {} layers",
            base_rows.len(),
            pre_rows.len()
        )));
    }
    let test_ex = read_split(data, Split::ProbeTest)?;
    let Some(example) = test_ex.get(opts.example) else {
        return Err(Error::Validation(format!(
            "example {} outside the {} probe-test images",
            opts.example,
            test_ex.len()
        )));
    };
    let grid = example.image.labels.grid();
    if opts.patch >= grid * grid {
        return Err(Error::Validation(format!(
            "patch {} outside 0..{}",
            opts.patch,
            grid * grid
        )));
    }
    create_dir(out)?;
    let mut written = Vec::new();
    let mut emit = |name: String, contents: Vec<u8>| -> Result<()> {
        let path = out.join(name);
        write_file(&path, contents)?;
        written.push(path);
        Ok(())
    };

    let mut comparison = Vec::new();
    for (name, get) in COMPARED_METRICS {
        for (b, p) in base_rows.iter().zip(&pre_rows) {
            comparison.push(ComparisonRow {
                layer: b.layer,
                metric: name.to_string(),
                baseline: get(b),
                pre: get(p),
                delta: get(p) - get(b),
            });
        }
    }
    emit("comparison.csv".into(), csv_bytes(&comparison)?)?;

    for (name, get) in PLOTTED_METRICS {
        let series = [("baseline", &base_rows), ("pre", &pre_rows)].map(|(label, rows)| Series {
            name: label.to_string(),
            points: rows.iter().map(|r| (r.layer as f64, get(r))).collect(),
        });
        let svg = line_overlay(name, "layer", name, &series)?;
        emit(format!("{name}.svg"), svg.into_bytes())?;
    }

    let base_lens = read_lens(baseline)?;
    let pre_lens = read_lens(pre)?;
    let lens: Vec<LensComparisonRow> = base_lens
        .iter()
        .zip(&pre_lens)
        .map(|(b, p)| LensComparisonRow {
            layer: b.layer,
            rank: b.rank,
            baseline_token: b.name.clone(),
            baseline_mass: b.mass,
            pre_token: p.name.clone(),
            pre_mass: p.mass,
        })
        .collect();
    emit("lens_top5.csv".into(), csv_bytes(&lens)?)?;

    let last = base_rows.len() - 1;
    let mut layers = vec![0, last / 2, last];
    layers.dedup();
    for (label, run) in [("baseline", baseline), ("pre", pre)] {
        let dump = read_dump(run, Split::ProbeTest)?;
        for &l in &layers {
            let h = dump.require(&entry_name(example.id, &format!("h{l}")))?;
            let map = to_grid(&similarity_map(h, opts.patch)?, grid)?;
            let title = format!("{label} layer {l}, patch {}", opts.patch);
            emit(
                format!("similarity-{label}-layer{l}.svg"),
                heatmap(&title, &map)?.into_bytes(),
            )?;
        }
    }
    Ok(written)
}
