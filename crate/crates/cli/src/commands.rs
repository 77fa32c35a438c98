//! The four pipeline stages. Each writes into a staging directory that is
//! promoted to `out` only when every file has been written.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use scaae::analysis::{
    assignments_tsv, best_iou_tsv, build_transition_graph, compare_methods, consecutive_iou, export_graph,
    gradualness_tsv, match_template, pgm_montage, TemplateSet, TransitionGraph,
};
use scaae::fbn::{extract_series, FbnMap};
use scaae::model::{load_checkpoint, save_checkpoint, Model};
use scaae::synthdata::{generate, Manifest};
use scaae::trainer::{fit, TrainReport};
use scaae::volio::{read_mask, read_masked_volume, read_scv, write_mask, write_scv, write_volume, Mask, Payload};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::staging::Staging;

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const FBN_VALUES_FILE: &str = "fbn_values.scv";
pub const FBN_BINARY_FILE: &str = "fbn_binary.scv";
pub const FBN_META_FILE: &str = "extract.toml";
pub const MASK_FILE: &str = "mask.scv";

/// A series and the mask to read it with.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesInput {
    pub series: PathBuf,
    pub mask: PathBuf,
}

impl SeriesInput {
    /// The series and mask named by the manifest in a `generate` output.
    pub fn from_data_dir(dir: &Path) -> Result<Self> {
        let m = read_manifest(&dir.join(MANIFEST_FILE))?;
        Ok(Self { series: dir.join(m.series), mask: dir.join(m.mask) })
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn epoch_file(epoch: usize, epochs: usize) -> String {
    let width = epochs.to_string().len().max(2);
    format!("epoch_{epoch:0width$}.ckpt")
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Writes `series.scv`, `mask.scv`, one `template_<i>.scv` per planted
/// network and `manifest.toml`. `cfg` must carry a seed.
pub fn cmd_generate(cfg: &RunConfig, out: &Path, force: bool) -> Result<Manifest> {
    ensure!(cfg.seed.is_some(), "generate needs a seed");
    let (vol, truth) = generate(&cfg.synth).context("generating synthetic data")?;
    let stage = Staging::new(out, force)?;
    write_volume(&vol, &stage.file("series.scv"))?;
    write_mask(&truth.mask, &stage.file(MASK_FILE))?;
    let mut template_files = Vec::new();
    for (label, t) in truth.templates.labels.iter().zip(&truth.templates.templates) {
        let name = format!("{label}.scv");
        write_mask(t, &stage.file(&name))?;
        template_files.push(name);
    }
    let manifest = Manifest {
        series: "series.scv".into(),
        mask: MASK_FILE.into(),
        template_labels: truth.templates.labels.clone(),
        template_files,
        state_sequence: truth.state_sequence.clone(),
        config: cfg.synth.clone(),
    };
    stage.write(MANIFEST_FILE, toml::to_string(&manifest)?)?;
    stage.commit()?;
    Ok(manifest)
}

/// Trains on every time step of `inputs`, writing one checkpoint per epoch,
/// `loss.tsv` and the effective `config.toml`. `cfg` must carry a seed.
pub fn cmd_train(
    cfg: &RunConfig,
    inputs: &[SeriesInput],
    out: &Path,
    force: bool,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    ensure!(cfg.seed.is_some(), "train needs a seed");
    ensure!(!inputs.is_empty(), "no training series given");
    let dataset = inputs
        .iter()
        .map(|i| {
            read_masked_volume(&i.series, &i.mask)
                .with_context(|| format!("loading {} with mask {}", i.series.display(), i.mask.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    for (v, i) in dataset.iter().zip(inputs) {
        if v.spatial_dims() != cfg.model.input_dims {
            bail!(
                "{} has dims {:?} but model.input_dims is {:?}",
                i.series.display(),
                v.spatial_dims(),
                cfg.model.input_dims
            );
        }
    }
    let mut model = Model::<f32>::new(cfg.model.clone())?;
    let stage = Staging::new(out, force)?;
    let epochs = cfg.train.epochs;
    let mut last = Instant::now();
    let report = fit(&dataset, &mut model, &cfg.train, |epoch, m| {
        save_checkpoint(m, &stage.file(&epoch_file(epoch, epochs)))?;
        progress(epoch, last.elapsed().as_secs_f64());
        last = Instant::now();
        Ok(())
    })?;
    stage.write("loss.tsv", report.loss_table_tsv())?;
    stage.write("config.toml", cfg.to_toml()?)?;
    stage.commit()?;
    Ok(report)
}

/// Metadata stored next to an extracted stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractMeta {
    pub subject_id: String,
    /// File name of the checkpoint used.
    pub checkpoint: String,
    pub time_steps: usize,
    pub dims: [usize; 3],
    pub threshold_quantile: f64,
}

/// Extracts one map per time step and writes the value stack (f32), the
/// binary stack (u8), the mask, `extract.toml` and a PGM montage per step
/// under `slices/`.
pub fn cmd_extract(
    checkpoint: &Path,
    input: &SeriesInput,
    cfg: &RunConfig,
    out: &Path,
    force: bool,
) -> Result<Vec<FbnMap>> {
    let model = load_checkpoint::<f32>(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let series = read_masked_volume(&input.series, &input.mask)
        .with_context(|| format!("loading {} with mask {}", input.series.display(), input.mask.display()))?;
    let q = cfg.analysis.threshold_quantile;
    let maps = extract_series(&model, &series, q, cfg.analysis.extract_batch)?;
    let stage = Staging::new(out, force)?;
    let dims = series.spatial_dims();
    let dims4 = [maps.len(), dims[0], dims[1], dims[2]];
    let values: Vec<f32> = maps.iter().flat_map(|m| m.values.iter().copied()).collect();
    let binary: Vec<u8> = maps.iter().flat_map(|m| m.binary.data().iter().map(|&b| b as u8)).collect();
    write_scv(&stage.file(FBN_VALUES_FILE), dims4, &Payload::F32(values))?;
    write_scv(&stage.file(FBN_BINARY_FILE), dims4, &Payload::U8(binary))?;
    write_mask(series.mask(), &stage.file(MASK_FILE))?;
    let width = maps.len().saturating_sub(1).to_string().len().max(4);
    for m in &maps {
        stage.write(&format!("slices/t_{:0width$}.pgm", m.time_index), pgm_montage(&m.values, dims)?)?;
    }
    let meta = ExtractMeta {
        subject_id: series.subject_id.clone(),
        checkpoint: file_name(checkpoint),
        time_steps: maps.len(),
        dims,
        threshold_quantile: q,
    };
    stage.write(FBN_META_FILE, toml::to_string(&meta)?)?;
    stage.commit()?;
    Ok(maps)
}

/// Reads a directory written by [`cmd_extract`].
pub fn load_fbn_dir(dir: &Path) -> Result<Vec<FbnMap>> {
    let meta_path = dir.join(FBN_META_FILE);
    let meta: ExtractMeta = toml::from_str(
        &std::fs::read_to_string(&meta_path).with_context(|| format!("reading {}", meta_path.display()))?,
    )
    .with_context(|| format!("parsing {}", meta_path.display()))?;
    let expect = [meta.time_steps, meta.dims[0], meta.dims[1], meta.dims[2]];
    let read = |name: &str| -> Result<Payload> {
        let path = dir.join(name);
        let (dims, payload) = read_scv(&path).with_context(|| format!("reading {}", path.display()))?;
        ensure!(dims == expect, "{} has dims {dims:?}, metadata says {expect:?}", path.display());
        Ok(payload)
    };
    let (Payload::F32(values), Payload::U8(bits)) = (read(FBN_VALUES_FILE)?, read(FBN_BINARY_FILE)?) else {
        bail!("{} must hold f32 values and {} u8 flags", FBN_VALUES_FILE, FBN_BINARY_FILE);
    };
    let plane: usize = meta.dims.iter().product();
    (0..meta.time_steps)
        .map(|t| {
            let range = t * plane..(t + 1) * plane;
            Ok(FbnMap {
                dims: meta.dims,
                values: values[range.clone()].to_vec(),
                binary: Mask::new(meta.dims, bits[range].iter().map(|&b| b != 0).collect())?,
                time_index: t,
                subject_id: meta.subject_id.clone(),
                threshold_quantile: meta.threshold_quantile,
            })
        })
        .collect()
}

/// Where analysis templates come from.
#[derive(Debug, Clone, PartialEq)]
pub enum TemplateSource {
    /// A `generate` manifest; template files are resolved next to it.
    Manifest(PathBuf),
    /// Explicit mask and template files, labeled by file stem.
    Files { mask: PathBuf, templates: Vec<PathBuf> },
}

pub fn load_templates(source: &TemplateSource) -> Result<TemplateSet> {
    let load = |p: &Path| read_mask(p).with_context(|| format!("reading {}", p.display()));
    match source {
        TemplateSource::Manifest(path) => {
            let m = read_manifest(path)?;
            let dir = path.parent().unwrap_or(Path::new("."));
            let templates = m.template_files.iter().map(|f| load(&dir.join(f))).collect::<Result<Vec<_>>>()?;
            Ok(TemplateSet::new(m.template_labels, templates, load(&dir.join(&m.mask))?)?)
        }
        TemplateSource::Files { mask, templates } => {
            ensure!(!templates.is_empty(), "no template files given");
            let labels = templates
                .iter()
                .map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
                .collect();
            let masks = templates.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
            Ok(TemplateSet::new(labels, masks, load(mask)?)?)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisSummary {
    pub average_gradualness: f64,
    pub assignments: Vec<Option<usize>>,
    pub best_iou: Vec<f64>,
    pub graph: TransitionGraph,
}

/// Writes `gradualness.tsv`, `assignments.tsv`, `best_iou.tsv`,
/// `transitions.tsv` and `transitions.dot` for a stack from [`cmd_extract`].
pub fn cmd_analyze(
    fbn_dir: &Path,
    templates: &TemplateSource,
    cfg: &RunConfig,
    out: &Path,
    force: bool,
) -> Result<AnalysisSummary> {
    let maps = load_fbn_dir(fbn_dir)?;
    let templates = load_templates(templates)?;
    if let Some(m) = maps.first() {
        ensure!(
            m.dims == templates.mask.dims(),
            "maps have dims {:?}, templates {:?}",
            m.dims,
            templates.mask.dims()
        );
    }
    let filter = cfg.analysis.filter_iou;
    let gradual = consecutive_iou(&maps)?;
    let matches = maps.iter().map(|m| match_template(&m.binary, &templates, filter)).collect::<Result<Vec<_>, _>>()?;
    let assignments: Vec<Option<usize>> = matches.iter().map(|m| m.assigned).collect();
    let best = compare_methods(&maps, &templates)?;
    let graph = build_transition_graph(&assignments, templates.labels.clone(), filter)?;

    let stage = Staging::new(out, force)?;
    stage.write("gradualness.tsv", gradualness_tsv(&gradual))?;
    stage.write("assignments.tsv", assignments_tsv(&matches, &templates))?;
    stage.write("best_iou.tsv", best_iou_tsv(&best, &templates))?;
    stage.write("transitions.tsv", transitions_tsv(&graph))?;
    stage.write("transitions.dot", export_graph(&graph))?;
    stage.commit()?;
    Ok(AnalysisSummary {
        average_gradualness: gradual.average,
        assignments,
        best_iou: best.iter().map(|b| b.0).collect(),
        graph,
    })
}

/// Count matrix with a header row of target labels, then occupancy.
fn transitions_tsv(g: &TransitionGraph) -> String {
    let mut out = format!("from\\to\t{}\n", g.state_labels.join("\t"));
    for (label, row) in g.state_labels.iter().zip(&g.transitions) {
        let cells: Vec<String> = row.iter().map(usize::to_string).collect();
        out.push_str(&format!("{label}\t{}\n", cells.join("\t")));
    }
    out.push_str("\nstate\toccupancy\n");
    for (label, n) in g.state_labels.iter().zip(&g.occupancy) {
        out.push_str(&format!("{label}\t{n}\n"));
    }
    out.push_str(&format!("{}\t{}\n", scaae::analysis::UNASSIGNED, g.unassigned()));
    out
}
