//! Comparisons between extracted networks: IoU, consecutive-step
//! gradualness, template matching and state-transition graphs.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::fbn::FbnMap;
use crate::volio::Mask;

pub const DEFAULT_FILTER_IOU: f64 = 0.3;
pub const UNASSIGNED: &str = "unassigned";

/// Labeled reference networks sharing one brain mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    pub labels: Vec<String>,
    pub templates: Vec<Mask>,
    pub mask: Mask,
}

impl TemplateSet {
    pub fn new(labels: Vec<String>, templates: Vec<Mask>, mask: Mask) -> Result<Self> {
        if labels.len() != templates.len() {
            return Err(Error::config(format!("{} labels for {} templates", labels.len(), templates.len())));
        }
        for (label, t) in labels.iter().zip(&templates) {
            if t.dims() != mask.dims() {
                return Err(Error::shape(format!("{label}: dims {:?}, mask {:?}", t.dims(), mask.dims())));
            }
            if t.data().iter().zip(mask.data()).any(|(&v, &m)| v && !m) {
                return Err(Error::config(format!("{label} extends outside the mask")));
            }
        }
        Ok(Self { labels, templates, mask })
    }

    /// Labels `template_0`, `template_1`, ...
    pub fn default_labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("template_{i}")).collect()
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }
}

/// `|a ∩ b| / |a ∪ b|`, 0 when both are empty.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("iou: {:?} vs {:?}", a.dims(), b.dims())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// `Σ min(a, b) / Σ max(a, b)` for non-negative maps, 0 when both vanish.
pub fn fuzzy_iou(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("fuzzy_iou: {} vs {} values", a.len(), b.len())));
    }
    let (mut lo, mut hi) = (0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        lo += x.min(y) as f64;
        hi += x.max(y) as f64;
    }
    Ok(if hi == 0.0 { 0.0 } else { lo / hi })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradualness {
    /// IoU of step `t` against step `t - 1`, for `t = 1..T`.
    pub per_step: Vec<f64>,
    pub average: f64,
}

pub fn consecutive_iou(series: &[FbnMap]) -> Result<Gradualness> {
    if series.len() < 2 {
        return Err(Error::config(format!("consecutive IoU needs at least two maps, got {}", series.len())));
    }
    let per_step = series.windows(2).map(|w| iou(&w[1].binary, &w[0].binary)).collect::<Result<Vec<_>>>()?;
    let average = per_step.iter().sum::<f64>() / per_step.len() as f64;
    Ok(Gradualness { per_step, average })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemplateMatch {
    /// Index of the best template if its IoU reaches the filter threshold.
    pub assigned: Option<usize>,
    pub best_index: usize,
    pub best_iou: f64,
}

/// Best-IoU template, keeping the lowest index on ties; below
/// `filter_threshold` the map stays unassigned.
pub fn match_template(fbn: &Mask, templates: &TemplateSet, filter_threshold: f64) -> Result<TemplateMatch> {
    if templates.is_empty() {
        return Err(Error::config("template set is empty"));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, t) in templates.templates.iter().enumerate() {
        let v = iou(fbn, t)?;
        if v > best.1 {
            best = (i, v);
        }
    }
    Ok(TemplateMatch { assigned: (best.1 >= filter_threshold).then_some(best.0), best_index: best.0, best_iou: best.1 })
}

/// Occupancy and transition counts over a labeled sequence.
///
/// A transition is counted only between two consecutive steps that are both
/// assigned; steps into and out of the unassigned pseudo-state are counted
/// separately and break chains.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionGraph {
    pub state_labels: Vec<String>,
    /// Per state, then the unassigned count last.
    pub occupancy: Vec<usize>,
    /// `transitions[from][to]`, self-transitions on the diagonal.
    pub transitions: Vec<Vec<usize>>,
    pub into_unassigned: Vec<usize>,
    pub out_of_unassigned: Vec<usize>,
    pub filter_threshold: f64,
}

impl TransitionGraph {
    pub fn unassigned(&self) -> usize {
        *self.occupancy.last().expect("occupancy holds the unassigned slot")
    }

    pub fn total_transitions(&self) -> usize {
        self.transitions.iter().flatten().sum()
    }

    /// The `k` largest off-diagonal transitions as `(from, to, count)`,
    /// larger counts first, then by `(from, to)`. Zero counts are skipped.
    pub fn top_transitions(&self, k: usize) -> Vec<(usize, usize, usize)> {
        let mut all: Vec<(usize, usize, usize)> = self
            .transitions
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().enumerate().map(move |(j, &c)| (i, j, c)))
            .filter(|&(i, j, c)| i != j && c > 0)
            .collect();
        all.sort_by(|a, b| b.2.cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
        all.truncate(k);
        all
    }
}

pub fn build_transition_graph(
    sequence: &[Option<usize>],
    state_labels: Vec<String>,
    filter_threshold: f64,
) -> Result<TransitionGraph> {
    if sequence.is_empty() {
        return Err(Error::config("transition graph needs a nonempty sequence"));
    }
    let n = state_labels.len();
    if let Some(s) = sequence.iter().flatten().find(|&&s| s >= n) {
        return Err(Error::config(format!("state {s} out of range for {n} labels")));
    }
    let mut g = TransitionGraph {
        state_labels,
        occupancy: vec![0; n + 1],
        transitions: vec![vec![0; n]; n],
        into_unassigned: vec![0; n],
        out_of_unassigned: vec![0; n],
        filter_threshold,
    };
    for s in sequence {
        g.occupancy[s.unwrap_or(n)] += 1;
    }
    for w in sequence.windows(2) {
        match (w[0], w[1]) {
            (Some(a), Some(b)) => g.transitions[a][b] += 1,
            (Some(a), None) => g.into_unassigned[a] += 1,
            (None, Some(b)) => g.out_of_unassigned[b] += 1,
            (None, None) => {}
        }
    }
    Ok(g)
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

/// Graphviz DOT rendering. Nodes carry their occupancy; edge pen width
/// scales linearly with the transition count (1 to 6). States and edges with
/// zero counts are omitted, and the ordering is fixed.
pub fn export_graph(g: &TransitionGraph) -> String {
    let mut out = String::new();
    out.push_str("digraph transitions {\n");
    let _ = writeln!(out, "  graph [label=\"filter IoU {:.2}\"];", g.filter_threshold);
    out.push_str("  node [shape=ellipse];\n");
    let n = g.state_labels.len();
    for (i, label) in g.state_labels.iter().enumerate() {
        let occ = g.occupancy[i];
        if occ > 0 {
            let _ = writeln!(out, "  {} [label=\"{}\\n{}\", occupancy={}];", quote(label), label.replace('"', "'"), occ, occ);
        }
    }
    let unassigned = g.occupancy[n];
    if unassigned > 0 {
        let _ = writeln!(
            out,
            "  {} [label=\"{}\\n{}\", occupancy={}, style=dashed];",
            quote(UNASSIGNED),
            UNASSIGNED,
            unassigned,
            unassigned
        );
    }
    let max = g
        .transitions
        .iter()
        .flatten()
        .chain(&g.into_unassigned)
        .chain(&g.out_of_unassigned)
        .copied()
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    let width = |c: usize| 1.0 + 5.0 * c as f64 / max;
    for (i, row) in g.transitions.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let (a, b) = (quote(&g.state_labels[i]), quote(&g.state_labels[j]));
                let _ = writeln!(out, "  {a} -> {b} [label=\"{c}\", count={c}, penwidth={:.3}];", width(c));
            }
        }
    }
    for (i, &c) in g.into_unassigned.iter().enumerate() {
        if c > 0 {
            let (a, b) = (quote(&g.state_labels[i]), quote(UNASSIGNED));
            let _ = writeln!(out, "  {a} -> {b} [label=\"{c}\", count={c}, penwidth={:.3}, style=dashed];", width(c));
        }
    }
    for (j, &c) in g.out_of_unassigned.iter().enumerate() {
        if c > 0 {
            let (a, b) = (quote(UNASSIGNED), quote(&g.state_labels[j]));
            let _ = writeln!(out, "  {a} -> {b} [label=\"{c}\", count={c}, penwidth={:.3}, style=dashed];", width(c));
        }
    }
    out.push_str("}\n");
    out
}

/// Per template, the best IoU over all time steps and the step attaining it
/// (earliest on ties).
pub fn compare_methods(series: &[FbnMap], templates: &TemplateSet) -> Result<Vec<(f64, usize)>> {
    templates
        .templates
        .iter()
        .map(|t| {
            let mut best = (0.0, 0);
            for (i, f) in series.iter().enumerate() {
                let v = iou(&f.binary, t)?;
                if v > best.0 {
                    best = (v, i);
                }
            }
            Ok(best)
        })
        .collect()
}

/// Two-column table `t<TAB>iou`, then an `average` row.
pub fn gradualness_tsv(g: &Gradualness) -> String {
    let mut out = String::from("t\tiou\n");
    for (i, v) in g.per_step.iter().enumerate() {
        let _ = writeln!(out, "{}\t{v:.6}", i + 1);
    }
    let _ = writeln!(out, "average\t{:.6}", g.average);
    out
}

/// Per time step: best template, its IoU and the assigned label.
pub fn assignments_tsv(matches: &[TemplateMatch], templates: &TemplateSet) -> String {
    let mut out = String::from("t\tbest_template\tbest_iou\tassigned\n");
    for (t, m) in matches.iter().enumerate() {
        let assigned = m.assigned.map_or(UNASSIGNED, |i| templates.labels[i].as_str());
        let _ = writeln!(out, "{t}\t{}\t{:.6}\t{assigned}", templates.labels[m.best_index], m.best_iou);
    }
    out
}

pub fn best_iou_tsv(best: &[(f64, usize)], templates: &TemplateSet) -> String {
    let mut out = String::from("template\tbest_iou\tt\n");
    for (label, (v, t)) in templates.labels.iter().zip(best) {
        let _ = writeln!(out, "{label}\t{v:.6}\t{t}");
    }
    out
}

/// Binary PGM (P5) montage of all `D` slices of a `(D, H, W)` map with values
/// in `[0, 1]`, laid out in a near-square grid separated by one dark pixel.
pub fn pgm_montage(values: &[f32], dims: [usize; 3]) -> Result<Vec<u8>> {
    let [d, h, w] = dims;
    if values.len() != d * h * w || d == 0 {
        return Err(Error::shape(format!("pgm_montage: {} values for dims {dims:?}", values.len())));
    }
    let cols = (d as f64).sqrt().ceil() as usize;
    let rows = d.div_ceil(cols);
    let (width, height) = (cols * (w + 1) - 1, rows * (h + 1) - 1);
    let mut pixels = vec![0u8; width * height];
    for z in 0..d {
        let (r, c) = (z / cols, z % cols);
        for y in 0..h {
            for x in 0..w {
                let v = values[(z * h + y) * w + x].clamp(0.0, 1.0);
                pixels[(r * (h + 1) + y) * width + c * (w + 1) + x] = (v * 255.0).round() as u8;
            }
        }
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}
