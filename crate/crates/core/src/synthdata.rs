//! Synthetic 4-D series with planted networks and a scripted state sequence.
//!
//! Each template is a smooth ellipsoidal blob inside a spherical brain mask.
//! At every step one template is active; the signal is
//!
//! ```text
//! x_t(v) = baseline(v) + amplitude · Σ_k w_k(t) · blob_k(v) + drift(t) + noise
//! ```
//!
//! where `w(t)` follows the state sequence with a two-step linear ramp at
//! each switch. Templates, the state sequence and the noise come from
//! independent ChaCha streams of the same seed, so the templates for a
//! given seed do not depend on the series length.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::analysis::{iou, TemplateSet};
use crate::error::{Error, Result};
use crate::volio::{Mask, Volume4D};

const TEMPLATE_STREAM: u64 = 1;
const SEQUENCE_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;
const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub dims: [usize; 3],
    pub n_templates: usize,
    /// Mean blob radius in voxels; each axis is jittered by up to ±15%.
    pub template_radius: f64,
    /// Width of the blob edge falloff in voxels.
    pub template_smoothness: f64,
    /// Largest IoU allowed between two binary templates.
    pub max_template_overlap: f64,
    /// Radius of the spherical brain mask in voxels.
    pub mask_radius: f64,
    pub time_steps: usize,
    /// Row-stochastic transition matrix; `None` selects [`default_markov`].
    pub markov: Option<Vec<Vec<f64>>>,
    pub dwell_min: usize,
    pub activation_amplitude: f64,
    pub noise_sigma: f64,
    /// Amplitude of the slow global sinusoid.
    pub drift: f64,
    /// Drift period in time steps.
    pub drift_period: f64,
    /// Peak-to-peak strength of the static spatial gradient in the baseline.
    pub baseline_gradient: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dims: [16, 16, 16],
            n_templates: 4,
            template_radius: 3.3,
            template_smoothness: 0.6,
            max_template_overlap: 0.3,
            mask_radius: 7.0,
            time_steps: 120,
            markov: None,
            dwell_min: 4,
            activation_amplitude: 2.0,
            noise_sigma: 0.3,
            drift: 0.3,
            drift_period: 40.0,
            baseline_gradient: 0.4,
            seed: 0,
        }
    }
}

/// Stay probability 0.8 with a dominant cycle `0 → 1 → 2 → 0`. For other
/// template counts: stay 0.8, the rest spread uniformly.
pub fn default_markov(n: usize) -> Vec<Vec<f64>> {
    if n == 4 {
        return vec![
            vec![0.80, 0.15, 0.03, 0.02],
            vec![0.02, 0.80, 0.15, 0.03],
            vec![0.15, 0.02, 0.80, 0.03],
            vec![0.07, 0.07, 0.06, 0.80],
        ];
    }
    if n == 1 {
        return vec![vec![1.0]];
    }
    let off = 0.2 / (n - 1) as f64;
    (0..n).map(|i| (0..n).map(|j| if i == j { 0.8 } else { off }).collect()).collect()
}

impl SynthConfig {
    pub fn markov_matrix(&self) -> Vec<Vec<f64>> {
        self.markov.clone().unwrap_or_else(|| default_markov(self.n_templates))
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) || self.n_templates == 0 || self.time_steps == 0 {
            return Err(Error::config("dims, n_templates and time_steps must be positive"));
        }
        validate_markov(&self.markov_matrix(), self.n_templates)?;
        let fit = self.dims.iter().map(|&d| (d as f64 - 1.0) / 2.0).fold(f64::INFINITY, f64::min);
        if !(self.mask_radius > 0.0 && self.mask_radius <= fit) {
            return Err(Error::config(format!("mask_radius {} must lie in (0, {fit}]", self.mask_radius)));
        }
        if !(self.template_radius > 0.0 && self.template_radius * 1.15 < self.mask_radius) {
            return Err(Error::config(format!(
                "template_radius {} does not fit inside mask_radius {}",
                self.template_radius, self.mask_radius
            )));
        }
        if !(self.noise_sigma >= 0.0) || !(self.template_smoothness > 0.0) {
            return Err(Error::config("noise_sigma must be >= 0 and template_smoothness > 0"));
        }
        if self.dwell_min == 0 {
            return Err(Error::config("dwell_min must be at least 1"));
        }
        Ok(())
    }
}

fn validate_markov(m: &[Vec<f64>], n: usize) -> Result<()> {
    if m.len() != n {
        return Err(Error::config(format!("markov matrix has {} rows, expected {n}", m.len())));
    }
    for (i, row) in m.iter().enumerate() {
        if row.len() != n {
            return Err(Error::config(format!("markov row {i} has {} entries, expected {n}", row.len())));
        }
        if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::config(format!("markov row {i} has an entry outside [0, 1]: {row:?}")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("markov row {i} sums to {sum}, expected 1")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub templates: TemplateSet,
    /// Continuous blob profiles in `[0, 1]`, one per template.
    pub profiles: Vec<Vec<f32>>,
    /// Active template per time step.
    pub state_sequence: Vec<usize>,
    pub mask: Mask,
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Samples a state sequence from `markov`. Every run lasts at least
/// `dwell_min` steps; afterwards each step draws the next state from the
/// current row. The first state is uniform.
pub fn scripted_sequence(markov: &[Vec<f64>], time_steps: usize, dwell_min: usize, seed: u64) -> Result<Vec<usize>> {
    validate_markov(markov, markov.len())?;
    if markov.is_empty() {
        return Err(Error::config("markov matrix is empty"));
    }
    let mut r = rng(seed, SEQUENCE_STREAM);
    let n = markov.len();
    let mut state = r.gen_range(0..n);
    let mut run = 0;
    let mut seq = Vec::with_capacity(time_steps);
    for _ in 0..time_steps {
        if run >= dwell_min.max(1) {
            let u: f64 = r.gen();
            let mut acc = 0.0;
            let mut next = n - 1;
            for (j, &p) in markov[state].iter().enumerate() {
                acc += p;
                if u < acc {
                    next = j;
                    break;
                }
            }
            if next != state {
                state = next;
                run = 0;
            }
        }
        seq.push(state);
        run += 1;
    }
    Ok(seq)
}

pub fn sphere_mask(dims: [usize; 3], radius: f64) -> Mask {
    let c = dims.map(|d| (d as f64 - 1.0) / 2.0);
    Mask::from_fn(dims, |z, y, x| {
        let d2 = (z as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (x as f64 - c[2]).powi(2);
        d2 <= radius * radius
    })
}

struct Blob {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Blob {
    /// Normalized ellipsoidal distance; 1 on the surface.
    fn distance(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|i| ((p[i] - self.center[i]) / self.radii[i]).powi(2)).sum::<f64>().sqrt()
    }
}

fn for_each_voxel(dims: [usize; 3], mut f: impl FnMut(usize, [f64; 3])) {
    let mut i = 0;
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                f(i, [z as f64, y as f64, x as f64]);
                i += 1;
            }
        }
    }
}

fn place_templates(cfg: &SynthConfig, mask: &Mask) -> Result<(Vec<Mask>, Vec<Vec<f32>>)> {
    let mut r = rng(cfg.seed, TEMPLATE_STREAM);
    let c = cfg.dims.map(|d| (d as f64 - 1.0) / 2.0);
    let mut binaries: Vec<Mask> = Vec::new();
    let mut profiles = Vec::new();
    let mut attempts = 0;
    while binaries.len() < cfg.n_templates {
        attempts += 1;
        if attempts > MAX_PLACEMENT_ATTEMPTS {
            return Err(Error::config(format!(
                "could not place {} templates with pairwise IoU <= {} after {MAX_PLACEMENT_ATTEMPTS} attempts",
                cfg.n_templates, cfg.max_template_overlap
            )));
        }
        let radii = [0; 3].map(|_| cfg.template_radius * r.gen_range(0.85..1.15));
        let reach = cfg.mask_radius - radii.iter().cloned().fold(0.0, f64::max);
        let offset = [0; 3].map(|_| r.gen_range(-reach..reach));
        if offset.iter().map(|o| o * o).sum::<f64>().sqrt() > reach {
            continue;
        }
        let blob = Blob { center: [c[0] + offset[0], c[1] + offset[1], c[2] + offset[2]], radii };
        let mut bits = vec![false; mask.len()];
        let mut profile = vec![0.0f32; mask.len()];
        let sharp = cfg.template_radius / cfg.template_smoothness;
        for_each_voxel(cfg.dims, |i, p| {
            if mask.data()[i] {
                let d = blob.distance(p);
                bits[i] = d <= 1.0;
                profile[i] = (1.0 / (1.0 + ((d - 1.0) * sharp).exp())) as f32;
            }
        });
        let candidate = Mask::new(cfg.dims, bits)?;
        if candidate.count() == 0 {
            continue;
        }
        let mut ok = true;
        for other in &binaries {
            if iou(&candidate, other)? > cfg.max_template_overlap {
                ok = false;
                break;
            }
        }
        if ok {
            binaries.push(candidate);
            profiles.push(profile);
        }
    }
    Ok((binaries, profiles))
}

/// Per-step template weights with a two-step ramp at every switch: the new
/// state enters at 1/3, 2/3, 1 while the old one leaves at 2/3, 1/3, 0.
pub fn activation_weights(sequence: &[usize], n_templates: usize) -> Vec<Vec<f64>> {
    let mut w = vec![vec![0.0; n_templates]; sequence.len()];
    let mut prev: Option<usize> = None;
    let mut since = usize::MAX;
    for (t, &s) in sequence.iter().enumerate() {
        if t > 0 && s != sequence[t - 1] {
            prev = Some(sequence[t - 1]);
            since = 0;
        }
        let ramp = if since < 2 { (since + 1) as f64 / 3.0 } else { 1.0 };
        w[t][s] += ramp;
        if let (Some(p), true) = (prev, since < 2) {
            w[t][p] += (2 - since) as f64 / 3.0;
        }
        since = since.saturating_add(1);
    }
    w
}

pub fn generate(cfg: &SynthConfig) -> Result<(Volume4D, GroundTruth)> {
    cfg.validate()?;
    let mask = sphere_mask(cfg.dims, cfg.mask_radius);
    let (binaries, profiles) = place_templates(cfg, &mask)?;
    let sequence = scripted_sequence(&cfg.markov_matrix(), cfg.time_steps, cfg.dwell_min, cfg.seed)?;
    let weights = activation_weights(&sequence, cfg.n_templates);

    let plane = mask.len();
    let mut baseline = vec![0.0f64; plane];
    let span = cfg.dims[0].max(2) as f64 - 1.0;
    for_each_voxel(cfg.dims, |i, p| {
        baseline[i] = 1.0 + cfg.baseline_gradient * (p[0] / span - 0.5);
    });

    let mut noise_rng = rng(cfg.seed, NOISE_STREAM);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut voxels = Vec::with_capacity(cfg.time_steps * plane);
    for (t, w) in weights.iter().enumerate() {
        let drift = cfg.drift * (2.0 * std::f64::consts::PI * t as f64 / cfg.drift_period).sin();
        for i in 0..plane {
            // Draw for every voxel so the stream layout is independent of the mask.
            let eps: f64 = normal.sample(&mut noise_rng);
            if !mask.data()[i] {
                voxels.push(0.0);
                continue;
            }
            let act: f64 = w.iter().zip(&profiles).map(|(&wk, p)| wk * p[i] as f64).sum();
            let v = baseline[i] + cfg.activation_amplitude * act + drift + cfg.noise_sigma * eps;
            voxels.push(v as f32);
        }
    }
    let [d, h, w] = cfg.dims;
    let mut vol = Volume4D::new([cfg.time_steps, d, h, w], voxels, mask.clone())?;
    vol.subject_id = format!("synth_{}", cfg.seed);
    let templates = TemplateSet::new(TemplateSet::default_labels(cfg.n_templates), binaries, mask.clone())?;
    Ok((vol, GroundTruth { templates, profiles, state_sequence: sequence, mask }))
}

/// Ground-truth manifest written next to generated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub series: String,
    pub mask: String,
    pub template_labels: Vec<String>,
    pub template_files: Vec<String>,
    pub state_sequence: Vec<usize>,
    pub config: SynthConfig,
}
