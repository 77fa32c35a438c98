//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line per criterion and exits nonzero if any failed.
//!
//! Shared training runs (seeds 7, 8 and 9 on the default synthetic dataset)
//! are written under the cargo target tmp directory and rebuilt every run.

#[path = "../../core/tests/common/oracles.rs"]
mod oracles;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{ensure, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scaae::analysis::{build_transition_graph, consecutive_iou, iou, TemplateSet};
use scaae::fbn::FbnMap;
use scaae::model::{Model, ModelConfig, TensorKind};
use scaae::tensor::*;
use scaae::trainer::{mse_loss, TrainReport};
use scaae::volio::Mask;
use scaae_cli::commands::{read_manifest, MANIFEST_FILE};
use scaae_cli::{cmd_analyze, cmd_extract, cmd_generate, cmd_train, load_templates, RunConfig, SeriesInput, TemplateSource};

const GRAD_TOL: f64 = 1e-4;
const RECOVERY_RATIO: f64 = 3.0;
const MIN_LOSS_REDUCTION: f64 = 0.5;
const MIN_GRADUALNESS_GAP: f64 = 0.10;
const MIN_EPOCH_STABILITY: f64 = 0.5;
const MAX_EXTRACT_FRACTION: f64 = 0.2;
const RECOVERY_SEEDS: [u64; 3] = [7, 8, 9];
const TRANSITION_STEPS: usize = 600;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome { passed, detail: detail.into() })
}

fn scratch(name: &str) -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name)
}

/// Default synthetic data and training hyperparameters; the network is
/// narrowed (width 8, 3³ attention kernels) to fit the time budget.
fn default_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        model: ModelConfig { encoder_width: 8, sa_channels: 4, sa_kernel: 3, ..Default::default() },
        ..Default::default()
    };
    cfg.analysis.extract_batch = 12;
    cfg.with_seed(Some(seed)).expect("seed given")
}

struct Run {
    cfg: RunConfig,
    data: PathBuf,
    train_dir: PathBuf,
    report: TrainReport,
    templates: TemplateSet,
    states: Vec<usize>,
    maps: Vec<FbnMap>,
    extract_seconds: f64,
}

fn default_run(seed: u64) -> Result<Run> {
    let cfg = default_config(seed);
    let root = scratch(&format!("seed{seed}"));
    let (data, train_dir) = (root.join("data"), root.join("train"));
    cmd_generate(&cfg, &data, true)?;
    let input = SeriesInput::from_data_dir(&data)?;
    let report = cmd_train(&cfg, std::slice::from_ref(&input), &train_dir, true, |_, _| {})?;
    let started = Instant::now();
    let maps = cmd_extract(&train_dir.join("epoch_20.ckpt"), &input, &cfg, &root.join("fbn20"), true)?;
    let extract_seconds = started.elapsed().as_secs_f64();
    let templates = load_templates(&TemplateSource::Manifest(data.join(MANIFEST_FILE)))?;
    let states = read_manifest(&data.join(MANIFEST_FILE))?.state_sequence;
    Ok(Run { cfg, data, train_dir, report, templates, states, maps, extract_seconds })
}

// ---- criterion 1 ------------------------------------------------------------

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn kernel(cout: usize, cin: usize, k: usize, stride: usize, padding: usize, rng: &mut ChaCha8Rng) -> ConvKernel<f64> {
    ConvKernel { weights: random(&[cout, cin, k, k, k], rng), bias: random(&[cout], rng), stride, padding, output_padding: 0 }
}

fn layer_grad_checks() -> Vec<(String, GradCheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut out = Vec::new();
    let mut push = |name: &str, r: GradCheckReport| out.push((name.to_string(), r));

    for (stride, pad, k) in [(1, 1, 3), (1, 2, 5), (2, 1, 3)] {
        let x = random(&[2, 2, 5, 4, 5], &mut rng);
        let kern = kernel(3, 2, k, stride, pad, &mut rng);
        push("conv3d input", grad_check(|x| conv3d(x, &kern).unwrap(), |x, g| conv3d_backward(x, &kern, g).unwrap().input, &x, GRAD_TOL));
        push(
            "conv3d weights",
            grad_check(
                |w| conv3d(&x, &ConvKernel { weights: w.clone(), ..kern.clone() }).unwrap(),
                |w, g| conv3d_backward(&x, &ConvKernel { weights: w.clone(), ..kern.clone() }, g).unwrap().weights,
                &kern.weights,
                GRAD_TOL,
            ),
        );
        push(
            "conv3d bias",
            grad_check(
                |b| conv3d(&x, &ConvKernel { bias: b.clone(), ..kern.clone() }).unwrap(),
                |b, g| conv3d_backward(&x, &ConvKernel { bias: b.clone(), ..kern.clone() }, g).unwrap().bias,
                &kern.bias,
                GRAD_TOL,
            ),
        );
    }

    let x = random(&[2, 3, 3, 3, 3], &mut rng);
    let kt = ConvKernel { output_padding: 1, ..kernel(3, 2, 3, 2, 1, &mut rng) };
    let kt = ConvKernel { bias: random(&[2], &mut rng), ..kt };
    push("conv3d_transposed input", grad_check(|x| conv3d_transposed(x, &kt).unwrap(), |x, g| conv3d_transposed_backward(x, &kt, g).unwrap().input, &x, GRAD_TOL));
    push(
        "conv3d_transposed weights",
        grad_check(
            |w| conv3d_transposed(&x, &ConvKernel { weights: w.clone(), ..kt.clone() }).unwrap(),
            |w, g| conv3d_transposed_backward(&x, &ConvKernel { weights: w.clone(), ..kt.clone() }, g).unwrap().weights,
            &kt.weights,
            GRAD_TOL,
        ),
    );

    let x = random(&[2, 3, 2, 3, 2], &mut rng).scale(2.0);
    let mut bn = BatchNormState::<f64>::new(3);
    bn.gamma = random(&[3], &mut rng);
    bn.beta = random(&[3], &mut rng);
    bn.running_var = random(&[3], &mut rng).map(|v| v.abs() + 0.5);
    for mode in [Mode::Train, Mode::Eval] {
        push(
            &format!("batchnorm input ({mode:?})"),
            grad_check(
                |x| batchnorm(x, &bn, mode).unwrap().0,
                |x, g| batchnorm_backward(&batchnorm(x, &bn, mode).unwrap().1, &bn, g).unwrap().0,
                &x,
                GRAD_TOL,
            ),
        );
        push(
            &format!("batchnorm gamma ({mode:?})"),
            grad_check(
                |gm| batchnorm(&x, &BatchNormState { gamma: gm.clone(), ..bn.clone() }, mode).unwrap().0,
                |gm, g| {
                    let s = BatchNormState { gamma: gm.clone(), ..bn.clone() };
                    batchnorm_backward(&batchnorm(&x, &s, mode).unwrap().1, &s, g).unwrap().1
                },
                &bn.gamma,
                GRAD_TOL,
            ),
        );
    }
    let x3 = x.scale(1.5);
    push("gelu", grad_check(|x| gelu(x), |x, g| gelu_backward(x, g).unwrap(), &x3, GRAD_TOL));
    push("sigmoid", grad_check(|x| sigmoid(x), |x, g| sigmoid_backward(&sigmoid(x), g).unwrap(), &x3, GRAD_TOL));
    push("global_avg_pool", grad_check(|x| global_avg_pool(x).unwrap(), |x, g| global_avg_pool_backward(x.shape(), g).unwrap(), &x, GRAD_TOL));
    let factor = random(&[2, 3], &mut rng);
    push("hadamard", grad_check(|x| hadamard(x, &factor).unwrap(), |x, g| hadamard_backward(x, &factor, g).unwrap().0, &x, GRAD_TOL));
    let other = random(&[2, 1, 2, 3, 2], &mut rng);
    push("concat", grad_check(|x| concat_channels(x, &other).unwrap(), |_, g| split_channels(g, 3).unwrap().0, &x, GRAD_TOL));

    let (fx, fw, fb) = (random(&[3, 4], &mut rng), random(&[4, 5], &mut rng), random(&[5], &mut rng));
    push("fully_connected input", grad_check(|x| fully_connected(x, &fw, &fb).unwrap(), |x, g| fully_connected_backward(x, &fw, &fb, g).unwrap().input, &fx, GRAD_TOL));
    push("fully_connected weights", grad_check(|w| fully_connected(&fx, w, &fb).unwrap(), |w, g| fully_connected_backward(&fx, w, &fb, g).unwrap().weights, &fw, GRAD_TOL));
    out
}

fn tiny_model() -> Model<f64> {
    Model::new(ModelConfig {
        encoder_width: 4,
        sa_channels: 2,
        sa_kernel: 3,
        ca_hidden: [3, 3],
        input_dims: [8, 8, 8],
        decoder_depth: 2,
        seed: 11,
    })
    .unwrap()
}

fn network_grad_checks() -> Vec<(String, GradCheckReport)> {
    let model = tiny_model();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let x = random(&[2, 1, 8, 8, 8], &mut rng);
    let mut out = vec![(
        "network input".to_string(),
        grad_check(
            |x| model.forward(x, Mode::Train).unwrap().0.reconstruction,
            |x, g| {
                let mut m = model.clone();
                let (_, cache) = m.forward(x, Mode::Train).unwrap();
                m.backward(&cache, g, true).unwrap().unwrap()
            },
            &x,
            GRAD_TOL,
        ),
    )];
    let params: Vec<(String, Tensor<f64>)> = model
        .named_tensors()
        .into_iter()
        .filter(|t| t.kind == TensorKind::Param)
        .map(|t| (t.name.clone(), Tensor::from_vec(t.tensor.shape().to_vec(), t.tensor.data().to_vec()).unwrap()))
        .collect();
    let with = |name: &str, p: &Tensor<f64>| {
        let mut m = model.clone();
        for t in m.named_tensors_mut() {
            if t.name == name {
                t.tensor.data_mut().copy_from_slice(p.data());
            }
        }
        m
    };
    for (name, value) in &params {
        let report = grad_check(
            |p| with(name, p).forward(&x, Mode::Train).unwrap().0.reconstruction,
            |p, g| {
                let mut m = with(name, p);
                m.zero_grad();
                let (_, cache) = m.forward(&x, Mode::Train).unwrap();
                m.backward(&cache, g, false).unwrap();
                let t = m.named_tensors().into_iter().find(|t| &t.name == name).unwrap();
                Tensor::from_vec(t.tensor.shape().to_vec(), t.tensor.grad.clone().unwrap()).unwrap()
            },
            value,
            GRAD_TOL,
        );
        out.push((format!("network {name}"), report));
    }
    out
}

fn criterion_1() -> Result<Outcome> {
    let mut checks = layer_grad_checks();
    checks.extend(network_grad_checks());
    let worst = checks.iter().max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error)).unwrap();
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1.passed).map(|c| c.0.as_str()).collect();
    let entries: usize = checks.iter().map(|c| c.1.checked).sum();
    outcome(
        failed.is_empty(),
        format!(
            "{} checks over {entries} entries; worst max rel error {:.2e} ({}) < {GRAD_TOL:e}; failed: {failed:?}",
            checks.len(),
            worst.1.max_rel_error,
            worst.0
        ),
    )
}

// ---- criterion 2 ------------------------------------------------------------

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_2() -> Result<Outcome> {
    const CASES: usize = 120;
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut conv, mut fc, mut gap, mut mse) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut iou_exact = true;
    for _ in 0..CASES {
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let (stride, pad) = (rng.gen_range(1..3), rng.gen_range(0..=k / 2 + 1));
        let (cin, cout) = (rng.gen_range(1..4), rng.gen_range(1..10));
        let dims: Vec<usize> = (0..3).map(|_| rng.gen_range(k.max(2)..10)).collect();
        let x = random(&[rng.gen_range(1..3), cin, dims[0], dims[1], dims[2]], &mut rng);
        let kern = kernel(cout, cin, k, stride, pad, &mut rng);
        let y = conv3d(&x, &kern)?;
        let (expect, shape) = oracles::conv3d_loop(
            x.data(),
            x.shape().try_into().unwrap(),
            kern.weights.data(),
            kern.weights.shape().try_into().unwrap(),
            kern.bias.data(),
            stride,
            pad,
        );
        ensure!(y.shape() == shape, "conv3d shape {:?} vs {shape:?}", y.shape());
        conv = conv.max(max_abs_diff(y.data(), &expect));

        let (b, f, g) = (rng.gen_range(1..5), rng.gen_range(1..12), rng.gen_range(1..12));
        let (xs, w, bias) = (random(&[b, f], &mut rng), random(&[f, g], &mut rng), random(&[g], &mut rng));
        fc = fc.max(max_abs_diff(fully_connected(&xs, &w, &bias)?.data(), &oracles::matmul_loop(xs.data(), w.data(), bias.data(), b, f, g)));

        let s: Vec<usize> = (0..5).map(|_| rng.gen_range(1..6)).collect();
        let t = random(&s, &mut rng);
        gap = gap.max(max_abs_diff(global_avg_pool(&t)?.data(), &oracles::gap_loop(t.data(), s[0], s[1], s[2] * s[3] * s[4])));

        let md = [rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5)];
        let plane: usize = md.iter().product();
        let mut bits: Vec<bool> = (0..plane).map(|_| rng.gen_bool(0.6)).collect();
        bits[rng.gen_range(0..plane)] = true;
        let batch = rng.gen_range(1..4);
        let shape = vec![batch, 1, md[0], md[1], md[2]];
        let (yt, yh) = (random(&shape, &mut rng), random(&shape, &mut rng));
        let (loss, _) = mse_loss(&yt, &yh, &Mask::new(md, bits.clone())?)?;
        let tiled: Vec<bool> = bits.iter().copied().cycle().take(batch * plane).collect();
        mse = mse.max((loss - oracles::mse_loop(yt.data(), yh.data(), &tiled)).abs());

        let a: Vec<bool> = (0..plane).map(|_| rng.gen_bool(0.5)).collect();
        let c: Vec<bool> = (0..plane).map(|_| rng.gen_bool(0.5)).collect();
        let (inter, union) = oracles::iou_counts_loop(&a, &c);
        let expect = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
        iou_exact &= iou(&Mask::new(md, a)?, &Mask::new(md, c)?)? == expect;
    }
    let passed = conv < 1e-6 && fc < 1e-8 && gap < 1e-10 && mse < 1e-10 && iou_exact;
    outcome(
        passed,
        format!(
            "{CASES} cases each; max |diff| conv3d {conv:.1e} (<1e-6), fully_connected {fc:.1e} (<1e-8), GAP {gap:.1e} (<1e-10), MSE {mse:.1e} (<1e-10), IoU exact: {iou_exact}"
        ),
    )
}

// ---- criteria on the shared runs -----------------------------------------

fn criterion_3(run: &Run) -> Result<Outcome> {
    let (first, last) = (run.report.initial_loss().unwrap(), run.report.final_loss().unwrap());
    let reduction = 1.0 - last / first;
    outcome(
        reduction >= MIN_LOSS_REDUCTION,
        format!("masked MSE {first:.4} -> {last:.4} after 20 epochs: {:.1}% reduction (need >= 50%)", reduction * 100.0),
    )
}

/// Mean IoU with the scripted active template, and the expected mean IoU
/// under a uniformly random relabeling of states. Under a uniform
/// permutation every template is equally likely at every step, so the
/// expectation is the per-step mean over all templates.
fn recovery(run: &Run) -> Result<(f64, f64)> {
    let n = run.maps.len() as f64;
    let mut truth = 0.0;
    let mut control = 0.0;
    for (m, &s) in run.maps.iter().zip(&run.states) {
        let all = run.templates.templates.iter().map(|t| iou(&m.binary, t)).collect::<Result<Vec<_>, _>>()?;
        truth += all[s];
        control += all.iter().sum::<f64>() / all.len() as f64;
    }
    Ok((truth / n, control / n))
}

fn criterion_4(runs: &[Run]) -> Result<Outcome> {
    let mut parts = Vec::new();
    let (mut truth, mut control) = (0.0, 0.0);
    for run in runs {
        let (t, c) = recovery(run)?;
        parts.push(format!("seed {}: {t:.3}/{c:.3} = {:.2}x", run.cfg.seed.unwrap(), t / c));
        truth += t;
        control += c;
    }
    let ratio = truth / control;
    outcome(
        ratio >= RECOVERY_RATIO,
        format!("pooled IoU vs permuted-label control {ratio:.2}x (need >= 3x); {}", parts.join(", ")),
    )
}

fn criterion_5(run: &Run) -> Result<Outcome> {
    let ordered = consecutive_iou(&run.maps)?.average;
    // Expected consecutive IoU of a uniformly shuffled order: every unordered
    // pair of distinct steps is equally likely to be adjacent.
    let n = run.maps.len();
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += iou(&run.maps[i].binary, &run.maps[j].binary)?;
        }
    }
    let shuffled = sum / (n * (n - 1) / 2) as f64;
    outcome(
        ordered - shuffled >= MIN_GRADUALNESS_GAP,
        format!("consecutive IoU {ordered:.3} vs shuffled {shuffled:.3}: gap {:.3} (need >= 0.10)", ordered - shuffled),
    )
}

/// Scripted and recovered top-3 transitions on a `TRANSITION_STEPS` series
/// from the run's generator seed, extracted with the run's final model.
fn transfer(run: &Run) -> Result<(bool, String)> {
    let mut cfg = run.cfg.clone();
    cfg.synth.time_steps = TRANSITION_STEPS;
    let seed = cfg.seed.unwrap();
    let root = scratch(&format!("transitions{seed}"));
    let data = root.join("data");
    let manifest = cmd_generate(&cfg, &data, true)?;
    let input = SeriesInput::from_data_dir(&data)?;
    let templates = TemplateSource::Manifest(data.join(MANIFEST_FILE));
    ensure!(load_templates(&templates)? == run.templates, "templates must not depend on series length");
    cmd_extract(&run.train_dir.join("epoch_20.ckpt"), &input, &cfg, &root.join("fbn"), true)?;
    let summary = cmd_analyze(&root.join("fbn"), &templates, &cfg, &root.join("report"), true)?;

    let scripted: Vec<Option<usize>> = manifest.state_sequence.iter().map(|&s| Some(s)).collect();
    let truth = build_transition_graph(&scripted, run.templates.labels.clone(), cfg.analysis.filter_iou)?;
    let recovered = summary.graph.top_transitions(3);
    let expected = truth.top_transitions(3);
    // A tie at third place admits any of the tied transitions.
    let cutoff = expected.last().map_or(0, |e| e.2);
    let must: Vec<(usize, usize)> = expected.iter().filter(|e| e.2 > cutoff).map(|e| (e.0, e.1)).collect();
    let ok = recovered.len() == expected.len()
        && must.iter().all(|m| recovered.iter().any(|r| (r.0, r.1) == *m))
        && recovered.iter().all(|r| r.0 != r.1 && truth.transitions[r.0][r.1] >= cutoff);
    let fmt = |v: &[(usize, usize, usize)]| v.iter().map(|(a, b, c)| format!("{a}->{b}:{c}")).collect::<Vec<_>>().join(" ");
    Ok((
        ok,
        format!(
            "seed {seed}: scripted [{}], recovered [{}], {} unassigned",
            fmt(&expected),
            fmt(&recovered),
            summary.graph.unassigned()
        ),
    ))
}

/// Judged on the default seed-7 run; the other seeds are reported for
/// context only.
fn criterion_6(runs: &[Run]) -> Result<Outcome> {
    let mut verdict = None;
    let mut parts = Vec::new();
    for run in runs {
        let (ok, text) = transfer(run)?;
        if run.cfg.seed == Some(7) {
            verdict = Some(ok);
            parts.insert(0, text);
        } else {
            parts.push(format!("({text})"));
        }
    }
    let Some(ok) = verdict else { anyhow::bail!("seed-7 run unavailable") };
    outcome(ok, format!("T={TRANSITION_STEPS}; {}", parts.join("; ")))
}

fn criterion_7(run: &Run) -> Result<Outcome> {
    let input = SeriesInput::from_data_dir(&run.data)?;
    let fbn15 = scratch("seed7").join("fbn15");
    let maps15 = cmd_extract(&run.train_dir.join("epoch_15.ckpt"), &input, &run.cfg, &fbn15, true)?;
    let mean = maps15.iter().zip(&run.maps).map(|(a, b)| iou(&a.binary, &b.binary)).sum::<Result<f64, _>>()?
        / run.maps.len() as f64;
    outcome(mean >= MIN_EPOCH_STABILITY, format!("mean IoU between epoch-15 and epoch-20 stacks {mean:.3} (need >= 0.5)"))
}

fn snapshot(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) -> Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let p = entry?.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                out.insert(p.strip_prefix(root)?.to_path_buf(), std::fs::read(&p)?);
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

fn criterion_8() -> Result<Outcome> {
    let text = r#"
seed = 42
[synth]
dims = [8, 8, 8]
template_radius = 1.8
mask_radius = 3.5
n_templates = 2
time_steps = 24
[model]
encoder_width = 4
sa_channels = 2
sa_kernel = 3
ca_hidden = [3, 3]
input_dims = [8, 8, 8]
[train]
epochs = 2
batch_size = 6
"#;
    let cfg = RunConfig::parse(text)?.with_seed(None)?;
    let pipeline = |name: &str| -> Result<PathBuf> {
        let root = scratch(name);
        if root.exists() {
            std::fs::remove_dir_all(&root)?;
        }
        let data = root.join("data");
        cmd_generate(&cfg, &data, false)?;
        let input = SeriesInput::from_data_dir(&data)?;
        cmd_train(&cfg, std::slice::from_ref(&input), &root.join("train"), false, |_, _| {})?;
        cmd_extract(&root.join("train/epoch_02.ckpt"), &input, &cfg, &root.join("fbn"), false)?;
        cmd_analyze(&root.join("fbn"), &TemplateSource::Manifest(data.join(MANIFEST_FILE)), &cfg, &root.join("report"), false)?;
        Ok(root)
    };
    let (a, b) = (snapshot(&pipeline("determinism_a")?)?, snapshot(&pipeline("determinism_b")?)?);
    let differing: Vec<_> = a.iter().filter(|(k, v)| b.get(*k) != Some(v)).map(|(k, _)| k.display().to_string()).collect();
    let same = a.len() == b.len() && differing.is_empty();
    outcome(same, format!("{} files across generate/train/extract/analyze; differing: {differing:?}", a.len()))
}

fn criterion_9(run: &Run) -> Result<Outcome> {
    let epochs: Vec<f64> = run.report.records.iter().filter(|r| r.lr.is_some()).map(|r| r.seconds).collect();
    let epoch = epochs.iter().sum::<f64>() / epochs.len() as f64;
    let fraction = run.extract_seconds / epoch;
    outcome(
        fraction < MAX_EXTRACT_FRACTION,
        format!(
            "extract {:.2}s over {} steps vs mean training epoch {epoch:.2}s: {fraction:.3} of an epoch (need < 0.2)",
            run.extract_seconds,
            run.maps.len()
        ),
    )
}

fn report(results: &mut Vec<(usize, bool)>, id: usize, name: &str, r: Result<Outcome>) {
    let (passed, detail) = match r {
        Ok(o) => (o.passed, o.detail),
        Err(e) => (false, format!("error: {e:#}")),
    };
    println!("criterion {id} {name}: {} | {detail}", if passed { "PASS" } else { "FAIL" });
    results.push((id, passed));
}

fn main() {
    // `cargo test -- --list` and filters are not meaningful here.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let started = Instant::now();
    let mut results = Vec::new();
    report(&mut results, 1, "gradient correctness", criterion_1());
    report(&mut results, 2, "oracle equivalence", criterion_2());
    report(&mut results, 8, "determinism", criterion_8());

    let mut runs = Vec::new();
    for seed in RECOVERY_SEEDS {
        match default_run(seed) {
            Ok(r) => runs.push(r),
            Err(e) => println!("training run for seed {seed} failed: {e:#}"),
        }
    }
    let seed7 = runs.iter().find(|r| r.cfg.seed == Some(7));
    let missing = || Err(anyhow::anyhow!("seed-7 run unavailable"));
    report(&mut results, 3, "training sanity", seed7.map_or_else(missing, criterion_3));
    report(
        &mut results,
        4,
        "planted-network recovery",
        if runs.len() == RECOVERY_SEEDS.len() { criterion_4(&runs) } else { Err(anyhow::anyhow!("missing runs")) },
    );
    report(&mut results, 5, "gradualness", seed7.map_or_else(missing, criterion_5));
    report(&mut results, 6, "state-transfer recovery", criterion_6(&runs));
    report(&mut results, 7, "epoch stability", seed7.map_or_else(missing, criterion_7));
    report(&mut results, 9, "extraction speed", seed7.map_or_else(missing, criterion_9));

    results.sort();
    let failed: Vec<usize> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    println!(
        "acceptance: {} of {} criteria passed in {:.0}s{}",
        results.len() - failed.len(),
        results.len(),
        started.elapsed().as_secs_f64(),
        if failed.is_empty() { String::new() } else { format!("; failed: {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
