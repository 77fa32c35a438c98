//! Finite-difference checks of the full network's backward pass.

use scaae::model::{Model, ModelConfig};
use scaae::tensor::{grad_check, Mode, Tensor};

const TOL: f64 = 1e-4;

fn config() -> ModelConfig {
    ModelConfig {
        encoder_width: 4,
        sa_channels: 2,
        sa_kernel: 3,
        ca_hidden: [3, 3],
        input_dims: [8, 8, 8],
        decoder_depth: 2,
        seed: 11,
    }
}

fn input() -> Tensor<f64> {
    let n = 2 * 512;
    let data = (0..n).map(|i| ((i * 2654435761usize) % 1000) as f64 / 500.0 - 1.0).collect();
    Tensor::from_vec(vec![2, 1, 8, 8, 8], data).unwrap()
}

fn with_param(model: &Model<f64>, name: &str, value: &Tensor<f64>) -> Model<f64> {
    let mut m = model.clone();
    let mut found = false;
    for t in m.named_tensors_mut() {
        if t.name == name {
            t.tensor.data_mut().copy_from_slice(value.data());
            found = true;
        }
    }
    assert!(found, "no tensor named {name}");
    m
}

fn param(model: &Model<f64>, name: &str) -> Tensor<f64> {
    let t = model.named_tensors().into_iter().find(|t| t.name == name).unwrap();
    Tensor::from_vec(t.tensor.shape().to_vec(), t.tensor.data().to_vec()).unwrap()
}

fn check_param(name: &str, mode: Mode) {
    let model = Model::<f64>::new(config()).unwrap();
    let x = input();
    let report = grad_check(
        |p| with_param(&model, name, p).forward(&x, mode).unwrap().0.reconstruction,
        |p, g| {
            let mut m = with_param(&model, name, p);
            m.zero_grad();
            let (_, cache) = m.forward(&x, mode).unwrap();
            m.backward(&cache, g, false).unwrap();
            let t = m.named_tensors().into_iter().find(|t| t.name == name).unwrap();
            Tensor::from_vec(t.tensor.shape().to_vec(), t.tensor.grad.clone().unwrap()).unwrap()
        },
        &param(&model, name),
        TOL,
    );
    assert!(report.passed, "{name} ({mode:?}): {report:?}");
}

#[test]
fn input_gradient_of_full_network() {
    let model = Model::<f64>::new(config()).unwrap();
    let report = grad_check(
        |x| model.forward(x, Mode::Train).unwrap().0.reconstruction,
        |x, g| {
            let mut m = model.clone();
            let (_, cache) = m.forward(x, Mode::Train).unwrap();
            m.backward(&cache, g, true).unwrap().unwrap()
        },
        &input(),
        TOL,
    );
    assert!(report.passed, "{report:?}");
}

#[test]
fn spatial_attention_branch_parameters() {
    for name in ["sa1.conv_a.weight", "sa1.conv_b.weight", "sa2.conv_b.bias"] {
        check_param(name, Mode::Train);
    }
}

#[test]
fn channel_attention_parameters() {
    for name in ["ca.fc1.weight", "ca.fc2.bias", "ca.fc3.weight", "ca.fc3.bias"] {
        check_param(name, Mode::Train);
    }
}

#[test]
fn encoder_block_parameters() {
    for name in [
        "enc1.conv5.weight",
        "enc1.proj.weight",
        "enc1.bn5.gamma",
        "enc2.conv3.weight",
        "enc2.bn1.beta",
        "enc2.conv1.bias",
    ] {
        check_param(name, Mode::Train);
    }
}

#[test]
fn decoder_parameters() {
    for name in ["dec.down0.weight", "dec.up1.weight", "dec.up0.bias", "dec.out.weight"] {
        check_param(name, Mode::Train);
    }
}

#[test]
fn eval_mode_gradients() {
    for name in ["enc2.bn3.gamma", "sa2.conv_a.weight"] {
        check_param(name, Mode::Eval);
    }
}

#[test]
fn gradients_accumulate_across_backward_calls() {
    let mut model = Model::<f64>::new(config()).unwrap();
    let x = input();
    let (out, cache) = model.forward(&x, Mode::Train).unwrap();
    let g = Tensor::full(out.reconstruction.shape(), 1.0);
    model.backward(&cache, &g, false).unwrap();
    let once = model.ca.fc3.bias.grad.clone().unwrap();
    model.backward(&cache, &g, false).unwrap();
    let twice = model.ca.fc3.bias.grad.clone().unwrap();
    for (a, b) in once.iter().zip(&twice) {
        assert!((2.0 * a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
}
