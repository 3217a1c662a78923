//! Central finite-difference checks of analytic backpropagation.

use cbct_motion::image::SliceImage;
use cbct_motion::regressor::layers::{Layer, Tensor};
use cbct_motion::regressor::{Architecture, RegressorModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-3;
const ABS_FLOOR: f64 = 1e-7;

fn close(analytic: f64, numeric: f64, tol: f64) -> bool {
    let scale = analytic.abs().max(numeric.abs());
    (analytic - numeric).abs() <= tol * scale || scale < ABS_FLOOR
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Compares ∂(c · layer(x))/∂params and ∂/∂x with central differences and
/// returns one message per mismatching entry.
pub fn layer_mismatches(layer: Layer, shape: (usize, usize, usize), seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = random_vec(&mut rng, layer.param_count());
    let mut x_data = random_vec(&mut rng, shape.0 * shape.1 * shape.2);
    if layer == Layer::Relu {
        // keep every input away from the kink
        for v in &mut x_data {
            if v.abs() < 10.0 * EPS {
                *v += 0.1;
            }
        }
    }
    let x = Tensor::from_vec(shape.0, shape.1, shape.2, x_data);
    let y = layer.forward(&params, &x);
    let c = random_vec(&mut rng, y.data.len());
    let loss = |p: &[f64], x: &Tensor| -> f64 {
        layer.forward(p, x).data.iter().zip(&c).map(|(a, b)| a * b).sum()
    };
    let dy = Tensor::from_vec(y.channels, y.height, y.width, c.clone());
    let mut grad = vec![0.0; params.len()];
    let dx = layer
        .backward(&params, &x, &dy, &mut grad, true)
        .expect("input gradient requested");

    let mut bad = Vec::new();
    for k in 0..params.len() {
        let mut plus = params.clone();
        let mut minus = params.clone();
        plus[k] += EPS;
        minus[k] -= EPS;
        let numeric = (loss(&plus, &x) - loss(&minus, &x)) / (2.0 * EPS);
        if !close(grad[k], numeric, REL_TOL) {
            bad.push(format!("{layer}: param {k}: {} vs {numeric}", grad[k]));
        }
    }
    for k in 0..x.data.len() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.data[k] += EPS;
        minus.data[k] -= EPS;
        let numeric = (loss(&params, &plus) - loss(&params, &minus)) / (2.0 * EPS);
        if !close(dx.data[k], numeric, REL_TOL) {
            bad.push(format!("{layer}: input {k}: {} vs {numeric}", dx.data[k]));
        }
    }
    bad
}

/// One tiny instance of every layer type.
pub fn all_layer_cases() -> Vec<(Layer, (usize, usize, usize), u64)> {
    vec![
        (Layer::Conv { inputs: 2, outputs: 3 }, (2, 6, 6), 1),
        (Layer::Conv { inputs: 1, outputs: 2 }, (1, 5, 7), 2),
        (Layer::Relu, (2, 4, 4), 3),
        (Layer::GlobalAvgPool, (3, 4, 5), 4),
        (Layer::Dense { inputs: 6, outputs: 3 }, (6, 1, 1), 5),
        (Layer::Softplus, (4, 1, 1), 6),
    ]
}

/// Checks ten randomly chosen weights of a small full network.
pub fn network_mismatches() -> Vec<String> {
    let arch = Architecture::conv_regressor(16, &[4, 6, 8]);
    let model = RegressorModel::initialize(arch.clone(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let px = random_vec(&mut rng, 256);
    let img = SliceImage::from_pixels(16, 100.0, 0.0, px).unwrap();
    let input = model.prepare_input(&img).unwrap();
    let pass = model.forward_pass(&input);
    let mut grad = vec![0.0; model.params().len()];
    model.backward(&pass, 1.0, &mut grad, false);

    let mut bad = Vec::new();
    for _ in 0..10 {
        let k = rng.gen_range(0..model.params().len());
        let eval = |delta: f64| {
            let mut p = model.params().to_vec();
            p[k] += delta;
            RegressorModel::from_parts(arch.clone(), p).unwrap().forward_tensor(&input)
        };
        let numeric = (eval(EPS) - eval(-EPS)) / (2.0 * EPS);
        if !close(grad[k], numeric, 1e-4) {
            bad.push(format!("network param {k}: {} vs {numeric}", grad[k]));
        }
    }
    bad
}
