//! Layers of the RPE regression network with explicit backpropagation.
//!
//! Activations are dense `channels × height × width` tensors in row-major
//! order. Every layer reads its parameters from a slice of the model's flat
//! parameter vector.

use std::fmt;

/// Activation tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * height * width, "tensor shape mismatch");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    /// 3×3 convolution, stride 2, zero padding 1.
    Conv { inputs: usize, outputs: usize },
    Relu,
    GlobalAvgPool,
    Dense { inputs: usize, outputs: usize },
    Softplus,
}

impl Layer {
    pub fn param_count(&self) -> usize {
        match *self {
            Layer::Conv { inputs, outputs } => outputs * inputs * 9 + outputs,
            Layer::Dense { inputs, outputs } => outputs * inputs + outputs,
            _ => 0,
        }
    }

    /// Fan-in used for initialization; 0 for parameter-free layers.
    pub fn fan_in(&self) -> usize {
        match *self {
            Layer::Conv { inputs, .. } => inputs * 9,
            Layer::Dense { inputs, .. } => inputs,
            _ => 0,
        }
    }

    /// Number of weights (the rest of the parameters are biases).
    pub fn weight_count(&self) -> usize {
        match *self {
            Layer::Conv { inputs, outputs } => outputs * inputs * 9,
            Layer::Dense { inputs, outputs } => outputs * inputs,
            _ => 0,
        }
    }

    pub fn output_shape(&self, (c, h, w): (usize, usize, usize)) -> (usize, usize, usize) {
        match *self {
            Layer::Conv { outputs, .. } => (outputs, h.div_ceil(2), w.div_ceil(2)),
            Layer::GlobalAvgPool => (c, 1, 1),
            Layer::Dense { outputs, .. } => (outputs, 1, 1),
            Layer::Relu | Layer::Softplus => (c, h, w),
        }
    }

    pub fn forward(&self, params: &[f64], x: &Tensor) -> Tensor {
        match *self {
            Layer::Conv { inputs, outputs } => conv_forward(params, inputs, outputs, x),
            Layer::Relu => Tensor {
                data: x.data.iter().map(|v| v.max(0.0)).collect(),
                ..x.clone()
            },
            Layer::GlobalAvgPool => {
                let n = x.plane() as f64;
                let data = x.data.chunks(x.plane()).map(|p| p.iter().sum::<f64>() / n).collect();
                Tensor::from_vec(x.channels, 1, 1, data)
            }
            Layer::Dense { inputs, outputs } => {
                let (w, b) = params.split_at(inputs * outputs);
                let data = (0..outputs)
                    .map(|o| {
                        b[o] + w[o * inputs..(o + 1) * inputs]
                            .iter()
                            .zip(&x.data)
                            .map(|(a, v)| a * v)
                            .sum::<f64>()
                    })
                    .collect();
                Tensor::from_vec(outputs, 1, 1, data)
            }
            Layer::Softplus => Tensor {
                data: x.data.iter().map(|v| softplus(*v)).collect(),
                ..x.clone()
            },
        }
    }

    /// Returns the gradient with respect to the input (when `need_input`)
    /// and accumulates the parameter gradient into `grad`.
    pub fn backward(
        &self,
        params: &[f64],
        x: &Tensor,
        dy: &Tensor,
        grad: &mut [f64],
        need_input: bool,
    ) -> Option<Tensor> {
        match *self {
            Layer::Conv { inputs, outputs } => {
                conv_backward(params, inputs, outputs, x, dy, grad, need_input)
            }
            Layer::Relu => need_input.then(|| Tensor {
                data: x
                    .data
                    .iter()
                    .zip(&dy.data)
                    .map(|(v, d)| if *v > 0.0 { *d } else { 0.0 })
                    .collect(),
                ..x.clone()
            }),
            Layer::GlobalAvgPool => need_input.then(|| {
                let plane = x.plane();
                let n = plane as f64;
                let mut dx = Tensor::zeros(x.channels, x.height, x.width);
                for (c, chunk) in dx.data.chunks_mut(plane).enumerate() {
                    chunk.fill(dy.data[c] / n);
                }
                dx
            }),
            Layer::Dense { inputs, outputs } => {
                let (w, _) = params.split_at(inputs * outputs);
                let (gw, gb) = grad.split_at_mut(inputs * outputs);
                for o in 0..outputs {
                    let d = dy.data[o];
                    gb[o] += d;
                    for (g, v) in gw[o * inputs..(o + 1) * inputs].iter_mut().zip(&x.data) {
                        *g += d * v;
                    }
                }
                need_input.then(|| {
                    let mut dx = Tensor::zeros(x.channels, x.height, x.width);
                    for o in 0..outputs {
                        let d = dy.data[o];
                        for (g, a) in dx.data.iter_mut().zip(&w[o * inputs..(o + 1) * inputs]) {
                            *g += d * a;
                        }
                    }
                    dx
                })
            }
            Layer::Softplus => need_input.then(|| Tensor {
                data: x
                    .data
                    .iter()
                    .zip(&dy.data)
                    .map(|(v, d)| d * sigmoid(*v))
                    .collect(),
                ..x.clone()
            }),
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Conv { inputs, outputs } => write!(f, "conv3x3s2 {inputs} {outputs}"),
            Layer::Relu => write!(f, "relu"),
            Layer::GlobalAvgPool => write!(f, "global_avg_pool"),
            Layer::Dense { inputs, outputs } => write!(f, "dense {inputs} {outputs}"),
            Layer::Softplus => write!(f, "softplus"),
        }
    }
}

impl std::str::FromStr for Layer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split_whitespace().collect();
        let dims = |parts: &[&str]| -> Result<(usize, usize), String> {
            match parts {
                [a, b] => Ok((
                    a.parse().map_err(|_| format!("bad dimension '{a}'"))?,
                    b.parse().map_err(|_| format!("bad dimension '{b}'"))?,
                )),
                _ => Err(format!("expected two dimensions in '{s}'")),
            }
        };
        match parts.first() {
            Some(&"conv3x3s2") => {
                let (inputs, outputs) = dims(&parts[1..])?;
                Ok(Layer::Conv { inputs, outputs })
            }
            Some(&"dense") => {
                let (inputs, outputs) = dims(&parts[1..])?;
                Ok(Layer::Dense { inputs, outputs })
            }
            Some(&"relu") if parts.len() == 1 => Ok(Layer::Relu),
            Some(&"global_avg_pool") if parts.len() == 1 => Ok(Layer::GlobalAvgPool),
            Some(&"softplus") if parts.len() == 1 => Ok(Layer::Softplus),
            _ => Err(format!("unknown layer '{s}'")),
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Output columns `x` whose input column `2x + k − 1` lies in `[0, width)`.
#[inline]
fn valid_range(k: usize, width: usize, out: usize) -> std::ops::Range<usize> {
    let start = usize::from(k == 0);
    // 2x + k - 1 <= width - 1  <=>  x <= (width - k) / 2
    let end = if width >= k { (width - k) / 2 + 1 } else { 0 };
    start..end.min(out)
}

fn conv_forward(params: &[f64], inputs: usize, outputs: usize, x: &Tensor) -> Tensor {
    debug_assert_eq!(x.channels, inputs);
    let (h, w) = (x.height, x.width);
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let (weights, bias) = params.split_at(outputs * inputs * 9);
    let mut out = Tensor::zeros(outputs, ho, wo);
    for (o, out_o) in out.data.chunks_mut(ho * wo).enumerate() {
        out_o.fill(bias[o]);
        for i in 0..inputs {
            let in_i = &x.data[i * h * w..(i + 1) * h * w];
            for ky in 0..3 {
                let rows = valid_range(ky, h, ho);
                for kx in 0..3 {
                    let wv = weights[((o * inputs + i) * 3 + ky) * 3 + kx];
                    let cols = valid_range(kx, w, wo);
                    for y in rows.clone() {
                        let src = &in_i[(2 * y + ky - 1) * w..];
                        let dst = &mut out_o[y * wo..(y + 1) * wo];
                        for xo in cols.clone() {
                            dst[xo] += wv * src[2 * xo + kx - 1];
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(
    params: &[f64],
    inputs: usize,
    outputs: usize,
    x: &Tensor,
    dy: &Tensor,
    grad: &mut [f64],
    need_input: bool,
) -> Option<Tensor> {
    let (h, w) = (x.height, x.width);
    let (ho, wo) = (dy.height, dy.width);
    let n_weights = outputs * inputs * 9;
    let (weights, _) = params.split_at(n_weights);
    let (gw, gb) = grad.split_at_mut(n_weights);
    let mut dx = need_input.then(|| Tensor::zeros(inputs, h, w));
    for o in 0..outputs {
        let dy_o = &dy.data[o * ho * wo..(o + 1) * ho * wo];
        gb[o] += dy_o.iter().sum::<f64>();
        for i in 0..inputs {
            let in_i = &x.data[i * h * w..(i + 1) * h * w];
            for ky in 0..3 {
                let rows = valid_range(ky, h, ho);
                for kx in 0..3 {
                    let widx = ((o * inputs + i) * 3 + ky) * 3 + kx;
                    let cols = valid_range(kx, w, wo);
                    let mut acc = 0.0;
                    for y in rows.clone() {
                        let src = &in_i[(2 * y + ky - 1) * w..];
                        let d = &dy_o[y * wo..(y + 1) * wo];
                        for xo in cols.clone() {
                            acc += d[xo] * src[2 * xo + kx - 1];
                        }
                    }
                    gw[widx] += acc;
                    if let Some(dx) = dx.as_mut() {
                        let wv = weights[widx];
                        let dx_i = &mut dx.data[i * h * w..(i + 1) * h * w];
                        for y in rows.clone() {
                            let d = &dy_o[y * wo..(y + 1) * wo];
                            let dst = &mut dx_i[(2 * y + ky - 1) * w..];
                            for xo in cols.clone() {
                                dst[2 * xo + kx - 1] += wv * d[xo];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_matches_direct_definition() {
        let (cin, cout, h, w) = (2, 3, 5, 6);
        let layer = Layer::Conv {
            inputs: cin,
            outputs: cout,
        };
        let params: Vec<f64> = (0..layer.param_count()).map(|k| ((k * 7) % 13) as f64 * 0.1 - 0.6).collect();
        let x = Tensor::from_vec(cin, h, w, (0..cin * h * w).map(|k| ((k * 5) % 11) as f64 - 5.0).collect());
        let y = layer.forward(&params, &x);
        assert_eq!(y.shape(), (cout, 3, 3));
        for o in 0..cout {
            for yo in 0..3 {
                for xo in 0..3 {
                    let mut acc = params[cout * cin * 9 + o];
                    for i in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (2 * yo + ky) as isize - 1;
                                let ix = (2 * xo + kx) as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += params[((o * cin + i) * 3 + ky) * 3 + kx]
                                        * x.data[(i * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((y.data[(o * 3 + yo) * 3 + xo] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn layer_descriptor_round_trip() {
        for l in [
            Layer::Conv { inputs: 1, outputs: 8 },
            Layer::Relu,
            Layer::GlobalAvgPool,
            Layer::Dense { inputs: 32, outputs: 1 },
            Layer::Softplus,
        ] {
            assert_eq!(l.to_string().parse::<Layer>().unwrap(), l);
        }
        assert!("conv3x3s2 1".parse::<Layer>().is_err());
        assert!("maxpool".parse::<Layer>().is_err());
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
    }
}
