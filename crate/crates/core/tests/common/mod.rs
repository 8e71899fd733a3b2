#![allow(dead_code, clippy::needless_range_loop)]

//! Naive f64 reference layers and finite-difference helpers shared by the
//! integration tests and the acceptance run.

use fsrcnn::model::{Layer, Model};
use fsrcnn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

/// Uniform values with magnitude in `[margin, 1]`.
pub fn away_from_zero(shape: [usize; 4], margin: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = uniform(shape, rng);
    t.map_inplace(|v| if v < 0.0 { -(margin + -v * (1.0 - margin)) } else { margin + v * (1.0 - margin) });
    t
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

#[derive(Clone, Debug)]
pub struct RefT {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl RefT {
    pub fn zeros(shape: [usize; 4]) -> Self {
        RefT {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, ch, h, w] = self.shape;
        self.data[((b * ch + c) * h + y) * w + x]
    }

    fn at_mut(&mut self, b: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        let [_, ch, h, w] = self.shape;
        &mut self.data[((b * ch + c) * h + y) * w + x]
    }

    pub fn dot(&self, t: &Tensor) -> f64 {
        assert_eq!(self.shape, t.shape());
        self.data.iter().zip(t.data()).map(|(&a, &b)| a * b as f64).sum()
    }
}

impl From<&Tensor> for RefT {
    fn from(t: &Tensor) -> Self {
        RefT {
            shape: t.shape(),
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }
}

/// Direct zero-padded strided convolution, weights `(o, c, f, f)`.
pub fn ref_conv(x: &RefT, w: &[f64], wshape: [usize; 4], bias: &[f64], stride: usize, pad: usize) -> RefT {
    let [b, c, h, wd] = x.shape;
    let [o, wc, f, _] = wshape;
    assert_eq!(c, wc);
    let oh = (h + 2 * pad - f) / stride + 1;
    let ow = (wd + 2 * pad - f) / stride + 1;
    let mut out = RefT::zeros([b, o, oh, ow]);
    for n in 0..b {
        for k in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = bias[k];
                    for ci in 0..c {
                        for ky in 0..f {
                            for kx in 0..f {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w[((k * c + ci) * f + ky) * f + kx]
                                    * x.at(n, ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    *out.at_mut(n, k, y, xx) = acc;
                }
            }
        }
    }
    out
}

/// Scatter-form transposed convolution, weights `(c_in, c_out, f, f)`,
/// `crop` pixels removed from each side of the full output.
pub fn ref_deconv(x: &RefT, w: &[f64], wshape: [usize; 4], bias: &[f64], stride: usize, crop: usize) -> RefT {
    let [b, c, h, wd] = x.shape;
    let [wc, o, f, _] = wshape;
    assert_eq!(c, wc);
    let (fh, fw) = ((h - 1) * stride + f, (wd - 1) * stride + f);
    let (oh, ow) = (fh - 2 * crop, fw - 2 * crop);
    let mut out = RefT::zeros([b, o, oh, ow]);
    for n in 0..b {
        for k in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    *out.at_mut(n, k, y, xx) = bias[k];
                }
            }
        }
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..wd {
                    let v = x.at(n, ci, y, xx);
                    for k in 0..o {
                        for ky in 0..f {
                            for kx in 0..f {
                                let oy = (y * stride + ky) as isize - crop as isize;
                                let ox = (xx * stride + kx) as isize - crop as isize;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                *out.at_mut(n, k, oy as usize, ox as usize) +=
                                    v * w[((ci * o + k) * f + ky) * f + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn ref_prelu(x: &RefT, slopes: &[f64]) -> RefT {
    let mut out = x.clone();
    let [b, c, h, w] = x.shape;
    for n in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = out.at_mut(n, ci, y, xx);
                    if *v < 0.0 {
                        *v *= slopes[ci];
                    }
                }
            }
        }
    }
    out
}

/// One layer evaluated in f64 with the given parameter lists (same order
/// as `Layer::params`).
pub fn ref_layer(layer: &Layer, params: &[Vec<f64>], x: &RefT) -> RefT {
    match layer {
        Layer::Conv(c) => ref_conv(x, &params[0], c.weights.shape(), &params[1], c.stride, c.pad),
        Layer::Deconv(d) => ref_deconv(x, &params[0], d.weights.shape(), &params[1], d.stride, d.crop),
        Layer::PRelu(_) => ref_prelu(x, &params[0]),
    }
}

pub fn params_f64(model: &Model) -> Vec<Vec<Vec<f64>>> {
    model
        .layers()
        .iter()
        .map(|l| l.params().iter().map(|p| p.iter().map(|&v| v as f64).collect()).collect())
        .collect()
}

pub fn ref_model(model: &Model, params: &[Vec<Vec<f64>>], x: &RefT) -> RefT {
    let mut y = x.clone();
    for (l, p) in model.layers().iter().zip(params) {
        y = ref_layer(l, p, &y);
    }
    y
}

/// Central difference of `loss` with respect to `values[i]`.
pub fn central_difference(values: &mut [f64], i: usize, step: f64, mut loss: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = values[i];
    values[i] = orig + step;
    let lp = loss(values);
    values[i] = orig - step;
    let lm = loss(values);
    values[i] = orig;
    (lp - lm) / (2.0 * step)
}

/// Worst relative error over the entries listed in `which`.
pub fn check_entries(
    values: &mut [f64],
    analytic: &[f32],
    which: &[usize],
    step: f64,
    mut loss: impl FnMut(&[f64]) -> f64,
) -> f64 {
    assert_eq!(values.len(), analytic.len());
    which
        .iter()
        .map(|&i| rel_err(analytic[i] as f64, central_difference(values, i, step, &mut loss)))
        .fold(0.0, f64::max)
}

pub fn check_all(values: &mut [f64], analytic: &[f32], step: f64, loss: impl FnMut(&[f64]) -> f64) -> f64 {
    let which: Vec<usize> = (0..values.len()).collect();
    check_entries(values, analytic, &which, step, loss)
}
