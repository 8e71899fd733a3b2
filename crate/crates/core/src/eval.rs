//! PSNR evaluation, timing benchmarks and CSV reports.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{bicubic_resize, modcrop, upscale_bicubic, upscale_full, ImageY};
use crate::error::{Error, Result};
use crate::model::{count_parameters, estimate_cost, Model};
use crate::tensor::Tensor;

/// `10 log10(1 / MSE)` over the luminance plane with `shave` border pixels
/// ignored on every side. Identical inputs give `+inf`.
pub fn psnr(output: &Tensor, reference: &Tensor, shave: usize) -> Result<f64> {
    if output.shape() != reference.shape() {
        return Err(Error::shape(format!(
            "psnr of {:?} against {:?}",
            output.shape(),
            reference.shape()
        )));
    }
    let (h, w) = (output.height(), output.width());
    if 2 * shave >= h || 2 * shave >= w {
        return Err(Error::Domain(format!(
            "shave {shave} leaves nothing of a {h}x{w} image"
        )));
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for b in 0..output.batch() {
        for c in 0..output.channels() {
            let (o, r) = (output.plane_slice(b, c), reference.plane_slice(b, c));
            for y in shave..h - shave {
                for x in shave..w - shave {
                    let d = o[y * w + x] as f64 - r[y * w + x] as f64;
                    sum += d * d;
                }
            }
            count += (h - 2 * shave) * (w - 2 * shave);
        }
    }
    let mse = sum / count as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

/// Rounds to the nearest of the 256 8-bit levels.
pub fn quantize_8bit(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    out.map_inplace(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
    out
}

/// Something that turns an LR image into an `n`-times larger one.
#[derive(Clone, Copy, Debug)]
pub enum Upscaler<'a> {
    Bicubic { scale: usize },
    Model(&'a Model),
}

impl Upscaler<'_> {
    pub fn scale(&self) -> usize {
        match self {
            Upscaler::Bicubic { scale } => *scale,
            Upscaler::Model(m) => m.scale(),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Upscaler::Bicubic { .. } => "bicubic".to_string(),
            Upscaler::Model(m) => m.spec().to_string(),
        }
    }

    pub fn upscale(&self, img: &ImageY) -> Result<ImageY> {
        match self {
            Upscaler::Bicubic { scale } => upscale_bicubic(img, *scale),
            Upscaler::Model(m) => upscale_full(m, img),
        }
    }
}

/// Ground truth cropped (top-left) to a multiple of `n`, and its `1/n`
/// bicubic downscale.
pub fn degrade(hr: &ImageY, n: usize) -> Result<(ImageY, ImageY)> {
    let gt = modcrop(hr, n)?;
    let lr = bicubic_resize(&gt, 1.0 / n as f64)?;
    Ok((gt, lr))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    /// Round the reconstruction to 8-bit levels before scoring, as when the
    /// result is written out as an ordinary image.
    pub quantize: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { quantize: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub image: String,
    pub psnr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub model: String,
    pub scale: usize,
    pub images: Vec<ImageScore>,
    pub mean_psnr: f64,
    pub mean_seconds: f64,
}

/// Scores one ground-truth image: degrade, upscale, PSNR with a border of
/// `n` pixels shaved.
pub fn score_image(up: &Upscaler, hr: &ImageY, opts: &EvalOptions) -> Result<ImageScore> {
    let n = up.scale();
    let (gt, lr) = degrade(hr, n)?;
    let start = Instant::now();
    let sr = up.upscale(&lr)?;
    let seconds = start.elapsed().as_secs_f64();
    let out = if opts.quantize {
        quantize_8bit(&sr.y)
    } else {
        sr.y
    };
    Ok(ImageScore {
        image: hr.source.clone(),
        psnr: psnr(&out, &gt.y, n)?,
        seconds,
    })
}

/// Mean luminance PSNR over a set of ground-truth images.
pub fn evaluate(up: &Upscaler, images: &[ImageY], opts: &EvalOptions) -> Result<EvalResult> {
    if images.is_empty() {
        return Err(Error::Domain("no evaluation images".into()));
    }
    let scores = images
        .iter()
        .map(|img| score_image(up, img, opts))
        .collect::<Result<Vec<_>>>()?;
    let k = scores.len() as f64;
    Ok(EvalResult {
        model: up.name(),
        scale: up.scale(),
        mean_psnr: scores.iter().map(|s| s.psnr).sum::<f64>() / k,
        mean_seconds: scores.iter().map(|s| s.seconds).sum::<f64>() / k,
        images: scores,
    })
}

/// Per-image and mean rows: `model,scale,image,psnr,seconds`.
pub fn eval_csv(results: &[EvalResult]) -> String {
    let mut s = String::from("model,scale,image,psnr,seconds\n");
    for r in results {
        for i in &r.images {
            let _ = writeln!(s, "\"{}\",{},\"{}\",{:.4},{:.6}", r.model, r.scale, i.image, i.psnr, i.seconds);
        }
        let _ = writeln!(s, "\"{}\",{},mean,{:.4},{:.6}", r.model, r.scale, r.mean_psnr, r.mean_seconds);
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub model: String,
    pub scale: usize,
    pub lr_height: usize,
    pub lr_width: usize,
    pub repeats: usize,
    pub median_seconds: f64,
    pub fps: f64,
    pub macs: u64,
    pub gmacs_per_second: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Times `upscale_full` on a random `h x w` LR image. One warm-up run is
/// discarded; the median of `repeats` timed runs is reported.
pub fn bench(model: &Model, h: usize, w: usize, repeats: usize, seed: u64) -> Result<BenchResult> {
    if repeats == 0 || h == 0 || w == 0 {
        return Err(Error::Domain("benchmark needs a non-empty image and repeats >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..h * w).map(|_| rng.random::<f32>()).collect();
    let img = ImageY::from_luma(Tensor::plane(h, w, data)?)?;
    upscale_full(model, &img)?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        std::hint::black_box(upscale_full(model, &img)?);
        times.push(start.elapsed().as_secs_f64());
    }
    let t = median(times).max(1e-9);
    let macs = estimate_cost(model.spec(), (h * w) as u64);
    Ok(BenchResult {
        model: model.spec().to_string(),
        scale: model.scale(),
        lr_height: h,
        lr_width: w,
        repeats,
        median_seconds: t,
        fps: 1.0 / t,
        macs,
        gmacs_per_second: macs as f64 / t / 1e9,
    })
}

pub fn bench_csv(results: &[BenchResult]) -> String {
    let mut s = String::from(
        "model,scale,lr_height,lr_width,repeats,median_seconds,fps,macs,gmacs_per_second\n",
    );
    for r in results {
        let _ = writeln!(
            s,
            "\"{}\",{},{},{},{},{:.6},{:.3},{},{:.3}",
            r.model, r.scale, r.lr_height, r.lr_width, r.repeats, r.median_seconds, r.fps,
            r.macs, r.gmacs_per_second
        );
    }
    s
}

/// One point of the speed / quality trade-off plot.
#[derive(Clone, Debug, PartialEq)]
pub struct ScatterPoint {
    pub model: String,
    pub parameters: usize,
    pub seconds: f64,
    pub psnr: f64,
}

impl ScatterPoint {
    pub fn new(model: &Model, eval: &EvalResult) -> Self {
        ScatterPoint {
            model: eval.model.clone(),
            parameters: count_parameters(model.spec(), false),
            seconds: eval.mean_seconds,
            psnr: eval.mean_psnr,
        }
    }
}

pub fn scatter_csv(points: &[ScatterPoint]) -> String {
    let mut s = String::from("model,parameters,seconds,psnr\n");
    for p in points {
        let _ = writeln!(s, "\"{}\",{},{:.6},{:.4}", p.model, p.parameters, p.seconds, p.psnr);
    }
    s
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Least-squares line `y = slope x + intercept` with its R^2.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Domain("linear fit needs at least two paired points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("linear fit needs distinct x values".into()));
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(LinearFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
    })
}
