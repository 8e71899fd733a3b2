//! Luminance images, MATLAB-compatible bicubic resampling, training pair
//! extraction with augmentation, and full-image upscaling.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{lr_sub_image_size, Model};
use crate::tensor::Tensor;

/// Luminance plane (`(1, 1, h, w)`, values in `[0, 1]`) plus optional Cb/Cr
/// planes kept for colour reconstruction.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageY {
    pub y: Tensor,
    pub chroma: Option<(Tensor, Tensor)>,
    pub source: String,
    pub transforms: Vec<String>,
}

impl ImageY {
    pub fn from_luma(y: Tensor) -> Result<Self> {
        if y.batch() != 1 || y.channels() != 1 || y.height() == 0 || y.width() == 0 {
            return Err(Error::shape(format!(
                "luminance plane must be (1, 1, h>0, w>0), got {:?}",
                y.shape()
            )));
        }
        Ok(ImageY {
            y,
            chroma: None,
            source: String::new(),
            transforms: Vec::new(),
        })
    }

    pub fn height(&self) -> usize {
        self.y.height()
    }

    pub fn width(&self) -> usize {
        self.y.width()
    }

    pub fn is_color(&self) -> bool {
        self.chroma.is_some()
    }

    fn derived(&self, y: Tensor, chroma: Option<(Tensor, Tensor)>, step: String) -> ImageY {
        let mut transforms = self.transforms.clone();
        transforms.push(step);
        ImageY {
            y,
            chroma,
            source: self.source.clone(),
            transforms,
        }
    }

    /// Applies `f` to every plane.
    fn map_planes(&self, step: String, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<ImageY> {
        let y = f(&self.y)?;
        let chroma = match &self.chroma {
            Some((cb, cr)) => Some((f(cb)?, f(cr)?)),
            None => None,
        };
        Ok(self.derived(y, chroma, step))
    }
}

// BT.601 studio-swing transform on [0, 1] RGB, as in MATLAB rgb2ycbcr.
const YCC_MATRIX: [[f64; 3]; 3] = [
    [65.481, 128.553, 24.966],
    [-37.797, -74.203, 112.0],
    [112.0, -93.786, -18.214],
];
const YCC_OFFSET: [f64; 3] = [16.0, 128.0, 128.0];

/// 8-bit YCbCr of an 8-bit RGB pixel, rounded like a `uint8` conversion.
pub fn rgb_to_ycbcr8(rgb: [u8; 3]) -> [u8; 3] {
    let c = rgb.map(|v| v as f64 / 255.0);
    let mut out = [0u8; 3];
    for (i, row) in YCC_MATRIX.iter().enumerate() {
        let v = YCC_OFFSET[i] + row[0] * c[0] + row[1] * c[1] + row[2] * c[2];
        out[i] = v.round().clamp(0.0, 255.0) as u8;
    }
    out
}

fn inverse3(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (r, row) in inv.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            let (r1, r2) = ((c + 1) % 3, (c + 2) % 3);
            let (c1, c2) = ((r + 1) % 3, (r + 2) % 3);
            *v = (m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]) / det;
        }
    }
    inv
}

/// Inverse of the studio-swing transform; inputs and outputs on `[0, 1]`.
pub fn ycbcr_to_rgb(ycc: [f32; 3]) -> [f32; 3] {
    let inv = inverse3(YCC_MATRIX);
    let d = [0, 1, 2].map(|i| ycc[i] as f64 * 255.0 - YCC_OFFSET[i]);
    [0, 1, 2].map(|r| (inv[r][0] * d[0] + inv[r][1] * d[1] + inv[r][2] * d[2]) as f32)
}

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Reads PNG, PPM/PGM, BMP (and, with a warning, JPEG). Colour images are
/// converted to 8-bit YCbCr; grayscale passes through as `v / 255`.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageY> {
    let path = path.as_ref();
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    match reader.format() {
        Some(image::ImageFormat::Jpeg) => {
            log::warn!("{}: JPEG input, compression artefacts will be learned", path.display())
        }
        Some(
            image::ImageFormat::Png | image::ImageFormat::Bmp | image::ImageFormat::Pnm,
        ) => {}
        _ => return Err(image_err(path, "unsupported image format")),
    }
    let img = reader.decode().map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(image_err(path, "empty image"));
    }
    let color = img.color().has_color();
    let mut out = if color {
        let rgb = img.to_rgb8();
        let mut planes = [vec![0f32; w * h], vec![0f32; w * h], vec![0f32; w * h]];
        for (i, p) in rgb.pixels().enumerate() {
            let ycc = rgb_to_ycbcr8(p.0);
            for c in 0..3 {
                planes[c][i] = ycc[c] as f32 / 255.0;
            }
        }
        let [y, cb, cr] = planes;
        let mut im = ImageY::from_luma(Tensor::plane(h, w, y)?)?;
        im.chroma = Some((Tensor::plane(h, w, cb)?, Tensor::plane(h, w, cr)?));
        im
    } else {
        let gray = img.to_luma8();
        ImageY::from_luma(Tensor::plane(
            h,
            w,
            gray.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        )?)?
    };
    out.source = path.display().to_string();
    Ok(out)
}

fn to_u8(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes an 8-bit grayscale or RGB image; the format follows the extension.
pub fn save_image(img: &ImageY, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (img.width() as u32, img.height() as u32);
    let result = match &img.chroma {
        None => {
            let buf: Vec<u8> = img.y.data().iter().map(|&v| to_u8(v)).collect();
            image::GrayImage::from_raw(w, h, buf)
                .expect("buffer matches dimensions")
                .save(path)
        }
        Some((cb, cr)) => {
            let mut buf = Vec::with_capacity(3 * img.y.len());
            for ((&y, &b), &r) in img.y.data().iter().zip(cb.data()).zip(cr.data()) {
                buf.extend(ycbcr_to_rgb([y, b, r]).map(to_u8));
            }
            image::RgbImage::from_raw(w, h, buf)
                .expect("buffer matches dimensions")
                .save(path)
        }
    };
    result.map_err(|e| image_err(path, e))
}

/// Image files directly inside `dir`, sorted by name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if matches!(
            ext.as_deref(),
            Some("png" | "bmp" | "ppm" | "pgm" | "pnm" | "jpg" | "jpeg")
        ) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_dir(dir: impl AsRef<Path>) -> Result<Vec<ImageY>> {
    list_images(dir)?.iter().map(load_image).collect()
}

/// Keys cubic kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    let ax = x.abs();
    let ax2 = ax * ax;
    let ax3 = ax2 * ax;
    if ax <= 1.0 {
        1.5 * ax3 - 2.5 * ax2 + 1.0
    } else if ax <= 2.0 {
        -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0
    } else {
        0.0
    }
}

/// Source taps and normalised weights for one output sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Contribution {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Per-output weight table along one axis, following MATLAB `imresize`:
/// the kernel is widened by `1 / scale` when shrinking, weights are
/// normalised to sum to one, and taps beyond the edge mirror back into the
/// signal.
pub fn contributions(in_len: usize, out_len: usize, scale: f64) -> Vec<Contribution> {
    let (width, shrink) = if scale < 1.0 {
        (4.0 / scale, scale)
    } else {
        (4.0, 1.0)
    };
    let taps = width.ceil() as i64 + 2;
    let n = in_len as i64;
    (1..=out_len)
        .map(|x| {
            let u = x as f64 / scale + 0.5 * (1.0 - 1.0 / scale);
            let left = (u - width / 2.0).floor() as i64;
            let mut indices = Vec::with_capacity(taps as usize);
            let mut weights = Vec::with_capacity(taps as usize);
            for j in 0..taps {
                let idx = left + j;
                let w = shrink * cubic(shrink * (u - idx as f64));
                if w == 0.0 {
                    continue;
                }
                // 1-based index mirrored into [1, n] with period 2n
                let m = (idx - 1).rem_euclid(2 * n);
                let src = if m < n { m } else { 2 * n - 1 - m };
                indices.push(src as usize);
                weights.push(w);
            }
            let sum: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= sum);
            Contribution { indices, weights }
        })
        .collect()
}

fn resize_rows(src: &[f64], h: usize, w: usize, table: &[Contribution]) -> Vec<f64> {
    let mut out = vec![0.0; table.len() * w];
    for (oy, c) in table.iter().enumerate() {
        let dst = &mut out[oy * w..(oy + 1) * w];
        for (&iy, &wt) in c.indices.iter().zip(&c.weights) {
            let row = &src[iy * w..(iy + 1) * w];
            for (d, &s) in dst.iter_mut().zip(row) {
                *d += wt * s;
            }
        }
    }
    debug_assert!(h > 0);
    out
}

fn resize_cols(src: &[f64], h: usize, w: usize, table: &[Contribution]) -> Vec<f64> {
    let ow = table.len();
    let mut out = vec![0.0; h * ow];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for (ox, c) in table.iter().enumerate() {
            out[y * ow + ox] = c
                .indices
                .iter()
                .zip(&c.weights)
                .map(|(&i, &wt)| wt * row[i])
                .sum();
        }
    }
    out
}

/// Resizes a `(1, 1, h, w)` plane to `out_h x out_w` with the given
/// per-axis scale factors. The axis with the smaller factor goes first
/// (rows on ties), as MATLAB does.
pub fn resize_plane(
    plane: &Tensor,
    out_h: usize,
    out_w: usize,
    scale_h: f64,
    scale_w: f64,
) -> Result<Tensor> {
    let (h, w) = (plane.height(), plane.width());
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::Domain(format!(
            "cannot resize {h}x{w} to {out_h}x{out_w}"
        )));
    }
    if !(scale_h > 0.0 && scale_w > 0.0 && scale_h.is_finite() && scale_w.is_finite()) {
        return Err(Error::Domain(format!("invalid scale {scale_h} x {scale_w}")));
    }
    let src: Vec<f64> = plane.sample(0).iter().map(|&v| v as f64).collect();
    let rows = contributions(h, out_h, scale_h);
    let cols = contributions(w, out_w, scale_w);
    let out = if scale_h <= scale_w {
        let t = resize_rows(&src, h, w, &rows);
        resize_cols(&t, out_h, w, &cols)
    } else {
        let t = resize_cols(&src, h, w, &cols);
        resize_rows(&t, h, out_w, &rows)
    };
    Tensor::plane(out_h, out_w, out.into_iter().map(|v| v as f32).collect())
}

/// `ceil(len * factor)`, tolerant of the representation error in factors
/// such as `1/3`.
pub fn scaled_len(len: usize, factor: f64) -> usize {
    (len as f64 * factor - 1e-9).ceil().max(0.0) as usize
}

/// Bicubic resize of every plane by `factor` (`> 1` enlarges).
pub fn bicubic_resize(img: &ImageY, factor: f64) -> Result<ImageY> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::Domain(format!("invalid resize factor {factor}")));
    }
    let (oh, ow) = (scaled_len(img.height(), factor), scaled_len(img.width(), factor));
    if oh == 0 || ow == 0 {
        return Err(Error::Domain(format!(
            "resizing {}x{} by {factor} gives an empty image",
            img.height(),
            img.width()
        )));
    }
    img.map_planes(format!("bicubic({factor})"), |p| {
        resize_plane(p, oh, ow, factor, factor)
    })
}

/// Bicubic resize to an explicit size (per-axis factor `out / in`).
pub fn bicubic_resize_to(img: &ImageY, out_h: usize, out_w: usize) -> Result<ImageY> {
    let sh = out_h as f64 / img.height() as f64;
    let sw = out_w as f64 / img.width() as f64;
    img.map_planes(format!("bicubic_to({out_h}x{out_w})"), |p| {
        resize_plane(p, out_h, out_w, sh, sw)
    })
}

/// Rotates a plane counter-clockwise by `quarter_turns * 90` degrees.
pub fn rotate_plane(plane: &Tensor, quarter_turns: usize) -> Tensor {
    let mut cur = plane.clone();
    for _ in 0..quarter_turns % 4 {
        let (h, w) = (cur.height(), cur.width());
        let src = cur.sample(0);
        let mut out = vec![0.0f32; h * w];
        // new (w x h): out[y'][x'] = src[x'][w - 1 - y']
        for ny in 0..w {
            for nx in 0..h {
                out[ny * h + nx] = src[nx * w + (w - 1 - ny)];
            }
        }
        cur = Tensor::plane(w, h, out).expect("same element count");
    }
    cur
}

pub fn rotate(img: &ImageY, quarter_turns: usize) -> ImageY {
    img.map_planes(format!("rot{}", 90 * (quarter_turns % 4)), |p| {
        Ok(rotate_plane(p, quarter_turns))
    })
    .expect("rotation cannot fail")
}

/// Top-left crop so both sides are multiples of `n`.
pub fn modcrop(img: &ImageY, n: usize) -> Result<ImageY> {
    let (h, w) = (img.height() / n * n, img.width() / n * n);
    if h == 0 || w == 0 {
        return Err(Error::Domain(format!(
            "{}x{} image is smaller than scale {n}",
            img.height(),
            img.width()
        )));
    }
    img.map_planes(format!("modcrop({n})"), |p| p.crop(0, 0, h, w))
}

/// Downscale factors used for augmentation; the original is the first.
pub const AUGMENT_SCALES: [f64; 5] = [1.0, 0.9, 0.8, 0.7, 0.6];
pub const AUGMENT_ROTATIONS: [usize; 4] = [0, 1, 2, 3];

/// The 5 scales x 4 rotations variants of one image, original first.
pub fn augmentation_variants(img: &ImageY) -> Result<Vec<ImageY>> {
    let mut out = Vec::with_capacity(AUGMENT_SCALES.len() * AUGMENT_ROTATIONS.len());
    for &s in &AUGMENT_SCALES {
        let scaled = if s == 1.0 {
            img.clone()
        } else {
            bicubic_resize(img, s)?
        };
        for &r in &AUGMENT_ROTATIONS {
            out.push(if r == 0 { scaled.clone() } else { rotate(&scaled, r) });
        }
    }
    Ok(out)
}

/// One LR sub-image and its HR target. For deconvolution nets `lr` is
/// `f_sub x f_sub` and `hr` is `(n f_sub - n + 1)` square; for nets fed an
/// interpolated image, `lr` has the HR geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub lr: Tensor,
    pub hr: Tensor,
    pub scale: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub source: String,
    pub transform: String,
    /// Top-left of the LR patch, `(y, x)`.
    pub origin: (usize, usize),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TilingOptions {
    /// Cropping stride on the LR image; `None` means `f_sub`.
    pub stride: Option<usize>,
    pub augment: bool,
    /// Feed the bicubic-upscaled LR patch instead of the LR patch.
    pub interpolated_input: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingSet {
    pub pairs: Vec<SamplePair>,
    pub manifest: Vec<ManifestEntry>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Appends another set, keeping its order.
    pub fn extend(&mut self, other: TrainingSet) {
        self.pairs.extend(other.pairs);
        self.manifest.extend(other.manifest);
    }

    /// Tab-separated index, one line per pair: source, transform, `y,x`.
    pub fn manifest_text(&self) -> String {
        let mut s = String::from("# source\ttransform\tlr_origin_y,x\n");
        for e in &self.manifest {
            let _ = writeln!(s, "{}\t{}\t{},{}", e.source, e.transform, e.origin.0, e.origin.1);
        }
        s
    }

    pub fn write_manifest(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.manifest_text()).map_err(|e| Error::io(path, e))
    }
}

/// Ground truth -> LR pairs for one (possibly augmented) image.
fn tile_image(
    img: &ImageY,
    scale: usize,
    stride: usize,
    interpolated: bool,
) -> Result<TrainingSet> {
    let f = lr_sub_image_size(scale);
    let hr_size = scale * f - scale + 1;
    let transform = if img.transforms.is_empty() {
        "identity".to_string()
    } else {
        img.transforms.join("+")
    };
    let mut set = TrainingSet::default();
    if img.height() < scale * f || img.width() < scale * f {
        log::warn!(
            "{} [{transform}]: {}x{} is too small for {f}x{f} LR sub-images at x{scale}, skipped",
            img.source,
            img.height(),
            img.width()
        );
        return Ok(set);
    }
    let gt = modcrop(img, scale)?.y;
    let lr_h = gt.height() / scale;
    let lr_w = gt.width() / scale;
    let factor = 1.0 / scale as f64;
    let lr = resize_plane(&gt, lr_h, lr_w, factor, factor)?;
    let up = if interpolated {
        let s = scale as f64;
        Some(resize_plane(&lr, gt.height(), gt.width(), s, s)?)
    } else {
        None
    };
    for y0 in (0..=lr_h - f).step_by(stride) {
        for x0 in (0..=lr_w - f).step_by(stride) {
            let (hy, hx) = (scale * y0, scale * x0);
            let input = match &up {
                Some(up) => up.crop(hy, hx, hr_size, hr_size)?,
                None => lr.crop(y0, x0, f, f)?,
            };
            set.pairs.push(SamplePair {
                lr: input,
                hr: gt.crop(hy, hx, hr_size, hr_size)?,
                scale,
            });
            set.manifest.push(ManifestEntry {
                source: img.source.clone(),
                transform: transform.clone(),
                origin: (y0, x0),
            });
        }
    }
    Ok(set)
}

/// Builds LR/HR training pairs: each image (and each augmented variant)
/// is downscaled by `1/n`, the LR image is tiled into `f_sub` squares with
/// the given stride, and each HR target is the ground-truth window starting
/// at `n` times the LR origin. Output order is (image, variant, tile).
pub fn make_training_set(
    images: &[ImageY],
    scale: usize,
    opts: &TilingOptions,
) -> Result<TrainingSet> {
    if images.is_empty() {
        return Err(Error::Domain("no training images".into()));
    }
    if !(2..=4).contains(&scale) {
        return Err(Error::Domain(format!("unsupported scale {scale}")));
    }
    let stride = opts.stride.unwrap_or_else(|| lr_sub_image_size(scale));
    if stride == 0 {
        return Err(Error::Domain("stride must be at least 1".into()));
    }
    let per_image: Vec<Result<TrainingSet>> = images
        .par_iter()
        .map(|img| {
            let variants = if opts.augment {
                augmentation_variants(img)?
            } else {
                vec![img.clone()]
            };
            let mut set = TrainingSet::default();
            for v in &variants {
                set.extend(tile_image(v, scale, stride, opts.interpolated_input)?);
            }
            Ok(set)
        })
        .collect();
    let mut out = TrainingSet::default();
    for set in per_image {
        out.extend(set?);
    }
    Ok(out)
}

/// Replicates the last row and column once.
fn pad_bottom_right(plane: &Tensor) -> Tensor {
    let (h, w) = (plane.height(), plane.width());
    let src = plane.sample(0);
    let mut out = Vec::with_capacity((h + 1) * (w + 1));
    for y in 0..=h {
        let row = &src[y.min(h - 1) * w..(y.min(h - 1) + 1) * w];
        out.extend_from_slice(row);
        out.push(row[w - 1]);
    }
    Tensor::plane(h + 1, w + 1, out).expect("padded size")
}

fn clamp01(mut t: Tensor) -> Tensor {
    t.map_inplace(|v| v.clamp(0.0, 1.0));
    t
}

/// Runs the network on the luminance plane and returns an image exactly
/// `n` times larger. For deconvolution nets the LR plane is padded by one
/// replicated pixel at the bottom and right and the `n h + 1` output is
/// cropped to `n h` from the top-left; SRCNN-style nets run on the bicubic
/// upscale. Chroma planes are bicubic-upscaled; everything is clamped to
/// `[0, 1]`.
pub fn upscale_full(model: &Model, img: &ImageY) -> Result<ImageY> {
    let n = model.scale();
    let (h, w) = (img.height(), img.width());
    let (oh, ow) = (n * h, n * w);
    let y = if model.spec().upsamples_in_network() {
        let out = model.forward(&pad_bottom_right(&img.y))?;
        out.crop(0, 0, oh, ow)?
    } else {
        let up = resize_plane(&img.y, oh, ow, n as f64, n as f64)?;
        model.forward(&up)?
    };
    let chroma = match &img.chroma {
        Some((cb, cr)) => Some((
            clamp01(resize_plane(cb, oh, ow, n as f64, n as f64)?),
            clamp01(resize_plane(cr, oh, ow, n as f64, n as f64)?),
        )),
        None => None,
    };
    Ok(img.derived(clamp01(y), chroma, format!("{}x{n}", model.spec())))
}

/// Plain bicubic upscale by `n`, clamped to `[0, 1]`.
pub fn upscale_bicubic(img: &ImageY, n: usize) -> Result<ImageY> {
    let (oh, ow) = (n * img.height(), n * img.width());
    img.map_planes(format!("bicubic x{n}"), |p| {
        Ok(clamp01(resize_plane(p, oh, ow, n as f64, n as f64)?))
    })
}

/// Procedural 8-bit test image: a smooth gradient overlaid with random
/// anti-aliased discs, rectangles and bars.
pub fn synthetic_image(h: usize, w: usize, seed: u64) -> ImageY {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (gy, gx, g0) = (
        rng.random_range(-0.4f32..0.4),
        rng.random_range(-0.4f32..0.4),
        rng.random_range(0.3f32..0.7),
    );
    enum Shape {
        Disc { cy: f32, cx: f32, r: f32 },
        Rect { y0: f32, x0: f32, y1: f32, x1: f32 },
        Bar { c: f32, nx: f32, ny: f32, half: f32 },
    }
    let size = h.max(w) as f32;
    let shapes: Vec<(Shape, f32)> = (0..rng.random_range(6..14))
        .map(|_| {
            let shape = match rng.random_range(0..3) {
                0 => Shape::Disc {
                    cy: rng.random_range(0.0..h as f32),
                    cx: rng.random_range(0.0..w as f32),
                    r: rng.random_range(0.05..0.3) * size,
                },
                1 => {
                    let (y0, x0) = (rng.random_range(0.0..h as f32), rng.random_range(0.0..w as f32));
                    Shape::Rect {
                        y0,
                        x0,
                        y1: y0 + rng.random_range(0.1..0.5) * size,
                        x1: x0 + rng.random_range(0.1..0.5) * size,
                    }
                }
                _ => {
                    let t = rng.random_range(0.0..std::f32::consts::PI);
                    Shape::Bar {
                        c: rng.random_range(0.0..size),
                        nx: t.cos(),
                        ny: t.sin(),
                        half: rng.random_range(0.5..4.0),
                    }
                }
            };
            (shape, rng.random_range(0.0f32..1.0))
        })
        .collect();
    const SS: usize = 4;
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let py = y as f32 + (sy as f32 + 0.5) / SS as f32;
                    let px = x as f32 + (sx as f32 + 0.5) / SS as f32;
                    let mut v = g0 + gy * py / h as f32 + gx * px / w as f32;
                    for (shape, level) in &shapes {
                        let inside = match *shape {
                            Shape::Disc { cy, cx, r } => (py - cy).powi(2) + (px - cx).powi(2) < r * r,
                            Shape::Rect { y0, x0, y1, x1 } => py >= y0 && py < y1 && px >= x0 && px < x1,
                            Shape::Bar { c, nx, ny, half } => (px * nx + py * ny - c).abs() < half,
                        };
                        if inside {
                            v = *level;
                        }
                    }
                    acc += v;
                }
            }
            let v = acc / (SS * SS) as f32;
            data.push((v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
        }
    }
    let mut img = ImageY::from_luma(Tensor::plane(h, w, data).expect("h*w samples"))
        .expect("non-empty plane");
    img.source = format!("synthetic-{seed}");
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchitectureSpec, InitPolicy};

    fn ramp(h: usize, w: usize) -> ImageY {
        let data = (0..h * w)
            .map(|i| ((i / w) as f32 * 0.01 + (i % w) as f32 * 0.003).fract())
            .collect();
        ImageY::from_luma(Tensor::plane(h, w, data).unwrap()).unwrap()
    }

    #[test]
    fn ycbcr_fixtures() {
        assert_eq!(rgb_to_ycbcr8([255, 255, 255])[0], 235);
        assert_eq!(rgb_to_ycbcr8([0, 0, 0])[0], 16);
        assert_eq!(rgb_to_ycbcr8([0, 0, 0])[1], 128);
        let rgb = ycbcr_to_rgb([235.0 / 255.0, 0.5019608, 0.5019608]);
        for c in rgb {
            assert!((c - 1.0).abs() < 1e-4, "{rgb:?}");
        }
    }

    #[test]
    fn color_round_trip_is_close() {
        for rgb in [[10u8, 200, 30], [255, 0, 0], [90, 90, 200]] {
            let ycc = rgb_to_ycbcr8(rgb).map(|v| v as f32 / 255.0);
            let back = ycbcr_to_rgb(ycc);
            for c in 0..3 {
                assert!((back[c] * 255.0 - rgb[c] as f32).abs() < 2.5, "{rgb:?} {back:?}");
            }
        }
    }

    #[test]
    fn load_and_save() {
        let dir = tempfile::tempdir().unwrap();
        let gray = dir.path().join("g.png");
        image::GrayImage::from_pixel(3, 2, image::Luma([128])).save(&gray).unwrap();
        let img = load_image(&gray).unwrap();
        assert!(img.y.data().iter().all(|&v| v == 128.0 / 255.0));
        assert!(!img.is_color());

        let white = dir.path().join("w.bmp");
        image::RgbImage::from_pixel(2, 2, image::Rgb([255, 255, 255])).save(&white).unwrap();
        let img = load_image(&white).unwrap();
        assert!(img.y.data().iter().all(|&v| v == 235.0 / 255.0));
        assert!(img.is_color());

        let out = dir.path().join("o.png");
        save_image(&img, &out).unwrap();
        let back = load_image(&out).unwrap();
        assert_eq!(back.y, img.y);

        assert!(matches!(
            load_image(dir.path().join("missing.png")),
            Err(Error::Io { .. })
        ));
        let junk = dir.path().join("junk.png");
        std::fs::write(&junk, b"not an image").unwrap();
        assert!(load_image(&junk).is_err());
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = ImageY::from_luma(Tensor::new_filled([1, 1, 13, 17], 0.42).unwrap()).unwrap();
        for f in [0.25, 1.0 / 3.0, 0.6, 0.9, 1.0, 2.0, 3.0, 4.0] {
            let r = bicubic_resize(&img, f).unwrap();
            for &v in r.y.data() {
                assert!((v - 0.42).abs() < 1e-6, "factor {f}: {v}");
            }
        }
    }

    #[test]
    fn unit_factor_is_identity() {
        let img = ramp(9, 11);
        let r = bicubic_resize(&img, 1.0).unwrap();
        for (a, b) in r.y.data().iter().zip(img.y.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn weights_sum_to_one() {
        for &(i, o, s) in &[(30, 10, 1.0 / 3.0), (7, 21, 3.0), (10, 9, 0.9), (5, 3, 0.6)] {
            for c in contributions(i, o, s) {
                let sum: f64 = c.weights.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
                assert!(c.indices.iter().all(|&k| k < i));
            }
        }
    }

    #[test]
    fn output_sizes() {
        let img = ramp(80, 60);
        let r = bicubic_resize(&img, 1.0 / 3.0).unwrap();
        assert_eq!((r.height(), r.width()), (27, 20));
        let r = bicubic_resize(&ramp(255, 255), 1.0 / 3.0).unwrap();
        assert_eq!(r.height(), 85);
        assert_eq!(bicubic_resize(&img, 0.001).unwrap().height(), 1);
        assert!(bicubic_resize(&img, 0.0).is_err());
        assert!(bicubic_resize(&img, -1.0).is_err());
    }

    #[test]
    fn rotation_properties() {
        let img = ramp(4, 6);
        let r = rotate_plane(&img.y, 1);
        assert_eq!((r.height(), r.width()), (6, 4));
        // counter-clockwise: the top-right corner moves to the top-left
        assert_eq!(r.get(0, 0, 0, 0), img.y.get(0, 0, 0, 5));
        let twice = rotate_plane(&rotate_plane(&img.y, 2), 2);
        assert_eq!(twice, img.y);
        assert_eq!(rotate_plane(&img.y, 4), img.y);
    }

    #[test]
    fn augmentation_count() {
        let variants = augmentation_variants(&ramp(40, 30)).unwrap();
        assert_eq!(variants.len(), 20);
        assert_eq!(variants[0].y, ramp(40, 30).y);
        assert_eq!((variants[1].height(), variants[1].width()), (30, 40));
        assert_eq!(variants[19].height(), scaled_len(30, 0.6));
    }

    #[test]
    fn pair_geometry() {
        for (n, f, hr) in [(2, 10, 19), (3, 7, 19), (4, 6, 21)] {
            let set = make_training_set(&[ramp(60, 50)], n, &TilingOptions::default()).unwrap();
            assert!(!set.is_empty());
            for p in &set.pairs {
                assert_eq!(p.lr.shape(), [1, 1, f, f]);
                assert_eq!(p.hr.shape(), [1, 1, hr, hr]);
            }
        }
    }

    #[test]
    fn single_tile() {
        let set = make_training_set(&[ramp(21, 21)], 3, &TilingOptions::default()).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.manifest[0].origin, (0, 0));
    }

    #[test]
    fn augmented_set_uses_twenty_variants() {
        let opts = TilingOptions {
            augment: true,
            ..Default::default()
        };
        let set = make_training_set(&[ramp(64, 64)], 3, &opts).unwrap();
        let mut transforms: Vec<_> = set.manifest.iter().map(|e| e.transform.clone()).collect();
        transforms.dedup();
        assert_eq!(transforms.len(), 20);
        assert!(set.manifest_text().lines().count() == set.len() + 1);
    }

    #[test]
    fn too_small_images_are_skipped() {
        let set = make_training_set(&[ramp(10, 10), ramp(21, 21)], 3, &TilingOptions::default())
            .unwrap();
        assert_eq!(set.len(), 1);
        assert!(make_training_set(&[], 3, &TilingOptions::default()).is_err());
    }

    #[test]
    fn interpolated_pairs_have_hr_geometry() {
        let opts = TilingOptions {
            interpolated_input: true,
            ..Default::default()
        };
        let set = make_training_set(&[ramp(42, 42)], 3, &opts).unwrap();
        assert_eq!(set.len(), 4);
        assert_eq!(set.pairs[0].lr.shape(), [1, 1, 19, 19]);
    }

    #[test]
    fn upscale_shapes() {
        let spec = ArchitectureSpec::fsrcnn(8, 4, 1, 3).unwrap();
        let model = Model::build(spec, &InitPolicy::default(), 1).unwrap();
        let img = ramp(60, 80);
        let out = upscale_full(&model, &img).unwrap();
        assert_eq!((out.height(), out.width()), (180, 240));
        assert!(!out.is_color());
        assert!(out.y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));

        let mut color = img.clone();
        color.chroma = Some((img.y.clone(), img.y.clone()));
        let out = upscale_full(&model, &color).unwrap();
        let (cb, _) = out.chroma.as_ref().unwrap();
        assert_eq!(cb.shape(), [1, 1, 180, 240]);
    }
}
