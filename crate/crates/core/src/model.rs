//! Network architectures, parameter and cost accounting, weight files and
//! cross-scale transfer of the convolution layers.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::layers::{ConvLayer, DeconvLayer, PReluLayer};
use crate::tensor::Tensor;

/// Kernel size of the upsampling layer.
pub const DECONV_FILTER: usize = 9;

/// Named architectures: the two SRCNN baselines, the two intermediate
/// states between SRCNN-Ex and FSRCNN, and the FSRCNN family itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ArchKind {
    Srcnn915,
    SrcnnEx955,
    Transition1,
    Transition2,
    Fsrcnn,
}

impl ArchKind {
    fn code(self) -> u8 {
        match self {
            ArchKind::Srcnn915 => 0,
            ArchKind::SrcnnEx955 => 1,
            ArchKind::Transition1 => 2,
            ArchKind::Transition2 => 3,
            ArchKind::Fsrcnn => 4,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => ArchKind::Srcnn915,
            1 => ArchKind::SrcnnEx955,
            2 => ArchKind::Transition1,
            3 => ArchKind::Transition2,
            4 => ArchKind::Fsrcnn,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    PRelu,
    Deconv,
}

impl LayerKind {
    fn code(self) -> u8 {
        match self {
            LayerKind::Conv => 0,
            LayerKind::PRelu => 1,
            LayerKind::Deconv => 2,
        }
    }
}

/// One layer in `Conv(f, n, c)` notation. PReLU entries use `f = 1` and
/// `n = c` = channel count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub filter: usize,
    pub filters: usize,
    pub channels: usize,
    pub stride: usize,
}

impl LayerSpec {
    fn conv(filter: usize, filters: usize, channels: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Conv,
            filter,
            filters,
            channels,
            stride: 1,
        }
    }

    fn prelu(channels: usize) -> Self {
        LayerSpec {
            kind: LayerKind::PRelu,
            filter: 1,
            filters: channels,
            channels,
            stride: 1,
        }
    }

    fn deconv(channels: usize, stride: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Deconv,
            filter: DECONV_FILTER,
            filters: 1,
            channels,
            stride,
        }
    }

    /// `f^2 * n * c` for weighted layers, zero for PReLU.
    pub fn weight_count(&self) -> usize {
        match self.kind {
            LayerKind::PRelu => 0,
            _ => self.filter * self.filter * self.filters * self.channels,
        }
    }

    /// Biases for weighted layers, slopes for PReLU.
    pub fn extra_count(&self) -> usize {
        self.filters
    }
}

/// Symbolic description of a network. `d`, `s` and `m` are the LR feature
/// dimension, shrunk dimension and mapping depth; they are fixed by the
/// named non-FSRCNN kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchitectureSpec {
    pub kind: ArchKind,
    pub d: usize,
    pub s: usize,
    pub m: usize,
    pub scale: usize,
}

fn check_scale(scale: usize) -> Result<()> {
    if (2..=4).contains(&scale) {
        Ok(())
    } else {
        Err(Error::Spec(format!("scale must be 2, 3 or 4, got {scale}")))
    }
}

impl ArchitectureSpec {
    pub fn fsrcnn(d: usize, s: usize, m: usize, scale: usize) -> Result<Self> {
        let spec = ArchitectureSpec {
            kind: ArchKind::Fsrcnn,
            d,
            s,
            m,
            scale,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn named(kind: ArchKind, scale: usize) -> Result<Self> {
        let (d, s, m) = match kind {
            ArchKind::Srcnn915 | ArchKind::SrcnnEx955 | ArchKind::Transition1 => (64, 32, 0),
            ArchKind::Transition2 => (64, 12, 4),
            ArchKind::Fsrcnn => (56, 12, 4),
        };
        let spec = ArchitectureSpec {
            kind,
            d,
            s,
            m,
            scale,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Parses `fsrcnn:d,s,m`, `srcnn:915`, `srcnn:955`, `transition:1` or
    /// `transition:2`.
    pub fn parse(arch: &str, scale: usize) -> Result<Self> {
        let bad = || Error::Spec(format!("unrecognised architecture `{arch}`"));
        let (family, args) = arch.split_once(':').ok_or_else(bad)?;
        match (family.trim().to_ascii_lowercase().as_str(), args.trim()) {
            ("fsrcnn", args) => {
                let nums = args
                    .split(',')
                    .map(|v| v.trim().parse::<usize>().map_err(|_| bad()))
                    .collect::<Result<Vec<_>>>()?;
                match nums[..] {
                    [d, s, m] => Self::fsrcnn(d, s, m, scale),
                    _ => Err(bad()),
                }
            }
            ("srcnn", "915") => Self::named(ArchKind::Srcnn915, scale),
            ("srcnn", "955") => Self::named(ArchKind::SrcnnEx955, scale),
            ("transition", "1") => Self::named(ArchKind::Transition1, scale),
            ("transition", "2") => Self::named(ArchKind::Transition2, scale),
            _ => Err(bad()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_scale(self.scale)?;
        if self.kind == ArchKind::Fsrcnn && !(self.s >= 1 && self.d >= self.s) {
            return Err(Error::Spec(format!(
                "FSRCNN needs d >= s >= 1, got d={} s={}",
                self.d, self.s
            )));
        }
        if self.kind != ArchKind::Fsrcnn {
            let canonical = Self::named_unchecked(self.kind);
            if (self.d, self.s, self.m) != canonical {
                return Err(Error::Spec(format!(
                    "{:?} has fixed (d,s,m) = {canonical:?}",
                    self.kind
                )));
            }
        }
        Ok(())
    }

    fn named_unchecked(kind: ArchKind) -> (usize, usize, usize) {
        match kind {
            ArchKind::Transition2 => (64, 12, 4),
            _ => (64, 32, 0),
        }
    }

    pub fn with_scale(self, scale: usize) -> Result<Self> {
        let spec = ArchitectureSpec { scale, ..self };
        spec.validate()?;
        Ok(spec)
    }

    /// True when the network ends in a deconvolution and therefore consumes
    /// the original LR image; SRCNN-style nets consume a bicubic-upscaled one.
    pub fn upsamples_in_network(&self) -> bool {
        !matches!(self.kind, ArchKind::Srcnn915 | ArchKind::SrcnnEx955)
    }

    /// Ordered layer list, activations included.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let n = self.scale;
        let mut convs = match self.kind {
            ArchKind::Srcnn915 => vec![
                LayerSpec::conv(9, 64, 1),
                LayerSpec::conv(1, 32, 64),
                LayerSpec::conv(5, 1, 32),
            ],
            ArchKind::SrcnnEx955 => vec![
                LayerSpec::conv(9, 64, 1),
                LayerSpec::conv(5, 32, 64),
                LayerSpec::conv(5, 1, 32),
            ],
            ArchKind::Transition1 => vec![
                LayerSpec::conv(9, 64, 1),
                LayerSpec::conv(5, 32, 64),
                LayerSpec::deconv(32, n),
            ],
            ArchKind::Transition2 | ArchKind::Fsrcnn => {
                let first = if self.kind == ArchKind::Fsrcnn { 5 } else { 9 };
                let (d, s) = (self.d, self.s);
                let mut v = vec![LayerSpec::conv(first, d, 1), LayerSpec::conv(1, s, d)];
                v.extend((0..self.m).map(|_| LayerSpec::conv(3, s, s)));
                v.push(LayerSpec::conv(1, d, s));
                v.push(LayerSpec::deconv(d, n));
                v
            }
        };
        let last = convs.pop().expect("every architecture has layers");
        let mut out = Vec::with_capacity(2 * convs.len() + 1);
        for c in convs {
            out.push(c);
            out.push(LayerSpec::prelu(c.filters));
        }
        out.push(last);
        out
    }

    /// Spatial output size for an `h x w` network input.
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        if self.upsamples_in_network() {
            let n = self.scale;
            (n * h - n + 1, n * w - n + 1)
        } else {
            (h, w)
        }
    }

    /// `f x f` LR sub-image side used for training pairs.
    pub fn sub_image_size(&self) -> usize {
        lr_sub_image_size(self.scale)
    }
}

/// LR sub-image side per scale factor: 10, 7 and 6 for x2, x3 and x4.
pub fn lr_sub_image_size(scale: usize) -> usize {
    match scale {
        2 => 10,
        3 => 7,
        4 => 6,
        _ => panic!("unsupported scale {scale}"),
    }
}

impl fmt::Display for ArchitectureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ArchKind::Srcnn915 => write!(f, "srcnn:915"),
            ArchKind::SrcnnEx955 => write!(f, "srcnn:955"),
            ArchKind::Transition1 => write!(f, "transition:1"),
            ArchKind::Transition2 => write!(f, "transition:2"),
            ArchKind::Fsrcnn => write!(f, "fsrcnn:{},{},{}", self.d, self.s, self.m),
        }
    }
}

/// Weights-only count `sum f^2 n c`, optionally plus biases and PReLU slopes.
pub fn count_parameters(spec: &ArchitectureSpec, include_bias_and_prelu: bool) -> usize {
    spec.layers()
        .iter()
        .map(|l| l.weight_count() + if include_bias_and_prelu { l.extra_count() } else { 0 })
        .sum()
}

/// Multiply-accumulates for one forward pass over an LR image of
/// `lr_pixels` pixels. SRCNN-style nets run on the `n^2`-times larger
/// interpolated image; the others run on the LR grid, FSRCNN costing
/// `9ms^2 + 2sd + 106d` per LR pixel.
pub fn estimate_cost(spec: &ArchitectureSpec, lr_pixels: u64) -> u64 {
    let (d, s, m) = (spec.d as u64, spec.s as u64, spec.m as u64);
    let per_pixel = match spec.kind {
        ArchKind::Fsrcnn => 9 * m * s * s + 2 * s * d + 106 * d,
        _ => count_parameters(spec, false) as u64,
    };
    if spec.upsamples_in_network() {
        per_pixel * lr_pixels
    } else {
        let n = spec.scale as u64;
        per_pixel * n * n * lr_pixels
    }
}

/// Cost ratio `reference / target` at equal LR input size.
pub fn speedup(reference: &ArchitectureSpec, target: &ArchitectureSpec) -> f64 {
    estimate_cost(reference, 1) as f64 / estimate_cost(target, 1) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(ConvLayer),
    PRelu(PReluLayer),
    Deconv(DeconvLayer),
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv(_) => LayerKind::Conv,
            Layer::PRelu(_) => LayerKind::PRelu,
            Layer::Deconv(_) => LayerKind::Deconv,
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv(l) => l.forward(input),
            Layer::PRelu(l) => l.forward(input),
            Layer::Deconv(l) => l.forward(input),
        }
    }

    /// Parameter buffers in file order: weights then biases, or slopes.
    pub fn params(&self) -> Vec<&[f32]> {
        match self {
            Layer::Conv(l) => vec![l.weights.data(), &l.bias],
            Layer::PRelu(l) => vec![&l.slopes],
            Layer::Deconv(l) => vec![l.weights.data(), &l.bias],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        match self {
            Layer::Conv(l) => vec![l.weights.data_mut(), &mut l.bias],
            Layer::PRelu(l) => vec![&mut l.slopes],
            Layer::Deconv(l) => vec![l.weights.data_mut(), &mut l.bias],
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn dims(&self) -> [usize; 4] {
        match self {
            Layer::Conv(l) => l.weights.shape(),
            Layer::PRelu(l) => [l.slopes.len(), 1, 1, 1],
            Layer::Deconv(l) => l.weights.shape(),
        }
    }
}

/// Weight initialisation. Convolutions feeding a PReLU draw from
/// `N(0, 2 / ((1 + a^2) * fan_in))` with `fan_in = f^2 c`; the output layer
/// (no activation after it) draws from `N(0, output_std^2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitPolicy {
    pub prelu_slope: f32,
    pub output_std: f32,
}

impl Default for InitPolicy {
    fn default() -> Self {
        InitPolicy {
            prelu_slope: 0.25,
            output_std: 0.001,
        }
    }
}

fn fill_normal(buf: &mut [f32], std: f32, rng: &mut ChaCha8Rng) {
    let dist = Normal::new(0.0f32, std).expect("finite standard deviation");
    buf.iter_mut().for_each(|v| *v = dist.sample(rng));
}

fn layer_from_spec(l: &LayerSpec, slope: f32) -> Layer {
    match l.kind {
        LayerKind::Conv => Layer::Conv(ConvLayer::new(l.filter, l.filters, l.channels)),
        LayerKind::PRelu => Layer::PRelu(PReluLayer::new(l.channels, slope)),
        LayerKind::Deconv => {
            Layer::Deconv(DeconvLayer::new(l.filter, l.filters, l.channels, l.stride))
        }
    }
}

/// Per-layer parameter gradients aligned with [`Layer::params`]. Layers
/// whose gradients were not requested hold an empty list.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Vec<Vec<f32>>>,
}

/// A network with parameters. `trainable[i]` is false for layers frozen by
/// cross-scale transfer.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ArchitectureSpec,
    layers: Vec<Layer>,
    trainable: Vec<bool>,
}

impl Model {
    pub fn build(spec: ArchitectureSpec, init: &InitPolicy, rng_seed: u64) -> Result<Model> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let specs = spec.layers();
        let last = specs.len() - 1;
        let gain = 2.0 / (1.0 + init.prelu_slope * init.prelu_slope);
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, ls)| {
                let mut layer = layer_from_spec(ls, init.prelu_slope);
                match &mut layer {
                    Layer::Conv(c) if i != last => {
                        let fan_in = (ls.filter * ls.filter * ls.channels) as f32;
                        fill_normal(c.weights.data_mut(), (gain / fan_in).sqrt(), &mut rng);
                    }
                    Layer::Conv(c) => fill_normal(c.weights.data_mut(), init.output_std, &mut rng),
                    Layer::Deconv(c) => {
                        fill_normal(c.weights.data_mut(), init.output_std, &mut rng)
                    }
                    Layer::PRelu(_) => {}
                }
                layer
            })
            .collect::<Vec<_>>();
        Ok(Model {
            spec,
            trainable: vec![true; layers.len()],
            layers,
        })
    }

    /// Assembles a model from explicit layers, checking they realise `spec`.
    pub fn from_layers(spec: ArchitectureSpec, layers: Vec<Layer>) -> Result<Model> {
        spec.validate()?;
        let specs = spec.layers();
        if specs.len() != layers.len() {
            return Err(Error::Spec(format!(
                "{spec} has {} layers, got {}",
                specs.len(),
                layers.len()
            )));
        }
        for (i, (ls, l)) in specs.iter().zip(&layers).enumerate() {
            let want = layer_from_spec(ls, 0.0);
            if want.kind() != l.kind() || want.dims() != l.dims() {
                return Err(Error::Spec(format!(
                    "layer {i}: expected {:?} {:?}, got {:?} {:?}",
                    want.kind(),
                    want.dims(),
                    l.kind(),
                    l.dims()
                )));
            }
            if let (Layer::Deconv(a), Layer::Deconv(b)) = (&want, l) {
                if (a.stride, a.crop) != (b.stride, b.crop) {
                    return Err(Error::Spec(format!(
                        "layer {i}: deconv stride/crop {}/{} does not match scale {}",
                        b.stride, b.crop, spec.scale
                    )));
                }
            }
        }
        Ok(Model {
            spec,
            trainable: vec![true; layers.len()],
            layers,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn scale(&self) -> usize {
        self.spec.scale
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn trainable(&self) -> &[bool] {
        &self.trainable
    }

    /// Marks every layer except the final deconvolution as frozen.
    pub fn freeze_conv_layers(&mut self) {
        for (t, l) in self.trainable.iter_mut().zip(&self.layers) {
            *t = matches!(l, Layer::Deconv(_));
        }
    }

    pub fn unfreeze_all(&mut self) {
        self.trainable.iter_mut().for_each(|t| *t = true);
    }

    /// Parameters including biases and slopes.
    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut x = self.layers[0].forward(input)?;
        for l in &self.layers[1..] {
            x = l.forward(&x)?;
        }
        Ok(x)
    }

    /// Activations feeding the final layer (the shared LR feature maps for
    /// deconvolution-terminated nets).
    pub fn forward_features(&self, input: &Tensor) -> Result<Tensor> {
        let mut x = input.clone();
        for l in &self.layers[..self.layers.len() - 1] {
            x = l.forward(&x)?;
        }
        Ok(x)
    }

    /// Input followed by every layer's output; the trace consumed by
    /// [`Model::backward`].
    pub fn forward_trace(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        let mut trace = Vec::with_capacity(self.layers.len() + 1);
        trace.push(input.clone());
        for l in &self.layers {
            let y = l.forward(trace.last().expect("non-empty"))?;
            trace.push(y);
        }
        Ok(trace)
    }

    /// Backpropagates `grad_out` through the trace. Parameter gradients are
    /// produced for layers with `wanted[i]`; propagation stops below the
    /// lowest wanted layer.
    pub fn backward(&self, trace: &[Tensor], grad_out: &Tensor, wanted: &[bool]) -> Result<Gradients> {
        if trace.len() != self.layers.len() + 1 || wanted.len() != self.layers.len() {
            return Err(Error::shape("trace/mask length does not match layer count"));
        }
        let mut grads = vec![Vec::new(); self.layers.len()];
        let Some(lowest) = wanted.iter().position(|&w| w) else {
            return Ok(Gradients { layers: grads });
        };
        let mut g = grad_out.clone();
        for i in (lowest..self.layers.len()).rev() {
            let input = &trace[i];
            let need_in = i > lowest;
            match &self.layers[i] {
                Layer::Conv(l) => {
                    let pg = l.backward_impl(input, &g, need_in)?;
                    if wanted[i] {
                        grads[i] = vec![pg.grad_w.into_vec(), pg.grad_b];
                    }
                    if let Some(gi) = pg.grad_in {
                        g = gi;
                    }
                }
                Layer::Deconv(l) => {
                    let pg = l.backward_impl(input, &g, need_in)?;
                    if wanted[i] {
                        grads[i] = vec![pg.grad_w.into_vec(), pg.grad_b];
                    }
                    if let Some(gi) = pg.grad_in {
                        g = gi;
                    }
                }
                Layer::PRelu(l) => {
                    let pg = l.backward(input, &g)?;
                    if wanted[i] {
                        grads[i] = vec![pg.grad_a];
                    }
                    g = pg.grad_in;
                }
            }
        }
        Ok(Gradients { layers: grads })
    }

    /// Serialises to the `FSRC` weight format (see [`Model::from_bytes`]).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.parameter_count() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.spec.kind.code());
        for v in [self.spec.d, self.spec.s, self.spec.m, self.spec.scale] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for l in &self.layers {
            out.push(l.kind().code());
            for d in l.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for p in l.params() {
                for v in p {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses the weight format:
    ///
    /// ```text
    /// "FSRC" | u32 version=1 | u8 kind | u32 d, s, m, n
    /// per layer: u8 layer kind | u32 dims[4] | f32 weights.. biases.. (or slopes..)
    /// u32 CRC32 of everything before it
    /// ```
    ///
    /// All integers and floats are little-endian. Layer kinds are 0 conv,
    /// 1 PReLU, 2 deconv; conv dims are `(out, in, f, f)`, deconv dims
    /// `(in, out, f, f)`, PReLU dims `(channels, 1, 1, 1)`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}")));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        if bytes.len() < HEADER_LEN + 4 {
            return Err(Error::format(bytes.len(), "truncated header"));
        }
        let body = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body..].try_into().expect("4 bytes"));
        let actual = crc32fast::hash(&bytes[..body]);
        if stored != actual {
            return Err(Error::format(
                body,
                format!("checksum mismatch (stored {stored:08x}, computed {actual:08x})"),
            ));
        }
        let r_bytes = &bytes[..body];
        let mut r = Reader {
            bytes: r_bytes,
            pos: r.pos,
        };
        let kind_at = r.pos;
        let kind = ArchKind::from_code(r.u8()?)
            .ok_or_else(|| Error::format(kind_at, "unknown architecture kind"))?;
        let (d, s, m, n) = (r.usize()?, r.usize()?, r.usize()?, r.usize()?);
        let spec = ArchitectureSpec {
            kind,
            d,
            s,
            m,
            scale: n,
        };
        spec.validate()
            .map_err(|e| Error::format(kind_at, e.to_string()))?;
        let mut layers = Vec::new();
        for ls in spec.layers() {
            let at = r.pos;
            let mut layer = layer_from_spec(&ls, 0.0);
            let code = r.u8()?;
            let dims = [r.usize()?, r.usize()?, r.usize()?, r.usize()?];
            if code != ls.kind.code() || dims != layer.dims() {
                return Err(Error::format(
                    at,
                    format!(
                        "layer record kind {code} dims {dims:?} disagrees with {:?} {:?}",
                        ls.kind,
                        layer.dims()
                    ),
                ));
            }
            for p in layer.params_mut() {
                for v in p.iter_mut() {
                    *v = r.f32()?;
                }
            }
            layers.push(layer);
        }
        if r.pos != r_bytes.len() {
            return Err(Error::format(r.pos, "trailing bytes after last layer"));
        }
        Model::from_layers(spec, layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Model::from_bytes(&bytes)
    }

    /// CRC32 of the serialised parameters.
    pub fn checksum(&self) -> u32 {
        crc32fast::hash(&self.to_bytes())
    }
}

const MAGIC: &[u8; 4] = b"FSRC";
const FORMAT_VERSION: u32 = 1;
/// Magic, version, kind and the four spec integers.
pub const HEADER_LEN: usize = 4 + 4 + 1 + 16;
/// Kind byte plus four dims per layer record.
pub const LAYER_RECORD_LEN: usize = 1 + 16;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.pos, format!("truncated: need {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Copies every layer except the deconvolution from an FSRCNN model into a
/// model for `target_scale`, with a fresh `N(0, output_std^2)` deconvolution.
/// The copied layers come back frozen.
pub fn transplant_conv_layers(
    src: &Model,
    target_scale: usize,
    init: &InitPolicy,
    rng_seed: u64,
) -> Result<Model> {
    if src.spec.kind != ArchKind::Fsrcnn {
        return Err(Error::Spec(format!(
            "only FSRCNN models can be transplanted, got {}",
            src.spec
        )));
    }
    let spec = src.spec.with_scale(target_scale)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut layers = src.layers[..src.layers.len() - 1].to_vec();
    let mut deconv = DeconvLayer::new(DECONV_FILTER, 1, spec.d, target_scale);
    fill_normal(deconv.weights.data_mut(), init.output_std, &mut rng);
    layers.push(Layer::Deconv(deconv));
    let mut model = Model::from_layers(spec, layers)?;
    model.freeze_conv_layers();
    Ok(model)
}
