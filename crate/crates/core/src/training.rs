//! Mini-batch SGD with momentum on the pixel-wise MSE, cross-scale
//! fine-tuning of the deconvolution layer, and the two-phase schedule that
//! adds extra data once validation PSNR saturates.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{ImageY, SamplePair, TrainingSet};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, Upscaler};
use crate::model::{lr_sub_image_size, transplant_conv_layers, InitPolicy, Model};
use crate::tensor::{mse, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    /// Rate for every layer except the last (convolutions and PReLU slopes).
    pub lr_conv: f32,
    /// Rate for the last layer (the deconvolution in FSRCNN).
    pub lr_deconv: f32,
    /// Halve both rates when fine-tuning.
    pub finetune_halving: bool,
    pub momentum: f32,
    pub batch_size: usize,
    pub max_iterations: usize,
    /// Validation period in iterations; 0 evaluates only at the start and end.
    pub eval_every: usize,
    pub rng_seed: u64,
    /// Keep every layer except the last fixed.
    pub freeze_conv: bool,
    pub saturation_window: usize,
    pub saturation_threshold_db: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_conv: 1e-3,
            lr_deconv: 1e-4,
            finetune_halving: true,
            momentum: 0.9,
            batch_size: 64,
            max_iterations: 10_000,
            eval_every: 500,
            rng_seed: 0,
            freeze_conv: false,
            saturation_window: 5,
            saturation_threshold_db: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok_rate = |r: f32| r > 0.0 && r.is_finite();
        if !ok_rate(self.lr_conv) || !ok_rate(self.lr_deconv) {
            return Err(Error::Domain(format!(
                "learning rates must be positive, got {} / {}",
                self.lr_conv, self.lr_deconv
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Domain("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Domain(format!("momentum {} not in [0, 1)", self.momentum)));
        }
        if self.saturation_window == 0 {
            return Err(Error::Domain("saturation window must be at least 1".into()));
        }
        Ok(())
    }

    /// The default rates re-expressed for this crate's loss. The default
    /// rates belong to a loss summed over the output pixels of each sample
    /// and halved (Caffe's Euclidean loss); the loss here is the mean over
    /// pixels, so matching updates need rates `P / 2` times larger, `P`
    /// being the number of HR pixels per training sample at `scale`.
    pub fn pixel_mean_equivalent(scale: usize) -> TrainConfig {
        let f = lr_sub_image_size(scale);
        let hr = scale * f - scale + 1;
        let k = (hr * hr) as f32 / 2.0;
        let d = TrainConfig::default();
        TrainConfig {
            lr_conv: d.lr_conv * k,
            lr_deconv: d.lr_deconv * k,
            ..d
        }
    }

    pub fn halved(&self) -> TrainConfig {
        TrainConfig {
            lr_conv: self.lr_conv / 2.0,
            lr_deconv: self.lr_deconv / 2.0,
            ..*self
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// `(iteration, mini-batch loss)`, iterations counted from 1.
    pub losses: Vec<(usize, f64)>,
    /// `(iteration, mean validation PSNR)`; iteration 0 is the starting model.
    pub val_psnr: Vec<(usize, f64)>,
    /// Wall-clock seconds elapsed at the end of each iteration.
    pub elapsed: Vec<f64>,
    pub seconds_per_iteration: f64,
    pub best_iteration: usize,
    pub best_psnr: Option<f64>,
    /// CRC32 of the returned model's weight file.
    pub checksum: u32,
}

impl TrainReport {
    pub fn iterations(&self) -> usize {
        self.losses.last().map_or(0, |&(i, _)| i)
    }

    /// `iteration,loss,val_psnr,seconds`; `val_psnr` is empty where no
    /// validation ran.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,loss,val_psnr,seconds\n");
        let mut val = self.val_psnr.iter().peekable();
        if let Some(&&(0, p)) = val.peek() {
            let _ = writeln!(s, "0,,{p:.6},0");
            val.next();
        }
        for (k, &(it, loss)) in self.losses.iter().enumerate() {
            let _ = write!(s, "{it},{loss:.9e},");
            if let Some(&&(vi, p)) = val.peek() {
                if vi == it {
                    let _ = write!(s, "{p:.6}");
                    val.next();
                }
            }
            let _ = writeln!(s, ",{:.6}", self.elapsed.get(k).copied().unwrap_or(0.0));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Appends another run whose iterations continue after this one.
    fn append(&mut self, other: TrainReport) {
        let offset = self.iterations();
        let t0 = self.elapsed.last().copied().unwrap_or(0.0);
        self.losses.extend(other.losses.iter().map(|&(i, l)| (i + offset, l)));
        self.val_psnr.extend(
            other
                .val_psnr
                .iter()
                .filter(|&&(i, _)| i > 0)
                .map(|&(i, p)| (i + offset, p)),
        );
        self.elapsed.extend(other.elapsed.iter().map(|t| t + t0));
        let n = self.losses.len().max(1) as f64;
        self.seconds_per_iteration = self.elapsed.last().copied().unwrap_or(0.0) / n;
        if other.best_psnr.is_some() && other.best_iteration > 0 {
            self.best_iteration = other.best_iteration + offset;
            self.best_psnr = other.best_psnr;
        }
        self.checksum = other.checksum;
    }
}

/// Fires once at least `window` values were seen and the best of the last
/// `window` exceeds the first of them by less than `threshold`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaturationDetector {
    window: usize,
    threshold: f64,
    history: Vec<f64>,
}

impl SaturationDetector {
    pub fn new(window: usize, threshold: f64) -> Self {
        SaturationDetector {
            window: window.max(1),
            threshold,
            history: Vec::new(),
        }
    }

    /// Records a value and reports whether the curve is saturated.
    pub fn push(&mut self, value: f64) -> bool {
        self.history.push(value);
        self.is_saturated()
    }

    pub fn is_saturated(&self) -> bool {
        let k = self.history.len();
        if k < self.window {
            return false;
        }
        let recent = &self.history[k - self.window..];
        let best = recent.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        best - recent[0] < self.threshold
    }
}

fn check_dataset(model: &Model, data: &TrainingSet) -> Result<()> {
    let first = data
        .pairs
        .first()
        .ok_or_else(|| Error::Domain("training set is empty".into()))?;
    for p in &data.pairs {
        if p.scale != model.scale() {
            return Err(Error::Spec(format!(
                "training pair at x{} for a x{} model",
                p.scale,
                model.scale()
            )));
        }
        if p.lr.shape() != first.lr.shape() || p.hr.shape() != first.hr.shape() {
            return Err(Error::shape("training pairs differ in size"));
        }
    }
    let (oh, ow) = model
        .spec()
        .output_size(first.lr.height(), first.lr.width());
    if (oh, ow) != (first.hr.height(), first.hr.width()) {
        return Err(Error::shape(format!(
            "{} maps {}x{} inputs to {oh}x{ow}, targets are {}x{}",
            model.spec(),
            first.lr.height(),
            first.lr.width(),
            first.hr.height(),
            first.hr.width()
        )));
    }
    Ok(())
}

/// Mean of the per-pair MSE over a whole set.
pub fn dataset_loss(model: &Model, data: &TrainingSet) -> Result<f64> {
    let mut total = 0.0;
    for chunk in data.pairs.chunks(64) {
        let (x, t) = stack_pairs(chunk.iter())?;
        total += mse(&model.forward(&x)?, &t)? * chunk.len() as f64;
    }
    Ok(total / data.len().max(1) as f64)
}

fn stack_pairs<'a>(pairs: impl Iterator<Item = &'a SamplePair> + Clone) -> Result<(Tensor, Tensor)> {
    let lr: Vec<&Tensor> = pairs.clone().map(|p| &p.lr).collect();
    let hr: Vec<&Tensor> = pairs.map(|p| &p.hr).collect();
    Ok((Tensor::stack(&lr)?, Tensor::stack(&hr)?))
}

/// SGD-with-momentum state for one model. Velocity follows
/// `v <- momentum v + lr g; w <- w - v`.
#[derive(Clone, Debug)]
pub struct Trainer {
    model: Model,
    cfg: TrainConfig,
    velocity: Vec<Vec<Vec<f32>>>,
    wanted: Vec<bool>,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let last = model.layers().len() - 1;
        let wanted = model
            .trainable()
            .iter()
            .enumerate()
            .map(|(i, &t)| t && (i == last || !cfg.freeze_conv))
            .collect();
        let velocity = model
            .layers()
            .iter()
            .map(|l| l.params().iter().map(|p| vec![0.0; p.len()]).collect())
            .collect();
        Ok(Trainer {
            model,
            cfg,
            velocity,
            wanted,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    /// Which layers receive updates.
    pub fn updated_layers(&self) -> &[bool] {
        &self.wanted
    }

    /// Parameter gradients of the batch MSE and the loss itself.
    pub fn gradients(&self, input: &Tensor, target: &Tensor) -> Result<(f64, Vec<Vec<Vec<f32>>>)> {
        let trace = self.model.forward_trace(input)?;
        let out = trace.last().expect("non-empty trace");
        let loss = mse(out, target)?;
        let scale = 2.0 / out.len() as f32;
        let grad_out = Tensor::from_vec(
            out.shape(),
            out.data()
                .iter()
                .zip(target.data())
                .map(|(&o, &t)| scale * (o - t))
                .collect(),
        )?;
        let grads = self.model.backward(&trace, &grad_out, &self.wanted)?;
        Ok((loss, grads.layers))
    }

    /// One update on a batch; returns the loss before the update.
    pub fn step(&mut self, input: &Tensor, target: &Tensor, iteration: usize) -> Result<f64> {
        let (loss, grads) = self.gradients(input, target)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iteration,
                loss,
                lr_conv: self.cfg.lr_conv,
                lr_deconv: self.cfg.lr_deconv,
            });
        }
        let last = self.model.layers().len() - 1;
        let mu = self.cfg.momentum;
        for (i, layer) in self.model.layers_mut().iter_mut().enumerate() {
            if !self.wanted[i] {
                continue;
            }
            let lr = if i == last {
                self.cfg.lr_deconv
            } else {
                self.cfg.lr_conv
            };
            for ((w, g), v) in layer
                .params_mut()
                .into_iter()
                .zip(&grads[i])
                .zip(&mut self.velocity[i])
            {
                for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
                    *v = mu * *v + lr * g;
                    *w -= *v;
                }
            }
        }
        Ok(loss)
    }
}

/// Endless stream of indices, reshuffled every epoch from a seeded RNG.
struct Shuffler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Shuffler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Shuffler {
            order: (0..n).collect(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

fn validation_psnr(model: &Model, valset: &[ImageY]) -> Result<f64> {
    let opts = EvalOptions { quantize: false };
    Ok(evaluate(&Upscaler::Model(model), valset, &opts)?.mean_psnr)
}

fn train_inner(
    model: Model,
    data: &TrainingSet,
    valset: &[ImageY],
    cfg: &TrainConfig,
    mut detector: Option<&mut SaturationDetector>,
) -> Result<(Model, TrainReport)> {
    check_dataset(&model, data)?;
    let mut trainer = Trainer::new(model, *cfg)?;
    let batch = cfg.batch_size.min(data.len());
    let mut shuffler = Shuffler::new(data.len(), cfg.rng_seed);
    let mut report = TrainReport::default();
    let mut best: Option<(f64, Model)> = None;

    let mut validate = |trainer: &Trainer, it: usize, report: &mut TrainReport| -> Result<bool> {
        if valset.is_empty() {
            return Ok(false);
        }
        let p = validation_psnr(trainer.model(), valset)?;
        report.val_psnr.push((it, p));
        if best.as_ref().is_none_or(|(b, _)| p > *b) {
            best = Some((p, trainer.model().clone()));
            report.best_iteration = it;
            report.best_psnr = Some(p);
        }
        Ok(match detector.as_deref_mut() {
            Some(d) => d.push(p),
            None => false,
        })
    };

    validate(&trainer, 0, &mut report)?;
    let start = Instant::now();
    for it in 1..=cfg.max_iterations {
        let idx = shuffler.next_batch(batch);
        let (x, t) = stack_pairs(idx.iter().map(|&i| &data.pairs[i]))?;
        let loss = trainer.step(&x, &t, it)?;
        report.losses.push((it, loss));
        report.elapsed.push(start.elapsed().as_secs_f64());
        let due = cfg.eval_every > 0 && it % cfg.eval_every == 0;
        if (due || it == cfg.max_iterations) && validate(&trainer, it, &mut report)? {
            log::info!("validation PSNR saturated at iteration {it}");
            break;
        }
        if it % 100 == 0 {
            log::debug!("iteration {it}: loss {loss:.6e}");
        }
    }
    report.seconds_per_iteration =
        start.elapsed().as_secs_f64() / report.losses.len().max(1) as f64;
    let model = match best {
        Some((_, m)) => m,
        None => {
            report.best_iteration = report.iterations();
            trainer.into_model()
        }
    };
    report.checksum = model.checksum();
    Ok((model, report))
}

/// Trains on `data`, validating on the full images in `valset` (degraded
/// by the model's scale), and returns the checkpoint with the best
/// validation PSNR (the last iterate when `valset` is empty).
pub fn train(
    model: Model,
    data: &TrainingSet,
    valset: &[ImageY],
    cfg: &TrainConfig,
) -> Result<(Model, TrainReport)> {
    train_inner(model, data, valset, cfg, None)
}

/// Copies the convolution layers of `src` into a `target_scale` model with
/// a fresh deconvolution and trains only that layer.
pub fn finetune_for_scale(
    src: &Model,
    target_scale: usize,
    data: &TrainingSet,
    valset: &[ImageY],
    cfg: &TrainConfig,
) -> Result<(Model, TrainReport)> {
    let model = transplant_conv_layers(src, target_scale, &InitPolicy::default(), cfg.rng_seed)?;
    let mut cfg = if cfg.finetune_halving {
        cfg.halved()
    } else {
        *cfg
    };
    cfg.freeze_conv = true;
    train(model, data, valset, &cfg)
}

/// Phase 1 trains on `base` until validation PSNR saturates (or the
/// iteration budget runs out); phase 2 continues from the best phase-1
/// checkpoint on `base` followed by `extra`, at halved rates, for another
/// `max_iterations`.
pub fn two_step_schedule(
    model: Model,
    base: &TrainingSet,
    extra: &TrainingSet,
    valset: &[ImageY],
    cfg: &TrainConfig,
) -> Result<(Model, TrainReport)> {
    if let (Some(a), Some(b)) = (base.pairs.first(), extra.pairs.first()) {
        if a.scale != b.scale {
            return Err(Error::Spec(format!(
                "base set is x{}, extra set is x{}",
                a.scale, b.scale
            )));
        }
    }
    let mut detector = SaturationDetector::new(cfg.saturation_window, cfg.saturation_threshold_db);
    let (model, mut report) = train_inner(model, base, valset, cfg, Some(&mut detector))?;
    let mut combined = base.clone();
    combined.extend(extra.clone());
    let (model, phase2) = train(model, &combined, valset, &cfg.halved())?;
    report.append(phase2);
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchitectureSpec;

    fn tiny(scale: usize, seed: u64) -> Model {
        let spec = ArchitectureSpec::fsrcnn(4, 2, 1, scale).unwrap();
        Model::build(spec, &InitPolicy::default(), seed).unwrap()
    }

    fn pair(scale: usize, seed: u64) -> SamplePair {
        let f = crate::model::lr_sub_image_size(scale);
        let hr = scale * f - scale + 1;
        let v = |i: usize, k: usize| ((i as u64 * 7919 + seed * 104729) % k as u64) as f32 / k as f32;
        SamplePair {
            lr: Tensor::plane(f, f, (0..f * f).map(|i| v(i, 97)).collect()).unwrap(),
            hr: Tensor::plane(hr, hr, (0..hr * hr).map(|i| 0.2 + 0.6 * v(i, 89)).collect())
                .unwrap(),
            scale,
        }
    }

    fn set(pairs: Vec<SamplePair>) -> TrainingSet {
        TrainingSet {
            manifest: Vec::new(),
            pairs,
        }
    }

    #[test]
    fn detector_contract() {
        let mut d = SaturationDetector::new(5, 0.01);
        let fired: Vec<bool> = (0..7).map(|_| d.push(30.0)).collect();
        assert_eq!(fired, [false, false, false, false, true, true, true]);
        let mut d = SaturationDetector::new(3, 0.01);
        assert!(!d.push(30.0) && !d.push(30.1) && !d.push(30.2) && !d.push(30.3));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { lr_conv: 0.0, ..Default::default() },
            TrainConfig { lr_deconv: f32::NAN, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { momentum: 1.0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
        let c = TrainConfig::pixel_mean_equivalent(3);
        assert!((c.lr_conv - 0.1805).abs() < 1e-6 && (c.lr_deconv - 0.01805).abs() < 1e-7);
        assert!((TrainConfig::pixel_mean_equivalent(4).lr_conv - 0.2205).abs() < 1e-6);
        let h = TrainConfig::default().halved();
        assert_eq!((h.lr_conv, h.lr_deconv), (5e-4, 5e-5));
    }

    #[test]
    fn step_loss_is_plain_mse() {
        let mut t = Trainer::new(tiny(3, 1), TrainConfig::default()).unwrap();
        let p = pair(3, 2);
        let expected = mse(&t.model().forward(&p.lr).unwrap(), &p.hr).unwrap();
        assert_eq!(t.step(&p.lr, &p.hr, 1).unwrap(), expected);
    }

    #[test]
    fn scale_mismatch_rejected() {
        let data = set(vec![pair(2, 0)]);
        assert!(matches!(
            train(tiny(3, 0), &data, &[], &TrainConfig::default()),
            Err(Error::Spec(_))
        ));
        assert!(train(tiny(3, 0), &set(vec![]), &[], &TrainConfig::default()).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = TrainConfig {
            lr_conv: 1e30,
            lr_deconv: 1e30,
            max_iterations: 50,
            ..Default::default()
        };
        match train(tiny(3, 0), &set(vec![pair(3, 0)]), &[], &cfg) {
            Err(Error::Diverged { iteration, lr_conv, .. }) => {
                assert!(iteration >= 1);
                assert_eq!(lr_conv, 1e30);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn shuffler_covers_each_epoch() {
        let mut s = Shuffler::new(5, 3);
        let mut a = s.next_batch(5);
        a.sort();
        assert_eq!(a, [0, 1, 2, 3, 4]);
        assert_eq!(Shuffler::new(5, 3).next_batch(12), Shuffler::new(5, 3).next_batch(12));
    }

    #[test]
    fn csv_layout() {
        let r = TrainReport {
            losses: vec![(1, 0.5), (2, 0.25)],
            val_psnr: vec![(0, 20.0), (2, 21.0)],
            elapsed: vec![0.1, 0.2],
            ..Default::default()
        };
        let csv = r.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "iteration,loss,val_psnr,seconds");
        assert_eq!(lines[1], "0,,20.000000,0");
        assert!(lines[2].starts_with("1,5.000000000e-1,,"));
        assert!(lines[3].contains(",21.000000,"));
    }
}
