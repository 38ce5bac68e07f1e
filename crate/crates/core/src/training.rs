//! Adam and the independent training loops: the toy tracker, the implicit
//! representation and the offset predictor.
//!
//! Each loop keeps the parameters with the lowest validation loss seen so
//! far, including the initial ones, and returns them with the history.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::datagen::{TrainingPair, Video};
use crate::guidance::EmbeddingBank;
use crate::image::{crop, sample_bilinear, sub_image, Window};
use crate::nets::Params;
use crate::numerics::{Graph, Tensor, Var};
use crate::resampler::{lrr_defend_volume, offsets_graph, resample_graph, LResampleParams};
use crate::rng::{derive, index, seeded, uniform, Prng};
use crate::stir::{reconstruct_frame, FeatureVolume, StirParams, VolumeVars};
use crate::tracker::{features_graph, init_track, patch_to_response, tracker_loss, BBox, TrackerParams};
use crate::{Error, Result};

/// Adam with constant learning rate.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new<P: Params + ?Sized>(params: &P, lr: f32, beta1: f32, beta2: f32, eps: f32) -> Self {
        let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update; `grads` follows `params.tensors()` order.
    pub fn step<P: Params + ?Sized>(&mut self, params: &mut P, grads: &[Tensor]) -> Result<()> {
        let mut tensors = params.tensors_mut();
        if tensors.len() != grads.len() || tensors.len() != self.m.len() {
            return Err(Error::Shape(alloc::format!("{} gradients for {} tensors", grads.len(), tensors.len())));
        }
        self.t += 1;
        let c1 = 1.0 - libm::powf(self.beta1, self.t as f32);
        let c2 = 1.0 - libm::powf(self.beta2, self.t as f32);
        for (k, (p, g)) in tensors.iter_mut().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::Shape(alloc::format!("gradient {} has {} values, tensor {}", k, g.len(), p.len())));
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                *w -= self.lr * (m[i] / c1) / (libm::sqrtf(v[i] / c2) + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    /// Validate every this many optimizer steps.
    pub eval_every: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    /// Side of the random training crop; the full patch when larger.
    pub crop: usize,
    /// Query points per crop for the implicit representation.
    pub queries: usize,
    /// Fraction of queries placed at random sub-pixel positions.
    pub subpixel: f32,
    /// Search-window shift range (pixels) for tracker training.
    pub shift: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 8,
            epochs: 30,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            eval_every: 50,
            max_steps: None,
            crop: 24,
            queries: 256,
            subpixel: 0.25,
            shift: 12.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(alloc::format!("invalid training setting: {}", what)));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr must be > 0");
        }
        if self.batch == 0 || self.eval_every == 0 || self.crop < 2 || self.queries == 0 {
            return bad("batch, eval_every, queries must be > 0 and crop >= 2");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps > 0");
        }
        if !(0.0..=1.0).contains(&self.subpixel) || !(self.shift >= 0.0) {
            return bad("subpixel must lie in [0, 1] and shift >= 0");
        }
        Ok(())
    }

    fn adam<P: Params + ?Sized>(&self, params: &P) -> Adam {
        Adam::new(params, self.lr, self.beta1, self.beta2, self.adam_eps)
    }
}

/// One validation point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub epoch: usize,
    /// Mean training loss since the previous record.
    pub train_loss: Option<f32>,
    pub val_loss: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport<P> {
    /// Parameters with the lowest validation loss.
    pub params: P,
    pub best_val: f32,
    pub best_step: usize,
    pub steps: usize,
    pub history: Vec<EvalRecord>,
}

/// A failed run with the best parameters seen before the failure.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainFailure<P> {
    pub error: Error,
    pub last_good: P,
}

pub type TrainResult<P> = core::result::Result<TrainReport<P>, TrainFailure<P>>;

/// Observes and controls a training run.
pub trait Monitor {
    /// Called before each optimizer step; returning `false` ends the run.
    fn keep_going(&mut self, _step: usize) -> bool {
        true
    }

    fn record(&mut self, _rec: &EvalRecord) {}
}

/// A monitor that never stops a run.
pub struct NoMonitor;

impl Monitor for NoMonitor {}

/// Loss and gradients (in `params.tensors()` order) of one sample.
type SampleFn<'a, P> = dyn FnMut(&P, usize, &mut Prng) -> Result<(f32, Vec<Tensor>)> + 'a;
type ValFn<'a, P> = dyn FnMut(&P) -> Result<f32> + 'a;

fn run_loop<P: Params + Clone>(
    init: P,
    n_train: usize,
    cfg: &TrainConfig,
    monitor: &mut dyn Monitor,
    sample: &mut SampleFn<'_, P>,
    validate: &mut ValFn<'_, P>,
) -> TrainResult<P> {
    let fail = |error: Error, last_good: &P| TrainFailure { error, last_good: last_good.clone() };
    if let Err(e) = cfg.validate() {
        return Err(fail(e, &init));
    }
    if n_train == 0 {
        return Err(fail(Error::Config("no training samples".to_string()), &init));
    }
    let mut params = init;
    let mut adam = cfg.adam(&params);
    let first = match validate(&params) {
        Ok(v) => v,
        Err(e) => return Err(fail(e, &params)),
    };
    let mut history = vec![EvalRecord { step: 0, epoch: 0, train_loss: None, val_loss: first }];
    monitor.record(&history[0]);
    let mut best = (params.clone(), first, 0usize);
    let mut step = 0usize;
    let mut running = (0.0f64, 0usize);
    let mut order: Vec<usize> = (0..n_train).collect();
    let steps_per_epoch = n_train.div_ceil(cfg.batch);
    'outer: for epoch in 0..cfg.epochs {
        order.shuffle(&mut seeded(derive(cfg.seed, 1_000_000 + epoch as u64)));
        for b in 0..steps_per_epoch {
            if cfg.max_steps.is_some_and(|m| step >= m) || !monitor.keep_going(step) {
                break 'outer;
            }
            let mut acc: Option<Vec<Tensor>> = None;
            let members = &order[b * cfg.batch..((b + 1) * cfg.batch).min(n_train)];
            for (j, &i) in members.iter().enumerate() {
                let mut rng = seeded(derive(derive(cfg.seed, step as u64), (j * n_train + i) as u64));
                let (loss, grads) = match sample(&params, i, &mut rng) {
                    Ok(x) => x,
                    Err(e) => return Err(fail(e, &best.0)),
                };
                if !loss.is_finite() {
                    let error = Error::Training { epoch, reason: alloc::format!("loss {} at step {}", loss, step) };
                    return Err(fail(error, &best.0));
                }
                running.0 += loss as f64;
                running.1 += 1;
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (x, y) in a.iter_mut().zip(&grads) {
                            x.data_mut().iter_mut().zip(y.data()).for_each(|(p, q)| *p += q);
                        }
                    }
                }
            }
            let mut grads = acc.expect("batch is not empty");
            let inv = 1.0 / members.len() as f32;
            for gt in &mut grads {
                gt.data_mut().iter_mut().for_each(|x| *x *= inv);
            }
            if let Err(e) = adam.step(&mut params, &grads) {
                return Err(fail(e, &best.0));
            }
            step += 1;
            let last = b + 1 == steps_per_epoch && epoch + 1 == cfg.epochs;
            if step % cfg.eval_every == 0 || last {
                let val = match validate(&params) {
                    Ok(v) => v,
                    Err(e) => return Err(fail(e, &best.0)),
                };
                if !val.is_finite() {
                    let error = Error::Training { epoch, reason: alloc::format!("validation loss {} at step {}", val, step) };
                    return Err(fail(error, &best.0));
                }
                let rec = EvalRecord { step, epoch, train_loss: mean_loss(running), val_loss: val };
                running = (0.0, 0);
                monitor.record(&rec);
                history.push(rec);
                if val < best.1 {
                    best = (params.clone(), val, step);
                }
            }
        }
    }
    if history.last().map(|r| r.step) != Some(step) {
        match validate(&params) {
            Ok(val) if val.is_finite() => {
                let rec = EvalRecord { step, epoch: cfg.epochs, train_loss: mean_loss(running), val_loss: val };
                monitor.record(&rec);
                history.push(rec);
                if val < best.1 {
                    best = (params.clone(), val, step);
                }
            }
            Ok(_) => {}
            Err(e) => return Err(fail(e, &best.0)),
        }
    }
    Ok(TrainReport { params: best.0, best_val: best.1, best_step: best.2, steps: step, history })
}

fn mean_loss(running: (f64, usize)) -> Option<f32> {
    (running.1 > 0).then(|| (running.0 / running.1 as f64) as f32)
}

fn crop_origin(rng: &mut Prng, h: usize, w: usize, side: usize) -> (usize, usize, usize, usize) {
    let (ch, cw) = (side.min(h), side.min(w));
    (index(rng, h - ch + 1), index(rng, w - cw + 1), ch, cw)
}

/// Query coordinates `[P, 2]` inside an `h x w` crop and their bilinear
/// targets `[P, 3]`. With no sub-pixel fraction and enough queries the full
/// grid is used.
fn queries(rng: &mut Prng, target: &Tensor, count: usize, subpixel: f32) -> Result<(Tensor, Tensor)> {
    let (h, w, _) = target.dims3()?;
    let mut coords = Vec::with_capacity(count * 2);
    let mut colors = Vec::with_capacity(count * 3);
    if subpixel == 0.0 && count >= h * w {
        for r in 0..h {
            for c in 0..w {
                coords.extend_from_slice(&[r as f32, c as f32]);
            }
        }
        return Ok((Tensor::new([h * w, 2], coords)?, target.clone().reshape([h * w, 3])?));
    }
    let mut px = [0.0f32; 3];
    for _ in 0..count {
        let (r, c) = if uniform(rng, 0.0, 1.0) < subpixel {
            (uniform(rng, 0.0, (h - 1) as f32), uniform(rng, 0.0, (w - 1) as f32))
        } else {
            (index(rng, h) as f32, index(rng, w) as f32)
        };
        sample_bilinear(target, r, c, &mut px);
        coords.extend_from_slice(&[r, c]);
        colors.extend_from_slice(&px);
    }
    Ok((Tensor::new([count, 2], coords)?, Tensor::new([count, 3], colors)?))
}

fn collect_grads<P: Params>(params: &P, g: &crate::numerics::Gradients, vars: &[Var]) -> Vec<Tensor> {
    let tensors = params.tensors();
    tensors
        .iter()
        .enumerate()
        .map(|(k, t)| match vars.get(k) {
            Some(&v) => g.get_or_zeros(v, t.shape()),
            None => Tensor::zeros(t.shape().to_vec()),
        })
        .collect()
}

fn check_pairs(pairs: &[TrainingPair], frames: usize) -> Result<()> {
    for (i, p) in pairs.iter().enumerate() {
        if p.frames.len() != frames {
            return Err(Error::Config(alloc::format!("pair {} has {} frames, model expects {}", i, p.frames.len(), frames)));
        }
    }
    Ok(())
}

/// Newest-frame L1 of the grid render against the clean target, averaged
/// over pairs.
pub fn stir_val_l1(params: &StirParams, pairs: &[TrainingPair]) -> Result<f32> {
    if pairs.is_empty() {
        return Err(Error::Config("empty validation set".to_string()));
    }
    let mut total = 0.0f64;
    for p in pairs {
        let vol = encode_pair(params, &p.frames)?;
        total += reconstruct_frame(&vol, params, None)?.mean_abs_diff(&p.target)? as f64;
    }
    Ok((total / pairs.len() as f64) as f32)
}

fn encode_pair(params: &StirParams, frames: &[Tensor]) -> Result<FeatureVolume> {
    let slices = frames.iter().map(|f| params.encoder.forward(f)).collect::<Result<Vec<_>>>()?;
    FeatureVolume::from_slices(&slices, frames, frames.len() - 1)
}

/// Trains the implicit representation to reconstruct the clean newest frame
/// from the perturbed window by L1 on random crops and query points.
pub fn train_stir(
    train: &[TrainingPair],
    val: &[TrainingPair],
    init: StirParams,
    cfg: &TrainConfig,
    monitor: &mut dyn Monitor,
) -> TrainResult<StirParams> {
    let frames = init.frames();
    if let Err(e) = check_pairs(train, frames).and_then(|_| check_pairs(val, frames)) {
        return Err(TrainFailure { error: e, last_good: init });
    }
    let mut sample = |params: &StirParams, i: usize, rng: &mut Prng| stir_sample(params, &train[i], cfg, rng);
    let mut validate = |params: &StirParams| stir_val_l1(params, val);
    run_loop(init, train.len(), cfg, monitor, &mut sample, &mut validate)
}

/// Loss and gradients of one random crop of a pair.
pub fn stir_sample(params: &StirParams, pair: &TrainingPair, cfg: &TrainConfig, rng: &mut Prng) -> Result<(f32, Vec<Tensor>)> {
    let (h, w, _) = pair.target.dims3()?;
    let (r0, c0, ch, cw) = crop_origin(rng, h, w, cfg.crop);
    let target = sub_image(&pair.target, r0, c0, ch, cw)?;
    let (coords, colors) = queries(rng, &target, cfg.queries, cfg.subpixel)?;
    let p = coords.shape()[0];
    let mut g = Graph::new();
    let vars = params.bind(&mut g, true);
    let mut fs = Vec::with_capacity(pair.frames.len());
    for f in &pair.frames {
        let t = sub_image(f, r0, c0, ch, cw)?;
        fs.push(g.constant(t));
    }
    let vol = vars.encode(&mut g, &fs)?;
    let xy = g.constant(coords);
    let tau = g.constant(Tensor::full([p, 1], (pair.frames.len() - 1) as f32));
    let out = vars.render(&mut g, vol, xy, tau, ch, cw)?;
    let tgt = g.constant(colors);
    let loss = g.l1_loss(out, tgt)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item()?, collect_grads(params, &grads, &vars.vars())))
}

/// Text embedding of a pair's class, when the predictor uses text.
fn pair_text<'b>(lres: &LResampleParams, bank: &'b EmbeddingBank, pair: &TrainingPair) -> Result<Option<&'b [f32]>> {
    if !lres.spec.uses_text() {
        return Ok(None);
    }
    let label = pair.class.label();
    bank.get(label)
        .map(|e| Some(e.vector.as_slice()))
        .ok_or_else(|| Error::Config(alloc::format!("embedding bank has no entry '{}'", label)))
}

/// Newest-frame L1 of the defended render against the clean target.
pub fn lresample_val_l1(stir: &StirParams, lres: &LResampleParams, bank: &EmbeddingBank, pairs: &[TrainingPair]) -> Result<f32> {
    if pairs.is_empty() {
        return Err(Error::Config("empty validation set".to_string()));
    }
    let mut total = 0.0f64;
    for p in pairs {
        let vol = encode_pair(stir, &p.frames)?;
        let z = pair_text(lres, bank, p)?.map(|v| crate::guidance::TextEmbedding { label: p.class.label().into(), vector: v.to_vec() });
        total += lrr_defend_volume(&vol, z.as_ref(), stir, lres)?.mean_abs_diff(&p.target)? as f64;
    }
    Ok((total / pairs.len() as f64) as f32)
}

/// Trains the offset predictor against a frozen implicit representation;
/// the text embedding of each pair is its class entry in `bank`.
pub fn train_lresample(
    train: &[TrainingPair],
    val: &[TrainingPair],
    stir: &StirParams,
    bank: &EmbeddingBank,
    init: LResampleParams,
    cfg: &TrainConfig,
    monitor: &mut dyn Monitor,
) -> TrainResult<LResampleParams> {
    let frames = stir.frames();
    let checks = check_pairs(train, frames)
        .and_then(|_| check_pairs(val, frames))
        .and_then(|_| {
            if init.spec.features != stir.encoder.channels() {
                Err(Error::Shape(alloc::format!("offset predictor expects {} channels", init.spec.features)))
            } else {
                Ok(())
            }
        });
    if let Err(e) = checks {
        return Err(TrainFailure { error: e, last_good: init });
    }
    let mut sample = |lres: &LResampleParams, i: usize, rng: &mut Prng| lresample_sample(stir, lres, bank, &train[i], cfg, rng);
    let mut validate = |lres: &LResampleParams| lresample_val_l1(stir, lres, bank, val);
    run_loop(init, train.len(), cfg, monitor, &mut sample, &mut validate)
}

/// Loss and offset-predictor gradients of one random crop of a pair.
pub fn lresample_sample(
    stir: &StirParams,
    lres: &LResampleParams,
    bank: &EmbeddingBank,
    pair: &TrainingPair,
    cfg: &TrainConfig,
    rng: &mut Prng,
) -> Result<(f32, Vec<Tensor>)> {
    let (h, w, _) = pair.target.dims3()?;
    let (r0, c0, ch, cw) = crop_origin(rng, h, w, cfg.crop);
    let target = sub_image(&pair.target, r0, c0, ch, cw)?;
    let crops = pair.frames.iter().map(|f| sub_image(f, r0, c0, ch, cw)).collect::<Result<Vec<_>>>()?;
    let vol = encode_pair(stir, &crops)?;
    let z = pair_text(lres, bank, pair)?;
    let mut g = Graph::new();
    let svars = stir.bind(&mut g, false);
    let lvars = lres.bind(&mut g, true);
    let packed = VolumeVars::constant(&mut g, &vol);
    let feat = g.constant(vol.slice(vol.frames() - 1)?.reshape([ch * cw, vol.channels()])?);
    let offsets = offsets_graph(&mut g, lres, &lvars, feat, ch, cw, z)?;
    let out = resample_graph(&mut g, &svars, packed, offsets, ch, cw, vol.frames())?;
    let tgt = g.constant(target.reshape([ch * cw, 3])?);
    let loss = g.l1_loss(out, tgt)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item()?, collect_grads(lres, &grads, &lvars.vars())))
}

/// A tracker training sample: template from one frame, search window around
/// another frame's target shifted by up to `shift` pixels.
fn tracker_example(params: &TrackerParams, video: &Video, shift: f32, rng: &mut Prng) -> Result<(Tensor, Tensor, usize)> {
    let n = video.frames.len();
    let a = index(rng, n);
    let b = index(rng, n);
    let state = init_track(params, &video.frames[a], video.gt[a])?;
    let gt = video.gt[b];
    let center = BBox { cx: gt.cx + uniform(rng, -shift, shift), cy: gt.cy + uniform(rng, -shift, shift), ..gt };
    let win: Window = params.search_window(&center);
    let patch = crop(&video.frames[b], &win)?;
    let (row, col) = win.to_patch(gt.cy, gt.cx);
    Ok((state.template, patch, patch_to_response(&params.spec, row, col)))
}

fn tracker_loss_grads(params: &TrackerParams, template: &Tensor, patch: &Tensor, target: usize, grads: bool) -> Result<(f32, Vec<Tensor>)> {
    let mut g = Graph::new();
    let vars = params.backbone.bind(&mut g, grads);
    let t = g.constant(template.clone());
    let s = g.constant(patch.clone());
    let tf = features_graph(&mut g, &vars, t)?;
    let sf = features_graph(&mut g, &vars, s)?;
    let r = g.correlate(sf, tf)?;
    let loss = tracker_loss(&mut g, r, params.spec.kappa, target)?;
    let value = g.value(loss).item()?;
    if !grads {
        return Ok((value, Vec::new()));
    }
    let gr = g.backward(loss)?;
    Ok((value, collect_grads(params, &gr, &vars.vars())))
}

/// Trains the Siamese backbone with response cross-entropy; both branches
/// share weights and receive gradients.
pub fn train_tracker(
    train: &[Video],
    val: &[Video],
    init: TrackerParams,
    cfg: &TrainConfig,
    monitor: &mut dyn Monitor,
) -> TrainResult<TrackerParams> {
    if val.is_empty() || train.iter().chain(val).any(|v| v.frames.is_empty()) {
        return Err(TrainFailure { error: Error::Config("tracker training needs non-empty videos".into()), last_good: init });
    }
    let mut sample = |params: &TrackerParams, i: usize, rng: &mut Prng| -> Result<(f32, Vec<Tensor>)> {
        let (t, p, target) = tracker_example(params, &train[i], cfg.shift, rng)?;
        tracker_loss_grads(params, &t, &p, target, true)
    };
    let mut validate = |params: &TrackerParams| -> Result<f32> {
        let mut rng = seeded(derive(cfg.seed, 11));
        let mut total = 0.0f64;
        let reps = 4;
        for v in val {
            for _ in 0..reps {
                let (t, p, target) = tracker_example(params, v, cfg.shift, &mut rng)?;
                total += tracker_loss_grads(params, &t, &p, target, false)?.0 as f64;
            }
        }
        Ok((total / (val.len() * reps) as f64) as f32)
    };
    run_loop(init, train.len(), cfg, monitor, &mut sample, &mut validate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_sequence, CorpusConfig, SynthConfig};
    use crate::guidance::fixture_bank;
    use crate::nets::{Dense, EncoderSpec, Mlp};
    use crate::resampler::LResampleSpec;
    use crate::stir::StirSpec;
    use crate::tracker::TrackerSpec;

    struct Quad(Tensor);

    impl Params for Quad {
        fn tensors(&self) -> Vec<&Tensor> {
            vec![&self.0]
        }
        fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut p = Quad(Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap());
        let mut adam = Adam::new(&p, 0.1, 0.9, 0.999, 1e-8);
        adam.step(&mut p, &[Tensor::new([3], vec![4.0, -0.01, 0.0]).unwrap()]).unwrap();
        // bias-corrected m / sqrt(v) = sign(g) on the first step
        let want = [0.9, -1.9, 0.5];
        for (a, b) in p.0.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-5, "{} vs {}", a, b);
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = Quad(Tensor::new([2], vec![3.0, -4.0]).unwrap());
        let mut adam = Adam::new(&p, 0.05, 0.9, 0.999, 1e-8);
        for _ in 0..2000 {
            let g = p.0.map(|x| 2.0 * x);
            adam.step(&mut p, &[g]).unwrap();
        }
        assert!(p.0.data().iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn config_rejects_bad_lr() {
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    fn tiny_stir(frames: usize) -> StirParams {
        StirParams::init(StirSpec { frames, encoder: EncoderSpec { channels: 8, blocks: 1 }, hidden: 24, layers: 5 }, 1).unwrap()
    }

    fn tiny_pairs(n: usize, frames: usize) -> Vec<TrainingPair> {
        let tracker = TrackerParams::init(TrackerSpec { search: 16, template: 8, ..Default::default() }, 0).unwrap();
        let cfg = CorpusConfig {
            frames,
            synth: SynthConfig { height: 40, width: 40, obj_min: 8.0, obj_max: 10.0, length: 6, ..Default::default() },
            ..Default::default()
        };
        crate::datagen::build_corpus(&cfg, &tracker, 0..n).unwrap()
    }

    #[test]
    fn overfits_one_pair() {
        let pairs = tiny_pairs(1, 2);
        let cfg = TrainConfig { lr: 3e-3, batch: 1, epochs: 600, crop: 16, queries: 256, subpixel: 0.0, eval_every: 100, ..Default::default() };
        let r = train_stir(&pairs, &pairs, tiny_stir(2), &cfg, &mut NoMonitor).unwrap();
        assert!(r.best_val < 0.02, "train L1 {}", r.best_val);
        // best-so-far tracking is monotone
        let mut best = f32::INFINITY;
        for rec in &r.history {
            best = best.min(rec.val_loss);
        }
        assert_eq!(best, r.best_val);
    }

    #[test]
    fn seeded_runs_repeat() {
        let pairs = tiny_pairs(3, 2);
        let cfg = TrainConfig { batch: 2, epochs: 2, crop: 8, queries: 32, eval_every: 1, ..Default::default() };
        let a = train_stir(&pairs, &pairs[..1], tiny_stir(2), &cfg, &mut NoMonitor).unwrap();
        let b = train_stir(&pairs, &pairs[..1], tiny_stir(2), &cfg, &mut NoMonitor).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn divergence_returns_last_good() {
        let pairs = tiny_pairs(2, 2);
        let mut stir = tiny_stir(2);
        let bad = Dense { weight: Tensor::full([24, 6], f32::NAN), bias: Tensor::zeros([6]) };
        let mut layers = stir.spatial.layers.clone();
        *layers.last_mut().unwrap() = bad;
        stir.spatial = Mlp::from_layers(layers).unwrap();
        let cfg = TrainConfig { batch: 1, epochs: 1, crop: 8, queries: 16, ..Default::default() };
        let err = train_stir(&pairs, &pairs, stir.clone(), &cfg, &mut NoMonitor).unwrap_err();
        assert!(matches!(err.error, Error::Training { .. }) || matches!(err.error, Error::Numeric(_)), "{:?}", err.error);
        assert_eq!(err.last_good.encoder, stir.encoder);
    }

    #[test]
    fn lresample_keeps_stir_frozen_and_never_worse() {
        let pairs = tiny_pairs(4, 2);
        let stir = tiny_stir(2);
        let frozen = stir.clone();
        let bank = fixture_bank(&crate::datagen::TextureClass::labels(), 4).unwrap();
        let init = LResampleParams::init(LResampleSpec { hidden: 8, ..LResampleSpec::new(8, 4) }, 3).unwrap();
        let cfg = TrainConfig { batch: 2, epochs: 2, crop: 12, eval_every: 1, ..Default::default() };
        let r = train_lresample(&pairs, &pairs[..2], &stir, &bank, init, &cfg, &mut NoMonitor).unwrap();
        assert_eq!(stir, frozen);
        let grid = stir_val_l1(&stir, &pairs[..2]).unwrap();
        assert!(r.best_val <= grid + 1e-3);
        assert_eq!(r.history[0].val_loss, grid);
    }

    #[test]
    fn tracker_training_lowers_loss() {
        let synth = SynthConfig { length: 6, ..Default::default() };
        let videos: Vec<Video> = (0..3).map(|s| gen_sequence(&SynthConfig { seed: s, ..synth.clone() }).unwrap()).collect();
        let init = TrackerParams::init(TrackerSpec::default(), 5).unwrap();
        let cfg = TrainConfig { lr: 3e-3, batch: 4, epochs: 30, eval_every: 10, ..Default::default() };
        let r = train_tracker(&videos, &videos[..1], init, &cfg, &mut NoMonitor).unwrap();
        assert!(r.best_val < r.history[0].val_loss * 0.8, "{:?}", r.history);
    }
}
