//! Self-checks shared by the test suites and the command line: batched
//! versus scalar rendering, weight laws, and finite-difference gradients of
//! every trainable module.

use alloc::string::String;
use alloc::vec::Vec;

use crate::nets::{ConvStack, EncoderSpec, Params};
use crate::numerics::{probe_gradient, Graph, Tensor, Var};
use crate::resampler::{offsets_graph, resample_graph, LResampleParams, LResampleSpec};
use crate::rng::{index, seeded, uniform, Prng};
use crate::stir::{
    encode_sequence, reconstruct_frame, reconstruct_frame_loop, render_points, spatial_weights, stir_eval,
    temporal_weights, ContinuousCoord, SequenceBuffer, StirParams, StirSpec, TemporalMode, VolumeVars,
};
use crate::tracker::{response_graph, tracker_loss, TrackerParams, TrackerSpec};
use crate::Result;

fn random_frames(rng: &mut Prng, n: usize, h: usize, w: usize) -> Result<Vec<Tensor>> {
    (0..n).map(|_| Tensor::new([h, w, 3], (0..h * w * 3).map(|_| uniform(rng, 0.0, 1.0)).collect())).collect()
}

fn small_stir(frames: usize, seed: u64) -> Result<StirParams> {
    let spec = StirSpec { encoder: EncoderSpec { channels: 6, blocks: 1 }, hidden: 12, ..StirSpec::new(frames) };
    StirParams::random(spec, seed)
}

/// Random biases. With zero biases a unit whose inputs are all dead sits
/// exactly on its ReLU kink, where one-sided and central differences
/// disagree.
fn jitter_biases<P: Params>(p: &mut P, seed: u64) {
    let mut rng = seeded(seed);
    for t in p.tensors_mut() {
        if t.shape().len() == 1 {
            for v in t.data_mut() {
                *v = uniform(&mut rng, -0.1, 0.1);
            }
        }
    }
}

/// Largest absolute difference between the batched and per-pixel renders of
/// an `side x side` frame, `frames` frames deep, with random parameters.
/// Covers the integer grid, random sub-pixel queries and random offsets.
pub fn oracle_check(side: usize, frames: usize, seed: u64) -> Result<f32> {
    let mut rng = seeded(seed);
    let params = small_stir(frames, seed)?;
    let seq = SequenceBuffer::new(random_frames(&mut rng, frames, side, side)?, 10)?;
    let vol = encode_sequence(&params, &seq)?;
    let mut worst = 0.0f32;
    let mut diff = |a: &[f32], b: &[f32]| {
        for (x, y) in a.iter().zip(b) {
            worst = worst.max((x - y).abs());
        }
    };

    let a = reconstruct_frame(&vol, &params, None)?;
    let b = reconstruct_frame_loop(&vol, &params, None)?;
    diff(a.data(), b.data());

    let off: Vec<f32> = (0..side * side * 3).map(|_| uniform(&mut rng, -1.5, 1.5)).collect();
    let off = Tensor::new([side, side, 3], off)?;
    let a = reconstruct_frame(&vol, &params, Some(&off))?;
    let b = reconstruct_frame_loop(&vol, &params, Some(&off))?;
    diff(a.data(), b.data());

    let last = (side - 1) as f32;
    let n = 64;
    let mut pts = Vec::with_capacity(3 * n);
    for _ in 0..n {
        pts.extend_from_slice(&[uniform(&mut rng, 0.0, last), uniform(&mut rng, 0.0, last), uniform(&mut rng, 0.0, (frames - 1) as f32)]);
    }
    let coords = Tensor::new([n, 3], pts)?;
    let base = (vol.t() + 1 - frames) as f32;
    for mode in [TemporalMode::Sparse, TemporalMode::Dense] {
        let batched = render_points(&vol, &params, &coords, mode)?;
        for (i, q) in coords.data().chunks_exact(3).enumerate() {
            let c = stir_eval(ContinuousCoord::new(q[0], q[1], q[2] + base), &vol, &params)?;
            diff(&c, &batched.data()[3 * i..3 * i + 3]);
        }
    }
    Ok(worst)
}

/// Worst deviations found by [`weight_laws`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WeightLawReport {
    pub spatial_sum_error: f32,
    pub temporal_sum_error: f32,
    pub min_weight: f32,
    /// Queries at grid sites and integer times whose weights were not one-hot.
    pub one_hot_failures: usize,
}

/// Weight sums and signs over `queries` random queries on an `h x w` grid
/// with `frames` frames, plus one-hot checks at every grid site and integer
/// time.
pub fn weight_laws(queries: usize, h: usize, w: usize, frames: usize, seed: u64) -> Result<WeightLawReport> {
    let mut rng = seeded(seed);
    let mut r = WeightLawReport { min_weight: f32::INFINITY, ..Default::default() };
    let (hx, wy, ft) = ((h - 1) as f32, (w - 1) as f32, (frames - 1) as f32);
    for q in 0..queries {
        // Every eighth query lands on a cell edge in one coordinate.
        let mut x = uniform(&mut rng, 0.0, hx);
        let y = uniform(&mut rng, 0.0, wy);
        if q % 8 == 0 {
            x = index(&mut rng, h) as f32;
        }
        let tau = uniform(&mut rng, 0.0, ft);
        let sp = spatial_weights(x, y, h, w, 2)?;
        let s: f64 = sp.weights.iter().map(|&v| v as f64).sum();
        r.spatial_sum_error = r.spatial_sum_error.max((s - 1.0).abs() as f32);
        for mode in [TemporalMode::Sparse, TemporalMode::Dense] {
            let tp = temporal_weights(tau, frames, mode)?;
            let s: f64 = tp.weights.iter().map(|&v| v as f64).sum();
            r.temporal_sum_error = r.temporal_sum_error.max((s - 1.0).abs() as f32);
            r.min_weight = r.min_weight.min(tp.weights.iter().copied().fold(f32::INFINITY, f32::min));
        }
        r.min_weight = r.min_weight.min(sp.weights.iter().copied().fold(f32::INFINITY, f32::min));
    }
    for x in 0..h {
        for y in 0..w {
            let sp = spatial_weights(x as f32, y as f32, h, w, 2)?;
            let hit: f32 = sp.sites.iter().zip(&sp.weights).filter(|(s, _)| **s == (x, y)).map(|(_, w)| *w).sum();
            let rest: f32 = sp.sites.iter().zip(&sp.weights).filter(|(s, _)| **s != (x, y)).map(|(_, w)| *w).sum();
            if hit != 1.0 || rest != 0.0 {
                r.one_hot_failures += 1;
            }
        }
    }
    for f in 0..frames {
        for mode in [TemporalMode::Sparse, TemporalMode::Dense] {
            let tp = temporal_weights(f as f32, frames, mode)?;
            let ok = tp.frames.iter().zip(&tp.weights).all(|(&g, &w)| if g == f { w == 1.0 } else { w == 0.0 })
                && tp.frames.contains(&f);
            if !ok {
                r.one_hot_failures += 1;
            }
        }
    }
    Ok(r)
}

/// Worst relative error of one finite-difference check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub worst: f64,
}

const STEP: f32 = 1e-2;
const PROBES: usize = 24;

fn probes(rng: &mut Prng, n: usize) -> Vec<usize> {
    (0..PROBES.min(n)).map(|_| index(rng, n)).collect()
}

/// Per coordinate, the best [`Probe::error`] over a ladder of steps. Wide
/// stencils are exact for smooth functions but can straddle kinks; narrow
/// ones drown in `f32` rounding of the forward pass. A wrong gradient fails
/// at every step.
fn check<F>(f: F, x: &Tensor, h: f32, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut worst = 0.0f64;
    for &c in coords {
        let mut best = f64::INFINITY;
        for step in [h, h / 3.0, h / 10.0, h / 30.0] {
            best = best.min(probe_gradient(&f, x, step, &[c])?[0].error());
            if best <= 1e-4 {
                break;
            }
        }
        worst = worst.max(best);
    }
    Ok(worst)
}

/// A fixed random linear read-out, so every output entry gets a distinct
/// nonzero gradient.
fn readout(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let n: usize = shape.iter().product();
    let mut rng = seeded(seed);
    let r = g.constant(Tensor::new(shape, (0..n).map(|_| uniform(&mut rng, -1.0, 1.0)).collect())?);
    let m = g.mul(out, r)?;
    g.mean(m)
}

/// Finite-difference checks of the encoder, both trained MLPs of the
/// implicit representation, the offset predictor and the tracker loss with
/// respect to input pixels. Each check probes a random subset of entries.
pub fn gradient_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = seeded(seed);
    let (side, frames) = (6, 3);
    let mut stir = small_stir(frames, seed)?;
    jitter_biases(&mut stir, seed ^ 1);
    let clip = random_frames(&mut rng, frames, side, side)?;
    let mut pts = Vec::new();
    for _ in 0..10 {
        pts.extend_from_slice(&[uniform(&mut rng, 0.2, 4.8), uniform(&mut rng, 0.2, 4.8)]);
    }
    let coords = Tensor::new([10, 2], pts)?;
    let taus = Tensor::new([10, 1], (0..10).map(|_| uniform(&mut rng, 0.1, 1.9)).collect())?;

    // Renders the clip with `edit` applied to the bound variables.
    let render = |g: &mut Graph, edit: &dyn Fn(&mut crate::stir::StirVars)| -> Result<Var> {
        let mut vars = stir.bind(g, false);
        edit(&mut vars);
        let fs: Vec<Var> = clip.iter().map(|f| g.constant(f.clone())).collect();
        let vol = vars.encode(g, &fs)?;
        let xy = g.constant(coords.clone());
        let tau = g.constant(taus.clone());
        let out = vars.render(g, vol, xy, tau, side, side)?;
        readout(g, out, 1)
    };

    let mut out = Vec::new();
    let enc_w = &stir.encoder.head.weight;
    let worst = check(
        |g, v| render(g, &|vars| vars.encoder.head.weight = v),
        enc_w,
        STEP,
        &probes(&mut rng, enc_w.len()),
    )?;
    out.push(GradCheck { name: "encoder".into(), worst });
    let sp_w = &stir.spatial.layers[0].weight;
    let worst = check(|g, v| render(g, &|vars| vars.spatial.layers[0].weight = v), sp_w, STEP, &probes(&mut rng, sp_w.len()))?;
    out.push(GradCheck { name: "spatial mlp".into(), worst });
    let tp_w = &stir.temporal.layers[0].weight;
    let worst = check(|g, v| render(g, &|vars| vars.temporal.layers[0].weight = v), tp_w, STEP, &probes(&mut rng, tp_w.len()))?;
    out.push(GradCheck { name: "temporal mlp".into(), worst });

    // Offset predictor with a random last layer, so offsets are not zero
    // and queries sit inside cells.
    let c = stir.encoder.channels();
    let ztxt: Vec<f32> = (0..4).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
    let mut lres = LResampleParams::init(LResampleSpec { hidden: 8, ..LResampleSpec::new(c, ztxt.len()) }, seed)?;
    let widths = lres.stack.widths();
    lres.stack = ConvStack::init(&widths, seed ^ 0x5a)?;
    jitter_biases(&mut lres, seed ^ 2);
    let vol = encode_sequence(&stir, &SequenceBuffer::new(clip.clone(), 2)?)?;
    let feat = vol.slice(frames - 1)?.reshape([side * side, c])?;
    let lw = &lres.stack.layers[0].weight;
    let worst = check(
        |g, v| {
            let svars = stir.bind(g, false);
            let mut lvars = lres.bind(g, false);
            lvars.layers[0].weight = v;
            let f = g.constant(feat.clone());
            let offs = offsets_graph(g, &lres, &lvars, f, side, side, Some(&ztxt))?;
            let vv = VolumeVars::constant(g, &vol);
            let img = resample_graph(g, &svars, vv, offs, side, side, frames)?;
            readout(g, img, 2)
        },
        lw,
        STEP,
        &probes(&mut rng, lw.len()),
    )?;
    out.push(GradCheck { name: "offset predictor".into(), worst });

    let spec = TrackerSpec { features: 4, template: 8, search: 16, ..TrackerSpec::default() };
    let mut tracker = TrackerParams::init(spec, seed)?;
    jitter_biases(&mut tracker, seed ^ 3);
    let tpl = random_frames(&mut rng, 1, spec.template, spec.template)?.remove(0);
    let tf = tracker.features(&tpl)?;
    let patch = random_frames(&mut rng, 1, spec.search, spec.search)?.remove(0);
    let target = index(&mut rng, spec.response_side() * spec.response_side());
    let worst = check(
        |g, x| {
            let vars = tracker.backbone.bind(g, false);
            let r = response_graph(g, &vars, x, &tf)?;
            tracker_loss(g, r, spec.kappa, target)
        },
        &patch,
        STEP,
        &probes(&mut rng, patch.len()),
    )?;
    out.push(GradCheck { name: "tracker loss (pixels)".into(), worst });
    Ok(out)
}
