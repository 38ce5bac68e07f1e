//! Synthetic videos of a textured box moving over a smooth background, and
//! the adversarial training pairs built from them.

use alloc::vec;
use alloc::vec::Vec;

use crate::attacks::{fgsm, AttackContext};
use crate::image::{crop, translate, Window};
use crate::numerics::Tensor;
use crate::rng::{derive, index, normal, seeded, uniform, Prng};
use crate::tracker::{init_track, BBox, TrackerParams};
use crate::{Error, Result};

/// Procedural object appearance classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TextureClass {
    Checker,
    Stripes,
    Blob,
    Ring,
    Cross,
    Dots,
    Diagonal,
    Gradient,
}

impl TextureClass {
    pub const ALL: [TextureClass; 8] = [
        TextureClass::Checker,
        TextureClass::Stripes,
        TextureClass::Blob,
        TextureClass::Ring,
        TextureClass::Cross,
        TextureClass::Dots,
        TextureClass::Diagonal,
        TextureClass::Gradient,
    ];

    pub fn label(self) -> &'static str {
        match self {
            TextureClass::Checker => "checker",
            TextureClass::Stripes => "stripes",
            TextureClass::Blob => "blob",
            TextureClass::Ring => "ring",
            TextureClass::Cross => "cross",
            TextureClass::Dots => "dots",
            TextureClass::Diagonal => "diagonal",
            TextureClass::Gradient => "gradient",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.label() == label)
    }

    pub fn labels() -> Vec<&'static str> {
        Self::ALL.iter().map(|c| c.label()).collect()
    }

    /// Pattern intensity in `[0, 1]` at object-relative pixel offset `(u, v)`
    /// (rows, cols from the center) for a box of half-size `(hu, hv)`.
    fn pattern(self, u: f32, v: f32, hu: f32, hv: f32, period: f32) -> f32 {
        let tau = core::f32::consts::TAU;
        let r = libm::hypotf(u / hu, v / hv);
        match self {
            TextureClass::Checker => {
                let a = libm::floorf(u / period) as i64 + libm::floorf(v / period) as i64;
                (a.rem_euclid(2)) as f32
            }
            TextureClass::Stripes => 0.5 + 0.5 * libm::sinf(tau * v / period),
            TextureClass::Blob => libm::expf(-r * r / 0.18),
            TextureClass::Ring => libm::expf(-(r - 0.6) * (r - 0.6) / 0.02),
            TextureClass::Cross => {
                let bar = |d: f32| libm::expf(-d * d / 0.03);
                bar(u / hu).max(bar(v / hv))
            }
            TextureClass::Dots => {
                let fu = u / period - libm::roundf(u / period);
                let fv = v / period - libm::roundf(v / period);
                libm::expf(-(fu * fu + fv * fv) / 0.03)
            }
            TextureClass::Diagonal => 0.5 + 0.5 * libm::sinf(tau * (u + v) / (1.4 * period)),
            TextureClass::Gradient => ((u / hu + v / hv) * 0.5 + 0.5).clamp(0.0, 1.0),
        }
    }
}

/// Video generator settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub obj_min: f32,
    pub obj_max: f32,
    /// Largest speed in pixels per frame.
    pub speed: f32,
    /// Standard deviation of the per-frame position jitter.
    pub jitter: f32,
    pub classes: Vec<TextureClass>,
    pub length: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 96,
            width: 96,
            obj_min: 20.0,
            obj_max: 28.0,
            speed: 1.5,
            jitter: 0.5,
            classes: TextureClass::ALL.to_vec(),
            length: 30,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: &str| Err(Error::Config(alloc::format!("{}: {:?}", m, self)));
        if self.height == 0 || self.width == 0 || self.length == 0 || self.classes.is_empty() {
            return cfg_err("empty frame, length or class list");
        }
        if !(self.obj_min > 0.0 && self.obj_min <= self.obj_max) {
            return cfg_err("object size range");
        }
        if self.obj_max + 2.0 > self.height.min(self.width) as f32 {
            return cfg_err("object larger than frame");
        }
        if !(self.speed >= 0.0 && self.jitter >= 0.0) {
            return cfg_err("negative motion parameters");
        }
        Ok(())
    }
}

/// Frames and per-frame ground truth of one synthetic video.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub frames: Vec<Tensor>,
    pub gt: Vec<BBox>,
    pub class: TextureClass,
}

fn color(rng: &mut Prng) -> [f32; 3] {
    [uniform(rng, 0.1, 0.9), uniform(rng, 0.1, 0.9), uniform(rng, 0.1, 0.9)]
}

struct Background {
    base: [f32; 3],
    waves: Vec<([f32; 3], f32, f32, f32)>,
}

impl Background {
    fn new(rng: &mut Prng) -> Self {
        let base = [uniform(rng, 0.3, 0.7), uniform(rng, 0.3, 0.7), uniform(rng, 0.3, 0.7)];
        let waves = (0..3)
            .map(|_| {
                let amp = [uniform(rng, -0.12, 0.12), uniform(rng, -0.12, 0.12), uniform(rng, -0.12, 0.12)];
                let angle = uniform(rng, 0.0, core::f32::consts::TAU);
                let freq = core::f32::consts::TAU / uniform(rng, 24.0, 64.0);
                (amp, libm::cosf(angle) * freq, libm::sinf(angle) * freq, uniform(rng, 0.0, 6.3))
            })
            .collect();
        Self { base, waves }
    }

    fn at(&self, r: f32, c: f32) -> [f32; 3] {
        let mut px = self.base;
        for (amp, fr, fc, ph) in &self.waves {
            let s = libm::sinf(fr * r + fc * c + ph);
            for k in 0..3 {
                px[k] += amp[k] * s;
            }
        }
        px
    }
}

/// Renders a video: a textured box moving linearly with Gaussian jitter,
/// reflecting off the frame borders so the box stays inside.
pub fn gen_sequence(cfg: &SynthConfig) -> Result<Video> {
    cfg.validate()?;
    let mut rng = seeded(cfg.seed);
    let class = cfg.classes[index(&mut rng, cfg.classes.len())];
    let w = libm::roundf(uniform(&mut rng, cfg.obj_min, cfg.obj_max));
    let h = libm::roundf(uniform(&mut rng, cfg.obj_min, cfg.obj_max));
    let (c1, mut c2) = (color(&mut rng), color(&mut rng));
    // keep the two object colors apart so the texture is visible
    if (0..3).map(|k| (c1[k] - c2[k]).abs()).sum::<f32>() < 0.6 {
        c2 = [1.0 - c1[0], 1.0 - c1[1], 1.0 - c1[2]];
    }
    let period = uniform(&mut rng, 6.0, 10.0);
    let bg = Background::new(&mut rng);

    let (hh, ww) = (cfg.height as f32, cfg.width as f32);
    let (lo_x, hi_x) = (w / 2.0 + 1.0, ww - w / 2.0 - 2.0);
    let (lo_y, hi_y) = (h / 2.0 + 1.0, hh - h / 2.0 - 2.0);
    let mut pos = (uniform(&mut rng, lo_x, hi_x), uniform(&mut rng, lo_y, hi_y));
    let angle = uniform(&mut rng, 0.0, core::f32::consts::TAU);
    let speed = uniform(&mut rng, 0.0, cfg.speed);
    let mut vel = (libm::cosf(angle) * speed, libm::sinf(angle) * speed);

    let mut frames = Vec::with_capacity(cfg.length);
    let mut gt = Vec::with_capacity(cfg.length);
    for t in 0..cfg.length {
        if t > 0 {
            pos.0 += vel.0 + cfg.jitter * normal(&mut rng);
            pos.1 += vel.1 + cfg.jitter * normal(&mut rng);
            reflect(&mut pos.0, &mut vel.0, lo_x, hi_x);
            reflect(&mut pos.1, &mut vel.1, lo_y, hi_y);
        }
        let b = BBox::new(pos.0, pos.1, w, h);
        frames.push(render(cfg, &bg, class, &b, c1, c2, period)?);
        gt.push(b);
    }
    Ok(Video { frames, gt, class })
}

fn reflect(p: &mut f32, v: &mut f32, lo: f32, hi: f32) {
    if *p < lo {
        *p = 2.0 * lo - *p;
        *v = -*v;
    }
    if *p > hi {
        *p = 2.0 * hi - *p;
        *v = -*v;
    }
    *p = p.clamp(lo, hi);
}

fn render(
    cfg: &SynthConfig,
    bg: &Background,
    class: TextureClass,
    b: &BBox,
    c1: [f32; 3],
    c2: [f32; 3],
    period: f32,
) -> Result<Tensor> {
    let mut data = Vec::with_capacity(cfg.height * cfg.width * 3);
    let (hu, hv) = (b.h / 2.0, b.w / 2.0);
    for r in 0..cfg.height {
        for c in 0..cfg.width {
            let (u, v) = (r as f32 - b.cy, c as f32 - b.cx);
            let px = if u.abs() <= hu && v.abs() <= hv {
                let p = class.pattern(u, v, hu, hv, period);
                [c1[0] + (c2[0] - c1[0]) * p, c1[1] + (c2[1] - c1[1]) * p, c1[2] + (c2[2] - c1[2]) * p]
            } else {
                bg.at(r as f32, c as f32)
            };
            data.extend(px.iter().map(|x| x.clamp(0.0, 1.0)));
        }
    }
    Tensor::new([cfg.height, cfg.width, 3], data)
}

/// `n` copies of `image`, each shifted by a random integer offset of at most
/// `max_shift` pixels per axis (border replicated). The last copy is the
/// unshifted original. Returns the frames and the `(row, col)` offsets.
pub fn random_translate(image: &Tensor, seed: u64, n: usize, max_shift: i32) -> Result<(Vec<Tensor>, Vec<(i32, i32)>)> {
    if n == 0 {
        return Err(Error::Config("random_translate needs n >= 1".into()));
    }
    let mut rng = seeded(seed);
    let mut offsets = Vec::with_capacity(n);
    for k in 0..n {
        if k + 1 == n {
            offsets.push((0, 0));
        } else {
            let span = (2 * max_shift + 1) as usize;
            offsets.push((index(&mut rng, span) as i32 - max_shift, index(&mut rng, span) as i32 - max_shift));
        }
    }
    let frames = offsets.iter().map(|&(dr, dc)| translate(image, dr, dc)).collect::<Result<Vec<_>>>()?;
    Ok((frames, offsets))
}

/// One purification training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    /// Perturbed search patches, oldest first.
    pub frames: Vec<Tensor>,
    /// Clean version of the newest patch.
    pub target: Tensor,
    pub template: Tensor,
    pub class: TextureClass,
    /// Video frame indices of the window and of the template.
    pub window: Vec<usize>,
    pub template_frame: usize,
    /// Ground truth of the window frames in their own patch coordinates.
    pub gt: Vec<BBox>,
}

/// Settings of the training-pair corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub seed: u64,
    /// `N + 1`.
    pub frames: usize,
    pub eps: f32,
    /// Standard deviation of the search-window center jitter, in pixels.
    pub window_jitter: f32,
    /// Fraction of pairs built by translating one still patch.
    pub translate_fraction: f32,
    pub max_shift: i32,
    pub synth: SynthConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            frames: 5,
            eps: 8.0 / 255.0,
            window_jitter: 2.0,
            translate_fraction: 0.25,
            max_shift: 3,
            synth: SynthConfig { length: 10, ..SynthConfig::default() },
        }
    }
}

/// Builds a pair from a contiguous window of `frames` video frames. Each
/// frame's search patch is cropped around the previous frame's ground truth
/// (plus jitter) and perturbed by FGSM against `tracker`, whose template is
/// taken from a frame outside the window.
pub fn make_training_pair(
    video: &Video,
    tracker: &TrackerParams,
    frames: usize,
    eps: f32,
    window_jitter: f32,
    rng: &mut Prng,
) -> Result<TrainingPair> {
    let len = video.frames.len();
    if frames == 0 || len < frames + 1 {
        return Err(Error::Config(alloc::format!("video of {} frames cannot hold a window of {} plus a template", len, frames)));
    }
    let start = index(rng, len - frames + 1);
    let window: Vec<usize> = (start..start + frames).collect();
    let outside: Vec<usize> = (0..len).filter(|i| !window.contains(i)).collect();
    let template_frame = outside[index(rng, outside.len())];
    let state = init_track(tracker, &video.frames[template_frame], video.gt[template_frame])?;

    let mut perturbed = Vec::with_capacity(frames);
    let mut gt = Vec::with_capacity(frames);
    let mut target = None;
    for &k in &window {
        let prev = video.gt[k.saturating_sub(1)];
        let center = BBox {
            cx: prev.cx + window_jitter * normal(rng),
            cy: prev.cy + window_jitter * normal(rng),
            ..video.gt[k]
        };
        let win = tracker.search_window(&center);
        let clean = crop(&video.frames[k], &win)?;
        let (row, col) = win.to_patch(video.gt[k].cy, video.gt[k].cx);
        let (sy, sx) = win.scale();
        gt.push(BBox::new(col, row, video.gt[k].w / sx, video.gt[k].h / sy));
        let ctx = AttackContext { tracker, template_features: &state.template_features, target: (row, col) };
        perturbed.push(fgsm(&clean, &ctx, eps)?);
        target = Some(clean);
    }
    Ok(TrainingPair {
        frames: perturbed,
        target: target.expect("window is not empty"),
        template: state.template,
        class: video.class,
        window,
        template_frame,
        gt,
    })
}

/// Builds a pair from one still patch by random translation; the newest
/// frame is the unshifted patch.
pub fn make_translation_pair(
    video: &Video,
    tracker: &TrackerParams,
    cfg: &CorpusConfig,
    rng: &mut Prng,
) -> Result<TrainingPair> {
    let len = video.frames.len();
    if len < 2 {
        return Err(Error::Config("translation pairs need two video frames".into()));
    }
    let k = 1 + index(rng, len - 1);
    let template_frame = index(rng, k);
    let state = init_track(tracker, &video.frames[template_frame], video.gt[template_frame])?;
    let win: Window = tracker.search_window(&video.gt[k]);
    let still = crop(&video.frames[k], &win)?;
    let (frames, offsets) = random_translate(&still, rng_seed(rng), cfg.frames, cfg.max_shift)?;
    let (row, col) = win.to_patch(video.gt[k].cy, video.gt[k].cx);
    let (sy, sx) = win.scale();
    let mut perturbed = Vec::with_capacity(frames.len());
    let mut gt = Vec::with_capacity(frames.len());
    for (f, &(dr, dc)) in frames.iter().zip(&offsets) {
        let pos = (row + dr as f32, col + dc as f32);
        gt.push(BBox::new(pos.1, pos.0, video.gt[k].w / sx, video.gt[k].h / sy));
        let ctx = AttackContext { tracker, template_features: &state.template_features, target: pos };
        perturbed.push(fgsm(f, &ctx, cfg.eps)?);
    }
    Ok(TrainingPair {
        frames: perturbed,
        target: still,
        template: state.template,
        class: video.class,
        window: vec![k; cfg.frames],
        template_frame,
        gt,
    })
}

fn rng_seed(rng: &mut Prng) -> u64 {
    use rand::Rng;
    rng.random()
}

/// Pair `i` of the corpus, reproducible from `(cfg.seed, i)`.
pub fn corpus_pair(cfg: &CorpusConfig, tracker: &TrackerParams, i: usize) -> Result<TrainingPair> {
    let seed = derive(cfg.seed, i as u64);
    let video = gen_sequence(&SynthConfig { seed, ..cfg.synth.clone() })?;
    let mut rng = seeded(derive(seed, 1));
    if uniform(&mut rng, 0.0, 1.0) < cfg.translate_fraction {
        make_translation_pair(&video, tracker, cfg, &mut rng)
    } else {
        make_training_pair(&video, tracker, cfg.frames, cfg.eps, cfg.window_jitter, &mut rng)
    }
}

/// Pairs `range` of the corpus.
pub fn build_corpus(cfg: &CorpusConfig, tracker: &TrackerParams, range: core::ops::Range<usize>) -> Result<Vec<TrainingPair>> {
    range.map(|i| corpus_pair(cfg, tracker, i)).collect()
}

/// Mean absolute difference between the newest perturbed frame and its clean
/// target, averaged over pairs.
pub fn perturbation_l1(pairs: &[TrainingPair]) -> Result<f32> {
    let mut total = 0.0f64;
    for p in pairs {
        total += p.frames[p.frames.len() - 1].mean_abs_diff(&p.target)? as f64;
    }
    Ok((total / pairs.len().max(1) as f64) as f32)
}
