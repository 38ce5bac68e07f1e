//! Episode runner, suite evaluation, ablations, skip calibration and the
//! complexity and timing benches.

use std::collections::VecDeque;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use lrr_core::attacks::{AttackBudget, AttackContext, Attacker, FgsmAttacker, PgdAttacker, SparkAttacker};
use lrr_core::datagen::{gen_sequence, SynthConfig, Video};
use lrr_core::guidance::{fixture_template, select_text_embedding, EmbeddingBank, TemplateEmbedding, TextEmbedding};
use lrr_core::metrics::{precision, resize_defense, skip_policy, success_auc, PRECISION_THRESHOLD};
use lrr_core::resampler::{lrr_defend_volume, LResampleParams};
use lrr_core::rng::derive;
use lrr_core::stir::{reconstruct_frame, FeatureVolume, StirParams};
use lrr_core::tracker::{crop_search_region, init_track, locate, BBox, TrackerParams};
use lrr_core::{Error, Result, Tensor};

/// Attack applied to every search patch after the first frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AttackKind {
    None,
    Fgsm(f32),
    Pgd,
    Spark,
}

impl AttackKind {
    pub fn name(&self) -> String {
        match self {
            AttackKind::None => "clean".into(),
            AttackKind::Fgsm(e) => format!("fgsm{:.0}", e * 255.0),
            AttackKind::Pgd => "pgd".into(),
            AttackKind::Spark => "spark".into(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" | "clean" => Some(AttackKind::None),
            "fgsm" => Some(AttackKind::Fgsm(8.0 / 255.0)),
            "pgd" => Some(AttackKind::Pgd),
            "spark" => Some(AttackKind::Spark),
            _ => None,
        }
    }

    /// A fresh attacker for one video.
    pub fn build(&self, seed: u64) -> Option<Box<dyn Attacker + Send>> {
        match *self {
            AttackKind::None => None,
            AttackKind::Fgsm(eps) => Some(Box::new(FgsmAttacker { eps })),
            AttackKind::Pgd => Some(Box::new(PgdAttacker { budget: AttackBudget::pgd_default() })),
            AttackKind::Spark => Some(Box::new(SparkAttacker::new(AttackBudget::spark_default(), 1.0, seed))),
        }
    }
}

/// Input purification applied before the tracker.
#[derive(Clone, Copy)]
pub enum Defense<'a> {
    Lrr { stir: &'a StirParams, lres: &'a LResampleParams, bank: &'a EmbeddingBank },
    StirOnly { stir: &'a StirParams },
    Resize(f32),
}

impl Defense<'_> {
    fn stir(&self) -> Option<&StirParams> {
        match self {
            Defense::Lrr { stir, .. } | Defense::StirOnly { stir } => Some(stir),
            Defense::Resize(_) => None,
        }
    }
}

/// Wall-clock cost of one frame's stages, in milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StageTimes {
    pub crop: f64,
    pub attack: f64,
    pub defend: f64,
    pub track: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub preds: Vec<BBox>,
    pub gts: Vec<BBox>,
    pub timings: Vec<StageTimes>,
    pub skipped: Vec<bool>,
}

/// Recent raw search patches with lazily computed encoder features.
struct PatchBuffer {
    capacity: usize,
    items: VecDeque<(Tensor, Option<Tensor>)>,
}

impl PatchBuffer {
    fn new(capacity: usize) -> Self {
        Self { capacity, items: VecDeque::with_capacity(capacity) }
    }

    fn push(&mut self, patch: Tensor) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back((patch, None));
    }

    /// Feature volume of the buffer; missing history is filled by repeating
    /// the oldest patch.
    fn volume(&mut self, stir: &StirParams, t: usize) -> Result<FeatureVolume> {
        for (p, f) in self.items.iter_mut() {
            if f.is_none() {
                *f = Some(stir.encoder.forward(p)?);
            }
        }
        let pad = self.capacity - self.items.len();
        let first = self.items.front().ok_or_else(|| Error::Config("empty patch buffer".into()))?;
        let mut frames = Vec::with_capacity(self.capacity);
        let mut slices = Vec::with_capacity(self.capacity);
        for _ in 0..pad {
            frames.push(first.0.clone());
            slices.push(first.1.clone().expect("encoded above"));
        }
        for (p, f) in &self.items {
            frames.push(p.clone());
            slices.push(f.clone().expect("encoded above"));
        }
        FeatureVolume::from_slices(&slices, &frames, t)
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Text embedding the defense uses for a template.
fn choose_text(defense: Option<&Defense>, template: Option<&TemplateEmbedding>) -> Result<Option<TextEmbedding>> {
    match defense {
        Some(Defense::Lrr { lres, bank, .. }) if lres.spec.uses_text() => {
            let tpl = template.ok_or_else(|| Error::Config("language-guided defense needs a template embedding".into()))?;
            Ok(Some(select_text_embedding(tpl, bank)?.0.clone()))
        }
        _ => Ok(None),
    }
}

/// Tracks one video. Frame 0 initializes the tracker and is reported at its
/// ground truth. With `skip`, the defense is bypassed on frames whose two
/// previous predictions overlap at least the threshold.
pub fn run_episode<'a>(
    video: &Video,
    tracker: &TrackerParams,
    mut attacker: Option<&mut (dyn Attacker + Send + 'a)>,
    defense: Option<&Defense>,
    skip: Option<f32>,
    template: Option<&TemplateEmbedding>,
) -> Result<EpisodeResult> {
    let n = video.frames.len();
    if n == 0 {
        return Err(Error::Config("empty video".into()));
    }
    let mut state = init_track(tracker, &video.frames[0], video.gt[0])?;
    let ztxt = choose_text(defense, template)?;
    let mut buffer = defense.and_then(|d| d.stir()).map(|s| PatchBuffer::new(s.frames()));
    let mut out = EpisodeResult {
        preds: vec![video.gt[0]],
        gts: video.gt.clone(),
        timings: vec![StageTimes::default()],
        skipped: vec![false],
    };
    let (h, w, _) = video.frames[0].dims3()?;
    for k in 1..n {
        let mut times = StageTimes::default();
        let t0 = Instant::now();
        let (patch, win) = crop_search_region(tracker, &video.frames[k], &state.bbox)?;
        times.crop = ms(t0);

        let t0 = Instant::now();
        let patch = match attacker.as_deref_mut() {
            Some(a) => {
                let gt = video.gt[k];
                let ctx = AttackContext {
                    tracker,
                    template_features: &state.template_features,
                    target: win.to_patch(gt.cy, gt.cx),
                };
                a.attack(&patch, &ctx, k, win.scale().0)?
            }
            None => patch,
        };
        times.attack = ms(t0);

        let t0 = Instant::now();
        let skipped = match (skip, k) {
            (Some(th), k) if k >= 2 => skip_policy(out.preds[k - 1].iou(&out.preds[k - 2]), th),
            _ => false,
        };
        let input = match defense {
            None => patch,
            Some(Defense::Resize(r)) => {
                if skipped {
                    patch
                } else {
                    resize_defense(&patch, *r)?
                }
            }
            Some(d) => {
                let stir = d.stir().expect("learned defense");
                let buf = buffer.as_mut().expect("buffer for learned defense");
                buf.push(patch.clone());
                if skipped {
                    patch
                } else {
                    let vol = buf.volume(stir, k)?;
                    match d {
                        Defense::Lrr { stir, lres, .. } => lrr_defend_volume(&vol, ztxt.as_ref(), stir, lres)?,
                        _ => reconstruct_frame(&vol, stir, None)?,
                    }
                }
            }
        };
        times.defend = ms(t0);

        let t0 = Instant::now();
        let (b, _) = locate(tracker, &state, &input, &win)?;
        let b = BBox { cx: b.cx.clamp(0.0, (w - 1) as f32), cy: b.cy.clamp(0.0, (h - 1) as f32), ..b };
        state.bbox = b;
        state.frame += 1;
        times.track = ms(t0);

        out.preds.push(b);
        out.timings.push(times);
        out.skipped.push(skipped);
    }
    Ok(out)
}

/// Evaluation videos and their template embeddings.
pub struct Suite {
    pub videos: Vec<Video>,
    pub templates: Vec<TemplateEmbedding>,
}

/// Fixture template noise, per component.
pub const TEMPLATE_NOISE: f32 = 0.1;

impl Suite {
    /// `count` videos of `length` frames; video `i` uses seed
    /// `derive(seed, i)`. Template embeddings are fixture vectors of each
    /// video's class with dimension `dim`.
    pub fn generate(seed: u64, count: usize, length: usize, dim: usize) -> Result<Self> {
        let mut videos = Vec::with_capacity(count);
        let mut templates = Vec::with_capacity(count);
        for i in 0..count {
            let s = derive(seed, i as u64);
            let v = gen_sequence(&SynthConfig { seed: s, length, ..SynthConfig::default() })?;
            templates.push(fixture_template(v.class.label(), dim, TEMPLATE_NOISE, s));
            videos.push(v);
        }
        Ok(Self { videos, templates })
    }

    /// Named sizes: `small` is 20 videos of 30 frames, `tiny` 4 of 12.
    pub fn named(name: &str, seed: u64, dim: usize) -> Result<Self> {
        match name {
            "small" => Self::generate(seed, 20, 30, dim),
            "tiny" => Self::generate(seed, 4, 12, dim),
            other => Err(Error::Config(format!("unknown suite '{}'", other))),
        }
    }
}

/// Aggregate of one configuration on a suite.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub variant: String,
    pub attacker: String,
    /// Mean over videos, percent.
    pub precision: f32,
    /// Mean over videos; a surrogate for expected average overlap.
    pub success_auc: f32,
    /// Mean per-frame defense plus tracking time.
    pub cost_ms: f64,
    pub attack_ms: f64,
    pub defend_ms: f64,
    pub track_ms: f64,
    /// Fraction of tracked frames whose defense was skipped.
    pub skip_rate: f32,
    pub videos: usize,
    pub frames: usize,
}

/// Runs every video of the suite.
pub fn run_suite(
    suite: &Suite,
    tracker: &TrackerParams,
    attack: AttackKind,
    defense: Option<&Defense>,
    skip: Option<f32>,
    seed: u64,
) -> Result<Vec<EpisodeResult>> {
    suite
        .videos
        .par_iter()
        .zip(suite.templates.par_iter())
        .enumerate()
        .map(|(i, (v, t))| {
            let mut a = attack.build(derive(seed, i as u64));
            run_episode(v, tracker, a.as_deref_mut(), defense, skip, Some(t))
        })
        .collect()
}

/// Aggregates episodes. Frame 0 of each video is excluded from costs and
/// the skip rate.
pub fn summarize(variant: &str, attacker: &str, episodes: &[EpisodeResult]) -> Result<SuiteReport> {
    if episodes.is_empty() {
        return Err(Error::Metric("no episodes".into()));
    }
    let (mut p, mut s) = (0.0f64, 0.0f64);
    let mut t = StageTimes::default();
    let (mut frames, mut skipped) = (0usize, 0usize);
    for e in episodes {
        p += precision(&e.preds, &e.gts, PRECISION_THRESHOLD)? as f64;
        s += success_auc(&e.preds, &e.gts)? as f64;
        for (x, &sk) in e.timings.iter().zip(&e.skipped).skip(1) {
            t.attack += x.attack;
            t.defend += x.defend;
            t.track += x.track + x.crop;
            frames += 1;
            skipped += sk as usize;
        }
    }
    let n = episodes.len() as f64;
    let f = frames.max(1) as f64;
    Ok(SuiteReport {
        variant: variant.to_string(),
        attacker: attacker.to_string(),
        precision: (p / n) as f32,
        success_auc: (s / n) as f32,
        cost_ms: (t.defend + t.track) / f,
        attack_ms: t.attack / f,
        defend_ms: t.defend / f,
        track_ms: t.track / f,
        skip_rate: skipped as f32 / frames.max(1) as f32,
        videos: episodes.len(),
        frames,
    })
}

/// Overlaps between consecutive predictions from frame 2 on, the quantity
/// the skip rule thresholds.
pub fn consecutive_overlaps(episodes: &[EpisodeResult]) -> Vec<f32> {
    let mut out = Vec::new();
    for e in episodes {
        for k in 2..e.preds.len() {
            out.push(e.preds[k - 1].iou(&e.preds[k - 2]));
        }
    }
    out
}

/// Threshold whose skip rate on `overlaps` is closest to `rate` (the
/// `(1 - rate)` quantile); frames at or above it would be skipped.
pub fn threshold_for_rate(overlaps: &[f32], rate: f32) -> Option<f32> {
    if overlaps.is_empty() {
        return None;
    }
    let mut v = overlaps.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    let k = ((rate * v.len() as f32).round() as usize).clamp(1, v.len());
    Some(v[k - 1])
}

/// Skip-rate counting over tracked frames (frame 0 excluded).
pub fn skip_rate(episodes: &[EpisodeResult]) -> f32 {
    let (mut n, mut s) = (0usize, 0usize);
    for e in episodes {
        for &k in e.skipped.iter().skip(1) {
            n += 1;
            s += k as usize;
        }
    }
    s as f32 / n.max(1) as f32
}

/// Result of calibrating the skip threshold.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SkipCalibration {
    pub threshold: f32,
    pub target_rate: f32,
    pub skip_rate: f32,
    pub precision: f32,
    pub baseline_precision: f32,
    pub relative_drop: f32,
    pub rounds: usize,
}

/// Picks a skip threshold whose suite skip rate is near `target`. The first
/// guess is the quantile of the undisturbed run's overlaps; later rounds
/// re-read the quantile from the skipping run itself, since skipping changes
/// the trajectory.
pub fn calibrate_skip(
    suite: &Suite,
    tracker: &TrackerParams,
    attack: AttackKind,
    defense: &Defense,
    target: f32,
    tolerance: f32,
    seed: u64,
) -> Result<(SkipCalibration, Vec<EpisodeResult>)> {
    let base = run_suite(suite, tracker, attack, Some(defense), None, seed)?;
    let base_prec = summarize("base", "", &base)?.precision;
    let mut overlaps = consecutive_overlaps(&base);
    let mut best: Option<(SkipCalibration, Vec<EpisodeResult>)> = None;
    for round in 1..=4 {
        let th = threshold_for_rate(&overlaps, target).ok_or_else(|| Error::Metric("no overlaps to calibrate on".into()))?;
        let eps = run_suite(suite, tracker, attack, Some(defense), Some(th), seed)?;
        let rate = skip_rate(&eps);
        let prec = summarize("skip", "", &eps)?.precision;
        let cal = SkipCalibration {
            threshold: th,
            target_rate: target,
            skip_rate: rate,
            precision: prec,
            baseline_precision: base_prec,
            relative_drop: if base_prec > 0.0 { (base_prec - prec) / base_prec } else { 0.0 },
            rounds: round,
        };
        let better = best.as_ref().is_none_or(|(b, _)| (rate - target).abs() < (b.skip_rate - target).abs());
        overlaps = consecutive_overlaps(&eps);
        if better {
            best = Some((cal, eps));
        }
        if (rate - target).abs() <= tolerance / 2.0 {
            break;
        }
    }
    Ok(best.expect("at least one round"))
}

/// Evaluation counts and timings of decomposed versus joint rendering.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComplexityRow {
    pub n: usize,
    pub k: usize,
    pub decomposed_count: usize,
    pub joint_count: usize,
    pub decomposed_ms: f64,
    pub joint_ms: f64,
}

impl ComplexityRow {
    pub fn count_ratio(&self) -> f64 {
        self.joint_count as f64 / self.decomposed_count as f64
    }

    pub fn time_ratio(&self) -> f64 {
        self.joint_ms / self.decomposed_ms
    }
}

/// Counts MLP evaluations for one query at a non-integer time (dense
/// temporal blending), and times rendering every pixel of a `side x side`
/// frame at a non-integer time with each path, best of `reps`.
pub fn bench_complexity(params: &StirParams, side: usize, k: usize, reps: usize, seed: u64) -> Result<ComplexityRow> {
    use lrr_core::rng::{seeded, uniform};
    use lrr_core::stir::{render_points, render_points_joint, stir_eval_counted, stir_eval_joint, ContinuousCoord, EvalCounter, TemporalMode};
    let f = params.frames();
    let mut rng = seeded(seed);
    let frames: Vec<Tensor> = (0..f)
        .map(|_| Tensor::new([side, side, 3], (0..side * side * 3).map(|_| uniform(&mut rng, 0.0, 1.0)).collect()))
        .collect::<Result<_>>()?;
    let slices = frames.iter().map(|x| params.encoder.forward(x)).collect::<Result<Vec<_>>>()?;
    let vol = FeatureVolume::from_slices(&slices, &frames, f - 1)?;
    let tau = if f > 1 { 0.5 } else { 0.0 };
    let p = ContinuousCoord::new(1.3, 2.6, tau);
    let mut dc = EvalCounter::default();
    stir_eval_counted(p, &vol, params, k, TemporalMode::Dense, &mut dc)?;
    let mut jc = EvalCounter::default();
    stir_eval_joint(p, &vol, params, k, &mut jc)?;

    let mut coords = Vec::with_capacity(side * side * 3);
    for x in 0..side {
        for y in 0..side {
            coords.extend_from_slice(&[x as f32, y as f32, tau]);
        }
    }
    let coords = Tensor::new([side * side, 3], coords)?;
    let time = |run: &dyn Fn() -> Result<Tensor>| -> Result<f64> {
        let mut best = f64::INFINITY;
        for _ in 0..reps.max(1) {
            let t0 = Instant::now();
            run()?;
            best = best.min(ms(t0));
        }
        Ok(best)
    };
    let decomposed_ms = time(&|| render_points(&vol, params, &coords, TemporalMode::Dense))?;
    let joint_ms = time(&|| render_points_joint(&vol, params, &coords))?;
    Ok(ComplexityRow { n: f - 1, k, decomposed_count: dc.total(), joint_count: jc.total(), decomposed_ms, joint_ms })
}

/// Mean per-stage milliseconds per frame of a configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimingRow {
    pub pipeline: String,
    pub attack_ms: f64,
    pub defend_ms: f64,
    pub track_ms: f64,
}

pub fn bench_timing(name: &str, episodes: &[EpisodeResult]) -> Result<TimingRow> {
    let r = summarize(name, "", episodes)?;
    Ok(TimingRow { pipeline: name.to_string(), attack_ms: r.attack_ms, defend_ms: r.defend_ms, track_ms: r.track_ms })
}

/// Trained models an ablation draws on.
pub struct ModelSet {
    pub tracker: TrackerParams,
    pub bank: EmbeddingBank,
    pub stir: StirParams,
    pub lres: LResampleParams,
    /// Offset predictor trained without text input.
    pub lres_plain: Option<LResampleParams>,
    /// `(N, STIR, offset predictor)` for other history lengths.
    pub history: Vec<(usize, StirParams, LResampleParams)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationPlan {
    pub attackers: Vec<AttackKind>,
    pub resize: Vec<f32>,
    /// Target skip rate; `None` leaves the skip variant out.
    pub skip_target: Option<f32>,
    pub skip_tolerance: f32,
    pub seed: u64,
}

impl Default for AblationPlan {
    fn default() -> Self {
        Self {
            attackers: vec![AttackKind::None, AttackKind::Pgd],
            resize: vec![0.9, 0.7, 0.5, 0.3, 0.1],
            skip_target: Some(0.25),
            skip_tolerance: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Ablation {
    pub reports: Vec<SuiteReport>,
    /// One calibration per attacker.
    pub skip: Vec<(String, SkipCalibration)>,
}

impl Ablation {
    pub fn find(&self, variant: &str, attacker: &str) -> Option<&SuiteReport> {
        self.reports.iter().find(|r| r.variant == variant && r.attacker == attacker)
    }
}

/// Runs every variant under every attacker of the plan.
pub fn run_ablation(suite: &Suite, m: &ModelSet, plan: &AblationPlan) -> Result<Ablation> {
    let lrr = Defense::Lrr { stir: &m.stir, lres: &m.lres, bank: &m.bank };
    let mut variants: Vec<(String, Option<Defense>)> = vec![
        ("wo.Def".into(), None),
        ("wo.LResample".into(), Some(Defense::StirOnly { stir: &m.stir })),
    ];
    if let Some(p) = &m.lres_plain {
        variants.push(("wo.Lang".into(), Some(Defense::Lrr { stir: &m.stir, lres: p, bank: &m.bank })));
    }
    variants.push(("LRR".into(), Some(lrr)));
    let main_n = m.stir.frames() - 1;
    let mut ns: Vec<(usize, Defense)> = m.history.iter().map(|(n, s, l)| (*n, Defense::Lrr { stir: s, lres: l, bank: &m.bank })).collect();
    if !ns.iter().any(|(n, _)| *n == main_n) {
        ns.push((main_n, lrr));
    }
    ns.sort_by_key(|(n, _)| *n);
    for (n, d) in ns {
        variants.push((format!("N={}", n), Some(d)));
    }
    for &r in &plan.resize {
        variants.push((format!("resize({})", r), Some(Defense::Resize(r))));
    }

    let mut out = Ablation { reports: Vec::new(), skip: Vec::new() };
    for atk in &plan.attackers {
        for (name, d) in &variants {
            let eps = run_suite(suite, &m.tracker, *atk, d.as_ref(), None, plan.seed)?;
            out.reports.push(summarize(name, &atk.name(), &eps)?);
        }
        if let Some(target) = plan.skip_target {
            let (cal, eps) = calibrate_skip(suite, &m.tracker, *atk, &lrr, target, plan.skip_tolerance, plan.seed)?;
            out.reports.push(summarize(&format!("skip({:.3})", cal.threshold), &atk.name(), &eps)?);
            out.skip.push((atk.name(), cal));
        }
    }
    Ok(out)
}

/// Long-format CSV, one row per variant, attacker and metric.
pub fn reports_csv(reports: &[SuiteReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Config(e.to_string());
    w.write_record(["variant", "attacker", "metric", "value"]).map_err(io)?;
    for r in reports {
        let rows: [(&str, f64); 6] = [
            ("precision", r.precision as f64),
            ("success_auc", r.success_auc as f64),
            ("cost_ms", r.cost_ms),
            ("defend_ms", r.defend_ms),
            ("track_ms", r.track_ms),
            ("skip_rate", r.skip_rate as f64),
        ];
        for (k, v) in rows {
            w.write_record([r.variant.as_str(), r.attacker.as_str(), k, &format!("{:.4}", v)]).map_err(io)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv writes utf-8"))
}

/// Nested JSON: variant, then attacker, then the full report.
pub fn reports_json(reports: &[SuiteReport]) -> String {
    let mut m: std::collections::BTreeMap<&str, std::collections::BTreeMap<&str, &SuiteReport>> = Default::default();
    for r in reports {
        m.entry(r.variant.as_str()).or_default().insert(r.attacker.as_str(), r);
    }
    serde_json::to_string_pretty(&m).expect("reports serialize")
}
