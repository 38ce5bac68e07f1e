//! Training workflow shared by the command line and the test suites.

use std::time::Instant;

use lrr_core::datagen::{build_corpus, gen_sequence, CorpusConfig, SynthConfig, TrainingPair, Video};
use lrr_core::guidance::EmbeddingBank;
use lrr_core::nets::EncoderSpec;
use lrr_core::resampler::{LResampleParams, LResampleSpec};
use lrr_core::rng::derive;
use lrr_core::stir::{StirParams, StirSpec};
use lrr_core::tracker::{TrackerParams, TrackerSpec};
use lrr_core::training::{train_lresample, train_stir, train_tracker, EvalRecord, Monitor, TrainConfig, TrainReport};
use lrr_core::{Error, Result};

use crate::config::RunConfig;

/// Stops training after a wall-clock budget; optionally logs evaluations.
pub struct Clock {
    start: Instant,
    budget: f64,
    verbose: bool,
}

impl Clock {
    pub fn new(budget_secs: f64, verbose: bool) -> Self {
        Self { start: Instant::now(), budget: budget_secs, verbose }
    }

    pub fn elapsed(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }
}

impl Monitor for Clock {
    fn keep_going(&mut self, _: usize) -> bool {
        self.elapsed() < self.budget
    }

    fn record(&mut self, r: &EvalRecord) {
        if self.verbose {
            let train = r.train_loss.map_or("-".to_string(), |v| format!("{:.5}", v));
            eprintln!("[{:6.1}s] step {:5} epoch {:3} train {} val {:.5}", self.elapsed(), r.step, r.epoch, train, r.val_loss);
        }
    }
}

fn unwrap_train<P>(r: lrr_core::training::TrainResult<P>) -> Result<TrainReport<P>> {
    r.map_err(|f| f.error)
}

/// Tracker pretraining settings. The tracker trains on its own videos,
/// disjoint from the evaluation suite's seeds.
pub const TRACKER_VIDEOS: usize = 48;
pub const TRACKER_VAL_VIDEOS: usize = 8;
pub const TRACKER_LR: f32 = 3e-3;
pub const TRACKER_EPOCHS: usize = 60;
pub const TRACKER_BUDGET: f64 = 120.0;

pub fn tracker_videos(seed: u64) -> Result<Vec<Video>> {
    (0..TRACKER_VIDEOS)
        .map(|i| gen_sequence(&SynthConfig { seed: derive(derive(seed, 1), i as u64), ..SynthConfig::default() }))
        .collect()
}

pub fn pretrain_tracker(seed: u64, verbose: bool) -> Result<TrainReport<TrackerParams>> {
    let vids = tracker_videos(seed)?;
    let (train, val) = vids.split_at(TRACKER_VIDEOS - TRACKER_VAL_VIDEOS);
    let init = TrackerParams::init(TrackerSpec::default(), derive(seed, 2))?;
    let cfg = TrainConfig { lr: TRACKER_LR, epochs: TRACKER_EPOCHS, eval_every: 25, seed: derive(seed, 3), ..TrainConfig::default() };
    unwrap_train(train_tracker(train, val, init, &cfg, &mut Clock::new(TRACKER_BUDGET, verbose)))
}

/// Training, model-selection and held-out pairs. The selection split is
/// the first quarter of the validation pairs.
pub struct Corpus {
    pub train: Vec<TrainingPair>,
    pub select: Vec<TrainingPair>,
    pub held_out: Vec<TrainingPair>,
}

pub fn build_pairs(cfg: &RunConfig, tracker: &TrackerParams) -> Result<Corpus> {
    if cfg.val_pairs < 2 {
        return Err(Error::Config("val_pairs must be at least 2".into()));
    }
    let cc = CorpusConfig { seed: derive(cfg.seed, 4), frames: cfg.frames, ..CorpusConfig::default() };
    let mut all = build_corpus(&cc, tracker, 0..cfg.train_pairs + cfg.val_pairs)?;
    let val = all.split_off(cfg.train_pairs);
    let (select, held_out) = val.split_at((cfg.val_pairs / 4).max(1));
    Ok(Corpus { train: all, select: select.to_vec(), held_out: held_out.to_vec() })
}

pub fn train_config(cfg: &RunConfig, stream: u64) -> TrainConfig {
    TrainConfig {
        lr: cfg.lr,
        batch: cfg.batch,
        epochs: cfg.epochs,
        eval_every: cfg.eval_every,
        crop: cfg.crop,
        queries: cfg.queries,
        seed: derive(cfg.seed, stream),
        ..TrainConfig::default()
    }
}

pub fn stir_spec(cfg: &RunConfig) -> StirSpec {
    StirSpec {
        encoder: EncoderSpec { channels: cfg.channels, blocks: cfg.blocks },
        hidden: cfg.hidden,
        ..StirSpec::new(cfg.frames)
    }
}

pub fn fit_stir(cfg: &RunConfig, corpus: &Corpus, verbose: bool) -> Result<TrainReport<StirParams>> {
    let init = StirParams::init(stir_spec(cfg), derive(cfg.seed, 5))?;
    let mut clock = Clock::new(cfg.time_budget, verbose);
    unwrap_train(train_stir(&corpus.train, &corpus.select, init, &train_config(cfg, 6), &mut clock))
}

/// Trains the offset predictor over a frozen `stir`; `language = false`
/// drops the text input.
pub fn fit_lresample(
    cfg: &RunConfig,
    corpus: &Corpus,
    stir: &StirParams,
    bank: &EmbeddingBank,
    verbose: bool,
) -> Result<TrainReport<LResampleParams>> {
    let text = if cfg.language { bank.dim() } else { 0 };
    let spec = LResampleSpec { s_xy: cfg.s_xy, s_tau: cfg.s_tau, ..LResampleSpec::new(stir.encoder.channels(), text) };
    let init = LResampleParams::init(spec, derive(cfg.seed, 7))?;
    let mut clock = Clock::new(cfg.time_budget, verbose);
    unwrap_train(train_lresample(&corpus.train, &corpus.select, stir, bank, init, &train_config(cfg, 8), &mut clock))
}

pub fn tracker_path(dir: &std::path::Path) -> std::path::PathBuf {
    dir.join("tracker.lrr")
}

/// Checkpoint of the implicit representation for history length `n`.
pub fn stir_path(dir: &std::path::Path, n: usize) -> std::path::PathBuf {
    dir.join(format!("stir_n{}.lrr", n))
}

pub fn lresample_path(dir: &std::path::Path, n: usize, language: bool) -> std::path::PathBuf {
    dir.join(format!("lresample_n{}{}.lrr", n, if language { "" } else { "_plain" }))
}

/// Keeps the newest `n + 1` frames of each pair.
pub fn with_history(pairs: &[TrainingPair], n: usize) -> Result<Vec<TrainingPair>> {
    pairs
        .iter()
        .map(|p| {
            let f = p.frames.len();
            if n + 1 > f {
                return Err(Error::Config(format!("pair holds {} frames, history {} needs {}", f, n, n + 1)));
            }
            let cut = f - (n + 1);
            Ok(TrainingPair {
                frames: p.frames[cut..].to_vec(),
                window: p.window[cut..].to_vec(),
                gt: p.gt[cut..].to_vec(),
                ..p.clone()
            })
        })
        .collect()
}

impl Corpus {
    pub fn with_history(&self, n: usize) -> Result<Corpus> {
        Ok(Corpus {
            train: with_history(&self.train, n)?,
            select: with_history(&self.select, n)?,
            held_out: with_history(&self.held_out, n)?,
        })
    }
}

/// Model for history length `n` started from `main`'s encoder and temporal
/// MLP with a fresh spatial MLP, trained for `budget` seconds on `corpus`
/// (already cut to `n + 1` frames).
pub fn fit_history_variant(
    cfg: &RunConfig,
    main: &StirParams,
    corpus: &Corpus,
    n: usize,
    budget: f64,
    verbose: bool,
) -> Result<TrainReport<StirParams>> {
    let spec = StirSpec { frames: n + 1, ..main.spec() };
    let fresh = StirParams::init(spec, derive(cfg.seed, 100 + n as u64))?;
    let init = StirParams::new(main.encoder.clone(), fresh.spatial, main.temporal.clone(), fresh.joint)?;
    let mut clock = Clock::new(budget, verbose);
    unwrap_train(train_stir(&corpus.train, &corpus.select, init, &train_config(cfg, 200 + n as u64), &mut clock))
}
