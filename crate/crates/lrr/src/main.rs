use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use lrr::config::{load_config_over, RunConfig, KEYS};
use lrr::evalbench::{
    bench_complexity, bench_timing, reports_csv, reports_json, run_ablation, run_suite, summarize, AblationPlan, AttackKind,
    Defense, ModelSet, Suite,
};
use lrr::formats::{load_bank, load_checkpoint, save_bank, save_checkpoint, Checkpoint, TrainMeta};
use lrr::pipeline::{build_pairs, fit_lresample, fit_stir, lresample_path, pretrain_tracker, stir_path, tracker_path};
use lrr::pngio::save_png;
use lrr_core::checks::{gradient_checks, oracle_check};
use lrr_core::datagen::TextureClass;
use lrr_core::guidance::{fixture_bank, EmbeddingBank};
use lrr_core::resampler::LResampleParams;
use lrr_core::stir::{StirParams, StirSpec};
use lrr_core::tracker::TrackerParams;
use lrr_core::training::stir_val_l1;

const COMMANDS: &[(&str, &str)] = &[
    ("synth", "Write the evaluation suite's frames as PNGs with ground truth"),
    ("pretrain-tracker", "Train the toy Siamese tracker"),
    ("train-stir", "Train the implicit representation on the perturbed-pair corpus"),
    ("train-resampler", "Train the offset predictor over a frozen implicit representation"),
    ("eval", "Track the suite under an attack and defense, writing CSV and JSON"),
    ("ablate", "Run every ablation variant and calibrate the skip rule"),
    ("bench", "Evaluation-count and per-stage timing benches"),
    ("grad-check", "Finite-difference gradient checks of every trained module"),
    ("oracle-check", "Compare batched rendering with the per-pixel loop"),
    ("make-fixture-bank", "Write deterministic pseudo-embeddings for the synthetic classes"),
];

/// Fixture embedding dimension.
const BANK_DIM: usize = 16;

enum Failure {
    /// Bad arguments or configuration: exit 1.
    Invalid(String),
    /// Anything that went wrong while running: exit 2.
    Runtime(String),
}

type Outcome = Result<(), Failure>;

fn runtime<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Runtime(e.to_string())
}

fn invalid<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Invalid(e.to_string())
}

fn cli() -> Command {
    let mut common: Vec<Arg> = vec![Arg::new("config").long("config").value_name("FILE").help("key = value config file")];
    for k in KEYS {
        let flag = k.replace('_', "-");
        let mut a = Arg::new(*k).long(flag.clone()).value_name("VALUE").num_args(1);
        if flag != *k {
            a = a.alias(*k);
        }
        common.push(a);
    }
    let mut cmd = Command::new("lrr")
        .about("Purify adversarial tracking inputs with a language-guided resamplable continuous representation")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in COMMANDS {
        let mut sub = Command::new(*name).about(*about).args(common.clone());
        sub = match *name {
            "synth" => sub.arg(Arg::new("out").long("out").value_name("DIR")),
            "bench" => sub
                .arg(Arg::new("complexity").long("complexity").action(ArgAction::SetTrue))
                .arg(Arg::new("timing").long("timing").action(ArgAction::SetTrue))
                .arg(Arg::new("N").long("N").value_name("RANGE").default_value("1..5"))
                .arg(Arg::new("K").long("K").value_name("K").default_value("2"))
                .arg(Arg::new("size").long("size").value_name("PX").default_value("64"))
                .arg(Arg::new("reps").long("reps").default_value("3")),
            "make-fixture-bank" => sub
                .arg(Arg::new("dim").long("dim").default_value("16"))
                .arg(Arg::new("out").long("out").value_name("FILE")),
            _ => sub,
        };
        cmd = cmd.subcommand(sub);
    }
    cmd
}

fn resolve(m: &ArgMatches) -> Result<RunConfig, Failure> {
    let mut base = RunConfig::default();
    if let Ok(s) = std::env::var("LRR_SEED") {
        base.set("seed", &s).map_err(invalid)?;
    }
    let overrides: Vec<(String, String)> =
        KEYS.iter().filter_map(|k| m.get_one::<String>(k).map(|v| (k.to_string(), v.clone()))).collect();
    let path = m.get_one::<String>("config").map(PathBuf::from);
    let cfg = load_config_over(base, path.as_deref(), &overrides).map_err(invalid)?;
    if cfg.threads == 0 {
        return Err(Failure::Invalid("threads must be at least 1".into()));
    }
    if cfg.frames == 0 {
        return Err(Failure::Invalid("frames must be at least 1".into()));
    }
    Ok(cfg)
}

/// Logs the resolved config and writes it next to the reports.
fn echo(cmd: &str, cfg: &RunConfig) -> Outcome {
    let text = cfg.render();
    eprintln!("# {} with seed {}\n{}", cmd, cfg.seed, text);
    std::fs::create_dir_all(&cfg.report_dir).map_err(runtime)?;
    std::fs::write(cfg.report_dir.join(format!("{}.config", cmd)), text).map_err(runtime)
}

fn bank_path(cfg: &RunConfig) -> PathBuf {
    cfg.bank.clone().unwrap_or_else(|| cfg.checkpoints.join("bank.emb"))
}

fn load_tracker(cfg: &RunConfig) -> Result<TrackerParams, Failure> {
    load_checkpoint(&tracker_path(&cfg.checkpoints)).and_then(|c| c.to_tracker()).map_err(runtime)
}

fn load_stir(dir: &Path, n: usize) -> Result<StirParams, Failure> {
    load_checkpoint(&stir_path(dir, n)).and_then(|c| c.to_stir()).map_err(runtime)
}

fn load_lres(dir: &Path, n: usize, language: bool) -> Result<LResampleParams, Failure> {
    load_checkpoint(&lresample_path(dir, n, language)).and_then(|c| c.to_lresample()).map_err(runtime)
}

fn load_bank_for(cfg: &RunConfig) -> Result<EmbeddingBank, Failure> {
    let p = bank_path(cfg);
    load_bank(&p).map_err(|e| Failure::Runtime(format!("{} (run make-fixture-bank first?)", e)))
}

fn write(path: &Path, text: &str) -> Outcome {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(runtime)?;
    }
    std::fs::write(path, text).map_err(runtime)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn synth(cfg: &RunConfig, m: &ArgMatches) -> Outcome {
    let out = m.get_one::<String>("out").map(PathBuf::from).unwrap_or_else(|| cfg.report_dir.join("synth"));
    let suite = Suite::generate(cfg.seed, cfg.videos, cfg.video_length, BANK_DIM).map_err(runtime)?;
    for (i, v) in suite.videos.iter().enumerate() {
        let dir = out.join(format!("video_{:03}", i));
        std::fs::create_dir_all(&dir).map_err(runtime)?;
        let mut gt = String::from("frame,cx,cy,w,h,class\n");
        for (k, (f, b)) in v.frames.iter().zip(&v.gt).enumerate() {
            save_png(f, &dir.join(format!("{:04}.png", k))).map_err(runtime)?;
            gt.push_str(&format!("{},{},{},{},{},{}\n", k, b.cx, b.cy, b.w, b.h, v.class.label()));
        }
        std::fs::write(dir.join("gt.csv"), gt).map_err(runtime)?;
    }
    eprintln!("wrote {} videos to {}", suite.videos.len(), out.display());
    Ok(())
}

fn meta(cfg: &RunConfig, steps: usize, val: f32) -> TrainMeta {
    TrainMeta { seed: cfg.seed, epoch: steps as u32, val_loss: val }
}

fn save(ckpt: &Checkpoint, path: &Path) -> Outcome {
    std::fs::create_dir_all(path.parent().unwrap_or(Path::new("."))).map_err(runtime)?;
    save_checkpoint(ckpt, path).map_err(runtime)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn pretrain(cfg: &RunConfig) -> Outcome {
    let r = pretrain_tracker(cfg.seed, true).map_err(runtime)?;
    println!("tracker val loss {:.4} after {} steps", r.best_val, r.steps);
    save(&Checkpoint::from_tracker(&r.params, meta(cfg, r.steps, r.best_val)), &tracker_path(&cfg.checkpoints))
}

fn train_stir_cmd(cfg: &RunConfig) -> Outcome {
    let tracker = load_tracker(cfg)?;
    let corpus = build_pairs(cfg, &tracker).map_err(runtime)?;
    let r = fit_stir(cfg, &corpus, true).map_err(runtime)?;
    let held = stir_val_l1(&r.params, &corpus.held_out).map_err(runtime)?;
    let pert = lrr_core::datagen::perturbation_l1(&corpus.held_out).map_err(runtime)?;
    println!("held-out L1 {:.5} (perturbed input {:.5}) after {} steps", held, pert, r.steps);
    save(&Checkpoint::from_stir(&r.params, meta(cfg, r.steps, r.best_val)), &stir_path(&cfg.checkpoints, cfg.frames - 1))
}

fn train_resampler_cmd(cfg: &RunConfig) -> Outcome {
    let tracker = load_tracker(cfg)?;
    let stir = load_stir(&cfg.checkpoints, cfg.frames - 1)?;
    let bank = load_bank_for(cfg)?;
    let corpus = build_pairs(cfg, &tracker).map_err(runtime)?;
    let r = fit_lresample(cfg, &corpus, &stir, &bank, true).map_err(runtime)?;
    println!("offset predictor val L1 {:.5} after {} steps", r.best_val, r.steps);
    let path = lresample_path(&cfg.checkpoints, cfg.frames - 1, cfg.language);
    save(&Checkpoint::from_lresample(&r.params, meta(cfg, r.steps, r.best_val)), &path)
}

fn eval(cfg: &RunConfig) -> Outcome {
    let attack = AttackKind::parse(&cfg.attack).ok_or_else(|| Failure::Invalid(format!("unknown attack '{}'", cfg.attack)))?;
    let tracker = load_tracker(cfg)?;
    let suite = Suite::named(&cfg.suite, cfg.seed, BANK_DIM).map_err(invalid)?;
    let n = cfg.frames - 1;
    let (stir, lres, bank);
    let defense = match cfg.defense.as_str() {
        "none" => None,
        "resize" => Some(Defense::Resize(cfg.resize)),
        "stir" => {
            stir = load_stir(&cfg.checkpoints, n)?;
            Some(Defense::StirOnly { stir: &stir })
        }
        "lrr" => {
            stir = load_stir(&cfg.checkpoints, n)?;
            lres = load_lres(&cfg.checkpoints, n, cfg.language)?;
            bank = load_bank_for(cfg)?;
            Some(Defense::Lrr { stir: &stir, lres: &lres, bank: &bank })
        }
        other => return Err(Failure::Invalid(format!("unknown defense '{}'", other))),
    };
    let eps = run_suite(&suite, &tracker, attack, defense.as_ref(), cfg.skip_threshold, cfg.seed).map_err(runtime)?;
    let r = summarize(&cfg.defense, &attack.name(), &eps).map_err(runtime)?;
    println!(
        "{} / {}: precision {:.2}%  success AUC {:.4}  cost {:.2} ms/frame  skip {:.1}%",
        r.variant,
        r.attacker,
        r.precision,
        r.success_auc,
        r.cost_ms,
        100.0 * r.skip_rate
    );
    let stem = format!("eval_{}_{}", cfg.attack, cfg.defense);
    let reports = [r];
    write(&cfg.report_dir.join(format!("{}.csv", stem)), &reports_csv(&reports).map_err(runtime)?)?;
    write(&cfg.report_dir.join(format!("{}.json", stem)), &reports_json(&reports))
}

fn ablate(cfg: &RunConfig) -> Outcome {
    let n = cfg.frames - 1;
    let dir = &cfg.checkpoints;
    let mut history = Vec::new();
    for k in 1..=5 {
        if k != n && stir_path(dir, k).exists() && lresample_path(dir, k, true).exists() {
            history.push((k, load_stir(dir, k)?, load_lres(dir, k, true)?));
        }
    }
    let plain = if lresample_path(dir, n, false).exists() { Some(load_lres(dir, n, false)?) } else { None };
    let models = ModelSet {
        tracker: load_tracker(cfg)?,
        bank: load_bank_for(cfg)?,
        stir: load_stir(dir, n)?,
        lres: load_lres(dir, n, true)?,
        lres_plain: plain,
        history,
    };
    let suite = Suite::named(&cfg.suite, cfg.seed, BANK_DIM).map_err(invalid)?;
    let mut plan = AblationPlan { seed: cfg.seed, ..AblationPlan::default() };
    if cfg.attack != "none" {
        let a = AttackKind::parse(&cfg.attack).ok_or_else(|| Failure::Invalid(format!("unknown attack '{}'", cfg.attack)))?;
        plan.attackers = vec![AttackKind::None, a];
    }
    let ab = run_ablation(&suite, &models, &plan).map_err(runtime)?;
    for r in &ab.reports {
        println!("{:>14} {:>6}  precision {:6.2}  auc {:.4}  cost {:7.2} ms", r.variant, r.attacker, r.precision, r.success_auc, r.cost_ms);
    }
    for (a, c) in &ab.skip {
        println!("skip under {}: threshold {:.4} rate {:.3} precision {:.2} vs {:.2}", a, c.threshold, c.skip_rate, c.precision, c.baseline_precision);
    }
    write(&cfg.report_dir.join("ablation.csv"), &reports_csv(&ab.reports).map_err(runtime)?)?;
    write(&cfg.report_dir.join("ablation.json"), &reports_json(&ab.reports))?;
    write(&cfg.report_dir.join("skip_calibration.json"), &serde_json::to_string_pretty(&ab.skip).map_err(runtime)?)
}

fn parse_range(s: &str) -> Result<Vec<usize>, Failure> {
    let bad = || Failure::Invalid(format!("bad range '{}', expected A..B or a number", s));
    match s.split_once("..") {
        Some((a, b)) => {
            let (a, b): (usize, usize) = (a.parse().map_err(|_| bad())?, b.trim_start_matches('=').parse().map_err(|_| bad())?);
            if a > b {
                return Err(bad());
            }
            Ok((a..=b).collect())
        }
        None => Ok(vec![s.parse().map_err(|_| bad())?]),
    }
}

fn bench(cfg: &RunConfig, m: &ArgMatches) -> Outcome {
    let mut complexity = m.get_flag("complexity");
    let timing = m.get_flag("timing");
    if !complexity && !timing {
        complexity = true;
    }
    let num = |k: &str| -> Result<usize, Failure> {
        m.get_one::<String>(k).expect("has default").parse().map_err(|_| Failure::Invalid(format!("--{} expects an integer", k)))
    };
    if complexity {
        let (k, size, reps) = (num("K")?, num("size")?, num("reps")?);
        let mut csv = String::from("N,K,decomposed_count,joint_count,count_ratio,decomposed_ms,joint_ms,time_ratio\n");
        println!("{:>3} {:>3} {:>10} {:>6} {:>8} {:>12} {:>9} {:>8}", "N", "K", "decomposed", "joint", "ratio", "decomp ms", "joint ms", "ratio");
        for n in parse_range(m.get_one::<String>("N").expect("has default"))? {
            let p = StirParams::random(StirSpec::new(n + 1), cfg.seed).map_err(runtime)?;
            let r = bench_complexity(&p, size, k, reps, cfg.seed).map_err(runtime)?;
            println!(
                "{:>3} {:>3} {:>10} {:>6} {:>8.3} {:>12.2} {:>9.2} {:>8.3}",
                r.n,
                r.k,
                r.decomposed_count,
                r.joint_count,
                r.count_ratio(),
                r.decomposed_ms,
                r.joint_ms,
                r.time_ratio()
            );
            csv.push_str(&format!(
                "{},{},{},{},{:.4},{:.3},{:.3},{:.4}\n",
                r.n,
                r.k,
                r.decomposed_count,
                r.joint_count,
                r.count_ratio(),
                r.decomposed_ms,
                r.joint_ms,
                r.time_ratio()
            ));
        }
        write(&cfg.report_dir.join("bench_complexity.csv"), &csv)?;
    }
    if timing {
        let n = cfg.frames - 1;
        let tracker = load_tracker(cfg)?;
        let stir = load_stir(&cfg.checkpoints, n)?;
        let lres = load_lres(&cfg.checkpoints, n, true)?;
        let bank = load_bank_for(cfg)?;
        let suite = Suite::named("tiny", cfg.seed, BANK_DIM).map_err(invalid)?;
        let attack = AttackKind::parse(&cfg.attack).unwrap_or(AttackKind::Pgd);
        let mut csv = String::from("pipeline,attack_ms,defend_ms,track_ms\n");
        let pipelines = [
            ("tracker", None),
            ("stir", Some(Defense::StirOnly { stir: &stir })),
            ("lrr", Some(Defense::Lrr { stir: &stir, lres: &lres, bank: &bank })),
        ];
        for (name, d) in pipelines {
            let eps = run_suite(&suite, &tracker, attack, d.as_ref(), None, cfg.seed).map_err(runtime)?;
            let t = bench_timing(name, &eps).map_err(runtime)?;
            println!("{:>8}: attack {:7.2} ms  defend {:7.2} ms  track {:6.2} ms", t.pipeline, t.attack_ms, t.defend_ms, t.track_ms);
            csv.push_str(&format!("{},{:.3},{:.3},{:.3}\n", t.pipeline, t.attack_ms, t.defend_ms, t.track_ms));
        }
        write(&cfg.report_dir.join("bench_timing.csv"), &csv)?;
    }
    Ok(())
}

fn grad_check(cfg: &RunConfig) -> Outcome {
    let checks = gradient_checks(cfg.seed).map_err(runtime)?;
    let mut ok = true;
    for c in &checks {
        let pass = c.worst <= 1e-3;
        ok &= pass;
        println!("{:<24} max rel err {:.3e} {}", c.name, c.worst, if pass { "ok" } else { "FAIL" });
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Runtime("gradient check failed".into()))
    }
}

fn oracle(cfg: &RunConfig) -> Outcome {
    let d = oracle_check(8, 3, cfg.seed).map_err(runtime)?;
    println!("max abs diff {:.3e}", d);
    if d <= 1e-5 {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("batched and loop renders differ by {:e}", d)))
    }
}

fn make_bank(cfg: &RunConfig, m: &ArgMatches) -> Outcome {
    let dim: usize = m.get_one::<String>("dim").expect("has default").parse().map_err(|_| Failure::Invalid("--dim expects an integer".into()))?;
    let out = m.get_one::<String>("out").map(PathBuf::from).unwrap_or_else(|| bank_path(cfg));
    let bank = fixture_bank(&TextureClass::labels(), dim).map_err(invalid)?;
    if let Some(d) = out.parent() {
        std::fs::create_dir_all(d).map_err(runtime)?;
    }
    save_bank(&bank, &out).map_err(runtime)?;
    println!("wrote {} entries of dimension {} to {}", bank.len(), dim, out.display());
    Ok(())
}

fn run(argv: Vec<String>) -> Outcome {
    let matches = match cli().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{}", e);
                return Ok(());
            }
            let _ = e.print();
            return Err(Failure::Invalid(String::new()));
        }
    };
    let (name, m) = matches.subcommand().expect("subcommand required");
    let cfg = resolve(m)?;
    rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global().map_err(runtime)?;
    echo(name, &cfg)?;
    match name {
        "synth" => synth(&cfg, m),
        "pretrain-tracker" => pretrain(&cfg),
        "train-stir" => train_stir_cmd(&cfg),
        "train-resampler" => train_resampler_cmd(&cfg),
        "eval" => eval(&cfg),
        "ablate" => ablate(&cfg),
        "bench" => bench(&cfg, m),
        "grad-check" => grad_check(&cfg),
        "oracle-check" => oracle(&cfg),
        "make-fixture-bank" => make_bank(&cfg, m),
        _ => unreachable!("clap rejects unknown subcommands"),
    }
}

fn main() -> ExitCode {
    match run(std::env::args().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            if !msg.is_empty() {
                eprintln!("error: {}", msg);
            }
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {}", msg);
            ExitCode::from(2)
        }
    }
}
