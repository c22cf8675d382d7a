use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use narrank::bench::run_bench;
use narrank::config::RunConfig;
use narrank::data::{read_jsonl, write_jsonl, ExposureLog};
use narrank::numerics::NumericsError;
use narrank::objectives::utility;
use narrank::pipeline::{self, StepSummary};
use narrank::simulator::World;
use narrank::train::TrainConfig;
use narrank::{ArGenerator, Checkpoint, Error, Evaluator, Generator};

#[derive(Debug)]
pub struct CliError(Error);

impl<E: Into<Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        Self(e.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl CliError {
    /// 1 usage or configuration, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> u8 {
        match &self.0 {
            Error::Config(_) => 1,
            Error::NumericFailure(_) | Error::Numerics(NumericsError::NonFinite { .. }) => 3,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn read_log(path: &Path) -> Result<Vec<ExposureLog>> {
    let file = File::open(path).map_err(|e| Error::Input(format!("cannot open {}: {e}", path.display())))?;
    let log = read_jsonl(BufReader::new(file)).map_err(|e| match e {
        Error::Data { line, msg } => Error::Data {
            line,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })?;
    if log.is_empty() {
        return Err(Error::Empty("exposure log").into());
    }
    Ok(log)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| Error::Input(format!("checkpoint {}: {e}", path.display())).into())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    write_text(path, &ck.to_text())
}

fn curve_csv(header: &str, rows: impl Iterator<Item = String>) -> String {
    let mut s = format!("{header}\n");
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    s
}

fn report_every(cfg: &TrainConfig, n: usize) -> usize {
    let steps = cfg.epochs * n.div_ceil(cfg.batch_size);
    (steps / 10).max(1)
}

pub fn simulate(cfg: &RunConfig) -> Result<()> {
    let world = World::new(cfg.world.clone())?;
    let sim = &cfg.simulate;
    let train = world.gen_log(sim.policy, 0, sim.train_requests, cfg.seed)?;
    let test = world.gen_log(
        sim.policy,
        sim.train_requests as u64,
        sim.test_requests,
        cfg.seed.wrapping_add(1),
    )?;
    for (log, path) in [(&train, &cfg.paths.train_log), (&test, &cfg.paths.test_log)] {
        let path = cfg.paths.resolve(path);
        let mut w = create(&path)?;
        write_jsonl(&mut w, log)?;
        w.flush()?;
        let positive = log
            .iter()
            .filter_map(|r| r.feedback.as_ref())
            .map(|f| Ok(cfg.utility.is_positive(utility(f, &cfg.utility)?)))
            .collect::<narrank::Result<Vec<bool>>>()?
            .into_iter()
            .filter(|&p| p)
            .count();
        eprintln!(
            "{}: {} requests, {:.3} positive",
            path.display(),
            log.len(),
            positive as f64 / log.len().max(1) as f64
        );
    }
    Ok(())
}

pub fn train_generator(cfg: &RunConfig) -> Result<()> {
    let log = read_log(&cfg.paths.resolve(&cfg.paths.train_log))?;
    let mut model = Generator::new(cfg.generator.clone())?;
    let every = report_every(&cfg.train, log.len());
    let curve = pipeline::train_generator(&mut model, &log, &cfg.train, &cfg.loss, &cfg.utility, |s| {
        if s.step % every == 0 {
            eprintln!("step {:>6} loss {:.4}", s.step, s.total);
        }
    })?;
    save(&model.to_checkpoint(), &cfg.paths.resolve(&cfg.paths.generator))?;
    write_text(
        &cfg.paths.out_dir.join("generator_loss.csv"),
        &curve_csv(StepSummary::CSV_HEADER, curve.iter().map(StepSummary::csv_row)),
    )?;
    eprintln!("{} steps", curve.len());
    Ok(())
}

pub fn train_evaluator(cfg: &RunConfig) -> Result<()> {
    let log = read_log(&cfg.paths.resolve(&cfg.paths.train_log))?;
    let mut ev = Evaluator::new(cfg.evaluator.clone())?;
    let curve = ev.train(&log, &cfg.evaluator_train)?;
    save(&ev.to_checkpoint(), &cfg.paths.resolve(&cfg.paths.evaluator))?;
    write_text(
        &cfg.paths.out_dir.join("evaluator_loss.csv"),
        &curve_csv("step,loss", curve.iter().enumerate().map(|(i, l)| format!("{i},{l}"))),
    )?;
    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
        eprintln!("{} steps, loss {first:.4} -> {last:.4}", curve.len());
    }
    Ok(())
}

pub fn train_ar(cfg: &RunConfig) -> Result<()> {
    let log = read_log(&cfg.paths.resolve(&cfg.paths.train_log))?;
    let mut model = ArGenerator::new(cfg.generator.clone())?;
    let every = report_every(&cfg.train, log.len());
    let curve = pipeline::train_ar(&mut model, &log, &cfg.train, |step, loss| {
        if step % every == 0 {
            eprintln!("step {step:>6} loss {loss:.4}");
        }
    })?;
    save(&model.to_checkpoint(), &cfg.paths.resolve(&cfg.paths.ar))?;
    write_text(
        &cfg.paths.out_dir.join("ar_loss.csv"),
        &curve_csv("step,loss", curve.iter().enumerate().map(|(i, l)| format!("{i},{l}"))),
    )?;
    Ok(())
}

pub fn generate(cfg: &RunConfig) -> Result<()> {
    let model = Generator::from_checkpoint(&load_checkpoint(&cfg.paths.resolve(&cfg.paths.generator))?)?;
    let ev = Evaluator::from_checkpoint(&load_checkpoint(&cfg.paths.resolve(&cfg.paths.evaluator))?)?;
    let test = read_log(&cfg.paths.resolve(&cfg.paths.test_log))?;
    let out = pipeline::generate(&model, &ev, &test, &cfg.decode)?;
    let path = cfg.paths.out_dir.join("slates.jsonl");
    let mut w = create(&path)?;
    for s in &out {
        serde_json::to_writer(&mut w, s).map_err(|e| Error::Input(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let mean = out.iter().map(|s| s.utility).sum::<f64>() / out.len() as f64;
    eprintln!("{}: {} slates, mean evaluator utility {mean:.4}", path.display(), out.len());
    Ok(())
}

pub fn evaluate(cfg: &RunConfig, oracle: bool) -> Result<()> {
    let model = Generator::from_checkpoint(&load_checkpoint(&cfg.paths.resolve(&cfg.paths.generator))?)?;
    let ev_path = cfg.paths.resolve(&cfg.paths.evaluator);
    let ev = if ev_path.exists() {
        Some(Evaluator::from_checkpoint(&load_checkpoint(&ev_path)?)?)
    } else {
        eprintln!("no evaluator at {}, skipping AUC, LogLoss and NDCG", ev_path.display());
        None
    };
    let world = if oracle { Some(World::new(cfg.world.clone())?) } else { None };
    let test = read_log(&cfg.paths.resolve(&cfg.paths.test_log))?;
    let m = model.config().m;
    let report = pipeline::evaluate(
        &model,
        ev.as_ref(),
        world.as_ref(),
        &test,
        &cfg.decode,
        &cfg.utility,
        &[m, 2 * m],
    )?;
    write_text(
        &cfg.paths.out_dir.join("report.csv"),
        &format!("{}\n{}\n", report.csv_header(), report.csv_row()),
    )?;
    println!("{report}");
    Ok(())
}

pub fn bench(cfg: &RunConfig) -> Result<()> {
    let nar = Generator::from_checkpoint(&load_checkpoint(&cfg.paths.resolve(&cfg.paths.generator))?)?;
    let ar = ArGenerator::from_checkpoint(&load_checkpoint(&cfg.paths.resolve(&cfg.paths.ar))?)?;
    let test = read_log(&cfg.paths.resolve(&cfg.paths.test_log))?;
    let report = run_bench(&nar, &ar, &test, &cfg.bench, &cfg.loss, &cfg.utility)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Input(e.to_string()))?;
    write_text(&cfg.paths.out_dir.join("bench.json"), &(json + "\n"))?;
    write_text(&cfg.paths.out_dir.join("bench_sweep.csv"), &report.sweep_csv())?;
    println!("{report}");
    Ok(())
}
