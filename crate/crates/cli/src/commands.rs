use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use pge_core::baselines::{
    leep, nce, pretrain_source, score_pretrained, BaselineScore, FeatureMatrix, Metric, PretrainConfig, Pretrained,
    PseudoLabelMatrix,
};
use pge_core::datasets::{LabeledDataset, Strategy};
use pge_core::harness::{
    evaluate_ablation, evaluate_efficiency, evaluate_reliability, evaluate_stability, AblationReport, EfficiencyReport,
    PerformanceCurve, StabilityReport, TransferReport,
};
use pge_core::models::{Head, ModelSpec};
use pge_core::optim::StepMeter;
use pge_core::pge::{estimate_with, rank_expectations, spec_for, GradientExpectation, PgeArtifact, Ranking};

use crate::cache::{write_atomic, Cache};
use crate::config::{content_hash, RunConfig};
use crate::error::{CliError, Context};
use crate::record::{append_record, parse_records, ResultRecord, RESULTS_FILE};

/// Evaluation suites runnable from `evaluate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    Stability,
    Reliability,
    Efficiency,
    Ablation,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Stability => "stability",
            Suite::Reliability => "reliability",
            Suite::Efficiency => "efficiency",
            Suite::Ablation => "ablation",
        }
    }
}

/// Flag values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

/// A validated config plus the directories it resolves to.
#[derive(Debug)]
pub struct Session {
    pub config: RunConfig,
    pub base_dir: PathBuf,
    pub out_dir: PathBuf,
    pub cache: Cache,
    pub hash: String,
}

impl Session {
    /// Read, override and validate; nothing is computed or written.
    pub fn open(config_path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let mut config = RunConfig::read(config_path)?;
        if let Some(seed) = overrides.seed {
            config.pge.master_seed = seed;
        }
        let base_dir = match config_path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        config.validate(&base_dir)?;
        let out_dir = overrides.out.clone().unwrap_or_else(|| base_dir.join(&config.out_dir));
        let cache = Cache::for_out_dir(&out_dir);
        let hash = config.hash();
        Ok(Self {
            config,
            base_dir,
            out_dir,
            cache,
            hash,
        })
    }

    fn target(&self) -> Result<LabeledDataset, CliError> {
        self.config.target.load(&self.base_dir, &self.config.preprocess)
    }

    fn sources(&self) -> Result<Vec<LabeledDataset>, CliError> {
        self.config
            .sources
            .iter()
            .map(|s| s.load(&self.base_dir, &self.config.preprocess))
            .collect()
    }

    fn write(&self, rel: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.out_dir.join(rel);
        write_atomic(&path, bytes).context(format!("writing `{}`", path.display()))?;
        Ok(path)
    }

    fn write_json(&self, rel: &str, value: &impl Serialize) -> Result<PathBuf, CliError> {
        let mut text = serde_json::to_string_pretty(value).context(rel)?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    fn record(&self, command: &str, payload: Value) -> Result<(), CliError> {
        let path = self.out_dir.join(RESULTS_FILE);
        append_record(&path, &ResultRecord::now(&self.hash, command, payload))
            .context(format!("appending to `{}`", path.display()))
    }

    fn section<'a, T>(&self, value: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
        value
            .as_ref()
            .ok_or_else(|| CliError::Validation(format!("config has no `[{name}]` section")))
    }

    /// Cached PGE for one dataset; also copies the binary into the output
    /// directory. Returns whether the cache already held it.
    fn expectation(
        &self,
        ds: &LabeledDataset,
        spec: &ModelSpec,
        role: &str,
    ) -> Result<(GradientExpectation<f64>, bool), CliError> {
        let pge = &self.config.pge;
        let batch = pge.batch_size_for(ds);
        let schedule = pge.seed_schedule();
        let key = content_hash(&json!({
            "dataset": ds.fingerprint(),
            "spec": spec_for(spec, ds, pge.mode),
            "mode": pge.mode,
            "init": pge.init,
            "batch_size": batch,
            "seeds": schedule,
        }));
        let cached = self
            .cache
            .load("pge", &key, "pge")
            .and_then(|b| PgeArtifact::from_bytes(&b).ok())
            .and_then(|a| a.into_expectation(ds.name(), pge.mode, batch, schedule).ok());
        let (ge, hit) = match cached {
            Some(ge) => (ge, true),
            None => {
                let ge = estimate_with::<f64>(ds, spec, pge).context(format!("estimating `{}`", ds.name()))?;
                self.cache
                    .store("pge", &key, "pge", &ge.to_bytes())
                    .context("writing PGE cache")?;
                (ge, false)
            }
        };
        self.write(&format!("pge/{role}/{}.pge", ds.name()), &ge.to_bytes())?;
        Ok((ge, hit))
    }

    /// Cached pretrained source model. Returns whether the cache held it.
    fn pretrained(
        &self,
        source: &LabeledDataset,
        spec: &ModelSpec,
        cfg: &PretrainConfig,
        meter: &StepMeter,
    ) -> Result<(Pretrained, bool), CliError> {
        let classifier = spec.with_head(Head::Classifier {
            num_classes: source.num_classes(),
        });
        let key = content_hash(&json!({
            "dataset": source.fingerprint(),
            "spec": classifier,
            "pretrain": cfg,
        }));
        let cached = self
            .cache
            .load("pretrained", &key, "json")
            .and_then(|b| serde_json::from_slice::<Pretrained>(&b).ok());
        if let Some(p) = cached {
            return Ok((p, true));
        }
        let p = pretrain_source(source, spec, cfg, meter).context(format!("pretraining on `{}`", source.name()))?;
        let bytes = serde_json::to_vec(&p).context("encoding pretrained state")?;
        self.cache
            .store("pretrained", &key, "json", &bytes)
            .context("writing pretrained cache")?;
        Ok((p, false))
    }
}

/// Ascending gap table, one row per source.
pub fn gap_table(ranking: &Ranking) -> String {
    let width = ranking.entries.iter().map(|e| e.name().len()).max().unwrap_or(0).max(6);
    let mut out = format!("{:<4}  {:<width$}  {:>22}  schwarz\n", "rank", "source", "gap");
    for (i, e) in ranking.entries.iter().enumerate() {
        let ok = if e.schwarz.holds() { "ok" } else { "VIOLATED" };
        let _ = writeln!(out, "{:<4}  {:<width$}  {:>22?}  {ok}", i + 1, e.name(), e.gap.value);
    }
    out
}

pub fn estimate(s: &Session) -> Result<(), CliError> {
    let target = s.target()?;
    let sources = s.sources()?;
    let spec = s.config.model_spec(target.feature_dim());
    let (target_ge, target_hit) = s.expectation(&target, &spec, "target")?;
    let estimated = sources
        .par_iter()
        .map(|d| s.expectation(d, &spec, "sources"))
        .collect::<Result<Vec<_>, _>>()?;
    let hits = estimated.iter().filter(|e| e.1).count() + usize::from(target_hit);
    let source_ges: Vec<_> = estimated.into_iter().map(|e| e.0).collect();
    let ranking = rank_expectations(&source_ges, &target_ge).context("ranking sources")?;
    s.write_json("estimate.json", &ranking)?;
    eprintln!("PGE cache: {hits} of {} expectations reused", sources.len() + 1);
    println!(
        "target `{}`: {} restarts, {} loss",
        ranking.target,
        s.config.pge.restarts,
        serde_json::to_value(s.config.pge.mode)
            .context("mode")?
            .as_str()
            .unwrap_or("?")
    );
    print!("{}", gap_table(&ranking));
    let violations = ranking.entries.iter().filter(|e| !e.schwarz.holds()).count();
    s.record(
        "estimate",
        json!({
            "report": "estimate.json",
            "gaps": ranking.entries.iter().map(|e| json!({"source": e.name(), "gap": e.gap.value})).collect::<Vec<_>>(),
            "cache_hits": hits,
            "schwarz_violations": violations,
        }),
    )
}

pub fn evaluate(s: &Session, suite: Suite) -> Result<(), CliError> {
    let c = &s.config;
    match suite {
        Suite::Stability => s.section(&c.stability, "stability").map(|_| ())?,
        Suite::Reliability => s.section(&c.reliability, "reliability").map(|_| ())?,
        Suite::Efficiency => s.section(&c.efficiency, "efficiency").map(|_| ())?,
        Suite::Ablation => s.section(&c.ablation, "ablation").map(|_| ())?,
    }
    if c.sources.len() < 2 {
        return Err(CliError::Validation(format!(
            "sources: the {} suite needs at least two sources",
            suite.name()
        )));
    }
    let target = s.target()?;
    let sources = s.sources()?;
    let spec = c.model_spec(target.feature_dim());
    let ctx = format!("{} suite", suite.name());
    let payload = match suite {
        Suite::Stability => {
            let cfg = s.section(&c.stability, "stability")?;
            let rep = evaluate_stability(&sources, &target, &spec, &c.pge, cfg).context(&ctx)?;
            s.write_json("stability.json", &rep)?;
            s.write("curves/stability.csv", stability_csv(&rep).as_bytes())?;
            for src in &rep.sources {
                println!(
                    "{:<12} full gap {:>12.6e}  epsilon {:>10.3e}  cv {}",
                    src.source,
                    src.full_gap,
                    src.epsilon,
                    src.cv.map_or("n/a".into(), |v| format!("{:.4}", v))
                );
            }
            println!(
                "rankings identical at every ratio: {}; max cv {}; Schwarz violations {}/{}",
                rep.all_rankings_match,
                rep.max_cv.map_or("n/a".into(), |v| format!("{v:.4}")),
                rep.schwarz_violations,
                rep.schwarz_checks
            );
            json!({
                "report": "stability.json",
                "all_rankings_match": rep.all_rankings_match,
                "max_cv": rep.max_cv,
                "schwarz_violations": rep.schwarz_violations,
            })
        }
        Suite::Reliability => {
            let cfg = s.section(&c.reliability, "reliability")?;
            let rep = evaluate_reliability(&sources, &target, &spec, &c.pge, cfg).context(&ctx)?;
            s.write_json("reliability.json", &rep)?;
            for src in &rep.sources {
                s.write(
                    &format!("curves/{}_lp.csv", src.source),
                    src.lp_curve.to_csv().as_bytes(),
                )?;
                s.write(
                    &format!("curves/{}_ft.csv", src.source),
                    src.ft_curve.to_csv().as_bytes(),
                )?;
                println!(
                    "{:<12} gap {:>12.6e}  lp auc {:.4}  ft auc {:.4}",
                    src.source, src.gap, src.lp_auc, src.ft_auc
                );
            }
            println!("kendall tau: linear probe {}, fine-tune {}", rep.tau_lp, rep.tau_ft);
            json!({
                "report": "reliability.json",
                "tau_lp": rep.tau_lp,
                "tau_ft": rep.tau_ft,
                "schwarz_violations": rep.schwarz_violations,
            })
        }
        Suite::Efficiency => {
            let cfg = s.section(&c.efficiency, "efficiency")?;
            let (rep, timings) = evaluate_efficiency(&sources, &target, &spec, &c.pge, cfg).context(&ctx)?;
            s.write_json("efficiency.json", &rep)?;
            let mut csv = format!("pipeline,seconds,speedup\npge,{:?},1.0\n", timings.pge_seconds);
            for (m, t) in &timings.baseline_seconds {
                let _ = writeln!(csv, "{m},{t:?},{:?}", t / timings.pge_seconds.max(f64::MIN_POSITIVE));
            }
            s.write("efficiency_timings.csv", csv.as_bytes())?;
            println!(
                "pge: {} optimizer steps, {:.3} s",
                rep.pge_optimizer_steps, timings.pge_seconds
            );
            for (b, (_, t)) in rep.baselines.iter().zip(&timings.baseline_seconds) {
                println!(
                    "{:<8} {} optimizer steps over {} pretrained sources, {:.3} s",
                    b.metric, b.optimizer_steps, b.pretrained_sources, t
                );
            }
            println!("PGE is {:.2}x faster than the fastest baseline", timings.min_speedup);
            json!({
                "report": "efficiency.json",
                "timings": "efficiency_timings.csv",
                "pge_optimizer_steps": rep.pge_optimizer_steps,
                "min_speedup": timings.min_speedup,
            })
        }
        Suite::Ablation => {
            let cfg = s.section(&c.ablation, "ablation")?;
            let rep = evaluate_ablation(&sources, &target, &spec, cfg).context(&ctx)?;
            s.write_json("ablation.json", &rep)?;
            for m in [&rep.supervised, &rep.unsupervised] {
                println!(
                    "{:<13} dispersion {:.4}  mean pairwise tau {:.4}  invariant {}",
                    serde_json::to_value(m.mode).context("mode")?.as_str().unwrap_or("?"),
                    m.dispersion,
                    m.mean_pairwise_tau,
                    m.invariant
                );
            }
            println!("unsupervised dispersion <= supervised: {}", rep.unsupervised_not_worse);
            json!({
                "report": "ablation.json",
                "supervised_dispersion": rep.supervised.dispersion,
                "unsupervised_dispersion": rep.unsupervised.dispersion,
                "unsupervised_not_worse": rep.unsupervised_not_worse,
            })
        }
    };
    s.record(&format!("evaluate {}", suite.name()), payload)
}

/// Mean gap per ratio, one column per source.
fn stability_csv(rep: &StabilityReport) -> String {
    let mut out = String::from("ratio");
    for src in &rep.sources {
        out.push(',');
        out.push_str(&src.source);
    }
    out.push('\n');
    for (k, r) in rep.ratios.iter().enumerate() {
        out.push_str(&format!("{r:?}"));
        for src in &rep.sources {
            out.push_str(&format!(",{:?}", src.per_ratio_mean[k]));
        }
        out.push('\n');
    }
    out
}

/// Scores of one metric over every source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub metric: Metric,
    pub higher_is_better: bool,
    pub target: String,
    pub scores: Vec<BaselineScore>,
}

fn orientation(metric: Metric) -> &'static str {
    if metric.higher_is_better() {
        "higher is better"
    } else {
        "lower is better"
    }
}

pub fn baseline(s: &Session, metric: Metric) -> Result<(), CliError> {
    let cfg = s.section(&s.config.pretrain, "pretrain")?;
    let target = s.target()?;
    let sources = s.sources()?;
    let spec = s.config.model_spec(target.feature_dim());
    let meter = StepMeter::new();
    let rows = sources
        .par_iter()
        .map(|src| {
            let (pre, hit) = s.pretrained(src, &spec, cfg, &meter)?;
            let score =
                score_pretrained(metric, &pre.state, &target).context(format!("{metric} on `{}`", src.name()))?;
            let row = BaselineScore {
                source: src.name().to_owned(),
                score,
                source_train_accuracy: pre.train_accuracy,
                pretrain_steps: pre.steps,
            };
            Ok((row, hit))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let report = BaselineReport {
        metric,
        higher_is_better: metric.higher_is_better(),
        target: target.name().to_owned(),
        scores: rows.iter().map(|r| r.0.clone()).collect(),
    };
    let file = format!("baseline_{metric}.json");
    s.write_json(&file, &report)?;
    let trained = rows.iter().filter(|r| !r.1).count();
    let width = rows.iter().map(|r| r.0.source.len()).max().unwrap_or(0).max(6);
    println!("{metric} on `{}` ({})", report.target, orientation(metric));
    println!("{:<width$}  {:>22}  {:>9}  pretraining", "source", "score", "src acc");
    for (r, hit) in &rows {
        let how = if *hit {
            "cached".to_owned()
        } else {
            format!("trained, {} steps", r.pretrain_steps)
        };
        println!(
            "{:<width$}  {:>22?}  {:>9.4}  {how}",
            r.source, r.score, r.source_train_accuracy
        );
    }
    s.record(
        &format!("baseline {metric}"),
        json!({
            "report": file,
            "scores": report.scores.iter().map(|r| json!({"source": r.source, "score": r.score})).collect::<Vec<_>>(),
            "pretrained_this_run": trained,
            "optimizer_steps_this_run": meter.steps(),
        }),
    )
}

/// Score a fixture file directly. The CSV has columns `f0..f{d-1},label`;
/// for LEEP and NCE the feature columns are read as each row's source-class
/// distribution.
pub fn baseline_fixture(metric: Metric, path: &Path) -> Result<f64, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read fixture `{}`: {e}", path.display())))?;
    let what = format!("fixture `{}`", path.display());
    let f = FeatureMatrix::from_csv(&text).context(&what)?;
    let score = if metric.uses_features() {
        match metric {
            Metric::Hscore => pge_core::baselines::hscore(&f),
            Metric::Logme => pge_core::baselines::logme(&f),
            _ => pge_core::baselines::gbc(&f),
        }
        .context(&what)?
    } else {
        let theta = PseudoLabelMatrix::new(f.cols(), f.values().to_vec()).context(&what)?;
        match metric {
            Metric::Leep => leep(&theta, f.labels()),
            _ => nce(&theta.argmax(), f.labels()),
        }
        .context(&what)?
    };
    println!("{metric} = {score:?} ({})", orientation(metric));
    Ok(score)
}

/// Re-parse every file under `out_dir` with the reader for its type and
/// print a one-line summary per file.
pub fn report(out_dir: &Path) -> Result<(), CliError> {
    if !out_dir.is_dir() {
        return Err(CliError::Validation(format!(
            "no output directory at `{}`",
            out_dir.display()
        )));
    }
    let mut files = Vec::new();
    collect_files(out_dir, &mut files).context(format!("listing `{}`", out_dir.display()))?;
    files.sort();
    let mut problems = Vec::new();
    for path in &files {
        let rel = path
            .strip_prefix(out_dir)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/");
        match summarize(path, &rel) {
            Ok(Some(summary)) => println!("ok     {rel}: {summary}"),
            Ok(None) => {}
            Err(e) => {
                println!("FAILED {rel}: {e}");
                problems.push(rel);
            }
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "{} file(s) failed to parse: {}",
            problems.len(),
            problems.join(", ")
        )))
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

fn parse_json<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T, String> {
    serde_json::from_str(text).map_err(|e| e.to_string())
}

fn summarize(path: &Path, rel: &str) -> Result<Option<String>, String> {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    if name.starts_with('.') {
        return Ok(None);
    }
    let ext = path
        .extension()
        .map(|e| e.to_string_lossy().into_owned())
        .unwrap_or_default();
    let bytes = fs::read(path).map_err(|e| e.to_string())?;
    if ext == "pge" {
        let a = PgeArtifact::from_bytes(&bytes).map_err(|e| e.to_string())?;
        return Ok(Some(format!(
            "PGE of length {} over {} restarts",
            a.vector.len(),
            a.restarts
        )));
    }
    let text = String::from_utf8(bytes).map_err(|e| e.to_string())?;
    let summary = match (name.as_str(), ext.as_str()) {
        (RESULTS_FILE, _) => {
            let records = parse_records(&text)?;
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for r in &records {
                *counts.entry(r.command.as_str()).or_default() += 1;
            }
            let parts: Vec<String> = counts.iter().map(|(c, n)| format!("{c} x{n}")).collect();
            format!("{} records ({})", records.len(), parts.join(", "))
        }
        ("estimate.json", _) => {
            let r: Ranking = parse_json(&text)?;
            let best = r
                .entries
                .first()
                .map_or("none".into(), |e| format!("`{}` at {:e}", e.name(), e.gap.value));
            format!("{} sources ranked against `{}`, best {best}", r.entries.len(), r.target)
        }
        ("stability.json", _) => {
            let r: StabilityReport = parse_json(&text)?;
            format!(
                "{} cells, rankings match {}, max cv {}",
                r.cells.len(),
                r.all_rankings_match,
                r.max_cv.map_or("n/a".into(), |v| format!("{v:.4}"))
            )
        }
        ("reliability.json", _) => {
            let r: TransferReport = parse_json(&text)?;
            format!("tau lp {} ft {}", r.tau_lp, r.tau_ft)
        }
        ("efficiency.json", _) => {
            let r: EfficiencyReport = parse_json(&text)?;
            format!(
                "{} baselines, PGE optimizer steps {}",
                r.baselines.len(),
                r.pge_optimizer_steps
            )
        }
        ("ablation.json", _) => {
            let r: AblationReport = parse_json(&text)?;
            format!(
                "dispersion supervised {:.4} unsupervised {:.4}",
                r.supervised.dispersion, r.unsupervised.dispersion
            )
        }
        (n, "json") if n.starts_with("baseline_") => {
            let r: BaselineReport = parse_json(&text)?;
            format!("{} scores for {}", r.scores.len(), r.metric)
        }
        (_, "json") if rel.contains("pretrained/") => {
            let p: Pretrained = parse_json(&text)?;
            format!("pretrained state, train accuracy {:.4}", p.train_accuracy)
        }
        (_, "json") => {
            parse_json::<Value>(&text)?;
            "JSON".into()
        }
        (n, "csv") if n.ends_with("_lp.csv") || n.ends_with("_ft.csv") => {
            let c = PerformanceCurve::from_csv(Strategy::PerClass, &text).map_err(|e| e.to_string())?;
            format!("curve with {} points", c.points().len())
        }
        (_, "csv") => {
            let (cols, rows) = numeric_table(&text)?;
            format!("table with {cols} columns and {rows} rows")
        }
        _ => return Ok(None),
    };
    Ok(Some(summary))
}

/// Header plus rectangular rows; every cell after the first column must be
/// a number.
fn numeric_table(text: &str) -> Result<(usize, usize), String> {
    let mut lines = text.lines();
    let cols = lines.next().ok_or("empty table")?.split(',').count();
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != cols {
            return Err(format!("row {} has {} cells, header has {cols}", i + 1, cells.len()));
        }
        for c in &cells[1..] {
            c.trim()
                .parse::<f64>()
                .map_err(|e| format!("row {}: `{c}`: {e}", i + 1))?;
        }
        rows += 1;
    }
    Ok((cols, rows))
}
