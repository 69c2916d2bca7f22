use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    coefficient_of_variation, kendall_tau, performance_auc, performance_curve, HarnessError, PerformanceCurve,
    TrainConfig, TransferMethod, TEST_FRACTION,
};
use crate::baselines::{baseline_pipeline, pretrain_source, BaselineScore, Metric, PretrainConfig};
use crate::datasets::{subsample, train_test_split, LabeledDataset, Strategy, SubsampleSpec};
use crate::models::{InitDistribution, LossMode, ModelSpec};
use crate::optim::{process_steps, StepMeter};
use crate::pge::{estimate_with, rank_expectations, rank_sources, GradientExpectation, PgeConfig, Ranking};
use crate::rng;

fn default_strategy() -> Strategy {
    Strategy::PerClass
}

fn check_sources(sources: &[LabeledDataset], min: usize) -> Result<(), HarnessError> {
    if sources.len() < min {
        return Err(HarnessError::Config(format!(
            "need at least {min} sources, got {}",
            sources.len()
        )));
    }
    let mut names: Vec<&str> = sources.iter().map(LabeledDataset::name).collect();
    names.sort_unstable();
    if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
        return Err(HarnessError::Config(format!("duplicate source name `{}`", w[0])));
    }
    Ok(())
}

fn check_ratios(strategy: Strategy, ratios: &[f64]) -> Result<(), HarnessError> {
    if ratios.is_empty() {
        return Err(HarnessError::Config("no sampling ratios given".into()));
    }
    let lo = strategy.min_ratio();
    match ratios.iter().find(|&&r| !(r >= lo - 1e-12 && r <= 1.0)) {
        Some(r) => Err(HarnessError::Config(format!(
            "ratio {r} outside [{lo}, 1] for {strategy:?} subsampling"
        ))),
        None => Ok(()),
    }
}

fn gaps_in_order(ranking: &Ranking, sources: &[LabeledDataset]) -> Vec<f64> {
    sources
        .iter()
        .map(|s| ranking.gap_of(s.name()).expect("every source is ranked"))
        .collect()
}

fn owned_names(ranking: &Ranking) -> Vec<String> {
    ranking.names().into_iter().map(str::to_owned).collect()
}

fn estimate_all(
    sources: &[LabeledDataset],
    spec: &ModelSpec,
    pge: &PgeConfig,
) -> Result<Vec<GradientExpectation<f64>>, HarnessError> {
    Ok(sources
        .par_iter()
        .map(|s| estimate_with::<f64>(s, spec, pge))
        .collect::<Result<Vec<_>, _>>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilityConfig {
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    pub ratios: Vec<f64>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    pub seed: u64,
}

fn default_repeats() -> usize {
    100
}

/// One (ratio, repeat) subset of the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityCell {
    pub ratio: f64,
    pub repeat: usize,
    pub subset_size: usize,
    /// Gaps in the order the sources were given.
    pub gaps: Vec<f64>,
    pub ranking: Vec<String>,
    pub ranking_matches: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceStability {
    pub source: String,
    pub full_gap: f64,
    /// Largest `|full gap - subset gap|` over every cell.
    pub epsilon: f64,
    pub mean_gap: f64,
    /// Coefficient of variation of the subset gaps; absent when they average
    /// to zero.
    pub cv: Option<f64>,
    pub per_ratio_mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub target: String,
    pub strategy: Strategy,
    pub ratios: Vec<f64>,
    pub repeats: usize,
    pub full_ranking: Vec<String>,
    pub sources: Vec<SourceStability>,
    pub cells: Vec<StabilityCell>,
    pub all_rankings_match: bool,
    pub max_cv: Option<f64>,
    pub schwarz_checks: usize,
    pub schwarz_violations: usize,
}

/// Re-rank the sources against many seeded subsets of the target and
/// measure how far each gap drifts from its full-target value.
pub fn evaluate_stability(
    sources: &[LabeledDataset],
    target: &LabeledDataset,
    spec: &ModelSpec,
    pge: &PgeConfig,
    cfg: &StabilityConfig,
) -> Result<StabilityReport, HarnessError> {
    check_sources(sources, 2)?;
    check_ratios(cfg.strategy, &cfg.ratios)?;
    if cfg.repeats == 0 {
        return Err(HarnessError::Config("repeats must be positive".into()));
    }
    let source_pges = estimate_all(sources, spec, pge)?;
    let full = rank_expectations(&source_pges, &estimate_with::<f64>(target, spec, pge)?)?;
    let full_ranking = owned_names(&full);
    let full_gaps = gaps_in_order(&full, sources);
    let mut schwarz_checks = full.entries.len();
    let mut schwarz_violations = full.entries.iter().filter(|e| !e.schwarz.holds()).count();

    let grid: Vec<(usize, usize)> = (0..cfg.ratios.len())
        .flat_map(|r| (0..cfg.repeats).map(move |k| (r, k)))
        .collect();
    let results = grid
        .par_iter()
        .map(|&(r, k)| {
            let subset = subsample(
                target,
                &SubsampleSpec {
                    strategy: cfg.strategy,
                    ratio: cfg.ratios[r],
                    seed: rng::derive(cfg.seed, &[r as u64, k as u64]),
                },
            )?;
            let ranking = rank_expectations(&source_pges, &estimate_with::<f64>(&subset, spec, pge)?)?;
            Ok((subset.len(), ranking))
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;

    let mut cells = Vec::with_capacity(grid.len());
    for (&(r, k), (size, ranking)) in grid.iter().zip(results) {
        schwarz_checks += ranking.entries.len();
        schwarz_violations += ranking.entries.iter().filter(|e| !e.schwarz.holds()).count();
        let names = owned_names(&ranking);
        cells.push(StabilityCell {
            ratio: cfg.ratios[r],
            repeat: k,
            subset_size: size,
            gaps: gaps_in_order(&ranking, sources),
            ranking_matches: names == full_ranking,
            ranking: names,
        });
    }

    let per_source = sources
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let gaps: Vec<f64> = cells.iter().map(|c| c.gaps[i]).collect();
            let per_ratio_mean = cfg
                .ratios
                .iter()
                .map(|&ratio| {
                    let v: Vec<f64> = cells.iter().filter(|c| c.ratio == ratio).map(|c| c.gaps[i]).collect();
                    v.iter().sum::<f64>() / v.len() as f64
                })
                .collect();
            SourceStability {
                source: s.name().to_owned(),
                full_gap: full_gaps[i],
                epsilon: gaps.iter().map(|g| (g - full_gaps[i]).abs()).fold(0.0, f64::max),
                mean_gap: gaps.iter().sum::<f64>() / gaps.len() as f64,
                cv: coefficient_of_variation(&gaps),
                per_ratio_mean,
            }
        })
        .collect::<Vec<_>>();

    let max_cv = per_source
        .iter()
        .map(|s| s.cv)
        .try_fold(0.0f64, |m, cv| cv.map(|c| m.max(c)));
    Ok(StabilityReport {
        target: target.name().to_owned(),
        strategy: cfg.strategy,
        ratios: cfg.ratios.clone(),
        repeats: cfg.repeats,
        full_ranking,
        all_rankings_match: cells.iter().all(|c| c.ranking_matches),
        sources: per_source,
        cells,
        max_cv,
        schwarz_checks,
        schwarz_violations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReliabilityConfig {
    pub pretrain: PretrainConfig,
    pub linear_probe: TrainConfig,
    pub fine_tune: TrainConfig,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    pub ratios: Vec<f64>,
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceTransfer {
    pub source: String,
    pub gap: f64,
    pub schwarz_holds: bool,
    /// Coefficient of variation of the gap over the target-train subsets used
    /// for the performance curves.
    pub gap_cv: Option<f64>,
    pub pretrain_accuracy: f64,
    pub lp_curve: PerformanceCurve,
    pub ft_curve: PerformanceCurve,
    pub lp_auc: f64,
    pub ft_auc: f64,
    pub lp_final_accuracy: f64,
    pub ft_final_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub target: String,
    /// In ascending gap order.
    pub sources: Vec<SourceTransfer>,
    pub gap_ranking: Vec<String>,
    pub lp_ranking: Vec<String>,
    pub ft_ranking: Vec<String>,
    /// Agreement between ascending gap and descending AUC (+1 is perfect).
    pub tau_lp: f64,
    pub tau_ft: f64,
    /// The same agreement against final-ratio accuracy instead of AUC.
    pub tau_lp_final: f64,
    pub tau_ft_final: f64,
    pub schwarz_violations: usize,
}

impl TransferReport {
    fn tau(&self, perf: impl Fn(&SourceTransfer) -> f64) -> Result<f64, HarnessError> {
        let neg_gap: Vec<f64> = self.sources.iter().map(|s| -s.gap).collect();
        let p: Vec<f64> = self.sources.iter().map(perf).collect();
        kendall_tau(&neg_gap, &p)
    }

    /// Recompute `(tau_lp, tau_ft)` from the stored per-source entries.
    pub fn rederive_taus(&self) -> Result<(f64, f64), HarnessError> {
        Ok((self.tau(|s| s.lp_auc)?, self.tau(|s| s.ft_auc)?))
    }
}

fn descending_by(sources: &[SourceTransfer], key: impl Fn(&SourceTransfer) -> f64) -> Vec<String> {
    let mut v: Vec<&SourceTransfer> = sources.iter().collect();
    v.sort_by(|a, b| key(b).total_cmp(&key(a)).then_with(|| a.source.cmp(&b.source)));
    v.into_iter().map(|s| s.source.clone()).collect()
}

/// Rank sources by gap, measure their actual transfer performance by
/// pretraining and linear-probe / fine-tune curves, and correlate the two.
pub fn evaluate_reliability(
    sources: &[LabeledDataset],
    target: &LabeledDataset,
    spec: &ModelSpec,
    pge: &PgeConfig,
    cfg: &ReliabilityConfig,
) -> Result<TransferReport, HarnessError> {
    check_sources(sources, 2)?;
    check_ratios(cfg.strategy, &cfg.ratios)?;
    if cfg.ratios.len() < 2 {
        return Err(HarnessError::Config(
            "performance curves need at least two ratios".into(),
        ));
    }
    if cfg.linear_probe.method != TransferMethod::LinearProbe || cfg.fine_tune.method != TransferMethod::FineTune {
        return Err(HarnessError::Config(
            "`linear_probe` and `fine_tune` must use their matching methods".into(),
        ));
    }
    let ranking = rank_sources::<f64>(sources, target, spec, pge)?;
    let (train, test) = train_test_split(target, TEST_FRACTION, cfg.split_seed)?;

    let source_pges = estimate_all(sources, spec, pge)?;
    let subset_gaps = cfg
        .ratios
        .par_iter()
        .enumerate()
        .map(|(k, &ratio)| {
            let sub = subsample(
                &train,
                &SubsampleSpec {
                    strategy: cfg.strategy,
                    ratio,
                    seed: rng::derive(cfg.split_seed, &[k as u64]),
                },
            )?;
            let r = rank_expectations(&source_pges, &estimate_with::<f64>(&sub, spec, pge)?)?;
            Ok(gaps_in_order(&r, sources))
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;

    let meter = StepMeter::new();
    let mut entries = sources
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let pre = pretrain_source(s, spec, &cfg.pretrain, &meter)?;
            let lp_curve = performance_curve(
                &pre.state,
                &train,
                &test,
                cfg.strategy,
                &cfg.ratios,
                &cfg.linear_probe,
                &meter,
            )?;
            let ft_curve = performance_curve(
                &pre.state,
                &train,
                &test,
                cfg.strategy,
                &cfg.ratios,
                &cfg.fine_tune,
                &meter,
            )?;
            let entry = ranking
                .entries
                .iter()
                .find(|e| e.name() == s.name())
                .expect("every source is ranked");
            let gaps: Vec<f64> = subset_gaps.iter().map(|g| g[i]).collect();
            Ok(SourceTransfer {
                source: s.name().to_owned(),
                gap: entry.gap.value,
                schwarz_holds: entry.schwarz.holds(),
                gap_cv: coefficient_of_variation(&gaps),
                pretrain_accuracy: pre.train_accuracy,
                lp_auc: performance_auc(&lp_curve)?,
                ft_auc: performance_auc(&ft_curve)?,
                lp_final_accuracy: lp_curve.final_accuracy().expect("non-empty"),
                ft_final_accuracy: ft_curve.final_accuracy().expect("non-empty"),
                lp_curve,
                ft_curve,
            })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let order = owned_names(&ranking);
    entries.sort_by_key(|e| order.iter().position(|n| *n == e.source));

    let mut report = TransferReport {
        target: target.name().to_owned(),
        gap_ranking: order,
        lp_ranking: descending_by(&entries, |s| s.lp_auc),
        ft_ranking: descending_by(&entries, |s| s.ft_auc),
        schwarz_violations: entries.iter().filter(|e| !e.schwarz_holds).count(),
        sources: entries,
        tau_lp: 0.0,
        tau_ft: 0.0,
        tau_lp_final: 0.0,
        tau_ft_final: 0.0,
    };
    (report.tau_lp, report.tau_ft) = report.rederive_taus()?;
    report.tau_lp_final = report.tau(|s| s.lp_final_accuracy)?;
    report.tau_ft_final = report.tau(|s| s.ft_final_accuracy)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EfficiencyConfig {
    pub pretrain: PretrainConfig,
    #[serde(default = "all_metrics")]
    pub metrics: Vec<Metric>,
}

fn all_metrics() -> Vec<Metric> {
    Metric::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineEfficiency {
    pub metric: Metric,
    /// Sources whose baseline run included a pretraining phase.
    pub pretrained_sources: usize,
    pub optimizer_steps: u64,
    pub scores: Vec<BaselineScore>,
}

/// Deterministic part of the efficiency comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub target: String,
    pub sources: usize,
    /// Optimizer steps observed process-wide while the PGE ranking ran.
    pub pge_optimizer_steps: u64,
    pub pge_ranking: Vec<String>,
    pub baselines: Vec<BaselineEfficiency>,
}

/// Wall-clock measurements; kept apart from the report because they differ
/// between runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyTimings {
    pub pge_seconds: f64,
    pub baseline_seconds: Vec<(Metric, f64)>,
    /// Fastest baseline time divided by the PGE time.
    pub min_speedup: f64,
}

/// Time the PGE ranking against every baseline pipeline, each including the
/// source pretraining it requires.
pub fn evaluate_efficiency(
    sources: &[LabeledDataset],
    target: &LabeledDataset,
    spec: &ModelSpec,
    pge: &PgeConfig,
    cfg: &EfficiencyConfig,
) -> Result<(EfficiencyReport, EfficiencyTimings), HarnessError> {
    check_sources(sources, 2)?;
    if cfg.metrics.is_empty() {
        return Err(HarnessError::Config("no baseline metrics selected".into()));
    }
    let before = process_steps();
    let start = Instant::now();
    let ranking = rank_sources::<f64>(sources, target, spec, pge)?;
    let pge_seconds = start.elapsed().as_secs_f64();
    let pge_optimizer_steps = process_steps() - before;

    let mut baselines = Vec::new();
    let mut baseline_seconds = Vec::new();
    for &metric in &cfg.metrics {
        let meter = StepMeter::new();
        let start = Instant::now();
        let scores = baseline_pipeline(metric, sources, target, spec, &cfg.pretrain, &meter)?;
        baseline_seconds.push((metric, start.elapsed().as_secs_f64()));
        baselines.push(BaselineEfficiency {
            metric,
            pretrained_sources: scores.iter().filter(|s| s.pretrain_steps > 0).count(),
            optimizer_steps: meter.steps(),
            scores,
        });
    }
    let fastest = baseline_seconds.iter().map(|b| b.1).fold(f64::INFINITY, f64::min);
    Ok((
        EfficiencyReport {
            target: target.name().to_owned(),
            sources: sources.len(),
            pge_optimizer_steps,
            pge_ranking: owned_names(&ranking),
            baselines,
        },
        EfficiencyTimings {
            pge_seconds,
            baseline_seconds,
            min_speedup: fastest / pge_seconds.max(f64::MIN_POSITIVE),
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "default_init")]
    pub init: InitDistribution,
}

fn default_restarts() -> usize {
    crate::pge::DEFAULT_RESTARTS
}

fn default_init() -> InitDistribution {
    InitDistribution::FanInGaussian
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeDispersion {
    pub mode: LossMode,
    /// Source ranking per master seed.
    pub rankings: Vec<Vec<String>>,
    /// Gaps per master seed, in the order the sources were given.
    pub gaps: Vec<Vec<f64>>,
    pub mean_pairwise_tau: f64,
    /// `1 - mean_pairwise_tau`; zero when every seed agrees.
    pub dispersion: f64,
    pub invariant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub target: String,
    pub sources: Vec<String>,
    pub seeds: Vec<u64>,
    pub supervised: ModeDispersion,
    pub unsupervised: ModeDispersion,
    pub unsupervised_not_worse: bool,
}

fn mode_dispersion(
    sources: &[LabeledDataset],
    target: &LabeledDataset,
    spec: &ModelSpec,
    mode: LossMode,
    cfg: &AblationConfig,
) -> Result<ModeDispersion, HarnessError> {
    let runs = cfg
        .seeds
        .iter()
        .map(|&seed| {
            let pge = PgeConfig {
                mode,
                restarts: cfg.restarts,
                batch_size: cfg.batch_size,
                master_seed: seed,
                init: cfg.init,
            };
            rank_sources::<f64>(sources, target, spec, &pge)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let gaps: Vec<Vec<f64>> = runs.iter().map(|r| gaps_in_order(r, sources)).collect();
    let rankings: Vec<Vec<String>> = runs.iter().map(owned_names).collect();
    let mut taus = Vec::new();
    for a in 0..gaps.len() {
        for b in a + 1..gaps.len() {
            taus.push(kendall_tau(&gaps[a], &gaps[b])?);
        }
    }
    let mean = if taus.is_empty() {
        1.0
    } else {
        taus.iter().sum::<f64>() / taus.len() as f64
    };
    Ok(ModeDispersion {
        mode,
        invariant: rankings.windows(2).all(|w| w[0] == w[1]),
        rankings,
        gaps,
        mean_pairwise_tau: mean,
        dispersion: 1.0 - mean,
    })
}

/// Compare how much the source ranking moves across master seeds under the
/// supervised and the unsupervised loss.
pub fn evaluate_ablation(
    sources: &[LabeledDataset],
    target: &LabeledDataset,
    spec: &ModelSpec,
    cfg: &AblationConfig,
) -> Result<AblationReport, HarnessError> {
    check_sources(sources, 2)?;
    if cfg.seeds.len() < 2 {
        return Err(HarnessError::Config("ablation needs at least two master seeds".into()));
    }
    let supervised = mode_dispersion(sources, target, spec, LossMode::Supervised, cfg)?;
    let unsupervised = mode_dispersion(sources, target, spec, LossMode::Unsupervised, cfg)?;
    Ok(AblationReport {
        target: target.name().to_owned(),
        sources: sources.iter().map(|s| s.name().to_owned()).collect(),
        seeds: cfg.seeds.clone(),
        unsupervised_not_worse: unsupervised.dispersion <= supervised.dispersion,
        supervised,
        unsupervised,
    })
}
