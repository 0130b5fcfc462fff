//! Dataset-level runs: synthesis, per-scene segmentation and evaluation,
//! calibrated-vs-uncalibrated comparison by bias mode, and parameter sweeps.
//!
//! Label maps leaving this module use global ids: 0 is background and
//! vocabulary id `c` is written as `c + 1`.

use std::collections::BTreeMap;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{segment, SegmentOutput};
use crate::config::{MetricsConfig, RunConfig};
use crate::elbo::StrategyKind;
use crate::metrics::{aggregate, evaluate, EvalReport};
use crate::toyscene::{
    base_scene_spec, bias_variants, generate_scene, BiasMode, ClassVocabulary, Scene, SceneSpec, DEFAULT_DIM,
    DEFAULT_RARITY,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    /// Number of base scenes.
    pub scenes: usize,
    /// Emit the unbiased scene plus one variant per bias mode for every base.
    pub bias_suite: bool,
    pub data_seed: u64,
    pub vocab_dim: usize,
    pub rarity: f64,
    pub vocab_seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            scenes: 10,
            bias_suite: true,
            data_seed: 0,
            vocab_dim: DEFAULT_DIM,
            rarity: DEFAULT_RARITY,
            vocab_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub vocab: ClassVocabulary,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn synthesize(spec: DatasetSpec) -> Result<Self> {
        if spec.scenes == 0 {
            return Err(Error::Config("a dataset needs at least one scene".into()));
        }
        let vocab = ClassVocabulary::standard(spec.vocab_dim, spec.rarity, spec.vocab_seed)?;
        let mut specs = Vec::new();
        for i in 0..spec.scenes {
            let base = base_scene_spec(&vocab, i, spec.data_seed)?;
            if spec.bias_suite {
                specs.extend(bias_variants(&base));
            } else {
                specs.push(base);
            }
        }
        Self::from_specs(spec, vocab, &specs)
    }

    /// Regenerates every scene from its spec.
    pub fn from_specs(spec: DatasetSpec, vocab: ClassVocabulary, specs: &[SceneSpec]) -> Result<Self> {
        vocab.validate()?;
        if specs.is_empty() {
            return Err(Error::Config("a dataset needs at least one scene".into()));
        }
        let mut names = std::collections::HashSet::new();
        for s in specs {
            if !names.insert(s.name.as_str()) {
                return Err(Error::Scene(format!("duplicate scene name `{}`", s.name)));
            }
        }
        let scenes = specs.iter().map(|s| generate_scene(s, &vocab)).collect::<Result<_>>()?;
        Ok(Self { spec, vocab, scenes })
    }

    pub fn scene_specs(&self) -> Vec<SceneSpec> {
        self.scenes.iter().map(|s| s.spec.clone()).collect()
    }

    /// Largest global label id any map of this dataset can hold.
    pub fn max_label(&self) -> usize {
        self.vocab.len()
    }
}

/// Scene-local labels (`i + 1` = i-th candidate) to global labels.
pub fn to_global(labels: &Array2<usize>, classes: &[usize]) -> Array2<usize> {
    labels.mapv(|l| if l == 0 { 0 } else { classes[l - 1] + 1 })
}

pub fn ground_truth(scene: &Scene) -> Array2<usize> {
    to_global(&scene.label_map(), &scene.classes)
}

pub fn declared_labels(scene: &Scene) -> Vec<usize> {
    scene.classes.iter().map(|c| c + 1).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneResult {
    pub name: String,
    pub mode: BiasMode,
    /// Candidate classes as vocabulary ids.
    pub classes: Vec<usize>,
    pub output: SegmentOutput,
    pub prediction: Array2<usize>,
    pub report: EvalReport,
}

pub fn run_scene(scene: &Scene, vocab: &ClassVocabulary, cfg: &RunConfig) -> Result<SceneResult> {
    let output = segment(scene, vocab, cfg)?;
    let prediction = to_global(&output.posterior.label_mask, &scene.classes);
    let report = evaluate(&prediction, &ground_truth(scene), &declared_labels(scene), cfg.metrics)?;
    Ok(SceneResult {
        name: scene.spec.name.clone(),
        mode: scene.spec.bias.mode,
        classes: scene.classes.clone(),
        output,
        prediction,
        report,
    })
}

/// Runs `f` on a pool of `threads` workers (all cores when `None`).
pub fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Segments and scores every scene. Output order follows the dataset and
/// does not depend on the worker count.
pub fn run_dataset(ds: &Dataset, cfg: &RunConfig) -> Result<Vec<SceneResult>> {
    cfg.validate()?;
    with_pool(cfg.threads, || {
        ds.scenes
            .par_iter()
            .map(|s| run_scene(s, &ds.vocab, cfg))
            .collect::<Result<Vec<_>>>()
    })?
}

pub fn aggregate_results(results: &[SceneResult]) -> Result<EvalReport> {
    let reports: Vec<EvalReport> = results.iter().map(|r| r.report.clone()).collect();
    aggregate(&reports)
}

/// Scores predicted label maps against ground truth, matched by scene name.
/// Every ground-truth scene needs a prediction and vice versa.
pub fn evaluate_label_sets(
    pred: &BTreeMap<String, Array2<usize>>,
    gt: &BTreeMap<String, Array2<usize>>,
    options: MetricsConfig,
) -> Result<(EvalReport, Vec<(String, EvalReport)>)> {
    if !gt.keys().any(|k| pred.contains_key(k)) {
        return Err(Error::Config("predictions and ground truth share no scene".into()));
    }
    let unmatched: Vec<String> = gt
        .keys()
        .filter(|k| !pred.contains_key(*k))
        .map(|k| format!("{k} (no prediction)"))
        .chain(pred.keys().filter(|k| !gt.contains_key(*k)).map(|k| format!("{k} (no ground truth)")))
        .collect();
    if !unmatched.is_empty() {
        return Err(Error::Config(format!("unmatched scenes: {}", unmatched.join(", "))));
    }
    let mut per_scene = Vec::with_capacity(gt.len());
    for (name, g) in gt {
        let mut declared: Vec<usize> = g.iter().copied().filter(|&l| l != 0).collect();
        declared.sort_unstable();
        declared.dedup();
        let r = evaluate(&pred[name], g, &declared, options)
            .map_err(|e| Error::Config(format!("scene {name}: {e}")))?;
        per_scene.push((name.clone(), r));
    }
    let reports: Vec<EvalReport> = per_scene.iter().map(|(_, r)| r.clone()).collect();
    Ok((aggregate(&reports)?, per_scene))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeComparison {
    pub mode: BiasMode,
    pub scenes: usize,
    pub calibrated: EvalReport,
    pub uncalibrated: EvalReport,
    /// Scenes where every rare class got `S = γ` and every common class `S = 1`.
    pub score_pattern_ok: usize,
    /// Scenes that mix rare and common classes.
    pub score_pattern_scenes: usize,
}

fn score_pattern(result: &SceneResult, vocab: &ClassVocabulary, gamma: f64) -> Result<Option<bool>> {
    let mut rare = false;
    let mut common = false;
    let mut ok = true;
    for (&c, &s) in result.classes.iter().zip(&result.output.scores.scores) {
        if vocab.entry(c)?.is_rare() {
            rare = true;
            ok &= s == gamma;
        } else {
            common = true;
            ok &= s == 1.0;
        }
    }
    Ok((rare && common).then_some(ok))
}

/// Calibrated vs. uncalibrated metrics per bias mode present in the dataset.
pub fn compare_modes(ds: &Dataset, cfg: &RunConfig) -> Result<Vec<ModeComparison>> {
    let mut calibrated_cfg = cfg.clone();
    calibrated_cfg.calibration.enabled = true;
    let mut uncalibrated_cfg = cfg.clone();
    uncalibrated_cfg.calibration.enabled = false;
    let cal = run_dataset(ds, &calibrated_cfg)?;
    let uncal = run_dataset(ds, &uncalibrated_cfg)?;

    let mut rows = Vec::new();
    for mode in BiasMode::ALL {
        let pick = |rs: &[SceneResult]| rs.iter().filter(|r| r.mode == mode).cloned().collect::<Vec<_>>();
        let (c, u) = (pick(&cal), pick(&uncal));
        if c.is_empty() {
            continue;
        }
        let mut ok = 0;
        let mut mixed = 0;
        for r in &c {
            if let Some(hit) = score_pattern(r, &ds.vocab, cfg.elbo.gamma)? {
                mixed += 1;
                ok += usize::from(hit);
            }
        }
        rows.push(ModeComparison {
            mode,
            scenes: c.len(),
            calibrated: aggregate_results(&c)?,
            uncalibrated: aggregate_results(&u)?,
            score_pattern_ok: ok,
            score_pattern_scenes: mixed,
        });
    }
    Ok(rows)
}

pub fn comparison_csv(rows: &[ModeComparison]) -> String {
    let mut out = String::from("mode,scenes,miou_calibrated,miou_uncalibrated,miou_delta,f1_calibrated,f1_uncalibrated,score_pattern\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}/{}\n",
            r.mode.name(),
            r.scenes,
            r.calibrated.miou,
            r.uncalibrated.miou,
            r.calibrated.miou - r.uncalibrated.miou,
            r.calibrated.f1,
            r.uncalibrated.f1,
            r.score_pattern_ok,
            r.score_pattern_scenes
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParam {
    Gamma,
    ElboSteps,
    ElboStrategy,
    AttentionRange,
    FixedS,
}

impl SweepParam {
    pub const ALL: [SweepParam; 5] = [
        SweepParam::Gamma,
        SweepParam::ElboSteps,
        SweepParam::ElboStrategy,
        SweepParam::AttentionRange,
        SweepParam::FixedS,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SweepParam::Gamma => "gamma",
            SweepParam::ElboSteps => "elbo-steps",
            SweepParam::ElboStrategy => "elbo-strategy",
            SweepParam::AttentionRange => "attention-range",
            SweepParam::FixedS => "fixed-s",
        }
    }

    pub fn default_values(&self) -> Vec<String> {
        let v: Vec<&str> = match self {
            SweepParam::Gamma => vec!["1", "1/2", "1/3", "1/4", "1/5", "1/6", "1/7", "1/8"],
            SweepParam::ElboSteps => vec!["1", "5", "20"],
            SweepParam::ElboStrategy => StrategyKind::ALL.iter().map(|k| k.name()).collect(),
            SweepParam::AttentionRange => vec!["1:small", "10:small", "10:middle", "10:large", "10:random"],
            SweepParam::FixedS => vec!["1/2", "1/3", "1/4"],
        };
        v.into_iter().map(String::from).collect()
    }

    /// `cfg` with this parameter set to `value`. Calibration is switched on.
    pub fn apply(&self, cfg: &RunConfig, value: &str) -> Result<RunConfig> {
        let mut c = cfg.clone();
        c.calibration.enabled = true;
        match self {
            SweepParam::Gamma => c.elbo.gamma = parse_fraction(value)?,
            SweepParam::FixedS => c.calibration.fixed_s = Some(parse_fraction(value)?),
            SweepParam::ElboSteps => {
                c.elbo.steps = value
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("`{value}` is not a step count")))?
            }
            SweepParam::ElboStrategy => c.elbo.strategy = value.trim().parse()?,
            SweepParam::AttentionRange => {
                let (steps, range, random) = parse_attention_range(value)?;
                if let Some(n) = steps {
                    c.attention.steps = n;
                }
                c.attention.range = range;
                c.attention.random = random;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

impl std::fmt::Display for SweepParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sweep parameter `{s}`")))
    }
}

/// `"1/3"`, `"0.25"` or `"1"`.
pub fn parse_fraction(s: &str) -> Result<f64> {
    let bad = || Error::Config(format!("`{s}` is not a number or fraction"));
    let v = match s.trim().split_once('/') {
        Some((n, d)) => {
            let n: f64 = n.trim().parse().map_err(|_| bad())?;
            let d: f64 = d.trim().parse().map_err(|_| bad())?;
            n / d
        }
        None => s.trim().parse().map_err(|_| bad())?,
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(bad())
    }
}

/// `[steps:]name` with a named strategy range, or `[steps:]lo-hi`.
pub fn parse_attention_range(s: &str) -> Result<(Option<usize>, (f64, f64), bool)> {
    let bad = || Error::Config(format!("`{s}` is not an attention range (e.g. `10:small` or `0-0.2`)"));
    let (steps, rest) = match s.trim().split_once(':') {
        Some((n, r)) => (Some(n.trim().parse().map_err(|_| bad())?), r.trim()),
        None => (None, s.trim()),
    };
    if let Ok(kind) = rest.parse::<StrategyKind>() {
        return Ok((steps, kind.nominal_range(), kind == StrategyKind::Random));
    }
    let (lo, hi) = rest.split_once('-').ok_or_else(bad)?;
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    Ok((steps, (lo, hi), false))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub report: EvalReport,
}

pub const BASELINE_LABEL: &str = "uncalibrated";

/// One full run per value, preceded by the uncalibrated baseline of `cfg`.
pub fn sweep(ds: &Dataset, cfg: &RunConfig, param: SweepParam, values: &[String]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config(format!("no values given for the {param} sweep")));
    }
    let configs = values.iter().map(|v| param.apply(cfg, v)).collect::<Result<Vec<_>>>()?;
    let mut baseline = cfg.clone();
    baseline.calibration.enabled = false;
    let mut rows = vec![SweepRow {
        value: BASELINE_LABEL.into(),
        report: aggregate_results(&run_dataset(ds, &baseline)?)?,
    }];
    for (v, c) in values.iter().zip(&configs) {
        rows.push(SweepRow {
            value: v.clone(),
            report: aggregate_results(&run_dataset(ds, c)?)?,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("value,miou,precision,f1\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.value, r.report.miou, r.report.precision, r.report.f1));
    }
    out
}
