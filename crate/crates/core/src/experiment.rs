//! End-to-end runs: benchmark generation, language model pretraining, replicate
//! training, protocol evaluation and the ablation suites.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{reject, Result};
use crate::evalkit::{answer_accuracy, run_protocol, MetricReport, ProtocolReport};
use crate::lmhead::{pretrain_tiny_lm, HeadMode, PretrainReport, TinyLm};
use crate::model::{LossWeights, Model};
use crate::params::{derive_seed, ParamStore};
use crate::synthdata::{make_eval_split, make_split, make_target_domains, DomainSpec, Sample};
use crate::textproto::Vocabulary;
use crate::train::{fit, FitSummary, LossReport};

pub type Lm = (TinyLm, ParamStore<f32>);

/// Meta training split, in-domain held-out split and shifted target splits.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub meta: Vec<Sample>,
    pub heldout_spec: DomainSpec,
    pub heldout: Vec<Sample>,
    pub targets: Vec<(DomainSpec, Vec<Sample>)>,
}

impl Benchmark {
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        let d = &cfg.data;
        let meta = make_split(&d.meta, d.meta_samples, d.balanced)?;
        let held_spec = DomainSpec {
            name: format!("{}-heldout", d.meta.name),
            base_seed: derive_seed(d.meta.base_seed, "heldout"),
            ..d.meta.clone()
        };
        let heldout = make_split(&held_spec, d.heldout_samples, d.balanced)?;
        let targets = make_target_domains(&d.meta, d.target_domains)?
            .into_iter()
            .map(|spec| {
                let s = make_eval_split(&spec, d.target_samples, d.target_live_fraction)?;
                Ok((spec, s))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { meta, heldout_spec: held_spec, heldout, targets })
    }

    pub fn target_domains(&self) -> Vec<(String, &[Sample])> {
        self.targets.iter().map(|(spec, s)| (spec.name.clone(), s.as_slice())).collect()
    }
}

/// Pretrains and freezes the language model described by `cfg`.
pub fn pretrain_lm(cfg: &RunConfig, vocab: &Vocabulary) -> Result<(Lm, PretrainReport)> {
    let (lm, store, report) =
        pretrain_tiny_lm::<f32>(vocab, &cfg.lm, &cfg.lm_pretrain, cfg.qformer.num_queries, derive_seed(cfg.seed, "lm"))?;
    Ok(((lm, store), report))
}

pub struct TrainedRun {
    pub seed: u64,
    pub model: Model<f32>,
    pub summary: FitSummary,
}

/// Builds a fresh model for replicate `seed`.
pub fn fresh_model(cfg: &RunConfig, vocab: &Vocabulary, lm: Option<&Lm>, seed: u64) -> Result<Model<f32>> {
    let mcfg = cfg.model_config();
    let lm = if mcfg.uses_lm() { lm.cloned() } else { None };
    Model::new(&mcfg, vocab, lm, derive_seed(seed, "model-init"))
}

pub fn train_replicate(
    cfg: &RunConfig,
    bench: &Benchmark,
    vocab: &Vocabulary,
    lm: Option<&Lm>,
    seed: u64,
    on_step: impl FnMut(&LossReport),
) -> Result<TrainedRun> {
    let mut model = fresh_model(cfg, vocab, lm, seed)?;
    let summary = fit(&cfg.train, &mut model, &bench.meta, seed, on_step)?;
    Ok(TrainedRun { seed, model, summary })
}

/// Target-domain protocol over trained replicates.
pub fn evaluate_runs(cfg: &RunConfig, runs: &[TrainedRun], bench: &Benchmark) -> Result<ProtocolReport> {
    let models: Vec<(u64, &Model<f32>)> = runs.iter().map(|r| (r.seed, &r.model)).collect();
    run_protocol(&models, &bench.target_domains(), &cfg.eval)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Branches,
    HeadMode,
    Granularity,
    StylePromptCount,
    LambdaSweep,
    QformerDepth,
    BinaryMode,
    LlmFreeTiming,
}

impl Suite {
    pub const ALL: [Suite; 8] = [
        Suite::Branches,
        Suite::HeadMode,
        Suite::Granularity,
        Suite::StylePromptCount,
        Suite::LambdaSweep,
        Suite::QformerDepth,
        Suite::BinaryMode,
        Suite::LlmFreeTiming,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Branches => "branches",
            Suite::HeadMode => "head_mode",
            Suite::Granularity => "granularity",
            Suite::StylePromptCount => "style_prompt_count",
            Suite::LambdaSweep => "lambda_sweep",
            Suite::QformerDepth => "qformer_depth",
            Suite::BinaryMode => "binary_mode",
            Suite::LlmFreeTiming => "llm_free_timing",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| crate::Error::Rejected(format!("unknown suite `{s}`; expected one of {}", Self::ALL.map(Suite::name).join(", "))))
    }
}

fn mark(b: bool) -> &'static str {
    if b {
        "✓"
    } else {
        "−"
    }
}

/// Labelled configurations of one suite, all derived from `base`.
pub fn suite_configs(base: &RunConfig, suite: Suite) -> Result<Vec<(String, RunConfig)>> {
    let mut rows = Vec::new();
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match suite {
        Suite::Branches => {
            for (cb, sb, cue) in [(false, false, false), (true, false, false), (false, true, false), (true, true, false), (true, true, true)] {
                let c = with(&|c| {
                    c.components.content_branch = cb;
                    c.components.style_branch = sb;
                    c.components.cue = cue;
                });
                rows.push((format!("CB {} SB {} Cue {}", mark(cb), mark(sb), mark(cue)), c));
            }
        }
        Suite::HeadMode => {
            for m in [HeadMode::FrozenLm, HeadMode::ClsHead] {
                rows.push((format!("{m:?}"), with(&|c| c.components.head_mode = m)));
            }
        }
        Suite::Granularity => {
            for g in [1u8, 2, 3] {
                rows.push((
                    format!("granularity {g}"),
                    with(&|c| {
                        c.data.meta.label_granularity = g;
                        c.lm_pretrain.coarse_options = true;
                    }),
                ));
            }
        }
        Suite::StylePromptCount => {
            for (n, label) in [(1, "style1"), (2, "style1+style2"), (3, "style1+style2+style3")] {
                rows.push((label.to_string(), with(&|c| c.text.style_questions = n)));
            }
        }
        Suite::LambdaSweep => {
            let grid = [
                (0.4, 0.4, 0.15, 0.05),
                (0.6, 0.2, 0.15, 0.05),
                (0.2, 0.6, 0.15, 0.05),
                (0.35, 0.35, 0.25, 0.05),
                (0.4, 0.4, 0.1, 0.1),
            ];
            for (a, b, cl, cu) in grid {
                rows.push((
                    format!("λ=({a}, {b}, {cl}, {cu})"),
                    with(&|c| c.train.weights = LossWeights { content: a, style: b, cls: cl, cue: cu }),
                ));
            }
        }
        Suite::QformerDepth => {
            for d in 1..=4 {
                rows.push((format!("depth {d}"), with(&|c| c.qformer.depth = d)));
            }
        }
        Suite::BinaryMode => {
            rows.push(("full".into(), base.clone()));
            rows.push((
                "binary, no style branch".into(),
                with(&|c| c.train.model_variant = crate::train::ModelVariant::NoStyle),
            ));
        }
        Suite::LlmFreeTiming => {
            rows.push(("full".into(), with(&|c| c.replicates = 1)));
        }
    }
    for (label, c) in &rows {
        c.validate().map_err(|e| crate::Error::Rejected(format!("suite row `{label}`: {e}")))?;
    }
    Ok(rows)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub report: MetricReport,
    pub per_seed_mean_hter: Vec<f64>,
    /// In-domain accuracy of the content (or binary) question, seed mean.
    pub content_accuracy: Option<f64>,
    /// `(mean, std)` inference seconds per sample.
    pub timing: Option<(f64, f64)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub suite: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_table(&self) -> String {
        let mut s = format!("suite: {}\n", self.suite);
        s += &format!("{:<28} {:>8} {:>8} {:>10} {:>10} {:>20}\n", "configuration", "HTER%", "AUC%", "TPR@FPR%", "answer%", "sec/sample");
        for r in &self.rows {
            let acc = r.content_accuracy.map(|a| format!("{:.2}", 100.0 * a)).unwrap_or_else(|| "-".into());
            let t = r.timing.map(|(m, sd)| format!("{m:.2e} ± {sd:.1e}")).unwrap_or_else(|| "-".into());
            s += &format!(
                "{:<28} {:>8.2} {:>8.2} {:>10.2} {:>10} {:>20}\n",
                r.label,
                100.0 * r.report.mean.hter,
                100.0 * r.report.mean.auc,
                100.0 * r.report.mean.tpr_at_fpr,
                acc,
                t
            );
        }
        s
    }
}

/// Mean and sample standard deviation of per-sample wall time of `f`.
pub fn time_per_sample(samples: &[Sample], mut f: impl FnMut(&Sample) -> Result<()>) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return reject("timing needs samples");
    }
    let mut t = Vec::with_capacity(samples.len());
    for s in samples {
        let start = Instant::now();
        f(s)?;
        t.push(start.elapsed().as_secs_f64());
    }
    let n = t.len() as f64;
    let mean = t.iter().sum::<f64>() / n;
    let var = t.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok((mean, var.sqrt()))
}

/// Shared state for running many configurations over one benchmark.
pub struct Runner<'a> {
    pub bench: &'a Benchmark,
    pub vocab: Vocabulary,
    lms: Vec<(String, Lm)>,
}

impl<'a> Runner<'a> {
    pub fn new(bench: &'a Benchmark) -> Self {
        Self { bench, vocab: Vocabulary::build(), lms: Vec::new() }
    }

    /// Pretrained language model for `cfg`, trained once per distinct setting.
    pub fn lm_for(&mut self, cfg: &RunConfig) -> Result<Option<&Lm>> {
        if !cfg.model_config().uses_lm() {
            return Ok(None);
        }
        let key = serde_json::to_string(&(&cfg.lm, &cfg.lm_pretrain, cfg.qformer.num_queries, cfg.seed))?;
        if !self.lms.iter().any(|(k, _)| *k == key) {
            let (lm, report) = pretrain_lm(cfg, &self.vocab)?;
            log::info!("pretrained language model: {:.2}% held-out accuracy in {} steps", 100.0 * report.heldout_token_accuracy, report.steps);
            self.lms.push((key.clone(), lm));
        }
        Ok(self.lms.iter().find(|(k, _)| *k == key).map(|(_, l)| l))
    }

    /// Trains every replicate of `cfg` and evaluates it.
    pub fn run(&mut self, label: &str, cfg: &RunConfig, with_accuracy: bool) -> Result<AblationRow> {
        let lm = self.lm_for(cfg)?.cloned();
        let mut runs = Vec::new();
        for seed in cfg.replicate_seeds() {
            log::info!("{label}: training replicate seed {seed}");
            runs.push(train_replicate(cfg, self.bench, &self.vocab, lm.as_ref(), seed, |_| {})?);
        }
        let protocol = evaluate_runs(cfg, &runs, self.bench)?;
        let mcfg = cfg.model_config();
        let content_accuracy = if with_accuracy && mcfg.content_branch {
            let q = mcfg.content_question();
            let mut acc = 0.0;
            for r in &runs {
                acc += answer_accuracy(&r.model, &self.bench.heldout, q)?;
            }
            Some(acc / runs.len() as f64)
        } else {
            None
        };
        Ok(AblationRow {
            label: label.into(),
            report: protocol.seed_mean.clone(),
            per_seed_mean_hter: protocol.per_seed.iter().map(|r| r.mean.hter).collect(),
            content_accuracy,
            timing: None,
        })
    }
}

/// Runs one ablation suite. The timing suite reports the full model with answer
/// decoding next to the language-model-free score path on the same weights.
pub fn run_ablation(base: &RunConfig, suite: Suite, bench: &Benchmark) -> Result<AblationTable> {
    let mut runner = Runner::new(bench);
    let mut rows = Vec::new();
    if suite == Suite::LlmFreeTiming {
        let cfg = &suite_configs(base, suite)?[0].1;
        let lm = runner.lm_for(cfg)?.cloned();
        let seed = cfg.seed;
        let run = train_replicate(cfg, bench, &runner.vocab, lm.as_ref(), seed, |_| {})?;
        let protocol = evaluate_runs(cfg, std::slice::from_ref(&run), bench)?;
        let n = cfg.eval.timing_samples.min(bench.heldout.len());
        let samples = &bench.heldout[..n];
        let full = time_per_sample(samples, |s| run.model.predict(&s.image, true).map(|_| ()))?;
        let mut stripped = run.model;
        stripped.strip_lm();
        let free = time_per_sample(samples, |s| stripped.score(&s.image).map(|_| ()))?;
        for (label, t) in [("full (answers decoded)", full), ("LLM-free (score only)", free)] {
            rows.push(AblationRow {
                label: label.into(),
                report: protocol.seed_mean.clone(),
                per_seed_mean_hter: vec![protocol.seed_mean.mean.hter],
                content_accuracy: None,
                timing: Some(t),
            });
        }
    } else {
        let with_acc = matches!(suite, Suite::HeadMode | Suite::Granularity | Suite::BinaryMode);
        for (label, cfg) in suite_configs(base, suite)? {
            rows.push(runner.run(&label, &cfg, with_acc)?);
        }
    }
    Ok(AblationTable { suite: suite.name().into(), rows })
}
