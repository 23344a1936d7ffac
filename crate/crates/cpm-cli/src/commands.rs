//! The six pipeline operations behind the `cpm` binary. Each one reads a
//! resolved [`RunConfig`], touches only the paths it is handed, writes its
//! artifacts plus a provenance manifest into the output directory, and
//! returns the library's error type so the binary can map categories to
//! exit codes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cpm_core::dataset::{
    read_examples, read_pairs, write_attributions, write_estimates, write_examples, write_pairs,
    EstimateRecord,
};
use cpm_core::error::{CoreError, Result};
use cpm_core::eval::{
    concept_association, icace_targets, macro_f1, macro_f1_from_predictions, BenchReport,
    DistMetric, ErrorStats,
};
use cpm_core::explain::{
    fit_label_table, fit_probability_table, ApproxEstimator, CpmHiEstimator, CpmInEstimator,
    Debiaser, EffectVector, Explainer, GoldConcepts, RandomEstimator, SLearner, SourceStrategy,
};
use cpm_core::model::{argmax, EncoderModel};
use cpm_core::rng::mix;
use cpm_core::scm::{
    build_pairs, build_true_pairs, generate_dataset, CounterfactualPair, Example, VocabLayout,
};
use cpm_core::train::{train_blackbox, train_cpm, CpmKind, CpmTrainSetup, TrainOutcome};

use crate::config::RunConfig;
use crate::manifest::ManifestBuilder;

// ───────────────────────────── data directory layout ─────────────────────────────

// Seed streams for the three splits and the training pair build. Frozen:
// changing them changes every generated dataset.
const STREAM_TRAIN_SPLIT: u64 = 100;
const STREAM_DEV_SPLIT: u64 = 101;
const STREAM_TEST_SPLIT: u64 = 102;
const STREAM_TRAIN_PAIRS: u64 = 103;

/// Path conventions inside a generated data directory: each split has a
/// base-example file, a companion file holding the derived counterfactual
/// examples its pairs reference, and the pair file itself.
#[derive(Debug, Clone)]
pub struct DataDir {
    root: PathBuf,
}

impl DataDir {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn examples(&self, split: &str) -> PathBuf {
        self.root.join(format!("{split}.jsonl"))
    }

    pub fn derived(&self, split: &str) -> PathBuf {
        self.root.join(format!("{split}_cf.jsonl"))
    }

    pub fn pairs(&self, split: &str) -> PathBuf {
        self.root.join(format!("{split}_pairs.jsonl"))
    }

    /// Base examples plus the full resolution pool (bases ∪ derived).
    pub fn load_split(&self, split: &str) -> Result<(Vec<Example>, Vec<Example>)> {
        let bases = read_examples(&self.examples(split))?;
        let derived = read_examples(&self.derived(split))?;
        let mut pool = bases.clone();
        pool.extend(derived);
        Ok((bases, pool))
    }

    pub fn load_pairs(&self, split: &str, pool: &[Example]) -> Result<Vec<CounterfactualPair>> {
        read_pairs(&self.pairs(split), pool)
    }
}

/// Examples referenced by the pairs but absent from the split itself,
/// deduplicated in first-appearance order.
fn derived_examples(split: &[Example], pairs: &[CounterfactualPair]) -> Vec<Example> {
    let mut seen: std::collections::BTreeSet<&str> =
        split.iter().map(|e| e.id.as_str()).collect();
    let mut out = Vec::new();
    for pair in pairs {
        for ex in [&pair.base, &pair.counterfactual] {
            if seen.insert(&ex.id) {
                out.push(ex.clone());
            }
        }
    }
    out
}

fn load_model_checked(path: &Path, layout: &VocabLayout) -> Result<EncoderModel> {
    let model = EncoderModel::load(path)?;
    if model.cfg.vocab_size != layout.vocab_size() {
        return Err(CoreError::Config(format!(
            "{}: checkpoint vocabulary size {} does not match the config's token layout ({})",
            path.display(),
            model.cfg.vocab_size,
            layout.vocab_size()
        )));
    }
    Ok(model)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

// ───────────────────────────── generate ─────────────────────────────

/// Generates the three splits, their counterfactual pair files, and the
/// derived-example companions, then echoes the resolved config.
pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<()> {
    for (key, n) in [
        ("scm.n_train", cfg.scm.n_train),
        ("scm.n_dev", cfg.scm.n_dev),
        ("scm.n_test", cfg.scm.n_test),
    ] {
        if n == 0 {
            return Err(CoreError::Config(format!("{key} must be positive")));
        }
    }
    let scm = cfg.scm.scm_config();
    let seed = cfg.scm.seed;
    std::fs::create_dir_all(out)?;
    let resolved = cfg.to_toml()?;
    let mut manifest = ManifestBuilder::new("generate", &resolved, vec![seed]);
    let dir = DataDir::new(out);

    let train = generate_dataset(&scm, cfg.scm.n_train, mix(seed, STREAM_TRAIN_SPLIT, 0))?;
    let dev = generate_dataset(&scm, cfg.scm.n_dev, mix(seed, STREAM_DEV_SPLIT, 0))?;
    let test = generate_dataset(&scm, cfg.scm.n_test, mix(seed, STREAM_TEST_SPLIT, 0))?;
    let train_pairs =
        build_pairs(&train, cfg.scm.pair_strategy, &scm, mix(seed, STREAM_TRAIN_PAIRS, 0))?;
    let dev_pairs = build_true_pairs(&dev, &scm)?;
    let test_pairs = build_true_pairs(&test, &scm)?;

    for (split, examples, pairs) in [
        ("train", &train, &train_pairs),
        ("dev", &dev, &dev_pairs),
        ("test", &test, &test_pairs),
    ] {
        write_examples(&dir.examples(split), examples)?;
        write_examples(&dir.derived(split), &derived_examples(examples, pairs))?;
        write_pairs(&dir.pairs(split), pairs)?;
        for path in [dir.examples(split), dir.derived(split), dir.pairs(split)] {
            manifest.output(path);
        }
        println!("{split}: {} examples, {} pairs", examples.len(), pairs.len());
    }
    let config_path = out.join("resolved_config.toml");
    write_text(&config_path, &resolved)?;
    manifest.output(config_path);
    manifest.write(out)?;
    println!("wrote data to {}", out.display());
    Ok(())
}

// ───────────────────────────── training ─────────────────────────────

fn save_outcome(
    outcome: &TrainOutcome<EncoderModel>,
    out: &Path,
    stem: &str,
    manifest: &mut ManifestBuilder,
) -> Result<PathBuf> {
    let model_path = out.join(format!("{stem}.json"));
    let log_path = out.join(format!("{stem}_log.csv"));
    outcome.model.save(&model_path)?;
    write_text(&log_path, &outcome.log.to_csv())?;
    manifest.output(model_path.clone());
    manifest.output(log_path);
    Ok(model_path)
}

/// Trains the black-box classifier on gold labels.
pub fn cmd_train_blackbox(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let dir = DataDir::new(data);
    let train = read_examples(&dir.examples("train"))?;
    let dev = read_examples(&dir.examples("dev"))?;
    std::fs::create_dir_all(out)?;
    let resolved = cfg.to_toml()?;
    let mut manifest = ManifestBuilder::new("train-blackbox", &resolved, vec![cfg.train.seed]);
    manifest.input(&dir.examples("train"))?;
    manifest.input(&dir.examples("dev"))?;

    let outcome = train_blackbox(&cfg.model, &train, &dev, &cfg.train.train_config())?;
    let model_path = save_outcome(&outcome, out, "blackbox", &mut manifest)?;
    manifest.write(out)?;
    println!(
        "best dev macro-F1 {:.4} at step {}; saved {}",
        outcome.best_metric,
        outcome.best_step,
        model_path.display()
    );
    Ok(())
}

/// Trains a causal proxy model of the requested kind against a frozen
/// black-box checkpoint.
pub fn cmd_train_cpm(
    cfg: &RunConfig,
    kind: CpmKind,
    data: &Path,
    blackbox_path: &Path,
    out: &Path,
) -> Result<()> {
    let scm = cfg.scm.scm_config();
    let layout = VocabLayout::from_config(&scm);
    let blackbox = load_model_checked(blackbox_path, &layout)?;
    let dir = DataDir::new(data);
    let (train_bases, train_pool) = dir.load_split("train")?;
    let train_pairs = dir.load_pairs("train", &train_pool)?;
    let (dev_bases, dev_pool) = dir.load_split("dev")?;
    let dev_pairs = dir.load_pairs("dev", &dev_pool)?;

    std::fs::create_dir_all(out)?;
    let resolved = cfg.to_toml()?;
    let command = format!("train-cpm --kind {kind}");
    let mut manifest = ManifestBuilder::new(&command, &resolved, vec![cfg.train.seed]);
    manifest.input(blackbox_path)?;
    for split in ["train", "dev"] {
        manifest.input(&dir.examples(split))?;
        manifest.input(&dir.derived(split))?;
        manifest.input(&dir.pairs(split))?;
    }

    let setup = CpmTrainSetup {
        kind,
        blackbox: &blackbox,
        layout,
        k: scm.k,
        train_pairs: &train_pairs,
        source_pool: &train_bases,
        dev_pairs: &dev_pairs,
        dev_examples: &dev_bases,
    };
    let outcome = train_cpm(&setup, &cfg.train.loss_weights(), &cfg.train.train_config())?;
    let stem = match kind {
        CpmKind::In => "cpm_in",
        CpmKind::Hi => "cpm_hi",
    };
    let model_path = save_outcome(&outcome, out, stem, &mut manifest)?;
    manifest.write(out)?;
    println!(
        "best dev cosine effect error {:.4} at step {}; saved {}",
        outcome.best_metric,
        outcome.best_step,
        model_path.display()
    );
    Ok(())
}

// ───────────────────────────── evaluate ─────────────────────────────

/// Everything the benchmark estimators borrow.
struct EvalContext {
    blackbox: EncoderModel,
    cpm_in: Option<EncoderModel>,
    cpm_hi: Option<EncoderModel>,
    train_bases: Vec<Example>,
    train_pairs: Vec<CounterfactualPair>,
    layout: VocabLayout,
    k: usize,
}

static GOLD_CONCEPTS: GoldConcepts = GoldConcepts;

/// The estimator identifiers `evaluate` accepts.
pub const EXPLAINER_IDS: [&str; 10] = [
    "cpm-in",
    "cpm-hi-gold",
    "cpm-hi-random",
    "cpm-hi-probe",
    "cpm-hi-self",
    "slearner",
    "approx",
    "random",
    "cace",
    "ate",
];

impl EvalContext {
    fn cpm_in(&self) -> Result<&EncoderModel> {
        self.cpm_in
            .as_ref()
            .ok_or_else(|| CoreError::Config("explainer 'cpm-in' needs --cpm-in".into()))
    }

    fn cpm_hi(&self, id: &str) -> Result<&EncoderModel> {
        self.cpm_hi
            .as_ref()
            .ok_or_else(|| CoreError::Config(format!("explainer '{id}' needs --cpm-hi")))
    }

    fn build(&self, id: &str, seed: u64, cfg: &RunConfig) -> Result<Box<dyn Explainer + '_>> {
        let hi = |proxy, strategy| {
            CpmHiEstimator::new(proxy, &self.blackbox, &self.train_bases, strategy, self.k, seed)
        };
        Ok(match id {
            "cpm-in" => {
                Box::new(CpmInEstimator::new(self.cpm_in()?, &self.blackbox, self.layout))
            }
            "cpm-hi-gold" => Box::new(hi(self.cpm_hi(id)?, SourceStrategy::GoldLabel)?),
            "cpm-hi-random" => Box::new(hi(self.cpm_hi(id)?, SourceStrategy::Random)?),
            "cpm-hi-probe" => Box::new(hi(self.cpm_hi(id)?, SourceStrategy::ProbePredicted)?),
            // Self-explanation: the proxy answers about itself, so it also
            // replaces the black box in the factual term.
            "cpm-hi-self" => {
                let proxy = self.cpm_hi(id)?;
                Box::new(CpmHiEstimator::new(
                    proxy,
                    proxy,
                    &self.train_bases,
                    SourceStrategy::GoldLabel,
                    self.k,
                    seed,
                )?)
            }
            "slearner" => Box::new(SLearner::fit_to_model(
                &self.blackbox,
                &GOLD_CONCEPTS,
                &self.train_bases,
                Some(&self.train_pairs),
                self.k,
                &cfg.eval.slearner_config(),
            )?),
            "approx" => Box::new(ApproxEstimator::new(&self.blackbox, &self.train_bases, seed)),
            "random" => Box::new(RandomEstimator::new(&self.blackbox, &self.train_bases, seed)),
            "cace" => Box::new(cpm_core::explain::GroupEstimator::new(
                fit_probability_table(&self.train_pairs, &self.blackbox, cfg.eval.group_mode)?,
                "cace",
            )),
            "ate" => Box::new(cpm_core::explain::GroupEstimator::new(
                fit_label_table(&self.train_pairs, cfg.eval.group_mode)?,
                "ate",
            )),
            other => {
                return Err(CoreError::Config(format!(
                    "unknown explainer '{other}' (expected one of: {})",
                    EXPLAINER_IDS.join(", ")
                )))
            }
        })
    }
}

/// One estimator's answers over the pair set; `None` marks a skipped pair.
fn collect_answers(
    explainer: &dyn Explainer,
    pairs: &[CounterfactualPair],
) -> Result<Vec<Option<EffectVector>>> {
    pairs
        .iter()
        .map(|pair| match explainer.estimate(&pair.base, &pair.edit) {
            Ok(v) => Ok(Some(v)),
            Err(CoreError::NotFound(_)) => Ok(None),
            Err(e) => Err(e),
        })
        .collect()
}

/// Mean distance of cached answers from targets, with skip accounting.
fn stats_from_answers(
    targets: &[EffectVector],
    answers: &[Option<EffectVector>],
    metric: DistMetric,
) -> Result<ErrorStats> {
    let mut sum = 0.0;
    let mut n_evaluated = 0;
    let mut n_skipped = 0;
    for (target, answer) in targets.iter().zip(answers) {
        match answer {
            Some(estimate) => {
                sum += cpm_core::eval::dist(metric, target, estimate);
                n_evaluated += 1;
            }
            None => n_skipped += 1,
        }
    }
    if n_evaluated == 0 {
        return Err(CoreError::NotFound("the estimator answered none of the pairs".into()));
    }
    Ok(ErrorStats { mean: sum / n_evaluated as f64, n_evaluated, n_skipped })
}

/// Benchmarks the requested estimators on the test pairs and writes the
/// report, the per-pair estimate dump (first seed), and task metrics.
#[allow(clippy::too_many_arguments)]
pub fn cmd_evaluate(
    cfg: &RunConfig,
    data: &Path,
    blackbox_path: &Path,
    cpm_in_path: Option<&Path>,
    cpm_hi_path: Option<&Path>,
    out: &Path,
    explainer_override: Option<&[String]>,
    metric_override: Option<&str>,
) -> Result<()> {
    let explainers: Vec<String> = match explainer_override {
        Some(ids) => ids.to_vec(),
        None => cfg.eval.explainers.clone(),
    };
    if explainers.is_empty() {
        return Err(CoreError::Config("no explainers requested".into()));
    }
    for id in &explainers {
        if !EXPLAINER_IDS.contains(&id.as_str()) {
            return Err(CoreError::Config(format!(
                "unknown explainer '{id}' (expected one of: {})",
                EXPLAINER_IDS.join(", ")
            )));
        }
    }
    let metrics: Vec<DistMetric> = match metric_override {
        Some(name) => vec![name.parse()?],
        None => cfg.eval.parsed_metrics()?,
    };

    let scm = cfg.scm.scm_config();
    let layout = VocabLayout::from_config(&scm);
    let dir = DataDir::new(data);
    let (train_bases, train_pool) = dir.load_split("train")?;
    let train_pairs = dir.load_pairs("train", &train_pool)?;
    let (test_bases, test_pool) = dir.load_split("test")?;
    let test_pairs = dir.load_pairs("test", &test_pool)?;

    std::fs::create_dir_all(out)?;
    let resolved = cfg.to_toml()?;
    let mut manifest = ManifestBuilder::new("evaluate", &resolved, cfg.eval.seeds.clone());
    manifest.input(blackbox_path)?;
    for split in ["train", "test"] {
        manifest.input(&dir.examples(split))?;
        manifest.input(&dir.derived(split))?;
        manifest.input(&dir.pairs(split))?;
    }

    let blackbox = load_model_checked(blackbox_path, &layout)?;
    let cpm_in = match cpm_in_path {
        Some(p) => {
            manifest.input(p)?;
            Some(load_model_checked(p, &layout)?)
        }
        None => None,
    };
    let cpm_hi = match cpm_hi_path {
        Some(p) => {
            manifest.input(p)?;
            Some(load_model_checked(p, &layout)?)
        }
        None => None,
    };
    let ctx = EvalContext {
        blackbox,
        cpm_in,
        cpm_hi,
        train_bases,
        train_pairs,
        layout,
        k: scm.k,
    };

    // Ground truth: the black box's own effects — except for self-
    // explanation, where the proxy is its own reference model.
    let bb_targets = icace_targets(&ctx.blackbox, &test_pairs)?;
    let self_targets = if explainers.iter().any(|id| id == "cpm-hi-self") {
        Some(icace_targets(ctx.cpm_hi("cpm-hi-self")?, &test_pairs)?)
    } else {
        None
    };

    let mut report = BenchReport::default();
    let mut estimate_records: Vec<EstimateRecord> = Vec::new();
    for id in &explainers {
        let targets = match self_targets {
            Some(ref t) if id == "cpm-hi-self" => t,
            _ => &bb_targets,
        };
        let mut per_seed: Vec<(u64, Vec<Option<EffectVector>>)> = Vec::new();
        for &seed in &cfg.eval.seeds {
            let estimator = ctx.build(id, seed, cfg)?;
            per_seed.push((seed, collect_answers(estimator.as_ref(), &test_pairs)?));
        }
        for &metric in &metrics {
            let cells = per_seed
                .iter()
                .map(|(seed, answers)| {
                    stats_from_answers(targets, answers, metric).map(|s| (*seed, s))
                })
                .collect::<Result<Vec<_>>>()?;
            report.push_cell(id.clone(), metric, &cells)?;
        }
        // Dump the first seed's raw estimates for inspection.
        let (_, first_answers) = &per_seed[0];
        for (pair, answer) in test_pairs.iter().zip(first_answers) {
            if let Some(delta) = answer {
                estimate_records.push(EstimateRecord {
                    pair_id: pair.pair_id(),
                    explainer: id.clone(),
                    edit: pair.edit,
                    delta: *delta,
                });
            }
        }
    }

    // Task performance of every provided checkpoint on the test bases.
    let mut task_metrics: BTreeMap<String, f64> = BTreeMap::new();
    task_metrics.insert("blackbox_macro_f1".into(), macro_f1(&ctx.blackbox, &test_bases)?);
    if let Some(proxy) = &ctx.cpm_in {
        task_metrics.insert("cpm_in_macro_f1".into(), macro_f1(proxy, &test_bases)?);
    }
    if let Some(proxy) = &ctx.cpm_hi {
        task_metrics.insert("cpm_hi_macro_f1".into(), macro_f1(proxy, &test_bases)?);
    }

    let report_json = out.join("report.json");
    let report_txt = out.join("report.txt");
    let estimates_path = out.join("estimates.jsonl");
    let metrics_path = out.join("metrics.json");
    write_text(&report_json, &report.to_json()?)?;
    write_text(&report_txt, &report.to_text())?;
    write_estimates(&estimates_path, &estimate_records)?;
    write_text(
        &metrics_path,
        &serde_json::to_string_pretty(&task_metrics)
            .map_err(|e| CoreError::Format(format!("cannot serialize metrics: {e}")))?,
    )?;
    for path in [report_json, report_txt, estimates_path, metrics_path] {
        manifest.output(path);
    }
    manifest.write(out)?;
    print!("{}", report.to_text());
    println!("wrote report to {}", out.display());
    Ok(())
}

// ───────────────────────────── attribute ─────────────────────────────

/// Concept-mediated integrated-gradients tables for examples read from a
/// file, written as JSONL plus a plain-text rendering.
pub fn cmd_attribute(
    cfg: &RunConfig,
    cpm_path: &Path,
    examples_path: &Path,
    limit: Option<usize>,
    out: &Path,
) -> Result<()> {
    let scm = cfg.scm.scm_config();
    let layout = VocabLayout::from_config(&scm);
    let proxy = load_model_checked(cpm_path, &layout)?;
    let examples = read_examples(examples_path)?;
    let selected = match limit {
        Some(n) => &examples[..n.min(examples.len())],
        None => &examples[..],
    };
    if selected.is_empty() {
        return Err(CoreError::Usage(format!(
            "{}: no examples to attribute",
            examples_path.display()
        )));
    }

    std::fs::create_dir_all(out)?;
    let resolved = cfg.to_toml()?;
    let mut manifest = ManifestBuilder::new("attribute", &resolved, vec![]);
    manifest.input(cpm_path)?;
    manifest.input(examples_path)?;

    let mut tables = Vec::with_capacity(selected.len());
    let mut text = String::new();
    for ex in selected {
        let table = cpm_core::attribution::attribution_table(&proxy, ex, scm.k, &cfg.ig)?;
        text.push_str(&table.to_text(&ex.tokens));
        text.push('\n');
        tables.push(table);
    }
    let jsonl_path = out.join("attributions.jsonl");
    let text_path = out.join("attributions.txt");
    write_attributions(&jsonl_path, &tables)?;
    write_text(&text_path, &text)?;
    manifest.output(jsonl_path.clone());
    manifest.output(text_path);
    manifest.write(out)?;
    println!("wrote {} attribution tables to {}", tables.len(), jsonl_path.display());
    Ok(())
}

// ───────────────────────────── debias ─────────────────────────────

/// Before/after report of neutralizing one concept's hidden site.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct DebiasReport {
    pub concept: usize,
    /// Cramér's V between predictions and the concept's gold values.
    pub association_before: f64,
    pub association_after: f64,
    pub macro_f1_before: f64,
    pub macro_f1_after: f64,
    pub n_examples: usize,
}

/// Severs one concept's influence on an interchange proxy's predictions and
/// measures the association and task-performance change on the test split.
pub fn cmd_debias(
    cfg: &RunConfig,
    cpm_path: &Path,
    data: &Path,
    concept: usize,
    out: &Path,
) -> Result<()> {
    let scm = cfg.scm.scm_config();
    if concept >= scm.k {
        return Err(CoreError::Usage(format!(
            "concept {concept} out of range for k = {}",
            scm.k
        )));
    }
    let layout = VocabLayout::from_config(&scm);
    let proxy = load_model_checked(cpm_path, &layout)?;
    let dir = DataDir::new(data);
    let pool = read_examples(&dir.examples("train"))?;
    let test = read_examples(&dir.examples("test"))?;

    std::fs::create_dir_all(out)?;
    let resolved = cfg.to_toml()?;
    let seed = cfg.eval.seeds[0];
    let mut manifest = ManifestBuilder::new("debias", &resolved, vec![seed]);
    manifest.input(cpm_path)?;
    manifest.input(&dir.examples("train"))?;
    manifest.input(&dir.examples("test"))?;

    let debiaser = Debiaser::new(&proxy, &pool, scm.k, seed)?;
    let mut before = Vec::with_capacity(test.len());
    let mut after = Vec::with_capacity(test.len());
    let mut gold = Vec::with_capacity(test.len());
    for ex in &test {
        before.push(argmax(&proxy.probs(&ex.tokens)?));
        after.push(debiaser.predict(ex, concept)?);
        gold.push(ex.label);
    }
    let report = DebiasReport {
        concept,
        association_before: concept_association(&before, &test, concept)?,
        association_after: concept_association(&after, &test, concept)?,
        macro_f1_before: macro_f1_from_predictions(&before, &gold)?,
        macro_f1_after: macro_f1_from_predictions(&after, &gold)?,
        n_examples: test.len(),
    };
    let report_path = out.join("debias_report.json");
    write_text(
        &report_path,
        &serde_json::to_string_pretty(&report)
            .map_err(|e| CoreError::Format(format!("cannot serialize report: {e}")))?,
    )?;
    manifest.output(report_path.clone());
    manifest.write(out)?;
    println!(
        "concept {}: association {:.4} → {:.4}, macro-F1 {:.4} → {:.4} (n = {})",
        report.concept,
        report.association_before,
        report.association_after,
        report.macro_f1_before,
        report.macro_f1_after,
        report.n_examples
    );
    println!("wrote {}", report_path.display());
    Ok(())
}
