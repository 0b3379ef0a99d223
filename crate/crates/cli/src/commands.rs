//! Subcommand implementations.

use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use tfmt_core::gradcheck::{gradcheck as run_gradcheck, GradcheckConfig};
use tfmt_core::model::{predict, Head};
use tfmt_core::trainer::{fit, metric_log, teacher_pseudo_label, Datasets};
use tfmt_core::{
    audit_pseudo_labels, load_dataset, sentence_f1, serialize_aste_line, synth_corpus, triplet_prf,
    write_dataset, Ablations, AuditCounts, Checkpoint, LabeledSentence, Prf, TrainConfig, Triplet,
};

use crate::config::{merge, parse_list, ConfigFile};
use crate::error::{CliError, CliResult};
use crate::output::{self, csv_line, mean_std, prepare, seed_dir};
use crate::settings::{run_settings, synth_config, synth_config_text, train_config_text};
use crate::{AblateArgs, AuditArgs, EvalArgs, GradcheckArgs, SynthArgs, TrainArgs};

pub fn synth(args: &SynthArgs) -> CliResult<()> {
    let cfg = synth_config(args.config.as_deref(), args.seed)?;
    let out = &args.output.out;
    let files = [
        output::SOURCE_TRAIN,
        output::SOURCE_DEV,
        output::TARGET_UNLABELED,
        output::TARGET_TEST,
        "synth.cfg",
    ];
    prepare(out, &files, args.output.force)?;
    let corpus = synth_corpus(&cfg)?;
    for (name, split) in [
        (output::SOURCE_TRAIN, &corpus.source_train),
        (output::SOURCE_DEV, &corpus.source_dev),
        (output::TARGET_UNLABELED, &corpus.target_unlabeled),
        (output::TARGET_TEST, &corpus.target_test),
    ] {
        write_dataset(out.join(name), split)?;
    }
    output::write(&out.join("synth.cfg"), &synth_config_text(&cfg))?;
    info!(
        "wrote {} / {} / {} / {} sentences to {}",
        corpus.source_train.len(),
        corpus.source_dev.len(),
        corpus.target_unlabeled.len(),
        corpus.target_test.len(),
        out.display()
    );
    Ok(())
}

/// The four splits of a corpus directory.
pub struct Corpus {
    pub source_train: Vec<LabeledSentence>,
    pub source_dev: Vec<LabeledSentence>,
    pub target_unlabeled: Vec<LabeledSentence>,
    pub target_test: Vec<LabeledSentence>,
}

impl Corpus {
    pub fn load(dir: &Path) -> CliResult<Self> {
        let read = |name: &str| -> CliResult<Vec<LabeledSentence>> { Ok(load_dataset(dir.join(name))?) };
        Ok(Corpus {
            source_train: read(output::SOURCE_TRAIN)?,
            source_dev: read(output::SOURCE_DEV)?,
            target_unlabeled: read(output::TARGET_UNLABELED)?
                .iter()
                .map(LabeledSentence::strip_labels)
                .collect(),
            target_test: read(output::TARGET_TEST)?,
        })
    }

    pub fn datasets(&self) -> Datasets<'_> {
        Datasets {
            source_train: &self.source_train,
            source_dev: &self.source_dev,
            target_unlabeled: &self.target_unlabeled,
            target_test: &self.target_test,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub best_epoch: usize,
    pub dev_f1: f64,
    pub test_f1: f64,
}

pub const RUNS_HEADER: &str = "seed,best_epoch,dev_f1,test_f1";
pub const SUMMARY_HEADER: &str =
    "variant,mode,ablations,alpha,beta,seeds,dev_f1_mean,dev_f1_std,test_f1_mean,test_f1_std";

/// Fits every seed (concurrently) and writes `seed_<s>/metrics.csv` and
/// `seed_<s>/checkpoint.json` under `dir`.
pub fn run_seeds(corpus: &Corpus, cfg: &TrainConfig, seeds: &[u64], dir: &Path) -> CliResult<Vec<SeedResult>> {
    let data = corpus.datasets();
    seeds
        .par_iter()
        .map(|&seed| {
            let cfg = TrainConfig { seed, ..cfg.clone() };
            info!("fitting {} seed {seed}", cfg.variant);
            let out = fit(&data, &cfg)?;
            let sd = seed_dir(dir, seed);
            output::write(&sd.join("metrics.csv"), &metric_log(&out.history))?;
            out.checkpoint.save(sd.join("checkpoint.json"))?;
            Ok(SeedResult {
                seed,
                best_epoch: out.best_epoch,
                dev_f1: out.dev_f1,
                test_f1: out.test_f1,
            })
        })
        .collect()
}

fn runs_csv(results: &[SeedResult]) -> String {
    let mut s = format!("{RUNS_HEADER}\n");
    for r in results {
        s += &csv_line(&[
            r.seed.to_string(),
            r.best_epoch.to_string(),
            r.dev_f1.to_string(),
            r.test_f1.to_string(),
        ]);
    }
    s
}

fn stat_fields(results: &[SeedResult]) -> Vec<String> {
    let dev: Vec<f64> = results.iter().map(|r| r.dev_f1).collect();
    let test: Vec<f64> = results.iter().map(|r| r.test_f1).collect();
    let (dm, ds) = mean_std(&dev);
    let (tm, ts) = mean_std(&test);
    let seeds: Vec<String> = results.iter().map(|r| r.seed.to_string()).collect();
    vec![
        seeds.join(" "),
        dm.to_string(),
        ds.to_string(),
        tm.to_string(),
        ts.to_string(),
    ]
}

pub fn summary_row(cfg: &TrainConfig, results: &[SeedResult]) -> String {
    let mut fields = vec![
        cfg.variant.name().to_string(),
        cfg.mode.name().to_string(),
        cfg.ablations.label(),
        cfg.alpha.to_string(),
        cfg.beta.to_string(),
    ];
    fields.extend(stat_fields(results));
    csv_line(&fields)
}

fn seed_files(seeds: &[u64]) -> Vec<String> {
    seeds
        .iter()
        .flat_map(|&s| {
            let d = format!("seed_{s}");
            [format!("{d}/metrics.csv"), format!("{d}/checkpoint.json")]
        })
        .collect()
}

pub fn train(args: &TrainArgs) -> CliResult<()> {
    let (settings, file) = run_settings(args.config.as_deref(), &args.hyper, &args.seeds, args.ablate.as_deref())?;
    file.finish()?;
    let out = &args.output.out;
    let mut files = vec!["summary.csv".to_string(), "runs.csv".to_string(), "run.cfg".to_string()];
    files.extend(seed_files(&settings.seeds));
    let names: Vec<&str> = files.iter().map(String::as_str).collect();
    prepare(out, &names, args.output.force)?;
    let corpus = Corpus::load(&args.data)?;
    output::write(&out.join("run.cfg"), &train_config_text(&settings.train, &settings.seeds))?;
    let results = run_seeds(&corpus, &settings.train, &settings.seeds, out)?;
    output::write(&out.join("runs.csv"), &runs_csv(&results))?;
    let summary = format!("{SUMMARY_HEADER}\n{}", summary_row(&settings.train, &results));
    output::write(&out.join("summary.csv"), &summary)?;
    print!("{summary}");
    Ok(())
}

pub const EVAL_HEADER: &str = "metric,precision,recall,f1";

fn prf_row(name: &str, p: &Prf) -> String {
    csv_line(&[
        name.to_string(),
        p.precision.to_string(),
        p.recall.to_string(),
        p.f1.to_string(),
    ])
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    let out = &args.output.out;
    prepare(out, &["eval.csv", "predictions.txt"], args.output.force)?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let mode = ck.student.mode();
    if let Some(want) = args.mode {
        if want != mode {
            return Err(CliError::usage(format!(
                "checkpoint was trained in {} mode, not {}",
                mode.name(),
                want.name()
            )));
        }
    }
    let data = load_dataset(&args.data)?;
    if data.is_empty() {
        return Err(CliError::runtime(format!("{}: no sentences", args.data.display())));
    }
    let kappa = args.kappa.unwrap_or(ck.config.kappa);
    let params = if args.teacher { &ck.teacher } else { &ck.student };
    let head = ck.config.head();
    let mut preds = Vec::with_capacity(data.len());
    let mut golds = Vec::with_capacity(data.len());
    let mut lines = String::new();
    for ls in &data {
        let p = predict(params, ls.tokens(), head, kappa)?;
        let mut g: Vec<Triplet> = ls.triplets.iter().map(|t| mode.project(t)).collect();
        g.sort();
        lines += &serialize_aste_line(&LabeledSentence::new(ls.sentence.clone(), p.clone())?);
        lines.push('\n');
        preds.push(p);
        golds.push(g);
    }
    let pairs = |v: &[Vec<Triplet>]| -> Vec<Vec<_>> { v.iter().map(|ts| ts.iter().map(Triplet::pair).collect()).collect() };
    let mut report = format!("{EVAL_HEADER}\n");
    report += &prf_row("sentence", &sentence_f1(&preds, &golds)?);
    report += &prf_row("triplet", &triplet_prf(&preds, &golds)?);
    report += &prf_row("pair", &triplet_prf(&pairs(&preds), &pairs(&golds))?);
    output::write(&out.join("eval.csv"), &report)?;
    output::write(&out.join("predictions.txt"), &lines)?;
    print!("{report}");
    Ok(())
}

pub const AUDIT_HEADER: &str = "checkpoint,variant,eta,retained,correct,sentiment_error,words_mis_localized,error";

pub fn audit(args: &AuditArgs) -> CliResult<()> {
    let out = &args.output.out;
    prepare(out, &["audit.csv"], args.output.force)?;
    let data = load_dataset(&args.data)?;
    if data.iter().all(|ls| ls.triplets.is_empty()) {
        return Err(CliError::runtime(format!(
            "{}: audit needs gold labels",
            args.data.display()
        )));
    }
    let mut csv = format!("{AUDIT_HEADER}\n");
    for path in &args.checkpoint {
        let ck = Checkpoint::load(path)?;
        if ck.config.head() != Head::Region {
            return Err(CliError::usage(format!(
                "{}: audit needs a region-level checkpoint",
                path.display()
            )));
        }
        let eta = args.eta.unwrap_or(ck.config.eta);
        let kappa = args.kappa.unwrap_or(ck.config.kappa);
        if !(0.0..=1.0).contains(&eta) {
            return Err(CliError::usage("eta must lie in [0, 1]"));
        }
        let mode = ck.teacher.mode();
        let mut counts = AuditCounts::default();
        let mut retained = 0;
        for ls in &data {
            let labels = teacher_pseudo_label(&ck.teacher, ls.tokens(), eta, kappa)?;
            retained += labels.len();
            let pseudo: Vec<Triplet> = labels.iter().map(|p| p.triplet(mode)).collect();
            let gold: Vec<Triplet> = ls.triplets.iter().map(|t| mode.project(t)).collect();
            counts.merge(&audit_pseudo_labels(&pseudo, &gold));
        }
        debug_assert_eq!(counts.total(), retained);
        csv += &csv_line(&[
            path.display().to_string(),
            ck.config.variant.name().to_string(),
            eta.to_string(),
            retained.to_string(),
            counts.correct.to_string(),
            counts.sentiment_error.to_string(),
            counts.words_mis_localized.to_string(),
            counts.error.to_string(),
        ]);
    }
    output::write(&out.join("audit.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn parse_head(s: &str) -> CliResult<Head> {
    match s.to_ascii_lowercase().as_str() {
        "region" => Ok(Head::Region),
        "cell" => Ok(Head::Cell),
        other => Err(CliError::usage(format!("unknown head {other:?}"))),
    }
}

pub const GRADCHECK_HEADER: &str = "group,numel,grad_norm,rel_err";

pub fn gradcheck(args: &GradcheckArgs) -> CliResult<()> {
    let mut file = match &args.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let mut cfg = GradcheckConfig::default();
    merge(&mut file, "seed", args.seed, &mut cfg.seed)?;
    merge(&mut file, "mode", args.mode, &mut cfg.mode)?;
    merge(&mut file, "alpha", args.alpha, &mut cfg.alpha)?;
    merge(&mut file, "beta", args.beta, &mut cfg.beta)?;
    merge(&mut file, "kappa", args.kappa, &mut cfg.kappa)?;
    merge(&mut file, "eps", args.eps, &mut cfg.eps)?;
    merge(&mut file, "tol", args.tol, &mut cfg.tol)?;
    merge(&mut file, "d", None, &mut cfg.d)?;
    merge(&mut file, "layers", None, &mut cfg.layers)?;
    let mut head = "region".to_string();
    merge(&mut file, "head", args.head.clone(), &mut head)?;
    cfg.head = parse_head(&head)?;
    file.finish()?;
    if !(cfg.eps > 0.0 && cfg.tol > 0.0) {
        return Err(CliError::usage("eps and tol must be positive"));
    }
    if let Some(out) = &args.out {
        prepare(out, &["gradcheck.csv"], args.force)?;
    }
    let report = run_gradcheck(&cfg)?;
    let mut csv = format!("{GRADCHECK_HEADER}\n");
    for g in &report.groups {
        csv += &csv_line(&[
            g.name.clone(),
            g.numel.to_string(),
            g.grad_norm.to_string(),
            g.rel_err.to_string(),
        ]);
    }
    print!("{csv}");
    let verdict = if report.passed() { "PASS" } else { "FAIL" };
    println!("max relative error {:e} (tol {:e}): {verdict}", report.max_rel_err, report.tol);
    if let Some(out) = &args.out {
        output::write(&out.join("gradcheck.csv"), &csv)?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::runtime(format!(
            "gradient check failed: max relative error {:e}",
            report.max_rel_err
        )))
    }
}

pub const ABLATION_HEADER: &str =
    "row,ablations,alpha,beta,seeds,dev_f1_mean,dev_f1_std,test_f1_mean,test_f1_std";

/// One cell of the ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub row: String,
    pub dir: PathBuf,
    pub config: TrainConfig,
}

pub const DEFAULT_ROWS: [&str; 5] = ["none", "no_aug", "no_uns", "no_mmd", "no_uns+no_mmd"];

pub fn ablation_cells(
    base: &TrainConfig,
    rows: &[String],
    alphas: &[f64],
    betas: &[f64],
) -> CliResult<Vec<AblationCell>> {
    let mut cells = Vec::new();
    let requested: Vec<String> = if rows.is_empty() {
        DEFAULT_ROWS.iter().map(|s| s.to_string()).collect()
    } else {
        rows.to_vec()
    };
    for r in &requested {
        let ablations: Ablations = r.parse()?;
        let label = ablations.label();
        if cells.iter().any(|c: &AblationCell| c.row == label) {
            return Err(CliError::usage(format!("ablation row {label} requested twice")));
        }
        cells.push(AblationCell {
            row: label.clone(),
            dir: PathBuf::from("rows").join(&label),
            config: TrainConfig {
                ablations,
                ..base.clone()
            },
        });
    }
    for &alpha in alphas {
        cells.push(AblationCell {
            row: format!("alpha={alpha}"),
            dir: PathBuf::from("alpha").join(alpha.to_string()),
            config: TrainConfig {
                alpha,
                ablations: Ablations::default(),
                ..base.clone()
            },
        });
    }
    for &beta in betas {
        cells.push(AblationCell {
            row: format!("beta={beta}"),
            dir: PathBuf::from("beta").join(beta.to_string()),
            config: TrainConfig {
                beta,
                ablations: Ablations::default(),
                ..base.clone()
            },
        });
    }
    for c in &cells {
        c.config.validate().map_err(|e| CliError::usage(format!("{}: {e}", c.row)))?;
    }
    Ok(cells)
}

pub fn ablate(args: &AblateArgs) -> CliResult<()> {
    let (settings, file) = run_settings(args.config.as_deref(), &args.hyper, &args.seeds, None)?;
    file.finish()?;
    let grid = |s: &Option<String>| -> CliResult<Vec<f64>> {
        match s {
            None => Ok(Vec::new()),
            Some(list) => {
                let v: Vec<f64> = parse_list(list).map_err(CliError::usage)?;
                if v.is_empty() {
                    return Err(CliError::usage("empty grid"));
                }
                Ok(v)
            }
        }
    };
    let cells = ablation_cells(&settings.train, &args.ablate, &grid(&args.alphas)?, &grid(&args.betas)?)?;
    let out = &args.output.out;
    let mut files = vec!["ablation.csv".to_string(), "run.cfg".to_string()];
    for c in &cells {
        for f in seed_files(&settings.seeds) {
            files.push(c.dir.join(f).display().to_string());
        }
    }
    let names: Vec<&str> = files.iter().map(String::as_str).collect();
    prepare(out, &names, args.output.force)?;
    let corpus = Corpus::load(&args.data)?;
    output::write(&out.join("run.cfg"), &train_config_text(&settings.train, &settings.seeds))?;
    let mut csv = format!("{ABLATION_HEADER}\n");
    for c in &cells {
        let results = run_seeds(&corpus, &c.config, &settings.seeds, &out.join(&c.dir))?;
        output::write(&out.join(&c.dir).join("runs.csv"), &runs_csv(&results))?;
        let mut fields = vec![
            c.row.clone(),
            c.config.ablations.label(),
            c.config.alpha.to_string(),
            c.config.beta.to_string(),
        ];
        fields.extend(stat_fields(&results));
        csv += &csv_line(&fields);
    }
    output::write(&out.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}
