//! Command implementations. Each returns a core `Result` so callers (the
//! binary and the test suites) share one error taxonomy.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sgnet_core::checkpoint;
use sgnet_core::data::io::{read_mask, read_volume, write_mask, write_volume};
use sgnet_core::data::manifest::{Manifest, Split, Subject};
use sgnet_core::data::phantom::{generate_phantom, PhantomSpec};
use sgnet_core::data::preprocess::{normalize, reorient_mask_to_canonical, reorient_to_canonical, resample_isotropic, resample_mask, Interpolation};
use sgnet_core::metrics::{cohort_means, dilate, evaluate_subject, SubjectMetrics};
use sgnet_core::models::{count_parameters, ArchKind, ArchitectureSpec, Model, ParamCount};
use sgnet_core::stats::{bonferroni, paired_t_test, summarize};
use sgnet_core::tensor::Tensor;
use sgnet_core::trainer::{fit_with_progress, predict, Sample, TrainLog};
use sgnet_core::{Error, Result};

use crate::config::RunConfig;
use crate::report::{
    comparison_table, evaluation_table, paradox_table, read_report, write_report, ComparisonReport, ComparisonRow,
    EvaluationReport, ModelRow, ParadoxReport, ParadoxRow, SCHEMA_VERSION,
};

pub const MANIFEST_NAME: &str = "manifest.txt";
pub const CHECKPOINT_NAME: &str = "model.ckpt";
pub const TRAIN_LOG_NAME: &str = "train_log.json";
pub const CONFIG_ECHO_NAME: &str = "config.txt";

#[derive(Debug, Clone)]
pub struct PhantomArgs {
    pub out: PathBuf,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub dim: usize,
    pub seed: u64,
}

/// Per-subject phantom seed, decorrelated from neighbouring run seeds.
fn subject_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64)
}

/// Writes SGV1 images, masks and a manifest. Returns the manifest path.
pub fn cmd_phantom(a: &PhantomArgs) -> Result<PathBuf> {
    if a.n_train + a.n_val + a.n_test == 0 {
        return Err(Error::Config("phantom cohort is empty".into()));
    }
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let splits = [(Split::Train, a.n_train), (Split::Val, a.n_val), (Split::Test, a.n_test)];
    let mut subjects = Vec::new();
    for (split, n) in splits {
        for _ in 0..n {
            let i = subjects.len();
            let id = format!("sub{i:03}");
            let (v, m) = generate_phantom(&PhantomSpec::with_dims([a.dim; 3], subject_seed(a.seed, i)))?;
            let image = a.out.join(format!("{id}_image.sgv"));
            let mask = a.out.join(format!("{id}_mask.sgv"));
            write_volume(&v, &image)?;
            write_mask(&m, &mask)?;
            subjects.push(Subject { id, image, mask, split });
        }
    }
    let path = a.out.join(MANIFEST_NAME);
    Manifest::new(subjects)?.save(&path)?;
    Ok(path)
}

/// Loads one subject and applies reorientation, resampling and normalization.
pub fn load_subject(s: &Subject, cfg: &RunConfig) -> Result<Sample> {
    let image = read_volume(&s.image)?;
    let mask = read_mask(&s.mask)?;
    if image.geometry != mask.geometry {
        return Err(Error::Data(format!("{}: image and mask geometry differ", s.id)));
    }
    let image = resample_isotropic(&reorient_to_canonical(&image), cfg.target_spacing, Interpolation::Trilinear)?;
    let mask = resample_mask(&reorient_mask_to_canonical(&mask), cfg.target_spacing)?;
    Sample::new(s.id.clone(), normalize(&image, cfg.p_low, cfg.p_high), mask)
}

fn load_split(m: &Manifest, split: Split, cfg: &RunConfig) -> Result<Vec<Sample>> {
    m.split(split).map(|s| load_subject(s, cfg)).collect()
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: TrainLog,
}

/// Trains on the manifest's train split, validating on its val split.
pub fn cmd_train(cfg: &RunConfig, manifest: &Path, out: &Path, verbose: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let m = Manifest::load(manifest)?;
    let train = load_split(&m, Split::Train, cfg)?;
    let val = load_split(&m, Split::Val, cfg)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(format!(
            "{}: needs train and val subjects (found {} and {})",
            manifest.display(),
            train.len(),
            val.len()
        )));
    }
    let mut spec = cfg.arch_spec();
    spec.in_channels = train[0].image.channels;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let echo_path = out.join(CONFIG_ECHO_NAME);
    fs::write(&echo_path, cfg.echo()).map_err(|e| Error::io(&echo_path, e))?;

    let mut model = Model::build(&spec, cfg.train.seed)?;
    let outcome = fit_with_progress(&mut model, &train, &val, &cfg.train, |e| {
        if verbose {
            eprintln!(
                "epoch {:>3}  loss {:.4} (dice {:.4}, ce {:.4})  val dice {:.4}",
                e.epoch, e.loss, e.dice_loss, e.ce_loss, e.val_dice
            );
        }
    })?;
    let ckpt = out.join(CHECKPOINT_NAME);
    checkpoint::save(&outcome.best, &ckpt)?;
    let log_path = out.join(TRAIN_LOG_NAME);
    let mut json = serde_json::to_string_pretty(&outcome.log).map_err(|e| Error::Data(e.to_string()))?;
    json.push('\n');
    fs::write(&log_path, json).map_err(|e| Error::io(&log_path, e))?;
    Ok(TrainOutcome {
        checkpoint: ckpt,
        log: outcome.log,
    })
}

fn predict_subject(model: &Model, s: &Sample, cfg: &RunConfig) -> Result<sgnet_core::data::MaskVolume> {
    predict(model, &s.image, cfg.train.inference_patch, cfg.train.overlap)
}

fn summaries(subjects: &[SubjectMetrics]) -> (Option<sgnet_core::stats::Summary>, Option<sgnet_core::stats::Summary>) {
    if subjects.len() < 2 {
        return (None, None);
    }
    let col = |f: fn(&SubjectMetrics) -> f64| subjects.iter().map(f).collect::<Vec<_>>();
    (summarize(&col(|s| s.dice)).ok(), summarize(&col(|s| s.hd95)).ok())
}

/// Builds an evaluation report from per-subject metrics.
pub fn evaluation_report(model: &str, split: Split, subjects: Vec<SubjectMetrics>) -> EvaluationReport {
    let (dice_summary, hd95_summary) = summaries(&subjects);
    EvaluationReport {
        schema_version: SCHEMA_VERSION,
        model: model.to_string(),
        split: split.to_string(),
        cohort: cohort_means(&subjects),
        subjects,
        dice_summary,
        hd95_summary,
    }
}

/// Segments every subject of `split` and writes the metrics report.
pub fn cmd_evaluate(ckpt: &Path, manifest: &Path, split: Split, report: &Path, cfg: &RunConfig) -> Result<EvaluationReport> {
    let model = checkpoint::load(ckpt)?;
    let m = Manifest::load(manifest)?;
    let samples = load_split(&m, split, cfg)?;
    if samples.is_empty() {
        return Err(Error::Data(format!("{}: no {split} subjects", manifest.display())));
    }
    let mut rows = Vec::with_capacity(samples.len());
    for s in &samples {
        let pred = predict_subject(&model, s, cfg)?;
        rows.push(evaluate_subject(&s.id, &pred, &s.mask)?);
    }
    let r = evaluation_report(model.spec().kind.as_str(), split, rows);
    write_report(&r, &evaluation_table(&r), report)?;
    Ok(r)
}

/// Paired comparison of evaluation reports against the one labelled `reference`.
pub fn compare_reports(reports: &[EvaluationReport], reference: &str) -> Result<ComparisonReport> {
    let ref_idx = reports
        .iter()
        .position(|r| r.model == reference)
        .ok_or_else(|| Error::Config(format!("no report for reference model {reference:?}")))?;
    let base = &reports[ref_idx];
    let ids: Vec<&str> = base.subjects.iter().map(|s| s.id.as_str()).collect();
    let mut sorted_ids = ids.clone();
    sorted_ids.sort_unstable();
    // align every report to the reference subject order
    let mut columns = Vec::with_capacity(reports.len());
    for r in reports {
        let mut theirs: Vec<&str> = r.subjects.iter().map(|s| s.id.as_str()).collect();
        theirs.sort_unstable();
        if theirs != sorted_ids {
            return Err(Error::Data(format!(
                "reports for {} and {} cover different subjects",
                r.model, base.model
            )));
        }
        let col: Vec<&SubjectMetrics> = ids
            .iter()
            .map(|id| r.subjects.iter().find(|s| s.id == *id).expect("id sets match"))
            .collect();
        columns.push(col);
    }
    let k = reports.len().saturating_sub(1).max(1);
    let mut models = Vec::new();
    for (r, col) in reports.iter().zip(&columns) {
        let dice: Vec<f64> = col.iter().map(|s| s.dice).collect();
        let mean = |f: fn(&SubjectMetrics) -> f64| col.iter().map(|s| f(s)).sum::<f64>() / col.len() as f64;
        models.push(ModelRow {
            model: r.model.clone(),
            dice: summarize(&dice)?,
            precision: mean(|s| s.precision),
            recall: mean(|s| s.recall),
            hd95: mean(|s| s.hd95),
        });
    }
    let ref_dice: Vec<f64> = columns[ref_idx].iter().map(|s| s.dice).collect();
    let mut comparisons = Vec::new();
    for (i, (r, col)) in reports.iter().zip(&columns).enumerate() {
        if i == ref_idx {
            continue;
        }
        let dice: Vec<f64> = col.iter().map(|s| s.dice).collect();
        let t = paired_t_test(&ref_dice, &dice)?;
        let p_bonferroni = bonferroni(t.p, k);
        comparisons.push(ComparisonRow {
            model: r.model.clone(),
            reference: base.model.clone(),
            t: t.t,
            df: t.df,
            p_raw: t.p,
            p_bonferroni,
            significant: p_bonferroni < 0.05,
        });
    }
    Ok(ComparisonReport {
        schema_version: SCHEMA_VERSION,
        metric: "dice".into(),
        reference: base.model.clone(),
        comparisons_k: k,
        models,
        comparisons,
    })
}

pub fn cmd_compare(paths: &[PathBuf], reference: &str, out: &Path) -> Result<ComparisonReport> {
    if paths.len() < 2 {
        return Err(Error::Config("compare needs at least two reports".into()));
    }
    let reports = paths
        .iter()
        .map(|p| read_report::<EvaluationReport>(p))
        .collect::<Result<Vec<_>>>()?;
    let c = compare_reports(&reports, reference)?;
    write_report(&c, &comparison_table(&c), out)?;
    Ok(c)
}

#[derive(Debug, Clone)]
pub struct ParamRow {
    pub arch: ArchKind,
    pub widths: Vec<usize>,
    pub count: ParamCount,
    /// Seconds for one forward pass over a `time_dim`³ volume, if timed.
    pub seconds: Option<f64>,
}

/// Parameter counts of the default configurations, optionally with timing.
pub fn cmd_params(archs: &[ArchKind], time_dim: Option<usize>) -> Result<Vec<ParamRow>> {
    archs
        .iter()
        .map(|&arch| {
            let spec = ArchitectureSpec::default_for(arch);
            let mut model = Model::build(&spec, 0)?;
            model.set_mode(sgnet_core::models::Mode::Eval);
            let seconds = match time_dim {
                Some(d) => {
                    let x = Tensor::zeros(&[1, spec.in_channels, d, d, d]);
                    let t = Instant::now();
                    model.predict_logits(&x)?;
                    Some(t.elapsed().as_secs_f64())
                }
                None => None,
            };
            Ok(ParamRow {
                arch,
                widths: model.widths().to_vec(),
                count: count_parameters(&model.params),
                seconds,
            })
        })
        .collect()
}

pub fn params_table(rows: &[ParamRow]) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let _ = writeln!(out, "{:<10} {:>12} {:<20} {:>12}", "arch", "parameters", "widths", "infer_s");
    for r in rows {
        let w = r.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",");
        let s = r.seconds.map_or("-".to_string(), |s| format!("{s:.3}"));
        let _ = writeln!(out, "{:<10} {:>12} {:<20} {:>12}", r.arch.as_str(), r.count.total, w, s);
        for (block, n) in &r.count.per_block {
            let _ = writeln!(out, "  {block:<20} {n:>10}");
        }
    }
    out
}

/// Where the undilated prediction comes from.
#[derive(Debug, Clone)]
pub enum ParadoxSource {
    Checkpoint(PathBuf),
    OracleGroundTruth,
}

pub fn cmd_paradox(
    source: &ParadoxSource,
    manifest: &Path,
    split: Split,
    radius: usize,
    report: &Path,
    cfg: &RunConfig,
) -> Result<ParadoxReport> {
    let model = match source {
        ParadoxSource::Checkpoint(p) => Some(checkpoint::load(p)?),
        ParadoxSource::OracleGroundTruth => None,
    };
    let m = Manifest::load(manifest)?;
    let samples = load_split(&m, split, cfg)?;
    if samples.is_empty() {
        return Err(Error::Data(format!("{}: no {split} subjects", manifest.display())));
    }
    let mut rows = Vec::new();
    for s in &samples {
        let pred = match &model {
            Some(model) => predict_subject(model, s, cfg)?,
            None => s.mask.clone(),
        };
        let base = evaluate_subject(&s.id, &pred, &s.mask)?;
        let dilated = evaluate_subject(&s.id, &dilate(&pred, radius), &s.mask)?;
        rows.push(ParadoxRow {
            id: s.id.clone(),
            delta_dice: dilated.dice - base.dice,
            delta_precision: dilated.precision - base.precision,
            delta_recall: dilated.recall - base.recall,
            delta_hd95: dilated.hd95 - base.hd95,
            base,
            dilated,
        });
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&ParadoxRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let r = ParadoxReport {
        schema_version: SCHEMA_VERSION,
        source: match source {
            ParadoxSource::Checkpoint(_) => model.as_ref().map_or("model".into(), |m| m.spec().kind.to_string()),
            ParadoxSource::OracleGroundTruth => "oracle-gt".into(),
        },
        dilation_radius: radius,
        mean_delta_dice: mean(|r| r.delta_dice),
        mean_delta_precision: mean(|r| r.delta_precision),
        mean_delta_recall: mean(|r| r.delta_recall),
        mean_delta_hd95: mean(|r| r.delta_hd95),
        subjects: rows,
    };
    write_report(&r, &paradox_table(&r), report)?;
    Ok(r)
}
