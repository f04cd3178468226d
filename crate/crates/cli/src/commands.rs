//! Subcommand implementations. Each returns the text it wants printed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use protopad::data::{
    apply_normalization, fit_normalization, load_feature_table, split_by_users, write_feature_table,
};
use protopad::embedding::{load_checkpoint, save_checkpoint};
use protopad::episodes::{extend_support, sample_support};
use protopad::metrics::write_det_csv;
use protopad::synthetic::generate_synthetic;
use protopad::trainer::{
    evaluate, report_from_scores, scores_from_csv, scores_to_csv, train, train_from,
};
use protopad::{
    Dataset64, EvalOptions, Evaluation64, ExtensionSummary, Label, Mlp64, PadReport, Sample64,
    TrainHistory,
};
use serde_json::json;

use crate::config::RunConfig;
use crate::CliError;

pub const FEATURES_FILE: &str = "features.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const REPORT_FILE: &str = "report.json";
pub const SCORES_FILE: &str = "scores.csv";
pub const EXTEND_REPORT_FILE: &str = "extend_report.json";
pub const EXTENDED_CHECKPOINT_FILE: &str = "checkpoint_extended.ckpt";
pub const EXTENDED_HISTORY_FILE: &str = "history_extended.csv";

/// How `extend --retrain` initializes the retrained embedder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetrainMode {
    /// Fresh initialization from the embedding config.
    Fresh,
    /// Continue from the base checkpoint.
    Finetune,
}

impl RetrainMode {
    fn name(self) -> &'static str {
        match self {
            RetrainMode::Fresh => "fresh",
            RetrainMode::Finetune => "finetune",
        }
    }
}

pub fn det_file_name(country: &str) -> String {
    format!("det_{country}.csv")
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("JSON values always serialize");
    text.push('\n');
    write_text(path, &text)
}

fn out_dir(cfg: &RunConfig) -> Result<&Path, CliError> {
    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", cfg.out_dir.display())))?;
    Ok(&cfg.out_dir)
}

/// Generates or loads the configured dataset.
pub fn load_data(cfg: &RunConfig) -> Result<Dataset64, CliError> {
    if let Some(spec) = &cfg.synthetic {
        return Ok(generate_synthetic(spec)?);
    }
    let files = cfg.files.as_ref().expect("validated config has one source");
    let mut tables = files.tables.iter();
    let first = tables.next().expect("validated config has tables");
    let mut ds: Dataset64 = load_feature_table(first)?;
    for t in tables {
        ds = ds.concat(&load_feature_table(t)?)?;
    }
    Ok(ds)
}

/// User-disjoint splits of the normalized dataset.
pub struct Prepared {
    pub train: Dataset64,
    pub val: Dataset64,
    pub test: Dataset64,
}

impl Prepared {
    pub fn countries(&self) -> Vec<String> {
        let mut c = self.train.countries();
        for other in [&self.val, &self.test] {
            for x in other.countries() {
                if !c.contains(&x) {
                    c.push(x);
                }
            }
        }
        c
    }
}

/// Splits each country's users with the split spec, then standardizes all
/// splits with statistics of the training users of the support countries.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared, CliError> {
    let ds = load_data(cfg)?;
    let mut splits: [Option<Dataset64>; 3] = [None, None, None];
    for country in ds.countries() {
        let sub = ds
            .filter_countries(std::slice::from_ref(&country))
            .expect("country has samples");
        let (a, b, c) = split_by_users(&sub, &cfg.split)
            .map_err(|e| CliError::Data(format!("country {country}: {e}")))?;
        for (slot, part) in splits.iter_mut().zip([a, b, c]) {
            *slot = Some(match slot.take() {
                None => part,
                Some(acc) => acc.concat(&part)?,
            });
        }
    }
    let [train, val, test] = splits.map(|s| s.expect("dataset is nonempty"));
    let fit_on = train
        .filter_countries(&cfg.episode.support_countries)
        .ok_or_else(|| CliError::Data("no training samples in the support countries".into()))?;
    let stats = fit_normalization(&fit_on);
    Ok(Prepared {
        train: apply_normalization(&train, &stats)?,
        val: apply_normalization(&val, &stats)?,
        test: apply_normalization(&test, &stats)?,
    })
}

fn restrict(ds: &Dataset64, countries: &[String], what: &str) -> Result<Dataset64, CliError> {
    ds.filter_countries(countries)
        .ok_or_else(|| CliError::Data(format!("{what} split has no samples of {countries:?}")))
}

fn eval_options(cfg: &RunConfig) -> EvalOptions {
    EvalOptions {
        metric: cfg.metric,
        pais: cfg.pais,
        pool: cfg.prototype_pool,
    }
}

fn checkpoint_path(cfg: &RunConfig, explicit: Option<&Path>) -> PathBuf {
    explicit.map_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE), Path::to_path_buf)
}

fn load_params(cfg: &RunConfig, explicit: Option<&Path>, dim: usize) -> Result<Mlp64, CliError> {
    let path = checkpoint_path(cfg, explicit);
    let (params, _) = load_checkpoint::<f64>(&path)?;
    if params.input_dim() != dim {
        return Err(CliError::Data(format!(
            "checkpoint {} expects {} features, data has {dim}",
            path.display(),
            params.input_dim()
        )));
    }
    Ok(params)
}

/// Writes the synthetic dataset as a feature table and returns a per-country
/// count table.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<String, CliError> {
    let spec = cfg
        .synthetic
        .as_ref()
        .ok_or_else(|| CliError::Config("gen-data needs a [synthetic] section".into()))?;
    let ds: Dataset64 = generate_synthetic(spec)?;
    let dir = out_dir(cfg)?;
    write_feature_table(&ds, dir.join(FEATURES_FILE))?;

    let mut text = format!(
        "{:<8} {:>6} {:>15} {:>8}\n",
        "country", "users", "screen_sources", "images"
    );
    for c in ds.countries() {
        let samples = ds.samples().iter().filter(|s| s.country == c);
        let (mut users, mut screens, mut images) = (
            std::collections::BTreeSet::new(),
            std::collections::BTreeSet::new(),
            0,
        );
        for s in samples {
            users.insert(s.user_id.as_str());
            if s.label == Label::Attack {
                screens.insert(s.screen_source.as_str());
            }
            images += 1;
        }
        let _ = writeln!(
            text,
            "{c:<8} {:>6} {:>15} {images:>8}",
            users.len(),
            screens.len()
        );
    }
    let _ = writeln!(text, "wrote {}", dir.join(FEATURES_FILE).display());
    Ok(text)
}

fn history_summary(h: &TrainHistory) -> String {
    let b = h.best();
    format!(
        "epochs run {}, best epoch {} (val loss {:.6}, val EER {:.4}), stopped by {:?}\n",
        h.epochs.len(),
        h.best_epoch,
        b.val_loss,
        b.val_eer,
        h.stop_reason
    )
}

/// Trains on the training users of the support countries and writes the
/// best-validation checkpoint and the per-epoch history.
pub fn cmd_train(cfg: &RunConfig) -> Result<String, CliError> {
    let data = prepare(cfg)?;
    let countries = &cfg.episode.support_countries;
    let train_ds = restrict(&data.train, countries, "training")?;
    let val_ds = restrict(&data.val, countries, "validation")?;
    let embed_cfg = cfg.embedding.config(train_ds.dimension());
    let (params, history) = train(&train_ds, &val_ds, &cfg.episode, &embed_cfg, &cfg.train)?;

    let dir = out_dir(cfg)?;
    save_checkpoint(&params, &embed_cfg, dir.join(CHECKPOINT_FILE))?;
    write_text(&dir.join(HISTORY_FILE), &history.to_csv())?;
    Ok(format!(
        "{}wrote {} and {}\n",
        history_summary(&history),
        dir.join(CHECKPOINT_FILE).display(),
        dir.join(HISTORY_FILE).display()
    ))
}

/// Support set used for evaluation: the first support draw over the training
/// users.
fn base_support(cfg: &RunConfig, data: &Prepared) -> Result<Vec<Sample64>, CliError> {
    Ok(sample_support(&data.train, &cfg.episode, 0)?)
}

fn report_table(report: &PadReport) -> String {
    let mut text = format!(
        "{:<8} {:>8} {:>9} {:>9} {:>9} {:>6} {:>6}\n",
        "country", "EER", "BPCER10", "BPCER20", "BPCER100", "n_bf", "n_att"
    );
    for (c, r) in &report.countries {
        let _ = writeln!(
            text,
            "{c:<8} {:>8.4} {:>9.4} {:>9.4} {:>9.4} {:>6} {:>6}",
            r.eer, r.bpcer10, r.bpcer20, r.bpcer100, r.n_bona_fide, r.n_attack
        );
    }
    for (c, s) in &report.skipped {
        let _ = writeln!(text, "{c:<8} skipped: {}", s.reason);
    }
    text
}

fn write_evaluation(dir: &Path, ev: &Evaluation64) -> Result<(), CliError> {
    write_json(&dir.join(REPORT_FILE), &ev.report.to_json())?;
    for (country, curve) in &ev.curves {
        write_det_csv(curve, dir.join(det_file_name(country)))?;
    }
    write_text(&dir.join(SCORES_FILE), &scores_to_csv(&ev.scores))
}

/// Scores every test-split sample against the base support and writes the
/// report, one DET curve per country, and the raw scores.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<String, CliError> {
    let data = prepare(cfg)?;
    let params = load_params(cfg, checkpoint, data.test.dimension())?;
    let support = base_support(cfg, &data)?;
    let ev = evaluate(&params, &data.test, &support, &eval_options(cfg))?;
    let dir = out_dir(cfg)?;
    write_evaluation(dir, &ev)?;
    let mut text = report_table(&ev.report);
    for (c, s) in &ev.report.skipped {
        let _ = writeln!(
            text,
            "warning: {c} skipped ({} bona fide, {} attack)",
            s.n_bona_fide, s.n_attack
        );
    }
    let _ = writeln!(text, "wrote {}", dir.join(REPORT_FILE).display());
    Ok(text)
}

fn summary_json(s: &ExtensionSummary) -> serde_json::Value {
    serde_json::to_value(s).expect("plain struct")
}

/// Compares the base support with the support extended by a few users of a
/// new country, optionally retraining with those users first.
pub fn cmd_extend(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    retrain: Option<RetrainMode>,
) -> Result<String, CliError> {
    let ext = cfg.extension()?;
    let data = prepare(cfg)?;
    let base_params = load_params(cfg, checkpoint, data.test.dimension())?;
    let support = base_support(cfg, &data)?;
    let (ext_spec, summary) = extend_support(&cfg.episode, &data.train, ext)?;
    let pool = &ext_spec.support_pools[&ext.new_country];
    let added: Vec<Sample64> = data
        .train
        .samples()
        .iter()
        .filter(|s| s.country == ext.new_country && pool.contains(&s.sample_id))
        .cloned()
        .collect();
    let mut extended_support = support.clone();
    extended_support.extend(added.iter().cloned());

    let opts = eval_options(cfg);
    let base = evaluate(&base_params, &data.test, &support, &opts)?;
    let dir = out_dir(cfg)?;

    let mut notes = String::new();
    let ext_params = match retrain {
        None => base_params,
        Some(mode) => {
            let base_countries = &cfg.episode.support_countries;
            let train_ds = restrict(&data.train, base_countries, "training")?
                .concat(&Dataset64::new(added.clone())?)?;
            let val_ds = restrict(&data.val, &ext_spec.support_countries, "validation")?;
            let embed_cfg = cfg.embedding.config(train_ds.dimension());
            let (params, history) = match mode {
                RetrainMode::Fresh => train(&train_ds, &val_ds, &ext_spec, &embed_cfg, &cfg.train)?,
                RetrainMode::Finetune => {
                    train_from(base_params, &train_ds, &val_ds, &ext_spec, &cfg.train)?
                }
            };
            save_checkpoint(&params, &embed_cfg, dir.join(EXTENDED_CHECKPOINT_FILE))?;
            write_text(&dir.join(EXTENDED_HISTORY_FILE), &history.to_csv())?;
            notes.push_str(&format!(
                "retrained ({}): {}",
                mode.name(),
                history_summary(&history)
            ));
            params
        }
    };
    let extended = evaluate(&ext_params, &data.test, &extended_support, &opts)?;

    write_json(
        &dir.join(EXTEND_REPORT_FILE),
        &json!({
            "base": base.report.to_json(),
            "extended": extended.report.to_json(),
            "extension": summary_json(&summary),
            "retrain": retrain.map(RetrainMode::name),
        }),
    )?;

    let mut text = format!(
        "extension {}: {} users, {} images added ({} bona fide, {} attack)\n",
        summary.new_country,
        summary.selected_users.len(),
        summary.added_images,
        summary.bona_fide_images,
        summary.attack_images
    );
    text.push_str(&notes);
    text.push_str(&comparison_table(&base.report, &extended.report));
    let _ = writeln!(text, "wrote {}", dir.join(EXTEND_REPORT_FILE).display());
    Ok(text)
}

fn comparison_table(base: &PadReport, extended: &PadReport) -> String {
    let mut text = format!(
        "{:<8} {:>9} {:>9} {:>13} {:>13}\n",
        "country", "EER base", "EER ext", "BPCER10 base", "BPCER10 ext"
    );
    let fmt = |r: Option<f64>| r.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    let countries: std::collections::BTreeSet<&String> = base
        .countries
        .keys()
        .chain(extended.countries.keys())
        .chain(base.skipped.keys())
        .collect();
    for c in countries {
        let b = base.countries.get(c);
        let e = extended.countries.get(c);
        let _ = writeln!(
            text,
            "{c:<8} {:>9} {:>9} {:>13} {:>13}",
            fmt(b.map(|r| r.eer)),
            fmt(e.map(|r| r.eer)),
            fmt(b.map(|r| r.bpcer10)),
            fmt(e.map(|r| r.bpcer10))
        );
    }
    text
}

/// Rebuilds the report and DET curves from an exported score file.
pub fn cmd_det_export(cfg: &RunConfig, scores: Option<&Path>) -> Result<String, CliError> {
    let path = scores.map_or_else(|| cfg.out_dir.join(SCORES_FILE), Path::to_path_buf);
    let file = fs::File::open(&path)
        .map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))?;
    let scored = scores_from_csv::<f64, _>(file)?;
    let (report, curves) = report_from_scores(&scored)?;
    let dir = out_dir(cfg)?;
    write_json(&dir.join(REPORT_FILE), &report.to_json())?;
    let mut written = BTreeMap::new();
    for (country, curve) in &curves {
        let p = dir.join(det_file_name(country));
        write_det_csv(curve, &p)?;
        written.insert(country.clone(), curve.points.len());
    }
    let mut text = String::new();
    for (c, n) in written {
        let _ = writeln!(
            text,
            "{c}: {n} DET points -> {}",
            dir.join(det_file_name(&c)).display()
        );
    }
    Ok(text)
}
