//! Episodic training, evaluation and end-to-end gradient verification.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Label, Sample};
use crate::embedding::{EmbeddingConfig, MlpParameters};
use crate::episodes::{sample_episode, Episode, EpisodeSpec};
use crate::error::{Error, Result};
use crate::metrics::{
    country_report, det_curve, eer, DetCurve, PadReport, ScoreSet, SkippedCountry, SINGLE_PAIS,
};
use crate::optim::{adamw_step, AdamWParams, OptimizerState};
use crate::protonet::{
    classify_query, compute_prototypes, episode_loss, episode_loss_gradient, ClassPosterior,
    DistanceMetric, EmbeddedEpisode,
};
use crate::scalar::Scalar;

/// Mixed into the training seed to derive the fixed validation episodes.
const VALIDATION_SALT: u64 = 0x05ee_d0f7_a11d;

/// Distance used for the training loss.
pub const TRAINING_METRIC: DistanceMetric = DistanceMetric::SquaredEuclidean;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub episodes_per_epoch: usize,
    pub val_episodes: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            patience: 30,
            max_epochs: 500,
            episodes_per_epoch: 100,
            val_episodes: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        self.validate_frozen_ok()
    }

    /// Like [`validate`](Self::validate) but also accepts a zero learning rate,
    /// which freezes the parameters.
    fn validate_frozen_ok(&self) -> Result<()> {
        let unit = |x: f64| x > 0.0 && x < 1.0;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidSpec(
                "learning_rate must be finite and >= 0".into(),
            ));
        }
        if !(self.weight_decay >= 0.0 && self.epsilon > 0.0) {
            return Err(Error::InvalidSpec(
                "weight_decay must be >= 0 and epsilon > 0".into(),
            ));
        }
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::InvalidSpec(
                "beta1 and beta2 must lie in (0, 1)".into(),
            ));
        }
        if self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidSpec(
                "patience and max_epochs must be at least 1".into(),
            ));
        }
        if self.episodes_per_epoch == 0 || self.val_episodes == 0 {
            return Err(Error::InvalidSpec(
                "episodes_per_epoch and val_episodes must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWParams {
        AdamWParams {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_eer: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were returned.
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_eer\n");
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                r.epoch, r.train_loss, r.val_loss, r.val_eer
            );
        }
        out
    }
}

fn class_indices(samples: &[Sample<impl Scalar>], class_set: &[Label]) -> Vec<usize> {
    samples
        .iter()
        .map(|s| {
            class_set
                .iter()
                .position(|&l| l == s.label)
                .expect("sample label in class set")
        })
        .collect()
}

/// Raw (pre-embedding) episode used for loss and gradient evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeFixture<T> {
    pub support: Vec<Vec<T>>,
    pub support_classes: Vec<usize>,
    pub query: Vec<Vec<T>>,
    pub query_classes: Vec<usize>,
    pub n_classes: usize,
}

impl<T: Scalar> EpisodeFixture<T> {
    pub fn from_episode(ep: &Episode<T>) -> Self {
        EpisodeFixture {
            support: ep.support.iter().map(|s| s.features.clone()).collect(),
            support_classes: class_indices(&ep.support, &ep.class_set),
            query: ep.query.iter().map(|s| s.features.clone()).collect(),
            query_classes: class_indices(&ep.query, &ep.class_set),
            n_classes: ep.class_set.len(),
        }
    }
}

/// Episode loss of the embedded fixture under the training metric.
pub fn fixture_loss<T: Scalar>(params: &MlpParameters<T>, fx: &EpisodeFixture<T>) -> Result<T> {
    let support = fx
        .support
        .iter()
        .map(|x| params.embed(x))
        .collect::<Result<Vec<_>>>()?;
    let protos = compute_prototypes(&fx.support_classes, &support, fx.n_classes)?;
    let posteriors = fx
        .query
        .iter()
        .map(|x| {
            let z = params.embed(x)?;
            classify_query(&z, &protos, TRAINING_METRIC).map(|(p, _)| p)
        })
        .collect::<Result<Vec<ClassPosterior<T>>>>()?;
    episode_loss(&posteriors, &fx.query_classes)
}

/// Loss and its analytic gradient w.r.t. every parameter, chained through
/// prototypes and the embedder.
pub fn fixture_loss_and_grad<T: Scalar>(
    params: &MlpParameters<T>,
    fx: &EpisodeFixture<T>,
) -> Result<(T, MlpParameters<T>)> {
    let (support, support_caches): (Vec<_>, Vec<_>) = fx
        .support
        .iter()
        .map(|x| params.forward(x))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let (query, query_caches): (Vec<_>, Vec<_>) = fx
        .query
        .iter()
        .map(|x| params.forward(x))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let grad = episode_loss_gradient(
        &EmbeddedEpisode {
            support: &support,
            support_classes: &fx.support_classes,
            query: &query,
            query_classes: &fx.query_classes,
            n_classes: fx.n_classes,
        },
        TRAINING_METRIC,
    )?;
    let mut grads = params.zeros_like();
    for (cache, g) in support_caches.iter().zip(&grad.support) {
        params.backward_accumulate(cache, g, &mut grads)?;
    }
    for (cache, g) in query_caches.iter().zip(&grad.query) {
        params.backward_accumulate(cache, g, &mut grads)?;
    }
    Ok((grad.loss, grads))
}

/// Denominator floor of the gradient-check relative error. Below it the
/// comparison is effectively absolute. Central differences with a 1e-5 step
/// carry round-off of tens of ulps of the loss divided by the step, around
/// 2e-9 for losses near 6, so gradients that are exactly zero (last-layer
/// biases cancel inside every distance) would otherwise report large
/// relative errors.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

/// Maximum over parameters of `|analytic − numeric| / max(|analytic|, |numeric|, floor)`,
/// with the numeric gradient from central differences of half-width `step`.
pub fn gradient_check_params<T: Scalar>(
    params: &MlpParameters<T>,
    fx: &EpisodeFixture<T>,
    step: T,
) -> Result<T> {
    let (_, analytic) = fixture_loss_and_grad(params, fx)?;
    let mut probe = params.clone();
    let floor = T::lit(GRAD_CHECK_FLOOR);
    let two = T::lit(2.0);
    let mut worst = T::zero();
    for i in 0..params.num_parameters() {
        let orig = params.get_flat(i);
        probe.set_flat(i, orig + step);
        let up = fixture_loss(&probe, fx)?;
        probe.set_flat(i, orig - step);
        let down = fixture_loss(&probe, fx)?;
        probe.set_flat(i, orig);
        let numeric = (up - down) / (two * step);
        let a = analytic.get_flat(i);
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Initializes an embedder from `cfg` and checks its end-to-end gradient on `fx`
/// with central differences of half-width `1e-5`.
pub fn gradient_check<T: Scalar>(cfg: &EmbeddingConfig, fx: &EpisodeFixture<T>) -> Result<T> {
    let params = MlpParameters::init(cfg)?;
    gradient_check_params(&params, fx, T::lit(1e-5))
}

fn embed_all<T: Scalar>(params: &MlpParameters<T>, samples: &[Sample<T>]) -> Result<Vec<Vec<T>>> {
    samples.iter().map(|s| params.embed(&s.features)).collect()
}

/// Validation loss and bona fide scores of one episode.
fn validation_episode<T: Scalar>(
    params: &MlpParameters<T>,
    ep: &Episode<T>,
    bf_class: usize,
    bona_fide: &mut Vec<T>,
    attacks: &mut Vec<T>,
) -> Result<T> {
    let support = embed_all(params, &ep.support)?;
    let protos = compute_prototypes(&ep.support_classes(), &support, ep.class_set.len())?;
    let mut posteriors = Vec::with_capacity(ep.query.len());
    for q in &ep.query {
        let (p, _) = classify_query(&params.embed(&q.features)?, &protos, TRAINING_METRIC)?;
        match q.label {
            Label::BonaFide => bona_fide.push(p.prob(bf_class)),
            Label::Attack => attacks.push(p.prob(bf_class)),
        }
        posteriors.push(p);
    }
    episode_loss(&posteriors, &ep.query_classes())
}

/// Trains a freshly initialized embedder. See [`train_from`].
pub fn train<T: Scalar>(
    train_ds: &Dataset<T>,
    val_ds: &Dataset<T>,
    spec: &EpisodeSpec,
    embed_cfg: &EmbeddingConfig,
    cfg: &TrainConfig,
) -> Result<(MlpParameters<T>, TrainHistory)> {
    let params = MlpParameters::init(embed_cfg)?;
    train_from(params, train_ds, val_ds, spec, cfg)
}

/// Episodic AdamW training with early stopping on validation loss.
///
/// Epoch `e` draws training episodes `(e−1)·n .. e·n` from `train_ds` with the
/// training seed, taking one optimizer step per episode. Validation uses the
/// same `val_episodes` episodes of `val_ds` every epoch; support pools are
/// ignored there because they name training samples. Training stops once
/// validation loss has not strictly improved for `patience` epochs, and the
/// best-validation parameters are returned.
pub fn train_from<T: Scalar>(
    mut params: MlpParameters<T>,
    train_ds: &Dataset<T>,
    val_ds: &Dataset<T>,
    spec: &EpisodeSpec,
    cfg: &TrainConfig,
) -> Result<(MlpParameters<T>, TrainHistory)> {
    cfg.validate_frozen_ok()?;
    spec.validate()?;
    for ds in [train_ds, val_ds] {
        if ds.dimension() != params.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: params.input_dim(),
                found: ds.dimension(),
            });
        }
    }
    let bf_class = spec
        .class_index(Label::BonaFide)
        .ok_or_else(|| Error::InvalidSpec("class_set must contain bona fide".into()))?;
    if spec.class_index(Label::Attack).is_none() {
        return Err(Error::InvalidSpec("class_set must contain attack".into()));
    }
    let train_spec = spec.with_seed(cfg.seed);
    let mut val_spec = spec.with_seed(cfg.seed ^ VALIDATION_SALT);
    val_spec.support_pools.clear();
    let val_episodes = (0..cfg.val_episodes as u64)
        .map(|i| sample_episode(val_ds, &val_spec, i))
        .collect::<Result<Vec<_>>>()?;

    let hp = cfg.optimizer();
    let mut state = OptimizerState::new(&params);
    let mut best = params.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        let mut train_loss = 0.0;
        for i in 0..cfg.episodes_per_epoch {
            let draw = ((epoch - 1) * cfg.episodes_per_epoch + i) as u64;
            let ep = sample_episode(train_ds, &train_spec, draw)?;
            let (loss, grads) = fixture_loss_and_grad(&params, &EpisodeFixture::from_episode(&ep))?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite training loss at epoch {epoch}, episode {i}"
                )));
            }
            adamw_step(&mut params, &grads, &mut state, &hp)?;
            if !params.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite parameters after epoch {epoch}, episode {i}"
                )));
            }
            train_loss += loss.as_f64();
        }
        train_loss /= cfg.episodes_per_epoch as f64;

        let (mut bona_fide, mut attacks) = (Vec::new(), Vec::new());
        let mut val_loss = 0.0;
        for ep in &val_episodes {
            val_loss +=
                validation_episode(&params, ep, bf_class, &mut bona_fide, &mut attacks)?.as_f64();
        }
        val_loss /= val_episodes.len() as f64;
        if !val_loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite validation loss at epoch {epoch}"
            )));
        }
        let val_eer = eer(&det_curve(&ScoreSet::new(bona_fide, attacks))?).as_f64();
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_eer,
        });

        if val_loss < best_loss {
            best_loss = val_loss;
            best_epoch = epoch;
            best = params.clone();
        } else if epoch - best_epoch >= cfg.patience {
            stop_reason = StopReason::Patience;
            break;
        }
    }
    Ok((
        best,
        TrainHistory {
            epochs,
            best_epoch,
            stop_reason,
        },
    ))
}

/// How attack scores are grouped into presentation attack instrument species.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaisGrouping {
    /// Every attack belongs to one `screen_display` species.
    #[default]
    Single,
    /// Each screen source is its own species.
    PerScreenSource,
}

/// Which prototypes the evaluation scores against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypePool {
    /// One prototype per class over the whole support set.
    #[default]
    Pooled,
    /// One prototype per (support country, class); the bona fide score sums the
    /// posteriors of all bona fide prototypes.
    PerCountry,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub metric: DistanceMetric,
    pub pais: PaisGrouping,
    pub pool: PrototypePool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            metric: DistanceMetric::Euclidean,
            pais: PaisGrouping::Single,
            pool: PrototypePool::Pooled,
        }
    }
}

/// One scored evaluation sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample<T> {
    pub sample_id: String,
    pub country: String,
    pub label: Label,
    pub pais: String,
    pub score: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation<T> {
    pub report: PadReport,
    pub curves: BTreeMap<String, DetCurve<T>>,
    pub scores: Vec<ScoredSample<T>>,
}

/// Scores every sample of `eval_ds` exactly once against prototypes built from
/// `support`, and reports per country. Countries lacking one of the two
/// classes are listed as skipped.
pub fn evaluate<T: Scalar>(
    params: &MlpParameters<T>,
    eval_ds: &Dataset<T>,
    support: &[Sample<T>],
    opts: &EvalOptions,
) -> Result<Evaluation<T>> {
    if support.is_empty() {
        return Err(Error::InsufficientSamples(
            "evaluation support set is empty".into(),
        ));
    }
    // Prototype keys: (country or "" when pooled, label).
    let mut keys: Vec<(String, Label)> = Vec::new();
    let mut classes = Vec::with_capacity(support.len());
    for s in support {
        let key = match opts.pool {
            PrototypePool::Pooled => (String::new(), s.label),
            PrototypePool::PerCountry => (s.country.clone(), s.label),
        };
        let k = keys.iter().position(|x| *x == key).unwrap_or_else(|| {
            keys.push(key);
            keys.len() - 1
        });
        classes.push(k);
    }
    if !keys.iter().any(|(_, l)| *l == Label::BonaFide)
        || !keys.iter().any(|(_, l)| *l == Label::Attack)
    {
        return Err(Error::InsufficientSamples(
            "evaluation support must contain both classes".into(),
        ));
    }
    let embedded = embed_all(params, support)?;
    let protos = compute_prototypes(&classes, &embedded, keys.len())?;

    let mut scores = Vec::with_capacity(eval_ds.len());
    for s in eval_ds.samples() {
        let (post, _) = classify_query(&params.embed(&s.features)?, &protos, opts.metric)?;
        let score = keys
            .iter()
            .zip(&post.probabilities)
            .filter(|((_, l), _)| *l == Label::BonaFide)
            .map(|(_, &p)| p)
            .fold(T::zero(), |a, b| a + b)
            .min(T::one());
        let pais = match (s.label, opts.pais) {
            (Label::BonaFide, _) => String::new(),
            (Label::Attack, PaisGrouping::Single) => SINGLE_PAIS.to_string(),
            (Label::Attack, PaisGrouping::PerScreenSource) => s.screen_source.clone(),
        };
        scores.push(ScoredSample {
            sample_id: s.sample_id.clone(),
            country: s.country.clone(),
            label: s.label,
            pais,
            score,
        });
    }
    let (report, curves) = report_from_scores(&scores)?;
    Ok(Evaluation {
        report,
        curves,
        scores,
    })
}

/// Groups scored samples by country and builds the report and DET curves.
pub fn report_from_scores<T: Scalar>(
    scores: &[ScoredSample<T>],
) -> Result<(PadReport, BTreeMap<String, DetCurve<T>>)> {
    let mut by_country: BTreeMap<String, ScoreSet<T>> = BTreeMap::new();
    for s in scores {
        let set = by_country.entry(s.country.clone()).or_default();
        match s.label {
            Label::BonaFide => set.bona_fide.push(s.score),
            Label::Attack => set.attacks.entry(s.pais.clone()).or_default().push(s.score),
        }
    }
    let mut report = PadReport::default();
    let mut curves = BTreeMap::new();
    for (country, set) in by_country {
        if set.bona_fide.is_empty() || set.attacks.is_empty() {
            report.skipped.insert(
                country,
                SkippedCountry {
                    n_bona_fide: set.bona_fide.len(),
                    n_attack: set.n_attack(),
                    reason: "only one class present".into(),
                },
            );
            continue;
        }
        let (r, curve) = country_report(&set)?;
        report.countries.insert(country.clone(), r);
        curves.insert(country, curve);
    }
    Ok((report, curves))
}

pub fn scores_to_csv<T: Scalar>(scores: &[ScoredSample<T>]) -> String {
    let mut out = String::from("sample_id,country,label,pais,score\n");
    for s in scores {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            s.sample_id,
            s.country,
            s.label.code(),
            s.pais,
            s.score
        );
    }
    out
}

pub fn scores_from_csv<T: Scalar, R: std::io::Read>(reader: R) -> Result<Vec<ScoredSample<T>>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Header(e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["sample_id", "country", "label", "pais", "score"] {
        return Err(Error::Header(
            "score CSV header must be `sample_id,country,label,pais,score`".into(),
        ));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Row {
            row,
            message: e.to_string(),
        })?;
        let bad = |message: &str| Error::Row {
            row,
            message: message.to_string(),
        };
        if rec.len() != 5 {
            return Err(bad("expected 5 columns"));
        }
        let label = Label::from_code(&rec[2]).ok_or_else(|| bad("label must be 0 or 1"))?;
        let score = rec[4]
            .parse::<T>()
            .map_err(|_| bad("score is not a number"))?;
        let pais = match (label, rec[3].is_empty()) {
            (Label::Attack, true) => SINGLE_PAIS.to_string(),
            _ => rec[3].to_string(),
        };
        out.push(ScoredSample {
            sample_id: rec[0].to_string(),
            country: rec[1].to_string(),
            label,
            pais,
            score,
        });
    }
    Ok(out)
}
