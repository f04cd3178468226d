//! ISO/IEC 30107-3 presentation attack detection metrics.
//!
//! Scores are bona fide posteriors in `[0, 1]`. A presentation is decided
//! bona fide iff `score >= threshold`. APCER is the fraction of attack
//! presentations decided bona fide (per PAIS, worst case across PAIS), BPCER
//! the fraction of bona fide presentations decided attack.
//!
//! EER and BPCER@AP interpolate linearly between adjacent DET points when the
//! target rate is not attained exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// PAIS key used when all screen sources are treated as one attack species.
pub const SINGLE_PAIS: &str = "screen_display";

/// Operating points reported per country.
pub const REPORT_AP: [u32; 3] = [10, 20, 100];

pub fn decide<T: Scalar>(score: T, threshold: T) -> Label {
    if score >= threshold {
        Label::BonaFide
    } else {
        Label::Attack
    }
}

fn fraction<T: Scalar>(count: usize, total: usize) -> T {
    T::from_usize_lossy(count) / T::from_usize_lossy(total)
}

/// `1 − (1/N_PAIS) Σ RES_i`, with `RES_i = 1` when attack `i` is decided attack.
pub fn apcer<T: Scalar>(attack_scores: &[T], threshold: T) -> Result<T> {
    if attack_scores.is_empty() {
        return Err(Error::EmptyPopulation("attack scores"));
    }
    // Counting accepted attacks rather than complementing the detected ones
    // keeps k/n exact, so rates compare exactly against targets such as 1/20.
    let accepted = attack_scores
        .iter()
        .filter(|&&s| decide(s, threshold) == Label::BonaFide)
        .count();
    Ok(fraction(accepted, attack_scores.len()))
}

pub fn apcer_worst_case<T: Scalar>(attacks: &BTreeMap<String, Vec<T>>, threshold: T) -> Result<T> {
    if attacks.is_empty() {
        return Err(Error::EmptyPopulation("PAIS map"));
    }
    attacks
        .values()
        .map(|s| apcer(s, threshold))
        .try_fold(T::zero(), |m, a| a.map(|a| m.max(a)))
}

/// `Σ RES_i / N_BF`, with `RES_i = 1` when bona fide `i` is decided attack.
pub fn bpcer<T: Scalar>(bona_fide_scores: &[T], threshold: T) -> Result<T> {
    if bona_fide_scores.is_empty() {
        return Err(Error::EmptyPopulation("bona fide scores"));
    }
    let rejected = bona_fide_scores
        .iter()
        .filter(|&&s| decide(s, threshold) == Label::Attack)
        .count();
    Ok(fraction(rejected, bona_fide_scores.len()))
}

/// Bona fide scores and attack scores keyed by PAIS.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreSet<T> {
    pub bona_fide: Vec<T>,
    pub attacks: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> ScoreSet<T> {
    /// Single-PAIS score set.
    pub fn new(bona_fide: Vec<T>, attacks: Vec<T>) -> Self {
        let mut map = BTreeMap::new();
        map.insert(SINGLE_PAIS.to_string(), attacks);
        ScoreSet {
            bona_fide,
            attacks: map,
        }
    }

    pub fn n_attack(&self) -> usize {
        self.attacks.values().map(Vec::len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.bona_fide.is_empty() {
            return Err(Error::EmptyPopulation("bona fide scores"));
        }
        if self.attacks.is_empty() || self.attacks.values().any(Vec::is_empty) {
            return Err(Error::EmptyPopulation("attack scores"));
        }
        let bad = self
            .bona_fide
            .iter()
            .chain(self.attacks.values().flatten())
            .find(|s| !(s.is_finite() && **s >= T::zero() && **s <= T::one()));
        match bad {
            Some(s) => Err(Error::InvalidScore(s.as_f64())),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint<T> {
    pub threshold: T,
    pub apcer: T,
    pub bpcer: T,
}

/// Threshold-swept (worst-case APCER, BPCER) points, thresholds strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct DetCurve<T> {
    pub points: Vec<DetPoint<T>>,
}

/// Sweeps every distinct score as a threshold, plus a `0` sentinel below
/// (when no score is `0`) and a sentinel above every score: `1` when all
/// scores are below `1`, otherwise `+inf`. The first point therefore has
/// `(apcer, bpcer) = (1, 0)` and the last `(0, 1)`.
pub fn det_curve<T: Scalar>(scores: &ScoreSet<T>) -> Result<DetCurve<T>> {
    scores.validate()?;
    let mut thresholds: Vec<T> = scores
        .bona_fide
        .iter()
        .chain(scores.attacks.values().flatten())
        .copied()
        .collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).expect("scores are finite"));
    thresholds.dedup();
    if thresholds[0] > T::zero() {
        thresholds.insert(0, T::zero());
    }
    let top = *thresholds.last().expect("nonempty");
    thresholds.push(if top < T::one() {
        T::one()
    } else {
        T::infinity()
    });

    // Sorted copies let each rate be read off with a binary search.
    let sorted = |v: &[T]| {
        let mut v = v.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        v
    };
    let bf = sorted(&scores.bona_fide);
    let pais: Vec<Vec<T>> = scores.attacks.values().map(|v| sorted(v)).collect();
    let below = |v: &[T], t: T| v.partition_point(|&s| s < t);

    let points = thresholds
        .into_iter()
        .map(|t| {
            let bpcer = fraction(below(&bf, t), bf.len());
            let apcer = pais
                .iter()
                .map(|v| fraction::<T>(v.len() - below(v, t), v.len()))
                .fold(T::zero(), |m, a| m.max(a));
            DetPoint {
                threshold: t,
                apcer,
                bpcer,
            }
        })
        .collect();
    Ok(DetCurve { points })
}

/// Equal error rate: the exact equality point if one exists, otherwise the
/// linear interpolation across the first sign change of `apcer − bpcer`.
pub fn eer<T: Scalar>(curve: &DetCurve<T>) -> T {
    let pts = &curve.points;
    if let Some(p) = pts.iter().find(|p| p.apcer == p.bpcer) {
        return p.apcer;
    }
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let da = a.apcer - a.bpcer;
        let db = b.apcer - b.bpcer;
        if da > T::zero() && db < T::zero() {
            let lambda = da / (da - db);
            return a.apcer + lambda * (b.apcer - a.apcer);
        }
    }
    // Unreachable for curves produced by `det_curve`, whose endpoints bracket zero.
    let mid = pts[pts.len() / 2];
    (mid.apcer + mid.bpcer) / T::lit(2.0)
}

/// BPCER at the smallest threshold whose worst-case APCER is at most `1/ap`,
/// interpolated against the preceding point when `1/ap` is not hit exactly.
pub fn bpcer_at_ap<T: Scalar>(curve: &DetCurve<T>, ap: u32) -> T {
    let target = T::one() / T::from_u32(ap.max(1)).expect("ap representable");
    let pts = &curve.points;
    let j = pts
        .iter()
        .position(|p| p.apcer <= target)
        .unwrap_or(pts.len() - 1);
    let hit = pts[j];
    if hit.apcer == target || j == 0 {
        return hit.bpcer;
    }
    let prev = pts[j - 1];
    let lambda = (prev.apcer - target) / (prev.apcer - hit.apcer);
    prev.bpcer + lambda * (hit.bpcer - prev.bpcer)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountryReport {
    pub eer: f64,
    pub bpcer10: f64,
    pub bpcer20: f64,
    pub bpcer100: f64,
    pub n_bona_fide: usize,
    pub n_attack: usize,
}

/// A country that could not be scored (e.g. only one class present).
#[derive(Debug, Clone, PartialEq)]
pub struct SkippedCountry {
    pub n_bona_fide: usize,
    pub n_attack: usize,
    pub reason: String,
}

/// Per-country summary in the layout of a results table.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PadReport {
    pub countries: BTreeMap<String, CountryReport>,
    pub skipped: BTreeMap<String, SkippedCountry>,
}

pub fn country_report<T: Scalar>(scores: &ScoreSet<T>) -> Result<(CountryReport, DetCurve<T>)> {
    let curve = det_curve(scores)?;
    let report = CountryReport {
        eer: eer(&curve).as_f64(),
        bpcer10: bpcer_at_ap(&curve, 10).as_f64(),
        bpcer20: bpcer_at_ap(&curve, 20).as_f64(),
        bpcer100: bpcer_at_ap(&curve, 100).as_f64(),
        n_bona_fide: scores.bona_fide.len(),
        n_attack: scores.n_attack(),
    };
    Ok((report, curve))
}

pub fn build_report<T: Scalar>(scores: &BTreeMap<String, ScoreSet<T>>) -> Result<PadReport> {
    let mut report = PadReport::default();
    for (country, s) in scores {
        let (r, _) = country_report(s)?;
        report.countries.insert(country.clone(), r);
    }
    Ok(report)
}

impl PadReport {
    /// JSON object keyed by country. Skipped countries keep the same fields
    /// with `null` rates.
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for (c, r) in &self.countries {
            map.insert(c.clone(), serde_json::to_value(r).expect("plain struct"));
        }
        for (c, s) in &self.skipped {
            map.insert(
                c.clone(),
                serde_json::json!({
                    "eer": null,
                    "bpcer10": null,
                    "bpcer20": null,
                    "bpcer100": null,
                    "n_bona_fide": s.n_bona_fide,
                    "n_attack": s.n_attack,
                }),
            );
        }
        serde_json::Value::Object(map)
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::InvalidSpec("report JSON must be an object".into()))?;
        let mut report = PadReport::default();
        for (c, v) in obj {
            if v.get("eer").is_some_and(|e| e.is_null()) {
                let count = |k: &str| v.get(k).and_then(|x| x.as_u64()).unwrap_or(0) as usize;
                report.skipped.insert(
                    c.clone(),
                    SkippedCountry {
                        n_bona_fide: count("n_bona_fide"),
                        n_attack: count("n_attack"),
                        reason: "skipped".into(),
                    },
                );
            } else {
                let r: CountryReport = serde_json::from_value(v.clone())
                    .map_err(|e| Error::InvalidSpec(format!("country `{c}`: {e}")))?;
                report.countries.insert(c.clone(), r);
            }
        }
        Ok(report)
    }
}

/// `threshold,apcer,bpcer` CSV with shortest round-trip float formatting.
pub fn det_to_csv<T: Scalar>(curve: &DetCurve<T>) -> String {
    let mut out = String::from("threshold,apcer,bpcer\n");
    for p in &curve.points {
        let _ = writeln!(out, "{},{},{}", p.threshold, p.apcer, p.bpcer);
    }
    out
}

pub fn det_from_csv<T: Scalar, R: Read>(reader: R) -> Result<DetCurve<T>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Header(e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["threshold", "apcer", "bpcer"] {
        return Err(Error::Header(
            "DET CSV header must be `threshold,apcer,bpcer`".into(),
        ));
    }
    let mut points = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Row {
            row,
            message: e.to_string(),
        })?;
        let field = |k: usize| {
            rec.get(k)
                .and_then(|s| s.parse::<T>().ok())
                .ok_or_else(|| Error::Row {
                    row,
                    message: format!("column {k} is not a number"),
                })
        };
        points.push(DetPoint {
            threshold: field(0)?,
            apcer: field(1)?,
            bpcer: field(2)?,
        });
    }
    if points.len() < 2 {
        return Err(Error::EmptyPopulation("DET curve points"));
    }
    Ok(DetCurve { points })
}

pub fn write_det_csv<T: Scalar>(curve: &DetCurve<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, det_to_csv(curve)).map_err(|e| Error::io(path, e))
}
