//! Labeled feature-vector samples, feature-table I/O, user-disjoint splits and
//! per-dimension standardization.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Screen source recorded for bona fide captures.
pub const NO_SCREEN: &str = "none";

/// Minimum divisor used when standardizing a (near) constant dimension.
pub const STD_FLOOR: f64 = 1e-8;

const FIXED_COLUMNS: [&str; 5] = ["sample_id", "country", "user_id", "screen_source", "label"];

/// Binary presentation class. The numeric codes are the ones written to feature tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Attack = 0,
    BonaFide = 1,
}

impl Label {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: &str) -> Option<Self> {
        match code {
            "0" => Some(Label::Attack),
            "1" => Some(Label::BonaFide),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Attack => f.write_str("attack"),
            Label::BonaFide => f.write_str("bona_fide"),
        }
    }
}

/// One labeled feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub sample_id: String,
    pub country: String,
    pub user_id: String,
    pub screen_source: String,
    pub label: Label,
    pub features: Vec<T>,
}

/// Returns true when `s` is a non-empty identifier made of `[A-Za-z0-9_-]`.
pub fn is_identifier(s: &str) -> bool {
    !s.is_empty()
        && s.bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

/// A nonempty, dimension-homogeneous collection of samples with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    samples: Vec<Sample<T>>,
    dimension: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(samples: Vec<Sample<T>>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidDataset("dataset has no samples".into()))?;
        let dimension = first.features.len();
        if dimension == 0 {
            return Err(Error::InvalidDataset(
                "feature dimension must be positive".into(),
            ));
        }
        let mut seen = HashSet::with_capacity(samples.len());
        for s in &samples {
            if s.features.len() != dimension {
                return Err(Error::DimensionMismatch {
                    expected: dimension,
                    found: s.features.len(),
                });
            }
            if let Some(v) = s.features.iter().find(|v| !v.is_finite()) {
                return Err(Error::InvalidDataset(format!(
                    "sample `{}` has non-finite feature {v}",
                    s.sample_id
                )));
            }
            if !seen.insert(s.sample_id.as_str()) {
                return Err(Error::InvalidDataset(format!(
                    "duplicate sample_id `{}`",
                    s.sample_id
                )));
            }
        }
        Ok(Dataset { samples, dimension })
    }

    pub fn samples(&self) -> &[Sample<T>] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Sample<T>> {
        self.samples
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Distinct countries in first-appearance order.
    pub fn countries(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.samples
            .iter()
            .filter(|s| seen.insert(s.country.as_str()))
            .map(|s| s.country.clone())
            .collect()
    }

    /// Distinct user ids, sorted.
    pub fn users(&self) -> BTreeSet<String> {
        self.samples.iter().map(|s| s.user_id.clone()).collect()
    }

    /// Samples whose country is in `countries`, or `None` if nothing matches.
    pub fn filter_countries(&self, countries: &[String]) -> Option<Self> {
        self.filter(|s| countries.contains(&s.country))
    }

    pub fn filter(&self, mut keep: impl FnMut(&Sample<T>) -> bool) -> Option<Self> {
        let samples: Vec<_> = self.samples.iter().filter(|s| keep(s)).cloned().collect();
        if samples.is_empty() {
            None
        } else {
            Some(Dataset {
                samples,
                dimension: self.dimension,
            })
        }
    }

    /// Concatenates two datasets of the same dimension; ids must stay unique.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        let mut samples = self.samples.clone();
        samples.extend(other.samples.iter().cloned());
        Dataset::new(samples)
    }
}

/// Parses a feature table from any reader. Row numbers in errors count data
/// rows from 1 (the header is row 0).
pub fn read_feature_table<T: Scalar, R: Read>(reader: R) -> Result<Dataset<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::None)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => return Err(Error::Header(e.to_string())),
        None => return Err(Error::Header("file is empty".into())),
    };
    let dimension = parse_header(&header)?;

    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (i, record) in records.enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Row {
            row,
            message: e.to_string(),
        })?;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if record.len() < FIXED_COLUMNS.len() {
            return Err(Error::Row {
                row,
                message: format!("expected at least {} columns", FIXED_COLUMNS.len()),
            });
        }
        let found = record.len() - FIXED_COLUMNS.len();
        if found != dimension {
            return Err(Error::RowDimension {
                row,
                expected: dimension,
                found,
            });
        }
        for (name, value) in FIXED_COLUMNS.iter().zip(record.iter()).take(4) {
            if !is_identifier(value) {
                return Err(Error::Row {
                    row,
                    message: format!("{name} `{value}` is not an identifier of [A-Za-z0-9_-]"),
                });
            }
        }
        let label = Label::from_code(&record[4]).ok_or_else(|| Error::Row {
            row,
            message: format!("label `{}` is not 0 or 1", &record[4]),
        })?;
        let features = record
            .iter()
            .skip(FIXED_COLUMNS.len())
            .enumerate()
            .map(|(j, v)| match v.parse::<T>() {
                Ok(x) if x.is_finite() => Ok(x),
                _ => Err(Error::Row {
                    row,
                    message: format!("feature f{j} `{v}` is not a finite number"),
                }),
            })
            .collect::<Result<Vec<T>>>()?;
        let sample_id = record[0].to_string();
        if !seen.insert(sample_id.clone()) {
            return Err(Error::DuplicateSample { row, sample_id });
        }
        samples.push(Sample {
            sample_id,
            country: record[1].to_string(),
            user_id: record[2].to_string(),
            screen_source: record[3].to_string(),
            label,
            features,
        });
    }
    Dataset::new(samples)
}

fn parse_header(header: &csv::StringRecord) -> Result<usize> {
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() <= FIXED_COLUMNS.len() || cols[..FIXED_COLUMNS.len()] != FIXED_COLUMNS {
        return Err(Error::Header(format!(
            "must start with `{}` followed by f0..f{{d-1}}",
            FIXED_COLUMNS.join(",")
        )));
    }
    for (j, name) in cols[FIXED_COLUMNS.len()..].iter().enumerate() {
        if *name != format!("f{j}") {
            return Err(Error::Header(format!("column `{name}` should be `f{j}`")));
        }
    }
    Ok(cols.len() - FIXED_COLUMNS.len())
}

pub fn load_feature_table<T: Scalar>(path: impl AsRef<Path>) -> Result<Dataset<T>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_feature_table(std::io::BufReader::new(file))
}

/// Writes the feature table; floats use the shortest round-trip representation.
pub fn write_feature_table_to<T: Scalar, W: Write>(ds: &Dataset<T>, writer: W) -> Result<()> {
    let io_err = |e: csv::Error| Error::InvalidDataset(format!("write failed: {e}"));
    let mut wtr = csv::WriterBuilder::new().from_writer(writer);
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..ds.dimension()).map(|j| format!("f{j}")));
    wtr.write_record(&header).map_err(io_err)?;
    for s in ds.samples() {
        let mut row = vec![
            s.sample_id.clone(),
            s.country.clone(),
            s.user_id.clone(),
            s.screen_source.clone(),
            s.label.code().to_string(),
        ];
        row.extend(s.features.iter().map(|v| v.to_string()));
        wtr.write_record(&row).map_err(io_err)?;
    }
    wtr.flush()
        .map_err(|e| Error::InvalidDataset(format!("write failed: {e}")))
}

pub fn write_feature_table<T: Scalar>(ds: &Dataset<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_feature_table_to(ds, std::io::BufWriter::new(file))
}

/// User-level train/validation/test fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_user_fraction: f64,
    pub val_user_fraction: f64,
    pub test_user_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_user_fraction: 0.6,
            val_user_fraction: 0.2,
            test_user_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let f = [
            self.train_user_fraction,
            self.val_user_fraction,
            self.test_user_fraction,
        ];
        if f.iter().any(|x| !(*x > 0.0 && *x < 1.0)) {
            return Err(Error::InvalidSpec(format!(
                "split fractions must lie in (0, 1), got {f:?}"
            )));
        }
        if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSpec(format!(
                "split fractions must sum to 1, got {f:?}"
            )));
        }
        Ok(())
    }

    /// Largest-remainder allocation of `n` users over the three fractions.
    /// Ties in the remainder go to the earlier split.
    pub fn allocate(&self, n: usize) -> [usize; 3] {
        let f = [
            self.train_user_fraction,
            self.val_user_fraction,
            self.test_user_fraction,
        ];
        let quotas: Vec<f64> = f.iter().map(|x| x * n as f64).collect();
        let mut counts: [usize; 3] = [0; 3];
        for (c, q) in counts.iter_mut().zip(&quotas) {
            *c = q.floor() as usize;
        }
        let assigned: usize = counts.iter().sum();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let ra = quotas[a] - quotas[a].floor();
            let rb = quotas[b] - quotas[b].floor();
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for &i in order.iter().take(n.saturating_sub(assigned)) {
            counts[i] += 1;
        }
        counts
    }
}

/// Partitions `ds` into train/validation/test datasets with disjoint user sets.
/// Sample order within each output follows the input order.
pub fn split_by_users<T: Scalar>(
    ds: &Dataset<T>,
    spec: &SplitSpec,
) -> Result<(Dataset<T>, Dataset<T>, Dataset<T>)> {
    spec.validate()?;
    let mut users: Vec<String> = ds.users().into_iter().collect();
    if users.len() < 3 {
        return Err(Error::InsufficientSamples(format!(
            "user split needs at least 3 users, dataset has {}",
            users.len()
        )));
    }
    let counts = spec.allocate(users.len());
    if counts.contains(&0) {
        return Err(Error::InsufficientSamples(format!(
            "{} users cannot populate all three splits with fractions ({}, {}, {})",
            users.len(),
            spec.train_user_fraction,
            spec.val_user_fraction,
            spec.test_user_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    users.shuffle(&mut rng);
    let mut assignment: BTreeMap<&str, usize> = BTreeMap::new();
    let mut start = 0;
    for (split, &count) in counts.iter().enumerate() {
        for u in &users[start..start + count] {
            assignment.insert(u.as_str(), split);
        }
        start += count;
    }
    let part = |k: usize| {
        ds.filter(|s| assignment[s.user_id.as_str()] == k)
            .expect("every split holds at least one user")
    };
    Ok((part(0), part(1), part(2)))
}

/// Per-dimension mean and (population) standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats<T> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

pub fn fit_normalization<T: Scalar>(ds: &Dataset<T>) -> NormalizationStats<T> {
    let d = ds.dimension();
    let n = T::from_usize_lossy(ds.len());
    let mut mean = vec![T::zero(); d];
    for s in ds.samples() {
        for (m, &x) in mean.iter_mut().zip(&s.features) {
            *m = *m + x;
        }
    }
    for m in &mut mean {
        *m = *m / n;
    }
    let mut var = vec![T::zero(); d];
    for s in ds.samples() {
        for ((v, &x), &m) in var.iter_mut().zip(&s.features).zip(&mean) {
            *v = *v + (x - m) * (x - m);
        }
    }
    let floor = T::lit(STD_FLOOR);
    let std = var.into_iter().map(|v| (v / n).sqrt().max(floor)).collect();
    NormalizationStats { mean, std }
}

pub fn apply_normalization<T: Scalar>(
    ds: &Dataset<T>,
    stats: &NormalizationStats<T>,
) -> Result<Dataset<T>> {
    if stats.mean.len() != ds.dimension() || stats.std.len() != ds.dimension() {
        return Err(Error::DimensionMismatch {
            expected: ds.dimension(),
            found: stats.mean.len(),
        });
    }
    let samples = ds
        .samples()
        .iter()
        .map(|s| Sample {
            features: s
                .features
                .iter()
                .zip(stats.mean.iter().zip(&stats.std))
                .map(|(&x, (&m, &sd))| (x - m) / sd)
                .collect(),
            ..s.clone()
        })
        .collect();
    Ok(Dataset {
        samples,
        dimension: ds.dimension(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, user: &str, label: Label, features: Vec<f64>) -> Sample<f64> {
        Sample {
            sample_id: id.into(),
            country: "ESP".into(),
            user_id: user.into(),
            screen_source: if label == Label::Attack {
                "scr1"
            } else {
                NO_SCREEN
            }
            .into(),
            label,
            features,
        }
    }

    fn grid(users: usize, per_user: usize) -> Dataset<f64> {
        let mut samples = Vec::new();
        for u in 0..users {
            for i in 0..per_user {
                let label = if i % 2 == 0 {
                    Label::BonaFide
                } else {
                    Label::Attack
                };
                samples.push(sample(
                    &format!("s{u}_{i}"),
                    &format!("u{u}"),
                    label,
                    vec![u as f64, i as f64, (u * i) as f64 * 0.5],
                ));
            }
        }
        Dataset::new(samples).unwrap()
    }

    const TABLE: &str = "sample_id,country,user_id,screen_source,label,f0,f1,f2,f3\n\
        a,ESP,u1,none,1,0.5,1,2,3\n\
        b,ESP,u1,scr-1,0,-0.25,1e-3,2,3\n\
        c,CHL,u2,none,1,0,0,0,0\n";

    #[test]
    fn parses_well_formed_table() {
        let ds: Dataset<f64> = read_feature_table(TABLE.as_bytes()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dimension(), 4);
        assert_eq!(ds.samples()[1].label, Label::Attack);
        assert_eq!(ds.samples()[1].features[1], 1e-3);
        assert_eq!(ds.samples()[2].country, "CHL");
    }

    #[test]
    fn reports_dimension_mismatch_with_row() {
        let bad = "sample_id,country,user_id,screen_source,label,f0,f1,f2,f3\n\
            a,ESP,u1,none,1,0,1,2,3\n\
            b,ESP,u1,none,1,0,1,2\n";
        let err = read_feature_table::<f64, _>(bad.as_bytes()).unwrap_err();
        assert!(matches!(
            err,
            Error::RowDimension {
                row: 2,
                expected: 4,
                found: 3
            }
        ));
        assert!(err.to_string().contains("row 2"));
    }

    #[test]
    fn rejects_duplicates_labels_and_headers() {
        let dup =
            "sample_id,country,user_id,screen_source,label,f0\na,E,u,none,1,0\na,E,u,none,0,1\n";
        assert!(matches!(
            read_feature_table::<f64, _>(dup.as_bytes()),
            Err(Error::DuplicateSample { row: 2, .. })
        ));
        let label = "sample_id,country,user_id,screen_source,label,f0\na,E,u,none,2,0\n";
        assert!(matches!(
            read_feature_table::<f64, _>(label.as_bytes()),
            Err(Error::Row { row: 1, .. })
        ));
        let nan = "sample_id,country,user_id,screen_source,label,f0\na,E,u,none,1,NaN\n";
        assert!(matches!(
            read_feature_table::<f64, _>(nan.as_bytes()),
            Err(Error::Row { row: 1, .. })
        ));
        let header = "id,country,user_id,screen_source,label,f0\n";
        assert!(matches!(
            read_feature_table::<f64, _>(header.as_bytes()),
            Err(Error::Header(_))
        ));
        let gap = "sample_id,country,user_id,screen_source,label,f0,f2\n";
        assert!(matches!(
            read_feature_table::<f64, _>(gap.as_bytes()),
            Err(Error::Header(_))
        ));
        let ident = "sample_id,country,user_id,screen_source,label,f0\na b,E,u,none,1,0\n";
        assert!(matches!(
            read_feature_table::<f64, _>(ident.as_bytes()),
            Err(Error::Row { row: 1, .. })
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_feature_table::<f64>("/nonexistent/table.csv").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn split_counts_follow_largest_remainder() {
        let spec = SplitSpec {
            train_user_fraction: 0.6,
            val_user_fraction: 0.2,
            test_user_fraction: 0.2,
            seed: 7,
        };
        assert_eq!(spec.allocate(10), [6, 2, 2]);
        assert_eq!(spec.allocate(11), [7, 2, 2]);
        let thirds = SplitSpec {
            train_user_fraction: 0.5,
            val_user_fraction: 0.25,
            test_user_fraction: 0.25,
            seed: 0,
        };
        assert_eq!(thirds.allocate(3), [1, 1, 1]);
    }

    #[test]
    fn split_is_user_disjoint_and_deterministic() {
        let ds = grid(10, 10);
        let spec = SplitSpec {
            seed: 7,
            ..SplitSpec::default()
        };
        let (a, b, c) = split_by_users(&ds, &spec).unwrap();
        assert_eq!(
            (a.users().len(), b.users().len(), c.users().len()),
            (6, 2, 2)
        );
        assert!(a.users().is_disjoint(&b.users()));
        assert!(a.users().is_disjoint(&c.users()));
        assert!(b.users().is_disjoint(&c.users()));
        assert_eq!(a.len() + b.len() + c.len(), 100);
        let again = split_by_users(&ds, &spec).unwrap();
        assert_eq!((a, b, c), again);
    }

    #[test]
    fn split_rejects_too_few_users() {
        let ds = grid(2, 4);
        assert!(matches!(
            split_by_users(&ds, &SplitSpec::default()),
            Err(Error::InsufficientSamples(_))
        ));
        let skewed = SplitSpec {
            train_user_fraction: 0.9,
            val_user_fraction: 0.05,
            test_user_fraction: 0.05,
            seed: 0,
        };
        assert!(split_by_users(&grid(5, 2), &skewed).is_err());
        let bad = SplitSpec {
            train_user_fraction: 0.5,
            val_user_fraction: 0.5,
            test_user_fraction: 0.5,
            seed: 0,
        };
        assert!(matches!(bad.validate(), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn normalization_of_constant_and_symmetric_dims() {
        let ds = Dataset::new(vec![
            sample("a", "u", Label::BonaFide, vec![0.0, 5.0]),
            sample("b", "u", Label::Attack, vec![2.0, 5.0]),
        ])
        .unwrap();
        let stats = fit_normalization(&ds);
        let out = apply_normalization(&ds, &stats).unwrap();
        assert_eq!(out.samples()[0].features, vec![-1.0, 0.0]);
        assert_eq!(out.samples()[1].features, vec![1.0, 0.0]);
        assert_eq!(stats.std[1], STD_FLOOR);
    }

    #[test]
    fn normalization_standardizes_and_is_idempotent() {
        let ds = grid(7, 9);
        let out = apply_normalization(&ds, &fit_normalization(&ds)).unwrap();
        let refit = fit_normalization(&out);
        for j in 0..3 {
            assert!(refit.mean[j].abs() < 1e-9);
            assert!((refit.std[j] - 1.0).abs() < 1e-9);
        }
        let twice = apply_normalization(&out, &refit).unwrap();
        for (x, y) in out.samples().iter().zip(twice.samples()) {
            for (a, b) in x.features.iter().zip(&y.features) {
                assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn stats_from_train_apply_to_test() {
        let ds = grid(10, 10);
        let (train, _, test) = split_by_users(&ds, &SplitSpec::default()).unwrap();
        let stats = fit_normalization(&train);
        let out = apply_normalization(&test, &stats).unwrap();
        let test_mean = fit_normalization(&out).mean;
        // Users differ in f0, so the held-out users cannot be centred by train stats.
        assert!(test_mean[0].abs() > 1e-3);
        let short = NormalizationStats {
            mean: vec![0.0],
            std: vec![1.0],
        };
        assert!(matches!(
            apply_normalization(&test, &short),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn dataset_invariants() {
        assert!(Dataset::<f64>::new(vec![]).is_err());
        let mixed = vec![
            sample("a", "u", Label::BonaFide, vec![0.0, 1.0]),
            sample("b", "u", Label::BonaFide, vec![0.0]),
        ];
        assert!(matches!(
            Dataset::new(mixed),
            Err(Error::DimensionMismatch { .. })
        ));
        let inf = vec![sample("a", "u", Label::BonaFide, vec![f64::INFINITY])];
        assert!(Dataset::new(inf).is_err());
    }
}
