//! Stratified episode sampling and new-country support extension.
//!
//! Every episode is a pure function of `(dataset, spec, draw_index)`: the RNG is
//! ChaCha8 keyed by `spec.seed` with `draw_index` selecting the stream, so
//! episodes can be drawn in any order or in parallel.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Label, Sample};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Stream reserved for extension user/image selection, far from episode draws.
const EXTENSION_STREAM: u64 = u64::MAX;

fn default_class_set() -> Vec<Label> {
    vec![Label::Attack, Label::BonaFide]
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    #[serde(default = "default_class_set")]
    pub class_set: Vec<Label>,
    pub shots_per_country_class: usize,
    pub support_countries: Vec<String>,
    pub query_size: usize,
    #[serde(default = "default_true")]
    pub query_balance: bool,
    #[serde(default)]
    pub seed: u64,
    /// Per-country restriction of the samples support may be drawn from.
    /// Countries absent from the map are unrestricted.
    #[serde(default)]
    pub support_pools: BTreeMap<String, BTreeSet<String>>,
}

impl EpisodeSpec {
    /// Two countries × two classes × two shots, 42 balanced queries.
    pub fn baseline(countries: &[&str], seed: u64) -> Self {
        EpisodeSpec {
            class_set: default_class_set(),
            shots_per_country_class: 2,
            support_countries: countries.iter().map(|c| c.to_string()).collect(),
            query_size: 42,
            query_balance: true,
            seed,
            support_pools: BTreeMap::new(),
        }
    }

    pub fn support_size(&self) -> usize {
        self.support_countries.len() * self.class_set.len() * self.shots_per_country_class
    }

    pub fn class_index(&self, label: Label) -> Option<usize> {
        self.class_set.iter().position(|&l| l == label)
    }

    pub fn validate(&self) -> Result<()> {
        let unique: BTreeSet<_> = self.class_set.iter().collect();
        if self.class_set.is_empty() || unique.len() != self.class_set.len() {
            return Err(Error::InvalidSpec(
                "class_set must be nonempty and unique".into(),
            ));
        }
        let countries: BTreeSet<_> = self.support_countries.iter().collect();
        if self.support_countries.is_empty() || countries.len() != self.support_countries.len() {
            return Err(Error::InvalidSpec(
                "support_countries must be nonempty and unique".into(),
            ));
        }
        if self.shots_per_country_class == 0 || self.query_size == 0 {
            return Err(Error::InvalidSpec(
                "shots_per_country_class and query_size must be positive".into(),
            ));
        }
        if self.query_balance && !self.query_size.is_multiple_of(self.class_set.len()) {
            return Err(Error::InvalidSpec(format!(
                "balanced query_size {} is not divisible by {} classes",
                self.query_size,
                self.class_set.len()
            )));
        }
        Ok(())
    }

    /// Same spec with a different seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        EpisodeSpec {
            seed,
            ..self.clone()
        }
    }
}

/// Support and query samples of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode<T> {
    pub class_set: Vec<Label>,
    pub support: Vec<Sample<T>>,
    pub query: Vec<Sample<T>>,
    /// False when the dataset could not supply queries from users outside the
    /// support; support and query are then only sample-disjoint.
    pub user_disjoint: bool,
}

impl<T: Scalar> Episode<T> {
    pub fn class_of(&self, s: &Sample<T>) -> usize {
        self.class_set
            .iter()
            .position(|&l| l == s.label)
            .expect("episode samples carry labels from the class set")
    }

    pub fn support_classes(&self) -> Vec<usize> {
        self.support.iter().map(|s| self.class_of(s)).collect()
    }

    pub fn query_classes(&self) -> Vec<usize> {
        self.query.iter().map(|s| self.class_of(s)).collect()
    }
}

pub(crate) fn episode_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, candidates: &[&'a Sample<T>], n: usize) -> Vec<&'a Sample<T>> {
    index::sample(rng, candidates.len(), n)
        .into_iter()
        .map(|i| candidates[i])
        .collect()
}

/// Draws support samples for every (support country, class) cell.
pub fn sample_support<T: Scalar>(
    ds: &Dataset<T>,
    spec: &EpisodeSpec,
    draw_index: u64,
) -> Result<Vec<Sample<T>>> {
    let mut rng = episode_rng(spec.seed, draw_index);
    support_with_rng(ds, spec, &mut rng).map(|v| v.into_iter().cloned().collect())
}

fn support_with_rng<'a, T: Scalar>(
    ds: &'a Dataset<T>,
    spec: &EpisodeSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<&'a Sample<T>>> {
    spec.validate()?;
    let mut support = Vec::with_capacity(spec.support_size());
    for country in &spec.support_countries {
        let pool = spec.support_pools.get(country);
        for &label in &spec.class_set {
            let cell: Vec<&Sample<T>> = ds
                .samples()
                .iter()
                .filter(|s| &s.country == country && s.label == label)
                .filter(|s| pool.is_none_or(|p| p.contains(&s.sample_id)))
                .collect();
            if cell.len() < spec.shots_per_country_class {
                return Err(Error::InsufficientSamples(format!(
                    "support cell ({country}, {label}) has {} samples, needs {}",
                    cell.len(),
                    spec.shots_per_country_class
                )));
            }
            support.extend(pick(rng, &cell, spec.shots_per_country_class));
        }
    }
    Ok(support)
}

/// Samples one episode. Queries come from the whole dataset minus the support,
/// preferring users that contributed no support sample.
pub fn sample_episode<T: Scalar>(
    ds: &Dataset<T>,
    spec: &EpisodeSpec,
    draw_index: u64,
) -> Result<Episode<T>> {
    let mut rng = episode_rng(spec.seed, draw_index);
    let support = support_with_rng(ds, spec, &mut rng)?;
    let support_ids: HashSet<&str> = support.iter().map(|s| s.sample_id.as_str()).collect();
    let support_users: HashSet<&str> = support.iter().map(|s| s.user_id.as_str()).collect();

    let eligible = |user_disjoint: bool| -> Vec<Vec<&Sample<T>>> {
        spec.class_set
            .iter()
            .map(|&label| {
                ds.samples()
                    .iter()
                    .filter(|s| s.label == label && !support_ids.contains(s.sample_id.as_str()))
                    .filter(|s| !user_disjoint || !support_users.contains(s.user_id.as_str()))
                    .collect()
            })
            .collect()
    };
    let feasible = |cells: &[Vec<&Sample<T>>]| {
        if spec.query_balance {
            let per = spec.query_size / spec.class_set.len();
            cells.iter().all(|c| c.len() >= per)
        } else {
            cells.iter().map(Vec::len).sum::<usize>() >= spec.query_size
        }
    };

    let strict = eligible(true);
    let (cells, user_disjoint) = if feasible(&strict) {
        (strict, true)
    } else {
        let relaxed = eligible(false);
        if !feasible(&relaxed) {
            return Err(Error::InsufficientSamples(format!(
                "dataset cannot supply {} {}query samples outside the support",
                spec.query_size,
                if spec.query_balance { "balanced " } else { "" }
            )));
        }
        (relaxed, false)
    };

    let query: Vec<&Sample<T>> = if spec.query_balance {
        let per = spec.query_size / spec.class_set.len();
        cells.iter().flat_map(|c| pick(&mut rng, c, per)).collect()
    } else {
        let mut all: Vec<&Sample<T>> = cells.into_iter().flatten().collect();
        all.sort_by_key(|s| s.sample_id.as_str());
        pick(&mut rng, &all, spec.query_size)
    };

    Ok(Episode {
        class_set: spec.class_set.clone(),
        support: support.into_iter().cloned().collect(),
        query: query.into_iter().cloned().collect(),
        user_disjoint,
    })
}

fn default_new_users() -> usize {
    5
}

fn default_images_per_source() -> usize {
    15
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtensionSpec {
    pub new_country: String,
    #[serde(default = "default_new_users")]
    pub n_new_users: usize,
    #[serde(default = "default_images_per_source")]
    pub images_per_screen_source: usize,
}

impl ExtensionSpec {
    pub fn new(new_country: &str) -> Self {
        ExtensionSpec {
            new_country: new_country.to_string(),
            n_new_users: default_new_users(),
            images_per_screen_source: default_images_per_source(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_new_users == 0 {
            return Err(Error::InvalidSpec("n_new_users must be at least 1".into()));
        }
        if self.images_per_screen_source == 0 {
            return Err(Error::InvalidSpec(
                "images_per_screen_source must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// What an extension added to the support pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtensionSummary {
    pub new_country: String,
    pub selected_users: Vec<String>,
    /// Images kept per screen source (`none` holds the bona fide captures).
    pub images_per_source: BTreeMap<String, usize>,
    pub bona_fide_images: usize,
    pub attack_images: usize,
    pub added_images: usize,
}

/// Adds `ext.new_country` to the support countries. Its support is restricted
/// to `ext.n_new_users` randomly chosen identities and at most
/// `ext.images_per_screen_source` images per screen source, bona fide
/// captures counting as the `none` source.
pub fn extend_support<T: Scalar>(
    base: &EpisodeSpec,
    ds_new: &Dataset<T>,
    ext: &ExtensionSpec,
) -> Result<(EpisodeSpec, ExtensionSummary)> {
    ext.validate()?;
    base.validate()?;
    let country: Vec<&Sample<T>> = ds_new
        .samples()
        .iter()
        .filter(|s| s.country == ext.new_country)
        .collect();
    let users: BTreeSet<&str> = country.iter().map(|s| s.user_id.as_str()).collect();
    if users.len() < ext.n_new_users {
        return Err(Error::InsufficientSamples(format!(
            "new country {} has {} users, extension needs {}",
            ext.new_country,
            users.len(),
            ext.n_new_users
        )));
    }
    let mut rng = episode_rng(base.seed, EXTENSION_STREAM);
    let mut users: Vec<&str> = users.into_iter().collect();
    users.shuffle(&mut rng);
    let mut selected: Vec<String> = users[..ext.n_new_users]
        .iter()
        .map(|u| u.to_string())
        .collect();
    selected.sort();

    let mut by_source: BTreeMap<&str, Vec<&Sample<T>>> = BTreeMap::new();
    for s in &country {
        if selected.binary_search(&s.user_id).is_ok() {
            by_source
                .entry(s.screen_source.as_str())
                .or_default()
                .push(s);
        }
    }
    let mut pool = BTreeSet::new();
    let mut images_per_source = BTreeMap::new();
    let (mut bona_fide_images, mut attack_images) = (0, 0);
    for (source, samples) in &by_source {
        let keep = samples.len().min(ext.images_per_screen_source);
        for s in pick(&mut rng, samples, keep) {
            pool.insert(s.sample_id.clone());
            match s.label {
                Label::BonaFide => bona_fide_images += 1,
                Label::Attack => attack_images += 1,
            }
        }
        images_per_source.insert(source.to_string(), keep);
    }
    for &label in &base.class_set {
        let have = match label {
            Label::BonaFide => bona_fide_images,
            Label::Attack => attack_images,
        };
        if have < base.shots_per_country_class {
            return Err(Error::InsufficientSamples(format!(
                "selected {} users of {} provide {have} {label} images, support needs {}",
                ext.n_new_users, ext.new_country, base.shots_per_country_class
            )));
        }
    }

    let mut spec = base.clone();
    if !spec.support_countries.contains(&ext.new_country) {
        spec.support_countries.push(ext.new_country.clone());
    }
    let added_images = pool.len();
    spec.support_pools.insert(ext.new_country.clone(), pool);
    Ok((
        spec,
        ExtensionSummary {
            new_country: ext.new_country.clone(),
            selected_users: selected,
            images_per_source,
            bona_fide_images,
            attack_images,
            added_images,
        },
    ))
}
