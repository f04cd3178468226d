//! Synthetic feature datasets with country, user, class and screen-source
//! structure.
//!
//! A sample is `country_mean + class_offset + user_offset + noise`, plus a
//! screen artifact for attacks. The class offset is `±separation/2` along the
//! country's class axis (bona fide positive), which is the first coordinate
//! axis rotated toward the second by the country's `class_axis_angle_deg`.
//! A screen artifact is a fixed per-source offset plus a sinusoid along a
//! per-source random direction, driven by the image index.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Label, Sample, NO_SCREEN};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountrySpec {
    pub code: String,
    pub users: usize,
    pub screen_sources: usize,
    /// Rotation of this country's class axis away from the shared one.
    #[serde(default)]
    pub class_axis_angle_deg: f64,
}

impl CountrySpec {
    pub fn new(code: &str, users: usize, screen_sources: usize) -> Self {
        CountrySpec {
            code: code.to_string(),
            users,
            screen_sources,
            class_axis_angle_deg: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub countries: Vec<CountrySpec>,
    pub images_per_user_per_condition: usize,
    pub dimension: usize,
    pub class_separation: f64,
    pub country_spread: f64,
    pub screen_artifact_scale: f64,
    pub user_offset_scale: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            countries: vec![
                CountrySpec::new("ESP", 20, 4),
                CountrySpec::new("CHL", 20, 4),
            ],
            images_per_user_per_condition: 5,
            dimension: 16,
            class_separation: 10.0,
            country_spread: 2.0,
            screen_artifact_scale: 1.0,
            user_offset_scale: 0.5,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Country sizes shaped like the four-country corpus (users, screen sources),
    /// scaled down to five images per condition.
    pub fn four_country(seed: u64) -> Self {
        SyntheticSpec {
            countries: vec![
                CountrySpec::new("ESP", 54, 11),
                CountrySpec::new("CHL", 30, 9),
                CountrySpec::new("ARG", 30, 9),
                CountrySpec::new("CRI", 30, 5),
            ],
            images_per_user_per_condition: 5,
            seed,
            ..SyntheticSpec::default()
        }
    }

    /// Two countries whose classes a nearest-class-mean rule separates
    /// without error: separation ten times the noise, mild screen artifacts.
    pub fn separable(seed: u64) -> Self {
        SyntheticSpec {
            countries: vec![
                CountrySpec::new("ESP", 40, 4),
                CountrySpec::new("CHL", 40, 4),
            ],
            images_per_user_per_condition: 10,
            screen_artifact_scale: 0.25,
            seed,
            ..SyntheticSpec::default()
        }
    }

    /// [`separable`](Self::separable) plus `CRI`, whose class axis is turned
    /// 90° away from the shared one, so prototypes of the other countries
    /// carry no information about it.
    pub fn displaced(seed: u64) -> Self {
        let mut spec = Self::separable(seed);
        spec.countries.push(CountrySpec {
            class_axis_angle_deg: 90.0,
            ..CountrySpec::new("CRI", 30, 5)
        });
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if self.countries.is_empty() {
            return Err(Error::InvalidSpec(
                "synthetic spec needs at least one country".into(),
            ));
        }
        if self.dimension == 0 || self.images_per_user_per_condition == 0 {
            return Err(Error::InvalidSpec(
                "dimension and images_per_user_per_condition must be positive".into(),
            ));
        }
        let scales = [
            self.country_spread,
            self.screen_artifact_scale,
            self.user_offset_scale,
            self.noise_sigma,
        ];
        if scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::InvalidSpec(
                "synthetic scales must be finite and >= 0".into(),
            ));
        }
        if !(self.class_separation.is_finite() && self.class_separation > 0.0) {
            return Err(Error::InvalidSpec(
                "class_separation must be positive".into(),
            ));
        }
        let mut codes = std::collections::BTreeSet::new();
        for c in &self.countries {
            if !crate::data::is_identifier(&c.code) || !codes.insert(c.code.as_str()) {
                return Err(Error::InvalidSpec(format!(
                    "country code `{}` must be a unique identifier",
                    c.code
                )));
            }
            if c.users == 0 {
                return Err(Error::InvalidSpec(format!(
                    "country {} has no users",
                    c.code
                )));
            }
            if c.class_axis_angle_deg != 0.0 && self.dimension < 2 {
                return Err(Error::InvalidSpec(
                    "a rotated class axis needs dimension >= 2".into(),
                ));
            }
        }
        Ok(())
    }

    /// Number of samples the spec generates.
    pub fn sample_count(&self) -> usize {
        self.countries
            .iter()
            .map(|c| c.users * (1 + c.screen_sources) * self.images_per_user_per_condition)
            .sum()
    }
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, d, 1.0);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

struct Screen {
    id: String,
    offset: Vec<f64>,
    direction: Vec<f64>,
    frequency: f64,
    phase: f64,
}

pub fn generate_synthetic<T: Scalar>(spec: &SyntheticSpec) -> Result<Dataset<T>> {
    spec.validate()?;
    let d = spec.dimension;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::with_capacity(spec.sample_count());
    let half = spec.class_separation / 2.0;

    for country in &spec.countries {
        let mean = gaussian(&mut rng, d, spec.country_spread);
        let theta = country.class_axis_angle_deg.to_radians();
        let mut axis = vec![0.0; d];
        axis[0] = theta.cos();
        if d > 1 {
            axis[1] = theta.sin();
        }
        let screens: Vec<Screen> = (0..country.screen_sources)
            .map(|k| Screen {
                id: format!("{}_scr{k:02}", country.code),
                offset: gaussian(&mut rng, d, spec.screen_artifact_scale),
                direction: unit(&mut rng, d),
                frequency: rng.random_range(0.5..2.0),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            })
            .collect();

        for u in 0..country.users {
            let user_id = format!("{}_u{u:03}", country.code);
            let user_offset = gaussian(&mut rng, d, spec.user_offset_scale);
            let conditions = std::iter::once(None).chain(screens.iter().map(Some));
            for screen in conditions {
                let (label, sign, cond) = match screen {
                    None => (Label::BonaFide, 1.0, "bf".to_string()),
                    Some(s) => (Label::Attack, -1.0, s.id.clone()),
                };
                for img in 0..spec.images_per_user_per_condition {
                    let noise = gaussian(&mut rng, d, spec.noise_sigma);
                    let features = (0..d)
                        .map(|j| {
                            let mut x = mean[j] + sign * half * axis[j] + user_offset[j] + noise[j];
                            if let Some(s) = screen {
                                let wave = (s.frequency * img as f64 + s.phase).sin();
                                x += s.offset[j]
                                    + spec.screen_artifact_scale * wave * s.direction[j];
                            }
                            T::lit(x)
                        })
                        .collect();
                    samples.push(Sample {
                        sample_id: format!("{user_id}_{cond}_{img:03}"),
                        country: country.code.clone(),
                        user_id: user_id.clone(),
                        screen_source: screen.map_or(NO_SCREEN.to_string(), |s| s.id.clone()),
                        label,
                        features,
                    });
                }
            }
        }
    }
    Dataset::new(samples)
}
