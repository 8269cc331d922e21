//! Observation and site records, CSV ingestion/export, the synthetic corpus
//! generator and the two split protocols (stratified random, site-held-out).

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, WeightedIndex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{file}: row {row}, column `{column}`: {message}")]
    Schema {
        file: String,
        row: usize,
        column: String,
        message: String,
    },
    #[error("{file}: header mismatch: expected `{expected}`, found `{found}`")]
    Header {
        file: String,
        expected: String,
        found: String,
    },
    #[error("{file}: row {row}: site_id `{site_id}` does not resolve to a site record")]
    DanglingSite {
        file: String,
        row: usize,
        site_id: String,
    },
    #[error("{file}: row {row}: duplicate {kind} `{id}`")]
    Duplicate {
        file: String,
        row: usize,
        kind: &'static str,
        id: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: {source}")]
    Csv {
        file: String,
        #[source]
        source: csv::Error,
    },
    #[error("corpus contains a single class; stratified splitting needs both labels")]
    SingleClass,
    #[error("site split needs {needed} sites but only {available} exist")]
    TooFewSites { needed: usize, available: usize },
    #[error("invalid split ratios {0:?}: each must be >= 0 and at least one > 0")]
    BadRatios([f64; 3]),
    #[error("generator precondition violated: {0}")]
    Generator(String),
}

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!(
                        "`{other}` is not one of {}",
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}

string_enum!(LandUse {
    EducationalResidential => "educational_residential",
    CommercialResidential => "commercial_residential",
    OfficeResidential => "office_residential",
    EducationalOffice => "educational_office",
    GreenspaceResidential => "greenspace_residential",
});

string_enum!(AgeGroup {
    Child => "child",
    Adult => "adult",
    Senior => "senior",
    Unsure => "unsure",
});

string_enum!(Gender {
    Male => "male",
    Female => "female",
    Unsure => "unsure",
});

string_enum!(WalkingContext {
    Alone => "alone",
    Group => "group",
});

string_enum!(Weather {
    ClearSunny => "clear_sunny",
    PartlyCloudy => "partly_cloudy",
    Cloudy => "cloudy",
    RainDrizzle => "rain_drizzle",
});

string_enum!(
    /// Time between consecutive onsets of the pedestrian green.
    GreenOnsetInterval {
        Zero => "zero",
        Short => "short_1_85s",
        Long => "long_gt85s",
        Missing => "missing",
    }
);

string_enum!(
    /// Length of the pedestrian green.
    GreenInterval {
        Zero => "zero",
        Short => "short_1_40s",
        Long => "long_gt40s",
        Missing => "missing",
    }
);

/// Observed crossing location. Mid-block is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Intersection = 0,
    Midblock = 1,
}

impl Label {
    pub fn from_code(code: u8) -> Option<Label> {
        match code {
            0 => Some(Label::Intersection),
            1 => Some(Label::Midblock),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn is_midblock(self) -> bool {
        self == Label::Midblock
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Intersection => "intersection",
            Label::Midblock => "midblock",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Built-environment attributes of one study site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteRecord {
    pub site_id: String,
    pub location_name: String,
    pub lanes: u32,
    pub speed_limit_mph: u32,
    pub raised_median: bool,
    pub transit_station: bool,
    pub sidewalk_width_ft: f64,
    pub land_use: LandUse,
}

pub const LANES_RANGE: (u32, u32) = (2, 10);
pub const SPEED_LIMITS: [u32; 3] = [25, 30, 35];
pub const SIDEWALK_RANGE: (f64, f64) = (10.0, 14.0);

impl SiteRecord {
    /// Returns `(column, message)` for the first violated invariant.
    pub fn check(&self) -> Result<(), (&'static str, String)> {
        if self.site_id.is_empty() {
            return Err(("site_id", "empty identifier".into()));
        }
        if !(LANES_RANGE.0..=LANES_RANGE.1).contains(&self.lanes) {
            return Err(("lanes", format!("{} outside [2, 10]", self.lanes)));
        }
        if !SPEED_LIMITS.contains(&self.speed_limit_mph) {
            return Err((
                "speed_limit_mph",
                format!("{} not one of 25, 30, 35", self.speed_limit_mph),
            ));
        }
        let w = self.sidewalk_width_ft;
        if !w.is_finite() || w < SIDEWALK_RANGE.0 || w > SIDEWALK_RANGE.1 {
            return Err(("sidewalk_width_ft", format!("{w} outside [10, 14]")));
        }
        Ok(())
    }
}

/// One observed crossing event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PedestrianObservation {
    pub obs_id: String,
    pub site_id: String,
    pub age_group: AgeGroup,
    pub gender: Gender,
    pub walking_context: WalkingContext,
    pub weather: Weather,
    pub lighting_intersection: bool,
    pub lighting_midblock: bool,
    pub green_onset_interval: GreenOnsetInterval,
    pub green_interval: GreenInterval,
    pub push_button_available: bool,
    /// Only defined when a push button exists.
    pub push_button_affects_time: Option<bool>,
    pub left_turn_protection: bool,
    pub label: Label,
}

impl PedestrianObservation {
    pub fn check(&self) -> Result<(), (&'static str, String)> {
        if self.obs_id.is_empty() {
            return Err(("obs_id", "empty identifier".into()));
        }
        if !self.push_button_available && self.push_button_affects_time.is_some() {
            return Err((
                "push_button_affects_time",
                "must be empty when push_button_available is false".into(),
            ));
        }
        Ok(())
    }
}

pub const SITES_HEADER: [&str; 8] = [
    "site_id",
    "location_name",
    "lanes",
    "speed_limit_mph",
    "raised_median",
    "transit_station",
    "sidewalk_width_ft",
    "land_use",
];

pub const OBSERVATIONS_HEADER: [&str; 14] = [
    "obs_id",
    "site_id",
    "age_group",
    "gender",
    "walking_context",
    "weather",
    "lighting_intersection",
    "lighting_midblock",
    "green_onset_interval",
    "green_interval",
    "push_button_available",
    "push_button_affects_time",
    "left_turn_protection",
    "label",
];

struct RowCtx<'a> {
    file: &'a str,
    row: usize,
    header: &'static [&'static str],
    record: &'a csv::StringRecord,
}

impl RowCtx<'_> {
    fn err(&self, column: &str, message: impl Into<String>) -> CorpusError {
        CorpusError::Schema {
            file: self.file.to_string(),
            row: self.row,
            column: column.to_string(),
            message: message.into(),
        }
    }

    fn raw(&self, column: &str) -> &str {
        let idx = self
            .header
            .iter()
            .position(|c| *c == column)
            .expect("column belongs to the schema");
        self.record.get(idx).unwrap_or("")
    }

    fn text(&self, column: &str) -> Result<String, CorpusError> {
        let v = self.raw(column);
        if v.is_empty() {
            return Err(self.err(column, "empty value"));
        }
        Ok(v.to_string())
    }

    fn parse<T: FromStr>(&self, column: &str) -> Result<T, CorpusError>
    where
        T::Err: fmt::Display,
    {
        let v = self.raw(column);
        v.parse::<T>()
            .map_err(|e| self.err(column, format!("cannot parse `{v}`: {e}")))
    }

    fn boolean(&self, column: &str) -> Result<bool, CorpusError> {
        match self.raw(column) {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(self.err(column, format!("`{other}` is not `true` or `false`"))),
        }
    }

    fn opt_boolean(&self, column: &str) -> Result<Option<bool>, CorpusError> {
        if self.raw(column).is_empty() {
            Ok(None)
        } else {
            self.boolean(column).map(Some)
        }
    }
}

fn open(path: &Path) -> Result<std::fs::File, CorpusError> {
    std::fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn check_header(
    file: &str,
    reader: &mut csv::Reader<impl Read>,
    expected: &[&str],
) -> Result<(), CorpusError> {
    let found = reader
        .headers()
        .map_err(|source| CorpusError::Csv {
            file: file.to_string(),
            source,
        })?
        .clone();
    if found.iter().ne(expected.iter().copied()) {
        return Err(CorpusError::Header {
            file: file.to_string(),
            expected: expected.join(","),
            found: found.iter().collect::<Vec<_>>().join(","),
        });
    }
    Ok(())
}

/// Parse `sites.csv` content. `file` is used only in error messages.
pub fn read_sites(file: &str, input: impl Read) -> Result<Vec<SiteRecord>, CorpusError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    check_header(file, &mut reader, &SITES_HEADER)?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, rec) in reader.records().enumerate() {
        let record = rec.map_err(|source| CorpusError::Csv {
            file: file.to_string(),
            source,
        })?;
        let ctx = RowCtx {
            file,
            row: i + 1,
            header: &SITES_HEADER,
            record: &record,
        };
        let site = SiteRecord {
            site_id: ctx.text("site_id")?,
            location_name: ctx.raw("location_name").to_string(),
            lanes: ctx.parse("lanes")?,
            speed_limit_mph: ctx.parse("speed_limit_mph")?,
            raised_median: ctx.boolean("raised_median")?,
            transit_station: ctx.boolean("transit_station")?,
            sidewalk_width_ft: ctx.parse("sidewalk_width_ft")?,
            land_use: ctx.parse("land_use")?,
        };
        site.check().map_err(|(col, msg)| ctx.err(col, msg))?;
        if !seen.insert(site.site_id.clone()) {
            return Err(CorpusError::Duplicate {
                file: file.to_string(),
                row: i + 1,
                kind: "site_id",
                id: site.site_id,
            });
        }
        out.push(site);
    }
    Ok(out)
}

/// Parse `observations.csv` content, resolving every `site_id` against `sites`.
pub fn read_observations(
    file: &str,
    input: impl Read,
    sites: &[SiteRecord],
) -> Result<Vec<PedestrianObservation>, CorpusError> {
    let known: HashSet<&str> = sites.iter().map(|s| s.site_id.as_str()).collect();
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    check_header(file, &mut reader, &OBSERVATIONS_HEADER)?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, rec) in reader.records().enumerate() {
        let record = rec.map_err(|source| CorpusError::Csv {
            file: file.to_string(),
            source,
        })?;
        let ctx = RowCtx {
            file,
            row: i + 1,
            header: &OBSERVATIONS_HEADER,
            record: &record,
        };
        let label_code: u8 = ctx.parse("label")?;
        let label = Label::from_code(label_code)
            .ok_or_else(|| ctx.err("label", format!("{label_code} is not 0 or 1")))?;
        let obs = PedestrianObservation {
            obs_id: ctx.text("obs_id")?,
            site_id: ctx.text("site_id")?,
            age_group: ctx.parse("age_group")?,
            gender: ctx.parse("gender")?,
            walking_context: ctx.parse("walking_context")?,
            weather: ctx.parse("weather")?,
            lighting_intersection: ctx.boolean("lighting_intersection")?,
            lighting_midblock: ctx.boolean("lighting_midblock")?,
            green_onset_interval: ctx.parse("green_onset_interval")?,
            green_interval: ctx.parse("green_interval")?,
            push_button_available: ctx.boolean("push_button_available")?,
            push_button_affects_time: ctx.opt_boolean("push_button_affects_time")?,
            left_turn_protection: ctx.boolean("left_turn_protection")?,
            label,
        };
        obs.check().map_err(|(col, msg)| ctx.err(col, msg))?;
        if !known.contains(obs.site_id.as_str()) {
            return Err(CorpusError::DanglingSite {
                file: file.to_string(),
                row: i + 1,
                site_id: obs.site_id,
            });
        }
        if !seen.insert(obs.obs_id.clone()) {
            return Err(CorpusError::Duplicate {
                file: file.to_string(),
                row: i + 1,
                kind: "obs_id",
                id: obs.obs_id,
            });
        }
        out.push(obs);
    }
    Ok(out)
}

/// Load and validate a corpus from its two CSV files. Row order is preserved.
pub fn load_corpus(
    sites_path: &Path,
    observations_path: &Path,
) -> Result<(Vec<SiteRecord>, Vec<PedestrianObservation>), CorpusError> {
    let sites = read_sites(&sites_path.display().to_string(), open(sites_path)?)?;
    let obs = read_observations(
        &observations_path.display().to_string(),
        open(observations_path)?,
        &sites,
    )?;
    Ok((sites, obs))
}

fn csv_err(file: &str) -> impl Fn(csv::Error) -> CorpusError + '_ {
    move |source| CorpusError::Csv {
        file: file.to_string(),
        source,
    }
}

pub fn write_sites(out: impl Write, sites: &[SiteRecord]) -> Result<(), CorpusError> {
    let e = csv_err("sites");
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(SITES_HEADER).map_err(&e)?;
    for s in sites {
        w.write_record([
            s.site_id.clone(),
            s.location_name.clone(),
            s.lanes.to_string(),
            s.speed_limit_mph.to_string(),
            s.raised_median.to_string(),
            s.transit_station.to_string(),
            s.sidewalk_width_ft.to_string(),
            s.land_use.to_string(),
        ])
        .map_err(&e)?;
    }
    w.flush().map_err(|source| CorpusError::Io {
        path: "sites".into(),
        source,
    })
}

pub fn write_observations(
    out: impl Write,
    obs: &[PedestrianObservation],
) -> Result<(), CorpusError> {
    let e = csv_err("observations");
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(OBSERVATIONS_HEADER).map_err(&e)?;
    for o in obs {
        w.write_record([
            o.obs_id.clone(),
            o.site_id.clone(),
            o.age_group.to_string(),
            o.gender.to_string(),
            o.walking_context.to_string(),
            o.weather.to_string(),
            o.lighting_intersection.to_string(),
            o.lighting_midblock.to_string(),
            o.green_onset_interval.to_string(),
            o.green_interval.to_string(),
            o.push_button_available.to_string(),
            o.push_button_affects_time.map(|b| b.to_string()).unwrap_or_default(),
            o.left_turn_protection.to_string(),
            o.label.code().to_string(),
        ])
        .map_err(&e)?;
    }
    w.flush().map_err(|source| CorpusError::Io {
        path: "observations".into(),
        source,
    })
}

/// Write both CSV files.
pub fn write_corpus(
    sites_path: &Path,
    observations_path: &Path,
    sites: &[SiteRecord],
    obs: &[PedestrianObservation],
) -> Result<(), CorpusError> {
    let create = |p: &Path| {
        std::fs::File::create(p).map_err(|source| CorpusError::Io {
            path: p.to_path_buf(),
            source,
        })
    };
    write_sites(std::io::BufWriter::new(create(sites_path)?), sites)?;
    write_observations(std::io::BufWriter::new(create(observations_path)?), obs)
}

pub fn sites_csv_bytes(sites: &[SiteRecord]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_sites(&mut buf, sites).expect("writing to memory cannot fail");
    buf
}

pub fn observations_csv_bytes(obs: &[PedestrianObservation]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_observations(&mut buf, obs).expect("writing to memory cannot fail");
    buf
}

/// Site lookup by identifier.
pub fn site_index(sites: &[SiteRecord]) -> HashMap<&str, &SiteRecord> {
    sites.iter().map(|s| (s.site_id.as_str(), s)).collect()
}

/// Fraction of mid-block labels.
pub fn midblock_fraction<'a>(obs: impl IntoIterator<Item = &'a PedestrianObservation>) -> f64 {
    let (mut n, mut m) = (0usize, 0usize);
    for o in obs {
        n += 1;
        m += o.label.is_midblock() as usize;
    }
    if n == 0 {
        0.0
    } else {
        m as f64 / n as f64
    }
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

/// Coefficients of the logistic ground truth `P(midblock) = sigmoid(intercept + beta . x)`.
///
/// Signs follow the behavioral priors encoded in the knowledge block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroundTruth {
    pub male: f64,
    pub alone: f64,
    pub senior: f64,
    /// Per lane, centered at 4.5 lanes.
    pub lanes: f64,
    pub lighting_midblock: f64,
    /// Applied to cloudy and rain/drizzle observations.
    pub adverse_weather: f64,
    /// Standard deviation of a per-site random intercept (0 disables it).
    pub site_effect_sd: f64,
    /// Target marginal mid-block rate used to calibrate the intercept.
    pub target_midblock_rate: f64,
    /// Fixed intercept; when absent it is calibrated by bisection.
    pub intercept: Option<f64>,
}

impl Default for GroundTruth {
    fn default() -> Self {
        GroundTruth {
            male: 2.5,
            alone: 2.5,
            senior: -2.0,
            lanes: -0.6,
            lighting_midblock: 1.5,
            adverse_weather: 1.5,
            site_effect_sd: 0.0,
            target_midblock_rate: 0.377,
            intercept: None,
        }
    }
}

/// Per-observation features that enter the ground-truth logit (site effect excluded).
#[derive(Debug, Clone, Copy)]
pub struct TruthFeatures {
    pub male: f64,
    pub alone: f64,
    pub senior: f64,
    pub lanes_centered: f64,
    pub lighting_midblock: f64,
    pub adverse_weather: f64,
}

impl TruthFeatures {
    pub fn of(obs: &PedestrianObservation, site: &SiteRecord) -> Self {
        TruthFeatures {
            male: (obs.gender == Gender::Male) as u8 as f64,
            alone: (obs.walking_context == WalkingContext::Alone) as u8 as f64,
            senior: (obs.age_group == AgeGroup::Senior) as u8 as f64,
            lanes_centered: site.lanes as f64 - 4.5,
            lighting_midblock: obs.lighting_midblock as u8 as f64,
            adverse_weather: matches!(obs.weather, Weather::Cloudy | Weather::RainDrizzle) as u8
                as f64,
        }
    }
}

impl GroundTruth {
    /// Logit without intercept or site effect.
    pub fn linear(&self, f: &TruthFeatures) -> f64 {
        self.male * f.male
            + self.alone * f.alone
            + self.senior * f.senior
            + self.lanes * f.lanes_centered
            + self.lighting_midblock * f.lighting_midblock
            + self.adverse_weather * f.adverse_weather
    }
}

/// Categorical marginals the generator samples from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Marginals {
    /// (lanes, weight)
    pub lanes: Vec<(u32, f64)>,
    /// Weights for 25/30/35 mph.
    pub speed_limit: [f64; 3],
    pub raised_median: f64,
    pub transit_station: f64,
    /// (feet, weight)
    pub sidewalk_width: Vec<(f64, f64)>,
    /// Weights in `LandUse::ALL` order.
    pub land_use: [f64; 5],
    /// Weights in `AgeGroup::ALL` order.
    pub age_group: [f64; 4],
    pub gender: [f64; 3],
    pub alone: f64,
    pub weather: [f64; 4],
    pub lighting_intersection: f64,
    pub lighting_midblock: f64,
    /// Weights in `GreenOnsetInterval::ALL` order.
    pub green_onset: [f64; 4],
    /// Marginal weights in `GreenInterval::ALL` order; zero/missing follow the onset.
    pub green_interval: [f64; 4],
    pub push_button_available: f64,
    pub push_button_affects_time: f64,
    pub left_turn_protection: f64,
}

impl Default for Marginals {
    fn default() -> Self {
        Marginals {
            lanes: vec![
                (2, 0.25),
                (3, 0.10),
                (4, 0.25),
                (5, 0.10),
                (6, 0.15),
                (8, 0.10),
                (10, 0.05),
            ],
            speed_limit: [0.40, 0.43, 0.17],
            raised_median: 0.37,
            transit_station: 0.77,
            sidewalk_width: vec![(10.0, 0.3), (11.0, 0.3), (12.0, 0.2), (13.0, 0.1), (14.0, 0.1)],
            land_use: [0.29, 0.23, 0.20, 0.14, 0.14],
            age_group: [0.151, 0.815, 0.022, 0.012],
            gender: [0.668, 0.306, 0.026],
            alone: 0.633,
            weather: [0.473, 0.301, 0.115, 0.111],
            lighting_intersection: 0.849,
            lighting_midblock: 0.917,
            green_onset: [0.087, 0.504, 0.402, 0.007],
            green_interval: [0.087, 0.543, 0.362, 0.007],
            push_button_available: 0.831,
            push_button_affects_time: 0.862,
            left_turn_protection: 0.686,
        }
    }
}

/// Full generator configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub truth: GroundTruth,
    pub marginals: Marginals,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const STREET_NAMES: [&str; 12] = [
    "Little Creek", "Hampton", "Granby", "Colley", "Tidewater", "Military", "Virginia Beach",
    "Brambleton", "Princess Anne", "Shore", "Jefferson", "Mercury",
];
const STREET_KINDS: [&str; 4] = ["Rd", "Ave", "Blvd", "St"];

fn sample_sites(n_sites: usize, m: &Marginals, rng: &mut impl Rng) -> Vec<SiteRecord> {
    let lanes = WeightedIndex::new(m.lanes.iter().map(|x| x.1)).expect("lane weights");
    let speed = WeightedIndex::new(m.speed_limit).expect("speed weights");
    let walk = WeightedIndex::new(m.sidewalk_width.iter().map(|x| x.1)).expect("sidewalk weights");
    let land = WeightedIndex::new(m.land_use).expect("land-use weights");
    (0..n_sites)
        .map(|i| {
            let street = STREET_NAMES[rng.gen_range(0..STREET_NAMES.len())];
            let kind = STREET_KINDS[rng.gen_range(0..STREET_KINDS.len())];
            SiteRecord {
                site_id: format!("S{:03}", i + 1),
                location_name: format!("{street} {kind} segment {}", i + 1),
                lanes: m.lanes[lanes.sample(rng)].0,
                speed_limit_mph: SPEED_LIMITS[speed.sample(rng)],
                raised_median: rng.gen_bool(m.raised_median),
                transit_station: rng.gen_bool(m.transit_station),
                sidewalk_width_ft: m.sidewalk_width[walk.sample(rng)].0,
                land_use: LandUse::ALL[land.sample(rng)],
            }
        })
        .collect()
}

/// Exact expected mid-block rate for a given intercept, enumerating every
/// combination of the logit-relevant features with observations spread
/// uniformly over `sites`.
pub fn expected_midblock_rate(
    truth: &GroundTruth,
    m: &Marginals,
    sites: &[SiteRecord],
    site_effects: &[f64],
    intercept: f64,
) -> f64 {
    let norm = |w: &[f64]| -> Vec<f64> {
        let s: f64 = w.iter().sum();
        w.iter().map(|x| x / s).collect()
    };
    let gender = norm(&m.gender);
    let age = norm(&m.age_group);
    let weather = norm(&m.weather);
    let mut total = 0.0;
    for (site, effect) in sites.iter().zip(site_effects) {
        for (gi, g) in Gender::ALL.iter().enumerate() {
            for (ai, a) in AgeGroup::ALL.iter().enumerate() {
                for (wi, w) in Weather::ALL.iter().enumerate() {
                    for alone in [true, false] {
                        for lit in [true, false] {
                            let p = gender[gi]
                                * age[ai]
                                * weather[wi]
                                * if alone { m.alone } else { 1.0 - m.alone }
                                * if lit { m.lighting_midblock } else { 1.0 - m.lighting_midblock };
                            let f = TruthFeatures {
                                male: (*g == Gender::Male) as u8 as f64,
                                alone: alone as u8 as f64,
                                senior: (*a == AgeGroup::Senior) as u8 as f64,
                                lanes_centered: site.lanes as f64 - 4.5,
                                lighting_midblock: lit as u8 as f64,
                                adverse_weather: matches!(w, Weather::Cloudy | Weather::RainDrizzle)
                                    as u8 as f64,
                            };
                            total += p * sigmoid(intercept + effect + truth.linear(&f));
                        }
                    }
                }
            }
        }
    }
    total / sites.len() as f64
}

/// Bisection for the intercept that makes the expected mid-block rate hit the target.
pub fn calibrate_intercept(
    truth: &GroundTruth,
    m: &Marginals,
    sites: &[SiteRecord],
    site_effects: &[f64],
) -> f64 {
    let (mut lo, mut hi) = (-40.0f64, 40.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if expected_midblock_rate(truth, m, sites, site_effects, mid) < truth.target_midblock_rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// A generated corpus together with the resolved ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub sites: Vec<SiteRecord>,
    pub observations: Vec<PedestrianObservation>,
    pub intercept: f64,
    /// Per-site random intercepts, aligned with `sites`.
    pub site_effects: Vec<f64>,
}

impl SyntheticCorpus {
    /// Ground-truth mid-block probability of one observation.
    pub fn truth_probability(&self, truth: &GroundTruth, obs: &PedestrianObservation) -> f64 {
        let idx = self
            .sites
            .iter()
            .position(|s| s.site_id == obs.site_id)
            .expect("observation references a generated site");
        let f = TruthFeatures::of(obs, &self.sites[idx]);
        sigmoid(self.intercept + self.site_effects[idx] + truth.linear(&f))
    }
}

/// Generate a synthetic corpus with the default configuration.
pub fn generate_synthetic(
    n_sites: usize,
    n_obs: usize,
    seed: u64,
) -> Result<(Vec<SiteRecord>, Vec<PedestrianObservation>), CorpusError> {
    let c = generate_with(&GeneratorConfig::default(), n_sites, n_obs, seed)?;
    Ok((c.sites, c.observations))
}

/// Generate a synthetic corpus whose marginals follow `cfg.marginals` and whose
/// labels are drawn from the logistic ground truth in `cfg.truth`.
pub fn generate_with(
    cfg: &GeneratorConfig,
    n_sites: usize,
    n_obs: usize,
    seed: u64,
) -> Result<SyntheticCorpus, CorpusError> {
    if n_sites == 0 || n_obs == 0 {
        return Err(CorpusError::Generator(
            "n_sites and n_obs must both be at least 1".into(),
        ));
    }
    let m = &cfg.marginals;
    let truth = &cfg.truth;
    let mut rng = seeds::rng(seed);
    let sites = sample_sites(n_sites, m, &mut rng);
    let site_effects: Vec<f64> = if truth.site_effect_sd > 0.0 {
        let normal = Normal::new(0.0, truth.site_effect_sd)
            .map_err(|e| CorpusError::Generator(e.to_string()))?;
        sites.iter().map(|_| normal.sample(&mut rng)).collect()
    } else {
        vec![0.0; sites.len()]
    };
    let intercept = truth
        .intercept
        .unwrap_or_else(|| calibrate_intercept(truth, m, &sites, &site_effects));

    let age = WeightedIndex::new(m.age_group).expect("age weights");
    let gender = WeightedIndex::new(m.gender).expect("gender weights");
    let weather = WeightedIndex::new(m.weather).expect("weather weights");
    let onset = WeightedIndex::new(m.green_onset).expect("onset weights");
    // Conditional on a timed signal (onset short/long), split short vs long green.
    let timed_mass = m.green_interval[1] + m.green_interval[2];
    let p_short_green = m.green_interval[1] / timed_mass;

    let mut observations = Vec::with_capacity(n_obs);
    for i in 0..n_obs {
        let si = rng.gen_range(0..sites.len());
        let green_onset_interval = GreenOnsetInterval::ALL[onset.sample(&mut rng)];
        let green_interval = match green_onset_interval {
            GreenOnsetInterval::Zero => GreenInterval::Zero,
            GreenOnsetInterval::Missing => GreenInterval::Missing,
            _ => {
                if rng.gen_bool(p_short_green) {
                    GreenInterval::Short
                } else {
                    GreenInterval::Long
                }
            }
        };
        let push_button_available = rng.gen_bool(m.push_button_available);
        let affects = rng.gen_bool(m.push_button_affects_time);
        let mut obs = PedestrianObservation {
            obs_id: format!("O{:06}", i + 1),
            site_id: sites[si].site_id.clone(),
            age_group: AgeGroup::ALL[age.sample(&mut rng)],
            gender: Gender::ALL[gender.sample(&mut rng)],
            walking_context: if rng.gen_bool(m.alone) {
                WalkingContext::Alone
            } else {
                WalkingContext::Group
            },
            weather: Weather::ALL[weather.sample(&mut rng)],
            lighting_intersection: rng.gen_bool(m.lighting_intersection),
            lighting_midblock: rng.gen_bool(m.lighting_midblock),
            green_onset_interval,
            green_interval,
            push_button_available,
            push_button_affects_time: push_button_available.then_some(affects),
            left_turn_protection: rng.gen_bool(m.left_turn_protection),
            label: Label::Intersection,
        };
        let f = TruthFeatures::of(&obs, &sites[si]);
        let p = sigmoid(intercept + site_effects[si] + truth.linear(&f));
        if rng.gen::<f64>() < p {
            obs.label = Label::Midblock;
        }
        observations.push(obs);
    }
    Ok(SyntheticCorpus {
        sites,
        observations,
        intercept,
        site_effects,
    })
}

/// Balanced accuracy of the Bayes rule for the generator's ground truth.
///
/// The balanced-accuracy optimal rule predicts mid-block when
/// `p > P(midblock)`; sensitivity and specificity are estimated from
/// `n_samples` fresh draws using the exact per-draw probabilities.
pub fn bayes_balanced_accuracy(cfg: &GeneratorConfig, n_sites: usize, n_samples: usize, seed: u64) -> f64 {
    let corpus = generate_with(cfg, n_sites, n_samples, seed).expect("valid generator inputs");
    let probs: Vec<f64> = corpus
        .observations
        .iter()
        .map(|o| corpus.truth_probability(&cfg.truth, o))
        .collect();
    let prior = probs.iter().sum::<f64>() / probs.len() as f64;
    let (mut tp, mut pos, mut tn, mut neg) = (0.0, 0.0, 0.0, 0.0);
    for p in probs {
        pos += p;
        neg += 1.0 - p;
        if p > prior {
            tp += p;
        } else {
            tn += 1.0 - p;
        }
    }
    0.5 * (tp / pos + tn / neg)
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    StratifiedRandom,
    SiteBased,
}

/// Train/validation/test membership by observation id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: BTreeSet<String>,
    pub validation: BTreeSet<String>,
    pub test: BTreeSet<String>,
    pub strategy: SplitStrategy,
    pub seed: u64,
    /// Site membership for site-based splits (empty otherwise).
    pub train_sites: Vec<String>,
    pub validation_sites: Vec<String>,
    pub test_sites: Vec<String>,
    /// Sites left out when the site counts do not cover every site.
    pub unassigned_sites: Vec<String>,
    /// Observations belonging to unassigned sites.
    pub unassigned: BTreeSet<String>,
}

/// Which partition an observation belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Partition {
    Train,
    Validation,
    Test,
}

impl SplitAssignment {
    pub fn partition_of(&self, obs_id: &str) -> Option<Partition> {
        if self.train.contains(obs_id) {
            Some(Partition::Train)
        } else if self.validation.contains(obs_id) {
            Some(Partition::Validation)
        } else if self.test.contains(obs_id) {
            Some(Partition::Test)
        } else {
            None
        }
    }

    /// Observations of one partition, in corpus order.
    pub fn select<'a>(
        &self,
        obs: &'a [PedestrianObservation],
        part: Partition,
    ) -> Vec<&'a PedestrianObservation> {
        obs.iter()
            .filter(|o| self.partition_of(&o.obs_id) == Some(part))
            .collect()
    }

    pub fn is_disjoint(&self) -> bool {
        self.train.is_disjoint(&self.validation)
            && self.train.is_disjoint(&self.test)
            && self.validation.is_disjoint(&self.test)
    }
}

/// Split `n` items over three partitions by largest remainder, guaranteeing
/// one item to every partition with a positive ratio when `n` allows it.
pub fn allocate(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let total: f64 = ratios.iter().sum();
    let quotas: Vec<f64> = ratios.iter().map(|r| n as f64 * r / total).collect();
    let mut alloc: [usize; 3] = [0; 3];
    for i in 0..3 {
        alloc[i] = quotas[i].floor() as usize;
    }
    let positive = ratios.iter().filter(|r| **r > 0.0).count();
    if n >= positive {
        for i in 0..3 {
            if ratios[i] > 0.0 && alloc[i] == 0 {
                alloc[i] = 1;
            }
        }
    }
    while alloc.iter().sum::<usize>() > n {
        // take back from the most over-allocated partition
        let i = (0..3)
            .filter(|&i| alloc[i] > 1)
            .max_by(|&a, &b| {
                (alloc[a] as f64 - quotas[a])
                    .total_cmp(&(alloc[b] as f64 - quotas[b]))
                    .then(b.cmp(&a))
            })
            .expect("some partition holds more than one item");
        alloc[i] -= 1;
    }
    while alloc.iter().sum::<usize>() < n {
        let i = (0..3)
            .filter(|&i| ratios[i] > 0.0)
            .max_by(|&a, &b| {
                (quotas[a] - alloc[a] as f64)
                    .total_cmp(&(quotas[b] - alloc[b] as f64))
                    .then(b.cmp(&a))
            })
            .expect("at least one positive ratio");
        alloc[i] += 1;
    }
    alloc
}

/// Stratified random split preserving the mid-block share in each partition.
pub fn stratified_split(
    obs: &[PedestrianObservation],
    ratios: [f64; 3],
    seed: u64,
) -> Result<SplitAssignment, CorpusError> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || ratios.iter().all(|r| *r == 0.0) {
        return Err(CorpusError::BadRatios(ratios));
    }
    let mut rng = seeds::rng(seed);
    let mut parts: [BTreeSet<String>; 3] = Default::default();
    let mut classes_seen = 0;
    for label in [Label::Intersection, Label::Midblock] {
        let mut ids: Vec<&str> = obs
            .iter()
            .filter(|o| o.label == label)
            .map(|o| o.obs_id.as_str())
            .collect();
        if ids.is_empty() {
            continue;
        }
        classes_seen += 1;
        ids.shuffle(&mut rng);
        let alloc = allocate(ids.len(), ratios);
        let mut it = ids.into_iter();
        for (p, count) in alloc.iter().enumerate() {
            parts[p].extend(it.by_ref().take(*count).map(str::to_string));
        }
    }
    if classes_seen < 2 {
        return Err(CorpusError::SingleClass);
    }
    let [train, validation, test] = parts;
    Ok(SplitAssignment {
        train,
        validation,
        test,
        strategy: SplitStrategy::StratifiedRandom,
        seed,
        train_sites: Vec::new(),
        validation_sites: Vec::new(),
        test_sites: Vec::new(),
        unassigned_sites: Vec::new(),
        unassigned: BTreeSet::new(),
    })
}

/// Site-held-out split: whole sites go to train/validation/test.
pub fn site_split(
    sites: &[SiteRecord],
    obs: &[PedestrianObservation],
    counts: [usize; 3],
    seed: u64,
) -> Result<SplitAssignment, CorpusError> {
    let needed: usize = counts.iter().sum();
    if sites.len() < needed {
        return Err(CorpusError::TooFewSites {
            needed,
            available: sites.len(),
        });
    }
    let mut order: Vec<&str> = sites.iter().map(|s| s.site_id.as_str()).collect();
    order.shuffle(&mut seeds::rng(seed));
    let mut it = order.into_iter().map(str::to_string);
    let train_sites: Vec<String> = it.by_ref().take(counts[0]).collect();
    let validation_sites: Vec<String> = it.by_ref().take(counts[1]).collect();
    let test_sites: Vec<String> = it.by_ref().take(counts[2]).collect();
    let unassigned_sites: Vec<String> = it.collect();

    let lookup: HashMap<&str, usize> = [&train_sites, &validation_sites, &test_sites, &unassigned_sites]
        .iter()
        .enumerate()
        .flat_map(|(p, ids)| ids.iter().map(move |s| (s.as_str(), p)))
        .collect();
    let mut parts: [BTreeSet<String>; 4] = Default::default();
    for o in obs {
        let p = lookup.get(o.site_id.as_str()).copied().unwrap_or(3);
        parts[p].insert(o.obs_id.clone());
    }
    let [train, validation, test, unassigned] = parts;
    Ok(SplitAssignment {
        train,
        validation,
        test,
        strategy: SplitStrategy::SiteBased,
        seed,
        train_sites,
        validation_sites,
        test_sites,
        unassigned_sites,
        unassigned,
    })
}
