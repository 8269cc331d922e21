//! Site-level built-environment descriptions.
//!
//! A description is either rendered from a deterministic template over the
//! site's attributes ([`stub_description`]) or requested from a vision-capable
//! chat-completion service ([`fetch_description`]). One description is made per
//! site and reused for every observation at that site.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::Engine;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::corpus::{LandUse, SiteRecord};
use crate::seeds;

/// Prompt sent with every satellite image.
pub const VISION_PROMPT: &str = "Describe the urban environment visible in this satellite image, focusing on: (1) road network layout and organization, (2) building density and types visible, (3) land use patterns you can identify, (4) spatial organization of the area.";

pub const STUB_WORDS: (usize, usize) = (150, 200);
pub const LENIENT_WORDS: (usize, usize) = (100, 300);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptionSource {
    Stub,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionDescription {
    pub site_id: String,
    pub text: String,
    pub word_count: usize,
    pub source: DescriptionSource,
    /// Raw service response body, kept for audit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
}

impl VisionDescription {
    pub fn new(site_id: impl Into<String>, text: impl Into<String>, source: DescriptionSource) -> Self {
        let text = text.into();
        VisionDescription {
            site_id: site_id.into(),
            word_count: word_count(&text),
            text,
            source,
            raw_response: None,
        }
    }
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Error)]
pub enum VisionError {
    #[error("environment variable `{0}` holding the service credential is not set")]
    MissingCredential(String),
    #[error("cannot read image `{path}`: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{endpoint}: transport failure: {message}")]
    Transport { endpoint: String, message: String },
    #[error("{endpoint}: request timed out after {secs} s")]
    Timeout { endpoint: String, secs: f64 },
    #[error("{endpoint}: service returned HTTP status {status}")]
    Status {
        endpoint: String,
        status: u16,
        body: String,
    },
    #[error("{endpoint}: malformed response: {reason}")]
    Malformed { endpoint: String, reason: String },
    #[error("invalid vision service config: {0}")]
    Config(String),
    #[error("cache {path}: {message}")]
    Cache { path: PathBuf, message: String },
}

// ---------------------------------------------------------------------------
// Template stub
// ---------------------------------------------------------------------------

fn lanes_word(lanes: u32) -> &'static str {
    match lanes {
        2 => "two-lane",
        3 => "three-lane",
        4 => "four-lane",
        5 => "five-lane",
        6 => "six-lane",
        7 => "seven-lane",
        8 => "eight-lane",
        9 => "nine-lane",
        _ => "ten-lane",
    }
}

fn pick<'a>(rng: &mut impl Rng, options: &[&'a str]) -> &'a str {
    options.choose(rng).copied().expect("non-empty option list")
}

fn road_layout(site: &SiteRecord, rng: &mut impl Rng) -> Vec<String> {
    let lanes = lanes_word(site.lanes);
    let corridor = match site.land_use {
        LandUse::CommercialResidential => "commercial corridor",
        LandUse::OfficeResidential => "office corridor",
        LandUse::EducationalResidential | LandUse::EducationalOffice => "campus corridor",
        LandUse::GreenspaceResidential => "parkside corridor",
    };
    let multi = if site.lanes >= 4 { "multi-lane" } else { "narrow" };
    let mut out = vec![format!(
        "The image shows a {corridor} organized around a {multi} {lanes} road with {} local streets meeting it at signalized intersections.",
        pick(rng, &["several", "a few", "two"])
    )];
    out.push(if site.raised_median {
        pick(rng, &[
            "A raised median separates the opposing travel lanes along most of the segment.",
            "The travel lanes are divided by a raised median with occasional breaks for turning vehicles.",
        ])
        .to_string()
    } else {
        pick(rng, &[
            "No raised median is visible, so the opposing lanes are separated only by painted lines.",
            "The roadway has no raised median and the opposing lanes meet at a painted center line.",
        ])
        .to_string()
    });
    out.push(
        pick(rng, &[
            "Sidewalks run along both sides of the roadway and connect to crosswalks at the intersections.",
            "Continuous sidewalks line the road edges and lead pedestrians toward the marked crosswalks at each intersection.",
        ])
        .to_string(),
    );
    out
}

fn building_density(site: &SiteRecord, rng: &mut impl Rng) -> Vec<String> {
    let first = match site.land_use {
        LandUse::CommercialResidential => pick(rng, &[
            "Buildings are moderately dense, with retail and service buildings set behind surface parking lots.",
            "Building density is moderate, with small shops, clinics, and service buildings fronting the road behind parking lots.",
        ]),
        LandUse::OfficeResidential => pick(rng, &[
            "Buildings are medium density, with low office buildings and their parking areas facing the road.",
            "Building density is moderate, dominated by office buildings of two to four stories with adjacent parking.",
        ]),
        LandUse::EducationalResidential => pick(rng, &[
            "Building density is moderate, with large school or campus buildings surrounded by open grounds.",
            "Large educational buildings with wide footprints stand near the road, separated by lawns and parking.",
        ]),
        LandUse::EducationalOffice => pick(rng, &[
            "Campus buildings and office buildings of medium density line the corridor with shared parking between them.",
            "Building density is moderate, mixing campus buildings with mid-sized office structures.",
        ]),
        LandUse::GreenspaceResidential => pick(rng, &[
            "Building density is low near the park, with scattered structures and mature tree canopy.",
            "Few buildings appear on the park side, while the opposite side has low density housing.",
        ]),
    };
    vec![
        first.to_string(),
        pick(rng, &[
            "Behind the frontage, detached houses and small apartment buildings form a lower density residential fabric.",
            "Further from the road, rows of single family houses and small apartment buildings fill the blocks.",
        ])
        .to_string(),
    ]
}

fn land_use_patterns(site: &SiteRecord, rng: &mut impl Rng) -> Vec<String> {
    let pattern = match site.land_use {
        LandUse::CommercialResidential => "The land use pattern combines commercial activity along the road with residential neighborhoods behind it, including convenience stores and small businesses.",
        LandUse::OfficeResidential => "The land use pattern pairs office uses along the road with residential neighborhoods a short walk away.",
        LandUse::EducationalResidential => "The land use pattern pairs an educational campus with surrounding residential neighborhoods, suggesting regular student foot traffic.",
        LandUse::EducationalOffice => "The land use pattern mixes educational facilities with office uses, producing steady daytime pedestrian movement.",
        LandUse::GreenspaceResidential => "The land use pattern places green space and recreational open areas next to residential streets.",
    };
    let transit = if site.transit_station {
        pick(rng, &[
            "A bus stop with a small shelter is visible near the mid-block area, which likely draws pedestrians across the road.",
            "A transit stop sits along the curb between the intersections and acts as a pedestrian generator.",
        ])
    } else {
        pick(rng, &[
            "No transit stop is visible along this segment.",
            "The segment does not appear to include a bus stop or transit station.",
        ])
    };
    vec![pattern.to_string(), transit.to_string()]
}

fn spatial_organization(site: &SiteRecord, rng: &mut impl Rng) -> Vec<String> {
    let speed = match site.speed_limit_mph {
        25 => "slower local traffic",
        30 => "moderate traffic speeds",
        _ => "faster arterial traffic",
    };
    vec![
        format!(
            "Spatially, the area is organized as a linear corridor with {speed}, where destinations on both sides of the road face each other between the intersections."
        ),
        pick(rng, &[
            "The distance between the two intersections is long enough that walking to a crosswalk adds a noticeable detour.",
            "The spacing of the intersections leaves a long block in the middle where no marked crossing is provided.",
        ])
        .to_string(),
    ]
}

const FILLERS: [&str; 6] = [
    "Parking lots and driveways interrupt the sidewalk at several points along the block.",
    "Street trees and utility poles are spaced along the curb on both sides of the road.",
    "Overall the setting suggests steady pedestrian activity within a moderately developed urban area.",
    "Driveway openings and side entrances create frequent points where vehicles enter and leave the road.",
    "The overall layout is auto oriented, although pedestrian destinations are close together.",
    "Landscaped strips between the sidewalk and the curb are narrow in most places.",
];

/// Deterministic template description covering road layout, building density,
/// land use and spatial organization, padded to 150-200 words.
pub fn stub_description(site: &SiteRecord, seed: u64) -> VisionDescription {
    let mut rng = seeds::labeled_rng(seed, &format!("vision:{}", site.site_id));
    let mut sentences = Vec::new();
    sentences.extend(road_layout(site, &mut rng));
    sentences.extend(building_density(site, &mut rng));
    sentences.extend(land_use_patterns(site, &mut rng));
    sentences.extend(spatial_organization(site, &mut rng));
    let mut fillers = FILLERS.to_vec();
    fillers.shuffle(&mut rng);
    let mut fillers = fillers.into_iter();
    let mut words: usize = sentences.iter().map(|s| word_count(s)).sum();
    while words < STUB_WORDS.0 {
        let f = fillers.next().expect("filler pool covers the minimum length");
        words += word_count(f);
        sentences.push(f.to_string());
    }
    VisionDescription::new(site.site_id.clone(), sentences.join(" "), DescriptionSource::Stub)
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// The four requested aspects and keywords that indicate coverage.
pub const ASPECT_KEYWORDS: [(&str, &[&str]); 4] = [
    ("road layout", &["road", "roadway", "street", "streets", "lane", "lanes", "intersection", "intersections", "corridor"]),
    ("building density", &["building", "buildings", "density", "structures", "houses", "dense"]),
    ("land use", &["land use", "residential", "commercial", "office", "educational", "campus", "retail", "park", "green space"]),
    ("spatial organization", &["spatial", "spatially", "layout", "organized", "organization", "arranged", "pattern", "configuration"]),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DescriptionWarning {
    Length { words: usize },
    MissingAspect(&'static str),
}

/// Non-fatal quality checks: length outside 100-300 words, or an aspect
/// without any of its keywords.
pub fn validate_description(d: &VisionDescription) -> Vec<DescriptionWarning> {
    let mut warnings = Vec::new();
    if d.word_count < LENIENT_WORDS.0 || d.word_count > LENIENT_WORDS.1 {
        warnings.push(DescriptionWarning::Length { words: d.word_count });
    }
    let lower = d.text.to_lowercase();
    let words: Vec<&str> = lower
        .split(|c: char| !c.is_alphanumeric() && c != '-')
        .filter(|w| !w.is_empty())
        .collect();
    for (aspect, keys) in ASPECT_KEYWORDS {
        let hit = keys.iter().any(|k| {
            if k.contains(' ') {
                lower.contains(k)
            } else {
                words.iter().any(|w| w == k || w.split('-').any(|p| p == *k))
            }
        });
        if !hit {
            warnings.push(DescriptionWarning::MissingAspect(aspect));
        }
    }
    warnings
}

// ---------------------------------------------------------------------------
// External service
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisionServiceConfig {
    pub endpoint_url: String,
    pub model_name: String,
    /// File path or URL of the site image; `{site_id}` is substituted.
    pub image_reference: String,
    pub timeout_secs: f64,
    pub api_key_env_var: String,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_max_tokens() -> u32 {
    400
}

fn default_in_flight() -> usize {
    4
}

impl VisionServiceConfig {
    pub fn validate(&self) -> Result<(), VisionError> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(VisionError::Config("timeout_secs must be > 0".into()));
        }
        if self.endpoint_url.is_empty() {
            return Err(VisionError::Config("endpoint_url is empty".into()));
        }
        if self.max_in_flight == 0 {
            return Err(VisionError::Config("max_in_flight must be >= 1".into()));
        }
        Ok(())
    }
}

fn image_url(reference: &str) -> Result<String, VisionError> {
    if reference.starts_with("http://")
        || reference.starts_with("https://")
        || reference.starts_with("data:")
    {
        return Ok(reference.to_string());
    }
    let path = Path::new(reference);
    let bytes = std::fs::read(path).map_err(|source| VisionError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
        Some(e) if e == "png" => "image/png",
        Some(e) if e == "webp" => "image/webp",
        _ => "image/jpeg",
    };
    Ok(format!(
        "data:{mime};base64,{}",
        base64::engine::general_purpose::STANDARD.encode(bytes)
    ))
}

/// Request body for one site image.
pub fn request_body(config: &VisionServiceConfig, image_url: &str) -> Value {
    json!({
        "model": config.model_name,
        "messages": [{
            "role": "user",
            "content": [
                {"type": "text", "text": VISION_PROMPT},
                {"type": "image_url", "image_url": {"url": image_url}},
            ],
        }],
        "max_tokens": config.max_tokens,
    })
}

/// Extract the first text payload of the first choice.
pub fn parse_response(endpoint: &str, body: &str) -> Result<String, VisionError> {
    let malformed = |reason: &str| VisionError::Malformed {
        endpoint: endpoint.to_string(),
        reason: reason.to_string(),
    };
    let v: Value = serde_json::from_str(body).map_err(|e| malformed(&format!("invalid JSON: {e}")))?;
    let content = v
        .get("choices")
        .and_then(|c| c.get(0))
        .and_then(|c| c.get("message"))
        .and_then(|m| m.get("content"))
        .ok_or_else(|| malformed("missing choices[0].message.content"))?;
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .find_map(|p| p.get("text").and_then(Value::as_str))
            .map(str::to_string)
            .ok_or_else(|| malformed("content array has no text part"))?,
        _ => return Err(malformed("content is neither a string nor an array")),
    };
    if text.trim().is_empty() {
        return Err(malformed("empty text"));
    }
    Ok(text.trim().to_string())
}

/// Ask the configured service to describe `site`'s image. Never falls back to
/// the stub; every failure is returned to the caller.
pub fn fetch_description(
    config: &VisionServiceConfig,
    site: &SiteRecord,
) -> Result<VisionDescription, VisionError> {
    config.validate()?;
    let key = std::env::var(&config.api_key_env_var)
        .map_err(|_| VisionError::MissingCredential(config.api_key_env_var.clone()))?;
    let endpoint = config.endpoint_url.clone();
    let url = image_url(&config.image_reference.replace("{site_id}", &site.site_id))?;
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs_f64(config.timeout_secs))
        .build()
        .map_err(|e| VisionError::Transport {
            endpoint: endpoint.clone(),
            message: e.to_string(),
        })?;
    let response = client
        .post(&endpoint)
        .bearer_auth(key)
        .json(&request_body(config, &url))
        .send()
        .map_err(|e| classify(&endpoint, config.timeout_secs, e))?;
    let status = response.status();
    let body = response
        .text()
        .map_err(|e| classify(&endpoint, config.timeout_secs, e))?;
    if !status.is_success() {
        return Err(VisionError::Status {
            endpoint,
            status: status.as_u16(),
            body,
        });
    }
    let text = parse_response(&endpoint, &body)?;
    let mut d = VisionDescription::new(site.site_id.clone(), text, DescriptionSource::External);
    d.raw_response = Some(body);
    Ok(d)
}

fn classify(endpoint: &str, secs: f64, e: reqwest::Error) -> VisionError {
    if e.is_timeout() {
        VisionError::Timeout {
            endpoint: endpoint.to_string(),
            secs,
        }
    } else {
        VisionError::Transport {
            endpoint: endpoint.to_string(),
            message: e.to_string(),
        }
    }
}

/// Fetch descriptions for many sites with at most `config.max_in_flight`
/// concurrent requests. Results are aligned with `sites`.
pub fn fetch_all(
    config: &VisionServiceConfig,
    sites: &[SiteRecord],
) -> Vec<Result<VisionDescription, VisionError>> {
    let mut out = Vec::with_capacity(sites.len());
    for chunk in sites.chunks(config.max_in_flight.max(1)) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|site| s.spawn(move || fetch_description(config, site)))
                .collect();
            for h in handles {
                out.push(h.join().expect("fetch worker panicked"));
            }
        });
    }
    out
}

// ---------------------------------------------------------------------------
// Cache
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub site_id: String,
    pub source: DescriptionSource,
    pub text: String,
    pub retrieved_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
}

/// Write one JSON record per line.
pub fn write_cache(path: &Path, descriptions: &[VisionDescription], retrieved_at: &str) -> Result<(), VisionError> {
    let err = |message: String| VisionError::Cache {
        path: path.to_path_buf(),
        message,
    };
    let file = std::fs::File::create(path).map_err(|e| err(e.to_string()))?;
    let mut w = std::io::BufWriter::new(file);
    for d in descriptions {
        let rec = CacheRecord {
            site_id: d.site_id.clone(),
            source: d.source,
            text: d.text.clone(),
            retrieved_at: retrieved_at.to_string(),
            raw_response: d.raw_response.clone(),
        };
        let line = serde_json::to_string(&rec).map_err(|e| err(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| err(e.to_string()))?;
    }
    w.flush().map_err(|e| err(e.to_string()))
}

pub fn read_cache(path: &Path) -> Result<Vec<VisionDescription>, VisionError> {
    let err = |message: String| VisionError::Cache {
        path: path.to_path_buf(),
        message,
    };
    let file = std::fs::File::open(path).map_err(|e| err(e.to_string()))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CacheRecord =
            serde_json::from_str(&line).map_err(|e| err(format!("line {}: {e}", i + 1)))?;
        let mut d = VisionDescription::new(rec.site_id, rec.text, rec.source);
        d.raw_response = rec.raw_response;
        out.push(d);
    }
    Ok(out)
}
