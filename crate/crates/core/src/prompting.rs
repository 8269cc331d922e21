//! Prompt assembly, rendering, word-level vocabulary and answer-token masking.
//!
//! A prompt has seven tagged components plus a task instruction. Components
//! render in a fixed order under bracketed headers; a component can be
//! withheld (replaced by a placeholder line) for attribution. The answer is a
//! single special token appended after the prompt, and it is the only position
//! that carries loss.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{
    AgeGroup, Gender, GreenInterval, GreenOnsetInterval, Label, LandUse, PedestrianObservation,
    SiteRecord, WalkingContext, Weather,
};
use crate::vision::VisionDescription;

pub const DEFAULT_MAX_LEN: usize = 512;

pub const PAD: &str = "<PAD>";
pub const UNK: &str = "<UNK>";
pub const BOS: &str = "<BOS>";
pub const INTERSECTION: &str = "<INTERSECTION>";
pub const MIDBLOCK: &str = "<MIDBLOCK>";
/// Stand-in for a line break inside token streams and vocabulary files.
pub const NEWLINE: &str = "<NL>";

pub const SPECIAL_TOKENS: [&str; 5] = [PAD, UNK, BOS, INTERSECTION, MIDBLOCK];

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("observation {obs_id} has site_id `{obs_site}` but was paired with site `{site}` and description `{vision}`")]
    SiteMismatch {
        obs_id: String,
        obs_site: String,
        site: String,
        vision: String,
    },
    #[error("prompt for {obs_id} needs {len} tokens even after truncation (limit {limit})")]
    TooLong {
        obs_id: String,
        len: usize,
        limit: usize,
    },
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("vocabulary file {path}: {message}")]
    VocabularyFile { path: String, message: String },
}

/// The seven prompt components, in attribution-report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptComponentKind {
    PedestrianDemographics,
    TrafficControl,
    RoadwayGeometry,
    BuiltEnvironmentVision,
    LandUseTransit,
    EnvironmentalConditions,
    DomainKnowledgeContext,
}

impl PromptComponentKind {
    pub const ALL: [PromptComponentKind; 7] = [
        PromptComponentKind::PedestrianDemographics,
        PromptComponentKind::TrafficControl,
        PromptComponentKind::RoadwayGeometry,
        PromptComponentKind::BuiltEnvironmentVision,
        PromptComponentKind::LandUseTransit,
        PromptComponentKind::EnvironmentalConditions,
        PromptComponentKind::DomainKnowledgeContext,
    ];

    /// Order in which components appear in a rendered prompt.
    pub const RENDER_ORDER: [PromptComponentKind; 7] = [
        PromptComponentKind::DomainKnowledgeContext,
        PromptComponentKind::PedestrianDemographics,
        PromptComponentKind::EnvironmentalConditions,
        PromptComponentKind::RoadwayGeometry,
        PromptComponentKind::TrafficControl,
        PromptComponentKind::LandUseTransit,
        PromptComponentKind::BuiltEnvironmentVision,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            PromptComponentKind::PedestrianDemographics => "Pedestrian Demographics",
            PromptComponentKind::TrafficControl => "Traffic Control",
            PromptComponentKind::RoadwayGeometry => "Roadway Geometry",
            PromptComponentKind::BuiltEnvironmentVision => "Built Environment (Vision)",
            PromptComponentKind::LandUseTransit => "Land Use & Transit",
            PromptComponentKind::EnvironmentalConditions => "Environmental Conditions",
            PromptComponentKind::DomainKnowledgeContext => "Domain Knowledge Context",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            PromptComponentKind::PedestrianDemographics => "pedestrian_demographics",
            PromptComponentKind::TrafficControl => "traffic_control",
            PromptComponentKind::RoadwayGeometry => "roadway_geometry",
            PromptComponentKind::BuiltEnvironmentVision => "built_environment_vision",
            PromptComponentKind::LandUseTransit => "land_use_transit",
            PromptComponentKind::EnvironmentalConditions => "environmental_conditions",
            PromptComponentKind::DomainKnowledgeContext => "domain_knowledge_context",
        }
    }

    pub fn header(self) -> String {
        format!("[{}]", self.name().to_uppercase())
    }

    pub fn placeholder(self) -> String {
        format!("[{}: information withheld]", self.name().to_uppercase())
    }
}

impl fmt::Display for PromptComponentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Switches for the six behavioral priors of the knowledge block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnowledgeConfig {
    pub individual_age: bool,
    pub individual_gender: bool,
    pub individual_walking_context: bool,
    pub environment_weather: bool,
    pub environment_lighting: bool,
    pub environment_land_use_transit: bool,
}

impl Default for KnowledgeConfig {
    fn default() -> Self {
        KnowledgeConfig::all()
    }
}

impl KnowledgeConfig {
    pub fn all() -> Self {
        KnowledgeConfig {
            individual_age: true,
            individual_gender: true,
            individual_walking_context: true,
            environment_weather: true,
            environment_lighting: true,
            environment_land_use_transit: true,
        }
    }

    pub fn none() -> Self {
        KnowledgeConfig::from_flags([false; 6])
    }

    pub fn individual_only() -> Self {
        KnowledgeConfig::from_flags([true, true, true, false, false, false])
    }

    pub fn environment_only() -> Self {
        KnowledgeConfig::from_flags([false, false, false, true, true, true])
    }

    pub fn flags(&self) -> [bool; 6] {
        [
            self.individual_age,
            self.individual_gender,
            self.individual_walking_context,
            self.environment_weather,
            self.environment_lighting,
            self.environment_land_use_transit,
        ]
    }

    pub fn from_flags(f: [bool; 6]) -> Self {
        KnowledgeConfig {
            individual_age: f[0],
            individual_gender: f[1],
            individual_walking_context: f[2],
            environment_weather: f[3],
            environment_lighting: f[4],
            environment_land_use_transit: f[5],
        }
    }

    /// Named ablation arms: `full`, `none`, `individual`, `environment`.
    pub fn ablation(name: &str) -> Option<Self> {
        match name {
            "full" | "all" => Some(KnowledgeConfig::all()),
            "none" => Some(KnowledgeConfig::none()),
            "individual" => Some(KnowledgeConfig::individual_only()),
            "environment" | "built_environment" => Some(KnowledgeConfig::environment_only()),
            _ => None,
        }
    }
}

/// Prior sentences in flag order: age, gender, walking context, weather,
/// lighting, land use & transit.
pub const KNOWLEDGE_PRIORS: [&str; 6] = [
    "Age significantly influences crossing choice: older adults typically demonstrate higher safety awareness and delay tolerance, which means a lower probability of mid-block crossing.",
    "Male pedestrians exhibit a higher tendency for mid-block crossing compared to females.",
    "Pedestrians walking alone are statistically more likely to cross at mid-block locations compared to those in groups.",
    "Adverse weather conditions elevate the perceived cost of waiting at intersections, which makes mid-block crossing a time-saving strategy.",
    "Adequate sight distance and lighting encourage mid-block crossings by improving perceived safety.",
    "Office-residential land use generates lower crossing demand, while pedestrian generators like bus stops concentrate crossing activities.",
];

/// One sentence per enabled prior; empty when every flag is off.
pub fn knowledge_block(cfg: &KnowledgeConfig) -> String {
    cfg.flags()
        .iter()
        .zip(KNOWLEDGE_PRIORS)
        .filter(|(on, _)| **on)
        .map(|(_, s)| s)
        .collect::<Vec<_>>()
        .join(" ")
}

pub const TASK_INSTRUCTION: &str = "Infer the crossing location of this pedestrian. Respond with a single token: <INTERSECTION> for intersection crossing or <MIDBLOCK> for mid-block crossing.";
pub const ANSWER_CUE: &str = "Answer:";

fn presence(b: bool) -> &'static str {
    if b {
        "present"
    } else {
        "absent"
    }
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

fn age_text(a: AgeGroup) -> &'static str {
    match a {
        AgeGroup::Child => "child",
        AgeGroup::Adult => "adult",
        AgeGroup::Senior => "senior",
        AgeGroup::Unsure => "unsure",
    }
}

fn gender_text(g: Gender) -> &'static str {
    match g {
        Gender::Male => "male",
        Gender::Female => "female",
        Gender::Unsure => "unsure",
    }
}

fn context_text(c: WalkingContext) -> &'static str {
    match c {
        WalkingContext::Alone => "alone",
        WalkingContext::Group => "in a group",
    }
}

fn weather_text(w: Weather) -> &'static str {
    match w {
        Weather::ClearSunny => "clear and sunny",
        Weather::PartlyCloudy => "partly cloudy",
        Weather::Cloudy => "cloudy",
        Weather::RainDrizzle => "rain or drizzle",
    }
}

fn onset_text(g: GreenOnsetInterval) -> &'static str {
    match g {
        GreenOnsetInterval::Zero => "0 s",
        GreenOnsetInterval::Short => "1 to 85 s",
        GreenOnsetInterval::Long => "more than 85 s",
        GreenOnsetInterval::Missing => "unknown",
    }
}

fn green_text(g: GreenInterval) -> &'static str {
    match g {
        GreenInterval::Zero => "0 s",
        GreenInterval::Short => "1 to 40 s",
        GreenInterval::Long => "more than 40 s",
        GreenInterval::Missing => "unknown",
    }
}

fn land_use_text(l: LandUse) -> &'static str {
    match l {
        LandUse::EducationalResidential => "educational and residential",
        LandUse::CommercialResidential => "commercial and residential",
        LandUse::OfficeResidential => "office and residential",
        LandUse::EducationalOffice => "educational and office",
        LandUse::GreenspaceResidential => "green space and residential",
    }
}

fn push_effect_text(o: &PedestrianObservation) -> &'static str {
    match o.push_button_affects_time {
        Some(b) if o.push_button_available => yes_no(b),
        _ => "not applicable",
    }
}

pub fn demographics_text(o: &PedestrianObservation) -> String {
    format!(
        "Age group: {}. Gender: {}. Walking context: {}.",
        age_text(o.age_group),
        gender_text(o.gender),
        context_text(o.walking_context)
    )
}

pub fn environmental_text(o: &PedestrianObservation) -> String {
    format!(
        "Weather condition: {}. Lighting at intersection: {}. Lighting at mid-block: {}.",
        weather_text(o.weather),
        presence(o.lighting_intersection),
        presence(o.lighting_midblock)
    )
}

pub fn roadway_text(s: &SiteRecord) -> String {
    format!(
        "Number of lanes at mid-block: {}. Speed limit: {} mph. Total width of sidewalk: {} ft. Presence of raised median: {}.",
        s.lanes,
        s.speed_limit_mph,
        s.sidewalk_width_ft,
        presence(s.raised_median)
    )
}

pub fn traffic_control_text(o: &PedestrianObservation) -> String {
    format!(
        "Time interval between consecutive onsets of green time for crossing: {}. Green interval for crossing: {}. Pedestrian push-button available: {}. Push-button affecting crossing time: {}. Left turn protection phase: {}.",
        onset_text(o.green_onset_interval),
        green_text(o.green_interval),
        yes_no(o.push_button_available),
        push_effect_text(o),
        yes_no(o.left_turn_protection)
    )
}

pub fn land_use_transit_text(s: &SiteRecord) -> String {
    format!(
        "Land use: {}. Presence of public transit station: {}.",
        land_use_text(s.land_use),
        presence(s.transit_station)
    )
}

/// Compact one-line form of an observation used for in-context exemplars.
pub fn exemplar_text(o: &PedestrianObservation, s: &SiteRecord) -> String {
    format!(
        "{}, {}, {}; {}, intersection light {}, mid-block light {}; {} lanes, {} mph, median {}; onset {}, green {}, button {}; {}, transit {}.",
        age_text(o.age_group),
        gender_text(o.gender),
        context_text(o.walking_context),
        weather_text(o.weather),
        presence(o.lighting_intersection),
        presence(o.lighting_midblock),
        s.lanes,
        s.speed_limit_mph,
        presence(s.raised_median),
        onset_text(o.green_onset_interval),
        green_text(o.green_interval),
        yes_no(o.push_button_available),
        land_use_text(s.land_use),
        presence(s.transit_station)
    )
}

/// An in-context example: compact observation text plus its gold answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub obs_id: String,
    pub text: String,
    pub answer: Label,
}

impl FewShotExample {
    pub fn new(o: &PedestrianObservation, s: &SiteRecord) -> Self {
        FewShotExample {
            obs_id: o.obs_id.clone(),
            text: exemplar_text(o, s),
            answer: o.label,
        }
    }
}

pub fn answer_token(label: Label) -> &'static str {
    match label {
        Label::Intersection => INTERSECTION,
        Label::Midblock => MIDBLOCK,
    }
}

/// How a withheld component is shown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbsenceMode {
    /// Replace the component with a fixed placeholder line.
    #[default]
    Placeholder,
    /// Drop the component entirely.
    Delete,
}

/// A structured prompt for one observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub obs_id: String,
    /// Components in render order, each kind at most once.
    pub components: Vec<(PromptComponentKind, String)>,
    pub few_shot_examples: Vec<FewShotExample>,
    pub task_instruction: String,
}

impl Prompt {
    pub fn component(&self, kind: PromptComponentKind) -> Option<&str> {
        self.components
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, t)| t.as_str())
    }

    pub fn component_mut(&mut self, kind: PromptComponentKind) -> Option<&mut String> {
        self.components
            .iter_mut()
            .find(|(k, _)| *k == kind)
            .map(|(_, t)| t)
    }

    /// Render with every component present.
    pub fn render(&self) -> String {
        self.render_with(|_| true, AbsenceMode::Placeholder)
    }

    /// Render with only the components for which `present` holds. Components
    /// with empty text render as nothing whether present or not.
    pub fn render_with(&self, present: impl Fn(PromptComponentKind) -> bool, mode: AbsenceMode) -> String {
        let mut lines: Vec<String> = Vec::new();
        for (i, ex) in self.few_shot_examples.iter().enumerate() {
            lines.push(format!("[EXAMPLE {}]", i + 1));
            lines.push(ex.text.clone());
            lines.push(format!("{ANSWER_CUE} {}", answer_token(ex.answer)));
        }
        if !self.few_shot_examples.is_empty() {
            lines.push("[QUERY]".to_string());
        }
        for kind in PromptComponentKind::RENDER_ORDER {
            let Some(text) = self.component(kind) else { continue };
            if text.is_empty() {
                continue;
            }
            if present(kind) {
                lines.push(kind.header());
                lines.push(text.to_string());
            } else if mode == AbsenceMode::Placeholder {
                lines.push(kind.placeholder());
            }
        }
        lines.push("[TASK]".to_string());
        lines.push(self.task_instruction.clone());
        lines.push(ANSWER_CUE.to_string());
        lines.join("\n")
    }
}

/// Assemble the prompt for one observation.
pub fn build_prompt(
    obs: &PedestrianObservation,
    site: &SiteRecord,
    vision: &VisionDescription,
    cfg: &KnowledgeConfig,
    few_shot: &[FewShotExample],
) -> Result<Prompt, PromptError> {
    if obs.site_id != site.site_id || obs.site_id != vision.site_id {
        return Err(PromptError::SiteMismatch {
            obs_id: obs.obs_id.clone(),
            obs_site: obs.site_id.clone(),
            site: site.site_id.clone(),
            vision: vision.site_id.clone(),
        });
    }
    use PromptComponentKind as K;
    let components = vec![
        (K::DomainKnowledgeContext, knowledge_block(cfg)),
        (K::PedestrianDemographics, demographics_text(obs)),
        (K::EnvironmentalConditions, environmental_text(obs)),
        (K::RoadwayGeometry, roadway_text(site)),
        (K::TrafficControl, traffic_control_text(obs)),
        (K::LandUseTransit, land_use_transit_text(site)),
        (K::BuiltEnvironmentVision, vision.text.trim().to_string()),
    ];
    Ok(Prompt {
        obs_id: obs.obs_id.clone(),
        components,
        few_shot_examples: few_shot.to_vec(),
        task_instruction: TASK_INSTRUCTION.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Tokenizer and vocabulary
// ---------------------------------------------------------------------------

fn token_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"<[A-Z_]+>|\d+(?:\.\d+)?|[A-Za-z]+(?:[-'][A-Za-z0-9]+)*|\n|\S")
            .expect("token pattern compiles")
    })
}

const CLOSING: [&str; 8] = [".", ",", ":", ";", "?", "!", ")", "]"];
const OPENING: [&str; 2] = ["(", "["];

/// Split text into word, number, punctuation, special and newline tokens.
pub fn split_words(text: &str) -> Vec<&str> {
    token_regex()
        .find_iter(text)
        .map(|m| if m.as_str() == "\n" { NEWLINE } else { m.as_str() })
        .collect()
}

/// Inverse of [`split_words`] for canonically spaced text.
pub fn join_words<S: AsRef<str>>(words: &[S]) -> String {
    let mut out = String::new();
    let mut prev: Option<&str> = None;
    for w in words {
        let w = w.as_ref();
        let piece = if w == NEWLINE { "\n" } else { w };
        if let Some(p) = prev {
            let glue = p == NEWLINE || w == NEWLINE || CLOSING.contains(&w) || OPENING.contains(&p);
            if !glue {
                out.push(' ');
            }
        }
        out.push_str(piece);
        prev = Some(w);
    }
    out
}

/// Every fixed string the prompt templates can emit.
pub fn template_texts() -> Vec<String> {
    let mut out: Vec<String> = KNOWLEDGE_PRIORS.iter().map(|s| s.to_string()).collect();
    out.push(TASK_INSTRUCTION.into());
    out.push(ANSWER_CUE.into());
    out.push("[TASK] [QUERY]".into());
    for i in 1..=9 {
        out.push(format!("[EXAMPLE {i}]"));
    }
    for k in PromptComponentKind::ALL {
        out.push(k.header());
        out.push(k.placeholder());
    }
    for lanes in 2..=10u32 {
        for speed in crate::corpus::SPEED_LIMITS {
            for width in [10.0, 11.0, 12.0, 13.0, 14.0] {
                for land in LandUse::ALL {
                    for flag in [false, true] {
                        let s = SiteRecord {
                            site_id: String::new(),
                            location_name: String::new(),
                            lanes,
                            speed_limit_mph: speed,
                            raised_median: flag,
                            transit_station: flag,
                            sidewalk_width_ft: width,
                            land_use: *land,
                        };
                        out.push(roadway_text(&s));
                        out.push(land_use_transit_text(&s));
                    }
                }
            }
        }
    }
    for a in AgeGroup::ALL {
        out.push(age_text(*a).into());
    }
    for g in Gender::ALL {
        out.push(gender_text(*g).into());
    }
    for c in WalkingContext::ALL {
        out.push(context_text(*c).into());
    }
    for w in Weather::ALL {
        out.push(weather_text(*w).into());
    }
    for g in GreenOnsetInterval::ALL {
        out.push(onset_text(*g).into());
    }
    for g in GreenInterval::ALL {
        out.push(green_text(*g).into());
    }
    let probe = PedestrianObservation {
        obs_id: String::new(),
        site_id: String::new(),
        age_group: AgeGroup::Adult,
        gender: Gender::Male,
        walking_context: WalkingContext::Alone,
        weather: Weather::ClearSunny,
        lighting_intersection: true,
        lighting_midblock: false,
        green_onset_interval: GreenOnsetInterval::Zero,
        green_interval: GreenInterval::Zero,
        push_button_available: false,
        push_button_affects_time: None,
        left_turn_protection: true,
        label: Label::Intersection,
    };
    out.push(demographics_text(&probe));
    out.push(environmental_text(&probe));
    out.push(traffic_control_text(&probe));
    out.push("yes no not applicable present absent".into());
    out
}

/// Word-level vocabulary with the special tokens at ids 0-4.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(self.unk())
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or(UNK)
    }

    pub fn pad(&self) -> u32 {
        0
    }

    pub fn unk(&self) -> u32 {
        1
    }

    pub fn bos(&self) -> u32 {
        2
    }

    pub fn intersection(&self) -> u32 {
        3
    }

    pub fn midblock(&self) -> u32 {
        4
    }

    pub fn answer_id(&self, label: Label) -> u32 {
        match label {
            Label::Intersection => self.intersection(),
            Label::Midblock => self.midblock(),
        }
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        split_words(text).into_iter().map(|w| self.id(w)).collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        let words: Vec<&str> = ids.iter().map(|&i| self.token(i)).collect();
        join_words(&words)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Content hash used to tie checkpoints to a vocabulary.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    /// One token per line; line number is the id.
    pub fn save(&self, path: &Path) -> Result<(), PromptError> {
        let err = |e: std::io::Error| PromptError::VocabularyFile {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(err)?);
        for t in &self.tokens {
            writeln!(w, "{t}").map_err(err)?;
        }
        w.flush().map_err(err)
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let fail = |message: String| PromptError::VocabularyFile {
            path: path.display().to_string(),
            message,
        };
        let file = std::fs::File::open(path).map_err(|e| fail(e.to_string()))?;
        let tokens: Vec<String> = std::io::BufReader::new(file)
            .lines()
            .collect::<Result<_, _>>()
            .map_err(|e| fail(e.to_string()))?;
        if tokens.len() < SPECIAL_TOKENS.len() || tokens[..SPECIAL_TOKENS.len()] != SPECIAL_TOKENS {
            return Err(fail("special tokens missing from the first lines".into()));
        }
        let unique: BTreeSet<&String> = tokens.iter().collect();
        if unique.len() != tokens.len() {
            return Err(fail("duplicate tokens".into()));
        }
        Ok(Vocabulary::from_tokens(tokens))
    }
}

/// Build a vocabulary covering `corpus` and every template string.
pub fn build_vocabulary<S: AsRef<str>>(corpus: &[S]) -> Result<Vocabulary, PromptError> {
    if corpus.is_empty() {
        return Err(PromptError::EmptyCorpus);
    }
    let mut words: BTreeSet<String> = BTreeSet::new();
    for text in corpus.iter().map(|s| s.as_ref().to_string()).chain(template_texts()) {
        for w in split_words(&text) {
            words.insert(w.to_string());
        }
    }
    words.insert(NEWLINE.to_string());
    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(words.into_iter().filter(|w| !SPECIAL_TOKENS.contains(&w.as_str())));
    Ok(Vocabulary::from_tokens(tokens))
}

/// Training instance: prompt tokens, appended answer token and its mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizedPrompt {
    pub obs_id: String,
    /// `<BOS>`, prompt tokens, then the gold answer token.
    pub tokens: Vec<u32>,
    /// True exactly at the answer position.
    pub answer_mask: Vec<bool>,
    pub target_token: u32,
}

impl TokenizedPrompt {
    /// Prompt tokens without the appended answer (the model input at inference).
    pub fn context(&self) -> &[u32] {
        &self.tokens[..self.tokens.len() - 1]
    }

    /// Shifted next-token view: inputs, next-token labels and their loss mask.
    pub fn shifted(&self) -> (&[u32], &[u32], &[bool]) {
        let n = self.tokens.len();
        (&self.tokens[..n - 1], &self.tokens[1..], &self.answer_mask[1..])
    }
}

/// `<BOS>` plus the prompt tokens, truncated to leave `reserve` free slots.
///
/// Truncation removes words from the end of the vision description first,
/// then knowledge sentences from the end of the knowledge block. Structured
/// observation fields are never shortened.
pub fn encode_prompt(
    prompt: &Prompt,
    vocab: &Vocabulary,
    max_len: usize,
    reserve: usize,
) -> Result<Vec<u32>, PromptError> {
    fit_prompt(prompt, vocab, max_len, reserve).map(|(_, ids)| ids)
}

/// Like [`encode_prompt`], also returning the prompt as truncated.
pub fn fit_prompt(
    prompt: &Prompt,
    vocab: &Vocabulary,
    max_len: usize,
    reserve: usize,
) -> Result<(Prompt, Vec<u32>), PromptError> {
    let limit = max_len.saturating_sub(reserve);
    let encode = |p: &Prompt| -> Vec<u32> {
        let mut t = vec![vocab.bos()];
        t.extend(vocab.tokenize(&p.render()));
        t
    };
    let ids = encode(prompt);
    if ids.len() <= limit {
        return Ok((prompt.clone(), ids));
    }
    let mut p = prompt.clone();
    let truncate = |kind: PromptComponentKind, p: &mut Prompt, by_sentence: bool| -> Option<Vec<u32>> {
        let text = p.component(kind)?.to_string();
        let units: Vec<&str> = if by_sentence {
            text.split_inclusive(". ").map(str::trim).collect()
        } else {
            text.split_whitespace().collect()
        };
        // largest prefix that fits
        let (mut lo, mut hi) = (0usize, units.len());
        let with = |n: usize, p: &mut Prompt| {
            *p.component_mut(kind).expect("component exists") = units[..n].join(" ");
            encode(p)
        };
        while lo < hi {
            let mid = (lo + hi + 1) / 2;
            if with(mid, p).len() <= limit {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        let ids = with(lo, p);
        (ids.len() <= limit).then_some(ids)
    };
    if let Some(ids) = truncate(PromptComponentKind::BuiltEnvironmentVision, &mut p, false) {
        return Ok((p, ids));
    }
    if let Some(ids) = truncate(PromptComponentKind::DomainKnowledgeContext, &mut p, true) {
        return Ok((p, ids));
    }
    Err(PromptError::TooLong {
        obs_id: prompt.obs_id.clone(),
        len: encode(&p).len(),
        limit,
    })
}

/// Tokenize a prompt for training with the gold answer appended.
pub fn tokenize_for_training(
    prompt: &Prompt,
    vocab: &Vocabulary,
    gold: Label,
    max_len: usize,
) -> Result<TokenizedPrompt, PromptError> {
    let mut tokens = encode_prompt(prompt, vocab, max_len, 1)?;
    let target_token = vocab.answer_id(gold);
    tokens.push(target_token);
    let mut answer_mask = vec![false; tokens.len()];
    *answer_mask.last_mut().expect("non-empty") = true;
    Ok(TokenizedPrompt {
        obs_id: prompt.obs_id.clone(),
        tokens,
        answer_mask,
        target_token,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentRecord {
    pub kind: PromptComponentKind,
    pub text: String,
}

/// One line of the prompt dump consumed by training and attribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptDumpRecord {
    pub obs_id: String,
    pub components: Vec<ComponentRecord>,
    pub rendered: String,
    pub tokens: Vec<u32>,
    pub answer_mask: Vec<bool>,
    pub target: u32,
}

impl PromptDumpRecord {
    pub fn new(prompt: &Prompt, tp: &TokenizedPrompt) -> Self {
        PromptDumpRecord {
            obs_id: prompt.obs_id.clone(),
            components: prompt
                .components
                .iter()
                .map(|(kind, text)| ComponentRecord {
                    kind: *kind,
                    text: text.clone(),
                })
                .collect(),
            rendered: prompt.render(),
            tokens: tp.tokens.clone(),
            answer_mask: tp.answer_mask.clone(),
            target: tp.target_token,
        }
    }
}
