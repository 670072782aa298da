//! Deterministic stand-ins for the model backends.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde_json::json;
use sha2::{Digest, Sha256};

use super::{BackendError, EmbedBackend, RetryPolicy, TextBackend, VisionBackend};
use crate::geometry::{rectangle, SQ_FT_PER_SQ_M};

/// Answers `MOCK:<first 8 hex chars of sha256(image)>|<prompt length>`.
///
/// Any pixel change alters the encoded bytes and therefore the answer, so the
/// occlusion harness sees the most sensitive model possible.
#[derive(Debug, Default, Clone)]
pub struct MockVisionBackend;

impl MockVisionBackend {
    pub fn answer(image: &[u8], prompt: &str) -> String {
        let digest = hex::encode(Sha256::digest(image));
        format!("MOCK:{}|{}", &digest[..8], prompt.chars().count())
    }
}

impl VisionBackend for MockVisionBackend {
    fn id(&self) -> &str {
        "mock-vision"
    }
    fn describe(&self, image: &[u8], prompt: &str) -> Result<String, BackendError> {
        Ok(Self::answer(image, prompt))
    }
    fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy::immediate(1)
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Feature-hashing embedder over lowercase words and character trigrams.
///
/// Slot 0 is a constant bias so that no text (not even "") embeds to zero.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder { dim: 384 }
    }
}

impl HashEmbedder {
    pub fn vector(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0f32; self.dim];
        v[0] = 1.0;
        let lower = text.to_lowercase();
        let mut add = |feature: &[u8]| {
            let h = fnv1a(feature);
            let slot = 1 + (h % (self.dim as u64 - 1)) as usize;
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[slot] += sign;
        };
        for word in lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            add(format!("w:{word}").as_bytes());
        }
        let chars: Vec<char> = lower.chars().collect();
        for tri in chars.windows(3) {
            let s: String = tri.iter().collect();
            add(format!("c:{s}").as_bytes());
        }
        v
    }
}

impl EmbedBackend for HashEmbedder {
    fn id(&self) -> &str {
        "hash-embedder"
    }
    fn embed(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        Ok(self.vector(text))
    }
    fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy::immediate(1)
    }
}

/// How [`MockTextBackend`] answers need-rating prompts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoreMode {
    Constant(f64),
    /// Count efficiency and inefficiency cue phrases in the note.
    Keyword,
}

const INEFFICIENT_CUES: &[&str] = &[
    "older",
    "rust",
    "minimal",
    "exposed",
    "heat loss",
    "no signs of added",
    "inefficien",
    "window ac",
    "drafty",
    "single-pane",
    "worn",
];

const EFFICIENT_CUES: &[&str] = &[
    "recently",
    "high-efficiency",
    "state-of-the-art",
    "smart thermostat",
    "variable-speed",
    "spray foam",
    "good thermal",
    "energy efficiency",
    "blown-in",
    "adequately insulated",
    "upgraded",
];

/// Keyword need score in [0, 1]; 0.5 for a note with no cues.
pub fn keyword_score(note: &str) -> f64 {
    let lower = note.to_lowercase();
    let count = |cues: &[&str]| cues.iter().filter(|c| lower.contains(*c)).count() as f64;
    (0.5 + 0.15 * (count(INEFFICIENT_CUES) - count(EFFICIENT_CUES))).clamp(0.0, 1.0)
}

/// Deterministic text generator.
///
/// Prompts mentioning "GeoJSON" get a well-formed building feature derived
/// from the metadata lines in the prompt; every other prompt is treated as a
/// need-rating request and answered per [`ScoreMode`].
#[derive(Debug, Clone)]
pub struct MockTextBackend {
    pub score_mode: ScoreMode,
}

impl Default for MockTextBackend {
    fn default() -> Self {
        MockTextBackend {
            score_mode: ScoreMode::Keyword,
        }
    }
}

impl MockTextBackend {
    pub fn constant(score: f64) -> Self {
        MockTextBackend {
            score_mode: ScoreMode::Constant(score),
        }
    }

    fn prompt_value<'a>(prompt: &'a str, key: &str) -> Option<&'a str> {
        let prefix = format!("{key}: ");
        prompt
            .lines()
            .find_map(|l| l.trim().strip_prefix(prefix.as_str()))
            .map(str::trim)
            .filter(|v| *v != "unknown")
    }

    fn feature_for(prompt: &str) -> String {
        let h = fnv1a(prompt.as_bytes());
        let unit = |shift: u32| ((h >> shift) & 0xffff) as f64 / 65535.0;
        let floor_area: f64 = Self::prompt_value(prompt, "total_square_feet_living_area")
            .and_then(|v| v.parse().ok())
            .filter(|v: &f64| *v > 0.0)
            .unwrap_or(1500.0);
        let stories: f64 = Self::prompt_value(prompt, "number_of_stories")
            .and_then(|v| v.parse().ok())
            .filter(|v: &f64| *v >= 1.0)
            .unwrap_or(1.0);
        let side = (floor_area / stories / SQ_FT_PER_SQ_M).sqrt();
        let origin = (-75.22 + unit(0) * 0.01, 40.69 + unit(16) * 0.01);
        let ring: Vec<[f64; 2]> = {
            let mut r: Vec<[f64; 2]> = rectangle(origin, side, side).into_iter().map(|(x, y)| [x, y]).collect();
            r.push(r[0]);
            r
        };
        let round2 = |x: f64| (x * 100.0).round() / 100.0;
        let heating = Self::prompt_value(prompt, "heating_system_type").unwrap_or("unknown system");
        let fuel = Self::prompt_value(prompt, "heating_fuel_type").unwrap_or("unknown fuel");
        let wall = Self::prompt_value(prompt, "exterior_wall_material").unwrap_or("unrecorded");
        let windows = if prompt.contains("FACADE DESCRIPTION: (none)") {
            "no photo available to assess windows"
        } else {
            "windows visible in the street photo"
        };
        let note = format!(
            "Heating by {heating} ({fuel}); exterior walls {wall}; attic insulation depth not verified; {windows}."
        );
        let building_type = Self::prompt_value(prompt, "building_style").unwrap_or("Single family");
        json!({
            "type": "Feature",
            "properties": {
                "name": "Generated Home",
                "floor_area": floor_area,
                "building_type": building_type,
                "inspection_note": note,
                "number_of_stories": stories,
                "hvac_heating_cop": round2(0.7 + 0.28 * unit(32)),
                "hvac_cooling_cop": round2(2.5 + 1.5 * unit(48)),
                "wall_r_value": (7.0 + 13.0 * unit(8)).round(),
                "roof_r_value": (19.0 + 30.0 * unit(24)).round(),
                "air_change_rate": round2(0.3 + 1.2 * unit(40)),
            },
            "geometry": { "type": "Polygon", "coordinates": [ring] }
        })
        .to_string()
    }

    /// The note inside the first `"""` pair, or the whole prompt.
    fn note_in(prompt: &str) -> &str {
        let mut parts = prompt.splitn(3, "\"\"\"");
        match (parts.next(), parts.next(), parts.next()) {
            (Some(_), Some(note), Some(_)) => note,
            _ => prompt,
        }
    }
}

impl TextBackend for MockTextBackend {
    fn id(&self) -> &str {
        "mock-text"
    }

    fn generate(&self, prompt: &str) -> Result<String, BackendError> {
        if prompt.contains("GeoJSON") {
            return Ok(Self::feature_for(prompt));
        }
        let score = match self.score_mode {
            ScoreMode::Constant(s) => s,
            ScoreMode::Keyword => keyword_score(Self::note_in(prompt)),
        };
        Ok(format!("{score:.4}"))
    }

    fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy::immediate(1)
    }
}

/// Replays canned responses in order, repeating the last one once exhausted,
/// and records every prompt it receives.
#[derive(Debug)]
pub struct ScriptedText {
    responses: Vec<Result<String, BackendError>>,
    calls: AtomicUsize,
    prompts: Mutex<Vec<String>>,
    retry: RetryPolicy,
}

impl ScriptedText {
    pub fn new(responses: Vec<Result<String, BackendError>>) -> Self {
        assert!(!responses.is_empty(), "script needs at least one response");
        ScriptedText {
            responses,
            calls: AtomicUsize::new(0),
            prompts: Mutex::new(Vec::new()),
            retry: RetryPolicy::immediate(3),
        }
    }

    pub fn ok<S: Into<String>>(responses: impl IntoIterator<Item = S>) -> Self {
        Self::new(responses.into_iter().map(|s| Ok(s.into())).collect())
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().unwrap().clone()
    }
}

impl TextBackend for ScriptedText {
    fn id(&self) -> &str {
        "scripted-text"
    }
    fn generate(&self, prompt: &str) -> Result<String, BackendError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        self.prompts.lock().unwrap().push(prompt.to_string());
        self.responses[n.min(self.responses.len() - 1)].clone()
    }
    fn retry_policy(&self) -> RetryPolicy {
        self.retry
    }
}

/// Vision counterpart of [`ScriptedText`].
#[derive(Debug)]
pub struct ScriptedVision {
    responses: Vec<Result<String, BackendError>>,
    calls: AtomicUsize,
    retry: RetryPolicy,
}

impl ScriptedVision {
    pub fn new(responses: Vec<Result<String, BackendError>>, retry: RetryPolicy) -> Self {
        assert!(!responses.is_empty(), "script needs at least one response");
        ScriptedVision {
            responses,
            calls: AtomicUsize::new(0),
            retry,
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl VisionBackend for ScriptedVision {
    fn id(&self) -> &str {
        "scripted-vision"
    }
    fn describe(&self, _image: &[u8], _prompt: &str) -> Result<String, BackendError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        self.responses[n.min(self.responses.len() - 1)].clone()
    }
    fn retry_policy(&self) -> RetryPolicy {
        self.retry
    }
}
