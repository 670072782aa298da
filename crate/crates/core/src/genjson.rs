//! Prompting a text model for a building feature, and checking what comes back.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::backend::TextBackend;
use crate::domain::{BuildingFeature, HomeRecord, ImageDescription, Param, PerformanceParams};
use crate::error::{Error, Result};
use crate::geometry::{footprint_area_m2, SQ_FT_PER_SQ_M};

/// Property keys every generated feature must carry.
pub const REQUIRED_PROPERTIES: &[&str] = &[
    "name",
    "floor_area",
    "building_type",
    "inspection_note",
    "hvac_heating_cop",
    "hvac_cooling_cop",
    "wall_r_value",
    "roof_r_value",
    "air_change_rate",
];

pub const DEFAULT_MAX_RETRIES: u32 = 3;

fn describe_section(out: &mut String, title: &str, text: &str) {
    if text.trim().is_empty() {
        let _ = writeln!(out, "{title}: (none)");
    } else {
        let _ = writeln!(out, "{title}:\n{}", text.trim());
    }
}

/// Assemble the generation prompt from county metadata and image descriptions.
pub fn build_generation_prompt(record: &HomeRecord, desc: &ImageDescription) -> String {
    let mut p = String::new();
    p.push_str(
        "You are a certified home inspector and building energy modeler. Using the county \
         record and image descriptions below, take two actions:\n\
         1. Produce a GeoJSON Feature for this building with its footprint geometry, the \
         county data, and five estimated performance parameters.\n\
         2. Write a short inspection note focused on energy: insulation, HVAC type/age, \
         visible windows, and any inferred upgrades. Place it in the feature's properties.\n\n",
    );
    p.push_str("COUNTY RECORD:\n");
    let _ = writeln!(p, "id: {}", record.id);
    if !record.street_address.is_empty() {
        let _ = writeln!(p, "street_address: {}", record.street_address);
    }
    for (key, value) in record.attributes.entries() {
        let _ = writeln!(p, "{key}: {}", value.as_deref().unwrap_or("unknown"));
    }
    p.push('\n');
    describe_section(&mut p, "FACADE DESCRIPTION", &desc.facade_text);
    describe_section(&mut p, "FLOOR PLAN DESCRIPTION", &desc.floorplan_text);
    p.push_str(
        "\nOUTPUT RULES:\n\
         - Output exactly one JSON object and nothing else.\n\
         - \"type\" must be \"Feature\".\n\
         - \"geometry\" must be a GeoJSON \"Polygon\" whose first ring is closed (first \
         position equals last) and lists [longitude, latitude] positions of the footprint.\n\
         - \"properties\" must contain: name (string), floor_area (number, ft2), \
         building_type (string), inspection_note (string), number_of_stories (number), and \
         the performance parameters:\n",
    );
    for param in Param::ALL {
        let (lo, hi) = param.bounds();
        let _ = writeln!(p, "  - {} (number between {lo} and {hi})", param.key());
    }
    p.push_str(
        "- R-values use imperial units (ft2·F·h/Btu); hvac_heating_cop is a furnace \
         efficiency fraction; air_change_rate is in air changes per hour.\n\
         - Where the county record says unknown, estimate from the images and typical \
         construction of the era; do not leave properties out.\n",
    );
    p
}

/// A feature that passed validation, with any non-fatal findings.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedFeature {
    pub feature: BuildingFeature,
    pub warnings: Vec<String>,
}

/// Remove one leading and one trailing markdown code fence, if present.
pub fn strip_code_fence(raw: &str) -> &str {
    let mut t = raw.trim();
    if let Some(rest) = t.strip_prefix("```") {
        t = rest.split_once('\n').map_or("", |(_, body)| body);
    }
    if let Some(rest) = t.trim_end().strip_suffix("```") {
        t = rest;
    }
    t.trim()
}

/// Parse and check raw model output. Never panics on malformed text.
pub fn validate_feature(raw: &str) -> std::result::Result<ValidatedFeature, Vec<String>> {
    let value: Value =
        serde_json::from_str(strip_code_fence(raw)).map_err(|e| vec![format!("unparseable JSON: {e}")])?;
    validate_value(&value)
}

fn position(v: &Value) -> Option<(f64, f64)> {
    match v.as_array().map(Vec::as_slice) {
        Some([x, y, ..]) => {
            let (x, y) = (x.as_f64()?, y.as_f64()?);
            (x.is_finite() && y.is_finite()).then_some((x, y))
        }
        _ => None,
    }
}

fn check_geometry(geometry: &Value, violations: &mut Vec<String>) -> Option<Vec<(f64, f64)>> {
    let Some(geometry) = geometry.as_object() else {
        violations.push("\"geometry\" must be an object".into());
        return None;
    };
    if geometry.get("type").and_then(Value::as_str) != Some("Polygon") {
        violations.push("geometry \"type\" must be \"Polygon\"".into());
        return None;
    }
    let Some(ring) = geometry
        .get("coordinates")
        .and_then(Value::as_array)
        .and_then(|rings| rings.first())
        .and_then(Value::as_array)
    else {
        violations.push("geometry \"coordinates\" must hold at least one ring".into());
        return None;
    };
    let points: Option<Vec<(f64, f64)>> = ring.iter().map(position).collect();
    let Some(points) = points else {
        violations.push("ring positions must be [longitude, latitude] number pairs".into());
        return None;
    };
    if points.len() < 4 {
        violations.push(format!("ring has {} positions; at least 4 required", points.len()));
        return None;
    }
    if points.first() != points.last() {
        violations.push("ring is not closed: first position must equal last".into());
        return None;
    }
    if points
        .iter()
        .any(|&(lon, lat)| !(-180.0..=180.0).contains(&lon) || !(-90.0..=90.0).contains(&lat))
    {
        violations.push("ring positions out of longitude/latitude range".into());
        return None;
    }
    let mut open = points[..points.len() - 1].to_vec();
    open.dedup();
    let mut distinct = open.clone();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    if distinct.len() < 3 {
        violations.push("footprint needs at least 3 distinct vertices".into());
        return None;
    }
    if footprint_area_m2(&open) <= 0.0 {
        violations.push("footprint has zero area".into());
        return None;
    }
    Some(open)
}

fn string_prop(props: &Map<String, Value>, key: &str, nonempty: bool, violations: &mut Vec<String>) -> String {
    match props.get(key) {
        None => String::new(),
        Some(Value::String(s)) if nonempty && s.trim().is_empty() => {
            violations.push(format!("property \"{key}\" must be nonempty"));
            String::new()
        }
        Some(Value::String(s)) => s.clone(),
        Some(_) => {
            violations.push(format!("property \"{key}\" must be a string"));
            String::new()
        }
    }
}

fn number_prop(props: &Map<String, Value>, key: &str, violations: &mut Vec<String>) -> f64 {
    match props.get(key) {
        None => f64::NAN,
        Some(v) => match v.as_f64() {
            Some(x) if x.is_finite() => x,
            _ => {
                violations.push(format!("property \"{key}\" must be a finite number"));
                f64::NAN
            }
        },
    }
}

/// Validate an already-parsed GeoJSON value. Out-of-range performance
/// parameters are clamped into bounds and reported as warnings.
pub fn validate_value(value: &Value) -> std::result::Result<ValidatedFeature, Vec<String>> {
    let Some(obj) = value.as_object() else {
        return Err(vec!["top-level value must be a JSON object".into()]);
    };
    let mut violations = Vec::new();
    if obj.get("type").and_then(Value::as_str) != Some("Feature") {
        violations.push("\"type\" must be \"Feature\"".into());
    }
    let footprint = match obj.get("geometry") {
        None => {
            violations.push("missing member \"geometry\"".into());
            None
        }
        Some(g) => check_geometry(g, &mut violations),
    };
    let empty = Map::new();
    let props = match obj.get("properties") {
        None => {
            violations.push("missing member \"properties\"".into());
            &empty
        }
        Some(Value::Object(p)) => p,
        Some(_) => {
            violations.push("\"properties\" must be an object".into());
            &empty
        }
    };
    if obj.contains_key("properties") {
        for key in REQUIRED_PROPERTIES {
            if !props.contains_key(*key) {
                violations.push(format!("missing property \"{key}\""));
            }
        }
    }

    let name = string_prop(props, "name", false, &mut violations);
    let building_type = string_prop(props, "building_type", false, &mut violations);
    let inspection_note = string_prop(props, "inspection_note", true, &mut violations);
    let floor_area = number_prop(props, "floor_area", &mut violations);
    if floor_area.is_finite() && floor_area <= 0.0 {
        violations.push("property \"floor_area\" must be > 0".into());
    }
    let number_of_stories = match props.get("number_of_stories") {
        None | Some(Value::Null) => None,
        Some(v) => match v.as_f64() {
            Some(s) if s.is_finite() && s > 0.0 => Some(s),
            _ => {
                violations.push("property \"number_of_stories\" must be a positive number".into());
                None
            }
        },
    };
    let raw = PerformanceParams {
        hvac_heating_cop: number_prop(props, Param::HeatingCop.key(), &mut violations),
        hvac_cooling_cop: number_prop(props, Param::CoolingCop.key(), &mut violations),
        wall_r_value: number_prop(props, Param::WallR.key(), &mut violations),
        roof_r_value: number_prop(props, Param::RoofR.key(), &mut violations),
        air_change_rate: number_prop(props, Param::AirChangeRate.key(), &mut violations),
    };

    if !violations.is_empty() {
        return Err(violations);
    }
    let (params, warnings) = raw.clamped();
    Ok(ValidatedFeature {
        feature: BuildingFeature {
            name,
            floor_area,
            building_type,
            inspection_note,
            number_of_stories,
            params,
            footprint: footprint.expect("geometry checked"),
        },
        warnings,
    })
}

/// Footprint area should be within a factor of 5 of floor area per story.
pub fn plausibility_warning(feature: &BuildingFeature, record: &HomeRecord) -> Option<String> {
    let stories = record
        .attributes
        .number_of_stories
        .or(feature.number_of_stories)
        .filter(|s| *s > 0.0)
        .unwrap_or(1.0);
    let expected = feature.floor_area / stories;
    let actual = footprint_area_m2(&feature.footprint) * SQ_FT_PER_SQ_M;
    let ratio = actual / expected;
    (!(0.2..=5.0).contains(&ratio))
        .then(|| format!("footprint area {actual:.0} ft2 is {ratio:.2}x the expected {expected:.0} ft2 per story"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generated {
    pub feature: BuildingFeature,
    pub attempts: u32,
    pub warnings: Vec<String>,
}

/// The prompt sent after an invalid answer; lists every violation verbatim.
pub fn reprompt(original: &str, violations: &[String]) -> String {
    let mut p = String::from(original);
    p.push_str("\n\nYour previous output was invalid because:\n");
    for v in violations {
        let _ = writeln!(p, "- {v}");
    }
    p.push_str("Return only the corrected GeoJSON Feature.");
    p
}

/// Ask the backend for a feature, re-prompting with the violations until one
/// validates or `max_retries` attempts have been made.
pub fn generate_feature(backend: &dyn TextBackend, prompt: &str, max_retries: u32) -> Result<Generated> {
    if max_retries == 0 {
        return Err(Error::Input("max_retries must be >= 1".into()));
    }
    let mut current = prompt.to_string();
    let mut last = Vec::new();
    for attempt in 1..=max_retries {
        let raw = backend.retry_policy().run(|| backend.generate(&current))?;
        match validate_feature(&raw) {
            Ok(v) => {
                return Ok(Generated {
                    feature: v.feature,
                    attempts: attempt,
                    warnings: v.warnings,
                })
            }
            Err(violations) => {
                log::warn!("attempt {attempt}: invalid feature: {}", violations.join("; "));
                current = reprompt(prompt, &violations);
                last = violations;
            }
        }
    }
    Err(Error::Generation {
        attempts: max_retries,
        violations: last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockTextBackend, ScriptedText};
    use crate::domain::HomeAttributes;

    pub(crate) const FIG4: &str = r#"{
      "type": "Feature",
      "properties": {
        "name": "Generated Home",
        "floor_area": 2576,
        "building_type": "Single family",
        "inspection_note": "Older gas furnace; attic insulation appears thin; double-hung windows.",
        "hvac_heating_cop": 0.85,
        "hvac_cooling_cop": 3.0,
        "wall_r_value": 13,
        "roof_r_value": 30,
        "air_change_rate": 0.35
      },
      "geometry": {
        "type": "Polygon",
        "coordinates": [[[-75.2200, 40.6900], [-75.2197, 40.6900], [-75.2200, 40.6903], [-75.2200, 40.6900]]]
      }
    }"#;

    fn record() -> HomeRecord {
        HomeRecord {
            id: "h1".into(),
            street_address: "12 MAIN ST".into(),
            attributes: HomeAttributes {
                total_square_feet_living_area: Some(2576.0),
                number_of_stories: Some(2.0),
                ..Default::default()
            },
            photo_path: None,
            floorplan_path: None,
        }
    }

    fn desc(facade: &str, plan: &str) -> ImageDescription {
        ImageDescription {
            facade_text: facade.into(),
            floorplan_text: plan.into(),
            backend_id: "t".into(),
        }
    }

    #[test]
    fn prompt_lists_attributes_and_unknowns() {
        let p = build_generation_prompt(&record(), &desc("Brick colonial.", ""));
        assert!(p.contains("total_square_feet_living_area: 2576\n"));
        assert!(p.contains("attic_code: unknown\n"));
        assert!(p.contains("FLOOR PLAN DESCRIPTION: (none)"));
        assert!(p.contains("FACADE DESCRIPTION:\nBrick colonial."));
        for key in REQUIRED_PROPERTIES {
            assert!(p.contains(key), "{key}");
        }
        assert!(p.contains("insulation, HVAC type/age"));
    }

    #[test]
    fn figure_excerpt_validates() {
        let v = validate_feature(FIG4).unwrap();
        assert!(v.warnings.is_empty());
        let f = v.feature;
        assert_eq!(f.floor_area, 2576.0);
        assert_eq!(f.params.hvac_heating_cop, 0.85);
        assert_eq!(f.params.hvac_cooling_cop, 3.0);
        assert_eq!(f.params.wall_r_value, 13.0);
        assert_eq!(f.params.roof_r_value, 30.0);
        assert_eq!(f.params.air_change_rate, 0.35);
        assert_eq!(f.footprint.len(), 3);
    }

    #[test]
    fn garbage_is_unparseable() {
        let v = validate_feature("{").unwrap_err();
        assert_eq!(v.len(), 1);
        assert!(v[0].starts_with("unparseable JSON"));
    }

    #[test]
    fn missing_geometry_is_named() {
        let mut value: Value = serde_json::from_str(FIG4).unwrap();
        value.as_object_mut().unwrap().remove("geometry");
        let v = validate_value(&value).unwrap_err();
        assert_eq!(v, vec!["missing member \"geometry\"".to_string()]);
    }

    #[test]
    fn all_violations_collected() {
        let raw = r#"{"type":"Point","properties":{"name":"x","floor_area":-1,"inspection_note":""},
                      "geometry":{"type":"Polygon","coordinates":[[[0,0],[1,0],[0,0]]]}}"#;
        let v = validate_feature(raw).unwrap_err();
        assert!(v.iter().any(|s| s.contains("\"type\" must be \"Feature\"")));
        assert!(v.iter().any(|s| s.contains("at least 4")));
        assert!(v.iter().any(|s| s.contains("missing property \"wall_r_value\"")));
        assert!(v.iter().any(|s| s.contains("floor_area")));
        assert!(v.iter().any(|s| s.contains("inspection_note")));
    }

    #[test]
    fn open_ring_rejected() {
        let raw = FIG4.replace("[-75.2200, 40.6900]]]", "[-75.2201, 40.6901]]]");
        let v = validate_feature(&raw).unwrap_err();
        assert!(v[0].contains("not closed"), "{v:?}");
    }

    #[test]
    fn out_of_range_params_clamped_with_warning() {
        let raw = FIG4.replace("\"wall_r_value\": 13", "\"wall_r_value\": 90");
        let v = validate_feature(&raw).unwrap();
        assert_eq!(v.feature.params.wall_r_value, 60.0);
        assert_eq!(v.warnings.len(), 1);
    }

    #[test]
    fn fenced_output_accepted() {
        let fenced = format!("```json\n{FIG4}\n```");
        assert!(validate_feature(&fenced).is_ok());
        assert_eq!(strip_code_fence("```\n{}\n```"), "{}");
        assert_eq!(strip_code_fence(" {} "), "{}");
    }

    #[test]
    fn plausibility_flags_tiny_footprint() {
        let f = validate_feature(FIG4).unwrap().feature;
        // ~ 0.0003° x 0.0003° triangle is a few hundred ft²; 1288 ft² expected per story.
        let w = plausibility_warning(&f, &record());
        let area = footprint_area_m2(&f.footprint) * SQ_FT_PER_SQ_M;
        assert_eq!(w.is_some(), !(0.2..=5.0).contains(&(area / 1288.0)));
    }

    #[test]
    fn first_attempt_success() {
        let b = ScriptedText::ok([FIG4]);
        let g = generate_feature(&b, "p", 3).unwrap();
        assert_eq!(g.attempts, 1);
        assert_eq!(b.calls(), 1);
    }

    #[test]
    fn reprompts_until_valid() {
        let b = ScriptedText::ok(["garbage", "{\"type\":\"Feature\"}", FIG4]);
        let g = generate_feature(&b, "PROMPT", 3).unwrap();
        assert_eq!(g.attempts, 3);
        assert_eq!(b.calls(), 3);
        let prompts = b.prompts();
        assert_eq!(prompts[0], "PROMPT");
        assert!(prompts[1].starts_with("PROMPT\n\nYour previous output was invalid because:"));
        assert!(prompts[1].contains("unparseable JSON"));
        assert!(prompts[2].contains("missing member \"geometry\""));
    }

    #[test]
    fn always_invalid_gives_up_after_max() {
        let b = ScriptedText::ok(["nope"]);
        let err = generate_feature(&b, "p", 3).unwrap_err();
        assert_eq!(b.calls(), 3);
        match err {
            Error::Generation { attempts, violations } => {
                assert_eq!(attempts, 3);
                assert!(violations[0].starts_with("unparseable JSON"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mock_generator_output_validates_against_prompt() {
        let p = build_generation_prompt(&record(), &desc("x", "y"));
        let g = generate_feature(&MockTextBackend::default(), &p, 1).unwrap();
        assert_eq!(g.feature.floor_area, 2576.0);
        assert!(plausibility_warning(&g.feature, &record()).is_none());
    }
}
