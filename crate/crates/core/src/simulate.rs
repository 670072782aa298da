//! Building simulation: template rendering, the external engine adapter, and
//! a closed-form surrogate.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::domain::{BuildingFeature, EngineKind, LonLat, Param, PerformanceParams, SimulationResult};
use crate::error::{Error, Result};
use crate::geometry::{footprint_area_m2, footprint_perimeter_m, project_local, SQ_FT_PER_SQ_M};

/// m²·K/W per imperial R unit.
pub const R_IMPERIAL_TO_SI: f64 = 0.1761;
/// Volumetric heat capacity of air per air change, W/K per (m³·ACH).
pub const AIR_HEAT_CAPACITY: f64 = 0.335;

pub const DEFAULT_TEMPLATE: &str = include_str!("../templates/house.idf");

/// Placeholders the template must contain exactly once.
pub const REQUIRED_PLACEHOLDERS: &[&str] = &[
    "FLOOR_AREA",
    "WALL_R_VALUE",
    "ROOF_R_VALUE",
    "HVAC_HEATING_COP",
    "HVAC_COOLING_COP",
    "AIR_CHANGE_RATE",
    "VERTICES",
];

/// Placeholders that may appear at most once, filled from template defaults.
pub const OPTIONAL_PLACEHOLDERS: &[&str] = &["WINDOW_U_VALUE", "HVAC_SYSTEM_TYPE"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateDefaults {
    pub params: PerformanceParams,
    pub window_u_value: f64,
    pub hvac_system_type: String,
}

impl Default for TemplateDefaults {
    fn default() -> Self {
        TemplateDefaults {
            params: PerformanceParams::DEFAULTS,
            window_u_value: 2.0,
            hvac_system_type: "Gas Furnace".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdfTemplate {
    pub text: String,
    pub defaults: TemplateDefaults,
}

impl Default for IdfTemplate {
    fn default() -> Self {
        IdfTemplate::new(DEFAULT_TEMPLATE)
    }
}

fn placeholder_re() -> Regex {
    Regex::new(r"\$\{([^}]*)\}").unwrap()
}

impl IdfTemplate {
    pub fn new(text: impl Into<String>) -> Self {
        IdfTemplate {
            text: text.into(),
            defaults: TemplateDefaults::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(text))
    }

    /// Every placeholder is known and appears the right number of times, and
    /// the defaults are within parameter bounds.
    pub fn check(&self) -> Result<()> {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for cap in placeholder_re().captures_iter(&self.text) {
            *counts.entry(cap[1].to_string()).or_default() += 1;
        }
        let known: BTreeSet<&str> = REQUIRED_PLACEHOLDERS
            .iter()
            .chain(OPTIONAL_PLACEHOLDERS)
            .copied()
            .collect();
        if let Some(unknown) = counts.keys().find(|k| !known.contains(k.as_str())) {
            return Err(Error::Template(format!("unknown placeholder {unknown}")));
        }
        for name in REQUIRED_PLACEHOLDERS {
            match counts.get(*name).copied().unwrap_or(0) {
                1 => {}
                0 => return Err(Error::Template(format!("placeholder {name} missing"))),
                n => return Err(Error::Template(format!("placeholder {name} appears {n} times"))),
            }
        }
        for name in OPTIONAL_PLACEHOLDERS {
            if counts.get(*name).copied().unwrap_or(0) > 1 {
                return Err(Error::Template(format!("placeholder {name} appears more than once")));
            }
        }
        let stripped = placeholder_re().replace_all(&self.text, "");
        if stripped.contains("${") {
            return Err(Error::Template("unterminated placeholder".into()));
        }
        self.defaults
            .params
            .check()
            .map_err(|e| Error::Template(format!("defaults out of bounds: {}", e.join("; "))))
    }
}

/// Performance parameters where any may be missing.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PartialParams(pub [Option<f64>; 5]);

impl PartialParams {
    pub fn get(&self, p: Param) -> Option<f64> {
        self.0[Param::ALL.iter().position(|q| *q == p).unwrap()]
    }

    pub fn resolve(&self, defaults: &PerformanceParams) -> PerformanceParams {
        Param::ALL.iter().fold(*defaults, |acc, &p| match self.get(p) {
            Some(v) => acc.with(p, v),
            None => acc,
        })
    }
}

impl From<PerformanceParams> for PartialParams {
    fn from(p: PerformanceParams) -> Self {
        PartialParams(Param::ALL.map(|q| Some(p.get(q))))
    }
}

fn format_vertices(footprint: &[LonLat]) -> String {
    project_local(footprint)
        .iter()
        .map(|(x, y)| format!("{x:.4}, {y:.4}, 0.0"))
        .collect::<Vec<_>>()
        .join(",\n    ")
}

/// Fill the template; absent parameters take the template defaults.
pub fn render_with(
    floor_area: f64,
    footprint: &[LonLat],
    params: &PartialParams,
    template: &IdfTemplate,
) -> Result<String> {
    template.check()?;
    let p = params.resolve(&template.defaults.params);
    let value = |name: &str| -> String {
        match name {
            "FLOOR_AREA" => format!("{floor_area}"),
            "WALL_R_VALUE" => format!("{}", p.wall_r_value),
            "ROOF_R_VALUE" => format!("{}", p.roof_r_value),
            "HVAC_HEATING_COP" => format!("{}", p.hvac_heating_cop),
            "HVAC_COOLING_COP" => format!("{}", p.hvac_cooling_cop),
            "AIR_CHANGE_RATE" => format!("{}", p.air_change_rate),
            "VERTICES" => format_vertices(footprint),
            "WINDOW_U_VALUE" => format!("{}", template.defaults.window_u_value),
            "HVAC_SYSTEM_TYPE" => template.defaults.hvac_system_type.clone(),
            _ => unreachable!("checked above"),
        }
    };
    let out = placeholder_re()
        .replace_all(&template.text, |c: &regex::Captures| value(&c[1]))
        .into_owned();
    debug_assert!(!out.contains("${"));
    Ok(out)
}

pub fn render_idf(feature: &BuildingFeature, template: &IdfTemplate) -> Result<String> {
    render_with(
        feature.floor_area,
        &feature.footprint,
        &PartialParams::from(feature.params),
        template,
    )
}

fn binary(engine_home: &Path, name: &str) -> Option<PathBuf> {
    [name.to_string(), format!("{name}.exe")]
        .into_iter()
        .map(|n| engine_home.join(n))
        .find(|p| p.is_file())
}

fn run_step(mut cmd: Command, what: &str) -> Result<()> {
    let out = cmd
        .output()
        .map_err(|e| Error::Engine(format!("failed to start {what}: {e}")))?;
    if !out.status.success() {
        let stderr = String::from_utf8_lossy(&out.stderr);
        let lines: Vec<&str> = stderr.lines().collect();
        let tail = lines[lines.len().saturating_sub(20)..].join("\n");
        return Err(Error::Engine(format!("{what} exited with {}: {tail}", out.status)));
    }
    Ok(())
}

/// Run ExpandObjects then the engine on `idf` in a private scratch directory
/// and read annual totals from the tabular CSV output.
pub fn run_external(idf: &str, weather: &Path, engine_home: &Path) -> Result<SimulationResult> {
    if idf.contains("${") {
        return Err(Error::Template("input still contains placeholders".into()));
    }
    let expand = binary(engine_home, "ExpandObjects")
        .ok_or_else(|| Error::Engine(format!("binary not found: {}/ExpandObjects", engine_home.display())))?;
    let engine = binary(engine_home, "energyplus")
        .ok_or_else(|| Error::Engine(format!("binary not found: {}/energyplus", engine_home.display())))?;
    if !weather.is_file() {
        return Err(Error::Input(format!("weather file {} not found", weather.display())));
    }

    let scratch = tempfile::Builder::new()
        .prefix("synthomes-engine-")
        .tempdir()
        .map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let dir = scratch.path();
    let input = dir.join("in.idf");
    fs::write(&input, idf).map_err(|e| Error::io(&input, e))?;
    let idd = engine_home.join("Energy+.idd");
    if idd.is_file() {
        fs::copy(&idd, dir.join("Energy+.idd")).map_err(|e| Error::io(&idd, e))?;
    }

    let mut cmd = Command::new(&expand);
    cmd.current_dir(dir);
    run_step(cmd, "ExpandObjects")?;
    let expanded = dir.join("expanded.idf");
    let model = if expanded.is_file() { expanded } else { input };

    let out_dir = dir.join("out");
    let mut cmd = Command::new(&engine);
    cmd.current_dir(dir)
        .arg("--weather")
        .arg(weather)
        .arg("--output-directory")
        .arg(&out_dir)
        .arg(&model);
    run_step(cmd, "energyplus")?;
    parse_tabular_output(&out_dir.join("eplustbl.csv"))
}

fn unit_to_kwh(header: &str) -> Option<f64> {
    let unit = header.rsplit_once('[')?.1.trim_end_matches(']').trim();
    match unit {
        "kWh" => Some(1.0),
        "MWh" => Some(1000.0),
        "GJ" => Some(1.0e9 / 3.6e6),
        "MJ" => Some(1.0e6 / 3.6e6),
        "J" => Some(1.0 / 3.6e6),
        "kBtu" => Some(0.293_071_07),
        _ => None,
    }
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn row(&self, name: &str) -> Option<&Vec<String>> {
        self.rows.iter().find(|r| r.get(1).is_some_and(|c| c.trim() == name))
    }
}

fn find_table(records: &[Vec<String>], title: &str) -> Option<Table> {
    let start = records.iter().position(|r| {
        let cells: Vec<&str> = r.iter().map(|c| c.trim()).filter(|c| !c.is_empty()).collect();
        cells == [title]
    })?;
    let header = records.get(start + 1)?.clone();
    let rows = records[start + 2..]
        .iter()
        .take_while(|r| r.len() >= 2 && r[0].trim().is_empty() && !r[1].trim().is_empty())
        .cloned()
        .collect();
    Some(Table { header, rows })
}

fn slug(s: &str) -> String {
    s.split('[')
        .next()
        .unwrap_or(s)
        .trim()
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect::<Vec<_>>()
        .join("_")
}

/// Parse the engine's tabular CSV (`eplustbl.csv`, comma style) into annual totals.
pub fn parse_tabular_csv(text: &str) -> Result<SimulationResult> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let records: Vec<Vec<String>> = reader
        .records()
        .map(|r| r.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<_, _>>()?;

    let mut raw = BTreeMap::new();
    let end_uses = find_table(&records, "End Uses").ok_or_else(|| Error::Parse("missing \"End Uses\" table".into()))?;
    let mut hvac = 0.0;
    for use_name in ["Heating", "Cooling"] {
        let row = end_uses
            .row(use_name)
            .ok_or_else(|| Error::Parse(format!("End Uses table has no {use_name} row")))?;
        for (col, cell) in end_uses.header.iter().zip(row).skip(2) {
            let Some(factor) = unit_to_kwh(col) else { continue };
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad number {cell:?} in End Uses/{use_name}")))?;
            let kwh = v * factor;
            hvac += kwh;
            raw.insert(format!("end_uses.{}.{}_kwh", slug(use_name), slug(col)), kwh);
        }
    }

    let gains = find_table(&records, "Annual Building Sensible Heat Gain Components")
        .ok_or_else(|| Error::Parse("missing \"Annual Building Sensible Heat Gain Components\" table".into()))?;
    let total = gains
        .row("Total Facility")
        .ok_or_else(|| Error::Parse("sensible heat gain table has no Total Facility row".into()))?;
    let mut envelope = 0.0;
    // Column names differ between engine releases.
    for names in [
        [
            "HVAC Input Sensible Air Heating",
            "HVAC Zone Eq & Other Sensible Air Heating",
        ],
        [
            "HVAC Input Sensible Air Cooling",
            "HVAC Zone Eq & Other Sensible Air Cooling",
        ],
    ] {
        let wanted = names[0];
        let idx = gains
            .header
            .iter()
            .position(|h| names.iter().any(|n| h.trim().starts_with(n)))
            .ok_or_else(|| Error::Parse(format!("missing column {wanted:?}")))?;
        let factor = unit_to_kwh(&gains.header[idx])
            .ok_or_else(|| Error::Parse(format!("unknown unit in {:?}", gains.header[idx])))?;
        let cell = total.get(idx).map(String::as_str).unwrap_or("");
        let v: f64 = cell
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("bad number {cell:?} in {wanted}")))?;
        let kwh = (v * factor).abs();
        envelope += kwh;
        raw.insert(format!("sensible_heat_gain.{}_kwh", slug(wanted)), kwh);
    }
    raw.insert("hvac_energy_kwh".into(), hvac);
    raw.insert("envelope_load_kwh".into(), envelope);

    let result = SimulationResult {
        hvac_energy_kwh: hvac,
        envelope_load_kwh: envelope,
        engine: EngineKind::External,
        raw_outputs: raw,
    };
    result.validate().map_err(Error::Parse)?;
    Ok(result)
}

pub fn parse_tabular_output(path: &Path) -> Result<SimulationResult> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tabular_csv(&text)
}

/// Degree-days (°C·day) and story height for the surrogate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Climate {
    pub hdd: f64,
    pub cdd: f64,
    #[serde(default = "default_story_height")]
    pub story_height_m: f64,
}

fn default_story_height() -> f64 {
    3.0
}

impl Default for Climate {
    fn default() -> Self {
        Climate {
            hdd: 3000.0,
            cdd: 500.0,
            story_height_m: 3.0,
        }
    }
}

/// Number of stories: stated on the feature, else floor area over footprint.
pub fn stories_of(feature: &BuildingFeature, footprint_m2: f64) -> f64 {
    feature.number_of_stories.unwrap_or_else(|| {
        let floor_m2 = feature.floor_area / SQ_FT_PER_SQ_M;
        (floor_m2 / footprint_m2).round().max(1.0)
    })
}

/// Steady-state UA × degree-day model of one building.
pub fn run_surrogate(feature: &BuildingFeature, climate: &Climate) -> Result<SimulationResult> {
    if !(climate.hdd >= 0.0 && climate.cdd >= 0.0) {
        return Err(Error::Input("degree-days must be >= 0".into()));
    }
    if !(climate.story_height_m.is_finite() && climate.story_height_m > 0.0) {
        return Err(Error::Input("story height must be > 0".into()));
    }
    let roof_area = footprint_area_m2(&feature.footprint);
    if !(roof_area.is_finite() && roof_area > 0.0) {
        return Err(Error::Input("footprint has zero area".into()));
    }
    // Only physical validity is required here; the tighter parameter bounds
    // apply to generated features.
    let p = &feature.params;
    let positive = [p.hvac_heating_cop, p.hvac_cooling_cop, p.wall_r_value, p.roof_r_value];
    if positive.iter().any(|v| !(v.is_finite() && *v > 0.0))
        || !(p.air_change_rate.is_finite() && p.air_change_rate >= 0.0)
    {
        return Err(Error::Input(format!("non-physical parameters {p:?}")));
    }
    let stories = stories_of(feature, roof_area);
    let perimeter = footprint_perimeter_m(&feature.footprint);
    let wall_area = perimeter * stories * climate.story_height_m;
    let volume = roof_area * stories * climate.story_height_m;

    let u_wall = 1.0 / (p.wall_r_value * R_IMPERIAL_TO_SI);
    let u_roof = 1.0 / (p.roof_r_value * R_IMPERIAL_TO_SI);
    let ua_env = u_wall * wall_area + u_roof * roof_area;
    let ua_inf = p.air_change_rate * volume * AIR_HEAT_CAPACITY;
    let ua = ua_env + ua_inf;

    let heating_load = ua * climate.hdd * 24.0 / 1000.0;
    let cooling_load = ua * climate.cdd * 24.0 / 1000.0;
    let envelope = ua * (climate.hdd + climate.cdd) * 24.0 / 1000.0;
    let hvac = heating_load / p.hvac_heating_cop + cooling_load / p.hvac_cooling_cop;

    let raw = BTreeMap::from([
        ("wall_area_m2".to_string(), wall_area),
        ("roof_area_m2".to_string(), roof_area),
        ("volume_m3".to_string(), volume),
        ("stories".to_string(), stories),
        ("ua_envelope_w_per_k".to_string(), ua_env),
        ("ua_infiltration_w_per_k".to_string(), ua_inf),
        ("heating_load_kwh".to_string(), heating_load),
        ("cooling_load_kwh".to_string(), cooling_load),
    ]);
    Ok(SimulationResult {
        hvac_energy_kwh: hvac,
        envelope_load_kwh: envelope,
        engine: EngineKind::Surrogate,
        raw_outputs: raw,
    })
}
