//! Data model shared by every pipeline stage.
//!
//! Everything here is plain data: immutable once built and `Send + Sync`, so
//! values can be handed to worker threads freely.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

/// Floorplan segment name to area in ft².
pub type SketchData = BTreeMap<String, f64>;

/// How an attribute is rendered into prompts and checked for sign.
pub trait AttributeValue {
    fn render(&self) -> String;
    /// Values that must be non-negative.
    fn numbers(&self) -> Vec<f64>;
}

impl AttributeValue for f64 {
    fn render(&self) -> String {
        format!("{self}")
    }
    fn numbers(&self) -> Vec<f64> {
        vec![*self]
    }
}

impl AttributeValue for String {
    fn render(&self) -> String {
        self.clone()
    }
    fn numbers(&self) -> Vec<f64> {
        Vec::new()
    }
}

impl AttributeValue for SketchData {
    fn render(&self) -> String {
        self.iter()
            .map(|(k, v)| format!("{k}={v} ft2"))
            .collect::<Vec<_>>()
            .join(", ")
    }
    fn numbers(&self) -> Vec<f64> {
        self.values().copied().collect()
    }
}

macro_rules! home_attributes {
    ($( $field:ident : $ty:ty ),* $(,)?) => {
        /// County metadata for one property. Every field is optional: an
        /// attribute the county did not publish stays `None`, never zero.
        #[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
        pub struct HomeAttributes {
            $(
                #[serde(default, skip_serializing_if = "Option::is_none")]
                pub $field: Option<$ty>,
            )*
        }

        impl HomeAttributes {
            /// Attribute keys in collection order.
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            /// `(key, rendered value)` for every attribute in collection order.
            pub fn entries(&self) -> Vec<(&'static str, Option<String>)> {
                vec![$( (stringify!($field), self.$field.as_ref().map(AttributeValue::render)) ),*]
            }

            fn numeric_values(&self) -> Vec<(&'static str, f64)> {
                let mut out = Vec::new();
                $(
                    if let Some(v) = &self.$field {
                        out.extend(v.numbers().into_iter().map(|n| (stringify!($field), n)));
                    }
                )*
                out
            }
        }
    };
}

home_attributes! {
    year_built: f64,
    remodeled_year: f64,
    land_use_code: String,
    total_square_feet_living_area: f64,
    number_of_stories: f64,
    grade: String,
    cdu: String,
    building_style: String,
    total_rooms: f64,
    bedrooms: f64,
    full_baths: f64,
    half_baths: f64,
    additional_fixtures: f64,
    total_fixtures: f64,
    heat_air_cond: String,
    heating_fuel_type: String,
    heating_system_type: String,
    attic_code: String,
    unfinished_area: f64,
    rec_room_area: f64,
    finished_basement_area: f64,
    fireplace_openings: f64,
    fireplace_stacks: f64,
    prefab_fireplaces: f64,
    basement_garage_cars: f64,
    condo_level: f64,
    condo_townhouse_type: String,
    basement: String,
    exterior_wall_material: String,
    physical_condition: String,
    sketch_data: SketchData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomeRecord {
    pub id: String,
    #[serde(default)]
    pub street_address: String,
    #[serde(flatten)]
    pub attributes: HomeAttributes,
    #[serde(rename = "photo", default, skip_serializing_if = "Option::is_none")]
    pub photo_path: Option<PathBuf>,
    #[serde(rename = "floorplan", default, skip_serializing_if = "Option::is_none")]
    pub floorplan_path: Option<PathBuf>,
}

impl HomeRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("id must be nonempty".into());
        }
        for (key, value) in self.attributes.numeric_values() {
            if !value.is_finite() || value < 0.0 {
                return Err(format!("attribute {key} must be finite and >= 0, got {value}"));
            }
        }
        Ok(())
    }

    pub fn has_images(&self) -> bool {
        self.photo_path.is_some() || self.floorplan_path.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDescription {
    pub facade_text: String,
    pub floorplan_text: String,
    pub backend_id: String,
}

/// One of the five estimated performance parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Param {
    HeatingCop,
    CoolingCop,
    WallR,
    RoofR,
    AirChangeRate,
}

impl Param {
    pub const ALL: [Param; 5] = [
        Param::HeatingCop,
        Param::CoolingCop,
        Param::WallR,
        Param::RoofR,
        Param::AirChangeRate,
    ];

    /// GeoJSON property key.
    pub fn key(self) -> &'static str {
        match self {
            Param::HeatingCop => "hvac_heating_cop",
            Param::CoolingCop => "hvac_cooling_cop",
            Param::WallR => "wall_r_value",
            Param::RoofR => "roof_r_value",
            Param::AirChangeRate => "air_change_rate",
        }
    }

    /// Closed interval of accepted values.
    pub fn bounds(self) -> (f64, f64) {
        match self {
            Param::HeatingCop => (0.5, 1.2),
            Param::CoolingCop => (1.0, 6.0),
            Param::WallR => (1.0, 60.0),
            Param::RoofR => (1.0, 80.0),
            Param::AirChangeRate => (0.05, 5.0),
        }
    }
}

impl fmt::Display for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// HVAC efficiencies, imperial R-values (ft²·°F·hr/Btu) and infiltration (ACH).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerformanceParams {
    pub hvac_heating_cop: f64,
    pub hvac_cooling_cop: f64,
    pub wall_r_value: f64,
    pub roof_r_value: f64,
    pub air_change_rate: f64,
}

impl PerformanceParams {
    /// Defaults used by the simulation template and the ablation harness.
    pub const DEFAULTS: PerformanceParams = PerformanceParams {
        hvac_heating_cop: 0.8,
        hvac_cooling_cop: 3.0,
        wall_r_value: 13.0,
        roof_r_value: 30.0,
        air_change_rate: 2.0,
    };

    pub fn get(&self, param: Param) -> f64 {
        match param {
            Param::HeatingCop => self.hvac_heating_cop,
            Param::CoolingCop => self.hvac_cooling_cop,
            Param::WallR => self.wall_r_value,
            Param::RoofR => self.roof_r_value,
            Param::AirChangeRate => self.air_change_rate,
        }
    }

    pub fn with(mut self, param: Param, value: f64) -> Self {
        match param {
            Param::HeatingCop => self.hvac_heating_cop = value,
            Param::CoolingCop => self.hvac_cooling_cop = value,
            Param::WallR => self.wall_r_value = value,
            Param::RoofR => self.roof_r_value = value,
            Param::AirChangeRate => self.air_change_rate = value,
        }
        self
    }

    /// Every out-of-range or non-finite parameter, as messages.
    pub fn check(&self) -> Result<(), Vec<String>> {
        let errors: Vec<String> = Param::ALL
            .iter()
            .filter_map(|&p| {
                let v = self.get(p);
                let (lo, hi) = p.bounds();
                if !v.is_finite() {
                    Some(format!("{p} must be finite, got {v}"))
                } else if v < lo || v > hi {
                    Some(format!("{p} = {v} outside [{lo}, {hi}]"))
                } else {
                    None
                }
            })
            .collect();
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }

    /// Clamp finite values into bounds; returns one warning per clamped value.
    pub fn clamped(self) -> (Self, Vec<String>) {
        let mut out = self;
        let mut warnings = Vec::new();
        for p in Param::ALL {
            let v = self.get(p);
            let (lo, hi) = p.bounds();
            let c = v.clamp(lo, hi);
            if c != v {
                warnings.push(format!("{p} = {v} clamped to {c}"));
                out = out.with(p, c);
            }
        }
        (out, warnings)
    }
}

/// Longitude, latitude in degrees.
pub type LonLat = (f64, f64);

/// A generated building: GeoJSON Feature with a Polygon footprint.
///
/// `footprint` holds the distinct ring vertices; the closing vertex is added
/// on serialization and removed on parse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Value", try_from = "Value")]
pub struct BuildingFeature {
    pub name: String,
    /// ft²
    pub floor_area: f64,
    pub building_type: String,
    pub inspection_note: String,
    pub number_of_stories: Option<f64>,
    pub params: PerformanceParams,
    pub footprint: Vec<LonLat>,
}

impl BuildingFeature {
    pub fn closed_ring(&self) -> Vec<[f64; 2]> {
        let mut ring: Vec<[f64; 2]> = self.footprint.iter().map(|&(x, y)| [x, y]).collect();
        if let Some(&first) = ring.first() {
            ring.push(first);
        }
        ring
    }

    pub fn to_geojson(&self) -> Value {
        let mut props = json!({
            "name": self.name,
            "floor_area": self.floor_area,
            "building_type": self.building_type,
            "inspection_note": self.inspection_note,
            "hvac_heating_cop": self.params.hvac_heating_cop,
            "hvac_cooling_cop": self.params.hvac_cooling_cop,
            "wall_r_value": self.params.wall_r_value,
            "roof_r_value": self.params.roof_r_value,
            "air_change_rate": self.params.air_change_rate,
        });
        if let Some(stories) = self.number_of_stories {
            props["number_of_stories"] = json!(stories);
        }
        json!({
            "type": "Feature",
            "properties": props,
            "geometry": {
                "type": "Polygon",
                "coordinates": [self.closed_ring()],
            }
        })
    }
}

impl From<BuildingFeature> for Value {
    fn from(f: BuildingFeature) -> Self {
        f.to_geojson()
    }
}

impl TryFrom<Value> for BuildingFeature {
    type Error = String;

    /// Strict parse: any violation is an error. Clamping and repair belong to
    /// [`crate::genjson::validate_value`].
    fn try_from(value: Value) -> Result<Self, Self::Error> {
        let validated = crate::genjson::validate_value(&value).map_err(|v| v.join("; "))?;
        if !validated.warnings.is_empty() {
            return Err(validated.warnings.join("; "));
        }
        Ok(validated.feature)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineKind {
    External,
    Surrogate,
}

impl fmt::Display for EngineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EngineKind::External => "external",
            EngineKind::Surrogate => "surrogate",
        })
    }
}

/// Annual energy outcomes for one home.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    /// Delivered heating + cooling energy, kWh.
    pub hvac_energy_kwh: f64,
    /// Heating + cooling envelope load before equipment efficiency, kWh.
    pub envelope_load_kwh: f64,
    pub engine: EngineKind,
    #[serde(default)]
    pub raw_outputs: BTreeMap<String, f64>,
}

impl SimulationResult {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("hvac_energy_kwh", self.hvac_energy_kwh),
            ("envelope_load_kwh", self.envelope_load_kwh),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }

    /// The measured value scored for `category`.
    pub fn alpha(&self, category: Category) -> f64 {
        match category {
            Category::Hvac => self.hvac_energy_kwh,
            Category::Insulation => self.envelope_load_kwh,
        }
    }
}

/// Retrofit category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Hvac,
    Insulation,
}

impl Category {
    pub const ALL: [Category; 2] = [Category::Hvac, Category::Insulation];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Hvac => "hvac",
            Category::Insulation => "insulation",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyLabel {
    pub category: Category,
    pub lambda: f64,
    pub eta: f64,
    pub mu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionReport {
    pub image_id: String,
    pub baseline_text: String,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Row-major cosine distances from the baseline response.
    pub distances: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_mask: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rmd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nrmd: Option<f64>,
}

impl OcclusionReport {
    pub fn distance(&self, row: usize, col: usize) -> f64 {
        self.distances[row * self.grid_cols + col]
    }

    pub fn max_distance(&self) -> f64 {
        self.distances.iter().copied().fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.distances.len() != self.grid_rows * self.grid_cols {
            return Err(format!(
                "expected {} distances, found {}",
                self.grid_rows * self.grid_cols,
                self.distances.len()
            ));
        }
        if let Some(d) = self.distances.iter().find(|d| !d.is_finite() || **d < 0.0 || **d > 2.0) {
            return Err(format!("distance {d} outside [0, 2]"));
        }
        match (&self.region_mask, self.rmd, self.nrmd) {
            (Some(mask), Some(_), Some(_)) if mask.len() == self.distances.len() => Ok(()),
            (None, None, None) => Ok(()),
            _ => Err("rmd/nrmd must be present exactly when a region mask is".into()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_feature() -> BuildingFeature {
        BuildingFeature {
            name: "Generated Home".into(),
            floor_area: 2576.0,
            building_type: "Single family".into(),
            inspection_note: "Older furnace, attic insulation thin.".into(),
            number_of_stories: Some(2.0),
            params: PerformanceParams {
                hvac_heating_cop: 0.85,
                hvac_cooling_cop: 3.0,
                wall_r_value: 13.0,
                roof_r_value: 30.0,
                air_change_rate: 0.35,
            },
            footprint: vec![(-75.2, 40.7), (-75.1999, 40.7), (-75.1999, 40.7001)],
        }
    }

    #[test]
    fn absent_attributes_stay_absent() {
        let rec: HomeRecord = serde_json::from_str(r#"{"id":"a","total_square_feet_living_area":2576}"#).unwrap();
        assert_eq!(rec.attributes.total_square_feet_living_area, Some(2576.0));
        assert_eq!(rec.attributes.bedrooms, None);
        let back = serde_json::to_value(&rec).unwrap();
        assert!(back.get("bedrooms").is_none());
    }

    #[test]
    fn negative_attribute_rejected() {
        let rec: HomeRecord = serde_json::from_str(r#"{"id":"a","bedrooms":-1}"#).unwrap();
        assert!(rec.validate().is_err());
        let rec: HomeRecord = serde_json::from_str(r#"{"id":"a","sketch_data":{"Main":-3}}"#).unwrap();
        assert!(rec.validate().is_err());
        let rec: HomeRecord = serde_json::from_str(r#"{"id":" "}"#).unwrap();
        assert!(rec.validate().is_err());
    }

    #[test]
    fn entries_follow_collection_order() {
        let attrs = HomeAttributes {
            year_built: Some(1925.0),
            ..Default::default()
        };
        let entries = attrs.entries();
        assert_eq!(entries.len(), HomeAttributes::KEYS.len());
        assert_eq!(entries[0], ("year_built", Some("1925".to_string())));
        assert_eq!(entries.last().unwrap().0, "sketch_data");
    }

    #[test]
    fn param_bounds_are_closed() {
        for p in Param::ALL {
            let (lo, hi) = p.bounds();
            let base = PerformanceParams::DEFAULTS;
            assert!(base.with(p, lo).check().is_ok());
            assert!(base.with(p, hi).check().is_ok());
            assert!(base.with(p, lo - 1e-9).check().is_err());
            assert!(base.with(p, hi + 1e-9).check().is_err());
            assert!(base.with(p, f64::NAN).check().is_err());
        }
        assert!(PerformanceParams::DEFAULTS.check().is_ok());
    }

    #[test]
    fn clamp_reports_each_value() {
        let p = PerformanceParams::DEFAULTS
            .with(Param::WallR, 100.0)
            .with(Param::AirChangeRate, 0.0);
        let (c, warnings) = p.clamped();
        assert_eq!(c.wall_r_value, 60.0);
        assert_eq!(c.air_change_rate, 0.05);
        assert_eq!(warnings.len(), 2);
    }

    #[test]
    fn feature_serializes_as_closed_polygon() {
        let v = sample_feature().to_geojson();
        assert_eq!(v["type"], "Feature");
        assert_eq!(v["geometry"]["type"], "Polygon");
        let ring = v["geometry"]["coordinates"][0].as_array().unwrap();
        assert_eq!(ring.len(), 4);
        assert_eq!(ring[0], ring[3]);
        assert_eq!(v["properties"]["floor_area"], 2576.0);
    }

    #[test]
    fn report_validation() {
        let mut r = OcclusionReport {
            image_id: "x".into(),
            baseline_text: "b".into(),
            grid_rows: 2,
            grid_cols: 2,
            distances: vec![0.0, 0.5, 1.0, 2.0],
            region_mask: None,
            rmd: None,
            nrmd: None,
        };
        assert!(r.validate().is_ok());
        r.rmd = Some(0.1);
        assert!(r.validate().is_err());
        r.rmd = None;
        r.distances[0] = 2.5;
        assert!(r.validate().is_err());
    }

    fn finite(lo: f64, hi: f64) -> impl Strategy<Value = f64> {
        lo..hi
    }

    proptest! {
        #[test]
        fn feature_round_trip(
            area in finite(1.0, 1e5),
            heat in finite(0.5, 1.2),
            cool in finite(1.0, 6.0),
            wall in finite(1.0, 60.0),
            roof in finite(1.0, 80.0),
            ach in finite(0.05, 5.0),
            lon in finite(-179.0, 179.0),
            lat in finite(-80.0, 80.0),
            stories in proptest::option::of(1.0f64..4.0),
        ) {
            let f = BuildingFeature {
                name: "h".into(),
                floor_area: area,
                building_type: "Single family".into(),
                inspection_note: "note".into(),
                number_of_stories: stories,
                params: PerformanceParams {
                    hvac_heating_cop: heat,
                    hvac_cooling_cop: cool,
                    wall_r_value: wall,
                    roof_r_value: roof,
                    air_change_rate: ach,
                },
                footprint: vec![(lon, lat), (lon + 1e-4, lat), (lon + 1e-4, lat + 1e-4), (lon, lat + 1e-4)],
            };
            let text = serde_json::to_string(&f).unwrap();
            let back: BuildingFeature = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(back, f);
        }

        #[test]
        fn record_round_trip(
            year in proptest::option::of(1800.0f64..2025.0),
            area in proptest::option::of(0.0f64..1e4),
            style in proptest::option::of("[A-Za-z ]{0,12}"),
            sketch in proptest::collection::btree_map("[A-Z]{1,4}", 0.0f64..2000.0, 0..4),
        ) {
            let rec = HomeRecord {
                id: "h1".into(),
                street_address: "1 MAIN ST".into(),
                attributes: HomeAttributes {
                    year_built: year,
                    total_square_feet_living_area: area,
                    building_style: style,
                    sketch_data: if sketch.is_empty() { None } else { Some(sketch) },
                    ..Default::default()
                },
                photo_path: Some("h1_photo.jpg".into()),
                floorplan_path: None,
            };
            let text = serde_json::to_string(&rec).unwrap();
            let back: HomeRecord = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(back, rec);
        }

        #[test]
        fn simulation_result_round_trip(h in 0.0f64..1e7, e in 0.0f64..1e7, x in -1e3f64..1e3) {
            let mut raw = BTreeMap::new();
            raw.insert("total".to_string(), x);
            let r = SimulationResult { hvac_energy_kwh: h, envelope_load_kwh: e, engine: EngineKind::Surrogate, raw_outputs: raw };
            let back: SimulationResult = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
            prop_assert_eq!(back, r);
        }

        #[test]
        fn clamped_params_always_in_bounds(vals in proptest::array::uniform5(-100.0f64..200.0)) {
            let p = PerformanceParams {
                hvac_heating_cop: vals[0],
                hvac_cooling_cop: vals[1],
                wall_r_value: vals[2],
                roof_r_value: vals[3],
                air_change_rate: vals[4],
            };
            let (c, _) = p.clamped();
            prop_assert!(c.check().is_ok());
        }
    }
}
