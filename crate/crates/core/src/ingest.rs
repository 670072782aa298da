//! Loading home records from a dataset directory, and the collector interface.
//!
//! Dataset layout: `<dir>/<id>.json` holds the county metadata; images live
//! next to it as `<id>_photo.(jpg|png)` and `<id>_floorplan.(jpg|png)` unless
//! the record names them explicitly via `"photo"` / `"floorplan"`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backend::{BackendError, RetryPolicy};
use crate::domain::HomeRecord;
use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: &[&str] = &["jpg", "jpeg", "png"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileIssue {
    pub file: PathBuf,
    pub reason: String,
    /// `true` when the file produced no record.
    pub skipped: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Ingested {
    pub records: Vec<HomeRecord>,
    pub report: Vec<FileIssue>,
}

fn find_image(dir: &Path, id: &str, kind: &str) -> Option<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{id}_{kind}.{ext}")))
        .find(|p| p.is_file())
}

/// Parse one record document. `fallback_id` is used when the document has no `id`.
pub fn parse_record(text: &str, fallback_id: &str) -> std::result::Result<HomeRecord, String> {
    let mut value: Value = serde_json::from_str(text).map_err(|e| format!("malformed JSON: {e}"))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| "record must be a JSON object".to_string())?;
    if !obj.contains_key("id") {
        obj.insert("id".into(), Value::String(fallback_id.to_string()));
    }
    let record: HomeRecord = serde_json::from_value(value).map_err(|e| format!("invalid record: {e}"))?;
    record.validate()?;
    Ok(record)
}

/// Resolve image references against `dir`; missing files are dropped and reported.
fn resolve_images(dir: &Path, mut record: HomeRecord, issues: &mut Vec<String>) -> HomeRecord {
    let mut resolve = |given: Option<PathBuf>, kind: &str| -> Option<PathBuf> {
        match given {
            Some(p) => {
                let p = if p.is_relative() { dir.join(p) } else { p };
                if p.is_file() {
                    Some(p)
                } else {
                    issues.push(format!("{kind} image {} not found", p.display()));
                    None
                }
            }
            None => find_image(dir, &record.id, kind),
        }
    };
    let photo = resolve(record.photo_path.take(), "photo");
    let floorplan = resolve(record.floorplan_path.take(), "floorplan");
    record.photo_path = photo;
    record.floorplan_path = floorplan;
    record
}

fn load_one(dir: &Path, path: &Path) -> (Option<HomeRecord>, Vec<FileIssue>) {
    let issue = |reason: String, skipped: bool| FileIssue {
        file: path.to_path_buf(),
        reason,
        skipped,
    };
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => return (None, vec![issue(e.to_string(), true)]),
    };
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    match parse_record(&text, &stem) {
        Ok(record) => {
            let mut warnings = Vec::new();
            let record = resolve_images(dir, record, &mut warnings);
            (Some(record), warnings.into_iter().map(|w| issue(w, false)).collect())
        }
        Err(reason) => (None, vec![issue(reason, true)]),
    }
}

/// Load every `*.json` record in `dir`, sorted by id.
///
/// Malformed files and duplicate ids are skipped and listed in the report; only
/// a missing or unreadable directory is fatal.
pub fn load_home_records(dir: &Path) -> Result<Ingested> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "json"))
        .collect();
    files.sort();

    let loaded: Vec<(Option<HomeRecord>, Vec<FileIssue>)> = files.par_iter().map(|p| load_one(dir, p)).collect();

    let mut out = Ingested::default();
    let mut by_id: BTreeMap<String, HomeRecord> = BTreeMap::new();
    for ((record, issues), file) in loaded.into_iter().zip(&files) {
        out.report.extend(issues);
        if let Some(r) = record {
            if by_id.contains_key(&r.id) {
                out.report.push(FileIssue {
                    file: file.clone(),
                    reason: format!("duplicate id {}", r.id),
                    skipped: true,
                });
            } else {
                by_id.insert(r.id.clone(), r);
            }
        }
    }
    out.records = by_id.into_values().collect();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScrapedImage {
    /// File extension without the dot, e.g. `jpg`.
    pub extension: String,
    pub bytes: Vec<u8>,
}

/// One property as delivered by a collector: the raw record document and images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScrapedProperty {
    pub json: String,
    pub photo: Option<ScrapedImage>,
    pub floorplan: Option<ScrapedImage>,
}

/// A source of property records for a street (a county portal, an archive...).
pub trait ScrapeBackend: Send + Sync {
    fn id(&self) -> &str;
    /// Fetch every residential property on `street`. Transient failures
    /// should be reported as retryable [`BackendError`]s.
    fn fetch(&self, street: &str) -> std::result::Result<Vec<ScrapedProperty>, BackendError>;
    fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy::default()
    }
}

/// Fetch a street and materialize it into `workdir` in the dataset layout.
pub fn fetch_street(backend: &dyn ScrapeBackend, street: &str, workdir: &Path) -> Result<Ingested> {
    let properties = backend.retry_policy().run(|| backend.fetch(street))?;
    fs::create_dir_all(workdir).map_err(|e| Error::io(workdir, e))?;

    let mut out = Ingested::default();
    let mut seen = HashSet::new();
    for (i, prop) in properties.into_iter().enumerate() {
        let label = PathBuf::from(format!("{street}#{i}"));
        let mut record = match parse_record(&prop.json, &format!("{street}-{i}")) {
            Ok(r) if seen.insert(r.id.clone()) => r,
            Ok(r) => {
                out.report.push(FileIssue {
                    file: label,
                    reason: format!("duplicate id {}", r.id),
                    skipped: true,
                });
                continue;
            }
            Err(reason) => {
                out.report.push(FileIssue {
                    file: label,
                    reason,
                    skipped: true,
                });
                continue;
            }
        };
        let write = |path: PathBuf, bytes: &[u8]| -> Result<PathBuf> {
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        };
        let json_path = workdir.join(format!("{}.json", record.id));
        write(json_path, prop.json.as_bytes())?;
        if let Some(img) = &prop.photo {
            let p = workdir.join(format!("{}_photo.{}", record.id, img.extension));
            record.photo_path = Some(write(p, &img.bytes)?);
        }
        if let Some(img) = &prop.floorplan {
            let p = workdir.join(format!("{}_floorplan.{}", record.id, img.extension));
            record.floorplan_path = Some(write(p, &img.bytes)?);
        }
        out.records.push(record);
    }
    out.records.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

/// Serves canned properties per street; can be told to fail the first N calls.
#[derive(Debug, Default)]
pub struct FixtureScrapeBackend {
    streets: BTreeMap<String, Vec<ScrapedProperty>>,
    fail_first: usize,
    calls: AtomicUsize,
    retry: Option<RetryPolicy>,
}

impl FixtureScrapeBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_street(mut self, street: &str, homes: Vec<ScrapedProperty>) -> Self {
        self.streets.insert(street.to_string(), homes);
        self
    }

    /// Load `<dir>/<STREET>/<id>.json` plus images, one subdirectory per street.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut backend = Self::new();
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let street_dir = entry.map_err(|e| Error::io(dir, e))?.path();
            if !street_dir.is_dir() {
                continue;
            }
            let street = street_dir.file_name().unwrap().to_string_lossy().into_owned();
            let mut homes = Vec::new();
            let mut files: Vec<PathBuf> = fs::read_dir(&street_dir)
                .map_err(|e| Error::io(&street_dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "json"))
                .collect();
            files.sort();
            for f in files {
                let json = fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
                let id = f.file_stem().unwrap().to_string_lossy().into_owned();
                let image = |kind: &str| -> Option<ScrapedImage> {
                    let p = find_image(&street_dir, &id, kind)?;
                    Some(ScrapedImage {
                        extension: p.extension()?.to_string_lossy().into_owned(),
                        bytes: fs::read(&p).ok()?,
                    })
                };
                homes.push(ScrapedProperty {
                    photo: image("photo"),
                    floorplan: image("floorplan"),
                    json,
                });
            }
            backend.streets.insert(street, homes);
        }
        Ok(backend)
    }

    pub fn failing_first(mut self, n: usize) -> Self {
        self.fail_first = n;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = Some(retry);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ScrapeBackend for FixtureScrapeBackend {
    fn id(&self) -> &str {
        "fixture"
    }

    fn fetch(&self, street: &str) -> std::result::Result<Vec<ScrapedProperty>, BackendError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if n < self.fail_first {
            return Err(BackendError::Transport(format!("fixture failure {}", n + 1)));
        }
        Ok(self.streets.get(street).cloned().unwrap_or_default())
    }

    fn retry_policy(&self) -> RetryPolicy {
        self.retry.unwrap_or_else(|| RetryPolicy::immediate(3))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) {
        fs::write(dir.join(name), body).unwrap();
    }

    fn home(id: &str, area: u32) -> String {
        format!(r#"{{"id":"{id}","street_address":"1 MAIN ST","total_square_feet_living_area":{area}}}"#)
    }

    #[test]
    fn loads_valid_records_sorted() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "b.json", &home("b", 1200));
        write(dir.path(), "a.json", &home("a", 2576));
        write(dir.path(), "c.json", &home("c", 900));
        let out = load_home_records(dir.path()).unwrap();
        assert!(out.report.is_empty());
        let ids: Vec<_> = out.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(out.records[0].attributes.total_square_feet_living_area, Some(2576.0));
    }

    #[test]
    fn malformed_file_is_reported_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.json", &home("a", 1000));
        write(dir.path(), "b.json", &home("b", 1000));
        write(dir.path(), "broken.json", "{");
        let out = load_home_records(dir.path()).unwrap();
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.report.len(), 1);
        assert!(out.report[0].file.ends_with("broken.json"));
        assert!(out.report[0].skipped);
    }

    #[test]
    fn missing_directory_is_fatal() {
        assert!(matches!(
            load_home_records(Path::new("/definitely/not/here")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn duplicate_and_negative_records_skipped() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.json", &home("a", 1000));
        write(dir.path(), "a2.json", &home("a", 1500));
        write(dir.path(), "n.json", r#"{"id":"n","bedrooms":-2}"#);
        let out = load_home_records(dir.path()).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.report.iter().filter(|i| i.skipped).count(), 2);
    }

    #[test]
    fn images_found_by_convention_and_id_from_stem() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "h7.json", r#"{"street_address":"7 ELM ST"}"#);
        write(dir.path(), "h7_photo.png", "x");
        let out = load_home_records(dir.path()).unwrap();
        let r = &out.records[0];
        assert_eq!(r.id, "h7");
        assert_eq!(r.photo_path.as_deref(), Some(dir.path().join("h7_photo.png").as_path()));
        assert!(r.floorplan_path.is_none());
    }

    #[test]
    fn explicit_missing_image_is_warned() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "h.json", r#"{"id":"h","photo":"nope.jpg"}"#);
        let out = load_home_records(dir.path()).unwrap();
        assert_eq!(out.records.len(), 1);
        assert!(out.records[0].photo_path.is_none());
        assert!(!out.report[0].skipped);
    }

    #[test]
    fn attributes_are_verbatim() {
        let dir = tempfile::tempdir().unwrap();
        let body = r#"{"id":"v","year_built":1925,"grade":"C+","sketch_data":{"Main":1200.5}}"#;
        write(dir.path(), "v.json", body);
        let out = load_home_records(dir.path()).unwrap();
        let written: Value = serde_json::to_value(&out.records[0]).unwrap();
        let source: Value = serde_json::from_str(body).unwrap();
        for (k, v) in source.as_object().unwrap() {
            match v.as_f64() {
                Some(n) => assert_eq!(written[k].as_f64(), Some(n), "{k}"),
                None => assert_eq!(&written[k], v, "{k}"),
            }
        }
    }

    fn scraped(id: &str) -> ScrapedProperty {
        ScrapedProperty {
            json: home(id, 1800),
            photo: Some(ScrapedImage {
                extension: "jpg".into(),
                bytes: vec![1, 2, 3],
            }),
            floorplan: Some(ScrapedImage {
                extension: "png".into(),
                bytes: vec![4, 5],
            }),
        }
    }

    #[test]
    fn fetch_street_materializes_images() {
        let backend = FixtureScrapeBackend::new().with_street("MAIN ST", vec![scraped("m1"), scraped("m2")]);
        let dir = tempfile::tempdir().unwrap();
        let out = fetch_street(&backend, "MAIN ST", dir.path()).unwrap();
        assert_eq!(out.records.len(), 2);
        for r in &out.records {
            assert!(r.photo_path.as_ref().unwrap().is_file());
            assert!(r.floorplan_path.as_ref().unwrap().is_file());
        }
        // The workdir is itself a loadable dataset.
        assert_eq!(load_home_records(dir.path()).unwrap().records, out.records);
    }

    #[test]
    fn fetch_unknown_street_is_empty() {
        let backend = FixtureScrapeBackend::new().with_street("MAIN ST", vec![scraped("m1")]);
        let dir = tempfile::tempdir().unwrap();
        let out = fetch_street(&backend, "NOWHERE RD", dir.path()).unwrap();
        assert!(out.records.is_empty() && out.report.is_empty());
    }

    #[test]
    fn fetch_retries_transient_failure_once() {
        let backend = FixtureScrapeBackend::new()
            .with_street("MAIN ST", vec![scraped("m1"), scraped("m2")])
            .failing_first(1);
        let dir = tempfile::tempdir().unwrap();
        let out = fetch_street(&backend, "MAIN ST", dir.path()).unwrap();
        assert_eq!(backend.calls(), 2);
        assert_eq!(out.records.len(), 2);
    }

    #[test]
    fn fetch_skips_unparseable_property() {
        let mut bad = scraped("x");
        bad.json = "not json".into();
        let backend = FixtureScrapeBackend::new().with_street("MAIN ST", vec![scraped("m1"), bad]);
        let dir = tempfile::tempdir().unwrap();
        let out = fetch_street(&backend, "MAIN ST", dir.path()).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.report.len(), 1);
    }
}
