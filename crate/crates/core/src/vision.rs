//! Turning facade photos and floor plans into text.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, VisionBackend};
use crate::domain::{HomeRecord, ImageDescription};
use crate::error::{Error, Result};

pub const FACADE_PROMPT: &str =
    "You are a certified home inspector. Describe the status roof. Is it in good condition? Why or why not?";
pub const FLOORPLAN_PROMPT: &str = "You are a certified home inspector. Describe the layout, rooms, and approximate geometry shown in this floor plan.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisionPrompts {
    pub facade: String,
    pub floorplan: String,
}

impl Default for VisionPrompts {
    fn default() -> Self {
        VisionPrompts {
            facade: FACADE_PROMPT.into(),
            floorplan: FLOORPLAN_PROMPT.into(),
        }
    }
}

/// Describe one encoded image, retrying transport failures per the backend's policy.
pub fn describe_image(backend: &dyn VisionBackend, image: &[u8], prompt: &str) -> Result<String> {
    if prompt.trim().is_empty() {
        return Err(Error::Input("prompt must be nonempty".into()));
    }
    image::load_from_memory(image).map_err(|e| Error::Input(format!("image does not decode: {e}")))?;
    let text = backend.retry_policy().run(|| backend.describe(image, prompt))?;
    if text.trim().is_empty() {
        return Err(BackendError::Protocol(format!("{} returned an empty description", backend.id())).into());
    }
    Ok(text)
}

fn describe_file(backend: &dyn VisionBackend, path: Option<&Path>, prompt: &str) -> Result<String> {
    match path {
        None => Ok(String::new()),
        Some(p) => {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            describe_image(backend, &bytes, prompt)
        }
    }
}

/// Describe a home's photo and floor plan. An absent image yields empty text;
/// a home with neither is an input error.
pub fn describe_home(
    backend: &dyn VisionBackend,
    record: &HomeRecord,
    prompts: &VisionPrompts,
) -> Result<ImageDescription> {
    if !record.has_images() {
        return Err(Error::Input(format!("home {} has no images", record.id)));
    }
    Ok(ImageDescription {
        facade_text: describe_file(backend, record.photo_path.as_deref(), &prompts.facade)?,
        floorplan_text: describe_file(backend, record.floorplan_path.as_deref(), &prompts.floorplan)?,
        backend_id: backend.id().to_string(),
    })
}
