use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;

use super::{BackendError, ImagePayload};

pub fn media_type_for(path: &Path) -> Result<&'static str, BackendError> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    match ext.as_str() {
        "png" => Ok("image/png"),
        "jpg" | "jpeg" => Ok("image/jpeg"),
        "webp" => Ok("image/webp"),
        _ => Err(BackendError::UnknownMediaType(ext)),
    }
}

/// Reads a local image and returns it as a base64 payload tagged with its media type.
pub fn encode_image(path: &Path) -> Result<ImagePayload, BackendError> {
    let media_type = media_type_for(path)?;
    let bytes = fs::read(path).map_err(|e| BackendError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    Ok(ImagePayload {
        media_type: media_type.to_string(),
        data: STANDARD.encode(bytes),
    })
}
