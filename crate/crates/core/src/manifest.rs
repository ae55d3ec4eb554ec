//! JSON canvas manifest (version "1").
//!
//! Layers carry either a full-canvas `png` or a `source_png` plus a
//! `placement`, which is rasterized on load. Serialization always writes
//! `png` and emits keys in alphabetical order with no whitespace, so the
//! output of [`serialize_manifest`] is canonical.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use image::{ImageFormat, RgbaImage};
use serde::Deserialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::canvas::{rasterize_layer, CanvasError, Layer, LayeredCanvas, Placement, PromptAttrs};

pub const MANIFEST_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("malformed manifest: {0}")]
    Malformed(String),
    #[error("unknown manifest version {0:?}")]
    UnknownVersion(String),
    #[error("layer {layer}: missing field `{field}`")]
    MissingField { layer: String, field: &'static str },
    #[error("layer {layer}: exactly one of `png` and `source_png` is required")]
    ImageSource { layer: String },
    #[error("layer {layer}: `source_png` requires a `placement`")]
    MissingPlacement { layer: String },
    #[error("layer {layer}: undecodable image: {message}")]
    Image { layer: String, message: String },
    #[error("layer {layer}: {source}")]
    Placement {
        layer: String,
        #[source]
        source: CanvasError,
    },
}

#[derive(Deserialize)]
struct RawManifest {
    width: u32,
    height: u32,
    prompt: PromptAttrs,
    layers: Vec<RawLayer>,
}

#[derive(Deserialize)]
struct RawLayer {
    id: String,
    z_order: Option<i32>,
    locked: Option<bool>,
    png: Option<String>,
    source_png: Option<String>,
    placement: Option<Placement>,
}

pub fn encode_png(img: &RgbaImage) -> Vec<u8> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .expect("PNG encoding into memory cannot fail");
    buf.into_inner()
}

pub fn encode_png_rgb(img: &image::RgbImage) -> Vec<u8> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .expect("PNG encoding into memory cannot fail");
    buf.into_inner()
}

pub fn decode_png(bytes: &[u8]) -> Result<RgbaImage, image::ImageError> {
    Ok(image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgba8())
}

fn decode_b64_png(layer: &str, text: &str) -> Result<RgbaImage, ManifestError> {
    let err = |message: String| ManifestError::Image {
        layer: layer.to_owned(),
        message,
    };
    let bytes = B64.decode(text).map_err(|e| err(e.to_string()))?;
    decode_png(&bytes).map_err(|e| err(e.to_string()))
}

/// Canonical JSON value of `canvas`.
pub fn manifest_value(canvas: &LayeredCanvas) -> Value {
    let layers: Vec<Value> = canvas
        .layers
        .iter()
        .map(|l| {
            json!({
                "id": l.id,
                "z_order": l.z_order,
                "locked": l.locked,
                "png": B64.encode(encode_png(&l.rgba)),
            })
        })
        .collect();
    json!({
        "version": MANIFEST_VERSION,
        "width": canvas.width,
        "height": canvas.height,
        "prompt": {
            "background_hue": canvas.prompt.background_hue,
            "arrangement": canvas.prompt.arrangement,
        },
        "layers": layers,
    })
}

pub fn serialize_manifest(canvas: &LayeredCanvas) -> Vec<u8> {
    serde_json::to_vec(&manifest_value(canvas)).expect("manifest values always serialize")
}

pub fn parse_manifest(bytes: &[u8]) -> Result<LayeredCanvas, ManifestError> {
    let value: Value =
        serde_json::from_slice(bytes).map_err(|e| ManifestError::Malformed(e.to_string()))?;
    parse_manifest_value(value)
}

pub fn parse_manifest_value(value: Value) -> Result<LayeredCanvas, ManifestError> {
    match value.get("version") {
        Some(Value::String(v)) if v == MANIFEST_VERSION => {}
        Some(Value::String(v)) => return Err(ManifestError::UnknownVersion(v.clone())),
        Some(other) => return Err(ManifestError::UnknownVersion(other.to_string())),
        None => return Err(ManifestError::Malformed("missing field `version`".into())),
    }
    let raw: RawManifest =
        serde_json::from_value(value).map_err(|e| ManifestError::Malformed(e.to_string()))?;
    let mut layers = Vec::with_capacity(raw.layers.len());
    for l in raw.layers {
        let missing = |field| ManifestError::MissingField {
            layer: l.id.clone(),
            field,
        };
        let locked = l.locked.ok_or_else(|| missing("locked"))?;
        let z_order = l.z_order.ok_or_else(|| missing("z_order"))?;
        let rgba = match (&l.png, &l.source_png) {
            (Some(png), None) => decode_b64_png(&l.id, png)?,
            (None, Some(src)) => {
                let placement = l.placement.ok_or_else(|| ManifestError::MissingPlacement {
                    layer: l.id.clone(),
                })?;
                let source = decode_b64_png(&l.id, src)?;
                rasterize_layer(&source, &placement, raw.width, raw.height).map_err(|source| {
                    ManifestError::Placement {
                        layer: l.id.clone(),
                        source,
                    }
                })?
            }
            _ => return Err(ManifestError::ImageSource { layer: l.id }),
        };
        layers.push(Layer {
            id: l.id,
            rgba,
            locked,
            z_order,
        });
    }
    Ok(LayeredCanvas {
        width: raw.width,
        height: raw.height,
        layers,
        prompt: raw.prompt,
    })
}
