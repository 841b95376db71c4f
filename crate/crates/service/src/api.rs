//! Wire types. Images travel as base64 PNG inside the JSON envelope.

use std::collections::BTreeMap;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use cwords::attribute::AttributeSpec;
use cwords::conditioning::NegativeMode;
use cwords::data::grid_axis;
use cwords::data::io::{decode_png, encode_png};
use cwords::inference::Generated;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeInfo {
    pub name: String,
    pub min: f64,
    pub max: f64,
    pub periodic: bool,
    pub grid_size: usize,
    /// Training grid values in attribute units.
    pub grid: Vec<f64>,
}

impl From<&AttributeSpec> for AttributeInfo {
    fn from(spec: &AttributeSpec) -> Self {
        Self {
            name: spec.name.clone(),
            min: spec.domain_min,
            max: spec.domain_max,
            periodic: spec.periodic,
            grid_size: spec.default_grid_size,
            grid: grid_axis(spec, spec.default_grid_size),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedImage {
    pub format: String,
    pub width: usize,
    pub height: usize,
    /// Base64 (standard alphabet, padded) of the PNG file.
    pub data: String,
}

impl EncodedImage {
    pub fn from_pixels(pixels: &Array3<f64>) -> cwords::Result<Self> {
        let (_, height, width) = pixels.dim();
        Ok(Self {
            format: "png".into(),
            width,
            height,
            data: STANDARD.encode(encode_png(pixels)?),
        })
    }

    pub fn png_bytes(&self) -> Result<Vec<u8>, base64::DecodeError> {
        STANDARD.decode(&self.data)
    }

    pub fn to_pixels(&self) -> anyhow::Result<Array3<f64>> {
        Ok(decode_png(&self.png_bytes()?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Time spent waiting for the worker.
    pub queue_ms: f64,
    pub generate_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub image: EncodedImage,
    pub template: String,
    pub seed: u64,
    pub steps: usize,
    pub guidance_scale: f64,
    pub negative_mode: NegativeMode,
    /// Values after periodic wrapping, as used for generation.
    pub attributes: BTreeMap<String, f64>,
    pub timing: Timing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFrame {
    pub index: usize,
    /// Requested value of the swept attribute.
    pub value: f64,
    pub attributes: BTreeMap<String, f64>,
    pub image: EncodedImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResponse {
    pub sweep_attribute: String,
    pub template: String,
    pub seed: u64,
    pub steps: usize,
    pub guidance_scale: f64,
    pub negative_mode: NegativeMode,
    pub frames: Vec<SweepFrame>,
    pub timing: Timing,
}

pub(crate) fn attribute_map(generated: &Generated) -> BTreeMap<String, f64> {
    generated
        .attributes
        .names()
        .map(|n| (n.to_string(), generated.attributes.get(n).expect("listed name")))
        .collect()
}

/// Error envelope. Optional fields are present when the error concerns a
/// specific attribute or template position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, kind: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                error: kind.into(),
                message: message.into(),
                attribute: None,
                min: None,
                max: None,
                position: None,
            },
        }
    }

    pub fn no_checkpoint() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "no_checkpoint", "no checkpoint is loaded")
    }

    pub fn queue_full() -> Self {
        Self::new(StatusCode::TOO_MANY_REQUESTS, "queue_full", "generation queue is full, retry later")
    }

    pub fn bad_body(e: &serde_json::Error) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_body", format!("request body: {e}"))
    }

    pub fn worker_gone() -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", "generation worker stopped")
    }
}

impl From<cwords::Error> for ApiError {
    fn from(e: cwords::Error) -> Self {
        use cwords::Error as E;
        let message = e.to_string();
        match e {
            E::DomainViolation { name, min, max, .. } => {
                let mut err = Self::new(StatusCode::UNPROCESSABLE_ENTITY, "domain_violation", message);
                err.body.attribute = Some(name);
                err.body.min = Some(min);
                err.body.max = Some(max);
                err
            }
            E::UnknownAttribute(name) => {
                let mut err = Self::new(StatusCode::UNPROCESSABLE_ENTITY, "unknown_attribute", message);
                err.body.attribute = Some(name);
                err
            }
            E::MissingAttribute(name) => {
                let mut err = Self::new(StatusCode::UNPROCESSABLE_ENTITY, "missing_attribute", message);
                err.body.attribute = Some(name);
                err
            }
            E::TemplateParse { position, .. } => {
                let mut err = Self::new(StatusCode::BAD_REQUEST, "template_parse", message);
                err.body.position = Some(position);
                err
            }
            E::Precondition(_) | E::SequenceTooLong { .. } | E::Config(_) => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", message)
            }
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}
