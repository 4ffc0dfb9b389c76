//! JSON envelope for the step protocol. Tensors travel as base64 of their
//! little-endian f32 bytes in channel, row, column order.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use layoutdiff_core::denoise::{Reference, StepFailure};
use layoutdiff_core::latent::LatentTensor;
use layoutdiff_core::raster::Mask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorPayload {
    /// `[channels, height, width]`
    pub shape: [usize; 3],
    pub data: String,
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct PayloadError(pub String);

impl TensorPayload {
    pub fn encode(t: &LatentTensor) -> Self {
        TensorPayload {
            shape: [t.channels, t.height, t.width],
            data: STANDARD.encode(t.le_bytes()),
        }
    }

    pub fn decode(&self) -> Result<LatentTensor, PayloadError> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| PayloadError(format!("latent payload is not base64: {e}")))?;
        let [c, h, w] = self.shape;
        LatentTensor::from_le_bytes((c, h, w), &bytes).map_err(|e| PayloadError(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireConditioning {
    pub prompt: String,
    /// Base64 of the 16-bit inverse-depth PNG.
    pub depth_png: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_id: Option<String>,
    pub guidance: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRequest {
    pub job_id: String,
    pub path_id: String,
    pub timestep: usize,
    pub latent: TensorPayload,
    pub conditioning: WireConditioning,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResponse {
    pub path_id: String,
    pub timestep: usize,
    pub latent: TensorPayload,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireRegion {
    pub prompt: String,
    pub width: usize,
    pub height: usize,
    /// Base64 of one byte (0 or 1) per cell, row major.
    pub cells: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceUpload {
    pub latent: TensorPayload,
    pub regions: Vec<WireRegion>,
}

impl ReferenceUpload {
    pub fn encode(r: &Reference) -> Self {
        ReferenceUpload {
            latent: TensorPayload::encode(&r.latent),
            regions: r
                .regions
                .iter()
                .map(|(prompt, m)| WireRegion {
                    prompt: prompt.clone(),
                    width: m.width,
                    height: m.height,
                    cells: STANDARD.encode(m.bits.iter().map(|b| *b as u8).collect::<Vec<u8>>()),
                })
                .collect(),
        }
    }

    pub fn decode(&self) -> Result<Reference, PayloadError> {
        let latent = self.latent.decode()?;
        let mut regions = Vec::with_capacity(self.regions.len());
        for r in &self.regions {
            let bytes = STANDARD
                .decode(&r.cells)
                .map_err(|e| PayloadError(format!("region cells are not base64: {e}")))?;
            if bytes.len() != r.width * r.height || bytes.iter().any(|b| *b > 1) {
                return Err(PayloadError(format!("region for {:?} is malformed", r.prompt)));
            }
            let mask = Mask {
                width: r.width,
                height: r.height,
                bits: bytes.iter().map(|b| *b == 1).collect(),
            };
            regions.push((r.prompt.clone(), mask));
        }
        Ok(Reference::new(latent, regions))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireError {
    pub error: String,
    pub kind: StepFailure,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestep: Option<usize>,
}

pub fn encode_bytes(bytes: &[u8]) -> String {
    STANDARD.encode(bytes)
}

pub fn decode_bytes(s: &str) -> Result<Vec<u8>, PayloadError> {
    STANDARD.decode(s).map_err(|e| PayloadError(format!("not base64: {e}")))
}
