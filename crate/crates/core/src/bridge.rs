//! HTTP/JSON client for a remote encoder service exposing `/info`,
//! `/embed_text` and `/grad_cosine`.

use std::time::Duration;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UmidError};
use crate::testbed::{DualEncoder, Embedding};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeInfo {
    pub embed_dim: usize,
    pub input_dim: usize,
    pub model_id: String,
    pub protocol_version: u32,
}

#[derive(Serialize, Deserialize)]
pub struct EmbedTextRequest {
    pub text: String,
}

#[derive(Serialize, Deserialize)]
pub struct EmbedTextResponse {
    pub embedding: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
pub struct GradCosineRequest {
    pub x: Vec<f64>,
    pub v_t: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
pub struct GradCosineResponse {
    pub cosine: f64,
    pub grad: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: u16,
    pub message: String,
}

/// Remote encoder. The protocol has no modality-embedding endpoint, so
/// embeddings are read back coordinate-wise as cosines with basis vectors.
pub struct BridgeEncoder {
    base_url: String,
    agent: ureq::Agent,
    info: BridgeInfo,
}

impl BridgeEncoder {
    pub fn connect(base_url: &str) -> Result<Self> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(60)))
            .http_status_as_error(false)
            .build()
            .into();
        let mut enc = Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            agent,
            info: BridgeInfo {
                embed_dim: 0,
                input_dim: 0,
                model_id: String::new(),
                protocol_version: 0,
            },
        };
        let info: BridgeInfo = enc.get("/info")?;
        if info.protocol_version != PROTOCOL_VERSION {
            return Err(UmidError::Bridge(format!(
                "server speaks protocol {}, client expects {PROTOCOL_VERSION}",
                info.protocol_version
            )));
        }
        if info.embed_dim == 0 || info.input_dim == 0 {
            return Err(UmidError::Bridge("server reported zero dimensions".into()));
        }
        enc.info = info;
        Ok(enc)
    }

    pub fn info(&self) -> &BridgeInfo {
        &self.info
    }

    fn finish<T: DeserializeOwned>(path: &str, resp: ureq::http::Response<ureq::Body>) -> Result<T> {
        let status = resp.status().as_u16();
        let mut body = resp.into_body();
        let text = body
            .read_to_string()
            .map_err(|e| UmidError::Bridge(format!("{path}: reading body: {e}")))?;
        if status != 200 {
            let detail = serde_json::from_str::<ErrorBody>(&text).map(|e| e.message).unwrap_or(text);
            return Err(UmidError::Bridge(format!("{path}: HTTP {status}: {detail}")));
        }
        serde_json::from_str(&text).map_err(|e| UmidError::Bridge(format!("{path}: bad response: {e}")))
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        let resp = self
            .agent
            .get(format!("{}{path}", self.base_url))
            .call()
            .map_err(|e| UmidError::Bridge(format!("{path}: {e}")))?;
        Self::finish(path, resp)
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        let resp = self
            .agent
            .post(format!("{}{path}", self.base_url))
            .send_json(body)
            .map_err(|e| UmidError::Bridge(format!("{path}: {e}")))?;
        Self::finish(path, resp)
    }

    fn check_len(&self, got: usize, expected: usize, context: &'static str) -> Result<()> {
        if got != expected {
            return Err(UmidError::Shape {
                expected,
                actual: got,
                context,
            });
        }
        Ok(())
    }

    fn grad_one(&self, x: ArrayView1<f64>, v_t: ArrayView1<f64>) -> Result<(f64, Vec<f64>)> {
        let resp: GradCosineResponse = self.post(
            "/grad_cosine",
            &GradCosineRequest {
                x: x.to_vec(),
                v_t: v_t.to_vec(),
            },
        )?;
        self.check_len(resp.grad.len(), self.info.input_dim, "bridge gradient")?;
        Ok((resp.cosine, resp.grad))
    }
}

impl DualEncoder for BridgeEncoder {
    fn input_dim(&self) -> usize {
        self.info.input_dim
    }

    fn embed_dim(&self) -> usize {
        self.info.embed_dim
    }

    fn embed_text(&self, text: &str) -> Result<Embedding> {
        let resp: EmbedTextResponse = self.post("/embed_text", &EmbedTextRequest { text: text.to_string() })?;
        self.check_len(resp.embedding.len(), self.info.embed_dim, "bridge text embedding")?;
        Ok(Array1::from(resp.embedding))
    }

    fn embed_modality(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_len(xs.ncols(), self.info.input_dim, "modality input")?;
        let d = self.info.embed_dim;
        let mut out = Array2::zeros((xs.nrows(), d));
        let mut basis = Array1::zeros(d);
        for k in 0..d {
            basis[k] = 1.0;
            for (i, x) in xs.rows().into_iter().enumerate() {
                out[[i, k]] = self.grad_one(x, basis.view())?.0;
            }
            basis[k] = 0.0;
        }
        Ok(out)
    }

    fn grad_cosine(&self, xs: ArrayView2<f64>, v_t: ArrayView1<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        self.check_len(xs.ncols(), self.info.input_dim, "modality input")?;
        self.check_len(v_t.len(), self.info.embed_dim, "text embedding")?;
        let mut cos = Array1::zeros(xs.nrows());
        let mut grad = Array2::zeros(xs.raw_dim());
        for (i, x) in xs.rows().into_iter().enumerate() {
            let (c, g) = self.grad_one(x, v_t)?;
            cos[i] = c;
            grad.row_mut(i).assign(&Array1::from(g));
        }
        Ok((cos, grad))
    }
}
