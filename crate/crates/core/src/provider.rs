//! Denoisers behind a common interface.
//!
//! A [`ScoreProvider`] predicts the noise `ε̂(I_t, y, t)` in a noised image
//! `I_t = √ᾱ_t·I + √(1 − ᾱ_t)·ε`. Images cross the interface as row-major
//! `H×W×C` `f64` buffers. [`DiracProvider`] is the exact denoiser for a
//! single target image and needs no weights; [`RemoteProvider`] talks to a
//! model server over HTTP using the types in [`wire`].

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::scene::CameraPose;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ProviderError {
    #[error("provider request timed out: {0}")]
    Timeout(String),
    #[error("provider returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("provider transport error: {0}")]
    Transport(String),
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("provider returned non-finite values")]
    NonFinite,
    #[error("timestep {t} outside 1..={n_steps}")]
    Timestep { t: usize, n_steps: usize },
    #[error("provider needs a camera view for conditioning")]
    MissingView,
    #[error("invalid diffusion schedule: {0}")]
    Schedule(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub n_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { n_steps: 1000, beta_start: 1e-4, beta_end: 2e-2 }
    }
}

/// Linear β schedule with cached `ᾱ_t = Π_{s≤t}(1 − β_s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    config: ScheduleConfig,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self, ProviderError> {
        let ScheduleConfig { n_steps, beta_start, beta_end } = config;
        if n_steps < 2 {
            return Err(ProviderError::Schedule("need at least two steps".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(ProviderError::Schedule("need 0 < beta_start <= beta_end < 1".into()));
        }
        let mut alpha_bar = Vec::with_capacity(n_steps);
        let mut acc = 1.0;
        for s in 0..n_steps {
            let beta = beta_start + (beta_end - beta_start) * s as f64 / (n_steps - 1) as f64;
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Ok(Self { config, alpha_bar })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn n_steps(&self) -> usize {
        self.config.n_steps
    }

    /// `ᾱ_t` for `1 ≤ t ≤ n_steps`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64, ProviderError> {
        if t == 0 || t > self.n_steps() {
            return Err(ProviderError::Timestep { t, n_steps: self.n_steps() });
        }
        Ok(self.alpha_bar[t - 1])
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::new(ScheduleConfig::default()).expect("default schedule is valid")
    }
}

/// What the denoiser is conditioned on.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    pub cond_id: String,
    /// Camera of the rendered view, for view-aware test providers.
    pub view: Option<CameraPose>,
}

#[derive(Clone, Copy, Debug)]
pub struct NoiseQuery<'a> {
    pub noised: &'a [f64],
    /// `[H, W, C]`
    pub shape: [usize; 3],
    pub t: usize,
    pub cond: &'a Conditioning,
    /// The noise mixed into `noised`. Only test providers look at it.
    pub epsilon: &'a [f64],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Capabilities {
    /// Native `(height, width)`, if the provider has one.
    pub resolution: Option<(usize, usize)>,
    pub channels: usize,
    pub view_conditioned: bool,
}

pub trait ScoreProvider {
    fn capabilities(&self) -> Capabilities;

    /// `ε̂` with the same shape as the query image.
    fn predict_noise(&mut self, query: &NoiseQuery<'_>) -> Result<Vec<f64>, ProviderError>;
}

fn check_len(data: &[f64], shape: [usize; 3]) -> Result<(), ProviderError> {
    let n = shape.iter().product::<usize>();
    if data.len() != n {
        return Err(ProviderError::ShapeMismatch { expected: shape.to_vec(), got: vec![data.len()] });
    }
    Ok(())
}

/// `ε̂ = (I_t − √ᾱ_t·target)/√(1 − ᾱ_t)`
pub fn dirac_noise(noised: &[f64], target: &[f64], alpha_bar: f64) -> Vec<f64> {
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    noised.iter().zip(target).map(|(x, y)| (x - a * y) / s).collect()
}

/// Exact denoiser for a point-mass data distribution at `target`.
#[derive(Clone, Debug)]
pub struct DiracProvider {
    pub target: Vec<f64>,
    pub shape: [usize; 3],
    pub schedule: DiffusionSchedule,
}

impl DiracProvider {
    pub fn new(target: Vec<f64>, shape: [usize; 3], schedule: DiffusionSchedule) -> Result<Self, ProviderError> {
        check_len(&target, shape)?;
        Ok(Self { target, shape, schedule })
    }
}

impl ScoreProvider for DiracProvider {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            resolution: Some((self.shape[0], self.shape[1])),
            channels: self.shape[2],
            view_conditioned: false,
        }
    }

    fn predict_noise(&mut self, q: &NoiseQuery<'_>) -> Result<Vec<f64>, ProviderError> {
        if q.shape != self.shape {
            return Err(ProviderError::ShapeMismatch { expected: self.shape.to_vec(), got: q.shape.to_vec() });
        }
        check_len(q.noised, q.shape)?;
        Ok(dirac_noise(q.noised, &self.target, self.schedule.alpha_bar(q.t)?))
    }
}

/// A Dirac denoiser whose target is the ground-truth render of the query's
/// view, so every sampled camera is pulled toward a consistent object.
pub struct MultiViewOracle<F> {
    pub render: F,
    pub shape: [usize; 3],
    pub schedule: DiffusionSchedule,
}

impl<F: FnMut(&CameraPose) -> Vec<f64>> ScoreProvider for MultiViewOracle<F> {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            resolution: Some((self.shape[0], self.shape[1])),
            channels: self.shape[2],
            view_conditioned: true,
        }
    }

    fn predict_noise(&mut self, q: &NoiseQuery<'_>) -> Result<Vec<f64>, ProviderError> {
        let view = q.cond.view.as_ref().ok_or(ProviderError::MissingView)?;
        if q.shape != self.shape {
            return Err(ProviderError::ShapeMismatch { expected: self.shape.to_vec(), got: q.shape.to_vec() });
        }
        check_len(q.noised, q.shape)?;
        let target = (self.render)(view);
        check_len(&target, q.shape)?;
        Ok(dirac_noise(q.noised, &target, self.schedule.alpha_bar(q.t)?))
    }
}

/// Returns the query's own noise, making every SDS adjoint zero.
#[derive(Clone, Debug, Default)]
pub struct EchoProvider;

impl ScoreProvider for EchoProvider {
    fn capabilities(&self) -> Capabilities {
        Capabilities { resolution: None, channels: 3, view_conditioned: false }
    }

    fn predict_noise(&mut self, q: &NoiseQuery<'_>) -> Result<Vec<f64>, ProviderError> {
        check_len(q.epsilon, q.shape)?;
        Ok(q.epsilon.to_vec())
    }
}

/// JSON bodies of the model-server protocol. Arrays travel as base64 of
/// little-endian `f32`.
pub mod wire {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Serialize};

    use super::ProviderError;

    pub fn encode_f32(values: impl IntoIterator<Item = f32>) -> String {
        let bytes: Vec<u8> = values.into_iter().flat_map(f32::to_le_bytes).collect();
        STANDARD.encode(bytes)
    }

    pub fn decode_f32(b64: &str) -> Result<Vec<f32>, ProviderError> {
        let bytes = STANDARD.decode(b64).map_err(|e| ProviderError::Malformed(format!("base64: {e}")))?;
        if bytes.len() % 4 != 0 {
            return Err(ProviderError::Malformed(format!(
                "{} payload bytes is not a whole number of f32",
                bytes.len()
            )));
        }
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
    pub struct PredictNoiseRequest {
        pub image_b64: String,
        pub shape: [usize; 3],
        pub t: usize,
        pub cond_id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub epsilon_b64: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub guidance_scale: Option<f64>,
    }

    #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
    pub struct PredictNoiseResponse {
        pub epsilon_b64: String,
        pub shape: Vec<usize>,
    }

    #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
    pub struct InvertRequest {
        pub images_b64: Vec<String>,
        pub shape: [usize; 3],
        pub init_label: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub steps: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub learning_rate: Option<f64>,
    }

    #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
    pub struct InvertResponse {
        pub cond_id: String,
    }

    #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
    pub struct ImageRequest {
        pub image_b64: String,
        pub shape: [usize; 3],
    }

    #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
    pub struct FeaturesResponse {
        pub features_b64: String,
        pub dim: usize,
    }

    #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
    pub struct DepthResponse {
        pub depth_b64: String,
        pub shape: Vec<usize>,
    }

    #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
    pub struct MaskResponse {
        pub mask_b64: String,
        pub shape: Vec<usize>,
    }

    #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
    pub struct HealthResponse {
        pub status: String,
    }
}

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

/// Client for a model server speaking the [`wire`] protocol.
pub struct RemoteProvider {
    base_url: String,
    agent: ureq::Agent,
    pub guidance_scale: Option<f64>,
    /// Native `(height, width)` of the served model, when known.
    pub resolution: Option<(usize, usize)>,
}

impl std::fmt::Debug for RemoteProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteProvider").field("base_url", &self.base_url).finish_non_exhaustive()
    }
}

impl RemoteProvider {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self::with_timeout(base_url, DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(base_url: impl Into<String>, timeout: Duration) -> Self {
        let agent =
            ureq::Agent::config_builder().timeout_global(Some(timeout)).http_status_as_error(false).build().into();
        let base_url = base_url.into().trim_end_matches('/').to_string();
        Self { base_url, agent, guidance_scale: None, resolution: None }
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn post<Req: Serialize, Resp: for<'de> Deserialize<'de>>(
        &self,
        path: &str,
        body: &Req,
    ) -> Result<Resp, ProviderError> {
        let payload = serde_json::to_vec(body).map_err(|e| ProviderError::Malformed(e.to_string()))?;
        let url = format!("{}{}", self.base_url, path);
        let mut resp =
            self.agent.post(&url).header("content-type", "application/json").send(&payload[..]).map_err(map_ureq)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(map_ureq)?;
        if status != 200 {
            return Err(ProviderError::Http { status, body: text });
        }
        serde_json::from_str(&text).map_err(|e| ProviderError::Malformed(e.to_string()))
    }

    pub fn health(&self) -> Result<wire::HealthResponse, ProviderError> {
        let url = format!("{}/v1/health", self.base_url);
        let mut resp = self.agent.get(&url).call().map_err(map_ureq)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(map_ureq)?;
        if status != 200 {
            return Err(ProviderError::Http { status, body: text });
        }
        serde_json::from_str(&text).map_err(|e| ProviderError::Malformed(e.to_string()))
    }

    /// Registers the input views for textual inversion and returns the
    /// conditioning id.
    pub fn invert(
        &self,
        images: &[&[f64]],
        shape: [usize; 3],
        init_label: &str,
        steps: Option<usize>,
        learning_rate: Option<f64>,
    ) -> Result<String, ProviderError> {
        for img in images {
            check_len(img, shape)?;
        }
        let req = wire::InvertRequest {
            images_b64: images.iter().map(|img| wire::encode_f32(img.iter().map(|&v| v as f32))).collect(),
            shape,
            init_label: init_label.into(),
            steps,
            learning_rate,
        };
        let resp: wire::InvertResponse = self.post("/v1/invert", &req)?;
        Ok(resp.cond_id)
    }

    fn image_request(image: &[f64], shape: [usize; 3]) -> Result<wire::ImageRequest, ProviderError> {
        check_len(image, shape)?;
        Ok(wire::ImageRequest { image_b64: wire::encode_f32(image.iter().map(|&v| v as f32)), shape })
    }

    /// Unit-normalized feature vector of an image.
    pub fn features(&self, image: &[f64], shape: [usize; 3]) -> Result<Vec<f64>, ProviderError> {
        let resp: wire::FeaturesResponse = self.post("/v1/features", &Self::image_request(image, shape)?)?;
        let values = finite(wire::decode_f32(&resp.features_b64)?)?;
        if values.len() != resp.dim {
            return Err(ProviderError::ShapeMismatch { expected: vec![resp.dim], got: vec![values.len()] });
        }
        Ok(values)
    }

    /// Relative depth, `H×W`.
    pub fn depth(&self, image: &[f64], shape: [usize; 3]) -> Result<Vec<f64>, ProviderError> {
        let resp: wire::DepthResponse = self.post("/v1/depth", &Self::image_request(image, shape)?)?;
        decode_map(&resp.depth_b64, &resp.shape, shape)
    }

    /// Foreground probability in `[0, 1]`, `H×W`.
    pub fn mask(&self, image: &[f64], shape: [usize; 3]) -> Result<Vec<f64>, ProviderError> {
        let resp: wire::MaskResponse = self.post("/v1/mask", &Self::image_request(image, shape)?)?;
        let m = decode_map(&resp.mask_b64, &resp.shape, shape)?;
        if m.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(ProviderError::Malformed("mask values outside [0, 1]".into()));
        }
        Ok(m)
    }
}

fn finite(values: Vec<f32>) -> Result<Vec<f64>, ProviderError> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(ProviderError::NonFinite);
    }
    Ok(values.into_iter().map(f64::from).collect())
}

fn decode_map(b64: &str, got_shape: &[usize], image_shape: [usize; 3]) -> Result<Vec<f64>, ProviderError> {
    let expected = vec![image_shape[0], image_shape[1]];
    let values = finite(wire::decode_f32(b64)?)?;
    if got_shape != expected.as_slice() || values.len() != expected[0] * expected[1] {
        return Err(ProviderError::ShapeMismatch { expected, got: got_shape.to_vec() });
    }
    Ok(values)
}

fn map_ureq(e: ureq::Error) -> ProviderError {
    match e {
        ureq::Error::Timeout(t) => ProviderError::Timeout(t.to_string()),
        ureq::Error::StatusCode(status) => ProviderError::Http { status, body: String::new() },
        other => ProviderError::Transport(other.to_string()),
    }
}

impl ScoreProvider for RemoteProvider {
    fn capabilities(&self) -> Capabilities {
        Capabilities { resolution: self.resolution, channels: 3, view_conditioned: false }
    }

    fn predict_noise(&mut self, q: &NoiseQuery<'_>) -> Result<Vec<f64>, ProviderError> {
        check_len(q.noised, q.shape)?;
        let req = wire::PredictNoiseRequest {
            image_b64: wire::encode_f32(q.noised.iter().map(|&v| v as f32)),
            shape: q.shape,
            t: q.t,
            cond_id: q.cond.cond_id.clone(),
            epsilon_b64: Some(wire::encode_f32(q.epsilon.iter().map(|&v| v as f32))),
            guidance_scale: self.guidance_scale,
        };
        let resp: wire::PredictNoiseResponse = self.post("/v1/predict_noise", &req)?;
        let values = wire::decode_f32(&resp.epsilon_b64)?;
        if resp.shape != q.shape || values.len() != q.noised.len() {
            let mut got = resp.shape.clone();
            if values.len() != resp.shape.iter().product::<usize>() {
                got.push(values.len());
            }
            return Err(ProviderError::ShapeMismatch { expected: q.shape.to_vec(), got });
        }
        finite(values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_bar_examples() {
        let s = DiffusionSchedule::default();
        assert!((s.alpha_bar(1).unwrap() - 0.9999).abs() < 1e-15);
        for t in 2..=1000 {
            assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
        }
        let mut direct = 1.0f64;
        for i in 0..1000 {
            direct *= 1.0 - (1e-4 + (2e-2 - 1e-4) * i as f64 / 999.0);
        }
        let a = s.alpha_bar(1000).unwrap();
        assert!(((a - direct) / direct).abs() < 1e-10);
        assert!(a > 0.0);
        assert_eq!(s.alpha_bar(0), Err(ProviderError::Timestep { t: 0, n_steps: 1000 }));
        assert!(s.alpha_bar(1001).is_err());
    }

    #[test]
    fn dirac_recovers_its_own_noise() {
        let schedule = DiffusionSchedule::default();
        let target = vec![0.1, 0.5, 0.9, 0.3, 0.2, 0.7];
        let eps = vec![0.3, -1.2, 0.8, 0.05, -0.4, 2.0];
        let mut p = DiracProvider::new(target.clone(), [1, 2, 3], schedule.clone()).unwrap();
        let t = 400;
        let ab = schedule.alpha_bar(t).unwrap();
        let noised: Vec<f64> = target.iter().zip(&eps).map(|(x, e)| ab.sqrt() * x + (1.0 - ab).sqrt() * e).collect();
        let cond = Conditioning { cond_id: "x".into(), view: None };
        let q = NoiseQuery { noised: &noised, shape: [1, 2, 3], t, cond: &cond, epsilon: &eps };
        let out = p.predict_noise(&q).unwrap();
        for (a, b) in out.iter().zip(&eps) {
            assert!((a - b).abs() < 1e-12);
        }
        let clean: Vec<f64> = target.iter().map(|x| ab.sqrt() * x).collect();
        let q = NoiseQuery { noised: &clean, ..q };
        assert!(p.predict_noise(&q).unwrap().iter().all(|v| v.abs() < 1e-12));
        let q = NoiseQuery { shape: [2, 1, 3], ..q };
        assert!(matches!(p.predict_noise(&q), Err(ProviderError::ShapeMismatch { .. })));
    }

    #[test]
    fn oracle_requires_a_view() {
        let mut p = MultiViewOracle {
            render: |_: &CameraPose| vec![0.0; 3],
            shape: [1, 1, 3],
            schedule: DiffusionSchedule::default(),
        };
        let cond = Conditioning { cond_id: "x".into(), view: None };
        let q = NoiseQuery { noised: &[0.0; 3], shape: [1, 1, 3], t: 10, cond: &cond, epsilon: &[0.0; 3] };
        assert_eq!(p.predict_noise(&q), Err(ProviderError::MissingView));
    }

    #[test]
    fn base64_round_trip() {
        let v = [0.0f32, -1.5, 3.25, f32::MIN_POSITIVE];
        assert_eq!(wire::decode_f32(&wire::encode_f32(v)).unwrap(), v);
        assert!(matches!(wire::decode_f32("AAA="), Err(ProviderError::Malformed(_))));
    }
}
