use std::time::{Duration, Instant};

use reqwest::blocking::Client;
use reqwest::StatusCode;

use super::{
    BackendDescriptor, BackendError, ImageBackend, ImageRecord, WireRequest, FINGERPRINT_HEADER,
};
use crate::prompt::GenerationRequest;

/// Client for a diffusion server implementing `POST /generate`.
///
/// Connection failures, timeouts, `429` and `5xx` are retried with
/// exponential backoff up to `retry_limit` extra attempts. Other non-200
/// statuses fail immediately.
#[derive(Debug)]
pub struct RemoteBackend {
    client: Client,
    url: String,
    model_id: String,
    retry_limit: u32,
    backoff: Duration,
}

enum Attempt {
    Retry(String),
    TimedOut,
    Fatal(BackendError),
}

impl RemoteBackend {
    pub fn new(desc: &BackendDescriptor) -> Result<Self, BackendError> {
        desc.validate()?;
        let endpoint = desc.endpoint.as_deref().unwrap_or_default();
        let client = Client::builder()
            .timeout(desc.timeout())
            .build()
            .map_err(|e| BackendError::InvalidDescriptor(e.to_string()))?;
        Ok(Self {
            client,
            url: format!("{}/generate", endpoint.trim_end_matches('/')),
            model_id: desc.model_id.clone(),
            retry_limit: desc.retry_limit,
            backoff: Duration::from_secs_f64(desc.retry_backoff),
        })
    }

    fn attempt(&self, body: &WireRequest) -> Result<(Vec<u8>, Option<String>), Attempt> {
        let resp = match self.client.post(&self.url).json(body).send() {
            Ok(r) => r,
            Err(e) if e.is_timeout() => return Err(Attempt::TimedOut),
            Err(e) => return Err(Attempt::Retry(e.to_string())),
        };
        let status = resp.status();
        let fingerprint = resp
            .headers()
            .get(FINGERPRINT_HEADER)
            .and_then(|v| v.to_str().ok())
            .map(str::to_string);
        if status == StatusCode::OK {
            return match resp.bytes() {
                Ok(b) => Ok((b.to_vec(), fingerprint)),
                Err(e) if e.is_timeout() => Err(Attempt::TimedOut),
                Err(e) => Err(Attempt::Retry(e.to_string())),
            };
        }
        let text = resp.text().unwrap_or_default();
        if status.is_server_error() || status == StatusCode::TOO_MANY_REQUESTS {
            Err(Attempt::Retry(format!("status {}: {}", status.as_u16(), text)))
        } else {
            Err(Attempt::Fatal(BackendError::BackendRejectedRequest {
                status: status.as_u16(),
                body: text,
            }))
        }
    }
}

impl ImageBackend for RemoteBackend {
    fn generate(&self, req: &GenerationRequest) -> Result<ImageRecord, BackendError> {
        let start = Instant::now();
        let body = WireRequest::from(req);
        let attempts = self.retry_limit + 1;
        let mut last = Attempt::Retry(String::new());
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.backoff * 2u32.saturating_pow(attempt - 1));
            }
            match self.attempt(&body) {
                Ok((png, header)) => {
                    let pixels = image::load_from_memory_with_format(&png, image::ImageFormat::Png)
                        .map_err(|e| BackendError::UndecodableImage(e.to_string()))?
                        .to_rgb8();
                    let (width, height) = pixels.dimensions();
                    if (width, height) != (req.width, req.height) {
                        return Err(BackendError::PixelShapeMismatch {
                            expected_width: req.width,
                            expected_height: req.height,
                            width,
                            height,
                        });
                    }
                    let backend_fingerprint = match header {
                        Some(h) => format!("{}+{}", self.fingerprint(), h),
                        None => self.fingerprint(),
                    };
                    return Ok(ImageRecord {
                        request_id: req.request_id,
                        pixels,
                        backend_fingerprint,
                        wall_time: start.elapsed().as_secs_f64(),
                    });
                }
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(other) => {
                    log::debug!("request {} attempt {} failed", req.request_id, attempt + 1);
                    last = other;
                }
            }
        }
        Err(match last {
            Attempt::TimedOut => BackendError::TimeoutExceeded { attempts },
            Attempt::Retry(last_error) => BackendError::BackendUnreachable {
                attempts,
                last_error,
            },
            Attempt::Fatal(e) => e,
        })
    }

    fn fingerprint(&self) -> String {
        format!("remote_diffusion:{}", self.model_id)
    }
}
