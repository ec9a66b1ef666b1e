//! Client for a static satellite-map tile service. Optional extra data
//! source; nothing else depends on it.

use std::time::Duration;

use ndarray::Array3;

use crate::{Error, Result};

pub const API_KEY_ENV: &str = "STATICMAP_API_KEY";
pub const DEFAULT_BASE_URL: &str = "https://maps.googleapis.com/maps/api/staticmap";

#[derive(Clone, Debug)]
pub struct StaticMapClient {
    pub base_url: String,
    api_key: String,
    pub attempts: u32,
    pub initial_backoff: Duration,
    pub timeout: Duration,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapRequest {
    pub lat: f64,
    pub lon: f64,
    pub zoom: u8,
    pub size: u32,
}

impl StaticMapClient {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>) -> Result<Self> {
        let api_key = api_key.into();
        if api_key.trim().is_empty() {
            return Err(Error::Config(format!("static map API key is empty; set {API_KEY_ENV}")));
        }
        Ok(Self {
            base_url: base_url.into(),
            api_key,
            attempts: 3,
            initial_backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(30),
        })
    }

    /// Reads the key from `STATICMAP_API_KEY`.
    pub fn from_env(base_url: Option<&str>) -> Result<Self> {
        let key = std::env::var(API_KEY_ENV)
            .map_err(|_| Error::Config(format!("environment variable {API_KEY_ENV} is not set")))?;
        Self::new(base_url.unwrap_or(DEFAULT_BASE_URL), key)
    }

    /// Fetches and decodes a `size x size` colour raster `(H, W, 3)`.
    /// Server errors and transport failures are retried with exponential
    /// backoff; client errors (quota, bad key) are returned verbatim.
    pub fn fetch(&self, req: &MapRequest) -> Result<Array3<u8>> {
        if !(-90.0..=90.0).contains(&req.lat) || !(-180.0..=180.0).contains(&req.lon) {
            return Err(Error::Invalid(format!("coordinates out of range: {}, {}", req.lat, req.lon)));
        }
        if req.size == 0 || req.size > 2048 {
            return Err(Error::Invalid(format!("unsupported size {}", req.size)));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut delay = self.initial_backoff;
        let mut last = String::new();
        for attempt in 1..=self.attempts.max(1) {
            let result = agent
                .get(&self.base_url)
                .query("center", format!("{},{}", req.lat, req.lon))
                .query("zoom", req.zoom.to_string())
                .query("size", format!("{0}x{0}", req.size))
                .query("maptype", "satellite")
                .query("format", "png")
                .query("key", &self.api_key)
                .call();
            match result {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    let body = resp.body_mut().read_to_vec().map_err(|e| Error::Http(e.to_string()))?;
                    match status {
                        200..=299 => return decode(&body, req.size),
                        400..=499 => {
                            return Err(Error::Http(format!(
                                "status {status}: {}",
                                String::from_utf8_lossy(&body)
                            )))
                        }
                        _ => last = format!("status {status}: {}", String::from_utf8_lossy(&body)),
                    }
                }
                Err(e) => last = e.to_string(),
            }
            log::warn!("static map attempt {attempt}/{} failed: {last}", self.attempts);
            if attempt < self.attempts {
                std::thread::sleep(delay);
                delay *= 2;
            }
        }
        Err(Error::Http(format!("giving up after {} attempts: {last}", self.attempts)))
    }
}

fn decode(body: &[u8], size: u32) -> Result<Array3<u8>> {
    let img = image::load_from_memory(body)
        .map_err(|e| Error::Http(format!("response is not a decodable image: {e}")))?
        .into_rgb8();
    let (w, h) = img.dimensions();
    if (w, h) != (size, size) {
        log::warn!("requested {size}x{size} map, received {w}x{h}");
    }
    Array3::from_shape_vec((h as usize, w as usize, 3), img.into_raw()).map_err(|e| Error::Shape(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Serves `responses` in order, one per connection.
    fn serve(responses: Vec<(u16, Vec<u8>)>) -> (String, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/staticmap", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        std::thread::spawn(move || {
            for (status, body) in responses {
                let Ok((mut stream, _)) = listener.accept() else { return };
                counter.fetch_add(1, Ordering::SeqCst);
                let mut buf = [0u8; 4096];
                let _ = stream.read(&mut buf);
                let head = format!(
                    "HTTP/1.1 {status} X\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                    body.len()
                );
                let _ = stream.write_all(head.as_bytes());
                let _ = stream.write_all(&body);
            }
        });
        (url, hits)
    }

    fn png(size: u32) -> Vec<u8> {
        let img = image::RgbImage::from_pixel(size, size, image::Rgb([10, 20, 30]));
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png).unwrap();
        out.into_inner()
    }

    fn client(url: &str) -> StaticMapClient {
        let mut c = StaticMapClient::new(url, "k").unwrap();
        c.initial_backoff = Duration::from_millis(1);
        c
    }

    const REQ: MapRequest = MapRequest { lat: 41.88, lon: -87.63, zoom: 18, size: 64 };

    #[test]
    fn decodes_requested_size() {
        let (url, _) = serve(vec![(200, png(64))]);
        let img = client(&url).fetch(&REQ).unwrap();
        assert_eq!(img.dim(), (64, 64, 3));
        assert_eq!(img[[0, 0, 2]], 30);
    }

    #[test]
    fn server_errors_retry_three_times() {
        let (url, hits) = serve(vec![(500, b"a".to_vec()), (500, b"b".to_vec()), (500, b"c".to_vec())]);
        let err = client(&url).fetch(&REQ).unwrap_err().to_string();
        assert_eq!(hits.load(Ordering::SeqCst), 3);
        assert!(err.contains("3 attempts"), "{err}");
    }

    #[test]
    fn recovers_after_transient_failure() {
        let (url, hits) = serve(vec![(503, Vec::new()), (200, png(64))]);
        assert!(client(&url).fetch(&REQ).is_ok());
        assert_eq!(hits.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn quota_error_surfaced_verbatim() {
        let (url, hits) = serve(vec![(403, b"You have exceeded your daily request quota".to_vec())]);
        let err = client(&url).fetch(&REQ).unwrap_err().to_string();
        assert!(err.contains("exceeded your daily request quota"), "{err}");
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn empty_key_is_config_error() {
        assert!(matches!(StaticMapClient::new("http://127.0.0.1:9", ""), Err(Error::Config(_))));
    }
}
