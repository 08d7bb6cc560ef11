//! HTTP client for an external rubric judge.
//!
//! Request body: `{"prompt", "frames": [base64 PPM], "rubric_version": "v1"}`.
//! The reply must parse as a rubric; transport failures and 5xx replies are
//! retried with exponential backoff, anything else fails immediately.

use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use base64::Engine;
use occdir_core::metrics::{parse_rubric, RubricScore};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::JudgeConfig;
use crate::error::{Error, Result};

pub const RUBRIC_VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JudgeRequest {
    pub prompt: String,
    /// Base64-encoded image files.
    pub frames: Vec<String>,
    pub rubric_version: &'static str,
}

impl JudgeRequest {
    pub fn new(prompt: &str, images: &[Vec<u8>]) -> Self {
        let b64 = base64::engine::general_purpose::STANDARD;
        Self {
            prompt: prompt.to_string(),
            frames: images.iter().map(|i| b64.encode(i)).collect(),
            rubric_version: RUBRIC_VERSION,
        }
    }
}

enum Attempt {
    Retry(String),
    Fatal(Error),
}

/// Shared minimum spacing between request starts.
pub struct RateLimiter {
    min_interval: Duration,
    next: Mutex<Instant>,
}

impl RateLimiter {
    pub fn new(min_interval: Duration) -> Self {
        Self { min_interval, next: Mutex::new(Instant::now()) }
    }

    pub fn wait(&self) {
        let slot = {
            let mut next = self.next.lock().unwrap_or_else(|e| e.into_inner());
            let slot = (*next).max(Instant::now());
            *next = slot + self.min_interval;
            slot
        };
        let now = Instant::now();
        if slot > now {
            thread::sleep(slot - now);
        }
    }
}

pub struct JudgeClient {
    agent: ureq::Agent,
    url: String,
    cfg: JudgeConfig,
    limiter: RateLimiter,
}

impl JudgeClient {
    pub fn new(url: String, cfg: &JudgeConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .new_agent();
        Self {
            agent,
            url,
            cfg: cfg.clone(),
            limiter: RateLimiter::new(Duration::from_millis(cfg.min_interval_ms)),
        }
    }

    fn attempt(&self, body: &str) -> std::result::Result<RubricScore, Attempt> {
        self.limiter.wait();
        let mut resp = self
            .agent
            .post(&self.url)
            .header("content-type", "application/json")
            .send(body)
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| Attempt::Retry(e.to_string()))?;
        match status {
            200..=299 => parse_rubric(&text).map_err(|e| Attempt::Fatal(e.into())),
            500..=599 => Err(Attempt::Retry(format!("HTTP {status}"))),
            _ => Err(Attempt::Fatal(Error::Runtime(format!("judge rejected request: HTTP {status}: {text}")))),
        }
    }

    pub fn judge(&self, req: &JudgeRequest) -> Result<RubricScore> {
        let body = serde_json::to_string(req).map_err(|e| Error::Format(e.to_string()))?;
        let mut delay = Duration::from_millis(self.cfg.backoff_ms);
        let mut last = String::new();
        for i in 0..self.cfg.attempts {
            if i > 0 {
                thread::sleep(delay);
                delay *= 2;
            }
            match self.attempt(&body) {
                Ok(score) => return Ok(score),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => last = msg,
            }
        }
        Err(Error::EndpointUnreachable { attempts: self.cfg.attempts, last })
    }

    /// Judges requests with at most `cfg.concurrency` in flight; results keep
    /// the input order.
    pub fn judge_all(&self, reqs: &[JudgeRequest]) -> Result<Vec<Result<RubricScore>>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.concurrency.max(1))
            .build()
            .map_err(|e| Error::Runtime(e.to_string()))?;
        Ok(pool.install(|| reqs.par_iter().map(|r| self.judge(r)).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Serves one canned reply per connection; returns the URL, the request
    /// bodies seen and a hit counter.
    fn mock(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/judge", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let hits = Arc::new(AtomicUsize::new(0));
        let (seen2, hits2) = (seen.clone(), hits.clone());
        thread::spawn(move || {
            for (status, body) in replies {
                let (mut s, _) = listener.accept().unwrap();
                let mut r = BufReader::new(s.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    r.read_line(&mut line).unwrap();
                    if line == "\r\n" {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                r.read_exact(&mut buf).unwrap();
                seen2.lock().unwrap().push(String::from_utf8(buf).unwrap());
                hits2.fetch_add(1, Ordering::SeqCst);
                write!(
                    s,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (url, seen, hits)
    }

    fn fast() -> JudgeConfig {
        JudgeConfig { backoff_ms: 5, timeout_ms: 5_000, ..JudgeConfig::default() }
    }

    const GOOD: &str = r#"{"completeness":4,"structural":5,"semantic_alignment":3,"justification":"ok"}"#;

    #[test]
    fn posts_documented_body_and_parses_reply() {
        let (url, seen, _) = mock(vec![(200, GOOD.into())]);
        let client = JudgeClient::new(url, &fast());
        let score = client.judge(&JudgeRequest::new("the vehicle stops", &[b"P6\n1 1\n255\n\0\0\0".to_vec()])).unwrap();
        assert_eq!(score.mean, 4.0);
        let body: serde_json::Value = serde_json::from_str(&seen.lock().unwrap()[0]).unwrap();
        assert_eq!(body["prompt"], "the vehicle stops");
        assert_eq!(body["rubric_version"], "v1");
        assert_eq!(body["frames"][0], "UDYKMSAxCjI1NQoAAAA=");
    }

    #[test]
    fn retries_server_errors_then_succeeds() {
        let (url, _, hits) = mock(vec![(503, "{}".into()), (500, "{}".into()), (200, GOOD.into())]);
        let score = JudgeClient::new(url, &fast()).judge(&JudgeRequest::new("x", &[])).unwrap();
        assert_eq!(score.structural, 5);
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn malformed_reply_is_not_retried() {
        let bad = r#"{"completeness":6,"structural":5,"semantic_alignment":3}"#;
        let (url, _, hits) = mock(vec![(200, bad.into())]);
        let err = JudgeClient::new(url, &fast()).judge(&JudgeRequest::new("x", &[])).unwrap_err();
        assert!(matches!(err, Error::Metric(_)), "{err}");
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn unreachable_after_three_attempts() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let client = JudgeClient::new(format!("http://127.0.0.1:{port}/judge"), &fast());
        match client.judge(&JudgeRequest::new("x", &[])) {
            Err(Error::EndpointUnreachable { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn limiter_spaces_request_starts() {
        let l = RateLimiter::new(Duration::from_millis(20));
        let t0 = Instant::now();
        for _ in 0..4 {
            l.wait();
        }
        assert!(t0.elapsed() >= Duration::from_millis(60));
    }
}
