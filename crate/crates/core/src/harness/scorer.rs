use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::metrics::{Scorer, ScorerError};

#[derive(Serialize)]
struct Request<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct Reply {
    text: String,
}

/// Posts `{"prompt": ..}` and reads `{"text": ..}`. Failed attempts are
/// retried with exponential backoff; each attempt has a hard timeout.
pub struct HttpScorer {
    url: String,
    agent: ureq::Agent,
    retries: u32,
    backoff: Duration,
}

impl HttpScorer {
    pub fn new(url: &str, timeout: Duration, retries: u32) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            url: url.to_string(),
            agent,
            retries,
            backoff: Duration::from_millis(100),
        }
    }

    /// Initial backoff, doubled after every failed attempt.
    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    fn attempt(&self, body: &str) -> Result<String, ScorerError> {
        let mut resp = self
            .agent
            .post(&self.url)
            .header("content-type", "application/json")
            .send(body)
            .map_err(|e| ScorerError::Unreachable(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ScorerError::Unreachable(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(ScorerError::Unreachable(format!("status {status}")));
        }
        serde_json::from_str::<Reply>(&text)
            .map(|r| r.text)
            .map_err(|e| ScorerError::Reply(format!("{e}: {text}")))
    }
}

impl Scorer for HttpScorer {
    fn ask(&self, prompt: &str) -> Result<String, ScorerError> {
        let body = serde_json::to_string(&Request { prompt }).expect("string serializes");
        let mut delay = self.backoff;
        let mut last = None;
        for i in 0..=self.retries {
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                // a malformed body will not improve on retry
                Err(e @ ScorerError::Reply(_)) => return Err(e),
                Err(e) => last = Some(e),
            }
            if i < self.retries {
                std::thread::sleep(delay);
                delay *= 2;
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{autoscore_interpretation, Provenance, SenseKeywords};
    use std::io::{Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Serves `responses` in turn, one connection each, and counts requests.
    fn stub(responses: Vec<(u16, String)>) -> (String, Arc<AtomicUsize>, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/score", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (mut s, _) = listener.accept().unwrap();
                let mut buf = Vec::new();
                let mut chunk = [0u8; 4096];
                // read headers, then the announced body
                let body_in = loop {
                    let n = s.read(&mut chunk).unwrap();
                    buf.extend_from_slice(&chunk[..n]);
                    let text = String::from_utf8_lossy(&buf).to_string();
                    if let Some(end) = text.find("\r\n\r\n") {
                        let len = text
                            .lines()
                            .find_map(|l| l.to_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap()))
                            .unwrap_or(0);
                        while buf.len() < end + 4 + len {
                            let n = s.read(&mut chunk).unwrap();
                            buf.extend_from_slice(&chunk[..n]);
                        }
                        break String::from_utf8_lossy(&buf[end + 4..end + 4 + len]).to_string();
                    }
                };
                counter.fetch_add(1, Ordering::SeqCst);
                bodies.push(body_in);
                let reply = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                s.write_all(reply.as_bytes()).unwrap();
            }
            bodies
        });
        (url, hits, handle)
    }

    fn scorer(url: &str, retries: u32) -> HttpScorer {
        HttpScorer::new(url, Duration::from_secs(5), retries).with_backoff(Duration::from_millis(1))
    }

    #[test]
    fn yes_stub_drives_the_external_verdict() {
        let (url, _, handle) = stub(vec![
            (200, r#"{"text": "yes"}"#.into()),
            (200, r#"{"text": "no"}"#.into()),
        ]);
        let kw = SenseKeywords::from_senses("river", "money");
        let v = autoscore_interpretation("a river bank", "river", "money", &kw, Some(&scorer(&url, 0)));
        assert!(v.correct);
        assert_eq!(v.provenance, Provenance::External);
        let bodies = handle.join().unwrap();
        let sent: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
        assert!(sent["prompt"].as_str().unwrap().starts_with("Consider the following description: a river bank\n"));
    }

    #[test]
    fn three_failures_fall_back_offline() {
        let (url, hits, handle) = stub(vec![(500, "{}".into()); 3]);
        let s = scorer(&url, 2);
        assert!(matches!(s.ask("q"), Err(ScorerError::Unreachable(_))));
        assert_eq!(hits.load(Ordering::SeqCst), 3);
        handle.join().unwrap();
        // nothing listens any more, so the verdict falls back
        let kw = SenseKeywords::from_senses("river", "money");
        let v = autoscore_interpretation("a river bank", "river", "money", &kw, Some(&s));
        assert_eq!(v.provenance, Provenance::FallbackOffline);
        assert!(v.correct);
    }

    #[test]
    fn malformed_body_is_a_reply_error() {
        let (url, hits, handle) = stub(vec![(200, "not json".into())]);
        assert!(matches!(scorer(&url, 3).ask("q"), Err(ScorerError::Reply(_))));
        handle.join().unwrap();
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }
}
