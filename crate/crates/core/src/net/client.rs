use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;
use http::header::{HeaderName, HeaderValue, CONTENT_TYPE, HOST};
use http::{HeaderMap, Method, Request, StatusCode, Uri};
use http_body_util::{BodyExt, Full};
use hyper::body::Incoming;
use hyper_util::rt::TokioIo;
use thiserror::Error;
use tokio::net::TcpStream;
use tokio::time::{timeout_at, Instant};

use super::meter::{ByteCounter, Counted, Party, TrafficMeter};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("invalid url {0:?}")]
    InvalidUrl(String),
    #[error("invalid header value for {0}")]
    InvalidHeader(String),
    #[error("connect to {addr} failed: {source}")]
    Connect {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("request timed out")]
    Timeout,
    #[error("http error: {0}")]
    Http(#[from] hyper::Error),
}

impl TransportError {
    /// True when no response was ever received (connection refused, timeout).
    pub fn is_unreachable(&self) -> bool {
        matches!(self, TransportError::Connect { .. } | TransportError::Timeout)
    }
}

/// Minimal HTTP/1.1 client: one connection per request, optional per-hop
/// delay and optional byte metering.
#[derive(Debug, Clone)]
pub struct HttpClient {
    timeout: Duration,
    hop_delay: Duration,
    meter: Option<(Arc<TrafficMeter>, Party)>,
}

impl Default for HttpClient {
    fn default() -> Self {
        HttpClient::new(Duration::from_secs(30))
    }
}

impl HttpClient {
    pub fn new(timeout: Duration) -> Self {
        HttpClient {
            timeout,
            hop_delay: Duration::ZERO,
            meter: None,
        }
    }

    /// Simulated one-way network latency added before each request.
    pub fn with_hop_delay(mut self, delay: Duration) -> Self {
        self.hop_delay = delay;
        self
    }

    /// Meter every connection this client opens as traffic originating at `from`.
    pub fn with_meter(mut self, meter: Arc<TrafficMeter>, from: Party) -> Self {
        self.meter = Some((meter, from));
        self
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    pub async fn post(
        &self,
        url: &str,
        headers: &[(&str, &str)],
        content_type: &str,
        body: impl Into<Bytes>,
    ) -> Result<HttpResponse, TransportError> {
        self.send(Method::POST, url, headers, Some((content_type, body.into())))
            .await
    }

    pub async fn post_json<T: serde::Serialize + ?Sized>(
        &self,
        url: &str,
        headers: &[(&str, &str)],
        body: &T,
    ) -> Result<HttpResponse, TransportError> {
        let body = serde_json::to_vec(body).expect("request bodies serialize");
        self.post(url, headers, "application/json", body).await
    }

    pub async fn get(&self, url: &str) -> Result<HttpResponse, TransportError> {
        self.send(Method::GET, url, &[], None).await
    }

    pub async fn send(
        &self,
        method: Method,
        url: &str,
        headers: &[(&str, &str)],
        body: Option<(&str, Bytes)>,
    ) -> Result<HttpResponse, TransportError> {
        let uri: Uri = url
            .parse()
            .map_err(|_| TransportError::InvalidUrl(url.to_owned()))?;
        if uri.scheme_str() != Some("http") {
            return Err(TransportError::InvalidUrl(url.to_owned()));
        }
        let authority = uri
            .authority()
            .ok_or_else(|| TransportError::InvalidUrl(url.to_owned()))?
            .clone();
        let host = authority.host().to_owned();
        let port = authority.port_u16().unwrap_or(80);
        let path = uri
            .path_and_query()
            .map(|p| p.as_str().to_owned())
            .unwrap_or_else(|| "/".into());

        let mut builder = Request::builder()
            .method(method)
            .uri(path)
            .header(HOST, authority.as_str());
        for (name, value) in headers {
            let name = HeaderName::from_bytes(name.as_bytes())
                .map_err(|_| TransportError::InvalidHeader((*name).to_owned()))?;
            let value = HeaderValue::from_str(value)
                .map_err(|_| TransportError::InvalidHeader(name.to_string()))?;
            builder = builder.header(name, value);
        }
        let body = match body {
            Some((content_type, bytes)) => {
                builder = builder.header(CONTENT_TYPE, content_type);
                bytes
            }
            None => Bytes::new(),
        };
        let request = builder
            .body(Full::new(body))
            .map_err(|_| TransportError::InvalidUrl(url.to_owned()))?;

        if !self.hop_delay.is_zero() {
            tokio::time::sleep(self.hop_delay).await;
        }

        let deadline = Instant::now() + self.timeout;
        let stream = timeout_at(deadline, TcpStream::connect((host.as_str(), port)))
            .await
            .map_err(|_| TransportError::Timeout)?
            .map_err(|source| TransportError::Connect {
                addr: authority.to_string(),
                source,
            })?;
        let _ = stream.set_nodelay(true);
        let counter = match (&self.meter, stream.peer_addr()) {
            (Some((meter, from)), Ok(peer)) => match meter.party_at(&peer) {
                Some(to) => meter.link(*from, to),
                None => Arc::new(ByteCounter::default()),
            },
            _ => Arc::new(ByteCounter::default()),
        };

        let io = TokioIo::new(Counted::new(stream, counter));
        let (mut sender, conn) = timeout_at(deadline, hyper::client::conn::http1::handshake(io))
            .await
            .map_err(|_| TransportError::Timeout)??;
        tokio::spawn(async move {
            if let Err(e) = conn.await {
                tracing::debug!(error = %e, "client connection closed with error");
            }
        });
        let response = timeout_at(deadline, sender.send_request(request))
            .await
            .map_err(|_| TransportError::Timeout)??;
        let (parts, body) = response.into_parts();
        Ok(HttpResponse {
            status: parts.status,
            headers: parts.headers,
            body,
            deadline,
        })
    }
}

pub struct HttpResponse {
    pub status: StatusCode,
    pub headers: HeaderMap,
    body: Incoming,
    deadline: Instant,
}

impl HttpResponse {
    /// Reads the remaining body within the request deadline.
    pub async fn bytes(self) -> Result<Bytes, TransportError> {
        let collected = timeout_at(self.deadline, self.body.collect())
            .await
            .map_err(|_| TransportError::Timeout)??;
        Ok(collected.to_bytes())
    }

    /// Next data frame of a streamed body, or `None` at the end.
    pub async fn chunk(&mut self) -> Option<Result<Bytes, TransportError>> {
        loop {
            let frame = match timeout_at(self.deadline, self.body.frame()).await {
                Err(_) => return Some(Err(TransportError::Timeout)),
                Ok(None) => return None,
                Ok(Some(Err(e))) => return Some(Err(e.into())),
                Ok(Some(Ok(frame))) => frame,
            };
            if let Ok(data) = frame.into_data() {
                return Some(Ok(data));
            }
        }
    }

    pub fn into_body(self) -> Incoming {
        self.body
    }
}
