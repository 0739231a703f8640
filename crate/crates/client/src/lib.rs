//! Async client for the holomask service.

use std::pin::Pin;

use futures::{Stream, StreamExt};
use holomask_api::{
    ErrorBody, Health, ProgressEvent, SolveRequest, SolveResponse, StreamQuery, EVENT_ERROR, EVENT_FINAL,
    EVENT_PROGRESS,
};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error(transparent)]
    Http(#[from] reqwest::Error),
    /// The service refused the request or failed while solving.
    #[error("service answered {status}: {message}")]
    Api { status: u16, message: String },
    #[error("unreadable payload: {0}")]
    Decode(#[from] serde_json::Error),
    #[error("event stream: {0}")]
    Stream(String),
}

impl ClientError {
    /// HTTP status for refusals, `None` for transport or decoding failures.
    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            ClientError::Http(e) => e.status().map(|s| s.as_u16()),
            _ => None,
        }
    }
}

impl From<ErrorBody> for ClientError {
    fn from(b: ErrorBody) -> Self {
        ClientError::Api {
            status: b.status,
            message: b.error,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:7878`.
    pub fn new(base: impl Into<String>) -> Self {
        Client {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    pub async fn health(&self) -> Result<Health> {
        let resp = checked(self.http.get(self.url("/api/health")).send().await?).await?;
        Ok(resp.json().await?)
    }

    /// One solve, answered as a single body whatever `req.stream` says.
    pub async fn solve(&self, req: &SolveRequest) -> Result<SolveResponse> {
        let req = SolveRequest {
            stream: false,
            ..req.clone()
        };
        let resp = checked(self.http.post(self.url("/api/solve")).json(&req).send().await?).await?;
        Ok(resp.json().await?)
    }

    /// A streamed solve posted as a body, so image targets work too.
    pub async fn stream(&self, req: &SolveRequest) -> Result<SolveStream> {
        let req = SolveRequest {
            stream: true,
            ..req.clone()
        };
        let resp = checked(self.http.post(self.url("/api/solve")).json(&req).send().await?).await?;
        Ok(SolveStream::new(resp))
    }

    /// A streamed solve through the query-string endpoint.
    pub async fn stream_query(&self, query: &StreamQuery) -> Result<SolveStream> {
        let resp = checked(self.http.get(self.url("/api/solve/stream")).query(query).send().await?).await?;
        Ok(SolveStream::new(resp))
    }
}

/// Turns non-success answers into [`ClientError::Api`], using the JSON error
/// body when there is one.
async fn checked(resp: reqwest::Response) -> Result<reqwest::Response> {
    let status = resp.status();
    if status.is_success() {
        return Ok(resp);
    }
    let text = resp.text().await.unwrap_or_default();
    Err(match serde_json::from_str::<ErrorBody>(&text) {
        Ok(body) => body.into(),
        Err(_) => ClientError::Api {
            status: status.as_u16(),
            message: text,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum StreamEvent {
    Progress(ProgressEvent),
    Final(Box<SolveResponse>),
    /// The solve failed after the stream had started.
    Error(ErrorBody),
}

type ByteStream = Pin<Box<dyn Stream<Item = reqwest::Result<Vec<u8>>> + Send>>;

/// Events of one streamed solve, in arrival order. Dropping it closes the
/// connection, which stops the solve on the service.
pub struct SolveStream {
    body: ByteStream,
    buf: Vec<u8>,
    finished: bool,
}

impl SolveStream {
    fn new(resp: reqwest::Response) -> Self {
        SolveStream {
            body: Box::pin(resp.bytes_stream().map(|r| r.map(|b| b.to_vec()))),
            buf: Vec::new(),
            finished: false,
        }
    }

    /// The next event; `None` once the service has closed the stream.
    pub async fn next(&mut self) -> Option<Result<StreamEvent>> {
        loop {
            if let Some(block) = self.take_block() {
                match parse_block(&block) {
                    Ok(Some(event)) => return Some(Ok(event)),
                    Ok(None) => continue,
                    Err(e) => return Some(Err(e)),
                }
            }
            if self.finished {
                return None;
            }
            match self.body.next().await {
                Some(Ok(chunk)) => self.buf.extend_from_slice(&chunk),
                Some(Err(e)) => return Some(Err(e.into())),
                None => {
                    self.finished = true;
                    // A trailing block without its blank line still counts.
                    if !self.buf.iter().all(u8::is_ascii_whitespace) {
                        self.buf.extend_from_slice(b"\n\n");
                    }
                }
            }
        }
    }

    fn take_block(&mut self) -> Option<String> {
        let text = &self.buf;
        let end = (0..text.len()).find_map(|i| {
            if text[i..].starts_with(b"\n\n") {
                Some((i, 2))
            } else if text[i..].starts_with(b"\r\n\r\n") {
                Some((i, 4))
            } else {
                None
            }
        })?;
        let block = String::from_utf8_lossy(&text[..end.0]).into_owned();
        self.buf.drain(..end.0 + end.1);
        Some(block)
    }

    /// Reads to the end: the progress records and the final response.
    pub async fn finish(mut self) -> Result<(Vec<ProgressEvent>, SolveResponse)> {
        let mut progress = Vec::new();
        while let Some(event) = self.next().await {
            match event? {
                StreamEvent::Progress(rec) => progress.push(rec),
                StreamEvent::Final(resp) => return Ok((progress, *resp)),
                StreamEvent::Error(body) => return Err(body.into()),
            }
        }
        Err(ClientError::Stream("closed before the final event".into()))
    }
}

/// One event block; `None` for comments and keep-alives.
fn parse_block(block: &str) -> Result<Option<StreamEvent>> {
    let mut name = None;
    let mut data: Vec<&str> = Vec::new();
    for line in block.lines() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.starts_with(':') {
            continue;
        }
        let (field, value) = line.split_once(':').unwrap_or((line, ""));
        let value = value.strip_prefix(' ').unwrap_or(value);
        match field {
            "event" => name = Some(value),
            "data" => data.push(value),
            _ => {}
        }
    }
    if data.is_empty() {
        return Ok(None);
    }
    let data = data.join("\n");
    let event = match name.unwrap_or("message") {
        EVENT_PROGRESS => StreamEvent::Progress(serde_json::from_str(&data)?),
        EVENT_FINAL => StreamEvent::Final(Box::new(serde_json::from_str(&data)?)),
        EVENT_ERROR => StreamEvent::Error(serde_json::from_str(&data).unwrap_or(ErrorBody {
            error: data,
            status: 500,
        })),
        other => return Err(ClientError::Stream(format!("unexpected event {other:?}"))),
    };
    Ok(Some(event))
}
