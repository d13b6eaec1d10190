//! Remote loss evaluation over newline-delimited JSON.
//!
//! Protocol: one request per line, `{"id": u64, "tokens": [u32], "demos":
//! [u32], "prompt": "..."}` (prompt present only when a template is
//! configured); one response per line, `{"id": u64, "loss": f64}`.
//! Responses may arrive out of order and are correlated by id. Timeouts are
//! retryable transport errors; malformed responses are not.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use asyndbt_core::oracle::prompt::{render_prompt, DemoText, QueryText};
use asyndbt_core::oracle::{DiscreteAssignment, EvaluatorSpec, LossOracle, ProblemShape};
use asyndbt_core::Error as CoreError;
use serde::{Deserialize, Serialize};

#[derive(Serialize)]
struct Request<'a> {
    id: u64,
    tokens: &'a [usize],
    demos: &'a [usize],
    #[serde(skip_serializing_if = "Option::is_none")]
    prompt: Option<String>,
}

#[derive(Deserialize)]
struct Response {
    id: u64,
    loss: f64,
}

/// Demonstration corpus for prompt rendering: per demo slot, the candidate
/// texts, plus the query sample.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Corpus {
    pub demos: Vec<Vec<DemoText>>,
    pub query: QueryText,
}

struct PromptContext {
    template: String,
    vocab: Vec<String>,
    corpus: Corpus,
}

enum Transport {
    Tcp {
        writer: TcpStream,
        reader: BufReader<TcpStream>,
    },
    Stdio {
        child: Child,
        lines: mpsc::Receiver<std::io::Result<String>>,
    },
}

fn transport_err(retryable: bool, message: impl Into<String>) -> CoreError {
    CoreError::Transport {
        retryable,
        message: message.into(),
    }
}

/// Blocking NDJSON client implementing [`LossOracle`].
pub struct RemoteEvaluator {
    shape: ProblemShape,
    transport: Transport,
    timeout: Duration,
    next_id: u64,
    pending: HashMap<u64, f64>,
    prompt: Option<PromptContext>,
}

impl RemoteEvaluator {
    /// Connect per the spec's `endpoint` (`tcp:HOST:PORT` or `stdio:CMD`).
    pub fn connect(spec: &EvaluatorSpec, shape: &ProblemShape) -> anyhow::Result<Self> {
        let EvaluatorSpec::Remote {
            endpoint,
            template,
            vocab,
            corpus_path,
            timeout_ms,
        } = spec
        else {
            anyhow::bail!("evaluator spec is not remote");
        };
        let timeout = Duration::from_millis(*timeout_ms);
        let transport = if let Some(addr) = endpoint.strip_prefix("tcp:") {
            let stream = TcpStream::connect(addr)?;
            stream.set_nodelay(true)?;
            stream.set_read_timeout(Some(timeout.min(Duration::from_millis(200))))?;
            Transport::Tcp {
                writer: stream.try_clone()?,
                reader: BufReader::new(stream),
            }
        } else if let Some(cmd) = endpoint.strip_prefix("stdio:") {
            let mut parts = cmd.split_whitespace();
            let program = parts
                .next()
                .ok_or_else(|| anyhow::anyhow!("empty stdio command"))?;
            let mut child = Command::new(program)
                .args(parts)
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .spawn()?;
            let stdout = child.stdout.take().expect("piped stdout");
            let (tx, rx) = mpsc::channel();
            std::thread::spawn(move || {
                let reader = BufReader::new(stdout);
                for line in reader.lines() {
                    if tx.send(line).is_err() {
                        break;
                    }
                }
            });
            Transport::Stdio { child, lines: rx }
        } else {
            anyhow::bail!("endpoint must start with tcp: or stdio:, got {endpoint}");
        };
        let prompt = match template {
            Some(t) if !vocab.is_empty() => {
                let corpus = match corpus_path {
                    Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
                    None => Corpus::default(),
                };
                Some(PromptContext {
                    template: t.clone(),
                    vocab: vocab.clone(),
                    corpus,
                })
            }
            _ => None,
        };
        Ok(RemoteEvaluator {
            shape: shape.clone(),
            transport,
            timeout,
            next_id: 0,
            pending: HashMap::new(),
            prompt,
        })
    }

    fn send_line(&mut self, line: &str) -> Result<(), CoreError> {
        match &mut self.transport {
            Transport::Tcp { writer, .. } => writer
                .write_all(line.as_bytes())
                .and_then(|_| writer.write_all(b"\n"))
                .map_err(|e| transport_err(true, format!("send failed: {e}"))),
            Transport::Stdio { child, .. } => {
                let stdin = child
                    .stdin
                    .as_mut()
                    .ok_or_else(|| transport_err(false, "peer stdin closed"))?;
                stdin
                    .write_all(line.as_bytes())
                    .and_then(|_| stdin.write_all(b"\n"))
                    .and_then(|_| stdin.flush())
                    .map_err(|e| transport_err(true, format!("send failed: {e}")))
            }
        }
    }

    fn read_line(&mut self, deadline: Instant) -> Result<String, CoreError> {
        match &mut self.transport {
            Transport::Tcp { reader, .. } => loop {
                let mut line = String::new();
                match reader.read_line(&mut line) {
                    Ok(0) => return Err(transport_err(true, "peer closed connection")),
                    Ok(_) => return Ok(line),
                    Err(e)
                        if e.kind() == std::io::ErrorKind::WouldBlock
                            || e.kind() == std::io::ErrorKind::TimedOut =>
                    {
                        if Instant::now() >= deadline {
                            return Err(transport_err(true, "timed out waiting for response"));
                        }
                    }
                    Err(e) => return Err(transport_err(true, format!("read failed: {e}"))),
                }
            },
            Transport::Stdio { lines, .. } => {
                let budget = deadline.saturating_duration_since(Instant::now());
                match lines.recv_timeout(budget) {
                    Ok(Ok(line)) => Ok(line),
                    Ok(Err(e)) => Err(transport_err(true, format!("read failed: {e}"))),
                    Err(mpsc::RecvTimeoutError::Timeout) => {
                        Err(transport_err(true, "timed out waiting for response"))
                    }
                    Err(mpsc::RecvTimeoutError::Disconnected) => {
                        Err(transport_err(true, "peer closed connection"))
                    }
                }
            }
        }
    }

    fn await_loss(&mut self, id: u64) -> Result<f64, CoreError> {
        if let Some(loss) = self.pending.remove(&id) {
            return Ok(loss);
        }
        let deadline = Instant::now() + self.timeout;
        loop {
            let line = self.read_line(deadline)?;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            let resp: Response = serde_json::from_str(trimmed).map_err(|e| {
                transport_err(false, format!("malformed response {trimmed:?}: {e}"))
            })?;
            if !resp.loss.is_finite() || resp.loss < 0.0 {
                return Err(transport_err(
                    false,
                    format!("peer reported invalid loss {}", resp.loss),
                ));
            }
            if resp.id == id {
                return Ok(resp.loss);
            }
            self.pending.insert(resp.id, resp.loss);
        }
    }
}

impl Drop for RemoteEvaluator {
    fn drop(&mut self) {
        if let Transport::Stdio { child, .. } = &mut self.transport {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl LossOracle for RemoteEvaluator {
    fn shape(&self) -> &ProblemShape {
        &self.shape
    }

    fn evaluate(&mut self, a: &DiscreteAssignment) -> Result<f64, CoreError> {
        self.shape.check_assignment(a)?;
        let prompt = match &self.prompt {
            Some(ctx) => Some(render_prompt(
                &ctx.template,
                &ctx.vocab,
                a,
                &ctx.corpus.demos,
                &ctx.corpus.query,
            )?),
            None => None,
        };
        let id = self.next_id;
        self.next_id += 1;
        let line = serde_json::to_string(&Request {
            id,
            tokens: &a.tokens,
            demos: &a.demos,
            prompt,
        })
        .expect("request serializes");
        self.send_line(&line)?;
        self.await_loss(id)
    }
}

/// A boxed oracle per benign worker. Local specs get independent instances;
/// a remote spec is shared through one connection, with request ids keeping
/// the multiplexing unambiguous.
pub fn build_evaluators(
    spec: &EvaluatorSpec,
    shape: &ProblemShape,
    count: usize,
) -> anyhow::Result<Vec<Box<dyn LossOracle>>> {
    if spec.is_remote() {
        let shared = std::rc::Rc::new(std::cell::RefCell::new(RemoteEvaluator::connect(
            spec, shape,
        )?));
        Ok((0..count)
            .map(|_| {
                Box::new(SharedOracle {
                    shape: shape.clone(),
                    inner: shared.clone(),
                }) as Box<dyn LossOracle>
            })
            .collect())
    } else {
        (0..count)
            .map(|_| Ok(Box::new(spec.build_local(shape)?) as Box<dyn LossOracle>))
            .collect()
    }
}

struct SharedOracle {
    shape: ProblemShape,
    inner: std::rc::Rc<std::cell::RefCell<RemoteEvaluator>>,
}

impl LossOracle for SharedOracle {
    fn shape(&self) -> &ProblemShape {
        &self.shape
    }
    fn evaluate(&mut self, a: &DiscreteAssignment) -> Result<f64, CoreError> {
        self.inner.borrow_mut().evaluate(a)
    }
}
