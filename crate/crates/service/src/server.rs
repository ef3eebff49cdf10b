//! TCP server. Each connection gets a reader thread; requests are executed
//! on a shared worker pool and answered as they finish, so responses on one
//! connection may arrive out of order.

use std::io::{self, BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use crossbeam_channel::{unbounded, Receiver, Sender};
use hps_core::{Error, Stack};

use crate::protocol::{
    encode_stats, encode_u64, read_frame, ErrorCode, Frame, Incoming, LookupReply, ProtocolError,
    Request, DEFAULT_MAX_FRAME,
};

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub bind: String,
    pub workers: usize,
    pub max_frame: u32,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            bind: "127.0.0.1:7878".into(),
            workers: 4,
            max_frame: DEFAULT_MAX_FRAME,
        }
    }
}

fn error_code(e: &Error) -> ErrorCode {
    match e {
        Error::UnknownTable(_) => ErrorCode::UnknownTable,
        Error::InvalidTableName(_)
        | Error::InvalidDim(_)
        | Error::NonFinite { .. }
        | Error::DimMismatch { .. }
        | Error::DTypeMismatch { .. }
        | Error::DuplicateKey(_)
        | Error::F16Saturation(_)
        | Error::Decode(_) => ErrorCode::Decode,
        Error::Tier { source, .. } => error_code(source),
        _ => ErrorCode::Internal,
    }
}

/// Executes one request frame against the stack and builds the reply.
pub fn handle_frame(stack: &Stack, frame: &Frame) -> Frame {
    let id = frame.id;
    let req = match Request::decode(frame) {
        Ok(Some(req)) => req,
        Ok(None) => {
            return Frame::error(
                id,
                ErrorCode::UnknownOpcode,
                &format!("unknown opcode {}", frame.opcode),
            )
        }
        Err(ProtocolError::Invalid(e)) => return Frame::error(id, error_code(&e), &e.to_string()),
        Err(e) => return Frame::error(id, ErrorCode::Decode, &e.to_string()),
    };
    let op = req.opcode();
    let payload = match req {
        Request::Lookup { table, keys } => stack.meta(&table).and_then(|meta| {
            let (r, _ticket) = stack.lookup(&table, &keys)?;
            Ok(LookupReply {
                dim: meta.dim(),
                dtype: meta.dtype(),
                vectors: r.vectors,
                source_counts: r.source_counts,
            }
            .encode())
        }),
        Request::Publish(batch) => stack.publish_batch(batch).map(encode_u64),
        Request::Stats { table } => stack.cache_stats(&table).map(|s| encode_stats(&s)),
        Request::Refresh { table } => stack.refresh(&table).map(|n| encode_u64(n as u64)),
    };
    match payload {
        Ok(p) => Frame::new(op, id, p),
        Err(e) => Frame::error(id, error_code(&e), &e.to_string()),
    }
}

type SharedWriter = Arc<Mutex<BufWriter<TcpStream>>>;

struct Job {
    frame: Frame,
    out: SharedWriter,
}

fn send(out: &SharedWriter, frame: &Frame) {
    let mut w = out.lock().unwrap();
    if let Err(e) = frame.write_to(&mut *w).and_then(|_| w.flush()) {
        log::debug!("dropping response {}: {e}", frame.id);
    }
}

fn serve_connection(stream: TcpStream, jobs: Sender<Job>, max_frame: u32) -> io::Result<()> {
    let out: SharedWriter = Arc::new(Mutex::new(BufWriter::new(stream.try_clone()?)));
    let mut reader = BufReader::new(stream);
    while let Some(incoming) = read_frame(&mut reader, max_frame)? {
        match incoming {
            Incoming::Frame(frame) => {
                if jobs
                    .send(Job {
                        frame,
                        out: out.clone(),
                    })
                    .is_err()
                {
                    break;
                }
            }
            Incoming::Runt { len } => send(
                &out,
                &Frame::error(0, ErrorCode::Decode, &format!("frame length {len} < 5")),
            ),
            Incoming::Oversize { id, len } => send(
                &out,
                &Frame::error(
                    id,
                    ErrorCode::Decode,
                    &format!("frame length {len} over limit"),
                ),
            ),
        }
    }
    Ok(())
}

fn worker(stack: Arc<Stack>, jobs: Receiver<Job>) {
    for job in jobs {
        let reply = handle_frame(&stack, &job.frame);
        send(&job.out, &reply);
    }
}

/// A running server; dropping it stops accepting and closes connections.
pub struct Server {
    addr: SocketAddr,
    stopping: Arc<AtomicBool>,
    conns: Arc<Mutex<Vec<TcpStream>>>,
    accept: Option<JoinHandle<()>>,
    workers: Vec<JoinHandle<()>>,
}

impl Server {
    pub fn start(stack: Arc<Stack>, config: &ServerConfig) -> io::Result<Server> {
        let listener = TcpListener::bind(&config.bind)?;
        let addr = listener.local_addr()?;
        let (tx, rx) = unbounded::<Job>();
        let workers = (0..config.workers.max(1))
            .map(|i| {
                let (stack, rx) = (stack.clone(), rx.clone());
                std::thread::Builder::new()
                    .name(format!("hps-serve-{i}"))
                    .spawn(move || worker(stack, rx))
            })
            .collect::<io::Result<_>>()?;
        let stopping = Arc::new(AtomicBool::new(false));
        let conns: Arc<Mutex<Vec<TcpStream>>> = Arc::default();
        let accept = {
            let (stopping, conns, max_frame) = (stopping.clone(), conns.clone(), config.max_frame);
            std::thread::Builder::new()
                .name("hps-accept".into())
                .spawn(move || {
                    for stream in listener.incoming() {
                        if stopping.load(Ordering::SeqCst) {
                            break;
                        }
                        let stream = match stream {
                            Ok(s) => s,
                            Err(e) => {
                                log::warn!("accept failed: {e}");
                                continue;
                            }
                        };
                        let _ = stream.set_nodelay(true);
                        if let Ok(c) = stream.try_clone() {
                            conns.lock().unwrap().push(c);
                        }
                        let tx = tx.clone();
                        let spawned =
                            std::thread::Builder::new()
                                .name("hps-conn".into())
                                .spawn(move || {
                                    if let Err(e) = serve_connection(stream, tx, max_frame) {
                                        log::debug!("connection closed: {e}");
                                    }
                                });
                        if let Err(e) = spawned {
                            log::warn!("could not spawn connection thread: {e}");
                        }
                    }
                })?
        };
        Ok(Server {
            addr,
            stopping,
            conns,
            accept: Some(accept),
            workers,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the accept loop ends (i.e. forever unless shut down
    /// from another thread).
    pub fn join(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(&mut self) {
        if self.stopping.swap(true, Ordering::SeqCst) {
            return;
        }
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        for c in self.conns.lock().unwrap().drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
        // Workers exit once every connection thread drops its sender.
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown();
    }
}
