//! Blocking client. One connection can carry many requests in flight:
//! [`Client::submit`] returns a handle immediately and a background reader
//! routes each response to its caller by request id.

use std::collections::HashMap;
use std::io::{BufReader, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use crossbeam_channel::{bounded, Receiver, Sender};
use hps_core::hot_cache::CacheStats;
use hps_core::{EmbeddingKey, TableName, UpdateBatch};

use crate::protocol::{
    decode_stats, decode_u64, read_frame, Frame, Incoming, LookupReply, ProtocolError, Request,
};

type Pending = Arc<Mutex<Option<HashMap<u32, Sender<Frame>>>>>;

/// A response that has not necessarily arrived yet.
pub struct PendingReply {
    id: u32,
    rx: Receiver<Frame>,
}

impl PendingReply {
    pub fn id(&self) -> u32 {
        self.id
    }

    /// Blocks for the response frame; ERROR frames become `Remote` errors.
    pub fn wait(self) -> Result<Frame, ProtocolError> {
        let frame = self.rx.recv().map_err(|_| ProtocolError::Closed)?;
        match frame.as_error() {
            Some((code, message)) => Err(ProtocolError::Remote { code, message }),
            None => Ok(frame),
        }
    }
}

pub struct Client {
    stream: Mutex<TcpStream>,
    pending: Pending,
    next_id: AtomicU32,
    reader: Option<JoinHandle<()>>,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Client, ProtocolError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let pending: Pending = Arc::new(Mutex::new(Some(HashMap::new())));
        let reader = {
            let pending = pending.clone();
            let mut r = BufReader::new(stream.try_clone()?);
            std::thread::Builder::new()
                .name("hps-client".into())
                .spawn(move || {
                    while let Ok(Some(incoming)) = read_frame(&mut r, u32::MAX) {
                        let Incoming::Frame(frame) = incoming else {
                            continue;
                        };
                        let tx = pending
                            .lock()
                            .unwrap()
                            .as_mut()
                            .and_then(|m| m.remove(&frame.id));
                        match tx {
                            Some(tx) => {
                                let _ = tx.send(frame);
                            }
                            None => log::warn!("response for unknown request id {}", frame.id),
                        }
                    }
                    // Fail everything still waiting.
                    pending.lock().unwrap().take();
                })?
        };
        Ok(Client {
            stream: Mutex::new(stream),
            pending,
            next_id: AtomicU32::new(1),
            reader: Some(reader),
        })
    }

    /// Sends a raw frame and returns a handle for its response.
    pub fn submit_frame(&self, frame: &Frame) -> Result<PendingReply, ProtocolError> {
        let (tx, rx) = bounded(1);
        match self.pending.lock().unwrap().as_mut() {
            Some(m) => m.insert(frame.id, tx),
            None => return Err(ProtocolError::Closed),
        };
        let bytes = frame.encode();
        if let Err(e) = self.stream.lock().unwrap().write_all(&bytes) {
            if let Some(m) = self.pending.lock().unwrap().as_mut() {
                m.remove(&frame.id);
            }
            return Err(e.into());
        }
        Ok(PendingReply { id: frame.id, rx })
    }

    pub fn submit(&self, req: &Request) -> Result<PendingReply, ProtocolError> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        self.submit_frame(&req.to_frame(id))
    }

    fn call(&self, req: &Request) -> Result<Frame, ProtocolError> {
        let frame = self.submit(req)?.wait()?;
        if frame.opcode != req.opcode() as u8 {
            return Err(ProtocolError::UnexpectedOpcode(frame.opcode));
        }
        Ok(frame)
    }

    pub fn lookup(
        &self,
        table: &TableName,
        keys: &[EmbeddingKey],
    ) -> Result<LookupReply, ProtocolError> {
        let f = self.call(&Request::Lookup {
            table: table.clone(),
            keys: keys.to_vec(),
        })?;
        LookupReply::decode(&f.payload)
    }

    /// Publishes the batch's entries; returns the server-assigned seq.
    pub fn publish(&self, batch: &UpdateBatch) -> Result<u64, ProtocolError> {
        decode_u64(&self.call(&Request::Publish(batch.clone()))?.payload)
    }

    pub fn stats(&self, table: &TableName) -> Result<CacheStats, ProtocolError> {
        decode_stats(
            &self
                .call(&Request::Stats {
                    table: table.clone(),
                })?
                .payload,
        )
    }

    /// Applies queued updates and refreshes L1 on the server.
    pub fn refresh(&self, table: &TableName) -> Result<u64, ProtocolError> {
        decode_u64(
            &self
                .call(&Request::Refresh {
                    table: table.clone(),
                })?
                .payload,
        )
    }

    /// Writes arbitrary bytes to the connection.
    pub fn send_raw(&self, bytes: &[u8]) -> Result<(), ProtocolError> {
        Ok(self.stream.lock().unwrap().write_all(bytes)?)
    }
}

impl Drop for Client {
    fn drop(&mut self) {
        let _ = self.stream.lock().unwrap().shutdown(Shutdown::Both);
        if let Some(h) = self.reader.take() {
            let _ = h.join();
        }
    }
}
