//! Blocking TCP backing for the wire protocol. One thread per accepted
//! connection; each connection carries one request/response exchange at a
//! time.

use std::io::{BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::{Message, NetError, WireMessage};
use crate::types::SessionId;

pub struct TcpConnection {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    quantize: bool,
}

impl TcpConnection {
    pub fn connect(addr: &str, timeout: Duration, quantize: bool) -> Result<Self, NetError> {
        let sock: SocketAddr = addr
            .parse()
            .map_err(|e| NetError::Config(format!("bad address {addr}: {e}")))?;
        let stream = TcpStream::connect_timeout(&sock, timeout)?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        stream.set_nodelay(true)?;
        Ok(Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
            quantize,
        })
    }

    pub fn call(&mut self, session: SessionId, msg: &Message) -> Result<Message, NetError> {
        msg.to_wire(session, self.quantize).write_to(&mut self.writer)?;
        self.writer.flush()?;
        let reply = WireMessage::read_from(&mut self.reader)?;
        Message::from_wire(&reply)
    }

    /// Wall-clock round trip of a PING, in milliseconds.
    pub fn ping(&mut self) -> Result<f64, NetError> {
        let started = Instant::now();
        self.call(0, &Message::Ping)?;
        Ok(started.elapsed().as_secs_f64() * 1000.0)
    }
}

/// Accept loop handle; dropping it does not stop the loop, call [`TcpServerHandle::shutdown`].
pub struct TcpServerHandle {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl TcpServerHandle {
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the accept call
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Serves frames on `listener`, answering each with `handler`.
pub fn serve<H>(listener: TcpListener, handler: H) -> std::io::Result<TcpServerHandle>
where
    H: Fn(WireMessage) -> WireMessage + Send + Sync + 'static,
{
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let handler = Arc::new(handler);
    let stop_flag = stop.clone();
    let thread = thread::spawn(move || {
        for stream in listener.incoming() {
            if stop_flag.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = stream else { continue };
            let handler = handler.clone();
            thread::spawn(move || {
                let _ = stream.set_nodelay(true);
                let Ok(read_half) = stream.try_clone() else { return };
                let mut reader = BufReader::new(read_half);
                let mut writer = BufWriter::new(stream);
                loop {
                    let req = match WireMessage::read_from(&mut reader) {
                        Ok(m) => m,
                        Err(e) => {
                            log::debug!("closing connection: {e}");
                            break;
                        }
                    };
                    let reply = handler(req);
                    if reply.write_to(&mut writer).and_then(|_| writer.flush()).is_err() {
                        break;
                    }
                }
            });
        }
    });
    Ok(TcpServerHandle {
        addr,
        stop,
        thread: Some(thread),
    })
}
