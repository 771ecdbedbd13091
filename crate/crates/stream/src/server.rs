//! WebSocket front end. One thread accepts connections; each connection
//! gets its own thread that relays hub messages and client commands.

use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use tungstenite::{Message, WebSocket};

use crate::hub::{ClientHandle, Hub};
use crate::protocol::Payload;
use crate::StreamError;

const POLL: Duration = Duration::from_millis(10);
const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(5);

pub struct StreamServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl StreamServer {
    /// Binds `addr` (port 0 picks a free port) and starts accepting.
    pub fn bind(addr: &str, hub: Hub) -> Result<Self, StreamError> {
        let listener = TcpListener::bind(addr).map_err(|e| StreamError::Io(format!("bind {addr}: {e}")))?;
        let local = listener.local_addr().map_err(|e| StreamError::Io(e.to_string()))?;
        listener.set_nonblocking(true).map_err(|e| StreamError::Io(e.to_string()))?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let accept = std::thread::Builder::new()
            .name("stream-accept".into())
            .spawn(move || accept_loop(listener, hub, flag))
            .map_err(|e| StreamError::Io(e.to_string()))?;
        log::info!("stream service listening on ws://{local}");
        Ok(Self {
            addr: local,
            stop,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_threads();
    }

    fn stop_threads(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for StreamServer {
    fn drop(&mut self) {
        self.stop_threads();
    }
}

fn accept_loop(listener: TcpListener, hub: Hub, stop: Arc<AtomicBool>) {
    let mut workers: Vec<JoinHandle<()>> = Vec::new();
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let (hub, stop) = (hub.clone(), stop.clone());
                let spawned = std::thread::Builder::new()
                    .name(format!("stream-client-{peer}"))
                    .spawn(move || {
                        if let Err(e) = serve(stream, &hub, &stop) {
                            log::debug!("client {peer}: {e}");
                        }
                    });
                match spawned {
                    Ok(h) => workers.push(h),
                    Err(e) => log::error!("cannot spawn client thread: {e}"),
                }
                workers.retain(|h| !h.is_finished());
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(POLL),
            Err(e) => {
                log::error!("accept failed: {e}");
                std::thread::sleep(POLL);
            }
        }
    }
    for h in workers {
        let _ = h.join();
    }
}

fn io_err(e: impl std::fmt::Display) -> StreamError {
    StreamError::Io(e.to_string())
}

fn serve(stream: TcpStream, hub: &Hub, stop: &AtomicBool) -> Result<(), StreamError> {
    stream.set_nonblocking(false).map_err(io_err)?;
    stream.set_nodelay(true).map_err(io_err)?;
    stream.set_read_timeout(Some(HANDSHAKE_TIMEOUT)).map_err(io_err)?;
    let mut ws = tungstenite::accept(stream).map_err(io_err)?;
    ws.get_ref().set_read_timeout(Some(POLL)).map_err(io_err)?;
    let client = hub.connect();
    let result = relay(&mut ws, &client, stop);
    let _ = ws.close(None);
    let _ = ws.flush();
    result
}

fn relay(ws: &mut WebSocket<TcpStream>, client: &ClientHandle, stop: &AtomicBool) -> Result<(), StreamError> {
    loop {
        if stop.load(Ordering::SeqCst) {
            return Ok(());
        }
        match ws.read() {
            Ok(Message::Text(text)) => {
                // Errors are reported to the client as error frames.
                let _ = client.handle_text(text.as_str());
            }
            Ok(Message::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
            Err(e) => return Err(io_err(e)),
        }
        loop {
            let env = match client.try_recv() {
                Ok(Some(env)) => env,
                Ok(None) => break,
                Err(StreamError::Disconnected) => return Ok(()),
                Err(e) => return Err(e),
            };
            let terminal = matches!(&env.payload, Payload::Error(e) if e.terminal);
            ws.send(Message::text(env.to_json())).map_err(io_err)?;
            if terminal {
                return Ok(());
            }
        }
    }
}
