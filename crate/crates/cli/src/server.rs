//! Websocket front end: one thread per client, each relaying broadcasts and
//! answering its own requests.

use std::io::ErrorKind;
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use tungstenite::Message;

use crate::session::Session;

const POLL: Duration = Duration::from_millis(5);

/// Accepts clients until `stop` is set. The listener is switched to
/// non-blocking mode so the flag is noticed between connections.
pub fn serve(session: Arc<Session>, listener: TcpListener, stop: Arc<AtomicBool>) -> std::io::Result<()> {
    listener.set_nonblocking(true)?;
    let mut clients = Vec::new();
    while !stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let session = session.clone();
                let stop = stop.clone();
                clients.push(std::thread::spawn(move || {
                    if let Err(e) = client(session, stream, stop) {
                        log::debug!("client {peer}: {e}");
                    }
                }));
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(POLL),
            Err(e) => return Err(e),
        }
        clients.retain(|h| !h.is_finished());
    }
    for h in clients {
        let _ = h.join();
    }
    Ok(())
}

fn client(session: Arc<Session>, stream: TcpStream, stop: Arc<AtomicBool>) -> tungstenite::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let mut ws = tungstenite::accept(stream).map_err(|e| match e {
        tungstenite::HandshakeError::Failure(e) => e,
        tungstenite::HandshakeError::Interrupted(_) => tungstenite::Error::ConnectionClosed,
    })?;
    ws.get_ref().set_read_timeout(Some(POLL))?;
    let outbox = session.subscribe();
    loop {
        if stop.load(Ordering::Relaxed) {
            let _ = ws.close(None);
            let _ = ws.flush();
            return Ok(());
        }
        match ws.read() {
            Ok(Message::Text(text)) => {
                if let Some(reply) = session.handle_text(text.as_str()) {
                    ws.send(Message::text(reply.to_json()))?;
                }
            }
            Ok(Message::Binary(_)) => {
                let reply = crate::protocol::ServerMessage::error(crate::protocol::ErrorCode::Malformed, "binary messages are not supported");
                ws.send(Message::text(reply.to_json()))?;
            }
            Ok(Message::Close(_)) => {
                // The close reply is already queued.
                let _ = ws.flush();
                return Ok(());
            }
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
            Err(e) => return Err(e),
        }
        for text in outbox.try_iter() {
            ws.write(Message::text(text))?;
        }
        match ws.flush() {
            Ok(()) => {}
            Err(tungstenite::Error::Io(e)) if e.kind() == ErrorKind::WouldBlock => {}
            Err(e) => return Err(e),
        }
    }
}
