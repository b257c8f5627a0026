//! Loopback stand-in for a FaaS gateway: answers every POST with the
//! request body after a fixed delay.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use tiny_http::{Header, Response, Server};

use crate::error::{Error, Result};

pub struct StubGateway {
    server: Arc<Server>,
    addr: SocketAddr,
    acceptor: Option<JoinHandle<()>>,
}

impl StubGateway {
    /// Binds `addr` (use port 0 for an ephemeral port) and starts serving.
    pub fn start(addr: &str, delay: Duration) -> Result<Self> {
        let server = Server::http(addr).map_err(|e| Error::config(format!("cannot bind stub on {addr}: {e}")))?;
        let server = Arc::new(server);
        let local = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| Error::config("stub is not listening on an IP socket"))?;
        let srv = Arc::clone(&server);
        let acceptor = std::thread::spawn(move || {
            for mut req in srv.incoming_requests() {
                std::thread::spawn(move || {
                    let mut body = Vec::new();
                    let _ = req.as_reader().read_to_end(&mut body);
                    std::thread::sleep(delay);
                    let close = Header::from_bytes(&b"Connection"[..], &b"close"[..]).expect("static header");
                    let _ = req.respond(Response::from_data(body).with_header(close));
                });
            }
        });
        Ok(StubGateway {
            server,
            addr: local,
            acceptor: Some(acceptor),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the acceptor stops (it only stops on drop).
    pub fn wait(mut self) {
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

impl Drop for StubGateway {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}
