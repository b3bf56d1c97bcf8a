//! Accept loop serving an axum router over mutual TLS.

use std::io;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::Router;
use hyper::body::Incoming;
use hyper::Request;
use hyper_util::rt::TokioIo;
use rustls::ServerConfig;
use tokio::sync::oneshot;
use tokio_rustls::TlsAcceptor;
use tower::ServiceExt;
use warden_core::crypto::PublicKey;

use crate::tls::certificate_key;

/// Public key of the client certificate, inserted into every request.
#[derive(Debug, Clone, Copy)]
pub struct Peer(pub PublicKey);

/// A server running on its own runtime thread. Dropping it stops the server.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the server stops.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.halt();
    }
}

/// Serves `router` on `listener`. Connections without a valid client
/// certificate fail the handshake.
pub fn spawn(listener: std::net::TcpListener, tls: Arc<ServerConfig>, router: Router, workers: usize) -> io::Result<ServerHandle> {
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let (stop_tx, mut stop_rx) = oneshot::channel::<()>();
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(workers.max(1))
        .enable_all()
        .thread_name("warden-http")
        .build()?;
    let thread = std::thread::Builder::new().name(format!("serve-{addr}")).spawn(move || {
        rt.block_on(async move {
            let listener = match tokio::net::TcpListener::from_std(listener) {
                Ok(l) => l,
                Err(e) => {
                    log::error!("listener: {e}");
                    return;
                }
            };
            let acceptor = TlsAcceptor::from(tls);
            loop {
                tokio::select! {
                    _ = &mut stop_rx => break,
                    accepted = listener.accept() => {
                        let Ok((tcp, remote)) = accepted else { continue };
                        let _ = tcp.set_nodelay(true);
                        tokio::spawn(connection(acceptor.clone(), tcp, remote, router.clone()));
                    }
                }
            }
        });
        rt.shutdown_background();
    })?;
    Ok(ServerHandle {
        addr,
        stop: Some(stop_tx),
        thread: Some(thread),
    })
}

async fn connection(acceptor: TlsAcceptor, tcp: tokio::net::TcpStream, remote: SocketAddr, router: Router) {
    let stream = match acceptor.accept(tcp).await {
        Ok(s) => s,
        Err(e) => {
            log::debug!("handshake with {remote} failed: {e}");
            return;
        }
    };
    let peer = {
        let (_, conn) = stream.get_ref();
        match conn.peer_certificates().and_then(|c| c.first()).map(|c| certificate_key(c)) {
            Some(Ok(k)) => Peer(k),
            _ => return,
        }
    };
    let svc = hyper::service::service_fn(move |mut req: Request<Incoming>| {
        req.extensions_mut().insert(peer);
        router.clone().oneshot(req)
    });
    if let Err(e) = hyper::server::conn::http1::Builder::new()
        .serve_connection(TokioIo::new(stream), svc)
        .await
    {
        log::debug!("connection {remote}: {e}");
    }
}
