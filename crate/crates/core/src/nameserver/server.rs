use std::io::{self, BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use log::{debug, warn};

use super::protocol::{Request, Response};
use super::{NameError, Registry};

/// A running name server. Dropping it (or calling [`NameServer::shutdown`])
/// stops accepting and closes every client connection.
pub struct NameServer {
    local_addr: SocketAddr,
    registry: Arc<Registry>,
    stopping: Arc<AtomicBool>,
    connections: Arc<Mutex<Vec<TcpStream>>>,
    acceptor: Option<JoinHandle<()>>,
}

impl NameServer {
    pub fn start(addr: SocketAddr) -> io::Result<NameServer> {
        let listener = TcpListener::bind(addr)?;
        let local_addr = listener.local_addr()?;
        let registry = Arc::new(Registry::new());
        let stopping = Arc::new(AtomicBool::new(false));
        let connections = Arc::new(Mutex::new(Vec::new()));

        let acceptor = {
            let registry = registry.clone();
            let stopping = stopping.clone();
            let connections = connections.clone();
            thread::Builder::new()
                .name("nameserver-accept".into())
                .spawn(move || accept_loop(listener, registry, stopping, connections))?
        };
        debug!("name server listening on {local_addr}");
        Ok(NameServer {
            local_addr,
            registry,
            stopping,
            connections,
            acceptor: Some(acceptor),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    /// Blocks the calling thread until the server is shut down from elsewhere.
    pub fn wait(mut self) {
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if self.stopping.swap(true, Ordering::SeqCst) {
            return;
        }
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.local_addr);
        for c in self.connections.lock().unwrap().drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

impl Drop for NameServer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn accept_loop(
    listener: TcpListener,
    registry: Arc<Registry>,
    stopping: Arc<AtomicBool>,
    connections: Arc<Mutex<Vec<TcpStream>>>,
) {
    for conn in listener.incoming() {
        if stopping.load(Ordering::SeqCst) {
            break;
        }
        let stream = match conn {
            Ok(s) => s,
            Err(e) => {
                warn!("name server accept failed: {e}");
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        if let Ok(clone) = stream.try_clone() {
            let mut conns = connections.lock().unwrap();
            conns.retain(|c| c.peer_addr().is_ok());
            conns.push(clone);
        }
        let registry = registry.clone();
        let _ = thread::Builder::new()
            .name("nameserver-conn".into())
            .spawn(move || {
                if let Err(e) = serve_connection(stream, &registry) {
                    debug!("name server connection ended: {e}");
                }
            });
    }
}

fn serve_connection(stream: TcpStream, registry: &Registry) -> io::Result<()> {
    let mut writer = stream.try_clone()?;
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match Request::parse(&line) {
            Ok(req) => execute(registry, req),
            Err(reason) => Response::Err(reason),
        };
        writer.write_all(response.render().as_bytes())?;
    }
    Ok(())
}

pub(crate) fn execute(registry: &Registry, req: Request) -> Response {
    match req {
        Request::Register(name, endpoint) => match registry.register(name, endpoint) {
            Ok(()) => Response::Ok,
            Err(e) => Response::from_error(&e),
        },
        Request::Query(name) => match registry.lookup(&name) {
            Some(e) => Response::Endpoint(e),
            None => Response::from_error(&NameError::NotFound),
        },
        Request::Unregister(name) => {
            registry.unregister(&name);
            Response::Ok
        }
        Request::List => Response::Entries(registry.list()),
    }
}
