use std::io::{BufReader, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::Mutex;
use std::time::Duration;

use super::protocol::{Request, Response};
use super::{EndpointTriplet, NameError, PortName};

const CONNECT_TIMEOUT: Duration = Duration::from_secs(2);
const IO_TIMEOUT: Duration = Duration::from_secs(5);

/// Blocking name server client. Keeps one connection open and reconnects
/// once on failure before reporting the server unreachable.
#[derive(Debug)]
pub struct NameClient {
    addr: SocketAddr,
    conn: Mutex<Option<BufReader<TcpStream>>>,
}

impl NameClient {
    pub fn new(addr: SocketAddr) -> Self {
        NameClient {
            addr,
            conn: Mutex::new(None),
        }
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn register(&self, name: &PortName, endpoint: EndpointTriplet) -> Result<(), NameError> {
        match self.call(&Request::Register(name.clone(), endpoint))? {
            Response::Ok => Ok(()),
            other => Err(error_from(other)),
        }
    }

    pub fn lookup(&self, name: &PortName) -> Result<EndpointTriplet, NameError> {
        match self.call(&Request::Query(name.clone()))? {
            Response::Endpoint(e) => Ok(e),
            other => Err(error_from(other)),
        }
    }

    pub fn unregister(&self, name: &PortName) -> Result<(), NameError> {
        match self.call(&Request::Unregister(name.clone()))? {
            Response::Ok => Ok(()),
            other => Err(error_from(other)),
        }
    }

    pub fn list(&self) -> Result<Vec<(PortName, EndpointTriplet)>, NameError> {
        match self.call(&Request::List)? {
            Response::Entries(e) => Ok(e),
            other => Err(error_from(other)),
        }
    }

    fn call(&self, req: &Request) -> Result<Response, NameError> {
        let mut guard = self.conn.lock().unwrap();
        let mut last_err = None;
        for _ in 0..2 {
            if guard.is_none() {
                match self.dial() {
                    Ok(c) => *guard = Some(c),
                    Err(e) => {
                        last_err = Some(e);
                        continue;
                    }
                }
            }
            let conn = guard.as_mut().unwrap();
            let sent = conn.get_mut().write_all(req.render().as_bytes());
            match sent
                .map_err(NameError::Unreachable)
                .and_then(|_| Response::read_for(req, conn))
            {
                Ok(r) => return Ok(r),
                Err(NameError::Unreachable(e)) => {
                    *guard = None;
                    last_err = Some(e);
                }
                Err(other) => {
                    *guard = None;
                    return Err(other);
                }
            }
        }
        Err(NameError::Unreachable(last_err.unwrap()))
    }

    fn dial(&self) -> std::io::Result<BufReader<TcpStream>> {
        let s = TcpStream::connect_timeout(&self.addr, CONNECT_TIMEOUT)?;
        s.set_nodelay(true)?;
        s.set_read_timeout(Some(IO_TIMEOUT))?;
        s.set_write_timeout(Some(IO_TIMEOUT))?;
        Ok(BufReader::new(s))
    }
}

fn error_from(r: Response) -> NameError {
    match r {
        Response::Err(reason) => match reason.as_str() {
            "not-found" => NameError::NotFound,
            "name-already-registered" => NameError::AlreadyRegistered,
            "malformed-name" => NameError::MalformedName(super::MalformedName(String::new())),
            _ => NameError::Protocol(reason),
        },
        other => NameError::Protocol(format!("unexpected reply {other:?}")),
    }
}
