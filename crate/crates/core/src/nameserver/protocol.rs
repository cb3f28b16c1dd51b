//! Line protocol spoken between name server and clients.
//!
//! ```text
//! REGISTER <name> <host> <port> <carrier>   -> OK | ERR <reason>
//! QUERY <name>                              -> OK <host> <port> <carrier> | ERR not-found
//! UNREGISTER <name>                         -> OK
//! LIST                                      -> OK <n> followed by n lines "<name> <host> <port> <carrier>"
//! ```

use std::io::BufRead;

use super::{EndpointTriplet, NameError, PortName};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    Register(PortName, EndpointTriplet),
    Query(PortName),
    Unregister(PortName),
    List,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Response {
    Ok,
    Endpoint(EndpointTriplet),
    Entries(Vec<(PortName, EndpointTriplet)>),
    Err(String),
}

fn parse_endpoint(host: &str, port: &str, carrier: &str) -> Result<EndpointTriplet, String> {
    let host = host.parse().map_err(|_| format!("bad host {host:?}"))?;
    let port: u16 = port.parse().map_err(|_| format!("bad port {port:?}"))?;
    let carrier = carrier.parse().map_err(|e| format!("{e}"))?;
    EndpointTriplet::new(host, port, carrier).map_err(|e| e.to_string())
}

impl Request {
    /// Parses one request line. The error string is the `ERR` reason to send back.
    pub fn parse(line: &str) -> Result<Request, String> {
        let words: Vec<&str> = line.split_whitespace().collect();
        let name = |s: &str| PortName::new(s).map_err(|_| "malformed-name".to_string());
        match words.as_slice() {
            ["REGISTER", n, host, port, carrier] => Ok(Request::Register(
                name(n)?,
                parse_endpoint(host, port, carrier)?,
            )),
            ["QUERY", n] => Ok(Request::Query(name(n)?)),
            ["UNREGISTER", n] => Ok(Request::Unregister(name(n)?)),
            ["LIST"] => Ok(Request::List),
            [] => Err("bad-request empty".into()),
            [verb, ..] => Err(format!("bad-request {verb}")),
        }
    }

    pub fn render(&self) -> String {
        match self {
            Request::Register(n, e) => format!("REGISTER {n} {e}\n"),
            Request::Query(n) => format!("QUERY {n}\n"),
            Request::Unregister(n) => format!("UNREGISTER {n}\n"),
            Request::List => "LIST\n".to_string(),
        }
    }
}

impl Response {
    pub fn from_error(e: &NameError) -> Response {
        Response::Err(match e {
            NameError::NotFound => "not-found".into(),
            NameError::AlreadyRegistered => "name-already-registered".into(),
            NameError::MalformedName(_) => "malformed-name".into(),
            other => other.to_string(),
        })
    }

    pub fn render(&self) -> String {
        match self {
            Response::Ok => "OK\n".into(),
            Response::Endpoint(e) => format!("OK {e}\n"),
            Response::Entries(entries) => {
                let mut out = format!("OK {}\n", entries.len());
                for (n, e) in entries {
                    out.push_str(&format!("{n} {e}\n"));
                }
                out
            }
            Response::Err(reason) => format!("ERR {reason}\n"),
        }
    }

    /// Reads the reply to `req` from `r`. The request decides how to interpret
    /// an `OK` line, since the LIST reply spans several lines.
    pub fn read_for<R: BufRead>(req: &Request, r: &mut R) -> Result<Response, NameError> {
        let line = read_line(r)?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match (req, words.as_slice()) {
            (_, ["ERR", reason @ ..]) => Ok(Response::Err(reason.join(" "))),
            (Request::Query(_), ["OK", host, port, carrier]) => parse_endpoint(host, port, carrier)
                .map(Response::Endpoint)
                .map_err(NameError::Protocol),
            (Request::List, ["OK", n]) => {
                let n: usize = n
                    .parse()
                    .map_err(|_| NameError::Protocol(format!("bad count {n:?}")))?;
                let mut entries = Vec::with_capacity(n);
                for _ in 0..n {
                    let entry = read_line(r)?;
                    let w: Vec<&str> = entry.split_whitespace().collect();
                    let [name, host, port, carrier] = w.as_slice() else {
                        return Err(NameError::Protocol(format!("bad entry {entry:?}")));
                    };
                    let name = PortName::new(*name)?;
                    entries.push((
                        name,
                        parse_endpoint(host, port, carrier).map_err(NameError::Protocol)?,
                    ));
                }
                Ok(Response::Entries(entries))
            }
            (Request::Register(..) | Request::Unregister(_), ["OK"]) => Ok(Response::Ok),
            _ => Err(NameError::Protocol(format!("unexpected reply {line:?}"))),
        }
    }
}

fn read_line<R: BufRead>(r: &mut R) -> Result<String, NameError> {
    let mut line = String::new();
    let n = r.read_line(&mut line).map_err(NameError::Unreachable)?;
    if n == 0 {
        return Err(NameError::Unreachable(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            "name server closed the connection",
        )));
    }
    Ok(line.trim_end().to_string())
}
