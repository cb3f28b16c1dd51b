//! Central registry of port names.
//!
//! The name server is consulted only while a connection is being set up: a
//! port registers its listening [`EndpointTriplet`] under a symbolic
//! [`PortName`], and peers look the triplet up before dialing. Everything after
//! that is peer-to-peer.

mod client;
mod protocol;
mod registry;
mod server;

use std::fmt;
use std::net::{IpAddr, SocketAddr};
use std::str::FromStr;

use thiserror::Error;

use crate::wire::CarrierId;

pub use client::NameClient;
pub use protocol::{Request, Response};
pub use registry::Registry;
pub use server::NameServer;

/// Environment variable consulted for the name server address.
pub const NAMESERVER_ENV: &str = "PRIOPORT_NAMESERVER";
pub const DEFAULT_NAMESERVER: &str = "127.0.0.1:10000";

/// Address from `PRIOPORT_NAMESERVER`, falling back to 127.0.0.1:10000.
pub fn nameserver_addr_from_env() -> Result<SocketAddr, std::net::AddrParseError> {
    std::env::var(NAMESERVER_ENV)
        .unwrap_or_else(|_| DEFAULT_NAMESERVER.to_string())
        .parse()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed-name: {0:?}")]
pub struct MalformedName(pub String);

/// Symbolic port identity, e.g. `/publisher1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PortName(String);

impl PortName {
    pub fn new(name: impl Into<String>) -> Result<Self, MalformedName> {
        let name = name.into();
        if name.len() < 2
            || !name.starts_with('/')
            || name.chars().any(|c| c.is_whitespace() || c.is_control())
        {
            return Err(MalformedName(name));
        }
        Ok(PortName(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl FromStr for PortName {
    type Err = MalformedName;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PortName::new(s)
    }
}

impl fmt::Display for PortName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for PortName {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

/// Everything needed to reach a port without further name server traffic.
/// The third slot names the carrier the endpoint listens with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EndpointTriplet {
    pub host: IpAddr,
    pub port_number: u16,
    pub carrier: CarrierId,
}

impl EndpointTriplet {
    pub fn new(host: IpAddr, port_number: u16, carrier: CarrierId) -> Result<Self, NameError> {
        if port_number == 0 {
            return Err(NameError::Protocol(
                "port number must be in 1..=65535".into(),
            ));
        }
        Ok(EndpointTriplet {
            host,
            port_number,
            carrier,
        })
    }

    pub fn socket_addr(&self) -> SocketAddr {
        SocketAddr::new(self.host, self.port_number)
    }
}

impl fmt::Display for EndpointTriplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.host, self.port_number, self.carrier)
    }
}

#[derive(Debug, Error)]
pub enum NameError {
    #[error("not-found")]
    NotFound,
    #[error("name-already-registered")]
    AlreadyRegistered,
    #[error(transparent)]
    MalformedName(#[from] MalformedName),
    #[error("server-unreachable: {0}")]
    Unreachable(#[source] std::io::Error),
    #[error("protocol error: {0}")]
    Protocol(String),
}
