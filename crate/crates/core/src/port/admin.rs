use std::net::{SocketAddr, TcpStream};
use std::time::Duration;

use thiserror::Error;

use super::{ChannelInfo, PortError, PortInner};
use crate::nameserver::{NameClient, NameError, PortName};
use crate::qos::admin::{
    parse_admin_command, AdminParseError, AdminRequest, PropertySetting, SExpr,
};
use crate::qos::{DscpCodepoint, PriorityClass};
use crate::wire::{
    initiate_handshake, read_frame, write_frame, CarrierId, Frame, FrameType, HandshakeError,
    HandshakeInfo, SessionRole,
};

pub(crate) fn handle_text(port: &PortInner, text: &str) -> String {
    match parse_admin_command(text) {
        Ok(req) => handle_request(port, &req),
        Err(e) => parse_error_reply(&e),
    }
}

fn parse_error_reply(e: &AdminParseError) -> String {
    match e {
        AdminParseError::Syntax { position, message } => {
            format!(
                "err syntax-error {position} {}",
                SExpr::Str(message.clone())
            )
        }
        AdminParseError::UnknownVerb(v) => format!("err unknown-verb {}", SExpr::Str(v.clone())),
        AdminParseError::UnknownProperty(p) => {
            format!("err unknown-property {}", SExpr::Str(p.clone()))
        }
        AdminParseError::InvalidValue(v) if v.starts_with("invalid-priority-for-policy") => {
            format!("err invalid-priority-for-policy {}", SExpr::Str(v.clone()))
        }
        AdminParseError::InvalidValue(v) => format!("err invalid-value {}", SExpr::Str(v.clone())),
    }
}

fn err_reply(e: &PortError) -> String {
    match e {
        PortError::NoSuchChannel => "err no-such-channel".into(),
        other => {
            let token = other.token();
            match token.split_once(' ') {
                Some((head, rest)) => format!("err {head} {}", SExpr::Str(rest.to_string())),
                None => format!("err {token}"),
            }
        }
    }
}

pub(crate) fn handle_request(port: &PortInner, req: &AdminRequest) -> String {
    match req {
        AdminRequest::PropSet { peer, settings } => {
            if port.channel_info(peer).is_err() {
                return "err no-such-channel".into();
            }
            let mut degraded: Vec<String> = Vec::new();
            for s in settings {
                let r = match s {
                    PropertySetting::Sched(r) => port
                        .set_sched(peer, *r)
                        .map(|p| degraded.extend(p.degraded_reason)),
                    PropertySetting::Qos(q) => {
                        port.apply_tos(peer, q.tos()).map(|r| degraded.extend(r))
                    }
                    PropertySetting::QueueLength(n) => port.set_qlen(peer, *n),
                };
                if let Err(e) = r {
                    return err_reply(&e);
                }
            }
            degraded.dedup();
            if degraded.is_empty() {
                "ok".into()
            } else {
                let reasons: Vec<String> = degraded
                    .into_iter()
                    .map(|r| SExpr::Str(r).to_string())
                    .collect();
                format!("ok (degraded {})", reasons.join(" "))
            }
        }
        AdminRequest::PropGet { peer } => match port.channel_info(peer) {
            Ok(info) => format!("ok {}", render_info(&info)),
            Err(e) => err_reply(&e),
        },
        AdminRequest::Connect { peer, carrier } => match port.connect(peer, *carrier) {
            Ok(()) => "ok".into(),
            Err(e) => err_reply(&e),
        },
        AdminRequest::Disconnect { peer } => match port.disconnect(peer) {
            Ok(()) => "ok".into(),
            Err(e) => err_reply(&e),
        },
        AdminRequest::List => {
            let mut out = String::from("ok");
            for c in port.channels() {
                out.push(' ');
                out.push_str(
                    &SExpr::List(vec![
                        SExpr::sym(c.direction.as_str()),
                        SExpr::sym(c.peer.as_str()),
                        SExpr::sym(c.carrier.as_str()),
                        SExpr::sym(c.status.as_str()),
                    ])
                    .to_string(),
                );
            }
            out
        }
    }
}

/// The `qos` tree of a channel: class and codepoint when the TOS belongs to
/// a priority class, codepoint and raw TOS otherwise.
pub fn qos_sexpr(tos: u8) -> SExpr {
    let dscp = DscpCodepoint::from_tos(tos);
    let dscp_expr = match dscp.mnemonic() {
        Some(m) => SExpr::Symbol(m),
        None => SExpr::Int(dscp.value() as i64),
    };
    let mut items = Vec::new();
    match PriorityClass::from_dscp(dscp) {
        Some(c) if c.tos() == tos => {
            items.push(SExpr::pair("priority", SExpr::sym(c.keyword())));
            items.push(SExpr::pair("dscp", dscp_expr));
        }
        _ => {
            items.push(SExpr::pair("dscp", dscp_expr));
            items.push(SExpr::pair("tos", SExpr::Int(tos as i64)));
        }
    }
    SExpr::pair("qos", SExpr::List(items))
}

fn render_info(info: &ChannelInfo) -> String {
    let mut sched = vec![
        SExpr::pair("policy", SExpr::sym(info.sched.policy.keyword())),
        SExpr::pair("priority", SExpr::Int(info.sched.priority as i64)),
        SExpr::pair(
            "applied",
            SExpr::sym(if info.sched.applied { "true" } else { "false" }),
        ),
    ];
    if let Some(r) = &info.sched.degraded_reason {
        sched.push(SExpr::pair("degraded", SExpr::Str(r.clone())));
    }
    let c = &info.counters;
    let counters = [
        ("enqueued", c.enqueued),
        ("sent", c.sent),
        ("received", c.received),
        ("dropped", c.dropped),
        ("acks", c.acks),
        ("rejected", c.rejected),
        ("queued", info.queued as u64),
    ]
    .into_iter()
    .map(|(k, v)| SExpr::pair(k, SExpr::Int(v as i64)))
    .collect();
    [
        SExpr::pair("direction", SExpr::sym(info.direction.as_str())),
        SExpr::pair("carrier", SExpr::sym(info.carrier.as_str())),
        SExpr::pair("status", SExpr::sym(info.status.as_str())),
        SExpr::pair("sched", SExpr::List(sched)),
        qos_sexpr(info.tos),
        SExpr::pair("qlen", SExpr::Int(info.queue_capacity as i64)),
        SExpr::pair("counters", SExpr::List(counters)),
    ]
    .iter()
    .map(ToString::to_string)
    .collect::<Vec<_>>()
    .join(" ")
}

pub(crate) fn serve_session(port: &PortInner, stream: TcpStream) {
    let mut reader = &stream;
    loop {
        let frame = match read_frame(&mut reader) {
            Ok(f) => f,
            Err(_) => return,
        };
        if frame.frame_type != FrameType::AdminRequest {
            log::warn!(
                "{}: {:?} frame on admin session",
                port.name,
                frame.frame_type
            );
            return;
        }
        let reply = match std::str::from_utf8(&frame.payload) {
            Ok(text) => handle_text(port, text),
            Err(_) => "err invalid-value \"request is not utf-8\"".to_string(),
        };
        let out = Frame::new(
            FrameType::AdminReply,
            frame.message_id,
            frame.timestamp_ns,
            reply.into_bytes(),
        );
        if write_frame(&mut &stream, &out).is_err() {
            return;
        }
    }
}

#[derive(Debug, Error)]
pub enum AdminError {
    #[error("connect-failure: {0}")]
    Connect(std::io::Error),
    #[error("lookup-failure: {0}")]
    Lookup(NameError),
    #[error("handshake-failure: {0}")]
    Handshake(#[from] HandshakeError),
    #[error("session lost: {0}")]
    Io(std::io::Error),
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// Client side of an admin session.
#[derive(Debug)]
pub struct AdminClient {
    stream: TcpStream,
    next_id: u64,
}

impl AdminClient {
    pub fn connect(addr: SocketAddr, client_name: &PortName) -> Result<AdminClient, AdminError> {
        let mut stream = TcpStream::connect_timeout(&addr, Duration::from_secs(2))
            .map_err(AdminError::Connect)?;
        stream.set_nodelay(true).map_err(AdminError::Connect)?;
        stream
            .set_read_timeout(Some(Duration::from_secs(30)))
            .map_err(AdminError::Connect)?;
        let info = HandshakeInfo::new(SessionRole::Admin, client_name.clone(), CarrierId::Tcp);
        initiate_handshake(&mut stream, &info)?;
        Ok(AdminClient { stream, next_id: 0 })
    }

    /// Resolves `target` through the name server first.
    pub fn connect_by_name(
        names: &NameClient,
        target: &PortName,
        client_name: &PortName,
    ) -> Result<AdminClient, AdminError> {
        let ep = names.lookup(target).map_err(AdminError::Lookup)?;
        Self::connect(ep.socket_addr(), client_name)
    }

    /// Sends one command line and waits for its reply.
    pub fn request(&mut self, command: &str) -> Result<String, AdminError> {
        let id = self.next_id;
        self.next_id += 1;
        let f = Frame::new(
            FrameType::AdminRequest,
            id,
            crate::clock::monotonic_ns(),
            command.as_bytes().to_vec(),
        );
        write_frame(&mut &self.stream, &f).map_err(AdminError::Io)?;
        let reply = read_frame(&mut &self.stream).map_err(AdminError::Io)?;
        if reply.frame_type != FrameType::AdminReply || reply.message_id != id {
            return Err(AdminError::Protocol(format!(
                "unexpected {:?} #{}",
                reply.frame_type, reply.message_id
            )));
        }
        String::from_utf8(reply.payload.to_vec())
            .map_err(|_| AdminError::Protocol("reply is not utf-8".into()))
    }
}
