//! Administrative command language.
//!
//! Commands are a verb followed by parenthesized property trees:
//!
//! ```text
//! prop set /subscriber1 (sched ((policy SCHED_FIFO) (priority 30)))
//! prop set /subscriber1 (qos ((priority HIGH)))
//! prop set /subscriber1 (qos ((dscp AF42)))
//! prop set /subscriber1 (qlen 128)
//! prop get /subscriber1
//! connect /subscriber1 udp
//! disconnect /subscriber1
//! list
//! ```
//!
//! Whitespace (including newlines) between tokens is insignificant.

use std::fmt;

use thiserror::Error;

use super::{DscpCodepoint, PriorityClass, QosError, SchedPolicy, SchedRequest};
use crate::nameserver::PortName;
use crate::wire::CarrierId;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SExpr {
    Symbol(String),
    Int(i64),
    Str(String),
    List(Vec<SExpr>),
}

impl SExpr {
    pub fn sym(s: impl Into<String>) -> SExpr {
        SExpr::Symbol(s.into())
    }

    /// `(key value)`
    pub fn pair(key: &str, value: SExpr) -> SExpr {
        SExpr::List(vec![SExpr::sym(key), value])
    }

    pub fn as_symbol(&self) -> Option<&str> {
        match self {
            SExpr::Symbol(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[SExpr]> {
        match self {
            SExpr::List(l) => Some(l),
            _ => None,
        }
    }

    /// Looks up `key` in a list of `(key value)` pairs.
    pub fn get(&self, key: &str) -> Option<&SExpr> {
        self.as_list()?
            .iter()
            .find_map(|item| match item.as_list()? {
                [SExpr::Symbol(k), v] if k == key => Some(v),
                _ => None,
            })
    }
}

impl fmt::Display for SExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SExpr::Symbol(s) => f.write_str(s),
            SExpr::Int(i) => write!(f, "{i}"),
            SExpr::Str(s) => {
                f.write_str("\"")?;
                for c in s.chars() {
                    if c == '"' || c == '\\' {
                        f.write_str("\\")?;
                    }
                    write!(f, "{c}")?;
                }
                f.write_str("\"")
            }
            SExpr::List(items) => {
                f.write_str("(")?;
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" ")?;
                    }
                    write!(f, "{item}")?;
                }
                f.write_str(")")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AdminParseError {
    #[error("syntax-error at {position}: {message}")]
    Syntax { position: usize, message: String },
    #[error("unknown-verb {0}")]
    UnknownVerb(String),
    #[error("unknown-property {0}")]
    UnknownProperty(String),
    #[error("invalid-value {0}")]
    InvalidValue(String),
}

impl From<QosError> for AdminParseError {
    fn from(e: QosError) -> Self {
        AdminParseError::InvalidValue(e.to_string())
    }
}

fn syntax(position: usize, message: impl Into<String>) -> AdminParseError {
    AdminParseError::Syntax {
        position,
        message: message.into(),
    }
}

/// Parses a whitespace-separated sequence of top-level expressions. Returns
/// each expression with the byte offset it started at.
pub fn parse_sexprs(text: &str) -> Result<Vec<(usize, SExpr)>, AdminParseError> {
    let mut p = Parser { text, pos: 0 };
    let mut out = Vec::new();
    loop {
        p.skip_ws();
        if p.pos >= text.len() {
            return Ok(out);
        }
        let start = p.pos;
        out.push((start, p.expr()?));
    }
}

struct Parser<'a> {
    text: &'a str,
    pos: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<char> {
        self.text[self.pos..].chars().next()
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if !c.is_whitespace() {
                break;
            }
            self.pos += c.len_utf8();
        }
    }

    fn expr(&mut self) -> Result<SExpr, AdminParseError> {
        self.skip_ws();
        match self.peek() {
            None => Err(syntax(self.pos, "unexpected end of input")),
            Some('(') => {
                self.pos += 1;
                let mut items = Vec::new();
                loop {
                    self.skip_ws();
                    match self.peek() {
                        None => return Err(syntax(self.pos, "unclosed '('")),
                        Some(')') => {
                            self.pos += 1;
                            return Ok(SExpr::List(items));
                        }
                        Some(_) => items.push(self.expr()?),
                    }
                }
            }
            Some(')') => Err(syntax(self.pos, "unexpected ')'")),
            Some('"') => self.string(),
            Some(_) => Ok(self.atom()),
        }
    }

    fn string(&mut self) -> Result<SExpr, AdminParseError> {
        let start = self.pos;
        self.pos += 1;
        let mut s = String::new();
        let mut escaped = false;
        while let Some(c) = self.peek() {
            self.pos += c.len_utf8();
            match (escaped, c) {
                (false, '\\') => escaped = true,
                (false, '"') => return Ok(SExpr::Str(s)),
                _ => {
                    escaped = false;
                    s.push(c);
                }
            }
        }
        Err(syntax(start, "unterminated string"))
    }

    fn atom(&mut self) -> SExpr {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_whitespace() || c == '(' || c == ')' || c == '"' {
                break;
            }
            self.pos += c.len_utf8();
        }
        let tok = &self.text[start..self.pos];
        let is_int = {
            let digits = tok.strip_prefix('-').unwrap_or(tok);
            !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit())
        };
        match tok.parse::<i64>() {
            Ok(i) if is_int => SExpr::Int(i),
            _ => SExpr::Symbol(tok.to_string()),
        }
    }
}

/// Packet marking requested through the `qos` property.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QosSetting {
    Class(PriorityClass),
    Dscp(DscpCodepoint),
    /// Raw TOS byte, ECN bits included.
    Tos(u8),
}

impl QosSetting {
    pub fn tos(self) -> u8 {
        match self {
            QosSetting::Class(c) => c.tos(),
            QosSetting::Dscp(d) => super::dscp_to_tos(d),
            QosSetting::Tos(t) => t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PropertySetting {
    Sched(SchedRequest),
    Qos(QosSetting),
    /// Channel queue capacity in messages.
    QueueLength(usize),
}

impl PropertySetting {
    pub fn to_sexpr(&self) -> SExpr {
        match self {
            PropertySetting::Sched(s) => SExpr::pair(
                "sched",
                SExpr::List(vec![
                    SExpr::pair("policy", SExpr::sym(s.policy().keyword())),
                    SExpr::pair("priority", SExpr::Int(s.priority() as i64)),
                ]),
            ),
            PropertySetting::Qos(q) => {
                let inner = match q {
                    QosSetting::Class(c) => SExpr::pair("priority", SExpr::sym(c.keyword())),
                    QosSetting::Dscp(d) => SExpr::pair("dscp", dscp_sexpr(*d)),
                    QosSetting::Tos(t) => SExpr::pair("tos", SExpr::Int(*t as i64)),
                };
                SExpr::pair("qos", SExpr::List(vec![inner]))
            }
            PropertySetting::QueueLength(n) => SExpr::pair("qlen", SExpr::Int(*n as i64)),
        }
    }

    fn from_sexpr(e: &SExpr, position: usize) -> Result<Self, AdminParseError> {
        let Some([SExpr::Symbol(key), value]) = e.as_list() else {
            return Err(syntax(position, "expected (property value)"));
        };
        match key.as_str() {
            "sched" => {
                let policy: SchedPolicy = match value.get("policy") {
                    Some(SExpr::Symbol(p)) => p.parse()?,
                    Some(other) => {
                        return Err(AdminParseError::InvalidValue(format!("policy {other}")))
                    }
                    None => return Err(syntax(position, "sched requires (policy ...)")),
                };
                let priority = match value.get("priority") {
                    Some(SExpr::Int(i)) => i32::try_from(*i)
                        .map_err(|_| AdminParseError::InvalidValue(format!("priority {i}")))?,
                    Some(other) => {
                        return Err(AdminParseError::InvalidValue(format!("priority {other}")))
                    }
                    None if !policy.is_realtime() => 0,
                    None => return Err(syntax(position, "sched requires (priority N)")),
                };
                check_keys(value, &["policy", "priority"])?;
                Ok(PropertySetting::Sched(SchedRequest::new(policy, priority)?))
            }
            "qos" => {
                check_keys(value, &["priority", "dscp", "tos"])?;
                let items = value.as_list().unwrap_or_default();
                if items.len() != 1 {
                    return Err(syntax(
                        position,
                        "qos takes exactly one of priority, dscp, tos",
                    ));
                }
                let setting = if let Some(v) = value.get("priority") {
                    let name = v
                        .as_symbol()
                        .ok_or_else(|| AdminParseError::InvalidValue(format!("priority {v}")))?;
                    QosSetting::Class(name.parse()?)
                } else if let Some(v) = value.get("dscp") {
                    QosSetting::Dscp(match v {
                        SExpr::Int(i) => DscpCodepoint::new(
                            u32::try_from(*i).map_err(|_| QosError::DscpOutOfRange(u32::MAX))?,
                        )?,
                        SExpr::Symbol(s) => DscpCodepoint::from_mnemonic(s)?,
                        other => {
                            return Err(AdminParseError::InvalidValue(format!("dscp {other}")))
                        }
                    })
                } else if let Some(v) = value.get("tos") {
                    match v {
                        SExpr::Int(i) if (0..=255).contains(i) => QosSetting::Tos(*i as u8),
                        other => return Err(AdminParseError::InvalidValue(format!("tos {other}"))),
                    }
                } else {
                    return Err(syntax(
                        position,
                        "qos takes exactly one of priority, dscp, tos",
                    ));
                };
                Ok(PropertySetting::Qos(setting))
            }
            "qlen" => match value {
                SExpr::Int(n) if *n >= 1 => Ok(PropertySetting::QueueLength(*n as usize)),
                other => Err(AdminParseError::InvalidValue(format!("qlen {other}"))),
            },
            other => Err(AdminParseError::UnknownProperty(other.to_string())),
        }
    }
}

fn dscp_sexpr(d: DscpCodepoint) -> SExpr {
    match d.mnemonic() {
        Some(m) => SExpr::Symbol(m),
        None => SExpr::Int(d.value() as i64),
    }
}

fn check_keys(value: &SExpr, allowed: &[&str]) -> Result<(), AdminParseError> {
    for item in value.as_list().unwrap_or_default() {
        match item.as_list() {
            Some([SExpr::Symbol(k), _]) if allowed.contains(&k.as_str()) => {}
            Some([SExpr::Symbol(k), _]) => return Err(AdminParseError::UnknownProperty(k.clone())),
            _ => return Err(AdminParseError::InvalidValue(item.to_string())),
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AdminRequest {
    PropSet {
        peer: PortName,
        settings: Vec<PropertySetting>,
    },
    PropGet {
        peer: PortName,
    },
    /// Open an output channel from the administered port to `peer`.
    Connect {
        peer: PortName,
        carrier: CarrierId,
    },
    Disconnect {
        peer: PortName,
    },
    /// Enumerate the port's channels.
    List,
}

impl AdminRequest {
    pub fn render(&self) -> String {
        match self {
            AdminRequest::PropSet { peer, settings } => {
                let mut s = format!("prop set {peer}");
                for p in settings {
                    s.push(' ');
                    s.push_str(&p.to_sexpr().to_string());
                }
                s
            }
            AdminRequest::PropGet { peer } => format!("prop get {peer}"),
            AdminRequest::Connect { peer, carrier } => format!("connect {peer} {carrier}"),
            AdminRequest::Disconnect { peer } => format!("disconnect {peer}"),
            AdminRequest::List => "list".to_string(),
        }
    }

    pub fn peer(&self) -> Option<&PortName> {
        match self {
            AdminRequest::PropSet { peer, .. }
            | AdminRequest::PropGet { peer }
            | AdminRequest::Connect { peer, .. }
            | AdminRequest::Disconnect { peer } => Some(peer),
            AdminRequest::List => None,
        }
    }
}

impl fmt::Display for AdminRequest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

pub fn parse_admin_command(text: &str) -> Result<AdminRequest, AdminParseError> {
    let items = parse_sexprs(text)?;
    let words: Vec<Option<&str>> = items.iter().map(|(_, e)| e.as_symbol()).collect();
    let end = text.len();
    let peer_at = |i: usize| -> Result<PortName, AdminParseError> {
        match items.get(i) {
            Some((_, SExpr::Symbol(s))) => {
                PortName::new(s.as_str()).map_err(|e| AdminParseError::InvalidValue(e.to_string()))
            }
            Some((pos, other)) => Err(syntax(*pos, format!("expected port name, found {other}"))),
            None => Err(syntax(end, "expected port name")),
        }
    };
    let no_more = |from: usize| -> Result<(), AdminParseError> {
        match items.get(from) {
            Some((pos, e)) => Err(syntax(*pos, format!("unexpected {e}"))),
            None => Ok(()),
        }
    };

    match words.first().copied().flatten() {
        Some("prop") => match words.get(1).copied().flatten() {
            Some("set") => {
                let peer = peer_at(2)?;
                if items.len() <= 3 {
                    return Err(syntax(end, "expected at least one property"));
                }
                let settings = items[3..]
                    .iter()
                    .map(|(pos, e)| PropertySetting::from_sexpr(e, *pos))
                    .collect::<Result<_, _>>()?;
                Ok(AdminRequest::PropSet { peer, settings })
            }
            Some("get") => {
                let peer = peer_at(2)?;
                no_more(3)?;
                Ok(AdminRequest::PropGet { peer })
            }
            Some(other) => Err(AdminParseError::UnknownVerb(format!("prop {other}"))),
            None => Err(syntax(
                items.get(1).map_or(end, |(p, _)| *p),
                "expected 'set' or 'get'",
            )),
        },
        Some("connect") => {
            let peer = peer_at(1)?;
            let carrier = match items.get(2) {
                None => CarrierId::Tcp,
                Some((_, SExpr::Symbol(c))) => c
                    .parse()
                    .map_err(|e| AdminParseError::InvalidValue(format!("{e}")))?,
                Some((pos, other)) => {
                    return Err(syntax(*pos, format!("expected carrier, found {other}")))
                }
            };
            no_more(3)?;
            Ok(AdminRequest::Connect { peer, carrier })
        }
        Some("disconnect") => {
            let peer = peer_at(1)?;
            no_more(2)?;
            Ok(AdminRequest::Disconnect { peer })
        }
        Some("list") => {
            no_more(1)?;
            Ok(AdminRequest::List)
        }
        Some(other) => Err(AdminParseError::UnknownVerb(other.to_string())),
        None => Err(syntax(
            items.first().map_or(0, |(p, _)| *p),
            "expected a command verb",
        )),
    }
}

/// True when an admin reply reports success.
pub fn reply_is_ok(reply: &str) -> bool {
    let t = reply.trim_start();
    t == "ok" || t.starts_with("ok ")
}
