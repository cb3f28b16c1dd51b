use std::io::{self, BufRead, IsTerminal, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Args;
use prioport_core::qos::admin::reply_is_ok;
use prioport_core::{AdminClient, NameClient, PortName};

#[derive(Debug, Args)]
pub struct AdminArgs {
    /// Port to administer.
    target: PortName,
    /// Command to run; may be repeated.
    #[arg(short = 'c', long = "command")]
    commands: Vec<String>,
    /// File of commands to run ("-" for stdin). Without this or -c, commands
    /// are read interactively.
    script: Option<PathBuf>,
}

/// Splits command text into commands. A command ends at the end of a line
/// once its parentheses balance, so one command may span several lines.
pub fn split_commands(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut depth: i64 = 0;
    for line in text.lines() {
        let trimmed = line.trim();
        if current.is_empty() && (trimmed.is_empty() || trimmed.starts_with('#')) {
            continue;
        }
        depth += paren_balance(line);
        if !current.is_empty() {
            current.push('\n');
        }
        current.push_str(line);
        if depth <= 0 {
            out.push(std::mem::take(&mut current));
            depth = 0;
        }
    }
    if !current.trim().is_empty() {
        out.push(current);
    }
    out
}

fn paren_balance(line: &str) -> i64 {
    let mut depth = 0;
    let mut in_str = false;
    let mut escaped = false;
    for c in line.chars() {
        match (in_str, escaped, c) {
            (true, true, _) => escaped = false,
            (true, false, '\\') => escaped = true,
            (true, false, '"') => in_str = false,
            (false, _, '"') => in_str = true,
            (false, _, '(') => depth += 1,
            (false, _, ')') => depth -= 1,
            _ => {}
        }
    }
    depth
}

fn client_name() -> PortName {
    PortName::new(format!("/prioport-admin/{}", std::process::id())).expect("valid port name")
}

fn interactive(client: &mut AdminClient) -> Result<ExitCode> {
    let stdin = io::stdin();
    let mut last_ok = true;
    let mut pending = String::new();
    let mut depth = 0;
    loop {
        eprint!("{}", if pending.is_empty() { "> " } else { ". " });
        let mut line = String::new();
        if stdin.lock().read_line(&mut line)? == 0 {
            break;
        }
        if pending.is_empty() && matches!(line.trim(), "" | "quit" | "exit") {
            if line.trim().is_empty() {
                continue;
            }
            break;
        }
        depth += paren_balance(&line);
        pending.push_str(&line);
        if depth <= 0 {
            let reply = client.request(pending.trim_end())?;
            println!("{reply}");
            last_ok = reply_is_ok(&reply);
            pending.clear();
            depth = 0;
        }
    }
    Ok(if last_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

pub fn run(nameserver: SocketAddr, args: AdminArgs) -> Result<ExitCode> {
    let mut client =
        AdminClient::connect_by_name(&NameClient::new(nameserver), &args.target, &client_name())?;
    let mut commands = args.commands.clone();
    match &args.script {
        Some(path) if path.as_os_str() == "-" => {
            let text = io::read_to_string(io::stdin())?;
            commands.extend(split_commands(&text));
        }
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            commands.extend(split_commands(&text));
        }
        None if commands.is_empty() && io::stdin().is_terminal() => {
            return interactive(&mut client)
        }
        None if commands.is_empty() => {
            commands.extend(split_commands(&io::read_to_string(io::stdin())?))
        }
        None => {}
    }
    let mut last_ok = true;
    let mut out = io::stdout().lock();
    for cmd in &commands {
        let reply = client.request(cmd)?;
        writeln!(out, "{reply}")?;
        last_ok = reply_is_ok(&reply);
    }
    out.flush()?;
    Ok(if last_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
