//! Flow-command script: the runtime control channel for tables and rates.
//!
//! One command per line, `#` starts a comment. A line may carry an `@<time>`
//! prefix scheduling it at a virtual time; bare commands apply at load (t=0).
//!
//! ```text
//! table_add <table> <action> <key...> => <param...>
//! table_set_default <table> <action> [param...]
//! set_queue_rate <port> <qid> <pps>
//! set_switch_rate <pps>
//! @2.0s set_queue_rate 1 0 2000
//! ```
//!
//! Values are written as decimal, `0x` hex, dotted IPv4, or colon MAC; LPM
//! keys as `value/prefix_len`.

use super::KeyLiteral;
use crate::packet::{parse_ipv4, parse_mac};
use crate::sim::SimTime;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Command {
    TableAdd { table: String, action: String, keys: Vec<KeyLiteral>, params: Vec<u64> },
    TableSetDefault { table: String, action: String, params: Vec<u64> },
    SetQueueRate { port: u32, qid: u8, rate_pps: u64 },
    SetSwitchRate { rate_pps: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimedCommand {
    /// None: applies at load time, before the run starts.
    pub at: Option<SimTime>,
    pub line: usize,
    pub cmd: Command,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {msg}")]
pub struct CmdError {
    pub line: usize,
    pub msg: String,
}

/// Parses one scalar: decimal, `0x` hex, dotted IPv4, or colon MAC.
pub fn parse_value(s: &str) -> Result<u64, String> {
    if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        return u64::from_str_radix(hex, 16).map_err(|_| format!("bad hex value {s:?}"));
    }
    if s.contains(':') {
        return parse_mac(s);
    }
    if s.contains('.') {
        return parse_ipv4(s);
    }
    s.parse::<u64>().map_err(|_| format!("bad value {s:?}"))
}

/// Parses a table key: a plain value or `value/prefix_len`.
pub fn parse_key(s: &str) -> Result<KeyLiteral, String> {
    match s.rsplit_once('/') {
        None => Ok(KeyLiteral::Value(parse_value(s)?)),
        Some((v, len)) => Ok(KeyLiteral::Prefix {
            value: parse_value(v)?,
            len: len.parse::<u32>().map_err(|_| format!("bad prefix length {len:?}"))?,
        }),
    }
}

/// Parses a duration with a mandatory unit: `2.0s`, `150ms`, `5us`, `250ns`.
pub fn parse_time(s: &str) -> Result<SimTime, String> {
    let (num, mult) = if let Some(n) = s.strip_suffix("ns") {
        (n, 1e-9)
    } else if let Some(n) = s.strip_suffix("us") {
        (n, 1e-6)
    } else if let Some(n) = s.strip_suffix("ms") {
        (n, 1e-3)
    } else if let Some(n) = s.strip_suffix('s') {
        (n, 1.0)
    } else {
        return Err(format!("time {s:?} needs a unit (s/ms/us/ns)"));
    };
    let v: f64 = num.parse().map_err(|_| format!("bad time {s:?}"))?;
    let secs = v * mult;
    if !secs.is_finite() || secs < 0.0 || secs * 1e9 > u64::MAX as f64 {
        return Err(format!("time {s:?} out of range"));
    }
    Ok(SimTime::from_secs_f64(secs))
}

pub fn parse_commands(text: &str) -> Result<Vec<TimedCommand>, CmdError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let e = |msg: String| CmdError { line, msg };
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut toks: Vec<&str> = content.split_whitespace().collect();
        let at = if let Some(spec) = toks[0].strip_prefix('@') {
            toks.remove(0);
            if toks.is_empty() {
                return Err(e("time prefix without a command".into()));
            }
            Some(parse_time(spec).map_err(e)?)
        } else {
            None
        };
        let cmd = match toks[0] {
            "table_add" => {
                let sep = toks
                    .iter()
                    .position(|&t| t == "=>")
                    .ok_or_else(|| e("table_add needs `=>` between keys and params".into()))?;
                if sep < 3 {
                    return Err(e("table_add <table> <action> <key...> => <param...>".into()));
                }
                let keys = toks[3..sep]
                    .iter()
                    .map(|t| parse_key(t))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(e)?;
                if keys.is_empty() {
                    return Err(e("table_add needs at least one key".into()));
                }
                let params = toks[sep + 1..]
                    .iter()
                    .map(|t| parse_value(t))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(e)?;
                Command::TableAdd {
                    table: toks[1].to_string(),
                    action: toks[2].to_string(),
                    keys,
                    params,
                }
            }
            "table_set_default" => {
                if toks.len() < 3 {
                    return Err(e("table_set_default <table> <action> [param...]".into()));
                }
                let params = toks[3..]
                    .iter()
                    .map(|t| parse_value(t))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(e)?;
                Command::TableSetDefault {
                    table: toks[1].to_string(),
                    action: toks[2].to_string(),
                    params,
                }
            }
            "set_queue_rate" => {
                if toks.len() != 4 {
                    return Err(e("set_queue_rate <port> <qid> <pps>".into()));
                }
                let port = toks[1].parse::<u32>().map_err(|_| e(format!("bad port {:?}", toks[1])))?;
                let qid = toks[2].parse::<u8>().map_err(|_| e(format!("bad qid {:?}", toks[2])))?;
                let rate = toks[3].parse::<u64>().map_err(|_| e(format!("bad rate {:?}", toks[3])))?;
                Command::SetQueueRate { port, qid, rate_pps: rate }
            }
            "set_switch_rate" => {
                if toks.len() != 2 {
                    return Err(e("set_switch_rate <pps>".into()));
                }
                let rate = toks[1].parse::<u64>().map_err(|_| e(format!("bad rate {:?}", toks[1])))?;
                Command::SetSwitchRate { rate_pps: rate }
            }
            other => return Err(e(format!("unknown command {other}"))),
        };
        out.push(TimedCommand { at, line, cmd });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_the_documented_forms() {
        let text = "\
# tunnel entries
table_add myTunnel_exact forward 0x22 => 2
table_add ipv4_lpm forward 10.1.1.0/24 => 00:00:00:00:01:02 2
table_set_default ipv4_lpm drop
set_queue_rate 1 0 5000
set_switch_rate 1000000
@2.0s set_queue_rate 1 0 2000
";
        let cmds = parse_commands(text).unwrap();
        assert_eq!(cmds.len(), 6);
        assert_eq!(
            cmds[0].cmd,
            Command::TableAdd {
                table: "myTunnel_exact".into(),
                action: "forward".into(),
                keys: vec![KeyLiteral::Value(0x22)],
                params: vec![2],
            }
        );
        assert_eq!(
            cmds[1].cmd,
            Command::TableAdd {
                table: "ipv4_lpm".into(),
                action: "forward".into(),
                keys: vec![KeyLiteral::Prefix { value: 0x0a010100, len: 24 }],
                params: vec![0x0102, 2],
            }
        );
        assert_eq!(
            cmds[3].cmd,
            Command::SetQueueRate { port: 1, qid: 0, rate_pps: 5000 }
        );
        assert_eq!(cmds[5].at, Some(SimTime::from_secs(2)));
        assert_eq!(cmds[5].line, 7);
        assert_eq!(cmds[0].at, None);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = parse_commands("table_add t\n").unwrap_err();
        assert_eq!(err.line, 1);
        let err = parse_commands("\n\nfrobnicate 1 2\n").unwrap_err();
        assert_eq!(err.line, 3);
        assert!(err.msg.contains("frobnicate"));
    }

    #[test]
    fn table_add_requires_separator() {
        let err = parse_commands("table_add t forward 0x22 2\n").unwrap_err();
        assert!(err.msg.contains("=>"));
    }

    #[test]
    fn empty_param_list_after_separator_is_fine() {
        let cmds = parse_commands("table_add t do_thing 0x22 =>\n").unwrap();
        assert_eq!(
            cmds[0].cmd,
            Command::TableAdd {
                table: "t".into(),
                action: "do_thing".into(),
                keys: vec![KeyLiteral::Value(0x22)],
                params: vec![],
            }
        );
    }

    #[test]
    fn time_units() {
        assert_eq!(parse_time("2.0s").unwrap(), SimTime::from_secs(2));
        assert_eq!(parse_time("150ms").unwrap(), SimTime::from_millis(150));
        assert_eq!(parse_time("5us").unwrap(), SimTime::from_micros(5));
        assert_eq!(parse_time("250ns").unwrap(), SimTime::from_nanos(250));
        assert!(parse_time("10").is_err());
        assert!(parse_time("-1s").is_err());
    }

    #[test]
    fn value_forms() {
        assert_eq!(parse_value("0x1212").unwrap(), 0x1212);
        assert_eq!(parse_value("42").unwrap(), 42);
        assert_eq!(parse_value("10.0.2.2").unwrap(), 0x0a000202);
        assert_eq!(parse_value("00:00:00:00:01:01").unwrap(), 0x0101);
        assert!(parse_value("ten").is_err());
    }
}
