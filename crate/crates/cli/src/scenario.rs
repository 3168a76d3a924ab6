//! Line-oriented scenario scripts.
//!
//! ```text
//! scheme lkh
//! degree 3
//! setup u1 u2 u3 u4 u5 u6 u7 u8
//! join u9
//! leave u8
//! corrupt u7
//! recover
//! ```
//!
//! Stateless scripts use `scheme cs` or `scheme cs-strong`, `n 8`,
//! `broadcast revoke=1,8 msg="hello" [offline=3]` and `corrupt-receiver 5`.

use std::collections::BTreeSet;
use std::fmt;

use gkm_core::lkh::{RekeyPolicy, SetupDelivery};
use gkm_core::stateless::CsMode;
use gkm_core::{KeyLength, UserId};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Lkh,
    LkhStrong,
    LkhStrongOpt,
    Cs,
    CsStrong,
}

impl Scheme {
    pub fn parse(token: &str) -> Option<Self> {
        Some(match token {
            "lkh" => Scheme::Lkh,
            "lkh-strong" => Scheme::LkhStrong,
            "lkh-strong-opt" => Scheme::LkhStrongOpt,
            "cs" => Scheme::Cs,
            "cs-strong" => Scheme::CsStrong,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Lkh => "lkh",
            Scheme::LkhStrong => "lkh-strong",
            Scheme::LkhStrongOpt => "lkh-strong-opt",
            Scheme::Cs => "cs",
            Scheme::CsStrong => "cs-strong",
        }
    }

    pub fn is_stateful(self) -> bool {
        matches!(self, Scheme::Lkh | Scheme::LkhStrong | Scheme::LkhStrongOpt)
    }

    pub fn policy(self) -> Option<RekeyPolicy> {
        match self {
            Scheme::Lkh => Some(RekeyPolicy::Baseline),
            Scheme::LkhStrong => Some(RekeyPolicy::Strong),
            Scheme::LkhStrongOpt => Some(RekeyPolicy::StrongOpt),
            _ => None,
        }
    }

    pub fn cs_mode(self) -> Option<CsMode> {
        match self {
            Scheme::Cs => Some(CsMode::Baseline),
            Scheme::CsStrong => Some(CsMode::Strong),
            _ => None,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    Setup(Vec<UserId>),
    Join(UserId),
    Leave(UserId),
    Corrupt(UserId),
    Reveal(UserId),
    Recover,
    /// Closure over the tape from the victim's revocation on, starting from
    /// what was captured when the victim was corrupted.
    ForwardRecover(String),
    Broadcast {
        revoke: BTreeSet<u32>,
        msg: String,
        offline: BTreeSet<u32>,
    },
    CorruptReceiver(u32),
}

impl Event {
    pub fn is_stateful_only(&self) -> bool {
        matches!(
            self,
            Event::Setup(_) | Event::Join(_) | Event::Leave(_) | Event::Corrupt(_) | Event::Reveal(_)
        )
    }

    pub fn is_stateless_only(&self) -> bool {
        matches!(self, Event::Broadcast { .. } | Event::CorruptReceiver(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub scheme: Scheme,
    pub degree: usize,
    pub kappa: KeyLength,
    pub n: Option<u64>,
    pub setup_delivery: SetupDelivery,
    pub events: Vec<Event>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScenarioError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: `{directive}` is not valid for scheme {scheme}")]
    SchemeMismatch {
        line: usize,
        directive: String,
        scheme: Scheme,
    },
}

fn perr(line: usize, msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Parse { line, msg: msg.into() }
}

/// Splits on whitespace, keeping `"…"` quoted runs together.
fn tokens(line: &str) -> Result<Vec<String>, &'static str> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut started = false;
    for c in line.chars() {
        match c {
            '"' => {
                quoted = !quoted;
                started = true;
            }
            c if c.is_whitespace() && !quoted => {
                if started {
                    out.push(std::mem::take(&mut cur));
                    started = false;
                }
            }
            c => {
                cur.push(c);
                started = true;
            }
        }
    }
    if quoted {
        return Err("unterminated quote");
    }
    if started {
        out.push(cur);
    }
    Ok(out)
}

fn strip_comment(line: &str) -> &str {
    let mut quoted = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => quoted = !quoted,
            '#' if !quoted => return &line[..i],
            _ => {}
        }
    }
    line
}

fn parse_set(line: usize, v: &str) -> Result<BTreeSet<u32>, ScenarioError> {
    if v.is_empty() {
        return Ok(BTreeSet::new());
    }
    v.split(',')
        .map(|x| {
            x.trim()
                .parse::<u32>()
                .map_err(|_| perr(line, format!("bad receiver `{x}`")))
        })
        .collect()
}

fn one_arg(line: usize, args: &[String], what: &str) -> Result<String, ScenarioError> {
    match args {
        [a] => Ok(a.clone()),
        _ => Err(perr(line, format!("`{what}` takes exactly one argument"))),
    }
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let mut scheme = None;
    let mut degree = 3usize;
    let mut kappa = KeyLength::DEFAULT;
    let mut n = None;
    let mut setup_delivery = SetupDelivery::GroupKeyOnly;
    let mut events: Vec<(usize, String, Event)> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let toks = tokens(strip_comment(raw)).map_err(|m| perr(line, m))?;
        let Some((directive, args)) = toks.split_first() else {
            continue;
        };
        let d = directive.as_str();
        if !events.is_empty() && matches!(d, "scheme" | "degree" | "kappa" | "n" | "setup-delivery") {
            return Err(perr(line, format!("`{d}` must precede all events")));
        }
        match d {
            "scheme" => {
                let t = one_arg(line, args, d)?;
                scheme = Some(Scheme::parse(&t).ok_or_else(|| perr(line, format!("unknown scheme `{t}`")))?);
            }
            "degree" => {
                degree = one_arg(line, args, d)?
                    .parse()
                    .ok()
                    .filter(|&x| x >= 2)
                    .ok_or_else(|| perr(line, "degree must be an integer ≥ 2"))?;
            }
            "kappa" => {
                let bits: usize = one_arg(line, args, d)?.parse().map_err(|_| perr(line, "bad kappa"))?;
                kappa = KeyLength::from_bits(bits).map_err(|e| perr(line, e.to_string()))?;
            }
            "n" => {
                n = Some(one_arg(line, args, d)?.parse().map_err(|_| perr(line, "bad n"))?);
            }
            "setup-delivery" => {
                setup_delivery = match one_arg(line, args, d)?.as_str() {
                    "group-key" => SetupDelivery::GroupKeyOnly,
                    "full-keyset" => SetupDelivery::FullKeyset,
                    other => return Err(perr(line, format!("unknown setup delivery `{other}`"))),
                };
            }
            "setup" => {
                if args.is_empty() {
                    return Err(perr(line, "setup needs at least one user"));
                }
                events.push((line, d.into(), Event::Setup(args.iter().map(UserId::new).collect())));
            }
            "join" => events.push((line, d.into(), Event::Join(UserId::new(one_arg(line, args, d)?)))),
            "leave" => events.push((line, d.into(), Event::Leave(UserId::new(one_arg(line, args, d)?)))),
            "corrupt" => events.push((line, d.into(), Event::Corrupt(UserId::new(one_arg(line, args, d)?)))),
            "reveal" => events.push((line, d.into(), Event::Reveal(UserId::new(one_arg(line, args, d)?)))),
            "recover" => {
                if !args.is_empty() {
                    return Err(perr(line, "`recover` takes no arguments"));
                }
                events.push((line, d.into(), Event::Recover));
            }
            "forward-recover" => events.push((line, d.into(), Event::ForwardRecover(one_arg(line, args, d)?))),
            "corrupt-receiver" => {
                let r = one_arg(line, args, d)?
                    .parse()
                    .map_err(|_| perr(line, "bad receiver number"))?;
                events.push((line, d.into(), Event::CorruptReceiver(r)));
            }
            "broadcast" => {
                let mut revoke = BTreeSet::new();
                let mut offline = BTreeSet::new();
                let mut msg = None;
                for a in args {
                    let (k, v) = a
                        .split_once('=')
                        .ok_or_else(|| perr(line, format!("expected key=value, got `{a}`")))?;
                    match k {
                        "revoke" => revoke = parse_set(line, v)?,
                        "offline" => offline = parse_set(line, v)?,
                        "msg" => msg = Some(v.to_string()),
                        _ => return Err(perr(line, format!("unknown broadcast option `{k}`"))),
                    }
                }
                let msg = msg.ok_or_else(|| perr(line, "broadcast needs msg=\"…\""))?;
                events.push((line, d.into(), Event::Broadcast { revoke, msg, offline }));
            }
            other => return Err(perr(line, format!("unknown directive `{other}`"))),
        }
    }

    let scheme = scheme.ok_or_else(|| perr(1, "missing `scheme` directive"))?;
    let mut seen_setup = false;
    for (line, directive, e) in &events {
        let mismatch = if scheme.is_stateful() {
            e.is_stateless_only()
        } else {
            e.is_stateful_only()
        };
        if mismatch {
            return Err(ScenarioError::SchemeMismatch {
                line: *line,
                directive: directive.clone(),
                scheme,
            });
        }
        if scheme.is_stateful() {
            match e {
                Event::Setup(_) if seen_setup => return Err(perr(*line, "setup may appear only once")),
                Event::Setup(_) => seen_setup = true,
                _ if !seen_setup => return Err(perr(*line, format!("`{directive}` before setup"))),
                _ => {}
            }
        }
    }
    if scheme.is_stateful() && !seen_setup {
        return Err(perr(text.lines().count().max(1), "stateful scenario without setup"));
    }
    if !scheme.is_stateful() && n.is_none() {
        return Err(perr(1, "stateless scenario needs `n`"));
    }
    Ok(Scenario {
        scheme,
        degree,
        kappa,
        n,
        setup_delivery,
        events: events.into_iter().map(|(_, _, e)| e).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const REKEY8: &str =
        "scheme lkh\ndegree 3\nsetup u1 u2 u3 u4 u5 u6 u7 u8\njoin u9\nleave u8\nleave u6\ncorrupt u7\nrecover\n";

    #[test]
    fn golden_script_has_six_events() {
        let s = parse_scenario(REKEY8).unwrap();
        assert_eq!(s.events.len(), 6);
        assert_eq!(s.scheme, Scheme::Lkh);
        assert_eq!(s.degree, 3);
    }

    #[test]
    fn join_before_setup_is_rejected() {
        let err = parse_scenario("scheme lkh\njoin u9\nsetup u1\n").unwrap_err();
        assert_eq!(err, perr(2, "`join` before setup"));
    }

    #[test]
    fn unknown_scheme_is_rejected() {
        assert!(matches!(
            parse_scenario("scheme lkh-extra\n"),
            Err(ScenarioError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn scheme_mismatch() {
        let err = parse_scenario("scheme cs\nn 8\njoin u1\n").unwrap_err();
        assert!(matches!(err, ScenarioError::SchemeMismatch { line: 3, .. }));
        let err = parse_scenario("scheme lkh\nsetup a\nbroadcast revoke= msg=\"x\"\n").unwrap_err();
        assert!(matches!(err, ScenarioError::SchemeMismatch { line: 3, .. }));
    }

    #[test]
    fn broadcast_options_and_comments() {
        let s = parse_scenario(
            "# stateless\nscheme cs-strong\nn 8\nbroadcast revoke=1,8 msg=\"hello # world\" offline=3 # tail\ncorrupt-receiver 5\nrecover\n",
        )
        .unwrap();
        assert_eq!(s.n, Some(8));
        assert_eq!(
            s.events[0],
            Event::Broadcast {
                revoke: [1, 8].into_iter().collect(),
                msg: "hello # world".into(),
                offline: [3].into_iter().collect(),
            }
        );
        assert_eq!(s.events[1], Event::CorruptReceiver(5));
    }

    #[test]
    fn parameter_errors_carry_line_numbers() {
        assert!(matches!(
            parse_scenario("scheme lkh\ndegree 1\n"),
            Err(ScenarioError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_scenario("scheme lkh\nkappa 100\n"),
            Err(ScenarioError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_scenario("scheme lkh\nsetup a\nsetup b\n"),
            Err(ScenarioError::Parse { line: 3, .. })
        ));
        assert!(matches!(
            parse_scenario("scheme cs\nn 8\nbroadcast msg=\"x\nrecover\n"),
            Err(ScenarioError::Parse { line: 3, .. })
        ));
    }
}
