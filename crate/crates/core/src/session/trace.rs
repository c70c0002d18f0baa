//! Line-oriented session trace.
//!
//! ```text
//! heed-trace 1
//! engine <version>
//! config <json>
//! config-digest <sha256 of the json>
//! grid <nx> <ny> <nz> <active> <sha256 of the grid export>
//! targets <m>
//! target <idx> <i> <j> <k> <cx> <cy> <cz>        (m lines)
//! <event> <time_us> <user> <payload>            (one per event)
//! digest <sha256 of every preceding byte>
//! ```
//!
//! Event times are integer microseconds. Floats use 17 significant digits.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attention::UserId;
use crate::geometry::{Point3, Vec3};
use crate::sync::ApplyOutcome;
use crate::text::fmt_f64;
use crate::voxel::VoxelIndex;

pub const TRACE_SCHEMA_VERSION: u32 = 1;
const MAGIC: &str = "heed-trace";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TraceError {
    #[error("trace schema version {found} is not supported (expected {TRACE_SCHEMA_VERSION})")]
    Schema { found: String },
    #[error("trace line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("trace digest mismatch: recorded {recorded}, computed {computed}")]
    DigestMismatch { recorded: String, computed: String },
    #[error("trace line {line}: time {time_us} us precedes {previous_us} us")]
    TimeRegression { line: usize, time_us: u64, previous_us: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetRecord {
    pub voxel: VoxelIndex,
    pub center: Point3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceHeader {
    pub engine: String,
    pub config_json: String,
    pub config_digest: String,
    pub dims: [usize; 3],
    pub active_count: usize,
    pub grid_digest: String,
    pub targets: Vec<TargetRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TraceEvent {
    Toggle { t_us: u64, user: UserId, on: bool },
    /// A policy read of the team classification; `nonempty` is whether the
    /// view returned data.
    Consult { t_us: u64, user: UserId, nonempty: bool },
    Gaze { t_us: u64, user: UserId, origin: Point3, direction: Vec3 },
    Capture { t_us: u64, user: UserId, hit: Option<VoxelIndex>, deltas: Vec<(VoxelIndex, f64)> },
    Discover { t_us: u64, user: UserId, target: usize },
    Flush { t_us: u64, user: UserId, seq: u64, entries: usize },
    Deliver { t_us: u64, from: UserId, to: UserId, seq: u64, outcome: ApplyOutcome },
}

impl TraceEvent {
    pub fn time_us(&self) -> u64 {
        match *self {
            TraceEvent::Toggle { t_us, .. }
            | TraceEvent::Consult { t_us, .. }
            | TraceEvent::Gaze { t_us, .. }
            | TraceEvent::Capture { t_us, .. }
            | TraceEvent::Discover { t_us, .. }
            | TraceEvent::Flush { t_us, .. }
            | TraceEvent::Deliver { t_us, .. } => t_us,
        }
    }

    fn write_line(&self, out: &mut String) {
        match self {
            TraceEvent::Toggle { t_us, user, on } => {
                let _ = writeln!(out, "toggle {t_us} {user} {}", if *on { "on" } else { "off" });
            }
            TraceEvent::Consult { t_us, user, nonempty } => {
                let _ = writeln!(out, "consult {t_us} {user} {}", u8::from(*nonempty));
            }
            TraceEvent::Gaze { t_us, user, origin, direction } => {
                let _ = writeln!(
                    out,
                    "gaze {t_us} {user} {} {} {} {} {} {}",
                    fmt_f64(origin.x),
                    fmt_f64(origin.y),
                    fmt_f64(origin.z),
                    fmt_f64(direction.x),
                    fmt_f64(direction.y),
                    fmt_f64(direction.z)
                );
            }
            TraceEvent::Capture { t_us, user, hit, deltas } => {
                let _ = write!(out, "capture {t_us} {user} ");
                match hit {
                    Some(v) => {
                        let _ = write!(out, "{},{},{}", v.i, v.j, v.k);
                    }
                    None => out.push('-'),
                }
                let _ = write!(out, " {}", deltas.len());
                for (v, d) in deltas {
                    let _ = write!(out, " {},{},{}:{}", v.i, v.j, v.k, fmt_f64(*d));
                }
                out.push('\n');
            }
            TraceEvent::Discover { t_us, user, target } => {
                let _ = writeln!(out, "discover {t_us} {user} {target}");
            }
            TraceEvent::Flush { t_us, user, seq, entries } => {
                let _ = writeln!(out, "flush {t_us} {user} {seq} {entries}");
            }
            TraceEvent::Deliver { t_us, from, to, seq, outcome } => {
                let o = match outcome {
                    ApplyOutcome::Applied { drained } => format!("applied+{drained}"),
                    ApplyOutcome::Buffered => "buffered".to_string(),
                    ApplyOutcome::Duplicate => "duplicate".to_string(),
                };
                let _ = writeln!(out, "deliver {t_us} {from} {to} {seq} {o}");
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub events: Vec<TraceEvent>,
    /// Set when the trace ended without its digest line.
    pub partial: bool,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Trace {
    fn body_text(&self) -> String {
        let h = &self.header;
        let mut out = String::with_capacity(64 * self.events.len() + 1024);
        let _ = writeln!(out, "{MAGIC} {TRACE_SCHEMA_VERSION}");
        let _ = writeln!(out, "engine {}", h.engine);
        let _ = writeln!(out, "config {}", h.config_json);
        let _ = writeln!(out, "config-digest {}", h.config_digest);
        let _ = writeln!(
            out,
            "grid {} {} {} {} {}",
            h.dims[0], h.dims[1], h.dims[2], h.active_count, h.grid_digest
        );
        let _ = writeln!(out, "targets {}", h.targets.len());
        for (idx, t) in h.targets.iter().enumerate() {
            let _ = writeln!(
                out,
                "target {idx} {} {} {} {} {} {}",
                t.voxel.i,
                t.voxel.j,
                t.voxel.k,
                fmt_f64(t.center.x),
                fmt_f64(t.center.y),
                fmt_f64(t.center.z)
            );
        }
        for e in &self.events {
            e.write_line(&mut out);
        }
        out
    }

    /// Full text including the trailing digest line.
    pub fn to_text(&self) -> String {
        let mut body = self.body_text();
        let digest = sha256_hex(body.as_bytes());
        let _ = writeln!(body, "digest {digest}");
        body
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.body_text().as_bytes())
    }

    /// Parses a trace. A missing digest line (or a cut final line) yields a
    /// partial trace of the complete lines; a wrong digest or a time
    /// regression is an error.
    pub fn parse(text: &str) -> Result<Trace, TraceError> {
        let mut lines = Vec::new();
        let mut offset = 0;
        for chunk in text.split_inclusive('\n') {
            if chunk.ends_with('\n') {
                lines.push((offset, &chunk[..chunk.len() - 1]));
            }
            offset += chunk.len();
        }
        let mut cursor = LineCursor { lines: &lines, pos: 0 };

        let (_, first) = cursor.next_raw().ok_or_else(|| parse_err(1, "empty trace"))?;
        match first.split_once(' ') {
            Some((MAGIC, v)) if v == TRACE_SCHEMA_VERSION.to_string() => {}
            Some((MAGIC, v)) => return Err(TraceError::Schema { found: v.to_string() }),
            _ => return Err(parse_err(1, "not a heed trace")),
        }
        let engine = cursor.keyed("engine")?.to_string();
        let config_json = cursor.keyed("config")?.to_string();
        let config_digest = cursor.keyed("config-digest")?.to_string();
        let grid_line = cursor.pos + 1;
        let grid = cursor.keyed("grid")?;
        let g: Vec<&str> = grid.split(' ').collect();
        if g.len() != 5 {
            return Err(parse_err(grid_line, "grid needs dims, active count and digest"));
        }
        let dims = [num(g[0], grid_line)?, num(g[1], grid_line)?, num(g[2], grid_line)?];
        let active_count = num(g[3], grid_line)?;
        let grid_digest = g[4].to_string();
        let count_line = cursor.pos + 1;
        let count: usize = num(cursor.keyed("targets")?, count_line)?;
        let mut targets = Vec::with_capacity(count);
        for idx in 0..count {
            let line_no = cursor.pos + 1;
            let rest = cursor.keyed("target")?;
            let f: Vec<&str> = rest.split(' ').collect();
            if f.len() != 7 || num::<usize>(f[0], line_no)? != idx {
                return Err(parse_err(line_no, "malformed target record"));
            }
            targets.push(TargetRecord {
                voxel: VoxelIndex::new(num(f[1], line_no)?, num(f[2], line_no)?, num(f[3], line_no)?),
                center: Point3::new(num(f[4], line_no)?, num(f[5], line_no)?, num(f[6], line_no)?),
            });
        }

        let mut events = Vec::new();
        let mut partial = true;
        let mut last_t = 0u64;
        while let Some((start, line)) = cursor.next_raw() {
            let line_no = cursor.pos;
            if let Some(recorded) = line.strip_prefix("digest ") {
                if cursor.pos != lines.len() {
                    return Err(parse_err(line_no, "digest must be the last line"));
                }
                let computed = sha256_hex(&text.as_bytes()[..start]);
                if computed != recorded {
                    return Err(TraceError::DigestMismatch {
                        recorded: recorded.to_string(),
                        computed,
                    });
                }
                partial = false;
                break;
            }
            let event = parse_event(line, line_no)?;
            let t = event.time_us();
            if t < last_t {
                return Err(TraceError::TimeRegression {
                    line: line_no,
                    time_us: t,
                    previous_us: last_t,
                });
            }
            last_t = t;
            events.push(event);
        }

        Ok(Trace {
            header: TraceHeader {
                engine,
                config_json,
                config_digest,
                dims,
                active_count,
                grid_digest,
                targets,
            },
            events,
            partial,
        })
    }
}

struct LineCursor<'a> {
    lines: &'a [(usize, &'a str)],
    pos: usize,
}

impl<'a> LineCursor<'a> {
    fn next_raw(&mut self) -> Option<(usize, &'a str)> {
        let l = self.lines.get(self.pos).copied();
        if l.is_some() {
            self.pos += 1;
        }
        l
    }

    fn keyed(&mut self, key: &str) -> Result<&'a str, TraceError> {
        let line_no = self.pos + 1;
        let (_, line) = self
            .next_raw()
            .ok_or_else(|| parse_err(line_no, &format!("missing `{key}` line")))?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| parse_err(line_no, &format!("expected `{key}` line")))
    }
}

fn parse_err(line: usize, message: &str) -> TraceError {
    TraceError::Parse {
        line,
        message: message.to_string(),
    }
}

fn num<T: std::str::FromStr>(s: &str, line: usize) -> Result<T, TraceError> {
    s.parse().map_err(|_| parse_err(line, &format!("bad number `{s}`")))
}

fn voxel_token(s: &str, line: usize) -> Result<VoxelIndex, TraceError> {
    let mut it = s.split(',');
    let (Some(i), Some(j), Some(k), None) = (it.next(), it.next(), it.next(), it.next()) else {
        return Err(parse_err(line, &format!("bad voxel `{s}`")));
    };
    Ok(VoxelIndex::new(num(i, line)?, num(j, line)?, num(k, line)?))
}

fn parse_event(line: &str, n: usize) -> Result<TraceEvent, TraceError> {
    let f: Vec<&str> = line.split(' ').collect();
    if f.len() < 3 {
        return Err(parse_err(n, "event needs kind, time and user"));
    }
    let t_us: u64 = num(f[1], n)?;
    let user: UserId = num(f[2], n)?;
    let want = |len: usize| {
        if f.len() == len {
            Ok(())
        } else {
            Err(parse_err(n, &format!("`{}` takes {} fields", f[0], len)))
        }
    };
    let event = match f[0] {
        "toggle" => {
            want(4)?;
            let on = match f[3] {
                "on" => true,
                "off" => false,
                other => return Err(parse_err(n, &format!("bad toggle state `{other}`"))),
            };
            TraceEvent::Toggle { t_us, user, on }
        }
        "consult" => {
            want(4)?;
            let nonempty = match f[3] {
                "1" => true,
                "0" => false,
                other => return Err(parse_err(n, &format!("bad consult flag `{other}`"))),
            };
            TraceEvent::Consult { t_us, user, nonempty }
        }
        "gaze" => {
            want(9)?;
            let v: Vec<f64> = f[3..].iter().map(|s| num(s, n)).collect::<Result<_, _>>()?;
            TraceEvent::Gaze {
                t_us,
                user,
                origin: Point3::new(v[0], v[1], v[2]),
                direction: Vec3::new(v[3], v[4], v[5]),
            }
        }
        "capture" => {
            if f.len() < 5 {
                return Err(parse_err(n, "capture needs hit and delta count"));
            }
            let hit = if f[3] == "-" { None } else { Some(voxel_token(f[3], n)?) };
            let count: usize = num(f[4], n)?;
            want(5 + count)?;
            let deltas = f[5..]
                .iter()
                .map(|tok| {
                    let (v, d) = tok.split_once(':').ok_or_else(|| parse_err(n, "delta needs voxel:value"))?;
                    Ok((voxel_token(v, n)?, num(d, n)?))
                })
                .collect::<Result<_, TraceError>>()?;
            TraceEvent::Capture { t_us, user, hit, deltas }
        }
        "discover" => {
            want(4)?;
            TraceEvent::Discover {
                t_us,
                user,
                target: num(f[3], n)?,
            }
        }
        "flush" => {
            want(5)?;
            TraceEvent::Flush {
                t_us,
                user,
                seq: num(f[3], n)?,
                entries: num(f[4], n)?,
            }
        }
        "deliver" => {
            want(6)?;
            let outcome = match f[5] {
                "buffered" => ApplyOutcome::Buffered,
                "duplicate" => ApplyOutcome::Duplicate,
                o => match o.strip_prefix("applied+") {
                    Some(d) => ApplyOutcome::Applied { drained: num(d, n)? },
                    None => return Err(parse_err(n, &format!("bad delivery outcome `{o}`"))),
                },
            };
            TraceEvent::Deliver {
                t_us,
                from: user,
                to: num(f[3], n)?,
                seq: num(f[4], n)?,
                outcome,
            }
        }
        other => return Err(parse_err(n, &format!("unknown event `{other}`"))),
    };
    Ok(event)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Trace {
        Trace {
            header: TraceHeader {
                engine: "0.0.0".into(),
                config_json: "{\"seed\":1}".into(),
                config_digest: sha256_hex(b"{\"seed\":1}"),
                dims: [4, 4, 4],
                active_count: 3,
                grid_digest: "ab".into(),
                targets: vec![TargetRecord {
                    voxel: VoxelIndex::new(1, 2, 3),
                    center: Point3::new(0.1, 0.2, 0.3),
                }],
            },
            events: vec![
                TraceEvent::Toggle { t_us: 0, user: 0, on: true },
                TraceEvent::Consult { t_us: 0, user: 0, nonempty: true },
                TraceEvent::Gaze {
                    t_us: 0,
                    user: 0,
                    origin: Point3::new(1.0, -2.5, 0.3),
                    direction: Vec3::new(0.6, 0.0, -0.8),
                },
                TraceEvent::Capture {
                    t_us: 0,
                    user: 0,
                    hit: Some(VoxelIndex::new(1, 2, 3)),
                    deltas: vec![(VoxelIndex::new(1, 2, 3), 1.0), (VoxelIndex::new(1, 2, 4), 0.1)],
                },
                TraceEvent::Capture { t_us: 100_000, user: 1, hit: None, deltas: vec![] },
                TraceEvent::Discover { t_us: 100_000, user: 1, target: 0 },
                TraceEvent::Flush { t_us: 250_000, user: 0, seq: 1, entries: 2 },
                TraceEvent::Deliver {
                    t_us: 300_000,
                    from: 0,
                    to: 1,
                    seq: 1,
                    outcome: ApplyOutcome::Applied { drained: 0 },
                },
            ],
            partial: false,
        }
    }

    #[test]
    fn text_round_trip() {
        let t = sample();
        let text = t.to_text();
        assert_eq!(Trace::parse(&text).unwrap(), t);
        assert!(text.ends_with(&format!("digest {}\n", t.digest())));
    }

    #[test]
    fn truncation_is_partial() {
        let text = sample().to_text();
        let cut = text.find("flush").unwrap() + 3;
        let parsed = Trace::parse(&text[..cut]).unwrap();
        assert!(parsed.partial);
        assert_eq!(parsed.events.len(), 6);
    }

    #[test]
    fn tampering_is_rejected() {
        let text = sample().to_text();
        let edited = text.replace("discover 100000 1 0", "discover 100000 0 0");
        assert!(matches!(Trace::parse(&edited), Err(TraceError::DigestMismatch { .. })));
    }

    #[test]
    fn time_regression_is_rejected() {
        let mut t = sample();
        t.events.push(TraceEvent::Flush { t_us: 200_000, user: 1, seq: 1, entries: 1 });
        assert!(matches!(
            Trace::parse(&t.to_text()),
            Err(TraceError::TimeRegression { time_us: 200_000, .. })
        ));
    }

    #[test]
    fn schema_version_checked() {
        let text = sample().to_text().replacen("heed-trace 1", "heed-trace 2", 1);
        assert!(matches!(Trace::parse(&text), Err(TraceError::Schema { .. })));
    }
}
