//! Motion text format.
//!
//! One `key value…` line per scalar field, then one header line per array
//! block followed by one line per frame (or per agent for `beta`).

use std::fmt::Write as _;
use std::path::Path;

use super::{DatasetError, Derived, MotionSequence, Transform};
use crate::body::{NUM_JOINTS, SHAPE_DIM};

pub const MOTION_SCHEMA: u32 = 1;

fn push_values(out: &mut String, vals: impl IntoIterator<Item = f64>) {
    let mut first = true;
    for v in vals {
        if !first {
            out.push(' ');
        }
        first = false;
        let _ = write!(out, "{v:.16e}");
    }
    out.push('\n');
}

fn push_transform_block(out: &mut String, name: &str, tr: &[Transform], per_frame: usize) {
    let _ = writeln!(out, "{name}");
    for frame in tr.chunks(per_frame.max(1)) {
        push_values(out, frame.iter().flat_map(|t| t.to_12()));
    }
}

pub fn to_text(seq: &MotionSequence) -> String {
    let (tn, pn) = (seq.num_frames, seq.num_agents);
    let mut out = String::new();
    let _ = writeln!(out, "schema_version {MOTION_SCHEMA}");
    let _ = writeln!(out, "fps {}", seq.fps);
    let _ = writeln!(out, "P {pn}");
    let _ = writeln!(out, "T {tn}");
    let _ = writeln!(out, "J {NUM_JOINTS}");
    let bits: Vec<&str> = seq.presence.iter().map(|b| if *b { "1" } else { "0" }).collect();
    let _ = writeln!(out, "presence {}", bits.join(" "));
    out.push_str("beta\n");
    for b in &seq.beta {
        push_values(&mut out, b.iter().copied());
    }
    out.push_str("theta\n");
    for frame in seq.theta.chunks(pn * NUM_JOINTS * 6) {
        push_values(&mut out, frame.iter().copied());
    }
    push_transform_block(&mut out, "root_world", &seq.root_world, pn);
    if let Some(d) = &seq.derived {
        push_transform_block(&mut out, "can_to_root", &d.can_to_root, pn);
        push_transform_block(&mut out, "delta_can", &d.delta_can, pn);
        push_transform_block(&mut out, "self_to_partner", &d.self_to_partner, pn * pn.saturating_sub(1));
    }
    out.push_str("end\n");
    out
}

struct Reader<'a> {
    lines: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
}

fn perr(line: usize, field: &str, msg: impl Into<String>) -> DatasetError {
    DatasetError::Parse { line, field: field.to_string(), msg: msg.into() }
}

impl<'a> Reader<'a> {
    fn next(&mut self, field: &str) -> Result<(usize, &'a str), DatasetError> {
        self.lines.next().map(|(i, l)| (i + 1, l)).ok_or_else(|| perr(0, field, "unexpected end of file"))
    }

    fn scalar<N: std::str::FromStr>(&mut self, key: &str) -> Result<N, DatasetError> {
        let (ln, l) = self.next(key)?;
        let rest = l
            .strip_prefix(key)
            .filter(|r| r.starts_with(' '))
            .ok_or_else(|| perr(ln, key, format!("expected '{key} <value>', found '{l}'")))?;
        rest.trim().parse().map_err(|_| perr(ln, key, format!("bad value '{}'", rest.trim())))
    }

    fn header(&mut self, key: &str) -> Result<(), DatasetError> {
        let (ln, l) = self.next(key)?;
        if l.trim() != key {
            return Err(perr(ln, key, format!("expected block '{key}', found '{l}'")));
        }
        Ok(())
    }

    fn row(&mut self, field: &str, width: usize) -> Result<Vec<f64>, DatasetError> {
        let (ln, l) = self.next(field)?;
        let vals = l
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| perr(ln, field, format!("bad number '{t}'"))))
            .collect::<Result<Vec<_>, _>>()?;
        if vals.len() != width {
            return Err(perr(ln, field, format!("expected {width} values, found {}", vals.len())));
        }
        Ok(vals)
    }

    fn transforms(&mut self, field: &str, frames: usize, per_frame: usize) -> Result<Vec<Transform>, DatasetError> {
        self.header(field)?;
        let mut out = Vec::with_capacity(frames * per_frame);
        for _ in 0..frames {
            let row = self.row(field, per_frame * 12)?;
            out.extend(row.chunks(12).map(Transform::from_12));
        }
        Ok(out)
    }
}

pub fn parse(text: &str) -> Result<MotionSequence, DatasetError> {
    let mut r = Reader { lines: text.lines().enumerate().peekable() };
    let version: u32 = r.scalar("schema_version")?;
    if version != MOTION_SCHEMA {
        return Err(DatasetError::SchemaVersionMismatch { found: version, expected: MOTION_SCHEMA });
    }
    let fps: u32 = r.scalar("fps")?;
    let pn: usize = r.scalar("P")?;
    let tn: usize = r.scalar("T")?;
    let jn: usize = r.scalar("J")?;
    if jn != NUM_JOINTS {
        return Err(perr(5, "J", format!("expected {NUM_JOINTS} joints, found {jn}")));
    }
    let (ln, l) = r.next("presence")?;
    let bits = l.strip_prefix("presence").ok_or_else(|| perr(ln, "presence", "missing presence line"))?;
    let presence = bits
        .split_whitespace()
        .map(|b| match b {
            "1" => Ok(true),
            "0" => Ok(false),
            _ => Err(perr(ln, "presence", format!("bad bit '{b}'"))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    if presence.len() != pn {
        return Err(perr(ln, "presence", format!("expected {pn} bits")));
    }
    r.header("beta")?;
    let mut beta = Vec::with_capacity(pn);
    for _ in 0..pn {
        let row = r.row("beta", SHAPE_DIM)?;
        let mut b = [0.0; SHAPE_DIM];
        b.copy_from_slice(&row);
        beta.push(b);
    }
    r.header("theta")?;
    let mut theta = Vec::with_capacity(tn * pn * NUM_JOINTS * 6);
    for _ in 0..tn {
        theta.extend(r.row("theta", pn * NUM_JOINTS * 6)?);
    }
    let root_world = r.transforms("root_world", tn, pn)?;
    let derived = match r.lines.peek().map(|(_, l)| l.trim()) {
        Some("can_to_root") => {
            let can_to_root = r.transforms("can_to_root", tn, pn)?;
            let delta_can = r.transforms("delta_can", tn, pn)?;
            let self_to_partner = r.transforms("self_to_partner", tn, pn * pn.saturating_sub(1))?;
            Some(Derived { can_to_root, delta_can, self_to_partner })
        }
        _ => None,
    };
    let (ln, l) = r.next("end")?;
    if l.trim() != "end" {
        return Err(perr(ln, "end", format!("expected 'end', found '{l}'")));
    }
    Ok(MotionSequence { fps, num_agents: pn, num_frames: tn, presence, beta, theta, root_world, derived })
}

pub fn save(seq: &MotionSequence, path: &Path) -> Result<(), DatasetError> {
    std::fs::write(path, to_text(seq))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<MotionSequence, DatasetError> {
    parse(&std::fs::read_to_string(path)?)
}
