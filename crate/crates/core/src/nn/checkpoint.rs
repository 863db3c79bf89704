//! Text checkpoints.
//!
//! ```text
//! schema_version 1
//! model_kind <kind>
//! config <key> <value>          (zero or more)
//! param <name> <rank> <dims…>
//! <values>                      (one line, 17 significant digits)
//! optimizer <step>              (optional, followed by m/v blocks per param)
//! m <name>
//! <values>
//! v <name>
//! <values>
//! end
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::nn::{AdamW, NnError, ParamStore, Tensor};
use crate::scalar::Real;

pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Debug, Clone)]
pub struct OptimizerSnapshot {
    pub step: usize,
    pub m: Vec<Tensor<f64>>,
    pub v: Vec<Tensor<f64>>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model_kind: String,
    pub config: Vec<(String, String)>,
    pub params: Vec<(String, Tensor<f64>)>,
    pub optimizer: Option<OptimizerSnapshot>,
}

impl Checkpoint {
    pub fn from_store<T: Real>(
        model_kind: &str,
        config: &[(String, String)],
        store: &ParamStore<T>,
        opt: Option<&AdamW<T>>,
    ) -> Self {
        Self {
            model_kind: model_kind.to_string(),
            config: config.to_vec(),
            params: store.iter().map(|(n, t)| (n.to_string(), t.cast())).collect(),
            optimizer: opt.map(|o| OptimizerSnapshot {
                step: o.step,
                m: o.m.iter().map(|t| t.cast()).collect(),
                v: o.v.iter().map(|t| t.cast()).collect(),
            }),
        }
    }

    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Loads parameters into `store`, rejecting any name or shape mismatch.
    pub fn restore<T: Real>(&self, store: &mut ParamStore<T>) -> Result<(), NnError> {
        store.assign_from(&self.params)
    }

    pub fn restore_optimizer<T: Real>(&self, opt: &mut AdamW<T>) -> Result<(), NnError> {
        let Some(s) = &self.optimizer else {
            return Err(NnError::CheckpointMismatch("no optimizer state".into()));
        };
        if s.m.len() != opt.m.len() {
            return Err(NnError::CheckpointMismatch("optimizer moment count".into()));
        }
        opt.step = s.step;
        opt.m = s.m.iter().map(|t| t.cast()).collect();
        opt.v = s.v.iter().map(|t| t.cast()).collect();
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "schema_version {CHECKPOINT_SCHEMA}");
        let _ = writeln!(out, "model_kind {}", self.model_kind);
        for (k, v) in &self.config {
            let _ = writeln!(out, "config {k} {v}");
        }
        for (name, t) in &self.params {
            let _ = write!(out, "param {name} {}", t.shape().len());
            for d in t.shape() {
                let _ = write!(out, " {d}");
            }
            out.push('\n');
            write_values(&mut out, t.data());
        }
        if let Some(s) = &self.optimizer {
            let _ = writeln!(out, "optimizer {}", s.step);
            for (i, (name, _)) in self.params.iter().enumerate() {
                let _ = writeln!(out, "m {name}");
                write_values(&mut out, s.m[i].data());
                let _ = writeln!(out, "v {name}");
                write_values(&mut out, s.v[i].data());
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str) -> Result<Self, NnError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| -> Result<(usize, &str), NnError> {
            lines.next().ok_or_else(|| NnError::Parse { line: 0, msg: format!("unexpected end of file, expected {what}") })
        };
        let (ln, l) = next("schema_version")?;
        let version: u32 = field(ln, l, "schema_version")?
            .parse()
            .map_err(|_| NnError::Parse { line: ln, msg: "bad schema_version".into() })?;
        if version != CHECKPOINT_SCHEMA {
            return Err(NnError::SchemaVersionMismatch { found: version, expected: CHECKPOINT_SCHEMA });
        }
        let (ln, l) = next("model_kind")?;
        let model_kind = field(ln, l, "model_kind")?.to_string();
        let mut config = Vec::new();
        let mut params: Vec<(String, Tensor<f64>)> = Vec::new();
        let mut optimizer = None;
        loop {
            let (ln, l) = next("param, optimizer or end")?;
            let mut parts = l.split_whitespace();
            match parts.next() {
                Some("config") => {
                    let k = parts.next().ok_or_else(|| perr(ln, "config without key"))?;
                    let v = parts.collect::<Vec<_>>().join(" ");
                    config.push((k.to_string(), v));
                }
                Some("param") => {
                    let name = parts.next().ok_or_else(|| perr(ln, "param without name"))?.to_string();
                    let rank: usize = parse_num(ln, parts.next())?;
                    let shape = (0..rank).map(|_| parse_num(ln, parts.next())).collect::<Result<Vec<usize>, _>>()?;
                    let (vl, vals) = next("parameter values")?;
                    let data = parse_values(vl, vals)?;
                    let t = Tensor::new(shape, data).map_err(|e| perr(vl, &e.to_string()))?;
                    params.push((name, t));
                }
                Some("optimizer") => {
                    let step: usize = parse_num(ln, parts.next())?;
                    let mut m = Vec::new();
                    let mut v = Vec::new();
                    for (name, p) in &params {
                        for (tag, dst) in [("m", &mut m), ("v", &mut v)] {
                            let (hl, h) = next("moment header")?;
                            if h != format!("{tag} {name}") {
                                return Err(perr(hl, &format!("expected '{tag} {name}'")));
                            }
                            let (vl, vals) = next("moment values")?;
                            let data = parse_values(vl, vals)?;
                            dst.push(Tensor::new(p.shape().to_vec(), data).map_err(|e| perr(vl, &e.to_string()))?);
                        }
                    }
                    optimizer = Some(OptimizerSnapshot { step, m, v });
                }
                Some("end") => break,
                _ => return Err(perr(ln, &format!("unexpected line '{l}'"))),
            }
        }
        Ok(Self { model_kind, config, params, optimizer })
    }
}

fn perr(line: usize, msg: &str) -> NnError {
    NnError::Parse { line, msg: msg.to_string() }
}

fn field<'a>(line: usize, l: &'a str, key: &str) -> Result<&'a str, NnError> {
    l.strip_prefix(key)
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .ok_or_else(|| perr(line, &format!("expected '{key} <value>'")))
}

fn parse_num<N: std::str::FromStr>(line: usize, tok: Option<&str>) -> Result<N, NnError> {
    tok.and_then(|t| t.parse().ok()).ok_or_else(|| perr(line, "expected an integer"))
}

fn parse_values(line: usize, l: &str) -> Result<Vec<f64>, NnError> {
    l.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| perr(line, &format!("bad number '{t}'"))))
        .collect()
}

fn write_values(out: &mut String, data: &[f64]) {
    for (i, v) in data.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{v:.16e}");
    }
    out.push('\n');
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), NnError> {
    std::fs::write(path, ckpt.to_text())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, NnError> {
    let text = std::fs::read_to_string(path)?;
    Checkpoint::parse(&text)
}
