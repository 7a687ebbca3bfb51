//! File formats: JSON-Lines event tables, JSON configs, CSV reports.
//!
//! An event table serializes as one header object
//! `{"schema": ..., "initial_state": ..., "meta": ...}` followed by one
//! object per record `{"dt": ..., "e": ..., "c": ...}`, fields in exactly
//! that order. Record times are emitted with 17 significant digits, which
//! round-trips every `f64` bit-for-bit. Files may concatenate several
//! tables; a new header object starts the next one.

use crate::events::{
    ClassId, EventRecord, EventSchema, Meta, NodeState, SystemState, Trajectory,
};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("config error: {0}")]
    Config(String),
}

fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn state_to_json(state: &SystemState) -> serde_json::Value {
    serde_json::json!({
        "nodes": state
            .nodes
            .iter()
            .map(|n| serde_json::json!({
                "queue": n.queue.iter().map(|&c| c + 1).collect::<Vec<_>>(),
                "servers": n
                    .servers
                    .iter()
                    .map(|s| s.map_or(0, |c| c + 1))
                    .collect::<Vec<_>>(),
            }))
            .collect::<Vec<_>>(),
        "clock": state.clock,
    })
}

fn state_from_json(v: &serde_json::Value, line: usize) -> Result<SystemState, IoError> {
    let bad = |msg: &str| IoError::Parse {
        line,
        msg: msg.to_string(),
    };
    let nodes = v["nodes"].as_array().ok_or_else(|| bad("missing nodes"))?;
    let mut out = Vec::with_capacity(nodes.len());
    for n in nodes {
        let queue: VecDeque<ClassId> = n["queue"]
            .as_array()
            .ok_or_else(|| bad("missing queue"))?
            .iter()
            .map(|c| c.as_u64().map(|c| (c as usize).saturating_sub(1)))
            .collect::<Option<_>>()
            .ok_or_else(|| bad("bad queue entry"))?;
        let servers: Vec<Option<ClassId>> = n["servers"]
            .as_array()
            .ok_or_else(|| bad("missing servers"))?
            .iter()
            .map(|s| {
                s.as_u64().map(|code| {
                    if code == 0 {
                        None
                    } else {
                        Some(code as usize - 1)
                    }
                })
            })
            .collect::<Option<_>>()
            .ok_or_else(|| bad("bad server code"))?;
        out.push(NodeState { queue, servers });
    }
    let clock = v["clock"].as_f64().ok_or_else(|| bad("missing clock"))?;
    Ok(SystemState { nodes: out, clock })
}

/// Write event tables as JSON Lines (one header per trajectory followed
/// by its records).
pub fn write_jsonl(
    path: &Path,
    schema: &EventSchema,
    trajs: &[Trajectory],
) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    for traj in trajs {
        write_jsonl_into(&mut w, schema, traj)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_jsonl_into(
    w: &mut impl Write,
    schema: &EventSchema,
    traj: &Trajectory,
) -> Result<(), IoError> {
    let schema_json = serde_json::to_string(schema).expect("schema serializes");
    let state_json = serde_json::to_string(&state_to_json(&traj.initial_state))
        .expect("state serializes");
    let meta_json = serde_json::to_string(&traj.meta).expect("meta serializes");
    writeln!(
        w,
        "{{\"schema\":{schema_json},\"initial_state\":{state_json},\"meta\":{meta_json}}}"
    )?;
    for rec in &traj.records {
        let class = match rec.class {
            Some(c) => c.to_string(),
            None => "null".to_string(),
        };
        writeln!(
            w,
            "{{\"dt\":{},\"e\":{},\"c\":{}}}",
            fmt_f64(rec.dt),
            rec.event,
            class
        )?;
    }
    Ok(())
}

/// Read one or more event tables; all tables in a file must share one
/// schema, which is returned alongside them.
pub fn read_jsonl(path: &Path) -> Result<(EventSchema, Vec<Trajectory>), IoError> {
    let reader = BufReader::new(File::open(path)?);
    let mut schema: Option<EventSchema> = None;
    let mut trajs: Vec<Trajectory> = Vec::new();
    for (i, lr) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = lr?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| IoError::Parse {
                line: line_no,
                msg: e.to_string(),
            })?;
        if value.get("schema").is_some() {
            let s: EventSchema = serde_json::from_value(value["schema"].clone()).map_err(|e| {
                IoError::Parse {
                    line: line_no,
                    msg: format!("bad schema: {e}"),
                }
            })?;
            match &schema {
                None => schema = Some(s),
                Some(existing) if *existing == s => {}
                Some(_) => {
                    return Err(IoError::Parse {
                        line: line_no,
                        msg: "tables in one file must share a schema".into(),
                    })
                }
            }
            let initial_state = state_from_json(&value["initial_state"], line_no)?;
            let meta: Meta = serde_json::from_value(value["meta"].clone()).unwrap_or_default();
            trajs.push(Trajectory {
                initial_state,
                records: Vec::new(),
                meta,
            });
        } else {
            let traj = trajs.last_mut().ok_or_else(|| IoError::Parse {
                line: line_no,
                msg: "record before any header".into(),
            })?;
            let dt = value["dt"].as_f64().ok_or_else(|| IoError::Parse {
                line: line_no,
                msg: "missing dt".into(),
            })?;
            let event = value["e"].as_u64().ok_or_else(|| IoError::Parse {
                line: line_no,
                msg: "missing e".into(),
            })? as usize;
            let class = match &value["c"] {
                serde_json::Value::Null => None,
                v => Some(v.as_u64().ok_or_else(|| IoError::Parse {
                    line: line_no,
                    msg: "bad c".into(),
                })? as usize),
            };
            traj.records.push(EventRecord { dt, event, class });
        }
    }
    let schema = schema.ok_or_else(|| IoError::Parse {
        line: 0,
        msg: "no header object found".into(),
    })?;
    Ok((schema, trajs))
}

/// Load a JSON config, rejecting unknown keys (the config types opt in
/// via `deny_unknown_fields`).
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| IoError::Config(format!("{}: {e}", path.display())))
}

/// Write the resolved config next to the outputs for reproducibility.
pub fn write_resolved_config<T: Serialize>(
    out_dir: &Path,
    name: &str,
    config: &T,
) -> Result<(), IoError> {
    let path = out_dir.join(name);
    let mut text = serde_json::to_string_pretty(config).expect("config serializes");
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Minimal CSV writer: a header row then numeric rows with 17
/// significant digits.
pub fn write_csv(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<f64>>,
) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        let cells: Vec<String> = row.iter().map(|&x| fmt_f64(x)).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}
