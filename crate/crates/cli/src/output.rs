//! Human-readable renderings of API payloads. With `--json` the payload is
//! printed as received.

use std::io::{self, Write};

use serde_json::Value;

use crate::ClientError;

type Result = std::result::Result<(), crate::RunError>;

fn parse(body: &str) -> std::result::Result<Value, ClientError> {
    Ok(serde_json::from_str(body)?)
}

fn raw(out: &mut dyn Write, body: &str) -> io::Result<()> {
    writeln!(out, "{body}")
}

fn s(v: &Value) -> &str {
    v.as_str().unwrap_or("")
}

fn table(out: &mut dyn Write, header: &[&str], rows: &[Vec<String>]) -> io::Result<()> {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |out: &mut dyn Write, cells: Vec<&str>| -> io::Result<()> {
        let mut text = String::new();
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            if i + 1 == cells.len() {
                text.push_str(cell);
            } else {
                text.push_str(&format!("{cell:<w$}  "));
            }
        }
        writeln!(out, "{}", text.trim_end())
    };
    line(out, header.to_vec())?;
    for row in rows {
        line(out, row.iter().map(String::as_str).collect())?;
    }
    Ok(())
}

pub fn record(out: &mut dyn Write, body: &str, json: bool) -> Result {
    if json {
        return Ok(raw(out, body)?);
    }
    let r = parse(body)?;
    writeln!(out, "{} {} {}", s(&r["id"]), s(&r["spec"]["meta"]["name"]), s(&r["status"]))?;
    Ok(())
}

pub fn record_detail(out: &mut dyn Write, body: &str, json: bool) -> Result {
    if json {
        return Ok(raw(out, body)?);
    }
    let r = parse(body)?;
    writeln!(out, "id:        {}", s(&r["id"]))?;
    writeln!(out, "name:      {}", s(&r["spec"]["meta"]["name"]))?;
    writeln!(out, "namespace: {}", s(&r["spec"]["meta"]["namespace"]))?;
    writeln!(out, "status:    {}", s(&r["status"]))?;
    writeln!(out, "image:     {}", s(&r["resolved_image"]))?;
    if let Some(tasks) = r["spec"]["spec"].as_object() {
        for (role, t) in tasks {
            writeln!(out, "task:      {role} x{} {}", t["replicas"], s(&t["resources"]))?;
        }
    }
    if let Some(p) = r["placement"].as_object() {
        let nodes: Vec<String> = p.iter().map(|(t, n)| format!("{t}@{}", s(n))).collect();
        writeln!(out, "placement: {}", nodes.join(" "))?;
    }
    writeln!(out, "events:")?;
    for e in r["events"].as_array().into_iter().flatten() {
        let late = if e["late"].as_bool() == Some(true) { " (late)" } else { "" };
        writeln!(out, "  {} {} {}{late}", e["timestamp"], s(&e["kind"]), s(&e["detail"]))?;
    }
    let metrics = r["metrics"].as_array().map(Vec::len).unwrap_or(0);
    if metrics > 0 {
        writeln!(out, "metrics:")?;
        for m in r["metrics"].as_array().into_iter().flatten() {
            writeln!(out, "  {} step={} {}", s(&m["key"]), m["step"], m["value"])?;
        }
    }
    Ok(())
}

pub fn experiment_list(out: &mut dyn Write, body: &str, json: bool) -> Result {
    if json {
        return Ok(raw(out, body)?);
    }
    let list = parse(body)?;
    let rows: Vec<Vec<String>> = list
        .as_array()
        .into_iter()
        .flatten()
        .map(|e| {
            vec![s(&e["id"]).into(), s(&e["name"]).into(), s(&e["namespace"]).into(), s(&e["status"]).into(), e["created_at"].to_string()]
        })
        .collect();
    Ok(table(out, &["ID", "NAME", "NAMESPACE", "STATUS", "CREATED"], &rows)?)
}

pub fn template_list(out: &mut dyn Write, body: &str, json: bool) -> Result {
    if json {
        return Ok(raw(out, body)?);
    }
    let rows: Vec<Vec<String>> = parse(body)?
        .as_array()
        .into_iter()
        .flatten()
        .map(|t| vec![s(&t["name"]).into(), s(&t["author"]).into(), s(&t["description"]).into()])
        .collect();
    Ok(table(out, &["NAME", "AUTHOR", "DESCRIPTION"], &rows)?)
}

pub fn environment_list(out: &mut dyn Write, body: &str, json: bool) -> Result {
    if json {
        return Ok(raw(out, body)?);
    }
    let rows: Vec<Vec<String>> = parse(body)?
        .as_array()
        .into_iter()
        .flatten()
        .map(|e| vec![s(&e["name"]).into(), s(&e["image"]).into()])
        .collect();
    Ok(table(out, &["NAME", "IMAGE"], &rows)?)
}

pub fn named(out: &mut dyn Write, body: &str, what: &str, json: bool) -> Result {
    if json {
        return Ok(raw(out, body)?);
    }
    writeln!(out, "{what} {}", s(&parse(body)?["name"]))?;
    Ok(())
}

pub fn pretty(out: &mut dyn Write, body: &str, json: bool) -> Result {
    if json {
        return Ok(raw(out, body)?);
    }
    writeln!(out, "{}", serde_json::to_string_pretty(&parse(body)?).map_err(ClientError::from)?)?;
    Ok(())
}

pub fn cluster(out: &mut dyn Write, body: &str, json: bool) -> Result {
    if json {
        return Ok(raw(out, body)?);
    }
    let c = parse(body)?;
    writeln!(out, "clock: {} ms", c["clock"])?;
    let rows: Vec<Vec<String>> = c["nodes"]
        .as_array()
        .into_iter()
        .flatten()
        .map(|n| {
            let tasks = n["running_tasks"].as_array().map(Vec::len).unwrap_or(0);
            vec![s(&n["node_id"]).into(), s(&n["capacity"]).into(), s(&n["allocated"]).into(), tasks.to_string()]
        })
        .collect();
    table(out, &["NODE", "CAPACITY", "ALLOCATED", "TASKS"], &rows)?;
    let queue: Vec<&str> = c["queue"].as_array().into_iter().flatten().map(s).collect();
    writeln!(out, "running: {}", c["running"].as_object().map(|m| m.len()).unwrap_or(0))?;
    writeln!(out, "queued:  {}", if queue.is_empty() { "-".to_string() } else { queue.join(" ") })?;
    Ok(())
}
