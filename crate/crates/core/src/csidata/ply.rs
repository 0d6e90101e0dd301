//! ASCII PLY (vertex x/y/z only) and whitespace-separated XYZ.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::csidata::PointCloud;
use crate::error::{Error, Result};

pub fn ply_string(cloud: &PointCloud) -> String {
    let mut s = String::with_capacity(96 + cloud.len() * 24);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", cloud.len());
    s.push_str("property float x\nproperty float y\nproperty float z\nend_header\n");
    for p in cloud.points() {
        let _ = writeln!(s, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32);
    }
    s
}

pub fn write_ply(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, ply_string(cloud))?;
    Ok(())
}

/// Reads an ASCII PLY or, when the file does not start with `ply`, an XYZ
/// file of whitespace-separated triples.
pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_point_cloud(&text).map_err(|e| match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_point_cloud(text: &str) -> Result<PointCloud> {
    let lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.clone().find(|(_, l)| !l.is_empty()) {
        None => Err(Error::Parse("empty point cloud file".into())),
        Some((_, "ply")) => parse_ply(lines),
        Some(_) => parse_xyz(lines),
    }
}

fn parse_f32(tok: &str, line: usize) -> Result<f64> {
    tok.parse::<f32>()
        .map(f64::from)
        .map_err(|_| Error::Parse(format!("line {line}: bad number {tok:?}")))
}

fn parse_ply<'a>(mut lines: impl Iterator<Item = (usize, &'a str)>) -> Result<PointCloud> {
    lines.next();
    let mut vertex_count = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    let mut header_done = false;
    for (no, line) in lines.by_ref() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            [] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", "ascii", _] => {}
            ["format", other, ..] => {
                return Err(Error::Parse(format!("line {no}: unsupported PLY format {other:?}")))
            }
            ["element", "vertex", n] => {
                vertex_count = Some(
                    n.parse::<usize>()
                        .map_err(|_| Error::Parse(format!("line {no}: bad vertex count {n:?}")))?,
                );
                in_vertex = true;
            }
            ["element", name, ..] => {
                return Err(Error::Parse(format!(
                    "line {no}: unsupported PLY element {name:?} (only \"vertex\" is read)"
                )))
            }
            ["property", "list", ..] => {
                return Err(Error::Parse(format!("line {no}: list properties are unsupported")))
            }
            ["property", _ty, name] if in_vertex => props.push(name.to_string()),
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => return Err(Error::Parse(format!("line {no}: unexpected header line {line:?}"))),
        }
    }
    if !header_done {
        return Err(Error::Parse("PLY header has no end_header".into()));
    }
    let n = vertex_count.ok_or_else(|| Error::Parse("PLY header declares no vertex element".into()))?;
    let col = |axis: &str| {
        props
            .iter()
            .position(|p| p == axis)
            .ok_or_else(|| Error::Parse(format!("PLY vertex element has no {axis:?} property")))
    };
    let cols = [col("x")?, col("y")?, col("z")?];

    let mut points = Vec::with_capacity(n);
    for (no, line) in lines {
        if points.len() == n {
            if line.is_empty() {
                continue;
            }
            return Err(Error::Parse(format!("line {no}: data beyond {n} declared vertices")));
        }
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != props.len() {
            return Err(Error::Parse(format!(
                "line {no}: expected {} values, found {}",
                props.len(),
                toks.len()
            )));
        }
        points.push([
            parse_f32(toks[cols[0]], no)?,
            parse_f32(toks[cols[1]], no)?,
            parse_f32(toks[cols[2]], no)?,
        ]);
    }
    if points.len() != n {
        return Err(Error::Parse(format!(
            "PLY declares {n} vertices but contains {}",
            points.len()
        )));
    }
    PointCloud::new(points)
}

fn parse_xyz<'a>(lines: impl Iterator<Item = (usize, &'a str)>) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (no, line) in lines {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(Error::Parse(format!("line {no}: expected 3 values, found {}", toks.len())));
        }
        points.push([parse_f32(toks[0], no)?, parse_f32(toks[1], no)?, parse_f32(toks[2], no)?]);
    }
    PointCloud::new(points)
}
