//! Point-cloud text formats.
//!
//! XYZ: one point per line, `x y z` or `x y z r g b` with colors in
//! [0, 255] (rescaled to [0, 1] attributes). OFF: `OFF` header line, a
//! counts line, that many vertex lines; faces are ignored. Non-finite
//! coordinates are rejected with the offending line number.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use crate::spatial::PointCloud;

pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_cloud(&text)
}

/// Parses either format, deciding by the `OFF` header.
pub fn parse_cloud(text: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate().peekable();
    while let Some((_, l)) = lines.peek() {
        if l.trim().is_empty() {
            lines.next();
        } else {
            break;
        }
    }
    match lines.peek() {
        Some((_, l)) if l.trim() == "OFF" => parse_off(text),
        Some(_) => parse_xyz(text),
        None => Err(Error::Parse {
            line: 1,
            message: "empty point cloud file".into(),
        }),
    }
}

fn parse_value(token: &str, line: usize) -> Result<f64> {
    let v: f64 = token.parse().map_err(|_| Error::Parse {
        line,
        message: format!("\"{token}\" is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            message: format!("non-finite coordinate \"{token}\""),
        });
    }
    Ok(v)
}

fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut coords = Vec::new();
    let mut colors = Vec::new();
    let mut width: Option<usize> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 3 && tokens.len() != 6 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 3 or 6 columns, found {}", tokens.len()),
            });
        }
        match width {
            None => width = Some(tokens.len()),
            Some(w) if w != tokens.len() => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("inconsistent column count ({} after {w})", tokens.len()),
                })
            }
            _ => {}
        }
        for t in &tokens[..3] {
            coords.push(parse_value(t, line_no)?);
        }
        for t in &tokens[3..] {
            let c = parse_value(t, line_no)?;
            if !(0.0..=255.0).contains(&c) {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("color component {c} outside [0, 255]"),
                });
            }
            colors.push(c / 255.0);
        }
    }
    let n = coords.len() / 3;
    if n == 0 {
        return Err(Error::Parse {
            line: 1,
            message: "no points in file".into(),
        });
    }
    let coords = Tensor::new(vec![n, 3], coords)?;
    if colors.is_empty() {
        PointCloud::new(coords)
    } else {
        PointCloud::with_attrs(coords, Tensor::new(vec![n, 3], colors)?)
    }
}

fn parse_off(text: &str) -> Result<PointCloud> {
    let mut data_lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());

    let (header_line, header) = data_lines.next().ok_or(Error::Parse {
        line: 1,
        message: "missing OFF header".into(),
    })?;
    if header != "OFF" {
        return Err(Error::Parse {
            line: header_line,
            message: format!("expected OFF header, found \"{header}\""),
        });
    }

    let (counts_line, counts) = data_lines.next().ok_or(Error::Parse {
        line: header_line,
        message: "missing OFF counts line".into(),
    })?;
    let tokens: Vec<&str> = counts.split_whitespace().collect();
    if tokens.len() < 2 {
        return Err(Error::Parse {
            line: counts_line,
            message: "counts line needs at least vertex and face counts".into(),
        });
    }
    let n_vertices: usize = tokens[0].parse().map_err(|_| Error::Parse {
        line: counts_line,
        message: format!("bad vertex count \"{}\"", tokens[0]),
    })?;
    if n_vertices == 0 {
        return Err(Error::Parse {
            line: counts_line,
            message: "OFF file declares zero vertices".into(),
        });
    }

    let mut coords = Vec::with_capacity(n_vertices * 3);
    for _ in 0..n_vertices {
        let (line_no, line) = data_lines.next().ok_or(Error::Parse {
            line: counts_line,
            message: format!("expected {n_vertices} vertex lines"),
        })?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() < 3 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("vertex line needs 3 coordinates, found {}", tokens.len()),
            });
        }
        for t in &tokens[..3] {
            coords.push(parse_value(t, line_no)?);
        }
    }
    // Remaining lines are faces; discarded.
    PointCloud::new(Tensor::new(vec![n_vertices, 3], coords)?)
}

/// Writes a cloud in XYZ form (full shortest-roundtrip precision).
pub fn save_xyz(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut out = String::new();
    for i in 0..cloud.len() {
        let p = cloud.point(i);
        out.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}
