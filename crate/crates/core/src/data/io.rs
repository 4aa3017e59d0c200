//! Frame file formats: the native line-oriented text format and an ASCII
//! PCD subset reader.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::data::{ClassId, PointFrame};
use crate::error::{GzslError, Result};

/// Header prefix of the native frame format.
pub const FRAME_MAGIC: &str = "GZSL-PF v1";

/// Writes the native format: line 1 `GZSL-PF v1 <N>`, then N lines
/// `x y z label`. Coordinates are written with 17 significant digits, which
/// round-trips `f64` bit-exactly.
pub fn write_frame(frame: &PointFrame, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(frame.len() * 80 + 32);
    out.push_str(&format!("{FRAME_MAGIC} {}\n", frame.len()));
    for (p, label) in frame.points.iter().zip(&frame.labels) {
        out.push_str(&format!(
            "{:.16e} {:.16e} {:.16e} {}\n",
            p[0], p[1], p[2], label
        ));
    }
    let mut file = fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// Loads a frame. Files with a `.pcd` extension are parsed as ASCII PCD
/// (FIELDS must contain x, y, z and a `label` or `class` field); everything
/// else is parsed as the native format. Unlabeled (label 0) points are
/// retained; later stages filter them.
pub fn load_frame(path: &Path) -> Result<PointFrame> {
    let is_pcd = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("pcd"))
        .unwrap_or(false);
    let text = fs::read_to_string(path)?;
    let frame_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "frame".to_string());
    if is_pcd {
        parse_pcd(&text, path, frame_id)
    } else {
        parse_native(&text, path, frame_id)
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> GzslError {
    GzslError::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn parse_native(text: &str, path: &Path, frame_id: String) -> Result<PointFrame> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let rest = header
        .strip_prefix(FRAME_MAGIC)
        .ok_or_else(|| parse_err(path, 1, format!("bad header {header:?}")))?;
    let expected: usize = rest
        .trim()
        .parse()
        .map_err(|_| parse_err(path, 1, "header point count is not an integer"))?;

    let mut points = Vec::with_capacity(expected);
    let mut labels = Vec::with_capacity(expected);
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 4 {
            return Err(parse_err(
                path,
                line_no,
                format!("expected 4 tokens, got {}", tokens.len()),
            ));
        }
        let mut coord = [0.0; 3];
        for (i, tok) in tokens[..3].iter().enumerate() {
            coord[i] = tok
                .parse()
                .map_err(|_| parse_err(path, line_no, format!("non-numeric token {tok:?}")))?;
        }
        let label: ClassId = tokens[3]
            .parse()
            .map_err(|_| parse_err(path, line_no, format!("non-integer label {:?}", tokens[3])))?;
        points.push(coord);
        labels.push(label);
    }
    if points.len() != expected {
        return Err(parse_err(
            path,
            1,
            format!("point count mismatch: header says {expected}, file has {}", points.len()),
        ));
    }
    PointFrame::new(points, labels, frame_id)
}

fn parse_pcd(text: &str, path: &Path, frame_id: String) -> Result<PointFrame> {
    let mut fields: Option<Vec<String>> = None;
    let mut declared_points: Option<usize> = None;
    let mut data_start = None;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut tokens = trimmed.split_whitespace();
        let key = tokens.next().unwrap().to_ascii_uppercase();
        match key.as_str() {
            "FIELDS" => fields = Some(tokens.map(|t| t.to_ascii_lowercase()).collect()),
            "POINTS" => {
                declared_points = Some(tokens.next().and_then(|t| t.parse().ok()).ok_or_else(
                    || parse_err(path, line_no, "POINTS value is not an integer"),
                )?)
            }
            "DATA" => {
                let kind = tokens.next().unwrap_or_default().to_ascii_lowercase();
                if kind != "ascii" {
                    return Err(parse_err(
                        path,
                        line_no,
                        format!("unsupported DATA {kind:?}; only ascii is supported"),
                    ));
                }
                data_start = Some(idx + 1);
                break;
            }
            // VERSION / SIZE / TYPE / COUNT / WIDTH / HEIGHT / VIEWPOINT
            _ => {}
        }
    }

    let fields = fields.ok_or_else(|| parse_err(path, 1, "missing FIELDS line"))?;
    let expected = declared_points.ok_or_else(|| parse_err(path, 1, "missing POINTS line"))?;
    let data_start = data_start.ok_or_else(|| parse_err(path, 1, "missing DATA ascii line"))?;
    let field_index = |name: &str| fields.iter().position(|f| f == name);
    let (ix, iy, iz) = match (field_index("x"), field_index("y"), field_index("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(parse_err(path, 1, "FIELDS must contain x, y and z")),
    };
    let ilabel = field_index("label")
        .or_else(|| field_index("class"))
        .ok_or_else(|| parse_err(path, 1, "FIELDS must contain a label or class field"))?;

    let mut points = Vec::with_capacity(expected);
    let mut labels = Vec::with_capacity(expected);
    for (idx, line) in text.lines().enumerate().skip(data_start) {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != fields.len() {
            return Err(parse_err(
                path,
                line_no,
                format!("expected {} tokens, got {}", fields.len(), tokens.len()),
            ));
        }
        let parse_f64 = |i: usize| -> Result<f64> {
            tokens[i]
                .parse()
                .map_err(|_| parse_err(path, line_no, format!("non-numeric token {:?}", tokens[i])))
        };
        let point = [parse_f64(ix)?, parse_f64(iy)?, parse_f64(iz)?];
        // labels may be written as integers or integral floats
        let raw = parse_f64(ilabel)?;
        if raw < 0.0 || raw.fract() != 0.0 {
            return Err(parse_err(
                path,
                line_no,
                format!("label {raw} is not a nonnegative integer"),
            ));
        }
        points.push(point);
        labels.push(raw as ClassId);
    }
    if points.len() != expected {
        return Err(parse_err(
            path,
            1,
            format!("point count mismatch: header says {expected}, file has {}", points.len()),
        ));
    }
    PointFrame::new(points, labels, frame_id)
}
