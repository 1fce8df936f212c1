//! Line-oriented text formats.
//!
//! Landmarks: one record per line, `index x y confidence`, where `index` is
//! the 0-based landmark slot. Slots without a record get confidence 0.
//! Parameters: `key = value` lines with keys `rotation`, `translation`,
//! `log_scale` and `alpha`. `#` starts a comment in both formats. Floats are
//! written in shortest round-trip form.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DVector, Matrix2xX, Vector2, Vector3};

use super::{read_bytes, write_atomic};
use crate::error::{Error, Result};
use crate::losses::LandmarkSet;
use crate::transform::PoseShapeParams;

fn read_text(path: &Path, kind: &'static str) -> Result<String> {
    String::from_utf8(read_bytes(path)?).map_err(|_| Error::format(kind, path, "not valid UTF-8"))
}

fn strip_comment(line: &str) -> &str {
    line.split('#').next().unwrap_or("").trim()
}

pub fn write_landmarks(path: &Path, landmarks: &LandmarkSet) -> Result<()> {
    let mut s = String::from("# index x y confidence\n");
    for (i, p) in landmarks.points().column_iter().enumerate() {
        writeln!(s, "{i} {} {} {}", p[0], p[1], landmarks.confidences()[i]).expect("string write");
    }
    write_atomic(path, s.as_bytes())
}

/// Reads `count` landmark slots.
pub fn read_landmarks(path: &Path, count: usize) -> Result<LandmarkSet> {
    const KIND: &str = "landmark";
    let text = read_text(path, KIND)?;
    let mut points = Matrix2xX::zeros(count);
    let mut conf = vec![0.0; count];
    let mut seen = vec![false; count];
    for (lineno, raw) in text.lines().enumerate() {
        let line = strip_comment(raw);
        if line.is_empty() {
            continue;
        }
        let bad = |why: &str| Error::format(KIND, path, format!("line {}: {why}", lineno + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(bad("expected `index x y confidence`"));
        }
        let idx: usize = fields[0]
            .parse()
            .map_err(|_| bad("index is not a non-negative integer"))?;
        if idx >= count {
            return Err(bad(&format!("index {idx} is out of range for {count} landmarks")));
        }
        if seen[idx] {
            return Err(bad(&format!("landmark {idx} is listed twice")));
        }
        seen[idx] = true;
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("`{s}` is not a number")));
        points[(0, idx)] = num(fields[1])?;
        points[(1, idx)] = num(fields[2])?;
        conf[idx] = num(fields[3])?;
    }
    LandmarkSet::new(points, conf).map_err(|e| Error::format(KIND, path, e.to_string()))
}

/// Parses `key = value` lines, skipping blanks and comments.
pub fn parse_key_values(text: &str) -> std::result::Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = strip_comment(raw);
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected `key = value`", lineno + 1))?;
        let key = k.trim();
        if key.is_empty() {
            return Err(format!("line {}: empty key", lineno + 1));
        }
        out.push((key.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn join(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn theta_to_string(theta: &PoseShapeParams) -> String {
    format!(
        "rotation = {}\ntranslation = {}\nlog_scale = {}\nalpha = {}\n",
        join(theta.rotation.iter().copied()),
        join(theta.translation.iter().copied()),
        theta.log_scale,
        join(theta.alpha.iter().copied()),
    )
}

pub fn write_theta(path: &Path, theta: &PoseShapeParams) -> Result<()> {
    write_atomic(path, theta_to_string(theta).as_bytes())
}

pub fn parse_theta(text: &str) -> std::result::Result<PoseShapeParams, String> {
    let mut rotation = None;
    let mut translation = None;
    let mut log_scale = None;
    let mut alpha = None;
    for (key, value) in parse_key_values(text)? {
        let nums: Vec<f64> = value
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|_| format!("`{s}` is not a number")))
            .collect::<std::result::Result<_, _>>()?;
        let want = |n: usize| {
            if nums.len() == n {
                Ok(())
            } else {
                Err(format!("`{key}` needs {n} values, found {}", nums.len()))
            }
        };
        match key.as_str() {
            "rotation" => {
                want(3)?;
                rotation = Some(Vector3::new(nums[0], nums[1], nums[2]));
            }
            "translation" => {
                want(2)?;
                translation = Some(Vector2::new(nums[0], nums[1]));
            }
            "log_scale" => {
                want(1)?;
                log_scale = Some(nums[0]);
            }
            "alpha" => alpha = Some(DVector::from_vec(nums)),
            other => return Err(format!("unknown key `{other}`")),
        }
    }
    let theta = PoseShapeParams {
        rotation: rotation.ok_or("missing `rotation`")?,
        translation: translation.ok_or("missing `translation`")?,
        log_scale: log_scale.ok_or("missing `log_scale`")?,
        alpha: alpha.ok_or("missing `alpha`")?,
    };
    if !theta.is_finite() {
        return Err("parameters must be finite".into());
    }
    Ok(theta)
}

pub fn read_theta(path: &Path) -> Result<PoseShapeParams> {
    let text = read_text(path, "parameter")?;
    parse_theta(&text).map_err(|e| Error::format("parameter", path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn theta_round_trip_is_exact() {
        let theta = PoseShapeParams {
            rotation: Vector3::new(0.1, -1.0 / 3.0, 2.0f64.sqrt()),
            translation: Vector2::new(63.123456789, -1e-300),
            log_scale: std::f64::consts::LN_2,
            alpha: DVector::from_vec(vec![0.0, -0.0, 1e10, 7.25]),
        };
        let back = parse_theta(&theta_to_string(&theta)).unwrap();
        assert_eq!(
            back.to_vec().as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            theta
                .to_vec()
                .as_slice()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        );
        assert!(parse_theta("rotation = 1 2\n").is_err());
        assert!(parse_theta("speed = 3\n").is_err());
    }

    #[test]
    fn landmarks_missing_records_have_zero_confidence() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.txt");
        std::fs::write(&p, "# comment\n2 10.5 20 0.5\n0 1 2 1 # trailing\n").unwrap();
        let l = read_landmarks(&p, 3).unwrap();
        assert_eq!(l.confidences(), &[1.0, 0.0, 0.5]);
        assert_eq!(l.points()[(0, 2)], 10.5);
        std::fs::write(&p, "5 1 2 1\n").unwrap();
        assert!(read_landmarks(&p, 3).is_err());
        std::fs::write(&p, "0 1 2 -1\n").unwrap();
        assert!(read_landmarks(&p, 3).is_err());
        let set = LandmarkSet::new(Matrix2xX::from_column_slice(&[0.1, 0.2, 3.0, 4.0]), vec![1.0, 0.0]).unwrap();
        write_landmarks(&p, &set).unwrap();
        assert_eq!(read_landmarks(&p, 2).unwrap(), set);
    }
}
