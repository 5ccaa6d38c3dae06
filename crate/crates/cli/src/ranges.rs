//! Parsers for list-and-range flags such as `1-10,15,20` and `10-100:10`.

use std::path::PathBuf;

pub type RpsList = Vec<f64>;
pub type CapList = Vec<usize>;

fn split_range(part: &str) -> Result<(&str, &str, Option<&str>), String> {
    let (span, step) = match part.split_once(':') {
        Some((span, step)) => (span, Some(step)),
        None => (part, None),
    };
    match span.split_once('-') {
        Some((lo, hi)) => Ok((lo, hi, step)),
        None if step.is_none() => Ok((span, span, None)),
        None => Err(format!("`{part}`: a step needs a range")),
    }
}

fn parse_num<T: std::str::FromStr>(s: &str, part: &str) -> Result<T, String> {
    s.trim().parse().map_err(|_| format!("`{part}`: `{s}` is not a number"))
}

/// Integer ranges `a-b[:step]` and single values, comma separated.
pub fn parse_caps(input: &str) -> Result<CapList, String> {
    if input.trim() == "none" {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for part in input.split(',') {
        let (lo, hi, step) = split_range(part)?;
        let lo: usize = parse_num(lo, part)?;
        let hi: usize = parse_num(hi, part)?;
        let step: usize = step.map(|s| parse_num(s, part)).transpose()?.unwrap_or(1);
        if step == 0 || lo > hi || lo == 0 {
            return Err(format!("`{part}`: malformed range"));
        }
        out.extend((lo..=hi).step_by(step));
    }
    Ok(out)
}

/// Like [`parse_caps`] but yields rates; single values may be fractional.
pub fn parse_rps(input: &str) -> Result<RpsList, String> {
    let mut out = Vec::new();
    for part in input.split(',') {
        if !part.contains('-') && !part.contains(':') {
            let v: f64 = parse_num(part, part)?;
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("`{part}`: rate must be positive"));
            }
            out.push(v);
            continue;
        }
        out.extend(parse_caps(part)?.into_iter().map(|v| v as f64));
    }
    if out.is_empty() {
        return Err("empty rate list".into());
    }
    Ok(out)
}

pub fn parse_variant(input: &str) -> Result<(String, PathBuf), String> {
    match input.split_once('=') {
        Some((label, path)) if !label.is_empty() && !path.is_empty() => Ok((label.to_string(), PathBuf::from(path))),
        _ => Err(format!("`{input}`: expected LABEL=FILE")),
    }
}
