//! Number formatting and plain-text tables for experiment reports.
//! Metrics in `[0, 1]` are rendered as points (×100) with one decimal.

/// `0.491 → "49.1"`.
pub fn fmt_points(x: f64) -> String {
    format!("{:.1}", x * 100.0)
}

/// Signed difference in points: `"+0.1"`, `"-6.5"`. A difference that
/// rounds to zero renders as `"0.0"` without a sign.
pub fn fmt_delta(d: f64) -> String {
    let s = format!("{:.1}", d * 100.0);
    if s == "0.0" || s == "-0.0" {
        "0.0".into()
    } else if d > 0.0 {
        format!("+{s}")
    } else {
        s
    }
}

/// Parameter counts in millions: `83_512_000 → "83.5"`.
pub fn fmt_millions(n: usize) -> String {
    format!("{:.1}", n as f64 / 1e6)
}

/// A fraction as a percentage with one decimal.
pub fn fmt_percent(f: f64) -> String {
    format!("{:.1}", f * 100.0)
}

/// Mean and min–max spread in points: `"41.0 (40.0–42.0)"`.
pub fn fmt_mean_spread(values: &[f64]) -> Option<String> {
    let s = Spread::of(values)?;
    Some(if values.len() == 1 { fmt_points(s.mean) } else { format!("{} ({}–{})", fmt_points(s.mean), fmt_points(s.min), fmt_points(s.max)) })
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Option<Spread> {
        if values.is_empty() {
            return None;
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some(Spread { mean, min, max })
    }
}

/// Left-aligned first column, right-aligned rest, two-space gutters.
pub fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut width: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate().take(cols) {
            width[i] = width[i].max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (i, c) in cells.iter().enumerate() {
            let pad = width[i] - c.chars().count();
            if i > 0 {
                s.push_str("  ");
                s.push_str(&" ".repeat(pad));
                s.push_str(c);
            } else {
                s.push_str(c);
                s.push_str(&" ".repeat(pad));
            }
        }
        s.trim_end().to_owned()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    out.push_str(&width.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

/// Minimal CSV quoting: fields with commas, quotes or newlines are quoted.
pub fn csv_row(fields: &[String]) -> String {
    fields.iter().map(|f| if f.contains([',', '"', '\n']) { format!("\"{}\"", f.replace('"', "\"\"")) } else { f.clone() }).collect::<Vec<_>>().join(",")
}
