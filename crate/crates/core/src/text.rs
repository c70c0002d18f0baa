//! Shared helpers for the line-oriented text formats.

/// Formats a float with 17 significant digits, which round-trips every
/// finite `f64` exactly and prints identically on every platform.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn fmt_opt_f64(x: Option<f64>) -> String {
    x.map_or_else(|| "none".to_string(), fmt_f64)
}

pub fn parse_opt_f64(s: &str) -> Result<Option<f64>, std::num::ParseFloatError> {
    if s == "none" {
        Ok(None)
    } else {
        s.parse().map(Some)
    }
}
