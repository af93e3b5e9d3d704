//! Deterministic JSON output: keys sorted, every float rendered as
//! C-style `%.12e`, so identical runs produce byte-identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;

#[derive(Debug, Clone)]
pub enum JVal {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    Arr(Vec<JVal>),
    Obj(BTreeMap<String, JVal>),
}

impl JVal {
    pub fn obj() -> BTreeMap<String, JVal> {
        BTreeMap::new()
    }

    pub fn floats(values: impl IntoIterator<Item = f64>) -> JVal {
        JVal::Arr(values.into_iter().map(JVal::Float).collect())
    }

    pub fn ints(values: impl IntoIterator<Item = i64>) -> JVal {
        JVal::Arr(values.into_iter().map(JVal::Int).collect())
    }
}

/// C-style `%.12e`: 12 fractional digits, `e`, explicit sign, at least a
/// two-digit exponent. Zero (either sign) prints as `0.000000000000e+00`.
pub fn format_e12(x: f64) -> String {
    assert!(x.is_finite(), "refusing to serialize a non-finite float");
    if x == 0.0 {
        return "0.000000000000e+00".into();
    }
    let raw = format!("{:.12e}", x);
    let (mantissa, exponent) = raw.split_once('e').expect("exponential format");
    let (sign, digits) = match exponent.strip_prefix('-') {
        Some(d) => ('-', d),
        None => ('+', exponent),
    };
    format!("{mantissa}e{sign}{digits:0>2}")
}

fn escape_into(out: &mut String, s: &str) {
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => {
                let _ = write!(out, "\\u{:04x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push('"');
}

fn write_value(out: &mut String, value: &JVal, indent: usize) {
    match value {
        JVal::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        JVal::Int(i) => {
            let _ = write!(out, "{i}");
        }
        JVal::Float(x) => out.push_str(&format_e12(*x)),
        JVal::Str(s) => escape_into(out, s),
        JVal::Arr(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push('\n');
                out.push_str(&"  ".repeat(indent + 1));
                write_value(out, item, indent + 1);
            }
            out.push('\n');
            out.push_str(&"  ".repeat(indent));
            out.push(']');
        }
        JVal::Obj(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            out.push('{');
            for (i, (key, item)) in map.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push('\n');
                out.push_str(&"  ".repeat(indent + 1));
                escape_into(out, key);
                out.push_str(": ");
                write_value(out, item, indent + 1);
            }
            out.push('\n');
            out.push_str(&"  ".repeat(indent));
            out.push('}');
        }
    }
}

/// Renders the value tree with a trailing newline.
pub fn render(value: &JVal) -> String {
    let mut out = String::new();
    write_value(&mut out, value, 0);
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn e12_matches_c_conventions() {
        assert_eq!(format_e12(0.0), "0.000000000000e+00");
        assert_eq!(format_e12(-0.0), "0.000000000000e+00");
        assert_eq!(format_e12(1.0), "1.000000000000e+00");
        assert_eq!(format_e12(-123.456), "-1.234560000000e+02");
        assert_eq!(format_e12(1e-5), "1.000000000000e-05");
        assert_eq!(format_e12(3.5e120), "3.500000000000e+120");
    }

    #[test]
    fn keys_render_sorted() {
        let mut obj = JVal::obj();
        obj.insert("zeta".into(), JVal::Int(1));
        obj.insert("alpha".into(), JVal::Bool(true));
        let text = render(&JVal::Obj(obj));
        let alpha = text.find("alpha").unwrap();
        let zeta = text.find("zeta").unwrap();
        assert!(alpha < zeta);
    }
}
