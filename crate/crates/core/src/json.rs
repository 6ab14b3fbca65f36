//! Canonical JSON: sorted object keys, floats in 17-significant-digit
//! scientific notation, compact separators, trailing newline.

use std::io;

use serde::Serialize;
use serde_json::ser::Formatter;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

struct FixedFloat;

impl Formatter for FixedFloat {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, f64::from(value))
    }
}

pub fn to_canonical_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    // Round-trip through Value so every map is key-sorted.
    let value = serde_json::to_value(value).map_err(|e| Error::Data(e.to_string()))?;
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, FixedFloat);
    value
        .serialize(&mut ser)
        .map_err(|e| Error::Data(e.to_string()))?;
    out.push(b'\n');
    Ok(String::from_utf8(out).expect("serde_json emits UTF-8"))
}

/// Hex SHA-256 of the canonical JSON text of `value`.
pub fn canonical_hash<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let text = to_canonical_string(value)?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

/// Float text used in CSV reports: same 17-digit scientific form.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn keys_sorted_and_floats_fixed() {
        let mut m = HashMap::new();
        m.insert("zeta", 0.5);
        m.insert("alpha", 0.1);
        let s = to_canonical_string(&m).unwrap();
        assert_eq!(
            s,
            "{\"alpha\":1.0000000000000001e-1,\"zeta\":5.0000000000000000e-1}\n"
        );
        let back: HashMap<String, f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(back["alpha"].to_bits(), 0.1f64.to_bits());
    }
}
