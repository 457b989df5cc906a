//! Output formats: CSV tables, JSON sidecars and the raw positions dump.

use std::io::{self, Read, Write};
use std::path::Path;

use serde::Serialize;

/// Version stamped into every JSON sidecar.
pub const SCHEMA_VERSION: u32 = 1;

/// Serde adapter for extended reals: finite values stay numbers, infinities
/// become the strings `"inf"` / `"-inf"` (JSON has no infinity literal).
pub mod extended {
    use serde::de::{self, Deserializer, Visitor};
    use serde::Serializer;
    use std::fmt;

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else if x.is_nan() {
            s.serialize_str("nan")
        } else if *x > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    struct ExtVisitor;

    impl Visitor<'_> for ExtVisitor {
        type Value = f64;

        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("a number or one of \"inf\", \"-inf\", \"nan\"")
        }

        fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
            Ok(v)
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
            match v {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(E::custom(format!("unexpected extended real `{other}`"))),
            }
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        d.deserialize_any(ExtVisitor)
    }

    /// Same encoding for a sequence.
    pub mod vec {
        use serde::ser::SerializeSeq;
        use serde::{Deserialize, Deserializer, Serializer};

        #[derive(serde::Serialize, Deserialize)]
        struct Wrap(#[serde(with = "super")] f64);

        pub fn serialize<S: Serializer>(xs: &[f64], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(xs.len()))?;
            for &x in xs {
                seq.serialize_element(&Wrap(x))?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            let v: Vec<Wrap> = Vec::deserialize(d)?;
            Ok(v.into_iter().map(|w| w.0).collect())
        }
    }
}

/// Formats an extended real for CSV cells.
pub fn fmt_ext(x: f64) -> String {
    if x.is_finite() {
        format!("{x}")
    } else if x.is_nan() {
        "nan".to_string()
    } else if x > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

/// Writes a header row and numeric rows as RFC 4180 CSV.
pub fn write_csv<W: Write>(out: W, header: &[String], rows: &[Vec<f64>]) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header).map_err(io::Error::other)?;
    for row in rows {
        w.write_record(row.iter().map(|&x| fmt_ext(x))).map_err(io::Error::other)?;
    }
    w.flush()
}

pub fn write_csv_file(path: &Path, header: &[String], rows: &[Vec<f64>]) -> io::Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv(io::BufWriter::new(file), header, rows)
}

pub fn write_json_file<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    text.push('\n');
    std::fs::write(path, text)
}

/// Appends one generation to a positions dump: a little-endian `u64` count
/// followed by that many little-endian `f64` positions.
pub fn write_positions<W: Write>(out: &mut W, positions: &[f64]) -> io::Result<()> {
    out.write_all(&(positions.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(positions.len() * 8);
    for &p in positions {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    out.write_all(&buf)
}

/// Reads every generation of a positions dump.
pub fn read_positions<R: Read>(mut input: R) -> io::Result<Vec<Vec<f64>>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut out = Vec::new();
    let mut at = 0usize;
    while at < bytes.len() {
        let head = bytes
            .get(at..at + 8)
            .ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "truncated length prefix"))?;
        let len = u64::from_le_bytes(head.try_into().expect("8 bytes")) as usize;
        at += 8;
        let body = bytes
            .get(at..at + 8 * len)
            .ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "truncated generation"))?;
        out.push(
            body.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        );
        at += 8 * len;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[derive(Serialize, serde::Deserialize, Debug, PartialEq)]
    struct Ext {
        #[serde(with = "extended")]
        x: f64,
        #[serde(with = "extended::vec")]
        xs: Vec<f64>,
    }

    #[test]
    fn infinities_survive_json() {
        let v = Ext {
            x: f64::NEG_INFINITY,
            xs: vec![1.5, f64::INFINITY],
        };
        let s = serde_json::to_string(&v).unwrap();
        assert_eq!(s, r#"{"x":"-inf","xs":[1.5,"inf"]}"#);
        assert_eq!(serde_json::from_str::<Ext>(&s).unwrap(), v);
    }

    #[test]
    fn csv_quotes_headers_with_commas() {
        let mut out = Vec::new();
        write_csv(&mut out, &["a,b".to_string(), "c".to_string()], &[vec![1.0, f64::NEG_INFINITY]]).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "\"a,b\",c\n1,-inf\n");
    }

    proptest! {
        #[test]
        fn positions_dump_roundtrip(gens in proptest::collection::vec(proptest::collection::vec(-1e6f64..1e6, 0..50), 0..6)) {
            let mut buf = Vec::new();
            for g in &gens {
                write_positions(&mut buf, g).unwrap();
            }
            prop_assert_eq!(read_positions(&buf[..]).unwrap(), gens);
        }
    }

    #[test]
    fn truncated_dump_is_an_error() {
        let mut buf = Vec::new();
        write_positions(&mut buf, &[1.0, 2.0]).unwrap();
        buf.pop();
        assert!(read_positions(&buf[..]).is_err());
    }
}
