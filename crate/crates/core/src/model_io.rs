//! Compact serde encodings for dense arrays: shape plus base64 of the
//! little-endian `f64` entries in row-major order.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Serialize, Deserialize)]
struct Encoded {
    rows: usize,
    cols: usize,
    data: String,
}

fn encode<'a>(values: impl Iterator<Item = &'a f64>, len: usize) -> String {
    let mut bytes = Vec::with_capacity(8 * len);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

fn decode<E: serde::de::Error>(enc: &Encoded) -> Result<Vec<f64>, E> {
    let bytes = STANDARD.decode(enc.data.as_bytes()).map_err(E::custom)?;
    let expected = enc.rows.checked_mul(enc.cols).and_then(|n| n.checked_mul(8)).ok_or_else(|| E::custom("shape overflow"))?;
    if bytes.len() != expected {
        return Err(E::custom(format!("expected {expected} bytes for a {}x{} matrix, found {}", enc.rows, enc.cols, bytes.len())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

pub mod matrix {
    use super::*;
    use ndarray::Array2;

    pub fn serialize<S: Serializer>(m: &Array2<f64>, s: S) -> Result<S::Ok, S::Error> {
        Encoded { rows: m.nrows(), cols: m.ncols(), data: encode(m.iter(), m.len()) }.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<f64>, D::Error> {
        let enc = Encoded::deserialize(d)?;
        let data = decode(&enc)?;
        Array2::from_shape_vec((enc.rows, enc.cols), data).map_err(serde::de::Error::custom)
    }
}

pub mod vector {
    use super::*;
    use ndarray::Array1;

    pub fn serialize<S: Serializer>(v: &Array1<f64>, s: S) -> Result<S::Ok, S::Error> {
        Encoded { rows: v.len(), cols: 1, data: encode(v.iter(), v.len()) }.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array1<f64>, D::Error> {
        let enc = Encoded::deserialize(d)?;
        if enc.cols != 1 {
            return Err(serde::de::Error::custom("vector must have one column"));
        }
        Ok(Array1::from(decode(&enc)?))
    }
}

pub mod option_matrix {
    use super::*;
    use ndarray::Array2;

    pub fn serialize<S: Serializer>(m: &Option<Array2<f64>>, s: S) -> Result<S::Ok, S::Error> {
        m.as_ref().map(|m| Encoded { rows: m.nrows(), cols: m.ncols(), data: encode(m.iter(), m.len()) }).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Array2<f64>>, D::Error> {
        match Option::<Encoded>::deserialize(d)? {
            None => Ok(None),
            Some(enc) => {
                let data = decode(&enc)?;
                Array2::from_shape_vec((enc.rows, enc.cols), data).map(Some).map_err(serde::de::Error::custom)
            }
        }
    }
}
