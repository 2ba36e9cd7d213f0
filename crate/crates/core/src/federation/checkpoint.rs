//! Binary checkpoint of the server state.
//!
//! All integers are little-endian; floats are IEEE-754 `f64` bit patterns,
//! so a save/load round trip is exact.
//!
//! ```text
//! magic        8 bytes  "FEDBATCK"
//! version      u32      1
//! round        u64
//! layer count  u32
//! per layer:   in_dim u32, out_dim u32, activation u8 (0 relu, 1 identity),
//!              weights f64 x in_dim*out_dim (row-major, in x out),
//!              bias f64 x out_dim
//! bank flag    u8       0 none, 1 present
//! if present:  num_classes u32, feature_dim u32, then per class:
//!              present u8, and if 1: count u64, mean f64 x feature_dim
//! config len   u32, then that many bytes of UTF-8 config text
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Activation, Layer, Network};

use super::{ClassFeature, FeatureBank, ServerState};

pub const MAGIC: &[u8; 8] = b"FEDBATCK";
pub const VERSION: u32 = 1;

/// Server state plus the text of the config that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub server: ServerState,
    pub config: String,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(server: &ServerState, config: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(server.round as u64).to_le_bytes());
    let layers = server.global_net.layers();
    put_u32(&mut out, layers.len());
    for l in layers {
        put_u32(&mut out, l.in_dim());
        put_u32(&mut out, l.out_dim());
        out.push(match l.activation() {
            Activation::Relu => 0,
            Activation::Identity => 1,
        });
        put_f64s(&mut out, l.weights());
        put_f64s(&mut out, l.bias());
    }
    match &server.global_bank {
        None => out.push(0),
        Some(bank) => {
            out.push(1);
            put_u32(&mut out, bank.num_classes());
            put_u32(&mut out, bank.feature_dim());
            for c in bank.classes() {
                match c {
                    None => out.push(0),
                    Some(c) => {
                        out.push(1);
                        out.extend_from_slice(&(c.count as u64).to_le_bytes());
                        put_f64s(&mut out, &c.mean);
                    }
                }
            }
        }
    }
    put_u32(&mut out, config.len());
    out.extend_from_slice(config.as_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated: need {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.fail("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(self.fail(format!("expected flag 0 or 1, found {b}"))),
        }
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8)? != MAGIC {
        r.pos = 0;
        return Err(r.fail("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(r.fail(format!("unsupported checkpoint version {version}")));
    }
    let round = r.u64()? as usize;
    let n_layers = r.u32()?;
    let mut layers = Vec::with_capacity(n_layers.min(64));
    for _ in 0..n_layers {
        let (i, o) = (r.u32()?, r.u32()?);
        let act = match r.u8()? {
            0 => Activation::Relu,
            1 => Activation::Identity,
            b => return Err(r.fail(format!("unknown activation code {b}"))),
        };
        let n = i.checked_mul(o).ok_or_else(|| r.fail("layer size overflow"))?;
        let w = r.f64s(n)?;
        let b = r.f64s(o)?;
        layers.push(Layer::new(i, o, w, b, act).map_err(|e| r.fail(e.to_string()))?);
    }
    let global_net = Network::from_layers(layers).map_err(|e| r.fail(e.to_string()))?;
    let global_bank = if r.flag()? {
        let (nc, fd) = (r.u32()?, r.u32()?);
        let mut classes = Vec::with_capacity(nc.min(1 << 16));
        for _ in 0..nc {
            classes.push(if r.flag()? {
                let count = r.u64()? as usize;
                Some(ClassFeature {
                    count,
                    mean: r.f64s(fd)?,
                })
            } else {
                None
            });
        }
        Some(FeatureBank::from_classes(fd, classes).map_err(|e| r.fail(e.to_string()))?)
    } else {
        None
    };
    let len = r.u32()?;
    let config = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.fail("config text is not UTF-8"))?;
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes after checkpoint"));
    }
    Ok(Checkpoint {
        server: ServerState {
            round,
            global_net,
            global_bank,
        },
        config,
    })
}

pub fn save(path: impl AsRef<Path>, server: &ServerState, config: &str) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(server, config)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::FeatureAccumulator;
    use crate::tensor::Tensor;

    fn sample_state() -> ServerState {
        let net = Network::init(&[4, 3, 2], 9).unwrap();
        let mut acc = FeatureAccumulator::new(3, 3);
        acc.add(&Tensor::from_rows(&[vec![0.5, -1.0, 2.0]]).unwrap(), &[2]).unwrap();
        ServerState {
            round: 7,
            global_net: net,
            global_bank: Some(acc.finish()),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let s = sample_state();
        let bytes = encode(&s, "seed = 3\n");
        let back = decode(&bytes, Path::new("mem")).unwrap();
        assert!(back.server.global_net.bit_eq(&s.global_net));
        assert_eq!(back.server, s);
        assert_eq!(back.config, "seed = 3\n");
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let bytes = encode(&sample_state(), "");
        let p = Path::new("mem");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad, p), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(decode(&bytes[..bytes.len() - 3], p), Err(Error::Format { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode(&long, p), Err(Error::Format { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let mut s = sample_state();
        s.global_bank = None;
        save(&path, &s, "x").unwrap();
        assert_eq!(load(&path).unwrap().server, s);
        assert!(matches!(load(dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
