//! Model checkpoints.
//!
//! Both encodings start with one JSON header line. `checkpoint.json` follows it
//! with a JSON line holding θ and the BN running statistics; `checkpoint.bin`
//! follows it with the same values as little-endian f64, bit for bit.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BnState, NetworkParams, NetworkSpec};

const FORMAT: &str = "wdlab-checkpoint";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    Json,
    F64Le,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    encoding: Encoding,
    epoch: usize,
    spec: NetworkSpec,
    params_len: usize,
    bn_len: usize,
}

#[derive(Serialize, Deserialize)]
struct JsonPayload {
    theta: Vec<f64>,
    bn: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub spec: NetworkSpec,
    pub params: NetworkParams,
    pub bn_state: BnState,
}

impl Checkpoint {
    pub fn write<W: Write>(&self, mut w: W, encoding: Encoding) -> Result<()> {
        let theta = self.params.flatten();
        let bn = self.bn_state.flatten();
        let header = Header {
            format: FORMAT.into(),
            version: 1,
            encoding,
            epoch: self.epoch,
            spec: self.spec.clone(),
            params_len: theta.len(),
            bn_len: bn.len(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        match encoding {
            Encoding::Json => {
                serde_json::to_writer(&mut w, &JsonPayload { theta, bn })?;
                w.write_all(b"\n")?;
            }
            Encoding::F64Le => {
                for v in theta.iter().chain(&bn) {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(r: R, path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(r);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let header_len = line.len() as u64;
        let header: Header = serde_json::from_str(line.trim_end()).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: format!("bad checkpoint header: {e}"),
        })?;
        if header.format != FORMAT {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: 0,
                msg: format!("not a checkpoint (format {:?})", header.format),
            });
        }
        let (theta, bn) = match header.encoding {
            Encoding::Json => {
                let mut rest = String::new();
                reader.read_to_string(&mut rest)?;
                let p: JsonPayload = serde_json::from_str(rest.trim_end()).map_err(|e| Error::Format {
                    path: path.to_path_buf(),
                    offset: header_len,
                    msg: e.to_string(),
                })?;
                (p.theta, p.bn)
            }
            Encoding::F64Le => {
                let mut bytes = Vec::new();
                reader.read_to_end(&mut bytes)?;
                let need = 8 * (header.params_len + header.bn_len);
                if bytes.len() != need {
                    return Err(Error::Format {
                        path: path.to_path_buf(),
                        offset: header_len + bytes.len().min(need) as u64,
                        msg: format!("payload has {} bytes, header promises {need}", bytes.len()),
                    });
                }
                let vals: Vec<f64> = bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                let (t, b) = vals.split_at(header.params_len);
                (t.to_vec(), b.to_vec())
            }
        };
        if theta.len() != header.params_len || bn.len() != header.bn_len {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: header_len,
                msg: "payload length disagrees with the header".into(),
            });
        }
        Ok(Checkpoint {
            epoch: header.epoch,
            params: NetworkParams::unflatten(&header.spec, &theta)?,
            bn_state: BnState::unflatten(&header.spec, &bn)?,
            spec: header.spec,
        })
    }

    /// Encoding chosen by extension: `.bin` is binary, anything else JSON.
    pub fn save(&self, path: &Path) -> Result<()> {
        let enc = if path.extension().is_some_and(|e| e == "bin") {
            Encoding::F64Le
        } else {
            Encoding::Json
        };
        let f = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(f), enc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::fs::File::open(path)?, path)
    }
}
