//! Checkpoint file: one JSON header line, then the parameters as raw
//! little-endian 64-bit floats.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Segment};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    dtype: String,
    config: ModelConfig,
    n_params: usize,
    segments: Vec<Segment>,
}

const FORMAT: &str = "factoid-forge-ckpt-v1";

impl<F: Scalar> Model<F> {
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format: FORMAT.to_owned(),
            dtype: F::DTYPE.to_owned(),
            config: self.config.clone(),
            n_params: self.params.len(),
            segments: self.layout.segments.clone(),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        out.reserve(self.params.len() * 8);
        for &p in &self.params {
            out.extend_from_slice(&p.as_f64().to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_checkpoint_reader(reader: impl Read) -> Result<Self> {
        let mut reader = BufReader::new(reader);
        let mut line = Vec::new();
        reader
            .read_until(b'\n', &mut line)
            .map_err(|e| Error::Format { what: "checkpoint", detail: e.to_string() })?;
        let header: Header = serde_json::from_slice(&line)?;
        if header.format != FORMAT {
            return Err(Error::Format { what: "checkpoint", detail: format!("unknown format {:?}", header.format) });
        }
        let mut raw = vec![0u8; header.n_params * 8];
        reader
            .read_exact(&mut raw)
            .map_err(|e| Error::Format { what: "checkpoint", detail: format!("truncated parameters: {e}") })?;
        let mut rest = [0u8; 1];
        if reader.read(&mut rest).map_err(|e| Error::Format { what: "checkpoint", detail: e.to_string() })? != 0 {
            return Err(Error::Format { what: "checkpoint", detail: "trailing bytes after parameters".into() });
        }
        let params = raw
            .chunks_exact(8)
            .map(|c| F::from_f64_lossy(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        let model = Self::from_params(header.config, params)?;
        if model.layout.segments != header.segments {
            return Err(Error::Format { what: "checkpoint", detail: "segment index does not match config".into() });
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes = self.to_checkpoint_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_reader(f)
    }
}
