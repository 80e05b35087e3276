//! Binary checkpoint format.
//!
//! ```text
//! "FODCKPT1"
//! layer_dims=34,128,2 embed_dim=32 activation=silu [key=value ...]\n
//! parameters   f64 LE, per layer: weight (row-major) then bias
//! first moment f64 LE, same order
//! second moment f64 LE, same order
//! step         u64 LE
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};

use super::{AdamWConfig, FlowModel, Layer, OptimizerState};
use crate::error::{FodError, Result};

pub const MAGIC: &[u8; 8] = b"FODCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: FlowModel,
    pub m: Vec<Layer>,
    pub v: Vec<Layer>,
    pub step: u64,
    /// Extra `key=value` pairs from the header line, in key order.
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn optimizer(&self, config: AdamWConfig) -> OptimizerState {
        OptimizerState { config, m: self.m.clone(), v: self.v.clone(), step: self.step }
    }
}

fn write_layers<W: Write>(w: &mut W, layers: &[Layer]) -> Result<()> {
    for layer in layers {
        for part in layer.slices() {
            for v in part {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_layers<R: Read>(r: &mut R, template: &[Layer]) -> Result<Vec<Layer>> {
    let mut out: Vec<Layer> = template.iter().map(Layer::zeros_like).collect();
    let mut buf = [0u8; 8];
    for layer in &mut out {
        for part in layer.slices_mut() {
            for v in part.iter_mut() {
                r.read_exact(&mut buf).map_err(truncated)?;
                *v = f64::from_le_bytes(buf);
            }
        }
    }
    Ok(out)
}

fn truncated(e: std::io::Error) -> FodError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        FodError::Checkpoint("file is truncated".into())
    } else {
        FodError::Io(e)
    }
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    model: &FlowModel,
    opt: &OptimizerState,
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    w.write_all(MAGIC)?;
    let dims: Vec<String> = model.layer_dims().iter().map(ToString::to_string).collect();
    let mut header = format!(
        "layer_dims={} embed_dim={} activation={}",
        dims.join(","),
        model.embed_dim(),
        model.activation().name()
    );
    for (k, v) in meta {
        if k.contains([' ', '=', '\n']) || v.contains([' ', '\n']) {
            return Err(FodError::Checkpoint(format!("metadata entry '{k}' is not header-safe")));
        }
        header.push_str(&format!(" {k}={v}"));
    }
    header.push('\n');
    w.write_all(header.as_bytes())?;
    write_layers(&mut w, model.layers())?;
    write_layers(&mut w, &opt.m)?;
    write_layers(&mut w, &opt.v)?;
    w.write_all(&opt.step.to_le_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(FodError::Checkpoint("bad magic bytes".into()));
    }
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    if line.pop() != Some(b'\n') {
        return Err(FodError::Checkpoint("missing header line".into()));
    }
    let line = String::from_utf8(line).map_err(|_| FodError::Checkpoint("header is not UTF-8".into()))?;

    let mut fields = BTreeMap::new();
    for token in line.split(' ').filter(|s| !s.is_empty()) {
        let (k, v) = token
            .split_once('=')
            .ok_or_else(|| FodError::Checkpoint(format!("malformed header token '{token}'")))?;
        fields.insert(k.to_string(), v.to_string());
    }
    let take = |fields: &mut BTreeMap<String, String>, key: &str| {
        fields.remove(key).ok_or_else(|| FodError::Checkpoint(format!("header lacks '{key}'")))
    };
    let dims: Vec<usize> = take(&mut fields, "layer_dims")?
        .split(',')
        .map(|s| s.parse().map_err(|_| FodError::Checkpoint(format!("bad layer dim '{s}'"))))
        .collect::<Result<_>>()?;
    let embed_dim: usize = take(&mut fields, "embed_dim")?
        .parse()
        .map_err(|_| FodError::Checkpoint("bad embed_dim".into()))?;
    let activation = take(&mut fields, "activation")?;
    if activation != "silu" {
        return Err(FodError::Checkpoint(format!("unsupported activation '{activation}'")));
    }
    if dims.len() < 2 {
        return Err(FodError::Checkpoint("need at least two layer dims".into()));
    }

    let template: Vec<Layer> = dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
    let layers = read_layers(&mut r, &template)?;
    let model = FlowModel::from_layers(layers, embed_dim).map_err(|e| FodError::Checkpoint(e.to_string()))?;
    let m = read_layers(&mut r, &template)?;
    let v = read_layers(&mut r, &template)?;
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(truncated)?;
    let step = u64::from_le_bytes(buf);
    if r.read(&mut buf)? != 0 {
        return Err(FodError::Checkpoint("trailing bytes after step counter".into()));
    }
    Ok(Checkpoint { model, m, v, step, meta: fields })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{adamw_step, ModelConfig};

    fn trained_pair() -> (FlowModel, OptimizerState) {
        let cfg = ModelConfig { dim: 2, hidden: vec![8, 8], embed_dim: 4 };
        let mut model = FlowModel::init(&cfg, 1).unwrap();
        let mut opt = OptimizerState::new(&model, AdamWConfig::default()).unwrap();
        for i in 0..3 {
            let g = model.backward(&[0.1 * i as f64, 1.0], i, 10, &[1.0, -1.0]).unwrap();
            adamw_step(&mut model, &g, &mut opt).unwrap();
        }
        (model, opt)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (model, opt) = trained_pair();
        let meta = BTreeMap::from([("seed".to_string(), "42".to_string())]);
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &model, &opt, &meta).unwrap();
        assert!(bytes.starts_with(MAGIC));
        let header_end = bytes.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(
            std::str::from_utf8(&bytes[8..header_end]).unwrap(),
            "layer_dims=6,8,8,2 embed_dim=4 activation=silu seed=42"
        );
        let n = model.param_count();
        assert_eq!(bytes.len(), header_end + 1 + 3 * n * 8 + 8);

        let ck = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(ck.model, model);
        assert_eq!(ck.optimizer(opt.config), opt);
        assert_eq!(ck.meta, meta);

        let mut again = Vec::new();
        write_checkpoint(&mut again, &ck.model, &ck.optimizer(opt.config), &ck.meta).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn rejects_corrupt_files() {
        let (model, opt) = trained_pair();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &model, &opt, &BTreeMap::new()).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(FodError::Checkpoint(_))));
        assert!(matches!(read_checkpoint(&bytes[..bytes.len() - 3]), Err(FodError::Checkpoint(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(read_checkpoint(long.as_slice()).is_err());
    }
}
