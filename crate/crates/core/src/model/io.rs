//! Little-endian weight file.
//!
//! Header: magic `YD12`, u16 version, u16 scale code, u32 class count,
//! u32 record count. Each record: u32 layer id, u8 dtype code, u8 tensor
//! role code, u8 rank, rank x u32 extents, then the payload.

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig, Scale};
use crate::error::{Error, Result};
use crate::nn::{Module, ParamKind};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"YD12";
pub const FORMAT_VERSION: u16 = 1;

fn records<T: Element>(model: &Model<T>) -> Vec<(usize, &crate::nn::Param<T>)> {
    model
        .nodes
        .iter()
        .flat_map(|n| n.op.params().into_iter().map(move |p| (n.id, p)))
        .collect()
}

pub fn to_bytes<T: Element>(model: &Model<T>) -> Vec<u8> {
    let recs = records(model);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&model.cfg.scale.code().to_le_bytes());
    out.extend_from_slice(&(model.cfg.nc as u32).to_le_bytes());
    out.extend_from_slice(&(recs.len() as u32).to_le_bytes());
    for (layer, p) in recs {
        out.extend_from_slice(&(layer as u32).to_le_bytes());
        out.push(T::DTYPE.code());
        out.push(p.kind().code());
        out.push(p.shape().len() as u8);
        for &e in p.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in p.value().data() {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn save_weights<T: Element>(model: &Model<T>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    layer: Option<usize>,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Load {
                layer: self.layer,
                msg: format!("file truncated at byte {} (needed {n} more)", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn from_bytes<T: Element>(bytes: &[u8]) -> Result<Model<T>> {
    let load = |layer: Option<usize>, msg: String| Error::Load { layer, msg };
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        layer: None,
    };
    if r.take(4)? != MAGIC {
        return Err(load(None, "bad magic (not a YD12 weight file)".into()));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(load(None, format!("unsupported format version {version}")));
    }
    let code = r.u16()?;
    let scale = Scale::from_code(code).ok_or_else(|| load(None, format!("unknown scale code {code}")))?;
    let nc = r.u32()? as usize;
    let count = r.u32()? as usize;
    let mut model = Model::<T>::new(ModelConfig::new(scale).with_nc(nc), 0).map_err(|e| load(None, e.to_string()))?;
    let expected: Vec<(usize, &'static str)> = model.nodes.iter().flat_map(|n| {
        let kind = n.op.kind();
        std::iter::repeat_n((n.id, kind), n.op.params().len())
    }).collect();
    if count != expected.len() {
        return Err(load(
            None,
            format!("file has {count} tensors, a {scale} model needs {}", expected.len()),
        ));
    }
    let mut values = Vec::with_capacity(count);
    for (i, &(want_layer, kind)) in expected.iter().enumerate() {
        r.layer = Some(want_layer);
        let layer = r.u32()? as usize;
        if layer != want_layer {
            return Err(load(Some(want_layer), format!("{kind}: record {i} belongs to layer {layer}")));
        }
        let dtype = DType::from_code(r.u8()?);
        if dtype != Some(T::DTYPE) {
            return Err(load(Some(layer), format!("{kind}: record {i} has dtype {dtype:?}, expected {}", T::DTYPE)));
        }
        let role = ParamKind::from_code(r.u8()?).ok_or_else(|| load(Some(layer), format!("{kind}: bad role code")))?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * T::DTYPE.size_of())?;
        let data = payload.chunks_exact(T::DTYPE.size_of()).map(T::read_le).collect();
        let t = Tensor::from_vec(shape, data).map_err(|e| load(Some(layer), format!("{kind}: {e}")))?;
        values.push((layer, kind, role, t));
    }
    if r.pos != bytes.len() {
        return Err(load(None, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    for (p, (layer, kind, role, t)) in model.params_mut().into_iter().zip(values) {
        if p.kind() != role || p.shape() != t.shape() {
            return Err(load(
                Some(layer),
                format!(
                    "{kind}: expected {:?} {:?}, file has {:?} {:?}",
                    p.kind(),
                    p.shape(),
                    role,
                    t.shape()
                ),
            ));
        }
        p.set(t)?;
    }
    Ok(model)
}

pub fn load_weights<T: Element>(path: &Path) -> Result<Model<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
