//! Binary checkpoint format: magic, version, config header, then named
//! shape-tagged arrays of little-endian f32. Round-trips are bit-exact.

use super::model::{DenoiserConfig, DenoiserParams};
use crate::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"ADNZCKPT";
const VERSION: u32 = 1;

pub fn save_checkpoint(params: &DenoiserParams, trained_epochs: u32, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = &params.config;
    for field in [
        cfg.image_size as u32,
        cfg.d_model as u32,
        cfg.n_self_layers as u32,
        cfg.t_max as u32,
        trained_epochs,
    ] {
        out.extend_from_slice(&field.to_le_bytes());
    }
    out.extend_from_slice(&(params.segments().len() as u32).to_le_bytes());
    for seg in params.segments() {
        let (shape, values) = params.segment(&seg.name).unwrap();
        let name = seg.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(shape.len() as u8);
        for &dim in shape {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(DenoiserParams, u32)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut reader = ByteReader { bytes: &bytes, pos: 0, path };

    let magic = reader.take(8)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {:?}",
            path.display(),
            &magic[..magic.len().min(8)]
        )));
    }
    let version = reader.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let config = DenoiserConfig {
        image_size: reader.u32()? as usize,
        d_model: reader.u32()? as usize,
        n_self_layers: reader.u32()? as usize,
        t_max: reader.u32()? as usize,
    };
    let trained_epochs = reader.u32()?;
    let n_segments = reader.u32()? as usize;

    // Read arrays, then check they line up with the layout the config implies.
    let mut arrays = Vec::with_capacity(n_segments);
    for _ in 0..n_segments {
        let name_len = reader.u16()? as usize;
        let name = String::from_utf8(reader.take(name_len)?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let ndim = reader.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(reader.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = reader.take(len * 4)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        arrays.push((name, shape, values));
    }

    let template = DenoiserParams::init(config, 0)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if arrays.len() != template.segments().len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} arrays, layout expects {}",
            path.display(),
            arrays.len(),
            template.segments().len()
        )));
    }
    let mut data = Vec::with_capacity(template.num_params());
    for (seg, (name, shape, values)) in template.segments().iter().zip(arrays) {
        if seg.name != name || seg.shape != shape {
            return Err(Error::Checkpoint(format!(
                "{}: segment {name} {shape:?} does not match layout {} {:?}",
                path.display(),
                seg.name,
                seg.shape
            )));
        }
        data.extend(values);
    }
    let params = DenoiserParams::from_parts(config, data)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok((params, trained_epochs))
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{}: truncated at byte {}",
                self.path.display(),
                self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
}
