//! Binary model file: `TCNN` magic, `u32` version, `u32` input size,
//! `u32` input channels, `u32` conv count, per conv `u32` filters and
//! `u32` kernel, `u64` parameter count, then every parameter as a
//! little-endian `f64` in layout order.

use std::io::{Read, Write};

use super::{Architecture, CnnError, CnnModel, ConvSpec};

pub const MODEL_MAGIC: &[u8; 4] = b"TCNN";
pub const MODEL_VERSION: u32 = 1;

fn u32_of(v: usize) -> Result<[u8; 4], CnnError> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| CnnError::BadModelFile(format!("{v} does not fit in u32")))
}

pub fn write_model<W: Write>(mut w: W, model: &CnnModel) -> Result<(), CnnError> {
    let arch = model.architecture();
    let mut buf = Vec::with_capacity(32 + model.num_params() * 8);
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    buf.extend_from_slice(&u32_of(arch.input_size)?);
    buf.extend_from_slice(&u32_of(arch.input_channels)?);
    buf.extend_from_slice(&u32_of(arch.convs.len())?);
    for c in &arch.convs {
        buf.extend_from_slice(&u32_of(c.filters)?);
        buf.extend_from_slice(&u32_of(c.kernel)?);
    }
    buf.extend_from_slice(&(model.num_params() as u64).to_le_bytes());
    for p in model.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CnnError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_model<R: Read>(mut r: R) -> Result<CnnModel, CnnError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(CnnError::BadModelFile("missing TCNN magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != MODEL_VERSION {
        return Err(CnnError::BadModelFile(format!("unsupported version {version}")));
    }
    let input_size = read_u32(&mut r)? as usize;
    let input_channels = read_u32(&mut r)? as usize;
    let n_convs = read_u32(&mut r)? as usize;
    if n_convs > 64 {
        return Err(CnnError::BadModelFile(format!("{n_convs} conv layers")));
    }
    let mut convs = Vec::with_capacity(n_convs);
    for _ in 0..n_convs {
        let filters = read_u32(&mut r)? as usize;
        let kernel = read_u32(&mut r)? as usize;
        convs.push(ConvSpec { filters, kernel });
    }
    let arch = Architecture {
        input_channels,
        input_size,
        convs,
    };
    let mut count = [0u8; 8];
    r.read_exact(&mut count)?;
    let count = u64::from_le_bytes(count) as usize;
    let expected = super::Layout::new(&arch)?.len;
    if count != expected {
        return Err(CnnError::BadModelFile(format!(
            "parameter count {count} does not match architecture ({expected})"
        )));
    }
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes)?;
    let params = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(CnnError::BadModelFile("trailing bytes".into()));
    }
    CnnModel::from_parts(arch, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let m = CnnModel::new(Architecture::three_layer(26), 1).unwrap();
        let mut buf = Vec::new();
        write_model(&mut buf, &m).unwrap();
        assert_eq!(&buf[..4], b"TCNN");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 26);
        assert_eq!(buf.len(), 4 + 4 * 4 + 3 * 8 + 8 + m.num_params() * 8);
        assert_eq!(read_model(&buf[..]).unwrap(), m);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let m = CnnModel::new(Architecture::three_layer(26), 1).unwrap();
        let mut buf = Vec::new();
        write_model(&mut buf, &m).unwrap();
        assert!(read_model(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_model(&bad[..]), Err(CnnError::BadModelFile(_))));
    }
}
