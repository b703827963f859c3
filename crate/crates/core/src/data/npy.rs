//! Reading and writing NPY arrays (format versions 1.0 through 3.0).

use std::io::{Read, Seek, Write};

/// Element storage of a parsed array.
#[derive(Clone, Debug, PartialEq)]
pub enum NpyData {
    U8(Vec<u8>),
    I64(Vec<i64>),
    F32(Vec<f32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NpyArray {
    pub descr: String,
    pub shape: Vec<usize>,
    pub data: NpyData,
}

#[derive(Debug, thiserror::Error)]
pub enum NpyError {
    #[error("not an NPY file (bad magic)")]
    Magic,
    #[error("unsupported NPY version {0}.{1}")]
    Version(u8, u8),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("unsupported dtype `{0}`")]
    Dtype(String),
    #[error("Fortran-ordered arrays are not supported")]
    FortranOrder,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn header_value<'a>(header: &'a str, key: &str) -> Result<&'a str, NpyError> {
    let pat = format!("'{key}':");
    let start = header
        .find(&pat)
        .ok_or_else(|| NpyError::Header(format!("missing key `{key}`")))?
        + pat.len();
    Ok(header[start..].trim_start())
}

fn parse_header(header: &str) -> Result<(String, bool, Vec<usize>), NpyError> {
    let descr = header_value(header, "descr")?;
    let descr = descr
        .strip_prefix('\'')
        .and_then(|s| s.split('\'').next())
        .ok_or_else(|| NpyError::Header("descr is not a string".into()))?
        .to_string();
    let fortran = header_value(header, "fortran_order")?.starts_with("True");
    let shape = header_value(header, "shape")?;
    let inner = shape
        .strip_prefix('(')
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| NpyError::Header("shape is not a tuple".into()))?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| NpyError::Header(format!("bad dimension `{s}`"))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((descr, fortran, shape))
}

/// Parses one NPY stream.
pub fn read_npy(mut r: impl Read) -> Result<NpyArray, NpyError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic[..6] != b"\x93NUMPY" {
        return Err(NpyError::Magic);
    }
    let (major, minor) = (magic[6], magic[7]);
    let header_len = match major {
        1 => {
            let mut b = [0u8; 2];
            r.read_exact(&mut b)?;
            u16::from_le_bytes(b) as usize
        }
        2 | 3 => {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            u32::from_le_bytes(b) as usize
        }
        _ => return Err(NpyError::Version(major, minor)),
    };
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)?;
    let header = String::from_utf8_lossy(&header);
    let (descr, fortran, shape) = parse_header(&header)?;
    if fortran && shape.iter().filter(|&&d| d > 1).count() > 1 {
        return Err(NpyError::FortranOrder);
    }
    let numel: usize = shape.iter().product();
    let (kind, width) = match descr.as_bytes() {
        [b'|' | b'<' | b'=', k, w @ ..] => (*k, std::str::from_utf8(w).ok().and_then(|w| w.parse::<usize>().ok())),
        _ => return Err(NpyError::Dtype(descr)),
    };
    let width = width.ok_or_else(|| NpyError::Dtype(descr.clone()))?;
    let mut raw = vec![0u8; numel * width];
    r.read_exact(&mut raw)?;
    let data = match (kind, width) {
        (b'u', 1) => NpyData::U8(raw),
        (b'i', 1) => NpyData::I64(raw.iter().map(|&b| i64::from(b as i8)).collect()),
        (b'u', 2) => NpyData::I64(raw.chunks_exact(2).map(|b| i64::from(u16::from_le_bytes([b[0], b[1]]))).collect()),
        (b'i', 2) => NpyData::I64(raw.chunks_exact(2).map(|b| i64::from(i16::from_le_bytes([b[0], b[1]]))).collect()),
        (b'u', 4) => NpyData::I64(raw.chunks_exact(4).map(|b| i64::from(u32::from_le_bytes(b.try_into().unwrap()))).collect()),
        (b'i', 4) => NpyData::I64(raw.chunks_exact(4).map(|b| i64::from(i32::from_le_bytes(b.try_into().unwrap()))).collect()),
        (b'i', 8) | (b'u', 8) => NpyData::I64(raw.chunks_exact(8).map(|b| i64::from_le_bytes(b.try_into().unwrap())).collect()),
        (b'f', 4) => NpyData::F32(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect()),
        _ => return Err(NpyError::Dtype(descr)),
    };
    Ok(NpyArray { descr, shape, data })
}

fn write_with_header(mut w: impl Write, descr: &str, shape: &[usize], payload: &[u8]) -> std::io::Result<()> {
    let dims = match shape {
        [d] => format!("({d},)"),
        _ => format!("({})", shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")),
    };
    let mut header = format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': {dims}, }}");
    // magic(6) + version(2) + len(2) + header + '\n' is padded to a multiple of 64
    let total = 10 + header.len() + 1;
    header.push_str(&" ".repeat((64 - total % 64) % 64));
    header.push('\n');
    w.write_all(b"\x93NUMPY\x01\x00")?;
    w.write_all(&(header.len() as u16).to_le_bytes())?;
    w.write_all(header.as_bytes())?;
    w.write_all(payload)
}

pub fn write_npy_u8(w: impl Write, shape: &[usize], data: &[u8]) -> std::io::Result<()> {
    write_with_header(w, "|u1", shape, data)
}

pub fn write_npy_i64(w: impl Write, shape: &[usize], data: &[i64]) -> std::io::Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_with_header(w, "<i8", shape, &bytes)
}

pub fn write_npy_f32(w: impl Write, shape: &[usize], data: &[f32]) -> std::io::Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_with_header(w, "<f4", shape, &bytes)
}

/// Writes a ZIP archive of `(name, npy bytes)` members, uncompressed, as `np.savez` does.
pub fn write_npz(w: impl Write + Seek, members: &[(&str, Vec<u8>)]) -> Result<(), zip::result::ZipError> {
    let mut zw = zip::ZipWriter::new(w);
    let opts = zip::write::SimpleFileOptions::default().compression_method(zip::CompressionMethod::Stored);
    for (name, bytes) in members {
        zw.start_file(format!("{name}.npy"), opts)?;
        zw.write_all(bytes)?;
    }
    zw.finish()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn u8_round_trip_and_header_alignment() {
        let mut buf = Vec::new();
        write_npy_u8(&mut buf, &[2, 3], &[1, 2, 3, 4, 5, 255]).unwrap();
        let header_len = u16::from_le_bytes([buf[8], buf[9]]) as usize;
        assert_eq!((10 + header_len) % 64, 0);
        let a = read_npy(buf.as_slice()).unwrap();
        assert_eq!(a.shape, vec![2, 3]);
        assert_eq!(a.data, NpyData::U8(vec![1, 2, 3, 4, 5, 255]));
    }

    #[test]
    fn one_dimensional_and_integer_labels() {
        let mut buf = Vec::new();
        write_npy_i64(&mut buf, &[3], &[0, 7, 2]).unwrap();
        let a = read_npy(buf.as_slice()).unwrap();
        assert_eq!(a.shape, vec![3]);
        assert_eq!(a.data, NpyData::I64(vec![0, 7, 2]));
    }

    #[test]
    fn parses_numpy_written_header() {
        // header as produced by numpy 1.x for np.zeros((2,1), dtype=np.uint8)
        let dict = "{'descr': '|u1', 'fortran_order': False, 'shape': (2, 1), }";
        let mut header = dict.to_string();
        header.push_str(&" ".repeat(128 - 10 - dict.len() - 1));
        header.push('\n');
        let mut buf = b"\x93NUMPY\x01\x00".to_vec();
        buf.extend((header.len() as u16).to_le_bytes());
        buf.extend(header.as_bytes());
        buf.extend([4, 9]);
        let a = read_npy(buf.as_slice()).unwrap();
        assert_eq!(a.shape, vec![2, 1]);
        assert_eq!(a.data, NpyData::U8(vec![4, 9]));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(read_npy(&b"NOTNUMPY\0\0"[..]), Err(NpyError::Magic)));
        let mut buf = Vec::new();
        write_with_header(&mut buf, "<c16", &[1], &[0; 16]).unwrap();
        assert!(matches!(read_npy(buf.as_slice()), Err(NpyError::Dtype(_))));
        let mut buf = Vec::new();
        write_npy_u8(&mut buf, &[4], &[1, 2, 3, 4]).unwrap();
        assert!(read_npy(&buf[..buf.len() - 1]).is_err());
    }
}
