//! On-disk formats: the `NDPT` raw tensor container, binary PPM images, and
//! the CRC-framed byte layout shared with checkpoints.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"NDPT";
pub const TENSOR_VERSION: u32 = 1;

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    // write-then-rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

/// Appends the CRC32 of everything written so far.
pub(crate) fn seal(mut bytes: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    bytes
}

/// Checks the trailing CRC32 and returns the bytes it covers.
pub(crate) fn unseal<'a>(path: &Path, bytes: &'a [u8]) -> Result<&'a [u8]> {
    if bytes.len() < 4 {
        return Err(format_err(path, "file too short for a checksum"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }
    Ok(body)
}

/// Little-endian cursor that reports truncation against a file path.
pub(crate) struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Reader { path, bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(format_err(
                self.path,
                format!("truncated: needed {n} bytes at offset {}", self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(format_err(
                self.path,
                format!("{} unexpected trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }

    pub(crate) fn path(&self) -> &Path {
        self.path
    }
}

/// Reads the magic and version, erroring on mismatch.
pub(crate) fn read_preamble(r: &mut Reader<'_>, magic: &[u8; 4], version: u32) -> Result<()> {
    let found = r.take(4)?;
    if found != magic {
        return Err(format_err(
            r.path(),
            format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(found), String::from_utf8_lossy(magic)),
        ));
    }
    let v = r.u32()?;
    if v != version {
        return Err(Error::Version {
            found: v,
            expected: version,
        });
    }
    Ok(())
}

fn shape_bytes(out: &mut Vec<u8>, shape: &[usize]) {
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

pub(crate) fn read_shape(r: &mut Reader<'_>) -> Result<Vec<usize>> {
    let rank = r.u8()? as usize;
    (0..rank).map(|_| Ok(r.u32()? as usize)).collect()
}

/// Encodes a tensor as an `NDPT` container (values stored as f32).
pub fn encode_tensor(tensor: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + 4 * tensor.numel());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    shape_bytes(&mut out, tensor.shape());
    for &v in tensor.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    seal(out)
}

pub fn decode_tensor(path: &Path, bytes: &[u8]) -> Result<Tensor> {
    let body = unseal(path, bytes)?;
    let mut r = Reader::new(path, body);
    read_preamble(&mut r, TENSOR_MAGIC, TENSOR_VERSION)?;
    let shape = read_shape(&mut r)?;
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| Ok(r.f32()? as f64)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Tensor::new(&shape, data).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    write_file(path, &encode_tensor(tensor))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(path, &read_file(path)?)
}

/// Binary PPM (P6) with maxval 255, from a `[3, h, w]` tensor in `[0, 1]`.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::InvalidArgument(format!("PPM needs a [3, h, w] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = image.data()[(c * h + y) * w + x];
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

/// Decodes a binary PPM (P6, 8- or 16-bit) into `[3, h, w]` with values in `[0, 1]`.
pub fn decode_ppm(path: &Path, bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let token = |pos: &mut usize| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(format_err(path, "truncated PPM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    if token(&mut pos)? != "P6" {
        return Err(format_err(path, "not a binary PPM (P6) file"));
    }
    let number = |pos: &mut usize, what: &str| -> Result<usize> {
        let t = token(pos)?;
        t.parse::<usize>()
            .map_err(|_| format_err(path, format!("bad PPM {what} `{t}`")))
    };
    let w = number(&mut pos, "width")?;
    let h = number(&mut pos, "height")?;
    let maxval = number(&mut pos, "maxval")?;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(format_err(path, format!("unsupported PPM geometry {w}x{h}, maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let bpp = if maxval < 256 { 1 } else { 2 };
    let need = w * h * 3 * bpp;
    if bytes.len() < pos + need {
        return Err(format_err(
            path,
            format!("truncated PPM raster: {} of {need} bytes", bytes.len().saturating_sub(pos)),
        ));
    }
    let raster = &bytes[pos..pos + need];
    let mut data = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            let k = (i * 3 + c) * bpp;
            let v = if bpp == 1 {
                raster[k] as f64
            } else {
                u16::from_be_bytes([raster[k], raster[k + 1]]) as f64
            };
            data[c * h * w + i] = v / maxval as f64;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    write_file(path, &encode_ppm(image)?)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(path, &read_file(path)?)
}

/// Reads an image by extension: `.ppm` or `.nt`.
pub fn read_image(path: &Path) -> Result<Tensor> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => read_ppm(path),
        Some("nt") => read_tensor(path),
        _ => Err(format_err(path, "unsupported image extension (expected .ppm or .nt)")),
    }
}
