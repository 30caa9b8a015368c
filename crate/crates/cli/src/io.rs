//! Binary tensor container and 8-bit PGM/PPM images.
//!
//! Container layout, little-endian: `"UIM1"`, version `u32`, tensor count
//! `u32`; per tensor a `u16` name length, the UTF-8 name, `u32` ndim, `u32`
//! dims and `f32` values; then a CRC32 of every preceding byte.

use std::fs;
use std::path::Path;

use swaptrain::models::{Model, ParamSet};
use swaptrain::{Error, Result, Tensor};

pub const MAGIC: &[u8; 4] = b"UIM1";
pub const VERSION: u32 = 1;

pub fn encode_tensors(entries: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(entries.len()).map_err(|_| too_many("tensors"))?.to_le_bytes());
    for (name, t) in entries {
        let len = u16::try_from(name.len()).map_err(|_| too_many("name bytes"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&u32::try_from(d).map_err(|_| too_many("elements per axis"))?.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn too_many(what: &str) -> Error {
    Error::Format(format!("too many {what} for the container format"))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated container".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Decodes a container, validating the CRC before anything else.
pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    if bytes.len() < 16 {
        return Err(Error::Format("container too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Format(format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(16));
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

pub fn save_tensors(path: &Path, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    fs::write(path, encode_tensors(entries)?)?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    decode_tensors(&fs::read(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Looks up a named tensor in a decoded container.
pub fn take_named(entries: &mut Vec<(String, Tensor<f32>)>, name: &str) -> Result<Tensor<f32>> {
    let i = entries
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
    Ok(entries.swap_remove(i).1)
}

pub fn params_entries(params: &ParamSet<f32>) -> Vec<(String, Tensor<f32>)> {
    params.names().iter().cloned().zip(params.values().iter().cloned()).collect()
}

pub fn save_model(path: &Path, model: &Model<f32>) -> Result<()> {
    save_tensors(path, &params_entries(&model.params))
}

/// Loads parameters into a model of matching architecture.
pub fn load_model(path: &Path, model: &mut Model<f32>) -> Result<()> {
    let (names, values): (Vec<String>, Vec<Tensor<f32>>) = load_tensors(path)?.into_iter().unzip();
    model.params.load_from(&names, values)
}

/// A decoded 8-bit image: `channels` is 1 for PGM and 3 for PPM, samples
/// interleaved and scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    /// Grayscale tensor `[H, W]`; colour uses Rec. 601 luma weights.
    pub fn to_gray(&self) -> Tensor<f32> {
        let data = match self.channels {
            1 => self.data.clone(),
            _ => self
                .data
                .chunks_exact(3)
                .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
                .collect(),
        };
        Tensor::new(&[self.height, self.width], data).expect("image buffer matches its size")
    }
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::Format("truncated image header".into())),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| b.is_ascii_digit()) {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format("bad number in image header".into()))
}

pub fn decode_netpbm(bytes: &[u8]) -> Result<Image> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::Format("only binary PGM (P5) and PPM (P6) are supported".into())),
    };
    let mut pos = 2;
    let width = header_token(bytes, &mut pos)?;
    let height = header_token(bytes, &mut pos)?;
    let maxval = header_token(bytes, &mut pos)?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("only 8-bit images are supported, maxval {maxval}")));
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::Format("missing whitespace after image header".into()));
    }
    pos += 1;
    let n = width * height * channels;
    let raw = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::Format(format!("expected {n} pixel bytes")))?;
    Ok(Image {
        width,
        height,
        channels,
        data: raw.iter().map(|&b| b as f32 / maxval as f32).collect(),
    })
}

pub fn read_image(path: &Path) -> Result<Image> {
    decode_netpbm(&fs::read(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// 8-bit quantisation: clamp to `[0, 1]`, scale by 255, round.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PGM of a `[H, W]` tensor.
pub fn encode_pgm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let &[h, w] = img.shape() else {
        return Err(Error::Format(format!("PGM needs a 2-D image, got {:?}", img.shape())));
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

pub fn write_pgm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_pgm(img)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_with_comment() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        let img = decode_netpbm(&bytes).unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 1, 1));
        assert_eq!(img.data, vec![0.0, 1.0]);
    }

    #[test]
    fn ppm_to_gray_uses_luma() {
        let mut bytes = b"P6 1 1 255 ".to_vec();
        bytes.extend([255u8, 0, 0]);
        let g = decode_netpbm(&bytes).unwrap().to_gray();
        assert!((g.data()[0] - 0.299).abs() < 1e-6);
    }

    #[test]
    fn quantize_clamps_and_rounds() {
        assert_eq!(quantize(-0.3), 0);
        assert_eq!(quantize(1.7), 255);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(0.2), 51);
    }

    #[test]
    fn empty_container_round_trips() {
        let bytes = encode_tensors(&[]).unwrap();
        assert_eq!(bytes.len(), 16);
        assert!(decode_tensors(&bytes).unwrap().is_empty());
    }
}
