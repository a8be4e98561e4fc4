//! NFT tensor container, named-tensor checkpoints and 8-bit PNG images.
//!
//! NFT record layout (all little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `NFLT` |
//! | 4 | version `u32` = 1 |
//! | 4 | dtype `u32` (1 = f32) |
//! | 4 | rank `u32` |
//! | 8·rank | dims `u64` |
//! | 4·Πdims | payload, row-major `f32` |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nfldm_tensor::Tensor;

use crate::{NfError, Result};

pub const NFT_MAGIC: &[u8; 4] = b"NFLT";
pub const NFT_VERSION: u32 = 1;
pub const NFT_DTYPE_F32: u32 = 1;

pub fn write_nft<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(NFT_MAGIC)?;
    w.write_all(&NFT_VERSION.to_le_bytes())?;
    w.write_all(&NFT_DTYPE_F32.to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(4 * t.numel());
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads one record; `Ok(None)` at a clean end of stream.
pub fn read_nft<R: Read>(r: &mut R) -> Result<Option<Tensor>> {
    let mut magic = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        let n = r.read(&mut magic[got..])?;
        if n == 0 {
            if got == 0 {
                return Ok(None);
            }
            return Err(NfError::Format("truncated NFT header".into()));
        }
        got += n;
    }
    if &magic != NFT_MAGIC {
        return Err(NfError::Format(format!("bad NFT magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != NFT_VERSION {
        return Err(NfError::Format(format!("unsupported NFT version {version}")));
    }
    let dtype = read_u32(r)?;
    if dtype != NFT_DTYPE_F32 {
        return Err(NfError::Format(format!("unsupported NFT dtype {dtype}")));
    }
    let rank = read_u32(r)? as usize;
    if rank > 16 {
        return Err(NfError::Format(format!("implausible NFT rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        dims.push(usize::try_from(u64::from_le_bytes(b)).map_err(|_| NfError::Format("dim overflow".into()))?);
    }
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| NfError::Format("NFT extent overflow".into()))?;
    let mut payload = vec![0u8; n * 4];
    r.read_exact(&mut payload).map_err(|_| NfError::Format("truncated NFT payload".into()))?;
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(Some(Tensor::new(dims, data)?))
}

pub fn save_nft(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_nft(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_nft(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    read_nft(&mut r)?.ok_or_else(|| NfError::Format(format!("{} holds no tensor", path.display())))
}

/// Writes `path` (concatenated NFT records) and `path.json` (the names, in order).
pub fn save_checkpoint<'a>(path: &Path, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let mut names = Vec::new();
    for (name, t) in tensors {
        write_nft(&mut w, t)?;
        names.push(name.to_string());
    }
    w.flush()?;
    std::fs::write(index_path(path), serde_json::to_string_pretty(&names)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let names: Vec<String> = serde_json::from_str(&std::fs::read_to_string(index_path(path))?)?;
    let mut r = BufReader::new(File::open(path)?);
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let t = read_nft(&mut r)?
            .ok_or_else(|| NfError::Format(format!("{} ends before tensor {name}", path.display())))?;
        out.push((name, t));
    }
    Ok(out)
}

fn index_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// RGB image, row-major `H×W×3` values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(NfError::InvalidArgument(format!(
                "{} values for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        Self { width, height, data: rgb.iter().copied().cycle().take(width * height * 3).collect() }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Channel-first `[3, H, W]` tensor.
    pub fn to_chw(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        Tensor::from_fn([3, h, w], |i| {
            let (c, p) = (i / (h * w), i % (h * w));
            self.data[p * 3 + c]
        })
    }

    pub fn from_chw(chw: &[f32], height: usize, width: usize) -> Result<Self> {
        if chw.len() != 3 * height * width {
            return Err(NfError::InvalidArgument("channel-first buffer size mismatch".into()));
        }
        let hw = height * width;
        let data = (0..hw * 3).map(|i| chw[(i % 3) * hw + i / 3].clamp(0.0, 1.0)).collect();
        Ok(Self { width, height, data })
    }

    /// Rounds to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        Self { data: self.data.iter().map(|&v| to_u8(v) as f32 / 255.0).collect(), ..*self }
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
    write_png_rgb8(path, img.width, img.height, &bytes)
}

pub fn write_png_rgb8(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| NfError::Format(e.to_string()))?;
    writer.write_image_data(bytes).map_err(|e| NfError::Format(e.to_string()))?;
    Ok(())
}

/// Reads an 8-bit PNG as RGB (gray is replicated, alpha dropped).
pub fn read_png(path: &Path) -> Result<Image> {
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info().map_err(|e| NfError::Format(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| NfError::Format(format!("{}: {e}", path.display())))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(NfError::Format(format!("{}: only 8-bit PNG is supported", path.display())));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(NfError::Format(format!("{}: indexed PNG is not supported", path.display())))
        }
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = Vec::with_capacity(w * h * 3);
    for px in buf[..w * h * channels].chunks_exact(channels) {
        let rgb = if channels < 3 { [px[0]; 3] } else { [px[0], px[1], px[2]] };
        data.extend(rgb.iter().map(|&b| b as f32 / 255.0));
    }
    Image::new(w, h, data)
}

/// Tiles equally sized images into a row-major grid with `cols` columns.
pub fn tile_images(images: &[Image], cols: usize) -> Result<Image> {
    let Some(first) = images.first() else {
        return Err(NfError::InvalidArgument("no images to tile".into()));
    };
    let (w, h) = (first.width, first.height);
    let cols = cols.max(1).min(images.len());
    let rows = images.len().div_ceil(cols);
    let mut out = Image::filled(w * cols, h * rows, [0.0; 3]);
    for (k, img) in images.iter().enumerate() {
        if img.width != w || img.height != h {
            return Err(NfError::InvalidArgument("tiled images differ in size".into()));
        }
        let (ox, oy) = ((k % cols) * w, (k / cols) * h);
        for y in 0..h {
            for x in 0..w {
                let src = (y * w + x) * 3;
                let dst = ((oy + y) * out.width + ox + x) * 3;
                out.data[dst..dst + 3].copy_from_slice(&img.data[src..src + 3]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nft_roundtrip_and_layout() {
        let t = Tensor::new([2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-7, f32::MAX]).unwrap();
        let mut buf = Vec::new();
        write_nft(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"NFLT");
        assert_eq!(buf.len(), 16 + 16 + 24);
        let back = read_nft(&mut buf.as_slice()).unwrap().unwrap();
        assert_eq!(back, t);
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_nft(&mut bad.as_slice()), Err(NfError::Format(_))));
        let mut wrong_version = buf.clone();
        wrong_version[4] = 2;
        assert!(read_nft(&mut wrong_version.as_slice()).is_err());
        assert!(read_nft(&mut &buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.nft");
        let a = Tensor::ones([3]);
        let b = Tensor::zeros([2, 2]);
        save_checkpoint(&path, [("a", &a), ("b.w", &b)]).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, vec![("a".to_string(), a), ("b.w".to_string(), b)]);
    }

    #[test]
    fn png_roundtrip_is_exact_at_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = Image::new(3, 2, (0..18).map(|i| i as f32 / 17.0).collect()).unwrap();
        write_png(&path, &img).unwrap();
        assert_eq!(read_png(&path).unwrap(), img.quantized());
        let chw = img.to_chw();
        assert_eq!(Image::from_chw(chw.data(), 2, 3).unwrap(), img);
    }
}
