//! Binary PGM (P5) and PPM (P6) codecs.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A decoded image, values scaled to `[0, 1]` by `maxval`.
#[derive(Debug, Clone, PartialEq)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub maxval: u16,
    /// Row-major, channel-interleaved.
    pub pixels: Vec<f32>,
}

impl PnmImage {
    /// As an `H×W×C` tensor.
    pub fn into_tensor(self) -> Tensor<f32> {
        Tensor::new(&[self.height, self.width, self.channels], self.pixels).expect("dimensions checked at decode")
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> std::result::Result<usize, String> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(format!("expected {what}"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| format!("{what} out of range"))
    }
}

fn parse(bytes: &[u8]) -> std::result::Result<PnmImage, String> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err("not a binary PGM (P5) or PPM (P6) file".into()),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err("zero image dimension".into());
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format!("maxval {maxval} outside 1..=65535"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(h.pos) {
        Some(c) if c.is_ascii_whitespace() => h.pos += 1,
        _ => return Err("missing whitespace after maxval".into()),
    }
    let bytes_per = if maxval < 256 { 1 } else { 2 };
    let count = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or("image dimensions overflow")?;
    let raster = &bytes[h.pos..];
    if raster.len() < count * bytes_per {
        return Err(format!("truncated raster: {} of {} bytes", raster.len(), count * bytes_per));
    }
    let scale = 1.0 / maxval as f32;
    let pixels = if bytes_per == 1 {
        raster[..count].iter().map(|&v| (v as f32 * scale).min(1.0)).collect()
    } else {
        raster[..count * 2]
            .chunks_exact(2)
            .map(|b| (u16::from_be_bytes([b[0], b[1]]) as f32 * scale).min(1.0))
            .collect()
    };
    Ok(PnmImage { width, height, channels, maxval: maxval as u16, pixels })
}

pub fn decode_pnm(bytes: &[u8]) -> std::result::Result<PnmImage, String> {
    parse(bytes)
}

pub fn read_pnm(path: &Path) -> Result<PnmImage> {
    let bytes = std::fs::read(path)?;
    parse(&bytes).map_err(|reason| Error::Decode { path: path.to_path_buf(), reason })
}

/// Encodes an `H×W×1` (P5) or `H×W×3` (P6) image in `[0, 1]` at maxval 255.
pub fn encode_pnm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w, c) = match image.shape() {
        &[h, w, c] if c == 1 || c == 3 => (h, w, c),
        s => {
            return Err(Error::InvalidShape { shape: s.to_vec(), reason: "expected H×W×1 or H×W×3 image".into() });
        }
    };
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn write_pnm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let bytes = encode_pnm(image)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn white_pgm_decodes_to_ones() {
        let mut bytes = b"P5\n3 2\n255\n".to_vec();
        bytes.extend([255u8; 6]);
        let img = decode_pnm(&bytes).unwrap();
        assert_eq!((img.width, img.height, img.channels), (3, 2, 1));
        assert!(img.pixels.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn header_comments_and_sixteen_bit() {
        let mut bytes = b"P6 # comment\n1 # w\n1\n65535\n".to_vec();
        bytes.extend([0xff, 0xff, 0x00, 0x00, 0x80, 0x00]);
        let img = decode_pnm(&bytes).unwrap();
        assert_eq!(img.channels, 3);
        assert_eq!(img.pixels[0], 1.0);
        assert_eq!(img.pixels[1], 0.0);
        assert!((img.pixels[2] - 32768.0 / 65535.0).abs() < 1e-7);
    }

    #[test]
    fn malformed_inputs_error() {
        assert!(decode_pnm(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pnm(b"P5\n2 2\n255\n\x00\x00").is_err());
        assert!(decode_pnm(b"P5\n0 2\n255\n").is_err());
        assert!(decode_pnm(b"P5\n1 1\n70000\n\x00").is_err());
        assert!(decode_pnm(b"P5\n1 1").is_err());
        assert!(decode_pnm(b"").is_err());
    }

    proptest! {
        #[test]
        fn round_trip_within_one_level(h in 1usize..6, w in 1usize..6, color in any::<bool>(), seed in any::<u64>()) {
            let c = if color { 3 } else { 1 };
            let mut rng = crate::rng::Rng::new(seed);
            let img = Tensor::from_fn(&[h, w, c], |_| rng.uniform() as f32);
            let back = decode_pnm(&encode_pnm(&img).unwrap()).unwrap().into_tensor();
            prop_assert_eq!(back.shape(), img.shape());
            for (a, b) in img.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= 1.0 / 255.0);
            }
        }
    }
}
