//! Netpbm graymaps and pixmaps (P2, P3, P5, P6).
//!
//! Samples are scaled to [0, 1] by `maxval`. Binary rasters with
//! `maxval > 255` use two big-endian bytes per sample.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PnmEncoding {
    /// P2 / P3
    Plain,
    /// P5 / P6
    Binary,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.buf.len() {
            match self.buf[self.pos] {
                b'#' => {
                    while self.pos < self.buf.len() && self.buf[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    /// Next decimal token and the offset it starts at.
    fn number(&mut self, what: &str) -> Result<(u32, usize)> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.buf.len() && self.buf[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            self.pos = start;
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.buf[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .map(|v| (v, start))
            .ok_or_else(|| Error::Parse {
                offset: start,
                reason: format!("{what} out of range"),
            })
    }
}

pub fn decode_pnm(buf: &[u8]) -> Result<Tensor> {
    let mut cur = Cursor { buf, pos: 0 };
    if buf.len() < 2 || buf[0] != b'P' {
        return Err(cur.err("missing P magic"));
    }
    let (channels, encoding) = match buf[1] {
        b'2' => (1, PnmEncoding::Plain),
        b'3' => (3, PnmEncoding::Plain),
        b'5' => (1, PnmEncoding::Binary),
        b'6' => (3, PnmEncoding::Binary),
        _ => {
            cur.pos = 1;
            return Err(cur.err("unsupported magic (want P2, P3, P5 or P6)"));
        }
    };
    cur.pos = 2;
    let (width, _) = cur.number("width")?;
    let (height, dims_at) = cur.number("height")?;
    let (width, height) = (width as usize, height as usize);
    let (maxval, maxval_at) = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Parse {
            offset: dims_at,
            reason: "zero image dimension".into(),
        });
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Parse {
            offset: maxval_at,
            reason: format!("maxval {maxval} not in 1..=65535"),
        });
    }
    let scale = 1.0 / maxval as f64;
    let count = width * height * channels;
    let mut samples = Vec::with_capacity(count);
    match encoding {
        PnmEncoding::Plain => {
            for _ in 0..count {
                let (v, at) = cur.number("sample")?;
                if v > maxval {
                    return Err(Error::Parse {
                        offset: at,
                        reason: format!("sample {v} exceeds maxval {maxval}"),
                    });
                }
                samples.push(v);
            }
        }
        PnmEncoding::Binary => {
            if cur.pos >= buf.len() || !buf[cur.pos].is_ascii_whitespace() {
                return Err(cur.err("expected one whitespace byte before raster"));
            }
            cur.pos += 1;
            let bytes = if maxval > 255 { 2 } else { 1 };
            let need = count * bytes;
            if buf.len() - cur.pos < need {
                return Err(Error::Parse {
                    offset: buf.len(),
                    reason: format!("raster truncated: need {need} bytes, have {}", buf.len() - cur.pos),
                });
            }
            for k in 0..count {
                let at = cur.pos + k * bytes;
                let v = if bytes == 2 {
                    u32::from(u16::from_be_bytes([buf[at], buf[at + 1]]))
                } else {
                    u32::from(buf[at])
                };
                if v > maxval {
                    return Err(Error::Parse {
                        offset: at,
                        reason: format!("sample {v} exceeds maxval {maxval}"),
                    });
                }
                samples.push(v);
            }
        }
    }
    // interleaved rows -> planar channels
    Ok(Tensor::from_fn(channels, height, width, |c, i, j| {
        samples[(i * width + j) * channels + c] as f64 * scale
    }))
}

/// Encodes a 1- or 3-channel tensor; values are clamped to [0, 1] and
/// rounded to the nearest level.
pub fn encode_pnm(t: &Tensor, encoding: PnmEncoding, maxval: u16) -> Result<Vec<u8>> {
    let (ch, h, w) = t.shape();
    let digit = match (ch, encoding) {
        (1, PnmEncoding::Plain) => '2',
        (3, PnmEncoding::Plain) => '3',
        (1, PnmEncoding::Binary) => '5',
        (3, PnmEncoding::Binary) => '6',
        _ => {
            return Err(Error::Shape {
                expected: (3, h, w),
                got: t.shape(),
            })
        }
    };
    if maxval == 0 {
        return Err(Error::param("maxval", "must be positive"));
    }
    let mut out = format!("P{digit}\n{w} {h}\n{maxval}\n").into_bytes();
    let level = |c: usize, i: usize, j: usize| (t.get(c, i, j).clamp(0.0, 1.0) * maxval as f64).round() as u16;
    match encoding {
        PnmEncoding::Plain => {
            for i in 0..h {
                let row: Vec<String> = (0..w)
                    .flat_map(|j| (0..ch).map(move |c| (c, j)))
                    .map(|(c, j)| level(c, i, j).to_string())
                    .collect();
                out.extend_from_slice(row.join(" ").as_bytes());
                out.push(b'\n');
            }
        }
        PnmEncoding::Binary => {
            for i in 0..h {
                for j in 0..w {
                    for c in 0..ch {
                        let v = level(c, i, j);
                        if maxval > 255 {
                            out.extend_from_slice(&v.to_be_bytes());
                        } else {
                            out.push(v as u8);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_pnm(&fs::read(path)?)
}

/// Binary 8-bit encoding (P5 for one channel, P6 for three).
pub fn write_image(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    write_image_as(t, path, PnmEncoding::Binary, 255)
}

pub fn write_image_as(t: &Tensor, path: impl AsRef<Path>, encoding: PnmEncoding, maxval: u16) -> Result<()> {
    fs::write(path, encode_pnm(t, encoding, maxval)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    #[test]
    fn hand_written_plain_graymap() {
        let src = b"P2\n# a comment\n2 2\n255\n0 255\n51 102\n";
        let t = decode_pnm(src).unwrap();
        assert_eq!(t.shape(), (1, 2, 2));
        assert_eq!(t.as_slice(), &[0.0, 1.0, 0.2, 0.4]);
    }

    #[test]
    fn plain_and_binary_agree() {
        let mut r = rng::substream(1, "pnm");
        for ch in [1, 3] {
            let t = Tensor::uniform((ch, 5, 7), 0.0, 1.0, &mut r);
            let a = decode_pnm(&encode_pnm(&t, PnmEncoding::Plain, 255).unwrap()).unwrap();
            let b = decode_pnm(&encode_pnm(&t, PnmEncoding::Binary, 255).unwrap()).unwrap();
            assert_eq!(a, b);
            let a16 = decode_pnm(&encode_pnm(&t, PnmEncoding::Plain, 65535).unwrap()).unwrap();
            let b16 = decode_pnm(&encode_pnm(&t, PnmEncoding::Binary, 65535).unwrap()).unwrap();
            assert_eq!(a16, b16);
            assert!(a16.max_abs_diff(&t).unwrap() <= 0.5 / 65535.0 + 1e-12);
        }
    }

    #[test]
    fn rgb_is_interleaved_on_disk() {
        let t = Tensor::from_fn(3, 1, 2, |c, _, j| [[1.0, 0.0], [0.0, 1.0], [0.2, 0.4]][c][j]);
        let bytes = encode_pnm(&t, PnmEncoding::Binary, 255).unwrap();
        assert_eq!(&bytes[bytes.len() - 6..], &[255, 0, 51, 0, 255, 102]);
    }

    #[test]
    fn malformed_headers_report_offsets() {
        let cases: [(&[u8], usize); 5] = [
            (b"Q5\n1 1\n255\n\0", 0),
            (b"P7\n1 1\n255\n\0", 1),
            (b"P5\n1 x\n255\n\0", 5),
            (b"P5\n1 1\n0\n\0", 7),
            (b"P5\n2 2\n255\n\0\0", 13),
        ];
        for (src, off) in cases {
            match decode_pnm(src) {
                Err(Error::Parse { offset, .. }) => assert_eq!(offset, off, "{:?}", String::from_utf8_lossy(src)),
                other => panic!("{other:?}"),
            }
        }
        match decode_pnm(b"P2\n2 1\n10\n3 11\n") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn two_channel_tensors_cannot_be_written() {
        assert!(encode_pnm(&Tensor::zeros(2, 2, 2), PnmEncoding::Binary, 255).is_err());
    }

    proptest! {
        #[test]
        fn eight_bit_round_trip_within_quantization(
            vals in proptest::collection::vec(0.0f64..=1.0, 3 * 4 * 6)
        ) {
            let t = Tensor::from_vec(3, 4, 6, vals).unwrap();
            let back = decode_pnm(&encode_pnm(&t, PnmEncoding::Binary, 255).unwrap()).unwrap();
            prop_assert!(back.max_abs_diff(&t).unwrap() <= 1.0 / 255.0);
        }
    }
}
