//! Binary netpbm images: `P6` RGB and `P5` grayscale, maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{LabelMap, RgbImage};

struct Header {
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<Header> {
    let err = |offset: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        offset,
        message,
    };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(err(
            0,
            format!("expected magic {:?}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // Whitespace and comments may precede every header field.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n' && b != b'\r') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            let what = ["width", "height", "maxval"][i];
            return Err(match bytes.get(pos) {
                None => err(pos, format!("truncated header, expected {what}")),
                Some(b) => err(pos, format!("expected {what}, found byte 0x{b:02x}")),
            });
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| err(start, format!("number {text} out of range")))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(err(
            pos,
            format!("maxval {maxval} unsupported, expected 255"),
        ));
    }
    if width == 0 || height == 0 {
        return Err(err(pos, "zero image dimension".into()));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        None => {
            return Err(err(
                pos,
                "truncated header, expected whitespace after maxval".into(),
            ))
        }
        Some(b) => {
            return Err(err(
                pos,
                format!("expected whitespace after maxval, found 0x{b:02x}"),
            ))
        }
    }
    Ok(Header {
        width,
        height,
        data_start: pos,
    })
}

fn payload<'a>(bytes: &'a [u8], header: &Header, channels: usize, path: &Path) -> Result<&'a [u8]> {
    let need = header.width * header.height * channels;
    let end = header.data_start + need;
    if bytes.len() < end {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: bytes.len(),
            message: format!(
                "truncated pixel data: {need} bytes expected, {} present",
                bytes.len() - header.data_start
            ),
        });
    }
    Ok(&bytes[header.data_start..end])
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let h = parse_header(bytes, b"P6", path)?;
    let data = payload(bytes, &h, 3, path)?.to_vec();
    RgbImage::new(h.width, h.height, data)
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<LabelMap> {
    let h = parse_header(bytes, b"P5", path)?;
    let data = payload(bytes, &h, 1, path)?.to_vec();
    LabelMap::new(h.width, h.height, data)
}

pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

pub fn encode_pgm(labels: &LabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", labels.width, labels.height).into_bytes();
    out.extend_from_slice(&labels.data);
    out
}

pub fn read_image_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}

pub fn read_labels_pgm(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path)
}

pub fn write_image_ppm(path: impl AsRef<Path>, image: &RgbImage) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(image)).map_err(|e| Error::io(path, e))
}

pub fn write_labels_pgm(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(labels)).map_err(|e| Error::io(path, e))
}
