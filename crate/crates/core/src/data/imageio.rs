//! PNG and binary PPM (P6) image I/O, RGB8.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::DataError;

/// Raw 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb8Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>, // h * w * 3, row-major
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn bad_image(path: &Path, message: impl Into<String>) -> DataError {
    DataError::BadImage {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Decode a PNG or binary PPM by sniffing the magic bytes.
pub fn read_image(path: &Path) -> Result<Rgb8Image, DataError> {
    let mut file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut magic = [0u8; 2];
    file.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    drop(file);
    match &magic {
        [0x89, b'P'] => read_png(path),
        [b'P', b'6'] => read_ppm(path),
        _ => Err(bad_image(path, "expected PNG or binary PPM (P6)")),
    }
}

pub fn read_png(path: &Path) -> Result<Rgb8Image, DataError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| bad_image(path, format!("png: {}", e)))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| bad_image(path, format!("png: {}", e)))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(bad_image(path, "only 8-bit PNGs are supported"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let data = &buf[..info.buffer_size()];
    let pixels = match info.color_type {
        png::ColorType::Rgb => data.to_vec(),
        png::ColorType::Rgba => data.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => data.iter().flat_map(|&v| [v, v, v]).collect(),
        png::ColorType::GrayscaleAlpha => {
            data.chunks(2).flat_map(|p| [p[0], p[0], p[0]]).collect()
        }
        other => {
            return Err(bad_image(path, format!("unsupported png color type {:?}", other)));
        }
    };
    Ok(Rgb8Image {
        width: w,
        height: h,
        pixels,
    })
}

pub fn write_png(path: &Path, image: &Rgb8Image) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut encoder = png::Encoder::new(
        BufWriter::new(file),
        image.width as u32,
        image.height as u32,
    );
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| bad_image(path, format!("png: {}", e)))?;
    writer
        .write_image_data(&image.pixels)
        .map_err(|e| bad_image(path, format!("png: {}", e)))?;
    Ok(())
}

/// Parse binary PPM (P6), with `#` comments and a max value of 255.
pub fn read_ppm(path: &Path) -> Result<Rgb8Image, DataError> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;

    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String, DataError> {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad_image(path, "truncated ppm header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    if token(&bytes)? != "P6" {
        return Err(bad_image(path, "not a binary ppm (P6)"));
    }
    let width: usize = token(&bytes)?
        .parse()
        .map_err(|_| bad_image(path, "bad ppm width"))?;
    let height: usize = token(&bytes)?
        .parse()
        .map_err(|_| bad_image(path, "bad ppm height"))?;
    let maxval: usize = token(&bytes)?
        .parse()
        .map_err(|_| bad_image(path, "bad ppm maxval"))?;
    if maxval != 255 {
        return Err(bad_image(path, "only maxval 255 ppm supported"));
    }
    pos += 1; // single whitespace after maxval
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(bad_image(path, "ppm pixel data truncated"));
    }
    Ok(Rgb8Image {
        width,
        height,
        pixels: bytes[pos..pos + need].to_vec(),
    })
}

pub fn write_ppm(path: &Path, image: &Rgb8Image) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    write!(w, "P6\n{} {}\n255\n", image.width, image.height).map_err(|e| io_err(path, e))?;
    w.write_all(&image.pixels).map_err(|e| io_err(path, e))?;
    Ok(())
}
