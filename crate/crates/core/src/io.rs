//! File formats: 8-bit PNG, JSONL and CSV, all written through a temporary
//! file and renamed into place so a failed run leaves no partial output.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::grid::{Grid, GridError};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Fs {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: png decode: {source}")]
    PngDecode {
        path: PathBuf,
        #[source]
        source: png::DecodingError,
    },
    #[error("png encode: {0}")]
    PngEncode(#[from] png::EncodingError),
    #[error("{path}:{line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

fn fs_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Fs {
        path: path.to_path_buf(),
        source,
    }
}

/// Runs `write` against a temporary sibling of `path`, then renames it over
/// `path`. The temporary is removed if `write` fails.
pub fn write_atomic<F>(path: &Path, write: F) -> Result<(), IoError>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<(), IoError>,
{
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(fs_err(dir))?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let file = File::create(&tmp).map_err(fs_err(&tmp))?;
        let mut w = BufWriter::new(file);
        write(&mut w)?;
        w.flush().map_err(fs_err(&tmp))?;
        Ok(())
    })();
    match result {
        Ok(()) => fs::rename(&tmp, path).map_err(fs_err(path)),
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    write_atomic(path, |w| w.write_all(bytes).map_err(fs_err(path)))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    write_bytes(path, text.as_bytes())
}

/// Quantizes [0, 1] to 0..=255 with rounding; values outside are clipped.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a 1×H×W (or H×W) grid as 8-bit grayscale PNG bytes.
pub fn encode_gray_png(image: &Grid) -> Result<Vec<u8>, IoError> {
    let (c, h, w) = image.chw()?;
    if c != 1 {
        return Err(IoError::Format(format!("grayscale PNG needs one channel, got {c}")));
    }
    let bytes: Vec<u8> = image.data().iter().map(|&v| to_u8(v)).collect();
    encode_png(&bytes, w, h, png::ColorType::Grayscale)
}

pub fn encode_rgb_png(rgb: &[u8], width: usize, height: usize) -> Result<Vec<u8>, IoError> {
    if rgb.len() != 3 * width * height {
        return Err(IoError::Format(format!(
            "RGB buffer of {} bytes does not match {width}x{height}",
            rgb.len()
        )));
    }
    encode_png(rgb, width, height, png::ColorType::Rgb)
}

fn encode_png(data: &[u8], width: usize, height: usize, color: png::ColorType) -> Result<Vec<u8>, IoError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(data)?;
        writer.finish()?;
    }
    Ok(out)
}

pub fn write_gray_png(path: &Path, image: &Grid) -> Result<(), IoError> {
    write_bytes(path, &encode_gray_png(image)?)
}

pub fn write_rgb_png(path: &Path, rgb: &[u8], width: usize, height: usize) -> Result<(), IoError> {
    write_bytes(path, &encode_rgb_png(rgb, width, height)?)
}

/// Reads a PNG as a 1×H×W grid in [0, 1]. Color images are reduced to the
/// mean of their color channels; alpha is ignored.
pub fn read_gray_png(path: &Path) -> Result<Grid, IoError> {
    let file = File::open(path).map_err(fs_err(path))?;
    let dec_err = |source| IoError::PngDecode {
        path: path.to_path_buf(),
        source,
    };
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(dec_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| IoError::Format(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(dec_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let (colors, stride) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (1, 2),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (3, 4),
        png::ColorType::Indexed => {
            return Err(IoError::Format(format!("{}: unexpanded palette image", path.display())))
        }
    };
    let row_bytes = info.line_size;
    let mut data = Vec::with_capacity(w * h);
    for row in buf[..row_bytes * h].chunks(row_bytes) {
        for px in row[..w * stride].chunks(stride) {
            let sum: u32 = px[..colors].iter().map(|&b| u32::from(b)).sum();
            data.push(f64::from(sum) / (255.0 * colors as f64));
        }
    }
    Ok(Grid::from_vec(&[1, h, w], data)?)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), IoError> {
    write_atomic(path, |w| {
        for (i, item) in items.iter().enumerate() {
            serde_json::to_writer(&mut *w, item).map_err(|source| IoError::Json {
                path: path.to_path_buf(),
                line: i + 1,
                source,
            })?;
            w.write_all(b"\n").map_err(fs_err(path))?;
        }
        Ok(())
    })
}

/// Reads one JSON value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    let file = File::open(path).map_err(fs_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(fs_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| IoError::Json {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), IoError> {
    let csv_err = |source| IoError::Csv {
        path: path.to_path_buf(),
        source,
    };
    write_atomic(path, |w| {
        let mut cw = csv::Writer::from_writer(w);
        for row in rows {
            cw.serialize(row).map_err(csv_err)?;
        }
        cw.flush().map_err(fs_err(path))
    })
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    let csv_err = |source| IoError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    rdr.deserialize().collect::<Result<_, _>>().map_err(csv_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scratch(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("topocell-io-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn gray_png_round_trip_is_exact_on_the_byte_lattice() {
        let vals: Vec<f64> = (0..=255).map(|b| f64::from(b) / 255.0).collect();
        let img = Grid::from_vec(&[1, 16, 16], vals).unwrap();
        let path = scratch("ramp.png");
        write_gray_png(&path, &img).unwrap();
        let back = read_gray_png(&path).unwrap();
        assert_eq!(back, img);
        assert_eq!(encode_gray_png(&img).unwrap(), fs::read(&path).unwrap());
    }

    #[test]
    fn rgb_png_reads_back_as_channel_mean() {
        let rgb = [255u8, 0, 0, 0, 0, 0];
        let path = scratch("rgb.png");
        write_rgb_png(&path, &rgb, 2, 1).unwrap();
        let g = read_gray_png(&path).unwrap();
        assert_eq!(g.shape(), &[1, 1, 2]);
        assert!((g.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!(write_rgb_png(&path, &rgb, 3, 1).is_err());
    }

    #[test]
    fn failed_write_leaves_nothing() {
        let path = scratch("never.txt");
        let r = write_atomic(&path, |_| Err(IoError::Format("boom".into())));
        assert!(r.is_err());
        assert!(!path.exists());
        let leftovers = fs::read_dir(path.parent().unwrap())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().contains("never"))
            .count();
        assert_eq!(leftovers, 0);
    }

    #[test]
    fn jsonl_and_csv_round_trip() {
        #[derive(Serialize, serde::Deserialize, PartialEq, Debug)]
        struct Row {
            a: u32,
            b: f64,
        }
        let rows = vec![Row { a: 1, b: 0.5 }, Row { a: 2, b: -3.25 }];
        let j = scratch("rows.jsonl");
        write_jsonl(&j, &rows).unwrap();
        assert_eq!(read_jsonl::<Row>(&j).unwrap(), rows);
        let c = scratch("rows.csv");
        write_csv(&c, &rows).unwrap();
        assert_eq!(fs::read_to_string(&c).unwrap(), "a,b\n1,0.5\n2,-3.25\n");
        assert_eq!(read_csv::<Row>(&c).unwrap(), rows);
    }
}
