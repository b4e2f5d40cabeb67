//! File formats: RFF1 frame files, CSV, 16-bit PGM images and JSONL logs.
//!
//! RFF1 layout, all little-endian:
//!
//! | bytes  | field                                   |
//! |--------|-----------------------------------------|
//! | 4      | magic `RFF1`                            |
//! | 4      | channel count `M` (u32)                 |
//! | 4      | samples per channel `L` (u32)           |
//! | 8      | sample rate (f64)                       |
//! | 8·M·L  | samples (f64), channel 0 first          |

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::signal::RfFrame;

pub const FRAME_MAGIC: &[u8; 4] = b"RFF1";
const HEADER_LEN: usize = 20;

/// Channel-major sample matrix plus sample rate; any `M ≥ 1`, `L ≥ 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFile {
    pub channels: Vec<Vec<f64>>,
    pub sample_rate: f64,
}

impl FrameFile {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: f64) -> Result<Self> {
        let len = channels.first().map(Vec::len).unwrap_or(0);
        if channels.is_empty() || len == 0 {
            return Err(Error::invalid("frame file needs at least one sample"));
        }
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::invalid("frame file channels differ in length"));
        }
        if u32::try_from(channels.len()).is_err() || u32::try_from(len).is_err() {
            return Err(Error::invalid("frame dimensions exceed 32 bits"));
        }
        Ok(Self {
            channels,
            sample_rate,
        })
    }

    pub fn from_frame(frame: &RfFrame) -> Self {
        Self {
            channels: frame.samples().to_vec(),
            sample_rate: frame.sample_rate(),
        }
    }

    pub fn into_frame(self) -> Result<RfFrame> {
        RfFrame::new(self.channels, self.sample_rate)
    }

    pub fn encode(&self) -> Vec<u8> {
        let m = self.channels.len();
        let l = self.channels[0].len();
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * m * l);
        out.extend_from_slice(FRAME_MAGIC);
        out.write_u32::<LittleEndian>(m as u32).unwrap();
        out.write_u32::<LittleEndian>(l as u32).unwrap();
        out.write_f64::<LittleEndian>(self.sample_rate).unwrap();
        for v in self.channels.iter().flatten() {
            out.write_f64::<LittleEndian>(*v).unwrap();
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!(
                "frame file of {} bytes is shorter than its header",
                bytes.len()
            )));
        }
        if &bytes[..4] != FRAME_MAGIC {
            return Err(Error::Format("missing RFF1 magic".into()));
        }
        let mut cur = &bytes[4..];
        let m = cur.read_u32::<LittleEndian>()? as usize;
        let l = cur.read_u32::<LittleEndian>()? as usize;
        let sample_rate = cur.read_f64::<LittleEndian>()?;
        let expect = m
            .checked_mul(l)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format("frame dimensions overflow".into()))?;
        if cur.len() != expect {
            return Err(Error::Format(format!(
                "payload is {} bytes, header implies {expect} ({m} x {l})",
                cur.len()
            )));
        }
        if m == 0 || l == 0 {
            return Err(Error::Format("frame file has no samples".into()));
        }
        let channels = (0..m)
            .map(|_| {
                let mut ch = vec![0.0; l];
                cur.read_f64_into::<LittleEndian>(&mut ch)?;
                Ok(ch)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            channels,
            sample_rate,
        })
    }
}

/// Opens a file, naming it in any error.
pub fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| with_path(e, path))
}

pub fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| with_path(e, path))
}

fn with_path(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn write_frame_file(path: &Path, file: &FrameFile) -> Result<()> {
    let mut w = BufWriter::new(create(path)?);
    w.write_all(&file.encode())?;
    w.flush()?;
    Ok(())
}

pub fn read_frame_file(path: &Path) -> Result<FrameFile> {
    let mut bytes = Vec::new();
    open(path)?.read_to_end(&mut bytes)?;
    FrameFile::decode(&bytes)
}

pub fn write_frame(path: &Path, frame: &RfFrame) -> Result<()> {
    write_frame_file(path, &FrameFile::from_frame(frame))
}

pub fn read_frame(path: &Path) -> Result<RfFrame> {
    read_frame_file(path)?.into_frame()
}

/// One comma-separated row per channel. Values use Rust's shortest
/// round-trip formatting.
pub fn write_csv(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(create(path)?);
    for row in rows {
        w.write_record(row.iter().map(|v| format!("{v:?}")))
            .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::Format(format!("{other:?}")),
    }
}

fn read_rows<T>(path: &Path, parse: impl Fn(&str) -> Option<T>) -> Result<Vec<Vec<T>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(open(path)?);
    let mut rows = Vec::new();
    for (n, record) in reader.records().enumerate() {
        let record = record.map_err(csv_error)?;
        let row = record
            .iter()
            .map(|f| {
                parse(f).ok_or_else(|| Error::Format(format!("row {}: cannot parse {f:?}", n + 1)))
            })
            .collect::<Result<Vec<T>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Format("CSV file has no rows".into()));
    }
    Ok(rows)
}

pub fn read_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    read_rows(path, |s| s.parse::<f64>().ok())
}

/// Reads 16-bit signed integer samples (scanner-style data) as floats.
pub fn read_csv_i16(path: &Path) -> Result<Vec<Vec<f64>>> {
    read_rows(path, |s| s.parse::<i16>().ok().map(f64::from))
}

/// Binary 16-bit PGM (`P5`, maxval 65535, big-endian samples). Columns are
/// channels, rows are samples; values are mapped linearly from the image
/// range onto 0..=65535.
pub fn encode_pgm(image: &[Vec<f64>]) -> Result<Vec<u8>> {
    let width = image.len();
    let height = image.first().map(Vec::len).unwrap_or(0);
    if width == 0 || height == 0 || image.iter().any(|c| c.len() != height) {
        return Err(Error::invalid("image must be a non-empty rectangle"));
    }
    if image.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("image has non-finite pixels"));
    }
    let lo = image.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let hi = image.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for r in 0..height {
        for col in image {
            let v = if span > 0.0 { (col[r] - lo) / span } else { 0.0 };
            out.write_u16::<BigEndian>((v * 65535.0).round() as u16)?;
        }
    }
    Ok(out)
}

pub fn write_pgm(path: &Path, image: &[Vec<f64>]) -> Result<()> {
    let mut w = BufWriter::new(create(path)?);
    w.write_all(&encode_pgm(image)?)?;
    w.flush()?;
    Ok(())
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(writer: &mut impl Write, rows: &[T]) -> Result<()> {
    for row in rows {
        serde_json::to_writer(&mut *writer, row)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let f = FrameFile::new(vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]], 40e6).unwrap();
        let b = f.encode();
        assert_eq!(&b[..4], b"RFF1");
        assert_eq!(&b[4..8], &3u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..20], &40e6f64.to_le_bytes());
        assert_eq!(&b[20..28], &1.0f64.to_le_bytes());
        assert_eq!(&b[28..36], &2.0f64.to_le_bytes());
        assert_eq!(b.len(), 20 + 8 * 6);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let f = FrameFile::new(vec![vec![1.0; 3]; 2], 1.0).unwrap();
        let good = f.encode();
        assert!(matches!(FrameFile::decode(&good[..10]), Err(Error::Format(_))));
        assert!(matches!(FrameFile::decode(&good[..good.len() - 1]), Err(Error::Format(_))));
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(FrameFile::decode(&bad), Err(Error::Format(_))));
        let mut extra = good;
        extra.push(0);
        assert!(matches!(FrameFile::decode(&extra), Err(Error::Format(_))));
    }

    #[test]
    fn single_channel_file_is_allowed() {
        let f = FrameFile::new(vec![vec![0.5, -0.25]], 1.0).unwrap();
        assert_eq!(FrameFile::decode(&f.encode()).unwrap(), f);
        assert!(f.into_frame().is_err());
    }

    #[test]
    fn csv_round_trip_and_int16_import() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        let rows = vec![vec![0.1, -2.5e-300, 3.0], vec![f64::MIN_POSITIVE, 1e10, -0.0]];
        write_csv(&p, &rows).unwrap();
        assert_eq!(read_csv(&p).unwrap(), rows);
        std::fs::write(&p, "1, -32768, 32767\n4,5,6\n").unwrap();
        assert_eq!(
            read_csv_i16(&p).unwrap(),
            vec![vec![1.0, -32768.0, 32767.0], vec![4.0, 5.0, 6.0]]
        );
        std::fs::write(&p, "1,40000\n").unwrap();
        assert!(matches!(read_csv_i16(&p), Err(Error::Format(_))));
        std::fs::write(&p, "1,2\n3\n").unwrap();
        assert!(matches!(read_csv(&p), Err(Error::Format(_))));
    }

    #[test]
    fn pgm_layout() {
        let img = vec![vec![0.0, 1.0], vec![0.5, 0.25], vec![1.0, 0.0]];
        let b = encode_pgm(&img).unwrap();
        let header = b"P5\n3 2\n65535\n";
        assert_eq!(&b[..header.len()], header);
        let px: Vec<u16> = b[header.len()..]
            .chunks(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect();
        assert_eq!(px, vec![0, 32768, 65535, 65535, 16384, 0]);
    }

    #[test]
    fn jsonl_rows() {
        #[derive(Serialize)]
        struct Row {
            a: u32,
        }
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &[Row { a: 1 }, Row { a: 2 }]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "{\"a\":1}\n{\"a\":2}\n");
    }

    proptest! {
        #[test]
        fn frame_round_trip_is_bit_exact(
            m in 1usize..5,
            l in 1usize..20,
            seed in any::<u64>(),
            rate in any::<f64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let channels: Vec<Vec<f64>> = (0..m)
                .map(|_| (0..l).map(|_| f64::from_bits(rng.random::<u64>())).collect())
                .collect();
            let f = FrameFile::new(channels, rate).unwrap();
            let bytes = f.encode();
            let back = FrameFile::decode(&bytes).unwrap();
            prop_assert_eq!(back.encode(), bytes);
        }
    }
}
