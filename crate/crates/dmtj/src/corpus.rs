//! Binary image corpus: a 24-byte header (`DMTJ`, version, count, C, H, W
//! as little-endian u32), `count` records of `C·H·W` little-endian f32, then
//! the CRC32 of the records.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use dmtj_core::Tensor;

use crate::error::{IoError, IoResult};

pub const MAGIC: &[u8; 4] = b"DMTJ";
pub const VERSION: u32 = 1;
const HEADER: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Appends `values` as little-endian f32.
pub fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

pub fn get_f32s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

pub fn encode(images: &[Tensor]) -> IoResult<Vec<u8>> {
    let dims = match images.first() {
        None => Dims {
            channels: 0,
            height: 0,
            width: 0,
        },
        Some(t) => match t.shape() {
            &[c, h, w] => Dims {
                channels: c,
                height: h,
                width: w,
            },
            s => return Err(IoError::Format(format!("corpus records must be C×H×W, got {s:?}"))),
        },
    };
    let mut out = Vec::with_capacity(HEADER + images.len() * dims.numel() * 4 + 4);
    out.extend_from_slice(MAGIC);
    for v in [VERSION, images.len() as u32, dims.channels as u32, dims.height as u32, dims.width as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for t in images {
        if t.shape() != [dims.channels, dims.height, dims.width] {
            return Err(IoError::Format(format!(
                "record shape {:?} differs from the first record",
                t.shape()
            )));
        }
        put_f32s(&mut out, t.data());
    }
    let crc = crc32fast::hash(&out[HEADER..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn decode(bytes: &[u8]) -> IoResult<(Dims, Vec<Tensor>)> {
    if bytes.len() < HEADER {
        return Err(IoError::Truncated {
            expected: HEADER as u64,
            actual: bytes.len() as u64,
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(IoError::Format("not a DMTJ corpus (bad magic)".into()));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(IoError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let count = u32_at(bytes, 8) as u64;
    let dims = Dims {
        channels: u32_at(bytes, 12) as usize,
        height: u32_at(bytes, 16) as usize,
        width: u32_at(bytes, 20) as usize,
    };
    let record = dims.numel() as u64 * 4;
    let expected = HEADER as u64 + count * record + 4;
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(IoError::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(IoError::SizeMismatch { expected, actual });
    }
    let payload = &bytes[HEADER..bytes.len() - 4];
    let stored = u32_at(bytes, bytes.len() - 4);
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(IoError::Checksum { stored, computed });
    }
    let images = if record == 0 {
        Vec::new()
    } else {
        payload
            .chunks_exact(record as usize)
            .map(|r| Tensor::new(vec![dims.channels, dims.height, dims.width], get_f32s(r)))
            .collect::<Result<_, _>>()?
    };
    Ok((dims, images))
}

/// Writes to `<path>.partial` and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> IoResult<()> {
    let partial = partial_path(path);
    let mut f = fs::File::create(&partial).map_err(|e| IoError::io(&partial, e))?;
    f.write_all(bytes).map_err(|e| IoError::io(&partial, e))?;
    f.sync_all().map_err(|e| IoError::io(&partial, e))?;
    fs::rename(&partial, path).map_err(|e| IoError::io(path, e))
}

pub fn partial_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}

pub fn write_corpus(path: &Path, images: &[Tensor]) -> IoResult<()> {
    write_atomic(path, &encode(images)?)
}

pub fn read_corpus(path: &Path) -> IoResult<(Dims, Vec<Tensor>)> {
    let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
    decode(&bytes)
}

/// One manifest line: a corpus file relative to the manifest, with the
/// per-channel statistics used to normalize it.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Parses `path m_1 … m_C s_1 … s_C` lines; blank lines and `#` comments
/// are skipped.
pub fn parse_manifest(text: &str) -> IoResult<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let path = PathBuf::from(fields.next().expect("non-empty line"));
        let nums = fields
            .map(|f| f.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| IoError::Format(format!("manifest line {}: {e}", n + 1)))?;
        if nums.is_empty() || nums.len() % 2 != 0 {
            return Err(IoError::Format(format!(
                "manifest line {}: expected per-channel mean and std pairs",
                n + 1
            )));
        }
        let (mean, std) = nums.split_at(nums.len() / 2);
        if std.iter().any(|s| !(*s > 0.0)) {
            return Err(IoError::Format(format!("manifest line {}: std must be positive", n + 1)));
        }
        out.push(ManifestEntry {
            path,
            mean: mean.to_vec(),
            std: std.to_vec(),
        });
    }
    Ok(out)
}

/// Optional labels next to a corpus file: `<corpus>.labels`, one class id
/// per line.
pub fn labels_path(corpus: &Path) -> PathBuf {
    let mut s = corpus.as_os_str().to_owned();
    s.push(".labels");
    PathBuf::from(s)
}

pub fn write_labels(corpus: &Path, labels: &[usize]) -> IoResult<()> {
    let text: String = labels.iter().map(|l| format!("{l}\n")).collect();
    write_atomic(&labels_path(corpus), text.as_bytes())
}

pub fn read_labels(corpus: &Path) -> IoResult<Option<Vec<usize>>> {
    let path = labels_path(corpus);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| IoError::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map(Some)
        .map_err(|e| IoError::Format(format!("{}: {e}", path.display())))
}

/// Loaded manifest contents, normalized per channel.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawCorpus {
    pub images: Vec<Tensor>,
    /// Present only when every listed file has a labels sidecar.
    pub labels: Option<Vec<usize>>,
}

pub fn load_raw_corpus(manifest: &Path) -> IoResult<RawCorpus> {
    let text = fs::read_to_string(manifest).map_err(|e| IoError::io(manifest, e))?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    let mut out = RawCorpus {
        images: Vec::new(),
        labels: Some(Vec::new()),
    };
    let mut dims: Option<Dims> = None;
    for entry in parse_manifest(&text)? {
        let path = root.join(&entry.path);
        let (d, images) = read_corpus(&path)?;
        if images.is_empty() {
            continue;
        }
        if entry.mean.len() != d.channels {
            return Err(IoError::Format(format!(
                "{}: manifest lists {} channels, file has {}",
                entry.path.display(),
                entry.mean.len(),
                d.channels
            )));
        }
        match dims {
            Some(prev) if prev != d => {
                return Err(IoError::Format(format!(
                    "{}: image size {:?} differs from {:?}",
                    entry.path.display(),
                    d,
                    prev
                )))
            }
            _ => dims = Some(d),
        }
        let plane = d.height * d.width;
        for mut img in images {
            for (c, chunk) in img.data_mut().chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v = (*v - entry.mean[c]) / entry.std[c]);
            }
            out.images.push(img);
        }
        out.labels = match (out.labels, read_labels(&path)?) {
            (Some(mut all), Some(l)) => {
                if l.len() != out.images.len() - all.len() {
                    return Err(IoError::Format(format!(
                        "{}: label count does not match records",
                        path.display()
                    )));
                }
                all.extend(l);
                Some(all)
            }
            _ => None,
        };
    }
    if out.images.is_empty() {
        out.labels = None;
    }
    Ok(out)
}
