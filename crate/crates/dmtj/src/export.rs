//! Attention and similarity exports: binary PGM heatmaps upscaled by
//! nearest neighbor, raw matrices in the corpus record format, and
//! `key=value` summaries.

use std::fs;
use std::path::{Path, PathBuf};

use dmtj_core::model::{FeatureSource, Model};
use dmtj_core::visualize::{mean_attention, similarity_map, SimilarityMap};
use dmtj_core::Tensor;

use crate::corpus::{encode, write_atomic};
use crate::error::{IoError, IoResult};

/// P5 bytes for `values` on a `rows × cols` grid, each cell drawn as a
/// `scale × scale` square. Values map linearly from `[lo, hi]` to `0..=255`.
pub fn pgm(values: &[f64], rows: usize, cols: usize, scale: usize, lo: f64, hi: f64) -> Vec<u8> {
    assert_eq!(values.len(), rows * cols);
    let (h, w) = (rows * scale, cols * scale);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    let span = hi - lo;
    let level = |v: f64| -> u8 {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    };
    for y in 0..h {
        for x in 0..w {
            out.push(level(values[(y / scale) * cols + x / scale]));
        }
    }
    out
}

/// Width, height and pixels of a P5 image.
pub fn parse_pgm(bytes: &[u8]) -> IoResult<(usize, usize, &[u8])> {
    let mut fields = Vec::new();
    let mut at = 0;
    while fields.len() < 4 {
        while at < bytes.len() && bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err(IoError::Format("short PGM header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..at]).unwrap_or(""));
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(IoError::Format("not an 8-bit P5 image".into()));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| IoError::Format("bad PGM size".into()));
    let (w, h) = (parse(fields[1])?, parse(fields[2])?);
    let pixels = &bytes[at + 1..];
    if pixels.len() != w * h {
        return Err(IoError::SizeMismatch {
            expected: (w * h) as u64,
            actual: pixels.len() as u64,
        });
    }
    Ok((w, h, pixels))
}

/// Files written by an export, in creation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Exported {
    pub files: Vec<PathBuf>,
}

fn put(out: &mut Exported, path: PathBuf, bytes: &[u8]) -> IoResult<()> {
    write_atomic(&path, bytes)?;
    out.files.push(path);
    Ok(())
}

fn matrix_record(m: &Tensor) -> IoResult<Vec<u8>> {
    let (r, c) = m.dims2()?;
    encode(&[m.clone().reshape(vec![1, r, c])?])
}

/// Head-averaged attention of `layer`: the raw `N×N` matrix, one heatmap
/// per query patch, and the mean over queries.
pub fn export_attention(model: &Model, image: &Tensor, layer: isize, dir: &Path) -> IoResult<Exported> {
    fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    let heads = model.attention(image, layer, FeatureSource::Target)?;
    let mean = mean_attention(&heads)?;
    let enc = &model.config.encoder;
    let (rows, cols, p) = (enc.grid_rows(), enc.grid_cols(), enc.patch_size);
    let n = rows * cols;
    let mut out = Exported::default();
    put(&mut out, dir.join("attention.raw"), &matrix_record(&mean)?)?;
    let mut avg = vec![0.0; n];
    for q in 0..n {
        let row = mean.row(q);
        row.iter().zip(avg.iter_mut()).for_each(|(v, a)| *a += v / n as f64);
        let hi = row.iter().cloned().fold(0.0, f64::max);
        put(&mut out, dir.join(format!("attention_q{q:03}.pgm")), &pgm(row, rows, cols, p, 0.0, hi))?;
    }
    let hi = avg.iter().cloned().fold(0.0, f64::max);
    put(&mut out, dir.join("attention_mean.pgm"), &pgm(&avg, rows, cols, p, 0.0, hi))?;
    Ok(out)
}

/// Cosine map of `query` over last-layer target features, its top-fraction
/// mask, and a summary.
pub fn export_similarity(
    model: &Model,
    image: &Tensor,
    query: usize,
    fraction: f64,
    dir: &Path,
) -> IoResult<(SimilarityMap, Exported)> {
    fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    let feats = model.features(image, FeatureSource::Target)?;
    let map = similarity_map(&feats, query, fraction)?;
    let enc = &model.config.encoder;
    let (rows, cols, p) = (enc.grid_rows(), enc.grid_cols(), enc.patch_size);
    let mut out = Exported::default();
    put(
        &mut out,
        dir.join(format!("similarity_q{query:03}.pgm")),
        &pgm(&map.scores, rows, cols, p, -1.0, 1.0),
    )?;
    let mask: Vec<f64> = map.mask.iter().map(|&b| b as u8 as f64).collect();
    put(&mut out, dir.join(format!("mask_q{query:03}.pgm")), &pgm(&mask, rows, cols, p, 0.0, 1.0))?;
    let members: Vec<String> = (0..mask.len()).filter(|&i| map.mask[i]).map(|i| i.to_string()).collect();
    let scores: Vec<String> = map.scores.iter().map(|s| format!("{s:.6}")).collect();
    let text = format!(
        "query={query}\nfraction={fraction}\nmask_size={}\nmask={}\nscores={}\n",
        members.len(),
        members.join(","),
        scores.join(",")
    );
    put(&mut out, dir.join(format!("similarity_q{query:03}.txt")), text.as_bytes())?;
    Ok((map, out))
}
