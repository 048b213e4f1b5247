//! Line-delimited JSON corpora. Images are stored next to the file as PNGs or
//! inline as base64 data URIs.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::{QualityRecord, TaskClass, TrainingExample};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::normalize_score;
use crate::roi::RoiSpec;

const DATA_URI_PREFIX: &str = "data:image/png;base64,";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    /// Larger is better.
    Mos,
    /// Larger is worse.
    Dmos,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageStorage {
    /// PNG files under `images/` next to the JSONL file, referenced by relative path.
    Path,
    /// Inline `data:image/png;base64,…` strings.
    Base64,
}

impl std::fmt::Display for ImageStorage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ImageStorage::Path => "path",
            ImageStorage::Base64 => "base64",
        })
    }
}

impl std::str::FromStr for ImageStorage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "path" => Ok(ImageStorage::Path),
            "base64" => Ok(ImageStorage::Base64),
            _ => Err(Error::InvalidInput(format!("unknown image storage {s:?}, expected path or base64"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Stage1Line {
    image: String,
    prompt: String,
    answer: String,
    bbox: [usize; 4],
    task: TaskClass,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Stage2Line {
    image: String,
    prompt: String,
    score: f64,
    native_range: [f64; 2],
    polarity: Polarity,
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn store_image(image: &Image, storage: ImageStorage, dir: &Path, name: &str) -> Result<String> {
    match storage {
        ImageStorage::Base64 => Ok(format!("{DATA_URI_PREFIX}{}", STANDARD.encode(image.to_png_bytes()?))),
        ImageStorage::Path => {
            let rel = format!("images/{name}.png");
            fs::create_dir_all(dir.join("images"))?;
            image.save_png(&dir.join(&rel))?;
            Ok(rel)
        }
    }
}

fn load_image(field: &str, dir: &Path, size: usize) -> std::result::Result<Image, String> {
    if let Some(b64) = field.strip_prefix(DATA_URI_PREFIX) {
        let bytes = STANDARD.decode(b64).map_err(|e| format!("bad base64 image: {e}"))?;
        Image::from_encoded(&bytes, size).map_err(|e| e.to_string())
    } else {
        let path = dir.join(field);
        Image::load(&path, size).map_err(|e| format!("{}: {e}", path.display()))
    }
}

fn write_lines<T: Serialize>(path: &Path, lines: impl Iterator<Item = Result<T>>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for line in lines {
        serde_json::to_writer(&mut out, &line?).map_err(|e| Error::InvalidInput(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn read_lines<T, U>(path: &Path, mut convert: impl FnMut(T) -> std::result::Result<U, String>) -> Result<Vec<U>>
where
    T: for<'de> Deserialize<'de>,
{
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| Error::MalformedLine {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let parsed: T = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        out.push(convert(parsed).map_err(malformed)?);
    }
    Ok(out)
}

pub fn write_stage1(path: &Path, examples: &[TrainingExample], storage: ImageStorage) -> Result<()> {
    let dir = base_dir(path);
    let stem = file_stem(path);
    write_lines(
        path,
        examples.iter().enumerate().map(|(i, ex)| {
            Ok(Stage1Line {
                image: store_image(&ex.image, storage, &dir, &format!("{stem}_{i:06}"))?,
                prompt: ex.prompt.clone(),
                answer: ex.answer.clone(),
                bbox: ex.roi.to_array(),
                task: ex.task,
            })
        }),
    )
}

pub fn read_stage1(path: &Path, image_size: usize) -> Result<Vec<TrainingExample>> {
    let dir = base_dir(path);
    read_lines(path, |l: Stage1Line| {
        if !l.answer.contains("<lvr>") {
            return Err("answer lacks the <lvr> placeholder".into());
        }
        let roi = RoiSpec::from_array(l.bbox);
        roi.validate(image_size).map_err(|e| e.to_string())?;
        Ok(TrainingExample {
            image: load_image(&l.image, &dir, image_size)?,
            prompt: l.prompt,
            answer: l.answer,
            roi,
            task: l.task,
        })
    })
}

pub fn write_stage2(path: &Path, records: &[QualityRecord], storage: ImageStorage) -> Result<()> {
    let dir = base_dir(path);
    let stem = file_stem(path);
    write_lines(
        path,
        records.iter().enumerate().map(|(i, r)| {
            Ok(Stage2Line {
                image: store_image(&r.image, storage, &dir, &format!("{stem}_{i:06}"))?,
                prompt: r.prompt.clone(),
                score: r.mos_native,
                native_range: r.native_range,
                polarity: r.polarity,
            })
        }),
    )
}

/// Reads quality records and maps each native score onto `[1, 5]`. Records are
/// labelled with the file stem as their source.
pub fn read_stage2(path: &Path, image_size: usize) -> Result<Vec<QualityRecord>> {
    let dir = base_dir(path);
    let source = file_stem(path);
    let mut clamped = 0usize;
    let out = read_lines(path, |l: Stage2Line| {
        let (mos, was_clamped) =
            normalize_score(l.score, l.native_range, l.polarity).map_err(|e| e.to_string())?;
        clamped += usize::from(was_clamped);
        Ok(QualityRecord {
            image: load_image(&l.image, &dir, image_size)?,
            prompt: l.prompt,
            mos,
            mos_native: l.score,
            native_range: l.native_range,
            polarity: l.polarity,
            source: source.clone(),
        })
    })?;
    if clamped > 0 {
        log::warn!("{}: {clamped} scores outside their native range were clamped", path.display());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_distortion_example, make_general_vision_example, make_quality_example, ForgeConfig};

    #[test]
    fn round_trip_both_storage_modes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ForgeConfig::default();
        let mut s1 = Vec::new();
        let mut s2 = Vec::new();
        for seed in 0..4 {
            s1.push(make_distortion_example(&cfg, seed).0);
            s1.push(make_general_vision_example(&cfg, seed));
            let (ex, mut rec, _) = make_quality_example(&cfg, seed);
            s1.push(ex);
            rec.source = "stage2".into();
            s2.push(rec);
        }
        for storage in [ImageStorage::Path, ImageStorage::Base64] {
            let p1 = dir.path().join("stage1.jsonl");
            let p2 = dir.path().join("stage2.jsonl");
            write_stage1(&p1, &s1, storage).unwrap();
            write_stage2(&p2, &s2, storage).unwrap();
            assert_eq!(read_stage1(&p1, 32).unwrap(), s1);
            assert_eq!(read_stage2(&p2, 32).unwrap(), s2);
        }
    }

    #[test]
    fn field_names_are_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (ex, rec, _) = make_quality_example(&ForgeConfig::default(), 1);
        let p1 = dir.path().join("a.jsonl");
        let p2 = dir.path().join("b.jsonl");
        write_stage1(&p1, &[ex], ImageStorage::Path).unwrap();
        write_stage2(&p2, &[rec], ImageStorage::Path).unwrap();
        let v1: serde_json::Value = serde_json::from_str(fs::read_to_string(&p1).unwrap().trim()).unwrap();
        let mut keys: Vec<&String> = v1.as_object().unwrap().keys().collect();
        keys.sort();
        assert_eq!(keys, ["answer", "bbox", "image", "prompt", "task"]);
        let v2: serde_json::Value = serde_json::from_str(fs::read_to_string(&p2).unwrap().trim()).unwrap();
        let mut keys: Vec<&String> = v2.as_object().unwrap().keys().collect();
        keys.sort();
        assert_eq!(keys, ["image", "native_range", "polarity", "prompt", "score"]);
        assert_eq!(v2["polarity"], "mos");
    }

    #[test]
    fn empty_file_and_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.jsonl");
        fs::write(&p, "").unwrap();
        assert!(read_stage2(&p, 32).unwrap().is_empty());

        let (_, rec, _) = make_quality_example(&ForgeConfig::default(), 2);
        write_stage2(&p, &[rec.clone(), rec], ImageStorage::Base64).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let first = text.lines().next().unwrap();
        fs::write(&p, format!("{first}\n{}\n", &first[..first.len() / 2])).unwrap();
        match read_stage2(&p, 32) {
            Err(Error::MalformedLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed line, got {other:?}"),
        }
    }

    #[test]
    fn dmos_scores_are_flipped_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let (_, mut rec, _) = make_quality_example(&ForgeConfig::default(), 3);
        rec.mos_native = 0.0;
        rec.native_range = [0.0, 1.0];
        rec.polarity = Polarity::Dmos;
        let p = dir.path().join("d.jsonl");
        write_stage2(&p, &[rec], ImageStorage::Base64).unwrap();
        assert_eq!(read_stage2(&p, 32).unwrap()[0].mos, 5.0);
    }
}
