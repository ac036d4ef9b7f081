use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{DatasetSplit, PairedSample};
use crate::audio::read_wav;
use crate::audio::write_wav_pcm16;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bucket {
    Train,
    Val,
    Test,
}

/// Assigns a corpus entry to a split from a hash of its audio path, so the
/// assignment is stable no matter how the manifest is ordered.
pub fn split_bucket(audio_path: &str) -> Bucket {
    let digest = Sha256::digest(audio_path.as_bytes());
    let h = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    match h % 10 {
        0..=6 => Bucket::Train,
        7 => Bucket::Val,
        _ => Bucket::Test,
    }
}

/// Reads a CSV manifest of `audio_path,visual_path,label` rows. Paths are
/// relative to `dir`; a header row is optional.
pub fn load_corpus(dir: &Path, manifest: &Path) -> Result<DatasetSplit> {
    let manifest_path = if manifest.is_absolute() { manifest.to_path_buf() } else { dir.join(manifest) };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(&manifest_path)
        .map_err(|e| Error::Manifest {
            line: 0,
            message: format!("cannot open {}: {e}", manifest_path.display()),
        })?;

    let mut split = DatasetSplit::default();
    let mut visual_dim = None;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Manifest {
            line: e.position().map_or(i + 1, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(i + 1, |p| p.line() as usize);
        let bad = |message: String| Error::Manifest { line, message };
        if record.len() != 3 {
            return Err(bad(format!("expected 3 fields (audio,visual,label), found {}", record.len())));
        }
        let label = match record[2].parse::<usize>() {
            Ok(l) => l,
            Err(_) if i == 0 => continue, // header
            Err(_) => return Err(bad(format!("label {:?} is not a non-negative integer", &record[2]))),
        };
        let resolve = |field: &str| -> Result<PathBuf> {
            let p = dir.join(field);
            if p.is_file() {
                Ok(p)
            } else {
                Err(bad(format!("file not found: {}", p.display())))
            }
        };
        let audio_path = resolve(&record[0])?;
        let visual_path = resolve(&record[1])?;
        let audio = read_wav(&audio_path)?;
        let visual = Tensor::load(&visual_path).map_err(|e| bad(format!("{}: {e}", visual_path.display())))?;
        let visual = visual.reshape(&[visual.numel()])?;
        match visual_dim {
            None => visual_dim = Some(visual.numel()),
            Some(d) if d != visual.numel() => {
                return Err(bad(format!("visual length {} differs from earlier entries ({d})", visual.numel())))
            }
            _ => {}
        }
        split.n_classes = split.n_classes.max(label + 1);
        let sample = PairedSample {
            key: record[0].to_string(),
            visual,
            audio,
            label,
        };
        match split_bucket(&record[0]) {
            Bucket::Train => split.train.push(sample),
            Bucket::Val => split.val.push(sample),
            Bucket::Test => split.test.push(sample),
        }
    }
    Ok(split)
}

/// Writes every sample as a 16-bit WAV plus a visual tensor file, with a
/// `manifest.csv` that [`load_corpus`] reads back.
pub fn export_dataset(split: &DatasetSplit, dir: &Path) -> Result<()> {
    crate::fsutil::write_dir_atomic(dir, |tmp| {
        for sub in ["audio", "visual"] {
            std::fs::create_dir_all(tmp.join(sub)).map_err(|e| Error::io(format!("creating {sub}/"), e))?;
        }
        let mut manifest = String::from("audio,visual,label\n");
        for s in split.all() {
            let wav = format!("audio/{}.wav", s.key);
            let vis = format!("visual/{}.tensor", s.key);
            write_wav_pcm16(&tmp.join(&wav), &s.audio)?;
            s.visual.save(&tmp.join(&vis))?;
            manifest.push_str(&format!("{wav},{vis},{}\n", s.label));
        }
        crate::fsutil::write_atomic(&tmp.join("manifest.csv"), manifest.as_bytes())
    })
}
