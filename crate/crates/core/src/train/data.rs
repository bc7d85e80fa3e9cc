//! Training samples at network resolution.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::io::{read_image, read_pgm};
use crate::imaging::{normalize_cxr, GrayImage, ProbMask};
use crate::scoring::BrixiaScore;
use crate::synth::{dataset_sample, split_counts, DatasetConfig, SampleRecord};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// Preprocessed and resized to the network input.
    pub image: GrayImage,
    /// Binary lung mask at the same size.
    pub mask: ProbMask,
    pub score: BrixiaScore,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Normalization (when enabled) at stored resolution, then resizing.
pub fn prepare_image(img: &GrayImage, size: usize, preprocess: bool) -> GrayImage {
    let img = if preprocess {
        normalize_cxr(img)
    } else {
        rescale_unit(img)
    };
    if img.height() == size && img.width() == size {
        img
    } else {
        img.resize(size, size)
    }
}

/// Min-max rescaling to `[0, 1]`, the fallback without preprocessing.
fn rescale_unit(img: &GrayImage) -> GrayImage {
    let (lo, hi) = img
        .pixels()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    if hi > lo {
        img.map(|v| (v - lo) / (hi - lo))
    } else {
        img.clone()
    }
}

pub fn prepare_mask(mask: &ProbMask, size: usize) -> ProbMask {
    if mask.height() == size && mask.width() == size {
        mask.threshold(0.5)
    } else {
        mask.resize(size, size).threshold(0.5)
    }
}

impl Sample {
    pub fn from_record(rec: &SampleRecord, size: usize, preprocess: bool) -> Self {
        Self {
            id: rec.id.clone(),
            image: prepare_image(&rec.image, size, preprocess),
            mask: prepare_mask(&rec.lung_mask, size),
            score: rec.score,
        }
    }
}

impl Dataset {
    /// Renders a phantom dataset in memory with the same ids and splits
    /// that [`crate::synth::gen_dataset`] writes.
    pub fn synthetic(cfg: &DatasetConfig, size: usize, preprocess: bool) -> Result<Self> {
        let (tr, va, _) = split_counts(cfg.n, cfg.split)?;
        let mut ds = Dataset::default();
        for i in 0..cfg.n {
            let s = Sample::from_record(&dataset_sample(cfg, i)?, size, preprocess);
            match i {
                i if i < tr => ds.train.push(s),
                i if i < tr + va => ds.val.push(s),
                _ => ds.test.push(s),
            }
        }
        Ok(ds)
    }

    /// Reads a directory written by `gen_dataset` (or laid out the same way).
    pub fn load(dir: &Path, size: usize, preprocess: bool) -> Result<Self> {
        let scores = read_scores(&dir.join("scores.csv"))?;
        let mut ds = Dataset::default();
        for (split, file) in [
            (Split::Train, "train.txt"),
            (Split::Val, "val.txt"),
            (Split::Test, "test.txt"),
        ] {
            let p = dir.join(file);
            let list = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            for id in list.lines().map(str::trim).filter(|l| !l.is_empty()) {
                let score = *scores.get(id).ok_or_else(|| {
                    Error::Missing(format!(
                        "score row for `{id}` in {}",
                        dir.join("scores.csv").display()
                    ))
                })?;
                let image = read_image(&dir.join("images").join(format!("{id}.pgm")))?;
                let mask = read_pgm(&dir.join("masks").join(format!("{id}.pgm")))?;
                let s = Sample {
                    id: id.to_string(),
                    image: prepare_image(&image, size, preprocess),
                    mask: prepare_mask(&mask, size),
                    score,
                };
                ds.split_mut(split).push(s);
            }
        }
        Ok(ds)
    }

    pub fn split(&self, s: Split) -> &[Sample] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, s: Split) -> &mut Vec<Sample> {
        match s {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

/// Parses `id,A,B,C,D,E,F`.
pub fn parse_scores_csv(text: &str, context: &str) -> Result<Vec<(String, BrixiaScore)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "id,A,B,C,D,E,F" => {}
        _ => return Err(Error::parse(context, "expected header id,A,B,C,D,E,F")),
    }
    let mut out = Vec::new();
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |why: String| Error::parse(format!("{context}:{}", ln + 1), why);
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 7 {
            return Err(bad("expected 7 fields".into()));
        }
        let mut v = [0u8; 6];
        for (k, cell) in v.iter_mut().enumerate() {
            *cell = f[1 + k]
                .parse()
                .map_err(|_| bad(format!("`{}` is not a score", f[1 + k])))?;
        }
        out.push((
            f[0].to_string(),
            BrixiaScore::from_abcdef(v).map_err(|e| bad(e.to_string()))?,
        ));
    }
    Ok(out)
}

fn read_scores(path: &Path) -> Result<HashMap<String, BrixiaScore>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_scores_csv(&text, &path.display().to_string())?
        .into_iter()
        .collect())
}
