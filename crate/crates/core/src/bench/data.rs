//! Synthetic referring-expression dataset.
//!
//! Each example is a `G x G` grid of color cells; the query names a
//! color that appears in exactly one cell and the answer is that cell's
//! index. Background cells avoid the query color entirely, and every
//! background color is used at least twice where possible, so the
//! target cell is the unique singleton — identifiable from the image
//! alone, the way a salient object is in a photograph.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Rng;
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecExample {
    /// Row-major `G*G` color ids.
    pub image: Vec<usize>,
    pub query_color: usize,
    pub answer_cell: usize,
}

impl RecExample {
    /// The query color must appear in exactly the answer cell.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let n = cfg.num_visual();
        if self.image.len() != n {
            return Err(Error::invalid("wrong image size"));
        }
        if self.answer_cell >= n || self.query_color >= cfg.num_colors {
            return Err(Error::invalid("answer or query out of range"));
        }
        let occurrences: Vec<usize> = self
            .image
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == self.query_color)
            .map(|(i, _)| i)
            .collect();
        if occurrences != vec![self.answer_cell] {
            return Err(Error::invalid(format!(
                "query color {} occurs at {:?}, expected only cell {}",
                self.query_color, occurrences, self.answer_cell
            )));
        }
        Ok(())
    }
}

/// Seeded, reproducible dataset with a uniform answer-cell distribution.
pub fn generate_dataset(count: usize, cfg: &ModelConfig, rng: &mut Rng) -> Result<Vec<RecExample>> {
    if count == 0 {
        return Err(Error::invalid("dataset count must be >= 1"));
    }
    cfg.validate()?;
    let n = cfg.num_visual();
    let c = cfg.num_colors;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let answer_cell = rng.below(n);
        let query_color = rng.below(c);
        let mut image = vec![0usize; n];
        // background palette excludes the query color
        let palette: Vec<usize> = (0..c).filter(|&x| x != query_color).collect();
        for (i, cell) in image.iter_mut().enumerate() {
            if i != answer_cell {
                *cell = palette[rng.below(palette.len())];
            }
        }
        image[answer_cell] = query_color;
        dedup_singletons(&mut image, answer_cell);
        out.push(RecExample { image, query_color, answer_cell });
    }
    Ok(out)
}

/// Recolor background colors that appear only once so the target stays
/// the unique singleton. Deterministic: singleton cells are visited in
/// index order and recolored to the most frequent background color.
fn dedup_singletons(image: &mut [usize], answer_cell: usize) {
    loop {
        let mut counts = std::collections::BTreeMap::new();
        for (i, &col) in image.iter().enumerate() {
            if i != answer_cell {
                *counts.entry(col).or_insert(0usize) += 1;
            }
        }
        if counts.len() <= 1 {
            return; // a single background color cannot be merged further
        }
        let Some((&singleton, _)) = counts.iter().find(|(_, &cnt)| cnt == 1) else {
            return;
        };
        let (&majority, _) = counts
            .iter()
            .filter(|(&col, _)| col != singleton)
            .max_by_key(|(&col, &cnt)| (cnt, std::cmp::Reverse(col)))
            .expect("at least two background colors");
        for (i, cell) in image.iter_mut().enumerate() {
            if i != answer_cell && *cell == singleton {
                *cell = majority;
                break;
            }
        }
    }
}

pub fn write_jsonl(examples: &[RecExample], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut f, ex)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<RecExample>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
