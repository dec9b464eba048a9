use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::House;
use crate::error::{JigsawError, Result};

/// Serializes houses, one JSON object per line.
pub fn to_jsonl_string(houses: &[House]) -> Result<String> {
    let mut out = String::new();
    for h in houses {
        out.push_str(&serde_json::to_string(h)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses and validates JSONL text. Blank lines are skipped; line numbers are 1-based.
pub fn from_jsonl_str(text: &str) -> Result<Vec<House>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(i + 1, l))
        .collect()
}

fn parse_line(line: usize, text: &str) -> Result<House> {
    let house: House = serde_json::from_str(text).map_err(|e| JigsawError::Parse {
        line,
        message: e.to_string(),
    })?;
    house.validate()?;
    Ok(house)
}

pub fn write_jsonl(path: impl AsRef<Path>, houses: &[House]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for h in houses {
        serde_json::to_writer(&mut w, h)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<House>> {
    let reader = BufReader::new(File::open(path)?);
    let mut houses = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        houses.push(parse_line(i + 1, &line)?);
    }
    Ok(houses)
}
