//! Line-delimited dataset files: one sequence per line as
//! `prompt_len<TAB>label<TAB>space-separated token ids`, where label is
//! `1`, `0` or `-` (unlabeled). Lines starting with `#` are comments.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::toylm::SynthDataset;

pub const DATASET_HEADER: &str = "# slmkit-dataset 1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LoadedDataset {
    pub data: SynthDataset,
    /// False when any row carries `-` as its label; `data.labels` is then
    /// filled with `false` and must not be used.
    pub labeled: bool,
}

pub fn write_dataset(ds: &SynthDataset, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(ds.len() * 64);
    out.push_str(DATASET_HEADER);
    out.push_str("\n# prompt_len\tlabel\ttokens\n");
    for ((seq, &pl), &label) in ds.sequences.iter().zip(&ds.prompt_lens).zip(&ds.labels) {
        let toks: Vec<String> = seq.iter().map(usize::to_string).collect();
        writeln!(out, "{pl}\t{}\t{}", u8::from(label), toks.join(" ")).expect("writing to a String");
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<LoadedDataset> {
    let text = fs::read_to_string(path)?;
    parse_dataset(&text).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_dataset(text: &str) -> Result<LoadedDataset> {
    let mut data = SynthDataset::default();
    let mut labeled = true;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| Error::Format(format!("line {}: {what}", i + 1));
        let mut cols = line.split('\t');
        let (Some(pl), Some(label), Some(toks), None) = (cols.next(), cols.next(), cols.next(), cols.next()) else {
            return Err(bad("expected 3 tab-separated columns"));
        };
        let pl: usize = pl.parse().map_err(|_| bad("bad prompt_len"))?;
        let label = match label {
            "1" => true,
            "0" => false,
            "-" => {
                labeled = false;
                false
            }
            _ => return Err(bad("label must be 1, 0 or -")),
        };
        let seq = toks
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad("bad token id"))?;
        if pl == 0 || pl >= seq.len() {
            return Err(bad("prompt_len must be in 1..len"));
        }
        data.sequences.push(seq);
        data.prompt_lens.push(pl);
        data.labels.push(label);
    }
    if data.is_empty() {
        return Err(Error::Format("dataset has no rows".into()));
    }
    Ok(LoadedDataset { data, labeled })
}
