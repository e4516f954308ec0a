use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter};
use std::path::Path;

use k2r_core::databuild::write_jsonl;
use k2r_core::DialogueEpisode;
use serde::Serialize;

use crate::HarnessError;

/// Reads a DialogueEpisode JSONL file. Blank lines are skipped; ids must be
/// unique and every episode needs at least one turn.
pub fn read_episodes(path: &Path) -> Result<Vec<DialogueEpisode>, HarnessError> {
    let file = File::open(path).map_err(|e| HarnessError::data(path.display(), e))?;
    let mut episodes = Vec::new();
    let mut ids = HashSet::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| HarnessError::data(path.display(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let at = || format!("{}:{}", path.display(), n + 1);
        let episode: DialogueEpisode =
            serde_json::from_str(&line).map_err(|e| HarnessError::data(at(), e))?;
        if episode.turns.is_empty() {
            return Err(HarnessError::data(at(), "episode has no turns"));
        }
        if !ids.insert(episode.example_id.clone()) {
            return Err(HarnessError::data(
                at(),
                format!("duplicate example_id {:?}", episode.example_id),
            ));
        }
        episodes.push(episode);
    }
    Ok(episodes)
}

pub fn write_jsonl_file<T: Serialize>(path: &Path, items: &[T]) -> Result<(), HarnessError> {
    let file = File::create(path).map_err(|e| HarnessError::data(path.display(), e))?;
    write_jsonl(BufWriter::new(file), items).map_err(|e| HarnessError::data(path.display(), e))
}

pub fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut bytes =
        serde_json::to_vec_pretty(value).map_err(|e| HarnessError::data(path.display(), e))?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| HarnessError::data(path.display(), e))
}
