//! Synthetic repositories with planted helpful, misleading and irrelevant
//! cross-file chunks.
//!
//! Every identifier carries the instance number, so the retrieval query of
//! one instance shares no token with another instance's files. For instance
//! `i` the target line is
//!
//! ```text
//! res{i} = fetch{i}_primary(arg{i}, opt{i})
//! ```
//!
//! and the prefix already defines `arg{i}` and `opt{i}`. Helpful chunks
//! contain the whole target line. Misleading chunks repeat most of the query
//! and call the decoy `fetch{i}_legacy`. Irrelevant chunks share one query
//! token and nothing with the target. Each planted chunk is its own file of
//! at most ten lines, so it is exactly one retrieval chunk.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CompletionInstance, RepoSnapshot, Setting, SourceFile};
use crate::mock::OracleEntry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub helpful: usize,
    pub misleading: usize,
    pub irrelevant: usize,
}

impl PlantSpec {
    pub fn new(helpful: usize, misleading: usize, irrelevant: usize) -> Self {
        Self {
            helpful,
            misleading,
            irrelevant,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantRole {
    Helpful,
    Misleading,
    Irrelevant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantRecord {
    pub instance_id: String,
    pub path: String,
    pub role: PlantRole,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthCorpus {
    pub repo: RepoSnapshot,
    pub instances: Vec<CompletionInstance>,
    pub plants: Vec<PlantRecord>,
    pub oracle_entries: Vec<OracleEntry>,
}

impl SynthCorpus {
    /// Ids of instances with at least one planted chunk of `role`.
    pub fn instances_with(&self, role: PlantRole) -> Vec<String> {
        let mut ids: Vec<String> = self
            .plants
            .iter()
            .filter(|p| p.role == role)
            .map(|p| p.instance_id.clone())
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }
}

fn file(path: String, text: String) -> SourceFile {
    SourceFile::from_text(path, &text)
}

/// Builds `n` instances; instance `i` uses `plants[i % plants.len()]`.
pub fn synth_corpus(seed: u64, n: usize, plants: &[PlantSpec]) -> SynthCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut files = Vec::new();
    let mut instances = Vec::new();
    let mut records = Vec::new();
    let mut entries = Vec::new();
    for i in 0..n {
        let t = format!("{i:04}");
        let id = format!("synth-{t}");
        let plant = plants.get(i % plants.len().max(1)).copied().unwrap_or(PlantSpec::new(0, 0, 0));

        let mut plant_file = |role: PlantRole, j: usize, body: String| {
            let dir = match role {
                PlantRole::Helpful => "helpful",
                PlantRole::Misleading => "misleading",
                PlantRole::Irrelevant => "misc",
            };
            let path = format!("lib/{dir}{t}_{j}.py");
            records.push(PlantRecord {
                instance_id: id.clone(),
                path: path.clone(),
                role,
            });
            files.push(file(path, body));
        };
        for j in 0..plant.helpful {
            plant_file(
                PlantRole::Helpful,
                j,
                format!("res{t} = fetch{t}_primary(arg{t}, opt{t})\nkeep{t}h{j} = res{t}\n"),
            );
        }
        for j in 0..plant.misleading {
            plant_file(
                PlantRole::Misleading,
                j,
                format!(
                    "w{t}x0 = seed{t}\nw{t}x1 = seed{t}\nw{t}x2 = seed{t}\nw{t}x3 = mode{t}\n\
                     out{t} = fetch{t}_legacy(arg{t}, opt{t})\nalt{t}m{j} = out{t}\n"
                ),
            );
        }
        for j in 0..plant.irrelevant {
            plant_file(PlantRole::Irrelevant, j, format!("tmp{t}n{j}a = mode{t}\ntmp{t}n{j}b = tmp{t}n{j}a\n"));
        }

        let mut body = String::new();
        for k in 0..3 {
            body.push_str(&format!("from lib import misc{t}_{k}\n"));
        }
        body.push('\n');
        for k in 0..8 {
            body.push_str(&format!("w{t}x{k} = seed{t}\n"));
        }
        body.push_str(&format!("arg{t} = w{t}x0\nopt{t} = mode{t}\n"));
        let target_line = format!("res{t} = fetch{t}_primary(arg{t}, opt{t})");
        body.push_str(&target_line);
        body.push('\n');
        body.push_str(&format!("end{t} = seed{t}\n"));
        let path = format!("app/task{t}.py");
        let source = file(path, body);
        let start = source.lines.len() - 2;
        let setting = if rng.random_bool(0.5) {
            Setting::Infilling
        } else {
            Setting::LeftToRight
        };
        let instance = CompletionInstance::from_file_span(id, &source, start, start + 1, setting);
        entries.push(OracleEntry {
            anchor: instance.prefix_lines.last().cloned().unwrap_or_default(),
            target: target_line,
        });
        instances.push(instance);
        files.push(source);
    }
    SynthCorpus {
        repo: RepoSnapshot::new("synth", files, alloc::vec!["py".into()]),
        instances,
        plants: records,
        oracle_entries: entries,
    }
}
