//! Retrieved neighbor sets and their JSONL dump format.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where an n-gram neighbor came from: the query n-gram and the indexed
/// n-gram it matched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchInfo {
    pub width: usize,
    pub query_start: usize,
    pub match_pair: u32,
    pub match_start: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub pair_id: u32,
    pub score: f64,
    pub matched: Option<MatchInfo>,
}

impl Neighbor {
    pub fn new(pair_id: u32, score: f64) -> Self {
        Neighbor {
            pair_id,
            score,
            matched: None,
        }
    }
}

/// Score descending, then pair id ascending.
pub fn rank_order(a: &Neighbor, b: &Neighbor) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.pair_id.cmp(&b.pair_id))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NeighborSet {
    pub query_id: Option<u32>,
    pub neighbors: Vec<Neighbor>,
}

impl NeighborSet {
    pub fn new(query_id: Option<u32>, mut neighbors: Vec<Neighbor>) -> Self {
        neighbors.sort_by(rank_order);
        NeighborSet { query_id, neighbors }
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn ids(&self) -> Vec<u32> {
        self.neighbors.iter().map(|n| n.pair_id).collect()
    }

    pub fn truncate(&mut self, n: usize) {
        self.neighbors.truncate(n);
    }

    /// One JSONL row. Scores are written with 17 significant digits so the
    /// dump round-trips exactly.
    pub fn to_json_line(&self, with_matches: bool) -> String {
        let mut s = String::from("{\"query_id\":");
        match self.query_id {
            Some(q) => write!(s, "{q}").unwrap(),
            None => s.push_str("null"),
        }
        s.push_str(",\"neighbors\":[");
        for (i, n) in self.neighbors.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            write!(s, "[{},{:.16e}]", n.pair_id, n.score).unwrap();
        }
        s.push(']');
        if with_matches && self.neighbors.iter().any(|n| n.matched.is_some()) {
            let matches: Vec<Option<MatchInfo>> = self.neighbors.iter().map(|n| n.matched).collect();
            s.push_str(",\"matches\":");
            s.push_str(&serde_json::to_string(&matches).expect("plain struct serializes"));
        }
        s.push('}');
        s
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            query_id: Option<u32>,
            neighbors: Vec<(u32, f64)>,
            #[serde(default)]
            matches: Option<Vec<Option<MatchInfo>>>,
        }
        let row: Row = serde_json::from_str(line)?;
        let matches = row.matches.unwrap_or_default();
        let neighbors = row
            .neighbors
            .into_iter()
            .enumerate()
            .map(|(i, (pair_id, score))| Neighbor {
                pair_id,
                score,
                matched: matches.get(i).copied().flatten(),
            })
            .collect();
        Ok(NeighborSet {
            query_id: row.query_id,
            neighbors,
        })
    }
}

pub fn write_neighbor_sets(path: &Path, sets: &[NeighborSet], with_matches: bool) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for s in sets {
        writeln!(w, "{}", s.to_json_line(with_matches)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_neighbor_sets(path: &Path) -> Result<Vec<NeighborSet>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(NeighborSet::from_json_line(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}
