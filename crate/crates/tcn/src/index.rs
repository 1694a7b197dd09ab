//! Inter-table context index: for a target cell, the cells of *other* tables
//! that share its value, sit at the same schema position, or carry the same
//! value as the target table's page topic.
//!
//! The index is built once, is immutable afterwards, and serves budgeted
//! uniform samples. Sampling takes an explicit seed so concurrent readers
//! share no mutable state.

use crate::corpus::LabeledDataset;
use crate::error::{Result, TcnError};
use crate::seed::mix;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const INDEX_MAGIC: &[u8; 8] = b"TCNIDX01";

/// Location of one cell occurrence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellRef {
    pub table: usize,
    pub row: usize,
    pub col: usize,
}

impl CellRef {
    pub fn new(table: usize, row: usize, col: usize) -> CellRef {
        CellRef { table, row, col }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NeighborKind {
    Value,
    Position,
    Topic,
}

impl NeighborKind {
    fn tag(self) -> u64 {
        match self {
            NeighborKind::Value => 1,
            NeighborKind::Position => 2,
            NeighborKind::Topic => 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ContextIndex {
    /// normalized value -> every occurrence, in table/row/col scan order.
    value_index: BTreeMap<String, Vec<CellRef>>,
    /// (schema_id, row, col) -> occurrences.
    position_index: BTreeMap<(usize, usize, usize), Vec<CellRef>>,
    /// normalized topic value -> occurrences of cells carrying that value.
    topic_index: BTreeMap<String, Vec<CellRef>>,
    budget: usize,
    include_header_positions: bool,
}

impl ContextIndex {
    /// Build with the default position-index policy (header row excluded:
    /// same-schema headers are identical and carry no extra signal).
    pub fn build(ds: &LabeledDataset, budget: usize) -> Result<ContextIndex> {
        ContextIndex::build_with(ds, budget, false)
    }

    pub fn build_with(
        ds: &LabeledDataset,
        budget: usize,
        include_header_positions: bool,
    ) -> Result<ContextIndex> {
        if budget == 0 {
            return Err(TcnError::Data("sampling budget must be at least 1".into()));
        }
        let topics: BTreeSet<&str> = ds
            .tables
            .iter()
            .map(|t| t.topic.normalized.as_str())
            .filter(|t| !t.is_empty())
            .collect();

        let mut idx = ContextIndex {
            value_index: BTreeMap::new(),
            position_index: BTreeMap::new(),
            topic_index: BTreeMap::new(),
            budget,
            include_header_positions,
        };
        for table in &ds.tables {
            for (m, row) in table.rows.iter().enumerate() {
                for (n, cell) in row.iter().enumerate() {
                    let at = CellRef::new(table.table_id, m, n);
                    // Empty cells and the mask sentinel are excluded from
                    // value/topic keys so they gain no neighbors there.
                    if !cell.is_empty() && !cell.is_masked() {
                        idx.value_index
                            .entry(cell.normalized.clone())
                            .or_default()
                            .push(at);
                        if topics.contains(cell.normalized.as_str()) {
                            idx.topic_index
                                .entry(cell.normalized.clone())
                                .or_default()
                                .push(at);
                        }
                    }
                    if m >= 1 || include_header_positions {
                        idx.position_index
                            .entry((table.schema_id, m, n))
                            .or_default()
                            .push(at);
                    }
                }
            }
        }
        Ok(idx)
    }

    /// An index with no entries; every neighbor set is empty.
    pub fn empty(budget: usize) -> ContextIndex {
        ContextIndex {
            value_index: BTreeMap::new(),
            position_index: BTreeMap::new(),
            topic_index: BTreeMap::new(),
            budget: budget.max(1),
            include_header_positions: false,
        }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    /// The full neighbor set of `t`, cross-table occurrences only, in index
    /// order.
    pub fn neighbors(&self, ds: &LabeledDataset, t: CellRef, kind: NeighborKind) -> Vec<CellRef> {
        let table = &ds.tables[t.table];
        let list: Option<&Vec<CellRef>> = match kind {
            NeighborKind::Value => {
                let cell = table.cell(t.row, t.col);
                if cell.is_empty() || cell.is_masked() {
                    None
                } else {
                    self.value_index.get(&cell.normalized)
                }
            }
            NeighborKind::Position => {
                if t.row == 0 && !self.include_header_positions {
                    None
                } else {
                    self.position_index.get(&(table.schema_id, t.row, t.col))
                }
            }
            NeighborKind::Topic => {
                if table.topic.is_empty() {
                    None
                } else {
                    self.topic_index.get(&table.topic.normalized)
                }
            }
        };
        match list {
            None => Vec::new(),
            Some(refs) => refs.iter().copied().filter(|r| r.table != t.table).collect(),
        }
    }

    /// At most `budget` neighbors, uniform without replacement, deterministic
    /// for a fixed seed. Under budget the full set is returned in index order.
    pub fn sample_neighbors(
        &self,
        ds: &LabeledDataset,
        t: CellRef,
        kind: NeighborKind,
        seed: u64,
    ) -> Vec<CellRef> {
        let full = self.neighbors(ds, t, kind);
        if full.len() <= self.budget {
            return full;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, full.len(), self.budget)
            .into_iter()
            .map(|i| full[i])
            .collect()
    }

    // ---- snapshot ------------------------------------------------------

    pub fn save(&self, path: &Path, corpus_fingerprint: u64) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&corpus_fingerprint.to_le_bytes())?;
        w.write_all(&(self.budget as u64).to_le_bytes())?;
        w.write_all(&[self.include_header_positions as u8])?;
        write_str_section(&mut w, &self.value_index)?;
        w.write_all(&(self.position_index.len() as u64).to_le_bytes())?;
        for ((schema, m, n), refs) in &self.position_index {
            for v in [*schema, *m, *n] {
                w.write_all(&(v as u32).to_le_bytes())?;
            }
            write_refs(&mut w, refs)?;
        }
        write_str_section(&mut w, &self.topic_index)?;
        w.flush()?;
        Ok(())
    }

    /// Load a snapshot, refusing one built from a different corpus.
    pub fn load(path: &Path, corpus_fingerprint: u64) -> Result<ContextIndex> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(TcnError::Data("bad index snapshot magic".into()));
        }
        let fp = read_u64(&mut r)?;
        if fp != corpus_fingerprint {
            return Err(TcnError::Data(
                "index snapshot was built from a different corpus".into(),
            ));
        }
        let budget = read_u64(&mut r)? as usize;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let value_index = read_str_section(&mut r)?;
        let n_pos = read_u64(&mut r)? as usize;
        let mut position_index = BTreeMap::new();
        for _ in 0..n_pos {
            let schema = read_u32(&mut r)? as usize;
            let m = read_u32(&mut r)? as usize;
            let n = read_u32(&mut r)? as usize;
            position_index.insert((schema, m, n), read_refs(&mut r)?);
        }
        let topic_index = read_str_section(&mut r)?;
        Ok(ContextIndex {
            value_index,
            position_index,
            topic_index,
            budget,
            include_header_positions: flag[0] != 0,
        })
    }
}

/// Seed for one sampling decision, derived from the root seed, the epoch,
/// the target cell, and the neighbor kind.
pub fn sample_seed(root: u64, epoch: u64, t: CellRef, kind: NeighborKind) -> u64 {
    mix(
        root,
        &[
            epoch,
            t.table as u64,
            t.row as u64,
            t.col as u64,
            kind.tag(),
        ],
    )
}

fn write_str_section<W: Write>(w: &mut W, map: &BTreeMap<String, Vec<CellRef>>) -> Result<()> {
    w.write_all(&(map.len() as u64).to_le_bytes())?;
    for (key, refs) in map {
        w.write_all(&(key.len() as u32).to_le_bytes())?;
        w.write_all(key.as_bytes())?;
        write_refs(w, refs)?;
    }
    Ok(())
}

fn read_str_section<R: Read>(r: &mut R) -> Result<BTreeMap<String, Vec<CellRef>>> {
    let n = read_u64(r)? as usize;
    let mut map = BTreeMap::new();
    for _ in 0..n {
        let len = read_u32(r)? as usize;
        let mut key = vec![0u8; len];
        r.read_exact(&mut key)?;
        let key =
            String::from_utf8(key).map_err(|_| TcnError::Data("non-utf8 index key".into()))?;
        map.insert(key, read_refs(r)?);
    }
    Ok(map)
}

fn write_refs<W: Write>(w: &mut W, refs: &[CellRef]) -> Result<()> {
    w.write_all(&(refs.len() as u64).to_le_bytes())?;
    for r in refs {
        for v in [r.table, r.row, r.col] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_refs<R: Read>(r: &mut R) -> Result<Vec<CellRef>> {
    let n = read_u64(r)? as usize;
    let mut refs = Vec::with_capacity(n);
    for _ in 0..n {
        let table = read_u32(r)? as usize;
        let row = read_u32(r)? as usize;
        let col = read_u32(r)? as usize;
        refs.push(CellRef::new(table, row, col));
    }
    Ok(refs)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
