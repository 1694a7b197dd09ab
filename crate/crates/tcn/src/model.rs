//! The table representation model: initial cell embeddings, intra-table
//! column/row attention, three inter-table aggregators (shared value, shared
//! schema position, topic mentions), fusion into a per-cell representation,
//! column pooling, and the type/relation prediction heads.

use crate::corpus::LabeledDataset;
use crate::embed::TokenVocab;
use crate::error::{Result, TcnError};
use crate::index::{sample_seed, CellRef, ContextIndex, NeighborKind};
use crate::params::ParamStore;
use crate::seed::{fnv1a, mix};
use crate::tape::{LeafSource, Tape, Tid};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

/// Which inter-table aggregators are active. `Intra` disables all three;
/// the single-aggregator variants enable exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    Intra,
    Nv,
    Ns,
    Np,
}

impl Variant {
    pub fn value_active(self) -> bool {
        matches!(self, Variant::Full | Variant::Nv)
    }

    pub fn position_active(self) -> bool {
        matches!(self, Variant::Full | Variant::Ns)
    }

    pub fn topic_active(self) -> bool {
        matches!(self, Variant::Full | Variant::Np)
    }

    pub fn all() -> [Variant; 5] {
        [Variant::Full, Variant::Intra, Variant::Nv, Variant::Ns, Variant::Np]
    }
}

impl FromStr for Variant {
    type Err = TcnError;

    fn from_str(s: &str) -> Result<Variant> {
        match s.to_lowercase().as_str() {
            "full" => Ok(Variant::Full),
            "intra" => Ok(Variant::Intra),
            "nv" => Ok(Variant::Nv),
            "ns" => Ok(Variant::Ns),
            "np" => Ok(Variant::Np),
            other => Err(TcnError::Usage(format!(
                "unknown variant {other:?} (expected full, intra, nv, ns or np)"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::Full => "full",
            Variant::Intra => "intra",
            Variant::Nv => "nv",
            Variant::Ns => "ns",
            Variant::Np => "np",
        };
        f.write_str(s)
    }
}

/// Embedding dimensions. `d` is the initial cell embedding; `c`/`r`/`a` the
/// column, row, and fused intra-table contexts; `b` the inter-table
/// aggregates; `p` the topic embedding; `h` the final cell representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d: usize,
    pub c: usize,
    pub r: usize,
    pub a: usize,
    pub b: usize,
    pub p: usize,
    pub h: usize,
}

impl Dims {
    pub fn uniform(n: usize) -> Dims {
        Dims {
            d: n,
            c: n,
            r: n,
            a: n,
            b: n,
            p: n,
            h: n,
        }
    }
}

impl Default for Dims {
    fn default() -> Dims {
        Dims::uniform(300)
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub dims: Dims,
    /// Number of attention views in the inter-table aggregators.
    pub views: usize,
    /// Per-cell neighbor sampling budget.
    pub budget: usize,
    pub variant: Variant,
    /// Share one view matrix/projection across the three aggregator kinds.
    pub share_multiview: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            dims: Dims::default(),
            views: 2,
            budget: 20,
            variant: Variant::Full,
            share_multiview: false,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        if [d.d, d.c, d.r, d.a, d.b, d.p, d.h].iter().any(|&x| x == 0) {
            return Err(TcnError::Data("all embedding dimensions must be positive".into()));
        }
        if self.views == 0 {
            return Err(TcnError::Data("views must be at least 1".into()));
        }
        if self.budget == 0 {
            return Err(TcnError::Data("sampling budget must be at least 1".into()));
        }
        Ok(())
    }
}

const MULTIVIEW_KINDS: [(NeighborKind, &str); 3] = [
    (NeighborKind::Value, "value"),
    (NeighborKind::Position, "position"),
    (NeighborKind::Topic, "topic"),
];

pub struct TcnModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub vocab: TokenVocab,
    pub num_types: usize,
    pub num_relations: usize,
    /// Present only while a masked-cell head is attached.
    pub cell_vocab_len: Option<usize>,
}

impl TcnModel {
    /// Create a model with Xavier-initialized weights. Token embeddings are
    /// seeded from `word_vectors` when given (absent tokens fall back to the
    /// zero vector), otherwise from small seeded uniform noise.
    pub fn new(
        cfg: ModelConfig,
        vocab: TokenVocab,
        num_types: usize,
        num_relations: usize,
        word_vectors: Option<&HashMap<String, Vec<f64>>>,
    ) -> Result<TcnModel> {
        cfg.validate()?;
        if num_types == 0 || num_relations == 0 {
            return Err(TcnError::Data(
                "label vocabularies must be non-empty to build prediction heads".into(),
            ));
        }
        let d = cfg.dims;
        let mut store = ParamStore::new();
        let pseed = |name: &str| mix(cfg.seed, &[fnv1a(name.as_bytes())]);

        let embedding = match word_vectors {
            Some(wv) => {
                let mut t = Tensor::zeros(vec![vocab.len().max(1), d.d]);
                for (i, token) in vocab.tokens().iter().enumerate() {
                    if let Some(vec) = wv.get(token) {
                        if vec.len() != d.d {
                            return Err(TcnError::Data(format!(
                                "word vector for {token:?} has {} values, expected {}",
                                vec.len(),
                                d.d
                            )));
                        }
                        t.data[i * d.d..(i + 1) * d.d].copy_from_slice(vec);
                    }
                }
                t
            }
            None => Tensor::uniform(vec![vocab.len().max(1), d.d], 0.1, pseed("embedding")),
        };
        store.add("embedding", embedding)?;
        store.add("w_c", Tensor::xavier(d.c, d.d, pseed("w_c")))?;
        store.add("w_q", Tensor::xavier(d.d, d.d + d.p, pseed("w_q")))?;
        store.add("w_r", Tensor::xavier(d.r, d.d + d.p, pseed("w_r")))?;
        store.add("w_a", Tensor::xavier(d.a, d.c + d.r, pseed("w_a")))?;
        if cfg.share_multiview {
            store.add("w_s", Tensor::xavier(cfg.views, d.a, pseed("w_s")))?;
            store.add("w_b", Tensor::xavier(d.a, d.b, pseed("w_b")))?;
        } else {
            for (_, label) in MULTIVIEW_KINDS {
                let ws = format!("w_s_{label}");
                let wb = format!("w_b_{label}");
                store.add(&ws, Tensor::xavier(cfg.views, d.a, pseed(&ws)))?;
                store.add(&wb, Tensor::xavier(d.a, d.b, pseed(&wb)))?;
            }
        }
        store.add("p_t", Tensor::xavier(d.p, d.p + d.b, pseed("p_t")))?;
        store.add("w_h", Tensor::xavier(d.h, d.d + d.a + 2 * d.b, pseed("w_h")))?;
        store.add("m_c", Tensor::xavier(num_types, d.h, pseed("m_c")))?;
        store.add("m_r", Tensor::xavier(num_relations, 2 * d.h, pseed("m_r")))?;

        Ok(TcnModel {
            cfg,
            store,
            vocab,
            num_types,
            num_relations,
            cell_vocab_len: None,
        })
    }

    /// Attach the masked-cell recovery head over a cell-value vocabulary.
    pub fn attach_cell_head(&mut self, cell_vocab_len: usize) -> Result<()> {
        if cell_vocab_len == 0 {
            return Err(TcnError::Data("cell vocabulary is empty".into()));
        }
        if self.cell_vocab_len.is_some() {
            return Err(TcnError::Data("cell head already attached".into()));
        }
        let seed = mix(self.cfg.seed, &[fnv1a(b"m_v")]);
        self.store
            .add("m_v", Tensor::xavier(cell_vocab_len, self.cfg.dims.h, seed))?;
        self.cell_vocab_len = Some(cell_vocab_len);
        Ok(())
    }
}

// ---- attention building blocks -------------------------------------------

/// An attention application: the weighted context and the weight vector
/// (or matrix for the multi-view case). Weights always sum to one.
pub struct Attn {
    pub context: Tid,
    pub weights: Tid,
}

/// Dot-product attention of a target embedding over other cells of the same
/// column: weights are a softmax over `<other, target>` scores and the
/// context is the weighted sum of the others.
pub fn column_attention(tape: &mut Tape, target: Tid, others: &[Tid]) -> Result<Attn> {
    let e = tape.stack_rows(others)?;
    let scores = tape.dot_rows(e, target)?;
    let weights = tape.softmax(scores)?;
    let context = tape.weighted_row_sum(e, weights)?;
    Ok(Attn { context, weights })
}

/// Row attention conditioned on the page topic: the query is a bilinear map
/// of the target embedding concatenated with the topic embedding.
pub fn row_attention(
    tape: &mut Tape,
    w_q: Tid,
    target: Tid,
    topic: Tid,
    others: &[Tid],
) -> Result<Attn> {
    let tq = tape.concat(&[target, topic])?;
    let query = tape.linear(w_q, tq)?;
    let e = tape.stack_rows(others)?;
    let scores = tape.dot_rows(e, query)?;
    let weights = tape.softmax(scores)?;
    let context = tape.weighted_row_sum(e, weights)?;
    Ok(Attn { context, weights })
}

/// Multi-view self-attention pooling of stacked neighbor contexts:
/// each row of the view matrix attends over the neighbors independently and
/// the projected view summaries are mean-pooled elementwise.
pub fn multiview_attention(tape: &mut Tape, w_s: Tid, w_b: Tid, rows: &[Tid]) -> Result<Attn> {
    let e = tape.stack_rows(rows)?;
    let et = tape.transpose(e)?;
    let scores = tape.matmul(w_s, et)?;
    let weights = tape.softmax(scores)?;
    let viewed = tape.matmul(weights, e)?;
    let projected = tape.matmul(viewed, w_b)?;
    let context = tape.mean_rows(projected)?;
    Ok(Attn {
        context,
        weights,
    })
}

// ---- forward pass ----------------------------------------------------------

/// Sampling context: all neighbor draws derive from `(root_seed, epoch,
/// cell, kind)` so runs are reproducible and epochs resample independently.
#[derive(Debug, Clone, Copy)]
pub struct SampleCtx {
    pub root_seed: u64,
    pub epoch: u64,
}

struct Bind {
    w_c: Tid,
    w_q: Tid,
    w_r: Tid,
    w_a: Tid,
    p_t: Tid,
    w_h: Tid,
    m_c: Tid,
    m_r: Tid,
    m_v: Option<Tid>,
    /// `(w_s, w_b)` per neighbor kind, in `MULTIVIEW_KINDS` order.
    multiview: [(Tid, Tid); 3],
    embedding_param: usize,
    embedding_rows: HashMap<usize, Tid>,
}

/// One forward pass over any number of tables, sharing a single tape so
/// repeated sub-expressions (cell embeddings, neighbor contexts, per-table
/// topic fusion) are computed once.
pub struct Forward<'a> {
    pub model: &'a TcnModel,
    pub ds: &'a LabeledDataset,
    pub idx: &'a ContextIndex,
    pub ctx: SampleCtx,
    pub tape: Tape,
    bind: Bind,
    cell_emb: HashMap<String, Tid>,
    plain_agg: HashMap<CellRef, Tid>,
    fused_topic: HashMap<usize, Tid>,
    zeros: HashMap<usize, Tid>,
}

/// Per-table forward output: every cell representation and the pooled
/// per-column embeddings.
pub struct TableForward {
    pub cell_h: Vec<Vec<Tid>>,
    pub col_h: Vec<Tid>,
}

impl<'a> Forward<'a> {
    pub fn new(
        model: &'a TcnModel,
        ds: &'a LabeledDataset,
        idx: &'a ContextIndex,
        ctx: SampleCtx,
    ) -> Forward<'a> {
        let mut tape = Tape::new();
        let store = &model.store;
        let mut leaf = |name: &str| {
            let i = store.index_of(name).expect("parameter registered at init");
            tape.leaf(store.value(i), Some(LeafSource::Param(i)))
        };
        let multiview = if model.cfg.share_multiview {
            let pair = (leaf("w_s"), leaf("w_b"));
            [pair, pair, pair]
        } else {
            let value = (leaf("w_s_value"), leaf("w_b_value"));
            let position = (leaf("w_s_position"), leaf("w_b_position"));
            let topic = (leaf("w_s_topic"), leaf("w_b_topic"));
            [value, position, topic]
        };
        let bind = Bind {
            w_c: leaf("w_c"),
            w_q: leaf("w_q"),
            w_r: leaf("w_r"),
            w_a: leaf("w_a"),
            p_t: leaf("p_t"),
            w_h: leaf("w_h"),
            m_c: leaf("m_c"),
            m_r: leaf("m_r"),
            m_v: store.index_of("m_v").map(|_| leaf("m_v")),
            multiview,
            embedding_param: store.index_of("embedding").expect("embedding registered"),
            embedding_rows: HashMap::new(),
        };
        Forward {
            model,
            ds,
            idx,
            ctx,
            tape,
            bind,
            cell_emb: HashMap::new(),
            plain_agg: HashMap::new(),
            fused_topic: HashMap::new(),
            zeros: HashMap::new(),
        }
    }

    fn zero(&mut self, dim: usize) -> Tid {
        if let Some(&t) = self.zeros.get(&dim) {
            return t;
        }
        let t = self.tape.constant(Tensor::zeros(vec![dim]));
        self.zeros.insert(dim, t);
        t
    }

    fn embedding_row(&mut self, token_id: usize) -> Tid {
        if let Some(&t) = self.bind.embedding_rows.get(&token_id) {
            return t;
        }
        let p = self.bind.embedding_param;
        let emb = self.model.store.get(p);
        let cols = emb.value.cols();
        let row = Tensor::vector(emb.value.data[token_id * cols..(token_id + 1) * cols].to_vec());
        let t = self
            .tape
            .leaf(Arc::new(row), Some(LeafSource::ParamRow(p, token_id)));
        self.bind.embedding_rows.insert(token_id, t);
        t
    }

    /// Initial embedding of a cell: mean over known-token rows, zero when no
    /// token is known. Memoized by normalized value.
    pub fn cell_embedding(&mut self, cell: &crate::corpus::Cell) -> Result<Tid> {
        if let Some(&t) = self.cell_emb.get(&cell.normalized) {
            return Ok(t);
        }
        let ids = self.model.vocab.cell_token_ids(cell);
        let t = if ids.is_empty() {
            self.zero(self.model.cfg.dims.d)
        } else if ids.len() == 1 {
            self.embedding_row(ids[0])
        } else {
            let rows: Vec<Tid> = ids.iter().map(|&i| self.embedding_row(i)).collect();
            let stacked = self.tape.stack_rows(&rows)?;
            self.tape.mean_rows(stacked)?
        };
        self.cell_emb.insert(cell.normalized.clone(), t);
        Ok(t)
    }

    /// Intra-table aggregation of a target cell given a topic embedding:
    /// column attention, topic-conditioned row attention, and their fusion.
    pub fn intra_aggregate(&mut self, t: CellRef, topic_e: Tid) -> Result<Tid> {
        let table = &self.ds.tables[t.table];
        let target_e = self.cell_embedding(table.cell(t.row, t.col))?;

        let mut col_cells = Vec::with_capacity(table.num_rows().saturating_sub(1));
        for m in 0..table.num_rows() {
            if m != t.row {
                col_cells.push(self.cell_embedding(table.cell(m, t.col))?);
            }
        }
        let col_sum = if col_cells.is_empty() {
            self.zero(self.model.cfg.dims.d)
        } else {
            column_attention(&mut self.tape, target_e, &col_cells)?.context
        };
        let wc_sum = self.tape.linear(self.bind.w_c, col_sum)?;
        let e_c = self.tape.relu(wc_sum);

        let mut row_cells = Vec::with_capacity(table.num_cols().saturating_sub(1));
        for n in 0..table.num_cols() {
            if n != t.col {
                row_cells.push(self.cell_embedding(table.cell(t.row, n))?);
            }
        }
        let row_sum = if row_cells.is_empty() {
            self.zero(self.model.cfg.dims.d)
        } else {
            row_attention(&mut self.tape, self.bind.w_q, target_e, topic_e, &row_cells)?.context
        };
        let row_with_topic = self.tape.concat(&[row_sum, topic_e])?;
        let wr_sum = self.tape.linear(self.bind.w_r, row_with_topic)?;
        let e_r = self.tape.relu(wr_sum);

        let cr = self.tape.concat(&[e_c, e_r])?;
        let wa = self.tape.linear(self.bind.w_a, cr)?;
        Ok(self.tape.relu(wa))
    }

    /// Intra-table context of a cell in its own table, with that table's
    /// *plain* topic embedding. This is what neighbor cells contribute to
    /// the inter-table aggregators.
    pub fn plain_aggregate(&mut self, t: CellRef) -> Result<Tid> {
        if let Some(&tid) = self.plain_agg.get(&t) {
            return Ok(tid);
        }
        let topic = self.ds.tables[t.table].topic.clone();
        let topic_e = self.cell_embedding(&topic)?;
        let out = self.intra_aggregate(t, topic_e)?;
        self.plain_agg.insert(t, out);
        Ok(out)
    }

    fn multiview_params(&self, kind: NeighborKind) -> (Tid, Tid) {
        let slot = MULTIVIEW_KINDS
            .iter()
            .position(|(k, _)| *k == kind)
            .expect("known kind");
        self.bind.multiview[slot]
    }

    /// Budgeted inter-table aggregation for one neighbor kind; the empty
    /// neighbor set yields the zero vector so the model degenerates to the
    /// intra-only case when no connections exist.
    pub fn inter_aggregate(&mut self, t: CellRef, kind: NeighborKind) -> Result<Tid> {
        let active = match kind {
            NeighborKind::Value => self.model.cfg.variant.value_active(),
            NeighborKind::Position => self.model.cfg.variant.position_active(),
            NeighborKind::Topic => self.model.cfg.variant.topic_active(),
        };
        if !active {
            return Ok(self.zero(self.model.cfg.dims.b));
        }
        let seed = sample_seed(self.ctx.root_seed, self.ctx.epoch, t, kind);
        let refs = self.idx.sample_neighbors(self.ds, t, kind, seed);
        if refs.is_empty() {
            return Ok(self.zero(self.model.cfg.dims.b));
        }
        let mut rows = Vec::with_capacity(refs.len());
        for r in refs {
            rows.push(self.plain_aggregate(r)?);
        }
        let (w_s, w_b) = self.multiview_params(kind);
        Ok(multiview_attention(&mut self.tape, w_s, w_b, &rows)?.context)
    }

    /// Topic embedding of a table enriched with the contexts of topic cells
    /// in other tables, projected back to the topic dimension. Computed once
    /// per table and reused by all of its cells.
    pub fn fused_topic(&mut self, table_id: usize) -> Result<Tid> {
        if let Some(&t) = self.fused_topic.get(&table_id) {
            return Ok(t);
        }
        let topic = self.ds.tables[table_id].topic.clone();
        let plain = self.cell_embedding(&topic)?;
        let e_p = self.inter_aggregate(CellRef::new(table_id, 0, 0), NeighborKind::Topic)?;
        let cat = self.tape.concat(&[plain, e_p])?;
        let proj = self.tape.linear(self.bind.p_t, cat)?;
        let fused = self.tape.relu(proj);
        self.fused_topic.insert(table_id, fused);
        Ok(fused)
    }

    /// Final representation of one cell: initial embedding, intra context
    /// (under the fused topic), and the value/position aggregates.
    pub fn cell_h(&mut self, t: CellRef) -> Result<Tid> {
        let table = &self.ds.tables[t.table];
        let e = self.cell_embedding(&table.cell(t.row, t.col).clone())?;
        let topic = self.fused_topic(t.table)?;
        let e_a = self.intra_aggregate(t, topic)?;
        let e_v = self.inter_aggregate(t, NeighborKind::Value)?;
        let e_s = self.inter_aggregate(t, NeighborKind::Position)?;
        let cat = self.tape.concat(&[e, e_a, e_v, e_s])?;
        let wh = self.tape.linear(self.bind.w_h, cat)?;
        Ok(self.tape.relu(wh))
    }

    /// Representations for every cell plus mean-pooled column embeddings.
    pub fn table_forward(&mut self, table_id: usize) -> Result<TableForward> {
        let (rows, cols) = {
            let t = &self.ds.tables[table_id];
            (t.num_rows(), t.num_cols())
        };
        let mut cell_h = vec![Vec::with_capacity(cols); rows];
        for m in 0..rows {
            for n in 0..cols {
                cell_h[m].push(self.cell_h(CellRef::new(table_id, m, n))?);
            }
        }
        let mut col_h = Vec::with_capacity(cols);
        for n in 0..cols {
            let column: Vec<Tid> = (0..rows).map(|m| cell_h[m][n]).collect();
            let stacked = self.tape.stack_rows(&column)?;
            col_h.push(self.tape.mean_rows(stacked)?);
        }
        Ok(TableForward { cell_h, col_h })
    }

    pub fn type_logits(&mut self, col_h: Tid) -> Result<Tid> {
        self.tape.linear(self.bind.m_c, col_h)
    }

    pub fn relation_logits(&mut self, subject_h: Tid, object_h: Tid) -> Result<Tid> {
        let cat = self.tape.concat(&[subject_h, object_h])?;
        self.tape.linear(self.bind.m_r, cat)
    }

    pub fn cell_value_logits(&mut self, cell_h: Tid) -> Result<Tid> {
        let m_v = self.bind.m_v.ok_or_else(|| {
            TcnError::Data("no masked-cell head: model was built without a cell vocabulary".into())
        })?;
        self.tape.linear(m_v, cell_h)
    }

    /// Joint supervised objective for one table: type cross-entropy over all
    /// columns plus relation cross-entropy over subject/object column pairs,
    /// mixed by `gamma`.
    pub fn supervised_loss(&mut self, table_id: usize, gamma: f64) -> Result<Tid> {
        let fwd = self.table_forward(table_id)?;
        let cols = fwd.col_h.len();
        let mut type_terms = Vec::with_capacity(cols);
        for (n, &col) in fwd.col_h.iter().enumerate() {
            let label = *self.ds.type_labels.get(&(table_id, n)).ok_or_else(|| {
                TcnError::Data(format!("table {table_id}: column {n} has no type label"))
            })?;
            let logits = self.type_logits(col)?;
            type_terms.push(self.tape.cross_entropy(logits, label)?);
        }
        let mut rel_terms = Vec::with_capacity(cols.saturating_sub(1));
        for n in 1..cols {
            let label = *self.ds.relation_labels.get(&(table_id, n)).ok_or_else(|| {
                TcnError::Data(format!("table {table_id}: column {n} has no relation label"))
            })?;
            let logits = self.relation_logits(fwd.col_h[0], fwd.col_h[n])?;
            rel_terms.push(self.tape.cross_entropy(logits, label)?);
        }
        let type_sum = self.sum_terms(&type_terms)?;
        let rel_sum = self.sum_terms(&rel_terms)?;
        let weighted_c = self.tape.scale(type_sum, gamma);
        let weighted_r = self.tape.scale(rel_sum, 1.0 - gamma);
        self.tape.add(weighted_c, weighted_r)
    }

    fn sum_terms(&mut self, terms: &[Tid]) -> Result<Tid> {
        match terms.split_first() {
            None => Ok(self.tape.constant(Tensor::scalar(0.0))),
            Some((&first, rest)) => {
                let mut acc = first;
                for &t in rest {
                    acc = self.tape.add(acc, t)?;
                }
                Ok(acc)
            }
        }
    }

    /// Masked-cell recovery objective over the given targets (all in one
    /// table or many). Targets whose value is outside the cell vocabulary
    /// are skipped and counted.
    pub fn masked_recovery_loss(
        &mut self,
        targets: &[crate::train::MaskTarget],
    ) -> Result<(Tid, usize)> {
        let mut terms = Vec::new();
        let mut skipped = 0;
        for target in targets {
            let Some(class) = target.vocab_id else {
                skipped += 1;
                continue;
            };
            let h = self.cell_h(target.cell)?;
            let logits = self.cell_value_logits(h)?;
            terms.push(self.tape.cross_entropy(logits, class)?);
        }
        let loss = self.sum_terms(&terms)?;
        Ok((loss, skipped))
    }

    /// Run backward from a scalar loss and hand the tape back for gradient
    /// accumulation. Consumes the pass.
    pub fn finish(mut self, loss: Tid) -> Result<(f64, Tape)> {
        let value = self.tape.value(loss).scalar_value()?;
        self.tape.backward(loss)?;
        Ok((value, self.tape))
    }
}

// ---- inference -------------------------------------------------------------

/// Per-column predictions for one table: `(label id, probability)` for every
/// column (types) and for every object column paired with the subject column
/// (relations, indexed by `column - 1`).
#[derive(Debug, Clone)]
pub struct TablePrediction {
    pub types: Vec<(usize, f64)>,
    pub relations: Vec<(usize, f64)>,
}

/// Argmax with lowest-index tie-break.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict_table(
    model: &TcnModel,
    ds: &LabeledDataset,
    idx: &ContextIndex,
    ctx: SampleCtx,
    table_id: usize,
) -> Result<TablePrediction> {
    predict_table_averaged(model, ds, idx, ctx, table_id, 1)
}

/// Prediction with class probabilities averaged over `samples` independent
/// neighbor draws (epochs counting down from `ctx.epoch`). One sample is the
/// plain single-pass prediction; more reduce sampling variance when neighbor
/// sets exceed the budget.
pub fn predict_table_averaged(
    model: &TcnModel,
    ds: &LabeledDataset,
    idx: &ContextIndex,
    ctx: SampleCtx,
    table_id: usize,
    samples: usize,
) -> Result<TablePrediction> {
    let samples = samples.max(1);
    let cols = ds.tables[table_id].num_cols();
    let mut type_probs: Vec<Vec<f64>> = vec![vec![0.0; model.num_types]; cols];
    let mut rel_probs: Vec<Vec<f64>> = vec![vec![0.0; model.num_relations]; cols - 1];
    for s in 0..samples {
        let sample_ctx = SampleCtx {
            root_seed: ctx.root_seed,
            epoch: ctx.epoch.wrapping_sub(s as u64),
        };
        let mut fwd = Forward::new(model, ds, idx, sample_ctx);
        let out = fwd.table_forward(table_id)?;
        for (n, &col) in out.col_h.iter().enumerate() {
            let logits = fwd.type_logits(col)?;
            let probs = fwd.tape.softmax(logits)?;
            for (acc, p) in type_probs[n].iter_mut().zip(&fwd.tape.value(probs).data) {
                *acc += p / samples as f64;
            }
        }
        for n in 1..out.col_h.len() {
            let logits = fwd.relation_logits(out.col_h[0], out.col_h[n])?;
            let probs = fwd.tape.softmax(logits)?;
            for (acc, p) in rel_probs[n - 1]
                .iter_mut()
                .zip(&fwd.tape.value(probs).data)
            {
                *acc += p / samples as f64;
            }
        }
    }
    let pick = |p: &Vec<f64>| {
        let best = argmax(p);
        (best, p[best])
    };
    Ok(TablePrediction {
        types: type_probs.iter().map(pick).collect(),
        relations: rel_probs.iter().map(pick).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Cell, LabelVocab, Table};

    pub(crate) fn table(id: usize, schema: usize, topic: &str, grid: &[&[&str]]) -> Table {
        Table {
            table_id: id,
            schema_id: schema,
            topic: Cell::new(topic),
            rows: grid
                .iter()
                .map(|row| row.iter().map(|s| Cell::new(s)).collect())
                .collect(),
        }
    }

    pub(crate) fn two_table_dataset() -> LabeledDataset {
        let mut ds = LabeledDataset {
            num_schemas: 1,
            label_vocab: LabelVocab {
                types: vec!["Release".into(), "People".into()],
                relations: vec!["composedBy".into()],
            },
            ..LabeledDataset::default()
        };
        ds.tables.push(table(
            0,
            0,
            "Elton John",
            &[
                &["title", "name"],
                &["Empty Sky", "Pete Bellotte"],
                &["Skyline Pigeon", "Caleb Quaye"],
            ],
        ));
        ds.tables.push(table(
            1,
            0,
            "Empty Sky",
            &[
                &["title", "name"],
                &["Love to Love", "Pete Bellotte"],
                &["Val-Hala", "Roger Pope"],
            ],
        ));
        for k in 0..2 {
            ds.type_labels.insert((k, 0), 0);
            ds.type_labels.insert((k, 1), 1);
            ds.relation_labels.insert((k, 1), 0);
        }
        ds
    }

    fn small_model(variant: Variant) -> TcnModel {
        let ds = two_table_dataset();
        let cfg = ModelConfig {
            dims: Dims::uniform(6),
            views: 2,
            budget: 4,
            variant,
            share_multiview: false,
            seed: 11,
        };
        TcnModel::new(cfg, TokenVocab::build(&ds), 2, 1, None).unwrap()
    }

    #[test]
    fn column_attention_symmetric_when_others_identical() {
        let mut tape = Tape::new();
        let target = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        let o = tape.constant(Tensor::vector(vec![0.3, 0.4]));
        let attn = column_attention(&mut tape, target, &[o, o]).unwrap();
        assert_eq!(tape.value(attn.weights).data, vec![0.5, 0.5]);
    }

    #[test]
    fn column_attention_hand_case() {
        // target [1,0], others [2,0] and [0,1]: dots 2 and 0, so weights are
        // softmax(2,0) and the context is their weighted sum.
        let mut tape = Tape::new();
        let target = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        let a = tape.constant(Tensor::vector(vec![2.0, 0.0]));
        let b = tape.constant(Tensor::vector(vec![0.0, 1.0]));
        let attn = column_attention(&mut tape, target, &[a, b]).unwrap();
        let ctx = &tape.value(attn.context).data;
        assert!((ctx[0] - 1.7616).abs() < 5e-5, "{ctx:?}");
        assert!((ctx[1] - 0.1192).abs() < 5e-5, "{ctx:?}");
    }

    #[test]
    fn column_attention_singleton_weight_is_one() {
        let mut tape = Tape::new();
        let target = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        let other = tape.constant(Tensor::vector(vec![-5.0, 3.0]));
        let attn = column_attention(&mut tape, target, &[other]).unwrap();
        assert_eq!(tape.value(attn.weights).data, vec![1.0]);
        assert_eq!(tape.value(attn.context).data, vec![-5.0, 3.0]);
    }

    #[test]
    fn row_attention_with_zero_topic_and_identity_query_matches_column_attention() {
        // W_q = [I | 0] and a zero topic reduce the query to the target
        // embedding, i.e. plain dot-product attention.
        let mut tape = Tape::new();
        let mut wq = Tensor::zeros(vec![2, 4]);
        wq.data[0] = 1.0;
        wq.data[5] = 1.0;
        let w_q = tape.constant(wq);
        let target = tape.constant(Tensor::vector(vec![0.7, -0.2]));
        let topic = tape.constant(Tensor::zeros(vec![2]));
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![-1.0, 0.5]));
        let row = row_attention(&mut tape, w_q, target, topic, &[a, b]).unwrap();
        let col = column_attention(&mut tape, target, &[a, b]).unwrap();
        assert_eq!(
            tape.value(row.weights).data,
            tape.value(col.weights).data
        );
        assert_eq!(
            tape.value(row.context).data,
            tape.value(col.context).data
        );
    }

    #[test]
    fn row_attention_weights_permute_with_inputs() {
        let mut tape = Tape::new();
        let w_q = tape.constant(Tensor::xavier(2, 4, 3));
        let target = tape.constant(Tensor::vector(vec![0.7, -0.2]));
        let topic = tape.constant(Tensor::vector(vec![0.1, 0.9]));
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![-1.0, 0.5]));
        let fwd = row_attention(&mut tape, w_q, target, topic, &[a, b]).unwrap();
        let rev = row_attention(&mut tape, w_q, target, topic, &[b, a]).unwrap();
        let wf = tape.value(fwd.weights).data.clone();
        let wr = tape.value(rev.weights).data.clone();
        assert_eq!(wf[0], wr[1]);
        assert_eq!(wf[1], wr[0]);
        assert_eq!(tape.value(fwd.context).data, tape.value(rev.context).data);
    }

    #[test]
    fn multiview_singleton_is_projection() {
        // One neighbor: every view weight is 1 so the output is row * W_b.
        let mut tape = Tape::new();
        let w_s = tape.constant(Tensor::xavier(2, 3, 5));
        let w_b = tape.constant(Tensor::identity(3));
        let row = tape.constant(Tensor::vector(vec![0.5, -1.0, 2.0]));
        let attn = multiview_attention(&mut tape, w_s, w_b, &[row]).unwrap();
        assert_eq!(tape.value(attn.context).data, vec![0.5, -1.0, 2.0]);
        assert_eq!(tape.value(attn.weights).data, vec![1.0, 1.0]);
    }

    #[test]
    fn multiview_single_view_degenerates_to_query_attention() {
        // V = 1: W_s is a query vector and the weights expand to the same
        // exp-dot form as column attention.
        let mut tape = Tape::new();
        let query = vec![0.3, -0.8, 0.2];
        let w_s = tape.constant(Tensor::matrix(1, 3, query.clone()).unwrap());
        let w_b = tape.constant(Tensor::identity(3));
        let rows_data = [vec![1.0, 0.0, 0.5], vec![0.2, 0.9, -0.3]];
        let rows: Vec<Tid> = rows_data
            .iter()
            .map(|r| tape.constant(Tensor::vector(r.clone())))
            .collect();
        let attn = multiview_attention(&mut tape, w_s, w_b, &rows).unwrap();
        let scores: Vec<f64> = rows_data
            .iter()
            .map(|r| r.iter().zip(&query).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let me = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - me).exp()).collect();
        let z: f64 = exps.iter().sum();
        let got = tape.value(attn.weights).data.clone();
        assert!((got[0] - exps[0] / z).abs() < 1e-12);
        assert!((got[1] - exps[1] / z).abs() < 1e-12);
    }

    #[test]
    fn multiview_identical_rows_average() {
        let mut tape = Tape::new();
        let w_s = tape.constant(Tensor::xavier(2, 3, 5));
        let w_b = tape.constant(Tensor::identity(3));
        let row = tape.constant(Tensor::vector(vec![0.5, -1.0, 2.0]));
        let attn = multiview_attention(&mut tape, w_s, w_b, &[row, row]).unwrap();
        let w = &tape.value(attn.weights).data;
        assert_eq!(w, &vec![0.5, 0.5, 0.5, 0.5]);
        let ctx = &tape.value(attn.context).data;
        for (a, b) in ctx.iter().zip([0.5, -1.0, 2.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn multiview_output_invariant_to_row_permutation() {
        let mut tape = Tape::new();
        let w_s = tape.constant(Tensor::xavier(2, 3, 7));
        let w_b = tape.constant(Tensor::xavier(3, 3, 8));
        let rows: Vec<Tid> = (0..4)
            .map(|i| tape.constant(Tensor::uniform(vec![3], 1.0, 40 + i)))
            .collect();
        let fwd = multiview_attention(&mut tape, w_s, w_b, &rows).unwrap();
        let perm = [rows[2], rows[0], rows[3], rows[1]];
        let rev = multiview_attention(&mut tape, w_s, w_b, &perm).unwrap();
        for (a, b) in tape
            .value(fwd.context)
            .data
            .iter()
            .zip(&tape.value(rev.context).data)
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_index_forward_matches_intra_variant_bit_for_bit() {
        let ds = two_table_dataset();
        let empty = ContextIndex::empty(4);
        let ctx = SampleCtx {
            root_seed: 5,
            epoch: 0,
        };

        let full = small_model(Variant::Full);
        let mut f1 = Forward::new(&full, &ds, &empty, ctx);
        let out1 = f1.table_forward(0).unwrap();

        let intra = small_model(Variant::Intra);
        let real_idx = ContextIndex::build(&ds, 4).unwrap();
        let mut f2 = Forward::new(&intra, &ds, &real_idx, ctx);
        let out2 = f2.table_forward(0).unwrap();

        for (a, b) in out1.col_h.iter().zip(&out2.col_h) {
            let va = &f1.tape.value(*a).data;
            let vb = &f2.tape.value(*b).data;
            for (x, y) in va.iter().zip(vb.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn budget_caps_sampled_neighbor_rows() {
        let mut ds = LabeledDataset {
            num_schemas: 30,
            ..LabeledDataset::default()
        };
        for k in 0..30 {
            ds.tables.push(table(
                k,
                k,
                "t",
                &[&["h1", "h2"], &["shared", &format!("u{k}")]],
            ));
        }
        let idx = ContextIndex::build(&ds, 20).unwrap();
        let t = CellRef::new(0, 1, 0);
        assert_eq!(idx.neighbors(&ds, t, NeighborKind::Value).len(), 29);
        assert_eq!(
            idx.sample_neighbors(&ds, t, NeighborKind::Value, 9).len(),
            20
        );
    }

    #[test]
    fn topic_mention_changes_fused_topic() {
        // Table 1's topic is "Empty Sky", which appears as a cell of table 0,
        // so its fused topic must differ from the no-mention projection.
        let ds = two_table_dataset();
        let idx = ContextIndex::build(&ds, 4).unwrap();
        let model = small_model(Variant::Full);
        let ctx = SampleCtx {
            root_seed: 5,
            epoch: 0,
        };
        let mut with = Forward::new(&model, &ds, &idx, ctx);
        let fused = with.fused_topic(1).unwrap();
        let got = with.tape.value(fused).data.clone();

        let empty = ContextIndex::empty(4);
        let mut without = Forward::new(&model, &ds, &empty, ctx);
        let plain = without.fused_topic(1).unwrap();
        let base = without.tape.value(plain).data.clone();
        assert_ne!(got, base);

        // and it is cached: both calls return the same node
        let again = with.fused_topic(1).unwrap();
        assert_eq!(fused, again);
    }

    #[test]
    fn predict_heads_shapes_and_tie_break() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);

        let ds = two_table_dataset();
        let idx = ContextIndex::build(&ds, 4).unwrap();
        let model = small_model(Variant::Full);
        let ctx = SampleCtx {
            root_seed: 1,
            epoch: 0,
        };
        let pred = predict_table(&model, &ds, &idx, ctx, 0).unwrap();
        assert_eq!(pred.types.len(), 2);
        assert_eq!(pred.relations.len(), 1);
        for (_, p) in pred.types.iter().chain(&pred.relations) {
            assert!(*p > 0.0 && *p <= 1.0);
        }
    }

    #[test]
    fn constructed_type_head_selects_aligned_row() {
        let mut tape = Tape::new();
        // rows orthogonal to col_h except row 3
        let mut m = Tensor::zeros(vec![5, 3]);
        m.data[3 * 3] = 2.0;
        let m_c = tape.constant(m);
        let col = tape.constant(Tensor::vector(vec![1.0, 0.0, 0.0]));
        let logits = tape.linear(m_c, col).unwrap();
        assert_eq!(argmax(&tape.value(logits).data), 3);
    }

    #[test]
    fn relation_head_is_order_sensitive() {
        let mut tape = Tape::new();
        let m_r = tape.constant(Tensor::xavier(3, 4, 77));
        let subj = tape.constant(Tensor::vector(vec![1.0, -0.5]));
        let obj = tape.constant(Tensor::vector(vec![0.2, 0.9]));
        let so = tape.concat(&[subj, obj]).unwrap();
        let os = tape.concat(&[obj, subj]).unwrap();
        let a = tape.linear(m_r, so).unwrap();
        let b = tape.linear(m_r, os).unwrap();
        assert_ne!(tape.value(a).data, tape.value(b).data);
    }

    #[test]
    fn argmax_invariant_to_constant_shift() {
        let logits = vec![0.4, -1.0, 2.2, 0.0];
        let shifted: Vec<f64> = logits.iter().map(|x| x + 123.45).collect();
        assert_eq!(argmax(&logits), argmax(&shifted));
    }

    #[test]
    fn intra_shape_contract_with_mixed_dims() {
        let ds = two_table_dataset();
        let cfg = ModelConfig {
            dims: Dims {
                d: 4,
                c: 3,
                r: 3,
                a: 5,
                b: 2,
                p: 4,
                h: 7,
            },
            views: 2,
            budget: 4,
            variant: Variant::Full,
            share_multiview: false,
            seed: 3,
        };
        let model = TcnModel::new(cfg, TokenVocab::build(&ds), 2, 1, None).unwrap();
        let idx = ContextIndex::build(&ds, 4).unwrap();
        let ctx = SampleCtx {
            root_seed: 0,
            epoch: 0,
        };
        let mut fwd = Forward::new(&model, &ds, &idx, ctx);
        let fused = fwd.fused_topic(0).unwrap();
        assert_eq!(fwd.tape.value(fused).shape, vec![4]);
        let e_a = fwd.intra_aggregate(CellRef::new(0, 1, 0), fused).unwrap();
        assert_eq!(fwd.tape.value(e_a).shape, vec![5]);
        let h = fwd.cell_h(CellRef::new(0, 1, 0)).unwrap();
        assert_eq!(fwd.tape.value(h).shape, vec![7]);
    }

    #[test]
    fn zero_wa_gives_zero_intra_context() {
        let ds = two_table_dataset();
        let model = small_model(Variant::Intra);
        let idx = ContextIndex::empty(4);
        let ctx = SampleCtx {
            root_seed: 0,
            epoch: 0,
        };
        // zero out w_a
        let mut model = model;
        let i = model.store.index_of("w_a").unwrap();
        let shape = model.store.get(i).value.shape.clone();
        model.store.set_value(i, Tensor::zeros(shape)).unwrap();
        let mut fwd = Forward::new(&model, &ds, &idx, ctx);
        let topic = fwd.fused_topic(0).unwrap();
        let e_a = fwd.intra_aggregate(CellRef::new(0, 1, 1), topic).unwrap();
        assert!(fwd.tape.value(e_a).data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn share_multiview_flag_builds_single_pair() {
        let ds = two_table_dataset();
        let cfg = ModelConfig {
            dims: Dims::uniform(4),
            views: 2,
            budget: 4,
            variant: Variant::Full,
            share_multiview: true,
            seed: 3,
        };
        let model = TcnModel::new(cfg, TokenVocab::build(&ds), 2, 1, None).unwrap();
        assert!(model.store.by_name("w_s").is_some());
        assert!(model.store.by_name("w_s_value").is_none());
    }
}
