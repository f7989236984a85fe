//! Token table and prompt assembly: a small object vocabulary plus a larger
//! per-type anomaly vocabulary sharing one embedding table.
//!
//! The table starts with four inert scaffold tokens (pad, article,
//! connective, separator) drawn once from the seed and frozen. Object and
//! anomaly tokens are appended per corpus: object tokens describe the normal
//! appearance, and each anomaly type n owns the contiguous block of N anomaly
//! tokens with global indices N*(n-1)+1 ..= N*n. Inserting tokens never
//! rewrites existing rows; only inserted rows are trainable.

use crate::error::{Result, SeasError};
use crate::util::randn;
use rand_chacha::ChaCha8Rng;
use seas_tensor::{Graph, NodeId, ParamId, ParamStore};

pub const TOK_PAD: usize = 0;
pub const TOK_A: usize = 1;
pub const TOK_WITH: usize = 2;
pub const TOK_COMMA: usize = 3;
pub const BASE_TOKENS: usize = 4;

const TOKEN_INIT_STD: f64 = 0.02;

pub struct TokenTable {
    cond_dim: usize,
    base_id: ParamId,
    added: Vec<(String, ParamId)>,
}

impl TokenTable {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cond_dim: usize) -> Self {
        let base: Vec<f64> = randn(rng, BASE_TOKENS * cond_dim)
            .iter()
            .map(|v| v * TOKEN_INIT_STD)
            .collect();
        let base_id = store.add("tokens.base", vec![BASE_TOKENS, cond_dim], base, false);
        TokenTable {
            cond_dim,
            base_id,
            added: Vec::new(),
        }
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn row_count(&self) -> usize {
        BASE_TOKENS + self.added.len()
    }

    /// Append one token row. Returns its global row index.
    pub fn insert(&mut self, store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, trainable: bool) -> Result<usize> {
        if self.lookup(name).is_some() {
            return Err(SeasError::Validation(format!("token '{}' already present", name)));
        }
        let data: Vec<f64> = randn(rng, self.cond_dim).iter().map(|v| v * TOKEN_INIT_STD).collect();
        let id = store.add(&format!("tokens.{}", name), vec![1, self.cond_dim], data, trainable);
        self.added.push((name.to_string(), id));
        Ok(BASE_TOKENS + self.added.len() - 1)
    }

    pub fn lookup(&self, name: &str) -> Option<usize> {
        self.added
            .iter()
            .position(|(n, _)| n == name)
            .map(|i| BASE_TOKENS + i)
    }

    pub fn added_names(&self) -> Vec<&str> {
        self.added.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.base_id];
        ids.extend(self.added.iter().map(|(_, id)| *id));
        ids
    }

    pub fn trainable_param_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        self.added
            .iter()
            .map(|(_, id)| *id)
            .filter(|id| store.is_trainable(*id))
            .collect()
    }

    /// The full [rows, cond_dim] table as a graph node.
    pub fn node(&self, g: &mut Graph, store: &ParamStore) -> NodeId {
        let mut parts = vec![g.param(store, self.base_id)];
        for (_, id) in &self.added {
            parts.push(g.param(store, *id));
        }
        g.concat(0, &parts)
    }

    /// Materialized copy of the table for inspection.
    pub fn matrix(&self, store: &ParamStore) -> Vec<Vec<f64>> {
        let mut rows: Vec<Vec<f64>> = store
            .value(self.base_id)
            .chunks_exact(self.cond_dim)
            .map(|r| r.to_vec())
            .collect();
        for (_, id) in &self.added {
            rows.push(store.value(*id).to_vec());
        }
        rows
    }
}

/// Insert the object and anomaly tokens for a corpus with `n_types` anomaly
/// types: ob1..=ob{n_normal}, then df1..=df{n_anomaly * n_types}.
pub fn setup_tokens(
    table: &mut TokenTable,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    n_types: usize,
    n_anomaly: usize,
    n_normal: usize,
    frozen: bool,
) -> Result<()> {
    for i in 1..=n_normal {
        table.insert(store, rng, &format!("ob{}", i), !frozen)?;
    }
    for k in 1..=n_anomaly * n_types {
        table.insert(store, rng, &format!("df{}", k), !frozen)?;
    }
    Ok(())
}

/// A padded prompt: per-slot table rows plus the column positions of the
/// object and anomaly tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    /// 0 for the normal prompt, otherwise the 1-based anomaly type.
    pub anomaly_type: usize,
    pub slots: Vec<usize>,
    pub ob_columns: Vec<usize>,
    pub df_columns: Vec<usize>,
    /// Global 1-based anomaly token indices (empty for the normal prompt).
    pub anomaly_token_indices: Vec<usize>,
}

impl Prompt {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// "a <ob..> with <df..>" padded to z_len. Separators are inserted between
/// anomaly tokens when they fit.
pub fn build_abnormal_prompt(
    table: &TokenTable,
    anomaly_type: usize,
    n_types: usize,
    n_anomaly: usize,
    n_normal: usize,
    z_len: usize,
) -> Result<Prompt> {
    if anomaly_type == 0 || anomaly_type > n_types {
        return Err(SeasError::Range(format!(
            "anomaly type {} out of 1..={}",
            anomaly_type, n_types
        )));
    }
    let mut slots = vec![TOK_A];
    let mut ob_columns = Vec::new();
    for i in 1..=n_normal {
        ob_columns.push(slots.len());
        slots.push(lookup_token(table, &format!("ob{}", i))?);
    }
    slots.push(TOK_WITH);
    let first = n_anomaly * (anomaly_type - 1) + 1;
    let indices: Vec<usize> = (first..first + n_anomaly).collect();
    let with_commas = slots.len() + 2 * n_anomaly - 1 <= z_len;
    let mut df_columns = Vec::new();
    for (i, &k) in indices.iter().enumerate() {
        if i > 0 && with_commas {
            slots.push(TOK_COMMA);
        }
        df_columns.push(slots.len());
        slots.push(lookup_token(table, &format!("df{}", k))?);
    }
    pad_to(&mut slots, z_len)?;
    Ok(Prompt {
        anomaly_type,
        slots,
        ob_columns,
        df_columns,
        anomaly_token_indices: indices,
    })
}

/// "a <ob..>" padded to z_len.
pub fn build_normal_prompt(table: &TokenTable, n_normal: usize, z_len: usize) -> Result<Prompt> {
    let mut slots = vec![TOK_A];
    let mut ob_columns = Vec::new();
    for i in 1..=n_normal {
        ob_columns.push(slots.len());
        slots.push(lookup_token(table, &format!("ob{}", i))?);
    }
    pad_to(&mut slots, z_len)?;
    Ok(Prompt {
        anomaly_type: 0,
        slots,
        ob_columns,
        df_columns: Vec::new(),
        anomaly_token_indices: Vec::new(),
    })
}

fn lookup_token(table: &TokenTable, name: &str) -> Result<usize> {
    table
        .lookup(name)
        .ok_or_else(|| SeasError::Config(format!("token '{}' not in table", name)))
}

fn pad_to(slots: &mut Vec<usize>, z_len: usize) -> Result<()> {
    if slots.len() > z_len {
        return Err(SeasError::Config(format!(
            "prompt length {} exceeds padded length {}",
            slots.len(),
            z_len
        )));
    }
    while slots.len() < z_len {
        slots.push(TOK_PAD);
    }
    Ok(())
}

/// Conditioning rows [z_len, cond_dim] for one prompt.
pub fn conditioning(g: &mut Graph, table_node: NodeId, prompt: &Prompt) -> NodeId {
    g.gather_rows(table_node, prompt.slots.clone())
}
