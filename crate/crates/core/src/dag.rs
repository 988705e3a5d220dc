//! Append-only DAG of model-update transactions.
//!
//! Every non-genesis transaction approves exactly two earlier transactions
//! (possibly the same one twice while the DAG is still tiny). Transactions
//! are immutable once inserted and ids are dense indices, so the DAG is a
//! pair of vectors plus an ordered tip set.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learning::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TransactionId(pub u64);

impl TransactionId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TransactionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone)]
pub struct Transaction {
    pub id: TransactionId,
    /// Empty for genesis, two entries otherwise.
    pub parents: Vec<TransactionId>,
    pub params: ModelParams,
    /// `None` marks the genesis transaction.
    pub publisher: Option<usize>,
    pub round: usize,
    /// Observer metadata only. Protocol code never reads this.
    pub poisoned: bool,
}

impl Transaction {
    pub fn is_genesis(&self) -> bool {
        self.publisher.is_none()
    }
}

#[derive(Debug, Clone)]
pub struct Dag {
    transactions: Vec<Transaction>,
    children: Vec<Vec<TransactionId>>,
    tips: BTreeSet<TransactionId>,
}

/// One line of the JSON-lines DAG export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransactionRecord {
    pub id: u64,
    pub parents: Vec<u64>,
    pub publisher: Option<usize>,
    pub round: usize,
    pub poisoned: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<Vec<f64>>,
}

impl Dag {
    pub fn create_genesis(params: ModelParams) -> Self {
        let genesis = Transaction {
            id: TransactionId(0),
            parents: Vec::new(),
            params,
            publisher: None,
            round: 0,
            poisoned: false,
        };
        Dag {
            transactions: vec![genesis],
            children: vec![Vec::new()],
            tips: BTreeSet::from([TransactionId(0)]),
        }
    }

    pub fn genesis(&self) -> TransactionId {
        TransactionId(0)
    }

    pub fn len(&self) -> usize {
        self.transactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transactions.is_empty()
    }

    pub fn contains(&self, id: TransactionId) -> bool {
        id.index() < self.transactions.len()
    }

    pub fn get(&self, id: TransactionId) -> Result<&Transaction> {
        self.transactions
            .get(id.index())
            .ok_or(Error::UnknownTransaction(id))
    }

    pub fn transactions(&self) -> impl Iterator<Item = &Transaction> {
        self.transactions.iter()
    }

    pub fn tips(&self) -> &BTreeSet<TransactionId> {
        &self.tips
    }

    pub fn add_transaction(
        &mut self,
        parents: (TransactionId, TransactionId),
        params: ModelParams,
        publisher: usize,
        round: usize,
        poisoned: bool,
    ) -> Result<TransactionId> {
        for p in [parents.0, parents.1] {
            if !self.contains(p) {
                return Err(Error::UnknownParent(p));
            }
        }
        let id = TransactionId(self.transactions.len() as u64);
        self.children[parents.0.index()].push(id);
        if parents.1 != parents.0 {
            self.children[parents.1.index()].push(id);
        }
        self.tips.remove(&parents.0);
        self.tips.remove(&parents.1);
        self.tips.insert(id);
        self.transactions.push(Transaction {
            id,
            parents: vec![parents.0, parents.1],
            params,
            publisher: Some(publisher),
            round,
            poisoned,
        });
        self.children.push(Vec::new());
        Ok(id)
    }

    /// Direct approvers of `id`, in insertion order.
    pub fn children(&self, id: TransactionId) -> Result<&[TransactionId]> {
        self.children
            .get(id.index())
            .map(Vec::as_slice)
            .ok_or(Error::UnknownTransaction(id))
    }

    pub fn parents(&self, id: TransactionId) -> Result<&[TransactionId]> {
        Ok(&self.get(id)?.parents)
    }

    /// Transitive closure over parent edges, excluding `id` itself.
    pub fn ancestors(&self, id: TransactionId) -> Result<HashSet<TransactionId>> {
        let start = self.get(id)?;
        let mut seen = HashSet::new();
        let mut stack: Vec<TransactionId> = start.parents.clone();
        while let Some(t) = stack.pop() {
            if seen.insert(t) {
                stack.extend_from_slice(&self.transactions[t.index()].parents);
            }
        }
        Ok(seen)
    }

    pub fn records(&self, include_params: bool) -> impl Iterator<Item = TransactionRecord> + '_ {
        self.transactions.iter().map(move |t| TransactionRecord {
            id: t.id.0,
            parents: t.parents.iter().map(|p| p.0).collect(),
            publisher: t.publisher,
            round: t.round,
            poisoned: t.poisoned,
            params: include_params.then(|| t.params.values().to_vec()),
        })
    }

    /// Writes one JSON object per transaction.
    pub fn write_jsonl<W: Write>(&self, mut out: W, include_params: bool) -> std::io::Result<()> {
        for rec in self.records(include_params) {
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}
