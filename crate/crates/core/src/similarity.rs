//! Pairwise label-distribution distance between clients, computed behind an
//! isolation boundary.
//!
//! Clients hand their per-class label counts to a [`SimilarityOracle`]. The
//! oracle has no accessor for the stored counts: the only thing that leaves it
//! is the [`SimilarityMatrix`].
//!
//! The distance is the earth mover's distance between normalized class
//! histograms under a unit ground distance between distinct labels, i.e. the
//! L1 distance `Σ_c |p_i(c) − p_j(c)|`, which lies in `[0, 2]`.

use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ClientId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimilarityError {
    #[error("client {0} already submitted its class counts")]
    DuplicateSubmission(ClientId),
    #[error("client {client}: expected {expected} class counts, got {actual}")]
    LengthMismatch {
        client: ClientId,
        expected: usize,
        actual: usize,
    },
    #[error("client {0} submitted an all-zero count vector")]
    EmptyCounts(ClientId),
    #[error("missing submissions from clients {0:?}")]
    MissingSubmissions(Vec<ClientId>),
    #[error("duplicate client id {0} in the requested order")]
    DuplicateClientInOrder(ClientId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassCountSubmission {
    pub client_id: ClientId,
    pub counts: Vec<u64>,
}

/// Acknowledges a submission. Carries nothing but the submitter's id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Receipt {
    pub client_id: ClientId,
}

#[derive(Debug)]
pub struct SimilarityOracle {
    num_classes: usize,
    store: Mutex<BTreeMap<ClientId, Vec<u64>>>,
}

impl SimilarityOracle {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            store: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn submit(&self, submission: ClassCountSubmission) -> Result<Receipt, SimilarityError> {
        let ClassCountSubmission { client_id, counts } = submission;
        if counts.len() != self.num_classes {
            return Err(SimilarityError::LengthMismatch {
                client: client_id,
                expected: self.num_classes,
                actual: counts.len(),
            });
        }
        if counts.iter().all(|&c| c == 0) {
            return Err(SimilarityError::EmptyCounts(client_id));
        }
        let mut store = self.store.lock().expect("oracle store poisoned");
        if store.contains_key(&client_id) {
            return Err(SimilarityError::DuplicateSubmission(client_id));
        }
        store.insert(client_id, counts);
        Ok(Receipt { client_id })
    }

    pub fn submitted_count(&self) -> usize {
        self.store.lock().expect("oracle store poisoned").len()
    }

    /// Builds the matrix over `expected`, in that order.
    pub fn compute_matrix(&self, expected: &[ClientId]) -> Result<SimilarityMatrix, SimilarityError> {
        let store = self.store.lock().expect("oracle store poisoned");
        let missing: Vec<ClientId> = expected.iter().copied().filter(|id| !store.contains_key(id)).collect();
        if !missing.is_empty() {
            return Err(SimilarityError::MissingSubmissions(missing));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &id in expected {
            if !seen.insert(id) {
                return Err(SimilarityError::DuplicateClientInOrder(id));
            }
        }
        let m = expected.len();
        let mut values = vec![0.0; m * m];
        for i in 0..m {
            for j in i + 1..m {
                let d = histogram_distance(&store[&expected[i]], &store[&expected[j]]);
                values[i * m + j] = d;
                values[j * m + i] = d;
            }
        }
        Ok(SimilarityMatrix {
            clients: expected.to_vec(),
            values,
        })
    }

    /// Builds the matrix over every submitted client, ascending by id.
    pub fn compute_matrix_all(&self) -> Result<SimilarityMatrix, SimilarityError> {
        let ids: Vec<ClientId> = self.store.lock().expect("oracle store poisoned").keys().copied().collect();
        self.compute_matrix(&ids)
    }
}

/// L1 distance between the normalized histograms of two count vectors.
///
/// The numerator `Σ |a_c·T_b − b_c·T_a|` is exact integer arithmetic, so the
/// result is a single correctly rounded division. That makes it exactly
/// symmetric and exactly invariant to scaling either vector.
fn histogram_distance(a: &[u64], b: &[u64]) -> f64 {
    let ta: u128 = a.iter().map(|&v| v as u128).sum();
    let tb: u128 = b.iter().map(|&v| v as u128).sum();
    let num: u128 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as u128 * tb).abs_diff(y as u128 * ta))
        .sum();
    if num == 0 {
        return 0.0;
    }
    let denom = ta * tb;
    // Reduce so both fit in f64's exact integer range where possible.
    let g = gcd(num, denom);
    (num / g) as f64 / (denom / g) as f64
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Symmetric `m × m` distance matrix with a zero diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    clients: Vec<ClientId>,
    /// Row-major.
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    pub fn clients(&self) -> &[ClientId] {
        &self.clients
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.clients.len() + j]
    }

    pub fn index_of(&self, client: ClientId) -> Option<usize> {
        self.clients.iter().position(|&c| c == client)
    }

    /// Distance between two clients by id.
    pub fn between(&self, a: ClientId, b: ClientId) -> Option<f64> {
        Some(self.get(self.index_of(a)?, self.index_of(b)?))
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.clients.len().max(1)).map(<[f64]>::to_vec).collect()
    }

    /// A matrix of zeros over `clients`, for callers that ignore similarity.
    pub fn zeros(clients: Vec<ClientId>) -> Self {
        let m = clients.len();
        Self {
            clients,
            values: vec![0.0; m * m],
        }
    }

    /// Builds a matrix from explicit rows. Rejects non-square, asymmetric,
    /// out-of-range or non-zero-diagonal input.
    pub fn from_rows(clients: Vec<ClientId>, rows: Vec<Vec<f64>>) -> Result<Self, String> {
        let m = clients.len();
        if rows.len() != m || rows.iter().any(|r| r.len() != m) {
            return Err(format!("expected a {m}x{m} matrix"));
        }
        for (i, row) in rows.iter().enumerate() {
            if row[i] != 0.0 {
                return Err(format!("diagonal entry {i} is not zero"));
            }
            for (j, &v) in row.iter().enumerate() {
                if !(0.0..=2.0).contains(&v) {
                    return Err(format!("entry ({i},{j}) = {v} outside [0, 2]"));
                }
                if v != rows[j][i] {
                    return Err(format!("entry ({i},{j}) differs from ({j},{i})"));
                }
            }
        }
        Ok(Self {
            clients,
            values: rows.into_iter().flatten().collect(),
        })
    }
}
