//! Cross-batch stores: the momentum-embedding queue and the prototype bank.
//!
//! Class indices are zero-based throughout (`0..K`).

use crate::error::{MoproError, Result};
use crate::numkit::{dot, norm, softmax, Tensor};

/// Tolerance for the unit-norm contract on incoming embeddings.
pub const UNIT_NORM_TOL: f64 = 1e-6;

fn check_unit(row: &[f64], what: &str) -> Result<()> {
    let n = norm(row);
    if (n - 1.0).abs() > UNIT_NORM_TOL {
        return Err(MoproError::Contract(format!(
            "{what} must be unit-norm, got norm {n}"
        )));
    }
    Ok(())
}

/// Divide by `n` unless the row is already unit-norm to within rounding,
/// so already-normalised inputs are stored bit-for-bit.
fn rescale_to_unit(row: &mut [f64], n: f64) {
    if (n - 1.0).abs() > 4.0 * f64::EPSILON {
        row.iter_mut().for_each(|c| *c /= n);
    }
}

/// Fixed-capacity FIFO of unit-norm momentum embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingQueue {
    capacity: usize,
    dim: usize,
    buffer: Vec<f64>,
    /// Slot the next embedding is written to.
    cursor: usize,
    len: usize,
}

impl EmbeddingQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(MoproError::config("queue_size", "must be positive"));
        }
        if dim == 0 {
            return Err(MoproError::config("embed_dim", "must be positive"));
        }
        Ok(EmbeddingQueue {
            capacity,
            dim,
            buffer: vec![0.0; capacity * dim],
            cursor: 0,
            len: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_full(&self) -> bool {
        self.len == self.capacity
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Push every row of `batch`, evicting the oldest entries once full.
    /// Rows are validated before anything is written.
    pub fn enqueue(&mut self, batch: &Tensor) -> Result<()> {
        if batch.cols() != self.dim {
            return Err(MoproError::Dimension {
                op: "enqueue",
                left: vec![self.capacity, self.dim],
                right: batch.shape().to_vec(),
            });
        }
        for row in batch.row_iter() {
            check_unit(row, "queued embedding")?;
        }
        for row in batch.row_iter() {
            let start = self.cursor * self.dim;
            self.buffer[start..start + self.dim].copy_from_slice(row);
            self.cursor = (self.cursor + 1) % self.capacity;
            self.len = (self.len + 1).min(self.capacity);
        }
        Ok(())
    }

    /// Stored embeddings, oldest first.
    pub fn entries(&self) -> impl Iterator<Item = &[f64]> {
        let oldest = if self.is_full() { self.cursor } else { 0 };
        (0..self.len).map(move |i| {
            let slot = (oldest + i) % self.capacity;
            &self.buffer[slot * self.dim..(slot + 1) * self.dim]
        })
    }

    /// Occupied slots in storage order; cheaper than [`entries`](Self::entries)
    /// when order does not matter.
    pub fn slots(&self) -> impl Iterator<Item = &[f64]> {
        self.buffer[..self.len * self.dim].chunks_exact(self.dim)
    }

    pub(crate) fn raw_parts(&self) -> (&[f64], usize, usize) {
        (&self.buffer, self.cursor, self.len)
    }

    pub(crate) fn from_raw_parts(
        capacity: usize,
        dim: usize,
        buffer: Vec<f64>,
        cursor: usize,
        len: usize,
    ) -> Result<Self> {
        if buffer.len() != capacity * dim || cursor >= capacity.max(1) || len > capacity {
            return Err(MoproError::Structural(format!(
                "queue block inconsistent: capacity {capacity}, dim {dim}, {} values, cursor {cursor}, len {len}",
                buffer.len()
            )));
        }
        Ok(EmbeddingQueue {
            capacity,
            dim,
            buffer,
            cursor,
            len,
        })
    }
}

/// K momentum prototypes updated by an exponential moving average of the
/// embeddings pseudo-labelled with their class.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    classes: usize,
    dim: usize,
    momentum: f64,
    /// Re-project each prototype onto the unit sphere after every update.
    renormalize: bool,
    rows: Vec<f64>,
    initialized: Vec<bool>,
}

impl PrototypeBank {
    pub fn new(classes: usize, dim: usize, momentum: f64) -> Result<Self> {
        if classes == 0 {
            return Err(MoproError::config("classes", "must be positive"));
        }
        if dim == 0 {
            return Err(MoproError::config("embed_dim", "must be positive"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(MoproError::config(
                "momentum",
                format!("{momentum} is outside [0, 1)"),
            ));
        }
        Ok(PrototypeBank {
            classes,
            dim,
            momentum,
            renormalize: true,
            rows: vec![0.0; classes * dim],
            initialized: vec![false; classes],
        })
    }

    /// Keep the raw moving average instead of re-normalising after each step.
    pub fn without_renormalization(mut self) -> Self {
        self.renormalize = false;
        self
    }

    pub fn renormalizes(&self) -> bool {
        self.renormalize
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn is_initialized(&self, k: usize) -> bool {
        self.initialized.get(k).copied().unwrap_or(false)
    }

    pub fn all_initialized(&self) -> bool {
        self.initialized.iter().all(|&b| b)
    }

    pub fn prototype(&self, k: usize) -> &[f64] {
        &self.rows[k * self.dim..(k + 1) * self.dim]
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::from_vec(self.classes, self.dim, self.rows.clone())
    }

    /// Set one prototype directly (normalised). Used by tests and tools.
    pub fn set_prototype(&mut self, k: usize, value: &[f64]) -> Result<()> {
        self.check_class(k)?;
        self.check_width(value.len())?;
        let n = norm(value);
        if !(n > 0.0) {
            return Err(MoproError::Degenerate(format!(
                "prototype {k} would have zero norm"
            )));
        }
        let row = &mut self.rows[k * self.dim..(k + 1) * self.dim];
        row.copy_from_slice(value);
        rescale_to_unit(row, n);
        self.initialized[k] = true;
        Ok(())
    }

    fn check_class(&self, k: usize) -> Result<()> {
        if k >= self.classes {
            return Err(MoproError::Contract(format!(
                "class {k} out of range for {} prototypes",
                self.classes
            )));
        }
        Ok(())
    }

    fn check_width(&self, width: usize) -> Result<()> {
        if width != self.dim {
            return Err(MoproError::Dimension {
                op: "prototype",
                left: vec![self.classes, self.dim],
                right: vec![width],
            });
        }
        Ok(())
    }

    /// Each prototype becomes the normalised mean of the embeddings labelled
    /// with its class.
    pub fn init_prototypes(&mut self, embeddings: &Tensor, labels: &[usize]) -> Result<()> {
        self.check_width(embeddings.cols())?;
        if embeddings.rows() != labels.len() {
            return Err(MoproError::Dimension {
                op: "init_prototypes",
                left: embeddings.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let mut sums = vec![0.0; self.classes * self.dim];
        let mut counts = vec![0usize; self.classes];
        for (row, &k) in embeddings.row_iter().zip(labels) {
            self.check_class(k)?;
            counts[k] += 1;
            for (s, v) in sums[k * self.dim..(k + 1) * self.dim].iter_mut().zip(row) {
                *s += v;
            }
        }
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(MoproError::Init(format!(
                "class {k} has no samples to initialise its prototype"
            )));
        }
        for k in 0..self.classes {
            let mean = &sums[k * self.dim..(k + 1) * self.dim];
            let n = norm(mean);
            if !(n > 1e-12 * counts[k] as f64) {
                return Err(MoproError::Init(format!(
                    "class {k} embeddings average to the zero vector"
                )));
            }
        }
        for k in 0..self.classes {
            let mean = sums[k * self.dim..(k + 1) * self.dim].to_vec();
            self.set_prototype(k, &mean)?;
        }
        Ok(())
    }

    /// `c_k ← m·c_k + (1−m)·z`, then re-normalised unless disabled.
    pub fn update_prototype(&mut self, k: usize, z: &[f64]) -> Result<()> {
        self.check_class(k)?;
        self.check_width(z.len())?;
        if !self.initialized[k] {
            return Err(MoproError::State(format!(
                "prototype {k} updated before initialisation"
            )));
        }
        check_unit(z, "prototype update embedding")?;
        let m = self.momentum;
        let row = &mut self.rows[k * self.dim..(k + 1) * self.dim];
        for (c, v) in row.iter_mut().zip(z) {
            *c = m * *c + (1.0 - m) * v;
        }
        if self.renormalize {
            let n = norm(row);
            if !(n > 0.0) {
                return Err(MoproError::Degenerate(format!(
                    "prototype {k} collapsed to zero"
                )));
            }
            rescale_to_unit(row, n);
        }
        Ok(())
    }

    /// Softmax over `z·c_k / τ`.
    pub fn prototype_scores(&self, z: &[f64], tau: f64) -> Result<Vec<f64>> {
        let logits = self.similarity_logits(z, tau)?;
        softmax(&logits)
    }

    /// `z·c_k / τ` for every class.
    pub fn similarity_logits(&self, z: &[f64], tau: f64) -> Result<Vec<f64>> {
        if !(tau > 0.0) {
            return Err(MoproError::config("tau", format!("{tau} must be > 0")));
        }
        self.check_width(z.len())?;
        if let Some(k) = self.initialized.iter().position(|&b| !b) {
            return Err(MoproError::State(format!(
                "prototype {k} is not initialised"
            )));
        }
        Ok((0..self.classes)
            .map(|k| dot(z, self.prototype(k)) / tau)
            .collect())
    }

    pub(crate) fn raw_rows(&self) -> &[f64] {
        &self.rows
    }

    pub(crate) fn initialized_flags(&self) -> &[bool] {
        &self.initialized
    }

    pub(crate) fn from_raw_parts(
        classes: usize,
        dim: usize,
        momentum: f64,
        renormalize: bool,
        rows: Vec<f64>,
        initialized: Vec<bool>,
    ) -> Result<Self> {
        let mut bank = PrototypeBank::new(classes, dim, momentum)?;
        if rows.len() != classes * dim || initialized.len() != classes {
            return Err(MoproError::Structural(format!(
                "prototype block holds {} values for {classes}x{dim}",
                rows.len()
            )));
        }
        bank.rows = rows;
        bank.initialized = initialized;
        bank.renormalize = renormalize;
        Ok(bank)
    }
}
