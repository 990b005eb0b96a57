//! Per-(class, domain) FIFO queues of teacher embeddings and the positive /
//! negative pools assembled from them.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Allowed deviation from unit norm for queued embeddings.
pub const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct QueueStore {
    classes: usize,
    domains: usize,
    dim: usize,
    capacity: usize,
    // grid[c * domains + d], oldest entry first
    grid: Vec<VecDeque<Vec<f64>>>,
}

/// Stacked pool rows with the `(class, domain)` queue each row came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolView {
    pub matrix: Tensor,
    pub provenance: Vec<(usize, usize)>,
}

impl PoolView {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }
}

impl QueueStore {
    pub fn new(classes: usize, domains: usize, dim: usize, capacity: usize) -> Result<Self> {
        if classes == 0 || domains == 0 || dim == 0 || capacity == 0 {
            return Err(Error::Config(format!(
                "queue store needs positive sizes (classes={classes}, domains={domains}, dim={dim}, queue_sz={capacity})"
            )));
        }
        Ok(Self {
            classes,
            domains,
            dim,
            capacity,
            grid: vec![VecDeque::with_capacity(capacity); classes * domains],
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn domains(&self) -> usize {
        self.domains
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn cell(&self, c: usize, d: usize) -> Result<usize> {
        if c >= self.classes || d >= self.domains {
            return Err(Error::Index(format!(
                "queue ({c}, {d}) outside {}x{} grid",
                self.classes, self.domains
            )));
        }
        Ok(c * self.domains + d)
    }

    pub fn queue(&self, c: usize, d: usize) -> Result<&VecDeque<Vec<f64>>> {
        Ok(&self.grid[self.cell(c, d)?])
    }

    pub fn len(&self, c: usize, d: usize) -> Result<usize> {
        Ok(self.queue(c, d)?.len())
    }

    pub fn total_len(&self) -> usize {
        self.grid.iter().map(VecDeque::len).sum()
    }

    /// Appends the rows of `embs` (`[B, dim]`, unit-norm) and drops the
    /// oldest entries beyond capacity.
    pub fn enqueue_dequeue(&mut self, c: usize, d: usize, embs: &Tensor) -> Result<()> {
        let idx = self.cell(c, d)?;
        if embs.numel() == 0 {
            return Ok(());
        }
        if embs.rank() != 2 || embs.shape()[1] != self.dim {
            return Err(Error::dim("enqueue_dequeue", embs.shape(), &[0, self.dim]));
        }
        for i in 0..embs.shape()[0] {
            let norm = embs.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if !((norm - 1.0).abs() <= UNIT_NORM_TOL) {
                return Err(Error::Contract(format!(
                    "queued embedding row {i} has norm {norm}, expected 1"
                )));
            }
        }
        let q = &mut self.grid[idx];
        for i in 0..embs.shape()[0] {
            q.push_back(embs.row(i).to_vec());
        }
        while q.len() > self.capacity {
            q.pop_front();
        }
        Ok(())
    }

    fn gather(&self, cells: impl Iterator<Item = (usize, usize)>) -> PoolView {
        let mut data = Vec::new();
        let mut provenance = Vec::new();
        for (c, d) in cells {
            for row in &self.grid[c * self.domains + d] {
                data.extend_from_slice(row);
                provenance.push((c, d));
            }
        }
        PoolView {
            matrix: Tensor::new(vec![provenance.len(), self.dim], data).unwrap(),
            provenance,
        }
    }

    /// Same class, every other domain.
    pub fn positive_pool(&self, c: usize, d: usize) -> Result<PoolView> {
        self.cell(c, d)?;
        Ok(self.gather((0..self.domains).filter(|&dd| dd != d).map(|dd| (c, dd))))
    }

    /// Every other class, every domain including `d`.
    pub fn negative_pool(&self, c: usize, d: usize) -> Result<PoolView> {
        self.cell(c, d)?;
        let domains = self.domains;
        Ok(self.gather(
            (0..self.classes)
                .filter(|&cc| cc != c)
                .flat_map(|cc| (0..domains).map(move |dd| (cc, dd))),
        ))
    }
}
