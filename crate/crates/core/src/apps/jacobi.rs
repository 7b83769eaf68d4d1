//! Jacobi iteration for the 5-point Poisson problem on a `rows x cols` grid
//! with zero Dirichlet boundary.
//!
//! Global state: the iterate `x` as `rows * cols` f64 values, row-major.
//! Local state: `[start, len, sweeps, rhs block...]`.
//! Contribution: `[start, len, new x block...]`.

use rand::Rng;

use super::bytes::{read_block_header, Reader, Writer};
use super::{block, stream_rng, AppError, AppSpec, BspApp, StepOutput};

#[derive(Debug, Clone)]
pub struct JacobiSolver {
    spec: AppSpec,
    rows: usize,
    cols: usize,
}

impl JacobiSolver {
    pub fn new(spec: AppSpec) -> Self {
        JacobiSolver {
            spec,
            rows: spec.dimension as usize,
            cols: spec.population as usize,
        }
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Right-hand side value at flat index `i`, uniform in `[-1, 1)`.
    pub fn rhs(seed: u64, i: usize) -> f64 {
        stream_rng(seed, i as u64, 0).random_range(-1.0..1.0)
    }

    pub fn decode_solution(&self, global: &[u8]) -> Result<Vec<f64>, AppError> {
        let mut r = Reader::new("jacobi global state", global);
        let x = r.f64s(self.cells())?;
        r.finish()?;
        Ok(x)
    }

    fn local_state(&self, worker: u32, workers: u32, sweeps: u64) -> Vec<u8> {
        let b = block(worker, workers, self.cells());
        let mut w = Writer::with_capacity(24 + 8 * b.len());
        w.u64(b.start as u64).u64(b.len() as u64).u64(sweeps);
        for i in b {
            w.f64(Self::rhs(self.spec.seed, i));
        }
        w.finish()
    }
}

impl BspApp for JacobiSolver {
    fn spec(&self) -> AppSpec {
        self.spec
    }

    fn init_global(&self) -> Vec<u8> {
        vec![0u8; self.cells() * 8]
    }

    fn init_local(&self, worker: u32, workers: u32) -> Vec<u8> {
        self.local_state(worker, workers, 0)
    }

    fn superstep(
        &self,
        global: &[u8],
        local: &[u8],
        _worker: u32,
        _workers: u32,
        _superstep: u64,
    ) -> Result<StepOutput, AppError> {
        let x = self.decode_solution(global)?;
        let mut r = Reader::new("jacobi local state", local);
        let (start, len) = read_block_header(&mut r, self.cells())?;
        let sweeps = r.u64()?;
        let rhs = r.f64s(len)?;
        r.finish()?;

        let cols = self.cols;
        let mut out = Writer::with_capacity(16 + 8 * len);
        out.u64(start as u64).u64(len as u64);
        for (k, b) in rhs.iter().enumerate() {
            let i = start + k;
            let (row, col) = (i / cols, i % cols);
            let mut acc = *b;
            if row > 0 {
                acc += x[i - cols];
            }
            if row + 1 < self.rows {
                acc += x[i + cols];
            }
            if col > 0 {
                acc += x[i - 1];
            }
            if col + 1 < cols {
                acc += x[i + 1];
            }
            out.f64(acc / 4.0);
        }

        let mut new_local = Writer::with_capacity(local.len());
        new_local
            .u64(start as u64)
            .u64(len as u64)
            .u64(sweeps + 1)
            .f64s(&rhs);
        Ok(StepOutput {
            local: new_local.finish(),
            contribution: out.finish(),
        })
    }

    fn reduce(&self, global: &[u8], contributions: &[Vec<u8>]) -> Result<Vec<u8>, AppError> {
        let mut x = self.decode_solution(global)?;
        for c in contributions {
            let mut r = Reader::new("jacobi contribution", c);
            let (start, len) = read_block_header(&mut r, x.len())?;
            for slot in &mut x[start..start + len] {
                *slot = r.f64()?;
            }
            r.finish()?;
        }
        let mut w = Writer::with_capacity(global.len());
        w.f64s(&x);
        Ok(w.finish())
    }

    fn rebuild_local(
        &self,
        _global: &[u8],
        worker: u32,
        workers: u32,
        superstep: u64,
    ) -> Result<Vec<u8>, AppError> {
        Ok(self.local_state(worker, workers, superstep))
    }
}
