//! Synchronous DE/rand/1/bin minimizing the Rastrigin function.
//!
//! Global state: one record per individual, `position(d), fitness`.
//! Local state: `[start, len, evaluations]`.
//! Contribution: `[start, len, records...]` for the worker's block.

use rand::Rng;

use super::bytes::{read_block_header, Reader, Writer};
use super::{block, rastrigin, stream_rng, AppError, AppSpec, BspApp, StepOutput, SEARCH_BOUND};

pub const DIFFERENTIAL_WEIGHT: f64 = 0.5;
pub const CROSSOVER_RATE: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    pub position: Vec<f64>,
    pub fitness: f64,
}

#[derive(Debug, Clone)]
pub struct DifferentialEvolution {
    spec: AppSpec,
    dim: usize,
    count: usize,
}

impl DifferentialEvolution {
    /// Needs at least four individuals to draw three distinct donors.
    pub fn new(spec: AppSpec) -> Result<Self, AppError> {
        if spec.population < 4 {
            return Err(AppError::Invalid(
                "differential evolution needs a population of at least 4".into(),
            ));
        }
        Ok(DifferentialEvolution {
            spec,
            dim: spec.dimension as usize,
            count: spec.population as usize,
        })
    }

    fn read_individual(&self, r: &mut Reader<'_>) -> Result<Individual, AppError> {
        Ok(Individual {
            position: r.f64s(self.dim)?,
            fitness: r.f64()?,
        })
    }

    pub fn decode_population(&self, global: &[u8]) -> Result<Vec<Individual>, AppError> {
        let mut r = Reader::new("evolution global state", global);
        let pop = (0..self.count)
            .map(|_| self.read_individual(&mut r))
            .collect::<Result<_, _>>()?;
        r.finish()?;
        Ok(pop)
    }

    pub fn encode_population(&self, pop: &[Individual]) -> Vec<u8> {
        let mut w = Writer::with_capacity(pop.len() * 8 * (self.dim + 1));
        for ind in pop {
            w.f64s(&ind.position).f64(ind.fitness);
        }
        w.finish()
    }

    fn local_state(start: usize, len: usize, evaluations: u64) -> Vec<u8> {
        let mut w = Writer::with_capacity(24);
        w.u64(start as u64).u64(len as u64).u64(evaluations);
        w.finish()
    }

    /// Three distinct donor indices, all different from `target`.
    pub fn pick_donors(rng: &mut impl Rng, count: usize, target: usize) -> [usize; 3] {
        let mut picked = [usize::MAX; 3];
        let mut n = 0;
        while n < 3 {
            let c = rng.random_range(0..count);
            if c != target && !picked[..n].contains(&c) {
                picked[n] = c;
                n += 1;
            }
        }
        picked
    }
}

impl BspApp for DifferentialEvolution {
    fn spec(&self) -> AppSpec {
        self.spec
    }

    fn init_global(&self) -> Vec<u8> {
        let pop: Vec<_> = (0..self.count)
            .map(|i| {
                let mut rng = stream_rng(self.spec.seed, i as u64, 0);
                let position: Vec<f64> = (0..self.dim)
                    .map(|_| rng.random_range(-SEARCH_BOUND..SEARCH_BOUND))
                    .collect();
                Individual {
                    fitness: rastrigin(&position),
                    position,
                }
            })
            .collect();
        self.encode_population(&pop)
    }

    fn init_local(&self, worker: u32, workers: u32) -> Vec<u8> {
        let b = block(worker, workers, self.count);
        Self::local_state(b.start, b.len(), 0)
    }

    fn superstep(
        &self,
        global: &[u8],
        local: &[u8],
        _worker: u32,
        _workers: u32,
        superstep: u64,
    ) -> Result<StepOutput, AppError> {
        let pop = self.decode_population(global)?;
        let mut r = Reader::new("evolution local state", local);
        let (start, len) = read_block_header(&mut r, self.count)?;
        let evaluations = r.u64()?;
        r.finish()?;

        let mut out = Writer::default();
        out.u64(start as u64).u64(len as u64);
        for i in start..start + len {
            let mut rng = stream_rng(self.spec.seed, i as u64, superstep);
            let [a, b, c] = Self::pick_donors(&mut rng, self.count, i);
            let forced = rng.random_range(0..self.dim);
            let trial: Vec<f64> = (0..self.dim)
                .map(|k| {
                    let cross: f64 = rng.random();
                    if cross < CROSSOVER_RATE || k == forced {
                        (pop[a].position[k]
                            + DIFFERENTIAL_WEIGHT * (pop[b].position[k] - pop[c].position[k]))
                            .clamp(-SEARCH_BOUND, SEARCH_BOUND)
                    } else {
                        pop[i].position[k]
                    }
                })
                .collect();
            let fitness = rastrigin(&trial);
            if fitness <= pop[i].fitness {
                out.f64s(&trial).f64(fitness);
            } else {
                out.f64s(&pop[i].position).f64(pop[i].fitness);
            }
        }
        Ok(StepOutput {
            local: Self::local_state(start, len, evaluations + len as u64),
            contribution: out.finish(),
        })
    }

    fn reduce(&self, global: &[u8], contributions: &[Vec<u8>]) -> Result<Vec<u8>, AppError> {
        let mut pop = self.decode_population(global)?;
        for c in contributions {
            let mut r = Reader::new("evolution contribution", c);
            let (start, len) = read_block_header(&mut r, self.count)?;
            for slot in &mut pop[start..start + len] {
                *slot = self.read_individual(&mut r)?;
            }
            r.finish()?;
        }
        Ok(self.encode_population(&pop))
    }

    fn rebuild_local(
        &self,
        _global: &[u8],
        worker: u32,
        workers: u32,
        superstep: u64,
    ) -> Result<Vec<u8>, AppError> {
        let b = block(worker, workers, self.count);
        Ok(Self::local_state(b.start, b.len(), b.len() as u64 * superstep))
    }
}
