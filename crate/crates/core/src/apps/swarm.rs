//! Synchronous particle swarm minimizing the Rastrigin function.
//!
//! The whole swarm lives in the global state so a coordinated rollback needs
//! nothing else; workers update the particles of their block and the
//! coordinator recomputes the global best in particle order.
//!
//! Global state: `[best_value, best_index, best_position(d)]` followed by one
//! record per particle: `position(d), velocity(d), personal_best(d), personal_best_value`.
//! Local state: `[start, len, evaluations]`.
//! Contribution: `[start, len, particle records...]`.

use rand::Rng;

use super::bytes::{read_block_header, Reader, Writer};
use super::{block, rastrigin, stream_rng, AppError, AppSpec, BspApp, StepOutput, SEARCH_BOUND};

pub const INERTIA: f64 = 0.7298;
pub const COGNITIVE: f64 = 1.49618;
pub const SOCIAL: f64 = 1.49618;
/// Velocity clamp as a fraction of the domain width.
pub const VELOCITY_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub position: Vec<f64>,
    pub velocity: Vec<f64>,
    pub best_position: Vec<f64>,
    pub best_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwarmState {
    pub best_value: f64,
    pub best_index: u64,
    pub best_position: Vec<f64>,
    pub particles: Vec<Particle>,
}

#[derive(Debug, Clone)]
pub struct ParticleSwarm {
    spec: AppSpec,
    dim: usize,
    count: usize,
}

pub fn max_velocity() -> f64 {
    VELOCITY_FRACTION * 2.0 * SEARCH_BOUND
}

impl ParticleSwarm {
    pub fn new(spec: AppSpec) -> Self {
        ParticleSwarm {
            spec,
            dim: spec.dimension as usize,
            count: spec.population as usize,
        }
    }

    fn read_particle(&self, r: &mut Reader<'_>) -> Result<Particle, AppError> {
        Ok(Particle {
            position: r.f64s(self.dim)?,
            velocity: r.f64s(self.dim)?,
            best_position: r.f64s(self.dim)?,
            best_value: r.f64()?,
        })
    }

    fn write_particle(w: &mut Writer, p: &Particle) {
        w.f64s(&p.position)
            .f64s(&p.velocity)
            .f64s(&p.best_position)
            .f64(p.best_value);
    }

    pub fn decode_state(&self, global: &[u8]) -> Result<SwarmState, AppError> {
        let mut r = Reader::new("swarm global state", global);
        let best_value = r.f64()?;
        let best_index = r.u64()?;
        let best_position = r.f64s(self.dim)?;
        let particles = (0..self.count)
            .map(|_| self.read_particle(&mut r))
            .collect::<Result<_, _>>()?;
        r.finish()?;
        Ok(SwarmState {
            best_value,
            best_index,
            best_position,
            particles,
        })
    }

    pub fn encode_state(&self, state: &SwarmState) -> Vec<u8> {
        let mut w = Writer::with_capacity(16 + 8 * self.dim * (1 + 3 * self.count) + 8 * self.count);
        w.f64(state.best_value)
            .u64(state.best_index)
            .f64s(&state.best_position);
        for p in &state.particles {
            Self::write_particle(&mut w, p);
        }
        w.finish()
    }

    /// Lowest personal best; ties go to the lower particle index.
    fn refresh_best(state: &mut SwarmState) {
        let mut best = 0;
        for (i, p) in state.particles.iter().enumerate() {
            if p.best_value < state.particles[best].best_value {
                best = i;
            }
        }
        state.best_index = best as u64;
        state.best_value = state.particles[best].best_value;
        state.best_position = state.particles[best].best_position.clone();
    }

    fn local_state(&self, worker: u32, workers: u32, evaluations: u64) -> Vec<u8> {
        let b = block(worker, workers, self.count);
        let mut w = Writer::with_capacity(24);
        w.u64(b.start as u64).u64(b.len() as u64).u64(evaluations);
        w.finish()
    }
}

impl BspApp for ParticleSwarm {
    fn spec(&self) -> AppSpec {
        self.spec
    }

    fn init_global(&self) -> Vec<u8> {
        let vmax = max_velocity();
        let particles = (0..self.count)
            .map(|i| {
                let mut rng = stream_rng(self.spec.seed, i as u64, 0);
                let position: Vec<f64> = (0..self.dim)
                    .map(|_| rng.random_range(-SEARCH_BOUND..SEARCH_BOUND))
                    .collect();
                let velocity = (0..self.dim).map(|_| rng.random_range(-vmax..vmax)).collect();
                Particle {
                    best_value: rastrigin(&position),
                    best_position: position.clone(),
                    position,
                    velocity,
                }
            })
            .collect();
        let mut state = SwarmState {
            best_value: f64::INFINITY,
            best_index: 0,
            best_position: Vec::new(),
            particles,
        };
        Self::refresh_best(&mut state);
        self.encode_state(&state)
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
        superstep: u64,
    ) -> Result<StepOutput, AppError> {
        let state = self.decode_state(global)?;
        let mut r = Reader::new("swarm local state", local);
        let (start, len) = read_block_header(&mut r, self.count)?;
        let evaluations = r.u64()?;
        r.finish()?;

        let vmax = max_velocity();
        let mut out = Writer::default();
        out.u64(start as u64).u64(len as u64);
        for i in start..start + len {
            let mut p = state.particles[i].clone();
            let mut rng = stream_rng(self.spec.seed, i as u64, superstep);
            for k in 0..self.dim {
                let r1: f64 = rng.random();
                let r2: f64 = rng.random();
                let v = INERTIA * p.velocity[k]
                    + COGNITIVE * r1 * (p.best_position[k] - p.position[k])
                    + SOCIAL * r2 * (state.best_position[k] - p.position[k]);
                p.velocity[k] = v.clamp(-vmax, vmax);
                p.position[k] = (p.position[k] + p.velocity[k]).clamp(-SEARCH_BOUND, SEARCH_BOUND);
            }
            let value = rastrigin(&p.position);
            if value < p.best_value {
                p.best_value = value;
                p.best_position = p.position.clone();
            }
            Self::write_particle(&mut out, &p);
        }
        Ok(StepOutput {
            local: self.local_state_from(start, len, evaluations + len as u64),
            contribution: out.finish(),
        })
    }

    fn reduce(&self, global: &[u8], contributions: &[Vec<u8>]) -> Result<Vec<u8>, AppError> {
        let mut state = self.decode_state(global)?;
        for c in contributions {
            let mut r = Reader::new("swarm contribution", c);
            let (start, len) = read_block_header(&mut r, self.count)?;
            for i in start..start + len {
                state.particles[i] = self.read_particle(&mut r)?;
            }
            r.finish()?;
        }
        Self::refresh_best(&mut state);
        Ok(self.encode_state(&state))
    }

    fn rebuild_local(
        &self,
        _global: &[u8],
        worker: u32,
        workers: u32,
        superstep: u64,
    ) -> Result<Vec<u8>, AppError> {
        let len = block(worker, workers, self.count).len() as u64;
        Ok(self.local_state(worker, workers, len * superstep))
    }
}

impl ParticleSwarm {
    fn local_state_from(&self, start: usize, len: usize, evaluations: u64) -> Vec<u8> {
        let mut w = Writer::with_capacity(24);
        w.u64(start as u64).u64(len as u64).u64(evaluations);
        w.finish()
    }
}
