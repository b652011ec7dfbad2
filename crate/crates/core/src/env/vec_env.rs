//! Data-parallel stepping of independent environments.

use rayon::prelude::*;

use super::{EnvSetup, EnvStep, RaceEnv};
use crate::dynamics::Command;
use crate::error::{Error, Result};

pub struct VecEnv {
    envs: Vec<RaceEnv>,
}

impl VecEnv {
    /// `n_envs` environments seeded `seed, seed + 1, ...`.
    pub fn new(setup: &EnvSetup, n_envs: usize, seed: u64) -> Result<Self> {
        let envs = (0..n_envs)
            .map(|k| RaceEnv::new(setup.clone(), seed.wrapping_add(k as u64)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { envs })
    }

    pub fn from_envs(envs: Vec<RaceEnv>) -> Self {
        Self { envs }
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn envs(&self) -> &[RaceEnv] {
        &self.envs
    }

    pub fn envs_mut(&mut self) -> &mut [RaceEnv] {
        &mut self.envs
    }

    /// Steps every environment once. `commands[e]` holds one command per
    /// agent of environment `e`.
    pub fn step_all(&mut self, commands: &[Vec<Command>]) -> Result<Vec<EnvStep>> {
        if commands.len() != self.envs.len() {
            return Err(Error::Dimension(format!(
                "expected commands for {} environments, got {}",
                self.envs.len(),
                commands.len()
            )));
        }
        self.envs
            .par_iter_mut()
            .zip(commands.par_iter())
            .map(|(env, cmds)| env.step(cmds))
            .collect()
    }
}
