//! Four-agent coin game on a 5x5 torus.
//!
//! Agent 0 is red (the shaper) with a latent role: 0 altruistic, 1 selfish.
//! Agents 1..4 are blue observers. A single coin is always on the board and
//! respawns on a random free cell with a random color when collected.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EnvDescriptor, HiddenRoleEnv, StepResult};
use crate::error::{DbosError, Result};

pub const COIN_GRID: usize = 5;
pub const COIN_HORIZON: usize = 30;
pub const COIN_OBS_DIM: usize = 10;
const N: usize = 4;
const N_BLUE: usize = N - 1;
pub const ALTRUISTIC: usize = 0;
pub const SELFISH: usize = 1;
/// Policy head used by every blue agent.
const BLUE_POLICY_ROLE: usize = 2;

const COLLECT_REWARD: f64 = 1.0;
const BLUE_TEAM_PENALTY: f64 = 2.0;
const ALTRUIST_PENALTY: f64 = 1.0;
const RED_PENALTY: f64 = 2.0;

#[derive(Debug, Clone)]
pub struct CoinGame {
    pos: [(usize, usize); N],
    coin: (usize, usize),
    coin_blue: bool,
    red_role: usize,
    t: usize,
    done: bool,
    rng: ChaCha8Rng,
}

impl Default for CoinGame {
    fn default() -> Self {
        Self::new()
    }
}

impl CoinGame {
    pub fn new() -> Self {
        let mut env = Self {
            pos: [(0, 0); N],
            coin: (0, 0),
            coin_blue: false,
            red_role: ALTRUISTIC,
            t: 0,
            done: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        };
        env.reset(0);
        env
    }

    /// Fixed layout for scripted play. The respawn generator is seeded with `seed`.
    pub fn scripted(
        pos: [(usize, usize); N],
        coin: (usize, usize),
        coin_blue: bool,
        red_role: usize,
        seed: u64,
    ) -> Result<Self> {
        let in_grid = |(x, y): (usize, usize)| x < COIN_GRID && y < COIN_GRID;
        if !pos.iter().copied().all(in_grid) || !in_grid(coin) || red_role > SELFISH {
            return Err(DbosError::Config("scripted coin game state out of range".into()));
        }
        Ok(Self {
            pos,
            coin,
            coin_blue,
            red_role,
            t: 0,
            done: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn positions(&self) -> [(usize, usize); N] {
        self.pos
    }

    pub fn coin(&self) -> ((usize, usize), bool) {
        (self.coin, self.coin_blue)
    }

    pub fn red_role(&self) -> usize {
        self.red_role
    }

    pub fn t(&self) -> usize {
        self.t
    }

    fn random_free_cell(&mut self) -> (usize, usize) {
        loop {
            let c = (self.rng.gen_range(0..COIN_GRID), self.rng.gen_range(0..COIN_GRID));
            if !self.pos.contains(&c) {
                return c;
            }
        }
    }

    fn respawn(&mut self) {
        self.coin = self.random_free_cell();
        self.coin_blue = self.rng.gen_bool(0.5);
    }

    fn observe(&self, me: usize) -> Vec<f64> {
        let s = (COIN_GRID - 1) as f64;
        let f = |v: usize| v as f64 / s;
        vec![
            self.t as f64 / COIN_HORIZON as f64,
            f(self.pos[me].0),
            f(self.pos[me].1),
            f(self.pos[0].0),
            f(self.pos[0].1),
            f(self.pos[1].0),
            f(self.pos[1].1),
            f(self.coin.0),
            f(self.coin.1),
            f64::from(u8::from(self.coin_blue)),
        ]
    }
}

fn moved((x, y): (usize, usize), action: usize) -> (usize, usize) {
    let g = COIN_GRID;
    match action {
        0 => (x, (y + g - 1) % g),
        1 => (x, (y + 1) % g),
        2 => ((x + g - 1) % g, y),
        _ => ((x + 1) % g, y),
    }
}

impl HiddenRoleEnv for CoinGame {
    fn descriptor(&self) -> EnvDescriptor {
        EnvDescriptor {
            n_agents: N,
            n_actions: 4,
            obs_dim: COIN_OBS_DIM,
            n_belief_roles: 2,
            n_policy_roles: 3,
            n_observers: N_BLUE,
            n_role_labels: 1,
        }
    }

    fn reset(&mut self, seed: u64) -> Vec<Vec<f64>> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..N {
            self.pos[i] = (self.rng.gen_range(0..COIN_GRID), self.rng.gen_range(0..COIN_GRID));
        }
        self.red_role = self.rng.gen_range(0..2);
        self.respawn();
        self.t = 0;
        self.done = false;
        self.observations()
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult> {
        if self.done {
            return Err(DbosError::StepAfterTerminal);
        }
        if actions.len() != N {
            return Err(DbosError::Dimension {
                context: "coingame actions",
                expected: N,
                got: actions.len(),
            });
        }
        if let Some(&a) = actions.iter().find(|a| **a >= 4) {
            return Err(DbosError::ActionOutOfRange { action: a, n_actions: 4 });
        }
        for i in 0..N {
            self.pos[i] = moved(self.pos[i], actions[i]);
        }
        let mut rewards = vec![0.0; N];
        let collectors: Vec<usize> = (0..N).filter(|i| self.pos[*i] == self.coin).collect();
        if !collectors.is_empty() {
            for &i in &collectors {
                rewards[i] += COLLECT_REWARD;
            }
            let red_collected = collectors.contains(&0);
            let blue_collected = collectors.iter().any(|i| *i > 0);
            if self.coin_blue && red_collected {
                for r in rewards.iter_mut().skip(1) {
                    *r -= BLUE_TEAM_PENALTY / N_BLUE as f64;
                }
                if self.red_role == ALTRUISTIC {
                    rewards[0] -= ALTRUIST_PENALTY;
                }
            }
            if !self.coin_blue && blue_collected {
                rewards[0] -= RED_PENALTY;
            }
            self.respawn();
        }
        self.t += 1;
        self.done = self.t >= COIN_HORIZON;
        Ok(StepResult {
            obs: self.observations(),
            rewards,
            done: self.done,
            outcome: self.done.then(|| "horizon".to_string()),
        })
    }

    fn observations(&self) -> Vec<Vec<f64>> {
        (0..N).map(|i| self.observe(i)).collect()
    }

    fn is_terminal(&self) -> bool {
        self.done
    }

    fn policy_roles(&self) -> Vec<usize> {
        let mut r = vec![BLUE_POLICY_ROLE; N];
        r[0] = self.red_role;
        r
    }

    fn shaper(&self) -> usize {
        0
    }

    fn shaper_role(&self) -> usize {
        self.red_role
    }

    fn observers(&self) -> Vec<usize> {
        (1..N).collect()
    }

    fn perceived_role(&self, _observer: usize) -> usize {
        0
    }

    fn phase_name(&self) -> &'static str {
        "move"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn torus_wraps() {
        let mut p = (3, 2);
        for _ in 0..COIN_GRID {
            p = moved(p, 3);
        }
        assert_eq!(p, (3, 2));
        assert_eq!(moved((0, 0), 0), (0, 4));
        assert_eq!(moved((0, 0), 2), (4, 0));
    }

    #[test]
    fn observation_shape_and_range() {
        let mut env = CoinGame::new();
        let obs = env.reset(12);
        assert_eq!(obs.len(), 4);
        for o in &obs {
            assert_eq!(o.len(), COIN_OBS_DIM);
            assert!(o.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        // everyone sees the same red position
        assert_eq!(obs[1][3], obs[2][3]);
    }
}
