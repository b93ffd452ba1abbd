//! Hidden-role games behind one stepping interface.

mod avalon;
mod coingame;

pub use avalon::{combination, Avalon5, AvalonPhase, AVALON_OBS_DIM, MISSION_SIZES};
pub use coingame::{CoinGame, COIN_GRID, COIN_HORIZON, COIN_OBS_DIM};

use serde::{Deserialize, Serialize};
use std::io::Write;
use std::str::FromStr;

use crate::error::{DbosError, Result};

/// Static shape of an environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvDescriptor {
    pub n_agents: usize,
    pub n_actions: usize,
    pub obs_dim: usize,
    /// Size of the role hypothesis set observers reason over.
    pub n_belief_roles: usize,
    /// Number of role heads the shared policy needs.
    pub n_policy_roles: usize,
    pub n_observers: usize,
    /// Distinct labels the shaper can attach to an observer's role.
    pub n_role_labels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub obs: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub done: bool,
    pub outcome: Option<String>,
}

pub trait HiddenRoleEnv {
    fn descriptor(&self) -> EnvDescriptor;
    /// Starts a new episode and returns every agent's observation.
    fn reset(&mut self, seed: u64) -> Vec<Vec<f64>>;
    fn step(&mut self, actions: &[usize]) -> Result<StepResult>;
    fn observations(&self) -> Vec<Vec<f64>>;
    fn is_terminal(&self) -> bool;
    /// Policy head each agent acts through this episode.
    fn policy_roles(&self) -> Vec<usize>;
    /// Agent index of the shaper.
    fn shaper(&self) -> usize;
    /// The shaper's true role in the belief hypothesis set.
    fn shaper_role(&self) -> usize;
    /// Agent indices whose beliefs about the shaper are tracked.
    fn observers(&self) -> Vec<usize>;
    /// What the shaper knows about `observer`'s role, as a small label.
    fn perceived_role(&self, observer: usize) -> usize;
    fn phase_name(&self) -> &'static str;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Avalon5,
    Avalon5Blind,
    CoinGame,
}

impl EnvKind {
    pub fn name(&self) -> &'static str {
        match self {
            EnvKind::Avalon5 => "avalon5",
            EnvKind::Avalon5Blind => "avalon5_blind",
            EnvKind::CoinGame => "coingame",
        }
    }

    pub fn make(&self) -> Box<dyn HiddenRoleEnv> {
        match self {
            EnvKind::Avalon5 => Box::new(Avalon5::new(false)),
            EnvKind::Avalon5Blind => Box::new(Avalon5::new(true)),
            EnvKind::CoinGame => Box::new(CoinGame::new()),
        }
    }

    pub fn descriptor(&self) -> EnvDescriptor {
        self.make().descriptor()
    }

    pub fn is_avalon(&self) -> bool {
        matches!(self, EnvKind::Avalon5 | EnvKind::Avalon5Blind)
    }

    /// Whether an agent plays on the shaper's side: the spies in Avalon, the
    /// red agent in the coin game.
    pub fn on_shaper_side(&self, agent: usize, policy_role: usize) -> bool {
        if self.is_avalon() {
            policy_role < 2
        } else {
            agent == 0
        }
    }

    /// Whether an outcome string is a win for the shaper's side. CoinGame has
    /// no winner.
    pub fn shaper_won(&self, outcome: &str) -> Option<bool> {
        if self.is_avalon() {
            Some(outcome.starts_with("spies_win"))
        } else {
            None
        }
    }
}

impl FromStr for EnvKind {
    type Err = DbosError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avalon5" | "avalon" => Ok(EnvKind::Avalon5),
            "avalon5_blind" => Ok(EnvKind::Avalon5Blind),
            "coingame" | "coin_game" => Ok(EnvKind::CoinGame),
            other => Err(DbosError::Config(format!("unknown environment `{other}`"))),
        }
    }
}

/// One line of a replay dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub step: usize,
    pub phase: String,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub outcome: Option<String>,
}

pub fn write_trajectory_jsonl<W: Write>(w: &mut W, records: &[TrajectoryRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Plays one episode with an action callback and records every step.
pub fn record_episode<F>(
    env: &mut dyn HiddenRoleEnv,
    seed: u64,
    mut policy: F,
) -> Result<Vec<TrajectoryRecord>>
where
    F: FnMut(&dyn HiddenRoleEnv, &[Vec<f64>]) -> Vec<usize>,
{
    let mut obs = env.reset(seed);
    let mut out = Vec::new();
    let mut step = 0;
    while !env.is_terminal() {
        let phase = env.phase_name().to_string();
        let actions = policy(&*env, &obs);
        let res = env.step(&actions)?;
        out.push(TrajectoryRecord {
            step,
            phase,
            actions,
            rewards: res.rewards.clone(),
            outcome: res.outcome.clone(),
        });
        obs = res.obs;
        step += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_parse_and_describe() {
        for name in ["avalon5", "avalon5_blind", "coingame"] {
            let k: EnvKind = name.parse().unwrap();
            assert_eq!(k.name(), name);
        }
        assert!("rtg".parse::<EnvKind>().is_err());
        let d = EnvKind::CoinGame.descriptor();
        assert_eq!((d.n_agents, d.obs_dim, d.n_belief_roles, d.n_observers), (4, 10, 2, 3));
        let d = EnvKind::Avalon5.descriptor();
        assert_eq!((d.n_agents, d.obs_dim, d.n_actions, d.n_belief_roles), (5, 128, 10, 5));
    }

    #[test]
    fn trajectory_dump_is_jsonl() {
        let mut env = CoinGame::new();
        let recs = record_episode(&mut env, 3, |_, _| vec![0, 1, 2, 3]).unwrap();
        assert_eq!(recs.len(), COIN_HORIZON);
        let mut buf = Vec::new();
        write_trajectory_jsonl(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), COIN_HORIZON);
        let last: TrajectoryRecord = serde_json::from_str(text.lines().last().unwrap()).unwrap();
        assert_eq!(last.outcome.as_deref(), Some("horizon"));
    }
}
