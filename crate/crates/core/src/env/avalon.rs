//! Five-player Resistance/Avalon with two spies.
//!
//! Roles are a permutation of `0..5`: roles 0 and 1 are spies and the player
//! holding role 0 is the shaper. Each step is one phase (propose, vote or
//! quest) and every player submits an action from a shared 10-way space.
//!
//! Observation layout (128 floats):
//!
//! | range     | content                                              |
//! |-----------|------------------------------------------------------|
//! | 0..25     | approved team mask of each played mission (5 x 5)    |
//! | 25..35    | mission outcome one-hot, success then fail (5 x 2)   |
//! | 35..40    | fail cards / 3 per mission                           |
//! | 40..45    | currently proposed team                              |
//! | 45..70    | approve votes this round, attempt-major (5 x 5)      |
//! | 70..75    | attempt already voted on this round                  |
//! | 75..80    | round one-hot                                        |
//! | 80..83    | phase one-hot (propose, vote, quest)                 |
//! | 83..88    | leader one-hot                                       |
//! | 88        | self is leader                                       |
//! | 89        | self on proposed team                                |
//! | 90..95    | consecutive rejections one-hot                       |
//! | 95        | consecutive rejections / 5                           |
//! | 96..100   | spy mission score one-hot                            |
//! | 100..104  | resistance mission score one-hot                     |
//! | 104       | current mission size / 3                             |
//! | 105..110  | own seat one-hot                                     |
//! | 110       | self is spy                                          |
//! | 111       | self on the current mission                          |
//! | 112..117  | partner spy mask (spies only, absent when blind)     |
//! | 117..128  | zero padding                                         |

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EnvDescriptor, HiddenRoleEnv, StepResult};
use crate::error::{DbosError, Result};

pub const AVALON_OBS_DIM: usize = 128;
pub const MISSION_SIZES: [usize; 5] = [2, 3, 2, 3, 3];
const N: usize = 5;
const N_ACTIONS: usize = 10;
/// Vote actions below this approve; quest actions at or above it fail (spies only).
const ACTION_SPLIT: usize = 5;
const MISSION_REWARD: f64 = 1.0;
const GAME_BONUS: f64 = 10.0;
const MAX_REJECTIONS: usize = 5;

const OFF_TEAMS: usize = 0;
const OFF_OUTCOME: usize = 25;
const OFF_FAILS: usize = 35;
const OFF_PROPOSED: usize = 40;
const OFF_VOTES: usize = 45;
const OFF_ATTEMPTS: usize = 70;
const OFF_ROUND: usize = 75;
const OFF_PHASE: usize = 80;
const OFF_LEADER: usize = 83;
const OFF_SELF_LEADER: usize = 88;
const OFF_SELF_PROPOSED: usize = 89;
const OFF_REJ: usize = 90;
const OFF_REJ_FRAC: usize = 95;
const OFF_SPY_SCORE: usize = 96;
const OFF_RES_SCORE: usize = 100;
const OFF_SIZE: usize = 104;
const OFF_SEAT: usize = 105;
const OFF_SELF_SPY: usize = 110;
const OFF_SELF_MISSION: usize = 111;
const OFF_PARTNER: usize = 112;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AvalonPhase {
    Propose,
    Vote,
    Quest,
}

/// The `index`-th `size`-subset of `0..5` in lexicographic order, as a mask.
///
/// Indices wrap modulo the number of combinations.
pub fn combination(size: usize, index: usize) -> [bool; N] {
    fn rec(start: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<[bool; N]>) {
        if left == 0 {
            let mut m = [false; N];
            cur.iter().for_each(|&i| m[i] = true);
            out.push(m);
            return;
        }
        for i in start..N {
            cur.push(i);
            rec(i + 1, left - 1, cur, out);
            cur.pop();
        }
    }
    let mut combos = Vec::new();
    rec(0, size, &mut Vec::new(), &mut combos);
    combos[index % combos.len()]
}

#[derive(Debug, Clone)]
pub struct Avalon5 {
    blind: bool,
    roles: [usize; N],
    phase: AvalonPhase,
    round: usize,
    leader: usize,
    proposed: [bool; N],
    rejections: usize,
    votes: [[bool; N]; MAX_REJECTIONS],
    attempts_used: [bool; MAX_REJECTIONS],
    teams: [[bool; N]; 5],
    outcomes: [Option<bool>; 5],
    fails: [usize; 5],
    spy_score: usize,
    res_score: usize,
    done: bool,
    outcome: Option<String>,
}

impl Avalon5 {
    pub fn new(blind: bool) -> Self {
        let mut env = Self {
            blind,
            roles: [0, 1, 2, 3, 4],
            phase: AvalonPhase::Propose,
            round: 0,
            leader: 0,
            proposed: [false; N],
            rejections: 0,
            votes: [[false; N]; MAX_REJECTIONS],
            attempts_used: [false; MAX_REJECTIONS],
            teams: [[false; N]; 5],
            outcomes: [None; 5],
            fails: [0; 5],
            spy_score: 0,
            res_score: 0,
            done: false,
            outcome: None,
        };
        env.reset(0);
        env
    }

    /// Fresh game with a fixed role assignment, for scripted play.
    pub fn with_roles(roles: [usize; N], blind: bool) -> Result<Self> {
        let mut sorted = roles;
        sorted.sort_unstable();
        if sorted != [0, 1, 2, 3, 4] {
            return Err(DbosError::Config(format!("roles must be a permutation of 0..5, got {roles:?}")));
        }
        let mut env = Self::new(blind);
        env.clear_game();
        env.roles = roles;
        Ok(env)
    }

    fn clear_game(&mut self) {
        self.phase = AvalonPhase::Propose;
        self.round = 0;
        self.leader = 0;
        self.proposed = [false; N];
        self.rejections = 0;
        self.votes = [[false; N]; MAX_REJECTIONS];
        self.attempts_used = [false; MAX_REJECTIONS];
        self.teams = [[false; N]; 5];
        self.outcomes = [None; 5];
        self.fails = [0; 5];
        self.spy_score = 0;
        self.res_score = 0;
        self.done = false;
        self.outcome = None;
    }

    pub fn roles(&self) -> [usize; N] {
        self.roles
    }

    pub fn is_spy(&self, player: usize) -> bool {
        self.roles[player] < 2
    }

    pub fn phase(&self) -> AvalonPhase {
        self.phase
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn leader(&self) -> usize {
        self.leader
    }

    pub fn proposed(&self) -> [bool; N] {
        self.proposed
    }

    pub fn scores(&self) -> (usize, usize) {
        (self.spy_score, self.res_score)
    }

    pub fn rejections(&self) -> usize {
        self.rejections
    }

    pub fn outcome(&self) -> Option<&str> {
        self.outcome.as_deref()
    }

    fn team_reward(&self, spies_win: bool, amount: f64, rewards: &mut [f64]) {
        for (p, r) in rewards.iter_mut().enumerate() {
            *r += if self.is_spy(p) == spies_win { amount } else { -amount };
        }
    }

    fn finish(&mut self, spies_win: bool, outcome: &str, rewards: &mut [f64]) {
        self.team_reward(spies_win, GAME_BONUS, rewards);
        self.done = true;
        self.outcome = Some(outcome.to_string());
    }

    fn observe(&self, me: usize) -> Vec<f64> {
        let mut o = vec![0.0; AVALON_OBS_DIM];
        for m in 0..5 {
            if let Some(success) = self.outcomes[m] {
                for p in 0..N {
                    if self.teams[m][p] {
                        o[OFF_TEAMS + m * N + p] = 1.0;
                    }
                }
                o[OFF_OUTCOME + 2 * m + usize::from(!success)] = 1.0;
                o[OFF_FAILS + m] = self.fails[m] as f64 / 3.0;
            }
        }
        if self.phase != AvalonPhase::Propose {
            for p in 0..N {
                if self.proposed[p] {
                    o[OFF_PROPOSED + p] = 1.0;
                }
            }
        }
        for a in 0..MAX_REJECTIONS {
            if self.attempts_used[a] {
                o[OFF_ATTEMPTS + a] = 1.0;
                for p in 0..N {
                    if self.votes[a][p] {
                        o[OFF_VOTES + a * N + p] = 1.0;
                    }
                }
            }
        }
        o[OFF_ROUND + self.round.min(4)] = 1.0;
        let phase_idx = match self.phase {
            AvalonPhase::Propose => 0,
            AvalonPhase::Vote => 1,
            AvalonPhase::Quest => 2,
        };
        o[OFF_PHASE + phase_idx] = 1.0;
        o[OFF_LEADER + self.leader] = 1.0;
        o[OFF_SELF_LEADER] = f64::from(u8::from(self.leader == me));
        let on_proposed = self.phase != AvalonPhase::Propose && self.proposed[me];
        o[OFF_SELF_PROPOSED] = f64::from(u8::from(on_proposed));
        o[OFF_REJ + self.rejections.min(4)] = 1.0;
        o[OFF_REJ_FRAC] = self.rejections as f64 / MAX_REJECTIONS as f64;
        o[OFF_SPY_SCORE + self.spy_score.min(3)] = 1.0;
        o[OFF_RES_SCORE + self.res_score.min(3)] = 1.0;
        o[OFF_SIZE] = MISSION_SIZES[self.round.min(4)] as f64 / 3.0;
        o[OFF_SEAT + me] = 1.0;
        o[OFF_SELF_SPY] = f64::from(u8::from(self.is_spy(me)));
        o[OFF_SELF_MISSION] = f64::from(u8::from(self.phase == AvalonPhase::Quest && self.proposed[me]));
        if self.is_spy(me) && !self.blind {
            for p in (0..N).filter(|p| *p != me && self.is_spy(*p)) {
                o[OFF_PARTNER + p] = 1.0;
            }
        }
        o
    }
}

impl HiddenRoleEnv for Avalon5 {
    fn descriptor(&self) -> EnvDescriptor {
        EnvDescriptor {
            n_agents: N,
            n_actions: N_ACTIONS,
            obs_dim: AVALON_OBS_DIM,
            n_belief_roles: N,
            n_policy_roles: N,
            n_observers: N - 1,
            n_role_labels: 2,
        }
    }

    fn reset(&mut self, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut roles = [0, 1, 2, 3, 4];
        roles.shuffle(&mut rng);
        self.clear_game();
        self.roles = roles;
        self.observations()
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult> {
        if self.done {
            return Err(DbosError::StepAfterTerminal);
        }
        if actions.len() != N {
            return Err(DbosError::Dimension {
                context: "avalon actions",
                expected: N,
                got: actions.len(),
            });
        }
        if let Some(&a) = actions.iter().find(|a| **a >= N_ACTIONS) {
            return Err(DbosError::ActionOutOfRange {
                action: a,
                n_actions: N_ACTIONS,
            });
        }
        let mut rewards = vec![0.0; N];
        match self.phase {
            AvalonPhase::Propose => {
                self.proposed = combination(MISSION_SIZES[self.round], actions[self.leader]);
                self.phase = AvalonPhase::Vote;
            }
            AvalonPhase::Vote => {
                let attempt = self.rejections;
                self.attempts_used[attempt] = true;
                for p in 0..N {
                    self.votes[attempt][p] = actions[p] < ACTION_SPLIT;
                }
                let approvals = self.votes[attempt].iter().filter(|v| **v).count();
                self.leader = (self.leader + 1) % N;
                if 2 * approvals > N {
                    self.rejections = 0;
                    self.phase = AvalonPhase::Quest;
                } else {
                    self.rejections += 1;
                    if self.rejections >= MAX_REJECTIONS {
                        self.finish(true, "spies_win_rejections", &mut rewards);
                    } else {
                        self.phase = AvalonPhase::Propose;
                    }
                }
            }
            AvalonPhase::Quest => {
                let fails = (0..N)
                    .filter(|&p| self.proposed[p] && self.is_spy(p) && actions[p] >= ACTION_SPLIT)
                    .count();
                let success = fails == 0;
                let m = self.round;
                self.teams[m] = self.proposed;
                self.outcomes[m] = Some(success);
                self.fails[m] = fails;
                self.team_reward(!success, MISSION_REWARD, &mut rewards);
                if success {
                    self.res_score += 1;
                } else {
                    self.spy_score += 1;
                }
                self.round += 1;
                self.rejections = 0;
                self.votes = [[false; N]; MAX_REJECTIONS];
                self.attempts_used = [false; MAX_REJECTIONS];
                self.proposed = [false; N];
                self.phase = AvalonPhase::Propose;
                if self.spy_score >= 3 {
                    self.finish(true, "spies_win_missions", &mut rewards);
                } else if self.res_score >= 3 {
                    self.finish(false, "resistance_win", &mut rewards);
                }
            }
        }
        Ok(StepResult {
            obs: self.observations(),
            rewards,
            done: self.done,
            outcome: self.outcome.clone(),
        })
    }

    fn observations(&self) -> Vec<Vec<f64>> {
        (0..N).map(|p| self.observe(p)).collect()
    }

    fn is_terminal(&self) -> bool {
        self.done
    }

    fn policy_roles(&self) -> Vec<usize> {
        self.roles.to_vec()
    }

    fn shaper(&self) -> usize {
        self.roles.iter().position(|r| *r == 0).expect("role 0 assigned")
    }

    fn shaper_role(&self) -> usize {
        0
    }

    fn observers(&self) -> Vec<usize> {
        let s = self.shaper();
        (0..N).filter(|p| *p != s).collect()
    }

    fn perceived_role(&self, observer: usize) -> usize {
        // the shaper is a spy, so outside the blind variant it knows its partner
        usize::from(!self.blind && self.is_spy(observer))
    }

    fn phase_name(&self) -> &'static str {
        match self.phase {
            AvalonPhase::Propose => "propose",
            AvalonPhase::Vote => "vote",
            AvalonPhase::Quest => "quest",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combinations_are_lexicographic() {
        assert_eq!(combination(2, 0), [true, true, false, false, false]);
        assert_eq!(combination(2, 1), [true, false, true, false, false]);
        assert_eq!(combination(2, 9), [false, false, false, true, true]);
        assert_eq!(combination(3, 0), [true, true, true, false, false]);
        assert_eq!(combination(3, 9), [false, false, true, true, true]);
        for size in [2, 3] {
            let all: Vec<_> = (0..10).map(|i| combination(size, i)).collect();
            for (i, c) in all.iter().enumerate() {
                assert_eq!(c.iter().filter(|b| **b).count(), size);
                assert!(!all[..i].contains(c));
            }
        }
    }

    #[test]
    fn equal_seeds_equal_states() {
        let mut a = Avalon5::new(false);
        let mut b = Avalon5::new(false);
        assert_eq!(a.reset(17), b.reset(17));
        assert_eq!(a.roles(), b.roles());
        assert_eq!(a.roles().iter().filter(|r| **r < 2).count(), 2);
        assert_eq!(a.leader(), 0);
    }
}
