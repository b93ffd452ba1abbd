use dbos_core::env::{combination, Avalon5, AvalonPhase, CoinGame, EnvKind, HiddenRoleEnv, COIN_HORIZON};
use dbos_core::error::DbosError;
use proptest::prelude::*;

const APPROVE: usize = 0;
const REJECT: usize = 9;
const FAIL: usize = 9;
const PASS: usize = 0;

/// Index of `team` among the lexicographic subsets of its size.
fn team_index(team: &[usize]) -> usize {
    (0..10)
        .find(|&i| {
            let m = combination(team.len(), i);
            (0..5).all(|p| m[p] == team.contains(&p))
        })
        .expect("team is a subset of 0..5")
}

fn all(a: usize) -> [usize; 5] {
    [a; 5]
}

#[test]
fn spies_win_three_failed_missions() {
    // players 0 and 1 are the spies
    let mut g = Avalon5::with_roles([0, 1, 2, 3, 4], false).unwrap();
    let teams: [&[usize]; 3] = [&[0, 1], &[0, 2, 3], &[1, 4]];
    let mut totals = [0.0; 5];
    for (m, team) in teams.iter().enumerate() {
        let r = g.step(&all(team_index(team))).unwrap();
        assert_eq!(r.rewards, vec![0.0; 5]);
        assert_eq!(g.phase(), AvalonPhase::Vote);
        let r = g.step(&all(APPROVE)).unwrap();
        assert_eq!(r.rewards, vec![0.0; 5]);
        assert_eq!(g.phase(), AvalonPhase::Quest);
        let r = g.step(&all(FAIL)).unwrap();
        let last = m == 2;
        let spy = if last { 11.0 } else { 1.0 };
        assert_eq!(r.rewards, vec![spy, spy, -spy, -spy, -spy]);
        assert_eq!(r.done, last);
        totals.iter_mut().zip(&r.rewards).for_each(|(t, x)| *t += x);
    }
    assert_eq!(totals, [13.0, 13.0, -13.0, -13.0, -13.0]);
    assert_eq!(g.outcome(), Some("spies_win_missions"));
    assert_eq!(EnvKind::Avalon5.shaper_won("spies_win_missions"), Some(true));
    assert!(matches!(g.step(&all(0)), Err(DbosError::StepAfterTerminal)));
}

#[test]
fn resistance_wins_clean_missions() {
    // spies sit in seats 3 and 4
    let mut g = Avalon5::with_roles([2, 3, 4, 0, 1], false).unwrap();
    assert_eq!(g.shaper(), 3);
    let teams: [&[usize]; 3] = [&[0, 1], &[0, 1, 2], &[1, 2]];
    let mut totals = [0.0; 5];
    for (m, team) in teams.iter().enumerate() {
        g.step(&all(team_index(team))).unwrap();
        g.step(&all(APPROVE)).unwrap();
        // spies' fail actions are ignored off the team
        let r = g.step(&all(FAIL)).unwrap();
        let res = if m == 2 { 11.0 } else { 1.0 };
        assert_eq!(r.rewards, vec![res, res, res, -res, -res]);
        totals.iter_mut().zip(&r.rewards).for_each(|(t, x)| *t += x);
    }
    assert_eq!(totals, [13.0, 13.0, 13.0, -13.0, -13.0]);
    assert_eq!(g.outcome(), Some("resistance_win"));
    assert_eq!(g.scores(), (0, 3));
}

#[test]
fn five_rejections_hand_spies_the_game() {
    let mut g = Avalon5::with_roles([0, 1, 2, 3, 4], false).unwrap();
    for attempt in 0..5 {
        assert_eq!(g.leader(), attempt);
        g.step(&all(0)).unwrap();
        let r = g.step(&all(REJECT)).unwrap();
        if attempt < 4 {
            assert_eq!(r.rewards, vec![0.0; 5]);
            assert!(!r.done);
            assert_eq!(g.rejections(), attempt + 1);
        } else {
            assert_eq!(r.rewards, vec![10.0, 10.0, -10.0, -10.0, -10.0]);
            assert!(r.done);
            assert_eq!(r.outcome.as_deref(), Some("spies_win_rejections"));
        }
    }
}

#[test]
fn spy_may_pass_a_mission() {
    let mut g = Avalon5::with_roles([0, 1, 2, 3, 4], false).unwrap();
    g.step(&all(team_index(&[0, 2]))).unwrap();
    g.step(&all(APPROVE)).unwrap();
    let r = g.step(&[PASS, FAIL, FAIL, FAIL, FAIL]).unwrap();
    assert_eq!(r.rewards, vec![-1.0, -1.0, 1.0, 1.0, 1.0]);
    assert_eq!(g.scores(), (0, 1));
}

#[test]
fn tied_vote_rejects() {
    let mut g = Avalon5::with_roles([0, 1, 2, 3, 4], false).unwrap();
    g.step(&all(0)).unwrap();
    g.step(&[APPROVE, APPROVE, REJECT, REJECT, REJECT]).unwrap();
    assert_eq!(g.phase(), AvalonPhase::Propose);
    assert_eq!(g.rejections(), 1);
    g.step(&all(0)).unwrap();
    g.step(&[APPROVE, APPROVE, APPROVE, REJECT, REJECT]).unwrap();
    assert_eq!(g.phase(), AvalonPhase::Quest);
    assert_eq!(g.rejections(), 0);
}

// Red is agent 0; moves: 0 up (y-1), 1 down, 2 left (x-1), 3 right.
const STAY_AWAY: [(usize, usize); 3] = [(3, 3), (3, 4), (4, 3)];

fn coin(red: (usize, usize), coin: (usize, usize), blue_coin: bool, role: usize) -> CoinGame {
    CoinGame::scripted([red, STAY_AWAY[0], STAY_AWAY[1], STAY_AWAY[2]], coin, blue_coin, role, 7).unwrap()
}

#[test]
fn red_collects_red_coin() {
    let mut g = coin((0, 0), (1, 0), false, 1);
    let r = g.step(&[3, 1, 1, 1]).unwrap();
    assert_eq!(r.rewards, vec![1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn red_takes_blue_coin() {
    let blue = -2.0 / 3.0;
    let mut selfish = coin((0, 0), (1, 0), true, 1);
    let r = selfish.step(&[3, 1, 1, 1]).unwrap();
    assert_eq!(r.rewards, vec![1.0, blue, blue, blue]);
    let mut altruist = coin((0, 0), (1, 0), true, 0);
    let r = altruist.step(&[3, 1, 1, 1]).unwrap();
    assert_eq!(r.rewards, vec![0.0, blue, blue, blue]);
    assert!((r.rewards[1..].iter().sum::<f64>() + 2.0).abs() < 1e-15);
}

#[test]
fn blue_takes_red_coin() {
    // blue agent 1 steps from (3,3) onto (3,2)
    let mut g = coin((0, 0), (3, 2), false, 0);
    let r = g.step(&[1, 0, 1, 1]).unwrap();
    assert_eq!(r.rewards, vec![-2.0, 1.0, 0.0, 0.0]);
}

#[test]
fn blue_takes_blue_coin() {
    let mut g = coin((0, 0), (3, 2), true, 0);
    let r = g.step(&[1, 0, 1, 1]).unwrap();
    assert_eq!(r.rewards, vec![0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn coin_episode_has_fixed_horizon() {
    let mut g = coin((0, 0), (2, 2), false, 0);
    for t in 0..COIN_HORIZON {
        let r = g.step(&[0, 0, 0, 0]).unwrap();
        assert_eq!(r.done, t + 1 == COIN_HORIZON);
    }
    assert!(g.step(&[0; 4]).is_err());
}

#[test]
fn bad_actions_rejected() {
    let mut g = CoinGame::new();
    assert!(matches!(g.step(&[0, 0, 0]), Err(DbosError::Dimension { .. })));
    assert!(matches!(g.step(&[4, 0, 0, 0]), Err(DbosError::ActionOutOfRange { .. })));
    let mut a = Avalon5::new(false);
    assert!(matches!(a.step(&[10, 0, 0, 0, 0]), Err(DbosError::ActionOutOfRange { .. })));
}

proptest! {
    #[test]
    fn avalon_rewards_are_zero_sum_by_team(seed in any::<u64>(), actions in prop::collection::vec(0usize..10, 5 * 60)) {
        let mut g = EnvKind::Avalon5.make();
        g.reset(seed);
        let spies: Vec<bool> = g.policy_roles().iter().map(|r| *r < 2).collect();
        for chunk in actions.chunks(5) {
            let r = g.step(chunk).unwrap();
            let spy_r: Vec<f64> = (0..5).filter(|p| spies[*p]).map(|p| r.rewards[p]).collect();
            let res_r: Vec<f64> = (0..5).filter(|p| !spies[*p]).map(|p| r.rewards[p]).collect();
            prop_assert!(spy_r.iter().all(|x| *x == spy_r[0]));
            prop_assert!(res_r.iter().all(|x| *x == -spy_r[0]));
            prop_assert!([0.0, 1.0, 10.0, 11.0].contains(&spy_r[0].abs()));
            prop_assert!(r.obs.iter().all(|o| o.len() == g.descriptor().obs_dim));
            if r.done {
                break;
            }
        }
    }

    #[test]
    fn coin_observations_stay_in_unit_range(seed in any::<u64>(), actions in prop::collection::vec(0usize..4, 4 * COIN_HORIZON)) {
        let mut g = EnvKind::CoinGame.make();
        g.reset(seed);
        for chunk in actions.chunks(4) {
            let r = g.step(chunk).unwrap();
            for o in &r.obs {
                prop_assert!(o.iter().all(|v| (0.0..=1.0).contains(v)));
            }
            // at most one coin per step, so red loses at most 2 and gains at most 1
            prop_assert!(r.rewards[0] >= -2.0 && r.rewards[0] <= 1.0);
        }
        prop_assert!(g.is_terminal());
    }

    #[test]
    fn resets_are_seed_deterministic(seed in any::<u64>()) {
        for kind in [EnvKind::Avalon5, EnvKind::CoinGame] {
            let mut a = kind.make();
            let mut b = kind.make();
            prop_assert_eq!(a.reset(seed), b.reset(seed));
            prop_assert_eq!(a.policy_roles(), b.policy_roles());
        }
    }
}
