//! Hand-computed fixtures and brute-force oracles for the scoring toolbox.

use lungscore::scoring::{
    apply_lo, cohen_kappa, consensus, fleiss_kappa, to_t_score, BrixiaScore, LoRegression,
    RaterPanel, RaterVote,
};

fn ensure(ok: bool, what: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(what())
    }
}

/// Majority value; among tied values the one whose most senior voter has
/// the best (lowest) rank.
fn oracle_vote(votes: &[(u32, u8)]) -> u8 {
    (0u8..4)
        .filter(|v| votes.iter().any(|x| x.1 == *v))
        .max_by_key(|&v| {
            let count = votes.iter().filter(|x| x.1 == v).count();
            let best_rank = votes
                .iter()
                .filter(|x| x.1 == v)
                .map(|x| x.0)
                .min()
                .unwrap();
            (count, std::cmp::Reverse(best_rank))
        })
        .unwrap()
}

fn panel(votes: &[(u32, [u8; 6])]) -> RaterPanel {
    RaterPanel::new(
        votes
            .iter()
            .map(|&(rank, cells)| RaterVote {
                rater: format!("R{rank}"),
                seniority: rank,
                score: BrixiaScore::new(cells).unwrap(),
            })
            .collect(),
    )
    .unwrap()
}

/// Every three-rater panel over `{0..3}`, each region fed a different
/// panel and the votes listed in a scrambled order.
pub fn consensus_matches_oracle() -> Result<(), String> {
    let triples: Vec<[u8; 3]> = (0..64u8).map(|i| [i / 16, i / 4 % 4, i % 4]).collect();
    let ranks = [1u32, 2, 3];
    for start in 0..64 {
        let regions: [[u8; 3]; 6] = std::array::from_fn(|r| triples[(start + r * 11) % 64]);
        for order in [[0usize, 1, 2], [2, 0, 1], [1, 2, 0]] {
            let votes: Vec<(u32, [u8; 6])> = order
                .iter()
                .map(|&k| (ranks[k], std::array::from_fn(|r| regions[r][k])))
                .collect();
            let got = consensus(&panel(&votes));
            for (r, reg) in regions.iter().enumerate() {
                let want = oracle_vote(&[(1, reg[0]), (2, reg[1]), (3, reg[2])]);
                ensure(got.cells()[r] == want, || {
                    format!(
                        "panel {reg:?}: consensus {} vs oracle {want}",
                        got.cells()[r]
                    )
                })?;
            }
        }
    }
    // five raters, region votes by rank [2,1,1,2,3]: tie {1,2}, rank 1 voted 2
    let votes: Vec<(u32, [u8; 6])> = [2u8, 1, 1, 2, 3]
        .iter()
        .enumerate()
        .map(|(k, &v)| (k as u32 + 1, [v, 0, 0, 0, 0, 0]))
        .collect();
    ensure(consensus(&panel(&votes)).cells()[0] == 2, || {
        "five-rater tie".into()
    })?;
    let same = [3u8, 1, 0, 2, 2, 1];
    let unanimous = consensus(&panel(&[(1, same), (2, same), (3, same)]));
    ensure(unanimous.cells() == same, || {
        "unanimous panel changed".into()
    })
}

pub fn kappa_fixtures() -> Result<(), String> {
    let close = |a: Option<f64>, b: f64| a.is_some_and(|a| (a - b).abs() <= 1e-9);
    // p_o = 3/4, p_e = 1/2
    let k = cohen_kappa(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
    ensure(close(k, 0.5), || format!("cohen 0.5 fixture: {k:?}"))?;
    // p_o = 4/5, p_e = 0.24
    let k = cohen_kappa(&[0, 1, 2, 3, 3], &[0, 1, 2, 3, 2]).unwrap();
    ensure(close(k, 14.0 / 19.0), || {
        format!("cohen 14/19 fixture: {k:?}")
    })?;
    let k = cohen_kappa(&[0, 3, 2, 1], &[0, 3, 2, 1]).unwrap();
    ensure(close(k, 1.0), || format!("identical ratings: {k:?}"))?;
    // both raters use one category: expected agreement 1, undefined
    ensure(cohen_kappa(&[2, 2], &[2, 2]).unwrap().is_none(), || {
        "degenerate cohen".into()
    })?;
    ensure(cohen_kappa(&[0, 1], &[0]).is_err(), || {
        "length mismatch accepted".into()
    })?;

    // P-bar = 5/9, p_e = 29/81
    let k = fleiss_kappa(&[vec![0, 0, 0], vec![0, 1, 1], vec![1, 2, 2]]).unwrap();
    ensure(close(k, 4.0 / 13.0), || {
        format!("fleiss 4/13 fixture: {k:?}")
    })?;
    let k = fleiss_kappa(&[vec![0, 0], vec![3, 3], vec![1, 1]]).unwrap();
    ensure(close(k, 1.0), || format!("unanimous fleiss: {k:?}"))?;
    ensure(
        fleiss_kappa(&[vec![1, 1], vec![1, 1]]).unwrap().is_none(),
        || "degenerate fleiss".into(),
    )?;
    ensure(fleiss_kappa(&[vec![1, 1], vec![1]]).is_err(), || {
        "ragged fleiss accepted".into()
    })
}

pub fn t_and_lo_fixtures() -> Result<(), String> {
    let s = BrixiaScore::from_abcdef([0, 1, 2, 3, 0, 2]).unwrap();
    let t = to_t_score(&s);
    let cells: Vec<bool> = s.cells().iter().map(|&v| v > 0).collect();
    ensure(t.cells.to_vec() == cells && t.global == 4, || {
        format!("t score {t:?}")
    })?;
    let abcdef_flags: Vec<u8> = {
        let a = BrixiaScore::new(t.cells.map(|b| b as u8)).unwrap().abcdef();
        a.to_vec()
    };
    ensure(abcdef_flags == [0, 1, 1, 1, 0, 1], || {
        format!("t score regions {abcdef_flags:?}")
    })?;
    ensure(
        to_t_score(&BrixiaScore::new([3; 6]).unwrap()).global == 6,
        || "all threes".into(),
    )?;
    ensure(to_t_score(&BrixiaScore::default()).global == 0, || {
        "all zeros".into()
    })?;

    let r = LoRegression::REFERENCE;
    ensure((apply_lo(9, &r) - 2.94).abs() < 1e-9, || {
        format!("apply_lo(9) = {}", apply_lo(9, &r))
    })?;
    ensure((apply_lo(18, &r) - 5.73).abs() < 1e-9, || {
        format!("apply_lo(18) = {}", apply_lo(18, &r))
    })?;
    let pairs: Vec<(f64, f64)> = (0..19).map(|g| (g as f64, 0.3 * g as f64 + 0.1)).collect();
    let fit = lungscore::scoring::fit_lo(&pairs).map_err(|e| e.to_string())?;
    ensure(
        (fit.coef - 0.3).abs() < 1e-9 && (fit.intercept - 0.1).abs() < 1e-9,
        || format!("fit {fit:?}"),
    )?;
    ensure(
        lungscore::scoring::fit_lo(&[(3.0, 1.0), (3.0, 2.0)]).is_err(),
        || "flat fit accepted".into(),
    )
}
