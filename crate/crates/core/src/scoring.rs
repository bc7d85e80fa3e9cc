//! Six-region severity scores, derived scores, consensus and agreement.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};

pub const REGIONS: usize = 6;
pub const CLASSES: usize = 4;
pub const MAX_GLOBAL: u32 = 18;

/// Region letters in storage order (row-major over the 3×2 grid).
pub const REGION_NAMES: [char; REGIONS] = ['A', 'D', 'B', 'E', 'C', 'F'];

/// Region letters in the conventional reporting order.
pub const CSV_ORDER: [char; REGIONS] = ['A', 'B', 'C', 'D', 'E', 'F'];

/// Storage index of a region letter.
pub fn region_index(letter: char) -> Option<usize> {
    REGION_NAMES.iter().position(|&c| c == letter)
}

/// 3×2 grid of per-region severities in `0..=3`.
///
/// Rows run top to bottom; column 0 holds regions A, B, C and column 1 holds
/// D, E, F. Cells are stored row-major, so storage index `row * 2 + col`
/// enumerates A, D, B, E, C, F.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BrixiaScore([u8; REGIONS]);

impl BrixiaScore {
    pub fn new(cells: [u8; REGIONS]) -> Result<Self> {
        if let Some(bad) = cells.iter().find(|&&v| v as usize >= CLASSES) {
            return Err(contract_err!("region score {bad} outside 0..=3"));
        }
        Ok(Self(cells))
    }

    /// From rows `[[A, D], [B, E], [C, F]]`.
    pub fn from_rows(rows: [[u8; 2]; 3]) -> Result<Self> {
        Self::new([
            rows[0][0], rows[0][1], rows[1][0], rows[1][1], rows[2][0], rows[2][1],
        ])
    }

    /// From values listed in A, B, C, D, E, F order.
    pub fn from_abcdef(v: [u8; REGIONS]) -> Result<Self> {
        Self::new([v[0], v[3], v[1], v[4], v[2], v[5]])
    }

    pub fn abcdef(&self) -> [u8; REGIONS] {
        let c = self.0;
        [c[0], c[2], c[4], c[1], c[3], c[5]]
    }

    pub fn rows(&self) -> [[u8; 2]; 3] {
        let c = self.0;
        [[c[0], c[1]], [c[2], c[3]], [c[4], c[5]]]
    }

    /// Cells in storage order.
    pub fn cells(&self) -> [u8; REGIONS] {
        self.0
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.0[row * 2 + col]
    }
}

impl fmt::Display for BrixiaScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = self.rows();
        write!(
            f,
            "[[{},{}],[{},{}],[{},{}]]",
            r[0][0], r[0][1], r[1][0], r[1][1], r[2][0], r[2][1]
        )
    }
}

pub fn global_score(s: &BrixiaScore) -> u32 {
    s.0.iter().map(|&v| v as u32).sum()
}

/// Swaps the two columns (A↔D, B↔E, C↔F), as a horizontal image flip does.
pub fn flip_score(s: &BrixiaScore) -> BrixiaScore {
    let c = s.0;
    BrixiaScore([c[1], c[0], c[3], c[2], c[5], c[4]])
}

/// Binary any-abnormality indicator per region.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TScore {
    pub cells: [bool; REGIONS],
    pub global: u32,
}

pub fn to_t_score(s: &BrixiaScore) -> TScore {
    let cells = s.0.map(|v| v > 0);
    TScore {
        cells,
        global: cells.iter().filter(|&&b| b).count() as u32,
    }
}

/// Linear map from Global Score to lung-opacity score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoRegression {
    pub coef: f64,
    pub intercept: f64,
}

impl LoRegression {
    /// Published fit of the LO score against predicted Global Scores.
    pub const REFERENCE: LoRegression = LoRegression {
        coef: 0.31,
        intercept: 0.15,
    };
}

/// Ordinary least squares on `(global, lo)` pairs.
pub fn fit_lo(pairs: &[(f64, f64)]) -> Result<LoRegression> {
    if pairs.len() < 2 {
        return Err(contract_err!(
            "LO fit needs at least 2 pairs, got {}",
            pairs.len()
        ));
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pairs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx <= f64::EPSILON * n {
        return Err(contract_err!("LO fit: global scores have zero variance"));
    }
    let coef = sxy / sxx;
    Ok(LoRegression {
        coef,
        intercept: my - coef * mx,
    })
}

pub fn apply_lo(global: u32, r: &LoRegression) -> f64 {
    r.coef * global as f64 + r.intercept
}

#[derive(Clone, Debug, PartialEq)]
pub struct RaterVote {
    pub rater: String,
    /// 1 is the most senior.
    pub seniority: u32,
    pub score: BrixiaScore,
}

/// All ratings of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct RaterPanel {
    votes: Vec<RaterVote>,
}

impl RaterPanel {
    pub fn new(votes: Vec<RaterVote>) -> Result<Self> {
        if votes.is_empty() {
            return Err(contract_err!("rater panel is empty"));
        }
        let ids: HashSet<&str> = votes.iter().map(|v| v.rater.as_str()).collect();
        if ids.len() != votes.len() {
            return Err(contract_err!("rater panel has duplicate rater ids"));
        }
        let ranks: HashSet<u32> = votes.iter().map(|v| v.seniority).collect();
        if ranks.len() != votes.len() {
            return Err(contract_err!("rater panel has duplicate seniority ranks"));
        }
        Ok(Self { votes })
    }

    pub fn votes(&self) -> &[RaterVote] {
        &self.votes
    }
}

/// Per-region majority vote. Among equally voted values, the value chosen
/// by the most senior rater who voted for one of them wins.
pub fn consensus(panel: &RaterPanel) -> BrixiaScore {
    let mut by_rank: Vec<&RaterVote> = panel.votes.iter().collect();
    by_rank.sort_by_key(|v| v.seniority);
    let mut out = [0u8; REGIONS];
    for (r, cell) in out.iter_mut().enumerate() {
        let mut counts = [0usize; CLASSES];
        for v in &by_rank {
            counts[v.score.0[r] as usize] += 1;
        }
        let top = *counts.iter().max().expect("four classes");
        *cell = by_rank
            .iter()
            .map(|v| v.score.0[r])
            .find(|&s| counts[s as usize] == top)
            .expect("non-empty panel");
    }
    BrixiaScore(out)
}

/// Two-rater agreement over categorical labels `0..=3`. `None` when the
/// expected agreement is 1 (a single category in use).
pub fn cohen_kappa(r1: &[u8], r2: &[u8]) -> Result<Option<f64>> {
    if r1.len() != r2.len() {
        return Err(contract_err!(
            "kappa inputs differ in length: {} vs {}",
            r1.len(),
            r2.len()
        ));
    }
    if r1.is_empty() {
        return Err(contract_err!("kappa of empty ratings"));
    }
    check_labels(r1.iter().chain(r2))?;
    let n = r1.len() as f64;
    let po = r1.iter().zip(r2).filter(|(a, b)| a == b).count() as f64 / n;
    let (mut m1, mut m2) = ([0.0f64; CLASSES], [0.0f64; CLASSES]);
    for (&a, &b) in r1.iter().zip(r2) {
        m1[a as usize] += 1.0 / n;
        m2[b as usize] += 1.0 / n;
    }
    let pe: f64 = m1.iter().zip(&m2).map(|(a, b)| a * b).sum();
    if (1.0 - pe).abs() < 1e-12 {
        return Ok(None);
    }
    Ok(Some((po - pe) / (1.0 - pe)))
}

/// Multi-rater agreement; `ratings[item][rater]` with labels `0..=3`.
/// `None` when chance agreement is 1.
pub fn fleiss_kappa(ratings: &[Vec<u8>]) -> Result<Option<f64>> {
    let Some(first) = ratings.first() else {
        return Err(contract_err!("Fleiss kappa of zero items"));
    };
    let m = first.len();
    if m < 2 {
        return Err(contract_err!(
            "Fleiss kappa needs at least 2 raters per item"
        ));
    }
    if ratings.iter().any(|row| row.len() != m) {
        return Err(contract_err!("every item needs the same number of raters"));
    }
    check_labels(ratings.iter().flatten())?;
    let (nf, mf) = (ratings.len() as f64, m as f64);
    let mut totals = [0.0f64; CLASSES];
    let mut p_bar = 0.0;
    for row in ratings {
        let mut c = [0.0f64; CLASSES];
        for &v in row {
            c[v as usize] += 1.0;
        }
        let sq: f64 = c.iter().map(|x| x * x).sum();
        p_bar += (sq - mf) / (mf * (mf - 1.0));
        totals.iter_mut().zip(&c).for_each(|(t, x)| *t += x);
    }
    p_bar /= nf;
    let pe: f64 = totals.iter().map(|t| (t / (nf * mf)).powi(2)).sum();
    if (1.0 - pe).abs() < 1e-12 {
        return Ok(None);
    }
    Ok(Some((p_bar - pe) / (1.0 - pe)))
}

fn check_labels<'a>(mut it: impl Iterator<Item = &'a u8>) -> Result<()> {
    match it.find(|&&v| v as usize >= CLASSES) {
        Some(v) => Err(contract_err!("rating {v} outside 0..=3")),
        None => Ok(()),
    }
}

/// One row of a rater file: `id,rater,seniority,A,B,C,D,E,F`.
#[derive(Clone, Debug, PartialEq)]
pub struct RaterRecord {
    pub id: String,
    pub vote: RaterVote,
}

pub fn parse_rater_csv(text: &str, context: &str) -> Result<Vec<RaterRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "id,rater,seniority,A,B,C,D,E,F" => {}
        _ => {
            return Err(Error::parse(
                context,
                "expected header id,rater,seniority,A,B,C,D,E,F",
            ))
        }
    }
    let mut out = Vec::new();
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = |why: &str| Error::parse(format!("{context}:{}", ln + 1), why.to_string());
        if f.len() != 9 {
            return Err(bad("expected 9 fields"));
        }
        let seniority = f[2]
            .parse()
            .map_err(|_| bad("seniority is not an integer"))?;
        let mut v = [0u8; REGIONS];
        for (k, cell) in v.iter_mut().enumerate() {
            *cell = f[3 + k]
                .parse()
                .map_err(|_| bad("score is not an integer"))?;
        }
        let score = BrixiaScore::from_abcdef(v).map_err(|e| bad(&e.to_string()))?;
        out.push(RaterRecord {
            id: f[0].to_string(),
            vote: RaterVote {
                rater: f[1].to_string(),
                seniority,
                score,
            },
        });
    }
    Ok(out)
}
