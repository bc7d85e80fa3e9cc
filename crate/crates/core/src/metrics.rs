//! Error statistics and confusion matrices for score predictions.

use std::fmt::Write as _;

use crate::error::{contract_err, Result};
use crate::scoring::{global_score, BrixiaScore, CSV_ORDER, MAX_GLOBAL, REGIONS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    /// One region, storage index.
    Region(usize),
    /// Per-region statistics averaged over the six regions.
    RegionAverage,
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorStats {
    /// Mean signed error `pred - ref`.
    pub mer: f64,
    pub mae: f64,
    /// Population standard deviation of the absolute errors.
    pub sd: f64,
    /// Pearson correlation; `None` when either side has zero variance.
    pub cc: Option<f64>,
}

fn stats_of(pred: &[f64], refs: &[f64]) -> ErrorStats {
    let n = pred.len() as f64;
    let mer = pred.iter().zip(refs).map(|(p, r)| p - r).sum::<f64>() / n;
    let abs: Vec<f64> = pred.iter().zip(refs).map(|(p, r)| (p - r).abs()).collect();
    let mae = abs.iter().sum::<f64>() / n;
    let sd = (abs.iter().map(|a| (a - mae).powi(2)).sum::<f64>() / n).sqrt();
    ErrorStats {
        mer,
        mae,
        sd,
        cc: pearson(pred, refs),
    }
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() < 2 || a.len() != b.len() {
        return None;
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

pub fn error_stats(
    preds: &[BrixiaScore],
    refs: &[BrixiaScore],
    scope: Scope,
) -> Result<ErrorStats> {
    if preds.len() != refs.len() {
        return Err(contract_err!(
            "{} predictions for {} references",
            preds.len(),
            refs.len()
        ));
    }
    if preds.is_empty() {
        return Err(contract_err!("error statistics of an empty set"));
    }
    let column = |s: &[BrixiaScore], r: usize| -> Vec<f64> {
        s.iter().map(|x| x.cells()[r] as f64).collect()
    };
    match scope {
        Scope::Region(r) if r < REGIONS => Ok(stats_of(&column(preds, r), &column(refs, r))),
        Scope::Region(r) => Err(contract_err!("region index {r} out of range")),
        Scope::Global => {
            let g = |s: &[BrixiaScore]| -> Vec<f64> {
                s.iter().map(|x| global_score(x) as f64).collect()
            };
            Ok(stats_of(&g(preds), &g(refs)))
        }
        Scope::RegionAverage => {
            let per: Vec<ErrorStats> = (0..REGIONS)
                .map(|r| stats_of(&column(preds, r), &column(refs, r)))
                .collect();
            let avg = |f: fn(&ErrorStats) -> f64| per.iter().map(f).sum::<f64>() / REGIONS as f64;
            let ccs: Vec<f64> = per.iter().filter_map(|s| s.cc).collect();
            Ok(ErrorStats {
                mer: avg(|s| s.mer),
                mae: avg(|s| s.mae),
                sd: avg(|s| s.sd),
                cc: (!ccs.is_empty()).then(|| ccs.iter().sum::<f64>() / ccs.len() as f64),
            })
        }
    }
}

/// Mean absolute error over all regions and items.
pub fn region_mae(preds: &[BrixiaScore], refs: &[BrixiaScore]) -> Result<f64> {
    Ok(error_stats(preds, refs, Scope::RegionAverage)?.mae)
}

pub const STATS_HEADER: &str = "scope,region,MEr,MAE,SD,CC";

fn fmt_row(out: &mut String, scope: &str, region: &str, s: &ErrorStats) {
    let cc = s.cc.map_or_else(|| "NA".to_string(), |c| format!("{c:.6}"));
    let _ = writeln!(
        out,
        "{scope},{region},{:.6},{:.6},{:.6},{cc}",
        s.mer, s.mae, s.sd
    );
}

/// Per-region rows in A-F order, then the region average and the Global
/// Score rows, as CSV with header.
pub fn stats_csv(preds: &[BrixiaScore], refs: &[BrixiaScore]) -> Result<String> {
    let mut out = String::from(STATS_HEADER);
    out.push('\n');
    for letter in CSV_ORDER {
        let r = crate::scoring::region_index(letter).expect("known letter");
        fmt_row(
            &mut out,
            "region",
            &letter.to_string(),
            &error_stats(preds, refs, Scope::Region(r))?,
        );
    }
    fmt_row(
        &mut out,
        "average",
        "all",
        &error_stats(preds, refs, Scope::RegionAverage)?,
    );
    fmt_row(
        &mut out,
        "global",
        "sum",
        &error_stats(preds, refs, Scope::Global)?,
    );
    Ok(out)
}

/// `m[r][p]` counts reference value `r` predicted as `p`.
pub fn confusion_matrix(preds: &[u32], refs: &[u32], domain: usize) -> Result<Vec<Vec<u64>>> {
    if preds.len() != refs.len() {
        return Err(contract_err!(
            "{} predictions for {} references",
            preds.len(),
            refs.len()
        ));
    }
    let mut m = vec![vec![0u64; domain]; domain];
    for (&p, &r) in preds.iter().zip(refs) {
        if p as usize >= domain || r as usize >= domain {
            return Err(contract_err!(
                "value pair ({r}, {p}) outside domain 0..{domain}"
            ));
        }
        m[r as usize][p as usize] += 1;
    }
    Ok(m)
}

/// Pooled 4×4 matrix over all regions.
pub fn region_confusion(preds: &[BrixiaScore], refs: &[BrixiaScore]) -> Result<Vec<Vec<u64>>> {
    let flat = |s: &[BrixiaScore]| -> Vec<u32> {
        s.iter().flat_map(|x| x.cells().map(u32::from)).collect()
    };
    confusion_matrix(&flat(preds), &flat(refs), 4)
}

pub fn global_confusion(preds: &[BrixiaScore], refs: &[BrixiaScore]) -> Result<Vec<Vec<u64>>> {
    let g = |s: &[BrixiaScore]| -> Vec<u32> { s.iter().map(global_score).collect() };
    confusion_matrix(&g(preds), &g(refs), MAX_GLOBAL as usize + 1)
}

/// Rows are reference values, columns predicted values.
pub fn confusion_csv(m: &[Vec<u64>]) -> String {
    let mut out = String::from("ref");
    for p in 0..m.len() {
        let _ = write!(out, ",pred{p}");
    }
    out.push('\n');
    for (r, row) in m.iter().enumerate() {
        let _ = write!(out, "{r}");
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: [u8; 6]) -> BrixiaScore {
        BrixiaScore::new(v).unwrap()
    }

    #[test]
    fn shifted_predictions() {
        let refs = vec![s([0, 1, 2, 0, 1, 2]), s([1, 2, 0, 1, 2, 0])];
        let preds: Vec<_> = refs.iter().map(|r| s(r.cells().map(|v| v + 1))).collect();
        let st = error_stats(&preds, &refs, Scope::RegionAverage).unwrap();
        assert_eq!((st.mer, st.mae, st.sd), (1.0, 1.0, 0.0));
        assert!((st.cc.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn confusion_counts() {
        let m = confusion_matrix(&[3, 1], &[2, 1], 4).unwrap();
        assert_eq!(m[2][3], 1);
        assert_eq!(m[1][1], 1);
        assert!(confusion_matrix(&[4], &[0], 4).is_err());
        assert!(confusion_csv(&m).starts_with("ref,pred0,pred1,pred2,pred3\n"));
    }
}
