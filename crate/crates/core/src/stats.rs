//! Rank-based comparison of models over regions: Friedman omnibus test,
//! Nemenyi post-hoc significance and t confidence intervals.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::gamma::gamma_ur;

use crate::error::{Error, Result};

/// Critical values `q_alpha(k) / sqrt(2)` of the studentized range with
/// infinite degrees of freedom, for k = 2..=10.
const NEMENYI_Q05: [f64; 9] = [1.96, 2.3437, 2.569, 2.7278, 2.8497, 2.9483, 3.0309, 3.1017, 3.1637];
const NEMENYI_Q01: [f64; 9] = [2.5758, 2.9135, 3.1133, 3.2547, 3.3637, 3.4522, 3.5265, 3.5903, 3.6463];
const NEMENYI_Q001: [f64; 9] = [3.2905, 3.5804, 3.7539, 3.8776, 3.9735, 4.0515, 4.1173, 4.174, 4.2238];

/// Two-sided 95% Student t quantiles for df = 1..=30.
const T975: [f64; 30] = [
    12.7062, 4.3027, 3.1824, 2.7764, 2.5706, 2.4469, 2.3646, 2.306, 2.2622, 2.2281, 2.201, 2.1788, 2.1604,
    2.1448, 2.1314, 2.1199, 2.1098, 2.1009, 2.093, 2.086, 2.0796, 2.0739, 2.0687, 2.0639, 2.0595, 2.0555,
    2.0518, 2.0484, 2.0452, 2.0423,
];

pub const MAX_TREATMENTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    HigherIsBetter,
    LowerIsBetter,
}

impl Orientation {
    /// Distances and errors are better when small; everything else (including
    /// generated/ground-truth ratios, where ranks only matter up to direction)
    /// defaults to higher-is-better.
    pub fn for_metric(name: &str) -> Orientation {
        const LOWER: [&str; 6] = ["mse", "wd", "wd_area", "frechet", "kid", "fid"];
        const LOWER_SUFFIX: [&str; 4] = ["_pct_missing", "_pct_merged", "_pct_split", "_false_positives"];
        if LOWER.contains(&name) || LOWER_SUFFIX.iter().any(|s| name.ends_with(s)) {
            Orientation::LowerIsBetter
        } else {
            Orientation::HigherIsBetter
        }
    }
}

/// Scores with one row per block (region) and one column per treatment
/// (model).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub rows: Vec<Vec<f64>>,
    pub orientation: Orientation,
}

impl ScoreMatrix {
    pub fn new(rows: Vec<Vec<f64>>, orientation: Orientation) -> Result<Self> {
        let n = rows.len();
        let k = rows.first().map_or(0, Vec::len);
        if n < 2 || k < 2 {
            return Err(Error::invalid(format!("need >= 2 blocks and >= 2 treatments, got {n}x{k}")));
        }
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::dims("ragged score matrix"));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("score matrix contains non-finite values"));
        }
        if n < 5 {
            log::warn!("only {n} blocks: the rank tests have very little power");
        }
        Ok(ScoreMatrix { rows, orientation })
    }

    pub fn blocks(&self) -> usize {
        self.rows.len()
    }

    pub fn treatments(&self) -> usize {
        self.rows[0].len()
    }

    /// Average rank of each treatment; rank 1 is the best score in a row and
    /// ties share the mean of their ranks.
    pub fn mean_ranks(&self) -> Vec<f64> {
        let k = self.treatments();
        let mut sums = vec![0.0; k];
        for row in &self.rows {
            for (s, r) in sums.iter_mut().zip(rank_row(row, self.orientation)) {
                *s += r;
            }
        }
        sums.iter().map(|s| s / self.blocks() as f64).collect()
    }
}

/// Ranks of one row with ties sharing their mean rank.
pub fn rank_row(row: &[f64], orientation: Orientation) -> Vec<f64> {
    let key = |v: f64| match orientation {
        Orientation::HigherIsBetter => -v,
        Orientation::LowerIsBetter => v,
    };
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| key(row[a]).total_cmp(&key(row[b])));
    let mut ranks = vec![0.0; row.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && row[order[j + 1]] == row[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Upper tail of the chi-square distribution.
pub fn chi2_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    gamma_ur(df / 2.0, x / 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Friedman {
    pub chi2: f64,
    pub p: f64,
    pub mean_ranks: Vec<f64>,
}

pub fn friedman(m: &ScoreMatrix) -> Friedman {
    let (n, k) = (m.blocks() as f64, m.treatments() as f64);
    let mean_ranks = m.mean_ranks();
    let centre = (k + 1.0) / 2.0;
    let ss: f64 = mean_ranks.iter().map(|r| (r - centre).powi(2)).sum();
    let chi2 = 12.0 * n / (k * (k + 1.0)) * ss;
    Friedman {
        chi2,
        p: chi2_sf(chi2, k - 1.0),
        mean_ranks,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Significance {
    Ns,
    P05,
    P01,
    P001,
}

impl Significance {
    pub fn stars(self) -> &'static str {
        match self {
            Significance::Ns => "ns",
            Significance::P05 => "*",
            Significance::P01 => "**",
            Significance::P001 => "***",
        }
    }
}

impl fmt::Display for Significance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.stars())
    }
}

/// `q_alpha(k) / sqrt(2)` for alpha in {0.05, 0.01, 0.001}.
pub fn nemenyi_critical(k: usize) -> Result<[f64; 3]> {
    if !(2..=MAX_TREATMENTS).contains(&k) {
        return Err(Error::invalid(format!("Nemenyi critical values tabulated for 2..={MAX_TREATMENTS} treatments, got {k}")));
    }
    let i = k - 2;
    Ok([NEMENYI_Q05[i], NEMENYI_Q01[i], NEMENYI_Q001[i]])
}

/// Smallest mean-rank gap significant at each tabulated level.
pub fn critical_difference(k: usize, n: usize) -> Result<[f64; 3]> {
    let se = (k as f64 * (k as f64 + 1.0) / (6.0 * n as f64)).sqrt();
    Ok(nemenyi_critical(k)?.map(|q| q * se))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NemenyiPair {
    pub i: usize,
    pub j: usize,
    /// `|R_i - R_j| / sqrt(k (k + 1) / (6 N))`
    pub statistic: f64,
    pub significance: Significance,
    /// Index of the treatment with the better mean rank (`None` on a tie).
    pub better: Option<usize>,
}

pub fn nemenyi(m: &ScoreMatrix) -> Result<Vec<NemenyiPair>> {
    let (n, k) = (m.blocks(), m.treatments());
    let q = nemenyi_critical(k)?;
    let ranks = m.mean_ranks();
    let se = (k as f64 * (k as f64 + 1.0) / (6.0 * n as f64)).sqrt();
    let mut out = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            let statistic = (ranks[i] - ranks[j]).abs() / se;
            let significance = match q.iter().rposition(|&c| statistic >= c) {
                None => Significance::Ns,
                Some(0) => Significance::P05,
                Some(1) => Significance::P01,
                Some(_) => Significance::P001,
            };
            let better = match ranks[i].total_cmp(&ranks[j]) {
                std::cmp::Ordering::Less => Some(i),
                std::cmp::Ordering::Greater => Some(j),
                std::cmp::Ordering::Equal => None,
            };
            out.push(NemenyiPair {
                i,
                j,
                statistic,
                significance,
                better,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    /// Sample variance (n - 1 denominator).
    pub variance: f64,
    pub n: usize,
}

/// Two-sided 97.5% t quantile; tabulated up to 30 degrees of freedom.
pub fn t975(df: usize) -> f64 {
    match df {
        0 => f64::NAN,
        1..=30 => T975[df - 1],
        _ => StudentsT::new(0.0, 1.0, df as f64).map_or(f64::NAN, |t| t.inverse_cdf(0.975)),
    }
}

/// Mean with a 95% t interval.
pub fn mean_ci(values: &[f64]) -> Result<MeanCi> {
    let n = values.len();
    if n < 2 {
        return Err(Error::invalid(format!("confidence interval needs >= 2 values, got {n}")));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let half = t975(n - 1) * (variance / n as f64).sqrt();
    Ok(MeanCi {
        mean,
        lo: mean - half,
        hi: mean + half,
        variance,
        n,
    })
}

/// One row of the metric CSVs written by `iqa`, `cc-compare`, `graph` and
/// the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub region: String,
    pub model: String,
    pub resolution: String,
    pub metric: String,
    /// Empty for undefined or unbounded values.
    pub value: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
}

/// Friedman and Nemenyi results for one (metric, resolution) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub metric: String,
    pub resolution: String,
    pub regions: Vec<String>,
    pub models: Vec<String>,
    pub orientation: Orientation,
    pub friedman: Friedman,
    pub pairs: Vec<NemenyiPair>,
    /// Per model across regions.
    pub intervals: Vec<MeanCi>,
}

/// Groups rows by (metric, resolution) and tests every complete group with at
/// least two regions and two models. Groups with missing or undefined cells
/// are skipped with a warning.
pub fn analyze_rows(rows: &[ScoreRow]) -> Result<Vec<GroupResult>> {
    let mut groups: BTreeMap<(String, String), BTreeMap<(String, String), Option<f64>>> = BTreeMap::new();
    for r in rows {
        let cells = groups.entry((r.metric.clone(), r.resolution.clone())).or_default();
        if cells.insert((r.region.clone(), r.model.clone()), r.value).is_some() {
            return Err(Error::invalid(format!(
                "duplicate score for region {} model {} metric {} resolution {}",
                r.region, r.model, r.metric, r.resolution
            )));
        }
    }
    let mut out = Vec::new();
    for ((metric, resolution), cells) in groups {
        let regions: Vec<String> = cells.keys().map(|k| k.0.clone()).collect::<BTreeSet<_>>().into_iter().collect();
        let models: Vec<String> = cells.keys().map(|k| k.1.clone()).collect::<BTreeSet<_>>().into_iter().collect();
        if regions.len() < 2 || models.len() < 2 {
            log::info!("{metric}/{resolution}: needs >= 2 regions and >= 2 models, skipped");
            continue;
        }
        if models.len() > MAX_TREATMENTS {
            log::warn!("{metric}/{resolution}: {} models exceed the tabulated {MAX_TREATMENTS}, skipped", models.len());
            continue;
        }
        let mut matrix = Vec::with_capacity(regions.len());
        let mut complete = true;
        for region in &regions {
            let row: Option<Vec<f64>> = models
                .iter()
                .map(|m| cells.get(&(region.clone(), m.clone())).copied().flatten())
                .collect();
            match row {
                Some(r) => matrix.push(r),
                None => complete = false,
            }
        }
        if !complete {
            log::warn!("{metric}/{resolution}: missing or undefined cells, skipped");
            continue;
        }
        let orientation = Orientation::for_metric(&metric);
        let sm = ScoreMatrix::new(matrix, orientation)?;
        let intervals = (0..models.len())
            .map(|j| mean_ci(&sm.rows.iter().map(|r| r[j]).collect::<Vec<_>>()))
            .collect::<Result<_>>()?;
        out.push(GroupResult {
            friedman: friedman(&sm),
            pairs: nemenyi(&sm)?,
            metric,
            resolution,
            regions,
            models,
            orientation,
            intervals,
        });
    }
    Ok(out)
}

/// Plain-text significance table.
pub fn render_table(groups: &[GroupResult]) -> String {
    if groups.is_empty() {
        return "no metric has >= 2 regions and >= 2 models with complete scores; rank tests skipped\n".into();
    }
    let mut s = String::new();
    for g in groups {
        s.push_str(&format!(
            "{} [{}]  Friedman chi2 = {:.4}, p = {:.4e} ({} regions, {} models)\n",
            g.metric,
            g.resolution,
            g.friedman.chi2,
            g.friedman.p,
            g.regions.len(),
            g.models.len()
        ));
        for (m, (r, ci)) in g.models.iter().zip(g.friedman.mean_ranks.iter().zip(&g.intervals)) {
            s.push_str(&format!(
                "  {m:<16} mean rank {r:.2}  mean {:.4} [{:.4}, {:.4}]  var {:.4e}\n",
                ci.mean, ci.lo, ci.hi, ci.variance
            ));
        }
        for p in &g.pairs {
            s.push_str(&format!("  {} vs {}: {} ({:.3})\n", g.models[p.i], g.models[p.j], p.significance, p.statistic));
        }
    }
    s
}
