//! Ranking metrics (MRR, accuracy, AUROC, confusion matrix) and paired
//! significance tests for comparing two systems on the same subjects.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::RankedPrediction;

/// One labeled prediction: the ranking/scores plus the gold class index.
pub type Labeled = (RankedPrediction, usize);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub subjects: usize,
    pub micro_mrr: f64,
    pub macro_mrr: f64,
    pub accuracy: f64,
    pub auroc_micro: f64,
    /// `confusion[gold][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    /// Per-class (class index, MRR over that class's subjects), sorted by
    /// MRR descending; classes with no subjects are omitted.
    pub per_class_mrr: Vec<(usize, f64)>,
}

fn check_nonempty(labeled: &[Labeled]) -> Result<()> {
    if labeled.is_empty() {
        return Err(Error::Validation("no predictions to evaluate".into()));
    }
    Ok(())
}

/// 1 / (1 + position of the gold class in the ranking).
pub fn reciprocal_rank(pred: &RankedPrediction, gold: usize) -> Result<f64> {
    let pos = pred
        .ranking
        .iter()
        .position(|&c| c == gold)
        .ok_or_else(|| Error::Index(format!("gold class {} not in ranking", gold)))?;
    Ok(1.0 / (pos + 1) as f64)
}

/// Mean reciprocal rank over all subjects.
pub fn micro_mrr(labeled: &[Labeled]) -> Result<f64> {
    check_nonempty(labeled)?;
    let mut sum = 0.0;
    for (p, gold) in labeled {
        sum += reciprocal_rank(p, *gold)?;
    }
    Ok(sum / labeled.len() as f64)
}

/// Unweighted mean of per-class MRRs, over classes that have subjects.
pub fn macro_mrr(labeled: &[Labeled], num_classes: usize) -> Result<f64> {
    let per_class = per_class_mrr(labeled, num_classes)?;
    Ok(per_class.iter().map(|(_, m)| m).sum::<f64>() / per_class.len() as f64)
}

/// Per-class MRR, sorted descending by MRR (ties by class index).
pub fn per_class_mrr(labeled: &[Labeled], num_classes: usize) -> Result<Vec<(usize, f64)>> {
    check_nonempty(labeled)?;
    let mut sums = vec![0.0; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (p, gold) in labeled {
        if *gold >= num_classes {
            return Err(Error::Index(format!("gold class {} out of range", gold)));
        }
        sums[*gold] += reciprocal_rank(p, *gold)?;
        counts[*gold] += 1;
    }
    let mut out: Vec<(usize, f64)> = (0..num_classes)
        .filter(|&c| counts[c] > 0)
        .map(|c| (c, sums[c] / counts[c] as f64))
        .collect();
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(out)
}

/// Fraction of subjects whose top-ranked class is the gold class.
pub fn accuracy(labeled: &[Labeled]) -> Result<f64> {
    check_nonempty(labeled)?;
    let hits = labeled.iter().filter(|(p, gold)| p.top() == *gold).count();
    Ok(hits as f64 / labeled.len() as f64)
}

/// `confusion[gold][predicted]` counts of top-1 decisions.
pub fn confusion_matrix(labeled: &[Labeled], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    check_nonempty(labeled)?;
    let mut m = vec![vec![0usize; num_classes]; num_classes];
    for (p, gold) in labeled {
        if *gold >= num_classes || p.top() >= num_classes {
            return Err(Error::Index("class index out of range".into()));
        }
        m[*gold][p.top()] += 1;
    }
    Ok(m)
}

/// Micro-averaged one-vs-all AUROC: every (subject, class) score is an
/// instance, positive when the class is the subject's gold class. Computed
/// with the Mann-Whitney rank statistic; ties contribute half credit.
pub fn auroc_micro(labeled: &[Labeled]) -> Result<f64> {
    check_nonempty(labeled)?;
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (p, gold) in labeled {
        for (c, &s) in p.scores.iter().enumerate() {
            if c == *gold {
                positives.push(s);
            } else {
                negatives.push(s);
            }
        }
    }
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Validation(
            "AUROC needs both positive and negative instances".into(),
        ));
    }
    let mut wins = 0.0;
    for &p in &positives {
        for &n in &negatives {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (positives.len() as f64 * negatives.len() as f64))
}

/// Full evaluation of one system.
pub fn evaluate(labeled: &[Labeled], num_classes: usize) -> Result<EvalReport> {
    Ok(EvalReport {
        subjects: labeled.len(),
        micro_mrr: micro_mrr(labeled)?,
        macro_mrr: macro_mrr(labeled, num_classes)?,
        accuracy: accuracy(labeled)?,
        auroc_micro: auroc_micro(labeled)?,
        confusion: confusion_matrix(labeled, num_classes)?,
        per_class_mrr: per_class_mrr(labeled, num_classes)?,
    })
}

impl EvalReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    /// Confusion matrix as CSV with a header row of predicted class indices.
    pub fn save_confusion_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let n = self.confusion.len();
        write!(f, "gold\\pred")?;
        for c in 0..n {
            write!(f, ",{}", c)?;
        }
        writeln!(f)?;
        for (g, row) in self.confusion.iter().enumerate() {
            write!(f, "{}", g)?;
            for v in row {
                write!(f, ",{}", v)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Significance tests. Special functions are hand-rolled so the crate does not
// pull in a statistics dependency for two p-values.

/// Lanczos approximation of ln Γ(x) for x > 0.
fn ln_gamma(x: f64) -> f64 {
    const G: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = G[0];
    let t = x + 7.5;
    for (i, &g) in G.iter().enumerate().skip(1) {
        a += g / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized incomplete beta I_x(a, b) via Lentz's continued fraction.
fn betai(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * betacf(a, b, x) / a
    } else {
        1.0 - front * betacf(b, a, 1.0 - x) / b
    }
}

fn betacf(a: f64, b: f64, x: f64) -> f64 {
    const EPS: f64 = 1e-14;
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..200 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Two-sided p-value for Student's t with `df` degrees of freedom.
fn t_sf_two_sided(t: f64, df: f64) -> f64 {
    betai(df / 2.0, 0.5, df / (df + t * t))
}

/// Upper regularized incomplete gamma Q(a, x) (series / continued fraction).
fn gammaq(a: f64, x: f64) -> f64 {
    if x < 0.0 || a <= 0.0 {
        return f64::NAN;
    }
    if x == 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        // Series for P(a, x).
        let mut ap = a;
        let mut sum = 1.0 / a;
        let mut del = sum;
        for _ in 0..300 {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if del.abs() < sum.abs() * 1e-15 {
                break;
            }
        }
        1.0 - sum * (-x + a * x.ln() - ln_gamma(a)).exp()
    } else {
        // Continued fraction for Q(a, x).
        const TINY: f64 = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / TINY;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..300 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < TINY {
                d = TINY;
            }
            c = b + an / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < 1e-15 {
                break;
            }
        }
        h * (-x + a * x.ln() - ln_gamma(a)).exp()
    }
}

/// Survival function of chi-squared with 1 degree of freedom.
fn chi2_sf_1df(x: f64) -> f64 {
    gammaq(0.5, x / 2.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairedTTest {
    pub t: f64,
    pub df: usize,
    pub p_value: f64,
    pub mean_difference: f64,
}

/// Paired two-sided t-test over per-subject score differences (a - b).
/// Identical samples report p = 1.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTTest> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Validation("need at least 2 pairs".into()));
    }
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let df = a.len() - 1;
    if var == 0.0 {
        return Ok(PairedTTest {
            t: 0.0,
            df,
            p_value: 1.0,
            mean_difference: mean,
        });
    }
    let t = mean / (var / n).sqrt();
    Ok(PairedTTest {
        t,
        df,
        p_value: t_sf_two_sided(t, df as f64),
        mean_difference: mean,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McNemarTest {
    /// Subjects system A got right and B got wrong.
    pub b: usize,
    /// Subjects system B got right and A got wrong.
    pub c: usize,
    pub statistic: f64,
    pub p_value: f64,
}

/// McNemar's test with continuity correction on paired top-1 correctness.
/// With no discordant pairs the statistic is 0 and p = 1.
pub fn mcnemar(correct_a: &[bool], correct_b: &[bool]) -> Result<McNemarTest> {
    if correct_a.len() != correct_b.len() {
        return Err(Error::Shape(format!(
            "paired samples differ in length: {} vs {}",
            correct_a.len(),
            correct_b.len()
        )));
    }
    if correct_a.is_empty() {
        return Err(Error::Validation("no pairs".into()));
    }
    let b = correct_a
        .iter()
        .zip(correct_b)
        .filter(|(&x, &y)| x && !y)
        .count();
    let c = correct_a
        .iter()
        .zip(correct_b)
        .filter(|(&x, &y)| !x && y)
        .count();
    if b + c == 0 {
        return Ok(McNemarTest {
            b,
            c,
            statistic: 0.0,
            p_value: 1.0,
        });
    }
    let diff = (b as f64 - c as f64).abs() - 1.0;
    let statistic = (diff.max(0.0)).powi(2) / (b + c) as f64;
    Ok(McNemarTest {
        b,
        c,
        statistic,
        p_value: chi2_sf_1df(statistic),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(scores: Vec<f64>) -> RankedPrediction {
        RankedPrediction::from_scores("s", scores)
    }

    fn sample() -> Vec<Labeled> {
        vec![
            (pred(vec![0.7, 0.2, 0.1]), 0), // rank 1
            (pred(vec![0.1, 0.3, 0.6]), 1), // rank 2
            (pred(vec![0.5, 0.3, 0.2]), 2), // rank 3
            (pred(vec![0.2, 0.5, 0.3]), 1), // rank 1
        ]
    }

    #[test]
    fn micro_mrr_matches_hand_computation() {
        let m = micro_mrr(&sample()).unwrap();
        let expected = (1.0 + 0.5 + 1.0 / 3.0 + 1.0) / 4.0;
        assert!((m - expected).abs() < 1e-12);
    }

    #[test]
    fn macro_mrr_averages_class_means() {
        let m = macro_mrr(&sample(), 3).unwrap();
        let expected = (1.0 + (0.5 + 1.0) / 2.0 + 1.0 / 3.0) / 3.0;
        assert!((m - expected).abs() < 1e-12);
    }

    #[test]
    fn macro_skips_absent_classes() {
        let labeled = vec![(pred(vec![0.9, 0.1]), 0)];
        let m = macro_mrr(&labeled, 2).unwrap();
        assert!((m - 1.0).abs() < 1e-12);
    }

    #[test]
    fn accuracy_counts_top_one() {
        let a = accuracy(&sample()).unwrap();
        assert!((a - 0.5).abs() < 1e-12);
    }

    #[test]
    fn confusion_matrix_shape_and_counts() {
        let m = confusion_matrix(&sample(), 3).unwrap();
        assert_eq!(m[0][0], 1);
        assert_eq!(m[1][2], 1);
        assert_eq!(m[2][0], 1);
        assert_eq!(m[1][1], 1);
        let total: usize = m.iter().flatten().sum();
        assert_eq!(total, 4);
    }

    #[test]
    fn auroc_perfect_and_random() {
        let perfect = vec![
            (pred(vec![0.9, 0.1]), 0),
            (pred(vec![0.2, 0.8]), 1),
        ];
        assert!((auroc_micro(&perfect).unwrap() - 1.0).abs() < 1e-12);
        let uniform = vec![(pred(vec![0.5, 0.5]), 0)];
        assert!((auroc_micro(&uniform).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn auroc_brute_force_oracle() {
        // Direct pairwise definition on a mixed sample with ties.
        let labeled = vec![
            (pred(vec![0.4, 0.3, 0.3]), 0),
            (pred(vec![0.3, 0.4, 0.3]), 2),
            (pred(vec![0.2, 0.2, 0.6]), 2),
        ];
        let got = auroc_micro(&labeled).unwrap();
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (p, g) in &labeled {
            for (c, &s) in p.scores.iter().enumerate() {
                if c == *g { pos.push(s) } else { neg.push(s) }
            }
        }
        let mut wins = 0.0;
        for &p in &pos {
            for &n in &neg {
                wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
            }
        }
        let expected = wins / (pos.len() * neg.len()) as f64;
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn per_class_mrr_sorted_descending() {
        let pc = per_class_mrr(&sample(), 3).unwrap();
        for w in pc.windows(2) {
            assert!(w[0].1 >= w[1].1);
        }
        assert_eq!(pc[0].0, 0); // class 0 has MRR 1.0
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(micro_mrr(&[]).is_err());
        assert!(accuracy(&[]).is_err());
        assert!(auroc_micro(&[]).is_err());
    }

    #[test]
    fn ln_gamma_matches_known_values() {
        // Γ(1)=1, Γ(2)=1, Γ(5)=24, Γ(0.5)=√π
        assert!(ln_gamma(1.0).abs() < 1e-12);
        assert!(ln_gamma(2.0).abs() < 1e-12);
        assert!((ln_gamma(5.0) - 24.0f64.ln()).abs() < 1e-10);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-10);
    }

    #[test]
    fn t_test_known_value() {
        // Classic small sample: differences [1,2,3,4,5] vs zeros.
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [0.0; 5];
        let r = paired_t_test(&a, &b).unwrap();
        // t = 3 / (sqrt(2.5)/sqrt(5)) = 3/sqrt(0.5) ≈ 4.2426
        assert!((r.t - 3.0 / 0.5f64.sqrt()).abs() < 1e-12);
        // Reference two-sided p ≈ 0.0132 (df=4).
        assert!((r.p_value - 0.013193).abs() < 1e-4, "p={}", r.p_value);
    }

    #[test]
    fn t_test_identical_samples_p_is_one() {
        let a = [0.3, 0.7, 0.5];
        let r = paired_t_test(&a, &a).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert_eq!(r.t, 0.0);
    }

    #[test]
    fn mcnemar_known_value() {
        // b=10, c=2: statistic = (|10-2|-1)^2/12 = 49/12 ≈ 4.0833
        let mut a = Vec::new();
        let mut b = Vec::new();
        for _ in 0..10 {
            a.push(true);
            b.push(false);
        }
        for _ in 0..2 {
            a.push(false);
            b.push(true);
        }
        let r = mcnemar(&a, &b).unwrap();
        assert!((r.statistic - 49.0 / 12.0).abs() < 1e-12);
        // chi2 sf(4.0833, 1) ≈ 0.04331
        assert!((r.p_value - 0.04331).abs() < 1e-4, "p={}", r.p_value);
    }

    #[test]
    fn mcnemar_no_discordance_p_is_one() {
        let a = [true, false, true];
        let r = mcnemar(&a, &a).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert_eq!(r.statistic, 0.0);
    }

    #[test]
    fn chi2_sf_reference_points() {
        assert!((chi2_sf_1df(3.841459) - 0.05).abs() < 1e-5);
        assert!((chi2_sf_1df(6.634897) - 0.01).abs() < 1e-5);
    }
}
