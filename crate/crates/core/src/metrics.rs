//! Unbiased @k estimators, Efficiency@k and run-level confidence intervals.
//!
//! All probabilities are fractions in `[0, 1]`. They are only scaled to
//! percent when a report is rendered (see [`percent`]), with one exception:
//! Efficiency@k is defined on Play@k in percent divided by kilo-tokens per
//! problem, so [`efficiency_at_k`] does that scaling itself.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("k must satisfy 1 <= k <= n (k={k}, n={n})")]
    InvalidK { n: usize, k: usize },
    #[error("success count {c} exceeds sample count {n}")]
    CountExceedsSamples { n: usize, c: usize },
    #[error("stage counts violate gating order: exec={exec} pass={pass} play={play} n={n}")]
    GatingViolation {
        n: usize,
        exec: usize,
        pass: usize,
        play: usize,
    },
    #[error("no records to aggregate")]
    Empty,
    #[error("records disagree on sample count ({expected} vs {found})")]
    MixedSampleCount { expected: usize, found: usize },
    #[error("efficiency is undefined: {0}")]
    UndefinedEfficiency(&'static str),
    #[error("confidence interval needs at least 2 run means, got {0}")]
    TooFewRuns(usize),
    #[error("unsupported confidence level {0}; use 0.90, 0.95 or 0.99")]
    UnsupportedLevel(f64),
}

/// Evaluation stage of the gated pipeline: exec -> pass -> play.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Exec,
    Pass,
    Play,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Exec, Stage::Pass, Stage::Play];

    pub fn label(self) -> &'static str {
        match self {
            Stage::Exec => "Exec",
            Stage::Pass => "Pass",
            Stage::Play => "Play",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Per-problem success counts for each stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleOutcomes {
    pub problem_id: String,
    pub n: usize,
    pub c_exec: usize,
    pub c_pass: usize,
    pub c_play: usize,
}

impl SampleOutcomes {
    pub fn new(
        problem_id: impl Into<String>,
        n: usize,
        c_exec: usize,
        c_pass: usize,
        c_play: usize,
    ) -> Result<Self, MetricsError> {
        if c_exec > n {
            return Err(MetricsError::CountExceedsSamples { n, c: c_exec });
        }
        if !(c_play <= c_pass && c_pass <= c_exec) {
            return Err(MetricsError::GatingViolation {
                n,
                exec: c_exec,
                pass: c_pass,
                play: c_play,
            });
        }
        Ok(Self {
            problem_id: problem_id.into(),
            n,
            c_exec,
            c_pass,
            c_play,
        })
    }

    pub fn count(&self, stage: Stage) -> usize {
        match stage {
            Stage::Exec => self.c_exec,
            Stage::Pass => self.c_pass,
            Stage::Play => self.c_play,
        }
    }
}

/// Probability that at least one of `k` samples drawn without replacement
/// from `n` samples (of which `c` succeed) is a success: `1 - C(n-c,k)/C(n,k)`.
///
/// Evaluated as `1 - prod_{i=n-c+1}^{n} (1 - k/i)`, which never forms a
/// binomial coefficient and stays exact in `f64` for large `n`.
pub fn estimate_at_k(n: usize, c: usize, k: usize) -> Result<f64, MetricsError> {
    if k == 0 || k > n {
        return Err(MetricsError::InvalidK { n, k });
    }
    if c > n {
        return Err(MetricsError::CountExceedsSamples { n, c });
    }
    if c == 0 {
        return Ok(0.0);
    }
    if n - c < k {
        return Ok(1.0);
    }
    let kf = k as f64;
    let miss: f64 = ((n - c + 1)..=n).map(|i| 1.0 - kf / i as f64).product();
    Ok(1.0 - miss)
}

/// Mean of [`estimate_at_k`] over problems for one stage.
pub fn aggregate_stage(
    records: &[SampleOutcomes],
    stage: Stage,
    k: usize,
) -> Result<f64, MetricsError> {
    let first = records.first().ok_or(MetricsError::Empty)?;
    let mut sum = 0.0;
    for record in records {
        if record.n != first.n {
            return Err(MetricsError::MixedSampleCount {
                expected: first.n,
                found: record.n,
            });
        }
        sum += estimate_at_k(record.n, record.count(stage), k)?;
    }
    Ok(sum / records.len() as f64)
}

/// Tokens spent by one LLM call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallTokens {
    pub call_id: String,
    pub tokens_in: u64,
    pub tokens_out: u64,
}

/// Token accounting over a set of calls and the number of problems they served.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLedger {
    total_tokens: u64,
    per_call: Vec<CallTokens>,
    problems: usize,
}

impl TokenLedger {
    pub fn new(problems: usize) -> Self {
        Self {
            problems,
            ..Self::default()
        }
    }

    pub fn record(&mut self, call_id: impl Into<String>, tokens_in: u64, tokens_out: u64) {
        self.total_tokens += tokens_in + tokens_out;
        self.per_call.push(CallTokens {
            call_id: call_id.into(),
            tokens_in,
            tokens_out,
        });
    }

    /// Appends every call of `other`; the problem count is left unchanged.
    pub fn absorb(&mut self, other: &TokenLedger) {
        for call in &other.per_call {
            self.record(call.call_id.clone(), call.tokens_in, call.tokens_out);
        }
    }

    pub fn set_problems(&mut self, problems: usize) {
        self.problems = problems;
    }

    pub fn total_tokens(&self) -> u64 {
        self.total_tokens
    }

    pub fn problems(&self) -> usize {
        self.problems
    }

    pub fn per_call(&self) -> &[CallTokens] {
        &self.per_call
    }

    pub fn calls(&self) -> usize {
        self.per_call.len()
    }

    /// Average kilo-tokens per problem (the `AT_k` denominator of Efficiency@k).
    pub fn kilo_tokens_per_problem(&self) -> Result<f64, MetricsError> {
        if self.problems == 0 {
            return Err(MetricsError::UndefinedEfficiency("ledger covers zero problems"));
        }
        if self.total_tokens == 0 {
            return Err(MetricsError::UndefinedEfficiency("no tokens consumed"));
        }
        Ok(self.total_tokens as f64 / (self.problems as f64 * 1e3))
    }
}

/// Efficiency@k: Play@k (as a percentage) per thousand tokens per problem.
///
/// `play_k` is a fraction. `k` only selects which @k value is being scored;
/// the same token total is used for every k, matching how the reference
/// numbers pair a single tokens-per-problem figure with both Play@1 and Play@3.
pub fn efficiency_at_k(play_k: f64, ledger: &TokenLedger, k: usize) -> Result<f64, MetricsError> {
    if k == 0 {
        return Err(MetricsError::InvalidK { n: 0, k });
    }
    let at_k = ledger.kilo_tokens_per_problem()?;
    Ok(percent(play_k) / at_k)
}

/// Efficiency@1 through the expected-success-count route: the summed
/// per-problem success rates over total tokens, with the same percent and
/// kilo scaling as [`efficiency_at_k`].
pub fn efficiency_at_1_from_successes(
    records: &[SampleOutcomes],
    total_tokens: u64,
) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    if total_tokens == 0 {
        return Err(MetricsError::UndefinedEfficiency("no tokens consumed"));
    }
    let succeed: f64 = records
        .iter()
        .map(|r| r.c_play as f64 / r.n as f64)
        .sum();
    Ok(100.0 * 1e3 * succeed / total_tokens as f64)
}

pub fn percent(fraction: f64) -> f64 {
    fraction * 100.0
}

/// Mean and Student-t half-width of a set of per-run means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub half_width: f64,
}

pub fn confidence_interval(run_means: &[f64], level: f64) -> Result<Interval, MetricsError> {
    let m = run_means.len();
    if m < 2 {
        return Err(MetricsError::TooFewRuns(m));
    }
    let t = t_critical(level, m - 1)?;
    // Sort first so the result does not depend on input order in the last bits.
    let mut sorted = run_means.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / m as f64;
    let var = sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
    let half_width = t * var.sqrt() / (m as f64).sqrt();
    Ok(Interval { mean, half_width })
}

/// Two-sided Student-t critical value `t_{(1+level)/2, df}`.
pub fn t_critical(level: f64, df: usize) -> Result<f64, MetricsError> {
    let (table, z) = if (level - 0.95).abs() < 1e-9 {
        (&T_975, 1.959_963_984_540_054)
    } else if (level - 0.90).abs() < 1e-9 {
        (&T_950, 1.644_853_626_951_472_2)
    } else if (level - 0.99).abs() < 1e-9 {
        (&T_995, 2.575_829_303_548_900_4)
    } else {
        return Err(MetricsError::UnsupportedLevel(level));
    };
    if df == 0 {
        return Err(MetricsError::TooFewRuns(1));
    }
    if df <= table.len() {
        return Ok(table[df - 1]);
    }
    // Cornish-Fisher expansion of the t quantile around the normal quantile.
    let v = df as f64;
    let z3 = z * z * z;
    let z5 = z3 * z * z;
    let z7 = z5 * z * z;
    Ok(z + (z3 + z) / (4.0 * v)
        + (5.0 * z5 + 16.0 * z3 + 3.0 * z) / (96.0 * v * v)
        + (3.0 * z7 + 19.0 * z5 + 17.0 * z3 - 15.0 * z) / (384.0 * v * v * v))
}

// Quantiles for df = 1..=100.
const T_950: [f64; 100] = [
    6.313752, 2.919986, 2.353363, 2.131847, 2.015048,
    1.943180, 1.894579, 1.859548, 1.833113, 1.812461,
    1.795885, 1.782288, 1.770933, 1.761310, 1.753050,
    1.745884, 1.739607, 1.734064, 1.729133, 1.724718,
    1.720743, 1.717144, 1.713872, 1.710882, 1.708141,
    1.705618, 1.703288, 1.701131, 1.699127, 1.697261,
    1.695519, 1.693889, 1.692360, 1.690924, 1.689572,
    1.688298, 1.687094, 1.685954, 1.684875, 1.683851,
    1.682878, 1.681952, 1.681071, 1.680230, 1.679427,
    1.678660, 1.677927, 1.677224, 1.676551, 1.675905,
    1.675285, 1.674689, 1.674116, 1.673565, 1.673034,
    1.672522, 1.672029, 1.671553, 1.671093, 1.670649,
    1.670219, 1.669804, 1.669402, 1.669013, 1.668636,
    1.668271, 1.667916, 1.667572, 1.667239, 1.666914,
    1.666600, 1.666294, 1.665996, 1.665707, 1.665425,
    1.665151, 1.664885, 1.664625, 1.664371, 1.664125,
    1.663884, 1.663649, 1.663420, 1.663197, 1.662978,
    1.662765, 1.662557, 1.662354, 1.662155, 1.661961,
    1.661771, 1.661585, 1.661404, 1.661226, 1.661052,
    1.660881, 1.660715, 1.660551, 1.660391, 1.660234,
];

const T_975: [f64; 100] = [
    12.706205, 4.302653, 3.182446, 2.776445, 2.570582,
    2.446912, 2.364624, 2.306004, 2.262157, 2.228139,
    2.200985, 2.178813, 2.160369, 2.144787, 2.131450,
    2.119905, 2.109816, 2.100922, 2.093024, 2.085963,
    2.079614, 2.073873, 2.068658, 2.063899, 2.059539,
    2.055529, 2.051831, 2.048407, 2.045230, 2.042272,
    2.039513, 2.036933, 2.034515, 2.032245, 2.030108,
    2.028094, 2.026192, 2.024394, 2.022691, 2.021075,
    2.019541, 2.018082, 2.016692, 2.015368, 2.014103,
    2.012896, 2.011741, 2.010635, 2.009575, 2.008559,
    2.007584, 2.006647, 2.005746, 2.004879, 2.004045,
    2.003241, 2.002465, 2.001717, 2.000995, 2.000298,
    1.999624, 1.998972, 1.998341, 1.997730, 1.997138,
    1.996564, 1.996008, 1.995469, 1.994945, 1.994437,
    1.993943, 1.993464, 1.992997, 1.992543, 1.992102,
    1.991673, 1.991254, 1.990847, 1.990450, 1.990063,
    1.989686, 1.989319, 1.988960, 1.988610, 1.988268,
    1.987934, 1.987608, 1.987290, 1.986979, 1.986675,
    1.986377, 1.986086, 1.985802, 1.985523, 1.985251,
    1.984984, 1.984723, 1.984467, 1.984217, 1.983972,
];

const T_995: [f64; 100] = [
    63.656741, 9.924843, 5.840909, 4.604095, 4.032143,
    3.707428, 3.499483, 3.355387, 3.249836, 3.169273,
    3.105807, 3.054540, 3.012276, 2.976843, 2.946713,
    2.920782, 2.898231, 2.878440, 2.860935, 2.845340,
    2.831360, 2.818756, 2.807336, 2.796940, 2.787436,
    2.778715, 2.770683, 2.763262, 2.756386, 2.749996,
    2.744042, 2.738481, 2.733277, 2.728394, 2.723806,
    2.719485, 2.715409, 2.711558, 2.707913, 2.704459,
    2.701181, 2.698066, 2.695102, 2.692278, 2.689585,
    2.687013, 2.684556, 2.682204, 2.679952, 2.677793,
    2.675722, 2.673734, 2.671823, 2.669985, 2.668216,
    2.666512, 2.664870, 2.663287, 2.661759, 2.660283,
    2.658857, 2.657479, 2.656145, 2.654854, 2.653604,
    2.652394, 2.651220, 2.650081, 2.648977, 2.647905,
    2.646863, 2.645852, 2.644869, 2.643913, 2.642983,
    2.642078, 2.641198, 2.640340, 2.639505, 2.638691,
    2.637897, 2.637123, 2.636369, 2.635632, 2.634914,
    2.634212, 2.633527, 2.632858, 2.632204, 2.631565,
    2.630940, 2.630330, 2.629732, 2.629148, 2.628576,
    2.628016, 2.627468, 2.626931, 2.626405, 2.625891,
];

/// One metric across repeated runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSeries {
    pub name: String,
    pub per_run: Vec<f64>,
    pub mean: f64,
    pub half_width: f64,
}

impl RunSeries {
    pub fn from_runs(name: impl Into<String>, per_run: Vec<f64>) -> Result<Self, MetricsError> {
        let (mean, half_width) = if per_run.len() >= 2 {
            let ci = confidence_interval(&per_run, 0.95)?;
            (ci.mean, ci.half_width)
        } else {
            // A single run has no spread estimate.
            (per_run.first().copied().unwrap_or(0.0), 0.0)
        };
        Ok(Self {
            name: name.into(),
            per_run,
            mean,
            half_width,
        })
    }
}

/// Metrics of a whole benchmark: each @k and Efficiency@k across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub ks: Vec<usize>,
    pub runs: usize,
    /// Problems evaluated per run (the N of Efficiency@k).
    pub problems: usize,
    pub tokens_per_run: Vec<u64>,
    pub series: Vec<RunSeries>,
}

impl MetricReport {
    pub fn get(&self, name: &str) -> Option<&RunSeries> {
        self.series.iter().find(|s| s.name == name)
    }

    pub fn stage_key(stage: Stage, k: usize) -> String {
        format!("{}@{}", stage.label(), k)
    }

    pub fn efficiency_key(k: usize) -> String {
        format!("Efficiency@{k}")
    }

    /// Line-oriented `key = value` rendering. @k values are shown in percent.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("n = {}\n", self.n));
        out.push_str(&format!(
            "ks = {}\n",
            self.ks.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(",")
        ));
        out.push_str(&format!("runs = {}\n", self.runs));
        out.push_str(&format!("problems = {}\n", self.problems));
        for series in &self.series {
            let is_efficiency = series.name.starts_with("Efficiency@");
            let scale = |v: f64| if is_efficiency { v } else { percent(v) };
            let runs = series
                .per_run
                .iter()
                .map(|v| format!("{:.2}", scale(*v)))
                .collect::<Vec<_>>()
                .join(",");
            out.push_str(&format!(
                "{} = {:.2} +/- {:.2} [runs: {}]\n",
                series.name,
                scale(series.mean),
                scale(series.half_width),
                runs
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn estimator_examples() {
        assert_eq!(estimate_at_k(3, 3, 1).unwrap(), 1.0);
        assert_eq!(estimate_at_k(3, 0, 3).unwrap(), 0.0);
        assert!((estimate_at_k(3, 1, 2).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((estimate_at_k(10, 4, 3).unwrap() - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn estimator_domain_errors() {
        assert!(matches!(estimate_at_k(3, 1, 0), Err(MetricsError::InvalidK { .. })));
        assert!(matches!(estimate_at_k(3, 1, 4), Err(MetricsError::InvalidK { .. })));
        assert!(matches!(
            estimate_at_k(3, 4, 1),
            Err(MetricsError::CountExceedsSamples { .. })
        ));
    }

    #[test]
    fn estimator_handles_large_n() {
        let v = estimate_at_k(10_000, 1, 1).unwrap();
        assert!((v - 1e-4).abs() < 1e-15);
        let v = estimate_at_k(10_000, 5_000, 100).unwrap();
        assert!(v > 0.999_999 && v <= 1.0);
    }

    #[test]
    fn aggregate_examples() {
        let a = SampleOutcomes::new("a", 3, 3, 3, 3).unwrap();
        let b = SampleOutcomes::new("b", 3, 0, 0, 0).unwrap();
        assert_eq!(aggregate_stage(&[a, b], Stage::Play, 1).unwrap(), 0.5);
        let single = SampleOutcomes::new("s", 3, 1, 0, 0).unwrap();
        let v = aggregate_stage(&[single], Stage::Exec, 1).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn aggregate_errors() {
        assert_eq!(aggregate_stage(&[], Stage::Exec, 1), Err(MetricsError::Empty));
        let a = SampleOutcomes::new("a", 3, 1, 1, 1).unwrap();
        let b = SampleOutcomes::new("b", 4, 1, 1, 1).unwrap();
        assert!(matches!(
            aggregate_stage(&[a, b], Stage::Exec, 1),
            Err(MetricsError::MixedSampleCount { .. })
        ));
    }

    #[test]
    fn outcomes_reject_ungated_counts() {
        assert!(SampleOutcomes::new("x", 3, 1, 2, 0).is_err());
        assert!(SampleOutcomes::new("x", 3, 4, 0, 0).is_err());
    }

    fn ledger_with(tokens_per_problem: u64, problems: usize) -> TokenLedger {
        let mut ledger = TokenLedger::new(problems);
        for p in 0..problems {
            ledger.record(format!("call-{p}"), tokens_per_problem, 0);
        }
        ledger
    }

    #[test]
    fn efficiency_reference_rows() {
        let baseline = efficiency_at_k(0.043, &ledger_with(4267, 30), 1).unwrap();
        assert!((baseline - 1.01).abs() <= 0.005, "{baseline}");
        let full = efficiency_at_k(0.083, &ledger_with(5480, 30), 1).unwrap();
        assert!((full - 1.51).abs() <= 0.005, "{full}");
        assert_eq!(efficiency_at_k(0.0, &ledger_with(10, 2), 1).unwrap(), 0.0);
    }

    #[test]
    fn efficiency_rejects_empty_ledger() {
        let ledger = TokenLedger::new(3);
        assert!(matches!(
            efficiency_at_k(0.5, &ledger, 1),
            Err(MetricsError::UndefinedEfficiency(_))
        ));
    }

    #[test]
    fn ledger_total_is_sum_of_calls() {
        let mut ledger = TokenLedger::new(1);
        ledger.record("a", 10, 5);
        ledger.record("b", 7, 3);
        assert_eq!(ledger.total_tokens(), 25);
        let summed: u64 = ledger.per_call().iter().map(|c| c.tokens_in + c.tokens_out).sum();
        assert_eq!(summed, ledger.total_tokens());
    }

    #[test]
    fn ci_examples() {
        let ci = confidence_interval(&[3.0; 5], 0.95).unwrap();
        assert_eq!((ci.mean, ci.half_width), (3.0, 0.0));
        let ci = confidence_interval(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.95).unwrap();
        assert_eq!(ci.mean, 3.0);
        assert!((ci.half_width - 1.963).abs() < 1e-3, "{}", ci.half_width);
        let ci = confidence_interval(&[0.0, 10.0], 0.95).unwrap();
        assert_eq!(ci.mean, 5.0);
        assert!((ci.half_width - 63.53).abs() < 1e-2, "{}", ci.half_width);
        assert_eq!(
            confidence_interval(&[1.0], 0.95),
            Err(MetricsError::TooFewRuns(1))
        );
    }

    #[test]
    fn t_critical_tail_is_continuous() {
        // Expansion at df=101 must sit just below the last tabulated value.
        for level in [0.90, 0.95, 0.99] {
            let last = t_critical(level, 100).unwrap();
            let next = t_critical(level, 101).unwrap();
            assert!(next < last && last - next < 1e-3, "{level}: {last} {next}");
        }
        assert!(t_critical(0.8, 4).is_err());
    }
}
