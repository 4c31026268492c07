//! Read-side statistics over a replayed event log: conversation statistics,
//! label transition matrices, learning trajectories, activity correlations
//! and survey tallies.
//!
//! Everything here is a pure function of its input. Moments are population
//! moments (divide by n) throughout.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{word_count_delta, ErrorLabel, Session};
use crate::service::events::{replay, LogRecord, ReplayError};

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "error", rename_all = "snake_case")]
pub enum StatsError {
    #[error("log contains no feedback instances")]
    EmptyLog,
    #[error("distribution has zero variance")]
    DegenerateDistribution,
    #[error("need at least {need} points, have {have}")]
    TooFewPoints { need: usize, have: usize },
    #[error("length mismatch: {x} vs {y}")]
    LengthMismatch { x: usize, y: usize },
    #[error("log contains no turn-to-turn transitions")]
    NoTransitions,
    #[error("need at least 3 adjacent turn pairs, have {have}")]
    TooFewPairs { have: usize },
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population central moment of order `k` about `m`.
fn central_moment(xs: &[f64], m: f64, k: i32) -> f64 {
    xs.iter().map(|x| (x - m).powi(k)).sum::<f64>() / xs.len() as f64
}

fn is_constant(xs: &[f64]) -> bool {
    xs.iter().all(|x| *x == xs[0])
}

/// Population standard deviation.
pub fn population_std(xs: &[f64]) -> f64 {
    central_moment(xs, mean(xs), 2).sqrt()
}

/// Fisher-Pearson coefficient of skewness, `m3 / m2^(3/2)`.
pub fn fisher_pearson_skewness(xs: &[f64]) -> Result<f64, StatsError> {
    if xs.len() < 2 {
        return Err(StatsError::TooFewPoints {
            need: 2,
            have: xs.len(),
        });
    }
    if is_constant(xs) {
        return Err(StatsError::DegenerateDistribution);
    }
    let m = mean(xs);
    let m2 = central_moment(xs, m, 2);
    let m3 = central_moment(xs, m, 3);
    if m2 <= 0.0 {
        return Err(StatsError::DegenerateDistribution);
    }
    Ok(m3 / m2.powf(1.5))
}

// ---------------------------------------------------------------------------
// Student t distribution

const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function (Lanczos, g = 7), for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let t = x + 7.5;
    let mut a = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function, modified Lentz method.
fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
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
    for m in 1..=500 {
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

/// Regularized incomplete beta `I_x(a, b)` for `a, b > 0` and `x` in [0, 1].
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    // the fraction converges fast only below the mean; use the symmetry otherwise
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

/// CDF of the Student t distribution with `df` degrees of freedom.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    let tail = 0.5 * regularized_incomplete_beta(df / 2.0, 0.5, x);
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Two-sided p-value of a t statistic.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub r: f64,
    pub p_two_sided: f64,
    pub n: usize,
}

/// Pearson correlation with a two-sided t-test on `n - 2` degrees of freedom.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<CorrelationResult, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch { x: x.len(), y: y.len() });
    }
    let n = x.len();
    if n < 3 {
        return Err(StatsError::TooFewPoints { need: 3, have: n });
    }
    if is_constant(x) || is_constant(y) {
        return Err(StatsError::DegenerateDistribution);
    }
    let (mx, my) = (mean(x), mean(y));
    let cov = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n as f64;
    let sx = central_moment(x, mx, 2).sqrt();
    let sy = central_moment(y, my, 2).sqrt();
    if sx == 0.0 || sy == 0.0 {
        return Err(StatsError::DegenerateDistribution);
    }
    let r = (cov / (sx * sy)).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p_two_sided = if r.abs() >= 1.0 {
        0.0
    } else {
        student_t_two_sided_p(r * (df / (1.0 - r * r)).sqrt(), df)
    };
    Ok(CorrelationResult { r, p_two_sided, n })
}

// ---------------------------------------------------------------------------
// Conversation statistics

/// Percentage `k / n * 100` truncated to two decimals, e.g. 209 of 1042 is "20.05%".
pub fn format_pct_counts(k: u64, n: u64) -> String {
    if n == 0 {
        return "n/a".into();
    }
    let hundredths = (k as u128 * 10_000) / n as u128;
    format!("{}.{:02}%", hundredths / 100, hundredths % 100)
}

/// Integer with thousands separators.
pub fn format_count(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvStats {
    /// Sessions with at least one feedback turn.
    pub total_instances: u64,
    /// Sessions with at least two feedback turns.
    pub conversational_instances: u64,
    pub conversational_pct: f64,
    pub mean_turns: Option<f64>,
    pub std_turns: Option<f64>,
    pub min_turns: Option<u32>,
    pub max_turns: Option<u32>,
    pub skewness_g1: Option<f64>,
    pub first_turn_correct: Option<u64>,
    pub last_turn_correct: Option<u64>,
    pub first_turn_correct_pct: Option<f64>,
    pub last_turn_correct_pct: Option<f64>,
}

pub fn conversation_stats(sessions: &[Session]) -> Result<ConvStats, StatsError> {
    let instances: Vec<&Session> = sessions.iter().filter(|s| !s.turns.is_empty()).collect();
    if instances.is_empty() {
        return Err(StatsError::EmptyLog);
    }
    let conv: Vec<&Session> = instances.iter().copied().filter(|s| s.is_conversational()).collect();
    let total = instances.len() as u64;
    let n_conv = conv.len() as u64;
    let mut stats = ConvStats {
        total_instances: total,
        conversational_instances: n_conv,
        conversational_pct: n_conv as f64 / total as f64 * 100.0,
        mean_turns: None,
        std_turns: None,
        min_turns: None,
        max_turns: None,
        skewness_g1: None,
        first_turn_correct: None,
        last_turn_correct: None,
        first_turn_correct_pct: None,
        last_turn_correct_pct: None,
    };
    if conv.is_empty() {
        return Ok(stats);
    }
    let counts: Vec<f64> = conv.iter().map(|s| s.turns.len() as f64).collect();
    stats.mean_turns = Some(mean(&counts));
    stats.std_turns = Some(population_std(&counts));
    stats.min_turns = conv.iter().map(|s| s.turns.len() as u32).min();
    stats.max_turns = conv.iter().map(|s| s.turns.len() as u32).max();
    stats.skewness_g1 = fisher_pearson_skewness(&counts).ok();
    let is_correct = |t: Option<&crate::domain::ConversationTurn>| {
        t.is_some_and(|t| t.response.classification == ErrorLabel::Correct)
    };
    let first = conv.iter().filter(|s| is_correct(s.turns.first())).count() as u64;
    let last = conv.iter().filter(|s| is_correct(s.turns.last())).count() as u64;
    stats.first_turn_correct = Some(first);
    stats.last_turn_correct = Some(last);
    stats.first_turn_correct_pct = Some(first as f64 / n_conv as f64 * 100.0);
    stats.last_turn_correct_pct = Some(last as f64 / n_conv as f64 * 100.0);
    Ok(stats)
}

// ---------------------------------------------------------------------------
// Transitions and trajectories

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    /// `counts[from][to]`, indexed in label order.
    pub counts: [[u64; 4]; 4],
    pub row_counts: [u64; 4],
    /// `None` for rows without outgoing transitions.
    pub probs: [Option<[f64; 4]>; 4],
}

impl TransitionMatrix {
    pub fn from_counts(counts: [[u64; 4]; 4]) -> Self {
        let mut row_counts = [0u64; 4];
        let mut probs = [None; 4];
        for (i, row) in counts.iter().enumerate() {
            let total: u64 = row.iter().sum();
            row_counts[i] = total;
            if total > 0 {
                probs[i] = Some(row.map(|c| c as f64 / total as f64));
            }
        }
        Self {
            counts,
            row_counts,
            probs,
        }
    }

    pub fn prob(&self, from: ErrorLabel, to: ErrorLabel) -> Option<f64> {
        self.probs[from.index()].map(|row| row[to.index()])
    }

    pub fn total(&self) -> u64 {
        self.row_counts.iter().sum()
    }
}

pub fn transition_matrix(sessions: &[Session]) -> Result<TransitionMatrix, StatsError> {
    let mut counts = [[0u64; 4]; 4];
    for s in sessions {
        for pair in s.turns.windows(2) {
            let from = pair[0].response.classification.index();
            let to = pair[1].response.classification.index();
            counts[from][to] += 1;
        }
    }
    let m = TransitionMatrix::from_counts(counts);
    if m.total() == 0 {
        return Err(StatsError::NoTransitions);
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub path: String,
    pub n_students: u64,
    pub n_correct_answers: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    pub start_label: ErrorLabel,
    pub collapsed: bool,
    /// Most common paths first, ties by path.
    pub entries: Vec<TrajectoryEntry>,
}

impl TrajectoryReport {
    pub fn entry(&self, path: &str) -> Option<&TrajectoryEntry> {
        self.entries.iter().find(|e| e.path == path)
    }
}

/// Path string for a label sequence, e.g. `D-C`. With `collapse`, runs of the
/// same label are merged so `D-D-C` becomes `D-C`.
pub fn trajectory_path(labels: impl IntoIterator<Item = ErrorLabel>, collapse: bool) -> String {
    let mut codes: Vec<char> = Vec::new();
    for l in labels {
        let c = l.short_code();
        if collapse && codes.last() == Some(&c) {
            continue;
        }
        codes.push(c);
    }
    codes.iter().map(char::to_string).collect::<Vec<_>>().join("-")
}

/// Groups conversational sessions starting at `start_label` by their per-turn label path.
pub fn extract_trajectories(sessions: &[Session], start_label: ErrorLabel, collapse: bool) -> TrajectoryReport {
    let mut groups: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for s in sessions.iter().filter(|s| s.is_conversational()) {
        if s.turns[0].response.classification != start_label {
            continue;
        }
        let g = groups.entry(trajectory_path(s.labels(), collapse)).or_default();
        g.0 += 1;
        if s.answer_correct == Some(true) {
            g.1 += 1;
        }
    }
    let mut entries: Vec<TrajectoryEntry> = groups
        .into_iter()
        .map(|(path, (n, c))| TrajectoryEntry {
            path,
            n_students: n,
            n_correct_answers: c,
        })
        .collect();
    entries.sort_by(|a, b| b.n_students.cmp(&a.n_students).then_with(|| a.path.cmp(&b.path)));
    TrajectoryReport {
        start_label,
        collapsed: collapse,
        entries,
    }
}

// ---------------------------------------------------------------------------
// Activity correlations

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityCorrelations {
    pub n_pairs: usize,
    pub latency_vs_correct: Option<CorrelationResult>,
    pub worddelta_vs_correct: Option<CorrelationResult>,
}

/// Adjacent turn pairs as (latency of the later turn, word-count change, later turn is Correct).
pub fn activity_pairs(sessions: &[Session]) -> Vec<(Option<f64>, f64, f64)> {
    let mut out = Vec::new();
    for s in sessions {
        for pair in s.turns.windows(2) {
            let y = if pair[1].response.classification == ErrorLabel::Correct {
                1.0
            } else {
                0.0
            };
            out.push((
                pair[1].latency_since_prev_s,
                word_count_delta(&pair[0].essay, &pair[1].essay) as f64,
                y,
            ));
        }
    }
    out
}

/// Correlates reflective latency and revision size with the revised essay being
/// classified Correct. A pairing whose data are degenerate is reported as absent.
pub fn activity_correlations(sessions: &[Session]) -> Result<ActivityCorrelations, StatsError> {
    let pairs = activity_pairs(sessions);
    if pairs.len() < 3 {
        return Err(StatsError::TooFewPairs { have: pairs.len() });
    }
    let (lat_x, lat_y): (Vec<f64>, Vec<f64>) = pairs.iter().filter_map(|(l, _, y)| l.map(|l| (l, *y))).unzip();
    let delta_x: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.2).collect();
    Ok(ActivityCorrelations {
        n_pairs: pairs.len(),
        latency_vs_correct: pearson(&lat_x, &lat_y).ok(),
        worddelta_vs_correct: pearson(&delta_x, &ys).ok(),
    })
}

// ---------------------------------------------------------------------------
// Report

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnCorrectness {
    pub turn: u32,
    pub sessions: u64,
    pub predicted_correct: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerTally {
    pub answered: u64,
    pub correct: u64,
    /// Final answers of conversational sessions.
    pub conversational_answered: u64,
    pub conversational_correct: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterTally {
    pub cluster_label: Option<i64>,
    pub responses: u64,
    pub helpful: u64,
    pub reasons: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyTally {
    pub responses: u64,
    pub helpful: u64,
    pub clusters: Vec<ClusterTally>,
}

pub fn survey_tally(sessions: &[Session]) -> SurveyTally {
    let mut clusters: BTreeMap<Option<i64>, ClusterTally> = BTreeMap::new();
    let mut tally = SurveyTally {
        responses: 0,
        helpful: 0,
        clusters: Vec::new(),
    };
    for survey in sessions.iter().filter_map(|s| s.survey.as_ref()) {
        tally.responses += 1;
        let c = clusters.entry(survey.cluster_label).or_insert_with(|| ClusterTally {
            cluster_label: survey.cluster_label,
            responses: 0,
            helpful: 0,
            reasons: BTreeMap::new(),
        });
        c.responses += 1;
        if survey.helpful {
            tally.helpful += 1;
            c.helpful += 1;
        }
        for r in &survey.reasons {
            *c.reasons.entry(r.clone()).or_default() += 1;
        }
    }
    tally.clusters = clusters.into_values().collect();
    tally
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportOptions {
    /// Merge repeated consecutive labels in trajectory paths.
    pub collapse_trajectories: bool,
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("writing {path}: {source}")]
    Write { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub events: u64,
    pub sessions: u64,
    pub conversation: ConvStats,
    pub correctness_by_turn: Vec<TurnCorrectness>,
    pub turns_histogram: BTreeMap<u32, u64>,
    pub transitions: Option<TransitionMatrix>,
    pub trajectories: Vec<TrajectoryReport>,
    pub correlations: Option<ActivityCorrelations>,
    pub answers: AnswerTally,
    pub surveys: SurveyTally,
    pub notes: Vec<String>,
}

pub fn build_report(records: &[LogRecord], options: ReportOptions) -> Result<Report, ReportError> {
    let state = replay(records)?;
    report_from_sessions(&state.sessions, state.last_seq, options)
}

pub fn report_from_sessions(sessions: &[Session], events: u64, options: ReportOptions) -> Result<Report, ReportError> {
    let conversation = conversation_stats(sessions)?;
    let mut notes = vec!["instances count sessions with at least one feedback turn, not students".to_string()];

    let mut turns_histogram = BTreeMap::new();
    for s in sessions.iter().filter(|s| !s.turns.is_empty()) {
        *turns_histogram.entry(s.turns.len() as u32).or_insert(0u64) += 1;
    }
    let max_turn = turns_histogram.keys().max().copied().unwrap_or(0);
    let correctness_by_turn = (1..=max_turn)
        .map(|turn| {
            let at: Vec<_> = sessions.iter().filter_map(|s| s.turns.get(turn as usize - 1)).collect();
            TurnCorrectness {
                turn,
                sessions: at.len() as u64,
                predicted_correct: at
                    .iter()
                    .filter(|t| t.response.classification == ErrorLabel::Correct)
                    .count() as u64,
            }
        })
        .collect();

    let transitions = match transition_matrix(sessions) {
        Ok(m) => Some(m),
        Err(e) => {
            notes.push(format!("transitions: {e}"));
            None
        }
    };
    let trajectories = ErrorLabel::ALL
        .iter()
        .map(|&l| extract_trajectories(sessions, l, options.collapse_trajectories))
        .collect();
    let correlations = match activity_correlations(sessions) {
        Ok(c) => Some(c),
        Err(e) => {
            notes.push(format!("correlations: {e}"));
            None
        }
    };

    let answered: Vec<_> = sessions.iter().filter(|s| s.answer_correct.is_some()).collect();
    let answers = AnswerTally {
        answered: answered.len() as u64,
        correct: answered.iter().filter(|s| s.answer_correct == Some(true)).count() as u64,
        conversational_answered: answered.iter().filter(|s| s.is_conversational()).count() as u64,
        conversational_correct: answered
            .iter()
            .filter(|s| s.is_conversational() && s.answer_correct == Some(true))
            .count() as u64,
    };

    Ok(Report {
        events,
        sessions: sessions.len() as u64,
        conversation,
        correctness_by_turn,
        turns_histogram,
        transitions,
        trajectories,
        correlations,
        answers,
        surveys: survey_tally(sessions),
        notes,
    })
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.digits$}"))
}

fn fmt_p(p: f64) -> String {
    if p < 0.001 {
        "< 0.001".into()
    } else {
        format!("{p:.3}")
    }
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_text(&self) -> String {
        let c = &self.conversation;
        let mut out = String::new();
        let w = &mut out;
        let _ = writeln!(w, "Conversation statistics");
        let _ = writeln!(w, "  {:<34}{}", "Total instances", format_count(c.total_instances));
        let _ = writeln!(
            w,
            "  {:<34}{} ({})",
            "Conversational instances",
            format_count(c.conversational_instances),
            format_pct_counts(c.conversational_instances, c.total_instances)
        );
        let _ = writeln!(
            w,
            "  {:<34}{} ({})",
            "Mean # conv. turns (std)",
            fmt_opt(c.mean_turns, 2),
            fmt_opt(c.std_turns, 2)
        );
        let min_max = match (c.min_turns, c.max_turns) {
            (Some(a), Some(b)) => format!("{a} / {b}"),
            _ => "-".into(),
        };
        let _ = writeln!(w, "  {:<34}{}", "Min/Max # conv. turns", min_max);
        let _ = writeln!(w, "  {:<34}{}", "Conv. turn dist. skewness", fmt_opt(c.skewness_g1, 2));
        let _ = writeln!(w, "  % of model prediction as correct");
        let pct = |k: Option<u64>| k.map_or("-".to_string(), |k| format_pct_counts(k, c.conversational_instances));
        let _ = writeln!(w, "  {:<34}{}", "Turn 1 (Initial essay)", pct(c.first_turn_correct));
        let _ = writeln!(w, "  {:<34}{}", "Last turn (Final essay)", pct(c.last_turn_correct));

        let _ = writeln!(w, "\nCorrect predictions by turn");
        for t in &self.correctness_by_turn {
            let _ = writeln!(
                w,
                "  turn {:>2}: {:>6} / {:<6} {}",
                t.turn,
                t.predicted_correct,
                t.sessions,
                format_pct_counts(t.predicted_correct, t.sessions)
            );
        }

        let _ = writeln!(w, "\nTransition probabilities (row: turn i, column: turn i+1)");
        match &self.transitions {
            Some(m) => {
                let _ = write!(w, "  {:<20}", "");
                for l in ErrorLabel::ALL {
                    let _ = write!(w, "{:>20}", l.as_str());
                }
                let _ = writeln!(w, "{:>10}", "n");
                for from in ErrorLabel::ALL {
                    let _ = write!(w, "  {:<20}", from.as_str());
                    for to in ErrorLabel::ALL {
                        let _ = write!(w, "{:>20}", fmt_opt(m.prob(from, to), 4));
                    }
                    let _ = writeln!(w, "{:>10}", m.row_counts[from.index()]);
                }
            }
            None => {
                let _ = writeln!(w, "  (no transitions)");
            }
        }

        for t in &self.trajectories {
            let _ = writeln!(w, "\nTrajectories starting at {}", t.start_label);
            if t.entries.is_empty() {
                let _ = writeln!(w, "  (none)");
            }
            for e in &t.entries {
                let _ = writeln!(w, "  {}: {}/{}", e.path, e.n_correct_answers, e.n_students);
            }
        }

        let _ = writeln!(w, "\nActivity correlations with the revised essay predicted correct");
        match &self.correlations {
            Some(a) => {
                let _ = writeln!(w, "  adjacent turn pairs: {}", a.n_pairs);
                for (name, r) in [
                    ("latency", &a.latency_vs_correct),
                    ("word count change", &a.worddelta_vs_correct),
                ] {
                    match r {
                        Some(r) => {
                            let _ = writeln!(
                                w,
                                "  {:<18} r = {:.2}, p {}, n = {}",
                                name,
                                r.r,
                                fmt_p_eq(r.p_two_sided),
                                r.n
                            );
                        }
                        None => {
                            let _ = writeln!(w, "  {name:<18} undefined");
                        }
                    }
                }
            }
            None => {
                let _ = writeln!(w, "  (too few turn pairs)");
            }
        }

        let a = &self.answers;
        let _ = writeln!(w, "\nFinal answers");
        let _ = writeln!(
            w,
            "  answered: {}, correct: {} ({})",
            a.answered,
            a.correct,
            format_pct_counts(a.correct, a.answered)
        );
        let _ = writeln!(
            w,
            "  conversational: {} of {} correct ({})",
            a.conversational_correct,
            a.conversational_answered,
            format_pct_counts(a.conversational_correct, a.conversational_answered)
        );

        let s = &self.surveys;
        let _ = writeln!(w, "\nSurvey");
        let _ = writeln!(
            w,
            "  helpful: {} of {} ({})",
            s.helpful,
            s.responses,
            format_pct_counts(s.helpful, s.responses)
        );
        for c in &s.clusters {
            let name = c
                .cluster_label
                .map_or("unclustered".to_string(), |l| format!("cluster {l}"));
            let _ = writeln!(w, "  {name}: {} responses, {} helpful", c.responses, c.helpful);
            for (reason, n) in &c.reasons {
                let _ = writeln!(w, "    {n:>5}  {reason}");
            }
        }

        if !self.notes.is_empty() {
            let _ = writeln!(w, "\nNotes");
            for n in &self.notes {
                let _ = writeln!(w, "  - {n}");
            }
        }
        out
    }

    /// Plot-ready CSV files as (file name, contents).
    pub fn csv_files(&self) -> Vec<(String, String)> {
        let mut files = Vec::new();
        let mut t = String::from("from,to,count,prob\n");
        let counts = self.transitions.as_ref().map(|m| m.counts).unwrap_or_default();
        for from in ErrorLabel::ALL {
            for to in ErrorLabel::ALL {
                let prob = self
                    .transitions
                    .as_ref()
                    .and_then(|m| m.prob(from, to))
                    .map_or(String::new(), |p| format!("{p:.6}"));
                let _ = writeln!(t, "{},{},{},{}", from, to, counts[from.index()][to.index()], prob);
            }
        }
        files.push(("transitions.csv".to_string(), t));
        for tr in &self.trajectories {
            let mut s = String::from("path,n,correct\n");
            for e in &tr.entries {
                let _ = writeln!(s, "{},{},{}", e.path, e.n_students, e.n_correct_answers);
            }
            files.push((format!("trajectories_{}.csv", tr.start_label), s));
        }
        let mut h = String::from("turns,sessions\n");
        for (turns, n) in &self.turns_histogram {
            let _ = writeln!(h, "{turns},{n}");
        }
        files.push(("turns_hist.csv".to_string(), h));
        files
    }

    pub fn write_csvs(&self, dir: &Path) -> Result<(), ReportError> {
        std::fs::create_dir_all(dir).map_err(|source| ReportError::Write {
            path: dir.display().to_string(),
            source,
        })?;
        for (name, body) in self.csv_files() {
            let path = dir.join(&name);
            std::fs::write(&path, body).map_err(|source| ReportError::Write {
                path: path.display().to_string(),
                source,
            })?;
        }
        Ok(())
    }
}

fn fmt_p_eq(p: f64) -> String {
    let s = fmt_p(p);
    if s.starts_with('<') {
        s
    } else {
        format!("= {s}")
    }
}
