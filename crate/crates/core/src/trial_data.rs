//! Longitudinal trial data: ingestion, validation, design construction for
//! the prognostic-score-adjusted repeated-measures model, score validation
//! and participant subsampling.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::covariance::CovarianceKind;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Ordered visit labels; the visit count is the number of labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisitSchedule {
    labels: Vec<String>,
}

impl VisitSchedule {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Validation("visit schedule needs at least one visit".into()));
        }
        for (i, label) in labels.iter().enumerate() {
            if labels[..i].contains(label) {
                return Err(Error::Validation(format!("duplicate visit label {label:?}")));
            }
        }
        Ok(Self { labels })
    }

    /// Schedule labelled `visit 1` .. `visit T`.
    pub fn numbered(visit_count: usize) -> Result<Self> {
        Self::new((1..=visit_count).map(|t| format!("visit {t}")).collect())
    }

    pub fn visit_count(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Control,
    Treatment,
}

impl Arm {
    pub fn from_indicator(w: i64) -> Option<Self> {
        match w {
            0 => Some(Arm::Control),
            1 => Some(Arm::Treatment),
            _ => None,
        }
    }

    pub fn indicator(self) -> u8 {
        match self {
            Arm::Control => 0,
            Arm::Treatment => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantRecord<T> {
    pub id: String,
    pub arm: Arm,
    /// One entry per scheduled visit; `None` marks an unobserved outcome.
    pub outcomes: Vec<Option<T>>,
    /// Time-matched prognostic scores, one per scheduled visit.
    pub prognostic_scores: Vec<T>,
    pub baseline_covariates: Vec<T>,
}

impl<T: Real> ParticipantRecord<T> {
    pub fn observed_visits(&self) -> Vec<usize> {
        self.outcomes
            .iter()
            .enumerate()
            .filter_map(|(t, y)| y.map(|_| t))
            .collect()
    }

    /// Zero-based index of the last observed visit.
    pub fn last_observed_visit(&self) -> Option<usize> {
        self.outcomes.iter().rposition(Option::is_some)
    }

    /// True when every visit up to the last observed one is observed.
    pub fn is_monotone(&self) -> bool {
        match self.last_observed_visit() {
            Some(last) => self.outcomes[..=last].iter().all(Option::is_some),
            None => true,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.outcomes.iter().all(Option::is_some)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialDataset<T> {
    schedule: VisitSchedule,
    participants: Vec<ParticipantRecord<T>>,
    covariate_names: Vec<String>,
}

impl<T: Real> TrialDataset<T> {
    pub fn new(
        schedule: VisitSchedule,
        participants: Vec<ParticipantRecord<T>>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let visits = schedule.visit_count();
        let k = covariate_names.len();
        let mut seen = HashMap::with_capacity(participants.len());
        let mut intermittent = 0usize;
        for rec in &participants {
            if seen.insert(rec.id.as_str(), ()).is_some() {
                return Err(Error::Validation(format!("participant id {} appears twice", rec.id)));
            }
            if rec.outcomes.len() != visits || rec.prognostic_scores.len() != visits {
                return Err(Error::Validation(format!(
                    "participant {} has {} outcomes and {} scores for a {visits}-visit schedule",
                    rec.id,
                    rec.outcomes.len(),
                    rec.prognostic_scores.len()
                )));
            }
            if rec.baseline_covariates.len() != k {
                return Err(Error::Validation(format!(
                    "participant {} has {} baseline covariates, expected {k}",
                    rec.id,
                    rec.baseline_covariates.len()
                )));
            }
            if rec.last_observed_visit().is_none() {
                return Err(Error::Validation(format!("participant {} has no observed outcome", rec.id)));
            }
            let finite = rec.outcomes.iter().flatten().all(|v| v.is_finite())
                && rec.prognostic_scores.iter().all(|v| v.is_finite())
                && rec.baseline_covariates.iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::Validation(format!("participant {} has non-finite values", rec.id)));
            }
            if !rec.is_monotone() {
                intermittent += 1;
            }
        }
        for arm in [Arm::Control, Arm::Treatment] {
            if !participants.iter().any(|p| p.arm == arm) {
                return Err(Error::Validation(format!("no participants in the {arm:?} arm")));
            }
        }
        if intermittent > 0 {
            log::warn!("{intermittent} participant(s) have intermittent (non-monotone) missing outcomes");
        }
        Ok(Self { schedule, participants, covariate_names })
    }

    pub fn schedule(&self) -> &VisitSchedule {
        &self.schedule
    }

    pub fn visit_count(&self) -> usize {
        self.schedule.visit_count()
    }

    pub fn participants(&self) -> &[ParticipantRecord<T>] {
        &self.participants
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn arm_count(&self, arm: Arm) -> usize {
        self.participants.iter().filter(|p| p.arm == arm).count()
    }

    pub fn observation_count(&self) -> usize {
        self.participants.iter().map(|p| p.outcomes.iter().flatten().count()).sum()
    }

    /// Participants with every scheduled outcome observed.
    pub fn complete_cases(&self) -> Result<Self> {
        let kept: Vec<_> = self.participants.iter().filter(|p| p.is_complete()).cloned().collect();
        Self::new(self.schedule.clone(), kept, self.covariate_names.clone())
    }
}

/// Column names in a long-format file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMap {
    pub id: String,
    pub visit: String,
    pub arm: String,
    pub outcome: String,
    pub score: String,
    /// Baseline covariate columns. `None` picks up every column whose name
    /// starts with `cov_`, in file order.
    pub covariates: Option<Vec<String>>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            id: "id".into(),
            visit: "visit".into(),
            arm: "arm".into(),
            outcome: "outcome".into(),
            score: "score".into(),
            covariates: None,
        }
    }
}

pub fn load_dataset<T: Real>(path: impl AsRef<Path>, schema: &ColumnMap) -> Result<TrialDataset<T>> {
    let file = std::fs::File::open(path.as_ref())?;
    read_dataset(file, schema)
}

struct PendingParticipant<T> {
    id: String,
    arm: Arm,
    outcomes: HashMap<usize, Option<T>>,
    scores: HashMap<usize, Option<T>>,
    covariates: Vec<T>,
}

/// Reads a long-format CSV (one row per participant-visit, 1-based visits).
pub fn read_dataset<T: Real, R: std::io::Read>(reader: R, schema: &ColumnMap) -> Result<TrialDataset<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse { row: 1, message: e.to_string() })?
        .clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse { row: 1, message: format!("missing column {name:?}") })
    };
    let id_col = find(&schema.id)?;
    let visit_col = find(&schema.visit)?;
    let arm_col = find(&schema.arm)?;
    let outcome_col = find(&schema.outcome)?;
    let score_col = find(&schema.score)?;
    let covariate_names: Vec<String> = match &schema.covariates {
        Some(names) => names.clone(),
        None => headers.iter().filter(|h| h.starts_with("cov_")).map(str::to_string).collect(),
    };
    let cov_cols = covariate_names.iter().map(|n| find(n)).collect::<Result<Vec<_>>>()?;

    let mut order: Vec<PendingParticipant<T>> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    let mut max_visit = 0usize;

    for (i, record) in rdr.records().enumerate() {
        // header is line 1
        let row = record.as_ref().ok().and_then(|r| r.position()).map_or(i + 2, |p| p.line() as usize);
        let record = record.map_err(|e| Error::Parse { row, message: e.to_string() })?;
        let field = |col: usize| record.get(col).unwrap_or("");
        let parse_real = |col: usize, what: &str| -> Result<Option<T>> {
            let raw = field(col);
            if raw.is_empty() || raw.eq_ignore_ascii_case("na") {
                return Ok(None);
            }
            let v: f64 = raw
                .parse()
                .map_err(|_| Error::Parse { row, message: format!("{what} value {raw:?} is not a number") })?;
            if !v.is_finite() {
                return Err(Error::Parse { row, message: format!("{what} value {raw:?} is not finite") });
            }
            Ok(Some(T::lit(v)))
        };

        let id = field(id_col).to_string();
        if id.is_empty() {
            return Err(Error::Parse { row, message: "empty participant id".into() });
        }
        let visit: usize = field(visit_col)
            .parse()
            .map_err(|_| Error::Parse { row, message: format!("visit {:?} is not a positive integer", field(visit_col)) })?;
        if visit == 0 {
            return Err(Error::Parse { row, message: "visit indices are 1-based".into() });
        }
        let arm_raw = field(arm_col);
        let arm = arm_raw
            .parse::<i64>()
            .ok()
            .and_then(Arm::from_indicator)
            .ok_or_else(|| Error::Validation(format!("row {row}: arm {arm_raw:?} is not 0 or 1")))?;
        let outcome = parse_real(outcome_col, "outcome")?;
        let score = parse_real(score_col, "score")?;
        let mut covariates = Vec::with_capacity(cov_cols.len());
        for (&c, name) in cov_cols.iter().zip(&covariate_names) {
            let v = parse_real(c, name)?
                .ok_or_else(|| Error::Parse { row, message: format!("missing baseline covariate {name}") })?;
            covariates.push(v);
        }
        max_visit = max_visit.max(visit);

        let slot = match by_id.get(&id) {
            Some(&k) => k,
            None => {
                by_id.insert(id.clone(), order.len());
                order.push(PendingParticipant {
                    id: id.clone(),
                    arm,
                    outcomes: HashMap::new(),
                    scores: HashMap::new(),
                    covariates: covariates.clone(),
                });
                order.len() - 1
            }
        };
        let p = &mut order[slot];
        if p.arm != arm {
            return Err(Error::Validation(format!("row {row}: participant {id} switches arm")));
        }
        if p.covariates != covariates {
            return Err(Error::Validation(format!(
                "row {row}: baseline covariates of participant {id} vary across visits"
            )));
        }
        if p.outcomes.insert(visit - 1, outcome).is_some() {
            return Err(Error::Duplicate { id, visit });
        }
        p.scores.insert(visit - 1, score);
    }
    if order.is_empty() {
        return Err(Error::Validation("no data rows".into()));
    }

    let schedule = VisitSchedule::numbered(max_visit)?;
    let mut participants = Vec::with_capacity(order.len());
    for p in order {
        let mut scores = Vec::with_capacity(max_visit);
        for t in 0..max_visit {
            match p.scores.get(&t).copied().flatten() {
                Some(s) => scores.push(s),
                None => {
                    return Err(Error::Validation(format!(
                        "participant {}: non-baseline-derived score pattern (prognostic score missing at visit {})",
                        p.id,
                        t + 1
                    )))
                }
            }
        }
        let outcomes = (0..max_visit).map(|t| p.outcomes.get(&t).copied().flatten()).collect();
        participants.push(ParticipantRecord {
            id: p.id,
            arm: p.arm,
            outcomes,
            prognostic_scores: scores,
            baseline_covariates: p.covariates,
        });
    }
    TrialDataset::new(schedule, participants, covariate_names)
}

/// Writes a dataset back out in the long format accepted by [`read_dataset`].
pub fn write_dataset<T: Real, W: std::io::Write>(data: &TrialDataset<T>, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string(), "visit".into(), "arm".into(), "outcome".into(), "score".into()];
    header.extend(data.covariate_names.iter().cloned());
    wtr.write_record(&header).map_err(csv_io)?;
    for p in &data.participants {
        for t in 0..data.visit_count() {
            let mut row = vec![
                p.id.clone(),
                (t + 1).to_string(),
                p.arm.indicator().to_string(),
                p.outcomes[t].map(|v| v.as_f64().to_string()).unwrap_or_default(),
                p.prognostic_scores[t].as_f64().to_string(),
            ];
            row.extend(p.baseline_covariates.iter().map(|v| v.as_f64().to_string()));
            wtr.write_record(&row).map_err(csv_io)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Which terms enter the mean model and which covariance structures to try.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub adjust_prognostic: bool,
    /// Indices into the dataset's baseline covariates.
    pub adjust_baseline: Vec<usize>,
    pub covariance_ladder: Vec<CovarianceKind>,
}

impl ModelSpec {
    pub const DEFAULT_LADDER: [CovarianceKind; 3] =
        [CovarianceKind::Unstructured, CovarianceKind::Toeplitz, CovarianceKind::CompoundSymmetry];

    /// Visit means and treatment-by-visit effects only.
    pub fn unadjusted() -> Self {
        Self {
            adjust_prognostic: false,
            adjust_baseline: Vec::new(),
            covariance_ladder: Self::DEFAULT_LADDER.to_vec(),
        }
    }

    /// Adds the time-matched prognostic score interaction.
    pub fn procova() -> Self {
        Self { adjust_prognostic: true, ..Self::unadjusted() }
    }

    pub fn with_baseline(mut self, covariates: Vec<usize>) -> Self {
        self.adjust_baseline = covariates;
        self
    }

    pub fn with_ladder(mut self, ladder: Vec<CovarianceKind>) -> Self {
        self.covariance_ladder = ladder;
        self
    }
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::procova()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnBlock {
    VisitIntercept,
    Treatment,
    PrognosticScore,
    Covariate(usize),
}

/// Column ordering of the visit-interacted design: each block contributes
/// one column per scheduled visit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnLayout {
    pub visit_count: usize,
    pub blocks: Vec<ColumnBlock>,
}

impl ColumnLayout {
    pub fn column_count(&self) -> usize {
        self.visit_count * self.blocks.len()
    }

    pub fn column(&self, block: ColumnBlock, visit: usize) -> Option<usize> {
        let b = self.blocks.iter().position(|&x| x == block)?;
        (visit < self.visit_count).then_some(b * self.visit_count + visit)
    }

    /// Treatment-by-visit coefficient at the final scheduled visit.
    pub fn final_treatment_column(&self) -> usize {
        self.column(ColumnBlock::Treatment, self.visit_count - 1)
            .expect("layout always carries a treatment block")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticipantDesign<T: Real> {
    pub id: String,
    pub arm: Arm,
    /// Zero-based visits with an observed outcome, in increasing order.
    pub observed: Vec<usize>,
    /// One row per observed visit.
    pub x: DMatrix<T>,
    pub y: DVector<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrices<T: Real> {
    visit_count: usize,
    column_labels: Vec<String>,
    layout: Option<ColumnLayout>,
    participants: Vec<ParticipantDesign<T>>,
}

impl<T: Real> DesignMatrices<T> {
    /// Assembles a design from arbitrary per-participant blocks.
    pub fn from_parts(
        visit_count: usize,
        column_labels: Vec<String>,
        participants: Vec<ParticipantDesign<T>>,
    ) -> Result<Self> {
        let p = column_labels.len();
        if participants.is_empty() {
            return Err(Error::InsufficientData("design has no participants".into()));
        }
        for d in &participants {
            let rows = d.observed.len();
            if rows == 0 || d.x.nrows() != rows || d.y.len() != rows || d.x.ncols() != p {
                return Err(Error::Shape(format!(
                    "participant {}: X is {}x{}, y has {} entries, {} observed visits, {p} columns expected",
                    d.id,
                    d.x.nrows(),
                    d.x.ncols(),
                    d.y.len(),
                    rows
                )));
            }
            if d.observed.windows(2).any(|w| w[0] >= w[1]) || d.observed.iter().any(|&t| t >= visit_count) {
                return Err(Error::Index(format!("participant {}: bad observed visit indices", d.id)));
            }
        }
        Ok(Self { visit_count, column_labels, layout: None, participants })
    }

    pub fn visit_count(&self) -> usize {
        self.visit_count
    }

    pub fn column_count(&self) -> usize {
        self.column_labels.len()
    }

    pub fn column_labels(&self) -> &[String] {
        &self.column_labels
    }

    pub fn layout(&self) -> Option<&ColumnLayout> {
        self.layout.as_ref()
    }

    pub fn participants(&self) -> &[ParticipantDesign<T>] {
        &self.participants
    }

    pub fn observation_count(&self) -> usize {
        self.participants.iter().map(|d| d.observed.len()).sum()
    }

    /// Keeps only participants for which `keep` returns true.
    pub fn filter(&self, keep: impl Fn(&ParticipantDesign<T>) -> bool) -> Self {
        Self {
            visit_count: self.visit_count,
            column_labels: self.column_labels.clone(),
            layout: self.layout.clone(),
            participants: self.participants.iter().filter(|d| keep(d)).cloned().collect(),
        }
    }
}

pub fn build_design<T: Real>(data: &TrialDataset<T>, spec: &ModelSpec) -> Result<DesignMatrices<T>> {
    if spec.covariance_ladder.is_empty() {
        return Err(Error::Config("covariance ladder is empty".into()));
    }
    let k = data.covariate_names.len();
    for (i, &c) in spec.adjust_baseline.iter().enumerate() {
        if c >= k {
            return Err(Error::Config(format!("baseline covariate index {c} out of range (dataset has {k})")));
        }
        if spec.adjust_baseline[..i].contains(&c) {
            return Err(Error::Config(format!("baseline covariate index {c} listed twice")));
        }
    }
    let visits = data.visit_count();
    let mut blocks = vec![ColumnBlock::VisitIntercept, ColumnBlock::Treatment];
    if spec.adjust_prognostic {
        blocks.push(ColumnBlock::PrognosticScore);
    }
    blocks.extend(spec.adjust_baseline.iter().map(|&c| ColumnBlock::Covariate(c)));
    let layout = ColumnLayout { visit_count: visits, blocks };
    let p = layout.column_count();

    let mut column_labels = Vec::with_capacity(p);
    for block in &layout.blocks {
        for label in data.schedule.labels() {
            column_labels.push(match block {
                ColumnBlock::VisitIntercept => label.clone(),
                ColumnBlock::Treatment => format!("treatment:{label}"),
                ColumnBlock::PrognosticScore => format!("score:{label}"),
                ColumnBlock::Covariate(c) => format!("{}:{label}", data.covariate_names[*c]),
            });
        }
    }

    let participants = data
        .participants
        .iter()
        .map(|rec| {
            let observed = rec.observed_visits();
            let mut x = DMatrix::<T>::zeros(observed.len(), p);
            let mut y = DVector::<T>::zeros(observed.len());
            let w = T::from_count(rec.arm.indicator() as usize);
            for (row, &t) in observed.iter().enumerate() {
                y[row] = rec.outcomes[t].expect("observed visit");
                for (b, block) in layout.blocks.iter().enumerate() {
                    x[(row, b * visits + t)] = match block {
                        ColumnBlock::VisitIntercept => T::one(),
                        ColumnBlock::Treatment => w,
                        ColumnBlock::PrognosticScore => rec.prognostic_scores[t],
                        ColumnBlock::Covariate(c) => rec.baseline_covariates[*c],
                    };
                }
            }
            ParticipantDesign { id: rec.id.clone(), arm: rec.arm, observed, x, y }
        })
        .collect();

    Ok(DesignMatrices { visit_count: visits, column_labels, layout: Some(layout), participants })
}

/// Pearson correlation between prognostic scores and observed outcomes at
/// one (zero-based) visit, optionally within one arm.
pub fn score_outcome_correlation<T: Real>(data: &TrialDataset<T>, visit: usize, arm_filter: Option<Arm>) -> Result<T> {
    if visit >= data.visit_count() {
        return Err(Error::Index(format!("visit {visit} outside schedule of {}", data.visit_count())));
    }
    let pairs: Vec<(T, T)> = data
        .participants
        .iter()
        .filter(|p| arm_filter.is_none_or(|a| p.arm == a))
        .filter_map(|p| p.outcomes[visit].map(|y| (p.prognostic_scores[visit], y)))
        .collect();
    pearson(&pairs)
}

/// Correlation at every visit; visits where it is undefined come back as errors.
pub fn score_outcome_correlations<T: Real>(data: &TrialDataset<T>, arm_filter: Option<Arm>) -> Vec<Result<T>> {
    (0..data.visit_count()).map(|t| score_outcome_correlation(data, t, arm_filter)).collect()
}

pub(crate) fn pearson<T: Real>(pairs: &[(T, T)]) -> Result<T> {
    if pairs.len() < 3 {
        return Err(Error::InsufficientData(format!("{} complete pairs, need at least 3", pairs.len())));
    }
    let n = T::from_count(pairs.len());
    let (sx, sy) = pairs.iter().fold((T::zero(), T::zero()), |(a, b), &(x, y)| (a + x, b + y));
    let (mx, my) = (sx / n, sy / n);
    let (mut sxx, mut syy, mut sxy) = (T::zero(), T::zero(), T::zero());
    for &(x, y) in pairs {
        let (dx, dy) = (x - mx, y - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx <= T::zero() || syy <= T::zero() {
        return Err(Error::DegenerateVariance("scores or outcomes are constant".into()));
    }
    let r = sxy / (sxx * syy).sqrt();
    Ok(r.max(-T::one()).min(T::one()))
}

/// Randomly retains `round(fraction * n_arm)` participants in each arm,
/// without replacement and independently per arm. Retained records keep
/// their original order and contents.
pub fn subsample_participants<T: Real>(data: &TrialDataset<T>, fraction: f64, seed: u64) -> Result<TrialDataset<T>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Range { name: "fraction", message: format!("{fraction} not in (0, 1]") });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; data.participants.len()];
    for arm in [Arm::Control, Arm::Treatment] {
        let members: Vec<usize> = data
            .participants
            .iter()
            .enumerate()
            .filter(|(_, p)| p.arm == arm)
            .map(|(i, _)| i)
            .collect();
        let target = (fraction * members.len() as f64 + 0.5).floor() as usize;
        if target < 2 {
            return Err(Error::Range {
                name: "fraction",
                message: format!("{arm:?} arm would keep {target} participant(s), need at least 2"),
            });
        }
        for i in index::sample(&mut rng, members.len(), target) {
            keep[members[i]] = true;
        }
    }
    let participants = data
        .participants
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(p, _)| p.clone())
        .collect();
    TrialDataset::new(data.schedule.clone(), participants, data.covariate_names.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rec(id: &str, arm: Arm, y: &[Option<f64>], x: &[f64]) -> ParticipantRecord<f64> {
        ParticipantRecord {
            id: id.into(),
            arm,
            outcomes: y.to_vec(),
            prognostic_scores: x.to_vec(),
            baseline_covariates: vec![],
        }
    }

    fn csv_data(body: &str) -> Result<TrialDataset<f64>> {
        read_dataset(body.as_bytes(), &ColumnMap::default())
    }

    #[test]
    fn loads_complete_two_by_three() {
        let data = csv_data(
            "id,visit,arm,outcome,score\n\
             a,1,0,1.0,0.5\na,2,0,2.0,0.6\na,3,0,3.0,0.7\n\
             b,1,1,1.5,0.1\nb,2,1,2.5,0.2\nb,3,1,3.5,0.3\n",
        )
        .unwrap();
        assert_eq!(data.visit_count(), 3);
        assert_eq!(data.participants().len(), 2);
        assert_eq!(data.participants()[1].arm, Arm::Treatment);
        assert_eq!(data.participants()[0].outcomes[2], Some(3.0));
    }

    #[test]
    fn trailing_missing_outcome_sets_last_visit() {
        let data = csv_data(
            "id,visit,arm,outcome,score\n\
             a,1,0,1.0,0.5\na,2,0,2.0,0.6\na,3,0,,0.7\n\
             b,1,1,1.5,0.1\nb,2,1,2.5,0.2\nb,3,1,3.5,0.3\n",
        )
        .unwrap();
        let a = &data.participants()[0];
        assert_eq!(a.last_observed_visit(), Some(1));
        assert!(a.is_monotone());
    }

    #[test]
    fn score_gap_is_rejected() {
        let err = csv_data(
            "id,visit,arm,outcome,score\n\
             a,1,0,1.0,0.5\na,2,0,2.0,\na,3,0,3.0,0.7\n\
             b,1,1,1.5,0.1\nb,2,1,2.5,0.2\nb,3,1,3.5,0.3\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("non-baseline-derived score pattern"), "{err}");
    }

    #[test]
    fn loader_errors() {
        let dup = csv_data("id,visit,arm,outcome,score\na,1,0,1,1\na,1,0,2,1\nb,1,1,1,1\n").unwrap_err();
        assert!(matches!(dup, Error::Duplicate { visit: 1, .. }));
        let bad_arm = csv_data("id,visit,arm,outcome,score\na,1,2,1,1\n").unwrap_err();
        assert!(matches!(bad_arm, Error::Validation(_)));
        let malformed = csv_data("id,visit,arm,outcome,score\na,1,0,1,1\nb,x,1,1,1\n").unwrap_err();
        assert!(matches!(malformed, Error::Parse { row: 3, .. }), "{malformed:?}");
        let missing_col = csv_data("id,visit,arm,outcome\na,1,0,1\n").unwrap_err();
        assert!(matches!(missing_col, Error::Parse { .. }));
    }

    #[test]
    fn covariates_are_picked_up_and_round_trip() {
        let data = csv_data(
            "id,visit,arm,outcome,score,cov_age\n\
             a,1,0,1.0,0.5,60\na,2,0,2.0,0.6,60\n\
             b,1,1,1.5,0.1,70\nb,2,1,,0.2,70\n",
        )
        .unwrap();
        assert_eq!(data.covariate_names(), ["cov_age"]);
        let mut buf = Vec::new();
        write_dataset(&data, &mut buf).unwrap();
        let again: TrialDataset<f64> = read_dataset(buf.as_slice(), &ColumnMap::default()).unwrap();
        assert_eq!(again, data);
    }

    #[test]
    fn design_blocks_for_treated_participant() {
        let x = [0.5, 0.2, -0.1];
        let data = TrialDataset::new(
            VisitSchedule::numbered(3).unwrap(),
            vec![
                rec("t", Arm::Treatment, &[Some(1.0), Some(2.0), Some(3.0)], &x),
                rec("c", Arm::Control, &[Some(1.0), Some(2.0), None], &x),
            ],
            vec![],
        )
        .unwrap();
        let design = build_design(&data, &ModelSpec::procova()).unwrap();
        assert_eq!(design.column_count(), 9);

        let i3 = DMatrix::<f64>::identity(3, 3);
        let mut expected = DMatrix::<f64>::zeros(3, 9);
        expected.view_mut((0, 0), (3, 3)).copy_from(&i3);
        expected.view_mut((0, 3), (3, 3)).copy_from(&i3);
        expected.view_mut((0, 6), (3, 3)).copy_from(&DMatrix::from_diagonal(&DVector::from_row_slice(&x)));
        assert_eq!(design.participants()[0].x, expected);

        let control = &design.participants()[1];
        assert_eq!(control.x.nrows(), 2);
        assert_eq!(control.x.ncols(), 9);
        assert!(control.x.columns(3, 3).iter().all(|&v| v == 0.0));
        assert_eq!(control.x[(1, 7)], 0.2);
        assert_eq!(control.observed, vec![0, 1]);
    }

    #[test]
    fn design_rejects_bad_spec() {
        let data = TrialDataset::new(
            VisitSchedule::numbered(1).unwrap(),
            vec![rec("a", Arm::Treatment, &[Some(1.0)], &[0.0]), rec("b", Arm::Control, &[Some(1.0)], &[0.0])],
            vec![],
        )
        .unwrap();
        let empty = ModelSpec::procova().with_ladder(vec![]);
        assert!(matches!(build_design(&data, &empty), Err(Error::Config(_))));
        let out_of_range = ModelSpec::procova().with_baseline(vec![0]);
        assert!(matches!(build_design(&data, &out_of_range), Err(Error::Config(_))));
    }

    fn one_visit(pairs: &[(f64, f64)]) -> TrialDataset<f64> {
        let recs = pairs
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| {
                rec(&i.to_string(), if i % 2 == 0 { Arm::Control } else { Arm::Treatment }, &[Some(y)], &[x])
            })
            .collect();
        TrialDataset::new(VisitSchedule::numbered(1).unwrap(), recs, vec![]).unwrap()
    }

    #[test]
    fn correlation_extremes_and_textbook_value() {
        let ys = [1.0, 4.0, 2.0, 8.0, 5.0];
        let same = one_visit(&ys.iter().map(|&y| (y, y)).collect::<Vec<_>>());
        assert_relative_eq!(score_outcome_correlation(&same, 0, None).unwrap(), 1.0, epsilon = 1e-15);
        let flipped = one_visit(&ys.iter().map(|&y| (-y, y)).collect::<Vec<_>>());
        assert_relative_eq!(score_outcome_correlation(&flipped, 0, None).unwrap(), -1.0, epsilon = 1e-15);

        // textbook formula: (n Σxy − Σx Σy) / sqrt((n Σx² − (Σx)²)(n Σy² − (Σy)²))
        let pairs = [
            (1.2, 2.3),
            (2.1, 2.9),
            (3.3, 4.1),
            (0.4, 1.2),
            (5.0, 4.4),
            (2.2, 3.8),
            (4.1, 3.3),
            (3.0, 2.0),
            (1.8, 2.6),
            (2.7, 3.9),
        ];
        let n = pairs.len() as f64;
        let (sx, sy) = pairs.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
        let sxy: f64 = pairs.iter().map(|p| p.0 * p.1).sum();
        let sxx: f64 = pairs.iter().map(|p| p.0 * p.0).sum();
        let syy: f64 = pairs.iter().map(|p| p.1 * p.1).sum();
        let textbook = (n * sxy - sx * sy) / ((n * sxx - sx * sx) * (n * syy - sy * sy)).sqrt();
        let r = score_outcome_correlation(&one_visit(&pairs), 0, None).unwrap();
        assert_relative_eq!(r, textbook, epsilon = 1e-12);
    }

    #[test]
    fn correlation_errors() {
        let constant = one_visit(&[(1.0, 1.0), (1.0, 2.0), (1.0, 3.0)]);
        assert!(matches!(score_outcome_correlation(&constant, 0, None), Err(Error::DegenerateVariance(_))));
        let tiny = one_visit(&[(1.0, 1.0), (2.0, 2.0)]);
        assert!(matches!(score_outcome_correlation(&tiny, 0, None), Err(Error::InsufficientData(_))));
    }

    fn arms(n_control: usize, n_treated: usize) -> TrialDataset<f64> {
        let recs = (0..n_control + n_treated)
            .map(|i| {
                let arm = if i < n_control { Arm::Control } else { Arm::Treatment };
                rec(&format!("p{i}"), arm, &[Some(i as f64)], &[0.0])
            })
            .collect();
        TrialDataset::new(VisitSchedule::numbered(1).unwrap(), recs, vec![]).unwrap()
    }

    #[test]
    fn subsample_counts_and_determinism() {
        let data = arms(340, 173);
        let sub = subsample_participants(&data, 0.847, 11).unwrap();
        assert_eq!(sub.arm_count(Arm::Control), 288);
        assert_eq!(sub.arm_count(Arm::Treatment), 147);
        let again = subsample_participants(&data, 0.847, 11).unwrap();
        assert_eq!(sub, again);
        assert_eq!(subsample_participants(&data, 1.0, 3).unwrap(), data);
        for bad in [0.0, -0.5, 1.5] {
            assert!(matches!(subsample_participants(&data, bad, 1), Err(Error::Range { .. })));
        }
    }
}
