//! Persona taxonomies and the stratified scenario sampler.
//!
//! A [`Scenario`] is drawn in five stages: difficulty class, cooperativeness
//! score from the class's categorical distribution, a persona from the bank
//! with that score, a demand type paired by difficulty, and uniformly drawn
//! business signals. Every draw comes from the caller's random stream, so a
//! scenario is a pure function of `(difficulty, bank, seed)`.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Cooperativeness weights for scores 1..=5 in Easy scenarios.
pub const EASY_COOPERATIVENESS: [f64; 5] = [0.1, 0.2, 0.3, 0.3, 0.1];
/// Cooperativeness weights for scores 1..=5 in Hard scenarios.
pub const HARD_COOPERATIVENESS: [f64; 5] = [0.1, 0.3, 0.25, 0.25, 0.1];

/// The reference persona bank shipped with the crate (two variants per score level).
pub const REFERENCE_BANK_JSON: &str = include_str!("../../../data/personas.json");

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("persona bank parse error: {0}")]
    Parse(String),
    #[error("persona bank does not cover cooperativeness levels {0:?}")]
    Coverage(Vec<u8>),
    #[error("invalid persona: {0}")]
    InvalidPersona(String),
    #[error("invalid sampling spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommStyle {
    Verbose,
    Terse,
    Neutral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disclosure {
    High,
    Medium,
    Low,
}

impl Disclosure {
    /// Number of information requests the user needs before handing over evidence.
    pub fn asks_required(self) -> u32 {
        match self {
            Disclosure::High => 1,
            Disclosure::Medium => 2,
            Disclosure::Low => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStyle {
    Collaborative,
    Passive,
    Adversarial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Affect {
    Stable,
    Volatile,
}

/// Hidden behavioural traits of a simulated user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntrinsicPersona {
    pub cooperativeness: u8,
    pub comm_style: CommStyle,
    pub disclosure: Disclosure,
    pub solve_style: SolveStyle,
    pub affect: Affect,
    /// Turns before frustration escalates. Derived as `cooperativeness + 2` when omitted.
    #[serde(default)]
    pub patience_budget: Option<u32>,
}

impl IntrinsicPersona {
    pub fn patience(&self) -> u32 {
        self.patience_budget
            .unwrap_or(u32::from(self.cooperativeness) + 2)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(1..=5).contains(&self.cooperativeness) {
            return Err(ScenarioError::InvalidPersona(format!(
                "cooperativeness {} outside 1..=5",
                self.cooperativeness
            )));
        }
        if self.patience() < 1 {
            return Err(ScenarioError::InvalidPersona(
                "patience_budget must be at least 1".into(),
            ));
        }
        if self.cooperativeness == 1
            && (self.solve_style != SolveStyle::Adversarial || self.affect != Affect::Volatile)
        {
            return Err(ScenarioError::InvalidPersona(
                "cooperativeness 1 requires adversarial solve style and volatile affect".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DemandKind {
    RigidPursuit,
    FeedbackOriented,
    IncentiveOpen,
    PreferenceLearning,
}

impl DemandKind {
    pub const ALL: [DemandKind; 4] = [
        DemandKind::RigidPursuit,
        DemandKind::FeedbackOriented,
        DemandKind::IncentiveOpen,
        DemandKind::PreferenceLearning,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for DemandKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DemandKind::RigidPursuit => "rigid_pursuit",
            DemandKind::FeedbackOriented => "feedback_oriented",
            DemandKind::IncentiveOpen => "incentive_open",
            DemandKind::PreferenceLearning => "preference_learning",
        };
        f.write_str(s)
    }
}

/// The user's resolution objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtrinsicDemand {
    pub kind: DemandKind,
    pub accepts_voucher: bool,
    pub requires_acknowledgment: bool,
}

impl ExtrinsicDemand {
    pub fn of_kind(kind: DemandKind) -> Self {
        let (accepts_voucher, requires_acknowledgment) = match kind {
            DemandKind::RigidPursuit => (false, false),
            DemandKind::FeedbackOriented => (true, true),
            DemandKind::IncentiveOpen => (true, false),
            DemandKind::PreferenceLearning => (true, true),
        };
        ExtrinsicDemand {
            kind,
            accepts_voucher,
            requires_acknowledgment,
        }
    }

    pub fn is_consistent(&self) -> bool {
        match self.kind {
            DemandKind::RigidPursuit => !self.accepts_voucher,
            DemandKind::IncentiveOpen => self.accepts_voucher,
            _ => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueCategory {
    ColdFood,
    Quality,
    MissingItem,
    WrongItem,
    Delay,
}

impl IssueCategory {
    pub const ALL: [IssueCategory; 5] = [
        IssueCategory::ColdFood,
        IssueCategory::Quality,
        IssueCategory::MissingItem,
        IssueCategory::WrongItem,
        IssueCategory::Delay,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusinessSignals {
    pub order_id: String,
    pub merchant: String,
    pub food_items: Vec<String>,
    pub issue_category: IssueCategory,
    /// Currency units, two decimals, in `[5, 50]`.
    pub order_value: f64,
    pub has_photo_evidence: bool,
    pub prior_complaints_flag: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Difficulty {
    Easy,
    Hard,
}

impl Difficulty {
    pub fn cooperativeness_weights(self) -> &'static [f64; 5] {
        match self {
            Difficulty::Easy => &EASY_COOPERATIVENESS,
            Difficulty::Hard => &HARD_COOPERATIVENESS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub difficulty: Difficulty,
    pub persona: IntrinsicPersona,
    pub demand: ExtrinsicDemand,
    pub signals: BusinessSignals,
    pub rng_seed: u64,
}

/// Probabilities pairing each difficulty class with demand types.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemandMix {
    /// P(IncentiveOpen | Easy); the remainder is FeedbackOriented.
    pub easy_incentive_open: f64,
    /// P(RigidPursuit | Hard); the remainder is PreferenceLearning.
    pub hard_rigid_pursuit: f64,
}

impl Default for DemandMix {
    fn default() -> Self {
        DemandMix {
            easy_incentive_open: 0.5,
            hard_rigid_pursuit: 0.7,
        }
    }
}

/// A validated persona bank covering every cooperativeness level.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonaBank {
    personas: Vec<IntrinsicPersona>,
    by_score: [Vec<usize>; 5],
}

impl PersonaBank {
    pub fn new(personas: Vec<IntrinsicPersona>) -> Result<Self, ScenarioError> {
        let mut by_score: [Vec<usize>; 5] = Default::default();
        for (i, p) in personas.iter().enumerate() {
            p.validate()?;
            by_score[usize::from(p.cooperativeness - 1)].push(i);
        }
        let missing: Vec<u8> = (1..=5u8)
            .filter(|s| by_score[usize::from(s - 1)].is_empty())
            .collect();
        if !missing.is_empty() {
            return Err(ScenarioError::Coverage(missing));
        }
        Ok(PersonaBank { personas, by_score })
    }

    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let personas: Vec<IntrinsicPersona> =
            serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        Self::new(personas)
    }

    pub fn reference() -> Self {
        Self::from_json(REFERENCE_BANK_JSON).expect("shipped persona bank is valid")
    }

    pub fn personas(&self) -> &[IntrinsicPersona] {
        &self.personas
    }

    pub fn len(&self) -> usize {
        self.personas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.personas.is_empty()
    }

    fn with_score(&self, score: u8) -> &[usize] {
        &self.by_score[usize::from(score - 1)]
    }
}

/// Load a persona bank from a JSON document (an array of persona records).
pub fn load_persona_bank(path: &Path) -> Result<PersonaBank, ScenarioError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ScenarioError::Parse(format!("{}: {e}", path.display())))?;
    PersonaBank::from_json(&text)
}

const MERCHANTS: [&str; 6] = [
    "Golden Wok",
    "Burger Barn",
    "Pasta Point",
    "Sushi Lane",
    "Taco Corner",
    "Green Bowl",
];

const FOODS: [&str; 10] = [
    "fried rice",
    "cheeseburger",
    "fries",
    "carbonara",
    "salmon roll",
    "miso soup",
    "beef taco",
    "caesar salad",
    "dumplings",
    "iced tea",
];

fn sample_signals<R: Rng + ?Sized>(rng: &mut R) -> BusinessSignals {
    let order_id = format!("ORD-{:08X}", rng.gen::<u32>());
    let merchant = MERCHANTS[rng.gen_range(0..MERCHANTS.len())].to_string();
    let n_items = rng.gen_range(1..=3);
    let food_items = (0..n_items)
        .map(|_| FOODS[rng.gen_range(0..FOODS.len())].to_string())
        .collect();
    let issue_category = IssueCategory::ALL[rng.gen_range(0..IssueCategory::ALL.len())];
    let cents: u32 = rng.gen_range(500..=5000);
    BusinessSignals {
        order_id,
        merchant,
        food_items,
        issue_category,
        order_value: f64::from(cents) / 100.0,
        has_photo_evidence: rng.gen_bool(0.5),
        prior_complaints_flag: rng.gen_bool(0.5),
    }
}

/// Draw a cooperativeness score (1..=5) for the difficulty class.
pub fn sample_cooperativeness<R: Rng + ?Sized>(difficulty: Difficulty, rng: &mut R) -> u8 {
    let dist = WeightedIndex::new(difficulty.cooperativeness_weights())
        .expect("static weights are valid");
    dist.sample(rng) as u8 + 1
}

fn sample_demand<R: Rng + ?Sized>(difficulty: Difficulty, mix: &DemandMix, rng: &mut R) -> DemandKind {
    match difficulty {
        Difficulty::Easy => {
            if rng.gen_bool(mix.easy_incentive_open) {
                DemandKind::IncentiveOpen
            } else {
                DemandKind::FeedbackOriented
            }
        }
        Difficulty::Hard => {
            if rng.gen_bool(mix.hard_rigid_pursuit) {
                DemandKind::RigidPursuit
            } else {
                DemandKind::PreferenceLearning
            }
        }
    }
}

/// Sample one scenario of the given difficulty with the default demand pairing.
pub fn sample_scenario<R: Rng + ?Sized>(
    difficulty: Difficulty,
    bank: &PersonaBank,
    rng: &mut R,
) -> Scenario {
    sample_scenario_with(difficulty, bank, &DemandMix::default(), rng)
}

pub fn sample_scenario_with<R: Rng + ?Sized>(
    difficulty: Difficulty,
    bank: &PersonaBank,
    mix: &DemandMix,
    rng: &mut R,
) -> Scenario {
    let score = sample_cooperativeness(difficulty, rng);
    let candidates = bank.with_score(score);
    let persona = bank.personas[candidates[rng.gen_range(0..candidates.len())]].clone();
    let demand = ExtrinsicDemand::of_kind(sample_demand(difficulty, mix, rng));
    let signals = sample_signals(rng);
    let rng_seed = rng.gen::<u64>();
    Scenario {
        id: format!("{rng_seed:016x}"),
        difficulty,
        persona,
        demand,
        signals,
        rng_seed,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub easy_fraction: f64,
    pub count: usize,
}

impl BatchSpec {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(0.0..=1.0).contains(&self.easy_fraction) {
            return Err(ScenarioError::InvalidSpec(format!(
                "easy_fraction {} outside [0, 1]",
                self.easy_fraction
            )));
        }
        if self.count == 0 {
            return Err(ScenarioError::InvalidSpec("count must be positive".into()));
        }
        Ok(())
    }
}

pub fn sample_batch<R: Rng + ?Sized>(
    spec: &BatchSpec,
    bank: &PersonaBank,
    rng: &mut R,
) -> Result<Vec<Scenario>, ScenarioError> {
    sample_batch_with(spec, bank, &DemandMix::default(), rng)
}

/// Sample `spec.count` scenarios, each Easy with probability `spec.easy_fraction`.
/// Ids are `<seed>-<index>`, unique within the batch.
pub fn sample_batch_with<R: Rng + ?Sized>(
    spec: &BatchSpec,
    bank: &PersonaBank,
    mix: &DemandMix,
    rng: &mut R,
) -> Result<Vec<Scenario>, ScenarioError> {
    spec.validate()?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let difficulty = if rng.gen_bool(spec.easy_fraction) {
            Difficulty::Easy
        } else {
            Difficulty::Hard
        };
        let mut s = sample_scenario_with(difficulty, bank, mix, rng);
        s.id = format!("{}-{i:05}", s.id);
        debug_assert!(seen.insert(s.id.clone()));
        out.push(s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn persona(score: u8) -> IntrinsicPersona {
        let (solve_style, affect) = if score == 1 {
            (SolveStyle::Adversarial, Affect::Volatile)
        } else {
            (SolveStyle::Collaborative, Affect::Stable)
        };
        IntrinsicPersona {
            cooperativeness: score,
            comm_style: CommStyle::Neutral,
            disclosure: Disclosure::Medium,
            solve_style,
            affect,
            patience_budget: None,
        }
    }

    #[test]
    fn minimal_covering_bank() {
        let bank = PersonaBank::new((1..=5).map(persona).collect()).unwrap();
        assert_eq!(bank.len(), 5);
    }

    #[test]
    fn missing_level_is_coverage_error() {
        let err = PersonaBank::new([1, 3, 4, 5].into_iter().map(persona).collect()).unwrap_err();
        assert!(matches!(err, ScenarioError::Coverage(ref m) if m == &vec![2]));
    }

    #[test]
    fn reference_bank_has_ten_profiles() {
        let bank = PersonaBank::reference();
        assert_eq!(bank.len(), 10);
        for s in 1..=5 {
            assert_eq!(bank.with_score(s).len(), 2);
        }
    }

    #[test]
    fn malformed_bank_is_parse_error() {
        assert!(matches!(
            PersonaBank::from_json("[{\"cooperativeness\": 3}]"),
            Err(ScenarioError::Parse(_))
        ));
        assert!(matches!(PersonaBank::from_json("{"), Err(ScenarioError::Parse(_))));
    }

    #[test]
    fn score_one_must_be_hostile() {
        let mut p = persona(1);
        p.affect = Affect::Stable;
        assert!(p.validate().is_err());
    }

    #[test]
    fn patience_defaults_to_score_plus_two() {
        assert_eq!(persona(3).patience(), 5);
    }

    #[test]
    fn sampling_is_deterministic() {
        let bank = PersonaBank::reference();
        let a = sample_scenario(Difficulty::Hard, &bank, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_scenario(Difficulty::Hard, &bank, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn degenerate_fractions() {
        let bank = PersonaBank::reference();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let easy = sample_batch(&BatchSpec { easy_fraction: 1.0, count: 8 }, &bank, &mut rng).unwrap();
        assert!(easy.iter().all(|s| s.difficulty == Difficulty::Easy));
        let hard = sample_batch(&BatchSpec { easy_fraction: 0.0, count: 8 }, &bank, &mut rng).unwrap();
        assert!(hard.iter().all(|s| s.difficulty == Difficulty::Hard));
    }

    #[test]
    fn half_mix_within_three_sigma() {
        let bank = PersonaBank::reference();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch =
            sample_batch(&BatchSpec { easy_fraction: 0.5, count: 10_000 }, &bank, &mut rng).unwrap();
        let easy = batch.iter().filter(|s| s.difficulty == Difficulty::Easy).count();
        assert!((4800..=5200).contains(&easy), "{easy}");
        let ids: BTreeSet<_> = batch.iter().map(|s| &s.id).collect();
        assert_eq!(ids.len(), batch.len());
    }

    #[test]
    fn invalid_batch_specs() {
        let bank = PersonaBank::reference();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for spec in [
            BatchSpec { easy_fraction: 1.5, count: 4 },
            BatchSpec { easy_fraction: -0.1, count: 4 },
            BatchSpec { easy_fraction: 0.5, count: 0 },
        ] {
            assert!(matches!(
                sample_batch(&spec, &bank, &mut rng),
                Err(ScenarioError::InvalidSpec(_))
            ));
        }
    }

    #[test]
    fn hard_scenarios_lean_rigid() {
        let bank = PersonaBank::reference();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 20_000;
        let rigid = (0..n)
            .filter(|_| {
                sample_scenario(Difficulty::Hard, &bank, &mut rng).demand.kind
                    == DemandKind::RigidPursuit
            })
            .count();
        let frac = rigid as f64 / n as f64;
        assert!((frac - 0.7).abs() < 0.015, "{frac}");
    }
}
