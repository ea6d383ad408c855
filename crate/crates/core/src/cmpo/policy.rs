//! Tabular softmax policy over response templates.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::CmpoError;
use crate::env::{AgentAction, AgentPolicy, ActionChoice, Decision, EnvState, PolicyOutput, TurnSnapshot};
use crate::scenario::DemandKind;

/// A canned agent move: what to say and which decision to take.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionTemplate {
    pub name: String,
    pub response: String,
    pub decision: Decision,
}

impl ActionTemplate {
    fn new(name: &str, response: &str, decision: Decision) -> Self {
        ActionTemplate {
            name: name.into(),
            response: response.into(),
            decision,
        }
    }

    pub fn ask_info() -> Self {
        Self::new("ask_info", "Could you share a photo or a few details about what went wrong?", Decision::Chat)
    }

    pub fn appease() -> Self {
        Self::new("appease", "I'm so sorry about this, I understand how frustrating it is.", Decision::Chat)
    }

    pub fn offer_voucher() -> Self {
        Self::new("offer_voucher", "I've added a voucher to your account to make this right.", Decision::Voucher)
    }

    pub fn refuse() -> Self {
        Self::new("refuse", "I'm afraid we cannot offer a refund for this order.", Decision::Chat)
    }

    pub fn close() -> Self {
        Self::new("close", "Thanks for your patience, is there anything else I can help with?", Decision::Chat)
    }

    /// ask_info, appease, offer_voucher, refuse, close.
    pub fn standard_set() -> Vec<Self> {
        vec![
            Self::ask_info(),
            Self::appease(),
            Self::offer_voucher(),
            Self::refuse(),
            Self::close(),
        ]
    }
}

/// Evidence gathered × demand kind × cooperativeness bucket (1–2, 3, 4–5).
pub const COOP_BUCKETS: usize = 3;
pub const NUM_FEATURES: usize = 2 * DemandKind::ALL.len() * COOP_BUCKETS;

pub fn feature_index(s: &TurnSnapshot) -> usize {
    let evidence = usize::from(s.evidence_gathered);
    let coop = match s.cooperativeness {
        0..=2 => 0,
        3 => 1,
        _ => 2,
    };
    (evidence * DemandKind::ALL.len() + s.demand.index()) * COOP_BUCKETS + coop
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxPolicy {
    templates: Vec<ActionTemplate>,
    /// Row-major `NUM_FEATURES × templates.len()`.
    logits: Vec<f64>,
    temperature: f64,
}

impl SoftmaxPolicy {
    pub fn new(templates: Vec<ActionTemplate>, temperature: f64) -> Result<Self, CmpoError> {
        if templates.is_empty() {
            return Err(CmpoError::InvalidConfig("policy needs at least one template".into()));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(CmpoError::InvalidConfig(format!("temperature {temperature} must be positive")));
        }
        let vouchers: Vec<_> = templates.iter().filter(|t| t.decision == Decision::Voucher).collect();
        if vouchers.len() > 1 || vouchers.iter().any(|t| t.name != "offer_voucher") {
            return Err(CmpoError::InvalidConfig(
                "offer_voucher must be the only voucher template".into(),
            ));
        }
        let n = NUM_FEATURES * templates.len();
        Ok(SoftmaxPolicy {
            templates,
            logits: vec![0.0; n],
            temperature,
        })
    }

    pub fn standard(temperature: f64) -> Result<Self, CmpoError> {
        Self::new(ActionTemplate::standard_set(), temperature)
    }

    pub fn templates(&self) -> &[ActionTemplate] {
        &self.templates
    }

    pub fn n_actions(&self) -> usize {
        self.templates.len()
    }

    pub fn n_features(&self) -> usize {
        NUM_FEATURES
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn set_logits(&mut self, logits: Vec<f64>) -> Result<(), CmpoError> {
        if logits.len() != self.logits.len() {
            return Err(CmpoError::ShapeMismatch(format!(
                "expected {} logits, got {}",
                self.logits.len(),
                logits.len()
            )));
        }
        self.logits = logits;
        Ok(())
    }

    pub fn same_shape(&self, other: &SoftmaxPolicy) -> bool {
        self.templates == other.templates && self.logits.len() == other.logits.len()
    }

    pub fn row(&self, feature: usize) -> &[f64] {
        let a = self.n_actions();
        &self.logits[feature * a..(feature + 1) * a]
    }

    /// Action probabilities at a feature row (max-shifted softmax).
    pub fn probs(&self, feature: usize) -> Vec<f64> {
        let row = self.row(feature);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row
            .iter()
            .map(|l| ((l - max) / self.temperature).exp())
            .collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    pub fn prob(&self, feature: usize, action: usize) -> f64 {
        self.probs(feature)[action]
    }

    pub fn sample(&self, feature: usize, rng: &mut ChaCha8Rng) -> usize {
        let probs = self.probs(feature);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    }

    pub fn voucher_action(&self) -> Option<usize> {
        self.templates.iter().position(|t| t.decision == Decision::Voucher)
    }

    pub fn action_for(&self, template: usize, snapshot: &TurnSnapshot) -> AgentAction {
        let t = &self.templates[template];
        AgentAction {
            reasoning: format!(
                "turn {}; evidence {}; plan {}",
                snapshot.turn,
                if snapshot.evidence_gathered { "in hand" } else { "missing" },
                t.name
            ),
            response: t.response.clone(),
            decision: t.decision,
        }
    }
}

impl AgentPolicy for SoftmaxPolicy {
    fn act(&self, state: &EnvState, rng: &mut ChaCha8Rng) -> PolicyOutput {
        let snapshot = state.snapshot();
        let feature = feature_index(&snapshot);
        let template = self.sample(feature, rng);
        PolicyOutput {
            raw: self.action_for(template, &snapshot).render(),
            choice: Some(ActionChoice { feature, template }),
        }
    }
}

/// Always picks the same template; handy for scripted baselines and tests.
#[derive(Debug, Clone)]
pub struct TemplatePolicy {
    pub template: ActionTemplate,
}

impl AgentPolicy for TemplatePolicy {
    fn act(&self, state: &EnvState, _rng: &mut ChaCha8Rng) -> PolicyOutput {
        let snapshot = state.snapshot();
        PolicyOutput {
            raw: AgentAction {
                reasoning: String::new(),
                response: self.template.response.clone(),
                decision: self.template.decision,
            }
            .render(),
            choice: Some(ActionChoice {
                feature: feature_index(&snapshot),
                template: 0,
            }),
        }
    }
}
