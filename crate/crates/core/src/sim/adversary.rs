//! A device that registers as a weak phone but forwards its puzzles to a
//! strong back-end.
//!
//! Either it submits as soon as the back-end is done, which reveals its
//! speed and ratchets the stored hashrate up to at least the back-end's, or
//! it sits on each solution until the weak phone could plausibly have
//! finished, which costs it the full honest-device delay anyway.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::replay::DEVICE_ID;
use crate::classifier::{train, KnnModel, Label, LabeledExample};
use crate::cookie::ServiceKey;
use crate::error::{ServiceError, SimError};
use crate::graph::FeatureVector;
use crate::hashrate::{DeviceSpecs, ProfileTable};
use crate::service::{ActivityRequest, Clock, ManualClock, Service, ServiceConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeceptionBranch {
    /// Submit when the back-end finishes.
    Reveal,
    /// Hold each solution until the registered device's expected time.
    Conceal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeceptionStep {
    pub difficulty: f64,
    pub penalty_ms: u64,
    pub stored_before: f64,
    pub stored_after: f64,
    /// From puzzle issue to solution submission.
    pub elapsed_ms: u64,
    /// `2qΔ/η` for the registered device, in ms.
    pub honest_expectation_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeceptionReport {
    pub branch: DeceptionBranch,
    pub weak_rate: f64,
    pub strong_rate: f64,
    pub steps: Vec<DeceptionStep>,
}

/// A model under which every feature vector the adversary can produce
/// scores 1.
fn saturated_model() -> KnnModel {
    let far = vec![1e12; FeatureVector::DIM];
    let near = vec![0.0; FeatureVector::DIM];
    let ex = [
        LabeledExample {
            features: near,
            label: Label::Fraud,
            worker_id: None,
        },
        LabeledExample {
            features: far,
            label: Label::Honest,
            worker_id: None,
        },
    ];
    train(&ex, 1).expect("two classes, k = 1")
}

/// Run `activities` fraud-scored activities from a device registered as
/// `weak_model` but solved at `strong_model`'s rate.
pub fn simulate_deception(
    branch: DeceptionBranch,
    weak_model: &str,
    strong_model: &str,
    activities: usize,
    config: ServiceConfig,
) -> Result<DeceptionReport, SimError> {
    let profiles = ProfileTable::default();
    let rate = |m: &str| {
        profiles
            .by_model(m)
            .map(|p| p.reported_hashrate.hps())
            .ok_or_else(|| SimError::Service(ServiceError::Config(format!("no profile for {m}"))))
    };
    let (weak_rate, strong_rate) = (rate(weak_model)?, rate(strong_model)?);
    let weak_class = profiles.by_model(weak_model).expect("checked").cpu_class.clone();

    let start = 1_704_067_200_000;
    let clock = Arc::new(ManualClock::new(start));
    let q = config.shares_required as f64;
    let svc = Service::with_key(config, ServiceKey::new([0x5a; 32]), clock.clone())?;
    svc.set_model(Some(saturated_model()))?;
    svc.register_user("adversary", Some(start))?;
    svc.register_device(
        "adversary",
        &DeviceSpecs {
            device_id: DEVICE_ID.into(),
            model_name: weak_model.into(),
            cpu_class: weak_class,
        },
    )?;
    let stored = || svc.user("adversary").expect("registered").devices[0].hashrate.hps();

    let mut steps = Vec::with_capacity(activities);
    for i in 0..activities {
        let before = stored();
        let t = svc.submit_activity(&ActivityRequest {
            user_id: "adversary".into(),
            device_id: DEVICE_ID.into(),
            subject_id: format!("target{i}"),
            category: Some("games".into()),
            payload: format!("activity {i}").into_bytes(),
        })?;
        let work = 2.0 * q * t.puzzle.difficulty.to_f64();
        let honest_ms = work / weak_rate * 1000.0;
        let elapsed_ms = match branch {
            DeceptionBranch::Reveal => ((work / strong_rate * 1000.0).floor() as u64).max(1),
            DeceptionBranch::Conceal => honest_ms.ceil() as u64,
        };
        clock.set(t.issued_at + elapsed_ms);
        let v = svc.submit_simulated_solution(&t.solution(Vec::new()))?;
        let post = v.post_at.ok_or_else(|| {
            SimError::Service(ServiceError::Malformed(format!("adversary solution rejected: {:?}", v.detail)))
        })?;
        steps.push(DeceptionStep {
            difficulty: t.puzzle.difficulty.to_f64(),
            penalty_ms: t.penalty_ms,
            stored_before: before,
            stored_after: stored(),
            elapsed_ms,
            honest_expectation_ms: honest_ms,
        });
        clock.set(post.max(clock.now_ms()));
    }
    Ok(DeceptionReport {
        branch,
        weak_rate,
        strong_rate,
        steps,
    })
}
