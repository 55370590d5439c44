//! The bundled six-class toy corpus: trajectory specs for the synthetic
//! generator and the matching knowledge fixture. Two confusable pairs differ
//! only by a small amplitude delta on the moving hand; their motion texts
//! are identical and only the visual texts tell them apart.

use crate::skeleton::{JointTrajectory, SyntheticActionSpec};

pub const TOY_CLASSES: [&str; 6] = [
    "drink from bottle",
    "drink from can",
    "wipe the table",
    "wipe the dishes",
    "wave the hand",
    "kick the ball",
];

/// Confusable pairs of the toy corpus, as index pairs into [`TOY_CLASSES`].
pub const TOY_CONFUSABLE_PAIRS: [(usize, usize); 2] = [(0, 1), (2, 3)];

const AMPLITUDE_DELTA: f64 = 0.05;

fn still_body() -> Vec<JointTrajectory> {
    vec![JointTrajectory::still(); 8]
}

// Joint indices: 0 hip, 1 spine, 2 chest, 3 head, 4 left_hand, 5 right_hand,
// 6 left_foot, 7 right_foot.
fn drink(amplitude: f64) -> Vec<JointTrajectory> {
    let mut t = still_body();
    t[5] = JointTrajectory {
        amplitude,
        frequency: 1.0,
        phase: 0.0,
    };
    t[3] = JointTrajectory {
        amplitude: 0.06,
        frequency: 1.0,
        phase: 0.5,
    };
    t[1] = JointTrajectory {
        amplitude: 0.02,
        frequency: 1.0,
        phase: 0.0,
    };
    t
}

fn wipe(amplitude: f64) -> Vec<JointTrajectory> {
    let mut t = still_body();
    t[5] = JointTrajectory {
        amplitude,
        frequency: 3.0,
        phase: 0.0,
    };
    t[4] = JointTrajectory {
        amplitude: 0.10,
        frequency: 3.0,
        phase: std::f64::consts::FRAC_PI_2,
    };
    t[2] = JointTrajectory {
        amplitude: 0.03,
        frequency: 3.0,
        phase: 0.0,
    };
    t
}

fn wave() -> Vec<JointTrajectory> {
    let mut t = still_body();
    t[5] = JointTrajectory {
        amplitude: 0.45,
        frequency: 5.0,
        phase: 0.0,
    };
    t[3] = JointTrajectory {
        amplitude: 0.03,
        frequency: 5.0,
        phase: 0.0,
    };
    t
}

fn kick() -> Vec<JointTrajectory> {
    let mut t = still_body();
    t[6] = JointTrajectory {
        amplitude: 0.5,
        frequency: 2.0,
        phase: 0.0,
    };
    t[0] = JointTrajectory {
        amplitude: 0.05,
        frequency: 2.0,
        phase: 0.3,
    };
    t[7] = JointTrajectory {
        amplitude: 0.02,
        frequency: 2.0,
        phase: 0.0,
    };
    t
}

pub fn toy_action_specs() -> Vec<SyntheticActionSpec> {
    vec![
        SyntheticActionSpec {
            class_name: TOY_CLASSES[0].to_string(),
            trajectory: drink(0.30),
            confusable_with: Some(TOY_CLASSES[1].to_string()),
        },
        SyntheticActionSpec {
            class_name: TOY_CLASSES[1].to_string(),
            trajectory: drink(0.30 - AMPLITUDE_DELTA),
            confusable_with: Some(TOY_CLASSES[0].to_string()),
        },
        SyntheticActionSpec {
            class_name: TOY_CLASSES[2].to_string(),
            trajectory: wipe(0.28),
            confusable_with: Some(TOY_CLASSES[3].to_string()),
        },
        SyntheticActionSpec {
            class_name: TOY_CLASSES[3].to_string(),
            trajectory: wipe(0.28 - AMPLITUDE_DELTA),
            confusable_with: Some(TOY_CLASSES[2].to_string()),
        },
        SyntheticActionSpec {
            class_name: TOY_CLASSES[4].to_string(),
            trajectory: wave(),
            confusable_with: None,
        },
        SyntheticActionSpec {
            class_name: TOY_CLASSES[5].to_string(),
            trajectory: kick(),
            confusable_with: None,
        },
    ]
}

/// The bundled fixture corpus, shipped with the crate.
pub const FIXTURE_CORPUS_JSON: &str = include_str!("../fixtures/knowledge_v1.json");
