//! Scenario files for the reference experiments, compiled into the binary.

use std::path::PathBuf;

use crate::scenario::{parse_scenario_str, Scenario, ScenarioError};

#[derive(Debug, Clone, Copy)]
pub struct Example {
    pub name: &'static str,
    pub description: &'static str,
    pub text: &'static str,
}

pub const EXAMPLES: &[Example] = &[
    Example {
        name: "example1",
        description:
            "21 oscillators, (1,0) to (0,1), 1e5 weighted-projection iterations with checkpoints",
        text: include_str!("../scenarios/example1.toml"),
    },
    Example {
        name: "example1_spectral",
        description: "Example 1 ensemble in closed form, Legendre order 50",
        text: include_str!("../scenarios/example1_spectral.toml"),
    },
    Example {
        name: "example2",
        description: "50 oscillators, star to maple pattern, spectral order 200",
        text: include_str!("../scenarios/example2.toml"),
    },
    Example {
        name: "example3",
        description: "single-input oscillators, star to maple, reachability verdict",
        text: include_str!("../scenarios/example3.toml"),
    },
    Example {
        name: "example4",
        description: "per-channel energy bound M in {5, 10, 25, 50}, 1e4 iterations",
        text: include_str!("../scenarios/example4.toml"),
    },
    Example {
        name: "example5",
        description: "amplitude bound M in {5, 10, 25, 50}, 1e4 iterations",
        text: include_str!("../scenarios/example5.toml"),
    },
    Example {
        name: "example6",
        description: "41 Bloch spins, broadband inversion by iterative linearization",
        text: include_str!("../scenarios/example6.toml"),
    },
];

pub fn find(name: &str) -> Option<&'static Example> {
    EXAMPLES.iter().find(|e| e.name == name)
}

impl Example {
    pub fn file_name(&self) -> String {
        format!("{}.toml", self.name)
    }

    pub fn scenario(&self) -> Result<Scenario, ScenarioError> {
        parse_scenario_str(self.text, self.file_name(), PathBuf::from("."))
    }
}
