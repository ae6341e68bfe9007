use std::fs;
use std::path::Path;

use junction_mpc::sim::{ScenarioConfig, SimError};

use crate::CliError;

/// Scenarios compiled into the binary, addressable by name.
pub const BUNDLED: [(&str, &str); 3] = [
    ("paper_sec5", include_str!("../scenarios/paper_sec5.toml")),
    ("single_pass", include_str!("../scenarios/single_pass.toml")),
    ("empty", include_str!("../scenarios/empty.toml")),
];

/// Loads a bundled scenario by name, or a TOML file by path.
pub fn load_scenario(source: &str) -> Result<ScenarioConfig, CliError> {
    if let Some((_, text)) = BUNDLED.iter().find(|(name, _)| *name == source) {
        return parse_scenario(text, source);
    }
    let path = Path::new(source);
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_scenario(&text, source)
}

pub fn parse_scenario(text: &str, origin: &str) -> Result<ScenarioConfig, CliError> {
    let cfg: ScenarioConfig =
        toml::from_str(text).map_err(|e| CliError::Parse { origin: origin.to_string(), message: e.to_string() })?;
    match cfg.validate() {
        Ok(()) => Ok(cfg),
        Err(SimError::InvalidConfig(p)) => Err(CliError::Invalid(p)),
        Err(e) => Err(e.into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_scenarios_parse() {
        for (name, _) in BUNDLED {
            let cfg = load_scenario(name).unwrap();
            assert_eq!(cfg.name, name);
        }
        assert_eq!(load_scenario("paper_sec5").unwrap().entries.len(), 20);
        assert!(load_scenario("empty").unwrap().entries.is_empty());
    }

    #[test]
    fn negative_gamma_is_rejected() {
        let text = BUNDLED[0].1.replace("gamma = 5.0", "gamma = -5.0");
        match parse_scenario(&text, "neg") {
            Err(CliError::Invalid(p)) => assert!(p.iter().any(|m| m.contains("gamma must be positive"))),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn parse_errors_name_the_location() {
        let text = BUNDLED[0].1.replace("stop_line = 600.0", "stop_line = \"far\"");
        let err = parse_scenario(&text, "bad.toml").unwrap_err().to_string();
        assert!(err.contains("bad.toml") && err.contains("line"), "{err}");
        let text = BUNDLED[0].1.replace("sensor_range = 60.0", "sensor_range = 60.0\nradar = 1.0");
        assert!(parse_scenario(&text, "x").unwrap_err().to_string().contains("radar"));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_scenario("/nonexistent/scenario.toml"), Err(CliError::Io { .. })));
    }
}
