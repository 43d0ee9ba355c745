//! The full-scale preset serialised to TOML is pinned by a checked-in fixture.

use koopman_lorenz::config::{Preset, RunConfig};

const FIXTURE: &str = include_str!("fixtures/full_scale_preset.toml");

#[test]
fn paper_preset_matches_fixture() {
    let from_file = RunConfig::from_toml_over(Preset::Desk, FIXTURE).unwrap();
    assert_eq!(from_file.to_toml(), RunConfig::paper().to_toml());
}

#[test]
fn fixture_is_a_complete_config() {
    let v: toml::Value = toml::from_str(FIXTURE).unwrap();
    let expected: toml::Value = toml::from_str(&RunConfig::paper().to_toml()).unwrap();
    assert_eq!(v, expected);
}
