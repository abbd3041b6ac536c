mod common;

const INSTANCES: usize = 25;
const TOL: f64 = 1e-9;

#[test]
fn ffl_matches_reference() {
    let d = common::ffl_oracle(INSTANCES);
    assert!(d < TOL, "{d}");
}

#[test]
fn tel_matches_reference() {
    let d = common::tel_oracle(INSTANCES);
    assert!(d < TOL, "{d}");
}

#[test]
fn stacked_graph_layers_match_reference() {
    let d = common::layer_oracle(INSTANCES);
    assert!(d < 1e-10, "{d}");
}

#[test]
fn head_matches_reference() {
    let d = common::head_oracle(INSTANCES);
    assert!(d < TOL, "{d}");
}

#[test]
fn metrics_match_reference() {
    let d = common::metrics_oracle(INSTANCES);
    assert!(d < TOL, "{d}");
}

#[test]
fn adam_matches_reference() {
    let d = common::adam_oracle(INSTANCES);
    assert!(d < TOL, "{d}");
}
