mod support;

use support::{
    causal_cone, check_decentralization_cone, check_permutation_equivariance, check_spatial_oracle,
};

#[test]
fn spatial_tokens_match_delayed_path_enumeration() {
    let worst = check_spatial_oracle(100, 21, 1e-12).unwrap();
    println!("worst relative gap {worst:e}");
}

#[test]
fn prediction_ignores_features_outside_causal_cone() {
    check_decentralization_cone(50, 22).unwrap();
}

#[test]
fn prediction_is_permutation_equivariant() {
    check_permutation_equivariance(100, 23, 1e-10).unwrap();
}

#[test]
fn cone_of_a_path_graph_grows_one_hop_per_frame() {
    // 0 - 1 - 2 - 3 in every frame; node 0, three frames.
    let path = vec![(0, 1), (1, 2), (2, 3)];
    let cone = causal_cone(4, &[path.clone(), path.clone(), path], 0);
    assert_eq!(cone[2], vec![true, true, false, false]);
    assert_eq!(cone[1], vec![true, true, true, false]);
    assert_eq!(cone[0], vec![true, true, true, true]);
}

#[test]
fn cone_follows_snapshot_order() {
    // Edge 1-2 exists only in the newest frame: it cannot carry frame-0
    // information from 2 to 0 through 1 unless 0-1 is present afterwards.
    let cone = causal_cone(3, &[vec![(0, 1)], vec![(1, 2)]], 0);
    assert_eq!(cone[1], vec![true, false, false]);
    assert_eq!(cone[0], vec![true, true, false]);
}
