mod support;

#[test]
fn identity_warp() {
    support::warp_identity().unwrap();
}

#[test]
fn one_pixel_shift() {
    support::warp_one_pixel_shift().unwrap();
}

#[test]
fn behind_camera() {
    support::warp_behind_camera().unwrap();
}

#[test]
fn warp_matches_scalar_oracle() {
    support::warp_random_oracle(60).unwrap();
}

#[test]
fn losses_match_scalar_oracle() {
    support::loss_oracles(200).unwrap();
}

#[test]
fn miou_matches_brute_force() {
    support::miou_oracle(200).unwrap();
}
