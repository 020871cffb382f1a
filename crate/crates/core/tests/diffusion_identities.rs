mod common;

#[test]
fn forward_variance_determinism_and_ks() {
    let models = common::toy_models(1);
    common::assert_all(&common::checks::diffusion_identities(&models));
}
