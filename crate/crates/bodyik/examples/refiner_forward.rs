//! Refiner mechanics: assemble multi-person tokens, mask input patches,
//! run the transformer and inspect the residual updates and attention
//! maps.
//!
//! ```sh
//! cargo run --example refiner_forward
//! ```

use bodyik::bodymodel::generate_synthetic_model;
use bodyik::harness::{init_person, synth_scene, FEATURE_PROVIDER_SEED};
use bodyik::ik::C_INIT;
use bodyik::losses::project_ortho;
use bodyik::refiner::{
    assemble_tokens, forward, mask_patches, refine, FeatureProvider, RefinerConfig,
    RefinerWeights, Synthetic2dProvider,
};

fn main() -> bodyik::Result<()> {
    let model = generate_synthetic_model(0, 600)?;
    let scene = synth_scene(&model, 3, 2, 0.02)?;
    let config = RefinerConfig::desk_check();
    println!(
        "config: N={} K={} token width {} ({} with the full 2048 feature slice)",
        config.max_persons,
        config.joints,
        config.d_token(),
        RefinerConfig::paper().d_token()
    );

    // Tokens come from the IK initialization plus the feature channel.
    let provider = Synthetic2dProvider::new(config.feat_dim, FEATURE_PROVIDER_SEED);
    let persons: Vec<_> = scene
        .persons
        .iter()
        .map(|p| {
            let init = init_person(&model, p)?;
            let init2d = project_ortho(&init.joints_abs.root_relative(), &C_INIT);
            Ok((
                init.params.clone(),
                provider.person_features(&p.image_obs2d, &init2d),
            ))
        })
        .collect::<bodyik::Result<_>>()?;
    let input = assemble_tokens(&persons, &config)?;
    println!(
        "tokens: {:?}, occupied {}",
        input.tokens.dim(),
        input.occupied_count(config.joints)
    );

    // Training-style input masking.
    let masked = mask_patches(&input, &config, 11, 0.3)?;
    println!(
        "masked {} of {} occupied tokens",
        masked.mask_flags.iter().filter(|&&f| f).count(),
        masked.occupied_count(config.joints)
    );

    // Forward with random output heads so the deltas are non-trivial.
    let mut weights = RefinerWeights::init(&config, 1)?;
    weights.randomize_heads(2);
    let out = forward(&weights, &input, true)?;
    let delta = &out.deltas[0];
    println!(
        "person 0 deltas: |dtheta| up to {:.4}, dbeta[0] {:+.4}, dcamera {:?}",
        delta
            .theta
            .iter()
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs())),
        delta.beta[0],
        delta.camera.map(|c| (c * 1e4).round() / 1e4),
    );
    let refined = refine(&persons[0].0, delta);
    println!("refined camera: {:?}", refined.camera);

    // Attention maps are exported per layer and head; occupied rows are
    // probability distributions over occupied tokens.
    println!("attention maps: {}", out.attention.len());
    let map = &out.attention[0];
    let row = map.row(0);
    println!(
        "layer 0 head 0, token 0: row sum {:.6}, mass on own person {:.3}",
        row.sum(),
        row.iter().take(config.joints).sum::<f64>()
    );
    Ok(())
}
