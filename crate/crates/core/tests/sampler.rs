mod common;

use common::chain_models;
use flowguide::flow::{euler_integrate, FlowArch, FlowModel};
use flowguide::sampler::{guided_sample, initial_latents, GuidanceMode, SamplerConfig, CHAIN_BLOCK};
use flowguide::ErrorKind;
use ndarray::s;

fn small_cfg(mode: GuidanceMode) -> SamplerConfig {
    SamplerConfig { steps: 8, inner_steps: 2, alpha: 0.5, batch: 40, top_k: 10, seed: 3, ..SamplerConfig::default() }
        .with_mode(mode)
}

#[test]
fn unguided_sampling_is_plain_euler_integration() {
    let m = chain_models(1);
    let cfg = small_cfg(GuidanceMode::Unconditional);
    let r = guided_sample(&cfg, &m.flow, &m.vae, &m.predictor).unwrap();
    let z0 = initial_latents(cfg.seed, cfg.batch, 4);
    let euler = euler_integrate(&m.flow, z0.view(), cfg.steps).unwrap();
    assert_eq!(&r.raw_latents, euler.final_state());

    let zero_j = SamplerConfig { mode: GuidanceMode::Manifold, ..cfg.clone() };
    let r2 = guided_sample(&zero_j, &m.flow, &m.vae, &m.predictor).unwrap();
    assert_eq!(r2.raw_latents, r.raw_latents);
}

#[test]
fn chains_do_not_depend_on_batch_size() {
    let m = chain_models(2);
    for mode in [GuidanceMode::Manifold, GuidanceMode::Naive] {
        let big = SamplerConfig { batch: CHAIN_BLOCK + 9, ..small_cfg(mode) };
        let small = SamplerConfig { batch: 10, ..small_cfg(mode) };
        let a = guided_sample(&big, &m.flow, &m.vae, &m.predictor).unwrap();
        let b = guided_sample(&small, &m.flow, &m.vae, &m.predictor).unwrap();
        assert_eq!(a.raw_latents.slice(s![..10, ..]), b.raw_latents);
    }
}

#[test]
fn guidance_moves_latents_and_is_deterministic() {
    let m = chain_models(3);
    let guided = small_cfg(GuidanceMode::Manifold);
    let a = guided_sample(&guided, &m.flow, &m.vae, &m.predictor).unwrap();
    let b = guided_sample(&guided, &m.flow, &m.vae, &m.predictor).unwrap();
    assert_eq!(a, b);
    let plain = guided_sample(&small_cfg(GuidanceMode::Unconditional), &m.flow, &m.vae, &m.predictor).unwrap();
    assert_ne!(a.raw_latents, plain.raw_latents);
    let naive = guided_sample(&small_cfg(GuidanceMode::Naive), &m.flow, &m.vae, &m.predictor).unwrap();
    assert_ne!(a.raw_latents, naive.raw_latents);
}

#[test]
fn selection_is_unique_ranked_and_bounded() {
    let m = chain_models(4);
    let r = guided_sample(&small_cfg(GuidanceMode::Manifold), &m.flow, &m.vae, &m.predictor).unwrap();
    assert!(r.sequences.len() <= 10);
    assert_eq!(r.sequences.len(), r.predictor_scores.len());
    let unique: std::collections::HashSet<_> = r.sequences.iter().collect();
    assert_eq!(unique.len(), r.sequences.len());
    assert!(r.predictor_scores.windows(2).all(|w| w[0] >= w[1]));
    let rescored = m.predictor.score_sequences(&r.sequences).unwrap();
    assert_eq!(rescored, r.predictor_scores);
    assert_eq!(r.shortfall, r.sequences.len() < 10);
    assert_eq!(r.raw_sequences.len(), 40);
    assert_eq!(r.chain_seeds[7].stream, 7);
}

#[test]
fn collapsed_batches_report_shortfall() {
    let m = chain_models(5);
    // with batch == top_k any duplicate decode leaves the selection short
    let cfg = SamplerConfig { batch: 3, top_k: 3, ..small_cfg(GuidanceMode::Unconditional) };
    let r = guided_sample(&cfg, &m.flow, &m.vae, &m.predictor).unwrap();
    let unique: std::collections::HashSet<_> = r.raw_sequences.iter().collect();
    assert_eq!(r.shortfall, unique.len() < 3);
    assert_eq!(r.sequences.len(), unique.len());
}

#[test]
fn mode_and_flow_must_agree() {
    let m = chain_models(6);
    let lp = SamplerConfig { mode: GuidanceMode::LearnedPosterior, ..small_cfg(GuidanceMode::Unconditional) };
    let err = guided_sample(&lp, &m.flow, &m.vae, &m.predictor).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Validation);
    assert!(err.to_string().contains("fitness-conditioned"));

    let cond =
        FlowModel::new(FlowArch { hidden: 10, depth: 2, embedding_dim: 4, ..FlowArch::new(4, true) }, 1).unwrap();
    guided_sample(&lp, &cond, &m.vae, &m.predictor).unwrap();
    assert!(guided_sample(&small_cfg(GuidanceMode::Manifold), &cond, &m.vae, &m.predictor).is_err());

    let wrong_dim = FlowModel::new(FlowArch::new(5, false), 1).unwrap();
    assert!(guided_sample(&small_cfg(GuidanceMode::Manifold), &wrong_dim, &m.vae, &m.predictor).is_err());
}

#[test]
fn sample_result_serializes_sequences_as_text() {
    let m = chain_models(7);
    let r = guided_sample(&small_cfg(GuidanceMode::Manifold), &m.flow, &m.vae, &m.predictor).unwrap();
    let vocab = flowguide::seq::Vocabulary::new("ACDEF").unwrap();
    let json = serde_json::to_value(r.to_json(&vocab)).unwrap();
    assert_eq!(json["config"]["batch"], 40);
    assert_eq!(json["sequences"][0].as_str().unwrap().len(), 6);
    assert_eq!(json["checksums"]["vae"], m.vae.checksum());
}
