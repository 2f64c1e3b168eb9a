mod common;

use common::*;
use domlens::lens::LensMode;
use domlens::model::{GenerateOptions, ModelSpec, Prompt};
use domlens::trace::Grid;
use domlens::{new_model, validate, Error, ModelConfig, Vocab};
use proptest::prelude::*;

fn config() -> impl Strategy<Value = ModelConfig> {
    (
        2usize..6,
        1usize..4,
        1usize..5,
        8usize..40,
        1usize..4,
        1usize..4,
        any::<bool>(),
    )
        .prop_map(
            |(layers, heads, head_dim, vocab, gh, gw, tie)| ModelConfig {
                num_layers: layers,
                hidden_dim: heads * head_dim,
                num_heads: heads,
                ffn_dim: 2 * heads * head_dim + 1,
                vocab_size: vocab,
                max_context: 40,
                grid: Grid { h: gh, w: gw },
                tie_embeddings: tie,
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn generated_traces_are_valid_and_consistent(cfg in config(), seed in any::<u64>(), max_new in 0usize..8) {
        let model = new_model(cfg.clone(), seed).unwrap();
        let vocab = Vocab::synthetic(cfg.vocab_size);
        let prompt = Prompt::synthetic(&cfg, seed as usize % 3, 1 + seed as usize % 4, seed);
        let opts = GenerateOptions { max_new, topk: 5, ..Default::default() };
        let trace = domlens::generate(&model, &prompt, &opts, &vocab).unwrap();
        prop_assert!(validate(&trace).is_empty());
        prop_assert_eq!(trace.steps.len(), max_new);
        for step in &trace.steps {
            let last = &step.layers[cfg.num_layers - 1];
            prop_assert_eq!(last.streams.layer[0].token_id, step.emitted.token_id);
            for rec in &step.layers {
                let grid: f64 = rec.visual_grid.as_ref().unwrap().iter().sum();
                let instr: f64 = rec.instruction_attn.as_ref().unwrap().iter().sum();
                prop_assert!((grid - rec.group_ratio[1]).abs() < 1e-12);
                prop_assert!((instr - rec.group_ratio[2]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn model_file_round_trip_rebuilds_identical_weights() {
    let m = toy(3, 77).model;
    let json = serde_json::to_string(&ModelSpec::of(&m)).unwrap();
    let spec: ModelSpec = serde_json::from_str(&json).unwrap();
    let back = spec.build().unwrap();
    assert_eq!(back.checksum(), m.checksum());
    assert_eq!(back.layers[2].w_down, m.layers[2].w_down);

    let mut tampered = spec.clone();
    tampered.seed += 1;
    assert!(tampered.build().is_err());
}

#[test]
fn seeds_change_weights() {
    assert_ne!(toy(3, 1).model.checksum(), toy(3, 2).model.checksum());
    assert_eq!(toy(3, 1).model.checksum(), toy(3, 1).model.checksum());
}

#[test]
fn context_bound_is_enforced_before_decoding() {
    let mut cfg = toy_config(2);
    cfg.max_context = 14;
    let model = new_model(cfg.clone(), 1).unwrap();
    let vocab = Vocab::synthetic(cfg.vocab_size);
    let prompt = Prompt::synthetic(&cfg, 2, 3, 1);
    let fits = GenerateOptions {
        max_new: 4,
        topk: 5,
        ..Default::default()
    };
    assert_eq!(
        domlens::generate(&model, &prompt, &fits, &vocab)
            .unwrap()
            .steps
            .len(),
        4
    );
    let too_long = GenerateOptions { max_new: 5, ..fits };
    assert!(matches!(
        domlens::generate(&model, &prompt, &too_long, &vocab),
        Err(Error::ContextOverflow { .. })
    ));
}

#[test]
fn topk_bounds() {
    let t = toy(2, 3);
    for (k, ok) in [(4, false), (5, true), (48, true), (49, false)] {
        let opts = GenerateOptions {
            max_new: 2,
            topk: k,
            ..Default::default()
        };
        assert_eq!(
            domlens::generate(&t.model, &t.prompt, &opts, &t.vocab).is_ok(),
            ok,
            "k={k}"
        );
    }
}

#[test]
fn raw_lens_changes_intermediate_scores() {
    let t = toy(3, 8);
    let base = GenerateOptions {
        max_new: 3,
        topk: 5,
        ..Default::default()
    };
    let raw = GenerateOptions {
        lens: LensMode::Raw,
        ..base.clone()
    };
    let a = domlens::generate(&t.model, &t.prompt, &base, &t.vocab).unwrap();
    let b = domlens::generate(&t.model, &t.prompt, &raw, &t.vocab).unwrap();
    assert_ne!(
        a.steps[0].layers[0].streams.attn,
        b.steps[0].layers[0].streams.attn
    );
    assert_eq!(b.meta["lens"], "raw");
}
