mod common;

use common::*;
use domlens::model::GenerateOptions;
use domlens::trace::StreamKind;
use domlens::vdc::{correct_trace, decode_with_vdc, SourceSet, VdcConfig};
use proptest::prelude::*;

fn source() -> impl Strategy<Value = SourceSet> {
    prop::sample::select(SourceSet::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn corrected_tokens_are_dominant_somewhere(
        seed in any::<u64>(),
        layers in 2usize..7,
        validation in source(),
        correction in source(),
        skip_frac in 0.0f64..1.0,
    ) {
        let skip = ((layers as f64) * skip_frac) as usize % layers;
        let trace = random_trace(&mut rng(seed), layers, 6, 5, 20);
        let cfg = VdcConfig { validation, correction, skip_layers: skip, ..Default::default() };
        let out = correct_trace(&trace, &cfg).unwrap();
        for (step, (rep, tok)) in trace.steps.iter().zip(out.reports.iter().zip(&out.corrected_tokens)) {
            let streams = if rep.validated { validation.streams() } else { correction.streams() };
            let found = step.layers[skip..].iter().any(|rec| {
                streams.iter().any(|&s| &rec.streams.get(s)[0].normalized == tok)
            });
            prop_assert!(found, "step {} token {tok} not dominant", step.t);
            if let Some(r) = &rep.replacement {
                prop_assert!(r.layer > skip && r.layer <= layers);
                prop_assert_eq!(r.count, rep.counts.values().copied().max().unwrap());
                let rec = &step.layers[r.layer - 1];
                prop_assert!(correction.streams().iter().any(|&s| rec.streams.get(s)[0].token_id == r.id));
            }
        }
    }

    #[test]
    fn validated_traces_are_fixed_points(seed in any::<u64>(), layers in 2usize..7, validation in source()) {
        let mut trace = random_trace(&mut rng(seed), layers, 8, 5, 20);
        for (i, step) in trace.steps.iter_mut().enumerate() {
            let stream = validation.streams()[i % validation.streams().len()];
            let layer = i % layers;
            step.emitted = step.layers[layer].streams.get(stream)[0].clone();
        }
        let cfg = VdcConfig { validation, ..Default::default() };
        let out = correct_trace(&trace, &cfg).unwrap();
        prop_assert_eq!(out.num_replaced(), 0);
        prop_assert_eq!(out.corrected_ids, trace.emitted_ids());
    }

    #[test]
    fn feedback_flag_is_offline_noop(seed in any::<u64>()) {
        let trace = random_trace(&mut rng(seed), 4, 5, 5, 16);
        let on = correct_trace(&trace, &VdcConfig::default()).unwrap();
        let off = correct_trace(&trace, &VdcConfig { feedback: false, ..Default::default() }).unwrap();
        prop_assert_eq!(on, off);
    }
}

#[test]
fn skipping_every_layer_is_rejected() {
    let trace = random_trace(&mut rng(3), 3, 2, 5, 16);
    let cfg = VdcConfig {
        skip_layers: 3,
        ..Default::default()
    };
    assert!(correct_trace(&trace, &cfg).is_err());
}

#[test]
fn online_without_feedback_keeps_greedy_context() {
    for seed in 0..4 {
        let t = toy(4, 100 + seed);
        let opts = GenerateOptions {
            max_new: 10,
            topk: 5,
            ..Default::default()
        };
        let greedy = domlens::generate(&t.model, &t.prompt, &opts, &t.vocab).unwrap();
        let cfg = VdcConfig {
            feedback: false,
            ..Default::default()
        };
        let d = decode_with_vdc(&t.model, &t.prompt, &t.vocab, &opts, &cfg).unwrap();
        assert_eq!(d.trace, greedy);
        let offline = correct_trace(&greedy, &cfg).unwrap();
        assert_eq!(d.outcome, offline);
    }
}

#[test]
fn online_with_feedback_conditions_on_corrections() {
    let mut diverged = 0;
    for seed in 0..6 {
        let t = toy(4, 200 + seed);
        let opts = GenerateOptions {
            max_new: 10,
            topk: 5,
            ..Default::default()
        };
        let cfg = VdcConfig::default();
        let a = decode_with_vdc(&t.model, &t.prompt, &t.vocab, &opts, &cfg).unwrap();
        let b = decode_with_vdc(&t.model, &t.prompt, &t.vocab, &opts, &cfg).unwrap();
        assert_eq!(a, b);
        // step t+1 of the trace is conditioned on the corrected token of step t
        let replay = {
            let mut cache = t.model.new_cache();
            let mut last = None;
            for &tok in &t.prompt.tokens {
                last = Some(t.model.forward_step(&mut cache, tok).unwrap());
            }
            let mut out = Vec::new();
            for &id in &a.outcome.corrected_ids {
                let logits = t.model.output_logits(last.as_ref().unwrap()).unwrap();
                out.push(logits);
                last = Some(t.model.forward_step(&mut cache, id).unwrap());
            }
            out
        };
        for (step, logits) in a.trace.steps.iter().zip(&replay) {
            let best = logits
                .iter()
                .enumerate()
                .fold(0, |b, (i, &x)| if x > logits[b] { i } else { b });
            assert_eq!(step.emitted.token_id, best);
        }
        let greedy = domlens::generate(&t.model, &t.prompt, &opts, &t.vocab).unwrap();
        if greedy.emitted_ids() != a.trace.emitted_ids() {
            diverged += 1;
        }
        assert!(a.trace.steps.iter().all(|s| s.layers.len() == 4
            && s.layers[3].streams.get(StreamKind::LayerOut)[0].token_id == s.emitted.token_id));
    }
    assert!(diverged > 0, "feedback never changed the generated context");
}
