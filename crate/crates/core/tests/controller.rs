use adapedit::backend::toy::ToyBackend;
use adapedit::backend::{Backend, Branch};
use adapedit::controller::{
    analyze, build_schedule, collect_pass, edit_pass, run_edit, run_edit_observed, EditParams, Gate, Prompts,
};
use adapedit::fwt::temporal_scales;
use adapedit::Error;

const C: &str = "a dog standing on the grass";
const C_STAR: &str = "a dog sitting on the grass";

fn params(steps: usize) -> EditParams {
    EditParams {
        steps,
        ..EditParams::default()
    }
}

fn prompts(c: &str, cs: &str) -> Prompts {
    Prompts::new(c, cs, ToyBackend::new().vocabulary()).unwrap()
}

#[test]
fn record_holds_every_layer_of_every_step() {
    let p = prompts(C, C_STAR);
    let pass = collect_pass(&p, &params(2), &mut ToyBackend::new()).unwrap();
    let layers = pass.record.layers.len();
    assert_eq!(layers, 2);
    assert_eq!(pass.record.entries().len(), 2);
    for e in pass.record.entries() {
        for b in Branch::BOTH {
            assert_eq!(e.branch(b).maps.len(), layers);
        }
    }
    assert_eq!(pass.record.entries().iter().map(|e| e.t).collect::<Vec<_>>(), [2, 1]);
}

#[test]
fn records_are_deterministic() {
    let p = prompts(C, C_STAR);
    let a = collect_pass(&p, &params(3), &mut ToyBackend::new()).unwrap();
    let b = collect_pass(&p, &params(3), &mut ToyBackend::new()).unwrap();
    assert_eq!(a.record, b.record);
    assert_eq!(a.original, b.original);
}

#[test]
fn editing_never_touches_the_original_image() {
    let p = prompts(C, C_STAR);
    let pass = collect_pass(&p, &params(8), &mut ToyBackend::new()).unwrap();
    let out = run_edit(C, C_STAR, &params(8), &mut ToyBackend::new()).unwrap();
    assert_eq!(out.original, pass.original);
    assert_ne!(out.edited, out.original);
}

#[test]
fn zero_interpolation_injects_the_recorded_original_maps() {
    let steps = 6;
    let mut p = params(steps);
    p.lambda_s = 0.0;
    let mut injected = Vec::new();
    let out = run_edit_observed(C, C_STAR, &p, &mut ToyBackend::new(), &mut |ev| {
        injected.push((ev.t, ev.layer, ev.head, ev.injected.clone()));
    })
    .unwrap();
    assert_eq!(injected.len(), steps * 2);
    for (t, layer, head, m) in injected {
        let step = out.record.at_step(t).unwrap();
        let recorded = step.original.maps.iter().find(|l| l.layer == layer).unwrap();
        assert_eq!(m, recorded.heads[head]);
    }
    assert_eq!(out.map_divergence, 0.0);
}

#[test]
fn preserved_words_keep_their_original_columns() {
    let steps = 10;
    let p = prompts(C, C_STAR);
    let params = params(steps);
    let pass = collect_pass(&p, &params, &mut ToyBackend::new()).unwrap();
    let mut analysis = analyze(&pass, &p, &params).unwrap();
    // force "on" to preserve for all steps and "grass" to blend throughout
    let on = p.edit.words.iter().position(|w| w == "on").unwrap();
    let grass = p.edit.words.iter().position(|w| w == "grass").unwrap();
    let mut tau = analysis.fwt.scales.clone();
    tau.tau[on] = 1.0;
    tau.tau[grass] = 0.0;
    analysis.schedule = build_schedule(&tau, &p.alignment, steps);
    assert!((1..=steps).all(|t| analysis.schedule.gate(on, t) == Gate::Preserve));

    let on_cols = p.edit.word_spans[on].clone();
    let grass_cols = p.edit.word_spans[grass].clone();
    let mut on_equal = true;
    let mut grass_moved = false;
    edit_pass(&pass, &p, &analysis, &params, &mut ToyBackend::new(), &mut |ev| {
        for r in 0..ev.injected.rows() {
            on_equal &= ev.injected.row(r)[on_cols.clone()] == ev.source.row(r)[on_cols.clone()];
            grass_moved |= ev.injected.row(r)[grass_cols.clone()] != ev.source.row(r)[grass_cols.clone()];
        }
    })
    .unwrap();
    assert!(on_equal);
    assert!(grass_moved);
}

#[test]
fn padding_and_markers_are_never_blended() {
    let p = prompts(C, C_STAR);
    let content = p.edit.content_start()..p.edit.content_end();
    let mut untouched = true;
    run_edit_observed(C, C_STAR, &params(4), &mut ToyBackend::new(), &mut |ev| {
        for r in 0..ev.injected.rows() {
            for q in (0..ev.injected.cols()).filter(|q| !content.contains(q)) {
                untouched &= ev.injected.get(r, q) == ev.source.get(r, q);
            }
        }
    })
    .unwrap();
    assert!(untouched);
}

#[test]
fn lowering_lambda_tau_never_turns_blend_into_preserve() {
    let p = prompts(C, C_STAR);
    let pass = collect_pass(&p, &params(50), &mut ToyBackend::new()).unwrap();
    let a = analyze(&pass, &p, &params(50)).unwrap();
    let lambdas = [2.0f32, 1.5, 1.0, 0.5, 0.25, 0.0];
    let schedules: Vec<_> = lambdas
        .iter()
        .map(|&l| {
            let tau = temporal_scales(&a.fwt.correlation, &p.alignment.key_set, l).unwrap();
            build_schedule(&tau, &p.alignment, 50)
        })
        .collect();
    for pair in schedules.windows(2) {
        for w in 0..pair[0].words() {
            for t in 1..=50 {
                if pair[0].gate(w, t) == Gate::Blend {
                    assert_eq!(pair[1].gate(w, t), Gate::Blend);
                }
            }
        }
    }
}

#[test]
fn identical_prompts_are_a_noop() {
    let out = run_edit(C, C, &params(5), &mut ToyBackend::new()).unwrap();
    assert!(out.is_noop());
    assert_eq!(out.edited, out.original);
}

#[test]
fn insertions_and_deletions_run_end_to_end() {
    for (c, cs) in [
        ("a photo of a cake", "a photo of a chocolate cake"),
        ("a big red barn in a field", "a blue barn in a field"),
        ("a cat", "a watercolor painting of a cat"),
    ] {
        let out = run_edit(c, cs, &params(4), &mut ToyBackend::new()).unwrap();
        let a = out.analysis.as_ref().expect("not a no-op");
        assert_eq!(a.fwt.scales.tau.len(), out.prompts.edit.words.len());
        for k in &out.prompts.alignment.key_set {
            assert_eq!(a.fwt.scales.tau[*k], 0.0);
        }
    }
    // words that only disappear leave nothing to blend toward
    let out = run_edit("a big red barn", "a barn", &params(4), &mut ToyBackend::new()).unwrap();
    assert!(out.is_noop());
}

#[test]
fn per_step_spatial_scales_change_the_result() {
    let mut p = params(6);
    let fixed = run_edit(C, C_STAR, &p, &mut ToyBackend::new()).unwrap();
    p.per_step_spatial = true;
    let dynamic = run_edit(C, C_STAR, &p, &mut ToyBackend::new()).unwrap();
    assert_eq!(fixed.original, dynamic.original);
    assert_ne!(fixed.map_divergence, dynamic.map_divergence);
}

#[test]
fn errors_surface_with_their_kind() {
    let long = vec!["word"; 80].join(" ");
    let err = run_edit(&long, C, &params(2), &mut ToyBackend::new()).unwrap_err();
    assert!(matches!(err, Error::Length { .. }));
    assert_eq!(err.exit_code(), 2);
    assert!(matches!(
        run_edit("", C, &params(2), &mut ToyBackend::new()),
        Err(Error::EmptyPrompt)
    ));
    let bad = EditParams {
        lambda_s: 2.0,
        ..params(2)
    };
    assert!(matches!(
        run_edit(C, C_STAR, &bad, &mut ToyBackend::new()),
        Err(Error::Config(_))
    ));
}
