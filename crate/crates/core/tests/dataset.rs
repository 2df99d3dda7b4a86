use std::fs;
use std::path::Path;

use neuromotor_core::gamesync::{estimate_offsets, DEFAULT_ALIGN_THRESHOLD_S};
use neuromotor_core::ingest::{load_manifest, load_trial, validate_dataset};
use neuromotor_core::synth::{gen_cohort, Scenario, SynthSpec, MANIFEST_FILE};

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generated_datasets_validate() {
    for scenario in Scenario::ALL {
        let tmp = tempfile::tempdir().unwrap();
        gen_cohort(&SynthSpec::scenario(scenario, 1), tmp.path()).unwrap();
        let manifest = load_manifest(tmp.path().join(MANIFEST_FILE)).unwrap();
        let report = validate_dataset(&manifest);
        assert!(report.passed, "{scenario:?}: {:?}", report.issues().collect::<Vec<_>>());
        assert_eq!(report.error_count(), 0);
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    let spec = SynthSpec::scenario(Scenario::Minimal, 7);
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen_cohort(&spec, a.path()).unwrap();
    gen_cohort(&spec, b.path()).unwrap();
    gen_cohort(&SynthSpec::scenario(Scenario::Minimal, 8), c.path()).unwrap();
    assert_eq!(tree(a.path()), tree(b.path()));
    assert_ne!(tree(a.path()), tree(c.path()));
}

#[test]
fn planted_offsets_are_recovered_from_files() {
    let tmp = tempfile::tempdir().unwrap();
    let mut spec = SynthSpec::scenario(Scenario::Cohort, 3);
    spec.healthy = 1;
    spec.post_stroke = 0;
    spec.duration_s = 4.0;
    let (_, truth) = gen_cohort(&spec, tmp.path()).unwrap();
    let manifest = load_manifest(tmp.path().join(MANIFEST_FILE)).unwrap();
    let participant = &truth.participants[0];
    for (condition, planted) in &participant.offsets {
        let trials: Vec<_> = manifest
            .trials
            .iter()
            .filter(|e| e.participant == participant.id && e.condition == *condition)
            .map(|e| load_trial(&manifest, e).unwrap())
            .collect();
        let est = estimate_offsets(&trials, manifest.scaling_factor, DEFAULT_ALIGN_THRESHOLD_S).unwrap();
        for axis in 0..3 {
            assert!(
                (est.offsets[axis] - planted[axis]).abs() < 0.1,
                "{condition:?} axis {axis}: {} vs {}",
                est.offsets[axis],
                planted[axis]
            );
        }
    }
}
