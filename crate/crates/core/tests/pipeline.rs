//! Whole-pipeline checks on a tiny protocol through the public API.

use sasa_core::bench::{run_ablation, run_protocol_mt, Bench, MethodConfig, ProtocolSpec, TargetSelection};
use sasa_core::nets::{ArchConfig, Backbone};
use sasa_core::synthdata::{BatchSizes, DataRole, DomainSpec, TEST};

fn tiny_spec() -> ProtocolSpec {
    let size = (16, 16);
    let mut spec = ProtocolSpec {
        source: DomainSpec { image_size: size, n_subjects: 8, frames_per_subject: 3, ..DomainSpec::source() },
        targets: (1..=2)
            .map(|k| DomainSpec { image_size: size, n_subjects: 4, frames_per_subject: 2, ..DomainSpec::target_preset(k).unwrap() })
            .collect(),
        seeds: vec![3],
        ablation_target: 1,
        ..ProtocolSpec::default()
    };
    spec.stylizer.aux_ratio = 0.25;
    spec.stylizer.wavelet_depth = 1;
    spec.pretrain.arch = ArchConfig {
        backbone: Backbone::Plain { widths: vec![4] },
        image_size: size,
        feature_dim: 8,
        disc_hidden: 4,
        ..ArchConfig::default()
    };
    spec.pretrain.steps = 4;
    spec.pretrain.batch_source = 8;
    spec.train.steps = 4;
    spec.train.batch = BatchSizes { source: 8, target: 2, aux: 2 };
    spec
}

#[test]
fn prepared_data_respects_the_few_shot_rule() {
    let bench = Bench::new(tiny_spec()).unwrap();
    for t in &bench.data.targets {
        assert_eq!(t.fewshot.subjects().len(), 1, "few-shot set is exactly one subject");
        assert_eq!(t.heldout.role, DataRole::Heldout);
        let few = t.fewshot.subjects();
        assert!(t.heldout.subjects().iter().all(|s| !few.contains(s)), "held-out subjects never overlap the few-shot subject");
        assert!(t.heldout.split(TEST).is_some_and(|s| !s.is_empty()));
        assert!(!t.aux.dataset.is_empty());
        assert_eq!(t.aux.provenance.len(), t.aux.dataset.len());
    }
}

#[test]
fn runs_are_deterministic_and_reports_complete() {
    let spec = tiny_spec();
    let mut a = Bench::new(spec.clone()).unwrap();
    let mut b = Bench::new(spec).unwrap();
    let sel = TargetSelection::Single(0);
    let ra = a.run(&MethodConfig::sasa(), &sel, 3).unwrap().clone();
    let rb = b.run(&MethodConfig::sasa(), &sel, 3).unwrap().clone();
    assert_eq!(ra.scores, rb.scores);
    assert_eq!(ra.log, rb.log);
    assert!(ra.models.g.params.iter().zip(&rb.models.g.params).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(ra.log.len(), 4);
    assert!(ra.report.per_domain.contains_key("source"));
    assert!(ra.report.per_domain.contains_key("target-1"));
    assert!(ra.report.threshold.is_finite());
}

#[test]
fn multi_target_and_ablation_cover_every_configuration() {
    let mut bench = Bench::new(tiny_spec()).unwrap();
    let mt = run_protocol_mt(&mut bench, &MethodConfig::table()).unwrap();
    assert_eq!(mt.rows.len(), 3);
    for (_, _, report) in &mt.rows {
        for tag in ["source", "target-1", "target-2"] {
            assert!(report.mean.contains_key(tag), "missing {tag}");
        }
    }
    let rows = run_ablation(&mut bench).unwrap();
    assert_eq!(rows.len(), MethodConfig::all().len());
}
