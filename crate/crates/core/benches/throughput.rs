use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use pssf_core::cohort::{generate_cohort, CohortSpec};
use pssf_core::par;
use pssf_core::projector::{simulate, AcquisitionProtocol, Radiograph, ResolutionProfile, SimulationSetup};
use pssf_core::radiomics::{extract_features, RadiomicsConfig, RoiTemplate};

const BATCH: usize = 8;

fn render_and_extract(c: &mut Criterion) {
    let profile = ResolutionProfile::desk();
    let manifest = generate_cohort(&CohortSpec::default_for(&profile, 1)).unwrap();
    let setup = SimulationSetup::for_profile(&profile);
    let records: Vec<_> = manifest.records.iter().filter(|r| r.protocol_name == "reference").take(BATCH).collect();
    let protocol = AcquisitionProtocol::reference(&profile);
    let render = |r: &&pssf_core::cohort::CohortRecord| simulate(&r.morphology, &protocol, &setup, r.image_seed, &r.knee_id).unwrap();

    let mut g = c.benchmark_group("render");
    g.sample_size(10);
    g.bench_function("parallel", |b| b.iter(|| black_box(par::map(&records, render))));
    g.bench_function("sequential", |b| b.iter(|| black_box(par::map_seq(&records, render))));
    g.finish();

    let images: Vec<(Radiograph, _)> = records.iter().map(|r| (render(r), r.side)).collect();
    let cfg = RadiomicsConfig::for_profile(&profile);
    let template = RoiTemplate::synthesize(&protocol, &setup, cfg.template_px).unwrap();
    let extract = |(img, side): &(Radiograph, _)| extract_features(img, *side, &template, &cfg).unwrap();
    let mut g = c.benchmark_group("extract");
    g.sample_size(10);
    g.bench_function("parallel", |b| b.iter(|| black_box(par::map(&images, extract))));
    g.bench_function("sequential", |b| b.iter(|| black_box(par::map_seq(&images, extract))));
    g.finish();
}

criterion_group!(benches, render_and_extract);
criterion_main!(benches);
