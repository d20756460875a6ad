use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use vergepipe_core::curate::{split, DatasetManifest, SplitFractions};
use vergepipe_core::extract::{plan_section, ExtractionParams};
use vergepipe_core::geodesy::{forward_bearing, haversine_distance, GeoPoint};
use vergepipe_core::metrics::{confusion, export_report, report, KappaWeighting, ReportFormat};
use vergepipe_core::pano::{snap_section, PanoIndex, SnapConfig};
use vergepipe_core::survey::Scheme;
use vergepipe_core::synth::{curation_fixture, straight_road_case, SyntheticWorld, WorldSpec};

fn geodesy(c: &mut Criterion) {
    let a = GeoPoint::new(53.30, -0.20).unwrap();
    let b = GeoPoint::new(53.31, -0.18).unwrap();
    c.bench_function("haversine_distance", |bch| bch.iter(|| haversine_distance(black_box(a), black_box(b))));
    c.bench_function("forward_bearing", |bch| bch.iter(|| forward_bearing(black_box(a), black_box(b))));
}

fn snapping(c: &mut Criterion) {
    let case = straight_road_case(0, 40);
    let index = PanoIndex::new(case.panoramas.clone()).unwrap();
    let cfg = SnapConfig::default();
    c.bench_function("snap_section_40_points", |bch| {
        bch.iter(|| snap_section(black_box(&case.section), &index, &cfg))
    });

    let world = SyntheticWorld::generate(WorldSpec::default());
    let index = PanoIndex::new(world.panoramas.clone()).unwrap();
    let snapped: Vec<_> = world.sections.iter().map(|s| snap_section(s, &index, &cfg)).collect();
    let params = ExtractionParams::default();
    c.bench_function("plan_world_20_sections", |bch| {
        bch.iter(|| {
            world
                .sections
                .iter()
                .zip(&snapped)
                .map(|(s, r)| plan_section(s, r, &index, Scheme::FourClass, &params, &cfg).unwrap().plan.requests.len())
                .sum::<usize>()
        })
    });
}

fn curation(c: &mut Criterion) {
    let fixture = curation_fixture();
    let manifest = DatasetManifest::from_requests(&fixture.requests, Scheme::FourClass, 0);
    c.bench_function("dedup_5993", |bch| {
        bch.iter_batched(|| manifest.clone(), |mut m| m.dedup(), BatchSize::LargeInput)
    });
    let mut curated = manifest.clone();
    curated.dedup();
    c.bench_function("split_5949_pano_grouped", |bch| {
        bch.iter_batched(
            || curated.clone(),
            |mut m| split(&mut m, SplitFractions::default(), 0, true).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

fn metrics(c: &mut Criterion) {
    let n = 1189;
    let y_true: Vec<u8> = (0..n).map(|i| (i % 4) as u8 + 1).collect();
    let y_pred: Vec<u8> = (0..n).map(|i| if i % 9 == 0 { ((i + 1) % 4) as u8 + 1 } else { (i % 4) as u8 + 1 }).collect();
    c.bench_function("confusion_and_report_1189", |bch| {
        bch.iter(|| {
            let cm = confusion(black_box(&y_true), black_box(&y_pred), 4).unwrap();
            let rep = report(&cm, KappaWeighting::Quadratic, None).unwrap();
            export_report(&rep, ReportFormat::Text)
        })
    });
}

criterion_group!(benches, geodesy, snapping, curation, metrics);
criterion_main!(benches);
