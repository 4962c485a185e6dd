use criterion::{criterion_group, criterion_main, Criterion};

use geobim_core::ground::{filter_ground, GroundFilterParams};
use geobim_core::instance::{segment_instances, GraphParams};
use geobim_core::pc::{features_for_all, Neighborhood};
use geobim_core::semantic::propagate_labels;
use geobim_core::synth::{generate_synthetic_scene, SceneSpec};
use geobim_core::weak_labels::{generate_weak_labels, LabelerParams};
use geobim_core::SpatialIndex;

fn segmentation(c: &mut Criterion) {
    let scene = generate_synthetic_scene(&SceneSpec { trees: 2, ..SceneSpec::default() }, 42).unwrap();
    let cloud = &scene.cloud;
    let weak = generate_weak_labels(cloud, &GroundFilterParams::default(), &LabelerParams::default()).unwrap();
    let classes = weak.labels.classes();
    let labels = propagate_labels(cloud, &classes, 10).unwrap();

    let mut g = c.benchmark_group("segmentation");
    g.sample_size(10);
    g.bench_function("eigen_features_k20", |b| {
        b.iter(|| features_for_all(&SpatialIndex::new(&cloud.points), Neighborhood::K(20)))
    });
    g.bench_function("ground_filter", |b| b.iter(|| filter_ground(cloud, &GroundFilterParams::default()).unwrap()));
    g.bench_function("weak_labels", |b| {
        b.iter(|| generate_weak_labels(cloud, &GroundFilterParams::default(), &LabelerParams::default()).unwrap())
    });
    g.bench_function("propagate_labels", |b| b.iter(|| propagate_labels(cloud, &classes, 10).unwrap()));
    g.bench_function("segment_instances", |b| {
        b.iter(|| segment_instances(cloud, &labels, &GraphParams::default()).unwrap())
    });
    g.finish();
}

criterion_group!(benches, segmentation);
criterion_main!(benches);
