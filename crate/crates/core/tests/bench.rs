use wavediff::accounting::generator_costs;
use wavediff::bench::{bench_sampling, BENCH_HEADER};
use wavediff::diffusion::{make_schedule, sample, CountingDenoiser, GeneratorDenoiser, ScheduleKind};
use wavediff::networks::{Generator, GeneratorSpec};
use wavediff::nn::ParamStore;
use wavediff::rng::RngStream;

fn small() -> (Generator, ParamStore) {
    let spec = GeneratorSpec {
        image_resolution: 16,
        ..GeneratorSpec::desk().with_base_channels(8)
    };
    let mut store = ParamStore::new();
    let gen = Generator::new(&spec, &mut store, &mut RngStream::new(0, "init")).unwrap();
    (gen, store)
}

#[test]
fn call_count_is_per_step_not_per_image() {
    let (gen, store) = small();
    let inner = GeneratorDenoiser {
        generator: &gen,
        params: &store,
    };
    for steps in [2, 4] {
        let sched = make_schedule(steps, ScheduleKind::default_geometric()).unwrap();
        for batch in [1, 2, 4] {
            let den = CountingDenoiser::new(&inner);
            sample(&den, &sched, &[batch, 12, 8, 8], 3).unwrap();
            assert_eq!(den.calls(), steps, "T={steps} batch={batch}");
        }
    }
}

#[test]
fn timings_are_stable_and_reported() {
    let (gen, store) = small();
    let sched = make_schedule(4, ScheduleKind::default_geometric()).unwrap();
    let r = bench_sampling("small", &gen, &store, &sched, 2, 9, 1).unwrap();
    assert_eq!(r.times.len(), 9);
    assert_eq!(r.params, store.count());
    assert_eq!(r.flops, 4 * generator_costs(&gen.spec).flops);
    assert!(r.p50() <= r.p95());
    assert!(r.p95() / r.p50() < 2.0, "p95 {} p50 {}", r.p95(), r.p50());
    let row = r.csv_row();
    assert_eq!(row.split(',').count(), BENCH_HEADER.split(',').count());
    assert!(row.starts_with("small,16,4,"));
}
