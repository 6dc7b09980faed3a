use wavediff::accounting::{generator_costs, pixel_unet_costs, Comparison, PixelUNetSpec};
use wavediff::diffusion::{make_schedule, sample, CountingDenoiser, GeneratorDenoiser, ScheduleKind};
use wavediff::networks::{preset, presets, Generator, GeneratorSpec};
use wavediff::nn::ParamStore;
use wavediff::rng::RngStream;

fn live_params(spec: &GeneratorSpec) -> usize {
    let mut store = ParamStore::new();
    Generator::new(spec, &mut store, &mut RngStream::new(0, "init")).unwrap();
    store.count()
}

#[test]
fn analytic_parameters_match_instantiated_networks() {
    assert_eq!(
        generator_costs(&GeneratorSpec::desk()).params,
        live_params(&GeneratorSpec::desk())
    );
    for p in presets() {
        let spec = p.spec.with_base_channels(8);
        assert_eq!(generator_costs(&spec).params, live_params(&spec), "{}", p.name);
    }
}

#[test]
fn layer_rows_sum_to_totals() {
    for r in [
        generator_costs(&GeneratorSpec::desk()),
        pixel_unet_costs(&PixelUNetSpec::ddgan_cifar10()),
    ] {
        assert_eq!(r.layers.iter().map(|l| l.params).sum::<usize>(), r.params);
        assert_eq!(r.layers.iter().map(|l| l.flops).sum::<u64>(), r.flops);
        assert!(r.peak_activations > 0);
    }
}

#[test]
fn wavelet_space_needs_a_third_of_the_flops_or_less() {
    let c = Comparison::for_spec(&GeneratorSpec::desk());
    assert!(c.flops_ratio() >= 3.0, "ratio {}", c.flops_ratio());
    for p in presets() {
        let c = Comparison::for_spec(&p.spec);
        assert!(c.flops_ratio() >= 3.0, "{}: {}", p.name, c.flops_ratio());
        assert!(c.memory_ratio() > 1.0, "{}", p.name);
    }
}

#[test]
fn cifar_preset_against_pixel_baseline() {
    let ours = generator_costs(&preset("cifar10").unwrap().spec);
    let base = pixel_unet_costs(&PixelUNetSpec::ddgan_cifar10());
    let ratio = base.flops as f64 / ours.flops as f64;
    let reference = 7.05 / 1.67;
    assert!(
        (ratio / reference - 1.0).abs() <= 0.25,
        "ratio {ratio:.3} vs {reference:.3}"
    );
    // Parameter counts land near the reference 33.37M / 48.43M.
    assert!((ours.params as f64 / 33.37e6 - 1.0).abs() < 0.1, "{}", ours.params);
    assert!((base.params as f64 / 48.43e6 - 1.0).abs() < 0.1, "{}", base.params);
}

#[test]
fn sampler_calls_the_generator_once_per_step() {
    for (name, steps) in [("cifar10", 4), ("celeba256", 2)] {
        let p = preset(name).unwrap();
        assert_eq!(p.steps, steps);
        let mut spec = p.spec.with_base_channels(8);
        // Shrink the image so the check stays cheap; topology is unchanged.
        spec.image_resolution = 2 << spec.levels();
        let mut store = ParamStore::new();
        let gen = Generator::new(&spec, &mut store, &mut RngStream::new(0, "init")).unwrap();
        let inner = GeneratorDenoiser {
            generator: &gen,
            params: &store,
        };
        let den = CountingDenoiser::new(&inner);
        let sched = make_schedule(p.steps, ScheduleKind::default_geometric()).unwrap();
        let r = spec.resolution();
        let x = sample(&den, &sched, &[3, spec.in_channels(), r, r], 7).unwrap();
        assert_eq!(x.shape(), &[3, 3, 2 * r, 2 * r]);
        assert_eq!(den.calls(), steps, "{name}");
    }
}

#[test]
fn halving_resolution_quarters_every_conv() {
    let spec = GeneratorSpec::desk();
    let double = GeneratorSpec {
        image_resolution: 2 * spec.image_resolution,
        attention_resolutions: spec.attention_resolutions.iter().map(|r| 2 * r).collect(),
        ..spec.clone()
    };
    let (a, b) = (generator_costs(&spec), generator_costs(&double));
    assert_eq!(a.layers.len(), b.layers.len());
    let mut convs = 0;
    for (x, y) in a.layers.iter().zip(&b.layers) {
        assert_eq!((&x.name, x.params), (&y.name, y.params));
        if x.kind == "conv" {
            assert_eq!(4 * x.flops, y.flops, "{}", x.name);
            convs += 1;
        }
    }
    assert!(convs > 20);
}
