use std::path::Path;

use wavediff::io::checkpoint::{decode_checkpoint, decode_tensor, encode_checkpoint, encode_tensor, DType};
use wavediff::io::pnm;
use wavediff::io::RunConfig;
use wavediff::rng::RngStream;
use wavediff::training::TrainState;
use wavediff::{wavelet, Tensor};

fn golden(name: &str) -> Vec<u8> {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    std::fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn subband_file_order_is_frozen() {
    let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = wavelet::dwt_packed(&x).unwrap();
    // ll, lh, hl, hh
    assert_eq!(y.data(), &[5.0, 1.0, 2.0, 0.0]);
    let bytes = golden("haar_1x2x2.wdt");
    assert_eq!(encode_tensor(&y, DType::F64), bytes);
    assert_eq!(decode_tensor(&bytes, Path::new("golden")).unwrap(), y);
}

#[test]
fn rgb_subband_file_matches_golden() {
    let x = Tensor::from_fn(&[1, 3, 4, 4], |i| ((i % 48) as f64 % 11.0 - 5.0) / 4.0);
    let y = wavelet::dwt_packed(&x).unwrap();
    assert_eq!(encode_tensor(&y, DType::F64), golden("haar_rgb_4x4.wdt"));
    let back = wavelet::idwt_packed(&decode_tensor(&golden("haar_rgb_4x4.wdt"), Path::new("g")).unwrap()).unwrap();
    assert_eq!(back, x);
}

#[test]
fn pnm_goldens_decode_and_reencode() {
    let ppm = golden("tiny.ppm");
    let img = pnm::decode(&ppm, Path::new("tiny.ppm")).unwrap();
    assert_eq!((img.channels, img.width, img.height), (3, 3, 2));
    assert_eq!(img.data[..3], [0, 128, 255]);
    assert_eq!(pnm::encode(&img), ppm);
    let t = img.to_tensor();
    assert_eq!(t.shape(), &[3, 2, 3]);
    assert_eq!(t.data()[0], -1.0);
    assert_eq!(t.data()[12], 1.0);
    assert_eq!(pnm::Image::from_tensor(&t).unwrap(), img);

    let pgm = pnm::decode(&golden("tiny.pgm"), Path::new("tiny.pgm")).unwrap();
    assert_eq!((pgm.channels, pgm.width, pgm.height), (1, 2, 2));
    assert_eq!(pgm.data, [0, 64, 191, 255]);
}

#[test]
fn image_dwt_roundtrip_within_one_level() {
    let img = pnm::decode(&golden("tiny.pgm"), Path::new("tiny.pgm")).unwrap();
    let x = img.to_tensor().reshape(&[1, 1, 2, 2]).unwrap();
    let bytes = encode_tensor(&wavelet::dwt_packed(&x).unwrap(), DType::F32);
    let y = decode_tensor(&bytes, Path::new("y.wdt")).unwrap();
    let back = pnm::Image::from_tensor(&wavelet::idwt_packed(&y).unwrap()).unwrap();
    assert!(back.data.iter().zip(&img.data).all(|(a, b)| a.abs_diff(*b) <= 1));
}

const CONFIG: &str =
    "# tiny run\nmodel.base_channels = 8\nmodel.channel_mult = 1,2\n  train.batch=4\ntrain.seed = 11\n";

#[test]
fn training_state_roundtrip_is_bitwise() {
    let cfg = RunConfig::parse_with_seed_fallback(CONFIG, None).unwrap();
    let (_, mut state) = TrainState::init(&cfg.model, &cfg.train).unwrap();
    // Give the optimizer moments and counters non-trivial values.
    let mut rng = RngStream::new(1, "fill");
    for t in state.adam_g.m.iter_mut().chain(state.adam_d.v.iter_mut()) {
        *t = rng.normal_tensor(t.shape());
    }
    state.adam_g.t = 7;
    state.step = (1 << 40) + 3;
    state.last_r1 = 0.1 + 0.2;

    let ck = state.to_checkpoint(CONFIG);
    let bytes = encode_checkpoint(&ck, DType::F64);
    let back = decode_checkpoint(&bytes, Path::new("ck")).unwrap();
    assert_eq!(back.config.as_bytes(), CONFIG.as_bytes());
    assert_eq!(back.tensors.len(), ck.tensors.len());
    for ((na, a), (nb, b)) in ck.tensors.iter().zip(&back.tensors) {
        assert_eq!(na, nb);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b), "{na}");
    }
    let (_, restored) = TrainState::from_checkpoint(&cfg.model, &cfg.train, &back).unwrap();
    assert_eq!(restored, state);
    assert_eq!(encode_checkpoint(&restored.to_checkpoint(CONFIG), DType::F64), bytes);
}

#[test]
fn checkpoint_for_another_model_is_rejected() {
    let cfg = RunConfig::parse_with_seed_fallback(CONFIG, None).unwrap();
    let (_, state) = TrainState::init(&cfg.model, &cfg.train).unwrap();
    let ck = state.to_checkpoint(CONFIG);
    let wider = cfg.model.with_base_channels(16);
    assert!(TrainState::from_checkpoint(&wider, &cfg.train, &ck).is_err());
}

#[test]
fn saved_and_loaded_images_use_the_documented_range() {
    let tmp = tempfile::tempdir().unwrap();
    let x = Tensor::new(&[3, 1, 1, 2], vec![0.0, 3.7, -1.0, 1.0, -5.0, 0.5]).unwrap();
    let files = pnm::save_images(&x, tmp.path()).unwrap();
    assert_eq!(files.len(), 3);
    assert!(tmp.path().join("manifest.txt").exists());
    let first = pnm::read_image(&tmp.path().join("sample_0.pgm")).unwrap();
    assert_eq!(first.data, [128, 255]);
    let back = pnm::load_images(tmp.path()).unwrap();
    assert_eq!(back.shape(), &[3, 1, 1, 2]);
    assert_eq!(&back.data()[2..], &[-1.0, 1.0, -1.0, pnm::dequantize(191)]);
}
