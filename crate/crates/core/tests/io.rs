use gatrans_core::checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes};
use gatrans_core::config::Config;
use gatrans_core::dataset::{
    load_dataset, read_image, save_dataset, synth_dataset, synth_scene, tensor_to_image, ClassPalette, SYNTH_CLASSES,
};
use gatrans_core::models::GtnetConfig;
use gatrans_core::train::{evaluate, TrainState};
use image::{Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> Config {
    let mut c = Config::default();
    c.model = GtnetConfig { stage_widths: vec![8, 16], stage_depths: vec![1, 1], patch_size: 2, reference_size: 32, head_width: 4, ..GtnetConfig::default() };
    c.disc.widths = [4, 8, 8, 1];
    c
}

#[test]
fn config_text_round_trips() {
    let mut cfg = small();
    cfg.train.seed = 17;
    cfg.train.weights.dice = 0.25;
    cfg.train.optimizer.lr = 3e-4;
    cfg.infer.tile = 96;
    cfg.data.dir = "some/where".into();
    let text = cfg.to_text();
    let back = Config::parse(&text).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.to_text(), text);
    assert!(text.contains("train.adversarial_weight = "));
}

#[test]
fn config_accepts_comments_and_partial_files() {
    let cfg = Config::parse("# comment\n\ntrain.epochs = 3\n  infer.mode = stride \n").unwrap();
    assert_eq!(cfg.train.epochs, 3);
    assert_eq!(cfg.infer.mode.as_str(), "stride");
    assert_eq!(cfg.model, Config::default().model);
}

#[test]
fn config_rejects_bad_input() {
    let err = |t: &str| Config::parse(t).unwrap_err().to_string();
    assert!(err("train.epochs = 2\nmodel.colour = 3\n").contains("line 2"));
    assert!(err("model.colour = 3").contains("model.colour"));
    assert!(err("train.seed = 1\ntrain.seed = 2\n").contains("duplicate key train.seed"));
    assert!(err("train.epochs = many").contains("train.epochs"));
    assert!(err("just words").contains("expected key = value"));
    assert!(err("model.num_classes = 4").contains("palette"));
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let cfg = small();
    let state = TrainState::<f32>::new(cfg.clone()).unwrap();
    let bytes = to_bytes(&cfg, &state.g_params, &state.d_params);
    let ck = from_bytes(&bytes).unwrap();
    assert_eq!(ck.config, cfg);
    assert_eq!(to_bytes(&ck.config, &ck.g_params, &ck.d_params), bytes);
    for (a, b) in state.g_params.entries().iter().zip(ck.g_params.entries()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }

    let data = synth_dataset(4, 4, 32, 3).unwrap();
    let before = evaluate(&state.g, &state.g_params, &data.val, &cfg).unwrap();
    let after = evaluate(&ck.g, &ck.g_params, &data.val, &ck.config).unwrap();
    assert_eq!(before, after);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.gatr");
    save_checkpoint(&path, &cfg, &state.g_params, &state.d_params).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(load_checkpoint(&path).unwrap().config, cfg);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let cfg = small();
    let state = TrainState::<f32>::new(cfg.clone()).unwrap();
    let bytes = to_bytes(&cfg, &state.g_params, &state.d_params);
    let err = |b: &[u8]| from_bytes(b).unwrap_err().to_string();

    for at in [12, bytes.len() / 2, bytes.len() - 9] {
        let mut b = bytes.clone();
        b[at] ^= 0x10;
        assert!(err(&b).contains("checksum mismatch"), "flip at {at}");
    }
    let mut b = bytes.clone();
    b[4] = 2;
    assert!(err(&b).contains("format version 2"));
    assert!(from_bytes(&bytes[..bytes.len() - 40]).is_err());
    assert!(err(b"PNG\0abcdabcdabcd").contains("bad magic"));
    assert!(load_checkpoint(std::path::Path::new("/nonexistent/x.gatr")).is_err());
}

#[test]
fn palette_decodes_single_pixel() {
    let p = ClassPalette::default();
    let img = RgbImage::from_pixel(1, 1, Rgb([0, 255, 255]));
    assert_eq!(p.decode(&img).unwrap(), vec![2]);
    let enc = p.encode(&[2], 1, 1).unwrap();
    assert_eq!(enc.get_pixel(0, 0).0, [0, 255, 255]);
}

#[test]
fn unknown_label_color_reports_its_pixel() {
    let p = ClassPalette::default();
    let mut img = RgbImage::from_pixel(3, 2, Rgb([255, 255, 255]));
    img.put_pixel(2, 1, Rgb([1, 2, 3]));
    let err = p.decode(&img).unwrap_err().to_string();
    assert!(err.contains("[1, 2, 3]") && err.contains("row 1, col 2"), "{err}");
    assert!(p.encode(&[7], 1, 1).is_err());
    assert!(ClassPalette::new(vec!["a".into(), "b".into()], vec![[0, 0, 0], [0, 0, 0]]).is_err());
}

#[test]
fn empty_manifest_loads_with_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("manifest.csv"), "split,image,label\n").unwrap();
    let ds = load_dataset(dir.path(), &ClassPalette::default()).unwrap();
    assert!(ds.train.is_empty() && ds.val.is_empty());
    assert_eq!(ds.warnings.len(), 1);
    std::fs::write(dir.path().join("manifest.csv"), "a,b\n").unwrap();
    assert!(load_dataset(dir.path(), &ClassPalette::default()).is_err());
}

#[test]
fn synthetic_scenes_are_deterministic_and_in_range() {
    let a = synth_dataset(6, 2, 32, 5).unwrap();
    let b = synth_dataset(6, 2, 32, 5).unwrap();
    assert_eq!(a.train, b.train);
    assert_eq!(a.val, b.val);
    assert_eq!((a.train.len(), a.val.len()), (4, 2));
    assert_ne!(a.train[0], synth_dataset(6, 2, 32, 6).unwrap().train[0]);
    for s in a.train.iter().chain(&a.val) {
        assert!(s.label.iter().all(|&l| (l as usize) < SYNTH_CLASSES));
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert!(synth_dataset(2, 3, 32, 0).is_err());
}

#[test]
fn every_class_appears_across_scenes() {
    let mut hist = [0usize; SYNTH_CLASSES];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        for &l in &synth_scene(64, &mut rng).unwrap().label {
            hist[l as usize] += 1;
        }
    }
    assert!(hist.iter().all(|&n| n > 0), "{hist:?}");
}

#[test]
fn saved_dataset_loads_back_identically() {
    let ds = synth_dataset(5, 2, 32, 9).unwrap();
    let palette = ClassPalette::default();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &ds, &palette).unwrap();
    let back = load_dataset(dir.path(), &palette).unwrap();
    assert!(back.warnings.is_empty());
    for (orig, loaded) in ds.train.iter().chain(&ds.val).zip(back.train.iter().chain(&back.val)) {
        assert_eq!(orig.label, loaded.label);
        let quantized = tensor_to_image(&orig.image).unwrap();
        assert_eq!(quantized, tensor_to_image(&loaded.image).unwrap());
        assert!(orig.image.max_abs_diff(&loaded.image) <= 0.5 / 255.0 + 1e-6);
    }
    let label_png = image::open(dir.path().join("labels/train_0000.png")).unwrap().to_rgb8();
    let sample = &back.train[0];
    assert_eq!(palette.encode(&sample.label, 32, 32).unwrap(), label_png);
    assert_eq!(read_image(&dir.path().join("images/train_0000.png")).unwrap(), sample.image);
}
