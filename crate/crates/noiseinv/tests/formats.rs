use noiseinv::config::RunConfig;
use noiseinv::formats::*;
use noiseinv_core::num::Tensor;

const PROV: Provenance = Provenance { config_hash: 0xabcdef, seed: 7 };

#[test]
fn pgm_header_and_levels() {
    let img = Tensor::new(&[1, 1, 1, 4], vec![-1.0, 0.0, 1.0, 3.0]).unwrap();
    let bytes = encode_pgm(&img, PROV).unwrap();
    let header = format!("P5\n# noiseinv config=0000000000abcdef seed=7 version={CODE_VERSION}\n4 1\n255\n");
    assert_eq!(&bytes[..header.len()], header.as_bytes());
    assert_eq!(&bytes[header.len()..], &[0, 128, 255, 255]);
    let back = decode_pgm(&bytes).unwrap();
    assert_eq!(back.shape(), &[1, 1, 1, 4]);
    assert_eq!(back.data()[0], -1.0);
    assert_eq!(back.data()[2], 1.0);
}

#[test]
fn pgm_quantisation_error_is_half_a_level() {
    let v: Vec<f32> = (0..64).map(|i| -1.0 + i as f32 / 31.5).collect();
    let img = Tensor::new(&[1, 1, 8, 8], v.clone()).unwrap();
    let back = decode_pgm(&encode_pgm(&img, PROV).unwrap()).unwrap();
    for (a, b) in v.iter().zip(back.data()) {
        assert!((a - b).abs() <= 0.5 / 127.5 + 1e-6);
    }
    for g in 0..=255u8 {
        assert_eq!(to_gray(from_gray(g)), g);
    }
}

#[test]
fn mask_pgm_is_black_and_white() {
    let m = Tensor::new(&[1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
    let bytes = encode_mask_pgm(&m, PROV).unwrap();
    assert_eq!(&bytes[bytes.len() - 2..], &[0, 255]);
}

#[test]
fn pgm_rejects_malformed_input() {
    assert!(decode_pgm(b"P2\n1 1\n255\n\x00").is_err());
    assert!(decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
    assert!(decode_pgm(b"P5\n1 1\n65535\n\x00\x00").is_err());
    assert!(decode_pgm(b"P5\n# c\n1 1\n255\n\x07").is_ok());
    let rgb = Tensor::<f32>::zeros(&[1, 3, 2, 2]);
    assert!(encode_pgm(&rgb, PROV).is_err());
}

#[test]
fn csv_and_meta_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("sub/t.csv");
    let rows = vec![vec!["1".to_string(), "0.5".into()], vec!["2".into(), "+ladd".into()]];
    write_csv(&p, &["a", "b"], &rows, PROV, "test").unwrap();
    let (h, r) = read_csv(&p).unwrap();
    assert_eq!(h, ["a", "b"]);
    assert_eq!(r, rows);
    let meta = read_meta(&p).unwrap();
    assert_eq!(meta[0], ("config_hash".to_string(), "0000000000abcdef".to_string()));
    assert_eq!(meta[1].1, "7");
    assert!(!d.path().join("sub/t.csv.tmp").exists());
}

#[test]
fn default_config_round_trips_and_validates() {
    let c = RunConfig::default();
    c.validate().unwrap();
    let back = RunConfig::from_toml(&c.to_toml()).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.hash(), c.hash());
    assert_eq!(RunConfig::from_toml("").unwrap(), c);
    assert_eq!(c.model().unwrap(), noiseinv_core::nets::ModelConfig::default());
}

#[test]
fn config_errors_name_the_key() {
    let e = RunConfig::from_toml("[eval]\ntimng = false\n").unwrap_err().to_string();
    assert!(e.contains("timng"), "{e}");
    let e = RunConfig::from_toml("[eval]\ninits = [\"sideways\"]\n").unwrap_err().to_string();
    assert!(e.contains("eval.inits"), "{e}");
    let e = RunConfig::from_toml("[model]\nactivation = \"tanh\"\n").unwrap_err().to_string();
    assert!(e.contains("model.activation"), "{e}");
    assert!(RunConfig::from_toml("[train.teacher]\nlr = -1.0\n").is_err());
    assert!(RunConfig::from_toml("[data]\nresolution = 7\n").is_err());
}

#[test]
fn hash_tracks_content() {
    let a = RunConfig::default();
    let mut b = a.clone();
    b.eval.seed = 1;
    assert_ne!(a.hash(), b.hash());
    let spaced = RunConfig::from_toml("[eval]\n  seed   =   1\n").unwrap();
    assert_eq!(spaced.hash(), b.hash());
}
