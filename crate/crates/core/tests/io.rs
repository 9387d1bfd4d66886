use std::fs;

use localmamba::io::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_config, parse_config, save_checkpoint, Config,
    DataConfig, CHECKPOINT_VERSION, MAGIC,
};
use localmamba::model::{Model, ModelConfig, ModelKind};
use localmamba::ndtensor::Element;
use localmamba::train::{decay_mask, parse_idx, write_idx, AdamW, AdamWConfig, Dataset};

fn small() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch_size: Some(4),
        num_classes: 3,
        state_size: 2,
        reduction: 4,
        windows: [2, 4],
        ..ModelConfig::local_vim(8, 2)
    }
}

fn configs_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn roundtrip<T: Element>() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.lmck");
    let model = Model::<T>::build(&small(), 7).unwrap();
    save_checkpoint(&model, None, &path).unwrap();
    let bytes = fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], &[0x4C, 0x4D, 0x43, 0x4B]);
    assert_eq!(&bytes[..4], MAGIC);
    let (back, opt) = load_checkpoint::<T>(&path).unwrap();
    assert!(opt.is_none());
    assert_eq!(back.cfg, model.cfg);
    assert_eq!(back.store.fingerprint(), model.store.fingerprint());
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    roundtrip::<f32>();
    roundtrip::<f64>();
}

#[test]
fn optimizer_moments_survive() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.lmck");
    let mut model = Model::<f32>::build(&small(), 1).unwrap();
    let mask = decay_mask(&model.store);
    let mut opt = AdamW::new(model.store.tensors(), AdamWConfig::default(), mask.clone()).unwrap();
    for t in model.store.tensors_mut() {
        let g: Vec<f32> = (0..t.numel()).map(|i| (i % 7) as f32 * 0.01 - 0.03).collect();
        t.set_grad(g).unwrap();
    }
    opt.step(model.store.tensors_mut(), 1e-3).unwrap();
    save_checkpoint(&model, Some(&opt), &path).unwrap();
    let (back, moments) = load_checkpoint::<f32>(&path).unwrap();
    let mut fresh = AdamW::new(back.store.tensors(), AdamWConfig::default(), mask).unwrap();
    moments.expect("moments saved").restore(&mut fresh).unwrap();
    assert_eq!(fresh.step, 1);
    assert_eq!(fresh.m, opt.m);
    assert_eq!(fresh.v, opt.v);
}

#[test]
fn corrupted_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.lmck");
    let model = Model::<f32>::build(&small(), 0).unwrap();
    save_checkpoint(&model, None, &path).unwrap();
    let good = fs::read(&path).unwrap();

    let mut flipped = good.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x10;
    let e = decode_checkpoint(&flipped).unwrap_err().to_string();
    assert!(e.contains("CRC"), "{e}");

    let mut v2 = good.clone();
    v2[4..8].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    let e = decode_checkpoint(&v2).unwrap_err().to_string();
    assert!(e.contains("unsupported version 2"), "{e}");

    let e = decode_checkpoint(b"NOPE00000000").unwrap_err().to_string();
    assert!(e.contains("magic"), "{e}");
    assert!(decode_checkpoint(&good[..good.len() - 9]).is_err());
}

#[test]
fn renamed_tensor_is_reported_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.lmck");
    let model = Model::<f32>::build(&small(), 0).unwrap();
    save_checkpoint(&model, None, &path).unwrap();
    let mut ck = decode_checkpoint(&fs::read(&path).unwrap()).unwrap();
    let old = ck.tensors[0].name.clone();
    ck.tensors[0].name = "renamed.weight".into();
    fs::write(&path, encode_checkpoint(&ck).unwrap()).unwrap();
    let e = load_checkpoint::<f32>(&path).err().unwrap().to_string();
    assert!(e.contains(&old) && e.contains("renamed.weight"), "{e}");
}

#[test]
fn presets_parse() {
    let vim = load_config(&configs_dir().join("localvim_t.json")).unwrap();
    assert_eq!(vim.model.kind, ModelKind::LocalVim);
    assert_eq!(vim.model.dims, [192]);
    assert_eq!(vim.model.depths, [20]);
    assert!(vim.data.is_none());
    let vm = load_config(&configs_dir().join("localvmamba_t.json")).unwrap();
    assert_eq!(vm.model.dims, [96, 192, 384, 768]);
    assert_eq!(vm.model.depths, [2, 2, 9, 2]);
    let s = load_config(&configs_dir().join("localvmamba_s.json")).unwrap();
    assert_eq!(s.model.depths, [2, 2, 27, 2]);
    let toy = load_config(&configs_dir().join("toy.json")).unwrap();
    assert!(matches!(toy.data, Some(DataConfig::Synth { .. })));
    let again = parse_config(&toy.to_json()).unwrap();
    assert_eq!(again, toy);
}

#[test]
fn config_errors_name_the_problem() {
    let text = fs::read_to_string(configs_dir().join("toy.json")).unwrap();
    let bad = text.replacen("\"dims\"", "\"dimz\"", 1);
    let e = parse_config(&bad).unwrap_err().to_string();
    assert!(e.contains("dimz"), "{e}");

    let mut cfg: Config = parse_config(&text).unwrap();
    cfg.data = Some(DataConfig::Synth {
        grid_cells: 4,
        classes: 4,
        samples: 100,
        seed: 0,
        val_frac: 0.1,
    });
    let e = parse_config(&cfg.to_json()).unwrap_err().to_string();
    assert!(e.contains("image_size"), "{e}");

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.json");
    let e = load_config(&missing).unwrap_err().to_string();
    assert!(e.contains("nowhere.json"), "{e}");
}

#[test]
fn idx_roundtrip() {
    let (h, w, n) = (3, 2, 5);
    let mut images = Vec::new();
    for i in 0..n {
        let px: Vec<f32> = (0..h * w).map(|p| ((i * 37 + p * 11) % 256) as f32 / 255.0).collect();
        for _ in 0..3 {
            images.extend(&px);
        }
    }
    let d = Dataset {
        images,
        labels: vec![0, 2, 1, 2, 0],
        channels: 3,
        height: h,
        width: w,
        num_classes: 3,
    };
    let (ib, lb) = write_idx(&d);
    assert_eq!(&ib[..4], &[0, 0, 8, 3]);
    assert_eq!(&lb[..4], &[0, 0, 8, 1]);
    assert_eq!(parse_idx(&ib, &lb).unwrap(), d);
    assert!(parse_idx(&ib[..ib.len() - 1], &lb).is_err());
    assert!(parse_idx(&lb, &ib).is_err());
}
