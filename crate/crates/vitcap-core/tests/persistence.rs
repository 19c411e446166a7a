//! Round-trip guarantees for the on-disk formats and the patch-grid shape
//! law.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

use vitcap_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use vitcap_core::ctn::CtnConfig;
use vitcap_core::data::{read_vtim, write_vtim};
use vitcap_core::decoder::DecoderConfig;
use vitcap_core::encoder::{patchify, unpatchify, EncoderConfig};
use vitcap_core::model::{self, ModelConfig};
use vitcap_core::text::Vocab;
use vitcap_core::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn mid_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            image_height: 16,
            image_width: 16,
            patch_size: 4,
            dim: 16,
            depth: 2,
            split_depth: 1,
            heads: 2,
            mlp_ratio: 2,
        },
        ctn: CtnConfig {
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            head_hidden: 16,
            top_k: 4,
            ..CtnConfig::default()
        },
        decoder: DecoderConfig {
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            max_caption_len: 10,
            mask_prob: 0.15,
        },
        vocab_size: 24,
    }
}

fn meta_for(model: ModelConfig) -> CheckpointMeta {
    let words: Vec<String> = (0..model.vocab_size - Vocab::SPECIALS)
        .map(|i| format!("w{i}"))
        .collect();
    let vocab = Vocab::build(words.iter().map(|s| s.as_str()), 1);
    assert_eq!(vocab.len(), model.vocab_size);
    CheckpointMeta {
        config_hash: model.sha256_hex(),
        vocab_hash: vocab.sha256_hex(),
        stage: "concepts".to_string(),
        step: 137,
        vocab: vocab.tokens().to_vec(),
        model,
    }
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let cfg = mid_config();
    let set = model::init_params::<f32>(&cfg, 77).unwrap();
    assert!(
        set.iter().map(|p| p.tensor.data().len()).sum::<usize>() > 1000,
        "model too small to be a meaningful round-trip check"
    );
    let dir = tempdir().unwrap();
    let first = dir.path().join("a.vtck");
    let second = dir.path().join("b.vtck");
    save_checkpoint(&first, &set, &meta_for(cfg)).unwrap();
    let (loaded, meta) = load_checkpoint::<f32>(&first).unwrap();
    save_checkpoint(&second, &loaded, &meta).unwrap();
    let a = std::fs::read(&first).unwrap();
    let b = std::fs::read(&second).unwrap();
    assert_eq!(a, b, "checkpoint bytes changed across a load/save cycle");
    assert_eq!(meta.step, 137);
}

#[test]
fn checkpoint_weights_survive_exactly() {
    let cfg = mid_config();
    let set = model::init_params::<f32>(&cfg, 3).unwrap();
    let dir = tempdir().unwrap();
    let path = dir.path().join("w.vtck");
    save_checkpoint(&path, &set, &meta_for(cfg)).unwrap();
    let (loaded, _) = load_checkpoint::<f32>(&path).unwrap();
    for (a, b) in set.iter().zip(loaded.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.group, b.group);
        let ab: Vec<u32> = a.tensor.data().iter().map(|v| v.to_bits()).collect();
        let bb: Vec<u32> = b.tensor.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(ab, bb, "{} changed", a.name);
    }
}

#[test]
fn checkpoint_loads_across_dtypes() {
    let cfg = mid_config();
    let set32 = model::init_params::<f32>(&cfg, 5).unwrap();
    let dir = tempdir().unwrap();
    let path = dir.path().join("x.vtck");
    save_checkpoint(&path, &set32, &meta_for(cfg)).unwrap();

    // 32-bit values widen exactly.
    let (as64, _) = load_checkpoint::<f64>(&path).unwrap();
    for (a, b) in set32.iter().zip(as64.iter()) {
        for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
            assert_eq!(*x as f64, *y);
        }
    }

    // 64-bit values narrow by rounding, nothing else.
    let set64 = model::init_params::<f64>(&cfg, 5).unwrap();
    let path64 = dir.path().join("y.vtck");
    save_checkpoint(&path64, &set64, &meta_for(cfg)).unwrap();
    let (as32, _) = load_checkpoint::<f32>(&path64).unwrap();
    for (a, b) in set64.iter().zip(as32.iter()) {
        for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
            assert_eq!(*x as f32, *y);
        }
    }
}

#[test]
fn vtim_round_trip_is_byte_exact() {
    let dir = tempdir().unwrap();
    let mut r = rng(12);
    for (i, shape) in [vec![4usize, 6, 3], vec![2, 2, 3], vec![32, 16, 3]]
        .into_iter()
        .enumerate()
    {
        let tensor = Tensor::<f32>::randn(shape, 1.0, &mut r);
        let first = dir.path().join(format!("{i}a.vtim"));
        let second = dir.path().join(format!("{i}b.vtim"));
        write_vtim(&first, &tensor).unwrap();
        let back = read_vtim::<f32>(&first).unwrap();
        assert_eq!(back.shape(), tensor.shape());
        let ab: Vec<u32> = tensor.data().iter().map(|v| v.to_bits()).collect();
        let bb: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(ab, bb);
        write_vtim(&second, &back).unwrap();
        assert_eq!(
            std::fs::read(&first).unwrap(),
            std::fs::read(&second).unwrap()
        );
    }
}

#[test]
fn patch_count_law_holds_for_random_valid_configs() {
    let mut r = rng(40);
    for trial in 0..20 {
        let patch = r.gen_range(1..=8usize);
        let gh = r.gen_range(1..=6usize);
        let gw = r.gen_range(1..=6usize);
        let (h, w) = (patch * gh, patch * gw);
        let image = Tensor::<f32>::randn(vec![h, w, 3], 1.0, &mut r);
        let patches = patchify(&image, patch).unwrap();
        // N = HW / P^2, each row holding P^2 * 3 values.
        assert_eq!(
            patches.shape(),
            &[(h * w) / (patch * patch), patch * patch * 3],
            "trial {trial}: patch {patch}, image {h}x{w}"
        );
        let back = unpatchify(&patches, h, w, patch).unwrap();
        let ab: Vec<u32> = image.data().iter().map(|v| v.to_bits()).collect();
        let bb: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(ab, bb, "trial {trial}: round trip is not exact");
    }
}

#[test]
fn indivisible_image_is_rejected() {
    let image = Tensor::<f32>::randn(vec![9, 8, 3], 1.0, &mut rng(2));
    assert!(patchify(&image, 4).is_err());
    assert!(patchify(&image, 0).is_err());
}
