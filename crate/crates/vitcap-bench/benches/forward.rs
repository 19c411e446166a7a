//! Forward-pass benchmarks: a bare matmul with its backward sweep, the
//! encoder on a desk-size image, and one decoder step.

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vitcap_core::ctn::CtnConfig;
use vitcap_core::decoder::{self, DecoderConfig};
use vitcap_core::encoder::{self, EncoderConfig};
use vitcap_core::model::{self, ModelConfig};
use vitcap_core::{ParamSet, Tape, Tensor};

fn desk_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            image_height: 32,
            image_width: 32,
            patch_size: 4,
            dim: 32,
            depth: 4,
            split_depth: 2,
            heads: 4,
            mlp_ratio: 4,
        },
        ctn: CtnConfig {
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            head_hidden: 32,
            top_k: 8,
            ..CtnConfig::default()
        },
        decoder: DecoderConfig {
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            max_caption_len: 20,
            mask_prob: 0.15,
        },
        vocab_size: 128,
    }
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Tensor::<f32>::randn(vec![64, 64], 0.5, &mut rng);
    let b = Tensor::<f32>::randn(vec![64, 64], 0.5, &mut rng);
    c.bench_function("matmul_64_fwd_bwd", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let va = tape.leaf(a.clone());
            let vb = tape.leaf(b.clone());
            let m = tape.matmul(va, vb).unwrap();
            let s = tape.sum(m).unwrap();
            tape.backward(s).unwrap();
            tape.value(m).data()[0]
        })
    });
}

fn bench_encoder(c: &mut Criterion) {
    let cfg = desk_config();
    let set: ParamSet<f32> = model::init_params(&cfg, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let image = Tensor::<f32>::randn(
        vec![cfg.encoder.image_height, cfg.encoder.image_width, 3],
        0.3,
        &mut rng,
    );
    c.bench_function("encoder_forward_32px", |bench| {
        bench.iter(|| encoder::encode_image(&set, &cfg.encoder, &image).unwrap().last)
    });
}

fn bench_decoder(c: &mut Criterion) {
    let cfg = desk_config();
    let mut set: ParamSet<f32> = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    decoder::init_decoder_params(&mut set, &cfg.decoder, cfg.encoder.dim, cfg.vocab_size, &mut rng)
        .unwrap();
    let visual = Tensor::<f32>::randn(vec![65, cfg.encoder.dim], 0.5, &mut rng);
    let concepts: Vec<u32> = (8..16).collect();
    let caption: Vec<u32> = (16..28).collect();
    c.bench_function("decoder_forward_12tok", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let v = tape.constant(visual.clone());
            let out = decoder::decode_forward(
                &mut tape,
                &set,
                &cfg.decoder,
                cfg.encoder.dim,
                &concepts,
                v,
                &caption,
            )
            .unwrap();
            tape.value(out.logits).data()[0]
        })
    });
}

criterion_group!(benches, bench_matmul, bench_encoder, bench_decoder);
criterion_main!(benches);
