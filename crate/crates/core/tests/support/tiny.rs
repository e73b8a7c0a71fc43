//! Seeded tiny models and examples for gradient and decoding checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use revise_core::model::{LanguageMode, Model, ModelConfig};
use revise_core::nn::{grad_check, GradCheckOptions, GradCheckReport};
use revise_core::text::{TokenId, BECAUSE};
use revise_core::train::{example_loss, Example};

/// A small random configuration; every field is drawn from the seed.
pub fn random_config(seed: u64) -> ModelConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = rng.random_range(1..=2);
    ModelConfig {
        image_size: 8,
        patch_size: [2, 4][rng.random_range(0..2)],
        d_model: heads * rng.random_range(2..=4),
        num_queries: rng.random_range(1..=3),
        heads,
        encoder_layers: rng.random_range(1..=2),
        qformer_layers: rng.random_range(1..=2),
        decoder_layers: rng.random_range(1..=2),
        ffn_mult: 2,
        vocab_size: rng.random_range(8..=12),
        max_text_len: 16,
        max_explanation_len: 4,
        max_gen_len: 6,
        beams: 1,
    }
}

pub fn random_image(rng: &mut impl Rng, size: usize) -> Vec<u8> {
    (0..size * size * 3).map(|_| rng.random()).collect()
}

/// Ordinary word ids (past the reserved ones).
pub fn random_words(rng: &mut impl Rng, vocab_size: usize, len: usize) -> Vec<TokenId> {
    (0..len).map(|_| rng.random_range(BECAUSE + 1..vocab_size)).collect()
}

/// The full teacher-forced loss of one image example with explanation
/// feedback, every parameter trainable, checked in f64 against central
/// differences.
pub fn gradient_check_case(seed: u64) -> GradCheckReport {
    let cfg = random_config(seed);
    let mut model: Model<f64> = Model::new(cfg.clone(), seed).unwrap().cast();
    for p in model.params.iter_mut() {
        p.trainable = true;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let image = random_image(&mut rng, cfg.image_size);
    let prompt = random_words(&mut rng, cfg.vocab_size, 3);
    let mut target = random_words(&mut rng, cfg.vocab_size, 1);
    target.push(BECAUSE);
    target.extend(random_words(&mut rng, cfg.vocab_size, 3));
    let mut ex = Example::finetune(&image, &prompt, &target);
    ex.feedback = Some(random_words(&mut rng, cfg.vocab_size, 3));
    ex.mode = if seed.is_multiple_of(2) { LanguageMode::Explicit } else { LanguageMode::Implicit };
    let opts = GradCheckOptions {
        eps: 1e-5,
        max_entries_per_param: Some(24),
    };
    grad_check(&model.params, opts, |g| example_loss(&model, g, &ex)).unwrap()
}
