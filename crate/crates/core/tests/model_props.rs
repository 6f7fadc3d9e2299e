use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tridentse::model::{model_forward, Heads, Mode, ModelConfig, ParameterStore, TridentNet};
use tridentse::signal::Waveform;
use tridentse::tensor::Tensor;

fn toy() -> ModelConfig {
    ModelConfig {
        channels: 8,
        kernel: 3,
        tokens_t: 2,
        tokens_f: 3,
        blocks: 1,
        decoder_blocks: 1,
        heads: Heads::uniform(2),
        ffn_hidden: 8,
        posenc_channels: 4,
        ..ModelConfig::tiny()
    }
}

/// A freshly built store whose learnable tensors are redrawn uniformly in `±scale`.
fn scrambled(cfg: &ModelConfig, seed: u64, scale: f32) -> ParameterStore {
    let (_, mut store) = TridentNet::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for id in store.learnable_ids() {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::from_fn(shape, |_| rng.random_range(-scale..scale));
    }
    store
}

fn signal(seed: u64, len: usize, amp: f32) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform::from_samples((0..len).map(|_| rng.random_range(-amp..amp)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn mask_never_exceeds_unit_modulus(seed in any::<u64>(), scale in 0.01f32..3.0, amp in 1e-3f32..1.0, len in 320usize..1200) {
        let cfg = toy();
        let store = scrambled(&cfg, seed, scale);
        let out = model_forward(&signal(seed, len, amp), &cfg, &store, Mode::Train, false).unwrap();
        for z in out.mask.data().chunks_exact(2) {
            prop_assert!(z[0].hypot(z[1]) <= 1.0 + 1e-6);
        }
        prop_assert_eq!(out.enhanced.len(), len);
    }

    #[test]
    fn attention_rows_are_normalized(seed in any::<u64>(), scale in 0.01f32..3.0, len in 320usize..1200) {
        let cfg = toy();
        let store = scrambled(&cfg, seed, scale);
        let out = model_forward(&signal(seed, len, 0.5), &cfg, &store, Mode::Train, true).unwrap();
        let cap = out.attention.unwrap();
        prop_assert_eq!(cap.records.len(), 6);
        for r in &cap.records {
            prop_assert!(r.max_row_error() <= 1e-5, "{:?}: {}", r.site, r.max_row_error());
        }
    }

    #[test]
    fn forward_is_deterministic(seed in any::<u64>(), len in 320usize..1000) {
        let cfg = toy();
        let (_, store) = TridentNet::init(&cfg, seed).unwrap();
        let w = signal(seed, len, 0.3);
        let a = model_forward(&w, &cfg, &store, Mode::Train, false).unwrap();
        let b = model_forward(&w, &cfg, &store, Mode::Train, false).unwrap();
        let bits = |w: &Waveform| w.samples().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a.enhanced), bits(&b.enhanced));
    }

    #[test]
    fn same_seed_builds_the_same_store(seed in any::<u64>()) {
        let (_, a) = TridentNet::init(&toy(), seed).unwrap();
        let (_, b) = TridentNet::init(&toy(), seed).unwrap();
        for ((_, na, ea), (_, nb, eb)) in a.iter().zip(b.iter()) {
            prop_assert_eq!(na, nb);
            prop_assert_eq!(ea.tensor.data(), eb.tensor.data());
        }
    }
}
