#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use srki::kb::{build_kb, KbStore, TextEncoder, Triple};
use srki::model::{AdapterSet, Backbone, LayerAdapters, Model, ModelConfig, Vocab};
use srki::numeric::Tensor;

pub const WORDS: [&str; 10] = ["what", "is", "the", "of", "color", "size", "apple", "sky", "red", "blue"];

pub fn tiny_model(layers: usize, width: usize, heads: usize, enc_dim: usize, seed: u64) -> Model {
    let vocab = Vocab::new(WORDS);
    let cfg = ModelConfig { layers, width, heads, vocab: vocab.len(), enc_dim, max_seq: 24, ffn_mult: 2 };
    let enc = TextEncoder::new(enc_dim, seed);
    let bb = Backbone::init(&cfg, &vocab, Some(&enc), seed).unwrap();
    Model::new(cfg, vocab, bb, seed).unwrap()
}

pub fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize, std: f64) -> Tensor {
    let n = Normal::new(0.0, std).unwrap();
    Tensor::matrix(r, c, (0..r * c).map(|_| n.sample(rng)).collect()).unwrap()
}

pub fn random_adapters(model: &Model, seed: u64, std: f64) -> AdapterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, p) = (model.config.width, model.config.enc_dim);
    AdapterSet::from_layers(
        (0..model.config.layers)
            .map(|_| LayerAdapters {
                query: gaussian(&mut rng, d, d, std),
                key: gaussian(&mut rng, p, d, std),
                value: gaussian(&mut rng, p, d, std),
            })
            .collect(),
    )
    .unwrap()
}

pub fn small_kb(model: &Model, count: usize) -> KbStore {
    let subjects = ["apple", "sky", "grass", "sea", "sun", "snow", "coal", "rose"];
    let objects = ["red", "blue", "green", "grey", "gold", "white", "black", "pink"];
    let triples: Vec<Triple> = (0..count)
        .map(|i| Triple::new(subjects[i % 8], if i < 8 { "color" } else { "size" }, objects[(i * 3) % 8]).unwrap())
        .collect();
    build_kb(&triples, false, 5, &model.encoder(), 3).unwrap()
}

pub fn tokens(model: &Model, text: &str) -> Vec<usize> {
    model.vocab.tokenize(text).unwrap()
}
