//! Named parameter storage with deterministic creation order, plus the
//! initializers for both architectures.

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;

/// One tensor; batch-norm running statistics are stored alongside the
/// weights but marked non-trainable so the optimizer skips them.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub value: ArrayD<f64>,
    pub trainable: bool,
}

/// All model tensors keyed by name. Iteration follows insertion order,
/// which is fixed by the initializers, so optimizer traversal and file
/// layout are deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: IndexMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>, trainable: bool) {
        let prev = self.entries.insert(
            name.to_string(),
            ParamEntry { value, trainable },
        );
        assert!(prev.is_none(), "duplicate parameter name {}", name);
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {}", name))
            .value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {}", name))
            .value
    }

    pub fn try_get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .values()
            .all(|e| e.value.iter().all(|v| v.is_finite()))
    }
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> ArrayD<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&[rows, cols]), data).unwrap()
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            z * std
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::ones(IxDyn(shape))
}

/// One pre-norm encoder stack: per layer, two layer norms, the four
/// attention projections, and the two feed-forward matrices.
fn add_encoder_stack(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    layers: usize,
    cfg: &ModelConfig,
) {
    let d = cfg.d_model;
    for l in 0..layers {
        let p = format!("{}.{}", prefix, l);
        store.insert(&format!("{}.ln1.gamma", p), ones(&[d]), true);
        store.insert(&format!("{}.ln1.beta", p), zeros(&[d]), true);
        for proj in ["wq", "wk", "wv", "wo"] {
            store.insert(&format!("{}.attn.{}", p, proj), xavier(rng, d, d), true);
        }
        for bias in ["bq", "bk", "bv", "bo"] {
            store.insert(&format!("{}.attn.{}", p, bias), zeros(&[d]), true);
        }
        store.insert(&format!("{}.ln2.gamma", p), ones(&[d]), true);
        store.insert(&format!("{}.ln2.beta", p), zeros(&[d]), true);
        store.insert(&format!("{}.ffn.w1", p), xavier(rng, d, cfg.ffn_dim), true);
        store.insert(&format!("{}.ffn.b1", p), zeros(&[cfg.ffn_dim]), true);
        store.insert(&format!("{}.ffn.w2", p), xavier(rng, cfg.ffn_dim, d), true);
        store.insert(&format!("{}.ffn.b2", p), zeros(&[d]), true);
    }
}

/// Batch-norm + single linear layer, the head shape shared by the
/// classification and domain heads.
fn add_bn_linear_head(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d: usize,
    out: usize,
) {
    store.insert(&format!("{}.bn.gamma", prefix), ones(&[d]), true);
    store.insert(&format!("{}.bn.beta", prefix), zeros(&[d]), true);
    store.insert(&format!("{}.bn.running_mean", prefix), zeros(&[d]), false);
    store.insert(&format!("{}.bn.running_var", prefix), ones(&[d]), false);
    store.insert(&format!("{}.linear.w", prefix), xavier(rng, d, out), true);
    store.insert(&format!("{}.linear.b", prefix), zeros(&[out]), true);
}

/// Initializes the datum-wise model. The domain head is drawn LAST from
/// the stream so that encoder and classification-head weights are
/// identical whether or not domain adaptation will be used.
pub fn init_datum_wise_params(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    store.insert(
        "char_embedding",
        normal(
            &mut rng,
            &[cfg.vocab_size, cfg.d_model],
            (cfg.d_model as f64).powf(-0.5),
        ),
        true,
    );
    add_encoder_stack(&mut store, &mut rng, "datum", cfg.datum_layers, cfg);
    add_encoder_stack(&mut store, &mut rng, "row", cfg.row_layers, cfg);
    store.insert("cls_target", normal(&mut rng, &[cfg.d_model], 0.02), true);
    add_bn_linear_head(&mut store, &mut rng, "clf", cfg.d_model, 1);
    add_bn_linear_head(&mut store, &mut rng, "dom", cfg.d_model, cfg.num_domains);
    store
}

/// Initializes the flat-text baseline: character embedding, one global
/// encoder stack (same depth/heads/width as the datum transformer), and
/// the identical head layout. The CLS token is the CLS_TARGET vocabulary
/// entry, embedded like any character.
pub fn init_flat_text_params(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    store.insert(
        "char_embedding",
        normal(
            &mut rng,
            &[cfg.vocab_size, cfg.d_model],
            (cfg.d_model as f64).powf(-0.5),
        ),
        true,
    );
    add_encoder_stack(&mut store, &mut rng, "flat", cfg.datum_layers, cfg);
    add_bn_linear_head(&mut store, &mut rng, "clf", cfg.d_model, 1);
    add_bn_linear_head(&mut store, &mut rng, "dom", cfg.d_model, cfg.num_domains);
    store
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_ordered() {
        let cfg = ModelConfig::with_vocab(20);
        let a = init_datum_wise_params(&cfg, 7);
        let b = init_datum_wise_params(&cfg, 7);
        assert_eq!(a.len(), b.len());
        for ((na, ea), (nb, eb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ea.trainable, eb.trainable);
            assert!(ea
                .value
                .iter()
                .zip(eb.value.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let c = init_datum_wise_params(&cfg, 8);
        assert!(a
            .get("char_embedding")
            .iter()
            .zip(c.get("char_embedding").iter())
            .any(|(x, y)| x != y));
    }

    #[test]
    fn domain_head_is_drawn_last() {
        let mut cfg = ModelConfig::with_vocab(20);
        cfg.num_domains = 3;
        let with3 = init_datum_wise_params(&cfg, 5);
        cfg.num_domains = 7;
        let with7 = init_datum_wise_params(&cfg, 5);
        // Everything before the domain head is unaffected by its width.
        for (name, e) in with3.iter() {
            if name.starts_with("dom.") {
                continue;
            }
            let other = &with7.try_get(name).unwrap().value;
            assert!(e.value.iter().zip(other.iter()).all(|(x, y)| x == y));
        }
        assert_eq!(with3.get("dom.linear.w").shape(), [192, 3]);
        assert_eq!(with7.get("dom.linear.w").shape(), [192, 7]);
    }

    #[test]
    fn running_stats_are_not_trainable() {
        let cfg = ModelConfig::with_vocab(20);
        let store = init_datum_wise_params(&cfg, 1);
        assert!(!store.try_get("clf.bn.running_mean").unwrap().trainable);
        assert!(!store.try_get("clf.bn.running_var").unwrap().trainable);
        assert!(store.try_get("clf.bn.gamma").unwrap().trainable);
        let n_named = store.len();
        // char emb + 2 stacks x 3 layers x 16 tensors + cls_target + 2 heads x 6.
        assert_eq!(n_named, 1 + 2 * 3 * 16 + 1 + 12);
        assert!(store.all_finite());
        assert!(store.num_scalars() > 0);
    }
}
