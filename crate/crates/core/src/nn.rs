//! Named parameter storage and transformer building blocks on the tape.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autograd::{Gradients, Graph, Mat, Var};
use crate::error::{Error, Result};

/// Named parameter arrays in a fixed (sorted) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    arrays: BTreeMap<String, Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.arrays.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.arrays.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.arrays.get_mut(name)
    }

    pub fn expect(&self, name: &str) -> &Mat {
        self.arrays
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.arrays.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Mat)> {
        self.arrays.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.arrays.keys()
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.arrays.values().map(Mat::len).sum()
    }

    /// Same names, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            arrays: self
                .arrays
                .iter()
                .map(|(k, v)| (k.clone(), Mat::zeros(v.dim())))
                .collect(),
        }
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for (name, value) in &self.arrays {
            match other.arrays.get(name) {
                None => {
                    return Err(Error::Checkpoint {
                        name: name.clone(),
                        reason: "missing".into(),
                    })
                }
                Some(o) if o.dim() != value.dim() => {
                    return Err(Error::Checkpoint {
                        name: name.clone(),
                        reason: format!("expected shape {:?}, found {:?}", value.dim(), o.dim()),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = other.arrays.keys().find(|k| !self.arrays.contains_key(*k)) {
            return Err(Error::Checkpoint {
                name: extra.clone(),
                reason: "unexpected parameter".into(),
            });
        }
        Ok(())
    }

    /// Adds `other` into `self` for every shared name.
    pub fn add_assign(&mut self, other: &ParamStore) {
        for (name, value) in &mut self.arrays {
            if let Some(o) = other.arrays.get(name) {
                *value += o;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for value in self.arrays.values_mut() {
            *value *= k;
        }
    }

    pub fn subset(&self, prefix: &str) -> ParamStore {
        Self {
            arrays: self
                .arrays
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.arrays.extend(other.arrays);
    }
}

/// Which parameters enter a graph as trainable leaves.
#[derive(Clone, Debug)]
pub enum Trainable {
    All,
    None,
    Prefixes(Vec<String>),
}

impl Trainable {
    fn allows(&self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::None => false,
            Trainable::Prefixes(p) => p.iter().any(|pre| name.starts_with(pre.as_str())),
        }
    }
}

/// Binds parameters from a store onto a graph, once per name.
pub struct Binder<'a> {
    store: &'a ParamStore,
    trainable: Trainable,
    bound: HashMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, trainable: Trainable) -> Self {
        Self {
            store,
            trainable,
            bound: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&mut self, g: &mut Graph, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let value = self.store.expect(name).clone();
        let v = if self.trainable.allows(name) {
            g.leaf(value)
        } else {
            g.constant(value)
        };
        self.bound.insert(name.to_string(), v);
        v
    }

    /// Collects gradients for every bound trainable parameter. Parameters that
    /// did not influence the output get zero arrays.
    pub fn gradients(&self, grads: &mut Gradients) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, &v) in &self.bound {
            if !self.trainable.allows(name) {
                continue;
            }
            let g = grads
                .take(v)
                .unwrap_or_else(|| Mat::zeros(self.store.expect(name).dim()));
            out.insert(name.clone(), g);
        }
        out
    }
}

pub(crate) fn xavier<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Mat {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("valid bounds");
    Mat::from_shape_fn((fan_in, fan_out), |_| dist.sample(rng))
}

pub(crate) fn normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Mat {
    let dist = Normal::new(0.0, std).expect("valid std");
    Mat::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

pub const LN_EPS: f64 = 1e-6;

/// Geometry of one pre-norm transformer block.
#[derive(Clone, Copy, Debug)]
pub struct BlockShape {
    pub width: usize,
    pub heads: usize,
    pub hidden: usize,
}

impl BlockShape {
    pub fn param_count(&self) -> usize {
        let d = self.width;
        let m = self.hidden;
        // two layer norms, q/v/o with bias, k without, two-layer MLP
        4 * d + (4 * d * d + 3 * d) + (d * m + m) + (m * d + d)
    }
}

pub(crate) fn init_linear<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) {
    store.insert(format!("{prefix}.w"), xavier(rng, fan_in, fan_out));
    if bias {
        store.insert(format!("{prefix}.b"), Mat::zeros((1, fan_out)));
    }
}

pub(crate) fn init_norm(store: &mut ParamStore, prefix: &str, width: usize) {
    store.insert(format!("{prefix}.g"), Mat::ones((1, width)));
    store.insert(format!("{prefix}.b"), Mat::zeros((1, width)));
}

pub(crate) fn init_block<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, prefix: &str, shape: BlockShape) {
    let d = shape.width;
    init_norm(store, &format!("{prefix}.ln1"), d);
    init_linear(store, rng, &format!("{prefix}.attn.q"), d, d, true);
    init_linear(store, rng, &format!("{prefix}.attn.k"), d, d, false);
    init_linear(store, rng, &format!("{prefix}.attn.v"), d, d, true);
    init_linear(store, rng, &format!("{prefix}.attn.o"), d, d, true);
    init_norm(store, &format!("{prefix}.ln2"), d);
    init_linear(store, rng, &format!("{prefix}.mlp.fc1"), d, shape.hidden, true);
    init_linear(store, rng, &format!("{prefix}.mlp.fc2"), shape.hidden, d, true);
}

pub(crate) fn linear(g: &mut Graph, b: &mut Binder, prefix: &str, x: Var) -> Var {
    let w = b.param(g, &format!("{prefix}.w"));
    let y = g.matmul(x, w);
    let bias_name = format!("{prefix}.b");
    if b.store().contains(&bias_name) {
        let bias = b.param(g, &bias_name);
        g.add_row(y, bias)
    } else {
        y
    }
}

pub(crate) fn layer_norm(g: &mut Graph, b: &mut Binder, prefix: &str, x: Var) -> Var {
    let gamma = b.param(g, &format!("{prefix}.g"));
    let beta = b.param(g, &format!("{prefix}.b"));
    g.layer_norm(x, gamma, beta, LN_EPS)
}

fn attention(g: &mut Graph, b: &mut Binder, prefix: &str, x: Var, heads: usize) -> Var {
    let width = g.value(x).ncols();
    let dh = width / heads;
    let q = linear(g, b, &format!("{prefix}.q"), x);
    let k = linear(g, b, &format!("{prefix}.k"), x);
    let v = linear(g, b, &format!("{prefix}.v"), x);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, lo, hi);
        let kh = g.slice_cols(k, lo, hi);
        let vh = g.slice_cols(v, lo, hi);
        let scores = g.matmul_bt(qh, kh);
        let scores = g.scale(scores, scale);
        let weights = g.softmax_rows(scores);
        outs.push(g.matmul(weights, vh));
    }
    let merged = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    linear(g, b, &format!("{prefix}.o"), merged)
}

/// Pre-norm block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
pub(crate) fn block(g: &mut Graph, b: &mut Binder, prefix: &str, x: Var, heads: usize) -> Var {
    let h = layer_norm(g, b, &format!("{prefix}.ln1"), x);
    let h = attention(g, b, &format!("{prefix}.attn"), h, heads);
    let x = g.add(x, h);
    let h = layer_norm(g, b, &format!("{prefix}.ln2"), x);
    let h = linear(g, b, &format!("{prefix}.mlp.fc1"), h);
    let h = g.gelu(h);
    let h = linear(g, b, &format!("{prefix}.mlp.fc2"), h);
    g.add(x, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn block_param_count_matches_store() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let shape = BlockShape {
            width: 12,
            heads: 3,
            hidden: 20,
        };
        init_block(&mut store, &mut rng, "b", shape);
        assert_eq!(store.scalar_count(), shape.param_count());
    }

    #[test]
    fn block_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        init_block(&mut store, &mut rng, "b", BlockShape { width: 8, heads: 2, hidden: 16 });
        let x = normal(&mut rng, 5, 8, 1.0);
        let perm = [3, 0, 4, 1, 2];
        let run = |x: Mat| {
            let mut g = Graph::new();
            let mut b = Binder::new(&store, Trainable::None);
            let xv = g.constant(x);
            let y = block(&mut g, &mut b, "b", xv, 2);
            g.value(y).clone()
        };
        let y = run(x.clone());
        let yp = run(x.select(ndarray::Axis(0), &perm));
        for (k, &p) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((yp[[k, c]] - y[[p, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn compatibility_check_names_first_offender() {
        let mut a = ParamStore::new();
        a.insert("x", Mat::zeros((2, 2)));
        a.insert("y", Mat::zeros((1, 3)));
        let mut b = a.clone();
        b.insert("y", Mat::zeros((1, 4)));
        match a.check_compatible(&b) {
            Err(Error::Checkpoint { name, .. }) => assert_eq!(name, "y"),
            other => panic!("unexpected {other:?}"),
        }
        let mut c = a.clone();
        c.insert("z", Mat::zeros((1, 1)));
        assert!(a.check_compatible(&c).is_err());
        assert!(a.check_compatible(&a.clone()).is_ok());
    }
}
