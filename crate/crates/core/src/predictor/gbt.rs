//! Gradient-boosted regression trees with exact greedy splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyper {
    pub iterations: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    /// Fraction of samples drawn (without replacement) per tree.
    pub subsample: f64,
    pub seed: u64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            iterations: 5000,
            learning_rate: 0.1,
            max_depth: 6,
            min_samples_leaf: 2,
            subsample: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Node {
    /// -1 for leaves.
    feature: i32,
    threshold: f64,
    left: u32,
    right: u32,
    value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0usize;
        loop {
            let n = &self.nodes[i];
            if n.feature < 0 {
                return n.value;
            }
            i = if x[n.feature as usize] <= n.threshold {
                n.left as usize
            } else {
                n.right as usize
            };
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GbtModel {
    pub n_features: usize,
    pub learning_rate: f64,
    pub base: f64,
    pub seed: u64,
    pub trees: Vec<Tree>,
}

const MAGIC: &[u8; 4] = b"PGBT";
const VERSION: u32 = 1;

impl GbtModel {
    pub fn constant(n_features: usize, value: f64) -> Self {
        GbtModel {
            n_features,
            learning_rate: 0.0,
            base: value,
            seed: 0,
            trees: Vec::new(),
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut y = self.base;
        for t in &self.trees {
            y += self.learning_rate * t.predict(x);
        }
        y
    }

    /// Fit on `(x, y)`. Constant targets give a constant model.
    pub fn train(xs: &[Vec<f64>], ys: &[f64], hyper: &Hyper) -> Result<Self> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(Error::Precondition(
                "training needs matching, non-empty samples".into(),
            ));
        }
        let nf = xs[0].len();
        if xs.iter().any(|x| x.len() != nf) || xs.iter().flatten().chain(ys).any(|v| !v.is_finite())
        {
            return Err(Error::Precondition(
                "training samples must be finite and of equal length".into(),
            ));
        }
        let base = ys.iter().sum::<f64>() / ys.len() as f64;
        let mut model = GbtModel {
            n_features: nf,
            learning_rate: hyper.learning_rate,
            base,
            seed: hyper.seed,
            trees: Vec::new(),
        };
        model.boost(xs, ys, hyper);
        Ok(model)
    }

    /// Add `hyper.iterations` trees fitted to the residuals on new samples.
    pub fn boost(&mut self, xs: &[Vec<f64>], ys: &[f64], hyper: &Hyper) {
        if xs.is_empty() {
            return;
        }
        let n = xs.len();
        let nf = self.n_features;
        let mut pred: Vec<f64> = xs.iter().map(|x| self.predict(x)).collect();
        if ys.iter().all(|&y| y == ys[0]) && pred.iter().all(|&p| (p - ys[0]).abs() < 1e-12) {
            return;
        }
        // Presort once per feature.
        let order: Vec<Vec<u32>> = (0..nf)
            .map(|f| {
                let mut o: Vec<u32> = (0..n as u32).collect();
                o.sort_by(|&a, &b| xs[a as usize][f].total_cmp(&xs[b as usize][f]));
                o
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(
            hyper.seed ^ (self.trees.len() as u64).wrapping_mul(0x9e37_79b9),
        );
        let take = ((n as f64 * hyper.subsample).ceil() as usize).clamp(1, n);
        let mut all: Vec<u32> = (0..n as u32).collect();
        for _ in 0..hyper.iterations {
            let grad: Vec<f64> = (0..n).map(|i| ys[i] - pred[i]).collect();
            let mut in_bag = vec![true; n];
            if take < n {
                all.shuffle(&mut rng);
                in_bag.iter_mut().for_each(|b| *b = false);
                for &i in &all[..take] {
                    in_bag[i as usize] = true;
                }
            }
            let tree = grow(xs, &grad, &order, &in_bag, hyper);
            if tree.nodes.len() == 1 && tree.nodes[0].value.abs() < 1e-15 {
                break;
            }
            for i in 0..n {
                pred[i] += self.learning_rate * tree.predict(&xs[i]);
            }
            self.trees.push(tree);
        }
    }

    pub fn rmse(&self, xs: &[Vec<f64>], ys: &[f64]) -> f64 {
        if xs.is_empty() {
            return 0.0;
        }
        let se: f64 = xs
            .iter()
            .zip(ys)
            .map(|(x, y)| (self.predict(x) - y).powi(2))
            .sum();
        (se / xs.len() as f64).sqrt()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(self.n_features as u32).to_le_bytes());
        b.extend_from_slice(&self.learning_rate.to_le_bytes());
        b.extend_from_slice(&self.base.to_le_bytes());
        b.extend_from_slice(&self.seed.to_le_bytes());
        b.extend_from_slice(&(self.trees.len() as u32).to_le_bytes());
        for t in &self.trees {
            b.extend_from_slice(&(t.nodes.len() as u32).to_le_bytes());
            for n in &t.nodes {
                b.extend_from_slice(&n.feature.to_le_bytes());
                b.extend_from_slice(&n.threshold.to_le_bytes());
                b.extend_from_slice(&n.left.to_le_bytes());
                b.extend_from_slice(&n.right.to_le_bytes());
                b.extend_from_slice(&n.value.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Artifact("model: bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Artifact(format!(
                "model: unsupported version {version}"
            )));
        }
        let n_features = r.u32()? as usize;
        let learning_rate = r.f64()?;
        let base = r.f64()?;
        let seed = r.u64()?;
        let n_trees = r.u32()? as usize;
        let mut trees = Vec::with_capacity(n_trees.min(1 << 16));
        for _ in 0..n_trees {
            let nn = r.u32()? as usize;
            let mut nodes = Vec::with_capacity(nn.min(1 << 16));
            for _ in 0..nn {
                nodes.push(Node {
                    feature: r.u32()? as i32,
                    threshold: r.f64()?,
                    left: r.u32()?,
                    right: r.u32()?,
                    value: r.f64()?,
                });
            }
            let ok = !nodes.is_empty()
                && nodes.iter().all(|n| {
                    n.feature < 0
                        || ((n.feature as usize) < n_features
                            && (n.left as usize) < nn
                            && (n.right as usize) < nn)
                });
            if !ok {
                return Err(Error::Artifact("model: malformed tree".into()));
            }
            trees.push(Tree { nodes });
        }
        if r.at != buf.len() {
            return Err(Error::Artifact("model: trailing bytes".into()));
        }
        Ok(GbtModel {
            n_features,
            learning_rate,
            base,
            seed,
            trees,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Artifact("model: truncated".into()));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[derive(Clone, Copy)]
struct Best {
    gain: f64,
    feature: usize,
    threshold: f64,
}

/// Grow one tree level by level. Each level scans every presorted feature
/// once, accumulating left-side sums per open node.
fn grow(xs: &[Vec<f64>], grad: &[f64], order: &[Vec<u32>], in_bag: &[bool], h: &Hyper) -> Tree {
    let n = xs.len();
    let mut node_of: Vec<i32> = (0..n).map(|i| if in_bag[i] { 0 } else { -1 }).collect();
    let mut nodes = vec![Node {
        feature: -1,
        threshold: 0.0,
        left: 0,
        right: 0,
        value: 0.0,
    }];
    let mut open: Vec<usize> = vec![0];
    for depth in 0..=h.max_depth {
        let m = nodes.len();
        let mut sum = vec![0.0; m];
        let mut cnt = vec![0usize; m];
        for i in 0..n {
            if node_of[i] >= 0 {
                sum[node_of[i] as usize] += grad[i];
                cnt[node_of[i] as usize] += 1;
            }
        }
        for &o in &open {
            nodes[o].value = if cnt[o] > 0 {
                sum[o] / cnt[o] as f64
            } else {
                0.0
            };
        }
        if depth == h.max_depth {
            break;
        }
        let mut best: Vec<Option<Best>> = vec![None; m];
        let is_open: Vec<bool> = {
            let mut v = vec![false; m];
            open.iter()
                .for_each(|&o| v[o] = cnt[o] >= 2 * h.min_samples_leaf);
            v
        };
        let mut ls = vec![0.0; m];
        let mut lc = vec![0usize; m];
        let mut last = vec![f64::NAN; m];
        for (f, ord) in order.iter().enumerate() {
            ls.iter_mut().for_each(|x| *x = 0.0);
            lc.iter_mut().for_each(|x| *x = 0);
            last.iter_mut().for_each(|x| *x = f64::NAN);
            for &i in ord {
                let i = i as usize;
                let nd = node_of[i];
                if nd < 0 || !is_open[nd as usize] {
                    continue;
                }
                let nd = nd as usize;
                let v = xs[i][f];
                if lc[nd] >= h.min_samples_leaf
                    && cnt[nd] - lc[nd] >= h.min_samples_leaf
                    && v > last[nd]
                {
                    let (gl, nl) = (ls[nd], lc[nd] as f64);
                    let (gr, nr) = (sum[nd] - gl, (cnt[nd] - lc[nd]) as f64);
                    let gain = gl * gl / nl + gr * gr / nr - sum[nd] * sum[nd] / cnt[nd] as f64;
                    if gain > 1e-12 && best[nd].is_none_or(|b| gain > b.gain) {
                        best[nd] = Some(Best {
                            gain,
                            feature: f,
                            threshold: 0.5 * (last[nd] + v),
                        });
                    }
                }
                ls[nd] += grad[i];
                lc[nd] += 1;
                last[nd] = v;
            }
        }
        let mut next_open = Vec::new();
        let mut remap: Vec<(i32, i32, usize, f64)> = vec![(-1, -1, 0, 0.0); m];
        for &o in &open {
            if let Some(b) = best[o] {
                let l = nodes.len();
                nodes.push(Node {
                    feature: -1,
                    threshold: 0.0,
                    left: 0,
                    right: 0,
                    value: 0.0,
                });
                nodes.push(Node {
                    feature: -1,
                    threshold: 0.0,
                    left: 0,
                    right: 0,
                    value: 0.0,
                });
                nodes[o].feature = b.feature as i32;
                nodes[o].threshold = b.threshold;
                nodes[o].left = l as u32;
                nodes[o].right = (l + 1) as u32;
                remap[o] = (l as i32, (l + 1) as i32, b.feature, b.threshold);
                next_open.push(l);
                next_open.push(l + 1);
            }
        }
        if next_open.is_empty() {
            break;
        }
        for i in 0..n {
            let nd = node_of[i];
            if nd < 0 {
                continue;
            }
            let (l, r, f, t) = remap[nd as usize];
            if l >= 0 {
                node_of[i] = if xs[i][f] <= t { l } else { r };
            }
        }
        open = next_open;
    }
    Tree { nodes }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn constant_labels_give_constant_model() {
        let xs: Vec<Vec<f64>> = (0..40)
            .map(|i| vec![i as f64, (i * 7 % 5) as f64])
            .collect();
        let ys = vec![3.5; 40];
        let m = GbtModel::train(&xs, &ys, &Hyper::default()).unwrap();
        assert!(m.trees.is_empty());
        assert_eq!(m.predict(&[100.0, -4.0]), 3.5);
    }

    #[test]
    fn linear_target_held_out_r2() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mk = |rng: &mut ChaCha8Rng| -> (Vec<f64>, f64) {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..10.0)).collect();
            let y = 3.0 * x[1] + 2.0;
            (x, y)
        };
        let (xs, ys): (Vec<_>, Vec<_>) = (0..500).map(|_| mk(&mut rng)).unzip();
        let (tx, ty): (Vec<_>, Vec<_>) = (0..200).map(|_| mk(&mut rng)).unzip();
        let h = Hyper {
            iterations: 200,
            ..Hyper::default()
        };
        let m = GbtModel::train(&xs, &ys, &h).unwrap();
        let mean = ty.iter().sum::<f64>() / ty.len() as f64;
        let ss_tot: f64 = ty.iter().map(|y| (y - mean).powi(2)).sum();
        let ss_res: f64 = tx
            .iter()
            .zip(&ty)
            .map(|(x, y)| (m.predict(x) - y).powi(2))
            .sum();
        assert!(1.0 - ss_res / ss_tot >= 0.95);
    }

    #[test]
    fn bytes_round_trip_and_determinism() {
        let xs: Vec<Vec<f64>> = (0..64)
            .map(|i| vec![(i % 9) as f64, (i / 9) as f64])
            .collect();
        let ys: Vec<f64> = xs.iter().map(|x| x[0] * x[1]).collect();
        let h = Hyper {
            iterations: 20,
            subsample: 0.7,
            seed: 3,
            ..Hyper::default()
        };
        let a = GbtModel::train(&xs, &ys, &h).unwrap();
        let b = GbtModel::train(&xs, &ys, &h).unwrap();
        assert_eq!(a, b);
        let back = GbtModel::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(back, a);
        assert!(GbtModel::from_bytes(b"PGBX").is_err());
        let mut cut = a.to_bytes();
        cut.pop();
        assert!(GbtModel::from_bytes(&cut).is_err());
    }

    #[test]
    fn defaults() {
        let h = Hyper::default();
        assert_eq!((h.iterations, h.learning_rate, h.max_depth), (5000, 0.1, 6));
    }
}
