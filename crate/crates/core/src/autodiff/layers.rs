use rand::Rng;

use super::graph::{BatchStats, Graph, Tensor};
use super::params::{fan_in_uniform, kaiming_uniform, ParamId, ParamStore};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A forward pass in progress: the graph, the parameters it reads, and any
/// batch-norm statistics gathered along the way.
pub struct Ctx<'s> {
    pub g: Graph,
    store: &'s ParamStore,
    mode: Mode,
    bn_updates: Vec<(BatchNorm, BatchStats)>,
}

impl<'s> Ctx<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode) -> Self {
        Self {
            g: Graph::new(),
            store,
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Tensor {
        self.g.param(self.store, id)
    }

    pub fn take_bn_updates(&mut self) -> Vec<(BatchNorm, BatchStats)> {
        std::mem::take(&mut self.bn_updates)
    }
}

/// Fold batch statistics into running estimates.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[(BatchNorm, BatchStats)]) {
    for (bn, stats) in updates {
        if stats.count == 0 {
            continue;
        }
        let unbias = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        for (r, &m) in store
            .values_mut(bn.running_mean)
            .iter_mut()
            .zip(&stats.mean)
        {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, &v) in store.values_mut(bn.running_var).iter_mut().zip(&stats.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        feeds_relu: bool,
    ) -> Self {
        let w = if feeds_relu {
            kaiming_uniform(rng, cin, cin * cout)
        } else {
            fan_in_uniform(rng, cin, cin * cout)
        };
        let w = store.add(format!("{name}.weight"), &[cin, cout], w);
        let b = store.add(format!("{name}.bias"), &[cout], vec![0.0; cout]);
        Self { w, b, cin, cout }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Tensor) -> Result<Tensor> {
        let w = ctx.p(self.w);
        let b = ctx.p(self.b);
        ctx.g.linear(x, w, Some(b))
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.values_mut(self.w).fill(0.0);
        store.values_mut(self.b).fill(0.0);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), &[channels], vec![1.0; channels]),
            beta: store.add(format!("{name}.beta"), &[channels], vec![0.0; channels]),
            running_mean: store.add_buffer(
                format!("{name}.running_mean"),
                &[channels],
                vec![0.0; channels],
            ),
            running_var: store.add_buffer(
                format!("{name}.running_var"),
                &[channels],
                vec![1.0; channels],
            ),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Tensor) -> Result<Tensor> {
        let gamma = ctx.p(self.gamma);
        let beta = ctx.p(self.beta);
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.g.batch_norm(x, gamma, beta, None, BN_EPS)?;
                if let Some(stats) = stats {
                    ctx.bn_updates.push((*self, stats));
                }
                Ok(y)
            }
            Mode::Eval => {
                let store = ctx.store;
                let stats = (
                    store.values(self.running_mean),
                    store.values(self.running_var),
                );
                Ok(ctx.g.batch_norm(x, gamma, beta, Some(stats), BN_EPS)?.0)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct MlpLayer {
    pub linear: Linear,
    pub bn: Option<BatchNorm>,
    pub relu: bool,
}

/// Per-point MLP: the same stack of layers applied to every row.
#[derive(Debug, Clone)]
pub struct SharedMlp {
    pub layers: Vec<MlpLayer>,
}

impl SharedMlp {
    /// `sizes = [cin, h1, .., cout]`. Hidden layers use BN + ReLU; the final layer
    /// does too unless `head` is set, in which case it is a plain linear output.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        sizes: &[usize],
        head: bool,
    ) -> Self {
        let n = sizes.len().saturating_sub(1);
        let relu: Vec<bool> = (0..n).map(|i| !(head && i + 1 == n)).collect();
        Self::with_flags(store, rng, name, sizes, &relu, &relu)
    }

    pub fn with_flags(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        sizes: &[usize],
        relu: &[bool],
        bn: &[bool],
    ) -> Self {
        assert!(sizes.len() >= 2, "shared MLP needs at least one layer");
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let lname = format!("{name}.{i}");
                MlpLayer {
                    linear: Linear::new(store, rng, &lname, w[0], w[1], relu[i]),
                    bn: bn[i].then(|| BatchNorm::new(store, &format!("{lname}.bn"), w[1])),
                    relu: relu[i],
                }
            })
            .collect();
        Self { layers }
    }

    pub fn cin(&self) -> usize {
        self.layers[0].linear.cin
    }

    pub fn cout(&self) -> usize {
        self.layers.last().map(|l| l.linear.cout).unwrap_or(0)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Tensor) -> Result<Tensor> {
        let (_, c) = ctx.g.dims(x);
        if c != self.cin() {
            return Err(Error::Dimension(format!(
                "shared MLP expects {} channels, got {c}",
                self.cin()
            )));
        }
        let mut h = x;
        for layer in &self.layers {
            h = layer.linear.forward(ctx, h)?;
            h = finish_layer(ctx, h, layer.bn.as_ref(), layer.relu)?;
        }
        Ok(h)
    }

    pub fn zero_last(&self, store: &mut ParamStore) {
        if let Some(l) = self.layers.last() {
            l.linear.zero(store);
        }
    }
}

pub(crate) fn finish_layer(
    ctx: &mut Ctx,
    h: Tensor,
    bn: Option<&BatchNorm>,
    relu: bool,
) -> Result<Tensor> {
    let h = match bn {
        Some(bn) => bn.forward(ctx, h)?,
        None => h,
    };
    Ok(if relu { ctx.g.relu(h) } else { h })
}

/// `forward_shared_mlp` over a `[B, N, Cin]` (or `[rows, Cin]`) tensor.
pub fn forward_shared_mlp(ctx: &mut Ctx, x: Tensor, mlp: &SharedMlp) -> Result<Tensor> {
    let shape = ctx.g.shape(x).to_vec();
    let y = mlp.forward(ctx, x)?;
    if shape.len() > 2 {
        let mut out = shape;
        *out.last_mut().unwrap() = mlp.cout();
        ctx.g.reshape(y, &out)
    } else {
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_input_zero_bias_relu_gives_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = SharedMlp::new(&mut store, &mut rng, "m", &[3, 5, 4], false);
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let x = ctx.g.constant(&[2, 4, 3], vec![0.0; 24]).unwrap();
        let y = forward_shared_mlp(&mut ctx, x, &mlp).unwrap();
        assert_eq!(ctx.g.shape(y), &[2, 4, 4]);
        assert!(ctx.g.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_clamps_identity_layer() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = SharedMlp::with_flags(&mut store, &mut rng, "m", &[2, 2], &[true], &[false]);
        let l = mlp.layers[0].linear;
        store.values_mut(l.w).copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        store.values_mut(l.b).copy_from_slice(&[-1.0, 1.0]);
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let x = ctx.g.constant(&[1, 2], vec![0.5, 0.5]).unwrap();
        let y = mlp.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.g.value(y), &[0.0, 1.5]);
    }

    #[test]
    fn batch_norm_identical_rows_normalize_to_zero() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 3);
        let mut ctx = Ctx::new(&store, Mode::Train);
        let x = ctx
            .g
            .constant(&[2, 3], vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0])
            .unwrap();
        let y = bn.forward(&mut ctx, x).unwrap();
        assert!(ctx.g.value(y).iter().all(|v| v.abs() < 1e-12));
        assert_eq!(ctx.take_bn_updates().len(), 1);
    }

    #[test]
    fn eval_before_training_uses_unit_stats() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let x = ctx.g.constant(&[1, 2], vec![0.5, -2.0]).unwrap();
        let y = bn.forward(&mut ctx, x).unwrap();
        let scale = 1.0 / (1.0 + BN_EPS).sqrt();
        assert!((ctx.g.value(y)[0] - 0.5 * scale).abs() < 1e-12);
        assert!((ctx.g.value(y)[1] + 2.0 * scale).abs() < 1e-12);
    }

    #[test]
    fn running_stats_move_toward_batch() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        let updates = {
            let mut ctx = Ctx::new(&store, Mode::Train);
            let x = ctx.g.constant(&[2, 1], vec![1.0, 3.0]).unwrap();
            bn.forward(&mut ctx, x).unwrap();
            ctx.take_bn_updates()
        };
        apply_bn_updates(&mut store, &updates);
        assert!((store.values(bn.running_mean)[0] - 0.2).abs() < 1e-12);
        // unbiased batch variance is 2
        assert!((store.values(bn.running_var)[0] - (0.9 + 0.2)).abs() < 1e-12);
    }
}
