//! Feature maps: identity, ReLU MLPs, and PCA-compressed affine maps over
//! pooled MLP activations.
//!
//! A feature map exposes one or more *layers*, each addressed by a
//! [`LayerHandle`]. Distances between mapped points are always measured in
//! the layer's output space, and every layer supports an exact
//! vector-Jacobian product (`backward`) so gradient-based attacks can pull
//! feature-space gradients back to the input.
//!
//! Model files are JSON with an explicit version tag (`mlp-v1`,
//! `affine-v1`) and are validated for shape consistency on load.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// Identifies one layer of a feature map.
///
/// `index` counts dense layers from the input side; `pre_activation`
/// selects the affine output before the ReLU is applied (meaningless for
/// the identity and affine maps, and for the final MLP layer, which has no
/// activation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerHandle {
    /// Zero-based dense-layer index.
    pub index: usize,
    /// Read the layer before its ReLU instead of after.
    #[serde(default)]
    pub pre_activation: bool,
}

impl LayerHandle {
    /// Post-activation handle for layer `index`.
    pub fn post(index: usize) -> Self {
        LayerHandle {
            index,
            pre_activation: false,
        }
    }

    /// Pre-activation handle for layer `index`.
    pub fn pre(index: usize) -> Self {
        LayerHandle {
            index,
            pre_activation: true,
        }
    }
}

/// One dense layer: `out = weights * in + bias`, with `weights[o][i]`
/// holding the weight from input `i` to output `o`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn fan_in(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    fn fan_out(&self) -> usize {
        self.weights.len()
    }

    fn apply(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (row, b) in self.weights.iter().zip(&self.bias) {
            let mut acc = *b;
            for (w, v) in row.iter().zip(input) {
                acc += w * v;
            }
            out.push(acc);
        }
    }

    /// Accumulates `weights^T * g` into `out`.
    fn apply_transposed(&self, g: &[f64], out: &mut [f64]) {
        for (row, gi) in self.weights.iter().zip(g) {
            if *gi == 0.0 {
                continue;
            }
            for (w, o) in row.iter().zip(out.iter_mut()) {
                *o += w * gi;
            }
        }
    }
}

/// All intermediate values of one MLP forward pass, kept so that several
/// layer outputs and backward passes can share a single evaluation.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    /// Pre-activation vector of each layer.
    pre: Vec<Vec<f64>>,
    /// Post-activation vector of each layer. The final layer has no
    /// activation, so its entry equals the pre-activation vector.
    post: Vec<Vec<f64>>,
}

impl MlpTrace {
    /// The vector addressed by `handle`.
    pub fn layer(&self, handle: LayerHandle) -> &[f64] {
        if handle.pre_activation {
            &self.pre[handle.index]
        } else {
            &self.post[handle.index]
        }
    }
}

/// A fully connected ReLU network. Hidden layers use ReLU; the final layer
/// emits raw logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

/// Serialized form of [`Mlp`].
#[derive(Serialize, Deserialize)]
struct MlpFile {
    version: String,
    widths: Vec<usize>,
    layers: Vec<DenseLayer>,
}

const MLP_VERSION: &str = "mlp-v1";

/// Summary statistics returned by [`train_mlp`].
#[derive(Debug, Clone, Copy)]
pub struct TrainStats {
    /// Mean cross-entropy over the training set after the final epoch.
    pub final_loss: f64,
    /// Fraction of training samples classified correctly after training.
    pub train_accuracy: f64,
}

impl Mlp {
    /// Builds an MLP from explicit layers, validating shape consistency.
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Argument("mlp needs at least one layer".into()));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.weights.is_empty() || layer.fan_in() == 0 {
                return Err(Error::Argument(format!("layer {} is empty", l)));
            }
            if layer.weights.iter().any(|row| row.len() != layer.fan_in()) {
                return Err(Error::Argument(format!("layer {} has ragged weights", l)));
            }
            if layer.bias.len() != layer.fan_out() {
                return Err(Error::Argument(format!(
                    "layer {} has {} bias entries for {} outputs",
                    l,
                    layer.bias.len(),
                    layer.fan_out()
                )));
            }
            if l > 0 && layer.fan_in() != layers[l - 1].fan_out() {
                return Err(Error::Argument(format!(
                    "layer {} expects {} inputs but layer {} emits {}",
                    l,
                    layer.fan_in(),
                    l - 1,
                    layers[l - 1].fan_out()
                )));
            }
        }
        Ok(Mlp { layers })
    }

    /// Initializes weights uniformly in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`
    /// and biases to zero. Deterministic in `seed`.
    pub fn init(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Argument(
                "widths must list input and output sizes".into(),
            ));
        }
        if widths.contains(&0) {
            return Err(Error::Argument("layer widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            let weights = (0..fan_out)
                .map(|_| {
                    (0..fan_in)
                        .map(|_| rng.random_range(-scale..=scale))
                        .collect()
                })
                .collect();
            layers.push(DenseLayer {
                weights,
                bias: vec![0.0; fan_out],
            });
        }
        Mlp::from_layers(layers)
    }

    /// Layer widths, input first: `[input, hidden..., output]`.
    pub fn widths(&self) -> Vec<usize> {
        let mut widths = Vec::with_capacity(self.layers.len() + 1);
        widths.push(self.layers[0].fan_in());
        widths.extend(self.layers.iter().map(DenseLayer::fan_out));
        widths
    }

    /// Number of dense layers.
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Input dimension.
    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    /// Validates a handle against this network.
    pub fn check_handle(&self, handle: LayerHandle) -> Result<()> {
        if handle.index >= self.layers.len() {
            return Err(Error::Argument(format!(
                "layer {} does not exist (network has {} layers)",
                handle.index,
                self.layers.len()
            )));
        }
        Ok(())
    }

    /// Output width of the layer addressed by `handle` (pre and post views
    /// share a width).
    pub fn layer_width(&self, handle: LayerHandle) -> Result<usize> {
        self.check_handle(handle)?;
        Ok(self.layers[handle.index].fan_out())
    }

    /// Post-activation handles of the hidden layers, in depth order. Empty
    /// for a single-layer network.
    pub fn hidden_handles(&self) -> Vec<LayerHandle> {
        (0..self.layers.len().saturating_sub(1))
            .map(LayerHandle::post)
            .collect()
    }

    /// Runs the network and records every intermediate vector.
    pub fn forward_trace(&self, x: &[f64]) -> Result<MlpTrace> {
        if x.len() != self.input_dim() {
            return Err(Error::Argument(format!(
                "input has dimension {} but network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut current: Vec<f64> = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::new();
            layer.apply(&current, &mut z);
            let activated: Vec<f64> = if l == last {
                z.clone()
            } else {
                z.iter().map(|v| v.max(0.0)).collect()
            };
            pre.push(z);
            current = activated.clone();
            post.push(activated);
        }
        Ok(MlpTrace { pre, post })
    }

    /// The output of one layer for input `x`.
    pub fn layer_output(&self, x: &[f64], handle: LayerHandle) -> Result<Vec<f64>> {
        self.check_handle(handle)?;
        Ok(self.forward_trace(x)?.layer(handle).to_vec())
    }

    /// Raw logits (final layer output).
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let last = self.layers.len() - 1;
        Ok(self.forward_trace(x)?.post[last].clone())
    }

    /// Pulls layer-space gradients back to the input: given upstream
    /// vectors `u_j` seeded at handles `h_j`, returns
    /// `sum_j J(h_j)^T u_j` where `J(h)` is the Jacobian of the handle's
    /// output with respect to `x`. The ReLU derivative at exactly zero is
    /// taken as zero.
    pub fn backward_from(
        &self,
        trace: &MlpTrace,
        seeds: &[(LayerHandle, Vec<f64>)],
    ) -> Result<Vec<f64>> {
        let last = self.layers.len() - 1;
        let mut seed_pre: Vec<Vec<f64>> =
            self.layers.iter().map(|l| vec![0.0; l.fan_out()]).collect();
        let mut seed_post = seed_pre.clone();
        for (handle, u) in seeds {
            self.check_handle(*handle)?;
            let width = self.layers[handle.index].fan_out();
            if u.len() != width {
                return Err(Error::Argument(format!(
                    "upstream for layer {} has dimension {} but the layer emits {}",
                    handle.index,
                    u.len(),
                    width
                )));
            }
            let target = if handle.pre_activation {
                &mut seed_pre[handle.index]
            } else {
                &mut seed_post[handle.index]
            };
            for (t, v) in target.iter_mut().zip(u) {
                *t += v;
            }
        }

        let mut g_post = vec![0.0; self.layers[last].fan_out()];
        for l in (0..self.layers.len()).rev() {
            for (g, s) in g_post.iter_mut().zip(&seed_post[l]) {
                *g += s;
            }
            let mut g_pre = if l == last {
                g_post
            } else {
                g_post
                    .iter()
                    .zip(&trace.pre[l])
                    .map(|(g, z)| if *z > 0.0 { *g } else { 0.0 })
                    .collect()
            };
            for (g, s) in g_pre.iter_mut().zip(&seed_pre[l]) {
                *g += s;
            }
            let below = if l == 0 {
                self.input_dim()
            } else {
                self.layers[l - 1].fan_out()
            };
            let mut g_below = vec![0.0; below];
            self.layers[l].apply_transposed(&g_pre, &mut g_below);
            g_post = g_below;
        }
        Ok(g_post)
    }

    /// Saves the network as versioned JSON.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let payload = MlpFile {
            version: MLP_VERSION.into(),
            widths: self.widths(),
            layers: self.layers.clone(),
        };
        serde_json::to_writer_pretty(BufWriter::new(file), &payload)
            .map_err(|e| Error::Format(format!("{}: {}", path.display(), e)))?;
        Ok(())
    }

    /// Loads a network saved by [`Mlp::save`], validating the version tag
    /// and all layer shapes.
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let payload: MlpFile = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Format(format!("{}: {}", path.display(), e)))?;
        if payload.version != MLP_VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported model version {:?} (expected {:?})",
                path.display(),
                payload.version,
                MLP_VERSION
            )));
        }
        let mlp = Mlp::from_layers(payload.layers)?;
        if mlp.widths() != payload.widths {
            return Err(Error::Format(format!(
                "{}: declared widths {:?} do not match layers {:?}",
                path.display(),
                payload.widths,
                mlp.widths()
            )));
        }
        Ok(mlp)
    }
}

/// Softmax of `logits`, computed with max subtraction for stability.
fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.iter().map(|v| v / sum).collect()
}

/// Softmax cross-entropy `-ln softmax(logits)[y]` in log-sum-exp form.
/// Finite for all finite logits; non-finite logits propagate so that
/// training can detect divergence.
fn cross_entropy(logits: &[f64], y: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    max - logits[y] + sum.ln()
}

/// Trains an MLP classifier with mini-batch SGD on softmax cross-entropy.
///
/// `widths` must start at the dataset dimension and end at the class
/// count. Batches of up to 32 samples are drawn in a seeded shuffle per
/// epoch, and the averaged gradient is applied with the fixed learning
/// rate. `epochs == 0` returns the freshly initialized network untouched.
/// Training aborts with an error if the loss becomes non-finite.
/// Deterministic in `seed`.
pub fn train_mlp(
    ds: &Dataset,
    widths: &[usize],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<(Mlp, TrainStats)> {
    const BATCH: usize = 32;
    if widths.first() != Some(&ds.dim()) {
        return Err(Error::Argument(format!(
            "first width must equal the data dimension {} (got {:?})",
            ds.dim(),
            widths.first()
        )));
    }
    if widths.last() != Some(&ds.num_classes()) {
        return Err(Error::Argument(format!(
            "last width must equal the class count {} (got {:?})",
            ds.num_classes(),
            widths.last()
        )));
    }
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::Argument(format!(
            "learning rate must be positive, got {}",
            lr
        )));
    }
    let mut mlp = Mlp::init(widths, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let last = mlp.layers.len() - 1;

    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(BATCH) {
            // Accumulate parameter gradients over the batch.
            let mut grad_w: Vec<Vec<Vec<f64>>> = mlp
                .layers
                .iter()
                .map(|l| vec![vec![0.0; l.fan_in()]; l.fan_out()])
                .collect();
            let mut grad_b: Vec<Vec<f64>> =
                mlp.layers.iter().map(|l| vec![0.0; l.fan_out()]).collect();
            let mut batch_loss = 0.0;
            for &i in batch {
                let x = ds.feature(i);
                let y = ds.label(i);
                let trace = mlp.forward_trace(x)?;
                batch_loss += cross_entropy(&trace.post[last], y);
                // dL/dlogits = softmax - onehot
                let mut g: Vec<f64> = softmax(&trace.post[last]);
                g[y] -= 1.0;
                for l in (0..mlp.layers.len()).rev() {
                    let g_pre: Vec<f64> = if l == last {
                        g
                    } else {
                        g.iter()
                            .zip(&trace.pre[l])
                            .map(|(g, z)| if *z > 0.0 { *g } else { 0.0 })
                            .collect()
                    };
                    let input: &[f64] = if l == 0 { x } else { &trace.post[l - 1] };
                    for (o, go) in g_pre.iter().enumerate() {
                        if *go != 0.0 {
                            for (gw, v) in grad_w[l][o].iter_mut().zip(input) {
                                *gw += go * v;
                            }
                        }
                        grad_b[l][o] += go;
                    }
                    let mut g_below = vec![0.0; mlp.layers[l].fan_in()];
                    mlp.layers[l].apply_transposed(&g_pre, &mut g_below);
                    g = g_below;
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Training(format!(
                    "loss became non-finite in epoch {}",
                    epoch
                )));
            }
            let step = lr / batch.len() as f64;
            for (layer, (gw, gb)) in mlp.layers.iter_mut().zip(grad_w.iter().zip(grad_b.iter())) {
                for (row, grow) in layer.weights.iter_mut().zip(gw) {
                    for (w, g) in row.iter_mut().zip(grow) {
                        *w -= step * g;
                    }
                }
                for (b, g) in layer.bias.iter_mut().zip(gb) {
                    *b -= step * g;
                }
            }
        }
    }

    // Final pass: mean loss and accuracy over the whole training set.
    let mut loss = 0.0;
    let mut correct = 0usize;
    for p in ds.points() {
        let logits = mlp.logits(&p.x)?;
        loss += cross_entropy(&logits, p.y);
        let pred = argmax(&logits);
        if pred == p.y {
            correct += 1;
        }
    }
    loss /= ds.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Training("final loss is non-finite".into()));
    }
    Ok((
        mlp,
        TrainStats {
            final_loss: loss,
            train_accuracy: correct as f64 / ds.len() as f64,
        },
    ))
}

/// Index of the largest entry, smallest index on ties.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// A learned affine compression of pooled MLP activations:
/// `g(x) = A * (phi(x) - mu)` where `phi` concatenates mean-pooled layer
/// outputs and `A` holds the top principal directions of the training
/// distribution of `phi`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    /// Projection rows (`r x D`), orthonormal principal directions.
    rows: Vec<Vec<f64>>,
    /// Mean of `phi` over the fitting set (`D`).
    mu: Vec<f64>,
    /// Mean-pool window width applied to each source layer.
    pool: usize,
    /// Layers whose pooled outputs are concatenated, in order.
    sources: Vec<LayerHandle>,
}

/// Serialized form of [`AffineMap`].
#[derive(Serialize, Deserialize)]
struct AffineFile {
    version: String,
    rows: Vec<Vec<f64>>,
    mu: Vec<f64>,
    pool: usize,
    sources: Vec<LayerHandle>,
}

const AFFINE_VERSION: &str = "affine-v1";

impl AffineMap {
    /// Output dimension `r`.
    pub fn output_dim(&self) -> usize {
        self.rows.len()
    }

    /// Pooled-and-concatenated dimension `D`.
    pub fn pooled_dim(&self) -> usize {
        self.mu.len()
    }

    /// Source layers feeding the map.
    pub fn sources(&self) -> &[LayerHandle] {
        &self.sources
    }

    /// Width of `phi` segment produced by a layer of the given width.
    fn pooled_width(&self, layer_width: usize) -> usize {
        layer_width.div_ceil(self.pool)
    }

    /// Concatenated pooled activations `phi(x)` from an existing trace.
    fn phi(&self, mlp: &Mlp, trace: &MlpTrace) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.mu.len());
        for handle in &self.sources {
            let v = trace.layer(*handle);
            let _ = mlp; // widths already validated against the network
            for window in v.chunks(self.pool) {
                let mean: f64 = window.iter().sum::<f64>() / window.len() as f64;
                out.push(mean);
            }
        }
        out
    }

    /// Applies the map to `x` through `mlp`.
    pub fn apply(&self, mlp: &Mlp, x: &[f64]) -> Result<Vec<f64>> {
        let trace = mlp.forward_trace(x)?;
        let phi = self.phi(mlp, &trace);
        Ok(self.project(&phi))
    }

    fn project(&self, phi: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| {
                row.iter()
                    .zip(phi.iter().zip(&self.mu))
                    .map(|(a, (p, m))| a * (p - m))
                    .sum()
            })
            .collect()
    }

    /// Exact vector-Jacobian product: returns `J^T u` where `J` is the
    /// Jacobian of the map output with respect to `x`.
    pub fn pullback(&self, mlp: &Mlp, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        if upstream.len() != self.rows.len() {
            return Err(Error::Argument(format!(
                "upstream has dimension {} but the map emits {}",
                upstream.len(),
                self.rows.len()
            )));
        }
        // d/dphi = A^T u (the centering shift is constant).
        let mut g_phi = vec![0.0; self.mu.len()];
        for (row, u) in self.rows.iter().zip(upstream) {
            if *u == 0.0 {
                continue;
            }
            for (g, a) in g_phi.iter_mut().zip(row) {
                *g += a * u;
            }
        }
        // Un-pool each segment: a window mean distributes its gradient
        // uniformly over the window.
        let trace = mlp.forward_trace(x)?;
        let mut seeds = Vec::with_capacity(self.sources.len());
        let mut offset = 0;
        for handle in &self.sources {
            let width = mlp.layer_width(*handle)?;
            let pooled = self.pooled_width(width);
            let segment = &g_phi[offset..offset + pooled];
            let mut g_layer = vec![0.0; width];
            for (w, g) in segment.iter().enumerate() {
                let start = w * self.pool;
                let end = (start + self.pool).min(width);
                let share = g / (end - start) as f64;
                for item in &mut g_layer[start..end] {
                    *item += share;
                }
            }
            seeds.push((*handle, g_layer));
            offset += pooled;
        }
        mlp.backward_from(&trace, &seeds)
    }

    /// Saves the map as versioned JSON.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let payload = AffineFile {
            version: AFFINE_VERSION.into(),
            rows: self.rows.clone(),
            mu: self.mu.clone(),
            pool: self.pool,
            sources: self.sources.clone(),
        };
        serde_json::to_writer_pretty(BufWriter::new(file), &payload)
            .map_err(|e| Error::Format(format!("{}: {}", path.display(), e)))?;
        Ok(())
    }

    /// Loads a map saved by [`AffineMap::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let payload: AffineFile = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Format(format!("{}: {}", path.display(), e)))?;
        if payload.version != AFFINE_VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported map version {:?} (expected {:?})",
                path.display(),
                payload.version,
                AFFINE_VERSION
            )));
        }
        let dim = payload.mu.len();
        if payload.rows.is_empty() || payload.rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Format(format!(
                "{}: projection rows do not match mean dimension {}",
                path.display(),
                dim
            )));
        }
        if payload.pool == 0 {
            return Err(Error::Format(format!(
                "{}: pool width must be positive",
                path.display()
            )));
        }
        Ok(AffineMap {
            rows: payload.rows,
            mu: payload.mu,
            pool: payload.pool,
            sources: payload.sources,
        })
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns `(eigenvalues, eigenvectors)` with eigenvectors as columns of
/// the returned matrix, both unsorted.
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let total_sq: f64 = a
        .iter()
        .flat_map(|row| row.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off_sq: f64 = (0..n)
            .flat_map(|p| ((p + 1)..n).map(move |q| (p, q)))
            .map(|(p, q)| a[p][q] * a[p][q])
            .sum();
        if off_sq <= total_sq * 1e-28 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p][q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let app = a[p][p];
                let aqq = a[q][q];
                a[p][p] = app - t * apq;
                a[q][q] = aqq + t * apq;
                a[p][q] = 0.0;
                a[q][p] = 0.0;
                for i in 0..n {
                    if i != p && i != q {
                        let aip = a[i][p];
                        let aiq = a[i][q];
                        a[i][p] = c * aip - s * aiq;
                        a[p][i] = a[i][p];
                        a[i][q] = s * aip + c * aiq;
                        a[q][i] = a[i][q];
                    }
                    let vip = v[i][p];
                    let viq = v[i][q];
                    v[i][p] = c * vip - s * viq;
                    v[i][q] = s * vip + c * viq;
                }
            }
        }
    }
    let eigenvalues = (0..n).map(|i| a[i][i]).collect();
    (eigenvalues, v)
}

/// Fits an [`AffineMap`] on a dataset: computes pooled activations of every
/// sample, centers them, and keeps the top `r` principal directions.
///
/// Directions are ordered by decreasing eigenvalue (ties broken by the
/// original eigenvector order) and sign-normalized so that each row's first
/// component larger than `1e-12` in magnitude is positive, making the fit
/// fully deterministic.
pub fn fit_affine(
    ds: &Dataset,
    mlp: &Mlp,
    sources: &[LayerHandle],
    pool: usize,
    r: usize,
) -> Result<AffineMap> {
    if ds.len() < 2 {
        return Err(Error::Argument("need at least two samples to fit".into()));
    }
    if sources.is_empty() {
        return Err(Error::Argument("need at least one source layer".into()));
    }
    for (i, h) in sources.iter().enumerate() {
        mlp.check_handle(*h)?;
        if sources[..i].contains(h) {
            return Err(Error::Argument(format!(
                "source layer {} listed twice",
                h.index
            )));
        }
    }
    if pool == 0 {
        return Err(Error::Argument("pool width must be positive".into()));
    }
    if ds.dim() != mlp.input_dim() {
        return Err(Error::Argument(format!(
            "dataset dimension {} does not match network input {}",
            ds.dim(),
            mlp.input_dim()
        )));
    }
    let dim: usize = sources
        .iter()
        .map(|h| mlp.layer_width(*h).map(|w| w.div_ceil(pool)))
        .sum::<Result<usize>>()?;
    if r == 0 || r > dim {
        return Err(Error::Argument(format!(
            "rank must be in 1..={} (pooled dimension), got {}",
            dim, r
        )));
    }

    let probe = AffineMap {
        rows: vec![],
        mu: vec![0.0; dim],
        pool,
        sources: sources.to_vec(),
    };
    let n = ds.len();
    let mut phis: Vec<Vec<f64>> = Vec::with_capacity(n);
    for p in ds.points() {
        let trace = mlp.forward_trace(&p.x)?;
        phis.push(probe.phi(mlp, &trace));
    }
    let mut mu = vec![0.0; dim];
    for phi in &phis {
        for (m, v) in mu.iter_mut().zip(phi) {
            *m += v;
        }
    }
    for m in &mut mu {
        *m /= n as f64;
    }
    // Covariance with 1/n normalization; only the eigenvector basis matters.
    let mut cov = vec![vec![0.0; dim]; dim];
    for phi in &phis {
        let centered: Vec<f64> = phi.iter().zip(&mu).map(|(p, m)| p - m).collect();
        for (i, ci) in centered.iter().enumerate() {
            if *ci == 0.0 {
                continue;
            }
            for (j, cj) in centered.iter().enumerate() {
                cov[i][j] += ci * cj;
            }
        }
    }
    for row in &mut cov {
        for v in row.iter_mut() {
            *v /= n as f64;
        }
    }

    let (eigenvalues, vectors) = jacobi_eigen(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&i, &j| {
        eigenvalues[j]
            .partial_cmp(&eigenvalues[i])
            .expect("finite eigenvalues")
            .then(i.cmp(&j))
    });
    let mut rows = Vec::with_capacity(r);
    for &col in order.iter().take(r) {
        let mut row: Vec<f64> = (0..dim).map(|i| vectors[i][col]).collect();
        if let Some(first) = row.iter().find(|v| v.abs() > 1e-12) {
            if *first < 0.0 {
                for v in &mut row {
                    *v = -*v;
                }
            }
        }
        rows.push(row);
    }
    Ok(AffineMap {
        rows,
        mu,
        pool,
        sources: sources.to_vec(),
    })
}

/// A feature map used to embed inputs before nearest-neighbor search.
#[derive(Debug, Clone)]
pub enum FeatureMap {
    /// The raw input space.
    Identity { dim: usize },
    /// Hidden (and final) layers of an MLP.
    Mlp(Mlp),
    /// A PCA-compressed affine view of pooled MLP activations, exposed as
    /// a single layer.
    Affine { mlp: Mlp, map: AffineMap },
}

impl FeatureMap {
    /// Identity map over `dim`-dimensional inputs.
    pub fn identity(dim: usize) -> Self {
        FeatureMap::Identity { dim }
    }

    /// Input dimension accepted by the map.
    pub fn input_dim(&self) -> usize {
        match self {
            FeatureMap::Identity { dim } => *dim,
            FeatureMap::Mlp(mlp) => mlp.input_dim(),
            FeatureMap::Affine { mlp, .. } => mlp.input_dim(),
        }
    }

    /// The default layer set: the identity and affine maps expose a single
    /// layer 0, an MLP exposes its hidden layers (post-activation).
    pub fn default_layers(&self) -> Vec<LayerHandle> {
        match self {
            FeatureMap::Identity { .. } | FeatureMap::Affine { .. } => vec![LayerHandle::post(0)],
            FeatureMap::Mlp(mlp) => mlp.hidden_handles(),
        }
    }

    /// Validates a handle against the map.
    pub fn check_handle(&self, handle: LayerHandle) -> Result<()> {
        match self {
            FeatureMap::Identity { .. } | FeatureMap::Affine { .. } => {
                if handle.index != 0 || handle.pre_activation {
                    return Err(Error::Argument(format!(
                        "map exposes only layer 0 post-activation, got layer {} (pre={})",
                        handle.index, handle.pre_activation
                    )));
                }
                Ok(())
            }
            FeatureMap::Mlp(mlp) => mlp.check_handle(handle),
        }
    }

    /// Output dimension of one layer.
    pub fn output_dim(&self, handle: LayerHandle) -> Result<usize> {
        self.check_handle(handle)?;
        match self {
            FeatureMap::Identity { dim } => Ok(*dim),
            FeatureMap::Mlp(mlp) => mlp.layer_width(handle),
            FeatureMap::Affine { map, .. } => Ok(map.output_dim()),
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Argument(format!(
                "input has dimension {} but map expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Maps `x` through one layer.
    pub fn forward(&self, x: &[f64], handle: LayerHandle) -> Result<Vec<f64>> {
        self.check_handle(handle)?;
        self.check_input(x)?;
        match self {
            FeatureMap::Identity { .. } => Ok(x.to_vec()),
            FeatureMap::Mlp(mlp) => mlp.layer_output(x, handle),
            FeatureMap::Affine { mlp, map } => map.apply(mlp, x),
        }
    }

    /// Maps `x` through several layers with a single forward evaluation.
    pub fn forward_many(&self, x: &[f64], handles: &[LayerHandle]) -> Result<Vec<Vec<f64>>> {
        self.check_input(x)?;
        for h in handles {
            self.check_handle(*h)?;
        }
        match self {
            FeatureMap::Identity { .. } => Ok(handles.iter().map(|_| x.to_vec()).collect()),
            FeatureMap::Mlp(mlp) => {
                let trace = mlp.forward_trace(x)?;
                Ok(handles.iter().map(|h| trace.layer(*h).to_vec()).collect())
            }
            FeatureMap::Affine { mlp, map } => {
                let out = map.apply(mlp, x)?;
                Ok(handles.iter().map(|_| out.clone()).collect())
            }
        }
    }

    /// Exact vector-Jacobian product for one layer: `J(handle)^T upstream`.
    pub fn backward(&self, x: &[f64], handle: LayerHandle, upstream: &[f64]) -> Result<Vec<f64>> {
        self.backward_many(x, &[(handle, upstream.to_vec())])
    }

    /// Sum of vector-Jacobian products over several layers, sharing one
    /// forward evaluation: `sum_j J(h_j)^T u_j`.
    pub fn backward_many(&self, x: &[f64], seeds: &[(LayerHandle, Vec<f64>)]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        for (h, _) in seeds {
            self.check_handle(*h)?;
        }
        match self {
            FeatureMap::Identity { dim } => {
                let mut g = vec![0.0; *dim];
                for (_, u) in seeds {
                    if u.len() != *dim {
                        return Err(Error::Argument(format!(
                            "upstream has dimension {} but map emits {}",
                            u.len(),
                            dim
                        )));
                    }
                    for (g, v) in g.iter_mut().zip(u) {
                        *g += v;
                    }
                }
                Ok(g)
            }
            FeatureMap::Mlp(mlp) => {
                let trace = mlp.forward_trace(x)?;
                mlp.backward_from(&trace, seeds)
            }
            FeatureMap::Affine { mlp, map } => {
                let mut g = vec![0.0; mlp.input_dim()];
                for (_, u) in seeds {
                    let part = map.pullback(mlp, x, u)?;
                    for (g, v) in g.iter_mut().zip(&part) {
                        *g += v;
                    }
                }
                Ok(g)
            }
        }
    }
}
