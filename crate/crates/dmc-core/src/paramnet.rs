//! The recurrent parameter-prediction network.
//!
//! Maps a normalized daily weather sequence plus a cultivar identity to
//! a per-day vector in [−1, 1]^out_dim (then affinely rescaled into the
//! biophysical parameter ranges). Architecture: two ReLU dense layers,
//! a GRU, two more ReLU dense layers, and a tanh output head —
//! optionally one head per cultivar (multi-head mode).
//!
//! Every forward pass exists twice: a plain-array version for
//! inference (`step`/`forward`) and a tape version for training
//! (`TapeNet`). Both use the same operation order so their outputs
//! agree exactly; a fuzz test pins that equivalence.
//!
//! Weight arrays are named (`arrays`/`arrays_mut`) so the optimizer
//! and the checkpoint container treat the network as an ordered list
//! of named matrices.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{sigmoid, Tape, Var};
use crate::biophys::ParamTable;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("bad net config: {0}")]
    BadConfig(String),
    #[error("input has {got} features, network expects {want}")]
    InputDim { got: usize, want: usize },
    #[error("cultivar id {got} out of range (n_cultivars = {n})")]
    BadCultivar { got: usize, n: usize },
    #[error("checkpoint io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

/// How the cultivar embedding joins the weather features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedMode {
    /// Append the embedding row to the features.
    Concat,
    /// Add the embedding row to the features.
    Add,
    /// Multiply the features by the embedding row.
    Mult,
    /// No embedding; one output head per cultivar instead.
    MultiHead,
    /// No cultivar conditioning at all (aggregate model).
    None,
}

/// Backbone shape: the full recurrent stack, or a small feed-forward
/// stack (used by the temperature-response hybrid baseline).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Recurrent,
    FeedForward,
}

/// Network hyperparameters. `embed_dim` equals `input_dim` for the
/// Concat/Add/Mult modes (the published choice) and 0 otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub arch: Arch,
    pub input_dim: usize,
    pub embed_mode: EmbedMode,
    pub embed_dim: usize,
    pub pre_dims: Vec<usize>,
    pub recur_dim: usize,
    pub post_dims: Vec<usize>,
    pub out_dim: usize,
    pub n_cultivars: usize,
    /// Dense and gate bias terms. The error-encoding network is built
    /// bias-free so an all-zero input produces an exactly-zero output.
    pub bias: bool,
    /// Skip the tanh on the output head(s). Parameter-predicting
    /// networks keep the squash (outputs live in [−1, 1] before
    /// rescaling); direct-prediction baselines need unbounded outputs.
    #[serde(default)]
    pub linear_head: bool,
}

impl NetConfig {
    /// The published full-size architecture: pre [256, 512], GRU 1024,
    /// post [512, 256].
    pub fn full(input_dim: usize, embed_mode: EmbedMode, out_dim: usize, n_cultivars: usize) -> Self {
        Self::sized(input_dim, embed_mode, out_dim, n_cultivars, 1024)
    }

    /// Same shape scaled to a smaller recurrent width: pre
    /// [recur/4, recur/2], post [recur/2, recur/4]. `sized(.., 1024)`
    /// equals [`NetConfig::full`].
    pub fn sized(
        input_dim: usize,
        embed_mode: EmbedMode,
        out_dim: usize,
        n_cultivars: usize,
        recur_dim: usize,
    ) -> Self {
        assert!(recur_dim >= 4, "recur_dim must be at least 4");
        let embed_dim = match embed_mode {
            EmbedMode::Concat | EmbedMode::Add | EmbedMode::Mult => input_dim,
            EmbedMode::MultiHead | EmbedMode::None => 0,
        };
        Self {
            arch: Arch::Recurrent,
            input_dim,
            embed_mode,
            embed_dim,
            pre_dims: vec![recur_dim / 4, recur_dim / 2],
            recur_dim,
            post_dims: vec![recur_dim / 2, recur_dim / 4],
            out_dim,
            n_cultivars,
            bias: true,
            linear_head: false,
        }
    }

    /// Feed-forward variant: three ReLU layers of `hidden` units then
    /// the tanh head.
    pub fn feed_forward(
        input_dim: usize,
        embed_mode: EmbedMode,
        out_dim: usize,
        n_cultivars: usize,
        hidden: usize,
    ) -> Self {
        let embed_dim = match embed_mode {
            EmbedMode::Concat | EmbedMode::Add | EmbedMode::Mult => input_dim,
            EmbedMode::MultiHead | EmbedMode::None => 0,
        };
        Self {
            arch: Arch::FeedForward,
            input_dim,
            embed_mode,
            embed_dim,
            pre_dims: vec![hidden, hidden, hidden],
            recur_dim: 0,
            post_dims: vec![],
            out_dim,
            n_cultivars,
            bias: true,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |msg: String| Err(NetError::BadConfig(msg));
        if self.input_dim == 0 || self.out_dim == 0 || self.n_cultivars == 0 {
            return bad("zero input_dim/out_dim/n_cultivars".into());
        }
        match self.embed_mode {
            EmbedMode::Add | EmbedMode::Mult => {
                if self.embed_dim != self.input_dim {
                    return bad(format!(
                        "{:?} embedding needs embed_dim = input_dim ({} != {})",
                        self.embed_mode, self.embed_dim, self.input_dim
                    ));
                }
            }
            EmbedMode::Concat => {
                if self.embed_dim == 0 {
                    return bad("concat embedding needs embed_dim ≥ 1".into());
                }
            }
            EmbedMode::MultiHead | EmbedMode::None => {
                if self.embed_dim != 0 {
                    return bad(format!("{:?} mode carries no embedding", self.embed_mode));
                }
            }
        }
        match self.arch {
            Arch::Recurrent => {
                if self.recur_dim == 0 {
                    return bad("recurrent arch needs recur_dim ≥ 1".into());
                }
            }
            Arch::FeedForward => {
                if self.recur_dim != 0 || !self.post_dims.is_empty() {
                    return bad("feed-forward arch has no recurrent/post stage".into());
                }
                if self.pre_dims.is_empty() {
                    return bad("feed-forward arch needs at least one layer".into());
                }
            }
        }
        Ok(())
    }

    /// Width of the assembled per-day input (features + any concat
    /// embedding).
    pub fn assembled_dim(&self) -> usize {
        match self.embed_mode {
            EmbedMode::Concat => self.input_dim + self.embed_dim,
            _ => self.input_dim,
        }
    }

    /// Number of output heads (1, or one per cultivar in multi-head
    /// mode).
    pub fn n_heads(&self) -> usize {
        match self.embed_mode {
            EmbedMode::MultiHead => self.n_cultivars,
            _ => 1,
        }
    }
}

/// One dense layer; `w` is (in × out), `b` is (1 × out).
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

/// GRU gate weights. `w*` are (in × H), `u*` are (H × H), `b*` (1 × H).
#[derive(Clone, Debug, PartialEq)]
pub struct GruWeights {
    pub wz: Array2<f64>,
    pub uz: Array2<f64>,
    pub bz: Array2<f64>,
    pub wr: Array2<f64>,
    pub ur: Array2<f64>,
    pub br: Array2<f64>,
    pub wn: Array2<f64>,
    pub un: Array2<f64>,
    pub bn: Array2<f64>,
}

/// All learnable arrays plus the config that shapes them.
#[derive(Clone, Debug, PartialEq)]
pub struct NetWeights {
    pub config: NetConfig,
    /// (n_cultivars × embed_dim); zero-width when the mode has no
    /// embedding.
    pub embedding: Array2<f64>,
    pub pre: Vec<Dense>,
    pub gru: Option<GruWeights>,
    pub post: Vec<Dense>,
    /// One entry, or `n_cultivars` entries in multi-head mode.
    pub heads: Vec<Dense>,
}

/// Deterministic Glorot-uniform matrix: ±sqrt(6/(fan_in+fan_out)).
fn glorot(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| (rng.random::<f64>() * 2.0 - 1.0) * limit)
}

/// Orthogonalize a square matrix in place by modified Gram–Schmidt on
/// its columns (recurrent matrices train better near orthogonal).
fn orthogonalize(m: &mut Array2<f64>) {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols());
    for j in 0..n {
        for k in 0..j {
            let dot: f64 = (0..n).map(|i| m[[i, j]] * m[[i, k]]).sum();
            for i in 0..n {
                m[[i, j]] -= dot * m[[i, k]];
            }
        }
        let norm: f64 = (0..n).map(|i| m[[i, j]] * m[[i, j]]).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for i in 0..n {
                m[[i, j]] /= norm;
            }
        } else {
            // Degenerate column (vanishing after projection): replace
            // with a canonical basis vector.
            for i in 0..n {
                m[[i, j]] = if i == j { 1.0 } else { 0.0 };
            }
        }
    }
}

/// Initialize weights deterministically from a seed: Glorot-uniform
/// dense layers and embedding, orthogonalized recurrent matrices, zero
/// biases.
pub fn init_weights(config: &NetConfig, seed: u64) -> Result<NetWeights, NetError> {
    config.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let embedding = glorot(&mut rng, config.n_cultivars, config.embed_dim);

    let mut dims = vec![config.assembled_dim()];
    dims.extend(&config.pre_dims);
    let mut pre = Vec::new();
    for pair in dims.windows(2) {
        pre.push(Dense {
            w: glorot(&mut rng, pair[0], pair[1]),
            b: Array2::zeros((1, pair[1])),
        });
    }
    let mut width = *dims.last().unwrap();

    let gru = match config.arch {
        Arch::FeedForward => None,
        Arch::Recurrent => {
            let h = config.recur_dim;
            let gate = |rng: &mut ChaCha20Rng| {
                let w = glorot(rng, width, h);
                let mut u = glorot(rng, h, h);
                orthogonalize(&mut u);
                (w, u, Array2::zeros((1, h)))
            };
            let (wz, uz, bz) = gate(&mut rng);
            let (wr, ur, br) = gate(&mut rng);
            let (wn, un, bn) = gate(&mut rng);
            width = h;
            Some(GruWeights { wz, uz, bz, wr, ur, br, wn, un, bn })
        }
    };

    let mut post = Vec::new();
    for &d in &config.post_dims {
        post.push(Dense { w: glorot(&mut rng, width, d), b: Array2::zeros((1, d)) });
        width = d;
    }

    let mut heads = Vec::new();
    for _ in 0..config.n_heads() {
        heads.push(Dense {
            w: glorot(&mut rng, width, config.out_dim),
            b: Array2::zeros((1, config.out_dim)),
        });
    }

    Ok(NetWeights { config: config.clone(), embedding, pre, gru, post, heads })
}

impl NetWeights {
    /// Named learnable arrays in a fixed order. Bias arrays are
    /// omitted for bias-free networks so the optimizer and checkpoints
    /// never touch them.
    pub fn array_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.config.embed_dim > 0 {
            names.push("embedding".to_string());
        }
        for i in 0..self.pre.len() {
            names.push(format!("pre{i}.w"));
            if self.config.bias {
                names.push(format!("pre{i}.b"));
            }
        }
        if self.gru.is_some() {
            for gate in ["z", "r", "n"] {
                names.push(format!("gru.w{gate}"));
                names.push(format!("gru.u{gate}"));
                if self.config.bias {
                    names.push(format!("gru.b{gate}"));
                }
            }
        }
        for i in 0..self.post.len() {
            names.push(format!("post{i}.w"));
            if self.config.bias {
                names.push(format!("post{i}.b"));
            }
        }
        for i in 0..self.heads.len() {
            names.push(format!("head{i}.w"));
            if self.config.bias {
                names.push(format!("head{i}.b"));
            }
        }
        names
    }

    pub fn array(&self, name: &str) -> Option<&Array2<f64>> {
        self.array_ref(name)
    }

    fn array_ref(&self, name: &str) -> Option<&Array2<f64>> {
        if name == "embedding" {
            return Some(&self.embedding);
        }
        if let Some(rest) = name.strip_prefix("gru.") {
            let g = self.gru.as_ref()?;
            return Some(match rest {
                "wz" => &g.wz,
                "uz" => &g.uz,
                "bz" => &g.bz,
                "wr" => &g.wr,
                "ur" => &g.ur,
                "br" => &g.br,
                "wn" => &g.wn,
                "un" => &g.un,
                "bn" => &g.bn,
                _ => return None,
            });
        }
        let layer = |list: &'_ Vec<Dense>, rest: &str| -> Option<usize> {
            rest.parse::<usize>().ok().filter(|&i| i < list.len())
        };
        for (prefix, list) in
            [("pre", &self.pre), ("post", &self.post), ("head", &self.heads)]
        {
            if let Some(rest) = name.strip_prefix(prefix) {
                if let Some(idx_part) = rest.strip_suffix(".w") {
                    if let Some(i) = layer(list, idx_part) {
                        return Some(&list[i].w);
                    }
                }
                if let Some(idx_part) = rest.strip_suffix(".b") {
                    if let Some(i) = layer(list, idx_part) {
                        return Some(&list[i].b);
                    }
                }
            }
        }
        None
    }

    pub fn array_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        if name == "embedding" {
            return Some(&mut self.embedding);
        }
        if let Some(rest) = name.strip_prefix("gru.") {
            let g = self.gru.as_mut()?;
            return Some(match rest {
                "wz" => &mut g.wz,
                "uz" => &mut g.uz,
                "bz" => &mut g.bz,
                "wr" => &mut g.wr,
                "ur" => &mut g.ur,
                "br" => &mut g.br,
                "wn" => &mut g.wn,
                "un" => &mut g.un,
                "bn" => &mut g.bn,
                _ => return None,
            });
        }
        // Work around the borrow checker by resolving the list first.
        let (prefix, rest) = if let Some(r) = name.strip_prefix("pre") {
            ("pre", r)
        } else if let Some(r) = name.strip_prefix("post") {
            ("post", r)
        } else if let Some(r) = name.strip_prefix("head") {
            ("head", r)
        } else {
            return None;
        };
        let (idx_part, is_w) = if let Some(p) = rest.strip_suffix(".w") {
            (p, true)
        } else if let Some(p) = rest.strip_suffix(".b") {
            (p, false)
        } else {
            return None;
        };
        let i = idx_part.parse::<usize>().ok()?;
        let list = match prefix {
            "pre" => &mut self.pre,
            "post" => &mut self.post,
            _ => &mut self.heads,
        };
        let d = list.get_mut(i)?;
        Some(if is_w { &mut d.w } else { &mut d.b })
    }

    /// Total learnable scalar count.
    pub fn n_params(&self) -> usize {
        self.array_names()
            .iter()
            .map(|n| self.array(n).unwrap().len())
            .sum()
    }

    /// Assemble the network input for a batch of feature rows under
    /// the embedding mode. `features` is (B × input_dim); `cultivars`
    /// has one id per row.
    pub fn assemble_input(
        &self,
        features: &Array2<f64>,
        cultivars: &[usize],
    ) -> Result<Array2<f64>, NetError> {
        let cfg = &self.config;
        if features.ncols() != cfg.input_dim {
            return Err(NetError::InputDim { got: features.ncols(), want: cfg.input_dim });
        }
        let b = features.nrows();
        assert_eq!(cultivars.len(), b, "one cultivar id per batch row");
        for &c in cultivars {
            if c >= cfg.n_cultivars {
                return Err(NetError::BadCultivar { got: c, n: cfg.n_cultivars });
            }
        }
        Ok(match cfg.embed_mode {
            EmbedMode::Concat => {
                let mut out = Array2::zeros((b, cfg.input_dim + cfg.embed_dim));
                for i in 0..b {
                    for j in 0..cfg.input_dim {
                        out[[i, j]] = features[[i, j]];
                    }
                    for j in 0..cfg.embed_dim {
                        out[[i, cfg.input_dim + j]] = self.embedding[[cultivars[i], j]];
                    }
                }
                out
            }
            EmbedMode::Add => {
                let mut out = features.clone();
                for i in 0..b {
                    for j in 0..cfg.input_dim {
                        out[[i, j]] += self.embedding[[cultivars[i], j]];
                    }
                }
                out
            }
            EmbedMode::Mult => {
                let mut out = features.clone();
                for i in 0..b {
                    for j in 0..cfg.input_dim {
                        out[[i, j]] *= self.embedding[[cultivars[i], j]];
                    }
                }
                out
            }
            EmbedMode::MultiHead | EmbedMode::None => features.clone(),
        })
    }
}

/// Recurrent hidden state for stateful stepping.
#[derive(Clone, Debug)]
pub struct ForwardState {
    pub h: Array2<f64>,
}

impl NetWeights {
    /// Zeroed hidden state for a batch.
    pub fn init_state(&self, batch: usize) -> ForwardState {
        ForwardState { h: Array2::zeros((batch, self.config.recur_dim.max(1))) }
    }

    fn dense_relu(x: &Array2<f64>, d: &Dense, bias: bool) -> Array2<f64> {
        let mut y = x.dot(&d.w);
        if bias {
            y += &d.b;
        }
        y.mapv_inplace(|v| v.max(0.0));
        y
    }

    /// One day of the network: assembled input (B × assembled_dim) →
    /// raw outputs (B × out_dim), advancing the hidden state.
    pub fn step_assembled(
        &self,
        state: &mut ForwardState,
        x: &Array2<f64>,
        cultivars: &[usize],
    ) -> Array2<f64> {
        let bias = self.config.bias;
        let mut a = x.clone();
        for d in &self.pre {
            a = Self::dense_relu(&a, d, bias);
        }

        if let Some(g) = &self.gru {
            let h = &state.h;
            let mut z = a.dot(&g.wz) + &h.dot(&g.uz);
            if bias {
                z += &g.bz;
            }
            z.mapv_inplace(sigmoid);
            let mut r = a.dot(&g.wr) + &h.dot(&g.ur);
            if bias {
                r += &g.br;
            }
            r.mapv_inplace(sigmoid);
            let rh = &r * h;
            let mut n = a.dot(&g.wn) + &rh.dot(&g.un);
            if bias {
                n += &g.bn;
            }
            n.mapv_inplace(f64::tanh);
            // h' = (1 − z)·n + z·h
            let one_minus_z = z.mapv(|v| 1.0 - v);
            state.h = &(&one_minus_z * &n) + &(&z * h);
            a = state.h.clone();
        }

        for d in &self.post {
            a = Self::dense_relu(&a, d, bias);
        }

        // Output head(s), tanh-squashed.
        let b_rows = a.nrows();
        let mut out = Array2::zeros((b_rows, self.config.out_dim));
        match self.config.embed_mode {
            EmbedMode::MultiHead => {
                for i in 0..b_rows {
                    let head = &self.heads[cultivars[i]];
                    let row = a.row(i).insert_axis(ndarray::Axis(0)).to_owned();
                    let mut y = row.dot(&head.w);
                    if bias {
                        y += &head.b;
                    }
                    for j in 0..self.config.out_dim {
                        out[[i, j]] = y[[0, j]].tanh();
                    }
                }
            }
            _ => {
                let head = &self.heads[0];
                let mut y = a.dot(&head.w);
                if bias {
                    y += &head.b;
                }
                y.mapv_inplace(f64::tanh);
                out = y;
            }
        }
        out
    }

    /// One day from raw features (embedding applied internally).
    pub fn step(
        &self,
        state: &mut ForwardState,
        features: &Array2<f64>,
        cultivars: &[usize],
    ) -> Result<Array2<f64>, NetError> {
        let x = self.assemble_input(features, cultivars)?;
        Ok(self.step_assembled(state, &x, cultivars))
    }

    /// Whole-season forward: normalized inputs (days × input_dim) →
    /// raw outputs (days × out_dim), hidden state starting at zero.
    pub fn forward(
        &self,
        inputs: &Array2<f64>,
        cultivar: usize,
    ) -> Result<Array2<f64>, NetError> {
        let days = inputs.nrows();
        let mut state = self.init_state(1);
        let mut out = Array2::zeros((days, self.config.out_dim));
        for t in 0..days {
            let row = inputs.row(t).insert_axis(ndarray::Axis(0)).to_owned();
            let y = self.step(&mut state, &row, &[cultivar])?;
            out.row_mut(t).assign(&y.row(0));
        }
        Ok(out)
    }

    /// Sliding-window forward: the recurrence for day t runs over days
    /// max(0, t−k+1)..=t only, hidden state reset per window.
    pub fn forward_windowed(
        &self,
        inputs: &Array2<f64>,
        cultivar: usize,
        k: usize,
    ) -> Result<Array2<f64>, NetError> {
        assert!(k >= 1, "window length must be ≥ 1");
        let days = inputs.nrows();
        let mut out = Array2::zeros((days, self.config.out_dim));
        for t in 0..days {
            let start = (t + 1).saturating_sub(k);
            let mut state = self.init_state(1);
            let mut y = Array2::zeros((1, self.config.out_dim));
            for s in start..=t {
                let row = inputs.row(s).insert_axis(ndarray::Axis(0)).to_owned();
                y = self.step(&mut state, &row, &[cultivar])?;
            }
            out.row_mut(t).assign(&y.row(0));
        }
        Ok(out)
    }

    /// Feed-forward forward pass (no temporal state): valid only for
    /// [`Arch::FeedForward`] weights.
    pub fn forward_ffn(
        &self,
        inputs: &Array2<f64>,
        cultivar: usize,
    ) -> Result<Array2<f64>, NetError> {
        assert_eq!(
            self.config.arch,
            Arch::FeedForward,
            "forward_ffn requires a feed-forward network"
        );
        self.forward(inputs, cultivar)
    }
}

// ---------------------------------------------------------------------------
// Rescaling between [−1, 1] and parameter ranges
// ---------------------------------------------------------------------------

/// Affine map from raw [−1, 1] outputs to parameter ranges:
/// `p = min + (raw + 1)/2 · (max − min)`. Raw values straying outside
/// ±1 numerically are clamped, not rejected. Frozen parameters
/// (min = max) always return min.
pub fn rescale(raw: &Array2<f64>, table: &ParamTable) -> Array2<f64> {
    assert_eq!(raw.ncols(), table.len(), "raw width must match the table");
    let mut out = raw.clone();
    for (j, spec) in table.specs.iter().enumerate() {
        for i in 0..raw.nrows() {
            let x = raw[[i, j]].clamp(-1.0, 1.0);
            out[[i, j]] = spec.min + (x + 1.0) * 0.5 * (spec.max - spec.min);
        }
    }
    out
}

/// Inverse of [`rescale`] on non-frozen parameters; frozen ones map to
/// raw 0.
pub fn unrescale(params: &Array2<f64>, table: &ParamTable) -> Array2<f64> {
    assert_eq!(params.ncols(), table.len());
    let mut out = params.clone();
    for (j, spec) in table.specs.iter().enumerate() {
        for i in 0..params.nrows() {
            out[[i, j]] = if spec.is_frozen() {
                0.0
            } else {
                2.0 * (params[[i, j]] - spec.min) / (spec.max - spec.min) - 1.0
            };
        }
    }
    out
}

/// Tape version of [`rescale`]. No clamp: tanh already bounds the
/// input, and a clamp would put a kink at ±1.
pub fn tape_rescale(tape: &mut Tape, raw: Var, table: &ParamTable) -> Var {
    let min_row = tape.constant(table.min_row());
    let range_row = tape.constant(table.range_row());
    let shifted = tape.add_scalar(raw, 1.0);
    let halved = tape.mul_scalar(shifted, 0.5);
    let scaled = tape.mul(halved, range_row);
    tape.add(scaled, min_row)
}

// ---------------------------------------------------------------------------
// Tape forward (training)
// ---------------------------------------------------------------------------

/// The network's weight arrays registered as tape leaves, in
/// `array_names` order.
pub struct TapeNet {
    pub names: Vec<String>,
    pub vars: Vec<Var>,
    config: NetConfig,
}

impl TapeNet {
    /// Register every learnable array as a leaf on the tape.
    pub fn leaf(tape: &mut Tape, weights: &NetWeights) -> Self {
        let names = weights.array_names();
        let vars = names
            .iter()
            .map(|n| tape.leaf(weights.array(n).expect("named array").clone()))
            .collect();
        Self { names, vars, config: weights.config.clone() }
    }

    pub fn var(&self, name: &str) -> Var {
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("no array named {name}"));
        self.vars[idx]
    }

    fn maybe_bias(&self, tape: &mut Tape, x: Var, name: &str) -> Var {
        if self.config.bias {
            let b = self.var(name);
            tape.add(x, b)
        } else {
            x
        }
    }

    /// Cultivar embedding rows for a batch, via one-hot × embedding so
    /// gradients reach the embedding matrix.
    pub fn embed_rows(&self, tape: &mut Tape, cultivars: &[usize]) -> Var {
        let b = cultivars.len();
        let n = self.config.n_cultivars;
        let mut onehot = Array2::zeros((b, n));
        for (i, &c) in cultivars.iter().enumerate() {
            onehot[[i, c]] = 1.0;
        }
        let oh = tape.constant(onehot);
        let e = self.var("embedding");
        tape.matmul(oh, e)
    }

    /// Assemble the per-day input on the tape. `features` is a
    /// constant (B × input_dim) Var.
    pub fn assemble(&self, tape: &mut Tape, features: Var, cultivars: &[usize]) -> Var {
        match self.config.embed_mode {
            EmbedMode::Concat => {
                let rows = self.embed_rows(tape, cultivars);
                tape.concat_cols(&[features, rows])
            }
            EmbedMode::Add => {
                let rows = self.embed_rows(tape, cultivars);
                tape.add(features, rows)
            }
            EmbedMode::Mult => {
                let rows = self.embed_rows(tape, cultivars);
                tape.mul(features, rows)
            }
            EmbedMode::MultiHead | EmbedMode::None => features,
        }
    }

    /// One day of the network on the tape; returns (new hidden state,
    /// raw output). `h` is (B × recur_dim) — pass a zero constant for
    /// day 0.
    pub fn step(
        &self,
        tape: &mut Tape,
        h: Var,
        x: Var,
        cultivars: &[usize],
    ) -> (Var, Var) {
        let mut a = x;
        for i in 0..self.config.pre_dims.len() {
            let w = self.var(&format!("pre{i}.w"));
            let m = tape.matmul(a, w);
            let m = self.maybe_bias(tape, m, &format!("pre{i}.b"));
            a = tape.relu(m);
        }

        let mut h_next = h;
        if self.config.arch == Arch::Recurrent {
            let wz = self.var("gru.wz");
            let uz = self.var("gru.uz");
            let xz = tape.matmul(a, wz);
            let hz = tape.matmul(h, uz);
            let zsum = tape.add(xz, hz);
            let zsum = self.maybe_bias(tape, zsum, "gru.bz");
            let z = tape.sigmoid(zsum);

            let wr = self.var("gru.wr");
            let ur = self.var("gru.ur");
            let xr = tape.matmul(a, wr);
            let hr = tape.matmul(h, ur);
            let rsum = tape.add(xr, hr);
            let rsum = self.maybe_bias(tape, rsum, "gru.br");
            let r = tape.sigmoid(rsum);

            let wn = self.var("gru.wn");
            let un = self.var("gru.un");
            let xn = tape.matmul(a, wn);
            let rh = tape.mul(r, h);
            let hn = tape.matmul(rh, un);
            let nsum = tape.add(xn, hn);
            let nsum = self.maybe_bias(tape, nsum, "gru.bn");
            let n = tape.tanh(nsum);

            let one_minus_z = tape.sub_from_scalar(z, 1.0);
            let zn = tape.mul(one_minus_z, n);
            let zh = tape.mul(z, h);
            h_next = tape.add(zn, zh);
            a = h_next;
        }

        for i in 0..self.config.post_dims.len() {
            let w = self.var(&format!("post{i}.w"));
            let m = tape.matmul(a, w);
            let m = self.maybe_bias(tape, m, &format!("post{i}.b"));
            a = tape.relu(m);
        }

        let out = match self.config.embed_mode {
            EmbedMode::MultiHead => {
                // Every head runs on the shared trunk; per-row masks
                // pick each row's own head. Heads not used by any row
                // in the batch are skipped.
                let b = cultivars.len();
                let mut used: Vec<usize> = cultivars.to_vec();
                used.sort_unstable();
                used.dedup();
                let mut acc: Option<Var> = None;
                for c in used {
                    let w = self.var(&format!("head{c}.w"));
                    let m = tape.matmul(a, w);
                    let m = self.maybe_bias(tape, m, &format!("head{c}.b"));
                    let y = tape.tanh(m);
                    let mask = Array2::from_shape_fn((b, self.config.out_dim), |(i, _)| {
                        if cultivars[i] == c {
                            1.0
                        } else {
                            0.0
                        }
                    });
                    let mask_c = tape.constant(mask);
                    let picked = tape.mul(y, mask_c);
                    acc = Some(match acc {
                        Some(s) => tape.add(s, picked),
                        None => picked,
                    });
                }
                acc.expect("non-empty batch")
            }
            _ => {
                let w = self.var("head0.w");
                let m = tape.matmul(a, w);
                let m = self.maybe_bias(tape, m, "head0.b");
                tape.tanh(m)
            }
        };
        (h_next, out)
    }

    /// Zero initial hidden state constant for a batch.
    pub fn zero_state(&self, tape: &mut Tape, batch: usize) -> Var {
        tape.constant(Array2::zeros((batch, self.config.recur_dim.max(1))))
    }

    /// Copy gradient arrays out in `array_names` order (zeros where a
    /// weight did not influence the loss).
    pub fn gradients(
        &self,
        tape: &Tape,
        grads: &crate::autodiff::Gradients,
    ) -> Vec<(String, Array2<f64>)> {
        self.names
            .iter()
            .zip(&self.vars)
            .map(|(name, &v)| {
                let shape = tape.value(v).dim();
                (name.clone(), grads.get_or_zeros(v, shape))
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"DMCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: NetConfig,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
}

/// Serialize weights to the versioned container: magic, version, JSON
/// header (config + array directory), then each array as little-endian
/// 64-bit floats in directory order. Identical weights produce
/// identical bytes.
pub fn save_checkpoint(path: &Path, weights: &NetWeights) -> Result<(), NetError> {
    let io_err = |source| NetError::Io { path: path.display().to_string(), source };
    let names = weights.array_names();
    let header = CheckpointHeader {
        config: weights.config.clone(),
        arrays: names
            .iter()
            .map(|n| {
                let a = weights.array(n).unwrap();
                ArrayEntry { name: n.clone(), rows: a.nrows(), cols: a.ncols() }
            })
            .collect(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| NetError::BadCheckpoint(e.to_string()))?;

    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for n in &names {
        let a = weights.array(n).unwrap();
        for v in a.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    let tmp = path.with_extension("ckpt.tmp");
    let mut f = std::fs::File::create(&tmp).map_err(io_err)?;
    f.write_all(&buf).map_err(io_err)?;
    f.sync_all().map_err(io_err)?;
    std::fs::rename(&tmp, path).map_err(io_err)?;
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<NetWeights, NetError> {
    let io_err = |source| NetError::Io { path: path.display().to_string(), source };
    let mut f = std::fs::File::open(path).map_err(io_err)?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(io_err)?;

    let bad = |msg: &str| NetError::BadCheckpoint(msg.to_string());
    if buf.len() < 12 || &buf[0..4] != CHECKPOINT_MAGIC {
        return Err(bad("missing magic"));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(NetError::BadCheckpoint(format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    if buf.len() < 12 + header_len {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&buf[12..12 + header_len])
        .map_err(|e| NetError::BadCheckpoint(e.to_string()))?;

    // Start from a zero-initialized skeleton and fill from the file.
    let mut weights = init_weights(&header.config, 0)?;
    let expected = weights.array_names();
    let got: Vec<&str> = header.arrays.iter().map(|a| a.name.as_str()).collect();
    if expected != got {
        return Err(NetError::BadCheckpoint(format!(
            "array directory mismatch: expected {expected:?}, found {got:?}"
        )));
    }

    let mut off = 12 + header_len;
    for entry in &header.arrays {
        let n = entry.rows * entry.cols;
        let end = off + n * 8;
        if buf.len() < end {
            return Err(bad("truncated array data"));
        }
        let target = weights.array_mut(&entry.name).unwrap();
        if target.dim() != (entry.rows, entry.cols) {
            return Err(NetError::BadCheckpoint(format!(
                "array {} has shape {:?}, expected {:?}",
                entry.name,
                (entry.rows, entry.cols),
                target.dim()
            )));
        }
        let mut vals = Vec::with_capacity(n);
        for chunk in buf[off..end].chunks_exact(8) {
            vals.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        *target = Array2::from_shape_vec((entry.rows, entry.cols), vals).unwrap();
        off = end;
    }
    if off != buf.len() {
        return Err(bad("trailing bytes after arrays"));
    }
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(mode: EmbedMode) -> NetConfig {
        NetConfig::sized(5, mode, 3, 4, 16)
    }

    fn random_inputs(seed: u64, days: usize, dim: usize) -> Array2<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Array2::from_shape_fn((days, dim), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let cfg = tiny_config(EmbedMode::Concat);
        let a = init_weights(&cfg, 7).unwrap();
        let b = init_weights(&cfg, 7).unwrap();
        assert_eq!(a, b);
        let c = init_weights(&cfg, 8).unwrap();
        assert_ne!(a, c);

        // Concat: first pre layer fan-in is input + embedding.
        assert_eq!(a.pre[0].w.nrows(), 10);
        assert_eq!(a.embedding.dim(), (4, 5));
        // Biases zero.
        assert!(a.pre[0].b.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn multi_head_has_one_head_per_cultivar() {
        let cfg = tiny_config(EmbedMode::MultiHead);
        let w = init_weights(&cfg, 1).unwrap();
        assert_eq!(w.heads.len(), 4);
        assert_eq!(w.embedding.ncols(), 0);
    }

    #[test]
    fn recurrent_matrices_are_orthogonal() {
        let cfg = tiny_config(EmbedMode::None);
        let w = init_weights(&cfg, 3).unwrap();
        let u = &w.gru.as_ref().unwrap().uz;
        let gram = u.t().dot(u);
        for i in 0..gram.nrows() {
            for j in 0..gram.ncols() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - want).abs() < 1e-9, "gram[{i},{j}] = {}", gram[[i, j]]);
            }
        }
    }

    #[test]
    fn outputs_live_in_tanh_range() {
        let cfg = tiny_config(EmbedMode::Concat);
        let w = init_weights(&cfg, 11).unwrap();
        let inputs = random_inputs(5, 40, 5);
        let out = w.forward(&inputs, 2).unwrap();
        assert_eq!(out.dim(), (40, 3));
        for &v in out.iter() {
            assert!(v > -1.0 && v < 1.0);
        }
    }

    #[test]
    fn zero_weights_give_zero_outputs() {
        let cfg = tiny_config(EmbedMode::Add);
        let mut w = init_weights(&cfg, 11).unwrap();
        for name in w.array_names() {
            w.array_mut(&name).unwrap().fill(0.0);
        }
        let inputs = random_inputs(6, 10, 5);
        let out = w.forward(&inputs, 1).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_causal_prefix_consistent() {
        let cfg = tiny_config(EmbedMode::Mult);
        let w = init_weights(&cfg, 13).unwrap();
        let inputs = random_inputs(7, 30, 5);
        let full = w.forward(&inputs, 0).unwrap();

        let prefix = inputs.slice(ndarray::s![..12, ..]).to_owned();
        let part = w.forward(&prefix, 0).unwrap();
        for t in 0..12 {
            for j in 0..3 {
                assert_eq!(full[[t, j]].to_bits(), part[[t, j]].to_bits());
            }
        }

        // Changing a future day leaves earlier outputs untouched.
        let mut perturbed = inputs.clone();
        perturbed[[20, 311 % 5]] += 3.0;
        let out2 = w.forward(&perturbed, 0).unwrap();
        for t in 0..20 {
            for j in 0..3 {
                assert_eq!(full[[t, j]].to_bits(), out2[[t, j]].to_bits());
            }
        }
        assert_ne!(full.row(20), out2.row(20));
    }

    #[test]
    fn embed_identities() {
        // Add with a zero row and Mult with a ones row leave features
        // unchanged.
        let cfg = tiny_config(EmbedMode::Add);
        let mut w = init_weights(&cfg, 17).unwrap();
        w.embedding.row_mut(2).fill(0.0);
        let feats = random_inputs(8, 1, 5);
        let x = w.assemble_input(&feats, &[2]).unwrap();
        assert_eq!(x, feats);

        let cfg = tiny_config(EmbedMode::Mult);
        let mut w = init_weights(&cfg, 17).unwrap();
        w.embedding.row_mut(1).fill(1.0);
        let x = w.assemble_input(&feats, &[1]).unwrap();
        assert_eq!(x, feats);

        let cfg = tiny_config(EmbedMode::Concat);
        let w = init_weights(&cfg, 17).unwrap();
        let x = w.assemble_input(&feats, &[0]).unwrap();
        assert_eq!(x.ncols(), 10);
    }

    #[test]
    fn unknown_cultivar_is_an_error() {
        let cfg = tiny_config(EmbedMode::Concat);
        let w = init_weights(&cfg, 1).unwrap();
        let feats = random_inputs(9, 1, 5);
        assert!(matches!(
            w.assemble_input(&feats, &[9]),
            Err(NetError::BadCultivar { got: 9, n: 4 })
        ));
    }

    #[test]
    fn windowed_full_window_equals_forward() {
        let cfg = tiny_config(EmbedMode::Concat);
        let w = init_weights(&cfg, 19).unwrap();
        let inputs = random_inputs(10, 15, 5);
        let full = w.forward(&inputs, 3).unwrap();
        let windowed = w.forward_windowed(&inputs, 3, 15).unwrap();
        assert_eq!(full, windowed);
    }

    #[test]
    fn windowed_constant_weather_reaches_steady_state() {
        let cfg = tiny_config(EmbedMode::Concat);
        let w = init_weights(&cfg, 23).unwrap();
        let mut inputs = Array2::zeros((30, 5));
        for t in 0..30 {
            for j in 0..5 {
                inputs[[t, j]] = 0.3 * (j as f64 + 1.0);
            }
        }
        let out = w.forward_windowed(&inputs, 1, 7).unwrap();
        // After day 7 every window sees the same 7 constant days.
        for t in 8..30 {
            for j in 0..3 {
                assert_eq!(out[[t, j]].to_bits(), out[[7, j]].to_bits());
            }
        }
    }

    #[test]
    fn ffn_ignores_temporal_order() {
        let cfg = NetConfig::feed_forward(5, EmbedMode::Concat, 3, 4, 16);
        let w = init_weights(&cfg, 29).unwrap();
        let inputs = random_inputs(11, 20, 5);
        let out = w.forward_ffn(&inputs, 2).unwrap();

        // Shuffle the past; day 15's output must not move.
        let mut shuffled = inputs.clone();
        for t in 0..15 {
            let swap = (t * 7) % 15;
            for j in 0..5 {
                let tmp = shuffled[[t, j]];
                shuffled[[t, j]] = shuffled[[swap, j]];
                shuffled[[swap, j]] = tmp;
            }
        }
        let out2 = w.forward_ffn(&shuffled, 2).unwrap();
        for j in 0..3 {
            assert_eq!(out[[15, j]].to_bits(), out2[[15, j]].to_bits());
        }
    }

    #[test]
    fn rescale_endpoints_and_round_trip() {
        let table = ParamTable::gdd();
        let mut raw = Array2::zeros((1, 7));
        raw[[0, 0]] = -1.0; // tbasem [0,15] → 0
        raw[[0, 1]] = 1.0; // teffmx [15,45] → 45
        raw[[0, 2]] = 0.0; // tsumem [10,100] → 55
        let p = rescale(&raw, &table);
        assert_eq!(p[[0, 0]], 0.0);
        assert_eq!(p[[0, 1]], 45.0);
        assert_eq!(p[[0, 2]], 55.0);

        let back = unrescale(&p, &table);
        for j in 0..7 {
            assert!((back[[0, j]] - raw[[0, j]]).abs() < 1e-12);
        }

        // Frozen parameters: rescale returns min, unrescale returns 0.
        let ftable = ParamTable::ferguson();
        let mut raw = Array2::zeros((1, 10));
        raw[[0, 5]] = 0.73;
        let p = rescale(&raw, &ftable);
        assert_eq!(p[[0, 5]], 0.2);
        let back = unrescale(&p, &ftable);
        assert_eq!(back[[0, 5]], 0.0);

        // Numerical strays clamp instead of erroring.
        let mut raw = Array2::zeros((1, 7));
        raw[[0, 0]] = 1.0 + 1e-12;
        let p = rescale(&raw, &table);
        assert_eq!(p[[0, 0]], 15.0);
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        for mode in [
            EmbedMode::Concat,
            EmbedMode::Add,
            EmbedMode::Mult,
            EmbedMode::MultiHead,
            EmbedMode::None,
        ] {
            let cfg = tiny_config(mode);
            let w = init_weights(&cfg, 31).unwrap();
            let days = 12;
            let inputs = random_inputs(33, days, 5);
            let cultivar = 2usize;
            let plain = w.forward(&inputs, cultivar).unwrap();

            let mut tape = Tape::new();
            let net = TapeNet::leaf(&mut tape, &w);
            let mut h = net.zero_state(&mut tape, 1);
            for t in 0..days {
                let row = tape.constant(
                    inputs.row(t).insert_axis(ndarray::Axis(0)).to_owned(),
                );
                let x = net.assemble(&mut tape, row, &[cultivar]);
                let (h2, y) = net.step(&mut tape, h, x, &[cultivar]);
                h = h2;
                let got = tape.value(y);
                for j in 0..3 {
                    assert_eq!(
                        got[[0, j]].to_bits(),
                        plain[[t, j]].to_bits(),
                        "mode {mode:?}, day {t}, col {j}"
                    );
                }
            }
        }
    }

    #[test]
    fn multihead_trunk_is_shared_across_cultivars() {
        let cfg = tiny_config(EmbedMode::MultiHead);
        let w = init_weights(&cfg, 37).unwrap();
        let inputs = random_inputs(41, 8, 5);
        let a = w.forward(&inputs, 0).unwrap();
        let b = w.forward(&inputs, 3).unwrap();
        assert!(a.iter().any(|&v| v != 0.0), "trunk produced all-zero activations");
        // Different heads → different outputs; with identical heads
        // the outputs coincide — check by copying head 3 over head 0.
        assert_ne!(a, b);
        let mut w2 = w.clone();
        w2.heads[0] = w2.heads[3].clone();
        let a2 = w2.forward(&inputs, 0).unwrap();
        for (x, y) in a2.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn tape_gradient_matches_finite_differences_on_tiny_net() {
        let cfg = NetConfig::sized(3, EmbedMode::Concat, 2, 2, 8);
        let mut w = init_weights(&cfg, 43).unwrap();
        // Jitter every array, biases included: freshly initialized
        // zero biases put ReLU inputs exactly on their kink whenever
        // an upstream layer goes fully dead, and finite differences
        // are meaningless at a kink.
        let mut jitter_rng = ChaCha20Rng::seed_from_u64(101);
        for name in w.array_names() {
            for v in w.array_mut(&name).unwrap().iter_mut() {
                *v += (jitter_rng.random::<f64>() - 0.5) * 0.1;
            }
        }
        let days = 6;
        let inputs = random_inputs(47, days, 3);

        let loss_of = |weights: &NetWeights| -> f64 {
            let mut tape = Tape::new();
            let net = TapeNet::leaf(&mut tape, weights);
            let mut h = net.zero_state(&mut tape, 1);
            let mut acc: Option<Var> = None;
            for t in 0..days {
                let row =
                    tape.constant(inputs.row(t).insert_axis(ndarray::Axis(0)).to_owned());
                let x = net.assemble(&mut tape, row, &[1]);
                let (h2, y) = net.step(&mut tape, h, x, &[1]);
                h = h2;
                let sq = tape.square(y);
                let s = tape.sum_all(sq);
                acc = Some(match acc {
                    Some(a) => tape.add(a, s),
                    None => s,
                });
            }
            tape.value(acc.unwrap())[[0, 0]]
        };

        // AD gradients.
        let mut tape = Tape::new();
        let net = TapeNet::leaf(&mut tape, &w);
        let mut h = net.zero_state(&mut tape, 1);
        let mut acc: Option<Var> = None;
        for t in 0..days {
            let row = tape.constant(inputs.row(t).insert_axis(ndarray::Axis(0)).to_owned());
            let x = net.assemble(&mut tape, row, &[1]);
            let (h2, y) = net.step(&mut tape, h, x, &[1]);
            h = h2;
            let sq = tape.square(y);
            let s = tape.sum_all(sq);
            acc = Some(match acc {
                Some(a) => tape.add(a, s),
                None => s,
            });
        }
        let root = acc.unwrap();
        let grads = tape.backward(root);
        let named = net.gradients(&tape, &grads);

        // Probe a handful of coordinates across several arrays. A
        // coordinate whose central differences disagree across step
        // sizes sits on a ReLU boundary; skip those (the derivative is
        // not defined there, so finite differences say nothing).
        let mut rng = ChaCha20Rng::seed_from_u64(53);
        let mut checked = 0;
        let mut skipped = 0;
        for (name, g) in &named {
            for _ in 0..3 {
                let i = rng.random_range(0..g.nrows());
                let j = rng.random_range(0..g.ncols());
                let fd_at = |eps: f64| {
                    let mut up = w.clone();
                    up.array_mut(name).unwrap()[[i, j]] += eps;
                    let mut down = w.clone();
                    down.array_mut(name).unwrap()[[i, j]] -= eps;
                    (loss_of(&up) - loss_of(&down)) / (2.0 * eps)
                };
                let fd1 = fd_at(1e-4);
                let fd2 = fd_at(1e-5);
                if (fd1 - fd2).abs() > 1e-3 * (fd1.abs() + 1e-8) {
                    skipped += 1;
                    continue;
                }
                let ad = g[[i, j]];
                let rel = (ad - fd1).abs() / (fd1.abs() + 1e-8);
                assert!(rel <= 1e-4, "{name}[{i},{j}]: ad {ad} vs fd {fd1} (rel {rel})");
                checked += 1;
            }
        }
        assert!(checked >= 25, "only {checked} smooth coordinates ({skipped} kinked)");
    }

    #[test]
    fn checkpoint_round_trips_and_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(EmbedMode::MultiHead);
        let w = init_weights(&cfg, 59).unwrap();

        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p1, &w).unwrap();
        save_checkpoint(&p2, &w).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let back = load_checkpoint(&p1).unwrap();
        assert_eq!(w, back);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(EmbedMode::None);
        let w = init_weights(&cfg, 61).unwrap();
        let p = dir.path().join("w.ckpt");
        save_checkpoint(&p, &w).unwrap();

        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(NetError::BadCheckpoint(_))));

        save_checkpoint(&p, &w).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 9);
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(NetError::BadCheckpoint(_))));
    }

    #[test]
    fn bias_free_network_maps_zero_to_zero() {
        let mut cfg = tiny_config(EmbedMode::Concat);
        cfg.bias = false;
        let w = init_weights(&cfg, 67).unwrap();
        // No bias arrays listed.
        assert!(w.array_names().iter().all(|n| !n.ends_with(".b") && !n.starts_with("gru.b")));
        let zeros = Array2::zeros((5, 5));
        // Zero features and a zero embedding row → exactly zero output.
        let mut w2 = w.clone();
        w2.embedding.row_mut(0).fill(0.0);
        let out = w2.forward(&zeros, 0).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }
}
