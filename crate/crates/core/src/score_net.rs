//! Conditional noise predictor `ε_θ(z_t, t, c)`.
//!
//! A small MLP over `[z, time features]` whose first hidden layer also
//! receives the condition embedding projected by `W_c` (the `w_cond` block).
//! The condition embedding is the sum of a concept row and a context row;
//! both tables carry one extra trailing row used as the null condition.
//!
//! Flat parameter layout, in order:
//!
//! | name            | shape                      |
//! |-----------------|----------------------------|
//! | `concept_embed` | (n_concepts + 1) × d_e     |
//! | `context_embed` | (n_contexts + 1) × d_e     |
//! | `w_in`          | h × (2 + time_embed_dim)   |
//! | `w_cond`        | h × d_e                    |
//! | `b_in`          | 1 × h                      |
//! | `w_hidden{i}`   | h × h   (i = 1..n_hidden_layers) |
//! | `b_hidden{i}`   | 1 × h                      |
//! | `w_out`         | 2 × h                      |
//! | `b_out`         | 1 × 2                      |
//!
//! Matrices are row-major. All arithmetic is f64.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::util::{self, fmt_f64};

/// Rows per work item when a batch is split across threads. Fixed so that
/// reductions happen in the same order regardless of the thread count.
const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// `x * sigmoid(x)`
    Swish,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Swish => "swish",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "swish" | "silu" => Ok(Activation::Swish),
            other => Err(Error::invalid(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub hidden_width: usize,
    pub n_hidden_layers: usize,
    pub time_embed_dim: usize,
    pub cond_embed_dim: usize,
    pub n_concepts: usize,
    pub n_contexts: usize,
    pub activation: Activation,
}

impl NetConfig {
    pub fn new(n_concepts: usize, n_contexts: usize) -> Self {
        Self {
            hidden_width: 128,
            n_hidden_layers: 2,
            time_embed_dim: 16,
            cond_embed_dim: 8,
            n_concepts,
            n_contexts,
            activation: Activation::Swish,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("hidden_width", self.hidden_width),
            ("n_hidden_layers", self.n_hidden_layers),
            ("time_embed_dim", self.time_embed_dim),
            ("cond_embed_dim", self.cond_embed_dim),
            ("n_concepts", self.n_concepts),
            ("n_contexts", self.n_contexts),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::invalid(format!("net.{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Row index of the null concept in `concept_embed`.
    pub fn null_concept(&self) -> usize {
        self.n_concepts
    }

    /// Row index of the null context in `context_embed`.
    pub fn null_context(&self) -> usize {
        self.n_contexts
    }

    pub fn input_dim(&self) -> usize {
        2 + self.time_embed_dim
    }

    pub fn layout(&self) -> Vec<LayoutEntry> {
        let h = self.hidden_width;
        let d = self.cond_embed_dim;
        let mut shapes = vec![
            ("concept_embed".to_string(), (self.n_concepts + 1, d)),
            ("context_embed".to_string(), (self.n_contexts + 1, d)),
            ("w_in".to_string(), (h, self.input_dim())),
            ("w_cond".to_string(), (h, d)),
            ("b_in".to_string(), (1, h)),
        ];
        for i in 1..self.n_hidden_layers {
            shapes.push((format!("w_hidden{i}"), (h, h)));
            shapes.push((format!("b_hidden{i}"), (1, h)));
        }
        shapes.push(("w_out".to_string(), (2, h)));
        shapes.push(("b_out".to_string(), (1, 2)));

        let mut offset = 0;
        shapes
            .into_iter()
            .map(|(name, shape)| {
                let entry = LayoutEntry {
                    name,
                    offset,
                    shape,
                };
                offset += shape.0 * shape.1;
                entry
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(LayoutEntry::len).sum()
    }

    /// Fresh parameters: LeCun-normal weights, zero biases, unit-normal embeddings.
    pub fn init(&self, seed: u64) -> Result<ModelParams> {
        self.validate()?;
        let layout = self.layout();
        let mut flat = vec![0.0; self.param_count()];
        let mut rng = util::rng(seed);
        let first_fan_in = (self.input_dim() + self.cond_embed_dim) as f64;
        for entry in &layout {
            let scale = match entry.name.as_str() {
                "concept_embed" | "context_embed" => 1.0,
                "w_in" | "w_cond" => first_fan_in.powf(-0.5),
                n if n.starts_with("w_") => (entry.shape.1 as f64).powf(-0.5),
                _ => 0.0,
            };
            if scale == 0.0 {
                continue;
            }
            for v in &mut flat[entry.range()] {
                let n: f64 = rng.sample(StandardNormal);
                *v = scale * n;
            }
        }
        Ok(ModelParams {
            config: self.clone(),
            flat,
            layout,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub shape: (usize, usize),
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.0 * self.shape.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: NetConfig,
    pub flat: Vec<f64>,
    pub layout: Vec<LayoutEntry>,
}

/// Condition `c`: a concept and a context, either of which may be null.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Cond {
    pub concept: Option<usize>,
    pub context: Option<usize>,
}

impl Cond {
    pub const NULL: Cond = Cond {
        concept: None,
        context: None,
    };

    pub fn concept(k: usize) -> Self {
        Cond {
            concept: Some(k),
            context: None,
        }
    }

    pub fn with_context(k: usize, c: usize) -> Self {
        Cond {
            concept: Some(k),
            context: Some(c),
        }
    }

    pub fn is_null(&self) -> bool {
        self.concept.is_none() && self.context.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetInput {
    pub z: [f64; 2],
    pub t_norm: f64,
    pub cond: Cond,
}

/// One weighted regression item: contributes `weight * ||ε_θ(input) - target||²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainItem {
    pub input: NetInput,
    pub target: [f64; 2],
    pub weight: f64,
}

/// Which parameters a gradient is taken with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradTarget {
    /// The full flat vector of [`ModelParams`].
    Base,
    /// Only the adapter's `[down, up]` entries; base parameters get nothing.
    Adapter,
}

/// Low-rank delta `ΔW = up · down` on the condition projection `w_cond`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub hidden: usize,
    pub cond_dim: usize,
    /// rank × cond_dim, row-major.
    pub down: Vec<f64>,
    /// hidden × rank, row-major.
    pub up: Vec<f64>,
}

impl LoraAdapter {
    pub const TARGET: &'static str = "w_cond";

    /// `up = 0`, `down ~ N(0, 1/cond_dim)`, so the initial delta is exactly zero.
    pub fn new(config: &NetConfig, rank: usize, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::invalid("LoRA rank must be at least 1"));
        }
        let d = config.cond_embed_dim;
        let mut rng = util::rng(seed);
        let scale = (d as f64).powf(-0.5);
        let down = (0..rank * d)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(Self {
            rank,
            hidden: config.hidden_width,
            cond_dim: d,
            down,
            up: vec![0.0; config.hidden_width * rank],
        })
    }

    pub fn delta(&self) -> Array2<f64> {
        self.up_view().dot(&self.down_view())
    }

    fn down_view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.rank, self.cond_dim), &self.down).expect("adapter shape")
    }

    fn up_view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.hidden, self.rank), &self.up).expect("adapter shape")
    }

    pub fn n_params(&self) -> usize {
        self.down.len() + self.up.len()
    }

    /// Trainable entries as one vector, `down` first.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.down.clone();
        v.extend_from_slice(&self.up);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let n = self.down.len();
        self.down.copy_from_slice(&flat[..n]);
        self.up.copy_from_slice(&flat[n..]);
    }

    fn check(&self, config: &NetConfig) -> Result<()> {
        if self.hidden != config.hidden_width || self.cond_dim != config.cond_embed_dim {
            return Err(Error::invalid(format!(
                "adapter shape {}x{} does not match w_cond {}x{}",
                self.hidden, self.cond_dim, config.hidden_width, config.cond_embed_dim
            )));
        }
        Ok(())
    }

    /// Text dump: header lines, then `down` and `up` rows.
    pub fn to_text(&self, concept: usize) -> String {
        let mut out = String::from("# ant-lab lora adapter v1\n");
        let _ = writeln!(out, "concept={concept}");
        let _ = writeln!(out, "rank={}", self.rank);
        let _ = writeln!(out, "target={}", Self::TARGET);
        let _ = writeln!(out, "down_shape={}x{}", self.rank, self.cond_dim);
        let _ = writeln!(out, "up_shape={}x{}", self.hidden, self.rank);
        let dump = |out: &mut String, label: &str, data: &[f64], cols: usize| {
            let _ = writeln!(out, "{label}");
            for row in data.chunks(cols) {
                let line: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
                let _ = writeln!(out, "{}", line.join(" "));
            }
        };
        dump(&mut out, "down", &self.down, self.cond_dim);
        dump(&mut out, "up", &self.up, self.rank);
        out
    }

    /// Inverse of [`LoraAdapter::to_text`]; returns the adapter and its concept id.
    pub fn from_text(text: &str) -> Result<(Self, usize)> {
        const WHAT: &str = "adapter file";
        let mut header = std::collections::BTreeMap::new();
        let mut section = None;
        let mut down = Vec::new();
        let mut up = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line {
                "down" | "up" => {
                    section = Some(line.to_string());
                    continue;
                }
                _ => {}
            }
            match section.as_deref() {
                None => {
                    let (k, v) = line
                        .split_once('=')
                        .ok_or_else(|| Error::parse(WHAT, i + 1, "expected key=value"))?;
                    header.insert(k.trim().to_string(), v.trim().to_string());
                }
                Some(sec) => {
                    let dst = if sec == "down" { &mut down } else { &mut up };
                    for tok in line.split_whitespace() {
                        dst.push(
                            tok.parse::<f64>()
                                .map_err(|e| Error::parse(WHAT, i + 1, e.to_string()))?,
                        );
                    }
                }
            }
        }
        let get = |k: &str| {
            header
                .get(k)
                .ok_or_else(|| Error::parse(WHAT, 0, format!("missing {k}")))
        };
        let dims = |k: &str| -> Result<(usize, usize)> {
            let v = get(k)?;
            let (a, b) = v
                .split_once('x')
                .ok_or_else(|| Error::parse(WHAT, 0, format!("bad shape {v}")))?;
            let p = |s: &str| s.parse::<usize>().map_err(|e| Error::parse(WHAT, 0, e.to_string()));
            Ok((p(a)?, p(b)?))
        };
        let concept = get("concept")?
            .parse::<usize>()
            .map_err(|e| Error::parse(WHAT, 0, e.to_string()))?;
        let (rank, cond_dim) = dims("down_shape")?;
        let (hidden, rank2) = dims("up_shape")?;
        if rank != rank2 || down.len() != rank * cond_dim || up.len() != hidden * rank {
            return Err(Error::parse(WHAT, 0, "matrix sizes disagree with header"));
        }
        Ok((
            Self {
                rank,
                hidden,
                cond_dim,
                down,
                up,
            },
            concept,
        ))
    }
}

/// Borrowed views of every block of a parameter vector.
struct NetViews<'a> {
    concept_embed: ArrayView2<'a, f64>,
    context_embed: ArrayView2<'a, f64>,
    w_in: ArrayView2<'a, f64>,
    w_cond: ArrayView2<'a, f64>,
    b_in: ArrayView1<'a, f64>,
    hidden: Vec<(ArrayView2<'a, f64>, ArrayView1<'a, f64>)>,
    w_out: ArrayView2<'a, f64>,
    b_out: ArrayView1<'a, f64>,
}

/// Offsets of each block inside the flat vector, in layout order.
struct Offsets {
    concept_embed: usize,
    context_embed: usize,
    w_in: usize,
    w_cond: usize,
    b_in: usize,
    hidden: Vec<(usize, usize)>,
    w_out: usize,
    b_out: usize,
}

impl ModelParams {
    pub fn new(config: NetConfig, flat: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if flat.len() != config.param_count() {
            return Err(Error::invalid(format!(
                "parameter vector has {} entries, config needs {}",
                flat.len(),
                config.param_count()
            )));
        }
        Ok(Self {
            config,
            flat,
            layout,
        })
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn entry(&self, name: &str) -> Option<&LayoutEntry> {
        self.layout.iter().find(|e| e.name == name)
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.entry(name).map(|e| &self.flat[e.range()])
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.entry(name)?.range();
        Some(&mut self.flat[range])
    }

    /// The condition projection `W_c` (h × d_e).
    pub fn w_cond(&self) -> Array2<f64> {
        let e = self.entry("w_cond").expect("layout has w_cond");
        ArrayView2::from_shape(e.shape, &self.flat[e.range()])
            .expect("w_cond shape")
            .to_owned()
    }

    pub fn set_w_cond(&mut self, w: &Array2<f64>) -> Result<()> {
        let e = self.entry("w_cond").expect("layout has w_cond").clone();
        if w.dim() != e.shape {
            return Err(Error::invalid(format!(
                "w_cond replacement has shape {:?}, expected {:?}",
                w.dim(),
                e.shape
            )));
        }
        for (dst, src) in self.flat[e.range()].iter_mut().zip(w.iter()) {
            *dst = *src;
        }
        Ok(())
    }

    /// Fold an adapter into `w_cond` (naive merge `W + ΔW`).
    pub fn merge_adapter(&self, adapter: &LoraAdapter) -> Result<ModelParams> {
        adapter.check(&self.config)?;
        let mut merged = self.clone();
        let w = self.w_cond() + adapter.delta();
        merged.set_w_cond(&w)?;
        Ok(merged)
    }

    /// Condition embedding `e = concept_row + context_row` (null rows for `None`).
    pub fn cond_embedding(&self, cond: Cond) -> Result<Vec<f64>> {
        self.check_cond(cond)?;
        let v = self.views();
        let (k, c) = self.cond_rows(cond);
        Ok((&v.concept_embed.row(k) + &v.context_embed.row(c)).to_vec())
    }

    fn cond_rows(&self, cond: Cond) -> (usize, usize) {
        (
            cond.concept.unwrap_or(self.config.null_concept()),
            cond.context.unwrap_or(self.config.null_context()),
        )
    }

    fn check_cond(&self, cond: Cond) -> Result<()> {
        if let Some(k) = cond.concept {
            if k >= self.config.n_concepts {
                return Err(Error::invalid(format!(
                    "concept id {k} outside vocabulary of {}",
                    self.config.n_concepts
                )));
            }
        }
        if let Some(c) = cond.context {
            if c >= self.config.n_contexts {
                return Err(Error::invalid(format!(
                    "context id {c} outside vocabulary of {}",
                    self.config.n_contexts
                )));
            }
        }
        Ok(())
    }

    fn check_input(&self, input: &NetInput) -> Result<()> {
        if !(0.0..=1.0).contains(&input.t_norm) {
            return Err(Error::invalid(format!("t_norm {} outside [0, 1]", input.t_norm)));
        }
        self.check_cond(input.cond)
    }

    fn offsets(&self) -> Offsets {
        let off = |name: &str| self.entry(name).expect("layout entry").offset;
        Offsets {
            concept_embed: off("concept_embed"),
            context_embed: off("context_embed"),
            w_in: off("w_in"),
            w_cond: off("w_cond"),
            b_in: off("b_in"),
            hidden: (1..self.config.n_hidden_layers)
                .map(|i| (off(&format!("w_hidden{i}")), off(&format!("b_hidden{i}"))))
                .collect(),
            w_out: off("w_out"),
            b_out: off("b_out"),
        }
    }

    fn views(&self) -> NetViews<'_> {
        let cfg = &self.config;
        let h = cfg.hidden_width;
        let d = cfg.cond_embed_dim;
        let o = self.offsets();
        let m = |off: usize, r: usize, c: usize| {
            ArrayView2::from_shape((r, c), &self.flat[off..off + r * c]).expect("block shape")
        };
        let v = |off: usize, n: usize| ArrayView1::from(&self.flat[off..off + n]);
        NetViews {
            concept_embed: m(o.concept_embed, cfg.n_concepts + 1, d),
            context_embed: m(o.context_embed, cfg.n_contexts + 1, d),
            w_in: m(o.w_in, h, cfg.input_dim()),
            w_cond: m(o.w_cond, h, d),
            b_in: v(o.b_in, h),
            hidden: o.hidden.iter().map(|&(w, b)| (m(w, h, h), v(b, h))).collect(),
            w_out: m(o.w_out, 2, h),
            b_out: v(o.b_out, 2),
        }
    }

    pub fn checksum(&self) -> String {
        util::sha256_f64s(&self.flat)
    }
}

/// Sinusoidal time features: `sin(2^i t), cos(2^i t)` for `i = 0..dim/2`,
/// plus raw `t` when `dim` is odd.
pub fn time_features(t_norm: f64, dim: usize, out: &mut [f64]) {
    let half = dim / 2;
    for i in 0..half {
        let arg = (1u64 << i.min(62)) as f64 * t_norm;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    if dim % 2 == 1 {
        out[dim - 1] = t_norm;
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct Tape {
    x: Array2<f64>,
    e: Array2<f64>,
    pre: Vec<Array2<f64>>,
    act: Vec<Array2<f64>>,
    out: Array2<f64>,
}

fn forward_tape(
    params: &ModelParams,
    views: &NetViews<'_>,
    w_eff: ArrayView2<'_, f64>,
    inputs: &[NetInput],
) -> Tape {
    let cfg = &params.config;
    let b = inputs.len();
    let td = cfg.time_embed_dim;
    let mut x = Array2::zeros((b, cfg.input_dim()));
    let mut e = Array2::zeros((b, cfg.cond_embed_dim));
    for (i, inp) in inputs.iter().enumerate() {
        let mut row = x.row_mut(i);
        let row = row.as_slice_mut().expect("contiguous row");
        row[0] = inp.z[0];
        row[1] = inp.z[1];
        time_features(inp.t_norm, td, &mut row[2..]);
        let (k, c) = params.cond_rows(inp.cond);
        let mut er = e.row_mut(i);
        er.assign(&views.concept_embed.row(k));
        er += &views.context_embed.row(c);
    }

    let mut pre = Vec::with_capacity(cfg.n_hidden_layers);
    let mut act = Vec::with_capacity(cfg.n_hidden_layers);
    let mut p0 = x.dot(&views.w_in.t());
    p0 += &e.dot(&w_eff.t());
    p0 += &views.b_in;
    act.push(p0.mapv(|v| v * sigmoid(v)));
    pre.push(p0);
    for (w, bias) in &views.hidden {
        let mut p = act.last().expect("layer").dot(&w.t());
        p += bias;
        act.push(p.mapv(|v| v * sigmoid(v)));
        pre.push(p);
    }
    let mut out = act.last().expect("layer").dot(&views.w_out.t());
    out += &views.b_out;
    Tape {
        x,
        e,
        pre,
        act,
        out,
    }
}

fn effective_w_cond(views: &NetViews<'_>, adapter: Option<&LoraAdapter>) -> Array2<f64> {
    match adapter {
        Some(a) => &views.w_cond + &a.delta(),
        None => views.w_cond.to_owned(),
    }
}

/// Batched forward pass.
pub fn forward_batch(
    params: &ModelParams,
    inputs: &[NetInput],
    adapter: Option<&LoraAdapter>,
) -> Result<Vec<[f64; 2]>> {
    for inp in inputs {
        params.check_input(inp)?;
    }
    if let Some(a) = adapter {
        a.check(&params.config)?;
    }
    let views = params.views();
    let w_eff = effective_w_cond(&views, adapter);
    let chunks: Vec<Vec<[f64; 2]>> = inputs
        .par_chunks(CHUNK)
        .map(|chunk| {
            let tape = forward_tape(params, &views, w_eff.view(), chunk);
            tape.out.rows().into_iter().map(|r| [r[0], r[1]]).collect()
        })
        .collect();
    Ok(chunks.into_iter().flatten().collect())
}

/// Single-input forward pass.
pub fn forward(
    params: &ModelParams,
    z: [f64; 2],
    t_norm: f64,
    cond: Cond,
    adapter: Option<&LoraAdapter>,
) -> Result<[f64; 2]> {
    let out = forward_batch(params, &[NetInput { z, t_norm, cond }], adapter)?;
    Ok(out[0])
}

/// Weighted squared-error loss `Σ w_b ||ε_θ(x_b) − y_b||²` and its exact
/// reverse-mode gradient with respect to `target`.
pub fn weighted_loss_and_grad(
    params: &ModelParams,
    items: &[TrainItem],
    adapter: Option<&LoraAdapter>,
    target: GradTarget,
) -> Result<(f64, Vec<f64>)> {
    for it in items {
        params.check_input(&it.input)?;
    }
    let grad_len = match (target, adapter) {
        (GradTarget::Base, _) => params.len(),
        (GradTarget::Adapter, Some(a)) => {
            a.check(&params.config)?;
            a.n_params()
        }
        (GradTarget::Adapter, None) => {
            return Err(Error::invalid("adapter gradient requested without an adapter"))
        }
    };
    let views = params.views();
    let w_eff = effective_w_cond(&views, adapter);
    let offsets = params.offsets();

    let partials: Vec<(f64, Vec<f64>)> = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            chunk_grad(
                params,
                &views,
                &offsets,
                w_eff.view(),
                chunk,
                adapter,
                target,
                grad_len,
            )
        })
        .collect();

    let mut loss = 0.0;
    let mut grad = vec![0.0; grad_len];
    for (l, g) in partials {
        loss += l;
        for (acc, v) in grad.iter_mut().zip(&g) {
            *acc += v;
        }
    }
    Ok((loss, grad))
}

#[allow(clippy::too_many_arguments)]
fn chunk_grad(
    params: &ModelParams,
    views: &NetViews<'_>,
    offsets: &Offsets,
    w_eff: ArrayView2<'_, f64>,
    chunk: &[TrainItem],
    adapter: Option<&LoraAdapter>,
    target: GradTarget,
    grad_len: usize,
) -> (f64, Vec<f64>) {
    let cfg = &params.config;
    let inputs: Vec<NetInput> = chunk.iter().map(|it| it.input).collect();
    let tape = forward_tape(params, views, w_eff, &inputs);

    let mut loss = 0.0;
    let mut dout = Array2::zeros((chunk.len(), 2));
    for (i, it) in chunk.iter().enumerate() {
        let r0 = tape.out[[i, 0]] - it.target[0];
        let r1 = tape.out[[i, 1]] - it.target[1];
        loss += it.weight * (r0 * r0 + r1 * r1);
        dout[[i, 0]] = 2.0 * it.weight * r0;
        dout[[i, 1]] = 2.0 * it.weight * r1;
    }

    let mut grad = vec![0.0; grad_len];
    let base = target == GradTarget::Base;
    let put = |grad: &mut [f64], off: usize, m: &Array2<f64>| {
        for (dst, v) in grad[off..off + m.len()].iter_mut().zip(m.iter()) {
            *dst += v;
        }
    };
    let put1 = |grad: &mut [f64], off: usize, m: &Array1<f64>| {
        for (dst, v) in grad[off..off + m.len()].iter_mut().zip(m.iter()) {
            *dst += v;
        }
    };

    let n_layers = tape.pre.len();
    if base {
        put(&mut grad, offsets.w_out, &dout.t().dot(&tape.act[n_layers - 1]));
        put1(&mut grad, offsets.b_out, &dout.sum_axis(Axis(0)));
    }
    let mut da = dout.dot(&views.w_out);
    for l in (0..n_layers).rev() {
        let mut dpre = tape.pre[l].mapv(|v| {
            let s = sigmoid(v);
            s * (1.0 + v * (1.0 - s))
        });
        dpre *= &da;
        if l > 0 {
            let (w, _) = &views.hidden[l - 1];
            if base {
                let (wo, bo) = offsets.hidden[l - 1];
                put(&mut grad, wo, &dpre.t().dot(&tape.act[l - 1]));
                put1(&mut grad, bo, &dpre.sum_axis(Axis(0)));
            }
            da = dpre.dot(w);
        } else {
            let dw_eff = dpre.t().dot(&tape.e);
            if base {
                put(&mut grad, offsets.w_in, &dpre.t().dot(&tape.x));
                put(&mut grad, offsets.w_cond, &dw_eff);
                put1(&mut grad, offsets.b_in, &dpre.sum_axis(Axis(0)));
                let de = dpre.dot(&w_eff);
                let d = cfg.cond_embed_dim;
                for (i, it) in chunk.iter().enumerate() {
                    let (k, c) = params.cond_rows(it.input.cond);
                    let row = de.row(i);
                    for j in 0..d {
                        grad[offsets.concept_embed + k * d + j] += row[j];
                        grad[offsets.context_embed + c * d + j] += row[j];
                    }
                }
            } else {
                let a = adapter.expect("adapter present for adapter gradient");
                let d_down = a.up_view().t().dot(&dw_eff);
                let d_up = dw_eff.dot(&a.down_view().t());
                let n_down = a.down.len();
                for (dst, v) in grad[..n_down].iter_mut().zip(d_down.iter()) {
                    *dst += v;
                }
                for (dst, v) in grad[n_down..].iter_mut().zip(d_up.iter()) {
                    *dst += v;
                }
            }
        }
    }
    (loss, grad)
}

/// Mean squared error `1/B Σ ||ε_θ(z_b, t_b, c_b) − target_b||²` and its gradient.
pub fn backward(
    params: &ModelParams,
    batch: &[(NetInput, [f64; 2])],
    adapter: Option<&LoraAdapter>,
    target: GradTarget,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::invalid("backward needs a non-empty batch"));
    }
    let w = 1.0 / batch.len() as f64;
    let items: Vec<TrainItem> = batch
        .iter()
        .map(|(input, target)| TrainItem {
            input: *input,
            target: *target,
            weight: w,
        })
        .collect();
    weighted_loss_and_grad(params, &items, adapter, target)
}

/// Read-only snapshot of a parameter vector, used as the stop-gradient teacher.
#[derive(Debug, Clone)]
pub struct FrozenParams {
    inner: Arc<ModelParams>,
    checksum: String,
}

impl FrozenParams {
    pub fn params(&self) -> &ModelParams {
        &self.inner
    }

    /// Checksum recorded when the snapshot was taken.
    pub fn recorded_checksum(&self) -> &str {
        &self.checksum
    }

    /// Checksum recomputed from the current contents.
    pub fn current_checksum(&self) -> String {
        self.inner.checksum()
    }
}

impl std::ops::Deref for FrozenParams {
    type Target = ModelParams;

    fn deref(&self) -> &ModelParams {
        &self.inner
    }
}

pub fn clone_frozen(params: &ModelParams) -> FrozenParams {
    FrozenParams {
        inner: Arc::new(params.clone()),
        checksum: params.checksum(),
    }
}

const CHECKPOINT_MAGIC: &str = "# ant-lab checkpoint v1";

impl ModelParams {
    /// Text checkpoint: config `key=value` lines, the layout table, then the
    /// values (17 significant digits, whitespace separated).
    pub fn to_checkpoint(&self) -> String {
        let c = &self.config;
        let mut out = String::new();
        let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(out, "hidden_width={}", c.hidden_width);
        let _ = writeln!(out, "n_hidden_layers={}", c.n_hidden_layers);
        let _ = writeln!(out, "time_embed_dim={}", c.time_embed_dim);
        let _ = writeln!(out, "cond_embed_dim={}", c.cond_embed_dim);
        let _ = writeln!(out, "n_concepts={}", c.n_concepts);
        let _ = writeln!(out, "n_contexts={}", c.n_contexts);
        let _ = writeln!(out, "activation={}", c.activation.name());
        let _ = writeln!(out, "layout");
        for e in &self.layout {
            let _ = writeln!(out, "{} {} {}x{}", e.name, e.offset, e.shape.0, e.shape.1);
        }
        let _ = writeln!(out, "values {}", self.flat.len());
        for row in self.flat.chunks(8) {
            let line: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        const WHAT: &str = "checkpoint";
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == CHECKPOINT_MAGIC => {}
            _ => return Err(Error::parse(WHAT, 1, "missing checkpoint header")),
        }
        let mut kv = std::collections::BTreeMap::new();
        let mut layout = Vec::new();
        let mut values = Vec::new();
        let mut expected = None;
        let mut stage = 0;
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            match stage {
                0 if line == "layout" => stage = 1,
                0 => {
                    let (k, v) = line
                        .split_once('=')
                        .ok_or_else(|| Error::parse(WHAT, i + 1, "expected key=value"))?;
                    kv.insert(k.trim().to_string(), v.trim().to_string());
                }
                1 if line.starts_with("values") => {
                    let n = line["values".len()..]
                        .trim()
                        .parse::<usize>()
                        .map_err(|e| Error::parse(WHAT, i + 1, e.to_string()))?;
                    expected = Some(n);
                    stage = 2;
                }
                1 => {
                    let parts: Vec<&str> = line.split_whitespace().collect();
                    if parts.len() != 3 {
                        return Err(Error::parse(WHAT, i + 1, "expected `name offset RxC`"));
                    }
                    let offset = parts[1]
                        .parse::<usize>()
                        .map_err(|e| Error::parse(WHAT, i + 1, e.to_string()))?;
                    let (r, c) = parts[2]
                        .split_once('x')
                        .ok_or_else(|| Error::parse(WHAT, i + 1, "bad shape"))?;
                    let dim = |s: &str| {
                        s.parse::<usize>()
                            .map_err(|e| Error::parse(WHAT, i + 1, e.to_string()))
                    };
                    layout.push(LayoutEntry {
                        name: parts[0].to_string(),
                        offset,
                        shape: (dim(r)?, dim(c)?),
                    });
                }
                _ => {
                    for tok in line.split_whitespace() {
                        values.push(
                            tok.parse::<f64>()
                                .map_err(|e| Error::parse(WHAT, i + 1, e.to_string()))?,
                        );
                    }
                }
            }
        }
        let num = |k: &str| -> Result<usize> {
            kv.get(k)
                .ok_or_else(|| Error::parse(WHAT, 0, format!("missing {k}")))?
                .parse::<usize>()
                .map_err(|e| Error::parse(WHAT, 0, format!("{k}: {e}")))
        };
        let config = NetConfig {
            hidden_width: num("hidden_width")?,
            n_hidden_layers: num("n_hidden_layers")?,
            time_embed_dim: num("time_embed_dim")?,
            cond_embed_dim: num("cond_embed_dim")?,
            n_concepts: num("n_concepts")?,
            n_contexts: num("n_contexts")?,
            activation: Activation::parse(
                kv.get("activation").map(String::as_str).unwrap_or("swish"),
            )?,
        };
        if expected != Some(values.len()) {
            return Err(Error::parse(
                WHAT,
                0,
                format!("expected {:?} values, found {}", expected, values.len()),
            ));
        }
        let params = ModelParams::new(config, values)?;
        if params.layout != layout {
            return Err(Error::parse(WHAT, 0, "layout table does not match config"));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        util::write_atomic(path, self.to_checkpoint().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> NetConfig {
        NetConfig {
            hidden_width: 12,
            n_hidden_layers: 2,
            time_embed_dim: 6,
            cond_embed_dim: 4,
            n_concepts: 3,
            n_contexts: 2,
            activation: Activation::Swish,
        }
    }

    fn input(z: [f64; 2], t: f64, cond: Cond) -> NetInput {
        NetInput { z, t_norm: t, cond }
    }

    fn probe_items(cfg: &NetConfig) -> Vec<TrainItem> {
        let conds = [
            Cond::NULL,
            Cond::concept(1),
            Cond::with_context(2, 0),
            Cond::with_context(0, cfg.n_contexts - 1),
        ];
        (0..8)
            .map(|i| {
                let f = i as f64;
                TrainItem {
                    input: input([(f * 0.7).sin() * 2.0, (f * 1.3).cos()], 0.05 + 0.11 * f, conds[i % 4]),
                    target: [(f * 0.5).cos(), -(f * 0.9).sin()],
                    weight: 0.25 + 0.1 * f,
                }
            })
            .collect()
    }

    fn fd_check(loss: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64], coords: &[usize]) {
        let h = 1e-5;
        for &i in coords {
            let mut xp = x.to_vec();
            xp[i] += h;
            let mut xm = x.to_vec();
            xm[i] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            let scale = fd.abs().max(grad[i].abs()).max(1e-6);
            assert!(
                (fd - grad[i]).abs() / scale < 1e-4,
                "coord {i}: analytic {} vs fd {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn base_gradient_matches_finite_differences() {
        let cfg = small_config();
        let p = cfg.init(11).unwrap();
        let items = probe_items(&cfg);
        let (_, grad) = weighted_loss_and_grad(&p, &items, None, GradTarget::Base).unwrap();
        // a few coordinates from every block, including the used embedding rows
        let mut coords = Vec::new();
        for e in &p.layout {
            let r = e.range();
            for j in [0, e.len() / 2, e.len() - 1] {
                coords.push(r.start + j);
            }
        }
        let loss = |flat: &[f64]| {
            let q = ModelParams::new(cfg.clone(), flat.to_vec()).unwrap();
            weighted_loss_and_grad(&q, &items, None, GradTarget::Base).unwrap().0
        };
        fd_check(loss, &p.flat, &grad, &coords);
    }

    #[test]
    fn adapter_gradient_matches_finite_differences() {
        let cfg = small_config();
        let p = cfg.init(12).unwrap();
        let mut a = LoraAdapter::new(&cfg, 2, 3).unwrap();
        let up: Vec<f64> = (0..a.up.len()).map(|i| 0.1 * (i as f64).sin()).collect();
        a.up = up;
        let items = probe_items(&cfg);
        let (_, grad) = weighted_loss_and_grad(&p, &items, Some(&a), GradTarget::Adapter).unwrap();
        let x = a.to_flat();
        let loss = |flat: &[f64]| {
            let mut b = a.clone();
            b.set_flat(flat);
            weighted_loss_and_grad(&p, &items, Some(&b), GradTarget::Base).unwrap().0
        };
        let coords: Vec<usize> = (0..x.len()).collect();
        fd_check(loss, &x, &grad, &coords);
    }

    #[test]
    fn layout_is_contiguous() {
        for cfg in [small_config(), NetConfig::new(8, 20)] {
            let layout = cfg.layout();
            let mut next = 0;
            for e in &layout {
                assert_eq!(e.offset, next, "{}", e.name);
                next += e.len();
            }
            assert_eq!(next, cfg.param_count());
        }
        let cfg = NetConfig::new(8, 20);
        let expect = 9 * 8 + 21 * 8 + 128 * 18 + 128 * 8 + 128 + 128 * 128 + 128 + 2 * 128 + 2;
        assert_eq!(cfg.param_count(), expect);
    }

    #[test]
    fn rejects_out_of_vocabulary_ids() {
        let p = small_config().init(1).unwrap();
        assert!(forward(&p, [0.0, 0.0], 0.5, Cond::concept(3), None).is_err());
        assert!(forward(&p, [0.0, 0.0], 0.5, Cond::with_context(0, 2), None).is_err());
        assert!(forward(&p, [0.0, 0.0], 1.5, Cond::NULL, None).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let p = small_config().init(2).unwrap();
        let a = forward(&p, [0.3, -1.0], 0.4, Cond::with_context(1, 0), None).unwrap();
        let b = forward(&p, [0.3, -1.0], 0.4, Cond::with_context(1, 0), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_adapter_is_a_no_op() {
        let cfg = small_config();
        let p = cfg.init(3).unwrap();
        let a = LoraAdapter::new(&cfg, 2, 4).unwrap();
        assert!(a.delta().iter().all(|&v| v == 0.0));
        let inputs = [
            input([0.1, 0.2], 0.3, Cond::concept(2)),
            input([-1.0, 0.7], 0.9, Cond::NULL),
        ];
        assert_eq!(
            forward_batch(&p, &inputs, Some(&a)).unwrap(),
            forward_batch(&p, &inputs, None).unwrap()
        );
    }

    #[test]
    fn unused_embedding_rows_do_not_leak() {
        let p = small_config().init(5).unwrap();
        let mut q = p.clone();
        let d = q.config.cond_embed_dim;
        // perturb concept 2's row only
        q.block_mut("concept_embed").unwrap()[2 * d..3 * d]
            .iter_mut()
            .for_each(|v| *v += 0.7);
        for cond in [Cond::concept(0), Cond::with_context(1, 1), Cond::NULL] {
            let a = forward(&p, [0.4, 0.1], 0.2, cond, None).unwrap();
            let b = forward(&q, [0.4, 0.1], 0.2, cond, None).unwrap();
            assert_eq!(a, b);
        }
        let a = forward(&p, [0.4, 0.1], 0.2, Cond::concept(2), None).unwrap();
        let b = forward(&q, [0.4, 0.1], 0.2, Cond::concept(2), None).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn null_output_depends_only_on_null_rows() {
        let p = small_config().init(6).unwrap();
        let cfg = &p.config;
        let d = cfg.cond_embed_dim;
        let base = forward(&p, [1.0, -0.5], 0.6, Cond::NULL, None).unwrap();
        for (table, rows) in [("concept_embed", cfg.n_concepts), ("context_embed", cfg.n_contexts)] {
            for r in 0..rows {
                let mut q = p.clone();
                q.block_mut(table).unwrap()[r * d..(r + 1) * d]
                    .iter_mut()
                    .for_each(|v| *v -= 1.3);
                assert_eq!(forward(&q, [1.0, -0.5], 0.6, Cond::NULL, None).unwrap(), base);
            }
        }
    }

    #[test]
    fn exact_targets_give_zero_loss_and_grad() {
        let p = small_config().init(7).unwrap();
        let inputs = [
            input([0.1, 0.2], 0.3, Cond::concept(2)),
            input([-1.0, 0.7], 0.9, Cond::NULL),
        ];
        let outs = forward_batch(&p, &inputs, None).unwrap();
        let batch: Vec<_> = inputs.iter().copied().zip(outs).collect();
        let (loss, grad) = backward(&p, &batch, None, GradTarget::Base).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn duplicating_the_batch_is_invariant() {
        let p = small_config().init(8).unwrap();
        let batch = vec![
            (input([0.1, 0.2], 0.3, Cond::concept(2)), [0.5, -0.5]),
            (input([-1.0, 0.7], 0.9, Cond::NULL), [0.0, 1.0]),
            (input([2.0, 0.0], 0.05, Cond::with_context(0, 1)), [1.0, 1.0]),
        ];
        let mut doubled = batch.clone();
        doubled.extend(batch.iter().copied());
        let (l1, g1) = backward(&p, &batch, None, GradTarget::Base).unwrap();
        let (l2, g2) = backward(&p, &doubled, None, GradTarget::Base).unwrap();
        assert!((l1 - l2).abs() < 1e-14 * l1.abs().max(1.0));
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() <= 1e-13 * a.abs().max(1e-3));
        }
    }

    #[test]
    fn adapter_gradient_leaves_base_untouched() {
        let cfg = small_config();
        let p = cfg.init(9).unwrap();
        let mut a = LoraAdapter::new(&cfg, 2, 10).unwrap();
        a.up.iter_mut().enumerate().for_each(|(i, v)| *v = 0.01 * i as f64);
        let batch = vec![(input([0.1, 0.2], 0.3, Cond::concept(1)), [0.5, -0.5])];
        let (_, g) = backward(&p, &batch, Some(&a), GradTarget::Adapter).unwrap();
        assert_eq!(g.len(), a.n_params());
        assert!(g.iter().any(|&v| v != 0.0));
        assert!(backward(&p, &batch, None, GradTarget::Adapter).is_err());
    }

    #[test]
    fn merge_matches_adapter_forward() {
        let cfg = small_config();
        let p = cfg.init(11).unwrap();
        let mut a = LoraAdapter::new(&cfg, 3, 12).unwrap();
        a.up.iter_mut().enumerate().for_each(|(i, v)| *v = 0.02 * (i as f64).sin());
        let merged = p.merge_adapter(&a).unwrap();
        let x = forward(&p, [0.3, 0.3], 0.5, Cond::concept(1), Some(&a)).unwrap();
        let y = forward(&merged, [0.3, 0.3], 0.5, Cond::concept(1), None).unwrap();
        assert!((x[0] - y[0]).abs() < 1e-12 && (x[1] - y[1]).abs() < 1e-12);
    }

    #[test]
    fn frozen_clone_is_independent() {
        let mut p = small_config().init(13).unwrap();
        let frozen = clone_frozen(&p);
        let before = frozen.current_checksum();
        p.flat.iter_mut().for_each(|v| *v += 1.0);
        assert_eq!(frozen.current_checksum(), before);
        assert_eq!(frozen.recorded_checksum(), before);
        assert_ne!(p.checksum(), before);
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let p = small_config().init(14).unwrap();
        let text = p.to_checkpoint();
        let q = ModelParams::from_checkpoint(&text).unwrap();
        assert_eq!(p.config, q.config);
        assert!(p.flat.iter().zip(&q.flat).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(q.to_checkpoint(), text);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn checkpoint_round_trips_any_values(seed in 0u64..10_000, scale in -30i32..30) {
            let mut p = small_config().init(seed).unwrap();
            let f = 2f64.powi(scale);
            for (i, v) in p.flat.iter_mut().enumerate() {
                *v *= if i % 7 == 0 { -f } else { f };
            }
            let q = ModelParams::from_checkpoint(&p.to_checkpoint()).unwrap();
            proptest::prop_assert!(p.flat.iter().zip(&q.flat).all(|(a, b)| a.to_bits() == b.to_bits()));
            let blocks: usize = q.layout.iter().map(LayoutEntry::len).sum();
            proptest::prop_assert_eq!(blocks, q.len());
        }
    }

    #[test]
    fn checkpoint_rejects_truncation() {
        let text = small_config().init(15).unwrap().to_checkpoint();
        let cut = &text[..text.len() - 40];
        assert!(ModelParams::from_checkpoint(cut).is_err());
    }

    #[test]
    fn adapter_text_round_trips() {
        let cfg = small_config();
        let mut a = LoraAdapter::new(&cfg, 2, 16).unwrap();
        a.up.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 / 7.0);
        let (b, concept) = LoraAdapter::from_text(&a.to_text(5)).unwrap();
        assert_eq!(concept, 5);
        assert_eq!(a, b);
    }
}
