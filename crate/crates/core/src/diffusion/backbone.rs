use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{Array2, Array4};

use crate::adapter::{
    attention_on_tape, decoupled_on_tape, encode_on_tape, AdapterVars, AdapterWeights, SiteVars,
    TextAttentionWeights,
};
use crate::graph::{RowMap, Tape, Var};
use crate::tensor::{checksum, eye, normal_matrix, rng_for, NamedTensors, Stream};

use super::{
    BackboneSpec, ConditionBundle, DiffusionError, FaceCondition, LatentVideo, NoisePredictor,
    NoiseSchedule,
};

/// Frozen weights of the toy backbone.
///
/// Layout per level `i` (width `w`): a cross-attention site with
/// `to_q [w×w]`, `to_k/to_v [d_ctx×w]`, `to_out [w×w]`; optionally the
/// temporal layer with `to_q/to_k/to_v/to_out [w×w]`; `down`/`up` projections
/// between levels; `time.level{i}` projecting the timestep code. Input and
/// output projections are `conv_in [C×w0]` and `conv_out [w0×C]`. The output
/// adds `√(1−ᾱ_t)·z_t`, the optimal linear denoiser for unit-variance data,
/// so the untrained network already predicts something sensible.
#[derive(Debug, Clone)]
pub struct BackboneWeights {
    spec: BackboneSpec,
    schedule: NoiseSchedule,
    tensors: NamedTensors,
}

/// Adapter state wired into one backbone forward pass.
pub(crate) struct AdapterBinding<'a> {
    pub vars: &'a AdapterVars,
    pub face_tokens: Var,
    pub lambda: f64,
}

fn shapes(spec: &BackboneSpec) -> Vec<(String, (usize, usize))> {
    let mut out = Vec::new();
    let c = spec.latent_channels;
    let w0 = spec.levels[0].width;
    out.push(("conv_in".to_string(), (c, w0)));
    for (i, level) in spec.levels.iter().enumerate() {
        let w = level.width;
        out.push((format!("time.level{i}"), (spec.d_time, w)));
        if i > 0 {
            let prev = spec.levels[i - 1].width;
            out.push((format!("level{i}.down"), (prev, w)));
            out.push((format!("level{i}.up"), (w, prev)));
        }
        let x = BackboneSpec::cross_attention_id(i);
        out.push((format!("{x}.to_q"), (w, w)));
        out.push((format!("{x}.to_k"), (spec.d_ctx, w)));
        out.push((format!("{x}.to_v"), (spec.d_ctx, w)));
        out.push((format!("{x}.to_out"), (w, w)));
        if spec.temporal_level == Some(i) {
            let tl = BackboneSpec::temporal_id(i);
            for p in ["to_q", "to_k", "to_v", "to_out"] {
                out.push((format!("{tl}.{p}"), (w, w)));
            }
        }
    }
    out.push(("conv_out".to_string(), (w0, c)));
    out
}

impl BackboneWeights {
    /// Seeded "pretrained" weights.
    pub fn new(spec: BackboneSpec) -> Result<Self, DiffusionError> {
        spec.validate()?;
        let mut rng = rng_for(spec.weight_seed, Stream::BackboneInit, 0);
        let mut tensors = NamedTensors::new();
        for (name, (rows, cols)) in shapes(&spec) {
            let gain = if name == "conv_out" { 0.5 } else { 1.0 };
            let t = normal_matrix(&mut rng, rows, cols, gain / (rows as f64).sqrt());
            tensors.insert(name, t);
        }
        Self::from_tensors(spec, tensors)
    }

    /// Every projection set to the (rectangular) identity.
    pub fn identity(spec: BackboneSpec) -> Result<Self, DiffusionError> {
        spec.validate()?;
        let tensors = shapes(&spec)
            .into_iter()
            .map(|(name, (r, c))| (name, eye(r, c)))
            .collect();
        Self::from_tensors(spec, tensors)
    }

    pub fn from_tensors(spec: BackboneSpec, tensors: NamedTensors) -> Result<Self, DiffusionError> {
        spec.validate()?;
        for (name, dim) in shapes(&spec) {
            match tensors.get(&name) {
                Some(t) if t.dim() == dim => {}
                Some(t) => {
                    return Err(DiffusionError::Shape {
                        context: name,
                        expected: format!("{dim:?}"),
                        actual: format!("{:?}", t.dim()),
                    })
                }
                None => {
                    return Err(DiffusionError::Spec(format!(
                        "missing backbone tensor {name}"
                    )))
                }
            }
        }
        let schedule = NoiseSchedule::for_spec(&spec)?;
        Ok(Self {
            spec,
            schedule,
            tensors,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn tensors(&self) -> &NamedTensors {
        &self.tensors
    }

    pub fn checksum(&self) -> String {
        checksum(&self.tensors)
    }

    /// Text-branch projections of cross-attention level `level`.
    pub fn text_attention(&self, level: usize) -> TextAttentionWeights {
        let x = BackboneSpec::cross_attention_id(level);
        TextAttentionWeights {
            to_q: self.tensors[&format!("{x}.to_q")].clone(),
            to_k: self.tensors[&format!("{x}.to_k")].clone(),
            to_v: self.tensors[&format!("{x}.to_v")].clone(),
        }
    }

    /// Every backbone tensor as a constant leaf.
    pub(crate) fn to_tape(&self, tape: &mut Tape) -> HashMap<String, Var> {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
            .collect()
    }

    fn check_inputs(
        &self,
        z_t: &LatentVideo,
        t: usize,
        text: &Array2<f64>,
    ) -> Result<(), DiffusionError> {
        let (_, c, h, w) = z_t.z.dim();
        let s = &self.spec;
        if c != s.latent_channels || h != s.latent_size || w != s.latent_size {
            return Err(DiffusionError::Shape {
                context: "latent".into(),
                expected: format!(
                    "[T, {}, {}, {}]",
                    s.latent_channels, s.latent_size, s.latent_size
                ),
                actual: format!("{:?}", z_t.z.dim()),
            });
        }
        if t >= s.n_steps {
            return Err(DiffusionError::Argument(format!(
                "timestep {t} outside [0, {})",
                s.n_steps
            )));
        }
        if text.ncols() != s.d_ctx || text.nrows() == 0 {
            return Err(DiffusionError::Shape {
                context: "text embedding".into(),
                expected: format!("[n, {}]", s.d_ctx),
                actual: format!("{:?}", text.dim()),
            });
        }
        if !crate::tensor::all_finite(text) {
            return Err(DiffusionError::NonFinite("text embedding".into()));
        }
        Ok(())
    }

    /// Noise prediction on a tape. Returns `[T·H·W × C]` tokens.
    pub(crate) fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &HashMap<String, Var>,
        z_t: &LatentVideo,
        t: usize,
        text: Var,
        adapter: Option<&AdapterBinding<'_>>,
    ) -> Var {
        let spec = &self.spec;
        let (frames, _, size, _) = z_t.z.dim();
        let x = tape.constant(tokens_from_latent(&z_t.z));
        let temb = tape.constant(timestep_embedding(t, spec.d_time));

        let h = tape.matmul(x, vars["conv_in"]);
        let te = tape.matmul(temb, vars["time.level0"]);
        let h = tape.add_row(h, te);
        let mut h = tape.silu(h);
        let mut side = size;
        let mut skips = Vec::with_capacity(spec.levels.len());

        for level in 0..spec.levels.len() {
            if level > 0 {
                h = tape.row_mix(h, Arc::new(pool_map(frames, side)));
                side /= 2;
                h = tape.matmul(h, vars[&format!("level{level}.down")]);
                let te = tape.matmul(temb, vars[&format!("time.level{level}")]);
                h = tape.add_row(h, te);
                h = tape.silu(h);
            }

            let id = BackboneSpec::cross_attention_id(level);
            let site = SiteVars {
                to_q: vars[&format!("{id}.to_q")],
                to_k: vars[&format!("{id}.to_k")],
                to_v: vars[&format!("{id}.to_v")],
            };
            // Adapter hooks exist only at cross-attention sites.
            let (image, lambda) = match adapter {
                Some(b) => {
                    let (k, v) = b.vars.layers[&id];
                    (Some((b.face_tokens, k, v)), b.lambda)
                }
                None => (None, 0.0),
            };
            let attn = decoupled_on_tape(tape, h, text, &site, image, lambda);
            let attn = tape.matmul(attn, vars[&format!("{id}.to_out")]);
            h = tape.add(h, attn);

            if spec.temporal_level == Some(level) {
                h = self.temporal_on_tape(tape, vars, h, level, frames, side * side);
            }
            skips.push(h);
        }

        let mut h = skips.pop().expect("at least one level");
        for level in (1..spec.levels.len()).rev() {
            let up = tape.row_mix(h, Arc::new(upsample_map(frames, side)));
            side *= 2;
            let up = tape.matmul(up, vars[&format!("level{level}.up")]);
            h = tape.add(skips[level - 1], up);
        }

        let out = tape.matmul(h, vars["conv_out"]);
        let c_skip = (1.0 - self.schedule.alpha_bar(t)).sqrt();
        let skip = tape.scale(x, c_skip);
        tape.add(out, skip)
    }

    /// Per-pixel self-attention across frames, with a sinusoidal frame code.
    fn temporal_on_tape(
        &self,
        tape: &mut Tape,
        vars: &HashMap<String, Var>,
        h: Var,
        level: usize,
        frames: usize,
        pixels: usize,
    ) -> Var {
        let id = BackboneSpec::temporal_id(level);
        let width = tape.value(h).ncols();
        let code = timestep_embedding_rows(frames, width);
        let pe = Array2::from_shape_fn((frames * pixels, width), |(r, j)| code[[r / pixels, j]]);
        let pe = tape.constant(pe);
        let hp = tape.add(h, pe);
        let q = tape.matmul(hp, vars[&format!("{id}.to_q")]);
        let k = tape.matmul(hp, vars[&format!("{id}.to_k")]);
        let v = tape.matmul(hp, vars[&format!("{id}.to_v")]);

        let mut blocks = Vec::with_capacity(pixels);
        for p in 0..pixels {
            let idx: Vec<usize> = (0..frames).map(|f| f * pixels + p).collect();
            let map = Arc::new(RowMap::gather(&idx));
            let qb = tape.row_mix(q, map.clone());
            let kb = tape.row_mix(k, map.clone());
            let vb = tape.row_mix(v, map);
            blocks.push(attention_on_tape(tape, qb, kb, vb));
        }
        let stacked = tape.vstack(&blocks);
        // Pixel-major (p·T + f) back to frame-major (f·P + p).
        let back: Vec<usize> = (0..frames * pixels)
            .map(|r| (r % pixels) * frames + r / pixels)
            .collect();
        let mixed = tape.row_mix(stacked, Arc::new(RowMap::gather(&back)));
        let out = tape.matmul(mixed, vars[&format!("{id}.to_out")]);
        tape.add(h, out)
    }

    /// Run a full prediction on a fresh tape without gradients.
    fn predict_inner(
        &self,
        adapter: Option<&AdapterWeights>,
        z_t: &LatentVideo,
        t: usize,
        cond: &ConditionBundle,
        lambda: f64,
    ) -> Result<Array4<f64>, DiffusionError> {
        self.check_inputs(z_t, t, &cond.text_embedding)?;
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(DiffusionError::Argument(format!(
                "lambda must be finite and >= 0, got {lambda}"
            )));
        }
        let face = match (&cond.face, adapter) {
            (Some(_), None) => {
                return Err(DiffusionError::Config(
                    "face condition supplied but no adapter weights are loaded".into(),
                ))
            }
            (Some(f), Some(a)) => {
                a.validate(&self.spec)?;
                Some((f, a))
            }
            (None, _) => None,
        };

        let mut tape = Tape::new();
        let vars = self.to_tape(&mut tape);
        let text = tape.constant(cond.text_embedding.clone());
        let out = match face {
            None => self.forward_on_tape(&mut tape, &vars, z_t, t, text, None),
            Some((f, a)) => {
                let avars = a.to_tape(&mut tape, false);
                let face_tokens = face_tokens_on_tape(&mut tape, &avars, f, a)?;
                let binding = AdapterBinding {
                    vars: &avars,
                    face_tokens,
                    lambda,
                };
                self.forward_on_tape(&mut tape, &vars, z_t, t, text, Some(&binding))
            }
        };
        let (frames, c, h, w) = z_t.z.dim();
        Ok(latent_from_tokens(tape.value(out), frames, c, h, w))
    }
}

pub(crate) fn face_tokens_on_tape(
    tape: &mut Tape,
    vars: &AdapterVars,
    face: &FaceCondition,
    adapter: &AdapterWeights,
) -> Result<Var, DiffusionError> {
    let cfg = &adapter.config;
    match face {
        FaceCondition::Tokens(ft) => {
            if ft.tokens.ncols() != cfg.d_ctx {
                return Err(DiffusionError::Shape {
                    context: "face tokens".into(),
                    expected: format!("[n, {}]", cfg.d_ctx),
                    actual: format!("{:?}", ft.tokens.dim()),
                });
            }
            if !crate::tensor::all_finite(&ft.tokens) {
                return Err(DiffusionError::NonFinite("face tokens".into()));
            }
            Ok(tape.constant(ft.tokens.clone()))
        }
        FaceCondition::Features(f) => {
            if f.tokens.ncols() != cfg.d_feature {
                return Err(DiffusionError::Shape {
                    context: format!("features of {}", f.source_id),
                    expected: cfg.d_feature.to_string(),
                    actual: f.tokens.ncols().to_string(),
                });
            }
            let fv = tape.constant(f.tokens.clone());
            Ok(encode_on_tape(tape, vars, fv))
        }
    }
}

/// `ε_θ(z_t, t, C, C_i)`. With no face condition or `lambda == 0` this is
/// exactly the frozen backbone's prediction.
pub fn predict_noise(
    backbone: &BackboneWeights,
    adapter: Option<&AdapterWeights>,
    z_t: &LatentVideo,
    t: usize,
    cond: &ConditionBundle,
    lambda: f64,
) -> Result<Array4<f64>, DiffusionError> {
    backbone.predict_inner(adapter, z_t, t, cond, lambda)
}

/// Layer ids at which an adapter would be attached to `backbone`.
pub fn adapter_hook_sites(backbone: &BackboneSpec, adapter: &AdapterWeights) -> Vec<String> {
    adapter
        .layers
        .keys()
        .filter(|id| {
            backbone
                .layers()
                .iter()
                .any(|(lid, kind)| lid == *id && *kind == super::LayerKind::CrossAttention)
        })
        .cloned()
        .collect()
}

/// Backbone plus optional adapter at a fixed scale.
#[derive(Clone, Copy)]
pub struct Denoiser<'a> {
    pub backbone: &'a BackboneWeights,
    pub adapter: Option<&'a AdapterWeights>,
    pub lambda: f64,
}

impl NoisePredictor for Denoiser<'_> {
    fn predict(
        &self,
        z_t: &LatentVideo,
        t: usize,
        cond: &ConditionBundle,
    ) -> Result<Array4<f64>, DiffusionError> {
        predict_noise(self.backbone, self.adapter, z_t, t, cond, self.lambda)
    }
}

/// `[T, C, H, W]` to `[(T·H + y)·W + x, C]`.
pub(crate) fn tokens_from_latent(z: &Array4<f64>) -> Array2<f64> {
    let (t, c, h, w) = z.dim();
    Array2::from_shape_fn((t * h * w, c), |(r, ch)| {
        let (f, rem) = (r / (h * w), r % (h * w));
        z[[f, ch, rem / w, rem % w]]
    })
}

pub(crate) fn latent_from_tokens(
    tokens: &Array2<f64>,
    t: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Array4<f64> {
    Array4::from_shape_fn((t, c, h, w), |(f, ch, y, x)| {
        tokens[[(f * h + y) * w + x, ch]]
    })
}

/// Sinusoidal code of a scalar position, `[1 × d]`.
pub(crate) fn timestep_embedding(t: usize, d: usize) -> Array2<f64> {
    let half = d / 2;
    Array2::from_shape_fn((1, d), |(_, j)| {
        let k = j % half;
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let a = t as f64 * freq;
        if j < half {
            a.sin()
        } else {
            a.cos()
        }
    })
}

fn timestep_embedding_rows(n: usize, d: usize) -> Array2<f64> {
    let half = (d / 2).max(1);
    Array2::from_shape_fn((n, d), |(pos, j)| {
        let k = j % half;
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let a = pos as f64 * freq;
        if j < half {
            a.sin()
        } else {
            a.cos()
        }
    })
}

/// 2×2 average pooling over each frame of a `side × side` token grid.
fn pool_map(frames: usize, side: usize) -> RowMap {
    let half = side / 2;
    let mut entries = Vec::with_capacity(frames * side * side);
    for f in 0..frames {
        for y in 0..side {
            for x in 0..side {
                let out = f * half * half + (y / 2) * half + x / 2;
                let inp = f * side * side + y * side + x;
                entries.push((out as u32, inp as u32, 0.25));
            }
        }
    }
    RowMap {
        out_rows: frames * half * half,
        entries,
    }
}

/// Nearest-neighbour 2× upsampling of a `side × side` token grid.
fn upsample_map(frames: usize, side: usize) -> RowMap {
    let big = side * 2;
    let mut entries = Vec::with_capacity(frames * big * big);
    for f in 0..frames {
        for y in 0..big {
            for x in 0..big {
                let out = f * big * big + y * big + x;
                let inp = f * side * side + (y / 2) * side + x / 2;
                entries.push((out as u32, inp as u32, 1.0));
            }
        }
    }
    RowMap {
        out_rows: frames * big * big,
        entries,
    }
}
