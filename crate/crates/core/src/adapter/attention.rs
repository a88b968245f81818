use ndarray::Array2;

use crate::graph::{Tape, Var};

use super::{ensure_finite, AdapterError, FaceTokens, ImageKv};

/// Frozen text-branch projections of one backbone cross-attention site.
#[derive(Debug, Clone, PartialEq)]
pub struct TextAttentionWeights {
    /// `[d_model × d_attn]`
    pub to_q: Array2<f64>,
    /// `[d_ctx × d_attn]`
    pub to_k: Array2<f64>,
    /// `[d_ctx × d_attn]`
    pub to_v: Array2<f64>,
}

/// Conditioning seen by one decoupled cross-attention call.
#[derive(Debug, Clone)]
pub struct AttentionContext {
    /// `[n_text × d_ctx]`
    pub text_ctx: Array2<f64>,
    pub image_ctx: FaceTokens,
    pub lambda: f64,
}

/// `softmax(q kᵀ / √d) v`, single head.
pub(crate) fn attention_on_tape(tape: &mut Tape, q: Var, k: Var, v: Var) -> Var {
    let d = tape.value(q).ncols() as f64;
    let scores = tape.matmul_t(q, k);
    let scores = tape.scale(scores, 1.0 / d.sqrt());
    let probs = tape.softmax_rows(scores);
    tape.matmul(probs, v)
}

/// Projections for one decoupled site, already on the tape.
pub(crate) struct SiteVars {
    pub to_q: Var,
    pub to_k: Var,
    pub to_v: Var,
}

/// Text attention plus `lambda` times image attention over the same queries.
///
/// With no image branch, or `lambda == 0`, the image path is not built at
/// all and the result is the text attention node itself.
pub(crate) fn decoupled_on_tape(
    tape: &mut Tape,
    z: Var,
    text_ctx: Var,
    site: &SiteVars,
    image: Option<(Var, Var, Var)>,
    lambda: f64,
) -> Var {
    let q = tape.matmul(z, site.to_q);
    let k_text = tape.matmul(text_ctx, site.to_k);
    let v_text = tape.matmul(text_ctx, site.to_v);
    let text = attention_on_tape(tape, q, k_text, v_text);
    match image {
        Some((image_ctx, to_k_img, to_v_img)) if lambda != 0.0 => {
            let k_img = tape.matmul(image_ctx, to_k_img);
            let v_img = tape.matmul(image_ctx, to_v_img);
            let img = attention_on_tape(tape, q, k_img, v_img);
            let img = tape.scale(img, lambda);
            tape.add(text, img)
        }
        _ => text,
    }
}

fn check_shapes(
    z: &Array2<f64>,
    text_ctx: &Array2<f64>,
    w: &TextAttentionWeights,
) -> Result<(), AdapterError> {
    let shape = |context: &str, expected: usize, actual: usize| {
        if expected == actual {
            Ok(())
        } else {
            Err(AdapterError::Shape {
                context: context.into(),
                expected: expected.to_string(),
                actual: actual.to_string(),
            })
        }
    };
    shape("query width vs to_q rows", w.to_q.nrows(), z.ncols())?;
    shape(
        "text context width vs to_k rows",
        w.to_k.nrows(),
        text_ctx.ncols(),
    )?;
    shape(
        "text context width vs to_v rows",
        w.to_v.nrows(),
        text_ctx.ncols(),
    )?;
    shape("to_k cols vs to_q cols", w.to_q.ncols(), w.to_k.ncols())?;
    shape("to_v cols vs to_q cols", w.to_q.ncols(), w.to_v.ncols())?;
    ensure_finite("query features", z)?;
    ensure_finite("text context", text_ctx)?;
    ensure_finite("to_q", &w.to_q)?;
    ensure_finite("to_k", &w.to_k)?;
    ensure_finite("to_v", &w.to_v)
}

/// The backbone's own cross-attention, no adapter involved.
pub fn text_cross_attention(
    z: &Array2<f64>,
    text_ctx: &Array2<f64>,
    w: &TextAttentionWeights,
) -> Result<Array2<f64>, AdapterError> {
    check_shapes(z, text_ctx, w)?;
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let tv = tape.constant(text_ctx.clone());
    let site = SiteVars {
        to_q: tape.constant(w.to_q.clone()),
        to_k: tape.constant(w.to_k.clone()),
        to_v: tape.constant(w.to_v.clone()),
    };
    let out = decoupled_on_tape(&mut tape, zv, tv, &site, None, 0.0);
    Ok(tape.value(out).clone())
}

/// `Z_new = Attn(Q, K_text, V_text) + λ · Attn(Q, K_img, V_img)` with
/// `Q = Z W_q`, `K_img = c W_k_img`, `V_img = c W_v_img`.
pub fn decoupled_cross_attention(
    z: &Array2<f64>,
    ctx: &AttentionContext,
    text: &TextAttentionWeights,
    image: &ImageKv,
) -> Result<Array2<f64>, AdapterError> {
    check_shapes(z, &ctx.text_ctx, text)?;
    let c = &ctx.image_ctx.tokens;
    if image.to_k_img.nrows() != c.ncols() || image.to_v_img.nrows() != c.ncols() {
        return Err(AdapterError::Shape {
            context: "face token width vs image projection rows".into(),
            expected: c.ncols().to_string(),
            actual: format!("{}/{}", image.to_k_img.nrows(), image.to_v_img.nrows()),
        });
    }
    if image.to_k_img.ncols() != text.to_q.ncols() || image.to_v_img.ncols() != text.to_q.ncols() {
        return Err(AdapterError::Shape {
            context: "image projection width vs attention width".into(),
            expected: text.to_q.ncols().to_string(),
            actual: format!("{}/{}", image.to_k_img.ncols(), image.to_v_img.ncols()),
        });
    }
    ensure_finite("face tokens", c)?;
    ensure_finite("to_k_img", &image.to_k_img)?;
    ensure_finite("to_v_img", &image.to_v_img)?;
    if !ctx.lambda.is_finite() {
        return Err(AdapterError::NonFinite("lambda".into()));
    }
    if ctx.lambda < 0.0 {
        return Err(AdapterError::Argument(format!(
            "lambda must be non-negative, got {}",
            ctx.lambda
        )));
    }

    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let tv = tape.constant(ctx.text_ctx.clone());
    let site = SiteVars {
        to_q: tape.constant(text.to_q.clone()),
        to_k: tape.constant(text.to_k.clone()),
        to_v: tape.constant(text.to_v.clone()),
    };
    let cv = tape.constant(c.clone());
    let kv = tape.constant(image.to_k_img.clone());
    let vv = tape.constant(image.to_v_img.clone());
    let out = decoupled_on_tape(&mut tape, zv, tv, &site, Some((cv, kv, vv)), ctx.lambda);
    Ok(tape.value(out).clone())
}
