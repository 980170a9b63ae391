//! Browser bindings for a static demo page: attention-mask grids, the
//! logit soft-cap curve and chat-template rendering.
//!
//! Each export is a thin wrapper over a plain Rust function of the same
//! name with a `_text` or `_values` suffix, which native tests call.

use gemma2_core::chat;
use gemma2_core::model::{attention_mask, LayerKind, ModelConfig};
use gemma2_core::tensor::kernels;
use gemma2_core::tokenizer;
use wasm_bindgen::prelude::*;

/// Largest grid the page will draw.
pub const MAX_GRID: usize = 64;

/// One line per query row, `#` for a visible key and `.` otherwise.
pub fn mask_grid_text(kind: &str, seq_len: usize, window: usize) -> Result<String, String> {
    let kind = match kind {
        "local" => LayerKind::Local,
        "global" => LayerKind::Global,
        other => return Err(format!("unknown layer kind `{other}`, expected local or global")),
    };
    if seq_len == 0 || seq_len > MAX_GRID {
        return Err(format!("sequence length must be in 1..={MAX_GRID}"));
    }
    if window == 0 {
        return Err("window must be positive".into());
    }
    let mask = attention_mask(kind, seq_len, window, seq_len);
    let mut out = String::with_capacity(seq_len * (seq_len + 1));
    for i in 0..seq_len {
        out.extend((0..seq_len).map(|j| if mask.get(i, j) { '#' } else { '.' }));
        out.push('\n');
    }
    Ok(out)
}

/// `n` evenly spaced points `(x, cap * tanh(x / cap))` over `[lo, hi]`,
/// flattened as x0, y0, x1, y1, ...
pub fn soft_cap_values(cap: f64, lo: f64, hi: f64, n: usize) -> Result<Vec<f64>, String> {
    if !(cap > 0.0 && cap.is_finite()) {
        return Err("cap must be positive".into());
    }
    if !(lo < hi) || n < 2 || n > 10_000 {
        return Err("need lo < hi and 2 <= n <= 10000".into());
    }
    Ok((0..n)
        .flat_map(|i| {
            let x = lo + (hi - lo) * i as f64 / (n - 1) as f64;
            [x, kernels::soft_cap(x, cap)]
        })
        .collect())
}

/// Renders transcript lines (`user: ...` / `model: ...`, blank line between
/// dialogues) to the control-token stream text the model reads.
pub fn render_chat_text(transcript: &str, for_generation: bool) -> Result<String, String> {
    let dialogues = chat::read_transcript(transcript).map_err(|e| e.to_string())?;
    if dialogues.is_empty() {
        return Err("transcript has no turns".into());
    }
    let mut ids = Vec::new();
    for d in &dialogues {
        ids.extend(chat::render_dialogue(d, for_generation).map_err(|e| e.to_string())?);
    }
    let text = tokenizer::to_stream_text(&ids).map_err(|e| e.to_string())?;
    Ok(String::from_utf8_lossy(&text).into_owned())
}

/// Embedding and non-embedding parameter counts of a named preset, as JSON.
pub fn param_count_text(preset: &str) -> Result<String, String> {
    let cfg = ModelConfig::preset(preset).ok_or_else(|| format!("unknown preset `{preset}`"))?;
    serde_json::to_string(&cfg.count_params()).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn mask_grid(kind: &str, seq_len: usize, window: usize) -> Result<String, JsError> {
    mask_grid_text(kind, seq_len, window).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn soft_cap_curve(cap: f64, lo: f64, hi: f64, n: usize) -> Result<Vec<f64>, JsError> {
    soft_cap_values(cap, lo, hi, n).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn render_chat(transcript: &str, for_generation: bool) -> Result<String, JsError> {
    render_chat_text(transcript, for_generation).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn param_counts(preset: &str) -> Result<String, JsError> {
    param_count_text(preset).map_err(|e| JsError::new(&e))
}
