use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::{gru_step, EncoderOutput, ModelConfig, ParamVector};

/// Greedy transducer decoding.
///
/// At each frame the argmax symbol is taken (ties go to the lowest index).
/// A label advances the predictor and stays on the frame, at most
/// `max_symbols_per_frame` times; blank moves to the next frame.
pub fn greedy_decode(
    enc: &EncoderOutput,
    params: &ParamVector,
    cfg: &ModelConfig,
    max_symbols_per_frame: usize,
) -> Result<Vec<usize>> {
    let ctx = &enc.context;
    if ctx.shape().len() != 2 || ctx.cols() != cfg.model_dim {
        return Err(Error::shape("greedy_decode", format!("encoder output {:?}", ctx.shape())));
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let e = g.constant(ctx.clone());
    let e_proj = g.matmul(e, p.get("joint.enc.w"))?;
    let embed = p.get("pred.embed");

    let h0 = g.constant(crate::Tensor::zeros(&[1, cfg.predictor_dim]));
    let start = g.gather_rows(embed, &[cfg.blank()])?;
    let mut h = gru_step(&mut g, &p, start, h0)?;

    let mut out = Vec::new();
    for t in 0..ctx.rows() {
        let et = g.gather_rows(e_proj, &[t])?;
        let mut emitted = 0;
        while emitted < max_symbols_per_frame {
            let q = g.matmul(h, p.get("joint.pred.w"))?;
            let s = g.add(et, q)?;
            let s = g.add_row(s, p.get("joint.b"))?;
            let s = g.tanh(s)?;
            let s = g.matmul(s, p.get("joint.out.w"))?;
            let logits = g.add_row(s, p.get("joint.out.b"))?;
            let best = argmax_first(g.value(logits).data());
            if best == cfg.blank() {
                break;
            }
            out.push(best);
            emitted += 1;
            let x = g.gather_rows(embed, &[best])?;
            h = gru_step(&mut g, &p, x, h)?;
        }
    }
    Ok(out)
}

fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
