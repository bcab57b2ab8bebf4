use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Cross-modal contrastive loss over unimodal embeddings, one `[N, E]`
/// matrix per modality.
///
/// For each anchor `(p, m)` the positives are the other modalities of patch
/// `p` and the negatives are the other modalities of every other patch.
/// Same-modality pairs never appear.
pub fn contrastive_loss(g: &mut Graph, unimodal: &[Var], tau: f64) -> Result<Var> {
    let m = unimodal.len();
    if m < 2 {
        return Err(Error::ContrastiveInapplicable(format!("{m} modality")));
    }
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let first = g.shape(unimodal[0]).to_vec();
    if unimodal.iter().any(|&u| g.shape(u) != first.as_slice()) {
        let shapes: Vec<Vec<usize>> = unimodal.iter().map(|&u| g.shape(u).to_vec()).collect();
        let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
        return Err(Error::shape("contrastive_loss", &refs));
    }
    let n = first[0];
    if n < 2 {
        return Err(Error::ContrastiveInapplicable(format!("{n} patch")));
    }
    let z = g.concat(unimodal, 0)?;
    let z = g.normalize(z)?;
    let zt = g.transpose(z)?;
    let sim = g.matmul(z, zt)?;
    let sim = g.scale(sim, 1.0 / tau)?;
    let e = g.exp(sim)?;
    // Row/column index r = modality * n + patch.
    let rows = m * n;
    let mut pos = vec![0.0; rows * rows];
    let mut neg = vec![0.0; rows * rows];
    for r in 0..rows {
        for c in 0..rows {
            let (mr, pr) = (r / n, r % n);
            let (mc, pc) = (c / n, c % n);
            if mr != mc {
                if pr == pc {
                    pos[r * rows + c] = 1.0;
                } else {
                    neg[r * rows + c] = 1.0;
                }
            }
        }
    }
    let pos = g.constant(Tensor::new(vec![rows, rows], pos)?);
    let neg = g.constant(Tensor::new(vec![rows, rows], neg)?);
    let num = g.mul(e, pos)?;
    let num = g.sum(num, 1)?;
    let den = g.mul(e, neg)?;
    let den = g.sum(den, 1)?;
    let ln = g.log(num)?;
    let ld = g.log(den)?;
    let per = g.sub(ld, ln)?;
    g.mean_all(per)
}

/// Mean squared L2 distance between predictions `[N, E]` and gradient-free
/// teacher targets `[N, E]` over the dropped patches.
pub fn jepa_loss(g: &mut Graph, pred: Var, teacher: &Tensor, dropped: &[usize]) -> Result<Var> {
    if dropped.is_empty() {
        return Err(Error::EmptyDropSet);
    }
    if g.shape(pred) != teacher.shape() {
        return Err(Error::shape("jepa_loss", &[g.shape(pred), teacher.shape()]));
    }
    let t = g.constant(teacher.clone());
    let p = g.index_select(pred, dropped)?;
    let t = g.index_select(t, dropped)?;
    let d = g.sub(p, t)?;
    let sq = g.mul(d, d)?;
    let s = g.sum_all(sq)?;
    g.scale(s, 1.0 / dropped.len() as f64)
}
