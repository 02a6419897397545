use rand::Rng;

use crate::encoders::ParamBuilder;
use crate::error::{Error, OpKind, Result};
use crate::tensor::{Padding, ParamId, Session, Tensor, Var};
use crate::text::ProcessedText;

/// Query-by-document extents of the first-layer filter groups.
pub const FILTER_GROUPS: [(usize, usize); 3] = [(3, 3), (3, 4), (3, 5)];

/// `[m, n]` indicator of exact token matches over the first `m` query and
/// `n` document positions.
pub fn exact_match_indicator(q: &ProcessedText, d: &ProcessedText, m: usize, n: usize) -> Result<Tensor> {
    if m > q.len() || n > d.len() {
        return Err(Error::InvalidArgument("indicator extent exceeds the text length".into()));
    }
    let mut values = vec![0.0; m * n];
    for i in 0..m {
        let Some(qk) = q.match_key(i) else { continue };
        for j in 0..n {
            if d.match_key(j).as_ref() == Some(&qk) {
                values[i * n + j] = 1.0;
            }
        }
    }
    Tensor::new([m, n], values)
}

/// Builds the `[m, n, k + 1]` match tensor from `[m, k]` query and `[n, k]`
/// document states, or the single-channel exact-match tensor when no states
/// are given. Entries at masked positions are zero.
pub fn build_match_tensor(
    s: &mut Session,
    states: Option<(Var, Var)>,
    q: &ProcessedText,
    d: &ProcessedText,
    alpha: Var,
) -> Result<Var> {
    let (m, n) = match states {
        Some((qs, ds)) => {
            let a = s.tape.value(qs)?.shape().to_vec();
            let b = s.tape.value(ds)?.shape().to_vec();
            if a.len() != 2 || b.len() != 2 || a[1] != b[1] {
                return Err(Error::shape(OpKind::PairwiseProduct, &[&a, &b], "query and document states must share k"));
            }
            (a[0], b[0])
        }
        None => (q.true_length(), d.true_length()),
    };
    let indicator = exact_match_indicator(q, d, m, n)?;
    let ind = s.constant(Tensor::new([m, n, 1], indicator.into_values())?)?;
    let exact = s.tape.scalar_scale(ind, alpha)?;
    let Some((qs, ds)) = states else { return Ok(exact) };
    let mut prod = s.tape.pairwise_product(qs, ds)?;
    let (qm, dm) = (&q.mask()[..m], &d.mask()[..n]);
    if qm.iter().chain(dm).any(|&x| !x) {
        let k = s.tape.value(qs)?.shape()[1];
        let mut mask = Vec::with_capacity(m * n * k);
        for &a in qm {
            for &b in dm {
                mask.extend(std::iter::repeat_n(if a && b { 1.0 } else { 0.0 }, k));
            }
        }
        let mask = s.constant(Tensor::new([m, n, k], mask)?)?;
        prod = s.tape.mul(prod, mask)?;
    }
    s.tape.concat(&[prod, exact], 2)
}

/// Convolutional head over a match tensor: three full-depth filter groups
/// with ReLU, a 1x1 layer with ReLU, then a global max-pool.
#[derive(Debug, Clone)]
pub struct ScoringHead {
    groups: Vec<(ParamId, ParamId)>,
    second: (ParamId, ParamId),
    channels: usize,
    features: usize,
}

impl ScoringHead {
    pub(crate) fn build<R: Rng>(b: &mut ParamBuilder<R>, channels: usize, first: usize, second: usize) -> Result<Self> {
        let mut groups = Vec::new();
        for (qh, dw) in FILTER_GROUPS {
            let name = format!("match_head.conv{qh}x{dw}");
            let fan_in = qh * dw * channels;
            groups.push((
                b.glorot(&format!("{name}.filters"), &[first, qh, dw, channels], fan_in, first)?,
                b.zeros(&format!("{name}.bias"), &[first])?,
            ));
        }
        let width = first * FILTER_GROUPS.len();
        let second_ids = (
            b.glorot("match_head.conv1x1.filters", &[second, 1, 1, width], width, second)?,
            b.zeros("match_head.conv1x1.bias", &[second])?,
        );
        Ok(Self { groups, second: second_ids, channels, features: second })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Width of the pooled feature vector.
    pub fn features(&self) -> usize {
        self.features
    }

    /// `[m, n, channels]` to pooled features `[F2]`.
    pub fn pooled(&self, s: &mut Session, mt: Var) -> Result<Var> {
        let mut maps = Vec::with_capacity(self.groups.len());
        for &(f, b) in &self.groups {
            let (f, b) = (s.param(f)?, s.param(b)?);
            let y = s.tape.conv2d_full_depth(mt, f, b, Padding::Same)?;
            maps.push(s.tape.relu(y)?);
        }
        let stacked = s.tape.concat(&maps, 2)?;
        let (f, b) = (s.param(self.second.0)?, s.param(self.second.1)?);
        let y = s.tape.conv2d_full_depth(stacked, f, b, Padding::Same)?;
        let y = s.tape.relu(y)?;
        s.tape.global_maxpool_2d(y)
    }
}
