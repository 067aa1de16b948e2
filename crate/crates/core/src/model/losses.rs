use super::HeadBank;
use crate::error::{contract, Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Mean over rows of `‖a_i − b_i‖²`.
pub fn feature_distance(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Dimension {
            op: "feature_distance",
            lhs: g.shape(a).to_vec(),
            rhs: g.shape(b).to_vec(),
        });
    }
    let rows = g.shape(a)[0];
    let diff = g.sub(a, b)?;
    let sq = g.sum_squares(diff);
    Ok(g.scale(sq, 1.0 / rows as f32))
}

/// Distillation loss between frozen old-model features and current features.
pub fn loss_kd(g: &mut Graph, old_features: Var, new_features: Var) -> Result<Var> {
    feature_distance(g, old_features, new_features)
}

/// Drift-compensation loss `mean ‖W f_old − f_new‖²` with `W` the
/// compensator's `D×D` weight.
pub fn loss_dc(g: &mut Graph, dcn_weight: Var, old_features: Var, new_features: Var) -> Result<Var> {
    let wt = g.transpose(dcn_weight)?;
    let projected = g.matmul(old_features, wt)?;
    feature_distance(g, projected, new_features)
}

fn margin_logits(
    g: &mut Graph,
    features: Var,
    weights: Var,
    targets: &[usize],
    scale: f32,
    margin: f32,
) -> Result<Var> {
    let f = g.row_normalize(features)?;
    let w = g.row_normalize(weights)?;
    let wt = g.transpose(w)?;
    let cos = g.matmul(f, wt)?;
    let logits = g.scale(cos, scale);
    if margin == 0.0 {
        return Ok(logits);
    }
    let k = g.shape(cos)[1];
    let mut shift = Tensor::zeros(&[targets.len(), k]);
    for (i, &t) in targets.iter().enumerate() {
        shift.data_mut()[i * k + t] = -scale * margin;
    }
    let shift = g.constant(&shift);
    g.add(logits, shift)
}

/// Local cosine-margin loss for `task`: softmax over that task's classes only,
/// so earlier heads never enter the graph and receive zero gradient.
pub fn loss_cos(
    g: &mut Graph,
    features: Var,
    head_vars: &[Var],
    bank: &HeadBank,
    labels: &[usize],
    task: usize,
) -> Result<Var> {
    let Some(idx) = bank.head_index(task) else {
        return contract(format!("no head for task {task}"));
    };
    let head = &bank.heads[idx];
    let targets = labels
        .iter()
        .map(|&l| {
            head.local_index(l).ok_or_else(|| {
                Error::Contract(format!(
                    "label {l} is not a class of task {task} {:?}",
                    head.classes
                ))
            })
        })
        .collect::<Result<Vec<usize>>>()?;
    let logits = margin_logits(
        g,
        features,
        head_vars[idx],
        &targets,
        bank.logit_scale,
        bank.margin,
    )?;
    g.cross_entropy(logits, &targets)
}

/// Cosine-margin loss over every seen class with no gradient blocking.
pub fn loss_cos_global(
    g: &mut Graph,
    features: Var,
    head_vars: &[Var],
    bank: &HeadBank,
    labels: &[usize],
) -> Result<Var> {
    let targets = row_targets(bank, labels)?;
    let weights = g.concat_rows(head_vars)?;
    let logits = margin_logits(g, features, weights, &targets, bank.logit_scale, bank.margin)?;
    g.cross_entropy(logits, &targets)
}

/// Cross-entropy over linear logits `v · w_c` for every seen class.
pub fn loss_ce_unified(
    g: &mut Graph,
    features: Var,
    head_vars: &[Var],
    bank: &HeadBank,
    labels: &[usize],
) -> Result<Var> {
    let targets = row_targets(bank, labels)?;
    let weights = g.concat_rows(head_vars)?;
    let wt = g.transpose(weights)?;
    let logits = g.matmul(features, wt)?;
    g.cross_entropy(logits, &targets)
}

fn row_targets(bank: &HeadBank, labels: &[usize]) -> Result<Vec<usize>> {
    let rows = bank.row_classes();
    labels
        .iter()
        .map(|&l| {
            rows.iter()
                .position(|&c| c == l)
                .ok_or_else(|| Error::Contract(format!("label {l} is not a seen class")))
        })
        .collect()
}
