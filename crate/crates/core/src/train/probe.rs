use super::{Checkpoint, ProbeConfig, ProbeMode, Sgd};
use crate::data::{epoch_order, PreparedData, PreparedSplit};
use crate::error::{Error, Result};
use crate::model::{affine, AvclModel};
use crate::tensor::{Tape, Tensor, Var};

/// Keeps the probe's batch order independent of the pretraining order.
const PROBE_STREAM_OFFSET: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub test_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub train_accuracy: f64,
    /// Probe epoch whose classifier was kept.
    pub best_epoch: usize,
}

/// Mean softmax cross-entropy of `logits[B × C]` against integer labels.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let value = logits.value();
    let shape = value.shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
        return Err(Error::dim("cross_entropy", &shape, &[labels.len()]));
    }
    let (b, c) = (shape[0], shape[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Contract(format!("label {bad} out of range for {c} classes")));
    }
    // subtracting the (constant) row max keeps exp() in range
    let mut shift = Vec::with_capacity(b * c);
    let mut onehot = vec![0.0; b * c];
    for (i, &l) in labels.iter().enumerate() {
        let m = value.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        shift.extend(std::iter::repeat_n(m, c));
        onehot[i * c + l] = 1.0;
    }
    let tape = logits.tape();
    let z = logits.sub(&tape.constant(Tensor::new(&shape, shift)?))?;
    let lse = z.exp().sum_axis(1)?.log()?.sum();
    let picked = z.mul(&tape.constant(Tensor::new(&shape, onehot)?))?.sum();
    Ok(lse.sub(&picked)?.scale(1.0 / b as f64))
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let hits = labels.iter().enumerate().filter(|&(i, &l)| argmax(logits.row(i)) == l).count();
    hits as f64 / labels.len() as f64
}

struct Classifier {
    weight: Tensor,
    bias: Tensor,
}

impl Classifier {
    fn zeros(n_classes: usize, in_dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[n_classes, in_dim]),
            bias: Tensor::zeros(&[n_classes]),
        }
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let out = affine(tape.constant(x.clone()), tape.constant(self.weight.clone()), tape.constant(self.bias.clone()))?;
        Ok((*out.value()).clone())
    }
}

/// Concatenated `[f_v, f_a]` embeddings of a whole split.
fn embeddings(model: &AvclModel, split: &PreparedSplit) -> Result<Tensor> {
    let batch = split.full_batch()?;
    let (fv, fa) = model.embed(&batch.visual, &batch.audio)?;
    fv.concat_cols(&fa)
}

fn check_labels(data: &PreparedData) -> Result<()> {
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::Config("probe needs non-empty train and test splits".into()));
    }
    let mut seen = vec![false; data.n_classes];
    for &l in data.train.labels.iter().chain(&data.val.labels).chain(&data.test.labels) {
        if l >= data.n_classes {
            return Err(Error::Config(format!("label {l} exceeds n_classes {}", data.n_classes)));
        }
    }
    for &l in &data.train.labels {
        seen[l] = true;
    }
    if let Some(k) = seen.iter().position(|s| !s) {
        return Err(Error::Config(format!("class {k} is absent from the train split")));
    }
    Ok(())
}

/// Probe evaluation of a checkpoint, seeded by its training seed.
pub fn linear_probe(ckpt: &Checkpoint, data: &PreparedData, cfg: &ProbeConfig) -> Result<ProbeReport> {
    ckpt.check_dims(data.visual_dim(), data.audio_dim())?;
    probe_model(&ckpt.model, data, cfg, ckpt.config.seed)
}

/// Fits a softmax classifier on the embeddings of `model` (frozen in linear
/// mode) using train labels, keeps the epoch with the best validation
/// accuracy, and scores it on the test split.
pub fn probe_model(model: &AvclModel, data: &PreparedData, cfg: &ProbeConfig, seed: u64) -> Result<ProbeReport> {
    cfg.validate()?;
    check_labels(data)?;
    match cfg.mode {
        ProbeMode::Linear => probe_linear(model, data, cfg, seed),
        ProbeMode::Finetune => probe_finetune(model, data, cfg, seed),
    }
}

fn probe_linear(model: &AvclModel, data: &PreparedData, cfg: &ProbeConfig, seed: u64) -> Result<ProbeReport> {
    let x_train = embeddings(model, &data.train)?;
    let x_val = if data.val.is_empty() { None } else { Some(embeddings(model, &data.val)?) };
    let x_test = embeddings(model, &data.test)?;
    let y = &data.train.labels;

    let mut clf = Classifier::zeros(data.n_classes, x_train.cols());
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut best: Option<(usize, f64, Tensor, Tensor)> = None;
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(y.len(), seed, PROBE_STREAM_OFFSET + epoch as u64);
        for idx in order.chunks(cfg.batch_size) {
            let rows: Vec<&[f64]> = idx.iter().map(|&i| x_train.row(i)).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
            let tape = Tape::new();
            let (w, b) = (tape.param(clf.weight.clone()), tape.param(clf.bias.clone()));
            let logits = affine(tape.constant(Tensor::stack_rows(&rows)?), w, b)?;
            let loss = cross_entropy(logits, &labels)?;
            if !loss.item()?.is_finite() {
                return Err(Error::NumericAbort { epoch, batch: 0 });
            }
            tape.backward(loss)?;
            for (p, v) in [(&mut clf.weight, w), (&mut clf.bias, b)] {
                p.zero_grad();
                p.accumulate_grad(tape.grad(v).expect("classifier reached").data())?;
            }
            opt.step(&mut [&mut clf.weight, &mut clf.bias])?;
        }
        let score = match &x_val {
            Some(xv) => accuracy(&clf.logits(xv)?, &data.val.labels),
            None => f64::INFINITY,
        };
        if best.as_ref().is_none_or(|(_, s, _, _)| score > *s || score == f64::INFINITY) {
            best = Some((epoch, score, clf.weight.clone(), clf.bias.clone()));
        }
    }
    let (best_epoch, val, weight, bias) = best.expect("at least one epoch");
    let clf = Classifier { weight, bias };
    Ok(ProbeReport {
        test_accuracy: accuracy(&clf.logits(&x_test)?, &data.test.labels),
        val_accuracy: val.is_finite().then_some(val),
        train_accuracy: accuracy(&clf.logits(&x_train)?, y),
        best_epoch,
    })
}

fn probe_finetune(model: &AvclModel, data: &PreparedData, cfg: &ProbeConfig, seed: u64) -> Result<ProbeReport> {
    let mut model = model.clone();
    let mut clf = Classifier::zeros(data.n_classes, 2 * model.embed_dim());
    let mut head_opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut body_opt = Sgd::new(cfg.lr, cfg.momentum, 0.0);
    let active = model.active_param_len();
    let scores = |model: &AvclModel, clf: &Classifier, split: &PreparedSplit| -> Result<f64> {
        Ok(accuracy(&clf.logits(&embeddings(model, split)?)?, &split.labels))
    };

    let mut best: Option<(usize, f64, AvclModel, Tensor, Tensor)> = None;
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(data.train.len(), seed, PROBE_STREAM_OFFSET + epoch as u64);
        for idx in order.chunks(cfg.batch_size) {
            let batch = data.train.gather(idx)?;
            let tape = Tape::new();
            let bound = model.bind(&tape, true);
            let (fv, fa) = bound.forward(tape.constant(batch.visual.clone()), tape.constant(batch.audio.clone()))?;
            let (w, b) = (tape.param(clf.weight.clone()), tape.param(clf.bias.clone()));
            let loss = cross_entropy(affine(fv.concat_cols(&fa)?, w, b)?, &batch.labels)?;
            if !loss.item()?.is_finite() {
                return Err(Error::NumericAbort { epoch, batch: 0 });
            }
            tape.backward(loss)?;
            for (p, v) in [(&mut clf.weight, w), (&mut clf.bias, b)] {
                p.zero_grad();
                p.accumulate_grad(tape.grad(v).expect("classifier reached").data())?;
            }
            head_opt.step(&mut [&mut clf.weight, &mut clf.bias])?;
            let vars = bound.params();
            let mut params: Vec<&mut Tensor> = model.params_mut().into_iter().take(active).collect();
            for (p, v) in params.iter_mut().zip(&vars) {
                let g = tape.grad(*v).unwrap_or_else(|| Tensor::zeros(p.shape()));
                p.zero_grad();
                p.accumulate_grad(g.data())?;
            }
            body_opt.step(&mut params)?;
        }
        let score = if data.val.is_empty() { f64::INFINITY } else { scores(&model, &clf, &data.val)? };
        if best.as_ref().is_none_or(|(_, s, ..)| score > *s || score == f64::INFINITY) {
            best = Some((epoch, score, model.clone(), clf.weight.clone(), clf.bias.clone()));
        }
    }
    let (best_epoch, val, model, weight, bias) = best.expect("at least one epoch");
    let clf = Classifier { weight, bias };
    Ok(ProbeReport {
        test_accuracy: scores(&model, &clf, &data.test)?,
        val_accuracy: val.is_finite().then_some(val),
        train_accuracy: scores(&model, &clf, &data.train)?,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    #[test]
    fn cross_entropy_matches_closed_form() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::from_rows(&[[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]).unwrap());
        let got = cross_entropy(logits, &[2, 0]).unwrap().item().unwrap();
        let row0 = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 3.0;
        let row1 = 3f64.ln();
        assert!((got - (row0 + row1) / 2.0).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_is_stable_for_large_logits() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::from_rows(&[[1000.0, 0.0]]).unwrap());
        assert!(cross_entropy(logits, &[1]).unwrap().item().unwrap().is_finite());
    }

    #[test]
    fn cross_entropy_gradient() {
        let x = Tensor::from_rows(&[[0.3, -1.2, 0.7], [2.0, 0.1, -0.4]]).unwrap();
        let err = grad_check(|_, v| cross_entropy(v, &[1, 0]), &x, 1e-6).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn bad_labels_rejected() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(cross_entropy(logits, &[2]).is_err());
        assert!(cross_entropy(logits, &[0, 1]).is_err());
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
