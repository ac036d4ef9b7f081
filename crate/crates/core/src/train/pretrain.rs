use std::time::Instant;

use super::{Checkpoint, MetricsRecord, Sgd, TrainConfig};
use crate::data::{PairedBatch, PreparedData};
use crate::error::{Error, Result};
use crate::losses::loss_breakdown;
use crate::model::AvclModel;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    /// Parameters with the lowest validation loss (the last epoch's when
    /// the validation split is too small to score).
    pub best: Checkpoint,
    pub last: AvclModel,
    pub metrics: Vec<MetricsRecord>,
}

pub fn pretrain(cfg: &TrainConfig, data: &PreparedData) -> Result<PretrainOutput> {
    pretrain_with(cfg, data, |_| Ok(()))
}

struct StepStats {
    total: f64,
    cgra: f64,
    selfcl_v: f64,
    selfcl_a: f64,
    grad_norm: f64,
}

/// Like [`pretrain`], calling `on_epoch` after every epoch (e.g. to stream
/// metrics to disk). An error from the callback stops training.
pub fn pretrain_with<F>(cfg: &TrainConfig, data: &PreparedData, mut on_epoch: F) -> Result<PretrainOutput>
where
    F: FnMut(&MetricsRecord) -> Result<()>,
{
    cfg.validate()?;
    let (vd, ad) = (data.visual_dim(), data.audio_dim());
    let mut model = AvclModel::init(&cfg.model, vd, ad, cfg.amfm_enabled, cfg.seed)?;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let val_batch = if data.val.len() >= 2 { Some(data.val.full_batch()?) } else { None };

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, AvclModel)> = None;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let batches = data.train.batches(cfg.batch_size, cfg.seed, epoch as u64)?;
        let mut sums = [0.0; 5];
        for (b, batch) in batches.iter().enumerate() {
            let s = train_step(&mut model, &mut opt, cfg, batch).map_err(|e| match e {
                Error::NumericAbort { .. } => Error::NumericAbort { epoch, batch: b },
                e => e,
            })?;
            for (acc, v) in sums.iter_mut().zip([s.total, s.cgra, s.selfcl_v, s.selfcl_a, s.grad_norm]) {
                *acc += v;
            }
        }
        let n = batches.len() as f64;
        let rec = MetricsRecord {
            epoch,
            total_loss: sums[0] / n,
            cgra_loss: sums[1] / n,
            selfcl_v: sums[2] / n,
            selfcl_a: sums[3] / n,
            grad_norm: sums[4] / n,
            wall_ms: if cfg.record_wall_ms { started.elapsed().as_millis() as u64 } else { 0 },
        };
        log::debug!("epoch {epoch}: total {:.6}", rec.total_loss);
        on_epoch(&rec)?;
        metrics.push(rec);

        let score = match &val_batch {
            Some(vb) => evaluate(&model, cfg, vb)?,
            None => f64::NEG_INFINITY, // no validation: the latest epoch wins
        };
        if best.as_ref().is_none_or(|(_, s, _)| score < *s || score == f64::NEG_INFINITY) {
            best = Some((epoch, score, model.clone()));
        }
    }
    let (epoch, score, best_model) = best.expect("at least one epoch");
    Ok(PretrainOutput {
        best: Checkpoint {
            model: best_model,
            config: cfg.clone(),
            visual_dim: vd,
            audio_dim: ad,
            epoch,
            val_loss: score.is_finite().then_some(score),
        },
        last: model,
        metrics,
    })
}

fn train_step(model: &mut AvclModel, opt: &mut Sgd, cfg: &TrainConfig, batch: &PairedBatch) -> Result<StepStats> {
    let tape = Tape::new();
    let bound = model.bind(&tape, true);
    let (fv, fa) = bound.forward(tape.constant(batch.visual.clone()), tape.constant(batch.audio.clone()))?;
    if !(fv.value().is_finite() && fa.value().is_finite()) {
        return Err(Error::NumericAbort { epoch: 0, batch: 0 });
    }
    let parts = loss_breakdown(fv, fa, &cfg.loss, cfg.terms())?;
    let value = |v: Option<crate::tensor::Var<'_>>| v.map_or(Ok(0.0), |v| v.item());
    let stats_total = parts.total.item()?;
    if !stats_total.is_finite() {
        return Err(Error::NumericAbort { epoch: 0, batch: 0 });
    }
    tape.backward(parts.total)?;

    let active = model.active_param_len();
    let vars = bound.params();
    let mut params: Vec<&mut Tensor> = model.params_mut().into_iter().take(active).collect();
    let grads: Vec<Tensor> = params
        .iter()
        .zip(&vars)
        .map(|(p, v)| tape.grad(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NumericAbort { epoch: 0, batch: 0 });
    }
    let norm = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
    let factor = if cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm { cfg.max_grad_norm / norm } else { 1.0 };
    for (p, g) in params.iter_mut().zip(&grads) {
        p.zero_grad();
        if factor == 1.0 {
            p.accumulate_grad(g.data())?;
        } else {
            p.accumulate_grad(&g.data().iter().map(|x| x * factor).collect::<Vec<_>>())?;
        }
    }
    opt.step(&mut params)?;
    for p in params {
        p.zero_grad();
    }
    Ok(StepStats {
        total: stats_total,
        cgra: value(parts.cgra)?,
        selfcl_v: value(parts.selfcl_v)?,
        selfcl_a: value(parts.selfcl_a)?,
        grad_norm: norm,
    })
}

/// Total loss on one batch without gradient tracking.
fn evaluate(model: &AvclModel, cfg: &TrainConfig, batch: &PairedBatch) -> Result<f64> {
    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    let (fv, fa) = bound.forward(tape.constant(batch.visual.clone()), tape.constant(batch.audio.clone()))?;
    loss_breakdown(fv, fa, &cfg.loss, cfg.terms())?.total.item()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::StftParams;
    use crate::data::{generate, SpectrogramCache, SyntheticSpec};
    use crate::model::ModelConfig;

    fn small_data(seed: u64) -> PreparedData {
        let split = generate(&SyntheticSpec {
            per_class: 20,
            audio_seconds: 0.1,
            seed,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let cache = SpectrogramCache::new(StftParams::default()).unwrap();
        PreparedData::new(&split, &cache, crate::model::AudioInput::BandMeans).unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 8,
            model: ModelConfig {
                hidden_dim: 16,
                embed_dim: 8,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_untouched() {
        let data = small_data(1);
        let cfg = TrainConfig { lr: 0.0, epochs: 1, ..small_cfg() };
        let out = pretrain(&cfg, &data).unwrap();
        let init = AvclModel::init(&cfg.model, data.visual_dim(), data.audio_dim(), true, cfg.seed).unwrap();
        assert_eq!(out.last, init);
        assert_eq!(out.best.model, init);
    }

    #[test]
    fn runs_are_deterministic() {
        let data = small_data(2);
        let a = pretrain(&small_cfg(), &data).unwrap();
        let b = pretrain(&small_cfg(), &data).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.last, b.last);
        assert_eq!(a.metrics.len(), 3);
        assert!(a.metrics.iter().all(|m| m.total_loss.is_finite() && m.wall_ms == 0));
    }

    #[test]
    fn best_checkpoint_has_lowest_val_loss() {
        let data = small_data(3);
        let cfg = small_cfg();
        let out = pretrain(&cfg, &data).unwrap();
        let vb = data.val.full_batch().unwrap();
        let best = out.best.val_loss.unwrap();
        assert_eq!(evaluate(&out.best.model, &cfg, &vb).unwrap(), best);
        assert!(best <= evaluate(&out.last, &cfg, &vb).unwrap());
    }

    #[test]
    fn disabled_terms_report_zero_and_fusion_params_stay_put() {
        let data = small_data(4);
        let cfg = TrainConfig {
            amfm_enabled: false,
            cgra_enabled: false,
            ..small_cfg()
        };
        let out = pretrain(&cfg, &data).unwrap();
        assert!(out.metrics.iter().all(|m| m.cgra_loss == 0.0 && m.selfcl_v > 0.0));
        let init = AvclModel::init(&cfg.model, data.visual_dim(), data.audio_dim(), false, cfg.seed).unwrap();
        assert_eq!(out.last.amfm, init.amfm);
        assert_ne!(out.last.visual, init.visual);
    }

    #[test]
    fn weight_decay_shrinks_parameters() {
        let data = small_data(5);
        let norm = |wd: f64| {
            let cfg = TrainConfig { weight_decay: wd, epochs: 5, ..small_cfg() };
            let m = pretrain(&cfg, &data).unwrap().last;
            m.named_params().iter().map(|(_, t)| t.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>()
        };
        assert!(norm(0.05) < norm(0.0));
    }

    #[test]
    fn numeric_blowup_aborts_with_context() {
        let data = small_data(6);
        let cfg = TrainConfig { lr: 1e200, momentum: 0.0, max_grad_norm: 0.0, ..small_cfg() };
        match pretrain(&cfg, &data) {
            Err(Error::NumericAbort { epoch, .. }) => assert!(epoch >= 1),
            Err(Error::Degenerate { .. }) => {}
            other => panic!("expected abort, got {other:?}"),
        }
    }

    #[test]
    fn oversized_batch_is_config_error() {
        let data = small_data(7);
        let cfg = TrainConfig { batch_size: 10_000, ..small_cfg() };
        assert!(matches!(pretrain(&cfg, &data), Err(Error::Config(_))));
    }
}
