use rand::Rng;

use super::model::{ConditionalModel, TrainConfig, TrainingExample};
use crate::error::{Error, Result};
use crate::nn::{AdamW, Parameterized};

/// Runs `cfg.iterations` AdamW steps on batches drawn uniformly with
/// replacement. `on_step(step, loss)` is called after every step. With a
/// positive `cfg.ema_decay` the model ends up holding the averaged weights.
pub fn train_model<R: Rng + ?Sized>(
    model: &mut ConditionalModel,
    examples: &[TrainingExample],
    cfg: &TrainConfig,
    rng: &mut R,
    mut on_step: impl FnMut(u64, f64),
) -> Result<()> {
    if examples.is_empty() || cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("training needs examples and a positive batch size".into()));
    }
    if !(0.0..1.0).contains(&cfg.ema_decay) {
        return Err(Error::InvalidConfig(format!("ema decay must be in [0, 1), got {}", cfg.ema_decay)));
    }
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut ema = (cfg.ema_decay > 0.0).then(|| flatten(model));
    for step in 0..cfg.iterations {
        let batch: Vec<&TrainingExample> = (0..cfg.batch_size)
            .map(|_| &examples[rng.random_range(0..examples.len())])
            .collect();
        let loss = model.train_step(&batch, rng, &mut opt, cfg)?;
        if let Some(avg) = ema.as_mut() {
            // short warm-up so early weights do not dominate
            let d = cfg.ema_decay.min((1 + step) as f64 / (10 + step) as f64);
            let mut k = 0;
            model.visit(&mut |p| {
                for v in &p.value {
                    avg[k] = d * avg[k] + (1.0 - d) * v;
                    k += 1;
                }
            });
        }
        on_step(step, loss);
    }
    if let Some(avg) = ema {
        let mut k = 0;
        model.visit_mut(&mut |p| {
            let n = p.value.len();
            p.value.copy_from_slice(&avg[k..k + n]);
            k += n;
        });
    }
    Ok(())
}

fn flatten(model: &ConditionalModel) -> Vec<f64> {
    let mut out = Vec::with_capacity(model.num_params());
    model.visit(&mut |p| out.extend_from_slice(&p.value));
    out
}
