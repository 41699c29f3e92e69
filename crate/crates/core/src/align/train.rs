use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;

use super::loss::{DpoObjective, PairObjective};
use super::AlignConfig;
use crate::error::{Error, Result};
use crate::par;
use crate::policy::TabularPolicy;
use crate::prefdata::PreferenceInstance;
use crate::rng::seeded;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: TabularPolicy,
    /// `(step, mean batch loss before the update)`.
    pub trace: Vec<(usize, f64)>,
}

/// Mean loss and dense mean gradient over `batch`. Per-example results are
/// summed in batch order regardless of execution mode.
pub(crate) fn batch_loss_grad(
    objective: &dyn PairObjective,
    theta: &TabularPolicy,
    batch: &[usize],
    exec: par::Exec,
) -> Result<(f64, Vec<f64>)> {
    let results = par::map_slice(exec, batch, |&i| objective.example(theta, i));
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; theta.params().len()];
    for r in results {
        let lg = r?;
        loss += lg.loss;
        lg.grad.add_into(&mut grad, 1.0);
    }
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((loss * scale, grad))
}

/// Run `config.steps` optimizer updates on a private copy of `init`.
pub fn train(init: &TabularPolicy, objective: &dyn PairObjective, config: &AlignConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if objective.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut policy = init.clone();
    let mut trace = Vec::with_capacity(config.steps);
    if config.steps == 0 {
        return Ok(TrainOutcome { policy, trace });
    }
    let n = objective.len();
    let mut optimizer = config.optimizer.build(policy.params().len(), config.learning_rate);
    let mut rng = seeded(config.seed);
    let full: Vec<usize> = (0..n).collect();
    let mut order = full.clone();
    let mut cursor = n;
    for step in 0..config.steps {
        let batch: &[usize] = match config.batch_size {
            None => &full,
            Some(b) if b >= n => &full,
            Some(b) => {
                if cursor + b > n {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                cursor += b;
                &order[cursor - b..cursor]
            }
        };
        let (loss, grad) = batch_loss_grad(objective, &policy, batch, config.exec)?;
        trace.push((step, loss));
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::DivergenceDetected { step, trace });
        }
        optimizer.step(policy.params_mut(), &grad);
    }
    Ok(TrainOutcome { policy, trace })
}

/// One DPO policy per objective, each trained from `reference` on its own
/// dataset (objective `i` uses labels `p_i` of `datasets[i]`).
pub fn soups_align(
    reference: &TabularPolicy,
    datasets: &[&[PreferenceInstance]],
    config: &AlignConfig,
) -> Result<Vec<TabularPolicy>> {
    if datasets.is_empty() {
        return Err(Error::Config("at least one objective is required".into()));
    }
    datasets
        .iter()
        .enumerate()
        .map(|(i, data)| {
            let objective = DpoObjective {
                reference,
                data,
                objective: i,
                beta: config.beta,
            };
            Ok(train(reference, &objective, config)?.policy)
        })
        .collect()
}

pub fn write_trace_csv(path: &Path, trace: &[(usize, f64)]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "step,loss")?;
    for (step, loss) in trace {
        writeln!(w, "{step},{loss}")?;
    }
    w.flush()?;
    Ok(())
}
