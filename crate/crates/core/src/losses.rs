//! Training objective: per-vote MSE against the rater soft label, auxiliary
//! age/sex losses, the vote-variance regularizer and weight decay.
//!
//! The scalar functions work on a single sample and plain `f64`s; they are
//! the reference the batched, differentiable [`batch_loss`] is tested
//! against.

use crate::error::{Error, Result};
use crate::model::{ModelOutput, VVit, VVitConfig, VoteBundle};
use crate::nn::Module;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The variance regularizer only applies to samples with at least this many
/// raters.
pub const MIN_RATERS_FOR_REG: usize = 3;

/// Mean-over-batch loss components and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_vote: f64,
    pub l_age: f64,
    pub l_sex: f64,
    pub l_reg: f64,
    pub l_wd: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "epoch,l_vote,l_age,l_sex,l_reg,l_wd,total";

    /// Weighted sum with the config's lambdas; metadata terms are dropped
    /// when the metadata heads are off.
    pub fn weighted_total(&self, config: &VVitConfig) -> f64 {
        let (la, ls) = metadata_weights(config);
        self.l_vote + la * self.l_age + ls * self.l_sex + config.lambda_reg * self.l_reg
            + config.lambda_wd * self.l_wd
    }

    pub fn csv_row(&self, epoch: usize) -> String {
        format!(
            "{epoch},{},{},{},{},{},{}",
            self.l_vote, self.l_age, self.l_sex, self.l_reg, self.l_wd, self.total
        )
    }

    /// Running mean used to aggregate per-batch breakdowns over an epoch,
    /// weighting each batch by its size.
    pub fn weighted_mean(parts: &[(LossBreakdown, usize)]) -> LossBreakdown {
        let n: usize = parts.iter().map(|(_, k)| k).sum();
        if n == 0 {
            return LossBreakdown::default();
        }
        let mut out = LossBreakdown::default();
        for (b, k) in parts {
            let w = *k as f64 / n as f64;
            out.l_vote += w * b.l_vote;
            out.l_age += w * b.l_age;
            out.l_sex += w * b.l_sex;
            out.l_reg += w * b.l_reg;
            out.l_wd += w * b.l_wd;
            out.total += w * b.total;
        }
        out
    }
}

fn metadata_weights(config: &VVitConfig) -> (f64, f64) {
    if config.use_metadata {
        (config.lambda_age, config.lambda_sex)
    } else {
        (0.0, 0.0)
    }
}

fn check_soft_label(y: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&y) {
        return Err(Error::Label(format!("soft label {y} outside [0, 1]")));
    }
    Ok(())
}

fn check_sex(y: u8) -> Result<()> {
    if y > 1 {
        return Err(Error::Label(format!("sex class {y} not in {{0, 1}}")));
    }
    Ok(())
}

/// Squared error of each vote against the soft label, averaged over votes.
pub fn loss_vote(y_vote: f64, bundle: &VoteBundle) -> Result<f64> {
    check_soft_label(y_vote)?;
    if bundle.is_empty() {
        return Err(Error::Input("empty vote bundle".into()));
    }
    let n = bundle.len() as f64;
    Ok(bundle.votes.iter().map(|v| (y_vote - v).powi(2)).sum::<f64>() / n)
}

pub fn loss_age(y_age: f64, pred: f64) -> f64 {
    (y_age - pred).powi(2)
}

/// Cross-entropy of two-class logits, via log-sum-exp.
pub fn loss_sex(y_sex: u8, logits: [f64; 2]) -> Result<f64> {
    check_sex(y_sex)?;
    // log-sum-exp minus the true logit, written as margin + ln(1 + e^-|d|)
    // so confident predictions keep full relative precision
    let own = logits[y_sex as usize];
    let other = logits[1 - y_sex as usize];
    let d = other - own;
    Ok(d.max(0.0) + (-d.abs()).exp().ln_1p())
}

/// `(Var(votes) - σ²)²` for samples with enough raters, zero otherwise.
pub fn loss_reg(bundle: &VoteBundle, rater_variance: f64, rater_count: usize) -> f64 {
    if rater_count < MIN_RATERS_FOR_REG {
        return 0.0;
    }
    (bundle.variance - rater_variance).powi(2)
}

/// Sum of squares over every trainable parameter.
pub fn loss_weight_decay<T: Scalar>(params: &[&Tensor<T>]) -> f64 {
    params
        .iter()
        .flat_map(|p| p.data())
        .map(|v| {
            let v = v.to_f64().unwrap();
            v * v
        })
        .sum()
}

/// Batch mean of `(Var(votes) - σ²)²` on votes laid out `[n, B]`, with
/// samples under [`MIN_RATERS_FOR_REG`] raters masked to zero.
pub fn reg_term<T: Scalar>(votes: &Tensor<T>, var_vote: &[f64], rater_count: &[usize]) -> Result<Tensor<T>> {
    let b = votes.shape().get(1).copied().unwrap_or(0);
    if votes.rank() != 2 || var_vote.len() != b || rater_count.len() != b {
        return Err(Error::shape("votes [n, B] against targets", votes.shape(), &[var_vote.len()]));
    }
    let col = |v: Vec<f64>| Tensor::<T>::from_vec(&[b], v.into_iter().map(T::lit).collect());
    let mean = votes.mean_axis(0, false)?;
    let var = votes.sub(&mean)?.square().mean_axis(0, false)?;
    let mask = col(
        rater_count
            .iter()
            .map(|&k| if k >= MIN_RATERS_FOR_REG { 1.0 } else { 0.0 })
            .collect(),
    )?;
    Ok(var.sub(&col(var_vote.to_vec())?)?.square().mul(&mask)?.mean_all())
}

/// Per-sample training targets for one batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTargets {
    pub y_vote: Vec<f64>,
    pub var_vote: Vec<f64>,
    pub rater_count: Vec<usize>,
    /// Standardized age.
    pub age: Vec<f64>,
    pub sex: Vec<u8>,
}

impl LossTargets {
    pub fn len(&self) -> usize {
        self.y_vote.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_vote.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let n = self.len();
        if [self.var_vote.len(), self.rater_count.len(), self.age.len(), self.sex.len()]
            .iter()
            .any(|&k| k != n)
        {
            return Err(Error::Input("loss targets have mismatched lengths".into()));
        }
        self.y_vote.iter().try_for_each(|&y| check_soft_label(y))?;
        self.sex.iter().try_for_each(|&s| check_sex(s))?;
        Ok(())
    }
}

/// Batch objective as a differentiable scalar plus its breakdown.
///
/// Each component is averaged over the batch (weight decay is a single
/// batch-independent term), then combined with the config's lambdas, which
/// equals the batch mean of per-sample totals. The variance regularizer is
/// only active when the model votes, since a single vote has no spread.
pub fn batch_loss<T: Scalar>(
    model: &VVit<T>,
    output: &ModelOutput<T>,
    targets: &LossTargets,
) -> Result<(Tensor<T>, LossBreakdown)> {
    targets.validate()?;
    let config = &model.config;
    let b = output.batch_size();
    if targets.len() != b {
        return Err(Error::shape("loss targets", &[targets.len()], &[b]));
    }
    let col = |v: Vec<f64>| Tensor::<T>::from_vec(&[b], v.into_iter().map(T::lit).collect());

    // votes as [n, B] so per-sample targets broadcast along the vote axis
    let votes = output.votes.transpose(0, 1)?;
    let y = col(targets.y_vote.clone())?;
    let l_vote = votes.sub(&y)?.square().mean_axis(0, false)?.mean_all();

    let zero = || Tensor::<T>::scalar(T::zero());
    let l_reg = if config.use_voting {
        reg_term(&votes, &targets.var_vote, &targets.rater_count)?
    } else {
        zero()
    };

    let (l_age, l_sex) = match (&output.age, &output.sex_logits) {
        (Some(age), Some(logits)) if config.use_metadata => {
            let l_age = age.sub(&col(targets.age.clone())?)?.square().mean_all();
            let onehot: Vec<T> = targets
                .sex
                .iter()
                .flat_map(|&s| if s == 0 { [T::one(), T::zero()] } else { [T::zero(), T::one()] })
                .collect();
            let onehot = Tensor::from_vec(&[b, 2], onehot)?;
            let l_sex = logits
                .log_softmax(1)?
                .mul(&onehot)?
                .sum_axis(1, false)?
                .mean_all()
                .neg();
            (l_age, l_sex)
        }
        _ => (zero(), zero()),
    };

    let l_wd = model.weight_norm_sq();

    let (la, ls) = metadata_weights(config);
    let total = l_vote
        .add(&l_age.mul_scalar(T::lit(la)))?
        .add(&l_sex.mul_scalar(T::lit(ls)))?
        .add(&l_reg.mul_scalar(T::lit(config.lambda_reg)))?
        .add(&l_wd.mul_scalar(T::lit(config.lambda_wd)))?;

    let f = |t: &Tensor<T>| t.item().to_f64().unwrap();
    let breakdown = LossBreakdown {
        l_vote: f(&l_vote),
        l_age: f(&l_age),
        l_sex: f(&l_sex).max(0.0),
        l_reg: f(&l_reg),
        l_wd: f(&l_wd),
        total: f(&total),
    };
    Ok((total, breakdown))
}

/// Scalar-reference evaluation of the same objective from an already
/// computed output, sample by sample.
pub fn loss_total<T: Scalar>(
    model: &VVit<T>,
    output: &ModelOutput<T>,
    targets: &LossTargets,
) -> Result<LossBreakdown> {
    targets.validate()?;
    let config = &model.config;
    let b = output.batch_size();
    let mut acc = LossBreakdown::default();
    for i in 0..b {
        let bundle = output.bundle(i);
        acc.l_vote += loss_vote(targets.y_vote[i], &bundle)?;
        if config.use_voting {
            acc.l_reg += loss_reg(&bundle, targets.var_vote[i], targets.rater_count[i]);
        }
        if let (Some(age), Some(logits), true) = (&output.age, &output.sex_logits, config.use_metadata) {
            acc.l_age += loss_age(targets.age[i], age.data()[i].to_f64().unwrap());
            let l = [logits.data()[2 * i].to_f64().unwrap(), logits.data()[2 * i + 1].to_f64().unwrap()];
            acc.l_sex += loss_sex(targets.sex[i], l)?;
        }
    }
    let n = b as f64;
    acc.l_vote /= n;
    acc.l_age /= n;
    acc.l_sex /= n;
    acc.l_reg /= n;
    let params: Vec<&Tensor<T>> = model.params().into_iter().map(|(_, p)| p).collect();
    acc.l_wd = loss_weight_decay(&params);
    acc.total = acc.weighted_total(config);
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients_sampled;
    use crate::rng::Rng;

    fn bundle(v: &[f64]) -> VoteBundle {
        VoteBundle::from_votes(v.to_vec()).unwrap()
    }

    #[test]
    fn vote_loss_examples() {
        assert_eq!(loss_vote(0.3, &bundle(&[0.3, 0.3])).unwrap(), 0.0);
        assert_eq!(loss_vote(1.0, &bundle(&[0.0, 0.0])).unwrap(), 1.0);
        let l = loss_vote(0.5, &bundle(&[0.4, 0.6, 0.5])).unwrap();
        assert!((l - 0.02 / 3.0).abs() < 1e-15);
        assert!(matches!(loss_vote(1.2, &bundle(&[0.5])), Err(Error::Label(_))));
    }

    #[test]
    fn age_and_sex_examples() {
        assert_eq!(loss_age(0.7, 0.7), 0.0);
        assert_eq!(loss_age(1.0, -1.0), 4.0);
        assert!((loss_sex(1, [0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        // ln(1 + e^-20) evaluated independently
        let want = (-20f64).exp().ln_1p();
        assert!((loss_sex(0, [10.0, -10.0]).unwrap() - want).abs() < 1e-20);
        assert!((want - 2.06e-9).abs() < 1e-11);
        assert!(loss_sex(1, [1e3, -1e3]).unwrap().is_finite());
        assert!(matches!(loss_sex(2, [0.0, 0.0]), Err(Error::Label(_))));
    }

    #[test]
    fn reg_and_weight_decay_examples() {
        let b = bundle(&[0.1, 0.5]);
        assert!((b.variance - 0.04).abs() < 1e-15);
        assert_eq!(loss_reg(&b, 0.01, 2), 0.0);
        assert!((loss_reg(&b, 0.01, 3) - 0.0009).abs() < 1e-15);
        assert_eq!(loss_reg(&b, b.variance, 5), 0.0);

        let z = Tensor::<f64>::zeros(&[3]);
        assert_eq!(loss_weight_decay(&[&z]), 0.0);
        let p = Tensor::<f64>::param(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(loss_weight_decay(&[&p]), 25.0);
    }

    fn tiny() -> VVitConfig {
        VVitConfig {
            num_cross_blocks: 1,
            num_votes: 4,
            model_dim: 4,
            num_heads: 2,
            ffn_dim: 8,
            head_hidden: 4,
            encoder_blocks: 1,
            image_height: 8,
            image_width: 8,
            patch_size: 4,
            ..VVitConfig::default()
        }
    }

    fn batch(b: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>, LossTargets) {
        let mut rng = Rng::new(seed);
        let t = Tensor::randn(&[b, 1, 8, 8], 0.5, &mut rng);
        let f = Tensor::randn(&[b, 1, 8, 8], 0.5, &mut rng);
        let raters = [2usize, 3, 4, 1, 5];
        let mut tg = LossTargets::default();
        for i in 0..b {
            let k = raters[i % raters.len()];
            let pos = rng.below(k + 1);
            let y = pos as f64 / k as f64;
            tg.y_vote.push(y);
            tg.var_vote.push(y * (1.0 - y));
            tg.rater_count.push(k);
            tg.age.push(rng.normal());
            tg.sex.push((i % 2) as u8);
        }
        (t, f, tg)
    }

    #[test]
    fn batch_loss_matches_scalar_reference() {
        for cfg in [tiny(), tiny().with_ablation(false, true, false), tiny().with_ablation(true, false, true)] {
            let m = VVit::<f64>::new(&cfg, &mut Rng::new(1)).unwrap();
            let (t, f, tg) = batch(5, 2);
            let out = m.forward(&t, Some(&f), &mut Rng::new(3), true).unwrap();
            let (total, got) = batch_loss(&m, &out, &tg).unwrap();
            let want = loss_total(&m, &out, &tg).unwrap();
            for (a, b) in [
                (got.l_vote, want.l_vote),
                (got.l_age, want.l_age),
                (got.l_sex, want.l_sex),
                (got.l_reg, want.l_reg),
                (got.l_wd, want.l_wd),
                (got.total, want.total),
            ] {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
            }
            assert!((got.weighted_total(&cfg) - got.total).abs() < 1e-12);
            assert_eq!(total.item(), got.total);
        }
    }

    #[test]
    fn ablation_flags_zero_their_terms() {
        let cfg = tiny().with_ablation(false, false, false);
        let m = VVit::<f64>::new(&cfg, &mut Rng::new(1)).unwrap();
        let (t, _, tg) = batch(4, 5);
        let out = m.forward(&t, None, &mut Rng::new(3), true).unwrap();
        let (_, l) = batch_loss(&m, &out, &tg).unwrap();
        assert_eq!((l.l_age, l.l_sex, l.l_reg), (0.0, 0.0, 0.0));
        assert_eq!(l.total, l.l_vote + cfg.lambda_wd * l.l_wd);

        let cfg = VVitConfig { lambda_age: 0.0, lambda_sex: 0.0, lambda_reg: 0.0, lambda_wd: 0.0, ..tiny() };
        let m = VVit::<f64>::new(&cfg, &mut Rng::new(1)).unwrap();
        let (t, f, tg) = batch(4, 5);
        let out = m.forward(&t, Some(&f), &mut Rng::new(3), true).unwrap();
        let (_, l) = batch_loss(&m, &out, &tg).unwrap();
        assert_eq!(l.total, l.l_vote);
    }

    #[test]
    fn few_rater_samples_get_no_reg_gradient() {
        let votes = Tensor::<f64>::param(&[2, 4], vec![0.1, 0.5, 0.9, 0.3, 0.2, 0.8, 0.4, 0.6]).unwrap();
        let cfg = VVitConfig { lambda_wd: 0.0, ..tiny().with_ablation(false, true, false) };
        let m = VVit::<f64>::new(&cfg, &mut Rng::new(0)).unwrap();
        // votes injected directly as a leaf so their gradient is observable
        let out = ModelOutput {
            votes: votes.clone(),
            age: None,
            sex_logits: None,
            representation: crate::model::FusedRepresentation { z: Tensor::zeros(&[2, 4]), attention: vec![] },
            grid: (2, 2),
        };
        let tg = LossTargets {
            y_vote: vec![0.5, 0.5],
            var_vote: vec![0.0, 0.25],
            rater_count: vec![2, 4],
            age: vec![0.0; 2],
            sex: vec![0; 2],
        };
        let (_, l_full) = batch_loss(&m, &out, &tg).unwrap();
        // isolate the regularizer by differencing against lambda_reg = 0
        let mut m0 = m.clone();
        m0.config.lambda_reg = 0.0;
        let (t1, _) = batch_loss(&m, &out, &tg).unwrap();
        t1.backward().unwrap();
        let g1 = votes.grad().unwrap();
        votes.zero_grad();
        let (t0, _) = batch_loss(&m0, &out, &tg).unwrap();
        t0.backward().unwrap();
        let g0 = votes.grad().unwrap();
        assert!(l_full.l_reg > 0.0);
        assert_eq!(&g1[..4], &g0[..4], "2-rater sample must get zero reg gradient");
        assert_ne!(&g1[4..], &g0[4..]);
    }

    #[test]
    fn reg_gradient_shrinks_excess_variance() {
        // Var(votes) > target: a gradient step must reduce the spread
        let votes = Tensor::<f64>::param(&[4, 1], vec![0.1, 0.9, 0.2, 0.8]).unwrap();
        let m = votes.mean_axis(0, false).unwrap();
        let var = votes.sub(&m).unwrap().square().mean_all();
        let loss = var.add_scalar(-0.01).square();
        loss.backward().unwrap();
        let g = votes.grad().unwrap();
        let mu = 0.5;
        for (x, gx) in votes.data().iter().zip(&g) {
            // moving against the gradient pulls each vote toward the mean
            assert!(gx * (x - mu) > 0.0);
        }
        let step: Vec<f64> = votes.data().iter().zip(&g).map(|(x, gx)| x - 0.1 * gx).collect();
        let b0 = VoteBundle::from_votes(votes.to_vec()).unwrap();
        let b1 = VoteBundle::from_votes(step).unwrap();
        assert!(loss_reg(&b1, 0.01, 3) < loss_reg(&b0, 0.01, 3));
    }

    #[test]
    fn full_objective_gradcheck() {
        let m = VVit::<f64>::new(&tiny(), &mut Rng::new(4)).unwrap();
        let (t, f, tg) = batch(2, 6);
        let report = check_gradients_sampled(
            &m.param_tensors(),
            |ps| {
                let mut mm = m.clone();
                mm.replace_params(ps)?;
                let out = mm.forward(&t, Some(&f), &mut Rng::new(9), true)?;
                Ok(batch_loss(&mm, &out, &tg)?.0)
            },
            Some(3),
            &mut Rng::new(10),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn rejects_bad_labels() {
        let m = VVit::<f64>::new(&tiny(), &mut Rng::new(1)).unwrap();
        let (t, f, mut tg) = batch(2, 2);
        let out = m.forward(&t, Some(&f), &mut Rng::new(3), true).unwrap();
        tg.y_vote[0] = -0.1;
        assert!(matches!(batch_loss(&m, &out, &tg), Err(Error::Label(_))));
        let (_, _, mut tg) = batch(2, 2);
        tg.sex[1] = 3;
        assert!(matches!(batch_loss(&m, &out, &tg), Err(Error::Label(_))));
    }
}
