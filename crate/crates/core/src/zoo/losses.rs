//! Logit distillation loss.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};

/// Distillation objective
/// `α·τ²·KL(softmax(teacher/τ) ‖ softmax(student/τ)) + (1−α)·CE(student, labels)`,
/// averaged over the batch. The teacher logits are plain values, so the
/// gradient flows into the student logits only.
pub fn kd_loss<'t>(
    student_logits: Var<'t>,
    teacher_logits: &Tensor,
    labels: &[usize],
    temperature: Real,
    alpha: Real,
) -> Result<Var<'t>> {
    if temperature <= 0.0 {
        return Err(Error::contract(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let shape = student_logits.shape();
    if shape != teacher_logits.shape() {
        return Err(Error::Shape {
            op: "kd_loss",
            lhs: shape,
            rhs: teacher_logits.shape().to_vec(),
        });
    }
    let [b, k] = shape[..] else {
        return Err(Error::Shape {
            op: "kd_loss",
            lhs: shape,
            rhs: teacher_logits.shape().to_vec(),
        });
    };

    // Teacher distribution at temperature τ, computed stably as constants.
    let mut p_t = vec![0.0; b * k];
    let mut log_p_t = vec![0.0; b * k];
    for i in 0..b {
        let row: Vec<Real> = teacher_logits.data()[i * k..(i + 1) * k]
            .iter()
            .map(|&x| x / temperature)
            .collect();
        let m = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        let z: Real = row.iter().map(|&x| (x - m).exp()).sum();
        let lz = z.ln() + m;
        for j in 0..k {
            log_p_t[i * k + j] = row[j] - lz;
            p_t[i * k + j] = (row[j] - lz).exp();
        }
    }
    let tape = student_logits.tape();
    let p_t = tape.leaf(&Tensor::new(vec![b, k], p_t)?, false);
    let log_p_t = tape.leaf(&Tensor::new(vec![b, k], log_p_t)?, false);

    // mean_i Σ_j pT·(ln pT − log softmax(student/τ))
    let log_p_s = student_logits.scale(1.0 / temperature).log_softmax_rows()?;
    let kl = p_t
        .mul(log_p_t.sub(log_p_s)?)?
        .sum()
        .scale(1.0 / b as Real);

    let ce = student_logits.cross_entropy_mean(labels)?;
    kl.scale(alpha * temperature * temperature)
        .add(ce.scale(1.0 - alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::tensor::Tape;

    #[test]
    fn identical_logits_give_zero_kl_term() {
        let mut rng = SplitMix64::new(1);
        let logits = Tensor::normal(&[3, 5], 2.0, &mut rng);
        let tape = Tape::new();
        let s = tape.leaf(&logits, false);
        let loss = kd_loss(s, &logits, &[0, 1, 2], 2.0, 1.0).unwrap();
        assert!(loss.item().unwrap().abs() < 1e-12);
    }

    #[test]
    fn kd_loss_is_nonnegative() {
        let mut rng = SplitMix64::new(2);
        for _ in 0..20 {
            let s = Tensor::normal(&[2, 4], 3.0, &mut rng);
            let t = Tensor::normal(&[2, 4], 3.0, &mut rng);
            let tape = Tape::new();
            let sv = tape.leaf(&s, false);
            let loss = kd_loss(sv, &t, &[0, 1], 4.0, 1.0).unwrap();
            assert!(loss.item().unwrap() >= -1e-12);
        }
    }

    #[test]
    fn extreme_teacher_approaches_cross_entropy_to_its_argmax() {
        // τ=1, α=1: a near-one-hot teacher makes the KL term approach the
        // cross-entropy of the student against the teacher argmax.
        let teacher = Tensor::from_rows(&[vec![40.0, 0.0, 0.0]]).unwrap();
        let student = Tensor::from_rows(&[vec![0.3, -0.2, 0.9]]).unwrap();
        let tape = Tape::new();
        let sv = tape.leaf(&student, false);
        let kd = kd_loss(sv, &teacher, &[0], 1.0, 1.0).unwrap().item().unwrap();
        let ce = sv.cross_entropy_mean(&[0]).unwrap().item().unwrap();
        assert!((kd - ce).abs() < 1e-6, "kd {kd} vs ce {ce}");
    }

    #[test]
    fn temperature_must_be_positive() {
        let tape = Tape::new();
        let s = tape.leaf(&Tensor::zeros(&[1, 2]), false);
        assert!(kd_loss(s, &Tensor::zeros(&[1, 2]), &[0], 0.0, 0.5).is_err());
        assert!(kd_loss(s, &Tensor::zeros(&[1, 2]), &[0], -1.0, 0.5).is_err());
    }

    #[test]
    fn gradient_flows_into_student_only() {
        let mut rng = SplitMix64::new(3);
        let s = Tensor::normal(&[2, 3], 1.0, &mut rng);
        let t = Tensor::normal(&[2, 3], 1.0, &mut rng);
        let tape = Tape::new();
        let sv = tape.leaf(&s, true);
        let loss = kd_loss(sv, &t, &[0, 2], 3.0, 0.7).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(sv).is_some());
    }
}
