use super::TrainError;
use crate::tensor::{kernels, Element, Graph, Tensor};

pub fn softmax<T: Element>(logits: &[T]) -> Vec<T> {
    let mut p = logits.to_vec();
    kernels::softmax_in_place(&mut p);
    p
}

pub fn log_softmax<T: Element>(logits: &[T]) -> Vec<T> {
    let lse = kernels::log_sum_exp(logits);
    logits.iter().map(|&z| z - lse).collect()
}

/// Shannon entropy in nats of a probability vector.
pub fn entropy<T: Element>(p: &[T]) -> T {
    p.iter().filter(|&&x| x > T::zero()).map(|&x| -x * x.ln()).sum()
}

fn check_vocab<T: Element>(teacher: &Tensor<T>, student: &Tensor<T>) -> Result<(), TrainError> {
    if teacher.numel() != student.numel() || teacher.numel() == 0 {
        return Err(TrainError::VocabMismatch { teacher: teacher.numel(), student: student.numel() });
    }
    Ok(())
}

/// `sum_x -softmax(teacher)[x] * log softmax(student)[x]` for one position.
pub fn distill_loss<T: Element>(teacher_logits: &Tensor<T>, student_logits: &Tensor<T>) -> Result<T, TrainError> {
    check_vocab(teacher_logits, student_logits)?;
    let pt = softmax(teacher_logits.data());
    let ls = log_softmax(student_logits.data());
    Ok(pt.iter().zip(&ls).filter(|(&p, _)| p != T::zero()).map(|(&p, &l)| -p * l).sum())
}

/// Loss and its gradient with respect to the student logits, computed
/// through the autodiff graph; the teacher is a constant.
pub fn distill_loss_grad<T: Element>(
    teacher_logits: &Tensor<T>,
    student_logits: &Tensor<T>,
) -> Result<(T, Vec<T>), TrainError> {
    check_vocab(teacher_logits, student_logits)?;
    let v = student_logits.numel();
    let targets = Tensor::new(vec![1, v], softmax(teacher_logits.data()))?;
    let mut g = Graph::new();
    let s = g.input(student_logits.clone().reshape(vec![1, v])?, true);
    let loss = g.soft_target_ce(s, &targets)?;
    g.backward(loss)?;
    let value = g.value(loss).item().expect("scalar loss");
    let grad = g.take_grad(s).expect("student requires grad");
    Ok((value, grad))
}
