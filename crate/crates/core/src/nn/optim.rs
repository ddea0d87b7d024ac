use super::params::{ParamGrads, ParameterStore, Tag, TagSet};
use super::NnError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RmsProp {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
}

impl RmsProp {
    pub const DEFAULT_DECAY: f64 = 0.9;
    pub const DEFAULT_EPS: f64 = 1e-8;

    pub fn new(lr: f64) -> Self {
        RmsProp {
            lr,
            decay: Self::DEFAULT_DECAY,
            eps: Self::DEFAULT_EPS,
        }
    }

    fn validate(&self) -> Result<(), NnError> {
        // lr = 0 is accepted so a phase can run without moving parameters.
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && self.decay > 0.0
            && self.decay < 1.0
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(NnError::Optimizer(format!(
                "invalid RMSProp settings lr={} decay={} eps={}",
                self.lr, self.decay, self.eps
            )))
        }
    }
}

/// One RMSProp update of every parameter whose tag is in `tags`:
///
/// ```text
/// acc ← decay·acc + (1 − decay)·g²
/// p   ← p − lr·g / √(acc + eps)
/// ```
///
/// Returns the number of tensors updated.
pub fn rmsprop_step(
    store: &mut ParameterStore,
    grads: &ParamGrads,
    opt: &RmsProp,
    tags: TagSet,
) -> Result<usize, NnError> {
    opt.validate()?;
    // Check coverage before touching anything so a failure leaves the store intact.
    for p in store.iter().filter(|p| tags.contains(p.tag)) {
        match grads.get(&p.name) {
            None => return Err(NnError::MissingGradient(p.name.clone())),
            Some(g) if g.shape() != p.value.shape() => {
                return Err(NnError::GradientShape {
                    name: p.name.clone(),
                    expected: p.value.shape().to_vec(),
                    got: g.shape().to_vec(),
                })
            }
            Some(_) => {}
        }
    }
    let mut updated = 0;
    for p in store.iter_mut().filter(|p| tags.contains(p.tag)) {
        let g = grads.get(&p.name).expect("checked above");
        let acc = p.acc.data_mut();
        let val = p.value.data_mut();
        for ((v, a), &gi) in val.iter_mut().zip(acc.iter_mut()).zip(g.data()) {
            *a = opt.decay * *a + (1.0 - opt.decay) * gi * gi;
            *v -= opt.lr * gi / (*a + opt.eps).sqrt();
        }
        updated += 1;
    }
    Ok(updated)
}

/// Projects every entry of the `tag` component into `[−c, c]`.
pub fn clip_params(store: &mut ParameterStore, tag: Tag, c: f64) {
    assert!(c > 0.0, "clip bound must be positive");
    for p in store.iter_mut().filter(|p| p.tag == tag) {
        p.value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = v.clamp(-c, c));
    }
}
