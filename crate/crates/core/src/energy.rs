//! Energy reinterpretation of a classifier.
//!
//! With logits `f(x)`:
//!
//! * joint energy `E(x, y) = -f(x)[y]`
//! * marginal energy `E(x) = -logsumexp_y f(x)[y]`
//! * posterior `p(y | x) = softmax(f(x))[y]`
//! * cross-entropy `CE(x, y) = -log p(y | x) = E(x, y) - E(x)`
//!
//! The normalizer of `exp(-E)` is never computed here.

use crate::autodiff::{logsumexp, Tensor};
use crate::error::{Error, Result};
use crate::model::{Classifier, Params};

/// Scalar energy with an input gradient, as consumed by the samplers.
pub trait Energy {
    fn energy_and_grad(&self, x: &Tensor) -> Result<(f64, Tensor)>;

    fn energy(&self, x: &Tensor) -> Result<f64> {
        Ok(self.energy_and_grad(x)?.0)
    }
}

/// Energy given by a closure returning `(E(x), dE/dx)`.
pub struct FnEnergy<F>(pub F);

impl<F> Energy for FnEnergy<F>
where
    F: Fn(&Tensor) -> (f64, Tensor),
{
    fn energy_and_grad(&self, x: &Tensor) -> Result<(f64, Tensor)> {
        Ok((self.0)(x))
    }
}

/// Scalar function of the logits that can be differentiated in closed form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Joint(usize),
    Marginal,
    CrossEntropy(usize),
}

impl Objective {
    /// Value and gradient with respect to the logits.
    pub fn eval(self, logits: &[f64]) -> (f64, Vec<f64>) {
        match self {
            Objective::Joint(y) => {
                let mut g = vec![0.0; logits.len()];
                g[y] = -1.0;
                (-logits[y], g)
            }
            Objective::Marginal => {
                let lse = logsumexp(logits);
                (-lse, softmax(logits).into_iter().map(|p| -p).collect())
            }
            Objective::CrossEntropy(y) => {
                let lse = logsumexp(logits);
                let mut g = softmax(logits);
                g[y] -= 1.0;
                (lse - logits[y], g)
            }
        }
    }

    fn class(self) -> Option<usize> {
        match self {
            Objective::Joint(y) | Objective::CrossEntropy(y) => Some(y),
            Objective::Marginal => None,
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest logit; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Stateless energy view over a borrowed classifier.
#[derive(Clone, Copy)]
pub struct EnergyView<'a> {
    classifier: &'a Classifier,
}

impl<'a> EnergyView<'a> {
    pub fn new(classifier: &'a Classifier) -> Self {
        Self { classifier }
    }

    pub fn classifier(&self) -> &'a Classifier {
        self.classifier
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.num_classes()
    }

    fn check_class(&self, y: usize) -> Result<()> {
        let k = self.num_classes();
        if y >= k {
            return Err(Error::ClassOutOfRange {
                class: y,
                num_classes: k,
            });
        }
        Ok(())
    }

    fn check(&self, obj: Objective) -> Result<()> {
        match obj.class() {
            Some(y) => self.check_class(y),
            None => Ok(()),
        }
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.classifier.logits(x)
    }

    pub fn value(&self, x: &Tensor, obj: Objective) -> Result<f64> {
        self.check(obj)?;
        let l = self.classifier.logits(x)?;
        Ok(obj.eval(l.data()).0)
    }

    pub fn joint_energy(&self, x: &Tensor, y: usize) -> Result<f64> {
        self.value(x, Objective::Joint(y))
    }

    pub fn marginal_energy(&self, x: &Tensor) -> Result<f64> {
        self.value(x, Objective::Marginal)
    }

    pub fn cross_entropy(&self, x: &Tensor, y: usize) -> Result<f64> {
        self.value(x, Objective::CrossEntropy(y))
    }

    pub fn posterior(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(softmax(self.classifier.logits(x)?.data()))
    }

    /// Value and gradient with respect to the input.
    pub fn input_grad(&self, x: &Tensor, obj: Objective) -> Result<(f64, Tensor)> {
        self.check(obj)?;
        let pass = self.classifier.forward_pass(x)?;
        let (v, g) = obj.eval(pass.logits().data());
        let dl = Tensor::vector(g);
        let gx = self.classifier.input_grad(&pass, &dl)?;
        Ok((v, gx.reshape(x.shape())?))
    }

    /// Value and gradient with respect to every parameter.
    pub fn param_grad(&self, x: &Tensor, obj: Objective) -> Result<(f64, Params)> {
        self.check(obj)?;
        let pass = self.classifier.forward_pass(x)?;
        let (v, g) = obj.eval(pass.logits().data());
        let gp = self.classifier.param_grads(&pass, &Tensor::vector(g))?;
        Ok((v, gp))
    }

    pub fn joint_energy_grad(&self, x: &Tensor, y: usize) -> Result<(f64, Tensor)> {
        self.input_grad(x, Objective::Joint(y))
    }

    pub fn marginal_energy_grad(&self, x: &Tensor) -> Result<(f64, Tensor)> {
        self.input_grad(x, Objective::Marginal)
    }

    pub fn cross_entropy_grad(&self, x: &Tensor, y: usize) -> Result<(f64, Tensor)> {
        self.input_grad(x, Objective::CrossEntropy(y))
    }

    /// Joint energy for `Some(y)`, marginal energy otherwise.
    pub fn as_energy(self, class: Option<usize>) -> ClassEnergy<'a> {
        ClassEnergy { view: self, class }
    }
}

/// The energy driven by the sampler: joint when a class is fixed.
#[derive(Clone, Copy)]
pub struct ClassEnergy<'a> {
    view: EnergyView<'a>,
    class: Option<usize>,
}

impl ClassEnergy<'_> {
    pub fn objective(&self) -> Objective {
        match self.class {
            Some(y) => Objective::Joint(y),
            None => Objective::Marginal,
        }
    }
}

impl Energy for ClassEnergy<'_> {
    fn energy_and_grad(&self, x: &Tensor) -> Result<(f64, Tensor)> {
        self.view.input_grad(x, self.objective())
    }

    fn energy(&self, x: &Tensor) -> Result<f64> {
        self.view.value(x, self.objective())
    }
}
