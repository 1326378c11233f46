use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Straight line from a baseline to an input, sampled at `l / m`.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpolationPath {
    baseline: Tensor,
    input: Tensor,
    steps: usize,
}

impl InterpolationPath {
    pub fn new(baseline: Tensor, input: Tensor, steps: usize) -> Result<Self> {
        input.expect_shape(baseline.shape())?;
        super::check_steps(steps)?;
        Ok(Self {
            baseline,
            input,
            steps,
        })
    }

    pub fn baseline(&self) -> &Tensor {
        &self.baseline
    }

    pub fn input(&self) -> &Tensor {
        &self.input
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alpha(&self, l: usize) -> f64 {
        l as f64 / self.steps as f64
    }

    /// `b + (l/m)(x - b)`; `l = 0` and `l = m` return the endpoints exactly.
    pub fn point(&self, l: usize) -> Result<Tensor> {
        if l > self.steps {
            return Err(Error::IndexOutOfRange {
                index: l,
                len: self.steps + 1,
            });
        }
        if l == 0 {
            return Ok(self.baseline.clone());
        }
        if l == self.steps {
            return Ok(self.input.clone());
        }
        let a = self.alpha(l);
        self.baseline.zip_map(&self.input, |b, x| b + a * (x - b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quarter_step() {
        let p = InterpolationPath::new(Tensor::scalar(0.0), Tensor::scalar(2.0), 4).unwrap();
        assert_eq!(p.point(1).unwrap().data(), &[0.5]);
        assert!(p.point(5).is_err());
    }

    #[test]
    fn degenerate_path_is_constant() {
        let x = Tensor::from_vec(vec![0.3, -0.7, 1.1]);
        let p = InterpolationPath::new(x.clone(), x.clone(), 7).unwrap();
        for l in 0..=7 {
            assert_eq!(p.point(l).unwrap(), x);
        }
    }

    #[test]
    fn rejects_zero_steps_and_shape_mismatch() {
        assert!(InterpolationPath::new(Tensor::scalar(0.0), Tensor::scalar(1.0), 0).is_err());
        assert!(InterpolationPath::new(Tensor::zeros(&[2]), Tensor::zeros(&[3]), 1).is_err());
    }

    proptest! {
        #[test]
        fn endpoints_are_bit_exact(
            b in prop::collection::vec(-10.0f64..10.0, 4),
            x in prop::collection::vec(-10.0f64..10.0, 4),
            m in 1usize..300,
        ) {
            let p = InterpolationPath::new(Tensor::from_vec(b.clone()), Tensor::from_vec(x.clone()), m).unwrap();
            let (start, end) = (p.point(0).unwrap(), p.point(m).unwrap());
            prop_assert_eq!(start.data(), b.as_slice());
            prop_assert_eq!(end.data(), x.as_slice());
        }
    }
}
