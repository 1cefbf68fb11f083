use crate::error::{Error, Result};

/// A named, shaped tensor of trainable values with its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f64>) -> Self {
        let len: usize = shape.iter().product();
        assert_eq!(len, value.len(), "param value does not match its shape");
        Param {
            name: name.into(),
            shape,
            grad: vec![0.0; len],
            value,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self::new(name, shape, vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything that owns trainable parameters.
///
/// Visiting order is stable and defines the layout used by the optimizer and
/// the checkpoint format.
pub trait Parameterized {
    fn visit(&self, f: &mut dyn FnMut(&Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.grad.iter_mut().for_each(|g| *g = 0.0));
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.len());
        n
    }

    fn check_finite(&self) -> Result<()> {
        let mut bad = None;
        self.visit(&mut |p| {
            if bad.is_none() {
                if let Some(i) = p.value.iter().position(|v| !v.is_finite()) {
                    bad = Some(format!("{}[{}]", p.name, i));
                }
            }
        });
        match bad {
            Some(path) => Err(Error::NonFiniteParameter { path }),
            None => Ok(()),
        }
    }
}
