//! Named parameter traversal shared by initialization, weight files and
//! parameter counting.

use crate::tensor::{BnParams, ConvParams, LstmGates};

/// What a parameter tensor is, which decides how it is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight {
        fan_in: usize,
    },
    ConvBias {
        fan_in: usize,
    },
    BnGamma,
    BnBeta,
    BnMean,
    BnVar,
    /// Input-side LSTM gate bias; the forget slice starts at one.
    LstmBias {
        hidden: usize,
    },
    /// Hidden-side LSTM gate bias, zero at init.
    ZeroBias,
}

pub struct ParamRef<'a> {
    pub name: &'a str,
    pub kind: ParamKind,
    pub shape: &'a [usize],
    pub data: &'a [f32],
}

pub struct ParamMut<'a> {
    pub name: &'a str,
    pub kind: ParamKind,
    pub shape: &'a [usize],
    pub data: &'a mut [f32],
}

pub type Visit<'v> = dyn FnMut(ParamRef<'_>) + 'v;
pub type VisitMut<'v> = dyn FnMut(ParamMut<'_>) + 'v;

/// Types that own named parameter tensors.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>);
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>);

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |p| n += p.data.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn fan_in(c: &ConvParams) -> usize {
    c.weight.shape()[1..].iter().product()
}

impl Parameters for ConvParams {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        let fi = fan_in(self);
        f(ParamRef {
            name: &join(prefix, "weight"),
            kind: ParamKind::ConvWeight { fan_in: fi },
            shape: self.weight.shape(),
            data: self.weight.data(),
        });
        f(ParamRef {
            name: &join(prefix, "bias"),
            kind: ParamKind::ConvBias { fan_in: fi },
            shape: &[self.bias.len()],
            data: &self.bias,
        });
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        let fi = fan_in(self);
        let shape = self.weight.shape().to_vec();
        f(ParamMut {
            name: &join(prefix, "weight"),
            kind: ParamKind::ConvWeight { fan_in: fi },
            shape: &shape,
            data: self.weight.data_mut(),
        });
        f(ParamMut {
            name: &join(prefix, "bias"),
            kind: ParamKind::ConvBias { fan_in: fi },
            shape: &[self.bias.len()],
            data: &mut self.bias,
        });
    }
}

impl Parameters for BnParams {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        let shape = [self.gamma.len()];
        for (name, kind, data) in [
            ("gamma", ParamKind::BnGamma, &self.gamma),
            ("beta", ParamKind::BnBeta, &self.beta),
            ("mean", ParamKind::BnMean, &self.mean),
            ("var", ParamKind::BnVar, &self.var),
        ] {
            f(ParamRef {
                name: &join(prefix, name),
                kind,
                shape: &shape,
                data,
            });
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        let shape = [self.gamma.len()];
        for (name, kind, data) in [
            ("gamma", ParamKind::BnGamma, &mut self.gamma),
            ("beta", ParamKind::BnBeta, &mut self.beta),
            ("mean", ParamKind::BnMean, &mut self.mean),
            ("var", ParamKind::BnVar, &mut self.var),
        ] {
            f(ParamMut {
                name: &join(prefix, name),
                kind,
                shape: &shape,
                data,
            });
        }
    }
}

impl Parameters for LstmGates {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        let hidden = self.hidden();
        for (name, conv, bias_kind) in [
            ("wx", &self.wx, ParamKind::LstmBias { hidden }),
            ("wh", &self.wh, ParamKind::ZeroBias),
        ] {
            let p = join(prefix, name);
            f(ParamRef {
                name: &join(&p, "weight"),
                kind: ParamKind::ConvWeight {
                    fan_in: fan_in(conv),
                },
                shape: conv.weight.shape(),
                data: conv.weight.data(),
            });
            f(ParamRef {
                name: &join(&p, "bias"),
                kind: bias_kind,
                shape: &[conv.bias.len()],
                data: &conv.bias,
            });
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        let hidden = self.hidden();
        for (name, conv, bias_kind) in [
            ("wx", &mut self.wx, ParamKind::LstmBias { hidden }),
            ("wh", &mut self.wh, ParamKind::ZeroBias),
        ] {
            let p = join(prefix, name);
            let fi = fan_in(conv);
            let shape = conv.weight.shape().to_vec();
            f(ParamMut {
                name: &join(&p, "weight"),
                kind: ParamKind::ConvWeight { fan_in: fi },
                shape: &shape,
                data: conv.weight.data_mut(),
            });
            f(ParamMut {
                name: &join(&p, "bias"),
                kind: bias_kind,
                shape: &[conv.bias.len()],
                data: &mut conv.bias,
            });
        }
    }
}

impl<T: Parameters> Parameters for Option<T> {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        if let Some(t) = self {
            t.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        if let Some(t) = self {
            t.visit_mut(prefix, f);
        }
    }
}
