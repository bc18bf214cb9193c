//! Infix kernel grammar.
//!
//! ```text
//! expr    := term ('+' term)*
//! term    := factor ('*' factor)*
//! factor  := primary ('[' 'cols' '=' int (',' int)* ']')?
//! primary := name ('(' args? ')')? | '(' expr ')'
//! args    := arg (',' arg)*
//! arg     := 'fixed' | key '=' (number | '[' number (',' number)* ']')
//! ```
//!
//! A column restriction on a parenthesized group applies to every leaf in
//! it; nested restrictions compose (inner indices select from the outer
//! list). `Display` emits the same grammar with full-precision values, so a
//! fitted spec survives a round trip through its string form.

use std::fmt;

use super::{BaseKernel, BaseKind, KernelSpec};
use crate::error::{Error, Result};

pub fn parse_kernel(src: &str) -> Result<KernelSpec> {
    let mut p = Parser { src, pos: 0 };
    let spec = p.expr()?;
    p.skip_ws();
    if p.pos != src.len() {
        return Err(p.error("unexpected trailing input"));
    }
    Ok(spec)
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, message: impl Into<String>) -> Error {
        Error::KernelParse {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn rest(&self) -> &str {
        &self.src[self.pos..]
    }

    fn skip_ws(&mut self) {
        let trimmed = self.rest().trim_start();
        self.pos = self.src.len() - trimmed.len();
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.rest().chars().next()
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.error(format!("expected '{c}'")))
        }
    }

    fn ident(&mut self) -> Result<&str> {
        self.skip_ws();
        let len = self
            .rest()
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(self.rest().len());
        if len == 0 {
            return Err(self.error("expected a name"));
        }
        let start = self.pos;
        self.pos += len;
        Ok(&self.src[start..start + len])
    }

    fn number(&mut self) -> Result<f64> {
        self.skip_ws();
        let bytes = self.rest().as_bytes();
        let mut len = 0;
        while len < bytes.len() {
            let b = bytes[len];
            let sign_ok =
                (b == b'-' || b == b'+') && (len == 0 || matches!(bytes[len - 1], b'e' | b'E'));
            if b.is_ascii_digit() || b == b'.' || b == b'e' || b == b'E' || sign_ok {
                len += 1;
            } else {
                break;
            }
        }
        let text = &self.rest()[..len];
        let value = text
            .parse::<f64>()
            .map_err(|_| self.error(format!("bad number '{text}'")))?;
        self.pos += len;
        Ok(value)
    }

    fn index(&mut self) -> Result<usize> {
        self.skip_ws();
        let len = self
            .rest()
            .find(|c: char| !c.is_ascii_digit())
            .unwrap_or(self.rest().len());
        let text = &self.rest()[..len];
        let value = text
            .parse::<usize>()
            .map_err(|_| self.error("expected a column index"))?;
        self.pos += len;
        Ok(value)
    }

    fn expr(&mut self) -> Result<KernelSpec> {
        let mut terms = vec![self.term()?];
        while self.eat('+') {
            terms.push(self.term()?);
        }
        if terms.len() == 1 {
            Ok(terms.pop().unwrap())
        } else {
            KernelSpec::sum(terms)
        }
    }

    fn term(&mut self) -> Result<KernelSpec> {
        let mut factors = vec![self.factor()?];
        while self.eat('*') {
            factors.push(self.factor()?);
        }
        if factors.len() == 1 {
            Ok(factors.pop().unwrap())
        } else {
            KernelSpec::product(factors)
        }
    }

    fn factor(&mut self) -> Result<KernelSpec> {
        let mut spec = self.primary()?;
        if self.eat('[') {
            let start = self.pos;
            let key = self.ident()?;
            if !key.eq_ignore_ascii_case("cols") {
                self.pos = start;
                return Err(self.error("expected 'cols='"));
            }
            self.expect('=')?;
            let mut cols = vec![self.index()?];
            while self.eat(',') {
                cols.push(self.index()?);
            }
            self.expect(']')?;
            restrict(&mut spec, &cols).map_err(|m| self.error(m))?;
        }
        Ok(spec)
    }

    fn primary(&mut self) -> Result<KernelSpec> {
        if self.eat('(') {
            let inner = self.expr()?;
            self.expect(')')?;
            return Ok(inner);
        }
        let start = self.pos;
        let name = self.ident()?;
        let kind = BaseKind::from_name(name).ok_or_else(|| Error::KernelParse {
            offset: start,
            message: format!("unknown kernel '{name}'"),
        })?;
        let mut base = BaseKernel::new(kind);
        if self.eat('(') {
            if !self.eat(')') {
                loop {
                    self.arg(&mut base)?;
                    if self.eat(')') {
                        break;
                    }
                    self.expect(',')?;
                }
            }
        }
        Ok(KernelSpec::Base(base))
    }

    fn arg(&mut self, base: &mut BaseKernel) -> Result<()> {
        let start = self.pos;
        let key = self.ident()?.to_ascii_lowercase();
        if key == "fixed" {
            base.fixed = true;
            return Ok(());
        }
        self.expect('=')?;
        let values = if self.eat('[') {
            let mut v = vec![self.number()?];
            while self.eat(',') {
                v.push(self.number()?);
            }
            self.expect(']')?;
            v
        } else {
            vec![self.number()?]
        };
        let scalar = |p: &Self| -> Result<f64> {
            match values.as_slice() {
                [v] => Ok(*v),
                _ => Err(p.error(format!("'{key}' takes a single value"))),
            }
        };
        match key.as_str() {
            "variance" | "var" => {
                base.variance = scalar(self)?;
                base.explicit.variance = true;
            }
            "lengthscale" | "lengthscales" | "ls" if base.kind.has_lengthscales() => {
                base.lengthscales = values;
                base.explicit.lengthscales = true;
            }
            "period" if base.kind.has_period() => {
                base.period = scalar(self)?;
                base.explicit.period = true;
            }
            "origin" if base.kind == BaseKind::BrownianMotion => {
                base.origin = scalar(self)?;
                base.explicit.origin = true;
            }
            _ => {
                return Err(Error::KernelParse {
                    offset: start,
                    message: format!("'{key}' is not a parameter of {}", base.kind.name()),
                })
            }
        }
        Ok(())
    }
}

fn restrict(spec: &mut KernelSpec, cols: &[usize]) -> std::result::Result<(), String> {
    for leaf in spec.leaves_mut() {
        leaf.active_dims = Some(match leaf.active_dims.take() {
            None => cols.to_vec(),
            Some(inner) => inner
                .iter()
                .map(|&i| {
                    cols.get(i)
                        .copied()
                        .ok_or_else(|| format!("nested column {i} outside restriction {cols:?}"))
                })
                .collect::<std::result::Result<_, _>>()?,
        });
    }
    Ok(())
}

fn list(values: &[f64]) -> String {
    let items: Vec<String> = values.iter().map(|v| format!("{v:?}")).collect();
    format!("[{}]", items.join(","))
}

impl fmt::Display for BaseKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind.name())?;
        let mut args: Vec<String> = Vec::new();
        if self.explicit.variance {
            args.push(format!("variance={:?}", self.variance));
        }
        if self.kind.has_lengthscales()
            && self.explicit.lengthscales
            && !self.lengthscales.is_empty()
        {
            args.push(format!("lengthscales={}", list(&self.lengthscales)));
        }
        if self.kind.has_period() && self.explicit.period {
            args.push(format!("period={:?}", self.period));
        }
        if self.kind == BaseKind::BrownianMotion && self.explicit.origin {
            args.push(format!("origin={:?}", self.origin));
        }
        if self.fixed {
            args.push("fixed".to_owned());
        }
        if !args.is_empty() {
            write!(f, "({})", args.join(", "))?;
        }
        if let Some(dims) = &self.active_dims {
            let cols: Vec<String> = dims.iter().map(usize::to_string).collect();
            write!(f, "[cols={}]", cols.join(","))?;
        }
        Ok(())
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelSpec::Base(b) => b.fmt(f),
            KernelSpec::Sum(c) => {
                for (i, k) in c.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" + ")?;
                    }
                    k.fmt(f)?;
                }
                Ok(())
            }
            KernelSpec::Product(c) => {
                for (i, k) in c.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" * ")?;
                    }
                    if matches!(k, KernelSpec::Sum(_)) {
                        write!(f, "({k})")?;
                    } else {
                        k.fmt(f)?;
                    }
                }
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(spec: &KernelSpec) -> Vec<BaseKind> {
        spec.leaves().iter().map(|l| l.kind).collect()
    }

    #[test]
    fn parses_flat_sum() {
        let k = parse_kernel("rbf + linear + white").unwrap();
        assert!(matches!(k, KernelSpec::Sum(ref c) if c.len() == 3));
        assert_eq!(
            kinds(&k),
            [BaseKind::Rbf, BaseKind::Linear, BaseKind::WhiteNoise]
        );
    }

    #[test]
    fn product_binds_tighter_than_sum() {
        let k = parse_kernel("rbf + linear * bias").unwrap();
        match k {
            KernelSpec::Sum(c) => {
                assert!(matches!(c[0], KernelSpec::Base(_)));
                assert!(matches!(c[1], KernelSpec::Product(ref p) if p.len() == 2));
            }
            other => panic!("expected sum, got {other:?}"),
        }
    }

    #[test]
    fn group_restriction_reaches_every_leaf() {
        let k = parse_kernel("periodicmatern32 + linear + rbf + (linear * rbf)[cols=7]").unwrap();
        let leaves = k.leaves();
        assert_eq!(leaves.len(), 5);
        assert_eq!(leaves[0].active_dims, None);
        assert_eq!(leaves[3].active_dims, Some(vec![7]));
        assert_eq!(leaves[4].active_dims, Some(vec![7]));
    }

    #[test]
    fn nested_restrictions_compose() {
        let k = parse_kernel("(rbf[cols=1] + linear)[cols=4,6]").unwrap();
        let leaves = k.leaves();
        assert_eq!(leaves[0].active_dims, Some(vec![6]));
        assert_eq!(leaves[1].active_dims, Some(vec![4, 6]));
        assert!(parse_kernel("(rbf[cols=2])[cols=0,1]").is_err());
    }

    #[test]
    fn arguments_set_explicit_values() {
        let k = parse_kernel("RBF(variance=2.5, lengthscales=[0.5, 3e-1]) * pm32(period=6, fixed)")
            .unwrap();
        let leaves = k.leaves();
        assert_eq!(leaves[0].variance, 2.5);
        assert_eq!(leaves[0].lengthscales, vec![0.5, 0.3]);
        assert!(leaves[0].explicit.variance && !leaves[0].explicit.period);
        assert_eq!(leaves[1].period, 6.0);
        assert!(leaves[1].fixed);
    }

    #[test]
    fn rejects_malformed_input() {
        for bad in [
            "",
            "rbf +",
            "rbf * (linear",
            "matern52",
            "rbf(period=2)",
            "linear(lengthscale=1)",
            "rbf[rows=1]",
            "rbf(variance=[1,2])",
            "rbf linear",
            "bias(variance=abc)",
        ] {
            assert!(parse_kernel(bad).is_err(), "accepted {bad:?}");
        }
    }

    #[test]
    fn display_round_trips_fitted_values() {
        let src = "(rbf(variance=0.1, lengthscales=[1.2345678901234567,2]) + bias) * \
                   brownian(variance=3, origin=-1.5)[cols=1] + white(variance=1e-7, fixed)";
        let k = parse_kernel(src).unwrap();
        let text = k.to_string();
        let back = parse_kernel(&text).unwrap();
        assert_eq!(back, k, "{text}");
    }
}
