//! Query-string parsing with errors that name the offending field.

use std::collections::HashMap;
use std::str::FromStr;

use crate::error::ApiError;

pub struct Query<'a>(pub &'a HashMap<String, String>);

impl Query<'_> {
    pub fn raw(&self, field: &str) -> Option<&str> {
        self.0.get(field).map(String::as_str)
    }

    pub fn parse<T: FromStr>(&self, field: &'static str, default: T) -> Result<T, ApiError> {
        match self.raw(field) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| ApiError::bad_request(field, format!("cannot parse {s:?}"))),
        }
    }

    /// A finite real, optionally constrained to `check`.
    pub fn real(&self, field: &'static str, default: f64, check: impl Fn(f64) -> bool, rule: &str) -> Result<f64, ApiError> {
        let v: f64 = self.parse(field, default)?;
        if v.is_finite() && check(v) {
            Ok(v)
        } else {
            Err(ApiError::bad_request(field, format!("{v} is out of range; {rule}")))
        }
    }

    pub fn choice<T: Copy>(&self, field: &'static str, default: T, options: &[(&str, T)]) -> Result<T, ApiError> {
        match self.raw(field) {
            None => Ok(default),
            Some(s) => options.iter().find(|(name, _)| *name == s).map(|&(_, v)| v).ok_or_else(|| {
                let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
                ApiError::bad_request(field, format!("{s:?} is not one of {}", names.join(", ")))
            }),
        }
    }

    pub fn flag(&self, field: &'static str) -> Result<bool, ApiError> {
        match self.raw(field) {
            None | Some("0") | Some("false") => Ok(false),
            Some("1") | Some("true") | Some("") => Ok(true),
            Some(s) => Err(ApiError::bad_request(field, format!("{s:?} is not a boolean"))),
        }
    }

    /// Comma-separated unsigned integers.
    pub fn id_list(&self, field: &'static str) -> Result<Vec<usize>, ApiError> {
        let s = self
            .raw(field)
            .ok_or_else(|| ApiError::bad_request(field, "required".to_string()))?;
        let ids = s
            .split(',')
            .filter(|p| !p.is_empty())
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| ApiError::bad_request(field, format!("{s:?} is not a comma-separated id list")))?;
        if ids.is_empty() {
            return Err(ApiError::bad_request(field, "must name at least one node".to_string()));
        }
        Ok(ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(pairs: &[(&str, &str)]) -> HashMap<String, String> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn parsing() {
        let m = q(&[("k", "3"), ("t", "1.5"), ("op", "union"), ("nodes", "1,2,,3"), ("bad", "x")]);
        let query = Query(&m);
        assert_eq!(query.parse("k", 2usize).unwrap(), 3);
        assert_eq!(query.parse("s", 1usize).unwrap(), 1);
        assert_eq!(query.parse::<usize>("bad", 1).unwrap_err().field(), Some("bad"));
        assert!(query.real("t", 0.5, |v| v > 0.0 && v <= 1.0, "t in (0, 1]").is_err());
        assert_eq!(query.choice("op", 0, &[("union", 1), ("intersection", 2)]).unwrap(), 1);
        assert!(query.choice("bad", 0, &[("union", 1)]).is_err());
        assert_eq!(query.id_list("nodes").unwrap(), vec![1, 2, 3]);
        assert!(query.id_list("missing").is_err());
        assert!(!query.flag("nocache").unwrap());
    }
}
