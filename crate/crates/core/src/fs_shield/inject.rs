//! `$$name$$` secret substitution for configuration files.
//!
//! `$$$$` renders a literal `$$`. An opening `$$` without a well-formed
//! name and closing delimiter is copied through unchanged.

use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("unresolved secret variables: {}", missing.iter().cloned().collect::<Vec<_>>().join(", "))]
pub struct InjectionError {
    pub missing: BTreeSet<String>,
}

fn is_name_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.')
}

/// A parsed piece of a template.
enum Piece<'a> {
    Literal(&'a [u8]),
    Var(&'a str),
}

fn pieces(template: &[u8]) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut i = 0;
    let mut lit_start = 0;
    while i + 1 < template.len() {
        if &template[i..i + 2] != b"$$" {
            i += 1;
            continue;
        }
        if template[i + 2..].starts_with(b"$$") {
            out.push(Piece::Literal(&template[lit_start..i]));
            out.push(Piece::Literal(b"$$"));
            i += 4;
            lit_start = i;
            continue;
        }
        let name_start = i + 2;
        let name_len = template[name_start..].iter().take_while(|b| is_name_byte(**b)).count();
        let close = name_start + name_len;
        if name_len > 0 && template[close..].starts_with(b"$$") {
            out.push(Piece::Literal(&template[lit_start..i]));
            let name = std::str::from_utf8(&template[name_start..close]).expect("ascii name");
            out.push(Piece::Var(name));
            i = close + 2;
            lit_start = i;
        } else {
            i += 2;
        }
    }
    out.push(Piece::Literal(&template[lit_start..]));
    out
}

/// Names referenced by `template`.
pub fn referenced_variables(template: &[u8]) -> BTreeSet<String> {
    pieces(template)
        .into_iter()
        .filter_map(|p| match p {
            Piece::Var(v) => Some(v.to_string()),
            Piece::Literal(_) => None,
        })
        .collect()
}

pub fn inject_secrets(
    template: &[u8],
    secrets: &BTreeMap<String, String>,
) -> Result<Vec<u8>, InjectionError> {
    let mut out = Vec::with_capacity(template.len());
    let mut missing = BTreeSet::new();
    for piece in pieces(template) {
        match piece {
            Piece::Literal(l) => out.extend_from_slice(l),
            Piece::Var(name) => match secrets.get(name) {
                Some(v) => out.extend_from_slice(v.as_bytes()),
                None => {
                    missing.insert(name.to_string());
                }
            },
        }
    }
    if missing.is_empty() {
        Ok(out)
    } else {
        Err(InjectionError { missing })
    }
}

/// String convenience wrapper used for argv and environment values.
pub fn inject_str(template: &str, secrets: &BTreeMap<String, String>) -> Result<String, InjectionError> {
    inject_secrets(template.as_bytes(), secrets)
        .map(|b| String::from_utf8(b).expect("utf-8 in, utf-8 out"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(kv: &[(&str, &str)]) -> BTreeMap<String, String> {
        kv.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn single_substitution() {
        assert_eq!(
            inject_secrets(b"pwd=$$db_pw$$", &map(&[("db_pw", "s3c")])).unwrap(),
            b"pwd=s3c"
        );
    }

    #[test]
    fn no_variables_is_identity() {
        let t = b"plain $ text with $single dollars\n\x00\xff";
        assert_eq!(inject_secrets(t, &BTreeMap::new()).unwrap(), t);
    }

    #[test]
    fn ten_variables_match_naive_substitution() {
        let secrets: BTreeMap<String, String> =
            (0..10).map(|i| (format!("var_{i}"), format!("value-{i}-{}", i * 31))).collect();
        let mut template = String::from("[section]\n");
        for i in (0..10).rev() {
            template.push_str(&format!("key{i} = $$var_{i}$$ ; again $$var_{}$$\n", (i + 3) % 10));
        }
        let mut oracle = template.clone();
        for (k, v) in &secrets {
            oracle = oracle.replace(&format!("$${k}$$"), v);
        }
        assert_eq!(inject_secrets(template.as_bytes(), &secrets).unwrap(), oracle.as_bytes());
    }

    #[test]
    fn escaped_dollars() {
        assert_eq!(inject_secrets(b"cost: $$$$5", &BTreeMap::new()).unwrap(), b"cost: $$5");
        assert_eq!(
            inject_secrets(b"$$$$$$a$$", &map(&[("a", "A")])).unwrap(),
            b"$$A"
        );
    }

    #[test]
    fn unterminated_reference_is_literal() {
        assert_eq!(inject_secrets(b"x $$abc", &BTreeMap::new()).unwrap(), b"x $$abc");
        assert_eq!(inject_secrets(b"$$ not a var $$", &BTreeMap::new()).unwrap(), b"$$ not a var $$");
    }

    #[test]
    fn missing_variables_are_listed() {
        let err = inject_secrets(b"$$a$$ $$b$$ $$c$$", &map(&[("b", "1")])).unwrap_err();
        assert_eq!(err.missing, ["a", "c"].iter().map(|s| s.to_string()).collect());
        assert!(err.to_string().contains("a, c"));
    }

    #[test]
    fn referenced_names() {
        let names = referenced_variables(b"$$x$$ $$$$ $$y$$ $$x$$");
        assert_eq!(names.into_iter().collect::<Vec<_>>(), vec!["x", "y"]);
    }
}
