//! 300W-style `.pts` landmark files:
//!
//! ```text
//! version: 1
//! n_points:  68
//! {
//! 446.000 91.000
//! ...
//! }
//! ```
//!
//! AFLW-68 and COFW-68 annotations are read through the same format.

use crate::datasets::format_decimal;
use crate::error::{Error, Result};
use crate::geometry::{LandmarkScheme, LandmarkSet, Point};

pub fn parse_pts(text: &str) -> Result<LandmarkSet> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let mut n_points: Option<usize> = None;
    let mut saw_brace = false;
    let mut last_line = 0;
    for (no, line) in lines.by_ref() {
        last_line = no;
        if line.is_empty() {
            continue;
        }
        if line == "{" {
            saw_brace = true;
            break;
        }
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| Error::parse(no, format!("expected `key: value` header, found {line:?}")))?;
        match key.trim() {
            "version" => {
                value
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| Error::parse(no, format!("bad version {:?}", value.trim())))?;
            }
            "n_points" => {
                n_points = Some(
                    value
                        .trim()
                        .parse()
                        .map_err(|_| Error::parse(no, format!("bad n_points {:?}", value.trim())))?,
                );
            }
            other => return Err(Error::parse(no, format!("unknown header key {other:?}"))),
        }
    }
    if !saw_brace {
        return Err(Error::parse(last_line, "missing `{` before coordinates"));
    }
    let n = n_points.ok_or_else(|| Error::parse(last_line, "missing n_points header"))?;

    let mut points = Vec::with_capacity(n);
    let mut closed = false;
    for (no, line) in lines.by_ref() {
        last_line = no;
        if line.is_empty() {
            continue;
        }
        if line == "}" {
            closed = true;
            break;
        }
        let mut tokens = line.split_whitespace();
        let mut coord = |name: &str| -> Result<f64> {
            let tok = tokens
                .next()
                .ok_or_else(|| Error::parse(no, format!("missing {name} coordinate")))?;
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::parse(no, format!("non-numeric token {tok:?}")))?;
            if !v.is_finite() {
                return Err(Error::parse(no, format!("non-finite coordinate {tok:?}")));
            }
            Ok(v)
        };
        let x = coord("x")?;
        let y = coord("y")?;
        if let Some(extra) = tokens.next() {
            return Err(Error::parse(no, format!("unexpected token {extra:?}")));
        }
        if points.len() == n {
            return Err(Error::parse(no, format!("more than n_points = {n} coordinates")));
        }
        points.push(Point::new(x, y));
    }
    if !closed {
        return Err(Error::parse(last_line, "truncated file: missing closing `}`"));
    }
    if points.len() != n {
        return Err(Error::parse(
            last_line,
            format!("header declares n_points = {n} but file has {} coordinates", points.len()),
        ));
    }
    if let Some((no, _)) = lines.find(|(_, l)| !l.is_empty()) {
        return Err(Error::parse(no, "content after closing `}`"));
    }
    LandmarkSet::new(LandmarkScheme::from_count(n), points)
}

/// Writes the canonical 300W layout. Coordinates use three decimals when that
/// is exact and the shortest round-trip form otherwise, so any file written
/// in this layout reparses and reserializes byte-identically.
pub fn serialize_pts(landmarks: &LandmarkSet) -> String {
    let mut out = format!("version: 1\nn_points:  {}\n{{\n", landmarks.len());
    for p in landmarks.points() {
        out.push_str(&format_decimal(p.x, 3));
        out.push(' ');
        out.push_str(&format_decimal(p.y, 3));
        out.push('\n');
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const THREE: &str = "version: 1\nn_points:  3\n{\n1 2\n3 4\n5 6\n}\n";

    #[test]
    fn three_point_file() {
        let lm = parse_pts(THREE).unwrap();
        let got: Vec<(f64, f64)> = lm.points().iter().map(|p| (p.x, p.y)).collect();
        assert_eq!(got, vec![(1.0, 2.0), (3.0, 4.0), (5.0, 6.0)]);
        assert_eq!(lm.scheme(), LandmarkScheme::Synth(3));
    }

    #[test]
    fn reserialized_file_reparses_identically() {
        let lm = parse_pts(THREE).unwrap();
        assert_eq!(parse_pts(&serialize_pts(&lm)).unwrap(), lm);
    }

    #[test]
    fn sixty_eight_points_select_p68() {
        let mut text = String::from("version: 1\nn_points:  68\n{\n");
        for i in 0..68 {
            text.push_str(&format!("{}.500 {}.250\n", 100 + i, 200 - i));
        }
        text.push_str("}\n");
        let lm = parse_pts(&text).unwrap();
        assert_eq!(lm.scheme(), LandmarkScheme::P68);
        assert_eq!(lm.len(), 68);
        assert_eq!(serialize_pts(&lm), text);
    }

    #[test]
    fn count_mismatch_cites_line() {
        let text = "version: 1\nn_points: 4\n{\n1 2\n3 4\n5 6\n}\n";
        match parse_pts(text) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 7);
                assert!(msg.contains("n_points = 4"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
        let text = "version: 1\nn_points: 1\n{\n1 2\n3 4\n}\n";
        assert!(matches!(parse_pts(text), Err(Error::Parse { line: 5, .. })));
    }

    #[test]
    fn non_numeric_token_is_rejected() {
        let text = "version: 1\nn_points: 2\n{\n1 2\n3 abc\n}\n";
        match parse_pts(text) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 5);
                assert!(msg.contains("abc"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_files_are_rejected() {
        assert!(parse_pts("version: 1\nn_points: 3\n{\n1 2\n3 4\n").is_err());
        assert!(parse_pts("version: 1\nn_points: 3\n").is_err());
        assert!(parse_pts("").is_err());
        assert!(parse_pts("version: 1\n{\n1 2\n}\n").is_err());
        assert!(parse_pts("version: 1\nn_points: 1\n{\n1\n}\n").is_err());
    }
}
