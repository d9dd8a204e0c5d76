//! WFLW annotation lines.
//!
//! Each line holds 207 whitespace-separated fields:
//!
//! | fields    | content                                              |
//! |-----------|------------------------------------------------------|
//! | 0..196    | x0 y0 x1 y1 ... x97 y97                              |
//! | 196..200  | face box x_min y_min x_max y_max                     |
//! | 200..206  | pose, expression, illumination, make-up, occlusion, blur (0/1) |
//! | 206       | image path relative to the WFLW image root           |

use std::collections::{BTreeSet, HashMap};

use crate::datasets::{format_decimal, Attribute, Dataset, Sample};
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, LandmarkScheme, LandmarkSet};

pub const WFLW_FIELDS: usize = 207;
const COORDS: usize = 196;

/// Parses one annotation line. The sample id is the image path; use
/// [`parse_wflw_annotations`] for files where one image holds several faces.
pub fn parse_wflw_line(line: &str) -> Result<Sample> {
    parse_line_at(line, 1)
}

fn parse_line_at(line: &str, line_no: usize) -> Result<Sample> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != WFLW_FIELDS {
        return Err(Error::parse(
            line_no,
            format!("expected {WFLW_FIELDS} fields, found {}", fields.len()),
        ));
    }
    let num = |i: usize| -> Result<f64> {
        let v: f64 = fields[i]
            .parse()
            .map_err(|_| Error::parse(line_no, format!("field {i}: non-numeric token {:?}", fields[i])))?;
        if !v.is_finite() {
            return Err(Error::parse(line_no, format!("field {i}: non-finite value")));
        }
        Ok(v)
    };
    let coords = (0..COORDS).map(num).collect::<Result<Vec<_>>>()?;
    let landmarks = LandmarkSet::from_flat(LandmarkScheme::P98, &coords)?;
    let bbox = BoundingBox::new(num(196)?, num(197)?, num(198)?, num(199)?)
        .map_err(|e| Error::parse(line_no, e.to_string()))?;
    let mut attributes = BTreeSet::new();
    for (k, attr) in Attribute::ALL.into_iter().enumerate() {
        match fields[200 + k] {
            "0" => {}
            "1" => {
                attributes.insert(attr);
            }
            other => {
                return Err(Error::parse(
                    line_no,
                    format!("field {}: attribute flag must be 0 or 1, found {other:?}", 200 + k),
                ))
            }
        }
    }
    let path = fields[206].to_string();
    let mut sample = Sample::real(path.clone(), path, landmarks, bbox);
    sample.attributes = Some(attributes);
    Ok(sample)
}

/// Parses a whole annotation file. Faces sharing an image get ids
/// `path#1`, `path#2`, ... after the first.
pub fn parse_wflw_annotations(text: &str) -> Result<Dataset> {
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut s = parse_line_at(line, i + 1)?;
        let count = seen.entry(s.image_path.clone()).or_insert(0);
        if *count > 0 {
            s.id = format!("{}#{}", s.image_path, count);
        }
        *count += 1;
        samples.push(s);
    }
    Dataset::new(LandmarkScheme::P98, samples)
}

/// Writes a sample in WFLW layout: six-decimal coordinates, integral boxes
/// as integers, attribute bits, path. Lines in that layout round-trip
/// byte-identically.
pub fn serialize_wflw_line(sample: &Sample) -> Result<String> {
    if sample.landmarks.scheme() != LandmarkScheme::P98 {
        return Err(Error::invalid("WFLW lines carry 98-point landmarks"));
    }
    if sample.image_path.split_whitespace().count() != 1 {
        return Err(Error::invalid("WFLW image paths cannot contain whitespace"));
    }
    let mut fields: Vec<String> = sample
        .landmarks
        .to_flat()
        .into_iter()
        .map(|v| format_decimal(v, 6))
        .collect();
    fields.extend(sample.bbox.to_array().into_iter().map(|v| format_decimal(v, 0)));
    fields.extend(
        Attribute::ALL
            .into_iter()
            .map(|a| if sample.has_attribute(a) { "1" } else { "0" }.to_string()),
    );
    fields.push(sample.image_path.clone());
    Ok(fields.join(" "))
}
