//! Built-in planar point sets used as pattern-formation endpoints.

use crate::scenario::Shape;

/// Points per shipped shape.
pub const SHAPE_POINTS: usize = 50;

const STAR: &str = include_str!("../data/star.csv");
const MAPLE: &str = include_str!("../data/maple.csv");

fn parse(text: &str) -> Vec<[f64; 2]> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    rdr.deserialize::<(f64, f64)>()
        .map(|r| {
            let (x, y) = r.expect("shipped shape data is well formed");
            [x, y]
        })
        .collect()
}

pub fn points(shape: Shape) -> Vec<[f64; 2]> {
    parse(match shape {
        Shape::Star => STAR,
        Shape::Maple => MAPLE,
    })
}
