//! Box CSV: `image_id,class_id,x_min,y_min,x_max,y_max,score` with a header.

use crate::error::{Error, Result};
use crate::localize::{BBox, Proposal};

pub const HEADER: &str = "image_id,class_id,x_min,y_min,x_max,y_max,score";

#[derive(Debug, Clone, PartialEq)]
pub struct BoxRow {
    pub image_id: usize,
    pub class_id: usize,
    pub bbox: BBox,
    pub score: f32,
}

impl BoxRow {
    pub fn from_proposal(image_id: usize, p: &Proposal) -> Self {
        Self {
            image_id,
            class_id: p.class_id,
            bbox: p.bbox,
            score: p.score,
        }
    }
}

/// Scores are written in shortest round-trip form.
pub fn write_boxes(rows: &[BoxRow]) -> String {
    let mut s = format!("{HEADER}\n");
    for r in rows {
        let b = r.bbox;
        s.push_str(&format!(
            "{},{},{},{},{},{},{:?}\n",
            r.image_id, r.class_id, b.x_min, b.y_min, b.x_max, b.y_max, r.score
        ));
    }
    s
}

pub fn parse_boxes(text: &str) -> Result<Vec<BoxRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(HEADER) {
        return Err(Error::invalid("box CSV must start with the header row"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = || Error::invalid(format!("box CSV line {}: {line:?}", i + 2));
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 7 {
                return Err(bad());
            }
            let n = |j: usize| f[j].parse::<usize>().map_err(|_| bad());
            Ok(BoxRow {
                image_id: n(0)?,
                class_id: n(1)?,
                bbox: BBox::new(n(2)?, n(3)?, n(4)?, n(5)?)?,
                score: f[6].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_and_format() {
        let rows = vec![BoxRow {
            image_id: 3,
            class_id: 1,
            bbox: BBox::new(2, 4, 10, 12).unwrap(),
            score: 0.75,
        }];
        assert_eq!(write_boxes(&rows), format!("{HEADER}\n3,1,2,4,10,12,0.75\n"));
        assert!(parse_boxes("3,1,2,4,10,12,0.75\n").is_err());
        assert!(parse_boxes(&format!("{HEADER}\n3,1,2,4,10\n")).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(rows in prop::collection::vec((0usize..100, 0usize..5, 0usize..30, 0usize..30, 0usize..30, 0usize..30, any::<f32>().prop_filter("finite", |v| v.is_finite())), 0..10)) {
            let rows: Vec<BoxRow> = rows
                .into_iter()
                .map(|(i, c, x, y, w, h, s)| BoxRow { image_id: i, class_id: c, bbox: BBox::new(x, y, x + w, y + h).unwrap(), score: s })
                .collect();
            prop_assert_eq!(parse_boxes(&write_boxes(&rows)).unwrap(), rows);
        }
    }
}
