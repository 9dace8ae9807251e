use std::io::Read;
use std::path::Path;

use super::{DataError, Dataset, Labels, SplitTag};

/// Column layout of a tabular file: features first, then `label_columns`
/// trailing label columns. One label column holds a class index; several hold
/// 0/1 membership flags (multi-label).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CsvSchema {
    pub label_columns: usize,
    pub has_header: bool,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self { label_columns: 1, has_header: true }
    }
}

pub fn load_csv(path: &Path, schema: CsvSchema) -> Result<Dataset, DataError> {
    parse_csv(std::fs::File::open(path)?, schema)
}

pub fn parse_csv<R: Read>(reader: R, schema: CsvSchema) -> Result<Dataset, DataError> {
    if schema.label_columns == 0 {
        return Err(DataError::Invalid("at least one label column is required".into()));
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(schema.has_header).trim(csv::Trim::All).from_reader(reader);
    let multi = schema.label_columns > 1;
    let mut features = Vec::new();
    let mut classes = Vec::new();
    let mut hots = Vec::new();
    let mut width = None;
    for (k, rec) in rdr.records().enumerate() {
        // 1-based line number in the file
        let row = k + 1 + usize::from(schema.has_header);
        let rec = rec.map_err(|e| DataError::Csv { row, detail: e.to_string() })?;
        let n = rec.len();
        if n <= schema.label_columns {
            return Err(DataError::Csv { row, detail: format!("{n} columns leave no features") });
        }
        if *width.get_or_insert(n) != n {
            return Err(DataError::Csv { row, detail: format!("expected {} columns, found {n}", width.unwrap()) });
        }
        let split = n - schema.label_columns;
        for (j, field) in rec.iter().take(split).enumerate() {
            let v: f32 = field
                .parse()
                .map_err(|_| DataError::Csv { row, detail: format!("column {}: `{field}` is not a number", j + 1) })?;
            if !v.is_finite() {
                return Err(DataError::Csv { row, detail: format!("column {}: non-finite value", j + 1) });
            }
            features.push(v);
        }
        let label_fields = rec.iter().skip(split);
        if multi {
            let mut flags = Vec::with_capacity(schema.label_columns);
            for (j, field) in label_fields.enumerate() {
                flags.push(match field {
                    "0" => false,
                    "1" => true,
                    _ => {
                        return Err(DataError::Csv {
                            row,
                            detail: format!("label column {}: `{field}` is not 0 or 1", j + 1),
                        })
                    }
                });
            }
            hots.push(flags);
        } else {
            let field = rec.get(split).unwrap_or_default();
            let l: usize = field
                .parse()
                .map_err(|_| DataError::Csv { row, detail: format!("label `{field}` is not a class index") })?;
            classes.push(l);
        }
    }
    let Some(width) = width else { return Err(DataError::NoRows) };
    let labels = if multi {
        Labels::MultiHot { labels: hots, num_classes: schema.label_columns }
    } else {
        let num_classes = classes.iter().max().map_or(0, |m| m + 1);
        Labels::Classes { labels: classes, num_classes }
    };
    Dataset::new(features, vec![width - schema.label_columns], labels, SplitTag::Train)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multiclass_rows() {
        let ds = parse_csv("a,b,y\n0.5,0.25,2\n1,0,0\n".as_bytes(), CsvSchema::default()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.sample_shape, vec![2]);
        assert_eq!(ds.features, vec![0.5, 0.25, 1.0, 0.0]);
        assert_eq!(ds.labels, Labels::Classes { labels: vec![2, 0], num_classes: 3 });
    }

    #[test]
    fn multilabel_rows() {
        let schema = CsvSchema { label_columns: 3, has_header: false };
        let ds = parse_csv("0.1,1,0,1\n0.2,0,0,0\n".as_bytes(), schema).unwrap();
        assert_eq!(
            ds.labels,
            Labels::MultiHot { labels: vec![vec![true, false, true], vec![false, false, false]], num_classes: 3 }
        );
    }

    #[test]
    fn errors_name_the_row() {
        let err = parse_csv("a,y\n0.5,1\nx,0\n".as_bytes(), CsvSchema::default()).unwrap_err();
        assert!(matches!(err, DataError::Csv { row: 3, .. }), "{err}");
        assert!(err.to_string().starts_with("row 3"));
        let schema = CsvSchema { label_columns: 2, has_header: false };
        let err = parse_csv("0.5,1,2\n".as_bytes(), schema).unwrap_err();
        assert!(matches!(err, DataError::Csv { row: 1, .. }));
    }

    #[test]
    fn empty_input() {
        assert!(matches!(parse_csv("a,y\n".as_bytes(), CsvSchema::default()), Err(DataError::NoRows)));
        assert!(matches!(parse_csv("".as_bytes(), CsvSchema::default()), Err(DataError::NoRows)));
    }
}
