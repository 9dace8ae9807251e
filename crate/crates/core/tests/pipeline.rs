use ikd::calibration::{fit_temperature, probabilities};
use ikd::data::{load_csv, load_idx, synth_digits, synth_multilabel, write_idx, CsvSchema, Labels, PrevalenceProfile};
use ikd::ikd::{dataset_logits, evaluate, prepare_data, train_teacher, LadderConfig};
use ikd::model::{checkpoint_load, checkpoint_save, Head, Structure};

#[test]
fn idx_files_feed_training_and_checkpoints_reload() {
    let dir = tempfile::tempdir().unwrap();
    let (ti, tl) = (dir.path().join("ti"), dir.path().join("tl"));
    write_idx(&synth_digits(400, 8), &ti, &tl).unwrap();
    let train = load_idx(&ti, &tl).unwrap();
    assert_eq!(train, synth_digits(400, 8), "byte-quantized digits survive the file round trip");

    let cfg = LadderConfig { teacher_epochs: 2, learning_rate: 1e-3, ..LadderConfig::default() };
    let data = prepare_data(&train, synth_digits(100, 9), &cfg).unwrap();
    assert!((76..=84).contains(&data.val.len()), "about a fifth held out for validation: {}", data.val.len());
    let (m0, log) = train_teacher(&Structure::dense(784, &[32], 10, Head::Softmax), &data, &cfg).unwrap();
    assert_eq!(log.epochs.len(), 2);

    let path = dir.path().join("m0.ikdp");
    checkpoint_save(&m0, &path).unwrap();
    let back = checkpoint_load(&path).unwrap();
    assert_eq!(back, m0);
    assert_eq!(dataset_logits(&back, &data.test).unwrap(), dataset_logits(&m0, &data.test).unwrap());

    // post-hoc temperature leaves accuracy alone
    let logits = dataset_logits(&m0, &data.val).unwrap();
    let fit = fit_temperature(&logits, &data.val.labels).unwrap();
    let raw = evaluate(&m0, &data.test, None, 10).unwrap();
    let cal = evaluate(&m0, &data.test, Some(&fit.map), 10).unwrap();
    assert_eq!(raw.accuracy, cal.accuracy);
    assert_eq!(raw.bins.bins.iter().map(|b| b.count).sum::<usize>(), data.test.len());
}

#[test]
fn csv_multilabel_trains_with_sigmoid_head() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_multilabel(300, 5, &PrevalenceProfile::Skewed { first: 0.5, last: 0.05 }, 4).unwrap();
    let Labels::MultiHot { labels, .. } = &ds.labels else { panic!("multi-hot expected") };
    let mut text = String::new();
    let d = ds.feature_len();
    text.push_str(&(0..d).map(|j| format!("x{j}")).chain((0..5).map(|j| format!("y{j}"))).collect::<Vec<_>>().join(","));
    text.push('\n');
    for (i, row) in labels.iter().enumerate() {
        let cells: Vec<String> = ds.row(i).iter().map(f32::to_string).chain(row.iter().map(|&b| u8::from(b).to_string())).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    let path = dir.path().join("train.csv");
    std::fs::write(&path, text).unwrap();
    let loaded = load_csv(&path, CsvSchema { label_columns: 5, has_header: true }).unwrap();
    assert_eq!(loaded, ds);

    let cfg = LadderConfig { teacher_epochs: 2, learning_rate: 1e-3, ..LadderConfig::default() };
    let data = prepare_data(&loaded, ds.subset(&(0..60).collect::<Vec<_>>(), ikd::data::SplitTag::Test), &cfg).unwrap();
    let (m0, _) = train_teacher(&Structure::dense(d, &[16], 5, Head::Sigmoid), &data, &cfg).unwrap();
    let probs = probabilities(&dataset_logits(&m0, &data.test).unwrap(), 5, Head::Sigmoid);
    assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));
    let m = evaluate(&m0, &data.test, None, 10).unwrap();
    assert!((0.0..=1.0).contains(&m.ece));
    assert!(m.macro_ece.is_some());
}
