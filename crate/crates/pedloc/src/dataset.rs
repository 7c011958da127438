//! On-disk formats and dataset plumbing: keypoint records, KITTI-style
//! label files, box matching, and train/validation splits.

use crate::error::{Error, Result};
use crate::skeleton::NUM_JOINTS;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{BufRead, Write};

/// One object row from a KITTI-style label file.
///
/// Fields follow the standard column order: type, truncated, occluded,
/// alpha, 2D bbox (left top right bottom), 3D dimensions (height width
/// length), 3D location (x y z in camera frame), rotation, and an
/// optional trailing score.
#[derive(Debug, Clone, PartialEq)]
pub struct KittiObject {
    pub label: String,
    pub truncated: f64,
    pub occluded: i64,
    pub alpha: f64,
    pub bbox: [f64; 4],
    pub dimensions: [f64; 3],
    pub location: [f64; 3],
    pub rotation_y: f64,
    pub score: Option<f64>,
}

impl KittiObject {
    /// Euclidean distance of the object center from the camera.
    pub fn distance(&self) -> f64 {
        let [x, y, z] = self.location;
        (x * x + y * y + z * z).sqrt()
    }
}

fn parse_field<T: std::str::FromStr>(tok: &str, line: usize, what: &str) -> Result<T> {
    tok.parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid {what}: {tok:?}"),
    })
}

/// Parses a KITTI-style label file. Blank lines are skipped; every other
/// line must have 15 fields, or 16 when a detection score is appended.
pub fn parse_kitti_labels(text: &str) -> Result<Vec<KittiObject>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = raw.split_whitespace().collect();
        if toks.len() != 15 && toks.len() != 16 {
            return Err(Error::Parse {
                line,
                message: format!("expected 15 or 16 fields, found {}", toks.len()),
            });
        }
        let f = |k: usize, what: &str| parse_field::<f64>(toks[k], line, what);
        out.push(KittiObject {
            label: toks[0].to_string(),
            truncated: f(1, "truncation")?,
            occluded: parse_field(toks[2], line, "occlusion")?,
            alpha: f(3, "alpha")?,
            bbox: [f(4, "bbox")?, f(5, "bbox")?, f(6, "bbox")?, f(7, "bbox")?],
            dimensions: [
                f(8, "dimension")?,
                f(9, "dimension")?,
                f(10, "dimension")?,
            ],
            location: [f(11, "location")?, f(12, "location")?, f(13, "location")?],
            rotation_y: f(14, "rotation")?,
            score: if toks.len() == 16 {
                Some(f(15, "score")?)
            } else {
                None
            },
        });
    }
    Ok(out)
}

/// One pedestrian observation in the whitespace-separated keypoint format.
///
/// Layout per line: `frame track_id` then 17 joints as `u v confidence`,
/// then `x1 y1 x2 y2` box corners, then optionally the ground-truth
/// distance (57 or 58 tokens total).
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointRecord {
    pub frame: u64,
    pub track_id: u64,
    pub joints: [[f64; 3]; NUM_JOINTS],
    pub bbox: [f64; 4],
    pub gt_distance: Option<f64>,
}

const TOKENS_BASE: usize = 2 + 3 * NUM_JOINTS + 4;

/// Reads keypoint records, skipping blank and `#`-comment lines.
pub fn read_keypoints<R: BufRead>(reader: R) -> Result<Vec<KeypointRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let raw = line?;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = trimmed.split_whitespace().collect();
        if toks.len() != TOKENS_BASE && toks.len() != TOKENS_BASE + 1 {
            return Err(Error::Parse {
                line: line_no,
                message: format!(
                    "expected {TOKENS_BASE} or {} tokens, found {}",
                    TOKENS_BASE + 1,
                    toks.len()
                ),
            });
        }
        let mut joints = [[0.0; 3]; NUM_JOINTS];
        for (j, chunk) in toks[2..2 + 3 * NUM_JOINTS].chunks_exact(3).enumerate() {
            joints[j] = [
                parse_field(chunk[0], line_no, "joint u")?,
                parse_field(chunk[1], line_no, "joint v")?,
                parse_field(chunk[2], line_no, "joint confidence")?,
            ];
            let c = joints[j][2];
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("joint {j} confidence {c} outside [0, 1]"),
                });
            }
        }
        let b = 2 + 3 * NUM_JOINTS;
        out.push(KeypointRecord {
            frame: parse_field(toks[0], line_no, "frame")?,
            track_id: parse_field(toks[1], line_no, "track id")?,
            joints,
            bbox: [
                parse_field(toks[b], line_no, "bbox")?,
                parse_field(toks[b + 1], line_no, "bbox")?,
                parse_field(toks[b + 2], line_no, "bbox")?,
                parse_field(toks[b + 3], line_no, "bbox")?,
            ],
            gt_distance: if toks.len() == TOKENS_BASE + 1 {
                Some(parse_field(toks[b + 4], line_no, "distance")?)
            } else {
                None
            },
        });
    }
    Ok(out)
}

/// Writes records in the format `read_keypoints` accepts. Floats use
/// shortest round-trip formatting, so read(write(x)) == x.
pub fn write_keypoints<W: Write>(records: &[KeypointRecord], mut writer: W) -> Result<()> {
    for r in records {
        let mut line = format!("{} {}", r.frame, r.track_id);
        for j in &r.joints {
            line.push_str(&format!(" {} {} {}", j[0], j[1], j[2]));
        }
        for b in &r.bbox {
            line.push_str(&format!(" {b}"));
        }
        if let Some(d) = r.gt_distance {
            line.push_str(&format!(" {d}"));
        }
        line.push('\n');
        writer.write_all(line.as_bytes())?;
    }
    Ok(())
}

/// Intersection over union of two `[x1, y1, x2, y2]` boxes. Degenerate
/// boxes (zero or negative area) yield 0.
pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let area = |r: &[f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy one-to-one matching: repeatedly pairs the highest-IoU unmatched
/// (left, right) combination at or above `threshold`. Ties break on the
/// lower left index, then the lower right index, so results are
/// deterministic. Returns (left index, right index) pairs sorted by left
/// index.
pub fn greedy_iou_matches(
    left: &[[f64; 4]],
    right: &[[f64; 4]],
    threshold: f64,
) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(left.len() * right.len());
    for (i, a) in left.iter().enumerate() {
        for (j, b) in right.iter().enumerate() {
            let v = iou(a, b);
            if v >= threshold && v > 0.0 {
                pairs.push((v, i, j));
            }
        }
    }
    // Descending IoU; index order breaks exact ties.
    pairs.sort_by(|x, y| {
        y.0.partial_cmp(&x.0)
            .unwrap()
            .then(x.1.cmp(&y.1))
            .then(x.2.cmp(&y.2))
    });
    let mut used_left = vec![false; left.len()];
    let mut used_right = vec![false; right.len()];
    let mut out = Vec::new();
    for (_, i, j) in pairs {
        if !used_left[i] && !used_right[j] {
            used_left[i] = true;
            used_right[j] = true;
            out.push((i, j));
        }
    }
    out.sort_unstable();
    out
}

/// Pairs keypoint records with pedestrian-class label objects by box
/// overlap and returns the matched records with `gt_distance` filled from
/// the object's 3D location. Records without a pedestrian match at or
/// above `threshold` are dropped. `threshold` must lie in (0, 1].
pub fn match_keypoints_to_labels(
    records: &[KeypointRecord],
    labels: &[KittiObject],
    threshold: f64,
) -> Result<Vec<KeypointRecord>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "IoU threshold {threshold} outside (0, 1]"
        )));
    }
    let pedestrians: Vec<&KittiObject> = labels
        .iter()
        .filter(|o| o.label == "Pedestrian")
        .collect();
    let left: Vec<[f64; 4]> = records.iter().map(|r| r.bbox).collect();
    let right: Vec<[f64; 4]> = pedestrians.iter().map(|o| o.bbox).collect();
    Ok(greedy_iou_matches(&left, &right, threshold)
        .into_iter()
        .map(|(i, j)| {
            let mut r = records[i].clone();
            r.gt_distance = Some(pedestrians[j].distance());
            r
        })
        .collect())
}

/// A seeded train/validation partition of a set of sample ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub seed: u64,
}

/// Splits `ids` into train and validation sets: a seeded shuffle takes
/// `floor(len * val_fraction)` ids for validation and leaves the rest for
/// training. Both halves come back sorted. The fraction must lie strictly
/// inside (0, 1) and `ids` must be non-empty; ids are assumed unique.
pub fn split_dataset<T: Copy + Ord>(
    ids: &[T],
    val_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit<T>> {
    if ids.is_empty() {
        return Err(Error::InvalidInput("cannot split an empty id list".into()));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "validation fraction {val_fraction} outside (0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = crate::nn::shuffle_indices(ids.len(), &mut rng);
    let n_val = (ids.len() as f64 * val_fraction).floor() as usize;
    let mut val: Vec<T> = idx[..n_val].iter().map(|&i| ids[i]).collect();
    let mut train: Vec<T> = idx[n_val..].iter().map(|&i| ids[i]).collect();
    val.sort_unstable();
    train.sort_unstable();
    Ok(DatasetSplit { train, val, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::BufReader;

    const SAMPLE_LABEL: &str = "Pedestrian 0.00 0 -0.20 712.40 143.00 810.73 307.92 \
         1.89 0.48 1.20 1.84 1.47 8.41 0.01";

    #[test]
    fn parses_reference_label_line() {
        let objs = parse_kitti_labels(SAMPLE_LABEL).unwrap();
        assert_eq!(objs.len(), 1);
        let o = &objs[0];
        assert_eq!(o.label, "Pedestrian");
        assert_eq!(o.bbox, [712.40, 143.00, 810.73, 307.92]);
        assert_eq!(o.location, [1.84, 1.47, 8.41]);
        assert_eq!(o.score, None);
        assert!((o.distance() - 8.733533076596206).abs() < 1e-15);
    }

    #[test]
    fn parses_score_and_rejects_bad_lines() {
        let with_score = format!("{SAMPLE_LABEL} 0.97");
        let objs = parse_kitti_labels(&with_score).unwrap();
        assert_eq!(objs[0].score, Some(0.97));

        let err = parse_kitti_labels("Pedestrian 1 2 3").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected error {other:?}"),
        }
        let two_lines = format!("{SAMPLE_LABEL}\nCar oops 0 0 0 0 0 0 0 0 0 0 0 0 0");
        match parse_kitti_labels(&two_lines).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    fn record(frame: u64, base: f64, gt: Option<f64>) -> KeypointRecord {
        let mut joints = [[0.0; 3]; NUM_JOINTS];
        for (i, j) in joints.iter_mut().enumerate() {
            *j = [base + i as f64 * 1.25, base + i as f64 * 0.5, 1.0];
        }
        KeypointRecord {
            frame,
            track_id: frame * 10,
            joints,
            bbox: [base, base, base + 40.0, base + 100.0],
            gt_distance: gt,
        }
    }

    #[test]
    fn records_round_trip_exactly() {
        let records = vec![
            record(0, 100.25, Some(7.5)),
            record(1, 333.125, None),
            record(2, 0.1, Some(12.000000000000002)),
        ];
        let mut buf = Vec::new();
        write_keypoints(&records, &mut buf).unwrap();
        let back = read_keypoints(BufReader::new(buf.as_slice())).unwrap();
        assert_eq!(records, back);
    }

    #[test]
    fn reader_skips_comments_and_reports_lines() {
        let mut buf = Vec::new();
        write_keypoints(&[record(5, 10.0, None)], &mut buf).unwrap();
        let text = format!("# header\n\n{}", String::from_utf8(buf).unwrap());
        let back = read_keypoints(BufReader::new(text.as_bytes())).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].frame, 5);

        let bad = "# ok\n1 2 3\n";
        match read_keypoints(BufReader::new(bad.as_bytes())).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn iou_known_values() {
        let a = [0.0, 0.0, 10.0, 10.0];
        assert_eq!(iou(&a, &a), 1.0);
        let b = [5.0, 0.0, 15.0, 10.0];
        // overlap 50, union 150
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        let c = [20.0, 20.0, 30.0, 30.0];
        assert_eq!(iou(&a, &c), 0.0);
        let degenerate = [3.0, 3.0, 3.0, 9.0];
        assert_eq!(iou(&a, &degenerate), 0.0);
    }

    /// Reference implementation: repeatedly scan the whole matrix for the
    /// best remaining pair. Greedy matching must agree with it.
    fn match_by_repeated_scan(
        left: &[[f64; 4]],
        right: &[[f64; 4]],
        threshold: f64,
    ) -> Vec<(usize, usize)> {
        let mut used_l = vec![false; left.len()];
        let mut used_r = vec![false; right.len()];
        let mut out = Vec::new();
        loop {
            let mut best: Option<(f64, usize, usize)> = None;
            for i in 0..left.len() {
                for j in 0..right.len() {
                    if used_l[i] || used_r[j] {
                        continue;
                    }
                    let v = iou(&left[i], &right[j]);
                    if v < threshold || v <= 0.0 {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some((bv, bi, bj)) => {
                            v > bv || (v == bv && (i, j) < (bi, bj))
                        }
                    };
                    if better {
                        best = Some((v, i, j));
                    }
                }
            }
            match best {
                Some((_, i, j)) => {
                    used_l[i] = true;
                    used_r[j] = true;
                    out.push((i, j));
                }
                None => break,
            }
        }
        out.sort_unstable();
        out
    }

    #[test]
    fn greedy_matching_agrees_with_scan_reference() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let gen_boxes = |rng: &mut ChaCha8Rng, n: usize| -> Vec<[f64; 4]> {
                (0..n)
                    .map(|_| {
                        let x = crate::exec::uniform_open01(rng) * 100.0;
                        let y = crate::exec::uniform_open01(rng) * 100.0;
                        let w = 5.0 + crate::exec::uniform_open01(rng) * 30.0;
                        let h = 5.0 + crate::exec::uniform_open01(rng) * 30.0;
                        [x, y, x + w, y + h]
                    })
                    .collect()
            };
            let left = gen_boxes(&mut rng, 8);
            let right = gen_boxes(&mut rng, 7);
            assert_eq!(
                greedy_iou_matches(&left, &right, 0.1),
                match_by_repeated_scan(&left, &right, 0.1)
            );
        }
    }

    #[test]
    fn matching_is_one_to_one_and_thresholded() {
        let left = [[0.0, 0.0, 10.0, 10.0], [0.5, 0.0, 10.5, 10.0]];
        let right = [[0.0, 0.0, 10.0, 10.0]];
        let m = greedy_iou_matches(&left, &right, 0.5);
        assert_eq!(m, vec![(0, 0)]);
        assert!(greedy_iou_matches(&left, &right, 1.1).is_empty());
    }

    #[test]
    fn split_is_deterministic_disjoint_and_sized() {
        let ids: Vec<usize> = (0..100).collect();
        let split = split_dataset(&ids, 0.2, 9).unwrap();
        assert_eq!(split.val.len(), 20);
        assert_eq!(split.train.len(), 80);
        assert_eq!(split.seed, 9);
        let mut all: Vec<usize> = split.train.iter().chain(&split.val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, ids);
        let again = split_dataset(&ids, 0.2, 9).unwrap();
        assert_eq!(split, again);
        let other_seed = split_dataset(&ids, 0.2, 10).unwrap();
        assert_ne!(split.val, other_seed.val);
    }

    #[test]
    fn split_rejects_degenerate_inputs() {
        let ids: Vec<u64> = (0..10).collect();
        assert!(split_dataset(&ids, 0.0, 0).is_err());
        assert!(split_dataset(&ids, 1.0, 0).is_err());
        assert!(split_dataset(&ids, 1.5, 0).is_err());
        assert!(split_dataset::<u64>(&[], 0.5, 0).is_err());
    }

    #[test]
    fn matching_fills_gt_from_pedestrian_labels_only() {
        let records = vec![
            record(0, 100.0, None),
            record(1, 400.0, None),
            record(2, 700.0, None),
        ];
        // Cyclist overlaps record 0 perfectly but must be ignored; the
        // pedestrian overlaps record 1.
        let text = "\
Cyclist 0.0 0 0.0 100.0 100.0 140.0 200.0 1.7 0.6 1.8 3.0 1.0 10.0 0.0\n\
Pedestrian 0.0 0 0.0 400.0 400.0 440.0 500.0 1.8 0.5 1.0 3.0 0.0 4.0 0.0\n";
        let labels = parse_kitti_labels(text).unwrap();
        let matched = match_keypoints_to_labels(&records, &labels, 0.5).unwrap();
        assert_eq!(matched.len(), 1);
        assert_eq!(matched[0].frame, 1);
        assert_eq!(matched[0].gt_distance, Some(5.0));
        assert!(match_keypoints_to_labels(&records, &labels, 0.0).is_err());
        assert!(match_keypoints_to_labels(&records, &labels, 1.5).is_err());
    }

    /// With all pairwise overlaps distinct, the set of matched pairs must
    /// not depend on the order records are listed in.
    #[test]
    fn matching_is_stable_under_record_permutation() {
        let a = record(10, 100.0, None);
        let b = record(11, 112.0, None);
        let text = "\
Pedestrian 0.0 0 0.0 104.0 100.0 144.0 200.0 1.8 0.5 1.0 0.0 0.0 8.0 0.0\n\
Pedestrian 0.0 0 0.0 118.0 100.0 158.0 200.0 1.8 0.5 1.0 0.0 0.0 6.0 0.0\n";
        let labels = parse_kitti_labels(text).unwrap();
        let fwd = match_keypoints_to_labels(&[a.clone(), b.clone()], &labels, 0.05).unwrap();
        let rev = match_keypoints_to_labels(&[b, a], &labels, 0.05).unwrap();
        let key = |r: &KeypointRecord| (r.frame, r.gt_distance.map(f64::to_bits));
        let mut fk: Vec<_> = fwd.iter().map(key).collect();
        let mut rk: Vec<_> = rev.iter().map(key).collect();
        fk.sort_unstable();
        rk.sort_unstable();
        assert_eq!(fk, rk);
    }

    #[test]
    fn reader_rejects_out_of_range_confidence() {
        let mut buf = Vec::new();
        let mut r = record(3, 10.0, None);
        r.joints[5][2] = 1.75;
        write_keypoints(&[r], &mut buf).unwrap();
        match read_keypoints(BufReader::new(buf.as_slice())).unwrap_err() {
            Error::Parse { line, message } => {
                assert_eq!(line, 1);
                assert!(message.contains("confidence"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }
}
