//! Datasets: seeded synthetic generators and CSV / IDX file readers.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::archspec::{DataConfig, NetworkSpec};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Labelled samples stored row-major, one flat feature row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub sample_len: usize,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        features: Vec<f64>,
        labels: Vec<usize>,
        sample_len: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let name = name.into();
        if sample_len == 0 || features.len() != labels.len() * sample_len {
            return Err(Error::arg(
                "dataset",
                format!(
                    "{name}: {} features do not split into {} samples of {sample_len}",
                    features.len(),
                    labels.len()
                ),
            ));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::arg("dataset", format!("{name}: label {l} >= {num_classes} classes")));
        }
        Ok(Dataset {
            name,
            features,
            labels,
            sample_len,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.features[i * self.sample_len..(i + 1) * self.sample_len]
    }

    /// Samples `indices` stacked into a `[B, sample_shape…]` tensor.
    pub fn batch(&self, indices: &[usize], sample_shape: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(sample_shape);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("batch shape"), labels)
    }

    /// Splits off the trailing `n` samples.
    pub fn split_tail(mut self, n: usize) -> (Dataset, Dataset) {
        let keep = self.len() - n.min(self.len());
        let tail_features = self.features.split_off(keep * self.sample_len);
        let tail_labels = self.labels.split_off(keep);
        let tail = Dataset {
            name: format!("{}[eval]", self.name),
            features: tail_features,
            labels: tail_labels,
            sample_len: self.sample_len,
            num_classes: self.num_classes,
        };
        (self, tail)
    }
}

/// Gaussian blobs: `centers_per_class` centers per class drawn from
/// `N(0, I)`, samples around them with standard deviation `spread`, and a
/// `noise` fraction of labels replaced by a uniformly drawn class.
///
/// Train and eval samples come from separate streams around the same centers.
pub fn blobs(cfg: &DataConfig, dim: usize, classes: usize) -> (Dataset, Dataset) {
    let mut centers_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per = cfg.centers_per_class.max(1);
    let centers: Vec<Vec<f64>> = (0..classes * per)
        .map(|_| {
            (0..dim)
                .map(|_| centers_rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let draw = |stream: u64, n: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream);
        let mut features = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % classes;
            let center = &centers[class * per + rng.random_range(0..per)];
            features.extend(
                center
                    .iter()
                    .map(|c| c + cfg.spread * rng.sample::<f64, _>(StandardNormal)),
            );
            let flip = rng.random::<f64>() < cfg.noise;
            let other = rng.random_range(0..classes);
            labels.push(if flip { other } else { class });
        }
        (features, labels)
    };
    let (tf, tl) = draw(1, cfg.train_size);
    let (ef, el) = draw(2, cfg.eval_size);
    (
        Dataset::new("blobs", tf, tl, dim, classes).expect("consistent"),
        Dataset::new("blobs[eval]", ef, el, dim, classes).expect("consistent"),
    )
}

/// Two interleaved spirals in the plane; `spread` scales the jitter
/// (standard deviation `0.1·spread`).
pub fn two_spirals(cfg: &DataConfig) -> (Dataset, Dataset) {
    let draw = |stream: u64, n: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream);
        let mut features = Vec::with_capacity(n * 2);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % 2;
            let t = 0.5 + 3.0 * std::f64::consts::PI * rng.random::<f64>().sqrt();
            let sign = if class == 0 { 1.0 } else { -1.0 };
            for v in [t * t.cos(), t * t.sin()] {
                let jitter = 0.1 * cfg.spread * rng.sample::<f64, _>(StandardNormal);
                features.push(sign * v / 5.0 + jitter);
            }
            labels.push(class);
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let f = order.iter().flat_map(|&i| [features[2 * i], features[2 * i + 1]]).collect();
        let l = order.iter().map(|&i| labels[i]).collect();
        (f, l)
    };
    let (tf, tl) = draw(1, cfg.train_size);
    let (ef, el) = draw(2, cfg.eval_size);
    (
        Dataset::new("two_spirals", tf, tl, 2, 2).expect("consistent"),
        Dataset::new("two_spirals[eval]", ef, el, 2, 2).expect("consistent"),
    )
}

fn data_err(source: &str, offset: usize, reason: impl Into<String>) -> Error {
    Error::Data {
        source_name: source.to_string(),
        offset: offset as u64,
        reason: reason.into(),
    }
}

/// `label,f1,…,fd` rows. An optional first line whose first field is not an
/// integer is a header; it fixes the column count like the first row would.
pub fn parse_csv(name: &str, text: &str, sample_len: usize, num_classes: usize) -> Result<Dataset> {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut columns: Option<usize> = None;
    let mut offset = 0;
    for (lineno, line) in text.split_inclusive('\n').enumerate() {
        let start = offset;
        offset += line.len();
        let row = line.trim_end_matches(['\n', '\r']);
        if row.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        if lineno == 0 && fields[0].parse::<usize>().is_err() {
            columns = Some(fields.len());
            continue;
        }
        let expected = *columns.get_or_insert(fields.len());
        if fields.len() != expected {
            return Err(data_err(
                name,
                start,
                format!("row has {} fields, expected {expected}", fields.len()),
            ));
        }
        if fields.len() != sample_len + 1 {
            return Err(data_err(
                name,
                start,
                format!("row has {} features, network expects {sample_len}", fields.len() - 1),
            ));
        }
        let label: usize = fields[0]
            .parse()
            .map_err(|_| data_err(name, start, format!("label '{}' is not an integer", fields[0])))?;
        if label >= num_classes {
            return Err(data_err(name, start, format!("label {label} >= {num_classes} classes")));
        }
        labels.push(label);
        for f in &fields[1..] {
            let v: f64 = f
                .parse()
                .map_err(|_| data_err(name, start, format!("feature '{f}' is not a number")))?;
            features.push(v);
        }
    }
    Dataset::new(name, features, labels, sample_len, num_classes)
}

fn be_u32(bytes: &[u8], at: usize, name: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| data_err(name, at, "truncated header"))
}

/// IDX images (`0x00000803`, u8 `[n, rows, cols]`, rescaled to `[0, 1]`)
/// paired with IDX labels (`0x00000801`, u8 `[n]`).
pub fn parse_idx(
    images: (&str, &[u8]),
    labels: (&str, &[u8]),
    sample_len: usize,
    num_classes: usize,
) -> Result<Dataset> {
    let (iname, ib) = images;
    let (lname, lb) = labels;
    let magic = be_u32(ib, 0, iname)?;
    if magic != 0x0803 {
        return Err(data_err(iname, 0, format!("image magic {magic:#010x}, expected 0x00000803")));
    }
    let n = be_u32(ib, 4, iname)? as usize;
    let rows = be_u32(ib, 8, iname)? as usize;
    let cols = be_u32(ib, 12, iname)? as usize;
    if rows * cols != sample_len {
        return Err(data_err(
            iname,
            8,
            format!("images are {rows}x{cols}, network expects {sample_len} inputs"),
        ));
    }
    let body = &ib[16..];
    if body.len() != n * sample_len {
        return Err(data_err(
            iname,
            16 + body.len().min(n * sample_len),
            format!("{} pixel bytes for {n} images of {sample_len}", body.len()),
        ));
    }
    let magic = be_u32(lb, 0, lname)?;
    if magic != 0x0801 {
        return Err(data_err(lname, 0, format!("label magic {magic:#010x}, expected 0x00000801")));
    }
    let ln = be_u32(lb, 4, lname)? as usize;
    if ln != n {
        return Err(data_err(lname, 4, format!("{ln} labels for {n} images")));
    }
    let lbody = &lb[8..];
    if lbody.len() != n {
        return Err(data_err(lname, 8 + lbody.len().min(n), format!("{} label bytes for {n}", lbody.len())));
    }
    if let Some(i) = lbody.iter().position(|&l| l as usize >= num_classes) {
        return Err(data_err(lname, 8 + i, format!("label {} >= {num_classes} classes", lbody[i])));
    }
    let features = body.iter().map(|&p| p as f64 / 255.0).collect();
    let labels = lbody.iter().map(|&l| l as usize).collect();
    Dataset::new(iname, features, labels, sample_len, num_classes)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads one file source (`csv:<path>` or `idx:<images>,<labels>`).
pub fn load_file_source(source: &str, base: &Path, net: &NetworkSpec) -> Result<Dataset> {
    let (len, classes) = (net.input_len(), net.num_classes());
    let resolve = |p: &str| {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    if let Some(p) = source.strip_prefix("csv:") {
        let path = resolve(p);
        let bytes = read(&path)?;
        let text = String::from_utf8(bytes)
            .map_err(|e| data_err(p, e.utf8_error().valid_up_to(), "not UTF-8"))?;
        parse_csv(p, &text, len, classes)
    } else if let Some(pair) = source.strip_prefix("idx:") {
        let (ip, lp) = pair
            .split_once(',')
            .ok_or_else(|| Error::Config(format!("idx source '{pair}' needs <images>,<labels>")))?;
        let (ib, lb) = (read(&resolve(ip))?, read(&resolve(lp))?);
        parse_idx((ip, &ib), (lp, &lb), len, classes)
    } else {
        Err(Error::Config(format!(
            "unknown data source '{source}' (blobs, two_spirals, csv:<path>, idx:<images>,<labels>)"
        )))
    }
}

/// The train and eval sets named by the data section.
pub fn load_dataset(cfg: &DataConfig, base: &Path, net: &NetworkSpec) -> Result<(Dataset, Dataset)> {
    match cfg.source.as_str() {
        "blobs" => Ok(blobs(cfg, net.input_len(), net.num_classes())),
        "two_spirals" => {
            if net.input_len() != 2 || net.num_classes() != 2 {
                return Err(Error::Config("two_spirals needs 2 inputs and 2 classes".into()));
            }
            Ok(two_spirals(cfg))
        }
        source => {
            let train = load_file_source(source, base, net)?;
            match &cfg.eval_source {
                Some(e) => Ok((train, load_file_source(e, base, net)?)),
                None => {
                    let n = (train.len() as f64 * cfg.eval_fraction).floor() as usize;
                    Ok(train.split_tail(n))
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize) -> DataConfig {
        DataConfig {
            train_size: n,
            eval_size: n / 2,
            ..DataConfig::default()
        }
    }

    #[test]
    fn blobs_are_deterministic() {
        let a = blobs(&cfg(200), 5, 3);
        let b = blobs(&cfg(200), 5, 3);
        assert_eq!(a, b);
        assert_eq!(a.0.len(), 200);
        assert_eq!(a.1.len(), 100);
        assert_ne!(a.0.features[..5], a.1.features[..5]);
        let other = blobs(&DataConfig { seed: 2, ..cfg(200) }, 5, 3);
        assert_ne!(a.0, other.0);
        assert!((0..3).all(|c| a.0.labels.iter().filter(|&&l| l == c).count() >= 66));
    }

    #[test]
    fn label_noise_flips_some_labels() {
        let clean = blobs(&cfg(1000), 2, 4).0;
        let noisy = blobs(&DataConfig { noise: 0.5, ..cfg(1000) }, 2, 4).0;
        let changed = clean.labels.iter().zip(&noisy.labels).filter(|(a, b)| a != b).count();
        // Half are redrawn, a quarter of those land on the same class.
        assert!((300..450).contains(&changed), "{changed}");
    }

    #[test]
    fn spirals_shape() {
        let (t, e) = two_spirals(&cfg(64));
        assert_eq!((t.len(), t.sample_len, e.len()), (64, 2, 32));
        assert_eq!(t.labels.iter().filter(|&&l| l == 1).count(), 32);
    }

    #[test]
    fn csv_rows() {
        let d = parse_csv("t.csv", "label,a,b\n1,0.5,2\n0,-1,3e-1\n", 2, 2).unwrap();
        assert_eq!(d.labels, vec![1, 0]);
        assert_eq!(d.features, vec![0.5, 2.0, -1.0, 0.3]);
        let d = parse_csv("t.csv", "1,0.5,2\r\n\n0,1,1\n", 2, 2).unwrap();
        assert_eq!(d.len(), 2);
    }

    #[test]
    fn csv_errors_carry_offsets() {
        let text = "label,a,b\n1,0.5,2\n0,1\n";
        match parse_csv("t.csv", text, 2, 2) {
            Err(Error::Data { offset, .. }) => assert_eq!(offset, 18),
            other => panic!("{other:?}"),
        }
        match parse_csv("t.csv", "1,0.5,x\n", 2, 2) {
            Err(Error::Data { offset, reason, .. }) => {
                assert_eq!(offset, 0);
                assert!(reason.contains("'x'"));
            }
            other => panic!("{other:?}"),
        }
        assert!(parse_csv("t.csv", "5,0.5,1\n", 2, 2).is_err());
        assert!(parse_csv("t.csv", "1,0.5,1,1\n", 2, 2).is_err());
    }

    fn idx_images(n: u32, r: u32, c: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [0x0803, n, r, c] {
            v.extend_from_slice(&u32::to_be_bytes(x));
        }
        v.extend_from_slice(pixels);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [0x0801, labels.len() as u32] {
            v.extend_from_slice(&u32::to_be_bytes(x));
        }
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn idx_pair() {
        let img = idx_images(2, 2, 2, &[0, 255, 51, 102, 255, 255, 0, 0]);
        let lab = idx_labels(&[1, 0]);
        let d = parse_idx(("i", &img), ("l", &lab), 4, 2).unwrap();
        assert_eq!(d.labels, vec![1, 0]);
        assert_eq!(d.features[..4], [0.0, 1.0, 0.2, 0.4]);

        let mut bad = img.clone();
        bad[3] = 0x01;
        assert!(matches!(
            parse_idx(("i", &bad), ("l", &lab), 4, 2),
            Err(Error::Data { offset: 0, .. })
        ));
        let short = &img[..img.len() - 1];
        assert!(matches!(
            parse_idx(("i", short), ("l", &lab), 4, 2),
            Err(Error::Data { offset: 23, .. })
        ));
        assert!(parse_idx(("i", &img), ("l", &idx_labels(&[1])), 4, 2).is_err());
        assert!(matches!(
            parse_idx(("i", &img), ("l", &idx_labels(&[1, 7])), 4, 2),
            Err(Error::Data { offset: 9, .. })
        ));
    }

    #[test]
    fn batches_and_tail_split() {
        let d = Dataset::new("d", (0..12).map(f64::from).collect(), vec![0, 1, 0, 1], 3, 2).unwrap();
        let (x, y) = d.batch(&[2, 0], &[3]);
        assert_eq!(x.shape(), &[2, 3]);
        assert_eq!(x.data(), &[6.0, 7.0, 8.0, 0.0, 1.0, 2.0]);
        assert_eq!(y, vec![0, 0]);
        let (a, b) = d.split_tail(1);
        assert_eq!((a.len(), b.len()), (3, 1));
        assert_eq!(b.features, vec![9.0, 10.0, 11.0]);
    }
}
