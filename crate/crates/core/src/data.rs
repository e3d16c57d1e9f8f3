//! Dataset loading: IDX image/label files, the graph bundle directory format
//! and class-stratified subsampling.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gcn::Graph;
use crate::matrix::Matrix;
use crate::mlp::Dataset;
use crate::rng::Rng;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// A parsed IDX file of unsigned bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxFile {
    pub magic: u32,
    pub dims: Vec<u32>,
    pub payload: Vec<u8>,
}

fn format_err(path: &Path, offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason: reason.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Reads an IDX file and checks it against the expected magic number.
pub fn read_idx(path: impl AsRef<Path>, expected_magic: u32) -> Result<IdxFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(path, &bytes, expected_magic)
}

fn parse_idx(path: &Path, bytes: &[u8], expected_magic: u32) -> Result<IdxFile> {
    let magic = be_u32(bytes, 0).ok_or_else(|| format_err(path, bytes.len(), "truncated header"))?;
    if magic != expected_magic {
        return Err(format_err(
            path,
            0,
            format!("bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}"),
        ));
    }
    let n_dims = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(n_dims);
    for d in 0..n_dims {
        let at = 4 + 4 * d;
        dims.push(be_u32(bytes, at).ok_or_else(|| format_err(path, bytes.len(), format!("truncated dimension {d}")))?);
    }
    let header = 4 + 4 * n_dims;
    let expected = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .ok_or_else(|| format_err(path, 4, "dimension product overflows"))?;
    let have = bytes.len() - header;
    if have < expected {
        return Err(format_err(
            path,
            bytes.len(),
            format!("truncated payload: {have} of {expected} bytes"),
        ));
    }
    if have > expected {
        return Err(format_err(
            path,
            header + expected,
            format!("{} trailing bytes after payload", have - expected),
        ));
    }
    Ok(IdxFile {
        magic,
        dims,
        payload: bytes[header..].to_vec(),
    })
}

/// Images as a `pixels x samples` matrix scaled to `[0, 1]`.
pub fn read_idx_images(path: impl AsRef<Path>) -> Result<Matrix> {
    let f = read_idx(path, IDX_IMAGES_MAGIC)?;
    let n = f.dims[0] as usize;
    let pixels = f.dims[1] as usize * f.dims[2] as usize;
    Ok(Matrix::from_fn(pixels, n, |p, s| f64::from(f.payload[s * pixels + p]) / 255.0))
}

/// Raw label bytes.
pub fn read_idx_label_bytes(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    Ok(read_idx(path, IDX_LABELS_MAGIC)?.payload)
}

/// Labels as a `n_classes x samples` one-hot matrix.
pub fn read_idx_labels(path: impl AsRef<Path>, n_classes: usize) -> Result<Matrix> {
    let labels = read_idx_label_bytes(path)?;
    one_hot(labels.iter().map(|&l| l as usize), labels.len(), n_classes)
}

/// One-hot columns from class indices.
pub fn one_hot(labels: impl IntoIterator<Item = usize>, n: usize, n_classes: usize) -> Result<Matrix> {
    let mut y = Matrix::zeros(n_classes, n);
    for (s, l) in labels.into_iter().enumerate() {
        if l >= n_classes {
            return Err(Error::Data(format!(
                "sample {s} has label {l}, expected < {n_classes}"
            )));
        }
        y.set(l, s, 1.0);
    }
    Ok(y)
}

pub fn write_idx(path: impl AsRef<Path>, magic: u32, dims: &[u32], payload: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + payload.len());
    out.extend_from_slice(&magic.to_be_bytes());
    for d in dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(payload);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_idx_images(path: impl AsRef<Path>, n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Result<()> {
    write_idx(path, IDX_IMAGES_MAGIC, &[n, rows, cols], pixels)
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    write_idx(path, IDX_LABELS_MAGIC, &[labels.len() as u32], labels)
}

/// Loads `<prefix>-images-idx3-ubyte` and `<prefix>-labels-idx1-ubyte` from a
/// directory, with `prefix` typically `train` or `t10k`.
pub fn load_idx_dataset(dir: impl AsRef<Path>, prefix: &str, n_classes: usize) -> Result<Dataset> {
    let dir = dir.as_ref();
    let x = read_idx_images(dir.join(format!("{prefix}-images-idx3-ubyte")))?;
    let y = read_idx_labels(dir.join(format!("{prefix}-labels-idx1-ubyte")), n_classes)?;
    if x.cols() != y.cols() {
        return Err(Error::Data(format!(
            "{} images but {} labels",
            x.cols(),
            y.cols()
        )));
    }
    Dataset::new(x, y)
}

/// Indices of a class-stratified subset of size `n`, in increasing order.
/// Each class gets `n` times its share, rounded by largest remainder.
pub fn stratified_indices(labels: &[usize], n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let total = labels.len();
    if n > total {
        return Err(Error::Argument(format!(
            "requested {n} samples but only {total} are available"
        )));
    }
    if n == total {
        return Ok((0..total).collect());
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut quota: Vec<(usize, usize, usize)> = Vec::new(); // (class, base, remainder numerator)
    for (&c, idx) in &by_class {
        let share = n * idx.len();
        quota.push((c, share / total, share % total));
    }
    let assigned: usize = quota.iter().map(|q| q.1).sum();
    let mut order: Vec<usize> = (0..quota.len()).collect();
    order.sort_by(|&a, &b| quota[b].2.cmp(&quota[a].2).then(quota[a].0.cmp(&quota[b].0)));
    for &k in order.iter().take(n - assigned) {
        quota[k].1 += 1;
    }
    let mut chosen = Vec::with_capacity(n);
    for (c, q, _) in quota {
        let mut idx = by_class[&c].clone();
        rng.shuffle(&mut idx);
        chosen.extend_from_slice(&idx[..q]);
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Class-stratified subset of `n` samples.
pub fn subsample(data: &Dataset, n: usize, rng: &mut Rng) -> Result<Dataset> {
    let idx = stratified_indices(&data.labels(), n, rng)?;
    Ok(data.select(&idx))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => format_err(path, offset as usize, format!("{other:?}")),
    }
}

fn parse_node(field: &str, path: &Path, line: usize, n: usize) -> Result<usize> {
    let v: usize = field
        .parse()
        .map_err(|_| Error::Data(format!("{}: line {line}: bad node id {field:?}", path.display())))?;
    if v >= n {
        return Err(Error::Data(format!(
            "{}: line {line}: node {v} out of range for {n} nodes",
            path.display()
        )));
    }
    Ok(v)
}

/// Loads a graph bundle directory:
///
/// * `features.csv`: one row of numbers per node; the row count fixes `N`.
/// * `edges.tsv`: `u<TAB>v` per line, 0-based, no self-loops.
/// * `labels.csv`: `node,class` per line; every node needs a label.
/// * `masks.csv`: `node,train` or `node,test`; unlisted nodes are in neither.
///
/// Lines starting with `#` are ignored. A first line of `labels.csv` or
/// `masks.csv` whose node field is not a number is treated as a header.
pub fn load_graph(dir: impl AsRef<Path>) -> Result<Graph> {
    let dir = dir.as_ref();
    let fpath = dir.join("features.csv");
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (k, rec) in csv_reader(&fpath)?.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(&fpath, e))?;
        let row = rec
            .iter()
            .map(|f| {
                f.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    Error::Data(format!("{}: row {}: bad feature {f:?}", fpath.display(), k + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Data(format!(
                    "{}: row {} has {} features, expected {}",
                    fpath.display(),
                    k + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    let n = rows.len();
    if n == 0 {
        return Err(Error::Data(format!("{}: no nodes", fpath.display())));
    }
    let features = Matrix::from_rows(&rows);

    let epath = dir.join("edges.tsv");
    let mut adjacency = Matrix::zeros(n, n);
    for (k, line) in read_text(&epath)?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Data(format!(
                "{}: line {}: expected two node ids",
                epath.display(),
                k + 1
            )));
        };
        let u = parse_node(a, &epath, k + 1, n)?;
        let v = parse_node(b, &epath, k + 1, n)?;
        if u == v {
            return Err(Error::Data(format!("{}: line {}: self-loop on node {u}", epath.display(), k + 1)));
        }
        adjacency.set(u, v, 1.0);
        adjacency.set(v, u, 1.0);
    }

    let lpath = dir.join("labels.csv");
    let mut label_of: Vec<Option<usize>> = vec![None; n];
    for (k, rec) in csv_reader(&lpath)?.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(&lpath, e))?;
        if rec.len() != 2 {
            return Err(Error::Data(format!("{}: line {}: expected node,class", lpath.display(), k + 1)));
        }
        if k == 0 && rec[0].parse::<usize>().is_err() {
            continue;
        }
        let node = parse_node(&rec[0], &lpath, k + 1, n)?;
        let class: usize = rec[1]
            .parse()
            .map_err(|_| Error::Data(format!("{}: line {}: bad class {:?}", lpath.display(), k + 1, &rec[1])))?;
        if label_of[node].replace(class).is_some() {
            return Err(Error::Data(format!("{}: node {node} labelled twice", lpath.display())));
        }
    }
    let labels: Vec<usize> = label_of
        .iter()
        .enumerate()
        .map(|(i, l)| l.ok_or_else(|| Error::Data(format!("{}: node {i} has no label", lpath.display()))))
        .collect::<Result<_>>()?;
    let k_classes = labels.iter().max().map_or(0, |m| m + 1);
    let y = one_hot(labels.iter().copied(), n, k_classes)?.transpose();

    let mpath = dir.join("masks.csv");
    let mut train = vec![false; n];
    let mut test = vec![false; n];
    for (k, rec) in csv_reader(&mpath)?.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(&mpath, e))?;
        if rec.len() != 2 {
            return Err(Error::Data(format!("{}: line {}: expected node,split", mpath.display(), k + 1)));
        }
        if k == 0 && rec[0].parse::<usize>().is_err() {
            continue;
        }
        let node = parse_node(&rec[0], &mpath, k + 1, n)?;
        if train[node] || test[node] {
            return Err(Error::Data(format!("{}: node {node} assigned twice", mpath.display())));
        }
        match &rec[1] {
            "train" => train[node] = true,
            "test" => test[node] = true,
            other => {
                return Err(Error::Data(format!(
                    "{}: line {}: split {other:?} is not train or test",
                    mpath.display(),
                    k + 1
                )))
            }
        }
    }
    Graph::new(adjacency, features, y, train, test)
}

/// Writes a graph in the bundle format read by [`load_graph`].
pub fn write_graph(dir: impl AsRef<Path>, g: &Graph) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut edges = String::new();
    for i in 0..g.n_nodes() {
        for j in i + 1..g.n_nodes() {
            if g.adjacency.get(i, j) != 0.0 {
                edges.push_str(&format!("{i}\t{j}\n"));
            }
        }
    }
    let p = dir.join("edges.tsv");
    fs::write(&p, edges).map_err(|e| Error::io(&p, e))?;

    let p = dir.join("features.csv");
    let mut w = csv::Writer::from_path(&p).map_err(|e| csv_err(&p, e))?;
    for i in 0..g.n_nodes() {
        w.write_record(g.features.row(i).iter().map(|v| format!("{v:?}")))
            .map_err(|e| csv_err(&p, e))?;
    }
    w.flush().map_err(|e| Error::io(&p, e))?;

    let p = dir.join("labels.csv");
    let mut w = csv::Writer::from_path(&p).map_err(|e| csv_err(&p, e))?;
    for (i, l) in g.labels.argmax_rows().iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()]).map_err(|e| csv_err(&p, e))?;
    }
    w.flush().map_err(|e| Error::io(&p, e))?;

    let p = dir.join("masks.csv");
    let mut w = csv::Writer::from_path(&p).map_err(|e| csv_err(&p, e))?;
    for i in 0..g.n_nodes() {
        let split = if g.train_mask[i] {
            "train"
        } else if g.test_mask[i] {
            "test"
        } else {
            continue;
        };
        w.write_record([i.to_string(), split.to_string()]).map_err(|e| csv_err(&p, e))?;
    }
    w.flush().map_err(|e| Error::io(&p, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_fixture_scales_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img");
        write_idx_images(&p, 2, 2, 2, &[0, 255, 128, 0, 255, 0, 0, 128]).unwrap();
        let m = read_idx_images(&p).unwrap();
        assert_eq!(m.shape(), (4, 2));
        assert_eq!(m.col_to_vec(0), vec![0.0, 1.0, 128.0 / 255.0, 0.0]);
        assert_eq!(m.col_to_vec(1), vec![1.0, 0.0, 0.0, 128.0 / 255.0]);
    }

    #[test]
    fn bad_magic_is_format_error_at_zero() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img");
        write_idx(&p, 0x999, &[], &[]).unwrap();
        let e = read_idx_images(&p).unwrap_err();
        assert!(matches!(e, Error::Format { offset: 0, .. }), "{e}");
    }

    #[test]
    fn truncated_payload_reports_end_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img");
        write_idx(&p, IDX_IMAGES_MAGIC, &[2, 2, 2], &[1, 2, 3]).unwrap();
        let e = read_idx_images(&p).unwrap_err();
        assert!(matches!(e, Error::Format { offset: 19, .. }), "{e}");
    }

    #[test]
    fn empty_images_are_fine() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img");
        write_idx_images(&p, 0, 28, 28, &[]).unwrap();
        assert_eq!(read_idx_images(&p).unwrap().shape(), (784, 0));
    }

    #[test]
    fn labels_one_hot_and_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lab");
        write_idx_labels(&p, &[2, 0]).unwrap();
        let y = read_idx_labels(&p, 3).unwrap();
        assert_eq!(y.col_to_vec(0), vec![0.0, 0.0, 1.0]);
        assert_eq!(y.col_to_vec(1), vec![1.0, 0.0, 0.0]);
        write_idx_labels(&p, &[0, 3]).unwrap();
        let e = read_idx_labels(&p, 3).unwrap_err();
        assert!(matches!(&e, Error::Data(msg) if msg.contains("sample 1")), "{e}");
    }

    #[test]
    fn stratified_subsample_keeps_proportions() {
        let labels: Vec<usize> = (0..103).map(|i| if i % 10 < 7 { 0 } else if i % 10 < 9 { 1 } else { 2 }).collect();
        let mut rng = Rng::new(5);
        let idx = stratified_indices(&labels, 40, &mut rng).unwrap();
        assert_eq!(idx.len(), 40);
        for c in 0..3 {
            let orig = labels.iter().filter(|&&l| l == c).count() as f64;
            let got = idx.iter().filter(|&&i| labels[i] == c).count() as f64;
            assert!((got - orig * 40.0 / 103.0).abs() <= 1.0);
        }
        assert_eq!(idx, stratified_indices(&labels, 40, &mut Rng::new(5)).unwrap());
        assert_eq!(stratified_indices(&labels, 103, &mut rng).unwrap(), (0..103).collect::<Vec<_>>());
        assert!(matches!(stratified_indices(&labels, 104, &mut rng), Err(Error::Argument(_))));
    }

    fn write_bundle(dir: &Path, edges: &str, masks: &str) {
        fs::write(dir.join("features.csv"), "1.0,0.0\n0.0,1.0\n0.5,0.5\n").unwrap();
        fs::write(dir.join("edges.tsv"), edges).unwrap();
        fs::write(dir.join("labels.csv"), "node,class\n0,0\n1,1\n2,0\n").unwrap();
        fs::write(dir.join("masks.csv"), masks).unwrap();
    }

    #[test]
    fn path_graph_fixture() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(dir.path(), "0\t1\n1\t2\n", "0,train\n2,test\n");
        let g = load_graph(dir.path()).unwrap();
        assert_eq!(g.adjacency, Matrix::from_rows(&[[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]]));
        assert_eq!(g.train_mask, vec![true, false, false]);
        assert_eq!(g.test_mask, vec![false, false, true]);
    }

    #[test]
    fn graph_corruptions_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(dir.path(), "0\t5\n", "0,train\n");
        assert!(matches!(load_graph(dir.path()), Err(Error::Data(_))));
        write_bundle(dir.path(), "0\t1\n", "0,train\n0,test\n");
        assert!(matches!(load_graph(dir.path()), Err(Error::Data(_))));
    }
}
