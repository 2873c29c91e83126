//! Input embeddings, coordinate encodings and class conditioning.

use crate::blocks::Grid;
use crate::dist::dmol::to_unit;
use crate::dist::LEVELS;
use crate::error::{invalid, Error, Result};
use crate::image::{Image, CHANNELS};
use crate::params::{glorot, Bound, ParamStore};
use crate::rng::Rng;
use crate::scalar::{lit, Scalar};
use crate::tensor::{Graph, ParamId, Tensor, Var};

/// Which intensity table an image is looked up in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    /// Conditioning images: one table per colour channel.
    Source,
    /// Previously generated intensities: one table shared by all channels.
    DecoderInput,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoordKind {
    Sinusoidal,
    Learned,
}

/// Intensity and class embedding tables. The three per-channel source
/// tables are stored stacked as one `[3 * 256, d]` parameter.
#[derive(Clone, Debug)]
pub struct EmbeddingTables {
    pub d: usize,
    pub source: Option<ParamId>,
    pub output: Option<ParamId>,
    pub class: Option<(ParamId, usize)>,
}

impl EmbeddingTables {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        d: usize,
        source: bool,
        output: bool,
        n_classes: Option<usize>,
        rng: &mut Rng,
    ) -> Self {
        let source = source.then(|| store.add("embed.source", glorot(&[CHANNELS * LEVELS, d], LEVELS, d, rng)));
        let output = output.then(|| store.add("embed.output", glorot(&[LEVELS, d], LEVELS, d, rng)));
        let class = n_classes.map(|n| (store.add("embed.class", glorot(&[n, d], n, d, rng)), n));
        Self { d, source, output, class }
    }
}

fn table_ids(img: &Image, role: Role) -> Vec<usize> {
    img.data()
        .iter()
        .enumerate()
        .map(|(i, &v)| match role {
            Role::Source => (i % CHANNELS) * LEVELS + v as usize,
            Role::DecoderInput => v as usize,
        })
        .collect()
}

/// Per-channel embeddings shaped `[h, w * 3, d]`.
pub fn embed_categorical<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    tables: &EmbeddingTables,
    img: &Image,
    role: Role,
) -> Result<Var> {
    let table = match role {
        Role::Source => tables.source,
        Role::DecoderInput => tables.output,
    }
    .ok_or_else(|| invalid(format!("no {role:?} embedding table")))?;
    let e = g.embedding(p[table], &table_ids(img, role))?;
    g.reshape(e, &[img.height(), img.width() * CHANNELS, tables.d])
}

/// Learned linear map of each pixel's scaled channel triple, a 1x3 convolution
/// with stride 3. Output `[h, w, d]`.
pub fn embed_ordinal<T: Scalar>(g: &mut Graph<T>, weight: Var, bias: Var, img: &Image) -> Result<Var> {
    let x: Vec<T> = img.data().iter().map(|&v| to_unit(v)).collect();
    let x = g.constant(Tensor::new(vec![img.height() * img.width(), CHANNELS], x)?);
    let y = g.matmul(x, weight)?;
    let y = g.add_bias(y, bias)?;
    let d = g.shape(y)[1];
    g.reshape(y, &[img.height(), img.width(), d])
}

/// Sinusoidal coordinates for every position of `grid`, `[positions, d]`.
/// The first half of each vector encodes the row, the second half the
/// combined column/channel index `col * channels + channel`.
pub fn sinusoidal_table<T: Scalar>(grid: Grid, d: usize) -> Result<Tensor<T>> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::Config(format!("sinusoidal coordinates need d divisible by 4, got {d}")));
    }
    let half = d / 2;
    let n = grid.positions();
    let mut out = Vec::with_capacity(n * d);
    for p in 0..n {
        let (r, c, ch) = grid.coords(p);
        for pos in [r, c * grid.channels + ch] {
            for i in 0..half / 2 {
                let angle = pos as f64 / 10000f64.powf((2 * i) as f64 / half as f64);
                out.push(lit(angle.sin()));
                out.push(lit(angle.cos()));
            }
        }
    }
    Tensor::new(vec![n, d], out)
}

#[derive(Clone, Debug)]
pub enum CoordinateEncoding {
    Sinusoidal { grid: Grid, d: usize },
    Learned { grid: Grid, table: ParamId },
}

impl CoordinateEncoding {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        kind: CoordKind,
        grid: Grid,
        d: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        match kind {
            CoordKind::Sinusoidal => {
                sinusoidal_table::<f64>(Grid::new(1, 1, 1), d)?;
                Ok(Self::Sinusoidal { grid, d })
            }
            CoordKind::Learned => {
                if d == 0 || d % 2 != 0 {
                    return Err(Error::Config(format!("learned coordinates need even d, got {d}")));
                }
                let n = grid.positions();
                Ok(Self::Learned {
                    grid,
                    table: store.add(name, glorot(&[n, d], n, d, rng)),
                })
            }
        }
    }

    pub fn grid(&self) -> Grid {
        match *self {
            Self::Sinusoidal { grid, .. } | Self::Learned { grid, .. } => grid,
        }
    }

    /// Encodings `[positions, d]` as a graph node.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound) -> Result<Var> {
        match *self {
            Self::Sinusoidal { grid, d } => Ok(g.constant(sinusoidal_table(grid, d)?)),
            Self::Learned { table, .. } => Ok(p[table]),
        }
    }
}

/// Adds the class vector to every row of `x: [n, d]`.
pub fn add_class_embedding<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    x: Var,
    class_id: usize,
    tables: &EmbeddingTables,
) -> Result<Var> {
    let (table, n_classes) = tables.class.ok_or_else(|| invalid("model has no class embeddings"))?;
    if class_id >= n_classes {
        return Err(Error::IndexOutOfRange {
            what: "class id",
            index: class_id,
            limit: n_classes,
        });
    }
    let rows = g.shape(x)[0];
    let c = g.embedding(p[table], &vec![class_id; rows])?;
    g.add(x, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn setup(d: usize) -> (ParamStore<f64>, EmbeddingTables) {
        let mut store = ParamStore::new();
        let t = EmbeddingTables::new(&mut store, d, true, true, Some(3), &mut Rng::new(5));
        (store, t)
    }

    #[test]
    fn categorical_shape() {
        let (store, t) = setup(16);
        let img = Image::random(8, 8, &mut Rng::new(1));
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        for role in [Role::Source, Role::DecoderInput] {
            let e = embed_categorical(&mut g, &p, &t, &img, role).unwrap();
            assert_eq!(g.shape(e), &[8, 24, 16]);
        }
    }

    #[test]
    fn identity_table_lookup() {
        let mut store = ParamStore::<f64>::new();
        let out = store.add("embed.output", Tensor::eye(256));
        let t = EmbeddingTables {
            d: 256,
            source: None,
            output: Some(out),
            class: None,
        };
        let img = Image::new(1, 1, vec![7, 0, 0]).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let e = embed_categorical(&mut g, &p, &t, &img, Role::DecoderInput).unwrap();
        let row = &g.value(e).data()[..256];
        assert_eq!(row[7], 1.0);
        assert_eq!(row.iter().sum::<f64>(), 1.0);
        assert!(embed_categorical(&mut g, &p, &t, &img, Role::Source).is_err());
    }

    #[test]
    fn source_channels_use_distinct_tables() {
        let (store, t) = setup(8);
        let img = Image::new(1, 1, vec![9, 9, 9]).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let e = embed_categorical(&mut g, &p, &t, &img, Role::Source).unwrap();
        let v = g.value(e).data();
        assert_ne!(&v[0..8], &v[8..16]);
        let e = embed_categorical(&mut g, &p, &t, &img, Role::DecoderInput).unwrap();
        let v = g.value(e).data();
        assert_eq!(&v[0..8], &v[8..16]);
    }

    #[test]
    fn ordinal_embedding() {
        let img = Image::new(1, 2, vec![255, 255, 255, 0, 0, 0]).unwrap();
        let mut g = Graph::<f64>::new();
        let w = g.constant(Tensor::ones(&[3, 1]));
        let b = g.constant(Tensor::zeros(&[1]));
        let e = embed_ordinal(&mut g, w, b, &img).unwrap();
        assert_eq!(g.shape(e), &[1, 2, 1]);
        assert_eq!(g.value(e).data(), &[3.0, -3.0]);

        let w0 = g.constant(Tensor::zeros(&[3, 4]));
        let b0 = g.constant(Tensor::from_f64(&[4], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let img = Image::random(8, 8, &mut Rng::new(2));
        let e = embed_ordinal(&mut g, w0, b0, &img).unwrap();
        assert_eq!(g.shape(e), &[8, 8, 4]);
        assert!(g.value(e).data().chunks(4).all(|r| r == [1.0, 2.0, 3.0, 4.0]));
    }

    #[test]
    fn sinusoidal_values() {
        let t = sinusoidal_table::<f64>(Grid::new(8, 8, 3), 32).unwrap();
        assert_eq!(&t.data()[..2], &[0.0, 1.0]);
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(t, sinusoidal_table(Grid::new(8, 8, 3), 32).unwrap());
        let distinct: HashSet<Vec<u64>> = t.data().chunks(32).map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
        assert_eq!(distinct.len(), 192);
        // position 4 is row 0, col 1, green: pos_c = 4
        assert!((t.data()[4 * 32 + 16] - 4f64.sin()).abs() < 1e-15);
        assert!(sinusoidal_table::<f64>(Grid::new(2, 2, 3), 30).is_err());
    }

    #[test]
    fn coordinate_kinds() {
        let mut store = ParamStore::<f64>::new();
        let grid = Grid::new(2, 2, 3);
        let rng = &mut Rng::new(0);
        assert!(CoordinateEncoding::new(&mut store, "c", CoordKind::Sinusoidal, grid, 6, rng).is_err());
        assert!(CoordinateEncoding::new(&mut store, "c", CoordKind::Learned, grid, 5, rng).is_err());
        let learned = CoordinateEncoding::new(&mut store, "c", CoordKind::Learned, grid, 6, rng).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = learned.encode(&mut g, &p).unwrap();
        assert_eq!(g.shape(x), &[12, 6]);
        let loss = g.sum_all(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.param(store.find("c").unwrap()).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn class_embedding() {
        let (store, t) = setup(4);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[5, 4]));
        let a = add_class_embedding(&mut g, &p, x, 0, &t).unwrap();
        let b = add_class_embedding(&mut g, &p, x, 2, &t).unwrap();
        let diff: Vec<f64> = g.value(a).data().iter().zip(g.value(b).data()).map(|(x, y)| x - y).collect();
        assert!(diff.chunks(4).all(|r| r == &diff[..4]));
        assert!(diff.iter().any(|&v| v != 0.0));
        assert!(add_class_embedding(&mut g, &p, x, 3, &t).is_err());

        let mut zero = ParamStore::<f64>::new();
        let table = zero.add("embed.class", Tensor::zeros(&[2, 4]));
        let tz = EmbeddingTables {
            d: 4,
            source: None,
            output: None,
            class: Some((table, 2)),
        };
        let mut g = Graph::new();
        let p = zero.bind(&mut g);
        let x = g.constant(Tensor::full(&[3, 4], 1.5));
        let y = add_class_embedding(&mut g, &p, x, 1, &tz).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }
}
